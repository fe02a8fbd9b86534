//! Task prompts: `[task][source spans][begin-target][target spans][end]`.
//!
//! A text span is a run of words. A motion span is
//! `<motion> agent (<sep> agent)* </motion>`, each agent laid out with the
//! active layout. Only slots after the begin-target token are scored.

use serde::{Deserialize, Serialize};

use crate::backbone::{motion_slots, motion_span_len, slots_to_motion, Sequence, Slot, Special, TargetShape, TokenClass, Vocabulary};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::patterns::{LayoutKind, MultiStreamTokens};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Span {
    Text(Vec<u32>),
    /// One or two agents.
    Motion(Vec<MultiStreamTokens>),
}

/// Structured content of one prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub task: Task,
    pub sources: Vec<Span>,
    pub targets: Vec<Span>,
}

/// A formatted prompt with its span boundaries as `[start, end)` slot ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct Formatted {
    pub sequence: Sequence,
    /// Index of the begin-target slot.
    pub target_start: usize,
    pub source_bounds: Vec<(usize, usize)>,
    pub target_bounds: Vec<(usize, usize)>,
}

impl Formatted {
    /// Slots up to and including the begin-target token.
    pub fn conditioning(&self) -> &[Slot] {
        &self.sequence.slots[..=self.target_start]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFormat {
    pub vocab: Vocabulary,
    pub layout: LayoutKind,
    pub max_len: usize,
}

impl PromptFormat {
    fn span_slots(&self, span: &Span, out: &mut Vec<Slot>) -> Result<()> {
        match span {
            Span::Text(words) => {
                if words.is_empty() {
                    return Err(Error::Format("empty text span".into()));
                }
                for &w in words {
                    if w as usize >= self.vocab.text {
                        return Err(Error::Vocab(format!("text id {w} outside {} words", self.vocab.text)));
                    }
                    out.push(Slot::Word(w));
                }
            }
            Span::Motion(agents) => {
                if agents.is_empty() {
                    return Err(Error::Format("motion span without agents".into()));
                }
                out.push(Slot::Word(self.vocab.special(Special::MotionBegin)));
                for (i, a) in agents.iter().enumerate() {
                    if a.levels() != self.vocab.levels || a.is_empty() {
                        return Err(Error::Format(format!(
                            "agent grid has {} streams × {} steps; expected {} streams",
                            a.levels(),
                            a.len(),
                            self.vocab.levels
                        )));
                    }
                    if i > 0 {
                        out.push(Slot::Word(self.vocab.special(Special::AgentSep)));
                    }
                    out.extend(motion_slots(a, self.layout));
                }
                out.push(Slot::Word(self.vocab.special(Special::MotionEnd)));
            }
        }
        Ok(())
    }

    pub fn format(&self, prompt: &Prompt) -> Result<Formatted> {
        let mut slots = vec![Slot::Word(self.vocab.special(Special::Task(prompt.task)))];
        let mut source_bounds = Vec::new();
        for s in &prompt.sources {
            let start = slots.len();
            self.span_slots(s, &mut slots)?;
            source_bounds.push((start, slots.len()));
        }
        let target_start = slots.len();
        slots.push(Slot::Word(self.vocab.special(Special::BeginTarget)));
        let mut target_bounds = Vec::new();
        for s in &prompt.targets {
            let start = slots.len();
            self.span_slots(s, &mut slots)?;
            target_bounds.push((start, slots.len()));
        }
        slots.push(Slot::Word(self.vocab.special(Special::End)));
        if slots.len() > self.max_len {
            return Err(Error::Truncation {
                what: "prompt positions",
                len: slots.len(),
                limit: self.max_len,
            });
        }
        let target = (0..slots.len()).map(|i| i > target_start).collect();
        Ok(Formatted {
            sequence: Sequence::new(slots, target, Some(prompt.task))?,
            target_start,
            source_bounds,
            target_bounds,
        })
    }

    fn word(&self, s: &Slot) -> Option<TokenClass> {
        match s {
            Slot::Word(w) => self.vocab.classify(*w).ok(),
            _ => None,
        }
    }

    fn parse_spans(&self, slots: &[Slot]) -> Result<Vec<Span>> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < slots.len() {
            match self.word(&slots[i]) {
                Some(TokenClass::Text(_)) => {
                    let mut words = Vec::new();
                    while let Some(TokenClass::Text(w)) = slots.get(i).and_then(|s| self.word(s)) {
                        words.push(w);
                        i += 1;
                    }
                    spans.push(Span::Text(words));
                }
                Some(TokenClass::Special(Special::MotionBegin)) => {
                    i += 1;
                    let mut agents = Vec::new();
                    let mut current = Vec::new();
                    loop {
                        let s = slots.get(i).ok_or_else(|| Error::Format("unterminated motion span".into()))?;
                        i += 1;
                        match self.word(s) {
                            Some(TokenClass::Special(Special::AgentSep)) | Some(TokenClass::Special(Special::MotionEnd)) => {
                                agents.push(slots_to_motion(&current, self.layout, self.vocab.levels)?);
                                current.clear();
                                if matches!(self.word(s), Some(TokenClass::Special(Special::MotionEnd))) {
                                    break;
                                }
                            }
                            Some(other) => return Err(Error::Format(format!("{other:?} inside a motion span"))),
                            None => current.push(s.clone()),
                        }
                    }
                    spans.push(Span::Motion(agents));
                }
                other => return Err(Error::Format(format!("unexpected {other:?} at slot {i}"))),
            }
        }
        Ok(spans)
    }

    /// Recovers the task and spans of a formatted sequence.
    pub fn parse(&self, slots: &[Slot]) -> Result<Prompt> {
        let task = match slots.first().and_then(|s| self.word(s)) {
            Some(TokenClass::Special(Special::Task(t))) => t,
            _ => return Err(Error::Format("prompt must open with a task token".into())),
        };
        let begin = Slot::Word(self.vocab.special(Special::BeginTarget));
        let split = slots
            .iter()
            .position(|s| *s == begin)
            .ok_or_else(|| Error::Format("prompt lacks a begin-target token".into()))?;
        let end = Slot::Word(self.vocab.special(Special::End));
        if slots.last() != Some(&end) || split + 1 > slots.len() - 1 {
            return Err(Error::Format("prompt must close with an end token".into()));
        }
        Ok(Prompt {
            task,
            sources: self.parse_spans(&slots[1..split])?,
            targets: self.parse_spans(&slots[split + 1..slots.len() - 1])?,
        })
    }

    /// What generation must produce for `targets`.
    pub fn target_shape(targets: &[Span]) -> Result<TargetShape> {
        match targets {
            [Span::Text(_)] => Ok(TargetShape::Text),
            [Span::Motion(agents)] => Ok(TargetShape::Motion {
                agents: agents.iter().map(|a| a.len()).collect(),
            }),
            _ => Err(Error::Format("generation supports exactly one target span".into())),
        }
    }

    /// Laid-out positions a target span occupies, delimiters included.
    pub fn target_positions(&self, shape: &TargetShape) -> usize {
        match shape {
            TargetShape::Text => self.max_len,
            TargetShape::Motion { agents } => {
                agents.iter().map(|&t| motion_span_len(self.layout, self.vocab.levels, t)).sum::<usize>() + agents.len() + 1
            }
        }
    }
}

/// Builds the prompt of a tokenized item. Motion-to-motion tasks split an
/// agent's steps: prediction keeps the first half as context, in-betweening
/// keeps the first and last quarter.
pub fn prompt_for(task: Task, text: &[u32], instruction: Option<&[u32]>, agents: &[MultiStreamTokens]) -> Result<Prompt> {
    let want = task.motion_count();
    if agents.len() != want {
        return Err(Error::Format(format!("{task} needs {want} motions, got {}", agents.len())));
    }
    let text = || Span::Text(text.to_vec());
    let split = |m: &MultiStreamTokens, from: usize, to: usize| -> Result<MultiStreamTokens> {
        MultiStreamTokens::new(m.streams().iter().map(|s| s[from..to].to_vec()).collect())
    };
    let t = agents[0].len();
    if task.is_motion_to_motion() && t < 4 {
        return Err(Error::Format(format!("{task} needs at least 4 steps, got {t}")));
    }
    let (half, quarter) = (t / 2, t / 4);
    let (sources, targets) = match task {
        Task::TextToMotion => (vec![text()], vec![Span::Motion(vec![agents[0].clone()])]),
        Task::MotionToText => (vec![Span::Motion(vec![agents[0].clone()])], vec![text()]),
        Task::PairTextToMotion => (vec![text()], vec![Span::Motion(agents.to_vec())]),
        Task::PairMotionToText => (vec![Span::Motion(agents.to_vec())], vec![text()]),
        Task::Predict => (
            vec![Span::Motion(vec![split(&agents[0], 0, half)?])],
            vec![Span::Motion(vec![split(&agents[0], half, t)?])],
        ),
        Task::Inbetween => (
            vec![
                Span::Motion(vec![split(&agents[0], 0, quarter)?]),
                Span::Motion(vec![split(&agents[0], t - quarter, t)?]),
            ],
            vec![Span::Motion(vec![split(&agents[0], quarter, t - quarter)?])],
        ),
        Task::PairPredict => (
            vec![Span::Motion(agents.iter().map(|a| split(a, 0, half)).collect::<Result<_>>()?)],
            vec![Span::Motion(agents.iter().map(|a| split(a, half, t)).collect::<Result<_>>()?)],
        ),
        Task::React => (
            vec![Span::Motion(vec![agents[0].clone()])],
            vec![Span::Motion(vec![agents[1].clone()])],
        ),
        Task::Edit => {
            let instruction = instruction.ok_or_else(|| Error::Format("Edit needs an instruction".into()))?;
            (
                vec![Span::Motion(vec![agents[0].clone()]), Span::Text(instruction.to_vec())],
                vec![Span::Motion(vec![agents[1].clone()])],
            )
        }
    };
    Ok(Prompt { task, sources, targets })
}
