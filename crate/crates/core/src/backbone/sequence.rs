use crate::backbone::vocab::Vocabulary;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::patterns::{delay, flatten, undelay, unflatten, LayoutKind, MultiStreamTokens, PaddedGrid, PAD};

/// One laid-out position of the model input.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    /// A text word or special token, by id in the word range.
    Word(u32),
    /// One code per stream; [`PAD`] marks a stream with no token here.
    Group(Vec<u16>),
    /// A lone code of one stream (flattened layout).
    Single { level: usize, code: u16 },
}

impl Slot {
    pub fn is_motion(&self) -> bool {
        !matches!(self, Slot::Word(_))
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let k = vocab.codebook_size;
        match self {
            Slot::Word(w) if (*w as usize) < vocab.words() => Ok(()),
            Slot::Word(w) => Err(Error::Vocab(format!("word id {w} outside {} words", vocab.words()))),
            Slot::Group(c) if c.len() != vocab.levels => Err(Error::Vocab(format!(
                "group carries {} codes for {} streams",
                c.len(),
                vocab.levels
            ))),
            Slot::Group(c) => match c.iter().find(|&&x| x != PAD && x as usize >= k) {
                Some(x) => Err(Error::Vocab(format!("code {x} outside codebook of {k}"))),
                None => Ok(()),
            },
            Slot::Single { level, code } if *level < vocab.levels && (*code as usize) < k => Ok(()),
            Slot::Single { level, code } => Err(Error::Vocab(format!("single token (stream {level}, code {code}) out of range"))),
        }
    }
}

/// A training or prompting sequence. `target[i]` marks slot `i` as a loss
/// target, predicted from the hidden state at slot `i − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub slots: Vec<Slot>,
    pub target: Vec<bool>,
    pub task: Option<Task>,
}

impl Sequence {
    pub fn new(slots: Vec<Slot>, target: Vec<bool>, task: Option<Task>) -> Result<Self> {
        if slots.len() != target.len() {
            return Err(Error::shape(
                "sequence",
                format!("{} slots but {} target flags", slots.len(), target.len()),
            ));
        }
        if target.first() == Some(&true) {
            return Err(Error::shape("sequence", "the first slot has no predecessor to predict it"));
        }
        Ok(Self { slots, target, task })
    }

    /// Sequence with no loss targets, for conditioning or probing.
    pub fn prompt(slots: Vec<Slot>, task: Option<Task>) -> Self {
        let target = vec![false; slots.len()];
        Self { slots, target, task }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Lays out a token grid as motion slots under `kind`.
pub fn motion_slots(m: &MultiStreamTokens, kind: LayoutKind) -> Vec<Slot> {
    let levels = m.levels();
    match kind {
        LayoutKind::Flatten => flatten(m)
            .into_iter()
            .enumerate()
            .map(|(i, code)| Slot::Single { level: i % levels, code })
            .collect(),
        LayoutKind::Parallel => (0..m.len())
            .map(|t| Slot::Group((0..levels).map(|l| m.get(l, t)).collect()))
            .collect(),
        LayoutKind::Delay => {
            if m.is_empty() {
                return Vec::new();
            }
            let d = delay(m);
            (0..d.width()).map(|p| Slot::Group(d.column(p))).collect()
        }
    }
}

/// Inverse of [`motion_slots`].
pub fn slots_to_motion(slots: &[Slot], kind: LayoutKind, levels: usize) -> Result<MultiStreamTokens> {
    match kind {
        LayoutKind::Flatten => {
            let mut codes = Vec::with_capacity(slots.len());
            for (i, s) in slots.iter().enumerate() {
                match s {
                    Slot::Single { level, code } if *level == i % levels => codes.push(*code),
                    other => return Err(Error::Format(format!("flattened position {i} holds {other:?}"))),
                }
            }
            unflatten(&codes, levels)
        }
        LayoutKind::Parallel | LayoutKind::Delay => {
            let mut columns = Vec::with_capacity(slots.len());
            for (i, s) in slots.iter().enumerate() {
                match s {
                    Slot::Group(c) if c.len() == levels => columns.push(c.clone()),
                    other => return Err(Error::Format(format!("grouped position {i} holds {other:?}"))),
                }
            }
            if columns.is_empty() {
                return Err(Error::Format("empty motion span".into()));
            }
            if kind == LayoutKind::Delay {
                undelay(&PaddedGrid::from_columns(&columns)?)
            } else {
                if columns.iter().flatten().any(|&c| c == PAD) {
                    return Err(Error::Format("parallel layout never pads".into()));
                }
                MultiStreamTokens::new((0..levels).map(|l| columns.iter().map(|c| c[l]).collect()).collect())
            }
        }
    }
}

/// Number of laid-out positions of a `steps`-long motion span.
pub fn motion_span_len(kind: LayoutKind, levels: usize, steps: usize) -> usize {
    crate::patterns::Layout {
        kind,
        levels,
        len: steps,
    }
    .length()
}
