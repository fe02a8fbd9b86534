use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::model::Backbone;
use crate::backbone::sequence::{slots_to_motion, Sequence, Slot};
use crate::backbone::vocab::Special;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::patterns::{delay_is_pad, LayoutKind, MultiStreamTokens, PAD};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Greedy,
    /// Softmax sampling at the given temperature; `≤ 0` is greedy.
    Temperature(f64),
    /// Sampling restricted to the `k` most likely ids.
    TopK { k: usize, temperature: f64 },
}

/// What the model is asked to produce after the prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TargetShape {
    /// Words until the end token.
    Text,
    /// One motion span holding one agent per entry, each `steps` long,
    /// separated by agent separators.
    Motion { agents: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Every slot appended after the prompt, forced ones included.
    pub slots: Vec<Slot>,
    /// Text words produced (specials dropped).
    pub text: Vec<u32>,
    /// Fully decoded agents; a truncated agent keeps its completed steps.
    pub motions: Vec<MultiStreamTokens>,
    pub truncated: bool,
    /// Positions decoded by the model.
    pub steps: usize,
}

/// Picks an id from `logits`. Ties resolve to the lowest id.
pub fn sample<R: Rng + ?Sized>(logits: &[f64], sampling: Sampling, rng: &mut R) -> usize {
    let argmax = || {
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    };
    let (k, temp) = match sampling {
        Sampling::Greedy => return argmax(),
        Sampling::Temperature(t) => (logits.len(), t),
        Sampling::TopK { k, temperature } => (k.clamp(1, logits.len()), temperature),
    };
    if temp <= 0.0 || k == 1 {
        return argmax();
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let max = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - max) / temp).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in order.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    order[0]
}

impl<S: Scalar> Backbone<S> {
    /// Hidden state of the last slot of `slots`.
    fn last_logits(&self, slots: &[Slot], task: Option<Task>, heads: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
        let seq = Sequence::prompt(slots.to_vec(), task);
        let mut tape = Tape::new();
        let b = self.params().bind(&mut tape, false)?;
        let packed = self.pack(&[&seq])?;
        let h = self.hidden(&mut tape, &b, &packed)?.states;
        let last = [slots.len() - 1];
        heads
            .iter()
            .map(|head| {
                let v = match head {
                    None => self.word_logits(&mut tape, &b, h, &last)?,
                    Some(l) => self.stream_logits(&mut tape, &b, h, *l, &last)?,
                };
                Ok(tape.value(v).to_f64())
            })
            .collect()
    }

    /// Autoregressive decoding after `prompt`. At most `max_steps` positions
    /// are decoded; running out, or reaching the position limit, sets the
    /// truncation flag instead of failing.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        prompt: &[Slot],
        task: Option<Task>,
        target: &TargetShape,
        max_steps: usize,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(Error::Format("generation needs a non-empty prompt".into()));
        }
        let vocab = *self.vocab();
        let mut slots = prompt.to_vec();
        let mut out = Generation {
            slots: Vec::new(),
            text: Vec::new(),
            motions: Vec::new(),
            truncated: false,
            steps: 0,
        };
        let max_len = self.config().max_len;
        let room = |slots: &Vec<Slot>, out: &mut Generation| {
            let ok = out.steps < max_steps && slots.len() < max_len;
            if !ok {
                out.truncated = true;
            }
            ok
        };
        let force = |slots: &mut Vec<Slot>, out: &mut Generation, s: Slot| -> bool {
            if slots.len() >= max_len {
                out.truncated = true;
                return false;
            }
            slots.push(s.clone());
            out.slots.push(s);
            true
        };
        match target {
            TargetShape::Text => {
                let end = vocab.special(Special::End);
                while room(&slots, &mut out) {
                    let logits = self.last_logits(&slots, task, &[None])?;
                    let w = sample(&logits[0], sampling, rng) as u32;
                    out.steps += 1;
                    slots.push(Slot::Word(w));
                    out.slots.push(Slot::Word(w));
                    if w == end {
                        return Ok(out);
                    }
                    if (w as usize) < vocab.text {
                        out.text.push(w);
                    }
                }
            }
            TargetShape::Motion { agents } => {
                let (levels, kind) = (vocab.levels, self.config().layout);
                if !force(&mut slots, &mut out, Slot::Word(vocab.special(Special::MotionBegin))) {
                    return Ok(out);
                }
                for (a, &steps) in agents.iter().enumerate() {
                    if a > 0 && !force(&mut slots, &mut out, Slot::Word(vocab.special(Special::AgentSep))) {
                        return Ok(out);
                    }
                    let span = crate::backbone::sequence::motion_span_len(kind, levels, steps);
                    let mut decoded = Vec::with_capacity(span);
                    for p in 0..span {
                        if !room(&slots, &mut out) {
                            out.motions.push(partial(&decoded, kind, levels, steps)?);
                            return Ok(out);
                        }
                        let slot = self.next_motion_slot(&slots, task, kind, levels, steps, p, sampling, rng)?;
                        out.steps += 1;
                        slots.push(slot.clone());
                        out.slots.push(slot.clone());
                        decoded.push(slot);
                    }
                    out.motions.push(slots_to_motion(&decoded, kind, levels)?);
                }
                for s in [Special::MotionEnd, Special::End] {
                    if !force(&mut slots, &mut out, Slot::Word(vocab.special(s))) {
                        return Ok(out);
                    }
                }
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn next_motion_slot<R: Rng + ?Sized>(
        &self,
        slots: &[Slot],
        task: Option<Task>,
        kind: LayoutKind,
        levels: usize,
        steps: usize,
        p: usize,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Slot> {
        Ok(match kind {
            LayoutKind::Flatten => {
                let level = p % levels;
                let logits = self.last_logits(slots, task, &[Some(level)])?;
                Slot::Single {
                    level,
                    code: sample(&logits[0], sampling, rng) as u16,
                }
            }
            LayoutKind::Parallel | LayoutKind::Delay => {
                let live: Vec<usize> = (0..levels)
                    .filter(|&l| kind == LayoutKind::Parallel || !delay_is_pad(l, levels, steps, p))
                    .collect();
                let heads: Vec<Option<usize>> = live.iter().map(|&l| Some(l)).collect();
                let logits = self.last_logits(slots, task, &heads)?;
                let mut codes = vec![PAD; levels];
                for (&l, lg) in live.iter().zip(&logits) {
                    codes[l] = sample(lg, sampling, rng) as u16;
                }
                Slot::Group(codes)
            }
        })
    }
}

/// Completed time steps of a partially decoded span.
fn partial(decoded: &[Slot], kind: LayoutKind, levels: usize, steps: usize) -> Result<MultiStreamTokens> {
    let done = match kind {
        LayoutKind::Flatten => decoded.len() / levels,
        LayoutKind::Parallel => decoded.len(),
        LayoutKind::Delay => (decoded.len() + 1).saturating_sub(levels).min(steps),
    };
    let mut streams = vec![Vec::with_capacity(done); levels];
    for t in 0..done {
        for (l, stream) in streams.iter_mut().enumerate() {
            let code = match kind {
                LayoutKind::Flatten => match decoded[t * levels + l] {
                    Slot::Single { code, .. } => code,
                    _ => unreachable!("flattened spans hold single tokens"),
                },
                LayoutKind::Parallel => group_code(&decoded[t], l),
                LayoutKind::Delay => group_code(&decoded[t + l], l),
            };
            stream.push(code);
        }
    }
    MultiStreamTokens::new(streams)
}

fn group_code(s: &Slot, l: usize) -> u16 {
    match s {
        Slot::Group(c) => c[l],
        _ => unreachable!("grouped spans hold groups"),
    }
}
