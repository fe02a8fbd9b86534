use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};

/// Control tokens shared by every prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    BeginTarget,
    End,
    AgentSep,
    MotionBegin,
    MotionEnd,
    Task(Task),
}

const CONTROL: [Special; 5] = [
    Special::BeginTarget,
    Special::End,
    Special::AgentSep,
    Special::MotionBegin,
    Special::MotionEnd,
];

impl Special {
    fn index(self) -> usize {
        match self {
            Special::Task(t) => CONTROL.len() + Task::ALL.iter().position(|&x| x == t).expect("listed task"),
            other => CONTROL.iter().position(|&x| x == other).expect("control token"),
        }
    }

    fn from_index(i: usize) -> Option<Self> {
        CONTROL
            .get(i)
            .copied()
            .or_else(|| Task::ALL.get(i.wrapping_sub(CONTROL.len())).map(|&t| Special::Task(t)))
    }

    pub fn label(self) -> String {
        match self {
            Special::BeginTarget => "<target>".into(),
            Special::End => "<end>".into(),
            Special::AgentSep => "<sep>".into(),
            Special::MotionBegin => "<motion>".into(),
            Special::MotionEnd => "</motion>".into(),
            Special::Task(t) => format!("<{t}>"),
        }
    }
}

/// What a unified id denotes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Text(u32),
    Special(Special),
    Motion { level: usize, code: u16 },
    Pad,
}

/// Unified id space: text words, then control and task tokens, then one
/// contiguous block of `K` codes per stream, then the pad sentinel.
///
/// Text words and specials together form the "word" range predicted by the
/// text head; each stream block is predicted by that stream's head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub text: usize,
    pub levels: usize,
    pub codebook_size: usize,
}

impl Vocabulary {
    pub const SPECIALS: usize = CONTROL.len() + Task::ALL.len();

    pub fn new(text: usize, levels: usize, codebook_size: usize) -> Result<Self> {
        if levels == 0 || codebook_size == 0 || codebook_size >= crate::patterns::PAD as usize {
            return Err(Error::Config(format!(
                "vocabulary needs L ≥ 1 and 1 ≤ K < {}",
                crate::patterns::PAD
            )));
        }
        Ok(Self {
            text,
            levels,
            codebook_size,
        })
    }

    /// Size of the word range: text plus specials.
    pub fn words(&self) -> usize {
        self.text + Self::SPECIALS
    }

    pub fn special(&self, s: Special) -> u32 {
        (self.text + s.index()) as u32
    }

    pub fn motion(&self, level: usize, code: u16) -> Result<u32> {
        if level >= self.levels || code as usize >= self.codebook_size {
            return Err(Error::Vocab(format!(
                "motion token (stream {level}, code {code}) outside {} streams × {} codes",
                self.levels, self.codebook_size
            )));
        }
        Ok((self.words() + level * self.codebook_size + code as usize) as u32)
    }

    pub fn pad(&self) -> u32 {
        (self.words() + self.levels * self.codebook_size) as u32
    }

    /// Number of ids, pad included.
    pub fn size(&self) -> usize {
        self.pad() as usize + 1
    }

    pub fn classify(&self, id: u32) -> Result<TokenClass> {
        let i = id as usize;
        if i < self.text {
            Ok(TokenClass::Text(id))
        } else if i < self.words() {
            Ok(TokenClass::Special(Special::from_index(i - self.text).expect("special range")))
        } else if i < self.pad() as usize {
            let m = i - self.words();
            Ok(TokenClass::Motion {
                level: m / self.codebook_size,
                code: (m % self.codebook_size) as u16,
            })
        } else if id == self.pad() {
            Ok(TokenClass::Pad)
        } else {
            Err(Error::Vocab(format!("id {id} outside vocabulary of {}", self.size())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranges_are_contiguous_and_disjoint() {
        let v = Vocabulary::new(20, 3, 8).unwrap();
        assert_eq!(v.words(), 20 + Vocabulary::SPECIALS);
        assert_eq!(v.motion(0, 0).unwrap() as usize, v.words());
        assert_eq!(v.motion(2, 7).unwrap() + 1, v.pad());
        assert!(v.motion(3, 0).is_err() && v.motion(0, 8).is_err());
        assert!(matches!(v.classify(v.size() as u32), Err(Error::Vocab(_))));
        assert_eq!(v.classify(v.special(Special::Task(Task::Edit))).unwrap(), TokenClass::Special(Special::Task(Task::Edit)));
    }

    proptest! {
        #[test]
        fn classify_is_total_and_inverts_constructors(text in 0usize..40, levels in 1usize..7, k in 1usize..64) {
            let v = Vocabulary::new(text, levels, k).unwrap();
            for id in 0..v.size() as u32 {
                let back = match v.classify(id).unwrap() {
                    TokenClass::Text(t) => t,
                    TokenClass::Special(s) => v.special(s),
                    TokenClass::Motion { level, code } => v.motion(level, code).unwrap(),
                    TokenClass::Pad => v.pad(),
                };
                prop_assert_eq!(back, id);
            }
        }
    }
}
