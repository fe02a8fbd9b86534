//! Fixed word list and the invertible description grammar of the toy corpus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AMPLITUDE_WORDS: [&str; 3] = ["small", "medium", "large"];
pub const FREQUENCY_WORDS: [&str; 3] = ["slowly", "steadily", "quickly"];
pub const DIRECTION_WORDS: [&str; 4] = ["level", "rising", "upright", "leaning"];
pub const PHASE_WORDS: [&str; 2] = ["centered", "offset"];

const FILLER: [&str; 17] = [
    "a", "person", "makes", "motion", "two", "people", "one", "and", "the", "other", "mirrors", "follows", "it",
    "make", "bigger", "smaller", "reverse",
];

/// Discrete description of one sinusoidal motion family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamBins {
    pub amplitude: usize,
    pub frequency: usize,
    pub direction: usize,
    pub phase: usize,
}

impl ParamBins {
    /// Fraction of the four bins that agree.
    pub fn match_rate(&self, other: &ParamBins) -> f64 {
        let hits = [
            self.amplitude == other.amplitude,
            self.frequency == other.frequency,
            self.direction == other.direction,
            self.phase == other.phase,
        ];
        hits.iter().filter(|&&h| h).count() as f64 / 4.0
    }
}

/// How the second agent of an interactive item relates to the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Mirror,
    Follow,
}

/// Transformation relating an edit target to its source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditKind {
    ScaleUp,
    ScaleDown,
    ReversePhase,
}

impl EditKind {
    pub const ALL: [EditKind; 3] = [EditKind::ScaleUp, EditKind::ScaleDown, EditKind::ReversePhase];

    /// Multiplier applied to displacements from the rest pose.
    pub fn factor(self) -> f64 {
        match self {
            EditKind::ScaleUp => 1.5,
            EditKind::ScaleDown => 0.5,
            EditKind::ReversePhase => -1.0,
        }
    }
}

/// Word list of the toy corpus. Ids are positions in [`TextVocab::words`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextVocab {
    words: Vec<&'static str>,
}

impl Default for TextVocab {
    fn default() -> Self {
        let words = FILLER
            .iter()
            .chain(&AMPLITUDE_WORDS)
            .chain(&FREQUENCY_WORDS)
            .chain(&DIRECTION_WORDS)
            .chain(&PHASE_WORDS)
            .copied()
            .collect();
        Self { words }
    }
}

impl TextVocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[&'static str] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.words
            .iter()
            .position(|w| *w == word)
            .map(|i| i as u32)
            .ok_or_else(|| Error::Vocab(format!("unknown word {word:?}")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.words
                    .get(i as usize)
                    .copied()
                    .ok_or_else(|| Error::Vocab(format!("text id {i} outside vocabulary of {}", self.words.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

fn phrase(bins: &ParamBins) -> String {
    format!(
        "a {} {} motion {} {}",
        AMPLITUDE_WORDS[bins.amplitude % 3],
        DIRECTION_WORDS[bins.direction % 4],
        FREQUENCY_WORDS[bins.frequency % 3],
        PHASE_WORDS[bins.phase % 2]
    )
}

/// `a person makes a <amp> <dir> motion <freq> <phase>`
pub fn describe_single(bins: &ParamBins) -> String {
    format!("a person makes {}", phrase(bins))
}

/// `two people one makes a … and the other <mirrors|follows> it`
pub fn describe_pair(bins: &ParamBins, relation: Relation) -> String {
    let verb = match relation {
        Relation::Mirror => "mirrors",
        Relation::Follow => "follows",
    };
    format!("two people one makes {} and the other {verb} it", phrase(bins))
}

pub fn describe_edit(kind: EditKind) -> &'static str {
    match kind {
        EditKind::ScaleUp => "make it bigger",
        EditKind::ScaleDown => "make it smaller",
        EditKind::ReversePhase => "reverse it",
    }
}

/// What a description says about the motion it describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Parsed {
    pub bins: ParamBins,
    pub relation: Option<Relation>,
}

fn position(list: &[&str], word: Option<&&str>, what: &str) -> Result<usize> {
    let w = word.ok_or_else(|| Error::Vocab(format!("description ends before {what}")))?;
    list.iter()
        .position(|x| x == w)
        .ok_or_else(|| Error::Vocab(format!("expected a {what} word, got {w:?}")))
}

fn expect<'a>(it: &mut impl Iterator<Item = &'a str>, word: &str) -> Result<()> {
    match it.next() {
        Some(w) if w == word => Ok(()),
        other => Err(Error::Vocab(format!("expected {word:?}, got {other:?}"))),
    }
}

/// Inverts [`describe_single`] and [`describe_pair`].
pub fn parse_description(text: &str) -> Result<Parsed> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut it = words.iter().copied();
    let pair = match it.next() {
        Some("a") => {
            expect(&mut it, "person")?;
            false
        }
        Some("two") => {
            expect(&mut it, "people")?;
            expect(&mut it, "one")?;
            true
        }
        other => return Err(Error::Vocab(format!("unrecognized description start {other:?}"))),
    };
    expect(&mut it, "makes")?;
    expect(&mut it, "a")?;
    let rest: Vec<&str> = it.collect();
    let amplitude = position(&AMPLITUDE_WORDS, rest.first(), "amplitude")?;
    let direction = position(&DIRECTION_WORDS, rest.get(1), "direction")?;
    if rest.get(2) != Some(&"motion") {
        return Err(Error::Vocab("expected \"motion\"".into()));
    }
    let frequency = position(&FREQUENCY_WORDS, rest.get(3), "frequency")?;
    let phase = position(&PHASE_WORDS, rest.get(4), "phase")?;
    let tail = &rest[5..];
    let relation = match (pair, tail) {
        (false, []) => None,
        (true, ["and", "the", "other", "mirrors", "it"]) => Some(Relation::Mirror),
        (true, ["and", "the", "other", "follows", "it"]) => Some(Relation::Follow),
        _ => return Err(Error::Vocab(format!("unexpected description tail {tail:?}"))),
    };
    Ok(Parsed {
        bins: ParamBins {
            amplitude,
            frequency,
            direction,
            phase,
        },
        relation,
    })
}

pub fn parse_edit(text: &str) -> Result<EditKind> {
    EditKind::ALL
        .into_iter()
        .find(|k| describe_edit(*k) == text)
        .ok_or_else(|| Error::Vocab(format!("unknown edit instruction {text:?}")))
}
