//! Layouts of `L` parallel token streams as one autoregressive sequence.
//!
//! Three layouts are supported: level-major flattening (`T·L` positions),
//! parallel groups (`T` positions, one code per stream each) and the delay
//! pattern (`T + L − 1` positions, stream `l` shifted right by `l − 1`).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rvq::TokenGrid;

/// Reserved id marking structural padding. Never a valid code because
/// codebooks are limited to fewer than `u16::MAX` entries.
pub const PAD: u16 = u16::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutKind {
    Flatten,
    Parallel,
    Delay,
}

impl LayoutKind {
    pub const ALL: [LayoutKind; 3] = [LayoutKind::Flatten, LayoutKind::Parallel, LayoutKind::Delay];

    pub fn name(self) -> &'static str {
        match self {
            LayoutKind::Flatten => "flatten",
            LayoutKind::Parallel => "parallel",
            LayoutKind::Delay => "delay",
        }
    }

    /// Whether one position carries a code from every stream.
    pub fn is_grouped(self) -> bool {
        self != LayoutKind::Flatten
    }
}

impl fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayoutKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayoutKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown layout {s:?}; expected flatten, parallel or delay")))
    }
}

/// A layout applied to a `levels × len` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub kind: LayoutKind,
    pub levels: usize,
    pub len: usize,
}

/// `L` token streams of equal length `T`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MultiStreamTokens {
    streams: Vec<Vec<u16>>,
}

impl MultiStreamTokens {
    pub fn new(streams: Vec<Vec<u16>>) -> Result<Self> {
        if streams.is_empty() {
            return Err(Error::Format("at least one stream required".into()));
        }
        let t = streams[0].len();
        if streams.iter().any(|s| s.len() != t) {
            return Err(Error::Format("streams differ in length".into()));
        }
        if streams.iter().flatten().any(|&c| c == PAD) {
            return Err(Error::Format("stream holds the reserved pad id".into()));
        }
        Ok(Self { streams })
    }

    pub fn from_grid(grid: &TokenGrid) -> Self {
        Self {
            streams: grid.streams(),
        }
    }

    pub fn to_grid(&self, codebook_size: usize) -> Result<TokenGrid> {
        TokenGrid::from_streams(&self.streams, codebook_size)
    }

    pub fn levels(&self) -> usize {
        self.streams.len()
    }

    pub fn len(&self) -> usize {
        self.streams[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn streams(&self) -> &[Vec<u16>] {
        &self.streams
    }

    /// Code of stream `level` at step `t`, both 0-based.
    pub fn get(&self, level: usize, t: usize) -> u16 {
        self.streams[level][t]
    }
}

/// `[m¹₁, m²₁, …, m^L₁, …, m¹_T, …, m^L_T]`
pub fn flatten(m: &MultiStreamTokens) -> Vec<u16> {
    (0..m.len()).flat_map(|t| m.streams.iter().map(move |s| s[t])).collect()
}

pub fn unflatten(seq: &[u16], levels: usize) -> Result<MultiStreamTokens> {
    if levels == 0 || seq.len() % levels != 0 {
        return Err(Error::Format(format!("length {} is not a multiple of {levels} streams", seq.len())));
    }
    let t = seq.len() / levels;
    let streams = (0..levels).map(|l| (0..t).map(|i| seq[i * levels + l]).collect()).collect();
    MultiStreamTokens::new(streams)
}

/// Streams staggered by the delay pattern: `L` rows of width `T + L − 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PaddedGrid {
    rows: Vec<Vec<u16>>,
}

impl PaddedGrid {
    pub fn new(rows: Vec<Vec<u16>>) -> Result<Self> {
        let w = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.iter().any(|r| r.len() != w) {
            return Err(Error::Format("padded rows must be non-empty and equally wide".into()));
        }
        Ok(Self { rows })
    }

    pub fn levels(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<u16>] {
        &self.rows
    }

    /// The `L` entries at laid-out position `p`.
    pub fn column(&self, p: usize) -> Vec<u16> {
        self.rows.iter().map(|r| r[p]).collect()
    }

    pub fn from_columns(columns: &[Vec<u16>]) -> Result<Self> {
        let levels = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != levels) {
            return Err(Error::Format("columns differ in height".into()));
        }
        Self::new((0..levels).map(|l| columns.iter().map(|c| c[l]).collect()).collect())
    }
}

/// Whether the delay pattern puts a pad at stream `level` (0-based) of position `p`.
pub fn delay_is_pad(level: usize, levels: usize, len: usize, p: usize) -> bool {
    p < level || p >= level + len || levels <= level
}

/// Stream `l` becomes `[PAD × (l − 1), m^l, PAD × (L − l)]`.
pub fn delay(m: &MultiStreamTokens) -> PaddedGrid {
    let (levels, t) = (m.levels(), m.len());
    let rows = m
        .streams
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let mut row = vec![PAD; l];
            row.extend_from_slice(s);
            row.extend(std::iter::repeat_n(PAD, levels - 1 - l));
            debug_assert_eq!(row.len(), t + levels - 1);
            row
        })
        .collect();
    PaddedGrid { rows }
}

/// Inverse of [`delay`]. Strips by position and rejects misplaced pads.
pub fn undelay(g: &PaddedGrid) -> Result<MultiStreamTokens> {
    let levels = g.levels();
    if g.width() + 1 < levels {
        return Err(Error::Format(format!("width {} too small for {levels} delayed streams", g.width())));
    }
    let t = g.width() + 1 - levels;
    let mut streams = Vec::with_capacity(levels);
    for (l, row) in g.rows.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            let should_pad = delay_is_pad(l, levels, t, p);
            if should_pad != (v == PAD) {
                return Err(Error::Format(format!(
                    "stream {} position {p}: expected {}",
                    l + 1,
                    if should_pad { "padding" } else { "a code" }
                )));
            }
        }
        streams.push(row[l..l + t].to_vec());
    }
    MultiStreamTokens::new(streams)
}

/// A token of the grid, 1-based in both coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StreamPos {
    pub level: usize,
    pub time: usize,
}

impl Layout {
    pub fn new(kind: LayoutKind, levels: usize, len: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("a layout needs at least one stream".into()));
        }
        Ok(Self { kind, levels, len })
    }

    /// Laid-out sequence length.
    pub fn length(&self) -> usize {
        match self.kind {
            LayoutKind::Flatten => self.len * self.levels,
            LayoutKind::Parallel => self.len,
            LayoutKind::Delay if self.len == 0 => 0,
            LayoutKind::Delay => self.len + self.levels - 1,
        }
    }

    /// 0-based laid-out position of a 1-based token.
    pub fn position(&self, p: StreamPos) -> Result<usize> {
        self.check(p)?;
        let (l, t) = (p.level - 1, p.time - 1);
        Ok(match self.kind {
            LayoutKind::Flatten => t * self.levels + l,
            LayoutKind::Parallel => t,
            LayoutKind::Delay => t + l,
        })
    }

    fn check(&self, p: StreamPos) -> Result<()> {
        if p.level == 0 || p.level > self.levels || p.time == 0 || p.time > self.len {
            return Err(Error::Range(format!(
                "token (l={}, t={}) outside {} streams × {} steps",
                p.level, p.time, self.levels, self.len
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> impl Iterator<Item = StreamPos> + '_ {
        (1..=self.len).flat_map(move |time| (1..=self.levels).map(move |level| StreamPos { level, time }))
    }

    /// Causal visibility over the laid-out rows, with one leading row for the
    /// span opener: `mask[i][j]` holds when row `i` may attend to row `j`.
    pub fn causal_mask(&self) -> Vec<Vec<bool>> {
        let n = self.length() + 1;
        (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect()
    }

    /// Tokens the prediction of `target` is conditioned on.
    ///
    /// Row `p + 1` holds the token at laid-out position `p` and the token at
    /// position `p` is predicted from row `p`; a token belongs to the set when
    /// its row is visible from that predictor row.
    pub fn dependency_set(&self, target: StreamPos) -> Result<BTreeSet<StreamPos>> {
        let predictor = self.position(target)?;
        let mask = self.causal_mask();
        let mut out = BTreeSet::new();
        for tok in self.tokens() {
            let row = self.position(tok)? + 1;
            if mask[predictor][row] {
                out.insert(tok);
            }
        }
        Ok(out)
    }

    pub fn cost(&self) -> LayoutCost {
        let length = self.length();
        LayoutCost {
            length,
            cost_class: match self.kind {
                LayoutKind::Flatten => "O(T²L²)",
                LayoutKind::Parallel => "O(T²)",
                LayoutKind::Delay => "O((T+L−1)²)",
            }
            .to_string(),
            attention_pairs: (length * length) as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutCost {
    pub length: usize,
    pub cost_class: String,
    /// Query-key pairs of dense self-attention over the laid-out sequence.
    pub attention_pairs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyRow {
    pub level: usize,
    pub time: usize,
    pub position: usize,
    pub depends_on: Vec<(usize, usize)>,
}

/// Everything `analyze-pattern` reports.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternReport {
    pub layout: LayoutKind,
    pub streams: usize,
    pub steps: usize,
    #[serde(flatten)]
    pub cost: LayoutCost,
    pub dependencies: Vec<DependencyRow>,
}

pub fn analyze(layout: &Layout) -> Result<PatternReport> {
    let mut dependencies = Vec::new();
    for tok in layout.tokens() {
        dependencies.push(DependencyRow {
            level: tok.level,
            time: tok.time,
            position: layout.position(tok)?,
            depends_on: layout
                .dependency_set(tok)?
                .into_iter()
                .map(|p| (p.level, p.time))
                .collect(),
        });
    }
    Ok(PatternReport {
        layout: layout.kind,
        streams: layout.levels,
        steps: layout.len,
        cost: layout.cost(),
        dependencies,
    })
}
