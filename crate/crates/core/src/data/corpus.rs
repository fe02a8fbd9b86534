//! Procedural motion-language corpus built from sinusoidal joint trajectories.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::motion::{FeatureStats, MotionSequence};
use super::text::{describe_edit, describe_pair, describe_single, EditKind, ParamBins, Relation, TextVocab};
use crate::error::{Error, Result};

/// Joints per agent; each joint contributes an (x, y) pair.
pub const JOINTS: usize = 4;
pub const FRAME_DIM: usize = 2 * JOINTS;

const REST: [(f64, f64); JOINTS] = [(0.0, 0.0), (0.0, 1.0), (0.5, 1.5), (-0.5, 1.5)];
const JOINT_WEIGHT: [f64; JOINTS] = [1.0, 0.8, 0.6, 0.4];
const FOLLOW_SHIFT: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "T2M")]
    TextToMotion,
    #[serde(rename = "M2T")]
    MotionToText,
    #[serde(rename = "I-T2M")]
    PairTextToMotion,
    #[serde(rename = "I-M2T")]
    PairMotionToText,
    #[serde(rename = "M2M-predict")]
    Predict,
    #[serde(rename = "M2M-inbetween")]
    Inbetween,
    #[serde(rename = "I-M2M")]
    PairPredict,
    #[serde(rename = "React")]
    React,
    #[serde(rename = "Edit")]
    Edit,
}

impl Task {
    pub const ALL: [Task; 9] = [
        Task::TextToMotion,
        Task::MotionToText,
        Task::PairTextToMotion,
        Task::PairMotionToText,
        Task::Predict,
        Task::Inbetween,
        Task::PairPredict,
        Task::React,
        Task::Edit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::TextToMotion => "T2M",
            Task::MotionToText => "M2T",
            Task::PairTextToMotion => "I-T2M",
            Task::PairMotionToText => "I-M2T",
            Task::Predict => "M2M-predict",
            Task::Inbetween => "M2M-inbetween",
            Task::PairPredict => "I-M2M",
            Task::React => "React",
            Task::Edit => "Edit",
        }
    }

    /// Two-agent tasks.
    pub fn is_interactive(self) -> bool {
        matches!(
            self,
            Task::PairTextToMotion | Task::PairMotionToText | Task::PairPredict | Task::React
        )
    }

    /// Tasks whose target is motion conditioned on motion.
    pub fn is_motion_to_motion(self) -> bool {
        matches!(
            self,
            Task::Predict | Task::Inbetween | Task::PairPredict | Task::React | Task::Edit
        )
    }

    /// Tasks whose target span is text.
    pub fn targets_text(self) -> bool {
        matches!(self, Task::MotionToText | Task::PairMotionToText)
    }

    /// Number of motions an item of this task carries.
    pub fn motion_count(self) -> usize {
        if self.is_interactive() || self == Task::Edit {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Generator settings. Each parameter range is split into equal-width bins
/// that the description grammar names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub amplitude: [f64; 2],
    /// Cycles per second.
    pub frequency: [f64; 2],
    /// Radians; the width may not exceed π so that a reversed phase is distinguishable.
    pub phase: [f64; 2],
    /// Axis angle in radians within `[0, π]`.
    pub direction: [f64; 2],
    pub frames: usize,
    pub frame_rate: f64,
    pub noise: f64,
    /// Seconds by which a follower trails the leader.
    pub follow_lag: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            amplitude: [0.4, 1.6],
            frequency: [0.25, 1.0],
            phase: [0.0, PI],
            direction: [0.0, PI],
            frames: 72,
            frame_rate: 20.0,
            noise: 0.02,
            follow_lag: 0.4,
        }
    }
}

/// Continuous generating parameters of one motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub direction: f64,
}

/// Lower edge and width of the bins splitting `range` into `n`.
fn bin_geometry(range: [f64; 2], n: usize) -> (f64, f64) {
    (range[0], (range[1] - range[0]) / n as f64)
}

fn clamp_bin(v: f64, range: [f64; 2], n: usize) -> usize {
    let (lo, w) = bin_geometry(range, n);
    ((v - lo) / w).floor().clamp(0.0, (n - 1) as f64) as usize
}

impl SyntheticSpec {
    pub const AMPLITUDE_BINS: usize = 3;
    pub const FREQUENCY_BINS: usize = 3;
    pub const DIRECTION_BINS: usize = 4;
    pub const PHASE_BINS: usize = 2;

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("amplitude", self.amplitude),
            ("frequency", self.frequency),
            ("phase", self.phase),
            ("direction", self.direction),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
                return Err(Error::Config(format!("{name} range {r:?} is empty")));
            }
        }
        if self.amplitude[0] <= 0.0 || self.frequency[0] <= 0.0 {
            return Err(Error::Config("amplitude and frequency ranges must be positive".into()));
        }
        if self.phase[1] - self.phase[0] > PI + 1e-12 {
            return Err(Error::Config("phase range wider than π".into()));
        }
        if self.direction[0] < 0.0 || self.direction[1] > PI + 1e-12 {
            return Err(Error::Config("direction range must lie within [0, π]".into()));
        }
        if self.frames == 0 || !(self.frame_rate > 0.0) || self.noise < 0.0 || self.follow_lag < 0.0 {
            return Err(Error::Config("frames, frame rate, noise or lag out of range".into()));
        }
        Ok(())
    }

    /// Bins of continuous parameters. Amplitude and frequency clamp to the
    /// outer bins; direction wraps modulo π; phase bins continue periodically
    /// around the full circle, so a reversed phase lands outside the
    /// generated bins.
    pub fn bins_of(&self, p: &MotionParams) -> ParamBins {
        let direction = p.direction.rem_euclid(PI);
        let (plo, pw) = bin_geometry(self.phase, Self::PHASE_BINS);
        let periodic = (TAU / pw).round().max(1.0) as usize;
        let phase = (((p.phase - plo).rem_euclid(TAU)) / pw).floor() as usize % periodic;
        ParamBins {
            amplitude: clamp_bin(p.amplitude, self.amplitude, Self::AMPLITUDE_BINS),
            frequency: clamp_bin(p.frequency, self.frequency, Self::FREQUENCY_BINS),
            direction: clamp_bin(direction, self.direction, Self::DIRECTION_BINS),
            phase,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> (ParamBins, MotionParams) {
        // Values come from the central half of each bin so that bins remain
        // recoverable from noisy trajectories.
        let mut pick = |range: [f64; 2], n: usize| {
            let b = rng.random_range(0..n);
            let (lo, w) = bin_geometry(range, n);
            let v = lo + w * (b as f64 + 0.25 + 0.5 * rng.random::<f64>());
            (b, round_sig(v))
        };
        let (ab, a) = pick(self.amplitude, Self::AMPLITUDE_BINS);
        let (fb, f) = pick(self.frequency, Self::FREQUENCY_BINS);
        let (db, d) = pick(self.direction, Self::DIRECTION_BINS);
        let (pb, p) = pick(self.phase, Self::PHASE_BINS);
        (
            ParamBins {
                amplitude: ab,
                frequency: fb,
                direction: db,
                phase: pb,
            },
            MotionParams {
                amplitude: a,
                frequency: f,
                phase: p,
                direction: d,
            },
        )
    }

    fn trajectory(&self, p: &MotionParams, delay: f64, shift: f64, rng: &mut ChaCha8Rng) -> Result<MotionSequence> {
        let noise = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let (ux, uy) = (p.direction.cos(), p.direction.sin());
        let mut v = Vec::with_capacity(self.frames * FRAME_DIM);
        for t in 0..self.frames {
            let s = t as f64 / self.frame_rate - delay;
            let wave = p.amplitude * (TAU * p.frequency * s + p.phase).sin();
            for j in 0..JOINTS {
                let (rx, ry) = REST[j];
                let w = JOINT_WEIGHT[j] * wave;
                let (nx, ny) = if self.noise > 0.0 {
                    (noise.sample(rng), noise.sample(rng))
                } else {
                    (0.0, 0.0)
                };
                v.push(rx + shift + w * ux + nx);
                v.push(ry + w * uy + ny);
            }
        }
        MotionSequence::new(self.frames, FRAME_DIM, v, self.frame_rate)
    }
}

/// Rounds to nine significant digits, the precision of the text corpus format.
pub fn round_sig(v: f64) -> f64 {
    format!("{v:.8e}").parse().expect("formatted float parses")
}

/// Rest pose coordinate of feature `c`.
pub fn rest_coordinate(c: usize) -> f64 {
    let (x, y) = REST[(c / 2) % JOINTS];
    if c % 2 == 0 {
        x
    } else {
        y
    }
}

/// `x ↦ rest + factor · (x − rest)`, elementwise.
pub fn apply_edit(seq: &MotionSequence, kind: EditKind) -> Result<MotionSequence> {
    let k = kind.factor();
    seq.map(|c, x| {
        let r = rest_coordinate(c);
        r + k * (x - r)
    })
}

/// Reflects every x coordinate about the vertical axis.
pub fn mirror(seq: &MotionSequence) -> Result<MotionSequence> {
    seq.map(|c, x| if c % 2 == 0 { -x } else { x })
}

/// Ground-truth facts about how an item was generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub params: MotionParams,
    pub bins: ParamBins,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<Relation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditKind>,
}

/// One training example. Interactive items hold agent A then agent B; edit
/// items hold the source then the edited target.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub task: Task,
    pub text: Vec<u32>,
    pub motions: Vec<MotionSequence>,
    pub edit_instruction: Option<Vec<u32>>,
    pub meta: ItemMeta,
}

impl CorpusItem {
    pub fn validate(&self) -> Result<()> {
        let want = self.task.motion_count();
        if self.motions.len() != want {
            return Err(Error::Format(format!(
                "{} item carries {} motions, expected {want}",
                self.task,
                self.motions.len()
            )));
        }
        if (self.task == Task::Edit) != self.edit_instruction.is_some() {
            return Err(Error::Format("edit instruction present exactly on Edit items".into()));
        }
        Ok(())
    }

    /// Same item with every motion cropped to `[offset, offset + length)`.
    pub fn window(&self, offset: usize, length: usize) -> Result<Self> {
        let motions = self
            .motions
            .iter()
            .map(|m| m.window(offset, length))
            .collect::<Result<_>>()?;
        Ok(Self { motions, ..self.clone() })
    }
}

/// Generates `n_items` items cycling through all tasks. A pure function of `spec`.
pub fn generate_corpus(spec: &SyntheticSpec, n_items: usize) -> Result<Vec<CorpusItem>> {
    spec.validate()?;
    if n_items == 0 {
        return Err(Error::Config("corpus needs at least one item".into()));
    }
    let vocab = TextVocab::default();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let task = Task::ALL[i % Task::ALL.len()];
        let (bins, params) = spec.draw(&mut rng);
        let lead = spec.trajectory(&params, 0.0, 0.0, &mut rng)?;
        let (motions, text, relation, edit) = if task.is_interactive() {
            let relation = if rng.random::<bool>() { Relation::Mirror } else { Relation::Follow };
            let partner = match relation {
                Relation::Mirror => mirror(&lead)?,
                Relation::Follow => spec.trajectory(&params, spec.follow_lag, FOLLOW_SHIFT, &mut rng)?,
            };
            (vec![lead, partner], describe_pair(&bins, relation), Some(relation), None)
        } else if task == Task::Edit {
            let kind = EditKind::ALL[rng.random_range(0..EditKind::ALL.len())];
            let target = apply_edit(&lead, kind)?;
            (vec![lead, target], describe_single(&bins), None, Some(kind))
        } else {
            (vec![lead], describe_single(&bins), None, None)
        };
        let edit_instruction = edit.map(|k| vocab.encode(describe_edit(k))).transpose()?;
        items.push(CorpusItem {
            task,
            text: vocab.encode(&text)?,
            motions,
            edit_instruction,
            meta: ItemMeta {
                params,
                bins,
                relation,
                edit,
            },
        });
    }
    Ok(items)
}

/// Fits per-feature statistics over every motion and standardizes them.
pub fn zscore_normalize(items: &[CorpusItem]) -> Result<(Vec<CorpusItem>, FeatureStats)> {
    let stats = FeatureStats::fit(items.iter().flat_map(|i| &i.motions))?;
    let out = items
        .iter()
        .map(|item| {
            let motions = item.motions.iter().map(|m| stats.normalize(m)).collect::<Result<_>>()?;
            Ok(CorpusItem { motions, ..item.clone() })
        })
        .collect::<Result<_>>()?;
    Ok((out, stats))
}

/// Least-squares recovery of the generating parameters of a single-agent
/// trajectory. Returns the canonical form with direction in `[0, π)` and
/// phase in `[0, 2π)`.
pub fn estimate_params(seq: &MotionSequence, spec: &SyntheticSpec) -> Result<MotionParams> {
    if seq.dim() != FRAME_DIM {
        return Err(Error::shape("estimate_params", format!("expected {FRAME_DIM} features, got {}", seq.dim())));
    }
    if seq.len() < 3 {
        return Err(Error::Range("need at least three frames to fit a sinusoid".into()));
    }
    let (flo, fhi) = (spec.frequency[0] * 0.5, spec.frequency[1] * 1.5);
    const GRID: usize = 240;
    let mut best: Option<(f64, f64, Vec<[f64; 2]>)> = None;
    for g in 0..=GRID {
        let f = flo + (fhi - flo) * g as f64 / GRID as f64;
        let Some((sse, coef)) = fit_at(seq, f) else { continue };
        if best.as_ref().is_none_or(|b| sse < b.0) {
            best = Some((sse, f, coef));
        }
    }
    let (_, frequency, coef) = best.ok_or_else(|| Error::Range("degenerate sinusoid fit".into()))?;
    // Rows are w_j·u_c·A·(cos φ, sin φ): rank one. Its principal right
    // singular direction is the phase axis.
    let (mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0);
    for [a, b] in &coef {
        s00 += a * a;
        s01 += a * b;
        s11 += b * b;
    }
    let mut phase = 0.5 * (2.0 * s01).atan2(s00 - s11);
    let (cp, sp) = (phase.cos(), phase.sin());
    let (mut ux, mut uy, mut norm) = (0.0, 0.0, 0.0);
    for j in 0..JOINTS {
        let w = JOINT_WEIGHT[j];
        ux += w * (coef[2 * j][0] * cp + coef[2 * j][1] * sp);
        uy += w * (coef[2 * j + 1][0] * cp + coef[2 * j + 1][1] * sp);
        norm += w * w;
    }
    let (ux, uy) = (ux / norm, uy / norm);
    let mut direction = uy.atan2(ux);
    if direction < 0.0 {
        direction += PI;
        phase += PI;
    }
    if direction >= PI {
        direction -= PI;
        phase += PI;
    }
    Ok(MotionParams {
        amplitude: ux.hypot(uy),
        frequency,
        phase: phase.rem_euclid(TAU),
        direction,
    })
}

/// Fits `c + a·sin(2πft) + b·cos(2πft)` to every feature. Returns the total
/// squared residual and the `(a, b)` pairs.
fn fit_at(seq: &MotionSequence, f: f64) -> Option<(f64, Vec<[f64; 2]>)> {
    let basis: Vec<[f64; 3]> = (0..seq.len())
        .map(|t| {
            let w = TAU * f * t as f64 / seq.frame_rate();
            [1.0, w.sin(), w.cos()]
        })
        .collect();
    let mut g = [[0.0; 3]; 3];
    for b in &basis {
        for r in 0..3 {
            for c in 0..3 {
                g[r][c] += b[r] * b[c];
            }
        }
    }
    let inv = invert3(&g)?;
    let mut sse = 0.0;
    let mut out = Vec::with_capacity(seq.dim());
    for c in 0..seq.dim() {
        let mut rhs = [0.0; 3];
        for (t, b) in basis.iter().enumerate() {
            let y = seq.frame(t)[c];
            for r in 0..3 {
                rhs[r] += b[r] * y;
            }
        }
        let x: Vec<f64> = (0..3).map(|r| (0..3).map(|k| inv[r][k] * rhs[k]).sum()).collect();
        for (t, b) in basis.iter().enumerate() {
            let pred: f64 = (0..3).map(|k| b[k] * x[k]).sum();
            sse += (seq.frame(t)[c] - pred).powi(2);
        }
        out.push([x[1], x[2]]);
    }
    Some((sse, out))
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let scale: f64 = m.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    if det.abs() <= 1e-12 * scale.powi(3) {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            inv[r][c] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    Some(inv)
}

#[derive(Serialize, Deserialize)]
struct Record {
    task: Task,
    text: Vec<u32>,
    motions: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edit_instruction: Option<Vec<u32>>,
    meta: ItemMeta,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";

/// Writes `corpus.jsonl` plus one binary motion file per motion into `dir`.
/// Returns the path of the line-delimited index.
pub fn save_corpus(dir: &Path, items: &[CorpusItem]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("motions"))?;
    let index = dir.join(CORPUS_FILE);
    let mut out = std::io::BufWriter::new(std::fs::File::create(&index)?);
    for (i, item) in items.iter().enumerate() {
        let mut refs = Vec::new();
        for (k, m) in item.motions.iter().enumerate() {
            let rel = PathBuf::from("motions").join(format!("item{i:05}_{}.motn", ["a", "b"][k.min(1)]));
            m.save(dir.join(&rel))?;
            refs.push(rel);
        }
        let rec = Record {
            task: item.task,
            text: item.text.clone(),
            motions: refs,
            edit_instruction: item.edit_instruction.clone(),
            meta: item.meta.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(index)
}

/// Reads a corpus index; motion paths resolve against the index's directory.
/// Malformed lines yield a parse error carrying the byte offset of the line.
pub fn load_corpus(index: &Path) -> Result<Vec<CorpusItem>> {
    let base = index.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut reader = BufReader::new(std::fs::File::open(index)?);
    let mut items = Vec::new();
    let mut offset = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        let start = offset;
        offset += n as u64;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            offset: start + e.column().saturating_sub(1) as u64,
            detail: e.to_string(),
        })?;
        let motions = rec
            .motions
            .iter()
            .map(|p| {
                MotionSequence::load(base.join(p)).map_err(|e| Error::Parse {
                    offset: start,
                    detail: format!("motion {}: {e}", p.display()),
                })
            })
            .collect::<Result<_>>()?;
        let item = CorpusItem {
            task: rec.task,
            text: rec.text,
            motions,
            edit_instruction: rec.edit_instruction,
            meta: rec.meta,
        };
        item.validate().map_err(|e| Error::Parse {
            offset: start,
            detail: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}
