use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MOTN";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

/// A `len × dim` grid of pose frames, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    len: usize,
    dim: usize,
    values: Vec<f64>,
    frame_rate: f64,
}

impl MotionSequence {
    pub fn new(len: usize, dim: usize, values: Vec<f64>, frame_rate: f64) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::Range(format!("motion needs at least one frame and feature, got {len}×{dim}")));
        }
        if values.len() != len * dim {
            return Err(Error::shape("motion", format!("{len}×{dim} frames need {} values, got {}", len * dim, values.len())));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::Range(format!("frame rate must be positive, got {frame_rate}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "motion" });
        }
        Ok(Self { len, dim, values, frame_rate })
    }

    pub fn from_frames(frames: &[Vec<f64>], frame_rate: f64) -> Result<Self> {
        let dim = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::shape("motion", "ragged frames"));
        }
        Self::new(frames.len(), dim, frames.concat(), frame_rate)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.dim)
    }

    /// Contiguous window of `length` frames starting at `offset`.
    pub fn window(&self, offset: usize, length: usize) -> Result<Self> {
        if length == 0 || offset + length > self.len {
            return Err(Error::Range(format!(
                "window {offset}..{} outside motion of {} frames",
                offset + length,
                self.len
            )));
        }
        let v = self.values[offset * self.dim..(offset + length) * self.dim].to_vec();
        Self::new(length, self.dim, v, self.frame_rate)
    }

    /// Crops to the first `length` frames.
    pub fn crop(&self, length: usize) -> Result<Self> {
        self.window(0, length)
    }

    /// Crops at a uniformly drawn offset.
    pub fn random_crop<R: rand::Rng + ?Sized>(&self, length: usize, rng: &mut R) -> Result<Self> {
        if length > self.len {
            return self.crop(length);
        }
        let offset = rng.random_range(0..=self.len - length);
        self.window(offset, length)
    }

    /// Appends the frames of `other` after this sequence.
    pub fn concat(&self, other: &MotionSequence) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::shape("motion concat", format!("widths {} and {}", self.dim, other.dim)));
        }
        let mut v = self.values.clone();
        v.extend_from_slice(&other.values);
        Self::new(self.len + other.len, self.dim, v, self.frame_rate)
    }

    pub fn map(&self, f: impl Fn(usize, f64) -> f64) -> Result<Self> {
        let d = self.dim;
        let v = self.values.iter().enumerate().map(|(i, &x)| f(i % d, x)).collect();
        Self::new(self.len, self.dim, v, self.frame_rate)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.frame_rate.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, detail: &str| Error::Parse {
            offset: offset as u64,
            detail: detail.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(parse(bytes.len(), "truncated motion header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(parse(0, "bad motion magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        if u32_at(4) != VERSION {
            return Err(parse(4, "unsupported motion version"));
        }
        let (len, dim) = (u32_at(8) as usize, u32_at(12) as usize);
        let frame_rate = f64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        let want = HEADER_LEN + len * dim * 8;
        if bytes.len() < want {
            let whole = HEADER_LEN + (bytes.len() - HEADER_LEN) / 8 * 8;
            return Err(parse(whole, &format!("truncated motion body: {len}×{dim} frames need {want} bytes")));
        }
        if bytes.len() > want {
            return Err(parse(want, "trailing bytes after motion body"));
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(len, dim, values, frame_rate).map_err(|e| parse(8, &e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Per-feature statistics used to standardize motion features.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Pools every frame of every sequence. Features whose spread is below
    /// `1e-12` get a unit standard deviation.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut all = Vec::new();
        for s in seqs {
            if sum.is_empty() {
                sum = vec![0.0; s.dim()];
                sq = vec![0.0; s.dim()];
            } else if s.dim() != sum.len() {
                return Err(Error::shape("feature stats", "sequences differ in width"));
            }
            all.push(s);
            for f in s.frames() {
                for (acc, &x) in sum.iter_mut().zip(f) {
                    *acc += x;
                }
            }
            count += s.len();
        }
        if count == 0 {
            return Err(Error::Range("no frames to normalize".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for s in &all {
            for f in s.frames() {
                for (c, &x) in f.iter().enumerate() {
                    sq[c] += (x - mean[c]).powi(2);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        seq.map(|c, x| (x - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        seq.map(|c, x| x * self.std[c] + self.mean[c])
    }
}
