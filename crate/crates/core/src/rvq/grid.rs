use std::path::Path;

use crate::error::{Error, Result};

const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// `T × L` code grid, row-major: row `t` holds the `L` codes of latent step `t`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    len: usize,
    levels: usize,
    codebook_size: usize,
    codes: Vec<u16>,
}

impl TokenGrid {
    pub fn new(len: usize, levels: usize, codebook_size: usize, codes: Vec<u16>) -> Result<Self> {
        if levels == 0 || codebook_size == 0 {
            return Err(Error::Format("token grid needs at least one stream and one code".into()));
        }
        if codebook_size > u16::MAX as usize {
            return Err(Error::Format(format!("codebook size {codebook_size} exceeds 16-bit codes")));
        }
        if codes.len() != len * levels {
            return Err(Error::Format(format!("{len}×{levels} grid needs {} codes, got {}", len * levels, codes.len())));
        }
        Ok(Self {
            len,
            levels,
            codebook_size,
            codes,
        })
    }

    /// Builds a grid from `L` equal-length streams.
    pub fn from_streams(streams: &[Vec<u16>], codebook_size: usize) -> Result<Self> {
        let len = streams.first().map_or(0, Vec::len);
        if streams.iter().any(|s| s.len() != len) {
            return Err(Error::Format("streams differ in length".into()));
        }
        let codes = (0..len).flat_map(|t| streams.iter().map(move |s| s[t])).collect();
        Self::new(len, streams.len(), codebook_size, codes)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn get(&self, t: usize, level: usize) -> u16 {
        self.codes[t * self.levels + level]
    }

    pub fn row(&self, t: usize) -> &[u16] {
        &self.codes[t * self.levels..(t + 1) * self.levels]
    }

    /// Column `level` as a sequence over time.
    pub fn stream(&self, level: usize) -> Vec<u16> {
        (0..self.len).map(|t| self.get(t, level)).collect()
    }

    pub fn streams(&self) -> Vec<Vec<u16>> {
        (0..self.levels).map(|l| self.stream(l)).collect()
    }

    /// Keeps only the first `levels` streams.
    pub fn truncate_levels(&self, levels: usize) -> Result<Self> {
        let levels = levels.min(self.levels);
        let codes = (0..self.len).flat_map(|t| self.row(t)[..levels].to_vec()).collect();
        Self::new(self.len, levels, self.codebook_size, codes)
    }

    /// Header (version, T, L, K as little-endian u32) then the codes as
    /// little-endian u16, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * self.codes.len());
        for v in [VERSION, self.len as u32, self.levels as u32, self.codebook_size as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.codes {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, detail: String| Error::Parse {
            offset: offset as u64,
            detail,
        };
        if bytes.len() < HEADER_LEN {
            return Err(err(bytes.len(), "truncated token header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
        if word(0) != VERSION as usize {
            return Err(err(0, format!("unsupported token file version {}", word(0))));
        }
        let (len, levels, k) = (word(1), word(2), word(3));
        let want = HEADER_LEN + 2 * len * levels;
        if bytes.len() != want {
            let at = want.min(bytes.len() / 2 * 2);
            return Err(err(at, format!("{len}×{levels} grid needs {want} bytes, file has {}", bytes.len())));
        }
        let mut codes = Vec::with_capacity(len * levels);
        for (i, c) in bytes[HEADER_LEN..].chunks_exact(2).enumerate() {
            let code = u16::from_le_bytes([c[0], c[1]]);
            if code as usize >= k {
                return Err(err(HEADER_LEN + 2 * i, format!("code {code} outside codebook of {k}")));
            }
            codes.push(code);
        }
        Self::new(len, levels, k, codes).map_err(|e| err(4, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
