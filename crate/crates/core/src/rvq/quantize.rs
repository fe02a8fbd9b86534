use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rvq::grid::TokenGrid;
use crate::scalar::Field;

/// One level of the residual stack: `K` embeddings of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    /// 1-based depth in the stack.
    pub level: usize,
    pub embeddings: Tensor<T>,
    /// Exponential moving average of per-code assignment counts.
    pub usage: Vec<f64>,
}

impl<T> Codebook<T> {
    pub fn size(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn code(&self, k: usize) -> &[T] {
        self.embeddings.row(k)
    }
}

/// Ordered codebooks sharing `K` and `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct RvqStack<T> {
    codebooks: Vec<Codebook<T>>,
}

/// Output of quantizing one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized<T> {
    pub codes: Vec<usize>,
    /// `r¹ = z` through `r^{L+1}`, the part no level explained.
    pub residuals: Vec<Vec<T>>,
}

impl<T> Quantized<T> {
    pub fn remainder(&self) -> &[T] {
        self.residuals.last().expect("at least r¹")
    }
}

fn squared_distance<T: Field>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| {
        let d = x.clone() - y.clone();
        acc + d.clone() * d
    })
}

impl<T: Field> RvqStack<T> {
    /// Builds a stack from `[K × d]` tables, level 1 first.
    pub fn new(tables: Vec<Tensor<T>>) -> Result<Self> {
        let first = tables.first().ok_or_else(|| Error::Config("stack needs at least one level".into()))?;
        let (k, d) = (first.rows(), first.cols());
        if first.shape().len() != 2 {
            return Err(Error::shape("rvq", "codebooks must be K × d matrices"));
        }
        if k > u16::MAX as usize {
            return Err(Error::Config(format!("codebook size {k} does not fit 16-bit codes")));
        }
        let mut codebooks = Vec::with_capacity(tables.len());
        for (i, t) in tables.into_iter().enumerate() {
            if t.shape() != [k, d] {
                return Err(Error::shape("rvq", format!("level {} is {:?}, expected [{k}, {d}]", i + 1, t.shape())));
            }
            codebooks.push(Codebook {
                level: i + 1,
                embeddings: t,
                usage: vec![0.0; k],
            });
        }
        Ok(Self { codebooks })
    }

    pub fn levels(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks[0].size()
    }

    pub fn dim(&self) -> usize {
        self.codebooks[0].dim()
    }

    pub fn codebooks(&self) -> &[Codebook<T>] {
        &self.codebooks
    }

    pub fn codebooks_mut(&mut self) -> &mut [Codebook<T>] {
        &mut self.codebooks
    }

    /// Nearest code of `level` (0-based) to `r`; ties go to the lowest index.
    pub fn nearest(&self, level: usize, r: &[T]) -> usize {
        let cb = &self.codebooks[level];
        let mut best = 0;
        let mut best_d = squared_distance(r, cb.code(0));
        for k in 1..cb.size() {
            let d = squared_distance(r, cb.code(k));
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    /// Greedy residual quantization: `r¹ = z`, `k^l = argmin ‖r^l − e^l(k)‖²`,
    /// `r^{l+1} = r^l − e^l(k^l)`.
    pub fn quantize_vector(&self, z: &[T]) -> Result<Quantized<T>> {
        if z.len() != self.dim() {
            return Err(Error::shape("quantize", format!("vector of width {} for stack of width {}", z.len(), self.dim())));
        }
        let mut residuals = Vec::with_capacity(self.levels() + 1);
        let mut codes = Vec::with_capacity(self.levels());
        let mut r = z.to_vec();
        for l in 0..self.levels() {
            let k = self.nearest(l, &r);
            let next: Vec<T> = r
                .iter()
                .zip(self.codebooks[l].code(k))
                .map(|(a, e)| a.clone() - e.clone())
                .collect();
            codes.push(k);
            residuals.push(std::mem::replace(&mut r, next));
        }
        residuals.push(r);
        Ok(Quantized { codes, residuals })
    }

    /// Row-wise quantization of `[T × d]`. Returns the grid and the per-level
    /// selected embeddings `R̂^l`, each `[T × d]`.
    pub fn quantize_sequence(&self, z: &Tensor<T>) -> Result<(TokenGrid, Vec<Tensor<T>>)> {
        if z.shape().len() != 2 || z.cols() != self.dim() {
            return Err(Error::shape("quantize", format!("latents {:?} for stack of width {}", z.shape(), self.dim())));
        }
        let (t, d, levels) = (z.rows(), self.dim(), self.levels());
        let mut codes = Vec::with_capacity(t * levels);
        let mut picked: Vec<Vec<T>> = vec![Vec::with_capacity(t * d); levels];
        for row in 0..t {
            let q = self.quantize_vector(z.row(row))?;
            for (l, &k) in q.codes.iter().enumerate() {
                codes.push(k as u16);
                picked[l].extend_from_slice(self.codebooks[l].code(k));
            }
        }
        let grid = TokenGrid::new(t, levels, self.codebook_size(), codes)?;
        let maps = picked
            .into_iter()
            .map(|v| Tensor::from_vec(&[t, d], v))
            .collect::<Result<_>>()?;
        Ok((grid, maps))
    }

    /// `Σ_l e^l(M[t, l])` for every row.
    pub fn dequantize(&self, grid: &TokenGrid) -> Result<Tensor<T>> {
        if grid.levels() > self.levels() {
            return Err(Error::shape("dequantize", format!("{} streams for a {}-level stack", grid.levels(), self.levels())));
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(grid.len() * d);
        for t in 0..grid.len() {
            let mut acc = vec![T::zero(); d];
            for l in 0..grid.levels() {
                let k = grid.get(t, l) as usize;
                if k >= self.codebook_size() {
                    return Err(Error::Index {
                        what: "codebook",
                        index: k,
                        size: self.codebook_size(),
                    });
                }
                for (a, e) in acc.iter_mut().zip(self.codebooks[l].code(k)) {
                    *a = a.clone() + e.clone();
                }
            }
            out.extend(acc);
        }
        Tensor::from_vec(&[grid.len(), d], out)
    }
}
