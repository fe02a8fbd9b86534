//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node whose inputs are already on the tape, so
//! creation order is a topological order and [`Tape::backward`] is a single
//! reverse sweep.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

/// Work counters filled in by the primitives that the cost formulas track.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Floating point operations of matrix products, counted as `2·m·k·n`
    /// (attention score and value products included).
    pub matmul_flops: u64,
    /// Query/key position pairs scored, once per attention call and segment.
    pub attention_pairs: u64,
    pub attention_calls: u64,
}

enum Op<S> {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: S },
    AddRow { x: Var, b: Var },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<S> },
    Act { x: Var, kind: Activation },
    Softmax { x: Var },
    Attention(Box<AttentionSaved<S>>),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<S> },
    Sum { x: Var },
    Mean { x: Var },
    Abs { x: Var },
    Square { x: Var },
    Gather { x: Var, rows: Vec<usize> },
    Merge { parts: Vec<(Var, Vec<usize>)> },
    Conv1d(ConvSaved),
    ConvT1d(ConvSaved),
}

struct AttentionSaved<S> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<(usize, usize)>,
    scale: S,
    probs: Vec<S>,
}

#[derive(Clone, Copy)]
struct ConvSaved {
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recorded computation. Single writer; values are read back through [`Tape::value`].
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    counters: Counters,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(&self.shapes[v.0], g.clone()).expect("shape"))
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn raw(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }
}

fn check_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    // Each output element accumulates over k in ascending order, independent of m.
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn gelu<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t)
        + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * a * x * x);
    (y, dy)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counters: Counters::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = Counters::default();
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Result<Var> {
        check_finite("param", t.data())?;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        check_finite("constant", t.data())?;
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Copies the value of `x`; the backward pass contributes nothing to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {m}x{k} times {k2}x{n}"),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.counters.matmul_flops += 2 * (m * k * n) as u64;
        let t = Tensor::from_vec(&[m, n], out)?;
        self.push("matmul", t, Op::MatMul { a, b }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        self.push(op_name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let t = self.value(x).map(|&v| v * c);
        self.push("scale", t, Op::Scale { x, c }, &[x])
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims("add_row", x)?;
        if self.shape(b) != [d] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for rows of width {d}", self.shape(b)),
            ));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for (o, &bb) in out[i * d..(i + 1) * d].iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let t = Tensor::from_vec(&[n, d], out)?;
        self.push("add_row", t, Op::AddRow { x, b }, &[x, b])
    }

    /// Root-mean-square normalization of each row, scaled by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.matrix_dims("rms_norm", x)?;
        if self.shape(gain) != [d] {
            return Err(Error::shape("rms_norm", format!("gain {:?} for width {d}", self.shape(gain))));
        }
        check_finite("rms_norm", self.value(x).data())?;
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let eps = S::lit(eps);
        let dn = S::from_usize(d).expect("width");
        let mut out = vec![S::zero(); n * d];
        let mut inv_rms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<S>() / dn;
            let inv = S::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                out[i * d + j] = row[j] * inv * g[j];
            }
        }
        let t = Tensor::from_vec(&[n, d], out)?;
        self.push("rms_norm", t, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(x);
        }
        let t = match kind {
            Activation::Relu => self.value(x).map(|&v| if v > S::zero() { v } else { S::zero() }),
            Activation::Gelu => self.value(x).map(|&v| gelu(v).0),
            Activation::Identity => unreachable!(),
        };
        self.push("activation", t, Op::Act { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    /// Row-wise softmax. Entries with `mask == false` get probability exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (n, d) = self.matrix_dims("softmax", x)?;
        check_finite("softmax", self.value(x).data())?;
        if let Some(m) = &mask {
            if m.len() != n * d {
                return Err(Error::shape("softmax", "mask size differs from input"));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[i * d + j]);
            let mut max = S::neg_infinity();
            for j in 0..d {
                if allowed(j) {
                    max = max.max(xv[i * d + j]);
                }
            }
            if max == S::neg_infinity() {
                return Err(Error::shape("softmax", format!("row {i} fully masked")));
            }
            let mut z = S::zero();
            for j in 0..d {
                if allowed(j) {
                    let e = (xv[i * d + j] - max).exp();
                    out[i * d + j] = e;
                    z += e;
                }
            }
            for j in 0..d {
                out[i * d + j] /= z;
            }
        }
        let t = Tensor::from_vec(&[n, d], out)?;
        self.push("softmax", t, Op::Softmax { x }, &[x])
    }

    /// Fused multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[n × d]`; `segments` lists `(start, len)` ranges of
    /// rows that form independent sequences. Head `i` uses columns
    /// `i·d/h .. (i+1)·d/h`. Position `p` attends to positions `≤ p` of its
    /// own segment; future positions get probability exactly zero. Counters
    /// record the dense `len²` pair count per segment regardless.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(usize, usize)],
        scale: S,
    ) -> Result<Var> {
        let (n, d) = self.matrix_dims("attention", q)?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let covered: usize = segments.iter().map(|s| s.1).sum();
        let mut cursor = 0;
        for &(s, l) in segments {
            if s != cursor || l == 0 {
                return Err(Error::shape("attention", "segments must tile the rows in order"));
            }
            cursor += l;
        }
        if covered != n {
            return Err(Error::shape("attention", format!("segments cover {covered} of {n} rows")));
        }
        let dh = d / heads;
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut out = vec![S::zero(); n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.1 * s.1).sum::<usize>() * heads);
        let mut scores = Vec::new();
        for &(s, len) in segments {
            for hd in 0..heads {
                let c0 = hd * dh;
                scores.clear();
                scores.resize(len * len, S::zero());
                for i in 0..len {
                    let qi = &qv[(s + i) * d + c0..(s + i) * d + c0 + dh];
                    for j in 0..=i {
                        let kj = &kv[(s + j) * d + c0..(s + j) * d + c0 + dh];
                        let dot: S = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        scores[i * len + j] = dot * scale;
                    }
                }
                let base = probs.len();
                probs.resize(base + len * len, S::zero());
                for i in 0..len {
                    let row = &scores[i * len..i * len + i + 1];
                    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
                    let mut z = S::zero();
                    for j in 0..=i {
                        let e = (row[j] - max).exp();
                        probs[base + i * len + j] = e;
                        z += e;
                    }
                    for j in 0..=i {
                        probs[base + i * len + j] /= z;
                    }
                }
                for i in 0..len {
                    let orow = &mut out[(s + i) * d + c0..(s + i) * d + c0 + dh];
                    for j in 0..=i {
                        let p = probs[base + i * len + j];
                        let vj = &vv[(s + j) * d + c0..(s + j) * d + c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        for &(_, len) in segments {
            self.counters.attention_pairs += (len * len) as u64;
            self.counters.matmul_flops += 4 * (len * len * d) as u64;
        }
        self.counters.attention_calls += 1;
        let t = Tensor::from_vec(&[n, d], out)?;
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            segments: segments.to_vec(),
            scale,
            probs,
        };
        self.push("attention", t, Op::Attention(Box::new(saved)), &[q, k, v])
    }

    /// Row lookup into `table` (`[V × d]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vsz, d) = self.matrix_dims("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vsz {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: vsz,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let t = Tensor::from_vec(&[ids.len(), d], out)?;
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Per-row negative log-likelihood `[n]`; rows with no target yield 0 and no gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, vsz) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        check_finite("cross_entropy", self.value(logits).data())?;
        let lv = self.value(logits).data();
        let mut probs = vec![S::zero(); n * vsz];
        let mut out = vec![S::zero(); n];
        for i in 0..n {
            let Some(t) = targets[i] else { continue };
            if t >= vsz {
                return Err(Error::Index {
                    what: "cross-entropy classes",
                    index: t,
                    size: vsz,
                });
            }
            let row = &lv[i * vsz..(i + 1) * vsz];
            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let z: S = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..vsz {
                probs[i * vsz + j] = (row[j] - lse).exp();
            }
            out[i] = lse - row[t];
        }
        let t = Tensor::from_vec(&[n], out)?;
        self.push(
            "cross_entropy",
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / S::from_usize(t.numel()).expect("count");
        self.push("mean", Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.abs());
        self.push("abs", t, Op::Abs { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|&v| v * v);
        self.push("square", t, Op::Square { x }, &[x])
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims("gather_rows", x)?;
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "no rows selected"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "rows",
                    index: r,
                    size: n,
                });
            }
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let t = Tensor::from_vec(&[rows.len(), d], out)?;
        self.push(
            "gather_rows",
            t,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Scatters the rows of each part into an `[n × d]` matrix. Every
    /// output row must be written by exactly one part row.
    pub fn merge_rows(&mut self, parts: &[(Var, Vec<usize>)], n: usize) -> Result<Var> {
        let d = match parts.first() {
            Some((v, _)) => self.matrix_dims("merge_rows", *v)?.1,
            None => return Err(Error::shape("merge_rows", "no parts")),
        };
        let mut out = vec![S::zero(); n * d];
        let mut seen = vec![false; n];
        let mut inputs = Vec::with_capacity(parts.len());
        for (v, rows) in parts {
            let (m, dd) = self.matrix_dims("merge_rows", *v)?;
            if dd != d || m != rows.len() {
                return Err(Error::shape("merge_rows", format!("part {m}x{dd} for {} rows of width {d}", rows.len())));
            }
            let pv = self.value(*v).data();
            for (i, &r) in rows.iter().enumerate() {
                if r >= n || seen[r] {
                    return Err(Error::shape("merge_rows", format!("row {r} out of range or duplicated")));
                }
                seen[r] = true;
                out[r * d..(r + 1) * d].copy_from_slice(&pv[i * d..(i + 1) * d]);
            }
            inputs.push(*v);
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::shape("merge_rows", "some output rows not covered"));
        }
        let t = Tensor::from_vec(&[n, d], out)?;
        self.push(
            "merge_rows",
            t,
            Op::Merge {
                parts: parts.to_vec(),
            },
            &inputs,
        )
    }

    fn conv_dims(&self, op: &'static str, x: Var, w: Var, b: Var) -> Result<(usize, usize, usize, usize)> {
        let (len, cin) = self.matrix_dims(op, x)?;
        let ws = self.shape(w);
        if ws.len() != 3 {
            return Err(Error::shape(op, format!("kernel must be rank 3, got {ws:?}")));
        }
        let (a, c, k) = (ws[0], ws[1], ws[2]);
        let cout = if op == "conv1d" { a } else { c };
        let wcin = if op == "conv1d" { c } else { a };
        if wcin != cin {
            return Err(Error::shape(op, format!("kernel expects {wcin} input channels, got {cin}")));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape(op, format!("bias {:?} for {cout} channels", self.shape(b))));
        }
        Ok((len, cin, cout, k))
    }

    /// 1-D convolution over time. `x: [len × c_in]`, `w: [c_out × c_in × k]`,
    /// zero padding `pad` on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (len, cin, cout, k) = self.conv_dims("conv1d", x, w, b)?;
        if stride == 0 || len + 2 * pad < k {
            return Err(Error::shape("conv1d", format!("length {len} too short for kernel {k} with padding {pad}")));
        }
        let out_len = (len + 2 * pad - k) / stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); out_len * cout];
        for t in 0..out_len {
            let orow = &mut out[t * cout..(t + 1) * cout];
            orow.copy_from_slice(bv);
            for j in 0..k {
                let src = (t * stride + j) as isize - pad as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let xrow = &xv[src as usize * cin..(src as usize + 1) * cin];
                for (o, ov) in orow.iter_mut().enumerate() {
                    let wbase = o * cin * k + j;
                    let mut acc = S::zero();
                    for c in 0..cin {
                        acc += wv[wbase + c * k] * xrow[c];
                    }
                    *ov += acc;
                }
            }
        }
        let t = Tensor::from_vec(&[out_len, cout], out)?;
        let saved = ConvSaved { x, w, b, stride, pad };
        self.push("conv1d", t, Op::Conv1d(saved), &[x, w, b])
    }

    /// Transposed 1-D convolution. `x: [len × c_in]`, `w: [c_in × c_out × k]`;
    /// output length `(len − 1)·stride − 2·pad + k`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (len, cin, cout, k) = self.conv_dims("conv_transpose1d", x, w, b)?;
        let full = (len - 1) * stride + k;
        if stride == 0 || full <= 2 * pad {
            return Err(Error::shape("conv_transpose1d", "output would be empty"));
        }
        let out_len = full - 2 * pad;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); out_len * cout];
        for t in 0..out_len {
            out[t * cout..(t + 1) * cout].copy_from_slice(bv);
        }
        for t in 0..len {
            let xrow = &xv[t * cin..(t + 1) * cin];
            for j in 0..k {
                let dst = (t * stride + j) as isize - pad as isize;
                if dst < 0 || dst as usize >= out_len {
                    continue;
                }
                let orow = &mut out[dst as usize * cout..(dst as usize + 1) * cout];
                for (c, &xc) in xrow.iter().enumerate() {
                    let wbase = c * cout * k + j;
                    for (o, ov) in orow.iter_mut().enumerate() {
                        *ov += xc * wv[wbase + o * k];
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[out_len, cout], out)?;
        let saved = ConvSaved { x, w, b, stride, pad };
        self.push("conv_transpose1d", t, Op::ConvT1d(saved), &[x, w, b])
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn backprop(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = G · Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<S>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · G
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == S::zero() {
                                continue;
                            }
                            for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += a_ip * x;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *c);
                }
            }
            Op::AddRow { x, b } => {
                let d = self.shape(*b)[0];
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let dn = S::from_usize(d).expect("width");
                if let Some(gg) = self.acc(grads, *gain) {
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xv[i * d + j] * inv_rms[i];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..n {
                        let r = inv_rms[i];
                        let row = &xv[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let dot: S = (0..d).map(|j| grow[j] * gv[j] * row[j]).sum();
                        let coef = dot * r * r * r / dn;
                        for j in 0..d {
                            gx[i * d + j] += grow[j] * gv[j] * r - row[j] * coef;
                        }
                    }
                }
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        let dydx = match kind {
                            Activation::Relu => {
                                if xi > S::zero() {
                                    S::one()
                                } else {
                                    S::zero()
                                }
                            }
                            Activation::Gelu => gelu(xi).1,
                            Activation::Identity => S::one(),
                        };
                        *o += gi * dydx;
                    }
                }
            }
            Op::Softmax { x } => {
                let (n, d) = (node.value.shape()[0], node.value.shape()[1]);
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..n {
                        let yr = &y[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx[i * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vsz = self.shape(*logits)[1];
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let gi = g[i];
                        for j in 0..vsz {
                            gl[i * vsz + j] += gi * probs[i * vsz + j];
                        }
                        gl[i * vsz + t] -= gi;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean { x } => {
                let n = S::from_usize(self.value(*x).numel()).expect("count");
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::Abs { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > S::zero() {
                            *o += gi;
                        } else if xi < S::zero() {
                            *o -= gi;
                        }
                    }
                }
            }
            Op::Square { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += S::lit(2.0) * xi * gi;
                    }
                }
            }
            Op::Gather { x, rows } => {
                let d = self.shape(*x)[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gx[r * d + j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::Merge { parts } => {
                let d = node.value.shape()[1];
                for (v, rows) in parts {
                    if let Some(gv) = self.acc(grads, *v) {
                        for (i, &r) in rows.iter().enumerate() {
                            for j in 0..d {
                                gv[i * d + j] += g[r * d + j];
                            }
                        }
                    }
                }
            }
            Op::Conv1d(c) => self.conv_backward(c, node, g, grads, false),
            Op::ConvT1d(c) => self.conv_backward(c, node, g, grads, true),
        }
    }

    fn attention_backward(&self, s: &AttentionSaved<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let d = self.shape(s.q)[1];
        let dh = d / s.heads;
        let qv = self.value(s.q).data();
        let kv = self.value(s.k).data();
        let vv = self.value(s.v).data();
        let mut dq = vec![S::zero(); qv.len()];
        let mut dk = vec![S::zero(); kv.len()];
        let mut dv = vec![S::zero(); vv.len()];
        let mut offset = 0;
        let mut dp = Vec::new();
        for &(st, len) in &s.segments {
            for hd in 0..s.heads {
                let c0 = hd * dh;
                let p = &s.probs[offset..offset + len * len];
                offset += len * len;
                dp.clear();
                dp.resize(len * len, S::zero());
                for i in 0..len {
                    let gi = &g[(st + i) * d + c0..(st + i) * d + c0 + dh];
                    for j in 0..=i {
                        let pij = p[i * len + j];
                        let vj = &vv[(st + j) * d + c0..(st + j) * d + c0 + dh];
                        dp[i * len + j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        let dvj = &mut dv[(st + j) * d + c0..(st + j) * d + c0 + dh];
                        for (o, &x) in dvj.iter_mut().zip(gi) {
                            *o += pij * x;
                        }
                    }
                }
                for i in 0..len {
                    let dot: S = (0..=i).map(|j| p[i * len + j] * dp[i * len + j]).sum();
                    for j in 0..=i {
                        let ds = p[i * len + j] * (dp[i * len + j] - dot) * s.scale;
                        if ds == S::zero() {
                            continue;
                        }
                        for c in 0..dh {
                            dq[(st + i) * d + c0 + c] += ds * kv[(st + j) * d + c0 + c];
                            dk[(st + j) * d + c0 + c] += ds * qv[(st + i) * d + c0 + c];
                        }
                    }
                }
            }
        }
        for (v, delta) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if let Some(gv) = self.acc(grads, v) {
                gv.iter_mut().zip(&delta).for_each(|(o, &x)| *o += x);
            }
        }
    }

    fn conv_backward(&self, c: &ConvSaved, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>], transposed: bool) {
        let (len, cin) = (self.shape(c.x)[0], self.shape(c.x)[1]);
        let ws = self.shape(c.w).to_vec();
        let k = ws[2];
        let cout = node.value.shape()[1];
        let out_len = node.value.shape()[0];
        let xv = self.value(c.x).data();
        let wv = self.value(c.w).data();
        let mut dx = vec![S::zero(); xv.len()];
        let mut dw = vec![S::zero(); wv.len()];
        let mut db = vec![S::zero(); cout];
        for t in 0..out_len {
            for o in 0..cout {
                db[o] += g[t * cout + o];
            }
        }
        if !transposed {
            for t in 0..out_len {
                let grow = &g[t * cout..(t + 1) * cout];
                for j in 0..k {
                    let src = (t * c.stride + j) as isize - c.pad as isize;
                    if src < 0 || src as usize >= len {
                        continue;
                    }
                    let src = src as usize;
                    for (o, &go) in grow.iter().enumerate() {
                        let wbase = o * cin * k + j;
                        for ch in 0..cin {
                            dw[wbase + ch * k] += go * xv[src * cin + ch];
                            dx[src * cin + ch] += go * wv[wbase + ch * k];
                        }
                    }
                }
            }
        } else {
            for t in 0..len {
                for j in 0..k {
                    let dst = (t * c.stride + j) as isize - c.pad as isize;
                    if dst < 0 || dst as usize >= out_len {
                        continue;
                    }
                    let grow = &g[dst as usize * cout..(dst as usize + 1) * cout];
                    for ch in 0..cin {
                        let wbase = ch * cout * k + j;
                        let xc = xv[t * cin + ch];
                        let mut acc = S::zero();
                        for (o, &go) in grow.iter().enumerate() {
                            dw[wbase + o * k] += xc * go;
                            acc += wv[wbase + o * k] * go;
                        }
                        dx[t * cin + ch] += acc;
                    }
                }
            }
        }
        for (v, delta) in [(c.x, dx), (c.w, dw), (c.b, db)] {
            if let Some(gv) = self.acc(grads, v) {
                gv.iter_mut().zip(&delta).for_each(|(o, &x)| *o += x);
            }
        }
    }
}
