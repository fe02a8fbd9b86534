use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Bound, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NORM_EPS: f64 = 1e-6;

/// Parameter pathway a position is routed through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tower {
    Text,
    Motion,
    /// Stage-3 copy of the motion tower serving motion-to-motion tasks.
    MotionTask,
}

impl Tower {
    pub fn name(self) -> &'static str {
        match self {
            Tower::Text => "text",
            Tower::Motion => "motion",
            Tower::MotionTask => "task",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Prototype,
    Lora,
    Moe,
    Mis,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [VariantKind::Prototype, VariantKind::Lora, VariantKind::Moe, VariantKind::Mis];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Prototype => "prototype",
            VariantKind::Lora => "lora",
            VariantKind::Moe => "moe",
            VariantKind::Mis => "mis",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected prototype, lora, moe or mis")))
    }
}

/// How modality towers are realized inside each block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TowerVariant {
    pub kind: VariantKind,
    pub lora_rank: usize,
    pub lora_scale: f64,
}

impl Default for TowerVariant {
    fn default() -> Self {
        Self {
            kind: VariantKind::Moe,
            lora_rank: 4,
            lora_scale: 1.0,
        }
    }
}

impl TowerVariant {
    pub fn of(kind: VariantKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn lora(rank: usize, scale: f64) -> Self {
        Self {
            kind: VariantKind::Lora,
            lora_rank: rank,
            lora_scale: scale,
        }
    }

    pub fn validate(&self, cfg: &BlockConfig) -> Result<()> {
        if self.kind == VariantKind::Lora && (self.lora_rank == 0 || self.lora_rank >= cfg.d_model) {
            return Err(Error::Config(format!(
                "LoRA rank {} must satisfy 1 ≤ r < d_k = {}",
                self.lora_rank, cfg.d_model
            )));
        }
        Ok(())
    }
}

/// Shape of one transformer block and the stack depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub activation: Activation,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_ff: 64,
            heads: 4,
            layers: 2,
            activation: Activation::Relu,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.heads == 0 {
            return Err(Error::Config("block widths and head count must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_k = {} not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }

    /// Per-head score scaling `1/√(d_k/h)`.
    pub fn attention_scale(&self) -> f64 {
        1.0 / ((self.d_model / self.heads) as f64).sqrt()
    }
}

/// Freshly initialized tensors of one block before tower construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseBlock<S> {
    pub ln1: Tensor<S>,
    pub ln2: Tensor<S>,
    /// `W_Q, W_K, W_V, W_O`, each `[d_k × d_k]` acting on row vectors.
    pub attn: [Tensor<S>; 4],
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> BaseBlock<S> {
    pub fn random<R: Rng + ?Sized>(cfg: &BlockConfig, std: f64, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let mut mat = |r: usize, c: usize| Tensor::randn(&[r, c], std, rng);
        let attn = [mat(d, d), mat(d, d), mat(d, d), mat(d, d)];
        let w1 = mat(d, cfg.d_ff);
        let w2 = mat(cfg.d_ff, d);
        Self {
            ln1: Tensor::full(&[d], S::one()),
            ln2: Tensor::full(&[d], S::one()),
            attn,
            w1,
            b1: Tensor::zeros(&[cfg.d_ff]),
            w2,
            b2: Tensor::zeros(&[d]),
        }
    }
}

const PROJ: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Low-rank update `α·A·B` per projection; `A: [d_k × r]`, `B: [r × d_k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Lora {
    pub a: [ParamId; 4],
    pub b: [ParamId; 4],
}

/// Parameters one tower reads. Towers of the same block share ids where
/// the variant shares parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TowerParams {
    pub ln1: ParamId,
    pub ln2: ParamId,
    pub attn: [ParamId; 4],
    pub lora: Option<Lora>,
    pub ffn: Ffn,
}

impl TowerParams {
    /// `(component name, id)` for every tensor the tower reads.
    pub fn components(&self) -> Vec<(String, ParamId)> {
        let mut out = vec![("ln1".to_string(), self.ln1), ("ln2".to_string(), self.ln2)];
        for (p, &id) in PROJ.iter().zip(&self.attn) {
            out.push((format!("attn.{p}"), id));
        }
        if let Some(l) = &self.lora {
            for (i, p) in PROJ.iter().enumerate() {
                out.push((format!("lora.{p}.a"), l.a[i]));
                out.push((format!("lora.{p}.b"), l.b[i]));
            }
        }
        for (n, id) in [("w1", self.ffn.w1), ("b1", self.ffn.b1), ("w2", self.ffn.w2), ("b2", self.ffn.b2)] {
            out.push((format!("ffn.{n}"), id));
        }
        out
    }

    fn components_mut(&mut self) -> Vec<(String, &mut ParamId)> {
        let mut out: Vec<(String, &mut ParamId)> = vec![("ln1".into(), &mut self.ln1), ("ln2".into(), &mut self.ln2)];
        for (p, id) in PROJ.iter().zip(self.attn.iter_mut()) {
            out.push((format!("attn.{p}"), id));
        }
        if let Some(l) = &mut self.lora {
            for ((p, a), b) in PROJ.iter().zip(l.a.iter_mut()).zip(l.b.iter_mut()) {
                out.push((format!("lora.{p}.a"), a));
                out.push((format!("lora.{p}.b"), b));
            }
        }
        let f = &mut self.ffn;
        out.push(("ffn.w1".into(), &mut f.w1));
        out.push(("ffn.b1".into(), &mut f.b1));
        out.push(("ffn.w2".into(), &mut f.w2));
        out.push(("ffn.b2".into(), &mut f.b2));
        out
    }
}

/// One block's routing table from tower to parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub prefix: String,
    pub towers: BTreeMap<Tower, TowerParams>,
}

impl BlockParams {
    pub fn tower(&self, t: Tower) -> Result<&TowerParams> {
        self.towers
            .get(&t)
            .ok_or_else(|| Error::Routing(format!("{} has no {} tower", self.prefix, t.name())))
    }

    /// Distinct parameter ids across all towers.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .towers
            .values()
            .flat_map(|t| t.components().into_iter().map(|(_, id)| id))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Ids read by `tower` and by no other tower of the block.
    pub fn exclusive_ids(&self, tower: Tower) -> Vec<ParamId> {
        let Some(mine) = self.towers.get(&tower) else {
            return Vec::new();
        };
        let others: Vec<ParamId> = self
            .towers
            .iter()
            .filter(|(t, _)| **t != tower)
            .flat_map(|(_, p)| p.components().into_iter().map(|(_, id)| id))
            .collect();
        let mut ids: Vec<ParamId> = mine
            .components()
            .into_iter()
            .map(|(_, id)| id)
            .filter(|id| !others.contains(id))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Registers the tensors of `base` in `store` and wires the text and motion
/// towers as `variant` prescribes. Modality copies start equal to the base;
/// LoRA `B` factors start at zero.
pub fn build_block<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    prefix: &str,
    base: &BaseBlock<S>,
    cfg: &BlockConfig,
    variant: &TowerVariant,
    init_std: f64,
    rng: &mut R,
) -> Result<BlockParams> {
    cfg.validate()?;
    variant.validate(cfg)?;
    let core = |store: &mut ParamStore<S>, scope: &str| {
        let attn = [0, 1, 2, 3].map(|i| store.add(format!("{scope}.attn.{}", PROJ[i]), ParamKind::Weight, base.attn[i].clone()));
        let ln1 = store.add(format!("{scope}.ln1"), ParamKind::Norm, base.ln1.clone());
        let ln2 = store.add(format!("{scope}.ln2"), ParamKind::Norm, base.ln2.clone());
        (ln1, ln2, attn)
    };
    let ffn = |store: &mut ParamStore<S>, scope: &str| Ffn {
        w1: store.add(format!("{scope}.ffn.w1"), ParamKind::Weight, base.w1.clone()),
        b1: store.add(format!("{scope}.ffn.b1"), ParamKind::Bias, base.b1.clone()),
        w2: store.add(format!("{scope}.ffn.w2"), ParamKind::Weight, base.w2.clone()),
        b2: store.add(format!("{scope}.ffn.b2"), ParamKind::Bias, base.b2.clone()),
    };
    let tower = |store: &mut ParamStore<S>, scope: &str| {
        let (ln1, ln2, attn) = core(store, scope);
        TowerParams {
            ln1,
            ln2,
            attn,
            lora: None,
            ffn: ffn(store, scope),
        }
    };
    let mut towers = BTreeMap::new();
    match variant.kind {
        VariantKind::Prototype => {
            let shared = tower(store, prefix);
            towers.insert(Tower::Text, shared);
            towers.insert(Tower::Motion, shared);
        }
        VariantKind::Lora => {
            let shared = tower(store, prefix);
            let (d, r) = (cfg.d_model, variant.lora_rank);
            for t in [Tower::Text, Tower::Motion] {
                let mut a = Vec::with_capacity(4);
                let mut b = Vec::with_capacity(4);
                for p in PROJ {
                    let scope = format!("{prefix}.{}.lora.{p}", t.name());
                    a.push(store.add(format!("{scope}.a"), ParamKind::Weight, Tensor::randn(&[d, r], init_std, rng)));
                    b.push(store.add(format!("{scope}.b"), ParamKind::Weight, Tensor::zeros(&[r, d])));
                }
                let lora = Lora {
                    a: a.try_into().expect("four projections"),
                    b: b.try_into().expect("four projections"),
                };
                towers.insert(
                    t,
                    TowerParams {
                        lora: Some(lora),
                        ..shared
                    },
                );
            }
        }
        VariantKind::Moe => {
            let (ln1, ln2, attn) = core(store, prefix);
            for t in [Tower::Text, Tower::Motion] {
                let expert = ffn(store, &format!("{prefix}.{}", t.name()));
                towers.insert(
                    t,
                    TowerParams {
                        ln1,
                        ln2,
                        attn,
                        lora: None,
                        ffn: expert,
                    },
                );
            }
        }
        VariantKind::Mis => {
            for t in [Tower::Text, Tower::Motion] {
                towers.insert(t, tower(store, &format!("{prefix}.{}", t.name())));
            }
        }
    }
    Ok(BlockParams {
        prefix: prefix.to_string(),
        towers,
    })
}

/// Adds a motion-task tower copying every parameter the motion tower does
/// not share with the text tower. Returns `false`, adding nothing, when the
/// variant has no motion-specific parameters.
pub fn add_task_tower<S: Scalar>(store: &mut ParamStore<S>, block: &mut BlockParams) -> Result<bool> {
    if block.towers.contains_key(&Tower::MotionTask) {
        return Err(Error::Config(format!("{} already has a task tower", block.prefix)));
    }
    let text = *block.tower(Tower::Text)?;
    let mut task = *block.tower(Tower::Motion)?;
    let text_ids: Vec<ParamId> = text.components().into_iter().map(|(_, id)| id).collect();
    let mut copied = false;
    for (component, id) in task.components_mut() {
        if !text_ids.contains(id) {
            *id = store.duplicate(*id, format!("{}.{}.{component}", block.prefix, Tower::MotionTask.name()));
            copied = true;
        }
    }
    if copied {
        block.towers.insert(Tower::MotionTask, task);
    }
    Ok(copied)
}

/// Rows grouped by the value of `key` on their tower, in order of first use.
fn groups<K: PartialEq + Copy>(towers: &[&TowerParams], key: impl Fn(&TowerParams) -> K) -> Vec<(K, Vec<usize>)> {
    let mut out: Vec<(K, Vec<usize>)> = Vec::new();
    for (row, t) in towers.iter().enumerate() {
        let k = key(t);
        match out.iter_mut().find(|(g, _)| *g == k) {
            Some((_, rows)) => rows.push(row),
            None => out.push((k, vec![row])),
        }
    }
    out
}

/// Applies `f` to each row group of `x` and reassembles the rows.
fn per_group<S: Scalar, K: Copy>(
    tape: &mut Tape<S>,
    x: Var,
    groups: &[(K, Vec<usize>)],
    mut f: impl FnMut(&mut Tape<S>, Var, K) -> Result<Var>,
) -> Result<Var> {
    if let [(k, _)] = groups {
        return f(tape, x, *k);
    }
    let n = tape.value(x).rows();
    let mut parts = Vec::with_capacity(groups.len());
    for (k, rows) in groups {
        let sub = tape.gather_rows(x, rows)?;
        parts.push((f(tape, sub, *k)?, rows.clone()));
    }
    tape.merge_rows(&parts, n)
}

fn project<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Bound,
    x: Var,
    w: ParamId,
    lora: Option<(ParamId, ParamId)>,
    alpha: f64,
) -> Result<Var> {
    let y = tape.matmul(x, b[w])?;
    match lora {
        None => Ok(y),
        Some((a, bb)) => {
            let down = tape.matmul(x, b[a])?;
            let up = tape.matmul(down, b[bb])?;
            let up = tape.scale(up, S::lit(alpha))?;
            tape.add(y, up)
        }
    }
}

/// `h = x + MHSA(LN₁(x))`, `x′ = h + FFN(LN₂(x))`, with every parameter set
/// chosen per position from `tags`.
#[allow(clippy::too_many_arguments)]
pub fn routed_block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Bound,
    block: &BlockParams,
    cfg: &BlockConfig,
    variant: &TowerVariant,
    x: Var,
    tags: &[Tower],
    segments: &[(usize, usize)],
) -> Result<Var> {
    if tags.len() != tape.value(x).rows() {
        return Err(Error::shape(
            "block",
            format!("{} tags for {} positions", tags.len(), tape.value(x).rows()),
        ));
    }
    let towers = tags.iter().map(|&t| block.tower(t)).collect::<Result<Vec<_>>>()?;
    let alpha = variant.lora_scale;

    let ln1 = groups(&towers, |t| t.ln1);
    let a = per_group(tape, x, &ln1, |tape, sub, g| tape.rms_norm(sub, b[g], NORM_EPS))?;
    let mut qkv = [a; 3];
    for (i, out) in qkv.iter_mut().enumerate() {
        let g = groups(&towers, |t| (t.attn[i], t.lora.map(|l| (l.a[i], l.b[i]))));
        *out = per_group(tape, a, &g, |tape, sub, (w, l)| project(tape, b, sub, w, l, alpha))?;
    }
    let att = tape.causal_attention(qkv[0], qkv[1], qkv[2], cfg.heads, segments, S::lit(cfg.attention_scale()))?;
    let go = groups(&towers, |t| (t.attn[3], t.lora.map(|l| (l.a[3], l.b[3]))));
    let o = per_group(tape, att, &go, |tape, sub, (w, l)| project(tape, b, sub, w, l, alpha))?;
    let h = tape.add(x, o)?;

    let ln2 = groups(&towers, |t| t.ln2);
    let n2 = per_group(tape, x, &ln2, |tape, sub, g| tape.rms_norm(sub, b[g], NORM_EPS))?;
    let gf = groups(&towers, |t| t.ffn);
    let f = per_group(tape, n2, &gf, |tape, sub, ffn| {
        let u = tape.matmul(sub, b[ffn.w1])?;
        let u = tape.add_row(u, b[ffn.b1])?;
        let u = tape.activation(u, cfg.activation)?;
        let v = tape.matmul(u, b[ffn.w2])?;
        tape.add_row(v, b[ffn.b2])
    })?;
    tape.add(h, f)
}
