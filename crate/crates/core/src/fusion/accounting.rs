//! Closed-form parameter and FLOP costs of one block, and the instrumented
//! counterparts measured on a constructed block.
//!
//! Conventions: only weight matrices count as parameters (no biases, no
//! normalization gains). FLOPs count `2·m·k·n` per matrix product,
//! attention as dense `4·N²·d_k` (scores plus value mixing), and nothing
//! else: no softmax, normalization, bias or activation work.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamKind, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::fusion::block::{build_block, routed_block_forward, BaseBlock, BlockConfig, BlockParams, Tower, TowerVariant, VariantKind};

fn prototype_params(cfg: &BlockConfig) -> u64 {
    let (d, f) = (cfg.d_model as u64, cfg.d_ff as u64);
    4 * d * d + 2 * f * d
}

/// Parameters of one block with text and motion towers.
pub fn param_count(cfg: &BlockConfig, variant: &TowerVariant) -> u64 {
    let (d, f, r) = (cfg.d_model as u64, cfg.d_ff as u64, variant.lora_rank as u64);
    match variant.kind {
        VariantKind::Prototype => prototype_params(cfg),
        VariantKind::Lora => prototype_params(cfg) + 16 * d * r,
        VariantKind::Moe => 4 * d * d + 4 * f * d,
        VariantKind::Mis => 2 * prototype_params(cfg),
    }
}

/// Relative parameter increase of MoE over the prototype, `d_f/(2d_k+d_f)`.
pub fn moe_relative_increase(cfg: &BlockConfig) -> f64 {
    cfg.d_ff as f64 / (2 * cfg.d_model + cfg.d_ff) as f64
}

/// FLOPs of one block over `n` tokens.
pub fn flop_count(cfg: &BlockConfig, variant: &TowerVariant, n: usize) -> u64 {
    let (d, f, n) = (cfg.d_model as u64, cfg.d_ff as u64, n as u64);
    let base = 4 * n * n * d + 8 * n * d * d + 4 * n * d * f;
    match variant.kind {
        VariantKind::Lora => base + 16 * n * d * variant.lora_rank as u64,
        _ => base,
    }
}

/// Weight entries reachable from any tower of `block`.
pub fn enumerate_params(store: &ParamStore<f64>, block: &BlockParams) -> u64 {
    block
        .param_ids()
        .into_iter()
        .filter(|&id| store.entry(id).kind == ParamKind::Weight)
        .map(|id| store.get(id).numel() as u64)
        .sum()
}

/// Builds a block and runs it on `n` positions alternating text and motion,
/// returning the matrix-product FLOPs the tape recorded.
pub fn measure_flops(cfg: &BlockConfig, variant: &TowerVariant, n: usize) -> Result<u64> {
    if n == 0 {
        return Err(Error::Range("at least one token is needed to measure FLOPs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = BaseBlock::<f64>::random(cfg, 0.02, &mut rng);
    let mut store = ParamStore::new();
    let block = build_block(&mut store, "blk0", &base, cfg, variant, 0.02, &mut rng)?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false)?;
    let x = tape.constant(Tensor::randn(&[n, cfg.d_model], 1.0, &mut rng))?;
    let tags: Vec<Tower> = (0..n).map(|i| if i % 2 == 0 { Tower::Text } else { Tower::Motion }).collect();
    tape.reset_counters();
    routed_block_forward(&mut tape, &bound, &block, cfg, variant, x, &tags, &[(0, n)])?;
    Ok(tape.counters().matmul_flops)
}

/// Constructs a block and enumerates its weights.
pub fn measure_params(cfg: &BlockConfig, variant: &TowerVariant) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = BaseBlock::<f64>::random(cfg, 0.02, &mut rng);
    let mut store = ParamStore::new();
    let block = build_block(&mut store, "blk0", &base, cfg, variant, 0.02, &mut rng)?;
    Ok(enumerate_params(&store, &block))
}

/// One row of the `count-params` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub variant: VariantKind,
    pub d_k: usize,
    pub d_f: usize,
    pub rank: usize,
    pub tokens: usize,
    pub params: u64,
    pub params_measured: u64,
    pub flops: u64,
    pub flops_measured: u64,
}

impl CostRow {
    pub fn agrees(&self) -> bool {
        self.params == self.params_measured && self.flops == self.flops_measured
    }
}

pub fn cost_row(cfg: &BlockConfig, variant: &TowerVariant, tokens: usize) -> Result<CostRow> {
    Ok(CostRow {
        variant: variant.kind,
        d_k: cfg.d_model,
        d_f: cfg.d_ff,
        rank: variant.lora_rank,
        tokens,
        params: param_count(cfg, variant),
        params_measured: measure_params(cfg, variant)?,
        flops: flop_count(cfg, variant, tokens),
        flops_measured: measure_flops(cfg, variant, tokens)?,
    })
}
