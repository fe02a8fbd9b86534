//! Modality towers inside transformer blocks: a shared prototype, LoRA
//! adapters, per-modality FFN experts, or fully separate blocks, selected
//! per position by a static routing tag.

pub mod accounting;
pub mod block;
pub mod routing;

pub use accounting::{
    cost_row, enumerate_params, flop_count, measure_flops, measure_params, moe_relative_increase, param_count, CostRow,
};
pub use routing::RoutingTable;
pub use block::{
    add_task_tower, build_block, routed_block_forward, BaseBlock, BlockConfig, BlockParams, Ffn, Lora, Tower,
    TowerParams, TowerVariant, VariantKind, NORM_EPS,
};
