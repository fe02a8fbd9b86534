//! Three-stage training: tokenizer, modality alignment, then fine-tuning
//! on every task with motion-to-motion tokens routed to a task tower.

pub mod prompt;
pub mod stages;

pub use prompt::{prompt_for, Formatted, Prompt, PromptFormat, Span};
pub use stages::{
    build_examples, run_stage1, run_stage2, run_stage3, split_corpus, train_backbone, Example, StagePlan, StageRecord,
    TokenizedCorpus, TokenizedItem, BASIC_TASKS,
};

#[cfg(test)]
mod tests;
