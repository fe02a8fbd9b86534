//! Residual vector quantization and the convolutional motion tokenizer.

pub mod grid;
pub mod model;
pub mod quantize;
pub mod train;

pub use grid::TokenGrid;
pub use model::{LossTerms, TokenizerConfig, TokenizerModel};
pub use quantize::{Codebook, Quantized, RvqStack};
pub use train::{reconstruction_mse, train_tokenizer, TokenizerRecord, TokenizerTraining};
