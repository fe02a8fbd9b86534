//! Motion sequences, the synthetic motion-language corpus and their file formats.

pub mod corpus;
pub mod motion;
pub mod text;

pub use corpus::{
    apply_edit, estimate_params, generate_corpus, load_corpus, mirror, save_corpus, zscore_normalize, CorpusItem,
    ItemMeta, MotionParams, SyntheticSpec, Task, FRAME_DIM, JOINTS,
};
pub use motion::{FeatureStats, MotionSequence};
pub use text::{EditKind, ParamBins, Relation, TextVocab};
