//! Multi-label prompt-contrastive alignment over frozen image and text
//! embeddings.
//!
//! Images and per-criterion positive/negative prompts are passed through
//! small linear adapters, compared by cosine similarity, turned into batch
//! softmax distributions with a learnable temperature, and trained with a
//! symmetric KL objective against many-to-many match targets. Three
//! inference strategies turn a trained (or identity) adapter into
//! per-criterion scores, which are evaluated by average precision.

pub mod alignment;
pub mod datamodel;
pub mod error;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod promptbank;
pub mod synth;
pub mod trainer;

pub use alignment::{AdapterModel, ContrastiveBatch, SimilarityBatch};
pub use datamodel::{load_dataset, save_dataset, Dataset, FeatureRecord, Split, NUM_CRITERIA};
pub use error::{Error, ErrorKind, Result};
pub use numerics::DenseMatrix;
pub use promptbank::{load_prompt_bank, load_subset_bank, PromptBank, SubsetBank};
pub use inference::{Strategy, StrategyScores};
pub use metrics::{average_precision, evaluate, EvalReport};
pub use synth::SynthConfig;
pub use trainer::{train, Checkpoint, TrainConfig};
