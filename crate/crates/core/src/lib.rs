//! Contrastive alignment between long audio embedding sequences and text
//! embeddings through kernel-wise and temporal attention pooling.
//!
//! Pipeline, per audio/text pair:
//!
//! 1. [`framing`] cuts the fused audio sequence into overlapping frames whose
//!    size and stride scale with its length.
//! 2. [`alignment`] scores every frame slot against the text vector, softmaxes
//!    the grid along both axes and pools the two attention-weighted scores into
//!    one fused score.
//! 3. [`contrastive`] builds the in-batch score matrix, evaluates the
//!    cross-entropy objective and backpropagates it by hand.
//! 4. [`retrieval`] ranks candidates and reports recall@k in both directions.
//!
//! [`store`] holds the binary embedding format and pair manifests, and [`toy`]
//! trains a small linear model end to end on synthetic data.

pub mod alignment;
pub mod contrastive;
pub mod error;
pub mod framing;
pub mod matrix;
mod parallel;
pub mod retrieval;
pub mod store;
pub mod toy;

pub use alignment::{align, AlignmentResult, FusionConfig};
pub use contrastive::{backprop, batch_scores, nce_loss, GradientBundle, ScoreMatrix};
pub use error::{Error, Result};
pub use framing::{unfold, FrameTensor, KernelParams};
pub use matrix::Matrix;
pub use retrieval::{recall_at_k, Direction, RetrievalReport};
pub use store::{EmbeddingRecord, EmbeddingStore, Modality, PairManifest, Split};
