//! Hierarchical moment alignment: locate the moment of a video corpus that
//! a sentence describes.
//!
//! A temporal convolution stack embeds a fixed, profile-determined set of
//! candidate moments per video in one pass; an MLP embeds sentences into
//! the same space. Training combines an intra-video triplet loss (localise
//! within a video) with a video-level loss over LogSumExp-pooled relevance
//! (pick the right video). Retrieval ranks every moment of the corpus by
//! cosine similarity.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod geometry;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod retrieval;
pub mod synthdata;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{enumerate_candidates, iou, CandidateSet, DatasetProfile, MomentSpan};
pub use model::{init_params, ModelDims, ModelParams};
pub use numcore::{Mode, Real, Tensor};
pub use objective::{Objective, Pooling, Variant};
pub use retrieval::{build_index, evaluate, CorpusIndex, EvalReport, EvalSettings};
pub use synthdata::{generate_corpus, Corpus, SyntheticSpec};
pub use training::{fit, Checkpoint, Hyperparams};
