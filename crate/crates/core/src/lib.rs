//! Skin segmentation with body-part driven attention.
//!
//! A lightweight encoder-decoder whose decoder is steered by an external
//! body-part map (background / body / face / hand): a Body Attention block
//! emphasizes the body region and a Skin Attention block compares every body
//! pixel's embedding with the mean face/hand embedding. The skin attention
//! map also drives a recursive relabeling loop that strips false-positive
//! skin labels from a noisy training set.

pub mod attention;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod provider;
pub mod relabel;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, ErrorKind, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
pub use types::{
    derive_body_mask, derive_face_hand_mask, resize_mask, BinaryMask, FeatureTensor, ImageTensor, PartCode, PartMask,
    SkinProbMap,
};
