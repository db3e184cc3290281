//! Contrastive multiview coding over co-registered SAR, EO and footprint-mask
//! views, with a segmentation finetuning and evaluation harness.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod modality;
pub mod oracle;
pub mod par;
pub mod raster;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{CmcError, Result};
pub use modality::Modality;
pub use tensor::Tensor;
