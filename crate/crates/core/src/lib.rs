//! Stacked GAN lab: a self-contained CPU training and evaluation system.
//!
//! The crate layers as follows. `tensor`/`ops`/`tape`/`optim`/`rng` form a
//! scalar-generic numeric substrate (dense tensors, reverse-mode AD, Adam,
//! counter-based random streams). `nn` adds layer specs, initialization and
//! graph building; `encoder` pretrains and splits the bottom-up classifier;
//! `sgan` implements per-stack adversarial/conditional/entropy losses with
//! independent and joint training plus top-down sampling; `data` and
//! `metrics` supply datasets and diagnostics; `config`, `checkpoint` and
//! `commands` drive everything from the `sganlab` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod sgan;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete scalar aliases; the shipped training pipeline runs in `f32`.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub use tensor::Tensor;
