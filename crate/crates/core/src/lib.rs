//! Spatio-temporal object graphs for video captioning, trained with
//! object-aware knowledge distillation on a procedurally generated corpus.

pub mod ablation;
pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod gcn;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod scene;
pub mod synth;
pub mod tape;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use params::{Grads, Mat, ParamId, ParamStore};
