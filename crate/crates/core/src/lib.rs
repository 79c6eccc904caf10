//! Desk-scale numerical engine for a two-modality BEV fusion pipeline:
//! synthetic scene generation, a reverse-mode differentiation tape, the
//! aligning / interaction / specialty / fusion stages, a toy detection
//! head, and center-distance mAP evaluation.

pub mod align;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod grid;
pub mod head;
pub mod heatmap;
pub mod interact;
pub mod params;
pub mod plot;
pub mod rng;
pub mod specialty;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{DynafuseError, Result};
pub use grid::{FeatureGrid, GridSpec};
pub use head::{BevBox, Instance};
pub use params::{PipelineDims, PipelineParams};
pub use synth::{generate_scene, Scene, SceneGenConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{forward_pipeline, train_loop, Checkpoint, TrainConfig};
