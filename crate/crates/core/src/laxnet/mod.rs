//! Reverse-mode tensor engine and the lateral-axial factorized U-Net.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{AttnAxis, Taps};
pub use model::{ArchConfig, BlockComposition, LaxBlock, TimeEmbedding, UNet};
pub use params::{Init, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor4;
pub mod checkpoint;
pub mod nets;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use nets::{LossMode, VoltModel};
pub use optim::{plateau_lr, AdamW, AdamWConfig, Plateau};
pub use train::{train, train_to_checkpoint, EvalRecord, TrainConfig, TrainReport, TrainingData};
pub use gradcheck::{check_inputs, check_params, GradCheck};
