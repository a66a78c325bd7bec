//! The desk-scale model zoo: architectures, checkpoints, datasets, training
//! and the per-class score vectors influence measures are built from.

pub mod checkpoint;
pub mod data;
pub mod model;
pub(crate) mod net;
pub mod perturb;
pub mod train;

pub use checkpoint::{Checkpoint, Tensor, CHECKPOINT_FORMAT};
pub use data::{shapes, BlobSpec, Dataset, Example, Grammar, SHAPE_NAMES, SHAPE_SIDE};
pub use model::{Arch, InputSpec, MlpShape, Sample, TransformerShape, ZooModel, TRANSFORMER_HEADS};
pub use net::{init_mlp, init_transformer};
pub use perturb::{
    apply_perturbation, class_gradients, forward_probs, forward_probs_batch, loss_gradient,
    score_matrix, scores_and_probs, unit_count, ClassDistribution, ClassGradients, Domain,
    PerturbationTarget, ScoreMatrix, TargetKind, PROB_FLOOR,
};
pub use train::{
    accuracy, fine_tune, generate, generate_with, init_model, train_toy, TrainConfig, TrainedModel,
};
