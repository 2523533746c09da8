//! Float training with hand-written backpropagation: victim training,
//! calibration-based quantization, constrained substitute training and PGD.

mod float;
mod pgd;
mod quantize;
mod sgd;
mod substitute;

pub use float::{argmax, softmax, FloatModel, Gradients};
pub use pgd::{pgd_attack, PIXEL_MAX, PIXEL_MIN};
pub use quantize::{quantize_model, weight_decs, CALIBRATION_SAMPLES};
pub use sgd::{train_victim, EpochStats, TrainConfig, TrainReport};
pub use substitute::{
    init_substitute, loss_sub, no_training_baseline, train_constrained, train_substitute,
    victim_labels, ConstraintSet, MeanClusters, Range, SubstituteConfig, SubstituteOutcome,
};
