//! Analytic diffusion on Gaussian mixtures, used as a desk-scale stand-in for
//! an image diffusion model and a trained classifier.

pub mod benchmark;
pub mod classifier;
pub mod gmm;
pub mod sampler;
pub mod schedule;

pub use benchmark::{build_benchmark, generate_split, Benchmark, ToyConfig, ToySplit, OOD_DATASET};
pub use classifier::{embed, train_toy_classifier, RbfFeatureMap, ToyClassifier, TrainConfig};
pub use gmm::{
    class_log_posterior, class_log_posterior_grad, class_posterior, gmm_score, log_density, Component, GmmClass,
    GmmSpec,
};
pub use sampler::{
    forward_marginal_sample, predicted_x0, reverse_sample, Ancestral, Ddim, Guidance, ReverseSampler, SamplerKind,
};
pub use schedule::{linear_to_alpha_bar, make_schedule, DiffusionSchedule};
