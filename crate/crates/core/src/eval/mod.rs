//! Quantitative evaluation: Fréchet distances (exact 2-D and
//! classifier-feature space), condition-fidelity classification, the
//! condition-swap phase experiment, and the closed-form noised-distribution
//! overlap analysis.

mod classifier;
mod experiments;
mod frechet;
mod report;

pub use classifier::{train_fidelity_classifier, Classifier, ClassifierConfig};
pub use experiments::{
    condition_fidelity, condition_fidelity_with_samples, make_swap_pairs, swap_experiment, CondFidelity, SwapPair, SwapRow,
    SwapTable,
};
pub use frechet::{feature_frechet, frechet, overlap_curve, sym_kl, GaussianStats, OverlapRow};
pub use report::{smooth3, EvalReport, FrechetEntry};
