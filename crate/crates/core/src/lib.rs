//! Perceptually sampled local surrogate explanations for black-box image
//! classifiers, and a benchmark for their stability under distortions.

pub mod blackbox;
pub mod distortion;
pub mod error;
pub mod expdist;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod segmentation;
pub mod surrogate;

pub use blackbox::{
    top_k, top_k_agree, Agreement, ClassProbabilities, ExternalModel, Model, ModelClient, ToyModel,
};
pub use distortion::{apply_distortion, DistortionSpec, Family};
pub use error::{Error, Result};
pub use expdist::{explanation_distance, project_explanation, ImportanceMap, Normalization};
pub use harness::{aggregate, run_bench, run_pair, ExperimentConfig, PairResult, SummaryRow};
pub use imaging::{load_image, save_image, PlanarImage};
pub use metrics::{
    cosine_distance_binary, kernel_weight, msssim, nlpd_distance, DistanceKind, KernelConfig,
};
pub use segmentation::{slic_segment, SegmentMap, SlicParams};
pub use surrogate::{
    explain, explain_each, AblationMode, Explanation, InterpretableVector, SurrogateConfig,
};
