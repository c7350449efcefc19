//! Spatial-temporal unknown distillation for object-level OOD detection.
//!
//! The crate simulates video proposal streams, distills synthetic unknown
//! objects from reference frames, trains a linear classification head with an
//! energy-based logistic uncertainty branch, and evaluates ID/OOD separation
//! with FPR95 and AUROC.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`/`*32`
//! aliases below name the common instantiations.

pub mod config;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod sim;
pub mod train;

pub use config::{ExperimentConfig, SweepAxis, SweepValue, ValidationReport};
pub use distill::{
    dissimilarity, distill_unknowns, distill_weights, filter_candidates, Candidate, CandidateSet, DistilledUnknown,
    PercentileWindow,
};
pub use error::{Error, Result};
pub use metrics::{auroc, baseline_scores, choose_threshold, evaluate, fpr_at_tpr, stud_score, Method, MetricsReport};
pub use model::{energy, ood_probability, Activation, Gradients, ModelDims, ModelParams};
pub use scalar::Scalar;
pub use sim::{
    collect_features, generate_stream, generate_video, sample_reference_frames, FrameProposals, ObjectProposal,
    SamplingRange, SimSpec, Truth, Video,
};
pub use train::{detection_loss, train, uncertainty_loss, EncoderGrad, TrainConfig, TrainLog};

pub type ModelParams64 = ModelParams<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type Gradients64 = Gradients<f64>;
pub type Gradients32 = Gradients<f32>;
pub type SimSpec64 = SimSpec<f64>;
pub type SimSpec32 = SimSpec<f32>;
pub type FrameProposals64 = FrameProposals<f64>;
pub type FrameProposals32 = FrameProposals<f32>;
pub type DistilledUnknown64 = DistilledUnknown<f64>;
pub type DistilledUnknown32 = DistilledUnknown<f32>;
pub type TrainLog64 = TrainLog<f64>;
pub type MetricsReport64 = MetricsReport<f64>;
