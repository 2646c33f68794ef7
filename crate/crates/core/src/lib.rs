//! Online class-incremental learning on stochastically blurred task
//! boundaries: stream construction, a frozen-transformer prompt learner with
//! instance-wise logit masks, replay, and anytime-inference metrics.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod datasets;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod mvp;
pub mod optim;
pub mod replay;
pub mod rng;
pub mod scenario;

pub use backbone::{Backbone, BackboneSpec, ModelState};
pub use datasets::{ClassId, DatasetIndex, DatasetName, Sample, SampleId};
pub use engine::{Method, RunRecord, RunSummary, TrainConfig};
pub use error::{Error, Result};
pub use mvp::{LossBreakdown, PoolConfig, PromptPool};
pub use replay::ReplayBuffer;
pub use scenario::{ManifestEntry, ScenarioConfig, StreamManifest};
