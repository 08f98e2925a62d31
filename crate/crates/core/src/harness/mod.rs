//! Meta-trainers, evaluation, instrumentation and their file outputs.

pub mod ablate;
pub mod adam;
pub mod checks;
pub mod config;
pub mod eval;
pub mod landscape;
pub mod metrics;
pub mod stability;
pub mod trainer;

pub use config::{Method, TrainConfig};
pub use eval::{evaluate, DomainAccuracy};
pub use landscape::{probe_landscape, Landscape};
pub use stability::gradient_stability;
pub use trainer::{train, train_episode_baseline, train_episode_global_only, train_episode_srasp, TrainOutcome};
