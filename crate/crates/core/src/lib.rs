//! Image restoration with a mean-reverting SDE whose noise predictor is
//! conditioned on semantic, structural and degradation priors.
//!
//! Everything numeric is built on the reverse-mode autodiff engine in
//! [`tensor`]. The two training stages and the evaluation harness live in
//! [`harness`]; [`synth`] generates the degradation corpus.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod degradation;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sde;
pub mod semantic;
pub mod structural;
pub mod synth;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use degradation::DegradationKind;
pub use denoiser::{Placement, PriorFlags};
pub use error::{Error, Result};
pub use model::TpgModel;
pub use sde::{Sampler, SdeSchedule};
pub use structural::StructuralCues;
pub use synth::DegradationSample;
pub use tensor::{Tape, Tensor, Var};
