//! Single-shot readout lab for a dispersively measured transmon.
//!
//! The crate covers the whole offline workflow: synthesize I/Q readout
//! traces ([`physics`]), persist them ([`dataset`]), score discriminators
//! ([`metrics`]), fit the threshold and matched-filter references
//! ([`baseline`]), train and quantize the small dense classifier ([`mlp`]),
//! run it bit-exactly in fixed point ([`fxp`]), drive it through a
//! cycle-accurate model of the streaming classifier IP ([`ip`]) and sweep the
//! readout-window design space ([`dse`]).

pub mod baseline;
pub mod dataset;
pub mod dse;
pub mod fxp;
pub mod ip;
pub mod metrics;
pub mod mlp;
pub mod physics;
pub mod rng;

pub use baseline::{MatchedFilterModel, ReadoutWindow, ThresholdModel};
pub use fxp::{FoldedNet, FxpFormat, LatencyModel};
pub use ip::{IpConfig, IpSim};
pub use metrics::{ConfusionCounts, FidelityReport};
pub use mlp::{MlpArch, MlpModel, QuantScheme, TrainConfig};
pub use physics::{DeviceParams, NoiseModel, Shot, ShotSet, State};
