//! Parameter-inverted image pyramid networks.
//!
//! Branches of decreasing width see the same image at increasing
//! resolutions, exchange information through gated deformable
//! cross-attention between adjacent branches, and are merged into one dense
//! map or averaged into class scores. The crate also carries an analytic
//! parameter/FLOPs model, a resolution-sweep explorer and the verification
//! harness used by the test suites.
//!
//! All arithmetic is `f64`.

pub mod autograd;
pub mod branches;
pub mod config;
pub mod costmodel;
pub mod error;
pub mod explorer;
pub mod harness;
pub mod interaction;
pub mod layers;
pub mod merging;
pub mod model;
pub mod params;
pub mod primitives;
pub mod tensor;

pub use config::{
    parse_config, preset, Arch, AttentionImpl, AttentionMode, BranchSpec, Direction, InteractionSchedule, MergeMode,
    MergeSpec, ProjKind, PyramidConfig, PRESETS,
};
pub use costmodel::{cost_delta, cost_report, count_flops, count_params, CostDelta, CostEntry, CostReport};
pub use error::{Error, Result};
pub use explorer::{pareto_front, sweep, Cell, SweepSpec, Table};
pub use model::{parameter_gradients, train_step, AdamW, LossFn, ModelOutput, PiipModel};
pub use params::{Initializer, ParamGrads, ParamId, ParamStore};
pub use tensor::{FeatureMap, Tensor};
