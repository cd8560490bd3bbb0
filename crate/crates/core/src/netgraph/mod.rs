//! Layer graphs, their parameters and the execution engine.

pub mod exec;
pub mod ops;
pub mod spec;
pub mod weights;

pub use exec::{backward, forward, forward_train, predict, update_running_stats, Gradients, Tape};
pub use spec::{
    build_cdb, build_cub, build_segnet, build_segnet_with, build_view_agg_net, count_parameters, FusionMode, LayerKind,
    NetworkSpec, SegNetConfig, SpatialDims,
};
pub use weights::{LayerParams, Model, ParamArray, WeightStore};
