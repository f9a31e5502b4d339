//! Offline toolchain: graph IR to packed model directory.

pub mod ir;
pub mod lower;
pub mod pack;
pub mod place;

pub use ir::{parse_graph, GraphError, GraphIr, Node, ACTIVATION_ID_BASE};
pub use lower::{lower, LowerError, LowerOptions};
pub use pack::{
    compile, decode_plan, encode_plan, pack, weights_from_dir, ArtifactError, CompileError, CompiledModel, PackError,
    PlanDecodeError,
};
pub use place::{place, PlaceError, TilePlacement};
