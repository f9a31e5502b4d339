//! Runtime for register-mapped accelerators driven by serialized control
//! blocks.

pub mod bench;
pub mod binding;
pub mod compiler;
pub mod executor;
pub mod hal;
pub mod manifest;
pub mod net;
pub mod rcb;
pub mod rimfs;
pub mod runtime;

pub use binding::{bind, plan_buffers, AllocationPlan, BindError, BindingTable, ResolvedRcb};
pub use executor::{execute, execute_pipeline, ExecError, ExecTrace, StageTicks};
pub use hal::{DmaDescriptor, DmaHandle, Event, HalDriver, HalError, SimConfig, SimDevice};
pub use manifest::{DType, Manifest, TensorClass, TensorSpec};
pub use rcb::{decode_rcb, encode_rcb, validate_rcb, AddrRef, BlockType, Op, OpCode, Operation, Rcb};
pub use rimfs::{build_image, mount, RegionAllocator, RimfsImage};
pub use runtime::{ErrorCode, RunOutput, Runtime, RuntimeError};
pub use net::{EventDispatcher, Frame, MsgType, Telemetry};
pub use compiler::{compile, CompiledModel, LowerOptions};
