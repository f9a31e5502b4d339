//! Device-side runtime context: a mounted weight image, a bound pipeline
//! and the simulator it drives.

use thiserror::Error;

use crate::binding::{bind, plan_buffers, AllocationPlan, BindError, BindingTable, PlanError, ResolvedRcb};
use crate::compiler::pack::{decode_plan, PlanDecodeError};
use crate::compiler::CompiledModel;
use crate::executor::{execute_pipeline, ExecError, ExecTrace, StageTicks};
use crate::hal::layout::GLOBAL_BASE;
use crate::hal::{HalDriver, HalError, SimConfig, SimDevice};
use crate::manifest::Manifest;
use crate::net::events::EventDispatcher;
use crate::net::telemetry::Telemetry;
use crate::rimfs::{mount, AllocError, MountError, RegionAllocator, RimfsImage, Stage};

/// Arena start is rounded up to this past the image.
const ARENA_ALIGN: u64 = 4096;

/// Error codes carried in NACK payloads and telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ErrorCode {
    NotProvisioned = 1,
    Integrity = 2,
    Malformed = 3,
    BadRequest = 4,
    InputSize = 5,
    ExecFailed = 6,
    Unsupported = 7,
}

impl ErrorCode {
    pub fn from_u32(v: u32) -> Option<Self> {
        use ErrorCode::*;
        [NotProvisioned, Integrity, Malformed, BadRequest, InputSize, ExecFailed, Unsupported]
            .into_iter()
            .find(|c| *c as u32 == v)
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("no {0} loaded")]
    NotProvisioned(&'static str),
    #[error("image: {0}")]
    Image(#[from] MountError),
    #[error("image of {size} bytes does not fit in {capacity} bytes of global memory")]
    ImageTooLarge { size: u64, capacity: u64 },
    #[error("plan: {0}")]
    PlanFormat(#[from] PlanDecodeError),
    #[error("plan: {0}")]
    Plan(#[from] PlanError),
    #[error("bind: {0}")]
    Bind(#[from] BindError),
    #[error("input is {got} bytes, model expects {expected}")]
    InputSize { expected: u64, got: u64 },
    #[error(transparent)]
    Hal(#[from] HalError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("execution failed: {0}")]
    Exec(Box<ExecError>),
}

impl From<ExecError> for RuntimeError {
    fn from(e: ExecError) -> Self {
        RuntimeError::Exec(Box::new(e))
    }
}

impl RuntimeError {
    pub fn code(&self) -> ErrorCode {
        match self {
            RuntimeError::NotProvisioned(_) => ErrorCode::NotProvisioned,
            RuntimeError::Image(_) | RuntimeError::PlanFormat(_) => ErrorCode::Malformed,
            RuntimeError::ImageTooLarge { .. }
            | RuntimeError::Plan(_)
            | RuntimeError::Bind(_)
            | RuntimeError::Alloc(_) => ErrorCode::BadRequest,
            RuntimeError::InputSize { .. } => ErrorCode::InputSize,
            RuntimeError::Hal(_) | RuntimeError::Exec(_) => ErrorCode::ExecFailed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    /// Output tensors concatenated in id order.
    pub output: Vec<u8>,
    pub trace: ExecTrace,
    pub stages: StageTicks,
    /// Buffer ids whose lifetime ended after each block.
    pub released: Vec<Vec<u32>>,
}

struct Loaded {
    manifest: Manifest,
    plan: AllocationPlan,
    arena: RegionAllocator,
    table: BindingTable,
    pipeline: Vec<ResolvedRcb>,
}

pub struct Runtime {
    device: SimDevice,
    events: EventDispatcher,
    image: Option<RimfsImage<Vec<u8>>>,
    model: Option<Loaded>,
    telemetry: Telemetry,
}

impl Runtime {
    pub fn new(config: SimConfig) -> Self {
        let (tx, events) = EventDispatcher::channel();
        let mut device = SimDevice::new(config);
        device.attach_event_sink(tx);
        Self {
            device,
            events,
            image: None,
            model: None,
            telemetry: Telemetry::default(),
        }
    }

    /// A runtime with `model` already provisioned.
    pub fn with_model(config: SimConfig, model: &CompiledModel) -> Result<Self, RuntimeError> {
        let mut rt = Self::new(config);
        rt.load_image(model.image.clone())?;
        rt.load_plan(&model.plan_bundle())?;
        Ok(rt)
    }

    pub fn device(&self) -> &SimDevice {
        &self.device
    }

    pub fn events(&self) -> &EventDispatcher {
        &self.events
    }

    pub fn telemetry(&self) -> Telemetry {
        self.telemetry
    }

    pub fn image(&self) -> Option<&RimfsImage<Vec<u8>>> {
        self.image.as_ref()
    }

    pub fn manifest(&self) -> Option<&Manifest> {
        self.model.as_ref().map(|m| &m.manifest)
    }

    pub fn plan(&self) -> Option<&AllocationPlan> {
        self.model.as_ref().map(|m| &m.plan)
    }

    pub fn bindings(&self) -> Option<&BindingTable> {
        self.model.as_ref().map(|m| &m.table)
    }

    pub fn pipeline(&self) -> Option<&[ResolvedRcb]> {
        self.model.as_ref().map(|m| m.pipeline.as_slice())
    }

    pub fn is_provisioned(&self) -> bool {
        self.model.is_some()
    }

    pub(crate) fn note_error(&mut self, code: ErrorCode) {
        self.telemetry.last_error = code as u32;
    }

    /// Places a weight image at the start of global memory. Any installed
    /// plan is dropped, since its weight bindings pointed into the old image.
    pub fn load_image(&mut self, bytes: Vec<u8>) -> Result<(), RuntimeError> {
        let capacity = self.device.config().global_mem_size;
        if bytes.len() as u64 > capacity {
            return Err(RuntimeError::ImageTooLarge {
                size: bytes.len() as u64,
                capacity,
            });
        }
        let image = mount(bytes, GLOBAL_BASE)?;
        self.model = None;
        self.image = None;
        self.device.write_block(GLOBAL_BASE, image.bytes())?;
        self.device.flush_cache(GLOBAL_BASE, image.len() as u64)?;
        self.image = Some(image);
        Ok(())
    }

    /// Installs a packed pipeline: plans activation buffers in the memory
    /// after the image, binds weights to image files and resolves every
    /// block.
    pub fn load_plan(&mut self, bundle: &[u8]) -> Result<(), RuntimeError> {
        let image = self.image.as_ref().ok_or(RuntimeError::NotProvisioned("image"))?;
        let (rcbs, manifest) = decode_plan(bundle)?;
        let cfg = self.device.config();
        let base = (GLOBAL_BASE + image.len() as u64).div_ceil(ARENA_ALIGN) * ARENA_ALIGN;
        let end = GLOBAL_BASE + cfg.global_mem_size;
        let mut arena = RegionAllocator::new(base, end.saturating_sub(base));
        let plan = plan_buffers(&rcbs, &manifest, &mut arena)?;
        let table = BindingTable::from_plan(&plan, image)?;
        let grid = cfg.grid;
        let pipeline = rcbs
            .iter()
            .map(|r| bind(r, &table, &grid))
            .collect::<Result<Vec<_>, _>>()?;
        self.model = Some(Loaded {
            manifest,
            plan,
            arena,
            table,
            pipeline,
        });
        Ok(())
    }

    pub fn install(&mut self, model: &CompiledModel) -> Result<(), RuntimeError> {
        self.load_image(model.image.clone())?;
        self.load_plan(&model.plan_bundle())
    }

    /// Expected input length in bytes.
    pub fn input_len(&self) -> Option<u64> {
        self.manifest().map(|m| m.input_bytes())
    }

    pub fn run(&mut self, input: &[u8]) -> Result<RunOutput, RuntimeError> {
        let r = self.run_inner(input);
        match &r {
            Ok(out) => self.telemetry.record(&out.stages),
            Err(e) => {
                self.note_error(e.code());
                self.reset_stages();
            }
        }
        r
    }

    /// Returns every arena slot to FREE after a failed request.
    fn reset_stages(&mut self) {
        if let Some(m) = self.model.as_mut() {
            for r in &m.plan.slots {
                while let Some(cur) = m.arena.get(r.id).map(|x| x.stage).filter(|s| *s != Stage::Free) {
                    let _ = m.arena.advance_stage(r.id, cur.next());
                }
            }
        }
    }

    fn run_inner(&mut self, input: &[u8]) -> Result<RunOutput, RuntimeError> {
        let m = self.model.as_mut().ok_or(RuntimeError::NotProvisioned("plan"))?;
        let expected = m.manifest.input_bytes();
        if input.len() as u64 != expected {
            return Err(RuntimeError::InputSize {
                expected,
                got: input.len() as u64,
            });
        }
        let slots: Vec<_> = m.plan.slots.iter().map(|r| r.id).collect();
        let advance = |arena: &mut RegionAllocator, to: Stage| -> Result<(), AllocError> {
            for &id in &slots {
                arena.advance_stage(id, to)?;
            }
            Ok(())
        };

        advance(&mut m.arena, Stage::Receive)?;
        let mut cursor = 0usize;
        for t in m.manifest.inputs() {
            let b = m.table.get(t.id).expect("inputs are bound");
            let n = t.size as usize;
            self.device.write_block(b.address, &input[cursor..cursor + n])?;
            cursor += n;
        }

        advance(&mut m.arena, Stage::Compute)?;
        let mut released = Vec::with_capacity(m.pipeline.len());
        let plan = &m.plan;
        let exec = execute_pipeline(&m.pipeline, &mut self.device, &mut self.events, |i| {
            released.push(plan.release_after(i))
        });
        let trace = exec?;

        advance(&mut m.arena, Stage::Send)?;
        let mut output = vec![0u8; m.manifest.output_bytes() as usize];
        let mut cursor = 0usize;
        for t in m.manifest.outputs() {
            let b = m.table.get(t.id).expect("outputs are bound");
            let n = t.size as usize;
            self.device.invalidate_cache(b.address, t.size)?;
            self.device.read_block(b.address, &mut output[cursor..cursor + n])?;
            cursor += n;
        }
        advance(&mut m.arena, Stage::Free)?;

        Ok(RunOutput {
            output,
            stages: trace.stage_ticks(),
            trace,
            released,
        })
    }
}
