//! Binding layer: turns symbolic and tile-relative references into absolute
//! device addresses and plans where intermediate buffers live.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::hal::layout::{GridConfig, TILE_STRIDE};
use crate::manifest::{Manifest, TensorClass};
use crate::rcb::{AddrRef, Rcb};
use crate::rimfs::{AllocError, Region, RegionAllocator, RegionId, RimfsImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindingSource {
    /// Zero-copy reference into the mounted image.
    Image { file_id: u32 },
    Region(RegionId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Binding {
    pub source: BindingSource,
    pub address: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BindError {
    #[error("unresolved symbols {0:?}")]
    UnresolvedSymbol(Vec<u32>),
    #[error("op {op_index}: access {len} bytes at {addr} exceeds its buffer")]
    Range { op_index: usize, addr: AddrRef, len: u64 },
    #[error("op {op_index}: tile ({col},{row}) outside the grid")]
    TileOutOfGrid { op_index: usize, col: u16, row: u16 },
    #[error("buffer {0} bound twice")]
    Duplicate(u32),
    #[error("weight {0} missing from the image")]
    MissingWeight(u32),
    #[error("weight {id}: image holds {have} bytes, manifest expects {want}")]
    WeightSize { id: u32, have: u64, want: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BindingTable {
    map: BTreeMap<u32, Binding>,
}

impl BindingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: u32, binding: Binding) -> Result<(), BindError> {
        if self.map.contains_key(&id) {
            return Err(BindError::Duplicate(id));
        }
        self.map.insert(id, binding);
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&Binding> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &Binding)> {
        self.map.iter()
    }

    /// Weights point into `image`; everything else gets its planned region.
    pub fn from_plan<B: AsRef<[u8]>>(plan: &AllocationPlan, image: &RimfsImage<B>) -> Result<Self, BindError> {
        let mut table = Self::new();
        for b in plan.buffers.values() {
            let binding = match b.placement {
                Placement::Image => {
                    let (address, size) = image.lookup(b.id).map_err(|_| BindError::MissingWeight(b.id))?;
                    if (size as u64) < b.size {
                        return Err(BindError::WeightSize {
                            id: b.id,
                            have: size as u64,
                            want: b.size,
                        });
                    }
                    Binding {
                        source: BindingSource::Image { file_id: b.id },
                        address,
                        size: b.size,
                    }
                }
                Placement::Arena { slot } => {
                    let r = &plan.slots[slot];
                    Binding {
                        source: BindingSource::Region(r.id),
                        address: r.address,
                        size: b.size,
                    }
                }
            };
            table.insert(b.id, binding)?;
        }
        Ok(table)
    }
}

/// A control block whose every reference is absolute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedRcb(Rcb);

impl ResolvedRcb {
    /// Wraps `rcb` if it holds only absolute references.
    pub fn new(rcb: Rcb) -> Option<Self> {
        rcb.ops
            .iter()
            .all(|o| o.op.addr_refs().iter().all(|(a, _)| a.is_absolute()))
            .then_some(Self(rcb))
    }

    pub fn rcb(&self) -> &Rcb {
        &self.0
    }

    pub fn into_inner(self) -> Rcb {
        self.0
    }
}

impl std::ops::Deref for ResolvedRcb {
    type Target = Rcb;

    fn deref(&self) -> &Rcb {
        &self.0
    }
}

pub fn bind(rcb: &Rcb, table: &BindingTable, grid: &GridConfig) -> Result<ResolvedRcb, BindError> {
    let missing: BTreeSet<u32> = rcb
        .ops
        .iter()
        .flat_map(|o| o.op.addr_refs())
        .filter_map(|(a, _)| match a {
            AddrRef::Symbolic { buffer_id, .. } if table.get(buffer_id).is_none() => Some(buffer_id),
            _ => None,
        })
        .collect();
    if !missing.is_empty() {
        return Err(BindError::UnresolvedSymbol(missing.into_iter().collect()));
    }

    let mut ops = Vec::with_capacity(rcb.ops.len());
    for (op_index, o) in rcb.ops.iter().enumerate() {
        let op = o.op.map_addrs(|addr, len| match addr {
            AddrRef::Absolute(_) => Ok(addr),
            AddrRef::Symbolic { buffer_id, offset } => {
                let b = table.get(buffer_id).expect("checked above");
                if offset as u64 + len > b.size {
                    return Err(BindError::Range { op_index, addr, len });
                }
                Ok(AddrRef::Absolute(b.address + offset as u64))
            }
            AddrRef::RelativeTile { col, row, offset } => {
                if !grid.contains(col, row) {
                    return Err(BindError::TileOutOfGrid { op_index, col, row });
                }
                if offset as u64 + len > TILE_STRIDE {
                    return Err(BindError::Range { op_index, addr, len });
                }
                Ok(AddrRef::Absolute(grid.tile_base(col, row) + offset as u64))
            }
        })?;
        ops.push(crate::rcb::Operation { flags: o.flags, op });
    }
    Ok(ResolvedRcb(Rcb { ops, ..rcb.clone() }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Image,
    /// Index into [`AllocationPlan::slots`].
    Arena { slot: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferPlan {
    pub id: u32,
    pub class: TensorClass,
    pub size: u64,
    pub first_use: usize,
    pub last_use: usize,
    pub placement: Placement,
}

impl BufferPlan {
    pub fn overlaps(&self, other: &BufferPlan) -> bool {
        self.first_use <= other.last_use && other.first_use <= self.last_use
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationPlan {
    pub buffers: BTreeMap<u32, BufferPlan>,
    /// Arena regions; buffers with disjoint lifetimes may share one.
    pub slots: Vec<Region>,
    pub peak_live_bytes: u64,
    pub pipeline_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("buffers {0:?} referenced by the pipeline are missing from the manifest")]
    ManifestGap(Vec<u32>),
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

impl AllocationPlan {
    pub fn buffer(&self, id: u32) -> Option<&BufferPlan> {
        self.buffers.get(&id)
    }

    pub fn region_of(&self, id: u32) -> Option<&Region> {
        match self.buffers.get(&id)?.placement {
            Placement::Arena { slot } => self.slots.get(slot),
            Placement::Image => None,
        }
    }

    /// Largest number of arena buffers live at the same pipeline step.
    pub fn peak_live_regions(&self) -> usize {
        (0..self.pipeline_len)
            .map(|t| {
                self.arena_buffers()
                    .filter(|b| b.first_use <= t && t <= b.last_use)
                    .count()
            })
            .max()
            .unwrap_or(0)
    }

    pub fn arena_buffers(&self) -> impl Iterator<Item = &BufferPlan> {
        self.buffers
            .values()
            .filter(|b| matches!(b.placement, Placement::Arena { .. }))
    }

    /// Arena buffers whose lifetime ends with block `index`.
    pub fn release_after(&self, index: usize) -> Vec<u32> {
        self.arena_buffers()
            .filter(|b| b.last_use == index)
            .map(|b| b.id)
            .collect()
    }

    /// Returns every slot region to `arena`.
    pub fn release_regions(&self, arena: &mut RegionAllocator) {
        for r in &self.slots {
            let _ = arena.release(r.id);
        }
    }
}

/// Computes buffer lifetimes over `pipeline` and assigns arena regions
/// greedily in lifetime order, reusing a region once its previous occupant
/// is dead.
///
/// Inputs are live from the first block and outputs until the last, since
/// the host touches them outside the pipeline.
pub fn plan_buffers(
    pipeline: &[Rcb],
    manifest: &Manifest,
    arena: &mut RegionAllocator,
) -> Result<AllocationPlan, PlanError> {
    let mut uses: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (i, rcb) in pipeline.iter().enumerate() {
        for o in &rcb.ops {
            for (a, _) in o.op.addr_refs() {
                if let AddrRef::Symbolic { buffer_id, .. } = a {
                    let e = uses.entry(buffer_id).or_insert((i, i));
                    e.1 = i;
                }
            }
        }
    }
    let gaps: Vec<u32> = uses.keys().copied().filter(|id| !manifest.contains(*id)).collect();
    if !gaps.is_empty() {
        return Err(PlanError::ManifestGap(gaps));
    }
    let last = pipeline.len().saturating_sub(1);

    let mut buffers: BTreeMap<u32, BufferPlan> = BTreeMap::new();
    for (&id, &(first, lst)) in &uses {
        let t = manifest.get(id).expect("checked above");
        let (first_use, last_use) = match t.class {
            TensorClass::Input => (0, lst),
            TensorClass::Output => (first, last),
            _ => (first, lst),
        };
        buffers.insert(
            id,
            BufferPlan {
                id,
                class: t.class,
                size: t.size,
                first_use,
                last_use,
                placement: Placement::Image,
            },
        );
    }

    struct Slot {
        size: u64,
        align: u64,
        busy_until: usize,
    }
    let mut slots: Vec<Slot> = Vec::new();
    let mut order: Vec<&mut BufferPlan> = buffers
        .values_mut()
        .filter(|b| b.class != TensorClass::Weight)
        .collect();
    order.sort_by_key(|b| (b.first_use, b.last_use, b.id));
    for b in order {
        let align = manifest.get(b.id).map(|t| t.alignment.max(1)).unwrap_or(1);
        let free = slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.busy_until < b.first_use);
        // Prefer the tightest slot that fits; otherwise grow the largest.
        let fitting = free
            .clone()
            .filter(|(_, s)| s.size >= b.size)
            .min_by_key(|(i, s)| (s.size, *i))
            .map(|(i, _)| i);
        let chosen = fitting.or_else(|| free.max_by_key(|(i, s)| (s.size, usize::MAX - i)).map(|(i, _)| i));
        let slot = match chosen {
            Some(i) => {
                let s = &mut slots[i];
                s.size = s.size.max(b.size);
                s.align = s.align.max(align);
                s.busy_until = b.last_use;
                i
            }
            None => {
                slots.push(Slot {
                    size: b.size,
                    align,
                    busy_until: b.last_use,
                });
                slots.len() - 1
            }
        };
        b.placement = Placement::Arena { slot };
    }

    let mut regions = Vec::with_capacity(slots.len());
    for s in &slots {
        match arena.alloc(s.size.max(1), s.align.next_power_of_two()) {
            Ok(r) => regions.push(r),
            Err(e) => {
                for r in &regions {
                    let _ = arena.release(r.id);
                }
                return Err(e.into());
            }
        }
    }

    let peak_live_bytes = (0..pipeline.len())
        .map(|t| {
            buffers
                .values()
                .filter(|b| b.class != TensorClass::Weight && b.first_use <= t && t <= b.last_use)
                .map(|b| b.size)
                .sum::<u64>()
        })
        .max()
        .unwrap_or(0);

    Ok(AllocationPlan {
        buffers,
        slots: regions,
        peak_live_bytes,
        pipeline_len: pipeline.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{DType, TensorSpec};
    use crate::rcb::{BlockType, DmaDirection, Op};

    fn sym(id: u32, offset: u32) -> AddrRef {
        AddrRef::Symbolic {
            buffer_id: id,
            offset,
        }
    }

    fn tensor(id: u32, class: TensorClass, size: u64) -> TensorSpec {
        TensorSpec {
            id,
            name: format!("t{id}"),
            class,
            size,
            alignment: 64,
            dtype: DType::I8,
            shape: vec![size as u32],
        }
    }

    /// A block that reads `ins` into tile (0,0) and writes `out` back.
    fn stage(ins: &[u32], out: u32) -> Rcb {
        let tile = AddrRef::RelativeTile {
            col: 0,
            row: 0,
            offset: 0x1000,
        };
        let mut ops: Vec<Op> = ins
            .iter()
            .map(|&i| Op::DmaTrigger {
                direction: DmaDirection::ToDevice,
                src: sym(i, 0),
                dst: tile,
                length: 16,
            })
            .collect();
        ops.push(Op::DmaTrigger {
            direction: DmaDirection::FromDevice,
            src: tile,
            dst: sym(out, 0),
            length: 16,
        });
        Rcb::with_ops(BlockType::Compute, ops)
    }

    fn table_with(id: u32, address: u64, size: u64) -> BindingTable {
        let mut t = BindingTable::new();
        t.insert(
            id,
            Binding {
                source: BindingSource::Image { file_id: id },
                address,
                size,
            },
        )
        .unwrap();
        t
    }

    #[test]
    fn symbolic_resolves_to_base_plus_offset() {
        let rcb = Rcb::with_ops(
            BlockType::Compute,
            [Op::RegWrite {
                addr: sym(7, 16),
                value: 1,
            }],
        );
        let r = bind(&rcb, &table_with(7, 0x140, 64), &GridConfig::default()).unwrap();
        assert_eq!(
            r.ops[0].op,
            Op::RegWrite {
                addr: AddrRef::Absolute(0x150),
                value: 1
            }
        );
    }

    #[test]
    fn all_missing_symbols_reported() {
        let rcb = Rcb::with_ops(
            BlockType::Compute,
            [
                Op::RegWrite { addr: sym(9, 0), value: 0 },
                Op::RegWrite { addr: sym(3, 0), value: 0 },
                Op::RegWrite { addr: sym(9, 4), value: 0 },
            ],
        );
        assert_eq!(
            bind(&rcb, &BindingTable::new(), &GridConfig::default()),
            Err(BindError::UnresolvedSymbol(vec![3, 9]))
        );
    }

    #[test]
    fn relative_tile_resolution() {
        let rcb = Rcb::with_ops(
            BlockType::Config,
            [Op::RegWrite {
                addr: AddrRef::RelativeTile {
                    col: 1,
                    row: 0,
                    offset: 0x08,
                },
                value: 2,
            }],
        );
        let r = bind(&rcb, &BindingTable::new(), &GridConfig::default()).unwrap();
        assert_eq!(r.ops[0].op.addr_refs()[0].0, AddrRef::Absolute(0x1002_0008));

        let outside = Rcb::with_ops(
            BlockType::Config,
            [Op::RegWrite {
                addr: AddrRef::RelativeTile {
                    col: 4,
                    row: 0,
                    offset: 0,
                },
                value: 2,
            }],
        );
        assert!(matches!(
            bind(&outside, &BindingTable::new(), &GridConfig::default()),
            Err(BindError::TileOutOfGrid { op_index: 0, col: 4, .. })
        ));
    }

    #[test]
    fn out_of_range_offset() {
        let rcb = Rcb::with_ops(
            BlockType::Compute,
            [Op::CacheFlush {
                addr: sym(7, 32),
                length: 64,
            }],
        );
        assert!(matches!(
            bind(&rcb, &table_with(7, 0, 64), &GridConfig::default()),
            Err(BindError::Range { op_index: 0, .. })
        ));
    }

    #[test]
    fn bind_is_idempotent() {
        let rcb = stage(&[7], 7);
        let t = table_with(7, 0x8000_0000, 64);
        let once = bind(&rcb, &t, &GridConfig::default()).unwrap();
        let twice = bind(once.rcb(), &t, &GridConfig::default()).unwrap();
        assert_eq!(once, twice);
        assert!(ResolvedRcb::new(rcb).is_none());
    }

    #[test]
    fn chain_reuses_regions() {
        // x0 -> A -> x1 -> B -> x2 -> C -> x3
        let pipeline = vec![stage(&[10], 11), stage(&[11], 12), stage(&[12], 13)];
        let manifest = Manifest {
            tensors: vec![
                tensor(10, TensorClass::Input, 64),
                tensor(11, TensorClass::Activation, 64),
                tensor(12, TensorClass::Activation, 64),
                tensor(13, TensorClass::Output, 64),
            ],
        };
        let mut arena = RegionAllocator::new(0x8000_0000, 1 << 16);
        let plan = plan_buffers(&pipeline, &manifest, &mut arena).unwrap();
        assert_eq!(plan.slots.len(), 2);
        assert_eq!(plan.peak_live_regions(), 2);
        assert_eq!(plan.peak_live_bytes, 128);
        assert_eq!(plan.release_after(1), vec![11]);
        assert_eq!(plan.release_after(2), vec![12, 13]);
        assert_eq!(plan.release_after(5), Vec::<u32>::new());
        assert_eq!(plan.region_of(10), plan.region_of(12));
    }

    #[test]
    fn single_block_single_buffer() {
        let pipeline = vec![stage(&[1], 1)];
        let manifest = Manifest {
            tensors: vec![tensor(1, TensorClass::Activation, 16)],
        };
        let mut arena = RegionAllocator::new(0, 4096);
        let plan = plan_buffers(&pipeline, &manifest, &mut arena).unwrap();
        assert_eq!(plan.slots.len(), 1);
        assert_eq!(plan.peak_live_regions(), 1);
    }

    #[test]
    fn shared_weight_bound_once() {
        let pipeline = vec![stage(&[50, 1], 2), stage(&[50, 3], 4)];
        let manifest = Manifest {
            tensors: vec![
                tensor(50, TensorClass::Weight, 16),
                tensor(1, TensorClass::Input, 16),
                tensor(2, TensorClass::Output, 16),
                tensor(3, TensorClass::Input, 16),
                tensor(4, TensorClass::Output, 16),
            ],
        };
        let mut arena = RegionAllocator::new(0, 4096);
        let plan = plan_buffers(&pipeline, &manifest, &mut arena).unwrap();
        let w = plan.buffer(50).unwrap();
        assert_eq!(w.placement, Placement::Image);
        assert_eq!((w.first_use, w.last_use), (0, 1));
        assert_eq!(plan.buffers.values().filter(|b| b.id == 50).count(), 1);
        assert!(plan.arena_buffers().all(|b| b.id != 50));
    }

    #[test]
    fn manifest_gap() {
        let mut arena = RegionAllocator::new(0, 4096);
        assert_eq!(
            plan_buffers(&[stage(&[1], 2)], &Manifest::default(), &mut arena),
            Err(PlanError::ManifestGap(vec![1, 2]))
        );
    }

    #[test]
    fn arena_exhaustion_is_reported() {
        let manifest = Manifest {
            tensors: vec![tensor(1, TensorClass::Input, 4096), tensor(2, TensorClass::Output, 4096)],
        };
        let mut arena = RegionAllocator::new(0, 4096);
        assert!(matches!(
            plan_buffers(&[stage(&[1], 2)], &manifest, &mut arena),
            Err(PlanError::Alloc(AllocError::OutOfMemory { .. }))
        ));
        assert_eq!(arena.live_bytes(), 0);
    }
}
