//! Node lowering: one COMPUTE block per placed node.

use thiserror::Error;

use super::ir::GraphIr;
use super::place::TilePlacement;
use crate::hal::kernels::{self, LayoutError};
use crate::hal::layout::*;
use crate::hal::{DmaDirection, GridConfig};
use crate::manifest::TensorClass;
use crate::rcb::{AddrRef, BlockType, Op, Rcb};

pub const POLL_TIMEOUT_US: u32 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LowerOptions {
    /// Flush host-written inputs before they are read by DMA.
    pub cache_ops: bool,
    /// Synchronize on the completion event instead of polling STATUS.
    pub wait_event: bool,
    pub grid: GridConfig,
    pub local_mem_size: u32,
}

impl Default for LowerOptions {
    fn default() -> Self {
        Self {
            cache_ops: false,
            wait_event: false,
            grid: GridConfig::default(),
            local_mem_size: 65536,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LowerError {
    #[error("{node}: {count} params exceed the {PARAM_COUNT} PARAM registers")]
    ParamOverflow { node: String, count: usize },
    #[error("{node}: {source}")]
    Layout { node: String, source: LayoutError },
    #[error("placement does not match the graph")]
    Placement,
}

fn reg(t: &TilePlacement, offset: u32) -> AddrRef {
    AddrRef::RelativeTile {
        col: t.col,
        row: t.row,
        offset,
    }
}

fn sym(id: u32) -> AddrRef {
    AddrRef::Symbolic { buffer_id: id, offset: 0 }
}

pub fn lower(graph: &GraphIr, placement: &[TilePlacement], opts: &LowerOptions) -> Result<Vec<Rcb>, LowerError> {
    if placement.len() != graph.nodes.len() {
        return Err(LowerError::Placement);
    }
    let mut out = Vec::with_capacity(graph.nodes.len());
    for (i, (node, tile)) in graph.nodes.iter().zip(placement).enumerate() {
        if tile.node != node.name {
            return Err(LowerError::Placement);
        }
        if node.params.len() > PARAM_COUNT {
            return Err(LowerError::ParamOverflow {
                node: node.name.clone(),
                count: node.params.len(),
            });
        }
        let layout = kernels::layout(node.kernel, &node.params, opts.local_mem_size).map_err(|source| {
            LowerError::Layout {
                node: node.name.clone(),
                source,
            }
        })?;

        let mut rcb = Rcb::new(BlockType::Compute);
        rcb.deps = node.producers.iter().map(|&p| p as u32).collect();
        debug_assert!(node.producers.iter().all(|&p| p < i));

        rcb.push(Op::RegWrite {
            addr: reg(tile, REG_KERNEL_ID),
            value: node.kernel as u32,
        });
        for (k, &v) in node.params.iter().enumerate() {
            rcb.push(Op::RegWrite {
                addr: reg(tile, param_offset(k)),
                value: v,
            });
        }
        for (&id, buf) in node.inputs.iter().zip(&layout.inputs) {
            let host_written = graph.manifest.get(id).map(|t| t.class) == Some(TensorClass::Input);
            if opts.cache_ops && host_written {
                rcb.push(Op::CacheFlush {
                    addr: sym(id),
                    length: buf.len,
                });
            }
            rcb.push(Op::DmaTrigger {
                direction: DmaDirection::ToDevice,
                src: sym(id),
                dst: reg(tile, LOCAL_MEM_OFFSET + buf.offset),
                length: buf.len,
            });
        }
        rcb.push(Op::RegWrite {
            addr: reg(tile, REG_CTRL),
            value: CTRL_START,
        });
        if opts.wait_event {
            rcb.push(Op::WaitEvent {
                event_id: opts.grid.completion_event(tile.col, tile.row),
            });
        } else {
            rcb.push(Op::PollMask {
                addr: reg(tile, REG_STATUS),
                mask: STATUS_DONE,
                expected: STATUS_DONE,
                timeout_us: POLL_TIMEOUT_US,
            });
        }
        rcb.push(Op::DmaTrigger {
            direction: DmaDirection::FromDevice,
            src: reg(tile, LOCAL_MEM_OFFSET + layout.output.offset),
            dst: sym(node.output),
            length: layout.output.len,
        });
        out.push(rcb);
    }
    Ok(out)
}
