//! Node-to-tile assignment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ir::GraphIr;
use crate::hal::GridConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{nodes} nodes do not fit on a {cols}x{rows} grid")]
pub struct PlaceError {
    pub nodes: usize,
    pub cols: u16,
    pub rows: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlacement {
    pub node: String,
    pub rcb: usize,
    pub col: u16,
    pub row: u16,
}

/// Row-major, one node per tile, in topological order.
pub fn place(graph: &GraphIr, grid: &GridConfig) -> Result<Vec<TilePlacement>, PlaceError> {
    if graph.nodes.len() > grid.tiles() {
        return Err(PlaceError {
            nodes: graph.nodes.len(),
            cols: grid.cols,
            rows: grid.rows,
        });
    }
    Ok(graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| TilePlacement {
            node: n.name.clone(),
            rcb: i,
            col: (i % grid.cols as usize) as u16,
            row: (i / grid.cols as usize) as u16,
        })
        .collect())
}
