//! Model artifacts: packing weights and blocks, on-disk layout and the
//! provisioning wire format.
//!
//! A model directory holds `model.rimfs`, `000.rcb`, `001.rcb`, ...,
//! `manifest.json` and `placement.json`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::ir::{parse_graph, GraphError, GraphIr};
use super::lower::{lower, LowerError, LowerOptions};
use super::place::{place, PlaceError, TilePlacement};
use crate::manifest::Manifest;
use crate::rcb::{decode_rcb, encode_rcb, FormatError, Rcb};
use crate::rimfs::{build_image, BuildError};

pub const IMAGE_FILE: &str = "model.rimfs";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLACEMENT_FILE: &str = "placement.json";
/// "RPLN"
pub const PLAN_MAGIC: u32 = 0x4E4C_5052;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("no payload for weight file {0}")]
    MissingWeight(u32),
    #[error("weight file {id} has {got} bytes, manifest expects {want}")]
    WeightSize { id: u32, got: u64, want: u64 },
    #[error(transparent)]
    Image(#[from] BuildError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Place(#[from] PlaceError),
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error(transparent)]
    Pack(#[from] PackError),
}

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{0}: no control blocks found")]
    Empty(PathBuf),
}

#[derive(Debug, Error)]
pub enum PlanDecodeError {
    #[error("bad plan magic {0:#010x}")]
    Magic(u32),
    #[error("plan truncated")]
    Truncated,
    #[error("{0} trailing bytes after plan")]
    Trailing(usize),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("block {index}: {source}")]
    Block { index: usize, source: FormatError },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledModel {
    pub rcbs: Vec<Rcb>,
    pub image: Vec<u8>,
    pub manifest: Manifest,
    pub placement: Vec<TilePlacement>,
}

/// Flattens weights in first-use order into an image, looking payloads up
/// with `weight`.
pub fn pack(
    graph: &GraphIr,
    rcbs: Vec<Rcb>,
    placement: Vec<TilePlacement>,
    mut weight: impl FnMut(u32) -> Option<Vec<u8>>,
) -> Result<CompiledModel, PackError> {
    let mut files = Vec::new();
    for id in graph.weight_ids() {
        let data = weight(id).ok_or(PackError::MissingWeight(id))?;
        let want = graph.manifest.get(id).map(|t| t.size).unwrap_or(0);
        if data.len() as u64 != want {
            return Err(PackError::WeightSize {
                id,
                got: data.len() as u64,
                want,
            });
        }
        files.push((id, data));
    }
    for r in &rcbs {
        encode_rcb(r)?;
    }
    Ok(CompiledModel {
        rcbs,
        image: build_image(&files)?,
        manifest: graph.manifest.clone(),
        placement,
    })
}

/// Parses, places, lowers and packs a graph document.
pub fn compile(
    text: &str,
    opts: &LowerOptions,
    weight: impl FnMut(u32) -> Option<Vec<u8>>,
) -> Result<CompiledModel, CompileError> {
    let graph = parse_graph(text)?;
    let placement = place(&graph, &opts.grid)?;
    let rcbs = lower(&graph, &placement, opts)?;
    Ok(pack(&graph, rcbs, placement, weight)?)
}

/// Reads weight `id` from `<dir>/<id>.bin`.
pub fn weights_from_dir(dir: &Path) -> impl FnMut(u32) -> Option<Vec<u8>> + '_ {
    move |id| fs::read(dir.join(format!("{id}.bin"))).ok()
}

fn rcb_file_name(i: usize) -> String {
    format!("{i:03}.rcb")
}

impl CompiledModel {
    pub fn encoded_rcbs(&self) -> Vec<Vec<u8>> {
        self.rcbs
            .iter()
            .map(|r| encode_rcb(r).expect("validated at pack time"))
            .collect()
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), ArtifactError> {
        let io_err = |path: PathBuf| move |source| ArtifactError::Io { path, source };
        fs::create_dir_all(dir).map_err(io_err(dir.to_path_buf()))?;
        // Stale blocks from an earlier, longer model would be picked up on load.
        if let Ok(entries) = fs::read_dir(dir) {
            for e in entries.flatten() {
                if e.path().extension().is_some_and(|x| x == "rcb") {
                    let _ = fs::remove_file(e.path());
                }
            }
        }
        let put = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(io_err(p))
        };
        put(IMAGE_FILE, &self.image)?;
        for (i, bytes) in self.encoded_rcbs().iter().enumerate() {
            put(&rcb_file_name(i), bytes)?;
        }
        put(MANIFEST_FILE, self.manifest.to_json().as_bytes())?;
        let placement = serde_json::to_string_pretty(&self.placement).expect("placement serializes");
        put(PLACEMENT_FILE, placement.as_bytes())?;
        Ok(())
    }

    pub fn read_from(dir: &Path) -> Result<Self, ArtifactError> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|source| ArtifactError::Io { path: p, source })
        };
        let json = |name: &str, bytes: Vec<u8>| {
            let path = dir.join(name);
            String::from_utf8(bytes).map_err(|e| ArtifactError::Io {
                path,
                source: io::Error::new(io::ErrorKind::InvalidData, e),
            })
        };
        let image = read(IMAGE_FILE)?;
        let manifest_text = json(MANIFEST_FILE, read(MANIFEST_FILE)?)?;
        let manifest = Manifest::from_json(&manifest_text).map_err(|source| ArtifactError::Json {
            path: dir.join(MANIFEST_FILE),
            source,
        })?;
        let placement_text = json(PLACEMENT_FILE, read(PLACEMENT_FILE)?)?;
        let placement = serde_json::from_str(&placement_text).map_err(|source| ArtifactError::Json {
            path: dir.join(PLACEMENT_FILE),
            source,
        })?;
        let mut rcbs = Vec::new();
        loop {
            let name = rcb_file_name(rcbs.len());
            let path = dir.join(&name);
            if !path.exists() {
                break;
            }
            let bytes = read(&name)?;
            rcbs.push(decode_rcb(&bytes).map_err(|source| ArtifactError::Format { path, source })?);
        }
        if rcbs.is_empty() {
            return Err(ArtifactError::Empty(dir.to_path_buf()));
        }
        Ok(Self {
            rcbs,
            image,
            manifest,
            placement,
        })
    }

    pub fn plan_bundle(&self) -> Vec<u8> {
        encode_plan(&self.encoded_rcbs(), &self.manifest)
    }
}

/// `magic | block count | manifest len | manifest JSON | (len | block)*`,
/// all lengths u32 little-endian.
pub fn encode_plan(rcbs: &[Vec<u8>], manifest: &Manifest) -> Vec<u8> {
    let m = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&PLAN_MAGIC.to_le_bytes());
    out.extend_from_slice(&(rcbs.len() as u32).to_le_bytes());
    out.extend_from_slice(&(m.len() as u32).to_le_bytes());
    out.extend_from_slice(&m);
    for r in rcbs {
        out.extend_from_slice(&(r.len() as u32).to_le_bytes());
        out.extend_from_slice(r);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PlanDecodeError> {
        let s = self
            .buf
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or(PlanDecodeError::Truncated)?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PlanDecodeError> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_plan(buf: &[u8]) -> Result<(Vec<Rcb>, Manifest), PlanDecodeError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.u32()?;
    if magic != PLAN_MAGIC {
        return Err(PlanDecodeError::Magic(magic));
    }
    let count = r.u32()? as usize;
    let mlen = r.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)?;
    let mut rcbs = Vec::with_capacity(count.min(1024));
    for index in 0..count {
        let len = r.u32()? as usize;
        let bytes = r.take(len)?;
        rcbs.push(decode_rcb(bytes).map_err(|source| PlanDecodeError::Block { index, source })?);
    }
    if r.pos != buf.len() {
        return Err(PlanDecodeError::Trailing(buf.len() - r.pos));
    }
    Ok((rcbs, manifest))
}
