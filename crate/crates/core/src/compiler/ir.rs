//! Dataflow graph IR: kernels connected by typed tensor streams.
//!
//! ```json
//! {
//!   "nodes":   [{"name": "mm", "kernel": "MATMUL_I8", "params": [64, 64, 64], "weights": {"b": 1}}],
//!   "edges":   [{"from": "x", "to": "mm:a", "shape": [64, 64], "dtype": "i8"},
//!               {"from": "mm:c", "to": "y", "shape": [64, 64], "dtype": "i32"}],
//!   "inputs":  [{"name": "x", "shape": [64, 64], "dtype": "i8"}],
//!   "outputs": [{"name": "y", "shape": [64, 64], "dtype": "i32"}]
//! }
//! ```
//!
//! An endpoint is either `node:port` or the bare name of a graph input (as a
//! source) or graph output (as a sink). Weight ports are fed from image
//! files instead of edges.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Deserialize;
use thiserror::Error;

use crate::hal::KernelId;
use crate::manifest::{DType, Manifest, TensorClass, TensorSpec};

/// First id handed to compiler-generated tensors. Weight file ids must stay
/// below it.
pub const ACTIVATION_ID_BASE: u32 = 0x8000_0000;
pub const TENSOR_ALIGNMENT: u64 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    Json(String),
    #[error("cycle through nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown kernel {0:?}")]
    Kernel(String),
    #[error("port error: {0}")]
    Port(String),
    #[error("duplicate name {0:?}")]
    Duplicate(String),
    #[error("{node}: {kernel} needs {need} params, got {got}")]
    Params {
        node: String,
        kernel: KernelId,
        need: usize,
        got: usize,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    name: String,
    kernel: String,
    params: Vec<u32>,
    #[serde(default)]
    weights: BTreeMap<String, u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    from: String,
    to: String,
    shape: Vec<u32>,
    dtype: DType,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDoc {
    name: String,
    shape: Vec<u32>,
    dtype: DType,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    nodes: Vec<NodeDoc>,
    #[serde(default)]
    edges: Vec<EdgeDoc>,
    #[serde(default)]
    inputs: Vec<TensorDoc>,
    #[serde(default)]
    outputs: Vec<TensorDoc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub name: String,
    pub kernel: KernelId,
    pub params: Vec<u32>,
    /// Tensor ids in kernel port order.
    pub inputs: Vec<u32>,
    pub output: u32,
    /// Positions (in [`GraphIr::nodes`]) of nodes feeding this one.
    pub producers: Vec<usize>,
}

/// A validated graph with nodes in topological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphIr {
    pub nodes: Vec<Node>,
    /// Every tensor the graph touches, including weights.
    pub manifest: Manifest,
}

impl GraphIr {
    pub fn node(&self, name: &str) -> Option<(usize, &Node)> {
        self.nodes.iter().enumerate().find(|(_, n)| n.name == name)
    }

    /// Weight file ids in order of first use.
    pub fn weight_ids(&self) -> Vec<u32> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for n in &self.nodes {
            for &id in &n.inputs {
                if id < ACTIVATION_ID_BASE && seen.insert(id) {
                    out.push(id);
                }
            }
        }
        out
    }
}

fn element_count(shape: &[u32]) -> u64 {
    shape.iter().map(|&d| d as u64).product()
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Expect {
    dims: Option<Vec<u32>>,
    elements: u64,
    dtype: Option<DType>,
    bytes: u64,
}

impl Expect {
    fn check(&self, shape: &[u32], dtype: DType, what: &str) -> Result<(), GraphError> {
        let got_el = element_count(shape);
        let ok = match (&self.dims, self.dtype) {
            (Some(d), Some(t)) => d.as_slice() == shape && t == dtype,
            (None, Some(t)) => got_el == self.elements && t == dtype,
            (_, None) => got_el * dtype.size() == self.bytes,
        };
        if ok {
            Ok(())
        } else {
            Err(GraphError::Shape(format!(
                "{what}: declared {shape:?} {dtype:?}, kernel expects {}",
                self.describe()
            )))
        }
    }

    fn describe(&self) -> String {
        match (&self.dims, self.dtype) {
            (Some(d), Some(t)) => format!("{d:?} {t:?}"),
            (None, Some(t)) => format!("{} x {t:?}", self.elements),
            (_, None) => format!("{} bytes", self.bytes),
        }
    }

    /// Shape and dtype used when the port is fed from a weight file.
    fn materialize(&self) -> (Vec<u32>, DType) {
        match (&self.dims, self.dtype) {
            (Some(d), Some(t)) => (d.clone(), t),
            (None, Some(t)) => (vec![self.elements as u32], t),
            (_, None) => (vec![self.bytes as u32], DType::I8),
        }
    }
}

/// Port expectations: inputs in port order, then the output.
fn expectations(kernel: KernelId, p: &[u32]) -> Vec<Expect> {
    let exact = |d: [u32; 2], t: DType| Expect {
        elements: element_count(&d),
        bytes: element_count(&d) * t.size(),
        dims: Some(d.to_vec()),
        dtype: Some(t),
    };
    match kernel {
        KernelId::MatmulI8 => {
            let (m, k, n) = (p[0], p[1], p[2]);
            vec![exact([m, k], DType::I8), exact([k, n], DType::I8), exact([m, n], DType::I32)]
        }
        KernelId::Conv2dF32 => {
            let (h, w, kh, kw) = (p[0], p[1], p[2], p[3]);
            let out = |x: u32, k: u32| (x + 1).saturating_sub(k);
            let f = DType::F32;
            vec![exact([h, w], f), exact([kh, kw], f), exact([out(h, kh), out(w, kw)], f)]
        }
        KernelId::ReluF32 | KernelId::SoftmaxF32 => {
            let e = Expect {
                dims: None,
                elements: p[0] as u64,
                dtype: Some(DType::F32),
                bytes: p[0] as u64 * 4,
            };
            vec![e.clone(), e]
        }
        KernelId::Passthrough => {
            // Raw bytes of any element type.
            let e = Expect {
                dims: None,
                elements: p[0] as u64,
                dtype: None,
                bytes: p[0] as u64,
            };
            vec![e.clone(), e]
        }
    }
}

enum Endpoint<'a> {
    Port(&'a str, &'a str),
    Graph(&'a str),
}

fn endpoint(s: &str) -> Endpoint<'_> {
    match s.split_once(':') {
        Some((n, p)) => Endpoint::Port(n, p),
        None => Endpoint::Graph(s),
    }
}

pub fn parse_graph(text: &str) -> Result<GraphIr, GraphError> {
    let doc: GraphDoc = serde_json::from_str(text).map_err(|e| GraphError::Json(e.to_string()))?;
    build(doc)
}

fn build(doc: GraphDoc) -> Result<GraphIr, GraphError> {
    let mut names = BTreeSet::new();
    for n in doc.nodes.iter().map(|n| &n.name).chain(doc.inputs.iter().map(|t| &t.name)).chain(doc.outputs.iter().map(|t| &t.name)) {
        if n.contains(':') || n.is_empty() {
            return Err(GraphError::Port(format!("invalid name {n:?}")));
        }
        if !names.insert(n.clone()) {
            return Err(GraphError::Duplicate(n.clone()));
        }
    }

    let node_index: BTreeMap<&str, usize> = doc.nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
    let mut kernels = Vec::with_capacity(doc.nodes.len());
    let mut expects = Vec::with_capacity(doc.nodes.len());
    for n in &doc.nodes {
        let k = KernelId::from_name(&n.kernel).ok_or_else(|| GraphError::Kernel(n.kernel.clone()))?;
        if n.params.len() < k.param_count() {
            return Err(GraphError::Params {
                node: n.name.clone(),
                kernel: k,
                need: k.param_count(),
                got: n.params.len(),
            });
        }
        for port in n.weights.keys() {
            if !k.input_ports().contains(&port.as_str()) {
                return Err(GraphError::Port(format!("{}: {k} has no input port {port:?}", n.name)));
            }
        }
        kernels.push(k);
        expects.push(expectations(k, &n.params));
    }

    let graph_inputs: BTreeMap<&str, &TensorDoc> = doc.inputs.iter().map(|t| (t.name.as_str(), t)).collect();
    let graph_outputs: BTreeMap<&str, &TensorDoc> = doc.outputs.iter().map(|t| (t.name.as_str(), t)).collect();

    enum Source<'a> {
        Input(&'a str),
        Node(usize),
    }
    // (node, port index) -> source
    let mut feeds: BTreeMap<(usize, usize), Source> = BTreeMap::new();
    let mut output_feeds: BTreeMap<&str, usize> = BTreeMap::new();
    let mut consumers: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); doc.nodes.len()];
    let mut used_inputs = BTreeSet::new();

    for e in &doc.edges {
        let what = format!("edge {} -> {}", e.from, e.to);
        let src = match endpoint(&e.from) {
            Endpoint::Port(n, p) => {
                let &i = node_index.get(n).ok_or_else(|| GraphError::Port(format!("{what}: unknown node {n:?}")))?;
                if p != kernels[i].output_port() {
                    return Err(GraphError::Port(format!("{what}: {n} has no output port {p:?}")));
                }
                expects[i].last().unwrap().check(&e.shape, e.dtype, &what)?;
                Source::Node(i)
            }
            Endpoint::Graph(g) => {
                let t = graph_inputs.get(g).ok_or_else(|| GraphError::Port(format!("{what}: unknown graph input {g:?}")))?;
                if t.shape != e.shape || t.dtype != e.dtype {
                    return Err(GraphError::Shape(format!("{what}: edge disagrees with input {g:?}")));
                }
                used_inputs.insert(g);
                Source::Input(g)
            }
        };
        match endpoint(&e.to) {
            Endpoint::Port(n, p) => {
                let &i = node_index.get(n).ok_or_else(|| GraphError::Port(format!("{what}: unknown node {n:?}")))?;
                let j = kernels[i]
                    .input_ports()
                    .iter()
                    .position(|q| *q == p)
                    .ok_or_else(|| GraphError::Port(format!("{what}: {n} has no input port {p:?}")))?;
                if doc.nodes[i].weights.contains_key(p) {
                    return Err(GraphError::Port(format!("{what}: port {p:?} is already fed by a weight")));
                }
                expects[i][j].check(&e.shape, e.dtype, &what)?;
                if let Source::Node(s) = src {
                    consumers[s].insert(i);
                }
                if feeds.insert((i, j), src).is_some() {
                    return Err(GraphError::Port(format!("{what}: port fed twice")));
                }
            }
            Endpoint::Graph(g) => {
                let t = graph_outputs.get(g).ok_or_else(|| GraphError::Port(format!("{what}: unknown graph output {g:?}")))?;
                if t.shape != e.shape || t.dtype != e.dtype {
                    return Err(GraphError::Shape(format!("{what}: edge disagrees with output {g:?}")));
                }
                let Source::Node(s) = src else {
                    return Err(GraphError::Port(format!("{what}: graph input wired straight to an output")));
                };
                if output_feeds.insert(g, s).is_some() {
                    return Err(GraphError::Port(format!("{what}: output {g:?} fed twice")));
                }
            }
        }
    }
    for (i, n) in doc.nodes.iter().enumerate() {
        for (j, p) in kernels[i].input_ports().iter().enumerate() {
            if !feeds.contains_key(&(i, j)) && !n.weights.contains_key(*p) {
                return Err(GraphError::Port(format!("{}: input port {p:?} is not connected", n.name)));
            }
        }
    }
    if let Some(t) = doc.inputs.iter().find(|t| !used_inputs.contains(t.name.as_str())) {
        return Err(GraphError::Port(format!("graph input {:?} is never consumed", t.name)));
    }
    if let Some(t) = doc.outputs.iter().find(|t| !output_feeds.contains_key(t.name.as_str())) {
        return Err(GraphError::Port(format!("graph output {:?} is never produced", t.name)));
    }

    let order = topo_order(&consumers).map_err(|cyclic| {
        GraphError::Cycle(cyclic.into_iter().map(|i| doc.nodes[i].name.clone()).collect())
    })?;
    let position: BTreeMap<usize, usize> = order.iter().enumerate().map(|(pos, &i)| (i, pos)).collect();

    // Tensor ids: graph inputs in declaration order, then node outputs in
    // topological order, then weights keep their file ids.
    let mut manifest = Manifest::default();
    let mut next = ACTIVATION_ID_BASE;
    let mut input_ids = BTreeMap::new();
    for t in &doc.inputs {
        input_ids.insert(t.name.as_str(), next);
        manifest.tensors.push(spec(next, &t.name, TensorClass::Input, &t.shape, t.dtype));
        next += 1;
    }
    let produced_outputs: BTreeMap<usize, &str> = output_feeds.iter().map(|(g, &n)| (n, *g)).collect();
    let mut output_ids = BTreeMap::new();
    for &i in &order {
        let n = &doc.nodes[i];
        let port = kernels[i].output_port();
        let (class, name, (shape, dtype)) = match produced_outputs.get(&i) {
            Some(g) => (
                TensorClass::Output,
                g.to_string(),
                (graph_outputs[g].shape.clone(), graph_outputs[g].dtype),
            ),
            None => (
                TensorClass::Activation,
                format!("{}:{port}", n.name),
                edge_shape(&doc.edges, &n.name, port).unwrap_or_else(|| expects[i].last().unwrap().materialize()),
            ),
        };
        output_ids.insert(i, next);
        manifest.tensors.push(spec(next, &name, class, &shape, dtype));
        next += 1;
    }

    let mut weights: BTreeMap<u32, TensorSpec> = BTreeMap::new();
    let mut nodes = Vec::with_capacity(order.len());
    for &i in &order {
        let n = &doc.nodes[i];
        let k = kernels[i];
        let mut inputs = Vec::new();
        let mut producers = BTreeSet::new();
        for (j, p) in k.input_ports().iter().enumerate() {
            let id = match feeds.get(&(i, j)) {
                Some(Source::Input(g)) => input_ids[g],
                Some(Source::Node(s)) => {
                    producers.insert(position[s]);
                    output_ids[s]
                }
                None => {
                    let fid = n.weights[*p];
                    if fid >= ACTIVATION_ID_BASE {
                        return Err(GraphError::Port(format!(
                            "{}: weight file id {fid:#x} collides with the activation id range",
                            n.name
                        )));
                    }
                    let (shape, dtype) = expects[i][j].materialize();
                    let s = spec(fid, &format!("weight:{fid}"), TensorClass::Weight, &shape, dtype);
                    if let Some(prev) = weights.get(&fid) {
                        if prev.size != s.size {
                            return Err(GraphError::Shape(format!(
                                "weight file {fid} used with sizes {} and {}",
                                prev.size, s.size
                            )));
                        }
                    } else {
                        weights.insert(fid, s);
                    }
                    fid
                }
            };
            inputs.push(id);
        }
        nodes.push(Node {
            name: n.name.clone(),
            kernel: k,
            params: n.params.clone(),
            inputs,
            output: output_ids[&i],
            producers: producers.into_iter().collect(),
        });
    }
    manifest.tensors.extend(weights.into_values());
    manifest.tensors.sort_by_key(|t| t.id);
    Ok(GraphIr { nodes, manifest })
}

fn edge_shape(edges: &[EdgeDoc], node: &str, port: &str) -> Option<(Vec<u32>, DType)> {
    let from = format!("{node}:{port}");
    edges.iter().find(|e| e.from == from).map(|e| (e.shape.clone(), e.dtype))
}

fn spec(id: u32, name: &str, class: TensorClass, shape: &[u32], dtype: DType) -> TensorSpec {
    TensorSpec {
        id,
        name: name.to_string(),
        class,
        size: element_count(shape) * dtype.size(),
        alignment: TENSOR_ALIGNMENT,
        dtype,
        shape: shape.to_vec(),
    }
}

/// Kahn's algorithm, ties broken by declaration order. On a cycle, returns
/// the nodes that lie on or between cycles.
fn topo_order(succ: &[BTreeSet<usize>]) -> Result<Vec<usize>, Vec<usize>> {
    let n = succ.len();
    let mut indeg = vec![0usize; n];
    for s in succ {
        for &v in s {
            indeg[v] += 1;
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(u) = ready.pop_first() {
        order.push(u);
        for &v in &succ[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                ready.insert(v);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    let placed: BTreeSet<usize> = order.into_iter().collect();
    let mut rest: BTreeSet<usize> = (0..n).filter(|i| !placed.contains(i)).collect();
    // Peel off nodes that only lead out of the cyclic core.
    let mut queue: VecDeque<usize> = rest.iter().copied().collect();
    while let Some(u) = queue.pop_front() {
        if rest.contains(&u) && succ[u].iter().all(|v| !rest.contains(v)) {
            rest.remove(&u);
            queue.extend(rest.iter().copied().filter(|&p| succ[p].contains(&u)));
        }
    }
    Err(rest.into_iter().collect())
}
