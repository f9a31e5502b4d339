mod common;

use std::collections::BTreeSet;

use common::*;
use rcbrt::compiler::{
    compile, lower, parse_graph, place, CompileError, CompiledModel, GraphError, LowerError, LowerOptions, PackError,
    ACTIVATION_ID_BASE,
};
use rcbrt::hal::GridConfig;
use rcbrt::rcb::{AddrRef, OpCode};
use rcbrt::rimfs::mount;
use rcbrt::{SimConfig, Runtime, TensorClass};

fn opcodes(m: &CompiledModel, i: usize) -> Vec<OpCode> {
    m.rcbs[i].ops.iter().map(|o| o.opcode()).collect()
}

fn chain(n: usize) -> String {
    let nodes: Vec<String> = (0..n)
        .map(|i| format!(r#"{{"name":"n{i}","kernel":"RELU_F32","params":[4]}}"#))
        .collect();
    let mut edges = vec![r#"{"from":"x","to":"n0:in","shape":[4],"dtype":"f32"}"#.to_string()];
    for i in 1..n {
        edges.push(format!(r#"{{"from":"n{}:out","to":"n{i}:in","shape":[4],"dtype":"f32"}}"#, i - 1));
    }
    edges.push(format!(r#"{{"from":"n{}:out","to":"y","shape":[4],"dtype":"f32"}}"#, n - 1));
    format!(
        r#"{{"nodes":[{}],"edges":[{}],"inputs":[{{"name":"x","shape":[4],"dtype":"f32"}}],"outputs":[{{"name":"y","shape":[4],"dtype":"f32"}}]}}"#,
        nodes.join(","),
        edges.join(",")
    )
}

#[test]
fn single_matmul_parses_to_one_node() {
    let g = parse_graph(XGEMM_GRAPH).unwrap();
    assert_eq!(g.nodes.len(), 1);
    assert_eq!(g.manifest.tensors.len(), 3);
}

#[test]
fn matmul_lowering_op_sequence() {
    let m = compile(XGEMM_GRAPH, &LowerOptions::default(), |_| None).unwrap();
    use OpCode::*;
    assert_eq!(
        opcodes(&m, 0),
        vec![RegWrite, RegWrite, RegWrite, RegWrite, DmaTrigger, DmaTrigger, RegWrite, PollMask, DmaTrigger]
    );
    assert!(m.rcbs[0].deps.is_empty());
}

#[test]
fn matmul_with_weight_b() {
    let g = r#"{"nodes":[{"name":"mm","kernel":"MATMUL_I8","params":[2,3,4],"weights":{"b":7}}],
      "edges":[{"from":"a","to":"mm:a","shape":[2,3],"dtype":"i8"},{"from":"mm:c","to":"c","shape":[2,4],"dtype":"i32"}],
      "inputs":[{"name":"a","shape":[2,3],"dtype":"i8"}],"outputs":[{"name":"c","shape":[2,4],"dtype":"i32"}]}"#;
    let m = compile(g, &LowerOptions::default(), |id| (id == 7).then(|| vec![1u8; 12])).unwrap();
    assert_eq!(m.rcbs[0].ops.len(), 9);
    let w = m.manifest.get(7).unwrap();
    assert_eq!((w.class, w.size), (TensorClass::Weight, 12));
    let img = mount(&m.image[..], 0).unwrap();
    assert_eq!(img.lookup(7).unwrap(), (64, 12));
}

#[test]
fn passthrough_lowering() {
    let g = r#"{"nodes":[{"name":"p","kernel":"PASSTHROUGH","params":[256]}],
      "edges":[{"from":"x","to":"p:in","shape":[256],"dtype":"i8"},{"from":"p:out","to":"y","shape":[256],"dtype":"i8"}],
      "inputs":[{"name":"x","shape":[256],"dtype":"i8"}],"outputs":[{"name":"y","shape":[256],"dtype":"i8"}]}"#;
    let m = compile(g, &LowerOptions::default(), |_| None).unwrap();
    use OpCode::*;
    assert_eq!(opcodes(&m, 0), vec![RegWrite, RegWrite, DmaTrigger, RegWrite, PollMask, DmaTrigger]);
}

#[test]
fn cache_ops_flush_host_inputs_only() {
    let k = f32_bytes(&[1.0; 4]);
    let opts = LowerOptions { cache_ops: true, ..Default::default() };
    let m = compile(CNN_GRAPH, &opts, |_| Some(k.clone())).unwrap();
    let flushes: Vec<usize> = (0..3).map(|i| opcodes(&m, i).iter().filter(|o| **o == OpCode::CacheFlush).count()).collect();
    assert_eq!(flushes, vec![1, 0, 0]);
}

#[test]
fn chain_deps_point_to_producer() {
    let m = compile(&chain(3), &LowerOptions::default(), |_| None).unwrap();
    assert_eq!(m.rcbs[0].deps, Vec::<u32>::new());
    assert_eq!(m.rcbs[1].deps, vec![0]);
    assert_eq!(m.rcbs[2].deps, vec![1]);
}

#[test]
fn cycle_rejected() {
    let g = r#"{"nodes":[{"name":"a","kernel":"RELU_F32","params":[4]},{"name":"b","kernel":"RELU_F32","params":[4]}],
      "edges":[{"from":"a:out","to":"b:in","shape":[4],"dtype":"f32"},{"from":"b:out","to":"a:in","shape":[4],"dtype":"f32"}]}"#;
    match parse_graph(g) {
        Err(GraphError::Cycle(nodes)) => assert_eq!(nodes, vec!["a", "b"]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn cycle_report_excludes_downstream_nodes() {
    let g = r#"{"nodes":[{"name":"a","kernel":"RELU_F32","params":[4]},{"name":"b","kernel":"RELU_F32","params":[4]},
        {"name":"c","kernel":"RELU_F32","params":[4]}],
      "edges":[{"from":"a:out","to":"b:in","shape":[4],"dtype":"f32"},{"from":"b:out","to":"a:in","shape":[4],"dtype":"f32"},
        {"from":"b:out","to":"c:in","shape":[4],"dtype":"f32"},{"from":"c:out","to":"y","shape":[4],"dtype":"f32"}],
      "outputs":[{"name":"y","shape":[4],"dtype":"f32"}]}"#;
    assert_eq!(parse_graph(g), Err(GraphError::Cycle(vec!["a".into(), "b".into()])));
}

#[test]
fn conv_output_shape_mismatch() {
    let g = CNN_GRAPH.replace(
        r#"{"from": "conv:out", "to": "relu:in", "shape": [3, 3], "dtype": "f32"}"#,
        r#"{"from": "conv:out", "to": "relu:in", "shape": [2, 2], "dtype": "f32"}"#,
    );
    assert!(matches!(parse_graph(&g), Err(GraphError::Shape(_))));
}

#[test]
fn unknown_kernel() {
    let g = r#"{"nodes":[{"name":"a","kernel":"FFT","params":[4]}]}"#;
    assert_eq!(parse_graph(g), Err(GraphError::Kernel("FFT".into())));
}

#[test]
fn unconnected_port() {
    let g = r#"{"nodes":[{"name":"a","kernel":"RELU_F32","params":[4]}]}"#;
    assert!(matches!(parse_graph(g), Err(GraphError::Port(_))));
}

#[test]
fn placement_round_robin() {
    let g = parse_graph(&chain(3)).unwrap();
    let p = place(&g, &GridConfig::default()).unwrap();
    let tiles: Vec<(u16, u16)> = p.iter().map(|t| (t.col, t.row)).collect();
    assert_eq!(tiles, vec![(0, 0), (1, 0), (2, 0)]);
    let g5 = parse_graph(&chain(5)).unwrap();
    assert_eq!(place(&g5, &GridConfig::default()).unwrap()[4].row, 1);
    let one = parse_graph(&chain(1)).unwrap();
    assert_eq!((place(&one, &GridConfig::default()).unwrap()[0].col, 0), (0, 0));
}

#[test]
fn twenty_nine_nodes_do_not_fit() {
    let g = parse_graph(&chain(29)).unwrap();
    assert!(place(&g, &GridConfig::default()).is_err());
    assert!(matches!(
        compile(&chain(29), &LowerOptions::default(), |_| None),
        Err(CompileError::Place(_))
    ));
    assert!(compile(&chain(28), &LowerOptions::default(), |_| None).is_ok());
}

#[test]
fn more_than_eight_params_is_lower_error() {
    let g = r#"{"nodes":[{"name":"a","kernel":"RELU_F32","params":[4,0,0,0,0,0,0,0,0]}],
      "edges":[{"from":"x","to":"a:in","shape":[4],"dtype":"f32"},{"from":"a:out","to":"y","shape":[4],"dtype":"f32"}],
      "inputs":[{"name":"x","shape":[4],"dtype":"f32"}],"outputs":[{"name":"y","shape":[4],"dtype":"f32"}]}"#;
    let ir = parse_graph(g).unwrap();
    let p = place(&ir, &GridConfig::default()).unwrap();
    assert!(matches!(lower(&ir, &p, &LowerOptions::default()), Err(LowerError::ParamOverflow { count: 9, .. })));
}

#[test]
fn missing_weight_payload() {
    assert!(matches!(
        compile(CNN_GRAPH, &LowerOptions::default(), |_| None),
        Err(CompileError::Pack(PackError::MissingWeight(1)))
    ));
}

#[test]
fn wrong_weight_size() {
    assert!(matches!(
        compile(CNN_GRAPH, &LowerOptions::default(), |_| Some(vec![0; 3])),
        Err(CompileError::Pack(PackError::WeightSize { id: 1, got: 3, want: 16 }))
    ));
}

#[test]
fn activation_only_graph_has_empty_image() {
    let m = compile(&chain(2), &LowerOptions::default(), |_| None).unwrap();
    let img = mount(&m.image[..], 0).unwrap();
    assert_eq!(img.entries().len(), 0);
}

#[test]
fn weights_laid_out_in_first_use_order() {
    // Two matmuls; the second node (in topological order) uses file 3 and
    // the first uses file 9, so 9 comes first.
    let g = r#"{"nodes":[
        {"name":"m1","kernel":"MATMUL_I8","params":[1,2,1],"weights":{"b":9}},
        {"name":"m2","kernel":"PASSTHROUGH","params":[4]},
        {"name":"m3","kernel":"MATMUL_I8","params":[1,4,1],"weights":{"b":3}}],
      "edges":[{"from":"x","to":"m1:a","shape":[1,2],"dtype":"i8"},
        {"from":"m1:c","to":"m2:in","shape":[1,1],"dtype":"i32"},
        {"from":"m2:out","to":"m3:a","shape":[1,4],"dtype":"i8"},
        {"from":"m3:c","to":"y","shape":[1,1],"dtype":"i32"}],
      "inputs":[{"name":"x","shape":[1,2],"dtype":"i8"}],"outputs":[{"name":"y","shape":[1,1],"dtype":"i32"}]}"#;
    let m = compile(g, &LowerOptions::default(), |id| Some(vec![1u8; if id == 9 { 2 } else { 4 }])).unwrap();
    let img = mount(&m.image[..], 0).unwrap();
    // header 16 + 2 entries * 12 = 40 -> first file at 64, next at 128.
    assert_eq!(img.lookup(9).unwrap(), (64, 2));
    assert_eq!(img.lookup(3).unwrap(), (128, 4));
}

#[test]
fn symbolic_ids_equal_manifest_keys() {
    let k = f32_bytes(&[1.0; 4]);
    for (text, w) in [(XGEMM_GRAPH.to_string(), None), (CNN_GRAPH.to_string(), Some(k)), (chain(4), None)] {
        let m = compile(&text, &LowerOptions::default(), |_| w.clone()).unwrap();
        let mut used = BTreeSet::new();
        for r in &m.rcbs {
            for o in &r.ops {
                for (a, _) in o.op.addr_refs() {
                    if let AddrRef::Symbolic { buffer_id, .. } = a {
                        used.insert(buffer_id);
                    }
                }
            }
        }
        let keys: BTreeSet<u32> = m.manifest.tensors.iter().map(|t| t.id).collect();
        assert_eq!(used, keys);
        assert!(m.manifest.tensors.iter().filter(|t| t.class != TensorClass::Weight).all(|t| t.id >= ACTIVATION_ID_BASE));
    }
}

#[test]
fn compile_is_deterministic_and_roundtrips_on_disk() {
    let k = f32_bytes(&[0.5, 0.25, -1.0, 2.0]);
    let a = compile(CNN_GRAPH, &LowerOptions::default(), |_| Some(k.clone())).unwrap();
    let b = compile(CNN_GRAPH, &LowerOptions::default(), |_| Some(k.clone())).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.write_to(d1.path()).unwrap();
    b.write_to(d2.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(d1.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, ["000.rcb", "001.rcb", "002.rcb", "manifest.json", "model.rimfs", "placement.json"]);
    for n in &names {
        assert_eq!(std::fs::read(d1.path().join(n)).unwrap(), std::fs::read(d2.path().join(n)).unwrap());
    }
    let back = CompiledModel::read_from(d1.path()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn packed_model_equals_in_process_model() {
    let k = f32_bytes(&[0.5, 0.25, -1.0, 2.0]);
    let m = compile(CNN_GRAPH, &LowerOptions::default(), |_| Some(k.clone())).unwrap();
    let d = tempfile::tempdir().unwrap();
    m.write_to(d.path()).unwrap();
    let loaded = CompiledModel::read_from(d.path()).unwrap();
    let x = f32_bytes(&(0..16).map(|i| i as f32 * 0.1 - 0.7).collect::<Vec<_>>());
    let a = Runtime::with_model(SimConfig::default(), &m).unwrap().run(&x).unwrap();
    let b = Runtime::with_model(SimConfig::default(), &loaded).unwrap().run(&x).unwrap();
    assert_eq!(a.output, b.output);
}

#[test]
fn topological_order_respects_declaration_ties() {
    // Declared out of order: consumer first.
    let g = r#"{"nodes":[{"name":"late","kernel":"RELU_F32","params":[4]},{"name":"early","kernel":"RELU_F32","params":[4]}],
      "edges":[{"from":"x","to":"early:in","shape":[4],"dtype":"f32"},{"from":"early:out","to":"late:in","shape":[4],"dtype":"f32"},
        {"from":"late:out","to":"y","shape":[4],"dtype":"f32"}],
      "inputs":[{"name":"x","shape":[4],"dtype":"f32"}],"outputs":[{"name":"y","shape":[4],"dtype":"f32"}]}"#;
    let ir = parse_graph(g).unwrap();
    let names: Vec<&str> = ir.nodes.iter().map(|n| n.name.as_str()).collect();
    assert_eq!(names, ["early", "late"]);
}
