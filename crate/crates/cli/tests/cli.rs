use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcbrt::compiler::CompiledModel;
use rcbrt::hal::layout::{REG_KERNEL_ID, TILE_REGION_BASE};
use rcbrt::rcb::{AddrRef, BlockType, Op, Rcb};
use rcbrt::{build_image, Manifest};
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn rcbrt(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcbrt"))
        .args(args.iter().map(|a| a.as_ref()))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn matmul(a: &[i8], b: &[i8], n: usize) -> Vec<i32> {
    let mut c = vec![0i32; n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                c[i * n + j] += a[i * n + k] as i32 * b[k * n + j] as i32;
            }
        }
    }
    c
}

fn compiled_xgemm(tmp: &TempDir) -> PathBuf {
    let out = tmp.path().join("xgemm");
    let o = rcbrt(&[&"compile", &fixture("xgemm64.json"), &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn xgemm_input(seed: u64) -> (Vec<i8>, Vec<i8>, Vec<u8>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<i8> = (0..4096).map(|_| r.gen()).collect();
    let b: Vec<i8> = (0..4096).map(|_| r.gen()).collect();
    let bytes = a.iter().chain(&b).map(|&v| v as u8).collect();
    (a, b, bytes)
}

#[test]
fn compile_writes_model_directory() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("m");
    let o = rcbrt(&[&"compile", &fixture("xgemm64.json"), &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rcbs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "rcb"))
        .collect();
    assert_eq!(rcbs.len(), 1);
    assert!(out.join("model.rimfs").is_file());
    assert!(out.join("manifest.json").is_file());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("1 control blocks"));
}

#[test]
fn cyclic_graph_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let o = rcbrt(&[&"compile", &fixture("cyclic.json"), &tmp.path().join("m")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cycle"));
    assert!(o.stdout.is_empty());
}

#[test]
fn missing_weight_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let o = rcbrt(&[&"compile", &fixture("cnn4x4.json"), &tmp.path().join("m"), &"--weights-dir", &tmp.path()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("weight file 1"));
}

#[test]
fn infer_matches_oracle_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let model = compiled_xgemm(&tmp);
    let (a, b, input) = xgemm_input(5);
    let inp = tmp.path().join("in.bin");
    fs::write(&inp, &input).unwrap();
    let (o1, o2) = (tmp.path().join("o1.bin"), tmp.path().join("o2.bin"));
    for o in [&o1, &o2] {
        let r = rcbrt(&[&"infer", &model, &inp, o]);
        assert!(r.status.success(), "{}", stderr(&r));
    }
    let out = fs::read(&o1).unwrap();
    assert_eq!(out.len(), 16384);
    let c: Vec<i32> = out.chunks(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(c, matmul(&a, &b, 64));
    assert_eq!(out, fs::read(&o2).unwrap());
}

#[test]
fn wrong_input_size_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let model = compiled_xgemm(&tmp);
    let inp = tmp.path().join("in.bin");
    fs::write(&inp, [0u8; 100]).unwrap();
    let o = rcbrt(&[&"infer", &model, &inp, &tmp.path().join("out.bin")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("8192"));
}

#[test]
fn missing_model_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let inp = tmp.path().join("in.bin");
    fs::write(&inp, [0u8; 4]).unwrap();
    let o = rcbrt(&[&"infer", &tmp.path().join("nothing"), &inp, &tmp.path().join("out.bin")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn busy_port_is_an_environment_error() {
    let held = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port().to_string();
    let o = rcbrt(&[&"serve", &"--port", &port]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(&port));
}

#[test]
fn bad_config_key_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("rt.conf");
    fs::write(&cfg, "colz = 3\n").unwrap();
    let o = rcbrt(&[&"--config", &cfg, &"bench", &"--sweep"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colz"));
}

#[test]
fn bench_sweep_prints_four_decreasing_rows() {
    let o = rcbrt(&[&"bench", &"--sweep"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let speedups: Vec<f64> = text
        .lines()
        .map(str::trim_start)
        .filter(|l| l.starts_with(|c: char| c.is_ascii_digit()))
        .map(|l| l.split_whitespace().nth(4).unwrap().trim_end_matches('x').parse().unwrap())
        .collect();
    assert_eq!(speedups.len(), 4, "{text}");
    assert!(speedups.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn bench_kernel_writes_csv() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("b.csv");
    let o = rcbrt(&[&"bench", &"--kernel", &"matmul:8", &"--iterations", &"100", &"--csv", &csv]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("metric,key,value"));
    let o = rcbrt(&[&"bench", &"--kernel", &"fft:8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn trace_prints_one_line_per_op() {
    let tmp = TempDir::new().unwrap();
    let reg = AddrRef::Absolute(TILE_REGION_BASE + REG_KERNEL_ID as u64);
    let model = CompiledModel {
        rcbs: vec![Rcb::with_ops(
            BlockType::Config,
            vec![
                Op::RegWrite { addr: reg, value: 1 },
                Op::RegRead { addr: reg, capture_slot: 0 },
                Op::RegWrite { addr: reg, value: 0 },
            ],
        )],
        image: build_image(&[]).unwrap(),
        manifest: Manifest::default(),
        placement: vec![],
    };
    let dir = tmp.path().join("m");
    model.write_to(&dir).unwrap();
    let inp = tmp.path().join("empty.bin");
    fs::write(&inp, []).unwrap();
    let o = rcbrt(&[&"trace", &dir, &inp]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("0:0 REG_WRITE 0x10000008 OK"));
    assert!(lines[1].starts_with("0:1 REG_READ"));
}
