mod common;

use common::*;
use rcbrt::compiler::{compile, LowerOptions};
use rcbrt::hal::layout::*;
use rcbrt::hal::CacheModel;
use rcbrt::rcb::{AddrRef, BlockType, DmaDirection, Op, OpCode, Rcb};
use rcbrt::{execute, EventDispatcher, HalDriver, ResolvedRcb, Runtime, SimConfig, SimDevice};

fn stale() -> SimConfig {
    SimConfig {
        cache_model: CacheModel::StaleUntilFlush,
        ..SimConfig::default()
    }
}

fn block(ops: Vec<Op>) -> ResolvedRcb {
    ResolvedRcb::new(Rcb::with_ops(BlockType::Transfer, ops)).unwrap()
}

#[test]
fn host_write_flush_then_dma_delivers_data() {
    let mut dev = SimDevice::new(stale());
    let dst = dev.tile_base(1, 1) + LOCAL_MEM_OFFSET as u64;
    let data: Vec<u8> = (0..200u32).map(|i| (i * 7) as u8).collect();
    let rcb = block(vec![
        Op::WriteBlock { addr: AddrRef::Absolute(GLOBAL_BASE), data: data.clone() },
        Op::CacheFlush { addr: AddrRef::Absolute(GLOBAL_BASE), length: 200 },
        Op::DmaTrigger {
            direction: DmaDirection::ToDevice,
            src: AddrRef::Absolute(GLOBAL_BASE),
            dst: AddrRef::Absolute(dst),
            length: 200,
        },
    ]);
    execute(&rcb, 0, &mut dev, &mut EventDispatcher::new()).unwrap();
    assert_eq!(&dev.tile_local(5)[..200], &data[..]);
}

#[test]
fn host_write_without_flush_leaves_device_stale() {
    let mut dev = SimDevice::new(stale());
    let dst = dev.tile_base(0, 0) + LOCAL_MEM_OFFSET as u64;
    let rcb = block(vec![
        Op::WriteBlock { addr: AddrRef::Absolute(GLOBAL_BASE), data: vec![0xAB; 128] },
        Op::DmaTrigger {
            direction: DmaDirection::ToDevice,
            src: AddrRef::Absolute(GLOBAL_BASE),
            dst: AddrRef::Absolute(dst),
            length: 128,
        },
    ]);
    execute(&rcb, 0, &mut dev, &mut EventDispatcher::new()).unwrap();
    assert_eq!(&dev.tile_local(0)[..128], &[0u8; 128][..]);
}

#[test]
fn dma_then_invalidate_then_read_sees_device_data() {
    let mut dev = SimDevice::new(stale());
    let src = dev.tile_base(3, 6) + LOCAL_MEM_OFFSET as u64;
    dev.write_block(src, &[0x5A; 256]).unwrap();
    let out = GLOBAL_BASE + 0x1000;
    let dma = Op::DmaTrigger {
        direction: DmaDirection::FromDevice,
        src: AddrRef::Absolute(src),
        dst: AddrRef::Absolute(out),
        length: 256,
    };
    execute(&block(vec![dma]), 0, &mut dev, &mut EventDispatcher::new()).unwrap();
    let mut buf = vec![0u8; 256];
    dev.read_block(out, &mut buf).unwrap();
    assert_eq!(buf, vec![0; 256], "host view is stale before invalidation");

    let inv = Op::CacheInvalidate { addr: AddrRef::Absolute(out), length: 256 };
    execute(&block(vec![inv]), 1, &mut dev, &mut EventDispatcher::new()).unwrap();
    dev.read_block(out, &mut buf).unwrap();
    assert_eq!(buf, vec![0x5A; 256]);
}

#[test]
fn flush_covers_whole_lines_only_where_asked() {
    let mut dev = SimDevice::new(stale());
    dev.write_block(GLOBAL_BASE, &[1; 256]).unwrap();
    dev.flush_cache(GLOBAL_BASE + 64, 10).unwrap();
    let d = dev.dram();
    assert_eq!(&d[..64], &[0; 64][..]);
    assert_eq!(&d[64..128], &[1; 64][..]);
    assert_eq!(&d[128..256], &[0; 128][..]);
}

fn xgemm_input(seed: u64) -> (Vec<i8>, Vec<i8>, Vec<u8>) {
    let mut r = rng(seed);
    let (a, b) = (random_i8(&mut r, 4096), random_i8(&mut r, 4096));
    let mut input = i8_bytes(&a);
    input.extend(i8_bytes(&b));
    (a, b, input)
}

#[test]
fn model_without_cache_ops_is_wrong_on_stale_device() {
    let model = compile(XGEMM_GRAPH, &LowerOptions::default(), |_| None).unwrap();
    assert!(model.rcbs.iter().flat_map(|r| &r.ops).all(|o| o.opcode() != OpCode::CacheFlush));
    let mut rt = Runtime::with_model(stale(), &model).unwrap();
    let (a, b, input) = xgemm_input(11);
    let out = rt.run(&input).unwrap();
    assert_ne!(i32s(&out.output), matmul_oracle(&a, &b, 64, 64, 64));
}

#[test]
fn model_with_cache_ops_is_correct_on_stale_device() {
    let opts = LowerOptions {
        cache_ops: true,
        ..LowerOptions::default()
    };
    let model = compile(XGEMM_GRAPH, &opts, |_| None).unwrap();
    let mut rt = Runtime::with_model(stale(), &model).unwrap();
    for seed in 12..15 {
        let (a, b, input) = xgemm_input(seed);
        let out = rt.run(&input).unwrap();
        assert_eq!(i32s(&out.output), matmul_oracle(&a, &b, 64, 64, 64));
    }
}

#[test]
fn cache_ops_are_harmless_without_a_cache() {
    let opts = LowerOptions {
        cache_ops: true,
        ..LowerOptions::default()
    };
    let model = compile(XGEMM_GRAPH, &opts, |_| None).unwrap();
    let mut rt = Runtime::with_model(SimConfig::default(), &model).unwrap();
    let (a, b, input) = xgemm_input(16);
    assert_eq!(i32s(&rt.run(&input).unwrap().output), matmul_oracle(&a, &b, 64, 64, 64));
}
