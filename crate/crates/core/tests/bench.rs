use rcbrt::bench::*;
use rcbrt::SimConfig;

/// Two-pass population statistics used as an oracle.
fn welford(xs: &[f64]) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0f64, 0f64, 0f64);
    for &x in xs {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    (mean, (m2 / n).sqrt())
}

#[test]
fn stats_of_one_two_three() {
    let s = compute_stats(&[1.0, 2.0, 3.0], 0).unwrap();
    let (mean, sd) = welford(&[1.0, 2.0, 3.0]);
    assert!((s.mean - 2.0).abs() < 1e-12);
    assert!((s.std_dev - 0.816_496_580_927_726).abs() < 1e-12);
    assert!((s.std_dev - sd).abs() < 1e-12 && (s.mean - mean).abs() < 1e-12);
    assert!((s.cv - 0.408_248_290_463_863).abs() < 1e-12);
    assert_eq!((s.min, s.p50, s.max), (1.0, 2.0, 3.0));
}

#[test]
fn stats_agree_with_welford_on_spread_samples() {
    let xs: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64 + 0.5).collect();
    let s = compute_stats(&xs, 50).unwrap();
    let (mean, sd) = welford(&xs[50..]);
    assert_eq!(s.count, 450);
    assert!((s.mean - mean).abs() < 1e-9);
    assert!((s.std_dev - sd).abs() < 1e-9);
}

#[test]
fn matmul_bench_has_zero_variance() {
    let b = run_kernel_bench(BenchKernel::Matmul { n: 16 }, 1000, 10, SimConfig::default()).unwrap();
    for s in [&b.input, &b.compute, &b.output] {
        assert_eq!(s.count, 990);
        assert_eq!(s.cv, 0.0);
        assert_eq!(s.min, s.max);
    }
    assert!(b.traces.windows(2).all(|w| w[0].to_text().lines().count() == w[1].to_text().lines().count()));
}

#[test]
fn stage_totals_match_telemetry() {
    let b = run_kernel_bench(BenchKernel::Passthrough { bytes: 4096 }, 150, 0, SimConfig::default()).unwrap();
    assert_eq!(b.telemetry.inferences, 150);
    assert_eq!(b.telemetry.input_ticks, b.totals.input);
    assert_eq!(b.telemetry.compute_ticks, b.totals.compute);
    assert_eq!(b.telemetry.output_ticks, b.totals.output);
}

#[test]
fn passthrough_is_transfer_dominated() {
    let b = run_kernel_bench(BenchKernel::Passthrough { bytes: 16 << 10 }, 100, 0, SimConfig::default()).unwrap();
    assert!(b.input.mean + b.output.mean > b.compute.mean);
    let m = run_kernel_bench(BenchKernel::Matmul { n: 64 }, 100, 0, SimConfig::default()).unwrap();
    assert!(m.compute.mean > m.input.mean);
}

#[test]
fn too_few_iterations_rejected() {
    assert!(run_kernel_bench(BenchKernel::Matmul { n: 4 }, 99, 0, SimConfig::default()).is_err());
}

#[test]
fn sweep_speedup_decreases_and_tracks_model() {
    let model = PathModel::default();
    let rows = run_transfer_sweep(&SWEEP_SIZES, SWEEP_VOLUME, &model).unwrap();
    assert_eq!(rows.len(), 4);
    for w in rows.windows(2) {
        assert!(w[1].speedup < w[0].speedup);
    }
    for r in &rows {
        assert_eq!(r.transfers * r.size, SWEEP_VOLUME);
        // Oracle: per-transfer cost straight from the model parameters.
        let xfer = (r.size as f64 / model.bandwidth as f64).ceil();
        let c = model.fixed_overhead as f64;
        let expect = (c + model.crossing_penalty as f64 + xfer) / (c + xfer);
        assert!((r.speedup - expect).abs() / expect < 0.01, "{r:?}");
        assert!((r.model_speedup - expect).abs() / expect < 0.01);
    }
}

#[test]
fn csv_has_metric_rows() {
    let b = run_kernel_bench(BenchKernel::Matmul { n: 8 }, 100, 0, SimConfig::default()).unwrap();
    let rows = run_transfer_sweep(&[1024], 1 << 20, &PathModel::default()).unwrap();
    let mut buf = Vec::new();
    write_csv(&mut buf, &[b], &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("metric,key,value"));
    assert!(text.lines().count() > 5);
}
