use std::collections::BTreeMap;

use keylab_core::experiments::*;
use keylab_core::ids::AppId;
use keylab_core::keystore::Design;
use keylab_core::kmlink::KmRole;
use keylab_core::simcore::{Attempt, Outcome, RunCounters, RunTrace, SimTime};

fn attempt(residual: u64, outcome: Outcome) -> Attempt {
    Attempt {
        time: SimTime::ZERO,
        side: KmRole::Master,
        app: AppId(0),
        size_bits: 512,
        count: 1,
        residual,
        outcome,
    }
}

fn trace(design: Design, attempts: Vec<Attempt>) -> RunTrace {
    RunTrace {
        seed: 100,
        run: 1,
        design,
        default_key_size_bits: 512,
        app_count: 4,
        end_time: SimTime::ZERO,
        attempts,
        collisions: vec![],
        counters: RunCounters::default(),
        levels: vec![],
        deque_count: 0,
        distinct_sizes: 0,
        end_digests: [[0; 32]; 2],
        workload_hash: [0; 32],
        messages: vec![],
        timing: vec![],
    }
}

#[test]
fn attempts_fall_into_half_open_bins() {
    use Outcome::*;
    let residuals = [
        (0, Collision),
        (9, Collision),
        (9, Success),
        (10, Success),
        (99, Collision),
        (100, Success),
        (999, Success),
        (1000, Success),
        (123_456, Collision),
    ];
    let t = trace(Design::SingleCommon, residuals.iter().map(|&(r, o)| attempt(r, o)).collect());
    let s = bin_collisions(&t, &DEFAULT_BIN_EDGES);
    let got: Vec<(u64, u64, u64)> = s.bins.iter().map(|b| (b.low, b.tally.collisions, b.tally.successes)).collect();
    assert_eq!(got, vec![(0, 2, 1), (10, 1, 1), (100, 0, 2), (1000, 1, 1)]);
    assert_eq!(s.bin(1000).unwrap().high, None);
    assert_eq!(s.bin(1000).unwrap().tally.percentage(), 50.0);
    // Window [10, 100] is closed on both ends: 10, 99 and 100.
    let w = s.per_app_count[&4];
    assert_eq!((w.collisions, w.successes), (1, 2));
}

#[test]
fn designs_without_collisions_give_empty_bins() {
    let t = trace(Design::AppSharedDeque, vec![attempt(3, Outcome::Success)]);
    let s = bin_collisions(&t, &DEFAULT_BIN_EDGES);
    assert_eq!(s.total().total(), 0);
    assert!(s.per_app_count.is_empty());
}

fn record(fingerprint: u8, micros: &[f64]) -> RunRecord {
    let key = TimingKey {
        design: Design::EncDecHash,
        requested_size_bits: 1024,
        keys_per_query: 1,
        default_key_size_bits: 512,
    };
    let mut bench = TimingTable::new();
    bench.insert(key, micros.iter().copied().collect());
    RunRecord {
        fingerprint: [fingerprint; 32],
        design: Design::EncDecHash,
        cell: Cell {
            default_key_size_bytes: 64,
            app_count: None,
        },
        run: 1,
        app_count: 2,
        trace_hash: [0; 32],
        workload_hash: [0; 32],
        request_hash: None,
        mirrored: true,
        counters: RunCounters::default(),
        collisions: CollisionStats::new(&DEFAULT_BIN_EDGES),
        workload_timing: TimingTable::new(),
        bench_timing: bench,
        deque_count: 0,
        distinct_sizes: 0,
    }
}

#[test]
fn aggregation_pools_samples_across_runs() {
    let s = aggregate_runs(&[record(1, &[10.0]), record(1, &[20.0])]).unwrap();
    let (_, stats) = s.bench_timing.iter().next().unwrap();
    assert_eq!(stats.n(), 2);
    assert!((stats.mean() - 15.0).abs() < 1e-12);
    assert!((stats.stddev() - 50f64.sqrt()).abs() < 1e-12);

    let s = aggregate_runs(&[record(1, &[7.0, 9.0]), record(1, &[7.0, 9.0])]).unwrap();
    let (_, stats) = s.bench_timing.iter().next().unwrap();
    assert_eq!(stats.mean(), 8.0);

    let same = aggregate_runs(&[record(1, &[4.0]), record(1, &[4.0])]).unwrap();
    assert_eq!(same.bench_timing.values().next().unwrap().stddev(), 0.0);

    assert!(matches!(
        aggregate_runs(&[record(1, &[1.0]), record(2, &[1.0])]),
        Err(ExperimentError::Mixed)
    ));
    assert_eq!(aggregate_runs(&[]).unwrap().runs, 0);
}

#[test]
fn timing_csv_has_one_row_per_group() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    write_timing_table(&empty, &TimingTable::new()).unwrap();
    let text = std::fs::read_to_string(&empty).unwrap();
    assert_eq!(
        text,
        "design,requested_size_bits,keys_per_query,default_key_size_bits,mean_us,stddev_us,n\n"
    );

    let mut table = TimingTable::new();
    for size in [256, 512] {
        let key = TimingKey {
            design: Design::ByteQueue,
            requested_size_bits: size,
            keys_per_query: 2,
            default_key_size_bits: 512,
        };
        table.insert(key, [1.0, 2.0].into_iter().collect());
    }
    let two = dir.path().join("two.csv");
    write_timing_table(&two, &table).unwrap();
    let text = std::fs::read_to_string(&two).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "queue,256,2,512,1.500000,0.707107,2");
}

#[test]
fn unwritable_output_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("out");
    let summary = aggregate_runs(&[record(1, &[1.0])]).unwrap();
    let err = emit_csv(&summary, &target).unwrap_err();
    assert!(!err.is_config());
    assert!(err.to_string().contains(&*target.to_string_lossy()), "{err}");
}

fn small(preset: &str) -> ExperimentConfig {
    ExperimentConfig::preset(preset)
        .unwrap()
        .with_overrides(&["quantum.stop_s=30", "service.0.stop_s=30", "service.0.start_s=1"])
        .unwrap()
}

#[test]
fn reruns_reproduce_csv_bytes() {
    let cfg = ExperimentConfig::preset("table1").unwrap();
    let opts = RunOptions {
        full: false,
        runs: Some(3),
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut hashes = Vec::new();
    for d in &dirs {
        let records = run_experiment(&cfg, opts, |_| {}).unwrap();
        hashes.push(records.iter().map(|r| r.trace_hash).collect::<Vec<_>>());
        let written = emit_csv(&aggregate_runs(&records).unwrap(), d.path()).unwrap();
        assert_eq!(written.len(), 2);
    }
    assert_eq!(hashes[0], hashes[1]);
    for name in ["fig6a.csv", "fig6b.csv"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn deques_are_shared_between_applications() {
    let cfg = small("table3-deque").with_overrides(&["km.default_key_size_bytes=32"]).unwrap();
    let records = run_experiment(&cfg, RunOptions { full: false, runs: Some(4) }, |_| {}).unwrap();
    for r in &records {
        assert!(r.mirrored);
        assert!(r.deque_count <= r.distinct_sizes, "{} deques, {} sizes", r.deque_count, r.distinct_sizes);
        assert!(r.distinct_sizes <= r.app_count);
        assert_eq!(r.counters.collisions, 0);
    }
    let s = aggregate_runs(&records).unwrap();
    let d = s.deque_sharing.unwrap();
    assert_eq!(d.runs, 4);
    let dir = tempfile::tempdir().unwrap();
    let written = emit_csv(&s, dir.path()).unwrap();
    let names: Vec<String> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["fig9a.csv", "fig9b.csv", "workload_timing.csv", "deque_sharing.csv"]);
    let fig9b = std::fs::read_to_string(dir.path().join("fig9b.csv")).unwrap();
    assert!(fig9b.lines().skip(1).all(|l| l.starts_with("deque,") && l.contains(",1,256,")));
}

#[test]
fn bench_feeds_every_design_the_same_requests() {
    let cfg = ExperimentConfig::preset("table3-hash")
        .unwrap()
        .with_overrides(&["km.default_key_size_bytes=64", "bench.repeats=1"])
        .unwrap();
    let designs = [Design::EncDecHash, Design::ByteQueue, Design::AppSharedDeque];
    let report = bench_designs(&cfg, &designs, RunOptions { full: false, runs: Some(2) }, |_| {}).unwrap();
    assert!(report.identical_requests());
    assert_eq!(report.request_hashes[&Design::ByteQueue].len(), 2);
    let mut per_design: BTreeMap<Design, u64> = BTreeMap::new();
    for (k, s) in &report.timing {
        *per_design.entry(k.design).or_default() += s.n();
    }
    // 6 sizes x 6 counts, once per run.
    assert!(per_design.values().all(|&n| n == 72), "{per_design:?}");

    let dir = tempfile::tempdir().unwrap();
    emit_bench_csv(&report, dir.path()).unwrap();
    let wide = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let header = wide.lines().next().unwrap();
    assert!(header.contains("hash_mean_us") && header.contains("queue_mean_us") && header.contains("deque_mean_us"));
    assert_eq!(wide.lines().count(), 1 + 36);

    assert!(bench_designs(&cfg, &[Design::SingleCommon], RunOptions::default(), |_| {}).is_err());
    assert!(bench_designs(&cfg, &[], RunOptions::default(), |_| {}).is_err());
}

#[test]
fn sweep_requests_depend_only_on_seed_and_run() {
    let spec = BenchSpec {
        sizes_bits: vec![256, 1024],
        keys_per_query: vec![1, 3],
        repeats: 2,
    };
    let a = sweep_requests(&spec, 100, 1);
    assert_eq!(a, sweep_requests(&spec, 100, 1));
    assert_ne!(a, sweep_requests(&spec, 100, 2));
    assert_eq!(a.len(), 8);
    let ones = a.iter().filter(|r| r.size_bits == 256 && r.count == 3).count();
    assert_eq!(ones, 2);
}

#[test]
fn low_water_level_must_cover_the_largest_request() {
    let cfg = ExperimentConfig::preset("table3-queue").unwrap();
    let err = cfg.with_overrides(&["km.working_set_bytes=16384"]).unwrap_err();
    assert!(matches!(err, ExperimentError::Invalid { ref field, .. } if field == "km.working_set_bytes"), "{err}");
}
