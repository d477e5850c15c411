//! Acceptance criteria, each run at its stated scale and tolerance. Prints
//! one PASS/FAIL line per criterion and fails when any criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use keylab_core::experiments::{
    aggregate_runs, bench_designs, coefficient_of_variation, run_experiment, spearman, BenchReport,
    ExperimentConfig, ExperimentSummary, RunOptions, RunningStats, TimingTable,
};
use keylab_core::ids::AppId;
use keylab_core::keystore::{Design, SupplyError};
use keylab_core::kmlink::{KmEvent, KmPair, KmRole, KmSettings, PairError, SupplyRequest};
use keylab_core::simcore;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn runs(n: u64) -> RunOptions {
    RunOptions {
        full: false,
        runs: Some(n),
    }
}

fn experiment(preset: &str, n: u64) -> ExperimentSummary {
    let cfg = ExperimentConfig::preset(preset).unwrap();
    aggregate_runs(&run_experiment(&cfg, runs(n), |_| {}).unwrap()).unwrap()
}

/// Pooled mean over the groups matching `keep`.
fn pooled(table: &TimingTable, keep: impl Fn(Design, u32, u32, u32) -> bool) -> f64 {
    let mut s = RunningStats::default();
    for (k, v) in table {
        if keep(k.design, k.requested_size_bits, k.keys_per_query, k.default_key_size_bits) {
            s.merge(v);
        }
    }
    assert!(s.n() > 0, "no samples selected");
    s.mean()
}

fn defaults_bits(cfg: &ExperimentConfig) -> Vec<u32> {
    cfg.km.default_key_size_bytes.iter().map(|d| (d * 8) as u32).collect()
}

fn c1() -> Verdict {
    let s = experiment("table1", 10);
    let low = s.collisions.bin(0).unwrap().tally.percentage();
    let high = s.collisions.bin(1000).unwrap().tally.percentage();
    verdict(
        high < 1.0 && low > high,
        format!("[0,10) {low:.3}%, [1000,inf) {high:.3}%"),
    )
}

fn c2() -> Verdict {
    let s = experiment("table2", 100);
    let (counts, pcts): (Vec<f64>, Vec<f64>) = s
        .collisions
        .per_app_count
        .iter()
        .map(|(n, t)| (*n as f64, t.percentage()))
        .unzip();
    let rho = spearman(&counts, &pcts).unwrap_or(f64::NAN);
    let listing: Vec<String> = counts.iter().zip(&pcts).map(|(n, p)| format!("{n}: {p:.2}%")).collect();
    verdict(
        counts == [2.0, 4.0, 8.0, 20.0] && rho > 0.5,
        format!("rho {rho:.3}; {}", listing.join(", ")),
    )
}

fn c3(hash: &ExperimentSummary, defaults: &[u32]) -> Verdict {
    let t = &hash.bench_timing;
    let mut notes = Vec::new();
    let mut ok = true;
    for &d in defaults {
        let means: Vec<f64> = [1, 2, 4, 8]
            .iter()
            .map(|m| pooled(t, |_, size, _, def| def == d && size == d * m))
            .collect();
        ok &= means.windows(2).all(|w| w[0] <= w[1]);
        notes.push(format!(
            "default {d}: {}",
            means.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join("<=")
        ));
    }
    let at = |d: u32| pooled(t, |_, size, _, def| def == d && size == 1024);
    let (big, small) = (at(1024), at(256));
    ok &= big < small;
    notes.push(format!("1024-bit request: {big:.3} us at default 1024 vs {small:.3} us at default 256"));
    verdict(ok, notes.join("; "))
}

fn c4(queue: &ExperimentSummary, report: &BenchReport, defaults: &[u32], reference: u32) -> Verdict {
    let t = &queue.bench_timing;
    let sizes: Vec<u32> = {
        let mut s: Vec<u32> = t.keys().map(|k| k.requested_size_bits).collect();
        s.sort();
        s.dedup();
        s
    };
    let mut ok = true;
    let mut worst = 0.0f64;
    for &size in &sizes {
        let m: Vec<f64> = defaults
            .iter()
            .map(|&d| pooled(t, |_, s, _, def| def == d && s == size))
            .collect();
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                let rel = (m[i] - m[j]).abs() / m[i].min(m[j]);
                worst = worst.max(rel);
            }
        }
    }
    ok &= worst < 0.20;
    let growth: Vec<f64> = sizes
        .iter()
        .map(|&size| pooled(t, |_, s, _, def| def == reference && s == size))
        .collect();
    let grows = growth.windows(2).all(|w| w[0] < w[1]);
    ok &= grows;
    let (smallest, largest) = (sizes[0], *sizes.last().unwrap());
    let at = |d: Design, size: u32| pooled(&report.timing, |x, s, _, def| x == d && def == reference && s == size);
    let (qs, hs) = (at(Design::ByteQueue, smallest), at(Design::EncDecHash, smallest));
    let (ql, hl) = (at(Design::ByteQueue, largest), at(Design::EncDecHash, largest));
    ok &= qs < hs && ql > hl;
    verdict(
        ok,
        format!(
            "max pairwise gap across defaults {:.1}%; grows with size: {grows}; {smallest} bits queue {qs:.3} vs hash {hs:.3}; {largest} bits queue {ql:.3} vs hash {hl:.3}",
            worst * 100.0
        ),
    )
}

fn c5(deque: &ExperimentSummary, report: &BenchReport, defaults: &[u32], reference: u32) -> Verdict {
    const SIZES: [u32; 3] = [1024, 2048, 4096];
    let t = &deque.bench_timing;
    let mut ok = true;
    let mut notes = Vec::new();
    for &d in defaults {
        let means: Vec<f64> = SIZES
            .iter()
            .map(|&size| pooled(t, |_, s, k, def| def == d && s == size && k == 1))
            .collect();
        let cv = coefficient_of_variation(&means);
        ok &= cv < 0.25;
        notes.push(format!("cv {:.1}% at default {d}", cv * 100.0));
    }
    let kpqs: Vec<u32> = {
        let mut k: Vec<u32> = report.timing.keys().map(|k| k.keys_per_query).collect();
        k.sort();
        k.dedup();
        k
    };
    let mut beaten = 0;
    let mut cells = 0;
    for &size in &SIZES {
        for &k in &kpqs {
            let at = |x: Design| pooled(&report.timing, |d, s, q, def| d == x && s == size && q == k && def == reference);
            let deq = at(Design::AppSharedDeque);
            cells += 1;
            if deq < at(Design::EncDecHash) && deq < at(Design::ByteQueue) {
                beaten += 1;
            }
        }
    }
    ok &= beaten == cells;
    notes.push(format!("deque fastest in {beaten}/{cells} (size, keys per query) groups"));
    let by_k: Vec<f64> = kpqs
        .iter()
        .map(|&k| pooled(t, |_, s, q, def| def == reference && q == k && SIZES.contains(&s)))
        .collect();
    let rising = by_k.windows(2).all(|w| w[0] < w[1]);
    ok &= rising;
    notes.push(format!(
        "by keys per query: {}",
        by_k.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join("<")
    ));
    verdict(ok, notes.join("; "))
}

fn c6(deque: &ExperimentSummary) -> Verdict {
    let d = deque.deque_sharing.unwrap();
    let (apps, deques) = (d.apps.mean(), d.deques.mean());
    let mut pair = KmPair::new(KmSettings::new(Design::AppSharedDeque, 32), 100, 1).unwrap();
    for s in 0..16 {
        pair.ingest(&[s as u8; 1024], s).unwrap();
    }
    pair.maintain().unwrap();
    let req = |size_bits| SupplyRequest {
        app: AppId(1),
        size_bits,
        count: 1,
    };
    let first = pair.sync_supply(KmRole::Master, &req(256));
    pair.maintain().unwrap();
    let created = pair.master.deque_count();
    let served = pair.sync_supply(KmRole::Master, &req(256)).is_ok() && pair.sync_supply(KmRole::Master, &req(512)).is_ok();
    let compatible = matches!(first, Err(PairError::Supply(SupplyError::NoDeque { .. })))
        && created == 1
        && served
        && pair.master.deque_count() == 1
        && pair.digests_match();
    verdict(
        deques < apps && compatible,
        format!(
            "{apps:.2} applications, {deques:.2} deques, {:.2} distinct sizes on average; 512-bit request over the 256-bit deque without a new deque: {compatible}",
            d.distinct_sizes.mean()
        ),
    )
}

/// Supplies with refills; returns initiator keys and checks the peer copies.
fn supply_checked(pair: &mut KmPair, role: KmRole, req: &SupplyRequest, stream: &mut u64) -> Result<usize, String> {
    for _ in 0..8 {
        match pair.sync_supply(role, req) {
            Ok(keys) => {
                for k in &keys {
                    let peer = pair.side(role.peer()).take_deliverable(&k.uuid);
                    if peer.as_ref() != Some(k) {
                        return Err(format!("peer copy of {} differs", k.uuid));
                    }
                }
                return Ok(keys.iter().map(|k| k.material.len()).sum());
            }
            Err(PairError::Supply(SupplyError::Unavailable)) => {
                for _ in 0..16 {
                    let raw: Vec<u8> = (0..1024).map(|i| (i as u64 ^ *stream * 0x9e37) as u8).collect();
                    pair.ingest(&raw, *stream).map_err(|e| e.to_string())?;
                    *stream += 1;
                }
                pair.maintain().map_err(|e| e.to_string())?;
            }
            Err(PairError::Supply(SupplyError::NoDeque { .. })) => pair.maintain().map_err(|e| e.to_string())?,
            Err(e) => return Err(e.to_string()),
        }
    }
    Err("supply never succeeded".into())
}

fn c7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut notes = Vec::new();
    let mut ok = true;

    // (a) byte equality over 10 000 supplies, (b) conservation after each.
    let mut supplies = 0;
    let mut conserved = true;
    let mut equal = true;
    for design in Design::ALL {
        let default = if design == Design::SingleCommon { 64 } else { [32, 64, 128][rng.gen_range(0..3)] };
        let mut pair = KmPair::new(KmSettings::new(design, default), 100, rng.gen()).unwrap();
        let mut stream = 0;
        let mut handed = 0usize;
        for i in 0..2500 {
            let (size_bits, count) = if design == Design::SingleCommon {
                (512, 1)
            } else {
                ([8u32, 256, 512, 800, 1024, 2048][rng.gen_range(0..6)], rng.gen_range(1..=4))
            };
            let role = if rng.gen() { KmRole::Master } else { KmRole::Slave };
            let req = SupplyRequest {
                app: AppId(i % 5),
                size_bits,
                count,
            };
            match supply_checked(&mut pair, role, &req, &mut stream) {
                Ok(bytes) => handed += bytes,
                Err(e) => {
                    equal = false;
                    notes.push(format!("{design}: {e}"));
                    break;
                }
            }
            supplies += 1;
            let ingested = stream as usize * 1024;
            for r in [KmRole::Master, KmRole::Slave] {
                conserved &= pair.side(r).stored_bytes() + handed == ingested;
            }
            conserved &= pair.digests_match();
        }
    }
    ok &= equal && conserved && supplies == 10_000;
    notes.push(format!("(a) {supplies} supplies byte-identical: {equal}; (b) conservation and mirror: {conserved}"));

    // (c) simultaneous supplies on both sides never collide outside the single design.
    let mut collisions = 0;
    let mut collided_single = false;
    for design in Design::ALL {
        let mut pair = KmPair::new(KmSettings::new(design, 64), 100, 9).unwrap();
        let mut stream = 0;
        for _ in 0..300 {
            let size = if design == Design::SingleCommon { 512 } else { [256u32, 512, 1024][rng.gen_range(0..3)] };
            let req = |app| SupplyRequest { app: AppId(app), size_bits: size, count: 1 };
            // Warm both sides, then race them.
            for role in [KmRole::Master, KmRole::Slave] {
                if supply_checked(&mut pair, role, &req(0), &mut stream).is_err() {
                    collisions += 1;
                }
            }
            let _ = pair.master.supply(&req(1));
            let _ = pair.slave.supply(&req(2));
            let events = pair.deliver_all().unwrap();
            let n = events.iter().filter(|(_, e)| matches!(e, KmEvent::Collision { .. })).count();
            if design == Design::SingleCommon {
                collided_single |= n > 0;
            } else {
                collisions += n;
            }
            pair.maintain().unwrap();
        }
    }
    for preset in ["table3-hash", "table3-queue", "table3-deque"] {
        let cfg = ExperimentConfig::preset(preset).unwrap();
        for cell in cfg.cells() {
            for run in 1..=3 {
                let trace = simcore::run(&cfg.sim_config(cell, run).unwrap()).unwrap();
                collisions += trace.counters.collisions as usize;
            }
        }
    }
    ok &= collisions == 0;
    notes.push(format!(
        "(c) collisions outside the single design: {collisions} (single design collided in the same races: {collided_single})"
    ));

    // (d) determinism of whole runs.
    let mut deterministic = true;
    for preset in ["table1", "table3-hash", "table3-queue", "table3-deque"] {
        let cfg = ExperimentConfig::preset(preset).unwrap();
        let cell = cfg.cells()[0];
        for run in 1..=3 {
            let a = simcore::run(&cfg.sim_config(cell, run).unwrap()).unwrap();
            let b = simcore::run(&cfg.sim_config(cell, run).unwrap()).unwrap();
            deterministic &= a.trace_hash() == b.trace_hash();
        }
    }
    ok &= deterministic;
    notes.push(format!("(d) equal trace hashes for (seed 100, run k): {deterministic}"));
    verdict(ok, notes.join("; "))
}

async fn c8_async() -> Result<String, String> {
    use tokio::net::TcpListener;
    let lm = TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
    let ls = TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
    let (am, as_) = (lm.local_addr().unwrap(), ls.local_addr().unwrap());
    for (role, listener, peer) in [(KmRole::Master, lm, as_), (KmRole::Slave, ls, am)] {
        let cfg = keylab_service::ServiceConfig::new(role, Design::AppSharedDeque, 32).with_peer(peer.to_string());
        let node = keylab_service::Node::start(cfg).map_err(|e| e.to_string())?;
        tokio::spawn(keylab_service::serve(listener, node));
    }
    let base = |r: KmRole| match r {
        KmRole::Master => format!("http://{am}"),
        KmRole::Slave => format!("http://{as_}"),
    };
    let http = reqwest::Client::new();
    let get = |url: String| {
        let http = http.clone();
        async move {
            let resp = http.get(url).send().await.map_err(|e| e.to_string())?;
            let code = resp.status().as_u16();
            let text = resp.text().await.map_err(|e| e.to_string())?;
            Ok::<_, String>((code, serde_json::from_str::<Value>(&text).unwrap_or(Value::Null)))
        }
    };
    let mut stream = 0u64;
    let feed = |stream: u64| {
        let http = http.clone();
        let (m, s) = (base(KmRole::Master), base(KmRole::Slave));
        async move {
            let raw: Vec<u8> = (0..1024).map(|i| (i as u64 * 131 + stream * 7) as u8).collect();
            let body = json!({ "stream": stream, "key": B64.encode(&raw) });
            for b in [m, s] {
                let r = http
                    .post(format!("{b}/api/v1/qkd/keys"))
                    .json(&body)
                    .send()
                    .await
                    .map_err(|e| e.to_string())?;
                if !r.status().is_success() {
                    return Err(format!("ingest answered {}", r.status()));
                }
            }
            Ok::<_, String>(())
        }
    };
    let quiesce = || async {
        for _ in 0..1000 {
            let (_, m) = get(format!("{}/api/v1/admin/digest", base(KmRole::Master))).await?;
            let (_, s) = get(format!("{}/api/v1/admin/digest", base(KmRole::Slave))).await?;
            let quiet = |v: &Value| v["outgoing"] == 0 && v["pending"] == 0 && v["deferred"] == 0;
            if quiet(&m) && quiet(&s) {
                return Ok::<_, String>(m["digest"] == s["digest"]);
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        Err("link never went quiet".into())
    };
    for _ in 0..32 {
        feed(stream).await?;
        stream += 1;
    }
    let mut violations = 0;
    let mut checks = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut seen = HashSet::new();
    let mut keys_total = 0;
    for i in 0..1000 {
        let role = if i % 2 == 0 { KmRole::Master } else { KmRole::Slave };
        let size = [256u32, 512, 768, 1024][rng.gen_range(0..4)];
        let number = rng.gen_range(1..=3);
        let mut container = None;
        for _ in 0..6 {
            let (code, v) = get(format!(
                "{}/api/v1/keys/sae-{}/enc_keys?number={number}&size={size}",
                base(role),
                role.peer()
            ))
            .await?;
            match code {
                200 => {
                    container = Some(v);
                    break;
                }
                503 => {
                    for _ in 0..16 {
                        feed(stream).await?;
                        stream += 1;
                    }
                }
                _ => return Err(format!("request {i} answered {code}: {v}")),
            }
        }
        let Some(c) = container else {
            return Err(format!("request {i} never succeeded"));
        };
        for k in c["keys"].as_array().cloned().unwrap_or_default() {
            keys_total += 1;
            let id = k["key_ID"].as_str().unwrap_or_default().to_string();
            if !seen.insert(id.clone()) {
                violations += 1;
            }
            let url = format!("{}/api/v1/keys/sae-{}/dec_keys?key_ID={id}", base(role.peer()), role);
            let (code, got) = get(url.clone()).await?;
            if code != 200 || got["keys"][0] != k {
                violations += 1;
            }
            let (again, _) = get(url).await?;
            if again != 404 {
                violations += 1;
            }
        }
        if i % 100 == 99 {
            checks += 1;
            if !quiesce().await? {
                violations += 1;
            }
        }
    }
    if violations > 0 {
        return Err(format!("{violations} violations over {keys_total} keys"));
    }
    Ok(format!(
        "1000 requests, {keys_total} keys each fetched once on the peer with equal bytes; {checks} quiescent digest checks equal"
    ))
}

fn c8() -> Verdict {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    match rt.block_on(c8_async()) {
        Ok(detail) => verdict(true, detail),
        Err(detail) => verdict(false, detail),
    }
}

fn main() {
    let t3 = ExperimentConfig::preset("table3-hash").unwrap();
    let defaults = defaults_bits(&t3);
    let reference = defaults[0];
    let mut table3: BTreeMap<&str, ExperimentSummary> = BTreeMap::new();
    let mut report = None;

    let mut results: Vec<(u32, &str, Verdict, Duration)> = Vec::new();
    let mut check = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let took = start.elapsed();
        println!(
            "criterion {n} ({name}): {} [{:.1}s] {}",
            if v.pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            v.detail
        );
        results.push((n, name, v, took));
    };

    check(1, "collision threshold", &mut c1);
    check(2, "collisions vs application count", &mut c2);
    check(3, "hash monotonicity", &mut || {
        let s = experiment("table3-hash", 100);
        let v = c3(&s, &defaults);
        table3.insert("hash", s);
        v
    });
    let mut bench = || {
        bench_designs(
            &t3,
            &[Design::EncDecHash, Design::ByteQueue, Design::AppSharedDeque],
            runs(100),
            |_| {},
        )
        .unwrap()
    };
    check(4, "byte queue shape", &mut || {
        let s = experiment("table3-queue", 100);
        let r = report.get_or_insert_with(&mut bench);
        let v = c4(&s, r, &defaults, reference);
        table3.insert("queue", s);
        v
    });
    check(5, "deque constancy and dominance", &mut || {
        let s = experiment("table3-deque", 100);
        let r = report.get_or_insert_with(&mut bench);
        let v = c5(&s, r, &defaults, reference);
        table3.insert("deque", s);
        v
    });
    check(6, "deque sharing", &mut || c6(&table3["deque"]));
    check(7, "correctness suite", &mut c7);
    check(8, "service round trip", &mut c8);

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    let total: f64 = results.iter().map(|r| r.3.as_secs_f64()).sum();
    println!(
        "{} of {} criteria passed in {total:.1}s",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
