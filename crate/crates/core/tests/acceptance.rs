//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{batch_lof, random_points, rel_err, rng, TOPIC_LAW};
use fleetmaint::backend::{parse_jsonl, Event, PlanSource, Views};
use fleetmaint::bus::{topic_matches, Broker, BusEvent, Envelope, FaultModel, Topic, TopicFilter};
use fleetmaint::edge::{lof_score, EdgeError, LofParams, LofWindow};
use fleetmaint::sim::synth::{fleet, FleetSpec, SyntheticFailure};
use fleetmaint::sim::{check_integrity, load_scenario, run, Mode, RunOptions};
use fleetmaint::telemetry::SignaturePattern;
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const H: i64 = 3_600_000;

fn lof_matches_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = r.random_range(5..=200usize);
        let dim = r.random_range(1..=8usize);
        let k = r.random_range(1..=20.min(n - 1));
        let window = random_points(&mut r, n, dim);
        let q = random_points(&mut r, 1, dim).remove(0);
        let params = LofParams { k, window_size: n, ..LofParams::default() };
        let want = batch_lof(&q, &window, k, params.reach_floor);
        let got = lof_score(&q, &window, &params).map_err(|e| e.to_string())?;
        let mut w = LofWindow::new(params);
        for p in &window {
            w.push(p.clone()).map_err(|e| e.to_string())?;
        }
        let streamed = w.score(&q).map_err(|e| e.to_string())?;
        let err = rel_err(got, want).max(rel_err(streamed, want));
        ensure!(err <= 1e-9, "case {case}: relative error {err:e}");
        worst = worst.max(err);
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:?}");
    Ok(format!("200 windows, max rel err {worst:.1e}, {took:.2?}"))
}

fn lof_degenerate_inputs() -> Outcome {
    let alphabet = [0.0, 0.0, 1.0, -1.0, 1e-12, 1e12, f64::NAN, f64::INFINITY];
    let mut r = rng(10_000);
    let (mut ok, mut typed) = (0, 0);
    for case in 0..10_000 {
        let dim = r.random_range(1..=3usize);
        let n = r.random_range(0..=24usize);
        let k = r.random_range(1..=6usize);
        let pick = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..dim)
                .map(|_| {
                    let upper = if r.random_bool(0.05) { 8 } else { 6 };
                    alphabet[r.random_range(0..upper)]
                })
                .collect()
        };
        let window: Vec<Vec<f64>> = (0..n).map(|_| pick(&mut r)).collect();
        let q = pick(&mut r);
        let bad = window.iter().flatten().chain(&q).any(|v| !v.is_finite());
        let params = LofParams { k, window_size: n.max(1), ..LofParams::default() };
        let res = catch_unwind(|| lof_score(&q, &window, &params)).map_err(|_| format!("case {case} panicked"))?;
        match res {
            Ok(s) => {
                ensure!(!bad && s.is_finite() && s >= 0.0, "case {case}: score {s} (non-finite input: {bad})");
                ok += 1;
            }
            Err(EdgeError::InvalidInput(_)) if bad => typed += 1,
            Err(e) => return Err(format!("case {case}: unexpected {e}")),
        }
    }
    let mut ones = 0;
    for case in 0..200 {
        let dim = r.random_range(1..=4usize);
        let k = r.random_range(1..=10usize);
        let p: Vec<f64> = (0..dim).map(|_| r.random_range(-1e6..1e6)).collect();
        // duplicate-point window, scored at the duplicated point
        let n = r.random_range(k + 1..=40);
        let params = LofParams { k, window_size: n, ..LofParams::default() };
        let dup = vec![p.clone(); n];
        let s = lof_score(&p, &dup, &params).map_err(|e| e.to_string())?;
        let mut w = LofWindow::new(params);
        for x in &dup {
            w.push(x.clone()).map_err(|e| e.to_string())?;
        }
        let streamed = w.score(&p).map_err(|e| e.to_string())?;
        ensure!(s == 1.0 && streamed == 1.0, "case {case}: duplicate window scored {s} / {streamed}");
        // warm-up: at most k points
        let m = r.random_range(0..=k);
        let warm = random_points(&mut r, m, dim);
        let s = lof_score(&p, &warm, &LofParams { k, window_size: warm.len().max(1), ..LofParams::default() }).map_err(|e| e.to_string())?;
        ensure!(s == 1.0, "case {case}: warm-up window of {} points scored {s}", warm.len());
        ones += 2;
    }
    Ok(format!("10000 random cases: {ok} finite scores, {typed} typed errors, no panics; {ones} duplicate/warm-up windows exactly 1.0"))
}

fn bus_semantics() -> Outcome {
    for &(f, t, want) in TOPIC_LAW {
        let ok = topic_matches(&f.parse::<TopicFilter>().unwrap(), &t.parse::<Topic>().unwrap());
        ensure!(ok == want, "{f} vs {t}");
    }
    let fault = FaultModel { latency_ms: 10, latency_jitter_ms: 50, drop_probability: 0.3, duplicate_probability: 0.2, max_retries: None, retry_backoff_ms: 100 };
    let mut b = Broker::new(fault, 1).map_err(|e| e.to_string())?;
    b.subscribe("a", "fleet/#").unwrap();
    b.subscribe("b", "fleet/+/anomaly").unwrap();
    for i in 0..1000 {
        b.publish(Envelope::new(format!("m{i:04}"), format!("fleet/v{}/anomaly", i % 4), i as i64 * 5, "t", vec![])).unwrap();
    }
    let mut calls: BTreeMap<(String, String), usize> = BTreeMap::new();
    while let Some(due) = b.next_due() {
        for d in b.deliver(due) {
            *calls.entry((d.client_id, d.envelope.message_id)).or_default() += 1;
        }
    }
    ensure!(calls.len() == 2000, "{} of 2000 (client, message) pairs delivered", calls.len());
    ensure!(calls.values().all(|&c| c == 1), "a handler saw a message twice");
    let mut last: BTreeMap<(String, String), String> = BTreeMap::new();
    for e in b.log() {
        if let BusEvent::Delivered { client, id, attempt: 1, .. } | BusEvent::Dropped { client, id, attempt: 1, .. } = e {
            let topic = id[1..].parse::<usize>().unwrap() % 4;
            let key = (client.clone(), topic.to_string());
            if let Some(prev) = last.get(&key) {
                ensure!(prev < id, "first attempt of {id} after {prev}");
            }
            last.insert(key, id.clone());
        }
    }
    let drops = b.log().iter().filter(|e| matches!(e, BusEvent::Dropped { .. })).count();
    let dups = b.log().iter().filter(|e| matches!(e, BusEvent::DuplicateSuppressed { .. })).count();
    let cases = TOPIC_LAW.len();
    Ok(format!("{cases}-case law table exact; 1000 msgs x 2 subs, {drops} drops, {dups} duplicates suppressed, exactly-once handling"))
}

fn lifecycle_spec() -> FleetSpec {
    let mut spec = FleetSpec { seed: 11, vehicles: 3, trip_ms: 24 * H, ..FleetSpec::default() };
    spec.edge.cooldown_ms = 0;
    spec.cloud.update_every = 50;
    spec.failures = (0..3)
        .map(|i| SyntheticFailure {
            vehicle: i,
            channel: i,
            onset_after_departure_ms: (1 + 6 * i as i64) * H,
            pattern: SignaturePattern::Spike { magnitude: 10.0, every_n: 16 },
        })
        .collect();
    spec
}

fn model_lifecycle() -> Outcome {
    let spec = lifecycle_spec();
    let mut sc = fleet(&spec);
    sc.initial_model.classifier = Default::default();
    let out = run(&sc, &RunOptions::default());
    let judges = out.records.iter().filter(|r| matches!(r.event, Event::JudgeRecorded(_))).count();
    ensure!(judges >= 150, "only {judges} judge records");
    let mut versions = vec![sc.initial_model.version];
    let mut accs: Vec<f64> = Vec::new();
    for r in &out.records {
        match &r.event {
            Event::ModelReleased { version, holdout_accuracy, predecessor_accuracy, .. } => {
                ensure!(*version > *versions.last().unwrap(), "version {version} not increasing");
                ensure!(holdout_accuracy > predecessor_accuracy, "v{version}: {holdout_accuracy} <= {predecessor_accuracy}");
                if let Some(prev) = accs.last() {
                    ensure!(holdout_accuracy >= prev, "v{version}: accuracy fell {prev} -> {holdout_accuracy}");
                }
                versions.push(*version);
                accs.push(*holdout_accuracy);
            }
            Event::ModelDistributed { version, receipt } => {
                let live = sc.vehicles.iter().filter(|v| v.route.arrival_ts >= r.ts).count();
                let applied = out
                    .records
                    .iter()
                    .filter(|x| x.ts == r.ts && matches!(&x.event, Event::ModelApplied { version: v, .. } if v == version))
                    .count();
                ensure!(*receipt == live && applied == live, "v{version}: receipt {receipt}, applied {applied}, live gateways {live}");
            }
            _ => {}
        }
    }
    ensure!(versions.len() >= 2, "no model released");
    Ok(format!("{judges} judge records, versions {versions:?}, holdout accuracies {accs:?}, every gateway applied at distribution"))
}

fn replay_equivalence() -> Outcome {
    let out = run(&fleet(&common::busy_spec(3)), &RunOptions::default());
    ensure!(out.records.len() >= 1000, "only {} events", out.records.len());
    let parsed = parse_jsonl(&out.events_jsonl()).map_err(|e| e.to_string())?;
    check_integrity(&parsed).map_err(|e| e.to_string())?;
    let mut views = Views::default();
    for r in &parsed {
        views.apply(r);
        ensure!(views.stock_levels.values().flat_map(|d| d.values()).all(|&c| c >= 0), "negative stock at offset {}", r.offset);
    }
    ensure!(views.snapshot_bytes() == out.views.snapshot_bytes(), "replayed views differ from live views");
    for (id, q) in &views.printer_queues {
        ensure!(q.jobs.windows(2).all(|w| w[1].start_ts >= w[0].finish_ts), "printer {id} has overlapping jobs");
    }
    Ok(format!("{} events replayed, {} view bytes identical", parsed.len(), views.snapshot_bytes().len()))
}

fn spike_end_to_end() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/spike.toml");
    let sc = load_scenario(std::path::Path::new(path)).map_err(|e| e.to_string())?;
    let a = run(&sc, &RunOptions::default());
    let b = run(&sc, &RunOptions::default());
    ensure!(a.events_jsonl() == b.events_jsonl(), "reruns differ");
    let rep = &a.report;
    ensure!(rep.episodes == 1 && rep.orders == 1 && rep.ready_orders == 1, "episodes {} orders {} ready {}", rep.episodes, rep.orders, rep.ready_orders);
    let order = a.views.orders.values().next().ok_or("no order view")?;
    ensure!(matches!(order.plan.as_ref().map(|p| &p.source), Some(PlanSource::Print { .. })), "plan is not a print job: {:?}", order.plan);

    let first = |pred: &dyn Fn(&Event) -> bool| a.records.iter().find(|r| pred(&r.event)).map(|r| r.offset);
    let chain = [
        first(&|e| matches!(e, Event::AnomalyPublished { .. })),
        first(&|e| matches!(e, Event::AnomalyDiagnosed { .. })),
        first(&|e| matches!(e, Event::ImpactAssessed { .. })),
        first(&|e| matches!(e, Event::OrderCreated { .. })),
        first(&|e| matches!(e, Event::OrderPlanned { .. })),
        first(&|e| matches!(e, Event::OrderReady { .. })),
    ];
    let ready_ts = a.records.iter().find_map(|r| match &r.event {
        Event::OrderReady { ready_ts, .. } => Some(*ready_ts),
        _ => None,
    });
    let arrival = sc.vehicles[0].route.arrival_ts;
    ensure!(ready_ts.is_some_and(|t| t <= arrival), "ready at {ready_ts:?}, arrival {arrival}");
    ensure!(chain.iter().all(Option::is_some), "missing step in {chain:?}");
    ensure!(chain.windows(2).all(|w| w[0] < w[1]), "steps out of order: {chain:?}");

    // Oracle: with a spike on every sample from onset, detection lands on
    // the first sample at or after onset.
    let sig = &sc.signatures[0];
    let v = &sc.vehicles[0];
    let elapsed = sig.onset_ts - v.route.departure_ts;
    let first_sample = v.route.departure_ts + (elapsed + v.sample_period - 1) / v.sample_period * v.sample_period;
    let want = first_sample - sig.onset_ts;
    let got = rep.detections[0].latency_ms;
    ensure!(got == Some(want), "latency {got:?}, oracle {want}");
    Ok(format!("1 episode -> 1 print order -> ready; {} events; latency {want} ms; reruns identical", a.records.len()))
}

fn baseline_spec(printers: usize) -> FleetSpec {
    FleetSpec {
        seed: 42,
        vehicles: 1000,
        trip_ms: 2 * H,
        stagger_ms: 60_000,
        printers,
        failures: [100, 500, 900]
            .iter()
            .enumerate()
            .map(|(i, &v)| SyntheticFailure {
                vehicle: v,
                channel: i % 3,
                onset_after_departure_ms: H / 2,
                pattern: SignaturePattern::Spike { magnitude: 10.0, every_n: 5 },
            })
            .collect(),
        ..FleetSpec::default()
    }
}

fn baseline_comparison() -> Outcome {
    let start = Instant::now();
    let rate = |printers: usize, mode: Mode| {
        run(&fleet(&baseline_spec(printers)), &RunOptions { mode, seed: None }).report.delayed_service_rate.unwrap_or(f64::NAN)
    };
    let (p, b) = (rate(3, Mode::Platform), rate(3, Mode::Baseline));
    ensure!(p < b, "platform {p} not below baseline {b}");
    let (p0, b0) = (rate(0, Mode::Platform), rate(0, Mode::Baseline));
    ensure!(p0 == b0, "with no capacity platform {p0} != baseline {b0}");
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!("1000 trips: delayed platform {p} < baseline {b}; zero capacity {p0} == {b0}; {took:.1?}"))
}

fn detection_spec() -> FleetSpec {
    FleetSpec {
        seed: 42,
        vehicles: 50,
        lof: LofParams { k: 20, window_size: 64, ..LofParams::default() },
        failures: (0..10)
            .map(|i| SyntheticFailure {
                vehicle: i * 5,
                channel: i % 3,
                onset_after_departure_ms: 2 * H,
                pattern: SignaturePattern::Spike { magnitude: 10.0, every_n: 5 },
            })
            .collect(),
        ..FleetSpec::default()
    }
}

/// (episodes, matched episodes) of the detection run, frozen from the
/// first run of this configuration.
const DETECTION_GOLDEN: (usize, usize) = (58, 50);

fn detection_quality() -> Outcome {
    let rep = run(&fleet(&detection_spec()), &RunOptions::default()).report;
    let (precision, recall) = (rep.precision.unwrap_or(0.0), rep.recall.unwrap_or(0.0));
    ensure!(recall == 1.0, "recall {recall}");
    ensure!(precision >= 0.8, "precision {precision} ({} of {})", rep.matched_episodes, rep.episodes);
    ensure!((rep.episodes, rep.matched_episodes) == DETECTION_GOLDEN, "golden drift: {:?}", (rep.episodes, rep.matched_episodes));
    Ok(format!("50 vehicles, 10 failures: recall {recall}, precision {precision:.3} ({} of {})", rep.matched_episodes, rep.episodes))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("lof_matches_batch_oracle", lof_matches_oracle),
        ("lof_degenerate_inputs", lof_degenerate_inputs),
        ("bus_delivery_semantics", bus_semantics),
        ("model_lifecycle", model_lifecycle),
        ("replay_equivalence", replay_equivalence),
        ("spike_end_to_end", spike_end_to_end),
        ("baseline_comparison", baseline_comparison),
        ("detection_quality", detection_quality),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let res = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match res {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
