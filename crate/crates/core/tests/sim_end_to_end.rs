mod common;

use std::collections::{BTreeMap, BTreeSet};

use fleetmaint::backend::{parse_jsonl, Event, EventRecord, Views};
use fleetmaint::sim::synth::{fleet, FleetSpec, SyntheticFailure};
use fleetmaint::sim::{check_integrity, load_scenario, run, Mode, RunOptions};
use fleetmaint::telemetry::SignaturePattern;
use proptest::prelude::*;

fn platform() -> RunOptions {
    RunOptions::default()
}

/// Stock never goes negative and jobs on one printer never overlap, at
/// every prefix of the log.
fn assert_resource_invariants(records: &[EventRecord]) {
    let mut views = Views::default();
    for r in records {
        views.apply(r);
        for depots in views.stock_levels.values() {
            assert!(depots.values().all(|&c| c >= 0), "negative stock at offset {}", r.offset);
        }
    }
    for (id, q) in &views.printer_queues {
        for w in q.jobs.windows(2) {
            assert!(w[1].start_ts >= w[0].finish_ts, "printer {id}: {:?} overlaps {:?}", w[0], w[1]);
        }
        assert!(q.jobs.iter().all(|j| j.finish_ts > j.start_ts));
    }
}

/// Every published report is diagnosed exactly once.
fn assert_episode_conservation(records: &[EventRecord]) {
    let mut published = BTreeSet::new();
    let mut diagnosed: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        match &r.event {
            Event::AnomalyPublished { report_id, .. } => assert!(published.insert(report_id.as_str()), "{report_id} published twice"),
            Event::AnomalyDiagnosed { report_id, .. } => *diagnosed.entry(report_id).or_default() += 1,
            _ => {}
        }
    }
    assert_eq!(published, diagnosed.keys().copied().collect());
    assert!(diagnosed.values().all(|&n| n == 1));
}

#[test]
fn busy_run_replays_to_identical_views() {
    let out = run(&fleet(&common::busy_spec(3)), &platform());
    assert!(out.records.len() >= 1000, "{} events", out.records.len());
    let parsed = parse_jsonl(&out.events_jsonl()).unwrap();
    assert_eq!(parsed, out.records);
    assert_eq!(Views::fold(&parsed).snapshot_bytes(), out.views.snapshot_bytes());
    check_integrity(&parsed).unwrap();
    assert_resource_invariants(&parsed);
    assert_episode_conservation(&parsed);
    assert!(out.report.orders > 0);
    assert!(parsed.iter().any(|r| matches!(r.event, Event::StockDecremented { .. })));
    assert!(parsed.iter().any(|r| matches!(r.event, Event::PrintJobQueued { .. })));
}

#[test]
fn same_seed_gives_byte_identical_logs() {
    let sc = fleet(&common::busy_spec(9));
    let a = run(&sc, &platform());
    let b = run(&sc, &platform());
    assert_eq!(a.events_jsonl(), b.events_jsonl());
    assert_eq!(a.raw_jsonl, b.raw_jsonl);
    let c = run(&sc, &RunOptions { seed: Some(10), ..platform() });
    assert_ne!(a.events_jsonl(), c.events_jsonl());
}

#[test]
fn vacuous_run_has_two_records_and_null_rates() {
    let mut sc = fleet(&FleetSpec { vehicles: 0, printers: 0, ..FleetSpec::default() });
    sc.part_sensor_map = Default::default();
    sc.initial_model.classifier = Default::default();
    sc.validate().unwrap();
    let out = run(&sc, &platform());
    let kinds: Vec<String> = out.records.iter().map(|r| r.event.kind()).collect();
    assert_eq!(kinds, ["run_started", "run_ended"]);
    let r = &out.report;
    assert_eq!((r.precision, r.recall, r.readiness_rate, r.delayed_service_rate), (None, None, None, None));
    let json = serde_json::to_value(r).unwrap();
    assert!(json["precision"].is_null());
}

#[test]
fn spike_scenario_loads_and_matches_golden_shape() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/spike.toml");
    let sc = load_scenario(std::path::Path::new(path)).unwrap();
    let out = run(&sc, &platform());
    assert_eq!((out.report.episodes, out.report.orders, out.report.ready_orders), (1, 1, 1));
    assert_eq!(out.report.detections[0].latency_ms, Some(0));
}

#[test]
fn baseline_mode_has_no_edge_traffic() {
    let sc = fleet(&common::busy_spec(4));
    let out = run(&sc, &RunOptions { mode: Mode::Baseline, seed: None });
    assert!(out.records.iter().all(|r| !matches!(r.event, Event::AnomalyPublished { .. } | Event::ModelDistributed { .. })));
    assert_eq!(out.report.episodes, 0);
    // one local unit per part covers the first failure of each of the 3 parts
    assert_eq!(out.report.delayed_arrivals, 24 - 3);
    assert_resource_invariants(&out.records);
}

fn small_spec() -> impl Strategy<Value = FleetSpec> {
    (any::<u64>(), 1usize..=4, 0i64..=2, 0i64..=1, 0usize..=2, prop::collection::vec((0usize..4, 0usize..3, 0i64..100), 0..4))
        .prop_map(|(seed, vehicles, local, remote, printers, fails)| FleetSpec {
            seed,
            vehicles,
            trip_ms: 2 * 3_600_000,
            stagger_ms: 15 * 60_000,
            local_stock: local,
            remote_stock: remote,
            printers,
            transit_ms: 30 * 60_000,
            failures: fails
                .into_iter()
                .filter(|(v, _, _)| *v < vehicles)
                .map(|(vehicle, channel, onset_min)| SyntheticFailure {
                    vehicle,
                    channel,
                    onset_after_departure_ms: onset_min * 60_000,
                    pattern: SignaturePattern::Spike { magnitude: 10.0, every_n: 3 },
                })
                .collect(),
            ..FleetSpec::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn run_invariants_hold(spec in small_spec()) {
        let out = run(&fleet(&spec), &platform());
        check_integrity(&out.records).unwrap();
        assert_resource_invariants(&out.records);
        assert_episode_conservation(&out.records);
        prop_assert_eq!(Views::fold(&out.records).snapshot_bytes(), out.views.snapshot_bytes());
        prop_assert_eq!(out.report.arrivals, spec.vehicles);
        let mut deadlines = BTreeMap::new();
        for r in &out.records {
            match &r.event {
                Event::OrderCreated { order_id, deadline, .. } => {
                    deadlines.insert(order_id.clone(), *deadline);
                }
                Event::OrderReady { order_id, ready_ts } => prop_assert!(*ready_ts <= deadlines[order_id]),
                _ => {}
            }
        }
    }
}
