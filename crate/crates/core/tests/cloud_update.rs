mod common;

use std::collections::BTreeMap;

use common::{oracle_accuracy, perceptron_oracle, rng};
use fleetmaint::cloud::{evaluate_update, evaluate_update_with_floor, train_averaged_perceptron, JudgeRecord, RawStore};
use fleetmaint::edge::{AnomalyReport, LinearClassifier, LofParams, ModelSnapshot, TimeWindow};
use fleetmaint::telemetry::{SensorScaling, TelemetryFrame};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const SENSORS: [&str; 2] = ["s0", "s1"];

fn identity_snapshot(classifier: LinearClassifier) -> ModelSnapshot {
    ModelSnapshot {
        version: 3,
        scaling: SENSORS.iter().map(|s| (s.to_string(), SensorScaling { mean: 0.0, stddev: 1.0 })).collect(),
        classifier,
        lof: LofParams::default(),
        alert_threshold: 2.0,
        confidence_margin: 0.5,
    }
}

/// Three well-separated clusters; returns (features, label) in record order.
fn clustered(seed: u64, n: usize) -> Vec<(Vec<f64>, String)> {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    (0..n)
        .map(|_| {
            let (c, label) = match r.random_range(0..3) {
                0 => ([0.0, 0.0], "normal"),
                1 => ([4.0, 0.0], "leak"),
                _ => ([0.0, 4.0], "overheat"),
            };
            (vec![c[0] + noise.sample(&mut r), c[1] + noise.sample(&mut r)], label.to_string())
        })
        .collect()
}

fn history(data: &[(Vec<f64>, String)]) -> (Vec<JudgeRecord>, RawStore) {
    let mut raw = RawStore::default();
    let mut judges = Vec::new();
    for (i, (x, label)) in data.iter().enumerate() {
        let id = format!("rpt-{i:03}");
        let readings: BTreeMap<String, f64> = SENSORS.iter().map(|s| s.to_string()).zip(x.iter().copied()).collect();
        let frame = TelemetryFrame { vehicle_id: "v".into(), timestamp: i as i64, readings };
        raw.push_report(&AnomalyReport {
            report_id: id.clone(),
            vehicle_id: "v".into(),
            episode_id: i as u64,
            window: TimeWindow { first_ts: i as i64, last_ts: i as i64 },
            score: 3.0,
            label: None,
            confidence: None,
            feature_deviations: BTreeMap::new(),
            model_version: 3,
            raw_frames: vec![frame],
        });
        judges.push(JudgeRecord { report_id: id, predicted_label: None, true_label: Some(label.clone()), refined_score: 3.0, ts: i as i64 });
    }
    (judges, raw)
}

#[test]
fn training_matches_delayed_update_oracle() {
    for seed in 0..20 {
        let data = clustered(seed, 30 + seed as usize * 7);
        let epochs = 1 + seed as usize % 6;
        let got = train_averaged_perceptron(&data, epochs);
        let want = perceptron_oracle(&data, epochs);
        assert_eq!(got.labels.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
        for (label, (w, b)) in &want {
            let g = &got.labels[label];
            for (a, e) in g.weights.iter().zip(w) {
                assert!((a - e).abs() <= 1e-9 * (1.0 + e.abs()), "seed {seed} {label}: {a} vs {e}");
            }
            assert!((g.bias - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn separable_history_releases_next_version() {
    let data = clustered(77, 50);
    let (judges, raw) = history(&data);
    let current = identity_snapshot(LinearClassifier::default());
    let eval = evaluate_update(&judges, &raw, &current, 10).unwrap().unwrap();
    assert_eq!((eval.train_size, eval.holdout_size), (40, 10));

    let oracle = perceptron_oracle(&data[..40], 10);
    let want = oracle_accuracy(&oracle, 0.5, &data[40..]);
    assert_eq!(eval.candidate_accuracy, want);
    assert!(want >= 0.7, "{want}");
    assert_eq!(eval.incumbent_accuracy, 0.0);
    let released = eval.released.expect("candidate beats an empty incumbent");
    assert_eq!(released.version, 4);
    assert!(released.classifier.labels.len() == 3);
}

#[test]
fn equal_accuracy_keeps_incumbent() {
    let data = clustered(78, 50);
    let (judges, raw) = history(&data);
    let trained = train_averaged_perceptron(&data[..40], 10);
    let current = identity_snapshot(trained);
    let eval = evaluate_update(&judges, &raw, &current, 10).unwrap().unwrap();
    assert_eq!(eval.candidate_accuracy, eval.incumbent_accuracy);
    assert!(eval.released.is_none());
}

#[test]
fn floor_withholds_candidate_below_previous_release() {
    let data = clustered(79, 50);
    let (judges, raw) = history(&data);
    let current = identity_snapshot(LinearClassifier::default());
    let eval = evaluate_update_with_floor(&judges, &raw, &current, 10, 1.01).unwrap().unwrap();
    assert!(eval.candidate_accuracy > eval.incumbent_accuracy);
    assert!(eval.released.is_none());
}

#[test]
fn too_little_history_is_a_no_op() {
    let (judges, raw) = history(&clustered(1, 1));
    let current = identity_snapshot(LinearClassifier::default());
    assert!(evaluate_update(&judges, &raw, &current, 10).unwrap().is_none());
}
