use red_core::autodiff::{load_checkpoint, save_checkpoint};
use red_core::detector::{self, predict_recording};
use red_core::evalkit::{default_iou_grid, evaluate_recording};
use red_core::postproc::EventKind;
use red_core::redmodel::{ModelConfig, Network, Variant};
use red_core::sigio::{prepare_recordings, Recording};
use red_core::synthgen::{generate, recording_seed, SynthConfig};
use red_core::trainer::{self, TrainConfig};

fn corpus(n: usize) -> Vec<Recording> {
    (0..n)
        .map(|i| {
            let cfg = SynthConfig { duration_sec: 120.0, seed: recording_seed(11, i), ..SynthConfig::default() };
            generate(&cfg).unwrap()
        })
        .collect()
}

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        segment_len: 400,
        n_filters: 4,
        n_scales: 8,
        lstm_units: 8,
        hidden: 8,
        ..ModelConfig::for_variant(variant)
    }
}

#[test]
fn train_save_reload_and_detect() {
    let (recs, scale) = prepare_recordings(&corpus(3), None).unwrap();
    assert!(scale > 0.0);
    for variant in [Variant::Time, Variant::Cwt] {
        let net = Network::<f64>::build(tiny(variant), 2).unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            val_check_every: 3,
            max_iterations: Some(6),
            ..TrainConfig::default()
        };
        let out = trainer::train(net, &recs[..2], &recs[2..], "spindle", &tc, |_| {}).unwrap();
        assert_eq!(out.iterations, 6);
        assert!(out.best_val_loss.is_finite());

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        save_checkpoint(&stem, &out.network.store, 6, serde_json::Value::Null).unwrap();
        let (store, manifest) = load_checkpoint::<f64>(&stem).unwrap();
        assert_eq!(manifest.optimizer_step, 6);
        let net = Network::from_store(tiny(variant), &store).unwrap();

        let rec = &recs[2];
        let a = predict_recording(&out.network, rec.signal.samples()).unwrap();
        let b = predict_recording(&net, rec.signal.samples()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), rec.signal.len() / 8);
        assert!(a.iter().all(|p| (0.0..=1.0).contains(p)));

        let (events, probs) = detector::detect(&net, &rec.signal, 0.5, EventKind::Spindle).unwrap();
        assert_eq!(probs.len(), rec.signal.len());
        let end = rec.signal.duration();
        assert!(events.iter().all(|e| e.start >= 0.0 && e.end <= end + 1e-9));
        let report = evaluate_recording("r", rec.events("spindle").unwrap(), &events, &default_iou_grid());
        assert!(report.af1 >= 0.0 && report.af1 <= 1.0);
    }
}

#[test]
fn recordings_shorter_than_a_segment_are_rejected() {
    let net = Network::<f64>::build(tiny(Variant::Time), 0).unwrap();
    assert!(predict_recording(&net, &[0.0; 300]).is_err());
}
