use snn_angvel::datagen::{build_dataset, DatagenConfig};
use snn_angvel::dataset::{Dataset, Split};
use snn_angvel::network::{build_network, load_checkpoint, save_checkpoint};
use snn_angvel::training::{evaluate_split, train_loop, LossConfig, TrainConfig};
use snn_angvel::{Network32, Network64, NetworkConfig};

fn small_data(root: &std::path::Path) -> Dataset {
    let cfg = DatagenConfig {
        sequences: 6,
        split: [4.0, 1.0, 1.0],
        width: 16,
        height: 12,
        duration_ms: 30.0,
        panorama_width: 256,
        ..DatagenConfig::default()
    };
    build_dataset(&cfg, 3, root).unwrap();
    Dataset::open(root).unwrap()
}

fn small_net() -> NetworkConfig {
    NetworkConfig {
        settling_ms: 10.0,
        ..NetworkConfig::default().with_input(16, 12)
    }
}

#[test]
fn generate_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    assert_eq!(data.split(Split::Train).len(), 4);

    let loss_cfg = LossConfig { t0_ms: 10.0, dt_ms: 1.0 };
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 2,
        iterations: 3,
        checkpoint_every: 0,
        calibration_batch: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut net: Network32 = build_network(&small_net(), 4).unwrap();
    let out = dir.path().join("run");
    let report = train_loop(&mut net, &data, &cfg, &loss_cfg, Some(&out)).unwrap();
    assert_eq!(report.log.len(), 3);
    assert!(report.log.iter().all(|e| e.loss.is_finite() && e.loss >= 0.0));
    assert_eq!(report.initial_rates.len(), 5);

    let mut again: Network32 = build_network(&small_net(), 4).unwrap();
    let replay = train_loop(&mut again, &data, &cfg, &loss_cfg, None).unwrap();
    assert_eq!(net.flat_parameters(), again.flat_parameters());
    let losses = |r: &snn_angvel::training::TrainReport| r.log.iter().map(|e| e.loss).collect::<Vec<_>>();
    assert_eq!(losses(&report), losses(&replay));

    let (val_loss, median) = evaluate_split(&net, &data, Split::Val, 0, &loss_cfg).unwrap();
    assert!(val_loss.is_finite());
    assert!(median.is_some_and(|m| m >= 0.0));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"));
    let entry = data.split(Split::Test)[0];
    let (x, _) = data.load(entry, 1.0).unwrap();

    let net: Network64 = build_network(&small_net(), 8).unwrap();
    let path = dir.path().join("net.snn");
    save_checkpoint(&net, &path).unwrap();
    let loaded: Network64 = load_checkpoint(&path).unwrap();
    assert_eq!(net.predict(&x).unwrap(), loaded.predict(&x).unwrap());
}

#[test]
fn single_and_double_precision_agree_on_the_first_layer() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (x, _) = data.load(data.split(Split::Train)[0], 1.0).unwrap();
    let wide: Network64 = build_network(&small_net(), 2).unwrap();
    let narrow: Network32 = wide.cast();
    let (_, a) = wide.forward(&x).unwrap();
    let (_, b) = narrow.forward(&x).unwrap();
    // the first layer sees identical input spikes, so potentials agree to f32 rounding
    for (u, v) in a.potentials[0].iter().zip(&b.potentials[0]) {
        assert!((u - *v as f64).abs() <= 1e-4 * (1.0 + u.abs()), "{u} vs {v}");
    }
}
