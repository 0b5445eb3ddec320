use whispersv::corpus::{generate_synthetic, split_speakers, SplitSpec, SynthConfig};
use whispersv::postnet::{load_weights, save_weights};
use whispersv::trainer::{train, TrainConfig};

fn train_split() -> whispersv::corpus::Corpus {
    let c = generate_synthetic(&SynthConfig::default()).unwrap();
    split_speakers(&c, SplitSpec { train_fraction: 0.7, seed: 0 }).unwrap().0
}

#[test]
fn synthetic_training_makes_progress() {
    let corpus = train_split();
    let out = train::<f64>(&corpus, &TrainConfig::default()).unwrap();
    let h = &out.history.epochs;
    assert_eq!(h.len(), 100);
    assert!(h.last().unwrap().l_trip < h[0].l_trip);

    let combined: Vec<f64> = h.iter().map(|r| r.l_combined).collect();
    let ma: Vec<f64> = combined.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, w) in ma.windows(2).enumerate() {
        assert!(w[1] <= w[0] * 1.05, "moving average rose at window {i}: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn trained_weights_roundtrip_through_a_file() {
    let corpus = train_split();
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let out = train::<f64>(&corpus, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("postnet.bin");
    save_weights(&out.net, &path).unwrap();
    let back = load_weights::<f64>(&path).unwrap();
    assert_eq!(back.layers(), out.net.layers());
}
