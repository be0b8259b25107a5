use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multispike::checkpoint::{read_checkpoint, write_checkpoint};
use multispike::config::RunConfig;
use multispike::mnist::{load_split, MnistFiles, Split};
use multispike::neuron::{NeuronParams, SpikeTrain};
use multispike::train::{EncodedSet, Trainer};

/// Three classes; class `c` drives inputs `2c` and `2c + 1` early.
fn toy_set(n: usize, seed: u64, params: &NeuronParams) -> EncodedSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let label = rng.random_range(0..3usize);
        let times: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![if i / 2 == label { 0.1 } else { 0.6 } + rng.random_range(0.0..0.1)])
            .collect();
        inputs.push(SpikeTrain::from_times(&times, params).unwrap());
        labels.push(label);
    }
    EncodedSet { inputs, labels }
}

fn toy_trainer() -> Trainer {
    let cfg = RunConfig { sizes: vec![6, 8, 3], tau_i: 1.0, lr: 0.01, batch_size: 8, seed: 3, ..RunConfig::default() };
    let mut t = Trainer::new(cfg).unwrap();
    for l in t.net.layers_mut() {
        l.weights_mut().iter_mut().for_each(|w| *w = *w * 10.0 + 2.0);
    }
    t.adam = multispike::optim::AdamState::new(&t.net, t.config.lr);
    t
}

#[test]
fn resume_from_checkpoint_is_bit_identical() {
    let mut straight = toy_trainer();
    let data = toy_set(50, 9, straight.params());
    let mut resumed = straight.clone();

    for _ in 0..4 {
        straight.train_epoch(&data).unwrap();
    }

    for _ in 0..2 {
        resumed.train_epoch(&data).unwrap();
    }
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &resumed).unwrap();
    let mut resumed = read_checkpoint(bytes.as_slice()).unwrap();
    for _ in 0..2 {
        resumed.train_epoch(&data).unwrap();
    }

    assert_eq!(resumed.epoch, straight.epoch);
    for (a, b) in straight.net.layers().iter().zip(resumed.net.layers()) {
        let a: Vec<u64> = a.weights().iter().map(|w| w.to_bits()).collect();
        let b: Vec<u64> = b.weights().iter().map(|w| w.to_bits()).collect();
        assert_eq!(a, b);
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    write_checkpoint(&mut x, &straight).unwrap();
    write_checkpoint(&mut y, &resumed).unwrap();
    assert_eq!(x, y);
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

#[test]
fn loss_decreases_on_mnist_subset() {
    let dir = mnist_dir();
    if load_split(&dir, &MnistFiles::default(), Split::Train).is_err() {
        eprintln!("MNIST not found under {}, skipping", dir.display());
        return;
    }
    let cfg = RunConfig {
        sizes: vec![784, 40, 10],
        train_samples: 500,
        batch_size: 50,
        data_dir: dir,
        ..RunConfig::default()
    };
    let data = EncodedSet::load(&cfg, Split::Train).unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    let losses: Vec<f64> = (0..5).map(|_| trainer.train_epoch(&data).unwrap().loss).collect();
    assert!(losses[4] < losses[0], "{losses:?}");
}
