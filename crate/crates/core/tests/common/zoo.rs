//! MNIST model zoo shared by the acceptance run, cached on disk by config.

use std::path::{Path, PathBuf};
use std::time::Instant;

use advl::experiment::cached_model;
use advl::io::idx::load_mnist;
use advl::train::{accuracy, soft_labels, train, OptimizerConfig, Targets, TrainConfig};
use advl::{LabeledDataset, Network, Profile, Result};

pub const STUDENT_TEMPERATURES: [f64; 4] = [1.0, 5.0, 20.0, 100.0];

pub fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn train_config(temperature: f64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 64,
        learning_rate: 2e-3,
        lr_decay: 0.5,
        optimizer: OptimizerConfig::adam(),
        seed: 1,
        temperature,
    }
}

pub struct Zoo {
    pub test: LabeledDataset,
    pub baseline: Network,
    /// Distilled students by training temperature, each evaluated at T = 1.
    pub students: Vec<(f64, Network)>,
}

impl Zoo {
    pub fn student(&self, t: f64) -> &Network {
        &self.students.iter().find(|(tt, _)| *tt == t).expect("student trained").1
    }

    pub fn accuracy(&self, net: &Network) -> f64 {
        accuracy(net, &self.test).unwrap()
    }
}

pub fn build(cache: &Path) -> Result<Zoo> {
    let train_set = load_mnist(&mnist_dir(), "train")?;
    let test = load_mnist(&mnist_dir(), "t10k")?;
    let specs = Profile::Mnist.layers(10);
    let shape = [1, 28, 28];
    let fingerprint = crc32fast::hash(
        &train_set.labels().iter().map(|&l| l as u8).collect::<Vec<_>>(),
    );

    let teacher = |t: f64| {
        cached_model(cache, "teacher", &(train_config(t), &specs, fingerprint), || {
            let s = Instant::now();
            let mut net = Network::init(&shape, &specs, t, 1)?;
            train(&mut net, &train_set, Targets::Hard, &train_config(t))?;
            record_seconds(cache, &format!("teacher T={t}"), s.elapsed().as_secs_f64());
            Ok(net)
        })
    };
    // The T = 1 teacher is the undistilled baseline.
    let baseline = teacher(1.0)?;
    let mut students = Vec::new();
    for t in STUDENT_TEMPERATURES {
        let key = (train_config(t), &specs, fingerprint);
        let student = cached_model(cache, "student", &key, || {
            let tnet = teacher(t)?;
            let s = Instant::now();
            let soft = soft_labels(&tnet, &train_set)?;
            let mut net = Network::init(&shape, &specs, t, 1)?;
            train(&mut net, &train_set, Targets::Soft(&soft), &train_config(t))?;
            net.set_temperature(1.0)?;
            record_seconds(cache, &format!("student T={t}"), s.elapsed().as_secs_f64());
            Ok(net)
        })?;
        students.push((t, student));
    }
    Ok(Zoo {
        test,
        baseline,
        students,
    })
}

fn timing_path(cache: &Path) -> PathBuf {
    cache.join("training-seconds.tsv")
}

fn record_seconds(cache: &Path, label: &str, secs: f64) {
    let mut rows = read_seconds(cache);
    rows.retain(|(l, _)| l != label);
    rows.push((label.to_string(), secs));
    let body: String = rows.iter().map(|(l, s)| format!("{l}\t{s}\n")).collect();
    let _ = std::fs::create_dir_all(cache);
    std::fs::write(timing_path(cache), body).expect("write training timings");
}

fn read_seconds(cache: &Path) -> Vec<(String, f64)> {
    std::fs::read_to_string(timing_path(cache))
        .unwrap_or_default()
        .lines()
        .filter_map(|l| {
            let (label, secs) = l.split_once('\t')?;
            Some((label.to_string(), secs.parse().ok()?))
        })
        .collect()
}

/// Total training wall time of every cached model, measured when it was built.
pub fn training_seconds(cache: &Path) -> f64 {
    read_seconds(cache).iter().map(|(_, s)| s).sum()
}
