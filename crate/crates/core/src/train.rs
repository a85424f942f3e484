//! Supervised training and two-phase defensive distillation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{log_softmax_t, LayerSpec, Network};
use crate::optim::{AdamParams, AdamState, MomentumState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(i) = images.iter().position(|im| im.shape() != first.shape()) {
                return Err(Error::Shape(format!("image {i} has a different shape")));
            }
        }
        if let Some(i) = images
            .iter()
            .position(|im| im.data().iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::Domain(format!("image {i} has pixels outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!("label {l} outside [0, {classes})")));
        }
        Ok(LabeledDataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|im| im.shape())
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }
}

/// Teacher-produced probability vectors, one per training image.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    probs: Vec<Tensor>,
}

impl SoftLabelSet {
    pub fn new(probs: Vec<Tensor>) -> Result<Self> {
        for (i, p) in probs.iter().enumerate() {
            let sum: f64 = p.data().iter().sum();
            if p.data().iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!(
                    "soft label {i} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(SoftLabelSet { probs })
    }

    pub fn probs(&self) -> &[Tensor] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = self
            .probs
            .iter()
            .map(|p| {
                p.data()
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| -v * v.ln())
                    .sum::<f64>()
            })
            .sum();
        total / self.probs.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Hard,
    Soft(&'a SoftLabelSet),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        let p = AdamParams::default();
        OptimizerConfig::Adam {
            beta1: p.beta1,
            beta2: p.beta2,
            epsilon: p.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Factor applied to the learning rate after every epoch.
    #[serde(default = "unit_decay")]
    pub lr_decay: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            learning_rate: 0.01,
            lr_decay: 1.0,
            optimizer: OptimizerConfig::Momentum { momentum: 0.9 },
            seed: 0,
            temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config(
                "batch size, learning rate and decay must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn unit_decay() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// `−Σ target_i · log softmax_T(logits)_i`, evaluated in logit space.
pub fn cross_entropy(logits: &Tensor, target: &Tensor, temperature: f64) -> Result<f64> {
    logits.expect_same_shape(target)?;
    let logp = log_softmax_t(logits, temperature)?;
    Ok(-target
        .data()
        .iter()
        .zip(logp.data())
        .filter(|(&t, _)| t != 0.0)
        .map(|(t, lp)| t * lp)
        .sum::<f64>())
}

/// Gradient of [`cross_entropy`] with respect to the logits: `(p − target) / T`
/// (for targets summing to one).
pub fn cross_entropy_grad(probs: &Tensor, target: &Tensor, temperature: f64) -> Result<Tensor> {
    probs.zip_map(target, |p, y| (p - y) / temperature)
}

fn one_hot(label: usize, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes]);
    t.data_mut()[label] = 1.0;
    t
}

enum OptState {
    Momentum(Vec<MomentumState>),
    Adam(Vec<AdamState>),
}

/// Trains `net` in place. The network's temperature is set to `cfg.temperature`
/// for the whole run.
pub fn train(
    net: &mut Network,
    data: &LabeledDataset,
    targets: Targets<'_>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.classes() != net.class_count() {
        return Err(Error::Config(format!(
            "dataset has {} classes, network {}",
            data.classes(),
            net.class_count()
        )));
    }
    if let Targets::Soft(soft) = targets {
        if soft.len() != data.len() {
            return Err(Error::Config(format!(
                "{} soft labels for {} images",
                soft.len(),
                data.len()
            )));
        }
    }
    net.set_temperature(cfg.temperature)?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 || data.is_empty() {
        return Ok(report);
    }

    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut state = match cfg.optimizer {
        OptimizerConfig::Momentum { momentum } => OptState::Momentum(
            sizes
                .iter()
                .map(|&n| MomentumState::new(n, cfg.learning_rate, momentum))
                .collect(),
        ),
        OptimizerConfig::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            let p = AdamParams {
                step_size: cfg.learning_rate,
                beta1,
                beta2,
                epsilon,
            };
            OptState::Adam(sizes.iter().map(|&n| AdamState::new(n, p)).collect())
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let t = cfg.temperature;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &data.images()[i]).collect();
            let (loss, grads) = net.param_gradients(&images, |k, trace| {
                let idx = batch[k];
                let target = match targets {
                    Targets::Hard => one_hot(data.labels()[idx], data.classes()),
                    Targets::Soft(soft) => soft.probs()[idx].clone(),
                };
                let value = cross_entropy(trace.logits(), &target, t).unwrap_or(f64::NAN);
                let grad = cross_entropy_grad(&trace.probs, &target, t)
                    .expect("target shaped like logits");
                (value, grad)
            })?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_no,
                    loss,
                });
            }
            epoch_loss += loss * batch.len() as f64;
            let params = net.params_mut();
            match &mut state {
                OptState::Momentum(s) => {
                    for ((p, g), s) in params.into_iter().zip(&grads).zip(s.iter_mut()) {
                        s.step(p.data_mut(), g.data());
                    }
                }
                OptState::Adam(s) => {
                    for ((p, g), s) in params.into_iter().zip(&grads).zip(s.iter_mut()) {
                        s.step(p.data_mut(), g.data());
                    }
                }
            }
        }
        report.epoch_losses.push(epoch_loss / data.len() as f64);
        if cfg.lr_decay != 1.0 {
            let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32 + 1);
            match &mut state {
                OptState::Momentum(s) => s.iter_mut().for_each(|s| s.set_learning_rate(lr)),
                OptState::Adam(s) => s.iter_mut().for_each(|s| s.set_step_size(lr)),
            }
        }
    }
    Ok(report)
}

/// Probability vectors of `teacher` (at its own temperature) for every image.
pub fn soft_labels(teacher: &Network, data: &LabeledDataset) -> Result<SoftLabelSet> {
    let probs = data
        .images()
        .iter()
        .map(|x| teacher.probs(x))
        .collect::<Result<Vec<_>>>()?;
    SoftLabelSet::new(probs)
}

pub fn accuracy(net: &Network, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Domain("accuracy of an empty dataset".into()));
    }
    let mut correct = 0;
    for (x, &y) in data.images().iter().zip(data.labels()) {
        if net.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Distilled {
    /// Trained at `cfg.temperature` on hard labels; keeps that temperature.
    pub teacher: Network,
    /// Trained at `cfg.temperature` on the teacher's soft labels, then set to
    /// evaluate at temperature 1.
    pub student: Network,
    pub soft_labels: SoftLabelSet,
    pub teacher_report: TrainReport,
    pub student_report: TrainReport,
}

/// Two-phase defensive distillation. Teacher and student share the
/// architecture and `cfg` (including the initialization seed).
pub fn distill(data: &LabeledDataset, specs: &[LayerSpec], cfg: &TrainConfig) -> Result<Distilled> {
    if !(cfg.temperature >= 1.0) {
        return Err(Error::Config(format!(
            "distillation temperature must be at least 1, got {}",
            cfg.temperature
        )));
    }
    let shape = data
        .image_shape()
        .ok_or_else(|| Error::Config("cannot distill on an empty dataset".into()))?
        .to_vec();
    let mut teacher = Network::init(&shape, specs, cfg.temperature, cfg.seed)?;
    let teacher_report = train(&mut teacher, data, Targets::Hard, cfg)?;
    let soft = soft_labels(&teacher, data)?;
    let mut student = Network::init(&shape, specs, cfg.temperature, cfg.seed)?;
    let student_report = train(&mut student, data, Targets::Soft(&soft), cfg)?;
    student.set_temperature(1.0)?;
    Ok(Distilled {
        teacher,
        student,
        soft_labels: soft,
        teacher_report,
        student_report,
    })
}
