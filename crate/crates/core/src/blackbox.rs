//! Probability-only attacks: the region-based attack, finite-difference
//! gradient estimation, cross-temperature transfer and noise robustness.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{cell_seed, run_cells};
use crate::metrics::TransferMatrix;
use crate::network::{softmax_vjp, Network};
use crate::optim::{AdamParams, AdamState};
use crate::tensor::{argmax, Tensor};
use crate::whitebox::{runner_up, AttackResult, SubstitutionFrame};

/// Maps a probability vector to a scalar loss and its gradient on the probabilities.
pub type ProbabilityLoss<'a> = dyn Fn(&Tensor) -> (f64, Tensor) + 'a;

/// A classifier reachable only through its output probabilities.
pub trait QueryOracle: Sync {
    fn class_count(&self) -> usize;

    /// Probability vector for `image`. Costs one query.
    fn query(&self, image: &Tensor) -> Result<Tensor>;

    /// Total queries charged so far.
    fn query_count(&self) -> u64;

    /// Evaluates `loss` on the probabilities at `image` and returns the loss
    /// with its gradient on the image, differentiating through the model.
    /// Costs one query. Oracles without this capability return `None`.
    fn probability_loss_gradient(
        &self,
        _image: &Tensor,
        _loss: &ProbabilityLoss<'_>,
    ) -> Option<Result<(f64, Tensor)>> {
        None
    }
}

/// Serves a [`Network`] at its own temperature.
#[derive(Debug)]
pub struct NetworkOracle<'a> {
    net: &'a Network,
    queries: AtomicU64,
}

impl<'a> NetworkOracle<'a> {
    pub fn new(net: &'a Network) -> Self {
        NetworkOracle {
            net,
            queries: AtomicU64::new(0),
        }
    }
}

impl QueryOracle for NetworkOracle<'_> {
    fn class_count(&self) -> usize {
        self.net.class_count()
    }

    fn query(&self, image: &Tensor) -> Result<Tensor> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.net.probs(image)
    }

    fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn probability_loss_gradient(
        &self,
        image: &Tensor,
        loss: &ProbabilityLoss<'_>,
    ) -> Option<Result<(f64, Tensor)>> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        Some((|| {
            let trace = self.net.forward(image)?;
            let (value, dprobs) = loss(&trace.probs);
            let dlogits = softmax_vjp(&trace.probs, &dprobs, trace.temperature())?;
            let grad = self.net.backward(&trace, &dlogits, None, true)?.unwrap();
            Ok((value, grad))
        })())
    }
}

/// `max(max_{i≠t} ln(p_i + Δf) − ln(p_t + Δf), −κ)`.
pub fn blackbox_loss(probs: &Tensor, target: usize, kappa: f64, delta_f: f64) -> f64 {
    let logp: Vec<f64> = probs.data().iter().map(|p| (p + delta_f).ln()).collect();
    let (_, li) = runner_up(&logp, target);
    (li - logp[target]).max(-kappa)
}

/// [`blackbox_loss`] with its (sub)gradient on the probabilities.
pub fn blackbox_loss_grad(probs: &Tensor, target: usize, kappa: f64, delta_f: f64) -> (f64, Tensor) {
    let p = probs.data();
    let logp: Vec<f64> = p.iter().map(|p| (p + delta_f).ln()).collect();
    let (i, li) = runner_up(&logp, target);
    let margin = li - logp[target];
    let mut grad = Tensor::zeros(probs.shape());
    if margin >= -kappa {
        grad.data_mut()[i] = 1.0 / (p[i] + delta_f);
        grad.data_mut()[target] = -1.0 / (p[target] + delta_f);
    }
    (margin.max(-kappa), grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Differentiate the probability loss through the model; the loss itself
    /// sees nothing but the probability vector.
    AnalyticOutputOnly,
    /// Symmetric differences of oracle queries on a random coordinate subset.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAttackConfig {
    /// Standard deviation of the per-step Gaussian noise, in [0,1] pixel units.
    pub sigma: f64,
    pub delta_f: f64,
    pub max_iters: usize,
    pub kappa: f64,
    pub epsilon_8bit: f64,
    pub adam: AdamParams,
    pub gradient_mode: GradientMode,
    pub fd_step: f64,
    /// Coordinates probed per finite-difference estimate; 0 probes all.
    pub fd_coords: usize,
    pub seed: u64,
}

impl Default for RegionAttackConfig {
    fn default() -> Self {
        RegionAttackConfig {
            sigma: 0.4,
            delta_f: 1e-12,
            max_iters: 1000,
            kappa: 0.0,
            epsilon_8bit: 52.0,
            adam: AdamParams::default(),
            gradient_mode: GradientMode::AnalyticOutputOnly,
            fd_step: 1e-4,
            fd_coords: 128,
            seed: 0,
        }
    }
}

impl RegionAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be ≥ 0, got {}", self.sigma)));
        }
        if !(self.delta_f > 0.0) {
            return Err(Error::Config(format!("delta_f must be > 0, got {}", self.delta_f)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Config(format!("kappa must be ≥ 0, got {}", self.kappa)));
        }
        if !(self.epsilon_8bit > 0.0 && self.epsilon_8bit <= 255.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 255], got {}",
                self.epsilon_8bit
            )));
        }
        if self.gradient_mode == GradientMode::FiniteDifference && !(self.fd_step > 0.0) {
            return Err(Error::Config(format!("fd_step must be > 0, got {}", self.fd_step)));
        }
        Ok(())
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon_8bit / 255.0
    }
}

/// Central-difference gradient of [`blackbox_loss`] at `image`, probing only
/// `coords` (all coordinates when `None`). Unprobed entries are zero.
/// Costs exactly two queries per probed coordinate.
pub fn estimate_gradient_fd(
    oracle: &dyn QueryOracle,
    image: &Tensor,
    target: usize,
    kappa: f64,
    delta_f: f64,
    fd_step: f64,
    coords: Option<&[usize]>,
) -> Result<Tensor> {
    if !(fd_step > 0.0) {
        return Err(Error::Domain(format!("fd_step must be > 0, got {fd_step}")));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..image.len()).collect();
            &all
        }
    };
    let mut grad = Tensor::zeros(image.shape());
    let mut probe = image.clone();
    for &k in coords {
        if k >= image.len() {
            return Err(Error::Shape(format!("coordinate {k} outside {} pixels", image.len())));
        }
        let v = image.data()[k];
        probe.data_mut()[k] = v + fd_step;
        let up = blackbox_loss(&oracle.query(&probe)?, target, kappa, delta_f);
        probe.data_mut()[k] = v - fd_step;
        let down = blackbox_loss(&oracle.query(&probe)?, target, kappa, delta_f);
        probe.data_mut()[k] = v;
        grad.data_mut()[k] = (up - down) / (2.0 * fd_step);
    }
    Ok(grad)
}

/// Targeted region-based attack through `oracle`.
///
/// Each step evaluates the loss gradient at a Gaussian-perturbed copy of the
/// current iterate, then moves the un-noised iterate with Adam inside the
/// ε-box. Success is checked on the un-noised iterate with one extra query.
pub fn region_attack(
    oracle: &dyn QueryOracle,
    x: &Tensor,
    target: usize,
    cfg: &RegionAttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    if target >= oracle.class_count() {
        return Err(Error::Config(format!(
            "target {target} outside {} classes",
            oracle.class_count()
        )));
    }
    let started = Instant::now();
    let frame = SubstitutionFrame::new(x, cfg.epsilon())?;
    let mut w = frame.image_to_w(x)?;
    let mut adam = AdamState::new(w.len(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.sigma).expect("sigma validated");
    let (kappa, delta_f) = (cfg.kappa, cfg.delta_f);
    let loss_fn = move |p: &Tensor| blackbox_loss_grad(p, target, kappa, delta_f);
    let mut queries = 0u64;

    let mut best: Option<(f64, Tensor, usize)> = None;
    let mut steps = 0;
    loop {
        let image = frame.w_to_image(&w)?;
        debug_assert!(frame.contains(&image), "iterate left the ε-box");
        let probs = oracle.query(&image)?;
        queries += 1;
        let loss = blackbox_loss(&probs, target, kappa, delta_f);
        let predicted = argmax(probs.data());
        if best.as_ref().is_none_or(|(l, _, _)| loss < *l) {
            best = Some((loss, image.clone(), predicted));
        }
        if loss <= -kappa && predicted == target {
            return AttackResult::finish(x, image, target, predicted, steps, loss, started, queries);
        }
        if steps == cfg.max_iters {
            break;
        }
        let noisy = if cfg.sigma > 0.0 {
            image.map(|v| v + noise.sample(&mut rng))
        } else {
            image
        };
        let grad_image = match cfg.gradient_mode {
            GradientMode::AnalyticOutputOnly => {
                let (_, g) = oracle.probability_loss_gradient(&noisy, &loss_fn).ok_or_else(|| {
                    Error::Config("oracle exposes no gradients; use finite-difference mode".into())
                })??;
                queries += 1;
                g
            }
            GradientMode::FiniteDifference => {
                let n = noisy.len();
                let coords = if cfg.fd_coords == 0 || cfg.fd_coords >= n {
                    (0..n).collect()
                } else {
                    let mut c = index::sample(&mut rng, n, cfg.fd_coords).into_vec();
                    c.sort_unstable();
                    c
                };
                queries += 2 * coords.len() as u64;
                estimate_gradient_fd(oracle, &noisy, target, kappa, delta_f, cfg.fd_step, Some(&coords))?
            }
        };
        let grad_w = grad_image.zip_map(&frame.jacobian_diag(&w)?, |g, j| g * j)?;
        adam.step(w.data_mut(), grad_w.data());
        steps += 1;
    }
    let (loss, image, predicted) = best.expect("at least one iterate evaluated");
    AttackResult::finish(x, image, target, predicted, steps, loss, started, queries)
}

/// Temperature-indexed models of one architecture.
#[derive(Debug, Clone, Copy)]
pub struct ModelSet<'a> {
    models: &'a [(f64, Network)],
}

impl<'a> ModelSet<'a> {
    pub fn new(models: &'a [(f64, Network)]) -> Result<Self> {
        if let Some((_, first)) = models.first() {
            for (t, m) in models {
                if m.specs() != first.specs()
                    || m.input_shape() != first.input_shape()
                    || m.class_count() != first.class_count()
                {
                    return Err(Error::Config(format!(
                        "model at T={t} differs in architecture from the others"
                    )));
                }
            }
        }
        Ok(ModelSet { models })
    }

    pub fn get(&self, temperature: f64) -> Result<&'a Network> {
        self.models
            .iter()
            .find(|(t, _)| *t == temperature)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Config(format!("no model for temperature {temperature}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BypassPlan {
    pub source_temperatures: Vec<f64>,
    pub target_temperatures: Vec<f64>,
    pub attack: RegionAttackConfig,
}

/// Adversarials crafted on each source model, plus the matrix of their
/// targeted success on every target model.
#[derive(Debug, Clone)]
pub struct BypassOutcome {
    pub matrix: TransferMatrix,
    /// `results[s]` holds one attack per (image, target) cell for source `s`.
    pub results: Vec<Vec<AttackResult>>,
}

/// Runs the region attack on each source model and replays the resulting
/// images against every target model.
pub fn bypass_run(
    plan: &BypassPlan,
    models: &ModelSet<'_>,
    images: &[Tensor],
    targets: &[usize],
    workers: usize,
) -> Result<BypassOutcome> {
    plan.attack.validate()?;
    if images.len() != targets.len() || images.is_empty() {
        return Err(Error::Config(format!(
            "{} images but {} targets",
            images.len(),
            targets.len()
        )));
    }
    for &t in plan.source_temperatures.iter().chain(&plan.target_temperatures) {
        if !(t > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {t}")));
        }
    }
    let target_models = plan
        .target_temperatures
        .iter()
        .map(|&t| models.get(t))
        .collect::<Result<Vec<_>>>()?;
    let mut rates = Vec::new();
    let mut results = Vec::new();
    for &source in &plan.source_temperatures {
        let oracle = NetworkOracle::new(models.get(source)?);
        let crafted = run_cells(images.len(), workers, |i| {
            let cfg = RegionAttackConfig {
                seed: cell_seed(plan.attack.seed, i as u64),
                ..plan.attack.clone()
            };
            region_attack(&oracle, &images[i], targets[i], &cfg)
        })?;
        let mut row = Vec::new();
        for model in &target_models {
            let mut hits = 0;
            for (r, &t) in crafted.iter().zip(targets) {
                if model.predict(&r.adversarial)? == t {
                    hits += 1;
                }
            }
            row.push(hits as f64 / crafted.len() as f64);
        }
        rates.push(row);
        results.push(crafted);
    }
    Ok(BypassOutcome {
        matrix: TransferMatrix {
            sources: plan.source_temperatures.clone(),
            targets: plan.target_temperatures.clone(),
            rates,
            cells: images.len(),
        },
        results,
    })
}

/// Fraction of (image, trial) pairs still classified as the image's target
/// after adding fresh Gaussian noise of deviation `sigma_test` (then
/// clamping to [0,1]).
pub fn noise_robustness(
    oracle: &dyn QueryOracle,
    adversarials: &[Tensor],
    targets: &[usize],
    sigma_test: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if !(sigma_test >= 0.0) {
        return Err(Error::Domain(format!("sigma_test must be ≥ 0, got {sigma_test}")));
    }
    if adversarials.len() != targets.len() || adversarials.is_empty() || trials == 0 {
        return Err(Error::Domain("need matching nonempty images/targets and trials ≥ 1".into()));
    }
    let noise = Normal::new(0.0, sigma_test).expect("sigma validated");
    let mut hits = 0usize;
    for (i, (x, &t)) in adversarials.iter().zip(targets).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, i as u64));
        for _ in 0..trials {
            let noisy = x.map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
            if argmax(oracle.query(&noisy)?.data()) == t {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (adversarials.len() * trials) as f64)
}
