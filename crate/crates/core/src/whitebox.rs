//! ε-neighborhood attack: minimize the logit-margin loss with Adam over an
//! unconstrained variable `w` that tanh maps into the per-pixel box
//! `[max(x − ε, 0), min(x + ε, 1)]`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{l2_distortion_8bit, max_perturbation_8bit};
use crate::network::Network;
use crate::optim::{AdamParams, AdamState};
use crate::tensor::Tensor;

/// Inward nudge applied to pixels sitting exactly on a box face before inverting tanh.
pub const BOUNDARY_NUDGE: f64 = 1e-6;

/// `|tanh(c)|` cap for the balance offset when 1/2 lies outside the box.
const OFFSET_TANH_CAP: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsAttackConfig {
    /// Per-pixel bound in 8-bit units (divided by 255 internally).
    pub epsilon_8bit: f64,
    pub kappa: f64,
    pub max_iters: usize,
    pub adam: AdamParams,
    pub abort_early: bool,
}

impl Default for EpsAttackConfig {
    fn default() -> Self {
        EpsAttackConfig {
            epsilon_8bit: 52.0,
            kappa: 0.0,
            max_iters: 1000,
            adam: AdamParams::default(),
            abort_early: true,
        }
    }
}

impl EpsAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_8bit > 0.0 && self.epsilon_8bit <= 255.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 255], got {}",
                self.epsilon_8bit
            )));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Config(format!("kappa must be ≥ 0, got {}", self.kappa)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        Ok(())
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon_8bit / 255.0
    }
}

/// Outcome of one (image, target) attack, white- or black-box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub adversarial: Tensor,
    pub target: usize,
    /// Class the attacked model assigns to `adversarial`.
    pub predicted: usize,
    pub success: bool,
    /// Optimizer steps taken.
    pub iterations_used: usize,
    pub loss_final: f64,
    pub wall_time_s: f64,
    pub max_pert_8bit: f64,
    pub l2_distortion_8bit: f64,
    /// Model evaluations charged to this attack.
    pub queries: u64,
}

impl AttackResult {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn finish(
        original: &Tensor,
        adversarial: Tensor,
        target: usize,
        predicted: usize,
        iterations_used: usize,
        loss_final: f64,
        started: Instant,
        queries: u64,
    ) -> Result<Self> {
        Ok(AttackResult {
            max_pert_8bit: max_perturbation_8bit(original, &adversarial)?,
            l2_distortion_8bit: l2_distortion_8bit(original, &adversarial)?,
            adversarial,
            target,
            predicted,
            success: predicted == target,
            iterations_used,
            loss_final,
            wall_time_s: started.elapsed().as_secs_f64(),
            queries,
        })
    }
}

/// Box corners `a = max(x − ε, 0)`, `b = min(x + ε, 1)`.
pub fn eps_bounds(x: &Tensor, epsilon: f64) -> (Tensor, Tensor) {
    (
        x.map(|v| (v - epsilon).max(0.0)),
        x.map(|v| (v + epsilon).min(1.0)),
    )
}

/// Change of variables `image = (b − a)/2 · tanh(w + c) + (b + a)/2`.
///
/// The offset `c = −arctanh((b + a − 1)/(b − a))` sends `w = 0` to the image
/// value 1/2 whenever 1/2 lies inside `(a, b)`; elsewhere the arctanh argument
/// is capped so `c` stays finite. Pixels with `a == b` are frozen at `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionFrame {
    pub lower: Tensor,
    pub upper: Tensor,
    pub offset: Tensor,
}

impl SubstitutionFrame {
    pub fn new(x: &Tensor, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::Domain(format!("epsilon {epsilon} outside (0, 1]")));
        }
        let (lower, upper) = eps_bounds(x, epsilon);
        let offset = lower.zip_map(&upper, |a, b| {
            if b > a {
                let u = ((b + a - 1.0) / (b - a)).clamp(-OFFSET_TANH_CAP, OFFSET_TANH_CAP);
                -u.atanh()
            } else {
                0.0
            }
        })?;
        Ok(SubstitutionFrame {
            lower,
            upper,
            offset,
        })
    }

    pub fn w_to_image(&self, w: &Tensor) -> Result<Tensor> {
        self.lower.expect_same_shape(w)?;
        let data = w
            .data()
            .iter()
            .zip(self.lower.data())
            .zip(self.upper.data())
            .zip(self.offset.data())
            .map(|(((&w, &a), &b), &c)| {
                if b > a {
                    ((b - a) / 2.0 * (w + c).tanh() + (b + a) / 2.0).clamp(a, b)
                } else {
                    a
                }
            })
            .collect();
        Tensor::new(w.shape().to_vec(), data)
    }

    /// `d image / d w`, zero on frozen pixels.
    pub fn jacobian_diag(&self, w: &Tensor) -> Result<Tensor> {
        self.lower.expect_same_shape(w)?;
        let data = w
            .data()
            .iter()
            .zip(self.lower.data())
            .zip(self.upper.data())
            .zip(self.offset.data())
            .map(|(((&w, &a), &b), &c)| {
                if b > a {
                    let t = (w + c).tanh();
                    (b - a) / 2.0 * (1.0 - t * t)
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(w.shape().to_vec(), data)
    }

    /// Inverse map. Pixels on a box face are first moved inward by
    /// [`BOUNDARY_NUDGE`] (or a quarter of the box width, if smaller).
    pub fn image_to_w(&self, image: &Tensor) -> Result<Tensor> {
        self.lower.expect_same_shape(image)?;
        let mut out = Vec::with_capacity(image.len());
        for (((&x, &a), &b), &c) in image
            .data()
            .iter()
            .zip(self.lower.data())
            .zip(self.upper.data())
            .zip(self.offset.data())
        {
            if b > a {
                if !(a - 1e-12..=b + 1e-12).contains(&x) {
                    return Err(Error::Domain(format!("pixel {x} outside box [{a}, {b}]")));
                }
                let nudge = BOUNDARY_NUDGE.min((b - a) / 4.0);
                let x = if x <= a {
                    a + nudge
                } else if x >= b {
                    b - nudge
                } else {
                    x
                };
                let s = ((2.0 * x - a - b) / (b - a)).clamp(-1.0 + f64::EPSILON, 1.0 - f64::EPSILON);
                out.push(s.atanh() - c);
            } else if (x - a).abs() > 1e-12 {
                return Err(Error::Domain(format!(
                    "pixel {x} differs from degenerate box value {a}"
                )));
            } else {
                out.push(0.0);
            }
        }
        Tensor::new(image.shape().to_vec(), out)
    }

    pub fn contains(&self, image: &Tensor) -> bool {
        image
            .data()
            .iter()
            .zip(self.lower.data())
            .zip(self.upper.data())
            .all(|((&v, &a), &b)| a <= v && v <= b)
    }
}

/// `max(max_{i≠t} z_i − z_t, −κ)`.
pub fn cw_logit_loss(logits: &Tensor, target: usize, kappa: f64) -> f64 {
    let (_, zi) = runner_up(logits.data(), target);
    (zi - logits.data()[target]).max(-kappa)
}

/// Loss and its (sub)gradient with respect to the logits. At the floor the
/// gradient is zero; at the kink itself the margin branch is used.
pub fn cw_logit_loss_grad(logits: &Tensor, target: usize, kappa: f64) -> (f64, Tensor) {
    let z = logits.data();
    let (i, zi) = runner_up(z, target);
    let margin = zi - z[target];
    let mut grad = Tensor::zeros(logits.shape());
    if margin >= -kappa {
        grad.data_mut()[i] = 1.0;
        grad.data_mut()[target] = -1.0;
    }
    (margin.max(-kappa), grad)
}

/// Largest entry other than `target`; ties go to the lowest index.
pub(crate) fn runner_up(values: &[f64], target: usize) -> (usize, f64) {
    assert!(values.len() >= 2, "need at least two classes");
    let mut best = if target == 0 { 1 } else { 0 };
    for (i, &v) in values.iter().enumerate() {
        if i != target && v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// Targeted ε-neighborhood attack on `net`, starting from the clean image.
pub fn epsilon_attack(
    net: &Network,
    x: &Tensor,
    target: usize,
    cfg: &EpsAttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    if target >= net.class_count() {
        return Err(Error::Config(format!(
            "target {target} outside {} classes",
            net.class_count()
        )));
    }
    let started = Instant::now();
    let frame = SubstitutionFrame::new(x, cfg.epsilon())?;
    let mut w = frame.image_to_w(x)?;
    let mut adam = AdamState::new(w.len(), cfg.adam);
    let mut queries = 0u64;

    // Lowest-loss iterate seen; what is returned when abort_early is off.
    let mut best: Option<(f64, Tensor, usize)> = None;
    let mut steps = 0;
    loop {
        let image = frame.w_to_image(&w)?;
        debug_assert!(frame.contains(&image), "iterate left the ε-box");
        let trace = net.forward(&image)?;
        queries += 1;
        let (loss, dlogits) = cw_logit_loss_grad(trace.logits(), target, cfg.kappa);
        let predicted = trace.predicted();
        if best.as_ref().is_none_or(|(l, _, _)| loss < *l) {
            best = Some((loss, image.clone(), predicted));
        }
        if cfg.abort_early && loss <= -cfg.kappa && predicted == target {
            return AttackResult::finish(x, image, target, predicted, steps, loss, started, queries);
        }
        if steps == cfg.max_iters {
            break;
        }
        let grad_image = net.backward(&trace, &dlogits, None, true)?.unwrap();
        let grad_w = grad_image.zip_map(&frame.jacobian_diag(&w)?, |g, j| g * j)?;
        adam.step(w.data_mut(), grad_w.data());
        steps += 1;
    }
    let (loss, image, predicted) = best.expect("at least one iterate evaluated");
    AttackResult::finish(x, image, target, predicted, steps, loss, started, queries)
}
