//! l-infinity FGSM and PGD attacks, the robustness predicate and PGD
//! adversarial training.
//!
//! PGD ascends the loss: `x <- clip01(clamp(x + eta * sign(g), x0 - eps, x0 + eps))`.
//! `sign(0) = 0`. Argmax ties resolve to the lowest index.

use rand::Rng;

use crate::autodiff::{grad, set_grad_enabled, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{xent, xent_per_sample};
use crate::nn::{Model, Sgd};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig<T> {
    pub epsilon: T,
    pub steps: usize,
    pub eta: T,
    pub random_start: bool,
}

impl<T: Real> AttackConfig<T> {
    pub fn new(epsilon: T, steps: usize, eta: T, random_start: bool) -> Result<Self> {
        let cfg = AttackConfig {
            epsilon,
            steps,
            eta,
            random_start,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `steps`-step PGD with the default step size `eps / 4` (at least `eps`
    /// for a single step) and no random start.
    pub fn pgd(epsilon: T, steps: usize) -> Result<Self> {
        let eta = if steps == 1 { epsilon } else { epsilon / T::lit(4.0) };
        let eta = if eta > T::zero() { eta } else { T::lit(1e-3) };
        Self::new(epsilon, steps, eta, false)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.epsilon >= T::zero() && self.epsilon.is_finite()) {
            errs.push(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.steps == 0 {
            errs.push("steps must be >= 1".to_string());
        }
        if !(self.eta > T::zero() && self.eta.is_finite()) {
            errs.push(format!("eta must be > 0, got {}", self.eta));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// `-1`, `0` or `1`; zero gradients give no step.
pub fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn clip01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Projects `v` onto the eps-ball around `origin` intersected with `[0, 1]`,
/// so that the computed difference `v - origin` never exceeds `eps` in
/// magnitude (rounding of `origin + eps` can overshoot by an ulp).
fn project<T: Real>(v: T, origin: T, eps: T) -> T {
    let mut c = clip01(v.max(origin - eps).min(origin + eps));
    let nudge = |c: T| T::epsilon() * c.abs().max(T::min_positive_value());
    while c - origin > eps {
        c = c - nudge(c);
    }
    while origin - c > eps {
        c = c + nudge(c);
    }
    c
}

/// Gradient of a scalar loss with respect to the input point.
fn input_grad<T, F>(loss: &F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let _mode = set_grad_enabled(true);
    let leaf = x.with_grad();
    let l = loss(&leaf)?;
    Ok(grad(&l, &[&leaf], false)?.remove(0))
}

/// Single sign step of size `eps` from `x`, clipped to `[0, 1]`.
pub fn fgsm_with<T, F>(loss: F, x: &Tensor<T>, epsilon: T) -> Result<Tensor<T>>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let g = input_grad(&loss, x)?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xi, &gi)| project(xi + epsilon * sign(gi), xi, epsilon))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// All PGD iterates (the start point first, then one per step) for an
/// arbitrary scalar loss of the input.
pub fn pgd_iterates<T, F, R>(loss: F, x: &Tensor<T>, cfg: &AttackConfig<T>, rng: &mut R) -> Result<Vec<Tensor<T>>>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let eps = cfg.epsilon;
    let x0 = x.data();
    let mut cur: Vec<T> = if cfg.random_start && eps > T::zero() {
        let e = eps.as_f64();
        x0.iter().map(|&v| project(v + T::lit(rng.gen_range(-e..=e)), v, eps)).collect()
    } else {
        x0.to_vec()
    };
    let mut out = vec![Tensor::from_vec(x.shape(), cur.clone())?];
    for _ in 0..cfg.steps {
        let g = input_grad(&loss, out.last().unwrap_or(x))?;
        for ((c, &o), &gi) in cur.iter_mut().zip(x0).zip(g.data()) {
            *c = project(*c + cfg.eta * sign(gi), o, eps);
        }
        out.push(Tensor::from_vec(x.shape(), cur.clone())?);
    }
    Ok(out)
}

/// Summed per-sample cross-entropy; its input gradient has the per-sample
/// sign pattern of the batch mean.
fn attack_loss<'a, T: Real>(model: &'a Model<T>, y: &'a Tensor<T>) -> impl Fn(&Tensor<T>) -> Result<Tensor<T>> + 'a {
    move |x| xent_per_sample(&model.logits(x)?, y)?.sum()
}

pub fn fgsm<T: Real>(model: &Model<T>, x: &Tensor<T>, y: &Tensor<T>, epsilon: T) -> Result<Tensor<T>> {
    fgsm_with(attack_loss(model, y), x, epsilon)
}

pub fn pgd<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &AttackConfig<T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut it = pgd_iterates(attack_loss(model, y), x, cfg, rng)?;
    it.pop().ok_or(Error::Unreachable)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per sample.
pub fn predict<T: Real>(model: &Model<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let _mode = set_grad_enabled(false);
    let z = model.logits(x)?;
    let k = z.shape()[1];
    Ok(z.data().chunks(k).map(argmax).collect())
}

/// Per sample: does the prediction on `x_adv` equal the one on `x`?
pub fn is_robust_at<T: Real>(model: &Model<T>, x: &Tensor<T>, x_adv: &Tensor<T>) -> Result<Vec<bool>> {
    if x.shape() != x_adv.shape() {
        return Err(Error::shape("is_robust_at", format!("{:?} vs {:?}", x.shape(), x_adv.shape())));
    }
    let a = predict(model, x)?;
    let b = predict(model, x_adv)?;
    Ok(a.iter().zip(&b).map(|(p, q)| p == q).collect())
}

/// Mean training loss over an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub steps: usize,
}

/// One epoch of PGD adversarial training: per shuffled batch, attack the
/// current model, then take an optimizer step on the cross-entropy of the
/// adversarial batch. With `epsilon = 0` the attack returns its input and the
/// epoch equals a standard one.
pub fn adversarial_train_epoch<T: Real, R: Rng + ?Sized>(
    model: &mut Model<T>,
    opt: &mut Sgd<T>,
    data: &Dataset<T>,
    cfg: &AttackConfig<T>,
    batch_size: usize,
    shuffle: &mut R,
    attack_rng: &mut R,
) -> Result<EpochStats> {
    let _mode = set_grad_enabled(true);
    let mut total = 0.0;
    let batches = data.batch_indices(batch_size, Some(shuffle));
    for idx in &batches {
        let (x, y) = data.batch(idx)?;
        let x_adv = if cfg.epsilon > T::zero() {
            pgd(model, &x, &y, cfg, attack_rng)?
        } else {
            x
        };
        let loss = xent(model, &x_adv, &y)?;
        let params = model.trainable();
        let refs: Vec<&Tensor<T>> = params.iter().collect();
        let grads = grad(&loss, &refs, false)?;
        opt.step(model, &grads)?;
        total += loss.item()?.as_f64();
    }
    Ok(EpochStats {
        mean_loss: total / batches.len().max(1) as f64,
        steps: batches.len(),
    })
}
