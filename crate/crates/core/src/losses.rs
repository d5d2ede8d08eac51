//! Scalar objectives: cross-entropy, input gradients, the discriminator
//! (adversarial) loss on input gradients, the l2 matching loss and the
//! combined student objective.
//!
//! Batch reduction is the mean everywhere. Input gradients are per-sample:
//! `J[i] = d/dx_i loss(x_i, y_i)`, i.e. the gradient of the summed (not
//! averaged) per-sample losses, so `J` does not depend on the batch size.

use crate::autodiff::{grad, Tensor};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::Real;

/// Weights of the two gradient-matching terms. Zero disables a term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub lambda_adv: T,
    pub lambda_diff: T,
}

impl<T: Real> LossWeights<T> {
    pub fn new(lambda_adv: T, lambda_diff: T) -> Result<Self> {
        for (name, v) in [("lambda_adv", lambda_adv), ("lambda_diff", lambda_diff)] {
            if !v.is_finite() || v < T::zero() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(LossWeights { lambda_adv, lambda_diff })
    }

    pub fn disabled() -> Self {
        LossWeights {
            lambda_adv: T::zero(),
            lambda_diff: T::zero(),
        }
    }
}

/// One-hot rows for integer labels.
pub fn one_hot<T: Real>(labels: &[usize], k: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let mut data = vec![T::zero(); labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        data[i * k + l] = T::one();
    }
    Tensor::from_vec(&[labels.len(), k], data)
}

/// Per-sample cross-entropy `-y . log softmax(z)`, shape `[n]`.
pub fn xent_per_sample<T: Real>(logits: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape() != y.shape() || logits.shape().len() != 2 {
        return Err(Error::shape(
            "xent",
            format!("logits {:?} vs labels {:?}", logits.shape(), y.shape()),
        ));
    }
    logits.log_softmax()?.mul(y)?.sum_last()?.neg()
}

/// Mean cross-entropy of logits against one-hot rows.
pub fn xent_logits<T: Real>(logits: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let n = logits.shape()[0];
    xent_per_sample(logits, y)?.sum()?.scale(T::one() / T::lit(n as f64))
}

/// Mean cross-entropy of `model` on `(x, y)`.
pub fn xent<T: Real>(model: &Model<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    xent_logits(&model.logits(x)?, y)
}

/// Input gradient of any logit function. `x` must require grad. With
/// `create_graph` the result stays differentiable (student side); without it
/// the result is a constant (teacher side).
pub fn input_gradient_with<T, F>(logits_of: F, x: &Tensor<T>, y: &Tensor<T>, create_graph: bool) -> Result<Tensor<T>>
where
    T: Real,
    F: FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
{
    if !x.requires_grad() {
        return Err(Error::GradDisabled);
    }
    let total = xent_per_sample(&logits_of(x)?, y)?.sum()?;
    Ok(grad(&total, &[x], create_graph)?.remove(0))
}

pub fn input_gradient<T: Real>(model: &Model<T>, x: &Tensor<T>, y: &Tensor<T>, create_graph: bool) -> Result<Tensor<T>> {
    input_gradient_with(|x| model.logits(x), x, y, create_graph)
}

/// `mean log D(J_t) + mean log(1 - D(J_s))` from discriminator logits,
/// in log-sigmoid form: `log s(z) = -softplus(-z)`, `log(1 - s(z)) = -softplus(z)`.
pub fn loss_adv_logits<T: Real>(z_t: &Tensor<T>, z_s: &Tensor<T>) -> Result<Tensor<T>> {
    let real = z_t.neg()?.softplus()?.mean()?.neg()?;
    let fake = z_s.softplus()?.mean()?.neg()?;
    real.add(&fake)
}

/// Adversarial loss of `disc` on teacher and student input gradients. The
/// discriminator ascends this quantity.
pub fn loss_adv<T: Real>(disc: &Model<T>, j_t: &Tensor<T>, j_s: &Tensor<T>) -> Result<Tensor<T>> {
    loss_adv_logits(&disc.logits(j_t)?, &disc.logits(j_s)?)
}

/// `mean_i ||J_s[i] - J_t[i]||^2`.
pub fn loss_diff<T: Real>(j_s: &Tensor<T>, j_t: &Tensor<T>) -> Result<Tensor<T>> {
    if j_s.shape() != j_t.shape() {
        return Err(Error::shape("loss_diff", format!("{:?} vs {:?}", j_s.shape(), j_t.shape())));
    }
    let n = j_s.shape()[0];
    j_s.sub(j_t)?.l2_norm_sq()?.scale(T::one() / T::lit(n as f64))
}

/// How the student's adversarial term is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdvForm {
    /// Minimise `L_adv` itself (only its `log(1 - D(J_s))` part depends on the
    /// student).
    #[default]
    Saturating,
    /// Minimise `-mean log D(J_s)` instead.
    NonSaturating,
}

/// Per-sample standardisation `(J - mean) / sqrt(var + 1e-12)`, built from
/// differentiable ops.
pub fn standardize<T: Real>(j: &Tensor<T>) -> Result<Tensor<T>> {
    let n = j.shape()[0];
    let d = j.numel() / n;
    let flat = j.reshape(&[n, d])?;
    let inv_d = T::one() / T::lit(d as f64);
    let mean = flat.sum_last()?.scale(inv_d)?.expand_last(d)?;
    let centered = flat.sub(&mean)?;
    let var = centered.square()?.sum_last()?.scale(inv_d)?.shift(T::lit(1e-12))?;
    let inv_std = var.log()?.scale(T::lit(-0.5))?.exp()?.expand_last(d)?;
    centered.mul(&inv_std)?.reshape(j.shape())
}

/// Options controlling what the discriminator sees.
pub struct AdvOptions<'a, T: Real> {
    pub form: AdvForm,
    pub standardize: bool,
    /// Applied to both gradients before the discriminator (e.g. cropping).
    pub view: Option<&'a dyn Fn(&Tensor<T>) -> Result<Tensor<T>>>,
}

impl<T: Real> Default for AdvOptions<'_, T> {
    fn default() -> Self {
        AdvOptions {
            form: AdvForm::Saturating,
            standardize: false,
            view: None,
        }
    }
}

impl<T: Real> AdvOptions<'_, T> {
    pub fn disc_input(&self, j: &Tensor<T>) -> Result<Tensor<T>> {
        let v = match self.view {
            Some(f) => f(j)?,
            None => j.clone(),
        };
        if self.standardize {
            standardize(&v)
        } else {
            Ok(v)
        }
    }
}

/// Graph pieces of one student objective evaluation.
pub struct StudentObjective<T: Real> {
    /// `L_xent + lambda_adv * adv_term + lambda_diff * L_diff`, with disabled
    /// terms left out of the graph entirely.
    pub total: Tensor<T>,
    pub xent: Tensor<T>,
    /// `L_adv` as the discriminator sees it; graph-connected to the
    /// discriminator parameters (and to the student when `lambda_adv > 0`).
    pub l_adv: Tensor<T>,
    pub l_diff: Tensor<T>,
    pub j_s: Tensor<T>,
    /// Discriminator logits on teacher and student gradients.
    pub disc_logits: (Tensor<T>, Tensor<T>),
}

/// Builds the student objective for one batch. `x` must be a fresh leaf
/// requiring grad; `j_t` is the (constant) teacher input gradient in the
/// student's input space.
pub fn student_objective<T: Real>(
    student: &Model<T>,
    disc: &Model<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    j_t: &Tensor<T>,
    weights: LossWeights<T>,
    opts: &AdvOptions<'_, T>,
) -> Result<StudentObjective<T>> {
    if !x.requires_grad() {
        return Err(Error::GradDisabled);
    }
    if j_t.shape() != x.shape() {
        return Err(Error::shape("student_objective", format!("J_t {:?} vs x {:?}", j_t.shape(), x.shape())));
    }
    let n = x.shape()[0];
    let per_sample = xent_per_sample(&student.logits(x)?, y)?;
    let summed = per_sample.sum()?;
    let xent = summed.scale(T::one() / T::lit(n as f64))?;

    let use_adv = weights.lambda_adv > T::zero();
    let use_diff = weights.lambda_diff > T::zero();
    let j_s_live = grad(&summed, &[x], use_adv || use_diff)?.remove(0);
    let j_s_const = j_s_live.detach();

    let j_t = j_t.detach();
    let z_t = disc.logits(&opts.disc_input(&j_t)?)?;
    let z_s = disc.logits(&opts.disc_input(if use_adv { &j_s_live } else { &j_s_const })?)?;
    let l_adv = loss_adv_logits(&z_t, &z_s)?;
    let l_diff = loss_diff(if use_diff { &j_s_live } else { &j_s_const }, &j_t)?;

    let mut total = xent.clone();
    if use_adv {
        let term = match opts.form {
            AdvForm::Saturating => l_adv.clone(),
            AdvForm::NonSaturating => z_s.neg()?.softplus()?.mean()?,
        };
        total = total.add(&term.scale(weights.lambda_adv)?)?;
    }
    if use_diff {
        total = total.add(&l_diff.scale(weights.lambda_diff)?)?;
    }
    Ok(StudentObjective {
        total,
        xent,
        l_adv,
        l_diff,
        j_s: j_s_live,
        disc_logits: (z_t, z_s),
    })
}

/// `p_t / (p_t + p_s)`: the discriminator maximising `L_adv` pointwise.
pub fn optimal_discriminator_oracle(p_teacher: f64, p_student: f64) -> Result<f64> {
    if p_teacher < 0.0 || p_student < 0.0 {
        return Err(Error::InvalidArgument("negative probability mass".into()));
    }
    if p_teacher == 0.0 && p_student == 0.0 {
        return Err(Error::BothZero);
    }
    Ok(p_teacher / (p_teacher + p_student))
}

/// `L_adv` under the optimal discriminator for two distributions over the
/// same finite set of gradient values (`0 log 0 = 0`).
pub fn adv_loss_at_optimum(p_teacher: &[f64], p_student: &[f64]) -> Result<f64> {
    if p_teacher.len() != p_student.len() {
        return Err(Error::shape("adv_loss_at_optimum", "support sizes differ"));
    }
    let mut total = 0.0;
    for (&pt, &ps) in p_teacher.iter().zip(p_student) {
        if pt == 0.0 && ps == 0.0 {
            continue;
        }
        let d = optimal_discriminator_oracle(pt, ps)?;
        if pt > 0.0 {
            total += pt * d.ln();
        }
        if ps > 0.0 {
            total += ps * (1.0 - d).ln();
        }
    }
    Ok(total)
}

/// Kullback-Leibler divergence in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl_divergence(p, &m) + 0.5 * kl_divergence(q, &m)
}

/// Fraction of correct discriminator calls (teacher > 0.5, student < 0.5).
pub fn discriminator_accuracy<T: Real>(z_t: &Tensor<T>, z_s: &Tensor<T>) -> f64 {
    let hits = z_t.data().iter().filter(|&&z| z > T::zero()).count()
        + z_s.data().iter().filter(|&&z| z < T::zero()).count();
    hits as f64 / (z_t.numel() + z_s.numel()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let z = t(&[1, 10], vec![0.3; 10]);
        let y = one_hot(&[4], 10).unwrap();
        let l = xent_logits(&z, &y).unwrap().item().unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn large_margin_gives_small_loss() {
        let mut v = vec![0.0; 10];
        v[2] = 20.0;
        let l = xent_logits(&t(&[1, 10], v), &one_hot(&[2], 10).unwrap()).unwrap();
        assert!(l.item().unwrap() < 1e-3);
    }

    #[test]
    fn batch_mean_reduction() {
        let z = t(&[2, 3], vec![0.1, 0.5, -0.2, 2.0, 0.0, 1.0]);
        let y = one_hot(&[0, 2], 3).unwrap();
        let both = xent_logits(&z, &y).unwrap().item().unwrap();
        let a = xent_logits(&t(&[1, 3], vec![0.1, 0.5, -0.2]), &one_hot(&[0], 3).unwrap()).unwrap().item().unwrap();
        let b = xent_logits(&t(&[1, 3], vec![2.0, 0.0, 1.0]), &one_hot(&[2], 3).unwrap()).unwrap().item().unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn linear_softmax_input_gradient_closed_form() {
        // f(x) = softmax(W^T x): J = W (softmax - y)
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::<f64>::build("linear", [2, 2, 1], 3, 7).unwrap();
        let x = t(&[2, 2, 2, 1], (0..8).map(|_| rng.gen()).collect()).with_grad();
        let y = one_hot(&[1, 2], 3).unwrap();
        let j = input_gradient(&m, &x, &y, false).unwrap();
        let w = m.params()[0].value().data();
        let b = m.params()[1].value().data();
        for s in 0..2 {
            let xs = &x.data()[s * 4..s * 4 + 4];
            let z: Vec<f64> = (0..3).map(|k| b[k] + (0..4).map(|d| xs[d] * w[d * 3 + k]).sum::<f64>()).collect();
            let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let sum: f64 = e.iter().sum();
            let r: Vec<f64> = (0..3).map(|k| e[k] / sum - y.data()[s * 3 + k]).collect();
            for d in 0..4 {
                let expect: f64 = (0..3).map(|k| w[d * 3 + k] * r[k]).sum();
                assert!((j.data()[s * 4 + d] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_gradient_scales_and_repeats() {
        let m = Model::<f64>::build("mlp", [3, 3, 1], 2, 2).unwrap();
        let x = t(&[2, 3, 3, 1], (0..18).map(|i| i as f64 / 18.0).collect()).with_grad();
        let y = one_hot(&[0, 1], 2).unwrap();
        let j1 = input_gradient(&m, &x, &y, false).unwrap();
        let j2 = input_gradient(&m, &x, &y, false).unwrap();
        assert_eq!(j1.data(), j2.data());
        let j3 = input_gradient_with(|x| m.logits(x), &x, &y, false).unwrap();
        assert_eq!(j1.data(), j3.data());
        // scaling the loss by c scales J by c
        let total = xent_per_sample(&m.logits(&x).unwrap(), &y).unwrap().sum().unwrap().scale(2.5).unwrap();
        let js = grad(&total, &[&x], false).unwrap().remove(0);
        for (a, b) in js.data().iter().zip(j1.data()) {
            assert!((a - 2.5 * b).abs() < 1e-14);
        }
        let not_leaf = x.detach();
        assert_eq!(input_gradient(&m, &not_leaf, &y, false).unwrap_err(), Error::GradDisabled);
    }

    #[test]
    fn adv_loss_reference_values() {
        let l = loss_adv_logits(&t(&[2, 1], vec![0.0, 0.0]), &t(&[2, 1], vec![0.0, 0.0])).unwrap();
        assert!((l.item().unwrap() + 4f64.ln()).abs() < 1e-15);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let l = loss_adv_logits(&t(&[1, 1], vec![logit(0.9)]), &t(&[1, 1], vec![logit(0.1)])).unwrap();
        assert!((l.item().unwrap() - 2.0 * 0.9f64.ln()).abs() < 1e-12);
        assert!((l.item().unwrap() + 0.21072).abs() < 1e-5);
        let l = loss_adv_logits(&t(&[1, 1], vec![40.0]), &t(&[1, 1], vec![-40.0])).unwrap().item().unwrap();
        assert!(l < 0.0 && l > -1e-15);
    }

    #[test]
    fn diff_loss_reference_values() {
        let a = t(&[1, 2], vec![3.0, 4.0]);
        let z = t(&[1, 2], vec![0.0, 0.0]);
        assert_eq!(loss_diff(&a, &a).unwrap().item().unwrap(), 0.0);
        assert_eq!(loss_diff(&a, &z).unwrap().item().unwrap(), 25.0);
        let a2 = a.scale(2.0).unwrap();
        assert_eq!(loss_diff(&a2, &z).unwrap().item().unwrap(), 100.0);
        assert!(loss_diff(&a, &t(&[2, 1], vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn oracle_values() {
        assert_eq!(optimal_discriminator_oracle(1.0, 1.0).unwrap(), 0.5);
        assert_eq!(optimal_discriminator_oracle(1.0, 0.0).unwrap(), 1.0);
        assert!((optimal_discriminator_oracle(0.2, 0.8).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(optimal_discriminator_oracle(0.0, 0.0).unwrap_err(), Error::BothZero);
    }

    fn setup() -> (Model<f64>, Model<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let student = Model::<f64>::build("mlp", [3, 3, 1], 2, 11).unwrap();
        let disc = Model::<f64>::build("disc-cnn-1", [3, 3, 1], 1, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = t(&[2, 3, 3, 1], (0..18).map(|_| rng.gen()).collect());
        let y = one_hot(&[1, 0], 2).unwrap();
        let jt = t(&[2, 3, 3, 1], (0..18).map(|_| rng.gen_range(-0.1..0.1)).collect());
        (student, disc, x, y, jt)
    }

    #[test]
    fn disabled_weights_reduce_to_xent() {
        let (s, d, x, y, jt) = setup();
        let o = student_objective(&s, &d, &x.with_grad(), &y, &jt, LossWeights::disabled(), &AdvOptions::default()).unwrap();
        assert_eq!(o.total.data(), xent(&s, &x, &y).unwrap().data());
    }

    #[test]
    fn diff_weighted_gradient_matches_central_differences() {
        // d/dtheta of xent + lambda * L_diff, with J_s inside, vs finite differences
        let (s, d, x, y, jt) = setup();
        let lambda = 3.0;
        let w_idx = 0;
        let f = |w: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut m = s.clone();
            m.params_mut()[w_idx].set(w.to_vec())?;
            let o = student_objective(&m, &d, &x.with_grad(), &y, &jt, LossWeights::new(0.0, lambda)?, &AdvOptions::default())?;
            Ok(o.total)
        };
        // analytic gradient w.r.t. the first weight matrix
        let o = student_objective(&s, &d, &x.with_grad(), &y, &jt, LossWeights::new(0.0, lambda).unwrap(), &AdvOptions::default()).unwrap();
        let w = s.params()[w_idx].value();
        let g = grad(&o.total, &[w], false).unwrap().remove(0);
        let gx = grad(&o.xent, &[w], false).unwrap().remove(0);
        let gd = grad(&o.l_diff, &[w], false).unwrap().remove(0);
        for i in 0..g.numel() {
            assert!((g.data()[i] - (gx.data()[i] + lambda * gd.data()[i])).abs() < 1e-12);
        }
        let eps = 1e-6;
        let base = w.to_vec();
        for i in 0..base.len() {
            let at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                f(&t(w.shape(), v)).unwrap().item().unwrap()
            };
            let num = (at(eps) - at(-eps)) / (2.0 * eps);
            let err = (g.data()[i] - num).abs() / g.data()[i].abs().max(1.0);
            assert!(err < 1e-3, "weight {i}: {} vs {num}", g.data()[i]);
        }
    }

    #[test]
    fn matched_gradients_at_chance_discriminator() {
        let (s, mut d, x, y, _) = setup();
        // zero the discriminator so D = 0.5 everywhere
        for p in d.params_mut() {
            let n = p.value().numel();
            p.set(vec![0.0; n]).unwrap();
        }
        let xl = x.with_grad();
        let jt = input_gradient(&s, &xl, &y, false).unwrap();
        let lam = 1.7;
        let o = student_objective(&s, &d, &x.with_grad(), &y, &jt, LossWeights::new(lam, 5.0).unwrap(), &AdvOptions::default()).unwrap();
        assert_eq!(o.l_diff.item().unwrap(), 0.0);
        let expect = o.xent.item().unwrap() + lam * (-(4f64).ln());
        assert!((o.total.item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn standardize_is_zero_mean_unit_variance() {
        let j = t(&[2, 2, 2, 1], vec![1., 2., 3., 4., -1., 0., 0., 5.]);
        let s = standardize(&j).unwrap();
        for row in s.data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
        let err = finite_difference_check(|x| standardize(x)?.square()?.mul(x)?.sum(), &j, 1e-6).unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn optimum_equals_two_js_minus_log4() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let q = [0.25, 0.25, 0.0, 0.5];
        let l = adv_loss_at_optimum(&p, &q).unwrap();
        assert!((l - (2.0 * js_divergence(&p, &q) - 4f64.ln())).abs() < 1e-12);
        assert!((adv_loss_at_optimum(&p, &p).unwrap() + 4f64.ln()).abs() < 1e-15);
    }
}
