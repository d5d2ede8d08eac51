use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Model, Param};
use crate::scalar::Real;

/// SGD with heavy-ball momentum: `v <- mu * v + g; p <- p - lr * v`.
///
/// Velocity buffers are keyed by parameter name, so one optimizer may drive
/// parameters from several owners (a model plus an input adapter).
#[derive(Debug, Clone)]
pub struct Sgd<T: Real> {
    pub lr: T,
    pub momentum: T,
    /// When set, a model step whose global gradient norm exceeds this is
    /// rescaled to it first.
    pub clip_norm: Option<T>,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Sgd {
            lr,
            momentum,
            clip_norm: None,
            velocity: BTreeMap::new(),
        }
    }

    pub fn with_clip(mut self, clip_norm: Option<T>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    /// Updates one parameter; `sign` is `1` for descent and `-1` for ascent.
    pub fn update(&mut self, param: &mut Param<T>, grad: &Tensor<T>, sign: T) -> Result<()> {
        if param.is_frozen() {
            return Ok(());
        }
        if grad.shape() != param.shape() {
            return Err(Error::shape(
                "sgd",
                format!("{}: {:?} vs {:?}", param.name, grad.shape(), param.shape()),
            ));
        }
        let g = grad.data();
        let step: Vec<T> = if self.momentum == T::zero() {
            g.to_vec()
        } else {
            let v = self
                .velocity
                .entry(param.name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = self.momentum * *vi + gi;
            }
            v.clone()
        };
        let lr = self.lr * sign;
        let next = param
            .value()
            .data()
            .iter()
            .zip(&step)
            .map(|(&p, &s)| p - lr * s)
            .collect();
        param.set(next)
    }

    fn apply(&mut self, model: &mut Model<T>, grads: &[Tensor<T>], sign: T) -> Result<()> {
        let scaled;
        let grads = match self.clip_norm {
            Some(c) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data().iter())
                    .fold(T::zero(), |a, &v| a + v * v)
                    .sqrt();
                if norm > c {
                    let k = c / norm;
                    scaled = grads
                        .iter()
                        .map(|g| Tensor::from_vec(g.shape(), g.data().iter().map(|&v| v * k).collect()))
                        .collect::<Result<Vec<_>>>()?;
                    &scaled[..]
                } else {
                    grads
                }
            }
            None => grads,
        };
        let mut gi = grads.iter();
        for p in model.params_mut().iter_mut().filter(|p| !p.is_frozen()) {
            let g = gi
                .next()
                .ok_or_else(|| Error::shape("sgd", "fewer gradients than parameters"))?;
            self.update(p, g, sign)?;
        }
        if gi.next().is_some() {
            return Err(Error::shape("sgd", "more gradients than parameters"));
        }
        Ok(())
    }

    /// Descent step on the model's trainable parameters.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Tensor<T>]) -> Result<()> {
        self.apply(model, grads, T::one())
    }

    /// Ascent step (maximisation) on the model's trainable parameters.
    pub fn ascend(&mut self, model: &mut Model<T>, grads: &[Tensor<T>]) -> Result<()> {
        self.apply(model, grads, -T::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut p = Param::new("p", &[1], vec![1.0f64]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.9);
        opt.update(&mut p, &g, 1.0).unwrap();
        opt.update(&mut p, &g, 1.0).unwrap();
        // v1 = 1, v2 = 1.9; p = 1 - 0.1 - 0.19
        assert!((p.value().data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn clip_rescales_global_norm() {
        let mut m = Model::<f64>::build("linear", [1, 1, 2], 1, 0).unwrap();
        let before: Vec<Vec<f64>> = m.params().iter().map(|p| p.value().data().to_vec()).collect();
        let grads: Vec<Tensor<f64>> = m
            .params()
            .iter()
            .map(|p| Tensor::full(p.shape(), 3.0).unwrap())
            .collect();
        let n = m.params().iter().map(|p| p.value().data().len()).sum::<usize>() as f64;
        let mut opt = Sgd::new(1.0, 0.0).with_clip(Some(1.0));
        opt.step(&mut m, &grads).unwrap();
        let moved: f64 = m
            .params()
            .iter()
            .zip(&before)
            .flat_map(|(p, b)| p.value().data().iter().zip(b).map(|(a, b)| (a - b) * (a - b)).collect::<Vec<_>>())
            .sum();
        assert!((moved.sqrt() - 1.0).abs() < 1e-12, "{moved} over {n} entries");
    }

    #[test]
    fn ascent_moves_uphill_and_frozen_stays() {
        let mut p = Param::new("p", &[1], vec![1.0f64]).unwrap();
        let g = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0);
        opt.update(&mut p, &g, -1.0).unwrap();
        assert!((p.value().data()[0] - 1.2).abs() < 1e-15);
        p.set_frozen(true);
        opt.update(&mut p, &g, 1.0).unwrap();
        assert!((p.value().data()[0] - 1.2).abs() < 1e-15);
    }
}
