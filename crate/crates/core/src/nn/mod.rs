//! Layers, model presets, parameter freezing and optimizers.

mod checkpoint;
mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::sparse::conv_out;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, write_params};
pub use optim::Sgd;

/// Named architecture preset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    /// Two conv blocks (3x3, 8 and 16 channels, each followed by 2x2 average
    /// pooling) and two dense layers; reduced-width analogue of the classic
    /// MNIST challenge network.
    MnistCnn2,
    /// Two stride-2 conv layers (8, 16 channels) and two dense layers.
    SmallCnn,
    /// One hidden dense layer of 32 units.
    Mlp,
    /// Single dense layer.
    Linear,
    /// Three conv layers (8, 16, 32 channels; the last two stride 2), global
    /// average pooling and a dense head; accepts any input resolution the
    /// convs fit.
    GapCnn,
    /// `depth` stride-2 conv layers with channels doubling from
    /// `2^(depth-1)`, then a dense layer to one sigmoid unit. Depth 4 gives
    /// 8-16-32-64 and depth 5 gives 16-32-64-128-256.
    Disc { depth: usize },
}

impl Arch {
    pub fn parse(preset: &str) -> Result<Self> {
        Ok(match preset {
            "mnist-cnn2" => Arch::MnistCnn2,
            "small-cnn" => Arch::SmallCnn,
            "mlp" => Arch::Mlp,
            "linear" => Arch::Linear,
            "gap-cnn" => Arch::GapCnn,
            other => match other.strip_prefix("disc-cnn-").map(str::parse::<usize>) {
                Some(Ok(depth)) if (1..=8).contains(&depth) => Arch::Disc { depth },
                _ => return Err(Error::UnknownPreset(other.to_string())),
            },
        })
    }

    pub fn preset(&self) -> String {
        match self {
            Arch::MnistCnn2 => "mnist-cnn2".into(),
            Arch::SmallCnn => "small-cnn".into(),
            Arch::Mlp => "mlp".into(),
            Arch::Linear => "linear".into(),
            Arch::GapCnn => "gap-cnn".into(),
            Arch::Disc { depth } => format!("disc-cnn-{depth}"),
        }
    }

    pub fn is_discriminator(&self) -> bool {
        matches!(self, Arch::Disc { .. })
    }

    fn layers(&self, num_classes: usize) -> Vec<LayerSpec> {
        use LayerSpec::*;
        match self {
            Arch::MnistCnn2 => vec![
                Conv { out: 8, k: 3, stride: 1, pad: 1 },
                Relu,
                AvgPool { k: 2, stride: 2 },
                Conv { out: 16, k: 3, stride: 1, pad: 1 },
                Relu,
                AvgPool { k: 2, stride: 2 },
                Flatten,
                Dense { out: 64 },
                Relu,
                Dense { out: num_classes },
            ],
            Arch::SmallCnn => vec![
                Conv { out: 8, k: 3, stride: 2, pad: 1 },
                Relu,
                Conv { out: 16, k: 3, stride: 2, pad: 1 },
                Relu,
                Flatten,
                Dense { out: 32 },
                Relu,
                Dense { out: num_classes },
            ],
            Arch::Mlp => vec![Flatten, Dense { out: 32 }, Relu, Dense { out: num_classes }],
            Arch::Linear => vec![Flatten, Dense { out: num_classes }],
            Arch::GapCnn => vec![
                Conv { out: 8, k: 3, stride: 1, pad: 1 },
                Relu,
                Conv { out: 16, k: 3, stride: 2, pad: 1 },
                Relu,
                Conv { out: 32, k: 3, stride: 2, pad: 1 },
                Relu,
                GlobalAvgPool,
                Dense { out: num_classes },
            ],
            Arch::Disc { depth } => {
                let mut v = Vec::new();
                for i in 0..*depth {
                    v.push(Conv { out: 1 << (depth - 1 + i), k: 3, stride: 2, pad: 1 });
                    v.push(Relu);
                }
                v.extend([Flatten, Dense { out: 1 }, Sigmoid]);
                v
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerSpec {
    Conv { out: usize, k: usize, stride: usize, pad: usize },
    Dense { out: usize },
    Relu,
    AvgPool { k: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Sigmoid,
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    // indices into `Model::params` (weight, bias)
    params: Vec<usize>,
}

/// A named parameter tensor with its freeze flag.
#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub name: String,
    value: Tensor<T>,
    frozen: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Param {
            name: name.into(),
            value: Tensor::leaf(shape, data, true)?,
            frozen: false,
        })
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Replaces the values; the new leaf requires grad unless frozen.
    pub fn set(&mut self, data: Vec<T>) -> Result<()> {
        self.value = Tensor::leaf(self.value.shape(), data, !self.frozen)?;
        Ok(())
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.value = if frozen {
            self.value.detach()
        } else {
            self.value.with_grad()
        };
    }
}

fn he_uniform<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::lit(rng.gen_range(-limit..limit))).collect()
}

/// Sequential differentiable model.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub name: String,
    arch: Arch,
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
}

impl<T: Real> Model<T> {
    /// Builds `preset` for NHWC samples of `input_shape = [h, w, c]`,
    /// initialised deterministically from `seed`.
    pub fn build(preset: &str, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Self> {
        let arch = Arch::parse(preset)?;
        if arch.is_discriminator() && num_classes != 1 {
            return Err(Error::IncompatibleShape(format!(
                "discriminator presets have one output, requested {num_classes}"
            )));
        }
        if num_classes == 0 || input_shape.contains(&0) {
            return Err(Error::IncompatibleShape(format!(
                "input {input_shape:?}, {num_classes} classes"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut params = Vec::new();
        let [mut h, mut w, mut c] = input_shape;
        let mut flat: Option<usize> = None;
        for (i, spec) in arch.layers(num_classes).into_iter().enumerate() {
            let mut idx = Vec::new();
            match spec {
                LayerSpec::Conv { out, k, stride, pad } => {
                    if flat.is_some() {
                        return Err(Error::IncompatibleShape("conv after flatten".into()));
                    }
                    let (Some(oh), Some(ow)) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad))
                    else {
                        return Err(Error::IncompatibleShape(format!(
                            "{preset}: layer {i} kernel {k} exceeds {h}x{w}"
                        )));
                    };
                    let fan_in = k * k * c;
                    idx.push(params.len());
                    params.push(Param::new(format!("l{i}.conv.weight"), &[k, k, c, out], he_uniform(&mut rng, fan_in, fan_in * out))?);
                    idx.push(params.len());
                    params.push(Param::new(format!("l{i}.conv.bias"), &[out], vec![T::zero(); out])?);
                    (h, w, c) = (oh, ow, out);
                }
                LayerSpec::AvgPool { k, stride } => {
                    let (Some(oh), Some(ow)) = (conv_out(h, k, stride, 0), conv_out(w, k, stride, 0)) else {
                        return Err(Error::IncompatibleShape(format!(
                            "{preset}: pooling window exceeds {h}x{w}"
                        )));
                    };
                    (h, w) = (oh, ow);
                }
                LayerSpec::GlobalAvgPool => {
                    flat = Some(c);
                }
                LayerSpec::Flatten => {
                    flat = Some(flat.unwrap_or(h * w * c));
                }
                LayerSpec::Dense { out } => {
                    let fan_in = flat.ok_or_else(|| Error::IncompatibleShape("dense before flatten".into()))?;
                    idx.push(params.len());
                    params.push(Param::new(format!("l{i}.dense.weight"), &[fan_in, out], he_uniform(&mut rng, fan_in, fan_in * out))?);
                    idx.push(params.len());
                    params.push(Param::new(format!("l{i}.dense.bias"), &[out], vec![T::zero(); out])?);
                    flat = Some(out);
                }
                LayerSpec::Relu | LayerSpec::Sigmoid => {}
            }
            layers.push(Layer { spec, params: idx });
        }
        Ok(Model {
            name: preset.to_string(),
            arch,
            input_shape,
            num_classes,
            layers,
            params,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Leaf tensors of all unfrozen parameters, in parameter order.
    pub fn trainable(&self) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.clone())
            .collect()
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.set_frozen(true);
        }
    }

    fn run(&self, x: &Tensor<T>, upto: usize) -> Result<Tensor<T>> {
        let [h, w, c] = self.input_shape;
        match x.shape() {
            [_, xh, xw, xc] if [*xh, *xw, *xc] == [h, w, c] => {}
            s => {
                return Err(Error::shape(
                    "model input",
                    format!("expected [n, {h}, {w}, {c}], got {s:?}"),
                ))
            }
        }
        let mut a = x.clone();
        for layer in &self.layers[..upto] {
            let p = |i: usize| self.params[layer.params[i]].value();
            a = match layer.spec {
                LayerSpec::Conv { stride, pad, .. } => a.conv2d(p(0), stride, pad)?.add_row_bias(p(1))?,
                LayerSpec::Dense { .. } => a.matmul(p(0))?.add_row_bias(p(1))?,
                LayerSpec::Relu => a.relu()?,
                LayerSpec::AvgPool { k, stride } => a.avg_pool2d(k, stride)?,
                LayerSpec::GlobalAvgPool => a.global_avg_pool()?,
                LayerSpec::Flatten => a.flatten()?,
                LayerSpec::Sigmoid => a.sigmoid()?,
            };
        }
        Ok(a)
    }

    /// Full forward pass (class logits, or a probability for
    /// discriminators).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, self.layers.len())
    }

    /// Pre-activation output: drops a trailing sigmoid.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let end = match self.layers.last() {
            Some(Layer { spec: LayerSpec::Sigmoid, .. }) => self.layers.len() - 1,
            _ => self.layers.len(),
        };
        self.run(x, end)
    }

    fn logit_layer(&self) -> Result<usize> {
        let last = self
            .layers
            .iter()
            .rposition(|l| l.spec != LayerSpec::Sigmoid)
            .ok_or(Error::NoLogitLayer)?;
        match self.layers[last].spec {
            LayerSpec::Dense { .. } => Ok(last),
            _ => Err(Error::NoLogitLayer),
        }
    }

    /// Hidden features feeding the logit layer.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, self.logit_layer()?)
    }

    /// Freezes every parameter and swaps in a freshly initialised logit
    /// layer with `num_classes` outputs, the only trainable part afterwards.
    pub fn freeze_all_but_logits(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        let li = self.logit_layer()?;
        if num_classes == 0 {
            return Err(Error::IncompatibleShape("zero classes".into()));
        }
        self.freeze_all();
        let (wi, bi) = (self.layers[li].params[0], self.layers[li].params[1]);
        let fan_in = self.params[wi].shape()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params[wi] = Param::new(
            self.params[wi].name.clone(),
            &[fan_in, num_classes],
            he_uniform(&mut rng, fan_in, fan_in * num_classes),
        )?;
        self.params[bi] = Param::new(self.params[bi].name.clone(), &[num_classes], vec![T::zero(); num_classes])?;
        self.layers[li].spec = LayerSpec::Dense { out: num_classes };
        self.num_classes = num_classes;
        Ok(())
    }

    /// Plain gradient descent `p <- p - lr * g` on the unfrozen parameters;
    /// `grads` aligns with [`Model::trainable`].
    pub fn sgd_step(&mut self, grads: &[Tensor<T>], lr: T) -> Result<()> {
        let mut gi = grads.iter();
        for p in self.params.iter_mut().filter(|p| !p.frozen) {
            let g = gi
                .next()
                .ok_or_else(|| Error::shape("sgd_step", "fewer gradients than parameters"))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("sgd_step", format!("{}: {:?} vs {:?}", p.name, g.shape(), p.shape())));
            }
            let next = p.value.data().iter().zip(g.data()).map(|(&v, &d)| v - lr * d).collect();
            p.set(next)?;
        }
        if gi.next().is_some() {
            return Err(Error::shape("sgd_step", "more gradients than parameters"));
        }
        Ok(())
    }

    /// FNV-1a digest over parameter names, shapes and bit patterns.
    pub fn param_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in p.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Owned, thread-transferable copy of the model.
    pub fn snapshot(&self) -> ModelSnapshot<T> {
        ModelSnapshot {
            name: self.name.clone(),
            preset: self.arch.preset(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            params: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.shape().to_vec(), p.value.to_vec(), p.frozen))
                .collect(),
        }
    }
}

/// Plain-data copy of a [`Model`] that can cross thread boundaries.
#[derive(Debug, Clone)]
pub struct ModelSnapshot<T: Real> {
    name: String,
    preset: String,
    input_shape: [usize; 3],
    num_classes: usize,
    params: Vec<(String, Vec<usize>, Vec<T>, bool)>,
}

impl<T: Real> ModelSnapshot<T> {
    pub fn restore(&self) -> Result<Model<T>> {
        let mut m = Model::build(&self.preset, self.input_shape, self.num_classes, 0)?;
        m.name = self.name.clone();
        for (p, (name, shape, data, frozen)) in m.params.iter_mut().zip(&self.params) {
            *p = Param::new(name.clone(), shape, data.clone())?;
            p.set_frozen(*frozen);
        }
        Ok(m)
    }
}
