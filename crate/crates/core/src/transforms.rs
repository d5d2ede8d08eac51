//! Affine adapters `x' = A x + b` from the student's (target) image shape to
//! the teacher's (source) input shape. Every fixed kind is a sparse linear map
//! with `b = 0`; the transpose-convolution adapter carries trainable weights
//! and a bias.

use rand::Rng;

use crate::autodiff::sparse::{self, Hwc, SparseMap};
use crate::autodiff::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::scalar::Real;

/// Transform kinds. `Composite` children run in order, first child first.
#[derive(Debug, Clone)]
pub enum TransformKind<T: Real> {
    Identity,
    /// `factor x factor` average pooling with stride `factor`.
    AvgPoolResize { factor: usize },
    /// Bilinear resize (up or down), half-pixel grid.
    BilinearResize,
    CenterCrop,
    CenterPad,
    /// Zero padding at an offset `(top, left)`; `None` until resolved.
    RandomPad { offset: Option<(usize, usize)> },
    /// Mean over channels, producing one channel.
    ChannelAverage,
    /// 3x3 stride-2 transpose convolution with bias.
    TransposeConv {
        weight: Param<T>,
        bias: Param<T>,
        out_pad: usize,
    },
    Composite(Vec<InputTransform<T>>),
}

#[derive(Debug, Clone)]
pub struct InputTransform<T: Real> {
    kind: TransformKind<T>,
    /// Student image shape `[h, w, c]` (input side).
    target_shape: [usize; 3],
    /// Teacher input shape `[h, w, c]` (output side).
    source_shape: [usize; 3],
}

/// Dense affine form: `a` is `rows x cols`, row-major, with
/// `rows = |source|` and `cols = |target|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<T>,
    pub b: Vec<T>,
}

fn geom(s: [usize; 3]) -> Hwc {
    Hwc::new(s[0], s[1], s[2])
}

fn incompatible(kind: &str, target: [usize; 3], source: [usize; 3]) -> Error {
    Error::IncompatibleShape(format!("{kind}: cannot map {target:?} to {source:?}"))
}

/// Bilinear stride-2 upsampling kernel taps for a 3-tap transpose filter.
const TAPS: [f64; 3] = [0.5, 1.0, 0.5];

impl<T: Real> InputTransform<T> {
    /// Builds a transform from a kind name. Composite kinds join names with
    /// `+`, e.g. `channel_average+center_crop`. A transpose-conv adapter starts
    /// as bilinear-style upsampling.
    pub fn build(kind: &str, target_shape: [usize; 3], source_shape: [usize; 3]) -> Result<Self> {
        let parts: Vec<&str> = kind.split('+').map(str::trim).collect();
        if parts.len() == 1 {
            return Self::single(parts[0], target_shape, source_shape);
        }
        let mut children = Vec::with_capacity(parts.len());
        let mut shape = target_shape;
        for (i, part) in parts.iter().enumerate() {
            let out = if i + 1 == parts.len() {
                source_shape
            } else {
                Self::intermediate(part, shape, source_shape)?
            };
            children.push(Self::single(part, shape, out)?);
            shape = out;
        }
        Ok(InputTransform {
            kind: TransformKind::Composite(children),
            target_shape,
            source_shape,
        })
    }

    fn intermediate(kind: &str, input: [usize; 3], source: [usize; 3]) -> Result<[usize; 3]> {
        Ok(match kind {
            "identity" => input,
            "channel_average" => [input[0], input[1], 1],
            "avgpool_resize" | "bilinear_resize" | "bilinear_upsize" | "center_crop" | "center_pad" | "random_pad" => {
                [source[0], source[1], input[2]]
            }
            "transpose_conv" => source,
            other => return Err(Error::InvalidArgument(format!("unknown transform kind '{other}'"))),
        })
    }

    fn single(kind: &str, target: [usize; 3], source: [usize; 3]) -> Result<Self> {
        let [th, tw, tc] = target;
        let [sh, sw, sc] = source;
        let same_c = tc == sc;
        let bad = || incompatible(kind, target, source);
        let kind = match kind {
            "identity" if target == source => TransformKind::Identity,
            "avgpool_resize" => {
                let f = th / sh.max(1);
                if !same_c || f == 0 || sh * f != th || sw * f != tw {
                    return Err(bad());
                }
                TransformKind::AvgPoolResize { factor: f }
            }
            "bilinear_resize" | "bilinear_upsize" if same_c => TransformKind::BilinearResize,
            "center_crop" if same_c && th >= sh && tw >= sw => TransformKind::CenterCrop,
            "center_pad" if same_c && th <= sh && tw <= sw => TransformKind::CenterPad,
            "random_pad" if same_c && th <= sh && tw <= sw => TransformKind::RandomPad { offset: None },
            "channel_average" if th == sh && tw == sw && sc == 1 => TransformKind::ChannelAverage,
            "transpose_conv" => {
                // output size (t - 1) * 2 - 2 + 3 + out_pad
                let out_pad = (sh + 1).checked_sub(2 * th).ok_or_else(bad)?;
                if out_pad > 1 || sw + 1 != 2 * tw + out_pad {
                    return Err(bad());
                }
                let mut w = vec![0.0; 9 * sc * tc];
                for ki in 0..3 {
                    for kj in 0..3 {
                        for o in 0..sc {
                            for i in 0..tc {
                                let mix = if same_c { f64::from(u8::from(o == i)) } else { 1.0 / tc as f64 };
                                w[((ki * 3 + kj) * sc + o) * tc + i] = TAPS[ki] * TAPS[kj] * mix;
                            }
                        }
                    }
                }
                TransformKind::TransposeConv {
                    weight: Param::new("adapter.tconv.weight", &[3, 3, sc, tc], w.into_iter().map(T::lit).collect())?,
                    bias: Param::new("adapter.tconv.bias", &[sc], vec![T::zero(); sc])?,
                    out_pad,
                }
            }
            "identity" | "bilinear_resize" | "bilinear_upsize" | "center_crop" | "center_pad" | "random_pad"
            | "channel_average" => return Err(bad()),
            other => return Err(Error::InvalidArgument(format!("unknown transform kind '{other}'"))),
        };
        Ok(InputTransform {
            kind,
            target_shape: target,
            source_shape: source,
        })
    }

    pub fn kind(&self) -> &TransformKind<T> {
        &self.kind
    }

    pub fn kind_name(&self) -> String {
        match &self.kind {
            TransformKind::Identity => "identity".into(),
            TransformKind::AvgPoolResize { .. } => "avgpool_resize".into(),
            TransformKind::BilinearResize => "bilinear_resize".into(),
            TransformKind::CenterCrop => "center_crop".into(),
            TransformKind::CenterPad => "center_pad".into(),
            TransformKind::RandomPad { .. } => "random_pad".into(),
            TransformKind::ChannelAverage => "channel_average".into(),
            TransformKind::TransposeConv { .. } => "transpose_conv".into(),
            TransformKind::Composite(c) => c.iter().map(|t| t.kind_name()).collect::<Vec<_>>().join("+"),
        }
    }

    pub fn target_shape(&self) -> [usize; 3] {
        self.target_shape
    }

    pub fn source_shape(&self) -> [usize; 3] {
        self.source_shape
    }

    /// True once no random offset is left unresolved.
    pub fn is_resolved(&self) -> bool {
        match &self.kind {
            TransformKind::RandomPad { offset } => offset.is_some(),
            TransformKind::Composite(c) => c.iter().all(Self::is_resolved),
            _ => true,
        }
    }

    /// Fixed sparse map for non-trainable kinds.
    fn sparse_map(&self) -> Result<Option<SparseMap>> {
        let t = geom(self.target_shape);
        let [sh, sw, _] = self.source_shape;
        let bad = || incompatible(&self.kind_name(), self.target_shape, self.source_shape);
        Ok(Some(match &self.kind {
            TransformKind::AvgPoolResize { factor } => sparse::avg_pool(t, *factor, *factor).ok_or_else(bad)?,
            TransformKind::BilinearResize => sparse::bilinear(t, sh, sw),
            TransformKind::CenterCrop => sparse::crop(t, (t.h - sh) / 2, (t.w - sw) / 2, sh, sw).ok_or_else(bad)?,
            TransformKind::CenterPad => sparse::pad(t, (sh - t.h) / 2, (sw - t.w) / 2, sh, sw).ok_or_else(bad)?,
            TransformKind::RandomPad { offset } => {
                let (top, left) = offset.ok_or(Error::Unresolved)?;
                sparse::pad(t, top, left, sh, sw).ok_or_else(bad)?
            }
            TransformKind::ChannelAverage => sparse::channel_average(t),
            _ => return Ok(None),
        }))
    }

    /// Maps an NHWC batch of target-shaped images to the teacher's shape,
    /// keeping the graph so gradients reach the target pixels.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.target_shape {
            return Err(Error::shape(
                "transform",
                format!("expected [n, {:?}], got {:?}", self.target_shape, s),
            ));
        }
        match &self.kind {
            TransformKind::Identity => Ok(x.clone()),
            TransformKind::Composite(children) => children.iter().try_fold(x.clone(), |acc, c| c.apply(&acc)),
            TransformKind::TransposeConv { weight, bias, out_pad } => {
                let n = s[0];
                let [sh, sw, sc] = self.source_shape;
                x.transpose_conv2d(weight.value(), 2, 1, *out_pad)?
                    .reshape(&[n * sh * sw, sc])?
                    .add_row_bias(bias.value())?
                    .reshape(&[n, sh, sw, sc])
            }
            _ => {
                let map = self.sparse_map()?.ok_or(Error::Unreachable)?;
                x.apply_map(&map, &self.source_shape)
            }
        }
    }

    /// Dense `(A, b)` with `apply(x) == A x + b` on flattened samples.
    pub fn materialize_affine(&self) -> Result<Affine<T>> {
        if !self.is_resolved() {
            return Err(Error::Unresolved);
        }
        let cols: usize = self.target_shape.iter().product();
        let rows: usize = self.source_shape.iter().product();
        no_grad(|| {
            let zero = Tensor::zeros(&[1, self.target_shape[0], self.target_shape[1], self.target_shape[2]])?;
            let b = self.apply(&zero)?.to_vec();
            let mut basis = vec![T::zero(); cols * cols];
            for i in 0..cols {
                basis[i * cols + i] = T::one();
            }
            let mut shape = vec![cols];
            shape.extend_from_slice(&self.target_shape);
            let out = self.apply(&Tensor::from_vec(&shape, basis)?)?;
            let mut a = vec![T::zero(); rows * cols];
            for (i, col) in out.data().chunks(rows).enumerate() {
                for r in 0..rows {
                    a[r * cols + i] = col[r] - b[r];
                }
            }
            Ok(Affine { rows, cols, a, b })
        })
    }

    /// Resolves every random offset in this transform (nested ones included)
    /// with fresh uniform draws; other kinds are returned unchanged.
    pub fn resolve<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let kind = match &self.kind {
            TransformKind::RandomPad { .. } => {
                let dh = self.source_shape[0] - self.target_shape[0];
                let dw = self.source_shape[1] - self.target_shape[1];
                TransformKind::RandomPad {
                    offset: Some((rng.gen_range(0..=dh), rng.gen_range(0..=dw))),
                }
            }
            TransformKind::Composite(c) => TransformKind::Composite(c.iter().map(|t| t.resolve(rng)).collect()),
            other => other.clone(),
        };
        InputTransform { kind, ..self.clone() }
    }

    /// Draws a placement uniformly over all valid offsets (independently per
    /// axis) for a `random_pad` transform.
    pub fn sample_random_pad_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        match self.kind {
            TransformKind::RandomPad { .. } => Ok(self.resolve(rng)),
            _ => Err(Error::WrongKind {
                expected: "random_pad",
                found: self.kind_name(),
            }),
        }
    }

    /// Crop window `(top, left, h, w)` in target coordinates, if this is a
    /// center crop or a composite whose crop sees target-sized images.
    fn crop_window(&self) -> Option<(usize, usize, usize, usize)> {
        match &self.kind {
            TransformKind::CenterCrop => {
                let [th, tw, _] = self.target_shape;
                let [sh, sw, _] = self.source_shape;
                Some(((th - sh) / 2, (tw - sw) / 2, sh, sw))
            }
            TransformKind::Composite(c) => c.iter().find_map(|t| {
                let same_grid = t.target_shape[..2] == self.target_shape[..2];
                if same_grid {
                    t.crop_window()
                } else {
                    None
                }
            }),
            _ => None,
        }
    }

    /// Restricts a batch of target-space gradients to the crop window, so the
    /// structurally zero border of a cropped teacher's gradient is removed.
    pub fn crop_for_discriminator(&self, j: &Tensor<T>) -> Result<Tensor<T>> {
        let (top, left, h, w) = self.crop_window().ok_or_else(|| Error::WrongKind {
            expected: "center_crop",
            found: self.kind_name(),
        })?;
        j.slice2d(top, left, h, w)
    }

    /// Shape a discriminator sees after `crop_for_discriminator` (or the
    /// target shape when the transform does not crop).
    pub fn discriminator_shape(&self) -> [usize; 3] {
        match self.crop_window() {
            Some((_, _, h, w)) => [h, w, self.target_shape[2]],
            None => self.target_shape,
        }
    }

    pub fn crops(&self) -> bool {
        self.crop_window().is_some()
    }

    /// Trainable adapter parameters (transpose-conv weight and bias).
    pub fn params(&self) -> Vec<&Param<T>> {
        match &self.kind {
            TransformKind::TransposeConv { weight, bias, .. } => vec![weight, bias],
            TransformKind::Composite(c) => c.iter().flat_map(|t| t.params()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match &mut self.kind {
            TransformKind::TransposeConv { weight, bias, .. } => vec![weight, bias],
            TransformKind::Composite(c) => c.iter_mut().flat_map(|t| t.params_mut()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            p.set_frozen(true);
        }
    }

    /// Leaves of the unfrozen adapter parameters.
    pub fn trainable(&self) -> Vec<Tensor<T>> {
        self.params()
            .into_iter()
            .filter(|p| !p.is_frozen())
            .map(|p| p.value().clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Tf = InputTransform<f64>;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn with_bias(mut t: Tf) -> Tf {
        for p in t.params_mut().into_iter().filter(|p| p.name.ends_with("bias")) {
            let n = p.value().numel();
            p.set((0..n).map(|i| 0.1 + i as f64).collect()).unwrap();
        }
        t
    }

    fn all_kinds() -> Vec<Tf> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        vec![
            Tf::build("identity", [4, 4, 2], [4, 4, 2]).unwrap(),
            Tf::build("avgpool_resize", [6, 4, 2], [3, 2, 2]).unwrap(),
            Tf::build("bilinear_resize", [3, 4, 2], [6, 8, 2]).unwrap(),
            Tf::build("bilinear_resize", [5, 4, 1], [3, 2, 1]).unwrap(),
            Tf::build("center_crop", [6, 5, 2], [3, 3, 2]).unwrap(),
            Tf::build("center_pad", [3, 3, 2], [6, 5, 2]).unwrap(),
            Tf::build("random_pad", [3, 2, 2], [5, 5, 2]).unwrap().resolve(&mut rng),
            Tf::build("channel_average", [3, 3, 3], [3, 3, 1]).unwrap(),
            with_bias(Tf::build("transpose_conv", [3, 3, 2], [6, 6, 3]).unwrap()),
            with_bias(Tf::build("transpose_conv", [3, 3, 1], [5, 5, 1]).unwrap()),
            Tf::build("channel_average+center_crop", [6, 6, 3], [4, 4, 1]).unwrap(),
        ]
    }

    fn affine_apply(aff: &Affine<f64>, x: &[f64]) -> Vec<f64> {
        (0..aff.rows)
            .map(|r| aff.b[r] + (0..aff.cols).map(|c| aff.a[r * aff.cols + c] * x[c]).sum::<f64>())
            .collect()
    }

    #[test]
    fn apply_matches_materialized_affine() {
        for (i, t) in all_kinds().into_iter().enumerate() {
            let aff = t.materialize_affine().unwrap();
            let ts = t.target_shape();
            let x = random(&[2, ts[0], ts[1], ts[2]], i as u64);
            let y = t.apply(&x).unwrap();
            assert_eq!(&y.shape()[1..], &t.source_shape());
            for s in 0..2 {
                let xs = &x.data()[s * aff.cols..(s + 1) * aff.cols];
                let expect = affine_apply(&aff, xs);
                for (a, b) in y.data()[s * aff.rows..(s + 1) * aff.rows].iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-12, "{}", t.kind_name());
                }
            }
            let zero_bias = !matches!(t.kind(), TransformKind::TransposeConv { .. });
            assert_eq!(zero_bias, aff.b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradient_is_adjoint_of_affine() {
        for (i, t) in all_kinds().into_iter().enumerate() {
            let aff = t.materialize_affine().unwrap();
            let ts = t.target_shape();
            let ss = t.source_shape();
            let x = random(&[1, ts[0], ts[1], ts[2]], 10 + i as u64).with_grad();
            let v = random(&[1, ss[0], ss[1], ss[2]], 20 + i as u64);
            let s = t.apply(&x).unwrap().mul(&v).unwrap().sum().unwrap();
            let g = grad(&s, &[&x], false).unwrap().remove(0);
            for c in 0..aff.cols {
                let at_v: f64 = (0..aff.rows).map(|r| aff.a[r * aff.cols + c] * v.data()[r]).sum();
                assert!((g.data()[c] - at_v).abs() < 1e-10, "{}", t.kind_name());
            }
        }
    }

    #[test]
    fn reference_examples() {
        // constant image survives average pooling
        let t = Tf::build("avgpool_resize", [4, 4, 1], [2, 2, 1]).unwrap();
        let y = t.apply(&Tensor::full(&[1, 4, 4, 1], 0.37).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        let t = Tf::build("avgpool_resize", [2, 2, 1], [1, 1, 1]).unwrap();
        assert_eq!(t.materialize_affine().unwrap().a, vec![0.25; 4]);

        // RGB mean
        let t = Tf::build("channel_average", [1, 1, 3], [1, 1, 1]).unwrap();
        let y = t.apply(&Tensor::from_vec(&[1, 1, 1, 3], vec![0.3, 0.6, 0.9]).unwrap()).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);

        // identity
        let t = Tf::build("identity", [2, 2, 1], [2, 2, 1]).unwrap();
        let aff = t.materialize_affine().unwrap();
        let eye: Vec<f64> = (0..16).map(|k| if k % 5 == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!((aff.a, aff.b), (eye, vec![0.0; 4]));

        // 1-D center pad 2 -> 4: identity with a zero row before and after
        let t = Tf::build("center_pad", [1, 2, 1], [1, 4, 1]).unwrap();
        let aff = t.materialize_affine().unwrap();
        assert_eq!(aff.a, vec![0., 0., 1., 0., 0., 1., 0., 0.]);
    }

    #[test]
    fn center_crop_is_row_truncated_identity() {
        let t = Tf::build("center_crop", [32, 32, 1], [28, 28, 1]).unwrap();
        let aff = t.materialize_affine().unwrap();
        for r in 0..28 * 28 {
            let (i, j) = (r / 28, r % 28);
            let keep = (i + 2) * 32 + j + 2;
            for c in 0..32 * 32 {
                assert_eq!(aff.a[r * 1024 + c], if c == keep { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn avgpool_equals_bilinear_halving() {
        let a = Tf::build("avgpool_resize", [8, 6, 2], [4, 3, 2]).unwrap();
        let b = Tf::build("bilinear_resize", [8, 6, 2], [4, 3, 2]).unwrap();
        let x = random(&[3, 8, 6, 2], 5);
        assert_eq!(a.apply(&x).unwrap().data(), b.apply(&x).unwrap().data());
    }

    #[test]
    fn bilinear_upsize_then_avgpool_is_a_smoothing_stencil() {
        // per axis: interior [1/8, 3/4, 1/8], edges fold the clamped tap back in
        let n = 5;
        let up = Tf::build("bilinear_resize", [n, n, 1], [2 * n, 2 * n, 1]).unwrap();
        let down = Tf::build("avgpool_resize", [2 * n, 2 * n, 1], [n, n, 1]).unwrap();
        let x = random(&[1, n, n, 1], 8);
        let y = down.apply(&up.apply(&x).unwrap()).unwrap();
        let w = |i: usize, k: usize| -> f64 {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            let mut v = if k == i { 0.75 } else { 0.0 };
            if k == lo {
                v += 0.125;
            }
            if k == hi {
                v += 0.125;
            }
            v
        };
        for i in 0..n {
            for j in 0..n {
                let expect: f64 = (0..n)
                    .flat_map(|a| (0..n).map(move |b| (a, b)))
                    .map(|(a, b)| w(i, a) * w(j, b) * x.data()[a * n + b])
                    .sum();
                assert!((y.data()[i * n + j] - expect).abs() < 1e-14);
            }
        }
        let c = Tensor::full(&[1, n, n, 1], 0.4).unwrap();
        let yc = down.apply(&up.apply(&c).unwrap()).unwrap();
        assert!(yc.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let pad = Tf::build("center_pad", [4, 3, 2], [8, 7, 2]).unwrap();
        let crop = Tf::build("center_crop", [8, 7, 2], [4, 3, 2]).unwrap();
        let x = random(&[2, 4, 3, 2], 1);
        assert_eq!(crop.apply(&pad.apply(&x).unwrap()).unwrap().data(), x.data());
    }

    #[test]
    fn transpose_conv_places_stencil_and_trains() {
        let t = Tf::build("transpose_conv", [3, 3, 1], [6, 6, 1]).unwrap();
        let mut x = vec![0.0; 9];
        x[4] = 1.0;
        let y = t.apply(&Tensor::from_vec(&[1, 3, 3, 1], x).unwrap()).unwrap();
        // delta at (1, 1) lands at output rows/cols 1..=3 with the filter taps
        for i in 0..6 {
            for j in 0..6 {
                let tap = |p: usize| if (1..=3).contains(&p) { TAPS[p - 1] } else { 0.0 };
                assert_eq!(y.data()[i * 6 + j], tap(i) * tap(j));
            }
        }
        assert_eq!(t.trainable().len(), 2);
        let mut frozen = t.clone();
        frozen.freeze();
        assert!(frozen.trainable().is_empty());
        assert!(Tf::build("transpose_conv", [3, 3, 1], [8, 8, 1]).is_err());
    }

    #[test]
    fn crop_for_discriminator_contract() {
        let t = Tf::build("center_crop", [4, 4, 1], [2, 2, 1]).unwrap();
        let j = t.crop_for_discriminator(&Tensor::ones(&[1, 4, 4, 1]).unwrap()).unwrap();
        assert_eq!((j.shape(), j.data()), (&[1, 2, 2, 1][..], &[1.0; 4][..]));

        // a cropped teacher's gradient is zero outside the window; the view
        // keeps only the window
        let x = random(&[1, 4, 4, 1], 2).with_grad();
        let s = t.apply(&x).unwrap().square().unwrap().sum().unwrap();
        let g = grad(&s, &[&x], false).unwrap().remove(0);
        let zeros = g.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 12);
        let view = t.crop_for_discriminator(&g).unwrap();
        assert!(view.data().iter().all(|&v| v != 0.0));

        let comp = Tf::build("channel_average+center_crop", [6, 6, 3], [4, 4, 1]).unwrap();
        assert_eq!(comp.discriminator_shape(), [4, 4, 3]);
        assert_eq!(comp.crop_for_discriminator(&random(&[2, 6, 6, 3], 0)).unwrap().shape(), &[2, 4, 4, 3]);

        let id = Tf::build("identity", [4, 4, 1], [4, 4, 1]).unwrap();
        assert!(matches!(id.crop_for_discriminator(&g), Err(Error::WrongKind { .. })));
    }

    #[test]
    fn random_pad_offsets_are_uniform() {
        let t = Tf::build("random_pad", [1, 2, 1], [1, 4, 1]).unwrap();
        assert_eq!(t.materialize_affine().unwrap_err(), Error::Unresolved);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            match t.sample_random_pad_offset(&mut rng).unwrap().kind() {
                TransformKind::RandomPad { offset: Some((0, l)) } => counts[*l] += 1,
                other => panic!("{other:?}"),
            }
        }
        let p = 1.0 / 3.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }

        let same = Tf::build("random_pad", [5, 5, 1], [5, 5, 1]).unwrap();
        for _ in 0..20 {
            assert!(matches!(
                same.sample_random_pad_offset(&mut rng).unwrap().kind(),
                TransformKind::RandomPad { offset: Some((0, 0)) }
            ));
        }

        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| t.sample_random_pad_offset(&mut r).unwrap().materialize_affine().unwrap().a)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));

        let crop = Tf::build("center_crop", [4, 4, 1], [2, 2, 1]).unwrap();
        assert!(matches!(crop.sample_random_pad_offset(&mut rng), Err(Error::WrongKind { .. })));
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        assert!(matches!(Tf::build("avgpool_resize", [5, 5, 1], [2, 2, 1]), Err(Error::IncompatibleShape(_))));
        assert!(matches!(Tf::build("center_crop", [2, 2, 1], [4, 4, 1]), Err(Error::IncompatibleShape(_))));
        assert!(matches!(Tf::build("identity", [2, 2, 1], [4, 4, 1]), Err(Error::IncompatibleShape(_))));
        assert!(matches!(Tf::build("warp", [2, 2, 1], [2, 2, 1]), Err(Error::InvalidArgument(_))));
        let t = Tf::build("center_crop", [4, 4, 1], [2, 2, 1]).unwrap();
        assert!(matches!(t.apply(&Tensor::zeros(&[1, 3, 4, 1]).unwrap()), Err(Error::ShapeMismatch { .. })));
    }
}
