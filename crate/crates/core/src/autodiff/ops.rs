//! Primitive ops: forward kernels and their backward rules.
//!
//! Backward rules are written with the same differentiable ops, so running
//! the backward pass with grad mode on yields gradients that are themselves
//! graph-connected (double backpropagation).

use crate::autodiff::sparse::{self, Hwc, SparseMap};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub(crate) enum Op<T: Real> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    Neg(Tensor<T>),
    Scale(Tensor<T>, T),
    Shift(Tensor<T>),
    Relu(Tensor<T>),
    Exp(Tensor<T>),
    Log(Tensor<T>),
    Sigmoid(Tensor<T>),
    Softplus(Tensor<T>),
    Square(Tensor<T>),
    LogSoftmax(Tensor<T>),
    MatMul {
        a: Tensor<T>,
        b: Tensor<T>,
        ta: bool,
        tb: bool,
    },
    Map(Tensor<T>, SparseMap),
    Reshape(Tensor<T>),
    SumAll(Tensor<T>),
    Broadcast(Tensor<T>),
    SumLast(Tensor<T>),
    ExpandLast(Tensor<T>),
    SumFirst(Tensor<T>),
    ExpandFirst(Tensor<T>),
    Narrow(Tensor<T>, usize),
    Embed(Tensor<T>, usize),
}

impl<T: Real> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::LogSoftmax(_) => "log_softmax",
            Op::MatMul { .. } => "matmul",
            Op::Map(..) => "linear_map",
            Op::Reshape(_) => "reshape",
            Op::SumAll(_) => "sum",
            Op::Broadcast(_) => "broadcast",
            Op::SumLast(_) => "sum_last",
            Op::ExpandLast(_) => "expand_last",
            Op::SumFirst(_) => "sum_first",
            Op::ExpandFirst(_) => "expand_first",
            Op::Narrow(..) => "narrow",
            Op::Embed(..) => "embed",
        }
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Square(x)
            | Op::LogSoftmax(x)
            | Op::Map(x, _)
            | Op::Reshape(x)
            | Op::SumAll(x)
            | Op::Broadcast(x)
            | Op::SumLast(x)
            | Op::ExpandLast(x)
            | Op::SumFirst(x)
            | Op::ExpandFirst(x)
            | Op::Narrow(x, _)
            | Op::Embed(x, _) => vec![x],
        }
    }

    /// Gradients for each parent (aligned with [`Op::parents`]) given the
    /// upstream gradient `g` of this node's output.
    pub(crate) fn backward(&self, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let two = T::lit(2.0);
        Ok(match self {
            Op::Add(..) => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub(..) => vec![Some(g.clone()), Some(g.neg()?)],
            Op::Mul(a, b) => vec![Some(g.mul(b)?), Some(g.mul(a)?)],
            Op::Div(a, b) => vec![
                Some(g.div(b)?),
                Some(g.mul(a)?.div(&b.square()?)?.neg()?),
            ],
            Op::Neg(_) => vec![Some(g.neg()?)],
            Op::Scale(_, c) => vec![Some(g.scale(*c)?)],
            Op::Shift(_) => vec![Some(g.clone())],
            // subgradient 0 at the kink; the mask is a constant, so the
            // second derivative through relu is zero everywhere
            Op::Relu(x) => {
                let mask: Vec<T> = x
                    .data()
                    .iter()
                    .map(|&v| if v > T::zero() { T::one() } else { T::zero() })
                    .collect();
                vec![Some(g.mul(&Tensor::from_vec(x.shape(), mask)?)?)]
            }
            Op::Exp(x) => vec![Some(g.mul(&x.exp()?)?)],
            Op::Log(x) => vec![Some(g.div(x)?)],
            Op::Sigmoid(x) => {
                let s = x.sigmoid()?;
                let ds = s.mul(&s.neg()?.shift(T::one())?)?;
                vec![Some(g.mul(&ds)?)]
            }
            Op::Softplus(x) => vec![Some(g.mul(&x.sigmoid()?)?)],
            Op::Square(x) => vec![Some(g.mul(x)?.scale(two)?)],
            Op::LogSoftmax(x) => {
                let n = *x.shape().last().unwrap();
                let soft = x.log_softmax()?.exp()?;
                let gsum = g.sum_last()?.expand_last(n)?;
                vec![Some(g.sub(&soft.mul(&gsum)?)?)]
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ga, gb) = match (ta, tb) {
                    (false, false) => (g.matmul_t(b, false, true)?, a.matmul_t(g, true, false)?),
                    (false, true) => (g.matmul_t(b, false, false)?, g.matmul_t(a, true, false)?),
                    (true, false) => (b.matmul_t(g, false, true)?, a.matmul_t(g, false, false)?),
                    (true, true) => (b.matmul_t(g, true, true)?, g.matmul_t(a, true, true)?),
                };
                vec![Some(ga), Some(gb)]
            }
            Op::Map(_, m) => vec![Some(g.apply_map(&m.transpose(), &[m.in_dim()])?)],
            Op::Reshape(x) => vec![Some(g.reshape(x.shape())?)],
            Op::SumAll(x) => vec![Some(g.broadcast(x.shape())?)],
            Op::Broadcast(_) => vec![Some(g.sum()?)],
            Op::SumLast(x) => vec![Some(g.expand_last(*x.shape().last().unwrap())?)],
            Op::ExpandLast(_) => vec![Some(g.sum_last()?)],
            Op::SumFirst(x) => vec![Some(g.expand_first(x.shape()[0])?)],
            Op::ExpandFirst(_) => vec![Some(g.sum_first()?)],
            Op::Narrow(x, start) => vec![Some(g.embed(*start, x.shape()[0])?)],
            Op::Embed(x, start) => vec![Some(g.narrow(*start, x.shape()[0])?)],
        })
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap();
    (shape.iter().product::<usize>() / n, n)
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn drop_first(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[1..].to_vec()
    }
}

fn transpose_copy<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `C[m,n] = A[m,k] * B` where B is `[k,n]`, or `[n,k]` when `b_trans`.
fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, b_trans: bool) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    if b_trans {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for p in 0..k {
                    acc = acc + ar[p] * br[p];
                }
                c[i * n + j] = acc;
            }
        }
    } else {
        for i in 0..m {
            let cr = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let br = &b[p * n..(p + 1) * n];
                for (cv, &bv) in cr.iter_mut().zip(br) {
                    *cv = *cv + av * bv;
                }
            }
        }
    }
    c
}

impl<T: Real> Tensor<T> {
    fn zip_with(&self, other: &Tensor<T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(self, other, op.name())?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::record(self.shape().to_vec(), data, op)
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Result<Self> {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::record(self.shape().to_vec(), data, op)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, Op::Add(self.clone(), other.clone()), |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, Op::Sub(self.clone(), other.clone()), |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, Op::Mul(self.clone(), other.clone()), |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, Op::Div(self.clone(), other.clone()), |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Self> {
        self.unary(Op::Neg(self.clone()), |v| -v)
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: T) -> Result<Self> {
        self.unary(Op::Scale(self.clone(), c), |v| v * c)
    }

    /// Adds a constant.
    pub fn shift(&self, c: T) -> Result<Self> {
        self.unary(Op::Shift(self.clone()), |v| v + c)
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(Op::Relu(self.clone()), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary(Op::Exp(self.clone()), |v| v.exp())
    }

    pub fn log(&self) -> Result<Self> {
        self.unary(Op::Log(self.clone()), |v| v.ln())
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary(Op::Sigmoid(self.clone()), sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Self> {
        self.unary(Op::Softplus(self.clone()), softplus)
    }

    pub fn square(&self) -> Result<Self> {
        self.unary(Op::Square(self.clone()), |v| v * v)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Self> {
        let (_, n) = rows_cols(self.shape());
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        Tensor::record(self.shape().to_vec(), data, Op::LogSoftmax(self.clone()))
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) * op(other)` for 2-D tensors, `op` transposing when the
    /// corresponding flag is set.
    pub fn matmul_t(&self, other: &Tensor<T>, ta: bool, tb: bool) -> Result<Self> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} (need 2-D)")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?}{} x {sb:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" }),
            ));
        }
        let a_rows;
        let a = if ta {
            a_rows = transpose_copy(self.data(), sa[0], sa[1]);
            &a_rows[..]
        } else {
            self.data()
        };
        let data = gemm(a, other.data(), m, k, n, tb);
        Tensor::record(
            vec![m, n],
            data,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
                ta,
                tb,
            },
        )
    }

    /// Applies a per-sample linear map; the leading axis is the batch axis
    /// and the output is `[batch] ++ out_sample`.
    pub fn apply_map(&self, map: &SparseMap, out_sample: &[usize]) -> Result<Self> {
        if self.numel() % map.in_dim() != 0 || out_sample.iter().product::<usize>() != map.out_dim() {
            return Err(Error::shape(
                "linear_map",
                format!(
                    "input {:?} / out {:?} vs map {} -> {}",
                    self.shape(),
                    out_sample,
                    map.in_dim(),
                    map.out_dim()
                ),
            ));
        }
        let n = self.numel() / map.in_dim();
        let mut shape = vec![n];
        shape.extend_from_slice(out_sample);
        let data = map.apply(self.data());
        Tensor::record(shape, data, Op::Map(self.clone(), map.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        crate::autodiff::tensor::check_shape(shape, self.numel(), "reshape")?;
        Ok(Tensor::record_shared(
            shape.to_vec(),
            self.shared_data(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Self> {
        let s = self.data().iter().copied().sum();
        Tensor::record(vec![1], vec![s], Op::SumAll(self.clone()))
    }

    pub fn mean(&self) -> Result<Self> {
        self.sum()?.scale(T::one() / T::lit(self.numel() as f64))
    }

    /// Repeats a single-element tensor to `shape`.
    pub fn broadcast(&self, shape: &[usize]) -> Result<Self> {
        let v = self.item()?;
        let n = shape.iter().product();
        crate::autodiff::tensor::check_shape(shape, n, "broadcast")?;
        Tensor::record(shape.to_vec(), vec![v; n], Op::Broadcast(self.clone()))
    }

    /// Sums over the last axis.
    pub fn sum_last(&self) -> Result<Self> {
        let (_, n) = rows_cols(self.shape());
        let data = self.data().chunks_exact(n).map(|r| r.iter().copied().sum()).collect();
        Tensor::record(drop_last(self.shape()), data, Op::SumLast(self.clone()))
    }

    /// Appends an axis of length `n` by repetition.
    pub fn expand_last(&self, n: usize) -> Result<Self> {
        let mut shape = self.shape().to_vec();
        shape.push(n);
        let data = self
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(n))
            .collect();
        Tensor::record(shape, data, Op::ExpandLast(self.clone()))
    }

    /// Sums over the leading axis.
    pub fn sum_first(&self) -> Result<Self> {
        let m = self.shape()[0];
        let inner = self.numel() / m;
        let mut data = vec![T::zero(); inner];
        for row in self.data().chunks_exact(inner) {
            for (d, &v) in data.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
        Tensor::record(drop_first(self.shape()), data, Op::SumFirst(self.clone()))
    }

    /// Prepends an axis of length `m` by repetition.
    pub fn expand_first(&self, m: usize) -> Result<Self> {
        let mut shape = vec![m];
        shape.extend_from_slice(self.shape());
        let mut data = Vec::with_capacity(m * self.numel());
        for _ in 0..m {
            data.extend_from_slice(self.data());
        }
        Tensor::record(shape, data, Op::ExpandFirst(self.clone()))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        let m = self.shape()[0];
        if len == 0 || start + len > m {
            return Err(Error::shape("narrow", format!("{start}+{len} > {m}")));
        }
        let inner = self.numel() / m;
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        let data = self.data()[start * inner..(start + len) * inner].to_vec();
        Tensor::record(shape, data, Op::Narrow(self.clone(), start))
    }

    /// Places this tensor at rows `start..` of a zero tensor with `total`
    /// leading rows.
    pub fn embed(&self, start: usize, total: usize) -> Result<Self> {
        let m = self.shape()[0];
        if start + m > total {
            return Err(Error::shape("embed", format!("{start}+{m} > {total}")));
        }
        let inner = self.numel() / m;
        let mut shape = self.shape().to_vec();
        shape[0] = total;
        let mut data = vec![T::zero(); total * inner];
        data[start * inner..(start + m) * inner].copy_from_slice(self.data());
        Tensor::record(shape, data, Op::Embed(self.clone(), start))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Concatenates along the leading axis.
pub fn concat<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let inner = &first.shape()[1..];
    if parts.iter().any(|p| &p.shape()[1..] != inner) {
        return Err(Error::shape("concat", "trailing dimensions differ"));
    }
    let total: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut acc: Option<Tensor<T>> = None;
    let mut start = 0;
    for p in parts {
        let e = p.embed(start, total)?;
        start += p.shape()[0];
        acc = Some(match acc {
            None => e,
            Some(a) => a.add(&e)?,
        });
    }
    Ok(acc.unwrap())
}

/// Sample geometry of an NHWC tensor.
pub(crate) fn nhwc<T: Real>(x: &Tensor<T>, op: &'static str) -> Result<(usize, Hwc)> {
    match x.shape() {
        &[n, h, w, c] => Ok((n, Hwc::new(h, w, c))),
        s => Err(Error::shape(op, format!("expected NHWC input, got {s:?}"))),
    }
}

impl<T: Real> Tensor<T> {
    /// 2-D convolution (cross-correlation) of an NHWC batch with a
    /// `[k, k, c_in, c_out]` filter.
    pub fn conv2d(&self, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (n, g) = nhwc(self, "conv2d")?;
        let &[k, k2, cin, cout] = weight.shape() else {
            return Err(Error::shape("conv2d", format!("filter shape {:?}", weight.shape())));
        };
        if k != k2 || cin != g.c || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs filter {:?}", self.shape(), weight.shape()),
            ));
        }
        let map = sparse::im2col(g, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", "kernel larger than padded input"))?;
        let oh = sparse::conv_out(g.h, k, stride, pad).unwrap();
        let ow = sparse::conv_out(g.w, k, stride, pad).unwrap();
        let patch = k * k * cin;
        let cols = self
            .apply_map(&map, &[oh * ow * patch])?
            .reshape(&[n * oh * ow, patch])?;
        cols.matmul(&weight.reshape(&[patch, cout])?)?
            .reshape(&[n, oh, ow, cout])
    }

    /// Transposed convolution: the adjoint of [`Tensor::conv2d`] in its input,
    /// with a `[k, k, c_out, c_in]` filter. Output spatial size is
    /// `(in - 1) * stride - 2 * pad + k + out_pad`.
    pub fn transpose_conv2d(
        &self,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Self> {
        let (n, g) = nhwc(self, "transpose_conv2d")?;
        let &[k, k2, cout, cin] = weight.shape() else {
            return Err(Error::shape(
                "transpose_conv2d",
                format!("filter shape {:?}", weight.shape()),
            ));
        };
        if k != k2 || cin != g.c || stride == 0 || out_pad >= stride {
            return Err(Error::shape(
                "transpose_conv2d",
                format!("input {:?} vs filter {:?}", self.shape(), weight.shape()),
            ));
        }
        let span = |s: usize| ((s - 1) * stride + k + out_pad).checked_sub(2 * pad);
        let (Some(oh), Some(ow)) = (span(g.h), span(g.w)) else {
            return Err(Error::shape("transpose_conv2d", "padding exceeds output"));
        };
        let out = Hwc::new(oh, ow, cout);
        let map = sparse::im2col(out, k, stride, pad)
            .filter(|_| {
                sparse::conv_out(oh, k, stride, pad) == Some(g.h)
                    && sparse::conv_out(ow, k, stride, pad) == Some(g.w)
            })
            .ok_or_else(|| Error::shape("transpose_conv2d", "inconsistent geometry"))?;
        let patch = k * k * cout;
        self.reshape(&[n * g.h * g.w, cin])?
            .matmul_t(&weight.reshape(&[patch, cin])?, false, true)?
            .reshape(&[n, g.h * g.w * patch])?
            .apply_map(&map.transpose(), &[oh, ow, cout])
    }

    pub fn avg_pool2d(&self, k: usize, stride: usize) -> Result<Self> {
        let (_, g) = nhwc(self, "avg_pool2d")?;
        let map = sparse::avg_pool(g, k, stride)
            .ok_or_else(|| Error::shape("avg_pool2d", "window larger than input"))?;
        let oh = sparse::conv_out(g.h, k, stride, 0).unwrap();
        let ow = sparse::conv_out(g.w, k, stride, 0).unwrap();
        self.apply_map(&map, &[oh, ow, g.c])
    }

    /// Spatial mean per channel: `[n, h, w, c] -> [n, c]`.
    pub fn global_avg_pool(&self) -> Result<Self> {
        let (_, g) = nhwc(self, "global_avg_pool")?;
        self.apply_map(&sparse::global_avg_pool(g), &[g.c])
    }

    /// Spatial window `[top..top+h, left..left+w]` of an NHWC batch.
    pub fn slice2d(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let (_, g) = nhwc(self, "slice")?;
        let map = sparse::crop(g, top, left, h, w)
            .ok_or_else(|| Error::shape("slice", format!("window exceeds {:?}", self.shape())))?;
        self.apply_map(&map, &[h, w, g.c])
    }

    /// Pads an NHWC batch spatially with a constant border.
    pub fn pad_constant(&self, top: usize, left: usize, h: usize, w: usize, value: T) -> Result<Self> {
        let (n, g) = nhwc(self, "pad_constant")?;
        let map = sparse::pad(g, top, left, h, w)
            .ok_or_else(|| Error::shape("pad_constant", "canvas smaller than input"))?;
        let padded = self.apply_map(&map, &[h, w, g.c])?;
        if value == T::zero() {
            return Ok(padded);
        }
        let ones = vec![T::one(); g.len()];
        let interior = map.apply(&ones);
        let border: Vec<T> = (0..n)
            .flat_map(|_| interior.iter().map(|&m| (T::one() - m) * value))
            .collect();
        padded.add(&Tensor::from_vec(padded.shape(), border)?)
    }

    /// Squared l2 norm of all elements.
    pub fn l2_norm_sq(&self) -> Result<Self> {
        self.square()?.sum()
    }

    /// Flattens everything but the leading axis.
    pub fn flatten(&self) -> Result<Self> {
        let n = self.shape()[0];
        self.reshape(&[n, self.numel() / n])
    }

    /// Adds `bias` (length = last axis) to every row.
    pub fn add_row_bias(&self, bias: &Tensor<T>) -> Result<Self> {
        let (m, n) = rows_cols(self.shape());
        if bias.numel() != n {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", self.shape(), bias.shape())));
        }
        let b = bias.reshape(&[n])?.expand_first(m)?;
        self.reshape(&[m, n])?.add(&b)?.reshape(self.shape())
    }

    /// Sum of each sample (leading axis) → `[n]`.
    pub fn sum_per_sample(&self) -> Result<Self> {
        let n = self.shape()[0];
        self.reshape(&[n, self.numel() / n])?.sum_last()
    }
}
