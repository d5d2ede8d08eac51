//! Fixed per-sample linear maps in compressed-row form.
//!
//! Every structural op that is linear in its input (im2col, pooling, crop,
//! pad, resize, channel averaging) is expressed as a `SparseMap` applied to
//! each sample of a batch. The backward rule of a map is its transpose, and
//! the transpose of the transpose is the original map, so these ops are
//! differentiable to any order for free.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::scalar::Real;

#[derive(Debug)]
struct Csr {
    offsets: Vec<usize>,
    idx: Vec<u32>,
    // `None` means every stored weight is exactly one (pure gather).
    weights: Option<Vec<f64>>,
}

impl Csr {
    fn from_triplets(rows: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (r, c, w) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += w,
                _ => merged.push((r, c, w)),
            }
        }
        merged.retain(|e| e.2 != 0.0);
        let mut offsets = vec![0usize; rows + 1];
        for &(r, _, _) in &merged {
            offsets[r + 1] += 1;
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        let all_ones = merged.iter().all(|e| e.2 == 1.0);
        let idx = merged.iter().map(|e| e.1 as u32).collect();
        let weights = (!all_ones).then(|| merged.iter().map(|e| e.2).collect());
        Csr {
            offsets,
            idx,
            weights,
        }
    }

    fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn apply_one<T: Real>(&self, input: &[T], out: &mut [T]) {
        match &self.weights {
            None => {
                for (r, o) in out.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for &c in &self.idx[self.offsets[r]..self.offsets[r + 1]] {
                        acc = acc + input[c as usize];
                    }
                    *o = acc;
                }
            }
            Some(ws) => {
                for (r, o) in out.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for e in self.offsets[r]..self.offsets[r + 1] {
                        acc = acc + T::lit(ws[e]) * input[self.idx[e] as usize];
                    }
                    *o = acc;
                }
            }
        }
    }
}

/// A linear map `R^in_dim -> R^out_dim` applied independently to each sample.
#[derive(Debug, Clone)]
pub struct SparseMap {
    in_dim: usize,
    out_dim: usize,
    fwd: Arc<Csr>,
    bwd: Arc<Csr>,
}

impl SparseMap {
    /// Builds a map from `(out_index, in_index, weight)` triplets. Duplicate
    /// coordinates are summed.
    pub fn from_triplets(in_dim: usize, out_dim: usize, entries: Vec<(usize, usize, f64)>) -> Self {
        debug_assert!(entries.iter().all(|e| e.0 < out_dim && e.1 < in_dim));
        let transposed = entries.iter().map(|&(r, c, w)| (c, r, w)).collect();
        SparseMap {
            in_dim,
            out_dim,
            fwd: Arc::new(Csr::from_triplets(out_dim, entries)),
            bwd: Arc::new(Csr::from_triplets(in_dim, transposed)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn transpose(&self) -> SparseMap {
        SparseMap {
            in_dim: self.out_dim,
            out_dim: self.in_dim,
            fwd: Arc::clone(&self.bwd),
            bwd: Arc::clone(&self.fwd),
        }
    }

    /// Applies the map to `n` consecutive samples of length `in_dim`.
    pub fn apply<T: Real>(&self, input: &[T]) -> Vec<T> {
        debug_assert_eq!(input.len() % self.in_dim, 0);
        debug_assert_eq!(self.fwd.rows(), self.out_dim);
        let n = input.len() / self.in_dim;
        let mut out = vec![T::zero(); n * self.out_dim];
        for (src, dst) in input
            .chunks_exact(self.in_dim)
            .zip(out.chunks_exact_mut(self.out_dim))
        {
            self.fwd.apply_one(src, dst);
        }
        out
    }

    /// Dense `out_dim x in_dim` matrix, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.out_dim * self.in_dim];
        for r in 0..self.out_dim {
            for e in self.fwd.offsets[r]..self.fwd.offsets[r + 1] {
                let w = self.fwd.weights.as_ref().map_or(1.0, |ws| ws[e]);
                m[r * self.in_dim + self.fwd.idx[e] as usize] += w;
            }
        }
        m
    }
}

/// Spatial geometry of an NHWC sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Hwc {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Hwc {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Hwc { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, ch: usize) -> usize {
        (i * self.w + j) * self.c + ch
    }
}

/// Output spatial size of a convolution window sweep.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum GeomKey {
    Im2col(Hwc, usize, usize, usize),
    AvgPool(Hwc, usize, usize),
    GlobalAvg(Hwc),
}

thread_local! {
    static GEOM_CACHE: RefCell<HashMap<GeomKey, SparseMap>> = RefCell::new(HashMap::new());
}

fn cached(key: GeomKey, build: impl FnOnce() -> SparseMap) -> SparseMap {
    GEOM_CACHE.with(|c| {
        if let Some(m) = c.borrow().get(&key) {
            return m.clone();
        }
        let m = build();
        c.borrow_mut().insert(key, m.clone());
        m
    })
}

/// Patch extraction: each output row `(oi, oj)` holds the `k x k x c` window
/// (kernel-row, kernel-col, channel order). Out-of-bounds taps read zero.
pub fn im2col(g: Hwc, k: usize, stride: usize, pad: usize) -> Option<SparseMap> {
    let oh = conv_out(g.h, k, stride, pad)?;
    let ow = conv_out(g.w, k, stride, pad)?;
    Some(cached(GeomKey::Im2col(g, k, stride, pad), || {
        let patch = k * k * g.c;
        let mut e = Vec::with_capacity(oh * ow * patch);
        for oi in 0..oh {
            for oj in 0..ow {
                let row0 = (oi * ow + oj) * patch;
                for ki in 0..k {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        for ch in 0..g.c {
                            e.push((
                                row0 + (ki * k + kj) * g.c + ch,
                                g.at(ii as usize, jj as usize, ch),
                                1.0,
                            ));
                        }
                    }
                }
            }
        }
        SparseMap::from_triplets(g.len(), oh * ow * patch, e)
    }))
}

pub fn avg_pool(g: Hwc, k: usize, stride: usize) -> Option<SparseMap> {
    let oh = conv_out(g.h, k, stride, 0)?;
    let ow = conv_out(g.w, k, stride, 0)?;
    Some(cached(GeomKey::AvgPool(g, k, stride), || {
        let wgt = 1.0 / (k * k) as f64;
        let out = Hwc::new(oh, ow, g.c);
        let mut e = Vec::with_capacity(out.len() * k * k);
        for oi in 0..oh {
            for oj in 0..ow {
                for ch in 0..g.c {
                    for ki in 0..k {
                        for kj in 0..k {
                            e.push((out.at(oi, oj, ch), g.at(oi * stride + ki, oj * stride + kj, ch), wgt));
                        }
                    }
                }
            }
        }
        SparseMap::from_triplets(g.len(), out.len(), e)
    }))
}

pub fn global_avg_pool(g: Hwc) -> SparseMap {
    cached(GeomKey::GlobalAvg(g), || {
        let wgt = 1.0 / (g.h * g.w) as f64;
        let mut e = Vec::with_capacity(g.len());
        for i in 0..g.h {
            for j in 0..g.w {
                for ch in 0..g.c {
                    e.push((ch, g.at(i, j, ch), wgt));
                }
            }
        }
        SparseMap::from_triplets(g.len(), g.c, e)
    })
}

/// Keeps the `out.h x out.w` window whose top-left corner is `(top, left)`.
pub fn crop(g: Hwc, top: usize, left: usize, out_h: usize, out_w: usize) -> Option<SparseMap> {
    if top + out_h > g.h || left + out_w > g.w {
        return None;
    }
    let out = Hwc::new(out_h, out_w, g.c);
    let mut e = Vec::with_capacity(out.len());
    for i in 0..out_h {
        for j in 0..out_w {
            for ch in 0..g.c {
                e.push((out.at(i, j, ch), g.at(top + i, left + j, ch), 1.0));
            }
        }
    }
    Some(SparseMap::from_triplets(g.len(), out.len(), e))
}

/// Zero-pads into an `out_h x out_w` canvas with the sample at `(top, left)`.
pub fn pad(g: Hwc, top: usize, left: usize, out_h: usize, out_w: usize) -> Option<SparseMap> {
    crop(Hwc::new(out_h, out_w, g.c), top, left, g.h, g.w).map(|m| m.transpose())
}

pub fn channel_average(g: Hwc) -> SparseMap {
    let out = Hwc::new(g.h, g.w, 1);
    let wgt = 1.0 / g.c as f64;
    let mut e = Vec::with_capacity(g.len());
    for i in 0..g.h {
        for j in 0..g.w {
            for ch in 0..g.c {
                e.push((out.at(i, j, 0), g.at(i, j, ch), wgt));
            }
        }
    }
    SparseMap::from_triplets(g.len(), out.len(), e)
}

/// One-dimensional bilinear taps with the half-pixel (align-corners = false)
/// convention: output `o` samples input coordinate `(o + 0.5) * in / out - 0.5`.
fn linear_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = src - lo as f64;
            if hi == lo || frac == 0.0 {
                vec![(lo, 1.0)]
            } else {
                vec![(lo, 1.0 - frac), (hi, frac)]
            }
        })
        .collect()
}

pub fn bilinear(g: Hwc, out_h: usize, out_w: usize) -> SparseMap {
    let rows = linear_taps(g.h, out_h);
    let cols = linear_taps(g.w, out_w);
    let out = Hwc::new(out_h, out_w, g.c);
    let mut e = Vec::new();
    for (i, ri) in rows.iter().enumerate() {
        for (j, cj) in cols.iter().enumerate() {
            for ch in 0..g.c {
                for &(si, wi) in ri {
                    for &(sj, wj) in cj {
                        e.push((out.at(i, j, ch), g.at(si, sj, ch), wi * wj));
                    }
                }
            }
        }
    }
    SparseMap::from_triplets(g.len(), out.len(), e)
}
