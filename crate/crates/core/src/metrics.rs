//! Robustness tables, the alignment metric, input-gradient saliency images
//! and loss-landscape grids.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attacks::{fgsm, pgd, predict, AttackConfig};
use crate::autodiff::{grad, set_grad_enabled, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{input_gradient, one_hot, xent_per_sample};
use crate::nn::Model;
use crate::rng;
use crate::scalar::Real;

/// One model's accuracies (percent) plus auxiliary gradient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub clean: f64,
    pub fgsm: f64,
    /// `(steps, accuracy)` in configured order.
    pub pgd: Vec<(usize, f64)>,
    pub cos_sim: Option<f64>,
    pub alignment: Option<f64>,
}

impl EvalRow {
    pub fn pgd_at(&self, k: usize) -> Option<f64> {
        self.pgd.iter().find(|(s, _)| *s == k).map(|(_, a)| *a)
    }

    /// Soft check: PGD accuracy should not rise with more steps beyond
    /// `tolerance` points.
    pub fn monotonicity_warnings(&self, tolerance: f64) -> Vec<String> {
        self.pgd
            .windows(2)
            .filter(|w| w[1].1 > w[0].1 + tolerance)
            .map(|w| {
                format!(
                    "{}: PGD{} accuracy {} exceeds PGD{} accuracy {}",
                    self.model, w[1].0, w[1].1, w[0].0, w[0].1
                )
            })
            .collect()
    }
}

/// Rows keyed by model name, sharing one PGD step list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

impl EvalReport {
    pub fn pgd_steps(&self) -> Vec<usize> {
        self.rows.first().map(|r| r.pgd.iter().map(|p| p.0).collect()).unwrap_or_else(|| vec![5, 10, 20])
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["model".to_string(), "clean".into(), "fgsm".into()];
        h.extend(self.pgd_steps().iter().map(|k| format!("pgd{k}")));
        h.extend(["cos_sim".to_string(), "alignment".into()]);
        h
    }

    /// Appends rows of another report; the PGD step lists must agree.
    pub fn merge(&mut self, other: &EvalReport) -> Result<()> {
        if !self.rows.is_empty() && !other.rows.is_empty() && self.pgd_steps() != other.pgd_steps() {
            return Err(Error::InvalidArgument("reports use different PGD step lists".into()));
        }
        self.rows.extend(other.rows.iter().cloned());
        Ok(())
    }

    pub fn row(&self, model: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Floats use the shortest representation that parses back exactly.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header()).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![r.model.clone(), r.clean.to_string(), r.fgsm.to_string()];
            rec.extend(r.pgd.iter().map(|p| p.1.to_string()));
            rec.push(opt(r.cos_sim));
            rec.push(opt(r.alignment));
            out.write_record(rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<EvalReport> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let n = cols.len();
        if n < 5 || cols[..3] != ["model", "clean", "fgsm"] || cols[n - 2..] != ["cos_sim", "alignment"] {
            return Err(Error::Io(format!("unexpected report header {cols:?}")));
        }
        let steps = cols[3..n - 2]
            .iter()
            .map(|c| c.strip_prefix("pgd").and_then(|k| k.parse::<usize>().ok()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Io(format!("bad PGD column in {cols:?}")))?;
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Io(format!("bad number '{s}'"))) };
        let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        let mut report = EvalReport::default();
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            report.rows.push(EvalRow {
                model: rec[0].to_string(),
                clean: num(&rec[1])?,
                fgsm: num(&rec[2])?,
                pgd: steps.iter().enumerate().map(|(i, &k)| Ok((k, num(&rec[3 + i])?))).collect::<Result<_>>()?,
                cos_sim: opt(&rec[n - 2])?,
                alignment: opt(&rec[n - 1])?,
            });
        }
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EvalReport> {
        EvalReport::read_csv(fs::File::open(path)?)
    }
}

/// Attack suite for `evaluate`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig<T> {
    pub epsilon: T,
    pub pgd_steps: Vec<usize>,
    /// PGD step size; `None` means `epsilon / 4`.
    pub eta: Option<T>,
    pub random_start: bool,
    pub batch_size: usize,
    pub seed: u64,
    /// Worker threads; `None` reads `IGAM_THREADS` (default 1).
    pub threads: Option<usize>,
}

impl<T: Real> EvalConfig<T> {
    pub fn new(epsilon: T) -> Self {
        EvalConfig {
            epsilon,
            pgd_steps: vec![5, 10, 20],
            eta: None,
            random_start: false,
            batch_size: 100,
            seed: 0,
            threads: None,
        }
    }

    fn attack(&self, steps: usize) -> Result<AttackConfig<T>> {
        let mut cfg = AttackConfig::pgd(self.epsilon, steps)?;
        if let Some(eta) = self.eta {
            cfg.eta = eta;
        }
        cfg.random_start = self.random_start;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Worker count from `IGAM_THREADS`, at least 1.
pub fn thread_cap() -> usize {
    std::env::var("IGAM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Correct-prediction counts `[clean, fgsm, pgd_k...]` for one batch.
fn batch_counts<T: Real>(
    model: &Model<T>,
    data: &Dataset<T>,
    idx: &[usize],
    cfg: &EvalConfig<T>,
    batch_no: usize,
) -> Result<Vec<usize>> {
    let (x, y) = data.batch(idx)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
    let hits = |pred: Vec<usize>| pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    let mut out = vec![hits(predict(model, &x)?)];
    out.push(hits(predict(model, &fgsm(model, &x, &y, cfg.epsilon)?)?));
    for &k in &cfg.pgd_steps {
        let mut r = rng::stream(cfg.seed, &format!("eval/pgd{k}/batch{batch_no}"));
        out.push(hits(predict(model, &pgd(model, &x, &y, &cfg.attack(k)?, &mut r)?)?));
    }
    Ok(out)
}

/// Clean, FGSM and PGD-k accuracies of `model` on `data`, in percent.
///
/// Batches are fixed (unshuffled) and each PGD run draws from a stream keyed
/// by its batch number, so the result does not depend on the thread count.
pub fn evaluate<T: Real>(name: &str, model: &Model<T>, data: &Dataset<T>, cfg: &EvalConfig<T>) -> Result<EvalRow> {
    for &k in &cfg.pgd_steps {
        cfg.attack(k)?;
    }
    let batches = data.batch_indices::<ChaCha8Rng>(cfg.batch_size.max(1), None);
    let threads = cfg.threads.unwrap_or_else(thread_cap).clamp(1, batches.len().max(1));
    let mut per_batch: Vec<Option<Result<Vec<usize>>>> = (0..batches.len()).map(|_| None).collect();
    if threads == 1 {
        for (b, idx) in batches.iter().enumerate() {
            per_batch[b] = Some(batch_counts(model, data, idx, cfg, b));
        }
    } else {
        let snapshot = model.snapshot();
        let results: Vec<Vec<(usize, Result<Vec<usize>>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let snapshot = &snapshot;
                    let batches = &batches;
                    s.spawn(move || -> Vec<(usize, Result<Vec<usize>>)> {
                        let local = match snapshot.restore() {
                            Ok(m) => m,
                            Err(e) => return vec![(w, Err(e))],
                        };
                        (w..batches.len())
                            .step_by(threads)
                            .map(|b| (b, batch_counts(&local, data, &batches[b], cfg, b)))
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap_or_default()).collect()
        });
        for (b, r) in results.into_iter().flatten() {
            per_batch[b] = Some(r);
        }
    }
    let mut totals = vec![0usize; 2 + cfg.pgd_steps.len()];
    for r in per_batch {
        let counts = r.ok_or(Error::Unreachable)??;
        for (t, c) in totals.iter_mut().zip(counts) {
            *t += c;
        }
    }
    let pct = |c: usize| 100.0 * c as f64 / data.len().max(1) as f64;
    Ok(EvalRow {
        model: name.to_string(),
        clean: pct(totals[0]),
        fgsm: pct(totals[1]),
        pgd: cfg.pgd_steps.iter().zip(&totals[2..]).map(|(&k, &c)| (k, pct(c))).collect(),
        cos_sim: None,
        alignment: None,
    })
}

/// Indices of the two largest entries (ties go to the lower index).
fn top_two<T: Real>(row: &[T]) -> (usize, usize) {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    (order[0], order[1])
}

/// `|<x, g>| / ||g||` per sample, where `g` is the input gradient of the gap
/// between the two largest outputs of `logits_of`.
pub fn alignment_with<T, F>(logits_of: F, x: &Tensor<T>) -> Result<Vec<f64>>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let _mode = set_grad_enabled(true);
    let leaf = x.with_grad();
    let z = logits_of(&leaf)?;
    let (n, k) = (z.shape()[0], z.shape()[1]);
    if k < 2 {
        return Err(Error::InvalidArgument("alignment needs at least two logits".into()));
    }
    let mut sel = vec![T::zero(); n * k];
    for (i, row) in z.data().chunks(k).enumerate() {
        let (a, b) = top_two(row);
        sel[i * k + a] = T::one();
        sel[i * k + b] = -T::one();
    }
    let gap = z.mul(&Tensor::from_vec(&[n, k], sel)?)?.sum()?;
    let g = grad(&gap, &[&leaf], false)?.remove(0);
    let d = x.numel() / n;
    x.data()
        .chunks(d)
        .zip(g.data().chunks(d))
        .map(|(xs, gs)| {
            let dot: f64 = xs.iter().zip(gs).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            let norm = gs.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if norm < 1e-12 {
                Err(Error::ZeroGradient(norm))
            } else {
                Ok(dot.abs() / norm)
            }
        })
        .collect()
}

pub fn alignment<T: Real>(model: &Model<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    alignment_with(|x| model.logits(x), x)
}

/// Mean alignment over a dataset, skipping samples with a vanishing gradient.
pub fn mean_alignment<T: Real>(model: &Model<T>, data: &Dataset<T>, batch_size: usize) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for idx in data.batch_indices::<ChaCha8Rng>(batch_size.max(1), None) {
        let (x, _) = data.batch(&idx)?;
        for i in 0..idx.len() {
            let xi = Tensor::from_vec(&[1, x.shape()[1], x.shape()[2], x.shape()[3]], {
                let d = x.numel() / idx.len();
                x.data()[i * d..(i + 1) * d].to_vec()
            })?;
            match alignment(model, &xi) {
                Ok(a) => {
                    total += a[0];
                    count += 1;
                }
                Err(Error::ZeroGradient(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Per-image min-max normalisation to bytes; a constant image maps to
/// mid-gray (128).
pub fn render_saliency<T: Real>(j: &[T]) -> Vec<u8> {
    let vals: Vec<f64> = j.iter().map(|v| v.as_f64()).collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; vals.len()];
    }
    vals.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Binary PGM (one channel) or PPM (three channels).
pub fn write_pnm<W: Write>(mut w: W, pixels: &[u8], shape: [usize; 3]) -> Result<()> {
    let [h, wd, c] = shape;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::IncompatibleShape(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    if pixels.len() != h * wd * c {
        return Err(Error::shape("write_pnm", format!("{} bytes for {shape:?}", pixels.len())));
    }
    write!(w, "{magic}\n{wd} {h}\n255\n")?;
    w.write_all(pixels)?;
    Ok(())
}

/// Writes the input gradient of every sample in `data` as
/// `<dir>/<model>_<index>.pgm` (or `.ppm`) and returns the paths.
pub fn export_input_gradients<T: Real>(
    name: &str,
    model: &Model<T>,
    data: &Dataset<T>,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let shape = data.shape();
    let ext = if shape[2] == 1 { "pgm" } else { "ppm" };
    fs::create_dir_all(dir.as_ref())?;
    let mut paths = Vec::with_capacity(data.len());
    let _mode = set_grad_enabled(true);
    for i in 0..data.len() {
        let (x, y) = data.batch(&[i])?;
        let j = input_gradient(model, &x.with_grad(), &y, false)?;
        let path = dir.as_ref().join(format!("{name}_{i:04}.{ext}"));
        let mut buf = Vec::new();
        write_pnm(&mut buf, &render_saliency(j.data()), shape)?;
        fs::write(&path, buf)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Lag-1 spatial autocorrelation of an `[h, w, c]` map: the mean product of
/// horizontally and vertically adjacent centred values over the variance.
/// A constant map scores 0.
pub fn smoothness<T: Real>(j: &[T], shape: [usize; 3]) -> f64 {
    let [h, w, c] = shape;
    let v: Vec<f64> = j.iter().map(|x| x.as_f64()).collect();
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len().max(1) as f64;
    if var <= 0.0 {
        return 0.0;
    }
    let at = |i: usize, k: usize, ch: usize| v[(i * w + k) * c + ch] - mean;
    let (mut acc, mut pairs) = (0.0, 0usize);
    for i in 0..h {
        for k in 0..w {
            for ch in 0..c {
                if k + 1 < w {
                    acc += at(i, k, ch) * at(i, k + 1, ch);
                    pairs += 1;
                }
                if i + 1 < h {
                    acc += at(i, k, ch) * at(i + 1, k, ch);
                    pairs += 1;
                }
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        acc / pairs as f64 / var
    }
}

/// Mean `smoothness` of per-sample input gradients over `data`.
pub fn mean_smoothness<T: Real>(model: &Model<T>, data: &Dataset<T>, batch_size: usize) -> Result<f64> {
    let _mode = set_grad_enabled(true);
    let d: usize = data.shape().iter().product();
    let mut total = 0.0;
    for idx in data.batch_indices::<ChaCha8Rng>(batch_size.max(1), None) {
        let (x, y) = data.batch(&idx)?;
        let j = input_gradient(model, &x.with_grad(), &y, false)?;
        total += j.data().chunks(d).map(|s| smoothness(s, data.shape())).sum::<f64>();
    }
    Ok(total / data.len().max(1) as f64)
}

/// One evaluated point of a landscape grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub a: f64,
    pub b: f64,
    pub loss: f64,
    pub class: usize,
}

/// Unit-norm Gaussian direction of the given shape.
pub fn random_direction<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    Tensor::from_vec(shape, v.into_iter().map(|x| T::lit(x / norm)).collect())
}

/// Cross-entropy and predicted class at `x + a * adv_dir + b * rand_dir` for
/// `a, b` on a `resolution x resolution` grid over `[-extent, extent]`
/// (row-major in `a`). With odd `resolution` the centre point is exactly `x`.
pub fn loss_landscape_grid<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    label: usize,
    adv_dir: &Tensor<T>,
    rand_dir: &Tensor<T>,
    extent: f64,
    resolution: usize,
) -> Result<Vec<GridPoint>> {
    if x.shape()[0] != 1 || adv_dir.shape() != x.shape() || rand_dir.shape() != x.shape() {
        return Err(Error::shape(
            "landscape",
            format!("x {:?}, directions {:?} / {:?}", x.shape(), adv_dir.shape(), rand_dir.shape()),
        ));
    }
    let _mode = set_grad_enabled(false);
    let y = one_hot(&[label], model.num_classes())?;
    let coord = |i: usize| {
        if resolution <= 1 {
            0.0
        } else {
            extent * (2.0 * i as f64 - (resolution - 1) as f64) / (resolution - 1) as f64
        }
    };
    let mut grid = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for k in 0..resolution {
            let (a, b) = (coord(i), coord(k));
            let p = x.add(&adv_dir.scale(T::lit(a))?)?.add(&rand_dir.scale(T::lit(b))?)?;
            let z = model.logits(&p)?;
            grid.push(GridPoint {
                a,
                b,
                loss: xent_per_sample(&z, &y)?.item()?.as_f64(),
                class: crate::attacks::argmax(z.data()),
            });
        }
    }
    Ok(grid)
}

pub fn write_grid_csv<W: Write>(grid: &[GridPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["a", "b", "loss", "class"]).map_err(csv_err)?;
    for p in grid {
        out.write_record([p.a.to_string(), p.b.to_string(), p.loss.to_string(), p.class.to_string()])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Spearman rank correlation (average ranks for ties); exploratory only.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}
