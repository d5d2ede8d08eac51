use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

type T64 = Tensor<f64>;

fn t(shape: &[usize], v: &[f64]) -> T64 {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// Softmax cross-entropy with one-hot rows, mean over the batch.
fn xent(logits: &T64, onehot: &T64) -> crate::Result<T64> {
    let n = logits.shape()[0] as f64;
    logits.log_softmax()?.mul(onehot)?.sum()?.scale(-1.0 / n)
}

#[test]
fn avg_pool_of_two_by_two() {
    let x = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
    let y = x.avg_pool2d(2, 2).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[2.5]);
}

#[test]
fn relu_clamps_negatives() {
    let y = t(&[3], &[-1.0, 0.0, 2.0]).relu().unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn identity_matmul() {
    let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    let v = t(&[3, 1], &[0.3, -2.0, 7.5]);
    assert_eq!(eye.matmul(&v).unwrap().data(), v.data());
}

#[test]
fn square_gradient() {
    let x = t(&[1], &[3.0]).with_grad();
    let g = grad(&x.square().unwrap(), &[&x], false).unwrap();
    assert_eq!(g[0].data(), &[6.0]);
}

#[test]
fn nested_gradient_closed_form() {
    // L = theta * x^2, S = (dL/dx)^2 = (2 theta x)^2, dS/dtheta = 8 theta x^2
    let theta = t(&[1], &[1.0]).with_grad();
    let x = t(&[1], &[2.0]).with_grad();
    let l = theta.mul(&x.square().unwrap()).unwrap();
    let dl_dx = grad(&l, &[&x], true).unwrap().remove(0);
    assert_eq!(dl_dx.data(), &[4.0]);
    let s = dl_dx.square().unwrap();
    let ds = grad(&s, &[&theta], false).unwrap();
    assert_eq!(ds[0].data(), &[32.0]);
}

#[test]
fn softmax_xent_gradient_is_symmetric() {
    let z = t(&[1, 2], &[0.0, 0.0]).with_grad();
    let y = t(&[1, 2], &[1.0, 0.0]);
    let g = grad(&xent(&z, &y).unwrap(), &[&z], false).unwrap();
    assert_close(g[0].data(), &[-0.5, 0.5], 1e-15);
}

#[test]
fn error_paths() {
    let x = t(&[2], &[1.0, 2.0]).with_grad();
    let y = x.square().unwrap();
    assert_eq!(grad(&y, &[&x], false).unwrap_err(), Error::NotScalar(vec![2]));

    let s = y.sum().unwrap();
    let other = t(&[1], &[0.0]).with_grad();
    assert_eq!(grad(&s, &[&other], false).unwrap_err(), Error::Unreachable);

    let c = t(&[2], &[1.0, 2.0]);
    assert_eq!(grad(&s, &[&c], false).unwrap_err(), Error::GradDisabled);

    assert!(matches!(
        x.add(&t(&[3], &[0.0; 3])).unwrap_err(),
        Error::ShapeMismatch { .. }
    ));
    assert!(matches!(
        t(&[1], &[0.0]).log().unwrap_err(),
        Error::NonFiniteValue(_)
    ));
    assert!(Tensor::from_vec(&[2, 0], Vec::<f64>::new()).is_err());
}

#[test]
fn no_grad_records_nothing() {
    let x = t(&[2], &[1.0, 2.0]).with_grad();
    let y = no_grad(|| x.square().unwrap());
    assert!(!y.requires_grad());
    assert!(is_grad_enabled());
}

#[test]
fn sum_of_squares_matches_central_differences() {
    let p = t(&[3], &[1.0, 2.0, 3.0]);
    let err = finite_difference_check(|x| x.l2_norm_sq(), &p, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

struct Mlp {
    w1: T64,
    b1: T64,
    w2: T64,
    b2: T64,
}

impl Mlp {
    fn new(rng: &mut ChaCha8Rng, d: usize, h: usize, k: usize) -> Self {
        Mlp {
            w1: rand_t(&[d, h], rng),
            b1: rand_t(&[h], rng),
            w2: rand_t(&[h, k], rng),
            b2: rand_t(&[k], rng),
        }
    }

    fn logits(&self, x: &T64) -> crate::Result<T64> {
        x.matmul(&self.w1)?
            .add_row_bias(&self.b1)?
            .sigmoid()?
            .matmul(&self.w2)?
            .add_row_bias(&self.b2)
    }
}

#[test]
fn mlp_xent_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Mlp::new(&mut rng, 4, 5, 3);
    let y = t(&[2, 3], &[1., 0., 0., 0., 0., 1.]);
    let x = rand_t(&[2, 4], &mut rng);
    let err = finite_difference_check(|x| xent(&net.logits(x)?, &y), &x, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn input_gradient_norm_matches_central_differences() {
    // the scalar itself contains a first-order gradient; its gradient needs
    // the backward pass recorded with create_graph
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Mlp::new(&mut rng, 4, 5, 3);
    let y = t(&[2, 3], &[0., 1., 0., 1., 0., 0.]);
    let x = rand_t(&[2, 4], &mut rng);
    let f = |x: &T64| -> crate::Result<T64> {
        let xi = if x.requires_grad() { x.clone() } else { x.with_grad() };
        let _g = set_grad_enabled(true);
        let l = xent(&net.logits(&xi)?, &y)?;
        grad(&l, &[&xi], true)?.remove(0).l2_norm_sq()
    };
    let err = finite_difference_check(f, &x, 1e-5).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn gradient_is_linear_in_the_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&[6], &mut rng).with_grad();
    let f = x.exp().unwrap().sum().unwrap();
    let g = x.sigmoid().unwrap().square().unwrap().sum().unwrap();
    let (a, b) = (0.7, -2.3);
    let combo = f.scale(a).unwrap().add(&g.scale(b).unwrap()).unwrap();
    let gc = grad(&combo, &[&x], false).unwrap().remove(0);
    let gf = grad(&f, &[&x], false).unwrap().remove(0);
    let gg = grad(&g, &[&x], false).unwrap().remove(0);
    let expect: Vec<f64> = gf.data().iter().zip(gg.data()).map(|(p, q)| a * p + b * q).collect();
    assert_close(gc.data(), &expect, 1e-12);
}

/// Checks d/dx <grad f(x), v> against central differences of the
/// directional derivative for a scalar function of one tensor.
fn hvp_error(f: &dyn Fn(&T64) -> crate::Result<T64>, x: &T64, v: &T64) -> f64 {
    let dir = |p: &T64| -> crate::Result<T64> {
        let xi = p.with_grad();
        let _g = set_grad_enabled(true);
        let g = grad(&f(&xi)?, &[&xi], true)?.remove(0);
        g.mul(v)?.sum()
    };
    // analytic: gradient of the directional derivative
    let xi = x.with_grad();
    let dd = {
        let g = grad(&f(&xi).unwrap(), &[&xi], true).unwrap().remove(0);
        g.mul(v).unwrap().sum().unwrap()
    };
    let analytic = grad(&dd, &[&xi], false).unwrap().remove(0);
    let eps = 1e-5;
    let base = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let at = |d: f64| {
            let mut b = base.clone();
            b[i] += d;
            dir(&Tensor::from_vec(x.shape(), b).unwrap()).unwrap().item().unwrap()
        };
        let num = (at(eps) - at(-eps)) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - num).abs() / a.abs().max(1.0));
    }
    worst
}

#[test]
fn double_backprop_matches_directional_differences_per_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = rand_t(&[3, 4], &mut rng);
    let k = rand_t(&[3, 3, 2, 2], &mut rng);
    let tk = rand_t(&[3, 3, 2, 2], &mut rng);
    let c = rand_t(&[2, 3], &mut rng);
    let prims: Vec<(&str, Vec<usize>, Box<dyn Fn(&T64) -> crate::Result<T64>>)> = vec![
        ("mul", vec![2, 3], Box::new(|x: &T64| x.mul(&smooth_factor(x))?.sum())),
        ("div", vec![2, 3], Box::new(|x: &T64| x.div(&x.square()?.shift(1.5)?)?.sum())),
        ("exp", vec![2, 3], Box::new(|x: &T64| x.exp()?.sum())),
        ("log", vec![2, 3], Box::new(|x: &T64| x.square()?.shift(0.5)?.log()?.sum())),
        ("sigmoid", vec![2, 3], Box::new(|x: &T64| x.sigmoid()?.square()?.sum())),
        ("softplus", vec![2, 3], Box::new(|x: &T64| x.softplus()?.square()?.sum())),
        ("log_softmax", vec![2, 3], Box::new(|x: &T64| x.log_softmax()?.mul(&c)?.sum())),
        ("matmul", vec![2, 3], Box::new(|x: &T64| x.matmul(&w)?.square()?.sum())),
        ("matmul_tt", vec![3, 2], Box::new(|x: &T64| x.matmul_t(&x, true, false)?.square()?.sum())),
        ("sum_last", vec![2, 3], Box::new(|x: &T64| x.square()?.sum_last()?.square()?.sum())),
        ("sum_first", vec![2, 3], Box::new(|x: &T64| x.square()?.sum_first()?.square()?.sum())),
        (
            "conv2d",
            vec![1, 4, 4, 2],
            Box::new(|x: &T64| x.conv2d(&k, 2, 1)?.square()?.sum()),
        ),
        (
            "transpose_conv2d",
            vec![1, 2, 2, 2],
            Box::new(|x: &T64| x.transpose_conv2d(&tk, 2, 1, 1)?.square()?.sum()),
        ),
        (
            "pool+pad+slice",
            vec![1, 4, 4, 2],
            Box::new(|x: &T64| {
                x.avg_pool2d(2, 2)?
                    .pad_constant(1, 1, 4, 4, 0.0)?
                    .slice2d(0, 1, 3, 3)?
                    .square()?
                    .sum()
            }),
        ),
        (
            "concat+narrow",
            vec![2, 3],
            Box::new(|x: &T64| {
                let y = concat(&[x, &x.square()?])?;
                y.narrow(1, 2)?.exp()?.sum()
            }),
        ),
    ];
    for (name, shape, f) in &prims {
        let x = rand_t(shape, &mut rng);
        let v = rand_t(shape, &mut rng);
        let err = hvp_error(f.as_ref(), &x, &v);
        assert!(err < 1e-3, "{name}: {err}");
    }
}

fn smooth_factor(x: &T64) -> T64 {
    x.square().unwrap().scale(0.5).unwrap().exp().unwrap()
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, h, w, cin, cout, k, s, p) = (2, 5, 4, 3, 2, 3, 2, 1);
    let x = rand_t(&[n, h, w, cin], &mut rng);
    let f = rand_t(&[k, k, cin, cout], &mut rng);
    let y = x.conv2d(&f, s, p).unwrap();
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    assert_eq!(y.shape(), &[n, oh, ow, cout]);
    let xd = x.data();
    let fd = f.data();
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ki in 0..k {
                        for kj in 0..k {
                            let ii = (oi * s + ki) as isize - p as isize;
                            let jj = (oj * s + kj) as isize - p as isize;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += xd[((b * h + ii as usize) * w + jj as usize) * cin + ci]
                                    * fd[((ki * k + kj) * cin + ci) * cout + co];
                            }
                        }
                    }
                    let got = y.data()[((b * oh + oi) * ow + oj) * cout + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn transpose_conv_places_filter_stencil() {
    // direct scatter oracle: out[i*s - p + ki, j*s - p + kj, co] += x[i,j,ci] * w[ki,kj,co,ci]
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (h, w, cin, cout, k, s, p, op) = (3, 3, 2, 1, 3, 2, 1, 1);
    let x = rand_t(&[1, h, w, cin], &mut rng);
    let f = rand_t(&[k, k, cout, cin], &mut rng);
    let y = x.transpose_conv2d(&f, s, p, op).unwrap();
    let oh = (h - 1) * s + k + op - 2 * p;
    assert_eq!(y.shape(), &[1, oh, oh, cout]);
    let mut expect = vec![0.0; oh * oh * cout];
    for i in 0..h {
        for j in 0..w {
            for ci in 0..cin {
                for ki in 0..k {
                    for kj in 0..k {
                        let oi = (i * s + ki) as isize - p as isize;
                        let oj = (j * s + kj) as isize - p as isize;
                        if oi < 0 || oj < 0 || oi >= oh as isize || oj >= oh as isize {
                            continue;
                        }
                        for co in 0..cout {
                            expect[(oi as usize * oh + oj as usize) * cout + co] += x.data()
                                [(i * w + j) * cin + ci]
                                * f.data()[((ki * k + kj) * cout + co) * cin + ci];
                        }
                    }
                }
            }
        }
    }
    assert_close(y.data(), &expect, 1e-12);

    // a delta at the centre pixel stamps the filter around (2*1 - 1, 2*1 - 1)
    let mut delta = vec![0.0; h * w];
    delta[4] = 1.0;
    let d = Tensor::from_vec(&[1, h, w, 1], delta).unwrap();
    let stencil: Vec<f64> = (1..=9).map(f64::from).collect();
    let sf = Tensor::from_vec(&[3, 3, 1, 1], stencil.clone()).unwrap();
    let out = d.transpose_conv2d(&sf, 2, 1, 1).unwrap();
    for ki in 0..3 {
        for kj in 0..3 {
            assert_eq!(out.data()[(1 + ki) * 6 + 1 + kj], stencil[ki * 3 + kj]);
        }
    }
    assert_eq!(out.data().iter().sum::<f64>(), stencil.iter().sum::<f64>());
}

#[test]
fn conv_and_transpose_conv_are_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = rand_t(&[3, 3, 2, 3], &mut rng);
    let x = rand_t(&[1, 6, 6, 2], &mut rng);
    let y = rand_t(&[1, 3, 3, 3], &mut rng);
    let cx = x.conv2d(&f, 2, 1).unwrap();
    let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    // transpose-conv filter layout is [k, k, c_out, c_in] of the adjoint map
    let ty = y.transpose_conv2d(&f, 2, 1, 1).unwrap();
    let rhs: f64 = ty.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
}

#[test]
fn avg_pool_equals_bilinear_halving() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_t(&[2, 6, 8, 3], &mut rng);
    let pooled = x.avg_pool2d(2, 2).unwrap();
    let g = sparse::Hwc::new(6, 8, 3);
    let resized = x.apply_map(&sparse::bilinear(g, 3, 4), &[3, 4, 3]).unwrap();
    assert_eq!(pooled.data(), resized.data());
}

#[test]
fn runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::new(&mut rng, 3, 4, 2);
        let x = rand_t(&[3, 3], &mut rng).with_grad();
        let y = t(&[3, 2], &[1., 0., 0., 1., 1., 0.]);
        let l = xent(&net.logits(&x).unwrap(), &y).unwrap();
        let j = grad(&l, &[&x], true).unwrap().remove(0);
        let s = j.l2_norm_sq().unwrap();
        (l.to_vec(), j.to_vec(), grad(&s, &[&x], false).unwrap()[0].to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn global_avg_pool_and_concat() {
    let x = t(&[1, 2, 2, 2], &[1., 10., 2., 20., 3., 30., 4., 40.]);
    assert_eq!(x.global_avg_pool().unwrap().data(), &[2.5, 25.0]);
    let a = t(&[1, 2], &[1., 2.]);
    let b = t(&[2, 2], &[3., 4., 5., 6.]);
    let c = concat(&[&a, &b]).unwrap();
    assert_eq!(c.shape(), &[3, 2]);
    assert_eq!(c.data(), &[1., 2., 3., 4., 5., 6.]);
}
