//! Tensor primitives for the temporal-convolution classifier: 1-D
//! convolution with "same" zero padding, batch norm, ReLU, mean pooling,
//! the fully connected head, and softmax cross-entropy. Everything comes
//! in forward + analytic-backward pairs and is generic over f32/f64 so the
//! gradient oracle can run the identical code in double precision.

use ndarray::{Array1, Array2, Array3};
use num_traits::Float;

pub trait Scalar:
    Float + num_traits::NumCast + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        num_traits::NumCast::from(v).unwrap()
    }
    fn to_f64_(self) -> f64 {
        num_traits::NumCast::from(self).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// TF-style "same" padding under stride: output length ceil(t / stride).
pub fn same_padding(t: usize, k: usize, stride: usize) -> (usize, usize) {
    let t_out = t.div_ceil(stride);
    let pad_total = ((t_out - 1) * stride + k).saturating_sub(t);
    (pad_total / 2, t_out)
}

/// x: [B, Cin, T], w: [Cout, Cin, K] -> [B, Cout, ceil(T/stride)].
pub fn conv1d<F: Scalar>(x: &Array3<F>, w: &Array3<F>, stride: usize) -> Array3<F> {
    let (b, cin, t) = x.dim();
    let (cout, cin_w, k) = w.dim();
    assert_eq!(cin, cin_w, "channel mismatch");
    let (pad_left, t_out) = same_padding(t, k, stride);
    let mut y = Array3::<F>::zeros((b, cout, t_out));
    for bi in 0..b {
        for co in 0..cout {
            for to in 0..t_out {
                let base = (to * stride) as isize - pad_left as isize;
                let mut acc = F::zero();
                for ci in 0..cin {
                    for kk in 0..k {
                        let idx = base + kk as isize;
                        if idx >= 0 && (idx as usize) < t {
                            acc = acc + w[[co, ci, kk]] * x[[bi, ci, idx as usize]];
                        }
                    }
                }
                y[[bi, co, to]] = acc;
            }
        }
    }
    y
}

/// Gradients of conv1d w.r.t. input and weight.
pub fn conv1d_backward<F: Scalar>(
    x: &Array3<F>,
    w: &Array3<F>,
    stride: usize,
    grad_out: &Array3<F>,
) -> (Array3<F>, Array3<F>) {
    let (b, cin, t) = x.dim();
    let (cout, _, k) = w.dim();
    let (pad_left, t_out) = same_padding(t, k, stride);
    assert_eq!(grad_out.dim(), (b, cout, t_out));
    let mut gx = Array3::<F>::zeros((b, cin, t));
    let mut gw = Array3::<F>::zeros((cout, cin, k));
    for bi in 0..b {
        for co in 0..cout {
            for to in 0..t_out {
                let g = grad_out[[bi, co, to]];
                if g == F::zero() {
                    continue;
                }
                let base = (to * stride) as isize - pad_left as isize;
                for ci in 0..cin {
                    for kk in 0..k {
                        let idx = base + kk as isize;
                        if idx >= 0 && (idx as usize) < t {
                            let i = idx as usize;
                            gw[[co, ci, kk]] = gw[[co, ci, kk]] + g * x[[bi, ci, i]];
                            gx[[bi, ci, i]] = gx[[bi, ci, i]] + g * w[[co, ci, kk]];
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Per-channel batch statistics over (B, T); variance is biased (/N).
pub struct BnCache<F> {
    pub xhat: Array3<F>,
    pub inv_std: Array1<F>,
}

pub struct BnStats<F> {
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

pub fn bn_forward_train<F: Scalar>(
    x: &Array3<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
    eps: f64,
) -> (Array3<F>, BnStats<F>, BnCache<F>) {
    let (b, c, t) = x.dim();
    let n = F::from_f64((b * t) as f64);
    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);
    for ci in 0..c {
        let mut s = F::zero();
        for bi in 0..b {
            for ti in 0..t {
                s = s + x[[bi, ci, ti]];
            }
        }
        let m = s / n;
        let mut v = F::zero();
        for bi in 0..b {
            for ti in 0..t {
                let d = x[[bi, ci, ti]] - m;
                v = v + d * d;
            }
        }
        mean[ci] = m;
        var[ci] = v / n;
    }
    let mut xhat = Array3::<F>::zeros((b, c, t));
    let mut inv_std = Array1::<F>::zeros(c);
    let mut y = Array3::<F>::zeros((b, c, t));
    for ci in 0..c {
        let is = (var[ci] + F::from_f64(eps)).sqrt().recip();
        inv_std[ci] = is;
        for bi in 0..b {
            for ti in 0..t {
                let xh = (x[[bi, ci, ti]] - mean[ci]) * is;
                xhat[[bi, ci, ti]] = xh;
                y[[bi, ci, ti]] = gamma[ci] * xh + beta[ci];
            }
        }
    }
    (y, BnStats { mean, var }, BnCache { xhat, inv_std })
}

pub fn bn_forward_eval<F: Scalar>(
    x: &Array3<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
    run_mean: &Array1<F>,
    run_var: &Array1<F>,
    eps: f64,
) -> Array3<F> {
    let (b, c, t) = x.dim();
    let mut y = Array3::<F>::zeros((b, c, t));
    for ci in 0..c {
        let is = (run_var[ci] + F::from_f64(eps)).sqrt().recip();
        for bi in 0..b {
            for ti in 0..t {
                y[[bi, ci, ti]] = gamma[ci] * (x[[bi, ci, ti]] - run_mean[ci]) * is + beta[ci];
            }
        }
    }
    y
}

/// Backward through train-mode batch norm (batch statistics are part of
/// the computation graph).
pub fn bn_backward<F: Scalar>(
    grad_out: &Array3<F>,
    gamma: &Array1<F>,
    cache: &BnCache<F>,
) -> (Array3<F>, Array1<F>, Array1<F>) {
    let (b, c, t) = grad_out.dim();
    let n = F::from_f64((b * t) as f64);
    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);
    for ci in 0..c {
        let mut dg = F::zero();
        let mut db = F::zero();
        for bi in 0..b {
            for ti in 0..t {
                let g = grad_out[[bi, ci, ti]];
                dg = dg + g * cache.xhat[[bi, ci, ti]];
                db = db + g;
            }
        }
        dgamma[ci] = dg;
        dbeta[ci] = db;
    }
    let mut gx = Array3::<F>::zeros((b, c, t));
    for ci in 0..c {
        let k = gamma[ci] * cache.inv_std[ci] / n;
        for bi in 0..b {
            for ti in 0..t {
                let g = grad_out[[bi, ci, ti]];
                gx[[bi, ci, ti]] =
                    k * (n * g - dbeta[ci] - cache.xhat[[bi, ci, ti]] * dgamma[ci]);
            }
        }
    }
    (gx, dgamma, dbeta)
}

pub fn relu<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward<F: Scalar>(grad_out: &Array3<F>, y: &Array3<F>) -> Array3<F> {
    let mut gx = grad_out.clone();
    ndarray::Zip::from(&mut gx).and(y).for_each(|g, &v| {
        if v <= F::zero() {
            *g = F::zero();
        }
    });
    gx
}

/// Global average over the time axis: [B, C, T] -> [B, C].
pub fn mean_pool<F: Scalar>(x: &Array3<F>) -> Array2<F> {
    let (b, c, t) = x.dim();
    let n = F::from_f64(t as f64);
    let mut y = Array2::<F>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut s = F::zero();
            for ti in 0..t {
                s = s + x[[bi, ci, ti]];
            }
            y[[bi, ci]] = s / n;
        }
    }
    y
}

pub fn mean_pool_backward<F: Scalar>(grad_out: &Array2<F>, t: usize) -> Array3<F> {
    let (b, c) = grad_out.dim();
    let inv = F::from_f64(1.0 / t as f64);
    let mut gx = Array3::<F>::zeros((b, c, t));
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out[[bi, ci]] * inv;
            for ti in 0..t {
                gx[[bi, ci, ti]] = g;
            }
        }
    }
    gx
}

/// x: [B, C], w: [K, C], b: [K] -> [B, K].
pub fn linear<F: Scalar>(x: &Array2<F>, w: &Array2<F>, bias: &Array1<F>) -> Array2<F> {
    let (b, c) = x.dim();
    let (k, _) = w.dim();
    let mut y = Array2::<F>::zeros((b, k));
    for bi in 0..b {
        for ki in 0..k {
            let mut acc = bias[ki];
            for ci in 0..c {
                acc = acc + w[[ki, ci]] * x[[bi, ci]];
            }
            y[[bi, ki]] = acc;
        }
    }
    y
}

pub fn linear_backward<F: Scalar>(
    x: &Array2<F>,
    w: &Array2<F>,
    grad_out: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let (b, c) = x.dim();
    let (k, _) = w.dim();
    let mut gx = Array2::<F>::zeros((b, c));
    let mut gw = Array2::<F>::zeros((k, c));
    let mut gb = Array1::<F>::zeros(k);
    for bi in 0..b {
        for ki in 0..k {
            let g = grad_out[[bi, ki]];
            gb[ki] = gb[ki] + g;
            for ci in 0..c {
                gw[[ki, ci]] = gw[[ki, ci]] + g * x[[bi, ci]];
                gx[[bi, ci]] = gx[[bi, ci]] + g * w[[ki, ci]];
            }
        }
    }
    (gx, gw, gb)
}

pub fn softmax_rows<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let (b, k) = logits.dim();
    let mut p = Array2::<F>::zeros((b, k));
    for bi in 0..b {
        let row = logits.row(bi);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for ki in 0..k {
            let e = (logits[[bi, ki]] - max).exp();
            p[[bi, ki]] = e;
            z = z + e;
        }
        for ki in 0..k {
            p[[bi, ki]] = p[[bi, ki]] / z;
        }
    }
    p
}

/// Mean categorical cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<F: Scalar>(
    logits: &Array2<F>,
    labels: &[usize],
) -> (F, Array2<F>) {
    let (b, k) = logits.dim();
    assert_eq!(labels.len(), b);
    let p = softmax_rows(logits);
    let inv_b = F::from_f64(1.0 / b as f64);
    let mut loss = F::zero();
    let mut grad = Array2::<F>::zeros((b, k));
    for bi in 0..b {
        let y = labels[bi];
        loss = loss - p[[bi, y]].max(F::from_f64(1e-30)).ln();
        for ki in 0..k {
            let target = if ki == y { F::one() } else { F::zero() };
            grad[[bi, ki]] = (p[[bi, ki]] - target) * inv_b;
        }
    }
    (loss * inv_b, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn same_padding_arithmetic() {
        // k=9 s=2, even T
        assert_eq!(same_padding(96, 9, 2), (3, 48));
        // k=3 s=1
        assert_eq!(same_padding(97, 3, 1), (1, 97));
        // k=1 s=2
        assert_eq!(same_padding(96, 1, 2), (0, 48));
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = Array3::from_shape_fn((1, 1, 5), |(_, _, t)| t as f64);
        let w = Array3::from_shape_fn((1, 1, 1), |_| 1.0);
        let y = conv1d(&x, &w, 1);
        assert_eq!(y, x);
    }

    #[test]
    fn conv1d_stride_two_halves_length() {
        let x = Array3::<f64>::zeros((2, 3, 10));
        let w = Array3::<f64>::zeros((4, 3, 9));
        assert_eq!(conv1d(&x, &w, 2).dim(), (2, 4, 5));
    }

    #[test]
    fn bn_train_normalizes() {
        let x = Array3::from_shape_fn((2, 1, 4), |(b, _, t)| (b * 4 + t) as f64);
        let gamma = arr1(&[1.0]);
        let beta = arr1(&[0.0]);
        let (y, stats, _) = bn_forward_train(&x, &gamma, &beta, 1e-5);
        let mean: f64 = y.iter().sum::<f64>() / 8.0;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-2);
        assert!((stats.mean[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let logits = Array2::<f64>::zeros((3, 11));
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 5, 10]);
        assert!((loss - (11f64).ln()).abs() < 1e-12);
        // gradient rows sum to zero
        for row in grad.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    // Finite-difference checks of each primitive in f64.
    fn fd_check<G: Fn(&Array3<f64>) -> f64>(x: &Array3<f64>, analytic: &Array3<f64>, f: G) {
        let eps = 1e-6;
        let mut x2 = x.clone();
        for idx in ndarray::indices(x.dim()) {
            let orig = x2[idx];
            x2[idx] = orig + eps;
            let up = f(&x2);
            x2[idx] = orig - eps;
            let down = f(&x2);
            x2[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic[idx];
            assert!(
                (fd - a).abs() < 1e-6 * (1.0 + a.abs()),
                "idx {idx:?}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn conv_backward_matches_fd() {
        let mut rng = crate::rng::SplitMix64::new(12);
        let x = Array3::from_shape_fn((2, 3, 7), |_| rng.next_gaussian());
        let w = Array3::from_shape_fn((2, 3, 3), |_| rng.next_gaussian() * 0.5);
        // scalar objective: weighted sum of outputs
        let coef = Array3::from_shape_fn(conv1d(&x, &w, 2).dim(), |_| rng.next_gaussian());
        let obj_x = |xx: &Array3<f64>| (conv1d(xx, &w, 2) * &coef).sum();
        let (gx, gw) = conv1d_backward(&x, &w, 2, &coef);
        fd_check(&x, &gx, obj_x);
        let obj_w = |ww: &Array3<f64>| (conv1d(&x, ww, 2) * &coef).sum();
        fd_check(&w, &gw, obj_w);
    }

    #[test]
    fn bn_backward_matches_fd() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let x = Array3::from_shape_fn((3, 2, 5), |_| rng.next_gaussian());
        let gamma = arr1(&[1.3, 0.7]);
        let beta = arr1(&[0.1, -0.2]);
        let coef = Array3::from_shape_fn((3, 2, 5), |_| rng.next_gaussian());
        let obj = |xx: &Array3<f64>| {
            let (y, _, _) = bn_forward_train(xx, &gamma, &beta, 1e-5);
            (y * &coef).sum()
        };
        let (_, _, cache) = bn_forward_train(&x, &gamma, &beta, 1e-5);
        let (gx, _, _) = bn_backward(&coef, &gamma, &cache);
        fd_check(&x, &gx, obj);
    }
}
