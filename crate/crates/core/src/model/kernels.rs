//! Row-major dense kernels and their backward passes.
//!
//! Weights are stored `[out][in]`, so a linear layer computes
//! `y[t][o] = b[o] + dot(x[t], w[o])`.

use super::real::Real;

pub const LN_EPS: f64 = 1e-5;

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `out[n][o] = b[o] + x[n] . w[o]`
pub fn linear<T: Real>(out: &mut [T], x: &[T], w: &[T], b: &[T], n: usize, inp: usize, o: usize) {
    for t in 0..n {
        let xr = &x[t * inp..(t + 1) * inp];
        let yr = &mut out[t * o..(t + 1) * o];
        for (j, y) in yr.iter_mut().enumerate() {
            *y = b[j] + dot(xr, &w[j * inp..(j + 1) * inp]);
        }
    }
}

/// Accumulates gradients of [`linear`] into `dx`, `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    dout: &[T],
    x: &[T],
    w: &[T],
    n: usize,
    inp: usize,
    o: usize,
) {
    for t in 0..n {
        let dy = &dout[t * o..(t + 1) * o];
        let xr = &x[t * inp..(t + 1) * inp];
        let dxr = &mut dx[t * inp..(t + 1) * inp];
        for (j, &g) in dy.iter().enumerate() {
            if g == T::ZERO {
                continue;
            }
            let wr = &w[j * inp..(j + 1) * inp];
            axpy(g, wr, dxr);
            axpy(g, xr, &mut dw[j * inp..(j + 1) * inp]);
            db[j] += g;
        }
    }
}

/// Layer normalization over rows of width `c`; records mean and 1/std.
#[allow(clippy::too_many_arguments)]
pub fn layernorm<T: Real>(
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
    x: &[T],
    gain: &[T],
    bias: &[T],
    n: usize,
    c: usize,
) {
    let inv_c = T::from_f64(1.0 / c as f64);
    let eps = T::from_f64(LN_EPS);
    for t in 0..n {
        let xr = &x[t * c..(t + 1) * c];
        let mut m = T::ZERO;
        for &v in xr {
            m += v;
        }
        m *= inv_c;
        let mut var = T::ZERO;
        for &v in xr {
            let d = v - m;
            var += d * d;
        }
        var *= inv_c;
        let r = T::ONE / (var + eps).sqrt();
        let yr = &mut out[t * c..(t + 1) * c];
        for i in 0..c {
            yr[i] = (xr[i] - m) * r * gain[i] + bias[i];
        }
        mean[t] = m;
        rstd[t] = r;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Real>(
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
    dout: &[T],
    x: &[T],
    gain: &[T],
    mean: &[T],
    rstd: &[T],
    n: usize,
    c: usize,
) {
    let inv_c = T::from_f64(1.0 / c as f64);
    for t in 0..n {
        let dy = &dout[t * c..(t + 1) * c];
        let xr = &x[t * c..(t + 1) * c];
        let (m, r) = (mean[t], rstd[t]);
        let mut sum_dn = T::ZERO;
        let mut sum_dn_xhat = T::ZERO;
        for i in 0..c {
            let xhat = (xr[i] - m) * r;
            let dn = dy[i] * gain[i];
            sum_dn += dn;
            sum_dn_xhat += dn * xhat;
        }
        let mean_dn = sum_dn * inv_c;
        let mean_dn_xhat = sum_dn_xhat * inv_c;
        let dxr = &mut dx[t * c..(t + 1) * c];
        for i in 0..c {
            let xhat = (xr[i] - m) * r;
            dbias[i] += dy[i];
            dgain[i] += dy[i] * xhat;
            dxr[i] += (dy[i] * gain[i] - mean_dn - xhat * mean_dn_xhat) * r;
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(out: &mut [T], x: &[T]) {
    let s = T::from_f64(GELU_SCALE);
    let k = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    for (y, &v) in out.iter_mut().zip(x) {
        let u = s * (v + k * v * v * v);
        *y = half * v * (T::ONE + u.tanh());
    }
}

pub fn gelu_backward<T: Real>(dx: &mut [T], x: &[T], dout: &[T]) {
    let s = T::from_f64(GELU_SCALE);
    let k = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    for ((d, &v), &g) in dx.iter_mut().zip(x).zip(dout) {
        let u = s * (v + k * v * v * v);
        let th = u.tanh();
        let sech2 = T::ONE - th * th;
        let local = half * (T::ONE + th) + half * v * sech2 * s * (T::ONE + three * k * v * v);
        *d += local * g;
    }
}

/// In-place numerically stable softmax.
pub fn softmax<T: Real>(row: &mut [T]) {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.max(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Natural log of the softmax normalizer for `row`.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mut m = row[0];
    for &v in row {
        m = m.max(v);
    }
    let mut sum = T::ZERO;
    for &v in row {
        sum += (v - m).exp();
    }
    m + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative() {
        let xs = [-3.0, -0.7, 0.0, 0.4, 2.5];
        for &x in &xs {
            let f = |v: &[f64]| {
                let mut o = [0.0];
                gelu(&mut o, v);
                o[0]
            };
            let mut d = [0.0];
            gelu_backward(&mut d, &[x], &[1.0]);
            assert!((d[0] - numeric(f, &[x])[0]).abs() < 1e-7);
        }
    }

    #[test]
    fn layernorm_gradient() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let gain = [1.1, 0.9, -0.5, 2.0];
        let bias = [0.1, 0.0, -0.2, 0.3];
        let weights = [0.5, -1.0, 2.0, 0.25];
        let loss = |xv: &[f64]| {
            let mut o = [0.0; 4];
            let (mut m, mut r) = ([0.0], [0.0]);
            layernorm(&mut o, &mut m, &mut r, xv, &gain, &bias, 1, 4);
            o.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut o = [0.0; 4];
        let (mut m, mut r) = ([0.0], [0.0]);
        layernorm(&mut o, &mut m, &mut r, &x, &gain, &bias, 1, 4);
        let mut dx = [0.0; 4];
        let (mut dg, mut db) = ([0.0; 4], [0.0; 4]);
        layernorm_backward(&mut dx, &mut dg, &mut db, &weights, &x, &gain, &m, &r, 1, 4);
        for (a, b) in dx.iter().zip(numeric(loss, &x)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = [1000.0f32, 999.0, -5.0];
        softmax(&mut r);
        assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let lse = log_sum_exp(&[0.0f64; 16]);
        assert!((lse - 16f64.ln()).abs() < 1e-12);
    }
}
