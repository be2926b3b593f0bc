//! Orthogonal periodic Daubechies-4 transform on power-of-two grids.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const NORM: f64 = 4.0 * std::f64::consts::SQRT_2;
/// Scaling filter.
const H: [f64; 4] = [
    (1.0 + SQRT3) / NORM,
    (3.0 + SQRT3) / NORM,
    (3.0 - SQRT3) / NORM,
    (1.0 - SQRT3) / NORM,
];
/// Wavelet filter `g_k = (-1)^k h_{3-k}`.
const G: [f64; 4] = [H[3], -H[2], H[1], -H[0]];

/// Smallest power-of-two edge that holds `n` and supports `levels` levels.
pub fn padded_edge(n: usize, levels: usize) -> usize {
    n.next_power_of_two().max(1 << (levels + 1))
}

fn forward_1d(x: &mut [Complex64], tmp: &mut Vec<Complex64>) {
    let n = x.len();
    let half = n / 2;
    tmp.clear();
    tmp.resize(n, Complex64::new(0.0, 0.0));
    for i in 0..half {
        let (mut a, mut d) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
        for k in 0..4 {
            let v = x[(2 * i + k) % n];
            a += v * H[k];
            d += v * G[k];
        }
        tmp[i] = a;
        tmp[half + i] = d;
    }
    x.copy_from_slice(tmp);
}

fn inverse_1d(x: &mut [Complex64], tmp: &mut Vec<Complex64>) {
    let n = x.len();
    let half = n / 2;
    tmp.clear();
    tmp.resize(n, Complex64::new(0.0, 0.0));
    for i in 0..half {
        let (a, d) = (x[i], x[half + i]);
        for k in 0..4 {
            tmp[(2 * i + k) % n] += a * H[k] + d * G[k];
        }
    }
    x.copy_from_slice(tmp);
}

/// Applies `f` to every row and then every column of the top-left `n x n` block.
fn separable(x: &mut Array2<Complex64>, n: usize, f: fn(&mut [Complex64], &mut Vec<Complex64>)) {
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut tmp = Vec::with_capacity(n);
    for r in 0..n {
        for c in 0..n {
            line[c] = x[[r, c]];
        }
        f(&mut line, &mut tmp);
        for c in 0..n {
            x[[r, c]] = line[c];
        }
    }
    for c in 0..n {
        for r in 0..n {
            line[r] = x[[r, c]];
        }
        f(&mut line, &mut tmp);
        for r in 0..n {
            x[[r, c]] = line[r];
        }
    }
}

fn check(x: &Array2<Complex64>, levels: usize) -> Result<usize> {
    let (h, w) = x.dim();
    if h != w || !h.is_power_of_two() || h < (1 << (levels + 1)) {
        return Err(Error::InvalidArgument(format!(
            "wavelet grid {h}x{w} must be square, a power of two and hold {levels} levels"
        )));
    }
    Ok(h)
}

pub fn forward(x: &Array2<Complex64>, levels: usize) -> Result<Array2<Complex64>> {
    let n = check(x, levels)?;
    let mut out = x.clone();
    for l in 0..levels {
        separable(&mut out, n >> l, forward_1d);
    }
    Ok(out)
}

pub fn inverse(c: &Array2<Complex64>, levels: usize) -> Result<Array2<Complex64>> {
    let n = check(c, levels)?;
    let mut out = c.clone();
    for l in (0..levels).rev() {
        separable(&mut out, n >> l, inverse_1d);
    }
    Ok(out)
}
