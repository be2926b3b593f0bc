//! Two-dimensional FFTs over row-major buffers.
//!
//! Transforms are unnormalized in both directions; callers apply the
//! `1/sqrt(rows * cols)` factor where the unitary convention is wanted.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

#[derive(Clone, Copy)]
enum Direction {
    Forward,
    Inverse,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty FFT grid");
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// In-place forward transform, `X[m] = sum_u x[u] exp(-2 pi i m u / n)`.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.process(data, Direction::Forward);
    }

    /// In-place inverse transform without the `1/n` factor.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.process(data, Direction::Inverse);
    }

    fn process(&self, data: &mut [Complex64], dir: Direction) {
        assert_eq!(
            data.len(),
            self.rows * self.cols,
            "buffer does not match FFT grid"
        );
        let (row, col) = match dir {
            Direction::Forward => (&self.row_fwd, &self.col_fwd),
            Direction::Inverse => (&self.row_inv, &self.col_inv),
        };
        let scratch_len = row
            .get_inplace_scratch_len()
            .max(col.get_inplace_scratch_len());
        let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];

        row.process_with_scratch(data, &mut scratch);

        let mut t = vec![Complex64::new(0.0, 0.0); data.len()];
        transpose(data, &mut t, self.rows, self.cols);
        col.process_with_scratch(&mut t, &mut scratch);
        transpose(&t, data, self.cols, self.rows);
    }
}

/// `src` is `rows x cols` row-major; `dst` receives the `cols x rows` transpose.
fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const BLOCK: usize = 16;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Unitary forward 2-D DFT (uncentred: bin `[0, 0]` is DC).
pub fn fft2_unitary(image: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = image.dim();
    let plan = Fft2::new(h, w);
    let mut buf: Vec<Complex64> = image.iter().copied().collect();
    plan.forward(&mut buf);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= scale);
    Array2::from_shape_vec((h, w), buf).expect("shape preserved")
}
