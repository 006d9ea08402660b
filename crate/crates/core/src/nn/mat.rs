//! Minimal dense matrix used by the numerical kernels.
//!
//! Row-major `f64` storage. Only the handful of operations the GRU and dense
//! layers need are provided; anything fancier belongs to the call sites.

use std::ops::{Index, IndexMut};

use rand::Rng;

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    /// Builds a matrix from row slices. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        assert!(
            rows.iter().all(|r| r.len() == cols),
            "ragged rows: expected width {cols}"
        );
        let mut data = Vec::with_capacity(n * cols);
        for row in rows {
            data.extend_from_slice(row);
        }
        Mat {
            rows: n,
            cols,
            data,
        }
    }

    /// Glorot-style uniform init: entries drawn from U(-s, s) with
    /// s = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-s..s))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// out += Wᵀ x, where W is m×n, x has length m and out length n.
///
/// Loop order runs along rows so the inner loop is a contiguous scan.
pub fn add_wt_x(out: &mut [f64], w: &Mat, x: &[f64]) {
    debug_assert_eq!(w.rows, x.len());
    debug_assert_eq!(w.cols, out.len());
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = w.row(i);
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += wij * xi;
        }
    }
}

/// out += W y, where W is m×n, y has length n and out length m.
pub fn add_w_y(out: &mut [f64], w: &Mat, y: &[f64]) {
    debug_assert_eq!(w.rows, out.len());
    debug_assert_eq!(w.cols, y.len());
    for (o, i) in out.iter_mut().zip(0..w.rows) {
        let row = w.row(i);
        *o += row.iter().zip(y).map(|(&wij, &yj)| wij * yj).sum::<f64>();
    }
}

/// dW += x yᵀ (outer product), where dW is m×n, x has length m, y length n.
pub fn add_outer(dw: &mut Mat, x: &[f64], y: &[f64]) {
    debug_assert_eq!(dw.rows, x.len());
    debug_assert_eq!(dw.cols, y.len());
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = dw.row_mut(i);
        for (d, &yj) in row.iter_mut().zip(y) {
            *d += xi * yj;
        }
    }
}
