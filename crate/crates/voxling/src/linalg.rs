//! Dense row-major matrices and the small numeric kernels the models use.
//!
//! Everything is f64; training-time gradient checks rely on 64-bit
//! arithmetic end to end.

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// self += alpha * other (same shape).
    pub fn add_scaled(&mut self, other: &Mat, alpha: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}

/// y = x · W for a row vector x (len = W.rows); returns len W.cols.
pub fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    vec_mat_into(x, w, &mut out);
    out
}

/// out = x · W, overwriting out. Iterates W by rows so access stays contiguous.
pub fn vec_mat_into(x: &[f64], w: &Mat, out: &mut [f64]) {
    assert_eq!(x.len(), w.rows());
    assert_eq!(out.len(), w.cols());
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &xi) in x.iter().enumerate() {
        let row = w.row(i);
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Backward of `vec_mat`: accumulates dW += x ⊗ dy and returns dx = W dy.
pub fn vec_mat_backward(x: &[f64], w: &Mat, dy: &[f64], dw: &mut Mat) -> Vec<f64> {
    assert_eq!(x.len(), w.rows());
    assert_eq!(dy.len(), w.cols());
    let mut dx = vec![0.0; x.len()];
    for (i, &xi) in x.iter().enumerate() {
        let wrow = w.row(i);
        let drow = dw.row_mut(i);
        let mut acc = 0.0;
        for ((dwij, &wij), &dyj) in drow.iter_mut().zip(wrow).zip(dy) {
            *dwij += xi * dyj;
            acc += wij * dyj;
        }
        dx[i] = acc;
    }
    dx
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// log Σ exp(x), stable.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Backward through softmax: given probabilities `p` and upstream `dp`,
/// returns dlogits = p ⊙ (dp − p·dp).
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let s = dot(p, dp);
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - s)).collect()
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation (divides by n).
pub fn std_pop(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_mat_matches_manual() {
        let w = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let y = vec_mat(&[1.0, 0.5, 2.0], &w);
        assert_eq!(y, vec![1.0 + 1.5 + 10.0, 2.0 + 2.0 + 12.0]);
    }

    #[test]
    fn vec_mat_backward_accumulates() {
        let w = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut dw = Mat::zeros(2, 2);
        let dx = vec_mat_backward(&[2.0, -1.0], &w, &[1.0, 0.5], &mut dw);
        assert_eq!(dx, vec![1.0 * 1.0 + 2.0 * 0.5, 3.0 * 1.0 + 4.0 * 0.5]);
        assert_eq!(dw.row(0), &[2.0, 1.0]);
        assert_eq!(dw.row(1), &[-1.0, -0.5]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut x = vec![1.0, 2.0, 3.0, -50.0];
        softmax_in_place(&mut x);
        assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(x[2] > x[1] && x[1] > x[0]);
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let logits = vec![0.3, -0.7, 1.1, 0.2];
        let dp = vec![0.9, -0.2, 0.4, 0.05];
        let f = |l: &[f64]| {
            let mut p = l.to_vec();
            softmax_in_place(&mut p);
            dot(&p, &dp)
        };
        let mut p = logits.clone();
        softmax_in_place(&mut p);
        let analytic = softmax_backward(&p, &dp);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            lp[i] += h;
            let mut lm = logits.clone();
            lm[i] -= h;
            let fd = (f(&lp) - f(&lm)) / (2.0 * h);
            assert!((analytic[i] - fd).abs() < 1e-8, "coord {i}");
        }
    }

    #[test]
    fn std_pop_matches_hand_value() {
        assert!((std_pop(&[1.0, 0.0, 1.0, 0.0]) - 0.5).abs() < 1e-15);
    }
}
