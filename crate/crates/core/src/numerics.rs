//! Dense f32 kernels shared by the engine and the model builders.
//!
//! Every kernel accumulates in f32 in a fixed loop order, so repeated calls on
//! identical inputs are bit-identical. [`vec_mat`] and [`matmul`] use the same
//! inner loop, which makes a one-row [`matmul`] equal to [`vec_mat`] exactly.

use crate::error::{Error, Result};

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values do not fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape(format!(
                "ragged rows: expected {cols} columns, found {}",
                bad.len()
            )));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f32;
    fn index(&self, (r, c): (usize, usize)) -> &f32 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f32 {
        &mut self.data[r * self.cols + c]
    }
}

/// `out += v[k] * m.row(k)` for `k` in `rows`, the shared inner loop.
#[inline]
fn accumulate_rows(out: &mut [f32], v: &[f32], m: &Matrix, rows: std::ops::Range<usize>) {
    for (k, &vk) in rows.zip(v) {
        for (o, &w) in out.iter_mut().zip(m.row(k)) {
            *o += vk * w;
        }
    }
}

/// Standard matrix product `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        accumulate_rows(out.row_mut(i), a.row(i), b, 0..b.rows);
    }
    Ok(out)
}

/// Row vector times matrix.
pub fn vec_mat(v: &[f32], m: &Matrix) -> Result<Vec<f32>> {
    if v.len() != m.rows {
        return Err(Error::Shape(format!(
            "cannot multiply 1x{} by {}x{}",
            v.len(),
            m.rows,
            m.cols
        )));
    }
    let mut out = vec![0.0; m.cols];
    accumulate_rows(&mut out, v, m, 0..m.rows);
    Ok(out)
}

/// `v` times the row band `m[row_start .. row_start + v.len()]`.
pub fn vec_mat_rows(v: &[f32], m: &Matrix, row_start: usize) -> Result<Vec<f32>> {
    let end = row_start + v.len();
    if end > m.rows {
        return Err(Error::Shape(format!(
            "row band {row_start}..{end} exceeds {}x{}",
            m.rows, m.cols
        )));
    }
    let mut out = vec![0.0; m.cols];
    accumulate_rows(&mut out, v, m, row_start..end);
    Ok(out)
}

pub fn softmax_row(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!(
            "{what} has length {got}, expected {expected}"
        )));
    }
    Ok(())
}

/// `(v - mean) / sqrt(var + eps) * gain + shift`, population variance.
pub fn layer_norm(v: &[f32], gain: &[f32], shift: &[f32], eps: f32) -> Result<Vec<f32>> {
    check_len("gain", v.len(), gain.len())?;
    check_len("shift", v.len(), shift.len())?;
    if v.is_empty() {
        return Err(Error::Shape("layer_norm of an empty vector".into()));
    }
    let n = v.len() as f32;
    let mean = v.iter().sum::<f32>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    Ok(v.iter()
        .zip(gain.iter().zip(shift))
        .map(|(x, (g, s))| (x - mean) * inv * g + s)
        .collect())
}

/// `v / sqrt(mean(v²) + eps) * gain`.
pub fn rms_norm(v: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    check_len("gain", v.len(), gain.len())?;
    if v.is_empty() {
        return Err(Error::Shape("rms_norm of an empty vector".into()));
    }
    let ms = v.iter().map(|x| x * x).sum::<f32>() / v.len() as f32;
    let inv = 1.0 / (ms + eps).sqrt();
    Ok(v.iter().zip(gain).map(|(x, g)| x * inv * g).collect())
}

/// Tanh-approximated GELU.
pub fn gelu(v: &[f32]) -> Vec<f32> {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    v.iter()
        .map(|&x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh()))
        .collect()
}

/// `silu(v) ⊙ g`.
pub fn silu_gate(v: &[f32], g: &[f32]) -> Result<Vec<f32>> {
    check_len("gate", v.len(), g.len())?;
    Ok(v.iter()
        .zip(g)
        .map(|(&x, &gate)| x / (1.0 + (-x).exp()) * gate)
        .collect())
}

/// Rotary position embedding over consecutive (even, odd) pairs.
pub fn rotary(v: &[f32], position: usize, base: f32) -> Result<Vec<f32>> {
    if !v.len().is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "rotary needs an even length, got {}",
            v.len()
        )));
    }
    let d = v.len() as f32;
    let mut out = v.to_vec();
    for (i, pair) in out.chunks_exact_mut(2).enumerate() {
        let freq = base.powf(-((2 * i) as f32) / d);
        let angle = position as f32 * freq;
        let (sin, cos) = angle.sin_cos();
        let (x0, x1) = (pair[0], pair[1]);
        pair[0] = x0 * cos - x1 * sin;
        pair[1] = x0 * sin + x1 * cos;
    }
    Ok(out)
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f32]) -> f32 {
    dot(v, v).sqrt()
}

pub fn add_assign(acc: &mut [f32], v: &[f32]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_identity() {
        let x = m(&[&[1.5, -2.0, 3.0], &[0.0, 4.0, -1.0], &[7.0, 8.0, 9.0]]);
        assert_eq!(matmul(&Matrix::identity(3), &x).unwrap(), x);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let err = matmul(&a, &a).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("2x3 by 2x3"));
    }

    #[test]
    fn vec_mat_matches_single_row_matmul() {
        let w = m(&[&[0.1, 0.2, 0.3], &[-0.4, 0.5, 0.6]]);
        let v = [0.7f32, -1.1];
        let row = matmul(&m(&[&v]), &w).unwrap();
        assert_eq!(vec_mat(&v, &w).unwrap(), row.row(0));
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax_row(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let big = softmax_row(&[1000.0, 0.0]).unwrap();
        assert_eq!(big, vec![1.0, 0.0]);
        assert!(softmax_row(&[]).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let ones = [1.0f32; 2];
        let zeros = [0.0f32; 2];
        let c = layer_norm(&[3.0, 3.0], &ones, &zeros, 1e-5).unwrap();
        assert_eq!(c, vec![0.0, 0.0]);
        let pm = layer_norm(&[1.0, -1.0], &ones, &zeros, 1e-12).unwrap();
        assert!((pm[0] - 1.0).abs() < 1e-5 && (pm[1] + 1.0).abs() < 1e-5);
        let s = layer_norm(&[1.0, 5.0], &zeros, &[0.5, -0.5], 1e-5).unwrap();
        assert_eq!(s, vec![0.5, -0.5]);
        assert!(layer_norm(&[1.0], &ones, &zeros, 1e-5).is_err());
    }

    #[test]
    fn rms_norm_scales_by_inverse_rms() {
        let v = [3.0f32, -4.0];
        let rms = ((9.0f32 + 16.0) / 2.0).sqrt();
        let out = rms_norm(&v, &[1.0, 1.0], 0.0).unwrap();
        assert!((out[0] - 3.0 / rms).abs() < 1e-6);
        assert!((out[1] + 4.0 / rms).abs() < 1e-6);
    }

    #[test]
    fn activations() {
        assert_eq!(gelu(&[0.0]), vec![0.0]);
        assert!((gelu(&[3.0])[0] - 2.9964).abs() < 1e-3);
        let s = silu_gate(&[0.0, 1.0], &[5.0, 2.0]).unwrap();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 2.0 / (1.0 + (-1.0f32).exp())).abs() < 1e-6);
        assert!(silu_gate(&[1.0], &[]).is_err());
    }

    #[test]
    fn rotary_position_zero_is_identity() {
        let v = [0.3f32, -0.2, 1.5, 2.0];
        assert_eq!(rotary(&v, 0, 10000.0).unwrap(), v.to_vec());
        let r = rotary(&v, 7, 10000.0).unwrap();
        assert!((norm(&r) - norm(&v)).abs() < 1e-5);
        assert!(rotary(&[1.0], 1, 10000.0).is_err());
    }

    fn mat4() -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0f32..2.0, 16).prop_map(|d| Matrix::from_vec(4, 4, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in mat4(), b in mat4(), c in mat4()) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() <= 1e-4 * l.abs().max(r.abs()).max(1.0));
            }
        }

        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50.0f32..50.0, 16), k in -100.0f32..100.0) {
            let s = softmax_row(&v).unwrap();
            prop_assert!((s.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            prop_assert!(s.iter().all(|&x| x >= 0.0));
            let shifted: Vec<f32> = v.iter().map(|x| x + k).collect();
            let t = softmax_row(&shifted).unwrap();
            // x + k itself rounds at ulp(150) ~ 1.5e-5
            for (a, b) in s.iter().zip(&t) {
                prop_assert!((a - b).abs() <= 1e-4);
            }
        }

        #[test]
        fn layer_norm_standardizes(v in proptest::collection::vec(-10.0f32..10.0, 32)) {
            let mean = v.iter().sum::<f32>() / 32.0;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / 32.0;
            prop_assume!(var > 1.0);
            let out = layer_norm(&v, &[1.0; 32], &[0.0; 32], 1e-5).unwrap();
            let om = out.iter().sum::<f32>() / 32.0;
            let ov = out.iter().map(|x| (x - om).powi(2)).sum::<f32>() / 32.0;
            prop_assert!(om.abs() <= 1e-6);
            prop_assert!((ov - 1.0).abs() <= 1e-4);
        }

        #[test]
        fn kernels_are_deterministic(v in proptest::collection::vec(-5.0f32..5.0, 8)) {
            let g = [1.1f32; 8];
            prop_assert_eq!(rms_norm(&v, &g, 1e-5).unwrap(), rms_norm(&v, &g, 1e-5).unwrap());
            prop_assert_eq!(gelu(&v), gelu(&v));
            prop_assert_eq!(rotary(&v, 3, 100.0).unwrap(), rotary(&v, 3, 100.0).unwrap());
        }
    }
}
