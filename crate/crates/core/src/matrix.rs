//! Minimal dense row-major matrix. The policy and flow tables here are a few
//! hundred entries, so a flat `Vec` beats pulling in a linear algebra stack.

use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Matrix { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == m), "ragged rows");
        Matrix { rows: n, cols: m, data: rows.into_iter().flatten().collect() }
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Scales row `r` to sum 1; leaves an all-zero row untouched and reports it.
    pub fn normalize_row(&mut self, r: usize) -> bool {
        let total: T = self.row(r).iter().copied().sum();
        if total <= T::zero() {
            return false;
        }
        for v in self.row_mut(r) {
            *v /= total;
        }
        true
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Squared Frobenius norm of `self - other`.
    pub fn diff_sq(&self, other: &Self) -> T {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum()
    }
}

// Serialized as nested row arrays so the JSON stays human-readable.
impl<T: Scalar + Serialize> Serialize for Matrix<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[T]> = (0..self.rows).map(|r| self.row(r)).collect();
        rows.serialize(s)
    }
}

impl<'de, T: Scalar + Deserialize<'de>> Deserialize<'de> for Matrix<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows: Vec<Vec<T>> = Vec::deserialize(d)?;
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(Matrix::from_rows(rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_and_norms() {
        let mut m = Matrix::from_rows(vec![vec![1.0, 3.0], vec![0.0, 0.0]]);
        assert!(m.normalize_row(0));
        assert!(!m.normalize_row(1));
        assert_eq!(m.row(0), &[0.25, 0.75]);
        let id = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((id.frobenius_sq() - 2.0f64).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip() {
        let m = Matrix::from_rows(vec![vec![0.1, 0.2], vec![0.3, 0.4]]);
        let s = serde_json::to_string(&m).unwrap();
        let back: Matrix<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
    }
}
