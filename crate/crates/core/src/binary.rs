use serde::{Deserialize, Serialize};

/// Dense row-major n×K binary matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> bool {
        self.data[i * self.cols + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, k: usize, v: bool) {
        self.data[i * self.cols + k] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [bool] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, k: usize) -> Vec<bool> {
        (0..self.rows).map(|i| self.get(i, k)).collect()
    }

    pub fn column_count(&self, k: usize) -> usize {
        (0..self.rows).filter(|&i| self.get(i, k)).count()
    }

    /// Row-major flattening as 0/1 bytes.
    pub fn to_flat(&self) -> Vec<u8> {
        self.data.iter().map(|&b| b as u8).collect()
    }

    pub fn from_flat(rows: usize, cols: usize, flat: &[u8]) -> Option<Self> {
        if flat.len() != rows * cols || flat.iter().any(|&v| v > 1) {
            return None;
        }
        Some(Self {
            rows,
            cols,
            data: flat.iter().map(|&v| v == 1).collect(),
        })
    }
}
