use crate::scene::{Query, Scene};

/// Row-major binary relevance of queries (columns) to images (rows).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<bool>,
}

impl LabelMatrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let values = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect();
        LabelMatrix { rows, cols, values }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| i == j)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.values[i * self.cols + j]
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn row_has_positive(&self, i: usize) -> bool {
        (0..self.cols).any(|j| self.get(i, j))
    }

    pub fn col_has_positive(&self, j: usize) -> bool {
        (0..self.rows).any(|i| self.get(i, j))
    }
}

/// Entry `(i, j)` is true iff query `j` is true of scene `i`.
pub fn label_matrix(images: &[&Scene], queries: &[&Query]) -> LabelMatrix {
    LabelMatrix::from_fn(images.len(), queries.len(), |i, j| queries[j].is_true_of(images[i]))
}
