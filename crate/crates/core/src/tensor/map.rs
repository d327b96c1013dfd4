use alloc::vec::Vec;

use crate::Real;

/// Fixed linear map between flat buffers, stored row-wise (CSR).
///
/// Every data-movement op in the model (permutes, window partitioning,
/// cyclic shifts, padding, patch gathering, pooling, bilinear resampling)
/// is one of these, so they share one forward and one backward.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap<T> {
    in_len: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    /// `None` means every stored entry has weight one.
    weights: Option<Vec<T>>,
}

impl<T: Real> SparseMap<T> {
    /// `out[i] = x[index[i]]`, or zero where the index is `None`.
    pub fn gather(in_len: usize, index: impl IntoIterator<Item = Option<usize>>) -> Self {
        let mut row_ptr = Vec::new();
        let mut cols = Vec::new();
        row_ptr.push(0);
        for ix in index {
            if let Some(c) = ix {
                assert!(c < in_len, "gather index {c} out of range {in_len}");
                cols.push(c);
            }
            row_ptr.push(cols.len());
        }
        SparseMap {
            in_len,
            row_ptr,
            cols,
            weights: None,
        }
    }

    /// `out[i] = Σ w · x[col]` over the entries of row `i`.
    pub fn weighted<R>(in_len: usize, rows: impl IntoIterator<Item = R>) -> Self
    where
        R: IntoIterator<Item = (usize, T)>,
    {
        let mut row_ptr = Vec::new();
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, w) in row {
                assert!(c < in_len, "map column {c} out of range {in_len}");
                cols.push(c);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        SparseMap {
            in_len,
            row_ptr,
            cols,
            weights: Some(weights),
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (lo..hi).map(move |e| {
            let w = self.weights.as_ref().map_or(T::one(), |w| w[e]);
            (self.cols[e], w)
        })
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.in_len);
        let mut out = Vec::with_capacity(self.out_len());
        match &self.weights {
            None => {
                for i in 0..self.out_len() {
                    let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
                    let mut acc = T::zero();
                    for &c in &self.cols[lo..hi] {
                        acc += x[c];
                    }
                    out.push(acc);
                }
            }
            Some(w) => {
                for i in 0..self.out_len() {
                    let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
                    let mut acc = T::zero();
                    for e in lo..hi {
                        acc += w[e] * x[self.cols[e]];
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    /// `gx += Mᵀ g`
    pub fn apply_transpose_acc(&self, g: &[T], gx: &mut [T]) {
        assert_eq!(g.len(), self.out_len());
        assert_eq!(gx.len(), self.in_len);
        for (i, &gi) in g.iter().enumerate() {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            match &self.weights {
                None => {
                    for &c in &self.cols[lo..hi] {
                        gx[c] += gi;
                    }
                }
                Some(w) => {
                    for e in lo..hi {
                        gx[self.cols[e]] += w[e] * gi;
                    }
                }
            }
        }
    }
}
