//! Compressed sparse storage shared by the forward operator (column-major) and
//! the beamformer (row-major).

use rayon::prelude::*;

/// Compressed storage along an "outer" dimension: column-compressed when the
/// outer index is the column, row-compressed when it is the row.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub outer_len: usize,
    pub inner_len: usize,
    pub ptr: Vec<usize>,
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl Compressed {
    pub fn from_parts(
        outer_len: usize,
        inner_len: usize,
        ptr: Vec<usize>,
        idx: Vec<u32>,
        val: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(ptr.len(), outer_len + 1);
        debug_assert_eq!(idx.len(), val.len());
        Self {
            outer_len,
            inner_len,
            ptr,
            idx,
            val,
        }
    }

    /// Like [`Compressed::from_parts`] but validates the structure, for data
    /// read from disk.
    pub fn checked(outer_len: usize, inner_len: usize, ptr: Vec<usize>, idx: Vec<u32>, val: Vec<f64>) -> crate::Result<Self> {
        let bad = |m: &str| crate::Error::Format(format!("sparse structure: {m}"));
        if ptr.len() != outer_len + 1 || ptr[0] != 0 || ptr[outer_len] != idx.len() || idx.len() != val.len() {
            return Err(bad("pointer array inconsistent with entry count"));
        }
        if ptr.windows(2).any(|w| w[1] < w[0]) {
            return Err(bad("pointers not monotone"));
        }
        if idx.iter().any(|&i| i as usize >= inner_len) {
            return Err(bad("index out of range"));
        }
        Ok(Self::from_parts(outer_len, inner_len, ptr, idx, val))
    }

    /// Assembles from per-outer entry lists (already in inner order).
    pub fn from_lanes(inner_len: usize, lanes: Vec<(Vec<u32>, Vec<f64>)>) -> Self {
        let outer_len = lanes.len();
        let mut ptr = Vec::with_capacity(outer_len + 1);
        ptr.push(0);
        let total: usize = lanes.iter().map(|l| l.0.len()).sum();
        let mut idx = Vec::with_capacity(total);
        let mut val = Vec::with_capacity(total);
        for (i, v) in lanes {
            idx.extend_from_slice(&i);
            val.extend_from_slice(&v);
            ptr.push(idx.len());
        }
        Self::from_parts(outer_len, inner_len, ptr, idx, val)
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    #[inline]
    pub fn lane(&self, o: usize) -> (&[u32], &[f64]) {
        let r = self.ptr[o]..self.ptr[o + 1];
        (&self.idx[r.clone()], &self.val[r])
    }

    /// `out[o] = sum_i val(o,i) x[i]` for every outer index.
    pub fn lane_dots(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outer_len)
            .into_par_iter()
            .map(|o| {
                let (idx, val) = self.lane(o);
                idx.iter()
                    .zip(val)
                    .map(|(&i, &v)| v * x[i as usize])
                    .sum()
            })
            .collect()
    }

    /// `out[i] += val(o,i) x[o]` summed over outer indices.
    pub fn scatter(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inner_len];
        for (o, &xo) in x.iter().enumerate() {
            if xo == 0.0 {
                continue;
            }
            let (idx, val) = self.lane(o);
            for (&i, &v) in idx.iter().zip(val) {
                out[i as usize] += v * xo;
            }
        }
        out
    }

    /// Same matrix, compressed along the other dimension.
    pub fn transpose(&self) -> Compressed {
        let mut counts = vec![0usize; self.inner_len + 1];
        for &i in &self.idx {
            counts[i as usize + 1] += 1;
        }
        for i in 0..self.inner_len {
            counts[i + 1] += counts[i];
        }
        let ptr = counts.clone();
        let mut next = counts;
        let mut idx = vec![0u32; self.nnz()];
        let mut val = vec![0.0; self.nnz()];
        for o in 0..self.outer_len {
            let (li, lv) = self.lane(o);
            for (&i, &v) in li.iter().zip(lv) {
                let dst = next[i as usize];
                idx[dst] = o as u32;
                val[dst] = v;
                next[i as usize] += 1;
            }
        }
        Compressed::from_parts(self.inner_len, self.outer_len, ptr, idx, val)
    }

    pub fn approx_bytes(&self) -> usize {
        self.ptr.len() * 8 + self.idx.len() * 4 + self.val.len() * 8
    }
}
