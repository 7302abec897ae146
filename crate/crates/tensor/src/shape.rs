//! Shape arithmetic shared by the kernels.

use crate::error::{shape_err, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// NumPy-style broadcast of two shapes (right aligned, extent 1 stretches).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Strides of `shape` viewed as broadcast into `target` (0 on stretched axes).
pub fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = target.len() - shape.len();
    (0..target.len()).map(|i| if i < offset || shape[i - offset] == 1 { 0 } else { own[i - offset] }).collect()
}

/// Normalize and validate an axis list, returning a sorted, deduplicated copy.
pub fn check_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut v = axes.to_vec();
    v.sort_unstable();
    v.dedup();
    if let Some(&bad) = v.iter().find(|&&a| a >= rank) {
        return Err(shape_err!("axis {bad} out of range for rank {rank}"));
    }
    Ok(v)
}

/// Row-major multi-index walker that tracks up to two strided offsets.
pub(crate) struct Odometer<'a> {
    shape: &'a [usize],
    index: Vec<usize>,
}

impl<'a> Odometer<'a> {
    pub fn new(shape: &'a [usize]) -> Self {
        Self { shape, index: vec![0; shape.len()] }
    }

    /// Advance by one element, updating `offsets[j]` with `strides[j]`.
    #[inline]
    pub fn step<const K: usize>(&mut self, strides: [&[usize]; K], offsets: &mut [usize; K]) {
        for d in (0..self.shape.len()).rev() {
            self.index[d] += 1;
            for j in 0..K {
                offsets[j] += strides[j][d];
            }
            if self.index[d] < self.shape[d] {
                return;
            }
            for j in 0..K {
                offsets[j] -= strides[j][d] * self.shape[d];
            }
            self.index[d] = 0;
        }
    }
}
