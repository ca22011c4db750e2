use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Spatial extent of a grid, `(height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extent {
    pub h: usize,
    pub w: usize,
}

impl Extent {
    pub const fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub const fn area(self) -> usize {
        self.h * self.w
    }
}

/// Sparse linear map between two grids, applied independently per channel.
///
/// Along each axis, growing uses corner-aligned bilinear interpolation
/// (`src = dst * (n_in - 1) / (n_out - 1)`; a single source sample is
/// broadcast). Shrinking uses the adjoint of the matching interpolation,
/// normalised so every output is a convex combination of its inputs. With
/// that pairing `down(from, to)` is the least-squares-friendly partner of
/// `up(to, from)`: the weights of output cell `i` are exactly the weights
/// with which cell `i` is spread onto the fine grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ResamplePlan {
    from: Extent,
    to: Extent,
    /// For each output cell, `(input cell, weight)` pairs with nonzero weight.
    taps: Vec<Vec<(usize, f64)>>,
}

/// One-axis weights: for each output index the `(input index, weight)` list.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    if n_out >= n_in {
        interpolate(n_in, n_out)
    } else {
        // Adjoint of interpolate(n_out -> n_in), rows normalised.
        let up = interpolate(n_out, n_in);
        let mut rows = vec![Vec::new(); n_out];
        for (fine, taps) in up.iter().enumerate() {
            for &(coarse, w) in taps {
                rows[coarse].push((fine, w));
            }
        }
        for row in &mut rows {
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            for (_, w) in row.iter_mut() {
                *w /= total;
            }
        }
        rows
    }
}

fn interpolate(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 {
                return vec![(0, 1.0)];
            }
            if n_out == 1 {
                return vec![(0, 1.0)];
            }
            // Exact rational position o*(n_in-1)/(n_out-1).
            let num = o * (n_in - 1);
            let den = n_out - 1;
            let i0 = num / den;
            let rem = num % den;
            if rem == 0 {
                vec![(i0, 1.0)]
            } else {
                let frac = rem as f64 / den as f64;
                vec![(i0, 1.0 - frac), (i0 + 1, frac)]
            }
        })
        .collect()
}

impl ResamplePlan {
    pub fn new(from: Extent, to: Extent) -> Result<Self> {
        if from.area() == 0 || to.area() == 0 {
            return Err(contract("resample extents must be positive"));
        }
        let ys = axis_weights(from.h, to.h);
        let xs = axis_weights(from.w, to.w);
        let mut taps = Vec::with_capacity(to.area());
        for ty in &ys {
            for tx in &xs {
                let mut cell = Vec::with_capacity(ty.len() * tx.len());
                for &(iy, wy) in ty {
                    for &(ix, wx) in tx {
                        cell.push((iy * from.w + ix, wy * wx));
                    }
                }
                taps.push(cell);
            }
        }
        Ok(Self { from, to, taps })
    }

    pub fn from(&self) -> Extent {
        self.from
    }

    pub fn to(&self) -> Extent {
        self.to
    }

    pub fn is_identity(&self) -> bool {
        self.from == self.to
    }

    #[cfg(test)]
    fn taps(&self) -> &[Vec<(usize, f64)>] {
        &self.taps
    }

    /// Applies the plan to a `[from.area() x channels]` row-major grid.
    pub fn apply(&self, src: &[f64], channels: usize) -> Vec<f64> {
        debug_assert_eq!(src.len(), self.from.area() * channels);
        if self.is_identity() {
            return src.to_vec();
        }
        let mut out = vec![0.0; self.to.area() * channels];
        for (o, cell) in self.taps.iter().enumerate() {
            let dst = &mut out[o * channels..(o + 1) * channels];
            for &(i, w) in cell {
                let s = &src[i * channels..(i + 1) * channels];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        }
        out
    }

    /// Adjoint application, accumulating into `grad_src`.
    pub(crate) fn apply_adjoint(&self, grad_out: &[f64], channels: usize, grad_src: &mut [f64]) {
        if self.is_identity() {
            for (g, v) in grad_src.iter_mut().zip(grad_out) {
                *g += v;
            }
            return;
        }
        for (o, cell) in self.taps.iter().enumerate() {
            let go = &grad_out[o * channels..(o + 1) * channels];
            for &(i, w) in cell {
                let gs = &mut grad_src[i * channels..(i + 1) * channels];
                for (g, v) in gs.iter_mut().zip(go) {
                    *g += w * v;
                }
            }
        }
    }
}
