//! Fixed sinusoidal position tables.

use crate::masking::PatchGrid;
use crate::numerics::Tensor;

/// Standard sin/cos encoding of a scalar position into `dim` values.
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

/// `[len × d]` table over packed-sequence indices.
pub fn sequence_table(len: usize, d: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..len).map(|p| sinusoid(p as f64, d)).collect();
    Tensor::new(vec![len, d], rows.concat()).expect("table shape")
}

/// 2-D encoding of a patch: the first half of the width encodes the row,
/// the second half the column.
pub fn patch_encoding(grid: PatchGrid, patch: usize, d: usize) -> Vec<f64> {
    let (r, c) = grid.coords(patch);
    let row_dim = d - d / 2;
    let mut out = sinusoid(r as f64, row_dim);
    out.extend(sinusoid(c as f64, d / 2));
    out
}

/// `[N × d]` table of [`patch_encoding`] for every patch in raster order.
pub fn patch_table(grid: PatchGrid, d: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..grid.n()).map(|i| patch_encoding(grid, i, d)).collect();
    Tensor::new(vec![grid.n(), d], rows.concat()).expect("table shape")
}
