use super::{Matrix, Rng};
use crate::error::{dim_err, Result};

/// Glorot (Xavier) uniform initialization: entries iid in `[-a, a]` with
/// `a = sqrt(6 / (rows + cols))`.
pub fn glorot_uniform_init(rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(dim_err!("glorot init needs nonzero dims, got {rows}x{cols}"));
    }
    let bound = glorot_bound(rows, cols);
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn glorot_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}
