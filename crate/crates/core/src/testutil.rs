//! Helpers shared by unit tests.

use crate::linalg::DenseMatrix;

macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
    }};
}
pub(crate) use assert_close;

/// Entries uniform in [-1, 1) from a fixed LCG, independent of the crate's RNG plumbing.
pub(crate) fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    DenseMatrix::from_fn(rows, cols, |_, _| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}
