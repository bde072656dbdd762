mod common;

use common::gaussian;
use dolfin::linalg::{
    orthonormality_error, principal_angles, project_complement, qr_orthonormalize, thin_svd, DenseMatrix,
};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..12, 1usize..8, any::<u64>()).prop_map(|(a, b, s)| (a.max(b), b, s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qr_columns_are_orthonormal_and_span_the_input((rows, cols, seed) in shape()) {
        let m = gaussian(rows, cols, seed);
        let q = qr_orthonormalize(&m).unwrap();
        prop_assert!(orthonormality_error(&q) <= 1e-12);
        let residual = project_complement(&q, &m).unwrap();
        prop_assert!(residual.frobenius_norm() <= 1e-10 * m.frobenius_norm().max(1.0));
    }

    #[test]
    fn svd_reconstructs_with_sorted_nonnegative_values((rows, cols, seed) in shape(), transpose in any::<bool>()) {
        let mut m = gaussian(rows, cols, seed);
        if transpose {
            m = m.transpose();
        }
        let svd = thin_svd(&m).unwrap();
        let k = m.rows().min(m.cols());
        prop_assert_eq!(svd.singular_values.len(), k);
        prop_assert!(svd.singular_values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(svd.singular_values.iter().all(|&s| s >= 0.0));
        prop_assert!(orthonormality_error(&svd.u) <= 1e-10);
        prop_assert!(orthonormality_error(&svd.v) <= 1e-10);
        let err = svd.reconstruct().max_abs_diff(&m).unwrap();
        prop_assert!(err <= 1e-10 * m.frobenius_norm().max(1.0), "reconstruction error {err}");
    }

    #[test]
    fn complement_projection_is_orthogonal_and_idempotent((rows, cols, seed) in shape(), n in 1usize..6) {
        let basis = qr_orthonormalize(&gaussian(rows, cols, seed)).unwrap();
        let h = gaussian(rows, n, seed ^ 0x5a5a);
        let p = project_complement(&basis, &h).unwrap();
        prop_assert!(basis.t_matmul(&p).unwrap().frobenius_norm() <= 1e-12 * h.frobenius_norm().max(1.0));
        let twice = project_complement(&basis, &p).unwrap();
        prop_assert!(twice.max_abs_diff(&p).unwrap() <= 1e-12);
    }

    #[test]
    fn principal_angles_vanish_for_a_rotated_basis((rows, cols, seed) in shape()) {
        let q = qr_orthonormalize(&gaussian(rows, cols, seed)).unwrap();
        let mix = qr_orthonormalize(&gaussian(cols, cols, seed.wrapping_add(1))).unwrap();
        let rotated = q.matmul(&mix).unwrap();
        let angles = principal_angles(&q, &rotated).unwrap();
        prop_assert_eq!(angles.len(), cols);
        prop_assert!(angles.iter().all(|a| a.abs() <= 1e-7), "{:?}", angles);
    }
}

#[test]
fn principal_angles_of_orthogonal_planes_are_right_angles() {
    let e = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    };
    let a = DenseMatrix::from_columns(4, &[e(0), e(1)]);
    let b = DenseMatrix::from_columns(4, &[e(2), e(3)]);
    for angle in principal_angles(&a, &b).unwrap() {
        assert!((angle - std::f64::consts::FRAC_PI_2).abs() <= 1e-12);
    }
}

#[test]
fn qr_rejects_dependent_columns() {
    let c = vec![1.0, 2.0, 3.0];
    let m = DenseMatrix::from_columns(3, &[c.clone(), c]);
    assert!(qr_orthonormalize(&m).is_err());
}
