mod common;

use common::*;
use kgp::kronalg::{eig_factors, inverse_apply, kron_matvec, logdet_from_eigs, sum_ln, FieldTensor, KronOperator};
use kgp::linalg::{self, DenseMatrix};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

const ID_TOL: f64 = 1e-10;

fn op(fs: &[DMatrix<f64>]) -> KronOperator {
    KronOperator::new(fs.iter().map(from_na).collect()).unwrap()
}

fn dense_of(op: &KronOperator) -> DMatrix<f64> {
    to_na(&op.to_dense(usize::MAX).unwrap())
}

fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    rel_inf(a.as_slice(), b.as_slice())
}

fn config() -> ProptestConfig {
    ProptestConfig { cases: 100, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn blocked_log_sum_matches_naive(xs in proptest::collection::vec(1e-300f64..1e300, 0..500)) {
        let naive: f64 = xs.iter().map(|x| x.ln()).sum();
        prop_assert!((sum_ln(xs.iter().copied()) - naive).abs() <= 1e-12 * naive.abs().max(1.0) + 1e-12);
    }


    #[test]
    fn to_dense_matches_textbook_kron(seed in any::<u64>(), dims in prop::collection::vec((1usize..=6, 1usize..=6), 1..=4)) {
        let mut r = rng(seed);
        let fs: Vec<_> = dims.iter().map(|&(a, b)| random_matrix(&mut r, a, b)).collect();
        prop_assert!(rel_mat(&dense_of(&op(&fs)), &brute_kron_all(&fs)) <= 1e-14);
    }

    #[test]
    fn kron_matvec_matches_dense(seed in any::<u64>(), dims in prop::collection::vec((1usize..=6, 1usize..=6), 1..=4)) {
        let mut r = rng(seed);
        let fs: Vec<_> = dims.iter().map(|&(a, b)| random_matrix(&mut r, a, b)).collect();
        let cols: Vec<usize> = dims.iter().map(|d| d.1).collect();
        let n: usize = cols.iter().product();
        let v = random_matrix(&mut r, n, 1);
        let got = kron_matvec(&op(&fs), &FieldTensor::new(cols, v.as_slice().to_vec()).unwrap()).unwrap();
        let want = brute_kron_all(&fs) * &v;
        prop_assert!(rel_inf(got.values(), want.as_slice()) <= 1e-12);
    }

    #[test]
    fn mixed_product(seed in any::<u64>(), n in prop::array::uniform4(1usize..=4), k in prop::array::uniform2(1usize..=4)) {
        let mut r = rng(seed);
        let (a, c) = (random_matrix(&mut r, n[0], k[0]), random_matrix(&mut r, k[0], n[1]));
        let (b, d) = (random_matrix(&mut r, n[2], k[1]), random_matrix(&mut r, k[1], n[3]));
        let lhs = brute_kron(&a, &b) * brute_kron(&c, &d);
        let ac = from_na(&a).matmul(&from_na(&c)).unwrap();
        let bd = from_na(&b).matmul(&from_na(&d)).unwrap();
        let rhs = dense_of(&KronOperator::new(vec![ac, bd]).unwrap());
        prop_assert!(rel_mat(&rhs, &lhs) <= ID_TOL);
    }

    #[test]
    fn inverse(seed in any::<u64>(), na in 1usize..=4, nb in 1usize..=4) {
        let mut r = rng(seed);
        let (a, b) = (random_spd(&mut r, na), random_spd(&mut r, nb));
        let lhs = brute_kron(&a, &b).try_inverse().unwrap();
        let rhs = dense_of(&KronOperator::new(vec![
            linalg::inverse(&from_na(&a)).unwrap(),
            linalg::inverse(&from_na(&b)).unwrap(),
        ]).unwrap());
        prop_assert!(rel_mat(&rhs, &lhs) <= ID_TOL);
    }

    #[test]
    fn transpose(seed in any::<u64>(), n in prop::array::uniform4(1usize..=4)) {
        let mut r = rng(seed);
        let (a, b) = (random_matrix(&mut r, n[0], n[1]), random_matrix(&mut r, n[2], n[3]));
        let lhs = brute_kron(&a, &b).transpose();
        let rhs = dense_of(&KronOperator::new(vec![from_na(&a).transpose(), from_na(&b).transpose()]).unwrap());
        prop_assert!(rel_mat(&rhs, &lhs) <= ID_TOL);
    }

    #[test]
    fn trace(seed in any::<u64>(), na in 1usize..=4, nb in 1usize..=4) {
        let mut r = rng(seed);
        let (a, b) = (random_matrix(&mut r, na, na), random_matrix(&mut r, nb, nb));
        let lhs = brute_kron(&a, &b).trace();
        let rhs = linalg::trace(&from_na(&a)) * linalg::trace(&from_na(&b));
        prop_assert!((lhs - rhs).abs() <= ID_TOL * lhs.abs().max(1.0));
    }

    #[test]
    fn determinant(seed in any::<u64>(), na in 1usize..=4, nb in 1usize..=4) {
        let mut r = rng(seed);
        let (a, b) = (random_spd(&mut r, na), random_spd(&mut r, nb));
        let lhs = brute_kron(&a, &b).determinant();
        let rhs = linalg::determinant(&from_na(&a)).unwrap().powi(nb as i32)
            * linalg::determinant(&from_na(&b)).unwrap().powi(na as i32);
        prop_assert!((lhs - rhs).abs() <= ID_TOL * lhs.abs());
    }

    #[test]
    fn vec_identity(seed in any::<u64>(), n in prop::array::uniform4(1usize..=4)) {
        // vec(C X Bᵀ) = (B ⊗ C) vec(X) with column-major vec; the row-major
        // tensor layout turns it into (C ⊗ B) acting on X.
        let mut r = rng(seed);
        let (c, x, b) = (random_matrix(&mut r, n[0], n[1]), random_matrix(&mut r, n[1], n[2]), random_matrix(&mut r, n[3], n[2]));
        let want = &c * &x * b.transpose();
        let colmajor = brute_kron(&b, &c) * DVector::from_column_slice(x.as_slice());
        prop_assert!(rel_inf(colmajor.as_slice(), want.as_slice()) <= ID_TOL);
        let xt = FieldTensor::new(vec![n[1], n[2]], from_na(&x).into_data()).unwrap();
        let got = kron_matvec(&KronOperator::new(vec![from_na(&c), from_na(&b)]).unwrap(), &xt).unwrap();
        prop_assert!(rel_inf(got.values(), from_na(&want).data()) <= ID_TOL);
    }

    #[test]
    fn hadamard(seed in any::<u64>(), n in prop::array::uniform4(1usize..=4)) {
        let mut r = rng(seed);
        let (a, c) = (random_matrix(&mut r, n[0], n[1]), random_matrix(&mut r, n[0], n[1]));
        let (b, d) = (random_matrix(&mut r, n[2], n[3]), random_matrix(&mut r, n[2], n[3]));
        let lhs = brute_kron(&a, &b).component_mul(&brute_kron(&c, &d));
        let rhs = dense_of(&KronOperator::new(vec![
            from_na(&a).hadamard(&from_na(&c)).unwrap(),
            from_na(&b).hadamard(&from_na(&d)).unwrap(),
        ]).unwrap());
        prop_assert!(rel_mat(&rhs, &lhs) <= ID_TOL);
    }

    #[test]
    fn eigenvalues_are_dense_multiset(seed in any::<u64>(), dims in prop::collection::vec(1usize..=5, 1..=3)) {
        let mut r = rng(seed);
        let fs: Vec<_> = dims.iter().map(|&n| random_spd(&mut r, n)).collect();
        let eig = eig_factors(&op(&fs), 0.0).unwrap();
        let dense = SymmetricEigen::new(brute_kron_all(&fs)).eigenvalues;
        let want = sorted_desc(dense.as_slice().to_vec());
        prop_assert!(rel_inf(&eig.sorted_eigenvalues(), &want) <= 1e-8);
    }

    #[test]
    fn inverse_apply_round_trips(seed in any::<u64>(), dims in prop::collection::vec(1usize..=5, 1..=3), s2 in 1e-3f64..1.0) {
        let mut r = rng(seed);
        let fs: Vec<_> = dims.iter().map(|&n| random_spd(&mut r, n)).collect();
        let k = op(&fs);
        let eig = eig_factors(&k, 0.0).unwrap();
        let n: usize = dims.iter().product();
        let v = FieldTensor::new(dims.clone(), random_matrix(&mut r, n, 1).as_slice().to_vec()).unwrap();
        let x = inverse_apply(&eig, s2, &v).unwrap();
        let mut back = kron_matvec(&k, &x).unwrap();
        for (b, xi) in back.values_mut().iter_mut().zip(x.values()) {
            *b += s2 * xi;
        }
        prop_assert!(rel_inf(back.values(), v.values()) <= 1e-8);
    }

    #[test]
    fn logdet_matches_cholesky(seed in any::<u64>(), dims in prop::collection::vec(1usize..=5, 1..=3), s2 in 1e-3f64..1.0) {
        let mut r = rng(seed);
        let fs: Vec<_> = dims.iter().map(|&n| random_spd(&mut r, n)).collect();
        let eig = eig_factors(&op(&fs), 0.0).unwrap();
        let n: usize = dims.iter().product();
        let want = chol_logdet(&(brute_kron_all(&fs) + DMatrix::identity(n, n) * s2));
        let got = logdet_from_eigs(&eig, s2).unwrap();
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }
}

#[test]
fn relative_jitter_scales_with_mean_diagonal() {
    let a = DenseMatrix::from_diag(&[4.0, 2.0]);
    let eig = eig_factors(&KronOperator::new(vec![a]).unwrap(), 1e-3).unwrap();
    assert!((eig.jitters[0] - 3e-3).abs() < 1e-15);
    assert_eq!(eig.values[0], vec![4.003, 2.003]);
}

#[test]
fn blocked_log_sum_edge_values() {
    assert_eq!(sum_ln([]), 0.0);
    assert!(sum_ln([1.0, 0.0]).is_infinite());
    assert!(sum_ln([2.0, -1.0]).is_nan());
    let tiny = f64::MIN_POSITIVE / 8.0;
    assert!((sum_ln([tiny, 3.0]) - (tiny.ln() + 3f64.ln())).abs() < 1e-12);
}
