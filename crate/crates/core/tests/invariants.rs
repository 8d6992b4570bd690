use lowrank_kbp::dlr::{oja_step, stiefel_defect};
use lowrank_kbp::enkf::weighted_qr;
use lowrank_kbp::linalg::{exchangeable_sum, orthonormalize};
use lowrank_kbp::metrics::{best_rank_error, best_rank_errors, ell2p_distance, gaussian_w2, subspace_distance};
use lowrank_kbp::{LowRankState, Operator};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn spd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(n, n).prop_map(move |b| &b * b.transpose() + DMatrix::identity(n, n) * 0.1)
}

fn stiefel(d: usize, r: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(d, r).prop_map(move |m| orthonormalize(&(m + DMatrix::identity(d, r))).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exchangeable_sum_ignores_order(mut v in prop::collection::vec(-1e6..1e6f64, 1..40), seed in any::<u64>()) {
        let mut shuffled = v.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(exchangeable_sum(&mut v).to_bits(), exchangeable_sum(&mut shuffled).to_bits());
    }

    #[test]
    fn oja_step_stays_on_stiefel(a in matrix(12, 12), u in stiefel(12, 4), dt in 1e-4..1e-1f64) {
        let next = oja_step(&Operator::sparse_from_dense(&a), &u, dt).unwrap();
        prop_assert!(stiefel_defect(&next, None) < 1e-12);
    }

    #[test]
    fn w2_is_symmetric_and_vanishes_on_equal(m1 in matrix(5, 1), m2 in matrix(5, 1), p1 in spd(5), p2 in spd(5)) {
        let (m1, m2) = (m1.column(0).into_owned(), m2.column(0).into_owned());
        let ab = gaussian_w2(&m1, &p1, &m2, &p2).unwrap();
        let ba = gaussian_w2(&m2, &p2, &m1, &p1).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
        prop_assert!(gaussian_w2(&m1, &p1, &m1, &p1).unwrap() < 1e-6);
        prop_assert!(ab + 1e-9 >= (&m1 - &m2).norm());
    }

    #[test]
    fn subspace_distance_ignores_basis_rotation(u in stiefel(10, 3), v in stiefel(10, 3), q in stiefel(3, 3)) {
        let d = subspace_distance(&u, &v, None).unwrap();
        let rotated = subspace_distance(&(&u * &q), &v, None).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - rotated).abs() < 1e-10);
        prop_assert!(subspace_distance(&u, &(&u * &q), None).unwrap() < 1e-7);
    }

    #[test]
    fn best_rank_error_decreases_with_rank(p in spd(8)) {
        let errs = best_rank_errors(&p, &[0, 1, 2, 3, 4, 5, 6, 7, 8]);
        prop_assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        prop_assert!(errs[8] < 1e-12);
        prop_assert!((errs[0] - p.norm()).abs() < 1e-9 * p.norm());
    }

    #[test]
    fn truncation_attains_best_approximation(u in stiefel(9, 5), g in spd(5), r in 1usize..5) {
        let lr = LowRankState::new(DVector::zeros(9), u, g).unwrap();
        let p = lr.covariance();
        let t = lr.truncate(r).unwrap();
        let err = (t.covariance() - &p).norm();
        prop_assert!((err - best_rank_error(&p, r)).abs() < 1e-9 * (1.0 + p.norm()));
    }

    #[test]
    fn weighted_qr_is_w_orthonormal(v in matrix(8, 4), m in spd(8)) {
        let w = Operator::sparse_from_dense(&m);
        let basis = weighted_qr(&v, Some(&w)).unwrap();
        let q = &basis.q;
        let gram = q.transpose() * &m * q;
        prop_assert!((gram - DMatrix::identity(q.ncols(), q.ncols())).amax() < 1e-9);
        prop_assert_eq!(basis.dropped + q.ncols(), 4);
    }

    #[test]
    fn ell2p_is_a_metric(a in matrix(6, 5), b in matrix(6, 5), c in matrix(6, 5)) {
        let ab = ell2p_distance(&a, &b, None).unwrap();
        let ba = ell2p_distance(&b, &a, None).unwrap();
        let ac = ell2p_distance(&a, &c, None).unwrap();
        let cb = ell2p_distance(&c, &b, None).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab <= ac + cb + 1e-12);
        prop_assert_eq!(ell2p_distance(&a, &a, None).unwrap(), 0.0);
    }
}
