use efcp_core::linalg::{dot, norm, orthogonalize, relative_error, sym_eig, DenseMatrix};
use efcp_core::{
    topk_block, BlockLayout, Compressed, DenseGradWindow, GradientWindow, Mfac, Precision,
    SparseGradWindow,
};
use proptest::prelude::*;

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

fn gradients(d: usize, max_m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(vec_strategy(d), 1..=max_m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topk_keeps_quota_and_largest(a in vec_strategy(97), density in 0.01f64..1.0, block in 1usize..40) {
        let c = topk_block(&a, density, block).unwrap();
        let layout = BlockLayout::new(a.len(), block, density).unwrap();
        prop_assert!(layout.validate(&c).is_ok());
        prop_assert_eq!(c.nnz(), layout.row_len());
        for b in 0..layout.n_blocks() {
            let kept = &c.indices[layout.slot_range(b)];
            let smallest_kept = kept.iter().map(|&i| a[i as usize].abs()).fold(f64::INFINITY, f64::min);
            for j in layout.coord_range(b) {
                if !kept.contains(&(j as u32)) {
                    prop_assert!(a[j].abs() <= smallest_kept);
                }
            }
            for &i in kept {
                prop_assert_eq!(c.values[c.indices.iter().position(|&x| x == i).unwrap()], a[i as usize]);
            }
        }
    }

    #[test]
    fn sp_and_lcg_are_adjoint(rows in gradients(40, 6), x in vec_strategy(40), coeffs in vec_strategy(6)) {
        let mut w = SparseGradWindow::new(6, 40, 16, 0.25, Precision::F64).unwrap();
        for g in &rows {
            w.push(&Compressed::Sparse(topk_block(g, 0.25, 16).unwrap())).unwrap();
        }
        let lhs = dot(&w.sp(&x).unwrap(), &coeffs);
        let rhs = dot(&x, &w.lcg(&coeffs).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn lcg_is_linear(rows in gradients(30, 5), a in vec_strategy(5), b in vec_strategy(5), s in -3.0f64..3.0) {
        let mut w = DenseGradWindow::new(5, 30).unwrap();
        for g in &rows {
            w.push(&Compressed::Dense(g.clone())).unwrap();
        }
        let combined: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        let lhs = w.lcg(&combined).unwrap();
        let la = w.lcg(&a).unwrap();
        let lb = w.lcg(&b).unwrap();
        let rhs: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x + s * y).collect();
        prop_assert!(relative_error(&lhs, &rhs) <= 1e-12 || norm(&rhs) < 1e-9);
    }

    #[test]
    fn mfac_inverse_is_positive_definite(rows in gradients(12, 8), x in vec_strategy(12), lambda in 1e-3f64..1.0) {
        prop_assume!(norm(&x) > 1e-3);
        let mut m = Mfac::new(DenseGradWindow::new(8, 12).unwrap(), lambda).unwrap();
        for g in &rows {
            m.update(&Compressed::Dense(g.clone())).unwrap();
        }
        let u = m.precondition(&x).unwrap();
        prop_assert!(dot(&x, &u) > 0.0);
    }

    #[test]
    fn mfac_evicts_oldest(rows in gradients(10, 9), x in vec_strategy(10)) {
        // A window of 3 after n pushes equals a fresh window fed the last 3.
        let mut full = Mfac::new(DenseGradWindow::new(3, 10).unwrap(), 0.1).unwrap();
        for g in &rows {
            full.update(&Compressed::Dense(g.clone())).unwrap();
        }
        let mut tail = Mfac::new(DenseGradWindow::new(3, 10).unwrap(), 0.1).unwrap();
        for g in &rows[rows.len().saturating_sub(3)..] {
            tail.update(&Compressed::Dense(g.clone())).unwrap();
        }
        let a = full.precondition(&x).unwrap();
        let b = tail.precondition(&x).unwrap();
        prop_assert!(relative_error(&a, &b) <= 1e-9 || norm(&b) < 1e-12);
    }

    #[test]
    fn eigenvalues_survive_similarity(entries in vec_strategy(36), angle in 0.0f64..std::f64::consts::TAU) {
        let b = DenseMatrix::new(6, 6, entries).unwrap();
        let a = b.matmul(&b.transpose()).unwrap();
        // Givens rotation in the (0, 3) plane.
        let (c, s) = (angle.cos(), angle.sin());
        let mut q = DenseMatrix::identity(6);
        q[(0, 0)] = c;
        q[(3, 3)] = c;
        q[(0, 3)] = -s;
        q[(3, 0)] = s;
        let rotated = q.transpose().matmul(&a.matmul(&q).unwrap()).unwrap();
        let sym = DenseMatrix::from_fn(6, 6, |i, j| 0.5 * (rotated[(i, j)] + rotated[(j, i)]));
        let e1 = sym_eig(&a).unwrap().eigenvalues;
        let e2 = sym_eig(&sym).unwrap().eigenvalues;
        let scale = e1[0].abs().max(1.0);
        for (x, y) in e1.iter().zip(&e2) {
            prop_assert!((x - y).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn orthogonalize_is_idempotent(entries in vec_strategy(8 * 3)) {
        let p = DenseMatrix::new(8, 3, entries).unwrap();
        let q = orthogonalize(&p);
        let qq = orthogonalize(&q);
        prop_assert!(relative_error(qq.as_slice(), q.as_slice()) <= 1e-12 || q.frobenius_norm() == 0.0);
        let gram = q.transpose_matmul(&q).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j && norm(&q.column(i)) > 0.0 { 1.0 } else { 0.0 };
                prop_assert!((gram[(i, j)] - expected).abs() <= 1e-12);
            }
        }
    }
}
