use panel_qlm::matrixkit::*;
use proptest::prelude::*;

fn sym(n: usize, vals: &[f64]) -> Mat<f64> {
    let mut a = Mat::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            a[(i, j)] = vals[k];
            a[(j, i)] = vals[k];
            k += 1;
        }
    }
    a
}

proptest! {
    #[test]
    fn vech_round_trip(n in 1usize..7, seed in proptest::collection::vec(-10.0f64..10.0, 28)) {
        let a = sym(n, &seed);
        let v = vech(&a).unwrap();
        prop_assert_eq!(v.len(), vech_len(n));
        prop_assert_eq!(unvech(&v).unwrap(), a);
    }

    #[test]
    fn duplication_maps_vech_to_vec(n in 1usize..6, seed in proptest::collection::vec(-10.0f64..10.0, 21)) {
        let a = sym(n, &seed);
        let d = duplication::<f64>(n).unwrap();
        let got = d.du.matmul(&Mat::column(&vech(&a).unwrap()));
        prop_assert_eq!(got.col_vec(0), vec(&a));
        let back = d.du_plus.matmul(&Mat::column(&vec(&a)));
        prop_assert_eq!(back.col_vec(0), vech(&a).unwrap());
    }
}

#[test]
fn duplication_pseudo_inverse_exact() {
    for n in 1..=6 {
        let d = duplication::<Rational>(n).unwrap();
        assert_eq!(d.du_plus.matmul(&d.du), Mat::identity(vech_len(n)), "n={n}");
    }
}

#[test]
fn vech_stacks_columns_of_lower_triangle() {
    let a = Mat::from_fn(3, 3, |i, j| (10 * i.max(j) + i.min(j)) as f64);
    assert_eq!(vech(&a).unwrap(), vec![0.0, 10.0, 20.0, 11.0, 21.0, 22.0]);
    assert_eq!(vech_index(3, 2, 1), 4);
    assert_eq!(vech_index(3, 1, 2), 4);
    assert!(vech(&Mat::<f64>::zeros(2, 3)).is_err());
    assert!(unvech(&[1.0, 2.0]).is_err());
}

#[test]
fn closed_form_inverses_exact() {
    for t in 2..=12 {
        let g = g_matrix::<Rational>(t).unwrap();
        assert_eq!(g.matmul(&gt_inverse(t).unwrap()), Mat::identity(t), "T={t}");
    }
    for n in 2..=8 {
        let m = m_matrix::<Rational>(n).unwrap();
        assert_eq!(m.matmul(&m_inverse(n).unwrap()), Mat::identity(vech_len(n)), "n={n}");
    }
}

#[test]
fn float_and_exact_agree() {
    for t in 3..=12 {
        let exact = trace_identities::<Rational>(t).unwrap();
        let float = trace_identities::<f64>(t).unwrap();
        let close = |a: &Rational, b: f64| (num::ToPrimitive::to_f64(a).unwrap() - b).abs() < 1e-12 * b.abs().max(1.0);
        assert!(close(&exact.tr_pppp, float.tr_pppp), "T={t}");
        assert!(close(&exact.tr_ppqp, float.tr_ppqp), "T={t}");
        let gi = gt_inverse::<f64>(t).unwrap();
        let g = g_matrix::<f64>(t).unwrap();
        assert!(g.matmul(&gi).max_abs_diff(&Mat::identity(t)) < 1e-12);
    }
}

#[test]
fn trace_identities_match_closed_forms() {
    for t in 3..=12 {
        assert_eq!(trace_identities::<Rational>(t).unwrap(), trace_identities_closed(t), "T={t}");
    }
}

#[test]
fn selector_and_w_vector() {
    let s = selector::<Rational>(4).unwrap();
    assert_eq!(s.p.rows, vech_len(4) - 2);
    assert_eq!(w_vector::<Rational>(4).unwrap().len(), vech_len(4) - 2);
    assert!(selector::<f64>(1).is_err());
    // P annihilates vech(G)
    let pg = s.p.matmul(&Mat::column(&vech(&g_matrix::<Rational>(4).unwrap()).unwrap()));
    assert!(pg.col_vec(0).iter().all(|v| *v == rational(0, 1)));
}

#[test]
fn kron_with_identity_is_block_diagonal() {
    let a = Mat::from_fn(2, 2, |i, j| (i * 2 + j + 1) as f64);
    let k = Mat::<f64>::identity(2).kron(&a);
    assert_eq!(k[(2, 3)], a[(0, 1)]);
    assert_eq!(k[(0, 2)], 0.0);
    assert_eq!(k.trace(), 2.0 * a.trace());
}

#[test]
fn singular_solve_is_an_error() {
    let z = Mat::<Rational>::zeros(3, 3);
    assert!(z.inverse().is_err());
}
