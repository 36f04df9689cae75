use nalgebra::{DMatrix, DVector};
use stepnav_oracles::qp::{enumerate_active_sets, interior_point};

// deterministic fill
fn fill(rows: usize, cols: usize, salt: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| ((i * 31 + j * 17) as f64 * 0.7 + salt).sin())
}

#[test]
fn projection_onto_a_box_corner() {
    // min |z - (2, 2)|^2 s.t. z <= 1
    let q = DMatrix::identity(2, 2) * 2.0;
    let c = DVector::from_vec(vec![-4.0, -4.0]);
    let a = DMatrix::identity(2, 2);
    let b = DVector::from_vec(vec![1.0, 1.0]);
    let r = interior_point(&q, &c, &a, &b, &DMatrix::zeros(0, 2), &DVector::zeros(0), 1e-12).unwrap();
    assert!((r.z[0] - 1.0).abs() < 1e-10 && (r.z[1] - 1.0).abs() < 1e-10);
}

#[test]
fn agrees_with_enumeration() {
    for case in 0..30 {
        let salt = case as f64;
        let (n, m, p) = (2 + case % 5, 3 + case % 8, case % 2);
        let g = fill(n, n, salt);
        let q = &g * g.transpose() + DMatrix::identity(n, n) * 0.3;
        let c = fill(n, 1, salt + 0.5).column(0) * 3.0;
        let a = fill(m, n, salt + 1.0);
        let b = DVector::from_fn(m, |i, _| 0.2 + 0.1 * i as f64);
        let e = fill(p, n, salt + 2.0);
        let d = DVector::zeros(p);
        let want = enumerate_active_sets(&q, &c, &a, &b, &e, &d, 1e-9).unwrap();
        let got = interior_point(&q, &c, &a, &b, &e, &d, 1e-12).unwrap();
        assert!((got.objective - want.objective).abs() < 1e-9, "case {case}: {} vs {}", got.objective, want.objective);
    }
}
