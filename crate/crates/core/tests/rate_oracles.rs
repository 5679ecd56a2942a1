//! Coding-rate values, gradients and Hessian products against nalgebra and
//! finite differences.

use nalgebra::DMatrix;
use whitebox_core::rate::{
    coding_rate, coding_rate_projected, grad_coding_rate, grad_coding_rate_projected, hessian_norm_bound_check,
    hessian_vec_coding_rate, ColumnNormCheck, RateConfig, SubspaceBank,
};
use whitebox_core::{Matrix, Rng};

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn na_rate(z: &DMatrix<f64>, scale: f64) -> f64 {
    let n = z.ncols();
    let m = DMatrix::identity(n, n) + z.transpose() * z * scale;
    0.5 * m.determinant().ln()
}

fn na_projected(z: &DMatrix<f64>, bank: &SubspaceBank, gamma: f64) -> f64 {
    bank.bases().iter().map(|u| na_rate(&(to_na(u).transpose() * z), gamma)).sum()
}

fn central_difference(z: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let h = 1e-6;
    Matrix::from_fn(z.rows(), z.cols(), |r, c| {
        let mut plus = z.clone();
        plus[(r, c)] += h;
        let mut minus = z.clone();
        minus[(r, c)] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

fn small_cfg() -> RateConfig {
    RateConfig::new(8, 6, 2, 3).with_eps(0.5)
}

#[test]
fn rates_match_nalgebra_determinants() {
    let mut rng = Rng::new(100);
    for _ in 0..10 {
        let cfg = small_cfg();
        let z = rng.normal_matrix(8, 6);
        let bank = SubspaceBank::random(8, 2, 3, &mut rng).unwrap();
        let r = coding_rate(&z, &cfg).unwrap();
        assert!((r - na_rate(&to_na(&z), cfg.alpha())).abs() < 1e-10 * r.abs().max(1.0));
        let rc = coding_rate_projected(&z, &bank, &cfg).unwrap();
        assert!((rc - na_projected(&to_na(&z), &bank, cfg.gamma())).abs() < 1e-10 * rc.abs().max(1.0));
    }
}

#[test]
fn wide_and_tall_inputs_use_either_gram_side() {
    // N > d and N < d must agree with the N x N determinant
    let mut rng = Rng::new(101);
    for (d, n) in [(3, 9), (9, 3)] {
        let cfg = RateConfig::new(d, n, 1, 1);
        let z = rng.normal_matrix(d, n);
        let r = coding_rate(&z, &cfg).unwrap();
        assert!((r - na_rate(&to_na(&z), cfg.alpha())).abs() < 1e-10);
    }
}

#[test]
fn rate_gradients_match_finite_differences() {
    let mut rng = Rng::new(102);
    let cfg = small_cfg();
    for _ in 0..20 {
        let z = rng.normal_matrix(8, 6);
        let bank = SubspaceBank::random(8, 2, 3, &mut rng).unwrap();
        let g = grad_coding_rate(&z, &cfg).unwrap();
        let fd = central_difference(&z, |m| na_rate(&to_na(m), cfg.alpha()));
        assert!(g.rel_error(&fd).unwrap() <= 1e-6);
        let gc = grad_coding_rate_projected(&z, &bank, &cfg).unwrap();
        let fdc = central_difference(&z, |m| na_projected(&to_na(m), &bank, cfg.gamma()));
        assert!(gc.rel_error(&fdc).unwrap() <= 1e-6);
    }
}

#[test]
fn gradient_has_closed_form_against_nalgebra_inverse() {
    // ∇R = α Z (I + α ZᵀZ)⁻¹
    let mut rng = Rng::new(103);
    let cfg = small_cfg();
    let z = rng.normal_matrix(8, 6);
    let zn = to_na(&z);
    let a = cfg.alpha();
    let inv = (DMatrix::identity(6, 6) + zn.transpose() * &zn * a).try_inverse().unwrap();
    let expected = &zn * inv * a;
    let g = to_na(&grad_coding_rate(&z, &cfg).unwrap());
    assert!((g - expected).abs().max() < 1e-12);
}

#[test]
fn hessian_products_match_gradient_differences() {
    let mut rng = Rng::new(104);
    let cfg = small_cfg();
    let h = 1e-6;
    for _ in 0..10 {
        let z = rng.normal_matrix(8, 6);
        let delta = rng.normal_matrix(8, 6);
        let hv = hessian_vec_coding_rate(&z, &delta, &cfg).unwrap();
        let mut plus = z.clone();
        plus.axpy(h, &delta).unwrap();
        let mut minus = z.clone();
        minus.axpy(-h, &delta).unwrap();
        let fd = grad_coding_rate(&plus, &cfg)
            .unwrap()
            .sub(&grad_coding_rate(&minus, &cfg).unwrap())
            .unwrap()
            .scale(1.0 / (2.0 * h));
        assert!(hv.rel_error(&fd).unwrap() <= 1e-5);
    }
}

#[test]
fn hessian_operator_norm_bounded_on_unit_columns() {
    let mut rng = Rng::new(105);
    let cfg = small_cfg();
    for _ in 0..20 {
        let mut z = rng.normal_matrix(8, 6);
        for c in 0..6 {
            let col = z.column(c);
            let n = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            z.set_column(c, &col.iter().map(|v| v / n).collect::<Vec<_>>());
        }
        let report = hessian_norm_bound_check(&z, &cfg, 10, &mut rng, ColumnNormCheck::Enforce).unwrap();
        assert!(report.max_ratio <= 2.25, "{report:?}");
    }
    let not_unit = rng.normal_matrix(8, 6).scale(3.0);
    assert!(hessian_norm_bound_check(&not_unit, &cfg, 5, &mut rng, ColumnNormCheck::Enforce).is_err());
}

#[test]
fn rate_is_invariant_under_orthogonal_rotation() {
    let mut rng = Rng::new(106);
    let cfg = small_cfg();
    let z = rng.normal_matrix(8, 6);
    let q = whitebox_core::linalg::random_orthonormal(8, 8, &mut rng).unwrap();
    let rotated = q.matmul(&z).unwrap();
    let a = coding_rate(&z, &cfg).unwrap();
    let b = coding_rate(&rotated, &cfg).unwrap();
    assert!((a - b).abs() < 1e-10);
}
