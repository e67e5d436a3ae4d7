use aop_lab::theory::{self, TheoryParams};
use aop_lab_demo::{monte_carlo_check, risk_vs_d, risk_vs_lambda, roc_demo};

#[test]
fn d_curve_matches_the_core_and_is_monotone() {
    let v = risk_vs_d(100_000, 11, 0.01, 2.0, 0.0).unwrap();
    assert_eq!(v.len(), 33);
    assert_eq!(v[0], 0.0);
    assert_eq!(v[30], 100_000.0);
    let p = TheoryParams { d: 50_000, eta: 0.01, sigma: 1.0, delta: 2.0, lambda: 0.0 };
    let r = theory::closed_form_risks(&theory::bayes_classifier(&p), &p).unwrap();
    assert_eq!((v[15], v[16], v[17]), (50_000.0, r.r_id, r.r_ood));
    for w in v.chunks(3).collect::<Vec<_>>().windows(2) {
        assert!(w[1][1] <= w[0][1] && w[1][2] >= w[0][2]);
    }
}

#[test]
fn lambda_curve_trades_id_risk_for_ood_risk() {
    let v = risk_vs_lambda(50_000, 21, 0.01, 2.0, 0.5).unwrap();
    let rows: Vec<&[f64]> = v.chunks(3).collect();
    assert_eq!(rows.len(), 21);
    assert!(rows[20][1] > rows[0][1]);
    assert!(rows[20][2] < rows[0][2]);
    assert!(risk_vs_lambda(10, 5, 0.01, 1.0, 1.0).is_err());
    assert!(risk_vs_d(10, 1, 0.01, 1.0, 0.0).is_err());
}

#[test]
fn monte_carlo_agrees_within_five_standard_errors() {
    let v = monte_carlo_check(20_000, 0.01, 2.0, 0.005, 200_000, 3).unwrap();
    assert!((v[0] - v[2]).abs() < 5.0 * v[4].max(1e-4), "{v:?}");
    assert!((v[1] - v[3]).abs() < 5.0 * v[5].max(1e-4), "{v:?}");
    assert_eq!(v, monte_carlo_check(20_000, 0.01, 2.0, 0.005, 200_000, 3).unwrap());
    assert!(monte_carlo_check(10, 0.01, 1.0, 1.5, 10, 0).is_err());
}

#[test]
fn roc_curve_spans_the_unit_square() {
    let v = roc_demo(1.5, 500, 9).unwrap();
    let (auroc, pts) = (v[0], &v[3..]);
    // Φ(1.5/√2) ≈ 0.856
    assert!((auroc - 0.856).abs() < 0.04, "{auroc}");
    assert_eq!((pts[0], pts[1]), (0.0, 0.0));
    assert_eq!((pts[pts.len() - 2], pts[pts.len() - 1]), (1.0, 1.0));
    assert!((roc_demo(0.0, 2000, 1).unwrap()[0] - 0.5).abs() < 0.05);
    assert!(roc_demo(1.0, 0, 1).is_err());
}
