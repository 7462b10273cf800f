use super::*;
use proptest::prelude::*;

/// Reference values computed independently with 60-digit arithmetic
/// (mpmath) straight from the binomial-sum definition.
const HIGH_PRECISION_POINTS: &[(f64, f64, u32, f64)] = &[
    (0.01, 2.0, 8, 0.00011575614792991031737),
    (0.001, 0.5, 2, 0.000053596713703623594457),
    (0.001, 4.0, 64, 2.0722904662833136002e-6),
    (0.1, 1.0, 32, 13.623137968522595297),
    (0.5, 2.0, 256, 31.304134595202564709),
    (0.0125, 1.0, 16, 3.325864041440172232),
    (0.3, 0.7, 3, 1.3388014263948804791),
];

const HIGH_PRECISION_TABLE_A: &[(u32, f64)] = &[
    // q = 0.0125, sigma = 1.1
    (2, 0.00020078974567011914753),
    (3, 0.00030803189013405860297),
    (4, 0.00042064372363950538975),
    (5, 0.00053946762539273739164),
    (8, 0.00095046629629927685713),
    (16, 1.9377577606758188008),
    (32, 8.6997581639105230455),
    (64, 21.994698378733494512),
    (128, 48.476031202067468679),
    (256, 101.38591291409305843),
];

const HIGH_PRECISION_TABLE_B: &[(u32, f64)] = &[
    // q = 0.05, sigma = 0.8
    (2, 0.0093826776447244915891),
    (3, 0.019761366108984083452),
    (4, 0.05399091503738175685),
    (5, 0.31036857922602548216),
    (8, 2.8266937149983227577),
    (16, 9.3045522428851899978),
    (32, 21.90763120149265174),
    (64, 46.956716420516575083),
    (128, 96.980679283347147637),
    (256, 196.99251975674577513),
];

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn q1_reduces_to_plain_gaussian_rdp() {
    for sigma in [0.5, 1.0, 1.3, 4.0] {
        for &alpha in &RDP_ORDERS {
            let got = rdp_step(1.0, sigma, alpha).unwrap();
            let expected = alpha as f64 / (2.0 * sigma * sigma);
            assert!(
                (got - expected).abs() <= 1e-12 * expected.max(1.0),
                "q=1 sigma={sigma} alpha={alpha}: {got} vs {expected}"
            );
        }
    }
}

#[test]
fn matches_high_precision_reference_points() {
    for &(q, sigma, alpha, expected) in HIGH_PRECISION_POINTS {
        let got = rdp_step(q, sigma, alpha).unwrap();
        assert!(
            rel_err(got, expected) < 1e-9,
            "q={q} sigma={sigma} alpha={alpha}: {got} vs {expected} (rel {:.2e})",
            rel_err(got, expected)
        );
    }
}

#[test]
fn matches_high_precision_reference_tables() {
    for (q, sigma, table) in [
        (0.0125, 1.1, HIGH_PRECISION_TABLE_A),
        (0.05, 0.8, HIGH_PRECISION_TABLE_B),
    ] {
        for &(alpha, expected) in table {
            let got = rdp_step(q, sigma, alpha).unwrap();
            assert!(
                rel_err(got, expected) < 1e-9,
                "q={q} sigma={sigma} alpha={alpha}: {got} vs {expected}"
            );
        }
    }
}

#[test]
fn vanishing_q_vanishing_rdp() {
    let v = rdp_step(1e-12, 1.0, 8).unwrap();
    assert!(v >= 0.0 && v < 1e-15, "got {v}");
}

#[test]
fn invalid_parameters_rejected() {
    assert!(rdp_step(0.0, 1.0, 2).is_err());
    assert!(rdp_step(1.5, 1.0, 2).is_err());
    assert!(rdp_step(0.5, 0.0, 2).is_err());
    assert!(rdp_step(0.5, 1.0, 1).is_err());
}

#[test]
fn compose_zero_one_and_many() {
    let curve = rdp_curve(0.0125, 1.1).unwrap();
    let zero = compose(&curve, 0);
    assert!(zero.values().iter().all(|&v| v == 0.0));
    assert_eq!(compose(&curve, 1), curve);
    let many = compose(&curve, 500);
    for (m, c) in many.values().iter().zip(curve.values()) {
        assert_eq!(*m, c * 500.0);
    }
}

#[test]
fn composition_is_linear_in_step_count() {
    let curve = rdp_curve(0.05, 0.8).unwrap();
    let (a, b) = (123u64, 377u64);
    let lhs = compose(&curve, a + b);
    let rhs = compose(&curve, a).elementwise_sum(&compose(&curve, b));
    for (l, r) in lhs.values().iter().zip(rhs.values()) {
        assert!(rel_err(*l, *r) < 1e-12, "{l} vs {r}");
    }
}

#[test]
fn to_epsilon_single_finite_order_closed_form() {
    let mut values = [f64::INFINITY; RDP_ORDERS.len()];
    values[0] = 1.0; // order 2
    let curve = RdpCurve::from_values(values);
    let delta = (-1.0f64).exp();
    let (eps, order) = to_epsilon(&curve, delta);
    assert!((eps - 2.0).abs() < 1e-12);
    assert_eq!(order, 2);
}

#[test]
fn to_epsilon_all_zero_curve() {
    let curve = RdpCurve::zero();
    let delta = 1e-6;
    let (eps, order) = to_epsilon(&curve, delta);
    assert!((eps - (1.0 / delta).ln() / 255.0).abs() < 1e-12);
    assert_eq!(order, 256);
}

#[test]
fn to_epsilon_matches_exhaustive_scan() {
    let curve = compose(&rdp_curve(0.0125, 1.1672).unwrap(), 500);
    let delta = 1e-6;
    let (eps, order) = to_epsilon(&curve, delta);
    let mut best = f64::INFINITY;
    let mut best_order = 0;
    for (i, &alpha) in RDP_ORDERS.iter().enumerate() {
        let v = curve.values()[i] + (1.0 / delta).ln() / (alpha - 1) as f64;
        if v < best {
            best = v;
            best_order = alpha;
        }
    }
    assert_eq!(eps, best);
    assert_eq!(order, best_order);
}

#[test]
fn calibration_matches_high_precision_pipeline() {
    // Independent 60-digit bisection gives sigma* = 1.1672526062342492851
    // with accounted epsilon 2.0 at order 11, and eps(sigma*/2) = 12.179...
    let budget = PrivacyBudget::new(2.0, 1e-6).unwrap();
    let cal = calibrate_sigma(&budget, 0.0125, 500).unwrap();
    assert!(
        rel_err(cal.sigma, 1.1672526062342492851) < 5e-4,
        "sigma {}",
        cal.sigma
    );
    assert!(
        cal.accounted_epsilon >= 0.95 * 2.0 && cal.accounted_epsilon <= 2.0,
        "accounted epsilon {}",
        cal.accounted_epsilon
    );
    assert_eq!(cal.best_order, 11);

    let (eps_half, _) = accounted_epsilon(0.0125, cal.sigma / 2.0, 500, 1e-6).unwrap();
    assert!(eps_half > 2.0, "halved sigma must violate, got {eps_half}");
}

#[test]
fn calibration_monotone_in_target() {
    let q = 0.0125;
    let tight = calibrate_sigma(&PrivacyBudget::new(2.0, 1e-6).unwrap(), q, 500).unwrap();
    let loose = calibrate_sigma(&PrivacyBudget::new(4.0, 1e-6).unwrap(), q, 500).unwrap();
    assert!(loose.sigma <= tight.sigma);
}

#[test]
fn calibration_infeasible_budget_errors() {
    // the conversion term alone exceeds the target at every order
    let budget = PrivacyBudget::new(0.01, 1e-6).unwrap();
    assert!(matches!(
        calibrate_sigma(&budget, 1.0, 1),
        Err(DpError::Infeasible(_))
    ));
}

#[test]
fn budget_validation() {
    assert!(PrivacyBudget::new(0.0, 1e-6).is_err());
    assert!(PrivacyBudget::new(2.0, 0.0).is_err());
    assert!(PrivacyBudget::new(2.0, 1.0).is_err());
}

proptest! {
    #[test]
    fn rdp_nonnegative_and_monotone(
        q1 in 1e-4f64..0.9,
        bump in 1e-3f64..0.09,
        sigma in 0.4f64..8.0,
        order_idx in 0usize..RDP_ORDERS.len(),
    ) {
        let alpha = RDP_ORDERS[order_idx];
        let base = rdp_step(q1, sigma, alpha).unwrap();
        prop_assert!(base >= 0.0);
        // nondecreasing in q
        let more_q = rdp_step(q1 + bump, sigma, alpha).unwrap();
        prop_assert!(more_q >= base - 1e-12 * base.abs().max(1.0));
        // nonincreasing in sigma
        let more_sigma = rdp_step(q1, sigma * 1.5, alpha).unwrap();
        prop_assert!(more_sigma <= base + 1e-12 * base.abs().max(1.0));
    }
}
