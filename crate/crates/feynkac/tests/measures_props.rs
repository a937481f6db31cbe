use feynkac::measures::{volume_h, DensityPart, SignedMeasure};
use proptest::prelude::*;

fn measure(q: f64, c: f64, gamma: f64, center: f64) -> SignedMeasure {
    SignedMeasure {
        dim: 1,
        atoms: vec![([0.3, 0.0], q), ([-0.7, 0.0], 0.5 * q)],
        uniform: 0.0,
        parts: vec![
            DensityPart::Indicator { a: -1.0, b: 0.5, c },
            DensityPart::PowerSingular { center, gamma, c: 0.5 * c, radius: 0.4 },
        ],
    }
}

fn negated(w: &SignedMeasure) -> SignedMeasure {
    let parts = w
        .parts
        .iter()
        .map(|p| match p {
            DensityPart::Indicator { a, b, c } => DensityPart::Indicator { a: *a, b: *b, c: -c },
            DensityPart::PowerSingular { center, gamma, c, radius } => DensityPart::PowerSingular { center: *center, gamma: *gamma, c: -c, radius: *radius },
            _ => unreachable!(),
        })
        .collect();
    SignedMeasure { dim: w.dim, atoms: w.atoms.iter().map(|(p, q)| (*p, -q)).collect(), uniform: -w.uniform, parts }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ball_mass_ignores_sign(q in -2.0..2.0f64, c in -2.0..2.0f64, gamma in 0.1..0.9f64, center in -0.5..0.5f64, x in -2.0..2.0f64, r in 1e-4..3.0f64) {
        let w = measure(q, c, gamma, center);
        let a = w.ball_mass(&[x, 0.0], r);
        let b = negated(&w).ball_mass(&[x, 0.0], r);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn ball_mass_grows_with_radius(q in -2.0..2.0f64, c in -2.0..2.0f64, gamma in 0.1..0.9f64, x in -2.0..2.0f64, r in 1e-4..2.0f64, f in 1.0..3.0f64) {
        let w = measure(q, c, gamma, 0.1);
        prop_assert!(w.ball_mass(&[x, 0.0], r * f) >= w.ball_mass(&[x, 0.0], r) * (1.0 - 1e-12));
    }

    #[test]
    fn volume_function_is_monotone(q in 0.0..2.0f64, c in 0.0..2.0f64, gamma in 0.1..0.9f64, r in 1e-4..1.0f64, f in 1.0..4.0f64) {
        let w = measure(q, c, gamma, 0.0);
        let (a, b) = (volume_h(&w, r), volume_h(&w, r * f));
        prop_assert!(b >= a * (1.0 - 1e-9), "h({r}) = {a} > h({}) = {b}", r * f);
    }

    #[test]
    fn volume_function_dominates_every_ball(q in 0.0..2.0f64, c in 0.0..2.0f64, x in -1.5..1.5f64, r in 1e-3..1.0f64) {
        let w = measure(q, c, 0.5, 0.0);
        prop_assert!(volume_h(&w, r) >= w.ball_mass(&[x, 0.0], r) * (1.0 - 1e-9));
    }
}

#[test]
fn power_singularity_ball_mass_is_exact() {
    let w = SignedMeasure::density(vec![DensityPart::PowerSingular { center: 0.0, gamma: 0.5, c: 1.0, radius: 1.0 }]);
    for r in [1e-6f64, 1e-3, 0.25, 1.0, 2.0] {
        let expected = 4.0 * r.min(1.0).sqrt();
        assert!((w.ball_mass(&[0.0, 0.0], r) - expected).abs() <= 1e-12 * expected);
    }
}
