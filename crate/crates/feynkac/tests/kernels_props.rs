use feynkac::kernels::{density_from_exponent, g_frak, SpectralOptions};
use feynkac::levy_models::{LevyMeasure, LevyModel, ScaleFunction};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reference_kernel_scales(t in 1e-4..10.0f64, x in -5.0..5.0f64, lambda in 0.1..10.0f64, alpha in 0.3..1.95f64, d in 0.0..2.0f64) {
        // g_{lambda^alpha t}(lambda x) = lambda^{-n} g_t(x)
        let lhs = g_frak(lambda.powf(alpha) * t, &[lambda * x, 0.0], 1, alpha, d);
        let rhs = g_frak(t, &[x, 0.0], 1, alpha, d) / lambda;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs);
    }

    #[test]
    fn reference_kernel_decreases_radially(t in 1e-4..10.0f64, r in 0.0..5.0f64, dr in 0.0..5.0f64, alpha in 0.3..1.95f64, d in 0.0..2.0f64) {
        prop_assert!(g_frak(t, &[r + dr, 0.0], 1, alpha, d) <= g_frak(t, &[r, 0.0], 1, alpha, d));
        let (a, b) = (g_frak(t, &[r, 0.3], 2, alpha, d), g_frak(t, &[-0.3, r], 2, alpha, d));
        prop_assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn rho_is_non_increasing(gamma in 0.5..1.8f64, t in 1e-3..1.0f64, f in 1.0..10.0f64) {
        let model = LevyModel::pure_jump(LevyMeasure::discretized_stable(gamma, 1.0, 1, None).unwrap()).unwrap();
        let scale = ScaleFunction::for_model(&model);
        let (a, b) = (scale.rho(t).unwrap(), scale.rho(t * f).unwrap());
        prop_assert!(b <= a * (1.0 + 1e-9), "rho({t}) = {a} < rho({}) = {b}", t * f);
    }
}

#[test]
fn spectral_grid_is_a_probability_density() {
    for model in [
        LevyModel::pure_jump(LevyMeasure::stable_unit(1.5, 1).unwrap()).unwrap(),
        LevyModel::pure_jump(LevyMeasure::stable_unit(0.9, 1).unwrap()).unwrap(),
        LevyModel::brownian(1, 1.0).unwrap(),
    ] {
        let opts = SpectralOptions { mass_tol: 0.05, ..SpectralOptions::default() };
        let g = density_from_exponent(&model, &[0.05, 0.2, 1.0], 20.0, 0.02, &opts).unwrap();
        for ti in 0..g.times.len() {
            assert!(g.slice(ti).iter().all(|v| *v >= 0.0));
            let mass = g.slice_mass(ti, 0);
            assert!(mass <= 1.0 + 1e-6 && mass >= 0.95, "{} t = {}: mass {mass}", model.describe(), g.times[ti]);
        }
    }
}
