use feynkac::levy_models::{sample_increment, LevyMeasure, LevyModel};
use feynkac::measures::SignedMeasure;
use feynkac::montecarlo::{fk_expectation, potential_of, PathConfig};
use feynkac::stable::StableStd;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erf;

/// Kolmogorov-Smirnov distance between a sample and a continuous cdf.
fn ks_distance<F: Fn(f64) -> f64>(mut xs: Vec<f64>, cdf: F) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

const N: usize = 4000;
// 1% critical value of the one-sample statistic.
const KS_CRIT: f64 = 1.63 / 63.245_553;

#[test]
fn stable_increments_follow_the_standard_law() {
    for alpha in [0.8, 1.5] {
        let model = LevyModel::pure_jump(LevyMeasure::stable_unit(alpha, 1).unwrap()).unwrap();
        let dt = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let xs: Vec<f64> = (0..N).map(|_| sample_increment(&model, dt, &mut rng).unwrap()[0] / dt.powf(1.0 / alpha)).collect();
        let law = StableStd::get(alpha);
        let d = ks_distance(xs, |x| law.cdf(x));
        assert!(d < KS_CRIT, "alpha = {alpha}: KS distance {d}");
    }
}

#[test]
fn brownian_increments_are_gaussian() {
    let model = LevyModel::brownian(1, 1.0).unwrap();
    let dt = 0.25;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let xs: Vec<f64> = (0..N).map(|_| sample_increment(&model, dt, &mut rng).unwrap()[0] / dt.sqrt()).collect();
    let d = ks_distance(xs, |x| 0.5 * (1.0 + erf(x / 2f64.sqrt())));
    assert!(d < KS_CRIT, "KS distance {d}");
}

#[test]
fn estimates_do_not_depend_on_thread_count() {
    let model = LevyModel::pure_jump(LevyMeasure::stable_unit(1.5, 1).unwrap()).unwrap();
    let w = SignedMeasure::lebesgue(1, 0.4);
    let v = potential_of(&w).unwrap();
    let cfg = PathConfig::new(0.01, 0.5, 4000, 9);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| fk_expectation(&model, &v, |x| (-x[0] * x[0]).exp(), &[0.2, 0.0], &cfg).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    let c = fk_expectation(&model, &v, |x| (-x[0] * x[0]).exp(), &[0.2, 0.0], &PathConfig { seed: 10, ..cfg.clone() }).unwrap();
    assert_ne!(a.value, c.value);
}
