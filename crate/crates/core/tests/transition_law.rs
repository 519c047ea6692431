mod common;

use cyclewarp_core::cir::{simulate_path, stationary_moments, TransitionLaw};
use cyclewarp_core::{ModelParams, Stream};

use common::scaled_ncx2_cdf;

fn ks_distance(law: &TransitionLaw, prev: f64, draws: usize, seed: u64) -> f64 {
    let mut rng = Stream::new(seed).rng();
    let mut x: Vec<f64> = (0..draws).map(|_| law.sample(prev, &mut rng)).collect();
    x.sort_by(f64::total_cmp);
    let lambda = law.noncentrality(prev);
    let n = draws as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = scaled_ncx2_cdf(v, law.nu, law.c, lambda);
            (f - i as f64 / n).abs().max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max)
}

#[test]
fn empirical_cdf_matches_mixture_cdf_on_both_sampler_branches() {
    // nu > 1 uses the normal/gamma decomposition, nu <= 1 the Poisson mixture
    let cases = [(0.05, 0.2, 0.01, 0.05), (0.05, 0.07, 0.0064, 0.02), (0.05, 0.07, 0.064, 0.05), (0.02, 0.1, 0.02, 0.0)];
    for (k, &(a, beta, omega2, prev)) in cases.iter().enumerate() {
        let law = TransitionLaw::from_rates(a, beta, omega2, 1.0).unwrap();
        let d = ks_distance(&law, prev, 100_000, 10 + k as u64);
        assert!(d < 0.01, "case {k} (nu = {}): KS distance {d}", law.nu);
    }
}

#[test]
fn mixture_cdf_oracle_reaches_one() {
    let law = TransitionLaw::from_rates(0.05, 0.07, 0.0064, 1.0).unwrap();
    let f = scaled_ncx2_cdf(10.0, law.nu, law.c, law.noncentrality(0.05));
    assert!((f - 1.0).abs() < 1e-10, "{f}");
}

#[test]
fn start_at_zero_has_mean_a_times_one_minus_rho() {
    let law = TransitionLaw::from_rates(0.05, 0.07, 0.0064, 1.0).unwrap();
    let mut rng = Stream::new(3).rng();
    let draws = 1_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let v = law.sample(0.0, &mut rng);
        s += v;
        s2 += v * v;
    }
    let mean = s / draws as f64;
    let var = s2 / draws as f64 - mean * mean;
    let expected = 0.05 * (1.0 - law.rho);
    let se = (var / draws as f64).sqrt();
    assert!((mean - expected).abs() < 3.0 * se, "mean {mean} vs {expected} (se {se})");
}

#[test]
fn deterministic_limit_at_fifty() {
    let p = ModelParams::new(0.6, 0.4, 0.0, 0.05, 0.07, 0.0, 0.09, 1.0);
    let path = simulate_path(&p, 50, 1.0, 1000, 0.0, Stream::new(1)).unwrap();
    let exact = 0.05 * (1.0 - (-3.5f64).exp());
    assert!((path.xi[50] - exact).abs() < 1e-4, "{} vs {exact}", path.xi[50]);
    assert!((path.xi[50] - 0.0485).abs() < 5e-4);
}

#[test]
fn stationary_example_values() {
    let p = ModelParams::new(0.6, 0.4, 0.0, 0.05, 0.07, 0.064 * 0.01, 0.09, 1.0);
    let m = stationary_moments(&p).unwrap();
    assert_eq!(m.mean, 0.05);
    assert!((m.shape * m.scale - m.mean).abs() < 1e-15);
}

#[test]
fn simulated_growth_is_increasing_when_rates_are_positive() {
    let p = ModelParams::new(0.6, 0.4, 0.0, 0.1, 0.5, 0.02, 0.09, 1.0);
    let path = simulate_path(&p, 2000, 1.0, 100, 0.1, Stream::new(8)).unwrap();
    assert!(path.xi[1..].iter().all(|&x| x > 0.0));
    assert!(path.g.windows(2).all(|w| w[1] > w[0]));
}
