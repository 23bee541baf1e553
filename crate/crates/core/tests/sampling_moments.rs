//! Moments of the random-effect distributions over 10^7 draws each.

use metareg_core::sim::{sample_random_effect, SimRng};
use metareg_core::ReDist;

const N: usize = 10_000_000;

fn moments(dist: ReDist, tau2: f64, seed: u64) -> (f64, f64) {
    let mut rng = SimRng::seed_from_u64(seed);
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..N {
        let u = sample_random_effect(&mut rng, dist, tau2);
        sum += u;
        sum2 += u * u;
    }
    let mean = sum / N as f64;
    (mean, sum2 / N as f64 - mean * mean)
}

#[test]
fn zero_mean_and_target_variance() {
    let tau2 = 0.5;
    for (i, dist) in ReDist::ALL.into_iter().enumerate() {
        let (mean, var) = moments(dist, tau2, 100 + i as u64);
        let mean_tol = 4.5 * (tau2 / N as f64).sqrt();
        // t3 has no fourth moment, so its sample variance converges slowly.
        let var_tol = if dist == ReDist::T3 { 0.05 } else { 0.02 };
        assert!(mean.abs() < mean_tol, "{dist}: mean {mean}");
        assert!((var / tau2 - 1.0).abs() < var_tol, "{dist}: variance {var}");
    }
}

#[test]
fn skewness_signs() {
    // Exponential and lognormal effects are right-skewed, the rest symmetric.
    for dist in ReDist::ALL {
        let mut rng = SimRng::seed_from_u64(7);
        let n = 1_000_000;
        let m3 = (0..n)
            .map(|_| sample_random_effect(&mut rng, dist, 1.0).powi(3))
            .sum::<f64>()
            / n as f64;
        match dist {
            ReDist::Exponential | ReDist::Lognormal => assert!(m3 > 1.0, "{dist}: {m3}"),
            ReDist::Normal | ReDist::Laplace => assert!(m3.abs() < 0.1, "{dist}: {m3}"),
            ReDist::T3 => {}
        }
    }
}
