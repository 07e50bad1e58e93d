//! The two-state churn process shared by resources and voters.

use super::config::ChurnParams;
use rand::Rng;

/// One step of the on/off Markov chain: an online unit fails with
/// probability `fail`, an offline unit recovers with probability `recover`.
pub fn churn_step(online: bool, params: &ChurnParams, rng: &mut impl Rng) -> bool {
    if online {
        !(rng.gen::<f64>() < params.fail)
    } else {
        rng.gen::<f64>() < params.recover
    }
}

/// Stationary online fraction recover / (fail + recover).
pub fn stationary_rho(fail: f64, recover: f64) -> Result<f64, &'static str> {
    if fail + recover <= 0.0 {
        return Err("fail + recover must be positive");
    }
    Ok(recover / (fail + recover))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn stationary_examples() {
        // mean time between failures 99 steps, recovery 1 step
        assert!((stationary_rho(1.0 / 99.0, 1.0).unwrap() - 0.99).abs() < 1e-12);
        assert_eq!(stationary_rho(0.0, 0.5).unwrap(), 1.0);
        assert_eq!(stationary_rho(0.25, 0.25).unwrap(), 0.5);
        assert!(stationary_rho(0.0, 0.0).is_err());
    }

    #[test]
    fn zero_failure_probability_is_absorbing() {
        let mut rng = ChaCha12Rng::seed_from_u64(80);
        let params = ChurnParams {
            fail: 0.0,
            recover: 0.3,
        };
        let mut online = true;
        for _ in 0..10_000 {
            online = churn_step(online, &params, &mut rng);
            assert!(online);
        }
    }

    #[test]
    fn symmetric_rates_give_half_occupancy() {
        let mut rng = ChaCha12Rng::seed_from_u64(81);
        let params = ChurnParams {
            fail: 0.2,
            recover: 0.2,
        };
        let n = 100_000u64;
        let mut online = true;
        let mut on_ticks = 0u64;
        for _ in 0..n {
            online = churn_step(online, &params, &mut rng);
            on_ticks += online as u64;
        }
        let frac = on_ticks as f64 / n as f64;
        // 3 sigma of the binomial around 0.5, plus a margin for the chain's
        // autocorrelation (mixing time ~ 1/(p+q) = 2.5 steps).
        assert!((frac - 0.5).abs() < 0.01, "occupancy {frac}");
    }

    #[test]
    fn mtbf_99_gives_99_percent_occupancy() {
        let mut rng = ChaCha12Rng::seed_from_u64(82);
        let params = ChurnParams {
            fail: 1.0 / 99.0,
            recover: 1.0,
        };
        let n = 100_000u64;
        let mut online = true;
        let mut on_ticks = 0u64;
        for _ in 0..n {
            online = churn_step(online, &params, &mut rng);
            on_ticks += online as u64;
        }
        let frac = on_ticks as f64 / n as f64;
        assert!((frac - 0.99).abs() < 0.005, "occupancy {frac}");
    }
}
