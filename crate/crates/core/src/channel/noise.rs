use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ComplexMatrix;
use crate::error::{Error, Result};

/// Adds circular complex Gaussian noise with per-element variance
/// `mean|h|² / 10^(snr_db/10)`. `snr_db = +∞` returns `h` unchanged.
pub fn apply_awgn(h: &ComplexMatrix, snr_db: f64, seed: u64) -> Result<ComplexMatrix> {
    let power = h.mean_power();
    if power == 0.0 {
        return Err(Error::Contract("SNR is undefined for an all-zero channel".into()));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Contract(format!("snr_db must be a number or +inf, got {snr_db}")));
    }
    if snr_db == f64::INFINITY {
        return Ok(h.clone());
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = h.clone();
    for v in out.data_mut() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *v += Complex64::new(sigma * re, sigma * im);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rows: usize, cols: usize) -> ComplexMatrix {
        let data = (0..rows * cols)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        ComplexMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn infinite_snr_is_identity() {
        let h = ramp(3, 8);
        assert_eq!(apply_awgn(&h, f64::INFINITY, 1).unwrap(), h);
    }

    #[test]
    fn zero_channel_is_rejected() {
        let h = ComplexMatrix::zeros(2, 4);
        assert!(matches!(apply_awgn(&h, 10.0, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn empirical_snr_matches_target() {
        let h = ramp(100, 1000);
        for snr in [-5.0, 0.0, 10.0, 25.0] {
            let y = apply_awgn(&h, snr, 42).unwrap();
            let noise = y.distance_sqr(&h) / h.data().len() as f64;
            let measured = 10.0 * (h.mean_power() / noise).log10();
            assert!((measured - snr).abs() < 0.1, "snr {snr}: measured {measured}");
        }
    }

    #[test]
    fn seeds_control_the_realization() {
        let h = ramp(4, 16);
        assert_eq!(apply_awgn(&h, 5.0, 3).unwrap(), apply_awgn(&h, 5.0, 3).unwrap());
        assert_ne!(apply_awgn(&h, 5.0, 3).unwrap(), apply_awgn(&h, 5.0, 4).unwrap());
    }

    #[test]
    fn noise_averages_out() {
        let h = ramp(2, 8);
        let n = 4000;
        let mut acc = ComplexMatrix::zeros(2, 8);
        for seed in 0..n {
            acc = acc.add(&apply_awgn(&h, 0.0, seed).unwrap()).unwrap();
        }
        let mean = acc.scale(Complex64::new(1.0 / n as f64, 0.0));
        assert!(mean.max_abs_diff(&h) < 0.08);
    }
}
