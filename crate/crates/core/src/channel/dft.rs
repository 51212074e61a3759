//! Unitary DFT along the subcarrier axis of each antenna pair.
//!
//! Both directions scale by `1/√K`, so energy is preserved exactly.

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::ComplexMatrix;
use crate::error::{Error, Result};

/// Inverse DFT of every length-`K` subcarrier block; tap index replaces
/// subcarrier index in the output.
pub fn freq_to_time(h_f: &ComplexMatrix, k: usize) -> Result<ComplexMatrix> {
    transform(h_f, k, true, "freq_to_time")
}

/// Forward DFT of every length-`K` delay block; inverse of [`freq_to_time`].
pub fn time_to_freq(h_t: &ComplexMatrix, k: usize) -> Result<ComplexMatrix> {
    transform(h_t, k, false, "time_to_freq")
}

fn transform(h: &ComplexMatrix, k: usize, inverse: bool, op: &'static str) -> Result<ComplexMatrix> {
    if k == 0 || !h.cols().is_multiple_of(k) {
        return Err(Error::shape(op, &[h.rows(), h.cols()], &[k]));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(k)
    } else {
        planner.plan_fft_forward(k)
    };
    let mut out = h.clone();
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(out.data_mut(), &mut scratch);
    let s = 1.0 / (k as f64).sqrt();
    for v in out.data_mut() {
        *v *= s;
    }
    Ok(out)
}
