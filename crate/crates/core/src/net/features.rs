//! Real-valued token views of CSI and the frozen normalization statistics.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{freq_to_time, ComplexMatrix};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[M_B × M_U·K]` CSI → `[M_B·M_U × 2K]`. Token `b·M_U + u` holds the real
/// parts of its `K` subcarriers followed by the imaginary parts.
pub fn csi_to_real(h: &ComplexMatrix, subcarriers: usize) -> Result<Tensor> {
    let k = subcarriers;
    if k == 0 || !h.cols().is_multiple_of(k) {
        return Err(Error::shape("csi_to_real", &[h.rows(), h.cols()], &[k]));
    }
    let tokens = h.rows() * (h.cols() / k);
    let mut data = vec![0.0; tokens * 2 * k];
    for (t, chunk) in h.data().chunks_exact(k).enumerate() {
        let row = &mut data[t * 2 * k..(t + 1) * 2 * k];
        for (i, v) in chunk.iter().enumerate() {
            row[i] = v.re;
            row[k + i] = v.im;
        }
    }
    Tensor::new(&[tokens, 2 * k], data)
}

/// Inverse of [`csi_to_real`].
pub fn real_to_csi(x: &Tensor, bs_antennas: usize) -> Result<ComplexMatrix> {
    let (tokens, width) = x.dims2();
    if width % 2 != 0 || bs_antennas == 0 || tokens % bs_antennas != 0 {
        return Err(Error::shape("real_to_csi", x.shape(), &[bs_antennas]));
    }
    let k = width / 2;
    let data = x
        .data()
        .chunks_exact(width)
        .flat_map(|row| (0..k).map(move |i| Complex64::new(row[i], row[k + i])))
        .collect();
    ComplexMatrix::from_vec(bs_antennas, tokens / bs_antennas * k, data)
}

/// Unitary inverse DFT of every token's subcarrier vector, returned in the
/// same `[re ‖ im]` token layout.
pub fn delay_features(x: &Tensor) -> Result<Tensor> {
    let (tokens, width) = x.dims2();
    let k = width / 2;
    let h = real_to_csi(x, tokens)?;
    csi_to_real(&freq_to_time(&h, k)?, k)
}

/// Floor applied to every standard deviation.
pub const MIN_STD: f64 = 1e-8;

/// Per-element mean and standard deviation of the input and target token
/// matrices, computed once on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

fn moments<'a>(rows: impl Iterator<Item = &'a Tensor>, len: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut sum = vec![0.0; len];
    let mut sq = vec![0.0; len];
    let mut n = 0usize;
    for t in rows {
        if t.len() != len {
            return Err(Error::shape("norm_stats", t.shape(), &[len]));
        }
        for ((s, q), v) in sum.iter_mut().zip(sq.iter_mut()).zip(t.data()) {
            *s += v;
            *q += v * v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("normalization statistics need at least one sample".into()));
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / nf - m * m).max(0.0).sqrt().max(MIN_STD))
        .collect();
    Ok((mean, std))
}

impl NormStats {
    /// Statistics over paired `(input, target)` token matrices.
    pub fn fit(inputs: &[Tensor], targets: &[Tensor]) -> Result<Self> {
        let len_in = inputs.first().map_or(0, Tensor::len);
        let len_out = targets.first().map_or(0, Tensor::len);
        let (input_mean, input_std) = moments(inputs.iter(), len_in)?;
        let (target_mean, target_std) = moments(targets.iter(), len_out)?;
        Ok(Self {
            input_mean,
            input_std,
            target_mean,
            target_std,
        })
    }

    /// Identity statistics (zero mean, unit std).
    pub fn identity(input_len: usize, target_len: usize) -> Self {
        Self {
            input_mean: vec![0.0; input_len],
            input_std: vec![1.0; input_len],
            target_mean: vec![0.0; target_len],
            target_std: vec![1.0; target_len],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.input_mean.len() == self.input_std.len()
            && self.target_mean.len() == self.target_std.len()
            && self
                .input_std
                .iter()
                .chain(&self.target_std)
                .all(|&s| s >= MIN_STD && s.is_finite())
            && self
                .input_mean
                .iter()
                .chain(&self.target_mean)
                .all(|m| m.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config("normalization statistics are inconsistent".into()))
        }
    }

    pub fn normalize_input(&self, x: &Tensor) -> Result<Tensor> {
        affine(x, &self.input_mean, &self.input_std, true)
    }

    pub fn normalize_target(&self, y: &Tensor) -> Result<Tensor> {
        affine(y, &self.target_mean, &self.target_std, true)
    }

    pub fn denormalize_target(&self, y: &Tensor) -> Result<Tensor> {
        affine(y, &self.target_mean, &self.target_std, false)
    }
}

fn affine(x: &Tensor, mean: &[f64], std: &[f64], forward: bool) -> Result<Tensor> {
    if x.len() != mean.len() {
        return Err(Error::shape("normalize", x.shape(), &[mean.len()]));
    }
    let data = x
        .data()
        .iter()
        .zip(mean.iter().zip(std))
        .map(|(&v, (&m, &s))| if forward { (v - m) / s } else { v * s + m })
        .collect();
    Tensor::new(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_example() {
        let h = ComplexMatrix::from_vec(1, 2, vec![Complex64::new(1.0, 2.0), Complex64::new(3.0, -1.0)])
            .unwrap();
        let x = csi_to_real(&h, 2).unwrap();
        assert_eq!(x.shape(), &[1, 4]);
        assert_eq!(x.data(), &[1.0, 3.0, 2.0, -1.0]);
        assert_eq!(real_to_csi(&x, 1).unwrap(), h);
    }

    #[test]
    fn real_channel_has_zero_imaginary_half() {
        let data = (0..2 * 6).map(|i| Complex64::new(i as f64, 0.0)).collect();
        let h = ComplexMatrix::from_vec(2, 6, data).unwrap();
        let x = csi_to_real(&h, 3).unwrap();
        assert_eq!(x.shape(), &[4, 6]);
        for t in 0..4 {
            assert!(x.row(t)[3..].iter().all(|&v| v == 0.0));
        }
        assert_eq!(real_to_csi(&x, 2).unwrap(), h);
    }

    #[test]
    fn normalize_round_trip() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![3.0, -2.0, 3.0, 8.0]).unwrap();
        let stats = NormStats::fit(&[a.clone(), b.clone()], &[a.clone(), b]).unwrap();
        assert_eq!(stats.input_mean, vec![2.0, 0.0, 3.0, 6.0]);
        // Third element is constant across samples, so its std hits the floor.
        assert_eq!(stats.input_std[2], MIN_STD);
        let back = stats.denormalize_target(&stats.normalize_target(&a).unwrap()).unwrap();
        assert!(back.max_abs_diff(&a) < 1e-12);
    }
}
