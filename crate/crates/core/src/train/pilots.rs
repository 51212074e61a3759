//! Pilot-based least-squares estimation with linear interpolation, and the
//! pilot-overhead arithmetic.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::channel::{apply_awgn, ComplexMatrix};
use crate::error::{Error, Result};

/// Fraction of subcarriers carrying pilots, in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Density(Ratio<u32>);

impl Density {
    pub const FULL: Density = Density(Ratio::new_raw(1, 1));

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::Config(format!("pilot density {num}/{den} must lie in (0, 1]")));
        }
        Ok(Self(Ratio::new(num, den)))
    }

    pub fn ratio(self) -> Ratio<u32> {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    /// `round(PD·K)` with halves rounded up, at least one.
    pub fn pilot_count(self, subcarriers: usize) -> usize {
        let (n, d) = (*self.0.numer() as usize, *self.0.denom() as usize);
        ((2 * n * subcarriers + d) / (2 * d)).max(1)
    }
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self.0.denom() == 1 {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl FromStr for Density {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse pilot density {s:?}, expected e.g. 1/4"));
        let r: Ratio<u32> = s.trim().parse().map_err(|_| bad())?;
        Density::new(*r.numer(), *r.denom())
    }
}

impl Serialize for Density {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Density {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Pilot arrangement on one band.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotConfig {
    pub density: Density,
    pub subcarriers: usize,
    /// Magnitude of every pilot symbol; symbols are `amplitude·exp(jπi²/K)`.
    pub amplitude: f64,
}

impl PilotConfig {
    pub fn new(density: Density, subcarriers: usize) -> Self {
        Self {
            density,
            subcarriers,
            amplitude: 1.0,
        }
    }

    /// Pilot subcarriers: `round(PD·K)` positions spread evenly from 0 to
    /// `K − 1` (spacing rounded to whole subcarriers). Covering both band
    /// edges means interpolation never has to extend past a pilot once there
    /// are two or more.
    pub fn indices(&self) -> Vec<usize> {
        let n = self.density.pilot_count(self.subcarriers);
        if n == 1 {
            return vec![0];
        }
        let (last, gaps) = (self.subcarriers - 1, n - 1);
        (0..n).map(|i| (2 * i * last + gaps) / (2 * gaps)).collect()
    }

    /// Pilot symbol on subcarrier `i`.
    pub fn symbol(&self, i: usize) -> Complex64 {
        let k = self.subcarriers as f64;
        let phase = std::f64::consts::PI * (i * i) as f64 / k;
        Complex64::from_polar(self.amplitude, phase)
    }
}

/// Number of pilot resource elements: `ue_antennas · round(PD·K)`.
pub fn pilot_overhead(density: Density, ue_antennas: usize, subcarriers: usize) -> usize {
    ue_antennas * density.pilot_count(subcarriers)
}

/// Received pilots `Y_i = H_i·X_i + N` on the pilot subcarriers, noise drawn at
/// `snr_db` relative to the received pilot power.
pub fn observe_pilots(h: &ComplexMatrix, cfg: &PilotConfig, snr_db: f64, seed: u64) -> Result<ComplexMatrix> {
    let k = cfg.subcarriers;
    if !h.cols().is_multiple_of(k) {
        return Err(Error::shape("observe_pilots", &[h.rows(), h.cols()], &[k]));
    }
    let idx = cfg.indices();
    let ue = h.cols() / k;
    let mut y = ComplexMatrix::zeros(h.rows(), ue * idx.len());
    for b in 0..h.rows() {
        for u in 0..ue {
            for (n, &i) in idx.iter().enumerate() {
                y.set(b, u * idx.len() + n, h.get(b, u * k + i) * cfg.symbol(i));
            }
        }
    }
    apply_awgn(&y, snr_db, seed)
}

/// `Ĥ_i = Y_i·X_i⁻¹` on each pilot subcarrier.
pub fn ls_estimate(y: &ComplexMatrix, cfg: &PilotConfig) -> Result<ComplexMatrix> {
    let idx = cfg.indices();
    if !y.cols().is_multiple_of(idx.len()) {
        return Err(Error::shape("ls_estimate", &[y.rows(), y.cols()], &[idx.len()]));
    }
    let inv: Vec<Complex64> = idx
        .iter()
        .map(|&i| {
            let x = cfg.symbol(i);
            if x.norm_sqr() == 0.0 || !x.is_finite() {
                Err(Error::Contract(format!("pilot symbol on subcarrier {i} is not invertible")))
            } else {
                Ok(x.inv())
            }
        })
        .collect::<Result<_>>()?;
    let mut out = y.clone();
    for b in 0..y.rows() {
        for (c, v) in out.row_mut(b).iter_mut().enumerate() {
            *v *= inv[c % idx.len()];
        }
    }
    Ok(out)
}

/// Linear interpolation between pilot subcarriers of every antenna pair, with
/// constant extension beyond the first and last pilot.
pub fn interpolate_pilots(h_pilots: &ComplexMatrix, indices: &[usize], subcarriers: usize) -> Result<ComplexMatrix> {
    let n = indices.len();
    if n == 0 || !h_pilots.cols().is_multiple_of(n) || indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract(
            "pilot indices must be nonempty, strictly increasing and divide the columns".into(),
        ));
    }
    if indices[n - 1] >= subcarriers {
        return Err(Error::Contract(format!(
            "pilot index {} is outside {subcarriers} subcarriers",
            indices[n - 1]
        )));
    }
    let k = subcarriers;
    let ue = h_pilots.cols() / n;
    let mut out = ComplexMatrix::zeros(h_pilots.rows(), ue * k);
    for b in 0..h_pilots.rows() {
        let src = h_pilots.row(b);
        let dst = out.row_mut(b);
        for u in 0..ue {
            let p = &src[u * n..(u + 1) * n];
            let d = &mut dst[u * k..(u + 1) * k];
            let mut seg = 0;
            for (i, v) in d.iter_mut().enumerate() {
                while seg + 1 < n && indices[seg + 1] <= i {
                    seg += 1;
                }
                *v = if i <= indices[0] {
                    p[0]
                } else if seg + 1 == n {
                    p[n - 1]
                } else {
                    let (i0, i1) = (indices[seg] as f64, indices[seg + 1] as f64);
                    let t = (i as f64 - i0) / (i1 - i0);
                    p[seg] * (1.0 - t) + p[seg + 1] * t
                };
            }
        }
    }
    Ok(out)
}

/// Full LS pipeline: observe pilots at `snr_db`, invert, interpolate.
pub fn ls_interpolate(h: &ComplexMatrix, cfg: &PilotConfig, snr_db: f64, seed: u64) -> Result<ComplexMatrix> {
    if cfg.density == Density::FULL && snr_db == f64::INFINITY {
        return Ok(h.clone());
    }
    let y = observe_pilots(h, cfg, snr_db, seed)?;
    let est = ls_estimate(&y, cfg)?;
    interpolate_pilots(&est, &cfg.indices(), cfg.subcarriers)
}
