use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-band array, OFDM and propagation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandConfig {
    pub bs_antennas: usize,
    pub ue_antennas: usize,
    pub subcarriers: usize,
    pub carrier_freq_hz: f64,
    pub bandwidth_hz: f64,
    pub num_paths: usize,
    pub antenna_spacing_wavelengths: f64,
}

impl BandConfig {
    /// 3.5 GHz uplink band.
    pub fn sub6(bs_antennas: usize) -> Self {
        Self {
            bs_antennas,
            ue_antennas: 2,
            subcarriers: 128,
            carrier_freq_hz: 3.5e9,
            bandwidth_hz: 40e6,
            num_paths: 15,
            antenna_spacing_wavelengths: 0.5,
        }
    }

    /// 28 GHz downlink band.
    pub fn mmwave(bs_antennas: usize) -> Self {
        Self {
            bs_antennas,
            ue_antennas: 2,
            subcarriers: 256,
            carrier_freq_hz: 28e9,
            bandwidth_hz: 123e6,
            num_paths: 5,
            antenna_spacing_wavelengths: 0.5,
        }
    }

    /// OFDM symbol duration `K / B` in seconds.
    pub fn symbol_duration(&self) -> f64 {
        self.subcarriers as f64 / self.bandwidth_hz
    }

    /// Baseband offset of subcarrier `i` from the carrier, `(i − K/2)·B/K`.
    pub fn subcarrier_offset_hz(&self, i: usize) -> f64 {
        let k = self.subcarriers as f64;
        (i as f64 - k / 2.0) * self.bandwidth_hz / k
    }

    /// Antenna pairs, i.e. rows of the real-valued token layout.
    pub fn antenna_pairs(&self) -> usize {
        self.bs_antennas * self.ue_antennas
    }

    /// Columns of the concatenated CSI matrix.
    pub fn csi_cols(&self) -> usize {
        self.ue_antennas * self.subcarriers
    }

    fn validate(&self, band: &str) -> Result<()> {
        let counts = [
            ("bs_antennas", self.bs_antennas),
            ("ue_antennas", self.ue_antennas),
            ("subcarriers", self.subcarriers),
            ("num_paths", self.num_paths),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{band}.{name} must be >= 1")));
            }
        }
        let positive = [
            ("carrier_freq_hz", self.carrier_freq_hz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("antenna_spacing_wavelengths", self.antenna_spacing_wavelengths),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{band}.{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the shared propagation geometry of a sample is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum GeometryConfig {
    /// Independent random paths per sample: uniform angles, truncated
    /// exponential delays, complex Gaussian gains with an exponential
    /// power-delay profile.
    Iid {
        /// Correlation between a path's sub-6 and mmWave complex gains;
        /// 0 draws the mmWave gain independently, 1 shares it.
        gain_correlation: f64,
    },
    /// A fixed site: a BS at the origin, point scatterers drawn once from
    /// `scene_seed`, and one UE position per sample drawn uniformly from a
    /// square region. Each path's geometry and gain follow from positions.
    Scene {
        scene_seed: u64,
        region_center_m: [f64; 2],
        region_size_m: f64,
    },
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig::Iid {
            gain_correlation: 1.0,
        }
    }
}

/// Paired-band system description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub sub6: BandConfig,
    pub mmwave: BandConfig,
    /// Power of each mmWave path relative to its sub-6 counterpart.
    #[serde(default = "default_mmwave_power_offset_db")]
    pub mmwave_power_offset_db: f64,
    #[serde(default)]
    pub geometry: GeometryConfig,
}

fn default_mmwave_power_offset_db() -> f64 {
    -20.0
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::table(16, 32)
    }
}

impl SystemConfig {
    /// Reference arrays: sub-6 BS with 4 or 16 antennas, mmWave BS with 8, 16
    /// or 32 antennas, both UEs with 2.
    pub fn table(sub6_bs: usize, mmwave_bs: usize) -> Self {
        Self {
            sub6: BandConfig::sub6(sub6_bs),
            mmwave: BandConfig::mmwave(mmwave_bs),
            mmwave_power_offset_db: default_mmwave_power_offset_db(),
            geometry: GeometryConfig::default(),
        }
    }

    /// Scaled-down site used for CPU experiments: 4×2 antennas with 32
    /// subcarriers at sub-6, 8×2 with 64 at mmWave, scene geometry.
    pub fn desk() -> Self {
        let mut sub6 = BandConfig::sub6(4);
        sub6.subcarriers = 32;
        let mut mmwave = BandConfig::mmwave(8);
        mmwave.subcarriers = 64;
        Self {
            sub6,
            mmwave,
            mmwave_power_offset_db: default_mmwave_power_offset_db(),
            geometry: GeometryConfig::Scene {
                scene_seed: 2024,
                region_center_m: [42.5, 0.0],
                region_size_m: 5.0,
            },
        }
    }

    /// Desk geometry on 2×2 and 4×2 arrays with 8 and 16 subcarriers.
    pub fn tiny() -> Self {
        let mut s = Self::desk();
        s.sub6.bs_antennas = 2;
        s.sub6.subcarriers = 8;
        s.mmwave.bs_antennas = 4;
        s.mmwave.subcarriers = 16;
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.sub6.validate("sub6")?;
        self.mmwave.validate("mmwave")?;
        if self.mmwave.num_paths > self.sub6.num_paths {
            return Err(Error::Config(format!(
                "mmwave.num_paths ({}) must not exceed sub6.num_paths ({}): the mmWave band keeps the strongest shared paths",
                self.mmwave.num_paths, self.sub6.num_paths
            )));
        }
        if !self.mmwave_power_offset_db.is_finite() {
            return Err(Error::Config("mmwave_power_offset_db must be finite".into()));
        }
        match &self.geometry {
            GeometryConfig::Iid { gain_correlation } => {
                if !(0.0..=1.0).contains(gain_correlation) {
                    return Err(Error::Config(format!(
                        "gain_correlation must lie in [0, 1], got {gain_correlation}"
                    )));
                }
            }
            GeometryConfig::Scene {
                region_center_m,
                region_size_m,
                ..
            } => {
                if !(region_size_m.is_finite() && *region_size_m > 0.0) {
                    return Err(Error::Config("region_size_m must be > 0".into()));
                }
                if region_center_m[0] - region_size_m / 2.0 <= 0.0 {
                    return Err(Error::Config(
                        "UE region must lie in front of the BS array (x > 0)".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Largest delay any shared path may take: the shorter symbol duration.
    pub fn max_delay(&self) -> f64 {
        self.sub6.symbol_duration().min(self.mmwave.symbol_duration())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("system config serializes")
    }

    /// Short hash of the canonical text form.
    pub fn fingerprint(&self) -> String {
        crate::digest::short_hash(self.to_text().as_bytes())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("system config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_table() {
        let c = SystemConfig::default();
        assert_eq!(
            (c.sub6.ue_antennas, c.sub6.subcarriers, c.sub6.num_paths),
            (2, 128, 15)
        );
        assert_eq!(
            (c.mmwave.ue_antennas, c.mmwave.subcarriers, c.mmwave.num_paths),
            (2, 256, 5)
        );
        assert_eq!(c.sub6.carrier_freq_hz, 3.5e9);
        assert_eq!(c.mmwave.carrier_freq_hz, 28e9);
        assert_eq!(c.sub6.bandwidth_hz, 40e6);
        assert_eq!(c.mmwave.bandwidth_hz, 123e6);
        assert_eq!(c.sub6.antenna_spacing_wavelengths, 0.5);
        for (s, m) in [(4, 8), (16, 16), (16, 32)] {
            SystemConfig::table(s, m).validate().unwrap();
        }
    }

    #[test]
    fn text_round_trip() {
        for c in [SystemConfig::default(), SystemConfig::desk()] {
            assert_eq!(SystemConfig::from_text(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn rejects_invalid_values() {
        let mut c = SystemConfig::default();
        c.sub6.subcarriers = 0;
        assert!(c.validate().is_err());
        let mut c = SystemConfig::default();
        c.mmwave.bandwidth_hz = 0.0;
        assert!(c.validate().is_err());
        let mut c = SystemConfig::default();
        c.mmwave.num_paths = 20;
        assert!(c.validate().is_err());
    }
}
