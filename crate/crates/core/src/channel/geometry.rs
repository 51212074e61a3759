//! Shared-geometry multipath model.
//!
//! Both bands see the same departure angles, arrival angles and delays. Each
//! path's complex gain is defined at its band center, so the per-subcarrier
//! phase ramp uses the baseband offset `f_i − f_c`. The mmWave band keeps the
//! strongest sub-6 paths.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{BandConfig, ComplexMatrix, GeometryConfig, SystemConfig};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Scatterers of a scene lie uniformly in this box (metres, BS at origin,
/// array axis along y, broadside along +x).
const SCATTER_BOX_X: (f64, f64) = (10.0, 60.0);
const SCATTER_BOX_Y: (f64, f64) = (-40.0, 40.0);

/// Uniform-linear-array response: element `t` is `exp(j·2π·d·t·sin θ)`.
pub fn steering_vector(n_antennas: usize, angle: f64, spacing_wavelengths: f64) -> Vec<Complex64> {
    let step = 2.0 * PI * spacing_wavelengths * angle.sin();
    (0..n_antennas)
        .map(|t| Complex64::from_polar(1.0, step * t as f64))
        .collect()
}

/// One propagation path as seen by one band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathComponent {
    /// Departure angle at the BS array, radians from broadside.
    pub aod: f64,
    /// Arrival angle at the UE array, radians from broadside.
    pub aoa: f64,
    /// Delay in seconds.
    pub delay: f64,
    pub gain: Complex64,
}

/// Paths of one sample, sorted by descending sub-6 gain magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSet {
    pub aod: Vec<f64>,
    pub aoa: Vec<f64>,
    pub delay: Vec<f64>,
    pub gain_sub6: Vec<Complex64>,
    /// Gains of the strongest `mmwave.num_paths` paths.
    pub gain_mmwave: Vec<Complex64>,
}

impl PathSet {
    pub fn sub6_paths(&self) -> Vec<PathComponent> {
        self.components(&self.gain_sub6)
    }

    pub fn mmwave_paths(&self) -> Vec<PathComponent> {
        self.components(&self.gain_mmwave)
    }

    fn components(&self, gains: &[Complex64]) -> Vec<PathComponent> {
        gains
            .iter()
            .enumerate()
            .map(|(p, &gain)| PathComponent {
                aod: self.aod[p],
                aoa: self.aoa[p],
                delay: self.delay[p],
                gain,
            })
            .collect()
    }
}

/// Spatial-frequency CSI of one band:
/// `H_i = Σ_p α_p · a_BS(θ_p) · a_UE(φ_p)ᴴ · exp(−j2π(f_i − f_c)τ_p)`,
/// concatenated over subcarriers (column `u·K + i`).
pub fn synthesize_band(band: &BandConfig, paths: &[PathComponent]) -> ComplexMatrix {
    let (mb, mu, k) = (band.bs_antennas, band.ue_antennas, band.subcarriers);
    let mut h = ComplexMatrix::zeros(mb, mu * k);
    let offsets: Vec<f64> = (0..k).map(|i| band.subcarrier_offset_hz(i)).collect();
    let spacing = band.antenna_spacing_wavelengths;
    for p in paths {
        let a_bs = steering_vector(mb, p.aod, spacing);
        let a_ue = steering_vector(mu, p.aoa, spacing);
        let ramp: Vec<Complex64> = offsets
            .iter()
            .map(|f| Complex64::from_polar(1.0, -2.0 * PI * f * p.delay))
            .collect();
        for (b, &ab) in a_bs.iter().enumerate() {
            let row = h.row_mut(b);
            for (u, au) in a_ue.iter().enumerate() {
                let spatial = p.gain * ab * au.conj();
                for (dst, r) in row[u * k..(u + 1) * k].iter_mut().zip(&ramp) {
                    *dst += spatial * r;
                }
            }
        }
    }
    h
}

fn complex_gaussian(rng: &mut impl Rng, power: f64) -> Complex64 {
    let s = (power / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Draws the shared paths of one sample.
pub fn draw_paths(cfg: &SystemConfig, rng: &mut impl Rng) -> PathSet {
    let mut paths = match &cfg.geometry {
        GeometryConfig::Iid { .. } => draw_iid(cfg, rng),
        GeometryConfig::Scene {
            scene_seed,
            region_center_m,
            region_size_m,
        } => draw_scene(cfg, *scene_seed, *region_center_m, *region_size_m, rng),
    };
    paths.sort_by(|a, b| b.gain.norm().total_cmp(&a.gain.norm()));

    let amp = 10f64.powf(cfg.mmwave_power_offset_db / 20.0);
    let keep = cfg.mmwave.num_paths;
    let gain_mmwave = match cfg.geometry {
        GeometryConfig::Iid { gain_correlation } => {
            let rho = gain_correlation;
            let fresh = (1.0 - rho * rho).max(0.0).sqrt();
            paths[..keep]
                .iter()
                .map(|p| {
                    // Independent part matches the path's expected power.
                    let w = complex_gaussian(rng, p.gain.norm_sqr().max(f64::MIN_POSITIVE));
                    amp * (rho * p.gain + fresh * w)
                })
                .collect()
        }
        GeometryConfig::Scene { .. } => paths[..keep].iter().map(|p| amp * p.gain).collect(),
    };

    PathSet {
        aod: paths.iter().map(|p| p.aod).collect(),
        aoa: paths.iter().map(|p| p.aoa).collect(),
        delay: paths.iter().map(|p| p.delay).collect(),
        gain_sub6: paths.iter().map(|p| p.gain).collect(),
        gain_mmwave,
    }
}

fn draw_iid(cfg: &SystemConfig, rng: &mut impl Rng) -> Vec<PathComponent> {
    let t_max = cfg.max_delay();
    let decay = t_max / 4.0;
    let angle = Uniform::new(-FRAC_PI_2, FRAC_PI_2).expect("valid range");
    // Inverse CDF of an exponential with scale `decay` truncated to [0, t_max).
    let tail = 1.0 - (-t_max / decay).exp();
    let mut raw: Vec<(f64, f64, f64)> = (0..cfg.sub6.num_paths)
        .map(|_| {
            let u: f64 = rng.random();
            let delay = (-decay * (1.0 - u * tail).ln()).min(t_max * (1.0 - 1e-12));
            (angle.sample(rng), angle.sample(rng), delay)
        })
        .collect();
    let total: f64 = raw.iter().map(|&(_, _, d)| (-d / decay).exp()).sum();
    raw.iter_mut()
        .map(|&mut (aod, aoa, delay)| PathComponent {
            aod,
            aoa,
            delay,
            gain: complex_gaussian(rng, (-delay / decay).exp() / total),
        })
        .collect()
}

/// Scatterer positions and reflection coefficients of a scene.
pub fn scene_scatterers(scene_seed: u64, count: usize) -> Vec<([f64; 2], Complex64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let xs = Uniform::new(SCATTER_BOX_X.0, SCATTER_BOX_X.1).expect("valid range");
    let ys = Uniform::new(SCATTER_BOX_Y.0, SCATTER_BOX_Y.1).expect("valid range");
    (0..count)
        .map(|_| {
            let pos = [xs.sample(&mut rng), ys.sample(&mut rng)];
            (pos, complex_gaussian(&mut rng, 1.0))
        })
        .collect()
}

fn draw_scene(
    cfg: &SystemConfig,
    scene_seed: u64,
    center: [f64; 2],
    size: f64,
    rng: &mut impl Rng,
) -> Vec<PathComponent> {
    let half = size / 2.0;
    let ue = [
        rng.random_range(center[0] - half..center[0] + half),
        rng.random_range(center[1] - half..center[1] + half),
    ];
    let norm = |v: [f64; 2]| v[0].hypot(v[1]);
    let los_len = norm(ue);
    // (aod, aoa, path length, amplitude) for the direct path and each bounce.
    let mut raw = vec![(
        ue[1].atan2(ue[0]),
        (-ue[1]).atan2(ue[0]),
        los_len,
        Complex64::new(1.0 / los_len, 0.0),
    )];
    for (s, refl) in scene_scatterers(scene_seed, cfg.sub6.num_paths.saturating_sub(1)) {
        let d1 = norm(s);
        let v = [s[0] - ue[0], s[1] - ue[1]];
        let len = d1 + norm(v);
        raw.push((s[1].atan2(s[0]), v[1].atan2(-v[0]), len, refl * (0.5 / len)));
    }

    let t_max = cfg.max_delay() * (1.0 - 1e-12);
    let carrier = cfg.sub6.carrier_freq_hz;
    let mut paths: Vec<PathComponent> = raw
        .into_iter()
        .map(|(aod, aoa, len, amp)| PathComponent {
            aod,
            aoa,
            delay: ((len - los_len) / SPEED_OF_LIGHT).min(t_max),
            gain: amp * Complex64::from_polar(1.0, -2.0 * PI * carrier * len / SPEED_OF_LIGHT),
        })
        .collect();
    let total: f64 = paths.iter().map(|p| p.gain.norm_sqr()).sum();
    let s = total.sqrt().recip();
    for p in &mut paths {
        p.gain *= s;
    }
    paths
}
