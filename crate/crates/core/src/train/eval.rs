//! NMSE-versus-SNR evaluation of the extrapolator and the LS baseline.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::flops::flops_per_sample;
use super::loss::{nmse, nmse_db_reported};
use super::pilots::{ls_interpolate, pilot_overhead, Density, PilotConfig};
use super::trainer::{csv_err, observe_sub6};
use crate::channel::{derive_seed, DualBandSample, SystemConfig};
use crate::error::{Error, Result};
use crate::net::MdfceModel;
use crate::par;

/// One estimator under test.
#[derive(Clone, Debug)]
pub enum Method<'a> {
    /// The network fed with LS-interpolated sub-6 CSI estimated from pilots
    /// at `input_density`.
    Mdfce {
        name: String,
        model: &'a MdfceModel,
        input_density: Density,
    },
    /// LS estimation on mmWave pilots with linear interpolation.
    Ls { density: Density },
}

impl Method<'_> {
    pub fn name(&self) -> String {
        match self {
            Method::Mdfce { name, .. } => name.clone(),
            Method::Ls { density } => format!("ls-pd-{density}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub snr_db: f64,
    pub method: String,
    pub nmse_linear: f64,
    /// `10·log10(nmse_linear)`, floored for exact estimates.
    pub nmse_db: f64,
    /// Pilot resource elements the method spends.
    pub pilot_overhead: usize,
    /// Network FLOPs for one sample; zero for the LS baseline.
    pub flops_per_sample: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn find(&self, method: &str, snr_db: f64) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && (r.snr_db == snr_db))
    }

    /// CSV with header `snr_db,method,nmse_linear,nmse_db,pilot_overhead,flops_per_sample`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| Error::Contract(format!("writing report: {e}")))
    }

    /// Fixed-width text table for terminals.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut s = format!(
            "{:>8}  {:<width$}  {:>10}  {:>12}  {:>8}  {:>12}\n",
            "snr_db", "method", "nmse_db", "nmse", "pilots", "flops"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>8}  {:<width$}  {:>10.3}  {:>12.5e}  {:>8}  {:>12}",
                r.snr_db, r.method, r.nmse_db, r.nmse_linear, r.pilot_overhead, r.flops_per_sample
            );
        }
        s
    }
}

/// Runs every method at every SNR. Observation noise for sample `i` at the
/// `s`-th SNR is seeded from `(seed, s, i)`, so methods see matching draws
/// and reruns are reproducible.
pub fn evaluate(
    system: &SystemConfig,
    methods: &[Method<'_>],
    samples: &[DualBandSample],
    snrs_db: &[f64],
    seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    if snrs_db.is_empty() {
        return Err(Error::Contract("no SNR points requested".into()));
    }
    let want = (system.mmwave.bs_antennas, system.mmwave.csi_cols());
    if let Some(i) = samples.iter().position(|s| s.h_mmwave.shape() != want) {
        return Err(Error::Contract(format!(
            "sample {i} does not match the mmWave band of the evaluated system"
        )));
    }
    let truth: Vec<_> = samples.iter().map(|s| s.h_mmwave.clone()).collect();
    let mut report = EvalReport::default();
    for (si, &snr) in snrs_db.iter().enumerate() {
        let snr_seed = derive_seed(seed, si as u64);
        for method in methods {
            let (estimates, overhead, flops) = match method {
                Method::Mdfce {
                    model,
                    input_density,
                    ..
                } => {
                    if model.system() != system {
                        return Err(Error::Config(format!(
                            "model was trained for system {} but the data is from system {}",
                            model.system().fingerprint(),
                            system.fingerprint()
                        )));
                    }
                    let sys = system;
                    let k = sys.sub6.subcarriers;
                    let inputs = par::map_indexed(samples.len(), |i| {
                        observe_sub6(&samples[i], *input_density, k, snr, derive_seed(snr_seed, i as u64))
                    })
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                    let flops = flops_per_sample(model.config(), model.dims(), model.variant());
                    (
                        model.predict_batch(&inputs)?,
                        pilot_overhead(*input_density, sys.sub6.ue_antennas, k),
                        flops.total_flops(),
                    )
                }
                Method::Ls { density } => {
                    let band = &system.mmwave;
                    let k = band.subcarriers;
                    let cfg = PilotConfig::new(*density, k);
                    let est = par::map_indexed(samples.len(), |i| {
                        ls_interpolate(&samples[i].h_mmwave, &cfg, snr, derive_seed(snr_seed, i as u64))
                    })
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                    (est, pilot_overhead(*density, band.ue_antennas, k), 0)
                }
            };
            let linear = nmse(&truth, &estimates)?;
            report.rows.push(EvalRow {
                snr_db: snr,
                method: method.name(),
                nmse_linear: linear,
                nmse_db: nmse_db_reported(linear)?,
                pilot_overhead: overhead,
                flops_per_sample: flops,
            });
        }
    }
    Ok(report)
}
