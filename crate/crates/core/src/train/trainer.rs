//! The training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{AdamW, AdamWConfig};
use super::loss::{aux_loss, nmse_node, total_loss};
use super::pilots::{ls_interpolate, Density, PilotConfig};
use crate::channel::{derive_seed, DualBandSample};
use crate::error::{Error, Result};
use crate::net::{MdfceModel, ModelInput, NormStats};
use crate::par;
use crate::tensor::{Graph, Tensor};

/// Optimization schedule and data handling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub target_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the NMSE term; the balance term gets `1 − kappa`.
    pub kappa: f64,
    /// Fraction of all steps spent ramping the learning rate up from zero.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// SNR of the sub-6 observations seen in training; `inf` trains noiseless.
    pub snr_db_train: f64,
    /// Sub-6 pilot density from which the model's input is estimated.
    pub input_density: Density,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target_lr: 1e-4,
            epochs: 1000,
            batch_size: 128,
            kappa: 0.99,
            warmup_fraction: 0.05,
            seed: 0,
            snr_db_train: f64::INFINITY,
            input_density: Density::FULL,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Schedule for the CPU-scale experiment.
    pub fn desk() -> Self {
        Self {
            target_lr: 1e-3,
            epochs: 40,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.target_lr > 0.0 && self.target_lr.is_finite()) {
            return bad("target_lr must be a positive number");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad("kappa must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if self.snr_db_train.is_nan() || self.snr_db_train == f64::NEG_INFINITY {
            return bad("snr_db_train must be a number or inf");
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` (0-based) out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_fraction * total as f64).ceil() as usize;
        if warmup == 0 || step >= warmup {
            self.target_lr
        } else {
            self.target_lr * (step + 1) as f64 / warmup as f64
        }
    }
}

/// Averages over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub nmse_loss: f64,
    pub aux_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// CSV with header `epoch,total_loss,nmse_loss,aux_loss,lr`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Numeric(format!("writing history: {e}")))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Contract(format!("csv: {e}"))
}

/// Sub-6 observation the model sees: LS estimate from `density` pilots at
/// `snr_db`, interpolated to every subcarrier.
pub fn observe_sub6(
    sample: &DualBandSample,
    density: Density,
    subcarriers: usize,
    snr_db: f64,
    seed: u64,
) -> Result<crate::channel::ComplexMatrix> {
    ls_interpolate(
        &sample.h_sub6,
        &PilotConfig::new(density, subcarriers),
        snr_db,
        seed,
    )
}

/// Normalization statistics over noiseless model inputs and targets.
pub fn fit_norm_stats(model: &MdfceModel, data: &[DualBandSample], density: Density) -> Result<NormStats> {
    let k_in = model.system().sub6.subcarriers;
    let k_out = model.system().mmwave.subcarriers;
    let pairs = par::map_indexed(data.len(), |i| -> Result<(Tensor, Tensor)> {
        let s = &data[i];
        model.check_input(&s.h_sub6)?;
        let h = observe_sub6(s, density, k_in, f64::INFINITY, 0)?;
        Ok((
            crate::net::csi_to_real(&h, k_in)?,
            crate::net::csi_to_real(&s.h_mmwave, k_out)?,
        ))
    });
    let (mut inputs, mut targets) = (Vec::with_capacity(data.len()), Vec::with_capacity(data.len()));
    for p in pairs {
        let (a, b) = p?;
        inputs.push(a);
        targets.push(b);
    }
    NormStats::fit(&inputs, &targets)
}

/// Per-sample constants for the NMSE node.
struct Prepared {
    target: Tensor,
    /// `std_e² / ‖H‖²` per target element.
    weight: Vec<f64>,
}

const NOISE_STREAM: u64 = 0x6e6f697365;

/// Trains `model` in place. On a non-finite loss the parameters are restored
/// to the end of the last completed epoch and a numeric error is returned.
pub fn train<F>(
    model: &mut MdfceModel,
    data: &[DualBandSample],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<History>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let k_in = model.system().sub6.subcarriers;
    let std2: Vec<f64> = model.norm().target_std.iter().map(|s| s * s).collect();
    let prepared = {
        let m = &*model;
        par::map_indexed(data.len(), |i| -> Result<Prepared> {
            let s = &data[i];
            m.check_input(&s.h_sub6)?;
            let target = m.sample_target(&s.h_mmwave)?;
            let energy = s.h_mmwave.energy();
            if energy == 0.0 {
                return Err(Error::Contract(format!(
                    "training sample {i} has an all-zero mmWave channel"
                )));
            }
            Ok(Prepared {
                target,
                weight: std2.iter().map(|v| v / energy).collect(),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?
    };
    let noiseless = cfg.snr_db_train == f64::INFINITY;
    let input_for = |m: &MdfceModel, i: usize, epoch: usize| {
        let seed = derive_seed(derive_seed(cfg.seed ^ NOISE_STREAM, epoch as u64), i as u64);
        let h = observe_sub6(&data[i], cfg.input_density, k_in, cfg.snr_db_train, seed)?;
        m.sample_input(&h)
    };
    let fixed_inputs = if noiseless {
        let m = &*model;
        Some(
            par::map_indexed(data.len(), |i| input_for(m, i, 0))
                .into_iter()
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.adamw.clone(), model.params());
    let mut history = History::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let snapshot = model.params().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_nmse, mut sum_aux) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let noisy;
            let parts: Vec<&(Tensor, Option<Tensor>)> = match &fixed_inputs {
                Some(all) => batch.iter().map(|&i| &all[i]).collect(),
                None => {
                    let m = &*model;
                    noisy = par::map_indexed(b, |j| input_for(m, batch[j], epoch))
                        .into_iter()
                        .collect::<Result<Vec<_>>>()?;
                    noisy.iter().collect()
                }
            };
            let input = ModelInput::stack(&parts)?;
            let per = prepared[0].target.len();
            let mut target = Vec::with_capacity(b * per);
            let mut weight = Vec::with_capacity(b * per);
            for &i in batch {
                target.extend_from_slice(prepared[i].target.data());
                weight.extend(prepared[i].weight.iter().map(|w| w / b as f64));
            }
            let (rows, cols) = prepared[0].target.dims2();

            let mut g = Graph::new();
            let p = model.params().bind(&mut g, true);
            // Non-finite parameters surface as degenerate routing first.
            let fwd = match model.forward(&mut g, &p, &input) {
                Err(Error::Routing(why)) => {
                    *model.params_mut() = snapshot;
                    return Err(Error::Numeric(format!(
                        "training diverged at epoch {} step {step}: {why}; parameters restored to the end of epoch {}",
                        epoch + 1,
                        epoch
                    )));
                }
                other => other?,
            };
            let tv = g.constant(Tensor::new(&[b * rows, cols], target)?);
            let nmse = nmse_node(&mut g, fwd.output, tv, &weight)?;
            let aux = aux_loss(&mut g, &fwd.gates)?;
            let loss = total_loss(&mut g, nmse, aux, cfg.kappa)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                *model.params_mut() = snapshot;
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {} step {step}: loss is {lv}; parameters restored to the end of epoch {}",
                    epoch + 1,
                    epoch
                )));
            }
            g.backward(loss)?;
            let grads = p.grads(&g, model.params());
            lr = cfg.lr_at(step, total_steps);
            opt.step(model.params_mut(), &grads, lr)?;
            step += 1;

            let w = b as f64;
            sum_total += lv * w;
            sum_nmse += g.value(nmse).data()[0] * w;
            sum_aux += g.value(aux).data()[0] * w;
        }
        let n = data.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            total_loss: sum_total / n,
            nmse_loss: sum_nmse / n,
            aux_loss: sum_aux / n,
            lr,
        };
        on_epoch(&record);
        history.records.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_dataset, SystemConfig};
    use crate::net::{ModelConfig, Variant};

    fn setup(sys: SystemConfig, cfg: ModelConfig, n: usize) -> (MdfceModel, Vec<DualBandSample>) {
        let data = generate_dataset(&sys, 100, n);
        let d = crate::net::Dims::new(&sys);
        let mut model = MdfceModel::new(
            cfg,
            sys,
            Variant::Full,
            NormStats::identity(d.tokens_in * d.feat_in, d.tokens_out * d.feat_out),
            1,
        )
        .unwrap();
        let norm = fit_norm_stats(&model, &data, Density::FULL).unwrap();
        model.set_norm(norm).unwrap();
        (model, data)
    }

    fn tiny_setup(n: usize) -> (MdfceModel, Vec<DualBandSample>) {
        setup(SystemConfig::tiny(), ModelConfig::tiny(), n)
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        let cfg = TrainConfig {
            target_lr: 1.0,
            warmup_fraction: 0.1,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..20).map(|s| cfg.lr_at(s, 100)).collect();
        assert_eq!(&lrs[..3], &[0.1, 0.2, 0.3]);
        assert_eq!(lrs[9], 1.0);
        assert!(lrs[10..].iter().all(|&v| v == 1.0));
        let flat = TrainConfig {
            warmup_fraction: 0.0,
            ..cfg
        };
        assert_eq!(flat.lr_at(0, 100), 1.0);
    }

    #[test]
    fn defaults_follow_reference_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.target_lr, c.epochs, c.batch_size, c.kappa), (1e-4, 1000, 128, 0.99));
        assert_eq!(c.adamw, AdamWConfig::default());
    }

    #[test]
    fn overfits_a_small_set() {
        // The output token map can only span as many antenna pairs as the
        // input has, so the sub-6 array matches the mmWave token count here.
        let mut sys = SystemConfig::tiny();
        sys.sub6.bs_antennas = 4;
        let cfg = ModelConfig {
            d_re: 64,
            d_hid: 128,
            ..ModelConfig::tiny()
        };
        let (mut model, data) = setup(sys, cfg, 16);
        let cfg = TrainConfig {
            target_lr: 3e-3,
            epochs: 200,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let h = train(&mut model, &data, &cfg, |_| {}).unwrap();
        assert_eq!(h.records.len(), 200);
        let first = 10.0 * h.records[0].nmse_loss.log10();
        let last = 10.0 * h.records[199].nmse_loss.log10();
        assert!(first - last >= 20.0, "NMSE went from {first:.2} dB to {last:.2} dB");
    }

    #[test]
    fn same_seed_gives_identical_history() {
        let run = |seed| {
            let (mut model, data) = tiny_setup(12);
            let cfg = TrainConfig {
                target_lr: 1e-3,
                epochs: 3,
                batch_size: 5,
                seed,
                snr_db_train: 10.0,
                input_density: Density::new(1, 2).unwrap(),
                ..TrainConfig::default()
            };
            let h = train(&mut model, &data, &cfg, |_| {}).unwrap();
            (h, model.params().clone())
        };
        let (a, pa) = run(3);
        let (b, pb) = run(3);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let (c, _) = run(4);
        assert_ne!(a, c);
    }

    #[test]
    fn history_csv_layout() {
        let h = History {
            records: vec![EpochRecord {
                epoch: 1,
                total_loss: 0.5,
                nmse_loss: 0.25,
                aux_loss: 2.0,
                lr: 1e-4,
            }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,total_loss,nmse_loss,aux_loss,lr"));
        assert_eq!(lines.next(), Some("1,0.5,0.25,2.0,0.0001"));
    }

    #[test]
    fn divergence_restores_parameters() {
        let (mut model, data) = tiny_setup(4);
        let id = model.params().find("embed.w").unwrap();
        model.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
        let before = model.params().clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let err = train(&mut model, &data, &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        // NaN != NaN, so compare bit patterns.
        for ((_, _, a), (_, _, b)) in model.params().iter().zip(before.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (mut model, data) = tiny_setup(2);
        let cfg = TrainConfig::default();
        assert!(matches!(train(&mut model, &[], &cfg, |_| {}), Err(Error::Contract(_))));
        let bad = TrainConfig {
            kappa: 1.5,
            ..cfg.clone()
        };
        assert!(matches!(train(&mut model, &data, &bad, |_| {}), Err(Error::Config(_))));
        let mut wrong = data.clone();
        wrong[1].h_sub6 = crate::channel::ComplexMatrix::zeros(3, 3);
        let err = train(&mut model, &wrong, &cfg, |_| {}).unwrap_err();
        assert!(err.to_string().contains("3x3"), "{err}");
    }
}
