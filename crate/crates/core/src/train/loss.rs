//! Training objectives and the dB conversion used in reports.

use crate::channel::ComplexMatrix;
use crate::error::{Error, Result};
use crate::net::GateDecision;
use crate::tensor::{Graph, Var};

/// Lowest NMSE reported in dB; exact estimates map here instead of `-inf`.
pub const NMSE_DB_FLOOR: f64 = -150.0;

/// Mean over samples of `‖H − Ĥ‖² / ‖H‖²`.
pub fn nmse(truth: &[ComplexMatrix], estimate: &[ComplexMatrix]) -> Result<f64> {
    if truth.is_empty() || truth.len() != estimate.len() {
        return Err(Error::Contract(format!(
            "nmse needs equal nonempty batches, got {} and {}",
            truth.len(),
            estimate.len()
        )));
    }
    let mut total = 0.0;
    for (i, (h, e)) in truth.iter().zip(estimate).enumerate() {
        if h.shape() != e.shape() {
            return Err(Error::shape(
                "nmse",
                &[h.rows(), h.cols()],
                &[e.rows(), e.cols()],
            ));
        }
        total += sample_nmse(h, e).map_err(|err| match err {
            Error::Contract(m) => Error::Contract(format!("sample {i}: {m}")),
            other => other,
        })?;
    }
    Ok(total / truth.len() as f64)
}

/// `‖H − Ĥ‖² / ‖H‖²` of one sample.
pub fn sample_nmse(truth: &ComplexMatrix, estimate: &ComplexMatrix) -> Result<f64> {
    let energy = truth.energy();
    if energy == 0.0 {
        return Err(Error::Contract("NMSE is undefined for an all-zero channel".into()));
    }
    Ok(truth.distance_sqr(estimate) / energy)
}

/// Differentiable NMSE on the graph: `Σ w ⊙ (pred − target)²`, where the
/// caller folds the per-sample `1/(B·‖H_b‖²)` and any normalization scale
/// into the constant weights `w`.
pub fn nmse_node(g: &mut Graph, pred: Var, target: Var, weights: &[f64]) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    g.weighted_sum(sq, weights)
}

/// `N_e · Σ_j m_j · p_j` for one sample's gate statistics.
pub fn aux_value(mean_gate: &[f64], route_fraction: &[f64]) -> f64 {
    let n_e = mean_gate.len() as f64;
    n_e * mean_gate
        .iter()
        .zip(route_fraction)
        .map(|(m, p)| m * p)
        .sum::<f64>()
}

/// Load-balancing loss averaged over samples and MoE layers. Gradients flow
/// through the routing weights only; route fractions are constants.
pub fn aux_loss(g: &mut Graph, gates: &[GateDecision]) -> Result<Var> {
    if gates.is_empty() {
        return Err(Error::Contract("aux_loss needs at least one MoE layer".into()));
    }
    let layers = gates.len() as f64;
    let mut total: Option<Var> = None;
    for d in gates {
        let (batch, n_e) = d.mean_gate.dims2();
        let scale = n_e as f64 / (d.tokens as f64 * batch as f64 * layers);
        let rows = batch * d.tokens;
        let mut w = Vec::with_capacity(rows * n_e);
        for i in 0..rows {
            let b = i / d.tokens;
            w.extend((0..n_e).map(|j| scale * d.route_fraction.get2(b, j)));
        }
        let term = g.weighted_sum(d.weights_var, &w)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty"))
}

/// Value of [`aux_loss`] without building graph nodes.
pub fn aux_loss_value(gates: &[GateDecision]) -> f64 {
    let mut total = 0.0;
    for d in gates {
        let (batch, n_e) = d.mean_gate.dims2();
        for b in 0..batch {
            let m = &d.mean_gate.data()[b * n_e..(b + 1) * n_e];
            let p = &d.route_fraction.data()[b * n_e..(b + 1) * n_e];
            total += aux_value(m, p) / batch as f64;
        }
    }
    total / gates.len() as f64
}

/// `κ·nmse + (1 − κ)·aux`.
pub fn total_loss_value(nmse: f64, aux: f64, kappa: f64) -> f64 {
    kappa * nmse + (1.0 - kappa) * aux
}

pub fn total_loss(g: &mut Graph, nmse: Var, aux: Var, kappa: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::Contract(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    let a = g.scale(nmse, kappa);
    let b = g.scale(aux, 1.0 - kappa);
    g.add(a, b)
}

/// `10·log10(x)`; zero maps to `-inf`.
pub fn nmse_db(nmse_linear: f64) -> Result<f64> {
    if nmse_linear < 0.0 || nmse_linear.is_nan() {
        return Err(Error::Contract(format!(
            "NMSE must be nonnegative, got {nmse_linear}"
        )));
    }
    Ok(10.0 * nmse_linear.log10())
}

/// [`nmse_db`] clamped to [`NMSE_DB_FLOOR`] for reporting.
pub fn nmse_db_reported(nmse_linear: f64) -> Result<f64> {
    Ok(nmse_db(nmse_linear)?.max(NMSE_DB_FLOOR))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64;
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::Tensor;

    fn h() -> ComplexMatrix {
        ComplexMatrix::from_vec(
            2,
            2,
            vec![
                Complex64::new(1.0, -1.0),
                Complex64::new(0.5, 2.0),
                Complex64::new(-3.0, 0.0),
                Complex64::new(0.0, 0.25),
            ],
        )
        .unwrap()
    }

    #[test]
    fn nmse_examples() {
        let h = h();
        assert_eq!(nmse(std::slice::from_ref(&h), std::slice::from_ref(&h)).unwrap(), 0.0);
        assert_abs_diff_eq!(nmse(std::slice::from_ref(&h), &[ComplexMatrix::zeros(2, 2)]).unwrap(), 1.0, epsilon = 1e-15);
        let twice = h.scale(Complex64::new(2.0, 0.0));
        assert_abs_diff_eq!(nmse(std::slice::from_ref(&h), &[twice]).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(
            nmse(&[ComplexMatrix::zeros(2, 2)], &[h]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nmse_node_matches_value_and_gradient() {
        let t = Tensor::new(&[1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let energy: f64 = t.data().iter().map(|v| v * v).sum();
        let w = vec![1.0 / energy; 4];
        let x = Tensor::new(&[1, 4], vec![0.0, -1.0, 0.5, 2.0]).unwrap();
        let err = crate::tensor::grad_check(
            |g, xv| {
                let tv = g.constant(t.clone());
                nmse_node(g, xv, tv, &w)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
        let mut g = Graph::new();
        let (xv, tv) = (g.constant(x), g.constant(t));
        let l = nmse_node(&mut g, xv, tv, &w).unwrap();
        assert_abs_diff_eq!(g.value(l).data()[0], 3.0 / energy, epsilon = 1e-15);
    }

    #[test]
    fn aux_closed_forms() {
        // Balanced: m = 1/N_e, p = K/N_e.
        let (n_e, k) = (8usize, 2usize);
        let m = vec![1.0 / n_e as f64; n_e];
        let p = vec![k as f64 / n_e as f64; n_e];
        assert_abs_diff_eq!(aux_value(&m, &p), 2.0, epsilon = 1e-12);
        // Collapsed on experts 0 and 1 with equal weights.
        let mut m = vec![0.0; n_e];
        let mut p = vec![0.0; n_e];
        m[0] = 0.5;
        m[1] = 0.5;
        p[0] = 1.0;
        p[1] = 1.0;
        assert_eq!(aux_value(&m, &p), 8.0);
        assert_eq!(aux_value(&[1.0], &[1.0]), 1.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_abs_diff_eq!(total_loss_value(0.5, 2.0, 0.99), 0.515, epsilon = 1e-15);
        assert_eq!(total_loss_value(0.5, 2.0, 1.0), 0.5);
        assert_eq!(total_loss_value(0.5, 2.0, 0.0), 2.0);
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.5));
        let b = g.constant(Tensor::scalar(2.0));
        let t = total_loss(&mut g, a, b, 0.99).unwrap();
        assert_abs_diff_eq!(g.value(t).data()[0], 0.515, epsilon = 1e-15);
        assert!(total_loss(&mut g, a, b, 1.5).is_err());
    }

    #[test]
    fn db_conversion() {
        assert_eq!(nmse_db(1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(nmse_db(0.1).unwrap(), -10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nmse_db(0.01).unwrap(), -20.0, epsilon = 1e-12);
        assert_eq!(nmse_db(0.0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(nmse_db_reported(0.0).unwrap(), NMSE_DB_FLOOR);
        assert!(nmse_db(-1e-3).is_err());
    }

    /// Gate statistics of one sample from raw logits `[T, N_e]`.
    fn route(logits: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<f64>) {
        let n_e = logits[0].len();
        let t = logits.len() as f64;
        let (mut m, mut p) = (vec![0.0; n_e], vec![0.0; n_e]);
        for row in logits {
            let (mask, _) = crate::net::top_k_mask(row, k);
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = (0..n_e).filter(|&j| mask[j]).map(|j| (row[j] - max).exp()).sum();
            for j in (0..n_e).filter(|&j| mask[j]) {
                m[j] += (row[j] - max).exp() / z / t;
                p[j] += 1.0 / t;
            }
        }
        (m, p)
    }

    #[test]
    fn aux_can_drop_below_k_with_two_experts_per_token() {
        // Three tokens, K = 2 of 3 experts. Expert 0 is selected by every
        // token but receives almost no weight, so Σ m·p sits well below K/N_e.
        let logits = vec![
            vec![0.0, 30.0, -5.0],
            vec![0.0, 30.0, -5.0],
            vec![0.0, -5.0, 30.0],
        ];
        let (m, p) = route(&logits, 2);
        assert_eq!(p, vec![1.0, 2.0 / 3.0, 1.0 / 3.0]);
        let aux = aux_value(&m, &p);
        assert!((aux - 5.0 / 3.0).abs() < 1e-9, "{aux}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        /// With top-1 routing `m = p`, so `N_e·Σp² ≥ (Σp)² = 1` by
        /// Cauchy-Schwarz.
        #[test]
        fn top1_aux_is_at_least_one(
            n_e in 1usize..9,
            tokens in 1usize..16,
            raw in proptest::collection::vec(-4.0f64..4.0, 16 * 9),
        ) {
            let logits: Vec<Vec<f64>> = (0..tokens).map(|t| raw[t * n_e..(t + 1) * n_e].to_vec()).collect();
            let (m, p) = route(&logits, 1);
            prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(aux_value(&m, &p) >= 1.0 - 1e-9);
        }

        /// Balanced routing attains K exactly for any K.
        #[test]
        fn balanced_aux_is_k(n_e in 1usize..12, k_seed in 0usize..100) {
            let k = 1 + k_seed % n_e;
            let m = vec![1.0 / n_e as f64; n_e];
            let p = vec![k as f64 / n_e as f64; n_e];
            prop_assert!((aux_value(&m, &p) - k as f64).abs() < 1e-12);
        }
    }
}
