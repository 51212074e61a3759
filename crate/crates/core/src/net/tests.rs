use approx::assert_abs_diff_eq;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, Moe, Mhsa, Registrar};
use super::model::Block;
use super::*;
use crate::channel::{generate_sample, ComplexMatrix, SystemConfig};
use crate::error::Error;
use crate::tensor::{Graph, ParamStore, Tensor};

fn tiny_system() -> SystemConfig {
    SystemConfig::tiny()
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig::tiny()
}

fn model(sys: SystemConfig, cfg: ModelConfig, variant: Variant) -> MdfceModel {
    let d = Dims::new(&sys);
    let norm = NormStats::identity(d.tokens_in * d.feat_in, d.tokens_out * d.feat_out);
    MdfceModel::new(cfg, sys, variant, norm, 7).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn moe_layer(d: usize, n_e: usize, k: usize, seed: u64) -> (ParamStore, Moe) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let moe = {
        let mut reg = Registrar::create(&mut store, &mut rng);
        Moe::new(&mut reg, "moe", d, 4, n_e, k).unwrap()
    };
    (store, moe)
}

#[test]
fn top_k_example() {
    let (mask, margin) = top_k_mask(&[0.5, 0.2, 0.9, 0.1], 2);
    assert_eq!(mask, vec![true, false, true, false]);
    assert_abs_diff_eq!(margin, 0.3, epsilon = 1e-15);

    let (mut store, moe) = moe_layer(4, 4, 2, 1);
    // Zero gate weights with a bias equal to the example logits.
    *store.get_mut(moe.gate.w) = Tensor::zeros(&[4, 4]);
    *store.get_mut(moe.gate.b.unwrap()) = Tensor::new(&[4], vec![0.5, 0.2, 0.9, 0.1]).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(randn(&[1, 4], 2));
    let mut evals = 0;
    let (_, d) = moe.forward(&mut g, &p, x, x, 1, &mut evals).unwrap();
    assert_eq!(d.mask, vec![true, false, true, false]);
    let w = d.weights.data();
    assert_abs_diff_eq!(w[0], 0.4013, epsilon = 5e-5);
    assert_abs_diff_eq!(w[2], 0.5987, epsilon = 5e-5);
    assert_eq!((w[1], w[3]), (0.0, 0.0));
    assert_eq!(evals, 2);
}

#[test]
fn ties_pick_lowest_index() {
    let (mask, margin) = top_k_mask(&[1.0, 3.0, 3.0, 3.0], 2);
    assert_eq!(mask, vec![false, true, true, false]);
    assert_eq!(margin, 0.0);
}

#[test]
fn all_experts_active_is_plain_softmax() {
    let (store, moe) = moe_layer(6, 3, 3, 4);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(randn(&[5, 6], 5));
    let (_, d) = moe.forward(&mut g, &p, x, x, 5, &mut 0).unwrap();
    for i in 0..5 {
        let row = d.logits.row(i);
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for j in 0..3 {
            assert_abs_diff_eq!(d.weights.get2(i, j), (row[j] - max).exp() / z, epsilon = 1e-14);
        }
    }
    assert!(d.mask.iter().all(|&m| m));
    assert_eq!(d.margin, f64::INFINITY);
}

#[test]
fn identical_experts_ignore_routing() {
    let (mut store, moe) = moe_layer(6, 4, 2, 8);
    for j in 1..4 {
        for (a, b) in [
            (moe.experts[0].l1.w, moe.experts[j].l1.w),
            (moe.experts[0].l2.w, moe.experts[j].l2.w),
        ] {
            let v = store.get(a).clone();
            *store.get_mut(b) = v;
        }
    }
    let mut bias = randn(&[4], 3);
    bias.data_mut()[0] += 0.0;
    *store.get_mut(moe.experts[0].l1.b.unwrap()) = bias.clone();
    for j in 1..4 {
        *store.get_mut(moe.experts[j].l1.b.unwrap()) = bias.clone();
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = randn(&[7, 6], 9);
    let x = g.constant(xv.clone());
    let (y, _) = moe.forward(&mut g, &p, x, x, 7, &mut 0).unwrap();
    let single = moe.experts[0].forward(&mut g, &p, x).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(single)) < 1e-12);
}

#[test]
fn sparse_evaluation_count() {
    let (store, moe) = moe_layer(6, 8, 2, 12);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(randn(&[40, 6], 13));
    let mut evals = 0;
    let (_, d) = moe.forward(&mut g, &p, x, x, 10, &mut evals).unwrap();
    assert_eq!(evals, 2 * 40);
    for b in 0..4 {
        let m: f64 = (0..8).map(|j| d.mean_gate.get2(b, j)).sum();
        let pf: f64 = (0..8).map(|j| d.route_fraction.get2(b, j)).sum();
        assert_abs_diff_eq!(m, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pf, 2.0, epsilon = 1e-12);
    }
}

#[test]
fn gate_input_controls_selection() {
    let (store, moe) = moe_layer(6, 4, 1, 20);
    let x = randn(&[1, 6], 21);
    let mut seen = std::collections::BTreeSet::new();
    for seed in 0..40 {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let gate = g.constant(randn(&[1, 6], 100 + seed));
        let (_, d) = moe.forward(&mut g, &p, xv, gate, 1, &mut 0).unwrap();
        seen.insert(d.mask.iter().position(|&m| m).unwrap());
    }
    assert!(seen.len() > 1, "expert choice never changed: {seen:?}");
}

fn mhsa_layer(d: usize, heads: usize, seed: u64) -> (ParamStore, Mhsa) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = {
        let mut reg = Registrar::create(&mut store, &mut rng);
        Mhsa::new(&mut reg, "att", d, heads).unwrap()
    };
    (store, m)
}

#[test]
fn single_token_attention_is_value_projection() {
    let (store, m) = mhsa_layer(8, 2, 3);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(randn(&[3, 8], 4));
    let y = m.forward(&mut g, &p, x, 1).unwrap();
    let v = g.matmul(x, p.var(m.wv.w)).unwrap();
    let expect = g.matmul(v, p.var(m.wo.w)).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-12);
}

#[test]
fn attention_is_permutation_equivariant() {
    let (store, m) = mhsa_layer(8, 4, 5);
    let x = randn(&[6, 8], 6);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = m.forward(&mut g, &p, xv, 6).unwrap();
    let xp = g.gather_rows(xv, &perm).unwrap();
    let yp = m.forward(&mut g, &p, xp, 6).unwrap();
    let y_perm = g.gather_rows(y, &perm).unwrap();
    assert!(g.value(yp).max_abs_diff(g.value(y_perm)) < 1e-12);
}

#[test]
fn projection_and_position() {
    let mut m = model(tiny_system(), tiny_model_config(), Variant::Full);
    let d = m.dims();
    let pos = m.params().find("embed.pos").unwrap();
    let w_re = m.params().find("embed.w").unwrap();
    // Two identical tokens.
    let row = randn(&[1, d.feat_in], 1);
    let x = Tensor::from_rows(&vec![row.data().to_vec(); d.tokens_in]).unwrap();
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = m.project_embed(&mut g, &p, xv).unwrap();
    let y = g.value(y).clone();
    assert_eq!(y.shape(), &[d.tokens_in, 8]);
    assert!(y.row(0) != y.row(1));

    *m.params_mut().get_mut(pos) = Tensor::zeros(&[d.tokens_in, 8]);
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let xv = g.constant(x);
    let y = m.project_embed(&mut g, &p, xv).unwrap();
    let lin = g.matmul(xv, p.var(w_re)).unwrap();
    assert_eq!(g.value(y), g.value(lin));
    assert_eq!(g.value(y).row(0), g.value(y).row(1));
}

#[test]
fn zeroed_fusion_sublayers_leave_normalized_input() {
    let mut m = model(tiny_system(), tiny_model_config(), Variant::Full);
    let ids: Vec<_> = m
        .params()
        .iter()
        .filter(|(_, n, _)| n.starts_with("fusion.mhsa") || n.starts_with("fusion.moe"))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        let shape = m.params().get(id).shape().to_vec();
        *m.params_mut().get_mut(id) = Tensor::zeros(&shape);
    }
    let mut store = m.params().clone();
    let block = Block::new(&mut Registrar::attach(&mut store), "fusion", m.config()).unwrap();
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let x = g.constant(randn(&[8, 8], 3));
    let (y, _) = block.forward_fusion(&mut g, &p, x, None, 4, &mut 0).unwrap();
    let gain = g.constant(Tensor::full(&[8], 1.0));
    let bias = g.constant(Tensor::zeros(&[8]));
    let ln = g.layer_norm(x, gain, bias, layers::LN_EPS).unwrap();
    // LN(LN(x)) differs from LN(x) only through epsilon.
    assert!(g.value(y).max_abs_diff(g.value(ln)) < 1e-4);
}

#[test]
fn zeroed_deep_sublayers_are_identity() {
    let mut m = model(tiny_system(), tiny_model_config(), Variant::Full);
    let ids: Vec<_> = m
        .params()
        .iter()
        .filter(|(_, n, _)| n.starts_with("deep0.mhsa.wo") || n.contains("deep0.moe.expert") && n.contains(".l2."))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        let shape = m.params().get(id).shape().to_vec();
        *m.params_mut().get_mut(id) = Tensor::zeros(&shape);
    }
    let mut store = m.params().clone();
    let block = Block::new(&mut Registrar::attach(&mut store), "deep0", m.config()).unwrap();
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let x = g.constant(randn(&[8, 8], 4));
    let (y, _) = block.forward_deep(&mut g, &p, x, 4, &mut 0).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-15);
}

#[test]
fn no_deep_blocks_means_single_gate() {
    let cfg = ModelConfig { num_blocks: 0, ..tiny_model_config() };
    let m = model(tiny_system(), cfg, Variant::Full);
    assert!(m.params().iter().all(|(_, n, _)| !n.starts_with("deep")));
    let s = generate_sample(m.system(), 1);
    let input = ModelInput::stack(&[&m.sample_input(&s.h_sub6).unwrap()]).unwrap();
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let f = m.forward(&mut g, &p, &input).unwrap();
    assert_eq!(f.gates.len(), 1);
    assert_eq!(f.expert_evals, 4);
}

#[test]
fn gradient_reaches_first_block() {
    // With top-1 routing the renormalized weight is exactly 1, so the gate
    // (and the encoder feeding it) only learns when K >= 2.
    let cfg = ModelConfig {
        num_blocks: 3,
        num_experts: 4,
        top_k: 2,
        ..tiny_model_config()
    };
    let m = model(tiny_system(), cfg, Variant::Full);
    let s = generate_sample(m.system(), 2);
    let input = ModelInput::stack(&[&m.sample_input(&s.h_sub6).unwrap()]).unwrap();
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, true);
    let f = m.forward(&mut g, &p, &input).unwrap();
    let w: Vec<f64> = (0..g.value(f.output).len()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
    let loss = g.weighted_sum(f.output, &w).unwrap();
    g.backward(loss).unwrap();
    let grads = p.grads(&g, m.params());
    for (id, name, _) in m.params().iter() {
        if name.starts_with("deep0.mhsa") || name.starts_with("tfem.") || name == "embed.w" {
            assert!(grads[id.0].data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }
}

#[test]
fn zero_latent_predicts_target_mean() {
    let sys = tiny_system();
    let d = Dims::new(&sys);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut norm = NormStats::identity(d.tokens_in * d.feat_in, d.tokens_out * d.feat_out);
    norm.target_mean.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    norm.target_std.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
    let m = MdfceModel::new(tiny_model_config(), sys, Variant::Full, norm.clone(), 1).unwrap();
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let z = g.constant(Tensor::zeros(&[d.tokens_in, 8]));
    let y = m.output_project(&mut g, &p, z).unwrap();
    let y = norm.denormalize_target(g.value(y)).unwrap();
    assert_eq!(y.data(), &norm.target_mean[..]);
}

#[test]
fn reference_output_shape() {
    let sys = SystemConfig::table(4, 32);
    let m = model(sys, ModelConfig { num_blocks: 1, ..ModelConfig::default() }, Variant::Full);
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let z = g.constant(Tensor::zeros(&[m.dims().tokens_in, 128]));
    let y = m.output_project(&mut g, &p, z).unwrap();
    assert_eq!(g.value(y).shape(), &[64, 512]);
}

#[test]
fn end_to_end_prediction() {
    let m = model(tiny_system(), tiny_model_config(), Variant::Full);
    let s = generate_sample(m.system(), 5);
    let a = m.predict(&s.h_sub6).unwrap();
    assert_eq!(a.shape(), (4, 2 * 16));
    assert_eq!(a, m.predict(&s.h_sub6).unwrap());
    let batch = m.predict_batch(&[s.h_sub6.clone(), s.h_sub6.clone()]).unwrap();
    assert!(batch[1].max_abs_diff(&a) < 1e-12);

    // Small perturbations give proportionally small output changes.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut h2 = s.h_sub6.clone();
    let delta = 1e-6;
    for v in h2.data_mut() {
        *v += Complex64::new(rng.random_range(-delta..delta), rng.random_range(-delta..delta));
    }
    let b = m.predict(&h2).unwrap();
    let ratio = b.distance_sqr(&a).sqrt() / h2.distance_sqr(&s.h_sub6).sqrt();
    assert!(ratio.is_finite() && ratio < 1e4, "local gain {ratio}");
}

#[test]
fn large_inputs_stay_finite() {
    let m = model(tiny_system(), tiny_model_config(), Variant::Full);
    let s = generate_sample(m.system(), 8);
    let scale = 1e6 / s.h_sub6.energy().sqrt();
    let h = s.h_sub6.scale(Complex64::new(scale, 0.0));
    assert!(m.predict(&h).unwrap().is_finite());
    assert!(m.predict(&ComplexMatrix::zeros(2, 16)).unwrap().is_finite());
}

#[test]
fn wrong_input_shape_is_named() {
    let m = model(tiny_system(), tiny_model_config(), Variant::Full);
    let err = m.predict(&ComplexMatrix::zeros(3, 16)).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Contract(_)));
    assert!(msg.contains("3x16") && msg.contains("2x16"), "{msg}");
}

#[test]
fn ablation_has_no_temporal_encoder() {
    let m = model(tiny_system(), tiny_model_config(), Variant::NoTfem);
    assert!(m.params().iter().all(|(_, n, _)| !n.starts_with("tfem")));
    let s = generate_sample(m.system(), 1);
    assert!(m.predict(&s.h_sub6).unwrap().is_finite());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::Full, Variant::NoTfem] {
        let m = model(tiny_system(), tiny_model_config(), variant);
        let sub = dir.path().join(variant.tag());
        let manifest = save_checkpoint(&sub, &m).unwrap();
        let text = std::fs::read_to_string(manifest).unwrap();
        assert!(text.contains(&format!("variant = \"{}\"", variant.tag())));
        let back = load_checkpoint(&sub).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.norm(), m.norm());
        assert_eq!(back.variant(), variant);
        let s = generate_sample(m.system(), 3);
        assert_eq!(back.predict(&s.h_sub6).unwrap(), m.predict(&s.h_sub6).unwrap());
    }
}

#[test]
fn checkpoint_rejects_other_versions_and_bad_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(tiny_system(), tiny_model_config(), Variant::Full);
    let manifest = save_checkpoint(dir.path(), &m).unwrap();
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replacen("version = 1", "version = 2", 1)).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Config(_))));

    std::fs::write(&manifest, &text).unwrap();
    let blob = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "bin"))
        .unwrap();
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[3] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn attach_rejects_foreign_parameters() {
    let m = model(tiny_system(), tiny_model_config(), Variant::Full);
    let mut params = m.params().clone();
    params.add("stray", Tensor::zeros(&[1]));
    let err = MdfceModel::from_parts(
        m.config().clone(),
        m.system().clone(),
        Variant::Full,
        m.norm().clone(),
        params,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
