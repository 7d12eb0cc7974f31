//! Per-iteration gating network.
//!
//! A two-layer convolutional head looks at the refined features, its own
//! hidden state from the previous step, and a sinusoidal step embedding,
//! then emits two gate logits and a predicted error-improvement scalar.
//! The compute-budget preference `r` multiplies the first layer's output,
//! so the gate's response scales with the budget. During training the
//! gate is relaxed with two-class Gumbel-softmax noise; at inference the
//! noise is off and the hard decision is `logit[0] > logit[1]`.

use crate::error::{Error, Result};
use crate::flownet::ModelConfig;
use crate::graph::{Graph, NodeId};
use crate::seeds::{self, Stream};
use crate::tensor::{shape_str, Tensor};
use rand_chacha::ChaCha8Rng;

/// Input-ablation selector for the gate head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolicyVariant {
    /// Refined features, gate hidden state, and step embedding.
    #[default]
    Full,
    /// Improvement channel produced but never supervised.
    NoImprovement,
    /// Hidden state and step embedding inputs replaced with zeros; the
    /// improvement channel is also unsupervised.
    NoContext,
}

/// Gate head parameters.
#[derive(Debug, Clone)]
pub struct Policy {
    pub cfg: ModelConfig,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
}

impl Policy {
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Policy> {
        cfg.validate()?;
        let fan1 = cfg.policy_in() * 9;
        Ok(Policy {
            cfg,
            conv1_w: Tensor::init_uniform(&[cfg.ch, cfg.policy_in(), 3, 3], fan1, rng)?,
            conv1_b: Tensor::init_uniform(&[cfg.ch], fan1, rng)?,
            conv2_w: Tensor::init_uniform(&[3, cfg.ch, 1, 1], cfg.ch, rng)?,
            conv2_b: Tensor::init_uniform(&[3], cfg.ch, rng)?,
        })
    }

    pub fn zeros(cfg: ModelConfig) -> Result<Policy> {
        cfg.validate()?;
        Ok(Policy {
            cfg,
            conv1_w: Tensor::zeros(&[cfg.ch, cfg.policy_in(), 3, 3]),
            conv1_b: Tensor::zeros(&[cfg.ch]),
            conv2_w: Tensor::zeros(&[3, cfg.ch, 1, 1]),
            conv2_b: Tensor::zeros(&[3]),
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("policy.conv1.weight".to_string(), &self.conv1_w),
            ("policy.conv1.bias".to_string(), &self.conv1_b),
            ("policy.conv2.weight".to_string(), &self.conv2_w),
            ("policy.conv2.bias".to_string(), &self.conv2_b),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("policy.conv1.weight".to_string(), &mut self.conv1_w),
            ("policy.conv1.bias".to_string(), &mut self.conv1_b),
            ("policy.conv2.weight".to_string(), &mut self.conv2_w),
            ("policy.conv2.bias".to_string(), &mut self.conv2_b),
        ]
    }

    /// Binds the parameters onto a graph once per step sequence.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundPolicy {
        BoundPolicy {
            cfg: self.cfg,
            ids: self
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, g.param(t.clone(), trainable)))
                .collect(),
        }
    }
}

/// Graph-bound gate head.
pub struct BoundPolicy {
    cfg: ModelConfig,
    ids: Vec<(String, NodeId)>,
}

/// One gating step's graph nodes.
pub struct PolicyStep {
    /// Next gate hidden state `[N, ch, h, w]` (pre-activation, already
    /// scaled by `r`).
    pub h: NodeId,
    /// Raw two-class logits `[N, 2]`; class 0 means "run the update".
    pub logits: NodeId,
    /// Relaxed gate `[N]` in (0, 1).
    pub p: NodeId,
    /// Predicted per-step error improvement `[N]`.
    pub improvement: NodeId,
}

impl BoundPolicy {
    pub fn named_ids(&self) -> &[(String, NodeId)] {
        &self.ids
    }

    /// One gating step.
    ///
    /// `phi_hat` is the aggregated feature map, `h_prev` the gate hidden
    /// state (`None` for step 1, which starts from zeros), `embedding`
    /// the 6-entry step embedding, and `r` one budget factor per sample,
    /// each in (0, 1]. `noise` supplies per-sample Gumbel offsets
    /// (flattened `[N, 2]`); pass `None` at inference.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        phi_hat: NodeId,
        h_prev: Option<NodeId>,
        embedding: &[f64; 6],
        r: &[f64],
        noise: Option<&[f64]>,
        variant: PolicyVariant,
    ) -> Result<PolicyStep> {
        let ps = g.value(phi_hat).shape().to_vec();
        if ps.len() != 4 || ps[1] != self.cfg.cf {
            return Err(Error::shape(
                "policy forward",
                format!("[N, {}, h, w] features", self.cfg.cf),
                shape_str(&ps),
            ));
        }
        let (n, h, w) = (ps[0], ps[2], ps[3]);
        if r.len() != n {
            return Err(Error::shape(
                "policy forward",
                format!("budget factors [{n}]"),
                format!("[{}]", r.len()),
            ));
        }
        if r.iter().any(|&v| !(v.is_finite() && v > 0.0 && v <= 1.0)) {
            return Err(Error::contract("policy forward: budget r must lie in (0, 1]"));
        }
        if let Some(nv) = noise {
            if nv.len() != 2 * n {
                return Err(Error::shape(
                    "policy forward",
                    format!("noise [{n}, 2]"),
                    format!("{} values", nv.len()),
                ));
            }
        }

        let zeros_h = Tensor::zeros(&[n, self.cfg.ch, h, w]);
        let h_in = match (variant, h_prev) {
            (PolicyVariant::NoContext, _) | (_, None) => g.constant(zeros_h),
            (_, Some(id)) => {
                let hs = g.value(id).shape();
                if hs != [n, self.cfg.ch, h, w] {
                    return Err(Error::shape(
                        "policy forward",
                        format!("hidden [{n}, {}, {h}, {w}]", self.cfg.ch),
                        shape_str(hs),
                    ));
                }
                id
            }
        };
        let emb_t = if variant == PolicyVariant::NoContext {
            Tensor::zeros(&[n, 6, h, w])
        } else {
            let mut data = vec![0.0; n * 6 * h * w];
            for s in 0..n {
                for (ch, &e) in embedding.iter().enumerate() {
                    let base = (s * 6 + ch) * h * w;
                    for v in &mut data[base..base + h * w] {
                        *v = e;
                    }
                }
            }
            Tensor::from_vec(&[n, 6, h, w], data)?
        };
        let emb = g.constant(emb_t);

        let cat = g.concat_channels(&[phi_hat, h_in, emb])?;
        let (w1, b1) = self.layer("policy.conv1");
        let pre = g.conv2d(cat, w1, b1, 1, 1)?;
        let r_node = g.constant(Tensor::from_vec(&[n], r.to_vec())?);
        let h_next = g.scale_per_sample(pre, r_node)?;
        let act = g.relu(h_next);
        let pooled = g.global_avg_pool(act)?;
        let (w2, b2) = self.layer("policy.conv2");
        let out = g.conv2d(pooled, w2, b2, 1, 0)?;
        let logit_slice = g.slice_channels(out, 0, 2)?;
        let logits = g.reshape(logit_slice, &[n, 2])?;
        let imp_slice = g.slice_channels(out, 2, 3)?;
        let improvement = g.reshape(imp_slice, &[n])?;
        let gated_input = match noise {
            Some(nv) => {
                let nc = g.constant(Tensor::from_vec(&[n, 2], nv.to_vec())?);
                g.add(logits, nc)?
            }
            None => logits,
        };
        let p = g.gate_from_logits(gated_input, self.cfg.tau)?;
        Ok(PolicyStep {
            h: h_next,
            logits,
            p,
            improvement,
        })
    }

    fn layer(&self, name: &str) -> (NodeId, NodeId) {
        let find = |suffix: &str| {
            self.ids
                .iter()
                .find(|(n, _)| n == &format!("{name}.{suffix}"))
                .expect("known layer")
                .1
        };
        (find("weight"), find("bias"))
    }
}

/// Sinusoidal step embedding
/// `{sin(2^i pi phase), cos(2^i pi phase)} for i in 0..3`, where `phase`
/// is `t / t_total` (or the raw index `t` in literal mode). Valid for
/// `1 <= t <= t_total - 1`: the final step never runs the gate.
pub fn iteration_embedding(t: usize, t_total: usize, literal_phase: bool) -> Result<[f64; 6]> {
    if t_total < 2 || t == 0 || t > t_total - 1 {
        return Err(Error::contract(format!(
            "iteration_embedding: need 1 <= t <= T-1, got t={t}, T={t_total}"
        )));
    }
    let phase = if literal_phase {
        t as f64
    } else {
        t as f64 / t_total as f64
    };
    let mut e = [0.0; 6];
    for i in 0..3 {
        let arg = (1u32 << i) as f64 * std::f64::consts::PI * phase;
        e[2 * i] = arg.sin();
        e[2 * i + 1] = arg.cos();
    }
    Ok(e)
}

/// Two Gumbel(0, 1) offsets for one sample's gate at one step, drawn from
/// a substream keyed by `(run_seed, sample_seed, t)`. Batch composition
/// therefore never changes a sample's noise sequence.
pub fn gumbel_noise(run_seed: u64, sample_seed: u64, t: usize) -> [f64; 2] {
    let salt = sample_seed.wrapping_mul(0x1_0000).wrapping_add(t as u64);
    let mut rng = seeds::stream_rng(run_seed, Stream::Gumbel, salt);
    let mut draw = || -> f64 {
        let u = seeds::open_unit(&mut rng);
        -(-u.ln()).ln()
    };
    [draw(), draw()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::stable_sigmoid;
    use crate::numgrad::{central_diff, rel_err};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn embedding_midpoint_matches_hand_values() {
        // t = 4 of T = 8: phase 1/2 -> [1, 0, 0, -1, 0, 1].
        let e = iteration_embedding(4, 8, false).unwrap();
        let want = [1.0, 0.0, 0.0, -1.0, 0.0, 1.0];
        for (a, b) in e.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_entries_bounded_and_distinct() {
        let mut seen: Vec<[f64; 6]> = Vec::new();
        for t in 1..8 {
            let e = iteration_embedding(t, 8, false).unwrap();
            assert!(e.iter().all(|v| v.abs() <= 1.0 + 1e-12));
            for prev in &seen {
                let dist: f64 = prev.iter().zip(&e).map(|(a, b)| (a - b).abs()).sum();
                assert!(dist > 1e-9, "t={t} collides with an earlier step");
            }
            seen.push(e);
        }
    }

    #[test]
    fn embedding_rejects_out_of_range_steps() {
        assert!(iteration_embedding(0, 8, false).is_err());
        assert!(iteration_embedding(8, 8, false).is_err());
        assert!(iteration_embedding(1, 1, false).is_err());
    }

    #[test]
    fn literal_phase_changes_the_embedding() {
        let a = iteration_embedding(3, 8, false).unwrap();
        let b = iteration_embedding(3, 8, true).unwrap();
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(dist > 0.1);
    }

    #[test]
    fn gate_matches_logistic_identity_on_examples() {
        // P = [10, 0], tau = 1 -> p = 1 / (1 + e^-10).
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(&[1, 2], vec![10.0, 0.0]).unwrap());
        let p = g.gate_from_logits(z, 1.0).unwrap();
        let want = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((g.value(p).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn smaller_tau_sharpens_the_gate() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let soft = g.gate_from_logits(z, 1.0).unwrap();
        let sharp = g.gate_from_logits(z, 0.1).unwrap();
        assert!(g.value(sharp).data()[0] > g.value(soft).data()[0]);
        assert!(g.value(sharp).data()[0] > 0.9999);
    }

    #[test]
    fn gumbel_mean_with_symmetric_logits_is_half() {
        // Logits [0, 0]: the relaxed gate is uniform on (0, 1), so the
        // empirical mean over many draws concentrates at 1/2.
        let mut acc = 0.0;
        let n = 10_000;
        for i in 0..n {
            let noise = gumbel_noise(9, i as u64, 1);
            acc += stable_sigmoid(noise[0] - noise[1]);
        }
        let mean = acc / n as f64;
        assert!((0.48..=0.52).contains(&mean), "mean {mean}");
    }

    #[test]
    fn gumbel_noise_is_per_sample_and_per_step() {
        let a = gumbel_noise(1, 10, 1);
        assert_eq!(a, gumbel_noise(1, 10, 1));
        assert_ne!(a, gumbel_noise(1, 10, 2));
        assert_ne!(a, gumbel_noise(1, 11, 1));
        assert_ne!(a, gumbel_noise(2, 10, 1));
    }

    proptest! {
        // Noise-off identity: the two-class softmax at temperature tau
        // equals the logistic of the scaled logit gap.
        #[test]
        fn gate_equals_sigmoid_of_gap(z0 in -40.0..40.0f64, z1 in -40.0..40.0f64, tau in 0.05..4.0f64) {
            let mut g = Graph::new();
            let z = g.constant(Tensor::from_vec(&[1, 2], vec![z0, z1]).unwrap());
            let p = g.gate_from_logits(z, tau).unwrap();
            let want = stable_sigmoid((z0 - z1) / tau);
            prop_assert!((g.value(p).data()[0] - want).abs() < 1e-12);
        }
    }

    fn forward_once(
        policy: &Policy,
        phi: &Tensor,
        r: &[f64],
        variant: PolicyVariant,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let bound = policy.bind(&mut g, false);
        let phi_id = g.constant(phi.clone());
        let e = iteration_embedding(2, 8, false).unwrap();
        let step = bound.forward(&mut g, phi_id, None, &e, r, None, variant).unwrap();
        (
            g.value(step.h).data().to_vec(),
            g.value(step.logits).data().to_vec(),
            g.value(step.p).data().to_vec(),
        )
    }

    #[test]
    fn zero_weights_gate_is_bias_logistic() {
        // With zero conv weights the logits collapse to the output bias,
        // independent of the inputs.
        let cfg = ModelConfig::default();
        let mut policy = Policy::zeros(cfg).unwrap();
        policy.conv2_b = Tensor::from_vec(&[3], vec![1.25, -0.5, 0.0]).unwrap();
        let mut r = rng(31);
        let phi = rand_tensor(&[2, cfg.cf, 4, 4], &mut r);
        let (_, logits, p) = forward_once(&policy, &phi, &[0.7, 0.3], PolicyVariant::Full);
        let want = stable_sigmoid((1.25 - (-0.5)) / cfg.tau);
        for s in 0..2 {
            assert!((logits[2 * s] - 1.25).abs() < 1e-12);
            assert!((logits[2 * s + 1] + 0.5).abs() < 1e-12);
            assert!((p[s] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_state_is_linear_in_r() {
        let cfg = ModelConfig::default();
        let mut r = rng(32);
        let policy = Policy::init(cfg, &mut r).unwrap();
        let phi = rand_tensor(&[1, cfg.cf, 4, 4], &mut r);
        let (h1, _, _) = forward_once(&policy, &phi, &[0.4], PolicyVariant::Full);
        let (h2, _, _) = forward_once(&policy, &phi, &[0.8], PolicyVariant::Full);
        for (a, b) in h1.iter().zip(&h2) {
            assert!((2.0 * a - b).abs() < 1e-12, "doubling r must double h");
        }
    }

    #[test]
    fn no_context_variant_ignores_hidden_and_embedding() {
        let cfg = ModelConfig::default();
        let mut r = rng(33);
        let policy = Policy::init(cfg, &mut r).unwrap();
        let phi = rand_tensor(&[1, cfg.cf, 4, 4], &mut r);
        let run = |variant: PolicyVariant, h_prev: Option<Tensor>, t: usize| {
            let mut g = Graph::new();
            let bound = policy.bind(&mut g, false);
            let phi_id = g.constant(phi.clone());
            let h_id = h_prev.map(|t| g.constant(t));
            let e = iteration_embedding(t, 8, false).unwrap();
            let step = bound.forward(&mut g, phi_id, h_id, &e, &[0.5], None, variant).unwrap();
            g.value(step.logits).data().to_vec()
        };
        let h_rand = rand_tensor(&[1, cfg.ch, 4, 4], &mut r);
        // Full: hidden state and embedding matter.
        assert_ne!(run(PolicyVariant::Full, None, 2), run(PolicyVariant::Full, Some(h_rand.clone()), 2));
        assert_ne!(run(PolicyVariant::Full, None, 2), run(PolicyVariant::Full, None, 5));
        // NoContext: they do not.
        assert_eq!(
            run(PolicyVariant::NoContext, None, 2),
            run(PolicyVariant::NoContext, Some(h_rand), 2)
        );
        assert_eq!(run(PolicyVariant::NoContext, None, 2), run(PolicyVariant::NoContext, None, 5));
    }

    #[test]
    fn forward_rejects_bad_budget_and_shapes() {
        let cfg = ModelConfig::default();
        let mut r = rng(34);
        let policy = Policy::init(cfg, &mut r).unwrap();
        let phi = rand_tensor(&[1, cfg.cf, 4, 4], &mut r);
        let mut g = Graph::new();
        let bound = policy.bind(&mut g, false);
        let phi_id = g.constant(phi);
        let e = iteration_embedding(1, 8, false).unwrap();
        assert!(bound.forward(&mut g, phi_id, None, &e, &[0.0], None, PolicyVariant::Full).is_err());
        assert!(bound.forward(&mut g, phi_id, None, &e, &[1.5], None, PolicyVariant::Full).is_err());
        assert!(bound
            .forward(&mut g, phi_id, None, &e, &[0.5, 0.5], None, PolicyVariant::Full)
            .is_err());
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let cfg = ModelConfig::default();
        let mut r = rng(35);
        let policy = Policy::init(cfg, &mut r).unwrap();
        let phi = rand_tensor(&[2, cfg.cf, 4, 4], &mut r);
        let noise: Vec<f64> = (0..4).map(|_| r.gen_range(-0.5..0.5)).collect();
        let run = |p: &Policy| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let bound = p.bind(&mut g, true);
            let phi_id = g.constant(phi.clone());
            let e = iteration_embedding(3, 8, false).unwrap();
            let step = bound
                .forward(&mut g, phi_id, None, &e, &[0.6, 0.9], Some(&noise), PolicyVariant::Full)
                .unwrap();
            // Mix p and the improvement head so both receive gradient.
            let merged = g.add(step.p, step.improvement).unwrap();
            let loss = g.mean_all(merged);
            g.backward(loss).unwrap();
            let grad = g
                .grad(bound.named_ids().iter().find(|(n, _)| n == "policy.conv1.weight").unwrap().1)
                .unwrap()
                .to_vec();
            (g.value(loss).item().unwrap(), grad)
        };
        let (_, analytic) = run(&policy);
        for elem in [0usize, 91, 770, 2203] {
            let base = policy.conv1_w.data().to_vec();
            let mut f = |v: &[f64]| {
                let mut p2 = policy.clone();
                p2.conv1_w.data_mut().copy_from_slice(v);
                run(&p2).0
            };
            let num = central_diff(&mut f, &base, elem, 1e-4);
            let err = rel_err(analytic[elem], num, 1e-7);
            assert!(err < 1e-4, "conv1.weight[{elem}]: {} vs {num}", analytic[elem]);
        }
    }
}
