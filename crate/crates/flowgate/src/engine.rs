//! Training and inference orchestration.
//!
//! Training always executes every refinement step and blends each step's
//! output with the running estimate through the soft gate (`aggregate`),
//! so the gate stays differentiable. Inference hardens the gate: a step
//! runs only when the previous gate preferred entering, and a skipped
//! step carries the running state forward untouched — same node, same
//! bits, zero update FLOPs.
//!
//! The two code paths are deliberately structured so that pinning the
//! training-mode gates to the hard 0/1 sequence observed at inference
//! reproduces the inference output (see `train_forward`'s pinning hook
//! and the equivalence test).
//!
//! Every run is charged against a [`FlopsLedger`]; each produced
//! [`IterationTrace`] satisfies
//! `flops_total = encoder + Σ per-step charges + policy_calls · policy`.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::flops::FlopsLedger;
use crate::flownet::{flow_loss, init_flownet, BoundFlowNet, FlowNet, ModelConfig};
use crate::graph::{Graph, NodeId};
use crate::losses::{
    incremental_loss, overall_loss, resource_loss, LossBreakdown, ResourceVariant,
};
use crate::metrics::SampleEval;
use crate::optim::{ParamUpdate, Sgd};
use crate::policy::{gumbel_noise, iteration_embedding, BoundPolicy, Policy, PolicyVariant};
use crate::seeds::{self, Stream};
use crate::synthdata::{Dataset, SynthSample};
use crate::tensor::Tensor;

/// Method variants: the full gate plus the four reduced forms used for
/// comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Hinge resource loss, contextual policy, supervised improvement.
    Full,
    /// Absolute-value resource loss instead of the hinge.
    L1,
    /// Policy sees no history and no iteration embedding; improvement
    /// head unsupervised.
    NoContext,
    /// Policy keeps its context but the improvement head is unsupervised.
    NoImprovement,
    /// Trained like `Full`; at inference the first skip ends refinement
    /// permanently.
    Exit,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "l1" => Ok(Variant::L1),
            "b" => Ok(Variant::NoContext),
            "p" => Ok(Variant::NoImprovement),
            "exit" => Ok(Variant::Exit),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected full, l1, b, p or exit)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::L1 => "l1",
            Variant::NoContext => "b",
            Variant::NoImprovement => "p",
            Variant::Exit => "exit",
        }
    }

    pub fn policy_variant(self) -> PolicyVariant {
        match self {
            Variant::NoContext => PolicyVariant::NoContext,
            Variant::NoImprovement => PolicyVariant::NoImprovement,
            _ => PolicyVariant::Full,
        }
    }

    pub fn resource_variant(self) -> ResourceVariant {
        match self {
            Variant::L1 => ResourceVariant::L1,
            _ => ResourceVariant::Hinge,
        }
    }

    /// Whether the improvement head receives its supervision term.
    pub fn supervises_improvement(self) -> bool {
        !matches!(self, Variant::NoContext | Variant::NoImprovement)
    }

    /// Whether inference stops permanently at the first skip.
    pub fn exits_on_first_skip(self) -> bool {
        matches!(self, Variant::Exit)
    }
}

/// Which parameters a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Backbone only; every step enters (no policy in the loop).
    Backbone,
    /// Policy only; the backbone is bound frozen.
    Policy,
    /// Backbone and policy together.
    Joint,
}

impl Phase {
    pub fn parse(s: &str) -> Result<Phase> {
        match s {
            "backbone" => Ok(Phase::Backbone),
            "policy" => Ok(Phase::Policy),
            "joint" => Ok(Phase::Joint),
            other => Err(Error::config(format!(
                "unknown phase {other:?} (expected backbone, policy or joint)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Backbone => "backbone",
            Phase::Policy => "policy",
            Phase::Joint => "joint",
        }
    }
}

/// Hyperparameters for one training run and its evaluations.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Refinement steps during training.
    pub t_train: usize,
    /// Refinement steps during inference (longer than `t_train`).
    pub t_test: usize,
    /// Budget sampling interval (inclusive bounds, within (0, 1]).
    pub r_range: (f64, f64),
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub variant: Variant,
    pub phase: Phase,
    /// Draw one budget per sample instead of one per batch.
    pub per_sample_r: bool,
    pub lambda_res: f64,
    pub lambda_incre: f64,
    /// Geometric decay of the per-step flow supervision.
    pub omega: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            model: ModelConfig::default(),
            t_train: 8,
            t_test: 12,
            r_range: (0.2, 1.0),
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 4,
            steps: 200,
            seed: 7,
            variant: Variant::Full,
            phase: Phase::Backbone,
            per_sample_r: false,
            lambda_res: 50.0,
            lambda_incre: 1.0,
            omega: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_train < 2 {
            return Err(Error::config("t_train must be at least 2"));
        }
        if self.t_test < 2 {
            return Err(Error::config("t_test must be at least 2"));
        }
        let (lo, hi) = self.r_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "r_range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        for (name, v) in [
            ("lambda_res", self.lambda_res),
            ("lambda_incre", self.lambda_incre),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.omega.is_finite() && self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::config("omega must lie in (0, 1]"));
        }
        Ok(())
    }

    /// The improvement-loss weight actually applied: variants without a
    /// supervised improvement head zero it out.
    pub fn effective_lambda_incre(&self) -> f64 {
        if self.variant.supervises_improvement() {
            self.lambda_incre
        } else {
            0.0
        }
    }
}

/// Backbone + policy with their shared architecture config.
pub struct Model {
    pub cfg: ModelConfig,
    pub flownet: FlowNet,
    pub policy: Policy,
}

impl Model {
    /// Seeded construction; the backbone and policy draw from disjoint
    /// init substreams.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        let flownet = init_flownet(cfg, seed)?;
        let mut rng = seeds::stream_rng(seed, Stream::Init, 1);
        let policy = Policy::init(cfg, &mut rng)?;
        Ok(Model {
            cfg,
            flownet,
            policy,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut all = self.flownet.named_params();
        all.extend(self.policy.named_params());
        all
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut all = self.flownet.named_params_mut();
        all.extend(self.policy.named_params_mut());
        all
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.named_params())
    }

    /// Loads a checkpoint strictly: every stored entry must match a known
    /// parameter name and shape, and no parameter may be missing.
    pub fn load(cfg: ModelConfig, path: &Path) -> Result<Model> {
        let entries = checkpoint::read_file(path)?;
        let mut model = Model {
            cfg,
            flownet: FlowNet::zeros(cfg)?,
            policy: Policy::zeros(cfg)?,
        };
        let mut params: HashMap<String, &mut Tensor> =
            model.named_params_mut().into_iter().collect();
        let mut seen = 0usize;
        for (name, tensor) in entries {
            let slot = params.remove(&name).ok_or_else(|| {
                Error::format("checkpoint", format!("unknown parameter {name:?}"))
            })?;
            if slot.shape() != tensor.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "parameter {name:?} has shape {:?}, expected {:?}",
                        tensor.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = tensor;
            seen += 1;
        }
        if !params.is_empty() {
            let mut missing: Vec<&str> = params.keys().map(String::as_str).collect();
            missing.sort_unstable();
            return Err(Error::format(
                "checkpoint",
                format!("missing parameters: {}", missing.join(", ")),
            ));
        }
        debug_assert_eq!(seen, model.named_params().len());
        Ok(model)
    }
}

/// Soft blend of the running estimate with a new step output:
/// `curr·p + prev·(1−p)` per sample. Differentiable in all three inputs.
pub fn aggregate(g: &mut Graph, prev: NodeId, curr: NodeId, p: NodeId) -> Result<NodeId> {
    let take = g.scale_per_sample(curr, p)?;
    let p_neg = g.scale(p, -1.0);
    let p_inv = g.add_scalar(p_neg, 1.0);
    let keep = g.scale_per_sample(prev, p_inv)?;
    g.add(take, keep)
}

/// A training batch assembled from dataset samples.
pub struct Batch {
    /// `[N, ci, H, W]`
    pub image1: Tensor,
    /// `[N, ci, H, W]`
    pub image2: Tensor,
    /// `[N, 2, h, w]` ground truth in feature-grid units.
    pub flow_gt: Tensor,
    /// `N·h·w` feature-grid validity mask.
    pub valid: Vec<bool>,
    /// Per-sample identity, used for noise keying and traces.
    pub seeds: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

/// Stacks samples into batched tensors and downsamples the supervision
/// onto the feature grid.
pub fn make_batch(samples: &[&SynthSample], scale: usize) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::contract("make_batch: empty batch"));
    }
    let shape = samples[0].image1.shape().to_vec();
    let mut image1 = Vec::new();
    let mut image2 = Vec::new();
    let mut flow_gt = Vec::new();
    let mut valid = Vec::new();
    let mut ids = Vec::new();
    for s in samples {
        if s.image1.shape() != shape.as_slice() {
            return Err(Error::contract(
                "make_batch: samples disagree on image shape",
            ));
        }
        let (grid_flow, grid_valid) = s.to_feature_grid(scale)?;
        image1.extend_from_slice(s.image1.data());
        image2.extend_from_slice(s.image2.data());
        flow_gt.extend_from_slice(grid_flow.data());
        valid.extend_from_slice(&grid_valid);
        ids.push(s.seed);
    }
    let n = samples.len();
    let (ci, h, w) = (shape[0], shape[1], shape[2]);
    Ok(Batch {
        image1: Tensor::from_vec(&[n, ci, h, w], image1)?,
        image2: Tensor::from_vec(&[n, ci, h, w], image2)?,
        flow_gt: Tensor::from_vec(&[n, 2, h / scale, w / scale], flow_gt)?,
        valid,
        seeds: ids,
    })
}

/// Knobs for a training-mode forward pass.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Gumbel noise stream for this pass; `None` runs the gate
    /// deterministically. Per-sample draws are keyed by the sample's own
    /// seed, so batch composition never changes a sample's noise.
    pub noise_seed: Option<u64>,
    /// Overrides the aggregation gates: `pinned[s][n]` replaces the
    /// learned gate of policy step `s+1` for sample `n`. The policy still
    /// runs (its hidden state must evolve), but its gate output is unused.
    pub pinned_gates: Option<&'a [Vec<f64>]>,
}

/// Node handles and recorded values from one training-mode rollout.
pub struct TrainForward {
    /// Aggregated flows `f̂_1..f̂_T`.
    pub f_hat: Vec<NodeId>,
    /// Raw per-step update outputs `f_1..f_T`.
    pub f_raw: Vec<NodeId>,
    /// Gate nodes for policy steps `1..T−1` (post-pinning).
    pub gates: Vec<NodeId>,
    /// Improvement-prediction nodes for policy steps `1..T−1`.
    pub improvements: Vec<NodeId>,
    /// Gate values, `[T−1][N]`.
    pub gate_values: Vec<Vec<f64>>,
    /// Raw gate logits `(P0, P1)`, `[T−1][N]`.
    pub logit_values: Vec<Vec<(f64, f64)>>,
    /// Improvement predictions, `[T−1][N]`.
    pub improvement_values: Vec<Vec<f64>>,
}

/// Runs the always-execute training recurrence.
///
/// Step 1 initializes the running state from the first update output.
/// Steps `2..T−1` update on the aggregated state, blend with the previous
/// gate, then run the policy; the final step updates and blends the flow
/// only. With `policy = None` (backbone pretraining) every gate is an
/// implicit 1, so the aggregated sequence equals the raw one.
pub fn train_forward(
    g: &mut Graph,
    net: &BoundFlowNet,
    policy: Option<(&BoundPolicy, PolicyVariant)>,
    batch: &Batch,
    r: &[f64],
    t_total: usize,
    opts: &ForwardOptions<'_>,
) -> Result<TrainForward> {
    let n = batch.len();
    if t_total < 2 {
        return Err(Error::contract("train_forward: need at least 2 steps"));
    }
    if r.len() != n {
        return Err(Error::contract(format!(
            "train_forward: {} budgets for {n} samples",
            r.len()
        )));
    }
    if let Some(pinned) = opts.pinned_gates {
        if pinned.len() != t_total - 1 || pinned.iter().any(|row| row.len() != n) {
            return Err(Error::contract(format!(
                "train_forward: pinned gates must be [{}][{n}]",
                t_total - 1
            )));
        }
    }
    let literal = net.cfg().literal_phase;
    let image1 = g.constant(batch.image1.clone());
    let image2 = g.constant(batch.image2.clone());
    let enc = net.encode(g, image1, image2)?;
    let fs = g.value(enc.phi0).shape().to_vec();
    let (fh, fw) = (fs[2], fs[3]);
    let f0 = g.constant(Tensor::zeros(&[n, 2, fh, fw]));

    let mut out = TrainForward {
        f_hat: Vec::with_capacity(t_total),
        f_raw: Vec::with_capacity(t_total),
        gates: Vec::new(),
        improvements: Vec::new(),
        gate_values: Vec::new(),
        logit_values: Vec::new(),
        improvement_values: Vec::new(),
    };

    let mut h_prev: Option<NodeId> = None;
    // Runs the policy for step `t` and returns the (possibly pinned) gate.
    let run_policy = |g: &mut Graph,
                          out: &mut TrainForward,
                          h_prev: &mut Option<NodeId>,
                          phi_hat: NodeId,
                          t: usize|
     -> Result<Option<NodeId>> {
        let Some((bound, variant)) = policy else {
            return Ok(None);
        };
        let emb = iteration_embedding(t, t_total, literal)?;
        let noise = opts.noise_seed.map(|seed| {
            let mut flat = Vec::with_capacity(2 * n);
            for &sample_seed in &batch.seeds {
                let pair = gumbel_noise(seed, sample_seed, t);
                flat.extend_from_slice(&pair);
            }
            flat
        });
        let step = bound.forward(g, phi_hat, *h_prev, &emb, r, noise.as_deref(), variant)?;
        *h_prev = Some(step.h);
        let gate = match opts.pinned_gates {
            Some(pinned) => g.constant(Tensor::from_vec(&[n], pinned[t - 1].clone())?),
            None => step.p,
        };
        out.gate_values.push(g.value(gate).data().to_vec());
        let logits = g.value(step.logits).data();
        out.logit_values
            .push((0..n).map(|s| (logits[2 * s], logits[2 * s + 1])).collect());
        out.improvement_values
            .push(g.value(step.improvement).data().to_vec());
        out.gates.push(gate);
        out.improvements.push(step.improvement);
        Ok(Some(gate))
    };

    let (mut phi_hat, mut f_hat) = net.update(g, enc.phi0, f0, enc.corr, enc.phi0)?;
    out.f_raw.push(f_hat);
    out.f_hat.push(f_hat);
    let mut gate = run_policy(g, &mut out, &mut h_prev, phi_hat, 1)?;

    for t in 2..t_total {
        let (phi, f) = net.update(g, phi_hat, f_hat, enc.corr, enc.phi0)?;
        out.f_raw.push(f);
        (phi_hat, f_hat) = match gate {
            Some(p) => (aggregate(g, phi_hat, phi, p)?, aggregate(g, f_hat, f, p)?),
            None => (phi, f),
        };
        out.f_hat.push(f_hat);
        gate = run_policy(g, &mut out, &mut h_prev, phi_hat, t)?;
    }

    let (_, f) = net.update(g, phi_hat, f_hat, enc.corr, enc.phi0)?;
    out.f_raw.push(f);
    f_hat = match gate {
        Some(p) => aggregate(g, f_hat, f, p)?,
        None => f,
    };
    out.f_hat.push(f_hat);
    Ok(out)
}

/// One per-step record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// 1-based refinement step.
    pub t: usize,
    /// Gate logits `(P0, P1)` that gated this step, when a policy did.
    pub logits: Option<(f64, f64)>,
    /// Soft gate value for this step.
    pub p: Option<f64>,
    /// Predicted error decrease from entering this step.
    pub improvement: Option<f64>,
    pub entered: bool,
    /// Update-operator FLOPs charged at this step; 0 when skipped.
    pub flops_charged: u64,
}

/// Per-sample record of a full run, with exact FLOPs totals.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub sample_id: u64,
    pub steps: Vec<StepTrace>,
    pub updates_entered: usize,
    pub policy_calls: usize,
    /// `encoder + Σ flops_charged + policy_calls · policy`.
    pub flops_total: u64,
}

impl IterationTrace {
    fn new(
        sample_id: u64,
        steps: Vec<StepTrace>,
        policy_calls: usize,
        ledger: &FlopsLedger,
    ) -> IterationTrace {
        let updates_entered = steps.iter().filter(|s| s.entered).count();
        let flops_total = ledger.encoder()
            + steps.iter().map(|s| s.flops_charged).sum::<u64>()
            + policy_calls as u64 * ledger.policy();
        IterationTrace {
            sample_id,
            steps,
            updates_entered,
            policy_calls,
            flops_total,
        }
    }
}

/// Renders traces as CSV: one row per (sample, step) and a totals row
/// per sample. On a step row, `entered` is 0/1 and `flops_step` is the
/// charge for that step; on a totals row (`t` = "total"), the last two
/// columns carry `updates_entered` and `flops_total`.
pub fn trace_csv(traces: &[IterationTrace]) -> String {
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from("# schema: flowgate-trace-v1\n");
    csv.push_str("sample_id,t,P0,P1,p,i,entered,flops_step\n");
    for trace in traces {
        for s in &trace.steps {
            let (p0, p1) = match s.logits {
                Some((a, b)) => (Some(a), Some(b)),
                None => (None, None),
            };
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                trace.sample_id,
                s.t,
                fmt_opt(p0),
                fmt_opt(p1),
                fmt_opt(s.p),
                fmt_opt(s.improvement),
                u8::from(s.entered),
                s.flops_charged,
            ));
        }
        csv.push_str(&format!(
            "{},total,,,,,{},{}\n",
            trace.sample_id, trace.updates_entered, trace.flops_total,
        ));
    }
    csv
}

/// Outcome of one optimizer step.
#[derive(Debug)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// Per-sample budgets used this step.
    pub r: Vec<f64>,
    pub traces: Vec<IterationTrace>,
}

/// Draws the per-sample budget vector for one step.
fn draw_budgets(cfg: &TrainConfig, step_index: u64, n: usize) -> Vec<f64> {
    let (lo, hi) = cfg.r_range;
    let mut rng = seeds::stream_rng(cfg.seed, Stream::RSample, step_index);
    let mut draw = || {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };
    if cfg.per_sample_r {
        (0..n).map(|_| draw()).collect()
    } else {
        vec![draw(); n]
    }
}

/// Runs one training step: forward per the always-execute recurrence,
/// loss, backward, and an SGD update of the phase's trainable parameters.
///
/// A non-finite loss aborts the step with every parameter untouched.
pub fn train_step(
    model: &mut Model,
    samples: &[&SynthSample],
    cfg: &TrainConfig,
    opt: &mut Sgd,
    step_index: u64,
) -> Result<StepOutcome> {
    cfg.validate()?;
    let batch = make_batch(samples, cfg.model.scale)?;
    let n = batch.len();
    let r = draw_budgets(cfg, step_index, n);
    let (img_h, img_w) = (batch.image1.shape()[2], batch.image1.shape()[3]);
    let ledger = FlopsLedger::new(&cfg.model, img_h, img_w)?;

    let mut g = Graph::new();
    let net = model.flownet.bind(&mut g, cfg.phase != Phase::Policy);
    let bound_policy = (cfg.phase != Phase::Backbone)
        .then(|| model.policy.bind(&mut g, true));
    let policy = bound_policy
        .as_ref()
        .map(|b| (b, cfg.variant.policy_variant()));

    let opts = ForwardOptions {
        noise_seed: policy
            .is_some()
            .then(|| seeds::derive_seed(cfg.seed, Stream::Gumbel, step_index)),
        pinned_gates: None,
    };
    let fwd = train_forward(&mut g, &net, policy, &batch, &r, cfg.t_train, &opts)?;

    let gt = g.constant(batch.flow_gt.clone());
    let (flow, _) = flow_loss(&mut g, &fwd.f_hat, gt, &batch.valid, cfg.omega)?;
    let resource = match policy {
        Some(_) => Some(resource_loss(
            &mut g,
            &fwd.gates,
            &r,
            cfg.variant.resource_variant(),
        )?),
        None => None,
    };
    let lambda_incre = cfg.effective_lambda_incre();
    let incremental = if policy.is_some() && lambda_incre > 0.0 {
        let t = cfg.t_train;
        Some(incremental_loss(
            &mut g,
            gt,
            &batch.valid,
            &fwd.f_hat[..t - 1],
            &fwd.f_raw[1..],
            &fwd.improvements,
        )?)
    } else {
        None
    };
    let (overall, breakdown) = overall_loss(
        &mut g,
        flow,
        resource,
        incremental,
        cfg.lambda_res,
        lambda_incre,
    )?;
    if !breakdown.overall.is_finite() {
        return Err(Error::NonFinite(format!(
            "train_step {step_index}: loss flow={} resource={} incremental={}; \
             step aborted, parameters untouched",
            breakdown.flow, breakdown.resource, breakdown.incremental
        )));
    }

    g.backward(overall)?;
    let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
    let mut bound: Vec<(String, NodeId)> = net.named_ids().to_vec();
    if let Some(b) = &bound_policy {
        bound.extend(b.named_ids().iter().cloned());
    }
    for (name, id) in bound {
        if let Some(grad) = g.grad(id) {
            grads.insert(name, grad.to_vec());
        }
    }
    let mut params = model.named_params_mut();
    let mut updates: Vec<ParamUpdate<'_>> = Vec::new();
    for (name, value) in params.iter_mut() {
        if let Some(grad) = grads.get(name.as_str()) {
            updates.push(ParamUpdate {
                name: name.as_str(),
                value: &mut **value,
                grad,
            });
        }
    }
    opt.step(&mut updates)?;

    let policy_calls = if policy.is_some() { cfg.t_train - 1 } else { 0 };
    let traces = (0..n)
        .map(|s| {
            let steps = (1..=cfg.t_train)
                .map(|t| {
                    // Row t carries the policy outputs that gated step t,
                    // i.e. policy step t−1 (rows beyond step 1 only).
                    let gix = (t >= 2 && policy.is_some()).then(|| t - 2);
                    StepTrace {
                        t,
                        logits: gix.map(|i| fwd.logit_values[i][s]),
                        p: gix.map(|i| fwd.gate_values[i][s]),
                        improvement: gix.map(|i| fwd.improvement_values[i][s]),
                        entered: true,
                        flops_charged: ledger.update(),
                    }
                })
                .collect();
            IterationTrace::new(batch.seeds[s], steps, policy_calls, &ledger)
        })
        .collect();
    Ok(StepOutcome {
        breakdown,
        r,
        traces,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: u64,
    /// Budget drawn this step (mean over the batch when per-sample).
    pub r: f64,
    pub flow: f64,
    pub resource: f64,
    pub incremental: f64,
    pub overall: f64,
}

/// Batch composition for one training step: `batch_size` sample indices
/// drawn with replacement from the dataset's own substream.
pub fn batch_indices(seed: u64, step: u64, data_len: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = seeds::stream_rng(seed, Stream::Batch, step);
    (0..batch_size).map(|_| rng.gen_range(0..data_len)).collect()
}

/// Runs the full training loop: per step, draw a batch with replacement
/// from the dataset, take one optimizer step, log the loss breakdown.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<TrainLogRow>> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::contract("train: empty dataset"));
    }
    let mut opt = Sgd::new(
        crate::optim::Method::Momentum { mu: cfg.momentum },
        cfg.lr,
    )?;
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps as u64 {
        let picks: Vec<&SynthSample> = batch_indices(cfg.seed, step, data.samples.len(), cfg.batch_size)
            .into_iter()
            .map(|ix| &data.samples[ix])
            .collect();
        let out = train_step(model, &picks, cfg, &mut opt, step)?;
        rows.push(TrainLogRow {
            step,
            r: out.r.iter().sum::<f64>() / out.r.len() as f64,
            flow: out.breakdown.flow,
            resource: out.breakdown.resource,
            incremental: out.breakdown.incremental,
            overall: out.breakdown.overall,
        });
    }
    Ok(rows)
}

/// How inference chooses whether to run each refinement step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Hard gate: enter step `t` iff the step-`t−1` policy logits prefer
    /// entering.
    Policy,
    /// Like `Policy`, but the first skip ends refinement permanently.
    Exit,
    /// Ignore the policy; run exactly this many updates.
    Fixed(usize),
}

/// Inference result: the final flow (feature-grid units) plus the trace.
pub struct InferOutcome {
    /// `[2, h, w]` in feature-grid units; multiply by `scale` for image
    /// pixels.
    pub flow: Tensor,
    pub trace: IterationTrace,
    /// Flow after every step, `[T][2·h·w]`, feature-grid units. Step `t`
    /// repeats step `t−1`'s flow when skipped.
    pub per_step_flow: Vec<Vec<f64>>,
}

/// Runs deterministic inference on one sample.
///
/// Step 1 always updates. Later steps update only when the previous
/// gate's logits preferred entering; a skipped step reuses the running
/// state nodes untouched. The policy itself runs every step `t ≤ T−1`
/// (except in `Fixed` mode, or after an `Exit`-mode stop) so its hidden
/// state keeps evolving. Gumbel noise is off.
pub fn infer(
    model: &Model,
    sample: &SynthSample,
    r: f64,
    cfg: &TrainConfig,
    mode: InferMode,
) -> Result<InferOutcome> {
    cfg.validate()?;
    if !(r.is_finite() && 0.0 < r && r <= 1.0) {
        return Err(Error::contract(format!("infer: budget {r} outside (0, 1]")));
    }
    let t_total = cfg.t_test;
    if let InferMode::Fixed(k) = mode {
        if k == 0 || k > t_total {
            return Err(Error::contract(format!(
                "infer: fixed step count {k} outside 1..={t_total}"
            )));
        }
    }
    let (img_h, img_w) = (sample.image1.shape()[1], sample.image1.shape()[2]);
    let ledger = FlopsLedger::new(&cfg.model, img_h, img_w)?;
    let batch = make_batch(&[sample], cfg.model.scale)?;

    let mut g = Graph::new();
    let net = model.flownet.bind(&mut g, false);
    let bound_policy = (!matches!(mode, InferMode::Fixed(_)))
        .then(|| model.policy.bind(&mut g, false));
    let variant = cfg.variant.policy_variant();
    let literal = cfg.model.literal_phase;

    let image1 = g.constant(batch.image1.clone());
    let image2 = g.constant(batch.image2.clone());
    let enc = net.encode(&mut g, image1, image2)?;
    let fs = g.value(enc.phi0).shape().to_vec();
    let (fh, fw) = (fs[2], fs[3]);
    let f0 = g.constant(Tensor::zeros(&[1, 2, fh, fw]));

    let (mut phi_hat, mut f_hat) = net.update(&mut g, enc.phi0, f0, enc.corr, enc.phi0)?;
    let mut per_step_flow = vec![g.value(f_hat).data().to_vec()];
    let mut steps = vec![StepTrace {
        t: 1,
        logits: None,
        p: None,
        improvement: None,
        entered: true,
        flops_charged: ledger.update(),
    }];
    let mut policy_calls = 0usize;
    let mut h_prev: Option<NodeId> = None;
    // The decision produced at step t−1, applied to step t.
    let mut pending: Option<(bool, (f64, f64), f64, f64)> = None;
    let mut stopped = false;

    for t in 1..=t_total {
        if t >= 2 {
            let enter = match mode {
                InferMode::Fixed(k) => t <= k,
                InferMode::Policy | InferMode::Exit => {
                    !stopped && pending.map(|(e, ..)| e).unwrap_or(false)
                }
            };
            if matches!(mode, InferMode::Exit) && !enter {
                stopped = true;
            }
            if enter {
                let (phi, f) = net.update(&mut g, phi_hat, f_hat, enc.corr, enc.phi0)?;
                phi_hat = phi;
                f_hat = f;
            }
            per_step_flow.push(g.value(f_hat).data().to_vec());
            let decided = pending.take();
            steps.push(StepTrace {
                t,
                logits: decided.map(|(_, l, _, _)| l),
                p: decided.map(|(_, _, p, _)| p),
                improvement: decided.map(|(_, _, _, i)| i),
                entered: enter,
                flops_charged: if enter { ledger.update() } else { 0 },
            });
        }
        if t <= t_total - 1 && !stopped {
            if let Some(bound) = &bound_policy {
                let emb = iteration_embedding(t, t_total, literal)?;
                let step = bound.forward(&mut g, phi_hat, h_prev, &emb, &[r], None, variant)?;
                h_prev = Some(step.h);
                policy_calls += 1;
                let logits = g.value(step.logits).data();
                let (p0, p1) = (logits[0], logits[1]);
                pending = Some((
                    p0 > p1,
                    (p0, p1),
                    g.value(step.p).data()[0],
                    g.value(step.improvement).data()[0],
                ));
            }
        }
    }

    let flow = Tensor::from_vec(&[2, fh, fw], g.value(f_hat).data().to_vec())?;
    Ok(InferOutcome {
        flow,
        trace: IterationTrace::new(sample.seed, steps, policy_calls, &ledger),
        per_step_flow,
    })
}

/// Evaluates one sample: runs inference and scores the flow in image
/// pixels (both prediction and ground truth scaled off the feature grid).
pub fn eval_sample(
    model: &Model,
    sample: &SynthSample,
    r: f64,
    cfg: &TrainConfig,
    mode: InferMode,
) -> Result<(SampleEval, InferOutcome)> {
    let out = infer(model, sample, r, cfg, mode)?;
    let scale = cfg.model.scale as f64;
    let (gt_feat, valid) = sample.to_feature_grid(cfg.model.scale)?;
    let pred_px = Tensor::from_vec(
        out.flow.shape(),
        out.flow.data().iter().map(|v| v * scale).collect(),
    )?;
    let gt_px = Tensor::from_vec(
        gt_feat.shape(),
        gt_feat.data().iter().map(|v| v * scale).collect(),
    )?;
    let eval = SampleEval {
        difficulty: sample.difficulty,
        r,
        epe: crate::metrics::epe(&pred_px, &gt_px, &valid)?,
        f1_all: crate::metrics::f1_all(&pred_px, &gt_px, &valid)?,
        updates_entered: out.trace.updates_entered,
        flops_total: out.trace.flops_total,
    };
    Ok((eval, out))
}
