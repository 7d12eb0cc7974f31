//! End-to-end acceptance gate.
//!
//! A shared fixture trains the shipped five-stage recipe in-process on
//! synthetic data (same code path as `flowgate train`), then the numbered
//! tests check gradients, gate determinism, budget compliance, compute
//! accounting, the analysis/ablation commands, and byte-level CLI
//! reproducibility. Each numbered test prints one `ACCEPTANCE <n>
//! PASS|FAIL` line (visible under `--nocapture`).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use flowgate::engine::{
    self, eval_sample, infer, make_batch, train_forward, ForwardOptions, InferMode,
    IterationTrace, Model, Phase, TrainConfig, Variant,
};
use flowgate::flownet::{flow_loss, ModelConfig};
use flowgate::flops::FlopsLedger;
use flowgate::graph::Graph;
use flowgate::losses::{incremental_loss, overall_loss, resource_loss, ResourceVariant};
use flowgate::metrics::SampleEval;
use flowgate::numgrad;
use flowgate::policy::{self, PolicyVariant};
use flowgate::synthdata::{Dataset, Difficulty, GenConfig, SynthSample};
use flowgate::tensor::Tensor;

// ---------------------------------------------------------------- fixture

/// Budgets the trained model is evaluated under.
const SWEEP_BUDGETS: [f64; 3] = [0.3, 0.6, 0.9];

struct SweepPoint {
    r: f64,
    evals: Vec<SampleEval>,
    traces: Vec<IterationTrace>,
}

struct Fixture {
    dir: PathBuf,
    model: Model,
    gen: GenConfig,
    eval_data: Dataset,
    /// Evaluation-time config (12-step rollout).
    cfg: TrainConfig,
    recipe_secs: f64,
    sweep: Vec<SweepPoint>,
    /// Mean end-point error of the full fixed 12-step rollout.
    fixed_epe: f64,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(build_fixture)
}

/// The shipped training recipe: two backbone stages (short-horizon
/// matching, then full-horizon rollout), two joint stages under the
/// symmetric budget penalty (first pinned to r = 1, then over the full
/// budget range), and a short joint polish under the hinge penalty.
fn recipe_stages() -> Vec<TrainConfig> {
    let base = TrainConfig {
        t_train: 12,
        t_test: 12,
        ..TrainConfig::default()
    };
    vec![
        TrainConfig {
            t_train: 2,
            lr: 1e-2,
            steps: 550,
            seed: 7,
            phase: Phase::Backbone,
            ..base.clone()
        },
        TrainConfig {
            lr: 2e-3,
            steps: 130,
            seed: 11,
            phase: Phase::Backbone,
            ..base.clone()
        },
        TrainConfig {
            phase: Phase::Joint,
            variant: Variant::L1,
            r_range: (1.0, 1.0),
            lr: 1e-3,
            steps: 80,
            seed: 13,
            ..base.clone()
        },
        TrainConfig {
            phase: Phase::Joint,
            variant: Variant::L1,
            r_range: (0.2, 1.0),
            per_sample_r: true,
            lr: 3e-4,
            steps: 180,
            seed: 17,
            ..base.clone()
        },
        TrainConfig {
            phase: Phase::Joint,
            variant: Variant::Full,
            r_range: (0.2, 1.0),
            per_sample_r: true,
            lr: 1.5e-4,
            steps: 40,
            seed: 19,
            ..base
        },
    ]
}

fn build_fixture() -> Fixture {
    let dir = std::env::temp_dir().join(format!("flowgate-acceptance-{}", std::process::id()));
    fs::create_dir_all(&dir).expect("create fixture dir");

    let gen = GenConfig {
        h: 16,
        w: 32,
        ..GenConfig::default()
    };
    let train_data = Dataset::generate(7, 256, 0, &gen).expect("generate training data");
    let eval_data = Dataset::generate(104729, 16, 0, &gen).expect("generate eval data");

    let stages = recipe_stages();
    let mut model = Model::init(stages[0].model, stages[0].seed).expect("init model");
    let started = Instant::now();
    for (ix, cfg) in stages.iter().enumerate() {
        engine::train(&mut model, &train_data, cfg)
            .unwrap_or_else(|err| panic!("recipe stage {} failed: {err}", ix + 1));
    }
    let recipe_secs = started.elapsed().as_secs_f64();
    println!("fixture: five-stage recipe trained in {recipe_secs:.1}s");

    model.save(&dir.join("model.fgck")).expect("save fixture checkpoint");
    eval_data.write_file(&dir.join("eval.fgds")).expect("save fixture dataset");

    let cfg = TrainConfig {
        t_train: 12,
        t_test: 12,
        ..TrainConfig::default()
    };
    let mut sweep = Vec::new();
    for r in SWEEP_BUDGETS {
        let mut evals = Vec::new();
        let mut traces = Vec::new();
        for sample in &eval_data.samples {
            let (ev, out) =
                eval_sample(&model, sample, r, &cfg, InferMode::Policy).expect("eval sample");
            evals.push(ev);
            traces.push(out.trace);
        }
        sweep.push(SweepPoint { r, evals, traces });
    }
    let fixed_epe = eval_data
        .samples
        .iter()
        .map(|s| {
            eval_sample(&model, s, 1.0, &cfg, InferMode::Fixed(cfg.t_test))
                .expect("fixed eval")
                .0
                .epe
        })
        .sum::<f64>()
        / eval_data.samples.len() as f64;

    Fixture {
        dir,
        model,
        gen,
        eval_data,
        cfg,
        recipe_secs,
        sweep,
        fixed_epe,
    }
}

// ---------------------------------------------------------------- helpers

fn verdict(n: usize, ok: bool) {
    println!("ACCEPTANCE {n} {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance criterion {n} failed");
}

fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Deterministic value pattern for hand-built loss inputs.
fn pattern(n: usize, amplitude: f64, stride: f64, offset: f64) -> Vec<f64> {
    (0..n)
        .map(|k| offset + amplitude * ((k as f64 + 1.0) * stride).sin())
        .collect()
}

fn run_cli(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_flowgate"))
        .args(args)
        .output()
        .expect("spawn flowgate binary");
    if !out.status.success() {
        eprintln!("command {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

/// Parses a CSV written by the CLI: skips `#` comment lines, returns the
/// header fields and the data rows.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("read {path:?}: {e}"));
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    let header: Vec<String> = lines
        .next()
        .expect("csv header")
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("column {name} missing from {header:?}"))
}

// ----------------------------------------------------- 1: gradient check

/// Inputs for the criterion-1 objective: two samples, three steps, fixed
/// gate-noise stream so repeated evaluations see the same relaxation.
const C1_STEPS: usize = 3;
const C1_BUDGETS: [f64; 2] = [0.4, 0.8];
const C1_NOISE: u64 = 4242;

/// One evaluation of the training objective. The improvement targets of
/// the incremental term sit behind a stop-gradient, so the finite
/// difference below must treat them as constants: `base` carries the
/// flow + weighted budget value, and the incremental term is rebuilt
/// outside the graph from the frozen targets of the unperturbed point.
struct C1Eval {
    /// flow + lambda_res * resource (everything except the incremental
    /// term).
    base: f64,
    /// Production overall value, for the base-point consistency check.
    production_overall: f64,
    /// Predicted improvements, `[T-1][N]`.
    improvements: Vec<Vec<f64>>,
    /// Realized error drops (the detached targets), `[T-1][N]`.
    targets: Vec<Vec<f64>>,
}

fn c1_eval(model: &Model, samples: &[&SynthSample]) -> C1Eval {
    let mut g = Graph::new();
    let net = model.flownet.bind(&mut g, false);
    let bp = model.policy.bind(&mut g, false);
    let batch = make_batch(samples, model.cfg.scale).expect("batch");
    let fwd = train_forward(
        &mut g,
        &net,
        Some((&bp, PolicyVariant::Full)),
        &batch,
        &C1_BUDGETS,
        C1_STEPS,
        &ForwardOptions {
            noise_seed: Some(C1_NOISE),
            pinned_gates: None,
        },
    )
    .expect("training forward");
    let gt = g.constant(batch.flow_gt.clone());
    let (flow, _) = flow_loss(&mut g, &fwd.f_hat, gt, &batch.valid, 0.8).expect("flow loss");
    let resource =
        resource_loss(&mut g, &fwd.gates, &C1_BUDGETS, ResourceVariant::Hinge).expect("resource");
    let incremental = incremental_loss(
        &mut g,
        gt,
        &batch.valid,
        &fwd.f_hat[..C1_STEPS - 1],
        &fwd.f_raw[1..],
        &fwd.improvements,
    )
    .expect("incremental loss");
    let (_, with_incre) =
        overall_loss(&mut g, flow, Some(resource), Some(incremental), 50.0, 1.0).expect("overall");
    let (_, without) = overall_loss(&mut g, flow, Some(resource), None, 50.0, 1.0).expect("base");

    // Realized per-sample error drops, recomputed from recorded values
    // with the same masked-mean arithmetic the graph kernel uses.
    let n = samples.len();
    let shape = g.value(fwd.f_hat[0]).shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let gt_data = batch.flow_gt.data().to_vec();
    let targets = (0..C1_STEPS - 1)
        .map(|t| {
            let before = g.value(fwd.f_hat[t]).data().to_vec();
            let after = g.value(fwd.f_raw[t + 1]).data().to_vec();
            (0..n)
                .map(|i| {
                    masked_mean_abs(&before, &gt_data, &batch.valid, i, c, h, w)
                        - masked_mean_abs(&after, &gt_data, &batch.valid, i, c, h, w)
                })
                .collect()
        })
        .collect();

    C1Eval {
        base: without.overall,
        production_overall: with_incre.overall,
        improvements: fwd.improvement_values.clone(),
        targets,
    }
}

/// Per-sample mean absolute difference over valid pixels (mirrors the
/// graph's masked kernel ordering).
fn masked_mean_abs(
    a: &[f64],
    b: &[f64],
    valid: &[bool],
    i: usize,
    c: usize,
    h: usize,
    w: usize,
) -> f64 {
    let hw = h * w;
    let count = valid[i * hw..(i + 1) * hw].iter().filter(|&&v| v).count();
    let mut acc = 0.0;
    for ch in 0..c {
        let base = (i * c + ch) * hw;
        for px in 0..hw {
            if valid[i * hw + px] {
                acc += (a[base + px] - b[base + px]).abs();
            }
        }
    }
    acc / (c * count) as f64
}

/// The objective value with the improvement targets frozen: what a finite
/// difference of the stop-gradient objective must be taken against.
fn c1_frozen_value(eval: &C1Eval, frozen_targets: &[Vec<f64>]) -> f64 {
    let n = eval.improvements[0].len();
    let incre = mean((0..n).map(|i| {
        frozen_targets
            .iter()
            .zip(&eval.improvements)
            .map(|(target, pred)| (target[i] - pred[i]).abs())
            .sum::<f64>()
    }));
    eval.base + incre
}

#[test]
fn acceptance_01_training_gradients_match_finite_differences() {
    let started = Instant::now();
    let gen = GenConfig {
        h: 8,
        w: 16,
        ..GenConfig::default()
    };
    let data = Dataset::generate(901, 1, 1, &gen).expect("generate");
    let mut model = Model::init(ModelConfig::default(), 31).expect("init");
    let mut ok = true;

    // One reverse sweep of the production objective gives every analytic
    // gradient (the incremental targets are detached inside the loss).
    let samples: Vec<&SynthSample> = data.samples.iter().collect();
    let mut g = Graph::new();
    let net = model.flownet.bind(&mut g, true);
    let bp = model.policy.bind(&mut g, true);
    let batch = make_batch(&samples, model.cfg.scale).expect("batch");
    let fwd = train_forward(
        &mut g,
        &net,
        Some((&bp, PolicyVariant::Full)),
        &batch,
        &C1_BUDGETS,
        C1_STEPS,
        &ForwardOptions {
            noise_seed: Some(C1_NOISE),
            pinned_gates: None,
        },
    )
    .expect("training forward");
    let gt = g.constant(batch.flow_gt.clone());
    let (flow, _) = flow_loss(&mut g, &fwd.f_hat, gt, &batch.valid, 0.8).expect("flow loss");
    let resource =
        resource_loss(&mut g, &fwd.gates, &C1_BUDGETS, ResourceVariant::Hinge).expect("resource");
    let incremental = incremental_loss(
        &mut g,
        gt,
        &batch.valid,
        &fwd.f_hat[..C1_STEPS - 1],
        &fwd.f_raw[1..],
        &fwd.improvements,
    )
    .expect("incremental loss");
    let (total, _) =
        overall_loss(&mut g, flow, Some(resource), Some(incremental), 50.0, 1.0).expect("overall");
    g.backward(total).expect("backward");
    let mut analytic: HashMap<String, Vec<f64>> = HashMap::new();
    let mut named = net.named_ids().to_vec();
    named.extend(bp.named_ids().iter().cloned());
    for (name, id) in &named {
        let grad = g.grad(*id).unwrap_or_else(|| panic!("no gradient for {name}"));
        analytic.insert(name.clone(), grad.to_vec());
    }
    drop(g);

    // Base point: freeze the detached targets and confirm the frozen
    // reconstruction reproduces the production value.
    let base_eval = c1_eval(&model, &samples);
    let frozen = base_eval.targets.clone();
    let reconstructed = c1_frozen_value(&base_eval, &frozen);
    ok &= (reconstructed - base_eval.production_overall).abs() <= 1e-12;

    // Central differences on a few entries of every parameter tensor.
    let shapes: Vec<(String, usize)> = model
        .named_params()
        .iter()
        .map(|(n, t)| (n.clone(), t.data().len()))
        .collect();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (name, len) in &shapes {
        let k = (*len).min(4);
        for j in 0..k {
            let idx = j * len / k;
            let orig = {
                let params = model.named_params();
                let (_, t) = params.iter().find(|(n, _)| n == name).expect("param");
                t.data()[idx]
            };
            let eps = 1e-5 * orig.abs().max(1.0);
            let mut value_at = |v: f64| {
                set_param(&mut model, name, idx, v);
                let samples: Vec<&SynthSample> = data.samples.iter().collect();
                c1_frozen_value(&c1_eval(&model, &samples), &frozen)
            };
            let plus = value_at(orig + eps);
            let minus = value_at(orig - eps);
            set_param(&mut model, name, idx, orig);
            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic[name][idx];
            let err = numgrad::rel_err(fd, an, 1e-4);
            worst = worst.max(err);
            checked += 1;
            if err >= 1e-3 {
                println!("gradient mismatch at {name}[{idx}]: analytic {an}, finite-diff {fd}, rel {err:.2e}");
                ok = false;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    println!(
        "checked {checked} entries across {} tensors; worst rel err {worst:.3e}; {secs:.1}s",
        shapes.len()
    );
    ok &= secs < 60.0;
    verdict(1, ok);
}

fn set_param(model: &mut Model, name: &str, idx: usize, value: f64) {
    let mut params = model.named_params_mut();
    let slot = params
        .iter_mut()
        .find(|(n, _)| n == name)
        .unwrap_or_else(|| panic!("parameter {name} missing"));
    slot.1.data_mut()[idx] = value;
}

// ------------------------------------- 2: inference/training equivalence

/// Clamps the gate head's enter logit far into saturation.
fn with_gate_bias(dir: &Path, cfg: ModelConfig, delta: f64) -> Model {
    let mut model = Model::load(cfg, &dir.join("model.fgck")).expect("reload checkpoint");
    for (name, t) in model.policy.named_params_mut() {
        if name == "policy.conv2.bias" {
            t.data_mut()[0] = delta;
        }
    }
    model
}

#[test]
fn acceptance_02_hard_gate_inference_matches_training_aggregation() {
    let f = fixture();
    let started = Instant::now();
    let sample = &f.eval_data.samples[0];
    let mut ok = true;

    // (a) Skipped steps carry the running flow bit-identically.
    let out = infer(&f.model, sample, 0.6, &f.cfg, InferMode::Policy).expect("infer");
    let mut skipped = 0;
    for st in &out.trace.steps {
        if st.t >= 2 && !st.entered {
            skipped += 1;
            ok &= bits_eq(&out.per_step_flow[st.t - 1], &out.per_step_flow[st.t - 2]);
        }
    }
    println!("policy run at r=0.6: {} updates, {skipped} carried steps", out.trace.updates_entered);
    ok &= skipped > 0;

    // (b) Training-mode aggregation with the same hard gates pinned
    // reproduces the inference flow.
    let pinned: Vec<Vec<f64>> = out.trace.steps[1..]
        .iter()
        .map(|st| vec![f64::from(u8::from(st.entered))])
        .collect();
    let mut g = Graph::new();
    let net = f.model.flownet.bind(&mut g, false);
    let bp = f.model.policy.bind(&mut g, false);
    let batch = make_batch(&[sample], f.cfg.model.scale).expect("batch");
    let fwd = train_forward(
        &mut g,
        &net,
        Some((&bp, PolicyVariant::Full)),
        &batch,
        &[0.6],
        f.cfg.t_test,
        &ForwardOptions {
            noise_seed: None,
            pinned_gates: Some(&pinned),
        },
    )
    .expect("pinned forward");
    let last = *fwd.f_hat.last().expect("final step");
    let diff = g
        .value(last)
        .data()
        .iter()
        .zip(out.flow.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("pinned-gate aggregation vs inference: max |diff| = {diff:.3e}");
    ok &= diff <= 1e-12;

    // (c) Saturated gate logits drive exact always-enter / never-enter
    // behaviour: the sigmoid relaxation hits exactly 1.0 / 0.0 and the
    // flows match the fixed rollout / the first update respectively.
    let open = with_gate_bias(&f.dir, f.cfg.model, 1000.0);
    let o_pol = infer(&open, sample, 0.6, &f.cfg, InferMode::Policy).expect("open infer");
    let o_fix = infer(&open, sample, 0.6, &f.cfg, InferMode::Fixed(f.cfg.t_test)).expect("fixed");
    ok &= o_pol.trace.updates_entered == f.cfg.t_test;
    ok &= bits_eq(o_pol.flow.data(), o_fix.flow.data());
    ok &= o_pol.trace.steps.iter().filter_map(|s| s.p).all(|p| p == 1.0);

    let closed = with_gate_bias(&f.dir, f.cfg.model, -1000.0);
    let c_pol = infer(&closed, sample, 0.6, &f.cfg, InferMode::Policy).expect("closed infer");
    ok &= c_pol.trace.updates_entered == 1;
    ok &= bits_eq(c_pol.flow.data(), &c_pol.per_step_flow[0]);
    ok &= c_pol.trace.steps.iter().filter_map(|s| s.p).all(|p| p == 0.0);

    let secs = started.elapsed().as_secs_f64();
    println!("equivalence checks in {secs:.1}s");
    ok &= secs < 10.0;
    verdict(2, ok);
}

// ------------------------------------------------- 3: gate noise behaviour

#[test]
fn acceptance_03_gumbel_noise_is_centered_and_gate_matches_sigmoid() {
    let mut ok = true;

    // With zero logits the relaxed gate is sigma of a standard-logistic
    // variable, so its long-run mean must sit at one half.
    let n = 10_000u64;
    let mean_p = mean((0..n).map(|i| {
        let noise = policy::gumbel_noise(42, i, 1);
        sigma(noise[0] - noise[1])
    }));
    println!("mean relaxed gate over {n} noise draws: {mean_p:.4}");
    ok &= (0.48..=0.52).contains(&mean_p);

    // The two-logit relaxation collapses to a sigmoid of the logit gap.
    for &tau in &[1.0, 0.7] {
        let rows = 16;
        let vals = pattern(rows * 2, 2.5, 0.7321, 0.0);
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(&[rows, 2], vals.clone()).expect("logits"));
        let p = g.gate_from_logits(z, tau).expect("gate");
        for s in 0..rows {
            let expect = sigma((vals[2 * s] - vals[2 * s + 1]) / tau);
            ok &= (g.value(p).data()[s] - expect).abs() <= 1e-12;
        }
    }
    verdict(3, ok);
}

// ------------------------------------------- 4: budget + activity bounds

#[test]
fn acceptance_04_training_budget_and_gate_activity_within_bounds() {
    let f = fixture();
    let mut ok = true;

    println!("recipe wall time: {:.1}s (budget 600s)", f.recipe_secs);
    ok &= f.recipe_secs <= 600.0;

    let gated = (f.cfg.t_test - 1) as f64;
    let mut prev = 0.0;
    for point in &f.sweep {
        let updates = mean(point.evals.iter().map(|e| e.updates_entered as f64));
        let activity = (updates - 1.0) / gated;
        println!(
            "r={:.1}: mean updates {updates:.3}, gate activity {activity:.3} (cap {:.3})",
            point.r,
            point.r + 0.05
        );
        ok &= activity <= point.r + 0.05;
        ok &= updates + 1e-9 >= prev;
        prev = updates;
    }
    verdict(4, ok);
}

// ------------------------------------------------- 5: quality under budget

#[test]
fn acceptance_05_higher_budget_restores_fixed_schedule_quality() {
    let f = fixture();
    let epe_of = |r: f64| {
        let point = f.sweep.iter().find(|p| p.r == r).expect("sweep point");
        mean(point.evals.iter().map(|e| e.epe))
    };
    let low = epe_of(0.3);
    let high = epe_of(0.9);
    println!(
        "EPE: r=0.3 {low:.4}, r=0.9 {high:.4}, fixed 12-step {:.4}",
        f.fixed_epe
    );
    let mut ok = high <= low;
    ok &= high <= 1.15 * f.fixed_epe;
    verdict(5, ok);
}

// --------------------------------------------------- 6: FLOPs accounting

#[test]
fn acceptance_06_flops_accounting_is_exact() {
    let f = fixture();
    let sample = &f.eval_data.samples[0];
    let (h, w) = (sample.image1.shape()[1], sample.image1.shape()[2]);
    let ledger = FlopsLedger::new(&f.cfg.model, h, w).expect("ledger");
    let mut ok = true;

    for point in &f.sweep {
        for trace in &point.traces {
            // Per-step charges: entered steps cost one update, carried
            // steps cost nothing.
            let charged: u64 = trace.steps.iter().map(|s| s.flops_charged).sum();
            ok &= trace
                .steps
                .iter()
                .all(|s| s.flops_charged == if s.entered { ledger.update() } else { 0 });
            let rebuilt = ledger.encoder()
                + charged
                + trace.policy_calls as u64 * ledger.policy();
            ok &= trace.flops_total == rebuilt;
            ok &= trace.flops_total
                == ledger.trace_total(trace.updates_entered as u64, trace.policy_calls as u64);
        }
    }
    let ratio = ledger.policy() as f64 / ledger.update() as f64;
    println!(
        "encoder {} | update {} | policy {} ({:.2}% of an update)",
        ledger.encoder(),
        ledger.update(),
        ledger.policy(),
        100.0 * ratio
    );
    ok &= ratio < 0.05;
    verdict(6, ok);
}

// ------------------------------------------- 7: loss term recomputation

#[test]
fn acceptance_07_losses_match_independent_recomputation() {
    let mut ok = true;
    let (n, c, h, w) = (3usize, 2usize, 2usize, 3usize);
    let steps = 4usize;
    let vol = c * h * w;
    let hw = h * w;

    // Shared hand-built inputs.
    let gate_vals: Vec<Vec<f64>> =
        (0..steps - 1).map(|t| pattern(n, 0.45, 0.9 + t as f64, 0.5)).collect();
    let budgets = [0.3, 0.55, 0.9];
    let flows: Vec<Vec<f64>> =
        (0..steps).map(|t| pattern(n * vol, 1.5, 0.31 + 0.1 * t as f64, 0.0)).collect();
    let gt_vals = pattern(n * vol, 1.5, 0.17, 0.1);
    let improvement_vals: Vec<Vec<f64>> =
        (0..steps - 1).map(|t| pattern(n, 0.2, 0.41 + t as f64, 0.0)).collect();
    let valid: Vec<bool> = (0..n * hw).map(|k| k % 3 != 1).collect();
    let omega = 0.8f64;

    let mut g = Graph::new();
    let gates: Vec<_> = gate_vals
        .iter()
        .map(|v| g.constant(Tensor::from_vec(&[n], v.clone()).expect("gate")))
        .collect();
    let preds: Vec<_> = flows
        .iter()
        .map(|v| g.constant(Tensor::from_vec(&[n, c, h, w], v.clone()).expect("flow")))
        .collect();
    let gt = g.constant(Tensor::from_vec(&[n, c, h, w], gt_vals.clone()).expect("gt"));
    let improvements: Vec<_> = improvement_vals
        .iter()
        .map(|v| g.constant(Tensor::from_vec(&[n], v.clone()).expect("improvement")))
        .collect();

    // Masked per-sample mean absolute difference, mirroring the kernel.
    let masked = |a: &[f64], b: &[f64], i: usize| {
        let count = valid[i * hw..(i + 1) * hw].iter().filter(|&&v| v).count();
        let mut acc = 0.0;
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for px in 0..hw {
                if valid[i * hw + px] {
                    acc += (a[base + px] - b[base + px]).abs();
                }
            }
        }
        acc / (c * count) as f64
    };

    // Budget penalty, both shapes.
    for (variant, penalise) in [
        (ResourceVariant::Hinge, (|x: f64| x.max(0.0)) as fn(f64) -> f64),
        (ResourceVariant::L1, (|x: f64| x.abs()) as fn(f64) -> f64),
    ] {
        let node = resource_loss(&mut g, &gates, &budgets, variant).expect("resource");
        let expect = mean((0..n).map(|i| {
            let activity =
                gate_vals.iter().map(|v| v[i]).sum::<f64>() / (steps - 1) as f64;
            penalise(activity - budgets[i])
        }));
        let got = g.value(node).item().expect("scalar");
        ok &= (got - expect).abs() <= 1e-10;
    }

    // Flow supervision: geometric step weights, masked means, batch mean.
    let (flow_node, _) = flow_loss(&mut g, &preds, gt, &valid, omega).expect("flow loss");
    let flow_expect = mean((0..n).map(|i| {
        (0..steps)
            .map(|t| omega.powi((steps - 1 - t) as i32) * masked(&flows[t], &gt_vals, i))
            .sum::<f64>()
    }));
    let flow_got = g.value(flow_node).item().expect("scalar");
    ok &= (flow_got - flow_expect).abs() <= 1e-10;

    // Improvement supervision: realized error drop vs the prediction.
    let inc_node = incremental_loss(
        &mut g,
        gt,
        &valid,
        &preds[..steps - 1],
        &preds[1..],
        &improvements,
    )
    .expect("incremental");
    let inc_expect = mean((0..n).map(|i| {
        (0..steps - 1)
            .map(|t| {
                let drop = masked(&flows[t], &gt_vals, i) - masked(&flows[t + 1], &gt_vals, i);
                (drop - improvement_vals[t][i]).abs()
            })
            .sum::<f64>()
    }));
    let inc_got = g.value(inc_node).item().expect("scalar");
    ok &= (inc_got - inc_expect).abs() <= 1e-10;

    // Weighted combination.
    let res_node = resource_loss(&mut g, &gates, &budgets, ResourceVariant::Hinge).expect("res");
    let res_got = g.value(res_node).item().expect("scalar");
    let (total, breakdown) =
        overall_loss(&mut g, flow_node, Some(res_node), Some(inc_node), 50.0, 1.0)
            .expect("overall");
    let total_got = g.value(total).item().expect("scalar");
    let total_expect = flow_got + 50.0 * res_got + 1.0 * inc_got;
    ok &= (total_got - total_expect).abs() <= 1e-10;
    ok &= (breakdown.overall - total_expect).abs() <= 1e-10;
    println!(
        "flow {flow_got:.6}, resource {res_got:.6}, incremental {inc_got:.6}, overall {total_got:.6}"
    );
    verdict(7, ok);
}

// --------------------------------------------- 8: bottleneck histogram

#[test]
fn acceptance_08_bottleneck_histogram_sums_to_100() {
    let f = fixture();
    let out_dir = f.dir.join("analyze");
    let model = f.dir.join("model.fgck");
    let data = f.dir.join("eval.fgds");
    let status = run_cli(&[
        "analyze",
        "--checkpoint",
        model.to_str().expect("path"),
        "--dataset",
        data.to_str().expect("path"),
        "--out",
        out_dir.to_str().expect("path"),
    ]);
    let mut ok = status.status.success();

    let (header, rows) = read_csv(&out_dir.join("bottleneck.csv"));
    let t_col = column(&header, "t");
    let p_col = column(&header, "percent");
    let parsed: Vec<(usize, f64)> = rows
        .iter()
        .map(|r| (r[t_col].parse().expect("t"), r[p_col].parse().expect("percent")))
        .collect();
    let total: f64 = parsed.iter().map(|(_, p)| p).sum();
    let early_mass: f64 = parsed
        .iter()
        .filter(|(t, _)| *t < f.cfg.t_test)
        .map(|(_, p)| p)
        .sum();
    for (t, p) in parsed.iter().filter(|(_, p)| *p > 0.0) {
        println!("bottleneck at step {t}: {p}%");
    }
    println!("histogram total {total}%, mass before step {}: {early_mass}%", f.cfg.t_test);
    ok &= (total - 100.0).abs() <= 1e-6;
    ok &= early_mass > 0.0;
    verdict(8, ok);
}

// ------------------------------------------------- 9: ablation variants

#[test]
fn acceptance_09_ablation_matrix_runs_all_variants() {
    let f = fixture();
    let out_dir = f.dir.join("ablate");
    let model = f.dir.join("model.fgck");
    let data = f.dir.join("eval.fgds");
    let status = run_cli(&[
        "ablate",
        "--dataset",
        data.to_str().expect("path"),
        "--init",
        model.to_str().expect("path"),
        "--steps",
        "6",
        "--seed",
        "3",
        "--t-train",
        "4",
        "--t-test",
        "6",
        "--r",
        "0.5",
        "--out",
        out_dir.to_str().expect("path"),
    ]);
    let mut ok = status.status.success();

    let (header, rows) = read_csv(&out_dir.join("ablate.csv"));
    let v_col = column(&header, "variant");
    let names: Vec<&str> = rows.iter().map(|r| r[v_col].as_str()).collect();
    println!("ablation rows: {names:?}");
    ok &= names == ["full", "l1", "b", "p", "exit"];

    // Early-exit inference must never re-enter after its first skip.
    let (th, trows) = read_csv(&out_dir.join("variant_exit").join("traces.csv"));
    let id_col = column(&th, "sample_id");
    let t_col = column(&th, "t");
    let e_col = column(&th, "entered");
    let mut entered_by_sample: HashMap<&str, Vec<u8>> = HashMap::new();
    for row in &trows {
        if row[t_col] == "total" {
            continue;
        }
        entered_by_sample
            .entry(&row[id_col])
            .or_default()
            .push(row[e_col].parse().expect("entered"));
    }
    ok &= !entered_by_sample.is_empty();
    for (id, flags) in &entered_by_sample {
        let prefix_of_ones = flags.windows(2).all(|w| w[0] >= w[1]);
        if !prefix_of_ones {
            println!("sample {id}: non-monotone exit pattern {flags:?}");
        }
        ok &= prefix_of_ones;
        ok &= flags[0] == 1;
    }
    verdict(9, ok);
}

// ------------------------------------------- 10: byte reproducibility

#[test]
fn acceptance_10_cli_runs_are_byte_reproducible() {
    let root = std::env::temp_dir().join(format!("flowgate-repro-{}", std::process::id()));
    let a = root.join("a");
    let b = root.join("b");
    fs::create_dir_all(&a).expect("dir a");
    fs::create_dir_all(&b).expect("dir b");
    let mut ok = true;

    // Shared inputs come from run A so both runs record identical
    // dataset/checkpoint paths; every command still executes twice.
    let data = a.join("data.fgds");
    let ckpt = a.join("train").join("model.fgck");
    for side in [&a, &b] {
        let s = |p: &Path| p.to_str().expect("path").to_string();
        let gen_out = side.join("data.fgds");
        ok &= run_cli(&[
            "gen", "--out", &s(&gen_out), "--easy", "3", "--hard", "3", "--seed", "99",
            "--height", "16", "--width", "16",
        ])
        .status
        .success();
        ok &= run_cli(&[
            "train", "--dataset", &s(&data), "--out", &s(&side.join("train")), "--phase",
            "backbone", "--t-train", "2", "--t-test", "3", "--steps", "3", "--seed", "5",
        ])
        .status
        .success();
        ok &= run_cli(&[
            "eval", "--checkpoint", &s(&ckpt), "--dataset", &s(&data), "--r", "0.6", "--out",
            &s(&side.join("eval")),
        ])
        .status
        .success();
        ok &= run_cli(&[
            "sweep", "--checkpoint", &s(&ckpt), "--dataset", &s(&data), "--r", "0.4,0.8",
            "--out", &s(&side.join("sweep")),
        ])
        .status
        .success();
        ok &= run_cli(&[
            "analyze", "--checkpoint", &s(&ckpt), "--dataset", &s(&data), "--out",
            &s(&side.join("analyze")),
        ])
        .status
        .success();
        ok &= run_cli(&[
            "ablate", "--dataset", &s(&data), "--init", &s(&ckpt), "--steps", "2", "--seed",
            "3", "--t-train", "2", "--t-test", "2", "--r", "0.5", "--out",
            &s(&side.join("ablate")),
        ])
        .status
        .success();
    }

    let fa = collect_files(&a);
    let fb = collect_files(&b);
    let paths_a: Vec<&String> = fa.iter().map(|(p, _)| p).collect();
    let paths_b: Vec<&String> = fb.iter().map(|(p, _)| p).collect();
    if paths_a != paths_b {
        println!("file sets differ:\n  a: {paths_a:?}\n  b: {paths_b:?}");
        ok = false;
    } else {
        for ((path, bytes_a), (_, bytes_b)) in fa.iter().zip(&fb) {
            if bytes_a != bytes_b {
                println!("bytes differ for {path}");
                ok = false;
            }
        }
    }
    println!("compared {} files from two identical runs", fa.len());
    verdict(10, ok);
}

fn collect_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, rel: PathBuf, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(root.join(&rel))
            .expect("read dir")
            .map(|e| e.expect("dir entry"))
            .collect();
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = rel.join(e.file_name());
            if e.file_type().expect("file type").is_dir() {
                walk(root, p, out);
            } else {
                let bytes = fs::read(root.join(&p)).expect("read file");
                out.push((p.to_string_lossy().into_owned(), bytes));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, PathBuf::new(), &mut out);
    out
}

// -------------------------------------------------- difficulty separation

#[test]
fn trained_model_separates_difficulty_tiers() {
    let f = fixture();
    let data = Dataset::generate(31337, 16, 16, &f.gen).expect("generate");
    let mut easy = Vec::new();
    let mut hard = Vec::new();
    for sample in &data.samples {
        let (ev, _) = eval_sample(&f.model, sample, 1.0, &f.cfg, InferMode::Fixed(f.cfg.t_test))
            .expect("eval");
        match ev.difficulty {
            Difficulty::Easy => easy.push(ev.epe),
            Difficulty::Hard => hard.push(ev.epe),
        }
    }
    let easy_mean = mean(easy.into_iter());
    let hard_mean = mean(hard.into_iter());
    println!("mean EPE: easy {easy_mean:.3}, hard {hard_mean:.3}");
    assert!(
        easy_mean < hard_mean,
        "large-motion samples should be harder than small-motion ones"
    );
}
