//! Gate-training losses and the overall objective.
//!
//! Three terms are combined: the sequence flow loss (built in the
//! backbone module), a resource-preference penalty that pushes mean gate
//! activity toward the requested budget `r`, and an incremental term
//! that supervises the gate's predicted per-step error improvement.
//! Rationale for the pinned reductions:
//!
//! * The budget penalty applies per sample, then averages over the
//!   batch — skipping is a per-sample decision at inference, so the
//!   budget must bind per sample too.
//! * The improvement targets are detached: the term trains the
//!   *prediction*, and must not reshape the flow trajectory itself.
//! * The hinge subgradient at the kink is 0.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{shape_str, Tensor};

/// Budget penalty flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResourceVariant {
    /// `max(0, mean_t p − r)`: only over-budget activity is penalized.
    #[default]
    Hinge,
    /// `|mean_t p − r|`: also penalizes under-use (the ablation flavor
    /// that degrades accuracy at loose budgets).
    L1,
}

/// Weighted-sum coefficients and the resulting scalar values of one
/// objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub flow: f64,
    pub resource: f64,
    pub incremental: f64,
    pub overall: f64,
    pub lambda_res: f64,
    pub lambda_incre: f64,
}

fn check_per_sample(g: &Graph, id: NodeId, n: usize, what: &'static str) -> Result<()> {
    let s = g.value(id).shape();
    if s != [n] {
        return Err(Error::shape(what, format!("[{n}]"), shape_str(s)));
    }
    Ok(())
}

fn scalar_value(g: &Graph, id: NodeId, what: &'static str) -> Result<f64> {
    g.value(id)
        .item()
        .map_err(|_| Error::shape(what, "scalar", shape_str(g.value(id).shape())))
}

/// Budget penalty over one step sequence.
///
/// `gates` holds the relaxed gate `[N]` for each of the `T−1` gated
/// steps; `r` is the per-sample budget in (0, 1]. Per sample the penalty
/// compares the mean gate activity against `r` (hinge or absolute
/// distance), then the batch is averaged.
pub fn resource_loss(
    g: &mut Graph,
    gates: &[NodeId],
    r: &[f64],
    variant: ResourceVariant,
) -> Result<NodeId> {
    if gates.is_empty() {
        return Err(Error::contract("resource_loss: need at least one gated step"));
    }
    if r.is_empty() || r.iter().any(|&v| !(v.is_finite() && v > 0.0 && v <= 1.0)) {
        return Err(Error::contract("resource_loss: budget r must lie in (0, 1]"));
    }
    let n = r.len();
    for &id in gates {
        check_per_sample(g, id, n, "resource_loss gate")?;
    }
    let mut acc = gates[0];
    for &id in &gates[1..] {
        acc = g.add(acc, id)?;
    }
    let mean = g.scale(acc, 1.0 / gates.len() as f64);
    let r_node = g.constant(Tensor::from_vec(&[n], r.to_vec())?);
    let excess = g.sub(mean, r_node)?;
    let per_sample = match variant {
        ResourceVariant::Hinge => g.relu(excess),
        ResourceVariant::L1 => g.abs(excess),
    };
    Ok(g.mean_all(per_sample))
}

/// Improvement-prediction penalty over one step sequence.
///
/// For each gated step `t`, the realized improvement is the drop in
/// masked mean-absolute flow error from the aggregated flow `f_hat[t]`
/// to the next update's raw output `f_next[t]`. The penalty is
/// `Σ_t |improvement_target − i_t|` per sample, batch-averaged. Both
/// error terms are detached, so gradients reach only the predictions.
pub fn incremental_loss(
    g: &mut Graph,
    flow_gt: NodeId,
    valid: &[bool],
    f_hat: &[NodeId],
    f_next: &[NodeId],
    improvements: &[NodeId],
) -> Result<NodeId> {
    if f_hat.is_empty() || f_hat.len() != f_next.len() || f_hat.len() != improvements.len() {
        return Err(Error::contract(format!(
            "incremental_loss: sequences must have equal nonzero length, got {}/{}/{}",
            f_hat.len(),
            f_next.len(),
            improvements.len()
        )));
    }
    let n = g.value(flow_gt).shape()[0];
    let mut acc: Option<NodeId> = None;
    for ((&fh, &fx), &i) in f_hat.iter().zip(f_next).zip(improvements) {
        check_per_sample(g, i, n, "incremental_loss prediction")?;
        let before = g.masked_l1_mean(fh, flow_gt, valid)?;
        let after = g.masked_l1_mean(fx, flow_gt, valid)?;
        let drop = g.sub(before, after)?;
        let target = g.detach(drop);
        let miss = g.sub(target, i)?;
        let term = g.abs(miss);
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(g.mean_all(acc.expect("nonempty sequence")))
}

/// Combines the terms into the training objective
/// `flow + λ_res·resource + λ_incre·incremental`.
///
/// Absent terms (`None`, or weight 0) contribute nothing to the graph.
/// Returns the scalar loss node and the evaluated breakdown.
pub fn overall_loss(
    g: &mut Graph,
    flow: NodeId,
    resource: Option<NodeId>,
    incremental: Option<NodeId>,
    lambda_res: f64,
    lambda_incre: f64,
) -> Result<(NodeId, LossBreakdown)> {
    for (lambda, what) in [(lambda_res, "lambda_res"), (lambda_incre, "lambda_incre")] {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::config(format!("{what} must be finite and >= 0, got {lambda}")));
        }
    }
    let flow_v = scalar_value(g, flow, "overall_loss flow term")?;
    let mut total = flow;
    let mut resource_v = 0.0;
    if let Some(id) = resource {
        resource_v = scalar_value(g, id, "overall_loss resource term")?;
        if lambda_res > 0.0 {
            let weighted = g.scale(id, lambda_res);
            total = g.add(total, weighted)?;
        }
    }
    let mut incremental_v = 0.0;
    if let Some(id) = incremental {
        incremental_v = scalar_value(g, id, "overall_loss incremental term")?;
        if lambda_incre > 0.0 {
            let weighted = g.scale(id, lambda_incre);
            total = g.add(total, weighted)?;
        }
    }
    let breakdown = LossBreakdown {
        flow: flow_v,
        resource: resource_v,
        incremental: incremental_v,
        overall: flow_v + lambda_res * resource_v + lambda_incre * incremental_v,
        lambda_res,
        lambda_incre,
    };
    Ok((total, breakdown))
}
