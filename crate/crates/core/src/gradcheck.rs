//! Central-difference verification of the backward pass. The whole training
//! loss is treated as a black-box function of each parameter entry and its
//! slope is compared against the gradient the tape reports.
//!
//! Two caveats apply to any caller. Gradient gating must be off: a gate
//! changes the gradient without changing the value, so the comparison is
//! meaningless on a gated plan and such plans are rejected. And parameters
//! should be jittered away from zero first: zero biases park hidden
//! preactivations exactly on the leaky-ReLU corner, where a central
//! difference straddles two slopes.

use std::collections::BTreeMap;

use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::model::VarBiLstmModel;
use crate::objective::{sequence_objective_with_plan, NoisePlan, ObjectiveConfig};
use crate::rng::Rng;
use crate::tensor::{grad_rel_err, Tape};

/// Worst probed entry of one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub entries_probed: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }

    pub fn render(&self) -> String {
        let mut out = String::from("tensor                     rel_err      analytic       numeric\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>10.3e} {:>13.6e} {:>13.6e}\n",
                r.name, r.rel_err, r.analytic, r.numeric
            ));
        }
        out.push_str(&format!(
            "probed {} entries, worst rel err {:.3e}\n",
            self.entries_probed,
            self.max_rel_err()
        ));
        out
    }
}

/// Nudge every parameter by an independent uniform draw. Keeps the check off
/// the activation corner that exact-zero initial states otherwise hit.
pub fn jitter_parameters(model: &mut VarBiLstmModel, scale: f64, rng: &mut Rng) {
    for (_, t) in model.named_tensors_mut() {
        for v in t.data_mut() {
            *v += rng.uniform_in(-scale, scale);
        }
    }
}

/// Loss value for the exact noise in `plan`, no tracking.
fn loss_value(
    model: &VarBiLstmModel,
    batch: &SequenceBatch,
    cfg: &ObjectiveConfig,
    plan: &NoisePlan,
) -> Result<f64> {
    let mut tape = Tape::new();
    let br = sequence_objective_with_plan(&mut tape, model, batch, cfg, plan)?;
    Ok(br.loss.item())
}

/// Loss gradients for the exact noise in `plan`, keyed by parameter name.
pub fn analytic_gradients(
    model: &VarBiLstmModel,
    batch: &SequenceBatch,
    cfg: &ObjectiveConfig,
    plan: &NoisePlan,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let br = sequence_objective_with_plan(&mut tape, &bound, batch, cfg, plan)?;
    let grads = tape.backward(&br.loss)?;
    let mut out = BTreeMap::new();
    for (name, t) in bound.named_tensors() {
        out.insert(name, grads.wrt_or_zeros(t));
    }
    Ok(out)
}

/// Central-difference slope of the loss in one parameter entry.
fn numeric_slope(
    model: &VarBiLstmModel,
    batch: &SequenceBatch,
    cfg: &ObjectiveConfig,
    plan: &NoisePlan,
    name: &str,
    index: usize,
    epsilon: f64,
) -> Result<f64> {
    let probe = |delta: f64| -> Result<f64> {
        let mut m = model.clone();
        for (n, t) in m.named_tensors_mut() {
            if n == name {
                t.data_mut()[index] += delta;
            }
        }
        loss_value(&m, batch, cfg, plan)
    };
    let up = probe(epsilon)?;
    let down = probe(-epsilon)?;
    Ok((up - down) / (2.0 * epsilon))
}

/// Spread `count` probe indices over a tensor of `len` entries.
fn probe_indices(len: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..count.min(len))
        .map(|k| k * len / count.min(len).max(1))
        .collect();
    idx.dedup();
    idx
}

/// Compare externally supplied gradients against numeric slopes. Split out
/// from `run_gradcheck` so a deliberately corrupted gradient table can be
/// fed through the same comparison in tests.
pub fn compare_gradients(
    model: &VarBiLstmModel,
    batch: &SequenceBatch,
    cfg: &ObjectiveConfig,
    plan: &NoisePlan,
    grads: &BTreeMap<String, Vec<f64>>,
    epsilon: f64,
    probes_per_tensor: usize,
) -> Result<GradCheckReport> {
    if plan.sb_masks.iter().any(|m| m.is_some()) {
        return Err(Error::Config(
            "gradient checks need an ungated noise plan".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut probed = 0usize;
    for (name, g) in grads {
        let mut worst: Option<GradCheckRow> = None;
        for &i in &probe_indices(g.len(), probes_per_tensor) {
            let numeric = numeric_slope(model, batch, cfg, plan, name, i, epsilon)?;
            let rel = grad_rel_err(g[i], numeric);
            probed += 1;
            if worst.as_ref().map_or(true, |w| rel > w.rel_err) {
                worst = Some(GradCheckRow {
                    name: name.clone(),
                    index: i,
                    analytic: g[i],
                    numeric,
                    rel_err: rel,
                });
            }
        }
        if let Some(w) = worst {
            rows.push(w);
        }
    }
    Ok(GradCheckReport {
        rows,
        entries_probed: probed,
    })
}

/// Check the tape's gradients for every parameter tensor of `model`.
pub fn run_gradcheck(
    model: &VarBiLstmModel,
    batch: &SequenceBatch,
    cfg: &ObjectiveConfig,
    plan: &NoisePlan,
    epsilon: f64,
    probes_per_tensor: usize,
) -> Result<GradCheckReport> {
    let grads = analytic_gradients(model, batch, cfg, plan)?;
    compare_gradients(model, batch, cfg, plan, &grads, epsilon, probes_per_tensor)
}
