//! The per-sequence training objective: two predictive log-likelihood heads,
//! two latent-reconstruction terms weighted by alpha and beta, and the KL
//! between posterior and prior. Also the ablation variants (activity
//! regularization, fixed prior, mean latent) and an importance-weighted
//! estimate used to sanity-check the bound.

use serde::{Deserialize, Serialize};

use crate::data::{Modality, SequenceBatch};
use crate::error::{Error, Result};
use crate::latent::{
    decode_b, decode_h, encoder, kl_diag_gauss, log_density, prior, reparam_sample,
    reparam_with_eps, GaussianParams, Prior,
};
use crate::model::VarBiLstmModel;
use crate::nn::Dense;
use crate::recurrent::{mask_rows, run_backward_lstm, var_forward_step, CellState};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

// ── output heads ────────────────────────────────────────────────────────

/// Per-step output distribution over the data, parameterized from a
/// recurrent state.
#[derive(Debug, Clone)]
pub enum Head {
    /// Dense layer to vocabulary logits, normalized by softmax.
    Discrete(Dense),
    /// Dense layer to per-dimension Bernoulli logits.
    Binary(Dense),
    /// Two dense layers to a diagonal Gaussian over the frame.
    Continuous {
        mu: Dense,
        sigma: Dense,
        sigma_min: f64,
    },
}

impl Head {
    pub fn init(
        modality: Modality,
        d_state: usize,
        d_out: usize,
        sigma_min: f64,
        rng: &mut Rng,
    ) -> Self {
        match modality {
            Modality::Discrete => Head::Discrete(Dense::init(d_state, d_out, rng)),
            Modality::Binary => Head::Binary(Dense::init(d_state, d_out, rng)),
            Modality::Continuous => Head::Continuous {
                mu: Dense::init(d_state, d_out, rng),
                sigma: Dense::init(d_state, d_out, rng),
                sigma_min,
            },
        }
    }

    pub fn zeros(modality: Modality, d_state: usize, d_out: usize, sigma_min: f64) -> Self {
        match modality {
            Modality::Discrete => Head::Discrete(Dense::zeros(d_state, d_out)),
            Modality::Binary => Head::Binary(Dense::zeros(d_state, d_out)),
            Modality::Continuous => Head::Continuous {
                mu: Dense::zeros(d_state, d_out),
                sigma: Dense::zeros(d_state, d_out),
                sigma_min,
            },
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            Head::Discrete(_) => Modality::Discrete,
            Head::Binary(_) => Modality::Binary,
            Head::Continuous { .. } => Modality::Continuous,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Self {
        match self {
            Head::Discrete(d) => Head::Discrete(d.bind(tape)),
            Head::Binary(d) => Head::Binary(d.bind(tape)),
            Head::Continuous { mu, sigma, sigma_min } => Head::Continuous {
                mu: mu.bind(tape),
                sigma: sigma.bind(tape),
                sigma_min: *sigma_min,
            },
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            Head::Discrete(d) | Head::Binary(d) => d.visit(prefix, out),
            Head::Continuous { mu, sigma, .. } => {
                mu.visit(&format!("{prefix}.mu"), out);
                sigma.visit(&format!("{prefix}.sigma"), out);
            }
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        match self {
            Head::Discrete(d) | Head::Binary(d) => d.visit_mut(prefix, out),
            Head::Continuous { mu, sigma, .. } => {
                mu.visit_mut(&format!("{prefix}.mu"), out);
                sigma.visit_mut(&format!("{prefix}.sigma"), out);
            }
        }
    }

    /// Gaussian over the frame for a continuous head.
    pub fn gaussian(&self, tape: &mut Tape, state: &Tensor) -> Result<GaussianParams> {
        let Head::Continuous { mu, sigma, sigma_min } = self else {
            return Err(Error::Mismatch("gaussian output from a non-continuous head".into()));
        };
        let m = mu.apply(tape, state)?;
        let pre = sigma.apply(tape, state)?;
        let sp = tape.softplus(&pre)?;
        let s = tape.add_const(&sp, *sigma_min)?;
        Ok(GaussianParams { mu: m, sigma: s })
    }
}

/// The pair of heads: the forward head is the model's actual output layer;
/// the backward head exists only to keep the backward states predictive
/// during training.
#[derive(Debug, Clone)]
pub struct OutputHeadParams {
    pub fwd: Head,
    pub bwd: Head,
    pub modality: Modality,
}

impl OutputHeadParams {
    pub fn init(
        modality: Modality,
        d_h: usize,
        d_b: usize,
        d_out: usize,
        sigma_min: f64,
        rng: &mut Rng,
    ) -> Self {
        OutputHeadParams {
            fwd: Head::init(modality, d_h, d_out, sigma_min, rng),
            bwd: Head::init(modality, d_b, d_out, sigma_min, rng),
            modality,
        }
    }

    pub fn zeros(modality: Modality, d_h: usize, d_b: usize, d_out: usize, sigma_min: f64) -> Self {
        OutputHeadParams {
            fwd: Head::zeros(modality, d_h, d_out, sigma_min),
            bwd: Head::zeros(modality, d_b, d_out, sigma_min),
            modality,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Self {
        OutputHeadParams {
            fwd: self.fwd.bind(tape),
            bwd: self.bwd.bind(tape),
            modality: self.modality,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.fwd.visit(&format!("{prefix}.fwd"), out);
        self.bwd.visit(&format!("{prefix}.bwd"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.fwd.visit_mut(&format!("{prefix}.fwd"), out);
        self.bwd.visit_mut(&format!("{prefix}.bwd"), out);
    }
}

/// Targets for one timestep across the batch.
#[derive(Debug, Clone)]
pub enum StepTargets {
    Tokens(Vec<usize>),
    Frames(Tensor),
}

/// Per-row log-likelihood of the targets under the head's distribution.
pub fn head_log_lik(
    tape: &mut Tape,
    head: &Head,
    state: &Tensor,
    targets: &StepTargets,
) -> Result<Tensor> {
    match (head, targets) {
        (Head::Discrete(dense), StepTargets::Tokens(idx)) => {
            let logits = dense.apply(tape, state)?;
            let lp = tape.log_softmax(&logits)?;
            tape.row_gather(&lp, idx)
        }
        (Head::Binary(dense), StepTargets::Frames(x)) => {
            // log Bernoulli(x | sigmoid(l)) = -(x softplus(-l) + (1-x) softplus(l))
            let logits = dense.apply(tape, state)?;
            let neg_logits = tape.neg(&logits)?;
            let sp_neg = tape.softplus(&neg_logits)?;
            let sp_pos = tape.softplus(&logits)?;
            let ones = Tensor::filled(x.shape(), 1.0);
            let not_x = {
                let mut d = ones;
                for (o, v) in d.data_mut().iter_mut().zip(x.data()) {
                    *o -= v;
                }
                d
            };
            let on = tape.mul(&sp_neg, x)?;
            let off = tape.mul(&sp_pos, &not_x)?;
            let nll = tape.add(&on, &off)?;
            let nll_row = tape.sum_axis(&nll, 1)?;
            tape.neg(&nll_row)
        }
        (Head::Continuous { .. }, StepTargets::Frames(x)) => {
            let g = head.gaussian(tape, state)?;
            log_density(tape, &g, x)
        }
        _ => Err(Error::Mismatch("head modality does not match targets".into())),
    }
}

// ── objective configuration ─────────────────────────────────────────────

/// Whether gradients of the latent-reconstruction terms into the recurrent
/// states are stochastically skipped. `Disabled` omits the gating ops
/// entirely; `Prob(p)` gates with per-(sequence, step) Bernoulli(p) masks,
/// where a mask of 1 lets the gradient through.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StochasticBackprop {
    Disabled,
    Prob(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorMode {
    Learned,
    Fixed,
}

/// Use the reparameterized sample, or its mean, wherever a latent draw is
/// needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZMode {
    Sampled,
    Mean,
}

/// What stands in the auxiliary slot of the objective: the latent
/// reconstruction terms, an L2 penalty on the forward states, or nothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AuxMode {
    Reconstruction,
    ActivityReg(f64),
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub beta: f64,
    pub sb: StochasticBackprop,
    pub prior_mode: PriorMode,
    pub z_mode: ZMode,
    pub aux_mode: AuxMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            alpha: 1.0,
            beta: 1.0,
            sb: StochasticBackprop::Prob(0.5),
            prior_mode: PriorMode::Learned,
            z_mode: ZMode::Sampled,
            aux_mode: AuxMode::Reconstruction,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if let StochasticBackprop::Prob(p) = self.sb {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("gate probability must be in [0,1], got {p}")));
            }
        }
        if let AuxMode::ActivityReg(g) = self.aux_mode {
            if !g.is_finite() || g < 0.0 {
                return Err(Error::Config(format!("activity coefficient must be finite and >= 0, got {g}")));
            }
        }
        Ok(())
    }

    /// Effective weights on the two auxiliary slots.
    pub fn aux_weights(&self) -> (f64, f64) {
        match self.aux_mode {
            AuxMode::Reconstruction => (self.alpha, self.beta),
            AuxMode::ActivityReg(gamma) => (gamma, 0.0),
            AuxMode::Off => (0.0, 0.0),
        }
    }
}

// ── breakdown bookkeeping ───────────────────────────────────────────────

/// Raw term values (nats). `aux_b`/`aux_h` hold whatever occupies the
/// auxiliary slots: the two reconstruction log-densities, or (-l2, 0) under
/// activity regularization.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermSums {
    pub fwd_recon: f64,
    pub bwd_recon: f64,
    pub aux_b: f64,
    pub aux_h: f64,
    pub kl: f64,
}

impl TermSums {
    pub fn weighted_total(&self, w_aux_b: f64, w_aux_h: f64) -> f64 {
        self.fwd_recon + self.bwd_recon + w_aux_b * self.aux_b + w_aux_h * self.aux_h - self.kl
    }

    /// The bound with the auxiliary terms stripped out.
    pub fn pure_bound(&self) -> f64 {
        self.fwd_recon - self.kl
    }

    fn add(&mut self, other: &TermSums) {
        self.fwd_recon += other.fwd_recon;
        self.bwd_recon += other.bwd_recon;
        self.aux_b += other.aux_b;
        self.aux_h += other.aux_h;
        self.kl += other.kl;
    }
}

/// Everything the objective computed for one batch, at three granularities,
/// plus the scalar loss tensor to backpropagate.
#[derive(Debug)]
pub struct ObjectiveBreakdown {
    pub per_step: Vec<TermSums>,
    pub per_sequence: Vec<TermSums>,
    pub agg: TermSums,
    pub n_tokens: usize,
    pub w_aux_b: f64,
    pub w_aux_h: f64,
    /// Negative weighted total divided by token count; tracked when the
    /// model was bound to the tape.
    pub loss: Tensor,
}

impl ObjectiveBreakdown {
    pub fn total(&self) -> f64 {
        self.agg.weighted_total(self.w_aux_b, self.w_aux_h)
    }

    pub fn per_token_loss(&self) -> f64 {
        -self.total() / self.n_tokens as f64
    }

    pub fn elbo_per_token(&self) -> f64 {
        self.total() / self.n_tokens as f64
    }

    pub fn kl_per_step(&self) -> f64 {
        self.agg.kl / self.n_tokens as f64
    }

    /// Negative bound on the data log-likelihood, in nats per token; the
    /// quantity behind bits-per-character and perplexity.
    pub fn nll_per_token(&self) -> f64 {
        -(self.agg.fwd_recon - self.agg.kl) / self.n_tokens as f64
    }

    pub fn sequence_totals(&self) -> Vec<f64> {
        self.per_sequence
            .iter()
            .map(|t| t.weighted_total(self.w_aux_b, self.w_aux_h))
            .collect()
    }
}

// ── pre-drawn noise ─────────────────────────────────────────────────────

/// Every random draw the objective needs, in a fixed order, so that two
/// configurations can be evaluated on identical noise.
#[derive(Debug, Clone)]
pub struct NoisePlan {
    pub sb_masks: Vec<Option<Tensor>>,
    pub z_eps: Vec<Tensor>,
    pub b_eps: Vec<Tensor>,
}

impl NoisePlan {
    /// Draw order per step: gate mask (when gating is on), then latent
    /// noise, then backward-prediction noise.
    pub fn sample(
        rng: &mut Rng,
        batch: usize,
        steps: usize,
        d_z: usize,
        d_b: usize,
        sb: &StochasticBackprop,
    ) -> Self {
        let mut sb_masks = Vec::with_capacity(steps);
        let mut z_eps = Vec::with_capacity(steps);
        let mut b_eps = Vec::with_capacity(steps);
        for _ in 0..steps {
            sb_masks.push(match sb {
                StochasticBackprop::Disabled => None,
                StochasticBackprop::Prob(p) => {
                    let m: Vec<f64> = (0..batch).map(|_| rng.bernoulli(*p)).collect();
                    Some(Tensor::vector(&m))
                }
            });
            z_eps.push(
                Tensor::from_vec(rng.normal_vec(batch * d_z), &[batch, d_z]).expect("noise shape"),
            );
            b_eps.push(
                Tensor::from_vec(rng.normal_vec(batch * d_b), &[batch, d_b]).expect("noise shape"),
            );
        }
        NoisePlan {
            sb_masks,
            z_eps,
            b_eps,
        }
    }
}

// ── the objective ───────────────────────────────────────────────────────

/// One timestep's terms as per-row [batch] tensors, masked by sequence
/// validity.
#[derive(Debug)]
pub struct StepTerms {
    pub fwd: Tensor,
    pub bwd: Tensor,
    pub aux_b: Tensor,
    pub aux_h: Tensor,
    pub kl: Tensor,
}

/// One timestep of the objective. `h_t` is the state after consuming this
/// step's input, `h_prev` the state before it; the posterior `q`, prior
/// `p`, and the two reconstruction distributions `g_b`, `g_h` have already
/// been evaluated by the caller.
#[allow(clippy::too_many_arguments)]
pub fn elbo_step(
    tape: &mut Tape,
    targets: &StepTargets,
    h_t: &Tensor,
    h_prev: &Tensor,
    b_t: &Tensor,
    q: &GaussianParams,
    p: &GaussianParams,
    g_b: &GaussianParams,
    g_h: &GaussianParams,
    heads: &OutputHeadParams,
    cfg: &ObjectiveConfig,
    sb_mask: Option<&Tensor>,
    valid: &Tensor,
) -> Result<StepTerms> {
    let fwd = head_log_lik(tape, &heads.fwd, h_t, targets)?;
    let bwd = head_log_lik(tape, &heads.bwd, b_t, targets)?;
    let kl = kl_diag_gauss(tape, q, p)?;

    let (aux_b, aux_h) = match cfg.aux_mode {
        AuxMode::Reconstruction => {
            // gate gradient into the recurrent states; values pass through
            let (b_target, h_target) = match sb_mask {
                Some(mask) => (
                    tape.grad_gate(b_t, mask)?,
                    tape.grad_gate(h_prev, mask)?,
                ),
                None => (b_t.clone(), h_prev.clone()),
            };
            (
                log_density(tape, g_b, &b_target)?,
                log_density(tape, g_h, &h_target)?,
            )
        }
        AuxMode::ActivityReg(_) => {
            let sq = tape.square(h_t)?;
            let l2 = tape.sum_axis(&sq, 1)?;
            let neg = tape.neg(&l2)?;
            (neg, Tensor::zeros(&[h_t.shape()[0]]))
        }
        AuxMode::Off => {
            let zero = Tensor::zeros(&[h_t.shape()[0]]);
            (zero.clone(), zero)
        }
    };

    Ok(StepTerms {
        fwd: tape.mul(&fwd, valid)?,
        bwd: tape.mul(&bwd, valid)?,
        aux_b: tape.mul(&aux_b, valid)?,
        aux_h: tape.mul(&aux_h, valid)?,
        kl: tape.mul(&kl, valid)?,
    })
}

/// Run the full objective over a batch, drawing fresh noise from `rng`.
pub fn sequence_objective(
    tape: &mut Tape,
    model: &VarBiLstmModel,
    batch: &SequenceBatch,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<ObjectiveBreakdown> {
    let plan = NoisePlan::sample(
        rng,
        batch.n_seq(),
        batch.t_max(),
        model.config.d_z,
        model.config.d_b,
        &cfg.sb,
    );
    sequence_objective_with_plan(tape, model, batch, cfg, &plan)
}

/// The objective on caller-supplied noise.
pub fn sequence_objective_with_plan(
    tape: &mut Tape,
    model: &VarBiLstmModel,
    batch: &SequenceBatch,
    cfg: &ObjectiveConfig,
    plan: &NoisePlan,
) -> Result<ObjectiveBreakdown> {
    cfg.validate()?;
    model.check_batch(batch)?;
    if cfg.prior_mode == PriorMode::Learned && matches!(model.prior, Prior::Fixed) {
        return Err(Error::Mismatch(
            "learned-prior objective on a model without prior parameters".into(),
        ));
    }
    let n = batch.n_seq();
    let steps = batch.t_max();
    let inputs = model.step_inputs(batch);
    let masks = model.step_masks(batch);

    let b_states = run_backward_lstm(tape, &model.bwd_cell, &inputs, &masks)?;

    let mut state = CellState::zeros(n, model.config.d_h);
    let mut per_step: Vec<TermSums> = Vec::with_capacity(steps);
    let mut per_sequence = vec![TermSums::default(); n];
    let mut agg = TermSums::default();
    let (w_aux_b, w_aux_h) = cfg.aux_weights();
    let mut total_acc = Tensor::scalar(0.0);

    for j in 0..steps {
        let h_prev = state.h.clone();
        let b_t = &b_states[j].h;

        let q = encoder(tape, &model.enc, &h_prev, b_t)?;
        let p = match cfg.prior_mode {
            PriorMode::Fixed => GaussianParams::standard(n, model.config.d_z),
            PriorMode::Learned => prior(tape, &model.prior, &h_prev, model.config.d_z)?,
        };
        let z = match cfg.z_mode {
            ZMode::Sampled => reparam_with_eps(tape, &q, &plan.z_eps[j])?,
            ZMode::Mean => q.mu.clone(),
        };
        let g_b = decode_b(tape, &model.dec_b, &z)?;
        let b_tilde = match cfg.z_mode {
            ZMode::Sampled => reparam_with_eps(tape, &g_b, &plan.b_eps[j])?,
            ZMode::Mean => g_b.mu.clone(),
        };
        let g_h = decode_h(tape, &model.dec_h, &z)?;

        let next = var_forward_step(tape, &model.fwd_cell, &inputs[j], &state, &z, &b_tilde)?;
        state = CellState {
            h: mask_rows(tape, &next.h, &masks[j])?,
            c: mask_rows(tape, &next.c, &masks[j])?,
        };

        let targets = model.targets_at(batch, j);
        let terms = elbo_step(
            tape,
            &targets,
            &state.h,
            &h_prev,
            b_t,
            &q,
            &p,
            &g_b,
            &g_h,
            &model.heads,
            cfg,
            plan.sb_masks[j].as_ref(),
            &masks[j],
        )?;

        // scalar accumulation on the tape
        let s_fwd = tape.sum_all(&terms.fwd)?;
        let s_bwd = tape.sum_all(&terms.bwd)?;
        let s_aux_b = tape.sum_all(&terms.aux_b)?;
        let s_aux_h = tape.sum_all(&terms.aux_h)?;
        let s_kl = tape.sum_all(&terms.kl)?;
        let mut step_total = tape.add(&s_fwd, &s_bwd)?;
        if w_aux_b != 0.0 {
            let wb = tape.scale(&s_aux_b, w_aux_b)?;
            step_total = tape.add(&step_total, &wb)?;
        }
        if w_aux_h != 0.0 {
            let wh = tape.scale(&s_aux_h, w_aux_h)?;
            step_total = tape.add(&step_total, &wh)?;
        }
        let neg_kl = tape.neg(&s_kl)?;
        step_total = tape.add(&step_total, &neg_kl)?;
        total_acc = tape.add(&total_acc, &step_total)?;

        // plain-number bookkeeping
        let mut step_sums = TermSums::default();
        for s in 0..n {
            let row = TermSums {
                fwd_recon: terms.fwd.data()[s],
                bwd_recon: terms.bwd.data()[s],
                aux_b: terms.aux_b.data()[s],
                aux_h: terms.aux_h.data()[s],
                kl: terms.kl.data()[s],
            };
            step_sums.add(&row);
            per_sequence[s].add(&row);
        }
        agg.add(&step_sums);
        per_step.push(step_sums);
    }

    let n_tokens = batch.n_tokens();
    let loss = tape.scale(&total_acc, -1.0 / n_tokens as f64)?;

    let breakdown = ObjectiveBreakdown {
        per_step,
        per_sequence,
        agg,
        n_tokens,
        w_aux_b,
        w_aux_h,
        loss,
    };
    debug_assert!(
        (breakdown.total() - breakdown.agg.weighted_total(w_aux_b, w_aux_h)).abs() < 1e-9
    );
    debug_assert!(
        (breakdown.loss.item() - breakdown.per_token_loss()).abs()
            < 1e-9 * (1.0 + breakdown.per_token_loss().abs()),
        "tape loss {} vs bookkeeping {}",
        breakdown.loss.item(),
        breakdown.per_token_loss()
    );
    Ok(breakdown)
}

/// The activity-regularization ablation: auxiliary slots replaced by
/// -gamma * sum_t |h_t|^2, KL retained.
pub fn activity_reg_objective(
    tape: &mut Tape,
    model: &VarBiLstmModel,
    batch: &SequenceBatch,
    base: &ObjectiveConfig,
    gamma: f64,
    rng: &mut Rng,
) -> Result<ObjectiveBreakdown> {
    let cfg = ObjectiveConfig {
        aux_mode: AuxMode::ActivityReg(gamma),
        ..*base
    };
    sequence_objective(tape, model, batch, &cfg, rng)
}

/// Both sides of the square-difference expansion |h - g|^2 =
/// |h|^2 + |g|^2 - 2 h.g, returned as (lhs, rhs).
pub fn decomposition_check(h: &Tensor, h_tilde: &Tensor) -> Result<(f64, f64)> {
    if h.shape() != h_tilde.shape() {
        return Err(Error::shape(
            "decomposition_check",
            format!("{:?} vs {:?}", h.shape(), h_tilde.shape()),
        ));
    }
    let lhs: f64 = h
        .data()
        .iter()
        .zip(h_tilde.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let hh: f64 = h.data().iter().map(|v| v * v).sum();
    let gg: f64 = h_tilde.data().iter().map(|v| v * v).sum();
    let cross: f64 = h.data().iter().zip(h_tilde.data()).map(|(a, b)| a * b).sum();
    Ok((lhs, hh + gg - 2.0 * cross))
}

/// Single-sample bound estimate vs. an importance-weighted estimate over
/// `k` posterior samples of one batch of sequences. Returns
/// (bound_estimate, iw_estimate, standard_error). The bound estimate can
/// never exceed the importance-weighted one.
pub fn monte_carlo_bound_check(
    model: &VarBiLstmModel,
    batch: &SequenceBatch,
    k: usize,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    if model.config.d_z > 4 || batch.t_max() > 4 {
        return Err(Error::Domain(
            "importance-weight check is restricted to d_z <= 4 and T <= 4".into(),
        ));
    }
    if k == 0 {
        return Err(Error::Domain("need at least one importance sample".into()));
    }
    let n = batch.n_seq();
    let inputs = model.step_inputs(batch);
    let masks = model.step_masks(batch);
    let mut log_w = vec![Vec::with_capacity(k); n];

    for _ in 0..k {
        let mut tape = Tape::new();
        let b_states = run_backward_lstm(&mut tape, &model.bwd_cell, &inputs, &masks)?;
        let mut state = CellState::zeros(n, model.config.d_h);
        let mut acc = vec![0.0; n];
        for j in 0..batch.t_max() {
            let h_prev = state.h.clone();
            let b_t = &b_states[j].h;
            let q = encoder(&mut tape, &model.enc, &h_prev, b_t)?;
            let p = match cfg.prior_mode {
                PriorMode::Fixed => GaussianParams::standard(n, model.config.d_z),
                PriorMode::Learned => prior(&mut tape, &model.prior, &h_prev, model.config.d_z)?,
            };
            let z = reparam_sample(&mut tape, &q, rng)?;
            let g_b = decode_b(&mut tape, &model.dec_b, &z)?;
            let b_tilde = reparam_sample(&mut tape, &g_b, rng)?;
            // The predicted backward state is proposed from its own model
            // distribution, so its density cancels out of the weight.
            let next =
                var_forward_step(&mut tape, &model.fwd_cell, &inputs[j], &state, &z, &b_tilde)?;
            state = CellState {
                h: mask_rows(&mut tape, &next.h, &masks[j])?,
                c: mask_rows(&mut tape, &next.c, &masks[j])?,
            };
            let targets = model.targets_at(batch, j);
            let fwd = head_log_lik(&mut tape, &model.heads.fwd, &state.h, &targets)?;
            let lq = log_density(&mut tape, &q, &z)?;
            let lp = log_density(&mut tape, &p, &z)?;
            for s in 0..n {
                if j < batch.lengths[s] {
                    acc[s] += fwd.data()[s] + lp.data()[s] - lq.data()[s];
                }
            }
        }
        for s in 0..n {
            log_w[s].push(acc[s]);
        }
    }

    // average the per-sequence estimates
    let mut bound_est = 0.0;
    let mut iw_est = 0.0;
    let mut se_acc = 0.0;
    for w in &log_w {
        let mean = w.iter().sum::<f64>() / k as f64;
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + w.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let iw = lse - (k as f64).ln();
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        bound_est += mean;
        iw_est += iw;
        se_acc += (var / k as f64).sqrt();
    }
    Ok((
        bound_est / n as f64,
        iw_est / n as f64,
        se_acc / n as f64,
    ))
}
