//! Minibatch training: Adam with bias correction, global-norm gradient
//! clipping, early stopping on validation score, a CSV metric log, and
//! binary checkpoints.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Modality, SequenceBatch};
use crate::error::{Error, Result};
use crate::metrics::bits_per_character;
use crate::model::{ModelConfig, VarBiLstmModel};
use crate::objective::{sequence_objective, ObjectiveBreakdown, ObjectiveConfig, TermSums};
use crate::rng::{Rng, Stream};
use crate::tensor::Tape;

// ── optimizer ───────────────────────────────────────────────────────────

/// Adam moments for every model parameter, in `named_tensors` order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(model: &VarBiLstmModel, lr: f64) -> Self {
        let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One Adam step over all parameters. `grads` follows `named_tensors`
/// order.
pub fn adam_update(
    model: &mut VarBiLstmModel,
    grads: &[Vec<f64>],
    state: &mut AdamState,
) -> Result<()> {
    let mut params = model.named_tensors_mut();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Mismatch(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, (name, tensor)) in params.iter_mut().enumerate() {
        if tensor.numel() != grads[i].len() {
            return Err(Error::Mismatch(format!(
                "gradient for {name} has {} entries, parameter has {}",
                grads[i].len(),
                tensor.numel()
            )));
        }
        let data = tensor.data_mut();
        for (j, &g) in grads[i].iter().enumerate() {
            state.m[i][j] = state.beta1 * state.m[i][j] + (1.0 - state.beta1) * g;
            state.v[i][j] = state.beta2 * state.v[i][j] + (1.0 - state.beta2) * g * g;
            let m_hat = state.m[i][j] / bc1;
            let v_hat = state.v[i][j] / bc2;
            data[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Global-norm clip threshold; None leaves gradients untouched.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub objective: ObjectiveConfig,
    /// When false the `seconds` column logs 0, making the CSV reproducible
    /// byte for byte.
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 50,
            max_epochs: 20,
            clip_norm: Some(5.0),
            seed: 1,
            patience: 10,
            objective: ObjectiveConfig::default(),
            log_wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        self.objective.validate()
    }
}

// ── metric log ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    /// Validation scored forward-only with prior-mean latents, the way the
    /// model runs at inference time.
    ValidPrior,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::ValidPrior => "valid_prior",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: Split,
    pub elbo_per_token: f64,
    pub kl_per_step: f64,
    pub bpc: Option<f64>,
    pub ppl: Option<f64>,
    pub seq_ll: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,elbo_per_token,kl_per_step,bpc,ppl,seq_ll,seconds\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{:.6},{:.3}\n",
                r.epoch,
                r.split.as_str(),
                r.elbo_per_token,
                r.kl_per_step,
                opt(r.bpc),
                opt(r.ppl),
                r.seq_ll,
                r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Accumulates objective breakdowns over the minibatches of one split.
#[derive(Debug, Clone, Default)]
pub struct SplitSums {
    pub agg: TermSums,
    pub total: f64,
    pub n_tokens: usize,
    pub n_seqs: usize,
}

impl SplitSums {
    pub fn absorb(&mut self, br: &ObjectiveBreakdown) {
        self.agg.fwd_recon += br.agg.fwd_recon;
        self.agg.bwd_recon += br.agg.bwd_recon;
        self.agg.aux_b += br.agg.aux_b;
        self.agg.aux_h += br.agg.aux_h;
        self.agg.kl += br.agg.kl;
        self.total += br.total();
        self.n_tokens += br.n_tokens;
        self.n_seqs += br.per_sequence.len();
    }

    pub fn elbo_per_token(&self) -> f64 {
        self.total / self.n_tokens as f64
    }

    pub fn nll_per_token(&self) -> f64 {
        -(self.agg.fwd_recon - self.agg.kl) / self.n_tokens as f64
    }

    pub fn into_row(self, epoch: usize, split: Split, modality: Modality, seconds: f64) -> MetricRow {
        let nll = self.nll_per_token();
        let discrete = modality == Modality::Discrete;
        MetricRow {
            epoch,
            split,
            elbo_per_token: self.elbo_per_token(),
            kl_per_step: self.agg.kl / self.n_tokens as f64,
            bpc: discrete.then(|| bits_per_character(nll)),
            ppl: discrete.then(|| nll.exp()),
            seq_ll: (self.agg.fwd_recon - self.agg.kl) / self.n_seqs as f64,
            seconds,
        }
    }
}

// ── evaluation ──────────────────────────────────────────────────────────

/// One full pass over `data` without touching the parameters.
pub fn evaluate_split(
    model: &VarBiLstmModel,
    data: &SequenceBatch,
    cfg: &ObjectiveConfig,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<SplitSums> {
    let mut sums = SplitSums::default();
    let n = data.n_seq();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mb = data.select(&idx);
        let mut tape = Tape::new();
        let br = sequence_objective(&mut tape, model, &mb, cfg, rng)?;
        sums.absorb(&br);
        start = end;
    }
    Ok(sums)
}

// ── training loop ───────────────────────────────────────────────────────

/// Score a split forward-only with prior-mean latents. Deterministic, so it
/// leaves the training noise stream untouched.
fn prior_valid_row(
    model: &VarBiLstmModel,
    data: &SequenceBatch,
    objective: &ObjectiveConfig,
    epoch: usize,
) -> Result<MetricRow> {
    let cfg = ObjectiveConfig {
        z_mode: crate::objective::ZMode::Mean,
        ..*objective
    };
    let mut rng = Rng::for_stream(0, Stream::Generate);
    let report = crate::generate::evaluate_likelihood(
        model,
        data,
        crate::generate::ZSource::Prior,
        &cfg,
        &mut rng,
    )?;
    let nll = report.nll_per_token();
    let discrete = model.config.modality == Modality::Discrete;
    Ok(MetricRow {
        epoch,
        split: Split::ValidPrior,
        elbo_per_token: -nll,
        kl_per_step: 0.0,
        bpc: discrete.then(|| bits_per_character(nll)),
        ppl: discrete.then(|| nll.exp()),
        seq_ll: report.total() / report.per_sequence.len() as f64,
        seconds: 0.0,
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: MetricLog,
    /// Parameters from the epoch with the best validation score.
    pub best_model: VarBiLstmModel,
    pub best_epoch: usize,
    pub best_valid_elbo: f64,
    pub epochs_run: usize,
}

/// Shuffled minibatch training with early stopping. `model` is left at its
/// final state; the best-validation parameters are returned separately.
pub fn train(
    model: &mut VarBiLstmModel,
    train_data: &SequenceBatch,
    valid_data: &SequenceBatch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_batch(train_data)?;
    model.check_batch(valid_data)?;

    let mut shuffle_rng = Rng::for_stream(cfg.seed, Stream::Shuffle);
    let mut noise_rng = Rng::for_stream(cfg.seed, Stream::Noise);
    let mut adam = AdamState::new(model, cfg.lr);
    let mut log = MetricLog::default();
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut best_valid = f64::NEG_INFINITY;
    let mut stale_epochs = 0;
    let mut epochs_run = 0;
    let modality = model.config.modality;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let t0 = Instant::now();
        let mut train_sums = SplitSums::default();
        let order = shuffle_rng.permutation(train_data.n_seq());
        for chunk in order.chunks(cfg.batch_size) {
            let mb = train_data.select(chunk);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let br = sequence_objective(&mut tape, &bound, &mb, &cfg.objective, &mut noise_rng)?;
            let grads = tape.backward(&br.loss)?;
            let mut gvecs: Vec<Vec<f64>> = bound
                .named_tensors()
                .iter()
                .map(|(_, t)| grads.wrt_or_zeros(t))
                .collect();
            if let Some(limit) = cfg.clip_norm {
                clip_gradients(&mut gvecs, limit);
            }
            adam_update(model, &gvecs, &mut adam)?;
            train_sums.absorb(&br);
        }
        let train_secs = if cfg.log_wall_clock {
            t0.elapsed().as_secs_f64()
        } else {
            0.0
        };
        log.rows
            .push(train_sums.into_row(epoch, Split::Train, modality, train_secs));

        let v0 = Instant::now();
        let valid_sums =
            evaluate_split(model, valid_data, &cfg.objective, cfg.batch_size, &mut noise_rng)?;
        let valid_secs = if cfg.log_wall_clock {
            v0.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let score = valid_sums.elbo_per_token();
        log.rows
            .push(valid_sums.into_row(epoch, Split::Valid, modality, valid_secs));
        log.rows
            .push(prior_valid_row(model, valid_data, &cfg.objective, epoch)?);

        if score > best_valid {
            best_valid = score;
            best_epoch = epoch;
            best_model = model.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        log,
        best_model,
        best_epoch,
        best_valid_elbo: best_valid,
        epochs_run,
    })
}

// ── checkpoints ─────────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8] = b"vblstm 1\n";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    objective: ObjectiveConfig,
    vocab: Option<crate::data::Vocab>,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Write a checkpoint keeping only parameters whose name passes `keep`.
/// Layout: magic line, little-endian u64 header length, JSON header, then
/// the kept tensors' f64 data little-endian in header order.
pub fn save_checkpoint_filtered(
    path: &Path,
    model: &VarBiLstmModel,
    objective: &ObjectiveConfig,
    keep: impl Fn(&str) -> bool,
) -> Result<()> {
    let named = model.named_tensors();
    let kept: Vec<_> = named.iter().filter(|(n, _)| keep(n)).collect();
    let header = CheckpointHeader {
        model: model.config.clone(),
        objective: *objective,
        vocab: model.vocab.clone(),
        tensors: kept
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(CKPT_MAGIC.len() + 8 + json.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &kept {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    model: &VarBiLstmModel,
    objective: &ObjectiveConfig,
) -> Result<()> {
    save_checkpoint_filtered(path, model, objective, |_| true)
}

/// Read a checkpoint. Parameters present in the file are restored;
/// parameters missing from it are left at zero, so a stripped checkpoint
/// still loads.
pub fn load_checkpoint(path: &Path) -> Result<(VarBiLstmModel, ObjectiveConfig)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < CKPT_MAGIC.len() + 8 || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
        return Err(Error::Mismatch("not a checkpoint file".into()));
    }
    let mut off = CKPT_MAGIC.len();
    let json_len = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    if bytes.len() < off + json_len {
        return Err(Error::Mismatch("checkpoint header truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[off..off + json_len])
        .map_err(|e| Error::Mismatch(format!("bad checkpoint header: {e}")))?;
    off += json_len;

    let mut model = VarBiLstmModel::zeros(header.model, header.vocab)?;
    let mut by_name: std::collections::HashMap<String, &mut crate::tensor::Tensor> =
        model.named_tensors_mut().into_iter().collect();
    for (name, shape) in &header.tensors {
        let numel: usize = shape.iter().product();
        let need = numel * 8;
        if bytes.len() < off + need {
            return Err(Error::Mismatch(format!("checkpoint data truncated at {name}")));
        }
        let data: Vec<f64> = bytes[off..off + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += need;
        match by_name.get_mut(name) {
            Some(t) => {
                if t.shape() != shape.as_slice() {
                    return Err(Error::Mismatch(format!(
                        "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                        shape,
                        t.shape()
                    )));
                }
                t.data_mut().copy_from_slice(&data);
            }
            // tensors this model shape does not know are skipped
            None => {}
        }
    }
    if off != bytes.len() {
        return Err(Error::Mismatch("trailing bytes after checkpoint data".into()));
    }
    drop(by_name);
    Ok((model, header.objective))
}
