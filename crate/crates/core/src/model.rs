//! Model assembly: the variational forward cell, the backward cell that
//! exists only at training time, the encoder/prior/decoder networks, and
//! the output heads, together with the batch-to-timestep plumbing they
//! share.

use serde::{Deserialize, Serialize};

use crate::data::{Modality, SequenceBatch, Vocab, START};
use crate::error::{Error, Result};
use crate::latent::{MlpParams, Prior};
use crate::objective::{OutputHeadParams, PriorMode, StepTargets};
use crate::recurrent::{LstmParams, VarForwardLstmParams};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modality: Modality,
    /// Input width: vocabulary size for discrete data (inputs are one-hot),
    /// frame dimension otherwise. Output distributions share this width.
    pub d_in: usize,
    /// Forward recurrent state size.
    pub d_h: usize,
    /// Backward recurrent state size.
    pub d_b: usize,
    /// Latent dimension.
    pub d_z: usize,
    /// Hidden width of every feed-forward network.
    pub d_mlp: usize,
    pub sigma_min: f64,
    pub prior_mode: PriorMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_in", self.d_in),
            ("d_h", self.d_h),
            ("d_b", self.d_b),
            ("d_z", self.d_z),
            ("d_mlp", self.d_mlp),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.sigma_min.is_finite() || self.sigma_min <= 0.0 {
            return Err(Error::Config(format!(
                "sigma_min must be finite and positive, got {}",
                self.sigma_min
            )));
        }
        Ok(())
    }
}

/// All parameters of the sequence model.
#[derive(Debug, Clone)]
pub struct VarBiLstmModel {
    pub config: ModelConfig,
    pub vocab: Option<Vocab>,
    pub fwd_cell: VarForwardLstmParams,
    pub bwd_cell: LstmParams,
    pub enc: MlpParams,
    pub prior: Prior,
    pub dec_b: MlpParams,
    pub dec_h: MlpParams,
    pub heads: OutputHeadParams,
}

fn check_vocab(config: &ModelConfig, vocab: &Option<Vocab>) -> Result<()> {
    match config.modality {
        Modality::Discrete => {
            let v = vocab
                .as_ref()
                .ok_or_else(|| Error::Config("discrete model needs a vocabulary".into()))?;
            if v.len() != config.d_in {
                return Err(Error::Config(format!(
                    "vocabulary has {} symbols but d_in is {}",
                    v.len(),
                    config.d_in
                )));
            }
        }
        _ => {
            if vocab.is_some() {
                return Err(Error::Config(
                    "vocabulary given for non-discrete modality".into(),
                ));
            }
        }
    }
    Ok(())
}

impl VarBiLstmModel {
    pub fn init(config: ModelConfig, vocab: Option<Vocab>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        check_vocab(&config, &vocab)?;
        let (d_in, d_h, d_b, d_z, d_mlp) =
            (config.d_in, config.d_h, config.d_b, config.d_z, config.d_mlp);
        let sm = config.sigma_min;
        let fwd_cell = VarForwardLstmParams::init(d_in, d_h, d_z, d_b, rng);
        let bwd_cell = LstmParams::init(d_in, d_b, rng);
        let enc = MlpParams::init(d_h + d_b, d_mlp, d_z, sm, rng);
        let prior = match config.prior_mode {
            PriorMode::Fixed => Prior::Fixed,
            PriorMode::Learned => Prior::Learned(MlpParams::init(d_h, d_mlp, d_z, sm, rng)),
        };
        let dec_b = MlpParams::init(d_z, d_mlp, d_b, sm, rng);
        let dec_h = MlpParams::init(d_z, d_mlp, d_h, sm, rng);
        let heads = OutputHeadParams::init(config.modality, d_h, d_b, d_in, sm, rng);
        Ok(VarBiLstmModel {
            config,
            vocab,
            fwd_cell,
            bwd_cell,
            enc,
            prior,
            dec_b,
            dec_h,
            heads,
        })
    }

    /// All-zero parameters in the same layout; the canvas a checkpoint is
    /// loaded onto.
    pub fn zeros(config: ModelConfig, vocab: Option<Vocab>) -> Result<Self> {
        config.validate()?;
        check_vocab(&config, &vocab)?;
        let (d_in, d_h, d_b, d_z, d_mlp) =
            (config.d_in, config.d_h, config.d_b, config.d_z, config.d_mlp);
        let sm = config.sigma_min;
        Ok(VarBiLstmModel {
            fwd_cell: VarForwardLstmParams::zeros(d_in, d_h, d_z, d_b),
            bwd_cell: LstmParams::zeros(d_in, d_b),
            enc: MlpParams::zeros(d_h + d_b, d_mlp, d_z, sm),
            prior: match config.prior_mode {
                PriorMode::Fixed => Prior::Fixed,
                PriorMode::Learned => Prior::Learned(MlpParams::zeros(d_h, d_mlp, d_z, sm)),
            },
            dec_b: MlpParams::zeros(d_z, d_mlp, d_b, sm),
            dec_h: MlpParams::zeros(d_z, d_mlp, d_h, sm),
            heads: OutputHeadParams::zeros(config.modality, d_h, d_b, d_in, sm),
            config,
            vocab,
        })
    }

    /// Copy whose parameter tensors are leaves on `tape`, ready for
    /// gradient computation.
    pub fn bind(&self, tape: &mut Tape) -> Self {
        VarBiLstmModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            fwd_cell: self.fwd_cell.bind(tape),
            bwd_cell: self.bwd_cell.bind(tape),
            enc: self.enc.bind(tape),
            prior: self.prior.bind(tape),
            dec_b: self.dec_b.bind(tape),
            dec_h: self.dec_h.bind(tape),
            heads: self.heads.bind(tape),
        }
    }

    /// Every parameter tensor with a stable, unique name. The order is
    /// fixed; optimizer state and checkpoints index into it.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.fwd_cell.visit("fwd", &mut out);
        self.bwd_cell.visit("bwd", &mut out);
        self.enc.visit("enc", &mut out);
        self.prior.visit("prior", &mut out);
        self.dec_b.visit("dec_b", &mut out);
        self.dec_h.visit("dec_h", &mut out);
        self.heads.visit("head", &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.fwd_cell.visit_mut("fwd", &mut out);
        self.bwd_cell.visit_mut("bwd", &mut out);
        self.enc.visit_mut("enc", &mut out);
        self.prior.visit_mut("prior", &mut out);
        self.dec_b.visit_mut("dec_b", &mut out);
        self.dec_h.visit_mut("dec_h", &mut out);
        self.heads.visit_mut("head", &mut out);
        out
    }

    pub fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        if batch.modality != self.config.modality {
            return Err(Error::Mismatch(format!(
                "model expects {} data, batch is {}",
                self.config.modality.as_str(),
                batch.modality.as_str()
            )));
        }
        match self.config.modality {
            Modality::Discrete => {
                if batch.dim() != 1 {
                    return Err(Error::Mismatch(format!(
                        "discrete batches carry one id per step, got dim {}",
                        batch.dim()
                    )));
                }
                for s in 0..batch.n_seq() {
                    for t in 0..batch.lengths[s] {
                        if batch.token(s, t) >= self.config.d_in {
                            return Err(Error::Mismatch(format!(
                                "token id {} outside vocabulary of {}",
                                batch.token(s, t),
                                self.config.d_in
                            )));
                        }
                    }
                }
            }
            _ => {
                if batch.dim() != self.config.d_in {
                    return Err(Error::Mismatch(format!(
                        "model expects frames of dim {}, batch has {}",
                        self.config.d_in,
                        batch.dim()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-step input matrices [n, d_in]. Step 0 feeds the start symbol
    /// (discrete) or a zero frame; step j > 0 feeds the data at j - 1, so
    /// every state predicts the symbol at its own step index. Both
    /// recurrent directions consume the same inputs.
    pub fn step_inputs(&self, batch: &SequenceBatch) -> Vec<Tensor> {
        let n = batch.n_seq();
        let d = self.config.d_in;
        let mut out = Vec::with_capacity(batch.t_max());
        for j in 0..batch.t_max() {
            let row = match self.config.modality {
                Modality::Discrete => {
                    let ids: Vec<usize> = (0..n)
                        .map(|s| if j == 0 { START } else { batch.token(s, j - 1) })
                        .collect();
                    one_hot_rows(&ids, d)
                }
                _ => {
                    let mut data = vec![0.0; n * d];
                    if j > 0 {
                        for s in 0..n {
                            data[s * d..(s + 1) * d].copy_from_slice(batch.frame(s, j - 1));
                        }
                    }
                    Tensor::from_vec(data, &[n, d]).expect("input shape")
                }
            };
            out.push(row);
        }
        out
    }

    /// Validity masks [n] per step: 1 while the step is inside the
    /// sequence, 0 in the padding.
    pub fn step_masks(&self, batch: &SequenceBatch) -> Vec<Tensor> {
        (0..batch.t_max())
            .map(|j| {
                let m: Vec<f64> = batch
                    .lengths
                    .iter()
                    .map(|&len| if j < len { 1.0 } else { 0.0 })
                    .collect();
                Tensor::vector(&m)
            })
            .collect()
    }

    /// Prediction targets at step `j`: the data at that step.
    pub fn targets_at(&self, batch: &SequenceBatch, j: usize) -> StepTargets {
        match self.config.modality {
            Modality::Discrete => {
                StepTargets::Tokens((0..batch.n_seq()).map(|s| batch.token(s, j)).collect())
            }
            _ => {
                let n = batch.n_seq();
                let d = batch.dim();
                let mut data = vec![0.0; n * d];
                for s in 0..n {
                    data[s * d..(s + 1) * d].copy_from_slice(batch.frame(s, j));
                }
                StepTargets::Frames(Tensor::from_vec(data, &[n, d]).expect("target shape"))
            }
        }
    }
}

/// Stack of one-hot rows, one per id.
pub fn one_hot_rows(ids: &[usize], width: usize) -> Tensor {
    let mut data = vec![0.0; ids.len() * width];
    for (s, &id) in ids.iter().enumerate() {
        assert!(id < width, "id {id} outside width {width}");
        data[s * width + id] = 1.0;
    }
    Tensor::from_vec(data, &[ids.len(), width]).expect("one-hot shape")
}
