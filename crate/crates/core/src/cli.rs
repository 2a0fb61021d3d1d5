//! Command-line front end: training, evaluation, generation, gradient
//! checking, and the comparison studies. Configs are flat `key = value`
//! text so experiment files diff cleanly; `--set key=value` flags override
//! file entries.
//!
//! Exit codes: 0 success, 2 configuration problems (bad keys, missing
//! files), 3 data/model mismatches, 4 numeric failures.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    self, encode_chars_with_vocab, load_binary_sequences, load_char_corpus,
    load_frame_sequences, Modality, SequenceBatch,
};
use crate::error::{Error, Result};
use crate::generate::{evaluate_likelihood, generate, Generated, SampleMode, ZSource};
use crate::gradcheck::{jitter_parameters, run_gradcheck};
use crate::model::{ModelConfig, VarBiLstmModel};
use crate::objective::{
    AuxMode, NoisePlan, ObjectiveConfig, PriorMode, StochasticBackprop, ZMode,
};
use crate::rng::{Rng, Stream};
use crate::training::{
    evaluate_split, load_checkpoint, save_checkpoint, train, MetricLog, MetricRow, Split,
    TrainConfig,
};

// ── experiment configuration ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Chars,
    Frames,
    Bits,
}

impl DataKind {
    fn modality(self) -> Modality {
        match self {
            DataKind::Chars => Modality::Discrete,
            DataKind::Frames => Modality::Continuous,
            DataKind::Bits => Modality::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AuxKind {
    Reconstruction,
    Activity,
    Off,
}

/// Everything a training or study run needs, assembled from a config file
/// plus overrides. See the README for the key list.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub data: Option<PathBuf>,
    pub data_kind: DataKind,
    pub chunk_len: usize,
    pub split: (f64, f64, f64),
    pub standardize: bool,
    pub d_h: usize,
    pub d_b: usize,
    pub d_z: usize,
    pub d_mlp: usize,
    pub sigma_min: f64,
    pub prior: PriorMode,
    aux: AuxKind,
    gamma: f64,
    pub train: TrainConfig,
    pub csv: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            data: None,
            data_kind: DataKind::Chars,
            chunk_len: 128,
            split: (0.8, 0.1, 0.1),
            standardize: false,
            d_h: 32,
            d_b: 32,
            d_z: 16,
            d_mlp: 32,
            sigma_min: 1e-4,
            prior: PriorMode::Learned,
            aux: AuxKind::Reconstruction,
            gamma: 1.0,
            train: TrainConfig::default(),
            csv: PathBuf::from("metrics.csv"),
            checkpoint: PathBuf::from("model.ckpt"),
        }
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("config key `{key}`: bad number `{value}`")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("config key `{key}`: bad count `{value}`")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("config key `{key}`: bad integer `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "config key `{key}`: expected true or false, got `{value}`"
        ))),
    }
}

impl Experiment {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "data_kind" => {
                self.data_kind = match value {
                    "chars" => DataKind::Chars,
                    "frames" => DataKind::Frames,
                    "bits" => DataKind::Bits,
                    _ => {
                        return Err(Error::Config(format!(
                            "config key `data_kind`: expected chars, frames or bits, got `{value}`"
                        )))
                    }
                }
            }
            "chunk_len" => self.chunk_len = parse_usize(key, value)?,
            "split" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "config key `split`: expected three comma-separated fractions, got `{value}`"
                    )));
                }
                self.split = (
                    parse_f64(key, parts[0])?,
                    parse_f64(key, parts[1])?,
                    parse_f64(key, parts[2])?,
                );
            }
            "standardize" => self.standardize = parse_bool(key, value)?,
            "d_h" => self.d_h = parse_usize(key, value)?,
            "d_b" => self.d_b = parse_usize(key, value)?,
            "d_z" => self.d_z = parse_usize(key, value)?,
            "d_mlp" => self.d_mlp = parse_usize(key, value)?,
            "sigma_min" => self.sigma_min = parse_f64(key, value)?,
            "prior" => {
                self.prior = match value {
                    "learned" => PriorMode::Learned,
                    "fixed" => PriorMode::Fixed,
                    _ => {
                        return Err(Error::Config(format!(
                            "config key `prior`: expected learned or fixed, got `{value}`"
                        )))
                    }
                }
            }
            "lr" => self.train.lr = parse_f64(key, value)?,
            "batch_size" => self.train.batch_size = parse_usize(key, value)?,
            "max_epochs" => self.train.max_epochs = parse_usize(key, value)?,
            "clip_norm" => {
                self.train.clip_norm = if value == "none" {
                    None
                } else {
                    Some(parse_f64(key, value)?)
                }
            }
            "seed" => self.train.seed = parse_u64(key, value)?,
            "patience" => self.train.patience = parse_usize(key, value)?,
            "alpha" => self.train.objective.alpha = parse_f64(key, value)?,
            "beta" => self.train.objective.beta = parse_f64(key, value)?,
            "sb_prob" => {
                self.train.objective.sb = if value == "off" {
                    StochasticBackprop::Disabled
                } else {
                    StochasticBackprop::Prob(parse_f64(key, value)?)
                }
            }
            "z_mode" => {
                self.train.objective.z_mode = match value {
                    "sampled" => ZMode::Sampled,
                    "mean" => ZMode::Mean,
                    _ => {
                        return Err(Error::Config(format!(
                            "config key `z_mode`: expected sampled or mean, got `{value}`"
                        )))
                    }
                }
            }
            "aux" => {
                self.aux = match value {
                    "reconstruction" => AuxKind::Reconstruction,
                    "activity" => AuxKind::Activity,
                    "off" => AuxKind::Off,
                    _ => {
                        return Err(Error::Config(format!(
                            "config key `aux`: expected reconstruction, activity or off, got `{value}`"
                        )))
                    }
                }
            }
            "gamma" => self.gamma = parse_f64(key, value)?,
            "log_wall_clock" => self.train.log_wall_clock = parse_bool(key, value)?,
            "csv" => self.csv = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Resolve interdependent keys (order-independent) and validate.
    pub fn finish(mut self) -> Result<Experiment> {
        self.train.objective.prior_mode = self.prior;
        self.train.objective.aux_mode = match self.aux {
            AuxKind::Reconstruction => AuxMode::Reconstruction,
            AuxKind::Activity => AuxMode::ActivityReg(self.gamma),
            AuxKind::Off => AuxMode::Off,
        };
        self.train.validate()?;
        for (name, v) in [
            ("d_h", self.d_h),
            ("d_b", self.d_b),
            ("d_z", self.d_z),
            ("d_mlp", self.d_mlp),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("config key `{name}` must be positive")));
            }
        }
        Ok(self)
    }
}

/// Parse flat `key = value` text. Blank lines and lines starting with `#`
/// are skipped.
pub fn parse_config(text: &str) -> Result<Experiment> {
    let mut exp = Experiment::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
        })?;
        exp.set(key.trim(), value.trim())?;
    }
    Ok(exp)
}

fn load_experiment(path: &Path, sets: &[String]) -> Result<Experiment> {
    let text = std::fs::read_to_string(path)?;
    let mut exp = parse_config(&text)?;
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set needs key=value, got `{s}`")))?;
        exp.set(key.trim(), value.trim())?;
    }
    exp.finish()
}

// ── data loading ────────────────────────────────────────────────────────

pub struct Prepared {
    pub train: SequenceBatch,
    pub valid: SequenceBatch,
    pub test: SequenceBatch,
}

/// Sequence-count split boundaries, mirroring the character-corpus rules:
/// at least one training sequence, degenerate fractions fall back to the
/// previous split.
fn split_batch(batch: &SequenceBatch, fractions: (f64, f64, f64)) -> Prepared {
    let n = batch.n_seq();
    let n_train = (((n as f64) * fractions.0).round() as usize).max(1).min(n);
    let n_valid = ((n as f64) * fractions.1).round() as usize;
    let valid_end = (n_train + n_valid).min(n);
    let train = batch.select(&(0..n_train).collect::<Vec<_>>());
    let valid = if valid_end > n_train {
        batch.select(&(n_train..valid_end).collect::<Vec<_>>())
    } else {
        train.clone()
    };
    let test = if valid_end < n {
        batch.select(&(valid_end..n).collect::<Vec<_>>())
    } else {
        valid.clone()
    };
    Prepared { train, valid, test }
}

fn load_dataset(exp: &Experiment) -> Result<Prepared> {
    let path = exp
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("config key `data` is required".into()))?;
    match exp.data_kind {
        DataKind::Chars => {
            let (train, valid, test) = load_char_corpus(path, exp.chunk_len, exp.split)?;
            Ok(Prepared { train, valid, test })
        }
        DataKind::Frames => {
            let all = load_frame_sequences(path)?;
            let mut p = split_batch(&all, exp.split);
            if exp.standardize {
                let (mean, std) = data::frame_stats(&p.train);
                p.train = data::standardize(&p.train, &mean, &std);
                p.valid = data::standardize(&p.valid, &mean, &std);
                p.test = data::standardize(&p.test, &mean, &std);
            }
            Ok(p)
        }
        DataKind::Bits => {
            let all = load_binary_sequences(path)?;
            Ok(split_batch(&all, exp.split))
        }
    }
}

fn build_model(exp: &Experiment, prepared: &Prepared) -> Result<VarBiLstmModel> {
    let modality = exp.data_kind.modality();
    let (d_in, vocab) = match modality {
        Modality::Discrete => {
            let vocab = prepared
                .train
                .vocab
                .clone()
                .ok_or_else(|| Error::Mismatch("character data lost its vocabulary".into()))?;
            (vocab.len(), Some(vocab))
        }
        _ => (prepared.train.dim(), None),
    };
    let config = ModelConfig {
        modality,
        d_in,
        d_h: exp.d_h,
        d_b: exp.d_b,
        d_z: exp.d_z,
        d_mlp: exp.d_mlp,
        sigma_min: exp.sigma_min,
        prior_mode: exp.prior,
    };
    config.validate()?;
    let mut rng = Rng::for_stream(exp.train.seed, Stream::Init);
    VarBiLstmModel::init(config, vocab, &mut rng)
}

// ── argument surface ────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "varbilstm",
    about = "Variational bidirectional LSTM sequence models",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file; writes a CSV log and a checkpoint.
    Train(TrainArgs),
    /// Score a dataset with a trained checkpoint.
    Eval(EvalArgs),
    /// Sample from a trained checkpoint, forward path only.
    Generate(GenerateArgs),
    /// Compare tape gradients against central differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Run one of the four comparison studies.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file.
    config: PathBuf,
    /// Override a config entry, e.g. --set lr=0.01 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ZSourceArg {
    Posterior,
    Prior,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint.
    checkpoint: PathBuf,
    /// Dataset file matching the checkpoint's modality.
    data: PathBuf,
    /// posterior scores the variational bound, prior scores the forward
    /// path alone the way generation runs.
    #[arg(long, value_enum, default_value = "posterior")]
    z_source: ZSourceArg,
    /// Character chunk length for text data.
    #[arg(long, default_value_t = 128)]
    chunk_len: usize,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    /// Seed for the evaluation noise.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write the metrics as a one-row CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sample,
    Greedy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ZModeArg {
    Sampled,
    Mean,
}

#[derive(Args)]
struct GenerateArgs {
    /// Trained checkpoint.
    checkpoint: PathBuf,
    /// Number of symbols to emit after the prime.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, value_enum, default_value = "sample")]
    mode: ModeArg,
    /// Latents from prior draws or prior means.
    #[arg(long, value_enum, default_value = "mean")]
    z_mode: ZModeArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Prime text for character models.
    #[arg(long)]
    prime: Option<String>,
    /// Prime sequence file for frame or bit models (first sequence is used).
    #[arg(long)]
    prime_file: Option<PathBuf>,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Entries probed per parameter tensor.
    #[arg(long, default_value_t = 2)]
    probes: usize,
}

#[derive(Args)]
struct AblateArgs {
    /// Study id: 1 penalty form, 2 prior form, 3 auxiliary costs and
    /// gradient gating, 4 sampled vs mean latents.
    #[arg(long)]
    study: u8,
    /// Base config shared by every run.
    config: PathBuf,
    /// Override a config entry (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

// ── commands ────────────────────────────────────────────────────────────

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let exp = load_experiment(&args.config, &args.set)?;
    let prepared = load_dataset(&exp)?;
    let mut model = build_model(&exp, &prepared)?;
    let outcome = train(&mut model, &prepared.train, &prepared.valid, &exp.train)?;
    outcome.log.write_csv(&exp.csv)?;
    save_checkpoint(&exp.checkpoint, &outcome.best_model, &exp.train.objective)?;
    let last_valid = outcome
        .log
        .rows
        .iter()
        .rev()
        .find(|r| r.split == Split::Valid)
        .expect("training logs at least one validation row");
    println!("epochs_run {}", outcome.epochs_run);
    println!("best_epoch {}", outcome.best_epoch);
    println!("best_valid_elbo_per_token {:.6}", outcome.best_valid_elbo);
    println!("final_valid_elbo_per_token {:.6}", last_valid.elbo_per_token);
    println!("final_valid_kl_per_step {:.6}", last_valid.kl_per_step);
    if let Some(bpc) = last_valid.bpc {
        println!("final_valid_bpc {bpc:.6}");
    }
    println!("csv {}", exp.csv.display());
    println!("checkpoint {}", exp.checkpoint.display());
    Ok(())
}

fn load_eval_data(model: &VarBiLstmModel, path: &Path, chunk_len: usize) -> Result<SequenceBatch> {
    let batch = match model.config.modality {
        Modality::Discrete => {
            let vocab = model
                .vocab
                .as_ref()
                .ok_or_else(|| Error::Mismatch("checkpoint has no vocabulary".into()))?;
            let text = std::fs::read_to_string(path)?;
            encode_chars_with_vocab(&text, vocab, chunk_len)?
        }
        Modality::Continuous => load_frame_sequences(path)?,
        Modality::Binary => load_binary_sequences(path)?,
    };
    if batch.n_seq() == 0 || batch.n_tokens() == 0 {
        return Err(Error::Mismatch("dataset is empty".into()));
    }
    model.check_batch(&batch)?;
    Ok(batch)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, objective) = load_checkpoint(&args.checkpoint)?;
    let batch = load_eval_data(&model, &args.data, args.chunk_len)?;
    let modality = model.config.modality;
    let row: MetricRow = match args.z_source {
        ZSourceArg::Posterior => {
            let mut rng = Rng::for_stream(args.seed, Stream::Noise);
            let sums = evaluate_split(&model, &batch, &objective, args.batch_size, &mut rng)?;
            sums.into_row(0, Split::Valid, modality, 0.0)
        }
        ZSourceArg::Prior => {
            let cfg = ObjectiveConfig {
                z_mode: ZMode::Mean,
                ..objective
            };
            let mut rng = Rng::for_stream(args.seed, Stream::Generate);
            let report = evaluate_likelihood(&model, &batch, ZSource::Prior, &cfg, &mut rng)?;
            let nll = report.nll_per_token();
            let discrete = modality == Modality::Discrete;
            MetricRow {
                epoch: 0,
                split: Split::ValidPrior,
                elbo_per_token: -nll,
                kl_per_step: 0.0,
                bpc: discrete.then(|| crate::metrics::bits_per_character(nll)),
                ppl: discrete.then(|| nll.exp()),
                seq_ll: report.total() / report.per_sequence.len() as f64,
                seconds: 0.0,
            }
        }
    };
    println!("sequences {}", batch.n_seq());
    println!("tokens {}", batch.n_tokens());
    println!("elbo_per_token {:.6}", row.elbo_per_token);
    println!("kl_per_step {:.6}", row.kl_per_step);
    if let Some(bpc) = row.bpc {
        println!("bpc {bpc:.6}");
    }
    if let Some(ppl) = row.ppl {
        println!("ppl {ppl:.6}");
    }
    println!("seq_ll {:.6}", row.seq_ll);
    if let Some(csv_path) = &args.csv {
        let log = MetricLog { rows: vec![row] };
        log.write_csv(csv_path)?;
    }
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    if args.prime.is_some() && args.prime_file.is_some() {
        return Err(Error::Config(
            "--prime and --prime-file are mutually exclusive".into(),
        ));
    }
    let mut prime_batch: Option<SequenceBatch> = None;
    let mut echo = String::new();
    if let Some(text) = &args.prime {
        if model.config.modality != Modality::Discrete {
            return Err(Error::Mismatch(
                "--prime is for character models; use --prime-file".into(),
            ));
        }
        if !text.is_empty() {
            let vocab = model
                .vocab
                .as_ref()
                .ok_or_else(|| Error::Mismatch("checkpoint has no vocabulary".into()))?;
            let chunk = text.chars().count();
            prime_batch = Some(encode_chars_with_vocab(text, vocab, chunk)?);
            echo = text.clone();
        }
    }
    if let Some(path) = &args.prime_file {
        if model.config.modality == Modality::Discrete {
            return Err(Error::Mismatch(
                "--prime-file is for frame or bit models; use --prime".into(),
            ));
        }
        let all = match model.config.modality {
            Modality::Continuous => load_frame_sequences(path)?,
            _ => load_binary_sequences(path)?,
        };
        if all.n_seq() == 0 {
            return Err(Error::Mismatch("prime file holds no sequences".into()));
        }
        let first = all.select(&[0]);
        let rows: Vec<Vec<f64>> = (0..first.lengths[0])
            .map(|j| first.frame(0, j).to_vec())
            .collect();
        echo = Generated::Frames(rows).render(&model);
        prime_batch = Some(first);
    }

    let mode = match args.mode {
        ModeArg::Sample => SampleMode::Sample,
        ModeArg::Greedy => SampleMode::Greedy,
    };
    let z_mode = match args.z_mode {
        ZModeArg::Sampled => ZMode::Sampled,
        ZModeArg::Mean => ZMode::Mean,
    };
    let mut rng = Rng::for_stream(args.seed, Stream::Generate);
    let out = generate(&model, prime_batch.as_ref(), args.steps, mode, z_mode, &mut rng)?;
    let rendered = out.render(&model);
    let text = match model.config.modality {
        Modality::Discrete => format!("{echo}{rendered}\n"),
        _ => {
            if echo.is_empty() || rendered.is_empty() {
                format!("{echo}{rendered}\n")
            } else {
                format!("{echo}\n{rendered}\n")
            }
        }
    };
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let config = ModelConfig {
        modality: Modality::Discrete,
        d_in: 3,
        d_h: 3,
        d_b: 2,
        d_z: 2,
        d_mlp: 3,
        sigma_min: 1e-4,
        prior_mode: PriorMode::Learned,
    };
    let vocab = data::Vocab::from_chars(["a", "b"].into_iter());
    let mut init_rng = Rng::for_stream(args.seed, Stream::Init);
    let mut model = VarBiLstmModel::init(config, Some(vocab.clone()), &mut init_rng)?;
    jitter_parameters(&mut model, 0.05, &mut init_rng);
    let batch = SequenceBatch::from_token_rows(&[vec![1, 2, 1, 2], vec![2, 1, 1]], vocab)?;
    let cfg = ObjectiveConfig {
        sb: StochasticBackprop::Disabled,
        ..Default::default()
    };
    let mut noise = Rng::for_stream(args.seed, Stream::Noise);
    let plan = NoisePlan::sample(
        &mut noise,
        batch.n_seq(),
        batch.t_max(),
        model.config.d_z,
        model.config.d_b,
        &StochasticBackprop::Disabled,
    );
    let report = run_gradcheck(&model, &batch, &cfg, &plan, args.eps, args.probes)?;
    print!("{}", report.render());
    if report.passed(args.tol) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "gradient check failed: max rel err {:.3e} exceeds {:.3e}",
            report.max_rel_err(),
            args.tol
        )))
    }
}

/// Labeled experiment variants for one study. Pure so the grid shape is
/// testable without training anything.
fn ablation_runs(study: u8, base: &Experiment) -> Result<Vec<(String, Experiment)>> {
    let mut runs = Vec::new();
    match study {
        1 => {
            let mut recon = base.clone();
            recon.train.objective.aux_mode = AuxMode::Reconstruction;
            runs.push(("recon".to_string(), recon));
            for gamma in [0.001, 1.0, 4.0, 8.0, 16.0] {
                let mut e = base.clone();
                e.train.objective.aux_mode = AuxMode::ActivityReg(gamma);
                runs.push((format!("gamma_{gamma}"), e));
            }
        }
        2 => {
            for (label, mode) in [("prior_learned", PriorMode::Learned), ("prior_fixed", PriorMode::Fixed)] {
                let mut e = base.clone();
                e.prior = mode;
                e.train.objective.prior_mode = mode;
                runs.push((label.to_string(), e));
            }
        }
        3 => {
            let gated = match base.train.objective.sb {
                StochasticBackprop::Prob(p) => StochasticBackprop::Prob(p),
                StochasticBackprop::Disabled => StochasticBackprop::Prob(0.5),
            };
            for (aux_label, aux) in [("aux_on", AuxMode::Reconstruction), ("aux_off", AuxMode::Off)] {
                for (sb_label, sb) in [("sb_on", gated), ("sb_off", StochasticBackprop::Disabled)] {
                    let mut e = base.clone();
                    e.train.objective.aux_mode = aux;
                    e.train.objective.sb = sb;
                    runs.push((format!("{aux_label}_{sb_label}"), e));
                }
            }
        }
        4 => {
            for (label, mode) in [("z_sampled", ZMode::Sampled), ("z_mean", ZMode::Mean)] {
                let mut e = base.clone();
                e.train.objective.z_mode = mode;
                runs.push((label.to_string(), e));
            }
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown ablation study `{study}`; valid ids are 1-4"
            )))
        }
    }
    Ok(runs)
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let exp = load_experiment(&args.config, &args.set)?;
    let runs = ablation_runs(args.study, &exp)?;
    let prepared = load_dataset(&exp)?;
    let mut csv = String::from("run,epoch,elbo_per_token,kl_per_step,bpc,ppl,seq_ll\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (label, e) in &runs {
        let mut model = build_model(e, &prepared)?;
        let outcome = train(&mut model, &prepared.train, &prepared.valid, &e.train)?;
        let mut best_bpc = f64::INFINITY;
        for row in outcome.log.rows.iter().filter(|r| r.split == Split::Valid) {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{:.6}\n",
                label,
                row.epoch,
                row.elbo_per_token,
                row.kl_per_step,
                opt(row.bpc),
                opt(row.ppl),
                row.seq_ll
            ));
            if let Some(bpc) = row.bpc {
                best_bpc = best_bpc.min(bpc);
            }
        }
        print!(
            "run {label}: epochs {} best_epoch {} best_valid_elbo_per_token {:.6}",
            outcome.epochs_run, outcome.best_epoch, outcome.best_valid_elbo
        );
        if best_bpc.is_finite() {
            print!(" best_valid_bpc {best_bpc:.6}");
        }
        println!();
    }
    std::fs::write(&exp.csv, &csv)?;
    println!("csv {}", exp.csv.display());
    Ok(())
}

// ── entry point ─────────────────────────────────────────────────────────

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Io(_) => 2,
        Error::Mismatch(_) | Error::Shape { .. } | Error::Axis { .. } => 3,
        Error::NonFinite(_) | Error::Domain(_) | Error::LossNotScalar | Error::NotOnTape => 4,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Ablate(args) => cmd_ablate(args),
    }
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { 0 } else { 2 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}
