//! Epoch loop: truncated BPTT over corpus windows with state carry,
//! per-epoch validation perplexity, sampling, and checkpointing.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backprop::{bptt, clip_gradients, step_nll, LossValue};
use crate::cells::{CellKind, ModelParams, RecurrentState};
use crate::corpus::{
    build_vocabulary, encode, encode_document, load_corpus, make_windows, split_validation, CorpusDocument,
    CorpusOptions, TokenMode, Vocabulary, Window,
};
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::optimizer::{apply_decay, sgd_step_in_place, OptimizerConfig};
use crate::sampler::{generate, SamplerConfig};

/// CSV header matching [`EpochMetrics::csv_row`].
pub const CSV_HEADER: &str = "epoch,train_loss,val_ppl,grad_norm_mean,grad_norm_max,clip_count,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F64 => "64",
            Precision::F32 => "32",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "64" | "f64" => Ok(Precision::F64),
            "32" | "f32" => Ok(Precision::F32),
            other => Err(Error::Config(format!("precision must be 64 or 32, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub cell: CellKind,
    pub hidden: usize,
    pub window_len: usize,
    /// `None` means `window_len`, i.e. contiguous windows with state carry.
    pub stride: Option<usize>,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub precision: Precision,
    pub token_mode: TokenMode,
    /// Upper bound on the vocabulary size in word mode.
    pub max_vocab: usize,
    pub corpus: CorpusOptions,
    pub val_fraction: f64,
    /// Where `latest.ckpt`, `best.ckpt` and `metrics.csv` go. Nothing is
    /// written when `None`.
    pub output_dir: Option<PathBuf>,
    pub sample_prompt: String,
    pub sample_tokens: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::Gru,
            hidden: 128,
            window_len: 64,
            stride: None,
            epochs: 10,
            optimizer: OptimizerConfig::default(),
            seed: 42,
            precision: Precision::F64,
            token_mode: TokenMode::Char,
            max_vocab: 10_000,
            corpus: CorpusOptions::default(),
            val_fraction: 0.05,
            output_dir: None,
            sample_prompt: String::new(),
            sample_tokens: 120,
        }
    }
}

impl TrainingConfig {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.window_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden size must be at least 1".into()));
        }
        if self.window_len < 2 {
            return Err(Error::Config(format!("window length must be at least 2, got {}", self.window_len)));
        }
        if self.stride == Some(0) {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        self.optimizer.validate()
    }

    /// Ordered `key = value` echo stored in checkpoints.
    pub fn echo(&self) -> Vec<(String, String)> {
        let prompt = serde_json::to_string(&self.sample_prompt).expect("strings always serialize");
        [
            ("cell", self.cell.to_string()),
            ("hidden", self.hidden.to_string()),
            ("window", self.window_len.to_string()),
            ("stride", self.stride().to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", format!("{:?}", self.optimizer.learning_rate)),
            ("decay", format!("{:?}", self.optimizer.decay)),
            ("clip_norm", format!("{:?}", self.optimizer.clip_norm)),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("tokenizer", self.token_mode.to_string()),
            ("max_vocab", self.max_vocab.to_string()),
            ("strip_diacritics", self.corpus.normalize.strip_diacritics.to_string()),
            ("blank_lines_as_breaks", self.corpus.blank_lines_as_breaks.to_string()),
            ("val_fraction", format!("{:?}", self.val_fraction)),
            ("sample_prompt", prompt),
            ("sample_tokens", self.sample_tokens.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-token training loss over the epoch's windows.
    pub train_loss: f64,
    pub val_ppl: f64,
    /// Gradient norms are taken after averaging over the window, before
    /// clipping.
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub clip_count: usize,
    pub seconds: f64,
    pub sample: String,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.val_ppl,
            self.grad_norm_mean,
            self.grad_norm_max,
            self.clip_count,
            self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainingReport {
    /// Validation perplexity of the freshly initialized model.
    pub initial_val_ppl: f64,
    pub epochs: Vec<EpochMetrics>,
    pub final_checkpoint: Checkpoint,
    pub final_checkpoint_path: Option<PathBuf>,
    pub best_checkpoint_path: Option<PathBuf>,
}

impl TrainingReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Loads the corpus under `corpus_root` and trains on it.
pub fn train(cfg: &TrainingConfig, corpus_root: &Path) -> Result<TrainingReport> {
    cfg.validate()?;
    let docs = load_corpus(corpus_root, &cfg.corpus)?;
    train_documents(cfg, &docs, |_| {})
}

/// Trains on already-loaded documents, calling `on_epoch` after each epoch.
///
/// The last `val_fraction` of the documents are held out; the vocabulary is
/// built from all of them so validation never meets unknown characters.
pub fn train_documents(
    cfg: &TrainingConfig,
    docs: &[CorpusDocument],
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainingReport> {
    cfg.validate()?;
    if docs.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let vocab = build_vocabulary(docs, cfg.token_mode, cfg.max_vocab, cfg.corpus.normalize)?;
    let (train_docs, mut val_docs) = split_validation(docs, cfg.val_fraction);
    if val_docs.is_empty() {
        log::warn!("no documents held out for validation; reporting perplexity on the training set");
        val_docs = train_docs.clone();
    }
    // fail before training if the per-epoch sample prompt cannot be encoded
    vocab.encode_text(&cfg.sample_prompt)?;

    let stream = encode(&train_docs, &vocab)?;
    let windows = make_windows(&stream, cfg.window_len, cfg.stride())?;
    log::info!(
        "{} training documents, {} validation documents, {} tokens, vocabulary {}, {} windows",
        train_docs.len(),
        val_docs.len(),
        stream.indices.len(),
        vocab.len(),
        windows.len()
    );
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
    }
    match cfg.precision {
        Precision::F64 => run::<f64>(cfg, vocab, &windows, &val_docs, on_epoch),
        Precision::F32 => run::<f32>(cfg, vocab, &windows, &val_docs, on_epoch),
    }
}

fn run<T: Real>(
    cfg: &TrainingConfig,
    vocab: Vocabulary,
    windows: &[Window],
    val_docs: &[CorpusDocument],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainingReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::<f64>::init(cfg.cell, cfg.hidden, vocab.len(), &mut rng).cast::<T>();
    let val_streams = val_docs
        .iter()
        .map(|d| encode_document(d, &vocab))
        .collect::<Result<Vec<_>>>()?;

    let initial_val_ppl = perplexity_of(&params, &val_streams)?;
    log::info!("epoch 0: validation perplexity {initial_val_ppl:.4}");

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best_ppl = f64::INFINITY;
    let mut latest_path = None;
    let mut best_path = None;
    let mut checkpoint = None;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let step_cfg = apply_decay(&cfg.optimizer, epoch - 1);
        let stats = run_windows(&mut params, windows, Some(&step_cfg)).map_err(|e| match e {
            WindowError::NonFinite(window) => Error::NonFiniteLoss { epoch, window },
            WindowError::Other(e) => e,
        })?;
        let val_ppl = perplexity_of(&params, &val_streams)?;

        let ckpt = Checkpoint {
            params: params.cast::<f64>(),
            vocab: vocab.clone(),
            epoch,
            rng_seed: cfg.seed,
            config: cfg.echo(),
        };
        let sample = generate(
            &ckpt,
            &SamplerConfig {
                prompt: cfg.sample_prompt.clone(),
                max_tokens: cfg.sample_tokens,
                max_lines: Some(2),
                seed: cfg.seed,
                ..Default::default()
            },
        )?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: stats.total_loss / stats.tokens as f64,
            val_ppl,
            grad_norm_mean: stats.norm_sum / windows.len() as f64,
            grad_norm_max: stats.norm_max,
            clip_count: stats.clipped,
            seconds: started.elapsed().as_secs_f64(),
            sample,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, validation perplexity {:.4}, sample:\n{}",
            metrics.train_loss,
            metrics.val_ppl,
            metrics.sample
        );

        if let Some(dir) = &cfg.output_dir {
            let latest = dir.join("latest.ckpt");
            save_checkpoint(&ckpt, &latest)?;
            latest_path = Some(latest);
            if val_ppl < best_ppl {
                let best = dir.join("best.ckpt");
                save_checkpoint(&ckpt, &best)?;
                best_path = Some(best);
            }
        }
        best_ppl = best_ppl.min(val_ppl);
        on_epoch(&metrics);
        epochs.push(metrics);
        checkpoint = Some(ckpt);
    }

    if let Some(dir) = &cfg.output_dir {
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        for m in &epochs {
            csv.push_str(&m.csv_row());
            csv.push('\n');
        }
        std::fs::write(dir.join("metrics.csv"), csv)?;
    }

    Ok(TrainingReport {
        initial_val_ppl,
        epochs,
        final_checkpoint: checkpoint.expect("epochs >= 1"),
        final_checkpoint_path: latest_path,
        best_checkpoint_path: best_path,
    })
}

#[derive(Debug, Default)]
struct WindowStats {
    losses: Vec<LossValue>,
    total_loss: f64,
    tokens: usize,
    norm_sum: f64,
    norm_max: f64,
    clipped: usize,
}

enum WindowError {
    NonFinite(usize),
    Other(Error),
}

impl From<Error> for WindowError {
    fn from(e: Error) -> Self {
        WindowError::Other(e)
    }
}

/// Runs every window in order, resetting the state unless the window
/// carries it over. With `update = Some(cfg)` each window's gradient is
/// averaged over its length, clipped, and applied; with `None` the
/// parameters are left alone.
fn run_windows<T: Real>(
    params: &mut ModelParams<T>,
    windows: &[Window],
    update: Option<&OptimizerConfig>,
) -> std::result::Result<WindowStats, WindowError> {
    let mut stats = WindowStats::default();
    let mut state = RecurrentState::for_params(params);
    for (i, w) in windows.iter().enumerate() {
        if !w.carry_state {
            state = RecurrentState::for_params(params);
        }
        let out = match bptt(params, &w.inputs, &w.targets, &state) {
            Ok(out) => out,
            Err(Error::NonFinite(_)) => return Err(WindowError::NonFinite(i)),
            Err(e) => return Err(e.into()),
        };
        if !out.loss.total.is_finite() {
            return Err(WindowError::NonFinite(i));
        }
        stats.total_loss += out.loss.total;
        stats.tokens += out.loss.token_count;
        if let Some(cfg) = update {
            let mut grads = out.grads;
            grads.scale(T::from_f64_lossy(1.0 / w.inputs.len() as f64));
            let clipped = clip_gradients(grads, cfg.clip_norm).map_err(|e| match e {
                Error::NonFinite(_) => WindowError::NonFinite(i),
                e => WindowError::Other(e),
            })?;
            stats.norm_sum += clipped.norm;
            stats.norm_max = stats.norm_max.max(clipped.norm);
            stats.clipped += usize::from(clipped.applied);
            sgd_step_in_place(params, &clipped.grads, cfg).map_err(|e| match e {
                Error::NonFinite(_) => WindowError::NonFinite(i),
                e => WindowError::Other(e),
            })?;
        }
        state = out.final_state;
        stats.losses.push(out.loss);
    }
    Ok(stats)
}

/// Per-window losses of `params` over `windows` without updating, using
/// the same state carry rules as training.
pub fn window_losses<T: Real>(params: &ModelParams<T>, windows: &[Window]) -> Result<Vec<LossValue>> {
    let mut p = params.clone();
    match run_windows(&mut p, windows, None) {
        Ok(stats) => Ok(stats.losses),
        Err(WindowError::NonFinite(window)) => Err(Error::NonFiniteLoss { epoch: 0, window }),
        Err(WindowError::Other(e)) => Err(e),
    }
}

/// Teacher-forced NLL of one encoded document from a zero state. Every
/// token after the first is predicted.
fn document_nll<T: Real>(params: &ModelParams<T>, tokens: &[usize]) -> Result<(f64, usize)> {
    let mut state = RecurrentState::for_params(params);
    let mut total = 0.0;
    for pair in tokens.windows(2) {
        let trace = params.step(&state, pair[0])?;
        total += step_nll(&trace.yhat, pair[1])?.0;
        state = trace.state();
    }
    Ok((total, tokens.len().saturating_sub(1)))
}

fn perplexity_of<T: Real>(params: &ModelParams<T>, docs: &[Vec<usize>]) -> Result<f64> {
    let parts = docs
        .par_iter()
        .map(|d| document_nll(params, d))
        .collect::<Result<Vec<_>>>()?;
    // summed in document order so the result does not depend on scheduling
    let (total, count) = parts.iter().fold((0.0, 0), |(t, c), &(dt, dc)| (t + dt, c + dc));
    if count == 0 {
        return Err(Error::Empty("perplexity evaluation (no document has two tokens)"));
    }
    let ppl = (total / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite("perplexity".into()));
    }
    Ok(ppl)
}

/// `exp(total NLL / predicted tokens)` over `docs`, teacher-forced, with
/// the state reset at the start of each document. Documents are evaluated
/// in parallel.
pub fn evaluate_perplexity(ckpt: &Checkpoint, docs: &[CorpusDocument]) -> Result<f64> {
    if ckpt.params.vocab_size() != ckpt.vocab.len() {
        return Err(Error::VocabularyMismatch(format!(
            "model has {} outputs but vocabulary has {} tokens",
            ckpt.params.vocab_size(),
            ckpt.vocab.len()
        )));
    }
    if ckpt.vocab.normalization_version() != crate::corpus::NORMALIZATION_VERSION {
        return Err(Error::VocabularyMismatch(format!(
            "checkpoint uses normalization version {}, this build produces version {}",
            ckpt.vocab.normalization_version(),
            crate::corpus::NORMALIZATION_VERSION
        )));
    }
    let streams = docs
        .iter()
        .map(|d| encode_document(d, &ckpt.vocab))
        .collect::<Result<Vec<_>>>()?;
    perplexity_of(&ckpt.params, &streams)
}
