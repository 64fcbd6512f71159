//! Text generation from a checkpoint by repeated next-token sampling.
//!
//! Randomness comes from [`ChaCha8Rng`] seeded with
//! [`SamplerConfig::seed`]; that algorithm is fixed for the 0.x series, so
//! a given checkpoint, configuration and seed always produce the same text.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::RecurrentState;
use crate::corpus::normalize_urdu_with;
use crate::error::{Error, Result};
use crate::trainer::Checkpoint;

/// Temperatures below this select the argmax instead of sampling.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub max_tokens: usize,
    /// Stop after this many LINE_BREAK tokens have been generated.
    pub max_lines: Option<usize>,
    pub seed: u64,
    pub prompt: String,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            top_k: None,
            max_tokens: 400,
            max_lines: None,
            seed: 0,
            prompt: String::new(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab_size {
                return Err(Error::Config(format!("top_k must lie in 1..={vocab_size}, got {k}")));
            }
        }
        Ok(())
    }

    fn is_greedy(&self) -> bool {
        self.temperature < GREEDY_TEMPERATURE || self.top_k == Some(1)
    }
}

fn first_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// The distribution [`sample_next`] draws from: `softmax(log(ŷ) / t)`
/// restricted to the `top_k` most probable entries (ties broken toward the
/// lower index). Zero-probability entries stay at zero.
pub fn adjusted_distribution(yhat: &[f64], temperature: f64, top_k: Option<usize>) -> Result<Vec<f64>> {
    if yhat.is_empty() {
        return Err(Error::Empty("adjusted_distribution"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if yhat.iter().any(|&p| !(p >= 0.0 && p.is_finite())) || yhat.iter().all(|&p| p == 0.0) {
        return Err(Error::NonFinite("sampler input is not a probability vector".into()));
    }
    let mut keep = vec![true; yhat.len()];
    if let Some(k) = top_k {
        if k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..yhat.len()).collect();
        order.sort_by(|&a, &b| yhat[b].total_cmp(&yhat[a]).then(a.cmp(&b)));
        for &i in order.iter().skip(k) {
            keep[i] = false;
        }
    }
    let scaled: Vec<f64> = yhat
        .iter()
        .zip(&keep)
        .map(|(&p, &k)| if k && p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Draws the next token index from `yhat`.
pub fn sample_next<R: Rng + ?Sized>(yhat: &[f64], cfg: &SamplerConfig, rng: &mut R) -> Result<usize> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    if cfg.is_greedy() {
        if yhat.is_empty() {
            return Err(Error::Empty("sample_next"));
        }
        return Ok(first_argmax(yhat));
    }
    let p = adjusted_distribution(yhat, cfg.temperature, cfg.top_k)?;
    let dist = WeightedIndex::new(&p).map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?;
    Ok(dist.sample(rng))
}

/// Generates text after `cfg.prompt`. The returned string is the
/// normalized prompt followed by the continuation, normalized as a whole.
/// An empty prompt is replaced by a single LINE_BREAK, which is not part of
/// the output.
pub fn generate(ckpt: &Checkpoint, cfg: &SamplerConfig) -> Result<String> {
    let vocab = &ckpt.vocab;
    if vocab.is_empty() {
        return Err(Error::Empty("vocabulary"));
    }
    cfg.validate(vocab.len())?;
    let params = &ckpt.params;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let prompt = vocab.encode_text(&cfg.prompt)?;
    let feed = if prompt.is_empty() { vec![vocab.line_break()] } else { prompt.clone() };
    let mut state = RecurrentState::for_params(params);
    let mut yhat = Vec::new();
    for &x in &feed {
        let trace = params.step(&state, x)?;
        state = trace.state();
        yhat = trace.yhat.into_vec();
    }

    let mut tokens = prompt;
    let mut lines = 0;
    for _ in 0..cfg.max_tokens {
        let next = sample_next(&yhat, cfg, &mut rng)?;
        tokens.push(next);
        if next == vocab.line_break() {
            lines += 1;
            if cfg.max_lines.is_some_and(|m| lines >= m) {
                break;
            }
        }
        let trace = params.step(&state, next)?;
        state = trace.state();
        yhat = trace.yhat.into_vec();
    }
    let text = vocab.decode(&tokens)?;
    Ok(normalize_urdu_with(&text, &vocab.normalization()))
}
