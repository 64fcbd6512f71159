mod config_file;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ghazal_forge::backprop::{check_gradients, GRADCHECK_EPS};
use ghazal_forge::cells::CellKind;
use ghazal_forge::corpus::{
    build_vocabulary, corpus_stats, encode, load_corpus, CorpusOptions, NormalizeOptions, Token, TokenMode,
};
use ghazal_forge::optimizer::OptimizerConfig;
use ghazal_forge::sampler::{generate, SamplerConfig};
use ghazal_forge::trainer::{evaluate_perplexity, load_checkpoint, train_documents, Precision, TrainingConfig, CSV_HEADER};

const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Recurrent language models for Urdu verse.
#[derive(Parser, Debug)]
#[command(name = "ghazal-forge", version, about)]
struct Cli {
    /// Flat `key = value` file of flags for the subcommand; command-line
    /// flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a directory of .txt files.
    Train(TrainArgs),
    /// Generate verse from a checkpoint.
    Generate(GenerateArgs),
    /// Report validation perplexity of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Document count, token count, vocabulary size and top tokens.
    CorpusStats(CorpusStatsArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Generate(_) => "generate",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::CorpusStats(_) => "corpus-stats",
        }
    }
}

#[derive(Args, Debug)]
struct CorpusFlags {
    /// Directory of .txt corpus files (not searched recursively).
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,

    /// Tokenize into words instead of characters.
    #[arg(long, default_value_t = false)]
    word_level: bool,

    /// Largest vocabulary in word mode (including LINE_BREAK and UNK).
    #[arg(long, default_value_t = 10_000)]
    max_vocab: usize,

    /// Keep harakat instead of stripping them.
    #[arg(long, default_value_t = false)]
    keep_diacritics: bool,

    /// Emit an extra line break for blank lines between verses.
    #[arg(long, default_value_t = false)]
    blank_lines_as_breaks: bool,
}

impl CorpusFlags {
    fn options(&self) -> CorpusOptions {
        CorpusOptions {
            normalize: NormalizeOptions {
                strip_diacritics: !self.keep_diacritics,
            },
            blank_lines_as_breaks: self.blank_lines_as_breaks,
        }
    }

    fn mode(&self) -> TokenMode {
        if self.word_level {
            TokenMode::Word
        } else {
            TokenMode::Char
        }
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusFlags,

    #[arg(long, default_value_t = CellKind::Gru)]
    cell: CellKind,

    #[arg(long, default_value_t = 128)]
    hidden: usize,

    /// Truncated-BPTT window length τ.
    #[arg(long, default_value_t = 64)]
    window: usize,

    /// Window stride [default: the window length, carrying state across windows].
    #[arg(long)]
    stride: Option<usize>,

    #[arg(long, default_value_t = 10)]
    epochs: usize,

    #[arg(long, default_value_t = 0.05)]
    lr: f64,

    /// Learning-rate multiplier applied after every epoch.
    #[arg(long, default_value_t = 1.0)]
    decay: f64,

    /// Global gradient-norm clipping threshold.
    #[arg(long, default_value_t = 5.0)]
    clip: f64,

    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Floating-point width of the training loop: 64 or 32.
    #[arg(long, default_value_t = Precision::F64)]
    precision: Precision,

    /// Fraction of documents held out for validation.
    #[arg(long, default_value_t = 0.05)]
    val_fraction: f64,

    /// Directory for checkpoints and metrics.csv.
    #[arg(long, default_value = "checkpoints", value_name = "DIR")]
    out: PathBuf,

    /// Prompt for the sample logged after every epoch.
    #[arg(long, default_value = "")]
    sample_prompt: String,

    #[arg(long, default_value_t = 120)]
    sample_tokens: usize,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GenerateArgs {
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,

    #[arg(long, default_value = "")]
    prompt: String,

    /// Sampling temperature; below 1e-6 picks the most likely token.
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,

    /// Sample only among the k most likely tokens [default: all].
    #[arg(long)]
    top_k: Option<usize>,

    #[arg(long, default_value_t = 400)]
    max_tokens: usize,

    /// Stop after this many lines [default: no limit].
    #[arg(long)]
    lines: Option<usize>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Require a word-level checkpoint.
    #[arg(long, default_value_t = false)]
    word_level: bool,

    /// Write the text here instead of standard output.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,

    /// Directory of .txt files to evaluate on.
    #[arg(long, value_name = "DIR")]
    corpus: PathBuf,

    /// Require a word-level checkpoint.
    #[arg(long, default_value_t = false)]
    word_level: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GradcheckArgs {
    /// Cell to check: rnn, lstm, gru or all.
    #[arg(long, default_value = "all")]
    cell: String,

    #[arg(long, default_value_t = 4)]
    hidden: usize,

    #[arg(long, default_value_t = 6)]
    vocab: usize,

    #[arg(long, default_value_t = 5)]
    steps: usize,

    #[arg(long, default_value_t = 7)]
    seed: u64,

    /// Random instances per cell; instance i uses seed + i.
    #[arg(long, default_value_t = 1)]
    instances: u64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct CorpusStatsArgs {
    #[command(flatten)]
    corpus: CorpusFlags,

    /// Number of most frequent tokens to list.
    #[arg(long, default_value_t = 20)]
    top: usize,
}

/// Failure classes, mapped to exit codes 1 and 2.
enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<ghazal_forge::Error> for Failure {
    fn from(e: ghazal_forge::Error) -> Self {
        match e {
            ghazal_forge::Error::Config(msg) => Failure::Usage(msg),
            e => Failure::Data(e.into()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match parse_with_config(argv) {
        Ok(cli) => cli,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
        Err(ParseFailure::Config(e)) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Train(args) => train(args),
        Command::Generate(args) => generate_text(args),
        Command::Eval(args) => eval(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::CorpusStats(args) => stats(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

enum ParseFailure {
    Clap(clap::Error),
    Config(anyhow::Error),
}

/// Parses `argv`; when `--config` is given, the file's flags are inserted
/// right after the subcommand name and the result is parsed again.
fn parse_with_config(argv: Vec<OsString>) -> Result<Cli, ParseFailure> {
    let cli = Cli::try_parse_from(&argv).map_err(ParseFailure::Clap)?;
    let Some(path) = &cli.config else {
        return Ok(cli);
    };
    let extra = config_file::load(path).map_err(ParseFailure::Config)?;
    let name = cli.command.name();
    let pos = argv
        .iter()
        .position(|a| a == name)
        .expect("a parsed subcommand appears in argv");
    let mut spliced = argv[..=pos].to_vec();
    spliced.extend(extra.into_iter().map(OsString::from));
    spliced.extend_from_slice(&argv[pos + 1..]);
    Cli::try_parse_from(spliced).map_err(ParseFailure::Clap)
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("GHAZAL_FORGE_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("GHAZAL_FORGE_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn train(args: TrainArgs) -> Outcome {
    let cfg = TrainingConfig {
        cell: args.cell,
        hidden: args.hidden,
        window_len: args.window,
        stride: args.stride,
        epochs: args.epochs,
        optimizer: OptimizerConfig {
            learning_rate: args.lr,
            decay: args.decay,
            clip_norm: args.clip,
        },
        seed: args.seed,
        precision: args.precision,
        token_mode: args.corpus.mode(),
        max_vocab: args.corpus.max_vocab,
        corpus: args.corpus.options(),
        val_fraction: args.val_fraction,
        output_dir: Some(args.out.clone()),
        sample_prompt: args.sample_prompt,
        sample_tokens: args.sample_tokens,
    };
    cfg.validate()?;
    let docs = load_corpus(&args.corpus.corpus, &cfg.corpus)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{CSV_HEADER}").context("writing to standard output")?;
    let report = train_documents(&cfg, &docs, |m| {
        let _ = writeln!(stdout, "{}", m.csv_row());
        let _ = stdout.flush();
    })?;
    if let Some(path) = &report.final_checkpoint_path {
        log::info!("latest checkpoint: {}", path.display());
    }
    if let Some(path) = &report.best_checkpoint_path {
        log::info!("best checkpoint: {}", path.display());
    }
    Ok(())
}

fn load_for_mode(path: &Path, word_level: bool) -> Result<ghazal_forge::trainer::Checkpoint, Failure> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if word_level && ckpt.vocab.mode() != TokenMode::Word {
        return Err(Failure::Usage(format!(
            "--word-level given but {} is a {}-level checkpoint",
            path.display(),
            ckpt.vocab.mode()
        )));
    }
    Ok(ckpt)
}

fn generate_text(args: GenerateArgs) -> Outcome {
    let ckpt = load_for_mode(&args.ckpt, args.word_level)?;
    let cfg = SamplerConfig {
        temperature: args.temperature,
        top_k: args.top_k,
        max_tokens: args.max_tokens,
        max_lines: args.lines,
        seed: args.seed,
        prompt: args.prompt,
    };
    cfg.validate(ckpt.vocab.len())?;
    let text = generate(&ckpt, &cfg)?;
    match &args.out {
        Some(path) => std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).context("writing to standard output")?;
            if !text.ends_with('\n') {
                writeln!(stdout).context("writing to standard output")?;
            }
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Outcome {
    let ckpt = load_for_mode(&args.ckpt, args.word_level)?;
    let blank_lines_as_breaks = ckpt
        .config
        .iter()
        .any(|(k, v)| k == "blank_lines_as_breaks" && v == "true");
    let opts = CorpusOptions {
        normalize: ckpt.vocab.normalization(),
        blank_lines_as_breaks,
    };
    let docs = load_corpus(&args.corpus, &opts)?;
    let ppl = evaluate_perplexity(&ckpt, &docs)?;
    println!("documents {}", docs.len());
    println!("perplexity {ppl}");
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Outcome {
    let cells: Vec<CellKind> = match args.cell.as_str() {
        "all" => CellKind::ALL.to_vec(),
        other => vec![other.parse().map_err(|e: ghazal_forge::Error| Failure::Usage(e.to_string()))?],
    };
    if args.instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()));
    }
    let mut failed = false;
    for kind in cells {
        let mut worst = (0.0f64, "");
        for i in 0..args.instances {
            let check = check_gradients(kind, args.hidden, args.vocab, args.steps, args.seed.wrapping_add(i))?;
            if check.max_relative_error >= worst.0 {
                worst = (check.max_relative_error, check.worst_tensor);
            }
        }
        let pass = worst.0 <= GRADCHECK_TOLERANCE;
        failed |= !pass;
        println!(
            "{:<5} max relative error {:.3e} (worst tensor {}, eps {GRADCHECK_EPS:e}) {}",
            kind.as_str(),
            worst.0,
            worst.1,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failed {
        return Err(Failure::Data(anyhow::anyhow!(
            "gradient check exceeded tolerance {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn stats(args: CorpusStatsArgs) -> Outcome {
    let opts = args.corpus.options();
    let docs = load_corpus(&args.corpus.corpus, &opts)?;
    let vocab = build_vocabulary(&docs, args.corpus.mode(), args.corpus.max_vocab, opts.normalize)?;
    let stream = encode(&docs, &vocab)?;
    let s = corpus_stats(&stream, &vocab, args.top);
    println!("documents {}", s.documents);
    println!("tokens {}", s.tokens);
    println!("vocab_size {}", s.vocab_size);
    for (token, count) in s.top_tokens {
        let shown = match &token {
            Token::Text(t) if t == " " => "<SPACE>".to_string(),
            t => t.to_string(),
        };
        println!("{count}\t{shown}");
    }
    Ok(())
}
