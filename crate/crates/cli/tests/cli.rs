use std::path::Path;
use std::process::{Command, Output};

const VERSES: &[&str] = &[
    "دل ناداں تجھے ہوا کیا ہے\nآخر اس درد کی دوا کیا ہے\n",
    "ہم ہیں مشتاق اور وہ بیزار\nیا الٰہی یہ ماجرا کیا ہے\n",
    "میں بھی منہ میں زبان رکھتا ہوں\nکاش پوچھو کہ مدعا کیا ہے\n",
    "جب کہ تجھ بن نہیں کوئی موجود\nپھر یہ ہنگامہ اے خدا کیا ہے\n",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghazal-forge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_corpus(dir: &Path) {
    for (i, text) in VERSES.iter().enumerate() {
        std::fs::write(dir.join(format!("{i}.txt")), text.repeat(3)).unwrap();
    }
}

fn train_small(corpus: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--hidden",
        "8",
        "--window",
        "16",
        "--epochs",
        "2",
        "--val-fraction",
        "0.25",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn train_generate_eval_round() {
    let corpus = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_corpus(corpus.path());

    let o = train_small(corpus.path(), out.path(), &["--cell", "lstm"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = stdout(&o);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,train_loss,val_ppl,grad_norm_mean,grad_norm_max,clip_count,seconds")
    );
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].split(',').count(), 7);
    let ckpt = out.path().join("latest.ckpt");
    assert!(ckpt.exists() && out.path().join("best.ckpt").exists());
    let ckpt = ckpt.to_str().unwrap();

    let gen = |seed: &str| run(&["generate", "--ckpt", ckpt, "--temperature", "0.8", "--lines", "4", "--seed", seed]);
    let a = gen("3");
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(stdout(&a).lines().count() <= 4);
    assert_eq!(stdout(&a), stdout(&gen("3")));

    let e = run(&["eval", "--ckpt", ckpt, "--corpus", corpus.path().to_str().unwrap()]);
    assert_eq!(e.status.code(), Some(0));
    let ppl: f64 = stdout(&e)
        .lines()
        .find_map(|l| l.strip_prefix("perplexity "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(ppl >= 1.0);

    let conflict = run(&["generate", "--ckpt", ckpt, "--word-level"]);
    assert_eq!(conflict.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&conflict.stderr).contains("char-level"));

    let unknown = run(&["generate", "--ckpt", ckpt, "--prompt", "xyz"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("U+0078"));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let corpus = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_corpus(corpus.path());
    let cfg = out.path().join("run.conf");
    std::fs::write(&cfg, "# small run\nepochs = 5\ncell = rnn\nhidden = 6\n").unwrap();
    let o = train_small(corpus.path(), out.path(), &["--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    // --epochs 2 on the command line beats epochs = 5 in the file
    assert_eq!(stdout(&o).lines().count(), 3);
    let header = std::fs::read(out.path().join("latest.ckpt")).unwrap();
    let header = String::from_utf8_lossy(&header[..200]);
    assert!(header.contains("cell_kind = rnn") && header.contains("hidden = 8"));

    std::fs::write(&cfg, "no_such_flag = 1\n").unwrap();
    let bad = train_small(corpus.path(), out.path(), &["--config", cfg.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_every_cell() {
    let o = run(&["gradcheck", "--hidden", "4", "--vocab", "6", "--steps", "5", "--seed", "7"]);
    let out = stdout(&o);
    for cell in ["rnn", "lstm", "gru"] {
        assert!(out.lines().any(|l| l.starts_with(cell) && l.ends_with("PASS")), "{out}");
    }
    assert_eq!(o.status.code(), Some(0));
    let one = run(&["gradcheck", "--cell", "lstm", "--hidden", "4", "--vocab", "6", "--steps", "5", "--seed", "7"]);
    assert_eq!(stdout(&one).lines().count(), 1);
}

#[test]
fn corpus_stats_lists_top_tokens() {
    let corpus = tempfile::tempdir().unwrap();
    write_corpus(corpus.path());
    let o = run(&["corpus-stats", "--corpus", corpus.path().to_str().unwrap(), "--top", "5"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("documents 4\ntokens "));
    assert_eq!(out.lines().count(), 3 + 5);
    let words = run(&["corpus-stats", "--corpus", corpus.path().to_str().unwrap(), "--word-level"]);
    assert!(stdout(&words).contains("\tکیا"));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["generate", "--ckpt", "x", "--temperature", "0"]).status.code(), Some(2));
    assert_eq!(run(&["gradcheck", "--cell", "esn"]).status.code(), Some(1));
    let empty = tempfile::tempdir().unwrap();
    let o = run(&["corpus-stats", "--corpus", empty.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
    let corpus = tempfile::tempdir().unwrap();
    write_corpus(corpus.path());
    let o = train_small(corpus.path(), empty.path(), &["--epochs", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let help = run(&["train", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = stdout(&help);
    for default in ["[default: 128]", "[default: 64]", "[default: 0.05]", "[default: 5]", "[default: gru]"] {
        assert!(text.contains(default), "{default} missing from help");
    }
}
