//! Corpus ingestion: Urdu text normalization, vocabulary construction,
//! encoding to token indices, and slicing into training windows.
//!
//! A corpus is a directory of UTF-8 `.txt` files, one poem per file and one
//! verse per line. Each file becomes a [`CorpusDocument`]; document ends are
//! hidden-state reset boundaries.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Version of the normalization table below. Recorded in every vocabulary
/// so text normalized differently is never encoded against it.
pub const NORMALIZATION_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormalizeOptions {
    /// Remove harakat (U+064B..=U+0652).
    pub strip_diacritics: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self { strip_diacritics: true }
    }
}

/// [`normalize_urdu_with`] using the default options.
pub fn normalize_urdu(text: &str) -> String {
    normalize_urdu_with(text, &NormalizeOptions::default())
}

/// Normalizes Urdu text line by line:
///
/// 1. NFC composition
/// 2. Arabic → Urdu letter unification (ي→ی, ك→ک, ة→ۃ)
/// 3. tatweel removal
/// 4. optional diacritic stripping
/// 5. whitespace runs collapsed to one space, lines trimmed
///
/// Removing tatweel or marks can leave a base letter next to a combining
/// mark it composes with, so the text is NFC-recomposed once more after
/// steps 3–4; this keeps the function idempotent. Line boundaries are kept
/// (CRLF and CR become LF).
pub fn normalize_urdu_with(text: &str, opts: &NormalizeOptions) -> String {
    let text = text.replace("\r\n", "\n").replace('\r', "\n");
    text.split('\n')
        .map(|line| normalize_line(line, opts))
        .collect::<Vec<_>>()
        .join("\n")
}

fn normalize_line(line: &str, opts: &NormalizeOptions) -> String {
    let mapped: String = line
        .nfc()
        .filter_map(|c| match c {
            '\u{064A}' => Some('\u{06CC}'),
            '\u{0643}' => Some('\u{06A9}'),
            '\u{0629}' => Some('\u{06C3}'),
            '\u{0640}' => None,
            '\u{064B}'..='\u{0652}' if opts.strip_diacritics => None,
            c => Some(c),
        })
        .collect();
    let recomposed: String = mapped.nfc().collect();
    recomposed.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorpusOptions {
    pub normalize: NormalizeOptions,
    /// Keep blank lines between verses as extra line-break tokens.
    pub blank_lines_as_breaks: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusDocument {
    pub source_name: String,
    /// Normalized, non-empty verse lines.
    pub lines: Vec<String>,
    pub raw_char_count: usize,
    /// Indices of lines followed by a blank separator line. Only populated
    /// when [`CorpusOptions::blank_lines_as_breaks`] is set.
    pub stanza_breaks: Vec<usize>,
}

impl CorpusDocument {
    /// Builds a document from raw text, as [`load_corpus`] does for a file.
    /// Returns `None` when nothing is left after normalization.
    pub fn from_text(source_name: impl Into<String>, raw: &str, opts: &CorpusOptions) -> Option<Self> {
        let normalized = normalize_urdu_with(raw, &opts.normalize);
        let mut lines = Vec::new();
        let mut stanza_breaks = Vec::new();
        let mut pending_blank = false;
        for line in normalized.split('\n') {
            if line.is_empty() {
                pending_blank = !lines.is_empty();
                continue;
            }
            if pending_blank && opts.blank_lines_as_breaks {
                stanza_breaks.push(lines.len() - 1);
            }
            pending_blank = false;
            lines.push(line.to_string());
        }
        if lines.is_empty() {
            return None;
        }
        Some(Self {
            source_name: source_name.into(),
            lines,
            raw_char_count: raw.chars().count(),
            stanza_breaks,
        })
    }

    /// The text an encode/decode round trip reproduces: every line ends
    /// with `\n`, and stanza breaks add an empty line.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for (i, line) in self.lines.iter().enumerate() {
            out.push_str(line);
            out.push('\n');
            if self.stanza_breaks.contains(&i) {
                out.push('\n');
            }
        }
        out
    }
}

/// Loads every `.txt` file under `root` (non-recursive), sorted by file
/// name. Files are read and normalized in parallel; whitespace-only files
/// are dropped with a warning.
pub fn load_corpus(root: &Path, opts: &CorpusOptions) -> Result<Vec<CorpusDocument>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("txt")))
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if paths.is_empty() {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }

    let loaded: Vec<Option<CorpusDocument>> = paths
        .par_iter()
        .map(|path| load_document(path, opts))
        .collect::<Result<_>>()?;

    let mut docs = Vec::with_capacity(loaded.len());
    for (doc, path) in loaded.into_iter().zip(&paths) {
        match doc {
            Some(doc) => docs.push(doc),
            None => log::warn!("{}: no text after normalization, skipped", path.display()),
        }
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }
    Ok(docs)
}

fn load_document(path: &Path, opts: &CorpusOptions) -> Result<Option<CorpusDocument>> {
    let bytes = fs::read(path)?;
    let (body, skipped) = match bytes.strip_prefix(b"\xEF\xBB\xBF") {
        Some(rest) => (rest, 3),
        None => (&bytes[..], 0),
    };
    let text = std::str::from_utf8(body).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        offset: e.valid_up_to() + skipped,
    })?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(CorpusDocument::from_text(name, text, opts))
}

/// Holds out the last `fraction` of documents (by sorted name) for
/// validation. Returns `(train, validation)`.
pub fn split_validation(docs: &[CorpusDocument], fraction: f64) -> (Vec<CorpusDocument>, Vec<CorpusDocument>) {
    let held = ((docs.len() as f64) * fraction.clamp(0.0, 1.0)).floor() as usize;
    let held = held.min(docs.len().saturating_sub(1));
    let cut = docs.len() - held;
    (docs[..cut].to_vec(), docs[cut..].to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenMode {
    Char,
    Word,
}

impl TokenMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenMode::Char => "char",
            TokenMode::Word => "word",
        }
    }
}

impl fmt::Display for TokenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenMode::Char),
            "word" => Ok(TokenMode::Word),
            other => Err(Error::Config(format!("unknown tokenizer mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    LineBreak,
    Unk,
    Text(String),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::LineBreak => f.write_str("<LINE_BREAK>"),
            Token::Unk => f.write_str("<UNK>"),
            Token::Text(s) => f.write_str(s),
        }
    }
}

/// Bijection between tokens and dense indices.
///
/// Special tokens come first (`LINE_BREAK` = 0, then `UNK` = 1 in word
/// mode); text tokens follow in descending frequency, ties broken by
/// codepoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    index: HashMap<Token, usize>,
    mode: TokenMode,
    normalization: NormalizeOptions,
    normalization_version: u32,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its serialized token list.
    pub fn from_tokens(
        tokens: Vec<Token>,
        mode: TokenMode,
        normalization: NormalizeOptions,
        normalization_version: u32,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::VocabularyMismatch(format!("duplicate token {t}")));
            }
        }
        if !index.contains_key(&Token::LineBreak) {
            return Err(Error::VocabularyMismatch("LINE_BREAK token missing".into()));
        }
        if index.contains_key(&Token::Unk) != (mode == TokenMode::Word) {
            return Err(Error::VocabularyMismatch("UNK must be present exactly in word mode".into()));
        }
        Ok(Self {
            tokens,
            index,
            mode,
            normalization,
            normalization_version,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, index: usize) -> Option<&Token> {
        self.tokens.get(index)
    }

    pub fn index_of(&self, token: &Token) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn normalization(&self) -> NormalizeOptions {
        self.normalization
    }

    pub fn normalization_version(&self) -> u32 {
        self.normalization_version
    }

    pub fn line_break(&self) -> usize {
        self.index[&Token::LineBreak]
    }

    pub fn unk(&self) -> Option<usize> {
        self.index.get(&Token::Unk).copied()
    }

    /// Fails unless text tokenized with `mode` under `normalization` can be
    /// encoded with this vocabulary.
    pub fn ensure_compatible(&self, mode: TokenMode, normalization: &NormalizeOptions) -> Result<()> {
        if self.mode != mode {
            return Err(Error::VocabularyMismatch(format!(
                "vocabulary is {}-level but {}-level encoding was requested",
                self.mode, mode
            )));
        }
        if self.normalization_version != NORMALIZATION_VERSION {
            return Err(Error::VocabularyMismatch(format!(
                "vocabulary uses normalization v{} but this build uses v{}",
                self.normalization_version, NORMALIZATION_VERSION
            )));
        }
        if self.normalization != *normalization {
            return Err(Error::VocabularyMismatch(format!(
                "vocabulary built with strip_diacritics={}, requested {}",
                self.normalization.strip_diacritics, normalization.strip_diacritics
            )));
        }
        Ok(())
    }

    /// Encodes one normalized line (without its trailing line break).
    pub fn encode_line(&self, line: &str, out: &mut Vec<usize>) -> Result<()> {
        match self.mode {
            TokenMode::Char => {
                for ch in line.chars() {
                    let idx = self
                        .index
                        .get(&Token::Text(ch.to_string()))
                        .ok_or(Error::UnknownChar { ch })?;
                    out.push(*idx);
                }
            }
            TokenMode::Word => {
                let unk = self.unk().expect("word vocabularies carry UNK");
                for word in line.split(' ').filter(|w| !w.is_empty()) {
                    out.push(self.index.get(&Token::Text(word.to_string())).copied().unwrap_or(unk));
                }
            }
        }
        Ok(())
    }

    /// Normalizes `text` with this vocabulary's options and encodes it,
    /// emitting LINE_BREAK between lines (not after the last one).
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        let normalized = normalize_urdu_with(text, &self.normalization);
        let mut out = Vec::new();
        for (i, line) in normalized.split('\n').enumerate() {
            if i > 0 {
                out.push(self.line_break());
            }
            self.encode_line(line, &mut out)?;
        }
        Ok(out)
    }

    pub fn decode(&self, indices: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut line_start = true;
        for &i in indices {
            let token = self.tokens.get(i).ok_or(Error::IndexOutOfRange {
                index: i,
                size: self.tokens.len(),
            })?;
            match token {
                Token::LineBreak => {
                    out.push('\n');
                    line_start = true;
                    continue;
                }
                _ if self.mode == TokenMode::Word && !line_start => out.push(' '),
                _ => {}
            }
            match token {
                Token::Text(s) => out.push_str(s),
                Token::Unk => out.push_str("<UNK>"),
                Token::LineBreak => unreachable!(),
            }
            line_start = false;
        }
        Ok(out)
    }
}

fn document_tokens<'a>(doc: &'a CorpusDocument, mode: TokenMode) -> impl Iterator<Item = String> + 'a {
    doc.lines.iter().flat_map(move |line| -> Box<dyn Iterator<Item = String> + 'a> {
        match mode {
            TokenMode::Char => Box::new(line.chars().map(String::from)),
            TokenMode::Word => Box::new(line.split(' ').filter(|w| !w.is_empty()).map(String::from)),
        }
    })
}

/// Builds the vocabulary of `docs`. Character mode keeps every distinct
/// codepoint; word mode keeps the `max_size − 2` most frequent words and
/// maps the rest to UNK. `normalization` must be the options the documents
/// were normalized with.
pub fn build_vocabulary(
    docs: &[CorpusDocument],
    mode: TokenMode,
    max_size: usize,
    normalization: NormalizeOptions,
) -> Result<Vocabulary> {
    if docs.is_empty() {
        return Err(Error::Empty("build_vocabulary"));
    }
    if mode == TokenMode::Word && max_size < 3 {
        return Err(Error::Config(format!(
            "word vocabularies need room for LINE_BREAK, UNK and one word; max_size = {max_size}"
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in docs {
        for tok in document_tokens(doc, mode) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Empty("build_vocabulary (no text after normalization)"));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens = vec![Token::LineBreak];
    if mode == TokenMode::Word {
        tokens.push(Token::Unk);
        ranked.truncate(max_size - 2);
    }
    tokens.extend(ranked.into_iter().map(|(t, _)| Token::Text(t)));
    Vocabulary::from_tokens(tokens, mode, normalization, NORMALIZATION_VERSION)
}

/// Concatenated token indices of a corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedStream {
    pub indices: Vec<usize>,
    /// Exclusive end position of each document in `indices`.
    pub boundaries: Vec<usize>,
}

impl EncodedStream {
    /// Half-open index ranges of the documents.
    pub fn documents(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        let starts = std::iter::once(0).chain(self.boundaries.iter().copied());
        starts.zip(self.boundaries.iter().copied()).map(|(s, e)| s..e)
    }
}

/// Encodes one document: every line is followed by LINE_BREAK (so the
/// document also ends with one), plus one more at each stanza break.
pub fn encode_document(doc: &CorpusDocument, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let lb = vocab.line_break();
    for (i, line) in doc.lines.iter().enumerate() {
        vocab.encode_line(line, &mut out)?;
        out.push(lb);
        if doc.stanza_breaks.contains(&i) {
            out.push(lb);
        }
    }
    Ok(out)
}

pub fn encode(docs: &[CorpusDocument], vocab: &Vocabulary) -> Result<EncodedStream> {
    let mut indices = Vec::new();
    let mut boundaries = Vec::with_capacity(docs.len());
    for doc in docs {
        indices.extend(encode_document(doc, vocab)?);
        boundaries.push(indices.len());
    }
    Ok(EncodedStream { indices, boundaries })
}

/// One truncated-BPTT window: `targets[t] = inputs[t + 1]` in the stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    /// Stream position of `inputs[0]`.
    pub start: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// The window directly continues the previous one, so the trainer
    /// should start from the previous window's final state instead of
    /// resetting.
    pub carry_state: bool,
}

/// Slices each document into windows of `window_len` inputs, stepping by
/// `stride`. Windows never cross a document boundary. When the stride grid
/// leaves targets at the end of a document uncovered (and `stride ≤
/// window_len`), one extra end-aligned window is added; it starts from a
/// reset state. Documents with fewer than `window_len + 1` tokens yield no
/// windows.
pub fn make_windows(stream: &EncodedStream, window_len: usize, stride: usize) -> Result<Vec<Window>> {
    if window_len < 2 {
        return Err(Error::Config(format!("window length must be at least 2, got {window_len}")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let chained = stride == window_len;
    let mut windows = Vec::new();
    for doc in stream.documents() {
        let n = doc.len();
        if n < window_len + 1 {
            continue;
        }
        let make = |offset: usize, carry_state: bool| {
            let s = doc.start + offset;
            Window {
                start: s,
                inputs: stream.indices[s..s + window_len].to_vec(),
                targets: stream.indices[s + 1..s + window_len + 1].to_vec(),
                carry_state,
            }
        };
        let mut offset = 0;
        let mut last_target_end = 0;
        while offset + window_len < n {
            windows.push(make(offset, chained && offset > 0));
            last_target_end = offset + window_len + 1;
            offset += stride;
        }
        if stride <= window_len && last_target_end < n {
            windows.push(make(n - 1 - window_len, false));
        }
    }
    if windows.is_empty() {
        return Err(Error::NoWindows { needed: window_len + 1 });
    }
    Ok(windows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub documents: usize,
    pub tokens: usize,
    pub vocab_size: usize,
    /// Most frequent tokens with their counts, most frequent first.
    pub top_tokens: Vec<(Token, usize)>,
}

pub fn corpus_stats(stream: &EncodedStream, vocab: &Vocabulary, top: usize) -> CorpusStats {
    let mut counts = vec![0usize; vocab.len()];
    for &i in &stream.indices {
        counts[i] += 1;
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().enumerate().filter(|&(_, c)| c > 0).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    CorpusStats {
        documents: stream.boundaries.len(),
        tokens: stream.indices.len(),
        vocab_size: vocab.len(),
        top_tokens: ranked
            .into_iter()
            .take(top)
            .map(|(i, c)| (vocab.tokens[i].clone(), c))
            .collect(),
    }
}
