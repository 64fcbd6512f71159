//! Single-file checkpoint format.
//!
//! ```text
//! ghazal-forge checkpoint\n
//! key = value\n            (format_version first, then dimensions,
//! ...                       vocabulary metadata, training metadata)
//! token = <LINE_BREAK>\n   (one line per token, in index order; text
//! token = "ب"\n             tokens are JSON string literals)
//! end_header\n
//! [u64 LE element count][f64 LE × count]   per tensor, in the fixed
//!                                           order of ModelParams::tensors
//! [8 bytes]                                 first 8 bytes of SHA-256 over
//!                                           everything before it
//! ```
//!
//! Floats in the header are written with Rust's shortest round-trip
//! formatting, tensors as raw little-endian bits, so a load/save cycle is
//! byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::cells::{CellKind, ModelParams};
use crate::corpus::{NormalizeOptions, Token, TokenMode, Vocabulary};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const MAGIC: &str = "ghazal-forge checkpoint";
const END_HEADER: &str = "end_header";
const CHECKSUM_LEN: usize = 8;

/// Trained parameters together with everything needed to use them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f64>,
    pub vocab: Vocabulary,
    /// Number of completed training epochs.
    pub epoch: usize,
    pub rng_seed: u64,
    /// Echo of the training configuration as ordered `key = value` pairs.
    pub config: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn cell_kind(&self) -> CellKind {
        self.params.kind()
    }

    pub fn hidden_size(&self) -> usize {
        self.params.hidden_size()
    }

    pub fn vocab_size(&self) -> usize {
        self.params.vocab_size()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.params.vocab_size() != self.vocab.len() {
            return Err(Error::VocabularyMismatch(format!(
                "model has {} outputs but vocabulary has {} tokens",
                self.params.vocab_size(),
                self.vocab.len()
            )));
        }
        let mut header = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| header.push_str(&format!("{k} = {v}\n"));
        kv("format_version", &FORMAT_VERSION);
        kv("cell_kind", &self.cell_kind());
        kv("hidden", &self.hidden_size());
        kv("vocab_size", &self.vocab_size());
        kv("token_mode", &self.vocab.mode());
        kv("normalization_version", &self.vocab.normalization_version());
        kv("strip_diacritics", &self.vocab.normalization().strip_diacritics);
        kv("epoch", &self.epoch);
        kv("rng_seed", &self.rng_seed);
        for (k, v) in &self.config {
            if k.contains(['\n', '=']) || v.contains('\n') {
                return Err(Error::Malformed(format!("config entry {k:?} cannot be serialized")));
            }
            kv(&format!("config.{k}"), v);
        }
        for token in self.vocab.tokens() {
            let repr = match token {
                Token::LineBreak => "<LINE_BREAK>".to_string(),
                Token::Unk => "<UNK>".to_string(),
                Token::Text(s) => serde_json::to_string(s).expect("strings always serialize"),
            };
            kv("token", &repr);
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(END_HEADER.as_bytes());
        out.push(b'\n');
        for (_, tensor) in self.params.tensors() {
            out.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
            for x in tensor {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = checksum(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKSUM_LEN {
            return Err(Error::Truncated(format!("{} bytes is shorter than the checksum", bytes.len())));
        }
        let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        let computed = checksum(body);
        if stored != computed {
            return Err(Error::Checksum {
                stored: u64::from_le_bytes(stored.try_into().expect("8 bytes")),
                computed: u64::from_le_bytes(computed),
            });
        }

        let marker = format!("\n{END_HEADER}\n");
        let header_end = find(body, marker.as_bytes()).ok_or_else(|| Error::Truncated("no end of header".into()))?;
        let header = std::str::from_utf8(&body[..header_end])
            .map_err(|e| Error::Malformed(format!("header is not UTF-8: {e}")))?;
        let mut tensor_bytes = &body[header_end + marker.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Malformed("missing magic line".into()));
        }
        let mut fields = Vec::new();
        for line in lines {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Malformed(format!("header line {line:?}")))?;
            fields.push((k, v));
        }
        let field = |name: &str| {
            fields
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Malformed(format!("missing header field {name}")))
        };

        let version: u32 = parse(field("format_version")?, "format_version")?;
        if version > FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let kind: CellKind = field("cell_kind")?.parse()?;
        let hidden: usize = parse(field("hidden")?, "hidden")?;
        let vocab_size: usize = parse(field("vocab_size")?, "vocab_size")?;
        if hidden == 0 || vocab_size == 0 {
            return Err(Error::Malformed("zero model dimension".into()));
        }
        let mode: TokenMode = field("token_mode")?.parse()?;
        let normalization_version: u32 = parse(field("normalization_version")?, "normalization_version")?;
        let strip_diacritics: bool = parse(field("strip_diacritics")?, "strip_diacritics")?;
        let epoch: usize = parse(field("epoch")?, "epoch")?;
        let rng_seed: u64 = parse(field("rng_seed")?, "rng_seed")?;
        let config = fields
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.to_string())))
            .collect();
        let tokens = fields
            .iter()
            .filter(|(k, _)| *k == "token")
            .map(|(_, v)| parse_token(v))
            .collect::<Result<Vec<_>>>()?;
        if tokens.len() != vocab_size {
            return Err(Error::Malformed(format!(
                "header lists {} tokens for vocab_size {vocab_size}",
                tokens.len()
            )));
        }
        let vocab = Vocabulary::from_tokens(tokens, mode, NormalizeOptions { strip_diacritics }, normalization_version)?;

        let mut params = ModelParams::<f64>::zeros(kind, hidden, vocab_size);
        for (name, tensor) in params.tensors_mut() {
            let len = take_u64(&mut tensor_bytes, name)? as usize;
            if len != tensor.len() {
                return Err(Error::Malformed(format!(
                    "tensor {name} has {len} entries, expected {}",
                    tensor.len()
                )));
            }
            for x in tensor.iter_mut() {
                *x = f64::from_bits(take_u64(&mut tensor_bytes, name)?);
            }
        }
        if !tensor_bytes.is_empty() {
            return Err(Error::Malformed(format!("{} trailing bytes after tensors", tensor_bytes.len())));
        }
        if let Some((name, _)) = params.tensors().iter().find(|(_, t)| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::Malformed(format!("tensor {name} holds non-finite values")));
        }
        Ok(Self {
            params,
            vocab,
            epoch,
            rng_seed,
            config,
        })
    }
}

fn checksum(bytes: &[u8]) -> [u8; CHECKSUM_LEN] {
    let digest = Sha256::digest(bytes);
    digest[..CHECKSUM_LEN].try_into().expect("SHA-256 is 32 bytes")
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn parse<T: std::str::FromStr>(value: &str, name: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Malformed(format!("bad value {value:?} for {name}")))
}

fn parse_token(repr: &str) -> Result<Token> {
    match repr {
        "<LINE_BREAK>" => Ok(Token::LineBreak),
        "<UNK>" => Ok(Token::Unk),
        quoted => serde_json::from_str::<String>(quoted)
            .map(Token::Text)
            .map_err(|e| Error::Malformed(format!("token {quoted:?}: {e}"))),
    }
}

fn take_u64(bytes: &mut &[u8], tensor: &str) -> Result<u64> {
    if bytes.len() < 8 {
        return Err(Error::Truncated(format!("tensor {tensor} ends early")));
    }
    let (head, rest) = bytes.split_at(8);
    *bytes = rest;
    Ok(u64::from_le_bytes(head.try_into().expect("8 bytes")))
}

/// Writes `ckpt` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::tests::random_params;
    use crate::corpus::{build_vocabulary, CorpusDocument, CorpusOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(kind: CellKind, mode: TokenMode) -> Checkpoint {
        let doc = CorpusDocument::from_text("a.txt", "دل \"ہے\" غم\nکیا", &CorpusOptions::default()).unwrap();
        let vocab = build_vocabulary(&[doc], mode, 50, NormalizeOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Checkpoint {
            params: random_params(kind, 3, vocab.len(), &mut rng),
            vocab,
            epoch: 7,
            rng_seed: u64::MAX,
            config: vec![("learning_rate".into(), format!("{:?}", 0.1 + 0.2)), ("prompt".into(), "\"دل\"".into())],
        }
    }

    #[test]
    fn round_trip_is_exact_and_idempotent() {
        for kind in CellKind::ALL {
            for mode in [TokenMode::Char, TokenMode::Word] {
                let c = sample(kind, mode);
                let bytes = c.to_bytes().unwrap();
                let back = Checkpoint::from_bytes(&bytes).unwrap();
                assert_eq!(back, c);
                assert_eq!(back.to_bytes().unwrap(), bytes);
            }
        }
    }

    #[test]
    fn any_single_byte_corruption_is_detected() {
        let bytes = sample(CellKind::Gru, TokenMode::Char).to_bytes().unwrap();
        for pos in (0..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x01;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "corruption at {pos} missed");
        }
        let mut bad = bytes.clone();
        let tensor_pos = bytes.len() - 20;
        bad[tensor_pos] ^= 0x80;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum { .. })));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample(CellKind::Rnn, TokenMode::Char).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..5]), Err(Error::Truncated(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let digest = checksum(&body);
        body.extend_from_slice(&digest);
        body
    }

    fn rewrite_header(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
        let body = &bytes[..bytes.len() - CHECKSUM_LEN];
        let pos = find(body, from.as_bytes()).unwrap();
        let mut out = body[..pos].to_vec();
        out.extend_from_slice(to.as_bytes());
        out.extend_from_slice(&body[pos + from.len()..]);
        reseal(out)
    }

    #[test]
    fn newer_format_and_unknown_cells_are_rejected() {
        let bytes = sample(CellKind::Lstm, TokenMode::Char).to_bytes().unwrap();
        let newer = rewrite_header(&bytes, "format_version = 1", "format_version = 2");
        assert!(matches!(
            Checkpoint::from_bytes(&newer),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));
        let odd = rewrite_header(&bytes, "cell_kind = lstm", "cell_kind = esn");
        assert!(matches!(Checkpoint::from_bytes(&odd), Err(Error::UnknownCellKind(_))));
    }

    #[test]
    fn header_is_readable_text() {
        let bytes = sample(CellKind::Gru, TokenMode::Char).to_bytes().unwrap();
        let end = find(&bytes, b"end_header").unwrap();
        let head = std::str::from_utf8(&bytes[..end]).unwrap();
        assert!(head.starts_with("ghazal-forge checkpoint\nformat_version = 1\ncell_kind = gru\n"));
        assert!(head.contains("token = <LINE_BREAK>"));
    }

    #[test]
    fn save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample(CellKind::Gru, TokenMode::Word);
        save_checkpoint(&c, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        save_checkpoint(&loaded, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }

    #[test]
    fn word_checkpoint_refuses_char_encoding() {
        let c = sample(CellKind::Gru, TokenMode::Word);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert!(back
            .vocab
            .ensure_compatible(TokenMode::Char, &NormalizeOptions::default())
            .is_err());
    }
}
