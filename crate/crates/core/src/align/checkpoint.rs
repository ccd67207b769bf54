//! Plain-text checkpoint format.
//!
//! Line 1 is a JSON header (format tag, dimensions, vocabulary length and
//! hash, parameter count); every following line is one parameter value in
//! flat order, printed with Rust's shortest-roundtrip float formatting so
//! save/load is bit-exact. Loading requires the dataset vocabulary and
//! refuses a checkpoint whose vocabulary hash disagrees.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::vocab_sha256;

use super::EncoderParams;

pub const CHECKPOINT_FORMAT: &str = "addrloc-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    feature_dim: usize,
    embed_dim: usize,
    token_dim: usize,
    vocab_len: usize,
    vocab_sha256: String,
    params: usize,
}

/// Writes parameters to a text checkpoint.
pub fn save_checkpoint(path: &Path, p: &EncoderParams) -> Result<()> {
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        feature_dim: p.feature_dim,
        embed_dim: p.embed_dim,
        token_dim: p.token_dim,
        vocab_len: p.vocab.len(),
        vocab_sha256: vocab_sha256(&p.vocab),
        params: p.param_count(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for value in p.flatten() {
        out.push_str(&format!("{value}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint back, verifying it against the vocabulary of the
/// dataset it will be used with.
pub fn load_checkpoint(path: &Path, vocab: &[String]) -> Result<EncoderParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let parse_err = |line: usize, msg: String| Error::Parse {
        file: path.display().to_string(),
        line,
        msg,
    };

    let header_line = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(parse_err(1, format!("unknown checkpoint format {:?}", header.format)));
    }
    let dataset_hash = vocab_sha256(vocab);
    if header.vocab_sha256 != dataset_hash || header.vocab_len != vocab.len() {
        return Err(Error::VocabMismatch {
            checkpoint: header.vocab_sha256,
            dataset: dataset_hash,
        });
    }

    let mut values = Vec::with_capacity(header.params);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: f64 = line
            .trim()
            .parse()
            .map_err(|e| parse_err(i + 2, format!("bad float: {e}")))?;
        values.push(v);
    }
    if values.len() != header.params {
        return Err(parse_err(
            values.len() + 1,
            format!("expected {} parameter lines, found {}", header.params, values.len()),
        ));
    }

    let mut p = EncoderParams {
        feature_dim: header.feature_dim,
        embed_dim: header.embed_dim,
        token_dim: header.token_dim,
        vocab: vocab.to_vec(),
        image_proj: vec![vec![0.0; header.embed_dim]; header.feature_dim],
        image_bias: vec![0.0; header.embed_dim],
        token_table: vec![vec![0.0; header.token_dim]; header.vocab_len],
        text_proj: vec![vec![0.0; header.embed_dim]; header.token_dim],
        text_bias: vec![0.0; header.embed_dim],
        log_temp: 0.0,
    };
    if p.param_count() != header.params {
        return Err(parse_err(1, "header dimensions disagree with parameter count".into()));
    }
    p.assign_from_flat(&values)?;
    Ok(p)
}
