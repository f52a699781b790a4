//! Text encoding for semantic priors.
//!
//! The deployment-grade path is a precomputed prior matrix produced offline
//! by a large language model and loaded from a small text file. The built-in
//! fallback is a deterministic hashed bag-of-words encoder: each token hashes
//! to a fixed unit vector, and a text encodes to the mean of its token
//! vectors. It carries no pretrained semantics but it is stable, seedable,
//! and preserves the geometry the rest of the pipeline needs (identical
//! texts agree, shared words attract).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tape::Mat;

pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn name(&self) -> &str;
    /// One vector per whitespace-separated token (punctuation stripped,
    /// case-folded). Empty tokens are skipped.
    fn encode_tokens(&self, text: &str) -> Vec<Vec<f64>>;

    /// Mean-pooled text encoding.
    fn encode(&self, text: &str) -> Vec<f64> {
        let tokens = self.encode_tokens(text);
        let mut out = vec![0.0; self.dim()];
        if tokens.is_empty() {
            return out;
        }
        for tok in &tokens {
            for (o, v) in out.iter_mut().zip(tok) {
                *o += v;
            }
        }
        let n = tokens.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Deterministic fallback encoder: FNV-1a word hash seeds a per-word RNG
/// that draws a unit vector.
pub struct HashedBowEncoder {
    dim: usize,
    seed: u64,
    name: String,
}

impl HashedBowEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashedBowEncoder {
            dim,
            seed,
            name: format!("hashed-bow-v1-d{dim}-s{seed}"),
        }
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(word.as_bytes()));
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn clean_word(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(|c| c.to_lowercase())
        .collect()
}

impl TextEncoder for HashedBowEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn encode_tokens(&self, text: &str) -> Vec<Vec<f64>> {
        text.split_whitespace()
            .map(clean_word)
            .filter(|w| !w.is_empty())
            .map(|w| self.word_vector(&w))
            .collect()
    }
}

/// Encode a list of texts into a `len x dim` matrix of mean-pooled vectors.
pub fn encode_texts(encoder: &dyn TextEncoder, texts: &[&str]) -> Mat {
    let mut out = Array2::zeros((texts.len(), encoder.dim()));
    for (i, text) in texts.iter().enumerate() {
        for (j, v) in encoder.encode(text).into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

/// Textual prior-matrix format:
///
/// ```text
/// # encoder: <name>
/// # rows: <k> cols: <d>
/// <d whitespace-separated floats>   (k lines)
/// ```
pub fn save_prior_matrix(path: &Path, encoder_name: &str, matrix: &Mat) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# encoder: {encoder_name}\n"));
    out.push_str(&format!("# rows: {} cols: {}\n", matrix.nrows(), matrix.ncols()));
    for row in matrix.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load a prior matrix, checking the row count against `expected_rows`
/// (the number of experts it must cover). Returns the encoder name recorded
/// in the header and the matrix.
pub fn load_prior_matrix(path: &Path, expected_rows: usize) -> Result<(String, Mat)> {
    let text = fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = text.lines().enumerate();

    let encoder_name = match lines.next() {
        Some((_, l)) if l.starts_with("# encoder:") => l["# encoder:".len()..].trim().to_string(),
        _ => {
            return Err(Error::Parse {
                path: pstr,
                line: 1,
                field: "header".into(),
                msg: "expected `# encoder: <name>`".into(),
            })
        }
    };
    let (rows, cols) = match lines.next() {
        Some((_, l)) if l.starts_with("# rows:") => {
            let rest = &l["# rows:".len()..];
            let parts: Vec<&str> = rest.split("cols:").collect();
            let parse = |s: &str, field: &str| -> Result<usize> {
                s.trim().parse().map_err(|_| Error::Parse {
                    path: pstr.clone(),
                    line: 2,
                    field: field.into(),
                    msg: format!("cannot parse `{}`", s.trim()),
                })
            };
            if parts.len() != 2 {
                return Err(Error::Parse {
                    path: pstr,
                    line: 2,
                    field: "header".into(),
                    msg: "expected `# rows: <k> cols: <d>`".into(),
                });
            }
            (parse(parts[0], "rows")?, parse(parts[1], "cols")?)
        }
        _ => {
            return Err(Error::Parse {
                path: pstr,
                line: 2,
                field: "header".into(),
                msg: "expected `# rows: <k> cols: <d>`".into(),
            })
        }
    };
    if rows != expected_rows {
        return Err(Error::config(format!(
            "{pstr}: prior matrix has {rows} rows but {expected_rows} experts need priors"
        )));
    }
    let mut matrix = Array2::zeros((rows, cols));
    let mut filled = 0usize;
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if filled >= rows {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                field: "matrix".into(),
                msg: format!("more than {rows} data rows"),
            });
        }
        let values: Vec<&str> = raw.split_whitespace().collect();
        if values.len() != cols {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                field: "matrix".into(),
                msg: format!("expected {cols} values, got {}", values.len()),
            });
        }
        for (j, v) in values.iter().enumerate() {
            matrix[(filled, j)] = v.parse().map_err(|_| Error::Parse {
                path: pstr.clone(),
                line: line_no,
                field: format!("col {j}"),
                msg: format!("cannot parse `{v}`"),
            })?;
        }
        filled += 1;
    }
    if filled != rows {
        return Err(Error::data(format!(
            "{pstr}: expected {rows} data rows, got {filled}"
        )));
    }
    Ok((encoder_name, matrix))
}
