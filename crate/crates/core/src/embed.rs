//! Step encoders: a deterministic signed hashed-trigram encoder and a
//! file-backed table of precomputed embeddings. Every produced vector is
//! unit ℓ2 norm.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array1;
use serde::Deserialize;
use thiserror::Error;

use crate::trace::ReasoningTrace;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("step text is empty after trimming")]
    EmptyStep,
    #[error("step {index}: {source}")]
    AtStep {
        index: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error("embedding dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),
    #[error("line {line}: vector has {got} entries, expected {want}")]
    DimensionMismatch {
        line: usize,
        got: usize,
        want: usize,
    },
    #[error("line {line}: non-finite entry in vector")]
    NonFinite { line: usize },
    #[error("line {line}: duplicate text key '{text}'")]
    DuplicateText { line: usize, text: String },
    #[error("line {line}: malformed JSON: {source}")]
    MalformedLine {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("no embedding stored for text '{0}'")]
    MissingText(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Unit-norm real vector representing one reasoning step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEmbedding {
    pub values: Array1<f64>,
}

impl StepEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Ordered list of step embeddings; the lazy factor form of the trace tensor.
#[derive(Debug, Clone)]
pub struct TraceEmbedding {
    pub steps: Vec<StepEmbedding>,
}

impl TraceEmbedding {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.steps.first().map_or(0, StepEmbedding::dim)
    }
}

/// Maps step text to a unit-norm embedding of fixed dimension.
pub trait StepEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<StepEmbedding, EmbedError>;
}

/// 64-bit FNV-1a. Fixed basis and prime so hashed features are stable across
/// platforms and runs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Signed hashed character-trigram encoder.
///
/// Lowercases, whitespace-tokenizes, pads each token with boundary markers,
/// hashes every character trigram into one of `dim` buckets with a ±1 sign,
/// and ℓ2-normalizes the accumulated counts.
#[derive(Debug, Clone)]
pub struct HashedEncoder {
    dim: usize,
    word_weight: f64,
}

impl HashedEncoder {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim < 2 {
            return Err(EmbedError::DimensionTooSmall(dim));
        }
        Ok(Self {
            dim,
            word_weight: 0.0,
        })
    }

    /// Also hash each whole token as a feature with the given weight.
    /// Exact token matches (numbers especially) then contribute a sharper
    /// overlap signal than trigrams alone.
    pub fn with_word_features(dim: usize, word_weight: f64) -> Result<Self, EmbedError> {
        let mut enc = Self::new(dim)?;
        enc.word_weight = word_weight;
        Ok(enc)
    }

    /// Character trigrams of a token padded with `^` and `$` markers.
    fn trigrams(token: &str) -> impl Iterator<Item = String> + '_ {
        let padded: Vec<char> = std::iter::once('^')
            .chain(token.chars())
            .chain(std::iter::once('$'))
            .collect();
        (0..padded.len().saturating_sub(2))
            .map(move |i| padded[i..i + 3].iter().collect::<String>())
    }

    fn accumulate(&self, text: &str, flip_first: bool) -> Array1<f64> {
        let mut values = Array1::<f64>::zeros(self.dim);
        let mut first = true;
        let mut add = |feature: &[u8], weight: f64, first: &mut bool| {
            let h = fnv1a64(feature);
            let bucket = (h % self.dim as u64) as usize;
            let mut sign = if h & (1 << 63) != 0 { -1.0 } else { 1.0 };
            if *first && flip_first {
                sign = -sign;
            }
            *first = false;
            values[bucket] += sign * weight;
        };
        for token in text.to_lowercase().split_whitespace() {
            for trigram in Self::trigrams(token) {
                add(trigram.as_bytes(), 1.0, &mut first);
            }
            if self.word_weight > 0.0 {
                add(token.as_bytes(), self.word_weight, &mut first);
            }
        }
        values
    }
}

impl StepEncoder for HashedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<StepEmbedding, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyStep);
        }
        let mut values = self.accumulate(text, false);
        let mut norm = values.dot(&values).sqrt();
        if norm == 0.0 {
            // All bucket counts cancelled; flip the first trigram's sign and
            // renormalize instead of failing mid-batch.
            values = self.accumulate(text, true);
            norm = values.dot(&values).sqrt();
        }
        values /= norm;
        Ok(StepEmbedding { values })
    }
}

/// Apply an encoder to every step of a trace, preserving order.
pub fn embed_trace(
    trace: &ReasoningTrace,
    encoder: &dyn StepEncoder,
) -> Result<TraceEmbedding, EmbedError> {
    let steps = trace
        .steps
        .iter()
        .enumerate()
        .map(|(index, step)| {
            encoder.encode(step).map_err(|source| EmbedError::AtStep {
                index,
                source: Box::new(source),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TraceEmbedding { steps })
}

#[derive(Deserialize)]
struct TableRecord {
    text: String,
    vector: Vec<f64>,
}

/// Exact-string lookup table of externally computed embeddings.
///
/// Vectors are renormalized to unit ℓ2 norm on load.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    entries: BTreeMap<String, StepEmbedding>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Load a table from JSONL records `{"text": str, "vector": [float; d]}`.
pub fn load_embedding_table(
    path: impl AsRef<Path>,
    dim: usize,
) -> Result<EmbeddingTable, EmbedError> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut entries = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let record: TableRecord =
            serde_json::from_str(&line).map_err(|source| EmbedError::MalformedLine {
                line: line_no,
                source,
            })?;
        if record.vector.len() != dim {
            return Err(EmbedError::DimensionMismatch {
                line: line_no,
                got: record.vector.len(),
                want: dim,
            });
        }
        if record.vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite { line: line_no });
        }
        let mut values = Array1::from(record.vector);
        let norm = values.dot(&values).sqrt();
        if norm == 0.0 {
            return Err(EmbedError::NonFinite { line: line_no });
        }
        values /= norm;
        if entries
            .insert(record.text.clone(), StepEmbedding { values })
            .is_some()
        {
            return Err(EmbedError::DuplicateText {
                line: line_no,
                text: record.text,
            });
        }
    }
    Ok(EmbeddingTable { entries, dim })
}

impl StepEncoder for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<StepEmbedding, EmbedError> {
        self.entries
            .get(text)
            .cloned()
            .ok_or_else(|| EmbedError::MissingText(text.to_string()))
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::collections::HashSet;
    use std::io::Write as _;

    #[test]
    fn embeddings_are_unit_norm() {
        let enc = HashedEncoder::new(384).unwrap();
        let e = enc.encode("add 2 and 3").unwrap();
        assert_abs_diff_eq!(e.values.dot(&e.values).sqrt(), 1.0, epsilon = 1e-9);
        assert!(e.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoding_is_deterministic() {
        let enc = HashedEncoder::new(64).unwrap();
        let a = enc.encode("the total is 5").unwrap();
        let b = enc.encode("the total is 5").unwrap();
        assert_eq!(a.values.as_slice().unwrap(), b.values.as_slice().unwrap());
    }

    #[test]
    fn empty_step_rejected() {
        let enc = HashedEncoder::new(16).unwrap();
        assert!(matches!(enc.encode("   "), Err(EmbedError::EmptyStep)));
        assert!(matches!(
            HashedEncoder::new(1),
            Err(EmbedError::DimensionTooSmall(1))
        ));
    }

    /// Shared-trigram oracle: count trigram overlap directly and check the
    /// cosine ordering agrees on a fixed triple.
    #[test]
    fn cosine_tracks_trigram_overlap() {
        fn trigram_set(text: &str) -> HashSet<String> {
            text.to_lowercase()
                .split_whitespace()
                .flat_map(HashedEncoder::trigrams)
                .collect()
        }
        let a = "the total is 5";
        let b = "the total is 5 now";
        let c = "zebra purple quantum";
        let ab = trigram_set(a).intersection(&trigram_set(b)).count();
        let ac = trigram_set(a).intersection(&trigram_set(c)).count();
        assert!(ab > ac, "oracle precondition: {ab} <= {ac}");

        let enc = HashedEncoder::new(384).unwrap();
        let ea = enc.encode(a).unwrap();
        let eb = enc.encode(b).unwrap();
        let ec = enc.encode(c).unwrap();
        assert!(cosine(&ea.values, &eb.values) > cosine(&ea.values, &ec.values));
    }

    #[test]
    fn word_features_sharpen_exact_token_overlap() {
        // Two steps sharing only the token "15": whole-token features add
        // shared mass on top of the shared trigrams, so cosine rises.
        let tri = HashedEncoder::new(384).unwrap();
        let word = HashedEncoder::with_word_features(384, 2.0).unwrap();
        let cos_of = |enc: &HashedEncoder| {
            let a = enc.encode("alpha 15").unwrap();
            let b = enc.encode("beta 15").unwrap();
            cosine(&a.values, &b.values)
        };
        assert!(cos_of(&word) > cos_of(&tri));

        let e = word.encode("alpha 15").unwrap();
        assert_abs_diff_eq!(e.values.dot(&e.values).sqrt(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn embed_trace_preserves_order_and_length() {
        let trace = ReasoningTrace {
            id: "t".into(),
            query: "q".into(),
            steps: vec!["one".into(), "two".into(), "three".into()],
            gold_answer: None,
        };
        let enc = HashedEncoder::new(32).unwrap();
        let psi = embed_trace(&trace, &enc).unwrap();
        assert_eq!(psi.len(), 3);

        let mut permuted = trace.clone();
        permuted.steps.swap(0, 2);
        let psi_p = embed_trace(&permuted, &enc).unwrap();
        assert_eq!(psi.steps[0], psi_p.steps[2]);
        assert_eq!(psi.steps[2], psi_p.steps[0]);
    }

    #[test]
    fn embed_trace_reports_failing_index() {
        let trace = ReasoningTrace {
            id: "t".into(),
            query: "q".into(),
            steps: vec!["one".into(), "two".into(), "three".into()],
            gold_answer: None,
        };
        // A table that only knows two of the three steps.
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"text":"one","vector":[1.0,0.0]}}"#).unwrap();
        writeln!(f, r#"{{"text":"three","vector":[0.0,1.0]}}"#).unwrap();
        let table = load_embedding_table(f.path(), 2).unwrap();
        match embed_trace(&trace, &table) {
            Err(EmbedError::AtStep { index: 1, .. }) => {}
            other => panic!("expected failure at step 1, got {other:?}"),
        }
    }

    #[test]
    fn table_loads_and_renormalizes() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"text":"a","vector":[2.0,0.0]}}"#).unwrap();
        writeln!(f, r#"{{"text":"b","vector":[0.0,-3.0]}}"#).unwrap();
        let table = load_embedding_table(f.path(), 2).unwrap();
        assert_eq!(table.len(), 2);
        let a = table.encode("a").unwrap();
        assert_abs_diff_eq!(a.values[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn table_rejects_bad_records() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"text":"a","vector":[1.0]}}"#).unwrap();
        assert!(matches!(
            load_embedding_table(f.path(), 2),
            Err(EmbedError::DimensionMismatch {
                line: 1,
                got: 1,
                want: 2
            })
        ));

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"text":"a","vector":[1.0,0.0]}}"#).unwrap();
        writeln!(f, r#"{{"text":"a","vector":[0.0,1.0]}}"#).unwrap();
        assert!(matches!(
            load_embedding_table(f.path(), 2),
            Err(EmbedError::DuplicateText { line: 2, .. })
        ));
    }
}
