//! Trace-quality evaluation: entailment-based coherence metrics over
//! generated traces, an embedding-similarity score, and a table of
//! previously reported external results bundled for comparison.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, fnv1a64, EmbedError, StepEncoder};
use crate::trace::ReasoningTrace;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("judgment probabilities must be in [0,1] and sum to 1, got ({0}, {1}, {2})")]
    InvalidJudgment(f64, f64, f64),
    #[error("no stored judgment for premise/hypothesis hash pair ({0:#x}, {1:#x})")]
    MissingJudgment(u64, u64),
    #[error("trace sets are not id-aligned: '{left}' vs '{right}' at position {position}")]
    IdMismatch {
        left: String,
        right: String,
        position: usize,
    },
    #[error("trace sets have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cannot evaluate an empty trace set")]
    EmptySet,
    #[error("malformed judgment file at line {line}")]
    MalformedLine { line: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A three-way entailment distribution over (entail, neutral, contradict).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntailmentJudgment {
    pub p_entail: f64,
    pub p_neutral: f64,
    pub p_contradict: f64,
}

impl EntailmentJudgment {
    pub fn new(p_entail: f64, p_neutral: f64, p_contradict: f64) -> Result<Self, EvalError> {
        let j = Self {
            p_entail,
            p_neutral,
            p_contradict,
        };
        j.validate()?;
        Ok(j)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let probs = [self.p_entail, self.p_neutral, self.p_contradict];
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(EvalError::InvalidJudgment(
                self.p_entail,
                self.p_neutral,
                self.p_contradict,
            ));
        }
        Ok(())
    }
}

/// Source of entailment judgments. Implementations may wrap anything from a
/// lexical heuristic to a file of precomputed model outputs.
pub trait EntailmentProvider {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<EntailmentJudgment, EvalError>;
}

/// Heuristic provider: p_entail is the Jaccard overlap of the lowercased
/// token sets, the remainder is neutral, contradiction is never predicted.
/// A weak stand-in, useful for smoke tests and fully offline runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalOverlapProvider;

fn token_set(text: &str) -> std::collections::HashSet<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

impl EntailmentProvider for LexicalOverlapProvider {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<EntailmentJudgment, EvalError> {
        let a = token_set(premise);
        let b = token_set(hypothesis);
        let union = a.union(&b).count();
        let overlap = if union == 0 {
            0.0
        } else {
            a.intersection(&b).count() as f64 / union as f64
        };
        EntailmentJudgment::new(overlap, 1.0 - overlap, 0.0)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JudgmentRow {
    /// FNV-1a 64 hash of the premise text, hex encoded.
    premise_hash: String,
    /// FNV-1a 64 hash of the hypothesis text, hex encoded.
    hypothesis_hash: String,
    p_entail: f64,
    p_neutral: f64,
    p_contradict: f64,
}

/// File-backed provider over precomputed judgments, keyed by text hashes.
/// Lets externally produced entailment model outputs drive the metrics
/// without any model dependency here.
#[derive(Debug, Clone, Default)]
pub struct JudgmentTable {
    entries: HashMap<(u64, u64), EntailmentJudgment>,
}

impl JudgmentTable {
    /// Load from JSON-lines, one judgment per row; blank lines are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let file = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
        let mut entries = HashMap::new();
        for (i, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: JudgmentRow = serde_json::from_str(&line)
                .map_err(|_| EvalError::MalformedLine { line: i + 1 })?;
            let p = u64::from_str_radix(&row.premise_hash, 16)
                .map_err(|_| EvalError::MalformedLine { line: i + 1 })?;
            let h = u64::from_str_radix(&row.hypothesis_hash, 16)
                .map_err(|_| EvalError::MalformedLine { line: i + 1 })?;
            let judgment = EntailmentJudgment::new(row.p_entail, row.p_neutral, row.p_contradict)?;
            entries.insert((p, h), judgment);
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, premise: &str, hypothesis: &str, judgment: EntailmentJudgment) {
        self.entries.insert(
            (fnv1a64(premise.as_bytes()), fnv1a64(hypothesis.as_bytes())),
            judgment,
        );
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        use std::io::Write;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        let mut keys: Vec<&(u64, u64)> = self.entries.keys().collect();
        keys.sort();
        for key in keys {
            let j = &self.entries[key];
            let row = JudgmentRow {
                premise_hash: format!("{:x}", key.0),
                hypothesis_hash: format!("{:x}", key.1),
                p_entail: j.p_entail,
                p_neutral: j.p_neutral,
                p_contradict: j.p_contradict,
            };
            writeln!(
                file,
                "{}",
                serde_json::to_string(&row).expect("row serializes")
            )?;
        }
        Ok(())
    }
}

impl EntailmentProvider for JudgmentTable {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<EntailmentJudgment, EvalError> {
        let key = (fnv1a64(premise.as_bytes()), fnv1a64(hypothesis.as_bytes()));
        self.entries
            .get(&key)
            .copied()
            .ok_or(EvalError::MissingJudgment(key.0, key.1))
    }
}

fn full_response(trace: &ReasoningTrace) -> String {
    trace.steps.join("\n")
}

/// Mean entailment consistency: the mean over traces of p_entail between the
/// query and the full newline-joined response.
pub fn mec(traces: &[ReasoningTrace], provider: &dyn EntailmentProvider) -> Result<f64, EvalError> {
    if traces.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut sum = 0.0;
    for trace in traces {
        sum += provider
            .judge(&trace.query, &full_response(trace))?
            .p_entail;
    }
    Ok(sum / traces.len() as f64)
}

/// Weighted entailment score of one step judgment: full credit for
/// entailment, half credit for neutral, none for contradiction.
pub fn wes_step(judgment: &EntailmentJudgment) -> f64 {
    judgment.p_entail + 0.5 * judgment.p_neutral
}

/// Weighted entailment score of a trace set: for each step, the premise is
/// the query plus all prior steps (newline-joined) and the hypothesis is the
/// step itself; step scores average within a trace, trace scores average
/// across the set. Traces with no steps score zero.
pub fn wes(traces: &[ReasoningTrace], provider: &dyn EntailmentProvider) -> Result<f64, EvalError> {
    if traces.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut total = 0.0;
    for trace in traces {
        if trace.steps.is_empty() {
            continue;
        }
        let mut trace_sum = 0.0;
        let mut premise = trace.query.clone();
        for step in &trace.steps {
            trace_sum += wes_step(&provider.judge(&premise, step)?);
            premise.push('\n');
            premise.push_str(step);
        }
        total += trace_sum / trace.steps.len() as f64;
    }
    Ok(total / traces.len() as f64)
}

/// Cosine similarity of encoder embeddings of two full texts. With the
/// hashed encoder this is a bag-of-character-trigrams similarity; richer
/// encoders plug in through the same trait.
pub fn similarity_score(a: &str, b: &str, encoder: &dyn StepEncoder) -> Result<f64, EvalError> {
    let ea = encoder.encode(a)?;
    let eb = encoder.encode(b)?;
    Ok(cosine(&ea.values, &eb.values))
}

/// Corpus-level metrics of generated traces against id-aligned references.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_traces: usize,
    pub mec: f64,
    pub wes: f64,
    /// Mean embedding-cosine similarity between each generated response and
    /// its reference response.
    pub similarity: f64,
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        serde_json::to_writer_pretty(file, self).map_err(std::io::Error::from)?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        use std::io::Write;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        writeln!(file, "n_traces,mec,wes,similarity")?;
        writeln!(
            file,
            "{},{},{},{}",
            self.n_traces, self.mec, self.wes, self.similarity
        )?;
        Ok(())
    }
}

/// Evaluate generated traces against references with matching ids and order.
pub fn evaluate_corpus(
    generated: &[ReasoningTrace],
    references: &[ReasoningTrace],
    provider: &dyn EntailmentProvider,
    encoder: &dyn StepEncoder,
) -> Result<EvalReport, EvalError> {
    if generated.len() != references.len() {
        return Err(EvalError::LengthMismatch(generated.len(), references.len()));
    }
    if generated.is_empty() {
        return Err(EvalError::EmptySet);
    }
    for (i, (g, r)) in generated.iter().zip(references.iter()).enumerate() {
        if g.id != r.id {
            return Err(EvalError::IdMismatch {
                left: g.id.clone(),
                right: r.id.clone(),
                position: i,
            });
        }
    }
    let mut sim_sum = 0.0;
    for (g, r) in generated.iter().zip(references.iter()) {
        sim_sum += similarity_score(&full_response(g), &full_response(r), encoder)?;
    }
    Ok(EvalReport {
        n_traces: generated.len(),
        mec: mec(generated, provider)?,
        wes: wes(generated, provider)?,
        similarity: sim_sum / generated.len() as f64,
    })
}

/// One previously reported external evaluation row, bundled for comparison.
/// These numbers come from a separate study with model-based scorers and are
/// NOT reproduced by this crate's metrics.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceResult {
    pub system: &'static str,
    pub dataset: &'static str,
    pub mec: f64,
    pub wes: f64,
    pub bert_score: f64,
    pub bleurt: f64,
    /// Always false: these are bundled reference values, never computed here.
    pub reproduced: bool,
}

/// The bundled external comparison table.
pub fn reference_results() -> Vec<ReferenceResult> {
    let row = |system, dataset, mec, wes, bert_score, bleurt| ReferenceResult {
        system,
        dataset,
        mec,
        wes,
        bert_score,
        bleurt,
        reproduced: false,
    };
    vec![
        row("sft-baseline", "gsm8k", 0.13, 0.30, 0.86, 0.46),
        row("sft-baseline", "strategyqa", 0.32, 0.53, 0.81, 0.45),
        row("sft-baseline", "entailmentbank", 0.41, 0.66, 0.83, 0.45),
        row("contrastive-ssl", "gsm8k", 0.16, 0.49, 0.84, 0.50),
        row("contrastive-ssl", "strategyqa", 0.02, 0.33, 0.87, 0.45),
        row("contrastive-ssl", "entailmentbank", 0.44, 0.69, 0.83, 0.55),
        row("pretrained", "gsm8k", 0.30, 0.52, 0.87, 0.54),
        row("pretrained", "strategyqa", 0.16, 0.52, 0.87, 0.50),
        row("pretrained", "entailmentbank", 0.15, 0.54, 0.86, 0.51),
        row("tensor-ppo", "gsm8k", 0.33, 0.54, 0.86, 0.56),
        row("tensor-ppo", "strategyqa", 0.28, 0.55, 0.83, 0.48),
        row("tensor-ppo", "entailmentbank", 0.50, 0.74, 0.84, 0.57),
    ]
}
