//! A small autoregressive token policy: a context-window softmax model with
//! learned token embeddings. Rich enough for PPO to shape, simple enough for
//! fully analytic gradients.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::peps::{read_exact, read_f64, read_u32, PepsError};
use crate::trace::{ReasoningTrace, TraceCorpus};

/// Beginning-of-sequence token id.
pub const BOS: usize = 0;
/// End-of-sequence token id.
pub const EOS: usize = 1;
/// Step-separator token id.
pub const SEP: usize = 2;
/// Unknown-token id; out-of-vocabulary words map here.
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<bos>", "<eos>", "<sep>", "<unk>"];

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(usize),
    #[error("context list is empty")]
    EmptyContexts,
    #[error("token sequence must start with <bos>")]
    MissingBos,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] PepsError),
    #[error("checkpoint vocab entry is not valid UTF-8")]
    InvalidUtf8,
}

/// Token inventory with reserved control tokens at fixed ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from a corpus: reserved tokens plus the most frequent words
    /// (lowercased, whitespace-split), capped at `max_size` total entries.
    /// Ties break alphabetically so the vocabulary is deterministic.
    pub fn build(corpus: &TraceCorpus, max_size: usize) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut bump = |text: &str| {
            for word in text.to_lowercase().split_whitespace() {
                *counts.entry(word.to_string()).or_default() += 1;
            }
        };
        for trace in &corpus.traces {
            bump(&trace.query);
            for step in &trace.steps {
                bump(step);
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let budget = max_size.saturating_sub(RESERVED.len());
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(budget).map(|(w, _)| w));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        assert!(tokens.len() >= RESERVED.len(), "reserved tokens missing");
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, word: &str) -> usize {
        *self.index.get(word).unwrap_or(&UNK)
    }

    /// Lowercase, whitespace-split, map out-of-vocabulary words to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.to_lowercase()
            .split_whitespace()
            .map(|w| self.id_of(w))
            .collect()
    }

    /// Full token sequence of a trace:
    /// `<bos> query <sep> step1 <sep> step2 <sep> ... <eos>`.
    /// Returns the sequence and the prefix length (everything up to and
    /// including the first `<sep>`), i.e. where generation starts.
    pub fn encode_trace(&self, trace: &ReasoningTrace) -> (Vec<usize>, usize) {
        let mut tokens = vec![BOS];
        tokens.extend(self.tokenize(&trace.query));
        tokens.push(SEP);
        let prefix_len = tokens.len();
        for step in &trace.steps {
            tokens.extend(self.tokenize(step));
            tokens.push(SEP);
        }
        tokens.push(EOS);
        (tokens, prefix_len)
    }
}

/// Parameters of the context-window softmax policy.
///
/// The decoder state for a position is the concatenation of the embeddings
/// of the previous `context_window` tokens (BOS-padded on the left).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub context_window: usize,
    pub embed_dim: usize,
    /// |V| × m learned token embeddings.
    pub token_table: Array2<f64>,
    /// (k·m) × |V| output projection.
    pub output_weights: Array2<f64>,
    /// |V| output bias.
    pub output_bias: Array1<f64>,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, embed_dim: usize, context_window: usize) -> Self {
        Self {
            context_window,
            embed_dim,
            token_table: Array2::zeros((vocab_size, embed_dim)),
            output_weights: Array2::zeros((context_window * embed_dim, vocab_size)),
            output_bias: Array1::zeros(vocab_size),
        }
    }

    /// Small-Gaussian initialization; deterministic under seed.
    pub fn random(vocab_size: usize, embed_dim: usize, context_window: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut params = Self::zeros(vocab_size, embed_dim, context_window);
        params.token_table.mapv_inplace(|_| normal.sample(&mut rng));
        params
            .output_weights
            .mapv_inplace(|_| normal.sample(&mut rng));
        params
    }

    pub fn vocab_size(&self) -> usize {
        self.output_bias.len()
    }

    /// Decoder state: concatenated embeddings of the last k context tokens.
    fn hidden(&self, context: &[usize]) -> Result<Array1<f64>, PolicyError> {
        let k = self.context_window;
        let m = self.embed_dim;
        let mut h = Array1::<f64>::zeros(k * m);
        for slot in 0..k {
            let pos = context.len() as isize - k as isize + slot as isize;
            let token = if pos < 0 { BOS } else { context[pos as usize] };
            if token >= self.vocab_size() {
                return Err(PolicyError::UnknownToken(token));
            }
            h.slice_mut(ndarray::s![slot * m..(slot + 1) * m])
                .assign(&self.token_table.row(token));
        }
        Ok(h)
    }

    /// Window of k context token ids actually used at this position.
    fn window(&self, context: &[usize]) -> Vec<usize> {
        let k = self.context_window;
        (0..k)
            .map(|slot| {
                let pos = context.len() as isize - k as isize + slot as isize;
                if pos < 0 {
                    BOS
                } else {
                    context[pos as usize]
                }
            })
            .collect()
    }
}

/// Gradient with the same shapes as [`PolicyParams`].
#[derive(Debug, Clone)]
pub struct PolicyGrad {
    pub token_table: Array2<f64>,
    pub output_weights: Array2<f64>,
    pub output_bias: Array1<f64>,
}

impl PolicyGrad {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            token_table: Array2::zeros(params.token_table.raw_dim()),
            output_weights: Array2::zeros(params.output_weights.raw_dim()),
            output_bias: Array1::zeros(params.output_bias.raw_dim()),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &PolicyGrad) {
        self.token_table.scaled_add(alpha, &other.token_table);
        self.output_weights.scaled_add(alpha, &other.output_weights);
        self.output_bias.scaled_add(alpha, &other.output_bias);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.token_table.mapv_inplace(|v| v * alpha);
        self.output_weights.mapv_inplace(|v| v * alpha);
        self.output_bias.mapv_inplace(|v| v * alpha);
    }
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut p = logits.mapv(|z| (z - max).exp());
    let sum = p.sum();
    p /= sum;
    p
}

/// Next-token distribution given the raw preceding token sequence.
pub fn next_token_dist(
    params: &PolicyParams,
    context: &[usize],
) -> Result<Array1<f64>, PolicyError> {
    let h = params.hidden(context)?;
    let logits = h.dot(&params.output_weights) + &params.output_bias;
    Ok(softmax(&logits))
}

/// Shared backprop: given d(loss)/d(logits) at one position, accumulate into
/// the parameter gradient.
fn backprop_position(
    params: &PolicyParams,
    grad: &mut PolicyGrad,
    context: &[usize],
    dlogits: &Array1<f64>,
) -> Result<(), PolicyError> {
    let h = params.hidden(context)?;
    let m = params.embed_dim;
    // dW = h ⊗ dlogits, db = dlogits
    for (i, &hi) in h.iter().enumerate() {
        if hi != 0.0 {
            grad.output_weights.row_mut(i).scaled_add(hi, dlogits);
        }
    }
    grad.output_bias.scaled_add(1.0, dlogits);
    // dh = W · dlogits, split across the k embedding slots
    let dh = params.output_weights.dot(dlogits);
    for (slot, token) in params.window(context).iter().enumerate() {
        grad.token_table
            .row_mut(*token)
            .scaled_add(1.0, &dh.slice(ndarray::s![slot * m..(slot + 1) * m]));
    }
    Ok(())
}

/// Σ log π(w_i | context) over positions `scored_from..len`.
pub fn log_prob_from(
    params: &PolicyParams,
    tokens: &[usize],
    scored_from: usize,
) -> Result<f64, PolicyError> {
    if tokens.first() != Some(&BOS) {
        return Err(PolicyError::MissingBos);
    }
    let mut total = 0.0;
    for i in scored_from..tokens.len() {
        let target = tokens[i];
        if target >= params.vocab_size() {
            return Err(PolicyError::UnknownToken(target));
        }
        let p = next_token_dist(params, &tokens[..i])?;
        total += p[target].ln();
    }
    Ok(total)
}

/// Σ log π(w_i | context) over every position after `<bos>`.
pub fn log_prob(params: &PolicyParams, tokens: &[usize]) -> Result<f64, PolicyError> {
    log_prob_from(params, tokens, 1)
}

/// [`log_prob_from`] together with its analytic gradient
/// (∂logp/∂logits = onehot − probs, chained through the linear layers).
pub fn grad_log_prob_from(
    params: &PolicyParams,
    tokens: &[usize],
    scored_from: usize,
) -> Result<(f64, PolicyGrad), PolicyError> {
    if tokens.first() != Some(&BOS) {
        return Err(PolicyError::MissingBos);
    }
    let mut total = 0.0;
    let mut grad = PolicyGrad::zeros_like(params);
    for i in scored_from..tokens.len() {
        let target = tokens[i];
        if target >= params.vocab_size() {
            return Err(PolicyError::UnknownToken(target));
        }
        let context = &tokens[..i];
        let p = next_token_dist(params, context)?;
        total += p[target].ln();
        let mut dlogits = -p;
        dlogits[target] += 1.0;
        backprop_position(params, &mut grad, context, &dlogits)?;
    }
    Ok((total, grad))
}

/// Policy entropy summed over the given contexts:
/// Σ_ctx −Σ_w p(w) log p(w).
pub fn entropy(params: &PolicyParams, contexts: &[Vec<usize>]) -> Result<f64, PolicyError> {
    if contexts.is_empty() {
        return Err(PolicyError::EmptyContexts);
    }
    let mut total = 0.0;
    for ctx in contexts {
        let p = next_token_dist(params, ctx)?;
        total -= p
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| x * x.ln())
            .sum::<f64>();
    }
    Ok(total)
}

/// [`entropy`] with its gradient: dH/dz_j = −p_j (log p_j + H_ctx).
pub fn entropy_and_grad(
    params: &PolicyParams,
    contexts: &[Vec<usize>],
) -> Result<(f64, PolicyGrad), PolicyError> {
    if contexts.is_empty() {
        return Err(PolicyError::EmptyContexts);
    }
    let mut total = 0.0;
    let mut grad = PolicyGrad::zeros_like(params);
    for ctx in contexts {
        let p = next_token_dist(params, ctx)?;
        let h_ctx = -p
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| x * x.ln())
            .sum::<f64>();
        total += h_ctx;
        let dlogits = p.mapv(|pj| {
            if pj > 0.0 {
                -pj * (pj.ln() + h_ctx)
            } else {
                0.0
            }
        });
        backprop_position(params, &mut grad, ctx, &dlogits)?;
    }
    Ok((total, grad))
}

/// Mean over contexts of KL(π_θ ‖ π_ref), clamped at zero against rounding.
pub fn kl_to_reference(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    contexts: &[Vec<usize>],
) -> Result<f64, PolicyError> {
    Ok(kl_and_grad_impl(params, ref_params, contexts, false)?.0)
}

/// [`kl_to_reference`] with its gradient with respect to `params`:
/// dKL/dz_j = p_j (log(p_j/q_j) − KL_ctx), averaged over contexts.
pub fn kl_and_grad(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    contexts: &[Vec<usize>],
) -> Result<(f64, PolicyGrad), PolicyError> {
    let (kl, grad) = kl_and_grad_impl(params, ref_params, contexts, true)?;
    Ok((kl, grad.expect("gradient requested")))
}

fn kl_and_grad_impl(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    contexts: &[Vec<usize>],
    want_grad: bool,
) -> Result<(f64, Option<PolicyGrad>), PolicyError> {
    if contexts.is_empty() {
        return Err(PolicyError::EmptyContexts);
    }
    let inv = 1.0 / contexts.len() as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| PolicyGrad::zeros_like(params));
    for ctx in contexts {
        let p = next_token_dist(params, ctx)?;
        let q = next_token_dist(ref_params, ctx)?;
        let kl_ctx: f64 = p
            .iter()
            .zip(q.iter())
            .filter(|(&pj, _)| pj > 0.0)
            .map(|(&pj, &qj)| pj * (pj / qj).ln())
            .sum();
        total += kl_ctx;
        if let Some(grad) = grad.as_mut() {
            let mut dlogits = Array1::<f64>::zeros(p.len());
            for j in 0..p.len() {
                if p[j] > 0.0 {
                    dlogits[j] = inv * p[j] * ((p[j] / q[j]).ln() - kl_ctx);
                }
            }
            backprop_position(params, grad, ctx, &dlogits)?;
        }
    }
    Ok(((total * inv).max(0.0), grad))
}

/// Teacher-forced negative log likelihood of a gold trace's step tokens,
/// conditioned on the query prefix.
pub fn supervised_nll(
    vocab: &Vocab,
    params: &PolicyParams,
    gold: &ReasoningTrace,
) -> Result<f64, PolicyError> {
    let (tokens, prefix_len) = vocab.encode_trace(gold);
    Ok(-log_prob_from(params, &tokens, prefix_len)?)
}

/// [`supervised_nll`] with its gradient.
pub fn supervised_nll_and_grad(
    vocab: &Vocab,
    params: &PolicyParams,
    gold: &ReasoningTrace,
) -> Result<(f64, PolicyGrad), PolicyError> {
    let (tokens, prefix_len) = vocab.encode_trace(gold);
    let (logp, mut grad) = grad_log_prob_from(params, &tokens, prefix_len)?;
    grad.scale(-1.0);
    Ok((-logp, grad))
}

/// A trace sampled from the policy, with exact per-token log-probabilities.
#[derive(Debug, Clone)]
pub struct SampledTrace {
    /// Full token sequence: prefix (`<bos> query <sep>`) plus generated tokens.
    pub tokens: Vec<usize>,
    /// Length of the conditioning prefix; generation starts here.
    pub prefix_len: usize,
    /// Log-probability of each generated token, in order.
    pub per_token_logprob: Vec<f64>,
    /// Positions of `<sep>` tokens within the generated region.
    pub step_boundaries: Vec<usize>,
    /// Generated tokens rendered back into a trace; steps may be empty when
    /// the policy emitted no separator-delimited content.
    pub rendered: ReasoningTrace,
}

impl SampledTrace {
    /// Sum of recorded per-token log-probabilities.
    pub fn total_logprob(&self) -> f64 {
        self.per_token_logprob.iter().sum()
    }

    /// Generated content tokens (separators and terminals excluded); the
    /// token stream the novelty reward is computed over.
    pub fn step_tokens(&self) -> Vec<usize> {
        self.tokens[self.prefix_len..]
            .iter()
            .copied()
            .filter(|&t| t != SEP && t != EOS && t != BOS)
            .collect()
    }

    /// Context windows of every generated position, for entropy/KL terms.
    pub fn contexts(&self) -> Vec<Vec<usize>> {
        (self.prefix_len..self.tokens.len())
            .map(|i| self.tokens[..i].to_vec())
            .collect()
    }
}

/// Autoregressive multinomial sampling conditioned on a query.
///
/// Stops at `<eos>` or after `max_tokens` generated tokens; deterministic
/// under the RNG seed.
pub fn sample_trace(
    vocab: &Vocab,
    params: &PolicyParams,
    query: &str,
    max_tokens: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampledTrace, PolicyError> {
    assert!(max_tokens >= 2, "max_tokens must be at least 2");
    let mut tokens = vec![BOS];
    tokens.extend(vocab.tokenize(query));
    tokens.push(SEP);
    let prefix_len = tokens.len();

    let mut per_token_logprob = Vec::new();
    let mut step_boundaries = Vec::new();
    loop {
        let p = next_token_dist(params, &tokens)?;
        let draw: f64 = rng.gen();
        let mut cum = 0.0;
        let mut picked = p.len() - 1;
        for (j, &pj) in p.iter().enumerate() {
            cum += pj;
            if draw < cum {
                picked = j;
                break;
            }
        }
        per_token_logprob.push(p[picked].ln());
        if picked == SEP {
            step_boundaries.push(tokens.len());
        }
        tokens.push(picked);
        if picked == EOS || per_token_logprob.len() >= max_tokens {
            break;
        }
    }

    // Render generated tokens into step texts, splitting on separators.
    let mut steps = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for &tok in &tokens[prefix_len..] {
        match tok {
            SEP | EOS => {
                if !current.is_empty() {
                    steps.push(current.join(" "));
                    current.clear();
                }
            }
            _ => current.push(vocab.token(tok)),
        }
    }
    if !current.is_empty() {
        steps.push(current.join(" "));
    }
    let rendered = ReasoningTrace {
        id: "sampled".to_string(),
        query: query.to_string(),
        steps,
        gold_answer: None,
    };
    Ok(SampledTrace {
        tokens,
        prefix_len,
        per_token_logprob,
        step_boundaries,
        rendered,
    })
}

const POLICY_MAGIC: &[u8; 8] = b"PEPSPOLI";
const POLICY_VERSION: u32 = 1;

/// Bit-exact policy checkpoint: header {|V|, m, k, version}, vocab list,
/// then row-major little-endian f64 parameter blocks.
pub fn save_policy(
    path: impl AsRef<Path>,
    vocab: &Vocab,
    params: &PolicyParams,
) -> Result<(), PolicyError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    file.write_all(POLICY_MAGIC)?;
    file.write_all(&POLICY_VERSION.to_le_bytes())?;
    file.write_all(&(vocab.size() as u32).to_le_bytes())?;
    file.write_all(&(params.embed_dim as u32).to_le_bytes())?;
    file.write_all(&(params.context_window as u32).to_le_bytes())?;
    for token in vocab.tokens() {
        let bytes = token.as_bytes();
        file.write_all(&(bytes.len() as u32).to_le_bytes())?;
        file.write_all(bytes)?;
    }
    for block in [
        params.token_table.as_slice().expect("contiguous"),
        params.output_weights.as_slice().expect("contiguous"),
    ] {
        for v in block {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    for v in params.output_bias.iter() {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_policy`].
pub fn load_policy(path: impl AsRef<Path>) -> Result<(Vocab, PolicyParams), PolicyError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut magic = [0u8; 8];
    read_exact(&mut file, &mut magic)?;
    if &magic != POLICY_MAGIC {
        return Err(PepsError::BadMagic.into());
    }
    let version = read_u32(&mut file)?;
    if version != POLICY_VERSION {
        return Err(PepsError::BadVersion(version).into());
    }
    let vocab_size = read_u32(&mut file)? as usize;
    let embed_dim = read_u32(&mut file)? as usize;
    let context_window = read_u32(&mut file)? as usize;
    let mut tokens = Vec::with_capacity(vocab_size);
    for _ in 0..vocab_size {
        let len = read_u32(&mut file)? as usize;
        let mut buf = vec![0u8; len];
        read_exact(&mut file, &mut buf)?;
        tokens.push(String::from_utf8(buf).map_err(|_| PolicyError::InvalidUtf8)?);
    }
    let vocab = Vocab::from_tokens(tokens);
    let mut params = PolicyParams::zeros(vocab_size, embed_dim, context_window);
    for v in params.token_table.iter_mut() {
        *v = read_f64(&mut file)?;
    }
    for v in params.output_weights.iter_mut() {
        *v = read_f64(&mut file)?;
    }
    for v in params.output_bias.iter_mut() {
        *v = read_f64(&mut file)?;
    }
    Ok((vocab, params))
}
