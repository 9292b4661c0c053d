//! Stage 2: PPO-style fine-tuning of the token policy against a composite
//! reward of tensor-scored coherence and n-gram novelty, with entropy bonus,
//! KL regularization toward the frozen starting policy, and a supervised
//! anchor on gold traces.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::embed::{embed_trace, EmbedError, StepEncoder};
use crate::optim::Adam;
use crate::peps::{log_fidelity, FidelityConfig, PepsError, PepsTensor};
use crate::policy::{
    entropy_and_grad, grad_log_prob_from, kl_and_grad, sample_trace, supervised_nll_and_grad,
    PolicyError, PolicyGrad, PolicyParams, Vocab,
};
use crate::trace::TraceCorpus;

#[derive(Debug, Error)]
pub enum RlError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Peps(#[from] PepsError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("reward weights must sum to 1, got {0}")]
    BadRewardWeights(f64),
    #[error("trace of {len} tokens is shorter than the n-gram size {n}")]
    ShortTrace { len: usize, n: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Weights of the composite reward R = λ_f·logF + λ_r·novelty.
#[derive(Debug, Clone, Copy)]
pub struct RewardConfig {
    pub lambda_fidelity: f64,
    pub lambda_novelty: f64,
    /// n-gram size of the novelty term.
    pub ngram_n: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_fidelity: 0.8,
            lambda_novelty: 0.2,
            ngram_n: 3,
        }
    }
}

impl RewardConfig {
    /// The two weights are a convex combination; reject anything else.
    pub fn validate(&self) -> Result<(), RlError> {
        let sum = self.lambda_fidelity + self.lambda_novelty;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(RlError::BadRewardWeights(sum));
        }
        Ok(())
    }
}

/// Distinct n-grams over total n-gram positions: |{grams}| / (L − n + 1).
/// Equals 1 when every n-gram is unique, approaches 1/(L−n+1) for a single
/// repeated token.
pub fn novelty(tokens: &[usize], n: usize) -> Result<f64, RlError> {
    assert!(n >= 1, "n-gram size must be positive");
    if tokens.len() < n {
        return Err(RlError::ShortTrace {
            len: tokens.len(),
            n,
        });
    }
    let total = tokens.len() - n + 1;
    let distinct = tokens
        .windows(n)
        .collect::<std::collections::HashSet<_>>()
        .len();
    Ok(distinct as f64 / total as f64)
}

/// λ_f·logF + λ_r·novelty.
pub fn composite_reward(log_fid: f64, novelty: f64, cfg: &RewardConfig) -> f64 {
    cfg.lambda_fidelity * log_fid + cfg.lambda_novelty * novelty
}

/// Exponential-moving-average baseline: decay·b + (1 − decay)·r.
/// `None` means no observation yet; the first reward initializes it.
pub fn update_baseline(baseline: Option<f64>, reward: f64, decay: f64) -> f64 {
    match baseline {
        None => reward,
        Some(b) => decay * b + (1.0 - decay) * reward,
    }
}

/// Clipped surrogate objective: min(ρA, clip(ρ, 1−ε, 1+ε)·A).
pub fn ppo_surrogate(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage;
    (ratio * advantage).min(clipped)
}

/// d(surrogate)/d(log π): ρA when the unclipped branch is active, 0 when the
/// objective is pinned at the clipped value.
pub fn surrogate_grad_coefficient(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage;
    if unclipped <= clipped {
        unclipped
    } else {
        0.0
    }
}

/// Full objective, minimized:
/// L = −(surrogate + β_H·entropy) + β_KL·KL + λ_sup·NLL.
pub fn total_loss(surrogate: f64, entropy: f64, kl: f64, sup_nll: f64, cfg: &PpoConfig) -> f64 {
    -(surrogate + cfg.beta_entropy * entropy) + cfg.beta_kl * kl + cfg.lambda_sup * sup_nll
}

/// Stage 2 hyperparameters. Defaults follow the fine-tuning setup: AdamW at
/// 5e-6, 100 rollouts per epoch, KL weight 0.1, supervised weight 0.3.
#[derive(Debug, Clone)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub beta_entropy: f64,
    pub beta_kl: f64,
    pub lambda_sup: f64,
    pub baseline_decay: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub max_tokens: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            beta_entropy: 0.01,
            beta_kl: 0.1,
            lambda_sup: 0.3,
            baseline_decay: 0.9,
            learning_rate: 5e-6,
            weight_decay: 0.0,
            steps_per_epoch: 100,
            epochs: 1,
            max_tokens: 48,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

/// Reward terms of one rollout, before and after baseline subtraction.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RewardBreakdown {
    pub log_fidelity_term: f64,
    pub novelty_term: f64,
    pub composite: f64,
    pub baseline: f64,
    pub advantage: f64,
}

/// One logged training step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PpoStepRecord {
    pub step: usize,
    pub reward: f64,
    pub log_fidelity: f64,
    pub novelty: f64,
    pub kl: f64,
    pub entropy: f64,
    pub sup_nll: f64,
    pub loss: f64,
}

/// Per-step log of a PPO run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PpoReport {
    pub records: Vec<PpoStepRecord>,
    /// Rollouts whose generated content was shorter than the novelty n-gram
    /// size; their novelty term was zero.
    pub short_rollouts: usize,
}

impl PpoReport {
    pub fn mean_reward(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.reward).sum::<f64>() / self.records.len() as f64
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), RlError> {
        use std::io::Write;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        writeln!(
            file,
            "step,reward,log_fidelity,novelty,kl,entropy,sup_nll,loss"
        )?;
        for r in &self.records {
            writeln!(
                file,
                "{},{},{},{},{},{},{},{}",
                r.step, r.reward, r.log_fidelity, r.novelty, r.kl, r.entropy, r.sup_nll, r.loss
            )?;
        }
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), RlError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

fn flatten(params: &PolicyParams) -> Vec<f64> {
    params
        .token_table
        .iter()
        .chain(params.output_weights.iter())
        .chain(params.output_bias.iter())
        .copied()
        .collect()
}

fn flatten_grad(grad: &PolicyGrad) -> Vec<f64> {
    grad.token_table
        .iter()
        .chain(grad.output_weights.iter())
        .chain(grad.output_bias.iter())
        .copied()
        .collect()
}

fn unflatten(params: &mut PolicyParams, values: &[f64]) {
    let n_tt = params.token_table.len();
    let n_w = params.output_weights.len();
    params
        .token_table
        .as_slice_mut()
        .expect("contiguous")
        .copy_from_slice(&values[..n_tt]);
    params
        .output_weights
        .as_slice_mut()
        .expect("contiguous")
        .copy_from_slice(&values[n_tt..n_tt + n_w]);
    params
        .output_bias
        .as_slice_mut()
        .expect("contiguous")
        .copy_from_slice(&values[n_tt + n_w..]);
}

/// Fine-tune `policy` with rollouts scored by the frozen tensor.
///
/// Each step: sample a corpus query uniformly, roll out one trace, compute
/// the composite reward and the advantage against a moving baseline, and take
/// one AdamW step on the full objective. The starting policy is snapshotted
/// as the KL reference. Deterministic under the config seed.
#[allow(clippy::too_many_arguments)]
pub fn train_ppo(
    corpus: &TraceCorpus,
    vocab: &Vocab,
    policy: &mut PolicyParams,
    tensor: &PepsTensor,
    encoder: &dyn StepEncoder,
    fidelity_cfg: &FidelityConfig,
    reward_cfg: &RewardConfig,
    cfg: &PpoConfig,
) -> Result<PpoReport, RlError> {
    reward_cfg.validate()?;
    if corpus.is_empty() {
        return Err(RlError::EmptyCorpus);
    }
    let reference = policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_params =
        policy.token_table.len() + policy.output_weights.len() + policy.output_bias.len();
    let mut adam = Adam::new(n_params, cfg.learning_rate)
        .with_betas(cfg.adam_beta1, cfg.adam_beta2)
        .with_epsilon(cfg.adam_epsilon)
        .with_weight_decay(cfg.weight_decay);

    let mut baseline: Option<f64> = None;
    let mut report = PpoReport::default();

    let total_steps = cfg.steps_per_epoch * cfg.epochs;
    for step in 0..total_steps {
        let gold = &corpus.traces[rng.gen_range(0..corpus.len())];
        let rollout = sample_trace(vocab, policy, &gold.query, cfg.max_tokens, &mut rng)?;

        // Reward terms. Rollouts with no rendered steps score zero coherence;
        // rollouts shorter than the n-gram size score zero novelty.
        let log_fid = if rollout.rendered.steps.is_empty() {
            0.0
        } else {
            let psi = embed_trace(&rollout.rendered, encoder)?;
            log_fidelity(tensor, &psi, fidelity_cfg)?
        };
        let content = rollout.step_tokens();
        let nov = match novelty(&content, reward_cfg.ngram_n) {
            Ok(v) => v,
            Err(RlError::ShortTrace { .. }) => {
                report.short_rollouts += 1;
                0.0
            }
            Err(e) => return Err(e),
        };
        let reward = composite_reward(log_fid, nov, reward_cfg);

        // Advantage against the pre-update baseline.
        let advantage = reward - baseline.unwrap_or(reward);
        baseline = Some(update_baseline(baseline, reward, cfg.baseline_decay));

        // The policy that produced the rollout is the current one, so the
        // recomputed log-prob matches the sampled one and the importance
        // ratio is exactly 1 at gradient time.
        let (new_logp, grad_logp) =
            grad_log_prob_from(policy, &rollout.tokens, rollout.prefix_len)?;
        let ratio = (new_logp - rollout.total_logprob())
            .clamp(-20.0, 20.0)
            .exp();
        let surrogate = ppo_surrogate(ratio, advantage, cfg.clip_epsilon);
        let coef = surrogate_grad_coefficient(ratio, advantage, cfg.clip_epsilon);

        let contexts = rollout.contexts();
        let (ent, grad_ent) = entropy_and_grad(policy, &contexts)?;
        let (kl, grad_kl) = kl_and_grad(policy, &reference, &contexts)?;
        let (sup, grad_sup) = supervised_nll_and_grad(vocab, policy, gold)?;

        let loss = total_loss(surrogate, ent, kl, sup, cfg);
        if !loss.is_finite() {
            return Err(RlError::NonFinite { step });
        }

        let mut grad = PolicyGrad::zeros_like(policy);
        grad.axpy(-coef, &grad_logp);
        grad.axpy(-cfg.beta_entropy, &grad_ent);
        grad.axpy(cfg.beta_kl, &grad_kl);
        grad.axpy(cfg.lambda_sup, &grad_sup);

        let mut values = flatten(policy);
        adam.update(&mut values, &flatten_grad(&grad));
        unflatten(policy, &values);

        report.records.push(PpoStepRecord {
            step,
            reward,
            log_fidelity: log_fid,
            novelty: nov,
            kl,
            entropy: ent,
            sup_nll: sup,
            loss,
        });
    }
    Ok(report)
}
