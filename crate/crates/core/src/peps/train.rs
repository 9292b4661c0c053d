//! Trace corruption and the two-phase Stage 1 trainer: self-supervised
//! log-fidelity maximization, then contrastive refinement against corrupted
//! traces, both with Adam and patience-based early stopping.

use ndarray::Array5;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::embed::{embed_trace, EmbedError, StepEncoder, TraceEmbedding};
use crate::optim::{Adam, EarlyStopping};
use crate::peps::{
    adjacent_log_coherence, chained_log_fidelity, grad_adjacent_log_coherence,
    grad_chained_log_fidelity, grad_log_fidelity, init_coupled_tensor, init_tensor, log_fidelity,
    FidelityConfig, PepsError, PepsTensor,
};
use crate::trace::{ReasoningTrace, TraceCorpus};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Peps(#[from] PepsError),
    #[error("trace '{0}' has fewer than 2 steps; cannot corrupt")]
    TraceTooShort(String),
    #[error("corpus needs at least 2 traces to draw substitutions from")]
    CorpusTooSmall,
    #[error("training corpus is empty")]
    EmptyCorpus,
}

/// Which coherence score the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScoringMode {
    /// Literal per-step product of contraction norms. Permutation invariant.
    PerStep,
    /// Bond-chained contraction coupling adjacent steps; order sensitive.
    BondChain,
    /// Mean magnitude-normalized coherence gain of adjacent step pairs;
    /// order sensitive and invariant to tensor rescaling.
    AdjacentPairs,
}

/// How the tensor is initialized before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TensorInit {
    /// I.i.d. Gaussian entries scaled so initial log-fidelity sits near zero.
    Random,
    /// Reference-axis coupling that makes the adjacent pair score track the
    /// overlap of consecutive step embeddings, plus Gaussian noise at the
    /// given scale.
    PairCoupled { noise: f64 },
}

/// Stage 1 hyperparameters. Defaults follow the pretraining setup: Adam at
/// 1e-3 with early-stopping patience 2.
#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub bond_dim: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Fraction of steps replaced with foreign steps during corruption.
    pub substitution_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub fidelity: FidelityConfig,
    pub scoring: ScoringMode,
    pub init: TensorInit,
    /// Epoch cap for the self-supervised phase; `max_epochs` when unset.
    /// The self-supervised maximum is content independent, so a long phase
    /// erases the order sensitivity the contrastive phase needs.
    pub ssl_epochs: Option<usize>,
    /// Learning rate for the self-supervised phase; `learning_rate` when unset.
    pub ssl_learning_rate: Option<f64>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            bond_dim: 30,
            learning_rate: 1e-3,
            patience: 2,
            batch_size: 16,
            max_epochs: 40,
            seed: 0,
            substitution_fraction: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            fidelity: FidelityConfig::default(),
            scoring: ScoringMode::PerStep,
            init: TensorInit::Random,
            ssl_epochs: None,
            ssl_learning_rate: None,
        }
    }
}

/// Per-epoch loss curves for both phases.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Stage1Report {
    pub ssl_train_loss: Vec<f64>,
    pub ssl_val_loss: Vec<f64>,
    pub contrastive_train_loss: Vec<f64>,
    pub contrastive_val_loss: Vec<f64>,
}

/// Coherence score of one trace under the configured scoring mode.
pub(crate) fn score(
    tensor: &PepsTensor,
    psi: &TraceEmbedding,
    cfg: &FidelityConfig,
    mode: ScoringMode,
) -> Result<f64, PepsError> {
    match mode {
        ScoringMode::PerStep => log_fidelity(tensor, psi, cfg),
        ScoringMode::BondChain => chained_log_fidelity(tensor, psi, cfg),
        ScoringMode::AdjacentPairs => adjacent_log_coherence(tensor, psi, cfg),
    }
}

fn score_grad(
    tensor: &PepsTensor,
    psi: &TraceEmbedding,
    cfg: &FidelityConfig,
    mode: ScoringMode,
) -> Result<Array5<f64>, PepsError> {
    match mode {
        ScoringMode::PerStep => grad_log_fidelity(tensor, psi, cfg),
        ScoringMode::BondChain => grad_chained_log_fidelity(tensor, psi, cfg),
        ScoringMode::AdjacentPairs => grad_adjacent_log_coherence(tensor, psi, cfg),
    }
}

/// Shuffle a trace's step order (never the identity) and substitute a
/// fraction of steps with steps from other traces in the corpus.
pub fn corrupt_trace(
    trace: &ReasoningTrace,
    corpus: &TraceCorpus,
    cfg: &Stage1Config,
    rng: &mut ChaCha8Rng,
) -> Result<ReasoningTrace, TrainError> {
    let t_steps = trace.steps.len();
    if t_steps < 2 {
        return Err(TrainError::TraceTooShort(trace.id.clone()));
    }
    let donors: Vec<&ReasoningTrace> = corpus
        .traces
        .iter()
        .filter(|other| other.id != trace.id)
        .collect();
    if donors.is_empty() {
        return Err(TrainError::CorpusTooSmall);
    }

    // (a) shuffle; rejection-sample until the order actually changed
    let identity: Vec<usize> = (0..t_steps).collect();
    let mut order = identity.clone();
    while order == identity {
        order.shuffle(rng);
    }
    let mut steps: Vec<String> = order.iter().map(|&i| trace.steps[i].clone()).collect();

    // (b) substitute ⌈fraction·T⌉ randomly chosen positions with foreign steps
    let n_subs = (cfg.substitution_fraction * t_steps as f64).ceil() as usize;
    let mut positions: Vec<usize> = (0..t_steps).collect();
    positions.shuffle(rng);
    for &pos in positions.iter().take(n_subs) {
        let donor = donors[rng.gen_range(0..donors.len())];
        let step = &donor.steps[rng.gen_range(0..donor.steps.len())];
        steps[pos] = step.clone();
    }

    Ok(ReasoningTrace {
        id: format!("{}-neg", trace.id),
        query: trace.query.clone(),
        steps,
        gold_answer: None,
    })
}

struct Phase<'a> {
    tensor: &'a mut PepsTensor,
    adam: Adam,
    stopper: EarlyStopping,
    best: PepsTensor,
}

impl<'a> Phase<'a> {
    fn new(tensor: &'a mut PepsTensor, cfg: &Stage1Config, lr: f64) -> Self {
        let adam = Adam::new(tensor.n_params(), lr)
            .with_betas(cfg.adam_beta1, cfg.adam_beta2)
            .with_epsilon(cfg.adam_epsilon);
        let best = tensor.clone();
        Self {
            tensor,
            adam,
            stopper: EarlyStopping::new(cfg.patience),
            best,
        }
    }

    fn step(&mut self, grad: &Array5<f64>) {
        self.adam.update(
            self.tensor.entries.as_slice_mut().expect("contiguous"),
            grad.as_slice().expect("contiguous"),
        );
    }

    /// Returns true when training should stop.
    fn end_epoch(&mut self, val_loss: f64) -> bool {
        if self.stopper.observe(val_loss) {
            self.best = self.tensor.clone();
        }
        self.stopper.should_stop()
    }

    fn finish(self) {
        *self.tensor = self.best;
    }
}

/// Train the tensor on a corpus: SSL epochs until early stop, then
/// contrastive epochs over (original, corrupted) pairs with the same rule.
///
/// A held-out 10% of the corpus drives early stopping; the best tensor seen
/// on it is returned. Deterministic under (corpus, encoder, config).
pub fn train_stage1(
    corpus: &TraceCorpus,
    encoder: &dyn StepEncoder,
    cfg: &Stage1Config,
) -> Result<(PepsTensor, Stage1Report), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let embedded: Vec<TraceEmbedding> = corpus
        .traces
        .iter()
        .map(|t| embed_trace(t, encoder))
        .collect::<Result<_, _>>()?;

    // Validation split for early stopping: 10%, at least one trace when possible.
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let n_val = if n >= 2 {
        ((n as f64) * 0.1).ceil() as usize
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut tensor = match cfg.init {
        TensorInit::Random => init_tensor(encoder.dim(), cfg.bond_dim, cfg.seed),
        TensorInit::PairCoupled { noise } => {
            init_coupled_tensor(encoder.dim(), cfg.bond_dim, noise, cfg.seed)
        }
    };
    let mut report = Stage1Report::default();

    // ---- phase 1: self-supervised log-fidelity maximization ----
    {
        let val_set: Vec<TraceEmbedding> = val_idx.iter().map(|&i| embedded[i].clone()).collect();
        let ssl_lr = cfg.ssl_learning_rate.unwrap_or(cfg.learning_rate);
        let mut phase = Phase::new(&mut tensor, cfg, ssl_lr);
        for _epoch in 0..cfg.ssl_epochs.unwrap_or(cfg.max_epochs) {
            let mut epoch_order = train_idx.to_vec();
            epoch_order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut n_batches = 0;
            for chunk in epoch_order.chunks(cfg.batch_size.max(1)) {
                let (loss, grad) =
                    batch_ssl(phase.tensor, chunk.iter().map(|&i| &embedded[i]), cfg)?;
                phase.step(&grad);
                epoch_loss += loss;
                n_batches += 1;
            }
            epoch_loss /= n_batches.max(1) as f64;
            report.ssl_train_loss.push(epoch_loss);

            let val_loss = if val_set.is_empty() {
                epoch_loss
            } else {
                batch_ssl_loss(phase.tensor, val_set.iter(), cfg)?
            };
            report.ssl_val_loss.push(val_loss);
            if phase.end_epoch(val_loss) {
                break;
            }
        }
        phase.finish();
    }

    // ---- phase 2: contrastive refinement over (original, corrupted) pairs ----
    {
        // Only traces with ≥ 2 steps can be corrupted.
        let corruptible = |idx: &[usize]| -> Vec<usize> {
            idx.iter()
                .copied()
                .filter(|&i| corpus.traces[i].steps.len() >= 2)
                .collect()
        };
        let train_pairs_idx = corruptible(train_idx);
        let val_pairs_idx = corruptible(val_idx);

        // Fixed validation pairs so the stopping signal is stable.
        let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let val_pairs: Vec<(TraceEmbedding, TraceEmbedding)> = val_pairs_idx
            .iter()
            .map(|&i| {
                let neg = corrupt_trace(&corpus.traces[i], corpus, cfg, &mut val_rng)?;
                Ok((embedded[i].clone(), embed_trace(&neg, encoder)?))
            })
            .collect::<Result<_, TrainError>>()?;

        let mut phase = Phase::new(&mut tensor, cfg, cfg.learning_rate);
        for _epoch in 0..cfg.max_epochs {
            let mut epoch_order = train_pairs_idx.clone();
            epoch_order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut n_batches = 0;
            for chunk in epoch_order.chunks(cfg.batch_size.max(1)) {
                let mut grad = Array5::<f64>::zeros(phase.tensor.entries.raw_dim());
                let mut loss = 0.0;
                for &i in chunk {
                    let neg = corrupt_trace(&corpus.traces[i], corpus, cfg, &mut rng)?;
                    let psi_neg = embed_trace(&neg, encoder)?;
                    let (l, g) = pair_loss_and_grad(phase.tensor, &embedded[i], &psi_neg, cfg)?;
                    loss += l;
                    grad.scaled_add(1.0, &g);
                }
                let inv = 1.0 / chunk.len() as f64;
                grad.mapv_inplace(|g| g * inv);
                phase.step(&grad);
                epoch_loss += loss * inv;
                n_batches += 1;
            }
            epoch_loss /= n_batches.max(1) as f64;
            report.contrastive_train_loss.push(epoch_loss);

            let val_loss = if val_pairs.is_empty() {
                epoch_loss
            } else {
                let mut sum = 0.0;
                for (pos, neg) in &val_pairs {
                    sum += pair_loss(phase.tensor, pos, neg, cfg)?;
                }
                sum / val_pairs.len() as f64
            };
            report.contrastive_val_loss.push(val_loss);
            if phase.end_epoch(val_loss) {
                break;
            }
        }
        phase.finish();
    }

    Ok((tensor, report))
}

fn batch_ssl_loss<'a>(
    tensor: &PepsTensor,
    batch: impl Iterator<Item = &'a TraceEmbedding>,
    cfg: &Stage1Config,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut count = 0;
    for psi in batch {
        sum -= score(tensor, psi, &cfg.fidelity, cfg.scoring)?;
        count += 1;
    }
    Ok(sum / count.max(1) as f64)
}

fn batch_ssl<'a>(
    tensor: &PepsTensor,
    batch: impl Iterator<Item = &'a TraceEmbedding>,
    cfg: &Stage1Config,
) -> Result<(f64, Array5<f64>), TrainError> {
    let batch: Vec<&TraceEmbedding> = batch.collect();
    let inv = 1.0 / batch.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array5::<f64>::zeros(tensor.entries.raw_dim());
    for psi in batch {
        loss -= score(tensor, psi, &cfg.fidelity, cfg.scoring)? * inv;
        grad.scaled_add(-inv, &score_grad(tensor, psi, &cfg.fidelity, cfg.scoring)?);
    }
    Ok((loss, grad))
}

fn pair_loss(
    tensor: &PepsTensor,
    pos: &TraceEmbedding,
    neg: &TraceEmbedding,
    cfg: &Stage1Config,
) -> Result<f64, TrainError> {
    let delta = score(tensor, neg, &cfg.fidelity, cfg.scoring)?
        - score(tensor, pos, &cfg.fidelity, cfg.scoring)?;
    Ok(super::softplus(delta))
}

fn pair_loss_and_grad(
    tensor: &PepsTensor,
    pos: &TraceEmbedding,
    neg: &TraceEmbedding,
    cfg: &Stage1Config,
) -> Result<(f64, Array5<f64>), TrainError> {
    let delta = score(tensor, neg, &cfg.fidelity, cfg.scoring)?
        - score(tensor, pos, &cfg.fidelity, cfg.scoring)?;
    let weight = super::sigmoid(delta);
    let mut grad = score_grad(tensor, neg, &cfg.fidelity, cfg.scoring)?;
    grad.scaled_add(-1.0, &score_grad(tensor, pos, &cfg.fidelity, cfg.scoring)?);
    grad.mapv_inplace(|g| g * weight);
    Ok((super::softplus(delta), grad))
}
