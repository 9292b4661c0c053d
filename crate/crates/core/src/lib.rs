//! Coherence scoring for multi-step reasoning traces with a PEPS-style tensor
//! functional, plus PPO fine-tuning of a small token policy against that score.
//!
//! The pipeline has two stages:
//!
//! 1. A shared rank-5 tensor is trained (self-supervised, then contrastive
//!    against corrupted traces) so that its contraction norms score the
//!    structural coherence of a trace.
//! 2. The frozen tensor provides a log-fidelity reward, combined with an
//!    n-gram novelty term, to fine-tune an autoregressive token policy with
//!    a clipped PPO surrogate, KL tether, entropy bonus, and supervised NLL.
//!
//! The crate also ships the evaluation metrics (MEC, WES, embedding cosine)
//! behind provider traits, and a CLI wiring the whole pipeline end to end.

pub mod cli;
pub mod embed;
pub mod eval;
pub mod optim;
pub mod peps;
pub mod policy;
pub mod rl;
pub mod trace;

pub use embed::{EmbeddingTable, HashedEncoder, StepEmbedding, StepEncoder, TraceEmbedding};
pub use peps::{ContractedStep, FidelityConfig, PepsTensor, Stage1Config, Stage1Report};
pub use policy::{PolicyParams, SampledTrace, Vocab};
pub use rl::{PpoConfig, PpoReport, RewardBreakdown, RewardConfig};
pub use trace::{CorpusSplit, ReasoningTrace, TraceCorpus};
