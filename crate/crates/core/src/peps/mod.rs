//! The shared rank-5 tensor, its mode-3 contraction against step embeddings,
//! the fidelity functional, and analytic gradients for both training losses.
//!
//! The fidelity of a trace is the product over steps of the ℓ2 norms of the
//! per-step contractions, smoothed by a small epsilon per step. A bond-chained
//! scoring variant that contracts consecutive steps through the latent bond
//! indices lives alongside it; see [`chained_log_fidelity`].

mod train;

pub use train::{
    corrupt_trace, train_stage1, ScoringMode, Stage1Config, Stage1Report, TensorInit, TrainError,
};

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4, Array5, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::embed::{StepEmbedding, TraceEmbedding};

#[derive(Debug, Error)]
pub enum PepsError {
    #[error("step embedding has dimension {got}, tensor expects {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("trace embedding is empty")]
    EmptyTrace,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint has bad magic bytes")]
    BadMagic,
    #[error("checkpoint format version {0} is not supported")]
    BadVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
}

/// Rank-5 real tensor of shape D×D×d×D×D; the sole trainable object of Stage 1.
///
/// Index order is (α, β, k, γ, δ): four bond indices of size `bond_dim` around
/// the physical index `k` of size `phys_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PepsTensor {
    pub entries: Array5<f64>,
    pub bond_dim: usize,
    pub phys_dim: usize,
}

impl PepsTensor {
    pub fn n_params(&self) -> usize {
        self.entries.len()
    }
}

/// Gaussian-initialized tensor with σ = 1/D², so that for a unit-norm input
/// the expected squared contraction norm D⁴σ² is 1 and initial log-fidelity
/// sits near zero.
pub fn init_tensor(phys_dim: usize, bond_dim: usize, seed: u64) -> PepsTensor {
    assert!(phys_dim >= 1 && bond_dim >= 1);
    let sigma = 1.0 / (bond_dim * bond_dim) as f64;
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries =
        Array5::from_shape_simple_fn((bond_dim, bond_dim, phys_dim, bond_dim, bond_dim), || {
            normal.sample(&mut rng)
        });
    PepsTensor {
        entries,
        bond_dim,
        phys_dim,
    }
}

/// Tensor whose bond matricization couples every feature axis to a shared
/// reference axis: the bond matrix of a step embedding r becomes
/// e_0 (P r)' + (P r) e_0', where P folds feature k onto bond-pair axis
/// k mod D². Products of two such matrices then carry the dot product of
/// consecutive embeddings on the (0, 0) entry, so the adjacent pair score
/// starts out sensitive to step-to-step overlap. Gaussian noise at scale
/// `noise` breaks symmetry for subsequent gradient refinement.
pub fn init_coupled_tensor(phys_dim: usize, bond_dim: usize, noise: f64, seed: u64) -> PepsTensor {
    assert!(phys_dim >= 1 && bond_dim >= 1);
    let dd = bond_dim * bond_dim;
    let mut entries = Array5::<f64>::zeros((bond_dim, bond_dim, phys_dim, bond_dim, bond_dim));
    for k in 0..phys_dim {
        let axis = k % dd;
        for (row, col) in [(0, axis), (axis, 0)] {
            entries[[
                row / bond_dim,
                row % bond_dim,
                k,
                col / bond_dim,
                col % bond_dim,
            ]] += 1.0;
        }
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("noise is positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        entries.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    PepsTensor {
        entries,
        bond_dim,
        phys_dim,
    }
}

/// Rank-4 result of contracting the tensor with one step embedding, with its
/// ℓ2 norm cached.
#[derive(Debug, Clone)]
pub struct ContractedStep {
    pub entries: Array4<f64>,
    pub norm: f64,
}

/// Mode-3 contraction: C_{αβγδ} = Σ_k T_{αβkγδ} r_k.
pub fn contract_step(tensor: &PepsTensor, r: &StepEmbedding) -> Result<ContractedStep, PepsError> {
    if r.dim() != tensor.phys_dim {
        return Err(PepsError::DimensionMismatch {
            got: r.dim(),
            want: tensor.phys_dim,
        });
    }
    let d = tensor.bond_dim;
    let mut entries = Array4::<f64>::zeros((d, d, d, d));
    for k in 0..tensor.phys_dim {
        let rk = r.values[k];
        if rk != 0.0 {
            entries.scaled_add(rk, &tensor.entries.index_axis(Axis(2), k));
        }
    }
    let norm = entries.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(ContractedStep { entries, norm })
}

/// Epsilon smoothing and length normalization for the fidelity functional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityConfig {
    /// Added to each step norm before the log; keeps zero-norm steps finite.
    pub epsilon: f64,
    /// When set, return the geometric mean over steps instead of the product.
    pub normalize_by_length: bool,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            normalize_by_length: false,
        }
    }
}

/// Product over steps of (‖C‖ + ε); geometric mean when configured.
pub fn fidelity(
    tensor: &PepsTensor,
    psi: &TraceEmbedding,
    cfg: &FidelityConfig,
) -> Result<f64, PepsError> {
    if psi.is_empty() {
        return Err(PepsError::EmptyTrace);
    }
    let mut product = 1.0;
    for step in &psi.steps {
        product *= contract_step(tensor, step)?.norm + cfg.epsilon;
    }
    if cfg.normalize_by_length {
        product = product.powf(1.0 / psi.len() as f64);
    }
    Ok(product)
}

/// Σ_t log(‖C^[t]‖ + ε); the underflow-safe form of [`fidelity`].
pub fn log_fidelity(
    tensor: &PepsTensor,
    psi: &TraceEmbedding,
    cfg: &FidelityConfig,
) -> Result<f64, PepsError> {
    if psi.is_empty() {
        return Err(PepsError::EmptyTrace);
    }
    let mut sum = 0.0;
    for step in &psi.steps {
        sum += (contract_step(tensor, step)?.norm + cfg.epsilon).ln();
    }
    if cfg.normalize_by_length {
        sum /= psi.len() as f64;
    }
    Ok(sum)
}

/// Analytic gradient of [`log_fidelity`] with respect to the tensor:
/// ∂/∂T_{αβkγδ} = Σ_t C^[t]_{αβγδ} (r_t)_k / (‖C^[t]‖ (‖C^[t]‖ + ε)).
pub fn grad_log_fidelity(
    tensor: &PepsTensor,
    psi: &TraceEmbedding,
    cfg: &FidelityConfig,
) -> Result<Array5<f64>, PepsError> {
    if psi.is_empty() {
        return Err(PepsError::EmptyTrace);
    }
    let scale = if cfg.normalize_by_length {
        1.0 / psi.len() as f64
    } else {
        1.0
    };
    let mut grad = Array5::<f64>::zeros(tensor.entries.raw_dim());
    for step in &psi.steps {
        let c = contract_step(tensor, step)?;
        if c.norm == 0.0 {
            continue; // numerator is the zero tensor
        }
        let coef = scale / (c.norm * (c.norm + cfg.epsilon));
        for k in 0..tensor.phys_dim {
            let rk = step.values[k];
            if rk != 0.0 {
                grad.index_axis_mut(Axis(2), k)
                    .scaled_add(coef * rk, &c.entries);
            }
        }
    }
    Ok(grad)
}

/// Mean negative log-fidelity over a batch of traces.
pub fn ssl_loss(
    tensor: &PepsTensor,
    batch: &[TraceEmbedding],
    cfg: &FidelityConfig,
) -> Result<f64, PepsError> {
    if batch.is_empty() {
        return Err(PepsError::EmptyBatch);
    }
    let mut sum = 0.0;
    for psi in batch {
        sum += log_fidelity(tensor, psi, cfg)?;
    }
    Ok(-sum / batch.len() as f64)
}

/// [`ssl_loss`] together with its gradient.
pub fn ssl_loss_and_grad(
    tensor: &PepsTensor,
    batch: &[TraceEmbedding],
    cfg: &FidelityConfig,
) -> Result<(f64, Array5<f64>), PepsError> {
    if batch.is_empty() {
        return Err(PepsError::EmptyBatch);
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array5::<f64>::zeros(tensor.entries.raw_dim());
    for psi in batch {
        loss -= log_fidelity(tensor, psi, cfg)? * inv_n;
        grad.scaled_add(-inv_n, &grad_log_fidelity(tensor, psi, cfg)?);
    }
    Ok((loss, grad))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// −log(F⁺ / (F⁺ + F⁻)), computed in log space as softplus(logF⁻ − logF⁺).
pub fn contrastive_loss(
    tensor: &PepsTensor,
    psi_pos: &TraceEmbedding,
    psi_neg: &TraceEmbedding,
    cfg: &FidelityConfig,
) -> Result<f64, PepsError> {
    let lf_pos = log_fidelity(tensor, psi_pos, cfg)?;
    let lf_neg = log_fidelity(tensor, psi_neg, cfg)?;
    Ok(softplus(lf_neg - lf_pos))
}

/// [`contrastive_loss`] with its gradient σ(Δ)·(∇logF⁻ − ∇logF⁺).
pub fn contrastive_loss_and_grad(
    tensor: &PepsTensor,
    psi_pos: &TraceEmbedding,
    psi_neg: &TraceEmbedding,
    cfg: &FidelityConfig,
) -> Result<(f64, Array5<f64>), PepsError> {
    let lf_pos = log_fidelity(tensor, psi_pos, cfg)?;
    let lf_neg = log_fidelity(tensor, psi_neg, cfg)?;
    let delta = lf_neg - lf_pos;
    let weight = sigmoid(delta);
    let mut grad = grad_log_fidelity(tensor, psi_neg, cfg)?;
    grad.scaled_add(-1.0, &grad_log_fidelity(tensor, psi_pos, cfg)?);
    grad.mapv_inplace(|g| g * weight);
    Ok((softplus(delta), grad))
}

fn frob(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn ln_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Bond-chained coherence score: log(‖M^[1]·M^[2]···M^[T]‖_F + ε) where
/// M^[t] is the per-step contraction matricized over its bond-index pairs.
///
/// Unlike the per-step product of norms, the chain couples adjacent steps
/// through the bond indices, so shuffled or substituted steps lower the score.
/// Computed with running renormalization so long chains neither overflow nor
/// underflow.
pub fn chained_log_fidelity(
    tensor: &PepsTensor,
    psi: &TraceEmbedding,
    cfg: &FidelityConfig,
) -> Result<f64, PepsError> {
    let (acc, _) = chained_forward(tensor, psi)?;
    let log_eps = if cfg.epsilon > 0.0 {
        cfg.epsilon.ln()
    } else {
        f64::NEG_INFINITY
    };
    let mut score = ln_add_exp(acc, log_eps);
    if cfg.normalize_by_length {
        score /= psi.len() as f64;
    }
    Ok(score)
}

/// Forward pass of the bond chain: returns log‖ΠM‖ (−∞ on exact rank
/// collapse) and the matricized per-step contractions.
fn chained_forward(
    tensor: &PepsTensor,
    psi: &TraceEmbedding,
) -> Result<(f64, Vec<Array2<f64>>), PepsError> {
    if psi.is_empty() {
        return Err(PepsError::EmptyTrace);
    }
    let dd = tensor.bond_dim * tensor.bond_dim;
    let mats: Vec<Array2<f64>> = psi
        .steps
        .iter()
        .map(|r| {
            contract_step(tensor, r).map(|c| {
                c.entries
                    .into_shape((dd, dd))
                    .expect("contraction is contiguous")
            })
        })
        .collect::<Result<_, _>>()?;
    let mut acc = 0.0;
    let mut product: Option<Array2<f64>> = None;
    for m in &mats {
        let mut p = match product {
            None => m.clone(),
            Some(prev) => prev.dot(m),
        };
        let n = frob(&p);
        if n == 0.0 {
            return Ok((f64::NEG_INFINITY, mats));
        }
        acc += n.ln();
        p /= n;
        product = Some(p);
    }
    Ok((acc, mats))
}

/// Analytic gradient of [`chained_log_fidelity`], via backprop through the
/// normalized chain of matrix products.
pub fn grad_chained_log_fidelity(
    tensor: &PepsTensor,
    psi: &TraceEmbedding,
    cfg: &FidelityConfig,
) -> Result<Array5<f64>, PepsError> {
    let (acc, mats) = chained_forward(tensor, psi)?;
    let d = tensor.bond_dim;
    let dd = d * d;
    let t_steps = psi.len();
    let mut grad = Array5::<f64>::zeros(tensor.entries.raw_dim());
    if acc == f64::NEG_INFINITY {
        return Ok(grad); // product collapsed to zero; treat as flat
    }
    // Smoothing weight d log(e^acc + ε) / d acc.
    let weight = if cfg.epsilon > 0.0 {
        1.0 / (1.0 + (cfg.epsilon.ln() - acc).exp())
    } else {
        1.0
    };
    let scale = if cfg.normalize_by_length {
        weight / t_steps as f64
    } else {
        weight
    };

    // Frobenius-normalized prefix and suffix products; the normalizations
    // cancel in the gradient ratio below.
    let mut prefixes = Vec::with_capacity(t_steps + 1);
    prefixes.push(Array2::<f64>::eye(dd));
    for m in &mats {
        let mut p = prefixes.last().unwrap().dot(m);
        let n = frob(&p);
        if n == 0.0 {
            return Ok(grad);
        }
        p /= n;
        prefixes.push(p);
    }
    let mut suffixes = vec![Array2::<f64>::eye(dd); t_steps + 1];
    for i in (0..t_steps).rev() {
        let mut s = mats[i].dot(&suffixes[i + 1]);
        let n = frob(&s);
        if n == 0.0 {
            return Ok(grad);
        }
        s /= n;
        suffixes[i] = s;
    }

    for (t, step) in psi.steps.iter().enumerate() {
        let p_hat = prefixes[t].dot(&mats[t]).dot(&suffixes[t + 1]);
        let denom = p_hat.iter().map(|v| v * v).sum::<f64>();
        if denom == 0.0 {
            continue;
        }
        // d log‖A M B‖_F / dM = Aᵀ (A M B) Bᵀ / ‖A M B‖²_F
        let g_m = prefixes[t].t().dot(&p_hat).dot(&suffixes[t + 1].t()) / denom;
        let g4 = g_m
            .into_shape((d, d, d, d))
            .expect("gradient matrix is contiguous");
        for k in 0..tensor.phys_dim {
            let rk = step.values[k];
            if rk != 0.0 {
                grad.index_axis_mut(Axis(2), k).scaled_add(scale * rk, &g4);
            }
        }
    }
    Ok(grad)
}

/// Mean adjacent-pair coherence gain:
/// (1/(T−1)) Σ_t log‖M^[t]M^[t+1]‖ − log‖M^[t]‖ − log‖M^[t+1]‖,
/// each norm smoothed by ε. A single-step trace falls back to log‖M^[1]‖.
///
/// Each term measures how well one step's bond output aligns with the next
/// step's bond input, normalized by the steps' own magnitudes, so the score
/// is invariant to rescaling the tensor and concentrates on ordering.
pub fn adjacent_log_coherence(
    tensor: &PepsTensor,
    psi: &TraceEmbedding,
    cfg: &FidelityConfig,
) -> Result<f64, PepsError> {
    let (_, mats) = chained_forward(tensor, psi)?;
    let t_steps = mats.len();
    let term = |m: &Array2<f64>| (frob(m) + cfg.epsilon).ln();
    if t_steps == 1 {
        return Ok(term(&mats[0]));
    }
    let mut acc = 0.0;
    for w in mats.windows(2) {
        let product = w[0].dot(&w[1]);
        acc += term(&product) - term(&w[0]) - term(&w[1]);
    }
    Ok(acc / (t_steps - 1) as f64)
}

/// Analytic gradient of [`adjacent_log_coherence`].
pub fn grad_adjacent_log_coherence(
    tensor: &PepsTensor,
    psi: &TraceEmbedding,
    cfg: &FidelityConfig,
) -> Result<Array5<f64>, PepsError> {
    let (_, mats) = chained_forward(tensor, psi)?;
    let d = tensor.bond_dim;
    let t_steps = mats.len();
    let mut grad = Array5::<f64>::zeros(tensor.entries.raw_dim());

    // d log(‖M‖ + ε) / dM = M / (‖M‖ (‖M‖ + ε)).
    let log_norm_grad = |m: &Array2<f64>| {
        let n = frob(m);
        if n == 0.0 {
            Array2::zeros(m.raw_dim())
        } else {
            m / (n * (n + cfg.epsilon))
        }
    };

    // Accumulate d(score)/dM per step, then pull back through r.
    let mut mat_grads: Vec<Array2<f64>> = mats.iter().map(|m| Array2::zeros(m.raw_dim())).collect();
    if t_steps == 1 {
        mat_grads[0] = log_norm_grad(&mats[0]);
    } else {
        let inv = 1.0 / (t_steps - 1) as f64;
        for t in 0..t_steps - 1 {
            let a = &mats[t];
            let b = &mats[t + 1];
            let product = a.dot(b);
            let n = frob(&product);
            if n > 0.0 {
                let coef = inv / (n * (n + cfg.epsilon));
                // d log(‖AB‖ + ε)/dA = (AB)Bᵀ·coef, /dB = Aᵀ(AB)·coef.
                mat_grads[t].scaled_add(coef, &product.dot(&b.t()));
                mat_grads[t + 1].scaled_add(coef, &a.t().dot(&product));
            }
            mat_grads[t].scaled_add(-inv, &log_norm_grad(a));
            mat_grads[t + 1].scaled_add(-inv, &log_norm_grad(b));
        }
    }

    for (t, step) in psi.steps.iter().enumerate() {
        let g4 = mat_grads[t]
            .clone()
            .into_shape((d, d, d, d))
            .expect("gradient matrix is contiguous");
        for k in 0..tensor.phys_dim {
            let rk = step.values[k];
            if rk != 0.0 {
                grad.index_axis_mut(Axis(2), k).scaled_add(rk, &g4);
            }
        }
    }
    Ok(grad)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PEPSTNSR";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a bit-exact tensor checkpoint: header {d, D, epsilon, version} plus
/// row-major little-endian f64 entries.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    tensor: &PepsTensor,
    epsilon: f64,
) -> Result<(), PepsError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(tensor.phys_dim as u32).to_le_bytes())?;
    file.write_all(&(tensor.bond_dim as u32).to_le_bytes())?;
    file.write_all(&epsilon.to_le_bytes())?;
    for v in tensor.entries.iter() {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PepsTensor, f64), PepsError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut magic = [0u8; 8];
    read_exact(&mut file, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(PepsError::BadMagic);
    }
    let version = read_u32(&mut file)?;
    if version != CHECKPOINT_VERSION {
        return Err(PepsError::BadVersion(version));
    }
    let phys_dim = read_u32(&mut file)? as usize;
    let bond_dim = read_u32(&mut file)? as usize;
    let epsilon = read_f64(&mut file)?;
    let n = bond_dim * bond_dim * phys_dim * bond_dim * bond_dim;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(read_f64(&mut file)?);
    }
    let entries =
        Array5::from_shape_vec((bond_dim, bond_dim, phys_dim, bond_dim, bond_dim), values)
            .expect("length matches shape");
    Ok((
        PepsTensor {
            entries,
            bond_dim,
            phys_dim,
        },
        epsilon,
    ))
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), PepsError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            PepsError::Truncated
        } else {
            PepsError::Io(e)
        }
    })
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32, PepsError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64, PepsError> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(f64::from_le_bytes(buf))
}
