use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::model::join;
use super::vocab::{Vocab, CITE, QUOTE};
use super::{c, Scalar, ToyError, ToyModel};
use crate::canonical::tokenize;
use crate::model::{ErrorType, PreferencePair};
use crate::perturb::DiffBlock;
use crate::seed::rng;
use crate::synthgen::prompt_contexts;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.1, lambda: 0.5, learning_rate: 1e-3, epochs: 20 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if !(self.beta > 0.0) || !(self.lambda >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(ToyError::Config(format!("need beta > 0, lambda >= 0, learning_rate > 0: {self:?}")));
        }
        Ok(())
    }
}

/// `[CITE] doc seg [QUOTE]` followed by the quote tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCitation {
    pub prefix: Vec<u32>,
    pub quote: Vec<u32>,
}

/// A preference pair in model token ids. `positions` are recomputed at the
/// model's tokenization, in aligned coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    pub positions: Vec<usize>,
    pub error_type: Option<ErrorType>,
    pub citations: Vec<EncodedCitation>,
}

pub fn encode_pair(pair: &PreferencePair, vocab: &Vocab) -> Result<EncodedPair, ToyError> {
    let prompt = vocab.encode(&tokenize(&pair.prompt));
    let chosen = vocab.encode(&pair.chosen);
    let rejected = vocab.encode(&pair.rejected);
    let positions = DiffBlock::compute(&chosen, &rejected).positions();
    if positions.is_empty() {
        return Err(ToyError::NoPositions);
    }
    let citations = prompt_contexts(&pair.prompt)
        .1
        .into_iter()
        .map(|e| EncodedCitation {
            prefix: vec![vocab.special(CITE), vocab.id(&e.doc_id), vocab.id(&e.seg_id), vocab.special(QUOTE)],
            quote: vocab.encode(&tokenize(&e.quote)),
        })
        .collect();
    Ok(EncodedPair { prompt, chosen, rejected, positions, error_type: Some(pair.error_type), citations })
}

impl EncodedPair {
    /// Same chosen response with a fresh rejected one; positions are the
    /// token indices that differ.
    pub fn with_rejected(&self, rejected: Vec<u32>, positions: Vec<usize>) -> Self {
        EncodedPair { rejected, positions, error_type: None, ..self.clone() }
    }

    /// Replaces 30% of the chosen tokens (at least one) with a different
    /// random ordinary token.
    pub fn randomized(&self, vocab: &Vocab, seed: u64) -> Self {
        use rand::Rng;
        let mut r = rng(seed);
        let n = self.chosen.len();
        let k = ((n as f64 * 0.3).round() as usize).clamp(1, n);
        let mut positions: Vec<usize> = sample(&mut r, n, k).into_vec();
        positions.sort_unstable();
        let mut rejected = self.chosen.clone();
        let ordinary = vocab.ordinary();
        for &t in &positions {
            loop {
                let cand = r.gen_range(ordinary.clone());
                if cand != rejected[t] {
                    rejected[t] = cand;
                    break;
                }
            }
        }
        self.with_rejected(rejected, positions)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Sequence log-probability of `y` given `x`, its cache and the offset of
/// `y` in the framed sequence.
fn scored<T: Scalar>(model: &ToyModel<T>, x: &[u32], y: &[u32]) -> Result<(T, super::Cache<T>, usize), ToyError> {
    let (seq, start) = join(0, 1, x, y);
    let cache = model.forward(&seq)?;
    let total = (0..y.len()).map(|i| cache.next_logp(start + i - 1)).sum();
    Ok((total, cache, start))
}

fn weights_over<T: Scalar>(len: usize, start: usize, span: std::ops::Range<usize>, w: T) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for i in span {
        out[start + i - 1] = w;
    }
    out
}

/// `(log π(y_w|x), log π(y_l|x))`.
pub fn pair_logps<T: Scalar>(model: &ToyModel<T>, pair: &EncodedPair) -> Result<(T, T), ToyError> {
    Ok((scored(model, &pair.prompt, &pair.chosen)?.0, scored(model, &pair.prompt, &pair.rejected)?.0))
}

fn dpo_from<T: Scalar>(policy: (T, T), reference: (T, T), beta: f64) -> (T, T) {
    let delta = (policy.0 - reference.0) - (policy.1 - reference.1);
    let z = c::<T>(beta) * delta;
    (softplus(-z), -c::<T>(beta) * sigmoid(-z))
}

/// `-log σ(β Δ)` with `Δ` the policy/reference log-ratio margin of the
/// chosen over the rejected response.
pub fn dpo_loss<T: Scalar>(policy: &ToyModel<T>, reference: &ToyModel<T>, pair: &EncodedPair, beta: f64) -> Result<T, ToyError> {
    Ok(dpo_from(pair_logps(policy, pair)?, pair_logps(reference, pair)?, beta).0)
}

/// DPO loss against precomputed reference log-probs; adds `scale · ∇loss`
/// to `grad`.
pub fn dpo_loss_grad<T: Scalar>(policy: &ToyModel<T>, reference: (T, T), pair: &EncodedPair, beta: f64, scale: T, grad: &mut [T]) -> Result<T, ToyError> {
    let (lw, cw, sw) = scored(policy, &pair.prompt, &pair.chosen)?;
    let (ll, cl, sl) = scored(policy, &pair.prompt, &pair.rejected)?;
    let (loss, dl_ddelta) = dpo_from((lw, ll), reference, beta);
    let g = scale * dl_ddelta;
    policy.backward(&cw, &weights_over(cw.len(), sw, 0..pair.chosen.len(), g), grad);
    policy.backward(&cl, &weights_over(cl.len(), sl, 0..pair.rejected.len(), -g), grad);
    Ok(loss)
}

fn citation_response(cit: &EncodedCitation) -> Vec<u32> {
    let mut y = cit.prefix.clone();
    y.extend_from_slice(&cit.quote);
    y
}

/// Mean over citations of the summed negative log-likelihood of the quote
/// tokens given the prompt, document id and segment id.
pub fn evidence_loss<T: Scalar>(policy: &ToyModel<T>, prompt: &[u32], citations: &[EncodedCitation]) -> Result<T, ToyError> {
    if citations.is_empty() {
        return Err(ToyError::EmptyEvidence);
    }
    let mut total = T::zero();
    for cit in citations {
        let (seq, start) = join(0, 1, prompt, &citation_response(cit));
        let cache = policy.forward(&seq)?;
        let q0 = cit.prefix.len();
        total -= (q0..q0 + cit.quote.len()).map(|i| cache.next_logp(start + i - 1)).sum::<T>();
    }
    Ok(total / c(citations.len() as f64))
}

pub fn evidence_loss_grad<T: Scalar>(policy: &ToyModel<T>, prompt: &[u32], citations: &[EncodedCitation], scale: T, grad: &mut [T]) -> Result<T, ToyError> {
    if citations.is_empty() {
        return Err(ToyError::EmptyEvidence);
    }
    let inv = T::one() / c(citations.len() as f64);
    let mut total = T::zero();
    for cit in citations {
        let (seq, start) = join(0, 1, prompt, &citation_response(cit));
        let cache = policy.forward(&seq)?;
        let q0 = cit.prefix.len();
        let span = q0..q0 + cit.quote.len();
        total -= span.clone().map(|i| cache.next_logp(start + i - 1)).sum::<T>();
        policy.backward(&cache, &weights_over(seq.len(), start, span, -scale * inv), grad);
    }
    Ok(total * inv)
}

/// `L_DPO + λ · L_evid`; the evidence term is skipped when `λ = 0` or the
/// pair has no citations.
pub fn total_loss<T: Scalar>(policy: &ToyModel<T>, reference: &ToyModel<T>, pair: &EncodedPair, cfg: &DpoConfig) -> Result<T, ToyError> {
    let dpo = dpo_loss(policy, reference, pair, cfg.beta)?;
    if cfg.lambda == 0.0 || pair.citations.is_empty() {
        return Ok(dpo);
    }
    Ok(dpo + c::<T>(cfg.lambda) * evidence_loss(policy, &pair.prompt, &pair.citations)?)
}

pub fn total_loss_grad<T: Scalar>(policy: &ToyModel<T>, reference: (T, T), pair: &EncodedPair, cfg: &DpoConfig, scale: T, grad: &mut [T]) -> Result<T, ToyError> {
    let dpo = dpo_loss_grad(policy, reference, pair, cfg.beta, scale, grad)?;
    if cfg.lambda == 0.0 || pair.citations.is_empty() {
        return Ok(dpo);
    }
    let lambda = c::<T>(cfg.lambda);
    Ok(dpo + lambda * evidence_loss_grad(policy, &pair.prompt, &pair.citations, scale * lambda, grad)?)
}

/// Relative errors below this magnitude are measured against it instead,
/// so parameters with vanishing gradients do not dominate.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(index, analytic, numeric)` per checked parameter.
    pub checked: Vec<(usize, f64, f64)>,
}

/// Compares `grad` against central differences of `loss` on `n_params`
/// parameters drawn without replacement.
pub fn finite_difference_check(params: &[f64], grad: &[f64], loss: impl Fn(&[f64]) -> f64, n_params: usize, h: f64, seed: u64) -> FdReport {
    let mut r = rng(seed);
    let n = n_params.min(params.len());
    let mut idx = sample(&mut r, params.len(), n).into_vec();
    idx.sort_unstable();
    let mut p = params.to_vec();
    let mut checked = Vec::with_capacity(n);
    let mut worst: f64 = 0.0;
    for k in idx {
        let orig = p[k];
        p[k] = orig + h;
        let up = loss(&p);
        p[k] = orig - h;
        let down = loss(&p);
        p[k] = orig;
        let num = (up - down) / (2.0 * h);
        let rel = (num - grad[k]).abs() / num.abs().max(grad[k].abs()).max(FD_FLOOR);
        worst = worst.max(rel);
        checked.push((k, grad[k], num));
    }
    FdReport { max_rel_error: worst, checked }
}
