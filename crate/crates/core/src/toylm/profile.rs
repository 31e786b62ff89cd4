use serde::{Deserialize, Serialize};

use super::dpo::EncodedPair;
use super::model::join;
use super::vocab::Vocab;
use super::{ToyError, ToyModel};
use crate::model::ErrorType;
use crate::perturb::DiffBlock;

/// Norms of `∇θ log π(y_w,t | ·) − ∇θ log π(y_l,t | ·)` over aligned
/// positions, with the usual summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientProfile {
    pub error_type: Option<ErrorType>,
    pub per_token_delta_norms: Vec<f64>,
    pub positions: Vec<usize>,
    /// Largest norm before the first perturbed position; zero up to
    /// round-off because both prefixes are identical there.
    pub phase1_max: f64,
    pub p_mean: f64,
    /// Mean over unperturbed positions after the first perturbed one.
    pub pbar_mean: Option<f64>,
    pub ratio: Option<f64>,
}

fn one_hot_grad(model: &ToyModel<f64>, cache: &super::Cache<f64>, row: usize) -> Vec<f64> {
    let mut w = vec![0.0; cache.len()];
    w[row] = 1.0;
    let mut g = vec![0.0; model.n_params()];
    model.backward(cache, &w, &mut g);
    g
}

/// Profiles an arbitrary pair. Equal-length responses are aligned token by
/// token; otherwise the common prefix and suffix define the alignment.
pub fn profile_pair(model: &ToyModel<f64>, prompt: &[u32], chosen: &[u32], rejected: &[u32], positions: &[usize]) -> Result<GradientProfile, ToyError> {
    if positions.is_empty() {
        return Err(ToyError::NoPositions);
    }
    let (sw, start) = join(0, 1, prompt, chosen);
    let (sl, _) = join(0, 1, prompt, rejected);
    let cw = model.forward(&sw)?;
    let cl = model.forward(&sl)?;
    let block = DiffBlock::compute(chosen, rejected);
    let (aligned, sides): (usize, Box<dyn Fn(usize) -> (Option<usize>, Option<usize>)>) = if chosen.len() == rejected.len() {
        (chosen.len(), Box::new(|t| (Some(t), Some(t))))
    } else {
        (block.aligned_len(), Box::new(move |t| block.sides(t)))
    };

    let mut norms = Vec::with_capacity(aligned);
    for t in 0..aligned {
        let (iw, il) = sides(t);
        let gw = iw.map(|i| one_hot_grad(model, &cw, start + i - 1));
        let gl = il.map(|i| one_hot_grad(model, &cl, start + i - 1));
        let sq: f64 = match (gw, gl) {
            (Some(a), Some(b)) => a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum(),
            (Some(a), None) | (None, Some(a)) => a.iter().map(|x| x * x).sum(),
            (None, None) => 0.0,
        };
        norms.push(sq.sqrt());
    }

    let first = *positions.iter().min().expect("non-empty");
    let in_p = |t: &usize| positions.contains(t);
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let phase1_max = norms[..first.min(aligned)].iter().copied().fold(0.0, f64::max);
    let p_mean = mean(positions.iter().filter(|&&t| t < aligned).map(|&t| norms[t]).collect()).unwrap_or(0.0);
    let pbar_mean = mean((first + 1..aligned).filter(|t| !in_p(t)).map(|t| norms[t]).collect());
    let ratio = pbar_mean.filter(|m| *m > 0.0).map(|m| p_mean / m);
    Ok(GradientProfile { error_type: None, per_token_delta_norms: norms, positions: positions.to_vec(), phase1_max, p_mean, pbar_mean, ratio })
}

pub fn per_token_gradient_profile(model: &ToyModel<f64>, pair: &EncodedPair) -> Result<GradientProfile, ToyError> {
    let mut p = profile_pair(model, &pair.prompt, &pair.chosen, &pair.rejected, &pair.positions)?;
    p.error_type = pair.error_type;
    Ok(p)
}

/// Control pair with 30% of the chosen tokens replaced at random.
pub fn random_control_pair(pair: &EncodedPair, vocab: &Vocab, seed: u64) -> EncodedPair {
    pair.randomized(vocab, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub minimal: Option<RatioStats>,
    pub control: Option<RatioStats>,
    pub minimal_by_type: Vec<(ErrorType, RatioStats)>,
    pub phase1_max: f64,
    /// Profiles without a defined ratio (no unperturbed positions after the
    /// first perturbed one).
    pub undefined_ratios: usize,
}

/// Mean and population standard deviation of the defined ratios.
pub fn summarize(profiles: &[GradientProfile]) -> Option<RatioStats> {
    let r: Vec<f64> = profiles.iter().filter_map(|p| p.ratio).collect();
    if r.is_empty() {
        return None;
    }
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    Some(RatioStats {
        n: r.len(),
        mean,
        std,
        min: r.iter().copied().fold(f64::INFINITY, f64::min),
        max: r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

impl ProfileSummary {
    pub fn new(minimal: &[GradientProfile], control: &[GradientProfile]) -> Self {
        let minimal_by_type = ErrorType::ALL
            .iter()
            .filter_map(|&ty| {
                let of: Vec<GradientProfile> = minimal.iter().filter(|p| p.error_type == Some(ty)).cloned().collect();
                summarize(&of).map(|s| (ty, s))
            })
            .collect();
        ProfileSummary {
            minimal: summarize(minimal),
            control: summarize(control),
            minimal_by_type,
            phase1_max: minimal.iter().chain(control).map(|p| p.phase1_max).fold(0.0, f64::max),
            undefined_ratios: minimal.iter().chain(control).filter(|p| p.ratio.is_none()).count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::ToyModelConfig;

    fn model() -> ToyModel<f64> {
        ToyModel::init(ToyModelConfig { vocab_size: 20, layers: 1, model_dim: 8, heads: 2, context_len: 32, seed: 2 }).unwrap()
    }

    #[test]
    fn identical_prefix_has_zero_delta() {
        let m = model();
        let p = profile_pair(&m, &[5, 6], &[7, 8, 9, 10, 11], &[7, 8, 12, 10, 11], &[2]).unwrap();
        assert_eq!(p.per_token_delta_norms.len(), 5);
        assert_eq!(p.phase1_max, 0.0);
        assert!(p.p_mean > 0.0);
        assert!(p.ratio.is_some());
    }

    #[test]
    fn unequal_lengths_use_block_alignment() {
        let m = model();
        let p = profile_pair(&m, &[5], &[7, 8, 9, 10], &[7, 8, 10], &[2]).unwrap();
        assert_eq!(p.per_token_delta_norms.len(), 4);
        assert_eq!(p.phase1_max, 0.0);
    }

    #[test]
    fn summary_statistics() {
        let mk = |r: f64| GradientProfile { error_type: None, per_token_delta_norms: vec![], positions: vec![0], phase1_max: 0.0, p_mean: r, pbar_mean: Some(1.0), ratio: Some(r) };
        let s = summarize(&[mk(1.0), mk(3.0)]).unwrap();
        assert_eq!((s.n, s.mean, s.std, s.min, s.max), (2, 2.0, 1.0, 1.0, 3.0));
        assert!(summarize(&[]).is_none());
    }
}
