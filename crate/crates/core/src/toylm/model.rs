use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{c, Scalar, ToyError};
use crate::seed::rng;

/// Upper bound on parameters, small enough for finite-difference checks.
pub const MAX_PARAMS: usize = 100_000;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl ToyModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, layers: 2, model_dim: 32, heads: 2, context_len: 256, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let dims = [self.vocab_size, self.layers, self.model_dim, self.heads, self.context_len];
        if dims.contains(&0) {
            return Err(ToyError::Config(format!("all dimensions must be positive: {self:?}")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(ToyError::Config(format!("model_dim {} not divisible by {} heads", self.model_dim, self.heads)));
        }
        let n = Layout::new(self).total;
        if n >= MAX_PARAMS {
            return Err(ToyError::Config(format!("{n} parameters; at most {MAX_PARAMS} allowed")));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

/// Offsets into the flat parameter vector. The token embedding doubles as
/// the output projection.
#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    out_b: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &ToyModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.model_dim, 4 * cfg.model_dim);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok = take(v * d);
        let pos = take(cfg.context_len * d);
        let layers = (0..cfg.layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * f),
                b_fc: take(f),
                w_proj: take(f * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let out_b = take(v);
        Layout { tok, pos, layers, lnf_g, lnf_b, out_b, total: at }
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel<T> {
    pub config: ToyModelConfig,
    layout: Layout,
    pub params: Vec<T>,
}

#[derive(Debug, Clone)]
struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    /// heads × T × T, row t holds weights over u ≤ t.
    probs: Vec<T>,
    att: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    pub ids: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    hf: Vec<T>,
    /// T × V log-softmax of the logits.
    pub logp: Vec<T>,
}

impl<T: Scalar> Cache<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Log-probability of `ids[j + 1]` given `ids[..=j]`.
    pub fn next_logp(&self, j: usize) -> T {
        let v = self.logp.len() / self.ids.len();
        self.logp[j * v + self.ids[j + 1] as usize]
    }
}

fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T], d: usize) -> (Vec<T>, LnCache<T>) {
    let n = x.len() / d;
    let (mut y, mut xhat, mut rstd) = (vec![T::zero(); x.len()], vec![T::zero(); x.len()], vec![T::zero(); n]);
    let inv_d = c::<T>(1.0 / d as f64);
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let mu = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
        let r = T::one() / (var + c(LN_EPS)).sqrt();
        rstd[t] = r;
        for i in 0..d {
            let xh = (row[i] - mu) * r;
            xhat[t * d + i] = xh;
            y[t * d + i] = g[i] * xh + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates into `dx`, `dg`, `db` for the first `n` rows.
fn layer_norm_back<T: Scalar>(dy: &[T], cache: &LnCache<T>, g: &[T], d: usize, n: usize, dx: &mut [T], dg: &mut [T], db: &mut [T]) {
    let inv_d = c::<T>(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for t in 0..n {
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let dyr = &dy[t * d..(t + 1) * d];
        let (mut m1, mut m2) = (T::zero(), T::zero());
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xh[i];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let r = cache.rstd[t];
        for i in 0..d {
            dx[t * d + i] += r * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
}

/// `y = x W + b` with `W` stored row-major as `din × dout`.
fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], din: usize, dout: usize) -> Vec<T> {
    let n = x.len() / din;
    let mut y = vec![T::zero(); n * dout];
    for t in 0..n {
        let yr = &mut y[t * dout..(t + 1) * dout];
        yr.copy_from_slice(b);
        for i in 0..din {
            let xi = x[t * din + i];
            let wr = &w[i * dout..(i + 1) * dout];
            for (yo, &wo) in yr.iter_mut().zip(wr) {
                *yo += xi * wo;
            }
        }
    }
    y
}

/// Backward of [`linear`] over the first `n` rows; accumulates gradients.
#[allow(clippy::too_many_arguments)]
fn linear_back<T: Scalar>(dy: &[T], x: &[T], w: &[T], din: usize, dout: usize, n: usize, dw: &mut [T], db: &mut [T], dx: &mut [T]) {
    for t in 0..n {
        let dyr = &dy[t * dout..(t + 1) * dout];
        for (dbo, &g) in db.iter_mut().zip(dyr) {
            *dbo += g;
        }
        for i in 0..din {
            let xi = x[t * din + i];
            let wr = &w[i * dout..(i + 1) * dout];
            let dwr = &mut dw[i * dout..(i + 1) * dout];
            let mut acc = T::zero();
            for o in 0..dout {
                dwr[o] += xi * dyr[o];
                acc += wr[o] * dyr[o];
            }
            dx[t * din + i] += acc;
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = c::<T>(GELU_K) * (x + c::<T>(GELU_C) * x * x * x);
    c::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = c::<T>(GELU_K) * (x + c::<T>(GELU_C) * x * x * x);
    let th = u.tanh();
    let du = c::<T>(GELU_K) * (T::one() + c::<T>(3.0 * GELU_C) * x * x);
    c::<T>(0.5) * (T::one() + th) + c::<T>(0.5) * x * (T::one() - th * th) * du
}

impl<T: Scalar> ToyModel<T> {
    /// Gaussian initialization (std 0.02, residual projections scaled by
    /// depth); layer-norm gains one, biases zero.
    pub fn init(config: ToyModelConfig) -> Result<Self, ToyError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut r = rng(config.seed);
        let d = config.model_dim;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid = Normal::new(0.0, 0.02 / (2.0 * config.layers as f64).sqrt()).expect("valid std");
        let fill = |params: &mut [T], dist: &Normal<f64>, r: &mut rand_chacha::ChaCha8Rng| {
            for p in params {
                *p = c(dist.sample(r));
            }
        };
        fill(&mut params[layout.tok..layout.pos], &normal, &mut r);
        fill(&mut params[layout.pos..layout.pos + config.context_len * d], &normal, &mut r);
        for l in &layout.layers {
            params[l.ln1_g..l.ln1_g + d].fill(T::one());
            params[l.ln2_g..l.ln2_g + d].fill(T::one());
            fill(&mut params[l.w_qkv..l.b_qkv], &normal, &mut r);
            fill(&mut params[l.w_o..l.b_o], &resid, &mut r);
            fill(&mut params[l.w_fc..l.b_fc], &normal, &mut r);
            fill(&mut params[l.w_proj..l.b_proj], &resid, &mut r);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(T::one());
        Ok(ToyModel { config, layout, params })
    }

    /// A model with the given parameter vector.
    pub fn with_params(config: ToyModelConfig, params: Vec<T>) -> Result<Self, ToyError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(ToyError::Config(format!("expected {} parameters, got {}", layout.total, params.len())));
        }
        Ok(ToyModel { config, layout, params })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// Range of the output bias, the only parameters that see every logit
    /// directly.
    pub fn output_bias(&self) -> std::ops::Range<usize> {
        self.layout.out_b..self.layout.out_b + self.config.vocab_size
    }

    /// Range of the token embedding (shared with the output projection).
    pub fn token_embedding(&self) -> std::ops::Range<usize> {
        self.layout.tok..self.layout.tok + self.config.vocab_size * self.config.model_dim
    }

    pub fn cast<U: Scalar>(&self) -> ToyModel<U> {
        ToyModel {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| c::<U>(p.to_f64().expect("finite parameter"))).collect(),
        }
    }

    pub fn forward(&self, ids: &[u32]) -> Result<Cache<T>, ToyError> {
        let cfg = &self.config;
        let (n, d, v, f) = (ids.len(), cfg.model_dim, cfg.vocab_size, 4 * cfg.model_dim);
        if n > cfg.context_len {
            return Err(ToyError::ContextOverflow { len: n, max: cfg.context_len });
        }
        let p = &self.params;
        let lay = &self.layout;
        let mut x = vec![T::zero(); n * d];
        for (t, &id) in ids.iter().enumerate() {
            let e = &p[lay.tok + id as usize * d..lay.tok + (id as usize + 1) * d];
            let pe = &p[lay.pos + t * d..lay.pos + (t + 1) * d];
            for i in 0..d {
                x[t * d + i] = e[i] + pe[i];
            }
        }
        let (heads, dh) = (cfg.heads, d / cfg.heads);
        let scale = c::<T>(1.0 / (dh as f64).sqrt());
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in &lay.layers {
            let (h1, ln1) = layer_norm(&x, &p[l.ln1_g..l.ln1_g + d], &p[l.ln1_b..l.ln1_b + d], d);
            let qkv = linear(&h1, &p[l.w_qkv..l.b_qkv], &p[l.b_qkv..l.b_qkv + 3 * d], d, 3 * d);
            let mut probs = vec![T::zero(); heads * n * n];
            let mut att = vec![T::zero(); n * d];
            for h in 0..heads {
                for t in 0..n {
                    let q = &qkv[t * 3 * d + h * dh..t * 3 * d + (h + 1) * dh];
                    let row = &mut probs[(h * n + t) * n..(h * n + t) * n + t + 1];
                    let mut max = T::neg_infinity();
                    for (u, s) in row.iter_mut().enumerate() {
                        let k = &qkv[u * 3 * d + d + h * dh..u * 3 * d + d + (h + 1) * dh];
                        *s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        max = max.max(*s);
                    }
                    let mut z = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let out = &mut att[t * d + h * dh..t * d + (h + 1) * dh];
                    for (u, s) in row.iter_mut().enumerate() {
                        *s /= z;
                        let vv = &qkv[u * 3 * d + 2 * d + h * dh..u * 3 * d + 2 * d + (h + 1) * dh];
                        for (o, &vi) in out.iter_mut().zip(vv) {
                            *o += *s * vi;
                        }
                    }
                }
            }
            let o = linear(&att, &p[l.w_o..l.b_o], &p[l.b_o..l.b_o + d], d, d);
            let x_mid: Vec<T> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
            let (h2, ln2) = layer_norm(&x_mid, &p[l.ln2_g..l.ln2_g + d], &p[l.ln2_b..l.ln2_b + d], d);
            let pre = linear(&h2, &p[l.w_fc..l.b_fc], &p[l.b_fc..l.b_fc + f], d, f);
            let act: Vec<T> = pre.iter().map(|&z| gelu(z)).collect();
            let m = linear(&act, &p[l.w_proj..l.b_proj], &p[l.b_proj..l.b_proj + d], f, d);
            let x_out: Vec<T> = x_mid.iter().zip(&m).map(|(&a, &b)| a + b).collect();
            x = x_out;
            layers.push(LayerCache { ln1, h1, qkv, probs, att, ln2, h2, pre, act });
        }
        let (hf, lnf) = layer_norm(&x, &p[lay.lnf_g..lay.lnf_g + d], &p[lay.lnf_b..lay.lnf_b + d], d);
        let emb = &p[lay.tok..lay.tok + v * d];
        let ob = &p[lay.out_b..lay.out_b + v];
        let mut logp = vec![T::zero(); n * v];
        for t in 0..n {
            let hr = &hf[t * d..(t + 1) * d];
            let row = &mut logp[t * v..(t + 1) * v];
            let mut max = T::neg_infinity();
            for (k, out) in row.iter_mut().enumerate() {
                *out = ob[k] + emb[k * d..(k + 1) * d].iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>();
                max = max.max(*out);
            }
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            for out in row.iter_mut() {
                *out -= lse;
            }
        }
        Ok(Cache { ids: ids.to_vec(), layers, lnf, hf, logp })
    }

    /// Adds to `grad` the parameter gradient of `Σ_j w[j] · log p(ids[j+1] |
    /// ids[..=j])`. Work is limited to the causal prefix ending at the last
    /// non-zero weight.
    pub fn backward(&self, cache: &Cache<T>, weights: &[T], grad: &mut [T]) {
        let Some(last) = weights.iter().rposition(|w| !w.is_zero()) else {
            return;
        };
        let n = last + 1;
        let cfg = &self.config;
        let (d, v, f) = (cfg.model_dim, cfg.vocab_size, 4 * cfg.model_dim);
        let (heads, dh) = (cfg.heads, d / cfg.heads);
        let len = cache.ids.len();
        let scale = c::<T>(1.0 / (dh as f64).sqrt());
        let p = &self.params;
        let lay = &self.layout;

        // Output head with tied embedding.
        let mut dhf = vec![T::zero(); n * d];
        {
            let (emb_g, rest) = grad[lay.tok..].split_at_mut(v * d);
            let ob_g = &mut rest[lay.out_b - lay.tok - v * d..lay.out_b - lay.tok - v * d + v];
            let emb = &p[lay.tok..lay.tok + v * d];
            for (j, &w) in weights.iter().enumerate().take(n) {
                if w.is_zero() {
                    continue;
                }
                let target = cache.ids[j + 1] as usize;
                let hr = &cache.hf[j * d..(j + 1) * d];
                let dh_row = &mut dhf[j * d..(j + 1) * d];
                for k in 0..v {
                    let onehot = if k == target { T::one() } else { T::zero() };
                    let dl = w * (onehot - cache.logp[j * v + k].exp());
                    ob_g[k] += dl;
                    let er = &emb[k * d..(k + 1) * d];
                    let eg = &mut emb_g[k * d..(k + 1) * d];
                    for i in 0..d {
                        eg[i] += dl * hr[i];
                        dh_row[i] += dl * er[i];
                    }
                }
            }
        }
        let mut dx = vec![T::zero(); n * d];
        {
            let (dg, db) = grad_pair(grad, lay.lnf_g, lay.lnf_b, d);
            layer_norm_back(&dhf, &cache.lnf, &p[lay.lnf_g..lay.lnf_g + d], d, n, &mut dx, dg, db);
        }

        for (l, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // MLP branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid)))).
            let mut dact = vec![T::zero(); n * f];
            {
                let (dw, db) = grad_pair_sized(grad, l.w_proj, f * d, l.b_proj, d);
                linear_back(&dx, &lc.act, &p[l.w_proj..l.b_proj], f, d, n, dw, db, &mut dact);
            }
            for (g, &z) in dact.iter_mut().zip(&lc.pre) {
                *g *= gelu_grad(z);
            }
            let mut dh2 = vec![T::zero(); n * d];
            {
                let (dw, db) = grad_pair_sized(grad, l.w_fc, d * f, l.b_fc, f);
                linear_back(&dact, &lc.h2, &p[l.w_fc..l.b_fc], d, f, n, dw, db, &mut dh2);
            }
            let mut dx_mid = dx;
            {
                let (dg, db) = grad_pair(grad, l.ln2_g, l.ln2_b, d);
                layer_norm_back(&dh2, &lc.ln2, &p[l.ln2_g..l.ln2_g + d], d, n, &mut dx_mid, dg, db);
            }

            // Attention branch: x_mid = x_in + o(attn(ln1(x_in))).
            let mut datt = vec![T::zero(); n * d];
            {
                let (dw, db) = grad_pair_sized(grad, l.w_o, d * d, l.b_o, d);
                linear_back(&dx_mid, &lc.att, &p[l.w_o..l.b_o], d, d, n, dw, db, &mut datt);
            }
            let mut dqkv = vec![T::zero(); n * 3 * d];
            let mut dp = vec![T::zero(); n];
            for h in 0..heads {
                for t in 0..n {
                    let row = &lc.probs[(h * len + t) * len..(h * len + t) * len + t + 1];
                    let da = &datt[t * d + h * dh..t * d + (h + 1) * dh];
                    let mut dot = T::zero();
                    for u in 0..=t {
                        let vv = &lc.qkv[u * 3 * d + 2 * d + h * dh..u * 3 * d + 2 * d + (h + 1) * dh];
                        dp[u] = da.iter().zip(vv).map(|(&a, &b)| a * b).sum();
                        dot += dp[u] * row[u];
                        let dv = &mut dqkv[u * 3 * d + 2 * d + h * dh..u * 3 * d + 2 * d + (h + 1) * dh];
                        for (g, &a) in dv.iter_mut().zip(da) {
                            *g += row[u] * a;
                        }
                    }
                    for u in 0..=t {
                        let ds = row[u] * (dp[u] - dot) * scale;
                        if ds.is_zero() {
                            continue;
                        }
                        for i in 0..dh {
                            let qi = lc.qkv[t * 3 * d + h * dh + i];
                            let ki = lc.qkv[u * 3 * d + d + h * dh + i];
                            dqkv[t * 3 * d + h * dh + i] += ds * ki;
                            dqkv[u * 3 * d + d + h * dh + i] += ds * qi;
                        }
                    }
                }
            }
            let mut dh1 = vec![T::zero(); n * d];
            {
                let (dw, db) = grad_pair_sized(grad, l.w_qkv, d * 3 * d, l.b_qkv, 3 * d);
                linear_back(&dqkv, &lc.h1, &p[l.w_qkv..l.b_qkv], d, 3 * d, n, dw, db, &mut dh1);
            }
            let mut dx_in = dx_mid;
            {
                let (dg, db) = grad_pair(grad, l.ln1_g, l.ln1_b, d);
                layer_norm_back(&dh1, &lc.ln1, &p[l.ln1_g..l.ln1_g + d], d, n, &mut dx_in, dg, db);
            }
            dx = dx_in;
        }

        for t in 0..n {
            let id = cache.ids[t] as usize;
            for i in 0..d {
                grad[lay.tok + id * d + i] += dx[t * d + i];
                grad[lay.pos + t * d + i] += dx[t * d + i];
            }
        }
    }
}

/// Two disjoint `d`-sized gradient slices at offsets `a < b`.
fn grad_pair<T>(grad: &mut [T], a: usize, b: usize, d: usize) -> (&mut [T], &mut [T]) {
    grad_pair_sized(grad, a, d, b, d)
}

fn grad_pair_sized<T>(grad: &mut [T], a: usize, na: usize, b: usize, nb: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + na <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + na], &mut hi[..nb])
}

/// `[BOS] x [SEP] y` and the offset of `y` in it.
pub(crate) fn join(bos: u32, sep: u32, x: &[u32], y: &[u32]) -> (Vec<u32>, usize) {
    let mut seq = Vec::with_capacity(x.len() + y.len() + 2);
    seq.push(bos);
    seq.extend_from_slice(x);
    seq.push(sep);
    let start = seq.len();
    seq.extend_from_slice(y);
    (seq, start)
}

/// Teacher-forced log-probability of `y` given `x`: the total and the
/// per-token terms. Sequences are framed as `[BOS] x [SEP] y`, with BOS and
/// SEP taken as token ids 0 and 1.
pub fn logprob<T: Scalar>(model: &ToyModel<T>, x: &[u32], y: &[u32]) -> Result<(T, Vec<T>), ToyError> {
    let (seq, start) = join(0, 1.min(model.config.vocab_size as u32 - 1), x, y);
    let cache = model.forward(&seq)?;
    let per: Vec<T> = (0..y.len()).map(|i| cache.next_logp(start + i - 1)).collect();
    Ok((per.iter().copied().sum(), per))
}
