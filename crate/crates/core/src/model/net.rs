//! Forward evaluation, reverse-mode gradients and the incremental cached forward.

use super::config::{AttnMode, ModelConfig};
use super::params::{Linear, ModelParams, Norm};
use super::tensor::{matmul, matmul_add_at, matmul_add_bt, Real};
use crate::corpus::TokenId;
use crate::error::{invalid, LabError, Result};

const LN_EPS: f64 = 1e-5;

/// Stored keys and values of an already processed prefix, one buffer per layer.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    d_model: usize,
    max_len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let cap = cfg.max_len * cfg.d_model;
        Self {
            keys: (0..cfg.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..cfg.n_layers).map(|_| Vec::with_capacity(cap)).collect(),
            len: 0,
            d_model: cfg.d_model,
            max_len: cfg.max_len,
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn remaining(&self) -> usize {
        self.max_len - self.len
    }

    /// Drop every position at index `len` and beyond.
    pub fn truncate(&mut self, len: usize) {
        if len < self.len {
            let keep = len * self.d_model;
            for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
                buf.truncate(keep);
            }
            self.len = len;
        }
    }

    pub fn clear(&mut self) {
        self.truncate(0);
    }
}

struct LayerTape<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    m: Vec<T>,
    f_pre: Vec<T>,
    f_act: Vec<T>,
}

struct Tape<T> {
    layers: Vec<LayerTape<T>>,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    h: Vec<T>,
}

/// A transformer: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    /// Fresh model with [`ModelParams::init`] weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Logits `[ids.len(), vocab]` under attention mode `mode`.
    pub fn forward(&self, ids: &[TokenId], mode: AttnMode) -> Result<Vec<T>> {
        self.check_input(ids, 0, mode)?;
        Ok(self.run(ids, mode, None, false).0)
    }

    /// Feed `new_ids` after the cached prefix; returns logits for the new rows only.
    ///
    /// Only defined for models whose native mode is causal.
    pub fn forward_cached(&self, cache: &mut KvCache<T>, new_ids: &[TokenId]) -> Result<Vec<T>> {
        if self.config.attn_mode != AttnMode::Causal {
            return Err(LabError::Unsupported(format!(
                "cached forward needs a causal model, this one is {}",
                self.config.attn_mode
            )));
        }
        if cache.keys.len() != self.config.n_layers || cache.d_model != self.config.d_model {
            return Err(invalid("cache was built for a different model shape"));
        }
        if new_ids.is_empty() {
            return Ok(Vec::new());
        }
        self.check_input(new_ids, cache.len, AttnMode::Causal)?;
        Ok(self.run(new_ids, AttnMode::Causal, Some(cache), false).0)
    }

    /// Loss and gradients for one sequence.
    ///
    /// Row `r` of the logits is scored against `targets[r]` where
    /// `supervision[r]` holds. The loss is `Σ sup·w·CE / Σ sup`.
    pub fn backward(
        &self,
        ids: &[TokenId],
        mode: AttnMode,
        weights: &[f64],
        targets: &[TokenId],
        supervision: &[bool],
    ) -> Result<(f64, ModelParams<T>)> {
        let count = supervision.iter().filter(|&&s| s).count();
        if count == 0 {
            return Err(invalid("supervision mask is empty, loss normalization undefined"));
        }
        let mut grads = ModelParams::zeros(&self.config);
        let scale = 1.0 / count as f64;
        let sum = self.accumulate(ids, mode, weights, targets, supervision, scale, &mut grads)?;
        Ok((sum * scale, grads))
    }

    /// Add `scale · ∇(Σ sup·w·CE)` into `grads`; returns the unscaled weighted CE sum.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate(
        &self,
        ids: &[TokenId],
        mode: AttnMode,
        weights: &[f64],
        targets: &[TokenId],
        supervision: &[bool],
        scale: f64,
        grads: &mut ModelParams<T>,
    ) -> Result<f64> {
        self.check_input(ids, 0, mode)?;
        let n = ids.len();
        if weights.len() != n || targets.len() != n || supervision.len() != n {
            return Err(invalid(format!(
                "weights/targets/supervision must have {n} entries, got {}/{}/{}",
                weights.len(),
                targets.len(),
                supervision.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights must be finite and non-negative"));
        }
        let vocab = self.config.vocab_size;
        for (r, &t) in targets.iter().enumerate() {
            if supervision[r] && usize::from(t) >= vocab {
                return Err(invalid(format!("target {t} at row {r} is outside the vocabulary")));
            }
        }
        let (logits, tape) = self.run(ids, mode, None, true);
        let tape = tape.expect("tape requested");
        let mut dlogits = vec![T::zero(); n * vocab];
        let mut total = 0.0f64;
        for r in 0..n {
            if !supervision[r] || weights[r] == 0.0 {
                continue;
            }
            let row = &logits[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            let target = usize::from(targets[r]);
            let ce = (lse - row[target]).as_f64();
            total += weights[r] * ce;
            let coef = T::from_f64_lossy(scale * weights[r]);
            let drow = &mut dlogits[r * vocab..(r + 1) * vocab];
            for (d, &x) in drow.iter_mut().zip(row) {
                *d = coef * (x - lse).exp();
            }
            drow[target] -= coef;
        }
        self.backprop(ids, mode, &tape, &dlogits, grads);
        Ok(total)
    }

    fn check_input(&self, ids: &[TokenId], offset: usize, mode: AttnMode) -> Result<()> {
        if ids.is_empty() {
            return Err(invalid("input sequence is empty"));
        }
        if offset + ids.len() > self.config.max_len {
            return Err(invalid(format!(
                "input of {} positions after {offset} cached exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| usize::from(id) >= self.config.vocab_size) {
            return Err(invalid(format!("token {bad} is outside the vocabulary")));
        }
        if mode == AttnMode::BlockCausal(0) {
            return Err(invalid("block size must be positive"));
        }
        Ok(())
    }

    fn run(
        &self,
        ids: &[TokenId],
        mode: AttnMode,
        mut cache: Option<&mut KvCache<T>>,
        keep_tape: bool,
    ) -> (Vec<T>, Option<Tape<T>>) {
        let cfg = &self.config;
        let p = &self.params;
        let (n, d) = (ids.len(), cfg.d_model);
        let offset = cache.as_ref().map_or(0, |c| c.len);

        let mut x = vec![T::zero(); n * d];
        for (r, &id) in ids.iter().enumerate() {
            let tok = &p.tok_emb.data[usize::from(id) * d..][..d];
            let pos = &p.pos_emb.data[(offset + r) * d..][..d];
            for ((o, &a), &b) in x[r * d..(r + 1) * d].iter_mut().zip(tok).zip(pos) {
                *o = a + b;
            }
        }

        let mut layers = Vec::new();
        for (li, blk) in p.blocks.iter().enumerate() {
            let mut xhat1 = vec![T::zero(); n * d];
            let mut rstd1 = vec![T::zero(); n];
            let mut a = vec![T::zero(); n * d];
            layer_norm(&x, d, &blk.ln1, &mut a, &mut xhat1, &mut rstd1);
            let q = linear(&a, n, &blk.wq);
            let k = linear(&a, n, &blk.wk);
            let v = linear(&a, n, &blk.wv);

            let mut ctx = vec![T::zero(); n * d];
            let mut probs = Vec::new();
            match cache.as_deref_mut() {
                Some(c) => {
                    c.keys[li].extend_from_slice(&k);
                    c.values[li].extend_from_slice(&v);
                    let n_k = offset + n;
                    attend(&q, &c.keys[li], &c.values[li], n, n_k, offset, cfg.n_heads, mode, None, &mut ctx);
                }
                None => {
                    if keep_tape {
                        probs = vec![T::zero(); cfg.n_heads * n * n];
                    }
                    let probs_out = keep_tape.then_some(probs.as_mut_slice());
                    attend(&q, &k, &v, n, n, 0, cfg.n_heads, mode, probs_out, &mut ctx);
                }
            }
            let o = linear(&ctx, n, &blk.wo);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += *oi;
            }

            let mut xhat2 = vec![T::zero(); n * d];
            let mut rstd2 = vec![T::zero(); n];
            let mut m = vec![T::zero(); n * d];
            layer_norm(&x, d, &blk.ln2, &mut m, &mut xhat2, &mut rstd2);
            let f_pre = linear(&m, n, &blk.ff_in);
            let f_act: Vec<T> = f_pre.iter().map(|&z| silu(z)).collect();
            let f_out = linear(&f_act, n, &blk.ff_out);
            for (xi, fi) in x.iter_mut().zip(&f_out) {
                *xi += *fi;
            }

            if keep_tape {
                layers.push(LayerTape {
                    xhat1,
                    rstd1,
                    a,
                    q,
                    k,
                    v,
                    probs,
                    ctx,
                    xhat2,
                    rstd2,
                    m,
                    f_pre,
                    f_act,
                });
            }
        }
        if let Some(c) = cache {
            c.len += n;
        }

        let mut xhat_f = vec![T::zero(); n * d];
        let mut rstd_f = vec![T::zero(); n];
        let mut h = vec![T::zero(); n * d];
        layer_norm(&x, d, &p.ln_f, &mut h, &mut xhat_f, &mut rstd_f);
        let logits = linear(&h, n, &p.head);
        let tape = keep_tape.then_some(Tape { layers, xhat_f, rstd_f, h });
        (logits, tape)
    }

    fn backprop(&self, ids: &[TokenId], mode: AttnMode, tape: &Tape<T>, dlogits: &[T], g: &mut ModelParams<T>) {
        let cfg = &self.config;
        let p = &self.params;
        let (n, d) = (ids.len(), cfg.d_model);

        let mut dh = vec![T::zero(); n * d];
        linear_back(&tape.h, dlogits, n, &p.head, &mut g.head, &mut dh);
        let mut dx = vec![T::zero(); n * d];
        layer_norm_back(&dh, d, &tape.xhat_f, &tape.rstd_f, &p.ln_f, &mut g.ln_f, &mut dx);

        for (li, blk) in p.blocks.iter().enumerate().rev() {
            let t = &tape.layers[li];
            let gb = &mut g.blocks[li];

            // Feed-forward branch: dx flows both through the residual and the branch.
            let mut d_act = vec![T::zero(); n * cfg.d_ff];
            linear_back(&t.f_act, &dx, n, &blk.ff_out, &mut gb.ff_out, &mut d_act);
            for (da, &z) in d_act.iter_mut().zip(&t.f_pre) {
                *da *= silu_grad(z);
            }
            let mut dm = vec![T::zero(); n * d];
            linear_back(&t.m, &d_act, n, &blk.ff_in, &mut gb.ff_in, &mut dm);
            layer_norm_back(&dm, d, &t.xhat2, &t.rstd2, &blk.ln2, &mut gb.ln2, &mut dx);

            // Attention branch.
            let mut dctx = vec![T::zero(); n * d];
            linear_back(&t.ctx, &dx, n, &blk.wo, &mut gb.wo, &mut dctx);
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            attend_back(&dctx, &t.probs, &t.q, &t.k, &t.v, n, cfg.n_heads, mode, &mut dq, &mut dk, &mut dv);
            let mut da = vec![T::zero(); n * d];
            linear_back(&t.a, &dq, n, &blk.wq, &mut gb.wq, &mut da);
            linear_back(&t.a, &dk, n, &blk.wk, &mut gb.wk, &mut da);
            linear_back(&t.a, &dv, n, &blk.wv, &mut gb.wv, &mut da);
            layer_norm_back(&da, d, &t.xhat1, &t.rstd1, &blk.ln1, &mut gb.ln1, &mut dx);
        }

        for (r, &id) in ids.iter().enumerate() {
            let src = &dx[r * d..(r + 1) * d];
            let tok = &mut g.tok_emb.data[usize::from(id) * d..][..d];
            for (o, &s) in tok.iter_mut().zip(src) {
                *o += s;
            }
            let pos = &mut g.pos_emb.data[r * d..][..d];
            for (o, &s) in pos.iter_mut().zip(src) {
                *o += s;
            }
        }
    }
}

/// Numerically stable softmax of one logit row.
pub fn softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for x in out.iter_mut() {
        *x = *x / sum;
    }
    out
}

/// `-log softmax(row)[target]`, computed in f64.
pub fn cross_entropy<T: Real>(row: &[T], target: usize) -> f64 {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
    max + sum.ln() - row[target].as_f64()
}

fn silu<T: Real>(z: T) -> T {
    z / (T::one() + (-z).exp())
}

fn silu_grad<T: Real>(z: T) -> T {
    let s = T::one() / (T::one() + (-z).exp());
    s * (T::one() + z * (T::one() - s))
}

fn linear<T: Real>(x: &[T], rows: usize, lin: &Linear<T>) -> Vec<T> {
    let (d_in, d_out) = (lin.weight.shape[0], lin.weight.shape[1]);
    let mut out = vec![T::zero(); rows * d_out];
    matmul(x, &lin.weight.data, &mut out, rows, d_in, d_out);
    for row in out.chunks_exact_mut(d_out) {
        for (o, &b) in row.iter_mut().zip(&lin.bias.data) {
            *o += b;
        }
    }
    out
}

/// Accumulate weight and bias gradients and add the input gradient into `dx`.
fn linear_back<T: Real>(x: &[T], dy: &[T], rows: usize, lin: &Linear<T>, g: &mut Linear<T>, dx: &mut [T]) {
    let (d_in, d_out) = (lin.weight.shape[0], lin.weight.shape[1]);
    matmul_add_at(x, dy, &mut g.weight.data, rows, d_in, d_out);
    for row in dy.chunks_exact(d_out) {
        for (gb, &v) in g.bias.data.iter_mut().zip(row) {
            *gb += v;
        }
    }
    matmul_add_bt(dy, &lin.weight.data, dx, rows, d_in, d_out);
}

fn layer_norm<T: Real>(x: &[T], d: usize, norm: &Norm<T>, out: &mut [T], xhat: &mut [T], rstd: &mut [T]) {
    let eps = T::from_f64_lossy(LN_EPS);
    let inv_d = T::one() / T::from_usize(d).expect("dimension fits");
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            xh[i] = (row[i] - mean) * rs;
            o[i] = xh[i] * norm.gain.data[i] + norm.bias.data[i];
        }
    }
}

/// Accumulate gain/bias gradients and add the input gradient into `dx`.
fn layer_norm_back<T: Real>(
    dy: &[T],
    d: usize,
    xhat: &[T],
    rstd: &[T],
    norm: &Norm<T>,
    g: &mut Norm<T>,
    dx: &mut [T],
) {
    let inv_d = T::one() / T::from_usize(d).expect("dimension fits");
    let mut dxhat = vec![T::zero(); d];
    for (r, dyr) in dy.chunks_exact(d).enumerate() {
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            g.gain.data[i] += dyr[i] * xh[i];
            g.bias.data[i] += dyr[i];
            dxhat[i] = dyr[i] * norm.gain.data[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let out = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            out[i] += rstd[r] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

/// Exclusive upper bound of the keys query row `abs` may see; allowed keys form a prefix.
#[inline]
fn key_limit(mode: AttnMode, abs: usize, n_k: usize) -> usize {
    let limit = match mode {
        AttnMode::Causal => abs + 1,
        AttnMode::Full => n_k,
        AttnMode::BlockCausal(k) => (abs / k + 1) * k,
    };
    limit.min(n_k)
}

/// Multi-head scaled dot-product attention of `n_q` queries at absolute
/// rows `q0..q0+n_q` against keys at rows `0..n_k`.
#[allow(clippy::too_many_arguments)]
fn attend<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    n_q: usize,
    n_k: usize,
    q0: usize,
    heads: usize,
    mode: AttnMode,
    mut probs: Option<&mut [T]>,
    ctx: &mut [T],
) {
    let d = q.len() / n_q;
    let hd = d / heads;
    let scale = T::one() / T::from_usize(hd).expect("dimension fits").sqrt();
    let mut s = vec![T::zero(); n_k];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..n_q {
            let limit = key_limit(mode, q0 + i, n_k);
            let qi = &q[i * d + off..][..hd];
            let mut max = T::neg_infinity();
            for j in 0..limit {
                let kj = &k[j * d + off..][..hd];
                let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                s[j] = dot * scale;
                max = max.max(s[j]);
            }
            let mut sum = T::zero();
            for sj in s[..limit].iter_mut() {
                *sj = (*sj - max).exp();
                sum += *sj;
            }
            let inv = T::one() / sum;
            let out = &mut ctx[i * d + off..][..hd];
            for j in 0..limit {
                let pj = s[j] * inv;
                s[j] = pj;
                let vj = &v[j * d + off..][..hd];
                for (o, &vv) in out.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
            if let Some(pr) = probs.as_deref_mut() {
                pr[(h * n_q + i) * n_k..][..limit].copy_from_slice(&s[..limit]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attend_back<T: Real>(
    dctx: &[T],
    probs: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    heads: usize,
    mode: AttnMode,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let d = q.len() / n;
    let hd = d / heads;
    let scale = T::one() / T::from_usize(hd).expect("dimension fits").sqrt();
    let mut dp = vec![T::zero(); n];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..n {
            let limit = key_limit(mode, i, n);
            let p = &probs[(h * n + i) * n..][..limit];
            let dci = &dctx[i * d + off..][..hd];
            let mut weighted = T::zero();
            for j in 0..limit {
                let vj = &v[j * d + off..][..hd];
                dp[j] = dci.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                weighted += p[j] * dp[j];
                let dvj = &mut dv[j * d + off..][..hd];
                for (o, &c) in dvj.iter_mut().zip(dci) {
                    *o += p[j] * c;
                }
            }
            let qi = &q[i * d + off..][..hd];
            for j in 0..limit {
                let ds = p[j] * (dp[j] - weighted) * scale;
                let kj = &k[j * d + off..][..hd];
                let dqi = &mut dq[i * d + off..][..hd];
                for (o, &kk) in dqi.iter_mut().zip(kj) {
                    *o += ds * kk;
                }
                let dkj = &mut dk[j * d + off..][..hd];
                for (o, &qq) in dkj.iter_mut().zip(qi) {
                    *o += ds * qq;
                }
            }
        }
    }
}
