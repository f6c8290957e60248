//! Greedy autoregressive decoding and confidence-thresholded block decoding
//! over a causal KV cache.
//!
//! Model inputs are `[bos] + prompt + generated`. A session keeps the
//! committed tokens that are not yet in the cache as `pending`; the last
//! pending row (the anchor) predicts the next token. Each block iteration
//! feeds the anchor context plus the first `K-1` block inputs (committed
//! tokens or `mask_id` placeholders), so row `anchor + i` scores block
//! position `i`. Block inputs are rolled back from the cache after every
//! iteration; the finished block becomes the next `pending` set, which
//! writes its clean keys and values during the next block's first forward.

use rand::Rng;

use crate::corpus::{Dataset, TokenId, Vocab};
use crate::error::{invalid, LabError, Result};
use crate::model::{softmax, AttnMode, KvCache, Model};
use crate::objectives::{Objective, ObjectiveConfig};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    /// Block size `K`.
    pub block_size: usize,
    /// Commit threshold on the max probability.
    pub threshold: f64,
    /// Iteration limit `T_max` per block.
    pub max_iters: usize,
    pub max_new_tokens: usize,
    /// Sampling temperature; 0 decodes greedily.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            threshold: 0.9,
            max_iters: 16,
            max_new_tokens: 64,
            temperature: 0.0,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(invalid("block size must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(invalid("iteration limit must be at least 1"));
        }
        if !(self.threshold >= 0.0) {
            return Err(invalid(format!("threshold must be non-negative, got {}", self.threshold)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!("temperature must be non-negative, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockTrace {
    pub block_index: usize,
    pub iterations: usize,
    pub committed_per_iter: Vec<usize>,
    /// Max probability of each committed token, in commit order.
    pub confidences: Vec<f64>,
    /// Model invocations spent on this block.
    pub forwards: usize,
    /// Token rows evaluated by those invocations.
    pub positions: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeTrace {
    pub blocks: Vec<BlockTrace>,
    /// Forwards spent ingesting the prompt (not counted in `forwards`).
    pub prefill_forwards: usize,
    pub tokens: usize,
    pub forwards: usize,
    /// The token budget was cut short by the context length.
    pub truncated: bool,
}

impl DecodeTrace {
    pub fn tokens_per_forward(&self) -> f64 {
        if self.forwards == 0 {
            0.0
        } else {
            self.tokens as f64 / self.forwards as f64
        }
    }

    fn push(&mut self, block: BlockTrace, tokens: usize) {
        self.tokens += tokens;
        self.forwards += block.forwards;
        self.blocks.push(block);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt: Vec<TokenId>,
    pub generated: Vec<TokenId>,
    pub trace: DecodeTrace,
}

impl Generation {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut all = self.prompt.clone();
        all.extend_from_slice(&self.generated);
        all
    }
}

fn require_causal(model: &Model<f32>) -> Result<()> {
    if model.config().attn_mode != AttnMode::Causal {
        return Err(LabError::Unsupported(format!(
            "decoding needs a causal model, this checkpoint is {}",
            model.config().attn_mode
        )));
    }
    Ok(())
}

/// Cached state of one generation.
struct Session<'m> {
    model: &'m Model<f32>,
    vocab: Vocab,
    cache: KvCache<f32>,
    /// Committed tokens whose keys and values are not cached yet; never empty.
    pending: Vec<TokenId>,
}

impl<'m> Session<'m> {
    /// Caches `[bos] + prompt` except its last token.
    fn start(model: &'m Model<f32>, vocab: &Vocab, prompt: &[TokenId], trace: &mut DecodeTrace) -> Result<Self> {
        require_causal(model)?;
        if let Some(&bad) = prompt.iter().find(|&&id| usize::from(id) >= model.config().vocab_size || id == vocab.mask_id) {
            return Err(invalid(format!("prompt token {bad} is not a valid input")));
        }
        let mut ids = Vec::with_capacity(prompt.len() + 1);
        ids.push(vocab.bos_id);
        ids.extend_from_slice(prompt);
        if ids.len() > model.config().max_len {
            return Err(invalid(format!(
                "prompt of {} tokens does not fit the {}-position context",
                prompt.len(),
                model.config().max_len
            )));
        }
        let mut cache = KvCache::new(model.config());
        let split = ids.len() - 1;
        if split > 0 {
            model.forward_cached(&mut cache, &ids[..split])?;
            trace.prefill_forwards += 1;
        }
        Ok(Self {
            model,
            vocab: *vocab,
            cache,
            pending: ids[split..].to_vec(),
        })
    }

    /// Largest block that fits the context, given the rows it must feed.
    fn fit(&self, wanted: usize) -> usize {
        let free = self.cache.remaining().saturating_sub(self.pending.len());
        wanted.min(free + 1)
    }

    /// Decode one block of `k` tokens.
    fn block(&mut self, k: usize, cfg: &DecodeConfig, index: usize) -> Result<(Vec<TokenId>, BlockTrace)> {
        let v = self.model.config().vocab_size;
        let mut trace = BlockTrace { block_index: index, ..Default::default() };
        let mut block: Vec<Option<TokenId>> = vec![None; k];
        let base = self.cache.len();
        let mut anchor: Vec<f32> = Vec::new();
        for iter in 1..=cfg.max_iters {
            let inputs: Vec<TokenId> = block[..k - 1].iter().map(|t| t.unwrap_or(self.vocab.mask_id)).collect();
            // Row logits for every block position, anchor first.
            let mut rows: Vec<&[f32]> = Vec::with_capacity(k);
            let fresh;
            if iter == 1 {
                let mut feed = self.pending.clone();
                feed.extend_from_slice(&inputs);
                fresh = self.model.forward_cached(&mut self.cache, &feed)?;
                trace.forwards += 1;
                trace.positions += feed.len();
                let p = self.pending.len();
                anchor = fresh[(p - 1) * v..p * v].to_vec();
                rows.push(&anchor);
                rows.extend(fresh[p * v..].chunks_exact(v));
            } else {
                fresh = if inputs.is_empty() {
                    Vec::new()
                } else {
                    trace.forwards += 1;
                    trace.positions += inputs.len();
                    self.model.forward_cached(&mut self.cache, &inputs)?
                };
                rows.push(&anchor);
                rows.extend(fresh.chunks_exact(v));
            }
            self.cache.truncate(base + self.pending.len());

            let last = iter == cfg.max_iters;
            let mut commits = Vec::new();
            for (i, slot) in block.iter().enumerate() {
                if slot.is_some() {
                    continue;
                }
                let (token, conf) = self.choose(rows[i], cfg, index, iter, i);
                if conf > cfg.threshold || last {
                    commits.push((i, token, conf));
                }
            }
            trace.iterations = iter;
            trace.committed_per_iter.push(commits.len());
            for (i, token, conf) in commits {
                block[i] = Some(token);
                trace.confidences.push(conf);
            }
            if block.iter().all(Option::is_some) {
                break;
            }
        }
        let tokens: Vec<TokenId> = block.into_iter().map(|t| t.expect("every position committed")).collect();
        self.pending = tokens.clone();
        Ok((tokens, trace))
    }

    /// Token for one position and the max probability of its distribution.
    fn choose(&self, logits: &[f32], cfg: &DecodeConfig, block: usize, iter: usize, pos: usize) -> (TokenId, f64) {
        let probs = softmax(logits);
        let (best, &max) = probs
            .iter()
            .enumerate()
            .filter(|&(id, _)| !self.vocab.is_special(id as TokenId))
            .fold((0, &f32::NEG_INFINITY), |acc, x| if *x.1 > *acc.1 { x } else { acc });
        if cfg.temperature == 0.0 {
            return (best as TokenId, max as f64);
        }
        let scaled: Vec<f64> = logits.iter().map(|&x| x as f64 / cfg.temperature).collect();
        let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scaled
            .iter()
            .enumerate()
            .map(|(id, &x)| if self.vocab.is_special(id as TokenId) { 0.0 } else { (x - m).exp() })
            .collect();
        let total: f64 = weights.iter().sum();
        let key = (iter as u64) << 32 | pos as u64;
        let mut u = stream(cfg.seed, Purpose::Decode, block as u64, key).random::<f64>() * total;
        for (id, w) in weights.iter().enumerate() {
            if u < *w {
                return (id as TokenId, max as f64);
            }
            u -= w;
        }
        (best as TokenId, max as f64)
    }
}

/// Greedy next-token decoding, one cached forward per token.
pub fn decode_arm(model: &Model<f32>, vocab: &Vocab, prompt: &[TokenId], n_tokens: usize) -> Result<Generation> {
    let cfg = DecodeConfig { block_size: 1, threshold: 0.0, max_iters: 1, max_new_tokens: n_tokens, ..Default::default() };
    generate(model, vocab, prompt, &cfg)
}

/// Block decoding until `max_new_tokens` are produced or the context is full.
pub fn generate(model: &Model<f32>, vocab: &Vocab, prompt: &[TokenId], cfg: &DecodeConfig) -> Result<Generation> {
    cfg.validate()?;
    let mut trace = DecodeTrace::default();
    let mut generated = Vec::with_capacity(cfg.max_new_tokens);
    if cfg.max_new_tokens == 0 {
        require_causal(model)?;
        return Ok(Generation { prompt: prompt.to_vec(), generated, trace });
    }
    let mut session = Session::start(model, vocab, prompt, &mut trace)?;
    while generated.len() < cfg.max_new_tokens {
        let wanted = cfg.block_size.min(cfg.max_new_tokens - generated.len());
        let k = session.fit(wanted);
        if k == 0 {
            trace.truncated = true;
            break;
        }
        if k < wanted {
            trace.truncated = true;
        }
        let (tokens, block) = session.block(k, cfg, trace.blocks.len())?;
        generated.extend_from_slice(&tokens);
        trace.push(block, tokens.len());
        if trace.truncated {
            break;
        }
    }
    Ok(Generation { prompt: prompt.to_vec(), generated, trace })
}

/// Block decoding that reruns the full uncached forward for every iteration.
/// Reference semantics for [`generate`]; no cache, no context budgeting beyond `max_len`.
pub fn generate_uncached(model: &Model<f32>, vocab: &Vocab, prompt: &[TokenId], cfg: &DecodeConfig) -> Result<Generation> {
    cfg.validate()?;
    require_causal(model)?;
    let v = model.config().vocab_size;
    let mut seq = vec![vocab.bos_id];
    seq.extend_from_slice(prompt);
    let mut trace = DecodeTrace::default();
    let mut generated = Vec::new();
    // The session is only used for its token choice rule.
    let chooser = Session { model, vocab: *vocab, cache: KvCache::new(model.config()), pending: vec![vocab.bos_id] };
    while generated.len() < cfg.max_new_tokens {
        let wanted = cfg.block_size.min(cfg.max_new_tokens - generated.len());
        let k = wanted.min((model.config().max_len + 1).saturating_sub(seq.len()));
        if k == 0 {
            trace.truncated = true;
            break;
        }
        if k < wanted {
            trace.truncated = true;
        }
        let index = trace.blocks.len();
        let mut bt = BlockTrace { block_index: index, ..Default::default() };
        let mut block: Vec<Option<TokenId>> = vec![None; k];
        for iter in 1..=cfg.max_iters {
            let mut feed = seq.clone();
            feed.extend(block[..k - 1].iter().map(|t| t.unwrap_or(vocab.mask_id)));
            let logits = model.forward(&feed, AttnMode::Causal)?;
            bt.forwards += 1;
            let anchor = seq.len() - 1;
            let last = iter == cfg.max_iters;
            let mut commits = Vec::new();
            for (i, slot) in block.iter().enumerate() {
                if slot.is_none() {
                    let row = &logits[(anchor + i) * v..(anchor + i + 1) * v];
                    let (token, conf) = chooser.choose(row, cfg, index, iter, i);
                    if conf > cfg.threshold || last {
                        commits.push((i, token, conf));
                    }
                }
            }
            bt.iterations = iter;
            bt.committed_per_iter.push(commits.len());
            for (i, token, conf) in commits {
                block[i] = Some(token);
                bt.confidences.push(conf);
            }
            if block.iter().all(Option::is_some) {
                break;
            }
        }
        let tokens: Vec<TokenId> = block.into_iter().map(|t| t.expect("committed")).collect();
        seq.extend_from_slice(&tokens);
        generated.extend_from_slice(&tokens);
        trace.push(bt, tokens.len());
        if trace.truncated {
            break;
        }
    }
    Ok(Generation { prompt: prompt.to_vec(), generated, trace })
}

/// `exp(mean next-token NLL)` of clean data under a causal model.
pub fn eval_ppl(model: &Model<f32>, data: &Dataset, vocab: &Vocab) -> Result<f64> {
    require_causal(model)?;
    if data.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let objective = ObjectiveConfig { objective: Objective::Arm, ..Default::default() };
    let nll = crate::trainer::evaluate(model, data, &objective, vocab, 0, 0)?;
    Ok(nll.exp())
}

/// Mean NLL of `generated` under `model` with teacher forcing after `[bos] + prompt`.
pub fn teacher_forced_nll(model: &Model<f32>, vocab: &Vocab, prompt: &[TokenId], generated: &[TokenId]) -> Result<f64> {
    if generated.is_empty() {
        return Err(invalid("nothing to score"));
    }
    let mut feed = vec![vocab.bos_id];
    feed.extend_from_slice(prompt);
    feed.extend_from_slice(&generated[..generated.len() - 1]);
    let max_len = model.config().max_len;
    if feed.len() > max_len {
        return Err(invalid(format!("scored text of {} rows exceeds max_len {max_len}", feed.len())));
    }
    let logits = model.forward(&feed, AttnMode::Causal)?;
    let v = model.config().vocab_size;
    let start = prompt.len();
    let total: f64 = generated
        .iter()
        .enumerate()
        .map(|(i, &t)| crate::model::cross_entropy(&logits[(start + i) * v..(start + i + 1) * v], usize::from(t)))
        .sum();
    Ok(total / generated.len() as f64)
}

/// One decoding setting of a throughput/quality grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSetting {
    pub block_size: usize,
    pub max_iters: usize,
    pub threshold: f64,
}

impl GridSetting {
    /// `K:T` or `K:T:tau`; `tau` defaults to `default_tau`.
    pub fn parse(s: &str, default_tau: f64) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| x.trim().parse::<usize>().map_err(|_| invalid(format!("bad grid entry `{s}`")));
        let (block_size, max_iters, threshold) = match parts.as_slice() {
            [k, t] => (num(k)?, num(t)?, default_tau),
            [k, t, tau] => (
                num(k)?,
                num(t)?,
                tau.trim().parse::<f64>().map_err(|_| invalid(format!("bad grid entry `{s}`")))?,
            ),
            _ => return Err(invalid(format!("grid entries look like K:T or K:T:tau, got `{s}`"))),
        };
        Ok(Self { block_size, max_iters, threshold })
    }
}

/// Aggregate decoding statistics for one grid setting.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub setting: GridSetting,
    pub prompts: usize,
    pub tokens: usize,
    pub forwards: usize,
    pub blocks: usize,
    pub iterations: usize,
    /// Mean per-token NLL of the generations scored by the model itself.
    pub model_nll: f64,
    /// Mean per-token NLL under the true source, when known.
    pub source_nll: Option<f64>,
    /// Decoding wall time; not deterministic.
    pub wall_ms: f64,
}

impl GridRow {
    pub fn tokens_per_forward(&self) -> f64 {
        if self.forwards == 0 {
            0.0
        } else {
            self.tokens as f64 / self.forwards as f64
        }
    }

    pub fn mean_iterations(&self) -> f64 {
        self.iterations as f64 / self.blocks.max(1) as f64
    }
}

pub const GRID_HEADER: &str =
    "block_size,max_iters,threshold,prompts,tokens,forwards,tokens_per_forward,mean_iters,model_nll,model_ppl,source_nll,source_ppl";

impl GridRow {
    /// Deterministic columns only; timing is reported separately.
    pub fn csv(&self) -> String {
        let (snll, sppl) = match self.source_nll {
            Some(x) => (format!("{x:.6}"), format!("{:.6}", x.exp())),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{:.6},{:.4},{:.6},{:.6},{snll},{sppl}",
            self.setting.block_size,
            self.setting.max_iters,
            self.setting.threshold,
            self.prompts,
            self.tokens,
            self.forwards,
            self.tokens_per_forward(),
            self.mean_iterations(),
            self.model_nll,
            self.model_nll.exp(),
        )
    }
}

/// Decodes `new_tokens` after each prompt under every setting and scores the
/// generations with teacher forcing. The source judge scores the first
/// generated symbol against the last prompt symbol, so prompts must be
/// non-empty when a source is given.
pub fn bench_decode(
    model: &Model<f32>,
    vocab: &Vocab,
    prompts: &[Vec<TokenId>],
    new_tokens: usize,
    settings: &[GridSetting],
    source: Option<&crate::markov::MarkovSource>,
    seed: u64,
) -> Result<Vec<GridRow>> {
    if prompts.is_empty() || new_tokens == 0 {
        return Err(invalid("decode benchmark needs prompts and a positive token budget"));
    }
    if source.is_some() && prompts.iter().any(|p| p.is_empty()) {
        return Err(invalid("scoring against the source needs non-empty prompts"));
    }
    let mut rows = Vec::with_capacity(settings.len());
    for &setting in settings {
        let cfg = DecodeConfig {
            block_size: setting.block_size,
            threshold: setting.threshold,
            max_iters: setting.max_iters,
            max_new_tokens: new_tokens,
            temperature: 0.0,
            seed,
        };
        let start = std::time::Instant::now();
        let gens = prompts
            .iter()
            .map(|p| generate(model, vocab, p, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut row = GridRow {
            setting,
            prompts: prompts.len(),
            tokens: 0,
            forwards: 0,
            blocks: 0,
            iterations: 0,
            model_nll: 0.0,
            source_nll: source.map(|_| 0.0),
            wall_ms,
        };
        let mut model_sum = 0.0;
        let mut source_sum = 0.0;
        for g in &gens {
            let n = g.generated.len();
            if n == 0 {
                continue;
            }
            row.tokens += n;
            row.forwards += g.trace.forwards;
            row.blocks += g.trace.blocks.len();
            row.iterations += g.trace.blocks.iter().map(|b| b.iterations).sum::<usize>();
            model_sum += teacher_forced_nll(model, vocab, &g.prompt, &g.generated)? * n as f64;
            if let Some(src) = source {
                let mut prev = usize::from(*g.prompt.last().expect("checked non-empty"));
                for &t in &g.generated {
                    source_sum -= src.transition_log_prob(prev, usize::from(t))?;
                    prev = usize::from(t);
                }
            }
        }
        let denom = row.tokens.max(1) as f64;
        row.model_nll = model_sum / denom;
        row.source_nll = source.map(|_| source_sum / denom);
        rows.push(row);
    }
    Ok(rows)
}
