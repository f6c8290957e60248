//! Small-instance checks of the masking and weighting design: context counts
//! per objective, retained mutual information, mask-marginal continuity and
//! the loss-weight bound.
//!
//! Monte Carlo work is split into fixed-size shards, each with its own rng
//! substream; shard results are merged in shard order, so every report is a
//! pure function of its config and seed regardless of thread count.

use std::collections::HashSet;
use std::fmt::Write as _;

use num_bigint::BigUint;
use num_traits::One;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{TokenId, Vocab};
use crate::corruption::{block_mask, mask_count, tail_window, CorruptionConfig, MaskStrategy};
use crate::error::{invalid, Result};
use crate::markov::MarkovSource;
use crate::model::{AttnMode, Model, ModelConfig};
use crate::objectives::{build_card_from_pattern, Objective};
use crate::corruption::MaskPattern;
use crate::rng::{stream, Purpose};
use crate::weighting::{WeightConfig, WeightVector};

const SHARD: usize = 1024;

/// Runs `f(shard_index, sample_range)` over `n` samples in parallel and
/// returns the shard results in order.
fn sharded<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, std::ops::Range<usize>) -> T + Sync,
{
    let shards = n.div_ceil(SHARD);
    (0..shards)
        .into_par_iter()
        .map(|s| f(s as u64, s * SHARD..((s + 1) * SHARD).min(n)))
        .collect()
}

fn mean_se(sum: f64, sum_sq: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 { ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
    (mean, (var / nf).sqrt())
}

// ---------------------------------------------------------------------------
// Context counts

/// Number of distinct (position, context) conditionals each objective learns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityReport {
    pub len: usize,
    pub block_size: Option<usize>,
    pub arm: BigUint,
    pub card: BigUint,
    pub bd3lm: Option<BigUint>,
    pub mdlm: BigUint,
}

pub const COMPLEXITY_HEADER: &str = "L,K,N_ARM,N_CARD,N_BD3LM,N_MDLM";

impl ComplexityReport {
    pub fn csv_row(&self) -> String {
        let k = self.block_size.map(|k| k.to_string()).unwrap_or_default();
        let bd = self.bd3lm.as_ref().map(|b| b.to_string()).unwrap_or_default();
        format!("{},{k},{},{},{bd},{}", self.len, self.arm, self.card, self.mdlm)
    }
}

fn pow2(e: usize) -> BigUint {
    BigUint::one() << e
}

/// `N_ARM = L`, `N_CARD = 2^L - 1`, `N_BD3LM = L 2^(K-1)`, `N_MDLM = L 2^(L-1)`.
/// The block count is omitted when `block_size` is `None`.
pub fn complexity(len: usize, block_size: Option<usize>) -> Result<ComplexityReport> {
    if len == 0 {
        return Err(invalid("sequence length must be at least 1"));
    }
    if let Some(k) = block_size {
        if k == 0 || len % k != 0 {
            return Err(invalid(format!("block size {k} must divide sequence length {len}")));
        }
    }
    let l = BigUint::from(len);
    Ok(ComplexityReport {
        len,
        block_size,
        arm: l.clone(),
        card: pow2(len) - BigUint::one(),
        bd3lm: block_size.map(|k| &l * pow2(k - 1)),
        mdlm: &l * pow2(len - 1),
    })
}

pub const MAX_BRUTEFORCE_LEN: usize = 16;

/// Enumerates every full mask assignment and every target position, and counts
/// the distinct (position, visible context) pairs the objective conditions on.
///
/// ARM sees a clean prefix; CARD the noised strict prefix; MDLM every other
/// position of the sequence; BD3LM the other positions of the target's block
/// behind a clean history.
pub fn count_contexts_bruteforce(objective: Objective, len: usize, block_size: usize) -> Result<u64> {
    if len == 0 || len > MAX_BRUTEFORCE_LEN {
        return Err(invalid(format!(
            "brute-force enumeration needs 1 <= L <= {MAX_BRUTEFORCE_LEN}, got {len}"
        )));
    }
    if objective == Objective::Bd3lm && (block_size == 0 || len % block_size != 0) {
        return Err(invalid(format!("block size {block_size} must divide sequence length {len}")));
    }
    let mut seen: HashSet<(usize, u32)> = HashSet::new();
    for pattern in 0u32..(1u32 << len) {
        for pos in 0..len {
            let bit = 1u32 << pos;
            let context = match objective {
                Objective::Arm => 0,
                Objective::Card => pattern & (bit - 1),
                Objective::Mdlm => {
                    if pattern & bit == 0 {
                        continue;
                    }
                    pattern & !bit
                }
                Objective::Bd3lm => {
                    if pattern & bit == 0 {
                        continue;
                    }
                    let lo = pos / block_size * block_size;
                    let block_bits = ((1u32 << block_size) - 1) << lo;
                    pattern & block_bits & !bit
                }
            };
            seen.insert((pos, context));
        }
    }
    Ok(seen.len() as u64)
}

/// Distinct (position, noised strict prefix) pairs for CARD.
pub fn count_card_contexts_bruteforce(len: usize) -> Result<u64> {
    count_contexts_bruteforce(Objective::Card, len, 1)
}

// ---------------------------------------------------------------------------
// Retained mutual information

#[derive(Debug, Clone, PartialEq)]
pub struct MiConfig {
    pub len: usize,
    pub t_grid: Vec<f64>,
    pub strategies: Vec<MaskStrategy>,
    pub samples: usize,
    pub tail_factor: f64,
    pub seed: u64,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            len: 16,
            t_grid: vec![0.25, 0.5, 0.75],
            strategies: vec![MaskStrategy::SoftTail, MaskStrategy::Uniform],
            samples: 10_000,
            tail_factor: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiRow {
    pub strategy: MaskStrategy,
    pub t: f64,
    pub mean: f64,
    pub se: f64,
}

/// Soft-tail minus uniform retained information at one noise time.
#[derive(Debug, Clone, PartialEq)]
pub struct MiMargin {
    pub t: f64,
    pub margin: f64,
    pub se: f64,
}

impl MiMargin {
    /// Margin in standard errors.
    pub fn z(&self) -> f64 {
        if self.se > 0.0 {
            self.margin / self.se
        } else if self.margin > 0.0 {
            f64::INFINITY
        } else if self.margin < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiReport {
    /// Information with nothing masked.
    pub full: f64,
    /// `gain[i]`: information position `i` contributes when visible.
    pub gain: Vec<f64>,
    pub rows: Vec<MiRow>,
    pub margins: Vec<MiMargin>,
}

pub const MI_HEADER: &str = "strategy,t,retained_mean,retained_se,full";
pub const MI_MARGIN_HEADER: &str = "t,margin,margin_se,z";

impl MiReport {
    pub fn csv(&self) -> String {
        let mut out = format!("{MI_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.9},{:.9},{:.9}", r.strategy.name(), r.t, r.mean, r.se, self.full);
        }
        out
    }

    pub fn margins_csv(&self) -> String {
        let mut out = format!("{MI_MARGIN_HEADER}\n");
        for m in &self.margins {
            let _ = writeln!(out, "{},{:.9},{:.9},{:.3}", m.t, m.margin, m.se, m.z());
        }
        out
    }
}

/// `gain[i] = sum_{n > i} I(x_n; x_i)`, so that the information retained by a
/// pattern is the sum of `gain` over its visible positions.
pub fn mi_gains(source: &MarkovSource, len: usize) -> Result<Vec<f64>> {
    let lagged = (1..len.max(1))
        .map(|lag| source.lagged_mutual_information(lag))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..len).map(|i| lagged[..len - 1 - i].iter().sum()).collect())
}

pub fn mi_retention(source: &MarkovSource, cfg: &MiConfig) -> Result<MiReport> {
    if !source.is_ergodic() {
        return Err(invalid("mutual-information analysis needs an ergodic chain"));
    }
    if cfg.len == 0 || cfg.len > 32 {
        return Err(invalid(format!("sequence length must be in 1..=32, got {}", cfg.len)));
    }
    if cfg.samples == 0 {
        return Err(invalid("sample count must be positive"));
    }
    if let Some(t) = cfg.t_grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(invalid(format!("noise time {t} outside [0, 1]")));
    }
    let gain = mi_gains(source, cfg.len)?;
    let full: f64 = gain.iter().sum();
    let mut rows = Vec::new();
    for (si, &strategy) in cfg.strategies.iter().enumerate() {
        let corruption = CorruptionConfig { strategy, tail_factor: cfg.tail_factor, ..Default::default() };
        corruption.validate(cfg.len)?;
        for (ti, &t) in cfg.t_grid.iter().enumerate() {
            let tag = (si as u64) << 32 | ti as u64;
            let shards = sharded(cfg.samples, |shard, range| -> Result<(f64, f64)> {
                let mut rng = stream(cfg.seed, Purpose::MonteCarlo, tag, shard);
                let (mut s, mut sq) = (0.0, 0.0);
                for _ in range {
                    let pattern = corruption.sample(cfg.len, t, &mut rng)?;
                    let r: f64 = pattern
                        .masked()
                        .iter()
                        .zip(&gain)
                        .filter(|(&m, _)| !m)
                        .map(|(_, g)| g)
                        .sum();
                    s += r;
                    sq += r * r;
                }
                Ok((s, sq))
            });
            let (mut s, mut sq) = (0.0, 0.0);
            for shard in shards {
                let (a, b) = shard?;
                s += a;
                sq += b;
            }
            let (mean, se) = mean_se(s, sq, cfg.samples);
            rows.push(MiRow { strategy, t, mean, se });
        }
    }
    let find = |strategy: MaskStrategy, t: f64| rows.iter().find(|r| r.strategy == strategy && r.t == t);
    let margins = cfg
        .t_grid
        .iter()
        .filter_map(|&t| {
            let soft = find(MaskStrategy::SoftTail, t)?;
            let uni = find(MaskStrategy::Uniform, t)?;
            Some(MiMargin { t, margin: soft.mean - uni.mean, se: soft.se.hypot(uni.se) })
        })
        .collect();
    Ok(MiReport { full, gain, rows, margins })
}

/// Expected retained information under soft-tail masking, computed exactly
/// from the per-position mask marginals at a fixed `t`.
pub fn soft_tail_expected_retention(gain: &[f64], t: f64, tail_factor: f64) -> f64 {
    let len = gain.len();
    let n = mask_count(len, t);
    let w = tail_window(len, n, tail_factor).max(n);
    let p = n as f64 / w as f64;
    gain.iter()
        .enumerate()
        .map(|(i, g)| if i >= len - w { (1.0 - p) * g } else { *g })
        .sum()
}

// ---------------------------------------------------------------------------
// Mask-marginal continuity

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityConfig {
    pub len: usize,
    pub samples: usize,
    /// Fixed noise time; `None` draws `t ~ U[0, 1]` per sample.
    pub t: Option<f64>,
    pub tail_factor: f64,
    /// Block whose example is profiled for the block strategy; defaults to the
    /// second block when there is one.
    pub block: Option<usize>,
    pub seed: u64,
}

impl Default for ContinuityConfig {
    fn default() -> Self {
        Self { len: 64, samples: 100_000, t: None, tail_factor: 2.0, block: None, seed: 0 }
    }
}

/// Step of the block profile at the lower edge of the profiled block
/// (the upper edge when it is the first block).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryJump {
    /// The position inside the block next to the boundary.
    pub index: usize,
    pub jump: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    pub strategy: MaskStrategy,
    pub samples: usize,
    pub counts: Vec<u64>,
    pub marginals: Vec<f64>,
    pub se: Vec<f64>,
    /// `diffs[i] = marginals[i + 1] - marginals[i]`.
    pub diffs: Vec<f64>,
    /// Standard error of each adjacent difference, from the paired samples.
    pub diff_se: Vec<f64>,
    pub boundary: Option<BoundaryJump>,
}

pub const PROFILE_HEADER: &str = "position,count,marginal,marginal_se,diff_next,diff_next_se";

impl ProfileReport {
    /// Index `i` of the largest `|marginals[i + 1] - marginals[i]|`.
    pub fn max_adjacent(&self) -> Option<(usize, f64, f64)> {
        self.diffs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, d)| (i, d.abs(), self.diff_se[i]))
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{PROFILE_HEADER}\n");
        for i in 0..self.marginals.len() {
            let (d, dse) = match self.diffs.get(i) {
                Some(d) => (format!("{d:.9}"), format!("{:.9}", self.diff_se[i])),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(out, "{i},{},{:.9},{:.9},{d},{dse}", self.counts[i], self.marginals[i], self.se[i]);
        }
        out
    }
}

pub fn continuity_profile(strategy: MaskStrategy, cfg: &ContinuityConfig) -> Result<ProfileReport> {
    let len = cfg.len;
    if len < 8 {
        return Err(invalid(format!("profile needs L >= 8, got {len}")));
    }
    if cfg.samples < 2 {
        return Err(invalid("profile needs at least two samples"));
    }
    if let Some(t) = cfg.t {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("noise time {t} outside [0, 1]")));
        }
    }
    let corruption = CorruptionConfig { strategy, tail_factor: cfg.tail_factor, ..Default::default() };
    corruption.validate(len)?;
    let block = match strategy {
        MaskStrategy::Block { size } => {
            let blocks = len / size;
            let b = cfg.block.unwrap_or(if blocks > 1 { 1 } else { 0 });
            if b >= blocks {
                return Err(invalid(format!("block {b} out of range for {blocks} blocks")));
            }
            Some((size, b))
        }
        _ => None,
    };
    let shards = sharded(cfg.samples, |shard, range| -> Result<(Vec<u64>, Vec<u64>)> {
        let mut rng = stream(cfg.seed, Purpose::MonteCarlo, 0xC0, shard);
        let mut hits = vec![0u64; len];
        let mut flips = vec![0u64; len - 1];
        for _ in range {
            let t = match cfg.t {
                Some(t) => t,
                None => rng.random::<f64>(),
            };
            let pattern = match block {
                Some((size, b)) => block_mask(len, t, size, b, &mut rng)?,
                None => corruption.sample(len, t, &mut rng)?,
            };
            let m = pattern.masked();
            for (h, &x) in hits.iter_mut().zip(m) {
                *h += x as u64;
            }
            for (f, w) in flips.iter_mut().zip(m.windows(2)) {
                *f += (w[0] != w[1]) as u64;
            }
        }
        Ok((hits, flips))
    });
    let mut counts = vec![0u64; len];
    let mut flips = vec![0u64; len - 1];
    for shard in shards {
        let (h, f) = shard?;
        counts.iter_mut().zip(h).for_each(|(a, b)| *a += b);
        flips.iter_mut().zip(f).for_each(|(a, b)| *a += b);
    }
    let n = cfg.samples as f64;
    let marginals: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let se = marginals.iter().map(|p| (p * (1.0 - p) / (n - 1.0)).sqrt()).collect();
    let diffs: Vec<f64> = marginals.windows(2).map(|w| w[1] - w[0]).collect();
    // The paired difference takes values in {-1, 0, 1}; E[d^2] is the flip rate.
    let diff_se: Vec<f64> = diffs
        .iter()
        .zip(&flips)
        .map(|(d, &f)| ((f as f64 / n - d * d).max(0.0) / (n - 1.0)).sqrt())
        .collect();
    let boundary = block.map(|(size, b)| {
        let (index, i) = if b > 0 { (b * size, b * size - 1) } else { (size - 1, size - 1) };
        let jump = diffs[i].abs();
        BoundaryJump { index, jump, se: diff_se[i] }
    });
    Ok(ProfileReport { strategy, samples: cfg.samples, counts, marginals, se, diffs, diff_se, boundary })
}

/// Exact per-position soft-tail mask marginal with `t ~ U[0, 1]`.
pub fn soft_tail_marginals_exact(len: usize, tail_factor: f64) -> Vec<f64> {
    // floor(L t) = k on [k/L, (k+1)/L), each of probability 1/L.
    let mut m = vec![0.0; len];
    for k in 0..len {
        let t = k as f64 / len as f64;
        let n = mask_count(len, t);
        let w = tail_window(len, n, tail_factor).max(n);
        let p = n as f64 / w as f64 / len as f64;
        for x in &mut m[len - w..] {
            *x += p;
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Weight bound

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSweepConfig {
    pub len: usize,
    pub patterns: usize,
    pub corruption: CorruptionConfig,
    pub weighting: WeightConfig,
    /// Width of the score bins; bin 0 holds `S = 0` exactly.
    pub bin_width: f64,
    /// Patterns used for gradient norms on an untrained model; 0 skips them.
    pub grad_patterns: usize,
    pub seed: u64,
}

impl Default for WeightSweepConfig {
    fn default() -> Self {
        Self {
            len: 16,
            patterns: 10_000,
            corruption: CorruptionConfig::default(),
            weighting: WeightConfig::default(),
            bin_width: 0.5,
            grad_patterns: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub mean_w: f64,
    pub min_w: f64,
    pub max_w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub unweighted: f64,
    pub weighted: f64,
}

impl GradBin {
    pub fn ratio(&self) -> f64 {
        self.weighted / self.unweighted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightReport {
    pub positions: u64,
    /// Largest `w_n S_n` seen.
    pub max_ws: f64,
    pub bins: Vec<WeightBin>,
    pub grad_bins: Vec<GradBin>,
}

pub const WEIGHT_HEADER: &str = "s_lo,s_hi,count,mean_w,min_w,max_w";
pub const GRAD_HEADER: &str = "s_lo,s_hi,count,grad_norm_unweighted,grad_norm_weighted,ratio";

impl WeightReport {
    pub fn csv(&self) -> String {
        let mut out = format!("{WEIGHT_HEADER}\n");
        for b in self.bins.iter().filter(|b| b.count > 0) {
            let _ = writeln!(out, "{},{},{},{:.9},{:.9},{:.9}", b.lo, b.hi, b.count, b.mean_w, b.min_w, b.max_w);
        }
        out
    }

    pub fn grad_csv(&self) -> String {
        let mut out = format!("{GRAD_HEADER}\n");
        for b in self.grad_bins.iter().filter(|b| b.count > 0) {
            let _ = writeln!(
                out,
                "{},{},{},{:.9},{:.9},{:.6}",
                b.lo, b.hi, b.count, b.unweighted, b.weighted, b.ratio()
            );
        }
        out
    }
}

fn bin_index(s: f64, width: f64) -> usize {
    if s <= 0.0 {
        0
    } else {
        (s / width).ceil() as usize
    }
}

fn bin_edges(i: usize, width: f64) -> (f64, f64) {
    if i == 0 {
        (0.0, 0.0)
    } else {
        ((i - 1) as f64 * width, i as f64 * width)
    }
}

fn toy_model(len: usize, vocab: &Vocab, seed: u64) -> Result<Model<f32>> {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        max_len: len,
        vocab_size: vocab.size,
        attn_mode: AttnMode::Causal,
    };
    Model::init(cfg, seed)
}

pub fn weight_bound_sweep(cfg: &WeightSweepConfig) -> Result<WeightReport> {
    cfg.weighting.validate()?;
    cfg.corruption.validate(cfg.len)?;
    if cfg.len == 0 || cfg.patterns == 0 {
        return Err(invalid("weight sweep needs a positive length and pattern count"));
    }
    if !(cfg.bin_width > 0.0 && cfg.bin_width.is_finite()) {
        return Err(invalid(format!("bin width must be positive, got {}", cfg.bin_width)));
    }
    type Acc = (f64, Vec<(u64, f64, f64, f64)>);
    let shards = sharded(cfg.patterns, |shard, range| -> Result<Acc> {
        let mut rng = stream(cfg.seed, Purpose::MonteCarlo, 0xB0, shard);
        let mut max_ws = 0.0f64;
        let mut bins: Vec<(u64, f64, f64, f64)> = Vec::new();
        for _ in range {
            let t = rng.random::<f64>();
            let pattern = cfg.corruption.sample(cfg.len, t, &mut rng)?;
            let wv = WeightVector::compute(pattern.masked(), &cfg.weighting)?;
            for (&w, &s) in wv.weights.iter().zip(&wv.scores) {
                max_ws = max_ws.max(w * s);
                let i = bin_index(s, cfg.bin_width);
                if bins.len() <= i {
                    bins.resize(i + 1, (0, 0.0, f64::INFINITY, f64::NEG_INFINITY));
                }
                let b = &mut bins[i];
                b.0 += 1;
                b.1 += w;
                b.2 = b.2.min(w);
                b.3 = b.3.max(w);
            }
        }
        Ok((max_ws, bins))
    });
    let mut max_ws = 0.0f64;
    let mut merged: Vec<(u64, f64, f64, f64)> = Vec::new();
    for shard in shards {
        let (m, bins) = shard?;
        max_ws = max_ws.max(m);
        if merged.len() < bins.len() {
            merged.resize(bins.len(), (0, 0.0, f64::INFINITY, f64::NEG_INFINITY));
        }
        for (a, b) in merged.iter_mut().zip(bins) {
            a.0 += b.0;
            a.1 += b.1;
            a.2 = a.2.min(b.2);
            a.3 = a.3.max(b.3);
        }
    }
    let positions = merged.iter().map(|b| b.0).sum();
    let bins = merged
        .into_iter()
        .enumerate()
        .map(|(i, (count, sum, min_w, max_w))| {
            let (lo, hi) = bin_edges(i, cfg.bin_width);
            let mean_w = if count > 0 { sum / count as f64 } else { f64::NAN };
            WeightBin { lo, hi, count, mean_w, min_w, max_w }
        })
        .collect();
    let grad_bins = if cfg.grad_patterns > 0 { gradient_bins(cfg)? } else { Vec::new() };
    Ok(WeightReport { positions, max_ws, bins, grad_bins })
}

/// Per-position gradient norms of the CARD loss on an untrained model, binned
/// by ambiguity score. One random position is measured per pattern.
fn gradient_bins(cfg: &WeightSweepConfig) -> Result<Vec<GradBin>> {
    let vocab = Vocab::symbolic(4)?;
    let model = toy_model(cfg.len, &vocab, cfg.seed)?;
    let shards = sharded(cfg.grad_patterns, |shard, range| -> Result<Vec<(usize, f64, f64)>> {
        let mut rng = stream(cfg.seed, Purpose::MonteCarlo, 0xB1, shard);
        let mut grads = model.params().clone();
        let mut out = Vec::new();
        for _ in range {
            let x0: Vec<TokenId> = (0..cfg.len)
                .map(|_| rng.random_range(0..vocab.data_symbols()) as TokenId)
                .collect();
            let t = rng.random::<f64>();
            let pattern: MaskPattern = cfg.corruption.sample(cfg.len, t, &mut rng)?;
            let ex = build_card_from_pattern(&x0, cfg.len, &pattern, &cfg.weighting, &vocab)?;
            let scores = WeightVector::compute(pattern.masked(), &cfg.weighting)?.scores;
            let n = rng.random_range(0..cfg.len);
            let supervision: Vec<bool> = (0..cfg.len).map(|r| r == n).collect();
            let ones = vec![1.0; cfg.len];
            grads.zero_();
            model.accumulate(&ex.input, ex.attn_mode, &ones, &ex.targets, &supervision, 1.0, &mut grads)?;
            let g = grads.sum_squares().sqrt();
            out.push((bin_index(scores[n], cfg.bin_width), g, ex.weights[n] * g));
        }
        Ok(out)
    });
    let mut bins: Vec<GradBin> = Vec::new();
    for shard in shards {
        for (i, g, wg) in shard? {
            while bins.len() <= i {
                let (lo, hi) = bin_edges(bins.len(), cfg.bin_width);
                bins.push(GradBin { lo, hi, count: 0, unweighted: 0.0, weighted: 0.0 });
            }
            let b = &mut bins[i];
            b.count += 1;
            b.unweighted += g;
            b.weighted += wg;
        }
    }
    for b in &mut bins {
        if b.count > 0 {
            b.unweighted /= b.count as f64;
            b.weighted /= b.count as f64;
        }
    }
    Ok(bins)
}

#[cfg(test)]
mod tests;
