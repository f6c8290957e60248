//! Training examples for the four paradigms and their batch losses.
//!
//! Every example is expressed as model rows: `input[r]` is fed at row `r`
//! and, where `supervision[r]` holds, row `r` is scored against
//! `targets[r]` with weight `weights[r]`.
//!
//! * ARM and CARD feed `[bos] + x[..L-1]`, so row `r` predicts `x0[r]` from
//!   the tokens strictly before it.
//! * MDLM feeds `[bos] + x^t` with full attention; row `r >= 1` predicts
//!   `x0[r-1]`, the clean token at its own input position.
//! * BD3LM builds one example per block `b`, feeding
//!   `[bos] + x[..(b+1)K - 1]` under block-causal attention, with the
//!   prefix clean and block `b` noised.

use rand::Rng;

use crate::corpus::{TokenId, Vocab};
use crate::corruption::{apply_mask, block_mask, sample_t, uniform_mask, CorruptionConfig, MaskPattern, MaskStrategy};
use crate::error::{invalid, Result};
use crate::model::{AttnMode, Model, ModelParams, Real};
use crate::weighting::{WeightConfig, WeightVector};

/// Lower end of the masked-diffusion noise interval `(eps, 1]`.
pub const MDLM_EPS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    Arm,
    #[default]
    Card,
    Mdlm,
    Bd3lm,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Arm, Objective::Card, Objective::Mdlm, Objective::Bd3lm];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Arm => "arm",
            Objective::Card => "card",
            Objective::Mdlm => "mdlm",
            Objective::Bd3lm => "bd3lm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| invalid(format!("unknown objective `{s}` (expected arm, card, mdlm or bd3lm)")))
    }

    /// Whether generation can use a causal KV cache with this objective's model.
    pub fn is_causal(self) -> bool {
        matches!(self, Objective::Arm | Objective::Card)
    }

    /// Native attention mode of a model trained with this objective.
    pub fn attn_mode(self, block_size: usize) -> AttnMode {
        match self {
            Objective::Arm | Objective::Card => AttnMode::Causal,
            Objective::Mdlm => AttnMode::Full,
            Objective::Bd3lm => AttnMode::BlockCausal(block_size),
        }
    }

    /// Model rows needed for sequences of length `seq_len`.
    pub fn rows_needed(self, seq_len: usize) -> usize {
        match self {
            Objective::Mdlm => seq_len + 1,
            _ => seq_len,
        }
    }

    /// Model forward passes spent on one training sequence.
    pub fn forwards_per_sequence(self, seq_len: usize, block_size: usize) -> usize {
        match self {
            Objective::Bd3lm => seq_len.div_ceil(block_size),
            _ => 1,
        }
    }
}

/// Denominator of the batch loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossNorm {
    /// Number of supervised positions.
    #[default]
    Count,
    /// Sum of weights over supervised positions.
    WeightSum,
    /// Number of sequences in the batch.
    Sequence,
}

impl LossNorm {
    pub const ALL: [LossNorm; 3] = [LossNorm::Count, LossNorm::WeightSum, LossNorm::Sequence];

    pub fn name(self) -> &'static str {
        match self {
            LossNorm::Count => "count",
            LossNorm::WeightSum => "weight_sum",
            LossNorm::Sequence => "sequence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| invalid(format!("unknown loss normalization `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub objective: Objective,
    pub corruption: CorruptionConfig,
    pub weighting: WeightConfig,
    /// When false, CARD examples are built from clean inputs.
    pub masking: bool,
    /// Block size `K` for BD3LM.
    pub block_size: usize,
    pub mdlm_eps: f64,
    pub loss_norm: LossNorm,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Card,
            corruption: CorruptionConfig::default(),
            weighting: WeightConfig::default(),
            masking: true,
            block_size: 8,
            mdlm_eps: MDLM_EPS,
            loss_norm: LossNorm::Count,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self, seq_len: usize, max_len: usize) -> Result<()> {
        self.corruption.validate(seq_len)?;
        self.weighting.validate()?;
        if !(self.mdlm_eps > 0.0 && self.mdlm_eps < 1.0) {
            return Err(invalid(format!("mdlm eps must lie in (0, 1), got {}", self.mdlm_eps)));
        }
        if self.objective == Objective::Bd3lm && (self.block_size == 0 || seq_len % self.block_size != 0) {
            return Err(invalid(format!(
                "block size {} must divide sequence length {seq_len}",
                self.block_size
            )));
        }
        let rows = self.objective.rows_needed(seq_len);
        if rows > max_len {
            return Err(invalid(format!(
                "{} on sequences of {seq_len} needs {rows} model positions, max_len is {max_len}",
                self.objective.name()
            )));
        }
        Ok(())
    }

    /// Examples for one clean sequence whose first `valid_len` tokens are data.
    pub fn build<R: Rng + ?Sized>(
        &self,
        x0: &[TokenId],
        valid_len: usize,
        vocab: &Vocab,
        rng: &mut R,
    ) -> Result<Vec<TrainingExample>> {
        Ok(match self.objective {
            Objective::Arm => vec![build_arm(x0, valid_len, vocab)?],
            Objective::Card if !self.masking => {
                let pattern = MaskPattern::clean(x0.len());
                vec![build_card_from_pattern(x0, valid_len, &pattern, &self.weighting, vocab)?]
            }
            Objective::Card => vec![build_card(x0, valid_len, &self.corruption, &self.weighting, vocab, rng)?],
            Objective::Mdlm => vec![build_mdlm(x0, valid_len, self.mdlm_eps, vocab, rng)?],
            Objective::Bd3lm => build_bd3lm(x0, valid_len, self.block_size, self.mdlm_eps, vocab, rng)?,
        })
    }
}

/// One model invocation's worth of inputs, targets and per-row loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub weights: Vec<f64>,
    pub supervision: Vec<bool>,
    pub attn_mode: AttnMode,
    /// Noise time, 0 for clean examples.
    pub t: f64,
    pub strategy: Option<MaskStrategy>,
    /// Corruption over the clean sequence positions.
    pub pattern: MaskPattern,
}

impl TrainingExample {
    pub fn rows(&self) -> usize {
        self.input.len()
    }

    pub fn supervised(&self) -> usize {
        self.supervision.iter().filter(|&&s| s).count()
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.supervision)
            .filter(|(_, &s)| s)
            .map(|(w, _)| w)
            .sum()
    }
}

fn check_x0(x0: &[TokenId], valid_len: usize, vocab: &Vocab) -> Result<()> {
    if x0.is_empty() {
        return Err(invalid("sequence is empty"));
    }
    if valid_len == 0 || valid_len > x0.len() {
        return Err(invalid(format!("valid length {valid_len} out of range for {}", x0.len())));
    }
    if let Some(&bad) = x0[..valid_len]
        .iter()
        .find(|&&id| usize::from(id) >= vocab.size || id == vocab.mask_id || id == vocab.bos_id)
    {
        return Err(invalid(format!("clean sequence contains token {bad}")));
    }
    Ok(())
}

/// `[bos] + x[..len-1]`: the causal shift.
fn shifted(x: &[TokenId], bos: TokenId) -> Vec<TokenId> {
    let mut input = Vec::with_capacity(x.len());
    input.push(bos);
    input.extend_from_slice(&x[..x.len() - 1]);
    input
}

/// Extend a pattern over the data prefix with clean pad positions.
fn pad_pattern(pattern: MaskPattern, len: usize) -> MaskPattern {
    let t = pattern.t();
    let mut masked = pattern.masked().to_vec();
    masked.resize(len, false);
    MaskPattern::new(t, masked)
}

pub fn build_arm(x0: &[TokenId], valid_len: usize, vocab: &Vocab) -> Result<TrainingExample> {
    check_x0(x0, valid_len, vocab)?;
    let len = x0.len();
    Ok(TrainingExample {
        input: shifted(x0, vocab.bos_id),
        targets: x0.to_vec(),
        weights: vec![1.0; len],
        supervision: (0..len).map(|r| r < valid_len).collect(),
        attn_mode: AttnMode::Causal,
        t: 0.0,
        strategy: None,
        pattern: MaskPattern::clean(len),
    })
}

/// CARD example with soft-tail corruption at a freshly drawn `t`, confined to the data prefix.
pub fn build_card<R: Rng + ?Sized>(
    x0: &[TokenId],
    valid_len: usize,
    corruption: &CorruptionConfig,
    weighting: &WeightConfig,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<TrainingExample> {
    check_x0(x0, valid_len, vocab)?;
    let t = sample_t(rng);
    let pattern = pad_pattern(corruption.sample(valid_len, t, rng)?, x0.len());
    let mut ex = build_card_from_pattern(x0, valid_len, &pattern, weighting, vocab)?;
    ex.strategy = Some(corruption.strategy);
    Ok(ex)
}

/// CARD example for a given corruption pattern.
pub fn build_card_from_pattern(
    x0: &[TokenId],
    valid_len: usize,
    pattern: &MaskPattern,
    weighting: &WeightConfig,
    vocab: &Vocab,
) -> Result<TrainingExample> {
    check_x0(x0, valid_len, vocab)?;
    let noised = apply_mask(x0, pattern, vocab.mask_id)?;
    let weights = WeightVector::compute(pattern.masked(), weighting)?.weights;
    Ok(TrainingExample {
        input: shifted(&noised, vocab.bos_id),
        targets: x0.to_vec(),
        weights,
        supervision: (0..x0.len()).map(|r| r < valid_len).collect(),
        attn_mode: AttnMode::Causal,
        t: pattern.t(),
        strategy: None,
        pattern: pattern.clone(),
    })
}

/// `t` uniform on `(eps, 1]`.
fn sample_t_above<R: Rng + ?Sized>(eps: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    eps + (1.0 - eps) * (1.0 - u)
}

/// Masked-diffusion example; redraws until at least one data position is masked.
pub fn build_mdlm<R: Rng + ?Sized>(
    x0: &[TokenId],
    valid_len: usize,
    eps: f64,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<TrainingExample> {
    check_x0(x0, valid_len, vocab)?;
    loop {
        let t = sample_t_above(eps, rng);
        let pattern = pad_pattern(uniform_mask(valid_len, t, rng), x0.len());
        if pattern.count() > 0 {
            return build_mdlm_from_pattern(x0, valid_len, &pattern, eps, vocab);
        }
    }
}

pub fn build_mdlm_from_pattern(
    x0: &[TokenId],
    valid_len: usize,
    pattern: &MaskPattern,
    eps: f64,
    vocab: &Vocab,
) -> Result<TrainingExample> {
    check_x0(x0, valid_len, vocab)?;
    let t = pattern.t();
    if !(t > 0.0 && t <= 1.0) {
        return Err(invalid(format!("noise time {t} outside (0, 1]")));
    }
    let weight = (1.0 / t).min(1.0 / eps);
    let noised = apply_mask(x0, pattern, vocab.mask_id)?;
    let mut input = Vec::with_capacity(x0.len() + 1);
    input.push(vocab.bos_id);
    input.extend_from_slice(&noised);
    let mut targets = vec![vocab.pad_id];
    targets.extend_from_slice(x0);
    let mut supervision = vec![false];
    supervision.extend(pattern.masked().iter().enumerate().map(|(i, &m)| m && i < valid_len));
    let weights = supervision.iter().map(|&s| if s { weight } else { 0.0 }).collect();
    Ok(TrainingExample {
        input,
        targets,
        weights,
        supervision,
        attn_mode: AttnMode::Full,
        t,
        strategy: Some(MaskStrategy::Uniform),
        pattern: pattern.clone(),
    })
}

/// One example per block holding data; each block draws its own `t` and is
/// redrawn until it masks at least one data position.
pub fn build_bd3lm<R: Rng + ?Sized>(
    x0: &[TokenId],
    valid_len: usize,
    block_size: usize,
    eps: f64,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Vec<TrainingExample>> {
    check_x0(x0, valid_len, vocab)?;
    let len = x0.len();
    if block_size == 0 || len % block_size != 0 {
        return Err(invalid(format!("block size {block_size} must divide {len}")));
    }
    let mut out = Vec::new();
    for block in 0..len / block_size {
        if block * block_size >= valid_len {
            break;
        }
        let pattern = loop {
            let t = sample_t_above(eps, rng);
            let p = block_mask(len, t, block_size, block, rng)?;
            let masked: Vec<bool> = p.masked().iter().enumerate().map(|(i, &m)| m && i < valid_len).collect();
            if masked.iter().any(|&m| m) {
                break MaskPattern::new(t, masked);
            }
        };
        out.push(build_bd3lm_block(x0, valid_len, block_size, block, &pattern, eps, vocab)?);
    }
    Ok(out)
}

/// The example for block `block` under a given pattern (masks outside the block are ignored).
pub fn build_bd3lm_block(
    x0: &[TokenId],
    valid_len: usize,
    block_size: usize,
    block: usize,
    pattern: &MaskPattern,
    eps: f64,
    vocab: &Vocab,
) -> Result<TrainingExample> {
    check_x0(x0, valid_len, vocab)?;
    let lo = block * block_size;
    let hi = lo + block_size;
    if block_size == 0 || hi > x0.len() {
        return Err(invalid(format!("block {block} of size {block_size} exceeds the sequence")));
    }
    let t = pattern.t();
    if !(t > 0.0 && t <= 1.0) {
        return Err(invalid(format!("noise time {t} outside (0, 1]")));
    }
    let masked: Vec<bool> = (0..x0.len())
        .map(|i| (lo..hi).contains(&i) && i < valid_len && pattern.masked()[i])
        .collect();
    let pattern = MaskPattern::new(t, masked);
    let noised = apply_mask(x0, &pattern, vocab.mask_id)?;
    let weight = (1.0 / t).min(1.0 / eps);
    let supervision: Vec<bool> = pattern.masked()[..hi].to_vec();
    Ok(TrainingExample {
        input: shifted(&noised[..hi], vocab.bos_id),
        targets: x0[..hi].to_vec(),
        weights: supervision.iter().map(|&s| if s { weight } else { 0.0 }).collect(),
        supervision,
        attn_mode: AttnMode::BlockCausal(block_size),
        t,
        strategy: Some(MaskStrategy::Block { size: block_size }),
        pattern,
    })
}

/// Denominator of the batch loss under `norm`.
pub fn normalizer(examples: &[TrainingExample], n_sequences: usize, norm: LossNorm) -> Result<f64> {
    let value = match norm {
        LossNorm::Count => examples.iter().map(|e| e.supervised()).sum::<usize>() as f64,
        LossNorm::WeightSum => examples.iter().map(|e| e.weight_sum()).sum(),
        LossNorm::Sequence => n_sequences as f64,
    };
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(invalid(format!("batch loss normalizer is {value}, nothing is supervised")))
    }
}

/// Weighted CE sum of one example; adds `scale` times its gradient to `grads`.
pub fn accumulate_example<T: Real>(
    model: &Model<T>,
    ex: &TrainingExample,
    scale: f64,
    grads: &mut ModelParams<T>,
) -> Result<f64> {
    model.accumulate(&ex.input, ex.attn_mode, &ex.weights, &ex.targets, &ex.supervision, scale, grads)
}

/// Weighted CE sum of one example, forward only.
pub fn example_loss_sum<T: Real>(model: &Model<T>, ex: &TrainingExample) -> Result<f64> {
    let logits = model.forward(&ex.input, ex.attn_mode)?;
    let v = model.config().vocab_size;
    let mut total = 0.0;
    for (r, row) in logits.chunks_exact(v).enumerate() {
        if ex.supervision[r] && ex.weights[r] > 0.0 {
            total += ex.weights[r] * crate::model::cross_entropy(row, usize::from(ex.targets[r]));
        }
    }
    Ok(total)
}

/// Normalized batch loss and its gradient, computed sequentially.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    examples: &[TrainingExample],
    n_sequences: usize,
    norm: LossNorm,
) -> Result<(f64, ModelParams<T>)> {
    let denom = normalizer(examples, n_sequences, norm)?;
    let mut grads = ModelParams::zeros(model.config());
    let mut total = 0.0;
    for ex in examples {
        total += accumulate_example(model, ex, 1.0 / denom, &mut grads)?;
    }
    Ok((total / denom, grads))
}

/// Normalized batch loss without gradients.
pub fn batch_loss_value<T: Real>(
    model: &Model<T>,
    examples: &[TrainingExample],
    n_sequences: usize,
    norm: LossNorm,
) -> Result<f64> {
    let denom = normalizer(examples, n_sequences, norm)?;
    let mut total = 0.0;
    for ex in examples {
        total += example_loss_sum(model, ex)?;
    }
    Ok(total / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::mask_count;
    use crate::model::{cross_entropy, ModelConfig};
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::symbolic(5).unwrap()
    }

    fn model(mode: AttnMode) -> Model<f64> {
        let v = vocab();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 17,
            vocab_size: v.size,
            attn_mode: mode,
        };
        Model::init(cfg, 3).unwrap()
    }

    fn x0() -> Vec<TokenId> {
        vec![0, 1, 2, 3, 4, 0, 1, 2]
    }

    #[test]
    fn arm_weights_and_padding() {
        let v = vocab();
        let mut x = x0();
        x[6] = v.pad_id;
        x[7] = v.pad_id;
        let ex = build_arm(&x, 6, &v).unwrap();
        assert_eq!(ex.input, vec![v.bos_id, 0, 1, 2, 3, 4, 0, v.pad_id]);
        assert!(ex.weights.iter().all(|&w| w == 1.0));
        assert_eq!(ex.supervision, vec![true, true, true, true, true, true, false, false]);
    }

    #[test]
    fn arm_loss_is_mean_token_cross_entropy() {
        let v = vocab();
        let m = model(AttnMode::Causal);
        let ex = build_arm(&x0(), 8, &v).unwrap();
        let (loss, _) = batch_loss(&m, std::slice::from_ref(&ex), 1, LossNorm::Count).unwrap();
        let logits = m.forward(&ex.input, AttnMode::Causal).unwrap();
        let oracle: f64 = logits
            .chunks_exact(v.size)
            .zip(&ex.targets)
            .map(|(row, &t)| cross_entropy(row, t as usize))
            .sum::<f64>()
            / 8.0;
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - (v.size as f64).ln()).abs() / (v.size as f64).ln() < 0.02);
    }

    #[test]
    fn unmasked_card_reduces_to_arm_times_base() {
        let v = vocab();
        let m = model(AttnMode::Causal);
        let weighting = WeightConfig { base: 2.5, ..Default::default() };
        let cfg = ObjectiveConfig { masking: false, weighting, ..Default::default() };
        let mut rng = stream(1, Purpose::Corruption, 0, 0);
        let card = cfg.build(&x0(), 8, &v, &mut rng).unwrap();
        assert!(card[0].weights.iter().all(|&w| w == 1.0 / 2.5));
        let arm = build_arm(&x0(), 8, &v).unwrap();
        let (lc, _) = batch_loss(&m, &card, 1, LossNorm::Count).unwrap();
        let (la, _) = batch_loss(&m, &[arm], 1, LossNorm::Count).unwrap();
        assert!((2.5 * lc - la).abs() <= 1e-12 * la);
    }

    #[test]
    fn card_full_mask_weights_decrease_then_saturate() {
        let v = vocab();
        let len = 8;
        let pattern = MaskPattern::new(1.0, vec![true; len]);
        let ex = build_card_from_pattern(&x0(), len, &pattern, &WeightConfig::default(), &v).unwrap();
        assert!(ex.input[1..].iter().all(|&id| id == v.mask_id));
        // C = [1, 2, 2, ...] gives S_0 = 0 and S_n = r^(n-1) + 2 (1 - r^(n-1)) / (1 - r).
        let r: f64 = 0.5;
        for n in 0..len {
            let s = if n == 0 { 0.0 } else { r.powi(n as i32 - 1) + 2.0 * (1.0 - r.powi(n as i32 - 1)) / (1.0 - r) };
            assert!((ex.weights[n] - 1.0 / (1.0 + s)).abs() < 1e-15);
        }
        for pair in ex.weights.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
        // Saturation toward S = 2 / (1 - r) = 4.
        assert!((ex.weights[len - 1] - 0.2).abs() < 0.01);
    }

    #[test]
    fn card_is_deterministic_per_stream() {
        let v = vocab();
        let cfg = ObjectiveConfig::default();
        let a = cfg.build(&x0(), 8, &v, &mut stream(4, Purpose::Corruption, 2, 0)).unwrap();
        let b = cfg.build(&x0(), 8, &v, &mut stream(4, Purpose::Corruption, 2, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].pattern.count(), mask_count(8, a[0].t));
    }

    #[test]
    fn mdlm_examples() {
        let v = vocab();
        let all = MaskPattern::new(1.0, vec![true; 4]);
        let ex = build_mdlm_from_pattern(&x0()[..4], 4, &all, MDLM_EPS, &v).unwrap();
        assert_eq!(ex.supervision, vec![false, true, true, true, true]);
        assert!(ex.weights[1..].iter().all(|&w| w == 1.0));

        // 1-based mask {2, 4} at t = 0.5.
        let p = MaskPattern::new(0.5, vec![false, true, false, true]);
        let ex = build_mdlm_from_pattern(&x0()[..4], 4, &p, MDLM_EPS, &v).unwrap();
        assert_eq!(ex.supervision, vec![false, false, true, false, true]);
        assert_eq!(ex.weights, vec![0.0, 0.0, 2.0, 0.0, 2.0]);
        assert_eq!(ex.attn_mode, AttnMode::Full);
        assert_eq!(ex.input, vec![v.bos_id, 0, v.mask_id, 2, v.mask_id]);

        let mut rng = stream(0, Purpose::Corruption, 0, 0);
        for _ in 0..200 {
            let ex = build_mdlm(&x0(), 8, MDLM_EPS, &v, &mut rng).unwrap();
            assert!(ex.supervised() > 0);
            assert!(ex.t > MDLM_EPS && ex.t <= 1.0);
        }
    }

    #[test]
    fn mdlm_loss_ignores_unmasked_targets() {
        let v = vocab();
        let m = model(AttnMode::Full);
        let p = MaskPattern::new(0.5, vec![false, true, false, true, true, false, false, false]);
        let ex = build_mdlm_from_pattern(&x0(), 8, &p, MDLM_EPS, &v).unwrap();
        let mut other = ex.clone();
        for r in 0..other.rows() {
            if !other.supervision[r] {
                other.targets[r] = (other.targets[r] + 1) % 5;
            }
        }
        let a = batch_loss_value(&m, &[ex], 1, LossNorm::Count).unwrap();
        let b = batch_loss_value(&m, &[other], 1, LossNorm::Count).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bd3lm_partitions() {
        let v = vocab();
        let mut rng = stream(0, Purpose::Corruption, 0, 0);
        let exs = build_bd3lm(&x0(), 8, 4, MDLM_EPS, &v, &mut rng).unwrap();
        assert_eq!(exs.len(), 2);
        let second = &exs[1];
        assert_eq!(&second.input[1..5], &[0, 1, 2, 3]);
        assert!(second.supervision[..4].iter().all(|&s| !s));
        assert_eq!(second.attn_mode, AttnMode::BlockCausal(4));

        let one = build_bd3lm(&x0(), 8, 8, MDLM_EPS, &v, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].rows(), 8);

        let singles = build_bd3lm(&x0(), 8, 1, MDLM_EPS, &v, &mut rng).unwrap();
        assert_eq!(singles.len(), 8);
        for (b, ex) in singles.iter().enumerate() {
            assert_eq!(ex.supervised(), 1);
            assert!(ex.supervision[b]);
            assert_eq!(&ex.input[1..], &x0()[..b]);
        }
    }

    #[test]
    fn bd3lm_skips_pad_only_blocks() {
        let v = vocab();
        let mut x = x0();
        for id in x[3..].iter_mut() {
            *id = v.pad_id;
        }
        let mut rng = stream(0, Purpose::Corruption, 0, 0);
        let exs = build_bd3lm(&x, 3, 4, MDLM_EPS, &v, &mut rng).unwrap();
        assert_eq!(exs.len(), 1);
        assert!(exs[0].supervision[3..].iter().all(|&s| !s));
    }

    /// Logit rows whose softmax residual matches the head-bias gradient of a
    /// single-target example.
    fn grad_rows(m: &Model<f64>, ex: &TrainingExample) -> Vec<usize> {
        let (_, g) = batch_loss(m, std::slice::from_ref(ex), 1, LossNorm::Count).unwrap();
        let logits = m.forward(&ex.input, ex.attn_mode).unwrap();
        let v = m.config().vocab_size;
        let scale = ex.weights.iter().zip(&ex.supervision).find(|(_, &s)| s).unwrap().0;
        (0..ex.rows())
            .filter(|&r| {
                let mut resid = crate::model::softmax(&logits[r * v..(r + 1) * v]);
                resid[ex.targets.iter().zip(&ex.supervision).find(|(_, &s)| s).map(|(&t, _)| t as usize).unwrap()] -= 1.0;
                resid
                    .iter()
                    .zip(&g.head.bias.data)
                    .all(|(x, gb)| (scale * x - gb).abs() < 1e-12)
            })
            .collect()
    }

    #[test]
    fn shift_conventions() {
        let v = vocab();
        let x = x0();
        // CARD: only position 3 supervised; row 3 (fed x[2]) receives the gradient.
        let p = MaskPattern::new(0.5, (0..8).map(|i| i >= 5).collect());
        let mut card = build_card_from_pattern(&x, 8, &p, &WeightConfig::default(), &v).unwrap();
        card.supervision = (0..8).map(|i| i == 3).collect();
        assert_eq!(grad_rows(&model(AttnMode::Causal), &card), vec![3]);
        assert_eq!(card.input[3], x[2]);
        // MDLM: the row that scores position 3 is fed position 3 itself.
        let p = MaskPattern::new(0.5, (0..8).map(|i| i == 3).collect());
        let mdlm = build_mdlm_from_pattern(&x, 8, &p, MDLM_EPS, &v).unwrap();
        assert_eq!(grad_rows(&model(AttnMode::Full), &mdlm), vec![4]);
        assert_eq!(mdlm.input[4], v.mask_id);
        assert_eq!(mdlm.targets[4], x[3]);
    }

    #[test]
    fn normalizers() {
        let v = vocab();
        let p = MaskPattern::new(1.0, vec![true; 8]);
        let ex = build_card_from_pattern(&x0(), 8, &p, &WeightConfig::default(), &v).unwrap();
        let exs = [ex.clone(), ex];
        assert_eq!(normalizer(&exs, 2, LossNorm::Count).unwrap(), 16.0);
        assert_eq!(normalizer(&exs, 2, LossNorm::Sequence).unwrap(), 2.0);
        assert!(normalizer(&exs, 2, LossNorm::WeightSum).unwrap() < 16.0);
        assert!(normalizer(&[], 0, LossNorm::Count).is_err());
    }

    proptest! {
        #[test]
        fn denser_prefix_never_raises_next_weight(bits in proptest::collection::vec(any::<bool>(), 2..12), pick in 0usize..12) {
            let v = vocab();
            let len = bits.len();
            let x: Vec<TokenId> = (0..len).map(|i| (i % 5) as TokenId).collect();
            let n = len - 1;
            let i = pick % n;
            let mut denser = bits.clone();
            denser[i] = true;
            let cfg = WeightConfig::default();
            let a = build_card_from_pattern(&x, len, &MaskPattern::new(0.5, bits), &cfg, &v).unwrap();
            let b = build_card_from_pattern(&x, len, &MaskPattern::new(0.5, denser), &cfg, &v).unwrap();
            prop_assert!(b.weights[n] <= a.weights[n]);
        }
    }
}
