//! The absorbing-state forward process: noise times, tail-biased masking and
//! the uniform / strict-tail / block baselines.
//!
//! Positions are 0-based in the API. The tail window of size `W` covers
//! indices `len - W .. len`.

use rand::seq::index;
use rand::Rng;

use crate::corpus::TokenId;
use crate::error::{invalid, Result};

/// Corruption probability as a function of noise time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseSchedule {
    /// `sigma(t) = t`
    #[default]
    Linear,
}

impl NoiseSchedule {
    pub fn sigma(self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Linear => t.clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskStrategy {
    /// Exactly `N` masks drawn without replacement from a tail window of `W`.
    SoftTail,
    /// The last `N` positions.
    StrictTail,
    /// Each position independently with probability `sigma(t)`.
    Uniform,
    /// Independent masks inside one block of the given size.
    Block { size: usize },
}

impl MaskStrategy {
    pub fn name(&self) -> String {
        match self {
            MaskStrategy::SoftTail => "soft_tail".into(),
            MaskStrategy::StrictTail => "strict_tail".into(),
            MaskStrategy::Uniform => "uniform".into(),
            MaskStrategy::Block { size } => format!("block:{size}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "soft_tail" => Ok(MaskStrategy::SoftTail),
            "strict_tail" => Ok(MaskStrategy::StrictTail),
            "uniform" => Ok(MaskStrategy::Uniform),
            other => match other.strip_prefix("block:").map(str::parse::<usize>) {
                Some(Ok(size)) if size > 0 => Ok(MaskStrategy::Block { size }),
                _ => Err(invalid(format!(
                    "unknown mask strategy `{other}` (expected soft_tail, strict_tail, uniform or block:<K>)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionConfig {
    pub strategy: MaskStrategy,
    /// Window-to-mask-count ratio for soft tail masking; must be at least 1.
    pub tail_factor: f64,
    pub schedule: NoiseSchedule,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::SoftTail,
            tail_factor: 2.0,
            schedule: NoiseSchedule::Linear,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if !(self.tail_factor >= 1.0 && self.tail_factor.is_finite()) {
            return Err(invalid(format!("tail factor must be >= 1, got {}", self.tail_factor)));
        }
        if let MaskStrategy::Block { size } = self.strategy {
            if size == 0 || size > seq_len || seq_len % size != 0 {
                return Err(invalid(format!("block size {size} must divide sequence length {seq_len}")));
            }
        }
        Ok(())
    }

    /// Draws a pattern at noise time `t`. The block strategy picks its block
    /// uniformly at random.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, t: f64, rng: &mut R) -> Result<MaskPattern> {
        self.validate(len)?;
        Ok(match self.strategy {
            MaskStrategy::SoftTail => soft_tail_mask(len, t, self.tail_factor, rng),
            MaskStrategy::StrictTail => strict_tail_mask(len, t),
            MaskStrategy::Uniform => uniform_mask(len, self.schedule.sigma(t), rng),
            MaskStrategy::Block { size } => {
                let block = rng.random_range(0..len / size);
                block_mask(len, self.schedule.sigma(t), size, block, rng)?
            }
        })
    }
}

/// A corruption mask together with the noise time that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPattern {
    t: f64,
    masked: Vec<bool>,
}

impl MaskPattern {
    pub fn new(t: f64, masked: Vec<bool>) -> Self {
        Self { t, masked }
    }

    pub fn clean(len: usize) -> Self {
        Self::new(0.0, vec![false; len])
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn first_masked(&self) -> Option<usize> {
        self.masked.iter().position(|&m| m)
    }

    pub fn bitstring(&self) -> String {
        self.masked.iter().map(|&m| if m { '1' } else { '0' }).collect()
    }
}

/// Uniform on `[0, 1)`.
pub fn sample_t<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// `N = max(1, floor(len * t))`, capped at `len`.
pub fn mask_count(len: usize, t: f64) -> usize {
    let n = (len as f64 * t.clamp(0.0, 1.0)).floor() as usize;
    n.max(1).min(len)
}

/// `W = min(len, floor(N * lambda))`.
pub fn tail_window(len: usize, count: usize, tail_factor: f64) -> usize {
    ((count as f64 * tail_factor).floor() as usize).min(len)
}

pub fn soft_tail_mask<R: Rng + ?Sized>(len: usize, t: f64, tail_factor: f64, rng: &mut R) -> MaskPattern {
    let n = mask_count(len, t);
    let w = tail_window(len, n, tail_factor).max(n);
    let start = len - w;
    let mut masked = vec![false; len];
    for i in index::sample(rng, w, n) {
        masked[start + i] = true;
    }
    MaskPattern::new(t, masked)
}

pub fn strict_tail_mask(len: usize, t: f64) -> MaskPattern {
    let n = mask_count(len, t);
    let masked = (0..len).map(|i| i >= len - n).collect();
    MaskPattern::new(t, masked)
}

/// Each position masked independently with probability `rate`.
pub fn uniform_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> MaskPattern {
    let masked = (0..len).map(|_| rng.random::<f64>() < rate).collect();
    MaskPattern::new(rate, masked)
}

/// Independent masks with probability `rate` inside block `block` (0-based);
/// every other position stays clean.
pub fn block_mask<R: Rng + ?Sized>(
    len: usize,
    rate: f64,
    block_size: usize,
    block: usize,
    rng: &mut R,
) -> Result<MaskPattern> {
    if block_size == 0 || len % block_size != 0 {
        return Err(invalid(format!("block size {block_size} must divide {len}")));
    }
    let blocks = len / block_size;
    if block >= blocks {
        return Err(invalid(format!("block index {block} out of range for {blocks} blocks")));
    }
    let lo = block * block_size;
    let masked = (0..len)
        .map(|i| (lo..lo + block_size).contains(&i) && rng.random::<f64>() < rate)
        .collect();
    Ok(MaskPattern::new(rate, masked))
}

/// `x^t`: masked positions become `mask_id`, the rest copy `x0`.
pub fn apply_mask(x0: &[TokenId], pattern: &MaskPattern, mask_id: TokenId) -> Result<Vec<TokenId>> {
    if x0.len() != pattern.len() {
        return Err(invalid(format!(
            "mask length {} does not match sequence length {}",
            pattern.len(),
            x0.len()
        )));
    }
    Ok(x0
        .iter()
        .zip(pattern.masked())
        .map(|(&x, &m)| if m { mask_id } else { x })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;
    use std::collections::{BTreeSet, HashMap};

    fn rng(i: u64) -> crate::rng::LabRng {
        stream(99, Purpose::Corruption, i, 0)
    }

    #[test]
    fn sample_t_moments_and_range() {
        let mut r = rng(0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_t(&mut r)).collect();
        assert!(draws.iter().all(|t| (0.0..1.0).contains(t)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        // Var of U[0,1) is 1/12.
        let sigma = (1.0 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma);
        assert_eq!(sample_t(&mut rng(5)), sample_t(&mut rng(5)));
    }

    #[test]
    fn soft_tail_at_zero_masks_one_in_tail() {
        for i in 0..200 {
            let p = soft_tail_mask(8, 0.0, 2.0, &mut rng(i));
            assert_eq!(p.count(), 1);
            assert!(p.first_masked().unwrap() >= 6);
        }
    }

    #[test]
    fn soft_tail_full_corruption() {
        let p = soft_tail_mask(8, 1.0, 2.0, &mut rng(1));
        assert!(p.masked().iter().all(|&m| m));
    }

    #[test]
    fn soft_tail_subsets_uniform() {
        // L=8, t=0.5, lambda=2: N=4, W=8, every one of the C(8,4)=70 subsets
        // is equally likely.
        let mut all = BTreeSet::new();
        for bits in 0u32..256 {
            if bits.count_ones() == 4 {
                all.insert(bits);
            }
        }
        assert_eq!(all.len(), 70);
        let draws = 10_000;
        let mut counts: HashMap<u32, usize> = HashMap::new();
        let mut r = rng(77);
        for _ in 0..draws {
            let p = soft_tail_mask(8, 0.5, 2.0, &mut r);
            assert_eq!(p.count(), 4);
            let bits = p.masked().iter().enumerate().fold(0u32, |acc, (i, &m)| acc | ((m as u32) << i));
            *counts.entry(bits).or_default() += 1;
        }
        let p = 1.0 / 70.0;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for subset in &all {
            let c = *counts.get(subset).unwrap_or(&0) as f64;
            assert!((c - expected).abs() < 4.0 * sigma, "subset {subset:08b}: {c}");
        }
        assert!(counts.keys().all(|k| all.contains(k)));
    }

    #[test]
    fn strict_tail_examples() {
        assert_eq!(strict_tail_mask(8, 0.5).bitstring(), "00001111");
        assert_eq!(strict_tail_mask(8, 0.0).bitstring(), "00000001");
    }

    #[test]
    fn strict_tail_matches_soft_tail_with_unit_factor() {
        // With lambda = 1 the window equals the mask count, so the only
        // possible soft-tail subset is the strict tail.
        for len in 1..=8 {
            for step in 0..=10 {
                let t = step as f64 / 10.0;
                let strict = strict_tail_mask(len, t);
                for i in 0..20 {
                    assert_eq!(soft_tail_mask(len, t, 1.0, &mut rng(i)).masked(), strict.masked());
                }
            }
        }
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_mask(50, 0.0, &mut rng(1)).count(), 0);
        assert_eq!(uniform_mask(50, 1.0, &mut rng(1)).count(), 50);
        let mut r = rng(2);
        let total: usize = (0..100).map(|_| uniform_mask(1000, 0.3, &mut r).count()).sum();
        let n = 100_000.0;
        let sigma = (n * 0.3 * 0.7f64).sqrt();
        assert!((total as f64 - 0.3 * n).abs() < 4.0 * sigma);
    }

    #[test]
    fn block_examples() {
        let p = block_mask(8, 1.0, 4, 0, &mut rng(1)).unwrap();
        assert_eq!(p.bitstring(), "11110000");
        for b in 0..2 {
            assert_eq!(block_mask(8, 0.0, 4, b, &mut rng(1)).unwrap().count(), 0);
        }
        assert!(block_mask(8, 0.5, 4, 2, &mut rng(1)).is_err());
        assert!(block_mask(8, 0.5, 3, 0, &mut rng(1)).is_err());
    }

    #[test]
    fn block_marginals() {
        let draws = 10_000;
        let mut counts = [0usize; 8];
        let mut r = rng(3);
        for _ in 0..draws {
            let p = block_mask(8, 0.5, 4, 1, &mut r).unwrap();
            for (c, &m) in counts.iter_mut().zip(p.masked()) {
                *c += m as usize;
            }
        }
        let sigma = (draws as f64 * 0.25).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            if i < 4 {
                assert_eq!(c, 0);
            } else {
                assert!((c as f64 - 0.5 * draws as f64).abs() < 4.0 * sigma);
            }
        }
    }

    #[test]
    fn apply_mask_examples() {
        let x0: Vec<TokenId> = vec![10, 11, 12, 13, 14];
        let m = 257;
        assert_eq!(apply_mask(&x0, &MaskPattern::clean(5), m).unwrap(), x0);
        let all = MaskPattern::new(1.0, vec![true; 5]);
        assert_eq!(apply_mask(&x0, &all, m).unwrap(), vec![m; 5]);
        let one = MaskPattern::new(0.2, vec![false, false, true, false, false]);
        let xt = apply_mask(&x0, &one, m).unwrap();
        let diffs: Vec<usize> = (0..5).filter(|&i| xt[i] != x0[i]).collect();
        assert_eq!(diffs, vec![2]);
        assert!(apply_mask(&x0, &MaskPattern::clean(4), m).is_err());
    }

    #[test]
    fn soft_tail_marginal_is_tail_biased() {
        let len = 32;
        let draws = 100_000;
        let mut counts = vec![0usize; len];
        let mut r = rng(11);
        for _ in 0..draws {
            let t = sample_t(&mut r);
            let p = soft_tail_mask(len, t, 2.0, &mut r);
            for (c, &m) in counts.iter_mut().zip(p.masked()) {
                *c += m as usize;
            }
        }
        let sigma = (draws as f64 * 0.25).sqrt();
        for w in counts.windows(2) {
            assert!(w[1] as f64 >= w[0] as f64 - 4.0 * sigma * std::f64::consts::SQRT_2);
        }
        assert!(counts[len - 1] > counts[0]);
    }

    #[test]
    fn strategy_names_parse_back() {
        for s in [
            MaskStrategy::SoftTail,
            MaskStrategy::StrictTail,
            MaskStrategy::Uniform,
            MaskStrategy::Block { size: 8 },
        ] {
            assert_eq!(MaskStrategy::parse(&s.name()).unwrap(), s);
        }
        assert!(MaskStrategy::parse("block:0").is_err());
        assert!(MaskStrategy::parse("cosine").is_err());
    }

    proptest! {
        #[test]
        fn tail_masks_have_exact_count_and_stay_in_window(
            len in 1usize..64, t in 0.0f64..=1.0, lambda in 1.0f64..4.0, seed in any::<u64>()
        ) {
            let mut r = stream(seed, Purpose::Corruption, 0, 0);
            let n = mask_count(len, t);
            let p = soft_tail_mask(len, t, lambda, &mut r);
            prop_assert_eq!(p.count(), n);
            let w = tail_window(len, n, lambda);
            prop_assert!(p.first_masked().unwrap() >= len - w);
            prop_assert_eq!(strict_tail_mask(len, t).count(), n);
        }

        #[test]
        fn apply_mask_is_idempotent(bits in proptest::collection::vec(any::<bool>(), 1..40)) {
            let x0: Vec<TokenId> = (0..bits.len() as u16).collect();
            let p = MaskPattern::new(0.5, bits);
            let once = apply_mask(&x0, &p, 257).unwrap();
            let twice = apply_mask(&once, &p, 257).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
