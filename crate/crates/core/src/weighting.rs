//! Context-aware loss weights.
//!
//! Each position gets a corruption cost `C` (0 clean, 1 isolated mask, 2 mask
//! after a mask). The ambiguity score `S_n` is a geometrically decayed sum of
//! the costs before `n`, and the loss weight is `w_n = 1 / (beta + S_n)`.
//!
//! Scores are computed with the linear recurrence `P_{n+1} = r P_n + C_n`
//! (`r = 1 - p`), where `P_n = sum_{i<n} C_i r^(n-1-i)`. The alternative index
//! conventions are all affine in `P_n` and `C_n`, see [`ScoreConvention`].

use crate::error::{invalid, Result};

/// Which costs enter `S_n` and with what exponent (1-based positions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreConvention {
    /// `sum_{i<n} C_i r^(n-1-i)`: strictly earlier positions, the predecessor at full weight.
    #[default]
    Prefix,
    /// `sum_{i<n} C_i r^(n-i)`.
    PrefixDecayed,
    /// `sum_{i<=n} C_i r^(n-i)`: includes the target's own cost.
    Inclusive,
    /// `sum_{i<=n} C_i r^(n-1-i)`: the target's own cost is scaled by `1/r`.
    InclusiveBoosted,
}

impl ScoreConvention {
    pub const ALL: [ScoreConvention; 4] = [
        ScoreConvention::Prefix,
        ScoreConvention::PrefixDecayed,
        ScoreConvention::Inclusive,
        ScoreConvention::InclusiveBoosted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreConvention::Prefix => "prefix",
            ScoreConvention::PrefixDecayed => "prefix_decayed",
            ScoreConvention::Inclusive => "inclusive",
            ScoreConvention::InclusiveBoosted => "inclusive_boosted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid(format!("unknown score convention `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightConfig {
    /// Decay `p` in `(0, 1)`.
    pub decay: f64,
    /// Smoothing base `beta > 0`.
    pub base: f64,
    pub convention: ScoreConvention,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            decay: 0.5,
            base: 1.0,
            convention: ScoreConvention::Prefix,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(invalid(format!("decay must lie in (0, 1), got {}", self.decay)));
        }
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(invalid(format!("base must be positive, got {}", self.base)));
        }
        Ok(())
    }
}

/// Costs, scores and weights for one mask pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub costs: Vec<u8>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightVector {
    pub fn compute(masked: &[bool], cfg: &WeightConfig) -> Result<Self> {
        cfg.validate()?;
        let costs = corruption_costs(masked);
        let scores = ambiguity_scores(&costs, cfg.decay, cfg.convention);
        let weights = loss_weights(&scores, cfg.base);
        Ok(Self { costs, scores, weights })
    }
}

/// `C_i = m_i * (1 + m_{i-1})`, with the position before the sequence clean.
pub fn corruption_costs(masked: &[bool]) -> Vec<u8> {
    let mut prev = false;
    masked
        .iter()
        .map(|&m| {
            let c = if m { 1 + prev as u8 } else { 0 };
            prev = m;
            c
        })
        .collect()
}

pub fn ambiguity_scores(costs: &[u8], decay: f64, convention: ScoreConvention) -> Vec<f64> {
    let r = 1.0 - decay;
    let mut prefix = 0.0;
    costs
        .iter()
        .map(|&c| {
            let c = c as f64;
            let s = match convention {
                ScoreConvention::Prefix => prefix,
                ScoreConvention::PrefixDecayed => r * prefix,
                ScoreConvention::Inclusive => r * prefix + c,
                ScoreConvention::InclusiveBoosted => prefix + c / r,
            };
            prefix = r * prefix + c;
            s
        })
        .collect()
}

/// `w_n = 1 / (beta + S_n)`.
pub fn loss_weights(scores: &[f64], base: f64) -> Vec<f64> {
    scores.iter().map(|&s| 1.0 / (base + s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Double sum straight from the definitions, 1-based.
    fn scores_direct(costs: &[u8], decay: f64, convention: ScoreConvention) -> Vec<f64> {
        let r = 1.0 - decay;
        let len = costs.len();
        (1..=len)
            .map(|n| {
                let (upper, shift) = match convention {
                    ScoreConvention::Prefix => (n - 1, 1),
                    ScoreConvention::PrefixDecayed => (n - 1, 0),
                    ScoreConvention::Inclusive => (n, 0),
                    ScoreConvention::InclusiveBoosted => (n, 1),
                };
                let mut s = 0.0;
                for i in 1..=upper {
                    let exponent = n as i32 - shift - i as i32;
                    s += costs[i - 1] as f64 * r.powi(exponent);
                }
                s
            })
            .collect()
    }

    fn costs_direct(masked: &[bool]) -> Vec<u8> {
        (0..masked.len())
            .map(|i| {
                let here = masked[i] as u8;
                let before = if i == 0 { 0 } else { masked[i - 1] as u8 };
                here * (1 + before)
            })
            .collect()
    }

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn cost_examples() {
        assert_eq!(corruption_costs(&bits(&[0, 0, 1, 1])), vec![0, 0, 1, 2]);
        assert_eq!(corruption_costs(&bits(&[0, 0, 0, 0])), vec![0, 0, 0, 0]);
        assert_eq!(corruption_costs(&bits(&[1, 0, 1, 0])), vec![1, 0, 1, 0]);
    }

    #[test]
    fn score_examples() {
        let p = ScoreConvention::Prefix;
        assert_eq!(ambiguity_scores(&[0, 0, 1, 2], 0.5, p), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(ambiguity_scores(&[0, 0, 0, 0], 0.5, p), vec![0.0; 4]);
        assert_eq!(ambiguity_scores(&[2, 0, 0, 0], 0.5, p), vec![0.0, 2.0, 1.0, 0.5]);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(loss_weights(&[0.0, 0.0, 0.0, 1.0], 1.0), vec![1.0, 1.0, 1.0, 0.5]);
        assert_eq!(loss_weights(&[0.0; 3], 1.0), vec![1.0; 3]);
        assert_eq!(loss_weights(&[3.0], 1.0), vec![0.25]);
    }

    #[test]
    fn exhaustive_oracle_all_conventions() {
        for len in 1..=6 {
            for pattern in 0u32..(1 << len) {
                let masked: Vec<bool> = (0..len).map(|i| pattern >> i & 1 == 1).collect();
                let costs = corruption_costs(&masked);
                assert_eq!(costs, costs_direct(&masked));
                for conv in ScoreConvention::ALL {
                    let fast = ambiguity_scores(&costs, 0.5, conv);
                    let slow = scores_direct(&costs, 0.5, conv);
                    assert_eq!(fast, slow, "len {len} pattern {pattern:b} {conv:?}");
                }
            }
        }
    }

    #[test]
    fn conventions_agree_on_clean_prefix() {
        let masked = bits(&[0, 0, 0, 1, 1]);
        let costs = corruption_costs(&masked);
        for conv in [ScoreConvention::Prefix, ScoreConvention::PrefixDecayed] {
            let s = ambiguity_scores(&costs, 0.5, conv);
            assert_eq!(&s[..4], &[0.0; 4]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(WeightConfig::default().validate().is_ok());
        assert!(WeightConfig { decay: 1.0, ..Default::default() }.validate().is_err());
        assert!(WeightConfig { base: 0.0, ..Default::default() }.validate().is_err());
        for c in ScoreConvention::ALL {
            assert_eq!(ScoreConvention::parse(c.name()).unwrap(), c);
        }
    }

    proptest! {
        #[test]
        fn weight_times_score_below_one(
            masked in proptest::collection::vec(any::<bool>(), 1..64),
            base in 0.01f64..10.0,
            decay in 0.01f64..0.99,
        ) {
            let cfg = WeightConfig { decay, base, convention: ScoreConvention::Prefix };
            let wv = WeightVector::compute(&masked, &cfg).unwrap();
            for (n, (&w, &s)) in wv.weights.iter().zip(&wv.scores).enumerate() {
                prop_assert!(w * s < 1.0);
                prop_assert!(w > 0.0 && w <= 1.0 / base);
                if !masked[..n].iter().any(|&m| m) {
                    prop_assert_eq!(w, 1.0 / base);
                }
            }
        }

        #[test]
        fn adding_a_mask_never_raises_later_weights(
            masked in proptest::collection::vec(any::<bool>(), 2..48),
            pick in any::<proptest::sample::Index>(),
        ) {
            let cfg = WeightConfig::default();
            let i = pick.index(masked.len());
            let mut more = masked.clone();
            more[i] = true;
            let a = WeightVector::compute(&masked, &cfg).unwrap();
            let b = WeightVector::compute(&more, &cfg).unwrap();
            for n in i + 1..masked.len() {
                prop_assert!(b.scores[n] >= a.scores[n]);
                prop_assert!(b.weights[n] <= a.weights[n]);
            }
        }
    }
}
