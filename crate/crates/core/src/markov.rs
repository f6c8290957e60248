//! First-order Markov sources over a small alphabet.
//!
//! Used to synthesize corpora with a known entropy rate and to compute exact
//! lagged mutual information for the signal-retention analysis.

use rand::Rng;

use crate::error::{invalid, Result};

const ROW_SUM_TOL: f64 = 1e-9;

/// A row-stochastic transition matrix over `k <= 256` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    transition: Vec<Vec<f64>>,
}

impl MarkovSource {
    pub fn new(transition: Vec<Vec<f64>>) -> Result<Self> {
        let k = transition.len();
        if k == 0 || k > 256 {
            return Err(invalid(format!("transition matrix must have 1..=256 states, got {k}")));
        }
        for (i, row) in transition.iter().enumerate() {
            if row.len() != k {
                return Err(invalid(format!("row {i} has {} entries, expected {k}", row.len())));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(invalid(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(invalid(format!("row {i} sums to {sum}, not 1")));
            }
        }
        Ok(Self { transition })
    }

    /// Symmetric two-state chain that keeps its state with probability `stay`.
    pub fn two_state(stay: f64) -> Result<Self> {
        Self::new(vec![vec![stay, 1.0 - stay], vec![1.0 - stay, stay]])
    }

    /// Three-symbol cycle `0 -> 1 -> 2 -> 0` taken with probability `advance`;
    /// the other two symbols share the remainder.
    pub fn noisy_cycle3(advance: f64) -> Result<Self> {
        let off = (1.0 - advance) / 2.0;
        Self::new(vec![
            vec![off, advance, off],
            vec![off, off, advance],
            vec![advance, off, off],
        ])
    }

    pub fn states(&self) -> usize {
        self.transition.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    /// Samples `n` states. Without a start state the first symbol is uniform.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, start: Option<usize>, rng: &mut R) -> Result<Vec<usize>> {
        let k = self.states();
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return Ok(out);
        }
        let mut state = match start {
            Some(s) if s < k => s,
            Some(s) => return Err(invalid(format!("start state {s} out of range for {k} states"))),
            None => rng.random_range(0..k),
        };
        out.push(state);
        while out.len() < n {
            state = draw_row(&self.transition[state], rng);
            out.push(state);
        }
        Ok(out)
    }

    /// Irreducible and aperiodic, i.e. some power of the matrix is strictly positive.
    pub fn is_ergodic(&self) -> bool {
        let k = self.states();
        let support: Vec<Vec<bool>> = self
            .transition
            .iter()
            .map(|row| row.iter().map(|&p| p > 0.0).collect())
            .collect();
        // Wielandt: a primitive k x k matrix has A^m > 0 for m = (k-1)^2 + 1.
        let bound = (k - 1) * (k - 1) + 1;
        let mut reach = support.clone();
        for _ in 1..bound {
            if reach.iter().all(|row| row.iter().all(|&x| x)) {
                return true;
            }
            let mut next = vec![vec![false; k]; k];
            for i in 0..k {
                for m in 0..k {
                    if reach[i][m] {
                        for j in 0..k {
                            next[i][j] |= support[m][j];
                        }
                    }
                }
            }
            reach = next;
        }
        reach.iter().all(|row| row.iter().all(|&x| x))
    }

    /// Stationary distribution by power iteration. Requires an ergodic chain.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        if !self.is_ergodic() {
            return Err(invalid("chain is not ergodic; stationary distribution is not unique"));
        }
        let k = self.states();
        let mut pi = vec![1.0 / k as f64; k];
        for _ in 0..1_000_000 {
            let next = self.step_distribution(&pi);
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        Ok(pi)
    }

    fn step_distribution(&self, p: &[f64]) -> Vec<f64> {
        let k = self.states();
        let mut out = vec![0.0; k];
        for (i, &pi) in p.iter().enumerate() {
            for j in 0..k {
                out[j] += pi * self.transition[i][j];
            }
        }
        out
    }

    /// Entropy rate in nats: `sum_a pi_a H(T[a, .])`.
    pub fn entropy_rate(&self) -> Result<f64> {
        let pi = self.stationary()?;
        Ok(pi
            .iter()
            .zip(&self.transition)
            .map(|(&p, row)| p * entropy(row))
            .sum())
    }

    /// `T^lag` by repeated multiplication.
    pub fn matrix_power(&self, lag: usize) -> Vec<Vec<f64>> {
        let k = self.states();
        let mut acc: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        for _ in 0..lag {
            let mut next = vec![vec![0.0; k]; k];
            for i in 0..k {
                for m in 0..k {
                    let a = acc[i][m];
                    if a != 0.0 {
                        for j in 0..k {
                            next[i][j] += a * self.transition[m][j];
                        }
                    }
                }
            }
            acc = next;
        }
        acc
    }

    /// Mutual information in nats between two states `lag` steps apart in the
    /// stationary chain.
    pub fn lagged_mutual_information(&self, lag: usize) -> Result<f64> {
        let pi = self.stationary()?;
        let p = self.matrix_power(lag);
        let mut mi = 0.0;
        for (a, row) in p.iter().enumerate() {
            for (b, &pab) in row.iter().enumerate() {
                if pab > 0.0 && pi[a] > 0.0 {
                    mi += pi[a] * pab * (pab / pi[b]).ln();
                }
            }
        }
        Ok(mi.max(0.0))
    }
}

impl MarkovSource {
    /// Log-probability in nats of `states` under the chain, with the first
    /// state scored against the stationary distribution.
    pub fn log_likelihood(&self, states: &[usize]) -> Result<f64> {
        let k = self.states();
        if let Some(&bad) = states.iter().find(|&&s| s >= k) {
            return Err(invalid(format!("state {bad} out of range for {k} states")));
        }
        let Some(&first) = states.first() else {
            return Ok(0.0);
        };
        let mut ll = self.stationary()?[first].ln();
        for w in states.windows(2) {
            ll += self.transition[w[0]][w[1]].ln();
        }
        Ok(ll)
    }

    /// Log-probability of `next` given the preceding state `prev`.
    pub fn transition_log_prob(&self, prev: usize, next: usize) -> Result<f64> {
        let k = self.states();
        if prev >= k || next >= k {
            return Err(invalid(format!("transition {prev}->{next} out of range for {k} states")));
        }
        Ok(self.transition[prev][next].ln())
    }
}

fn draw_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // Rounding left u above the cumulative sum; take the last reachable state.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}
