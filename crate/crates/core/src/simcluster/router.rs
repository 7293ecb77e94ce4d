//! Routing tables: token index to ordered top-k experts with weights.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterSpec {
    num_experts: usize,
    top_k: usize,
    /// Per token, `(expert, weight)` in routing order.
    table: Vec<Vec<(usize, f64)>>,
}

impl RouterSpec {
    /// Validates distinct in-range expert ids, nonnegative weights and, when
    /// `normalized`, weights summing to one.
    pub fn from_table(num_experts: usize, table: Vec<Vec<(usize, f64)>>, normalized: bool) -> Result<Self, SimError> {
        let top_k = table.first().map_or(0, |r| r.len());
        for (t, row) in table.iter().enumerate() {
            let bad = |reason: String| SimError::Router { token: t, reason };
            if row.len() != top_k {
                return Err(bad(format!("expected {top_k} experts, got {}", row.len())));
            }
            for (i, &(e, w)) in row.iter().enumerate() {
                if e >= num_experts {
                    return Err(bad(format!("expert {e} out of range (num_experts = {num_experts})")));
                }
                if row[..i].iter().any(|&(p, _)| p == e) {
                    return Err(bad(format!("expert {e} selected twice")));
                }
                if !(w >= 0.0) {
                    return Err(bad(format!("weight {w} is negative")));
                }
            }
            if normalized {
                let sum: f64 = row.iter().map(|&(_, w)| w).sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(bad(format!("weights sum to {sum}, expected 1")));
                }
            }
        }
        Ok(Self {
            num_experts,
            top_k,
            table,
        })
    }

    /// Token `t` goes to experts `t, t+1, ..., t+k-1` (mod `num_experts`) with equal weights.
    pub fn round_robin(tokens: usize, num_experts: usize, k: usize) -> Result<Self, SimError> {
        let w = 1.0 / k as f64;
        let table = (0..tokens)
            .map(|t| (0..k).map(|j| ((t + j) % num_experts, w)).collect())
            .collect();
        Self::from_table(num_experts, table, false)
    }

    /// Every token goes to experts `0..k` with equal weights.
    pub fn skewed(tokens: usize, num_experts: usize, k: usize) -> Result<Self, SimError> {
        let w = 1.0 / k as f64;
        let table = (0..tokens).map(|_| (0..k).map(|e| (e, w)).collect()).collect();
        Self::from_table(num_experts, table, false)
    }

    /// Seeded random distinct experts with positive weights normalized to one.
    pub fn random(tokens: usize, num_experts: usize, k: usize, seed: u64) -> Result<Self, SimError> {
        if k > num_experts {
            return Err(SimError::Router {
                token: 0,
                reason: format!("top_k {k} exceeds num_experts {num_experts}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..tokens)
            .map(|_| {
                let experts = sample(&mut rng, num_experts, k).into_vec();
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                let mut row: Vec<(usize, f64)> = experts.into_iter().zip(raw.iter().map(|w| w / sum)).collect();
                // Pin the sum to exactly one.
                let head: f64 = row[1..].iter().map(|&(_, w)| w).sum();
                row[0].1 = 1.0 - head;
                row
            })
            .collect();
        Self::from_table(num_experts, table, false)
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn num_tokens(&self) -> usize {
        self.table.len()
    }

    /// Routing of token `t` in slot order.
    pub fn route(&self, t: usize) -> &[(usize, f64)] {
        &self.table[t]
    }

    /// Relabels experts: expert `e` becomes `perm[e]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let table = self
            .table
            .iter()
            .map(|row| row.iter().map(|&(e, w)| (perm[e], w)).collect())
            .collect();
        Self {
            num_experts: self.num_experts,
            top_k: self.top_k,
            table,
        }
    }
}
