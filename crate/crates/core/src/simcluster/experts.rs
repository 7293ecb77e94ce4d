//! Deterministic stand-in expert transforms, distinct per expert so that a
//! misrouted token changes the output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExpertSpec {
    /// `Expert_e(x) = gain[e] * x + bias[e]` elementwise.
    Affine { gains: Vec<f64>, biases: Vec<f64> },
    /// `Expert_e(x) = W_e x + bias[e]` with `W_e` row-major `h x h`.
    Dense {
        hidden: usize,
        weights: Vec<Vec<f64>>,
        biases: Vec<f64>,
    },
}

impl ExpertSpec {
    /// The default `Expert_e(x) = (e + 1) x + e`.
    pub fn affine_default(num_experts: usize) -> Self {
        ExpertSpec::Affine {
            gains: (0..num_experts).map(|e| (e + 1) as f64).collect(),
            biases: (0..num_experts).map(|e| e as f64).collect(),
        }
    }

    pub fn identity(num_experts: usize) -> Self {
        ExpertSpec::Affine {
            gains: vec![1.0; num_experts],
            biases: vec![0.0; num_experts],
        }
    }

    pub fn dense_random(num_experts: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..num_experts)
            .map(|_| (0..hidden * hidden).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let biases = (0..num_experts).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ExpertSpec::Dense {
            hidden,
            weights,
            biases,
        }
    }

    pub fn num_experts(&self) -> usize {
        match self {
            ExpertSpec::Affine { gains, .. } => gains.len(),
            ExpertSpec::Dense { biases, .. } => biases.len(),
        }
    }

    /// Full expert output for one row.
    pub fn apply(&self, e: usize, x: &[f64]) -> Vec<f64> {
        match self {
            ExpertSpec::Affine { gains, biases } => x.iter().map(|v| gains[e] * v + biases[e]).collect(),
            ExpertSpec::Dense {
                hidden,
                weights,
                biases,
            } => (0..*hidden)
                .map(|i| {
                    let row = &weights[e][i * hidden..(i + 1) * hidden];
                    row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + biases[e]
                })
                .collect(),
        }
    }

    /// The share of `apply(e, x)` computed by TP rank `t` of `m`; the shares
    /// of all `m` ranks sum to the full output.
    pub fn partial(&self, e: usize, x: &[f64], t: usize, m: usize) -> Vec<f64> {
        let h = x.len();
        let w = h / m;
        let slice = t * w..(t + 1) * w;
        match self {
            // Output-sliced: rank t owns output columns of slice t.
            ExpertSpec::Affine { gains, biases } => (0..h)
                .map(|i| {
                    if slice.contains(&i) {
                        gains[e] * x[i] + biases[e]
                    } else {
                        0.0
                    }
                })
                .collect(),
            // Input-sliced: rank t contracts over input columns of slice t.
            ExpertSpec::Dense {
                hidden,
                weights,
                biases,
            } => (0..*hidden)
                .map(|i| {
                    let row = &weights[e][i * hidden..(i + 1) * hidden];
                    let acc: f64 = slice.clone().map(|j| row[j] * x[j]).sum();
                    if t == 0 {
                        acc + biases[e]
                    } else {
                        acc
                    }
                })
                .collect(),
        }
    }

    /// Multiply-adds performed by one TP rank for one row.
    pub fn partial_ops(&self, h: usize, m: usize) -> u64 {
        match self {
            ExpertSpec::Affine { .. } => (h / m) as u64,
            ExpertSpec::Dense { .. } => (h * h / m) as u64,
        }
    }

    /// Relabels experts: the parameters of expert `e` move to `perm[e]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        fn scatter<T: Clone>(v: &[T], perm: &[usize]) -> Vec<T> {
            let mut out = v.to_vec();
            for (e, item) in v.iter().enumerate() {
                out[perm[e]] = item.clone();
            }
            out
        }
        match self {
            ExpertSpec::Affine { gains, biases } => ExpertSpec::Affine {
                gains: scatter(gains, perm),
                biases: scatter(biases, perm),
            },
            ExpertSpec::Dense {
                hidden,
                weights,
                biases,
            } => ExpertSpec::Dense {
                hidden: *hidden,
                weights: scatter(weights, perm),
                biases: scatter(biases, perm),
            },
        }
    }
}
