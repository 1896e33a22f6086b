//! Brute-force reference implementations.
//!
//! These enumerate every hidden configuration or label sequence and are the
//! ground truth the efficient inference paths are verified against. They ship
//! in the library, not just in test code, so downstream users can check
//! custom configurations. All oracles refuse inputs whose enumeration exceeds
//! the configured budget.

use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::math::StreamingLogSumExp;
use crate::memm::MemmModel;
use crate::spn::SpnModel;

/// Enumeration cap for exhaustive oracles.
#[derive(Debug, Clone, Copy)]
pub struct ExhaustiveBudget {
    pub max_configurations: u64,
}

impl Default for ExhaustiveBudget {
    fn default() -> Self {
        ExhaustiveBudget {
            max_configurations: 10_000_000,
        }
    }
}

impl ExhaustiveBudget {
    fn check(&self, configurations: u128, what: &str) -> Result<()> {
        if configurations > self.max_configurations as u128 {
            return Err(Error::budget(format!(
                "{what} requires {configurations} configurations, budget is {}",
                self.max_configurations
            )));
        }
        Ok(())
    }
}

/// Exhaustive per-label `log Q(y, x)`: sums over every assignment of states
/// to every hidden variable, multiplying all path-prefix factors and leaf
/// feature factors. Log-domain accumulation keeps the sum stable.
pub fn spn_brute_force(model: &SpnModel, x: &[f64], budget: &ExhaustiveBudget) -> Result<Vec<f64>> {
    let t = &model.topology;
    model.weights.matches(t)?;
    if x.len() != t.input_dim {
        return Err(Error::input(format!(
            "input has {} dims, topology expects {}",
            x.len(),
            t.input_dim
        )));
    }
    let num_nodes = t.num_hidden_vars();
    let configs = (t.states_per_hidden as u128).pow(num_nodes as u32);
    budget.check(configs, "SPN enumeration")?;

    // Flat node table in breadth-first order: parent link and child slot.
    let mut parents: Vec<usize> = Vec::with_capacity(num_nodes);
    let mut child_slot: Vec<usize> = Vec::with_capacity(num_nodes);
    let mut layer_of: Vec<usize> = Vec::with_capacity(num_nodes);
    {
        let mut prev_layer: Vec<usize> = vec![usize::MAX]; // virtual root
        let mut next_id = 0usize;
        for l in 1..=t.num_layers {
            let mut this_layer = Vec::new();
            for &p in &prev_layer {
                for c in 0..t.children_per_parent {
                    parents.push(p);
                    child_slot.push(c);
                    layer_of.push(l);
                    this_layer.push(next_id);
                    next_id += 1;
                }
            }
            prev_layer = this_layer;
        }
    }

    // Precompute leaf dot products once per full prefix.
    let full = t.full_prefix_count();
    let leaf_dots: Vec<f64> = (0..full)
        .map(|idx| {
            let row =
                &model.weights.leaf_feature_weights[idx * t.input_dim..(idx + 1) * t.input_dim];
            crate::math::dot(row, x)
        })
        .collect();

    let base = t.digit_base();
    let states = t.states_per_hidden;
    let mut log_q = vec![f64::NEG_INFINITY; t.num_labels];
    let mut assignment = vec![0usize; num_nodes];
    let mut prefix_idx = vec![0usize; num_nodes];

    for y in 0..t.num_labels {
        assignment.iter_mut().for_each(|s| *s = 0);
        let mut acc = StreamingLogSumExp::new();
        loop {
            // Score this configuration from scratch.
            let mut score = model.weights.prefix_weights[0][y];
            for n in 0..num_nodes {
                let parent_idx = if parents[n] == usize::MAX {
                    y
                } else {
                    prefix_idx[parents[n]]
                };
                let idx = parent_idx * base + child_slot[n] * states + assignment[n];
                prefix_idx[n] = idx;
                score += model.weights.prefix_weights[layer_of[n]][idx];
                if layer_of[n] == t.num_layers {
                    score += leaf_dots[idx];
                }
            }
            acc.add(score);

            // Odometer.
            let mut k = num_nodes;
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                assignment[k] += 1;
                if assignment[k] < states {
                    break;
                }
                assignment[k] = 0;
                if k == 0 {
                    k = usize::MAX;
                    break;
                }
            }
            if k == usize::MAX {
                break;
            }
        }
        log_q[y] = acc.value();
    }
    Ok(log_q)
}

/// Result of exhaustively scoring every label sequence of a chain model.
#[derive(Debug, Clone)]
pub struct ChainEnumeration {
    pub log_partition: f64,
    /// Unnormalized log score per sequence, aligned with `sequences`.
    pub scores: Vec<f64>,
    pub sequences: Vec<Vec<usize>>,
    /// Highest-scoring sequence; ties break to the lexicographically lowest.
    pub argmax: Vec<usize>,
}

/// Enumerates all `Y^T` label sequences of a chain model over the given
/// observations.
pub fn chain_brute_force(
    model: &ChainModel,
    observations: &[Vec<f64>],
    budget: &ExhaustiveBudget,
) -> Result<ChainEnumeration> {
    let t = observations.len();
    if t == 0 {
        return Err(Error::input("empty observation sequence"));
    }
    let y = model.num_labels();
    let total = (y as u128).pow(t as u32);
    budget.check(total, "chain enumeration")?;

    let mut sequences = Vec::with_capacity(total as usize);
    let mut scores = Vec::with_capacity(total as usize);
    let mut labels = vec![0usize; t];
    let mut log_z = StreamingLogSumExp::new();
    let mut best = 0usize;
    loop {
        let score = model.sequence_score(observations, &labels)?;
        log_z.add(score);
        if !scores.is_empty() && score > scores[best] {
            best = scores.len();
        }
        scores.push(score);
        sequences.push(labels.clone());

        let mut k = t;
        loop {
            if k == 0 {
                break;
            }
            k -= 1;
            labels[k] += 1;
            if labels[k] < y {
                break;
            }
            labels[k] = 0;
            if k == 0 {
                k = usize::MAX;
                break;
            }
        }
        if k == usize::MAX {
            break;
        }
    }
    let argmax = sequences[best].clone();
    Ok(ChainEnumeration {
        log_partition: log_z.value(),
        scores,
        sequences,
        argmax,
    })
}

/// Exhaustive most-probable sequence for a MEMM: enumerates `Y^T` sequences,
/// scoring each by its product of locally normalized conditionals. Ties break
/// to the lexicographically lowest sequence.
pub fn memm_brute_force(
    model: &MemmModel,
    observations: &[Vec<f64>],
    budget: &ExhaustiveBudget,
) -> Result<Vec<usize>> {
    let t = observations.len();
    if t == 0 {
        return Err(Error::input("empty observation sequence"));
    }
    let y = model.num_labels();
    let total = (y as u128).pow(t as u32);
    budget.check(total, "MEMM enumeration")?;

    let mut labels = vec![0usize; t];
    let mut best_score = f64::NEG_INFINITY;
    let mut best = labels.clone();
    loop {
        let score = model.sequence_log_likelihood_obs(observations, &labels)?;
        if score > best_score {
            best_score = score;
            best = labels.clone();
        }

        let mut k = t;
        loop {
            if k == 0 {
                break;
            }
            k -= 1;
            labels[k] += 1;
            if labels[k] < y {
                break;
            }
            labels[k] = 0;
            if k == 0 {
                k = usize::MAX;
                break;
            }
        }
        if k == usize::MAX {
            break;
        }
    }
    Ok(best)
}
