//! Tree-structured sum-product network classifier.
//!
//! The model scores a label `y` against an input vector `x` by marginalizing
//! over a tree of discrete hidden variables: `L` layers, `I` children per
//! parent, `H` states per hidden variable. Every root-to-leaf path carries one
//! scalar weight per path prefix plus, at full depth, a linear feature weight
//! vector applied to `x`. Evaluation alternates products over children with
//! weighted sums over child states, all in log domain.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, log_sum_exp, max_slice};

/// Aggregation rule used at the hidden-state summations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Semiring {
    /// Log-sum-exp; yields true marginals and supports posteriors/gradients.
    SumProduct,
    /// Max; yields best-configuration scores. Posteriors are undefined.
    MaxProduct,
}

/// Structural description of the layered SPN tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpnTopology {
    pub num_layers: usize,
    pub children_per_parent: usize,
    pub states_per_hidden: usize,
    pub num_labels: usize,
    pub input_dim: usize,
    pub semiring: Semiring,
}

impl SpnTopology {
    pub fn new(
        num_layers: usize,
        children_per_parent: usize,
        states_per_hidden: usize,
        num_labels: usize,
        input_dim: usize,
        semiring: Semiring,
    ) -> Result<Self> {
        let t = SpnTopology {
            num_layers,
            children_per_parent,
            states_per_hidden,
            num_labels,
            input_dim,
            semiring,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.children_per_parent == 0
            || self.states_per_hidden == 0
            || self.num_labels == 0
            || self.input_dim == 0
        {
            return Err(Error::structure(
                "all topology counts (L, I, H, Y, input_dim) must be >= 1",
            ));
        }
        // Reject sizes whose prefix tables cannot be indexed.
        self.checked_prefix_count(self.num_layers)?;
        Ok(())
    }

    /// Branching factor of the path-prefix encoding: one digit per layer,
    /// `I * H` values per digit (child index and state).
    pub fn digit_base(&self) -> usize {
        self.children_per_parent * self.states_per_hidden
    }

    fn checked_prefix_count(&self, depth: usize) -> Result<usize> {
        let mut n: usize = self.num_labels;
        for _ in 0..depth {
            n = n
                .checked_mul(self.digit_base())
                .ok_or_else(|| Error::structure("topology too large: prefix count overflows"))?;
        }
        Ok(n)
    }

    /// Number of distinct path prefixes at `depth`: `Y * (I*H)^depth`.
    pub fn prefix_count(&self, depth: usize) -> usize {
        self.num_labels * self.digit_base().pow(depth as u32)
    }

    /// Number of full-depth path-state encodings, one leaf feature vector each.
    pub fn full_prefix_count(&self) -> usize {
        self.prefix_count(self.num_layers)
    }

    /// Total hidden variables in the tree: sum over layers of `I^l`.
    pub fn num_hidden_vars(&self) -> usize {
        (1..=self.num_layers)
            .map(|l| self.children_per_parent.pow(l as u32))
            .sum()
    }

    /// Every valid path prefix of the given depth, in canonical order:
    /// label-major, then layer by layer with the child index outranking the
    /// state.
    pub fn enumerate_prefixes(&self, depth: usize) -> Result<Vec<PathPrefix>> {
        if depth > self.num_layers {
            return Err(Error::structure(format!(
                "depth {depth} exceeds num_layers {}",
                self.num_layers
            )));
        }
        let count = self.checked_prefix_count(depth)?;
        Ok((0..count)
            .map(|idx| PathPrefix::from_index(self, depth, idx))
            .collect())
    }
}

/// One step of a root-to-leaf path: which child was taken and its state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathStep {
    pub child: usize,
    pub state: usize,
}

/// Encodes `S_{0:l}`: the root label plus `(child, state)` pairs down to
/// depth `l`. Two prefixes are equal iff the label and all pairs are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathPrefix {
    pub label: usize,
    pub steps: Vec<PathStep>,
}

impl PathPrefix {
    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    /// Position of this prefix in the canonical enumeration of its depth.
    pub fn index(&self, topology: &SpnTopology) -> usize {
        let base = topology.digit_base();
        let mut idx = self.label;
        for step in &self.steps {
            idx = idx * base + step.child * topology.states_per_hidden + step.state;
        }
        idx
    }

    pub fn from_index(topology: &SpnTopology, depth: usize, index: usize) -> Self {
        let base = topology.digit_base();
        let mut digits = vec![0usize; depth];
        let mut rest = index;
        for i in (0..depth).rev() {
            digits[i] = rest % base;
            rest /= base;
        }
        PathPrefix {
            label: rest,
            steps: digits
                .into_iter()
                .map(|d| PathStep {
                    child: d / topology.states_per_hidden,
                    state: d % topology.states_per_hidden,
                })
                .collect(),
        }
    }

    pub fn validate(&self, topology: &SpnTopology) -> Result<()> {
        if self.label >= topology.num_labels {
            return Err(Error::structure(format!(
                "prefix label {} out of range (Y = {})",
                self.label, topology.num_labels
            )));
        }
        if self.depth() > topology.num_layers {
            return Err(Error::structure(format!(
                "prefix depth {} exceeds num_layers {}",
                self.depth(),
                topology.num_layers
            )));
        }
        for step in &self.steps {
            if step.child >= topology.children_per_parent
                || step.state >= topology.states_per_hidden
            {
                return Err(Error::structure(format!(
                    "prefix step ({}, {}) out of range (I = {}, H = {})",
                    step.child,
                    step.state,
                    topology.children_per_parent,
                    topology.states_per_hidden
                )));
            }
        }
        Ok(())
    }
}

/// All weights of one SPN: a scalar per enumerable prefix (depths `0..=L`,
/// canonical order) and a feature vector per full-depth path-state encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpnWeights {
    /// `prefix_weights[depth][prefix_index]`.
    pub prefix_weights: Vec<Vec<f64>>,
    /// Row-major `[full_prefix_index][input_dim]`, flattened.
    pub leaf_feature_weights: Vec<f64>,
}

impl SpnWeights {
    pub fn zeros(topology: &SpnTopology) -> Self {
        SpnWeights {
            prefix_weights: (0..=topology.num_layers)
                .map(|d| vec![0.0; topology.prefix_count(d)])
                .collect(),
            leaf_feature_weights: vec![0.0; topology.full_prefix_count() * topology.input_dim],
        }
    }

    /// Zero prefix weights, leaf feature weights uniform on `[-a, a]` with
    /// `a = 1/sqrt(input_dim)`.
    pub fn random_init<R: Rng>(topology: &SpnTopology, rng: &mut R) -> Self {
        let mut w = SpnWeights::zeros(topology);
        let a = 1.0 / (topology.input_dim as f64).sqrt();
        for v in &mut w.leaf_feature_weights {
            *v = rng.random_range(-a..a);
        }
        w
    }

    pub fn matches(&self, topology: &SpnTopology) -> Result<()> {
        if self.prefix_weights.len() != topology.num_layers + 1 {
            return Err(Error::structure(format!(
                "expected {} prefix-weight levels, got {}",
                topology.num_layers + 1,
                self.prefix_weights.len()
            )));
        }
        for (d, level) in self.prefix_weights.iter().enumerate() {
            if level.len() != topology.prefix_count(d) {
                return Err(Error::structure(format!(
                    "depth {d}: expected {} prefix weights, got {}",
                    topology.prefix_count(d),
                    level.len()
                )));
            }
        }
        let want = topology.full_prefix_count() * topology.input_dim;
        if self.leaf_feature_weights.len() != want {
            return Err(Error::structure(format!(
                "expected {} leaf feature weights, got {}",
                want,
                self.leaf_feature_weights.len()
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.prefix_weights
            .iter()
            .all(|level| level.iter().all(|w| w.is_finite()))
            && self.leaf_feature_weights.iter().all(|w| w.is_finite())
    }

    pub fn param_len(&self) -> usize {
        self.prefix_weights.iter().map(Vec::len).sum::<usize>() + self.leaf_feature_weights.len()
    }

    /// Append all parameters in canonical order (prefix weights by depth,
    /// then leaf vectors).
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for level in &self.prefix_weights {
            out.extend_from_slice(level);
        }
        out.extend_from_slice(&self.leaf_feature_weights);
    }

    /// Read parameters back from the canonical flat layout. Returns the
    /// number of values consumed.
    pub fn read_flat(&mut self, data: &[f64]) -> usize {
        let mut pos = 0;
        for level in &mut self.prefix_weights {
            let n = level.len();
            level.copy_from_slice(&data[pos..pos + n]);
            pos += n;
        }
        let n = self.leaf_feature_weights.len();
        self.leaf_feature_weights
            .copy_from_slice(&data[pos..pos + n]);
        pos + n
    }

    pub fn scaled_add(&mut self, other: &SpnWeights, factor: f64) {
        for (lvl, olvl) in self.prefix_weights.iter_mut().zip(&other.prefix_weights) {
            for (w, o) in lvl.iter_mut().zip(olvl) {
                *w += factor * o;
            }
        }
        for (w, o) in self
            .leaf_feature_weights
            .iter_mut()
            .zip(&other.leaf_feature_weights)
        {
            *w += factor * o;
        }
    }
}

/// Instrumentation counters for one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounters {
    /// Weighted-sum node aggregations, one per (label, hidden tree node):
    /// totals `Y * sum_l I^l` per call.
    pub weighted_sum_nodes: u64,
    /// Leaf feature dot products: totals `Y * (I*H)^L` per call.
    pub leaf_dot_products: u64,
}

/// Result of one evaluation: per-label log `Q(y, x)`, the cached per-prefix
/// subtree values, and the log partition.
#[derive(Debug, Clone)]
pub struct SpnEvaluation {
    /// `q_values[y] = log Q(y, x)`.
    pub q_values: Vec<f64>,
    /// `node_values[depth][prefix_index]`: log subtree value including the
    /// prefix's own factor; `node_values[0]` equals `q_values`.
    pub node_values: Vec<Vec<f64>>,
    /// `log Z(x)`: log-sum-exp of `q_values` (sum-product) or their max
    /// (max-product).
    pub partition: f64,
    pub semiring: Semiring,
    pub counters: EvalCounters,
}

/// An SPN topology together with its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpnModel {
    pub topology: SpnTopology,
    pub weights: SpnWeights,
}

impl SpnModel {
    pub fn new(topology: SpnTopology, weights: SpnWeights) -> Result<Self> {
        weights.matches(&topology)?;
        Ok(SpnModel { topology, weights })
    }

    pub fn zeros(topology: SpnTopology) -> Self {
        let weights = SpnWeights::zeros(&topology);
        SpnModel { topology, weights }
    }

    pub fn random_init<R: Rng>(topology: SpnTopology, rng: &mut R) -> Self {
        let weights = SpnWeights::random_init(&topology, rng);
        SpnModel { topology, weights }
    }

    /// Evaluate `log Q(y, x)` for every label by the alternating
    /// product / weighted-sum recursion, bottom-up over path prefixes.
    pub fn evaluate(&self, x: &[f64]) -> Result<SpnEvaluation> {
        let t = &self.topology;
        self.weights.matches(t)?;
        if x.len() != t.input_dim {
            return Err(Error::input(format!(
                "input has {} dims, topology expects {}",
                x.len(),
                t.input_dim
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite input feature"));
        }
        if !self.weights.all_finite() {
            return Err(Error::numeric("non-finite SPN weight"));
        }

        let levels = t.num_layers;
        let base = t.digit_base();
        let states = t.states_per_hidden;
        let mut counters = EvalCounters::default();
        let mut node_values: Vec<Vec<f64>> = vec![Vec::new(); levels + 1];

        // Leaf level: prefix factor plus the linear feature term.
        let full = t.full_prefix_count();
        let mut leaf_vals = vec![0.0f64; full];
        for (idx, val) in leaf_vals.iter_mut().enumerate() {
            let row =
                &self.weights.leaf_feature_weights[idx * t.input_dim..(idx + 1) * t.input_dim];
            *val = self.weights.prefix_weights[levels][idx] + dot(row, x);
            counters.leaf_dot_products += 1;
        }
        node_values[levels] = leaf_vals;

        // Interior levels: product over children of the aggregated states.
        for depth in (0..levels).rev() {
            let count = t.prefix_count(depth);
            let mut vals = vec![0.0f64; count];
            let child_vals = &node_values[depth + 1];
            for (p, val) in vals.iter_mut().enumerate() {
                let mut v = self.weights.prefix_weights[depth][p];
                let count_node = prefix_states_all_zero(p, depth, base, states);
                for c in 0..t.children_per_parent {
                    let start = p * base + c * states;
                    let block = &child_vals[start..start + states];
                    v += match t.semiring {
                        Semiring::SumProduct => log_sum_exp(block),
                        Semiring::MaxProduct => max_slice(block),
                    };
                    if count_node {
                        counters.weighted_sum_nodes += 1;
                    }
                }
                *val = v;
            }
            node_values[depth] = vals;
        }

        let q_values = node_values[0].clone();
        let partition = match t.semiring {
            Semiring::SumProduct => log_sum_exp(&q_values),
            Semiring::MaxProduct => max_slice(&q_values),
        };
        if !partition.is_finite() {
            return Err(Error::numeric("evaluation produced a non-finite partition"));
        }
        Ok(SpnEvaluation {
            q_values,
            node_values,
            partition,
            semiring: t.semiring,
            counters,
        })
    }

    /// Log conditional likelihood of one label and its gradient with respect
    /// to every weight, via the message-passing expectation difference.
    pub fn gradient(&self, x: &[f64], observed_label: usize) -> Result<(SpnWeights, f64)> {
        let t = &self.topology;
        if observed_label >= t.num_labels {
            return Err(Error::input(format!(
                "observed label {observed_label} out of range (Y = {})",
                t.num_labels
            )));
        }
        let eval = self.evaluate(x)?;
        let post = posterior(&eval)?;
        let log_lik = eval.q_values[observed_label] - eval.partition;
        let mut coeff = post.iter().map(|p| -p).collect::<Vec<_>>();
        coeff[observed_label] += 1.0;
        let mut grad = SpnWeights::zeros(t);
        self.accumulate_weighted_gradient(&eval, x, &coeff, &mut grad, 1.0)?;
        Ok((grad, log_lik))
    }

    /// Marginal posterior mass of all configurations consistent with the
    /// prefix: `p(S_{0:l} = prefix | x)`.
    pub fn marginal_hidden(&self, x: &[f64], prefix: &PathPrefix) -> Result<f64> {
        let t = &self.topology;
        prefix.validate(t)?;
        let eval = self.evaluate(x)?;
        let post = posterior(&eval)?;

        // Walk down the single path, accumulating the log outside value.
        let base = t.digit_base();
        let states = t.states_per_hidden;
        let mut log_outside = 0.0;
        let mut p_idx = prefix.label;
        for (d, step) in prefix.steps.iter().enumerate() {
            let start = p_idx * base + step.child * states;
            let block = &eval.node_values[d + 1][start..start + states];
            log_outside += eval.node_values[d][p_idx] - log_sum_exp(block);
            p_idx = start + step.state;
        }
        let within_label = (log_outside + eval.node_values[prefix.depth()][p_idx]
            - eval.q_values[prefix.label])
            .exp();
        Ok(post[prefix.label] * within_label)
    }

    /// Accumulate `scale * sum_y coeff[y] * d log Q(y, x) / dw` into `grad`.
    ///
    /// This is the quantity chain and MEMM training distribute into the local
    /// factors: the per-label conditional feature expectations weighted by an
    /// arbitrary coefficient vector over labels.
    pub fn accumulate_weighted_gradient(
        &self,
        eval: &SpnEvaluation,
        x: &[f64],
        coeff: &[f64],
        grad: &mut SpnWeights,
        scale: f64,
    ) -> Result<()> {
        let t = &self.topology;
        if eval.semiring != Semiring::SumProduct {
            return Err(Error::contract(
                "gradients are defined only for sum-product evaluations",
            ));
        }
        if coeff.len() != t.num_labels {
            return Err(Error::input("coefficient vector length must equal Y"));
        }
        let base = t.digit_base();
        let states = t.states_per_hidden;

        // Downward pass: log outside values per prefix, then the conditional
        // prefix marginal m(prefix) = exp(outside + inside - log Q(label)).
        let mut outside: Vec<Vec<f64>> = Vec::with_capacity(t.num_layers + 1);
        outside.push(vec![0.0; t.num_labels]);
        for depth in 0..t.num_layers {
            let count = t.prefix_count(depth);
            let mut next = vec![0.0f64; t.prefix_count(depth + 1)];
            let vals = &eval.node_values[depth];
            let child_vals = &eval.node_values[depth + 1];
            for p in 0..count {
                let out_p = outside[depth][p];
                for c in 0..t.children_per_parent {
                    let start = p * base + c * states;
                    let block = &child_vals[start..start + states];
                    let branch = out_p + vals[p] - log_sum_exp(block);
                    for (s, slot) in next[start..start + states].iter_mut().enumerate() {
                        *slot = branch;
                        let _ = s;
                    }
                }
            }
            outside.push(next);
        }

        for depth in 0..=t.num_layers {
            let count = t.prefix_count(depth);
            let per_label = count / t.num_labels;
            let grad_level = &mut grad.prefix_weights[depth];
            for p in 0..count {
                let label = p / per_label;
                let c = coeff[label];
                if c == 0.0 {
                    continue;
                }
                let m =
                    (outside[depth][p] + eval.node_values[depth][p] - eval.q_values[label]).exp();
                let g = scale * c * m;
                grad_level[p] += g;
                if depth == t.num_layers {
                    let row =
                        &mut grad.leaf_feature_weights[p * t.input_dim..(p + 1) * t.input_dim];
                    for (slot, &xj) in row.iter_mut().zip(x) {
                        *slot += g * xj;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: SpnModel = serde_json::from_str(s)?;
        model.weights.matches(&model.topology)?;
        if !model.weights.all_finite() {
            return Err(Error::numeric(
                "loaded SPN weights contain non-finite values",
            ));
        }
        Ok(model)
    }
}

/// Posterior `p(y | x)` from a sum-product evaluation.
pub fn posterior(eval: &SpnEvaluation) -> Result<Vec<f64>> {
    if eval.semiring != Semiring::SumProduct {
        return Err(Error::contract(
            "posterior is undefined for max-product evaluations",
        ));
    }
    Ok(eval
        .q_values
        .iter()
        .map(|q| (q - eval.partition).exp())
        .collect())
}

/// True when every state digit of the prefix index is zero; used to count
/// each (label, tree node) weighted-sum evaluation exactly once.
fn prefix_states_all_zero(index: usize, depth: usize, base: usize, states: usize) -> bool {
    let mut rest = index;
    for _ in 0..depth {
        if (rest % base) % states != 0 {
            return false;
        }
        rest /= base;
    }
    true
}
