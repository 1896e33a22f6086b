//! Linear-chain CRF with SPN local factors.
//!
//! Supports first-order chains and the higher-order extension in one
//! inference engine: the chain runs over an expanded state space where the
//! state at position `t` is the tuple of the last `K` labels (fewer near the
//! start of the sequence), `K` being the largest label-gram order any factor
//! needs. Input-independent n-gram factors are looked up in sparse
//! dictionaries; input-dependent factors are SPNs over label-gram alphabets.
//! All messages are kept in log domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, rel_error};
use crate::ngram::{gram_from_labels, NGramDictionary, START_LABEL};
use crate::sequence::{stacked_window, LabeledSequence};
use crate::spn::{SpnEvaluation, SpnModel, SpnWeights};

/// Input-independent factor over label n-grams.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionBlock {
    pub dictionary: NGramDictionary,
    /// Indexed by dictionary entry.
    pub weights: Vec<f64>,
}

impl TransitionBlock {
    pub fn zeros(dictionary: NGramDictionary) -> Self {
        let weights = vec![0.0; dictionary.len()];
        TransitionBlock {
            dictionary,
            weights,
        }
    }

    fn log_weight(&self, gram: &[u32]) -> f64 {
        match self.dictionary.index_of(gram) {
            Some(i) => self.weights[i],
            None => self.dictionary.unseen_log_weight(),
        }
    }
}

/// Input-dependent factor: an SPN scoring `window_width` stacked observation
/// vectors against `gram_order` consecutive labels (root label space
/// `Y^gram_order`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalFactor {
    pub window_width: usize,
    pub gram_order: usize,
    pub spn: SpnModel,
}

impl LocalFactor {
    /// 1-based window start for the factor anchored at position `t`:
    /// aligned to the end of the label gram, centered when wider.
    fn window_start(&self, t: usize) -> i64 {
        t as i64
            - (self.gram_order as i64 - 1)
            - (self.window_width as i64 - self.gram_order as i64).div_euclid(2)
    }
}

/// Linear-chain CRF over label sequences with SPN local factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainModel {
    num_labels: usize,
    input_dim: usize,
    pub transitions: Vec<TransitionBlock>,
    pub locals: Vec<LocalFactor>,
    /// Expanded-state history length `K`.
    context: usize,
}

impl ChainModel {
    pub fn new(
        num_labels: usize,
        input_dim: usize,
        transitions: Vec<TransitionBlock>,
        locals: Vec<LocalFactor>,
    ) -> Result<Self> {
        if num_labels == 0 || input_dim == 0 {
            return Err(Error::input("num_labels and input_dim must be >= 1"));
        }
        let mut context = 1usize;
        let mut seen_orders = Vec::new();
        for block in &transitions {
            let order = block.dictionary.order();
            if order > 3 {
                return Err(Error::input("transition n-gram order must be <= 3"));
            }
            if seen_orders.contains(&order) {
                return Err(Error::input(format!("duplicate transition order {order}")));
            }
            seen_orders.push(order);
            if block.weights.len() != block.dictionary.len() {
                return Err(Error::input(
                    "transition weights must match dictionary size",
                ));
            }
            if !block.weights.iter().all(|w| w.is_finite()) {
                return Err(Error::numeric("non-finite transition weight"));
            }
            context = context.max(order.saturating_sub(1));
        }
        for f in &locals {
            if f.gram_order == 0 || f.window_width == 0 {
                return Err(Error::input("local factor m and n must be >= 1"));
            }
            if f.gram_order > 3 {
                return Err(Error::input("local factor gram order must be <= 3"));
            }
            let want_labels = num_labels
                .checked_pow(f.gram_order as u32)
                .ok_or_else(|| Error::input("label-gram space overflows"))?;
            if f.spn.topology.num_labels != want_labels {
                return Err(Error::input(format!(
                    "local factor SPN has {} labels, expected Y^n = {want_labels}",
                    f.spn.topology.num_labels
                )));
            }
            if f.spn.topology.input_dim != f.window_width * input_dim {
                return Err(Error::input(format!(
                    "local factor SPN expects {} input dims, window provides {}",
                    f.spn.topology.input_dim,
                    f.window_width * input_dim
                )));
            }
            f.spn.weights.matches(&f.spn.topology)?;
            context = context.max(f.gram_order);
        }
        Ok(ChainModel {
            num_labels,
            input_dim,
            transitions,
            locals,
            context,
        })
    }

    /// First-order chain: one `(m=1, n=1)` SPN local factor and bigram
    /// transitions.
    pub fn first_order(spn: SpnModel, bigrams: NGramDictionary) -> Result<Self> {
        if bigrams.order() != 2 {
            return Err(Error::input(
                "first-order chain expects a bigram dictionary",
            ));
        }
        let num_labels = spn.topology.num_labels;
        let input_dim = spn.topology.input_dim;
        ChainModel::new(
            num_labels,
            input_dim,
            vec![TransitionBlock::zeros(bigrams)],
            vec![LocalFactor {
                window_width: 1,
                gram_order: 1,
                spn,
            }],
        )
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn context(&self) -> usize {
        self.context
    }

    /// Number of expanded states at 1-based position `t`.
    fn state_count(&self, t: usize) -> usize {
        self.num_labels.pow(self.history_len(t) as u32)
    }

    /// Real labels covered by the state at position `t`.
    fn history_len(&self, t: usize) -> usize {
        t.min(self.context)
    }

    /// Label n-gram ending at position `t`, read from the expanded state
    /// (and its predecessor when the gram reaches one step further back).
    fn gram_at(
        &self,
        t: usize,
        state: usize,
        prev_state: Option<usize>,
        order: usize,
        out: &mut Vec<u32>,
    ) {
        out.clear();
        let r = self.history_len(t);
        for j in 0..order {
            let pos = t as i64 - order as i64 + 1 + j as i64;
            if pos < 1 {
                out.push(START_LABEL);
            } else if pos >= (t - r + 1) as i64 {
                let shift = (t as i64 - pos) as u32;
                out.push(((state / self.num_labels.pow(shift)) % self.num_labels) as u32);
            } else {
                // pos == t - r; only reachable with a full-length predecessor.
                let prev = prev_state.expect("gram reaches past state without predecessor");
                let r_prev = self.history_len(t - 1);
                let shift = (t as i64 - 1 - pos) as u32;
                debug_assert_eq!(shift as usize, r_prev - 1);
                out.push(((prev / self.num_labels.pow(shift)) % self.num_labels) as u32);
            }
        }
    }

    /// Sum of input-independent factor log weights for the grams ending at
    /// `t` given the expanded states.
    fn transition_score(
        &self,
        t: usize,
        prev_state: Option<usize>,
        state: usize,
        scratch: &mut Vec<u32>,
    ) -> f64 {
        let mut total = 0.0;
        for block in &self.transitions {
            self.gram_at(t, state, prev_state, block.dictionary.order(), scratch);
            total += block.log_weight(scratch);
        }
        total
    }

    /// Sum of configured local factor scores at `(t, state)`. Factors whose
    /// gram order exceeds the available history (positions `t < n`) are
    /// skipped; observation windows are zero-padded at the edges.
    pub fn local_log_factor(
        &self,
        observations: &[Vec<f64>],
        t: usize,
        state: usize,
    ) -> Result<f64> {
        if t == 0 || t > observations.len() {
            return Err(Error::input(format!("position {t} out of range")));
        }
        if state >= self.state_count(t) {
            return Err(Error::input(format!("state {state} out of range at t={t}")));
        }
        let mut total = 0.0;
        for f in &self.locals {
            if t < f.gram_order {
                continue;
            }
            let window = stacked_window(
                observations,
                f.window_start(t),
                f.window_width,
                self.input_dim,
            );
            let eval = f.spn.evaluate(&window)?;
            let gram = state % self.num_labels.pow(f.gram_order as u32);
            total += eval.q_values[gram];
        }
        Ok(total)
    }

    /// Local factor tables and cached SPN evaluations for one sequence:
    /// `tables[t-1][state]` plus per-factor per-position evaluations.
    fn local_tables(&self, observations: &[Vec<f64>]) -> Result<LocalTables> {
        let t_len = observations.len();
        let mut tables: Vec<Vec<f64>> = (1..=t_len)
            .map(|t| vec![0.0; self.state_count(t)])
            .collect();
        let mut evals: Vec<Vec<Option<(Vec<f64>, SpnEvaluation)>>> = Vec::new();
        for f in &self.locals {
            let mut per_t = Vec::with_capacity(t_len);
            for t in 1..=t_len {
                if t < f.gram_order {
                    per_t.push(None);
                    continue;
                }
                let window = stacked_window(
                    observations,
                    f.window_start(t),
                    f.window_width,
                    self.input_dim,
                );
                let eval = f.spn.evaluate(&window)?;
                let gram_space = self.num_labels.pow(f.gram_order as u32);
                for (s, slot) in tables[t - 1].iter_mut().enumerate() {
                    *slot += eval.q_values[s % gram_space];
                }
                per_t.push(Some((window, eval)));
            }
            evals.push(per_t);
        }
        Ok(LocalTables { tables, evals })
    }

    /// Unnormalized log score of a full labeling: local plus transition
    /// factors at the observed labels.
    pub fn sequence_score(&self, observations: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        if observations.len() != labels.len() || labels.is_empty() {
            return Err(Error::input(
                "labels must match observations and be non-empty",
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_labels) {
            return Err(Error::input(format!("label {bad} out of range")));
        }
        let mut score = 0.0;
        for t in 1..=labels.len() {
            for block in &self.transitions {
                let gram = gram_from_labels(labels, t, block.dictionary.order());
                score += block.log_weight(&gram);
            }
            for f in &self.locals {
                if t < f.gram_order {
                    continue;
                }
                let window = stacked_window(
                    observations,
                    f.window_start(t),
                    f.window_width,
                    self.input_dim,
                );
                let eval = f.spn.evaluate(&window)?;
                let mut gram_idx = 0usize;
                for j in 0..f.gram_order {
                    gram_idx = gram_idx * self.num_labels + labels[t - f.gram_order + j];
                }
                score += eval.q_values[gram_idx];
            }
        }
        Ok(score)
    }

    /// Forward-backward message passing over the expanded state space.
    pub fn forward_backward(&self, observations: &[Vec<f64>]) -> Result<ChainMessages> {
        let locals = self.local_tables(observations)?;
        self.forward_backward_with(observations, &locals)
    }

    fn forward_backward_with(
        &self,
        observations: &[Vec<f64>],
        locals: &LocalTables,
    ) -> Result<ChainMessages> {
        let t_len = observations.len();
        if t_len == 0 {
            return Err(Error::input("empty observation sequence"));
        }
        let y = self.num_labels;
        let k = self.context;
        let mut scratch = Vec::with_capacity(4);

        let mut alpha_trans: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        for t in 1..=t_len {
            let ns = self.state_count(t);
            let mut at = vec![0.0; ns];
            if t == 1 {
                for (s, slot) in at.iter_mut().enumerate() {
                    *slot = self.transition_score(1, None, s, &mut scratch);
                }
            } else {
                let grows = self.history_len(t) > self.history_len(t - 1);
                let prev_alpha = &alpha[t - 2];
                let mut terms = Vec::with_capacity(y);
                for (s, slot) in at.iter_mut().enumerate() {
                    if grows {
                        let p = s / y;
                        *slot = prev_alpha[p] + self.transition_score(t, Some(p), s, &mut scratch);
                    } else {
                        terms.clear();
                        let suffix = s / y;
                        for a in 0..y {
                            let p = a * y.pow((k - 1) as u32) + suffix;
                            terms.push(
                                prev_alpha[p] + self.transition_score(t, Some(p), s, &mut scratch),
                            );
                        }
                        *slot = log_sum_exp(&terms);
                    }
                }
            }
            let a: Vec<f64> = at
                .iter()
                .zip(&locals.tables[t - 1])
                .map(|(tr, lo)| tr + lo)
                .collect();
            alpha_trans.push(at);
            alpha.push(a);
        }

        let mut beta_trans: Vec<Vec<f64>> = vec![Vec::new(); t_len];
        let mut beta: Vec<Vec<f64>> = vec![Vec::new(); t_len];
        beta_trans[t_len - 1] = vec![0.0; self.state_count(t_len)];
        beta[t_len - 1] = beta_trans[t_len - 1]
            .iter()
            .zip(&locals.tables[t_len - 1])
            .map(|(tr, lo)| tr + lo)
            .collect();
        for t in (1..t_len).rev() {
            let ns = self.state_count(t);
            let grows = self.history_len(t + 1) > self.history_len(t);
            let mut bt = vec![0.0; ns];
            let next_beta = &beta[t];
            let mut terms = Vec::with_capacity(y);
            for (s, slot) in bt.iter_mut().enumerate() {
                terms.clear();
                let stem = if grows {
                    s * y
                } else {
                    (s % y.pow((k - 1) as u32)) * y
                };
                for label in 0..y {
                    let succ = stem + label;
                    terms.push(
                        self.transition_score(t + 1, Some(s), succ, &mut scratch) + next_beta[succ],
                    );
                }
                *slot = log_sum_exp(&terms);
            }
            beta[t - 1] = bt
                .iter()
                .zip(&locals.tables[t - 1])
                .map(|(tr, lo)| tr + lo)
                .collect();
            beta_trans[t - 1] = bt;
        }

        let log_partition = log_sum_exp(&alpha[t_len - 1]);
        let from_beta: Vec<f64> = alpha_trans[0]
            .iter()
            .zip(&beta[0])
            .map(|(a, b)| a + b)
            .collect();
        let log_partition_backward = log_sum_exp(&from_beta);
        // A -inf partition means every labeling is excluded (all-sparse
        // dictionaries with include_unseen = false); no distribution exists.
        if !log_partition.is_finite() {
            return Err(Error::numeric("partition function is not finite"));
        }

        let beta_local: Vec<Vec<f64>> = alpha_trans
            .iter()
            .zip(&beta_trans)
            .map(|(a, b)| a.iter().zip(b).map(|(x, z)| x + z).collect())
            .collect();

        Ok(ChainMessages {
            alpha_trans,
            alpha,
            beta_trans,
            beta,
            beta_local,
            log_partition,
            log_partition_backward,
        })
    }

    /// Conditional log likelihood of a labeled sequence.
    pub fn sequence_log_likelihood(&self, seq: &LabeledSequence) -> Result<f64> {
        seq.validate_for(self.num_labels, self.input_dim)?;
        let messages = self.forward_backward(&seq.observations)?;
        let score = self.sequence_score(&seq.observations, &seq.labels)?;
        Ok(score - messages.log_partition)
    }

    /// Node, label, and edge posteriors for one observation sequence.
    pub fn posterior_marginals(&self, observations: &[Vec<f64>]) -> Result<ChainMarginals> {
        let locals = self.local_tables(observations)?;
        let messages = self.forward_backward_with(observations, &locals)?;
        self.marginals_from(observations, &locals, &messages)
    }

    fn marginals_from(
        &self,
        observations: &[Vec<f64>],
        locals: &LocalTables,
        messages: &ChainMessages,
    ) -> Result<ChainMarginals> {
        let t_len = observations.len();
        let y = self.num_labels;
        let log_z = messages.log_partition;
        let mut scratch = Vec::with_capacity(4);

        let mut states: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut labels: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        for t in 1..=t_len {
            let row: Vec<f64> = (0..self.state_count(t))
                .map(|s| {
                    (messages.alpha[t - 1][s] + messages.beta[t - 1][s]
                        - locals.tables[t - 1][s]
                        - log_z)
                        .exp()
                })
                .collect();
            let mut lab = vec![0.0; y];
            for (s, &p) in row.iter().enumerate() {
                lab[s % y] += p;
            }
            states.push(row);
            labels.push(lab);
        }

        let mut edges: Vec<Vec<Vec<f64>>> = Vec::with_capacity(t_len.saturating_sub(1));
        for t in 2..=t_len {
            let ns_prev = self.state_count(t - 1);
            let ns = self.state_count(t);
            let grows = self.history_len(t) > self.history_len(t - 1);
            let mut mat = vec![vec![0.0; ns]; ns_prev];
            for s in 0..ns {
                let preds: Vec<usize> = if grows {
                    vec![s / y]
                } else {
                    let suffix = s / y;
                    (0..y)
                        .map(|a| a * y.pow((self.context - 1) as u32) + suffix)
                        .collect()
                };
                for p in preds {
                    mat[p][s] = (messages.alpha[t - 2][p]
                        + self.transition_score(t, Some(p), s, &mut scratch)
                        + messages.beta[t - 1][s]
                        - log_z)
                        .exp();
                }
            }
            edges.push(mat);
        }

        Ok(ChainMarginals {
            states,
            labels,
            edges,
        })
    }

    /// Gradient of the conditional log likelihood with respect to every
    /// transition weight and SPN weight, plus the log likelihood itself.
    pub fn gradient(&self, seq: &LabeledSequence) -> Result<(ChainGradient, f64)> {
        seq.validate_for(self.num_labels, self.input_dim)?;
        let observations = &seq.observations;
        let labels = &seq.labels;
        let t_len = labels.len();
        let y = self.num_labels;
        let k = self.context;

        let locals = self.local_tables(observations)?;
        let messages = self.forward_backward_with(observations, &locals)?;
        let marginals = self.marginals_from(observations, &locals, &messages)?;
        let mut grad = ChainGradient::zeros(self);

        // Observed score, reusing the cached tables.
        let mut observed_score = 0.0;
        let mut scratch = Vec::with_capacity(4);
        for t in 1..=t_len {
            let gold_state = self.state_for_labels(labels, t);
            observed_score += locals.tables[t - 1][gold_state];
            let prev = if t > 1 {
                Some(self.state_for_labels(labels, t - 1))
            } else {
                None
            };
            observed_score += self.transition_score(t, prev, gold_state, &mut scratch);
        }
        let log_lik = observed_score - messages.log_partition;

        // Transition gradients: observed counts minus expected counts.
        for (b, block) in self.transitions.iter().enumerate() {
            let order = block.dictionary.order();
            for t in 1..=t_len {
                let gold = gram_from_labels(labels, t, order);
                if let Some(i) = block.dictionary.index_of(&gold) {
                    grad.transitions[b][i] += 1.0;
                }
                let needs_edge = order == k + 1 && t > k;
                if !needs_edge {
                    for (s, &p) in marginals.states[t - 1].iter().enumerate() {
                        self.gram_at(t, s, None, order, &mut scratch);
                        if let Some(i) = block.dictionary.index_of(&scratch) {
                            grad.transitions[b][i] -= p;
                        }
                    }
                } else {
                    let edge = &marginals.edges[t - 2];
                    for (pstate, row) in edge.iter().enumerate() {
                        for (s, &p) in row.iter().enumerate() {
                            if p == 0.0 {
                                continue;
                            }
                            self.gram_at(t, s, Some(pstate), order, &mut scratch);
                            if let Some(i) = block.dictionary.index_of(&scratch) {
                                grad.transitions[b][i] -= p;
                            }
                        }
                    }
                }
            }
        }

        // Local factor gradients: per position, the difference between the
        // gold label-gram indicator and the posterior gram marginal is
        // distributed into the SPN.
        for (fi, f) in self.locals.iter().enumerate() {
            let gram_space = y.pow(f.gram_order as u32);
            let mut coeff = vec![0.0; gram_space];
            for t in f.gram_order..=t_len {
                let (window, eval) = locals.evals[fi][t - 1]
                    .as_ref()
                    .expect("local factor evaluated at applicable positions");
                coeff.iter_mut().for_each(|c| *c = 0.0);
                for (s, &p) in marginals.states[t - 1].iter().enumerate() {
                    coeff[s % gram_space] -= p;
                }
                let mut gold = 0usize;
                for j in 0..f.gram_order {
                    gold = gold * y + labels[t - f.gram_order + j];
                }
                coeff[gold] += 1.0;
                f.spn.accumulate_weighted_gradient(
                    eval,
                    window,
                    &coeff,
                    &mut grad.locals[fi],
                    1.0,
                )?;
            }
        }

        Ok((grad, log_lik))
    }

    /// Expanded state holding the gold labels around position `t`.
    fn state_for_labels(&self, labels: &[usize], t: usize) -> usize {
        let r = self.history_len(t);
        let mut s = 0usize;
        for j in 0..r {
            s = s * self.num_labels + labels[t - r + j];
        }
        s
    }

    /// Most probable labeling and its unnormalized log score. Ties break to
    /// the lowest expanded-state index.
    pub fn viterbi(&self, observations: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
        let t_len = observations.len();
        if t_len == 0 {
            return Err(Error::input("empty observation sequence"));
        }
        let locals = self.local_tables(observations)?;
        let y = self.num_labels;
        let k = self.context;
        let mut scratch = Vec::with_capacity(4);

        let mut scores: Vec<Vec<f64>> = Vec::with_capacity(t_len);
        let mut back: Vec<Vec<usize>> = Vec::with_capacity(t_len);
        for t in 1..=t_len {
            let ns = self.state_count(t);
            let mut row = vec![f64::NEG_INFINITY; ns];
            let mut bp = vec![0usize; ns];
            if t == 1 {
                for (s, slot) in row.iter_mut().enumerate() {
                    *slot = self.transition_score(1, None, s, &mut scratch) + locals.tables[0][s];
                }
            } else {
                let grows = self.history_len(t) > self.history_len(t - 1);
                let prev = &scores[t - 2];
                for s in 0..ns {
                    let preds: Vec<usize> = if grows {
                        vec![s / y]
                    } else {
                        let suffix = s / y;
                        (0..y).map(|a| a * y.pow((k - 1) as u32) + suffix).collect()
                    };
                    let mut best = f64::NEG_INFINITY;
                    let mut best_p = preds[0];
                    for &p in &preds {
                        let v = prev[p] + self.transition_score(t, Some(p), s, &mut scratch);
                        if v > best {
                            best = v;
                            best_p = p;
                        }
                    }
                    row[s] = best + locals.tables[t - 1][s];
                    bp[s] = best_p;
                }
            }
            scores.push(row);
            back.push(bp);
        }

        let last = &scores[t_len - 1];
        let mut best_state = 0usize;
        for (s, &v) in last.iter().enumerate() {
            if v > last[best_state] {
                best_state = s;
            }
        }
        let score = last[best_state];
        let mut states = vec![0usize; t_len];
        states[t_len - 1] = best_state;
        for t in (1..t_len).rev() {
            states[t - 1] = back[t][states[t]];
        }
        let labels: Vec<usize> = states.iter().map(|s| s % y).collect();
        Ok((labels, score))
    }

    pub fn param_len(&self) -> usize {
        self.transitions
            .iter()
            .map(|b| b.weights.len())
            .sum::<usize>()
            + self
                .locals
                .iter()
                .map(|f| f.spn.weights.param_len())
                .sum::<usize>()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for block in &self.transitions {
            out.extend_from_slice(&block.weights);
        }
        for f in &self.locals {
            f.spn.weights.write_flat(out);
        }
    }

    pub fn read_params(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.param_len() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                self.param_len(),
                data.len()
            )));
        }
        let mut pos = 0;
        for block in &mut self.transitions {
            let n = block.weights.len();
            block.weights.copy_from_slice(&data[pos..pos + n]);
            pos += n;
        }
        for f in &mut self.locals {
            pos += f.spn.weights.read_flat(&data[pos..]);
        }
        Ok(())
    }
}

struct LocalTables {
    /// `tables[t-1][state]`: summed local log factors.
    tables: Vec<Vec<f64>>,
    /// `evals[factor][t-1]`: window and SPN evaluation where applicable.
    evals: Vec<Vec<Option<(Vec<f64>, SpnEvaluation)>>>,
}

/// Log-domain forward/backward message tables for one sequence. Rows are
/// indexed by expanded state; early positions have shorter histories and
/// correspondingly fewer states.
#[derive(Debug, Clone)]
pub struct ChainMessages {
    pub alpha_trans: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub beta_trans: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    /// `alpha_trans + beta_trans`: the outside value of each local factor.
    pub beta_local: Vec<Vec<f64>>,
    pub log_partition: f64,
    /// Same quantity computed from the backward recursion at `t = 1`.
    pub log_partition_backward: f64,
}

impl ChainMessages {
    /// Forward/backward agreement, as a relative error on the partition.
    pub fn partition_agreement(&self) -> f64 {
        rel_error(self.log_partition_backward, self.log_partition, 1.0)
    }
}

/// Posterior marginals for one sequence.
#[derive(Debug, Clone)]
pub struct ChainMarginals {
    /// Expanded-state posteriors, `states[t-1][state]`; rows sum to one.
    pub states: Vec<Vec<f64>>,
    /// Single-label posteriors `labels[t-1][y]`; rows sum to one.
    pub labels: Vec<Vec<f64>>,
    /// `edges[t-2][prev_state][state]` for positions `t >= 2`; zero for
    /// incompatible pairs.
    pub edges: Vec<Vec<Vec<f64>>>,
}

/// Gradient with the same shape as the chain parameters.
#[derive(Debug, Clone)]
pub struct ChainGradient {
    pub transitions: Vec<Vec<f64>>,
    pub locals: Vec<SpnWeights>,
}

impl ChainGradient {
    pub fn zeros(model: &ChainModel) -> Self {
        ChainGradient {
            transitions: model
                .transitions
                .iter()
                .map(|b| vec![0.0; b.weights.len()])
                .collect(),
            locals: model
                .locals
                .iter()
                .map(|f| SpnWeights::zeros(&f.spn.topology))
                .collect(),
        }
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for block in &self.transitions {
            out.extend_from_slice(block);
        }
        for w in &self.locals {
            w.write_flat(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{chain_brute_force, ExhaustiveBudget};
    use crate::spn::{Semiring, SpnTopology};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_first_order(y: usize, dim: usize, l: usize, i: usize, h: usize) -> ChainModel {
        let t = SpnTopology::new(l, i, h, y, dim, Semiring::SumProduct).unwrap();
        ChainModel::first_order(SpnModel::zeros(t), NGramDictionary::dense(2, y).unwrap()).unwrap()
    }

    fn randomize(model: &mut ChainModel, rng: &mut ChaCha8Rng) {
        let n = model.param_len();
        let params: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.read_params(&params).unwrap();
    }

    fn random_obs(rng: &mut ChaCha8Rng, t: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..t)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn zero_weight_partition_counts_sequences() {
        let model = zero_first_order(2, 2, 1, 2, 2);
        let obs = vec![vec![0.0, 0.0]; 3];
        let messages = model.forward_backward(&obs).unwrap();
        // All factors are constants: Z = (constant)^T * Y^T; with zero SPN
        // weights each local factor is Q = H^I = 4, so log Z = T*(log 4) + log 8.
        let expect = 3.0 * 4f64.ln() + 8f64.ln();
        assert!((messages.log_partition - expect).abs() < 1e-10);
        assert!(messages.partition_agreement() < 1e-12);
    }

    #[test]
    fn local_log_factor_reduces_to_spn() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = zero_first_order(3, 2, 1, 2, 2);
        randomize(&mut model, &mut rng);
        let obs = random_obs(&mut rng, 4, 2);
        for t in 1..=4 {
            let eval = model.locals[0].spn.evaluate(&obs[t - 1]).unwrap();
            for s in 0..3 {
                let v = model.local_log_factor(&obs, t, s).unwrap();
                assert!((v - eval.q_values[s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn local_factor_zero_weights_is_state_constant() {
        let model = zero_first_order(3, 2, 1, 2, 2);
        let obs = vec![vec![0.3, -0.4]; 2];
        let v0 = model.local_log_factor(&obs, 1, 0).unwrap();
        for s in 1..3 {
            assert_eq!(model.local_log_factor(&obs, 1, s).unwrap(), v0);
        }
    }

    #[test]
    fn wide_window_pads_at_the_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = 2usize;
        let dim = 2usize;
        let spn_t = SpnTopology::new(1, 2, 2, y, 3 * dim, Semiring::SumProduct).unwrap();
        let mut spn = SpnModel::zeros(spn_t);
        for w in &mut spn.weights.leaf_feature_weights {
            *w = rng.random_range(-1.0..1.0);
        }
        let model = ChainModel::new(
            y,
            dim,
            vec![],
            vec![LocalFactor {
                window_width: 3,
                gram_order: 1,
                spn: spn.clone(),
            }],
        )
        .unwrap();
        let obs = random_obs(&mut rng, 2, dim);
        // At t=1 the window is [0-pad, x1, x2].
        let mut padded = vec![0.0; dim];
        padded.extend_from_slice(&obs[0]);
        padded.extend_from_slice(&obs[1]);
        let expect = spn.evaluate(&padded).unwrap();
        for s in 0..y {
            let v = model.local_log_factor(&obs, 1, s).unwrap();
            assert!((v - expect.q_values[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_matches_enumeration_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let y = rng.random_range(2..=4);
            let t_len = rng.random_range(1..=5);
            let dim = rng.random_range(1..=3);
            let mut model = zero_first_order(y, dim, 1, 2, 2);
            randomize(&mut model, &mut rng);
            let obs = random_obs(&mut rng, t_len, dim);
            let messages = model.forward_backward(&obs).unwrap();
            let oracle = chain_brute_force(&model, &obs, &ExhaustiveBudget::default()).unwrap();
            let err = (messages.log_partition - oracle.log_partition).abs();
            assert!(err < 1e-10, "trial {trial}: log Z error {err}");
            assert!(messages.partition_agreement() < 1e-9);
        }
    }

    #[test]
    fn zero_weight_log_likelihood_is_uniform() {
        let model = zero_first_order(3, 2, 1, 2, 2);
        let seq = LabeledSequence::new(vec![vec![0.1, 0.2]; 4], vec![0, 1, 2, 0]).unwrap();
        let ll = model.sequence_log_likelihood(&seq).unwrap();
        assert!((ll - 4.0 * (1f64 / 3.0).ln()).abs() < 1e-10);
    }

    #[test]
    fn single_position_likelihood_is_spn_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = zero_first_order(3, 2, 1, 2, 2);
        randomize(&mut model, &mut rng);
        // Zero the transition weights so only the SPN matters.
        for w in &mut model.transitions[0].weights {
            *w = 0.0;
        }
        let obs = random_obs(&mut rng, 1, 2);
        let eval = model.locals[0].spn.evaluate(&obs[0]).unwrap();
        let post = crate::spn::posterior(&eval).unwrap();
        for label in 0..3 {
            let seq = LabeledSequence::new(obs.clone(), vec![label]).unwrap();
            let ll = model.sequence_log_likelihood(&seq).unwrap();
            assert!((ll - post[label].ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn marginal_rows_sum_to_one_and_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = zero_first_order(3, 2, 1, 2, 2);
        randomize(&mut model, &mut rng);
        let obs = random_obs(&mut rng, 4, 2);
        let marginals = model.posterior_marginals(&obs).unwrap();
        for row in &marginals.labels {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        // Exhaustive reference from all-sequence scores.
        let oracle = chain_brute_force(&model, &obs, &ExhaustiveBudget::default()).unwrap();
        let mut expect = vec![vec![0.0; 3]; 4];
        for (seq, score) in oracle.sequences.iter().zip(&oracle.scores) {
            let p = (score - oracle.log_partition).exp();
            for (t, &label) in seq.iter().enumerate() {
                expect[t][label] += p;
            }
        }
        for t in 0..4 {
            for label in 0..3 {
                assert!((marginals.labels[t][label] - expect[t][label]).abs() < 1e-9);
            }
        }
        // Edge marginals marginalize to node marginals.
        for t in 2..=4 {
            let edge = &marginals.edges[t - 2];
            for s in 0..3 {
                let col: f64 = edge.iter().map(|row| row[s]).sum();
                assert!((col - marginals.states[t - 1][s]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_position_marginals_equal_spn_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut model = zero_first_order(3, 2, 1, 2, 2);
        randomize(&mut model, &mut rng);
        for w in &mut model.transitions[0].weights {
            *w = 0.0;
        }
        let obs = random_obs(&mut rng, 1, 2);
        let marginals = model.posterior_marginals(&obs).unwrap();
        let eval = model.locals[0].spn.evaluate(&obs[0]).unwrap();
        let post = crate::spn::posterior(&eval).unwrap();
        for (a, b) in marginals.labels[0].iter().zip(&post) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_model_gives_uniform_marginals() {
        let model = zero_first_order(4, 2, 1, 2, 2);
        let obs = vec![vec![0.5, -0.5]; 3];
        let marginals = model.posterior_marginals(&obs).unwrap();
        for row in &marginals.labels {
            for &p in row {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn viterbi_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let y = rng.random_range(2..=4);
            let t_len = rng.random_range(1..=6);
            let mut model = zero_first_order(y, 2, 1, 2, 2);
            randomize(&mut model, &mut rng);
            let obs = random_obs(&mut rng, t_len, 2);
            let (labels, score) = model.viterbi(&obs).unwrap();
            let oracle = chain_brute_force(&model, &obs, &ExhaustiveBudget::default()).unwrap();
            assert_eq!(labels, oracle.argmax);
            let recomputed = model.sequence_score(&obs, &labels).unwrap();
            assert!((score - recomputed).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_decode_to_all_zeros() {
        let model = zero_first_order(3, 2, 1, 2, 2);
        let obs = vec![vec![0.0, 0.0]; 5];
        let (labels, _) = model.viterbi(&obs).unwrap();
        assert_eq!(labels, vec![0; 5]);
    }

    #[test]
    fn dominant_diagonal_transitions_yield_constant_labels() {
        let mut model = zero_first_order(3, 2, 1, 2, 2);
        let dict = model.transitions[0].dictionary.clone();
        for label in 0..3u32 {
            let idx = dict.index_of(&[label, label]).unwrap();
            model.transitions[0].weights[idx] = 25.0;
        }
        let obs = vec![vec![0.2, -0.1]; 5];
        let (labels, _) = model.viterbi(&obs).unwrap();
        assert!(labels.windows(2).all(|w| w[0] == w[1]));
        let oracle = chain_brute_force(&model, &obs, &ExhaustiveBudget::default()).unwrap();
        assert_eq!(labels, oracle.argmax);
    }

    #[test]
    fn unigram_gradient_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = 3usize;
        let spn_t = SpnTopology::new(1, 2, 2, y, 2, Semiring::SumProduct).unwrap();
        let mut model = ChainModel::new(
            y,
            2,
            vec![
                TransitionBlock::zeros(NGramDictionary::dense(1, y).unwrap()),
                TransitionBlock::zeros(NGramDictionary::dense(2, y).unwrap()),
            ],
            vec![LocalFactor {
                window_width: 1,
                gram_order: 1,
                spn: SpnModel::zeros(spn_t),
            }],
        )
        .unwrap();
        randomize(&mut model, &mut rng);
        let seq = LabeledSequence::new(random_obs(&mut rng, 4, 2), vec![2, 0, 1, 1]).unwrap();
        let (grad, ll) = model.gradient(&seq).unwrap();
        assert!(ll <= 0.0);
        let sum: f64 = grad.transitions[0].iter().sum();
        assert!(sum.abs() < 1e-9, "unigram gradient sum {sum}");
    }

    #[test]
    fn higher_order_configuration_matches_first_order_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = 3usize;
        let spn_t = SpnTopology::new(1, 2, 2, y, 2, Semiring::SumProduct).unwrap();
        let spn = SpnModel::random_init(spn_t, &mut rng);
        let dict = NGramDictionary::dense(2, y).unwrap();
        let dedicated = ChainModel::first_order(spn.clone(), dict.clone()).unwrap();
        let explicit = ChainModel::new(
            y,
            2,
            vec![TransitionBlock::zeros(dict)],
            vec![LocalFactor {
                window_width: 1,
                gram_order: 1,
                spn,
            }],
        )
        .unwrap();
        let obs = random_obs(&mut rng, 5, 2);
        let a = dedicated.forward_backward(&obs).unwrap();
        let b = explicit.forward_backward(&obs).unwrap();
        assert_eq!(a.log_partition.to_bits(), b.log_partition.to_bits());
        let (la, sa) = dedicated.viterbi(&obs).unwrap();
        let (lb, sb) = explicit.viterbi(&obs).unwrap();
        assert_eq!(la, lb);
        assert_eq!(sa.to_bits(), sb.to_bits());
    }

    #[test]
    fn first_order_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = zero_first_order(3, 2, 1, 2, 2);
        randomize(&mut model, &mut rng);
        let seq = LabeledSequence::new(random_obs(&mut rng, 4, 2), vec![1, 0, 2, 2]).unwrap();
        let report = crate::train::finite_difference_check(&model, &seq, 1e-5).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn second_order_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = 2usize;
        let dim = 2usize;
        let spn1_t = SpnTopology::new(1, 1, 2, y, dim, Semiring::SumProduct).unwrap();
        let spn2_t = SpnTopology::new(1, 1, 2, y * y, 2 * dim, Semiring::SumProduct).unwrap();
        let mut model = ChainModel::new(
            y,
            dim,
            vec![
                TransitionBlock::zeros(NGramDictionary::dense(2, y).unwrap()),
                TransitionBlock::zeros(NGramDictionary::dense(3, y).unwrap()),
            ],
            vec![
                LocalFactor {
                    window_width: 1,
                    gram_order: 1,
                    spn: SpnModel::zeros(spn1_t),
                },
                LocalFactor {
                    window_width: 2,
                    gram_order: 2,
                    spn: SpnModel::zeros(spn2_t),
                },
            ],
        )
        .unwrap();
        randomize(&mut model, &mut rng);
        assert!(model.param_len() <= 500);
        let seq = LabeledSequence::new(random_obs(&mut rng, 5, dim), vec![0, 1, 1, 0, 1]).unwrap();
        let report = crate::train::finite_difference_check(&model, &seq, 1e-5).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn viterbi_dominates_gold_and_random_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut model = zero_first_order(3, 2, 1, 2, 2);
        randomize(&mut model, &mut rng);
        let gold = vec![0usize, 2, 1, 1, 0];
        let obs = random_obs(&mut rng, 5, 2);
        let (_, score) = model.viterbi(&obs).unwrap();
        assert!(score >= model.sequence_score(&obs, &gold).unwrap());
        for _ in 0..1000 {
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
            assert!(score >= model.sequence_score(&obs, &labels).unwrap() - 1e-12);
        }
    }

    #[test]
    fn empty_sequence_is_input_error() {
        let model = zero_first_order(2, 2, 1, 2, 2);
        assert!(matches!(model.forward_backward(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn second_order_partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let y = rng.random_range(2..=3);
            let t_len = rng.random_range(1..=5);
            let dim = 2usize;
            let spn1_t = SpnTopology::new(1, 2, 2, y, dim, Semiring::SumProduct).unwrap();
            let spn2_t = SpnTopology::new(1, 2, 2, y * y, 2 * dim, Semiring::SumProduct).unwrap();
            let mut model = ChainModel::new(
                y,
                dim,
                vec![
                    TransitionBlock::zeros(NGramDictionary::dense(2, y).unwrap()),
                    TransitionBlock::zeros(NGramDictionary::dense(3, y).unwrap()),
                ],
                vec![
                    LocalFactor {
                        window_width: 1,
                        gram_order: 1,
                        spn: SpnModel::zeros(spn1_t),
                    },
                    LocalFactor {
                        window_width: 2,
                        gram_order: 2,
                        spn: SpnModel::zeros(spn2_t),
                    },
                ],
            )
            .unwrap();
            randomize(&mut model, &mut rng);
            assert_eq!(model.context(), 2);
            let obs = random_obs(&mut rng, t_len, dim);
            let messages = model.forward_backward(&obs).unwrap();
            let oracle = chain_brute_force(&model, &obs, &ExhaustiveBudget::default()).unwrap();
            assert!((messages.log_partition - oracle.log_partition).abs() < 1e-10);
            assert!(messages.partition_agreement() < 1e-9);
            let (labels, _) = model.viterbi(&obs).unwrap();
            assert_eq!(labels, oracle.argmax);
        }
    }
}
