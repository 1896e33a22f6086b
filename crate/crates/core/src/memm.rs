//! Higher-order maximum-entropy Markov model with an SPN local factor.
//!
//! Each position is normalized locally: the label distribution conditions on
//! the previous `M-1` labels through distant-bigram history weights and on a
//! window of observations through the SPN. Decoding is exact for `M = 1`
//! (positions decouple) and uses beam search with history recombination
//! otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::sequence::{stacked_window, LabeledSequence};
use crate::spn::{SpnEvaluation, SpnModel, SpnWeights};

/// History sentinel index: positions before the sequence start select the
/// dedicated start row of the history weights.
fn start_row(num_labels: usize) -> usize {
    num_labels
}

/// Maximum-entropy Markov model of order `M`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemmModel {
    /// Markov order `M >= 1`; the label at `t` conditions on `M-1` previous
    /// labels.
    pub order: usize,
    /// Distant-bigram weights `[distance][history label][current label]`,
    /// flattened; the history axis has `Y + 1` rows, the last being the
    /// start sentinel.
    pub history_weights: Vec<f64>,
    pub spn: SpnModel,
    /// Observations stacked per position (centered window of width `m`).
    pub window_width: usize,
    /// Default beam width for decoding when `M > 1`.
    pub beam_width: usize,
}

/// One decoding hypothesis tracked by beam search.
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    /// Last `M-1` labels ordered by distance (most recent first),
    /// start-padded.
    pub label_history: Vec<u32>,
    pub cumulative_log_prob: f64,
    pub full_prefix: Vec<usize>,
}

impl MemmModel {
    pub fn new(
        order: usize,
        spn: SpnModel,
        window_width: usize,
        beam_width: usize,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::input("MEMM order must be >= 1"));
        }
        if window_width == 0 {
            return Err(Error::input("window width must be >= 1"));
        }
        if beam_width == 0 {
            return Err(Error::input("beam width must be >= 1"));
        }
        let y = spn.topology.num_labels;
        let history_weights = vec![0.0; (order - 1) * (y + 1) * y];
        let model = MemmModel {
            order,
            history_weights,
            spn,
            window_width,
            beam_width,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let y = self.num_labels();
        if self.spn.topology.input_dim != self.window_width * self.input_dim() {
            return Err(Error::input(
                "SPN input dim must equal window_width * feature_dim",
            ));
        }
        if self.history_weights.len() != (self.order - 1) * (y + 1) * y {
            return Err(Error::input("history weight table has the wrong size"));
        }
        if !self.history_weights.iter().all(|w| w.is_finite()) {
            return Err(Error::numeric("non-finite history weight"));
        }
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.spn.topology.num_labels
    }

    /// Per-observation feature dimension (the SPN sees `window_width` of
    /// these stacked).
    pub fn input_dim(&self) -> usize {
        self.spn.topology.input_dim / self.window_width
    }

    fn history_weight(&self, distance: usize, history: usize, label: usize) -> f64 {
        let y = self.num_labels();
        self.history_weights[((distance - 1) * (y + 1) + history) * y + label]
    }

    /// Stacked observation window centered at 1-based position `t`.
    fn window(&self, observations: &[Vec<f64>], t: usize) -> Vec<f64> {
        let start = t as i64 - (self.window_width as i64 - 1).div_euclid(2);
        stacked_window(observations, start, self.window_width, self.input_dim())
    }

    /// History of position `t` taken from a label prefix: entry `m-1` holds
    /// the label at distance `m`, with the start sentinel before position 1.
    fn history_from_labels(&self, labels: &[usize], t: usize) -> Vec<u32> {
        (1..self.order)
            .map(|m| {
                if t > m {
                    labels[t - m - 1] as u32
                } else {
                    START_SENTINEL
                }
            })
            .collect()
    }

    fn history_row(&self, entry: u32) -> usize {
        if entry == START_SENTINEL {
            start_row(self.num_labels())
        } else {
            entry as usize
        }
    }

    /// Unnormalized per-label log scores at `t` given a history.
    fn local_logits(&self, q_values: &[f64], history: &[u32]) -> Vec<f64> {
        let y = self.num_labels();
        (0..y)
            .map(|label| {
                let mut v = q_values[label];
                for (m, &g) in history.iter().enumerate() {
                    v += self.history_weight(m + 1, self.history_row(g), label);
                }
                v
            })
            .collect()
    }

    /// Locally normalized label distribution at position `t`.
    pub fn local_posterior(
        &self,
        observations: &[Vec<f64>],
        t: usize,
        history: &[u32],
    ) -> Result<Vec<f64>> {
        if t == 0 || t > observations.len() {
            return Err(Error::input(format!("position {t} out of range")));
        }
        if history.len() != self.order - 1 {
            return Err(Error::input(format!(
                "history must have M-1 = {} entries",
                self.order - 1
            )));
        }
        let eval = self.spn.evaluate(&self.window(observations, t))?;
        let logits = self.local_logits(&eval.q_values, history);
        let z = log_sum_exp(&logits);
        Ok(logits.iter().map(|v| (v - z).exp()).collect())
    }

    /// Teacher-forced conditional log likelihood over raw slices.
    pub fn sequence_log_likelihood_obs(
        &self,
        observations: &[Vec<f64>],
        labels: &[usize],
    ) -> Result<f64> {
        if observations.len() != labels.len() || labels.is_empty() {
            return Err(Error::input(
                "labels must match observations and be non-empty",
            ));
        }
        let mut total = 0.0;
        for t in 1..=labels.len() {
            let history = self.history_from_labels(labels, t);
            let eval = self.spn.evaluate(&self.window(observations, t))?;
            let logits = self.local_logits(&eval.q_values, &history);
            total += logits[labels[t - 1]] - log_sum_exp(&logits);
        }
        Ok(total)
    }

    pub fn sequence_log_likelihood(&self, seq: &LabeledSequence) -> Result<f64> {
        seq.validate_for(self.num_labels(), self.input_dim())?;
        self.sequence_log_likelihood_obs(&seq.observations, &seq.labels)
    }

    /// Per-position multiclass logistic gradient with gold histories, routed
    /// into the history weights and the SPN.
    pub fn gradient(&self, seq: &LabeledSequence) -> Result<(MemmGradient, f64)> {
        seq.validate_for(self.num_labels(), self.input_dim())?;
        let labels = &seq.labels;
        let y = self.num_labels();
        let mut grad = MemmGradient::zeros(self);
        let mut total = 0.0;
        for t in 1..=labels.len() {
            let history = self.history_from_labels(labels, t);
            let window = self.window(&seq.observations, t);
            let eval: SpnEvaluation = self.spn.evaluate(&window)?;
            let logits = self.local_logits(&eval.q_values, &history);
            let z = log_sum_exp(&logits);
            total += logits[labels[t - 1]] - z;

            let mut coeff: Vec<f64> = logits.iter().map(|v| -((v - z).exp())).collect();
            coeff[labels[t - 1]] += 1.0;
            for (m, &g) in history.iter().enumerate() {
                let row = self.history_row(g);
                for (label, &c) in coeff.iter().enumerate() {
                    grad.history_weights[(m * (y + 1) + row) * y + label] += c;
                }
            }
            self.spn
                .accumulate_weighted_gradient(&eval, &window, &coeff, &mut grad.spn, 1.0)?;
        }
        Ok((grad, total))
    }

    /// Exact decoding for first-order models: positions are independent
    /// given the observations. Ties break to the lowest label.
    pub fn decode_viterbi(&self, observations: &[Vec<f64>]) -> Result<Vec<usize>> {
        if self.order != 1 {
            return Err(Error::input(
                "exact per-position decoding requires M = 1; use beam search",
            ));
        }
        if observations.is_empty() {
            return Err(Error::input("empty observation sequence"));
        }
        let mut out = Vec::with_capacity(observations.len());
        for t in 1..=observations.len() {
            let eval = self.spn.evaluate(&self.window(observations, t))?;
            let mut best = 0usize;
            for (label, &q) in eval.q_values.iter().enumerate() {
                if q > eval.q_values[best] {
                    best = label;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Beam search over label prefixes with history recombination: at each
    /// position, hypotheses sharing the same `M-1` history keep only the
    /// best-scoring prefix, then the top `beam_width` survive. Ties break to
    /// the lexicographically smaller prefix.
    pub fn decode_beam(&self, observations: &[Vec<f64>], beam_width: usize) -> Result<Vec<usize>> {
        if beam_width == 0 {
            return Err(Error::input("beam width must be >= 1"));
        }
        if observations.is_empty() {
            return Err(Error::input("empty observation sequence"));
        }
        let y = self.num_labels();
        let mut beam = vec![BeamHypothesis {
            label_history: vec![START_SENTINEL; self.order - 1],
            cumulative_log_prob: 0.0,
            full_prefix: Vec::new(),
        }];

        for t in 1..=observations.len() {
            let eval = self.spn.evaluate(&self.window(observations, t))?;
            let mut candidates: Vec<BeamHypothesis> = Vec::with_capacity(beam.len() * y);
            for hyp in &beam {
                let logits = self.local_logits(&eval.q_values, &hyp.label_history);
                let z = log_sum_exp(&logits);
                for label in 0..y {
                    let mut history = hyp.label_history.clone();
                    if !history.is_empty() {
                        history.rotate_right(1);
                        history[0] = label as u32;
                    }
                    let mut prefix = hyp.full_prefix.clone();
                    prefix.push(label);
                    candidates.push(BeamHypothesis {
                        label_history: history,
                        cumulative_log_prob: hyp.cumulative_log_prob + logits[label] - z,
                        full_prefix: prefix,
                    });
                }
            }
            // Recombine: keep the best prefix per distinct history.
            candidates.sort_by(|a, b| {
                a.label_history
                    .cmp(&b.label_history)
                    .then(
                        b.cumulative_log_prob
                            .partial_cmp(&a.cumulative_log_prob)
                            .unwrap(),
                    )
                    .then(a.full_prefix.cmp(&b.full_prefix))
            });
            candidates.dedup_by(|next, kept| kept.label_history == next.label_history);
            // Keep the top beam_width by score, lexicographic tie-break.
            candidates.sort_by(|a, b| {
                b.cumulative_log_prob
                    .partial_cmp(&a.cumulative_log_prob)
                    .unwrap()
                    .then(a.full_prefix.cmp(&b.full_prefix))
            });
            candidates.truncate(beam_width);
            beam = candidates;
        }
        Ok(beam
            .into_iter()
            .next()
            .expect("beam never empties")
            .full_prefix)
    }

    /// Decode with the model's configured strategy: exact when `M = 1`,
    /// beam search otherwise.
    pub fn decode(&self, observations: &[Vec<f64>]) -> Result<Vec<usize>> {
        if self.order == 1 {
            self.decode_viterbi(observations)
        } else {
            self.decode_beam(observations, self.beam_width)
        }
    }

    pub fn param_len(&self) -> usize {
        self.history_weights.len() + self.spn.weights.param_len()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.history_weights);
        self.spn.weights.write_flat(out);
    }

    pub fn read_params(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.param_len() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                self.param_len(),
                data.len()
            )));
        }
        let n = self.history_weights.len();
        self.history_weights.copy_from_slice(&data[..n]);
        self.spn.weights.read_flat(&data[n..]);
        Ok(())
    }
}

/// Start sentinel used in beam histories.
pub const START_SENTINEL: u32 = u32::MAX;

/// Gradient with the same shape as the MEMM parameters.
#[derive(Debug, Clone)]
pub struct MemmGradient {
    pub history_weights: Vec<f64>,
    pub spn: SpnWeights,
}

impl MemmGradient {
    pub fn zeros(model: &MemmModel) -> Self {
        MemmGradient {
            history_weights: vec![0.0; model.history_weights.len()],
            spn: SpnWeights::zeros(&model.spn.topology),
        }
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.history_weights);
        self.spn.write_flat(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{memm_brute_force, ExhaustiveBudget};
    use crate::spn::{Semiring, SpnTopology};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_model(order: usize, y: usize, dim: usize) -> MemmModel {
        let t = SpnTopology::new(1, 2, 2, y, dim, Semiring::SumProduct).unwrap();
        MemmModel::new(order, SpnModel::zeros(t), 1, 20).unwrap()
    }

    fn randomize(model: &mut MemmModel, rng: &mut ChaCha8Rng) {
        let params: Vec<f64> = (0..model.param_len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        model.read_params(&params).unwrap();
    }

    fn random_obs(rng: &mut ChaCha8Rng, t: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..t)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn zero_weights_give_uniform_posterior() {
        let model = zero_model(3, 4, 2);
        let obs = vec![vec![0.1, 0.2]; 3];
        let p = model
            .local_posterior(&obs, 2, &[0, START_SENTINEL])
            .unwrap();
        for &v in &p {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_order_posterior_is_spn_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = zero_model(1, 3, 2);
        randomize(&mut model, &mut rng);
        let obs = random_obs(&mut rng, 2, 2);
        let p = model.local_posterior(&obs, 1, &[]).unwrap();
        let eval = model.spn.evaluate(&obs[0]).unwrap();
        let expect = crate::spn::posterior(&eval).unwrap();
        for (a, b) in p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_matches_termwise_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = zero_model(3, 3, 2);
        randomize(&mut model, &mut rng);
        let obs = random_obs(&mut rng, 4, 2);
        let history = [1u32, START_SENTINEL];
        let p = model.local_posterior(&obs, 2, &history).unwrap();
        // Recompute each factor by hand.
        let eval = model.spn.evaluate(&obs[1]).unwrap();
        let y = 3usize;
        let unnorm: Vec<f64> = (0..y)
            .map(|label| {
                let mut v = eval.q_values[label];
                v += model.history_weight(1, 1, label);
                v += model.history_weight(2, y, label); // start row
                v.exp()
            })
            .collect();
        let z: f64 = unnorm.iter().sum();
        for (a, b) in p.iter().zip(unnorm.iter().map(|u| u / z)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_likelihood_is_uniform() {
        let model = zero_model(2, 3, 2);
        let seq = LabeledSequence::new(vec![vec![0.0, 0.0]; 5], vec![0, 1, 2, 1, 0]).unwrap();
        let ll = model.sequence_log_likelihood(&seq).unwrap();
        assert!((ll - 5.0 * (1f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_position_likelihood_is_one_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = zero_model(2, 3, 2);
        randomize(&mut model, &mut rng);
        let obs = random_obs(&mut rng, 1, 2);
        let p = model.local_posterior(&obs, 1, &[START_SENTINEL]).unwrap();
        let seq = LabeledSequence::new(obs, vec![2]).unwrap();
        let ll = model.sequence_log_likelihood(&seq).unwrap();
        assert!((ll - p[2].ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_history_gradient_has_closed_form() {
        // With all weights zero the posterior is uniform, so the gradient of
        // w[m][g][y] is sum_t delta(y_{t-m} = g) (delta(y_t = y) - 1/Y).
        let model = zero_model(3, 3, 2);
        let labels = vec![0usize, 2, 1, 2, 2];
        let seq = LabeledSequence::new(vec![vec![0.4, -0.1]; 5], labels.clone()).unwrap();
        let (grad, _) = model.gradient(&seq).unwrap();
        let y = 3usize;
        for m in 1..3usize {
            for g in 0..=y {
                for label in 0..y {
                    let mut expect = 0.0;
                    for (t, &gold) in labels.iter().enumerate() {
                        let t = t + 1;
                        let hist = if t > m { labels[t - m - 1] } else { y };
                        if hist == g {
                            expect += if gold == label { 1.0 - 1.0 / y as f64 } else { -1.0 / y as f64 };
                        }
                    }
                    let got = grad.history_weights[((m - 1) * (y + 1) + g) * y + label];
                    assert!(
                        (got - expect).abs() < 1e-12,
                        "m={m} g={g} y={label}: {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn history_gradient_blocks_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = zero_model(3, 3, 2);
        randomize(&mut model, &mut rng);
        let seq = LabeledSequence::new(random_obs(&mut rng, 5, 2), vec![0, 2, 1, 1, 0]).unwrap();
        let (grad, ll) = model.gradient(&seq).unwrap();
        assert!(ll <= 0.0);
        let y = 3usize;
        for m in 0..2 {
            for row in 0..=y {
                let base = (m * (y + 1) + row) * y;
                let sum: f64 = grad.history_weights[base..base + y].iter().sum();
                assert!(sum.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn viterbi_zero_weights_all_zeros() {
        let model = zero_model(1, 3, 2);
        let obs = vec![vec![0.0, 0.0]; 4];
        assert_eq!(model.decode_viterbi(&obs).unwrap(), vec![0; 4]);
    }

    #[test]
    fn viterbi_equals_per_position_argmax_and_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = zero_model(1, 3, 2);
        randomize(&mut model, &mut rng);
        let obs = random_obs(&mut rng, 5, 2);
        let decoded = model.decode_viterbi(&obs).unwrap();
        for (t, &label) in decoded.iter().enumerate() {
            let p = model.local_posterior(&obs, t + 1, &[]).unwrap();
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(label, argmax);
        }
        let oracle = memm_brute_force(&model, &obs, &ExhaustiveBudget::default()).unwrap();
        assert_eq!(decoded, oracle);
    }

    #[test]
    fn viterbi_requires_first_order() {
        let model = zero_model(2, 3, 2);
        assert!(matches!(
            model.decode_viterbi(&[vec![0.0, 0.0]]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn wide_beam_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..15 {
            let y = rng.random_range(2..=3);
            let m = rng.random_range(1..=3);
            let t_len = rng.random_range(1..=5);
            let topo = SpnTopology::new(1, 2, 2, y, 2, Semiring::SumProduct).unwrap();
            let mut model = MemmModel::new(m, SpnModel::zeros(topo), 1, 20).unwrap();
            randomize(&mut model, &mut rng);
            let obs = random_obs(&mut rng, t_len, 2);
            let width = y.pow((m - 1).min(t_len) as u32);
            let decoded = model.decode_beam(&obs, width).unwrap();
            let oracle = memm_brute_force(&model, &obs, &ExhaustiveBudget::default()).unwrap();
            assert_eq!(decoded, oracle);
        }
    }

    #[test]
    fn beam_width_one_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = zero_model(2, 3, 2);
        randomize(&mut model, &mut rng);
        let obs = random_obs(&mut rng, 5, 2);
        let beam = model.decode_beam(&obs, 1).unwrap();
        // Greedy: pick the argmax at each step given the greedy history.
        let mut greedy = Vec::new();
        for t in 1..=5 {
            let history = model.history_from_labels(&greedy, t);
            let p = model.local_posterior(&obs, t, &history).unwrap();
            let argmax = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            greedy.push(argmax);
        }
        assert_eq!(beam, greedy);
    }

    #[test]
    fn beam_equals_viterbi_for_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = zero_model(1, 3, 2);
        randomize(&mut model, &mut rng);
        let obs = random_obs(&mut rng, 6, 2);
        let exact = model.decode_viterbi(&obs).unwrap();
        for width in [1usize, 2, 5] {
            assert_eq!(model.decode_beam(&obs, width).unwrap(), exact);
        }
    }

    #[test]
    fn beam_score_is_monotone_in_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let mut model = zero_model(3, 3, 2);
            randomize(&mut model, &mut rng);
            let obs = random_obs(&mut rng, 6, 2);
            let mut last = f64::NEG_INFINITY;
            for width in 1..=10 {
                let decoded = model.decode_beam(&obs, width).unwrap();
                let score = model.sequence_log_likelihood_obs(&obs, &decoded).unwrap();
                assert!(
                    score >= last - 1e-12,
                    "beam width {width} lowered the score: {score} < {last}"
                );
                last = score;
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = zero_model(3, 3, 2);
        randomize(&mut model, &mut rng);
        assert!(model.param_len() <= 500);
        let seq = LabeledSequence::new(random_obs(&mut rng, 4, 2), vec![2, 0, 1, 2]).unwrap();
        let report = crate::train::finite_difference_check(&model, &seq, 1e-5).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn invalid_beam_width_is_input_error() {
        let model = zero_model(2, 3, 2);
        assert!(matches!(
            model.decode_beam(&[vec![0.0, 0.0]], 0),
            Err(Error::Input(_))
        ));
    }
}
