//! Conditional-likelihood SGD with L2 regularization, grid search, and a
//! finite-difference gradient harness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::math::rel_error;
use crate::memm::MemmModel;
use crate::sequence::LabeledSequence;

/// A conditionally trained sequence labeler: exposes its parameters as one
/// flat vector in a canonical order, the per-sequence conditional log
/// likelihood with its gradient, and a decoder.
pub trait SequenceModel: Clone {
    fn param_len(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    fn log_likelihood(&self, seq: &LabeledSequence) -> Result<f64>;
    fn log_likelihood_grad(&self, seq: &LabeledSequence) -> Result<(f64, Vec<f64>)>;
    fn predict(&self, observations: &[Vec<f64>]) -> Result<Vec<usize>>;
}

impl SequenceModel for ChainModel {
    fn param_len(&self) -> usize {
        ChainModel::param_len(self)
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(ChainModel::param_len(self));
        self.write_params(&mut out);
        out
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.read_params(params)
    }

    fn log_likelihood(&self, seq: &LabeledSequence) -> Result<f64> {
        self.sequence_log_likelihood(seq)
    }

    fn log_likelihood_grad(&self, seq: &LabeledSequence) -> Result<(f64, Vec<f64>)> {
        let (grad, ll) = self.gradient(seq)?;
        let mut flat = Vec::with_capacity(ChainModel::param_len(self));
        grad.write_flat(&mut flat);
        Ok((ll, flat))
    }

    fn predict(&self, observations: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self.viterbi(observations)?.0)
    }
}

impl SequenceModel for MemmModel {
    fn param_len(&self) -> usize {
        MemmModel::param_len(self)
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(MemmModel::param_len(self));
        self.write_params(&mut out);
        out
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.read_params(params)
    }

    fn log_likelihood(&self, seq: &LabeledSequence) -> Result<f64> {
        self.sequence_log_likelihood(seq)
    }

    fn log_likelihood_grad(&self, seq: &LabeledSequence) -> Result<(f64, Vec<f64>)> {
        let (grad, ll) = self.gradient(seq)?;
        let mut flat = Vec::with_capacity(MemmModel::param_len(self));
        grad.write_flat(&mut flat);
        Ok((ll, flat))
    }

    fn predict(&self, observations: &[Vec<f64>]) -> Result<Vec<usize>> {
        self.decode(observations)
    }
}

/// SGD hyperparameters. Batch size is fixed at one sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Epochs between development-set evaluations.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            l2: 1e-4,
            epochs: 100,
            batch_size: 1,
            shuffle_seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::input("learning rate must be > 0"));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::input("l2 must be >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::input("epochs must be >= 1"));
        }
        if self.batch_size != 1 {
            return Err(Error::input("batch size is fixed at 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::input("eval_every must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Running conditional log likelihood accumulated over the epoch,
    /// evaluated at the weights in effect when each sample was visited.
    pub objective: f64,
    pub dev_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_error: Option<f64>,
}

/// Fraction of wrongly predicted labels over all positions.
pub fn label_error_rate<M: SequenceModel>(model: &M, data: &[LabeledSequence]) -> Result<f64> {
    let mut wrong = 0usize;
    let mut total = 0usize;
    for seq in data {
        let predicted = model.predict(&seq.observations)?;
        wrong += predicted
            .iter()
            .zip(&seq.labels)
            .filter(|(a, b)| a != b)
            .count();
        total += seq.len();
    }
    if total == 0 {
        return Err(Error::input("cannot compute an error rate on empty data"));
    }
    Ok(wrong as f64 / total as f64)
}

/// Stochastic gradient ascent on the L2-regularized conditional likelihood:
/// per sample, `w += lr * (grad - (l2/N) * w)`, so one epoch applies the
/// regularizer once. Samples are reshuffled every epoch with a seeded RNG.
/// Returns the snapshot with the best development error together with the
/// per-epoch report.
pub fn train<M: SequenceModel>(
    model: &M,
    train_set: &[LabeledSequence],
    dev_set: &[LabeledSequence],
    config: &TrainConfig,
) -> Result<(M, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let n = train_set.len() as f64;
    let mut current = model.clone();
    let mut w = current.params();
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut report = TrainReport {
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_dev_error: None,
    };
    let mut best_params = w.clone();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut objective = 0.0;
        for &i in &order {
            let (ll, grad) = current.log_likelihood_grad(&train_set[i])?;
            if !ll.is_finite() {
                return Err(Error::numeric(format!(
                    "log likelihood diverged at epoch {epoch}"
                )));
            }
            objective += ll;
            let decay = config.l2 / n;
            for ((wj, gj), _) in w.iter_mut().zip(&grad).zip(0..) {
                *wj += config.learning_rate * (gj - decay * *wj);
            }
            current.set_params(&w)?;
        }

        let mut dev_error = None;
        if !dev_set.is_empty() && (epoch % config.eval_every == 0 || epoch == config.epochs) {
            let err = label_error_rate(&current, dev_set)?;
            dev_error = Some(err);
            let better = match report.best_dev_error {
                None => true,
                Some(best) => err < best,
            };
            if better {
                report.best_dev_error = Some(err);
                report.best_epoch = epoch;
                best_params.copy_from_slice(&w);
            }
        }
        report.epochs.push(EpochRecord {
            epoch,
            objective,
            dev_error,
        });
    }

    if report.best_dev_error.is_none() {
        // No development evaluations: keep the final weights.
        report.best_epoch = config.epochs;
        best_params.copy_from_slice(&w);
    }
    let mut best_model = model.clone();
    best_model.set_params(&best_params)?;
    Ok((best_model, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub l2: f64,
    pub dev_error: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchReport {
    pub runs: Vec<GridPoint>,
    pub best_learning_rate: f64,
    pub best_l2: f64,
}

/// Train one model per `(learning_rate, l2)` grid point and return the pair
/// with the lowest development error. Ties keep the earlier grid point.
pub fn grid_search<M: SequenceModel>(
    model: &M,
    train_set: &[LabeledSequence],
    dev_set: &[LabeledSequence],
    learning_rates: &[f64],
    l2_values: &[f64],
    base: &TrainConfig,
) -> Result<GridSearchReport> {
    if learning_rates.is_empty() || l2_values.is_empty() {
        return Err(Error::input("grid must contain at least one point"));
    }
    if dev_set.is_empty() {
        return Err(Error::input("grid search requires a development set"));
    }
    let mut runs = Vec::new();
    let mut best: Option<usize> = None;
    for &lr in learning_rates {
        for &l2 in l2_values {
            let config = TrainConfig {
                learning_rate: lr,
                l2,
                ..base.clone()
            };
            let (_, report) = train(model, train_set, dev_set, &config)?;
            let dev_error = report
                .best_dev_error
                .expect("dev set is non-empty, so dev error is recorded");
            runs.push(GridPoint {
                learning_rate: lr,
                l2,
                dev_error,
                best_epoch: report.best_epoch,
            });
            let i = runs.len() - 1;
            if best.is_none() || dev_error < runs[best.unwrap()].dev_error {
                best = Some(i);
            }
        }
    }
    let b = &runs[best.unwrap()];
    Ok(GridSearchReport {
        best_learning_rate: b.learning_rate,
        best_l2: b.l2,
        runs,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdFailure {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdReport {
    pub param_count: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub failures: Vec<FdFailure>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub const FD_STEP: f64 = 1e-5;
/// Discrepancies below this absolute size never fail the check: they are
/// indistinguishable from double-precision finite-difference noise.
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Normalized discrepancy such that `value <= tolerance` is equivalent to
/// `|analytic - numeric| <= FD_ABS_FLOOR + tolerance * |numeric|`.
pub fn fd_relative_error(analytic: f64, numeric: f64, tolerance: f64) -> f64 {
    rel_error(analytic, numeric, FD_ABS_FLOOR / tolerance)
}

/// Central-difference check of the model's own analytic gradient on one
/// sequence.
pub fn finite_difference_check<M: SequenceModel>(
    model: &M,
    seq: &LabeledSequence,
    tolerance: f64,
) -> Result<FdReport> {
    let (_, analytic) = model.log_likelihood_grad(seq)?;
    compare_gradient(model, seq, &analytic, tolerance, FD_STEP)
}

/// Compare a provided gradient against central finite differences of the
/// log likelihood, component by component.
pub fn compare_gradient<M: SequenceModel>(
    model: &M,
    seq: &LabeledSequence,
    analytic: &[f64],
    tolerance: f64,
    step: f64,
) -> Result<FdReport> {
    let base = model.params();
    if analytic.len() != base.len() {
        return Err(Error::input("gradient length does not match parameters"));
    }
    let mut probe = model.clone();
    let mut w = base.clone();
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    let mut failures = Vec::new();
    for j in 0..base.len() {
        w[j] = base[j] + step;
        probe.set_params(&w)?;
        let up = probe.log_likelihood(seq)?;
        w[j] = base[j] - step;
        probe.set_params(&w)?;
        let down = probe.log_likelihood(seq)?;
        w[j] = base[j];
        let numeric = (up - down) / (2.0 * step);
        let rel = fd_relative_error(analytic[j], numeric, tolerance);
        if rel > max_rel {
            max_rel = rel;
            worst = j;
        }
        if rel > tolerance {
            failures.push(FdFailure {
                index: j,
                analytic: analytic[j],
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(FdReport {
        param_count: base.len(),
        max_rel_error: max_rel,
        worst_index: worst,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_task;
    use crate::ngram::NGramDictionary;
    use crate::spn::{Semiring, SpnModel, SpnTopology};
    use rand::SeedableRng;

    fn toy_chain(y: usize, dim: usize, seed: u64) -> ChainModel {
        let t = SpnTopology::new(1, 2, 2, y, dim, Semiring::SumProduct).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spn = SpnModel::random_init(t, &mut rng);
        ChainModel::first_order(spn, NGramDictionary::dense(2, y).unwrap()).unwrap()
    }

    fn toy_data(seed: u64) -> (Vec<LabeledSequence>, Vec<LabeledSequence>) {
        let data = synth_task(seed, 40, 5, 3, 3).unwrap();
        let (train, dev) = data.split_tail(10).unwrap();
        (train.sequences, dev.sequences)
    }

    #[test]
    fn huge_regularizer_pins_weights_near_zero() {
        let (train_set, dev_set) = toy_data(0);
        let t = SpnTopology::new(1, 2, 2, 3, 3, Semiring::SumProduct).unwrap();
        let model =
            ChainModel::first_order(SpnModel::zeros(t), NGramDictionary::dense(2, 3).unwrap())
                .unwrap();
        let config = TrainConfig {
            learning_rate: 1e-5,
            l2: 1e6,
            epochs: 3,
            eval_every: 10,
            ..TrainConfig::default()
        };
        let (best, report) = train(&model, &train_set, &dev_set, &config).unwrap();
        let max_w = best.params().iter().fold(0.0f64, |acc, w| acc.max(w.abs()));
        assert!(max_w < 1e-3, "largest weight {max_w}");
        // Objective stays near the uniform-model value.
        let positions: usize = train_set.iter().map(|s| s.len()).sum();
        let uniform = positions as f64 * (1f64 / 3.0).ln();
        let last = report.epochs.last().unwrap().objective;
        assert!(
            (last - uniform).abs() / uniform.abs() < 0.05,
            "objective {last} vs uniform {uniform}"
        );
    }

    #[test]
    fn toy_task_becomes_nearly_separable() {
        let (train_set, dev_set) = toy_data(3);
        let model = toy_chain(3, 3, 2);
        let config = TrainConfig {
            learning_rate: 1e-2,
            l2: 1e-4,
            epochs: 50,
            eval_every: 5,
            ..TrainConfig::default()
        };
        let (best, _) = train(&model, &train_set, &dev_set, &config).unwrap();
        let train_err = label_error_rate(&best, &train_set).unwrap();
        assert!(train_err <= 0.01, "training error {train_err}");
    }

    #[test]
    fn objective_is_nondecreasing_with_tiny_rate() {
        let (train_set, _) = toy_data(7);
        let model = toy_chain(3, 3, 4);
        let config = TrainConfig {
            learning_rate: 1e-4,
            l2: 0.0,
            epochs: 5,
            eval_every: 100,
            ..TrainConfig::default()
        };
        let (_, report) = train(&model, &train_set, &[], &config).unwrap();
        for pair in report.epochs.windows(2) {
            assert!(
                pair[1].objective >= pair[0].objective,
                "objective regressed: {} -> {}",
                pair[0].objective,
                pair[1].objective
            );
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (train_set, dev_set) = toy_data(9);
        let model = toy_chain(3, 3, 5);
        let config = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let (_, a) = train(&model, &train_set, &dev_set, &config).unwrap();
        let (_, b) = train(&model, &train_set, &dev_set, &config).unwrap();
        for (ra, rb) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(ra.objective.to_bits(), rb.objective.to_bits());
        }
    }

    #[test]
    fn empty_training_set_is_input_error() {
        let model = toy_chain(3, 3, 6);
        assert!(matches!(
            train(&model, &[], &[], &TrainConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn grid_search_single_point_returns_it() {
        let (train_set, dev_set) = toy_data(11);
        let model = toy_chain(3, 3, 7);
        let config = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let report = grid_search(&model, &train_set, &dev_set, &[1e-2], &[1e-4], &config).unwrap();
        assert_eq!(report.runs.len(), 1);
        assert_eq!(report.best_learning_rate, 1e-2);
        assert_eq!(report.best_l2, 1e-4);
    }

    #[test]
    fn grid_search_never_picks_crippled_regularizer() {
        let (train_set, dev_set) = toy_data(13);
        let model = toy_chain(3, 3, 8);
        let config = TrainConfig {
            epochs: 8,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let report =
            grid_search(&model, &train_set, &dev_set, &[1e-2], &[1e-4, 1e3], &config).unwrap();
        assert_eq!(report.best_l2, 1e-4);
    }

    #[test]
    fn full_grid_enumerates_nine_runs() {
        let (train_set, dev_set) = toy_data(15);
        let model = toy_chain(3, 3, 9);
        let config = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let grid = [1e-2, 1e-3, 1e-4];
        let report = grid_search(&model, &train_set, &dev_set, &grid, &grid, &config).unwrap();
        assert_eq!(report.runs.len(), 9);
    }

    #[test]
    fn fd_check_passes_on_small_models() {
        let (train_set, _) = toy_data(17);
        let zero = {
            let t = SpnTopology::new(1, 2, 2, 3, 3, Semiring::SumProduct).unwrap();
            ChainModel::first_order(SpnModel::zeros(t), NGramDictionary::dense(2, 3).unwrap())
                .unwrap()
        };
        let report = finite_difference_check(&zero, &train_set[0], 1e-5).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);

        let random = toy_chain(3, 3, 10);
        assert!(random.param_len() <= 500);
        let report = finite_difference_check(&random, &train_set[1], 1e-5).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn fd_check_flags_corrupted_gradient() {
        let (train_set, _) = toy_data(19);
        let model = toy_chain(3, 3, 11);
        let (_, mut grad) = model.log_likelihood_grad(&train_set[0]).unwrap();
        // Find a solidly nonzero component and double it.
        let idx = grad
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        grad[idx] *= 2.0;
        let report = compare_gradient(&model, &train_set[0], &grad, 1e-5, FD_STEP).unwrap();
        assert!(!report.passed());
        assert!(report.failures.iter().any(|f| f.index == idx));
    }

    #[test]
    fn update_direction_matches_regularized_objective() {
        // On a 2-sequence dataset, the accumulated per-sample update
        // direction sum(grad_n) - l2 * w equals the finite-difference
        // gradient of F(w) = sum_n log p_n - (l2/2) ||w||^2.
        let data = synth_task(23, 2, 4, 3, 2).unwrap();
        let model = toy_chain(3, 2, 12);
        let l2 = 0.37;
        let w0 = model.params();
        let mut assembled = vec![0.0; w0.len()];
        for seq in &data.sequences {
            let (_, g) = model.log_likelihood_grad(seq).unwrap();
            for (a, b) in assembled.iter_mut().zip(&g) {
                *a += b;
            }
        }
        for (a, w) in assembled.iter_mut().zip(&w0) {
            *a -= l2 * w;
        }

        let mut probe = model.clone();
        let mut w = w0.clone();
        let h = 1e-5;
        for j in 0..w0.len() {
            let objective = |probe: &mut ChainModel, w: &[f64]| -> f64 {
                probe.set_params(w).unwrap();
                let ll: f64 = data
                    .sequences
                    .iter()
                    .map(|s| probe.sequence_log_likelihood(s).unwrap())
                    .sum();
                let norm: f64 = w.iter().map(|v| v * v).sum();
                ll - 0.5 * l2 * norm
            };
            w[j] = w0[j] + h;
            let up = objective(&mut probe, &w);
            w[j] = w0[j] - h;
            let down = objective(&mut probe, &w);
            w[j] = w0[j];
            let numeric = (up - down) / (2.0 * h);
            let rel = fd_relative_error(assembled[j], numeric, 1e-5);
            assert!(rel < 1e-5, "component {j}: rel {rel}");
        }
    }
}
