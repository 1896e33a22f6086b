//! Train, eval, predict, and grid-search implementations.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spnseq::data::{self, Dataset, NormalizationStats};
use spnseq::train::{self, TrainConfig};
use spnseq::{
    ChainModel, LabeledSequence, LocalFactor, MemmModel, NGramDictionary, Semiring, SpnModel,
    SpnTopology, TransitionBlock,
};

use crate::config::RunConfig;
use crate::CliError;

/// Serialized model plus the preprocessing needed to reproduce predictions.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: CheckpointModel,
    pub normalization: Option<NormalizationStats>,
    pub label_alphabet: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CheckpointModel {
    SpnCrf { model: ChainModel },
    SpnHoCrf { model: ChainModel },
    SpnMemm { model: MemmModel },
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string(self)
            .map_err(|e| CliError::config(format!("cannot serialize checkpoint: {e}")))?;
        std::fs::write(path, json)
            .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid checkpoint {}: {e}", path.display())))
    }

    fn predict(&self, observations: &[Vec<f64>]) -> Result<Vec<usize>, CliError> {
        match &self.model {
            CheckpointModel::SpnCrf { model } | CheckpointModel::SpnHoCrf { model } => {
                Ok(model.viterbi(observations)?.0)
            }
            CheckpointModel::SpnMemm { model } => Ok(model.decode(observations)?),
        }
    }

    fn set_semiring(&mut self, semiring: Semiring) {
        match &mut self.model {
            CheckpointModel::SpnCrf { model } | CheckpointModel::SpnHoCrf { model } => {
                for factor in &mut model.locals {
                    factor.spn.topology.semiring = semiring;
                }
            }
            CheckpointModel::SpnMemm { model } => {
                model.spn.topology.semiring = semiring;
            }
        }
    }
}

/// Datasets assembled for one run.
struct LoadedData {
    train: Dataset,
    dev: Dataset,
    test: Dataset,
    stats: Option<NormalizationStats>,
}

fn empty_like(other: &Dataset) -> Dataset {
    Dataset {
        sequences: Vec::new(),
        label_alphabet: other.label_alphabet.clone(),
        feature_dim: other.feature_dim,
        normalization_stats: other.normalization_stats.clone(),
    }
}

fn unify_alphabet(datasets: &mut [&mut Dataset]) {
    let count = datasets
        .iter()
        .map(|d| d.label_alphabet.len())
        .max()
        .unwrap_or(0);
    let alphabet: Vec<String> = (0..count).map(|l| l.to_string()).collect();
    for d in datasets {
        if d.label_alphabet.len() < count {
            d.label_alphabet = alphabet.clone();
        }
    }
}

fn load_data(cfg: &RunConfig) -> Result<LoadedData, CliError> {
    let kind = cfg.data.kind.as_deref().unwrap_or("jsonl");
    let (mut train, mut dev, mut test) = match kind {
        "jsonl" => {
            let train_path = cfg
                .data
                .train
                .as_ref()
                .ok_or_else(|| CliError::config("jsonl data requires data.train"))?;
            let mut train = data::load_jsonl(train_path, None)?;
            let mut dev = match &cfg.data.dev {
                Some(p) => data::load_jsonl(p, None)?,
                None => empty_like(&train),
            };
            let mut test = match &cfg.data.test {
                Some(p) => data::load_jsonl(p, None)?,
                None => empty_like(&train),
            };
            unify_alphabet(&mut [&mut train, &mut dev, &mut test]);
            (train, dev, test)
        }
        "ocr" => {
            let path = cfg
                .data
                .ocr_path
                .as_ref()
                .ok_or_else(|| CliError::config("ocr data requires data.ocr_path"))?;
            let (dataset, folds) = data::load_ocr(path)?;
            let test_fold = cfg.data.test_fold.unwrap_or(0);
            let mut held = vec![test_fold];
            let test = dataset.subset(&folds.indices_in(test_fold));
            let dev = match cfg.data.dev_fold {
                Some(f) => {
                    held.push(f);
                    dataset.subset(&folds.indices_in(f))
                }
                None => empty_like(&dataset),
            };
            let train = dataset.subset(&folds.indices_not_in(&held));
            (train, dev, test)
        }
        "synth" => {
            let spec = cfg
                .data
                .synth
                .ok_or_else(|| CliError::config("synth data requires data.synth"))?;
            let full =
                data::synth_task(spec.seed, spec.sequences, spec.len, spec.labels, spec.dim)?;
            let dev_count = cfg.data.synth_dev.unwrap_or(0);
            if dev_count > 0 {
                let (train, dev) = full.split_tail(dev_count)?;
                let test = empty_like(&train);
                (train, dev, test)
            } else {
                let test = empty_like(&full);
                let dev = empty_like(&full);
                (full, dev, test)
            }
        }
        other => return Err(CliError::config(format!("unknown data kind {other:?}"))),
    };

    if train.sequences.is_empty() {
        return Err(CliError::config("training set is empty"));
    }
    let stats = if cfg.data.normalize {
        Some(data::normalize(&mut train, &mut [&mut dev, &mut test])?)
    } else {
        None
    };
    Ok(LoadedData {
        train,
        dev,
        test,
        stats,
    })
}

/// Dataset used by eval/predict: the test selection when configured,
/// otherwise the training selection.
fn load_eval_data(cfg: &RunConfig, checkpoint: &Checkpoint) -> Result<Dataset, CliError> {
    let kind = cfg.data.kind.as_deref().unwrap_or("jsonl");
    let mut dataset = match kind {
        "jsonl" => {
            let path = cfg
                .data
                .test
                .as_ref()
                .or(cfg.data.train.as_ref())
                .ok_or_else(|| CliError::config("jsonl eval requires data.test or data.train"))?;
            data::load_jsonl(path, Some(checkpoint.label_alphabet.len()))?
        }
        "ocr" => {
            let path = cfg
                .data
                .ocr_path
                .as_ref()
                .ok_or_else(|| CliError::config("ocr data requires data.ocr_path"))?;
            let (dataset, folds) = data::load_ocr(path)?;
            let fold = cfg.data.test_fold.unwrap_or(0);
            dataset.subset(&folds.indices_in(fold))
        }
        "synth" => {
            let spec = cfg
                .data
                .synth
                .ok_or_else(|| CliError::config("synth data requires data.synth"))?;
            data::synth_task(spec.seed, spec.sequences, spec.len, spec.labels, spec.dim)?
        }
        other => return Err(CliError::config(format!("unknown data kind {other:?}"))),
    };
    if let Some(stats) = &checkpoint.normalization {
        data::apply_normalization(&mut dataset, stats);
    }
    Ok(dataset)
}

fn build_spn(
    cfg: &RunConfig,
    num_labels: usize,
    input_dim: usize,
    semiring: Semiring,
    rng: &mut ChaCha8Rng,
) -> Result<SpnModel, CliError> {
    let topology = SpnTopology::new(
        cfg.model.layers,
        cfg.model.children,
        cfg.model.states,
        num_labels,
        input_dim,
        semiring,
    )?;
    Ok(SpnModel::random_init(topology, rng))
}

fn transition_blocks(
    cfg: &RunConfig,
    num_labels: usize,
    train_seqs: &[LabeledSequence],
) -> Result<Vec<TransitionBlock>, CliError> {
    cfg.model
        .ngram_orders
        .iter()
        .map(|&order| {
            // Low orders enumerate densely; trigrams stay sparse, keeping
            // only grams observed in the training data.
            let dict = if order <= 2 {
                NGramDictionary::dense(order, num_labels)?
            } else {
                NGramDictionary::from_data(order, train_seqs, true)?
            };
            Ok(TransitionBlock::zeros(dict))
        })
        .collect()
}

enum BuiltModel {
    Chain(ChainModel),
    Memm(MemmModel),
}

fn build_model(
    cfg: &RunConfig,
    num_labels: usize,
    feature_dim: usize,
    train_seqs: &[LabeledSequence],
) -> Result<BuiltModel, CliError> {
    let semiring = match cfg.model.semiring.as_str() {
        "sum" => Semiring::SumProduct,
        "max" => Semiring::MaxProduct,
        other => return Err(CliError::config(format!("unknown semiring {other:?}"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    match cfg.model.kind.as_str() {
        "spn-memm" => {
            let spn = build_spn(
                cfg,
                num_labels,
                cfg.model.window * feature_dim,
                semiring,
                &mut rng,
            )?;
            let model =
                MemmModel::new(cfg.model.order, spn, cfg.model.window, cfg.model.beam_width)?;
            Ok(BuiltModel::Memm(model))
        }
        "spn-crf" | "spn-ho-crf" => {
            let factors: Vec<(usize, usize)> = if cfg.model.kind == "spn-crf" {
                vec![(cfg.model.window, 1)]
            } else {
                cfg.model.factors.clone()
            };
            let locals = factors
                .iter()
                .map(|&(m, n)| {
                    let label_space = num_labels.pow(n as u32);
                    let spn = build_spn(cfg, label_space, m * feature_dim, semiring, &mut rng)?;
                    Ok(LocalFactor {
                        window_width: m,
                        gram_order: n,
                        spn,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let transitions = transition_blocks(cfg, num_labels, train_seqs)?;
            let model = ChainModel::new(num_labels, feature_dim, transitions, locals)?;
            Ok(BuiltModel::Chain(model))
        }
        other => Err(CliError::config(format!("unknown model kind {other:?}"))),
    }
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.train.lr,
        l2: cfg.train.l2,
        epochs: cfg.train.epochs,
        batch_size: 1,
        shuffle_seed: cfg.train.seed,
        eval_every: cfg.train.eval_every,
    }
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    config: &'a RunConfig,
    report: &'a train::TrainReport,
    test_error: Option<f64>,
}

pub fn cmd_train(cfg: &RunConfig, out_model: &Path, out_report: &Path) -> Result<(), CliError> {
    if cfg.model.semiring == "max" {
        return Err(CliError::config(
            "training requires the sum semiring; max-product is decode-only",
        ));
    }
    let loaded = load_data(cfg)?;
    let num_labels = loaded.train.num_labels().max(loaded.dev.num_labels());
    let built = build_model(
        cfg,
        num_labels,
        loaded.train.feature_dim,
        &loaded.train.sequences,
    )?;
    let tc = train_config(cfg);

    let (checkpoint_model, report, test_error) = match built {
        BuiltModel::Chain(model) => {
            let (best, report) =
                train::train(&model, &loaded.train.sequences, &loaded.dev.sequences, &tc)?;
            let test_error = if loaded.test.sequences.is_empty() {
                None
            } else {
                Some(train::label_error_rate(&best, &loaded.test.sequences)?)
            };
            let model_kind = if cfg.model.kind == "spn-ho-crf" {
                CheckpointModel::SpnHoCrf { model: best }
            } else {
                CheckpointModel::SpnCrf { model: best }
            };
            (model_kind, report, test_error)
        }
        BuiltModel::Memm(model) => {
            let (best, report) =
                train::train(&model, &loaded.train.sequences, &loaded.dev.sequences, &tc)?;
            let test_error = if loaded.test.sequences.is_empty() {
                None
            } else {
                Some(train::label_error_rate(&best, &loaded.test.sequences)?)
            };
            (CheckpointModel::SpnMemm { model: best }, report, test_error)
        }
    };

    let checkpoint = Checkpoint {
        model: checkpoint_model,
        normalization: loaded.stats,
        label_alphabet: loaded.train.label_alphabet.clone(),
    };
    checkpoint.save(out_model)?;

    let output = TrainOutput {
        config: cfg,
        report: &report,
        test_error,
    };
    let json = serde_json::to_string_pretty(&output)
        .map_err(|e| CliError::config(format!("cannot serialize report: {e}")))?;
    std::fs::write(out_report, json)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", out_report.display())))?;

    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs; final objective {:.4}{}",
        cfg.model.kind,
        report.epochs.len(),
        last.objective,
        match report.best_dev_error {
            Some(err) => format!("; best dev error {err:.4} at epoch {}", report.best_epoch),
            None => String::new(),
        }
    );
    if let Some(err) = test_error {
        println!("test error rate {err:.4}");
    }
    Ok(())
}

#[derive(Serialize)]
struct SequenceEval {
    index: usize,
    length: usize,
    errors: usize,
    error_rate: f64,
}

#[derive(Serialize)]
struct EvalOutput {
    error_rate: f64,
    total_labels: usize,
    total_errors: usize,
    sequences: Vec<SequenceEval>,
}

fn decode_all(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    jobs: usize,
) -> Result<Vec<Vec<usize>>, CliError> {
    if jobs <= 1 {
        return dataset
            .sequences
            .iter()
            .map(|seq| checkpoint.predict(&seq.observations))
            .collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::config(format!("cannot build thread pool: {e}")))?;
    pool.install(|| {
        use rayon::prelude::*;
        dataset
            .sequences
            .par_iter()
            .map(|seq| checkpoint.predict(&seq.observations))
            .collect()
    })
}

fn parse_semiring(name: &str) -> Result<Semiring, CliError> {
    match name {
        "sum" => Ok(Semiring::SumProduct),
        "max" => Ok(Semiring::MaxProduct),
        other => Err(CliError::config(format!("unknown semiring {other:?}"))),
    }
}

pub fn cmd_eval(
    cfg: &RunConfig,
    model_file: &Path,
    out_report: Option<&Path>,
    jobs: usize,
    semiring_override: Option<&str>,
) -> Result<(), CliError> {
    let mut checkpoint = Checkpoint::load(model_file)?;
    if let Some(name) = semiring_override {
        checkpoint.set_semiring(parse_semiring(name)?);
    }
    let dataset = load_eval_data(cfg, &checkpoint)?;
    if dataset.sequences.is_empty() {
        return Err(CliError::config("evaluation set is empty"));
    }
    let predictions = decode_all(&checkpoint, &dataset, jobs)?;

    let mut sequences = Vec::with_capacity(dataset.sequences.len());
    let mut total_errors = 0usize;
    let mut total_labels = 0usize;
    for (index, (seq, pred)) in dataset.sequences.iter().zip(&predictions).enumerate() {
        let errors = seq.labels.iter().zip(pred).filter(|(a, b)| a != b).count();
        total_errors += errors;
        total_labels += seq.len();
        sequences.push(SequenceEval {
            index,
            length: seq.len(),
            errors,
            error_rate: errors as f64 / seq.len() as f64,
        });
    }
    let output = EvalOutput {
        error_rate: total_errors as f64 / total_labels as f64,
        total_labels,
        total_errors,
        sequences,
    };
    println!(
        "error rate {:.6} ({} wrong of {} labels over {} sequences)",
        output.error_rate,
        output.total_errors,
        output.total_labels,
        dataset.sequences.len()
    );
    if let Some(path) = out_report {
        let json = serde_json::to_string_pretty(&output)
            .map_err(|e| CliError::config(format!("cannot serialize report: {e}")))?;
        std::fs::write(path, json)
            .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn cmd_predict(
    cfg: &RunConfig,
    model_file: &Path,
    out: Option<&Path>,
    marginals_out: Option<&Path>,
    jobs: usize,
    semiring_override: Option<&str>,
) -> Result<(), CliError> {
    let mut checkpoint = Checkpoint::load(model_file)?;
    if let Some(name) = semiring_override {
        checkpoint.set_semiring(parse_semiring(name)?);
    }
    let dataset = load_eval_data(cfg, &checkpoint)?;
    let predictions = decode_all(&checkpoint, &dataset, jobs)?;
    let mut lines = String::new();
    for pred in &predictions {
        let line: Vec<String> = pred.iter().map(|l| l.to_string()).collect();
        lines.push_str(&line.join(" "));
        lines.push('\n');
    }
    match out {
        Some(path) => std::fs::write(path, lines)
            .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{lines}"),
    }

    if let Some(path) = marginals_out {
        let chain = match &checkpoint.model {
            CheckpointModel::SpnCrf { model } | CheckpointModel::SpnHoCrf { model } => model,
            CheckpointModel::SpnMemm { .. } => {
                return Err(CliError::config(
                    "posterior marginals are only defined for chain models",
                ))
            }
        };
        let mut text = String::new();
        for (index, seq) in dataset.sequences.iter().enumerate() {
            let marginals = chain.posterior_marginals(&seq.observations)?;
            let record = serde_json::json!({
                "index": index,
                "marginals": marginals.labels,
            });
            text.push_str(&record.to_string());
            text.push('\n');
        }
        std::fs::write(path, text)
            .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn cmd_grid_search(
    cfg: &RunConfig,
    lrs: &[f64],
    l2s: &[f64],
    out_report: &Path,
) -> Result<(), CliError> {
    if cfg.model.semiring == "max" {
        return Err(CliError::config(
            "training requires the sum semiring; max-product is decode-only",
        ));
    }
    let loaded = load_data(cfg)?;
    if loaded.dev.sequences.is_empty() {
        return Err(CliError::config("grid search requires a development set"));
    }
    let num_labels = loaded.train.num_labels().max(loaded.dev.num_labels());
    let built = build_model(
        cfg,
        num_labels,
        loaded.train.feature_dim,
        &loaded.train.sequences,
    )?;
    let tc = train_config(cfg);
    let report = match built {
        BuiltModel::Chain(model) => train::grid_search(
            &model,
            &loaded.train.sequences,
            &loaded.dev.sequences,
            lrs,
            l2s,
            &tc,
        )?,
        BuiltModel::Memm(model) => train::grid_search(
            &model,
            &loaded.train.sequences,
            &loaded.dev.sequences,
            lrs,
            l2s,
            &tc,
        )?,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::config(format!("cannot serialize report: {e}")))?;
    std::fs::write(out_report, json)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", out_report.display())))?;
    println!(
        "best grid point: lr {:.0e}, l2 {:.0e} ({} runs)",
        report.best_learning_rate,
        report.best_l2,
        report.runs.len()
    );
    Ok(())
}
