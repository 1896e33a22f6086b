//! Dataset ingestion, feature normalization, folds, and a synthetic task
//! generator for desk-scale experiments.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::LabeledSequence;

/// Per-dimension normalization statistics, computed on training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    /// Floored at `1e-8` so constant dimensions map to zero.
    pub std: Vec<f64>,
}

/// A set of labeled sequences sharing one feature space and label alphabet.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<LabeledSequence>,
    pub label_alphabet: Vec<String>,
    pub feature_dim: usize,
    pub normalization_stats: Option<NormalizationStats>,
}

impl Dataset {
    pub fn num_labels(&self) -> usize {
        self.label_alphabet.len()
    }

    pub fn total_positions(&self) -> usize {
        self.sequences.iter().map(LabeledSequence::len).sum()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            label_alphabet: self.label_alphabet.clone(),
            feature_dim: self.feature_dim,
            normalization_stats: self.normalization_stats.clone(),
        }
    }

    /// Split off the last `count` sequences as a held-out set.
    pub fn split_tail(&self, count: usize) -> Result<(Dataset, Dataset)> {
        if count >= self.sequences.len() {
            return Err(Error::input(format!(
                "cannot hold out {count} of {} sequences",
                self.sequences.len()
            )));
        }
        let cut = self.sequences.len() - count;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.sequences.len()).collect();
        Ok((self.subset(&head), self.subset(&tail)))
    }

    fn validate(&self) -> Result<()> {
        for seq in &self.sequences {
            seq.validate_for(self.num_labels(), self.feature_dim)?;
        }
        Ok(())
    }
}

/// Cross-validation fold assignment, one fold id per sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSpec {
    pub num_folds: usize,
    pub assignment: Vec<usize>,
}

impl FoldSpec {
    pub fn indices_in(&self, fold: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn indices_not_in(&self, folds: &[usize]) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, f)| !folds.contains(f))
            .map(|(i, _)| i)
            .collect()
    }
}

const OCR_PIXELS: usize = 128;

struct OcrRow {
    line: usize,
    letter: usize,
    next_id: i64,
    fold: usize,
    pixels: Vec<f64>,
}

/// Load the tab-separated handwritten-letter corpus: per row an id, the
/// letter, the id of the next letter in the word (or -1), word id, position,
/// fold, and 128 binary pixels. Rows are chained into word sequences via the
/// next-id links; fold ids come from the file.
pub fn load_ocr(path: &Path) -> Result<(Dataset, FoldSpec)> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);

    let mut rows: std::collections::HashMap<i64, OcrRow> = std::collections::HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\t').split('\t').collect();
        if fields.len() != 6 + OCR_PIXELS {
            return Err(Error::parse(
                lineno,
                format!("expected {} fields, found {}", 6 + OCR_PIXELS, fields.len()),
            ));
        }
        let id: i64 = fields[0]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad id {:?}", fields[0])))?;
        let letter = fields[1];
        if letter.len() != 1 || !letter.chars().next().unwrap().is_ascii_lowercase() {
            return Err(Error::parse(lineno, format!("bad letter {letter:?}")));
        }
        let letter = (letter.as_bytes()[0] - b'a') as usize;
        let next_id: i64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad next id {:?}", fields[2])))?;
        let fold: usize = fields[5]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad fold {:?}", fields[5])))?;
        let mut pixels = Vec::with_capacity(OCR_PIXELS);
        for f in &fields[6..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad pixel value {f:?}")))?;
            pixels.push(v);
        }
        if rows
            .insert(
                id,
                OcrRow {
                    line: lineno,
                    letter,
                    next_id,
                    fold,
                    pixels,
                },
            )
            .is_some()
        {
            return Err(Error::parse(lineno, format!("duplicate row id {id}")));
        }
    }

    // Word starts are the ids no row points to.
    let referenced: std::collections::HashSet<i64> = rows
        .values()
        .filter(|r| r.next_id >= 0)
        .map(|r| r.next_id)
        .collect();
    let mut starts: Vec<i64> = rows
        .keys()
        .copied()
        .filter(|id| !referenced.contains(id))
        .collect();
    starts.sort_unstable();

    let mut sequences = Vec::with_capacity(starts.len());
    let mut folds = Vec::with_capacity(starts.len());
    let mut consumed = 0usize;
    for start in starts {
        let mut labels = Vec::new();
        let mut observations = Vec::new();
        let mut cursor = start;
        let mut fold = None;
        loop {
            let row = rows
                .get(&cursor)
                .ok_or_else(|| Error::parse(0, format!("broken chain: row id {cursor} missing")))?;
            labels.push(row.letter);
            observations.push(row.pixels.clone());
            fold.get_or_insert(row.fold);
            consumed += 1;
            if row.next_id < 0 {
                break;
            }
            let next = row.next_id;
            if !rows.contains_key(&next) {
                return Err(Error::parse(
                    row.line,
                    format!("broken chain: next id {next} missing"),
                ));
            }
            cursor = next;
        }
        sequences.push(LabeledSequence::new(observations, labels)?);
        folds.push(fold.unwrap());
    }
    if consumed != rows.len() {
        return Err(Error::parse(
            0,
            format!(
                "word chains cover {consumed} of {} rows (cycle or shared suffix)",
                rows.len()
            ),
        ));
    }

    let num_folds = folds.iter().copied().max().map_or(1, |m| m + 1);
    let dataset = Dataset {
        sequences,
        label_alphabet: (b'a'..=b'z').map(|c| (c as char).to_string()).collect(),
        feature_dim: OCR_PIXELS,
        normalization_stats: None,
    };
    dataset.validate()?;
    Ok((
        dataset,
        FoldSpec {
            num_folds,
            assignment: folds,
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    labels: Vec<usize>,
    features: Vec<Vec<f64>>,
}

/// Load a JSON-lines dataset: one `{"labels": [...], "features": [[...]]}`
/// object per line. When `num_labels` is given, labels are range-checked
/// against it; otherwise the alphabet is inferred.
pub fn load_jsonl(path: &Path, num_labels: Option<usize>) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut sequences = Vec::new();
    let mut feature_dim: Option<usize> = None;
    let mut max_label = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        if record.labels.len() != record.features.len() || record.labels.is_empty() {
            return Err(Error::parse(
                lineno,
                format!(
                    "{} labels but {} feature rows",
                    record.labels.len(),
                    record.features.len()
                ),
            ));
        }
        let dim = record.features[0].len();
        if record.features.iter().any(|f| f.len() != dim) {
            return Err(Error::parse(lineno, "ragged feature rows"));
        }
        match feature_dim {
            None => feature_dim = Some(dim),
            Some(d) if d != dim => {
                return Err(Error::parse(
                    lineno,
                    format!("feature dim {dim} differs from earlier records ({d})"),
                ))
            }
            _ => {}
        }
        if let Some(limit) = num_labels {
            if let Some(&bad) = record.labels.iter().find(|&&l| l >= limit) {
                return Err(Error::parse(
                    lineno,
                    format!("label {bad} out of range (num_labels = {limit})"),
                ));
            }
        }
        max_label = max_label.max(record.labels.iter().copied().max().unwrap_or(0));
        sequences.push(LabeledSequence::new(record.features, record.labels)?);
    }
    let alphabet_size = num_labels.unwrap_or(if sequences.is_empty() {
        0
    } else {
        max_label + 1
    });
    Ok(Dataset {
        sequences,
        label_alphabet: (0..alphabet_size).map(|l| l.to_string()).collect(),
        feature_dim: feature_dim.unwrap_or(0),
        normalization_stats: None,
    })
}

pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut file = File::create(path)?;
    for seq in &dataset.sequences {
        let record = JsonlRecord {
            labels: seq.labels.clone(),
            features: seq.observations.clone(),
        };
        writeln!(file, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(())
}

/// Compute per-dimension statistics on the training set and normalize every
/// dataset with them: `(x - mean) / max(std, 1e-8)`.
pub fn normalize(train: &mut Dataset, others: &mut [&mut Dataset]) -> Result<NormalizationStats> {
    let dim = train.feature_dim;
    let n = train.total_positions();
    if n == 0 {
        return Err(Error::input("cannot normalize an empty dataset"));
    }
    let mut mean = vec![0.0; dim];
    for seq in &train.sequences {
        for obs in &seq.observations {
            for (m, &v) in mean.iter_mut().zip(obs) {
                *m += v;
            }
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; dim];
    for seq in &train.sequences {
        for obs in &seq.observations {
            for ((s, &v), &m) in var.iter_mut().zip(obs).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|s| (s / n as f64).sqrt().max(1e-8))
        .collect();
    let stats = NormalizationStats { mean, std };
    apply_normalization(train, &stats);
    for d in others.iter_mut() {
        if d.feature_dim != dim {
            return Err(Error::input("datasets disagree on feature dimensions"));
        }
        apply_normalization(d, &stats);
    }
    Ok(stats)
}

pub fn apply_normalization(dataset: &mut Dataset, stats: &NormalizationStats) {
    for seq in &mut dataset.sequences {
        for obs in &mut seq.observations {
            for ((v, &m), &s) in obs.iter_mut().zip(&stats.mean).zip(&stats.std) {
                *v = (*v - m) / s;
            }
        }
    }
    dataset.normalization_stats = Some(stats.clone());
}

/// Synthetic sequence-labeling task: labels follow a fixed random Markov
/// chain and observations are label-conditioned isotropic Gaussian clusters.
/// Cluster means sit on a lattice spaced three noise standard deviations
/// apart per dimension, so any two clusters are at least `3*sqrt(dim)` apart.
/// Deterministic for a given seed.
pub fn synth_task(
    seed: u64,
    num_sequences: usize,
    seq_len: usize,
    num_labels: usize,
    feature_dim: usize,
) -> Result<Dataset> {
    if num_sequences == 0 || seq_len == 0 || num_labels == 0 || feature_dim == 0 {
        return Err(Error::input("synth task sizes must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Random row-stochastic transition matrix with mass everywhere.
    let mut transition = vec![vec![0.0f64; num_labels]; num_labels];
    for row in &mut transition {
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = rng.random_range(0.05..1.0);
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    let mut initial = vec![0.0f64; num_labels];
    let mut total = 0.0;
    for v in &mut initial {
        *v = rng.random_range(0.05..1.0);
        total += *v;
    }
    for v in &mut initial {
        *v /= total;
    }

    let mut sequences = Vec::with_capacity(num_sequences);
    for _ in 0..num_sequences {
        let mut labels = Vec::with_capacity(seq_len);
        let mut observations = Vec::with_capacity(seq_len);
        for t in 0..seq_len {
            let dist = if t == 0 {
                &initial
            } else {
                &transition[labels[t - 1]]
            };
            let label = sample_categorical(&mut rng, dist);
            labels.push(label);
            let mean = cluster_mean_coordinate(label);
            observations.push(
                (0..feature_dim)
                    .map(|_| mean + standard_normal(&mut rng))
                    .collect(),
            );
        }
        sequences.push(LabeledSequence::new(observations, labels)?);
    }
    Ok(Dataset {
        sequences,
        label_alphabet: (0..num_labels).map(|l| l.to_string()).collect(),
        feature_dim,
        normalization_stats: None,
    })
}

/// Monte-Carlo estimate of the per-frame Bayes error of the synthetic task's
/// emission model, using the generator's own nearest-mean classifier.
pub fn synth_frame_bayes_error(
    num_labels: usize,
    feature_dim: usize,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = 0usize;
    for _ in 0..samples {
        let label = rng.random_range(0..num_labels);
        let mean = cluster_mean_coordinate(label);
        let x: Vec<f64> = (0..feature_dim)
            .map(|_| mean + standard_normal(&mut rng))
            .collect();
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for y in 0..num_labels {
            let m = cluster_mean_coordinate(y);
            let d: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
            if d < best_d {
                best_d = d;
                best = y;
            }
        }
        if best != label {
            errors += 1;
        }
    }
    errors as f64 / samples as f64
}

fn cluster_mean_coordinate(label: usize) -> f64 {
    3.0 * label as f64
}

fn sample_categorical<R: Rng>(rng: &mut R, dist: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, content.as_bytes()).unwrap();
        f
    }

    fn ocr_row(
        id: i64,
        letter: char,
        next_id: i64,
        word: usize,
        pos: usize,
        fold: usize,
    ) -> String {
        let pixels: Vec<String> = (0..OCR_PIXELS)
            .map(|i| ((i + id as usize) % 2).to_string())
            .collect();
        format!(
            "{id}\t{letter}\t{next_id}\t{word}\t{pos}\t{fold}\t{}",
            pixels.join("\t")
        )
    }

    #[test]
    fn ocr_two_row_chain() {
        let content = format!(
            "{}\n{}\n",
            ocr_row(1, 'a', 2, 1, 1, 3),
            ocr_row(2, 'b', -1, 1, 2, 3)
        );
        let f = write_temp(&content);
        let (dataset, folds) = load_ocr(f.path()).unwrap();
        assert_eq!(dataset.sequences.len(), 1);
        assert_eq!(dataset.sequences[0].labels, vec![0, 1]);
        assert_eq!(dataset.feature_dim, 128);
        assert_eq!(dataset.label_alphabet.len(), 26);
        assert_eq!(folds.assignment, vec![3]);
    }

    #[test]
    fn ocr_malformed_row_reports_line() {
        let content = format!("{}\nnot\ta\tvalid\trow\n", ocr_row(1, 'a', -1, 1, 1, 0));
        let f = write_temp(&content);
        match load_ocr(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ocr_broken_chain_is_parse_error() {
        let content = format!("{}\n", ocr_row(1, 'a', 99, 1, 1, 0));
        let f = write_temp(&content);
        assert!(matches!(load_ocr(f.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn jsonl_empty_file_is_empty_dataset() {
        let f = write_temp("");
        let d = load_jsonl(f.path(), None).unwrap();
        assert!(d.sequences.is_empty());
    }

    #[test]
    fn jsonl_single_unit_sequence() {
        let f = write_temp("{\"labels\": [2], \"features\": [[0.5, 1.5]]}\n");
        let d = load_jsonl(f.path(), None).unwrap();
        assert_eq!(d.sequences.len(), 1);
        assert_eq!(d.sequences[0].len(), 1);
        assert_eq!(d.feature_dim, 2);
        assert_eq!(d.num_labels(), 3);
    }

    #[test]
    fn jsonl_rejects_ragged_and_out_of_range() {
        let f = write_temp("{\"labels\": [0, 1], \"features\": [[0.5], [1.0, 2.0]]}\n");
        assert!(matches!(
            load_jsonl(f.path(), None),
            Err(Error::Parse { .. })
        ));
        let f = write_temp("{\"labels\": [7], \"features\": [[0.5]]}\n");
        assert!(matches!(
            load_jsonl(f.path(), Some(3)),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn jsonl_round_trip_is_identity() {
        let d = synth_task(5, 4, 3, 3, 2).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_jsonl(&d, f.path()).unwrap();
        let back = load_jsonl(f.path(), Some(3)).unwrap();
        assert_eq!(d.sequences, back.sequences);
    }

    #[test]
    fn normalization_zeroes_constant_dims_and_standardizes() {
        let mut train = Dataset {
            sequences: vec![LabeledSequence::new(
                vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![5.0, 5.0]],
                vec![0, 1, 0],
            )
            .unwrap()],
            label_alphabet: vec!["0".into(), "1".into()],
            feature_dim: 2,
            normalization_stats: None,
        };
        let mut dev = train.clone();
        dev.sequences[0].observations[0][0] = 100.0;
        let stats = normalize(&mut train, &mut [&mut dev]).unwrap();

        // Train statistics after normalization: mean 0, std 1 per live dim.
        let vals: Vec<f64> = train.sequences[0]
            .observations
            .iter()
            .map(|o| o[0])
            .collect();
        let mean: f64 = vals.iter().sum::<f64>() / 3.0;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((std - 1.0).abs() < 1e-10);

        // Constant dimension floors to zero.
        assert!(train.sequences[0].observations.iter().all(|o| o[1] == 0.0));

        // Dev is normalized with train statistics, not its own.
        assert!(
            (dev.sequences[0].observations[0][0] - (100.0 - stats.mean[0]) / stats.std[0]).abs()
                < 1e-12
        );

        // Re-deriving stats from the normalized train data gives the
        // identity transform.
        let mut again = train.clone();
        let stats2 = normalize(&mut again, &mut []).unwrap();
        assert!(stats2.mean.iter().all(|m| m.abs() < 1e-10));
        assert!((stats2.std[0] - 1.0).abs() < 1e-10);
        for (a, b) in again.sequences[0]
            .observations
            .iter()
            .zip(&train.sequences[0].observations)
        {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_task(42, 10, 5, 3, 4).unwrap();
        let b = synth_task(42, 10, 5, 3, 4).unwrap();
        assert_eq!(a.sequences, b.sequences);
        let c = synth_task(43, 10, 5, 3, 4).unwrap();
        assert_ne!(a.sequences, c.sequences);
    }

    #[test]
    fn synth_single_label_is_all_zeros() {
        let d = synth_task(1, 5, 4, 1, 2).unwrap();
        for seq in &d.sequences {
            assert!(seq.labels.iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn synth_bayes_error_is_small() {
        // Two well-separated clusters in two dimensions.
        let err = synth_frame_bayes_error(2, 2, 20_000, 0);
        assert!(err < 0.02, "frame Bayes error {err}");
        // The acceptance-scale configuration is near-separable.
        let err = synth_frame_bayes_error(4, 8, 20_000, 0);
        assert!(err < 0.02, "frame Bayes error {err}");
    }
}
