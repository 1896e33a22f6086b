//! Labeled sequences and observation-window extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training example: observation vectors `x_{1..T}` with labels
/// `y_{1..T}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub observations: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledSequence {
    pub fn new(observations: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let seq = LabeledSequence {
            observations,
            labels,
        };
        seq.validate_shape()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate_shape(&self) -> Result<()> {
        if self.labels.is_empty() || self.observations.is_empty() {
            return Err(Error::input("sequence must have length >= 1"));
        }
        if self.labels.len() != self.observations.len() {
            return Err(Error::input(format!(
                "{} observations but {} labels",
                self.observations.len(),
                self.labels.len()
            )));
        }
        let dim = self.observations[0].len();
        if self.observations.iter().any(|o| o.len() != dim) {
            return Err(Error::input("observation vectors differ in length"));
        }
        Ok(())
    }

    pub fn validate_for(&self, num_labels: usize, input_dim: usize) -> Result<()> {
        self.validate_shape()?;
        if self.observations[0].len() != input_dim {
            return Err(Error::input(format!(
                "observations have {} dims, model expects {input_dim}",
                self.observations[0].len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= num_labels) {
            return Err(Error::input(format!(
                "label {bad} out of range (Y = {num_labels})"
            )));
        }
        Ok(())
    }
}

/// Stack `width` consecutive observation vectors starting at 1-based
/// position `start` into one flat vector, zero-padding positions outside
/// `[1, T]`.
pub fn stacked_window(
    observations: &[Vec<f64>],
    start: i64,
    width: usize,
    input_dim: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; width * input_dim];
    for k in 0..width {
        let pos = start + k as i64; // 1-based
        if pos >= 1 && pos <= observations.len() as i64 {
            let obs = &observations[(pos - 1) as usize];
            out[k * input_dim..(k + 1) * input_dim].copy_from_slice(obs);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_pads_with_zeros() {
        let obs = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let w = stacked_window(&obs, 0, 3, 2);
        assert_eq!(w, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let w = stacked_window(&obs, 2, 2, 2);
        assert_eq!(w, vec![3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_validation() {
        assert!(LabeledSequence::new(vec![], vec![]).is_err());
        assert!(LabeledSequence::new(vec![vec![1.0]], vec![0, 1]).is_err());
        assert!(LabeledSequence::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0, 1]).is_err());
        let seq = LabeledSequence::new(vec![vec![1.0], vec![2.0]], vec![0, 3]).unwrap();
        assert!(seq.validate_for(2, 1).is_err());
        assert!(seq.validate_for(4, 1).is_ok());
    }
}
