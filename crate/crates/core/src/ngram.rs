//! Sparse label n-gram dictionaries for input-independent chain factors.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::LabeledSequence;

/// Sentinel for positions before the start of a sequence.
pub const START_LABEL: u32 = u32::MAX;

/// Maps label n-grams (over the alphabet extended with the start sentinel)
/// to dense weight indices. Only grams in the dictionary carry learnable
/// weights; the rest share a fixed weight of zero when `include_unseen` is
/// set, or negative infinity (hard exclusion) otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "NGramDictionaryDoc")]
pub struct NGramDictionary {
    order: usize,
    grams: Vec<Vec<u32>>,
    include_unseen: bool,
    #[serde(skip)]
    lookup: HashMap<Vec<u32>, usize>,
}

#[derive(Deserialize)]
struct NGramDictionaryDoc {
    order: usize,
    grams: Vec<Vec<u32>>,
    include_unseen: bool,
}

impl From<NGramDictionaryDoc> for NGramDictionary {
    fn from(doc: NGramDictionaryDoc) -> Self {
        NGramDictionary::from_grams(doc.order, doc.grams, doc.include_unseen)
            .expect("invalid serialized n-gram dictionary")
    }
}

impl NGramDictionary {
    pub fn from_grams(order: usize, grams: Vec<Vec<u32>>, include_unseen: bool) -> Result<Self> {
        if order == 0 {
            return Err(Error::input("n-gram order must be >= 1"));
        }
        let mut lookup = HashMap::with_capacity(grams.len());
        for (i, g) in grams.iter().enumerate() {
            if g.len() != order {
                return Err(Error::input(format!(
                    "gram {g:?} has length {}, dictionary order is {order}",
                    g.len()
                )));
            }
            if lookup.insert(g.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate gram {g:?}")));
            }
        }
        Ok(NGramDictionary {
            order,
            grams,
            include_unseen,
            lookup,
        })
    }

    /// Every realizable gram: a run of start sentinels followed by real
    /// labels, with the final position always a real label.
    pub fn dense(order: usize, num_labels: usize) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::input("num_labels must be >= 1"));
        }
        let mut grams = Vec::new();
        for pad in (0..order).rev() {
            let real = order - pad;
            let count = num_labels.pow(real as u32);
            for mut idx in 0..count {
                let mut gram = vec![START_LABEL; order];
                for j in (0..real).rev() {
                    gram[pad + j] = (idx % num_labels) as u32;
                    idx /= num_labels;
                }
                grams.push(gram);
            }
        }
        // Pure grams (no padding) come first in enumeration order.
        grams.reverse();
        NGramDictionary::from_grams(order, grams, true)
    }

    /// Grams observed in the data at least once, including start-padded
    /// grams at sequence beginnings. Deterministic order.
    pub fn from_data(
        order: usize,
        sequences: &[LabeledSequence],
        include_unseen: bool,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::input("n-gram order must be >= 1"));
        }
        let mut seen = Vec::new();
        let mut set = HashMap::new();
        for seq in sequences {
            for t in 1..=seq.len() {
                let gram = gram_from_labels(&seq.labels, t, order);
                if !set.contains_key(&gram) {
                    set.insert(gram.clone(), ());
                    seen.push(gram);
                }
            }
        }
        seen.sort();
        NGramDictionary::from_grams(order, seen, include_unseen)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn include_unseen(&self) -> bool {
        self.include_unseen
    }

    pub fn index_of(&self, gram: &[u32]) -> Option<usize> {
        self.lookup.get(gram).copied()
    }

    pub fn gram(&self, index: usize) -> &[u32] {
        &self.grams[index]
    }

    /// Log weight contributed by grams outside the dictionary.
    pub fn unseen_log_weight(&self) -> f64 {
        if self.include_unseen {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// The n-gram of labels ending at 1-based position `t`, start-padded.
pub fn gram_from_labels(labels: &[usize], t: usize, order: usize) -> Vec<u32> {
    (0..order)
        .map(|j| {
            let pos = t as i64 - order as i64 + 1 + j as i64;
            if pos < 1 {
                START_LABEL
            } else {
                labels[(pos - 1) as usize] as u32
            }
        })
        .collect()
}
