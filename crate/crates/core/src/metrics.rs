//! Multi-label recommendation metrics and drug-drug interaction rate.
//!
//! Set metrics take sorted, deduplicated id slices.

use std::collections::HashSet;
use std::path::Path;

use crate::ehr::{CodeType, CodeVocab};
use crate::error::{Error, Result};

fn intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `|Y ∩ Ŷ| / |Y ∪ Ŷ|`; 0 when the prediction is empty.
pub fn jaccard(truth: &[usize], predicted: &[usize]) -> f64 {
    let inter = intersection(truth, predicted);
    let union = truth.len() + predicted.len() - inter;
    if union == 0 || predicted.is_empty() {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `2|Y ∩ Ŷ| / (|Y| + |Ŷ|)`; 0 when the prediction is empty.
pub fn f1(truth: &[usize], predicted: &[usize]) -> f64 {
    if predicted.is_empty() || truth.is_empty() {
        return 0.0;
    }
    2.0 * intersection(truth, predicted) as f64 / (truth.len() + predicted.len()) as f64
}

/// Average precision of a score ranking against the positive ids. Labels
/// are ranked by descending score, ties by ascending id. `None` without
/// positives.
pub fn average_precision(scores: &[f64], truth: &[usize]) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let positive: HashSet<usize> = truth.iter().copied().collect();
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &label) in order.iter().enumerate() {
        if positive.contains(&label) {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positive.len() as f64)
}

/// Symmetric adverse-interaction indicator over medication ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DdiMatrix {
    size: usize,
    pairs: HashSet<(usize, usize)>,
}

impl DdiMatrix {
    pub fn new(size: usize) -> Self {
        DdiMatrix {
            size,
            pairs: HashSet::new(),
        }
    }

    /// Records an unordered pair; self-pairs are ignored (zero diagonal).
    pub fn add(&mut self, a: usize, b: usize) -> Result<()> {
        if a >= self.size || b >= self.size {
            return Err(Error::Data(format!("ddi pair ({a}, {b}) out of range")));
        }
        if a != b {
            self.pairs.insert((a.min(b), a.max(b)));
        }
        Ok(())
    }

    pub fn is_adverse(&self, a: usize, b: usize) -> bool {
        self.pairs.contains(&(a.min(b), a.max(b)))
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

/// Loads `med_code \t med_code` lines. Pairs naming medications outside the
/// vocabulary are skipped and counted.
pub fn load_ddi(path: &Path, vocab: &CodeVocab) -> Result<(DdiMatrix, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ddi = DdiMatrix::new(vocab.num(CodeType::Med));
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 2 {
            return Err(Error::parse(path, i + 1, format!("expected 2 columns, got {}", cols.len())));
        }
        match (vocab.id(CodeType::Med, cols[0]), vocab.id(CodeType::Med, cols[1])) {
            (Some(a), Some(b)) => ddi.add(a, b)?,
            _ => skipped += 1,
        }
    }
    Ok((ddi, skipped))
}

/// Adverse fraction of unordered predicted pairs, pooled over visits.
pub fn ddi_rate<'a>(predicted: impl IntoIterator<Item = &'a [usize]>, ddi: &DdiMatrix) -> f64 {
    let (mut adverse, mut total) = (0usize, 0usize);
    for set in predicted {
        for (i, &a) in set.iter().enumerate() {
            for &b in &set[i + 1..] {
                total += 1;
                if ddi.is_adverse(a, b) {
                    adverse += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        adverse as f64 / total as f64
    }
}
