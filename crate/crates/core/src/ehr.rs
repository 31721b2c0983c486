//! Longitudinal EHR records: loading, vocabularies, splitting, encoding.
//!
//! Input is one JSON object per line:
//!
//! ```text
//! {"id": "p1", "visits": [{"diag": ["401.9"], "proc": [], "med": ["B01A"]}, ...]}
//! ```
//!
//! `proc` may be omitted (datasets without procedure records).

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use indexmap::IndexSet;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeType {
    Diag,
    Proc,
    Med,
}

impl CodeType {
    pub const ALL: [CodeType; 3] = [CodeType::Diag, CodeType::Proc, CodeType::Med];

    pub fn as_str(self) -> &'static str {
        match self {
            CodeType::Diag => "diag",
            CodeType::Proc => "proc",
            CodeType::Med => "med",
        }
    }
}

impl fmt::Display for CodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CodeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" => Ok(CodeType::Diag),
            "proc" => Ok(CodeType::Proc),
            "med" => Ok(CodeType::Med),
            other => Err(Error::Data(format!("unknown code type `{other}`"))),
        }
    }
}

/// Dense ids per code type. The medication PAD id is `num(Med)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeVocab {
    diag: IndexSet<String>,
    proc: IndexSet<String>,
    med: IndexSet<String>,
}

impl CodeVocab {
    fn set(&self, ty: CodeType) -> &IndexSet<String> {
        match ty {
            CodeType::Diag => &self.diag,
            CodeType::Proc => &self.proc,
            CodeType::Med => &self.med,
        }
    }

    fn set_mut(&mut self, ty: CodeType) -> &mut IndexSet<String> {
        match ty {
            CodeType::Diag => &mut self.diag,
            CodeType::Proc => &mut self.proc,
            CodeType::Med => &mut self.med,
        }
    }

    pub fn intern(&mut self, ty: CodeType, code: &str) -> usize {
        self.set_mut(ty).insert_full(code.to_string()).0
    }

    pub fn id(&self, ty: CodeType, code: &str) -> Option<usize> {
        self.set(ty).get_index_of(code)
    }

    pub fn code(&self, ty: CodeType, id: usize) -> Option<&str> {
        self.set(ty).get_index(id).map(String::as_str)
    }

    pub fn num(&self, ty: CodeType) -> usize {
        self.set(ty).len()
    }

    pub fn pad_id(&self) -> usize {
        self.med.len()
    }

    pub fn has_procedures(&self) -> bool {
        !self.proc.is_empty()
    }

    /// Rows of the global code table: diag, proc, med, then PAD.
    pub fn total_codes(&self) -> usize {
        self.diag.len() + self.proc.len() + self.med.len() + 1
    }

    pub fn offset(&self, ty: CodeType) -> usize {
        match ty {
            CodeType::Diag => 0,
            CodeType::Proc => self.diag.len(),
            CodeType::Med => self.diag.len() + self.proc.len(),
        }
    }

    /// Rows of `ty` in the global code table (medications include PAD).
    pub fn table_rows(&self, ty: CodeType) -> usize {
        match ty {
            CodeType::Med => self.med.len() + 1,
            _ => self.num(ty),
        }
    }

    pub fn global_id(&self, ty: CodeType, id: usize) -> usize {
        self.offset(ty) + id
    }

    /// Inverse of [`CodeVocab::global_id`]; PAD maps to `(Med, pad_id)`.
    pub fn split_global(&self, global: usize) -> Option<(CodeType, usize)> {
        CodeType::ALL.into_iter().rev().find_map(|ty| {
            let off = self.offset(ty);
            (global >= off && global < off + self.table_rows(ty)).then(|| (ty, global - off))
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Visit {
    pub diag: Vec<usize>,
    pub proc: Vec<usize>,
    pub med: Vec<usize>,
}

impl Visit {
    /// Sorts and deduplicates each code set.
    pub fn new(mut diag: Vec<usize>, mut proc: Vec<usize>, mut med: Vec<usize>) -> Self {
        for s in [&mut diag, &mut proc, &mut med] {
            s.sort_unstable();
            s.dedup();
        }
        Visit { diag, proc, med }
    }

    pub fn codes(&self, ty: CodeType) -> &[usize] {
        match ty {
            CodeType::Diag => &self.diag,
            CodeType::Proc => &self.proc,
            CodeType::Med => &self.med,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientRecord {
    pub id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn num_visits(&self) -> usize {
        self.visits.len()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVisit {
    diag: Vec<String>,
    #[serde(default)]
    proc: Vec<String>,
    med: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPatient {
    id: String,
    visits: Vec<RawVisit>,
}

#[derive(Debug, Serialize)]
struct RawVisitOut<'a> {
    diag: Vec<&'a str>,
    proc: Vec<&'a str>,
    med: Vec<&'a str>,
}

#[derive(Debug, Serialize)]
struct RawPatientOut<'a> {
    id: &'a str,
    visits: Vec<RawVisitOut<'a>>,
}

#[derive(Clone, Debug)]
pub struct LoadedEhr {
    pub patients: Vec<PatientRecord>,
    pub vocab: CodeVocab,
    /// Patients removed because they had fewer than two visits.
    pub dropped_single_visit: usize,
}

fn read_raw(path: &Path) -> Result<Vec<(usize, RawPatient)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPatient =
            serde_json::from_str(line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        if !seen.insert(raw.id.clone()) {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate patient id `{}`", raw.id),
            ));
        }
        out.push((lineno, raw));
    }
    Ok(out)
}

/// Loads records, interning codes in first-seen order. Patients with fewer
/// than two visits are dropped and counted.
pub fn load_ehr(path: &Path) -> Result<LoadedEhr> {
    let raw = read_raw(path)?;
    let mut vocab = CodeVocab::default();
    let mut patients = Vec::new();
    let mut dropped = 0;
    for (_, p) in raw {
        if p.visits.len() < 2 {
            dropped += 1;
            continue;
        }
        let visits = p
            .visits
            .iter()
            .map(|v| {
                let mut ids = |ty, codes: &[String]| {
                    codes.iter().map(|c| vocab.intern(ty, c)).collect::<Vec<_>>()
                };
                let d = ids(CodeType::Diag, &v.diag);
                let pr = ids(CodeType::Proc, &v.proc);
                let m = ids(CodeType::Med, &v.med);
                Visit::new(d, pr, m)
            })
            .collect();
        patients.push(PatientRecord { id: p.id, visits });
    }
    Ok(LoadedEhr {
        patients,
        vocab,
        dropped_single_visit: dropped,
    })
}

/// Loads records against a fixed vocabulary; unknown codes are errors.
/// Single-visit patients are kept (useful for first-visit prediction).
pub fn load_ehr_with_vocab(path: &Path, vocab: &CodeVocab) -> Result<Vec<PatientRecord>> {
    let raw = read_raw(path)?;
    raw.into_iter()
        .map(|(lineno, p)| {
            let visits = p
                .visits
                .iter()
                .map(|v| {
                    let ids = |ty, codes: &[String]| {
                        codes
                            .iter()
                            .map(|c| {
                                vocab.id(ty, c).ok_or_else(|| {
                                    Error::parse(path, lineno, format!("unknown {ty} code `{c}`"))
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    };
                    Ok(Visit::new(
                        ids(CodeType::Diag, &v.diag)?,
                        ids(CodeType::Proc, &v.proc)?,
                        ids(CodeType::Med, &v.med)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PatientRecord { id: p.id, visits })
        })
        .collect()
}

/// One JSON line for `patient`, the inverse of the loader.
pub fn patient_to_json_line(patient: &PatientRecord, vocab: &CodeVocab) -> String {
    let names = |ty, ids: &[usize]| -> Vec<&str> {
        ids.iter()
            .map(|&i| vocab.code(ty, i).unwrap_or("?"))
            .collect()
    };
    let out = RawPatientOut {
        id: &patient.id,
        visits: patient
            .visits
            .iter()
            .map(|v| RawVisitOut {
                diag: names(CodeType::Diag, &v.diag),
                proc: names(CodeType::Proc, &v.proc),
                med: names(CodeType::Med, &v.med),
            })
            .collect(),
    };
    serde_json::to_string(&out).expect("plain strings serialize")
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<PatientRecord>,
    pub val: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

/// Bucket sizes for a 4:1:1 partition of `n` patients.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let sixth = (n as f64 / 6.0).round() as usize;
    (n - 2 * sixth, sixth, sixth)
}

/// Per-patient 4:1:1 split. Depends only on the patient ids and `seed`, not
/// on input order.
pub fn split(patients: &[PatientRecord], seed: u64) -> Result<DatasetSplit> {
    if patients.len() < 6 {
        return Err(Error::Data(format!(
            "need at least 6 patients to split, got {}",
            patients.len()
        )));
    }
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.sort_by(|&a, &b| patients[a].id.cmp(&patients[b].id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = split_sizes(patients.len());
    let take = |idx: &[usize]| idx.iter().map(|&i| patients[i].clone()).collect();
    Ok(DatasetSplit {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

/// `1 × size` indicator vector of `ids` (set semantics).
pub fn multihot(ids: &[usize], size: usize) -> Result<Tensor> {
    if size == 0 {
        return Err(Error::Data("multihot of size 0".into()));
    }
    let mut v = vec![0.0; size];
    for &i in ids {
        *v.get_mut(i)
            .ok_or_else(|| Error::Data(format!("id {i} out of range for size {size}")))? = 1.0;
    }
    Tensor::new(vec![1, size], v)
}

/// Medication input for visit `t` (1-based): the previous visit's
/// medications, or `{pad}` for the first visit. Never reads visit `t`.
pub fn history_med_input(patient: &PatientRecord, t: usize, pad: usize) -> Result<Vec<usize>> {
    if t == 0 || t > patient.visits.len() {
        return Err(Error::Data(format!(
            "visit {t} out of range 1..={} for patient `{}`",
            patient.visits.len(),
            patient.id
        )));
    }
    if t == 1 {
        Ok(vec![pad])
    } else {
        Ok(patient.visits[t - 2].med.clone())
    }
}
