//! Loading the input files into a ready-to-train bundle.

use std::path::Path;

use crate::ehr::{load_ehr, split, CodeVocab, DatasetSplit, PatientRecord};
use crate::error::Result;
use crate::kg::{load_code_map, load_triples, CodeConceptMap, KnowledgeGraph};
use crate::metrics::{load_ddi, DdiMatrix};
use crate::model::{Model, ModelConfig};
use crate::params::derive_seed;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub patients: Vec<PatientRecord>,
    pub vocab: CodeVocab,
    pub kg: KnowledgeGraph,
    pub map: CodeConceptMap,
    pub ddi: Option<DdiMatrix>,
    pub dropped_single_visit: usize,
    pub skipped_ddi_pairs: usize,
}

impl Dataset {
    pub fn load(ehr: &Path, triples: &Path, code_map: &Path, ddi: Option<&Path>) -> Result<Self> {
        let loaded = load_ehr(ehr)?;
        let kg = load_triples(triples)?;
        let map = load_code_map(code_map, &loaded.vocab, &kg)?;
        let (ddi, skipped) = match ddi {
            Some(p) => {
                let (m, s) = load_ddi(p, &loaded.vocab)?;
                (Some(m), s)
            }
            None => (None, 0),
        };
        Ok(Dataset {
            patients: loaded.patients,
            vocab: loaded.vocab,
            kg,
            map,
            ddi,
            dropped_single_visit: loaded.dropped_single_visit,
            skipped_ddi_pairs: skipped,
        })
    }

    pub fn model(&self, config: ModelConfig) -> Result<Model> {
        Model::new(config, self.vocab.clone(), &self.kg, &self.map)
    }

    /// Train/validation/test split seeded from the master seed.
    pub fn split(&self, seed: u64) -> Result<DatasetSplit> {
        split(&self.patients, derive_seed(seed, "split"))
    }
}
