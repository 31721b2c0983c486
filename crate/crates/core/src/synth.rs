//! Synthetic EHR, concept graph, code mapping and interaction list.
//!
//! Each latent condition owns a diagnosis, procedure and medication cluster
//! and a block of graph concepts. Every code of a condition maps to the
//! condition's anchor concept plus one more of its concepts, so diagnoses
//! reach their medications only through shared concepts. Visit labels are
//! the union of the medication clusters of the visit's conditions, with
//! `noise` controlling random drops and additions.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::CodeType;
use crate::error::{Error, Result};
use crate::params::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub patients: usize,
    pub diag: usize,
    pub proc: usize,
    pub med: usize,
    pub concepts: usize,
    pub relations: usize,
    pub conditions: usize,
    pub avg_visits: f64,
    pub diag_per_visit: usize,
    pub proc_per_visit: usize,
    /// Probability that a visit adds one condition beyond the patient's
    /// chronic ones.
    pub acute_rate: f64,
    /// Probability of dropping each label and of adding a stray code.
    pub noise: f64,
    pub ddi_pairs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            patients: 100,
            diag: 400,
            proc: 80,
            med: 40,
            concepts: 200,
            relations: 8,
            conditions: 8,
            avg_visits: 2.6,
            diag_per_visit: 10,
            proc_per_visit: 4,
            acute_rate: 0.5,
            noise: 0.1,
            ddi_pairs: 40,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let k = self.conditions;
        if k == 0 || self.patients == 0 {
            return bad("conditions and patients must be positive".into());
        }
        if self.diag < k || self.med < k || (self.proc != 0 && self.proc < k) {
            return bad(format!(
                "each of the {k} conditions needs at least one diagnosis and medication (and procedure, if any)"
            ));
        }
        if self.concepts < 2 * k {
            return bad(format!("need at least {} concepts for {k} conditions", 2 * k));
        }
        if self.relations < 2 {
            return bad("need at least 2 relation types".into());
        }
        if !(self.avg_visits >= 2.0 && self.avg_visits.is_finite()) {
            return bad("avg_visits must be at least 2".into());
        }
        if self.diag_per_visit == 0 {
            return bad("diag_per_visit must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.acute_rate) {
            return bad("noise and acute_rate must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Ground-truth structure of one latent condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub diag: Vec<String>,
    pub proc: Vec<String>,
    pub med: Vec<String>,
    /// First entry is the anchor every code of the condition maps to.
    pub concepts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthVisit {
    pub diag: Vec<String>,
    pub proc: Vec<String>,
    pub med: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthPatient {
    pub id: String,
    pub visits: Vec<SynthVisit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub patients: Vec<SynthPatient>,
    pub triples: Vec<(String, String, String)>,
    pub code_map: Vec<(CodeType, String, String)>,
    pub ddi: Vec<(String, String)>,
    pub conditions: Vec<Condition>,
}

const RELATION_NAMES: [&str; 8] = [
    "may_treat",
    "has_finding_site",
    "associated_with",
    "has_ingredient",
    "isa",
    "part_of",
    "related_to",
    "mapped_from",
];

fn relation_name(i: usize) -> String {
    RELATION_NAMES
        .get(i)
        .map_or_else(|| format!("relation_{i}"), |s| s.to_string())
}

/// Splits `0..n` into `k` contiguous blocks of near-equal size.
fn partition(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..k).map(|c| (c * n / k..(c + 1) * n / k).collect()).collect()
}

fn sample<R: Rng>(rng: &mut R, pool: &[usize], n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = pool.choose_multiple(rng, n.min(pool.len())).copied().collect();
    v.sort_unstable();
    v
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "synth"));
    let k = config.conditions;
    let diag_name = |i: usize| format!("DX{:04}", i + 1);
    let proc_name = |i: usize| format!("PR{:04}", i + 1);
    let med_name = |i: usize| format!("RX{:03}", i + 1);
    let cui = |i: usize| format!("C{:07}", i + 1);

    // 60% of concepts are split among conditions; the rest are background.
    let clinical = (config.concepts * 3 / 5).max(2 * k);
    let concept_blocks = partition(clinical, k);
    let diag_blocks = partition(config.diag, k);
    let proc_blocks = if config.proc == 0 {
        vec![Vec::new(); k]
    } else {
        partition(config.proc, k)
    };
    let med_blocks = partition(config.med, k);

    // Graph: condition-internal triples use the first half of the relation
    // types, background triples the second half.
    let inner_rel = config.relations / 2;
    let mut triples = BTreeSet::new();
    for block in &concept_blocks {
        for (j, &h) in block.iter().enumerate() {
            let next = block[(j + 1) % block.len()];
            triples.insert((h, rng.random_range(0..inner_rel), next));
            let other = *block.choose(&mut rng).expect("blocks are nonempty");
            if other != h {
                triples.insert((h, rng.random_range(0..inner_rel), other));
            }
        }
    }
    for h in clinical..config.concepts {
        for _ in 0..2 {
            let t = rng.random_range(0..config.concepts);
            triples.insert((h, rng.random_range(inner_rel..config.relations), t));
        }
    }
    // a little cross-condition noise
    for _ in 0..k {
        let h = rng.random_range(0..clinical);
        let t = rng.random_range(0..clinical);
        triples.insert((h, rng.random_range(inner_rel..config.relations), t));
    }
    let triples: Vec<(String, String, String)> = triples
        .into_iter()
        .map(|(h, r, t)| (cui(h), relation_name(r), cui(t)))
        .collect();

    let mut code_map = Vec::new();
    for c in 0..k {
        let block = &concept_blocks[c];
        let groups: [(CodeType, &Vec<usize>, &dyn Fn(usize) -> String); 3] = [
            (CodeType::Diag, &diag_blocks[c], &diag_name),
            (CodeType::Proc, &proc_blocks[c], &proc_name),
            (CodeType::Med, &med_blocks[c], &med_name),
        ];
        for (ty, codes, name) in groups {
            for &code in codes {
                code_map.push((ty, name(code), cui(block[0])));
                let extra = block[rng.random_range(0..block.len())];
                if extra != block[0] {
                    code_map.push((ty, name(code), cui(extra)));
                }
            }
        }
    }

    let conditions: Vec<Condition> = (0..k)
        .map(|c| Condition {
            diag: diag_blocks[c].iter().map(|&i| diag_name(i)).collect(),
            proc: proc_blocks[c].iter().map(|&i| proc_name(i)).collect(),
            med: med_blocks[c].iter().map(|&i| med_name(i)).collect(),
            concepts: concept_blocks[c].iter().map(|&i| cui(i)).collect(),
        })
        .collect();

    let extra_visit_p = (config.avg_visits - 2.0) / (config.avg_visits - 1.0);
    let all_diag: Vec<usize> = (0..config.diag).collect();
    let all_proc: Vec<usize> = (0..config.proc).collect();
    let mut patients = Vec::with_capacity(config.patients);
    for p in 0..config.patients {
        let mut chronic = vec![rng.random_range(0..k)];
        if k > 1 && rng.random_bool(0.5) {
            let second = rng.random_range(0..k);
            if second != chronic[0] {
                chronic.push(second);
            }
        }
        // two visits plus a geometric number of extra ones
        let mut n_visits = 2;
        while rng.random_bool(extra_visit_p) {
            n_visits += 1;
        }
        let mut visits = Vec::with_capacity(n_visits);
        for _ in 0..n_visits {
            let mut active = chronic.clone();
            if k > 1 && rng.random_bool(config.acute_rate) {
                active.push(rng.random_range(0..k));
            }
            active.sort_unstable();
            active.dedup();

            let pool = |blocks: &[Vec<usize>]| -> Vec<usize> {
                active.iter().flat_map(|&c| blocks[c].iter().copied()).collect()
            };
            let lo = config.diag_per_visit.saturating_sub(2).max(1);
            let n_diag = rng.random_range(lo..=config.diag_per_visit + 2);
            let mut diag = sample(&mut rng, &pool(&diag_blocks), n_diag);
            if config.noise > 0.0 && rng.random_bool(config.noise) {
                diag.extend(sample(&mut rng, &all_diag, 1));
            }
            let mut proc = Vec::new();
            if config.proc > 0 && config.proc_per_visit > 0 {
                let lo = config.proc_per_visit.saturating_sub(1).max(1);
                let n = rng.random_range(lo..=config.proc_per_visit + 1);
                proc = sample(&mut rng, &pool(&proc_blocks), n);
                if config.noise > 0.0 && rng.random_bool(config.noise) {
                    proc.extend(sample(&mut rng, &all_proc, 1));
                }
            }
            let cluster = pool(&med_blocks);
            let mut med: Vec<usize> = cluster
                .iter()
                .copied()
                .filter(|_| !(config.noise > 0.0 && rng.random_bool(config.noise)))
                .collect();
            if config.noise > 0.0 && rng.random_bool(config.noise) {
                med.push(rng.random_range(0..config.med));
            }
            if med.is_empty() {
                med.push(cluster[0]);
            }
            for v in [&mut diag, &mut proc, &mut med] {
                v.sort_unstable();
                v.dedup();
            }
            visits.push(SynthVisit {
                diag: diag.into_iter().map(diag_name).collect(),
                proc: proc.into_iter().map(proc_name).collect(),
                med: med.into_iter().map(med_name).collect(),
            });
        }
        patients.push(SynthPatient {
            id: format!("pt{:05}", p + 1),
            visits,
        });
    }

    let mut ddi = BTreeSet::new();
    if k > 1 {
        let max_pairs = {
            let total = config.med * (config.med - 1) / 2;
            let within: usize = med_blocks.iter().map(|b| b.len() * b.len().saturating_sub(1) / 2).sum();
            total - within
        };
        while ddi.len() < config.ddi_pairs.min(max_pairs) {
            let a = rng.random_range(0..config.med);
            let b = rng.random_range(0..config.med);
            let same = med_blocks.iter().any(|blk| blk.contains(&a) && blk.contains(&b));
            if a != b && !same {
                ddi.insert((a.min(b), a.max(b)));
            }
        }
    }
    let ddi = ddi.into_iter().map(|(a, b)| (med_name(a), med_name(b))).collect();

    Ok(SynthData {
        patients,
        triples,
        code_map,
        ddi,
        conditions,
    })
}

pub const EHR_FILE: &str = "ehr.jsonl";
pub const TRIPLES_FILE: &str = "kg_triples.tsv";
pub const CODE_MAP_FILE: &str = "code_map.tsv";
pub const DDI_FILE: &str = "ddi.tsv";

impl SynthData {
    pub fn ehr_jsonl(&self) -> String {
        let mut s = String::new();
        for p in &self.patients {
            s.push_str(&serde_json::to_string(p).expect("plain strings serialise"));
            s.push('\n');
        }
        s
    }

    pub fn triples_tsv(&self) -> String {
        let mut s = String::new();
        for (h, r, t) in &self.triples {
            let _ = writeln!(s, "{h}\t{r}\t{t}");
        }
        s
    }

    pub fn code_map_tsv(&self) -> String {
        let mut s = String::new();
        for (ty, code, c) in &self.code_map {
            let _ = writeln!(s, "{ty}\t{code}\t{c}");
        }
        s
    }

    pub fn ddi_tsv(&self) -> String {
        let mut s = String::new();
        for (a, b) in &self.ddi {
            let _ = writeln!(s, "{a}\t{b}");
        }
        s
    }

    /// Writes the four files into `dir`. Existing files are an error unless
    /// `force` is set.
    pub fn write(&self, dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
        let files = [
            (EHR_FILE, self.ehr_jsonl()),
            (TRIPLES_FILE, self.triples_tsv()),
            (CODE_MAP_FILE, self.code_map_tsv()),
            (DDI_FILE, self.ddi_tsv()),
        ];
        if !force {
            if let Some((name, _)) = files.iter().find(|(n, _)| dir.join(n).exists()) {
                return Err(Error::Config(format!(
                    "{} already exists (use --force to overwrite)",
                    dir.join(name).display()
                )));
            }
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }

    /// Dataset statistics as `(label, value)` rows.
    pub fn summary(&self) -> Vec<(&'static str, String)> {
        let visits: Vec<&SynthVisit> = self.patients.iter().flat_map(|p| &p.visits).collect();
        let nv = visits.len().max(1) as f64;
        let distinct = |f: fn(&SynthVisit) -> &Vec<String>| {
            visits.iter().flat_map(|v| f(v)).collect::<BTreeSet<_>>().len()
        };
        let per_visit = |f: fn(&SynthVisit) -> &Vec<String>| {
            format!("{:.2}", visits.iter().map(|v| f(v).len()).sum::<usize>() as f64 / nv)
        };
        let concepts: BTreeSet<&String> = self.triples.iter().flat_map(|(h, _, t)| [h, t]).collect();
        let relations: BTreeSet<&String> = self.triples.iter().map(|(_, r, _)| r).collect();
        vec![
            ("# of patients", self.patients.len().to_string()),
            ("# of clinical visits", visits.len().to_string()),
            ("# of diag.", distinct(|v| &v.diag).to_string()),
            ("# of proc.", distinct(|v| &v.proc).to_string()),
            ("# of med.", distinct(|v| &v.med).to_string()),
            (
                "avg. # of visits",
                format!("{:.2}", visits.len() as f64 / self.patients.len().max(1) as f64),
            ),
            ("avg. # of diag. / visit", per_visit(|v| &v.diag)),
            ("avg. # of proc. / visit", per_visit(|v| &v.proc)),
            ("avg. # of med. / visit", per_visit(|v| &v.med)),
            ("# of concept", concepts.len().to_string()),
            ("# of relationship", relations.len().to_string()),
        ]
    }
}
