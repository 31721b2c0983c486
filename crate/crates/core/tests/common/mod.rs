//! Shared fixtures and brute-force reference implementations.
#![allow(dead_code)]

pub mod criteria;

use std::collections::HashSet;

use dkinet_core::dataset::Dataset;
use dkinet_core::synth::{generate, SynthConfig, DDI_FILE, CODE_MAP_FILE, EHR_FILE, TRIPLES_FILE};
use tempfile::TempDir;

/// Writes a synthetic corpus to a temporary directory and loads it back.
pub fn synth_dataset(cfg: &SynthConfig) -> (TempDir, Dataset) {
    let dir = TempDir::new().unwrap();
    generate(cfg).unwrap().write(dir.path(), false).unwrap();
    let p = |f: &str| dir.path().join(f);
    let ds = Dataset::load(&p(EHR_FILE), &p(TRIPLES_FILE), &p(CODE_MAP_FILE), Some(&p(DDI_FILE))).unwrap();
    (dir, ds)
}

/// A small corpus for gradient and leakage checks.
pub fn tiny_config(patients: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        patients,
        diag: 24,
        proc: 8,
        med: 8,
        concepts: 30,
        relations: 4,
        conditions: 4,
        diag_per_visit: 4,
        proc_per_visit: 2,
        ddi_pairs: 4,
        seed,
        ..SynthConfig::default()
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Output of the looped graph aggregation.
pub struct LoopedTables {
    pub filters: Vec<Vec<f64>>,
    pub codes: Vec<Vec<f64>>,
    pub concepts: Vec<Vec<f64>>,
    /// Per layer, per code, per filter.
    pub attention: Vec<Vec<Vec<f64>>>,
}

/// Literal nested-loop graph aggregation. `triples` are `(head, relation,
/// tail)`, `links` are `(code, concept)`.
pub fn looped_aggregation(
    concepts: &[Vec<f64>],
    relations: &[Vec<f64>],
    codes: &[Vec<f64>],
    filter_w: &[Vec<f64>],
    triples: &[(usize, usize, usize)],
    links: &[(usize, usize)],
    layers: usize,
) -> LoopedTables {
    let dim = relations[0].len();
    let nf = filter_w.len();
    let mut filters = vec![vec![0.0; dim]; nf];
    for i in 0..nf {
        let mix = softmax(&filter_w[i]);
        for r in 0..relations.len() {
            for k in 0..dim {
                filters[i][k] += mix[r] * relations[r][k];
            }
        }
    }
    let mut e_u = concepts.to_vec();
    let mut e_c = codes.to_vec();
    let mut attention = Vec::new();
    for _ in 0..layers {
        let mut next_c = e_c.clone();
        let mut att_layer = Vec::new();
        for c in 0..e_c.len() {
            let logits: Vec<f64> = (0..nf)
                .map(|i| (0..dim).map(|k| filters[i][k] * e_c[c][k]).sum())
                .collect();
            let att = softmax(&logits);
            let mine: Vec<usize> = links.iter().filter(|l| l.0 == c).map(|l| l.1).collect();
            if !mine.is_empty() {
                let n = (mine.len() * nf) as f64;
                let mut acc = vec![0.0; dim];
                for &u in &mine {
                    for i in 0..nf {
                        for k in 0..dim {
                            acc[k] += att[i] * filters[i][k] * e_u[u][k];
                        }
                    }
                }
                next_c[c] = acc.iter().map(|v| v / n).collect();
            }
            att_layer.push(att);
        }
        let mut next_u = e_u.clone();
        for h in 0..e_u.len() {
            let mine: Vec<(usize, usize)> =
                triples.iter().filter(|t| t.0 == h).map(|t| (t.1, t.2)).collect();
            if mine.is_empty() {
                continue;
            }
            let mut acc = vec![0.0; dim];
            for &(r, t) in &mine {
                for k in 0..dim {
                    acc[k] += relations[r][k] * e_u[t][k];
                }
            }
            next_u[h] = acc.iter().map(|v| v / mine.len() as f64).collect();
        }
        e_c = next_c;
        e_u = next_u;
        attention.push(att_layer);
    }
    LoopedTables {
        filters,
        codes: e_c,
        concepts: e_u,
        attention,
    }
}

/// Distance correlation via the moment form `V² = S1 + S2 − 2·S3`, with no
/// double-centred matrices. Returns 0 when either distance variance is
/// below 1e-12.
pub fn dcor(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let v2 = |a: &[f64], b: &[f64]| {
        let len = a.len();
        let (mut s1, mut sa, mut sb, mut s3) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..len {
            for j in 0..len {
                let da = (a[i] - a[j]).abs();
                let db = (b[i] - b[j]).abs();
                s1 += da * db;
                sa += da;
                sb += db;
                for k in 0..len {
                    s3 += da * (b[i] - b[k]).abs();
                }
            }
        }
        s1 / (n * n) + (sa / (n * n)) * (sb / (n * n)) - 2.0 * s3 / (n * n * n)
    };
    let vx = v2(x, x).max(0.0).sqrt();
    let vy = v2(y, y).max(0.0).sqrt();
    if vx < 1e-12 || vy < 1e-12 {
        return 0.0;
    }
    v2(x, y).max(0.0).sqrt() / (vx * vy).sqrt()
}

/// Average precision by enumerating every cut-off of the ranked list.
pub fn brute_ap(scores: &[f64], truth: &[usize]) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let pos: HashSet<usize> = truth.iter().copied().collect();
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut total = 0.0;
    let mut prev_recall = 0.0;
    for k in 1..=ids.len() {
        let hits = ids[..k].iter().filter(|i| pos.contains(i)).count() as f64;
        let recall = hits / pos.len() as f64;
        total += hits / k as f64 * (recall - prev_recall);
        prev_recall = recall;
    }
    Some(total)
}

pub fn set_jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: HashSet<_> = a.iter().collect();
    let b: HashSet<_> = b.iter().collect();
    let inter = a.intersection(&b).count();
    let union = a.union(&b).count();
    if union == 0 || b.is_empty() {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn set_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let t: HashSet<_> = truth.iter().collect();
    let p: HashSet<_> = pred.iter().collect();
    if p.is_empty() {
        return 0.0;
    }
    let inter = t.intersection(&p).count() as f64;
    2.0 * inter / (t.len() + p.len()) as f64
}
