//! Visit-level evaluation and the bootstrap protocol.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::threshold_select;
use crate::ehr::PatientRecord;
use crate::error::{Error, Result};
use crate::metrics::{average_precision, ddi_rate, f1, jaccard, DdiMatrix};
use crate::model::Model;
use crate::params::{derive_seed, ParamStore};

/// Scores and selections for one visit.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitPrediction {
    pub truth: Vec<usize>,
    pub scores: Vec<f64>,
    pub predicted: Vec<usize>,
}

/// Runs the model over `patients`; one vector of visit predictions per patient.
pub fn predict_visits(
    model: &Model,
    store: &ParamStore,
    patients: &[PatientRecord],
    eta: f64,
) -> Result<Vec<Vec<VisitPrediction>>> {
    let scores = model.predict(store, patients)?;
    Ok(patients
        .iter()
        .zip(scores)
        .map(|(p, visits)| {
            p.visits
                .iter()
                .zip(visits)
                .map(|(v, s)| VisitPrediction {
                    truth: v.med.clone(),
                    predicted: threshold_select(&s, eta),
                    scores: s,
                })
                .collect()
        })
        .collect())
}

/// Visit-averaged metrics for one pass over a set of patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub jaccard: f64,
    pub f1: f64,
    pub prauc: f64,
    pub ddi: Option<f64>,
    /// Visits with a nonempty ground truth, the averaging population.
    pub scored_visits: usize,
    pub visits: usize,
}

/// Averages per-visit metrics over every visit of the given patients.
/// Visits with an empty ground truth are left out of the set metrics but
/// still contribute predicted pairs to the DDI rate.
pub fn evaluate_predictions<'a>(
    patients: impl IntoIterator<Item = &'a [VisitPrediction]>,
    ddi: Option<&DdiMatrix>,
) -> Evaluation {
    let (mut ja, mut f, mut ap) = (0.0, 0.0, 0.0);
    let (mut scored, mut total) = (0usize, 0usize);
    let mut sets: Vec<&[usize]> = Vec::new();
    for visits in patients {
        for v in visits {
            total += 1;
            sets.push(&v.predicted);
            if let Some(a) = average_precision(&v.scores, &v.truth) {
                scored += 1;
                ja += jaccard(&v.truth, &v.predicted);
                f += f1(&v.truth, &v.predicted);
                ap += a;
            }
        }
    }
    let n = scored.max(1) as f64;
    Evaluation {
        jaccard: ja / n,
        f1: f / n,
        prauc: ap / n,
        ddi: ddi.map(|d| ddi_rate(sets.iter().copied(), d)),
        scored_visits: scored,
        visits: total,
    }
}

/// Plain, single-pass evaluation.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    patients: &[PatientRecord],
    eta: f64,
    ddi: Option<&DdiMatrix>,
) -> Result<Evaluation> {
    let preds = predict_visits(model, store, patients, eta)?;
    Ok(evaluate_predictions(preds.iter().map(Vec::as_slice), ddi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub rounds: usize,
    pub seed: u64,
    /// When false every round uses the test set as is.
    pub resample: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            rounds: 10,
            seed: 0,
            resample: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation over rounds.
    pub std: f64,
    pub rounds: Vec<f64>,
}

impl MetricSummary {
    pub fn from_rounds(rounds: Vec<f64>) -> Self {
        let n = rounds.len().max(1) as f64;
        let mean = rounds.iter().sum::<f64>() / n;
        let var = rounds.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MetricSummary {
            mean,
            std: var.sqrt(),
            rounds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bootstrap: BootstrapConfig,
    /// Averaging unit for the set metrics.
    pub averaging: String,
    pub patients: usize,
    pub visits: usize,
    pub jaccard: MetricSummary,
    pub f1: MetricSummary,
    pub prauc: MetricSummary,
    /// Absent when no interaction list was supplied.
    pub ddi: Option<MetricSummary>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// Fixed-width table with one row per metric.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>8} {:>8}\n",
            "metric", "mean", "std"
        );
        let mut row = |name: &str, m: &MetricSummary| {
            out.push_str(&format!("{name:<8} {:>8.4} {:>8.4}\n", m.mean, m.std));
        };
        row("jaccard", &self.jaccard);
        row("f1", &self.f1);
        row("prauc", &self.prauc);
        match &self.ddi {
            Some(d) => row("ddi", d),
            None => out.push_str("ddi      (no interaction list given)\n"),
        }
        out
    }
}

/// Evaluates `rounds` bootstrap resamples of the test patients. Each round
/// draws patients with replacement up to the test-set size from a seed
/// derived from the master seed and the round index.
pub fn bootstrap_evaluate(
    model: &Model,
    store: &ParamStore,
    test: &[PatientRecord],
    eta: f64,
    ddi: Option<&DdiMatrix>,
    config: BootstrapConfig,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Data("bootstrap needs a nonempty test set".into()));
    }
    if config.rounds == 0 {
        return Err(Error::Config("bootstrap rounds must be positive".into()));
    }
    let preds = predict_visits(model, store, test, eta)?;
    Ok(bootstrap_predictions(&preds, ddi, config))
}

/// The resampling half of [`bootstrap_evaluate`], over precomputed predictions.
pub fn bootstrap_predictions(
    preds: &[Vec<VisitPrediction>],
    ddi: Option<&DdiMatrix>,
    config: BootstrapConfig,
) -> MetricsReport {
    let n = preds.len();
    let mut rounds: Vec<Evaluation> = Vec::with_capacity(config.rounds);
    for r in 0..config.rounds {
        let picks: Vec<usize> = if config.resample {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("bootstrap/{r}")));
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        rounds.push(evaluate_predictions(picks.iter().map(|&i| preds[i].as_slice()), ddi));
    }
    let collect = |f: fn(&Evaluation) -> f64| MetricSummary::from_rounds(rounds.iter().map(f).collect());
    MetricsReport {
        bootstrap: config,
        averaging: "visit".into(),
        patients: n,
        visits: preds.iter().map(Vec::len).sum(),
        jaccard: collect(|e| e.jaccard),
        f1: collect(|e| e.f1),
        prauc: collect(|e| e.prauc),
        ddi: ddi.map(|_| collect(|e| e.ddi.unwrap_or(0.0))),
    }
}
