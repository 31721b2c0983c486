//! Objective, training loop and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::independence_loss;
use crate::ehr::{multihot, CodeVocab, PatientRecord};
use crate::encoder::{club_fit_step, club_mi_loss, CLUB_B, CLUB_W};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation};
use crate::metrics::DdiMatrix;
use crate::model::{Model, ModelConfig, VisitOutput};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{derive_seed, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub num_filters: usize,
    pub kg_layers: usize,
    /// Selection threshold on output probabilities.
    pub eta: f64,
    pub lr: f64,
    /// Patients per batch.
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub seed: u64,
    pub club_inner_steps: usize,
    pub bce_clamp: f64,
    /// Replace knowledge tables with zeros and drop both auxiliary losses.
    pub no_kg: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 256,
            num_filters: 4,
            kg_layers: 1,
            eta: 0.5,
            lr: 1e-3,
            batch_size: 4,
            alpha: 1.0,
            beta: 1.0,
            epochs: 20,
            seed: 0,
            club_inner_steps: 1,
            bce_clamp: 1e-7,
            no_kg: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.dim == 0 || self.num_filters == 0 || self.kg_layers == 0 {
            return bad("dim, num_filters and kg_layers must be positive");
        }
        if self.batch_size == 0 || self.club_inner_steps == 0 {
            return bad("batch_size and club_inner_steps must be positive");
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad("eta must lie in (0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.bce_clamp > 0.0 && self.bce_clamp < 0.5) {
            return bad("bce_clamp must lie in (0, 0.5)");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            num_filters: self.num_filters,
            kg_layers: self.kg_layers,
            no_kg: self.no_kg,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Loss weights actually applied; both are zero in the ablation.
    pub fn weights(&self) -> (f64, f64) {
        if self.no_kg {
            (0.0, 0.0)
        } else {
            (self.alpha, self.beta)
        }
    }
}

/// `−Σ [m log ŷ + (1−m) log(1−ŷ)]` with `ŷ` clamped to `[clamp, 1−clamp]`.
pub fn bce_value(scores: &[f64], truth: &Tensor, clamp: f64) -> f64 {
    scores
        .iter()
        .zip(truth.data())
        .map(|(&y, &m)| {
            let y = y.clamp(clamp, 1.0 - clamp);
            -(m * y.ln() + (1.0 - m) * (1.0 - y).ln())
        })
        .sum()
}

/// Tape form of [`bce_value`], summed over every entry of `scores`.
pub fn bce_loss(tape: &mut Tape, scores: Var, truth: &Tensor, clamp: f64) -> Result<Var> {
    let m = tape.constant(truth.clone());
    let y = tape.clamp(scores, clamp, 1.0 - clamp)?;
    let log_y = tape.log(y)?;
    let one_minus = tape.affine(y, -1.0, 1.0)?;
    let log_n = tape.log(one_minus)?;
    let pos = tape.mul(m, log_y)?;
    let not_m = tape.constant(truth.map(|v| 1.0 - v));
    let neg = tape.mul(not_m, log_n)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum_all(both)?;
    tape.scale(total, -1.0)
}

/// `bce + α·ekg + β·mi`.
pub fn compose(tape: &mut Tape, bce: Var, ekg: Var, mi: Var, alpha: f64, beta: f64) -> Result<Var> {
    let a = tape.scale(ekg, alpha)?;
    let b = tape.scale(mi, beta)?;
    let l = tape.add(bce, a)?;
    tape.add(l, b)
}

/// Forward pass over a batch of patients.
pub struct BatchForward {
    pub outputs: Vec<Vec<VisitOutput>>,
    pub bce: Var,
    /// Independence loss over filter embeddings; zero in the ablation.
    pub ekg: Var,
    /// Stacked `v_o` rows, one per visit.
    pub v_o: Var,
    /// Stacked `v_k` rows, one per visit.
    pub v_k: Var,
}

pub fn forward_batch(
    model: &Model,
    config: &TrainConfig,
    tape: &mut Tape,
    store: &ParamStore,
    batch: &[PatientRecord],
) -> Result<BatchForward> {
    if batch.is_empty() || batch.iter().any(|p| p.visits.is_empty()) {
        return Err(Error::Data("batch needs patients with at least one visit".into()));
    }
    let ctx = model.knowledge(tape, store)?;
    let m = model.num_meds();
    let mut outputs = Vec::with_capacity(batch.len());
    let (mut scores, mut v_o, mut v_k) = (Vec::new(), Vec::new(), Vec::new());
    let mut targets = Vec::new();
    for p in batch {
        let outs = model.forward_patient(tape, store, &ctx, p)?;
        for (o, visit) in outs.iter().zip(&p.visits) {
            scores.push(o.scores);
            v_o.push(o.v_o);
            v_k.push(o.v_k);
            targets.extend_from_slice(multihot(&visit.med, m)?.data());
        }
        outputs.push(outs);
    }
    let scores = tape.concat(&scores, 0)?;
    let truth = Tensor::new(vec![v_o.len(), m], targets)?;
    let bce = bce_loss(tape, scores, &truth, config.bce_clamp)?;
    let ekg = match &ctx.graph {
        Some(g) => independence_loss(tape, g.filters)?,
        None => tape.constant(Tensor::zeros(&[1, 1])),
    };
    Ok(BatchForward {
        outputs,
        bce,
        ekg,
        v_o: tape.concat(&v_o, 0)?,
        v_k: tape.concat(&v_k, 0)?,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub bce: Var,
    pub ekg: Var,
    pub mi: Var,
}

/// Completes the objective. The variational net enters as constants read
/// from `store`, so the main loss never updates it.
pub fn finish_loss(tape: &mut Tape, fwd: &BatchForward, store: &ParamStore, config: &TrainConfig) -> Result<BatchLoss> {
    let (alpha, beta) = config.weights();
    let mi = if config.no_kg {
        tape.constant(Tensor::zeros(&[1, 1]))
    } else {
        let get = |name: &str| {
            store
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
        };
        let w = tape.constant(get(CLUB_W)?);
        let b = tape.constant(get(CLUB_B)?);
        club_mi_loss(tape, fwd.v_o, fwd.v_k, w, b)?
    };
    let total = compose(tape, fwd.bce, fwd.ekg, mi, alpha, beta)?;
    Ok(BatchLoss {
        total,
        bce: fwd.bce,
        ekg: fwd.ekg,
        mi,
    })
}

/// Loss values for one batch or averaged over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub bce: f64,
    pub ekg: f64,
    pub mi: f64,
}

impl LossValues {
    fn read(tape: &Tape, l: &BatchLoss) -> Result<Self> {
        Ok(LossValues {
            total: tape.value(l.total).item()?,
            bce: tape.value(l.bce).item()?,
            ekg: tape.value(l.ekg).item()?,
            mi: tape.value(l.mi).item()?,
        })
    }

    fn mean(all: &[LossValues]) -> Self {
        let n = all.len().max(1) as f64;
        let sum = |f: fn(&LossValues) -> f64| all.iter().map(f).sum::<f64>() / n;
        LossValues {
            total: sum(|l| l.total),
            bce: sum(|l| l.bce),
            ekg: sum(|l| l.ekg),
            mi: sum(|l| l.mi),
        }
    }
}

/// One line of the training log. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossValues,
    pub val: Option<Evaluation>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let mut s = format!(
            "epoch {} loss {:.6} bce {:.6} ekg {:.6} mi {:.6}",
            self.epoch, self.loss.total, self.loss.bce, self.loss.ekg, self.loss.mi
        );
        if let Some(v) = &self.val {
            s.push_str(&format!(
                " val_jaccard {:.4} val_f1 {:.4} val_prauc {:.4}",
                v.jaccard, v.f1, v.prauc
            ));
            if let Some(d) = v.ddi {
                s.push_str(&format!(" val_ddi {d:.4}"));
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestModel {
    pub epoch: usize,
    pub val_jaccard: f64,
    pub params: ParamStore,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    /// Separate optimiser for the variational net.
    pub club_adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<BestModel>,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(model: &Model, config: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            params: model.init_params(derive_seed(config.seed, "init"))?,
            adam: AdamState::new(config.adam()),
            club_adam: AdamState::new(config.adam()),
            epoch: 0,
            best: None,
            log: Vec::new(),
        })
    }

    /// Best-validation parameters, or the current ones without validation.
    pub fn best_params(&self) -> &ParamStore {
        self.best.as_ref().map_or(&self.params, |b| &b.params)
    }
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(op) => Error::Diverged {
            epoch,
            batch,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// One alternating update: fit the variational net on this batch, then take
/// an Adam step on the combined loss. Returns the pre-update losses.
pub fn train_step(
    model: &Model,
    config: &TrainConfig,
    state: &mut TrainState,
    batch: &[PatientRecord],
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let fwd = forward_batch(model, config, &mut tape, &state.params, batch)?;
    if !config.no_kg && tape.shape(fwd.v_o)[0] >= 2 {
        let v_o = tape.value(fwd.v_o).clone();
        let v_k = tape.value(fwd.v_k).clone();
        for _ in 0..config.club_inner_steps {
            club_fit_step(&mut state.params, &mut state.club_adam, &v_o, &v_k)?;
        }
    }
    let loss = finish_loss(&mut tape, &fwd, &state.params, config)?;
    let values = LossValues::read(&tape, &loss)?;
    if !values.total.is_finite() {
        return Err(Error::NonFinite("total loss"));
    }
    let grads = tape.backward(loss.total)?;
    state.adam.step(&mut state.params, grads.params())?;
    Ok(values)
}

/// Patient order for `epoch`, derived from the master seed so a resumed run
/// replays the same batches.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch}")));
    order.shuffle(&mut rng);
    order
}

fn batches(train: &[PatientRecord], order: &[usize], size: usize) -> Vec<Vec<PatientRecord>> {
    order
        .chunks(size)
        .map(|c| c.iter().map(|&i| train[i].clone()).collect())
        .collect()
}

/// Mean batch losses without updating anything.
pub fn evaluate_loss(
    model: &Model,
    config: &TrainConfig,
    store: &ParamStore,
    train: &[PatientRecord],
) -> Result<LossValues> {
    let order: Vec<usize> = (0..train.len()).collect();
    let mut all = Vec::new();
    for (b, batch) in batches(train, &order, config.batch_size).iter().enumerate() {
        let mut tape = Tape::new();
        let mut run = || -> Result<LossValues> {
            let fwd = forward_batch(model, config, &mut tape, store, batch)?;
            let loss = finish_loss(&mut tape, &fwd, store, config)?;
            LossValues::read(&tape, &loss)
        };
        let v = run().map_err(diverged(0, b))?;
        if !v.total.is_finite() {
            return Err(diverged(0, b)(Error::NonFinite("total loss")));
        }
        all.push(v);
    }
    Ok(LossValues::mean(&all))
}

/// Inputs of a training run.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [PatientRecord],
    /// Model selection set; may be empty, in which case the last epoch wins.
    pub val: &'a [PatientRecord],
    pub ddi: Option<&'a DdiMatrix>,
}

/// Trains from `state` up to `config.epochs`, calling `on_epoch` after each
/// logged epoch.
pub fn train(
    model: &Model,
    config: &TrainConfig,
    data: TrainData<'_>,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let validate = |params: &ParamStore| -> Result<Option<Evaluation>> {
        if data.val.is_empty() {
            Ok(None)
        } else {
            evaluate(model, params, data.val, config.eta, data.ddi).map(Some)
        }
    };
    let mut record = |state: &mut TrainState, log: EpochLog| -> Result<()> {
        if let Some(v) = &log.val {
            let better = state.best.as_ref().is_none_or(|b| v.jaccard > b.val_jaccard);
            if better {
                state.best = Some(BestModel {
                    epoch: log.epoch,
                    val_jaccard: v.jaccard,
                    params: state.params.clone(),
                });
            }
        }
        state.log.push(log);
        on_epoch(state.log.last().expect("just pushed"), state)
    };

    if state.log.is_empty() {
        let loss = evaluate_loss(model, config, &state.params, data.train)?;
        let val = validate(&state.params)?;
        record(state, EpochLog { epoch: 0, loss, val })?;
    }
    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let order = epoch_order(data.train.len(), config.seed, epoch);
        let mut losses = Vec::new();
        for (b, batch) in batches(data.train, &order, config.batch_size).iter().enumerate() {
            losses.push(train_step(model, config, state, batch).map_err(diverged(epoch, b))?);
        }
        state.epoch = epoch;
        let val = validate(&state.params)?;
        record(
            state,
            EpochLog {
                epoch,
                loss: LossValues::mean(&losses),
                val,
            },
        )?;
    }
    Ok(())
}

const PARAMS_FILE: &str = "params.bin";
const OPTIM_FILE: &str = "optim.bin";
const BEST_FILE: &str = "best.bin";
const META_FILE: &str = "meta.json";

/// Checkpoint metadata, stored as `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub vocab: CodeVocab,
    pub num_concepts: usize,
    pub num_relations: usize,
    pub epoch: usize,
    pub adam_steps: u64,
    pub club_steps: u64,
    pub best_epoch: Option<usize>,
    pub best_val_jaccard: Option<f64>,
    pub log: Vec<EpochLog>,
}

/// A checkpoint directory. Parameter-only checkpoints (for evaluation) have
/// no optimiser or best-model entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub optim: Option<ParamStore>,
    pub best: Option<ParamStore>,
}

impl Checkpoint {
    /// Full resumable state.
    pub fn from_state(model: &Model, config: &TrainConfig, state: &TrainState) -> Result<Self> {
        let mut optim = ParamStore::new();
        for (prefix, adam) in [("main.", &state.adam), ("club.", &state.club_adam)] {
            for (name, t) in adam.moments()?.iter() {
                optim.insert(&format!("{prefix}{name}"), t.clone())?;
            }
        }
        Ok(Checkpoint {
            meta: Self::meta(model, config, state),
            params: state.params.clone(),
            optim: Some(optim),
            best: state.best.as_ref().map(|b| b.params.clone()),
        })
    }

    /// The best-validation parameters alone.
    pub fn best_only(model: &Model, config: &TrainConfig, state: &TrainState) -> Self {
        Checkpoint {
            meta: Self::meta(model, config, state),
            params: state.best_params().clone(),
            optim: None,
            best: None,
        }
    }

    fn meta(model: &Model, config: &TrainConfig, state: &TrainState) -> CheckpointMeta {
        CheckpointMeta {
            config: config.clone(),
            vocab: model.vocab.clone(),
            num_concepts: model.num_concepts,
            num_relations: model.num_relations,
            epoch: state.epoch,
            adam_steps: state.adam.step_count(),
            club_steps: state.club_adam.step_count(),
            best_epoch: state.best.as_ref().map(|b| b.epoch),
            best_val_jaccard: state.best.as_ref().map(|b| b.val_jaccard),
            log: state.log.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join(PARAMS_FILE))?;
        if let Some(o) = &self.optim {
            o.save(&dir.join(OPTIM_FILE))?;
        }
        if let Some(b) = &self.best {
            b.save(&dir.join(BEST_FILE))?;
        }
        let meta = serde_json::to_string_pretty(&self.meta).expect("metadata serialises") + "\n";
        let path = dir.join(META_FILE);
        std::fs::write(&path, meta).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let optional = |name: &str| -> Result<Option<ParamStore>> {
            let p = dir.join(name);
            if p.exists() {
                ParamStore::load(&p).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Checkpoint {
            meta,
            params: ParamStore::load(&dir.join(PARAMS_FILE))?,
            optim: optional(OPTIM_FILE)?,
            best: optional(BEST_FILE)?,
        })
    }

    /// Checks the checkpoint was produced for `model`'s data.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        if self.meta.vocab != model.vocab {
            return Err(Error::Checkpoint("code vocabulary differs from the data".into()));
        }
        if self.meta.num_concepts != model.num_concepts || self.meta.num_relations != model.num_relations {
            return Err(Error::Checkpoint("knowledge graph size differs from the checkpoint".into()));
        }
        model.check_params(&self.params)
    }

    /// Rebuilds the training state for resuming.
    pub fn into_state(self, model: &Model) -> Result<TrainState> {
        self.check_model(model)?;
        let optim = self
            .optim
            .ok_or_else(|| Error::Checkpoint("no optimiser state; not a resumable checkpoint".into()))?;
        let (mut main, mut club) = (ParamStore::new(), ParamStore::new());
        for (name, t) in optim.iter() {
            if let Some(k) = name.strip_prefix("main.") {
                main.insert(k, t.clone())?;
            } else if let Some(k) = name.strip_prefix("club.") {
                club.insert(k, t.clone())?;
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimiser entry `{name}`")));
            }
        }
        let adam_cfg = self.meta.config.adam();
        let best = match (self.best, self.meta.best_epoch, self.meta.best_val_jaccard) {
            (Some(params), Some(epoch), Some(val_jaccard)) => Some(BestModel {
                epoch,
                val_jaccard,
                params,
            }),
            (None, None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete best-model entry".into())),
        };
        Ok(TrainState {
            params: self.params,
            adam: AdamState::restore(adam_cfg, self.meta.adam_steps, &main)?,
            club_adam: AdamState::restore(adam_cfg, self.meta.club_steps, &club)?,
            epoch: self.meta.epoch,
            best,
            log: self.meta.log,
        })
    }
}
