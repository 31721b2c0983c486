//! Visit encoders and the CLUB mutual-information regulariser.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CLUB_W: &str = "club.w";
pub const CLUB_B: &str = "club.b";

/// Sum of the rows of `codes`, or a zero `1 × dim` row for an empty set.
pub fn sum_or_zero(tape: &mut Tape, codes: Option<Var>, dim: usize) -> Result<Var> {
    match codes {
        Some(c) => tape.reduce_sum(c, 0),
        None => Ok(tape.constant(Tensor::zeros(&[1, dim]))),
    }
}

/// Per-type EHR embedding of one visit.
#[derive(Clone, Debug)]
pub struct EhrEmbedding {
    /// Per type, the `n × dim` code embeddings (`None` for an empty set).
    pub codes: Vec<Option<Var>>,
    /// Per type, the summed `1 × dim` embedding.
    pub sums: Vec<Var>,
    /// Concatenation of `sums`.
    pub v_o: Var,
}

/// Looks up and sums the code embeddings of each type, then concatenates
/// the sums. `tables[i]` and `ids[i]` describe the same type.
pub fn embed_visit_ehr(tape: &mut Tape, tables: &[Var], ids: &[&[usize]], dim: usize) -> Result<EhrEmbedding> {
    if tables.len() != ids.len() {
        return Err(Error::Data("one code set per table required".into()));
    }
    let mut codes = Vec::with_capacity(tables.len());
    let mut sums = Vec::with_capacity(tables.len());
    for (&table, set) in tables.iter().zip(ids) {
        let rows = tape.shape(table)[0];
        if let Some(&bad) = set.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!("code id {bad} out of range for table of {rows} rows")));
        }
        let e = if set.is_empty() {
            None
        } else {
            Some(tape.gather_rows(table, set)?)
        };
        sums.push(sum_or_zero(tape, e, dim)?);
        codes.push(e);
    }
    let v_o = tape.concat(&sums, 1)?;
    Ok(EhrEmbedding { codes, sums, v_o })
}

/// Knowledge table of one code type, with its transpose cached.
#[derive(Clone, Copy, Debug)]
pub struct TypeKnowledge {
    pub table: Var,
    pub table_t: Var,
}

impl TypeKnowledge {
    pub fn new(tape: &mut Tape, table: Var) -> Result<Self> {
        let table_t = tape.transpose(table)?;
        Ok(TypeKnowledge { table, table_t })
    }
}

/// Knowledge-injected summary of one code set.
///
/// Each code's EHR embedding attends over every row of the type's knowledge
/// table; the attended vector is concatenated with the code's own knowledge
/// row, projected back to `dim`, and the projections are summed.
pub fn knowledge_inject(
    tape: &mut Tape,
    query: Option<Var>,
    ids: &[usize],
    knowledge: TypeKnowledge,
    w_inj: Var,
    dim: usize,
) -> Result<Var> {
    let Some(q) = query else {
        return sum_or_zero(tape, None, dim);
    };
    if tape.shape(q)[1] != tape.shape(knowledge.table_t)[0] {
        return Err(Error::Shape {
            op: "knowledge_inject",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(knowledge.table).to_vec(),
        });
    }
    let logits = tape.matmul(q, knowledge.table_t)?;
    let att = tape.softmax(logits, 1)?;
    let global = tape.matmul(att, knowledge.table)?;
    let local = tape.gather_rows(knowledge.table, ids)?;
    let both = tape.concat(&[local, global], 1)?;
    let z = tape.matmul(both, w_inj)?;
    tape.reduce_sum(z, 0)
}

/// Stacked encodings of several visits; row `t` of each output is visit `t`.
#[derive(Clone, Debug)]
pub struct VisitEncodings {
    /// `T × D_v` EHR representations.
    pub v_o: Var,
    /// `T × D_v` knowledge-injected representations.
    pub v_k: Var,
    /// Per type, the `T × dim` block of `v_k`.
    pub parts: Vec<Var>,
}

/// Batched form of [`embed_visit_ehr`] and [`knowledge_inject`] over all
/// visits of one patient. `ids[t][i]` is visit `t`'s code set of type `i`.
/// Each output row depends only on its own visit's codes.
pub fn encode_visits(
    tape: &mut Tape,
    ehr_tables: &[Var],
    knowledge: &[TypeKnowledge],
    w_inj: &[Var],
    ids: &[Vec<&[usize]>],
    dim: usize,
) -> Result<VisitEncodings> {
    let types = ehr_tables.len();
    if ids.is_empty() || knowledge.len() != types || w_inj.len() != types || ids.iter().any(|v| v.len() != types) {
        return Err(Error::Data("one code set per table and visit required".into()));
    }
    let t = ids.len();
    let mut sums = Vec::with_capacity(types);
    let mut parts = Vec::with_capacity(types);
    for i in 0..types {
        let (mut flat, mut seg) = (Vec::new(), Vec::new());
        for (row, visit) in ids.iter().enumerate() {
            flat.extend_from_slice(visit[i]);
            seg.extend(std::iter::repeat_n(row, visit[i].len()));
        }
        let rows = tape.shape(ehr_tables[i])[0];
        if let Some(&bad) = flat.iter().find(|&&c| c >= rows) {
            return Err(Error::Data(format!("code id {bad} out of range for table of {rows} rows")));
        }
        if flat.is_empty() {
            sums.push(tape.constant(Tensor::zeros(&[t, dim])));
            parts.push(tape.constant(Tensor::zeros(&[t, dim])));
            continue;
        }
        let ones = vec![1.0; flat.len()];
        let e = tape.gather_rows(ehr_tables[i], &flat)?;
        sums.push(tape.scatter_rows(e, &seg, &ones, t)?);

        let k = knowledge[i];
        let logits = tape.matmul(e, k.table_t)?;
        let att = tape.softmax(logits, 1)?;
        let global = tape.matmul(att, k.table)?;
        let local = tape.gather_rows(k.table, &flat)?;
        let both = tape.concat(&[local, global], 1)?;
        let z = tape.matmul(both, w_inj[i])?;
        parts.push(tape.scatter_rows(z, &seg, &ones, t)?);
    }
    Ok(VisitEncodings {
        v_o: tape.concat(&sums, 1)?,
        v_k: tape.concat(&parts, 1)?,
        parts,
    })
}

/// `[v_k; v_o] · w_v + b_v`.
pub fn fuse(tape: &mut Tape, v_k: Var, v_o: Var, w_v: Var, b_v: Var) -> Result<Var> {
    if tape.shape(v_k) != tape.shape(v_o) {
        return Err(Error::Shape {
            op: "fuse",
            lhs: tape.shape(v_k).to_vec(),
            rhs: tape.shape(v_o).to_vec(),
        });
    }
    let x = tape.concat(&[v_k, v_o], 1)?;
    let y = tape.matmul(x, w_v)?;
    tape.add(y, b_v)
}

/// `μ(x) = x · w + b`.
fn club_mean(tape: &mut Tape, v_o: Var, w: Var, b: Var) -> Result<Var> {
    let m = tape.matmul(v_o, w)?;
    tape.add(m, b)
}

/// CLUB upper bound over `S` paired rows of `v_o` and `v_k`:
/// `1/S² Σ_s Σ_r [log f(v_k^s | v_o^s) − log f(v_k^r | v_o^s)]` with
/// `log f(y|x) = −½‖y − μ(x)‖²`. Callers pass `w`, `b` as constants so no
/// gradient reaches the variational net.
pub fn club_mi_loss(tape: &mut Tape, v_o: Var, v_k: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.shape(v_o)[0];
    if s < 2 {
        return Ok(tape.constant(Tensor::zeros(&[1, 1])));
    }
    let sf = s as f64;
    let mu = club_mean(tape, v_o, w, b)?;

    // positive: Σ_s ‖v_k^s − μ_s‖², counted S times in the double sum
    let diff = tape.sub(v_k, mu)?;
    let sq = tape.mul(diff, diff)?;
    let pos = tape.sum_all(sq)?;

    // negative: Σ_s Σ_r ‖v_k^r − μ_s‖² = Σ (‖μ_s‖² + ‖v_k^r‖² − 2 μ_s·v_k^r)
    let mu_sq = tape.mul(mu, mu)?;
    let mu_norm = tape.reduce_sum(mu_sq, 1)?;
    let k_sq = tape.mul(v_k, v_k)?;
    let k_norm = tape.reduce_sum(k_sq, 1)?;
    let k_norm_row = tape.transpose(k_norm)?;
    let kt = tape.transpose(v_k)?;
    let cross = tape.matmul(mu, kt)?;
    let cross = tape.scale(cross, -2.0)?;
    let d = tape.add(cross, mu_norm)?;
    let d = tape.add(d, k_norm_row)?;
    let neg = tape.sum_all(d)?;

    // (1/S²)[−½·S·pos + ½·neg]
    let pos = tape.scale(pos, -0.5 * sf / (sf * sf))?;
    let neg = tape.scale(neg, 0.5 / (sf * sf))?;
    tape.add(pos, neg)
}

/// Mean negative log-likelihood `1/S Σ_s ½‖v_k^s − μ(v_o^s)‖²`.
pub fn club_nll(tape: &mut Tape, v_o: Var, v_k: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.shape(v_o)[0] as f64;
    let mu = club_mean(tape, v_o, w, b)?;
    let diff = tape.sub(v_k, mu)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq)?;
    tape.scale(total, 0.5 / s)
}

/// Gradient of the CLUB likelihood objective w.r.t. the variational net
/// only; `v_o`, `v_k` are plain values.
pub fn club_gradients(
    store: &ParamStore,
    v_o: &Tensor,
    v_k: &Tensor,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let xo = tape.constant(v_o.clone());
    let xk = tape.constant(v_k.clone());
    let w = tape.param(store, CLUB_W)?;
    let b = tape.param(store, CLUB_B)?;
    let loss = club_nll(&mut tape, xo, xk, w, b)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, grads.params().clone()))
}

/// One ascent step on the CLUB log-likelihood. Returns the negative
/// log-likelihood before the update.
pub fn club_fit_step(store: &mut ParamStore, adam: &mut AdamState, v_o: &Tensor, v_k: &Tensor) -> Result<f64> {
    if v_o.rows() == 0 || v_o.shape() != v_k.shape() {
        return Err(Error::Shape {
            op: "club_fit_step",
            lhs: v_o.shape().to_vec(),
            rhs: v_k.shape().to_vec(),
        });
    }
    let (nll, grads) = club_gradients(store, v_o, v_k)?;
    adam.step(store, &grads)?;
    Ok(nll)
}
