//! Knowledge-based code embeddings from the concept graph.
//!
//! Concepts average `relation ⊙ tail` over their outgoing triples. Codes
//! average, over their filter-expanded concept links, the filter embedding
//! times the concept embedding, weighted by a per-code softmax over filters.
//! Each filter embedding is a learned convex mix of relation embeddings.
//! Nodes without neighbours carry their previous-layer embedding forward.

use crate::error::Result;
use crate::kg::NeighborIndex;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Dependence below this distance variance is treated as undefined.
pub const DVAR_FLOOR: f64 = 1e-12;

/// `softmax(filter_w, over relations) · relation_table`, shape `|F| × dim`.
pub fn filter_embeddings(tape: &mut Tape, filter_w: Var, relations: Var) -> Result<Var> {
    let mix = tape.softmax(filter_w, 1)?;
    tape.matmul(mix, relations)
}

/// `out[rows] = table[rows] ⊙ mask + aggregated`, where mask is 1 on rows
/// that had no neighbours.
fn carry_forward(tape: &mut Tape, aggregated: Var, prev: Var, isolated: &[bool]) -> Result<Var> {
    if !isolated.iter().any(|&b| b) {
        return Ok(aggregated);
    }
    let mask = Tensor::from_parts(
        vec![isolated.len(), 1],
        isolated.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    );
    let mask = tape.constant(mask);
    let kept = tape.mul(prev, mask)?;
    tape.add(aggregated, kept)
}

/// One layer over the concept graph.
pub fn aggregate_umls_layer(
    tape: &mut Tape,
    prev_concepts: Var,
    relations: Var,
    index: &NeighborIndex,
) -> Result<Var> {
    let n = tape.shape(prev_concepts)[0];
    let (mut heads, mut rels, mut tails, mut weights) = (vec![], vec![], vec![], vec![]);
    for (h, neigh) in index.by_head.iter().enumerate() {
        let w = 1.0 / neigh.len() as f64;
        for &(r, t) in neigh {
            heads.push(h);
            rels.push(r);
            tails.push(t);
            weights.push(w);
        }
    }
    if heads.is_empty() {
        return Ok(prev_concepts);
    }
    let er = tape.gather_rows(relations, &rels)?;
    let et = tape.gather_rows(prev_concepts, &tails)?;
    let msg = tape.mul(er, et)?;
    let agg = tape.scatter_rows(msg, &heads, &weights, n)?;
    let isolated: Vec<bool> = (0..n)
        .map(|h| index.by_head.get(h).is_none_or(Vec::is_empty))
        .collect();
    carry_forward(tape, agg, prev_concepts, &isolated)
}

/// Output of one filter layer.
#[derive(Clone, Copy, Debug)]
pub struct FilterLayer {
    pub codes: Var,
    /// `codes × |F|` filter attention, softmax over filters per code.
    pub attention: Var,
}

/// One layer over the filter-expanded code graph.
pub fn aggregate_filter_layer(
    tape: &mut Tape,
    prev_codes: Var,
    concepts: Var,
    filters: Var,
    index: &NeighborIndex,
) -> Result<FilterLayer> {
    let n = tape.shape(prev_codes)[0];
    let num_filters = tape.shape(filters)[0];
    let ft = tape.transpose(filters)?;
    let logits = tape.matmul(prev_codes, ft)?;
    let attention = tape.softmax(logits, 1)?;

    let (mut codes, mut filt, mut cons, mut flat, mut weights) = (vec![], vec![], vec![], vec![], vec![]);
    for (c, neigh) in index.by_code.iter().enumerate() {
        let w = 1.0 / neigh.len() as f64;
        for &(f, u) in neigh {
            codes.push(c);
            filt.push(f);
            cons.push(u);
            flat.push(c * num_filters + f);
            weights.push(w);
        }
    }
    if codes.is_empty() {
        return Ok(FilterLayer {
            codes: prev_codes,
            attention,
        });
    }
    let att = tape.gather_flat(attention, &flat)?;
    let ef = tape.gather_rows(filters, &filt)?;
    let eu = tape.gather_rows(concepts, &cons)?;
    let msg = tape.mul(ef, eu)?;
    let msg = tape.mul(msg, att)?;
    let agg = tape.scatter_rows(msg, &codes, &weights, n)?;
    let isolated: Vec<bool> = (0..n)
        .map(|c| index.by_code.get(c).is_none_or(Vec::is_empty))
        .collect();
    Ok(FilterLayer {
        codes: carry_forward(tape, agg, prev_codes, &isolated)?,
        attention,
    })
}

/// Parameter leaves of the graph branch.
#[derive(Clone, Copy, Debug)]
pub struct KgParams {
    pub concepts: Var,
    pub relations: Var,
    pub codes: Var,
    pub filter_w: Var,
}

#[derive(Clone, Debug)]
pub struct KnowledgeTables {
    /// Final-layer code table (all code types plus PAD).
    pub codes: Var,
    pub filters: Var,
    /// Filter attention of every layer, first layer first.
    pub attention: Vec<Var>,
}

/// Runs `layers` alternating concept/code layers.
pub fn build_knowledge_tables(
    tape: &mut Tape,
    params: KgParams,
    index: &NeighborIndex,
    layers: usize,
) -> Result<KnowledgeTables> {
    let filters = filter_embeddings(tape, params.filter_w, params.relations)?;
    let mut concepts = params.concepts;
    let mut codes = params.codes;
    let mut attention = Vec::with_capacity(layers);
    for _ in 0..layers {
        let layer = aggregate_filter_layer(tape, codes, concepts, filters, index)?;
        concepts = aggregate_umls_layer(tape, concepts, params.relations, index)?;
        codes = layer.codes;
        attention.push(layer.attention);
    }
    Ok(KnowledgeTables {
        codes,
        filters,
        attention,
    })
}

/// Double-centred pairwise distance matrix of a `1 × n` row.
fn centred_distances(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.shape(x)[1] as f64;
    let col = tape.transpose(x)?;
    let diff = tape.sub(col, x)?;
    let a = tape.abs(diff)?;
    let row_sum = tape.reduce_sum(a, 1)?;
    let row_mean = tape.scale(row_sum, 1.0 / n)?;
    let col_sum = tape.reduce_sum(a, 0)?;
    let col_mean = tape.scale(col_sum, 1.0 / n)?;
    let grand = tape.mean_all(a)?;
    let t = tape.sub(a, row_mean)?;
    let t = tape.sub(t, col_mean)?;
    tape.add(t, grand)
}

/// Squared sample distance covariance of two centred matrices.
fn dcov_sq(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let p = tape.mul(a, b)?;
    tape.mean_all(p)
}

/// Sum over ordered filter pairs `i ≠ j` of their distance correlation,
/// treating each embedding's coordinates as scalar samples.
pub fn independence_loss(tape: &mut Tape, filters: Var) -> Result<Var> {
    let k = tape.shape(filters)[0];
    let zero = tape.constant(Tensor::zeros(&[1, 1]));
    if k < 2 {
        return Ok(zero);
    }
    let mut centred = Vec::with_capacity(k);
    let mut dvar = Vec::with_capacity(k);
    for i in 0..k {
        let row = tape.slice(filters, 0, i, 1)?;
        let a = centred_distances(tape, row)?;
        let v2 = dcov_sq(tape, a, a)?;
        let v2 = tape.clamp(v2, 0.0, f64::INFINITY)?;
        let sd = tape.sqrt(v2)?;
        centred.push(a);
        dvar.push(sd);
    }
    let mut total = zero;
    for i in 0..k {
        for j in i + 1..k {
            let vi = tape.value(dvar[i]).item()?;
            let vj = tape.value(dvar[j]).item()?;
            if vi < DVAR_FLOOR || vj < DVAR_FLOOR {
                continue;
            }
            let v2 = dcov_sq(tape, centred[i], centred[j])?;
            let v2 = tape.clamp(v2, 0.0, f64::INFINITY)?;
            let cov = tape.sqrt(v2)?;
            let prod = tape.mul(dvar[i], dvar[j])?;
            let denom = tape.sqrt(prod)?;
            let dcor = tape.div(cov, denom)?;
            // (i, j) and (j, i) both count
            let both = tape.scale(dcor, 2.0)?;
            total = tape.add(total, both)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{build_filter_graph, CodeConceptMap, KnowledgeGraph};

    fn c(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn single_relation_filters_equal_that_relation() {
        let mut tape = Tape::new();
        let w = c(&mut tape, &[vec![0.3], vec![-2.0]]);
        let r = c(&mut tape, &[vec![1.0, -1.0, 0.5]]);
        let f = filter_embeddings(&mut tape, w, r).unwrap();
        assert_eq!(tape.value(f).data(), &[1.0, -1.0, 0.5, 1.0, -1.0, 0.5]);
    }

    #[test]
    fn filter_mix_by_hand() {
        let mut tape = Tape::new();
        let w = c(&mut tape, &[vec![2f64.ln(), 0.0]]);
        let r = c(&mut tape, &[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let f = filter_embeddings(&mut tape, w, r).unwrap();
        let got = tape.value(f).data();
        assert!((got[0] - 4.0 / 3.0).abs() < 1e-12 && (got[1] - 2.0 / 3.0).abs() < 1e-12);

        let w = c(&mut tape, &[vec![0.7, 0.7, 0.7]]);
        let r = c(&mut tape, &[vec![1.5, -3.0], vec![1.5, -3.0], vec![1.5, -3.0]]);
        let f = filter_embeddings(&mut tape, w, r).unwrap();
        for (g, want) in tape.value(f).data().iter().zip([1.5, -3.0]) {
            assert!((g - want).abs() < 1e-12);
        }
    }

    fn index(triples: &[(&str, &str, &str)], pairs: Vec<(usize, usize)>, filters: usize, codes: usize) -> NeighborIndex {
        let kg = KnowledgeGraph::from_triples(triples.iter().copied());
        let map = CodeConceptMap {
            pairs,
            skipped_unknown_codes: 0,
        };
        build_filter_graph(&kg, &map, filters, codes).unwrap().1
    }

    #[test]
    fn umls_layer_examples() {
        // concept 0 -> concept 1 via relation 0
        let idx = index(&[("h", "r", "t")], vec![], 1, 1);
        let mut tape = Tape::new();
        let concepts = c(&mut tape, &[vec![9.0, 9.0], vec![2.0, 3.0]]);
        let rel = c(&mut tape, &[vec![1.0, 1.0]]);
        let out = aggregate_umls_layer(&mut tape, concepts, rel, &idx).unwrap();
        // head gets [2,3]; the tail has no outgoing triple and is carried forward
        assert_eq!(tape.value(out).data(), &[2.0, 3.0, 2.0, 3.0]);

        let idx = index(&[("h", "r0", "a"), ("h", "r1", "b")], vec![], 1, 1);
        let concepts = c(&mut tape, &[vec![0.0, 0.0], vec![2.0, 3.0], vec![4.0, 5.0]]);
        let rel = c(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = aggregate_umls_layer(&mut tape, concepts, rel, &idx).unwrap();
        assert_eq!(&tape.value(out).data()[..2], &[1.0, 2.5]);
        assert_eq!(&tape.value(out).data()[2..], &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn filter_layer_examples() {
        // code 0 mapped to concept 1; code 1 unmapped
        let idx = index(&[("a", "r", "b")], vec![(0, 1)], 1, 2);
        let mut tape = Tape::new();
        let codes = c(&mut tape, &[vec![0.1, 0.2], vec![7.0, 8.0]]);
        let concepts = c(&mut tape, &[vec![1.0, 1.0], vec![3.0, -1.0]]);
        let filters = c(&mut tape, &[vec![0.5, 2.0]]);
        let out = aggregate_filter_layer(&mut tape, codes, concepts, filters, &idx).unwrap();
        assert_eq!(tape.value(out.codes).data(), &[1.5, -2.0, 7.0, 8.0]);

        // two filters with equal logits: e_c = 1/2 * sum_i 1/2 * e_Fi ⊙ e_u
        let idx = index(&[("a", "r", "b")], vec![(0, 0)], 2, 1);
        let codes = c(&mut tape, &[vec![0.0, 0.0]]);
        let concepts = c(&mut tape, &[vec![2.0, 4.0], vec![0.0, 0.0]]);
        let filters = c(&mut tape, &[vec![1.0, 3.0], vec![-1.0, 5.0]]);
        let out = aggregate_filter_layer(&mut tape, codes, concepts, filters, &idx).unwrap();
        let want = [0.25 * (2.0 - 2.0), 0.25 * (12.0 + 20.0)];
        assert_eq!(tape.value(out.codes).data(), &want);
        let att = tape.value(out.attention).data();
        assert!((att[0] + att[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_code_map_keeps_base_codes() {
        let idx = index(&[("a", "r", "b")], vec![], 3, 2);
        let mut tape = Tape::new();
        let params = KgParams {
            concepts: c(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0]]),
            relations: c(&mut tape, &[vec![0.5, 0.5]]),
            codes: c(&mut tape, &[vec![5.0, 6.0], vec![7.0, 8.0]]),
            filter_w: c(&mut tape, &[vec![0.0], vec![1.0], vec![2.0]]),
        };
        let t = build_knowledge_tables(&mut tape, params, &idx, 2).unwrap();
        assert_eq!(tape.value(t.codes).data(), &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(t.attention.len(), 2);
    }

    #[test]
    fn independence_loss_examples() {
        let mut tape = Tape::new();
        let same = c(&mut tape, &[vec![1.0, 3.0, -2.0, 0.5], vec![1.0, 3.0, -2.0, 0.5]]);
        let l = independence_loss(&mut tape, same).unwrap();
        assert!((tape.value(l).item().unwrap() - 2.0).abs() < 1e-12);

        let constant = c(&mut tape, &[vec![1.0, 3.0, -2.0, 0.5], vec![4.0, 4.0, 4.0, 4.0]]);
        let l = independence_loss(&mut tape, constant).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);

        let single = c(&mut tape, &[vec![1.0, 2.0]]);
        let l = independence_loss(&mut tape, single).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn independence_loss_is_permutation_invariant() {
        let rows = vec![
            vec![0.3, -1.2, 0.8, 2.0, -0.1],
            vec![1.1, 0.4, -0.6, 0.2, 0.9],
            vec![-0.5, 0.5, 1.5, -1.0, 0.0],
        ];
        let mut tape = Tape::new();
        let a = c(&mut tape, &rows);
        let la = independence_loss(&mut tape, a).unwrap();
        let b = c(&mut tape, &[rows[2].clone(), rows[0].clone(), rows[1].clone()]);
        let lb = independence_loss(&mut tape, b).unwrap();
        let (x, y) = (tape.value(la).item().unwrap(), tape.value(lb).item().unwrap());
        assert!((x - y).abs() < 1e-12);
    }
}
