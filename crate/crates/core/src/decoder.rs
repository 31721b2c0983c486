//! History-aware decoding and the medication output layer.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// `D_v × dim`
    pub w_q: Var,
    /// `dim × dim`
    pub w_k: Var,
    /// `dim × D_v`
    pub w_val: Var,
}

/// Attends from the fused visit vector over earlier medication vectors and
/// adds the result back onto it. An empty history returns `v` unchanged.
pub fn history_attention(tape: &mut Tape, v: Var, history: &[Var], p: AttentionParams) -> Result<Var> {
    Ok(history_attention_weights(tape, v, history, p)?.0)
}

/// As [`history_attention`], also returning the `1 × h` attention weights.
pub fn history_attention_weights(
    tape: &mut Tape,
    v: Var,
    history: &[Var],
    p: AttentionParams,
) -> Result<(Var, Option<Var>)> {
    if history.is_empty() {
        return Ok((v, None));
    }
    let dim = tape.shape(p.w_k)[0];
    if let Some(&bad) = history.iter().find(|&&h| tape.shape(h) != [1, dim]) {
        return Err(Error::Shape {
            op: "history_attention",
            lhs: tape.shape(bad).to_vec(),
            rhs: vec![1, dim],
        });
    }
    let keys_in = tape.concat(history, 0)?;
    let q = tape.matmul(v, p.w_q)?;
    let k = tape.matmul(keys_in, p.w_k)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dim as f64).sqrt())?;
    let weights = tape.softmax(scores, 1)?;
    let ctx = tape.matmul(weights, keys_in)?;
    let back = tape.matmul(ctx, p.w_val)?;
    Ok((tape.add(back, v)?, Some(weights)))
}

/// `σ(v̂ · w_y + b_y)`.
pub fn predict_scores(tape: &mut Tape, v_hat: Var, w_y: Var, b_y: Var) -> Result<Var> {
    let logits = tape.matmul(v_hat, w_y)?;
    let logits = tape.add(logits, b_y)?;
    tape.sigmoid(logits)
}

/// Indices with score at least `eta` (inclusive).
pub fn threshold_select(scores: &[f64], eta: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= eta)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn c(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    fn params(tape: &mut Tape) -> AttentionParams {
        AttentionParams {
            w_q: c(tape, &[vec![1.0, 0.5], vec![-0.3, 0.2], vec![0.7, 0.1]]),
            w_k: c(tape, &[vec![0.4, -1.0], vec![0.9, 0.3]]),
            w_val: c(tape, &[vec![1.0, 0.0, 2.0], vec![0.5, -1.0, 0.0]]),
        }
    }

    #[test]
    fn empty_history_is_identity() {
        let mut tape = Tape::new();
        let p = params(&mut tape);
        let v = c(&mut tape, &[vec![0.1, 0.2, 0.3]]);
        assert_eq!(history_attention(&mut tape, v, &[], p).unwrap(), v);
    }

    #[test]
    fn single_entry_gets_full_weight() {
        let mut tape = Tape::new();
        let p = params(&mut tape);
        let v = c(&mut tape, &[vec![0.1, 0.2, 0.3]]);
        let h = c(&mut tape, &[vec![2.0, -1.0]]);
        let (out, w) = history_attention_weights(&mut tape, v, &[h], p).unwrap();
        assert_eq!(tape.value(w.unwrap()).data(), &[1.0]);
        // [2,-1]·w_val = [1.5, 1, 4]
        let want = [1.6, 1.2, 4.3];
        for (g, e) in tape.value(out).data().iter().zip(want) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_entries_split_weight_evenly() {
        let mut tape = Tape::new();
        let p = params(&mut tape);
        let v = c(&mut tape, &[vec![0.1, 0.2, 0.3]]);
        let h = c(&mut tape, &[vec![2.0, -1.0]]);
        let h2 = c(&mut tape, &[vec![2.0, -1.0]]);
        let (one, _) = history_attention_weights(&mut tape, v, &[h], p).unwrap();
        let (two, w) = history_attention_weights(&mut tape, v, &[h, h2], p).unwrap();
        assert_eq!(tape.value(w.unwrap()).data(), &[0.5, 0.5]);
        for (a, b) in tape.value(one).data().iter().zip(tape.value(two).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_history_permutes_weights() {
        let mut tape = Tape::new();
        let p = params(&mut tape);
        let v = c(&mut tape, &[vec![0.4, -0.2, 1.0]]);
        let hs: Vec<Var> = [[1.0, 0.0], [0.0, 2.0], [-1.0, 0.5]]
            .iter()
            .map(|r| c(&mut tape, &[r.to_vec()]))
            .collect();
        let (_, w) = history_attention_weights(&mut tape, v, &hs, p).unwrap();
        let (_, wp) = history_attention_weights(&mut tape, v, &[hs[2], hs[0], hs[1]], p).unwrap();
        let w = tape.value(w.unwrap()).data().to_vec();
        let wp = tape.value(wp.unwrap()).data().to_vec();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in [(2, 0), (0, 1), (1, 2)] {
            assert!((w[a] - wp[b]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_value_projection_is_pure_residual() {
        let mut tape = Tape::new();
        let mut p = params(&mut tape);
        p.w_val = tape.constant(Tensor::zeros(&[2, 3]));
        let v = c(&mut tape, &[vec![0.1, 0.2, 0.3]]);
        let h = c(&mut tape, &[vec![2.0, -1.0]]);
        let out = history_attention(&mut tape, v, &[h], p).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(v).data());
    }

    #[test]
    fn wrong_history_width_is_rejected() {
        let mut tape = Tape::new();
        let p = params(&mut tape);
        let v = c(&mut tape, &[vec![0.1, 0.2, 0.3]]);
        let h = c(&mut tape, &[vec![2.0, -1.0, 0.0]]);
        assert!(history_attention(&mut tape, v, &[h], p).is_err());
    }

    #[test]
    fn output_layer_examples() {
        let mut tape = Tape::new();
        let v = c(&mut tape, &[vec![0.3, -0.7]]);
        let w0 = tape.constant(Tensor::zeros(&[2, 3]));
        let b0 = tape.constant(Tensor::zeros(&[1, 3]));
        let y = predict_scores(&mut tape, v, w0, b0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5]);

        let w = c(&mut tape, &[vec![1.0, 0.0], vec![2.0, -1.0]]);
        let b = c(&mut tape, &[vec![0.1, 0.2]]);
        let y = predict_scores(&mut tape, v, w, b).unwrap();
        let logits = [0.3 - 1.4 + 0.1, 0.7 + 0.2];
        for (g, l) in tape.value(y).data().iter().zip(logits) {
            assert!((g - 1.0 / (1.0 + (-l as f64).exp())).abs() < 1e-15);
        }

        let mut prev = 0.0;
        for bias in [0.0, 1.0, 5.0, 20.0] {
            let b = c(&mut tape, &[vec![bias, 0.0, 0.0]]);
            let y = predict_scores(&mut tape, v, w0, b).unwrap();
            let s = tape.value(y).data()[0];
            assert!(s > prev);
            prev = s;
        }
        assert!(prev > 1.0 - 1e-8);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_select(&[0.7, 0.4, 0.5], 0.5), vec![0, 2]);
        assert!(threshold_select(&[0.1, 0.2], 0.5).is_empty());
        assert_eq!(threshold_select(&[0.5], 0.5), vec![0]);
    }
}
