//! In-batch debiased softmax cross-entropy.
//!
//! Every (user, step) term scores its positive against the in-batch items
//! the user has not interacted with. Each logit is shifted by `−ln p` before
//! the softmax; the loss is the mean of `−log softmax(positive)` over terms.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// One loss term: a logits row, its positive column and the columns that
/// must not act as negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossTerm {
    pub row: usize,
    pub positive: usize,
    /// `excluded[c]` is true when candidate `c` is in the user's history.
    pub excluded: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// `d loss / d logits`, row-major, same shape as the logits.
    pub grad: Vec<f64>,
}

/// `logits` is `[rows, n]` over candidates `candidate_ids` (distinct); sums
/// run in ascending id order so the result does not depend on column order.
pub fn inbatch_debiased_ce<T: Real>(
    logits: &Tensor<T>,
    candidate_ids: &[u64],
    popularity: &[f64],
    terms: &[LossTerm],
) -> Result<LossOutput> {
    let (rows, n) = logits.dims2();
    if candidate_ids.len() != n || popularity.len() != n {
        return Err(Error::dim("inbatch_debiased_ce", logits.shape(), &[candidate_ids.len(), popularity.len()]));
    }
    if terms.is_empty() {
        return Err(Error::Input("loss batch has no terms".into()));
    }
    if let Some(c) = popularity.iter().position(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::Domain(format!("popularity of item {} is {}", candidate_ids[c], popularity[c])));
    }
    if logits.data().iter().any(|v| v.as_f64().is_nan()) {
        return Err(Error::Contract("NaN logit".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&c| candidate_ids[c]);
    let log_p: Vec<f64> = popularity.iter().map(|p| p.ln()).collect();

    let inv = 1.0 / terms.len() as f64;
    let mut grad = vec![0.0; rows * n];
    let mut total = 0.0;
    let mut z = vec![0.0; n];
    for t in terms {
        if t.row >= rows || t.positive >= n || t.excluded.len() != n {
            return Err(Error::Contract(format!(
                "loss term (row {}, positive {}) outside a {rows}x{n} batch",
                t.row, t.positive
            )));
        }
        let live = |c: usize| c == t.positive || !t.excluded[c];
        let row = logits.row_slice(t.row);
        let mut max = f64::NEG_INFINITY;
        for &c in &order {
            if live(c) {
                z[c] = row[c].as_f64() - log_p[c];
                max = max.max(z[c]);
            }
        }
        let mut s = 0.0;
        for &c in &order {
            if live(c) {
                s += (z[c] - max).exp();
            }
        }
        total += s.ln() + max - z[t.positive];
        let g = &mut grad[t.row * n..(t.row + 1) * n];
        for &c in &order {
            if live(c) {
                g[c] += inv * (z[c] - max).exp() / s;
            }
        }
        g[t.positive] -= inv;
    }
    Ok(LossOutput { loss: total * inv, grad })
}

/// Records the loss on `tape` as a function of `logits`.
pub fn debiased_ce_on_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    candidate_ids: &[u64],
    popularity: &[f64],
    terms: &[LossTerm],
) -> Result<Var> {
    let out = inbatch_debiased_ce(tape.value(logits), candidate_ids, popularity, terms)?;
    let grad = out.grad.into_iter().map(T::lit).collect();
    tape.fused_scalar(logits, out.loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn term(row: usize, positive: usize, excluded: &[bool]) -> LossTerm {
        LossTerm {
            row,
            positive,
            excluded: excluded.to_vec(),
        }
    }

    /// Unstabilised `−ln(exp(z_pos) / Σ exp(z_c))`, averaged over terms.
    fn oracle(logits: &[Vec<f64>], p: &[f64], terms: &[LossTerm]) -> f64 {
        let mut total = 0.0;
        for t in terms {
            let e = |c: usize| (logits[t.row][c] - p[c].ln()).exp();
            let denom: f64 = (0..p.len()).filter(|&c| c == t.positive || !t.excluded[c]).map(e).sum();
            total -= (e(t.positive) / denom).ln();
        }
        total / terms.len() as f64
    }

    #[test]
    fn positive_only_is_zero() {
        let l = Tensor::<f64>::from_rows(&[vec![3.0, -1.0, 2.0]]).unwrap();
        let out = inbatch_debiased_ce(&l, &[1, 2, 3], &[0.2, 0.3, 0.5], &[term(0, 0, &[false, true, true])]).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn symmetric_pair_is_ln2() {
        let l = Tensor::<f64>::from_rows(&[vec![0.7, 0.7]]).unwrap();
        let out = inbatch_debiased_ce(&l, &[4, 9], &[0.5, 0.5], &[term(0, 1, &[false, false])]).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
        assert!((out.grad[0] - 0.5).abs() < 1e-15 && (out.grad[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let l = Tensor::<f64>::from_rows(&[vec![0.0, f64::NAN]]).unwrap();
        let t = [term(0, 0, &[false, false])];
        assert!(matches!(inbatch_debiased_ce(&l, &[1, 2], &[0.5, 0.5], &t), Err(Error::Contract(_))));
        let l = Tensor::<f64>::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(inbatch_debiased_ce(&l, &[1, 2], &[0.5, 0.0], &t), Err(Error::Domain(_))));
        assert!(inbatch_debiased_ce(&l, &[1, 2], &[0.5, 0.5], &[]).is_err());
    }

    #[test]
    fn raising_negative_popularity_lowers_loss() {
        let l = Tensor::<f64>::from_rows(&[vec![1.0, 0.5, 0.2]]).unwrap();
        let t = [term(0, 0, &[false; 3])];
        let lo = inbatch_debiased_ce(&l, &[1, 2, 3], &[0.3, 0.3, 0.4], &t).unwrap().loss;
        let hi = inbatch_debiased_ce(&l, &[1, 2, 3], &[0.3, 0.6, 0.4], &t).unwrap().loss;
        assert!(hi < lo);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let rows = vec![vec![0.3, -0.2, 1.1, 0.4], vec![-0.5, 0.9, 0.0, 0.2]];
        let p = [0.1, 0.2, 0.3, 0.4];
        let terms = [
            term(0, 2, &[false, true, false, false]),
            term(1, 1, &[false, false, false, true]),
            term(0, 0, &[false; 4]),
        ];
        let l = Tensor::<f64>::from_rows(&rows).unwrap();
        let out = inbatch_debiased_ce(&l, &[10, 11, 12, 13], &p, &terms).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            let (r, c) = (i / 4, i % 4);
            let mut up = rows.clone();
            up[r][c] += h;
            let mut dn = rows.clone();
            dn[r][c] -= h;
            let num = (oracle(&up, &p, &terms) - oracle(&dn, &p, &terms)) / (2.0 * h);
            assert!((num - out.grad[i]).abs() < 1e-8, "{i}: {num} vs {}", out.grad[i]);
        }
    }

    proptest! {
        #[test]
        fn column_order_does_not_matter(
            vals in proptest::collection::vec(-5.0f64..5.0, 6),
            pops in proptest::collection::vec(0.01f64..1.0, 6),
            shift in 1usize..6,
        ) {
            let ids: Vec<u64> = (100..106).collect();
            let excl = [false, true, false, false, true, false];
            let l = Tensor::<f64>::row(vals.clone());
            let a = inbatch_debiased_ce(&l, &ids, &pops, &[term(0, 2, &excl)]).unwrap();
            let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
            let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let ids2: Vec<u64> = perm.iter().map(|&i| ids[i]).collect();
            let excl2: Vec<bool> = perm.iter().map(|&i| excl[i]).collect();
            let pos2 = perm.iter().position(|&i| i == 2).unwrap();
            let b = inbatch_debiased_ce(&Tensor::row(pick(&vals)), &ids2, &pick(&pops), &[term(0, pos2, &excl2)]).unwrap();
            prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }

        #[test]
        fn matches_unstabilised_oracle(
            vals in proptest::collection::vec(-8.0f64..8.0, 32),
            pops in proptest::collection::vec(0.001f64..1.0, 8),
            masks in proptest::collection::vec(proptest::bool::ANY, 32),
            pos in proptest::collection::vec(0usize..8, 4),
        ) {
            let rows: Vec<Vec<f64>> = vals.chunks(8).map(<[f64]>::to_vec).collect();
            let terms: Vec<LossTerm> = (0..4).map(|r| term(r, pos[r], &masks[r * 8..r * 8 + 8])).collect();
            let l = Tensor::<f64>::from_rows(&rows).unwrap();
            let out = inbatch_debiased_ce(&l, &(0..8).collect::<Vec<_>>(), &pops, &terms).unwrap();
            prop_assert!((out.loss - oracle(&rows, &pops, &terms)).abs() < 1e-6);
        }
    }
}
