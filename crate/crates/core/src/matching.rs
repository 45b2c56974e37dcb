//! Proposal/expression matching scores and the hinge loss with an online
//! hard negative.

use crate::error::{DgaError, Result};
use crate::tensor::{ParamId, ParameterStore, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct MatchParams {
    pub w_c0: ParamId,
    pub w_c1: ParamId,
}

impl MatchParams {
    pub fn bind(store: &ParameterStore) -> Result<Self> {
        Ok(MatchParams {
            w_c0: store.require("match.w_c0")?,
            w_c1: store.require("match.w_c1")?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MatchResult {
    /// K cosine scores.
    pub scores: Var,
    pub predicted: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Cosine between the projected memory of each node and the projected
/// expression vector.
pub fn matching_scores(tape: &mut Tape, p: &MatchParams, memories: Var, expression: Var) -> Result<MatchResult> {
    let k = tape.value(memories).rows();
    if k < 2 {
        return Err(DgaError::contract(format!("matching needs K ≥ 2, got {k}")));
    }
    let w_c0 = tape.param(p.w_c0);
    let w_c1 = tape.param(p.w_c1);
    let nodes = tape.matmul_t(memories, w_c0)?;
    let nodes = tape.l2_normalize_rows(nodes);
    let query = tape.matmul_t(expression, w_c1)?;
    let query = tape.l2_normalize_rows(query);
    let scores = tape.matmul_t(nodes, query)?;
    let scores = tape.reshape(scores, &[k])?;
    let predicted = argmax(tape.data(scores)).expect("k ≥ 2");
    Ok(MatchResult { scores, predicted })
}

/// Highest-scoring proposal other than `gt`.
pub fn hardest_negative(scores: &[f64], gt: usize) -> Result<usize> {
    if scores.len() < 2 {
        return Err(DgaError::contract("triplet loss needs at least one negative"));
    }
    if gt >= scores.len() {
        return Err(DgaError::contract(format!("gt {gt} out of {} proposals", scores.len())));
    }
    let mut best = None::<(usize, f64)>;
    for (i, &s) in scores.iter().enumerate() {
        if i != gt && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    Ok(best.expect("K ≥ 2").0)
}

/// `max(score_neg + margin − score_gt, 0)` on plain values.
pub fn triplet_loss_value(scores: &[f64], gt: usize, margin: f64) -> Result<f64> {
    let neg = hardest_negative(scores, gt)?;
    Ok(((scores[neg] + margin) - scores[gt]).max(0.0))
}

/// Differentiable version of [`triplet_loss_value`]; the negative is mined
/// from the current scores.
pub fn triplet_loss(tape: &mut Tape, scores: Var, gt: usize, margin: f64) -> Result<Var> {
    let neg = hardest_negative(tape.data(scores), gt)?;
    let s_neg = tape.element(scores, neg)?;
    let s_gt = tape.element(scores, gt)?;
    let shifted = tape.affine(s_neg, 1.0, margin);
    let gap = tape.sub(shifted, s_gt)?;
    Ok(tape.relu(gap))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss_value(&[0.9, 0.5, 0.1], 0, 0.1).unwrap(), 0.0);
        let l = triplet_loss_value(&[0.3, 0.4, -0.2], 0, 0.1).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
        assert!(triplet_loss_value(&[0.3], 0, 0.1).is_err());
        assert!(triplet_loss_value(&[0.3, 0.1], 2, 0.1).is_err());
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), Some(1));
        assert_eq!(argmax(&[]), None);
        assert_eq!(hardest_negative(&[0.5, 0.5, 0.5], 0).unwrap(), 1);
    }
}
