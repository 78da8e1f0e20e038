//! Soft alignment between premise and hypothesis states and enhancement of
//! the aligned pairs.

use crate::autodiff::{Graph, Var};
use crate::encoding::EncodedSequence;
use crate::error::{NliError, Result};
use crate::tensor::Tensor;

/// Additive score for masked positions; large enough that `exp` underflows
/// to exactly zero after the max shift.
pub const MASK_SCORE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSides {
    /// Premise positions attend over the hypothesis (produces `ã`).
    pub premise: bool,
    /// Hypothesis positions attend over the premise (produces `b̃`).
    pub hypothesis: bool,
}

impl Default for AttentionSides {
    fn default() -> Self {
        AttentionSides {
            premise: true,
            hypothesis: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// Raw dot-product scores `[ℓa, ℓb]`.
    pub scores: Var,
    /// Each row normalized over hypothesis positions, `[ℓa, ℓb]`.
    pub over_b: Var,
    /// Each row normalized over premise positions, `[ℓb, ℓa]`.
    pub over_a: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Aligned {
    pub attention: Attention,
    pub a_tilde: Var,
    pub b_tilde: Var,
}

/// `e = ā b̄ᵀ`: the plain dot product of every premise/hypothesis state pair.
pub fn attention_scores(g: &mut Graph, a: &EncodedSequence, b: &EncodedSequence) -> Result<Var> {
    let (av, bv) = (g.value(a.states), g.value(b.states));
    if av.cols() != bv.cols() {
        return Err(NliError::Shape {
            op: "attention_scores",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        });
    }
    g.matmul_t(a.states, false, b.states, true)
}

fn mask_row(mask: &[bool], rows: usize) -> Option<Tensor> {
    if mask.iter().all(|m| *m) {
        return None;
    }
    let row: Vec<f64> = mask.iter().map(|m| if *m { 0.0 } else { MASK_SCORE }).collect();
    let mut t = Tensor::zeros(rows, mask.len());
    for r in 0..rows {
        t.row_slice_mut(r).copy_from_slice(&row);
    }
    Some(t)
}

fn check_mask(seq: &EncodedSequence, rows: usize, side: &str) -> Result<()> {
    if seq.mask.len() != rows {
        return Err(NliError::contract(format!(
            "{side} mask has {} entries for {rows} states",
            seq.mask.len()
        )));
    }
    if !seq.mask.iter().any(|m| *m) {
        return Err(NliError::contract(format!("{side} has no valid positions")));
    }
    Ok(())
}

/// Normalizes `e` both ways and forms `ãᵢ = Σⱼ softmaxⱼ(eᵢ·) b̄ⱼ` and
/// `b̃ⱼ = Σᵢ softmaxᵢ(e·ⱼ) āᵢ`. A disabled side yields an all-zero aligned
/// matrix of the same shape.
pub fn align(
    g: &mut Graph,
    scores: Var,
    a: &EncodedSequence,
    b: &EncodedSequence,
    sides: AttentionSides,
) -> Result<Aligned> {
    let (la, lb) = (g.value(a.states).rows(), g.value(b.states).rows());
    let dim = g.value(a.states).cols();
    if g.value(scores).shape() != [la, lb] || g.value(b.states).cols() != dim {
        return Err(NliError::Shape {
            op: "align",
            left: g.value(scores).shape().to_vec(),
            right: vec![la, lb],
        });
    }
    check_mask(a, la, "premise")?;
    check_mask(b, lb, "hypothesis")?;

    let masked_b = match mask_row(&b.mask, la) {
        Some(m) => g.add_const(scores, &m)?,
        None => scores,
    };
    let over_b = g.softmax_rows(masked_b)?;
    let scores_t = g.transpose(scores)?;
    let masked_a = match mask_row(&a.mask, lb) {
        Some(m) => g.add_const(scores_t, &m)?,
        None => scores_t,
    };
    let over_a = g.softmax_rows(masked_a)?;

    let a_tilde = if sides.premise {
        g.matmul(over_b, b.states)?
    } else {
        g.constant(Tensor::zeros(la, dim))
    };
    let b_tilde = if sides.hypothesis {
        g.matmul(over_a, a.states)?
    } else {
        g.constant(Tensor::zeros(lb, dim))
    };
    Ok(Aligned {
        attention: Attention {
            scores,
            over_b,
            over_a,
        },
        a_tilde,
        b_tilde,
    })
}

/// `[x; x̃; x − x̃; x ⊙ x̃]`, or `[x; x̃]` without the difference and product.
pub fn enhance(g: &mut Graph, x: Var, x_tilde: Var, diff_prod: bool) -> Result<Var> {
    if g.value(x).shape() != g.value(x_tilde).shape() {
        return Err(NliError::Shape {
            op: "enhance",
            left: g.value(x).shape().to_vec(),
            right: g.value(x_tilde).shape().to_vec(),
        });
    }
    if !diff_prod {
        return g.concat(&[x, x_tilde], 1);
    }
    let diff = g.sub(x, x_tilde)?;
    let prod = g.mul(x, x_tilde)?;
    g.concat(&[x, x_tilde, diff, prod], 1)
}

/// Scores plus both alignments in one call.
pub fn soft_align(
    g: &mut Graph,
    a: &EncodedSequence,
    b: &EncodedSequence,
    sides: AttentionSides,
) -> Result<Aligned> {
    let e = attention_scores(g, a, b)?;
    align(g, e, a, b, sides)
}

/// Alignment over every node of two encoded trees; rows and columns are the
/// preorder node ids.
pub fn tree_node_alignment(
    g: &mut Graph,
    premise: &EncodedSequence,
    hypothesis: &EncodedSequence,
    sides: AttentionSides,
) -> Result<Aligned> {
    soft_align(g, premise, hypothesis, sides)
}
