//! Chain LSTM / BiLSTM encoders and the binary tree-LSTM memory block.
//!
//! Row-vector convention throughout: a layer computes `x W + h U + b` with
//! `W: [input, gates * hidden]`. Gate blocks are packed column-wise.
//!
//! Sequence batches are time-major: row `t * B + s` holds sentence `s` at
//! step `t`, padded with the padding embedding past each sentence's length.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::corpus::ParseTree;
use crate::error::{NliError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Sentence states plus a validity flag per row.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub states: Var,
    pub mask: Vec<bool>,
}

// ---- chain LSTM -----------------------------------------------------------

/// Gate column order: input, forget, output, candidate.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w: ParamId,
    pub u: ParamId,
    pub b: Option<ParamId>,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        biases: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.insert(
            format!("{prefix}.W"),
            Tensor::glorot(input_dim, 4 * hidden, input_dim, hidden, rng),
        )?;
        let u = store.insert(
            format!("{prefix}.U"),
            Tensor::glorot(hidden, 4 * hidden, hidden, hidden, rng),
        )?;
        let b = if biases {
            Some(store.insert(format!("{prefix}.b"), Tensor::zeros(1, 4 * hidden))?)
        } else {
            None
        };
        Ok(LstmParams {
            w,
            u,
            b,
            input_dim,
            hidden,
        })
    }
}

pub struct CellOutput {
    pub h: Var,
    pub c: Var,
    pub input_gate: Var,
}

/// One LSTM cell given the projected input `x W (+ b)`.
/// `prev = None` stands for zero previous state and cell.
fn lstm_cell(
    g: &mut Graph,
    projected: Var,
    u: Var,
    hidden: usize,
    prev: Option<(Var, Var)>,
) -> Result<CellOutput> {
    let pre = match prev {
        Some((h, _)) => {
            let hu = g.matmul(h, u)?;
            g.add(projected, hu)?
        }
        None => projected,
    };
    let gi = g.slice(pre, 1, 0, hidden)?;
    let i = g.sigmoid(gi);
    let go = g.slice(pre, 1, 2 * hidden, hidden)?;
    let o = g.sigmoid(go);
    let gu = g.slice(pre, 1, 3 * hidden, hidden)?;
    let cand = g.tanh(gu);
    let mut c = g.mul(i, cand)?;
    if let Some((_, c_prev)) = prev {
        let gf = g.slice(pre, 1, hidden, hidden)?;
        let f = g.sigmoid(gf);
        let kept = g.mul(f, c_prev)?;
        c = g.add(kept, c)?;
    }
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(CellOutput { h, c, input_gate: i })
}

/// A single LSTM step: `i, f, o = σ(·)`, `u = tanh(·)`, `c = f⊙c_prev + i⊙u`,
/// `h = o⊙tanh(c)`. Rows of `x`, `h_prev`, `c_prev` are batch items.
pub fn lstm_step(
    g: &mut Graph,
    store: &ParamStore,
    p: &LstmParams,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let (xv, hv, cv) = (g.value(x), g.value(h_prev), g.value(c_prev));
    if xv.cols() != p.input_dim || hv.cols() != p.hidden || hv.shape() != cv.shape() || xv.rows() != hv.rows() {
        return Err(NliError::Shape {
            op: "lstm_step",
            left: xv.shape().to_vec(),
            right: hv.shape().to_vec(),
        });
    }
    let w = g.param(store, p.w);
    let u = g.param(store, p.u);
    let mut proj = g.matmul(x, w)?;
    if let Some(b) = p.b {
        let b = g.param(store, b);
        proj = g.add_bias(proj, b)?;
    }
    let out = lstm_cell(g, proj, u, p.hidden, Some((h_prev, c_prev)))?;
    Ok((out.h, out.c))
}

/// Outputs of one direction over a time-major batch.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    /// Per step `[B, hidden]`; rows past a sentence's end are zero.
    pub outputs: Vec<Var>,
    pub input_gates: Vec<Var>,
}

fn step_mask(lengths: &[usize], t: usize, width: usize) -> Option<(Arc<Tensor>, Arc<Tensor>)> {
    if lengths.iter().all(|&l| t < l) {
        return None;
    }
    let mut keep = Tensor::zeros(lengths.len(), width);
    let mut carry = Tensor::zeros(lengths.len(), width);
    for (r, &l) in lengths.iter().enumerate() {
        let on = if t < l { 1.0 } else { 0.0 };
        keep.row_slice_mut(r).iter_mut().for_each(|v| *v = on);
        carry.row_slice_mut(r).iter_mut().for_each(|v| *v = 1.0 - on);
    }
    Some((Arc::new(keep), Arc::new(carry)))
}

/// Runs one LSTM over a time-major batch. When `reverse`, each sentence is
/// read from its own last token backwards; padded steps leave the state at
/// zero until the sentence begins.
pub fn run_lstm(
    g: &mut Graph,
    store: &ParamStore,
    p: &LstmParams,
    x_tm: Var,
    lengths: &[usize],
    reverse: bool,
) -> Result<SequenceRun> {
    let batch = lengths.len();
    if batch == 0 || lengths.contains(&0) {
        return Err(NliError::contract("LSTM over an empty sequence"));
    }
    let steps = *lengths.iter().max().expect("non-empty");
    let xv = g.value(x_tm);
    if xv.rows() != steps * batch || xv.cols() != p.input_dim {
        return Err(NliError::Shape {
            op: "run_lstm",
            left: xv.shape().to_vec(),
            right: vec![steps * batch, p.input_dim],
        });
    }
    let w = g.param(store, p.w);
    let u = g.param(store, p.u);
    let mut proj_all = g.matmul(x_tm, w)?;
    if let Some(b) = p.b {
        let b = g.param(store, b);
        proj_all = g.add_bias(proj_all, b)?;
    }
    let mut outputs = vec![None; steps];
    let mut gates = vec![None; steps];
    let mut prev: Option<(Var, Var)> = None;
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let proj = g.slice(proj_all, 0, t * batch, batch)?;
        let cell = lstm_cell(g, proj, u, p.hidden, prev)?;
        let (h, c, out) = match step_mask(lengths, t, p.hidden) {
            None => (cell.h, cell.c, cell.h),
            Some((keep, carry)) => {
                let out = g.mul_const(cell.h, keep.clone())?;
                let new_c = g.mul_const(cell.c, keep)?;
                match prev {
                    None => (out, new_c, out),
                    Some((hp, cp)) => {
                        let hk = g.mul_const(hp, carry.clone())?;
                        let ck = g.mul_const(cp, carry)?;
                        let h = g.add(out, hk)?;
                        let c = g.add(new_c, ck)?;
                        (h, c, out)
                    }
                }
            }
        };
        outputs[t] = Some(out);
        gates[t] = Some(cell.input_gate);
        prev = Some((h, c));
    }
    Ok(SequenceRun {
        outputs: outputs.into_iter().map(|o| o.expect("every step")).collect(),
        input_gates: gates.into_iter().map(|o| o.expect("every step")).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct BiRun {
    pub fwd: SequenceRun,
    pub bwd: SequenceRun,
    pub lengths: Vec<usize>,
}

impl BiRun {
    /// `[len, 2 * hidden]` states `[h_fwd; h_bwd]` of sentence `s`.
    pub fn sequence(&self, g: &mut Graph, s: usize) -> Result<Var> {
        let len = self.lengths[s];
        let idx: Vec<(usize, usize)> = (0..len).map(|t| (t, s)).collect();
        let f = g.gather(&self.fwd.outputs, &idx)?;
        let b = g.gather(&self.bwd.outputs, &idx)?;
        g.concat(&[f, b], 1)
    }

    /// Per-position `‖i_fwd‖₂ + ‖i_bwd‖₂` of sentence `s`.
    pub fn input_gate_norms(&self, g: &Graph, s: usize) -> Vec<f64> {
        (0..self.lengths[s])
            .map(|t| {
                let f = g.value(self.fwd.input_gates[t]).row_slice(s);
                let b = g.value(self.bwd.input_gates[t]).row_slice(s);
                Tensor::l2_norm(f) + Tensor::l2_norm(b)
            })
            .collect()
    }
}

pub fn bilstm_encode(
    g: &mut Graph,
    store: &ParamStore,
    fwd: &LstmParams,
    bwd: &LstmParams,
    x_tm: Var,
    lengths: &[usize],
) -> Result<BiRun> {
    Ok(BiRun {
        fwd: run_lstm(g, store, fwd, x_tm, lengths, false)?,
        bwd: run_lstm(g, store, bwd, x_tm, lengths, true)?,
        lengths: lengths.to_vec(),
    })
}

/// Single-sentence convenience wrapper: `x` is `[len, input_dim]`.
pub fn bilstm_sentence(
    g: &mut Graph,
    store: &ParamStore,
    fwd: &LstmParams,
    bwd: &LstmParams,
    x: Var,
) -> Result<EncodedSequence> {
    let len = g.value(x).rows();
    let run = bilstm_encode(g, store, fwd, bwd, x, &[len])?;
    let states = run.sequence(g, 0)?;
    Ok(EncodedSequence {
        states,
        mask: vec![true; len],
    })
}

// ---- feedforward replacement ----------------------------------------------

/// One-layer ReLU network applied to every position independently.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w: ParamId,
    pub b: ParamId,
}

impl FeedForward {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.insert(
            format!("{prefix}.W"),
            Tensor::glorot(input_dim, output_dim, input_dim, output_dim, rng),
        )?;
        let b = store.insert(format!("{prefix}.b"), Tensor::zeros(1, output_dim))?;
        Ok(FeedForward { w, b })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        let pre = g.add_bias(xw, b)?;
        Ok(g.relu(pre))
    }
}

// ---- tree-LSTM -------------------------------------------------------------

/// Binary tree-LSTM block.
///
/// Gate column order of the recurrent matrices: output, left forget, right
/// forget, input, candidate. `ul` packs `U_o^L, U_f^{LL}, U_f^{RL}, U_i^L,
/// U_c^L` and `ur` packs `U_o^R, U_f^{LR}, U_f^{RR}, U_i^R, U_c^R`, i.e. ten
/// `hidden x hidden` blocks. With tied forget inputs `w` has four blocks
/// (output, forget, input, candidate) and the forget block feeds both
/// forget gates.
#[derive(Clone, Debug)]
pub struct TreeLstmParams {
    pub w: ParamId,
    pub ul: ParamId,
    pub ur: ParamId,
    pub b: Option<ParamId>,
    /// Input vector of internal nodes; absent when every node has an input.
    pub x_prime: Option<ParamId>,
    pub input_dim: usize,
    pub hidden: usize,
    pub tied_forget: bool,
}

impl TreeLstmParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        biases: bool,
        tied_forget: bool,
        with_x_prime: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w_blocks = if tied_forget { 4 } else { 5 };
        let w = store.insert(
            format!("{prefix}.W"),
            Tensor::glorot(input_dim, w_blocks * hidden, input_dim, hidden, rng),
        )?;
        let ul = store.insert(
            format!("{prefix}.UL"),
            Tensor::glorot(hidden, 5 * hidden, hidden, hidden, rng),
        )?;
        let ur = store.insert(
            format!("{prefix}.UR"),
            Tensor::glorot(hidden, 5 * hidden, hidden, hidden, rng),
        )?;
        let b = if biases {
            Some(store.insert(format!("{prefix}.b"), Tensor::zeros(1, 5 * hidden))?)
        } else {
            None
        };
        let x_prime = if with_x_prime {
            Some(store.insert(format!("{prefix}.x_prime"), Tensor::gaussian(1, input_dim, 0.1, rng))?)
        } else {
            None
        };
        Ok(TreeLstmParams {
            w,
            ul,
            ur,
            b,
            x_prime,
            input_dim,
            hidden,
            tied_forget,
        })
    }
}

/// Where a tree node's input row comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeInput {
    /// Row `.1` of source `.0`.
    Row(usize, usize),
    /// The shared internal-node vector.
    Internal,
}

#[derive(Clone, Debug)]
pub struct TreeRun {
    /// Per tree, `[node_count, hidden]` states in preorder.
    pub states: Vec<Var>,
    pub level_gates: Vec<Var>,
    /// Per tree, per node: (level, row within level).
    pub positions: Vec<Vec<(usize, usize)>>,
}

impl TreeRun {
    /// Root state `[1, hidden]` of tree `t`.
    pub fn root(&self, g: &mut Graph, t: usize) -> Result<Var> {
        g.slice(self.states[t], 0, 0, 1)
    }

    /// Per-node `‖i_t‖₂` of tree `t`, in preorder.
    pub fn input_gate_norms(&self, g: &Graph, t: usize) -> Vec<f64> {
        self.positions[t]
            .iter()
            .map(|&(lvl, row)| Tensor::l2_norm(g.value(self.level_gates[lvl]).row_slice(row)))
            .collect()
    }
}

/// Bottom-up evaluation of a batch of trees. Nodes of equal height across
/// all trees are evaluated together; leaves see zero child states and cells.
pub fn tree_encode_batch(
    g: &mut Graph,
    store: &ParamStore,
    p: &TreeLstmParams,
    trees: &[&ParseTree],
    sources: &[Var],
    inputs: &[Vec<NodeInput>],
) -> Result<TreeRun> {
    if trees.len() != inputs.len() {
        return Err(NliError::contract("one input list per tree"));
    }
    let d = p.hidden;
    let heights: Vec<Vec<usize>> = trees.iter().map(|t| t.heights()).collect();
    for ((t, ins), hs) in trees.iter().zip(inputs).zip(&heights) {
        t.validate()?;
        if ins.len() != t.node_count() || hs.len() != t.node_count() {
            return Err(NliError::contract(format!(
                "{} node inputs for a tree of {} nodes",
                ins.len(),
                t.node_count()
            )));
        }
    }
    let max_height = heights.iter().map(|h| h[0]).max().unwrap_or(0);

    let mut all_sources = sources.to_vec();
    let x_prime_src = all_sources.len();
    let needs_x_prime = inputs.iter().flatten().any(|i| *i == NodeInput::Internal);
    if needs_x_prime {
        let xp = p
            .x_prime
            .ok_or_else(|| NliError::contract("internal-node input requested but no x' parameter"))?;
        all_sources.push(g.param(store, xp));
    }

    let w = g.param(store, p.w);
    let ul = g.param(store, p.ul);
    let ur = g.param(store, p.ur);
    let bias = p.b.map(|b| g.param(store, b));

    let mut positions: Vec<Vec<(usize, usize)>> =
        trees.iter().map(|t| vec![(0, 0); t.node_count()]).collect();
    let mut level_h = Vec::new();
    let mut level_c = Vec::new();
    let mut level_gates = Vec::new();

    for level in 0..=max_height {
        let mut members = Vec::new();
        for (ti, hs) in heights.iter().enumerate() {
            for (node, &h) in hs.iter().enumerate() {
                if h == level {
                    positions[ti][node] = (level, members.len());
                    members.push((ti, node));
                }
            }
        }
        let idx: Vec<(usize, usize)> = members
            .iter()
            .map(|&(ti, node)| match inputs[ti][node] {
                NodeInput::Row(s, r) => (s, r),
                NodeInput::Internal => (x_prime_src, 0),
            })
            .collect();
        let x = g.gather(&all_sources, &idx)?;
        let xw = g.matmul(x, w)?;
        let mut pre = if p.tied_forget {
            let o = g.slice(xw, 1, 0, d)?;
            let f = g.slice(xw, 1, d, d)?;
            let iu = g.slice(xw, 1, 2 * d, 2 * d)?;
            g.concat(&[o, f, f, iu], 1)?
        } else {
            xw
        };
        let mut children = None;
        if level > 0 {
            let (mut left, mut right) = (Vec::new(), Vec::new());
            for &(ti, node) in &members {
                let (l, r) = trees[ti].node(node).children.expect("internal node above level 0");
                left.push(positions[ti][l]);
                right.push(positions[ti][r]);
            }
            let hl = g.gather(&level_h, &left)?;
            let hr = g.gather(&level_h, &right)?;
            let cl = g.gather(&level_c, &left)?;
            let cr = g.gather(&level_c, &right)?;
            let a = g.matmul(hl, ul)?;
            let b = g.matmul(hr, ur)?;
            pre = g.add(pre, a)?;
            pre = g.add(pre, b)?;
            children = Some((cl, cr));
        }
        if let Some(b) = bias {
            pre = g.add_bias(pre, b)?;
        }
        let go = g.slice(pre, 1, 0, d)?;
        let o = g.sigmoid(go);
        let gi = g.slice(pre, 1, 3 * d, d)?;
        let i = g.sigmoid(gi);
        let gu = g.slice(pre, 1, 4 * d, d)?;
        let u = g.tanh(gu);
        let mut c = g.mul(i, u)?;
        if let Some((cl, cr)) = children {
            let gfl = g.slice(pre, 1, d, d)?;
            let fl = g.sigmoid(gfl);
            let gfr = g.slice(pre, 1, 2 * d, d)?;
            let fr = g.sigmoid(gfr);
            let kl = g.mul(fl, cl)?;
            let kr = g.mul(fr, cr)?;
            let k = g.add(kl, kr)?;
            c = g.add(k, c)?;
        }
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        level_h.push(h);
        level_c.push(c);
        level_gates.push(i);
    }

    let states = positions
        .iter()
        .map(|pos| g.gather(&level_h, pos))
        .collect::<Result<Vec<_>>>()?;
    Ok(TreeRun {
        states,
        level_gates,
        positions,
    })
}

/// Encodes one tree: leaves take rows of `leaf_inputs` in left-to-right
/// order, internal nodes take the shared `x'` vector.
pub fn tree_encode(
    g: &mut Graph,
    store: &ParamStore,
    p: &TreeLstmParams,
    tree: &ParseTree,
    leaf_inputs: Var,
) -> Result<EncodedSequence> {
    let mut next_leaf = 0;
    let inputs: Vec<NodeInput> = (0..tree.node_count())
        .map(|n| {
            if tree.is_leaf(n) {
                next_leaf += 1;
                NodeInput::Row(0, next_leaf - 1)
            } else {
                NodeInput::Internal
            }
        })
        .collect();
    if g.value(leaf_inputs).rows() != next_leaf {
        return Err(NliError::contract(format!(
            "{} leaf inputs for {next_leaf} leaves",
            g.value(leaf_inputs).rows()
        )));
    }
    let run = tree_encode_batch(g, store, p, &[tree], &[leaf_inputs], &[inputs])?;
    Ok(EncodedSequence {
        states: run.states[0],
        mask: tree.node_mask(),
    })
}
