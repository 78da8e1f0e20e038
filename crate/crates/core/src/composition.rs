//! Composition of enhanced local-inference rows, pooling and the MLP head.

use rand::Rng;

use crate::autodiff::{softmax_rows_value, Graph, ReduceKind, Var};
use crate::config::Pooling;
use crate::corpus::ParseTree;
use crate::encoding::{
    bilstm_encode, tree_encode_batch, BiRun, EncodedSequence, FeedForward, LstmParams, NodeInput, TreeLstmParams,
    TreeRun,
};
use crate::error::{NliError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::train::Dropout;

pub const NUM_CLASSES: usize = 3;

/// Contextual layer run over the mapped rows.
#[derive(Clone, Debug)]
pub enum Composer {
    Bilstm { fwd: LstmParams, bwd: LstmParams },
    Ff(FeedForward),
    Tree(TreeLstmParams),
}

/// The ReLU mapping `F` followed by the contextual layer.
#[derive(Clone, Debug)]
pub struct CompositionLayer {
    pub f: FeedForward,
    pub composer: Composer,
}

/// A run of consecutive rows in a stacked matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

/// Lays out the spans of `rows` time-major (`t * B + s`), with `pad` rows
/// past the end of each span.
pub fn time_major(g: &mut Graph, rows: Var, pad: Var, spans: &[Span]) -> Result<Var> {
    let steps = spans.iter().map(|s| s.len).max().unwrap_or(0);
    let mut idx = Vec::with_capacity(steps * spans.len());
    for t in 0..steps {
        for s in spans {
            idx.push(if t < s.len { (0, s.offset + t) } else { (1, 0) });
        }
    }
    g.gather(&[rows, pad], &idx)
}

fn map_rows(g: &mut Graph, store: &ParamStore, f: &FeedForward, m: Var, dropout: &mut Dropout) -> Result<Var> {
    let m = dropout.apply(g, m)?;
    f.apply(g, store, m)
}

#[derive(Clone, Debug)]
pub struct SequentialComposition {
    /// One `[len, width]` matrix per span.
    pub states: Vec<Var>,
    /// The recurrent run, kept for input-gate inspection.
    pub run: Option<BiRun>,
}

/// Sequential composition: `F` on every enhanced row, then the contextual
/// layer per span.
pub fn compose_sequential(
    g: &mut Graph,
    store: &ParamStore,
    layer: &CompositionLayer,
    m: Var,
    spans: &[Span],
    dropout: &mut Dropout,
) -> Result<SequentialComposition> {
    let mapped = map_rows(g, store, &layer.f, m, dropout)?;
    match &layer.composer {
        Composer::Bilstm { fwd, bwd } => {
            let width = g.value(mapped).cols();
            let pad = g.constant(Tensor::zeros(1, width));
            let x = time_major(g, mapped, pad, spans)?;
            let lengths: Vec<usize> = spans.iter().map(|s| s.len).collect();
            let run = bilstm_encode(g, store, fwd, bwd, x, &lengths)?;
            let states = (0..spans.len()).map(|s| run.sequence(g, s)).collect::<Result<_>>()?;
            Ok(SequentialComposition { states, run: Some(run) })
        }
        Composer::Ff(ff) => {
            let out = ff.apply(g, store, mapped)?;
            let states = spans
                .iter()
                .map(|s| g.slice(out, 0, s.offset, s.len))
                .collect::<Result<_>>()?;
            Ok(SequentialComposition { states, run: None })
        }
        Composer::Tree(_) => Err(NliError::contract("tree composer used for sequential composition")),
    }
}

/// Tree composition: node `n` of tree `k` reads row `offsets[k] + n` of `m`.
pub fn compose_tree(
    g: &mut Graph,
    store: &ParamStore,
    layer: &CompositionLayer,
    trees: &[&ParseTree],
    m: Var,
    offsets: &[usize],
    dropout: &mut Dropout,
) -> Result<TreeRun> {
    let Composer::Tree(p) = &layer.composer else {
        return Err(NliError::contract("sequential composer used for tree composition"));
    };
    let rows = g.value(m).rows();
    let needed = trees.iter().zip(offsets).map(|(t, o)| o + t.node_count()).max().unwrap_or(0);
    if rows < needed {
        return Err(NliError::contract(format!("{rows} enhanced rows for {needed} tree nodes")));
    }
    let mapped = map_rows(g, store, &layer.f, m, dropout)?;
    let inputs: Vec<Vec<NodeInput>> = trees
        .iter()
        .zip(offsets)
        .map(|(t, &o)| (0..t.node_count()).map(|n| NodeInput::Row(0, o + n)).collect())
        .collect();
    tree_encode_batch(g, store, p, trees, &[mapped], &inputs)
}

/// Single-tree form; `m` must have exactly one row per node.
pub fn compose_single_tree(
    g: &mut Graph,
    store: &ParamStore,
    layer: &CompositionLayer,
    tree: &ParseTree,
    m: Var,
    dropout: &mut Dropout,
) -> Result<(EncodedSequence, Var)> {
    let rows = g.value(m).rows();
    if rows != tree.node_count() {
        return Err(NliError::contract(format!(
            "{rows} enhanced rows for a tree of {} nodes",
            tree.node_count()
        )));
    }
    let run = compose_tree(g, store, layer, &[tree], m, &[0], dropout)?;
    let root = run.root(g, 0)?;
    Ok((
        EncodedSequence {
            states: run.states[0],
            mask: tree.node_mask(),
        },
        root,
    ))
}

fn valid_rows(g: &mut Graph, v: &EncodedSequence) -> Result<Var> {
    let rows = g.value(v.states).rows();
    if v.mask.len() != rows {
        return Err(NliError::contract("mask length differs from state count"));
    }
    let keep: Vec<usize> = (0..rows).filter(|&r| v.mask[r]).collect();
    if keep.is_empty() {
        return Err(NliError::contract("pooling over zero valid positions"));
    }
    if keep.len() == rows {
        Ok(v.states)
    } else {
        g.gather_rows(v.states, &keep)
    }
}

/// `[a_ave; a_max; b_ave; b_max]` over valid rows, or `[Σa; Σb]` in sum mode.
pub fn pool(g: &mut Graph, v_a: &EncodedSequence, v_b: &EncodedSequence, mode: Pooling) -> Result<Var> {
    let a = valid_rows(g, v_a)?;
    let b = valid_rows(g, v_b)?;
    let parts = match mode {
        Pooling::Avemax => vec![
            g.reduce(a, ReduceKind::Mean, 0)?,
            g.reduce(a, ReduceKind::Max, 0)?,
            g.reduce(b, ReduceKind::Mean, 0)?,
            g.reduce(b, ReduceKind::Max, 0)?,
        ],
        Pooling::Sum => vec![g.reduce(a, ReduceKind::Sum, 0)?, g.reduce(b, ReduceKind::Sum, 0)?],
    };
    g.concat(&parts, 1)
}

/// Tree variant: the pooled blocks followed by both root states.
pub fn pool_with_roots(
    g: &mut Graph,
    v_a: &EncodedSequence,
    v_b: &EncodedSequence,
    root_a: Var,
    root_b: Var,
    mode: Pooling,
) -> Result<Var> {
    let pooled = pool(g, v_a, v_b, mode)?;
    g.concat(&[pooled, root_a, root_b], 1)
}

/// `tanh` hidden layer and a linear output layer over the three classes.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            w1: store.insert(
                format!("{prefix}.W1"),
                Tensor::glorot(input_dim, hidden, input_dim, hidden, rng),
            )?,
            b1: store.insert(format!("{prefix}.b1"), Tensor::zeros(1, hidden))?,
            w2: store.insert(
                format!("{prefix}.W2"),
                Tensor::glorot(hidden, NUM_CLASSES, hidden, NUM_CLASSES, rng),
            )?,
            b2: store.insert(format!("{prefix}.b2"), Tensor::zeros(1, NUM_CLASSES))?,
        })
    }

    /// Logits `[B, 3]` for pooled rows `v: [B, input_dim]`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, v: Var, dropout: &mut Dropout) -> Result<Var> {
        let w1 = g.param(store, self.w1);
        if g.value(v).cols() != g.value(w1).rows() {
            return Err(NliError::Shape {
                op: "mlp",
                left: g.value(v).shape().to_vec(),
                right: g.value(w1).shape().to_vec(),
            });
        }
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let v = dropout.apply(g, v)?;
        let h = g.matmul(v, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.tanh(h);
        let h = dropout.apply(g, h)?;
        let out = g.matmul(h, w2)?;
        g.add_bias(out, b2)
    }
}

/// Class probabilities for pooled rows.
pub fn classify(g: &mut Graph, store: &ParamStore, mlp: &Mlp, v: Var) -> Result<Tensor> {
    let logits = mlp.logits(g, store, v, &mut Dropout::eval())?;
    Ok(softmax_rows_value(g.value(logits)))
}

/// Mean negative log-likelihood of `gold`, fused with the softmax.
pub fn cross_entropy(g: &mut Graph, logits: Var, gold: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, gold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_entries, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn seq_layer(store: &mut ParamStore, input: usize, d: usize, r: &mut ChaCha8Rng) -> CompositionLayer {
        CompositionLayer {
            f: FeedForward::init(store, "F", input, d, r).unwrap(),
            composer: Composer::Bilstm {
                fwd: LstmParams::init(store, "cf", d, d, true, r).unwrap(),
                bwd: LstmParams::init(store, "cb", d, d, true, r).unwrap(),
            },
        }
    }

    fn tree_layer(store: &mut ParamStore, input: usize, d: usize, r: &mut ChaCha8Rng) -> CompositionLayer {
        CompositionLayer {
            f: FeedForward::init(store, "F", input, d, r).unwrap(),
            composer: Composer::Tree(TreeLstmParams::init(store, "ct", d, d, true, true, false, r).unwrap()),
        }
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn randomise(store: &mut ParamStore, seed: u64) {
        let mut r = rng(seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.value_mut(id).data_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
    }

    fn all_seq(g: &mut Graph, t: Tensor) -> EncodedSequence {
        let n = t.rows();
        EncodedSequence {
            states: g.constant(t),
            mask: vec![true; n],
        }
    }

    #[test]
    fn sequential_shapes_and_zero_params() {
        let mut r = rng(0);
        let mut store = ParamStore::new();
        let layer = seq_layer(&mut store, 2400, 300, &mut r);
        let mut g = Graph::new();
        let m = g.constant(random_tensor(5, 2400, &mut r));
        let spans = [Span { offset: 0, len: 1 }, Span { offset: 1, len: 4 }];
        let out = compose_sequential(&mut g, &store, &layer, m, &spans, &mut Dropout::eval()).unwrap().states;
        assert_eq!(g.value(out[0]).shape(), &[1, 600]);
        assert_eq!(g.value(out[1]).shape(), &[4, 600]);

        zero_all(&mut store);
        let mut g = Graph::new();
        let m = g.constant(random_tensor(5, 2400, &mut r));
        let out = compose_sequential(&mut g, &store, &layer, m, &spans, &mut Dropout::eval()).unwrap().states;
        assert!(g.value(out[1]).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tree_composition() {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let layer = tree_layer(&mut store, 8, 2, &mut r);
        let leaf = crate::corpus::parse_sexpr("w").unwrap();
        let mut g = Graph::new();
        let m = g.constant(random_tensor(1, 8, &mut r));
        let (states, root) = compose_single_tree(&mut g, &store, &layer, &leaf, m, &mut Dropout::eval()).unwrap();
        assert_eq!(g.value(states.states), g.value(root));

        let tree = crate::corpus::parse_sexpr("( ( a b ) c )").unwrap();
        let bad = g.constant(random_tensor(4, 8, &mut r));
        assert!(matches!(
            compose_single_tree(&mut g, &store, &layer, &tree, bad, &mut Dropout::eval()),
            Err(NliError::Contract(_))
        ));

        let m0 = random_tensor(5, 8, &mut r);
        randomise(&mut store, 2);
        let entries: Vec<_> = store
            .iter()
            .flat_map(|(id, _, t)| (0..t.len()).map(move |k| (id, k)))
            .collect();
        let err = check_param_entries(&store, &entries, |s, with_grad| {
            let mut g = Graph::new();
            let m = g.constant(m0.clone());
            let (enc, root) = compose_single_tree(&mut g, s, &layer, &tree, m, &mut Dropout::eval()).unwrap();
            let a = g.sum_all(enc.states);
            let b = g.sum_all(root);
            let loss = g.add(a, b).unwrap();
            let v = g.value(loss).item();
            if with_grad {
                g.backward(loss).unwrap();
            }
            (v, g.take_param_grads())
        });
        assert!(err < 1e-4, "relative error {err}");

        zero_all(&mut store);
        let mut g = Graph::new();
        let m = g.constant(m0);
        let (enc, _) = compose_single_tree(&mut g, &store, &layer, &tree, m, &mut Dropout::eval()).unwrap();
        assert!(g.value(enc.states).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        let a = all_seq(&mut g, Tensor::from_vec(2, 2, vec![1.0, 3.0, 5.0, 1.0]));
        let b = all_seq(&mut g, Tensor::row(&[7.0, -1.0]));
        let v = pool(&mut g, &a, &b, Pooling::Avemax).unwrap();
        assert_eq!(g.value(v).data(), &[3.0, 2.0, 5.0, 3.0, 7.0, -1.0, 7.0, -1.0]);
        let v = pool(&mut g, &a, &b, Pooling::Sum).unwrap();
        assert_eq!(g.value(v).data(), &[6.0, 4.0, 7.0, -1.0]);

        let masked = EncodedSequence {
            states: g.constant(Tensor::from_vec(2, 2, vec![1.0, 3.0, 9.0, 9.0])),
            mask: vec![true, false],
        };
        let v = pool(&mut g, &masked, &b, Pooling::Avemax).unwrap();
        assert_eq!(&g.value(v).data()[..4], &[1.0, 3.0, 1.0, 3.0]);

        let dead = EncodedSequence {
            states: masked.states,
            mask: vec![false, false],
        };
        assert!(matches!(pool(&mut g, &dead, &b, Pooling::Avemax), Err(NliError::Contract(_))));

        let ra = g.constant(Tensor::row(&[0.5, 0.5]));
        let v = pool_with_roots(&mut g, &a, &b, ra, ra, Pooling::Avemax).unwrap();
        assert_eq!(g.value(v).cols(), 12);
    }

    #[test]
    fn pooling_permutation_and_duplication() {
        let mut r = rng(3);
        let t = random_tensor(4, 3, &mut r);
        let rows: Vec<&[f64]> = [2, 0, 3, 1].iter().map(|&i| t.row_slice(i)).collect();
        let p = Tensor::from_rows(&rows);
        let dup_rows: Vec<&[f64]> = (0..4).chain(0..4).map(|i| t.row_slice(i)).collect();
        let dup = Tensor::from_rows(&dup_rows);
        let mut g = Graph::new();
        let a = all_seq(&mut g, t);
        let ap = all_seq(&mut g, p);
        let ad = all_seq(&mut g, dup);
        let x = pool(&mut g, &a, &a, Pooling::Avemax).unwrap();
        let y = pool(&mut g, &ap, &ap, Pooling::Avemax).unwrap();
        assert!(g.value(x).max_abs_diff(g.value(y)) < 1e-15);
        // averages ignore duplication, sums double
        let xd = pool(&mut g, &ad, &ad, Pooling::Avemax).unwrap();
        assert!(g.value(x).max_abs_diff(g.value(xd)) < 1e-15);
        let s = pool(&mut g, &a, &a, Pooling::Sum).unwrap();
        let sd = pool(&mut g, &ad, &ad, Pooling::Sum).unwrap();
        let doubled = g.value(s).map(|v| 2.0 * v);
        assert!(doubled.max_abs_diff(g.value(sd)) < 1e-14);
    }

    #[test]
    fn classify_examples() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let mlp = Mlp::init(&mut store, "mlp", 4, 3, &mut r).unwrap();
        zero_all(&mut store);
        let v0 = random_tensor(2, 4, &mut r);
        // parameters are bound once per graph, so each call gets a fresh one
        let run = |store: &ParamStore, v: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(v.clone());
            classify(&mut g, store, &mlp, v)
        };
        let p = run(&store, &v0).unwrap();
        assert!(p.data().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));

        store.value_mut(mlp.b2).data_mut()[0] = 2f64.ln();
        let p = run(&store, &v0).unwrap();
        assert!((p.at(0, 0) - 0.5).abs() < 1e-15 && (p.at(0, 1) - 0.25).abs() < 1e-15);

        assert!(matches!(run(&store, &Tensor::zeros(1, 5)), Err(NliError::Shape { .. })));

        randomise(&mut store, 5);
        let p1 = run(&store, &v0).unwrap();
        for x in store.value_mut(mlp.b2).data_mut() {
            *x += 17.0;
        }
        let p2 = run(&store, &v0).unwrap();
        assert!(p1.max_abs_diff(&p2) < 1e-12);
        for row in 0..2 {
            assert!((p1.row_slice(row).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(1, 3));
        let l = cross_entropy(&mut g, uniform, &[2]).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-15);
        let sure = g.constant(Tensor::row(&[60.0, 0.0, 0.0]));
        let l = cross_entropy(&mut g, sure, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-20);
        let two = g.constant(Tensor::from_vec(2, 3, vec![1.0, 0.0, -1.0, 0.3, 0.2, 0.1]));
        let l = cross_entropy(&mut g, two, &[0, 2]).unwrap();
        let l0 = {
            let mut h = Graph::new();
            let x = h.constant(Tensor::row(&[1.0, 0.0, -1.0]));
            let y = h.cross_entropy(x, &[0]).unwrap();
            h.value(y).item()
        };
        let l1 = {
            let mut h = Graph::new();
            let x = h.constant(Tensor::row(&[0.3, 0.2, 0.1]));
            let y = h.cross_entropy(x, &[2]).unwrap();
            h.value(y).item()
        };
        assert!((g.value(l).item() - (l0 + l1) / 2.0).abs() < 1e-15);
        assert!(cross_entropy(&mut g, uniform, &[3]).is_err());
    }

    #[test]
    fn gradient_reaches_every_valid_state() {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let mlp = Mlp::init(&mut store, "mlp", 8, 5, &mut r).unwrap();
        let mut g = Graph::new();
        let a = g.leaf(random_tensor(3, 2, &mut r), true);
        let b = g.leaf(random_tensor(4, 2, &mut r), true);
        let sa = EncodedSequence { states: a, mask: vec![true; 3] };
        let sb = EncodedSequence { states: b, mask: vec![true, true, true, false] };
        let v = pool(&mut g, &sa, &sb, Pooling::Avemax).unwrap();
        let logits = mlp.logits(&mut g, &store, v, &mut Dropout::eval()).unwrap();
        let loss = cross_entropy(&mut g, logits, &[1]).unwrap();
        g.backward(loss).unwrap();
        let ga = g.grad(a).unwrap();
        for row in 0..3 {
            assert!(ga.row_slice(row).iter().any(|v| *v != 0.0));
        }
        let gb = g.grad(b).unwrap();
        for row in 0..3 {
            assert!(gb.row_slice(row).iter().any(|v| *v != 0.0));
        }
        assert!(gb.row_slice(3).iter().all(|v| *v == 0.0));
    }
}
