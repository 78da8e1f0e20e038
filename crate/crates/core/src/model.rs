//! The sequential (ESIM) and tree-LSTM inference models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{enhance, soft_align, AttentionSides};
use crate::autodiff::{softmax_rows_value, Graph, Var};
use crate::composition::{
    compose_sequential, compose_tree, pool, pool_with_roots, Composer, CompositionLayer, Mlp, Span,
};
use crate::config::{LayerKind, ModelConfig, ModelKind};
use crate::corpus::{build_full_binary_tree, ParseTree, SentencePair, Vocabulary, PAD};
use crate::encoding::{
    bilstm_encode, tree_encode_batch, EncodedSequence, FeedForward, LstmParams, NodeInput, TreeLstmParams,
};
use crate::error::{NliError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::train::{Dropout, Padded};

#[derive(Clone, Debug)]
enum Encoder {
    Bilstm { fwd: LstmParams, bwd: LstmParams },
    Ff(FeedForward),
    Tree(TreeLstmParams),
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: ParamId,
    encoder: Encoder,
    composition: CompositionLayer,
    mlp: Mlp,
}

/// Per-example inspection data captured during a forward pass.
#[derive(Clone, Debug)]
pub struct ExampleAnalysis {
    /// Tokens for sequences; numbered nodes (`"3"`, `"5:man"`) for trees.
    pub premise_labels: Vec<String>,
    pub hypothesis_labels: Vec<String>,
    /// `[ℓa, ℓb]`, each row normalized over hypothesis positions.
    pub attention: Tensor,
    /// `[ℓa, ℓb]`, each column normalized over premise positions.
    pub attention_over_premise: Tensor,
    /// Input-gate L2 norms of the composition layer (absent for the
    /// feedforward composition).
    pub premise_gate_norms: Option<Vec<f64>>,
    pub hypothesis_gate_norms: Option<Vec<f64>>,
}

pub struct Forward {
    /// `[B, 3]`
    pub logits: Var,
    pub analyses: Vec<ExampleAnalysis>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    layout: Layout,
}

fn build_layout(
    config: &ModelConfig,
    store: &mut ParamStore,
    embedding: Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Layout> {
    let (l, d) = (config.embed_dim, config.hidden_dim);
    let bias = config.gate_biases;
    let embedding = store.insert("embedding", embedding)?;
    store.freeze_rows(embedding, vec![PAD]);
    let state = config.state_dim();
    let encoder = match (config.kind, config.encoder) {
        (ModelKind::Esim, LayerKind::Bilstm) => Encoder::Bilstm {
            fwd: LstmParams::init(store, "encoder.fwd", l, d, bias, rng)?,
            bwd: LstmParams::init(store, "encoder.bwd", l, d, bias, rng)?,
        },
        (ModelKind::Esim, LayerKind::Ff) => Encoder::Ff(FeedForward::init(store, "encoder.ff", l, state, rng)?),
        _ => Encoder::Tree(TreeLstmParams::init(
            store,
            "encoder.tree",
            l,
            d,
            bias,
            config.tie_forget_input,
            true,
            rng,
        )?),
    };
    let f = FeedForward::init(store, "composition.F", config.enhanced_dim(), d, rng)?;
    let composer = match (config.kind, config.composition) {
        (ModelKind::Esim, LayerKind::Bilstm) => Composer::Bilstm {
            fwd: LstmParams::init(store, "composition.fwd", d, d, bias, rng)?,
            bwd: LstmParams::init(store, "composition.bwd", d, d, bias, rng)?,
        },
        (ModelKind::Esim, LayerKind::Ff) => Composer::Ff(FeedForward::init(store, "composition.ff", d, state, rng)?),
        _ => Composer::Tree(TreeLstmParams::init(
            store,
            "composition.tree",
            d,
            d,
            bias,
            config.tie_forget_input,
            false,
            rng,
        )?),
    };
    let mlp = Mlp::init(store, "mlp", config.pooled_dim(), config.mlp_dim, rng)?;
    Ok(Layout {
        embedding,
        encoder,
        composition: CompositionLayer { f, composer },
        mlp,
    })
}

fn missing_parse(i: usize, side: usize) -> NliError {
    NliError::contract(format!(
        "the tree model needs binarized parses, but example {i} has no sentence{side}_binary_parse"
    ))
}

impl Model {
    /// Fresh model. `embedding` must be `[vocab.len(), embed_dim]`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, embedding: Tensor, seed: u64) -> Result<Self> {
        config.validate()?;
        if embedding.shape() != [vocab.len(), config.embed_dim] {
            return Err(NliError::Shape {
                op: "embedding",
                left: embedding.shape().to_vec(),
                right: vec![vocab.len(), config.embed_dim],
            });
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = build_layout(&config, &mut store, embedding, &mut rng)?;
        Ok(Model {
            config,
            vocab,
            store,
            layout,
        })
    }

    /// Reassembles a model from stored parameters; names and shapes must match
    /// the layout implied by `config` and `vocab`.
    pub fn from_store(config: ModelConfig, vocab: Vocabulary, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut fresh = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = Tensor::zeros(vocab.len(), config.embed_dim);
        let layout = build_layout(&config, &mut fresh, emb, &mut rng)?;
        if fresh.len() != store.len() {
            return Err(NliError::contract(format!(
                "expected {} parameter tensors, found {}",
                fresh.len(),
                store.len()
            )));
        }
        for ((_, name_a, a), (_, name_b, b)) in fresh.iter().zip(store.iter()) {
            if name_a != name_b || a.shape() != b.shape() {
                let msg = format!("parameter `{name_b}` {:?} does not match `{name_a}` {:?}", b.shape(), a.shape());
                return Err(if name_a == "embedding" {
                    NliError::VocabMismatch(msg)
                } else {
                    NliError::contract(msg)
                });
            }
        }
        let mut store = store;
        store.freeze_rows(layout.embedding, vec![PAD]);
        Ok(Model {
            config,
            vocab,
            store,
            layout,
        })
    }

    pub fn embedding_id(&self) -> ParamId {
        self.layout.embedding
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn sides(&self) -> AttentionSides {
        AttentionSides {
            premise: self.config.premise_attention,
            hypothesis: self.config.hypothesis_attention,
        }
    }

    /// Rejects data the configured model cannot consume.
    pub fn check_data(&self, pairs: &[SentencePair]) -> Result<()> {
        check_data(&self.config, pairs)
    }

    fn trees_for(&self, pair: &SentencePair, i: usize) -> Result<(ParseTree, ParseTree)> {
        match self.config.kind {
            ModelKind::Tree => {
                let p = pair.premise_tree.clone().ok_or_else(|| missing_parse(i, 1))?;
                let h = pair.hypothesis_tree.clone().ok_or_else(|| missing_parse(i, 2))?;
                Ok((p, h))
            }
            _ => Ok((
                build_full_binary_tree(&pair.premise)?,
                build_full_binary_tree(&pair.hypothesis)?,
            )),
        }
    }

    pub fn forward(&self, g: &mut Graph, pairs: &[&SentencePair], dropout: &mut Dropout, capture: bool) -> Result<Forward> {
        if pairs.is_empty() {
            return Err(NliError::contract("empty batch"));
        }
        // every parameter gets a gradient slot, used or not
        for id in self.store.ids() {
            g.param(&self.store, id);
        }
        match self.config.kind {
            ModelKind::Esim => self.forward_sequential(g, pairs, dropout, capture),
            _ => self.forward_tree(g, pairs, dropout, capture),
        }
    }

    fn forward_sequential(
        &self,
        g: &mut Graph,
        pairs: &[&SentencePair],
        dropout: &mut Dropout,
        capture: bool,
    ) -> Result<Forward> {
        let b = pairs.len();
        let mut sents: Vec<Vec<usize>> = Vec::with_capacity(2 * b);
        for (i, p) in pairs.iter().enumerate() {
            if p.premise.is_empty() || p.hypothesis.is_empty() {
                return Err(NliError::contract(format!("example {i} has an empty sentence")));
            }
            sents.push(self.vocab.encode(&p.premise));
        }
        for p in pairs {
            sents.push(self.vocab.encode(&p.hypothesis));
        }
        let padded = Padded::new(&sents);
        let e = g.param(&self.store, self.layout.embedding);
        let x = g.gather_rows(e, &padded.time_major())?;
        let n = sents.len();
        let encoded: Vec<Var> = match &self.layout.encoder {
            Encoder::Bilstm { fwd, bwd } => {
                let run = bilstm_encode(g, &self.store, fwd, bwd, x, &padded.lengths)?;
                (0..n).map(|s| run.sequence(g, s)).collect::<Result<_>>()?
            }
            Encoder::Ff(ff) => {
                let y = ff.apply(g, &self.store, x)?;
                (0..n)
                    .map(|s| {
                        let rows: Vec<usize> = (0..padded.lengths[s]).map(|t| t * n + s).collect();
                        g.gather_rows(y, &rows)
                    })
                    .collect::<Result<_>>()?
            }
            Encoder::Tree(_) => unreachable!("sequential model with a tree encoder"),
        };

        let mut m_rows = Vec::with_capacity(n);
        let mut spans = Vec::with_capacity(n);
        let mut offset = 0;
        let mut attn = Vec::new();
        for k in 0..b {
            let a = EncodedSequence {
                states: encoded[k],
                mask: vec![true; padded.lengths[k]],
            };
            let h = EncodedSequence {
                states: encoded[b + k],
                mask: vec![true; padded.lengths[b + k]],
            };
            let al = soft_align(g, &a, &h, self.sides())?;
            m_rows.push(enhance(g, a.states, al.a_tilde, self.config.diff_prod)?);
            m_rows.push(enhance(g, h.states, al.b_tilde, self.config.diff_prod)?);
            for len in [padded.lengths[k], padded.lengths[b + k]] {
                spans.push(Span { offset, len });
                offset += len;
            }
            if capture {
                attn.push(al.attention);
            }
        }
        let m = g.concat(&m_rows, 0)?;
        let composed = compose_sequential(g, &self.store, &self.layout.composition, m, &spans, dropout)?;

        let mut pooled = Vec::with_capacity(b);
        for k in 0..b {
            let va = EncodedSequence {
                states: composed.states[2 * k],
                mask: vec![true; spans[2 * k].len],
            };
            let vb = EncodedSequence {
                states: composed.states[2 * k + 1],
                mask: vec![true; spans[2 * k + 1].len],
            };
            pooled.push(pool(g, &va, &vb, self.config.pooling)?);
        }
        let v = g.concat(&pooled, 0)?;
        let logits = self.layout.mlp.logits(g, &self.store, v, dropout)?;

        let analyses = if capture {
            attn.iter()
                .enumerate()
                .map(|(k, at)| ExampleAnalysis {
                    premise_labels: pairs[k].premise.clone(),
                    hypothesis_labels: pairs[k].hypothesis.clone(),
                    attention: g.value(at.over_b).clone(),
                    attention_over_premise: g.value(at.over_a).transpose(),
                    premise_gate_norms: composed.run.as_ref().map(|r| r.input_gate_norms(g, 2 * k)),
                    hypothesis_gate_norms: composed.run.as_ref().map(|r| r.input_gate_norms(g, 2 * k + 1)),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Forward { logits, analyses })
    }

    fn forward_tree(
        &self,
        g: &mut Graph,
        pairs: &[&SentencePair],
        dropout: &mut Dropout,
        capture: bool,
    ) -> Result<Forward> {
        let Encoder::Tree(enc) = &self.layout.encoder else {
            unreachable!("tree model with a sequential encoder");
        };
        let b = pairs.len();
        // interleaved: premise k at 2k, hypothesis k at 2k + 1
        let mut trees = Vec::with_capacity(2 * b);
        for (i, p) in pairs.iter().enumerate() {
            let (pt, ht) = self.trees_for(p, i)?;
            trees.push(pt);
            trees.push(ht);
        }
        let refs: Vec<&ParseTree> = trees.iter().collect();
        let inputs: Vec<Vec<NodeInput>> = trees
            .iter()
            .map(|t| {
                t.nodes()
                    .iter()
                    .map(|node| match (&node.children, &node.token) {
                        (None, Some(tok)) => NodeInput::Row(0, if node.padding { PAD } else { self.vocab.id(tok) }),
                        _ => NodeInput::Internal,
                    })
                    .collect()
            })
            .collect();
        let e = g.param(&self.store, self.layout.embedding);
        let run = tree_encode_batch(g, &self.store, enc, &refs, &[e], &inputs)?;

        let masks: Vec<Vec<bool>> = trees.iter().map(ParseTree::node_mask).collect();
        let mut m_rows = Vec::with_capacity(2 * b);
        let mut offsets = Vec::with_capacity(2 * b);
        let mut offset = 0;
        let mut attn = Vec::new();
        for k in 0..b {
            let a = EncodedSequence {
                states: run.states[2 * k],
                mask: masks[2 * k].clone(),
            };
            let h = EncodedSequence {
                states: run.states[2 * k + 1],
                mask: masks[2 * k + 1].clone(),
            };
            let al = soft_align(g, &a, &h, self.sides())?;
            m_rows.push(enhance(g, a.states, al.a_tilde, self.config.diff_prod)?);
            m_rows.push(enhance(g, h.states, al.b_tilde, self.config.diff_prod)?);
            for t in [&trees[2 * k], &trees[2 * k + 1]] {
                offsets.push(offset);
                offset += t.node_count();
            }
            if capture {
                attn.push(al.attention);
            }
        }
        let m = g.concat(&m_rows, 0)?;
        let composed = compose_tree(g, &self.store, &self.layout.composition, &refs, m, &offsets, dropout)?;

        let mut pooled = Vec::with_capacity(b);
        for k in 0..b {
            let va = EncodedSequence {
                states: composed.states[2 * k],
                mask: masks[2 * k].clone(),
            };
            let vb = EncodedSequence {
                states: composed.states[2 * k + 1],
                mask: masks[2 * k + 1].clone(),
            };
            let ra = composed.root(g, 2 * k)?;
            let rb = composed.root(g, 2 * k + 1)?;
            pooled.push(pool_with_roots(g, &va, &vb, ra, rb, self.config.pooling)?);
        }
        let v = g.concat(&pooled, 0)?;
        let logits = self.layout.mlp.logits(g, &self.store, v, dropout)?;

        let analyses = if capture {
            attn.iter()
                .enumerate()
                .map(|(k, at)| {
                    let (pt, ht) = (&trees[2 * k], &trees[2 * k + 1]);
                    ExampleAnalysis {
                        premise_labels: (0..pt.node_count()).map(|n| pt.node_label(n)).collect(),
                        hypothesis_labels: (0..ht.node_count()).map(|n| ht.node_label(n)).collect(),
                        attention: g.value(at.over_b).clone(),
                        attention_over_premise: g.value(at.over_a).transpose(),
                        premise_gate_norms: Some(composed.input_gate_norms(g, 2 * k)),
                        hypothesis_gate_norms: Some(composed.input_gate_norms(g, 2 * k + 1)),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Forward { logits, analyses })
    }

    /// Mean cross-entropy of a batch.
    pub fn loss(&self, g: &mut Graph, pairs: &[&SentencePair], dropout: &mut Dropout) -> Result<Var> {
        let fwd = self.forward(g, pairs, dropout, false)?;
        let gold: Vec<usize> = pairs.iter().map(|p| p.label.index()).collect();
        g.cross_entropy(fwd.logits, &gold)
    }

    /// Class probabilities in input order, evaluated in batches.
    pub fn predict(&self, pairs: &[SentencePair], batch_size: usize) -> Result<Vec<[f64; 3]>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(batch_size.max(1)) {
            let refs: Vec<&SentencePair> = chunk.iter().collect();
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, &refs, &mut Dropout::eval(), false)?;
            let probs = softmax_rows_value(g.value(fwd.logits));
            for r in 0..probs.rows() {
                let row = probs.row_slice(r);
                out.push([row[0], row[1], row[2]]);
            }
        }
        Ok(out)
    }

    /// Probabilities and inspection data for a single pair.
    pub fn analyze(&self, pair: &SentencePair) -> Result<([f64; 3], ExampleAnalysis)> {
        let mut g = Graph::new();
        let mut fwd = self.forward(&mut g, &[pair], &mut Dropout::eval(), true)?;
        let p = softmax_rows_value(g.value(fwd.logits));
        let analysis = fwd.analyses.pop().expect("one analysis per example");
        Ok(([p.at(0, 0), p.at(0, 1), p.at(0, 2)], analysis))
    }
}

/// Rejects data the configured model cannot consume, naming the missing field.
pub fn check_data(config: &ModelConfig, pairs: &[SentencePair]) -> Result<()> {
    if config.kind == ModelKind::Tree {
        for (i, p) in pairs.iter().enumerate() {
            if p.premise_tree.is_none() {
                return Err(missing_parse(i, 1));
            }
            if p.hypothesis_tree.is_none() {
                return Err(missing_parse(i, 2));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Pooling;
    use crate::corpus::{parse_sexpr, Label};
    use crate::gradcheck::check_param_entries;
    use rand::Rng;

    fn pair(p: &str, h: &str, label: Label) -> SentencePair {
        let pt = parse_sexpr(p).unwrap();
        let ht = parse_sexpr(h).unwrap();
        SentencePair {
            premise: pt.tokens(),
            hypothesis: ht.tokens(),
            premise_tree: Some(pt),
            hypothesis_tree: Some(ht),
            label,
        }
    }

    fn toy_pairs() -> Vec<SentencePair> {
        vec![
            pair("( ( a dog ) runs )", "( a ( dog moves ) )", Label::Entailment),
            pair("( ( a cat ) ( sleeps now ) )", "( cat runs )", Label::Contradiction),
            pair("( man ( ( eats food ) today ) )", "( ( a man ) eats )", Label::Neutral),
        ]
    }

    fn small(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            embed_dim: 4,
            hidden_dim: 3,
            mlp_dim: 5,
            ..ModelConfig::default()
        }
    }

    fn build(config: ModelConfig, pairs: &[SentencePair], seed: u64) -> Model {
        let vocab = Vocabulary::build(pairs);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut emb = Tensor::gaussian(vocab.len(), config.embed_dim, 0.5, &mut r);
        emb.row_slice_mut(PAD).iter_mut().for_each(|v| *v = 0.0);
        let mut m = Model::new(config, vocab, emb, seed).unwrap();
        // nonzero biases so their gradients are exercised
        let ids: Vec<ParamId> = m.store.ids().collect();
        for id in ids {
            if m.store.name(id).ends_with(".b") || m.store.name(id).ends_with(".b1") {
                for v in m.store.value_mut(id).data_mut() {
                    *v = r.random_range(-0.3..0.3);
                }
            }
        }
        m
    }

    fn spot_check(model: &Model, pairs: &[SentencePair], count: usize, seed: u64) -> f64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = model.store.ids().collect();
        let mut entries = Vec::new();
        // one entry from every tensor, then random extras
        for &id in &ids {
            let n = model.store.value(id).len();
            let mut k = r.random_range(0..n);
            if id == model.embedding_id() {
                k = model.store.value(id).cols() * 2 + r.random_range(0..model.store.value(id).cols());
            }
            entries.push((id, k));
        }
        while entries.len() < count {
            let id = ids[r.random_range(0..ids.len())];
            if id == model.embedding_id() {
                continue;
            }
            entries.push((id, r.random_range(0..model.store.value(id).len())));
        }
        let refs: Vec<&SentencePair> = pairs.iter().collect();
        check_param_entries(&model.store, &entries, |s, with_grad| {
            let m = Model {
                store: s.clone(),
                ..model.clone()
            };
            let mut g = Graph::new();
            let loss = m.loss(&mut g, &refs, &mut Dropout::eval()).unwrap();
            let v = g.value(loss).item();
            if with_grad {
                g.backward(loss).unwrap();
            }
            (v, g.take_param_grads())
        })
    }

    #[test]
    fn end_to_end_gradients_all_variants() {
        let pairs = toy_pairs();
        let mut variants = vec![small(ModelKind::Esim), small(ModelKind::Tree), small(ModelKind::Fulltree)];
        let base = small(ModelKind::Esim);
        variants.push(ModelConfig {
            pooling: Pooling::Sum,
            ..base.clone()
        });
        variants.push(ModelConfig {
            diff_prod: false,
            ..base.clone()
        });
        variants.push(ModelConfig {
            encoder: LayerKind::Ff,
            composition: LayerKind::Ff,
            ..base.clone()
        });
        variants.push(ModelConfig {
            premise_attention: false,
            ..base
        });
        for (i, cfg) in variants.into_iter().enumerate() {
            let model = build(cfg.clone(), &pairs, 40 + i as u64);
            let err = spot_check(&model, &pairs, 24, i as u64);
            assert!(err < 1e-4, "{}: relative error {err}", cfg.variant_name());
        }
    }

    #[test]
    fn classifier_outputs_are_distributions() {
        let pairs = toy_pairs();
        for kind in [ModelKind::Esim, ModelKind::Tree, ModelKind::Fulltree] {
            let model = build(small(kind), &pairs, 3);
            for p in model.predict(&pairs, 2).unwrap() {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batched_prediction_matches_single() {
        let pairs = toy_pairs();
        for kind in [ModelKind::Esim, ModelKind::Tree, ModelKind::Fulltree] {
            let model = build(small(kind), &pairs, 5);
            let together = model.predict(&pairs, 3).unwrap();
            let alone = model.predict(&pairs, 1).unwrap();
            for (a, b) in together.iter().zip(&alone) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-12, "{kind:?}");
                }
            }
        }
    }

    #[test]
    fn analysis_shapes() {
        let pairs = toy_pairs();
        let esim = build(small(ModelKind::Esim), &pairs, 6);
        let (_, an) = esim.analyze(&pairs[1]).unwrap();
        assert_eq!(an.attention.shape(), &[4, 2]);
        assert_eq!(an.premise_gate_norms.as_ref().unwrap().len(), 4);
        assert_eq!(an.premise_labels, vec!["a", "cat", "sleeps", "now"]);

        let tree = build(small(ModelKind::Tree), &pairs, 6);
        let (_, an) = tree.analyze(&pairs[1]).unwrap();
        assert_eq!(an.attention.shape(), &[7, 3]);
        assert_eq!(an.premise_gate_norms.as_ref().unwrap().len(), 7);
        assert_eq!(an.premise_labels[2], "3:a");
        for r in 0..7 {
            assert!((an.attention.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        // padding leaves of the full tree get no attention
        let full = build(small(ModelKind::Fulltree), &pairs, 6);
        let (_, an) = full.analyze(&pairs[0]).unwrap();
        let pad_col = an.hypothesis_labels.iter().position(|l| l.ends_with("<pad>")).unwrap();
        for r in 0..an.attention.rows() {
            assert_eq!(an.attention.at(r, pad_col), 0.0);
        }
    }

    #[test]
    fn tree_model_requires_parses() {
        let mut pairs = toy_pairs();
        pairs[1].hypothesis_tree = None;
        let err = check_data(&small(ModelKind::Tree), &pairs).unwrap_err();
        assert!(err.to_string().contains("sentence2_binary_parse"));
        assert!(check_data(&small(ModelKind::Fulltree), &pairs).is_ok());
    }

    #[test]
    fn store_round_trip_and_mismatch() {
        let pairs = toy_pairs();
        let m = build(small(ModelKind::Esim), &pairs, 7);
        let back = Model::from_store(m.config.clone(), m.vocab.clone(), m.store.clone()).unwrap();
        assert_eq!(back.predict(&pairs, 3).unwrap(), m.predict(&pairs, 3).unwrap());
        let other_vocab = Vocabulary::from_tokens(["x"]);
        assert!(matches!(
            Model::from_store(m.config.clone(), other_vocab, m.store.clone()),
            Err(NliError::VocabMismatch(_))
        ));
    }
}
