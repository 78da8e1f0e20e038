//! Token vocabulary and pretrained embedding initialisation.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::SentencePair;
use crate::error::{NliError, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const RESERVED: [&str; 2] = ["<pad>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocabulary {
    /// Reserved entries first, then tokens in first-appearance order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.push(r);
        }
        for t in tokens {
            v.push(t.as_ref());
        }
        v
    }

    /// Restores a vocabulary from its serialized token list.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..2] != RESERVED {
            return Err(NliError::VocabMismatch(
                "token list does not start with the reserved entries".into(),
            ));
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(NliError::VocabMismatch("duplicate tokens in token list".into()));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn build(pairs: &[SentencePair]) -> Self {
        Vocabulary::from_tokens(
            pairs
                .iter()
                .flat_map(|p| p.premise.iter().chain(p.hypothesis.iter())),
        )
    }

    fn push(&mut self, tok: &str) {
        if !self.index.contains_key(tok) {
            self.index.insert(tok.to_string(), self.tokens.len());
            self.tokens.push(tok.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn get(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    pub fn id(&self, tok: &str) -> usize {
        self.get(tok).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, toks: &[S]) -> Vec<usize> {
        toks.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingOptions {
    pub dim: usize,
    /// Standard deviation of the Gaussian used for rows absent from the file.
    pub oov_std: f64,
    /// Retry a failed verbatim lookup with the lowercased token.
    pub lowercase_fallback: bool,
}

impl Default for EmbeddingOptions {
    fn default() -> Self {
        EmbeddingOptions {
            dim: 300,
            oov_std: 0.1,
            lowercase_fallback: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    /// Rows initialised from the pretrained file.
    pub known: usize,
}

/// Embedding matrix aligned to `vocab`: pretrained rows where available,
/// N(0, oov_std²) otherwise, and an all-zero padding row.
pub fn load_embeddings<R: Rng + ?Sized>(
    path: Option<&Path>,
    vocab: &Vocabulary,
    opts: &EmbeddingOptions,
    rng: &mut R,
) -> Result<EmbeddingTable> {
    let dim = opts.dim;
    let mut matrix = Tensor::gaussian(vocab.len(), dim, opts.oov_std, rng);
    matrix.row_slice_mut(PAD).iter_mut().for_each(|v| *v = 0.0);
    let Some(path) = path else {
        return Ok(EmbeddingTable { matrix, known: 0 });
    };

    // verbatim matches win over lowercase fallbacks
    let mut exact: HashMap<&str, usize> = HashMap::new();
    let mut lower: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, t) in vocab.tokens().iter().enumerate().skip(RESERVED.len()) {
        exact.insert(t.as_str(), i);
        if opts.lowercase_fallback {
            lower.entry(t.to_lowercase()).or_default().push(i);
        }
    }
    let mut filled_exact: HashSet<usize> = HashSet::new();
    let mut filled_lower: HashSet<usize> = HashSet::new();

    let file = File::open(path).map_err(|e| NliError::io(path, e))?;
    let shown = path.display().to_string();
    let mut values = Vec::with_capacity(dim);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| NliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line");
        let count = fields.clone().count();
        if count != dim {
            return Err(NliError::Format {
                path: shown,
                line: i + 1,
                message: format!("expected {dim} components for `{token}`, found {count}"),
            });
        }
        let exact_row = exact.get(token).copied().filter(|r| !filled_exact.contains(r));
        let lower_rows: Vec<usize> = lower
            .get(token)
            .map(|rows| {
                rows.iter()
                    .copied()
                    .filter(|r| !filled_exact.contains(r) && !filled_lower.contains(r))
                    .collect()
            })
            .unwrap_or_default();
        if exact_row.is_none() && lower_rows.is_empty() {
            continue;
        }
        values.clear();
        for f in fields {
            values.push(f.parse::<f64>().map_err(|e| NliError::Format {
                path: shown.clone(),
                line: i + 1,
                message: format!("bad component `{f}`: {e}"),
            })?);
        }
        if let Some(r) = exact_row {
            matrix.row_slice_mut(r).copy_from_slice(&values);
            filled_exact.insert(r);
        }
        for r in lower_rows {
            if Some(r) != exact_row {
                matrix.row_slice_mut(r).copy_from_slice(&values);
                filled_lower.insert(r);
            }
        }
    }
    let known = filled_exact.union(&filled_lower).count();
    Ok(EmbeddingTable { matrix, known })
}
