//! Sentence-pair ingestion: parse trees, data files, vocabulary, embeddings.

mod data;
mod tree;
mod vocab;

pub use data::{load_jsonl, load_pairs, load_tsv, write_jsonl, Label, LoadedPairs, SentencePair, TextOptions};
pub use tree::{build_full_binary_tree, parse_sexpr, ParseTree, TreeNode, PAD_TOKEN};
pub use vocab::{load_embeddings, EmbeddingOptions, EmbeddingTable, Vocabulary, PAD, UNK};
