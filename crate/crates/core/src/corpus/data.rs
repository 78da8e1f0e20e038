//! Labelled premise/hypothesis pairs from JSON-lines or TSV files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tree::{parse_sexpr, ParseTree};
use crate::error::{NliError, Result};

/// Class order is fixed; it is also the argmax tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment,
    Contradiction,
    Neutral,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Contradiction, Label::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Contradiction => "contradiction",
            Label::Neutral => "neutral",
        }
    }

    /// `Ok(None)` for the consensus-lacking category.
    pub fn parse(s: &str) -> std::result::Result<Option<Label>, String> {
        match s.trim() {
            "entailment" => Ok(Some(Label::Entailment)),
            "contradiction" => Ok(Some(Label::Contradiction)),
            "neutral" => Ok(Some(Label::Neutral)),
            "-" | "other" | "" => Ok(None),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentencePair {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub premise_tree: Option<ParseTree>,
    pub hypothesis_tree: Option<ParseTree>,
    pub label: Label,
}

impl SentencePair {
    pub fn has_parses(&self) -> bool {
        self.premise_tree.is_some() && self.hypothesis_tree.is_some()
    }
}

/// Token normalisation applied at load time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextOptions {
    pub lowercase: bool,
    pub drop_punctuation: bool,
}

fn is_punctuation(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(|c| c.is_ascii_punctuation())
}

impl TextOptions {
    fn apply_tokens(&self, toks: Vec<String>) -> Vec<String> {
        toks.into_iter()
            .filter(|t| !(self.drop_punctuation && is_punctuation(t)))
            .map(|t| if self.lowercase { t.to_lowercase() } else { t })
            .collect()
    }

    fn apply_tree(&self, tree: ParseTree) -> Option<ParseTree> {
        let tree = if self.drop_punctuation {
            tree.prune_leaves(|t| !is_punctuation(t))?
        } else {
            tree
        };
        Some(if self.lowercase {
            tree.map_tokens(|t| t.to_lowercase())
        } else {
            tree
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadedPairs {
    pub pairs: Vec<SentencePair>,
    /// Pairs dropped for lacking annotator consensus.
    pub dropped: usize,
}

#[derive(Deserialize)]
struct JsonRecord {
    gold_label: Option<String>,
    sentence1: Option<String>,
    sentence2: Option<String>,
    sentence1_binary_parse: Option<String>,
    sentence2_binary_parse: Option<String>,
}

fn whitespace_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Parse-derived tokens when a parse is present, whitespace tokens otherwise.
fn sentence(
    text: &str,
    parse: Option<&str>,
    opts: &TextOptions,
    path: &str,
    line: usize,
    field: &str,
) -> Result<(Vec<String>, Option<ParseTree>)> {
    let (tokens, tree) = match parse {
        Some(p) => {
            let tree = parse_sexpr(p).map_err(|e| NliError::Format {
                path: path.to_string(),
                line,
                message: format!("{field}: {e}"),
            })?;
            match opts.apply_tree(tree) {
                Some(t) => (t.tokens(), Some(t)),
                None => (Vec::new(), None),
            }
        }
        None => (opts.apply_tokens(whitespace_tokens(text)), None),
    };
    if tokens.is_empty() {
        return Err(NliError::Format {
            path: path.to_string(),
            line,
            message: format!("empty sentence for {field}"),
        });
    }
    Ok((tokens, tree))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| NliError::io(path, e))
}

/// Loads SNLI-style JSON lines.
pub fn load_jsonl(path: &Path, opts: &TextOptions) -> Result<LoadedPairs> {
    let shown = path.display().to_string();
    let mut out = LoadedPairs::default();
    for (i, line) in open(path)?.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| NliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| NliError::Format {
            path: shown.clone(),
            line: lineno,
            message: format!("malformed JSON: {e}"),
        })?;
        let require = |v: Option<String>, field: &str| {
            v.ok_or_else(|| NliError::Schema {
                path: shown.clone(),
                line: lineno,
                field: field.to_string(),
            })
        };
        let gold = require(rec.gold_label, "gold_label")?;
        let s1 = require(rec.sentence1, "sentence1")?;
        let s2 = require(rec.sentence2, "sentence2")?;
        let label = Label::parse(&gold).map_err(|message| NliError::Format {
            path: shown.clone(),
            line: lineno,
            message,
        })?;
        let Some(label) = label else {
            out.dropped += 1;
            continue;
        };
        let (premise, premise_tree) = sentence(
            &s1,
            rec.sentence1_binary_parse.as_deref(),
            opts,
            &shown,
            lineno,
            "sentence1_binary_parse",
        )?;
        let (hypothesis, hypothesis_tree) = sentence(
            &s2,
            rec.sentence2_binary_parse.as_deref(),
            opts,
            &shown,
            lineno,
            "sentence2_binary_parse",
        )?;
        out.pairs.push(SentencePair {
            premise,
            hypothesis,
            premise_tree,
            hypothesis_tree,
            label,
        });
    }
    Ok(out)
}

/// Loads `label<TAB>premise<TAB>hypothesis` lines; no parses.
pub fn load_tsv(path: &Path, opts: &TextOptions) -> Result<LoadedPairs> {
    let shown = path.display().to_string();
    let mut out = LoadedPairs::default();
    for (i, line) in open(path)?.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| NliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(NliError::Format {
                path: shown,
                line: lineno,
                message: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        if lineno == 1 && matches!(cols[0], "label" | "gold_label") {
            continue;
        }
        let label = Label::parse(cols[0]).map_err(|message| NliError::Format {
            path: shown.clone(),
            line: lineno,
            message,
        })?;
        let Some(label) = label else {
            out.dropped += 1;
            continue;
        };
        let (premise, _) = sentence(cols[1], None, opts, &shown, lineno, "premise")?;
        let (hypothesis, _) = sentence(cols[2], None, opts, &shown, lineno, "hypothesis")?;
        out.pairs.push(SentencePair {
            premise,
            hypothesis,
            premise_tree: None,
            hypothesis_tree: None,
            label,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct JsonOut<'a> {
    gold_label: &'a str,
    sentence1: String,
    sentence2: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sentence1_binary_parse: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sentence2_binary_parse: Option<String>,
}

/// Writes pairs in the JSON-lines layout read by [`load_jsonl`].
pub fn write_jsonl(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    let file = File::create(path).map_err(|e| NliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let rec = JsonOut {
            gold_label: p.label.as_str(),
            sentence1: p.premise.join(" "),
            sentence2: p.hypothesis.join(" "),
            sentence1_binary_parse: p.premise_tree.as_ref().map(ParseTree::to_sexpr),
            sentence2_binary_parse: p.hypothesis_tree.as_ref().map(ParseTree::to_sexpr),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| NliError::io(path, e))?;
    }
    w.flush().map_err(|e| NliError::io(path, e))
}

/// Dispatches on extension: `.tsv` is tab-separated, anything else JSON lines.
pub fn load_pairs(path: &Path, opts: &TextOptions) -> Result<LoadedPairs> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => load_tsv(path, opts),
        _ => load_jsonl(path, opts),
    }
}
