use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nli_core::config::{LayerKind, ModelKind, Pooling, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "nli", version, about = "Train, evaluate and inspect sentence-pair inference models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints plus a log to the output directory.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint on a labeled file.
    Eval(EvalArgs),
    /// Write per-example class probabilities as JSON lines.
    Predict(PredictArgs),
    /// Combine a sequential and a tree model by averaging their distributions.
    Ensemble(EnsembleArgs),
    /// Export attention weights and gate norms for one example.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Defaults to the training file.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Whitespace-separated text embeddings (GloVe format).
    #[arg(long)]
    pub emb: Option<PathBuf>,
    /// JSON configuration; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "ESIM_OUTPUT_DIR", default_value = "runs")]
    pub output_dir: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub opts: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Esim,
    Tree,
    Fulltree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Avemax,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayerArg {
    Bilstm,
    Ff,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Esim => ModelKind::Esim,
            KindArg::Tree => ModelKind::Tree,
            KindArg::Fulltree => ModelKind::Fulltree,
        }
    }
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Avemax => Pooling::Avemax,
            PoolingArg::Sum => Pooling::Sum,
        }
    }
}

impl From<LayerArg> for LayerKind {
    fn from(l: LayerArg) -> Self {
        match l {
            LayerArg::Bilstm => LayerKind::Bilstm,
            LayerArg::Ff => LayerKind::Ff,
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct ModelFlags {
    #[arg(long, value_enum)]
    pub model: Option<KindArg>,
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
    /// Drop the difference and product blocks from the enhancement.
    #[arg(long)]
    pub no_diff_prod: bool,
    #[arg(long, conflicts_with = "no_hypothesis_attn")]
    pub no_premise_attn: bool,
    #[arg(long)]
    pub no_hypothesis_attn: bool,
    #[arg(long, value_enum)]
    pub encoder: Option<LayerArg>,
    #[arg(long, value_enum)]
    pub composition: Option<LayerArg>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    /// Separate input projections for the two tree-LSTM forget gates.
    #[arg(long)]
    pub untied_forget: bool,
    #[arg(long)]
    pub no_gate_biases: bool,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs without dev improvement before stopping; 0 disables.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    /// Batch examples of similar premise length together.
    #[arg(long)]
    pub bucket: bool,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub drop_punct: bool,
}

impl ModelFlags {
    /// Combinations that are invalid regardless of any config file.
    pub fn conflicts(&self) -> Option<String> {
        let tree = matches!(self.model, Some(KindArg::Tree | KindArg::Fulltree));
        let ff = self.encoder == Some(LayerArg::Ff) || self.composition == Some(LayerArg::Ff);
        if tree && ff {
            return Some("--encoder ff and --composition ff apply to --model esim only".into());
        }
        if self.untied_forget && self.model == Some(KindArg::Esim) {
            return Some("--untied-forget applies to tree models only".into());
        }
        None
    }
}

/// Layers command-line values over `base` (defaults or a config file).
pub fn resolve(base: TrainConfig, m: &ModelFlags, t: &TrainFlags) -> TrainConfig {
    let mut c = base;
    if let Some(k) = m.model {
        c.model.kind = k.into();
    }
    if let Some(p) = m.pooling {
        c.model.pooling = p.into();
    }
    if m.no_diff_prod {
        c.model.diff_prod = false;
    }
    if m.no_premise_attn {
        c.model.premise_attention = false;
    }
    if m.no_hypothesis_attn {
        c.model.hypothesis_attention = false;
    }
    if let Some(l) = m.encoder {
        c.model.encoder = l.into();
    }
    if let Some(l) = m.composition {
        c.model.composition = l.into();
    }
    if let Some(d) = m.embed_dim {
        c.model.embed_dim = d;
    }
    if let Some(d) = m.hidden_dim {
        c.model.hidden_dim = d;
    }
    if let Some(d) = m.mlp_dim {
        c.model.mlp_dim = d;
    }
    if m.untied_forget {
        c.model.tie_forget_input = false;
    }
    if m.no_gate_biases {
        c.model.gate_biases = false;
    }

    if let Some(s) = t.seed {
        c.seed = s;
    }
    if let Some(b) = t.batch_size {
        c.batch_size = b;
    }
    if let Some(d) = t.dropout {
        c.dropout = d;
    }
    if let Some(e) = t.epochs {
        c.max_epochs = e;
    }
    if let Some(lr) = t.lr {
        c.learning_rate = lr;
    }
    if let Some(p) = t.patience {
        c.patience = (p > 0).then_some(p);
    }
    if let Some(n) = t.max_grad_norm {
        c.max_grad_norm = Some(n);
    }
    if t.bucket {
        c.bucket_by_length = true;
    }
    if t.lowercase {
        c.text.lowercase = true;
    }
    if t.drop_punct {
        c.text.drop_punctuation = true;
    }
    c
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Write per-example prediction records (JSON lines) here.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Include attention matrices and gate norms in the dump.
    #[arg(long, requires = "dump")]
    pub details: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Defaults to standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// Prediction dump or checkpoint of the sequential model.
    #[arg(long)]
    pub esim: PathBuf,
    /// Prediction dump or checkpoint of the tree model.
    #[arg(long)]
    pub tree: PathBuf,
    /// Labeled data; required when either input is a checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Also report the accuracy of picking whichever model is right.
    #[arg(long)]
    pub oracle: bool,
    /// Paired t-test of the ensemble against the sequential model.
    #[arg(long)]
    pub ttest: bool,
    /// Write the ensemble's prediction records here.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Zero-based position of the example in the data file.
    #[arg(long)]
    pub index: usize,
    #[arg(long, env = "ESIM_OUTPUT_DIR", default_value = "runs")]
    pub output_dir: PathBuf,
}
