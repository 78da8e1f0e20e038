use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use anyhow::anyhow;
use nli_core::checkpoint::{load_checkpoint, save_checkpoint, MAGIC};
use nli_core::config::TrainConfig;
use nli_core::corpus::{load_embeddings, load_pairs, EmbeddingOptions, Label, SentencePair, TextOptions, Vocabulary};
use nli_core::eval::{
    ensemble_records, evaluate, export_analysis, oracle_accuracy, paired_significance, read_records,
    records_accuracy, write_records, PredictionRecord,
};
use nli_core::model::{check_data, Model};
use nli_core::train::{derive_seed, train_loop};
use nli_core::NliError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::{resolve, AnalyzeArgs, Command, EnsembleArgs, EvalArgs, PredictArgs, TrainArgs};

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const RUNTIME: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code,
            error: error.into(),
        }
    }

    fn usage(msg: impl Into<String>) -> Self {
        Failure::new(USAGE, anyhow!(msg.into()))
    }
}

fn code_for(e: &NliError) -> u8 {
    match e {
        NliError::Shape { .. } | NliError::Axis { .. } | NliError::Contract(_) => RUNTIME,
        _ => DATA,
    }
}

impl From<NliError> for Failure {
    fn from(e: NliError) -> Self {
        Failure::new(code_for(&e), e)
    }
}

trait Context<T> {
    fn ctx(self, what: &str) -> Result<T, Failure>;
    fn data(self, what: &str) -> Result<T, Failure>;
}

impl<T> Context<T> for nli_core::Result<T> {
    fn ctx(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| {
            let code = code_for(&e);
            Failure::new(code, anyhow::Error::new(e).context(what.to_string()))
        })
    }

    /// Forces the data-error exit code.
    fn data(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(DATA, anyhow::Error::new(e).context(what.to_string())))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |e| Failure::new(DATA, NliError::io(path, e))
}

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Analyze(a) => analyze(a),
    }
}

fn read_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
}

/// The resolved configuration plus the ablation row it realises. The extra
/// key is ignored when the file is read back through `--config`.
fn config_echo(c: &TrainConfig) -> Result<String, Failure> {
    let mut v = serde_json::to_value(c).map_err(|e| Failure::new(RUNTIME, e))?;
    v["variant"] = c.model.variant_name().into();
    serde_json::to_string_pretty(&v).map_err(|e| Failure::new(RUNTIME, e))
}

fn load(path: &Path, opts: &TextOptions, what: &str) -> Result<Vec<SentencePair>, Failure> {
    let loaded = load_pairs(path, opts).ctx(&format!("loading {what}"))?;
    if loaded.dropped > 0 {
        eprintln!("{}: skipped {} pairs without a gold label", path.display(), loaded.dropped);
    }
    if loaded.pairs.is_empty() {
        return Err(Failure::new(DATA, anyhow!("{}: no labeled pairs", path.display())));
    }
    Ok(loaded.pairs)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    if let Some(msg) = a.model.conflicts() {
        return Err(Failure::usage(msg));
    }
    let base = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    let cfg = resolve(base, &a.model, &a.opts);
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;

    let train = load(&a.train, &cfg.text, "training data")?;
    check_data(&cfg.model, &train).data(&a.train.display().to_string())?;
    let dev = match &a.dev {
        Some(p) => {
            let dev = load(p, &cfg.text, "dev data")?;
            check_data(&cfg.model, &dev).data(&p.display().to_string())?;
            dev
        }
        None => train.clone(),
    };

    let out = &a.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let config_path = out.join("config.json");
    fs::write(&config_path, config_echo(&cfg)? + "\n").map_err(io_err(&config_path))?;

    let vocab = Vocabulary::build(&train);
    let opts = EmbeddingOptions {
        dim: cfg.model.embed_dim,
        oov_std: cfg.oov_std,
        lowercase_fallback: cfg.lowercase_fallback,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0]));
    let emb = load_embeddings(a.emb.as_deref(), &vocab, &opts, &mut rng).ctx("loading embeddings")?;
    eprintln!(
        "{}: {} train / {} dev pairs, vocabulary {} ({} pretrained)",
        cfg.model.variant_name(),
        train.len(),
        dev.len(),
        vocab.len(),
        emb.known
    );
    let model = Model::new(cfg.model.clone(), vocab, emb.matrix, cfg.seed)?;
    eprintln!("{} parameters", model.num_parameters());

    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let outcome = train_loop(&cfg, model, &train, &dev, |entry, _| {
        eprintln!(
            "epoch {:>3}  step {:>6}  loss {:.4}  dev {:.4}",
            entry.epoch, entry.step, entry.loss, entry.dev_accuracy
        );
        serde_json::to_writer(&mut log, entry)?;
        log.write_all(b"\n")
            .and_then(|_| log.flush())
            .map_err(|e| NliError::io(&log_path, e))
    })
    .ctx("training")?;

    save_checkpoint(&outcome.best, &cfg, &out.join("best.ckpt")).ctx("saving best checkpoint")?;
    save_checkpoint(&outcome.last, &cfg, &out.join("final.ckpt")).ctx("saving final checkpoint")?;
    match outcome.best_dev_accuracy {
        Some(acc) => println!("best dev accuracy {acc:.4} at epoch {}", outcome.best_epoch),
        None => println!("no epochs run; checkpoints hold the initial parameters"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, TrainConfig), Failure> {
    load_checkpoint(path).map_err(|e| Failure::new(DATA, e))
}

fn records_for(checkpoint: &Path, data: &Path, batch_size: usize, details: bool) -> Result<Vec<PredictionRecord>, Failure> {
    let (model, cfg) = load_model(checkpoint)?;
    let pairs = load(data, &cfg.text, "evaluation data")?;
    check_data(&model.config, &pairs).data(&data.display().to_string())?;
    Ok(evaluate(&model, &pairs, batch_size, details).ctx("evaluating")?.records)
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    if a.batch_size == 0 {
        return Err(Failure::usage("--batch-size must be at least 1"));
    }
    let records = records_for(&a.checkpoint, &a.data, a.batch_size, a.details)?;
    println!("accuracy {:.4}", records_accuracy(&records));
    if let Some(path) = &a.dump {
        write_records(path, &records).ctx("writing dump")?;
        eprintln!("wrote {} records to {}", records.len(), path.display());
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), Failure> {
    if a.batch_size == 0 {
        return Err(Failure::usage("--batch-size must be at least 1"));
    }
    let records = records_for(&a.checkpoint, &a.data, a.batch_size, false)?;
    match &a.output {
        Some(path) => write_records(path, &records).ctx("writing predictions")?,
        None => {
            let mut out = BufWriter::new(io::stdout().lock());
            for r in &records {
                serde_json::to_writer(&mut out, r).map_err(|e| Failure::new(RUNTIME, e))?;
                writeln!(out).map_err(|e| Failure::new(RUNTIME, e))?;
            }
            out.flush().map_err(|e| Failure::new(RUNTIME, e))?;
        }
    }
    Ok(())
}

fn is_checkpoint(path: &Path) -> Result<bool, Failure> {
    let mut head = [0u8; 8];
    let mut f = File::open(path).map_err(io_err(path))?;
    let n = f.read(&mut head).map_err(io_err(path))?;
    Ok(n == head.len() && &head == MAGIC)
}

fn ensemble_input(path: &Path, data: Option<&Path>, batch_size: usize) -> Result<Vec<PredictionRecord>, Failure> {
    if is_checkpoint(path)? {
        let Some(data) = data else {
            return Err(Failure::usage(format!("{} is a checkpoint; pass --data to run it", path.display())));
        };
        records_for(path, data, batch_size, false)
    } else {
        read_records(path).ctx(&format!("reading {}", path.display()))
    }
}

fn ensemble(a: EnsembleArgs) -> Result<(), Failure> {
    if a.batch_size == 0 {
        return Err(Failure::usage("--batch-size must be at least 1"));
    }
    let esim = ensemble_input(&a.esim, a.data.as_deref(), a.batch_size)?;
    let tree = ensemble_input(&a.tree, a.data.as_deref(), a.batch_size)?;
    let him = ensemble_records(&esim, &tree).data("combining predictions")?;
    println!("esim accuracy {:.4}", records_accuracy(&esim));
    println!("tree accuracy {:.4}", records_accuracy(&tree));
    println!("him accuracy {:.4}", records_accuracy(&him));
    if a.oracle {
        println!("oracle accuracy {:.4}", oracle_accuracy(&esim, &tree).data("oracle")?);
    }
    if a.ttest {
        let t = paired_significance(&him, &esim).data("significance test")?;
        println!(
            "paired t-test (him vs esim, per example, one-tailed): n = {}, mean diff = {:.6}, t = {:.4}, dof = {}, p = {:.6}",
            t.n, t.mean_difference, t.t, t.dof, t.p
        );
        if let Some(note) = &t.degenerate {
            println!("note: {note}");
        }
    }
    if let Some(path) = &a.dump {
        write_records(path, &him).ctx("writing dump")?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<(), Failure> {
    let (model, cfg) = load_model(&a.checkpoint)?;
    let pairs = load(&a.data, &cfg.text, "analysis data")?;
    let Some(pair) = pairs.get(a.index) else {
        return Err(Failure::new(
            DATA,
            anyhow!("example index {} out of range ({} has {} pairs)", a.index, a.data.display(), pairs.len()),
        ));
    };
    check_data(&model.config, std::slice::from_ref(pair)).data(&a.data.display().to_string())?;
    let (probs, analysis) = model.analyze(pair).ctx("analysing")?;
    let files = export_analysis(&analysis, &a.output_dir).ctx("exporting")?;
    let shown: Vec<String> = Label::ALL
        .iter()
        .map(|l| format!("{} {:.4}", l.as_str(), probs[l.index()]))
        .collect();
    println!("gold {}  {}", pair.label.as_str(), shown.join("  "));
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
