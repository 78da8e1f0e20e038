//! Accuracy, probability-averaged ensembling, oracle accuracy, paired
//! significance and analysis exports.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{Label, SentencePair};
use crate::error::{NliError, Result};
use crate::model::{ExampleAnalysis, Model};
use crate::tensor::Tensor;

/// Tolerance on the total mass of a probability vector.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(probs: &[[f64; 3]], pairs: &[SentencePair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let correct = probs
        .iter()
        .zip(pairs)
        .filter(|(p, pair)| argmax(&p[..]) == pair.label.index())
        .count();
    correct as f64 / pairs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Position of the example in its input file.
    pub id: usize,
    pub probabilities: [f64; 3],
    pub predicted: Label,
    pub gold: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_norms: Option<GateNorms>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateNorms {
    pub premise: Vec<f64>,
    pub hypothesis: Vec<f64>,
}

impl PredictionRecord {
    pub fn new(id: usize, probabilities: [f64; 3], gold: Label) -> Self {
        PredictionRecord {
            id,
            probabilities,
            predicted: Label::from_index(argmax(&probabilities)).expect("three classes"),
            gold,
            attention: None,
            gate_norms: None,
        }
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.gold
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accuracy: f64,
    pub records: Vec<PredictionRecord>,
}

pub fn records_accuracy(records: &[PredictionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64
}

/// Scores `pairs` in input order. With `details`, each record also carries
/// the attention matrix and composition input-gate norms.
pub fn evaluate(model: &Model, pairs: &[SentencePair], batch_size: usize, details: bool) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(NliError::contract("evaluation set is empty"));
    }
    let rows = model.store.value(model.embedding_id()).rows();
    if rows != model.vocab.len() {
        return Err(NliError::VocabMismatch(format!(
            "embedding has {rows} rows but the vocabulary has {} entries",
            model.vocab.len()
        )));
    }
    model.check_data(pairs)?;
    let records: Vec<PredictionRecord> = if details {
        pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (probs, an) = model.analyze(p)?;
                let mut r = PredictionRecord::new(i, probs, p.label);
                r.attention = Some((0..an.attention.rows()).map(|k| an.attention.row_slice(k).to_vec()).collect());
                if let (Some(a), Some(b)) = (an.premise_gate_norms, an.hypothesis_gate_norms) {
                    r.gate_norms = Some(GateNorms { premise: a, hypothesis: b });
                }
                Ok(r)
            })
            .collect::<Result<_>>()?
    } else {
        model
            .predict(pairs, batch_size)?
            .into_iter()
            .zip(pairs)
            .enumerate()
            .map(|(i, (probs, p))| PredictionRecord::new(i, probs, p.label))
            .collect()
    };
    Ok(Evaluation {
        accuracy: records_accuracy(&records),
        records,
    })
}

fn check_distribution(p: &[f64; 3], which: &str) -> Result<()> {
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(NliError::contract(format!("{which} probabilities {p:?} are not a distribution")));
    }
    Ok(())
}

/// Arithmetic mean of two class distributions and its argmax label.
pub fn ensemble_him(p_esim: &[f64; 3], p_tree: &[f64; 3]) -> Result<([f64; 3], Label)> {
    check_distribution(p_esim, "first")?;
    check_distribution(p_tree, "second")?;
    let mut avg = [0.0; 3];
    for k in 0..3 {
        avg[k] = (p_esim[k] + p_tree[k]) / 2.0;
    }
    let label = Label::from_index(argmax(&avg)).expect("three classes");
    Ok((avg, label))
}

fn check_aligned(a: &[PredictionRecord], b: &[PredictionRecord]) -> Result<()> {
    if a.len() != b.len() {
        return Err(NliError::Misaligned(format!("{} records vs {} records", a.len(), b.len())));
    }
    if let Some((k, (x, y))) = a
        .iter()
        .zip(b)
        .enumerate()
        .find(|(_, (x, y))| x.id != y.id || x.gold != y.gold)
    {
        return Err(NliError::Misaligned(format!(
            "record {k}: id {} ({}) vs id {} ({})",
            x.id,
            x.gold.as_str(),
            y.id,
            y.gold.as_str()
        )));
    }
    Ok(())
}

pub fn ensemble_records(a: &[PredictionRecord], b: &[PredictionRecord]) -> Result<Vec<PredictionRecord>> {
    check_aligned(a, b)?;
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let (avg, _) = ensemble_him(&x.probabilities, &y.probabilities)?;
            Ok(PredictionRecord::new(x.id, avg, x.gold))
        })
        .collect()
}

/// Fraction of examples that at least one of the two models gets right.
pub fn oracle_accuracy(a: &[PredictionRecord], b: &[PredictionRecord]) -> Result<f64> {
    check_aligned(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let hits = a.iter().zip(b).filter(|(x, y)| x.correct() || y.correct()).count();
    Ok(hits as f64 / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_difference: f64,
    pub t: f64,
    pub dof: usize,
    /// One-tailed p-value for "first model is more accurate".
    pub p: f64,
    /// Set when the differences have zero variance.
    pub degenerate: Option<String>,
}

/// One-tailed paired t-test over per-example 0/1 correctness differences
/// (first minus second).
pub fn paired_significance(a: &[PredictionRecord], b: &[PredictionRecord]) -> Result<PairedTTest> {
    check_aligned(a, b)?;
    let n = a.len();
    if n < 2 {
        return Err(NliError::contract("the paired t-test needs at least two examples"));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| f64::from(u8::from(x.correct())) - f64::from(u8::from(y.correct())))
        .collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let dof = n - 1;
    if var == 0.0 {
        let (t, p, note) = if mean > 0.0 {
            (f64::INFINITY, 0.0, "first model is right wherever the second is, and more often")
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0, "second model dominates the first")
        } else {
            (0.0, 1.0, "no difference")
        };
        return Ok(PairedTTest {
            n,
            mean_difference: mean,
            t,
            dof,
            p,
            degenerate: Some(note.into()),
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| NliError::contract(e.to_string()))?;
    Ok(PairedTTest {
        n,
        mean_difference: mean,
        t,
        dof,
        p: 1.0 - dist.cdf(t),
        degenerate: None,
    })
}

// ---- files -----------------------------------------------------------------

pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| NliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| NliError::io(path, e))?;
    }
    w.flush().map_err(|e| NliError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = File::open(path).map_err(|e| NliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| NliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| NliError::Format {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> NliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => NliError::io(path, io),
        other => NliError::Format {
            path: path.display().to_string(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Matrix with a header row of column labels and a label column.
pub fn write_matrix_csv(path: &Path, rows: &[String], cols: &[String], m: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec![String::new()];
    header.extend(cols.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (r, label) in rows.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(m.row_slice(r).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| NliError::io(path, e))
}

/// Two columns: node or position label, and the norm.
pub fn write_gate_csv(path: &Path, labels: &[String], norms: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["id", "norm"]).map_err(|e| csv_err(path, e))?;
    for (l, n) in labels.iter().zip(norms) {
        w.write_record([l.clone(), n.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| NliError::io(path, e))
}

/// Writes `attention.csv` (rows normalized over the hypothesis),
/// `attention_over_premise.csv` and, when the composition layer has gates,
/// `gates_premise.csv` / `gates_hypothesis.csv` into `dir`.
pub fn export_analysis(analysis: &ExampleAnalysis, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| NliError::io(dir, e))?;
    let mut written = Vec::new();
    let a = &analysis.premise_labels;
    let b = &analysis.hypothesis_labels;
    let p = dir.join("attention.csv");
    write_matrix_csv(&p, a, b, &analysis.attention)?;
    written.push(p);
    let p = dir.join("attention_over_premise.csv");
    write_matrix_csv(&p, a, b, &analysis.attention_over_premise)?;
    written.push(p);
    if let Some(norms) = &analysis.premise_gate_norms {
        let p = dir.join("gates_premise.csv");
        write_gate_csv(&p, a, norms)?;
        written.push(p);
    }
    if let Some(norms) = &analysis.hypothesis_gate_norms {
        let p = dir.join("gates_hypothesis.csv");
        write_gate_csv(&p, b, norms)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(id: usize, p: [f64; 3], gold: Label) -> PredictionRecord {
        PredictionRecord::new(id, p, gold)
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
    }

    #[test]
    fn accuracy_examples() {
        let gold = [Label::Entailment, Label::Neutral, Label::Contradiction, Label::Neutral];
        let right: Vec<_> = gold
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut p = [0.1; 3];
                p[g.index()] = 0.8;
                rec(i, p, *g)
            })
            .collect();
        assert_eq!(records_accuracy(&right), 1.0);
        let mut half = right.clone();
        half[0] = rec(0, [0.1, 0.8, 0.1], gold[0]);
        half[1] = rec(1, [0.8, 0.1, 0.1], gold[1]);
        assert_eq!(records_accuracy(&half), 0.5);
    }

    #[test]
    fn ensemble_examples() {
        let (avg, label) = ensemble_him(&[0.6, 0.3, 0.1], &[0.2, 0.5, 0.3]).unwrap();
        for (a, b) in avg.iter().zip([0.4, 0.4, 0.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(label, Label::Entailment);
        let p = [0.2, 0.3, 0.5];
        assert_eq!(ensemble_him(&p, &p).unwrap().0, p);
        assert!(ensemble_him(&[0.5, 0.5, 0.5], &p).is_err());
        assert!((avg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_argmax_scale_invariance() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let mut draw = || {
                let v: [f64; 3] = [r.random(), r.random(), r.random()];
                let s: f64 = v.iter().sum();
                [v[0] / s, v[1] / s, v[2] / s]
            };
            let (p, q) = (draw(), draw());
            let c = r.random_range(0.1..10.0);
            let norm = |x: [f64; 3]| {
                let s: f64 = x.iter().sum();
                [x[0] / s, x[1] / s, x[2] / s]
            };
            // a common positive rescaling of both inputs
            let ps = norm([p[0] * c, p[1] * c, p[2] * c]);
            let qs = norm([q[0] * c, q[1] * c, q[2] * c]);
            assert_eq!(ensemble_him(&p, &q).unwrap().1, ensemble_him(&ps, &qs).unwrap().1);
        }
    }

    #[test]
    fn oracle_examples() {
        let a = vec![rec(0, [0.9, 0.05, 0.05], Label::Entailment), rec(1, [0.9, 0.05, 0.05], Label::Neutral)];
        let b = vec![rec(0, [0.05, 0.9, 0.05], Label::Entailment), rec(1, [0.05, 0.05, 0.9], Label::Neutral)];
        assert_eq!(oracle_accuracy(&a, &b).unwrap(), 1.0);
        let wrong = vec![rec(0, [0.05, 0.9, 0.05], Label::Entailment), rec(1, [0.9, 0.05, 0.05], Label::Neutral)];
        assert_eq!(oracle_accuracy(&wrong, &wrong).unwrap(), 0.0);
        let shifted = vec![rec(1, [0.9, 0.05, 0.05], Label::Entailment), rec(0, [0.9, 0.05, 0.05], Label::Neutral)];
        let err = oracle_accuracy(&a, &shifted).unwrap_err();
        assert!(matches!(err, NliError::Misaligned(ref m) if m.starts_with("record 0")), "{err}");
    }

    fn from_correctness(bits: &[bool]) -> Vec<PredictionRecord> {
        bits.iter()
            .enumerate()
            .map(|(i, &ok)| rec(i, if ok { [0.8, 0.1, 0.1] } else { [0.1, 0.8, 0.1] }, Label::Entailment))
            .collect()
    }

    #[test]
    fn ttest_examples() {
        let a = from_correctness(&[true, false, true, true]);
        let t = paired_significance(&a, &a).unwrap();
        assert_eq!(t.degenerate.as_deref(), Some("no difference"));

        let a = from_correctness(&[true; 100]);
        let b = from_correctness(&[false; 100]);
        let t = paired_significance(&a, &b).unwrap();
        assert!(t.p < 0.01);

        // textbook formula on a mixed vector
        let xa: Vec<bool> = (0..40).map(|i| i % 3 != 0).collect();
        let xb: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
        let d: Vec<f64> = xa.iter().zip(&xb).map(|(a, b)| *a as i32 as f64 - *b as i32 as f64).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        let want = mean / (sd / n.sqrt());
        let t = paired_significance(&from_correctness(&xa), &from_correctness(&xb)).unwrap();
        assert!((t.t - want).abs() < 1e-9);
        assert_eq!(t.dof, 39);
        assert!(t.p > 0.0 && t.p < 0.5);
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("preds.jsonl");
        let mut r = rec(3, [0.2, 0.3, 0.5], Label::Neutral);
        r.attention = Some(vec![vec![1.0]]);
        let recs = vec![r, rec(4, [0.5, 0.3, 0.2], Label::Entailment)];
        write_records(&p, &recs).unwrap();
        assert_eq!(read_records(&p).unwrap(), recs);
    }

    #[test]
    fn analysis_files() {
        let dir = tempfile::tempdir().unwrap();
        let an = ExampleAnalysis {
            premise_labels: vec!["a,b".into()],
            hypothesis_labels: vec!["c".into()],
            attention: Tensor::scalar(1.0),
            attention_over_premise: Tensor::scalar(1.0),
            premise_gate_norms: Some(vec![0.5]),
            hypothesis_gate_norms: None,
        };
        let out = dir.path().join("nested");
        let files = export_analysis(&an, &out).unwrap();
        assert_eq!(files.len(), 3);
        let text = fs::read_to_string(out.join("attention.csv")).unwrap();
        assert_eq!(text, ",c\n\"a,b\",1\n");
        let gates = fs::read_to_string(out.join("gates_premise.csv")).unwrap();
        assert_eq!(gates, "id,norm\n\"a,b\",0.5\n");
    }
}
