//! Accuracy tables, confusion matrices and per-image vote logs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use crate::error::{Error, Result};

/// Row order of the comparison table. Rows not listed here follow in insertion order.
pub const TABLE_ORDER: [&str; 11] = [
    "VGGNet (7)",
    "VGGNet (6)",
    "VGGNet (5)",
    "AlexNet (7)",
    "AlexNet (6)",
    "AlexNet (4)",
    "VGGNet (567)",
    "AlexNet (457)",
    "AlexNet (467)",
    "Deep Ensemble",
    "SIFT + Deep Ensemble",
];

/// Accuracy and confusion matrix of one prediction vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Fraction correct in [0, 1].
    pub accuracy: f64,
    /// confusion[truth][predicted].
    pub confusion: Vec<Vec<u64>>,
}

/// Compares class indices; both must be below `num_classes`.
pub fn evaluate(predictions: &[usize], truth: &[usize], num_classes: usize) -> Result<Evaluation> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch { left: predictions.len(), right: truth.len() });
    }
    if predictions.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    let mut correct = 0usize;
    for (&p, &t) in predictions.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::InvalidArgument(format!("class index outside {num_classes} classes")));
        }
        confusion[t][p] += 1;
        correct += usize::from(p == t);
    }
    Ok(Evaluation { accuracy: correct as f64 / truth.len() as f64, confusion })
}

/// One table row; a method may have plain and PCA-reduced variants.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TableRow {
    pub name: String,
    pub svm: Option<f64>,
    pub pca_svm: Option<f64>,
}

/// Per-image record of every member's vote.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VoteLog {
    pub members: Vec<String>,
    /// (image id, true label, member votes, ensemble decision), labels not indices.
    pub rows: Vec<(u64, u32, Vec<u32>, u32)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<TableRow>,
    pub class_names: Vec<String>,
    /// Confusion matrix of the headline ensemble (or the only member).
    pub confusion: Vec<Vec<u64>>,
    pub confusion_of: String,
    pub seed: u64,
    pub votes: VoteLog,
}

impl EvalReport {
    /// Sets accuracy for `name`, creating the row on first use.
    pub fn record(&mut self, name: &str, reduced: bool, accuracy: f64) {
        let idx = match self.rows.iter().position(|r| r.name == name) {
            Some(i) => i,
            None => {
                self.rows.push(TableRow { name: name.to_string(), ..Default::default() });
                self.rows.len() - 1
            }
        };
        let row = &mut self.rows[idx];
        if reduced {
            row.pca_svm = Some(accuracy);
        } else {
            row.svm = Some(accuracy);
        }
    }

    /// Rows in table order: known names first, then the rest as recorded.
    pub fn ordered_rows(&self) -> Vec<&TableRow> {
        let rank = |r: &TableRow| TABLE_ORDER.iter().position(|n| *n == r.name).unwrap_or(TABLE_ORDER.len());
        let mut rows: Vec<(usize, usize, &TableRow)> =
            self.rows.iter().enumerate().map(|(i, r)| (rank(r), i, r)).collect();
        rows.sort_by_key(|&(rank, i, _)| (rank, i));
        rows.into_iter().map(|(_, _, r)| r).collect()
    }

    pub fn table_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
        let rows = self.ordered_rows();
        let width = rows.iter().map(|r| r.name.len()).chain([6]).max().unwrap_or(6);
        let mut s = format!("{:<width$}  {:>8}  {:>8}\n", "Method", "SVM", "PCA+SVM");
        for r in rows {
            let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}", r.name, cell(r.svm), cell(r.pca_svm));
        }
        s
    }

    pub fn confusion_text(&self) -> String {
        if self.confusion.is_empty() {
            return String::new();
        }
        let k = self.confusion.len();
        let names: Vec<String> =
            (0..k).map(|i| self.class_names.get(i).cloned().unwrap_or_else(|| i.to_string())).collect();
        let w = names.iter().map(String::len).max().unwrap_or(1).max(5);
        let mut s = format!("Confusion matrix ({}; rows = truth, columns = predicted)\n", self.confusion_of);
        let _ = write!(s, "{:<w$}", "");
        for n in &names {
            let _ = write!(s, " {n:>w$}");
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{:<w$}", names[i]);
            for c in row {
                let _ = write!(s, " {c:>w$}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = self.table_text();
        if !self.confusion.is_empty() {
            s.push('\n');
            s.push_str(&self.confusion_text());
        }
        let _ = writeln!(s, "\nseed = {}", self.seed);
        s
    }
}

/// Writes `report.txt`, `report.csv` and `votes.csv` into `dir`. Their content depends
/// only on the inputs, so repeated runs produce identical files.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let txt = dir.join("report.txt");
    fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))?;

    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    w.write_record(["method", "svm", "pca_svm"]).map_err(|e| csv_err(&csv_path, e))?;
    for r in report.ordered_rows() {
        let cell = |v: Option<f64>| v.map_or(String::new(), |a| a.to_string());
        w.write_record([r.name.clone(), cell(r.svm), cell(r.pca_svm)]).map_err(|e| csv_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let votes_path = dir.join("votes.csv");
    let mut w = csv::Writer::from_path(&votes_path).map_err(|e| csv_err(&votes_path, e))?;
    let mut header = vec!["id".to_string(), "truth".to_string()];
    header.extend(report.votes.members.iter().cloned());
    header.push("ensemble".into());
    w.write_record(&header).map_err(|e| csv_err(&votes_path, e))?;
    for (id, truth, votes, decision) in &report.votes.rows {
        let mut rec = vec![id.to_string(), truth.to_string()];
        rec.extend(votes.iter().map(u32::to_string));
        rec.push(decision.to_string());
        w.write_record(&rec).map_err(|e| csv_err(&votes_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&votes_path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Reads the table back from `report.csv`.
pub fn read_report_csv(path: &Path) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let cell = |j: usize| -> Result<Option<f64>> {
            match rec.get(j).unwrap_or("") {
                "" => Ok(None),
                v => v.parse().map(Some).map_err(|_| Error::Config { line: i + 2, reason: format!("bad accuracy {v:?}") }),
            }
        };
        rows.push(TableRow { name: rec.get(0).unwrap_or("").to_string(), svm: cell(1)?, pca_svm: cell(2)? });
    }
    Ok(rows)
}

/// Wall-clock time per stage, kept apart from the report so reports stay reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    pub stages: Vec<(String, Duration)>,
}

impl Timings {
    pub fn push(&mut self, stage: &str, d: Duration) {
        self.stages.push((stage.to_string(), d));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (name, d) in &self.stages {
            let _ = writeln!(s, "{name}\t{:.3}", d.as_secs_f64());
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}
