//! Confusion matrices and the evaluation suite: accuracy, unweighted Cohen's
//! kappa, relative classifier information, multiclass MCC, balanced accuracy
//! and per-class true positive rate, plus fold aggregation and table output.

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, NUM_CLASSES};
use crate::error::{Error, Result};

/// K x K counts, rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize, n: u64) {
        self.counts[truth * self.k + pred] += n;
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.k).map(|i| (0..self.k).map(|j| self.get(i, j)).sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.k).map(|j| (0..self.k).map(|i| self.get(i, j)).sum()).collect()
    }

    fn require_total(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::UndefinedMetric("confusion matrix is empty".into())),
            n => Ok(n as f64),
        }
    }

    /// Same matrix with class indices relabelled: new index `perm[i]` for old `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = ConfusionMatrix::zeros(self.k);
        for i in 0..self.k {
            for j in 0..self.k {
                out.add(perm[i], perm[j], self.get(i, j));
            }
        }
        out
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "label sequences differ in length ({} vs {})",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Precondition("confusion matrix needs at least one sample".into()));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::Precondition(format!("label {} out of range 0..{k}", t.max(p))));
        }
        cm.add(t, p, 1);
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(cm.trace() as f64 / cm.require_total()?)
}

/// Recall per class; `None` where the class has no true samples.
pub fn per_class_tpr(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    cm.row_sums()
        .iter()
        .enumerate()
        .map(|(i, &row)| (row > 0).then(|| cm.get(i, i) as f64 / row as f64))
        .collect()
}

pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.require_total()?;
    let p_o = cm.trace() as f64 / n;
    let p_e: f64 = cm
        .row_sums()
        .iter()
        .zip(cm.col_sums())
        .map(|(&r, c)| r as f64 * c as f64)
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(Error::UndefinedMetric(
            "Cohen's kappa: chance agreement is 1 (truth and prediction are the same single class)".into(),
        ));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// K-class Matthews correlation (covariance form); 0 when a marginal is degenerate.
pub fn mcc_multiclass(cm: &ConfusionMatrix) -> Result<f64> {
    let s = cm.require_total()?;
    let c = cm.trace() as f64;
    let t = cm.row_sums();
    let p = cm.col_sums();
    let tp: f64 = t.iter().zip(&p).map(|(&a, &b)| a as f64 * b as f64).sum();
    let pp: f64 = p.iter().map(|&v| (v as f64).powi(2)).sum();
    let tt: f64 = t.iter().map(|&v| (v as f64).powi(2)).sum();
    let denom = (s * s - pp) * (s * s - tt);
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((c * s - tp) / denom.sqrt())
}

fn entropy(probs: impl Iterator<Item = f64>) -> f64 {
    probs.filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

/// Relative classifier information: I(T; P) / H(T).
pub fn rci(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.require_total()?;
    let h_t = entropy(cm.row_sums().iter().map(|&r| r as f64 / n));
    if h_t <= 0.0 {
        return Err(Error::UndefinedMetric(
            "RCI: truth entropy is zero (fewer than two true classes present)".into(),
        ));
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let mut mi = 0.0;
    for i in 0..cm.k() {
        for j in 0..cm.k() {
            let nij = cm.get(i, j);
            if nij > 0 {
                let pij = nij as f64 / n;
                mi += pij * (nij as f64 * n / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    Ok((mi / h_t).clamp(0.0, 1.0))
}

/// Mean of defined per-class TPRs; classes without true samples are skipped.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let defined: Vec<f64> = per_class_tpr(cm).into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("balanced accuracy: no class has true samples".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub kappa: f64,
    pub rci: f64,
    pub mcc: f64,
    pub balanced_accuracy: f64,
    pub per_class_tpr: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(MetricReport {
            accuracy: accuracy(cm)?,
            kappa: cohens_kappa(cm)?,
            rci: rci(cm)?,
            mcc: mcc_multiclass(cm)?,
            balanced_accuracy: balanced_accuracy(cm)?,
            per_class_tpr: per_class_tpr(cm),
        })
    }

    pub fn scalars(&self) -> [f64; 5] {
        [self.accuracy, self.kappa, self.rci, self.mcc, self.balanced_accuracy]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n-1) standard deviation.
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub folds: usize,
    pub accuracy: MeanStd,
    pub kappa: MeanStd,
    pub rci: MeanStd,
    pub mcc: MeanStd,
    pub balanced_accuracy: MeanStd,
    /// Mean TPR per class over the folds where it is defined.
    pub per_class_tpr: Vec<Option<f64>>,
}

pub fn aggregate_folds(reports: &[MetricReport]) -> Result<AggregateReport> {
    if reports.len() < 2 {
        return Err(Error::Precondition(format!(
            "fold aggregation needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let k = reports.iter().map(|r| r.per_class_tpr.len()).max().unwrap_or(0);
    let per_class_tpr = (0..k)
        .map(|i| {
            let vals: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.per_class_tpr.get(i).copied().flatten())
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    Ok(AggregateReport {
        folds: reports.len(),
        accuracy: col(|r| r.accuracy),
        kappa: col(|r| r.kappa),
        rci: col(|r| r.rci),
        mcc: col(|r| r.mcc),
        balanced_accuracy: col(|r| r.balanced_accuracy),
        per_class_tpr,
    })
}

pub const UNDEFINED_MARKER: &str = "—";
pub const METRIC_COLUMNS: [&str; 5] = ["Accuracy (%)", "Cohen's κ", "RCI", "MCC", "BA"];

/// "97.85 ± 0.31" from (0.9785, 0.0031): percentage with two decimals.
pub fn format_percent(m: MeanStd) -> String {
    format!("{:.2} ± {:.2}", m.mean * 100.0, m.std * 100.0)
}

/// "0.972 ± 0.004": three decimals.
pub fn format_ratio(m: MeanStd) -> String {
    format!("{:.3} ± {:.3}", m.mean, m.std)
}

pub fn format_tpr(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", v * 100.0),
        None => UNDEFINED_MARKER.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedTables {
    pub metrics_text: String,
    pub metrics_csv: String,
    pub per_class_text: String,
    pub per_class_csv: String,
}

fn fixed_width(header: &[String], rows: &[Vec<String>]) -> String {
    let ncol = header.len();
    let widths: Vec<usize> = (0..ncol)
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain(std::iter::once(header[c].chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, &w))| {
                let pad = w - cell.chars().count();
                if i == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (ncol - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn to_csv(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Render method rows as the metric table and the per-class TPR table.
pub fn render_table(
    aggregates: &[(String, AggregateReport)],
    per_class: &[(String, Vec<Option<f64>>)],
) -> Result<RenderedTables> {
    let mut header = vec!["Method".to_string()];
    header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = aggregates
        .iter()
        .map(|(name, a)| {
            vec![
                name.clone(),
                format_percent(a.accuracy),
                format_ratio(a.kappa),
                format_ratio(a.rci),
                format_ratio(a.mcc),
                format_ratio(a.balanced_accuracy),
            ]
        })
        .collect();

    let mut pc_header = vec!["Method".to_string()];
    pc_header.extend(ClassLabel::ALL.iter().map(|c| c.name().to_string()));
    let pc_rows: Vec<Vec<String>> = per_class
        .iter()
        .map(|(name, tpr)| {
            let mut row = vec![name.clone()];
            row.extend((0..NUM_CLASSES).map(|i| format_tpr(tpr.get(i).copied().flatten())));
            row
        })
        .collect();

    Ok(RenderedTables {
        metrics_text: fixed_width(&header, &rows),
        metrics_csv: to_csv(&header, &rows)?,
        per_class_text: fixed_width(&pc_header, &pc_rows),
        per_class_csv: to_csv(&pc_header, &pc_rows)?,
    })
}
