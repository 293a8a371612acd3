//! Classification and calibration metrics for ordinal 4-stage predictions.

use std::fmt::Write as _;

use crate::error::{HammError, Result};

pub const DEFAULT_ECE_BINS: usize = 10;

/// Accuracy, macro F1 and per-class recall from hard predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub per_class_acc: Vec<f64>,
    /// `matrix[true][pred]`.
    pub matrix: Vec<Vec<usize>>,
}

fn check_labels(labels: &[usize], other: usize, num_classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(HammError::Data("metrics need at least one sample".into()));
    }
    if labels.len() != other {
        return Err(HammError::Shape(format!(
            "{} labels but {} predictions",
            labels.len(),
            other
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(HammError::Data(format!("label {bad} outside 0..{num_classes}")));
    }
    Ok(())
}

pub fn confusion_matrix(labels: &[usize], preds: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_labels(labels, preds.len(), num_classes)?;
    check_labels(preds, labels.len(), num_classes)?;
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in labels.iter().zip(preds) {
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn confusion_metrics(labels: &[usize], preds: &[usize], num_classes: usize) -> Result<ConfusionMetrics> {
    let matrix = confusion_matrix(labels, preds, num_classes)?;
    let n = labels.len() as f64;
    let correct: usize = (0..num_classes).map(|c| matrix[c][c]).sum();
    let mut f1_sum = 0.0;
    let mut per_class_acc = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = matrix[c][c] as f64;
        let actual: usize = matrix[c].iter().sum();
        let predicted: usize = matrix.iter().map(|row| row[c]).sum();
        let denom = actual as f64 + predicted as f64;
        f1_sum += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        per_class_acc.push(if actual > 0 { tp / actual as f64 } else { 0.0 });
    }
    Ok(ConfusionMetrics {
        accuracy: correct as f64 / n,
        f1_macro: f1_sum / num_classes as f64,
        per_class_acc,
        matrix,
    })
}

/// Quadratic weighted Cohen's kappa between true and predicted ordinal labels.
pub fn kappa_quadratic(labels: &[usize], preds: &[usize], num_classes: usize) -> Result<f64> {
    let observed = confusion_matrix(labels, preds, num_classes)?;
    let single = |v: &[usize]| v.iter().all(|&x| x == v[0]);
    if single(labels) && single(preds) {
        if labels[0] == preds[0] {
            return Ok(1.0);
        }
        return Err(HammError::Numeric(
            "kappa undefined: each rater used a single class".into(),
        ));
    }
    let n = labels.len() as f64;
    let k = num_classes;
    let rows: Vec<f64> = observed.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let cols: Vec<f64> = (0..k).map(|j| observed.iter().map(|r| r[j]).sum::<usize>() as f64).collect();
    let scale = ((k - 1) * (k - 1)).max(1) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64).powi(2)) / scale;
            num += w * observed[i][j] as f64;
            den += w * rows[i] * cols[j] / n;
        }
    }
    if den == 0.0 {
        return Err(HammError::Numeric(
            "kappa undefined: expected disagreement is zero".into(),
        ));
    }
    Ok(1.0 - num / den)
}

/// Midranks (1-based, ties averaged) of `values`.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Binary AUC of `scores` for `positive` via the Mann-Whitney rank statistic.
pub fn binary_auc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUROC per class and their macro average. Classes that never
/// occur as a label (or occur in every label) get `None` and are left out of
/// the average.
pub fn auroc_ovr(labels: &[usize], probs: &[Vec<f64>]) -> Result<(f64, Vec<Option<f64>>)> {
    let k = probs.first().map(|p| p.len()).unwrap_or(0);
    check_labels(labels, probs.len(), k.max(1))?;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            binary_auc(&pos, &scores)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(HammError::Data("AUROC needs at least two classes in the labels".into()));
    }
    Ok((present.iter().sum::<f64>() / present.len() as f64, per_class))
}

/// One row of a reliability diagram over the bin `(lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Index of the equal-width bin `(m/M, (m+1)/M]` holding `conf`; zero maps to the first bin.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut idx = ((conf * m).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    while idx > 0 && conf <= idx as f64 / m {
        idx -= 1;
    }
    while idx + 1 < bins && conf > (idx + 1) as f64 / m {
        idx += 1;
    }
    idx
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Expected calibration error with `bins` equal-width confidence bins, plus the bin table.
pub fn ece(labels: &[usize], probs: &[Vec<f64>], bins: usize) -> Result<(f64, Vec<ReliabilityBin>)> {
    if bins == 0 {
        return Err(HammError::Config("ECE needs at least one bin".into()));
    }
    let k = probs.first().map(|p| p.len()).unwrap_or(0);
    check_labels(labels, probs.len(), k.max(1))?;
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (&l, p) in labels.iter().zip(probs) {
        let pred = argmax(p);
        let conf = p[pred];
        let b = bin_index(conf, bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == l {
            correct[b] += 1;
        }
    }
    let table: Vec<ReliabilityBin> = (0..bins)
        .map(|b| {
            let n = count[b];
            ReliabilityBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: n,
                mean_confidence: if n > 0 { conf_sum[b] / n as f64 } else { 0.0 },
                accuracy: if n > 0 { correct[b] as f64 / n as f64 } else { 0.0 },
            }
        })
        .collect();
    Ok((ece_from_bins(&table), table))
}

/// ECE computed from a reliability table alone.
pub fn ece_from_bins(table: &[ReliabilityBin]) -> f64 {
    let n: usize = table.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    table
        .iter()
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

pub fn brier(labels: &[usize], probs: &[Vec<f64>]) -> Result<f64> {
    let k = probs.first().map(|p| p.len()).unwrap_or(0);
    check_labels(labels, probs.len(), k.max(1))?;
    let total: f64 = labels
        .iter()
        .zip(probs)
        .map(|(&l, p)| {
            p.iter()
                .enumerate()
                .map(|(c, &v)| {
                    let y = if c == l { 1.0 } else { 0.0 };
                    (v - y) * (v - y)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean cross-entropy of probability rows, with the log clamped at 1e-12.
pub fn cross_entropy(labels: &[usize], probs: &[Vec<f64>]) -> Result<f64> {
    let k = probs.first().map(|p| p.len()).unwrap_or(0);
    check_labels(labels, probs.len(), k.max(1))?;
    let total: f64 = labels.iter().zip(probs).map(|(&l, p)| -p[l].max(1e-12).ln()).sum();
    Ok(total / labels.len() as f64)
}

/// Every scalar metric plus the reliability table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub auroc_macro: f64,
    pub kappa_qw: f64,
    pub ece: f64,
    pub brier: f64,
    pub loss: f64,
    pub per_class_acc: Vec<f64>,
    pub reliability: Vec<ReliabilityBin>,
}

impl EvalReport {
    /// Scalar metrics by name, in report order.
    pub fn scalars(&self) -> Vec<(String, f64)> {
        let mut v = vec![
            ("accuracy".to_string(), self.accuracy),
            ("f1_macro".to_string(), self.f1_macro),
            ("auroc_macro".to_string(), self.auroc_macro),
            ("kappa_qw".to_string(), self.kappa_qw),
            ("ece".to_string(), self.ece),
            ("brier".to_string(), self.brier),
            ("loss".to_string(), self.loss),
        ];
        for (c, a) in self.per_class_acc.iter().enumerate() {
            v.push((format!("acc_class_{c}"), *a));
        }
        v
    }

    /// `key = value` lines; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.n);
        for (k, v) in self.scalars() {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        s
    }

    pub fn reliability_csv(&self) -> String {
        reliability_csv(&self.reliability)
    }
}

pub fn reliability_csv(table: &[ReliabilityBin]) -> String {
    let mut s = String::from("bin_lower,bin_upper,count,mean_confidence,accuracy\n");
    for b in table {
        let _ = writeln!(
            s,
            "{:?},{:?},{},{:?},{:?}",
            b.lower, b.upper, b.count, b.mean_confidence, b.accuracy
        );
    }
    s
}

pub fn parse_reliability_csv(text: &str) -> Result<Vec<ReliabilityBin>> {
    let bad = |l: &str| HammError::Data(format!("malformed reliability row '{l}'"));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(l));
            }
            Ok(ReliabilityBin {
                lower: f[0].parse().map_err(|_| bad(l))?,
                upper: f[1].parse().map_err(|_| bad(l))?,
                count: f[2].parse().map_err(|_| bad(l))?,
                mean_confidence: f[3].parse().map_err(|_| bad(l))?,
                accuracy: f[4].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}

/// Computes every metric from labels and probability rows.
pub fn evaluate(labels: &[usize], probs: &[Vec<f64>], bins: usize) -> Result<EvalReport> {
    let k = probs.first().map(|p| p.len()).unwrap_or(0);
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let cm = confusion_metrics(labels, &preds, k)?;
    let kappa = match kappa_quadratic(labels, &preds, k) {
        Ok(v) => v,
        Err(HammError::Numeric(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let auroc = match auroc_ovr(labels, probs) {
        Ok((v, _)) => v,
        Err(HammError::Data(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    let (ece_value, reliability) = ece(labels, probs, bins)?;
    Ok(EvalReport {
        n: labels.len(),
        accuracy: cm.accuracy,
        f1_macro: cm.f1_macro,
        auroc_macro: auroc,
        kappa_qw: kappa,
        ece: ece_value,
        brier: brier(labels, probs)?,
        loss: cross_entropy(labels, probs)?,
        per_class_acc: cm.per_class_acc,
        reliability,
    })
}

/// Mean and sample standard deviation of a metric across runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = if !values.is_empty() && values.iter().all(|v| *v == values[0]) {
        values[0]
    } else {
        values.iter().sum::<f64>() / n
    };
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MeanStd {
        mean,
        std: var.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Per-metric mean ± std over several reports.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub runs: usize,
    pub metrics: Vec<(String, MeanStd)>,
}

impl AggregateReport {
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| HammError::Data("no reports to aggregate".into()))?;
        let names: Vec<String> = first.scalars().into_iter().map(|(k, _)| k).collect();
        let metrics = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let vals: Vec<f64> = reports.iter().map(|r| r.scalars()[i].1).collect();
                (name.clone(), mean_std(&vals))
            })
            .collect();
        Ok(Self {
            runs: reports.len(),
            metrics,
        })
    }

    pub fn get(&self, name: &str) -> Option<MeanStd> {
        self.metrics.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("runs = {}\n", self.runs);
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k} = {:?} ± {:?}", v.mean, v.std);
        }
        s
    }
}
