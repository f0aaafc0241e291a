//! Accuracy, ROC, AUC and FPR-at-TPR over membership scores, and the
//! machine-readable evaluation reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Membership, SampleId};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub sample_id: SampleId,
    pub score: f64,
    pub membership: Membership,
}

pub type ScoreSet = [Scored];

/// TPR levels reported by [`fpr_at_tpr`] in every report.
pub const TPR_TARGETS: [f64; 3] = [0.8, 0.9, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

fn check_scores(scores: &ScoreSet) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Parameter("empty score set".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Parameter(format!("non-finite score for sample {}", s.sample_id)));
    }
    Ok(())
}

fn class_counts(scores: &ScoreSet) -> (usize, usize) {
    let p = scores.iter().filter(|s| s.membership == Membership::D).count();
    (p, scores.len() - p)
}

fn check_both_classes(scores: &ScoreSet) -> Result<(usize, usize)> {
    check_scores(scores)?;
    let (p, n) = class_counts(scores);
    if p == 0 || n == 0 {
        return Err(Error::Parameter(format!("score set needs both classes, has {p} D and {n} E")));
    }
    Ok((p, n))
}

/// `score ≥ threshold` predicts D.
pub fn confusion(scores: &ScoreSet, threshold: f64) -> Result<Confusion> {
    check_scores(scores)?;
    let mut c = Confusion::default();
    for s in scores {
        match (s.score >= threshold, s.membership) {
            (true, Membership::D) => c.tp += 1,
            (true, Membership::E) => c.fp += 1,
            (false, Membership::E) => c.tn += 1,
            (false, Membership::D) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn accuracy_at_threshold(scores: &ScoreSet, threshold: f64) -> Result<f64> {
    Ok(confusion(scores, threshold)?.accuracy())
}

/// `(FPR, TPR)` for thresholds +∞, every distinct score (descending) and −∞;
/// consecutive duplicate points are merged.
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    let (p, n) = check_both_classes(scores)?;
    let mut sorted: Vec<&Scored> = scores.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            match sorted[i].membership {
                Membership::D => tp += 1,
                Membership::E => fp += 1,
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    points.push((1.0, 1.0));
    points.dedup();
    Ok(points)
}

/// Probability that a random D score exceeds a random E score, ties counting ½,
/// computed from average ranks.
pub fn auc(scores: &ScoreSet) -> Result<f64> {
    let (p, n) = check_both_classes(scores)?;
    let mut sorted: Vec<&Scored> = scores.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // Twice the rank sum keeps tied average ranks integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let avg2 = (i + 1 + j) as u128; // 2 × mean of ranks i+1..=j
        let d = sorted[i..j].iter().filter(|s| s.membership == Membership::D).count() as u128;
        rank_sum2 += avg2 * d;
        i = j;
    }
    let u2 = rank_sum2 - (p as u128) * (p as u128 + 1);
    Ok(u2 as f64 / 2.0 / (p as f64 * n as f64))
}

/// Area under a piecewise-linear curve.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Smallest FPR over all thresholds whose TPR reaches `target`.
pub fn fpr_at_tpr(scores: &ScoreSet, target: f64) -> Result<f64> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Parameter(format!("TPR target {target} outside (0, 1]")));
    }
    check_scores(scores)?;
    let (p, _) = class_counts(scores);
    if p == 0 {
        return Err(Error::Parameter("no D samples: TPR target unreachable".into()));
    }
    let points = if class_counts(scores).1 == 0 {
        vec![(0.0, 1.0)]
    } else {
        roc_points(scores)?
    };
    Ok(points
        .iter()
        .filter(|(_, tpr)| *tpr >= target - 1e-12)
        .map(|(fpr, _)| *fpr)
        .fold(f64::INFINITY, f64::min))
}

/// Round to four decimals, ties to even (used for tables).
pub fn round4(x: f64) -> f64 {
    (x * 1e4).round_ties_even() / 1e4
}

/// Metrics of one detector on the balanced evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEval {
    /// Row label, e.g. `cnn-stage1` or `outcome-baseline`.
    pub name: String,
    pub kind: String,
    pub param_count: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub confusion: Confusion,
    /// Keys are the TPR targets formatted with two decimals.
    pub fpr_at_tpr: BTreeMap<String, f64>,
    pub roc: Vec<(f64, f64)>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl DetectorEval {
    pub fn compute(name: &str, kind: &str, param_count: usize, scores: &ScoreSet, losses: (f64, f64)) -> Result<Self> {
        let confusion = confusion(scores, crate::detector::DECISION_THRESHOLD)?;
        let mut fprs = BTreeMap::new();
        for t in TPR_TARGETS {
            fprs.insert(format!("{t:.2}"), fpr_at_tpr(scores, t)?);
        }
        Ok(DetectorEval {
            name: name.into(),
            kind: kind.into(),
            param_count,
            accuracy: confusion.accuracy(),
            auc: auc(scores)?,
            confusion,
            fpr_at_tpr: fprs,
            roc: roc_points(scores)?,
            initial_loss: losses.0,
            final_loss: losses.1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideCounts {
    pub train_d: usize,
    pub train_e: usize,
    pub eval_d: usize,
    pub eval_e: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub plan_hash: String,
    pub seed: u64,
    pub resolution: usize,
    pub audited_train_accuracy: f64,
    pub counts: SideCounts,
    /// Primary detector first.
    pub detectors: Vec<DetectorEval>,
}

impl EvalReport {
    pub fn primary(&self) -> &DetectorEval {
        &self.detectors[0]
    }

    pub fn detector(&self, name: &str) -> Option<&DetectorEval> {
        self.detectors.iter().find(|d| d.name == name)
    }

    /// Reject reports whose eval side is unbalanced.
    pub fn check_balanced(&self) -> Result<()> {
        if self.counts.eval_d != self.counts.eval_e {
            return Err(Error::Protocol(format!(
                "unbalanced evaluation: {} D vs {} E",
                self.counts.eval_d, self.counts.eval_e
            )));
        }
        Ok(())
    }
}

/// Mean and sample standard deviation of per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub name: String,
    pub param_count: usize,
    pub accuracy: Summary,
    pub auc: Summary,
    pub fpr_at_tpr: BTreeMap<String, Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub plan_hash: String,
    pub seeds: Vec<u64>,
    pub audited_train_accuracy: Summary,
    pub detectors: Vec<AggregateRow>,
}

impl AggregateReport {
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Protocol("no per-seed reports to aggregate".into()))?;
        let mut detectors = Vec::new();
        for d in &first.detectors {
            let rows: Vec<&DetectorEval> = reports
                .iter()
                .map(|r| r.detector(&d.name).ok_or_else(|| Error::Protocol(format!("seed {} lacks row {}", r.seed, d.name))))
                .collect::<Result<_>>()?;
            let fpr_at_tpr = d
                .fpr_at_tpr
                .keys()
                .map(|k| (k.clone(), Summary::of(rows.iter().map(|r| r.fpr_at_tpr[k]).collect())))
                .collect();
            detectors.push(AggregateRow {
                name: d.name.clone(),
                param_count: d.param_count,
                accuracy: Summary::of(rows.iter().map(|r| r.accuracy).collect()),
                auc: Summary::of(rows.iter().map(|r| r.auc).collect()),
                fpr_at_tpr,
            });
        }
        Ok(AggregateReport {
            plan_hash: first.plan_hash.clone(),
            seeds: reports.iter().map(|r| r.seed).collect(),
            audited_train_accuracy: Summary::of(reports.iter().map(|r| r.audited_train_accuracy).collect()),
            detectors,
        })
    }

    /// Markdown table; metrics rounded to four decimals, ties to even.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| detector | params | accuracy (mean ± sd) | AUC (mean ± sd) | FPR@TPR 0.80 | FPR@TPR 0.90 | FPR@TPR 0.95 |\n\
             |---|---|---|---|---|---|---|\n",
        );
        for r in &self.detectors {
            out.push_str(&format!(
                "| {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |",
                r.name,
                r.param_count,
                round4(r.accuracy.mean),
                round4(r.accuracy.std),
                round4(r.auc.mean),
                round4(r.auc.std)
            ));
            for s in r.fpr_at_tpr.values() {
                out.push_str(&format!(" {:.4} |", round4(s.mean)));
            }
            out.push('\n');
        }
        out
    }

    pub fn row(&self, name: &str) -> Option<&AggregateRow> {
        self.detectors.iter().find(|d| d.name == name)
    }
}

/// Canonical text form: keys sorted at every level, two-space indent, trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json's Value map is ordered by key.
    let v = serde_json::to_value(value).expect("report serialises");
    let mut s = serde_json::to_string_pretty(&v).expect("value serialises");
    s.push('\n');
    s
}

pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (f, t) in points {
        out.push_str(&format!("{f},{t}\n"));
    }
    out
}

/// Write `report` as canonical JSON and the primary detector's ROC as CSV.
pub fn emit_report(report: &EvalReport, json_path: &Path, csv_path: &Path) -> Result<()> {
    fs::write(json_path, to_canonical_json(report)).at(json_path)?;
    fs::write(csv_path, roc_csv(&report.primary().roc)).at(csv_path)
}

pub fn parse_report(text: &str) -> Result<EvalReport> {
    serde_json::from_str(text).map_err(|e| Error::format("eval report", format!("line {}", e.line()), e.to_string()))
}

pub fn parse_aggregate(text: &str) -> Result<AggregateReport> {
    serde_json::from_str(text).map_err(|e| Error::format("aggregate report", format!("line {}", e.line()), e.to_string()))
}
