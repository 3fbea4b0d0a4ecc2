//! Accuracy, Cohen's kappa, confusion matrices and guideline evaluation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agents::Agents;
use crate::error::{AgentError, Error, MetricsError};
use crate::model::{GradingOutput, Guideline, KappaWeighting, LabeledSample, Score, ScoreScale};

fn check_lengths(preds: usize, labels: usize) -> Result<(), MetricsError> {
    if preds != labels {
        return Err(MetricsError::LengthMismatch { preds, labels });
    }
    if preds == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[Score], labels: &[Score]) -> Result<f64, MetricsError> {
    check_lengths(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted Cohen's kappa over any ordered category type.
///
/// When chance agreement is 1 the ratio is undefined; that case returns 1.0
/// for perfect observed agreement and 0.0 otherwise.
pub fn kappa_generic<T: Ord + Copy>(preds: &[T], labels: &[T]) -> Result<f64, MetricsError> {
    check_lengths(preds.len(), labels.len())?;
    let n = preds.len() as f64;
    let mut pred_counts: BTreeMap<T, usize> = BTreeMap::new();
    let mut label_counts: BTreeMap<T, usize> = BTreeMap::new();
    let mut agree = 0usize;
    for (p, l) in preds.iter().zip(labels) {
        *pred_counts.entry(*p).or_default() += 1;
        *label_counts.entry(*l).or_default() += 1;
        agree += usize::from(p == l);
    }
    let p_o = agree as f64 / n;
    let p_e = pred_counts
        .iter()
        .map(|(c, &k)| k as f64 * label_counts.get(c).copied().unwrap_or(0) as f64)
        .sum::<f64>()
        / (n * n);
    if p_e >= 1.0 {
        return Ok(if agree == preds.len() { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

pub fn cohen_kappa(preds: &[Score], labels: &[Score]) -> Result<f64, MetricsError> {
    kappa_generic(preds, labels)
}

/// Quadratic-weighted kappa. Predictions of `None` sit at maximal distance
/// from every label.
pub fn quadratic_weighted_kappa(
    preds: &[Option<Score>],
    labels: &[Score],
    scale: &ScoreScale,
) -> Result<f64, MetricsError> {
    check_lengths(preds.len(), labels.len())?;
    let c = scale.len();
    // Extra trailing column for failed predictions.
    let idx = |s: Option<Score>| s.and_then(|s| scale.index_of(s)).unwrap_or(c);
    let weight = |i: usize, j: usize| -> f64 {
        if i == c || j == c {
            if i == j {
                0.0
            } else {
                1.0
            }
        } else if c == 1 {
            0.0
        } else {
            let d = i as f64 - j as f64;
            d * d / ((c - 1) * (c - 1)) as f64
        }
    };
    let n = preds.len() as f64;
    let mut observed = vec![vec![0.0; c + 1]; c + 1];
    let mut row = vec![0.0; c + 1];
    let mut col = vec![0.0; c + 1];
    for (p, l) in preds.iter().zip(labels) {
        let (i, j) = (idx(Some(*l)), idx(*p));
        observed[i][j] += 1.0;
        row[i] += 1.0;
        col[j] += 1.0;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..=c {
        for j in 0..=c {
            let w = weight(i, j);
            num += w * observed[i][j];
            den += w * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        return Ok(if num == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - num / den)
}

/// Kappa with failed predictions (`None`) treated as a category no label matches.
pub fn kappa_with_failures(
    preds: &[Option<Score>],
    labels: &[Score],
    scale: &ScoreScale,
    weighting: KappaWeighting,
) -> Result<f64, MetricsError> {
    match weighting {
        KappaWeighting::Unweighted => {
            let wrapped: Vec<Option<Score>> = labels.iter().map(|l| Some(*l)).collect();
            kappa_generic(preds, &wrapped)
        }
        KappaWeighting::Quadratic => quadratic_weighted_kappa(preds, labels, scale),
    }
}

/// Rows are true labels, columns are predictions; failed predictions land in
/// the `unparseable` overflow column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub categories: Vec<Score>,
    pub counts: Vec<Vec<usize>>,
    pub unparseable: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn build(
        preds: &[Option<Score>],
        labels: &[Score],
        scale: &ScoreScale,
    ) -> Result<Self, MetricsError> {
        check_lengths(preds.len(), labels.len())?;
        let c = scale.len();
        let mut counts = vec![vec![0; c]; c];
        let mut unparseable = vec![0; c];
        for (p, l) in preds.iter().zip(labels) {
            let Some(i) = scale.index_of(*l) else {
                continue;
            };
            match p.and_then(|p| scale.index_of(p)) {
                Some(j) => counts[i][j] += 1,
                None => unparseable[i] += 1,
            }
        }
        Ok(Self {
            categories: scale.categories().to_vec(),
            counts,
            unparseable,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum::<usize>() + self.unparseable.iter().sum::<usize>()
    }

    pub fn trace(&self) -> usize {
        (0..self.categories.len()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub kappa: f64,
    pub kappa_weighting: KappaWeighting,
    pub confusion: ConfusionMatrix,
    pub per_category_recall: BTreeMap<Score, f64>,
    pub unparseable_count: usize,
}

impl EvalReport {
    pub fn from_predictions(
        preds: &[Option<Score>],
        labels: &[Score],
        scale: &ScoreScale,
        weighting: KappaWeighting,
    ) -> Result<Self, MetricsError> {
        let confusion = ConfusionMatrix::build(preds, labels, scale)?;
        let n = preds.len();
        let hits = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == Some(**l))
            .count();
        let per_category_recall = confusion
            .categories
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| {
                let row: usize = confusion.counts[i].iter().sum::<usize>() + confusion.unparseable[i];
                (row > 0).then(|| (c, confusion.counts[i][i] as f64 / row as f64))
            })
            .collect();
        Ok(Self {
            n,
            accuracy: hits as f64 / n as f64,
            kappa: kappa_with_failures(preds, labels, scale, weighting)?,
            kappa_weighting: weighting,
            confusion,
            per_category_recall,
            unparseable_count: preds.iter().filter(|p| p.is_none()).count(),
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>10}", "samples", self.n)?;
        writeln!(f, "{:<14}{:>10.4}", "accuracy", self.accuracy)?;
        writeln!(f, "{:<14}{:>10.4}", "kappa", self.kappa)?;
        writeln!(f, "{:<14}{:>10}", "unparseable", self.unparseable_count)?;
        writeln!(f)?;
        write!(f, "{:>10}", "true\\pred")?;
        for c in &self.confusion.categories {
            write!(f, "{c:>8}")?;
        }
        writeln!(f, "{:>8}{:>9}", "fail", "recall")?;
        for (i, c) in self.confusion.categories.iter().enumerate() {
            write!(f, "{c:>10}")?;
            for v in &self.confusion.counts[i] {
                write!(f, "{v:>8}")?;
            }
            write!(f, "{:>8}", self.confusion.unparseable[i])?;
            match self.per_category_recall.get(c) {
                Some(r) => writeln!(f, "{r:>9.3}")?,
                None => writeln!(f, "{:>9}", "-")?,
            }
        }
        Ok(())
    }
}

/// Build a report from per-sample grading outcomes. Failed samples count as
/// wrong; more than half failing invalidates the evaluation.
pub fn report_from_outcomes(
    data: &[LabeledSample],
    outcomes: &[Result<GradingOutput, AgentError>],
    scale: &ScoreScale,
    weighting: KappaWeighting,
) -> Result<EvalReport, Error> {
    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    if failed * 2 > outcomes.len() {
        let first = outcomes
            .iter()
            .find_map(|o| o.as_ref().err())
            .map(|e| e.to_string())
            .unwrap_or_default();
        return Err(Error::TooManyFailures {
            failed,
            total: outcomes.len(),
            first,
        });
    }
    let preds: Vec<Option<Score>> = outcomes
        .iter()
        .map(|o| o.as_ref().ok().map(|g| g.predicted))
        .collect();
    let labels: Vec<Score> = data.iter().map(|s| s.label).collect();
    Ok(EvalReport::from_predictions(&preds, &labels, scale, weighting)?)
}

/// Grade every sample of `data` under `g` and summarize.
pub fn evaluate_guideline(
    agents: &Agents,
    g: &Guideline,
    data: &[LabeledSample],
    weighting: KappaWeighting,
) -> Result<(EvalReport, Vec<Result<GradingOutput, AgentError>>), Error> {
    if data.is_empty() {
        return Err(MetricsError::EmptyInput.into());
    }
    let samples: Vec<_> = data.iter().map(|s| &s.sample).collect();
    let outcomes = agents.grade_all(&samples, g);
    let report = report_from_outcomes(data, &outcomes, &g.scale, weighting)?;
    Ok((report, outcomes))
}
