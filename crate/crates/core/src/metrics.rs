//! Discrimination and calibration metrics plus cross-fold aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores in [0, 1] paired with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape {
                expected: scores.len(),
                got: labels.len(),
            });
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Config(format!("score {s} outside [0, 1]")));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Config("labels must be 0 or 1".into()));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.positives() == 0 || self.negatives() == 0 {
            return Err(Error::SingleClass);
        }
        Ok(())
    }

    /// Groups of tied scores in descending order: (positives, negatives).
    fn descending_groups(&self) -> Vec<(u64, u64)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(u64, u64)> = Vec::new();
        let mut prev: Option<f64> = None;
        for i in idx {
            let s = self.scores[i];
            if prev != Some(s) {
                groups.push((0, 0));
                prev = Some(s);
            }
            let g = groups.last_mut().expect("group");
            if self.labels[i] == 1 {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// Mann–Whitney AUROC with ties counted one half.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    s.require_both_classes()?;
    // twice the number of (pos, neg) wins plus ties, kept integral
    let mut doubled: u64 = 0;
    let mut negatives_below: u64 = s.negatives() as u64;
    for (p, n) in s.descending_groups() {
        negatives_below -= n;
        doubled += 2 * p * negatives_below + p * n;
    }
    let pairs = 2 * s.positives() as u64 * s.negatives() as u64;
    Ok(doubled as f64 / pairs as f64)
}

/// Step-wise average precision: Σ (R_k − R_{k−1}) · P_k over descending
/// distinct-score thresholds.
pub fn auprc(s: &ScoredSet) -> Result<f64> {
    let total_pos = s.positives();
    if total_pos == 0 {
        return Err(Error::Config(
            "average precision needs at least one positive".into(),
        ));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for (p, n) in s.descending_groups() {
        tp += p;
        fp += n;
        if p > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (p as f64 / total_pos as f64) * precision;
        }
    }
    Ok(ap)
}

/// ROC staircase from (0, 0) to (1, 1), one vertex per distinct score.
pub fn roc_points(s: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    s.require_both_classes()?;
    let (np, nn) = (s.positives() as f64, s.negatives() as f64);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (p, n) in s.descending_groups() {
        tp += p;
        fp += n;
        pts.push((fp as f64 / nn, tp as f64 / np));
    }
    Ok(pts)
}

/// Trapezoidal area under a polyline.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// (recall, precision) at each distinct-score threshold, descending.
pub fn pr_points(s: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let total_pos = s.positives();
    if total_pos == 0 {
        return Err(Error::Config(
            "precision-recall needs at least one positive".into(),
        ));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    Ok(s.descending_groups()
        .into_iter()
        .map(|(p, n)| {
            tp += p;
            fp += n;
            (tp as f64 / total_pos as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_predicted: f64,
    pub observed_fraction: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub bins: Vec<CalibrationBin>,
}

/// Reliability diagram over `n_bins` equal-width bins on [0, 1]; empty
/// bins are dropped. A score of exactly 1 falls in the last bin.
pub fn calibration_curve(s: &ScoredSet, n_bins: usize) -> Result<CalibrationCurve> {
    if n_bins < 2 {
        return Err(Error::Config("calibration needs at least 2 bins".into()));
    }
    let mut sum = vec![0.0; n_bins];
    let mut pos = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&score, &label) in s.scores.iter().zip(&s.labels) {
        let b = ((score * n_bins as f64) as usize).min(n_bins - 1);
        sum[b] += score;
        pos[b] += label as usize;
        count[b] += 1;
    }
    let bins = (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| CalibrationBin {
            mean_predicted: sum[b] / count[b] as f64,
            observed_fraction: pos[b] as f64 / count[b] as f64,
            count: count[b],
        })
        .collect();
    Ok(CalibrationCurve { bins })
}

/// Count-weighted least-squares line `observed = slope · predicted + intercept`.
pub fn calibration_slope_intercept(curve: &CalibrationCurve) -> Result<(f64, f64)> {
    let bins = &curve.bins;
    let w: f64 = bins.iter().map(|b| b.count as f64).sum();
    if bins.len() < 2 || w == 0.0 {
        return Err(Error::Config(
            "calibration fit needs at least 2 nonempty bins".into(),
        ));
    }
    let mx = bins
        .iter()
        .map(|b| b.count as f64 * b.mean_predicted)
        .sum::<f64>()
        / w;
    let my = bins
        .iter()
        .map(|b| b.count as f64 * b.observed_fraction)
        .sum::<f64>()
        / w;
    let sxx: f64 = bins
        .iter()
        .map(|b| b.count as f64 * (b.mean_predicted - mx).powi(2))
        .sum();
    let sxy: f64 = bins
        .iter()
        .map(|b| b.count as f64 * (b.mean_predicted - mx) * (b.observed_fraction - my))
        .sum();
    if sxx <= 0.0 {
        return Err(Error::Config(
            "calibration fit needs distinct bin means".into(),
        ));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Per-fold values with mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub metric: String,
    pub task: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("fold values"));
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    Ok((mean, var.sqrt()))
}

pub fn cv_aggregate(metric: &str, task: &str, values: Vec<f64>) -> Result<CvReport> {
    let (mean, std) = mean_std(&values)?;
    Ok(CvReport {
        metric: metric.to_string(),
        task: task.to_string(),
        values,
        mean,
        std,
    })
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::Empty("correlation input"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}
