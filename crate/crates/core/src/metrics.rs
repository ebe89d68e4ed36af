//! Classification and sentiment metrics.

use serde::{Deserialize, Serialize};

use crate::error::{EgmfError, Result};

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

fn check_lengths(p: usize, g: usize) -> Result<()> {
    if p != g {
        return Err(EgmfError::Data(format!("{p} predictions for {g} gold labels")));
    }
    if g == 0 {
        return Err(EgmfError::Data("metrics need at least one sample".into()));
    }
    Ok(())
}

/// Per-class F1 for classes `0..n_classes`. A class with no predicted and
/// no gold members scores 0.
pub fn per_class_f1(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    check_lengths(preds.len(), golds.len())?;
    let mut tp = vec![0usize; n_classes];
    let mut pred_n = vec![0usize; n_classes];
    let mut gold_n = vec![0usize; n_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p >= n_classes || g >= n_classes {
            return Err(EgmfError::Data(format!("label {} outside 0..{n_classes}", p.max(g))));
        }
        pred_n[p] += 1;
        gold_n[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    Ok((0..n_classes)
        .map(|c| {
            let denom = pred_n[c] + gold_n[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect())
}

/// F1 averaged over classes with weights proportional to gold support.
pub fn weighted_f1(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<f64> {
    let f1 = per_class_f1(preds, golds, n_classes)?;
    let mut support = vec![0usize; n_classes];
    for &g in golds {
        support[g] += 1;
    }
    let total: f64 = f1.iter().zip(&support).map(|(f, &s)| f * s as f64).sum();
    Ok(total / golds.len() as f64)
}

pub fn mae(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    Ok(preds.iter().zip(golds).map(|(p, g)| (p - g).abs()).sum::<f64>() / golds.len() as f64)
}

/// Sample correlation; 0 when either side has zero variance.
pub fn pearson(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let n = golds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let mg = golds.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(golds) {
        let (dp, dg) = (p - mp, g - mg);
        cov += dp * dg;
        vp += dp * dp;
        vg += dg * dg;
    }
    if vp == 0.0 || vg == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (vp.sqrt() * vg.sqrt())).clamp(-1.0, 1.0))
}

/// Sign agreement `(p > 0) == (g > 0)` over samples with non-zero gold.
/// Returns `None` when every gold score is zero.
pub fn acc2(preds: &[f64], golds: &[f64]) -> Result<Option<f64>> {
    check_lengths(preds.len(), golds.len())?;
    let kept: Vec<(f64, f64)> = preds.iter().zip(golds).filter(|(_, g)| **g != 0.0).map(|(p, g)| (*p, *g)).collect();
    if kept.is_empty() {
        return Ok(None);
    }
    let hits = kept.iter().filter(|(p, g)| (*p > 0.0) == (*g > 0.0)).count();
    Ok(Some(hits as f64 / kept.len() as f64))
}

/// Sign agreement with zero counted as non-negative: `(p >= 0) == (g >= 0)`
/// over every sample.
pub fn acc2_weak(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| (**p >= 0.0) == (**g >= 0.0)).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Integer bin in `-3..=3` after clamping.
pub fn acc7_bin(v: f64) -> i32 {
    v.clamp(-3.0, 3.0).round() as i32
}

pub fn acc7(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| acc7_bin(**p) == acc7_bin(**g)).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Binary F1 of the positive-sentiment decision, weighted by gold support,
/// over samples with non-zero gold.
pub fn sentiment_f1(preds: &[f64], golds: &[f64]) -> Result<Option<f64>> {
    check_lengths(preds.len(), golds.len())?;
    let (p, g): (Vec<usize>, Vec<usize>) = preds
        .iter()
        .zip(golds)
        .filter(|(_, g)| **g != 0.0)
        .map(|(p, g)| (usize::from(*p > 0.0), usize::from(*g > 0.0)))
        .unzip();
    if g.is_empty() {
        return Ok(None);
    }
    weighted_f1(&p, &g, 2).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentMetrics {
    pub acc2: Option<f64>,
    pub acc2_weak: f64,
    /// Only for the `[-3, 3]` range.
    pub acc7: Option<f64>,
    pub mae: f64,
    pub pearson: f64,
    pub f1: Option<f64>,
}

pub fn sentiment_metrics(preds: &[f64], golds: &[f64], range: [f64; 2]) -> Result<SentimentMetrics> {
    Ok(SentimentMetrics {
        acc2: acc2(preds, golds)?,
        acc2_weak: acc2_weak(preds, golds)?,
        acc7: if range == [-3.0, 3.0] { Some(acc7(preds, golds)?) } else { None },
        mae: mae(preds, golds)?,
        pearson: pearson(preds, golds)?,
        f1: sentiment_f1(preds, golds)?,
    })
}

/// Everything reported for one evaluation run. Fields that do not apply to
/// the task are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub accuracy: Option<f64>,
    pub weighted_f1: Option<f64>,
    pub per_class_f1: Option<Vec<f64>>,
    pub acc2: Option<f64>,
    pub acc2_weak: Option<f64>,
    pub acc7: Option<f64>,
    pub mae: Option<f64>,
    pub pearson: Option<f64>,
    pub parse_failure_rate: Option<f64>,
    pub parse_failures: usize,
    pub clamped: usize,
}

impl MetricReport {
    pub fn classification(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<Self> {
        Ok(Self {
            n_samples: golds.len(),
            accuracy: Some(accuracy(preds, golds)?),
            weighted_f1: Some(weighted_f1(preds, golds, n_classes)?),
            per_class_f1: Some(per_class_f1(preds, golds, n_classes)?),
            acc2: None,
            acc2_weak: None,
            acc7: None,
            mae: None,
            pearson: None,
            parse_failure_rate: None,
            parse_failures: 0,
            clamped: 0,
        })
    }

    pub fn regression(preds: &[f64], golds: &[f64], range: [f64; 2], parse_failures: usize, clamped: usize) -> Result<Self> {
        let s = sentiment_metrics(preds, golds, range)?;
        Ok(Self {
            n_samples: golds.len(),
            accuracy: s.acc2,
            weighted_f1: s.f1,
            per_class_f1: None,
            acc2: s.acc2,
            acc2_weak: Some(s.acc2_weak),
            acc7: s.acc7,
            mae: Some(s.mae),
            pearson: Some(s.pearson),
            parse_failure_rate: Some(parse_failures as f64 / golds.len() as f64),
            parse_failures,
            clamped,
        })
    }

    /// Scalar metrics in a fixed order, skipping those that do not apply.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        [
            ("accuracy", self.accuracy),
            ("weighted_f1", self.weighted_f1),
            ("acc2", self.acc2),
            ("acc2_weak", self.acc2_weak),
            ("acc7", self.acc7),
            ("mae", self.mae),
            ("pearson", self.pearson),
            ("parse_failure_rate", self.parse_failure_rate),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![("n_samples".into(), self.n_samples.to_string())];
        rows.extend(self.scalars().into_iter().map(|(k, v)| (k.to_string(), format!("{v:.4}"))));
        if let Some(f1) = &self.per_class_f1 {
            for (c, v) in f1.iter().enumerate() {
                rows.push((format!("f1[{c}]"), format!("{v:.4}")));
            }
        }
        if self.parse_failure_rate.is_some() {
            rows.push(("parse_failures".into(), self.parse_failures.to_string()));
            rows.push(("clamped".into(), self.clamped.to_string()));
        }
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max("metric".len());
        let mut out = format!("{:<w$}  value\n", "metric");
        for (k, v) in rows {
            out.push_str(&format!("{k:<w$}  {v}\n"));
        }
        out
    }
}
