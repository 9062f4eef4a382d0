//! Quantification error measures and paired significance testing.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::simplex::Distribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Measure {
    Nmd,
    Rnod,
}

impl Measure {
    pub fn evaluate(self, truth: &Distribution, estimate: &Distribution) -> Result<f64> {
        match self {
            Measure::Nmd => nmd(truth, estimate),
            Measure::Rnod => rnod(truth, estimate),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Measure::Nmd => "NMD",
            Measure::Rnod => "RNOD",
        }
    }
}

impl std::str::FromStr for Measure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NMD" => Ok(Measure::Nmd),
            "RNOD" => Ok(Measure::Rnod),
            other => Err(Error::Config(format!("unknown measure {other:?}"))),
        }
    }
}

/// Per-sample errors of one method under one measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub method: String,
    pub measure: Measure,
    pub scores: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(method: impl Into<String>, measure: Measure, scores: Vec<f64>) -> Result<Self> {
        let upper = match measure {
            Measure::Nmd => 1.0 + 1e-12,
            Measure::Rnod => f64::INFINITY,
        };
        if let Some(s) = scores.iter().find(|s| !(**s >= 0.0 && **s <= upper)) {
            return Err(Error::Data(format!(
                "{} score {s} out of range",
                measure.name()
            )));
        }
        Ok(ScoreSeries {
            method: method.into(),
            measure,
            scores,
        })
    }
}

fn check_lengths(p: &Distribution, q: &Distribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "distributions have {} and {} classes",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Match distance with unit distances between adjacent classes: the L1
/// distance between the two cumulative distributions.
pub fn match_distance(p: &Distribution, estimate: &Distribution) -> Result<f64> {
    check_lengths(p, estimate)?;
    Ok(cumulative_l1(p.as_slice(), estimate.as_slice()))
}

pub(crate) fn cumulative_l1(a: &[f64], b: &[f64]) -> f64 {
    let mut ca = 0.0;
    let mut cb = 0.0;
    let mut total = 0.0;
    for i in 0..a.len() - 1 {
        ca += a[i];
        cb += b[i];
        total += (ca - cb).abs();
    }
    total
}

/// Normalized match distance, in [0, 1].
pub fn nmd(p: &Distribution, estimate: &Distribution) -> Result<f64> {
    Ok(match_distance(p, estimate)? / (p.len() - 1) as f64)
}

/// Root normalized order-aware divergence, with |j − i| as the distance
/// between classes i and j.
pub fn rnod(p: &Distribution, estimate: &Distribution) -> Result<f64> {
    check_lengths(p, estimate)?;
    let n = p.len();
    let support: Vec<usize> = (0..n).filter(|&i| p[i] > 0.0).collect();
    let mut total = 0.0;
    for &i in &support {
        for j in 0..n {
            let diff = p[j] - estimate[j];
            total += i.abs_diff(j) as f64 * diff * diff;
        }
    }
    Ok((total / (support.len() * (n - 1)) as f64).sqrt())
}

/// Two-sided p-value of the paired Wilcoxon signed-rank test.
///
/// Zero differences are dropped; tied absolute differences receive average
/// ranks and the variance is tie-corrected; the p-value uses the normal
/// approximation without continuity correction.
pub fn wilcoxon_signed_rank(a: &ScoreSeries, b: &ScoreSeries) -> Result<f64> {
    wilcoxon_p_value(&a.scores, &b.scores)
}

pub fn wilcoxon_p_value(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "paired series have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let m = diffs.len();
    if m < 10 {
        return Err(Error::TooFewPairs(m));
    }
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));

    let mut positive_rank_sum = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < m {
        let mut j = i + 1;
        while j < m && diffs[j].abs() == diffs[i].abs() {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let rank = (i + 1 + j) as f64 / 2.0;
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        positive_rank_sum += rank * diffs[i..j].iter().filter(|d| **d > 0.0).count() as f64;
        i = j;
    }

    let mf = m as f64;
    let mean = mf * (mf + 1.0) / 4.0;
    let var = mf * (mf + 1.0) * (2.0 * mf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (positive_rank_sum - mean) / var.sqrt();
    let normal = Normal::standard();
    Ok((2.0 * normal.sf(z.abs())).min(1.0))
}

/// Arithmetic mean and population standard deviation.
pub fn summarize(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Empty);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}
