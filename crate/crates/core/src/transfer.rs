//! Feature transformations and the `(q, M)` pairs they induce.
//!
//! A representation maps each item to an embedding `f(x)`. The sample side
//! `q` is the mean embedding over the unlabeled sample; column `j` of `M`
//! (D × n, rows are embedding dimensions) is the mean embedding over the
//! labeled items of class `j`.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Hard,
    Soft,
    FeatureHist,
    PosteriorHist,
    Energy,
    RankingHist,
    Partition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferModel {
    pub q: Array1<f64>,
    pub m: Array2<f64>,
    pub representation: Representation,
    /// Length of each histogram for histogram representations; the
    /// embedding is a concatenation of histograms of this length.
    pub hist_bins: Option<usize>,
}

impl TransferModel {
    pub fn n_classes(&self) -> usize {
        self.m.ncols()
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }
}

/// Equal-width binning of each feature over its training range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEdges {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl FeatureEdges {
    /// Ranges of the columns of a training feature matrix.
    pub fn from_training(features: ArrayView2<'_, f64>) -> Result<Self> {
        let mut lower = Vec::with_capacity(features.ncols());
        let mut upper = Vec::with_capacity(features.ncols());
        for (j, col) in features.columns().into_iter().enumerate() {
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                return Err(Error::DegenerateFeature(j));
            }
            lower.push(lo);
            upper.push(hi);
        }
        Ok(FeatureEdges { lower, upper })
    }

    fn bin(&self, feature: usize, value: f64, bins: usize) -> usize {
        let lo = self.lower[feature];
        let width = self.upper[feature] - lo;
        equal_width_bin((value - lo) / width, bins)
    }
}

/// Bin of a value already scaled to [0, 1]; half-open bins, the last one
/// closed, out-of-range values clamped to the boundary bins.
fn equal_width_bin(unit: f64, bins: usize) -> usize {
    if unit.is_nan() || unit <= 0.0 {
        return 0;
    }
    ((unit * bins as f64).floor() as usize).min(bins - 1)
}

/// Cumulative posterior coordinates of one class's reference items, each
/// sorted, with prefix sums, so that `Σ_x' |a − B_k(x')|` costs a binary
/// search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "SortedColumns", into = "SortedColumns")]
pub struct EnergyReference {
    sorted: Vec<Vec<f64>>,
    prefix: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SortedColumns {
    sorted: Vec<Vec<f64>>,
}

impl From<SortedColumns> for EnergyReference {
    fn from(s: SortedColumns) -> Self {
        EnergyReference::from_sorted(s.sorted)
    }
}

impl From<EnergyReference> for SortedColumns {
    fn from(r: EnergyReference) -> Self {
        SortedColumns { sorted: r.sorted }
    }
}

impl EnergyReference {
    fn new(proba: ArrayView2<'_, f64>, rows: &[usize]) -> Self {
        let n = proba.ncols();
        let mut sorted = vec![Vec::with_capacity(rows.len()); n - 1];
        for &i in rows {
            let mut acc = 0.0;
            for (k, col) in sorted.iter_mut().enumerate() {
                acc += proba[[i, k]];
                col.push(acc);
            }
        }
        for col in &mut sorted {
            col.sort_by(|a, b| a.total_cmp(b));
        }
        EnergyReference::from_sorted(sorted)
    }

    fn from_sorted(sorted: Vec<Vec<f64>>) -> Self {
        let prefix = sorted
            .iter()
            .map(|col| {
                let mut acc = 0.0;
                let mut p = Vec::with_capacity(col.len() + 1);
                p.push(0.0);
                for v in col {
                    acc += v;
                    p.push(acc);
                }
                p
            })
            .collect();
        EnergyReference { sorted, prefix }
    }

    fn len(&self) -> usize {
        self.sorted.first().map_or(0, Vec::len)
    }

    /// Mean match distance between a posterior and the reference posteriors.
    fn mean_distance(&self, posterior: &[f64]) -> f64 {
        let count = self.len() as f64;
        let mut total = 0.0;
        let mut a = 0.0;
        for (k, col) in self.sorted.iter().enumerate() {
            a += posterior[k];
            let below = col.partition_point(|&b| b <= a);
            let prefix = &self.prefix[k];
            let sum_below = prefix[below];
            let sum_above = prefix[col.len()] - sum_below;
            total += a * below as f64 - sum_below + sum_above - a * (col.len() - below) as f64;
        }
        total / count
    }
}

/// A fitted feature transformation `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoder {
    /// One-hot encoding of the hard prediction.
    Hard { n_classes: usize },
    /// The posterior vector itself.
    Soft { n_classes: usize },
    /// One histogram per raw feature.
    FeatureHist { bins: usize, edges: FeatureEdges },
    /// One histogram per posterior coordinate, over [0, 1].
    PosteriorHist { n_classes: usize, bins: usize },
    /// Mean match distance to the reference posteriors of each class.
    Energy { references: Vec<EnergyReference> },
    /// One-hot bin of the expected class index `Σ i·sᵢ(x)` over [1, n].
    RankingHist { n_classes: usize, bins: usize },
}

impl Encoder {
    pub fn representation(&self) -> Representation {
        match self {
            Encoder::Hard { .. } => Representation::Hard,
            Encoder::Soft { .. } => Representation::Soft,
            Encoder::FeatureHist { .. } => Representation::FeatureHist,
            Encoder::PosteriorHist { .. } => Representation::PosteriorHist,
            Encoder::Energy { .. } => Representation::Energy,
            Encoder::RankingHist { .. } => Representation::RankingHist,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoder::Hard { n_classes } | Encoder::Soft { n_classes } => *n_classes,
            Encoder::FeatureHist { bins, edges } => bins * edges.lower.len(),
            Encoder::PosteriorHist { n_classes, bins } => n_classes * bins,
            Encoder::Energy { references } => references.len(),
            Encoder::RankingHist { bins, .. } => *bins,
        }
    }

    pub fn hist_bins(&self) -> Option<usize> {
        match self {
            Encoder::FeatureHist { bins, .. } | Encoder::PosteriorHist { bins, .. } => Some(*bins),
            _ => None,
        }
    }

    /// Adds the embedding of item `i` to `out`.
    fn embed_into(&self, features: ArrayView2<'_, f64>, proba: ArrayView2<'_, f64>, i: usize, out: &mut [f64]) {
        match self {
            Encoder::Hard { .. } => {
                out[argmax(proba.row(i).as_slice().expect("contiguous posteriors"))] += 1.0;
            }
            Encoder::Soft { .. } => {
                for (o, p) in out.iter_mut().zip(proba.row(i)) {
                    *o += p;
                }
            }
            Encoder::FeatureHist { bins, edges } => {
                for (j, v) in features.row(i).iter().enumerate() {
                    out[j * bins + edges.bin(j, *v, *bins)] += 1.0;
                }
            }
            Encoder::PosteriorHist { bins, .. } => {
                for (c, v) in proba.row(i).iter().enumerate() {
                    out[c * bins + equal_width_bin(*v, *bins)] += 1.0;
                }
            }
            Encoder::Energy { references } => {
                let row = proba.row(i);
                let posterior = row.as_slice().expect("contiguous posteriors");
                for (o, r) in out.iter_mut().zip(references) {
                    *o += r.mean_distance(posterior);
                }
            }
            Encoder::RankingHist { n_classes, bins } => {
                let r = ranking(proba.row(i).iter().cloned());
                out[equal_width_bin((r - 1.0) / (*n_classes as f64 - 1.0), *bins)] += 1.0;
            }
        }
    }

    fn check_inputs(&self, features: ArrayView2<'_, f64>, proba: ArrayView2<'_, f64>) -> Result<()> {
        if features.nrows() != proba.nrows() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} posterior rows",
                features.nrows(),
                proba.nrows()
            )));
        }
        let (want, got, what) = match self {
            Encoder::FeatureHist { edges, .. } => (edges.lower.len(), features.ncols(), "features"),
            Encoder::Energy { references } => (references.len(), proba.ncols(), "posterior classes"),
            Encoder::Hard { n_classes }
            | Encoder::Soft { n_classes }
            | Encoder::PosteriorHist { n_classes, .. }
            | Encoder::RankingHist { n_classes, .. } => (*n_classes, proba.ncols(), "posterior classes"),
        };
        if want != got {
            return Err(Error::Dimension(format!("expected {want} {what}, got {got}")));
        }
        Ok(())
    }

    /// Mean embedding `q` of a sample given its raw features and posteriors.
    pub fn sample_embedding(
        &self,
        features: ArrayView2<'_, f64>,
        proba: ArrayView2<'_, f64>,
    ) -> Result<Array1<f64>> {
        self.check_inputs(features, proba)?;
        if proba.nrows() == 0 {
            return Err(Error::Data("empty sample".into()));
        }
        Ok(mean_embedding(0..proba.nrows(), self.dim(), |i, out| {
            self.embed_into(features, proba, i, out)
        }))
    }

    /// Class-conditional mean embeddings `M` (D × n) over labeled items.
    pub fn class_matrix(
        &self,
        features: ArrayView2<'_, f64>,
        proba: ArrayView2<'_, f64>,
        labels: &[usize],
        n_classes: usize,
    ) -> Result<Array2<f64>> {
        self.check_inputs(features, proba)?;
        class_matrix(labels, n_classes, self.dim(), |i, out| {
            self.embed_into(features, proba, i, out)
        })
    }

    /// Both halves of the linear system for one sample.
    pub fn transfer(
        &self,
        sample: (ArrayView2<'_, f64>, ArrayView2<'_, f64>),
        validation: (ArrayView2<'_, f64>, ArrayView2<'_, f64>),
        labels_val: &[usize],
        n_classes: usize,
    ) -> Result<TransferModel> {
        let m = self.class_matrix(validation.0, validation.1, labels_val, n_classes)?;
        let q = self.sample_embedding(sample.0, sample.1)?;
        Ok(TransferModel {
            q,
            m,
            representation: self.representation(),
            hist_bins: self.hist_bins(),
        })
    }
}

/// Expected class index (1-based) under a posterior.
pub fn ranking(posterior: impl IntoIterator<Item = f64>) -> f64 {
    posterior
        .into_iter()
        .enumerate()
        .map(|(i, s)| (i + 1) as f64 * s)
        .sum()
}

fn mean_embedding(
    rows: impl Iterator<Item = usize>,
    dim: usize,
    mut embed: impl FnMut(usize, &mut [f64]),
) -> Array1<f64> {
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for i in rows {
        embed(i, &mut acc);
        count += 1;
    }
    Array1::from(acc) / count as f64
}

fn class_matrix(
    labels: &[usize],
    n_classes: usize,
    dim: usize,
    mut embed: impl FnMut(usize, &mut [f64]),
) -> Result<Array2<f64>> {
    let mut members = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::Data(format!("label {y} out of range")));
        }
        members[y].push(i);
    }
    let mut m = Array2::<f64>::zeros((dim, n_classes));
    for (c, rows) in members.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::MissingClass(c));
        }
        let col = mean_embedding(rows.iter().cloned(), dim, &mut embed);
        m.column_mut(c).assign(&col);
    }
    Ok(m)
}

/// Classify-and-count fractions and misclassification rates from hard
/// predictions (also the unfolding partition with `c = h`).
pub fn hard_counts(
    pred_sample: &[usize],
    pred_val: &[usize],
    labels_val: &[usize],
    n_classes: usize,
) -> Result<TransferModel> {
    if pred_val.len() != labels_val.len() {
        return Err(Error::Dimension("predictions and labels differ in length".into()));
    }
    if pred_sample.is_empty() {
        return Err(Error::Data("empty sample".into()));
    }
    if let Some(&p) = pred_sample.iter().chain(pred_val).find(|&&p| p >= n_classes) {
        return Err(Error::Data(format!("prediction {p} out of range")));
    }
    let m = class_matrix(labels_val, n_classes, n_classes, |i, out| out[pred_val[i]] += 1.0)?;
    let q = mean_embedding(0..pred_sample.len(), n_classes, |i, out| {
        out[pred_sample[i]] += 1.0
    });
    Ok(TransferModel {
        q,
        m,
        representation: Representation::Hard,
        hist_bins: None,
    })
}

fn empty_features(rows: usize) -> Array2<f64> {
    Array2::zeros((rows, 0))
}

fn posterior_transfer(
    encoder: &Encoder,
    proba_sample: ArrayView2<'_, f64>,
    proba_val: ArrayView2<'_, f64>,
    labels_val: &[usize],
) -> Result<TransferModel> {
    let fs = empty_features(proba_sample.nrows());
    let fv = empty_features(proba_val.nrows());
    encoder.transfer(
        (fs.view(), proba_sample),
        (fv.view(), proba_val),
        labels_val,
        proba_val.ncols(),
    )
}

/// Mean posteriors (PCC) and class-conditional mean posteriors.
pub fn soft_means(
    proba_sample: ArrayView2<'_, f64>,
    proba_val: ArrayView2<'_, f64>,
    labels_val: &[usize],
) -> Result<TransferModel> {
    let encoder = Encoder::Soft {
        n_classes: proba_val.ncols(),
    };
    posterior_transfer(&encoder, proba_sample, proba_val, labels_val)
}

/// Concatenated per-feature histograms with `bins` equal-width bins.
pub fn feature_histograms(
    features_sample: ArrayView2<'_, f64>,
    features_val: ArrayView2<'_, f64>,
    labels_val: &[usize],
    n_classes: usize,
    bins: usize,
    edges: &FeatureEdges,
) -> Result<TransferModel> {
    if bins < 2 {
        return Err(Error::InvalidHyperparameter(format!("bins must be >= 2, got {bins}")));
    }
    let encoder = Encoder::FeatureHist {
        bins,
        edges: edges.clone(),
    };
    let ps = Array2::zeros((features_sample.nrows(), n_classes));
    let pv = Array2::zeros((features_val.nrows(), n_classes));
    encoder.transfer(
        (features_sample, ps.view()),
        (features_val, pv.view()),
        labels_val,
        n_classes,
    )
}

/// Concatenated histograms of each posterior coordinate.
pub fn posterior_histograms(
    proba_sample: ArrayView2<'_, f64>,
    proba_val: ArrayView2<'_, f64>,
    labels_val: &[usize],
    bins: usize,
) -> Result<TransferModel> {
    if bins < 2 {
        return Err(Error::InvalidHyperparameter(format!("bins must be >= 2, got {bins}")));
    }
    let encoder = Encoder::PosteriorHist {
        n_classes: proba_val.ncols(),
        bins,
    };
    posterior_transfer(&encoder, proba_sample, proba_val, labels_val)
}

/// Reference items per class for the energy representation: all of them,
/// or at most `cap` drawn uniformly without replacement.
pub fn energy_encoder(
    proba_val: ArrayView2<'_, f64>,
    labels_val: &[usize],
    cap: Option<usize>,
    seed: u64,
) -> Result<(Encoder, Vec<usize>)> {
    let n = proba_val.ncols();
    let mut members = vec![Vec::new(); n];
    for (i, &y) in labels_val.iter().enumerate() {
        members[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    let mut references = Vec::with_capacity(n);
    for (c, rows) in members.iter_mut().enumerate() {
        if rows.is_empty() {
            return Err(Error::MissingClass(c));
        }
        if let Some(cap) = cap {
            if rows.len() > cap {
                let mut chosen: Vec<usize> = index::sample(&mut rng, rows.len(), cap)
                    .into_iter()
                    .map(|j| rows[j])
                    .collect();
                chosen.sort_unstable();
                *rows = chosen;
            }
        }
        references.push(EnergyReference::new(proba_val, rows));
        kept.extend_from_slice(rows);
    }
    kept.sort_unstable();
    Ok((Encoder::Energy { references }, kept))
}

/// Mean pairwise match distances between posteriors: `qᵢ` against class-i
/// validation items, `Mᵢⱼ` between class-i and class-j validation items.
pub fn energy_features(
    proba_sample: ArrayView2<'_, f64>,
    proba_val: ArrayView2<'_, f64>,
    labels_val: &[usize],
    cap: Option<usize>,
    seed: u64,
) -> Result<TransferModel> {
    let (encoder, kept) = energy_encoder(proba_val, labels_val, cap, seed)?;
    let kept_proba = proba_val.select(ndarray::Axis(0), &kept);
    let kept_labels: Vec<usize> = kept.iter().map(|&i| labels_val[i]).collect();
    posterior_transfer(&encoder, proba_sample, kept_proba.view(), &kept_labels)
}

/// Histograms of the ranking `Σ i·sᵢ(x)` over `bins` equal-width bins on [1, n].
pub fn ranking_histogram(
    proba_sample: ArrayView2<'_, f64>,
    proba_val: ArrayView2<'_, f64>,
    labels_val: &[usize],
    bins: usize,
) -> Result<TransferModel> {
    if bins < 2 {
        return Err(Error::InvalidHyperparameter(format!("bins must be >= 2, got {bins}")));
    }
    let encoder = Encoder::RankingHist {
        n_classes: proba_val.ncols(),
        bins,
    };
    posterior_transfer(&encoder, proba_sample, proba_val, labels_val)
}
