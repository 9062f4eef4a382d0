//! Multinomial logistic regression and cross-validated posteriors.
//!
//! The classifier supplies the soft predictions `s(x)` and hard predictions
//! `h(x)` that every quantification method builds on. Training minimises
//! the L2-regularised, optionally class-weighted cross-entropy with
//! full-batch gradient descent and an Armijo backtracking line search, on
//! internally standardised features; the learned weights are folded back so
//! that the stored model acts on raw features.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::simplex::{argmax, softmax_slice, Distribution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Strength λ of the (λ/2)‖W‖² penalty on non-bias weights.
    pub l2_strength: f64,
    /// Inverse-frequency class weights (`N / (n · count_c)`).
    pub class_weighting: bool,
    pub max_epochs: usize,
    /// Stop once the gradient norm falls to this value.
    pub tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2_strength: 1e-3,
            class_weighting: false,
            max_epochs: 5000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftClassifier {
    /// n × (d + 1); the last column holds the biases.
    weights: Array2<f64>,
}

/// What happened during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Objective value before the first step and after every accepted step.
    pub losses: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
}

impl SoftClassifier {
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() < 2 || weights.ncols() < 2 {
            return Err(Error::Dimension(format!(
                "weight matrix must be n x (d+1) with n >= 2, d >= 1; got {:?}",
                weights.dim()
            )));
        }
        Ok(SoftClassifier { weights })
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.weights.ncols() - 1
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn predict_proba(&self, x: ArrayView1<'_, f64>) -> Result<Distribution> {
        self.check_dim(x.len())?;
        let d = self.n_features();
        let scores = self.weights.slice(s![.., ..d]).dot(&x) + self.weights.column(d);
        Distribution::new(softmax_slice(scores.as_slice().unwrap()))
    }

    /// Ties go to the lowest class index.
    pub fn predict(&self, x: ArrayView1<'_, f64>) -> Result<usize> {
        Ok(self.predict_proba(x)?.argmax())
    }

    /// Row-wise posteriors of a feature matrix.
    pub fn predict_proba_matrix(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(x.ncols())?;
        let d = self.n_features();
        let mut scores = x.dot(&self.weights.slice(s![.., ..d]).t());
        scores += &self.weights.column(d);
        for mut row in scores.rows_mut() {
            let p = softmax_slice(row.as_slice().unwrap());
            row.assign(&Array1::from(p));
        }
        Ok(scores)
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.n_features() {
            return Err(Error::Dimension(format!(
                "classifier expects {} features, got {d}",
                self.n_features()
            )));
        }
        Ok(())
    }
}

/// Per-item weights: all ones, or inverse class frequency normalised so that
/// their mean over the items is 1.
pub fn sample_weights(data: &LabeledDataset, balanced: bool) -> Array1<f64> {
    if !balanced {
        return Array1::ones(data.len());
    }
    let counts = data.class_counts();
    let scale = data.len() as f64 / data.n_classes() as f64;
    data.labels()
        .iter()
        .map(|&y| scale / counts[y] as f64)
        .collect()
}

/// Weighted mean cross-entropy plus (λ/2)‖W[:, ..d]‖², and its gradient.
///
/// `design` is N × (d + 1) with a trailing column of ones.
pub fn objective(
    design: ArrayView2<'_, f64>,
    labels: &[usize],
    item_weights: ArrayView1<'_, f64>,
    weights: ArrayView2<'_, f64>,
    l2_strength: f64,
) -> (f64, Array2<f64>) {
    let n_items = design.nrows() as f64;
    let d = design.ncols() - 1;
    let mut residual = design.dot(&weights.t());
    let mut loss = 0.0;
    for ((mut row, &y), &w) in residual
        .rows_mut()
        .into_iter()
        .zip(labels)
        .zip(item_weights.iter())
    {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        loss += w * (log_sum - row[y]);
        row.mapv_inplace(|z| (z - log_sum).exp());
        row[y] -= 1.0;
        row *= w;
    }
    loss /= n_items;
    let mut grad = residual.t().dot(&design) / n_items;
    let penalised = weights.slice(s![.., ..d]);
    loss += 0.5 * l2_strength * penalised.iter().map(|v| v * v).sum::<f64>();
    grad.slice_mut(s![.., ..d]).scaled_add(l2_strength, &penalised);
    (loss, grad)
}

pub fn train(data: &LabeledDataset, cfg: &TrainConfig) -> Result<SoftClassifier> {
    train_with_report(data, cfg).map(|(clf, _)| clf)
}

pub fn train_with_report(
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(SoftClassifier, TrainReport)> {
    let n = data.n_classes();
    let d = data.n_features();
    if n < 2 || d < 1 {
        return Err(Error::DegenerateData(format!(
            "need n >= 2 classes and d >= 1 features, got n = {n}, d = {d}"
        )));
    }
    if data.len() < n {
        return Err(Error::DegenerateData(format!(
            "{} items for {n} classes",
            data.len()
        )));
    }
    if let Some(c) = data.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::DegenerateData(format!("class {c} is absent")));
    }

    let x = data.features();
    let mean = x.mean_axis(Axis(0)).unwrap();
    let scale = x
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let mut design = Array2::<f64>::ones((data.len(), d + 1));
    {
        let mut body = design.slice_mut(s![.., ..d]);
        body.assign(x);
        body -= &mean;
        body /= &scale;
    }
    let item_weights = sample_weights(data, cfg.class_weighting);

    let mut w = Array2::<f64>::zeros((n, d + 1));
    let (mut loss, mut grad) =
        objective(design.view(), data.labels(), item_weights.view(), w.view(), cfg.l2_strength);
    let mut report = TrainReport {
        losses: vec![loss],
        epochs: 0,
        converged: false,
    };
    let mut step = 1.0;
    for epoch in 0..cfg.max_epochs {
        let grad_sq = grad.iter().map(|g| g * g).sum::<f64>();
        if grad_sq.sqrt() <= cfg.tol {
            report.converged = true;
            break;
        }
        report.epochs = epoch + 1;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &w - &(&grad * step);
            let (c_loss, c_grad) = objective(
                design.view(),
                data.labels(),
                item_weights.view(),
                candidate.view(),
                cfg.l2_strength,
            );
            if c_loss <= loss - 1e-4 * step * grad_sq {
                w = candidate;
                loss = c_loss;
                grad = c_grad;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        report.losses.push(loss);
        step *= 2.0;
    }
    if !report.converged {
        report.converged = grad.iter().map(|g| g * g).sum::<f64>().sqrt() <= cfg.tol;
    }

    // undo the standardisation: w·((x − μ)/σ) + b = (w/σ)·x + (b − Σ w μ/σ)
    let mut raw = Array2::<f64>::zeros((n, d + 1));
    for c in 0..n {
        let mut bias = w[[c, d]];
        for j in 0..d {
            raw[[c, j]] = w[[c, j]] / scale[j];
            bias -= w[[c, j]] * mean[j] / scale[j];
        }
        raw[[c, d]] = bias;
    }
    Ok((SoftClassifier { weights: raw }, report))
}

/// Stratified fold ids: each class's items are shuffled with the seeded
/// generator and dealt round-robin, continuing where the previous class
/// stopped, so per-fold class counts differ by at most one.
pub fn stratified_folds(data: &LabeledDataset, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; data.len()];
    let mut offset = 0;
    for mut members in data.class_indices() {
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            folds[i] = (offset + j) % k;
        }
        offset = (offset + members.len()) % k;
    }
    folds
}

/// Out-of-fold posteriors: row i comes from the model trained without the
/// fold that contains item i.
pub fn cross_val_proba(
    data: &LabeledDataset,
    k: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<Array2<f64>> {
    if k < 2 || k > data.len() {
        return Err(Error::InsufficientData(format!(
            "cannot split {} items into {k} folds",
            data.len()
        )));
    }
    // every training fold must still contain every class
    for (class, &count) in data.class_counts().iter().enumerate() {
        if count < 2 {
            return Err(Error::TooFewPerClass {
                class,
                count,
                folds: k,
            });
        }
    }
    let folds = stratified_folds(data, k, seed);
    let per_fold: Vec<Result<(Vec<usize>, Array2<f64>)>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let (held, kept): (Vec<usize>, Vec<usize>) =
                (0..data.len()).partition(|&i| folds[i] == f);
            let clf = train(&data.subset(&kept), cfg)?;
            let held_x = data.features().select(Axis(0), &held);
            Ok((held, clf.predict_proba_matrix(held_x.view())?))
        })
        .collect();
    let mut out = Array2::<f64>::zeros((data.len(), data.n_classes()));
    for fold in per_fold {
        let (held, proba) = fold?;
        for (row, &i) in held.iter().enumerate() {
            out.row_mut(i).assign(&proba.row(row));
        }
    }
    Ok(out)
}

/// Hard predictions from a posterior matrix.
pub fn argmax_rows(proba: ArrayView2<'_, f64>) -> Vec<usize> {
    proba
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("contiguous posterior row")))
        .collect()
}
