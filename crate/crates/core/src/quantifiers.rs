//! The named quantification methods, their hyperparameter grids, and the
//! fit / quantify lifecycle.
//!
//! Fitting trains the classifier on the whole training set and estimates
//! the class-conditional side `M` of each method's linear system from
//! out-of-fold posteriors. Quantifying embeds the sample with the same
//! encoder and hands `(q, M)` to the method's solver.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::classifier::{cross_val_proba, SoftClassifier, TrainConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::simplex::{Distribution, TikhonovMatrix};
use crate::solvers::{
    ibu, minimize, sld, LossKind, LossSpec, SmoothingConfig, SolveResult, SolverConfig,
};
use crate::transfer::{energy_encoder, Encoder, FeatureEdges, Representation, TransferModel};

/// Version of the serialized [`FittedQuantifier`] document.
pub const FORMAT_VERSION: u32 = 1;

/// Iteration cap and L1 tolerance of the EM solvers.
pub const EM_MAX_ITER: usize = 1000;
pub const EM_TOL: f64 = 1e-6;

/// Tikhonov order used by RUN and every ordinal method.
pub const REGULARIZATION_ORDER: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Cc,
    Pcc,
    Acc,
    Pacc,
    HdX,
    HdY,
    Sld,
    Ibu,
    Run,
    EdY,
    Pdf,
    OAcc,
    OPacc,
    OHdX,
    OHdY,
    OSld,
    OEdY,
    OPdf,
}

impl Method {
    pub const ALL: [Method; 18] = [
        Method::Cc,
        Method::Pcc,
        Method::Acc,
        Method::Pacc,
        Method::HdX,
        Method::HdY,
        Method::Sld,
        Method::Ibu,
        Method::Run,
        Method::EdY,
        Method::Pdf,
        Method::OAcc,
        Method::OPacc,
        Method::OHdX,
        Method::OHdY,
        Method::OSld,
        Method::OEdY,
        Method::OPdf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cc => "CC",
            Method::Pcc => "PCC",
            Method::Acc => "ACC",
            Method::Pacc => "PACC",
            Method::HdX => "HDx",
            Method::HdY => "HDy",
            Method::Sld => "SLD",
            Method::Ibu => "IBU",
            Method::Run => "RUN",
            Method::EdY => "EDy",
            Method::Pdf => "PDF",
            Method::OAcc => "o-ACC",
            Method::OPacc => "o-PACC",
            Method::OHdX => "o-HDx",
            Method::OHdY => "o-HDy",
            Method::OSld => "o-SLD",
            Method::OEdY => "o-EDy",
            Method::OPdf => "o-PDF",
        }
    }

    /// The unregularized counterpart of an ordinal method.
    pub fn base(self) -> Method {
        match self {
            Method::OAcc => Method::Acc,
            Method::OPacc => Method::Pacc,
            Method::OHdX => Method::HdX,
            Method::OHdY => Method::HdY,
            Method::OSld => Method::Sld,
            Method::OEdY => Method::EdY,
            Method::OPdf => Method::Pdf,
            m => m,
        }
    }

    pub fn is_ordinal(self) -> bool {
        self.base() != self
    }

    /// Whether the estimate comes from [`minimize`].
    pub fn uses_minimize(self) -> bool {
        !matches!(
            self,
            Method::Cc | Method::Pcc | Method::Sld | Method::OSld | Method::Ibu
        )
    }

    /// Hyperparameter keys this method accepts.
    pub fn legal_keys(self) -> &'static [&'static str] {
        match self {
            Method::Cc | Method::Pcc | Method::Acc | Method::Pacc | Method::Sld => &[],
            Method::HdX | Method::HdY => &["bins"],
            Method::Ibu | Method::OSld => &["poly_order", "interp_factor"],
            Method::Run | Method::OAcc | Method::OPacc => &["tau"],
            Method::EdY => &["cap"],
            Method::OEdY => &["tau", "cap"],
            Method::Pdf => &["ranking_bins"],
            Method::OHdX | Method::OHdY => &["bins", "tau"],
            Method::OPdf => &["ranking_bins", "tau"],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A hyperparameter assignment; unset keys take the first value of the
/// method's default grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Bins per histogram (HDx, HDy).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poly_order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interp_factor: Option<f64>,
    /// Bins of the ranking histogram (PDF).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranking_bins: Option<usize>,
    /// Per-class cap on energy reference items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
}

impl Hyperparams {
    fn set_keys(&self) -> Vec<&'static str> {
        let mut keys = Vec::new();
        if self.tau.is_some() {
            keys.push("tau");
        }
        if self.bins.is_some() {
            keys.push("bins");
        }
        if self.poly_order.is_some() {
            keys.push("poly_order");
        }
        if self.interp_factor.is_some() {
            keys.push("interp_factor");
        }
        if self.ranking_bins.is_some() {
            keys.push("ranking_bins");
        }
        if self.cap.is_some() {
            keys.push("cap");
        }
        keys
    }

    /// Sets `key` from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::InvalidHyperparameter(format!("{key} = {value:?}"));
        match key {
            "tau" => self.tau = Some(value.parse().map_err(|_| bad())?),
            "bins" => self.bins = Some(value.parse().map_err(|_| bad())?),
            "poly_order" => self.poly_order = Some(value.parse().map_err(|_| bad())?),
            "interp_factor" => self.interp_factor = Some(value.parse().map_err(|_| bad())?),
            "ranking_bins" | "B" => self.ranking_bins = Some(value.parse().map_err(|_| bad())?),
            "cap" => self.cap = Some(value.parse().map_err(|_| bad())?),
            _ => return Err(Error::InvalidHyperparameter(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// `key=value` pairs in a fixed key order, comma separated.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.bins {
            parts.push(format!("bins={v}"));
        }
        if let Some(v) = self.ranking_bins {
            parts.push(format!("ranking_bins={v}"));
        }
        if let Some(v) = self.poly_order {
            parts.push(format!("poly_order={v}"));
        }
        if let Some(v) = self.interp_factor {
            parts.push(format!("interp_factor={v}"));
        }
        if let Some(v) = self.tau {
            parts.push(format!("tau={v}"));
        }
        if let Some(v) = self.cap {
            parts.push(format!("cap={v}"));
        }
        parts.join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub classifier: TrainConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl MethodSpec {
    pub fn new(method: Method, hyperparams: Hyperparams) -> Result<Self> {
        let spec = MethodSpec {
            method,
            hyperparams,
            classifier: TrainConfig::default(),
            solver: SolverConfig::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let legal = self.method.legal_keys();
        if let Some(key) = self.hyperparams.set_keys().into_iter().find(|k| !legal.contains(k)) {
            return Err(Error::InvalidHyperparameter(format!(
                "{} does not take {key}",
                self.method
            )));
        }
        self.resolved().map(|_| ())
    }

    /// Hyperparameters with defaults filled in and ranges checked.
    fn resolved(&self) -> Result<Resolved> {
        let grid_first = default_grid(self.method).into_iter().next().unwrap_or_default();
        let h = &self.hyperparams;
        let tau = h.tau.or(grid_first.tau).unwrap_or(0.0);
        let bins = h.bins.or(grid_first.bins).unwrap_or(2);
        let ranking_bins = h.ranking_bins.or(grid_first.ranking_bins).unwrap_or(5);
        let poly_order = h.poly_order.or(grid_first.poly_order).unwrap_or(0);
        let interp_factor = h.interp_factor.or(grid_first.interp_factor).unwrap_or(0.0);
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!("tau = {tau}")));
        }
        if bins < 2 || ranking_bins < 2 {
            return Err(Error::InvalidHyperparameter("histograms need at least 2 bins".into()));
        }
        if h.cap == Some(0) {
            return Err(Error::InvalidHyperparameter("cap must be positive".into()));
        }
        let smoothing = SmoothingConfig::new(poly_order, interp_factor)?;
        Ok(Resolved {
            tau,
            bins,
            ranking_bins,
            smoothing,
            cap: h.cap,
        })
    }
}

struct Resolved {
    tau: f64,
    bins: usize,
    ranking_bins: usize,
    smoothing: SmoothingConfig,
    cap: Option<usize>,
}

/// The paper's hyperparameter grid for a method, in declaration order.
pub fn default_grid(method: Method) -> Vec<Hyperparams> {
    const TAUS: [f64; 3] = [1e-5, 1e-3, 1e-1];
    const RUN_TAUS: [f64; 3] = [1e-3, 1e-1, 1e1];
    let base: Vec<Hyperparams> = match method.base() {
        Method::HdX => [2, 3, 4]
            .iter()
            .map(|&b| Hyperparams { bins: Some(b), ..Default::default() })
            .collect(),
        Method::HdY => [2, 4]
            .iter()
            .map(|&b| Hyperparams { bins: Some(b), ..Default::default() })
            .collect(),
        Method::Pdf => [5, 10]
            .iter()
            .map(|&b| Hyperparams { ranking_bins: Some(b), ..Default::default() })
            .collect(),
        Method::Run => RUN_TAUS
            .iter()
            .map(|&t| Hyperparams { tau: Some(t), ..Default::default() })
            .collect(),
        _ => vec![Hyperparams::default()],
    };
    let smoothing_grid = || {
        let mut out = Vec::new();
        for order in [0, 1] {
            for alpha in [1e-2, 1e-1] {
                out.push(Hyperparams {
                    poly_order: Some(order),
                    interp_factor: Some(alpha),
                    ..Default::default()
                });
            }
        }
        out
    };
    match method {
        Method::Ibu | Method::OSld => smoothing_grid(),
        m if m.is_ordinal() => base
            .iter()
            .flat_map(|b| {
                TAUS.iter().map(move |&t| Hyperparams {
                    tau: Some(t),
                    ..b.clone()
                })
            })
            .collect(),
        _ => base,
    }
}

/// Default grid by method name.
pub fn default_grid_by_name(name: &str) -> Result<Vec<Hyperparams>> {
    Ok(default_grid(name.parse()?))
}

/// Everything a fit needs that does not depend on the method: the
/// classifier trained on all training items and out-of-fold posteriors.
#[derive(Debug, Clone)]
pub struct PreparedTraining {
    pub train: LabeledDataset,
    pub classifier: SoftClassifier,
    pub proba_cv: Array2<f64>,
}

impl PreparedTraining {
    pub fn new(train: &LabeledDataset, cv_folds: usize, seed: u64, cfg: &TrainConfig) -> Result<Self> {
        train.require_all_classes()?;
        let classifier = crate::classifier::train(train, cfg)?;
        let proba_cv = cross_val_proba(train, cv_folds, seed, cfg)?;
        Self::from_parts(train.clone(), classifier, proba_cv)
    }

    pub fn from_parts(train: LabeledDataset, classifier: SoftClassifier, proba_cv: Array2<f64>) -> Result<Self> {
        train.require_all_classes()?;
        if proba_cv.dim() != (train.len(), train.n_classes())
            || classifier.n_classes() != train.n_classes()
            || classifier.n_features() != train.n_features()
        {
            return Err(Error::Dimension(
                "classifier, posteriors and training data disagree".into(),
            ));
        }
        Ok(PreparedTraining {
            train,
            classifier,
            proba_cv,
        })
    }

    /// Builds the method's encoder and `M` from the out-of-fold posteriors.
    pub fn fit(&self, spec: &MethodSpec, seed: u64) -> Result<FittedQuantifier> {
        spec.validate()?;
        let r = spec.resolved()?;
        let n = self.train.n_classes();
        let features = self.train.features().view();
        let labels = self.train.labels();
        let proba = self.proba_cv.view();
        let (encoder, m) = match spec.method.base() {
            Method::Cc | Method::Pcc | Method::Sld => {
                let encoder = if spec.method == Method::Cc {
                    Encoder::Hard { n_classes: n }
                } else {
                    Encoder::Soft { n_classes: n }
                };
                (encoder, Array2::eye(n))
            }
            Method::Acc | Method::Ibu | Method::Run => {
                let e = Encoder::Hard { n_classes: n };
                let m = e.class_matrix(features, proba, labels, n)?;
                (e, m)
            }
            Method::Pacc => {
                let e = Encoder::Soft { n_classes: n };
                let m = e.class_matrix(features, proba, labels, n)?;
                (e, m)
            }
            Method::HdX => {
                let e = Encoder::FeatureHist {
                    bins: r.bins,
                    edges: FeatureEdges::from_training(features)?,
                };
                let m = e.class_matrix(features, proba, labels, n)?;
                (e, m)
            }
            Method::HdY => {
                let e = Encoder::PosteriorHist { n_classes: n, bins: r.bins };
                let m = e.class_matrix(features, proba, labels, n)?;
                (e, m)
            }
            Method::EdY => {
                let (e, kept) = energy_encoder(proba, labels, r.cap, seed)?;
                let kept_features = features.select(ndarray::Axis(0), &kept);
                let kept_proba = proba.select(ndarray::Axis(0), &kept);
                let kept_labels: Vec<usize> = kept.iter().map(|&i| labels[i]).collect();
                let m = e.class_matrix(kept_features.view(), kept_proba.view(), &kept_labels, n)?;
                (e, m)
            }
            Method::Pdf => {
                let e = Encoder::RankingHist {
                    n_classes: n,
                    bins: r.ranking_bins,
                };
                let m = e.class_matrix(features, proba, labels, n)?;
                (e, m)
            }
            _ => unreachable!("base methods only"),
        };
        Ok(FittedQuantifier {
            format_version: FORMAT_VERSION,
            spec: spec.clone(),
            n_classes: n,
            classifier: self.classifier.clone(),
            encoder,
            m,
            train_prevalence: self.train.prevalence()?,
        })
    }
}

/// Trains the classifier, cross-validates it and fits `spec`.
pub fn fit(spec: &MethodSpec, train: &LabeledDataset, cv_folds: usize, seed: u64) -> Result<FittedQuantifier> {
    spec.validate()?;
    PreparedTraining::new(train, cv_folds, seed, &spec.classifier)?.fit(spec, seed)
}

/// A fitted method: classifier, encoder metadata and class-conditional
/// embeddings. Serializes to a self-describing JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedQuantifier {
    pub format_version: u32,
    pub spec: MethodSpec,
    pub n_classes: usize,
    pub classifier: SoftClassifier,
    pub encoder: Encoder,
    pub m: Array2<f64>,
    pub train_prevalence: Distribution,
}

/// The minimisation problem a method solves for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub loss: LossSpec,
    pub transfer: TransferModel,
}

impl FittedQuantifier {
    pub fn method(&self) -> Method {
        self.spec.method
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fq: FittedQuantifier =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("model file: {e}")))?;
        if fq.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "model format version {} is not supported (expected {FORMAT_VERSION})",
                fq.format_version
            )));
        }
        fq.spec.validate()?;
        if fq.m.dim() != (fq.encoder.dim(), fq.n_classes) || fq.train_prevalence.len() != fq.n_classes {
            return Err(Error::Data("model file: inconsistent dimensions".into()));
        }
        Ok(fq)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Classifier posteriors for a sample.
    pub fn posteriors(&self, sample: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.classifier.predict_proba_matrix(sample)
    }

    fn transfer_for(&self, features: ArrayView2<'_, f64>, proba: ArrayView2<'_, f64>) -> Result<TransferModel> {
        let q = self.encoder.sample_embedding(features, proba)?;
        let representation = match self.method().base() {
            Method::Ibu | Method::Run => Representation::Partition,
            _ => self.encoder.representation(),
        };
        Ok(TransferModel {
            q,
            m: self.m.clone(),
            representation,
            hist_bins: self.encoder.hist_bins(),
        })
    }

    /// The loss and linear system for a minimise-based method; `None` for
    /// CC, PCC and the EM methods.
    pub fn problem(&self, features: ArrayView2<'_, f64>, proba: ArrayView2<'_, f64>) -> Result<Option<Problem>> {
        if !self.method().uses_minimize() {
            return Ok(None);
        }
        let r = self.spec.resolved()?;
        let kind = match self.method() {
            Method::Acc | Method::Pacc | Method::OAcc | Method::OPacc => LossKind::LeastSquares,
            Method::HdX | Method::HdY | Method::OHdX | Method::OHdY => LossKind::Hellinger,
            Method::Run => LossKind::PoissonRun,
            Method::EdY | Method::OEdY => LossKind::Energy,
            Method::Pdf => LossKind::CdfL1,
            Method::OPdf => LossKind::CdfL2,
            _ => unreachable!("minimize-based methods only"),
        };
        let mut loss = LossSpec::new(kind).with_sample_size(features.nrows().max(1));
        if self.method().is_ordinal() || self.method() == Method::Run {
            loss = loss.regularized(r.tau, TikhonovMatrix::new(self.n_classes, REGULARIZATION_ORDER)?);
        }
        Ok(Some(Problem {
            loss,
            transfer: self.transfer_for(features, proba)?,
        }))
    }

    /// Estimates the prevalence of a sample given its features and the
    /// classifier's posteriors for it, with solver diagnostics.
    pub fn solve(&self, features: ArrayView2<'_, f64>, proba: ArrayView2<'_, f64>) -> Result<SolveResult> {
        if features.ncols() != self.classifier.n_features() {
            return Err(Error::Dimension(format!(
                "sample has {} features, model expects {}",
                features.ncols(),
                self.classifier.n_features()
            )));
        }
        if let Some(problem) = self.problem(features, proba)? {
            return minimize(&problem.loss, &problem.transfer, &self.spec.solver);
        }
        let r = self.spec.resolved()?;
        match self.method() {
            Method::Cc | Method::Pcc => {
                let q = self.encoder.sample_embedding(features, proba)?;
                Ok(SolveResult {
                    estimate: Distribution::from_weights(q.to_vec())?,
                    loss_value: 0.0,
                    iterations: 0,
                    converged: true,
                })
            }
            Method::Sld => sld(proba, &self.train_prevalence, None, EM_MAX_ITER, EM_TOL),
            Method::OSld => sld(proba, &self.train_prevalence, Some(&r.smoothing), EM_MAX_ITER, EM_TOL),
            Method::Ibu => {
                let tm = self.transfer_for(features, proba)?;
                ibu(&tm, &Distribution::uniform(self.n_classes), Some(&r.smoothing), EM_MAX_ITER, EM_TOL)
            }
            _ => unreachable!("handled by problem()"),
        }
    }

    /// [`FittedQuantifier::solve`] returning only the estimate.
    pub fn quantify_with_posteriors(
        &self,
        features: ArrayView2<'_, f64>,
        proba: ArrayView2<'_, f64>,
    ) -> Result<Distribution> {
        Ok(self.solve(features, proba)?.estimate)
    }

    pub fn quantify(&self, sample: ArrayView2<'_, f64>) -> Result<Distribution> {
        let proba = self.posteriors(sample)?;
        self.quantify_with_posteriors(sample, proba.view())
    }
}

/// Method name to its grid, for every method.
pub fn all_grids() -> BTreeMap<Method, Vec<Hyperparams>> {
    Method::ALL.into_iter().map(|m| (m, default_grid(m))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn blobs(per_class: usize, n: usize, spread: f64, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..n {
            for _ in 0..per_class {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                rows.extend([c as f64 * 4.0 + spread * a, spread * b]);
                labels.push(c);
            }
        }
        LabeledDataset::new(Array2::from_shape_vec((labels.len(), 2), rows).unwrap(), labels, n).unwrap()
    }

    fn identity_model(method: Method, hyperparams: Hyperparams) -> FittedQuantifier {
        let n = 4;
        let encoder = match method {
            Method::Pacc | Method::OPacc => Encoder::Soft { n_classes: n },
            _ => Encoder::Hard { n_classes: n },
        };
        FittedQuantifier {
            format_version: FORMAT_VERSION,
            spec: MethodSpec::new(method, hyperparams).unwrap(),
            n_classes: n,
            classifier: SoftClassifier::from_weights(Array2::zeros((n, 3))).unwrap(),
            encoder,
            m: Array2::eye(n),
            train_prevalence: Distribution::uniform(n),
        }
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(default_grid(Method::Cc), vec![Hyperparams::default()]);
        assert_eq!(default_grid(Method::OHdX).len(), 9);
        assert_eq!(default_grid(Method::Ibu).len(), 4);
        assert_eq!(default_grid(Method::OSld).len(), 4);
        assert_eq!(default_grid(Method::OPdf).len(), 6);
        assert_eq!(default_grid(Method::OHdY).len(), 6);
        assert_eq!(default_grid(Method::Run).len(), 3);
        assert_eq!(default_grid(Method::OEdY).len(), 3);
        let taus: Vec<f64> = default_grid(Method::Run).iter().map(|h| h.tau.unwrap()).collect();
        assert_eq!(taus, vec![1e-3, 1e-1, 1e1]);
        assert!(default_grid_by_name("ARC").is_err());
        for (m, grid) in all_grids() {
            for h in grid {
                assert!(MethodSpec::new(m, h).is_ok(), "{m}");
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
        }
        assert_eq!(Method::OPdf.base(), Method::Pdf);
        assert_eq!("OQT".parse::<Method>(), Err(Error::UnknownMethod("OQT".into())));
    }

    #[test]
    fn illegal_hyperparameters_are_rejected() {
        let h = Hyperparams { tau: Some(0.1), ..Default::default() };
        assert!(MethodSpec::new(Method::Pacc, h).is_err());
        let h = Hyperparams { interp_factor: Some(2.0), ..Default::default() };
        assert!(MethodSpec::new(Method::OSld, h).is_err());
        let mut h = Hyperparams::default();
        h.set("B", "10").unwrap();
        assert_eq!(h.ranking_bins, Some(10));
        assert!(h.set("gamma", "1").is_err());
        assert!(h.set("tau", "x").is_err());
    }

    #[test]
    fn identity_transfer_recovers_q() {
        let proba = array![
            [0.9, 0.1, 0.0, 0.0],
            [0.1, 0.8, 0.1, 0.0],
            [0.0, 0.2, 0.7, 0.1],
            [0.0, 0.0, 0.4, 0.6],
            [0.0, 0.6, 0.4, 0.0]
        ];
        let features = Array2::zeros((5, 2));
        let hard = array![0.2, 0.4, 0.2, 0.2];
        let soft = proba.mean_axis(ndarray::Axis(0)).unwrap();
        let run0 = Hyperparams { tau: Some(0.0), ..Default::default() };
        let ibu0 = Hyperparams {
            poly_order: Some(0),
            interp_factor: Some(0.0),
            ..Default::default()
        };
        for (fq, want) in [
            (identity_model(Method::Acc, Hyperparams::default()), &hard),
            (identity_model(Method::Pacc, Hyperparams::default()), &soft),
            (identity_model(Method::Run, run0), &hard),
            (identity_model(Method::Ibu, ibu0), &hard),
        ] {
            let est = fq.quantify_with_posteriors(features.view(), proba.view()).unwrap();
            for (a, b) in est.as_slice().iter().zip(want.iter()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn separable_fit_gives_identity_and_is_reproducible() {
        let data = blobs(30, 3, 0.3, 4);
        let spec = MethodSpec::new(Method::Acc, Hyperparams::default()).unwrap();
        let fq = fit(&spec, &data, 5, 11).unwrap();
        for ((i, j), v) in fq.m.indexed_iter() {
            assert_abs_diff_eq!(*v, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-12);
        }
        let again = fit(&spec, &data, 5, 11).unwrap();
        assert_eq!(fq.to_json().unwrap(), again.to_json().unwrap());

        let cc = fit(&MethodSpec::new(Method::Cc, Hyperparams::default()).unwrap(), &data, 5, 11).unwrap();
        assert_eq!(cc.m, Array2::<f64>::eye(3));
        assert_eq!(cc.encoder, Encoder::Hard { n_classes: 3 });
    }

    #[test]
    fn serialization_is_lossless_for_every_method() {
        let data = blobs(20, 3, 1.5, 9);
        let prepared = PreparedTraining::new(&data, 4, 2, &TrainConfig::default()).unwrap();
        let sample = data.features().slice(ndarray::s![10..40, ..]).to_owned();
        for m in Method::ALL {
            let spec = MethodSpec::new(m, default_grid(m).pop().unwrap()).unwrap();
            let fq = prepared.fit(&spec, 3).unwrap();
            let back = FittedQuantifier::from_json(&fq.to_json().unwrap()).unwrap();
            assert_eq!(back, fq, "{m}");
            let est = fq.quantify(sample.view()).unwrap();
            assert_eq!(back.quantify(sample.view()).unwrap(), est);
            assert!(Distribution::new(est.into_vec()).is_ok());
        }
    }

    #[test]
    fn wrong_feature_count_is_a_dimension_error() {
        let data = blobs(10, 3, 1.0, 1);
        let fq = fit(&MethodSpec::new(Method::Pcc, Hyperparams::default()).unwrap(), &data, 3, 0).unwrap();
        assert!(matches!(fq.quantify(Array2::zeros((4, 5)).view()), Err(Error::Dimension(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let fq = identity_model(Method::Cc, Hyperparams::default());
        let text = fq.to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(FittedQuantifier::from_json(&text).is_err());
    }

    #[test]
    fn ordinal_degenerates_at_zero_tau() {
        let data = blobs(20, 4, 2.0, 5);
        let prepared = PreparedTraining::new(&data, 4, 7, &TrainConfig::default()).unwrap();
        let sample = data.features().slice(ndarray::s![5..60, ..]).to_owned();
        for (o, extra) in [
            (Method::OPacc, Hyperparams::default()),
            (Method::OHdX, Hyperparams { bins: Some(3), ..Default::default() }),
        ] {
            let h = Hyperparams { tau: Some(0.0), ..extra.clone() };
            let a = prepared.fit(&MethodSpec::new(o, h).unwrap(), 0).unwrap();
            let b = prepared.fit(&MethodSpec::new(o.base(), extra).unwrap(), 0).unwrap();
            let ea: Array1<f64> = a.quantify(sample.view()).unwrap().to_array();
            let eb: Array1<f64> = b.quantify(sample.view()).unwrap().to_array();
            assert!((ea - eb).iter().all(|d| d.abs() < 1e-9), "{o}");
        }
    }
}
