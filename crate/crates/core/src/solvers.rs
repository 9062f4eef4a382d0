//! Loss functions over the simplex and the solvers that minimise them.
//!
//! Distribution-matching losses are minimised in latent space: `p =
//! softmax(l)` with `l₁ = 0`, by descent with a backtracking line search
//! along the centred `p`-space gradient (a normalised subgradient method for
//! the non-smooth match distance). The EM solvers ([`sld`], [`ibu`])
//! iterate Bayes updates and optionally smooth each intermediate prior with
//! a low-order polynomial.

use ndarray::{Array1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{penalty, softmax, softmax_slice, Distribution, LatentVector, TikhonovMatrix};
use crate::transfer::TransferModel;

/// Rates below this are clamped before taking logarithms.
pub const RATE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// ‖q − Mp‖².
    LeastSquares,
    /// Mean Hellinger distance over the concatenated histograms.
    Hellinger,
    /// Poisson negative log-likelihood of the counts |σ|·q.
    PoissonRun,
    /// Energy distance 2pᵀq − pᵀMp.
    Energy,
    /// Squared L2 distance between cumulative histograms.
    CdfL2,
    /// Match distance (L1 between cumulative histograms); not smooth.
    CdfL1,
}

impl LossKind {
    pub fn is_smooth(self) -> bool {
        self != LossKind::CdfL1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub tau: f64,
    pub tikhonov: Option<TikhonovMatrix>,
    /// |σ|, the count scale of `PoissonRun`.
    pub sample_size: usize,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            tau: 0.0,
            tikhonov: None,
            sample_size: 1,
        }
    }

    /// Adds (τ/2)‖Cp‖².
    pub fn regularized(mut self, tau: f64, c: TikhonovMatrix) -> Self {
        self.tau = tau;
        self.tikhonov = Some(c);
        self
    }

    pub fn with_sample_size(mut self, sample_size: usize) -> Self {
        self.sample_size = sample_size;
        self
    }

    fn validate(&self, tm: &TransferModel) -> Result<()> {
        let n = tm.n_classes();
        if tm.q.len() != tm.dim() {
            return Err(Error::Dimension(format!(
                "q has {} entries but M has {} rows",
                tm.q.len(),
                tm.dim()
            )));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::InvalidHyperparameter(format!("tau = {}", self.tau)));
        }
        if self.tau > 0.0 {
            match &self.tikhonov {
                None => {
                    return Err(Error::InvalidHyperparameter(
                        "tau > 0 requires a Tikhonov matrix".into(),
                    ))
                }
                Some(c) if c.n() != n => {
                    return Err(Error::Dimension(format!(
                        "Tikhonov matrix has {} columns for {n} classes",
                        c.n()
                    )))
                }
                _ => {}
            }
        }
        if self.kind == LossKind::Hellinger {
            let bins = tm.hist_bins.unwrap_or(tm.dim());
            if bins == 0 || tm.dim() % bins != 0 {
                return Err(Error::Dimension(format!(
                    "{} embedding dimensions do not split into histograms of {bins}",
                    tm.dim()
                )));
            }
        }
        if matches!(self.kind, LossKind::CdfL1 | LossKind::CdfL2) && tm.dim() < 2 {
            return Err(Error::Dimension("cumulative losses need at least 2 bins".into()));
        }
        if self.kind == LossKind::PoissonRun && self.sample_size == 0 {
            return Err(Error::InvalidHyperparameter("sample_size must be positive".into()));
        }
        Ok(())
    }
}

fn check_len(p_len: usize, tm: &TransferModel) -> Result<()> {
    if p_len != tm.n_classes() {
        return Err(Error::Dimension(format!(
            "{p_len} prevalences for a transfer model with {} classes",
            tm.n_classes()
        )));
    }
    Ok(())
}

/// Base loss (no regularizer) and its (sub)gradient with respect to `p`.
fn base_loss(spec: &LossSpec, p: &[f64], tm: &TransferModel) -> (f64, Array1<f64>) {
    let m = &tm.m;
    let pv = ndarray::ArrayView1::from(p);
    let mp = m.dot(&pv);
    match spec.kind {
        LossKind::LeastSquares => {
            let r = &tm.q - &mp;
            let loss = r.dot(&r);
            (loss, m.t().dot(&r) * -2.0)
        }
        LossKind::Hellinger => {
            let bins = tm.hist_bins.unwrap_or(tm.dim());
            let groups = tm.dim() / bins;
            let mut loss = 0.0;
            // gradient with respect to the predicted histogram entries
            let mut dmp = Array1::<f64>::zeros(tm.dim());
            for g in 0..groups {
                let range = g * bins..(g + 1) * bins;
                let sq: f64 = range
                    .clone()
                    .map(|j| (tm.q[j].max(0.0).sqrt() - mp[j].max(0.0).sqrt()).powi(2))
                    .sum();
                let hd = sq.sqrt();
                loss += hd;
                if hd > 0.0 {
                    for j in range {
                        if mp[j] > 0.0 {
                            let rb = mp[j].sqrt();
                            dmp[j] = (rb - tm.q[j].max(0.0).sqrt()) / (2.0 * hd * rb);
                        }
                    }
                }
            }
            let scale = 1.0 / groups as f64;
            (loss * scale, m.t().dot(&dmp) * scale)
        }
        LossKind::PoissonRun => {
            let size = spec.sample_size as f64;
            let mut loss = 0.0;
            let mut dmp = Array1::<f64>::zeros(tm.dim());
            for j in 0..tm.dim() {
                let counts = size * tm.q[j];
                let rate = size * mp[j];
                if rate > RATE_FLOOR {
                    loss += rate - counts * rate.ln();
                    dmp[j] = size * (1.0 - counts / rate);
                } else {
                    loss += rate - counts * RATE_FLOOR.ln();
                    dmp[j] = size;
                }
            }
            (loss, m.t().dot(&dmp))
        }
        LossKind::Energy => {
            let loss = 2.0 * pv.dot(&tm.q) - pv.dot(&mp);
            let grad = &tm.q * 2.0 - &mp - &m.t().dot(&pv);
            (loss, grad)
        }
        LossKind::CdfL2 | LossKind::CdfL1 => {
            let dim = tm.dim();
            let mut cum = Array1::<f64>::zeros(dim);
            let (mut cq, mut cm) = (0.0, 0.0);
            for j in 0..dim {
                cq += tm.q[j];
                cm += mp[j];
                cum[j] = cq - cm;
            }
            let mut dcum = Array1::<f64>::zeros(dim);
            let loss = if spec.kind == LossKind::CdfL2 {
                dcum.assign(&(&cum * -2.0));
                cum.dot(&cum)
            } else {
                // the last cumulative entry is 1 − 1 for distributions
                let mut total = 0.0;
                for j in 0..dim - 1 {
                    total += cum[j].abs();
                    dcum[j] = -sign(cum[j]);
                }
                total
            };
            // back through the cumulative sum: d/dmp_i = Σ_{j ≥ i} dcum_j
            let mut dmp = Array1::<f64>::zeros(dim);
            let mut acc = 0.0;
            for j in (0..dim).rev() {
                acc += dcum[j];
                dmp[j] = acc;
            }
            (loss, m.t().dot(&dmp))
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss and gradient with respect to `p`, regulariser included.
fn loss_and_grad_p(spec: &LossSpec, p: &[f64], tm: &TransferModel) -> (f64, Array1<f64>) {
    let (mut loss, mut grad) = base_loss(spec, p, tm);
    if spec.tau > 0.0 {
        if let Some(c) = &spec.tikhonov {
            loss += penalty(p, c, spec.tau);
            grad.scaled_add(spec.tau, &c.gram_apply(p));
        }
    }
    (loss, grad)
}

pub fn evaluate_loss(spec: &LossSpec, p: &Distribution, tm: &TransferModel) -> Result<f64> {
    spec.validate(tm)?;
    check_len(p.len(), tm)?;
    Ok(loss_and_grad_p(spec, p.as_slice(), tm).0)
}

/// Pulls a gradient with respect to `p = softmax(l)` back to `l`, with the
/// pinned first coordinate zeroed.
fn latent_gradient(p: &[f64], grad_p: &Array1<f64>) -> Array1<f64> {
    let inner: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    let mut g: Array1<f64> = p
        .iter()
        .zip(grad_p)
        .map(|(pi, gi)| pi * (gi - inner))
        .collect();
    g[0] = 0.0;
    g
}

/// Gradient of `evaluate_loss ∘ softmax` at `l` (a subgradient for `CdfL1`).
pub fn gradient(spec: &LossSpec, l: &LatentVector, tm: &TransferModel) -> Result<Array1<f64>> {
    spec.validate(tm)?;
    check_len(l.len(), tm)?;
    let p = softmax(l);
    let (_, grad_p) = loss_and_grad_p(spec, p.as_slice(), tm);
    Ok(latent_gradient(p.as_slice(), &grad_p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Uniform,
    Warm(Distribution),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub init: Init,
    /// Additional starts from seeded standard-normal latent vectors.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 10_000,
            grad_tol: 1e-10,
            init: Init::Uniform,
            restarts: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub estimate: Distribution,
    /// The minimised loss, or for the EM solvers the mean negative
    /// log-likelihood of the sample under the estimate.
    pub loss_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct Run {
    latent: Vec<f64>,
    loss: f64,
    iterations: usize,
    converged: bool,
}

fn objective(spec: &LossSpec, tm: &TransferModel, latent: &[f64]) -> (f64, Vec<f64>, Array1<f64>) {
    let p = softmax_slice(latent);
    let (loss, grad_p) = loss_and_grad_p(spec, &p, tm);
    let g = latent_gradient(&p, &grad_p);
    (loss, p, g)
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Descent along the centred `p`-space gradient: the latent step
/// `l ← l − s·(∂ᵢL − ∂₀L)` is a multiplicative update of `p`, so faces of the
/// simplex are approached geometrically. Its slope is `−Var_p(∇ₚL) ≤ 0`.
fn descend(spec: &LossSpec, tm: &TransferModel, start: Vec<f64>, cfg: &SolverConfig) -> Run {
    let direction = |x: &[f64]| {
        let p = softmax_slice(x);
        let (loss, grad_p) = loss_and_grad_p(spec, &p, tm);
        let mean: f64 = p.iter().zip(&grad_p).map(|(a, b)| a * b).sum();
        let slope: f64 = p.iter().zip(&grad_p).map(|(a, b)| a * (b - mean) * (b - mean)).sum();
        let d: Vec<f64> = grad_p.iter().map(|v| v - grad_p[0]).collect();
        (loss, d, slope, latent_gradient(&p, &grad_p))
    };
    let mut x = start;
    let (mut loss, mut d, mut slope, mut g) = direction(&x);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        if norm(&g) <= cfg.grad_tol {
            converged = true;
            break;
        }
        let mut accepted = false;
        while step > 1e-30 {
            let candidate: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - step * b).collect();
            let next = direction(&candidate);
            if next.0 <= loss - 1e-4 * step * slope {
                x = candidate;
                (loss, d, slope, g) = next;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no descent left at machine precision
            break;
        }
        iterations += 1;
        step = (step * 2.0).min(1e8);
    }
    if !converged {
        converged = norm(&g) <= cfg.grad_tol;
    }
    Run {
        latent: x,
        loss,
        iterations,
        converged,
    }
}

/// Normalised subgradient descent with a step that halves whenever the best
/// loss stalls; reports convergence once the step is exhausted.
fn subgradient_descend(spec: &LossSpec, tm: &TransferModel, start: Vec<f64>, cfg: &SolverConfig) -> Run {
    const PATIENCE: usize = 10;
    const MIN_STEP: f64 = 1e-12;
    let mut x = start;
    let mut best_x = x.clone();
    let (mut best, _, _) = objective(spec, tm, &x);
    let mut step = 1.0;
    let mut stall = 0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let (loss, _, g) = objective(spec, tm, &x);
        if loss < best {
            best = loss;
            best_x = x.clone();
            stall = 0;
        } else {
            stall += 1;
        }
        if stall >= PATIENCE {
            step *= 0.5;
            x = best_x.clone();
            stall = 0;
            if step < MIN_STEP {
                converged = true;
                break;
            }
            continue;
        }
        let g_norm = norm(&g);
        if g_norm == 0.0 {
            converged = true;
            break;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= step * gi / g_norm;
        }
        iterations += 1;
    }
    Run {
        latent: best_x,
        loss: best,
        iterations,
        converged,
    }
}

/// Minimises `spec` over the simplex through the softmax parameterisation.
///
/// Starts from the configured initial point and from `cfg.restarts` seeded
/// random latent vectors; returns the lowest-loss run, ties going to the
/// earliest start.
pub fn minimize(spec: &LossSpec, tm: &TransferModel, cfg: &SolverConfig) -> Result<SolveResult> {
    spec.validate(tm)?;
    let n = tm.n_classes();
    if cfg.max_iter == 0 || !(cfg.grad_tol > 0.0) {
        return Err(Error::InvalidHyperparameter(
            "solver needs max_iter >= 1 and grad_tol > 0".into(),
        ));
    }
    let first = match &cfg.init {
        Init::Uniform => vec![0.0; n],
        Init::Warm(p) => {
            check_len(p.len(), tm)?;
            // keep warm starts off the boundary of the simplex
            let floor = p.as_slice().iter().map(|v| v.max(1e-12)).collect();
            crate::simplex::latent_of(&Distribution::from_weights(floor)?)?
                .as_slice()
                .to_vec()
        }
    };
    let mut starts = vec![first];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.restarts {
        let mut l: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        l[0] = 0.0;
        starts.push(l);
    }

    let mut best: Option<Run> = None;
    for start in starts {
        let run = if spec.kind.is_smooth() {
            descend(spec, tm, start, cfg)
        } else {
            subgradient_descend(spec, tm, start, cfg)
        };
        if best.as_ref().is_none_or(|b| run.loss < b.loss) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one start");
    Ok(SolveResult {
        estimate: softmax(&LatentVector::pinned(&best.latent)),
        loss_value: best.loss,
        iterations: best.iterations,
        converged: best.converged,
    })
}


/// Polynomial smoothing of EM priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    /// 0 or 1.
    pub poly_order: usize,
    /// Weight of the fitted polynomial in [0, 1].
    pub interp_factor: f64,
}

impl SmoothingConfig {
    pub fn new(poly_order: usize, interp_factor: f64) -> Result<Self> {
        if poly_order > 1 {
            return Err(Error::InvalidHyperparameter(format!(
                "polynomial order must be 0 or 1, got {poly_order}"
            )));
        }
        if !(0.0..=1.0).contains(&interp_factor) {
            return Err(Error::InvalidHyperparameter(format!(
                "interpolation factor must lie in [0, 1], got {interp_factor}"
            )));
        }
        Ok(SmoothingConfig {
            poly_order,
            interp_factor,
        })
    }

    /// `(1 − α)·p + α·polyfit(p)`, clipped at 0 and renormalised.
    pub fn apply(&self, p: &Distribution) -> Distribution {
        let fit = polyfit_smooth(p, self.poly_order);
        let a = self.interp_factor;
        let mixed: Vec<f64> = p
            .as_slice()
            .iter()
            .zip(fit.as_slice())
            .map(|(x, f)| ((1.0 - a) * x + a * f).max(0.0))
            .collect();
        renormalize(mixed)
    }
}

fn renormalize(values: Vec<f64>) -> Distribution {
    let n = values.len();
    Distribution::from_weights(values).unwrap_or_else(|_| Distribution::uniform(n))
}

/// Least-squares polynomial of degree `order` through `(i, pᵢ)`, negative
/// values clipped, renormalised.
pub fn polyfit_smooth(p: &Distribution, order: usize) -> Distribution {
    let n = p.len();
    let y = p.as_slice();
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let fitted: Vec<f64> = if order == 0 || n < 2 {
        vec![mean_y; n]
    } else {
        let mean_x = (n + 1) as f64 / 2.0;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for (i, yi) in y.iter().enumerate() {
            let dx = (i + 1) as f64 - mean_x;
            sxy += dx * (yi - mean_y);
            sxx += dx * dx;
        }
        let slope = sxy / sxx;
        (0..n)
            .map(|i| (mean_y + slope * ((i + 1) as f64 - mean_x)).max(0.0))
            .collect()
    };
    renormalize(fitted)
}

fn l1_change(a: &Distribution, b: &Distribution) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

fn require_positive(p: &Distribution) -> Result<()> {
    match p.as_slice().iter().position(|&v| v <= 0.0) {
        Some(i) => Err(Error::ZeroPrior(i)),
        None => Ok(()),
    }
}

/// One EM prior-adjustment step over a sample's posteriors; returns the new
/// estimate and the mean negative log-likelihood under the current prior.
fn sld_step(proba: ArrayView2<'_, f64>, prior: &[f64], train: &[f64]) -> (Vec<f64>, f64) {
    let n = prior.len();
    let ratio: Vec<f64> = prior.iter().zip(train).map(|(a, b)| a / b).collect();
    let mut acc = vec![0.0; n];
    let mut used = 0usize;
    let mut nll = 0.0;
    let mut w = vec![0.0; n];
    for row in proba.rows() {
        let mut z = 0.0;
        for i in 0..n {
            w[i] = ratio[i] * row[i];
            z += w[i];
        }
        if z > 0.0 {
            for i in 0..n {
                acc[i] += w[i] / z;
            }
            used += 1;
            nll -= z.ln();
        }
    }
    if used == 0 {
        return (prior.to_vec(), f64::INFINITY);
    }
    for v in &mut acc {
        *v /= used as f64;
    }
    (acc, nll / used as f64)
}

/// EM prior adjustment of classifier posteriors, starting from the
/// training prevalence; with `smoothing`, each next prior is the smoothed
/// current estimate.
pub fn sld(
    proba_sample: ArrayView2<'_, f64>,
    train_prevalence: &Distribution,
    smoothing: Option<&SmoothingConfig>,
    max_iter: usize,
    tol: f64,
) -> Result<SolveResult> {
    sld_with_trace(proba_sample, train_prevalence, smoothing, max_iter, tol, |_| {})
}

/// [`sld`], reporting every intermediate estimate.
pub fn sld_with_trace(
    proba_sample: ArrayView2<'_, f64>,
    train_prevalence: &Distribution,
    smoothing: Option<&SmoothingConfig>,
    max_iter: usize,
    tol: f64,
    mut on_iterate: impl FnMut(&Distribution),
) -> Result<SolveResult> {
    require_positive(train_prevalence)?;
    if proba_sample.ncols() != train_prevalence.len() {
        return Err(Error::Dimension(format!(
            "posteriors have {} classes, prior has {}",
            proba_sample.ncols(),
            train_prevalence.len()
        )));
    }
    if proba_sample.nrows() == 0 {
        return Err(Error::Data("empty sample".into()));
    }
    let train = train_prevalence.as_slice();
    em_loop(train_prevalence, smoothing, max_iter, tol, &mut on_iterate, |prior| {
        sld_step(proba_sample, prior, train)
    })
}

fn em_loop(
    start: &Distribution,
    smoothing: Option<&SmoothingConfig>,
    max_iter: usize,
    tol: f64,
    on_iterate: &mut impl FnMut(&Distribution),
    mut step: impl FnMut(&[f64]) -> (Vec<f64>, f64),
) -> Result<SolveResult> {
    let mut prior = start.clone();
    let mut current = start.clone();
    let mut nll = f64::NAN;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let (next, step_nll) = step(prior.as_slice());
        let next = renormalize(next);
        iterations += 1;
        nll = step_nll;
        on_iterate(&next);
        let change = l1_change(&next, &current);
        current = next;
        if change < tol {
            converged = true;
            break;
        }
        prior = match smoothing {
            Some(s) => s.apply(&current),
            None => current.clone(),
        };
    }
    Ok(SolveResult {
        estimate: current,
        loss_value: nll,
        iterations,
        converged,
    })
}

/// Iterative Bayesian unfolding on a partition-count transfer model.
///
/// Each step applies Bayes' theorem with the current prior,
/// `p'ᵢ = Σⱼ qⱼ · Mⱼᵢ pᵢ / Σₗ Mⱼₗ pₗ`, where rows of `M` index partitions.
pub fn ibu(
    tm: &TransferModel,
    prior: &Distribution,
    smoothing: Option<&SmoothingConfig>,
    max_iter: usize,
    tol: f64,
) -> Result<SolveResult> {
    ibu_with_trace(tm, prior, smoothing, max_iter, tol, |_| {})
}

pub fn ibu_with_trace(
    tm: &TransferModel,
    prior: &Distribution,
    smoothing: Option<&SmoothingConfig>,
    max_iter: usize,
    tol: f64,
    mut on_iterate: impl FnMut(&Distribution),
) -> Result<SolveResult> {
    require_positive(prior)?;
    check_len(prior.len(), tm)?;
    if tm.q.len() != tm.dim() {
        return Err(Error::Dimension("q and M disagree".into()));
    }
    let m = &tm.m;
    let q = &tm.q;
    em_loop(prior, smoothing, max_iter, tol, &mut on_iterate, |p| {
        let n = p.len();
        let mut next = vec![0.0; n];
        let mut nll = 0.0;
        for j in 0..m.nrows() {
            let row = m.row(j);
            let z: f64 = (0..n).map(|l| row[l] * p[l]).sum();
            if z > 0.0 {
                for i in 0..n {
                    next[i] += q[j] * row[i] * p[i] / z;
                }
                nll -= q[j] * z.ln();
            }
        }
        (next, nll)
    })
}
