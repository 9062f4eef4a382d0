//! Arithmetic on the probability simplex.
//!
//! Prevalence vectors live in [`Distribution`]; unconstrained optimisation
//! happens on [`LatentVector`]s that are mapped back through [`softmax`].
//! Smoothness of an ordinal distribution is measured by [`jaggedness`] and
//! penalised through a [`TikhonovMatrix`].

use std::ops::Index;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sum-to-one tolerance of a [`Distribution`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A prevalence vector: nonnegative components summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidDistribution(format!(
                "component {i} is {v}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("components sum to {sum}")));
        }
        Ok(Distribution(values))
    }

    /// Rescales nonnegative weights to sum to one.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {sum}"
            )));
        }
        Distribution::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Distribution(vec![1.0 / n as f64; n])
    }

    /// The point mass on class `i` (0-based).
    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        Distribution(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_array(&self) -> Array1<f64> {
        Array1::from(self.0.clone())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest component; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Distribution::new(v)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.0
    }
}

impl Index<usize> for Distribution {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Latent coordinates of a distribution, with the first coordinate pinned to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        match values.first() {
            None => Err(Error::Dimension("empty latent vector".into())),
            Some(&v) if v != 0.0 => Err(Error::Dimension(format!(
                "first latent component must be 0, got {v}"
            ))),
            _ if values.iter().any(|v| !v.is_finite()) => {
                Err(Error::Dimension("latent components must be finite".into()))
            }
            _ => Ok(LatentVector(values)),
        }
    }

    pub fn zeros(n: usize) -> Self {
        LatentVector(vec![0.0; n])
    }

    /// Builds a latent vector from arbitrary finite values by translating
    /// them so that the first one is 0; softmax is invariant to the shift.
    pub fn pinned(values: &[f64]) -> Self {
        let first = values[0];
        LatentVector(values.iter().map(|v| v - first).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Max-shifted softmax; finite for any finite input.
pub fn softmax(l: &LatentVector) -> Distribution {
    Distribution(softmax_slice(l.as_slice()))
}

pub(crate) fn softmax_slice(l: &[f64]) -> Vec<f64> {
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Inverse of [`softmax`] under the pinned-first-coordinate convention.
pub fn latent_of(p: &Distribution) -> Result<LatentVector> {
    if let Some(i) = p.as_slice().iter().position(|&v| v <= 0.0) {
        return Err(Error::ZeroComponent(i));
    }
    let first = p[0].ln();
    Ok(LatentVector(
        p.as_slice().iter().map(|v| v.ln() - first).collect(),
    ))
}

/// Draws a prevalence vector uniformly from the simplex (Kraemer's
/// sorted-uniform-gaps construction).
pub fn sample_uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Distribution {
    assert!(n >= 2, "sample_uniform needs n >= 2");
    let mut cuts: Vec<f64> = (0..n - 1).map(|_| rng.random::<f64>()).collect();
    gaps_of(&mut cuts)
}

/// Consecutive differences of `(0, sorted cuts…, 1)`.
pub(crate) fn gaps_of(cuts: &mut [f64]) -> Distribution {
    cuts.sort_by(|a, b| a.total_cmp(b));
    let mut values = Vec::with_capacity(cuts.len() + 1);
    let mut prev = 0.0;
    for &c in cuts.iter() {
        values.push(c - prev);
        prev = c;
    }
    values.push(1.0 - prev);
    Distribution(values)
}

/// Jaggedness ξₖ of an ordinal distribution, for k ∈ {0, 1, 2}.
///
/// ξ₀ sums squared first differences (factor 1/2), ξ₁ squared second
/// differences (factor 1/min(6, n+1)), ξ₂ squared third differences
/// (factor 1/8). Each ranges over [0, 1].
pub fn jaggedness(p: &Distribution, order: usize) -> Result<f64> {
    jaggedness_slice(p.as_slice(), order)
}

pub(crate) fn jaggedness_slice(p: &[f64], order: usize) -> Result<f64> {
    let n = p.len();
    if order > 2 {
        return Err(Error::UnsupportedOrder(order));
    }
    if n < order + 2 {
        return Err(Error::Dimension(format!(
            "jaggedness of order {order} needs at least {} classes, got {n}",
            order + 2
        )));
    }
    let value = match order {
        0 => {
            p.windows(2).map(|w| (w[0] - w[1]).powi(2)).sum::<f64>() / 2.0
        }
        1 => {
            p.windows(3)
                .map(|w| (-w[0] + 2.0 * w[1] - w[2]).powi(2))
                .sum::<f64>()
                / (n + 1).min(6) as f64
        }
        _ => {
            p.windows(4)
                .map(|w| (3.0 * w[1] - 3.0 * w[2] + w[3] - w[0]).powi(2))
                .sum::<f64>()
                / 8.0
        }
    };
    Ok(value)
}

/// Regularisation matrix penalising deviation from a polynomial of degree `order`.
///
/// Rows are shifted copies of the alternating binomial stencil of order
/// `order + 1`: `(1, -1)` for k = 0, `(-1, 2, -1)` for k = 1,
/// `(-1, 3, -3, 1)` for k = 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TikhonovMatrix {
    order: usize,
    rows: Array2<f64>,
}

impl TikhonovMatrix {
    /// Builds Cₖ from the square first-difference matrix C′ (C₀ plus a final
    /// row `e_n`): P₀ = C′, Pₖ = Pₖ₋₁ᵀ C′. Pₖ holds ⌈k/2⌉ transposed factors on
    /// the left and ⌊k/2⌋+1 plain factors on the right; the rows whose stencil
    /// reaches past either boundary are dropped.
    pub fn new(n: usize, order: usize) -> Result<Self> {
        if n < order + 2 {
            return Err(Error::Dimension(format!(
                "Tikhonov matrix of order {order} needs n >= {}, got {n}",
                order + 2
            )));
        }
        let mut square = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            square[[i, i]] = 1.0;
            if i + 1 < n {
                square[[i, i + 1]] = -1.0;
            }
        }
        let mut product = square.clone();
        for _ in 0..order {
            product = product.t().dot(&square);
        }
        let head = order.div_ceil(2);
        let tail = order / 2 + 1;
        let mut rows = product
            .slice(ndarray::s![head..n - tail, ..])
            .to_owned();

        // unit leading coefficient; the product only ever yields ±1 there
        for mut row in rows.rows_mut() {
            if let Some(&lead) = row.iter().find(|v| **v != 0.0) {
                let scale = lead.abs();
                row.mapv_inplace(|v| v / scale);
            }
        }
        Ok(TikhonovMatrix { order, rows })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of classes (columns).
    pub fn n(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn apply(&self, p: &[f64]) -> Array1<f64> {
        self.rows.dot(&ndarray::ArrayView1::from(p))
    }

    /// CᵀC p, the gradient of ½‖Cp‖².
    pub fn gram_apply(&self, p: &[f64]) -> Array1<f64> {
        self.rows.t().dot(&self.apply(p))
    }
}

/// (τ/2)·‖Cp‖².
pub fn regularizer(p: &Distribution, c: &TikhonovMatrix, tau: f64) -> Result<f64> {
    if c.n() != p.len() {
        return Err(Error::Dimension(format!(
            "Tikhonov matrix has {} columns, distribution has {} classes",
            c.n(),
            p.len()
        )));
    }
    Ok(penalty(p.as_slice(), c, tau))
}

pub(crate) fn penalty(p: &[f64], c: &TikhonovMatrix, tau: f64) -> f64 {
    if tau == 0.0 {
        return 0.0;
    }
    tau / 2.0 * c.apply(p).iter().map(|v| v * v).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&LatentVector::zeros(5));
        for v in p.as_slice() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
        }
        let p = softmax(&LatentVector::new(vec![0.0, 2f64.ln(), 0.0]).unwrap());
        assert_abs_diff_eq!(p[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[2], 0.25, epsilon = 1e-15);

        let p = softmax(&LatentVector::new(vec![0.0, 700.0, 0.0]).unwrap());
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn latent_examples() {
        let l = latent_of(&Distribution::uniform(4)).unwrap();
        assert_eq!(l.as_slice(), &[0.0; 4]);
        let l = latent_of(&dist(&[0.25, 0.5, 0.25])).unwrap();
        assert_abs_diff_eq!(l.as_slice()[1], 2f64.ln(), epsilon = 1e-15);
        assert_eq!(l.as_slice()[0], 0.0);
        assert_eq!(
            latent_of(&dist(&[0.5, 0.0, 0.5])),
            Err(Error::ZeroComponent(1))
        );
    }

    #[test]
    fn latent_rejects_unpinned() {
        assert!(LatentVector::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn distribution_rejects_invalid() {
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![-0.1, 1.1]).is_err());
        assert!(Distribution::new(vec![1.0]).is_err());
        assert!(Distribution::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn kraemer_two_classes() {
        let p = gaps_of(&mut [0.3]);
        assert_abs_diff_eq!(p[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn kraemer_component_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sums = [0.0; 5];
        let draws = 100_000;
        for _ in 0..draws {
            let p = sample_uniform(5, &mut rng);
            for (s, v) in sums.iter_mut().zip(p.as_slice()) {
                *s += v;
            }
        }
        for s in sums {
            assert!((s / draws as f64 - 0.2).abs() < 0.005);
        }
    }

    #[test]
    fn worked_jaggedness_values() {
        let smooth = dist(&[0.20, 0.10, 0.05, 0.20, 0.45]);
        let jagged = dist(&[0.02, 0.47, 0.02, 0.47, 0.02]);
        let smooth_alt = dist(&[0.20, 0.10, 0.05, 0.25, 0.40]);
        // printed values sum to 0.985; rescaling keeps third differences at 0
        let parabola = Distribution::from_weights(vec![0.129, 0.093, 0.127, 0.231, 0.405]).unwrap();
        assert_abs_diff_eq!(jaggedness(&smooth, 1).unwrap(), 0.00875, epsilon = 1e-12);
        assert!((jaggedness(&smooth, 1).unwrap() - 0.009).abs() < 5e-4);
        assert_abs_diff_eq!(jaggedness(&jagged, 1).unwrap(), 0.405, epsilon = 1e-12);
        assert_abs_diff_eq!(jaggedness(&jagged, 0).unwrap(), 0.405, epsilon = 1e-12);
        assert_abs_diff_eq!(jaggedness(&smooth_alt, 0).unwrap(), 0.0375, epsilon = 1e-12);
        assert_abs_diff_eq!(jaggedness(&parabola, 2).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn jaggedness_errors() {
        let p = Distribution::uniform(5);
        assert_eq!(jaggedness(&p, 3), Err(Error::UnsupportedOrder(3)));
        assert!(jaggedness(&Distribution::uniform(3), 2).is_err());
    }

    #[test]
    fn printed_tikhonov_matrices() {
        let c1 = TikhonovMatrix::new(5, 1).unwrap();
        assert_eq!(c1.rows().dim(), (3, 5));
        for r in 0..3 {
            let mut want = [0.0; 5];
            want[r] = -1.0;
            want[r + 1] = 2.0;
            want[r + 2] = -1.0;
            assert_eq!(c1.rows().row(r).to_vec(), want.to_vec());
        }
        let c0 = TikhonovMatrix::new(4, 0).unwrap();
        assert_eq!(c0.rows().dim(), (3, 4));
        for r in 0..3 {
            let mut want = [0.0; 4];
            want[r] = 1.0;
            want[r + 1] = -1.0;
            assert_eq!(c0.rows().row(r).to_vec(), want.to_vec());
        }
        let c2 = TikhonovMatrix::new(6, 2).unwrap();
        assert_eq!(c2.rows().dim(), (3, 6));
        for r in 0..3 {
            let mut want = [0.0; 6];
            want[r] = -1.0;
            want[r + 1] = 3.0;
            want[r + 2] = -3.0;
            want[r + 3] = 1.0;
            assert_eq!(c2.rows().row(r).to_vec(), want.to_vec());
        }
    }

    #[test]
    fn higher_order_tikhonov_is_fourth_difference() {
        let c3 = TikhonovMatrix::new(7, 3).unwrap();
        assert_eq!(c3.rows().dim(), (3, 7));
        assert_eq!(
            c3.rows().row(1).to_vec(),
            vec![0.0, 1.0, -4.0, 6.0, -4.0, 1.0, 0.0]
        );
        assert!(TikhonovMatrix::new(4, 3).is_err());
    }

    #[test]
    fn regularizer_examples() {
        let c1 = TikhonovMatrix::new(5, 1).unwrap();
        let jagged = dist(&[0.02, 0.47, 0.02, 0.47, 0.02]);
        assert_eq!(regularizer(&jagged, &c1, 0.0).unwrap(), 0.0);
        // direct: three second differences of magnitude 0.9
        let direct = 0.5 * 3.0 * 0.9f64.powi(2);
        assert_abs_diff_eq!(regularizer(&jagged, &c1, 1.0).unwrap(), 1.215, epsilon = 1e-12);
        assert_abs_diff_eq!(direct, 1.215, epsilon = 1e-12);
        let line = dist(&[0.0, 0.1, 0.2, 0.3, 0.4]);
        assert_abs_diff_eq!(regularizer(&line, &c1, 5.0).unwrap(), 0.0, epsilon = 1e-12);
        let c = TikhonovMatrix::new(4, 1).unwrap();
        assert!(regularizer(&jagged, &c, 1.0).is_err());
    }

    fn positive_distribution(max_n: usize) -> impl Strategy<Value = Distribution> {
        prop::collection::vec(1e-3f64..1.0, 3..=max_n)
            .prop_map(|w| Distribution::from_weights(w).unwrap())
    }

    fn any_distribution(max_n: usize) -> impl Strategy<Value = Distribution> {
        prop::collection::vec(0f64..1.0, 3..=max_n).prop_filter_map("zero mass", |w| {
            Distribution::from_weights(w).ok()
        })
    }

    proptest! {
        #[test]
        fn softmax_inverts_latent(p in positive_distribution(12)) {
            let back = softmax(&latent_of(&p).unwrap());
            for (a, b) in back.as_slice().iter().zip(p.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_stays_on_simplex(raw in prop::collection::vec(-800f64..800.0, 2..16)) {
            let p = softmax(&LatentVector::pinned(&raw));
            prop_assert!(Distribution::new(p.into_vec()).is_ok());
        }

        #[test]
        fn matrix_and_scalar_jaggedness_agree(p in any_distribution(14)) {
            let n = p.len();
            let c1 = TikhonovMatrix::new(n, 1).unwrap();
            let from_matrix = c1.apply(p.as_slice()).iter().map(|v| v * v).sum::<f64>()
                / (n + 1).min(6) as f64;
            prop_assert!((from_matrix - jaggedness(&p, 1).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn polynomials_have_zero_jaggedness(
            a in -1f64..1.0, b in -1f64..1.0, c in -1f64..1.0, n in 4usize..12,
        ) {
            for order in 0..=2usize {
                let raw: Vec<f64> = (1..=n).map(|i| {
                    let x = i as f64;
                    match order { 0 => 1.0, 1 => a * x + 5.0, _ => b * x * x + c * x + 50.0 }
                }).collect();
                let total: f64 = raw.iter().sum();
                prop_assume!(raw.iter().all(|v| *v >= 0.0) && total > 0.0);
                let p = Distribution::from_weights(raw).unwrap();
                prop_assert!(jaggedness(&p, order).unwrap() < 1e-12);
            }
        }

        #[test]
        fn tikhonov_rows_sum_to_zero(n in 2usize..14, k in 0usize..5) {
            prop_assume!(n >= k + 2);
            let c = TikhonovMatrix::new(n, k).unwrap();
            prop_assert_eq!(c.rows().nrows(), n - 1 - k);
            for row in c.rows().rows() {
                prop_assert!(row.sum().abs() < 1e-12);
            }
        }

        #[test]
        fn regularizer_ignores_constant_shift(
            v in prop::collection::vec(-1f64..1.0, 5), shift in -3f64..3.0,
        ) {
            let c = TikhonovMatrix::new(5, 1).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            prop_assert!((penalty(&v, &c, 2.0) - penalty(&shifted, &c, 2.0)).abs() < 1e-10);
        }
    }
}
