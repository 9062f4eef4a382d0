//! Dataset splitting, the artificial prevalence protocol (APP), its
//! smoothness-filtered variant APP-OQ, and synthetic ordinal data.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::simplex::{jaggedness, sample_uniform, Distribution};

/// Consecutive infeasible prevalence draws tolerated per sample.
pub const MAX_REJECTIONS: usize = 1000;

/// Retention percentages offered when matching a reference smoothness.
pub const OQ_PERCENTS: [f64; 5] = [66.0, 50.0, 33.0, 20.0, 5.0];

/// Hamilton apportionment of `total` items to the weights of `p`; ties in
/// the remainders go to the lower index.
pub fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|v| v * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Disjoint, sorted index sets into one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified three-way split: each part receives every class in
/// proportion to the whole dataset, rounded by largest remainder.
pub fn stratified_split(
    data: &LabeledDataset,
    train_size: usize,
    val_pool_size: usize,
    test_pool_size: usize,
    seed: u64,
) -> Result<Split> {
    let total = train_size + val_pool_size + test_pool_size;
    if total > data.len() {
        return Err(Error::InsufficientData(format!(
            "split sizes sum to {total} but the dataset has {} items",
            data.len()
        )));
    }
    let prevalence = data.prevalence()?;
    let per_part: Vec<Vec<usize>> = [train_size, val_pool_size, test_pool_size]
        .iter()
        .map(|&size| largest_remainder(prevalence.as_slice(), size))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = vec![Vec::new(); 3];
    for (c, mut members) in data.class_indices().into_iter().enumerate() {
        let wanted: usize = per_part.iter().map(|p| p[c]).sum();
        if wanted > members.len() {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} items but the split needs {wanted}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let mut offset = 0;
        for (part, counts) in parts.iter_mut().zip(&per_part) {
            part.extend_from_slice(&members[offset..offset + counts[c]]);
            offset += counts[c];
        }
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    let test = parts.pop().unwrap_or_default();
    let validation = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    Ok(Split {
        train,
        validation,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub n_samples: usize,
    pub sample_size: usize,
    /// APP-OQ retention percentage; `None` for plain APP.
    #[serde(default)]
    pub retain_percent: Option<f64>,
    pub seed: u64,
}

impl ProtocolConfig {
    fn validate(&self, n_classes: usize) -> Result<()> {
        if self.n_samples == 0 || self.sample_size < n_classes {
            return Err(Error::InvalidHyperparameter(format!(
                "need n_samples >= 1 and sample_size >= {n_classes}"
            )));
        }
        if let Some(x) = self.retain_percent {
            check_percent(x)?;
        }
        Ok(())
    }
}

fn check_percent(x: f64) -> Result<()> {
    if x > 0.0 && x <= 100.0 {
        Ok(())
    } else {
        Err(Error::InvalidHyperparameter(format!(
            "retention percent must lie in (0, 100], got {x}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawnSample {
    /// Sorted indices into the pool.
    pub indices: Vec<usize>,
    pub target_prevalence: Distribution,
    pub realized_prevalence: Distribution,
    pub size: usize,
    /// Infeasible prevalence vectors discarded before this one.
    pub rejections: usize,
}

fn draw_one(
    pool_members: &[Vec<usize>],
    size: usize,
    seed: u64,
    stream: u64,
) -> Result<DrawnSample> {
    let n = pool_members.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut rejections = 0;
    loop {
        let target = sample_uniform(n, &mut rng);
        let counts = largest_remainder(target.as_slice(), size);
        if counts.iter().zip(pool_members).any(|(&k, m)| k > m.len()) {
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(Error::Unsatisfiable(rejections));
            }
            continue;
        }
        let mut indices = Vec::with_capacity(size);
        for (members, &k) in pool_members.iter().zip(&counts) {
            indices.extend(index::sample(&mut rng, members.len(), k).into_iter().map(|j| members[j]));
        }
        indices.sort_unstable();
        let realized =
            Distribution::from_weights(counts.iter().map(|&k| k as f64).collect())?;
        return Ok(DrawnSample {
            indices,
            target_prevalence: target,
            realized_prevalence: realized,
            size,
            rejections,
        });
    }
}

/// APP samples from a pool; sample `i` uses its own generator stream of
/// `cfg.seed`, so the result does not depend on scheduling. Applies the
/// APP-OQ filter when `cfg.retain_percent` is set.
pub fn draw_app(pool: &LabeledDataset, cfg: &ProtocolConfig) -> Result<Vec<DrawnSample>> {
    cfg.validate(pool.n_classes())?;
    pool.require_all_classes()?;
    let members = pool.class_indices();
    let samples = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| draw_one(&members, cfg.sample_size, cfg.seed, i as u64))
        .collect::<Result<Vec<_>>>()?;
    match cfg.retain_percent {
        Some(x) => filter_smoothest(samples, x),
        None => Ok(samples),
    }
}

/// Samples at given target prevalences (one per target); sample `i` uses
/// generator stream `i` of `seed`.
pub fn draw_at(
    pool: &LabeledDataset,
    targets: &[Distribution],
    sample_size: usize,
    seed: u64,
) -> Result<Vec<DrawnSample>> {
    pool.require_all_classes()?;
    let members = pool.class_indices();
    targets
        .par_iter()
        .enumerate()
        .map(|(i, target)| {
            if target.len() != members.len() {
                return Err(Error::Dimension(format!(
                    "prevalence vector {i} has {} classes, the pool {}",
                    target.len(),
                    members.len()
                )));
            }
            let counts = largest_remainder(target.as_slice(), sample_size);
            if let Some(c) = (0..counts.len()).find(|&c| counts[c] > members[c].len()) {
                return Err(Error::InsufficientData(format!(
                    "prevalence vector {i} needs {} items of class {c}, the pool has {}",
                    counts[c],
                    members[c].len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut indices = Vec::with_capacity(sample_size);
            for (m, &k) in members.iter().zip(&counts) {
                indices.extend(index::sample(&mut rng, m.len(), k).into_iter().map(|j| m[j]));
            }
            indices.sort_unstable();
            Ok(DrawnSample {
                indices,
                target_prevalence: target.clone(),
                realized_prevalence: Distribution::from_weights(
                    counts.iter().map(|&k| k as f64).collect(),
                )?,
                size: sample_size,
                rejections: 0,
            })
        })
        .collect()
}

/// Number of items kept when retaining `x` percent of `count`.
pub fn retained_count(count: usize, x: f64) -> usize {
    ((x * count as f64 / 100.0).ceil() as usize).min(count)
}

/// Positions of the `x` percent of vectors with the lowest ξ₁, in their
/// original order; ties keep the earlier vector.
pub fn smoothest_positions(prevalences: &[&Distribution], x: f64) -> Result<Vec<usize>> {
    check_percent(x)?;
    let xi = prevalences
        .iter()
        .map(|p| jaggedness(p, 1))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..xi.len()).collect();
    order.sort_by(|&a, &b| xi[a].total_cmp(&xi[b]).then(a.cmp(&b)));
    order.truncate(retained_count(xi.len(), x));
    order.sort_unstable();
    Ok(order)
}

/// APP-OQ: keeps the `x` percent smoothest samples by ξ₁ of their realized
/// prevalence, in draw order.
pub fn filter_smoothest(samples: Vec<DrawnSample>, x: f64) -> Result<Vec<DrawnSample>> {
    let refs: Vec<&Distribution> = samples.iter().map(|s| &s.realized_prevalence).collect();
    let keep = smoothest_positions(&refs, x)?;
    let mut keep_iter = keep.into_iter().peekable();
    Ok(samples
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| {
            if keep_iter.peek() == Some(&i) {
                keep_iter.next();
                Some(s)
            } else {
                None
            }
        })
        .collect())
}

/// Mean ξ₁ of the retained `x` percent (all of them for `None`).
pub fn mean_retained_jaggedness(prevalences: &[Distribution], x: Option<f64>) -> Result<f64> {
    let refs: Vec<&Distribution> = prevalences.iter().collect();
    let keep = match x {
        Some(x) => smoothest_positions(&refs, x)?,
        None => (0..refs.len()).collect(),
    };
    if keep.is_empty() {
        return Err(Error::Empty);
    }
    let mut total = 0.0;
    for &i in &keep {
        total += jaggedness(refs[i], 1)?;
    }
    Ok(total / keep.len() as f64)
}

/// Uniform prevalence vectors, one generator stream per draw.
pub fn kraemer_draws(n: usize, count: usize, seed: u64) -> Vec<Distribution> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sample_uniform(n, &mut rng)
        })
        .collect()
}

/// One row of the protocol table: a protocol label and its mean ξ₁.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolStat {
    pub protocol: String,
    pub mean_jaggedness: f64,
}

/// Monte-Carlo mean ξ₁ under APP and each APP-OQ percentage.
pub fn protocol_stats(n: usize, draws: usize, percents: &[f64], seed: u64) -> Result<Vec<ProtocolStat>> {
    if n < 3 {
        return Err(Error::InvalidHyperparameter(format!("need n >= 3, got {n}")));
    }
    let prevalences = kraemer_draws(n, draws, seed);
    let mut out = vec![ProtocolStat {
        protocol: "APP".into(),
        mean_jaggedness: mean_retained_jaggedness(&prevalences, None)?,
    }];
    for &x in percents {
        out.push(ProtocolStat {
            protocol: format!("APP-OQ({x}%)"),
            mean_jaggedness: mean_retained_jaggedness(&prevalences, Some(x))?,
        });
    }
    Ok(out)
}

/// The percentage from [`OQ_PERCENTS`] whose Monte-Carlo mean ξ₁ is
/// closest to `reference`; ties go to the larger percentage.
pub fn choose_percent(n: usize, reference: f64, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let stats = protocol_stats(n, draws, &OQ_PERCENTS, seed)?;
    let mut best = (OQ_PERCENTS[0], stats[1].mean_jaggedness);
    for (x, s) in OQ_PERCENTS.iter().zip(&stats[1..]) {
        if (s.mean_jaggedness - reference).abs() < (best.1 - reference).abs() {
            best = (*x, s.mean_jaggedness);
        }
    }
    Ok(best)
}

/// Gaussian clouds with the mean of class `i` at `i` on the first axis and
/// isotropic spread `overlap`; rows are shuffled.
pub fn synth_ordinal(
    n: usize,
    d: usize,
    size: usize,
    overlap: f64,
    class_prevalence: &Distribution,
    seed: u64,
) -> Result<LabeledDataset> {
    if n < 3 || d < 1 || !(overlap > 0.0) || class_prevalence.len() != n {
        return Err(Error::InvalidHyperparameter(format!(
            "synthetic data needs n >= 3, d >= 1, overlap > 0 and {n} prevalences"
        )));
    }
    let counts = largest_remainder(class_prevalence.as_slice(), size);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    let mut values = Vec::with_capacity(size * d);
    for &y in &labels {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            let centre = if j == 0 { y as f64 } else { 0.0 };
            values.push(centre + overlap * z);
        }
    }
    let features = ndarray::Array2::from_shape_vec((size, d), values)
        .map_err(|e| Error::Data(e.to_string()))?;
    LabeledDataset::new(features, labels, n)
}
