//! The end-to-end evaluation pipeline.
//!
//! Split the data, train once, draw validation and test samples, pick each
//! method's hyperparameters on validation samples only, then score the
//! chosen configuration on test samples and compare methods with paired
//! Wilcoxon tests. Every stochastic step draws from the configured seed,
//! and parallel work is gathered in index order, so reruns are
//! byte-identical.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::TrainConfig;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{nmd, rnod, summarize, wilcoxon_p_value, Measure};
use crate::protocols::{
    draw_app, draw_at, smoothest_positions, stratified_split, synth_ordinal, DrawnSample,
    ProtocolConfig,
};
use crate::quantifiers::{default_grid, FittedQuantifier, Hyperparams, Method, MethodSpec, PreparedTraining};
use crate::simplex::{jaggedness, Distribution};
use crate::solvers::SolverConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Significance level of the pairwise comparisons.
pub const ALPHA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default = "default_measure")]
    pub measure: Measure,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    /// Relative paths resolve against the config file's directory.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub data: DataSource,
    pub split: SplitSizes,
    #[serde(default)]
    pub protocol: ProtocolSettings,
    #[serde(default)]
    pub classifier: TrainConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub methods: Vec<MethodEntry>,
}

fn default_measure() -> Measure {
    Measure::Nmd
}

fn default_folds() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub n_classes: Option<usize>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_features: usize,
    pub size: usize,
    pub overlap: f64,
    /// Class prevalence; uniform when absent.
    #[serde(default)]
    pub prevalence: Option<Vec<f64>>,
}

impl SynthSpec {
    pub fn generate(&self, seed: u64) -> Result<LabeledDataset> {
        let prevalence = match &self.prevalence {
            Some(p) => Distribution::new(p.clone())?,
            None => Distribution::uniform(self.n_classes),
        };
        synth_ordinal(self.n_classes, self.n_features, self.size, self.overlap, &prevalence, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub validation_pool: usize,
    pub test_pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSettings {
    pub validation_samples: usize,
    pub test_samples: usize,
    pub sample_size: usize,
    /// Evaluate under plain APP.
    pub app: bool,
    /// Also evaluate under APP-OQ with this retention percentage.
    pub oq_percent: Option<f64>,
    /// CSV of prevalence vectors, one per line; even-numbered lines
    /// (0-based) drive validation samples, odd-numbered ones test samples.
    pub real_prevalences: Option<PathBuf>,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        ProtocolSettings {
            validation_samples: 300,
            test_samples: 1000,
            sample_size: 1000,
            app: true,
            oq_percent: None,
            real_prevalences: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub name: Method,
    /// Defaults to the method's standard grid.
    #[serde(default)]
    pub grid: Option<Vec<Hyperparams>>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.data.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.protocol.real_prevalences.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.output_dir.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.data.path.is_some() == self.data.synth.is_some() {
            return Err(Error::Config("[data] needs exactly one of `path` and `synth`".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods listed".into()));
        }
        let p = &self.protocol;
        if !p.app && p.oq_percent.is_none() && p.real_prevalences.is_none() {
            return Err(Error::Config("no protocol enabled".into()));
        }
        if p.validation_samples == 0 || p.test_samples == 0 || p.sample_size == 0 {
            return Err(Error::Config("sample counts and size must be positive".into()));
        }
        if let Some(x) = p.oq_percent {
            if !(x > 0.0 && x <= 100.0) {
                return Err(Error::Config(format!("oq_percent must lie in (0, 100], got {x}")));
            }
        }
        for entry in &self.methods {
            for h in self.grid_of(entry) {
                self.spec_for(entry.name, h)
                    .map_err(|e| Error::Config(format!("method {}: {e}", entry.name)))?;
            }
        }
        Ok(())
    }

    fn grid_of(&self, entry: &MethodEntry) -> Vec<Hyperparams> {
        entry.grid.clone().unwrap_or_else(|| default_grid(entry.name))
    }

    fn spec_for(&self, method: Method, hyperparams: Hyperparams) -> Result<MethodSpec> {
        let mut spec = MethodSpec::new(method, hyperparams)?;
        spec.classifier = self.classifier.clone();
        spec.solver = self.solver.clone();
        Ok(spec)
    }

    pub fn load_dataset(&self) -> Result<LabeledDataset> {
        match (&self.data.path, &self.data.synth) {
            (Some(path), None) => LabeledDataset::load(path, self.data.n_classes),
            (None, Some(s)) => s.generate(self.seed),
            _ => Err(Error::Config("[data] needs exactly one of `path` and `synth`".into())),
        }
    }
}

/// Reads prevalence vectors, one comma-separated vector per line.
pub fn read_prevalences(path: &Path) -> Result<Vec<Distribution>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Data(format!("{}: line {}: not a number list", path.display(), i + 1)))?;
        out.push(
            Distribution::new(values)
                .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Validation-side or test-side draws of one sampling family.
struct Draws {
    validation: Vec<DrawnSample>,
    test: Vec<DrawnSample>,
}

/// A protocol: a family of draws and the positions within it that count.
struct View {
    name: String,
    family: usize,
    validation: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub protocol: String,
    pub method: Method,
    pub hyperparams: Hyperparams,
    pub validation_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub protocol: String,
    pub method: Method,
    pub sample: usize,
    pub nmd: f64,
    pub rnod: f64,
    pub truth: Distribution,
    pub estimate: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub protocol: String,
    pub mean: f64,
    pub std: f64,
    /// `best`, `tied` (not significantly worse than the best at
    /// [`ALPHA`]) or `-`.
    pub flag: String,
    /// Wilcoxon p-value against the best method; `None` for the best
    /// itself or when the test is undefined.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub protocol: String,
    pub validation_samples: usize,
    pub test_samples: usize,
    pub validation_mean_jaggedness: f64,
    pub test_mean_jaggedness: f64,
    pub rejections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub measure: Measure,
    pub protocols: Vec<ProtocolSummary>,
    pub selections: Vec<Selection>,
    pub summary: Vec<SummaryRow>,
    /// Per protocol, the method order and the pairwise p-value matrix.
    pub significance: Vec<(String, Vec<Method>, Vec<Vec<Option<f64>>>)>,
    pub scores: Vec<SampleScore>,
}

struct Pool {
    data: LabeledDataset,
    proba: Array2<f64>,
}

impl Pool {
    fn sample(&self, s: &DrawnSample) -> (Array2<f64>, Array2<f64>) {
        (
            self.data.features().select(Axis(0), &s.indices),
            self.proba.select(Axis(0), &s.indices),
        )
    }
}

fn estimate_all(fq: &FittedQuantifier, pool: &Pool, samples: &[DrawnSample]) -> Result<Vec<Distribution>> {
    samples
        .par_iter()
        .map(|s| {
            let (f, p) = pool.sample(s);
            fq.quantify_with_posteriors(f.view(), p.view())
        })
        .collect()
}

fn mean_jaggedness(samples: &[DrawnSample], positions: &[usize]) -> Result<f64> {
    if positions.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for &i in positions {
        total += jaggedness(&samples[i].realized_prevalence, 1)?;
    }
    Ok(total / positions.len() as f64)
}

/// Runs the configured experiment.
pub fn run(cfg: &ExperimentConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    data.require_all_classes()?;
    let split = stratified_split(
        &data,
        cfg.split.train,
        cfg.split.validation_pool,
        cfg.split.test_pool,
        cfg.seed,
    )?;
    let train = data.subset(&split.train);
    let prepared = PreparedTraining::new(&train, cfg.cv_folds, cfg.seed, &cfg.classifier)?;
    let make_pool = |idx: &[usize]| -> Result<Pool> {
        let d = data.subset(idx);
        let proba = prepared.classifier.predict_proba_matrix(d.features().view())?;
        Ok(Pool { data: d, proba })
    };
    let val_pool = make_pool(&split.validation)?;
    let test_pool = make_pool(&split.test)?;

    let ps = &cfg.protocol;
    let mut families = Vec::new();
    let mut views = Vec::new();
    if ps.app || ps.oq_percent.is_some() {
        let draw = |n_samples: usize, pool: &Pool, stream_seed: u64| {
            draw_app(
                &pool.data,
                &ProtocolConfig {
                    n_samples,
                    sample_size: ps.sample_size,
                    retain_percent: None,
                    seed: stream_seed,
                },
            )
        };
        let validation = draw(ps.validation_samples, &val_pool, cfg.seed.wrapping_add(1))?;
        let test = draw(ps.test_samples, &test_pool, cfg.seed.wrapping_add(2))?;
        if ps.app {
            views.push(View {
                name: "APP".into(),
                family: families.len(),
                validation: (0..validation.len()).collect(),
                test: (0..test.len()).collect(),
            });
        }
        if let Some(x) = ps.oq_percent {
            let keep = |s: &[DrawnSample]| {
                let refs: Vec<&Distribution> = s.iter().map(|d| &d.realized_prevalence).collect();
                smoothest_positions(&refs, x)
            };
            views.push(View {
                name: format!("APP-OQ({x}%)"),
                family: families.len(),
                validation: keep(&validation)?,
                test: keep(&test)?,
            });
        }
        families.push(Draws { validation, test });
    }
    if let Some(path) = &ps.real_prevalences {
        let all = read_prevalences(path)?;
        let (val_targets, test_targets): (Vec<_>, Vec<_>) =
            all.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
        let strip = |v: Vec<(usize, Distribution)>| v.into_iter().map(|(_, d)| d).collect::<Vec<_>>();
        let (val_targets, test_targets) = (strip(val_targets), strip(test_targets));
        if val_targets.is_empty() || test_targets.is_empty() {
            return Err(Error::Data(format!(
                "{}: need at least two prevalence vectors",
                path.display()
            )));
        }
        let validation = draw_at(&val_pool.data, &val_targets, ps.sample_size, cfg.seed.wrapping_add(3))?;
        let test = draw_at(&test_pool.data, &test_targets, ps.sample_size, cfg.seed.wrapping_add(4))?;
        views.push(View {
            name: "REAL".into(),
            family: families.len(),
            validation: (0..validation.len()).collect(),
            test: (0..test.len()).collect(),
        });
        families.push(Draws { validation, test });
    }

    // fitted quantifiers for every (method, assignment)
    let mut fitted: Vec<Vec<(Hyperparams, FittedQuantifier)>> = Vec::new();
    for entry in &cfg.methods {
        let mut per = Vec::new();
        for h in cfg.grid_of(entry) {
            let spec = cfg.spec_for(entry.name, h.clone())?;
            per.push((h, prepared.fit(&spec, cfg.seed)?));
        }
        fitted.push(per);
    }

    // validation scores per (family, method, assignment), over all draws
    let mut val_scores: HashMap<(usize, usize, usize), Vec<f64>> = HashMap::new();
    for (fam_idx, fam) in families.iter().enumerate() {
        if !views.iter().any(|v| v.family == fam_idx) {
            continue;
        }
        for (m_idx, per) in fitted.iter().enumerate() {
            for (a_idx, (_, fq)) in per.iter().enumerate() {
                let estimates = estimate_all(fq, &val_pool, &fam.validation)?;
                let scores = estimates
                    .iter()
                    .zip(&fam.validation)
                    .map(|(e, s)| cfg.measure.evaluate(&s.realized_prevalence, e))
                    .collect::<Result<Vec<_>>>()?;
                val_scores.insert((fam_idx, m_idx, a_idx), scores);
            }
        }
    }

    let mut selections = Vec::new();
    let mut summary = Vec::new();
    let mut significance = Vec::new();
    let mut scores_out = Vec::new();
    let mut protocols = Vec::new();
    let mut test_cache: HashMap<(usize, usize, usize), Vec<Distribution>> = HashMap::new();

    for view in &views {
        let fam = &families[view.family];
        protocols.push(ProtocolSummary {
            protocol: view.name.clone(),
            validation_samples: view.validation.len(),
            test_samples: view.test.len(),
            validation_mean_jaggedness: mean_jaggedness(&fam.validation, &view.validation)?,
            test_mean_jaggedness: mean_jaggedness(&fam.test, &view.test)?,
            rejections: view
                .validation
                .iter()
                .map(|&i| fam.validation[i].rejections)
                .chain(view.test.iter().map(|&i| fam.test[i].rejections))
                .sum(),
        });
        if view.validation.is_empty() || view.test.is_empty() {
            return Err(Error::InsufficientData(format!("protocol {} has no samples", view.name)));
        }
        let mut per_method: Vec<Vec<f64>> = Vec::new();
        for (m_idx, per) in fitted.iter().enumerate() {
            // first assignment with the lowest validation mean
            let mut best: Option<(usize, f64)> = None;
            for a_idx in 0..per.len() {
                let all = &val_scores[&(view.family, m_idx, a_idx)];
                let mean = view.validation.iter().map(|&i| all[i]).sum::<f64>() / view.validation.len() as f64;
                if best.is_none_or(|(_, b)| mean < b) {
                    best = Some((a_idx, mean));
                }
            }
            let (a_idx, validation_mean) = best.expect("non-empty grid");
            let (hyperparams, fq) = &per[a_idx];
            selections.push(Selection {
                protocol: view.name.clone(),
                method: fq.method(),
                hyperparams: hyperparams.clone(),
                validation_mean,
            });
            let key = (view.family, m_idx, a_idx);
            if !test_cache.contains_key(&key) {
                test_cache.insert(key, estimate_all(fq, &test_pool, &fam.test)?);
            }
            let estimates = &test_cache[&key];
            let mut chosen = Vec::with_capacity(view.test.len());
            for &i in &view.test {
                let truth = &fam.test[i].realized_prevalence;
                let est = &estimates[i];
                let score = SampleScore {
                    protocol: view.name.clone(),
                    method: fq.method(),
                    sample: i,
                    nmd: nmd(truth, est)?,
                    rnod: rnod(truth, est)?,
                    truth: truth.clone(),
                    estimate: est.clone(),
                };
                chosen.push(match cfg.measure {
                    Measure::Nmd => score.nmd,
                    Measure::Rnod => score.rnod,
                });
                scores_out.push(score);
            }
            per_method.push(chosen);
        }

        let stats = per_method
            .iter()
            .map(|s| summarize(s))
            .collect::<Result<Vec<_>>>()?;
        let mut best = 0;
        for (i, (mean, _)) in stats.iter().enumerate() {
            if *mean < stats[best].0 {
                best = i;
            }
        }
        let methods: Vec<Method> = cfg.methods.iter().map(|e| e.name).collect();
        let k = methods.len();
        let mut matrix = vec![vec![None; k]; k];
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    matrix[i][j] = wilcoxon_p_value(&per_method[i], &per_method[j]).ok();
                }
            }
        }
        for (i, (mean, std)) in stats.iter().enumerate() {
            let p_value = if i == best { None } else { matrix[i][best] };
            let flag = if i == best {
                "best"
            } else if p_value.is_some_and(|p| p >= ALPHA) {
                "tied"
            } else {
                "-"
            };
            summary.push(SummaryRow {
                method: methods[i],
                protocol: view.name.clone(),
                mean: *mean,
                std: *std,
                flag: flag.into(),
                p_value,
            });
        }
        significance.push((view.name.clone(), methods, matrix));
    }

    Ok(EvaluationReport {
        measure: cfg.measure,
        protocols,
        selections,
        summary,
        significance,
        scores: scores_out,
    })
}

fn fmt_opt(p: Option<f64>) -> String {
    p.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn join(d: &Distribution) -> String {
    d.as_slice().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

impl EvaluationReport {
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("protocol,method,sample,nmd,rnod,truth,estimate\n");
        for s in &self.scores {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.protocol,
                s.method,
                s.sample,
                s.nmd,
                s.rnod,
                join(&s.truth),
                join(&s.estimate)
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,protocol,mean,std,best,p_value_vs_best\n");
        for r in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method,
                r.protocol,
                r.mean,
                r.std,
                r.flag,
                fmt_opt(r.p_value)
            );
        }
        out
    }

    /// The summary as an aligned plain-text table.
    pub fn summary_text(&self) -> String {
        let header = ["method", "protocol", "mean", "std", "best", "p-value vs best"];
        let rows: Vec<[String; 6]> = self
            .summary
            .iter()
            .map(|r| {
                [
                    r.method.to_string(),
                    r.protocol.clone(),
                    format!("{:.4}", r.mean),
                    format!("{:.4}", r.std),
                    r.flag.clone(),
                    r.p_value.map_or_else(|| "-".into(), |p| format!("{p:.2e}")),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = format!("measure: {}\n", self.measure.name());
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        out += &line(header.to_vec());
        out.push('\n');
        for row in &rows {
            out += &line(row.iter().map(String::as_str).collect());
            out.push('\n');
        }
        out
    }

    pub fn significance_csv(&self) -> String {
        let mut out = String::new();
        for (protocol, methods, matrix) in &self.significance {
            let names: Vec<String> = methods.iter().map(|m| m.to_string()).collect();
            let _ = writeln!(out, "protocol,method,{}", names.join(","));
            for (m, row) in names.iter().zip(matrix) {
                let cells: Vec<String> = row.iter().map(|p| fmt_opt(*p)).collect();
                let _ = writeln!(out, "{protocol},{m},{}", cells.join(","));
            }
        }
        out
    }

    pub fn selection_csv(&self) -> String {
        let mut out = String::from("protocol,method,hyperparams,validation_mean\n");
        for s in &self.selections {
            let _ = writeln!(
                out,
                "{},{},\"{}\",{}",
                s.protocol,
                s.method,
                s.hyperparams.describe(),
                s.validation_mean
            );
        }
        out
    }

    pub fn protocols_csv(&self) -> String {
        let mut out = String::from(
            "protocol,validation_samples,test_samples,validation_mean_xi1,test_mean_xi1,rejections\n",
        );
        for p in &self.protocols {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                p.protocol,
                p.validation_samples,
                p.test_samples,
                p.validation_mean_jaggedness,
                p.test_mean_jaggedness,
                p.rejections
            );
        }
        out
    }

    /// Writes every report file into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        let files = [
            ("scores.csv", self.scores_csv()),
            ("summary.csv", self.summary_csv()),
            ("summary.txt", self.summary_text()),
            ("significance.csv", self.significance_csv()),
            ("selection.csv", self.selection_csv()),
            ("protocols.csv", self.protocols_csv()),
        ];
        let mut written = Vec::new();
        for (name, content) in files {
            let path = dir.join(name);
            std::fs::write(&path, content).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            written.push(path);
        }
        Ok(written)
    }
}
