//! `ordq`: ordinal quantification from the command line.
//!
//! Exit status is 0 on success, 1 for configuration and usage errors, and
//! 2 for data errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array2;
use ordq::data::{read_features, LabeledDataset};
use ordq::experiment::{self, ExperimentConfig, SynthSpec};
use ordq::metrics::{summarize, Measure};
use ordq::protocols::{draw_app, protocol_stats, stratified_split, ProtocolConfig, OQ_PERCENTS};
use ordq::quantifiers::{fit, FittedQuantifier, Hyperparams, MethodSpec};
use ordq::{Distribution, Error};

#[derive(Parser)]
#[command(name = "ordq", version, about = "Ordinal quantification: fit, quantify and evaluate prevalence estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ordinal dataset.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        features: usize,
        #[arg(long)]
        size: usize,
        /// Spread of each class cloud; class means are one unit apart.
        #[arg(long, default_value_t = 1.0)]
        overlap: f64,
        /// Comma-separated class prevalences; uniform by default.
        #[arg(long)]
        prevalence: Option<String>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset into stratified train, validation-pool and test-pool files.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        validation: usize,
        #[arg(long)]
        test: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Draw APP (or APP-OQ) samples from a pool.
    Sample {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        size: usize,
        /// Keep only this percentage of smoothest samples.
        #[arg(long)]
        oq_percent: Option<f64>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit a quantification method on a training set.
    Fit {
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        /// Hyperparameter as key=value; repeatable.
        #[arg(long = "param")]
        params: Vec<String>,
        #[arg(long, default_value_t = 10)]
        cv_folds: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the estimated prevalence of a sample.
    Quantify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sample: PathBuf,
    },
    /// Score a fitted model on a directory written by `sample`.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value = "NMD")]
        measure: String,
        /// Per-sample scores CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a configured experiment end to end.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte-Carlo jaggedness of APP and APP-OQ prevalence vectors.
    ProtocolStats {
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        /// Comma-separated retention percentages.
        #[arg(long)]
        percents: Option<String>,
        #[arg(long)]
        seed: u64,
    },
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::UnknownMethod(_) | Error::InvalidHyperparameter(_)
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
    }
}

fn parse_list(text: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("not a number: {v:?}")))
        })
        .collect()
}

fn write_file(path: &Path, content: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, content).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn csv_line(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn sample_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("sample_{i:05}.csv"))
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth {
            classes,
            features,
            size,
            overlap,
            prevalence,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                n_classes: classes,
                n_features: features,
                size,
                overlap,
                prevalence: prevalence.as_deref().map(parse_list).transpose()?,
            };
            if let Some(p) = &spec.prevalence {
                Distribution::new(p.clone()).map_err(|e| Error::Config(e.to_string()))?;
            }
            let data = spec.generate(seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            data.save(&out)
        }
        Command::Split {
            data,
            train,
            validation,
            test,
            seed,
            out_dir,
        } => {
            let data = LabeledDataset::load(&data, None)?;
            let split = stratified_split(&data, train, validation, test, seed)?;
            create_dir(&out_dir)?;
            data.subset(&split.train).save(&out_dir.join("train.csv"))?;
            data.subset(&split.validation).save(&out_dir.join("validation.csv"))?;
            data.subset(&split.test).save(&out_dir.join("test.csv"))
        }
        Command::Sample {
            pool,
            samples,
            size,
            oq_percent,
            seed,
            out_dir,
        } => {
            let pool = LabeledDataset::load(&pool, None)?;
            let cfg = ProtocolConfig {
                n_samples: samples,
                sample_size: size,
                retain_percent: oq_percent,
                seed,
            };
            let drawn = draw_app(&pool, &cfg)?;
            create_dir(&out_dir)?;
            let mut index = String::from("sample,file,rejections,prevalence\n");
            for (i, s) in drawn.iter().enumerate() {
                let path = sample_file(&out_dir, i);
                pool.subset(&s.indices).save(&path)?;
                let _ = writeln!(
                    index,
                    "{i},{},{},\"{}\"",
                    path.file_name().and_then(|n| n.to_str()).unwrap_or_default(),
                    s.rejections,
                    csv_line(s.realized_prevalence.as_slice())
                );
            }
            write_file(&out_dir.join("samples.csv"), &index)
        }
        Command::Fit {
            method,
            data,
            params,
            cv_folds,
            seed,
            out,
        } => {
            let mut hyperparams = Hyperparams::default();
            for p in &params {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--param expects key=value, got {p:?}")))?;
                hyperparams.set(k.trim(), v.trim())?;
            }
            let spec = MethodSpec::new(method.parse()?, hyperparams)?;
            let train = LabeledDataset::load(&data, None)?;
            let fq = fit(&spec, &train, cv_folds, seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            fq.save(&out)
        }
        Command::Quantify { model, sample } => {
            let fq = FittedQuantifier::load(&model)?;
            let features = read_sample(&sample)?;
            let estimate = fq.quantify(features.view())?;
            println!("{}", csv_line(estimate.as_slice()));
            Ok(())
        }
        Command::Evaluate {
            model,
            samples,
            measure,
            out,
        } => {
            let measure: Measure = measure.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            let fq = FittedQuantifier::load(&model)?;
            let index = std::fs::read_to_string(samples.join("samples.csv"))
                .map_err(|e| Error::Io(format!("{}: {e}", samples.join("samples.csv").display())))?;
            let mut report = format!("sample,{}\n", measure.name().to_lowercase());
            let mut scores = Vec::new();
            for line in index.lines().skip(1) {
                let mut fields = line.splitn(4, ',');
                let (Some(id), Some(file), Some(_), Some(prev)) =
                    (fields.next(), fields.next(), fields.next(), fields.next())
                else {
                    return Err(Error::Data(format!("samples.csv: malformed line {line:?}")));
                };
                let truth = Distribution::new(parse_list(prev.trim_matches('"')).map_err(|e| Error::Data(e.to_string()))?)?;
                let features = read_sample(&samples.join(file))?;
                let estimate = fq.quantify(features.view())?;
                let score = measure.evaluate(&truth, &estimate)?;
                let _ = writeln!(report, "{id},{score}");
                scores.push(score);
            }
            let (mean, std) = summarize(&scores)?;
            if let Some(out) = out {
                write_file(&out, &report)?;
            }
            println!("{} mean {mean} std {std} over {} samples", measure.name(), scores.len());
            Ok(())
        }
        Command::Experiment { config, out_dir, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let dir = out_dir
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::Config("no output directory: set output_dir or pass --out-dir".into()))?;
            let report = experiment::run(&cfg)?;
            report.write(&dir)?;
            print!("{}", report.summary_text());
            Ok(())
        }
        Command::ProtocolStats {
            classes,
            draws,
            percents,
            seed,
        } => {
            let percents = match percents {
                Some(p) => parse_list(&p)?,
                None => OQ_PERCENTS.to_vec(),
            };
            let stats = protocol_stats(classes, draws, &percents, seed).map_err(|e| match e {
                Error::InvalidHyperparameter(m) => Error::Config(m),
                other => other,
            })?;
            let width = stats.iter().map(|s| s.protocol.len()).max().unwrap_or(0).max(8);
            println!("{:<width$}  mean xi1 (n={classes}, {draws} draws)", "protocol");
            for s in stats {
                println!("{:<width$}  {:.4}", s.protocol, s.mean_jaggedness);
            }
            Ok(())
        }
    }
}

fn read_sample(path: &Path) -> Result<Array2<f64>, Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_features(std::io::BufReader::new(file))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
