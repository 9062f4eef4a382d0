//! Labeled datasets and their CSV representation.
//!
//! A dataset file has the header `f0,…,f{d-1},label`, one item per line,
//! features as decimal floats and the label as a 0-based class index.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::simplex::Distribution;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Data(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(LabeledDataset {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Indices of the items of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            idx[y].push(i);
        }
        idx
    }

    pub fn prevalence(&self) -> Result<Distribution> {
        Distribution::from_weights(self.class_counts().into_iter().map(|c| c as f64).collect())
    }

    /// Fails with `MissingClass` for the first absent class.
    pub fn require_all_classes(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(c) => Err(Error::MissingClass(c)),
            None => Ok(()),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header: Vec<String> = (0..self.n_features()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(csv_err)?;
        for (row, &y) in self.features.rows().into_iter().zip(&self.labels) {
            let mut record: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            record.push(y.to_string());
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a dataset; `n_classes` defaults to one more than the largest label.
    pub fn read_csv<R: Read>(reader: R, n_classes: Option<usize>) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        let d = header.len().saturating_sub(1);
        if d == 0 || &header[d] != "label" {
            return Err(Error::Data(
                "header must be f0,…,f{d-1},label with at least one feature".into(),
            ));
        }
        for (j, name) in header.iter().take(d).enumerate() {
            if name != format!("f{j}") {
                return Err(Error::Data(format!(
                    "header column {} is {name:?}, expected \"f{j}\"",
                    j + 1
                )));
            }
        }
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record.map_err(csv_err)?;
            let line = line + 2;
            if record.len() != d + 1 {
                return Err(Error::Data(format!(
                    "line {line}: expected {} fields, found {}",
                    d + 1,
                    record.len()
                )));
            }
            for (j, field) in record.iter().take(d).enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Data(format!("line {line}: f{j} is not a number: {field:?}"))
                })?;
                values.push(v);
            }
            let y: usize = record[d].trim().parse().map_err(|_| {
                Error::Data(format!(
                    "line {line}: label is not a class index: {:?}",
                    &record[d]
                ))
            })?;
            labels.push(y);
        }
        let n = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let features = Array2::from_shape_vec((labels.len(), d), values)
            .map_err(|e| Error::Data(e.to_string()))?;
        LabeledDataset::new(features, labels, n)
    }

    pub fn load(path: &Path, n_classes: Option<usize>) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        LabeledDataset::read_csv(std::io::BufReader::new(file), n_classes)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

/// Reads a feature-only matrix: the header `f0,…,f{d-1}` with an optional
/// trailing `label` column, which is ignored.
pub fn read_features<R: Read>(reader: R) -> Result<Array2<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = r.headers().map_err(csv_err)?.clone();
    let d = if header.iter().last() == Some("label") {
        header.len() - 1
    } else {
        header.len()
    };
    let mut values = Vec::new();
    let mut rows = 0;
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(csv_err)?;
        for (j, field) in record.iter().take(d).enumerate() {
            values.push(field.trim().parse::<f64>().map_err(|_| {
                Error::Data(format!("line {}: f{j} is not a number: {field:?}", line + 2))
            })?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, d), values).map_err(|e| Error::Data(e.to_string()))
}
