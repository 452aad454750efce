//! Data sets: CSV ingestion, standardization, splits and synthetic generators.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::Array;
use crate::error::{invalid, Error, Result};
use crate::eval::OutputScaling;
use crate::gp::{sample_gp, KernelSpec};

/// Inputs `[N, D]` and a single target column `[N, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Array,
    pub y: Array,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Targets are class labels `0..K`.
    pub classification: bool,
}

impl Dataset {
    pub fn new(
        x: Array,
        y: Array,
        feature_names: Vec<String>,
        target_name: String,
        classification: bool,
    ) -> Result<Self> {
        let d = Self {
            x,
            y,
            feature_names,
            target_name,
            classification,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        if self.x.rank() != 2 || self.y.shape() != [n, 1] || n == 0 {
            return invalid(format!(
                "dataset shapes {:?} and {:?}",
                self.x.shape(),
                self.y.shape()
            ));
        }
        if self.feature_names.len() != self.x.cols() {
            return invalid("one feature name per input column is required");
        }
        if self.x.has_nan() || self.y.has_nan() {
            return invalid("dataset contains missing values");
        }
        if self.classification {
            self.num_classes()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    /// Number of classes; labels must be integers covering `0..K`.
    pub fn num_classes(&self) -> Result<usize> {
        let mut seen = BTreeSet::new();
        for &v in self.y.data() {
            if v < 0.0 || v.fract() != 0.0 {
                return invalid(format!("class label {v} is not a non-negative integer"));
            }
            seen.insert(v as usize);
        }
        let k = seen.len();
        if seen.iter().next_back() != Some(&(k - 1)) {
            return invalid(format!("class labels {seen:?} are not contiguous from 0"));
        }
        Ok(k)
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let take = |a: &Array| -> Result<Array> {
            let c = a.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= a.rows() {
                    return invalid(format!("row {i} out of range"));
                }
                data.extend_from_slice(a.row(i));
            }
            Array::matrix(idx.len(), c, data)
        };
        Ok(Self {
            x: take(&self.x)?,
            y: take(&self.y)?,
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            classification: self.classification,
        })
    }
}

/// Reads a CSV with a header row; `target_column` names the target.
/// Blank or non-numeric fields are reported with their line and column.
pub fn ingest_csv(path: &Path, target_column: &str, classification: bool) -> Result<Dataset> {
    ingest_csv_reader(std::fs::File::open(path)?, target_column, classification)
}

pub fn ingest_csv_reader<R: Read>(
    input: R,
    target_column: &str,
    classification: bool,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let target = header
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::InvalidArgument(format!("no column named {target_column:?}")))?;
    let features: Vec<usize> = (0..header.len()).filter(|&c| c != target).collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                column: rec.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let parse = |c: usize| -> Result<f64> {
            let field = rec[c].trim();
            if field.is_empty() {
                return Err(Error::Parse {
                    line,
                    column: c + 1,
                    message: format!("missing value in column {:?}", header[c]),
                });
            }
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    line,
                    column: c + 1,
                    message: format!("non-numeric value {field:?} in column {:?}", header[c]),
                }),
            }
        };
        for &c in &features {
            xs.push(parse(c)?);
        }
        ys.push(parse(target)?);
    }
    let n = ys.len();
    if n == 0 {
        return invalid("CSV has no data rows");
    }
    Dataset::new(
        Array::matrix(n, features.len(), xs)?,
        Array::matrix(n, 1, ys)?,
        features.iter().map(|&c| header[c].clone()).collect(),
        header[target].clone(),
        classification,
    )
}

/// Writes features then the target column, with a header row.
pub fn write_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = data.feature_names.clone();
    header.push(data.target_name.clone());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.x.row(i).iter().map(|v| v.to_string()).collect();
        row.push(data.y.data()[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column shift and scale fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    /// Target shift and scale; identity for classification.
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let m = values.clone().sum::<f64>() / n;
    let s = (values.map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    (m, if s > 0.0 { s } else { 1.0 })
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            x_mean: vec![0.0; dim],
            x_std: vec![1.0; dim],
            y_mean: 0.0,
            y_std: 1.0,
        }
    }

    /// Population mean and standard deviation per column (constant columns
    /// keep scale 1); targets only for regression.
    pub fn fit(data: &Dataset) -> Self {
        let d = data.input_dim();
        let (x_mean, x_std) = (0..d)
            .map(|c| mean_std((0..data.len()).map(move |i| data.x.at(i, c))))
            .unzip();
        let (y_mean, y_std) = if data.classification {
            (0.0, 1.0)
        } else {
            mean_std(data.y.data().iter().copied())
        };
        Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn transform_x(&self, x: &Array) -> Result<Array> {
        if x.cols() != self.x_mean.len() {
            return invalid("input width differs from the fitted standardizer");
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.x_mean[k % c]) / self.x_std[k % c])
            .collect();
        Array::matrix(x.rows(), c, data)
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        let y = if data.classification {
            data.y.clone()
        } else {
            data.y.map(|v| (v - self.y_mean) / self.y_std)
        };
        Ok(Dataset {
            x: self.transform_x(&data.x)?,
            y,
            ..data.clone()
        })
    }

    /// Maps model-unit regression outputs back to data units.
    pub fn output_scaling(&self) -> OutputScaling {
        OutputScaling {
            shift: vec![self.y_mean],
            scale: vec![self.y_std],
        }
    }
}

/// Train, validation and test fractions; the test set takes the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.9,
            validation: 0.0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train) || !ok(self.validation) || self.train + self.validation > 1.0 + 1e-12 {
            return invalid(format!(
                "split fractions {} + {} must lie in [0, 1] and sum to at most 1",
                self.train, self.validation
            ));
        }
        if self.train == 0.0 {
            return invalid("training fraction must be > 0");
        }
        Ok(())
    }
}

/// Disjoint, exhaustive index sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random split of `0..n` by rounded fractions.
pub fn split_indices(n: usize, cfg: &SplitConfig, seed: u64) -> Result<Split> {
    cfg.validate()?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((cfg.train * n as f64).round() as usize).clamp(1.min(n), n);
    let n_val = ((cfg.validation * n as f64).round() as usize).min(n - n_train);
    Ok(Split {
        train: idx[..n_train].to_vec(),
        validation: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

pub const SYNTHETIC_1D_POINTS: usize = 64;
pub const SYNTHETIC_1D_RANGE: f64 = 10.0;
pub const SYNTHETIC_1D_NOISE: f64 = 0.1;

/// The input gap of [`make_synthetic_1d`]: the middle third of the range.
pub fn synthetic_1d_gap() -> (f64, f64) {
    (-SYNTHETIC_1D_RANGE / 3.0, SYNTHETIC_1D_RANGE / 3.0)
}

/// 64 inputs drawn uniformly on `[−10, 10]`, then moved off the middle
/// third by squeezing each half affinely onto its outer two thirds; targets
/// are one draw of `GP(0, RBF(α=1, l=0.6))` at the inputs plus `N(0, 0.1)`
/// noise.
pub fn make_synthetic_1d(seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, (_, g)) = (SYNTHETIC_1D_RANGE, synthetic_1d_gap());
    let xs: Vec<f64> = (0..SYNTHETIC_1D_POINTS)
        .map(|_| {
            let u: f64 = rng.gen_range(-r..=r);
            let squeezed = g + u.abs() * (r - g) / r;
            if u < 0.0 {
                -squeezed
            } else {
                squeezed
            }
        })
        .collect();
    let x = Array::matrix(xs.len(), 1, xs)?;
    let f = sample_gp(&KernelSpec::rbf(1.0, 0.6), &x, 1, &mut rng)?;
    let noise = SYNTHETIC_1D_NOISE.sqrt();
    let ys: Vec<f64> = f
        .values
        .data()
        .iter()
        .map(|v| v + noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Dataset::new(
        x,
        Array::matrix(ys.len(), 1, ys)?,
        vec!["x".into()],
        "y".into(),
        false,
    )
}

/// Two interleaved half-moons with Gaussian jitter, classes balanced to
/// within one point. A stand-in for the two-class "banana" benchmark.
pub fn make_banana_2d(seed: u64, n: usize) -> Result<Dataset> {
    if n < 10 {
        return invalid(format!("banana data needs n >= 10, got {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<(f64, f64, f64)> = (0..n)
        .map(|i| {
            let label = (i % 2) as f64;
            let t = rng.gen_range(0.0..std::f64::consts::PI);
            let (x, y) = if label == 0.0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let jx: f64 = rng.sample(StandardNormal);
            let jy: f64 = rng.sample(StandardNormal);
            (x + 0.1 * jx, y + 0.1 * jy, label)
        })
        .collect();
    rows.shuffle(&mut rng);
    Dataset::new(
        Array::matrix(n, 2, rows.iter().flat_map(|r| [r.0, r.1]).collect())?,
        Array::matrix(n, 1, rows.iter().map(|r| r.2).collect())?,
        vec!["x1".into(), "x2".into()],
        "label".into(),
        true,
    )
}
