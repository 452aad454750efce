//! Likelihoods, posterior predictive summaries, MAP training and metrics.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bnn::{self, init_params, FlatParams, NetworkSpec};
use crate::diff::{Array, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::gp::FunctionBatch;
use crate::optim::Adam;
use crate::priors::PriorParams;

/// Observation model for network outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Likelihood {
    /// `y ~ N(f(x), σ²_ε)` independently per output.
    Gaussian { noise_variance: f64 },
    /// `y ~ Categorical(softmax(f(x)))`; targets are class indices.
    Categorical,
}

impl Likelihood {
    pub fn validate(&self) -> Result<()> {
        if let Self::Gaussian { noise_variance } = self {
            if !(*noise_variance > 0.0 && noise_variance.is_finite()) {
                return invalid(format!("noise variance must be > 0, got {noise_variance}"));
            }
        }
        Ok(())
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Self::Categorical)
    }

    fn check_targets(&self, outputs: usize, rows: usize, y: &Array) -> Result<()> {
        let want = match self {
            Self::Gaussian { .. } => [rows, outputs],
            Self::Categorical => [rows, 1],
        };
        if y.shape() != want {
            return invalid(format!(
                "targets have shape {:?}, expected {want:?}",
                y.shape()
            ));
        }
        if self.is_classification() {
            for &c in y.data() {
                if c < 0.0 || c.fract() != 0.0 || c as usize >= outputs {
                    return invalid(format!("class label {c} outside 0..{outputs}"));
                }
            }
        }
        Ok(())
    }

    /// `Σ_rows log p(y | f)` recorded on `tape`; `f` is `[B, C]`.
    pub fn log_likelihood_on_tape(&self, tape: &mut Tape, f: Var, y: &Array) -> Result<Var> {
        self.validate()?;
        let (rows, outputs) = match tape.shape(f) {
            [r, c] => (*r, *c),
            s => return invalid(format!("outputs must be a matrix, got {s:?}")),
        };
        self.check_targets(outputs, rows, y)?;
        match self {
            Self::Gaussian { noise_variance } => {
                let yv = tape.constant(y.clone());
                let r = tape.sub(yv, f)?;
                let sq = tape.square(r)?;
                let s = tape.sum(sq)?;
                let s = tape.scale(s, -0.5 / noise_variance)?;
                let n = (rows * outputs) as f64;
                tape.offset(s, -0.5 * n * (2.0 * PI * noise_variance).ln())
            }
            Self::Categorical => {
                let fv = tape.value(f);
                let mut maxes = Vec::with_capacity(rows);
                for i in 0..rows {
                    maxes.push(fv.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max));
                }
                let mut onehot = vec![0.0; rows * outputs];
                for (i, &c) in y.data().iter().enumerate() {
                    onehot[i * outputs + c as usize] = 1.0;
                }
                let m = tape.constant(Array::matrix(rows, 1, maxes)?);
                let shifted = tape.sub(f, m)?;
                let e = tape.exp(shifted)?;
                let z = tape.sum_last(e)?;
                let lz = tape.log(z)?;
                let logp = tape.sub(shifted, lz)?;
                let oh = tape.constant(Array::matrix(rows, outputs, onehot)?);
                let picked = tape.mul(logp, oh)?;
                tape.sum(picked)
            }
        }
    }

    /// Per-row `log p(y_i | f_i)`.
    pub fn log_likelihood_rows(&self, f: &Array, y: &Array) -> Result<Vec<f64>> {
        self.validate()?;
        if f.rank() != 2 {
            return invalid(format!("outputs must be a matrix, got {:?}", f.shape()));
        }
        let (rows, outputs) = (f.rows(), f.cols());
        self.check_targets(outputs, rows, y)?;
        Ok(match self {
            Self::Gaussian { noise_variance } => (0..rows)
                .map(|i| {
                    f.row(i)
                        .iter()
                        .zip(y.row(i))
                        .map(|(f, y)| gaussian_log_pdf(*y, *f, *noise_variance))
                        .sum()
                })
                .collect(),
            Self::Categorical => (0..rows)
                .map(|i| log_softmax(f.row(i))[y.data()[i] as usize])
                .collect(),
        })
    }
}

fn gaussian_log_pdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * (y - mean).powi(2) / var
}

fn log_softmax(f: &[f64]) -> Vec<f64> {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    f.iter().map(|v| v - lz).collect()
}

fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (xs.iter().map(|x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

/// Affine map from model outputs back to data units: `y = shift + scale·f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Posterior predictive at a set of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSummary {
    /// Regression: mixture mean `[N, C]`. Classification: averaged class
    /// probabilities `[N, C]`.
    pub mean: Array,
    /// Regression: mixture variance including observation noise `[N, C]`.
    /// Classification: per-class variance of the probabilities across samples.
    pub variance: Array,
    /// Variance of the network output across samples (no noise) `[N, C]`.
    pub function_variance: Array,
    /// Test metrics, when targets were supplied.
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean negative log predictive density per test point, in nats.
    pub nll: f64,
    /// Standard error of `nll` across test points.
    pub nll_std_error: f64,
    pub rmse: Option<f64>,
    pub accuracy: Option<f64>,
}

impl PredictiveSummary {
    /// Summed predictive variance per point, as used for acquisition.
    pub fn total_variance(&self) -> Vec<f64> {
        (0..self.variance.rows())
            .map(|i| self.variance.row(i).iter().sum())
            .collect()
    }
}

/// Aggregates per-sample predictions into the posterior predictive.
///
/// Regression NLL is the negative log of the sample-averaged density
/// (log-mean-exp over samples), and mean/variance are the mixture's
/// moments. Classification averages the softmax probabilities. With
/// `scaling`, outputs and noise are mapped to data units before anything
/// is compared with `y`.
pub fn predictive_posterior(
    samples: &[FlatParams],
    spec: &NetworkSpec,
    x: &Array,
    lik: &Likelihood,
    y: Option<&Array>,
    scaling: Option<&OutputScaling>,
) -> Result<PredictiveSummary> {
    lik.validate()?;
    if samples.is_empty() {
        return invalid("predictive posterior needs at least one sample");
    }
    let out = bnn::forward_many(spec, samples, x)?;
    let (s, n, c) = (out.shape()[0], out.shape()[1], out.shape()[2]);
    if let Some(sc) = scaling {
        if lik.is_classification() || sc.shift.len() != c || sc.scale.len() != c {
            return invalid(
                "output scaling applies to regression outputs only, one entry per output",
            );
        }
    }
    let at = |si: usize, i: usize, k: usize| out.data()[(si * n + i) * c + k];
    let mut mean = vec![0.0; n * c];
    let mut var = vec![0.0; n * c];
    let mut fvar = vec![0.0; n * c];
    let mut point_ll = Vec::new();
    match lik {
        Likelihood::Gaussian { noise_variance } => {
            let (shift, scale) = match scaling {
                Some(sc) => (sc.shift.clone(), sc.scale.clone()),
                None => (vec![0.0; c], vec![1.0; c]),
            };
            let f = |si, i, k: usize| shift[k] + scale[k] * at(si, i, k);
            for i in 0..n {
                for k in 0..c {
                    let m = (0..s).map(|si| f(si, i, k)).sum::<f64>() / s as f64;
                    let v = (0..s).map(|si| (f(si, i, k) - m).powi(2)).sum::<f64>() / s as f64;
                    mean[i * c + k] = m;
                    fvar[i * c + k] = v;
                    var[i * c + k] = v + noise_variance * scale[k] * scale[k];
                }
            }
            if let Some(y) = y {
                lik.check_targets(c, n, y)?;
                for i in 0..n {
                    let lls: Vec<f64> = (0..s)
                        .map(|si| {
                            (0..c)
                                .map(|k| {
                                    let nv = noise_variance * scale[k] * scale[k];
                                    gaussian_log_pdf(y.at(i, k), f(si, i, k), nv)
                                })
                                .sum()
                        })
                        .collect();
                    point_ll.push(log_mean_exp(&lls));
                }
            }
        }
        Likelihood::Categorical => {
            let mut probs = vec![0.0; s * n * c];
            for si in 0..s {
                for i in 0..n {
                    let row: Vec<f64> = (0..c).map(|k| at(si, i, k)).collect();
                    for (k, lp) in log_softmax(&row).into_iter().enumerate() {
                        probs[(si * n + i) * c + k] = lp.exp();
                    }
                }
            }
            for i in 0..n {
                for k in 0..c {
                    let p = |si: usize| probs[(si * n + i) * c + k];
                    let m = (0..s).map(p).sum::<f64>() / s as f64;
                    let v = (0..s).map(|si| (p(si) - m).powi(2)).sum::<f64>() / s as f64;
                    mean[i * c + k] = m;
                    var[i * c + k] = v;
                    let fm = (0..s).map(|si| at(si, i, k)).sum::<f64>() / s as f64;
                    fvar[i * c + k] =
                        (0..s).map(|si| (at(si, i, k) - fm).powi(2)).sum::<f64>() / s as f64;
                }
            }
            if let Some(y) = y {
                lik.check_targets(c, n, y)?;
                for i in 0..n {
                    point_ll.push(mean[i * c + y.data()[i] as usize].ln());
                }
            }
        }
    }
    let mean = Array::matrix(n, c, mean)?;
    let metrics = match y {
        None => None,
        Some(y) => {
            let nll_points: Vec<f64> = point_ll.iter().map(|v| -v).collect();
            let nll = nll_points.iter().sum::<f64>() / n as f64;
            let se = if n > 1 {
                let v = nll_points.iter().map(|p| (p - nll).powi(2)).sum::<f64>() / (n - 1) as f64;
                (v / n as f64).sqrt()
            } else {
                0.0
            };
            Some(match lik {
                Likelihood::Gaussian { .. } => Metrics {
                    nll,
                    nll_std_error: se,
                    rmse: Some(rmse(mean.data(), y.data())?),
                    accuracy: None,
                },
                Likelihood::Categorical => Metrics {
                    nll,
                    nll_std_error: se,
                    rmse: None,
                    accuracy: Some(accuracy(&mean, y.data())?),
                },
            })
        }
    };
    Ok(PredictiveSummary {
        mean,
        variance: Array::matrix(n, c, var)?,
        function_variance: Array::matrix(n, c, fvar)?,
        metrics,
    })
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return invalid(format!(
            "metric inputs must be non-empty and equal length, got {a} and {b}"
        ));
    }
    Ok(())
}

/// Mean Gaussian negative log density of `y` under `N(mean, var)`.
pub fn gaussian_nll(mean: &[f64], var: &[f64], y: &[f64]) -> Result<f64> {
    same_len(mean.len(), y.len())?;
    same_len(var.len(), y.len())?;
    if var.iter().any(|v| !(*v > 0.0)) {
        return invalid("variances must be > 0");
    }
    Ok(-mean
        .iter()
        .zip(var)
        .zip(y)
        .map(|((m, v), y)| gaussian_log_pdf(*y, *m, *v))
        .sum::<f64>()
        / y.len() as f64)
}

pub fn rmse(pred: &[f64], y: &[f64]) -> Result<f64> {
    same_len(pred.len(), y.len())?;
    Ok((pred
        .iter()
        .zip(y)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / y.len() as f64)
        .sqrt())
}

/// Mean `−log p[label]` over rows of class probabilities.
pub fn categorical_nll(probs: &Array, labels: &[f64]) -> Result<f64> {
    same_len(probs.rows(), labels.len())?;
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let p = *probs
            .row(i)
            .get(l as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} out of range")))?;
        total -= p.ln();
    }
    Ok(total / labels.len() as f64)
}

/// Share of rows whose most probable class equals the label (ties go to
/// the lower class index).
pub fn accuracy(probs: &Array, labels: &[f64]) -> Result<f64> {
    same_len(probs.rows(), labels.len())?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| {
            let row = probs.row(*i);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best as f64 == l
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Sum over rows of `a` of `Σ_j k(a_i, b_j)`, optionally skipping `i == j`,
/// with `k(x, y) = exp(−‖x − y‖²/l²)`. Computed in row blocks.
fn kernel_sum(a: &Array, b: &Array, l: f64, skip_diagonal: bool) -> Result<f64> {
    const BLOCK: usize = 256;
    let norms = |x: &Array| -> Vec<f64> {
        (0..x.rows())
            .map(|i| x.row(i).iter().map(|v| v * v).sum())
            .collect()
    };
    let (na, nb) = (norms(a), norms(b));
    let bt = b.transpose();
    let inv = 1.0 / (l * l);
    let mut total = 0.0;
    for start in (0..a.rows()).step_by(BLOCK) {
        let end = (start + BLOCK).min(a.rows());
        let block = Array::matrix(
            end - start,
            a.cols(),
            a.data()[start * a.cols()..end * a.cols()].to_vec(),
        )?;
        let dots = block.matmul(&bt)?;
        for i in start..end {
            let row = dots.row(i - start);
            for (j, d) in row.iter().enumerate() {
                if skip_diagonal && i == j {
                    continue;
                }
                let sq = (na[i] + nb[j] - 2.0 * d).max(0.0);
                total += (-sq * inv).exp();
            }
        }
    }
    Ok(total)
}

/// Unbiased estimate of MMD² between the row distributions of `a` and `b`
/// with kernel `exp(−‖x − y‖²/l²)`.
pub fn mmd_squared_values(a: &Array, b: &Array, lengthscale: f64) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return invalid(format!("MMD batches {:?} and {:?}", a.shape(), b.shape()));
    }
    let (n, m) = (a.rows(), b.rows());
    if n < 2 || m < 2 {
        return invalid("MMD needs at least two samples per batch");
    }
    if !(lengthscale > 0.0) {
        return invalid(format!("MMD lengthscale must be > 0, got {lengthscale}"));
    }
    let kaa = kernel_sum(a, a, lengthscale, true)? / (n * (n - 1)) as f64;
    let kbb = kernel_sum(b, b, lengthscale, true)? / (m * (m - 1)) as f64;
    let kab = kernel_sum(a, b, lengthscale, false)? / (n * m) as f64;
    Ok(kaa + kbb - 2.0 * kab)
}

/// [`mmd_squared_values`] for two function batches on the same points.
pub fn mmd_squared(a: &FunctionBatch, b: &FunctionBatch, lengthscale: f64) -> Result<f64> {
    if a.measurement_points != b.measurement_points {
        return invalid("MMD batches are evaluated at different measurement points");
    }
    mmd_squared_values(&a.values, &b.values, lengthscale)
}

/// The `1 − level` quantile of MMD² under random relabelling of the pooled
/// rows: values above it reject equality of the two distributions.
pub fn mmd_permutation_threshold<R: Rng + ?Sized>(
    a: &Array,
    b: &Array,
    lengthscale: f64,
    permutations: usize,
    level: f64,
    rng: &mut R,
) -> Result<f64> {
    mmd_squared_values(a, b, lengthscale)?;
    if permutations == 0 || !(0.0 < level && level < 1.0) {
        return invalid("permutation test needs permutations >= 1 and level in (0, 1)");
    }
    let (n, m) = (a.rows(), b.rows());
    let total = n + m;
    let mut pooled = a.data().to_vec();
    pooled.extend_from_slice(b.data());
    let pooled = Array::matrix(total, a.cols(), pooled)?;
    let gram = {
        let g = pooled.matmul(&pooled.transpose())?;
        let diag: Vec<f64> = (0..total).map(|i| g.at(i, i)).collect();
        let inv = 1.0 / (lengthscale * lengthscale);
        let mut k = g.into_data();
        for i in 0..total {
            for j in 0..total {
                let sq = (diag[i] + diag[j] - 2.0 * k[i * total + j]).max(0.0);
                k[i * total + j] = (-sq * inv).exp();
            }
        }
        k
    };
    let mut idx: Vec<usize> = (0..total).collect();
    let mut stats = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        idx.shuffle(rng);
        let (x, y) = idx.split_at(n);
        let within = |s: &[usize]| {
            let mut t = 0.0;
            for &i in s {
                for &j in s {
                    if i != j {
                        t += gram[i * total + j];
                    }
                }
            }
            t / (s.len() * (s.len() - 1)) as f64
        };
        let mut cross = 0.0;
        for &i in x {
            for &j in y {
                cross += gram[i * total + j];
            }
        }
        stats.push(within(x) + within(y) - 2.0 * cross / (n * m) as f64);
    }
    stats.sort_by(f64::total_cmp);
    let k = (((1.0 - level) * permutations as f64).ceil() as usize).clamp(1, permutations) - 1;
    Ok(stats[k])
}

/// Shannon entropy (nats) of each row of class probabilities.
pub fn predictive_entropy(probs: &Array) -> Vec<f64> {
    (0..probs.rows())
        .map(|i| {
            -probs
                .row(i)
                .iter()
                .filter(|p| **p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        })
        .collect()
}

/// Sorted `(entropy, fraction of points with entropy ≤ it)` pairs.
pub fn predictive_entropy_ecdf(probs: &Array) -> Vec<(f64, f64)> {
    let mut h = predictive_entropy(probs);
    h.sort_by(f64::total_cmp);
    let n = h.len() as f64;
    h.iter()
        .enumerate()
        .map(|(i, &v)| (v, (i + 1) as f64 / n))
        .collect()
}

/// Value of an ECDF (as returned by [`predictive_entropy_ecdf`]) at `x`.
pub fn ecdf_at(ecdf: &[(f64, f64)], x: f64) -> f64 {
    ecdf.iter()
        .take_while(|(v, _)| *v <= x)
        .last()
        .map_or(0.0, |(_, f)| *f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Minibatch size; the full data set when it is at least `N`.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Divergence limit on the MAP objective.
pub const MAP_DIVERGENCE: f64 = 1e10;

#[derive(Clone, Debug)]
pub struct MapResult {
    pub params: FlatParams,
    /// Full-data objective before training and after each epoch.
    pub objective_trace: Vec<f64>,
    /// Validation NLL of the returned parameters, when validated.
    pub validation_nll: Option<f64>,
}

/// Per-parameter prior variances for the Gaussian families.
fn gaussian_prior_variances(spec: &NetworkSpec, prior: &PriorParams) -> Result<Vec<f64>> {
    prior.validate(spec)?;
    let sig = match prior {
        PriorParams::FixedGaussian { sigma } => vec![(*sigma, *sigma); spec.num_layers()],
        PriorParams::Gaussian(g) => g.layers.iter().map(|l| l.sigmas()).collect(),
        _ => return invalid("MAP training supports Gaussian priors only"),
    };
    let mut out = vec![0.0; spec.param_count()];
    for (l, (sw, sb)) in spec.layers().iter().zip(sig) {
        out[l.weights()].iter_mut().for_each(|v| *v = sw * sw);
        out[l.biases()].iter_mut().for_each(|v| *v = sb * sb);
    }
    Ok(out)
}

/// `½ Σ w_i²/σ_i²`; an infinite `σ_i` contributes nothing.
pub fn l2_regularizer(w: &[f64], prior_variances: &[f64]) -> f64 {
    0.5 * w
        .iter()
        .zip(prior_variances)
        .filter(|(_, v)| v.is_finite())
        .map(|(w, v)| w * w / v)
        .sum::<f64>()
}

/// `−(N/B)·Σ_batch log p(y|x,w) + ½ Σ w²/σ²` and its gradient.
fn map_objective(
    spec: &NetworkSpec,
    lik: &Likelihood,
    w: &[f64],
    prior_var: &[f64],
    x: &Array,
    y: &Array,
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let wv = tape.param("w", Array::vector(w.to_vec()))?;
    let xv = tape.constant(x.clone());
    let out = bnn::forward_on_tape(&mut tape, spec, wv, xv)?;
    let f = tape.reshape(out, &[x.rows(), spec.output_dim()])?;
    let ll = lik.log_likelihood_on_tape(&mut tape, f, y)?;
    let nll = tape.scale(ll, -scale)?;
    let g = tape.grad(nll, &[wv])?[0];
    let mut grad = tape.value(g).data().to_vec();
    for ((gi, wi), v) in grad.iter_mut().zip(w).zip(prior_var) {
        if v.is_finite() {
            *gi += wi / v;
        }
    }
    Ok((tape.scalar(nll) + l2_regularizer(w, prior_var), grad))
}

fn rows_of(a: &Array, idx: &[usize]) -> Result<Array> {
    let c = a.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(a.row(i));
    }
    Array::matrix(idx.len(), c, data)
}

/// Maximum a posteriori training under a Gaussian prior with Adam.
///
/// Minimizes `−log p(D|w) + ½ Σ w_i²/σ_i²` over shuffled minibatches.
/// Returns the parameters with the best validation NLL when `validation`
/// is given, otherwise those with the best full-data objective (the
/// starting point included, so the result never gets worse than it).
pub fn map_train(
    spec: &NetworkSpec,
    prior: &PriorParams,
    lik: &Likelihood,
    x: &Array,
    y: &Array,
    cfg: &MapConfig,
    validation: Option<(&Array, &Array)>,
) -> Result<MapResult> {
    lik.validate()?;
    let prior_var = gaussian_prior_variances(spec, prior)?;
    let n = x.rows();
    if n == 0 || y.rows() != n {
        return invalid("MAP training needs matching, non-empty inputs and targets");
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return invalid("MAP config needs epochs, batch_size >= 1 and lr > 0");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = init_params(spec, &mut rng).0;
    let mut opt = Adam::new(cfg.lr, w.len());
    let full = |w: &[f64]| map_objective(spec, lik, w, &prior_var, x, y, 1.0).map(|r| r.0);
    let val_nll = |w: &[f64]| -> Result<Option<f64>> {
        match validation {
            None => Ok(None),
            Some((vx, vy)) => {
                let f = bnn::forward(spec, &FlatParams(w.to_vec()), vx)?;
                let ll = lik.log_likelihood_rows(&f, vy)?;
                Ok(Some(-ll.iter().sum::<f64>() / ll.len() as f64))
            }
        }
    };
    let first = full(&w)?;
    let mut trace = vec![first];
    let mut best = (w.clone(), first, val_nll(&w)?);
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        if bs < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(bs) {
            let (bx, by) = if bs == n {
                (x.clone(), y.clone())
            } else {
                (rows_of(x, chunk)?, rows_of(y, chunk)?)
            };
            let scale = n as f64 / chunk.len() as f64;
            let (loss, g) = map_objective(spec, lik, &w, &prior_var, &bx, &by, scale)?;
            if !loss.is_finite() || loss > MAP_DIVERGENCE {
                return Err(Error::Divergence(format!("MAP objective {loss}")));
            }
            opt.step(&mut w, &g)?;
        }
        let obj = full(&w)?;
        if !obj.is_finite() || obj > MAP_DIVERGENCE {
            return Err(Error::Divergence(format!("MAP objective {obj}")));
        }
        trace.push(obj);
        let v = val_nll(&w)?;
        let better = match (v, best.2) {
            (Some(v), Some(b)) => v < b,
            _ => obj < best.1,
        };
        if better {
            best = (w.clone(), obj, v);
        }
    }
    Ok(MapResult {
        params: FlatParams(best.0),
        objective_trace: trace,
        validation_nll: best.2,
    })
}

/// The `n` pool entries with the largest variance; ties go to the lower
/// position. `variances[i]` belongs to `pool_indices[i]`.
pub fn acquire_by_variance(
    variances: &[f64],
    pool_indices: &[usize],
    n: usize,
) -> Result<Vec<usize>> {
    if variances.len() != pool_indices.len() {
        return invalid(format!(
            "{} variances for {} pool entries",
            variances.len(),
            pool_indices.len()
        ));
    }
    if n > pool_indices.len() {
        return invalid(format!(
            "cannot acquire {n} points from a pool of {}",
            pool_indices.len()
        ));
    }
    let mut order: Vec<usize> = (0..variances.len()).collect();
    order.sort_by(|&i, &j| variances[j].total_cmp(&variances[i]).then(i.cmp(&j)));
    Ok(order[..n].iter().map(|&i| pool_indices[i]).collect())
}
