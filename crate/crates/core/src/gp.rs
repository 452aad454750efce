//! Target functional priors: RBF kernels, jittered Cholesky, and exact or
//! hierarchical GP sampling at a set of measurement points.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::Array;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Rbf,
    ArdRbf,
}

/// `κ(x, x') = α² exp(−Σ_d (x_d − x'_d)² / l_d²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub amplitude: f64,
    /// One entry for [`KernelFamily::Rbf`], one per input dimension for ARD.
    pub lengthscales: Vec<f64>,
}

impl KernelSpec {
    pub fn rbf(amplitude: f64, lengthscale: f64) -> Self {
        Self {
            family: KernelFamily::Rbf,
            amplitude,
            lengthscales: vec![lengthscale],
        }
    }

    pub fn ard(amplitude: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            family: KernelFamily::ArdRbf,
            amplitude,
            lengthscales,
        }
    }

    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        if !(self.amplitude > 0.0) {
            return invalid(format!(
                "kernel amplitude must be > 0, got {}",
                self.amplitude
            ));
        }
        if self.lengthscales.is_empty() || self.lengthscales.iter().any(|&l| !(l > 0.0)) {
            return invalid(format!(
                "kernel lengthscales must be > 0, got {:?}",
                self.lengthscales
            ));
        }
        match (self.family, dim) {
            (KernelFamily::Rbf, _) if self.lengthscales.len() != 1 => {
                invalid("RBF kernel takes exactly one lengthscale")
            }
            (KernelFamily::ArdRbf, Some(d)) if self.lengthscales.len() != d => invalid(format!(
                "ARD kernel has {} lengthscales for {d} input dimensions",
                self.lengthscales.len()
            )),
            _ => Ok(()),
        }
    }

    fn lengthscale(&self, d: usize) -> f64 {
        match self.family {
            KernelFamily::Rbf => self.lengthscales[0],
            KernelFamily::ArdRbf => self.lengthscales[d],
        }
    }
}

/// Location/scale of a log-normal: `exp(m + s·z)`, `z ~ N(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormal {
    pub m: f64,
    pub s: f64,
}

impl LogNormal {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.m + self.s * z).exp()
    }
}

/// Log-normal hyper-priors on the lengthscale and on the variance `α²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPriorSpec {
    pub lengthscale: LogNormal,
    pub variance: LogNormal,
}

impl HyperPriorSpec {
    /// Lengthscale prior centred on `√(2D)` for `D` input dimensions.
    pub fn for_input_dim(dim: usize, variance: LogNormal) -> Self {
        Self {
            lengthscale: LogNormal {
                m: (2.0 * dim as f64).sqrt().ln(),
                s: 1.0,
            },
            variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale.s > 0.0) || !(self.variance.s > 0.0) {
            return invalid("log-normal scales must be > 0");
        }
        Ok(())
    }
}

/// A target prior over functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GpTarget {
    Fixed(KernelSpec),
    Hierarchical(HyperPriorSpec),
}

impl GpTarget {
    pub fn sample<R: Rng + ?Sized>(
        &self,
        points: &Array,
        count: usize,
        rng: &mut R,
    ) -> Result<FunctionBatch> {
        match self {
            GpTarget::Fixed(k) => sample_gp(k, points, count, rng),
            GpTarget::Hierarchical(h) => sample_hierarchical_gp(h, points, count, rng),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            GpTarget::Fixed(k) => k.validate(Some(dim)),
            GpTarget::Hierarchical(h) => h.validate(),
        }
    }
}

/// `N_s` sampled functions evaluated at `M` measurement points.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionBatch {
    /// `N_s × M`.
    pub values: Array,
    /// `M × D`.
    pub measurement_points: Array,
}

impl FunctionBatch {
    pub fn count(&self) -> usize {
        self.values.rows()
    }

    pub fn points(&self) -> usize {
        self.values.cols()
    }
}

pub fn kernel_matrix(spec: &KernelSpec, x: &Array, x2: &Array) -> Result<Array> {
    if x.rank() != 2 || x2.rank() != 2 || x.cols() != x2.cols() {
        return invalid(format!(
            "kernel inputs must be matrices with equal columns, got {:?} and {:?}",
            x.shape(),
            x2.shape()
        ));
    }
    let d = x.cols();
    spec.validate(Some(d))?;
    let inv_l2: Vec<f64> = (0..d).map(|k| 1.0 / spec.lengthscale(k).powi(2)).collect();
    let a2 = spec.amplitude * spec.amplitude;
    let (m, n) = (x.rows(), x2.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let xi = x.row(i);
        for j in 0..n {
            let xj = x2.row(j);
            let r2: f64 = (0..d).map(|k| (xi[k] - xj[k]).powi(2) * inv_l2[k]).sum();
            out[i * n + j] = a2 * (-r2).exp();
        }
    }
    Array::matrix(m, n, out)
}

fn cholesky_in_place(k: &Array, jitter: f64) -> Option<Array> {
    let n = k.rows();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = k.at(j, j) + jitter;
        for p in 0..j {
            d -= l[j * n + p] * l[j * n + p];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = k.at(i, j);
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(Array::from_parts(vec![n, n], l))
}

/// Number of jitter escalations after the initial jitter-free attempt.
pub const CHOLESKY_RETRIES: usize = 5;

/// Lower Cholesky factor of `K + jitter·I` together with the jitter used.
///
/// The first attempt uses no jitter; retries start at `1e-8·mean(diag K)`
/// and grow ×10 each time.
pub fn cholesky_with_jitter(k: &Array) -> Result<(Array, f64)> {
    if k.rank() != 2 || k.rows() != k.cols() {
        return invalid(format!(
            "cholesky needs a square matrix, got {:?}",
            k.shape()
        ));
    }
    let n = k.rows();
    if let Some(l) = cholesky_in_place(k, 0.0) {
        return Ok((l, 0.0));
    }
    let mean_diag = (0..n).map(|i| k.at(i, i)).sum::<f64>() / n.max(1) as f64;
    let mut jitter = 1e-8 * mean_diag.abs().max(f64::MIN_POSITIVE);
    for attempt in 0..CHOLESKY_RETRIES {
        if let Some(l) = cholesky_in_place(k, jitter) {
            return Ok((l, jitter));
        }
        if attempt + 1 < CHOLESKY_RETRIES {
            jitter *= 10.0;
        }
    }
    Err(Error::Cholesky { jitter })
}

/// Rows `L z` for `z ~ N(0, I)`, i.e. `Z Lᵀ`.
fn correlate<R: Rng + ?Sized>(l: &Array, count: usize, rng: &mut R) -> Array {
    let m = l.rows();
    let z: Vec<f64> = (0..count * m).map(|_| rng.sample(StandardNormal)).collect();
    let z = Array::from_parts(vec![count, m], z);
    z.matmul(&l.transpose())
        .expect("shapes agree by construction")
}

/// Draws `count` i.i.d. functions from `GP(0, κ)` at `points` (`M × D`).
pub fn sample_gp<R: Rng + ?Sized>(
    spec: &KernelSpec,
    points: &Array,
    count: usize,
    rng: &mut R,
) -> Result<FunctionBatch> {
    if count == 0 {
        return invalid("sample count must be >= 1");
    }
    let k = kernel_matrix(spec, points, points)?;
    let (l, _) = cholesky_with_jitter(&k)?;
    Ok(FunctionBatch {
        values: correlate(&l, count, rng),
        measurement_points: points.clone(),
    })
}

/// Each row independently: `l ~ LogNormal`, `α² ~ LogNormal`, then one
/// function from the corresponding RBF GP.
pub fn sample_hierarchical_gp<R: Rng + ?Sized>(
    hp: &HyperPriorSpec,
    points: &Array,
    count: usize,
    rng: &mut R,
) -> Result<FunctionBatch> {
    if count == 0 {
        return invalid("sample count must be >= 1");
    }
    hp.validate()?;
    let m = points.rows();
    let mut values = Vec::with_capacity(count * m);
    for _ in 0..count {
        let lengthscale = hp.lengthscale.sample(rng);
        let variance = hp.variance.sample(rng);
        let spec = KernelSpec::rbf(variance.sqrt(), lengthscale);
        let k = kernel_matrix(&spec, points, points)?;
        let (l, _) = cholesky_with_jitter(&k)?;
        values.extend_from_slice(correlate(&l, 1, rng).data());
    }
    Ok(FunctionBatch {
        values: Array::from_parts(vec![count, m], values),
        measurement_points: points.clone(),
    })
}
