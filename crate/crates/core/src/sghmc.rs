//! Scale-adapted stochastic-gradient Hamiltonian Monte Carlo.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{self, init_params, FlatParams, NetworkSpec};
use crate::diff::{Array, Tape};
use crate::error::{invalid, Error, Result};
use crate::eval::Likelihood;
use crate::priors::{InverseGamma, LayerHypers, LayerVariances, PriorParams};

/// Lower bound on the gradient-variance estimate.
pub const MIN_VARIANCE: f64 = 1e-16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SghmcConfig {
    pub step_size: f64,
    pub momentum: f64,
    pub burn_in: usize,
    pub thinning: usize,
    pub samples_per_chain: usize,
    pub chains: usize,
    pub batch_size: usize,
    /// Posterior temperature; `None` leaves the potential untouched.
    pub temperature: Option<f64>,
    pub gibbs_interval: usize,
    pub seed: u64,
}

impl Default for SghmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            momentum: 0.01,
            burn_in: 2000,
            thinning: 50,
            samples_per_chain: 100,
            chains: 4,
            batch_size: 32,
            temperature: None,
            gibbs_interval: 100,
            seed: 0,
        }
    }
}

impl SghmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return invalid(format!("step size must be > 0, got {}", self.step_size));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return invalid(format!(
                "momentum must lie in (0, 1], got {}",
                self.momentum
            ));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return invalid(format!("temperature must be > 0, got {t}"));
            }
        }
        if self.gibbs_interval == 0
            || self.thinning == 0
            || self.chains == 0
            || self.batch_size == 0
        {
            return invalid("gibbs_interval, thinning, chains and batch_size must be >= 1");
        }
        Ok(())
    }
}

/// Negative log target density, possibly stochastic.
pub trait Potential: Send {
    fn dim(&self) -> usize;

    /// `(U(w), ∇U(w))`, or a minibatch estimate of both.
    fn evaluate(&mut self, w: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)>;

    /// Whether [`Potential::resample_hyper`] does anything.
    fn has_hyper(&self) -> bool {
        false
    }

    /// Gibbs update of auxiliary variables given `w`.
    fn resample_hyper(&mut self, _w: &[f64], _rng: &mut ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    /// Names of the values reported by [`Potential::hyper_state`].
    fn hyper_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn hyper_state(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Exact Gaussian target `N(mean, precision⁻¹)`.
#[derive(Clone, Debug)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    /// Row-major `D×D` precision matrix.
    pub precision: Vec<f64>,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, precision: Vec<f64>) -> Result<Self> {
        if precision.len() != mean.len() * mean.len() || mean.is_empty() {
            return invalid("precision must be D×D for a non-empty mean");
        }
        Ok(Self { mean, precision })
    }
}

impl Potential for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn evaluate(&mut self, w: &[f64], _rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        let d = self.dim();
        let r: Vec<f64> = w.iter().zip(&self.mean).map(|(w, m)| w - m).collect();
        let grad: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| self.precision[i * d + j] * r[j]).sum())
            .collect();
        let u = 0.5 * r.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>();
        Ok((u, grad))
    }
}

/// `U(w) = −(N/B)·Σ_batch log p(y|x,w) − log p(w)` and its gradient.
///
/// With `variances`, hierarchical priors are evaluated conditionally on
/// them; otherwise the prior's marginal density is used.
#[allow(clippy::too_many_arguments)]
pub fn potential_gradient(
    spec: &NetworkSpec,
    prior: &PriorParams,
    variances: Option<&[LayerVariances]>,
    lik: &Likelihood,
    w: &[f64],
    x_batch: &Array,
    y_batch: &Array,
    n_total: usize,
) -> Result<(f64, Vec<f64>)> {
    let b = x_batch.rows();
    if b == 0 || y_batch.rows() != b {
        return invalid("minibatch must be non-empty with one target row per input");
    }
    let mut tape = Tape::new();
    let wv = tape.param("w", Array::vector(w.to_vec()))?;
    let xv = tape.constant(x_batch.clone());
    let out = bnn::forward_on_tape(&mut tape, spec, wv, xv)?;
    let f = tape.reshape(out, &[b, spec.output_dim()])?;
    let ll = lik.log_likelihood_on_tape(&mut tape, f, y_batch)?;
    let nll = tape.scale(ll, -(n_total as f64) / b as f64)?;
    let g = tape.grad(nll, &[wv])?[0];
    let mut grad = tape.value(g).data().to_vec();
    let (lp, gp) = prior.log_density_and_grad(spec, &FlatParams(w.to_vec()), variances)?;
    for (g, p) in grad.iter_mut().zip(gp) {
        *g -= p;
    }
    Ok((tape.scalar(nll) - lp, grad))
}

/// Divides the potential and its gradient by `temperature`, if set.
pub fn apply_temperature(u: &mut f64, grad: &mut [f64], temperature: Option<f64>) {
    if let Some(t) = temperature {
        *u /= t;
        grad.iter_mut().for_each(|g| *g /= t);
    }
}

/// Draws every layer's weight and bias variance from its conditional
/// `IG(α + n/2, β + ½Σw²)` given the current parameters.
pub fn gibbs_resample_variances<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    hypers: &[LayerHypers],
    w: &[f64],
    rng: &mut R,
) -> Result<Vec<LayerVariances>> {
    let layers = spec.layers();
    if hypers.len() != layers.len() || w.len() != spec.param_count() {
        return invalid("hyper-priors or parameters do not match the network");
    }
    let conditional = |h: &InverseGamma, vals: &[f64]| InverseGamma {
        shape: h.shape + 0.5 * vals.len() as f64,
        rate: h.rate + 0.5 * vals.iter().map(|v| v * v).sum::<f64>(),
    };
    layers
        .iter()
        .zip(hypers)
        .map(|(l, h)| {
            Ok(LayerVariances {
                weight: conditional(&h.weight, &w[l.weights()]).sample(rng)?,
                bias: conditional(&h.bias, &w[l.biases()]).sample(rng)?,
            })
        })
        .collect()
}

/// Network posterior potential over a data set, with shuffled-epoch
/// minibatches and Gibbs-sampled variances for hierarchical priors.
pub struct BnnPotential {
    spec: NetworkSpec,
    prior: PriorParams,
    hypers: Option<Vec<LayerHypers>>,
    variances: Option<Vec<LayerVariances>>,
    lik: Likelihood,
    x: Array,
    y: Array,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl BnnPotential {
    pub fn new(
        spec: NetworkSpec,
        prior: PriorParams,
        lik: Likelihood,
        x: Array,
        y: Array,
        batch_size: usize,
    ) -> Result<Self> {
        prior.validate(&spec)?;
        lik.validate()?;
        if x.rank() != 2 || x.cols() != spec.input_dim() || x.rows() == 0 || y.rows() != x.rows() {
            return invalid(format!(
                "data {:?} / {:?} do not fit a network with input dimension {}",
                x.shape(),
                y.shape(),
                spec.input_dim()
            ));
        }
        if batch_size == 0 {
            return invalid("batch size must be >= 1");
        }
        let hypers = prior.layer_hypers(&spec);
        // Start at each conditional's prior mode until the first Gibbs sweep.
        let variances = hypers.as_ref().map(|hs| {
            hs.iter()
                .map(|h| LayerVariances {
                    weight: h.weight.rate / (h.weight.shape + 1.0),
                    bias: h.bias.rate / (h.bias.shape + 1.0),
                })
                .collect()
        });
        let n = x.rows();
        Ok(Self {
            spec,
            prior,
            hypers,
            variances,
            lik,
            x,
            y,
            batch_size: batch_size.min(n),
            order: (0..n).collect(),
            cursor: n,
        })
    }

    pub fn variances(&self) -> Option<&[LayerVariances]> {
        self.variances.as_deref()
    }

    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Result<(Array, Array)> {
        let n = self.x.rows();
        if self.batch_size == n {
            return Ok((self.x.clone(), self.y.clone()));
        }
        if self.cursor + self.batch_size > n {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        let gather = |a: &Array| {
            let c = a.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                data.extend_from_slice(a.row(i));
            }
            Array::matrix(idx.len(), c, data)
        };
        Ok((gather(&self.x)?, gather(&self.y)?))
    }
}

impl Potential for BnnPotential {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn evaluate(&mut self, w: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        let (bx, by) = self.next_batch(rng)?;
        potential_gradient(
            &self.spec,
            &self.prior,
            self.variances.as_deref(),
            &self.lik,
            w,
            &bx,
            &by,
            self.x.rows(),
        )
    }

    fn has_hyper(&self) -> bool {
        self.hypers.is_some()
    }

    fn resample_hyper(&mut self, w: &[f64], rng: &mut ChaCha8Rng) -> Result<()> {
        if let Some(h) = &self.hypers {
            self.variances = Some(gibbs_resample_variances(&self.spec, h, w, rng)?);
        }
        Ok(())
    }

    fn hyper_names(&self) -> Vec<String> {
        match &self.hypers {
            None => Vec::new(),
            Some(h) => (0..h.len())
                .flat_map(|i| [format!("sigma2_l{i}_w"), format!("sigma2_l{i}_b")])
                .collect(),
        }
    }

    fn hyper_state(&self) -> Vec<f64> {
        self.variances
            .iter()
            .flatten()
            .flat_map(|v| [v.weight, v.bias])
            .collect()
    }
}

/// Sampler state of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub g: Vec<f64>,
    pub tau: Vec<f64>,
    pub iteration: usize,
}

impl ChainState {
    pub fn new(w: Vec<f64>) -> Self {
        let n = w.len();
        Self {
            w,
            v: vec![0.0; n],
            v_hat: vec![1.0; n],
            g: vec![0.0; n],
            tau: vec![1.0; n],
            iteration: 0,
        }
    }
}

/// One burn-in update of the gradient moment estimates, applied to `τ`,
/// then `g`, then `V̂`, each from the values before this call.
///
/// The averages use the rate `1/(τ + 1)`. With a rate of `1/τ`, any state
/// with `τ = 1` is absorbing: `g` and `V̂` copy the latest gradient, so the
/// frozen scale would be a single noisy draw.
pub fn burn_in_adapt(state: &mut ChainState, grad: &[f64]) {
    for (i, &gr) in grad.iter().enumerate() {
        let (tau, g, vh) = (state.tau[i], state.g[i], state.v_hat[i]);
        let r = 1.0 / (tau + 1.0);
        state.tau[i] = (tau - g * g / vh * tau + 1.0).max(1.0);
        state.g[i] = g - g * r + gr * r;
        state.v_hat[i] = (vh - vh * r + gr * gr * r).max(MIN_VARIANCE);
    }
}

/// One sampler step: the velocity moves first and the position follows
/// with the new velocity.
///
/// `v ← v − ε²V̂^{−½}∇U − a·v + N(0, max(2ε²a·V̂^{−½} − ε⁴, 0))`, `w ← w + v`.
pub fn sghmc_step<R: Rng + ?Sized>(
    state: &mut ChainState,
    grad: &[f64],
    step_size: f64,
    momentum: f64,
    rng: &mut R,
) -> Result<()> {
    if grad.len() != state.w.len() {
        return invalid(format!(
            "{} gradients for {} parameters",
            grad.len(),
            state.w.len()
        ));
    }
    let e2 = step_size * step_size;
    let e4 = e2 * e2;
    for (i, &gr) in grad.iter().enumerate() {
        let inv_sqrt = 1.0 / state.v_hat[i].sqrt();
        let noise_var = (2.0 * e2 * momentum * inv_sqrt - e4).max(0.0);
        let z: f64 = rng.sample(StandardNormal);
        let v = state.v[i] - e2 * inv_sqrt * gr - momentum * state.v[i] + noise_var.sqrt() * z;
        let w = state.w[i] + v;
        if !(v.is_finite() && w.is_finite()) {
            return Err(Error::NonFiniteState(format!(
                "coordinate {i} at iteration {}",
                state.iteration
            )));
        }
        state.v[i] = v;
        state.w[i] = w;
    }
    state.iteration += 1;
    Ok(())
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of chain `chain`: `splitmix64(seed ⊕ (0x9E3779B97F4A7C15·(chain+1)))`.
pub fn chain_seed(seed: u64, chain: usize) -> u64 {
    splitmix64(seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(chain as u64 + 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub potential: f64,
    pub hyper: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ChainResult {
    pub samples: Vec<FlatParams>,
    pub trace: Vec<TraceRecord>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct PosteriorSamples {
    pub chains: Vec<ChainResult>,
    pub hyper_names: Vec<String>,
    pub config: SghmcConfig,
}

impl PosteriorSamples {
    /// All samples, chain by chain.
    pub fn all(&self) -> Vec<FlatParams> {
        self.chains
            .iter()
            .flat_map(|c| c.samples.iter().cloned())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.chains.iter().map(|c| c.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The first chain failure, if any.
    pub fn check(&self) -> Result<()> {
        for (i, c) in self.chains.iter().enumerate() {
            if let Some(e) = &c.error {
                return Err(Error::NonFiniteState(format!("chain {i} failed: {e}")));
            }
        }
        Ok(())
    }

    /// Per-chain traces of one scalar function of the samples.
    pub fn scalar_traces(&self, f: impl Fn(&FlatParams) -> f64) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.samples.iter().map(&f).collect())
            .collect()
    }
}

fn run_one<P: Potential>(
    mut potential: P,
    w0: Vec<f64>,
    cfg: &SghmcConfig,
    rng: &mut ChaCha8Rng,
    abort: &AtomicBool,
) -> ChainResult {
    let mut out = ChainResult::default();
    let mut state = ChainState::new(w0);
    let total = cfg.burn_in + cfg.samples_per_chain * cfg.thinning;
    let result = (|| -> Result<()> {
        if state.w.len() != potential.dim() {
            return invalid("initial parameters do not match the potential");
        }
        for it in 0..total {
            if abort.load(Ordering::Relaxed) {
                return Err(Error::NonFiniteState(
                    "aborted after another chain failed".into(),
                ));
            }
            if potential.has_hyper() && it % cfg.gibbs_interval == 0 {
                potential.resample_hyper(&state.w, rng)?;
            }
            let (mut u, mut grad) = potential.evaluate(&state.w, rng)?;
            apply_temperature(&mut u, &mut grad, cfg.temperature);
            if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { index });
            }
            if it % cfg.thinning == 0 {
                out.trace.push(TraceRecord {
                    iteration: it,
                    potential: u,
                    hyper: potential.hyper_state(),
                });
            }
            if it < cfg.burn_in {
                burn_in_adapt(&mut state, &grad);
            }
            sghmc_step(&mut state, &grad, cfg.step_size, cfg.momentum, rng)?;
            if it >= cfg.burn_in && (it + 1 - cfg.burn_in).is_multiple_of(cfg.thinning) {
                out.samples.push(FlatParams(state.w.clone()));
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        abort.store(true, Ordering::Relaxed);
        out.error = Some(e.to_string());
    }
    out
}

/// Runs `cfg.chains` independent chains in parallel. `make` builds each
/// chain's potential and starting point from the chain index and the
/// chain's own generator. A failing chain stops the others; every chain's
/// partial output is still returned (see [`PosteriorSamples::check`]).
pub fn run_chains<P, F>(make: F, cfg: &SghmcConfig) -> Result<PosteriorSamples>
where
    P: Potential,
    F: Fn(usize, &mut ChaCha8Rng) -> Result<(P, Vec<f64>)> + Sync,
{
    cfg.validate()?;
    let abort = AtomicBool::new(false);
    let runs: Vec<(ChainResult, Vec<String>)> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(chain_seed(cfg.seed, c));
            match make(c, &mut rng) {
                Ok((p, w0)) => {
                    let names = p.hyper_names();
                    (run_one(p, w0, cfg, &mut rng, &abort), names)
                }
                Err(e) => {
                    abort.store(true, Ordering::Relaxed);
                    let r = ChainResult {
                        error: Some(e.to_string()),
                        ..ChainResult::default()
                    };
                    (r, Vec::new())
                }
            }
        })
        .collect();
    let hyper_names = runs
        .iter()
        .map(|r| r.1.clone())
        .max_by_key(|n| n.len())
        .unwrap_or_default();
    Ok(PosteriorSamples {
        chains: runs.into_iter().map(|r| r.0).collect(),
        hyper_names,
        config: cfg.clone(),
    })
}

/// Posterior sampling for a network: standard initialization per chain,
/// minibatch potential, Gibbs sweeps for hierarchical priors.
pub fn run_bnn_chains(
    spec: &NetworkSpec,
    prior: &PriorParams,
    lik: &Likelihood,
    x: &Array,
    y: &Array,
    cfg: &SghmcConfig,
) -> Result<PosteriorSamples> {
    BnnPotential::new(
        spec.clone(),
        prior.clone(),
        lik.clone(),
        x.clone(),
        y.clone(),
        cfg.batch_size,
    )?;
    run_chains(
        |_, rng| {
            let p = BnnPotential::new(
                spec.clone(),
                prior.clone(),
                lik.clone(),
                x.clone(),
                y.clone(),
                cfg.batch_size,
            )?;
            Ok((p, init_params(spec, rng).0))
        },
        cfg,
    )
}

/// Potential-scale-reduction factor of equal-length scalar chains.
///
/// `R̂ = √(((n−1)/n·W + B/n) / W)` with `W` the mean within-chain variance
/// and `B/n` the variance of the chain means. Zero spread everywhere gives
/// 1; zero within-chain but nonzero between-chain spread gives infinity.
pub fn r_hat(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return invalid("R-hat needs at least two chains");
    }
    let n = chains[0].len();
    if n < 10 || chains.iter().any(|c| c.len() != n) {
        return invalid("R-hat needs chains of equal length >= 10");
    }
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c.iter().sum::<f64>() / n as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n - 1) as f64 / n as f64 * w + b / n as f64;
    Ok((var_plus / w).sqrt())
}

/// Writes one chain's trace as CSV: `iteration,potential,<hyper names>`.
pub fn write_trace_csv<W: Write>(
    chain: &ChainResult,
    hyper_names: &[String],
    out: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["iteration".to_string(), "potential".to_string()];
    header.extend(hyper_names.iter().cloned());
    wtr.write_record(&header)?;
    for r in &chain.trace {
        let mut row = vec![r.iteration.to_string(), r.potential.to_string()];
        row.extend(r.hyper.iter().map(|v| v.to_string()));
        row.resize(header.len(), String::new());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Layout description stored next to the binary sample file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub format: String,
    pub param_count: usize,
    pub samples_per_chain: Vec<usize>,
    pub layer_widths: Vec<usize>,
    /// `(weight offset, weight length, bias offset, bias length)` per layer.
    pub layers: Vec<(usize, usize, usize, usize)>,
    pub config: SghmcConfig,
}

pub const SAMPLE_FORMAT: &str = "u64-le length followed by that many f64-le values, per sample";

/// Serializes all samples, chain by chain, as length-prefixed arrays and
/// returns the matching sidecar.
pub fn write_samples<W: Write>(
    samples: &PosteriorSamples,
    spec: &NetworkSpec,
    mut out: W,
) -> Result<SampleSidecar> {
    for s in samples.chains.iter().flat_map(|c| &c.samples) {
        out.write_all(&(s.len() as u64).to_le_bytes())?;
        for v in &s.0 {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(SampleSidecar {
        format: SAMPLE_FORMAT.to_string(),
        param_count: spec.param_count(),
        samples_per_chain: samples.chains.iter().map(|c| c.samples.len()).collect(),
        layer_widths: spec.layer_widths.clone(),
        layers: spec
            .layers()
            .iter()
            .map(|l| (l.weight_offset, l.weight_len(), l.bias_offset, l.bias_len()))
            .collect(),
        config: samples.config.clone(),
    })
}

/// Reads samples written by [`write_samples`], grouped per chain.
pub fn read_samples<R: Read>(
    sidecar: &SampleSidecar,
    mut input: R,
) -> Result<Vec<Vec<FlatParams>>> {
    let mut chains = Vec::with_capacity(sidecar.samples_per_chain.len());
    for &count in &sidecar.samples_per_chain {
        let mut chain = Vec::with_capacity(count);
        for _ in 0..count {
            let mut len = [0u8; 8];
            input.read_exact(&mut len)?;
            let len = u64::from_le_bytes(len) as usize;
            if len != sidecar.param_count {
                return invalid(format!(
                    "sample of length {len}, expected {}",
                    sidecar.param_count
                ));
            }
            let mut buf = vec![0u8; 8 * len];
            input.read_exact(&mut buf)?;
            chain.push(FlatParams(
                buf.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect(),
            ));
        }
        chains.push(chain);
    }
    Ok(chains)
}

#[cfg(test)]
mod tests;
