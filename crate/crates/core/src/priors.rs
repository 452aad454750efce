//! Prior families over network parameters.
//!
//! Two fixed baselines (`FixedGaussian`, `FixedHierarchical`) and three
//! tunable families: layer-wise Gaussian, layer-wise hierarchical with
//! Inverse-Gamma variances, and per-layer planar normalizing flows. Tunable
//! families expose their unconstrained parameters as one flat vector `ψ`
//! (see [`PriorParams::psi`]) so the tuner can treat them uniformly.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{checked_gamma_ur, ln_gamma};

use crate::bnn::{FlatParams, LayerLayout, NetworkSpec};
use crate::diff::{softplus, Array, Tape, Var};
use crate::error::{invalid, Error, Result};

/// Number of planar flows per layer.
pub const FLOW_LENGTH: usize = 4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln(e − 1)`: the shift that makes the invertibility constraint the
/// identity at `u = 0`.
const FLOW_SHIFT: f64 = 0.541_324_854_612_918_1;

/// Inverse of `softplus`, for `y > 0`.
pub fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLayer {
    pub rho_w: f64,
    pub rho_b: f64,
}

impl GaussianLayer {
    pub fn from_sigmas(sigma_w: f64, sigma_b: f64) -> Self {
        Self {
            rho_w: inv_softplus(sigma_w),
            rho_b: inv_softplus(sigma_b),
        }
    }

    pub fn sigmas(&self) -> (f64, f64) {
        (softplus(self.rho_w), softplus(self.rho_b))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPriorParams {
    pub layers: Vec<GaussianLayer>,
}

impl GaussianPriorParams {
    pub fn uniform(spec: &NetworkSpec, sigma_w: f64, sigma_b: f64) -> Self {
        Self {
            layers: vec![GaussianLayer::from_sigmas(sigma_w, sigma_b); spec.num_layers()],
        }
    }
}

/// Inverse-Gamma(shape, rate) on a variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseGamma {
    pub shape: f64,
    pub rate: f64,
}

impl InverseGamma {
    pub fn validate(&self) -> Result<()> {
        if !(self.shape > 0.0 && self.rate > 0.0 && self.shape.is_finite() && self.rate.is_finite())
        {
            return invalid(format!(
                "Inverse-Gamma needs shape, rate > 0, got ({}, {})",
                self.shape, self.rate
            ));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        self.validate()?;
        let g = Gamma::new(self.shape, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.rate / g.sample(rng))
    }

    /// Log density of `n` zero-mean Gaussian values with this variance
    /// integrated out; `half_sq` is `½ Σ w²`.
    fn log_marginal(&self, n: usize, half_sq: f64) -> f64 {
        let a = self.shape;
        let n2 = n as f64 / 2.0;
        a * self.rate.ln() - ln_gamma(a) + ln_gamma(a + n2)
            - n2 * LN_2PI
            - (a + n2) * (self.rate + half_sq).ln()
    }
}

/// Unconstrained hierarchical parameters for one layer; the Inverse-Gamma
/// shape and rate are `softplus` of these.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalLayer {
    pub raw_shape_w: f64,
    pub raw_rate_w: f64,
    pub raw_shape_b: f64,
    pub raw_rate_b: f64,
}

impl HierarchicalLayer {
    pub fn from_hypers(w: InverseGamma, b: InverseGamma) -> Self {
        Self {
            raw_shape_w: inv_softplus(w.shape),
            raw_rate_w: inv_softplus(w.rate),
            raw_shape_b: inv_softplus(b.shape),
            raw_rate_b: inv_softplus(b.rate),
        }
    }

    pub fn hypers(&self) -> LayerHypers {
        LayerHypers {
            weight: InverseGamma {
                shape: softplus(self.raw_shape_w),
                rate: softplus(self.raw_rate_w),
            },
            bias: InverseGamma {
                shape: softplus(self.raw_shape_b),
                rate: softplus(self.raw_rate_b),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalPriorParams {
    pub layers: Vec<HierarchicalLayer>,
}

impl HierarchicalPriorParams {
    pub fn uniform(spec: &NetworkSpec, hyper: InverseGamma) -> Self {
        Self {
            layers: vec![HierarchicalLayer::from_hypers(hyper, hyper); spec.num_layers()],
        }
    }
}

/// Inverse-Gamma hyper-priors of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHypers {
    pub weight: InverseGamma,
    pub bias: InverseGamma,
}

/// Current variances of one layer under a hierarchical prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerVariances {
    pub weight: f64,
    pub bias: f64,
}

/// `t(z) = z + û·tanh(θᵀz + b)`, where `û` is `u` pushed onto the set
/// `ûᵀθ > −1` so the map is always invertible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarFlow {
    pub u: Vec<f64>,
    pub theta: Vec<f64>,
    pub b: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log|1 + uᵀθ·h′(θᵀz + b)|` for `h = tanh`, with the raw `u`.
pub fn planar_log_det(u: &[f64], theta: &[f64], b: f64, z: &[f64]) -> Result<f64> {
    let t = (dot(theta, z) + b).tanh();
    let arg = 1.0 + dot(u, theta) * (1.0 - t * t);
    if arg == 0.0 || !arg.is_finite() {
        return Err(Error::NonInvertibleFlow(format!(
            "Jacobian determinant {arg}"
        )));
    }
    Ok(arg.abs().ln())
}

impl PlanarFlow {
    pub fn identity(dim: usize) -> Self {
        Self {
            u: vec![0.0; dim],
            theta: vec![0.0; dim],
            b: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// The constrained `û`.
    pub fn effective_u(&self) -> Vec<f64> {
        let tt = dot(&self.theta, &self.theta);
        if tt == 0.0 {
            return self.u.clone();
        }
        let ut = dot(&self.u, &self.theta);
        let m = softplus(ut + FLOW_SHIFT) - 1.0;
        let coef = (m - ut) / tt;
        self.u
            .iter()
            .zip(&self.theta)
            .map(|(u, t)| u + coef * t)
            .collect()
    }

    /// Applies the flow; returns the image and `log|det J|`.
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let u = self.effective_u();
        let t = (dot(&self.theta, z) + self.b).tanh();
        let out = z.iter().zip(&u).map(|(z, u)| z + u * t).collect();
        let arg = 1.0 + dot(&u, &self.theta) * (1.0 - t * t);
        if arg <= 0.0 || !arg.is_finite() {
            return Err(Error::NonInvertibleFlow(format!(
                "log-det argument {arg} at forward pass"
            )));
        }
        Ok((out, arg.ln()))
    }

    /// Solves `t(z) = w`. Returns `z` and the pre-activation `θᵀz + b`.
    ///
    /// The flow only moves points along `û`, so inversion reduces to the
    /// scalar equation `a + c·tanh(a) = θᵀw + b` with `c = ûᵀθ > −1`,
    /// which is strictly increasing in `a` and solved by bisection.
    pub fn inverse(&self, w: &[f64]) -> Result<(Vec<f64>, f64)> {
        let u = self.effective_u();
        let c = dot(&u, &self.theta);
        if c <= -1.0 {
            return Err(Error::NonInvertibleFlow(format!("ûᵀθ = {c}")));
        }
        let s = dot(&self.theta, w) + self.b;
        let f = |a: f64| a + c * a.tanh() - s;
        let (mut lo, mut hi) = (s - c.abs() - 1.0, s + c.abs() + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo < 1e-13 * (1.0 + s.abs()) {
                break;
            }
        }
        let a = 0.5 * (lo + hi);
        let t = a.tanh();
        Ok((w.iter().zip(&u).map(|(w, u)| w - u * t).collect(), a))
    }
}

/// Planar-flow prior for one layer: base `N(0, diag(exp(log_std))²)`
/// followed by the flows in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowLayer {
    pub log_std: Vec<f64>,
    pub flows: Vec<PlanarFlow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowPriorParams {
    pub layers: Vec<FlowLayer>,
}

impl FlowPriorParams {
    /// Unit base scale, `u = 0` (so every flow starts as the identity) and
    /// `θ ~ N(0, 1/D_l)` so the flows can leave the identity under training.
    pub fn initial<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let layers = spec
            .layers()
            .iter()
            .map(|l| {
                let d = l.len();
                let scale = 1.0 / (d as f64).sqrt();
                FlowLayer {
                    log_std: vec![0.0; d],
                    flows: (0..FLOW_LENGTH)
                        .map(|_| PlanarFlow {
                            u: vec![0.0; d],
                            theta: (0..d)
                                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                                .collect(),
                            b: 0.0,
                        })
                        .collect(),
                }
            })
            .collect();
        Self { layers }
    }
}

/// Which family to build when constructing a fresh prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorFamily {
    FixedGaussian,
    FixedHierarchical,
    Gaussian,
    Hierarchical,
    Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum PriorParams {
    /// `w ~ N(0, σ²)` for every parameter.
    FixedGaussian {
        sigma: f64,
    },
    /// Every layer's weight and bias variance `~ InvGamma(shape, rate)`.
    FixedHierarchical {
        shape: f64,
        rate: f64,
    },
    Gaussian(GaussianPriorParams),
    Hierarchical(HierarchicalPriorParams),
    Flow(FlowPriorParams),
}

impl Default for PriorParams {
    fn default() -> Self {
        Self::FixedGaussian { sigma: 1.0 }
    }
}

impl PriorParams {
    /// Starting point for each family: unit scales for the Gaussian ones,
    /// `InvGamma(1, 1)` for the fixed hierarchical baseline and
    /// `InvGamma(2, 1)` (mean variance 1) for the tunable one.
    pub fn initial<R: Rng + ?Sized>(family: PriorFamily, spec: &NetworkSpec, rng: &mut R) -> Self {
        match family {
            PriorFamily::FixedGaussian => Self::FixedGaussian { sigma: 1.0 },
            PriorFamily::FixedHierarchical => Self::FixedHierarchical {
                shape: 1.0,
                rate: 1.0,
            },
            PriorFamily::Gaussian => Self::Gaussian(GaussianPriorParams::uniform(spec, 1.0, 1.0)),
            PriorFamily::Hierarchical => Self::Hierarchical(HierarchicalPriorParams::uniform(
                spec,
                InverseGamma {
                    shape: 2.0,
                    rate: 1.0,
                },
            )),
            PriorFamily::Flow => Self::Flow(FlowPriorParams::initial(spec, rng)),
        }
    }

    pub fn family(&self) -> PriorFamily {
        match self {
            Self::FixedGaussian { .. } => PriorFamily::FixedGaussian,
            Self::FixedHierarchical { .. } => PriorFamily::FixedHierarchical,
            Self::Gaussian(_) => PriorFamily::Gaussian,
            Self::Hierarchical(_) => PriorFamily::Hierarchical,
            Self::Flow(_) => PriorFamily::Flow,
        }
    }

    pub fn is_tunable(&self) -> bool {
        matches!(
            self,
            Self::Gaussian(_) | Self::Hierarchical(_) | Self::Flow(_)
        )
    }

    pub fn is_hierarchical(&self) -> bool {
        matches!(self, Self::FixedHierarchical { .. } | Self::Hierarchical(_))
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        spec.validate()?;
        let layers = spec.layers();
        let count = |n: usize| {
            if n != layers.len() {
                invalid(format!(
                    "prior has {n} layers, network has {}",
                    layers.len()
                ))
            } else {
                Ok(())
            }
        };
        match self {
            Self::FixedGaussian { sigma } => {
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return invalid(format!("prior sigma must be >= 0, got {sigma}"));
                }
            }
            Self::FixedHierarchical { shape, rate } => InverseGamma {
                shape: *shape,
                rate: *rate,
            }
            .validate()?,
            Self::Gaussian(g) => count(g.layers.len())?,
            Self::Hierarchical(h) => count(h.layers.len())?,
            Self::Flow(f) => {
                count(f.layers.len())?;
                for (i, (fl, l)) in f.layers.iter().zip(&layers).enumerate() {
                    let d = l.len();
                    let bad = fl.log_std.len() != d
                        || fl
                            .flows
                            .iter()
                            .any(|k| k.u.len() != d || k.theta.len() != d);
                    if bad {
                        return invalid(format!("flow layer {i} does not have dimension {d}"));
                    }
                }
            }
        }
        if let Some(bad) = self.psi().iter().find(|v| !v.is_finite()) {
            return invalid(format!("non-finite prior parameter {bad}"));
        }
        Ok(())
    }

    /// Flat vector of tunable parameters (empty for fixed priors).
    ///
    /// Layout per layer: Gaussian `[ρ_w, ρ_b]`; hierarchical
    /// `[shape_w, rate_w, shape_b, rate_b]` (unconstrained); flow
    /// `[log_std (D_l), then per flow u (D_l), θ (D_l), b]`.
    pub fn psi(&self) -> Vec<f64> {
        match self {
            Self::FixedGaussian { .. } | Self::FixedHierarchical { .. } => Vec::new(),
            Self::Gaussian(g) => g.layers.iter().flat_map(|l| [l.rho_w, l.rho_b]).collect(),
            Self::Hierarchical(h) => h
                .layers
                .iter()
                .flat_map(|l| [l.raw_shape_w, l.raw_rate_w, l.raw_shape_b, l.raw_rate_b])
                .collect(),
            Self::Flow(f) => {
                let mut out = Vec::new();
                for l in &f.layers {
                    out.extend_from_slice(&l.log_std);
                    for k in &l.flows {
                        out.extend_from_slice(&k.u);
                        out.extend_from_slice(&k.theta);
                        out.push(k.b);
                    }
                }
                out
            }
        }
    }

    /// Same family and shapes with `ψ` replaced.
    pub fn with_psi(&self, psi: &[f64]) -> Result<Self> {
        let n = self.psi().len();
        if psi.len() != n {
            return invalid(format!("expected {n} prior parameters, got {}", psi.len()));
        }
        let mut it = psi.iter().copied();
        let mut next = || it.next().unwrap();
        Ok(match self {
            Self::FixedGaussian { .. } | Self::FixedHierarchical { .. } => self.clone(),
            Self::Gaussian(g) => Self::Gaussian(GaussianPriorParams {
                layers: g
                    .layers
                    .iter()
                    .map(|_| GaussianLayer {
                        rho_w: next(),
                        rho_b: next(),
                    })
                    .collect(),
            }),
            Self::Hierarchical(h) => Self::Hierarchical(HierarchicalPriorParams {
                layers: h
                    .layers
                    .iter()
                    .map(|_| HierarchicalLayer {
                        raw_shape_w: next(),
                        raw_rate_w: next(),
                        raw_shape_b: next(),
                        raw_rate_b: next(),
                    })
                    .collect(),
            }),
            Self::Flow(f) => Self::Flow(FlowPriorParams {
                layers: f
                    .layers
                    .iter()
                    .map(|l| {
                        let d = l.log_std.len();
                        let log_std = (0..d).map(|_| next()).collect();
                        let flows = l
                            .flows
                            .iter()
                            .map(|_| PlanarFlow {
                                u: (0..d).map(|_| next()).collect(),
                                theta: (0..d).map(|_| next()).collect(),
                                b: next(),
                            })
                            .collect();
                        FlowLayer { log_std, flows }
                    })
                    .collect(),
            }),
        })
    }

    /// Inverse-Gamma hyper-priors per layer, for hierarchical families.
    pub fn layer_hypers(&self, spec: &NetworkSpec) -> Option<Vec<LayerHypers>> {
        match self {
            Self::FixedHierarchical { shape, rate } => {
                let ig = InverseGamma {
                    shape: *shape,
                    rate: *rate,
                };
                Some(vec![
                    LayerHypers {
                        weight: ig,
                        bias: ig
                    };
                    spec.num_layers()
                ])
            }
            Self::Hierarchical(h) => Some(h.layers.iter().map(|l| l.hypers()).collect()),
            _ => None,
        }
    }

    /// Per-layer `(σ_w, σ_b)` for the Gaussian families.
    fn gaussian_sigmas(&self, spec: &NetworkSpec) -> Option<Vec<(f64, f64)>> {
        match self {
            Self::FixedGaussian { sigma } => Some(vec![(*sigma, *sigma); spec.num_layers()]),
            Self::Gaussian(g) => Some(g.layers.iter().map(|l| l.sigmas()).collect()),
            _ => None,
        }
    }

    /// Exact `log p(w)`.
    ///
    /// Hierarchical families integrate the Inverse-Gamma variances out
    /// analytically (a multivariate Student-t per layer group); use
    /// [`PriorParams::conditional_log_density`] for `log p(w | σ²)`. Flow
    /// priors invert each flow numerically.
    pub fn log_density(&self, spec: &NetworkSpec, w: &FlatParams) -> Result<f64> {
        self.check(spec, w)?;
        if let Some(hypers) = self.layer_hypers(spec) {
            let mut total = 0.0;
            for (l, h) in spec.layers().iter().zip(&hypers) {
                let hw = 0.5 * w.0[l.weights()].iter().map(|v| v * v).sum::<f64>();
                let hb = 0.5 * w.0[l.biases()].iter().map(|v| v * v).sum::<f64>();
                total += h.weight.log_marginal(l.weight_len(), hw);
                total += h.bias.log_marginal(l.bias_len(), hb);
            }
            return Ok(total);
        }
        self.log_density_and_grad(spec, w, None).map(|(v, _)| v)
    }

    /// `log p(w | σ²)` for hierarchical priors.
    pub fn conditional_log_density(
        &self,
        spec: &NetworkSpec,
        w: &FlatParams,
        variances: &[LayerVariances],
    ) -> Result<f64> {
        self.log_density_and_grad(spec, w, Some(variances))
            .map(|(v, _)| v)
    }

    /// `log p(w)` and its gradient in `w`, as used by the sampler.
    ///
    /// Hierarchical priors are conditional on `variances`, which are then
    /// required; other families ignore them.
    pub fn log_density_and_grad(
        &self,
        spec: &NetworkSpec,
        w: &FlatParams,
        variances: Option<&[LayerVariances]>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check(spec, w)?;
        let layers = spec.layers();
        let mut grad = vec![0.0; w.len()];
        let mut total = 0.0;
        let gaussian =
            |range: std::ops::Range<usize>, var: f64, total: &mut f64, grad: &mut [f64]| {
                if !(var > 0.0 && var.is_finite()) {
                    return invalid(format!("Gaussian prior with variance {var}"));
                }
                let n = range.len() as f64;
                let mut sq = 0.0;
                for i in range {
                    sq += w.0[i] * w.0[i];
                    grad[i] = -w.0[i] / var;
                }
                *total += -0.5 * n * (LN_2PI + var.ln()) - 0.5 * sq / var;
                Ok(())
            };
        if let Some(sigmas) = self.gaussian_sigmas(spec) {
            for (l, (sw, sb)) in layers.iter().zip(sigmas) {
                gaussian(l.weights(), sw * sw, &mut total, &mut grad)?;
                gaussian(l.biases(), sb * sb, &mut total, &mut grad)?;
            }
            return Ok((total, grad));
        }
        match self {
            Self::FixedHierarchical { .. } | Self::Hierarchical(_) => {
                let vars = variances.ok_or_else(|| {
                    Error::InvalidArgument(
                        "hierarchical prior density needs the layer variances".into(),
                    )
                })?;
                if vars.len() != layers.len() {
                    return invalid(format!(
                        "{} layer variances for {} layers",
                        vars.len(),
                        layers.len()
                    ));
                }
                for (l, v) in layers.iter().zip(vars) {
                    gaussian(l.weights(), v.weight, &mut total, &mut grad)?;
                    gaussian(l.biases(), v.bias, &mut total, &mut grad)?;
                }
            }
            Self::Flow(f) => {
                for (l, fl) in layers.iter().zip(&f.layers) {
                    let (v, g) = flow_log_density_and_grad(fl, &w.0[l.all()])?;
                    total += v;
                    grad[l.all()].copy_from_slice(&g);
                }
            }
            _ => unreachable!("Gaussian families handled above"),
        }
        Ok((total, grad))
    }

    fn check(&self, spec: &NetworkSpec, w: &FlatParams) -> Result<()> {
        self.validate(spec)?;
        if w.len() != spec.param_count() {
            return invalid(format!(
                "{} parameters for a network with {}",
                w.len(),
                spec.param_count()
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn base_log_density(log_std: &[f64], z: &[f64]) -> f64 {
    log_std
        .iter()
        .zip(z)
        .map(|(s, z)| -0.5 * LN_2PI - s - 0.5 * (z * (-s).exp()).powi(2))
        .sum()
}

/// Log density of one flow layer at `w`, and its gradient.
///
/// The flows are inverted one by one from the last; the gradient is the
/// base-space gradient of `log p₀(z₀) − Σ log|det J_k|` pulled back by
/// `J⁻ᵀ` of the whole chain, each factor applied by Sherman–Morrison.
fn flow_log_density_and_grad(layer: &FlowLayer, w: &[f64]) -> Result<(f64, Vec<f64>)> {
    struct Step {
        u: Vec<f64>,
        c: f64,
        a: f64,
    }
    let mut steps = Vec::with_capacity(layer.flows.len());
    let mut z = w.to_vec();
    for flow in layer.flows.iter().rev() {
        let (prev, a) = flow.inverse(&z)?;
        let u = flow.effective_u();
        let c = dot(&u, &flow.theta);
        steps.push(Step { u, c, a });
        z = prev;
    }
    steps.reverse();
    let z0 = z;

    let mut value = base_log_density(&layer.log_std, &z0);
    let mut g = vec![0.0; w.len()];
    // Backward over the flows for the log-det terms, as a function of z₀.
    for (flow, st) in layer.flows.iter().zip(&steps).rev() {
        let t = st.a.tanh();
        let h1 = 1.0 - t * t;
        let arg = 1.0 + st.c * h1;
        if arg <= 0.0 {
            return Err(Error::NonInvertibleFlow(format!("log-det argument {arg}")));
        }
        value -= arg.ln();
        let dld = st.c * (-2.0 * t * h1) / arg;
        let coef = h1 * dot(&st.u, &g) - dld;
        for (gi, th) in g.iter_mut().zip(&flow.theta) {
            *gi += coef * th;
        }
    }
    for ((gi, s), z) in g.iter_mut().zip(&layer.log_std).zip(&z0) {
        *gi -= z * (-2.0 * s).exp();
    }
    // Pull back to w: J_T⁻ᵀ = J_K⁻ᵀ ⋯ J_1⁻ᵀ, applied right to left.
    for (flow, st) in layer.flows.iter().zip(&steps) {
        let t = st.a.tanh();
        let h1 = 1.0 - t * t;
        let coef = h1 * dot(&st.u, &g) / (1.0 + h1 * st.c);
        for (gi, th) in g.iter_mut().zip(&flow.theta) {
            *gi -= coef * th;
        }
    }
    Ok((value, g))
}

/// A draw from Inverse-Gamma(α, β) with its pathwise derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImplicitSample {
    pub value: f64,
    pub d_shape: f64,
    pub d_rate: f64,
}

/// Samples `z ~ InvGamma(α, β)` with implicit reparameterization gradients
/// `∂z/∂ψ = −(∂F/∂ψ)/(∂F/∂z)`, `F` the Inverse-Gamma CDF.
///
/// `z = β/x` with `x ~ Gamma(α, 1)`, so `∂z/∂β = z/β` exactly. For the shape,
/// `F(z) = Q(α, β/z)` (regularized upper incomplete gamma) and `∂F/∂α` is
/// a central difference with step `1e−4·max(1, α)`.
pub fn invgamma_sample_implicit<R: Rng + ?Sized>(
    alpha: f64,
    beta: f64,
    rng: &mut R,
) -> Result<ImplicitSample> {
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return invalid(format!(
            "Inverse-Gamma needs shape, rate > 0, got ({alpha}, {beta})"
        ));
    }
    let g = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let x: f64 = g.sample(rng);
    Ok(invgamma_from_gamma(alpha, beta, x))
}

/// The deterministic part of [`invgamma_sample_implicit`], given the
/// underlying `Gamma(α, 1)` draw `x`.
pub fn invgamma_from_gamma(alpha: f64, beta: f64, x: f64) -> ImplicitSample {
    let x = x.max(f64::MIN_POSITIVE);
    let z = beta / x;
    let d_rate = z / beta;
    let mut h = 1e-4 * alpha.max(1.0);
    if alpha - h <= 0.0 {
        h = 0.5 * alpha;
    }
    let q = |a: f64| checked_gamma_ur(a, x).unwrap_or(f64::NAN);
    let df_da = (q(alpha + h) - q(alpha - h)) / (2.0 * h);
    // Inverse-Gamma density at z, in log space.
    let log_pdf = alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * z.ln() - beta / z;
    let d_shape = -df_da / log_pdf.exp();
    ImplicitSample {
        value: z,
        d_shape: if d_shape.is_finite() { d_shape } else { 0.0 },
        d_rate,
    }
}

/// Tape variable for `ψ`, creating a constant when none is supplied.
fn psi_var(tape: &mut Tape, prior: &PriorParams, psi: Option<Var>) -> Result<Var> {
    let n = prior.psi().len();
    match psi {
        Some(v) => {
            if tape.shape(v) != [n] {
                return invalid(format!(
                    "ψ variable has shape {:?}, prior has {n} parameters",
                    tape.shape(v)
                ));
            }
            Ok(v)
        }
        None => Ok(tape.constant(Array::vector(prior.psi()))),
    }
}

fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `count` parameter vectors `[count, P]` on `tape`.
///
/// With `psi` given (shape `[len ψ]`), the draws are differentiable in it;
/// otherwise the prior's current `ψ` is used as a constant.
pub fn sample_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    prior: &PriorParams,
    psi: Option<Var>,
    spec: &NetworkSpec,
    count: usize,
    rng: &mut R,
) -> Result<Var> {
    prior.validate(spec)?;
    if count == 0 {
        return invalid("sample count must be >= 1");
    }
    let layers = spec.layers();
    let p = spec.param_count();
    match prior {
        PriorParams::FixedGaussian { sigma } => {
            let data = standard_normals(rng, count * p)
                .into_iter()
                .map(|e| e * sigma)
                .collect();
            Ok(tape.constant(Array::new(vec![count, p], data)?))
        }
        PriorParams::FixedHierarchical { .. } => {
            let hypers = prior.layer_hypers(spec).unwrap();
            let mut data = Vec::with_capacity(count * p);
            for _ in 0..count {
                for (l, h) in layers.iter().zip(&hypers) {
                    let sw = h.weight.sample(rng)?.sqrt();
                    let sb = h.bias.sample(rng)?.sqrt();
                    data.extend(
                        (0..l.weight_len()).map(|_| sw * rng.sample::<f64, _>(StandardNormal)),
                    );
                    data.extend(
                        (0..l.bias_len()).map(|_| sb * rng.sample::<f64, _>(StandardNormal)),
                    );
                }
            }
            Ok(tape.constant(Array::new(vec![count, p], data)?))
        }
        PriorParams::Gaussian(_) => {
            let psi = psi_var(tape, prior, psi)?;
            let mut parts = Vec::with_capacity(2 * layers.len());
            for (i, l) in layers.iter().enumerate() {
                for (j, n) in [(0, l.weight_len()), (1, l.bias_len())] {
                    let rho = tape.slice_last(psi, 2 * i + j, 1)?;
                    let sigma = tape.softplus(rho)?;
                    parts.push(tape.broadcast_to(sigma, &[n])?);
                }
            }
            let scale = tape.concat_last(&parts)?;
            let eps = tape.constant(Array::new(
                vec![count, p],
                standard_normals(rng, count * p),
            )?);
            tape.mul(eps, scale)
        }
        PriorParams::Hierarchical(_) => {
            let psi = psi_var(tape, prior, psi)?;
            let mut parts = Vec::with_capacity(2 * layers.len());
            for (i, l) in layers.iter().enumerate() {
                for (j, n) in [(0, l.weight_len()), (1, l.bias_len())] {
                    let raw_a = tape.slice_last(psi, 4 * i + 2 * j, 1)?;
                    let raw_b = tape.slice_last(psi, 4 * i + 2 * j + 1, 1)?;
                    let alpha = tape.softplus(raw_a)?;
                    let beta = tape.softplus(raw_b)?;
                    let (a, b) = (tape.scalar(alpha), tape.scalar(beta));
                    let mut z0 = Vec::with_capacity(count);
                    let mut ca = Vec::with_capacity(count);
                    let mut cb = Vec::with_capacity(count);
                    for _ in 0..count {
                        let s = invgamma_sample_implicit(a, b, rng)?;
                        z0.push(s.value);
                        ca.push(s.d_shape);
                        cb.push(s.d_rate);
                    }
                    // z = z₀ + ∂z/∂α·(α − ᾱ) + ∂z/∂β·(β − β̄), with bars detached:
                    // the value is z₀ and the gradient is the implicit one.
                    let da = {
                        let d = tape.detach(alpha)?;
                        tape.sub(alpha, d)?
                    };
                    let db = {
                        let d = tape.detach(beta)?;
                        tape.sub(beta, d)?
                    };
                    let ca = tape.constant(Array::matrix(count, 1, ca)?);
                    let cb = tape.constant(Array::matrix(count, 1, cb)?);
                    let ta = tape.mul(ca, da)?;
                    let tb = tape.mul(cb, db)?;
                    let z0 = tape.constant(Array::matrix(count, 1, z0)?);
                    let z = tape.add(z0, ta)?;
                    let z = tape.add(z, tb)?;
                    let sigma = tape.sqrt(z)?;
                    parts.push(tape.broadcast_to(sigma, &[count, n])?);
                }
            }
            let scale = tape.concat_last(&parts)?;
            let eps = tape.constant(Array::new(
                vec![count, p],
                standard_normals(rng, count * p),
            )?);
            tape.mul(eps, scale)
        }
        PriorParams::Flow(f) => {
            let psi = psi_var(tape, prior, psi)?;
            let mut offset = 0;
            let mut parts = Vec::with_capacity(layers.len());
            for (l, fl) in layers.iter().zip(&f.layers) {
                parts.push(flow_layer_on_tape(
                    tape,
                    psi,
                    &mut offset,
                    l,
                    fl,
                    count,
                    rng,
                )?);
            }
            tape.concat_last(&parts)
        }
    }
}

fn flow_layer_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    psi: Var,
    offset: &mut usize,
    layer: &LayerLayout,
    flows: &FlowLayer,
    count: usize,
    rng: &mut R,
) -> Result<Var> {
    let d = layer.len();
    let mut take = |tape: &mut Tape, n: usize| {
        let v = tape.slice_last(psi, *offset, n);
        *offset += n;
        v
    };
    let log_std = take(tape, d)?;
    let std = tape.exp(log_std)?;
    let eps = tape.constant(Array::new(
        vec![count, d],
        standard_normals(rng, count * d),
    )?);
    let mut z = tape.mul(eps, std)?;
    for flow in &flows.flows {
        let u = take(tape, d)?;
        let theta = take(tape, d)?;
        let b = take(tape, 1)?;
        let u_hat = if dot(&flow.theta, &flow.theta) == 0.0 {
            u
        } else {
            let prod = tape.mul(u, theta)?;
            let ut = tape.sum(prod)?;
            let shifted = tape.offset(ut, FLOW_SHIFT)?;
            let m = tape.softplus(shifted)?;
            let m = tape.offset(m, -1.0)?;
            let num = tape.sub(m, ut)?;
            let sq = tape.square(theta)?;
            let tt = tape.sum(sq)?;
            let coef = tape.div(num, tt)?;
            let shift = tape.mul(coef, theta)?;
            tape.add(u, shift)?
        };
        let theta_col = tape.reshape(theta, &[d, 1])?;
        let a = tape.matmul(z, theta_col)?;
        let a = tape.add(a, b)?;
        let h = tape.tanh(a)?;
        let step = tape.mul(h, u_hat)?;
        z = tape.add(z, step)?;
    }
    Ok(z)
}

/// One parameter vector drawn from `prior` (values only).
pub fn sample_reparameterized<R: Rng + ?Sized>(
    prior: &PriorParams,
    spec: &NetworkSpec,
    rng: &mut R,
) -> Result<FlatParams> {
    let mut tape = Tape::new();
    let w = sample_on_tape(&mut tape, prior, None, spec, 1, rng)?;
    Ok(FlatParams(tape.value(w).data().to_vec()))
}

/// A draw from a flow prior together with its log density, accumulated
/// along the forward pass from the cached intermediate points.
pub fn sample_flow_with_log_density<R: Rng + ?Sized>(
    prior: &FlowPriorParams,
    spec: &NetworkSpec,
    rng: &mut R,
) -> Result<(FlatParams, f64)> {
    PriorParams::Flow(prior.clone()).validate(spec)?;
    let mut w = Vec::with_capacity(spec.param_count());
    let mut logp = 0.0;
    for fl in &prior.layers {
        let mut z: Vec<f64> = fl
            .log_std
            .iter()
            .map(|s| s.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        logp += base_log_density(&fl.log_std, &z);
        for flow in &fl.flows {
            let (next, ld) = flow.forward(&z)?;
            logp -= ld;
            z = next;
        }
        w.extend(z);
    }
    Ok((FlatParams(w), logp))
}

/// `log N(x; 0, 1)` summed, exposed for density comparisons.
pub fn standard_normal_log_density(x: &[f64]) -> f64 {
    x.iter().map(|v| -0.5 * (LN_2PI + v * v)).sum()
}
