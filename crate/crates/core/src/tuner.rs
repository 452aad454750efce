//! Fitting a weight-space prior to a GP functional prior by minimizing an
//! estimate of the 1-Wasserstein distance between the two function-space
//! distributions on a random measurement set.
//!
//! The dual form `W₁ = sup_φ E_gp[φ(f)] − E_nn[φ(f)]` over 1-Lipschitz `φ`
//! is estimated with a small MLP critic kept near 1-Lipschitz by a gradient
//! penalty. Each outer step trains the critic for `n_lipschitz` steps on
//! fresh function batches, then takes one step on the prior parameters.

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bnn::{self, NetworkSpec};
use crate::diff::{Array, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::gp::{FunctionBatch, GpTarget};
use crate::optim::{clip_global_norm, Adagrad, RmsProp};
use crate::priors::PriorParams;

/// Units in each of the critic's two hidden layers.
pub const CRITIC_HIDDEN: usize = 200;

/// Global gradient-norm cap applied before both optimizers.
pub const GRAD_CLIP: f64 = 100.0;

/// Penalty value beyond which the critic is considered diverged.
pub const PENALTY_LIMIT: f64 = 1e6;

/// Axis-aligned input box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    /// Bounding box of the rows of `x`.
    pub fn of_rows(x: &Array) -> Result<Self> {
        if x.rows() == 0 {
            return invalid("bounding box of an empty set");
        }
        let d = x.cols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..x.rows() {
            for (j, &v) in x.row(i).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return invalid(format!(
                "bounds need matching non-empty lo/hi, got {} and {}",
                self.lo.len(),
                self.hi.len()
            ));
        }
        for (l, h) in self.lo.iter().zip(&self.hi) {
            if !(l < h) || !l.is_finite() || !h.is_finite() {
                return invalid(format!("invalid bounds [{l}, {h}]"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| rng.gen_range(*l..*h))
            .collect()
    }
}

/// Measurement inputs, with which rows came from the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub points: Array,
    pub from_train: Vec<bool>,
}

/// `round(fraction·n)` rows from `train_x` (without replacement while
/// possible), the rest uniform in `bounds`.
pub fn sample_measurement_set<R: Rng + ?Sized>(
    train_x: &Array,
    bounds: &Bounds,
    n: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<MeasurementSet> {
    bounds.validate()?;
    if n == 0 {
        return invalid("measurement set size must be >= 1");
    }
    if !(0.0..=1.0).contains(&fraction) {
        return invalid(format!("train fraction {fraction} outside [0, 1]"));
    }
    let n_train = (fraction * n as f64).round() as usize;
    let d = bounds.dim();
    if n_train > 0 {
        if train_x.rows() == 0 || train_x.is_empty() {
            return invalid("measurement set needs training inputs when fraction > 0");
        }
        if train_x.cols() != d {
            return invalid(format!(
                "training inputs have {} columns, bounds have {d}",
                train_x.cols()
            ));
        }
    }
    let mut data = Vec::with_capacity(n * d);
    let mut from_train = Vec::with_capacity(n);
    if n_train > 0 {
        let rows: Vec<usize> = if n_train <= train_x.rows() {
            index::sample(rng, train_x.rows(), n_train).into_vec()
        } else {
            (0..n_train)
                .map(|_| rng.gen_range(0..train_x.rows()))
                .collect()
        };
        for r in rows {
            data.extend_from_slice(train_x.row(r));
            from_train.push(true);
        }
    }
    for _ in n_train..n {
        data.extend(bounds.sample(rng));
        from_train.push(false);
    }
    Ok(MeasurementSet {
        points: Array::matrix(n, d, data)?,
        from_train,
    })
}

/// MLP `ℝᴹ → ℝ` with two softplus hidden layers of [`CRITIC_HIDDEN`] units.
///
/// Parameters are stored flat as `[W₁, b₁, W₂, b₂, W₃, b₃]`, each `W`
/// row-major `fan_in × fan_out`; the layers use the standard (not NTK)
/// parameterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub input_dim: usize,
    pub params: Vec<f64>,
}

impl Critic {
    fn shapes(input_dim: usize) -> [(usize, usize); 3] {
        [
            (input_dim, CRITIC_HIDDEN),
            (CRITIC_HIDDEN, CRITIC_HIDDEN),
            (CRITIC_HIDDEN, 1),
        ]
    }

    pub fn param_count(input_dim: usize) -> usize {
        Self::shapes(input_dim).iter().map(|(i, o)| i * o + o).sum()
    }

    /// Hidden weights and biases uniform in `±1/√fan_in`; the output layer
    /// starts at zero.
    ///
    /// A zero output layer makes `φ` constant, where the penalty has a zero
    /// (sub)gradient, so the first updates follow the objective alone. With a
    /// random output layer the critic's initial orientation is arbitrary, and
    /// for one-dimensional inputs the penalty's barrier at zero slope can pin
    /// it to the wrong sign.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Result<Self> {
        if input_dim == 0 {
            return invalid("critic input dimension must be >= 1");
        }
        let mut params = Vec::with_capacity(Self::param_count(input_dim));
        for (l, (fan_in, fan_out)) in Self::shapes(input_dim).into_iter().enumerate() {
            let n = fan_in * fan_out + fan_out;
            if l == 2 {
                params.extend(std::iter::repeat_n(0.0, n));
            } else {
                let a = 1.0 / (fan_in as f64).sqrt();
                params.extend((0..n).map(|_| rng.gen_range(-a..a)));
            }
        }
        Ok(Self { input_dim, params })
    }

    /// Puts the parameters on `tape`, as named parameters when `trainable`.
    fn record(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        let mut vars = Vec::with_capacity(6);
        let mut offset = 0;
        for (l, (fan_in, fan_out)) in Self::shapes(self.input_dim).into_iter().enumerate() {
            for (name, shape) in [("w", vec![fan_in, fan_out]), ("b", vec![fan_out])] {
                let n: usize = shape.iter().product();
                let value = Array::new(shape, self.params[offset..offset + n].to_vec())?;
                offset += n;
                vars.push(if trainable {
                    tape.param(&format!("critic.{name}{l}"), value)?
                } else {
                    tape.constant(value)
                });
            }
        }
        Ok(vars)
    }

    /// `φ` on the rows of `f` (`[N, M]`): returns `[N, 1]`.
    fn apply(vars: &[Var], tape: &mut Tape, f: Var) -> Result<Var> {
        let mut h = f;
        for l in 0..3 {
            let z = tape.matmul(h, vars[2 * l])?;
            let z = tape.add(z, vars[2 * l + 1])?;
            h = if l < 2 { tape.softplus(z)? } else { z };
        }
        Ok(h)
    }

    /// `φ(f)` for every row of `f`.
    pub fn scores(&self, f: &Array) -> Result<Vec<f64>> {
        self.check_input(f)?;
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false)?;
        let x = tape.constant(f.clone());
        let out = Self::apply(&vars, &mut tape, x)?;
        Ok(tape.value(out).data().to_vec())
    }

    fn check_input(&self, f: &Array) -> Result<()> {
        if f.rank() != 2 || f.cols() != self.input_dim {
            return Err(Error::Shape {
                node: 0,
                op: "critic",
                detail: format!(
                    "function batch {:?} for critic with input {}",
                    f.shape(),
                    self.input_dim
                ),
            });
        }
        Ok(())
    }
}

/// Value and critic-gradient of the penalized critic loss.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticObjective {
    /// `L = mean φ(f_gp) − mean φ(f_nn)`, the quantity the critic ascends.
    pub objective: f64,
    /// `λ·mean (‖∇φ(f̂)‖ − 1)²`.
    pub penalty: f64,
    /// `−L + penalty`, minimized.
    pub loss: f64,
    /// Gradient of `loss` in the critic parameters (flat layout).
    pub grad: Vec<f64>,
}

fn check_pair(gp: &Array, nn: &Array) -> Result<()> {
    if gp.shape() != nn.shape() || gp.rank() != 2 {
        return Err(Error::Shape {
            node: 0,
            op: "critic_objective",
            detail: format!("batches {:?} and {:?}", gp.shape(), nn.shape()),
        });
    }
    Ok(())
}

fn check_batches(gp: &FunctionBatch, nn: &FunctionBatch) -> Result<()> {
    check_pair(&gp.values, &nn.values)?;
    if gp.measurement_points != nn.measurement_points {
        return invalid("function batches are evaluated at different measurement points");
    }
    Ok(())
}

/// Records `−L + λ·penalty` for an arbitrary critic `apply` and returns
/// `(loss, L, λ·penalty)` variables. `ε` is drawn per row.
fn record_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    apply: &dyn Fn(&mut Tape, Var) -> Result<Var>,
    gp: &Array,
    nn: &Array,
    lambda: f64,
    rng: &mut R,
) -> Result<(Var, Var, Var)> {
    check_pair(gp, nn)?;
    let (rows, cols) = (gp.rows(), gp.cols());
    let mut mix = Vec::with_capacity(gp.len());
    for i in 0..rows {
        let e: f64 = rng.gen();
        mix.extend(
            nn.row(i)
                .iter()
                .zip(gp.row(i))
                .map(|(a, b)| e * a + (1.0 - e) * b),
        );
    }
    let fgp = tape.constant(gp.clone());
    let fnn = tape.constant(nn.clone());
    let fhat = tape.param("critic.interpolate", Array::matrix(rows, cols, mix)?)?;
    let sgp = apply(tape, fgp)?;
    let snn = apply(tape, fnn)?;
    let mgp = tape.mean(sgp)?;
    let mnn = tape.mean(snn)?;
    let objective = tape.sub(mgp, mnn)?;
    let shat = apply(tape, fhat)?;
    let total = tape.sum(shat)?;
    let pen = tape.gradient_norm_penalty(total, fhat)?;
    let pen = tape.scale(pen, lambda)?;
    let neg = tape.neg(objective)?;
    let loss = tape.add(neg, pen)?;
    Ok((loss, objective, pen))
}

fn critic_objective_arrays<R: Rng + ?Sized>(
    critic: &Critic,
    gp: &Array,
    nn: &Array,
    lambda: f64,
    rng: &mut R,
) -> Result<CriticObjective> {
    critic.check_input(gp)?;
    let mut tape = Tape::new();
    let vars = critic.record(&mut tape, true)?;
    let apply = |t: &mut Tape, f: Var| Critic::apply(&vars, t, f);
    let (loss, objective, penalty) = record_objective(&mut tape, &apply, gp, nn, lambda, rng)?;
    let grads = tape.grad(loss, &vars)?;
    let mut grad = Vec::with_capacity(critic.params.len());
    for g in grads {
        grad.extend_from_slice(tape.value(g).data());
    }
    Ok(CriticObjective {
        objective: tape.scalar(objective),
        penalty: tape.scalar(penalty),
        loss: tape.scalar(loss),
        grad,
    })
}

/// Penalized critic loss on a pair of function batches.
pub fn critic_objective<R: Rng + ?Sized>(
    critic: &Critic,
    gp: &FunctionBatch,
    nn: &FunctionBatch,
    lambda: f64,
    rng: &mut R,
) -> Result<CriticObjective> {
    check_batches(gp, nn)?;
    critic_objective_arrays(critic, &gp.values, &nn.values, lambda, rng)
}

/// `W̃₁ = N⁻¹ Σᵢ φ(f_gp⁽ⁱ⁾) − φ(f_nn⁽ⁱ⁾)`.
pub fn wasserstein_estimate(
    critic: &Critic,
    gp: &FunctionBatch,
    nn: &FunctionBatch,
) -> Result<f64> {
    check_batches(gp, nn)?;
    wasserstein_arrays(critic, &gp.values, &nn.values)
}

fn wasserstein_arrays(critic: &Critic, gp: &Array, nn: &Array) -> Result<f64> {
    check_pair(gp, nn)?;
    let a = critic.scores(gp)?;
    let b = critic.scores(nn)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).sum::<f64>() / a.len() as f64)
}

/// Functions from `target` laid out like network outputs: `outputs`
/// independent draws per row, interleaved point-major to `[count, M·C]`.
pub fn target_functions<R: Rng + ?Sized>(
    target: &GpTarget,
    points: &Array,
    count: usize,
    outputs: usize,
    rng: &mut R,
) -> Result<Array> {
    let raw = target.sample(points, count * outputs, rng)?.values;
    if outputs == 1 {
        return Ok(raw);
    }
    let m = points.rows();
    let mut data = vec![0.0; count * m * outputs];
    for i in 0..count {
        for c in 0..outputs {
            let src = raw.row(i * outputs + c);
            for (p, v) in src.iter().enumerate() {
                data[i * m * outputs + p * outputs + c] = *v;
            }
        }
    }
    Array::matrix(count, m * outputs, data)
}

/// The `ψ`-dependent part of `W̃₁` for a fixed critic, `−mean φ(f_nn(ψ))`,
/// with its gradient in `ψ`.
pub fn prior_objective<R: Rng + ?Sized>(
    critic: &Critic,
    spec: &NetworkSpec,
    prior: &PriorParams,
    points: &Array,
    count: usize,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if !prior.is_tunable() {
        return invalid("prior family has no tunable parameters");
    }
    let mut tape = Tape::new();
    let psi = tape.param("psi", Array::vector(prior.psi()))?;
    let x = tape.constant(points.clone());
    let f = bnn::sample_functions_on_tape(&mut tape, spec, prior, Some(psi), x, count, rng)?;
    critic.check_input(tape.value(f))?;
    let vars = critic.record(&mut tape, false)?;
    let s = Critic::apply(&vars, &mut tape, f)?;
    let m = tape.mean(s)?;
    let loss = tape.neg(m)?;
    let g = tape.grad(loss, &[psi])?[0];
    Ok((tape.scalar(loss), tape.value(g).data().to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TunerConfig {
    /// `N_s`: functions per batch on each side.
    pub num_samples: usize,
    /// `N_M`: measurement points per outer step.
    pub num_measurement: usize,
    /// Critic steps per outer step.
    pub n_lipschitz: usize,
    /// Gradient-penalty coefficient `λ`.
    pub penalty: f64,
    pub critic_lr: f64,
    pub prior_lr: f64,
    pub outer_steps: usize,
    /// Share of measurement points drawn from the training inputs.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            num_samples: 128,
            num_measurement: 100,
            n_lipschitz: 200,
            penalty: 10.0,
            critic_lr: 0.02,
            prior_lr: 0.05,
            outer_steps: 200,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_samples", self.num_samples),
            ("num_measurement", self.num_measurement),
            ("n_lipschitz", self.n_lipschitz),
            ("outer_steps", self.outer_steps),
        ];
        for (name, v) in counts {
            if v == 0 {
                return invalid(format!("{name} must be >= 1"));
            }
        }
        let rates = [
            ("penalty", self.penalty),
            ("critic_lr", self.critic_lr),
            ("prior_lr", self.prior_lr),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return invalid(format!(
                "train_fraction {} outside [0, 1]",
                self.train_fraction
            ));
        }
        Ok(())
    }
}

/// One row of the tuning trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer_step: usize,
    pub wasserstein_estimate: f64,
    /// Mean of `λ·penalty` over the step's critic updates.
    pub penalty_mean: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TuneResult {
    /// The last prior whose update produced finite values.
    pub prior: PriorParams,
    pub critic: Critic,
    pub trace: Vec<TraceRow>,
    /// Why tuning stopped early, if it did.
    pub aborted: Option<String>,
}

/// Runs the alternating critic / prior optimization.
///
/// Deterministic given `cfg.seed`. Numerical failures (non-finite losses or
/// a diverging critic) stop the loop and are reported in
/// [`TuneResult::aborted`] together with the trace so far.
pub fn fit_prior(
    spec: &NetworkSpec,
    prior: &PriorParams,
    target: &GpTarget,
    cfg: &TunerConfig,
    train_x: &Array,
    bounds: &Bounds,
) -> Result<TuneResult> {
    cfg.validate()?;
    prior.validate(spec)?;
    if !prior.is_tunable() {
        return invalid(format!(
            "{:?} prior has no tunable parameters",
            prior.family()
        ));
    }
    if bounds.dim() != spec.input_dim() {
        return invalid(format!(
            "bounds have dimension {}, network input is {}",
            bounds.dim(),
            spec.input_dim()
        ));
    }
    target.validate(spec.input_dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let outputs = spec.output_dim();
    let input = cfg.num_measurement * outputs;
    let mut critic = Critic::new(input, &mut rng)?;
    let mut critic_opt = Adagrad::new(cfg.critic_lr, critic.params.len());
    let mut psi = prior.psi();
    let mut prior_opt = RmsProp::new(cfg.prior_lr, psi.len());
    let mut current = prior.clone();
    let mut trace = Vec::with_capacity(cfg.outer_steps);

    let abort = |current: PriorParams, critic: Critic, trace: Vec<TraceRow>, why: String| {
        Ok(TuneResult {
            prior: current,
            critic,
            trace,
            aborted: Some(why),
        })
    };

    for step in 0..cfg.outer_steps {
        let start = Instant::now();
        let ms = sample_measurement_set(
            train_x,
            bounds,
            cfg.num_measurement,
            cfg.train_fraction,
            &mut rng,
        )?;
        let mut penalty_sum = 0.0;
        for _ in 0..cfg.n_lipschitz {
            let gp = target_functions(target, &ms.points, cfg.num_samples, outputs, &mut rng)?;
            let nn = bnn::sample_functions(spec, &current, &ms.points, cfg.num_samples, &mut rng)?;
            let obj = critic_objective_arrays(&critic, &gp, &nn.values, cfg.penalty, &mut rng)?;
            if !obj.loss.is_finite() || obj.grad.iter().any(|g| !g.is_finite()) {
                return abort(
                    current,
                    critic,
                    trace,
                    format!("non-finite critic loss at outer step {step}"),
                );
            }
            if obj.penalty > PENALTY_LIMIT {
                return abort(
                    current,
                    critic,
                    trace,
                    format!(
                        "critic diverged at outer step {step}: penalty {}",
                        obj.penalty
                    ),
                );
            }
            penalty_sum += obj.penalty;
            let mut g = obj.grad;
            clip_global_norm(&mut g, GRAD_CLIP);
            critic_opt.step(&mut critic.params, &g)?;
        }

        let gp = target_functions(target, &ms.points, cfg.num_samples, outputs, &mut rng)?;
        let gp_mean = critic.scores(&gp)?.iter().sum::<f64>() / cfg.num_samples as f64;
        let (nn_term, mut g) = prior_objective(
            &critic,
            spec,
            &current,
            &ms.points,
            cfg.num_samples,
            &mut rng,
        )?;
        let w1 = gp_mean + nn_term;
        if !w1.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return abort(
                current,
                critic,
                trace,
                format!("non-finite distance at outer step {step}"),
            );
        }
        clip_global_norm(&mut g, GRAD_CLIP);
        let mut next = psi.clone();
        prior_opt.step(&mut next, &g)?;
        match current
            .with_psi(&next)
            .and_then(|p| p.validate(spec).map(|_| p))
        {
            Ok(p) => {
                psi = next;
                current = p;
            }
            Err(e) => return abort(current, critic, trace, format!("invalid prior update: {e}")),
        }
        trace.push(TraceRow {
            outer_step: step,
            wasserstein_estimate: w1,
            penalty_mean: penalty_sum / cfg.n_lipschitz as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TuneResult {
        prior: current,
        critic,
        trace,
        aborted: None,
    })
}

/// Trains only the critic between two fixed samplers and returns it with
/// the final estimate on fresh batches. Used to calibrate the estimator.
pub fn train_critic<R, G, N>(
    input_dim: usize,
    mut gp: G,
    mut nn: N,
    steps: usize,
    cfg: &TunerConfig,
    rng: &mut R,
) -> Result<(Critic, f64)>
where
    R: Rng + ?Sized,
    G: FnMut(&mut R) -> Result<Array>,
    N: FnMut(&mut R) -> Result<Array>,
{
    cfg.validate()?;
    let mut critic = Critic::new(input_dim, rng)?;
    let mut opt = Adagrad::new(cfg.critic_lr, critic.params.len());
    for _ in 0..steps {
        let a = gp(rng)?;
        let b = nn(rng)?;
        let obj = critic_objective_arrays(&critic, &a, &b, cfg.penalty, rng)?;
        if !obj.loss.is_finite() {
            return Err(Error::Divergence("non-finite critic loss".into()));
        }
        let mut g = obj.grad;
        clip_global_norm(&mut g, GRAD_CLIP);
        opt.step(&mut critic.params, &g)?;
    }
    let a = gp(rng)?;
    let b = nn(rng)?;
    let w = wasserstein_arrays(&critic, &a, &b)?;
    Ok((critic, w))
}

/// Writes the trace as CSV with a header row.
pub fn write_trace<W: std::io::Write>(trace: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
