//! Experiment configuration and the staged run: ingest, fit-prior, sample,
//! evaluate. Artifacts go to one output directory.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bnn::{self, Activation, FlatParams, NetworkSpec};
use crate::data::{
    ingest_csv, make_banana_2d, make_synthetic_1d, split_indices, synthetic_1d_gap, Dataset,
    SplitConfig, Standardizer,
};
use crate::diff::Array;
use crate::error::{invalid, Error, Result};
use crate::eval::{predictive_posterior, Likelihood, PredictiveSummary};
use crate::gp::GpTarget;
use crate::priors::{PriorFamily, PriorParams};
use crate::sghmc::{self, r_hat, run_bnn_chains, SampleSidecar, SghmcConfig};
use crate::tuner::{fit_prior, write_trace, Bounds, TunerConfig};

/// Where the data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        target_column: String,
        #[serde(default)]
        classification: bool,
    },
    /// 64 points on `[−10, 10]` with the middle third removed.
    Synthetic1d,
    /// Two-moons classification data with `n` points.
    Banana { n: usize },
}

impl DataSource {
    pub fn is_classification(&self) -> bool {
        match self {
            Self::Csv { classification, .. } => *classification,
            Self::Synthetic1d => false,
            Self::Banana { .. } => true,
        }
    }

    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            Self::Csv {
                path,
                target_column,
                classification,
            } => ingest_csv(path, target_column, *classification),
            Self::Synthetic1d => make_synthetic_1d(seed),
            Self::Banana { n } => make_banana_2d(seed, *n),
        }
    }
}

/// Hidden layer widths and activation; input and output widths follow
/// from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

/// Evenly spaced 1-D inputs at which predictions are also dumped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn inputs(&self) -> Result<Array> {
        if self.points < 2 || !(self.lo < self.hi) {
            return invalid("grid needs lo < hi and at least two points");
        }
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        let xs = (0..self.points)
            .map(|i| self.lo + i as f64 * step)
            .collect();
        Array::matrix(self.points, 1, xs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Every random choice in the run is derived from this value. The seed
    /// fields of `tuner` and `sampler` are replaced by derived seeds.
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    /// Standardize inputs (and regression targets) with training statistics.
    pub standardize: bool,
    pub network: NetworkConfig,
    pub prior: PriorFamily,
    pub target: GpTarget,
    #[serde(default)]
    pub tuner: TunerConfig,
    #[serde(default)]
    pub sampler: SghmcConfig,
    pub likelihood: Likelihood,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

const SEED_DATA: u64 = 1;
const SEED_SPLIT: u64 = 2;
const SEED_PRIOR: u64 = 3;
const SEED_TUNER: u64 = 4;
const SEED_SAMPLER: u64 = 5;

impl ExperimentConfig {
    /// Loads a config; relative CSV paths resolve against the config's
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&fs::read_to_string(path)?)?;
        if let DataSource::Csv { path: p, .. } = &mut cfg.data {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.tuner.validate()?;
        self.sampler.validate()?;
        self.likelihood.validate()?;
        if self.network.hidden.contains(&0) {
            return invalid("hidden layer widths must be >= 1");
        }
        if self.likelihood.is_classification() != self.data.is_classification() {
            return invalid("categorical likelihood goes with classification data and vice versa");
        }
        if let DataSource::Csv { path, .. } = &self.data {
            if !path.is_file() {
                return invalid(format!("data file {} does not exist", path.display()));
            }
        }
        if let Some(g) = &self.grid {
            g.inputs()?;
        }
        Ok(())
    }

    /// Seed of one stage, derived from the top-level seed.
    pub fn stage_seed(&self, tag: u64) -> u64 {
        sghmc::chain_seed(self.seed, tag as usize)
    }

    /// SHA-256 of the config's compact JSON, ignoring the output directory.
    pub fn hash(&self) -> Result<String> {
        let canonical = Self {
            output_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    FitPrior,
    Sample,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Ingest,
        Stage::FitPrior,
        Stage::Sample,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::FitPrior => "fit-prior",
            Stage::Sample => "sample",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A failure tagged with the stage it happened in.
#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// Wrapper that stamps a JSON artifact with its run's identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorArtifact {
    pub prior: PriorParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitArtifact {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub standardizer: Standardizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplesArtifact {
    pub samples: SampleSidecar,
    pub hyper_names: Vec<String>,
}

/// One entry of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    /// `None` when the value is not finite.
    pub value: Option<f64>,
    pub std_error: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

/// Index of a run's artifacts, rewritten after every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub completed_stages: Vec<Stage>,
    pub artifacts: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";
pub const SPLIT: &str = "split.json";
pub const PRIOR: &str = "prior.json";
pub const WASSERSTEIN_TRACE: &str = "wasserstein_trace.csv";
pub const SAMPLES_BIN: &str = "samples.bin";
pub const SAMPLES_JSON: &str = "samples.json";
pub const METRICS: &str = "metrics.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const GRID_PREDICTIONS: &str = "grid_predictions.csv";

pub fn chain_trace_name(chain: usize) -> String {
    format!("chain_{chain}_trace.csv")
}

/// Everything a finished (or resumed) run produced in memory.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub manifest: Manifest,
    pub metrics: Vec<MetricRecord>,
    pub test_summary: Option<PredictiveSummary>,
    pub grid_summary: Option<PredictiveSummary>,
}

struct Prepared {
    spec: NetworkSpec,
    train: Dataset,
    test: Dataset,
    standardizer: Standardizer,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    manifest: Manifest,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, name: &str) {
        if !self.manifest.artifacts.iter().any(|a| a == name) {
            self.manifest.artifacts.push(name.to_string());
        }
    }

    fn stamp<T>(&self, body: T) -> Stamped<T> {
        Stamped {
            config_hash: self.manifest.config_hash.clone(),
            seed: self.cfg.seed,
            body,
        }
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        self.record(name);
        Ok(())
    }

    fn read_stamped<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let file = File::open(self.path(name))?;
        let s: Stamped<T> = serde_json::from_reader(BufReader::new(file))?;
        if s.config_hash != self.manifest.config_hash || s.seed != self.cfg.seed {
            return invalid(format!(
                "{name} belongs to a different configuration or seed"
            ));
        }
        Ok(s.body)
    }

    fn finish_stage(&mut self, stage: Stage) -> Result<()> {
        if !self.manifest.completed_stages.contains(&stage) {
            self.manifest.completed_stages.push(stage);
        }
        let m = self.manifest.clone();
        self.write_json(MANIFEST, &m)
    }

    fn ingest(&mut self) -> Result<Prepared> {
        let cfg = self.cfg;
        let data = cfg.data.load(cfg.stage_seed(SEED_DATA))?;
        let split = split_indices(data.len(), &cfg.split, cfg.stage_seed(SEED_SPLIT))?;
        let train_raw = data.subset(&split.train)?;
        let standardizer = if cfg.standardize {
            Standardizer::fit(&train_raw)
        } else {
            Standardizer::identity(data.input_dim())
        };
        let outputs = if data.classification {
            data.num_classes()?
        } else {
            1
        };
        let mut widths = vec![data.input_dim()];
        widths.extend(&cfg.network.hidden);
        widths.push(outputs);
        let spec = NetworkSpec::new(widths, cfg.network.activation)?;
        if let Some(g) = &cfg.grid {
            if data.input_dim() != 1 {
                return invalid("prediction grids need one-dimensional inputs");
            }
            g.inputs()?;
        }
        cfg.target.validate(data.input_dim())?;
        let split = SplitArtifact {
            train: split.train,
            validation: split.validation,
            test: split.test,
            standardizer: standardizer.clone(),
        };
        let stamped = self.stamp(split);
        self.write_json(SPLIT, &stamped)?;
        Ok(Prepared {
            spec,
            train: standardizer.transform(&train_raw)?,
            test: data.subset(&stamped.body.test)?,
            standardizer,
        })
    }

    fn fit_prior(&mut self, p: &Prepared) -> Result<PriorParams> {
        let cfg = self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(SEED_PRIOR));
        let initial = PriorParams::initial(cfg.prior, &p.spec, &mut rng);
        let prior = if initial.is_tunable() {
            let tcfg = TunerConfig {
                seed: cfg.stage_seed(SEED_TUNER),
                ..cfg.tuner.clone()
            };
            let bounds = Bounds::of_rows(&p.train.x)?;
            let res = fit_prior(&p.spec, &initial, &cfg.target, &tcfg, &p.train.x, &bounds)?;
            write_trace(
                &res.trace,
                BufWriter::new(File::create(self.path(WASSERSTEIN_TRACE))?),
            )?;
            self.record(WASSERSTEIN_TRACE);
            if let Some(why) = res.aborted {
                let stamped = self.stamp(PriorArtifact { prior: res.prior });
                self.write_json(PRIOR, &stamped)?;
                return Err(Error::Divergence(why));
            }
            res.prior
        } else {
            initial
        };
        let stamped = self.stamp(PriorArtifact {
            prior: prior.clone(),
        });
        self.write_json(PRIOR, &stamped)?;
        Ok(prior)
    }

    fn sample(&mut self, p: &Prepared, prior: &PriorParams) -> Result<Vec<Vec<FlatParams>>> {
        let cfg = self.cfg;
        let scfg = SghmcConfig {
            seed: cfg.stage_seed(SEED_SAMPLER),
            ..cfg.sampler.clone()
        };
        let res = run_bnn_chains(
            &p.spec,
            prior,
            &cfg.likelihood,
            &p.train.x,
            &p.train.y,
            &scfg,
        )?;
        for (i, chain) in res.chains.iter().enumerate() {
            let name = chain_trace_name(i);
            sghmc::write_trace_csv(
                chain,
                &res.hyper_names,
                BufWriter::new(File::create(self.path(&name))?),
            )?;
            self.record(&name);
        }
        let side = sghmc::write_samples(
            &res,
            &p.spec,
            BufWriter::new(File::create(self.path(SAMPLES_BIN))?),
        )?;
        self.record(SAMPLES_BIN);
        let stamped = self.stamp(SamplesArtifact {
            samples: side,
            hyper_names: res.hyper_names.clone(),
        });
        self.write_json(SAMPLES_JSON, &stamped)?;
        res.check()?;
        Ok(res.chains.into_iter().map(|c| c.samples).collect())
    }

    fn load_samples(&self) -> Result<Vec<Vec<FlatParams>>> {
        let art: SamplesArtifact = self.read_stamped(SAMPLES_JSON)?;
        let file = File::open(self.path(SAMPLES_BIN))?;
        sghmc::read_samples(&art.samples, BufReader::new(file))
    }

    fn evaluate(
        &mut self,
        p: &Prepared,
        chains: &[Vec<FlatParams>],
    ) -> Result<(
        Vec<MetricRecord>,
        Option<PredictiveSummary>,
        Option<PredictiveSummary>,
    )> {
        let cfg = self.cfg;
        let all: Vec<FlatParams> = chains.iter().flatten().cloned().collect();
        if all.is_empty() {
            return invalid("no posterior samples to evaluate");
        }
        let scaling = (cfg.standardize && !cfg.likelihood.is_classification())
            .then(|| p.standardizer.output_scaling());
        let hash = self.manifest.config_hash.clone();
        let mut metrics = Vec::new();
        let mut push = |metric: &str, value: f64, std_error: Option<f64>| {
            metrics.push(MetricRecord {
                metric: metric.to_string(),
                value: value.is_finite().then_some(value),
                std_error,
                config_hash: hash.clone(),
                seed: cfg.seed,
            })
        };
        push("num_samples", all.len() as f64, None);

        let test_summary = if p.test.is_empty() {
            None
        } else {
            let x = p.standardizer.transform_x(&p.test.x)?;
            let s = predictive_posterior(
                &all,
                &p.spec,
                &x,
                &cfg.likelihood,
                Some(&p.test.y),
                scaling.as_ref(),
            )?;
            let m = s.metrics.clone().expect("targets were supplied");
            push("test_nll", m.nll, Some(m.nll_std_error));
            if let Some(r) = m.rmse {
                push("test_rmse", r, None);
            }
            if let Some(a) = m.accuracy {
                push("test_accuracy", a, None);
            }
            write_predictions(&p.test.x, &s, &cfg.likelihood, self.path(PREDICTIONS))?;
            self.record(PREDICTIONS);
            Some(s)
        };

        let grid_x = cfg.grid.as_ref().map(GridSpec::inputs).transpose()?;
        let grid_summary = match &grid_x {
            None => None,
            Some(gx) => {
                let x = p.standardizer.transform_x(gx)?;
                let s = predictive_posterior(
                    &all,
                    &p.spec,
                    &x,
                    &cfg.likelihood,
                    None,
                    scaling.as_ref(),
                )?;
                write_predictions(gx, &s, &cfg.likelihood, self.path(GRID_PREDICTIONS))?;
                self.record(GRID_PREDICTIONS);
                if matches!(cfg.data, DataSource::Synthetic1d) {
                    let (lo, hi) = synthetic_1d_gap();
                    let stds: Vec<f64> = (0..gx.rows())
                        .filter(|&i| lo < gx.at(i, 0) && gx.at(i, 0) < hi)
                        .map(|i| s.variance.row(i).iter().sum::<f64>().sqrt())
                        .collect();
                    if !stds.is_empty() {
                        push(
                            "gap_mean_predictive_std",
                            stds.iter().sum::<f64>() / stds.len() as f64,
                            None,
                        );
                    }
                }
                Some(s)
            }
        };

        // Convergence of the predictive: R-hat of the first network output at
        // every monitored input, worst case reported.
        let monitor = match &grid_x {
            Some(gx) => Some(p.standardizer.transform_x(gx)?),
            None if !p.test.is_empty() => Some(p.standardizer.transform_x(&p.test.x)?),
            None => None,
        };
        let n = chains.first().map_or(0, Vec::len);
        if let Some(mx) = monitor {
            if chains.len() >= 2 && n >= 10 && chains.iter().all(|c| c.len() == n) {
                let outs: Vec<Array> = chains
                    .iter()
                    .map(|c| bnn::forward_many(&p.spec, c, &mx))
                    .collect::<Result<_>>()?;
                let (b, c) = (mx.rows(), p.spec.output_dim());
                let mut worst = 1.0f64;
                for i in 0..b {
                    let traces: Vec<Vec<f64>> = outs
                        .iter()
                        .map(|o| (0..n).map(|s| o.data()[(s * b + i) * c]).collect())
                        .collect();
                    worst = worst.max(r_hat(&traces)?);
                }
                push("r_hat_max", worst, None);
            }
        }
        self.write_json(METRICS, &metrics)?;
        Ok((metrics, test_summary, grid_summary))
    }
}

/// Prediction dump: inputs, then `mean,variance` (regression) or one
/// probability column per class.
fn write_predictions(
    x: &Array,
    s: &PredictiveSummary,
    lik: &Likelihood,
    path: PathBuf,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let d = x.cols();
    let c = s.mean.cols();
    let mut header: Vec<String> = if d == 1 {
        vec!["x".into()]
    } else {
        (0..d).map(|k| format!("x{k}")).collect()
    };
    if lik.is_classification() {
        header.extend((0..c).map(|k| format!("p{k}")));
    } else if c == 1 {
        header.extend(["mean".to_string(), "variance".to_string()]);
    } else {
        for k in 0..c {
            header.extend([format!("mean{k}"), format!("variance{k}")]);
        }
    }
    w.write_record(&header)?;
    for i in 0..x.rows() {
        let mut row: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
        for k in 0..c {
            row.push(s.mean.at(i, k).to_string());
            if !lik.is_classification() {
                row.push(s.variance.at(i, k).to_string());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs stages `from..=until`, resuming from artifacts in `out` when `from`
/// is later than ingest. Artifacts written before a failure stay on disk.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    out: &Path,
    from: Stage,
    until: Stage,
) -> std::result::Result<PipelineOutput, PipelineError> {
    let fail = |stage| move |source| PipelineError { stage, source };
    let setup = || -> Result<Manifest> {
        cfg.validate()?;
        if from > until {
            return invalid(format!("cannot run from {from} until {until}"));
        }
        fs::create_dir_all(out)?;
        let config_hash = cfg.hash()?;
        let manifest_path = out.join(MANIFEST);
        if from > Stage::Ingest && manifest_path.is_file() {
            let m: Manifest = serde_json::from_reader(BufReader::new(File::open(&manifest_path)?))?;
            if m.config_hash == config_hash && m.seed == cfg.seed {
                return Ok(Manifest {
                    completed_stages: m
                        .completed_stages
                        .into_iter()
                        .filter(|s| *s < from)
                        .collect(),
                    ..m
                });
            }
            return invalid("existing artifacts belong to a different configuration or seed");
        }
        Ok(Manifest {
            name: cfg.name.clone(),
            config_hash,
            seed: cfg.seed,
            completed_stages: Vec::new(),
            artifacts: Vec::new(),
        })
    };
    let manifest = setup().map_err(fail(from))?;
    let mut run = Run { cfg, out, manifest };
    run.write_json(CONFIG, &run.stamp(cfg.clone()))
        .map_err(fail(Stage::Ingest))?;

    let prepared = run.ingest().map_err(fail(Stage::Ingest))?;
    run.finish_stage(Stage::Ingest)
        .map_err(fail(Stage::Ingest))?;
    let done = |run: &Run| PipelineOutput {
        manifest: run.manifest.clone(),
        metrics: Vec::new(),
        test_summary: None,
        grid_summary: None,
    };
    if until == Stage::Ingest {
        return Ok(done(&run));
    }

    let prior = if from <= Stage::FitPrior {
        let st = Stage::FitPrior;
        let p = run.fit_prior(&prepared).map_err(fail(st))?;
        run.finish_stage(st).map_err(fail(st))?;
        p
    } else if from == Stage::Sample {
        run.read_stamped::<PriorArtifact>(PRIOR)
            .map_err(fail(Stage::Sample))?
            .prior
    } else {
        PriorParams::default()
    };
    if until == Stage::FitPrior {
        return Ok(done(&run));
    }

    let chains = if from <= Stage::Sample {
        let st = Stage::Sample;
        let c = run.sample(&prepared, &prior).map_err(fail(st))?;
        run.finish_stage(st).map_err(fail(st))?;
        c
    } else {
        run.load_samples().map_err(fail(Stage::Evaluate))?
    };
    if until == Stage::Sample {
        return Ok(done(&run));
    }

    let st = Stage::Evaluate;
    let (metrics, test_summary, grid_summary) =
        run.evaluate(&prepared, &chains).map_err(fail(st))?;
    run.finish_stage(st).map_err(fail(st))?;
    Ok(PipelineOutput {
        manifest: run.manifest,
        metrics,
        test_summary,
        grid_summary,
    })
}

/// Reference 1-D configuration: synthetic gap data, a three-hidden-layer
/// tanh network and an RBF target.
pub fn synthetic_1d_config(name: &str, prior: PriorFamily, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        seed,
        data: DataSource::Synthetic1d,
        split: SplitConfig {
            train: 1.0,
            validation: 0.0,
        },
        standardize: false,
        network: NetworkConfig {
            hidden: vec![50, 50, 50],
            activation: Activation::Tanh,
        },
        prior,
        target: GpTarget::Fixed(crate::gp::KernelSpec::rbf(1.0, 0.6)),
        tuner: TunerConfig::default(),
        sampler: SghmcConfig::default(),
        likelihood: Likelihood::Gaussian {
            noise_variance: crate::data::SYNTHETIC_1D_NOISE,
        },
        grid: Some(GridSpec {
            lo: -10.0,
            hi: 10.0,
            points: 100,
        }),
        output_dir: None,
    }
}
