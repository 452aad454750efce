use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::bnn::Activation;
use crate::priors::GaussianPriorParams;

fn col(v: &[f64]) -> Array {
    Array::matrix(v.len(), 1, v.to_vec()).unwrap()
}

fn ks_distance(mut a: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    a.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    a.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[test]
fn adaptation_fixed_points() {
    let mut s = ChainState::new(vec![0.0; 2]);
    burn_in_adapt(&mut s, &[3.0, -0.5]);
    // From τ = 1 the first update averages the unit start with ∇².
    assert_eq!(s.v_hat, vec![5.0, 0.625]);
    assert_eq!(s.g, vec![1.5, -0.25]);
    for _ in 0..200 {
        burn_in_adapt(&mut s, &[3.0, -0.5]);
    }
    assert!((s.v_hat[0] - 9.0).abs() < 1e-9 && (s.g[0] - 3.0).abs() < 1e-9);
    assert!((s.v_hat[1] - 0.25).abs() < 1e-9 && (s.g[1] + 0.5).abs() < 1e-9);

    let mut z = ChainState::new(vec![0.0]);
    for k in 1..=5 {
        burn_in_adapt(&mut z, &[0.0]);
        assert_eq!(z.tau[0], 1.0 + k as f64);
        assert!(z.v_hat[0] >= MIN_VARIANCE);
    }
}

#[test]
fn prior_only_gradient_is_parameters_over_temperature() {
    let spec = NetworkSpec::mlp(1, &[3], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w: Vec<f64> = (0..spec.param_count())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let lik = Likelihood::Gaussian {
        noise_variance: 1.0,
    };
    let (mut u, mut g) = potential_gradient(
        &spec,
        &PriorParams::default(),
        None,
        &lik,
        &w,
        &col(&[0.3]),
        &col(&[1.0]),
        0,
    )
    .unwrap();
    apply_temperature(&mut u, &mut g, Some(2.5));
    for (g, w) in g.iter().zip(&w) {
        assert!((g - w / 2.5).abs() < 1e-12);
    }
    let (mut u1, mut g1) = (u, g.clone());
    apply_temperature(&mut u1, &mut g1, Some(1.0));
    assert_eq!(u1.to_bits(), u.to_bits());
    assert_eq!(g1, g);
}

#[test]
fn full_batch_gradient_matches_finite_differences() {
    let spec = NetworkSpec::mlp(2, &[4], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Array::matrix(6, 2, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let y = col(&(0..6)
        .map(|_| rng.sample(StandardNormal))
        .collect::<Vec<f64>>());
    let prior = PriorParams::Gaussian(GaussianPriorParams::uniform(&spec, 1.3, 0.8));
    let lik = Likelihood::Gaussian {
        noise_variance: 0.4,
    };
    let w = init_params(&spec, &mut rng).0;
    let mut pot = BnnPotential::new(
        spec.clone(),
        prior.clone(),
        lik.clone(),
        x.clone(),
        y.clone(),
        100,
    )
    .unwrap();
    let (u, g) = pot.evaluate(&w, &mut rng).unwrap();
    let u_of = |w: &[f64]| {
        potential_gradient(&spec, &prior, None, &lik, w, &x, &y, 6)
            .unwrap()
            .0
    };
    assert!((u - u_of(&w)).abs() < 1e-12);
    for i in 0..w.len() {
        let h = 1e-5;
        let mut p = w.clone();
        p[i] += h;
        let mut m = w.clone();
        m[i] -= h;
        let fd = (u_of(&p) - u_of(&m)) / (2.0 * h);
        assert!(
            (fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()),
            "{i}: {fd} vs {}",
            g[i]
        );
    }
}

#[test]
fn minibatch_gradient_is_unbiased() {
    let spec = NetworkSpec::mlp(1, &[5], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 50;
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| x.sin() + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lik = Likelihood::Gaussian {
        noise_variance: 0.1,
    };
    let prior = PriorParams::default();
    let w = init_params(&spec, &mut rng).0;
    let mut full = BnnPotential::new(
        spec.clone(),
        prior.clone(),
        lik.clone(),
        col(&xs),
        col(&ys),
        n,
    )
    .unwrap();
    let exact = full.evaluate(&w, &mut rng).unwrap().1;
    let mut mb = BnnPotential::new(spec, prior, lik, col(&xs), col(&ys), 7).unwrap();
    let mut mean = vec![0.0; w.len()];
    let draws = 1000;
    for _ in 0..draws {
        let g = mb.evaluate(&w, &mut rng).unwrap().1;
        for (m, g) in mean.iter_mut().zip(g) {
            *m += g / draws as f64;
        }
    }
    let diff: f64 = mean
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff / norm < 0.02, "relative error {}", diff / norm);
}

#[test]
fn noiseless_quadratic_oscillation_decays() {
    // With 2a < ε² the injected noise clamps to zero and the dynamics are a
    // lightly damped oscillator, independent of the generator.
    let (eps, a) = (0.1, 0.001);
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ChainState::new(vec![1.0]);
        let mut energy = Vec::new();
        for _ in 0..20_000 {
            let g = [s.w[0]];
            sghmc_step(&mut s, &g, eps, a, &mut rng).unwrap();
            energy.push(0.5 * s.w[0] * s.w[0] + 0.5 * (s.v[0] / eps).powi(2));
        }
        (s.w[0], energy)
    };
    let (w1, e) = run(1);
    let (w2, _) = run(2);
    assert_eq!(w1.to_bits(), w2.to_bits());
    // One period is 2π/ε ≈ 63 steps; compare period-averaged energy.
    let avg = |r: std::ops::Range<usize>| e[r.clone()].iter().sum::<f64>() / r.len() as f64;
    let mut prev = avg(0..630);
    for k in 1..30 {
        let cur = avg(k * 630..(k + 1) * 630);
        assert!(cur < prev, "window {k}: {cur} >= {prev}");
        prev = cur;
    }
    assert!(prev < 0.5 * avg(0..630));
}

#[test]
fn nonfinite_state_is_an_error() {
    let mut s = ChainState::new(vec![1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sghmc_step(&mut s, &[f64::INFINITY], 0.1, 0.1, &mut rng).is_err());
    assert!(sghmc_step(&mut s, &[1.0, 2.0], 0.1, 0.1, &mut rng).is_err());
}

#[test]
fn standard_normal_samples_pass_ks() {
    let cfg = SghmcConfig {
        step_size: 0.005,
        momentum: 0.01,
        burn_in: 5000,
        thinning: 500,
        samples_per_chain: 10_000,
        chains: 1,
        seed: 3,
        ..SghmcConfig::default()
    };
    let res = run_chains(
        |_, _| Ok((GaussianTarget::new(vec![0.0], vec![1.0])?, vec![1.0])),
        &cfg,
    )
    .unwrap();
    res.check().unwrap();
    let xs: Vec<f64> = res.all().iter().map(|s| s.0[0]).collect();
    assert_eq!(xs.len(), 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let exact: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
    // Two-sample statistic against exact draws, and one-sample against the CDF.
    let mut all: Vec<(f64, bool)> = xs
        .iter()
        .map(|x| (*x, true))
        .chain(exact.iter().map(|x| (*x, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut fa, mut fb, mut d) = (0.0f64, 0.0f64, 0.0f64);
    for (_, from_chain) in all {
        if from_chain {
            fa += 1e-4;
        } else {
            fb += 1e-4;
        }
        d = d.max((fa - fb).abs());
    }
    assert!(d < 0.05, "two-sample KS {d}");
    assert!(ks_distance(xs, normal_cdf) < 0.05);
}

fn correlated_target() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mean = vec![1.0, -0.5];
    let cov = vec![1.0, 0.6, 0.6, 0.8];
    let det = cov[0] * cov[3] - cov[1] * cov[2];
    let prec = vec![cov[3] / det, -cov[1] / det, -cov[2] / det, cov[0] / det];
    (mean, cov, prec)
}

#[test]
fn correlated_gaussian_moments_and_rhat() {
    let (mean, cov, prec) = correlated_target();
    let cfg = SghmcConfig {
        step_size: 0.05,
        momentum: 0.05,
        burn_in: 2000,
        thinning: 100,
        samples_per_chain: 1000,
        chains: 4,
        seed: 11,
        ..SghmcConfig::default()
    };
    let res = run_chains(
        |_, rng| {
            let w0 = vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            Ok((GaussianTarget::new(mean.clone(), prec.clone())?, w0))
        },
        &cfg,
    )
    .unwrap();
    let all = res.all();
    let n = all.len() as f64;
    let m: Vec<f64> = (0..2)
        .map(|i| all.iter().map(|s| s.0[i]).sum::<f64>() / n)
        .collect();
    for i in 0..2 {
        assert!((m[i] - mean[i]).abs() < 0.1, "mean {m:?}");
    }
    let mut c = [0.0; 4];
    for s in &all {
        for i in 0..2 {
            for j in 0..2 {
                c[i * 2 + j] += (s.0[i] - m[i]) * (s.0[j] - m[j]) / n;
            }
        }
    }
    let err: f64 = c
        .iter()
        .zip(&cov)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = cov.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(err / norm < 0.15, "covariance {c:?}");
    for i in 0..2 {
        let r = r_hat(&res.scalar_traces(|s| s.0[i])).unwrap();
        assert!(r < 1.05, "R-hat {r}");
    }
}

#[test]
fn gibbs_conditionals() {
    let spec = NetworkSpec::new(vec![2, 1], Activation::Tanh).unwrap();
    let h = LayerHypers {
        weight: InverseGamma {
            shape: 1.0,
            rate: 1.0,
        },
        bias: InverseGamma {
            shape: 3.0,
            rate: 2.0,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let draws = 100_000;
    let (mut mw, mut mb) = (0.0, 0.0);
    for _ in 0..draws {
        // Weights [1, 1]: IG(2, 2), mean 2. Zero bias: IG(3.5, 2), mean 0.8.
        let v = gibbs_resample_variances(&spec, &[h], &[1.0, 1.0, 0.0], &mut rng).unwrap();
        mw += v[0].weight / draws as f64;
        mb += v[0].bias / draws as f64;
    }
    assert!((mw - 2.0).abs() < 0.03 * 2.0, "{mw}");
    assert!((mb - 0.8).abs() < 0.03 * 0.8, "{mb}");
    assert!(gibbs_resample_variances(&spec, &[], &[0.0; 3], &mut rng).is_err());
}

#[test]
fn gibbs_matches_quadrature_posterior() {
    // One weight w = 0.7 under σ² ~ IG(2, 1.5): compare conditional draws
    // with the CDF of the unnormalized posterior integrated on a grid.
    let (alpha, beta, w) = (2.0, 1.5, 0.7);
    let spec = NetworkSpec::new(vec![1, 1], Activation::Tanh).unwrap();
    let h = LayerHypers {
        weight: InverseGamma {
            shape: alpha,
            rate: beta,
        },
        bias: InverseGamma {
            shape: alpha,
            rate: beta,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| gibbs_resample_variances(&spec, &[h], &[w, 0.0], &mut rng).unwrap()[0].weight)
        .collect();
    let dens = |s: f64| {
        let ig = -(alpha + 1.0) * s.ln() - beta / s;
        let lik = -0.5 * s.ln() - 0.5 * w * w / s;
        (ig + lik).exp()
    };
    // Integrate in log σ² to cover the heavy tail.
    let (lo, hi, k) = (-12.0f64, 14.0f64, 200_000);
    let dx = (hi - lo) / k as f64;
    let mut grid = Vec::with_capacity(k + 1);
    let mut acc = 0.0;
    let mut prev = 0.0;
    for i in 0..=k {
        let t = lo + i as f64 * dx;
        let f = dens(t.exp()) * t.exp();
        if i > 0 {
            acc += 0.5 * (f + prev) * dx;
        }
        prev = f;
        grid.push((t.exp(), acc));
    }
    let total = acc;
    let cdf = |x: f64| {
        let idx = grid.partition_point(|(s, _)| *s <= x);
        grid[idx.min(grid.len() - 1)].1 / total
    };
    let d = ks_distance(draws, cdf);
    assert!(d < 0.02, "KS {d}");
}

#[test]
fn r_hat_examples() {
    assert_eq!(r_hat(&[vec![2.0; 20], vec![2.0; 20]]).unwrap(), 1.0);
    assert!(r_hat(&[vec![0.0; 20], vec![1.0; 20]]).unwrap() > 1.1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let chains: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..1000).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let r = r_hat(&chains).unwrap();
    assert!((0.99..1.1).contains(&r), "{r}");
    assert!(r_hat(&[vec![0.0; 20]]).is_err());
    assert!(r_hat(&[vec![0.0; 9], vec![0.0; 9]]).is_err());
    assert!(r_hat(&[vec![0.0; 20], vec![0.0; 19]]).is_err());
}

fn tiny_problem() -> (NetworkSpec, Array, Array) {
    let spec = NetworkSpec::mlp(1, &[4], 1);
    let xs: Vec<f64> = (0..12).map(|i| -2.0 + i as f64 / 3.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
    (spec, col(&xs), col(&ys))
}

#[test]
fn chain_bookkeeping() {
    let (spec, x, y) = tiny_problem();
    let lik = Likelihood::Gaussian {
        noise_variance: 0.1,
    };
    let empty = SghmcConfig {
        chains: 1,
        samples_per_chain: 0,
        burn_in: 10,
        ..SghmcConfig::default()
    };
    let r = run_bnn_chains(&spec, &PriorParams::default(), &lik, &x, &y, &empty).unwrap();
    assert!(r.is_empty());
    r.check().unwrap();

    let cfg = SghmcConfig {
        chains: 2,
        burn_in: 50,
        thinning: 5,
        samples_per_chain: 8,
        batch_size: 4,
        ..SghmcConfig::default()
    };
    let r = run_bnn_chains(&spec, &PriorParams::default(), &lik, &x, &y, &cfg).unwrap();
    assert_eq!(r.len(), 16);
    assert_ne!(r.chains[0].samples, r.chains[1].samples);
    assert_eq!(r.chains[0].trace.len(), (50 + 40) / 5);
    let again = run_bnn_chains(&spec, &PriorParams::default(), &lik, &x, &y, &cfg).unwrap();
    assert_eq!(again.chains[1].samples, r.chains[1].samples);
    assert_ne!(chain_seed(0, 0), chain_seed(0, 1));
    assert_ne!(chain_seed(0, 0), chain_seed(1, 0));
}

#[test]
fn unit_temperature_is_bitwise_noop() {
    let (spec, x, y) = tiny_problem();
    let lik = Likelihood::Gaussian {
        noise_variance: 0.1,
    };
    let cfg = SghmcConfig {
        chains: 2,
        burn_in: 40,
        thinning: 3,
        samples_per_chain: 10,
        batch_size: 5,
        ..SghmcConfig::default()
    };
    let plain = run_bnn_chains(&spec, &PriorParams::default(), &lik, &x, &y, &cfg).unwrap();
    let tempered = SghmcConfig {
        temperature: Some(1.0),
        ..cfg.clone()
    };
    let t = run_bnn_chains(&spec, &PriorParams::default(), &lik, &x, &y, &tempered).unwrap();
    for (a, b) in plain.chains.iter().zip(&t.chains) {
        let bits = |c: &ChainResult| -> Vec<u64> {
            c.samples
                .iter()
                .flat_map(|s| s.0.iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(a), bits(b));
    }
    let hot = SghmcConfig {
        temperature: Some(3.0),
        ..cfg
    };
    let h = run_bnn_chains(&spec, &PriorParams::default(), &lik, &x, &y, &hot).unwrap();
    assert_ne!(h.chains[0].samples, plain.chains[0].samples);
}

#[test]
fn hierarchical_chains_record_variances() {
    let (spec, x, y) = tiny_problem();
    let lik = Likelihood::Gaussian {
        noise_variance: 0.1,
    };
    let prior = PriorParams::FixedHierarchical {
        shape: 1.0,
        rate: 1.0,
    };
    let cfg = SghmcConfig {
        chains: 1,
        burn_in: 30,
        thinning: 10,
        samples_per_chain: 3,
        gibbs_interval: 20,
        ..SghmcConfig::default()
    };
    let r = run_bnn_chains(&spec, &prior, &lik, &x, &y, &cfg).unwrap();
    r.check().unwrap();
    assert_eq!(
        r.hyper_names,
        vec!["sigma2_l0_w", "sigma2_l0_b", "sigma2_l1_w", "sigma2_l1_b"]
    );
    let t = &r.chains[0].trace;
    assert!(t
        .iter()
        .all(|rec| rec.hyper.len() == 4 && rec.hyper.iter().all(|v| *v > 0.0)));
    // Variances change only at Gibbs sweeps (iterations 0 and 20).
    assert_eq!(t[0].hyper, t[1].hyper);
    assert_ne!(t[1].hyper, t[2].hyper);
    let mut buf = Vec::new();
    write_trace_csv(&r.chains[0], &r.hyper_names, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(
        text.starts_with("iteration,potential,sigma2_l0_w,sigma2_l0_b,sigma2_l1_w,sigma2_l1_b\n")
    );
    assert_eq!(text.lines().count(), 1 + t.len());
}

struct Exploding(usize);

impl Potential for Exploding {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate(&mut self, _w: &[f64], _rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        self.0 += 1;
        Ok((0.0, vec![if self.0 > 25 { f64::NAN } else { 0.1 }]))
    }
}

#[test]
fn failing_chain_keeps_partial_output() {
    let cfg = SghmcConfig {
        chains: 2,
        burn_in: 0,
        thinning: 5,
        samples_per_chain: 100,
        ..SghmcConfig::default()
    };
    let r = run_chains(|_, _| Ok((Exploding(0), vec![0.0])), &cfg).unwrap();
    assert!(r.check().is_err());
    assert!(r.chains.iter().all(|c| c.error.is_some()));
    assert!(r.chains.iter().all(|c| c.samples.len() <= 5));
    // The chain that hit the bad gradient kept what it produced so far.
    let failed = r
        .chains
        .iter()
        .find(|c| c.error.as_ref().unwrap().contains("coordinate 0"))
        .expect("one chain reports the offending coordinate");
    assert_eq!(failed.samples.len(), 5);
    assert_eq!(failed.trace.len(), 5);
}

#[test]
fn samples_round_trip() {
    let (spec, x, y) = tiny_problem();
    let lik = Likelihood::Gaussian {
        noise_variance: 0.1,
    };
    let cfg = SghmcConfig {
        chains: 2,
        burn_in: 10,
        thinning: 2,
        samples_per_chain: 3,
        ..SghmcConfig::default()
    };
    let r = run_bnn_chains(&spec, &PriorParams::default(), &lik, &x, &y, &cfg).unwrap();
    let mut buf = Vec::new();
    let side = write_samples(&r, &spec, &mut buf).unwrap();
    assert_eq!(buf.len(), 6 * (8 + 8 * spec.param_count()));
    let json = serde_json::to_string(&side).unwrap();
    let side: SampleSidecar = serde_json::from_str(&json).unwrap();
    let back = read_samples(&side, buf.as_slice()).unwrap();
    assert_eq!(back[0], r.chains[0].samples);
    assert_eq!(back[1], r.chains[1].samples);
    assert!(read_samples(&side, &buf[..buf.len() - 1]).is_err());
}

#[test]
fn config_validation() {
    assert!(SghmcConfig::default().validate().is_ok());
    for bad in [
        SghmcConfig {
            step_size: 0.0,
            ..SghmcConfig::default()
        },
        SghmcConfig {
            momentum: 1.5,
            ..SghmcConfig::default()
        },
        SghmcConfig {
            temperature: Some(0.0),
            ..SghmcConfig::default()
        },
        SghmcConfig {
            gibbs_interval: 0,
            ..SghmcConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

proptest! {
    #[test]
    fn adaptation_keeps_invariants(grads in proptest::collection::vec(-50.0f64..50.0, 1..60)) {
        let mut s = ChainState::new(vec![0.0]);
        for g in grads {
            burn_in_adapt(&mut s, &[g]);
            prop_assert!(s.v_hat[0] >= MIN_VARIANCE);
            prop_assert!(s.tau[0] >= 1.0);
        }
    }

    #[test]
    fn steady_then_vanishing_gradient_keeps_scale(c in 1e-3f64..1e3, steady in 2usize..200) {
        let mut s = ChainState::new(vec![0.0]);
        for _ in 0..steady {
            burn_in_adapt(&mut s, &[c]);
        }
        for _ in 0..50 {
            burn_in_adapt(&mut s, &[0.0]);
        }
        prop_assert!(s.tau[0] >= 1.0);
        prop_assert!(s.v_hat[0] > 1e-3 * c * c);
    }
}
