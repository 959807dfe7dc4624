//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any fails. Pass criterion numbers to run a subset:
//! `cargo test -p nnvecchia --test acceptance -- 1 2 3`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use nnvecchia::diagnostics::{run_study, time_best, weight_report_for_bank, Solver, StudyConfig, StudyMode, THETA_2, THETA_3};
use nnvecchia::inference::{decorrelate, run_mcmc_closure, update_beta, update_sigma2, McmcConfig, PriorSpec};
use nnvecchia::kernel::{matern, CovarianceParams, FullParams};
use nnvecchia::rng::rng_from_seed;
use nnvecchia::spatial::{build_graph, LocationSet, Point};
use nnvecchia::surrogate::{load_bank, mse_and_gradient, save_bank, train_bank, BankConfig, MlpModel, SurrogateBank, SurrogateProvider};
use nnvecchia::vecchia::{exact_kriging, simulate_field, vecchia_loglik, ExactProvider, KrigingProvider};
use rand::Rng;

const BANK_SEED: u64 = 2024;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_points(n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n).map(|_| [rng.random(), rng.random()]).collect()
}

fn random_theta(rng: &mut impl Rng) -> CovarianceParams {
    CovarianceParams::new(rng.random_range(0.005..0.12), rng.random_range(0.3..2.7), rng.random_range(0.18..0.99)).unwrap()
}

fn corr(a: &Point, b: &Point, t: &CovarianceParams) -> f64 {
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    if d == 0.0 {
        1.0
    } else {
        t.r * matern(d, t.phi, t.nu).unwrap()
    }
}

/// Desk-profile bank, trained once per target directory and reused afterwards.
fn desk_bank() -> &'static (SurrogateBank, Option<f64>) {
    static BANK: OnceLock<(SurrogateBank, Option<f64>)> = OnceLock::new();
    BANK.get_or_init(|| {
        let cfg = BankConfig::desk(30, BANK_SEED);
        let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-bank-m30-{BANK_SEED}.bin"));
        if let Ok(bank) = load_bank(&path) {
            if bank.metadata().config.as_ref() == Some(&cfg) {
                return (bank, None);
            }
        }
        let t = Instant::now();
        let bank = train_bank(&cfg).expect("desk bank trains");
        let secs = t.elapsed().as_secs_f64();
        let _ = save_bank(&bank, &path);
        (bank, Some(secs))
    })
}

fn c1_matern_reductions() -> Outcome {
    let mut worst: f64 = 0.0;
    let phi = 0.3;
    for nu in [0.5, 1.5, 2.5] {
        for i in 1..=1000 {
            let x = 20.0 * i as f64 / 1000.0;
            let exact = match nu {
                0.5 => (-x).exp(),
                1.5 => (1.0 + x) * (-x).exp(),
                _ => (1.0 + x + x * x / 3.0) * (-x).exp(),
            };
            let v = matern(x * phi, phi, nu).unwrap();
            worst = worst.max((v - exact).abs() / exact);
        }
    }
    outcome(worst <= 1e-10, format!("max relative error {worst:.2e} (tol 1e-10)"))
}

fn c2_kriging_oracle() -> Outcome {
    let mut rng = rng_from_seed(11);
    let (mut w_err, mut v_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..500 {
        let theta = random_theta(&mut rng);
        let m = rng.random_range(1..=30);
        let site: Point = [rng.random(), rng.random()];
        let spread = rng.random_range(0.02..0.3);
        let nbrs: Vec<Point> =
            (0..m).map(|_| [site[0] + spread * (rng.random::<f64>() - 0.5), site[1] + spread * (rng.random::<f64>() - 0.5)]).collect();
        let sol = exact_kriging(&site, &nbrs, &theta).unwrap();
        // joint covariance of (site, neighbours), conditioned by Schur complement
        let all: Vec<Point> = std::iter::once(site).chain(nbrs.iter().copied()).collect();
        let joint = DMatrix::from_fn(m + 1, m + 1, |a, b| corr(&all[a], &all[b], &theta));
        let s_nn = joint.view((1, 1), (m, m)).into_owned();
        let s_in = joint.view((0, 1), (1, m)).transpose();
        let lu = s_nn.clone().lu();
        let w = lu.solve(&s_in).unwrap();
        let var = joint[(0, 0)] - (s_in.transpose() * &w)[(0, 0)];
        for k in 0..m {
            w_err = w_err.max((w[k] - sol.weights[k]).abs());
        }
        v_err = v_err.max((var.ln() - sol.log_variance).abs());
    }
    outcome(
        w_err <= 1e-10 && v_err <= 1e-10,
        format!("max weight error {w_err:.2e}, log-variance error {v_err:.2e} (tol 1e-10)"),
    )
}

fn c3_likelihood_collapse() -> Outcome {
    let mut rng = rng_from_seed(12);
    let mut worst: f64 = 0.0;
    for f in 0..20 {
        let n = rng.random_range(20..=200);
        let theta = random_theta(&mut rng);
        let params = FullParams { mu: rng.random_range(-1.0..1.0), sigma2: rng.random_range(0.5..2.0), theta, beta: None };
        let pts = random_points(n, &mut rng);
        let locs = LocationSet::from_unit_coords(pts.clone()).unwrap();
        let full = build_graph(&locs, n - 1).unwrap();
        let z = simulate_field(&pts, &full, &params, 100 + f).unwrap();
        let ll = vecchia_loglik(&z, &pts, &full, &ExactProvider, &params).unwrap();
        let cov = DMatrix::from_fn(n, n, |a, b| params.sigma2 * if a == b { 1.0 } else { corr(&pts[a], &pts[b], &theta) });
        let chol = cov.cholesky().unwrap();
        let resid = DVector::from_iterator(n, z.iter().map(|v| v - params.mu));
        let quad = resid.dot(&chol.solve(&resid));
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let dense = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        worst = worst.max((ll - dense).abs());
    }
    outcome(worst <= 1e-8, format!("max |vecchia - dense| {worst:.2e} over 20 fields (tol 1e-8)"))
}

fn c4_surrogate_fidelity() -> Outcome {
    let (bank, trained) = desk_bank();
    let report = weight_report_for_bank(2_000, &THETA_3, bank, 777).unwrap();
    let min = report.min_r2();
    let worst_rank = report.r2.iter().position(|v| *v == min).unwrap() + 1;
    let ranks_ok = report.r2.len() == 30 && min >= 0.85;
    let var_ok = report.log_variance_r2 >= 0.95;
    let timing = trained.map_or("cached bank".to_string(), |s| format!("trained in {:.0} s", s));
    outcome(
        ranks_ok && var_ok,
        format!(
            "min weight R2 {min:.3} at rank {worst_rank} (need 0.85 on all 30), log-variance R2 {:.3} (need 0.95); {timing}",
            report.log_variance_r2
        ),
    )
}

fn c5_trainer_gradients() -> Outcome {
    let dims = [6, 8, 4, 2];
    let rows = 50;
    let mut rng = rng_from_seed(13);
    let model = MlpModel::random(&dims, 5).unwrap();
    let x: Vec<f64> = (0..rows * 6).map(|_| rng.random_range(-1.5..1.5)).collect();
    let y: Vec<f64> = (0..rows * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, grads) = mse_and_gradient(&model, &x, &y, rows).unwrap();
    let loss = |m: &MlpModel| mse_and_gradient(m, &x, &y, rows).unwrap().0;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for k in 0..model.layers().len() {
        let n_w = model.layers()[k].w.len();
        for idx in 0..n_w + model.layers()[k].b.len() {
            let shifted = |delta: f64| {
                let mut layers = model.layers().to_vec();
                if idx < n_w {
                    layers[k].w.as_mut_slice()[idx] += delta;
                } else {
                    layers[k].b[idx - n_w] += delta;
                }
                MlpModel::from_layers(layers).unwrap()
            };
            let an = if idx < n_w { grads[k].w.as_slice()[idx] } else { grads[k].b[idx - n_w] };
            // the loss is quadratic between ReLU kinks, so a central difference whose
            // stencil stays on one side of every kink is exact up to rounding
            let mut h = 1e-5;
            while active_pattern(&shifted(h), &x, rows) != active_pattern(&shifted(-h), &x, rows) {
                h *= 0.1;
            }
            let fd = (loss(&shifted(h)) - loss(&shifted(-h))) / (2.0 * h);
            let best = (fd, (an - fd).abs() / an.abs().max(fd.abs()).max(1e-300));
            if an.abs().max(best.0.abs()) < 1e-12 {
                continue;
            }
            checked += 1;
            worst = worst.max(best.1);
        }
    }
    outcome(worst <= 1e-5, format!("max relative gradient error {worst:.2e} over {checked} parameters (tol 1e-5)"))
}

fn active_pattern(model: &MlpModel, x: &[f64], rows: usize) -> Vec<bool> {
    let mut a = DMatrix::from_column_slice(model.input_dim(), rows, x);
    let mut pattern = Vec::new();
    for l in &model.layers()[..model.layers().len() - 1] {
        let mut z = &l.w * &a;
        for mut col in z.column_iter_mut() {
            col += &l.b;
        }
        pattern.extend(z.iter().map(|v| *v > 0.0));
        z.apply(|v| *v = v.max(0.0));
        a = z;
    }
    pattern
}

fn c6_mcmc_calibration() -> Outcome {
    let mut cfg = StudyConfig::desk(StudyMode::Mcmc, 6);
    cfg.settings = vec![("theta2".into(), THETA_2)];
    cfg.n_range = (2_000, 2_000);
    cfg.m = 10;
    cfg.test_fraction = 0.0;
    let report = run_study(&cfg, Solver::Exact).unwrap();
    let ok: Vec<_> = report.replicates.iter().filter(|r| r.ok()).collect();
    let truth = [THETA_2.phi, THETA_2.nu, THETA_2.r];
    let mut within = [0usize; 3];
    let mut covered = [0usize; 3];
    for r in &ok {
        let sd = r.posterior_sd.unwrap();
        let cov = r.covered.unwrap();
        for k in 0..3 {
            if (r.estimate[k] - truth[k]).abs() <= 2.0 * sd[k] {
                within[k] += 1;
            }
            if cov[k] {
                covered[k] += 1;
            }
        }
    }
    let total = report.replicates.len();
    let coverage = covered.map(|c| c as f64 / total as f64);
    let pass = total == 20 && within.iter().all(|&w| w >= 16) && coverage.iter().all(|&c| c >= 0.7);
    let ess: Vec<f64> = ok.iter().map(|r| r.ess.unwrap()[0]).collect();
    outcome(
        pass,
        format!(
            "within 2 sd (phi, nu, r) {within:?} of {total} (need 16), coverage ({:.2}, {:.2}, {:.2}) (need 0.7); {} failed; median phi ESS {:.0}",
            coverage[0],
            coverage[1],
            coverage[2],
            total - ok.len(),
            median(&ess)
        ),
    )
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn c7_prior_only() -> Outcome {
    // wide steps and a long chain so the quantile error is well below the tolerance
    let cfg = McmcConfig { iterations: 2_000_000, burn_in: 10_000, tune: [0.8, 0.8, 1.5], prior_only: true, ..McmcConfig::default() };
    let chain = run_mcmc_closure(|_| 0.0, &PriorSpec::default(), &cfg, 7).unwrap();
    let kept = chain.kept();
    let target = [(0.00, 0.16), (0.600, 4.42), (0.11, 0.86)];
    let names = ["phi", "nu", "r"];
    let mut pass = true;
    let mut parts = Vec::new();
    for k in 0..3 {
        let lo = nnvecchia::inference::mcmc::quantile(&kept[k], 0.025);
        let hi = nnvecchia::inference::mcmc::quantile(&kept[k], 0.975);
        let ok = (lo - target[k].0).abs() <= 0.02 && (hi - target[k].1).abs() <= 0.02;
        pass &= ok;
        parts.push(format!("{} ({lo:.3}, {hi:.3}) vs {:?}{}", names[k], target[k], if ok { "" } else { " off" }));
    }
    outcome(pass, parts.join("; "))
}

fn c8_frequentist() -> Outcome {
    let (bank, _) = desk_bank();
    let mut cfg = StudyConfig::desk(StudyMode::Mle, 8);
    cfg.settings = vec![("theta2".into(), THETA_2)];
    cfg.replicates = 50;
    cfg.test_fraction = 0.0;
    let report = run_study(&cfg, Solver::Surrogate(bank)).unwrap();
    let total = report.replicates.len();
    let converged: Vec<_> = report.replicates.iter().filter(|r| r.ok() && r.converged == Some(true)).collect();
    let close = converged
        .iter()
        .filter(|r| (r.estimate[2] - 0.75).abs() < 0.05 && (r.estimate[0] - 0.05).abs() < 0.01)
        .count();
    let conv_rate = converged.len() as f64 / total as f64;
    let close_rate = if converged.is_empty() { 0.0 } else { close as f64 / converged.len() as f64 };
    let med_r = median(&converged.iter().map(|r| r.estimate[2]).collect::<Vec<_>>());
    let med_phi = median(&converged.iter().map(|r| r.estimate[0]).collect::<Vec<_>>());
    outcome(
        total == 50 && conv_rate >= 0.9 && close_rate >= 0.8,
        format!(
            "converged {:.2} (need 0.9), close {close}/{} = {close_rate:.2} (need 0.8); median phi {med_phi:.4}, r {med_r:.3}",
            conv_rate,
            converged.len()
        ),
    )
}

fn c9_conjugate() -> Outcome {
    let n = 200;
    let mut rng = rng_from_seed(9);
    let pts = random_points(n, &mut rng);
    let graph = build_graph(&LocationSet::from_unit_coords(pts.clone()).unwrap(), 10).unwrap();
    let theta = CovarianceParams::new(0.08, 1.2, 0.8).unwrap();
    let sols = ExactProvider.solve_graph(&pts, &graph, &theta).unwrap();
    let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { pts[i][0] - 0.5 });
    let w = simulate_field(&pts, &graph, &FullParams { mu: 0.0, sigma2: 1.5, theta, beta: None }, 3).unwrap();
    let z: Vec<f64> = (0..n).map(|i| 0.7 + 2.0 * x[(i, 1)] + w[i]).collect();
    let dec = decorrelate(&z, &x, &graph, &sols).unwrap();
    let priors = PriorSpec::default();

    // closed forms written out from the decorrelated quantities
    let sigma2 = 1.3;
    let dinv: Vec<f64> = dec.var_factor.iter().map(|v| 1.0 / (sigma2 * v)).collect();
    let mut prec = DMatrix::<f64>::identity(2, 2) / priors.beta_var;
    let mut rhs = DVector::<f64>::zeros(2);
    for i in 0..n {
        for a in 0..2 {
            rhs[a] += dec.x[(i, a)] * dinv[i] * dec.z[i];
            for b in 0..2 {
                prec[(a, b)] += dec.x[(i, a)] * dinv[i] * dec.x[(i, b)];
            }
        }
    }
    let cov = prec.try_inverse().unwrap();
    let mean = &cov * rhs;
    let beta_fixed = [0.6, 1.9];
    let ss: f64 = (0..n)
        .map(|i| {
            let e = dec.z[i] - dec.x[(i, 0)] * beta_fixed[0] - dec.x[(i, 1)] * beta_fixed[1];
            e * e / dec.var_factor[i]
        })
        .sum();
    let shape = n as f64 / 2.0 + priors.sigma2_a;
    let rate = priors.sigma2_b + 0.5 * ss;
    let ig_mean = rate / (shape - 1.0);
    let ig_var = rate * rate / ((shape - 1.0).powi(2) * (shape - 2.0));

    let draws = 10_000;
    let mut draw_rng = rng_from_seed(99);
    let betas: Vec<Vec<f64>> = (0..draws).map(|_| update_beta(&dec, sigma2, &priors, &mut draw_rng).unwrap()).collect();
    let s2: Vec<f64> = (0..draws).map(|_| update_sigma2(&dec, &beta_fixed, &priors, &mut draw_rng).unwrap()).collect();

    let mut worst: f64 = 0.0;
    let mut check = |sample: &[f64], mu: f64, var: f64| {
        let (m, v, m4) = moments(sample);
        let k = sample.len() as f64;
        let z_mean = (m - mu).abs() / (v / k).sqrt();
        let z_var = (v - var).abs() / ((m4 - v * v) / k).sqrt();
        worst = worst.max(z_mean).max(z_var);
    };
    for a in 0..2 {
        let col: Vec<f64> = betas.iter().map(|b| b[a]).collect();
        check(&col, mean[a], cov[(a, a)]);
    }
    check(&s2, ig_mean, ig_var);
    outcome(worst <= 3.0, format!("largest moment deviation {worst:.2} Monte Carlo SE over 6 moments (tol 3)"))
}

/// Mean, variance and fourth central moment.
fn moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = x.iter().map(|a| (a - m).powi(4)).sum::<f64>() / n;
    (m, v, m4)
}

fn c10_speedup() -> Outcome {
    let (bank, _) = desk_bank();
    let mut rng = rng_from_seed(10);
    let n = 10_000;
    let pts = random_points(n, &mut rng);
    let graph = build_graph(&LocationSet::from_unit_coords(pts.clone()).unwrap(), 30).unwrap();
    let params = FullParams::standard(THETA_3);
    let z = simulate_field(&pts, &graph, &params, 4).unwrap();
    let surrogate = SurrogateProvider::new(bank);
    let (t_sur, ll_sur) = time_best(3, || vecchia_loglik(&z, &pts, &graph, &surrogate, &params).unwrap());
    let (t_exact, ll_exact) = time_best(3, || vecchia_loglik(&z, &pts, &graph, &ExactProvider, &params).unwrap());
    let speedup = t_exact / t_sur;
    outcome(
        speedup >= 3.0 && ll_sur.is_finite(),
        format!(
            "exact {t_exact:.3} s, surrogate {t_sur:.3} s, speedup {speedup:.1}x (need 3x) on {} threads; loglik {ll_exact:.1} vs {ll_sur:.1}",
            rayon::current_num_threads()
        ),
    )
}

fn c11_prediction() -> Outcome {
    let (bank, _) = desk_bank();
    let mut cfg = StudyConfig::desk(StudyMode::Mcmc, 11);
    cfg.settings = vec![("theta3".into(), THETA_3)];
    cfg.replicates = 1;
    let report = run_study(&cfg, Solver::Surrogate(bank)).unwrap();
    let r = &report.replicates[0];
    if let Some(e) = &r.error {
        return outcome(false, format!("replicate failed: {e}"));
    }
    let (mse, base) = (r.prediction_mse.unwrap(), r.baseline_mse.unwrap());
    let ratio = mse / base;
    outcome(
        ratio <= 1.10,
        format!(
            "Bayesian MSE {mse:.4} vs exact-parameter {base:.4}, ratio {ratio:.3} (need 1.10); n {}, posterior mean ({:.3}, {:.3}, {:.3})",
            r.n, r.estimate[0], r.estimate[1], r.estimate[2]
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "matern reductions", c1_matern_reductions),
    (2, "kriging oracle", c2_kriging_oracle),
    (3, "likelihood collapse", c3_likelihood_collapse),
    (4, "surrogate fidelity", c4_surrogate_fidelity),
    (5, "trainer gradients", c5_trainer_gradients),
    (6, "mcmc calibration", c6_mcmc_calibration),
    (7, "prior-only sampler", c7_prior_only),
    (8, "frequentist path", c8_frequentist),
    (9, "conjugate updates", c9_conjugate),
    (10, "amortization speedup", c10_speedup),
    (11, "prediction sanity", c11_prediction),
];

fn main() {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if std::env::args().any(|a| a == "--list") {
        for (i, name, _) in CRITERIA {
            println!("criterion {i}: {name}: test");
        }
        return;
    }
    let mut failed = Vec::new();
    for (i, name, f) in CRITERIA {
        if !picked.is_empty() && !picked.contains(&i) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        println!(
            "criterion {i:>2} {}: {name}: {} [{:.1} s]",
            if res.pass { "PASS" } else { "FAIL" },
            res.detail,
            t.elapsed().as_secs_f64()
        );
        if !res.pass {
            failed.push(i);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
