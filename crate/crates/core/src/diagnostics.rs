//! Simulation studies and surrogate weight checks.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::mcmc::quantile;
use crate::inference::{fit_mle, fit_mle_surrogate, fit_variogram, run_mcmc, McmcConfig, MleConfig, PriorSpec, VariogramConfig};
use crate::kernel::{CovarianceParams, FullParams, ParamBounds};
use crate::predict::{predict_bayes, predict_sites, Observed};
use crate::rng::{derive_seed, rng_from_seed};
use crate::spatial::{build_graph, LocationSet, OrderedNeighborGraph, Point};
use crate::surrogate::{SurrogateBank, SurrogateProvider};
use crate::vecchia::{simulate_field, CachedExactProvider, KrigingProvider, KrigingSolution, SIMULATION_M};

pub const THETA_1: CovarianceParams = CovarianceParams { phi: 0.01, nu: 1.0, r: 0.4 };
pub const THETA_2: CovarianceParams = CovarianceParams { phi: 0.05, nu: 2.0, r: 0.75 };
pub const THETA_3: CovarianceParams = CovarianceParams { phi: 0.1, nu: 1.5, r: 0.9 };

/// The three simulation settings, labelled `theta1`..`theta3`.
pub fn paper_settings() -> Vec<(String, CovarianceParams)> {
    vec![("theta1".into(), THETA_1), ("theta2".into(), THETA_2), ("theta3".into(), THETA_3)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyMode {
    Mcmc,
    Mle,
}

/// Where the fitting step gets its Kriging solutions.
#[derive(Clone, Copy)]
pub enum Solver<'a> {
    /// Cholesky solves, cached per replicate geometry.
    Exact,
    Surrogate(&'a SurrogateBank),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub settings: Vec<(String, CovarianceParams)>,
    pub replicates: usize,
    /// Inclusive range of site counts, drawn uniformly per replicate.
    pub n_range: (usize, usize),
    /// Conditioning-set size of the fitting graph.
    pub m: usize,
    pub simulation_m: usize,
    pub mode: StudyMode,
    pub mcmc: McmcConfig,
    pub mle: MleConfig,
    pub priors: PriorSpec,
    /// Share of sites held out for prediction; 0 disables prediction.
    pub test_fraction: f64,
    pub predict_stride: usize,
    pub seed: u64,
}

impl StudyConfig {
    /// 20 replicates, n in [1500, 3000], 4000 iterations with 1000 burn-in.
    pub fn desk(mode: StudyMode, seed: u64) -> Self {
        Self {
            settings: paper_settings(),
            replicates: 20,
            n_range: (1_500, 3_000),
            m: 30,
            simulation_m: SIMULATION_M,
            mode,
            mcmc: McmcConfig { iterations: 4_000, burn_in: 1_000, ..McmcConfig::default() },
            mle: MleConfig::default(),
            priors: PriorSpec::default(),
            test_fraction: 0.1,
            predict_stride: 50,
            seed,
        }
    }

    /// 100 replicates, n in [5000, 15000], 12000 iterations with 2000 burn-in.
    pub fn paper(mode: StudyMode, seed: u64) -> Self {
        Self {
            replicates: 100,
            n_range: (5_000, 15_000),
            mcmc: McmcConfig::default(),
            ..Self::desk(mode, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.settings.is_empty() || self.replicates == 0 {
            return Err(Error::InvalidArgument("need at least one setting and one replicate".into()));
        }
        if self.n_range.0 < 50 || self.n_range.0 > self.n_range.1 {
            return Err(Error::InvalidArgument(format!("bad n range {:?}", self.n_range)));
        }
        if self.m == 0 || self.simulation_m == 0 {
            return Err(Error::InvalidArgument("m must be > 0".into()));
        }
        if !(0.0..0.9).contains(&self.test_fraction) {
            return Err(Error::InvalidArgument("test_fraction must lie in [0, 0.9)".into()));
        }
        for (name, t) in &self.settings {
            t.validate().map_err(|e| Error::InvalidArgument(format!("setting {name}: {e}")))?;
        }
        self.mcmc.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub setting: String,
    pub replicate: usize,
    pub seed: u64,
    pub n: usize,
    pub truth: [f64; 3],
    /// Posterior mean or MLE.
    pub estimate: [f64; 3],
    pub squared_error: [f64; 3],
    pub posterior_sd: Option<[f64; 3]>,
    pub interval: Option<[(f64, f64); 3]>,
    pub covered: Option<[bool; 3]>,
    pub ess: Option<[f64; 3]>,
    pub ess_per_min: Option<[f64; 3]>,
    pub converged: Option<bool>,
    /// Fitting time; for chains the sampling loop only.
    pub seconds: f64,
    pub prediction_mse: Option<f64>,
    /// Prediction MSE of exact Kriging at the true parameters.
    pub baseline_mse: Option<f64>,
    pub error: Option<String>,
}

impl ReplicateRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Mean with its standard error, absent for fewer than two values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: Option<f64>,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Some(Self { mean, se })
    }

    /// `0.123 (0.004)`, or just the mean without a standard error.
    pub fn cell(&self) -> String {
        match self.se {
            Some(se) => format!("{:.3} ({:.3})", self.mean, se),
            None => format!("{:.3}", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: String,
    pub truth: CovarianceParams,
    pub succeeded: usize,
    pub failed: usize,
    pub mse: [Option<MeanSe>; 3],
    pub coverage: [Option<MeanSe>; 3],
    pub ess_per_min: [Option<MeanSe>; 3],
    pub prediction_mse: Option<MeanSe>,
    pub baseline_mse: Option<MeanSe>,
    pub converged: Option<MeanSe>,
    pub seconds: Option<MeanSe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub replicates: Vec<ReplicateRecord>,
    pub summaries: Vec<SettingSummary>,
}

impl StudyReport {
    pub fn success_rate(&self) -> f64 {
        let ok = self.replicates.iter().filter(|r| r.ok()).count();
        ok as f64 / self.replicates.len().max(1) as f64
    }

    pub fn write_replicates_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["setting", "replicate", "seed", "n"].iter().map(|s| s.to_string()).collect();
        for p in ["phi", "nu", "r"] {
            for f in ["true", "est", "sqerr", "sd", "lo", "hi", "covered", "ess", "ess_per_min"] {
                header.push(format!("{p}_{f}"));
            }
        }
        header.extend(["converged", "seconds", "prediction_mse", "baseline_mse", "error"].map(String::from));
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.replicates {
            let mut rec = vec![r.setting.clone(), r.replicate.to_string(), r.seed.to_string(), r.n.to_string()];
            for k in 0..3 {
                rec.push(r.truth[k].to_string());
                if r.ok() {
                    rec.push(r.estimate[k].to_string());
                    rec.push(r.squared_error[k].to_string());
                } else {
                    rec.extend([String::new(), String::new()]);
                }
                rec.push(opt(r.posterior_sd.map(|s| s[k])));
                rec.push(opt(r.interval.map(|s| s[k].0)));
                rec.push(opt(r.interval.map(|s| s[k].1)));
                rec.push(r.covered.map(|c| u8::from(c[k]).to_string()).unwrap_or_default());
                rec.push(opt(r.ess.map(|s| s[k])));
                rec.push(opt(r.ess_per_min.map(|s| s[k])));
            }
            rec.push(r.converged.map(|c| u8::from(c).to_string()).unwrap_or_default());
            rec.push(r.seconds.to_string());
            rec.push(opt(r.prediction_mse));
            rec.push(opt(r.baseline_mse));
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per metric and parameter, one column per setting; cells are
    /// `mean (se)`.
    pub fn write_table_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["metric".to_string(), "parameter".to_string()];
        header.extend(self.summaries.iter().map(|s| s.setting.clone()));
        w.write_record(&header).map_err(csv_err)?;
        let cell = |v: &Option<MeanSe>| v.map(|m| m.cell()).unwrap_or_default();
        let names = ["phi", "nu", "r"];
        let mut rows: Vec<(String, String, Vec<String>)> = Vec::new();
        for (metric, get) in [
            ("mse", (|s: &SettingSummary, k: usize| s.mse[k]) as fn(&SettingSummary, usize) -> Option<MeanSe>),
            ("coverage", |s, k| s.coverage[k]),
            ("ess_per_min", |s, k| s.ess_per_min[k]),
        ] {
            for (k, name) in names.iter().enumerate() {
                rows.push((metric.into(), (*name).into(), self.summaries.iter().map(|s| cell(&get(s, k))).collect()));
            }
        }
        rows.push(("prediction_mse".into(), String::new(), self.summaries.iter().map(|s| cell(&s.prediction_mse)).collect()));
        rows.push(("baseline_mse".into(), String::new(), self.summaries.iter().map(|s| cell(&s.baseline_mse)).collect()));
        rows.push(("converged".into(), String::new(), self.summaries.iter().map(|s| cell(&s.converged)).collect()));
        rows.push(("seconds".into(), String::new(), self.summaries.iter().map(|s| cell(&s.seconds)).collect()));
        rows.push(("failed".into(), String::new(), self.summaries.iter().map(|s| s.failed.to_string()).collect()));
        for (metric, param, cells) in rows {
            if cells.iter().all(String::is_empty) {
                continue;
            }
            let mut rec = vec![metric, param];
            rec.extend(cells);
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Simulate, fit and optionally predict for every setting and replicate. A failing
/// replicate is recorded with its error and left out of the aggregates.
pub fn run_study(config: &StudyConfig, solver: Solver) -> Result<StudyReport> {
    config.validate()?;
    if let Solver::Surrogate(bank) = solver {
        if bank.m() != config.m {
            return Err(Error::BankMismatch { found: bank.m(), requested: config.m });
        }
        for (name, t) in &config.settings {
            bank.envelope().check(t).map_err(|e| Error::InvalidArgument(format!("setting {name}: {e}")))?;
        }
    }
    let jobs: Vec<(usize, usize)> =
        (0..config.settings.len()).flat_map(|s| (0..config.replicates).map(move |r| (s, r))).collect();
    let replicates: Vec<ReplicateRecord> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let (name, truth) = &config.settings[s];
            let seed = derive_seed(config.seed, (s * 1_000_003 + r) as u64);
            let mut rec = ReplicateRecord {
                setting: name.clone(),
                replicate: r,
                seed,
                truth: [truth.phi, truth.nu, truth.r],
                ..Default::default()
            };
            if let Err(e) = run_replicate(config, solver, truth, seed, &mut rec) {
                rec.error = Some(e.to_string());
            }
            rec
        })
        .collect();
    let summaries = config
        .settings
        .iter()
        .map(|(name, truth)| summarize(name, truth, &replicates))
        .collect();
    Ok(StudyReport { config: config.clone(), replicates, summaries })
}

fn run_replicate(
    config: &StudyConfig,
    solver: Solver,
    truth: &CovarianceParams,
    seed: u64,
    rec: &mut ReplicateRecord,
) -> Result<()> {
    let mut rng = rng_from_seed(seed);
    let n = rng.random_range(config.n_range.0..=config.n_range.1);
    rec.n = n;
    let pts: Vec<Point> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let locs = LocationSet::from_unit_coords(pts.clone())?;
    let sim_graph = build_graph(&locs, config.simulation_m)?;
    let z = simulate_field(&pts, &sim_graph, &FullParams::standard(*truth), derive_seed(seed, 1))?;
    drop(sim_graph);

    let n_test = (n as f64 * config.test_fraction).round() as usize;
    // last n_test sites are held out; sites are i.i.d. so this is a random split
    let (train_pts, test_pts) = pts.split_at(n - n_test);
    let (train_z, test_z) = z.split_at(n - n_test);
    let train_locs = LocationSet::from_unit_coords(train_pts.to_vec())?;
    let graph = build_graph(&train_locs, config.m)?;
    let obs = Observed { points: train_pts, data: train_z };

    let cached;
    let surrogate;
    let provider: &dyn KrigingProvider = match solver {
        Solver::Exact => {
            cached = CachedExactProvider::new(train_pts, &graph);
            &cached
        }
        Solver::Surrogate(bank) => {
            surrogate = SurrogateProvider::new(bank);
            &surrogate
        }
    };

    let t = [truth.phi, truth.nu, truth.r];
    match config.mode {
        StudyMode::Mcmc => {
            let init = variogram_start(train_z, train_pts, &config.mle.bounds, seed)?;
            let mcmc = McmcConfig { init: Some(init), ..config.mcmc.clone() };
            let chain = run_mcmc(train_z, train_pts, &graph, provider, &config.priors, &mcmc, derive_seed(seed, 2))?;
            let s = chain.summary()?;
            let kept = chain.kept();
            let ps = [&s.phi, &s.nu, &s.r];
            rec.estimate = ps.map(|p| p.mean);
            rec.posterior_sd = Some(ps.map(|p| p.sd));
            let interval: [(f64, f64); 3] = std::array::from_fn(|k| (quantile(&kept[k], 0.025), quantile(&kept[k], 0.975)));
            rec.covered = Some(std::array::from_fn(|k| interval[k].0 <= t[k] && t[k] <= interval[k].1));
            rec.interval = Some(interval);
            rec.ess = Some(ps.map(|p| p.ess));
            rec.ess_per_min = Some(ps.map(|p| p.ess_per_min));
            rec.seconds = chain.sampling_seconds;
            if n_test > 0 {
                let pred = predict_bayes(&obs, test_pts, &chain, config.predict_stride, config.m, None)?;
                rec.prediction_mse = Some(pred.mse(test_z)?);
            }
        }
        StudyMode::Mle => {
            let res = match solver {
                Solver::Exact => fit_mle(train_z, train_pts, &graph, provider, &config.mle)?,
                Solver::Surrogate(bank) => fit_mle_surrogate(train_z, train_pts, &graph, bank, &config.mle)?,
            };
            let e = res.estimate;
            rec.estimate = [e.phi, e.nu, e.r];
            rec.converged = Some(res.converged);
            rec.seconds = res.seconds;
            if n_test > 0 {
                let pred = predict_sites(&obs, test_pts, &e, 0.0, 1.0, config.m)?;
                rec.prediction_mse = Some(pred.mse(test_z)?);
            }
        }
    }
    rec.squared_error = std::array::from_fn(|k| (rec.estimate[k] - t[k]).powi(2));
    if n_test > 0 {
        let base = predict_sites(&obs, test_pts, truth, 0.0, 1.0, config.m)?;
        rec.baseline_mse = Some(base.mse(test_z)?);
    }
    Ok(())
}

fn variogram_start(z: &[f64], pts: &[Point], bounds: &ParamBounds, seed: u64) -> Result<CovarianceParams> {
    let v = fit_variogram(z, pts, &VariogramConfig { bounds: *bounds, seed, ..VariogramConfig::default() })?;
    Ok(CovarianceParams { phi: v.phi, nu: v.nu, r: v.r })
}

fn summarize(name: &str, truth: &CovarianceParams, all: &[ReplicateRecord]) -> SettingSummary {
    let recs: Vec<&ReplicateRecord> = all.iter().filter(|r| r.setting == name).collect();
    let ok: Vec<&&ReplicateRecord> = recs.iter().filter(|r| r.ok()).collect();
    let collect = |f: &dyn Fn(&ReplicateRecord) -> Option<f64>| -> Option<MeanSe> {
        let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
        MeanSe::of(&v)
    };
    SettingSummary {
        setting: name.to_string(),
        truth: *truth,
        succeeded: ok.len(),
        failed: recs.len() - ok.len(),
        mse: std::array::from_fn(|k| collect(&|r| Some(r.squared_error[k]))),
        coverage: std::array::from_fn(|k| collect(&|r| r.covered.map(|c| if c[k] { 1.0 } else { 0.0 }))),
        ess_per_min: std::array::from_fn(|k| collect(&|r| r.ess_per_min.map(|e| e[k]))),
        prediction_mse: collect(&|r| r.prediction_mse),
        baseline_mse: collect(&|r| r.baseline_mse),
        converged: collect(&|r| r.converged.map(|c| if c { 1.0 } else { 0.0 })),
        seconds: collect(&|r| Some(r.seconds)),
    }
}

/// Per-rank agreement between two sets of Kriging weights over the sites with a
/// full conditioning set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub theta: CovarianceParams,
    /// Squared Pearson correlation per neighbor rank, nearest first.
    pub r2: Vec<f64>,
    pub log_variance_r2: f64,
    pub sites: usize,
    /// `(rank, reference, candidate)` for ranks 1 to 10, ranks counted from 1.
    pub pairs: Vec<(usize, f64, f64)>,
}

impl WeightReport {
    pub fn min_r2(&self) -> f64 {
        self.r2.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_pairs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "exact", "surrogate"]).map_err(csv_err)?;
        for (k, a, b) in &self.pairs {
            w.write_record([k.to_string(), a.to_string(), b.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn squared_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    sab * sab / (saa * sbb)
}

/// Compare `candidate` against `reference` at `theta` on one geometry.
pub fn weight_report(
    points: &[Point],
    graph: &OrderedNeighborGraph,
    theta: &CovarianceParams,
    reference: &dyn KrigingProvider,
    candidate: &dyn KrigingProvider,
) -> Result<WeightReport> {
    let m = graph.m();
    let a = reference.solve_graph(points, graph, theta)?;
    let b = candidate.solve_graph(points, graph, theta)?;
    let full: Vec<usize> = (0..graph.len()).filter(|&p| graph.neighbors(p).len() == m).collect();
    if full.len() < 2 {
        return Err(Error::InvalidArgument("need at least two sites with a full conditioning set".into()));
    }
    let column = |s: &[KrigingSolution], k: usize| -> Vec<f64> { full.iter().map(|&p| s[p].weights[k]).collect() };
    let r2 = (0..m).map(|k| squared_correlation(&column(&a, k), &column(&b, k))).collect();
    let lv = |s: &[KrigingSolution]| -> Vec<f64> { full.iter().map(|&p| s[p].log_variance).collect() };
    let log_variance_r2 = squared_correlation(&lv(&a), &lv(&b));
    let mut pairs = Vec::new();
    for k in 0..m.min(10) {
        for &p in &full {
            pairs.push((k + 1, a[p].weights[k], b[p].weights[k]));
        }
    }
    Ok(WeightReport { theta: *theta, r2, log_variance_r2, sites: full.len(), pairs })
}

/// [`weight_report`] of a bank against exact solves, on uniform points.
pub fn weight_report_for_bank(n: usize, theta: &CovarianceParams, bank: &SurrogateBank, seed: u64) -> Result<WeightReport> {
    let mut rng = rng_from_seed(seed);
    let pts: Vec<Point> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let graph = build_graph(&LocationSet::from_unit_coords(pts.clone())?, bank.m())?;
    let exact = CachedExactProvider::new(&pts, &graph);
    weight_report(&pts, &graph, theta, &exact, &SurrogateProvider::new(bank))
}

/// Wall-clock seconds of `f`, best of `repeats`.
pub fn time_best<T>(repeats: usize, mut f: impl FnMut() -> T) -> (f64, T) {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let v = f();
        best = best.min(t.elapsed().as_secs_f64());
        out = Some(v);
    }
    (best, out.unwrap())
}
