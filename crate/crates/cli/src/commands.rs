use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nnvecchia::diagnostics::{paper_settings, run_study, Solver, StudyConfig, StudyMode};
use nnvecchia::inference::{
    fit_mle, fit_mle_surrogate, fit_variogram, run_mcmc, run_mcmc_with_covariates, Chain, McmcConfig, MleConfig,
    MleResult, PriorSpec, VariogramConfig,
};
use nnvecchia::kernel::{CovarianceParams, FullParams, ParamBounds};
use nnvecchia::predict::{predict_bayes, predict_sites, Observed, PredictionResult, Trend};
use nnvecchia::rng::rng_from_seed;
use nnvecchia::spatial::{build_graph, LocationSet, Point};
use nnvecchia::surrogate::{load_bank, save_bank, train_bank, BankConfig, SurrogateBank, SurrogateProvider};
use nnvecchia::vecchia::{simulate_field, CachedExactProvider, KrigingProvider};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::table::{locations, SiteTable, Standardization};
use crate::{usage, FitArgs, Mode, PredictArgs, Scale, SimulateArgs, StudyArgs, TrainArgs};

const FIT_RECORD: &str = "config.json";
const CHAIN_FILE: &str = "chain.csv";
const ESTIMATE_FILE: &str = "estimate.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// `path.ext` becomes `path.ext.config.json`.
fn echo_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn require_parent(path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(usage(format!("output directory {} does not exist", parent.display())));
    }
    Ok(())
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    args: &'a TrainArgs,
    config: &'a BankConfig,
}

pub fn train_surrogate(a: &TrainArgs) -> Result<()> {
    if a.m == 0 {
        return Err(usage("--m must be at least 1"));
    }
    let mut cfg = match a.scale {
        Scale::Desk => BankConfig::desk(a.m, a.seed),
        Scale::Paper => BankConfig::full(a.m, a.seed),
    };
    if let Some(v) = a.replicates {
        cfg.data.replicates = v;
    }
    if let Some(v) = a.n_min {
        cfg.data.n_range.0 = v;
    }
    if let Some(v) = a.n_max {
        cfg.data.n_range.1 = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    cfg.data.validate().map_err(|e| usage(e.to_string()))?;
    let echo = TrainEcho { args: a, config: &cfg };
    if a.dry_run {
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&echo)?);
        return Ok(());
    }
    require_parent(&a.out)?;
    write_json(&echo_path(&a.out), &echo)?;
    let bank = train_bank(&cfg)?;
    save_bank(&bank, &a.out)?;
    for (i, (w, v)) in bank.metadata().losses.iter().enumerate() {
        eprintln!(
            "bin {i}: weights train {:.3e} val {:.3e}; log-variance train {:.3e} val {:.3e}",
            w.train, w.validation, v.train, v.validation
        );
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SimulateEcho<'a> {
    args: &'a SimulateArgs,
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    if a.n < 2 {
        return Err(usage(format!("--n must be at least 2, got {}", a.n)));
    }
    if a.m == 0 {
        return Err(usage("--m must be at least 1"));
    }
    let theta = CovarianceParams::new(a.theta[0], a.theta[1], a.theta[2]).map_err(|e| usage(e.to_string()))?;
    ParamBounds::TRAINING_ENVELOPE.check(&theta).map_err(|e| usage(e.to_string()))?;
    let params = FullParams { mu: a.mu, sigma2: a.sigma2, theta, beta: None };
    params.validate().map_err(|e| usage(e.to_string()))?;
    require_parent(&a.out)?;
    let mut rng = rng_from_seed(a.seed);
    let pts: Vec<Point> = (0..a.n).map(|_| [rng.random(), rng.random()]).collect();
    let locs = LocationSet::from_unit_coords(pts.clone())?;
    let graph = build_graph(&locs, a.m)?;
    let z = simulate_field(&pts, &graph, &params, a.seed)?;
    let table = SiteTable { covariates: vec![Vec::new(); pts.len()], coords: pts, z: Some(z), ..Default::default() };
    table.write(&a.out)?;
    write_json(&echo_path(&a.out), &SimulateEcho { args: a })?;
    Ok(())
}

/// Everything `predict` needs to know about a fit.
#[derive(Debug, Serialize, Deserialize)]
struct FitRecord {
    mode: String,
    m: usize,
    provider: String,
    sites: usize,
    mcmc: Option<McmcConfig>,
    mle: Option<MleConfig>,
    priors: PriorSpec,
    variogram: Option<CovarianceParams>,
    args: serde_json::Value,
}

fn open_bank(path: &Path) -> Result<SurrogateBank> {
    load_bank(path).with_context(|| format!("loading bank {}", path.display()))
}

pub fn fit(a: &FitArgs) -> Result<()> {
    if a.bank.is_some() == a.exact {
        return Err(usage("pass exactly one of --bank and --exact"));
    }
    if let Some(h) = a.holdout {
        if !(h > 0.0 && h < 1.0) {
            return Err(usage("--holdout must lie in (0, 1)"));
        }
    }
    if a.hierarchical && a.mode == Mode::Mle {
        return Err(usage("--hierarchical needs --mode mcmc"));
    }
    if a.burn_in >= a.iterations && a.mode == Mode::Mcmc {
        return Err(usage("--burn-in must be below --iterations"));
    }
    let bank = a.bank.as_deref().map(open_bank).transpose()?;
    let m = match (&bank, a.m) {
        (Some(b), Some(m)) if b.m() != m => bail!("bank conditions on {} neighbours, --m asks for {m}", b.m()),
        (Some(b), _) => b.m(),
        (None, Some(m)) => m,
        (None, None) => 30,
    };
    if m == 0 {
        return Err(usage("--m must be at least 1"));
    }
    make_dir(&a.out)?;
    let mut table = SiteTable::read(&a.data, true)?;
    if let Some(h) = a.holdout {
        let mut idx: Vec<usize> = (0..table.len()).collect();
        idx.shuffle(&mut rng_from_seed(a.seed ^ 0x5eed));
        let n_test = ((table.len() as f64) * h).round() as usize;
        let (test, train) = idx.split_at(n_test);
        let (mut train, mut test) = (train.to_vec(), test.to_vec());
        train.sort_unstable();
        test.sort_unstable();
        table.subset(&test).write(&a.out.join("test.csv"))?;
        table = table.subset(&train);
        table.write(&a.out.join("train.csv"))?;
    }
    if a.hierarchical && table.covariate_names.is_empty() {
        return Err(usage("--hierarchical needs covariate columns"));
    }
    let locs = locations(&table, a.lonlat)?;
    let st = Standardization::fit(&table, &locs, a.lonlat, a.hierarchical)?;
    st.save(&a.out)?;
    let z = st.standardize(&table)?;
    let pts = locs.coords().to_vec();
    let graph = build_graph(&locs, m)?;
    let priors = PriorSpec::default();

    let cached;
    let surrogate;
    let provider: &dyn KrigingProvider = match &bank {
        Some(b) => {
            surrogate = SurrogateProvider::new(b);
            &surrogate
        }
        None => {
            cached = CachedExactProvider::new(&pts, &graph);
            &cached
        }
    };
    let bounds = ParamBounds::TRAINING_ENVELOPE;
    let mut record = FitRecord {
        mode: format!("{:?}", a.mode).to_lowercase(),
        m,
        provider: provider.name().to_string(),
        sites: pts.len(),
        mcmc: None,
        mle: None,
        priors,
        variogram: None,
        args: serde_json::to_value(a)?,
    };
    match a.mode {
        Mode::Mcmc => {
            let v = fit_variogram(&z, &pts, &VariogramConfig { seed: a.seed, ..VariogramConfig::default() })?;
            let init = CovarianceParams { phi: v.phi, nu: v.nu, r: v.r };
            record.variogram = Some(init);
            let cfg = McmcConfig {
                iterations: a.iterations,
                burn_in: a.burn_in,
                tune: [a.tune; 3],
                adapt: a.adapt,
                prior_only: false,
                init: Some(init),
            };
            record.mcmc = Some(cfg.clone());
            write_json(&a.out.join(FIT_RECORD), &record)?;
            let chain = if a.hierarchical {
                run_mcmc_with_covariates(&z, &st.design(&table)?, &pts, &graph, provider, &priors, &cfg, a.seed)?
            } else {
                run_mcmc(&z, &pts, &graph, provider, &priors, &cfg, a.seed)?
            };
            let file = fs::File::create(a.out.join(CHAIN_FILE))?;
            chain.write_csv(std::io::BufWriter::new(file))?;
            let summary = chain.summary()?;
            write_json(&a.out.join("summary.json"), &summary)?;
            if summary.r.mean < bounds.r.0 {
                warn_low_r(summary.r.mean, bounds.r.0);
            }
            for (name, p) in [("phi", &summary.phi), ("nu", &summary.nu), ("r", &summary.r)] {
                println!(
                    "{name}: mean {:.4} sd {:.4} 95% CI ({:.4}, {:.4}) ESS {:.0} ({:.1}/min) acceptance {:.2}",
                    p.mean, p.sd, p.q025, p.q975, p.ess, p.ess_per_min, p.acceptance
                );
            }
        }
        Mode::Mle => {
            let cfg = MleConfig {
                tol: a.tol,
                variogram: VariogramConfig { seed: a.seed, ..VariogramConfig::default() },
                ..MleConfig::default()
            };
            record.mle = Some(cfg.clone());
            let res: MleResult = match &bank {
                Some(b) => fit_mle_surrogate(&z, &pts, &graph, b, &cfg)?,
                None => fit_mle(&z, &pts, &graph, provider, &cfg)?,
            };
            record.variogram = Some(res.init);
            write_json(&a.out.join(FIT_RECORD), &record)?;
            write_json(&a.out.join(ESTIMATE_FILE), &res)?;
            if res.estimate.r <= bounds.r.0 {
                warn_low_r(res.estimate.r, bounds.r.0);
            }
            let e = res.estimate;
            println!(
                "phi {:.5} nu {:.4} r {:.4} loglik {:.3} converged {} iterations {}",
                e.phi, e.nu, e.r, res.loglik, res.converged, res.iterations
            );
        }
    }
    Ok(())
}

fn warn_low_r(r: f64, floor: f64) {
    eprintln!(
        "warning: estimated r = {r:.3} is at or below {floor}; the surrogate was not trained on weaker spatial \
         signal and results there are unreliable; r is clamped to {floor}"
    );
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    if a.stride == 0 {
        return Err(usage("--stride must be at least 1"));
    }
    let st = Standardization::load(&a.fit)?;
    let rec_path = a.fit.join(FIT_RECORD);
    let record: FitRecord = serde_json::from_str(
        &fs::read_to_string(&rec_path).with_context(|| format!("cannot read fit record {}", rec_path.display()))?,
    )?;
    require_parent(&a.out)?;
    let bayes = record.mode == "mcmc";
    let test = SiteTable::read(&a.test, false)?;
    if test.len() == 0 {
        PredictionResult { draw_means: bayes.then(Vec::new), ..Default::default() }.write_csv(&[], fs::File::create(&a.out)?)?;
        return Ok(());
    }
    let train = SiteTable::read(&a.train, true)?;
    let z = st.standardize(&train)?;
    let pts = st.points(&train);
    let test_pts = st.points(&test);
    let m = a.m.unwrap_or(record.m).min(pts.len());
    let obs = Observed { points: &pts, data: &z };
    let std_pred = if bayes {
        let cfg = record.mcmc.as_ref().context("fit record lacks the chain settings")?;
        let path = a.fit.join(CHAIN_FILE);
        let chain = Chain::read_csv(fs::File::open(&path).with_context(|| format!("cannot open {}", path.display()))?, cfg.burn_in)?;
        if st.hierarchical {
            let (xt, xs) = (st.design(&train)?, st.design(&test)?);
            predict_bayes(&obs, &test_pts, &chain, a.stride, m, Some(Trend { train: &xt, test: &xs }))?
        } else {
            predict_bayes(&obs, &test_pts, &chain, a.stride, m, None)?
        }
    } else {
        let path = a.fit.join(ESTIMATE_FILE);
        let res: MleResult =
            serde_json::from_str(&fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?)?;
        predict_sites(&obs, &test_pts, &res.estimate, 0.0, 1.0, m)?
    };
    let trend = st.trend_at(&test)?;
    let out = PredictionResult {
        mean: std_pred.mean.iter().zip(&trend).map(|(v, t)| v * st.scale + t).collect(),
        variance: std_pred.variance.iter().map(|v| v * st.scale * st.scale).collect(),
        ..std_pred
    };
    out.write_csv(&test.coords, fs::File::create(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?)?;
    if let Some(truth) = &test.z {
        println!("prediction MSE {:.6}", out.mse(truth)?);
    }
    Ok(())
}

fn parse_settings(s: &str) -> Result<Vec<(String, CovarianceParams)>> {
    if s == "paper3" {
        return Ok(paper_settings());
    }
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let v = crate::parse_theta(p).map_err(usage)?;
            let t = CovarianceParams::new(v[0], v[1], v[2]).map_err(|e| usage(e.to_string()))?;
            Ok((p.trim().to_string(), t))
        })
        .collect()
}

pub fn study(a: &StudyArgs) -> Result<()> {
    if a.bank.is_some() == a.exact {
        return Err(usage("pass exactly one of --bank and --exact"));
    }
    let mode = match a.mode {
        Mode::Mcmc => StudyMode::Mcmc,
        Mode::Mle => StudyMode::Mle,
    };
    let mut cfg = match a.scale {
        Scale::Desk => StudyConfig::desk(mode, a.seed),
        Scale::Paper => StudyConfig::paper(mode, a.seed),
    };
    cfg.settings = parse_settings(&a.settings)?;
    let bank = a.bank.as_deref().map(open_bank).transpose()?;
    if let Some(b) = &bank {
        cfg.m = b.m();
    }
    if let Some(m) = a.m {
        if bank.as_ref().is_some_and(|b| b.m() != m) {
            bail!("bank conditions on {} neighbours, --m asks for {m}", cfg.m);
        }
        cfg.m = m;
    }
    if let Some(v) = a.replicates {
        cfg.replicates = v;
    }
    if let Some(v) = a.n_min {
        cfg.n_range.0 = v;
    }
    if let Some(v) = a.n_max {
        cfg.n_range.1 = v;
    }
    if let Some(v) = a.iterations {
        cfg.mcmc.iterations = v;
    }
    if let Some(v) = a.burn_in {
        cfg.mcmc.burn_in = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    make_dir(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let solver = match &bank {
        Some(b) => Solver::Surrogate(b),
        None => Solver::Exact,
    };
    let report = run_study(&cfg, solver)?;
    report.write_replicates_csv(fs::File::create(a.out.join("replicates.csv"))?)?;
    report.write_table_csv(fs::File::create(a.out.join("table.csv"))?)?;
    write_json(&a.out.join("report.json"), &report)?;
    let mut table = Vec::new();
    report.write_table_csv(&mut table)?;
    print!("{}", String::from_utf8_lossy(&table));
    let failed: Vec<&str> = report.replicates.iter().filter_map(|r| r.error.as_deref()).collect();
    if !failed.is_empty() {
        eprintln!("{} of {} replicates failed; first error: {}", failed.len(), report.replicates.len(), failed[0]);
    }
    if report.success_rate() < 0.8 {
        bail!("only {:.0}% of replicates succeeded", 100.0 * report.success_rate());
    }
    Ok(())
}
