use nnvecchia::diagnostics::{run_study, Solver, StudyConfig, StudyMode, THETA_3};
use nnvecchia::inference::{fit_mle, run_mcmc, McmcConfig, MleConfig, PriorSpec};
use nnvecchia::kernel::{CovarianceParams, FullParams};
use nnvecchia::predict::{predict_bayes, predict_sites, predict_sites_surrogate, Observed};
use nnvecchia::rng::rng_from_seed;
use nnvecchia::spatial::{build_graph, LocationSet, Point};
use nnvecchia::surrogate::{load_bank, load_bank_expecting, save_bank, train_bank, BankConfig, SurrogateProvider};
use nnvecchia::vecchia::{simulate_field, vecchia_loglik, CachedExactProvider, SIMULATION_M};
use nnvecchia::Error;
use rand::Rng;

fn field(n: usize, theta: CovarianceParams, seed: u64) -> (Vec<Point>, Vec<f64>) {
    let mut rng = rng_from_seed(seed);
    let pts: Vec<Point> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let g = build_graph(&LocationSet::from_unit_coords(pts.clone()).unwrap(), SIMULATION_M).unwrap();
    let z = simulate_field(&pts, &g, &FullParams::standard(theta), seed + 1).unwrap();
    (pts, z)
}

#[test]
fn simulate_fit_predict() {
    let (pts, z) = field(800, THETA_3, 40);
    let (train, test) = pts.split_at(720);
    let (z_train, z_test) = z.split_at(720);
    let g = build_graph(&LocationSet::from_unit_coords(train.to_vec()).unwrap(), 12).unwrap();
    let provider = CachedExactProvider::new(train, &g);
    let res = fit_mle(z_train, train, &g, &provider, &MleConfig::default()).unwrap();
    assert!(res.converged);
    assert!((res.estimate.r - THETA_3.r).abs() < 0.1, "{:?}", res.estimate);
    let truth_ll = vecchia_loglik(z_train, train, &g, &provider, &FullParams::standard(THETA_3)).unwrap();
    assert!(res.loglik >= truth_ll);

    let obs = Observed { points: train, data: z_train };
    let fitted = predict_sites(&obs, test, &res.estimate, 0.0, 1.0, 12).unwrap();
    let truth = predict_sites(&obs, test, &THETA_3, 0.0, 1.0, 12).unwrap();
    let (a, b) = (fitted.mse(z_test).unwrap(), truth.mse(z_test).unwrap());
    assert!(a < 0.5 && (a / b - 1.0).abs() < 0.25, "fitted {a} vs truth {b}");

    let cfg = McmcConfig { iterations: 300, burn_in: 100, init: Some(res.estimate), ..McmcConfig::default() };
    let chain = run_mcmc(z_train, train, &g, &provider, &PriorSpec::default(), &cfg, 3).unwrap();
    let bayes = predict_bayes(&obs, test, &chain, 20, 12, None).unwrap();
    assert_eq!(bayes.draw_means.as_ref().unwrap().len(), 10);
    assert!(bayes.mse(z_test).unwrap() < 0.5);
}

#[test]
fn trained_bank_survives_a_file_round_trip() {
    let mut cfg = BankConfig::desk(6, 17);
    cfg.data.replicates = 2;
    cfg.data.n_range = (250, 300);
    cfg.train.epochs = 2;
    let bank = train_bank(&cfg).unwrap();
    assert_eq!(bank.bins().len(), 6);
    assert_eq!(bank.metadata().config.as_ref(), Some(&cfg));

    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("pipeline-bank.bin");
    save_bank(&bank, &path).unwrap();
    let back = load_bank(&path).unwrap();
    assert_eq!(back, bank);
    assert!(matches!(load_bank_expecting(&path, 7), Err(Error::BankMismatch { .. })));

    let (pts, z) = field(300, THETA_3, 5);
    let g = build_graph(&LocationSet::from_unit_coords(pts.clone()).unwrap(), 6).unwrap();
    let p = FullParams::standard(THETA_3);
    let a = vecchia_loglik(&z, &pts, &g, &SurrogateProvider::new(&bank), &p).unwrap();
    let b = vecchia_loglik(&z, &pts, &g, &SurrogateProvider::new(&back), &p).unwrap();
    assert_eq!(a, b);
    assert!(a.is_finite());

    let obs = Observed { points: &pts[..250], data: &z[..250] };
    let pred = predict_sites_surrogate(&obs, &pts[250..], &THETA_3, 0.0, 1.0, &back).unwrap();
    assert!(pred.variance.iter().all(|v| *v > 0.0 && *v <= 1.0));

    // retraining with the same seed is bit-identical
    assert_eq!(train_bank(&cfg).unwrap(), bank);
    let _ = std::fs::remove_file(&path);
}

#[test]
fn small_study_is_reproducible() {
    let mut cfg = StudyConfig::desk(StudyMode::Mle, 3);
    cfg.replicates = 2;
    cfg.n_range = (200, 260);
    cfg.m = 8;
    let a = run_study(&cfg, Solver::Exact).unwrap();
    let b = run_study(&cfg, Solver::Exact).unwrap();
    assert_eq!(a.replicates.len(), 6);
    assert_eq!(a.success_rate(), 1.0);
    for (x, y) in a.replicates.iter().zip(&b.replicates) {
        assert_eq!((x.n, x.estimate, x.prediction_mse), (y.n, y.estimate, y.prediction_mse));
    }
    let mut table = Vec::new();
    a.write_table_csv(&mut table).unwrap();
    let table = String::from_utf8(table).unwrap();
    assert!(table.starts_with("metric,parameter,theta1,theta2,theta3"), "{table}");
    let mut reps = Vec::new();
    a.write_replicates_csv(&mut reps).unwrap();
    assert_eq!(String::from_utf8(reps).unwrap().lines().count(), 7);
}
