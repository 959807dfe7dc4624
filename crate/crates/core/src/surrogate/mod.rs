//! Neural replacements for the per-site Kriging solves.
//!
//! Each site with a full conditioning set is described by the `2m` neighbor offsets
//! scaled by the range, followed by `r` and `nu`. A bank holds one weight network
//! and one log-variance network for each of six overlapping `r` intervals.

mod bank;
mod data;
pub mod mlp;

pub use bank::{load_bank, load_bank_expecting, save_bank, BANK_FORMAT_VERSION};
pub use data::{generate_training_data, DataConfig, TrainingSet};
pub use mlp::{mse_and_gradient, train, Dataset, Layer, MlpModel, TrainConfig, TrainedModel};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel::{CovarianceParams, Matern, ParamBounds};
use crate::rng::derive_seed;
use crate::spatial::{OrderedNeighborGraph, Point};
use crate::vecchia::{exact_kriging_with, KrigingProvider, KrigingSolution};

/// Length of the feature vector for conditioning-set size `m`.
pub fn feature_len(m: usize) -> usize {
    2 * m + 2
}

/// `(s_j - s_i) / phi` for each neighbor in the given order, then `r` and `nu`.
pub fn build_features(site: &Point, neighbors: &[Point], theta: &CovarianceParams) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(feature_len(neighbors.len()));
    write_features(&mut out, site, neighbors, theta)?;
    Ok(out)
}

fn write_features(
    out: &mut Vec<f64>,
    site: &Point,
    neighbors: &[Point],
    theta: &CovarianceParams,
) -> Result<()> {
    if !(theta.phi > 0.0) || !theta.phi.is_finite() {
        return Err(Error::InvalidArgument(format!("phi must be > 0, got {}", theta.phi)));
    }
    let inv = 1.0 / theta.phi;
    for nb in neighbors {
        out.push((nb[0] - site[0]) * inv);
        out.push((nb[1] - site[1]) * inv);
    }
    out.push(theta.r);
    out.push(theta.nu);
    Ok(())
}

/// An interval of `r` with open or closed ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RInterval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl RInterval {
    pub const fn new(lo: f64, hi: f64, lo_closed: bool, hi_closed: bool) -> Self {
        Self { lo, hi, lo_closed, hi_closed }
    }

    pub fn contains(&self, r: f64) -> bool {
        let above = if self.lo_closed { r >= self.lo } else { r > self.lo };
        let below = if self.hi_closed { r <= self.hi } else { r < self.hi };
        above && below
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// The six overlapping training intervals of `r`.
pub const R_BINS: [RInterval; 6] = [
    RInterval::new(0.18, 0.52, false, true),
    RInterval::new(0.38, 0.62, true, true),
    RInterval::new(0.58, 0.82, true, true),
    RInterval::new(0.78, 0.92, true, true),
    RInterval::new(0.88, 0.96, true, true),
    RInterval::new(0.94, 1.0, true, false),
];

/// Outcome of [`select_bin`]; `clamped` is set when `r` fell outside `(0.18, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinChoice {
    pub index: usize,
    pub clamped: bool,
}

/// Zero-based index of the bin whose center is nearest `r` among those containing it.
///
/// Values at or below 0.18 map to the first bin and values at or above 1 to the
/// last, with `clamped` set.
pub fn select_bin(r: f64) -> BinChoice {
    select_bin_in(&R_BINS, r)
}

pub fn select_bin_in(bins: &[RInterval], r: f64) -> BinChoice {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in bins.iter().enumerate() {
        if b.contains(r) {
            let d = (r - b.center()).abs();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
    }
    match best {
        Some((index, _)) => BinChoice { index, clamped: false },
        None => {
            // nearest endpoint
            let index = bins
                .iter()
                .enumerate()
                .map(|(i, b)| (i, (r - b.lo).abs().min((r - b.hi).abs())))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
                .0;
            BinChoice { index, clamped: true }
        }
    }
}

/// Networks for one `r` interval.
#[derive(Debug, Clone, PartialEq)]
pub struct BinModels {
    pub interval: RInterval,
    pub weights: MlpModel,
    pub log_variance: MlpModel,
}

/// Everything needed to rebuild a bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub data: DataConfig,
    pub weight_hidden: Vec<usize>,
    pub variance_hidden: Vec<usize>,
    pub train: TrainConfig,
    pub seed: u64,
}

impl BankConfig {
    /// Small training profile: 20 fields of 1500 to 3000 sites, 5 epochs. Mini-batches
    /// of 32 keep the number of optimizer steps in the thousands at this data size.
    pub fn desk(m: usize, seed: u64) -> Self {
        Self {
            data: DataConfig::desk(m),
            weight_hidden: vec![160, 120],
            variance_hidden: vec![40],
            train: TrainConfig {
                epochs: 5,
                batch_size: 32,
                ..TrainConfig::default()
            },
            seed,
        }
    }

    /// 200 fields of 5000 to 15000 sites, 25 epochs, batches of 500.
    pub fn full(m: usize, seed: u64) -> Self {
        Self {
            data: DataConfig::full(m),
            train: TrainConfig::default(),
            ..Self::desk(m, seed)
        }
    }
}

/// Training summary of one network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelLoss {
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMetadata {
    pub m: usize,
    pub envelope: ParamBounds,
    /// SHA-256 over the generated training rows of all bins.
    pub data_hash: String,
    pub config: Option<BankConfig>,
    pub losses: Vec<(ModelLoss, ModelLoss)>,
}

/// Six bins of trained networks sharing one conditioning-set size.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateBank {
    bins: Vec<BinModels>,
    meta: BankMetadata,
}

impl SurrogateBank {
    pub fn new(bins: Vec<BinModels>, meta: BankMetadata) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::InvalidArgument("a bank needs at least one bin".into()));
        }
        let m = meta.m;
        for (i, b) in bins.iter().enumerate() {
            let ok = b.weights.input_dim() == feature_len(m)
                && b.weights.output_dim() == m
                && b.log_variance.input_dim() == feature_len(m)
                && b.log_variance.output_dim() == 1;
            if !ok {
                return Err(Error::BankFormat(format!(
                    "bin {i} networks do not match m = {m}"
                )));
            }
        }
        Ok(Self { bins, meta })
    }

    pub fn m(&self) -> usize {
        self.meta.m
    }

    pub fn bins(&self) -> &[BinModels] {
        &self.bins
    }

    pub fn metadata(&self) -> &BankMetadata {
        &self.meta
    }

    pub fn envelope(&self) -> &ParamBounds {
        &self.meta.envelope
    }

    pub fn intervals(&self) -> Vec<RInterval> {
        self.bins.iter().map(|b| b.interval).collect()
    }

    pub fn select_bin(&self, r: f64) -> BinChoice {
        select_bin_in(&self.intervals(), r)
    }

    /// Weights and log-variance for `rows` feature vectors stored row-major.
    pub fn predict_features(&self, bin: usize, features: &[f64], rows: usize) -> Result<Vec<KrigingSolution>> {
        let models = self.bins.get(bin).ok_or_else(|| {
            Error::InvalidArgument(format!("bin {bin} does not exist in a bank of {}", self.bins.len()))
        })?;
        let w = models.weights.forward_batch(features, rows)?;
        let v = models.log_variance.forward_batch(features, rows)?;
        Ok((0..rows)
            .map(|c| KrigingSolution {
                weights: w.column(c).iter().copied().collect(),
                log_variance: v[(0, c)].min(0.0),
            })
            .collect())
    }
}

/// Trains all twelve networks. The bins are processed in parallel.
pub fn train_bank(config: &BankConfig) -> Result<SurrogateBank> {
    let m = config.data.m;
    let p = feature_len(m);
    let results: Vec<Result<(BinModels, TrainingSet, ModelLoss, ModelLoss)>> = R_BINS
        .par_iter()
        .enumerate()
        .map(|(i, interval)| {
            let mut data_cfg = config.data.clone();
            data_cfg.r_range = (interval.lo, interval.hi);
            let set = generate_training_data(&data_cfg, derive_seed(config.seed, i as u64))?;
            let (w, v) = train_bin(&set, config, derive_seed(config.seed, 100 + i as u64))?;
            let wl = ModelLoss { train: w.train_loss, validation: w.validation_loss };
            let vl = ModelLoss { train: v.train_loss, validation: v.validation_loss };
            Ok((
                BinModels { interval: *interval, weights: w.model, log_variance: v.model },
                set,
                wl,
                vl,
            ))
        })
        .collect();
    let mut bins = Vec::with_capacity(R_BINS.len());
    let mut losses = Vec::with_capacity(R_BINS.len());
    let mut hasher = Sha256::new();
    for res in results {
        let (bin, set, wl, vl) = res?;
        debug_assert_eq!(set.features.len(), set.rows() * p);
        set.hash_into(&mut hasher);
        bins.push(bin);
        losses.push((wl, vl));
    }
    let meta = BankMetadata {
        m,
        envelope: ParamBounds::TRAINING_ENVELOPE,
        data_hash: hex(&hasher.finalize()),
        config: Some(config.clone()),
        losses,
    };
    SurrogateBank::new(bins, meta)
}

/// Fits the weight and log-variance networks of one bin on an existing data set.
pub fn train_bin(set: &TrainingSet, config: &BankConfig, seed: u64) -> Result<(TrainedModel, TrainedModel)> {
    let m = set.m;
    let p = feature_len(m);
    let mut wdims = vec![p];
    wdims.extend(&config.weight_hidden);
    wdims.push(m);
    let mut vdims = vec![p];
    vdims.extend(&config.variance_hidden);
    vdims.push(1);
    let wdata = Dataset { inputs: &set.features, targets: &set.weights, input_dim: p, output_dim: m };
    let vdata = Dataset { inputs: &set.features, targets: &set.log_variance, input_dim: p, output_dim: 1 };
    let w = train(&wdata, &wdims, &config.train, derive_seed(seed, 0))?;
    let v = train(&vdata, &vdims, &config.train, derive_seed(seed, 1))?;
    Ok((w, v))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Surrogate solution for one full conditioning set, in the bin selected from `theta.r`.
pub fn surrogate_kriging(
    bank: &SurrogateBank,
    site: &Point,
    neighbors: &[Point],
    theta: &CovarianceParams,
) -> Result<KrigingSolution> {
    bank.envelope().check(theta)?;
    if neighbors.len() != bank.m() {
        return Err(Error::DimensionMismatch { expected: bank.m(), got: neighbors.len() });
    }
    let bin = bank.select_bin(theta.r).index;
    let x = build_features(site, neighbors, theta)?;
    Ok(bank.predict_features(bin, &x, 1)?.remove(0))
}

/// Which bin a [`SurrogateProvider`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinPolicy {
    /// Selected from `r` on every call.
    Auto,
    Fixed(usize),
}

/// [`KrigingProvider`] backed by a bank. Sites with fewer than `m` predecessors are
/// solved exactly.
pub struct SurrogateProvider<'a> {
    bank: &'a SurrogateBank,
    policy: BinPolicy,
}

/// Rows per forward pass.
const FORWARD_CHUNK: usize = 1024;

impl<'a> SurrogateProvider<'a> {
    pub fn new(bank: &'a SurrogateBank) -> Self {
        Self { bank, policy: BinPolicy::Auto }
    }

    pub fn with_bin(bank: &'a SurrogateBank, bin: usize) -> Self {
        Self { bank, policy: BinPolicy::Fixed(bin) }
    }

    pub fn bank(&self) -> &SurrogateBank {
        self.bank
    }

    pub fn bin(&self, r: f64) -> usize {
        match self.policy {
            BinPolicy::Auto => self.bank.select_bin(r).index,
            BinPolicy::Fixed(b) => b,
        }
    }
}

impl KrigingProvider for SurrogateProvider<'_> {
    fn solve_graph(
        &self,
        points: &[Point],
        graph: &OrderedNeighborGraph,
        theta: &CovarianceParams,
    ) -> Result<Vec<KrigingSolution>> {
        theta.validate()?;
        self.bank.envelope().check(theta)?;
        let m = self.bank.m();
        if graph.m() != m {
            return Err(Error::BankMismatch { found: m, requested: graph.m() });
        }
        let bin = self.bin(theta.r);
        let n = graph.len();
        let first_full = (0..n).find(|&p| graph.neighbors(p).len() == m).unwrap_or(n);
        let kern = Matern::new(theta.phi, theta.nu)?;
        let mut out: Vec<KrigingSolution> = (0..first_full)
            .map(|pos| {
                let (site, nbrs) = graph.site_and_neighbors(points, pos);
                exact_kriging_with(&kern, theta.r, &site, &nbrs)
            })
            .collect::<Result<_>>()?;
        let positions: Vec<usize> = (first_full..n).collect();
        let chunks: Vec<Result<Vec<KrigingSolution>>> = positions
            .par_chunks(FORWARD_CHUNK)
            .map(|chunk| {
                let mut x = Vec::with_capacity(chunk.len() * feature_len(m));
                let mut nbrs = Vec::with_capacity(m);
                for &pos in chunk {
                    let order = graph.order();
                    let site = points[order[pos]];
                    nbrs.clear();
                    nbrs.extend(graph.neighbors(pos).iter().map(|&q| points[order[q]]));
                    if nbrs.len() != m {
                        return Err(Error::InvalidArgument(format!(
                            "position {pos} has {} neighbors after a full set",
                            nbrs.len()
                        )));
                    }
                    write_features(&mut x, &site, &nbrs, theta)?;
                }
                self.bank.predict_features(bin, &x, chunk.len())
            })
            .collect();
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "surrogate"
    }

    fn bin_for(&self, r: f64) -> Option<usize> {
        Some(self.bin(r))
    }
}
