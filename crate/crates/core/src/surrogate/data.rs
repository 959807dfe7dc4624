//! Simulated training rows: random designs, exact solves as targets.

use std::io::{BufRead, BufReader, Read, Write};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{feature_len, write_features};
use crate::error::{Error, Result};
use crate::kernel::{CovarianceParams, Matern};
use crate::rng::{derive_seed, rng_from_seed};
use crate::spatial::{build_graph, LocationSet, Point};
use crate::vecchia::exact_kriging_with;

/// Design of one training set. Each replicate draws its own site count, locations
/// and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub replicates: usize,
    /// Inclusive bounds on the number of sites per replicate.
    pub n_range: (usize, usize),
    pub m: usize,
    pub phi_range: (f64, f64),
    pub nu_range: (f64, f64),
    pub r_range: (f64, f64),
    /// Draw a fresh parameter triple for every site instead of one per replicate.
    #[serde(default)]
    pub per_site_params: bool,
}

impl DataConfig {
    pub fn desk(m: usize) -> Self {
        Self {
            replicates: 20,
            n_range: (1500, 3000),
            m,
            phi_range: (0.005, 0.11),
            nu_range: (0.4, 2.6),
            r_range: (0.18, 0.99),
            per_site_params: false,
        }
    }

    pub fn full(m: usize) -> Self {
        Self {
            replicates: 200,
            n_range: (5000, 15000),
            ..Self::desk(m)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("need at least one replicate".into()));
        }
        if self.m == 0 || self.n_range.0 > self.n_range.1 || self.n_range.0 == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid sizes m = {}, n in {:?}",
                self.m, self.n_range
            )));
        }
        for (name, (lo, hi)) in [("phi", self.phi_range), ("nu", self.nu_range), ("r", self.r_range)] {
            if !(lo <= hi) || !(lo >= 0.0) {
                return Err(Error::InvalidArgument(format!("bad {name} range ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// Row-major feature, weight-target and log-variance-target arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub m: usize,
    pub features: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl TrainingSet {
    pub fn rows(&self) -> usize {
        self.log_variance.len()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        let p = feature_len(self.m);
        &self.features[i * p..(i + 1) * p]
    }

    pub fn weight_row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.m..(i + 1) * self.m]
    }

    fn append(&mut self, other: TrainingSet) {
        self.features.extend(other.features);
        self.weights.extend(other.weights);
        self.log_variance.extend(other.log_variance);
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        for v in self.features.iter().chain(&self.weights).chain(&self.log_variance) {
            h.update(v.to_le_bytes());
        }
    }

    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        super::hex(&h.finalize())
    }

    /// Header `off_x1,off_y1,..,r,nu,w1,..,wm,logvar`, then one line per row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header: Vec<String> = Vec::new();
        for j in 1..=self.m {
            header.push(format!("off_x{j}"));
            header.push(format!("off_y{j}"));
        }
        header.push("r".into());
        header.push("nu".into());
        header.extend((1..=self.m).map(|j| format!("w{j}")));
        header.push("logvar".into());
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.rows() {
            let cells: Vec<String> = self
                .feature_row(i)
                .iter()
                .chain(self.weight_row(i))
                .chain(std::iter::once(&self.log_variance[i]))
                .map(|v| format!("{v:e}"))
                .collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty training CSV".into()))??;
        let cols = header.split(',').count();
        // 2m + 2 + m + 1 columns
        if cols < 6 || (cols - 3) % 3 != 0 {
            return Err(Error::InvalidArgument(format!("unexpected column count {cols}")));
        }
        let m = (cols - 3) / 3;
        let p = feature_len(m);
        let mut set = TrainingSet { m, ..Default::default() };
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", lineno + 2)))?;
            if vals.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, got: vals.len() });
            }
            set.features.extend_from_slice(&vals[..p]);
            set.weights.extend_from_slice(&vals[p..p + m]);
            set.log_variance.push(vals[p + m]);
        }
        Ok(set)
    }
}

/// One row per site with a full conditioning set, over all replicates. Replicates
/// run in parallel and are concatenated in index order.
pub fn generate_training_data(config: &DataConfig, seed: u64) -> Result<TrainingSet> {
    config.validate()?;
    let parts: Vec<Result<TrainingSet>> = (0..config.replicates)
        .into_par_iter()
        .map(|l| replicate(config, derive_seed(seed, l as u64)))
        .collect();
    let mut set = TrainingSet { m: config.m, ..Default::default() };
    for p in parts {
        set.append(p?);
    }
    Ok(set)
}

fn uniform(rng: &mut crate::rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn replicate(config: &DataConfig, seed: u64) -> Result<TrainingSet> {
    let mut rng = rng_from_seed(seed);
    let n = rng.random_range(config.n_range.0..=config.n_range.1);
    let pts: Vec<Point> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let draw = |rng: &mut crate::rng::Rng| {
        CovarianceParams::new(
            uniform(rng, config.phi_range),
            uniform(rng, config.nu_range),
            uniform(rng, config.r_range),
        )
    };
    let mut theta = draw(&mut rng)?;
    let locs = LocationSet::from_unit_coords(pts)?;
    let graph = build_graph(&locs, config.m)?;
    let mut kern = Matern::new(theta.phi, theta.nu)?;
    let m = config.m;
    let mut set = TrainingSet { m, ..Default::default() };
    for pos in 0..graph.len() {
        if graph.neighbors(pos).len() < m {
            continue;
        }
        if config.per_site_params {
            theta = draw(&mut rng)?;
            kern = Matern::new(theta.phi, theta.nu)?;
        }
        let (site, nbrs) = graph.site_and_neighbors(locs.coords(), pos);
        let sol = exact_kriging_with(&kern, theta.r, &site, &nbrs)?;
        write_features(&mut set.features, &site, &nbrs, &theta)?;
        set.weights.extend(sol.weights);
        set.log_variance.push(sol.log_variance);
    }
    Ok(set)
}
