//! Site tables on disk and the standardization sidecar.

use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use nnvecchia::spatial::{LocationSet, Point, ScaleTransform};
use serde::{Deserialize, Serialize};

/// Rows of `x,y[,z][,covariates..]`.
#[derive(Debug, Clone, Default)]
pub struct SiteTable {
    pub coords: Vec<Point>,
    pub z: Option<Vec<f64>>,
    pub covariate_names: Vec<String>,
    /// Row-major, one row per site.
    pub covariates: Vec<Vec<f64>>,
}

impl SiteTable {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn read(path: &Path, require_z: bool) -> Result<Self> {
        let file = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
        Self::from_reader(file, require_z).with_context(|| format!("reading {}", path.display()))
    }

    pub fn from_reader<R: std::io::Read>(input: R, require_z: bool) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header: Vec<String> = rd.headers().context("missing header row")?.iter().map(str::to_string).collect();
        let pos = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
        let (Some(cx), Some(cy)) = (pos("x"), pos("y")) else {
            bail!("header must contain columns x and y, found {header:?}");
        };
        let cz = pos("z");
        if require_z && cz.is_none() {
            bail!("header must contain a z column");
        }
        let cov_cols: Vec<usize> = (0..header.len()).filter(|&c| c != cx && c != cy && Some(c) != cz).collect();
        let mut table = SiteTable {
            covariate_names: cov_cols.iter().map(|&c| header[c].clone()).collect(),
            z: cz.map(|_| Vec::new()),
            ..Default::default()
        };
        for (i, rec) in rd.records().enumerate() {
            let line = i + 2;
            let rec = rec.with_context(|| format!("line {line}: malformed row"))?;
            if rec.len() != header.len() {
                bail!("line {line}: expected {} fields, found {}", header.len(), rec.len());
            }
            let num = |c: usize| -> Result<f64> {
                let cell = &rec[c];
                let v: f64 = cell.parse().with_context(|| format!("line {line}: column {} is not a number: {cell:?}", header[c]))?;
                if !v.is_finite() {
                    bail!("line {line}: column {} is not finite", header[c]);
                }
                Ok(v)
            };
            table.coords.push([num(cx)?, num(cy)?]);
            if let (Some(c), Some(z)) = (cz, table.z.as_mut()) {
                z.push(num(c)?);
            }
            table.covariates.push(cov_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?);
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
        let mut header = vec!["x".to_string(), "y".to_string()];
        if self.z.is_some() {
            header.push("z".into());
        }
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.coords[i][0].to_string(), self.coords[i][1].to_string()];
            if let Some(z) = &self.z {
                rec.push(z[i].to_string());
            }
            rec.extend(self.covariates[i].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        SiteTable {
            coords: rows.iter().map(|&i| self.coords[i]).collect(),
            z: self.z.as_ref().map(|z| rows.iter().map(|&i| z[i]).collect()),
            covariate_names: self.covariate_names.clone(),
            covariates: rows.iter().map(|&i| self.covariates[i].clone()).collect(),
        }
    }

    /// Design matrix with a leading intercept column.
    pub fn design(&self) -> DMatrix<f64> {
        let p = self.covariate_names.len() + 1;
        DMatrix::from_fn(self.len(), p, |i, c| if c == 0 { 1.0 } else { self.covariates[i][c - 1] })
    }
}

/// How raw data map to the standardized process, and back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub coords: ScaleTransform,
    pub lonlat: bool,
    /// Column names of the covariates, in design order after the intercept.
    pub covariates: Vec<String>,
    /// Intercept then covariate coefficients of the trend removed before scaling;
    /// just the mean without covariates.
    pub trend: Vec<f64>,
    /// Divides the detrended values.
    pub scale: f64,
    /// Covariates enter the spatial model instead of being regressed out first.
    pub hierarchical: bool,
}

pub const STANDARDIZATION_FILE: &str = "standardization.json";

impl Standardization {
    /// Fit the trend and scale on a training table.
    pub fn fit(table: &SiteTable, locs: &LocationSet, lonlat: bool, hierarchical: bool) -> Result<Self> {
        let z = table.z.as_ref().expect("training tables carry z");
        let n = z.len() as f64;
        let trend = if table.covariate_names.is_empty() || hierarchical {
            vec![z.iter().sum::<f64>() / n]
        } else {
            let x = table.design();
            let xtx = x.transpose() * &x;
            let beta = xtx
                .cholesky()
                .context("covariate columns are collinear")?
                .solve(&(x.transpose() * DVector::from_column_slice(z)));
            beta.iter().copied().collect()
        };
        let mut st = Standardization {
            coords: *locs.transform(),
            lonlat,
            covariates: table.covariate_names.clone(),
            trend,
            scale: 1.0,
            hierarchical,
        };
        let resid = st.detrend(table)?;
        let mean = resid.iter().sum::<f64>() / n;
        let var = resid.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        if !(var > 0.0) {
            bail!("z has zero variance after detrending");
        }
        st.scale = var.sqrt();
        Ok(st)
    }

    /// Trend at each site of `table`.
    pub fn trend_at(&self, table: &SiteTable) -> Result<Vec<f64>> {
        if self.trend.len() == 1 {
            return Ok(vec![self.trend[0]; table.len()]);
        }
        let cols: Vec<usize> = self
            .covariates
            .iter()
            .map(|name| {
                table
                    .covariate_names
                    .iter()
                    .position(|c| c == name)
                    .with_context(|| format!("table lacks covariate column {name}"))
            })
            .collect::<Result<_>>()?;
        Ok((0..table.len())
            .map(|i| self.trend[0] + cols.iter().zip(&self.trend[1..]).map(|(&c, b)| b * table.covariates[i][c]).sum::<f64>())
            .collect())
    }

    fn detrend(&self, table: &SiteTable) -> Result<Vec<f64>> {
        let z = table.z.as_ref().context("table has no z column")?;
        let t = self.trend_at(table)?;
        Ok(z.iter().zip(&t).map(|(a, b)| a - b).collect())
    }

    pub fn standardize(&self, table: &SiteTable) -> Result<Vec<f64>> {
        Ok(self.detrend(table)?.into_iter().map(|e| e / self.scale).collect())
    }

    pub fn points(&self, table: &SiteTable) -> Vec<Point> {
        table.coords.iter().map(|p| self.coords.apply(p)).collect()
    }

    /// Covariates of `table` in the recorded order, intercept first.
    pub fn design(&self, table: &SiteTable) -> Result<DMatrix<f64>> {
        let cols: Vec<usize> = self
            .covariates
            .iter()
            .map(|name| {
                table
                    .covariate_names
                    .iter()
                    .position(|c| c == name)
                    .with_context(|| format!("table lacks covariate column {name}"))
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(table.len(), cols.len() + 1, |i, c| if c == 0 { 1.0 } else { table.covariates[i][cols[c - 1]] }))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(STANDARDIZATION_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STANDARDIZATION_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| {
            format!("standardization record {} is missing; refusing to predict on the standardized scale", path.display())
        })?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Unit-square locations: rescaled with `lonlat`, otherwise taken as given.
pub fn locations(table: &SiteTable, lonlat: bool) -> Result<LocationSet> {
    if lonlat {
        Ok(LocationSet::scale_to_unit_square(&table.coords)?)
    } else {
        LocationSet::from_unit_coords(table.coords.clone())
            .map_err(anyhow::Error::from)
            .context("coordinates must lie in the unit square; pass --lonlat to rescale raw coordinates")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_covariates_and_reports_bad_lines() {
        let t = SiteTable::from_reader("x,y,z,elev\n0.1,0.2,3.0,10\n0.5,0.5,1.0,20\n".as_bytes(), true).unwrap();
        assert_eq!(t.covariate_names, vec!["elev"]);
        assert_eq!(t.covariates[1], vec![20.0]);
        let err = SiteTable::from_reader("x,y,z\n0.1,0.2,3.0\n0.5,oops,1.0\n".as_bytes(), true).unwrap_err();
        assert!(format!("{err:#}").contains("line 3"), "{err:#}");
    }

    #[test]
    fn regression_standardization_round_trips() {
        let rows = "x,y,z,elev\n0,0,1.0,1\n1,0,3.2,2\n0,1,4.9,3\n1,1,7.1,4\n0.5,0.5,8.8,5\n";
        let t = SiteTable::from_reader(rows.as_bytes(), true).unwrap();
        let locs = locations(&t, true).unwrap();
        let st = Standardization::fit(&t, &locs, true, false).unwrap();
        assert_eq!(st.trend.len(), 2);
        let zs = st.standardize(&t).unwrap();
        let trend = st.trend_at(&t).unwrap();
        for i in 0..t.len() {
            let back = zs[i] * st.scale + trend[i];
            assert!((back - t.z.as_ref().unwrap()[i]).abs() < 1e-12);
        }
        let sd = (zs.iter().map(|v| v * v).sum::<f64>() / (zs.len() - 1) as f64).sqrt();
        assert!((sd - 1.0).abs() < 1e-12);
    }
}
