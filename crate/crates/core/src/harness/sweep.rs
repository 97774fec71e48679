//! Cartesian parameter sweeps.
//!
//! Grid syntax: `key=v1,v2;other.key=v3,v4` with dotted config paths. All
//! points share the base seed, so differences between points come from the
//! parameters alone; put `seed=1,2,3` in the grid for replicates.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::{parse_value, set_path, ExperimentConfig};
use super::run::{run_experiment, write_atomic, Summary};

pub const DEFAULT_MAX_POINTS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<toml::Value>)>,
}

impl Grid {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut axes: Vec<(String, Vec<toml::Value>)> = Vec::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) =
                part.split_once('=').ok_or_else(|| Error::Config(vec![format!("grid: {part:?} lacks '='")]))?;
            let key = key.trim().to_string();
            if axes.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(vec![format!("grid: {key} appears twice")]));
            }
            let values: Vec<toml::Value> =
                values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(parse_value).collect();
            if values.is_empty() {
                return Err(Error::Config(vec![format!("grid: {key} has no values")]));
            }
            axes.push((key, values));
        }
        if axes.is_empty() {
            return Err(Error::Config(vec!["grid: no axes".into()]));
        }
        Ok(Self { axes })
    }

    pub fn cardinality(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    /// Points in row-major order, last axis fastest.
    pub fn points(&self) -> Vec<Vec<(String, toml::Value)>> {
        let mut out = vec![Vec::new()];
        for (key, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut p = prefix.clone();
                        p.push((key.clone(), v.clone()));
                        p
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub params: Vec<(String, String)>,
    pub dir: PathBuf,
    pub summary: Summary,
}

/// Runs every grid point in parallel under `base.output.dir/point-NNNN` and
/// writes `index.csv` there.
pub fn sweep(base: &ExperimentConfig, grid: &Grid, max_points: usize) -> Result<Vec<SweepPoint>> {
    let n = grid.cardinality();
    if n > max_points {
        return Err(Error::Config(vec![format!("grid has {n} points, above the cap of {max_points}")]));
    }
    let table = base.to_table()?;
    let root = base.output.dir.clone();
    let configs: Vec<(usize, Vec<(String, String)>, ExperimentConfig)> = grid
        .points()
        .into_iter()
        .enumerate()
        .map(|(i, point)| {
            let mut t = table.clone();
            for (k, v) in &point {
                set_path(&mut t, k, v.clone())?;
            }
            let dir = root.join(format!("point-{i:04}"));
            set_path(&mut t, "output.dir", toml::Value::String(dir.to_string_lossy().into_owned()))?;
            let cfg = ExperimentConfig::from_table(t).map_err(|e| match e {
                Error::Config(issues) => Error::Config(issues.into_iter().map(|m| format!("point {i}: {m}")).collect()),
                other => other,
            })?;
            let params = point.into_iter().map(|(k, v)| (k, render(&v))).collect();
            Ok((i, params, cfg))
        })
        .collect::<Result<_>>()?;
    let points: Vec<SweepPoint> = configs
        .into_par_iter()
        .map(|(index, params, cfg)| {
            let (summary, _) = run_experiment(&cfg)?;
            Ok(SweepPoint { index, params, dir: cfg.output.dir.clone(), summary })
        })
        .collect::<Result<_>>()?;
    write_atomic(&root.join("index.csv"), &index_csv(grid, &points)?)?;
    Ok(points)
}

fn render(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn index_csv(grid: &Grid, points: &[SweepPoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["point".to_string()];
    header.extend(grid.axes.iter().map(|(k, _)| k.clone()));
    header.extend(["final_accuracy", "epsilon_final", "metrics"].map(String::from));
    w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
    for p in points {
        let mut rec = vec![p.index.to_string()];
        rec.extend(p.params.iter().map(|(_, v)| v.clone()));
        rec.push(p.summary.final_accuracy.to_string());
        rec.push(p.summary.epsilon_final.to_string());
        rec.push(p.dir.join("metrics.csv").to_string_lossy().into_owned());
        w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing_and_order() {
        let g = Grid::parse("rule.record_bound=2,5; attack.kind=none,ipm,alie").unwrap();
        assert_eq!(g.cardinality(), 6);
        let pts = g.points();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1][1].1, toml::Value::String("ipm".into()));
        assert_eq!(pts[3][0].1, toml::Value::Integer(5));
    }

    #[test]
    fn grid_errors() {
        assert!(Grid::parse("").is_err());
        assert!(Grid::parse("a").is_err());
        assert!(Grid::parse("a=1;a=2").is_err());
        assert!(Grid::parse("a=").is_err());
    }
}
