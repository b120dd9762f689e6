//! Module-toggle and aggregation-mode grids: one train and evaluation per row
//! and seed, reduced to per-row medians.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AggregationMode, RunConfig};
use crate::evaluate::Provenance;
use crate::io::manifest::Dataset;
use crate::io::read_bytes;
use crate::run::{evaluate_run, train_run, Threshold};
use crate::{Result, StanError};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    #[serde(default = "default_true")]
    pub sfso: bool,
    #[serde(default = "default_true")]
    pub stfl: bool,
    #[serde(default = "default_true")]
    pub ca: bool,
    #[serde(default = "default_mode")]
    pub aggregation_mode: AggregationMode,
}

fn default_mode() -> AggregationMode {
    AggregationMode::Stan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
    /// Seeds shared by every row; defaults to the run config's seed.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let g: Self = serde_json::from_slice(&read_bytes(path)?)
            .map_err(|e| StanError::Config(format!("{}: {e}", path.display())))?;
        Ok(g)
    }

    /// Run configurations for every row, validated up front.
    pub fn configs(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        if self.rows.is_empty() {
            return Err(StanError::Config("ablation grid has no rows".into()));
        }
        if self.seeds.as_ref().is_some_and(Vec::is_empty) {
            return Err(StanError::Config("ablation grid seeds list is empty".into()));
        }
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut cfg = base.clone();
                cfg.sfso.enabled = row.sfso;
                cfg.stfl.enabled = row.stfl;
                cfg.ca.enabled = row.ca;
                cfg.stfl.aggregation_mode = row.aggregation_mode;
                cfg.validate().map_err(|e| {
                    StanError::Config(format!("grid row {} ({}): {e}", i + 1, row.name))
                })?;
                Ok(cfg)
            })
            .collect()
    }

    pub fn seeds(&self, base: &RunConfig) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![base.seed])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub acc: f64,
    pub auroc: f64,
    pub oscr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowResult {
    pub row: AblationRow,
    pub runs: Vec<SeedResult>,
    pub acc: f64,
    pub auroc: f64,
    pub oscr: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains and evaluates every row for every seed. `progress` sees each
/// finished run.
pub fn run_ablation(
    base: &RunConfig,
    grid: &AblationGrid,
    ds: &Dataset,
    threads: usize,
    progress: &mut dyn FnMut(&AblationRow, &SeedResult),
) -> Result<Vec<RowResult>> {
    let configs = grid.configs(base)?;
    let seeds = grid.seeds(base);
    let mut out = Vec::with_capacity(configs.len());
    for (row, cfg) in grid.rows.iter().zip(configs) {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let trained = train_run(&cfg, ds)?;
            let provenance = Provenance {
                config_hash: cfg.model().hash(),
                seed,
            };
            // ACC, AUROC and OSCR are threshold-free.
            let ev = evaluate_run(&trained.model, &trained.store, ds, Threshold::Fixed(f64::NEG_INFINITY), &provenance, threads)?;
            let r = SeedResult {
                seed,
                acc: ev.report.acc,
                auroc: ev.report.auroc,
                oscr: ev.report.oscr,
            };
            progress(row, &r);
            runs.push(r);
        }
        let col = |f: fn(&SeedResult) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
        out.push(RowResult {
            row: row.clone(),
            acc: col(|r| r.acc),
            auroc: col(|r| r.auroc),
            oscr: col(|r| r.oscr),
            runs,
        });
    }
    Ok(out)
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let err = |e: csv::Error| StanError::Data(format!("ablation csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| StanError::Data(format!("ablation csv: {e}")))
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

pub const SUMMARY_HEADER: [&str; 9] =
    ["model", "module1", "module2", "module3", "module4", "aggregation_mode", "acc", "auroc", "oscr"];

/// Median metrics per row. `module1..4` mark backbone, SFSO, STFL and CA.
pub fn summary_csv(results: &[RowResult]) -> Result<Vec<u8>> {
    let rows = results
        .iter()
        .map(|r| {
            vec![
                r.row.name.clone(),
                flag(true),
                flag(r.row.sfso),
                flag(r.row.stfl),
                flag(r.row.ca),
                r.row.aggregation_mode.name().to_string(),
                format!("{:.6}", r.acc),
                format!("{:.6}", r.auroc),
                format!("{:.6}", r.oscr),
            ]
        })
        .collect();
    csv_bytes(&SUMMARY_HEADER, rows)
}

/// Every individual run.
pub fn runs_csv(results: &[RowResult]) -> Result<Vec<u8>> {
    let rows = results
        .iter()
        .flat_map(|r| {
            r.runs.iter().map(move |s| {
                vec![
                    r.row.name.clone(),
                    s.seed.to_string(),
                    format!("{:.6}", s.acc),
                    format!("{:.6}", s.auroc),
                    format!("{:.6}", s.oscr),
                ]
            })
        })
        .collect();
    csv_bytes(&["model", "seed", "acc", "auroc", "oscr"], rows)
}
