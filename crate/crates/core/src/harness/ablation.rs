//! Ablation grid: config deltas × seeds, run in parallel, summarized as an
//! aligned table plus machine-readable records.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::dataset::SyntheticDataset;
use super::eval::{evaluate, EvalReport};
use super::train::train;
use crate::error::{Error, Result};

/// A named set of `key = value` overrides applied on top of the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl AblationCell {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn apply(&self, base: &ModelConfig, seed: u64) -> Result<ModelConfig> {
        let mut c = base.clone();
        for (k, v) in &self.overrides {
            c.set(k, v)?;
        }
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

/// Rows mirroring the ablation axes: PG variants, reward signals, λ,
/// baseline on/off and two heads.
pub fn standard_grid() -> Vec<AblationCell> {
    vec![
        AblationCell::new("triplet only", &[("pg", "off"), ("instance", "false"), ("decode", "false")]),
        AblationCell::new("no pg", &[("pg", "off")]),
        AblationCell::new("discrete pg", &[("pg", "discrete-only")]),
        AblationCell::new("continuous pg", &[("pg", "continuous-only")]),
        AblationCell::new("compound pg", &[]),
        AblationCell::new("reward r1", &[("reward", "r1")]),
        AblationCell::new("reward ap", &[("reward", "ap")]),
        AblationCell::new("lambda 10", &[("lambda", "10")]),
        AblationCell::new("lambda 30", &[("lambda", "30")]),
        AblationCell::new("no baseline", &[("beta", "0")]),
        AblationCell::new("two heads", &[("heads", "2")]),
    ]
}

/// Outcome of one (cell, seed) run, evaluated on the test split with the
/// best-validation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub cell: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub runs: usize,
    pub failures: usize,
    /// R@1, R@5, R@10 image→text.
    pub i2t: [Stat; 3],
    /// R@1, R@5, R@10 text→image.
    pub t2i: [Stat; 3],
}

impl AblationRow {
    /// Mean of the two R@1 means.
    pub fn mean_r1(&self) -> f64 {
        (self.i2t[0].mean + self.t2i[0].mean) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub records: Vec<AblationRecord>,
}

impl AblationTable {
    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.cell.len()).max().unwrap_or(4).max(4);
        let mut out = format!(
            "{:<width$}  {:>4}  {:>13}  {:>13}  {:>13}  {:>13}  {:>13}  {:>13}\n",
            "cell", "runs", "i2t R@1", "i2t R@5", "i2t R@10", "t2i R@1", "t2i R@5", "t2i R@10"
        );
        for r in &self.rows {
            out.push_str(&format!("{:<width$}  {:>4}", r.cell, r.runs - r.failures));
            for s in r.i2t.iter().chain(&r.t2i) {
                out.push_str(&format!("  {:>6.3}±{:<6.3}", s.mean, s.std));
            }
            if r.failures > 0 {
                out.push_str(&format!("  ({} failed)", r.failures));
            }
            out.push('\n');
        }
        out
    }
}

fn run_cell(base: &ModelConfig, data: &SyntheticDataset, cell: &AblationCell, seed: u64) -> AblationRecord {
    let result = cell
        .apply(base, seed)
        .and_then(|cfg| train(&cfg, data))
        .and_then(|out| evaluate(&out.model, &data.test));
    let (report, error) = match result {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    AblationRecord {
        cell: cell.name.clone(),
        seed,
        report,
        error,
    }
}

/// One train + test evaluation per (cell, seed). Failing cells are recorded
/// without stopping the grid. `jobs` bounds the worker threads.
pub fn run_ablation(
    base: &ModelConfig,
    data: &SyntheticDataset,
    grid: &[AblationCell],
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationTable> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one cell and one seed".into()));
    }
    let runs: Vec<(&AblationCell, u64)> = grid
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let records: Vec<AblationRecord> = pool.install(|| {
        runs.par_iter()
            .map(|&(cell, seed)| run_cell(base, data, cell, seed))
            .collect()
    });
    let rows = grid
        .iter()
        .map(|cell| {
            let mine: Vec<&AblationRecord> = records.iter().filter(|r| r.cell == cell.name).collect();
            let ok: Vec<&EvalReport> = mine.iter().filter_map(|r| r.report.as_ref()).collect();
            let col = |f: &dyn Fn(&EvalReport) -> f64| Stat::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            AblationRow {
                cell: cell.name.clone(),
                runs: mine.len(),
                failures: mine.len() - ok.len(),
                i2t: [0, 1, 2].map(|i| col(&|r| r.i2t[i])),
                t2i: [0, 1, 2].map(|i| col(&|r| r.t2i[i])),
            }
        })
        .collect();
    Ok(AblationTable { rows, records })
}
