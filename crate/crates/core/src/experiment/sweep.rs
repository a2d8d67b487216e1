//! Grid sweeps over training epochs, dropout and epsilon.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::config::{normalize_key, parse_list, TrainConfig};
use super::dataset::PreparedData;
use super::plot::emit_plots;
use super::results::{
    aggregate, epsilon_table, run_id, table_metrics, write_csv, EpsilonTable, ResultRow, SPLIT_TEST,
    SPLIT_TEST_BEST_VAL,
};
use super::train::train;
use crate::error::{BatError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub epochs_min: usize,
    pub epochs_max: usize,
    pub dropouts: Vec<f64>,
    /// Perturbation sizes; the baseline (0) is always run as well.
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Epoch count used for the comparison table.
    pub table_epochs: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            epochs_min: 3,
            epochs_max: 10,
            dropouts: vec![0.1],
            epsilons: vec![0.01, 0.1, 1.0, 2.0, 5.0],
            seeds: vec![1, 2, 3],
            table_epochs: 4,
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_min == 0 || self.epochs_min > self.epochs_max {
            return Err(BatError::config(format!(
                "bad epoch range {}-{}",
                self.epochs_min, self.epochs_max
            )));
        }
        if self.dropouts.is_empty() || self.seeds.is_empty() {
            return Err(BatError::config("sweep needs at least one dropout and one seed"));
        }
        if self.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(BatError::config("epsilons must be finite and >= 0"));
        }
        if self.dropouts.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(BatError::config("dropouts must lie in [0, 1)"));
        }
        if !(self.epochs_min..=self.epochs_max).contains(&self.table_epochs) {
            return Err(BatError::config(format!(
                "table epochs {} outside {}-{}",
                self.table_epochs, self.epochs_min, self.epochs_max
            )));
        }
        Ok(())
    }

    /// Baseline first, then the configured values, without duplicates.
    pub fn epsilon_axis(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        for &e in &self.epsilons {
            if !out.contains(&e) {
                out.push(e);
            }
        }
        out
    }

    pub fn epoch_axis(&self) -> std::ops::RangeInclusive<usize> {
        self.epochs_min..=self.epochs_max
    }

    /// Number of `(epochs, dropout, epsilon)` cells.
    pub fn cell_count(&self) -> usize {
        self.epoch_axis().count() * self.dropouts.len() * self.epsilon_axis().len()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || BatError::config(format!("bad value {value:?} for {key}"));
        match normalize_key(key).as_str() {
            "sweep-epochs" | "epoch-range" => {
                let (a, b) = value.split_once('-').unwrap_or((value, value));
                self.epochs_min = a.trim().parse().map_err(|_| bad())?;
                self.epochs_max = b.trim().parse().map_err(|_| bad())?;
            }
            "dropouts" => self.dropouts = parse_list(value).map_err(|_| bad())?,
            "epsilons" => self.epsilons = parse_list(value).map_err(|_| bad())?,
            "seeds" => self.seeds = parse_list(value).map_err(|_| bad())?,
            "table-epochs" => self.table_epochs = value.trim().parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFailure {
    pub run_id: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub grid: SweepGrid,
    pub rows: Vec<ResultRow>,
    pub failures: Vec<SweepFailure>,
    /// Number of `(cell, seed)` results produced.
    pub runs: usize,
}

impl SweepResult {
    pub fn table(&self, base: &TrainConfig, split: &str) -> EpsilonTable {
        epsilon_table(
            &self.rows,
            base.task,
            &base.dataset,
            self.grid.table_epochs,
            self.grid.dropouts[0],
            &self.grid.epsilons,
            split,
        )
    }

    /// For each epsilon, the grid cell with the highest mean score.
    pub fn best_over_grid(&self, base: &TrainConfig, split: &str) -> String {
        let mut s = String::new();
        for (metric, label) in table_metrics(base.task) {
            let cells = aggregate(&self.rows, split, metric);
            writeln!(s, "best {label} over the grid ({split}):").unwrap();
            for eps in self.grid.epsilon_axis() {
                let best = cells
                    .iter()
                    .filter(|c| c.key.epsilon() == eps)
                    .max_by(|a, b| a.mean().total_cmp(&b.mean()).then(b.key.cmp(&a.key)));
                if let Some(c) = best {
                    writeln!(
                        s,
                        "  eps={eps:<5} {:.2}  (epochs {}, dropout {})",
                        100.0 * c.mean(),
                        c.key.epochs,
                        c.key.dropout()
                    )
                    .unwrap();
                }
            }
        }
        s
    }

    /// Writes `sweep.csv`, table text and CSV for both model-selection
    /// views, the grid summary, failures, and plots.
    pub fn write(&self, base: &TrainConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| BatError::io(dir, e))?;
        let write = |name: &str, body: &str| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| BatError::io(&p, e))
        };
        write_csv(&dir.join("sweep.csv"), &self.rows)?;
        for (split, stem) in [(SPLIT_TEST, "table"), (SPLIT_TEST_BEST_VAL, "table_best_val")] {
            let t = self.table(base, split);
            write(&format!("{stem}.txt"), &t.render())?;
            write(&format!("{stem}.csv"), &t.to_csv())?;
        }
        write("grid_best.txt", &self.best_over_grid(base, SPLIT_TEST))?;
        let mut f = String::new();
        for x in &self.failures {
            writeln!(f, "{}: {}", x.run_id, x.message).unwrap();
        }
        write("failures.txt", &f)?;
        if !self.rows.is_empty() {
            for (name, svg) in emit_plots(&self.rows, self.grid.dropouts[0])? {
                write(&name, &svg)?;
            }
        }
        Ok(())
    }
}

/// Runs every `(dropout, epsilon, seed)` once for the longest epoch count
/// and reads the shorter cells off its per-epoch records. Jobs run in
/// parallel; a failing job is recorded and the others continue.
pub fn sweep(grid: &SweepGrid, base: &TrainConfig, data: &PreparedData) -> Result<SweepResult> {
    grid.validate()?;
    base.validate()?;
    let mut jobs = Vec::new();
    for &dropout in &grid.dropouts {
        for eps in grid.epsilon_axis() {
            for &seed in &grid.seeds {
                jobs.push((dropout, eps, seed));
            }
        }
    }
    let outcomes: Vec<std::result::Result<Vec<ResultRow>, SweepFailure>> = jobs
        .par_iter()
        .map(|&(dropout, epsilon, seed)| {
            let mut cfg = base.clone();
            cfg.epochs = grid.epochs_max;
            cfg.dropout = dropout;
            cfg.epsilon = epsilon;
            cfg.adversarial = true;
            cfg.seeds = vec![seed];
            cfg.out_dir = None;
            train(&cfg, data, seed)
                .map(|run| {
                    run.rows(&cfg)
                        .into_iter()
                        .filter(|r| r.epochs >= grid.epochs_min)
                        .collect()
                })
                .map_err(|e| SweepFailure {
                    run_id: run_id(cfg.task, &cfg.dataset, dropout, epsilon, seed),
                    message: e.to_string(),
                })
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut ok_jobs = 0;
    for o in outcomes {
        match o {
            Ok(r) => {
                rows.extend(r);
                ok_jobs += 1;
            }
            Err(f) => failures.push(f),
        }
    }
    Ok(SweepResult {
        grid: grid.clone(),
        rows,
        failures,
        runs: ok_jobs * grid.epoch_axis().count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::DataSource;
    use crate::experiment::dataset::prepare_data;
    use crate::task::Task;

    fn base() -> TrainConfig {
        let mut c = TrainConfig::new(Task::Asc);
        c.data = DataSource::Synthetic {
            train: 40,
            test: 16,
            seed: 9,
        };
        c.validation_size = 8;
        c.hidden = 8;
        c.ff = 16;
        c.layers = 1;
        c.dataset = "toy".into();
        c
    }

    #[test]
    fn default_grid() {
        let g = SweepGrid::default();
        g.validate().unwrap();
        assert_eq!(g.epsilons, [0.01, 0.1, 1.0, 2.0, 5.0]);
        assert_eq!(g.epoch_axis(), 3..=10);
        assert_eq!(g.epsilon_axis()[0], 0.0);
    }

    #[test]
    fn grid_settings() {
        let mut g = SweepGrid::default();
        assert!(g.set("sweep_epochs", "2-5").unwrap());
        assert!(g.set("epsilons", "0.5,1").unwrap());
        assert_eq!((g.epochs_min, g.epochs_max), (2, 5));
        assert_eq!(g.epsilons, [0.5, 1.0]);
        g.table_epochs = 9;
        assert!(g.validate().is_err());
    }

    #[test]
    fn two_by_two_by_one_grid_with_two_seeds() {
        let cfg = base();
        let data = prepare_data(&cfg).unwrap();
        let grid = SweepGrid {
            epochs_min: 1,
            epochs_max: 2,
            dropouts: vec![0.0, 0.1],
            epsilons: vec![],
            seeds: vec![1, 2],
            table_epochs: 1,
        };
        assert_eq!(grid.cell_count(), 4);
        let res = sweep(&grid, &cfg, &data).unwrap();
        assert!(res.failures.is_empty());
        assert_eq!(res.runs, 8);
        let cells = aggregate(&res.rows, SPLIT_TEST, "accuracy");
        assert_eq!(cells.len(), 4);
        for c in &cells {
            assert_eq!(c.scores.len(), 2);
            assert_eq!(c.mean(), (c.scores[0].1 + c.scores[1].1) / 2.0);
        }
    }

    #[test]
    fn failing_cell_does_not_stop_others() {
        let cfg = base();
        let data = prepare_data(&cfg).unwrap();
        let grid = SweepGrid {
            epochs_min: 1,
            epochs_max: 1,
            dropouts: vec![0.1],
            epsilons: vec![1e300],
            seeds: vec![1],
            table_epochs: 1,
        };
        let res = sweep(&grid, &cfg, &data).unwrap();
        assert_eq!(res.failures.len(), 1, "{:?}", res.failures);
        assert!(res.failures[0].run_id.contains("eps1000"));
        assert!(!res.rows.is_empty());
        assert!(res.rows.iter().all(|r| r.epsilon == 0.0));
    }
}
