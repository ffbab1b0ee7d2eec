//! Drives the Dirichlet energy sweep and summarizes it.

use crate::analysis::{energy_csv, energy_sweep, EnergyReport};
use crate::error::Result;
use crate::pipeline::config::ExperimentConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthVerdict {
    pub k: usize,
    /// Seeds where the hop-diffused energy exceeds the GAT energy.
    pub seeds_holding: usize,
    pub seeds: usize,
}

impl DepthVerdict {
    pub fn holds(&self) -> bool {
        self.seeds_holding == self.seeds
    }

    pub fn line(&self) -> String {
        let status = if self.holds() { "ordering holds" } else { "ordering violated" };
        format!(
            "k={}: {status} ({}/{} seeds with hop-diffused energy above GAT)",
            self.k, self.seeds_holding, self.seeds
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergySimulation {
    pub reports: Vec<EnergyReport>,
    pub csv: String,
    pub verdicts: Vec<DepthVerdict>,
}

impl EnergySimulation {
    /// One line per depth `k ≥ 1`.
    pub fn verdict_lines(&self) -> Vec<String> {
        self.verdicts.iter().map(DepthVerdict::line).collect()
    }

    pub fn ordering_holds(&self) -> bool {
        self.verdicts.iter().all(DepthVerdict::holds)
    }

    /// Mean energy at depth `k` over seeds, `(hop_diffused, gat)`.
    pub fn mean_at(&self, k: usize) -> Option<(f64, f64)> {
        let rows: Vec<_> = self.reports.iter().filter_map(|r| r.row(k)).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.energy_hop_diffused).sum::<f64>() / n,
            rows.iter().map(|r| r.energy_gat).sum::<f64>() / n,
        ))
    }
}

pub fn depth_verdicts(reports: &[EnergyReport], k_max: usize) -> Vec<DepthVerdict> {
    (1..=k_max)
        .map(|k| {
            let rows: Vec<_> = reports.iter().filter_map(|r| r.row(k)).collect();
            DepthVerdict {
                k,
                seeds_holding: rows
                    .iter()
                    .filter(|r| r.energy_hop_diffused > r.energy_gat)
                    .count(),
                seeds: rows.len(),
            }
        })
        .collect()
}

pub fn run_energy_simulation(config: &ExperimentConfig) -> Result<EnergySimulation> {
    config.validate()?;
    let reports = energy_sweep(&config.energy)?;
    Ok(EnergySimulation {
        csv: energy_csv(&reports),
        verdicts: depth_verdicts(&reports, config.energy.k_max),
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::ENERGY_CSV_HEADER;

    #[test]
    fn row_count_contract() {
        let sim = run_energy_simulation(&ExperimentConfig::default()).unwrap();
        let lines: Vec<&str> = sim.csv.lines().collect();
        assert_eq!(lines[0], ENERGY_CSV_HEADER);
        // 10 seeds x depths 0..=4
        assert_eq!(lines.len() - 1, 50);
        assert_eq!(sim.verdicts.len(), 4);
    }

    #[test]
    fn verdict_reports_ordering() {
        let sim = run_energy_simulation(&ExperimentConfig::default()).unwrap();
        assert!(sim.ordering_holds());
        for line in sim.verdict_lines() {
            assert!(line.contains("ordering holds"), "{line}");
        }
    }

    #[test]
    fn csv_is_deterministic() {
        let c = ExperimentConfig::default();
        assert_eq!(run_energy_simulation(&c).unwrap().csv, run_energy_simulation(&c).unwrap().csv);
    }

    #[test]
    fn violated_depths_are_reported() {
        let mut reports = run_energy_simulation(&ExperimentConfig::default()).unwrap().reports;
        reports[0].rows[2].energy_gat = f64::MAX;
        let v = depth_verdicts(&reports, 4);
        assert!(!v[1].holds());
        assert_eq!(v[1].seeds_holding, 9);
        assert!(v[1].line().contains("ordering violated"));
        assert!(v[0].holds());
    }
}
