//! Fixtures shared by the criterion benches.

use chaindid::simlab::{simulate_dgp, DgpConfig};
use chaindid::{estimate_att, AttTable, EstimateOptions, PanelDataset};

/// One simulated sample from a preset design.
pub fn sample(design: u8, seed: u64) -> PanelDataset {
    simulate_dgp(&DgpConfig::preset(design).expect("preset exists"), seed).expect("simulation runs").sample
}

/// Stacked influence rows and estimates of every identified cell.
pub fn influence_rows(table: &AttTable) -> (Vec<Vec<f64>>, Vec<f64>) {
    table.identified().map(|c| (c.influence.clone(), c.estimate)).unzip()
}

pub fn chained_table(data: &PanelDataset) -> AttTable {
    estimate_att(data, &EstimateOptions::default()).expect("estimation runs")
}
