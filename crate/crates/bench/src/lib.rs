//! Shared fixtures for the benchmarks.

use dualstress_core::dml::ModelFrame;
use dualstress_core::synth::{generate_panel, DgpConfig};
use dualstress_core::PanelRow;

/// Panel of the `paper-scale` synthetic preset.
pub fn paper_scale_panel(seed: u64) -> Vec<PanelRow> {
    let config = DgpConfig::preset("paper-scale", seed).expect("known preset");
    generate_panel(&config).expect("preset generates").panel
}

pub fn paper_scale_frame(seed: u64) -> ModelFrame {
    ModelFrame::from_panel(&paper_scale_panel(seed)).expect("panel has complete rows")
}
