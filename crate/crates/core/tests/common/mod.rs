#![allow(dead_code)]

use std::sync::OnceLock;

use nwp_core::headfit::{head_only_retrain, HeadFitConfig};
use nwp_core::synth::{generate_synthetic, SyntheticSpec};
use nwp_core::train::{train, Schedule};
use nwp_core::{Corpus, DataSplit, ModelConfig, ModelSnapshot};

/// A small trained model with a tightly fit stationary head.
pub struct Fixture {
    pub corpus: Corpus,
    pub split: DataSplit,
    pub base: ModelSnapshot,
    pub stationary: ModelSnapshot,
    pub fit: HeadFitConfig,
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SyntheticSpec { documents: 80, ..Default::default() };
        let corpus = generate_synthetic(&spec).unwrap().corpus;
        let config = ModelConfig { hidden: 16, ..Default::default() };
        let schedule = Schedule { steps: 80, batch_windows: 8, eval_every: 40, ..Default::default() };
        let out = train(&corpus, &config, &schedule).unwrap();
        let split = DataSplit::by_documents(&corpus, &schedule.split).unwrap();
        let fit = HeadFitConfig { lambda: 1e-2, tolerance: 1e-11, ..Default::default() };
        let (stationary, report) = head_only_retrain(&out.best, &corpus, &split.train, &fit, true).unwrap();
        assert!(report.converged, "fixture head fit did not converge: {report:?}");
        Fixture { corpus, split, base: out.best, stationary, fit }
    })
}
