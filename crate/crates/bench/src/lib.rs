//! Fixtures shared by the benchmarks.

use nwp_core::synth::{generate_synthetic, SyntheticSpec};
use nwp_core::{Corpus, ModelConfig, ModelSnapshot, Tensor};

/// A freshly initialized default model and a small demo corpus it accepts.
pub fn model_and_corpus(documents: usize) -> (ModelSnapshot, Corpus) {
    let snap = ModelSnapshot::init(ModelConfig::default()).expect("default config is valid");
    let spec = SyntheticSpec { documents, ..SyntheticSpec::default() };
    let corpus = generate_synthetic(&spec).expect("default spec is valid").corpus;
    (snap, corpus)
}

/// Deterministic dense matrix with entries in [-1, 1].
pub fn dense(rows: usize, cols: usize, salt: u64) -> Tensor {
    let data = (0..rows * cols).map(|k| ((k as u64 * 2654435761 + salt * 97) % 2001) as f64 / 1000.0 - 1.0).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}
