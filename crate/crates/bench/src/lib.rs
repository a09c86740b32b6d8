//! Shared fixtures for the benchmarks in `benches/`.

use prefrank_core::congen::FrozenRater;
use prefrank_core::rater::{train, TrainOptions};
use prefrank_core::synth::{random_comparisons, DatasetKind, SyntheticDataset};
use prefrank_core::{Comparison, EncoderConfig, EncoderModel};

/// Linear dataset of `n` items in 2-D with `5n` noise-free comparisons.
pub fn dataset(n: usize, seed: u64) -> (SyntheticDataset, Vec<Comparison>) {
    let ds = SyntheticDataset::generate(DatasetKind::Linear, n, 2, seed).expect("valid dataset");
    let cs = random_comparisons(&ds, 5 * n, Default::default(), seed).expect("valid comparisons");
    (ds, cs)
}

/// Default encoder for 2-D inputs.
pub fn encoder(seed: u64) -> EncoderModel {
    EncoderModel::new(EncoderConfig {
        input_dim: 2,
        seed,
        ..Default::default()
    })
    .expect("valid encoder")
}

/// Rater trained for a few epochs and frozen, for generator benchmarks.
pub fn frozen_rater(ds: &SyntheticDataset, cs: &[Comparison], seed: u64) -> FrozenRater {
    let mut model = encoder(seed);
    train(&mut model, &ds.items, cs, &TrainOptions { epochs: 3, batch_size: 64 }).expect("training");
    FrozenRater::freeze(model, &ds.items, seed).expect("freeze")
}
