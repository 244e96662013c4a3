//! Diagnostic studies: the toy energy example, energy splits, synthetic corpora and sweeps.

pub mod energy;
pub mod sweep;
pub mod synth;
pub mod toy;

pub use energy::{energy_split, linear_similarity, EnergySplit};
pub use sweep::{accuracy_spread, best_row, sweep_codebook, sweep_csv, sweep_power, SweepRow};
pub use synth::{synth_corpus, write_synthetic_corpus, SynthConfig, SyntheticCorpus};
pub use toy::{toy_example, ToyConfig, ToyReport};
