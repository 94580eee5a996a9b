//! Fixture builders shared by the benchmark targets.

use ramp_core::dataio::{gen_synthetic, SyntheticConfig};
use ramp_core::decoder::{BinScheme, Decoder};
use ramp_core::fusion::{FusingNets, FusionExample};
use ramp_core::{Datastore, Rng, SampleSet};

pub fn sample_set(n_systems: usize, per_system: usize, dim: usize) -> SampleSet {
    gen_synthetic(&SyntheticConfig {
        dim,
        n_systems,
        utterances_per_system: per_system,
        noise_sigma: 0.2,
        domain_shift: None,
        seed: 42,
    })
    .expect("valid synthetic config")
}

pub fn store(n_systems: usize, per_system: usize, dim: usize) -> Datastore {
    Datastore::build(&sample_set(n_systems, per_system, dim)).expect("non-empty set")
}

pub fn decoder(dim: usize, hidden: usize) -> Decoder {
    let mut rng = Rng::seed_from_u64(7);
    Decoder::init(dim, hidden, BinScheme::default(), &mut rng).expect("valid dims")
}

pub fn fusing_nets(k: usize, hidden: usize) -> FusingNets {
    let mut rng = Rng::seed_from_u64(8);
    FusingNets::init(k, hidden, &mut rng).expect("valid dims")
}

pub fn fusion_example(
    decoder: &Decoder,
    store: &Datastore,
    k: usize,
    embedding: &[f64],
) -> FusionExample {
    FusionExample::prepare(decoder, store, k, embedding, 3.0, None).expect("consistent dims")
}
