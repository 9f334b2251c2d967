//! Shared inputs for the benchmarks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mc_core::synth::{SynthConcept, SynthWorld, WorldSpec};
use mc_core::trainer::{Label, LabelSource, LabeledExample};

/// Scores in [0, 1] keyed by zero-padded ids.
pub fn score_map(n: usize, seed: u64) -> BTreeMap<String, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| (format!("id{i:07}"), rng.gen::<f64>())).collect()
}

pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let positive = rng.gen_bool(0.2);
            let score = if positive { rng.gen_range(0.3..1.0) } else { rng.gen_range(0.0..0.7) };
            (score, positive)
        })
        .unzip()
}

pub fn stop_sign_world(records: usize, seed: u64) -> SynthWorld {
    SynthWorld::generate(SynthConcept::stop_sign(), WorldSpec { records, ..Default::default() }, seed)
        .expect("synthetic world")
}

/// Ground-truth labeled examples for the first `n` records of a world.
pub fn examples(world: &SynthWorld, n: usize) -> Vec<LabeledExample> {
    world
        .corpus
        .records()
        .iter()
        .take(n)
        .map(|r| LabeledExample {
            image_id: r.id.clone(),
            embedding: world.corpus.embedding(&r.id).expect("record").to_vec(),
            label: Label::from_bool(world.truth[&r.id]),
            source: LabelSource::User,
        })
        .collect()
}
