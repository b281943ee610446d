//! Fixtures shared by the benchmarks.

use dsre::corpus::{generate_synthetic, Bag, SyntheticConfig, SyntheticData};
use dsre::evaluator::Prediction;
use dsre::trainer::{init_params, TrainConfig};
use dsre::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scaled-down dimensions used for the synthetic experiments.
pub fn bench_config() -> TrainConfig {
    TrainConfig {
        d_w: 16,
        d_p: 4,
        d_model: Some(24),
        heads: 8,
        min_count: 1,
        ..Default::default()
    }
}

pub fn synthetic(train_bags: usize) -> SyntheticData {
    let cfg = SyntheticConfig {
        train_bags,
        test_bags: 50,
        ..Default::default()
    };
    generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).expect("valid synthetic config")
}

pub fn model(config: &TrainConfig, data: &SyntheticData) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    init_params(config, data.vocab.len(), data.labels.clone(), None, &mut rng).expect("valid config")
}

/// A bag of `n` copies of the first test sentence padded to `len` tokens.
pub fn padded_bag(data: &SyntheticData, n: usize, len: usize) -> Bag {
    let mut bag = data.test[0].clone();
    let s = bag.sentences[0].padded_to(len.max(bag.sentences[0].true_len));
    bag.sentences = vec![s; n];
    bag
}

/// `n` random predictions over `n / 4` entity pairs.
pub fn predictions(n: usize) -> Vec<Prediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..n)
        .map(|_| Prediction {
            head: format!("h{}", rng.random_range(0..n / 4 + 1)),
            tail: "t".into(),
            relation: rng.random_range(1..53),
            score: rng.random(),
        })
        .collect()
}
