#![allow(dead_code)]

use dsre::bag_model::{BagScoring, LossReduction};
use dsre::corpus::{Bag, BagKey, EncodedSentence, LabelSet};
use dsre::{Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 12;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB,
        d_w: 4,
        d_p: 2,
        clip: 10,
        d_model: 8,
        heads: 2,
        d_ff: 24,
        blocks: 1,
        ln_eps: 1e-6,
        dropout: 0.5,
        scoring: BagScoring::AttendedVector,
    }
}

pub fn labels(l: usize) -> LabelSet {
    LabelSet::new((1..l).map(|k| format!("/rel/{k}"))).unwrap()
}

pub fn tiny_model(seed: u64, l: usize) -> Model {
    model_with(tiny_config(), seed, l)
}

pub fn model_with(config: ModelConfig, seed: u64, l: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::init(config, labels(l), None, &mut rng).unwrap()
}

/// Row of a position table for a token at `i` relative to `[b, e]`,
/// written out independently of the library.
pub fn position_row(i: usize, b: usize, e: usize, clip: usize) -> u32 {
    let d: i64 = if i < b {
        i as i64 - b as i64
    } else if i > e {
        i as i64 - e as i64
    } else {
        0
    };
    (d.clamp(-(clip as i64), clip as i64) + clip as i64 + 1) as u32
}

/// Random unpadded sentence of length `len` over word ids `2..vocab`.
pub fn random_sentence<R: Rng>(rng: &mut R, len: usize, vocab: usize, clip: usize) -> EncodedSentence {
    let h = rng.random_range(0..len);
    let mut t = rng.random_range(0..len);
    if len > 1 {
        while t == h {
            t = rng.random_range(0..len);
        }
    }
    EncodedSentence {
        word_ids: (0..len).map(|_| rng.random_range(2..vocab as u32)).collect(),
        pos1_ids: (0..len).map(|i| position_row(i, h, h, clip)).collect(),
        pos2_ids: (0..len).map(|i| position_row(i, t, t, clip)).collect(),
        true_len: len,
        head_span: (h, h),
        tail_span: (t, t),
    }
}

pub fn bag_of(name: &str, label: usize, sentences: Vec<EncodedSentence>) -> Bag {
    Bag {
        key: BagKey {
            head_id: format!("{name}.h"),
            tail_id: format!("{name}.t"),
            relation: None,
        },
        head_name: "h".into(),
        tail_name: "t".into(),
        label,
        labels: vec![label],
        sentences,
    }
}

pub fn random_bag<R: Rng>(rng: &mut R, name: &str, n: usize, max_len: usize, l: usize) -> Bag {
    let sentences = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            random_sentence(rng, len, VOCAB, 10)
        })
        .collect();
    let label = rng.random_range(0..l);
    bag_of(name, label, sentences)
}

/// Loss of a single bag, recomputed from scratch.
pub fn bag_loss(model: &Model, bag: &Bag, training: bool, seed: u64) -> f64 {
    model.batch_loss(&[bag], LossReduction::Sum, training, seed).unwrap()
}

pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| <= 1e-8` or relative error below `1e-4`.
pub fn grads_agree(a: f64, n: f64) -> bool {
    let diff = (a - n).abs();
    diff <= 1e-8 || diff / a.abs().max(n.abs()) < 1e-4
}

/// Compares every parameter element's analytic gradient with a central
/// difference of step `eps`. Returns the number of elements checked and the
/// mismatches.
pub fn check_model_gradients(
    model: &Model,
    bag: &Bag,
    training: bool,
    seed: u64,
    eps: f64,
) -> (usize, Vec<GradMismatch>) {
    let (_, grads) = model.loss_and_grads(bag, training, seed).unwrap();
    let mut dense: Vec<Option<Tensor>> = vec![None; model.params.len()];
    for (id, g) in &grads {
        dense[id.0] = Some(g.to_dense(model.params.value(*id).shape()));
    }
    let mut probe = model.clone();
    let mut checked = 0;
    let mut bad = Vec::new();
    for id in model.params.ids() {
        let group = model.params.get(id);
        let cols = if group.value.rank() == 2 {
            group.value.dims2().1
        } else {
            1
        };
        for i in 0..group.value.len() {
            if group.frozen_row.is_some_and(|r| i / cols == r) {
                continue;
            }
            let original = group.value.data()[i];
            probe.params.get_mut(id).value.data_mut()[i] = original + eps;
            let up = bag_loss(&probe, bag, training, seed);
            probe.params.get_mut(id).value.data_mut()[i] = original - eps;
            let down = bag_loss(&probe, bag, training, seed);
            probe.params.get_mut(id).value.data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = dense[id.0].as_ref().map_or(0.0, |t| t.data()[i]);
            checked += 1;
            if !grads_agree(analytic, numeric) {
                bad.push(GradMismatch {
                    param: group.name.clone(),
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    (checked, bad)
}

/// Naive softmax of a slice, for oracles.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
