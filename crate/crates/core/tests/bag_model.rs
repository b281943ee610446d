mod common;

use common::*;
use dsre::bag_model::{bag_attention, classify, sentence_scores, BagScoring, LossReduction};
use dsre::corpus::Bag;
use dsre::{Graph, Model, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Bag scores and attention written out with explicit loops from the
/// pooled sentence vectors.
fn reference_bag(model: &Model, bag: &Bag) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p: Vec<Vec<f64>> = bag
        .sentences
        .iter()
        .map(|s| model.sentence_feature(s).unwrap().vector)
        .collect();
    let w3 = model.params.value(model.bag.w3);
    let b3 = model.params.value(model.bag.b3);
    let l = model.num_relations();
    let n = p.len();
    let u: Vec<Vec<f64>> = p
        .iter()
        .map(|pi| {
            (0..l)
                .map(|k| pi.iter().zip(w3.row(k)).map(|(a, b)| a * b).sum::<f64>() + b3.data()[k])
                .collect()
        })
        .collect();
    let mut alpha = vec![vec![0.0; l]; n];
    let mut scores = vec![0.0; l];
    for k in 0..l {
        let col: Vec<f64> = (0..n).map(|i| u[i][k]).collect();
        let a = softmax(&col);
        for i in 0..n {
            alpha[i][k] = a[i];
        }
        scores[k] = match model.config.scoring {
            BagScoring::AttendedVector => {
                let v: Vec<f64> = (0..p[0].len()).map(|j| (0..n).map(|i| a[i] * p[i][j]).sum()).collect();
                v.iter().zip(w3.row(k)).map(|(x, w)| x * w).sum::<f64>() + b3.data()[k]
            }
            BagScoring::WeightedScore => (0..n).map(|i| a[i] * u[i][k]).sum(),
        };
    }
    (scores, alpha)
}

#[test]
fn bag_scores_match_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for scoring in [BagScoring::AttendedVector, BagScoring::WeightedScore] {
        let mut config = tiny_config();
        config.scoring = scoring;
        let model = model_with(config, 2, 4);
        for n in 1..5 {
            let bag = random_bag(&mut rng, "b", n, 7, 4);
            let pred = model.predict(&bag.sentences).unwrap();
            let (scores, alpha) = reference_bag(&model, &bag);
            assert!(max_diff(pred.scores.data(), &scores) < 1e-12);
            let flat: Vec<f64> = alpha.concat();
            assert!(max_diff(pred.alpha.data(), &flat) < 1e-12);
        }
    }
}

#[test]
fn sentence_scores_degenerate_weights() {
    let mut model = tiny_model(3, 3);
    model.params.get_mut(model.bag.w3).value = Tensor::zeros(&[3, 8]);
    model.params.get_mut(model.bag.b3).value = Tensor::vector(vec![0.5, -1.0, 2.0]);
    let mut g = Graph::new(&model.params);
    let p = g.constant(Tensor::full(&[4, 8], 0.7));
    let u = sentence_scores(&mut g, p, &model.bag).unwrap();
    for i in 0..4 {
        assert_eq!(g.value(u).row(i), &[0.5, -1.0, 2.0]);
    }
}

#[test]
fn single_sentence_bag_scores_equal_sentence_scores() {
    let model = tiny_model(4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bag = random_bag(&mut rng, "b", 1, 6, 3);
    let mut g = Graph::new(&model.params);
    let fwd = model.forward_bag(&mut g, &bag.sentences, false, &mut rng).unwrap();
    assert!(g.value(fwd.output.alpha).data().iter().all(|&a| a == 1.0));
    let u = g.value(fwd.sentence_scores).row(0).to_vec();
    assert!(max_diff(g.value(fwd.output.scores).data(), &u) < 1e-12);
}

#[test]
fn identical_sentences_split_attention_evenly() {
    let model = tiny_model(5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random_sentence(&mut rng, 5, VOCAB, 10);
    let one = model.predict(std::slice::from_ref(&s)).unwrap();
    let two = model.predict(&[s.clone(), s]).unwrap();
    assert!(two.alpha.data().iter().all(|&a| (a - 0.5).abs() < 1e-15));
    assert!(max_diff(one.scores.data(), two.scores.data()) < 1e-12);
}

#[test]
fn empty_bag_is_rejected() {
    let model = tiny_model(6, 3);
    assert!(model.predict(&[]).is_err());
    let mut g = Graph::new(&model.params);
    let p = g.constant(Tensor::full(&[2, 8], 0.1));
    let u = g.constant(Tensor::full(&[3, 3], 0.1));
    assert!(bag_attention(&mut g, p, u, &model.bag, BagScoring::AttendedVector).is_err());
}

#[test]
fn classify_examples() {
    let p = classify(&Tensor::vector(vec![0.3; 4]));
    assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let p = classify(&Tensor::vector(vec![1000.0, -5.0, 3.0]));
    assert!((p.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn uniform_prediction_costs_log_l() {
    let mut config = tiny_config();
    config.vocab_size = VOCAB;
    let mut model = model_with(config, 7, 53);
    model.params.get_mut(model.bag.w3).value = Tensor::zeros(&[53, 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let bag = random_bag(&mut rng, "b", 3, 6, 53);
    let loss = bag_loss(&model, &bag, false, 0);
    assert!((loss - 53f64.ln()).abs() < 1e-12);
    assert!((53f64.ln() - 3.9703).abs() < 1e-4);
}

#[test]
fn confident_correct_prediction_costs_nothing() {
    let mut model = tiny_model(8, 3);
    model.params.get_mut(model.bag.w3).value = Tensor::zeros(&[3, 8]);
    model.params.get_mut(model.bag.b3).value = Tensor::vector(vec![-400.0, 400.0, -400.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bag = random_bag(&mut rng, "b", 2, 6, 3);
    bag.label = 1;
    assert_eq!(bag_loss(&model, &bag, false, 0), 0.0);
}

#[test]
fn batch_loss_is_the_mean_of_bag_losses() {
    let model = tiny_model(9, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bags: Vec<Bag> = (0..6)
        .map(|i| random_bag(&mut rng, &format!("b{i}"), 1 + i % 3, 8, 4))
        .collect();
    let refs: Vec<&Bag> = bags.iter().collect();
    let mean = model.batch_loss(&refs, LossReduction::Mean, false, 0).unwrap();
    let sum = model.batch_loss(&refs, LossReduction::Sum, false, 0).unwrap();
    let single: Vec<f64> = bags.iter().map(|b| bag_loss(&model, b, false, 0)).collect();
    let expected = single.iter().sum::<f64>() / 6.0;
    assert!((mean - expected).abs() < 1e-12);
    assert!((sum - 6.0 * expected).abs() < 1e-11);

    let grads = model.batch_gradients(&refs, false, &[0; 6]).unwrap();
    assert!(max_diff(&grads.losses, &single) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn alpha_columns_and_probabilities_are_normalized(seed in any::<u64>(), n in 1usize..7) {
        let model = tiny_model(seed % 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bag = random_bag(&mut rng, "b", n, 9, 5);
        let pred = model.predict(&bag.sentences).unwrap();
        for k in 0..5 {
            let s: f64 = (0..n).map(|i| pred.alpha.get2(i, k)).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        prop_assert!((pred.probabilities.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn permutation_and_duplication_leave_probabilities(seed in any::<u64>(), n in 1usize..6) {
        let model = tiny_model(seed % 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bag = random_bag(&mut rng, "b", n, 8, 4);
        let base = model.predict(&bag.sentences).unwrap();

        let mut shuffled = bag.sentences.clone();
        shuffled.shuffle(&mut rng);
        let p = model.predict(&shuffled).unwrap();
        prop_assert!(max_diff(base.probabilities.data(), p.probabilities.data()) < 1e-9);

        let doubled: Vec<_> = bag.sentences.iter().chain(&bag.sentences).cloned().collect();
        let d = model.predict(&doubled).unwrap();
        prop_assert!(max_diff(base.probabilities.data(), d.probabilities.data()) < 1e-9);
        for i in 0..n {
            for k in 0..4 {
                prop_assert!((d.alpha.get2(i, k) - base.alpha.get2(i, k) / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shifting_b3_leaves_alpha(seed in any::<u64>(), n in 1usize..5, shift in -5.0f64..5.0) {
        let mut model = tiny_model(seed % 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bag = random_bag(&mut rng, "b", n, 6, 3);
        let before = model.predict(&bag.sentences).unwrap();
        let k = rng.random_range(0..3);
        model.params.get_mut(model.bag.b3).value.data_mut()[k] += shift;
        let after = model.predict(&bag.sentences).unwrap();
        prop_assert!(max_diff(before.alpha.data(), after.alpha.data()) < 1e-12);
    }
}
