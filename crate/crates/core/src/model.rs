//! The full bag classifier: parameter layout, initialization and the
//! forward/backward entry points used by training and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bag_model::{bag_attention, classify, sentence_scores, BagOutput, BagParams, BagScoring, LossReduction};
use crate::corpus::{Bag, EncodedSentence, LabelSet, PAD, PAD_POSITION};
use crate::encoder::{encode, BlockParams, Dropout, EncoderParams, HeadParams, SentenceEncoding, SentenceFeature};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamGrad, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Range of the uniform initializer for position tables.
pub const POSITION_INIT: f64 = 1.0;
/// Range of the uniform initializer for word vectors without a pretrained row.
pub const WORD_INIT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_w: usize,
    pub d_p: usize,
    /// Clip radius of relative positions; tables have `2 * clip + 2` rows.
    pub clip: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub blocks: usize,
    pub ln_eps: f64,
    pub dropout: f64,
    pub scoring: BagScoring,
}

impl ModelConfig {
    /// Width of the concatenated word and position embeddings.
    pub fn input_dim(&self) -> usize {
        self.d_w + 2 * self.d_p
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn position_rows(&self) -> usize {
        2 * self.clip + 2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_w", self.d_w),
            ("d_p", self.d_p),
            ("clip", self.clip),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("blocks", self.blocks),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        crate::graph::check_dropout(self.dropout)?;
        if self.ln_eps < 0.0 {
            return Err(Error::Config("ln_eps must be non-negative".into()));
        }
        Ok(())
    }
}

enum Init {
    Word,
    Position,
    Weight { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Everything learnable, plus the label set it was built for.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub labels: LabelSet,
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub bag: BagParams,
}

/// Forward pass of one bag.
pub struct BagForward {
    pub encodings: Vec<SentenceEncoding>,
    /// `n x d_model` stacked sentence vectors.
    pub features: Var,
    /// `n x l` sentence relation scores.
    pub sentence_scores: Var,
    pub output: BagOutput,
}

/// Evaluation-mode outputs for one bag.
#[derive(Clone, Debug)]
pub struct BagPrediction {
    pub scores: Tensor,
    pub probabilities: Tensor,
    /// `n x l`.
    pub alpha: Tensor,
}

impl BagPrediction {
    /// Most probable relation.
    pub fn top(&self) -> usize {
        self.probabilities.argmax()
    }

    /// 1-based rank of `relation` among all relations by probability.
    pub fn rank_of(&self, relation: usize) -> usize {
        let p = self.probabilities.data();
        1 + p
            .iter()
            .enumerate()
            .filter(|&(k, &v)| v > p[relation] || (v == p[relation] && k < relation))
            .count()
    }
}

/// Per-bag losses and parameter gradients of a batch.
pub struct BatchGradients {
    pub losses: Vec<f64>,
    pub grads: Vec<Vec<(ParamId, ParamGrad)>>,
}

impl BatchGradients {
    /// Adds `weight` times every bag's gradient into the store, in bag order.
    pub fn accumulate_into(&self, store: &mut ParamStore, weight: f64) {
        for bag in &self.grads {
            for (id, g) in bag {
                store.accumulate(*id, g, weight);
            }
        }
    }
}

impl Model {
    /// Randomly initialized model. `word_table`, when given, replaces the
    /// random word embedding (its PAD row is zeroed).
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        labels: LabelSet,
        word_table: Option<Tensor>,
        rng: &mut R,
    ) -> Result<Model> {
        if let Some(t) = &word_table {
            if t.shape() != [config.vocab_size, config.d_w] {
                return Err(Error::Shape {
                    op: "init: pretrained word table",
                    left: vec![config.vocab_size, config.d_w],
                    right: t.shape().to_vec(),
                });
            }
        }
        let mut word_table = word_table;
        Self::build(config, labels, |init, shape| match init {
            Init::Word => {
                let mut t = match word_table.take() {
                    Some(t) => t,
                    None => uniform(shape, WORD_INIT, rng),
                };
                zero_row(&mut t, PAD);
                t
            }
            Init::Position => {
                let mut t = uniform(shape, POSITION_INIT, rng);
                zero_row(&mut t, PAD_POSITION as usize);
                t
            }
            Init::Weight { fan_in, fan_out } => uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
        })
    }

    /// Model with the right layout and all-zero values.
    pub fn zeroed(config: ModelConfig, labels: LabelSet) -> Result<Model> {
        Self::build(config, labels, |_, shape| Tensor::zeros(shape))
    }

    fn build(config: ModelConfig, labels: LabelSet, mut init: impl FnMut(Init, &[usize]) -> Tensor) -> Result<Model> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut add = |name: String, init_kind: Init, shape: &[usize]| -> ParamId {
            params.add(ParamGroup::new(name, init(init_kind, shape)))
        };
        let (dm, dh, dff) = (config.d_model, config.head_dim(), config.d_ff);

        let word = add("embed.word".into(), Init::Word, &[config.vocab_size, config.d_w]);
        let pos1 = add(
            "embed.pos1".into(),
            Init::Position,
            &[config.position_rows(), config.d_p],
        );
        let pos2 = add(
            "embed.pos2".into(),
            Init::Position,
            &[config.position_rows(), config.d_p],
        );
        let projection = (config.input_dim() != dm).then(|| {
            add(
                "embed.projection".into(),
                Init::Weight {
                    fan_in: config.input_dim(),
                    fan_out: dm,
                },
                &[config.input_dim(), dm],
            )
        });

        let weight = |fan_in, fan_out| Init::Weight { fan_in, fan_out };
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let heads = (0..config.heads)
                .map(|h| HeadParams {
                    query: add(format!("block{b}.head{h}.query"), weight(dm, dh), &[dm, dh]),
                    key: add(format!("block{b}.head{h}.key"), weight(dm, dh), &[dm, dh]),
                    value: add(format!("block{b}.head{h}.value"), weight(dm, dh), &[dm, dh]),
                })
                .collect();
            blocks.push(BlockParams {
                heads,
                output: add(format!("block{b}.attn_output"), weight(dm, dm), &[dm, dm]),
                ff_w1: add(format!("block{b}.ffn.w1"), weight(dm, dff), &[dm, dff]),
                ff_b1: add(format!("block{b}.ffn.b1"), Init::Zeros, &[dff]),
                ff_w2: add(format!("block{b}.ffn.w2"), weight(dff, dm), &[dff, dm]),
                ff_b2: add(format!("block{b}.ffn.b2"), Init::Zeros, &[dm]),
                ln1_gain: add(format!("block{b}.ln1.gain"), Init::Ones, &[dm]),
                ln1_bias: add(format!("block{b}.ln1.bias"), Init::Zeros, &[dm]),
                ln2_gain: add(format!("block{b}.ln2.gain"), Init::Ones, &[dm]),
                ln2_bias: add(format!("block{b}.ln2.bias"), Init::Zeros, &[dm]),
            });
        }
        let l = labels.len();
        let bag = BagParams {
            w3: add("bag.w3".into(), weight(dm, l), &[l, dm]),
            b3: add("bag.b3".into(), Init::Zeros, &[l]),
        };

        for id in [word, pos1, pos2] {
            params.get_mut(id).frozen_row = Some(PAD);
        }
        let encoder = EncoderParams {
            word,
            pos1,
            pos2,
            projection,
            blocks,
            ln_eps: config.ln_eps,
        };
        Ok(Model {
            config,
            labels,
            params,
            encoder,
            bag,
        })
    }

    pub fn num_relations(&self) -> usize {
        self.labels.len()
    }

    fn dropout(&self, training: bool) -> Dropout {
        Dropout {
            p: self.config.dropout,
            training,
        }
    }

    /// Encodes every sentence of a bag and applies bag attention.
    pub fn forward_bag<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        sentences: &[EncodedSentence],
        training: bool,
        rng: &mut R,
    ) -> Result<BagForward> {
        if sentences.is_empty() {
            return Err(Error::InvalidArgument("bag has no sentences".into()));
        }
        let dropout = self.dropout(training);
        let encodings = sentences
            .iter()
            .map(|s| encode(g, &self.encoder, s, dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let pooled: Vec<Var> = encodings.iter().map(|e| e.pooled).collect();
        let features = g.stack_rows(&pooled)?;
        let u = sentence_scores(g, features, &self.bag)?;
        let output = bag_attention(g, features, u, &self.bag, self.config.scoring)?;
        Ok(BagForward {
            encodings,
            features,
            sentence_scores: u,
            output,
        })
    }

    /// `-log p(label | bag)` as a graph node.
    pub fn bag_loss_var<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        sentences: &[EncodedSentence],
        label: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if label >= self.num_relations() {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} relations",
                self.num_relations()
            )));
        }
        let fwd = self.forward_bag(g, sentences, training, rng)?;
        g.cross_entropy(fwd.output.scores, label)
    }

    /// Loss of one bag and its parameter gradients. Dropout masks are drawn
    /// from a generator seeded with `seed`.
    pub fn loss_and_grads(&self, bag: &Bag, training: bool, seed: u64) -> Result<(f64, Vec<(ParamId, ParamGrad)>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(&self.params);
        let loss = self.bag_loss_var(&mut g, &bag.sentences, bag.label, training, &mut rng)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        Ok((value, grads.params().map(|(id, g)| (id, g.clone())).collect()))
    }

    /// Per-bag losses and gradients, computed in parallel; results are in
    /// bag order so accumulation is deterministic.
    pub fn batch_gradients(&self, bags: &[&Bag], training: bool, seeds: &[u64]) -> Result<BatchGradients> {
        assert_eq!(bags.len(), seeds.len());
        let results: Vec<_> = bags
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(bag, &seed)| self.loss_and_grads(bag, training, seed))
            .collect::<Result<_>>()?;
        let (losses, grads) = results.into_iter().unzip();
        Ok(BatchGradients { losses, grads })
    }

    /// Reduced loss of a batch computed in a single graph.
    pub fn batch_loss(&self, bags: &[&Bag], reduction: LossReduction, training: bool, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(&self.params);
        let mut losses = Vec::with_capacity(bags.len());
        for bag in bags {
            losses.push(self.bag_loss_var(&mut g, &bag.sentences, bag.label, training, &mut rng)?);
        }
        let stacked = g.stack_rows(&losses)?;
        let total = g.sum(stacked);
        let reduced = g.scale(total, reduction.weight(bags.len()));
        Ok(g.value(reduced).item())
    }

    /// Evaluation-mode scores, probabilities and attention for a bag.
    pub fn predict(&self, sentences: &[EncodedSentence]) -> Result<BagPrediction> {
        let mut g = Graph::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward_bag(&mut g, sentences, false, &mut rng)?;
        let scores = g.value(fwd.output.scores).clone();
        Ok(BagPrediction {
            probabilities: classify(&scores),
            scores,
            alpha: g.value(fwd.output.alpha).clone(),
        })
    }

    /// Evaluation-mode pooled vector of one sentence.
    pub fn sentence_feature(&self, sentence: &EncodedSentence) -> Result<SentenceFeature> {
        let mut g = Graph::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = encode(&mut g, &self.encoder, sentence, Dropout::EVAL, &mut rng)?;
        Ok(SentenceFeature {
            vector: g.value(enc.pooled).data().to_vec(),
            mask: enc.mask,
        })
    }
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn zero_row(t: &mut Tensor, row: usize) {
    let cols = t.dims2().1;
    t.data_mut()[row * cols..(row + 1) * cols].fill(0.0);
}
