//! Synthetic distant-supervision benchmark with known sentence-level truth.
//!
//! Each bag is labelled with a relation. Signal sentences place a marker
//! token of the bag's relation (NA included) between the two entities.
//! Noise sentences place a marker of a different non-NA relation far
//! outside the entity window, so only position-aware encoders can tell them
//! apart from signal.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{build_vocab, pack_bags, Bag, LabelSet, PackOptions, Role, SentenceRecord, Vocab, NA};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Number of relation labels including NA.
    pub relations: usize,
    pub train_bags: usize,
    pub test_bags: usize,
    pub min_bag_size: usize,
    pub max_bag_size: usize,
    /// Fraction of noise sentences per bag (floored).
    pub noise_rate: f64,
    pub filler_words: usize,
    pub markers_per_relation: usize,
    pub entity_names: usize,
    pub max_len: usize,
    pub clip: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            relations: 5,
            train_bags: 2000,
            test_bags: 500,
            min_bag_size: 3,
            max_bag_size: 3,
            noise_rate: 0.5,
            filler_words: 200,
            markers_per_relation: 1,
            entity_names: 60,
            max_len: 100,
            clip: 100,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidArgument(format!(
                "noise rate must be in [0, 1), got {}",
                self.noise_rate
            )));
        }
        if self.relations < 2 {
            return Err(Error::InvalidArgument("need at least NA and one relation".into()));
        }
        if self.min_bag_size == 0 || self.min_bag_size > self.max_bag_size {
            return Err(Error::InvalidArgument(format!(
                "bad bag size range {}..={}",
                self.min_bag_size, self.max_bag_size
            )));
        }
        if self.filler_words == 0 || self.markers_per_relation == 0 || self.entity_names < 2 {
            return Err(Error::InvalidArgument("empty synthetic vocabulary".into()));
        }
        if self.max_len < 20 {
            return Err(Error::InvalidArgument("synthetic sentences need max_len >= 20".into()));
        }
        Ok(())
    }

    pub fn relation_name(k: usize) -> String {
        if k == 0 {
            NA.to_owned()
        } else {
            format!("/synthetic/rel_{k}")
        }
    }

    pub fn labels(&self) -> LabelSet {
        LabelSet::new((0..self.relations).map(Self::relation_name)).expect("unique names")
    }
}

/// Which sentences of each bag express the bag's relation, keyed by entity
/// pair in sentence order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SignalMap {
    map: HashMap<(String, String), Vec<bool>>,
}

impl SignalMap {
    pub fn for_pair(&self, head_id: &str, tail_id: &str) -> Option<&[bool]> {
        self.map
            .get(&(head_id.to_owned(), tail_id.to_owned()))
            .map(Vec::as_slice)
    }

    pub fn for_bag(&self, bag: &Bag) -> Option<&[bool]> {
        self.for_pair(&bag.key.head_id, &bag.key.tail_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), &Vec<bool>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, head_id: String, tail_id: String, flags: Vec<bool>) {
        self.map.insert((head_id, tail_id), flags);
    }

    /// Total (signal, noise) sentence counts.
    pub fn counts(&self) -> (usize, usize) {
        let signal = self.map.values().flatten().filter(|&&s| s).count();
        let total: usize = self.map.values().map(Vec::len).sum();
        (signal, total - signal)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticRecords {
    pub train: Vec<SentenceRecord>,
    pub test: Vec<SentenceRecord>,
    pub signal: SignalMap,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Vec<Bag>,
    pub test: Vec<Bag>,
    pub signal: SignalMap,
    pub vocab: Vocab,
    pub labels: LabelSet,
}

enum Marker {
    None,
    Between(String),
    Far(String),
}

struct Generator<'a, R: Rng + ?Sized> {
    cfg: &'a SyntheticConfig,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Generator<'_, R> {
    fn filler(&mut self, n: usize) -> Vec<String> {
        (0..n)
            .map(|_| format!("w{}", self.rng.random_range(0..self.cfg.filler_words)))
            .collect()
    }

    fn marker(&mut self, relation: usize) -> String {
        format!(
            "r{relation}m{}",
            self.rng.random_range(0..self.cfg.markers_per_relation)
        )
    }

    fn sentence(&mut self, head: &str, tail: &str, marker: Marker) -> Vec<String> {
        let head_first = self.rng.random_bool(0.5);
        let (first, second) = if head_first { (head, tail) } else { (tail, head) };
        let n_gap = self.rng.random_range(1..=3);
        let mut gap = self.filler(n_gap);
        let n_prefix = self.rng.random_range(0..=1);
        let mut prefix = self.filler(n_prefix);
        let n_suffix = self.rng.random_range(0..=1);
        let mut suffix = self.filler(n_suffix);
        match marker {
            Marker::None => {}
            Marker::Between(m) => {
                let at = self.rng.random_range(0..=gap.len());
                gap.insert(at, m);
            }
            Marker::Far(m) => {
                let n_spacer = self.rng.random_range(5..=8);
                let spacer = self.filler(n_spacer);
                if self.rng.random_bool(0.5) {
                    prefix.splice(0..0, std::iter::once(m).chain(spacer));
                } else {
                    suffix.splice(0..0, spacer.into_iter().chain(std::iter::once(m)));
                }
            }
        }
        let mut tokens = prefix;
        tokens.push(first.to_owned());
        tokens.extend(gap);
        tokens.push(second.to_owned());
        tokens.extend(suffix);
        tokens
    }

    fn bags(&mut self, split: &str, count: usize, out: &mut Vec<SentenceRecord>, signal: &mut SignalMap) {
        let l = self.cfg.relations;
        for b in 0..count {
            let relation = self.rng.random_range(0..l);
            let n = self.rng.random_range(self.cfg.min_bag_size..=self.cfg.max_bag_size);
            let noise = (self.cfg.noise_rate * n as f64).floor() as usize;
            let h = self.rng.random_range(0..self.cfg.entity_names);
            let t = (h + self.rng.random_range(1..self.cfg.entity_names)) % self.cfg.entity_names;
            let (head, tail) = (format!("ent{h}"), format!("ent{t}"));
            let (head_id, tail_id) = (format!("{split}.{b}.h"), format!("{split}.{b}.t"));

            let mut sentences = Vec::with_capacity(n);
            for i in 0..n {
                let is_signal = i >= noise;
                let marker = if is_signal {
                    Marker::Between(self.marker(relation))
                } else {
                    let others: Vec<usize> = (1..l).filter(|&k| k != relation).collect();
                    match others.len() {
                        0 => Marker::None,
                        k => {
                            let other = others[self.rng.random_range(0..k)];
                            Marker::Far(self.marker(other))
                        }
                    }
                };
                sentences.push((self.sentence(&head, &tail, marker), is_signal));
            }
            sentences.shuffle(self.rng);

            let flags = sentences.iter().map(|(_, s)| *s).collect();
            signal.insert(head_id.clone(), tail_id.clone(), flags);
            for (tokens, _) in sentences {
                out.push(
                    SentenceRecord::new(
                        head_id.clone(),
                        tail_id.clone(),
                        head.clone(),
                        tail.clone(),
                        SyntheticConfig::relation_name(relation),
                        tokens,
                    )
                    .expect("entity names are placed in every sentence"),
                );
            }
        }
    }
}

/// Raw synthetic records for both splits plus the signal map.
pub fn generate_synthetic_records<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> Result<SyntheticRecords> {
    config.validate()?;
    let mut signal = SignalMap::default();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut generator = Generator { cfg: config, rng };
    generator.bags("train", config.train_bags, &mut train, &mut signal);
    generator.bags("test", config.test_bags, &mut test, &mut signal);
    Ok(SyntheticRecords { train, test, signal })
}

/// Synthetic records packed into train (pair+relation keyed) and test
/// (pair keyed) bags, with a vocabulary built from the train split.
pub fn generate_synthetic<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> Result<SyntheticData> {
    let records = generate_synthetic_records(config, rng)?;
    let labels = config.labels();
    let vocab = if records.train.is_empty() {
        build_vocab(&records.test, 1)?
    } else {
        build_vocab(&records.train, 1)?
    };
    let train = pack_bags(
        &records.train,
        &vocab,
        &labels,
        PackOptions::for_role(Role::Train, config.max_len, config.clip),
    )?;
    let test = pack_bags(
        &records.test,
        &vocab,
        &labels,
        PackOptions::for_role(Role::Test, config.max_len, config.clip),
    )?;
    Ok(SyntheticData {
        train: train.bags,
        test: test.bags,
        signal: records.signal,
        vocab,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_means_all_signal() {
        let cfg = SyntheticConfig {
            noise_rate: 0.0,
            train_bags: 50,
            test_bags: 10,
            ..Default::default()
        };
        let data = generate_synthetic_records(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(data.signal.counts().1, 0);
        assert_eq!(data.signal.counts().0, 60 * 3);
    }

    #[test]
    fn counting_two_relations() {
        let cfg = SyntheticConfig {
            relations: 2,
            train_bags: 100,
            test_bags: 0,
            min_bag_size: 2,
            max_bag_size: 2,
            noise_rate: 0.5,
            ..Default::default()
        };
        let data = generate_synthetic_records(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(data.signal.counts(), (100, 100));
        assert_eq!(data.train.len(), 200);
    }

    #[test]
    fn rejects_full_noise() {
        let cfg = SyntheticConfig {
            noise_rate: 1.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn signal_sentences_carry_gold_marker_between_entities() {
        let cfg = SyntheticConfig {
            train_bags: 40,
            test_bags: 0,
            ..Default::default()
        };
        let data = generate_synthetic_records(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut by_pair: HashMap<(String, String), Vec<&SentenceRecord>> = HashMap::new();
        for r in &data.train {
            by_pair
                .entry((r.head_id.clone(), r.tail_id.clone()))
                .or_default()
                .push(r);
        }
        for ((h, t), recs) in &by_pair {
            let flags = data.signal.for_pair(h, t).unwrap();
            for (r, &is_signal) in recs.iter().zip(flags) {
                let lo = r.head_span.0.min(r.tail_span.0);
                let hi = r.head_span.0.max(r.tail_span.0);
                let gold = (0..cfg.relations)
                    .find(|&k| SyntheticConfig::relation_name(k) == r.relation)
                    .unwrap();
                let between_gold = r.tokens[lo..hi].contains(&format!("r{gold}m0"));
                assert_eq!(between_gold, is_signal, "{:?}", r.tokens);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticConfig {
            train_bags: 20,
            test_bags: 5,
            ..Default::default()
        };
        let a = generate_synthetic_records(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_synthetic_records(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.signal, b.signal);
    }

    #[test]
    fn packed_bags_align_with_signal_map() {
        let cfg = SyntheticConfig {
            train_bags: 30,
            test_bags: 10,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(data.train.len(), 30);
        assert_eq!(data.test.len(), 10);
        for bag in data.train.iter().chain(&data.test) {
            assert_eq!(data.signal.for_bag(bag).unwrap().len(), bag.len());
        }
    }
}
