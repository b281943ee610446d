use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use super::{encode_sentence, EncodedSentence, SentenceRecord, Vocab};
use crate::error::{Error, Result};

/// Name of the "no relation" label, always at index 0.
pub const NA: &str = "NA";
/// Label index of NA in every [`LabelSet`].
pub const NA_INDEX: usize = 0;

/// Dense relation indices with `NA` fixed at 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    /// Label set in the given order. `NA` is prepended when absent and
    /// must come first when present.
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list: Vec<String> = names.into_iter().map(Into::into).collect();
        match list.iter().position(|n| n == NA) {
            None => list.insert(0, NA.to_owned()),
            Some(0) => {}
            Some(i) => {
                return Err(Error::InvalidArgument(format!(
                    "relation `{NA}` must be listed first, found at line {}",
                    i + 1
                )))
            }
        }
        let mut index = HashMap::with_capacity(list.len());
        for (i, n) in list.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate relation `{n}`")));
            }
        }
        Ok(LabelSet { names: list, index })
    }

    /// Labels discovered from records: `NA` first, the rest sorted.
    pub fn discover(records: &[SentenceRecord]) -> Self {
        let names: BTreeSet<&str> = records
            .iter()
            .map(|r| r.relation.as_str())
            .filter(|&r| r != NA)
            .collect();
        LabelSet::new(names).expect("discovered labels are unique")
    }

    /// One relation per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LabelSet::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Identity of a bag: the entity pair, plus the relation under pair+relation keying.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BagKey {
    pub head_id: String,
    pub tail_id: String,
    pub relation: Option<String>,
}

impl fmt::Display for BagKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}", self.head_id, self.tail_id)?;
        if let Some(r) = &self.relation {
            write!(f, "\t{r}")?;
        }
        Ok(())
    }
}

/// All sentences of one entity pair (and relation, when keyed by it).
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub key: BagKey,
    pub head_name: String,
    pub tail_name: String,
    /// Training label: the first non-NA relation seen for the bag, else NA.
    pub label: usize,
    /// Every relation attached to the bag's sentences, sorted.
    pub labels: Vec<usize>,
    pub sentences: Vec<EncodedSentence>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Non-NA relations of the bag.
    pub fn facts(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().copied().filter(|&l| l != NA_INDEX)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BagKeying {
    PairRelation,
    Pair,
}

impl FromStr for BagKeying {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair_relation" => Ok(BagKeying::PairRelation),
            "pair" => Ok(BagKeying::Pair),
            other => Err(Error::Config(format!(
                "bag keying must be `pair` or `pair_relation`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for BagKeying {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BagKeying::PairRelation => "pair_relation",
            BagKeying::Pair => "pair",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PackOptions {
    pub keying: BagKeying,
    pub max_len: usize,
    pub clip: usize,
}

impl PackOptions {
    /// Pair+relation keying for training, pair keying for testing.
    pub fn for_role(role: Role, max_len: usize, clip: usize) -> Self {
        let keying = match role {
            Role::Train => BagKeying::PairRelation,
            Role::Test => BagKeying::Pair,
        };
        PackOptions { keying, max_len, clip }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Packed {
    pub bags: Vec<Bag>,
    /// Records dropped because an entity fell outside the truncation window.
    pub dropped: usize,
}

impl Packed {
    pub fn num_sentences(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }
}

/// Encodes records and groups them into bags in order of first appearance.
/// Sentences are stored without padding.
pub fn pack_bags(records: &[SentenceRecord], vocab: &Vocab, labels: &LabelSet, options: PackOptions) -> Result<Packed> {
    let mut packed = Packed::default();
    let mut slots: HashMap<BagKey, usize> = HashMap::new();
    for r in records {
        let label = labels
            .get(&r.relation)
            .ok_or_else(|| Error::UnknownRelation(r.relation.clone()))?;
        let Some(enc) = encode_sentence(r, vocab, options.max_len, options.clip) else {
            packed.dropped += 1;
            continue;
        };
        let key = BagKey {
            head_id: r.head_id.clone(),
            tail_id: r.tail_id.clone(),
            relation: match options.keying {
                BagKeying::PairRelation => Some(r.relation.clone()),
                BagKeying::Pair => None,
            },
        };
        let slot = *slots.entry(key.clone()).or_insert_with(|| {
            packed.bags.push(Bag {
                key,
                head_name: r.head_name.clone(),
                tail_name: r.tail_name.clone(),
                label,
                labels: Vec::new(),
                sentences: Vec::new(),
            });
            packed.bags.len() - 1
        });
        let bag = &mut packed.bags[slot];
        if let Err(pos) = bag.labels.binary_search(&label) {
            bag.labels.insert(pos, label);
        }
        if bag.label == 0 && label != 0 {
            bag.label = label;
        }
        bag.sentences.push(enc.trimmed());
    }
    Ok(packed)
}

/// Test-time bag subsampling protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Setting {
    One,
    Two,
    All,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::One => "one",
            Setting::Two => "two",
            Setting::All => "all",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "one" => Ok(Setting::One),
            "two" => Ok(Setting::Two),
            "all" => Ok(Setting::All),
            other => Err(Error::Config(format!("unknown setting `{other}`"))),
        }
    }
}

/// Keeps one or two uniformly chosen sentences (in their original order),
/// or the whole bag for [`Setting::All`].
pub fn subsample_bag<R: Rng + ?Sized>(bag: &Bag, setting: Setting, rng: &mut R) -> Result<Bag> {
    let keep = match setting {
        Setting::All => return Ok(bag.clone()),
        Setting::One => 1,
        Setting::Two => 2,
    };
    if bag.len() < keep {
        return Err(Error::InvalidArgument(format!(
            "setting `{setting}` needs at least {keep} sentences, bag {} has {}",
            bag.key,
            bag.len()
        )));
    }
    let mut picked = sample(rng, bag.len(), keep).into_vec();
    picked.sort_unstable();
    let mut out = bag.clone();
    out.sentences = picked.into_iter().map(|i| bag.sentences[i].clone()).collect();
    Ok(out)
}
