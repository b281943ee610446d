//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DSRECKPT"
//! version    u32
//! text_len   u64
//! text       text_len bytes of UTF-8 `key = value` lines
//! n_params   u32
//! n_params x {
//!     name_len u32, name bytes,
//!     rank u32, rank x u64 dims,
//!     prod(dims) x f64
//! }
//! ```
//!
//! The text block holds the training configuration, the relation labels,
//! the vocabulary, the epoch counter, the generator state and any extra
//! keys supplied by the caller (prefixed `extra.`).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::{format_kv, parse_kv_exact};
use crate::corpus::{LabelSet, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DSRECKPT";
pub const VERSION: u32 = 1;

/// Serializable position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn encode(&self) -> String {
        let hex: String = self.seed.iter().map(|b| format!("{b:02x}")).collect();
        format!("{hex}:{}:{}", self.stream, self.word_pos)
    }

    fn decode(text: &str) -> Option<Self> {
        let mut parts = text.split(':');
        let hex = parts.next()?;
        let stream = parts.next()?.parse().ok()?;
        let word_pos = parts.next()?.parse().ok()?;
        if hex.len() != 64 || parts.next().is_some() {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).ok()?;
        }
        Some(RngState { seed, stream, word_pos })
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub model: Model,
    pub epoch: usize,
    pub rng: RngState,
    /// Caller-defined metadata, e.g. how the training data was produced.
    pub extra: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn text_block(&self) -> Result<String> {
        let mut entries: Vec<(String, String)> = self
            .config
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect();
        for name in self.model.labels.names() {
            if name.chars().any(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("relation `{name}` contains whitespace")));
            }
        }
        entries.push(("meta.epoch".into(), self.epoch.to_string()));
        entries.push(("meta.rng".into(), self.rng.encode()));
        entries.push(("meta.labels".into(), self.model.labels.names().join(" ")));
        entries.push(("meta.vocab".into(), self.vocab.words().join(" ")));
        for (k, v) in &self.extra {
            if k.contains('=') || v.contains('\n') {
                return Err(Error::Checkpoint(format!("cannot store extra key `{k}`")));
            }
            entries.push((format!("extra.{k}"), v.clone()));
        }
        Ok(format_kv(entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = self.text_block()?;
        let mut out = Vec::with_capacity(64 + text.len() + self.model.params.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for group in self.model.params.iter() {
            out.extend_from_slice(&(group.name.len() as u32).to_le_bytes());
            out.extend_from_slice(group.name.as_bytes());
            out.extend_from_slice(&(group.value.rank() as u32).to_le_bytes());
            for &d in group.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in group.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let text_len = r.u64()? as usize;
        let text =
            std::str::from_utf8(r.take(text_len)?).map_err(|_| Error::Checkpoint("text block is not UTF-8".into()))?;

        let mut config = TrainConfig::default();
        let mut epoch = None;
        let mut rng = None;
        let mut labels = None;
        let mut vocab = None;
        let mut extra = Vec::new();
        for (k, v) in parse_kv_exact(text)? {
            match k.as_str() {
                "meta.epoch" => epoch = Some(v.parse().map_err(|_| Error::Checkpoint("bad epoch".into()))?),
                "meta.rng" => {
                    rng = Some(RngState::decode(&v).ok_or_else(|| Error::Checkpoint("bad rng state".into()))?)
                }
                "meta.labels" => labels = Some(LabelSet::new(v.split_whitespace())?),
                "meta.vocab" => vocab = Some(Vocab::from_tokens(v.split_whitespace())?),
                key => match key.strip_prefix("extra.") {
                    Some(name) => extra.push((name.to_owned(), v)),
                    None => config.set(key, &v)?,
                },
            }
        }
        let missing = |what: &str| Error::Checkpoint(format!("missing `{what}`"));
        let labels = labels.ok_or_else(|| missing("meta.labels"))?;
        let vocab = vocab.ok_or_else(|| missing("meta.vocab"))?;
        let epoch = epoch.ok_or_else(|| missing("meta.epoch"))?;
        let rng = rng.ok_or_else(|| missing("meta.rng"))?;

        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("bad shape".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.add(crate::params::ParamGroup::new(name, value));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last parameter",
                bytes.len() - r.pos
            )));
        }

        let mut model = Model::zeroed(config.model_config(vocab.len()), labels)?;
        model.load_params(&store)?;
        Ok(Checkpoint {
            config,
            vocab,
            model,
            epoch,
            rng,
            extra,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file (needed {n} bytes at offset {})", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Model {
    /// Copies parameter values from `store`, which must hold the same names
    /// and shapes in the same order. Nothing is modified on error.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {}, found {}",
                self.params.len(),
                store.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(store.iter()) {
            if mine.name != theirs.name {
                return Err(Error::Checkpoint(format!(
                    "parameter name mismatch: expected `{}`, found `{}`",
                    mine.name, theirs.name
                )));
            }
            if mine.value.shape() != theirs.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: expected {:?}, found {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.value.shape()
                )));
            }
        }
        for (mine, theirs) in self.params.iter_mut().zip(store.iter()) {
            mine.value = theirs.value.clone();
            mine.grad = None;
        }
        Ok(())
    }
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
