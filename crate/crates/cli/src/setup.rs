//! Config resolution, run logs and data loading shared by the subcommands.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use dsre::config::{format_kv, parse_kv};
use dsre::corpus::{
    generate_synthetic, load_riedel_file, pack_bags, Bag, LabelSet, PackOptions, Role, SentenceRecord, SyntheticConfig,
    SyntheticData, Vocab,
};
use dsre::{Checkpoint, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Overrides, Shared, SynthArgs};

pub const SYNTH: &str = "synth";
pub const SYNTH_EPOCHS: usize = 15;

/// Defaults, then the config file, then flags.
pub fn resolve_config(
    shared: &Shared,
    overrides: &Overrides,
    epochs: Option<usize>,
    synthetic: bool,
) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if synthetic {
        config.epochs = SYNTH_EPOCHS;
    }
    if let Some(path) = &shared.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (k, v) in parse_kv(&text).with_context(|| format!("parsing config {}", path.display()))? {
            config
                .set(&k, &v)
                .with_context(|| format!("config {}", path.display()))?;
        }
    }
    for (k, v) in overrides.entries() {
        config
            .set(k, v)
            .with_context(|| format!("flag --{}", k.replace('_', "-")))?;
    }
    if let Some(seed) = shared.seed {
        config.seed = seed;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    config.validate()?;
    Ok(config)
}

pub fn synth_config(args: &SynthArgs, config: &TrainConfig) -> SyntheticConfig {
    let mut sc = SyntheticConfig {
        max_len: config.max_len,
        clip: config.clip,
        ..Default::default()
    };
    if let Some(v) = args.relations {
        sc.relations = v;
    }
    if let Some(v) = args.train_bags {
        sc.train_bags = v;
    }
    if let Some(v) = args.test_bags {
        sc.test_bags = v;
    }
    if let Some(v) = args.bag_size {
        sc.min_bag_size = v;
        sc.max_bag_size = v;
    }
    if let Some(v) = args.noise_rate {
        sc.noise_rate = v;
    }
    sc
}

const SYNTH_KEYS: [&str; 7] = [
    "relations",
    "train_bags",
    "test_bags",
    "min_bag_size",
    "max_bag_size",
    "noise_rate",
    "seed",
];

/// Checkpoint extras recording how a synthetic corpus was generated.
pub fn synth_extras(sc: &SyntheticConfig, seed: u64) -> Vec<(String, String)> {
    let values = [
        sc.relations.to_string(),
        sc.train_bags.to_string(),
        sc.test_bags.to_string(),
        sc.min_bag_size.to_string(),
        sc.max_bag_size.to_string(),
        sc.noise_rate.to_string(),
        seed.to_string(),
    ];
    let mut out = vec![("data".to_owned(), SYNTH.to_owned())];
    out.extend(SYNTH_KEYS.iter().zip(values).map(|(k, v)| (format!("synth.{k}"), v)));
    out
}

/// Regenerates the synthetic corpus a checkpoint was trained on.
pub fn synth_from_checkpoint(ckpt: &Checkpoint) -> Result<SyntheticData> {
    if ckpt.extra("data") != Some(SYNTH) {
        bail!("checkpoint was not trained on synthetic data; pass a data file instead");
    }
    let get = |k: &str| -> Result<&str> {
        ckpt.extra(&format!("synth.{k}"))
            .with_context(|| format!("checkpoint lacks synth.{k}"))
    };
    let sc = SyntheticConfig {
        relations: get("relations")?.parse()?,
        train_bags: get("train_bags")?.parse()?,
        test_bags: get("test_bags")?.parse()?,
        min_bag_size: get("min_bag_size")?.parse()?,
        max_bag_size: get("max_bag_size")?.parse()?,
        noise_rate: get("noise_rate")?.parse()?,
        max_len: ckpt.config.max_len,
        clip: ckpt.config.clip,
        ..Default::default()
    };
    let seed: u64 = get("seed")?.parse()?;
    let data = generate_synthetic(&sc, &mut ChaCha8Rng::seed_from_u64(seed))?;
    if data.vocab != ckpt.vocab {
        bail!("regenerated synthetic vocabulary differs from the checkpoint");
    }
    Ok(data)
}

pub fn load_records(path: &str) -> Result<Vec<SentenceRecord>> {
    let file =
        load_riedel_file(path).with_context(|| format!("reading {path} (see --help for the expected format)"))?;
    if file.skipped > 0 {
        eprintln!("warning: skipped {} malformed lines in {path}", file.skipped);
    }
    if file.records.is_empty() {
        bail!("{path}: no sentences");
    }
    Ok(file.records)
}

/// Pair-keyed test bags for a checkpoint's vocabulary and labels.
pub fn test_bags(
    records: &[SentenceRecord],
    vocab: &Vocab,
    labels: &LabelSet,
    config: &TrainConfig,
) -> Result<Vec<Bag>> {
    let packed = pack_bags(
        records,
        vocab,
        labels,
        PackOptions::for_role(Role::Test, config.max_len, config.clip),
    )?;
    if packed.bags.is_empty() {
        bail!("no sentence survived truncation to max_len {}", config.max_len);
    }
    Ok(packed.bags)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    dsre::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn out_dir(shared: &Shared) -> Result<PathBuf> {
    let dir = shared.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Append-only `run.log`. The only artifact carrying timestamps.
pub struct RunLog {
    file: Option<fs::File>,
}

impl RunLog {
    /// Opens `dir/run.log` (or stderr when `dir` is `None`) and echoes the
    /// effective configuration.
    pub fn start(dir: Option<&Path>, command: &str, entries: &[(String, String)]) -> Result<Self> {
        let file = match dir {
            Some(d) => {
                let path = d.join("run.log");
                Some(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .with_context(|| format!("opening {}", path.display()))?,
                )
            }
            None => None,
        };
        let mut log = RunLog { file };
        log.line(&format!("# {command} started at unix time {}", unix_time()))?;
        let text = format_kv(entries.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        for line in text.lines() {
            log.line(line)?;
        }
        Ok(log)
    }

    pub fn line(&mut self, text: &str) -> Result<()> {
        match &mut self.file {
            Some(f) => writeln!(f, "{text}").context("writing run.log"),
            None => {
                eprintln!("{text}");
                Ok(())
            }
        }
    }

    pub fn finish(mut self) -> Result<()> {
        self.line(&format!("# finished at unix time {}", unix_time()))
    }
}

pub fn config_entries(config: &TrainConfig) -> Vec<(String, String)> {
    config.entries().into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
