use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use dsre::corpus::{
    build_vocab, generate_synthetic, generate_synthetic_records, load_pretrained_embeddings, pack_bags,
    write_riedel_file, Bag, LabelSet, PackOptions, Setting, SignalMap, NA, NA_INDEX,
};
use dsre::evaluator::{evaluate_settings, format_pn_report, inspect_attention, write_attention, write_report};
use dsre::trainer::{format_loss_log, init_params};
use dsre::{save_checkpoint, Checkpoint, RngState, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::setup::*;
use crate::{EvalArgs, InspectArgs, Overrides, PredictArgs, SynthCmdArgs, TrainArgs};

pub fn train(a: TrainArgs) -> Result<()> {
    let synthetic = a.data == SYNTH;
    let config = resolve_config(&a.shared, &a.overrides, a.epochs, synthetic)?;
    let dir = out_dir(&a.shared)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let (bags, vocab, labels, extra) = if synthetic {
        if a.labels.is_some() {
            bail!("--labels does not apply to synthetic data");
        }
        let sc = synth_config(&a.synth, &config);
        let data = generate_synthetic(&sc, &mut rng)?;
        (data.train, data.vocab, data.labels, synth_extras(&sc, config.seed))
    } else {
        let s = &a.synth;
        if s.relations.is_some()
            || s.train_bags.is_some()
            || s.test_bags.is_some()
            || s.bag_size.is_some()
            || s.noise_rate.is_some()
        {
            bail!("synthetic-data flags need --data synth");
        }
        let records = load_records(&a.data)?;
        let labels = match &a.labels {
            Some(p) => LabelSet::load(p)?,
            None => LabelSet::discover(&records),
        };
        let vocab = build_vocab(&records, config.min_count)?;
        let options = PackOptions {
            keying: config.train_keying,
            max_len: config.max_len,
            clip: config.clip,
        };
        let packed = pack_bags(&records, &vocab, &labels, options)?;
        if packed.bags.is_empty() {
            bail!("no training sentence survived truncation to max_len {}", config.max_len);
        }
        (packed.bags, vocab, labels, vec![("data".to_owned(), a.data.clone())])
    };

    let pretrained = match &a.embeddings {
        Some(p) => {
            let table = load_pretrained_embeddings(p, &vocab, config.d_w, &mut rng)
                .with_context(|| format!("loading embeddings {}", p.display()))?;
            Some((table.matrix, table.found))
        }
        None => None,
    };
    let found = pretrained.as_ref().map(|(_, f)| *f);
    let model = init_params(&config, vocab.len(), labels, pretrained.map(|(m, _)| m), &mut rng)?;

    let mut entries = vec![("command".to_owned(), "train".to_owned())];
    entries.extend(extra.iter().cloned());
    entries.extend(config_entries(&config));
    let mut log = RunLog::start(Some(&dir), "train", &entries)?;
    log.line(&format!(
        "# bags={} sentences={} vocab={} relations={} parameters={}",
        bags.len(),
        bags.iter().map(Bag::len).sum::<usize>(),
        vocab.len(),
        model.num_relations(),
        model.params.num_values()
    ))?;
    if let Some(found) = found {
        log.line(&format!(
            "# pretrained vectors found for {found} of {} words",
            vocab.len()
        ))?;
    }
    write_file(
        &dir.join("config.txt"),
        &dsre::config::format_kv(config.entries().iter().map(|(k, v)| (*k, v.as_str()))),
    )?;

    let ckpt_path = dir.join("model.ckpt");
    let loss_path = dir.join("loss.tsv");
    let save = |t: &Trainer| -> Result<()> {
        let ckpt = Checkpoint {
            config: t.config.clone(),
            vocab: vocab.clone(),
            model: t.model.clone(),
            epoch: t.epoch,
            rng: RngState::capture(&t.rng),
            extra: extra.clone(),
        };
        save_checkpoint(&ckpt, &ckpt_path)?;
        write_file(&loss_path, &format_loss_log(&t.log))
    };

    let mut trainer = Trainer::new(config, model, rng);
    save(&trainer)?;
    while trainer.epoch < trainer.config.epochs {
        let e = trainer.run_epoch(&bags)?;
        log.line(&format!("epoch {}\tloss {:.6}\tlr {}", e.epoch, e.mean_loss, e.lr))?;
        save(&trainer)?;
    }
    log.finish()?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn parse_settings(text: &str) -> Result<Vec<Setting>> {
    let mut out: Vec<Setting> = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let s: Setting = part.parse()?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

fn parse_ns(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| match p.parse::<usize>() {
            Ok(0) | Err(_) => bail!("--ns: `{p}` is not a positive integer"),
            Ok(n) => Ok(n),
        })
        .collect()
}

fn check_labels(expected: Option<&std::path::Path>, ckpt: &Checkpoint) -> Result<()> {
    if let Some(p) = expected {
        let labels = LabelSet::load(p)?;
        if labels != ckpt.model.labels {
            bail!(dsre::Error::LabelMismatch(format!(
                "{} lists {} relations; the checkpoint has {}",
                p.display(),
                labels.len(),
                ckpt.model.labels.len()
            )));
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    check_labels(a.labels.as_deref(), &ckpt)?;
    let labels = &ckpt.model.labels;
    let bags = if a.data == SYNTH {
        synth_from_checkpoint(&ckpt)?.test
    } else {
        test_bags(&load_records(&a.data)?, &ckpt.vocab, labels, &ckpt.config)?
    };
    let mut settings = parse_settings(&a.settings)?;
    let requested = parse_ns(&a.ns)?;
    let seed = a.shared.seed.unwrap_or(ckpt.config.seed);
    let dir = out_dir(&a.shared)?;

    let mut entries = vec![
        ("command".to_owned(), "eval".to_owned()),
        ("checkpoint".to_owned(), a.checkpoint.display().to_string()),
        ("data".to_owned(), a.data.clone()),
        (
            "settings".to_owned(),
            settings.iter().map(|s| s.name()).collect::<Vec<_>>().join(","),
        ),
        ("ns".to_owned(), a.ns.clone()),
        ("eval_seed".to_owned(), seed.to_string()),
    ];
    entries.extend(config_entries(&ckpt.config));
    let mut log = RunLog::start(Some(&dir), "eval", &entries)?;

    let multi = bags.iter().filter(|b| b.len() >= 2).count();
    let available = multi * (labels.len() - 1);
    let ns: Vec<usize> = requested.iter().copied().filter(|&n| n <= available).collect();
    for n in requested.iter().filter(|&&n| n > available) {
        log.line(&format!(
            "# skipping P@{n}: only {available} predictions on bags with two or more sentences"
        ))?;
    }
    if multi == 0 && !settings.is_empty() {
        log.line("# no test bag has two or more sentences; skipping P@N")?;
        settings.clear();
    } else if ns.is_empty() && !settings.is_empty() {
        bail!("every requested N exceeds the {available} available predictions; pass smaller --ns");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = evaluate_settings(&ckpt.model, labels, &bags, &settings, &ns, &mut rng)?;
    let files = write_report(&report, &dir)?;
    let pn = format_pn_report(&report.settings);
    print!("{pn}");
    let summary = format!(
        "# bags={} facts={} hits={} average_precision={:.4}",
        bags.len(),
        report.curve.total_facts,
        report.curve.hits(),
        report.curve.average_precision()
    );
    println!("{summary}");
    log.line(&summary)?;
    for path in [&files.curve, &files.curve_downsampled, &files.pn] {
        log.line(&format!("# wrote {}", path.display()))?;
    }
    log.finish()
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let labels = &ckpt.model.labels;
    let mut records = load_records(&a.data.to_string_lossy())?;
    for r in &mut records {
        if labels.get(&r.relation).is_none() {
            r.relation = NA.to_owned();
        }
    }
    let bags = test_bags(&records, &ckpt.vocab, labels, &ckpt.config)?;

    let entries = vec![
        ("command".to_owned(), "predict".to_owned()),
        ("checkpoint".to_owned(), a.checkpoint.display().to_string()),
        ("data".to_owned(), a.data.display().to_string()),
        ("full".to_owned(), a.full.to_string()),
    ];
    let dir = match &a.shared.out_dir {
        Some(_) => Some(out_dir(&a.shared)?),
        None => None,
    };
    let log = RunLog::start(dir.as_deref(), "predict", &entries)?;

    let mut out = String::new();
    for bag in &bags {
        let pred = ckpt.model.predict(&bag.sentences)?;
        let top = pred.top();
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}",
            bag.key.head_id,
            bag.key.tail_id,
            bag.len(),
            labels.name(top),
            pred.probabilities.data()[top]
        );
        if a.full {
            for (k, p) in pred.probabilities.data().iter().enumerate() {
                let _ = write!(out, "\t{}={:.6e}", labels.name(k), p);
            }
        }
        out.push('\n');
    }
    print!("{out}");
    log.finish()
}

fn signal_wins(alpha: &[f64], flags: &[bool]) -> Option<bool> {
    let noise: Vec<f64> = alpha.iter().zip(flags).filter(|(_, &f)| !f).map(|(a, _)| *a).collect();
    let signal: Vec<f64> = alpha.iter().zip(flags).filter(|(_, &f)| f).map(|(a, _)| *a).collect();
    if noise.is_empty() || signal.is_empty() {
        return None;
    }
    Some(signal.iter().all(|s| noise.iter().all(|n| s > n)))
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let labels = &ckpt.model.labels;
    let (bags, signal): (Vec<Bag>, Option<SignalMap>) = if a.data == SYNTH {
        let data = synth_from_checkpoint(&ckpt)?;
        let bags = match a.split.as_str() {
            "test" => data.test,
            "train" => data.train,
            other => bail!("--split must be `train` or `test`, got `{other}`"),
        };
        (bags, Some(data.signal))
    } else {
        (
            test_bags(&load_records(&a.data)?, &ckpt.vocab, labels, &ckpt.config)?,
            None,
        )
    };
    let relation = match &a.relation {
        Some(name) => Some(labels.get(name).with_context(|| format!("unknown relation `{name}`"))?),
        None => None,
    };

    let mut entries = vec![
        ("command".to_owned(), "inspect-attention".to_owned()),
        ("checkpoint".to_owned(), a.checkpoint.display().to_string()),
        ("data".to_owned(), a.data.clone()),
    ];
    if let Some(b) = a.bag {
        entries.push(("bag".to_owned(), b.to_string()));
    }
    if let Some(p) = &a.pair {
        entries.push(("pair".to_owned(), p.clone()));
    }
    if let Some(r) = &a.relation {
        entries.push(("relation".to_owned(), r.clone()));
    }
    let dir = match &a.shared.out_dir {
        Some(_) => Some(out_dir(&a.shared)?),
        None => None,
    };
    let log = RunLog::start(dir.as_deref(), "inspect-attention", &entries)?;

    if a.all {
        let signal = signal.context("--all needs synthetic data with known signal sentences")?;
        let (mut inspected, mut wins) = (0usize, 0usize);
        for bag in &bags {
            let flags = signal.for_bag(bag).context("bag missing from the signal map")?;
            let ins = inspect_attention(&ckpt.model, bag, Some(relation.unwrap_or(bag.label)))?;
            if let Some(win) = signal_wins(&ins.alpha, flags) {
                inspected += 1;
                wins += usize::from(win);
            }
        }
        println!("bags\t{inspected}");
        println!("signal_wins\t{wins}");
        println!("fraction\t{:.4}", wins as f64 / inspected.max(1) as f64);
        return log.finish();
    }

    let index = match (a.bag, &a.pair) {
        (Some(i), _) => {
            if i >= bags.len() {
                bail!("bag {i} not found: {} bags", bags.len());
            }
            i
        }
        (None, Some(pair)) => {
            let (h, t) = pair.split_once(',').context("--pair takes HEAD,TAIL")?;
            bags.iter()
                .position(|b| b.key.head_id == h && b.key.tail_id == t)
                .with_context(|| format!("bag for pair ({h}, {t}) not found"))?
        }
        (None, None) => bail!("select a bag with --bag, --pair or --all"),
    };
    let bag = &bags[index];
    let relation = relation.or((bag.label != NA_INDEX).then_some(bag.label));
    let ins = inspect_attention(&ckpt.model, bag, relation)?;
    println!(
        "# bag={} pair={},{} relation={} bag_rank={} probability={:.6}",
        index,
        bag.key.head_id,
        bag.key.tail_id,
        labels.name(ins.relation),
        ins.bag_rank,
        ins.bag_probability
    );
    let flags = signal.as_ref().and_then(|s| s.for_bag(bag));
    for (i, (alpha, rank)) in ins.alpha.iter().zip(&ins.sentence_rank).enumerate() {
        match flags {
            Some(f) => println!("{i}\t{alpha:.6}\t{rank}\t{}", if f[i] { "signal" } else { "noise" }),
            None => println!("{i}\t{alpha:.6}\t{rank}"),
        }
    }
    if let Some(d) = &dir {
        write_attention(&ins, labels, d)?;
    }
    log.finish()
}

pub fn synth(a: SynthCmdArgs) -> Result<()> {
    let config = resolve_config(&a.shared, &Overrides::default(), None, true)?;
    let sc = synth_config(&a.synth, &config);
    let dir = out_dir(&a.shared)?;
    let records = generate_synthetic_records(&sc, &mut ChaCha8Rng::seed_from_u64(config.seed))?;

    let mut entries = vec![("command".to_owned(), "synth".to_owned())];
    entries.extend(synth_extras(&sc, config.seed).into_iter().skip(1));
    let log = RunLog::start(Some(&dir), "synth", &entries)?;

    write_riedel_file(dir.join("train.txt"), &records.train)?;
    write_riedel_file(dir.join("test.txt"), &records.test)?;
    let labels = sc.labels();
    write_file(&dir.join("labels.txt"), &(labels.names().join("\n") + "\n"))?;
    let mut pairs: Vec<_> = records.signal.iter().collect();
    pairs.sort();
    let mut text = String::new();
    for ((h, t), flags) in pairs {
        let flags: String = flags.iter().map(|&f| if f { '1' } else { '0' }).collect();
        let _ = writeln!(text, "{h}\t{t}\t{flags}");
    }
    write_file(&dir.join("signal.tsv"), &text)?;
    println!(
        "wrote {} train and {} test sentences to {}",
        records.train.len(),
        records.test.len(),
        dir.display()
    );
    log.finish()
}
