//! Held-out evaluation: ranked non-NA predictions scored against the
//! knowledge-base facts of the test file.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{subsample_bag, Bag, LabelSet, Setting, NA_INDEX};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::tensor::Tensor;

/// Default cut-offs for P@N.
pub const DEFAULT_NS: [usize; 3] = [100, 200, 300];
/// Number of prefixes kept in the downsampled curve file.
pub const DOWNSAMPLED_POINTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub head: String,
    pub tail: String,
    /// Relation index, never NA.
    pub relation: usize,
    pub score: f64,
}

/// A knowledge-base fact `(head, tail, relation)`.
pub type Fact = (String, String, usize);

/// Non-NA `(pair, relation)` facts attached to the bags.
pub fn gold_facts(bags: &[Bag]) -> BTreeSet<Fact> {
    bags.iter()
        .flat_map(|b| b.facts().map(|r| (b.key.head_id.clone(), b.key.tail_id.clone(), r)))
        .collect()
}

/// One prediction per bag and non-NA relation, scored with the bag's
/// probability for that relation. Bags are scored in parallel.
pub fn predict_bags(model: &Model, labels: &LabelSet, bags: &[Bag]) -> Result<Vec<Prediction>> {
    if &model.labels != labels {
        return Err(Error::LabelMismatch(format!(
            "model has {} relations {:?}, test data has {} relations {:?}",
            model.labels.len(),
            preview(model.labels.names()),
            labels.len(),
            preview(labels.names())
        )));
    }
    let per_bag: Vec<Vec<Prediction>> = bags
        .par_iter()
        .map(|bag| {
            let pred = model.predict(&bag.sentences)?;
            Ok(pred
                .probabilities
                .data()
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != NA_INDEX)
                .map(|(k, &p)| Prediction {
                    head: bag.key.head_id.clone(),
                    tail: bag.key.tail_id.clone(),
                    relation: k,
                    score: p,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_bag.into_iter().flatten().collect())
}

fn preview(names: &[String]) -> Vec<&str> {
    names.iter().take(4).map(String::as_str).collect()
}

/// Score descending, then pair, then relation.
fn ranking_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.head.cmp(&b.head))
        .then_with(|| a.tail.cmp(&b.tail))
        .then_with(|| a.relation.cmp(&b.relation))
}

/// Predictions sorted into ranking order.
pub fn rank_predictions(predictions: &[Prediction]) -> Vec<&Prediction> {
    let mut sorted: Vec<&Prediction> = predictions.iter().collect();
    sorted.sort_by(|a, b| ranking_order(a, b));
    sorted
}

fn is_hit(p: &Prediction, gold: &BTreeSet<Fact>) -> bool {
    gold.contains(&(p.head.clone(), p.tail.clone(), p.relation))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrPoint {
    /// 1-based prefix length.
    pub rank: usize,
    pub score: f64,
    pub hit: bool,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub total_facts: usize,
}

impl PrCurve {
    pub fn hits(&self) -> usize {
        self.points.iter().filter(|p| p.hit).count()
    }

    /// Highest precision among points whose recall reaches `recall`.
    pub fn precision_at_recall(&self, recall: f64) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.recall >= recall)
            .map(|p| p.precision)
            .reduce(f64::max)
    }

    /// Area under the step curve (sum of precision times recall increments).
    pub fn average_precision(&self) -> f64 {
        let mut prev = 0.0;
        let mut area = 0.0;
        for p in &self.points {
            area += p.precision * (p.recall - prev);
            prev = p.recall;
        }
        area
    }

    /// At most `k` points at evenly spaced prefixes, always ending with the
    /// full list.
    pub fn downsample(&self, k: usize) -> Vec<&PrPoint> {
        let n = self.points.len();
        if n <= k {
            return self.points.iter().collect();
        }
        (1..=k).map(|i| &self.points[i * n / k - 1]).collect()
    }
}

/// Precision and recall after every prefix of the ranked predictions.
pub fn pr_curve(predictions: &[Prediction], gold: &BTreeSet<Fact>) -> Result<PrCurve> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions to rank".into()));
    }
    if gold.is_empty() {
        return Err(Error::InvalidArgument("gold fact set is empty".into()));
    }
    let f = gold.len() as f64;
    let mut hits = 0usize;
    let points = rank_predictions(predictions)
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let hit = is_hit(p, gold);
            hits += hit as usize;
            PrPoint {
                rank: i + 1,
                score: p.score,
                hit,
                precision: hits as f64 / (i + 1) as f64,
                recall: hits as f64 / f,
            }
        })
        .collect();
    Ok(PrCurve {
        points,
        total_facts: gold.len(),
    })
}

/// Percentage of hits among the `n` highest-scored predictions.
pub fn precision_at_n(predictions: &[Prediction], gold: &BTreeSet<Fact>, n: usize) -> Result<f64> {
    if n == 0 || n > predictions.len() {
        return Err(Error::InvalidArgument(format!(
            "P@{n} needs between 1 and {} predictions",
            predictions.len()
        )));
    }
    let hits = rank_predictions(predictions)
        .into_iter()
        .take(n)
        .filter(|p| is_hit(p, gold))
        .count();
    Ok(100.0 * hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SettingReport {
    pub setting: Setting,
    /// `(N, precision percent)`.
    pub precision: Vec<(usize, f64)>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub settings: Vec<SettingReport>,
    /// Curve over every test bag, unmodified.
    pub curve: PrCurve,
}

/// P@N under each setting plus the full-test-set curve.
///
/// One and Two subsample the bags holding at least two sentences; All uses
/// those same bags unmodified. Subsampling draws from `rng` in setting order.
pub fn evaluate_settings<R: Rng + ?Sized>(
    model: &Model,
    labels: &LabelSet,
    bags: &[Bag],
    settings: &[Setting],
    ns: &[usize],
    rng: &mut R,
) -> Result<EvalReport> {
    let gold = gold_facts(bags);
    let all_predictions = predict_bags(model, labels, bags)?;
    let curve = pr_curve(&all_predictions, &gold)?;

    let multi: Vec<&Bag> = bags.iter().filter(|b| b.len() >= 2).collect();
    let mut reports = Vec::with_capacity(settings.len());
    for &setting in settings {
        let sub: Vec<Bag> = multi
            .iter()
            .map(|b| subsample_bag(b, setting, rng))
            .collect::<Result<_>>()?;
        if sub.is_empty() {
            return Err(Error::InvalidArgument("no test bag has two or more sentences".into()));
        }
        let preds = predict_bags(model, labels, &sub)?;
        let sub_gold = gold_facts(&sub);
        let precision = ns
            .iter()
            .map(|&n| Ok((n, precision_at_n(&preds, &sub_gold, n)?)))
            .collect::<Result<Vec<_>>>()?;
        let mean = precision.iter().map(|(_, p)| p).sum::<f64>() / precision.len().max(1) as f64;
        reports.push(SettingReport {
            setting,
            precision,
            mean,
        });
    }
    Ok(EvalReport {
        settings: reports,
        curve,
    })
}

pub fn format_curve<'a>(points: impl IntoIterator<Item = &'a PrPoint>, total_facts: usize) -> String {
    let mut out = format!("# total_facts={total_facts}\n");
    for p in points {
        let _ = writeln!(
            out,
            "{}\t{:.9}\t{}\t{:.9}\t{:.9}",
            p.rank, p.score, p.hit as u8, p.precision, p.recall
        );
    }
    out
}

pub fn format_pn_report(settings: &[SettingReport]) -> String {
    let mut out = String::new();
    for s in settings {
        for (n, p) in &s.precision {
            let _ = writeln!(out, "{}\t{n}\t{p:.2}", s.setting);
        }
        let _ = writeln!(out, "{}\tmean\t{:.2}", s.setting, s.mean);
    }
    out
}

/// Paths written by [`write_report`].
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub curve: PathBuf,
    pub curve_downsampled: PathBuf,
    pub pn: PathBuf,
}

/// Writes `pr_curve.tsv`, `pr_curve_1000.tsv` and `pn.tsv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        curve: dir.join("pr_curve.tsv"),
        curve_downsampled: dir.join("pr_curve_1000.tsv"),
        pn: dir.join("pn.tsv"),
    };
    let curve = &report.curve;
    write(&files.curve, &format_curve(&curve.points, curve.total_facts))?;
    write(
        &files.curve_downsampled,
        &format_curve(curve.downsample(DOWNSAMPLED_POINTS), curve.total_facts),
    )?;
    write(&files.pn, &format_pn_report(&report.settings))?;
    Ok(files)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fraction of bags whose most probable relation equals their label.
pub fn bag_accuracy(model: &Model, bags: &[Bag]) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::InvalidArgument("no bags".into()));
    }
    let correct: usize = bags
        .par_iter()
        .map(|b| Ok((model.predict(&b.sentences)?.top() == b.label) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / bags.len() as f64)
}

/// Attention view of one bag for a chosen relation.
#[derive(Clone, Debug)]
pub struct AttentionInspection {
    pub relation: usize,
    /// 1-based rank of `relation` in the bag distribution.
    pub bag_rank: usize,
    pub bag_probability: f64,
    /// `alpha_ik` per sentence.
    pub alpha: Vec<f64>,
    /// Rank of `relation` when each sentence is classified on its own.
    pub sentence_rank: Vec<usize>,
    /// Self-attention weights per sentence, block and head, each
    /// `true_len x true_len`.
    pub heads: Vec<Vec<Vec<Tensor>>>,
}

/// Inspects `bag` for `relation`, defaulting to the bag label when it is
/// not NA and to the top prediction otherwise.
pub fn inspect_attention(model: &Model, bag: &Bag, relation: Option<usize>) -> Result<AttentionInspection> {
    let mut g = Graph::new(&model.params);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let fwd = model.forward_bag(&mut g, &bag.sentences, false, &mut rng)?;
    let probs = crate::bag_model::classify(g.value(fwd.output.scores));
    let relation = match relation {
        Some(r) if r >= model.num_relations() => {
            return Err(Error::InvalidArgument(format!("relation index {r} out of range")))
        }
        Some(r) => r,
        None if bag.label != NA_INDEX => bag.label,
        None => probs.argmax(),
    };
    let alpha_t = g.value(fwd.output.alpha);
    let l = model.num_relations();
    let alpha = (0..bag.len()).map(|i| alpha_t.data()[i * l + relation]).collect();
    let u = g.value(fwd.sentence_scores);
    let sentence_rank = (0..bag.len())
        .map(|i| rank_in(&u.data()[i * l..(i + 1) * l], relation))
        .collect();
    let heads = fwd
        .encodings
        .iter()
        .zip(&bag.sentences)
        .map(|(enc, s)| {
            enc.attention
                .iter()
                .map(|block| block.iter().map(|&h| top_left(g.value(h), s.true_len)).collect())
                .collect()
        })
        .collect();
    Ok(AttentionInspection {
        relation,
        bag_rank: rank_in(probs.data(), relation),
        bag_probability: probs.data()[relation],
        alpha,
        sentence_rank,
        heads,
    })
}

fn rank_in(values: &[f64], k: usize) -> usize {
    1 + values
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > values[k] || (v == values[k] && j < k))
        .count()
}

fn top_left(t: &Tensor, m: usize) -> Tensor {
    let cols = t.dims2().1;
    let data = (0..m)
        .flat_map(|i| t.data()[i * cols..i * cols + m].iter().copied())
        .collect();
    Tensor::new(vec![m, m], data).expect("square block")
}

/// Writes `alpha.tsv` and one `sentence{i}.block{b}.head{h}.tsv` matrix per
/// head into `dir`.
pub fn write_attention(inspection: &AttentionInspection, labels: &LabelSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = format!(
        "# relation={} bag_rank={} probability={:.6e}\n",
        labels.name(inspection.relation),
        inspection.bag_rank,
        inspection.bag_probability
    );
    for (i, (a, r)) in inspection.alpha.iter().zip(&inspection.sentence_rank).enumerate() {
        let _ = writeln!(out, "{i}\t{a:.9}\t{r}");
    }
    write(&dir.join("alpha.tsv"), &out)?;
    for (i, blocks) in inspection.heads.iter().enumerate() {
        for (b, heads) in blocks.iter().enumerate() {
            for (h, m) in heads.iter().enumerate() {
                let cols = m.dims2().1;
                let mut text = String::new();
                for row in m.data().chunks(cols) {
                    let line: Vec<String> = row.iter().map(|v| format!("{v:.12}")).collect();
                    text.push_str(&line.join("\t"));
                    text.push('\n');
                }
                write(&dir.join(format!("sentence{i}.block{b}.head{h}.tsv")), &text)?;
            }
        }
    }
    Ok(())
}
