//! `dsre`: train, evaluate and inspect the bag-attention relation extractor.

mod commands;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "dsre",
    version,
    about = "Distantly supervised relation extraction with a self-attention sentence encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint, loss log and config echo.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a test file: PR curve and P@N report.
    Eval(EvalArgs),
    /// Predict relations for sentences grouped by entity pair.
    Predict(PredictArgs),
    /// Export sentence-level and self-attention weights of a bag.
    InspectAttention(InspectArgs),
    /// Write a synthetic corpus with known signal sentences.
    Synth(SynthCmdArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Shared {
    /// Flat `key = value` config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for outputs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

macro_rules! overrides {
    ($($field:ident),* $(,)?) => {
        /// Per-key overrides of the training configuration.
        #[derive(Args, Debug, Clone, Default)]
        struct Overrides {
            $(
                #[arg(long, value_name = "VALUE", help_heading = "Training config", help = concat!("Set `", stringify!($field), "`"))]
                $field: Option<String>,
            )*
        }

        impl Overrides {
            fn entries(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field), v.as_str()));
                    }
                )*
                out
            }

            #[cfg(test)]
            fn keys() -> &'static [&'static str] {
                &[$(stringify!($field)),*]
            }
        }
    };
}

// `seed` and `epochs` are shared flags.
overrides!(
    d_w,
    d_p,
    heads,
    batch_size,
    lr,
    dropout,
    max_len,
    clip,
    d_model,
    ff_mult,
    blocks,
    ln_eps,
    lr_decay_every,
    lr_decay_rate,
    min_count,
    clip_norm,
    loss_reduction,
    bag_scoring,
    train_keying,
);

/// Shape of generated synthetic corpora.
#[derive(Args, Debug, Clone, Default)]
struct SynthArgs {
    /// Relation count including NA.
    #[arg(long, help_heading = "Synthetic data")]
    relations: Option<usize>,
    #[arg(long, help_heading = "Synthetic data")]
    train_bags: Option<usize>,
    #[arg(long, help_heading = "Synthetic data")]
    test_bags: Option<usize>,
    /// Sentences per bag.
    #[arg(long, help_heading = "Synthetic data")]
    bag_size: Option<usize>,
    /// Fraction of noise sentences per bag.
    #[arg(long, help_heading = "Synthetic data")]
    noise_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Training file in Riedel format, or `synth`.
    #[arg(long)]
    data: String,
    /// Relation list, one per line, NA first.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Pretrained word vectors (`count dim` header, then `word v1 .. vd`).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Number of epochs (15 for synthetic data unless set).
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test file in Riedel format, or `synth` for the held-out split of the
    /// synthetic corpus the checkpoint was trained on.
    #[arg(long)]
    data: String,
    /// Expected relation list; must match the checkpoint.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Comma-separated subset of one,two,all.
    #[arg(long, default_value = "one,two,all")]
    settings: String,
    /// Comma-separated N values for P@N.
    #[arg(long, default_value = "100,200,300")]
    ns: String,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sentences in Riedel format; the relation field may be a placeholder.
    #[arg(long)]
    data: PathBuf,
    /// Print the whole distribution after the top relation.
    #[arg(long)]
    full: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Riedel-format file, or `synth` for the checkpoint's synthetic corpus.
    #[arg(long)]
    data: String,
    /// Synthetic split to read.
    #[arg(long, default_value = "test")]
    split: String,
    /// Bag index in order of first appearance.
    #[arg(long, conflicts_with = "pair")]
    bag: Option<usize>,
    /// Bag by entity ids, `HEAD,TAIL`.
    #[arg(long)]
    pair: Option<String>,
    /// Relation to inspect; defaults to the gold label, or the top
    /// prediction for NA bags.
    #[arg(long)]
    relation: Option<String>,
    /// Summarize every bag of synthetic data: how often the signal sentence
    /// outweighs each noise sentence.
    #[arg(long, conflicts_with_all = ["bag", "pair"])]
    all: bool,
}

#[derive(Args, Debug)]
struct SynthCmdArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    synth: SynthArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(*a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::InspectAttention(a) => commands::inspect(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
