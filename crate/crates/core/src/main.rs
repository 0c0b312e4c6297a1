//! Command-line driver: dataset generation, training, evaluation,
//! gradient checking, and checkpoint inspection.
//!
//! Exit codes are a stable contract for scripting: 0 success, 2
//! usage/config error, 3 I/O error, 4 numerical abort, 5 config/data
//! mismatch.

use clap::{Parser, Subcommand, ValueEnum};
use mfb::answer::AnswerVocab;
use mfb::data::{self, GeneratorConfig, VqaSample};
use mfb::fusion::{MfbConfig, MfhConfig};
use mfb::gradcheck::{run_scope, Scope};
use mfb::model::{
    count_model_params, load_checkpoint, save_checkpoint, Architecture, FusionKind, ModelConfig,
    VqaModel,
};
use mfb::trainer::{self, EvalReport, TrainConfig};
use mfb::{Error, Result};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mfb", version, about = "Factorized bilinear pooling VQA at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic grid-world VQA dataset.
    GenData {
        /// Generator config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoints plus a metrics log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        train_config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Report consensus accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present_any = ["oracle", "constant"])]
        checkpoint: Option<PathBuf>,
        /// Debug: predict each sample's modal annotator answer.
        #[arg(long, conflicts_with_all = ["checkpoint", "constant"])]
        oracle: bool,
        /// Debug: predict this fixed answer for every sample.
        #[arg(long, conflicts_with = "checkpoint")]
        constant: Option<String>,
    },
    /// Run the finite-difference suite for one scope.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: ScopeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the parameter table of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Primitive,
    Fusion,
    Attention,
    Model,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Scope {
        match s {
            ScopeArg::Primitive => Scope::Primitive,
            ScopeArg::Fusion => Scope::Fusion,
            ScopeArg::Attention => Scope::Attention,
            ScopeArg::Model => Scope::Model,
        }
    }
}

/// The user-facing slice of [`ModelConfig`]; vocabularies and data
/// dims are derived from the training split at startup.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpec {
    architecture: Architecture,
    fusion_kind: FusionKind,
    embedding_dim: usize,
    lstm_hidden: usize,
    k: usize,
    o: usize,
    #[serde(default = "default_order")]
    order: usize,
    #[serde(default)]
    dropout_p: f64,
    #[serde(default = "default_one")]
    q_glimpses: usize,
    #[serde(default = "default_one")]
    i_glimpses: usize,
    #[serde(default = "default_att_hidden")]
    att_hidden: usize,
    /// Keep only the most frequent answers, like the top-N answer
    /// vocabulary of the full-scale task.
    #[serde(default = "default_answer_limit")]
    answer_limit: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_true")]
    power_norm: bool,
    #[serde(default = "default_true")]
    l2_norm: bool,
}

fn default_order() -> usize {
    1
}

fn default_one() -> usize {
    1
}

fn default_att_hidden() -> usize {
    32
}

fn default_answer_limit() -> usize {
    3000
}

fn default_true() -> bool {
    true
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {what} {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{what} {}: {e}", path.display())))
}

/// Completes a [`ModelSpec`] against the training split: closed token
/// vocabulary, top answers, and grid dimensions from the data.
fn resolve_model_config(
    spec: &ModelSpec,
    train_set: &[VqaSample],
    val_set: &[VqaSample],
) -> Result<ModelConfig> {
    let first = train_set
        .first()
        .ok_or_else(|| Error::Mismatch("training split is empty".into()))?;
    let grid_count = first.grid.len();
    let image_dim = first.grid.first().map(|f| f.len()).unwrap_or(0);
    let answer_lists: Vec<&[String]> = train_set.iter().map(|s| s.answers.as_slice()).collect();
    let answers = AnswerVocab::build(answer_lists, spec.answer_limit)?;
    let mut all: Vec<VqaSample> = train_set.to_vec();
    all.extend(val_set.iter().cloned());
    let (m, n) = match spec.architecture {
        Architecture::Baseline => (image_dim, spec.lstm_hidden),
        Architecture::Coattention => (
            spec.i_glimpses * image_dim,
            spec.q_glimpses * spec.lstm_hidden,
        ),
    };
    let mut mfb = MfbConfig::new(m, n, spec.k, spec.o, spec.dropout_p);
    mfb.power_norm = spec.power_norm;
    mfb.l2_norm = spec.l2_norm;
    let cfg = ModelConfig {
        architecture: spec.architecture,
        fusion_kind: spec.fusion_kind,
        question_vocab: data::token_vocab(&all),
        answer_vocab: answers.answers().to_vec(),
        embedding_dim: spec.embedding_dim,
        lstm_hidden: spec.lstm_hidden,
        image_dim,
        grid_count,
        max_question_len: data::max_question_len(&all),
        fusion: MfhConfig {
            order: spec.order,
            mfb,
        },
        q_glimpses: spec.q_glimpses,
        i_glimpses: spec.i_glimpses,
        att_hidden: spec.att_hidden,
        seed: spec.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen_data(
    config: Option<&Path>,
    out: &Path,
    count: usize,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg: GeneratorConfig = match config {
        Some(p) => read_json(p, "generator config")?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let samples = data::generate(&cfg, count)?;
    data::write_dataset(&samples, out)?;

    let mut mix = [0usize; 3];
    for s in &samples {
        let modal = trainer::modal_answer(&s.answers);
        match data::answer_type(&modal) {
            data::AnswerType::YesNo => mix[0] += 1,
            data::AnswerType::Number => mix[1] += 1,
            data::AnswerType::Other => mix[2] += 1,
        }
    }
    let answer_lists: Vec<&[String]> = samples.iter().map(|s| s.answers.as_slice()).collect();
    let answers = AnswerVocab::build(answer_lists, usize::MAX)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    println!(
        "answer types: yes/no {} number {} other {}",
        mix[0], mix[1], mix[2]
    );
    println!(
        "vocabulary: {} question tokens, {} answers",
        data::token_vocab(&samples).len(),
        answers.len()
    );
    Ok(())
}

fn cmd_train(
    data_path: &Path,
    val_path: &Path,
    model_config: &Path,
    train_config: &Path,
    out_dir: &Path,
) -> Result<()> {
    let train_set = data::read_dataset(data_path)?;
    let val_set = data::read_dataset(val_path)?;
    let spec: ModelSpec = read_json(model_config, "model config")?;
    let train_cfg: TrainConfig = read_json(train_config, "train config")?;
    train_cfg.validate()?;

    let cfg = resolve_model_config(&spec, &train_set, &val_set)?;
    let mut model = VqaModel::new(cfg.clone())?;
    let params = model.init_params::<f64>();
    let (_, total) = count_model_params(&params);
    println!(
        "training {:?}/{:?} model: {} parameters, {} train / {} val samples",
        cfg.architecture,
        cfg.fusion_kind,
        total,
        train_set.len(),
        val_set.len()
    );

    let outcome = trainer::train(&model, params, &train_set, &val_set, &train_cfg)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    save_checkpoint(&out_dir.join("best.ckpt"), &cfg, &outcome.best_params)?;
    save_checkpoint(&out_dir.join("final.ckpt"), &cfg, &outcome.final_params)?;
    trainer::write_metrics(&outcome.metrics, &out_dir.join("metrics.jsonl"))?;
    println!(
        "best validation accuracy {:.4} at epoch {}",
        outcome.best_accuracy, outcome.best_epoch
    );
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn print_report(report: &EvalReport) {
    let fmt = |v: Option<f64>| match v {
        Some(a) => format!("{a:.4}"),
        None => "-".to_string(),
    };
    println!("samples: {}", report.samples);
    println!("accuracy all: {:.4}", report.overall);
    println!(
        "accuracy yes/no: {}  number: {}  other: {}",
        fmt(report.yes_no),
        fmt(report.number),
        fmt(report.other)
    );
}

fn cmd_eval(
    data_path: &Path,
    checkpoint: Option<&Path>,
    oracle: bool,
    constant: Option<&str>,
) -> Result<()> {
    let samples = data::read_dataset(data_path)?;
    let report = if oracle {
        trainer::evaluate_with(&samples, |s| Ok(trainer::modal_answer(&s.answers)))?
    } else if let Some(answer) = constant {
        trainer::evaluate_with(&samples, |_| Ok(answer.to_string()))?
    } else {
        let path = checkpoint.expect("clap enforces one predictor source");
        let (cfg, params) = load_checkpoint(path)?;
        let mut model = VqaModel::new(cfg)?;
        model.init_params::<f64>(); // populate fusion block descriptors
        trainer::evaluate(&model, &params, &samples)?
    };
    print_report(&report);
    Ok(())
}

fn cmd_gradcheck(scope: ScopeArg, seed: u64) -> Result<()> {
    let checks = run_scope(scope.into(), seed)?;
    let mut failed = false;
    for c in &checks {
        println!(
            "{} {:24} points {:>4}  worst rel err {:.3e}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.points,
            c.worst
        );
        failed |= !c.passed();
    }
    if failed {
        return Err(Error::Mismatch(
            "analytic vs numeric gradient mismatch".into(),
        ));
    }
    Ok(())
}

fn cmd_inspect(checkpoint: &Path) -> Result<()> {
    let (cfg, params) = load_checkpoint(checkpoint)?;
    let (table, total) = count_model_params(&params);
    let width = table.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    println!(
        "{:?}/{:?} model, {} answers",
        cfg.architecture,
        cfg.fusion_kind,
        cfg.num_answers()
    );
    for (name, count) in &table {
        println!("{name:width$}  {count:>10}");
    }
    let fusion: usize = table
        .iter()
        .filter(|(n, _)| n.starts_with("fusion."))
        .map(|(_, c)| c)
        .sum();
    println!("{:width$}  {fusion:>10}", "fusion subtotal");
    println!("{:width$}  {total:>10}", "total");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 2,
        Error::Io { .. } | Error::MalformedRecord { .. } | Error::Checkpoint(_) => 3,
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => 4,
        _ => 5,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            config,
            out,
            count,
            seed,
        } => cmd_gen_data(config.as_deref(), &out, count, seed),
        Cmd::Train {
            data,
            val,
            model_config,
            train_config,
            out_dir,
        } => cmd_train(&data, &val, &model_config, &train_config, &out_dir),
        Cmd::Eval {
            data,
            checkpoint,
            oracle,
            constant,
        } => cmd_eval(&data, checkpoint.as_deref(), oracle, constant.as_deref()),
        Cmd::Gradcheck { scope, seed } => cmd_gradcheck(scope, seed),
        Cmd::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
