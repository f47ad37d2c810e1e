//! The seven subcommands: resolve settings, call into the library, write
//! artifacts, print a short human summary.
//!
//! Every command is deterministic given its resolved configuration: corpora
//! come from salted seed streams, artifacts are canonical JSON or raw
//! little-endian tensors, and wall-clock times are printed to stdout but
//! never serialized. Each setting resolves as flag, then config-file key of
//! the same name, then built-in default.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use serde_json::{Map, Value};

use curlib::ablate::{
    ablate_calib_size, ablate_layer_selection, ablate_rank_cap, ablate_strategies, ablate_targets,
    pick_layers, LayerPick,
};
use curlib::healing::{heal, HealConfig};
use curlib::model::{
    calibrate, rank_layers, stream_seed, synthetic_corpus, train_next_token, CalibrationStats,
    CorpusStream, ModelConfig, TrainConfig, WeightTarget,
};
use curlib::pipeline::{
    activation_diff_report, compress_model, per_token_output_mse, perplexity, size_report,
    ArchSpec, CompressionPlan,
};
use curlib::selection::Strategy;
use curlib::store::{factorized_weights, load_model, load_stats, save_model, save_stats};
use curlib::{Error as LibError, ToyTransformer};

use crate::config::{self, FileConfig};
use crate::error::{CliError, CliResult};
use crate::report::{create_dir, write_file, RunReport};

// ---------------------------------------------------------------------------
// shared resolution helpers
// ---------------------------------------------------------------------------

fn require_path(flag: &Option<PathBuf>, file: &FileConfig, key: &str) -> CliResult<PathBuf> {
    flag.clone().or_else(|| file.path_key(key)).ok_or_else(|| {
        CliError::Config(format!(
            "missing required setting `{key}` (pass --{key} or set it in the config file)"
        ))
    })
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn check_context(context_len: usize, max_seq: usize) -> CliResult<()> {
    if context_len < 2 {
        return Err(CliError::Config(format!(
            "context-len must be at least 2, got {context_len}"
        )));
    }
    if context_len > max_seq {
        return Err(CliError::Config(format!(
            "context-len {context_len} exceeds the model's max-seq {max_seq}"
        )));
    }
    Ok(())
}

fn target_word(t: WeightTarget) -> &'static str {
    match t {
        WeightTarget::Query => "query",
        WeightTarget::Key => "key",
        WeightTarget::Gate => "gate",
    }
}

fn target_words(ts: &[WeightTarget]) -> String {
    ts.iter()
        .map(|&t| target_word(t))
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_params(p: u64) -> String {
    format!("{:.2}B", p as f64 / 1e9)
}

fn fmt_gib(bytes: u64) -> String {
    format!("{:.2} GiB", bytes as f64 / (1u64 << 30) as f64)
}

/// Insertion-ordered builder for the `config` object embedded in reports;
/// canonical serialization sorts the keys on write.
struct Conf(Map<String, Value>);

impl Conf {
    fn new(command: &str) -> Self {
        let mut m = Map::new();
        m.insert("command".into(), Value::from(command));
        Conf(m)
    }

    fn set(&mut self, key: &str, v: impl Into<Value>) {
        self.0.insert(key.to_string(), v.into());
    }

    fn done(self) -> Value {
        Value::Object(self.0)
    }
}

fn u(v: usize) -> u64 {
    v as u64
}

// ---------------------------------------------------------------------------
// gen-model
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenModelArgs {
    /// Directory to create the model in (manifest.json + tensors/ + report)
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Master seed for weights, corpora, and batch order [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Transformer blocks [default: 4]
    #[arg(long)]
    n_layers: Option<usize>,
    /// Residual width; must equal n-heads * d-k [default: 32]
    #[arg(long)]
    d_model: Option<usize>,
    /// Query heads [default: 4]
    #[arg(long)]
    n_heads: Option<usize>,
    /// Width of one attention head [default: 8]
    #[arg(long)]
    d_k: Option<usize>,
    /// Key/value heads; must divide n-heads [default: 2]
    #[arg(long)]
    n_kv_heads: Option<usize>,
    /// Feed-forward inner width [default: 48]
    #[arg(long)]
    d_inter: Option<usize>,
    /// Vocabulary size [default: 64]
    #[arg(long)]
    vocab: Option<usize>,
    /// Longest supported sequence [default: 128]
    #[arg(long)]
    max_seq: Option<usize>,
    /// Sequence length for the training corpus [default: 128]
    #[arg(long)]
    context_len: Option<usize>,
    /// Training sequences, drawn from the healing stream [default: 64]
    #[arg(long)]
    train_size: Option<usize>,
    /// Optimizer steps [default: 200]
    #[arg(long)]
    train_steps: Option<usize>,
    /// Peak learning rate [default: 0.01]
    #[arg(long)]
    train_lr: Option<f64>,
    /// Sequences per optimizer step [default: 8]
    #[arg(long)]
    train_batch: Option<usize>,
    /// Linear warmup steps before the cosine decay [default: 20]
    #[arg(long)]
    train_warmup: Option<usize>,
}

pub fn cmd_gen_model(a: &GenModelArgs, file: &FileConfig) -> CliResult<()> {
    let out_dir = require_path(&a.out_dir, file, "out-dir")?;
    let seed = a.seed.or(file.u64_key("seed")?).unwrap_or(0);
    let cfg = ModelConfig {
        n_layers: a.n_layers.or(file.usize_key("n-layers")?).unwrap_or(4),
        d_model: a.d_model.or(file.usize_key("d-model")?).unwrap_or(32),
        n_heads: a.n_heads.or(file.usize_key("n-heads")?).unwrap_or(4),
        d_k: a.d_k.or(file.usize_key("d-k")?).unwrap_or(8),
        n_kv_heads: a.n_kv_heads.or(file.usize_key("n-kv-heads")?).unwrap_or(2),
        d_inter: a.d_inter.or(file.usize_key("d-inter")?).unwrap_or(48),
        vocab: a.vocab.or(file.usize_key("vocab")?).unwrap_or(64),
        max_seq: a.max_seq.or(file.usize_key("max-seq")?).unwrap_or(128),
    };
    cfg.validate()?;
    let context_len = a.context_len.or(file.usize_key("context-len")?).unwrap_or(128);
    check_context(context_len, cfg.max_seq)?;
    let train_size = a.train_size.or(file.usize_key("train-size")?).unwrap_or(64);
    let train = TrainConfig {
        steps: a.train_steps.or(file.usize_key("train-steps")?).unwrap_or(200),
        batch_size: a.train_batch.or(file.usize_key("train-batch")?).unwrap_or(8),
        lr: a.train_lr.or(file.f64_key("train-lr")?).unwrap_or(1e-2),
        warmup: a.train_warmup.or(file.usize_key("train-warmup")?).unwrap_or(20),
        seed,
    };

    let start = Instant::now();
    let mut model = ToyTransformer::new_random(cfg, seed)?;
    let corpus = synthetic_corpus(
        train_size,
        context_len,
        cfg.vocab,
        stream_seed(seed, CorpusStream::Healing),
    )?;
    let losses = train_next_token(&mut model, &corpus, &train)?;
    save_model(&model, &out_dir)?;

    let mut conf = Conf::new("gen-model");
    conf.set("out-dir", path_str(&out_dir));
    conf.set("seed", seed);
    conf.set("n-layers", u(cfg.n_layers));
    conf.set("d-model", u(cfg.d_model));
    conf.set("n-heads", u(cfg.n_heads));
    conf.set("d-k", u(cfg.d_k));
    conf.set("n-kv-heads", u(cfg.n_kv_heads));
    conf.set("d-inter", u(cfg.d_inter));
    conf.set("vocab", u(cfg.vocab));
    conf.set("max-seq", u(cfg.max_seq));
    conf.set("context-len", u(context_len));
    conf.set("train-size", u(train_size));
    conf.set("train-steps", u(train.steps));
    conf.set("train-lr", train.lr);
    conf.set("train-batch", u(train.batch_size));
    conf.set("train-warmup", u(train.warmup));

    let mut report = RunReport::new(conf.done())?;
    report.metric("params", model.param_total())?;
    report.metric("train-steps", u(train.steps))?;
    report.metric("final-loss", losses.last().copied())?;

    let mut csv = String::from("step,loss\n");
    for (i, loss) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{loss}\n"));
    }
    write_file(&out_dir.join("train_losses.csv"), csv.as_bytes())?;
    report.write(&out_dir)?;

    match losses.last() {
        Some(l) => println!(
            "generated {}-layer model ({} params); final training loss {l:.4} ({:.2} s)",
            cfg.n_layers,
            model.param_total(),
            start.elapsed().as_secs_f64()
        ),
        None => println!(
            "generated {}-layer model ({} params); not trained ({:.2} s)",
            cfg.n_layers,
            model.param_total(),
            start.elapsed().as_secs_f64()
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct CalibrateArgs {
    /// Model directory to calibrate
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// Directory for stats.json and the report
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Master seed; the calibration stream is salted from it [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Calibration sequences [default: 128]
    #[arg(long)]
    calib_size: Option<usize>,
    /// Sequence length [default: 128]
    #[arg(long)]
    context_len: Option<usize>,
}

pub fn cmd_calibrate(a: &CalibrateArgs, file: &FileConfig) -> CliResult<()> {
    let model_dir = require_path(&a.model_dir, file, "model-dir")?;
    let out_dir = require_path(&a.out_dir, file, "out-dir")?;
    let seed = a.seed.or(file.u64_key("seed")?).unwrap_or(0);
    let calib_size = a.calib_size.or(file.usize_key("calib-size")?).unwrap_or(128);
    let context_len = a.context_len.or(file.usize_key("context-len")?).unwrap_or(128);

    let model = load_model(&model_dir)?;
    check_context(context_len, model.config.max_seq)?;
    let corpus = synthetic_corpus(
        calib_size,
        context_len,
        model.config.vocab,
        stream_seed(seed, CorpusStream::Calibration),
    )?;
    let stats = calibrate(&model, &corpus)?;
    create_dir(&out_dir)?;
    save_stats(&stats, &out_dir.join("stats.json"))?;

    let mut conf = Conf::new("calibrate");
    conf.set("model-dir", path_str(&model_dir));
    conf.set("out-dir", path_str(&out_dir));
    conf.set("seed", seed);
    conf.set("calib-size", u(calib_size));
    conf.set("context-len", u(context_len));

    let mut report = RunReport::new(conf.done())?;
    report.metric("sequences", u(calib_size))?;
    report.metric("context-len", u(context_len))?;
    // Ranking needs interior layers, which 1- and 2-layer models lack.
    if model.config.n_layers >= 3 {
        let ranking = rank_layers(&stats)?;
        report.sub_report("layer-ranking", &ranking)?;
        report.write(&out_dir)?;
        println!(
            "calibrated on {calib_size} sequences of length {context_len}; \
             layer ranking (most compressible first): {:?}",
            ranking.ranked
        );
    } else {
        report.write(&out_dir)?;
        println!("calibrated on {calib_size} sequences of length {context_len}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// compress
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct CompressArgs {
    /// Model directory to compress (kept untouched; a copy is written)
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// Directory for the compressed model and reports
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Calibration stats file; without it, activation-aware strategies
    /// calibrate inline on the calibration stream
    #[arg(long, value_name = "FILE")]
    stats: Option<PathBuf>,
    /// Comma-separated layer indices to compress (first/last are protected)
    #[arg(long, value_delimiter = ',', value_name = "IDX,...")]
    layers: Option<Vec<usize>>,
    /// Pick this many layers by angular-distance ranking instead of --layers
    #[arg(long, value_name = "N")]
    auto_layers: Option<usize>,
    /// Comma-separated subset of query,key,gate [default: query,key,gate]
    #[arg(long, value_name = "LIST")]
    targets: Option<String>,
    /// Rank cap for the break-even rank formula [default: 256]
    #[arg(long)]
    r_max: Option<usize>,
    /// Fixed rank replacing the formula (clamped to each weight's full rank)
    #[arg(long, value_name = "R")]
    rank_override: Option<usize>,
    /// Index selection: wanda-deim, deim-only, wanda-only, weight-norm, or
    /// random [default: wanda-deim]
    #[arg(long)]
    strategy: Option<String>,
    /// Master seed for selection and corpora [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Inline-calibration sequences [default: 128]
    #[arg(long)]
    calib_size: Option<usize>,
    /// Sequence length for inline calibration [default: 128]
    #[arg(long)]
    context_len: Option<usize>,
}

pub fn cmd_compress(a: &CompressArgs, file: &FileConfig) -> CliResult<()> {
    let model_dir = require_path(&a.model_dir, file, "model-dir")?;
    let out_dir = require_path(&a.out_dir, file, "out-dir")?;
    let seed = a.seed.or(file.u64_key("seed")?).unwrap_or(0);
    let strategy = a
        .strategy
        .as_deref()
        .map(config::parse_strategy)
        .transpose()?
        .or(file.strategy_key("strategy")?)
        .unwrap_or(Strategy::WandaDeim);
    let targets = a
        .targets
        .as_deref()
        .map(config::parse_targets)
        .transpose()?
        .or(file.targets_key("targets")?)
        .unwrap_or_else(|| WeightTarget::ALL.to_vec());
    let r_max = a.r_max.or(file.usize_key("r-max")?).unwrap_or(256);
    let rank_override = a.rank_override.or(file.usize_key("rank-override")?);
    let calib_size = a.calib_size.or(file.usize_key("calib-size")?).unwrap_or(128);
    let context_len = a.context_len.or(file.usize_key("context-len")?).unwrap_or(128);

    let explicit = a.layers.clone().or(file.list_key("layers")?);
    let auto = a.auto_layers.or(file.usize_key("auto-layers")?);
    if explicit.is_some() && auto.is_some() {
        return Err(CliError::ConflictingFlags(
            "--layers and --auto-layers select layers in different ways; pass one".into(),
        ));
    }
    if explicit.is_none() && auto.is_none() {
        return Err(CliError::Config(
            "choose layers with --layers <indices> or --auto-layers <count>".into(),
        ));
    }

    let teacher = load_model(&model_dir)?;
    let stats_path = a.stats.clone().or_else(|| file.path_key("stats"));
    let need_stats = strategy.needs_activations() || auto.is_some();
    let stats: Option<CalibrationStats> = match (&stats_path, need_stats) {
        (Some(path), _) => {
            let s = load_stats(path)?;
            if s.config != teacher.config {
                return Err(LibError::ArchitectureMismatch(format!(
                    "stats in {} were calibrated for a different architecture",
                    path.display()
                ))
                .into());
            }
            Some(s)
        }
        (None, true) => {
            check_context(context_len, teacher.config.max_seq)?;
            let corpus = synthetic_corpus(
                calib_size,
                context_len,
                teacher.config.vocab,
                stream_seed(seed, CorpusStream::Calibration),
            )?;
            Some(calibrate(&teacher, &corpus)?)
        }
        (None, false) => None,
    };

    let layers = match auto {
        Some(n) => pick_layers(
            LayerPick::Angular,
            stats.as_ref().expect("auto selection always calibrates"),
            n,
            seed,
        )?,
        None => explicit.expect("checked above"),
    };

    let plan = CompressionPlan {
        layers,
        targets,
        r_max,
        strategy,
        seed: Some(seed),
        rank_override,
    };
    let out = compress_model(&teacher, &plan, stats.as_ref())?;
    save_model(&out.model, &out_dir)?;

    let mut conf = Conf::new("compress");
    conf.set("model-dir", path_str(&model_dir));
    conf.set("out-dir", path_str(&out_dir));
    if let Some(p) = &stats_path {
        conf.set("stats", path_str(p));
    }
    if let Some(n) = auto {
        conf.set("auto-layers", u(n));
    } else {
        conf.set(
            "layers",
            plan.layers.iter().map(|&l| u(l)).collect::<Vec<u64>>(),
        );
    }
    conf.set("targets", target_words(&plan.targets));
    conf.set("r-max", u(r_max));
    if let Some(r) = rank_override {
        conf.set("rank-override", u(r));
    }
    conf.set("strategy", strategy.name());
    conf.set("seed", seed);
    conf.set("calib-size", u(calib_size));
    conf.set("context-len", u(context_len));

    let saved: i64 = out.reports.iter().map(|r| r.params.saved).sum();
    let mut report = RunReport::new(conf.done())?;
    report.metric("weights", out.reports.len() as u64)?;
    report.metric("model-params-original", teacher.param_total())?;
    report.metric("model-params-compressed", out.model.param_total())?;
    report.metric("saved-params", saved)?;
    report.sub_report("plan", &plan)?;
    report.sub_report("weight-reports", &out.reports)?;
    report.write(&out_dir)?;

    println!(
        "compressed {} weights in layers {:?} with {}; params {} -> {} ({:.2} s)",
        out.reports.len(),
        plan.layers,
        strategy.name(),
        teacher.param_total(),
        out.model.param_total(),
        out.wall_time.as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// heal
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct HealArgs {
    /// Teacher model directory (the uncompressed original)
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// Compressed model directory to heal
    #[arg(long, value_name = "DIR")]
    compressed_dir: Option<PathBuf>,
    /// Directory for the healed model, trace, and report
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Master seed; the healing stream is salted from it [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Healing sequences, drawn from the healing stream [default: 128]
    #[arg(long)]
    calib_size: Option<usize>,
    /// Sequence length [default: 128]
    #[arg(long)]
    context_len: Option<usize>,
    /// Distillation steps [default: 500]
    #[arg(long)]
    heal_steps: Option<usize>,
    /// Sequences per step [default: 16]
    #[arg(long)]
    heal_batch: Option<usize>,
    /// Peak learning rate [default: 0.0003]
    #[arg(long)]
    heal_lr: Option<f64>,
    /// Linear warmup steps before the cosine decay [default: 100]
    #[arg(long)]
    heal_warmup: Option<usize>,
    /// Weight of the plain cross-entropy term; distillation gets 1 - alpha
    /// [default: 0.1]
    #[arg(long)]
    heal_alpha: Option<f64>,
    /// Softmax temperature of the logit-distillation term [default: 10]
    #[arg(long)]
    heal_temperature: Option<f64>,
}

pub fn cmd_heal(a: &HealArgs, file: &FileConfig) -> CliResult<()> {
    let model_dir = require_path(&a.model_dir, file, "model-dir")?;
    let compressed_dir = require_path(&a.compressed_dir, file, "compressed-dir")?;
    let out_dir = require_path(&a.out_dir, file, "out-dir")?;
    let seed = a.seed.or(file.u64_key("seed")?).unwrap_or(0);
    let calib_size = a.calib_size.or(file.usize_key("calib-size")?).unwrap_or(128);
    let context_len = a.context_len.or(file.usize_key("context-len")?).unwrap_or(128);
    let cfg = HealConfig {
        steps: a.heal_steps.or(file.usize_key("heal-steps")?).unwrap_or(500),
        batch_size: a.heal_batch.or(file.usize_key("heal-batch")?).unwrap_or(16),
        lr: a.heal_lr.or(file.f64_key("heal-lr")?).unwrap_or(3e-4),
        warmup_steps: a.heal_warmup.or(file.usize_key("heal-warmup")?).unwrap_or(100),
        alpha: a.heal_alpha.or(file.f64_key("heal-alpha")?).unwrap_or(0.1),
        temperature: a
            .heal_temperature
            .or(file.f64_key("heal-temperature")?)
            .unwrap_or(10.0),
        seed,
    };

    let teacher = load_model(&model_dir)?;
    let mut student = load_model(&compressed_dir)?;
    check_context(context_len, teacher.config.max_seq)?;
    let corpus = synthetic_corpus(
        calib_size,
        context_len,
        teacher.config.vocab,
        stream_seed(seed, CorpusStream::Healing),
    )?;

    let start = Instant::now();
    let trace = heal(&teacher, &mut student, &corpus, &cfg)?;
    save_model(&student, &out_dir)?;

    let mut jsonl = String::new();
    let mut csv = String::from("step,kd_loss,ce_loss,total_loss\n");
    for s in &trace.steps {
        let line = serde_json::to_string(s)
            .map_err(|e| CliError::Config(format!("serializing trace: {e}")))?;
        jsonl.push_str(&line);
        jsonl.push('\n');
        csv.push_str(&format!(
            "{},{},{},{}\n",
            s.step, s.kd_loss, s.ce_loss, s.total_loss
        ));
    }
    write_file(&out_dir.join("trace.jsonl"), jsonl.as_bytes())?;
    write_file(&out_dir.join("trace.csv"), csv.as_bytes())?;

    let mut conf = Conf::new("heal");
    conf.set("model-dir", path_str(&model_dir));
    conf.set("compressed-dir", path_str(&compressed_dir));
    conf.set("out-dir", path_str(&out_dir));
    conf.set("seed", seed);
    conf.set("calib-size", u(calib_size));
    conf.set("context-len", u(context_len));
    conf.set("heal-steps", u(cfg.steps));
    conf.set("heal-batch", u(cfg.batch_size));
    conf.set("heal-lr", cfg.lr);
    conf.set("heal-warmup", u(cfg.warmup_steps));
    conf.set("heal-alpha", cfg.alpha);
    conf.set("heal-temperature", cfg.temperature);

    let mut report = RunReport::new(conf.done())?;
    report.metric("steps", u(cfg.steps))?;
    report.metric("total-loss-first", trace.steps.first().map(|s| s.total_loss))?;
    report.metric("total-loss-final", trace.steps.last().map(|s| s.total_loss))?;
    report.sub_report("heal-evals", &trace.evals)?;
    report.write(&out_dir)?;

    let n_factorized = factorized_weights(&student).len();
    match (trace.steps.first(), trace.steps.last()) {
        (Some(first), Some(last)) => println!(
            "healed {n_factorized} factorized weights over {} steps; \
             total loss {:.4} -> {:.4} ({:.2} s)",
            cfg.steps,
            first.total_loss,
            last.total_loss,
            start.elapsed().as_secs_f64()
        ),
        _ => println!("healed nothing: zero steps requested"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    /// Reference model directory (the uncompressed original)
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// Candidate model directory (compressed or healed)
    #[arg(long, value_name = "DIR")]
    compressed_dir: Option<PathBuf>,
    /// Directory for the report
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Master seed; the held-out stream is salted from it [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out sequences [default: 64]
    #[arg(long)]
    eval_size: Option<usize>,
    /// Sequence length [default: 128]
    #[arg(long)]
    context_len: Option<usize>,
}

pub fn cmd_eval(a: &EvalArgs, file: &FileConfig) -> CliResult<()> {
    let model_dir = require_path(&a.model_dir, file, "model-dir")?;
    let compressed_dir = require_path(&a.compressed_dir, file, "compressed-dir")?;
    let out_dir = require_path(&a.out_dir, file, "out-dir")?;
    let seed = a.seed.or(file.u64_key("seed")?).unwrap_or(0);
    let eval_size = a.eval_size.or(file.usize_key("eval-size")?).unwrap_or(64);
    let context_len = a.context_len.or(file.usize_key("context-len")?).unwrap_or(128);

    let reference = load_model(&model_dir)?;
    let candidate = load_model(&compressed_dir)?;
    check_context(context_len, reference.config.max_seq)?;
    let corpus = synthetic_corpus(
        eval_size,
        context_len,
        reference.config.vocab,
        stream_seed(seed, CorpusStream::Eval),
    )?;

    let mse = per_token_output_mse(&reference, &candidate, &corpus)?;
    let ppl_reference = perplexity(&reference, &corpus)?;
    let ppl_candidate = perplexity(&candidate, &corpus)?;
    let diffs = activation_diff_report(&reference, &candidate, &corpus)?;

    let mut conf = Conf::new("eval");
    conf.set("model-dir", path_str(&model_dir));
    conf.set("compressed-dir", path_str(&compressed_dir));
    conf.set("out-dir", path_str(&out_dir));
    conf.set("seed", seed);
    conf.set("eval-size", u(eval_size));
    conf.set("context-len", u(context_len));

    let mut report = RunReport::new(conf.done())?;
    report.metric("output-mse", mse)?;
    report.metric("perplexity-reference", ppl_reference)?;
    report.metric("perplexity-candidate", ppl_candidate)?;
    report.sub_report("activation-diffs", &diffs)?;
    report.write(&out_dir)?;

    println!(
        "held-out output MSE {mse:.6}; perplexity {ppl_reference:.3} (reference) \
         vs {ppl_candidate:.3} (candidate)"
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Strategy,
    Targets,
    RMax,
    CalibSize,
    LayerSelection,
}

fn parse_axis(v: &str) -> CliResult<Axis> {
    Ok(match v.trim() {
        "strategy" => Axis::Strategy,
        "targets" => Axis::Targets,
        "r-max" => Axis::RMax,
        "calib-size" => Axis::CalibSize,
        "layer-selection" => Axis::LayerSelection,
        other => {
            return Err(CliError::Config(format!(
                "unknown axis `{other}` (known: strategy, targets, r-max, calib-size, \
                 layer-selection)"
            )))
        }
    })
}

#[derive(Args)]
pub struct AblateArgs {
    /// Sweep axis: strategy, targets, r-max, calib-size, or layer-selection
    #[arg(long)]
    axis: Option<String>,
    /// Directory for the table and report
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Model directory (all axes except strategy)
    #[arg(long, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Trials for the strategy axis [default: 20]
    #[arg(long)]
    seeds: Option<u64>,
    /// Synthetic instance rows for the strategy axis [default: 64]
    #[arg(long)]
    rows: Option<usize>,
    /// Synthetic instance columns for the strategy axis [default: 48]
    #[arg(long)]
    cols: Option<usize>,
    /// Factorization rank for the strategy axis [default: 8]
    #[arg(long)]
    rank: Option<usize>,
    /// Layer indices for the targets, r-max, and calib-size axes
    #[arg(long, value_delimiter = ',', value_name = "IDX,...")]
    layers: Option<Vec<usize>>,
    /// Base targets for the r-max, calib-size, and layer-selection axes
    /// [default: query,key,gate]
    #[arg(long, value_name = "LIST")]
    targets: Option<String>,
    /// Base rank cap [default: 256]
    #[arg(long)]
    r_max: Option<usize>,
    /// Base strategy [default: wanda-deim]
    #[arg(long)]
    strategy: Option<String>,
    /// Rank caps swept on the r-max axis [default: 2,4,8,16]
    #[arg(long, value_delimiter = ',', value_name = "R,...")]
    caps: Option<Vec<usize>>,
    /// Corpus sizes swept on the calib-size axis [default: 8,32,128]
    #[arg(long, value_delimiter = ',', value_name = "N,...")]
    sizes: Option<Vec<usize>>,
    /// Layers picked per method on the layer-selection axis [default: 1]
    #[arg(long)]
    pick: Option<usize>,
    /// Calibration sequences [default: 128]
    #[arg(long)]
    calib_size: Option<usize>,
    /// Held-out sequences for damage measurement [default: 64]
    #[arg(long)]
    eval_size: Option<usize>,
    /// Sequence length [default: 128]
    #[arg(long)]
    context_len: Option<usize>,
}

/// Everything the model-based axes share: the loaded model, inline
/// calibration stats, a held-out corpus, and the base plan the axis varies.
struct AxisContext {
    model: ToyTransformer,
    stats: CalibrationStats,
    eval: Vec<Vec<usize>>,
    base_plan: CompressionPlan,
    calib_size: usize,
    context_len: usize,
    eval_size: usize,
    model_dir: PathBuf,
}

fn axis_context(
    a: &AblateArgs,
    file: &FileConfig,
    seed: u64,
    layers: Vec<usize>,
) -> CliResult<AxisContext> {
    let model_dir = require_path(&a.model_dir, file, "model-dir")?;
    let model = load_model(&model_dir)?;
    let calib_size = a.calib_size.or(file.usize_key("calib-size")?).unwrap_or(128);
    let eval_size = a.eval_size.or(file.usize_key("eval-size")?).unwrap_or(64);
    let context_len = a.context_len.or(file.usize_key("context-len")?).unwrap_or(128);
    check_context(context_len, model.config.max_seq)?;
    let calib = synthetic_corpus(
        calib_size,
        context_len,
        model.config.vocab,
        stream_seed(seed, CorpusStream::Calibration),
    )?;
    let stats = calibrate(&model, &calib)?;
    let eval = synthetic_corpus(
        eval_size,
        context_len,
        model.config.vocab,
        stream_seed(seed, CorpusStream::Eval),
    )?;
    let targets = a
        .targets
        .as_deref()
        .map(config::parse_targets)
        .transpose()?
        .or(file.targets_key("targets")?)
        .unwrap_or_else(|| WeightTarget::ALL.to_vec());
    let strategy = a
        .strategy
        .as_deref()
        .map(config::parse_strategy)
        .transpose()?
        .or(file.strategy_key("strategy")?)
        .unwrap_or(Strategy::WandaDeim);
    let r_max = a.r_max.or(file.usize_key("r-max")?).unwrap_or(256);
    Ok(AxisContext {
        model,
        stats,
        eval,
        base_plan: CompressionPlan {
            layers,
            targets,
            r_max,
            strategy,
            seed: Some(seed),
            rank_override: None,
        },
        calib_size,
        context_len,
        eval_size,
        model_dir,
    })
}

fn shared_axis_conf(conf: &mut Conf, ctx: &AxisContext, seed: u64) {
    conf.set("model-dir", path_str(&ctx.model_dir));
    conf.set("seed", seed);
    conf.set("calib-size", u(ctx.calib_size));
    conf.set("eval-size", u(ctx.eval_size));
    conf.set("context-len", u(ctx.context_len));
    conf.set("targets", target_words(&ctx.base_plan.targets));
    conf.set("strategy", ctx.base_plan.strategy.name());
    conf.set("r-max", u(ctx.base_plan.r_max));
}

fn required_layers(a: &AblateArgs, file: &FileConfig, axis: &str) -> CliResult<Vec<usize>> {
    a.layers
        .clone()
        .or(file.list_key("layers")?)
        .ok_or_else(|| {
            CliError::Config(format!("ablate --axis {axis} needs --layers <indices>"))
        })
}

pub fn cmd_ablate(a: &AblateArgs, file: &FileConfig) -> CliResult<()> {
    let axis_name = a
        .axis
        .clone()
        .or_else(|| file.string_key("axis"))
        .ok_or_else(|| CliError::Config("ablate needs --axis".into()))?;
    let axis = parse_axis(&axis_name)?;
    let out_dir = require_path(&a.out_dir, file, "out-dir")?;
    let seed = a.seed.or(file.u64_key("seed")?).unwrap_or(0);

    let mut conf = Conf::new("ablate");
    conf.set("axis", axis_name.trim());
    conf.set("out-dir", path_str(&out_dir));

    let mut table_csv = String::new();
    let mut printed = String::new();
    let report_kind: &str;
    let report_data: Value;

    match axis {
        Axis::Strategy => {
            let rows = a.rows.or(file.usize_key("rows")?).unwrap_or(64);
            let cols = a.cols.or(file.usize_key("cols")?).unwrap_or(48);
            let rank = a.rank.or(file.usize_key("rank")?).unwrap_or(8);
            let seeds = a.seeds.or(file.u64_key("seeds")?).unwrap_or(20);
            conf.set("rows", u(rows));
            conf.set("cols", u(cols));
            conf.set("rank", u(rank));
            conf.set("seeds", seeds);

            let ablation = ablate_strategies(rows, cols, rank, seeds)?;
            table_csv.push_str(
                "strategy,mean_frobenius_diff,min_frobenius_diff,max_frobenius_diff\n",
            );
            printed.push_str(&format!(
                "{:<12} {:>12} {:>12} {:>12}\n",
                "strategy", "mean", "min", "max"
            ));
            for row in &ablation.table {
                table_csv.push_str(&format!(
                    "{},{},{},{}\n",
                    row.strategy.name(),
                    row.mean_frobenius_diff,
                    row.min_frobenius_diff,
                    row.max_frobenius_diff
                ));
                printed.push_str(&format!(
                    "{:<12} {:>12.4} {:>12.4} {:>12.4}\n",
                    row.strategy.name(),
                    row.mean_frobenius_diff,
                    row.min_frobenius_diff,
                    row.max_frobenius_diff
                ));
            }
            report_kind = "strategy-ablation";
            report_data = serde_json::to_value(&ablation)
                .map_err(|e| CliError::Config(format!("serializing table: {e}")))?;
        }
        Axis::Targets => {
            let layers = required_layers(a, file, "targets")?;
            let ctx = axis_context(a, file, seed, layers.clone())?;
            shared_axis_conf(&mut conf, &ctx, seed);
            conf.set("layers", layers.iter().map(|&l| u(l)).collect::<Vec<u64>>());

            let rows = ablate_targets(&ctx.model, &ctx.stats, &ctx.base_plan, &ctx.eval)?;
            table_csv.push_str("targets,output_mse,saved_params\n");
            printed.push_str(&format!(
                "{:<18} {:>14} {:>14}\n",
                "targets", "output mse", "saved params"
            ));
            for row in &rows {
                let label = row
                    .targets
                    .iter()
                    .map(|&t| target_word(t))
                    .collect::<Vec<_>>()
                    .join("+");
                table_csv.push_str(&format!(
                    "{label},{},{}\n",
                    row.output_mse, row.saved_params
                ));
                printed.push_str(&format!(
                    "{label:<18} {:>14.6} {:>14}\n",
                    row.output_mse, row.saved_params
                ));
            }
            report_kind = "targets-ablation";
            report_data = serde_json::to_value(&rows)
                .map_err(|e| CliError::Config(format!("serializing table: {e}")))?;
        }
        Axis::RMax => {
            let layers = required_layers(a, file, "r-max")?;
            let ctx = axis_context(a, file, seed, layers.clone())?;
            shared_axis_conf(&mut conf, &ctx, seed);
            conf.set("layers", layers.iter().map(|&l| u(l)).collect::<Vec<u64>>());
            let caps = a
                .caps
                .clone()
                .or(file.list_key("caps")?)
                .unwrap_or_else(|| vec![2, 4, 8, 16]);
            conf.set("caps", caps.iter().map(|&c| u(c)).collect::<Vec<u64>>());

            let rows = ablate_rank_cap(&ctx.model, &ctx.stats, &ctx.base_plan, &caps, &ctx.eval)?;
            table_csv.push_str("r_max,ranks,output_mse,saved_params\n");
            printed.push_str(&format!(
                "{:<8} {:<16} {:>14} {:>14}\n",
                "r-max", "ranks", "output mse", "saved params"
            ));
            for row in &rows {
                let ranks = row
                    .ranks
                    .iter()
                    .map(|r| r.to_string())
                    .collect::<Vec<_>>()
                    .join("+");
                table_csv.push_str(&format!(
                    "{},{ranks},{},{}\n",
                    row.r_max, row.output_mse, row.saved_params
                ));
                printed.push_str(&format!(
                    "{:<8} {ranks:<16} {:>14.6} {:>14}\n",
                    row.r_max, row.output_mse, row.saved_params
                ));
            }
            report_kind = "rank-cap-ablation";
            report_data = serde_json::to_value(&rows)
                .map_err(|e| CliError::Config(format!("serializing table: {e}")))?;
        }
        Axis::CalibSize => {
            let layers = required_layers(a, file, "calib-size")?;
            let ctx = axis_context(a, file, seed, layers.clone())?;
            shared_axis_conf(&mut conf, &ctx, seed);
            conf.set("layers", layers.iter().map(|&l| u(l)).collect::<Vec<u64>>());
            let sizes = a
                .sizes
                .clone()
                .or(file.list_key("sizes")?)
                .unwrap_or_else(|| vec![8, 32, 128]);
            conf.set("sizes", sizes.iter().map(|&s| u(s)).collect::<Vec<u64>>());

            let rows = ablate_calib_size(
                &ctx.model,
                &ctx.base_plan,
                &sizes,
                ctx.context_len,
                stream_seed(seed, CorpusStream::Calibration),
                &ctx.eval,
            )?;
            table_csv.push_str("calib_size,output_mse\n");
            printed.push_str(&format!("{:<12} {:>14}\n", "calib size", "output mse"));
            for row in &rows {
                table_csv.push_str(&format!("{},{}\n", row.calib_size, row.output_mse));
                printed.push_str(&format!(
                    "{:<12} {:>14.6}\n",
                    row.calib_size, row.output_mse
                ));
            }
            report_kind = "calib-size-ablation";
            report_data = serde_json::to_value(&rows)
                .map_err(|e| CliError::Config(format!("serializing table: {e}")))?;
        }
        Axis::LayerSelection => {
            let ctx = axis_context(a, file, seed, Vec::new())?;
            shared_axis_conf(&mut conf, &ctx, seed);
            let pick = a.pick.or(file.usize_key("pick")?).unwrap_or(1);
            conf.set("pick", u(pick));

            let rows =
                ablate_layer_selection(&ctx.model, &ctx.stats, &ctx.base_plan, pick, &ctx.eval)?;
            table_csv.push_str("method,layers,output_mse\n");
            printed.push_str(&format!(
                "{:<10} {:<12} {:>14}\n",
                "method", "layers", "output mse"
            ));
            for row in &rows {
                let layers = row
                    .layers
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join("+");
                table_csv.push_str(&format!(
                    "{},{layers},{}\n",
                    row.method.name(),
                    row.output_mse
                ));
                printed.push_str(&format!(
                    "{:<10} {layers:<12} {:>14.6}\n",
                    row.method.name(),
                    row.output_mse
                ));
            }
            report_kind = "layer-selection-ablation";
            report_data = serde_json::to_value(&rows)
                .map_err(|e| CliError::Config(format!("serializing table: {e}")))?;
        }
    }

    let mut report = RunReport::new(conf.done())?;
    report.metric("table-rows", table_csv.lines().count() as u64 - 1)?;
    report.sub_report(report_kind, &report_data)?;
    create_dir(&out_dir)?;
    write_file(&out_dir.join("table.csv"), table_csv.as_bytes())?;
    report.write(&out_dir)?;
    print!("{printed}");
    Ok(())
}

// ---------------------------------------------------------------------------
// size-report
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SizeReportArgs {
    /// Architecture preset: llama3.1-8b, llama2-7b, mistral-7b, or orca2-7b
    #[arg(long)]
    preset: Option<String>,
    /// Residual width of a custom architecture
    #[arg(long)]
    d_model: Option<u64>,
    /// Key/value projection width of a custom architecture
    #[arg(long)]
    d_kv: Option<u64>,
    /// Feed-forward inner width of a custom architecture
    #[arg(long)]
    d_inter: Option<u64>,
    /// Total transformer blocks of a custom architecture
    #[arg(long)]
    n_layers: Option<u64>,
    /// Vocabulary size of a custom architecture
    #[arg(long)]
    vocab: Option<u64>,
    /// How many layers' target weights are compressed
    #[arg(long, value_name = "COUNT")]
    layers: Option<u64>,
    /// Comma-separated subset of query,key,gate [default: query,key,gate]
    #[arg(long, value_name = "LIST")]
    targets: Option<String>,
    /// Rank cap for the break-even rank formula [default: 256]
    #[arg(long)]
    r_max: Option<usize>,
    /// Optional directory for report.json; printing needs no directory
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

pub fn cmd_size_report(a: &SizeReportArgs, file: &FileConfig) -> CliResult<()> {
    let dim_flag_given = a.d_model.is_some()
        || a.d_kv.is_some()
        || a.d_inter.is_some()
        || a.n_layers.is_some()
        || a.vocab.is_some();
    if a.preset.is_some() && dim_flag_given {
        return Err(CliError::ConflictingFlags(
            "--preset already fixes the architecture; drop the explicit dimension flags".into(),
        ));
    }

    let preset = if dim_flag_given {
        None
    } else {
        a.preset.clone().or_else(|| file.string_key("preset"))
    };
    let arch = match &preset {
        Some(name) => config::preset_arch(name)?,
        None => {
            let dim = |flag: Option<u64>, key: &str| -> CliResult<u64> {
                flag.or(file.u64_key(key)?).ok_or_else(|| {
                    CliError::Config(format!(
                        "size-report needs --preset or a full custom architecture; `{key}` is \
                         missing"
                    ))
                })
            };
            ArchSpec {
                d_model: dim(a.d_model, "d-model")?,
                d_kv: dim(a.d_kv, "d-kv")?,
                d_inter: dim(a.d_inter, "d-inter")?,
                n_layers: dim(a.n_layers, "n-layers")?,
                vocab: dim(a.vocab, "vocab")?,
            }
        }
    };

    let count = match a.layers {
        Some(n) => n,
        None => match file.list_key("layers")? {
            Some(list) if list.len() == 1 => list[0] as u64,
            Some(list) => {
                return Err(CliError::Config(format!(
                    "size-report takes a single compressed-layer count, got `layers = {list:?}`"
                )))
            }
            None => {
                return Err(CliError::Config(
                    "size-report needs --layers <count> (how many layers are compressed)".into(),
                ))
            }
        },
    };
    let targets = a
        .targets
        .as_deref()
        .map(config::parse_targets)
        .transpose()?
        .or(file.targets_key("targets")?)
        .unwrap_or_else(|| WeightTarget::ALL.to_vec());
    let r_max = a.r_max.or(file.usize_key("r-max")?).unwrap_or(256);

    let rep = size_report(&arch, count, &targets, r_max)?;
    let label = preset.as_deref().unwrap_or("custom");
    let original_bytes = rep.model_total.original_params * 4;
    println!("architecture       {label}");
    println!("layers compressed  {count} of {}", arch.n_layers);
    println!("targets            {}", target_words(&targets));
    println!("rank cap           {r_max}");
    println!(
        "original           {} params ({})",
        fmt_params(rep.model_total.original_params),
        fmt_gib(original_bytes)
    );
    println!(
        "compressed         {} params",
        fmt_params(rep.model_total.compressed_params)
    );
    println!(
        "saved              {} params",
        fmt_params(rep.model_total.saved_params)
    );
    println!("memory saved       ▼{}", fmt_gib(rep.model_total.saved_bytes));

    if let Some(out_dir) = a.out_dir.clone().or_else(|| file.path_key("out-dir")) {
        let mut conf = Conf::new("size-report");
        match &preset {
            Some(name) => conf.set("preset", name.as_str()),
            None => {
                conf.set("d-model", arch.d_model);
                conf.set("d-kv", arch.d_kv);
                conf.set("d-inter", arch.d_inter);
                conf.set("n-layers", arch.n_layers);
                conf.set("vocab", arch.vocab);
            }
        }
        conf.set("layers", count);
        conf.set("targets", target_words(&targets));
        conf.set("r-max", u(r_max));
        conf.set("out-dir", path_str(&out_dir));

        let mut report = RunReport::new(conf.done())?;
        report.metric("original-params", rep.model_total.original_params)?;
        report.metric("compressed-params", rep.model_total.compressed_params)?;
        report.metric("saved-params", rep.model_total.saved_params)?;
        report.metric("saved-bytes", rep.model_total.saved_bytes)?;
        report.sub_report("size-report", &rep)?;
        report.write(&out_dir)?;
    }
    Ok(())
}
