//! Command-line front end: `mine`, `train`, `eval`, and `predict` over a
//! dataset directory of train/valid/test triplet files.
//!
//! Configuration is layered: built-in defaults, then a flat `key = value`
//! file (`--config`), then repeatable `--set key=value` overrides. The
//! effective configuration is echoed into the output directory so a run
//! can be reproduced from its artifacts alone.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration error,
//! 3 numeric failure during training.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use rulembed::em::{self, Manifest};
use rulembed::eval;
use rulembed::grounding::enumerate_groundings;
use rulembed::kg::{Split, Triplet};
use rulembed::kge::{self, DistanceNorm, ModelKind};
use rulembed::rules::{
    filter_rules, mine_candidate_rules, PatternKind, PatternMask, RuleSet, WeightInit,
};
use rulembed::seeds;
use rulembed::{EmConfig, HiddenTripletSet, KnowledgeGraph, TrainState};

#[derive(Parser)]
#[command(
    name = "rulembed",
    version,
    about = "Joint rule and embedding reasoning over knowledge graphs"
)]
struct Cli {
    /// Flat key=value configuration file, applied before --set overrides.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. --set dim=64 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker threads; 1 runs the numerics strictly sequentially.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine rule candidates, filter by precision, write rules.tsv + summary.
    Mine(MineArgs),
    /// Pretrain embeddings and run EM; writes checkpoints and diagnostics.
    Train(TrainArgs),
    /// Compute filtered ranking metrics for a finished run.
    Eval(EvalArgs),
    /// Score triplets listed in a file with the blended predictor.
    Predict(PredictArgs),
}

#[derive(Args)]
struct MineArgs {
    /// Dataset directory containing train.txt / valid.txt / test.txt.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory (or set RULEMBED_OUTPUT_DIR).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Run directory for checkpoints (or set RULEMBED_OUTPUT_DIR).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Continue a finished or interrupted run from its checkpoint.
    #[arg(long)]
    resume: bool,
    /// Shorthand for --set seed=N.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Run directory holding model.bin / rules.tsv / manifest.json.
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    /// Blend weight of the rule-conditional term; 0 scores embeddings only.
    #[arg(long, value_name = "X")]
    lambda: Option<f64>,
    /// Which split to rank: test or valid.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    /// Tab-separated file of `head relation tail` names, one per line.
    #[arg(long, value_name = "FILE")]
    triplets: PathBuf,
    #[arg(long, value_name = "X")]
    lambda: Option<f64>,
    /// Write the score table here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// Command-line level mistakes that are not the data's fault.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = if err.downcast_ref::<UsageError>().is_some() {
                1
            } else if err
                .downcast_ref::<rulembed::Error>()
                .is_some_and(rulembed::Error::is_numeric)
            {
                3
            } else {
                2
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = build_config(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Mine(args) => cmd_mine(args, cfg),
        Command::Train(args) => cmd_train(args, cfg),
        Command::Eval(args) => cmd_eval(args, cfg),
        Command::Predict(args) => cmd_predict(args, cfg),
    }
}

// ---------------------------------------------------------------------------
// Configuration: defaults <- file <- --set flags.
// ---------------------------------------------------------------------------

fn build_config(file: Option<&Path>, sets: &[String]) -> anyhow::Result<EmConfig> {
    let mut cfg = EmConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                anyhow!(
                    "{}:{}: expected `key = value`, found {line:?}",
                    path.display(),
                    i + 1
                )
            })?;
            apply_key(&mut cfg, key.trim(), value.trim())
                .map_err(|msg| anyhow!("{}:{}: {msg}", path.display(), i + 1))?;
        }
    }
    for item in sets {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got {item:?}")))?;
        apply_key(&mut cfg, key.trim(), value.trim())
            .map_err(|msg| UsageError(format!("--set {item:?}: {msg}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(cfg: &mut EmConfig, key: &str, value: &str) -> Result<(), String> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        value
            .parse()
            .map_err(|e| format!("bad value {value:?} for {key}: {e}"))
    }

    match key {
        "kind" => {
            cfg.kge.kind = match value.to_ascii_lowercase().as_str() {
                "transe" => ModelKind::TransE,
                "distmult" => ModelKind::DistMult,
                "complex" => ModelKind::ComplEx,
                _ => return Err(format!("unknown model kind {value:?}")),
            }
        }
        "norm" => {
            cfg.kge.norm = match value.to_ascii_lowercase().as_str() {
                "l1" => DistanceNorm::L1,
                "l2" => DistanceNorm::L2,
                _ => return Err(format!("unknown norm {value:?} (expected l1 or l2)")),
            }
        }
        "dim" => cfg.kge.dim = parse(key, value)?,
        "gamma" => cfg.kge.gamma = parse(key, value)?,
        "batch_size" => cfg.kge.batch_size = parse(key, value)?,
        "n_negatives" => cfg.kge.n_negatives = parse(key, value)?,
        "alpha" => cfg.kge.alpha = parse(key, value)?,
        "learning_rate" => cfg.kge.learning_rate = parse(key, value)?,
        "steps_per_estep" => cfg.kge.steps_per_estep = parse(key, value)?,
        "seed" => cfg.kge.seed = parse(key, value)?,
        "adam_beta1" => cfg.kge.adam.beta1 = parse(key, value)?,
        "adam_beta2" => cfg.kge.adam.beta2 = parse(key, value)?,
        "adam_epsilon" => cfg.kge.adam.epsilon = parse(key, value)?,
        "n_em_iterations" => cfg.n_em_iterations = parse(key, value)?,
        "pretrain_steps" => cfg.pretrain_steps = parse(key, value)?,
        "tau_triplet" => cfg.tau_triplet = parse(key, value)?,
        "lambda" => cfg.lambda = parse(key, value)?,
        "lr_w" => cfg.lr_w = parse(key, value)?,
        "samples_per_triplet" => cfg.samples_per_triplet = parse(key, value)?,
        "min_support" => cfg.min_support = parse(key, value)?,
        "patterns" => {
            if value.eq_ignore_ascii_case("all") {
                cfg.patterns = PatternMask::ALL;
            } else {
                let mut kinds = Vec::new();
                for name in value.split(',') {
                    let kind = PatternKind::parse_tag(&name.trim().to_ascii_uppercase())
                        .ok_or_else(|| format!("unknown pattern {name:?}"))?;
                    kinds.push(kind);
                }
                cfg.patterns = PatternMask::of(&kinds);
            }
        }
        "threshold" => cfg.thresholds.base = parse(key, value)?,
        "threshold_composition" => cfg.thresholds.composition = Some(parse(key, value)?),
        "threshold_inverse" => cfg.thresholds.inverse = Some(parse(key, value)?),
        "threshold_symmetric" => cfg.thresholds.symmetric = Some(parse(key, value)?),
        "threshold_subrelation" => cfg.thresholds.subrelation = Some(parse(key, value)?),
        "weight_init" => {
            cfg.weight_init = match value.to_ascii_lowercase().as_str() {
                "log_odds" => WeightInit::LogOdds,
                "zero" => WeightInit::Zero,
                _ => return Err(format!("unknown weight_init {value:?}")),
            }
        }
        "max_hidden" => {
            cfg.max_hidden = if value.eq_ignore_ascii_case("none") {
                None
            } else {
                Some(parse(key, value)?)
            }
        }
        "soft_targets" => cfg.soft_targets = parse(key, value)?,
        "hidden_multiplicity" => cfg.hidden_multiplicity = parse(key, value)?,
        _ => return Err(format!("unknown configuration key {key:?}")),
    }
    Ok(())
}

/// Canonical flat rendering; feeding it back through `apply_key`
/// reproduces the same configuration.
fn render_config(cfg: &EmConfig) -> String {
    let mut out = String::new();
    let kind = match cfg.kge.kind {
        ModelKind::TransE => "transe",
        ModelKind::DistMult => "distmult",
        ModelKind::ComplEx => "complex",
    };
    let norm = match cfg.kge.norm {
        DistanceNorm::L1 => "l1",
        DistanceNorm::L2 => "l2",
    };
    let patterns = if cfg.patterns == PatternMask::ALL {
        "all".to_string()
    } else {
        PatternKind::ALL
            .iter()
            .filter(|k| cfg.patterns.contains(**k))
            .map(|k| k.tag().to_ascii_lowercase())
            .collect::<Vec<_>>()
            .join(",")
    };
    let _ = writeln!(out, "kind = {kind}");
    let _ = writeln!(out, "norm = {norm}");
    let _ = writeln!(out, "dim = {}", cfg.kge.dim);
    let _ = writeln!(out, "gamma = {}", cfg.kge.gamma);
    let _ = writeln!(out, "batch_size = {}", cfg.kge.batch_size);
    let _ = writeln!(out, "n_negatives = {}", cfg.kge.n_negatives);
    let _ = writeln!(out, "alpha = {}", cfg.kge.alpha);
    let _ = writeln!(out, "learning_rate = {}", cfg.kge.learning_rate);
    let _ = writeln!(out, "steps_per_estep = {}", cfg.kge.steps_per_estep);
    let _ = writeln!(out, "seed = {}", cfg.kge.seed);
    let _ = writeln!(out, "adam_beta1 = {}", cfg.kge.adam.beta1);
    let _ = writeln!(out, "adam_beta2 = {}", cfg.kge.adam.beta2);
    let _ = writeln!(out, "adam_epsilon = {}", cfg.kge.adam.epsilon);
    let _ = writeln!(out, "n_em_iterations = {}", cfg.n_em_iterations);
    let _ = writeln!(out, "pretrain_steps = {}", cfg.pretrain_steps);
    let _ = writeln!(out, "tau_triplet = {}", cfg.tau_triplet);
    let _ = writeln!(out, "lambda = {}", cfg.lambda);
    let _ = writeln!(out, "lr_w = {}", cfg.lr_w);
    let _ = writeln!(out, "samples_per_triplet = {}", cfg.samples_per_triplet);
    let _ = writeln!(out, "min_support = {}", cfg.min_support);
    let _ = writeln!(out, "patterns = {patterns}");
    let _ = writeln!(out, "threshold = {}", cfg.thresholds.base);
    for (name, value) in [
        ("threshold_composition", cfg.thresholds.composition),
        ("threshold_inverse", cfg.thresholds.inverse),
        ("threshold_symmetric", cfg.thresholds.symmetric),
        ("threshold_subrelation", cfg.thresholds.subrelation),
    ] {
        if let Some(v) = value {
            let _ = writeln!(out, "{name} = {v}");
        }
    }
    let weight_init = match cfg.weight_init {
        WeightInit::LogOdds => "log_odds",
        WeightInit::Zero => "zero",
    };
    let _ = writeln!(out, "weight_init = {weight_init}");
    match cfg.max_hidden {
        Some(n) => {
            let _ = writeln!(out, "max_hidden = {n}");
        }
        None => {
            let _ = writeln!(out, "max_hidden = none");
        }
    }
    let _ = writeln!(out, "soft_targets = {}", cfg.soft_targets);
    let _ = writeln!(out, "hidden_multiplicity = {}", cfg.hidden_multiplicity);
    out
}

fn resolve_out(flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    if let Some(dir) = flag {
        return Ok(dir);
    }
    if let Some(dir) = std::env::var_os("RULEMBED_OUTPUT_DIR") {
        return Ok(PathBuf::from(dir));
    }
    Err(UsageError("no output directory: pass --out or set RULEMBED_OUTPUT_DIR".into()).into())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// mine
// ---------------------------------------------------------------------------

fn cmd_mine(args: MineArgs, cfg: EmConfig) -> anyhow::Result<()> {
    let out = resolve_out(args.out)?;
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let kg = KnowledgeGraph::load(&args.data)?;
    if kg.train().is_empty() {
        log::warn!("train split of {} is empty; writing an empty rule file", args.data.display());
    }

    let candidates = mine_candidate_rules(&kg, cfg.patterns, cfg.min_support);
    let rules = filter_rules(&candidates, &kg, &cfg.thresholds, cfg.weight_init)?;

    let rules_path = out.join("rules.tsv");
    let file = File::create(&rules_path)
        .with_context(|| format!("cannot create {}", rules_path.display()))?;
    rules
        .write_tsv(&kg, BufWriter::new(file))
        .with_context(|| format!("cannot write {}", rules_path.display()))?;

    write_text(&out.join("mine_summary.txt"), &mine_summary(&candidates, &rules))?;
    write_text(&out.join("config.txt"), &render_config(&cfg))?;
    println!(
        "mined {} candidates, kept {} rules -> {}",
        candidates.len(),
        rules.len(),
        rules_path.display()
    );
    Ok(())
}

fn mine_summary(
    candidates: &[(rulembed::rules::RulePattern, u64)],
    rules: &RuleSet,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "candidates\t{}", candidates.len());
    let _ = writeln!(out, "kept\t{}", rules.len());
    for kind in PatternKind::ALL {
        let mined = candidates.iter().filter(|(p, _)| p.kind() == kind).count();
        let kept = rules.iter().filter(|r| r.pattern.kind() == kind).count();
        let _ = writeln!(out, "{}\tcandidates {mined}\tkept {kept}", kind.tag());
    }
    // Precision histogram of the kept rules, 10 equal bins over [0, 1].
    let mut bins = [0usize; 10];
    for rule in rules.iter() {
        let bin = ((rule.precision * 10.0) as usize).min(9);
        bins[bin] += 1;
    }
    let _ = writeln!(out, "precision_histogram");
    for (i, count) in bins.iter().enumerate() {
        let _ = writeln!(out, "[{:.1},{:.1})\t{count}", i as f64 / 10.0, (i + 1) as f64 / 10.0);
    }
    out
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs, mut cfg: EmConfig) -> anyhow::Result<()> {
    if let Some(seed) = args.seed {
        cfg.kge.seed = seed;
    }
    let out = resolve_out(args.out)?;
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let kg = KnowledgeGraph::load(&args.data)?;

    write_text(&out.join("config.txt"), &render_config(&cfg))?;
    let state = if args.resume {
        em::resume_em(&kg, &cfg, &out)?
    } else {
        em::run_em(&kg, &cfg, Some(&out))?
    };

    println!(
        "trained {} EM iterations ({} embedding steps) with {} rules, {} hidden triplets -> {}",
        state.em_iteration,
        state.kge_steps,
        state.rules.len(),
        state.hidden.len(),
        out.display()
    );
    if let Some(last) = state.diagnostics.last() {
        println!(
            "last iteration: {} of {} hidden annotated positive, mean batch loss {:.4}",
            last.n_labeled_true, last.n_hidden, last.kge_mean_batch_loss
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / predict
// ---------------------------------------------------------------------------

/// Rebuilds inference state from a run directory, refusing checkpoints
/// written for a different dataset.
fn load_run(run: &Path, kg: &KnowledgeGraph, cfg: &EmConfig) -> anyhow::Result<TrainState> {
    let manifest = Manifest::read(&run.join("manifest.json"))?;
    let (model, adam, stored_vocab) = kge::load_model(&run.join("model.bin"))?;
    kge::checkpoint::ensure_vocab_match(stored_vocab, kg)?;

    let rules_path = run.join("rules.tsv");
    let file =
        File::open(&rules_path).with_context(|| format!("cannot open {}", rules_path.display()))?;
    let rules = RuleSet::read_tsv(kg, BufReader::new(file))?;
    let hidden = HiddenTripletSet::build_capped(
        enumerate_groundings(kg, &rules),
        kg,
        cfg.max_hidden,
        manifest.seed,
    );
    Ok(TrainState {
        model,
        adam,
        rules,
        hidden,
        targets: Default::default(),
        em_iteration: manifest.em_iteration,
        kge_steps: manifest.kge_steps,
        seed: manifest.seed,
        diagnostics: Vec::new(),
    })
}

fn parse_split(name: &str) -> anyhow::Result<Split> {
    match name {
        "test" => Ok(Split::Test),
        "valid" => Ok(Split::Valid),
        _ => Err(UsageError(format!("unknown split {name:?} (expected test or valid)")).into()),
    }
}

fn cmd_eval(args: EvalArgs, cfg: EmConfig) -> anyhow::Result<()> {
    let split = parse_split(&args.split)?;
    let lambda = args.lambda.unwrap_or(cfg.lambda);
    let kg = KnowledgeGraph::load(&args.data)?;
    let state = load_run(&args.run, &kg, &cfg)?;

    let metrics = eval::evaluate(&state, split, &kg, lambda)?;
    let json = metrics.to_json();
    println!("{json}");
    let file = args
        .run
        .join(format!("metrics_{}_lambda{lambda}.json", args.split));
    write_text(&file, &format!("{json}\n"))?;
    Ok(())
}

fn cmd_predict(args: PredictArgs, cfg: EmConfig) -> anyhow::Result<()> {
    let lambda = args.lambda.unwrap_or(cfg.lambda);
    let kg = KnowledgeGraph::load(&args.data)?;
    let state = load_run(&args.run, &kg, &cfg)?;

    let file = File::open(&args.triplets)
        .with_context(|| format!("cannot open {}", args.triplets.display()))?;
    let mut triplets = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("cannot read {}", args.triplets.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(anyhow!(
                "{}:{}: expected 3 tab-separated names, found {}",
                args.triplets.display(),
                i + 1,
                fields.len()
            ));
        }
        let trip = Triplet::new(
            kg.entity_id(fields[0])?,
            kg.relation_id(fields[1])?,
            kg.entity_id(fields[2])?,
        );
        triplets.push(trip);
    }

    let mut table = String::from("head\trelation\ttail\tq\tp_term\tscore\n");
    for trip in &triplets {
        let q = state.model.score_prob(trip);
        // One blanket draw per triplet on its own stream, mirroring the
        // evaluator; the blend for the requested lambda is reconstructed
        // from the same draw. lambda = 0 leaves score == q exactly.
        let parts = trip.seed_parts();
        let mut rng = seeds::rng(seeds::derive(
            state.seed,
            &[seeds::STREAM_EVAL, parts[0], parts[1], parts[2]],
        ));
        let p_term = eval::predict_score(&state, trip, 1.0, &mut rng) - q;
        let score = q + lambda * p_term;
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{q}\t{p_term}\t{score}",
            kg.entity_name(trip.head),
            kg.relation_name(trip.relation),
            kg.entity_name(trip.tail),
        );
    }
    match args.out {
        Some(path) => write_text(&path, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}
