//! Alternating optimization of the embedding model and the rule weights.
//!
//! Each iteration runs an E-step and an M-step. The E-step annotates every
//! hidden triplet: it samples the triplet's Markov blanket from the
//! embedding distribution, computes the exact conditional under the
//! current rule weights, thresholds it at `tau_triplet`, and then trains
//! the embedding model on the observed triplets plus the annotations. The
//! M-step holds the embeddings fixed and ascends the pseudolikelihood of
//! the rule weights, with hidden targets set to the embedding
//! probabilities.
//!
//! All randomness is derived from the single config seed through
//! per-purpose streams keyed by iteration and triplet, so a run is
//! reproducible and a resumed run continues the exact trajectory of an
//! uninterrupted one.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{enumerate_groundings, HiddenTripletSet};
use crate::kg::{KnowledgeGraph, Triplet};
use crate::kge::checkpoint::{ensure_vocab_match, load_model, save_model};
use crate::kge::{
    run_training_steps, AdamState, EmbeddingModel, StepSummary, TrainConfig, TrainingExample,
};
use crate::mln::{conditional_prob, m_step_update, AnnotationTable, BlanketSample, MStepReport};
use crate::rules::{
    filter_rules, mine_candidate_rules, PatternMask, RuleSet, RuleThresholds, WeightInit,
};
use crate::seeds;

/// Full configuration of an EM run. The embedding seed inside `kge` is
/// the run's single root seed; every other random stream derives from it.
#[derive(Clone, Debug)]
pub struct EmConfig {
    pub kge: TrainConfig,
    /// EM iterations after pretraining. Zero degenerates to a plain
    /// embedding baseline.
    pub n_em_iterations: u32,
    /// Embedding steps on observed triplets before the first E-step, so
    /// the first blanket samples come from an informed distribution.
    pub pretrain_steps: u64,
    /// Conditional-probability threshold for labeling a hidden triplet
    /// positive during annotation.
    pub tau_triplet: f64,
    /// Weight of the rule-conditional term when blending prediction
    /// scores at evaluation time.
    pub lambda: f64,
    /// Learning rate for rule-weight updates.
    pub lr_w: f64,
    /// Blanket samples averaged per center in the M-step.
    pub samples_per_triplet: u32,
    /// Minimum fully-observed grounding count for a mined rule.
    pub min_support: u64,
    /// Which rule shapes to mine.
    pub patterns: PatternMask,
    /// Per-kind precision thresholds for keeping mined rules.
    pub thresholds: RuleThresholds,
    pub weight_init: WeightInit,
    /// Cap on the number of distinct hidden triplets (None = unbounded).
    pub max_hidden: Option<usize>,
    /// Train annotated triplets against their conditional probability
    /// instead of a hard 0/1 label.
    pub soft_targets: bool,
    /// How many times each annotated example enters the sampling pool
    /// relative to an observed one.
    pub hidden_multiplicity: u32,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            kge: TrainConfig {
                kind: crate::kge::ModelKind::TransE,
                norm: crate::kge::DistanceNorm::L1,
                dim: 100,
                gamma: 6.0,
                batch_size: 512,
                n_negatives: 16,
                alpha: 0.5,
                learning_rate: 1e-3,
                adam: crate::kge::AdamConfig::default(),
                steps_per_estep: 1000,
                seed: 0,
            },
            n_em_iterations: 3,
            pretrain_steps: 1000,
            tau_triplet: 0.5,
            lambda: 0.5,
            lr_w: 0.5,
            samples_per_triplet: 1,
            min_support: 1,
            patterns: PatternMask::ALL,
            thresholds: RuleThresholds::uniform(0.5),
            weight_init: WeightInit::LogOdds,
            max_hidden: None,
            soft_targets: false,
            hidden_multiplicity: 1,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmConfig {
    pub fn seed(&self) -> u64 {
        self.kge.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.kge.validate()?;
        let fail = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.tau_triplet) {
            return fail(format!(
                "tau_triplet must be in [0,1], got {}",
                self.tau_triplet
            ));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !self.lr_w.is_finite() || self.lr_w < 0.0 {
            return fail(format!("lr_w must be >= 0, got {}", self.lr_w));
        }
        if self.samples_per_triplet < 1 {
            return fail("samples_per_triplet must be >= 1".to_string());
        }
        if self.hidden_multiplicity < 1 {
            return fail("hidden_multiplicity must be >= 1".to_string());
        }
        Ok(())
    }

    /// Hash of every field that determines the training trajectory. The
    /// iteration budget is deliberately excluded: runs with different
    /// budgets share a trajectory prefix, which is what makes resuming
    /// (and extending) a run well-defined.
    pub fn config_hash(&self) -> u64 {
        let k = &self.kge;
        let repr = format!(
            "kind={};norm={};dim={};gamma={};batch={};negatives={};alpha={};lr={};\
             beta1={};beta2={};eps={};steps_per_estep={};seed={};pretrain={};tau={};\
             lambda={};lr_w={};samples={};min_support={};patterns={:?};thresholds={:?};\
             weight_init={:?};max_hidden={:?};soft={};multiplicity={}",
            k.kind.name(),
            k.norm.name(),
            k.dim,
            k.gamma,
            k.batch_size,
            k.n_negatives,
            k.alpha,
            k.learning_rate,
            k.adam.beta1,
            k.adam.beta2,
            k.adam.epsilon,
            k.steps_per_estep,
            k.seed,
            self.pretrain_steps,
            self.tau_triplet,
            self.lambda,
            self.lr_w,
            self.samples_per_triplet,
            self.min_support,
            self.patterns,
            self.thresholds,
            self.weight_init,
            self.max_hidden,
            self.soft_targets,
            self.hidden_multiplicity,
        );
        fnv1a(repr.as_bytes())
    }
}

/// E-step verdict for one hidden triplet: the thresholded label and the
/// conditional probability it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub label: bool,
    pub p: f64,
}

/// Everything the pipeline carries between iterations.
#[derive(Clone)]
pub struct TrainState {
    pub model: EmbeddingModel,
    pub adam: AdamState,
    pub rules: RuleSet,
    pub hidden: HiddenTripletSet,
    /// Latest E-step annotations; keys are hidden triplets only.
    pub targets: BTreeMap<Triplet, Annotation>,
    /// Completed EM iterations.
    pub em_iteration: u32,
    /// Global embedding training steps taken (pretraining included).
    pub kge_steps: u64,
    pub seed: u64,
    pub diagnostics: Vec<IterationDiagnostics>,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("em_iteration", &self.em_iteration)
            .field("kge_steps", &self.kge_steps)
            .field("n_rules", &self.rules.len())
            .field("n_hidden", &self.hidden.len())
            .field("n_targets", &self.targets.len())
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

/// Per-iteration log record, one JSON line each.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: u32,
    pub n_hidden: usize,
    pub n_labeled_true: usize,
    pub mean_conditional: f64,
    pub mean_hidden_q: f64,
    pub kge_steps: u64,
    pub kge_mean_batch_loss: f64,
    pub negatives_still_observed: u64,
    pub mln_gap_before: f64,
    pub mln_gap_after: f64,
    pub max_abs_rule_weight: f64,
}

/// Outcome of one E-step.
#[derive(Clone, Copy, Debug)]
pub struct EStepReport {
    pub n_hidden: usize,
    pub n_labeled_true: usize,
    pub mean_conditional: f64,
    pub mean_hidden_q: f64,
    pub kge: StepSummary,
}

/// Mines-and-filters rules, enumerates groundings, and initializes the
/// model. No training happens here.
pub fn init_state(kg: &KnowledgeGraph, cfg: &EmConfig) -> Result<TrainState> {
    cfg.validate()?;
    let candidates = mine_candidate_rules(kg, cfg.patterns, cfg.min_support);
    let rules = filter_rules(&candidates, kg, &cfg.thresholds, cfg.weight_init)?;
    if rules.is_empty() {
        log::warn!(
            "no rules mined above support {} and the precision thresholds; \
             training degenerates to the plain embedding model",
            cfg.min_support
        );
    }
    let groundings = enumerate_groundings(kg, &rules);
    let hidden = HiddenTripletSet::build_capped(groundings, kg, cfg.max_hidden, cfg.seed());
    let model = cfg.kge.init_model(kg);
    let adam = AdamState::new(&model, cfg.kge.adam);
    Ok(TrainState {
        model,
        adam,
        rules,
        hidden,
        targets: BTreeMap::new(),
        em_iteration: 0,
        kge_steps: 0,
        seed: cfg.seed(),
        diagnostics: Vec::new(),
    })
}

/// Embedding training on observed triplets only.
pub fn pretrain(state: &mut TrainState, kg: &KnowledgeGraph, cfg: &EmConfig) -> Result<StepSummary> {
    let pool: Vec<TrainingExample> = kg
        .train()
        .iter()
        .copied()
        .map(TrainingExample::observed)
        .collect();
    let range = state.kge_steps..state.kge_steps + cfg.pretrain_steps;
    let summary = run_training_steps(&mut state.model, &mut state.adam, kg, &pool, &cfg.kge, range)?;
    state.kge_steps += cfg.pretrain_steps;
    Ok(summary)
}

/// Labels every hidden triplet under the current model and rule weights.
/// Deterministic given (seed, iteration, model, weights): each triplet
/// draws its blanket sample from its own stream, so re-running without
/// intervening training reproduces identical annotations.
pub fn annotate(state: &TrainState, cfg: &EmConfig) -> Result<BTreeMap<Triplet, Annotation>> {
    let iter = state.em_iteration as u64;
    let annotated: Result<Vec<(Triplet, Annotation)>> = state
        .hidden
        .hidden()
        .par_iter()
        .map(|t| {
            let blanket = state.hidden.markov_blanket(*t);
            let parts = t.seed_parts();
            let mut rng = seeds::rng(seeds::derive(
                state.seed,
                &[seeds::STREAM_ANNOTATION, iter, parts[0], parts[1], parts[2]],
            ));
            let sample = BlanketSample::draw(&blanket, |n| state.model.score_prob(n), &mut rng);
            let p = conditional_prob(t, &blanket, &sample, &state.rules)?;
            Ok((
                *t,
                Annotation {
                    label: p >= cfg.tau_triplet,
                    p,
                },
            ))
        })
        .collect();
    Ok(annotated?.into_iter().collect())
}

fn training_pool(
    kg: &KnowledgeGraph,
    targets: &BTreeMap<Triplet, Annotation>,
    cfg: &EmConfig,
) -> Vec<TrainingExample> {
    let mut pool: Vec<TrainingExample> = kg
        .train()
        .iter()
        .copied()
        .map(TrainingExample::observed)
        .collect();
    for (t, ann) in targets {
        let example = if cfg.soft_targets {
            TrainingExample {
                triplet: *t,
                target: ann.p,
                wants_negatives: false,
            }
        } else if ann.label {
            TrainingExample {
                triplet: *t,
                target: 1.0,
                wants_negatives: true,
            }
        } else {
            TrainingExample {
                triplet: *t,
                target: 0.0,
                wants_negatives: false,
            }
        };
        for _ in 0..cfg.hidden_multiplicity {
            pool.push(example);
        }
    }
    pool
}

/// One E-step: annotate the hidden triplets, then train the embedding
/// model on observed + annotated examples for `steps_per_estep` steps.
pub fn e_step(state: &mut TrainState, kg: &KnowledgeGraph, cfg: &EmConfig) -> Result<EStepReport> {
    state.targets = annotate(state, cfg)?;
    let n_hidden = state.targets.len();
    let n_labeled_true = state.targets.values().filter(|a| a.label).count();
    let mean_conditional = if n_hidden == 0 {
        0.0
    } else {
        state.targets.values().map(|a| a.p).sum::<f64>() / n_hidden as f64
    };
    let mean_hidden_q = if n_hidden == 0 {
        0.0
    } else {
        state
            .targets
            .keys()
            .map(|t| state.model.score_prob(t))
            .sum::<f64>()
            / n_hidden as f64
    };

    let pool = training_pool(kg, &state.targets, cfg);
    let range = state.kge_steps..state.kge_steps + cfg.kge.steps_per_estep;
    let kge = run_training_steps(&mut state.model, &mut state.adam, kg, &pool, &cfg.kge, range)?;
    state.kge_steps += cfg.kge.steps_per_estep;

    Ok(EStepReport {
        n_hidden,
        n_labeled_true,
        mean_conditional,
        mean_hidden_q,
        kge,
    })
}

/// One M-step: pseudolikelihood ascent on the rule weights with hidden
/// targets taken from the current embedding probabilities.
pub fn m_step(state: &mut TrainState, kg: &KnowledgeGraph, cfg: &EmConfig) -> Result<MStepReport> {
    let model = &state.model;
    let q = |t: &Triplet| model.score_prob(t);
    let table = AnnotationTable::build(kg, &state.hidden, q);
    let seed = seeds::derive(
        state.seed,
        &[seeds::STREAM_MSTEP, state.em_iteration as u64],
    );
    m_step_update(
        &mut state.rules,
        &table,
        &state.hidden,
        q,
        cfg.lr_w,
        cfg.samples_per_triplet,
        seed,
    )
}

/// Runs one full iteration (E-step then M-step), appends diagnostics, and
/// advances the iteration counter.
pub fn run_iteration(
    state: &mut TrainState,
    kg: &KnowledgeGraph,
    cfg: &EmConfig,
) -> Result<IterationDiagnostics> {
    let e = e_step(state, kg, cfg)?;
    let m = m_step(state, kg, cfg)?;
    state.em_iteration += 1;
    let diag = IterationDiagnostics {
        iteration: state.em_iteration,
        n_hidden: e.n_hidden,
        n_labeled_true: e.n_labeled_true,
        mean_conditional: e.mean_conditional,
        mean_hidden_q: e.mean_hidden_q,
        kge_steps: state.kge_steps,
        kge_mean_batch_loss: e.kge.mean_batch_loss,
        negatives_still_observed: e.kge.still_observed_negatives,
        mln_gap_before: m.mean_abs_gap_before,
        mln_gap_after: m.mean_abs_gap_after,
        max_abs_rule_weight: state
            .rules
            .iter()
            .map(|r| r.weight.abs())
            .fold(0.0, f64::max),
    };
    state.diagnostics.push(diag);
    log::info!(
        "iteration {}: {} / {} hidden labeled positive, kge loss {:.4}, \
         pseudolikelihood gap {:.4} -> {:.4}",
        diag.iteration,
        diag.n_labeled_true,
        diag.n_hidden,
        diag.kge_mean_batch_loss,
        diag.mln_gap_before,
        diag.mln_gap_after
    );
    Ok(diag)
}

/// Checkpoint manifest; hashes are kept as hex strings for readability.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub em_iteration: u32,
    pub kge_steps: u64,
    pub seed: u64,
    pub n_rules: usize,
    pub vocab_hash: String,
    pub config_hash: String,
}

impl Manifest {
    fn of(state: &TrainState, kg: &KnowledgeGraph, cfg: &EmConfig) -> Self {
        Manifest {
            format_version: 1,
            em_iteration: state.em_iteration,
            kge_steps: state.kge_steps,
            seed: state.seed,
            n_rules: state.rules.len(),
            vocab_hash: format!("{:016x}", kg.vocab_hash()),
            config_hash: format!("{:016x}", cfg.config_hash()),
        }
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("malformed manifest: {e}"),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("cannot serialize manifest: {e}"),
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    fn parse_hash(s: &str) -> Option<u64> {
        u64::from_str_radix(s, 16).ok()
    }
}

/// Writes model.bin, rules.tsv, and manifest.json into `dir`.
pub fn write_checkpoint(
    state: &TrainState,
    kg: &KnowledgeGraph,
    cfg: &EmConfig,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_model(
        &dir.join("model.bin"),
        &state.model,
        &state.adam,
        kg.vocab_hash(),
    )?;
    let rules_path = dir.join("rules.tsv");
    let file = File::create(&rules_path).map_err(|e| Error::io(&rules_path, e))?;
    state
        .rules
        .write_tsv(kg, BufWriter::new(file))
        .map_err(|e| Error::io(&rules_path, e))?;
    Manifest::of(state, kg, cfg).write(&dir.join("manifest.json"))?;
    Ok(())
}

fn append_diagnostics(dir: &Path, diag: &IterationDiagnostics) -> Result<()> {
    let path = dir.join("diagnostics.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, diag).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        reason: format!("cannot serialize diagnostics: {e}"),
    })?;
    w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn em_loop(
    state: &mut TrainState,
    kg: &KnowledgeGraph,
    cfg: &EmConfig,
    out_dir: Option<&Path>,
) -> Result<()> {
    while state.em_iteration < cfg.n_em_iterations {
        let diag = run_iteration(state, kg, cfg)?;
        if let Some(dir) = out_dir {
            append_diagnostics(dir, &diag)?;
            write_checkpoint(state, kg, cfg, &dir.join(format!("iter_{:02}", diag.iteration)))?;
            write_checkpoint(state, kg, cfg, dir)?;
        }
    }
    Ok(())
}

fn write_hidden_tsv(state: &TrainState, kg: &KnowledgeGraph, dir: &Path) -> Result<()> {
    let path = dir.join("hidden.tsv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    state
        .hidden
        .write_tsv(kg, BufWriter::new(file))
        .map_err(|e| Error::io(&path, e))
}

/// The full pipeline: mine rules, pretrain, then alternate E/M steps for
/// the configured number of iterations. When `out_dir` is given, a
/// checkpoint is written after pretraining and after every iteration
/// (latest at the top level, snapshots under iter_NN/), along with the
/// hidden-triplet dump and a JSON-lines diagnostics log.
pub fn run_em(kg: &KnowledgeGraph, cfg: &EmConfig, out_dir: Option<&Path>) -> Result<TrainState> {
    let mut state = init_state(kg, cfg)?;
    pretrain(&mut state, kg, cfg)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_checkpoint(&state, kg, cfg, dir)?;
        write_hidden_tsv(&state, kg, dir)?;
        // Fresh run: truncate any stale log so the file maps 1:1 to this
        // trajectory.
        let log_path = dir.join("diagnostics.jsonl");
        File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    em_loop(&mut state, kg, cfg, out_dir)?;
    Ok(state)
}

/// Continues an interrupted (or extendable) run from the latest checkpoint
/// in `run_dir`. The dataset and config must match the ones that produced
/// the checkpoint; the iteration budget may differ, since the seed-stream
/// scheme makes trajectories agree on their common prefix.
pub fn resume_em(kg: &KnowledgeGraph, cfg: &EmConfig, run_dir: &Path) -> Result<TrainState> {
    cfg.validate()?;
    let manifest = Manifest::read(&run_dir.join("manifest.json"))?;
    let stored_vocab =
        Manifest::parse_hash(&manifest.vocab_hash).ok_or_else(|| Error::Checkpoint {
            path: run_dir.join("manifest.json"),
            reason: format!("bad vocab hash {:?}", manifest.vocab_hash),
        })?;
    ensure_vocab_match(stored_vocab, kg)?;
    let stored_config =
        Manifest::parse_hash(&manifest.config_hash).ok_or_else(|| Error::Checkpoint {
            path: run_dir.join("manifest.json"),
            reason: format!("bad config hash {:?}", manifest.config_hash),
        })?;
    if stored_config != cfg.config_hash() {
        return Err(Error::Config(format!(
            "config hash {:016x} does not match checkpointed run {:016x}; \
             resuming under a different config would corrupt the trajectory",
            cfg.config_hash(),
            stored_config
        )));
    }

    let (model, adam, model_vocab) = load_model(&run_dir.join("model.bin"))?;
    ensure_vocab_match(model_vocab, kg)?;
    let rules_path = run_dir.join("rules.tsv");
    let file = File::open(&rules_path).map_err(|e| Error::io(&rules_path, e))?;
    let rules = RuleSet::read_tsv(kg, BufReader::new(file))?;
    let groundings = enumerate_groundings(kg, &rules);
    let hidden = HiddenTripletSet::build_capped(groundings, kg, cfg.max_hidden, cfg.seed());

    let mut state = TrainState {
        model,
        adam,
        rules,
        hidden,
        targets: BTreeMap::new(),
        em_iteration: manifest.em_iteration,
        kge_steps: manifest.kge_steps,
        seed: manifest.seed,
        diagnostics: Vec::new(),
    };
    em_loop(&mut state, kg, cfg, Some(run_dir))?;
    Ok(state)
}

/// Reads back a diagnostics log written by [`run_em`].
pub fn read_diagnostics(path: &Path) -> Result<Vec<IterationDiagnostics>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("bad diagnostics line {}: {e}", idx + 1),
            })?,
        );
    }
    Ok(out)
}
