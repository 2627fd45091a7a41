//! Embedding models parameterizing the per-triplet Bernoulli beliefs, with
//! self-adversarial negative sampling and analytic sparse gradients.
//!
//! Three scoring kinds are supported. With x_h, x_r, x_t the embedding rows
//! and σ the logistic function, the pre-sigmoid score f is:
//!
//! * TransE: γ − ‖x_h + x_r − x_t‖ (L1 by default, L2 by config)
//! * DistMult: ⟨x_h, x_r, x_t⟩ (trilinear dot)
//! * ComplEx: Re⟨x_h, x_r, conj(x_t)⟩ over d complex pairs stored as
//!   interleaved (re, im), so rows are 2d wide
//!
//! The belief that a triplet holds is σ(f). Training minimizes
//!
//! ```text
//! L = Σ_{y=1} softplus(−f) + Σ_{y=0} softplus(f)
//!   + Σ_{y=1} Σ_i p_i softplus(f_i)
//! ```
//!
//! where the f_i are scores of sampled corruptions of each positive and
//! p_i = softmax(α f_i) within the positive's negative set, treated as a
//! constant (no gradient flows through p_i). α = 0 recovers uniform 1/n
//! weighting. Rule-annotated label-0 triplets take the y=0 branch with
//! weight 1; they are targeted supervision, not sampled noise.

mod adam;
pub mod checkpoint;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{export_text, load_model, save_model};

use std::collections::HashMap;
use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, SplitMask, Triplet};
use crate::seeds;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(1 + e^x); softplus(−f) = −log σ(f).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum ModelKind {
    TransE,
    DistMult,
    ComplEx,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<ModelKind> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Some(ModelKind::TransE),
            "distmult" => Some(ModelKind::DistMult),
            "complex" => Some(ModelKind::ComplEx),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TransE => "transe",
            ModelKind::DistMult => "distmult",
            ModelKind::ComplEx => "complex",
        }
    }
}

/// Distance norm for TransE scoring.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum DistanceNorm {
    L1,
    L2,
}

impl DistanceNorm {
    pub fn parse(s: &str) -> Option<DistanceNorm> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Some(DistanceNorm::L1),
            "l2" => Some(DistanceNorm::L2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistanceNorm::L1 => "l1",
            DistanceNorm::L2 => "l2",
        }
    }
}

/// Entity and relation embedding tables with a fixed scoring kind.
#[derive(Clone)]
pub struct EmbeddingModel {
    kind: ModelKind,
    norm: DistanceNorm,
    dim: usize,
    width: usize,
    gamma: f64,
    n_entities: usize,
    n_relations: usize,
    entity: Vec<f64>,
    relation: Vec<f64>,
}

impl EmbeddingModel {
    /// Initializes all rows uniformly in [−b, b] with b = γ/d for TransE
    /// (entities must fit inside the margin ball for σ(γ − d) to start
    /// informative) and b = 1/√d otherwise. Seeded and deterministic.
    pub fn init(
        kind: ModelKind,
        norm: DistanceNorm,
        dim: usize,
        gamma: f64,
        n_entities: usize,
        n_relations: usize,
        seed: u64,
    ) -> Self {
        assert!(dim >= 1, "dim must be at least 1");
        let width = match kind {
            ModelKind::ComplEx => 2 * dim,
            _ => dim,
        };
        let b = match kind {
            ModelKind::TransE => gamma / dim as f64,
            _ => 1.0 / (dim as f64).sqrt(),
        };
        let mut rng = seeds::rng(seed);
        let mut fill = |n: usize| -> Vec<f64> {
            (0..n * width)
                .map(|_| rng.random::<f64>() * 2.0 * b - b)
                .collect()
        };
        let entity = fill(n_entities);
        let relation = fill(n_relations);
        EmbeddingModel {
            kind,
            norm,
            dim,
            width,
            gamma,
            n_entities,
            n_relations,
            entity,
            relation,
        }
    }

    /// Builds a model from externally supplied parameter matrices
    /// (row-major, `n × width`).
    #[allow(clippy::too_many_arguments)]
    pub fn from_raw(
        kind: ModelKind,
        norm: DistanceNorm,
        dim: usize,
        gamma: f64,
        n_entities: usize,
        n_relations: usize,
        entity: Vec<f64>,
        relation: Vec<f64>,
    ) -> Self {
        let width = match kind {
            ModelKind::ComplEx => 2 * dim,
            _ => dim,
        };
        assert_eq!(entity.len(), n_entities * width);
        assert_eq!(relation.len(), n_relations * width);
        EmbeddingModel {
            kind,
            norm,
            dim,
            width,
            gamma,
            n_entities,
            n_relations,
            entity,
            relation,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn norm(&self) -> DistanceNorm {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row width in f64 values: dim, or 2·dim for ComplEx.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn entity_data(&self) -> &[f64] {
        &self.entity
    }

    pub fn relation_data(&self) -> &[f64] {
        &self.relation
    }

    pub fn entity_row(&self, id: EntityId) -> &[f64] {
        let base = id.0 as usize * self.width;
        &self.entity[base..base + self.width]
    }

    pub fn relation_row(&self, id: crate::kg::RelationId) -> &[f64] {
        let base = id.0 as usize * self.width;
        &self.relation[base..base + self.width]
    }

    pub fn entity_row_mut(&mut self, id: EntityId) -> &mut [f64] {
        let base = id.0 as usize * self.width;
        &mut self.entity[base..base + self.width]
    }

    pub fn relation_row_mut(&mut self, id: crate::kg::RelationId) -> &mut [f64] {
        let base = id.0 as usize * self.width;
        &mut self.relation[base..base + self.width]
    }

    pub(crate) fn entity_data_mut(&mut self) -> &mut [f64] {
        &mut self.entity
    }

    pub(crate) fn relation_data_mut(&mut self) -> &mut [f64] {
        &mut self.relation
    }

    /// Pre-sigmoid score f.
    pub fn score_raw(&self, t: &Triplet) -> f64 {
        let h = self.entity_row(t.head);
        let r = self.relation_row(t.relation);
        let tl = self.entity_row(t.tail);
        match self.kind {
            ModelKind::TransE => {
                let dist = match self.norm {
                    DistanceNorm::L1 => (0..self.width)
                        .map(|k| (h[k] + r[k] - tl[k]).abs())
                        .sum::<f64>(),
                    DistanceNorm::L2 => (0..self.width)
                        .map(|k| (h[k] + r[k] - tl[k]).powi(2))
                        .sum::<f64>()
                        .sqrt(),
                };
                self.gamma - dist
            }
            ModelKind::DistMult => (0..self.width).map(|k| h[k] * r[k] * tl[k]).sum(),
            ModelKind::ComplEx => {
                let mut s = 0.0;
                for p in 0..self.dim {
                    let (a, b) = (h[2 * p], h[2 * p + 1]);
                    let (c, d) = (r[2 * p], r[2 * p + 1]);
                    let (e, f) = (tl[2 * p], tl[2 * p + 1]);
                    s += (a * c - b * d) * e + (a * d + b * c) * f;
                }
                s
            }
        }
    }

    /// Belief q(v=1) = σ(f); strictly inside (0,1) for finite embeddings.
    pub fn score_prob(&self, t: &Triplet) -> f64 {
        sigmoid(self.score_raw(t))
    }

    /// Adds ∂f/∂row · df to the sparse gradient for every row the triplet
    /// touches. Self-loops (head == tail) accumulate both contributions
    /// into the same row.
    pub fn accumulate_score_grads(&self, t: &Triplet, df: f64, grads: &mut SparseGrads) {
        let h = self.entity_row(t.head);
        let r = self.relation_row(t.relation);
        let tl = self.entity_row(t.tail);
        let width = self.width;
        let gh = grads.entity_row(t.head.0, width);
        match self.kind {
            ModelKind::TransE => {
                // f = γ − D; collect the per-coordinate D-derivative first.
                let dd: Vec<f64> = match self.norm {
                    DistanceNorm::L1 => (0..width)
                        .map(|k| {
                            let d = h[k] + r[k] - tl[k];
                            if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                    DistanceNorm::L2 => {
                        let dist = (0..width)
                            .map(|k| (h[k] + r[k] - tl[k]).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        if dist <= 1e-300 {
                            vec![0.0; width]
                        } else {
                            (0..width).map(|k| (h[k] + r[k] - tl[k]) / dist).collect()
                        }
                    }
                };
                for k in 0..width {
                    gh[k] -= df * dd[k];
                }
                let gr = grads.relation_row(t.relation.0, width);
                for k in 0..width {
                    gr[k] -= df * dd[k];
                }
                let gt = grads.entity_row(t.tail.0, width);
                for k in 0..width {
                    gt[k] += df * dd[k];
                }
            }
            ModelKind::DistMult => {
                for k in 0..width {
                    gh[k] += df * r[k] * tl[k];
                }
                let gr = grads.relation_row(t.relation.0, width);
                for k in 0..width {
                    gr[k] += df * h[k] * tl[k];
                }
                let gt = grads.entity_row(t.tail.0, width);
                for k in 0..width {
                    gt[k] += df * h[k] * r[k];
                }
            }
            ModelKind::ComplEx => {
                for p in 0..self.dim {
                    let (c, d) = (r[2 * p], r[2 * p + 1]);
                    let (e, f) = (tl[2 * p], tl[2 * p + 1]);
                    gh[2 * p] += df * (c * e + d * f);
                    gh[2 * p + 1] += df * (-d * e + c * f);
                }
                let gr = grads.relation_row(t.relation.0, width);
                for p in 0..self.dim {
                    let (a, b) = (h[2 * p], h[2 * p + 1]);
                    let (e, f) = (tl[2 * p], tl[2 * p + 1]);
                    gr[2 * p] += df * (a * e + b * f);
                    gr[2 * p + 1] += df * (-b * e + a * f);
                }
                let gt = grads.entity_row(t.tail.0, width);
                for p in 0..self.dim {
                    let (a, b) = (h[2 * p], h[2 * p + 1]);
                    let (c, d) = (r[2 * p], r[2 * p + 1]);
                    gt[2 * p] += df * (a * c - b * d);
                    gt[2 * p + 1] += df * (a * d + b * c);
                }
            }
        }
    }
}

/// Where a training label came from.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LabelSource {
    Observed,
    RuleAnnotated,
}

/// A triplet with a hard training label. Observed triplets are always
/// positive.
#[derive(Clone, Copy, Debug)]
pub struct LabeledTriplet {
    pub triplet: Triplet,
    pub label: bool,
    pub source: LabelSource,
}

impl LabeledTriplet {
    pub fn observed(triplet: Triplet) -> Self {
        LabeledTriplet {
            triplet,
            label: true,
            source: LabelSource::Observed,
        }
    }

    pub fn annotated(triplet: Triplet, label: bool) -> Self {
        LabeledTriplet {
            triplet,
            label,
            source: LabelSource::RuleAnnotated,
        }
    }
}

/// Sparse gradient: touched rows only, keyed by raw id.
#[derive(Default, Debug)]
pub struct SparseGrads {
    pub entity: HashMap<u32, Vec<f64>>,
    pub relation: HashMap<u32, Vec<f64>>,
}

impl SparseGrads {
    fn entity_row(&mut self, id: u32, width: usize) -> &mut Vec<f64> {
        self.entity.entry(id).or_insert_with(|| vec![0.0; width])
    }

    fn relation_row(&mut self, id: u32, width: usize) -> &mut Vec<f64> {
        self.relation.entry(id).or_insert_with(|| vec![0.0; width])
    }

    pub fn merge(&mut self, other: SparseGrads) {
        for (id, row) in other.entity {
            match self.entity.entry(id) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().iter_mut().zip(&row) {
                        *a += b;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(row);
                }
            }
        }
        for (id, row) in other.relation {
            match self.relation.entry(id) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().iter_mut().zip(&row) {
                        *a += b;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(row);
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entity.is_empty() && self.relation.is_empty()
    }
}

/// Corruptions of a positive triplet. `still_observed` counts samples that
/// remained in train after the retry budget ran out (only possible on
/// near-saturated graphs).
pub struct NegativeSamples {
    pub triplets: Vec<Triplet>,
    pub still_observed: usize,
}

const NEGATIVE_RETRIES: usize = 32;

/// Draws `n` corruptions of `positive`, alternating head/tail replacement
/// (head first) and resampling any candidate found in train, up to a retry
/// budget. The relation is never altered.
pub fn negative_samples(
    kg: &KnowledgeGraph,
    positive: &Triplet,
    n: usize,
    rng: &mut impl Rng,
) -> NegativeSamples {
    let n_entities = kg.n_entities() as u32;
    let mut triplets = Vec::with_capacity(n);
    let mut still_observed = 0;
    for i in 0..n {
        let corrupt_head = i % 2 == 0;
        let mut candidate = *positive;
        for attempt in 0..NEGATIVE_RETRIES {
            let e = EntityId(rng.random_range(0..n_entities));
            candidate = if corrupt_head {
                Triplet::new(e, positive.relation, positive.tail)
            } else {
                Triplet::new(positive.head, positive.relation, e)
            };
            if !kg.contains(&candidate, SplitMask::TRAIN) {
                break;
            }
            if attempt == NEGATIVE_RETRIES - 1 {
                still_observed += 1;
            }
        }
        triplets.push(candidate);
    }
    NegativeSamples {
        triplets,
        still_observed,
    }
}

/// Softmax(α·f) within one negative set, with α = 0 meaning uniform.
fn adversarial_weights(scores: &[f64], alpha: f64) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    if alpha == 0.0 {
        return vec![1.0 / scores.len() as f64; scores.len()];
    }
    let m = scores
        .iter()
        .map(|f| alpha * f)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|f| (alpha * f - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Loss and gradient of one example with target y ∈ [0, 1] and its
/// (possibly empty) negative set. Soft targets interpolate the two hard
/// branches: y·softplus(−f) + (1−y)·softplus(f), with df = σ(f) − y.
fn example_loss_and_grads(
    model: &EmbeddingModel,
    triplet: &Triplet,
    y: f64,
    negatives: &[Triplet],
    alpha: f64,
) -> Result<(f64, SparseGrads)> {
    let f = model.score_raw(triplet);
    if !f.is_finite() {
        return Err(Error::NonFiniteLoss(*triplet));
    }
    let mut grads = SparseGrads::default();
    let mut loss = y * softplus(-f) + (1.0 - y) * softplus(f);
    model.accumulate_score_grads(triplet, sigmoid(f) - y, &mut grads);
    if !negatives.is_empty() {
        let mut fs = Vec::with_capacity(negatives.len());
        for neg in negatives {
            let fi = model.score_raw(neg);
            if !fi.is_finite() {
                return Err(Error::NonFiniteLoss(*neg));
            }
            fs.push(fi);
        }
        let weights = adversarial_weights(&fs, alpha);
        for ((neg, &fi), &pi) in negatives.iter().zip(&fs).zip(&weights) {
            loss += pi * softplus(fi);
            model.accumulate_score_grads(neg, pi * sigmoid(fi), &mut grads);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(*triplet));
    }
    Ok((loss, grads))
}

/// Total loss and summed sparse gradients of a labeled batch. `negatives`
/// must align with `batch`; label-0 items carry empty negative sets. The
/// adversarial weights are computed per positive and treated as constants.
pub fn batch_loss_and_grads(
    model: &EmbeddingModel,
    batch: &[LabeledTriplet],
    negatives: &[Vec<Triplet>],
    alpha: f64,
) -> Result<(f64, SparseGrads)> {
    assert_eq!(batch.len(), negatives.len(), "negatives misaligned");
    let per_item: Result<Vec<(f64, SparseGrads)>> = batch
        .par_iter()
        .zip(negatives.par_iter())
        .map(|(item, negs)| {
            debug_assert!(item.label || negs.is_empty(), "negatives on a label-0 item");
            example_loss_and_grads(
                model,
                &item.triplet,
                if item.label { 1.0 } else { 0.0 },
                negs,
                alpha,
            )
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = SparseGrads::default();
    for (l, g) in per_item? {
        loss += l;
        grads.merge(g);
    }
    Ok((loss, grads))
}

/// Training hyperparameters for the embedding model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub norm: DistanceNorm,
    pub dim: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub n_negatives: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub steps_per_estep: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.dim < 1 {
            return fail(format!("dim must be >= 1, got {}", self.dim));
        }
        if self.batch_size < 1 {
            return fail(format!("batch_size must be >= 1, got {}", self.batch_size));
        }
        if self.n_negatives < 1 {
            return fail(format!(
                "n_negatives must be >= 1, got {}",
                self.n_negatives
            ));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return fail(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return fail(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !self.gamma.is_finite() {
            return fail(format!("gamma must be finite, got {}", self.gamma));
        }
        self.adam.validate()
    }

    /// Model initialized for this config's kind and a graph's vocabulary,
    /// using the config seed's initialization stream.
    pub fn init_model(&self, kg: &KnowledgeGraph) -> EmbeddingModel {
        EmbeddingModel::init(
            self.kind,
            self.norm,
            self.dim,
            self.gamma,
            kg.n_entities(),
            kg.n_relations(),
            seeds::derive(self.seed, &[seeds::STREAM_INIT]),
        )
    }
}

/// One entry of the training pool: a triplet, its target in [0,1], and
/// whether corruptions should be sampled for it (positives only).
#[derive(Clone, Copy, Debug)]
pub struct TrainingExample {
    pub triplet: Triplet,
    pub target: f64,
    pub wants_negatives: bool,
}

impl TrainingExample {
    pub fn observed(triplet: Triplet) -> Self {
        TrainingExample {
            triplet,
            target: 1.0,
            wants_negatives: true,
        }
    }
}

/// Outcome of a span of training steps.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepSummary {
    pub steps: u64,
    pub mean_batch_loss: f64,
    pub still_observed_negatives: u64,
}

/// Runs the steps in `step_range` (global indices) over a fixed example
/// pool. Each step seeds its own RNG stream from the global step index, so
/// the trajectory over a pool depends only on (seed, pool, step indices):
/// interleaving other work between spans cannot perturb it. Batch items
/// are drawn uniformly with replacement; negatives are drawn from the same
/// per-step stream in batch order. Gradients are summed over the batch
/// (Adam's moment normalization makes the scale immaterial).
pub fn run_training_steps(
    model: &mut EmbeddingModel,
    adam: &mut AdamState,
    kg: &KnowledgeGraph,
    pool: &[TrainingExample],
    cfg: &TrainConfig,
    step_range: Range<u64>,
) -> Result<StepSummary> {
    if pool.is_empty() {
        if !step_range.is_empty() {
            log::warn!(
                "training pool is empty; skipping {} steps",
                step_range.end - step_range.start
            );
        }
        return Ok(StepSummary::default());
    }
    let mut summary = StepSummary::default();
    let mut loss_sum = 0.0;
    for step in step_range {
        let mut rng = seeds::rng(seeds::derive(cfg.seed, &[seeds::STREAM_KGE_STEP, step]));
        let items: Vec<TrainingExample> = (0..cfg.batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let negatives: Vec<Vec<Triplet>> = items
            .iter()
            .map(|ex| {
                if ex.wants_negatives {
                    let ns = negative_samples(kg, &ex.triplet, cfg.n_negatives, &mut rng);
                    summary.still_observed_negatives += ns.still_observed as u64;
                    ns.triplets
                } else {
                    Vec::new()
                }
            })
            .collect();
        let per_item: Result<Vec<(f64, SparseGrads)>> = items
            .par_iter()
            .zip(negatives.par_iter())
            .map(|(ex, negs)| example_loss_and_grads(model, &ex.triplet, ex.target, negs, cfg.alpha))
            .collect();
        let mut grads = SparseGrads::default();
        let mut loss = 0.0;
        for (l, g) in per_item? {
            loss += l;
            grads.merge(g);
        }
        adam.apply(model, &grads, cfg.learning_rate);
        loss_sum += loss / cfg.batch_size as f64;
        summary.steps += 1;
    }
    if summary.steps > 0 {
        summary.mean_batch_loss = loss_sum / summary.steps as f64;
    }
    Ok(summary)
}

/// Trains a fresh model on the training split alone for `total_steps`
/// steps starting at global step 0. This is the rule-free baseline; an EM
/// run whose rule set is empty reproduces it bit for bit.
pub fn train_standalone(
    kg: &KnowledgeGraph,
    cfg: &TrainConfig,
    total_steps: u64,
) -> Result<(EmbeddingModel, AdamState, StepSummary)> {
    cfg.validate()?;
    let mut model = cfg.init_model(kg);
    let mut adam = AdamState::new(&model, cfg.adam);
    let pool: Vec<TrainingExample> = kg
        .train()
        .iter()
        .map(|&t| TrainingExample::observed(t))
        .collect();
    let summary = run_training_steps(&mut model, &mut adam, kg, &pool, cfg, 0..total_steps)?;
    Ok((model, adam, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::RelationId;
    use approx::assert_relative_eq;

    fn t(h: u32, r: u32, tl: u32) -> Triplet {
        Triplet::new(EntityId(h), RelationId(r), EntityId(tl))
    }

    fn tiny_kg() -> KnowledgeGraph {
        KnowledgeGraph::from_parts(
            (0..4).map(|i| format!("e{i}")).collect(),
            (0..2).map(|i| format!("r{i}")).collect(),
            vec![t(0, 0, 1), t(1, 0, 2), t(2, 1, 3)],
            vec![],
            vec![],
        )
    }

    fn model_with(kind: ModelKind, dim: usize, rows: &[(bool, u32, &[f64])]) -> EmbeddingModel {
        let mut m = EmbeddingModel::init(kind, DistanceNorm::L1, dim, 2.0, 4, 2, 1);
        for &(is_entity, id, vals) in rows {
            let row = if is_entity {
                m.entity_row_mut(EntityId(id))
            } else {
                m.relation_row_mut(RelationId(id))
            };
            row.copy_from_slice(vals);
        }
        m
    }

    #[test]
    fn transe_scores_match_hand_computation() {
        let m = model_with(
            ModelKind::TransE,
            2,
            &[
                (true, 0, &[0.1, 0.2]),
                (false, 0, &[0.3, -0.1]),
                (true, 1, &[0.5, 0.0]),
            ],
        );
        // h + r - t = (-0.1, 0.1), L1 distance 0.2, gamma = 2.
        assert_relative_eq!(m.score_raw(&t(0, 0, 1)), 1.8, max_relative = 1e-12);
        assert_relative_eq!(
            m.score_prob(&t(0, 0, 1)),
            sigmoid(1.8),
            max_relative = 1e-12
        );
    }

    #[test]
    fn transe_l2_uses_euclidean_distance() {
        let mut m = model_with(
            ModelKind::TransE,
            2,
            &[
                (true, 0, &[1.0, 0.0]),
                (false, 0, &[0.0, 1.0]),
                (true, 1, &[0.0, 0.0]),
            ],
        );
        m.norm = DistanceNorm::L2;
        assert_relative_eq!(
            m.score_raw(&t(0, 0, 1)),
            2.0 - 2.0f64.sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn zero_embedding_transe_scores_sigmoid_gamma() {
        let mut m = EmbeddingModel::init(ModelKind::TransE, DistanceNorm::L1, 4, 24.0, 4, 2, 1);
        m.entity_data_mut().fill(0.0);
        m.relation_data_mut().fill(0.0);
        assert_relative_eq!(m.score_prob(&t(0, 0, 1)), sigmoid(24.0));
        assert!(m.score_prob(&t(0, 0, 1)) > 0.9999999);
    }

    #[test]
    fn distmult_scores_trilinear_product() {
        let m = model_with(
            ModelKind::DistMult,
            2,
            &[
                (true, 0, &[0.1, 0.2]),
                (false, 0, &[0.3, -0.1]),
                (true, 1, &[0.5, 0.0]),
            ],
        );
        assert_relative_eq!(m.score_raw(&t(0, 0, 1)), 0.015, max_relative = 1e-12);
        let mut zeroed = model_with(ModelKind::DistMult, 2, &[]);
        zeroed.entity_data_mut().fill(0.0);
        assert_eq!(zeroed.score_prob(&t(0, 0, 1)), 0.5);
    }

    #[test]
    fn complex_scores_real_part_of_hermitian_product() {
        // h = 1+2i, r = 3+4i, t = 5+6i (d = 1):
        // h*r = -5+10i; Re((-5+10i) * (5-6i)) = -25 + 60 = 35.
        let m = model_with(
            ModelKind::ComplEx,
            1,
            &[
                (true, 0, &[1.0, 2.0]),
                (false, 0, &[3.0, 4.0]),
                (true, 1, &[5.0, 6.0]),
            ],
        );
        assert_eq!(m.width(), 2);
        assert_relative_eq!(m.score_raw(&t(0, 0, 1)), 35.0, max_relative = 1e-12);
    }

    #[test]
    fn init_respects_bounds_and_seed() {
        let m = EmbeddingModel::init(ModelKind::TransE, DistanceNorm::L1, 8, 4.0, 10, 3, 42);
        let b = 4.0 / 8.0;
        assert!(m.entity_data().iter().all(|&x| (-b..=b).contains(&x)));
        assert!(m.relation_data().iter().all(|&x| (-b..=b).contains(&x)));
        let m2 = EmbeddingModel::init(ModelKind::TransE, DistanceNorm::L1, 8, 4.0, 10, 3, 42);
        assert_eq!(m.entity_data(), m2.entity_data());
        let m3 = EmbeddingModel::init(ModelKind::TransE, DistanceNorm::L1, 8, 4.0, 10, 3, 43);
        assert_ne!(m.entity_data(), m3.entity_data());

        let c = EmbeddingModel::init(ModelKind::ComplEx, DistanceNorm::L1, 8, 4.0, 10, 3, 42);
        assert_eq!(c.width(), 16);
        let b = 1.0 / 8.0f64.sqrt();
        assert!(c.entity_data().iter().all(|&x| (-b..=b).contains(&x)));
    }

    #[test]
    fn negatives_alternate_sides_and_avoid_train() {
        let kg = tiny_kg();
        let pos = t(0, 0, 1);
        let mut rng = seeds::rng(7);
        let ns = negative_samples(&kg, &pos, 8, &mut rng);
        assert_eq!(ns.triplets.len(), 8);
        assert_eq!(ns.still_observed, 0);
        for (i, neg) in ns.triplets.iter().enumerate() {
            assert_eq!(neg.relation, pos.relation);
            if i % 2 == 0 {
                assert_eq!(neg.tail, pos.tail);
            } else {
                assert_eq!(neg.head, pos.head);
            }
            assert!(!kg.contains(neg, SplitMask::TRAIN));
        }
    }

    #[test]
    fn saturated_graph_reports_still_observed_negatives() {
        // Single entity with a self-loop: every corruption is the loop.
        let kg = KnowledgeGraph::from_parts(
            vec!["e0".into()],
            vec!["r0".into()],
            vec![t(0, 0, 0)],
            vec![],
            vec![],
        );
        let mut rng = seeds::rng(7);
        let ns = negative_samples(&kg, &t(0, 0, 0), 4, &mut rng);
        assert_eq!(ns.triplets.len(), 4);
        assert_eq!(ns.still_observed, 4);
    }

    #[test]
    fn adversarial_weights_are_uniform_at_alpha_zero_and_sum_to_one() {
        let scores = [1.0, -2.0, 0.5, 3.0];
        let uniform = adversarial_weights(&scores, 0.0);
        assert!(uniform.iter().all(|&w| w == 0.25));
        let w = adversarial_weights(&scores, 1.5);
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        // Higher-scored negatives get more mass.
        assert!(w[3] > w[0] && w[0] > w[2] && w[2] > w[1]);
    }

    #[test]
    fn hand_computed_loss_single_positive_single_negative() {
        // All-zero TransE embeddings, gamma = 1: f = 1 for every triplet.
        let mut m = EmbeddingModel::init(ModelKind::TransE, DistanceNorm::L1, 4, 1.0, 4, 2, 1);
        m.entity_data_mut().fill(0.0);
        m.relation_data_mut().fill(0.0);
        let batch = [LabeledTriplet::observed(t(0, 0, 1))];
        let negs = vec![vec![t(2, 0, 1)]];
        let (loss, _) = batch_loss_and_grads(&m, &batch, &negs, 0.0).unwrap();
        // -log sigmoid(1) - log sigmoid(-1)
        assert_relative_eq!(loss, softplus(-1.0) + softplus(1.0), max_relative = 1e-12);
        assert_relative_eq!(loss, 0.313261687518223 + 1.313261687518223, epsilon = 1e-12);
    }

    #[test]
    fn label_zero_items_take_the_negative_branch() {
        let mut m = EmbeddingModel::init(ModelKind::TransE, DistanceNorm::L1, 4, 1.0, 4, 2, 1);
        m.entity_data_mut().fill(0.0);
        m.relation_data_mut().fill(0.0);
        let batch = [LabeledTriplet::annotated(t(0, 0, 1), false)];
        let negs = vec![vec![]];
        let (loss, _) = batch_loss_and_grads(&m, &batch, &negs, 0.0).unwrap();
        assert_relative_eq!(loss, softplus(1.0), max_relative = 1e-12);
    }

    #[test]
    fn non_finite_scores_error_with_the_offending_triplet() {
        let mut m = EmbeddingModel::init(ModelKind::TransE, DistanceNorm::L1, 2, 1.0, 4, 2, 1);
        m.entity_row_mut(EntityId(0)).fill(f64::MAX);
        m.relation_row_mut(RelationId(0)).fill(f64::MAX);
        let batch = [LabeledTriplet::observed(t(0, 0, 1))];
        let err = batch_loss_and_grads(&m, &batch, &[vec![]], 0.0).unwrap_err();
        match err {
            Error::NonFiniteLoss(bad) => assert_eq!(bad, t(0, 0, 1)),
            other => panic!("unexpected error: {other:?}"),
        }
    }

    /// Central finite difference of the batch loss w.r.t. one parameter,
    /// with adversarial weights FROZEN at the base point (they are
    /// constants in the loss definition).
    #[allow(clippy::too_many_arguments)]
    fn finite_diff_full_batch(
        model: &mut EmbeddingModel,
        batch: &[LabeledTriplet],
        negatives: &[Vec<Triplet>],
        alpha: f64,
        entity_row: Option<u32>,
        relation_row: Option<u32>,
        coord: usize,
        eps: f64,
    ) -> f64 {
        let frozen: Vec<Vec<f64>> = batch
            .iter()
            .zip(negatives)
            .map(|(_, negs)| {
                let fs: Vec<f64> = negs.iter().map(|n| model.score_raw(n)).collect();
                adversarial_weights(&fs, alpha)
            })
            .collect();
        let loss_at = |m: &EmbeddingModel| -> f64 {
            let mut loss = 0.0;
            for ((item, negs), ws) in batch.iter().zip(negatives).zip(&frozen) {
                let f = m.score_raw(&item.triplet);
                loss += if item.label {
                    softplus(-f)
                } else {
                    softplus(f)
                };
                for (neg, &w) in negs.iter().zip(ws) {
                    loss += w * softplus(m.score_raw(neg));
                }
            }
            loss
        };
        let bump = |m: &mut EmbeddingModel, delta: f64| {
            if let Some(id) = entity_row {
                m.entity_row_mut(EntityId(id))[coord] += delta;
            }
            if let Some(id) = relation_row {
                m.relation_row_mut(RelationId(id))[coord] += delta;
            }
        };
        bump(model, eps);
        let up = loss_at(model);
        bump(model, -2.0 * eps);
        let down = loss_at(model);
        bump(model, eps);
        (up - down) / (2.0 * eps)
    }

    #[test]
    fn analytic_gradients_match_finite_differences_smoke() {
        // Small smoke version; the acceptance suite runs the full sweep.
        for kind in [ModelKind::TransE, ModelKind::DistMult, ModelKind::ComplEx] {
            let kg = tiny_kg();
            let mut m = EmbeddingModel::init(kind, DistanceNorm::L1, 4, 2.0, 4, 2, 99);
            let batch = [
                LabeledTriplet::observed(t(0, 0, 1)),
                LabeledTriplet::annotated(t(2, 1, 3), false),
            ];
            let mut rng = seeds::rng(5);
            let negs = vec![
                negative_samples(&kg, &t(0, 0, 1), 4, &mut rng).triplets,
                vec![],
            ];
            let (_, grads) = batch_loss_and_grads(&m, &batch, &negs, 0.8).unwrap();
            for (&id, row) in grads.entity.clone().iter() {
                for (k, &g) in row.iter().enumerate() {
                    let fd = finite_diff_full_batch(
                        &mut m,
                        &batch,
                        &negs,
                        0.8,
                        Some(id),
                        None,
                        k,
                        1e-5,
                    );
                    assert_relative_eq!(g, fd, max_relative = 1e-4, epsilon = 1e-8);
                }
            }
            for (&id, row) in grads.relation.clone().iter() {
                for (k, &g) in row.iter().enumerate() {
                    let fd = finite_diff_full_batch(
                        &mut m,
                        &batch,
                        &negs,
                        0.8,
                        None,
                        Some(id),
                        k,
                        1e-5,
                    );
                    assert_relative_eq!(g, fd, max_relative = 1e-4, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn self_loop_gradients_accumulate_into_one_row() {
        // head == tail: d f/d e0 must combine the head and tail partials.
        let m = model_with(
            ModelKind::DistMult,
            2,
            &[(true, 0, &[0.3, -0.4]), (false, 0, &[0.2, 0.5])],
        );
        let mut grads = SparseGrads::default();
        m.accumulate_score_grads(&t(0, 0, 0), 1.0, &mut grads);
        let g = &grads.entity[&0];
        // d(h*r*h)/dh = 2*h*r per coordinate.
        assert_relative_eq!(g[0], 2.0 * 0.3 * 0.2, max_relative = 1e-12);
        assert_relative_eq!(g[1], 2.0 * -0.4 * 0.5, max_relative = 1e-12);
    }

    #[test]
    fn training_steps_are_reproducible_and_span_invariant() {
        let kg = tiny_kg();
        let cfg = TrainConfig {
            kind: ModelKind::TransE,
            norm: DistanceNorm::L1,
            dim: 4,
            gamma: 2.0,
            batch_size: 4,
            n_negatives: 2,
            alpha: 1.0,
            learning_rate: 0.01,
            adam: AdamConfig::default(),
            steps_per_estep: 0,
            seed: 11,
        };
        let (m1, _, s1) = train_standalone(&kg, &cfg, 20).unwrap();
        let (m2, _, _) = train_standalone(&kg, &cfg, 20).unwrap();
        assert_eq!(m1.entity_data(), m2.entity_data());
        assert_eq!(m1.relation_data(), m2.relation_data());
        assert_eq!(s1.steps, 20);
        assert!(s1.mean_batch_loss.is_finite());

        // Splitting the span at any point yields the identical trajectory.
        let mut m3 = cfg.init_model(&kg);
        let mut adam3 = AdamState::new(&m3, cfg.adam);
        let pool: Vec<TrainingExample> = kg
            .train()
            .iter()
            .map(|&t| TrainingExample::observed(t))
            .collect();
        run_training_steps(&mut m3, &mut adam3, &kg, &pool, &cfg, 0..7).unwrap();
        run_training_steps(&mut m3, &mut adam3, &kg, &pool, &cfg, 7..20).unwrap();
        assert_eq!(m1.entity_data(), m3.entity_data());
        assert_eq!(m1.relation_data(), m3.relation_data());
    }

    #[test]
    fn empty_pool_skips_training() {
        let kg = KnowledgeGraph::from_parts(
            vec!["e0".into()],
            vec!["r0".into()],
            vec![],
            vec![],
            vec![],
        );
        let cfg = TrainConfig {
            kind: ModelKind::DistMult,
            norm: DistanceNorm::L1,
            dim: 2,
            gamma: 1.0,
            batch_size: 2,
            n_negatives: 1,
            alpha: 0.0,
            learning_rate: 0.1,
            adam: AdamConfig::default(),
            steps_per_estep: 0,
            seed: 3,
        };
        let (_, adam, summary) = train_standalone(&kg, &cfg, 10).unwrap();
        assert_eq!(summary.steps, 0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn training_loss_decreases_on_average() {
        let kg = tiny_kg();
        let cfg = TrainConfig {
            kind: ModelKind::DistMult,
            norm: DistanceNorm::L1,
            dim: 8,
            gamma: 1.0,
            batch_size: 8,
            n_negatives: 4,
            alpha: 0.5,
            learning_rate: 0.05,
            adam: AdamConfig::default(),
            steps_per_estep: 0,
            seed: 17,
        };
        let mut model = cfg.init_model(&kg);
        let mut adam = AdamState::new(&model, cfg.adam);
        let pool: Vec<TrainingExample> = kg
            .train()
            .iter()
            .map(|&t| TrainingExample::observed(t))
            .collect();
        let early = run_training_steps(&mut model, &mut adam, &kg, &pool, &cfg, 0..30).unwrap();
        let late = run_training_steps(&mut model, &mut adam, &kg, &pool, &cfg, 30..300).unwrap();
        assert!(
            late.mean_batch_loss < early.mean_batch_loss,
            "loss failed to decrease: {} -> {}",
            early.mean_batch_loss,
            late.mean_batch_loss
        );
    }
}
