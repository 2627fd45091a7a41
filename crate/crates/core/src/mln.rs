//! Markov logic over the enumerated groundings: Gibbs conditionals,
//! pseudolikelihood gradients, and rule-weight updates.
//!
//! The joint over triplet indicators is proportional to exp(Σ_l w_l n_l)
//! where n_l counts true groundings of rule l, a grounding (∧premises ⇒
//! hypothesis) being true unless all premises hold and the hypothesis
//! fails. Conditioned on its Markov blanket, a triplet's probability of
//! being true is
//!
//! ```text
//! p(v=1 | blanket) = σ( Σ_{g ∋ v} w_{rule(g)} · Δ_g )
//! Δ_g = 1{g true with v=1} − 1{g true with v=0}
//! ```
//!
//! since all groundings not mentioning v cancel in the ratio. Weight
//! learning ascends the pseudolikelihood: for a center with target y the
//! per-rule derivative is (y − p)·Δ_l with Δ_l the sum of Δ_g over the
//! rule's groundings at that center.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grounding::{Grounding, HiddenTripletSet, MarkovBlanket};
use crate::kg::{KnowledgeGraph, SplitMask, Triplet};
use crate::kge::sigmoid;
use crate::rules::RuleSet;
use crate::seeds;

/// A truth assignment for the neighbors of one blanket.
#[derive(Clone, Debug, Default)]
pub struct BlanketSample {
    values: HashMap<Triplet, bool>,
}

impl BlanketSample {
    /// Draws neighbor values: observed neighbors are true, hidden ones are
    /// Bernoulli with mean `q`. Neighbors are visited in the blanket's
    /// sorted order, so consumption of `rng` is deterministic.
    pub fn draw(
        blanket: &MarkovBlanket,
        q: impl Fn(&Triplet) -> f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut values = HashMap::with_capacity(blanket.neighbors.len());
        for &(t, observed) in &blanket.neighbors {
            let v = observed || rng.random::<f64>() < q(&t);
            values.insert(t, v);
        }
        BlanketSample { values }
    }

    /// Fixed assignment, mainly for tests and oracles.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Triplet, bool)>) -> Self {
        BlanketSample {
            values: pairs.into_iter().collect(),
        }
    }

    pub fn value(&self, t: &Triplet) -> Option<bool> {
        self.values.get(t).copied()
    }
}

/// Δ_g for one grounding: the change in the grounding's truth when the
/// center flips from 0 to 1, with all other atoms taken from the sample.
/// The center may appear as premise, hypothesis, or both.
fn grounding_delta(g: &Grounding, center: &Triplet, sample: &BlanketSample) -> Result<i32> {
    let truth = |center_value: bool| -> Result<bool> {
        let mut premises_hold = true;
        for p in g.premises() {
            let v = if p == center {
                center_value
            } else {
                sample.value(p).ok_or(Error::MissingNeighbor(*p))?
            };
            premises_hold &= v;
        }
        let hyp = if g.hypothesis == *center {
            center_value
        } else {
            sample
                .value(&g.hypothesis)
                .ok_or(Error::MissingNeighbor(g.hypothesis))?
        };
        Ok(!premises_hold || hyp)
    };
    Ok(truth(true)? as i32 - truth(false)? as i32)
}

/// Exact Gibbs conditional p(center=1 | sampled blanket) of the MLN
/// restricted to the enumerated groundings.
pub fn conditional_prob(
    center: &Triplet,
    blanket: &MarkovBlanket,
    sample: &BlanketSample,
    rules: &RuleSet,
) -> Result<f64> {
    let mut s = 0.0;
    for g in &blanket.groundings {
        s += rules.weight(g.rule_id) * grounding_delta(g, center, sample)? as f64;
    }
    Ok(sigmoid(s))
}

/// Per-rule pseudolikelihood gradient at one center with target y: the
/// derivative of y·log p + (1−y)·log(1−p) with respect to each w_l. Rules
/// with no grounding in the blanket get no entry.
pub fn pl_gradient(
    center: &Triplet,
    y: f64,
    blanket: &MarkovBlanket,
    sample: &BlanketSample,
    rules: &RuleSet,
) -> Result<BTreeMap<u32, f64>> {
    let mut delta_by_rule: BTreeMap<u32, f64> = BTreeMap::new();
    for g in &blanket.groundings {
        *delta_by_rule.entry(g.rule_id).or_default() +=
            grounding_delta(g, center, sample)? as f64;
    }
    let s: f64 = delta_by_rule
        .iter()
        .map(|(&id, &d)| rules.weight(id) * d)
        .sum();
    let p = sigmoid(s);
    Ok(delta_by_rule
        .into_iter()
        .map(|(id, d)| (id, (y - p) * d))
        .collect())
}

/// Pseudolikelihood targets: 1 for observed triplets, the current belief
/// q for hidden ones. Built over the triplets that appear in groundings
/// (others have empty blankets and contribute nothing).
pub struct AnnotationTable {
    values: HashMap<Triplet, f64>,
}

impl AnnotationTable {
    pub fn build(
        kg: &KnowledgeGraph,
        hidden: &HiddenTripletSet,
        q: impl Fn(&Triplet) -> f64,
    ) -> Self {
        let mut values = HashMap::new();
        for member in hidden.members() {
            let y = if kg.contains(&member, SplitMask::TRAIN) {
                1.0
            } else {
                q(&member)
            };
            debug_assert!((0.0..=1.0).contains(&y), "target out of range: {y}");
            values.insert(member, y);
        }
        AnnotationTable { values }
    }

    pub fn get(&self, t: &Triplet) -> Option<f64> {
        self.values.get(t).copied()
    }

    pub fn insert(&mut self, t: Triplet, y: f64) {
        assert!((0.0..=1.0).contains(&y), "target out of range: {y}");
        self.values.insert(t, y);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn empty() -> Self {
        AnnotationTable {
            values: HashMap::new(),
        }
    }
}

/// Outcome of one M-step pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct MStepReport {
    pub n_centers: usize,
    /// Mean |y − p| over centers and samples before the weight update.
    pub mean_abs_gap_before: f64,
    /// Same quantity re-evaluated on the same samples after the update.
    pub mean_abs_gap_after: f64,
}

fn center_rng(seed: u64, center: &Triplet, sample_idx: u32) -> impl Rng {
    let parts = center.seed_parts();
    seeds::rng(seeds::derive(
        seed,
        &[parts[0], parts[1], parts[2], sample_idx as u64],
    ))
}

/// One pseudolikelihood ascent pass over every triplet appearing in a
/// grounding. Per center, gradients are averaged over
/// `samples_per_triplet` fresh blanket samples; per-center averages are
/// summed across centers and applied once: w ← clamp(w + lr_w·ḡ, ±10).
/// Blanket sampling draws from per-center streams derived from `seed`, so
/// results are independent of thread count.
pub fn m_step_update(
    rules: &mut RuleSet,
    annotations: &AnnotationTable,
    hidden_set: &HiddenTripletSet,
    q: impl Fn(&Triplet) -> f64 + Sync,
    lr_w: f64,
    samples_per_triplet: u32,
    seed: u64,
) -> Result<MStepReport> {
    assert!(samples_per_triplet >= 1, "need at least one blanket sample");
    if rules.is_empty() {
        return Ok(MStepReport::default());
    }
    let centers = hidden_set.members();
    if centers.is_empty() {
        return Ok(MStepReport::default());
    }

    let gap_pass = |rules: &RuleSet| -> Result<f64> {
        let gaps: Result<Vec<f64>> = centers
            .par_iter()
            .map(|center| {
                let y = annotations
                    .get(center)
                    .ok_or(Error::MissingAnnotation(*center))?;
                let blanket = hidden_set.markov_blanket(*center);
                let mut gap = 0.0;
                for s_idx in 0..samples_per_triplet {
                    let mut rng = center_rng(seed, center, s_idx);
                    let sample = BlanketSample::draw(&blanket, &q, &mut rng);
                    let p = conditional_prob(center, &blanket, &sample, rules)?;
                    gap += (y - p).abs();
                }
                Ok(gap / samples_per_triplet as f64)
            })
            .collect();
        Ok(gaps?.iter().sum::<f64>() / centers.len() as f64)
    };

    let per_center: Result<Vec<BTreeMap<u32, f64>>> = centers
        .par_iter()
        .map(|center| {
            let y = annotations
                .get(center)
                .ok_or(Error::MissingAnnotation(*center))?;
            let blanket = hidden_set.markov_blanket(*center);
            let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
            for s_idx in 0..samples_per_triplet {
                let mut rng = center_rng(seed, center, s_idx);
                let sample = BlanketSample::draw(&blanket, &q, &mut rng);
                for (rule_id, g) in pl_gradient(center, y, &blanket, &sample, rules)? {
                    *acc.entry(rule_id).or_default() += g;
                }
            }
            for g in acc.values_mut() {
                *g /= samples_per_triplet as f64;
            }
            Ok(acc)
        })
        .collect();

    let mean_abs_gap_before = gap_pass(rules)?;

    let mut total: BTreeMap<u32, f64> = BTreeMap::new();
    for center_grads in per_center? {
        for (rule_id, g) in center_grads {
            *total.entry(rule_id).or_default() += g;
        }
    }
    for (rule_id, g) in total {
        let w = (rules.weight(rule_id) + lr_w * g).clamp(-10.0, 10.0);
        rules.set_weight(rule_id, w);
    }

    let mean_abs_gap_after = gap_pass(rules)?;

    Ok(MStepReport {
        n_centers: centers.len(),
        mean_abs_gap_before,
        mean_abs_gap_after,
    })
}
