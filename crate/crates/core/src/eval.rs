//! Filtered-ranking evaluation of link prediction.
//!
//! Each test triplet yields two queries: predict the head given (?, r, t)
//! and the tail given (h, r, ?). Every entity is scored as a candidate;
//! candidates that form a triplet present anywhere in train ∪ valid ∪ test
//! — other than the query's own answer — are removed before ranking (the
//! standard "filtered" protocol). Ties are scored by expected rank: half
//! of the equal-scored candidates count, which avoids the optimistic
//! inflation of first-index ranking without resorting to random
//! tie-breaks.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::TrainState;
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, Split, SplitMask, Triplet};
use crate::mln::{conditional_prob, BlanketSample};
use crate::seeds;

/// Which side of the known triplet is masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSide {
    Head,
    Tail,
}

/// One ranking query: the complete test triplet plus the side to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankQuery {
    pub known: Triplet,
    pub masked: MaskSide,
}

impl RankQuery {
    /// The entity the model should rank first.
    pub fn answer(&self) -> EntityId {
        match self.masked {
            MaskSide::Head => self.known.head,
            MaskSide::Tail => self.known.tail,
        }
    }

    /// The candidate triplet with `e` substituted for the masked side.
    pub fn with_entity(&self, e: EntityId) -> Triplet {
        match self.masked {
            MaskSide::Head => Triplet::new(e, self.known.relation, self.known.tail),
            MaskSide::Tail => Triplet::new(self.known.head, self.known.relation, e),
        }
    }
}

/// Head- and tail-masked queries for every triplet of `split`, in split
/// order.
pub fn queries_for(kg: &KnowledgeGraph, split: Split) -> Vec<RankQuery> {
    kg.split(split)
        .iter()
        .flat_map(|&known| {
            [
                RankQuery {
                    known,
                    masked: MaskSide::Head,
                },
                RankQuery {
                    known,
                    masked: MaskSide::Tail,
                },
            ]
        })
        .collect()
}

/// Blended prediction score: q_θ(v=1) + λ · p_term, where p_term is the
/// rule-conditional probability when the triplet has groundings (drawing
/// its blanket once from q_θ via `rng`) and the uninformative 0.5
/// otherwise. λ = 0 short-circuits to the embedding probability alone.
pub fn predict_score(
    state: &TrainState,
    trip: &Triplet,
    lambda: f64,
    rng: &mut impl Rng,
) -> f64 {
    let q = state.model.score_prob(trip);
    if lambda == 0.0 {
        return q;
    }
    let p_term = if state.hidden.contains(trip) {
        let blanket = state.hidden.markov_blanket(*trip);
        let sample = BlanketSample::draw(&blanket, |n| state.model.score_prob(n), rng);
        conditional_prob(trip, &blanket, &sample, &state.rules)
            .expect("blanket sample covers every neighbor")
    } else {
        0.5
    };
    q + lambda * p_term
}

/// Scores one candidate on its own deterministic stream so evaluation is
/// reproducible and independent of scoring order.
fn score_candidate(state: &TrainState, trip: &Triplet, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return state.model.score_prob(trip);
    }
    let parts = trip.seed_parts();
    let mut rng = seeds::rng(seeds::derive(
        state.seed,
        &[seeds::STREAM_EVAL, parts[0], parts[1], parts[2]],
    ));
    predict_score(state, trip, lambda, &mut rng)
}

fn rank_inner(
    state: &TrainState,
    query: &RankQuery,
    kg: &KnowledgeGraph,
    lambda: f64,
    filtered: bool,
) -> f64 {
    let answer_score = score_candidate(state, &query.known, lambda);
    let mut higher = 0u64;
    let mut ties = 0u64;
    for e in 0..kg.n_entities() as u32 {
        let cand = query.with_entity(EntityId(e));
        if cand == query.known {
            continue;
        }
        if filtered && kg.contains(&cand, SplitMask::ALL) {
            continue;
        }
        let s = score_candidate(state, &cand, lambda);
        if s > answer_score {
            higher += 1;
        } else if s == answer_score {
            ties += 1;
        }
    }
    1.0 + higher as f64 + ties as f64 / 2.0
}

/// Expected rank of the query's answer among all entity substitutions,
/// with known triplets other than the answer filtered out.
pub fn rank(state: &TrainState, query: &RankQuery, kg: &KnowledgeGraph, lambda: f64) -> f64 {
    rank_inner(state, query, kg, lambda, true)
}

/// Expected rank with no filtering; never smaller than the filtered rank.
pub fn rank_unfiltered(
    state: &TrainState,
    query: &RankQuery,
    kg: &KnowledgeGraph,
    lambda: f64,
) -> f64 {
    rank_inner(state, query, kg, lambda, false)
}

/// Hit rates at the conventional cutoffs, as fractions of queries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hits {
    #[serde(rename = "1")]
    pub h1: f64,
    #[serde(rename = "3")]
    pub h3: f64,
    #[serde(rename = "10")]
    pub h10: f64,
}

/// Ranking metrics over a query set. Serialized field order matches the
/// documented JSON shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mr: f64,
    pub mrr: f64,
    pub hits: Hits,
    pub n_queries: usize,
    pub lambda: f64,
}

impl Metrics {
    /// Aggregates expected ranks: MR is the mean rank, MRR the mean
    /// reciprocal rank, Hits@K the fraction with rank ≤ K.
    pub fn from_ranks(ranks: &[f64], lambda: f64) -> Metrics {
        assert!(!ranks.is_empty(), "metrics need at least one rank");
        let n = ranks.len() as f64;
        let frac_below = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Metrics {
            mr: ranks.iter().sum::<f64>() / n,
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits: Hits {
                h1: frac_below(1.0),
                h3: frac_below(3.0),
                h10: frac_below(10.0),
            },
            n_queries: ranks.len(),
            lambda,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics are always serializable")
    }
}

/// Filtered ranking metrics over both queries of every triplet in
/// `split`. Queries are scored in parallel; each candidate's stream is
/// derived from the triplet itself, so the result is independent of
/// thread count and scoring order.
pub fn evaluate(
    state: &TrainState,
    split: Split,
    kg: &KnowledgeGraph,
    lambda: f64,
) -> Result<Metrics> {
    if kg.split(split).is_empty() {
        return Err(Error::EmptySplit(split));
    }
    let queries = queries_for(kg, split);
    let ranks: Vec<f64> = queries
        .par_iter()
        .map(|q| rank(state, q, kg, lambda))
        .collect();
    Ok(Metrics::from_ranks(&ranks, lambda))
}
