//! First-order rule patterns over relations: candidate mining from the
//! training split, precision-based filtering, and the weighted rule set.
//!
//! All four patterns quantify universally over entity variables:
//!
//! * `Composition(ri, rj, rk)`: (x, ri, y) and (y, rj, z) imply (x, rk, z)
//! * `Inverse(ri, rj)`: (x, ri, y) implies (y, rj, x), with ri != rj
//! * `Symmetric(r)`: (x, r, y) implies (y, r, x)
//! * `Subrelation(ri, rj)`: (x, ri, y) implies (x, rj, y), with ri != rj
//!
//! A self-inverse candidate is reported as `Symmetric` and an identity
//! subrelation is skipped, so every logical statement has exactly one
//! canonical pattern.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, RelationId, SplitMask, Triplet};

/// A rule shape together with its relation arguments. The derived order
/// sorts by pattern kind first, then by relation ids.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum RulePattern {
    Composition(RelationId, RelationId, RelationId),
    Inverse(RelationId, RelationId),
    Symmetric(RelationId),
    Subrelation(RelationId, RelationId),
}

impl RulePattern {
    pub fn kind(&self) -> PatternKind {
        match self {
            RulePattern::Composition(..) => PatternKind::Composition,
            RulePattern::Inverse(..) => PatternKind::Inverse,
            RulePattern::Symmetric(..) => PatternKind::Symmetric,
            RulePattern::Subrelation(..) => PatternKind::Subrelation,
        }
    }

    pub fn n_premises(&self) -> usize {
        match self {
            RulePattern::Composition(..) => 2,
            _ => 1,
        }
    }

    /// Relation ids in argument order.
    pub fn relations(&self) -> Vec<RelationId> {
        match *self {
            RulePattern::Composition(a, b, c) => vec![a, b, c],
            RulePattern::Inverse(a, b) | RulePattern::Subrelation(a, b) => vec![a, b],
            RulePattern::Symmetric(a) => vec![a],
        }
    }

    /// The relation of the first premise atom; used to index rules by the
    /// relations that can trigger them.
    pub fn first_premise_relation(&self) -> RelationId {
        match *self {
            RulePattern::Composition(a, _, _)
            | RulePattern::Inverse(a, _)
            | RulePattern::Symmetric(a)
            | RulePattern::Subrelation(a, _) => a,
        }
    }
}

/// The four pattern shapes, without relation arguments.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum PatternKind {
    Composition,
    Inverse,
    Symmetric,
    Subrelation,
}

impl PatternKind {
    pub const ALL: [PatternKind; 4] = [
        PatternKind::Composition,
        PatternKind::Inverse,
        PatternKind::Symmetric,
        PatternKind::Subrelation,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            PatternKind::Composition => "COMPOSITION",
            PatternKind::Inverse => "INVERSE",
            PatternKind::Symmetric => "SYMMETRIC",
            PatternKind::Subrelation => "SUBRELATION",
        }
    }

    pub fn parse_tag(tag: &str) -> Option<PatternKind> {
        match tag {
            "COMPOSITION" => Some(PatternKind::Composition),
            "INVERSE" => Some(PatternKind::Inverse),
            "SYMMETRIC" => Some(PatternKind::Symmetric),
            "SUBRELATION" => Some(PatternKind::Subrelation),
            _ => None,
        }
    }

    fn bit(self) -> u8 {
        match self {
            PatternKind::Composition => 1,
            PatternKind::Inverse => 2,
            PatternKind::Symmetric => 4,
            PatternKind::Subrelation => 8,
        }
    }
}

/// Which pattern shapes a mining pass should consider.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PatternMask(u8);

impl PatternMask {
    pub const NONE: PatternMask = PatternMask(0);
    pub const ALL: PatternMask = PatternMask(15);

    pub fn of(kinds: &[PatternKind]) -> PatternMask {
        PatternMask(kinds.iter().fold(0, |acc, k| acc | k.bit()))
    }

    pub fn contains(self, kind: PatternKind) -> bool {
        self.0 & kind.bit() != 0
    }
}

/// A rule with its mined precision and current weight. `id` is the index
/// into the owning [`RuleSet`].
#[derive(Clone, Debug)]
pub struct Rule {
    pub id: u32,
    pub pattern: RulePattern,
    pub precision: f64,
    pub weight: f64,
}

/// How to initialize rule weights from mined precision.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum WeightInit {
    /// log(p / (1 - p)) with p clamped to [0.01, 0.99], result clamped to
    /// [-5, 5]. High-precision rules start strong instead of waiting for
    /// several weight updates to become influential.
    LogOdds,
    /// All weights start at zero.
    Zero,
}

impl WeightInit {
    fn weight(self, precision: f64) -> f64 {
        match self {
            WeightInit::Zero => 0.0,
            WeightInit::LogOdds => {
                let p = precision.clamp(0.01, 0.99);
                ((p / (1.0 - p)).ln()).clamp(-5.0, 5.0)
            }
        }
    }
}

/// Precision thresholds per pattern kind, falling back to `base`.
#[derive(Clone, Copy, Debug)]
pub struct RuleThresholds {
    pub base: f64,
    pub composition: Option<f64>,
    pub inverse: Option<f64>,
    pub symmetric: Option<f64>,
    pub subrelation: Option<f64>,
}

impl RuleThresholds {
    pub fn uniform(base: f64) -> Self {
        RuleThresholds {
            base,
            composition: None,
            inverse: None,
            symmetric: None,
            subrelation: None,
        }
    }

    pub fn for_kind(&self, kind: PatternKind) -> f64 {
        match kind {
            PatternKind::Composition => self.composition,
            PatternKind::Inverse => self.inverse,
            PatternKind::Symmetric => self.symmetric,
            PatternKind::Subrelation => self.subrelation,
        }
        .unwrap_or(self.base)
    }
}

/// An immutable collection of rules with mutable weights.
#[derive(Clone, Default)]
pub struct RuleSet {
    rules: Vec<Rule>,
    by_premise: HashMap<RelationId, Vec<u32>>,
}

impl RuleSet {
    /// Builds a set from rules sorted by pattern; ids are reassigned to
    /// match position.
    pub fn new(mut rules: Vec<Rule>) -> Self {
        rules.sort_by_key(|r| r.pattern);
        let mut by_premise: HashMap<RelationId, Vec<u32>> = HashMap::new();
        for (i, rule) in rules.iter_mut().enumerate() {
            rule.id = i as u32;
            by_premise
                .entry(rule.pattern.first_premise_relation())
                .or_default()
                .push(rule.id);
        }
        RuleSet { rules, by_premise }
    }

    pub fn empty() -> Self {
        RuleSet::default()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter()
    }

    pub fn get(&self, id: u32) -> &Rule {
        &self.rules[id as usize]
    }

    pub fn weight(&self, id: u32) -> f64 {
        self.rules[id as usize].weight
    }

    pub fn set_weight(&mut self, id: u32, weight: f64) {
        self.rules[id as usize].weight = weight;
    }

    /// Ids of rules whose first premise relation is `r`.
    pub fn with_first_premise(&self, r: RelationId) -> &[u32] {
        self.by_premise.get(&r).map_or(&[], Vec::as_slice)
    }

    /// Writes one rule per line: pattern tag, space-joined relation names,
    /// precision, weight, tab-separated. Line order is id order.
    pub fn write_tsv(&self, kg: &KnowledgeGraph, mut w: impl Write) -> std::io::Result<()> {
        for rule in &self.rules {
            let names: Vec<&str> = rule
                .pattern
                .relations()
                .iter()
                .map(|&r| kg.relation_name(r))
                .collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                rule.pattern.kind().tag(),
                names.join(" "),
                rule.precision,
                rule.weight
            )?;
        }
        Ok(())
    }

    /// Parses the format written by [`RuleSet::write_tsv`]. Ids follow line
    /// order, which preserves them across a save/load round trip.
    pub fn read_tsv(kg: &KnowledgeGraph, r: impl BufRead) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::MalformedRule {
                line: i + 1,
                reason: e.to_string(),
            })?;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::MalformedRule {
                    line: i + 1,
                    reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            let kind = PatternKind::parse_tag(fields[0]).ok_or_else(|| Error::MalformedRule {
                line: i + 1,
                reason: format!("unknown pattern tag {:?}", fields[0]),
            })?;
            let rels: Vec<RelationId> = fields[1]
                .split(' ')
                .map(|name| kg.relation_id(name))
                .collect::<Result<_>>()?;
            let expected = match kind {
                PatternKind::Composition => 3,
                PatternKind::Symmetric => 1,
                _ => 2,
            };
            if rels.len() != expected {
                return Err(Error::MalformedRule {
                    line: i + 1,
                    reason: format!("expected {expected} relations, found {}", rels.len()),
                });
            }
            let pattern = match kind {
                PatternKind::Composition => RulePattern::Composition(rels[0], rels[1], rels[2]),
                PatternKind::Inverse => RulePattern::Inverse(rels[0], rels[1]),
                PatternKind::Symmetric => RulePattern::Symmetric(rels[0]),
                PatternKind::Subrelation => RulePattern::Subrelation(rels[0], rels[1]),
            };
            let parse_f64 = |s: &str, what: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::MalformedRule {
                    line: i + 1,
                    reason: format!("cannot parse {what} {s:?}"),
                })
            };
            rules.push(Rule {
                id: rules.len() as u32,
                pattern,
                precision: parse_f64(fields[2], "precision")?,
                weight: parse_f64(fields[3], "weight")?,
            });
        }
        let mut by_premise: HashMap<RelationId, Vec<u32>> = HashMap::new();
        for rule in &rules {
            by_premise
                .entry(rule.pattern.first_premise_relation())
                .or_default()
                .push(rule.id);
        }
        Ok(RuleSet { rules, by_premise })
    }
}

/// Enumerates candidate patterns whose support (count of groundings with
/// premises and hypothesis all observed in train) reaches `min_support`.
/// Candidates are found by walking observed adjacency, so only patterns
/// with at least one fully observed grounding are ever touched; the result
/// is sorted by (pattern kind, relation ids).
pub fn mine_candidate_rules(
    kg: &KnowledgeGraph,
    patterns: PatternMask,
    min_support: u64,
) -> Vec<(RulePattern, u64)> {
    let mut support: BTreeMap<RulePattern, u64> = BTreeMap::new();

    // Relations observed between each ordered entity pair.
    let mut rels_between: HashMap<(crate::kg::EntityId, crate::kg::EntityId), Vec<RelationId>> =
        HashMap::new();
    if patterns.contains(PatternKind::Inverse) || patterns.contains(PatternKind::Subrelation) {
        for t in kg.train() {
            rels_between
                .entry((t.head, t.tail))
                .or_default()
                .push(t.relation);
        }
    }

    for t in kg.train() {
        if patterns.contains(PatternKind::Symmetric)
            && kg.contains(
                &Triplet::new(t.tail, t.relation, t.head),
                SplitMask::TRAIN,
            )
        {
            *support.entry(RulePattern::Symmetric(t.relation)).or_default() += 1;
        }
        if patterns.contains(PatternKind::Inverse) {
            if let Some(back) = rels_between.get(&(t.tail, t.head)) {
                for &rj in back {
                    if rj != t.relation {
                        *support
                            .entry(RulePattern::Inverse(t.relation, rj))
                            .or_default() += 1;
                    }
                }
            }
        }
        if patterns.contains(PatternKind::Subrelation) {
            if let Some(along) = rels_between.get(&(t.head, t.tail)) {
                for &rj in along {
                    if rj != t.relation {
                        *support
                            .entry(RulePattern::Subrelation(t.relation, rj))
                            .or_default() += 1;
                    }
                }
            }
        }
    }

    if patterns.contains(PatternKind::Composition) {
        for first in kg.train() {
            for &(rj, z) in kg.edges_from(first.tail) {
                for &(rk, z2) in kg.edges_from(first.head) {
                    if z2 == z {
                        *support
                            .entry(RulePattern::Composition(first.relation, rj, rk))
                            .or_default() += 1;
                    }
                }
            }
        }
    }

    support.retain(|_, &mut s| s >= min_support);
    support.into_iter().collect()
}

/// Distinct hypotheses derivable from fully observed premises in train.
fn derivable_hypotheses(pattern: &RulePattern, kg: &KnowledgeGraph) -> HashSet<Triplet> {
    let mut out = HashSet::new();
    match *pattern {
        RulePattern::Symmetric(r) => {
            for &(h, t) in kg.pairs_of(r) {
                out.insert(Triplet::new(t, r, h));
            }
        }
        RulePattern::Inverse(ri, rj) => {
            for &(h, t) in kg.pairs_of(ri) {
                out.insert(Triplet::new(t, rj, h));
            }
        }
        RulePattern::Subrelation(ri, rj) => {
            for &(h, t) in kg.pairs_of(ri) {
                out.insert(Triplet::new(h, rj, t));
            }
        }
        RulePattern::Composition(ri, rj, rk) => {
            for &(x, y) in kg.pairs_of(ri) {
                for &z in kg.tails_of(y, rj) {
                    out.insert(Triplet::new(x, rk, z));
                }
            }
        }
    }
    out
}

/// Fraction of a pattern's distinct derivable hypotheses that are observed
/// in train. Errors if the pattern derives nothing at all.
pub fn empirical_precision(pattern: &RulePattern, kg: &KnowledgeGraph) -> Result<f64> {
    let hypotheses = derivable_hypotheses(pattern, kg);
    if hypotheses.is_empty() {
        return Err(Error::EmptyHypothesisSet);
    }
    let observed = hypotheses
        .iter()
        .filter(|t| kg.contains(t, SplitMask::TRAIN))
        .count();
    Ok(observed as f64 / hypotheses.len() as f64)
}

/// Keeps candidates whose precision reaches the per-kind threshold and
/// initializes weights. The result keeps the mined (kind, relation ids)
/// order.
pub fn filter_rules(
    candidates: &[(RulePattern, u64)],
    kg: &KnowledgeGraph,
    thresholds: &RuleThresholds,
    init: WeightInit,
) -> Result<RuleSet> {
    let mut rules = Vec::new();
    for (pattern, _support) in candidates {
        let precision = empirical_precision(pattern, kg)?;
        if precision >= thresholds.for_kind(pattern.kind()) {
            rules.push(Rule {
                id: 0,
                pattern: *pattern,
                precision,
                weight: init.weight(precision),
            });
        }
    }
    Ok(RuleSet::new(rules))
}

/// Support counts recomputed the slow way, used to cross-check the miner.
#[cfg(test)]
pub(crate) fn exhaustive_support(
    kg: &KnowledgeGraph,
    patterns: PatternMask,
) -> BTreeMap<RulePattern, u64> {
    let mut support: BTreeMap<RulePattern, u64> = BTreeMap::new();
    let in_train = |h, r, t| kg.contains(&Triplet::new(h, r, t), SplitMask::TRAIN);
    let rels: Vec<RelationId> = (0..kg.n_relations() as u32).map(RelationId).collect();
    let mut bump = |p: RulePattern, hit: bool| {
        if hit {
            *support.entry(p).or_default() += 1;
        }
    };
    for t in kg.train() {
        for &r2 in &rels {
            if patterns.contains(PatternKind::Symmetric) && r2 == t.relation {
                bump(
                    RulePattern::Symmetric(r2),
                    in_train(t.tail, r2, t.head),
                );
            }
            if patterns.contains(PatternKind::Inverse) && r2 != t.relation {
                bump(
                    RulePattern::Inverse(t.relation, r2),
                    in_train(t.tail, r2, t.head),
                );
            }
            if patterns.contains(PatternKind::Subrelation) && r2 != t.relation {
                bump(
                    RulePattern::Subrelation(t.relation, r2),
                    in_train(t.head, r2, t.tail),
                );
            }
        }
        if patterns.contains(PatternKind::Composition) {
            for second in kg.train() {
                if second.head != t.tail {
                    continue;
                }
                for &rk in &rels {
                    bump(
                        RulePattern::Composition(t.relation, second.relation, rk),
                        in_train(t.head, rk, second.tail),
                    );
                }
            }
        }
    }
    support
}
