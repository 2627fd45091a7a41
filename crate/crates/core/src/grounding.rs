//! Rule groundings and the hidden triplet set.
//!
//! A grounding instantiates a rule's entity variables with concrete
//! entities such that every premise atom is observed in train. Hypotheses
//! that are not themselves in train become the hidden triplet set; each
//! hidden triplet is a latent variable whose Markov blanket consists of the
//! other atoms of every grounding it appears in.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::kg::{KnowledgeGraph, SplitMask, Triplet};
use crate::rules::{Rule, RulePattern, RuleSet};
use crate::seeds;

/// One rule instantiation: premises are observed in train, the hypothesis
/// may be observed or hidden.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct Grounding {
    pub rule_id: u32,
    // Unary rules duplicate their premise in the second slot; only the
    // first n_premises entries are visible through premises().
    premise_slots: [Triplet; 2],
    n_premises: u8,
    pub hypothesis: Triplet,
}

impl Grounding {
    pub fn unary(rule_id: u32, premise: Triplet, hypothesis: Triplet) -> Self {
        Grounding {
            rule_id,
            premise_slots: [premise, premise],
            n_premises: 1,
            hypothesis,
        }
    }

    pub fn binary(rule_id: u32, first: Triplet, second: Triplet, hypothesis: Triplet) -> Self {
        Grounding {
            rule_id,
            premise_slots: [first, second],
            n_premises: 2,
            hypothesis,
        }
    }

    pub fn premises(&self) -> &[Triplet] {
        &self.premise_slots[..self.n_premises as usize]
    }

    /// All atoms, premises first.
    pub fn atoms(&self) -> impl Iterator<Item = Triplet> + '_ {
        self.premises()
            .iter()
            .copied()
            .chain(std::iter::once(self.hypothesis))
    }

    pub fn mentions(&self, t: &Triplet) -> bool {
        self.premises().contains(t) || self.hypothesis == *t
    }

    /// Truth of the implication under a total assignment. An implication
    /// holds unless all premises are true and the hypothesis is false.
    pub fn holds_under(&self, mut value: impl FnMut(Triplet) -> bool) -> bool {
        self.premises().iter().any(|p| !value(*p)) || value(self.hypothesis)
    }
}

fn instantiate_rule(rule: &Rule, kg: &KnowledgeGraph) -> Vec<Grounding> {
    let mut out = Vec::new();
    match rule.pattern {
        RulePattern::Symmetric(r) => {
            for &(h, t) in kg.pairs_of(r) {
                out.push(Grounding::unary(
                    rule.id,
                    Triplet::new(h, r, t),
                    Triplet::new(t, r, h),
                ));
            }
        }
        RulePattern::Inverse(ri, rj) => {
            for &(h, t) in kg.pairs_of(ri) {
                out.push(Grounding::unary(
                    rule.id,
                    Triplet::new(h, ri, t),
                    Triplet::new(t, rj, h),
                ));
            }
        }
        RulePattern::Subrelation(ri, rj) => {
            for &(h, t) in kg.pairs_of(ri) {
                out.push(Grounding::unary(
                    rule.id,
                    Triplet::new(h, ri, t),
                    Triplet::new(h, rj, t),
                ));
            }
        }
        RulePattern::Composition(ri, rj, rk) => {
            for &(x, y) in kg.pairs_of(ri) {
                for &z in kg.tails_of(y, rj) {
                    out.push(Grounding::binary(
                        rule.id,
                        Triplet::new(x, ri, y),
                        Triplet::new(y, rj, z),
                        Triplet::new(x, rk, z),
                    ));
                }
            }
        }
    }
    out
}

/// Enumerates every grounding of every rule whose premises are all in
/// train. The result is sorted by (rule id, premises, hypothesis) and
/// duplicate-free (rule instantiations are distinct by construction).
pub fn enumerate_groundings(kg: &KnowledgeGraph, rules: &RuleSet) -> Vec<Grounding> {
    let mut all: Vec<Grounding> = rules
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .flat_map_iter(|rule| instantiate_rule(rule, kg))
        .collect();
    all.sort_unstable();
    all
}

/// A hidden triplet together with the groundings that touch it: the
/// conditional distribution of the center given the rest of the graph
/// depends exactly on these groundings' other atoms.
#[derive(Clone, Debug)]
pub struct MarkovBlanket {
    pub center: Triplet,
    /// Other atoms of the touching groundings, sorted and deduplicated.
    /// The flag is true when the neighbor is observed in train.
    pub neighbors: Vec<(Triplet, bool)>,
    /// The groundings mentioning the center, in grounding-list order.
    pub groundings: Vec<Grounding>,
}

/// The closure of rule hypotheses not observed in train, plus indices from
/// triplets to the groundings that mention them.
#[derive(Clone)]
pub struct HiddenTripletSet {
    hidden: Vec<Triplet>,
    hidden_index: HashMap<Triplet, u32>,
    groundings: Vec<Grounding>,
    by_hypothesis: HashMap<Triplet, Vec<u32>>,
    by_member: HashMap<Triplet, Vec<u32>>,
}

impl HiddenTripletSet {
    /// Partitions grounding hypotheses into observed and hidden. Groundings
    /// whose hypothesis is observed still participate in blankets (their
    /// premises may need conditioning information), so they are kept.
    pub fn build(groundings: Vec<Grounding>, kg: &KnowledgeGraph) -> Self {
        Self::build_capped(groundings, kg, None, 0)
    }

    /// Like [`HiddenTripletSet::build`] but caps the number of distinct
    /// hidden triplets. When the cap binds, groundings are admitted in a
    /// seeded random order and those introducing hidden hypotheses beyond
    /// the cap are dropped with a warning.
    pub fn build_capped(
        mut groundings: Vec<Grounding>,
        kg: &KnowledgeGraph,
        cap: Option<usize>,
        seed: u64,
    ) -> Self {
        groundings.sort_unstable();
        groundings.dedup();

        if let Some(cap) = cap {
            let mut hidden_count = 0usize;
            let mut admitted: HashMap<Triplet, bool> = HashMap::new();
            let mut order: Vec<usize> = (0..groundings.len()).collect();
            let mut rng = seeds::rng(seeds::derive(seed, &[seeds::STREAM_HIDDEN_CAP]));
            order.shuffle(&mut rng);
            let mut keep = vec![false; groundings.len()];
            let mut dropped = 0usize;
            for idx in order {
                let hyp = groundings[idx].hypothesis;
                if kg.contains(&hyp, SplitMask::TRAIN) {
                    keep[idx] = true;
                    continue;
                }
                let admit = match admitted.get(&hyp) {
                    Some(&a) => a,
                    None => {
                        let a = hidden_count < cap;
                        if a {
                            hidden_count += 1;
                        }
                        admitted.insert(hyp, a);
                        a
                    }
                };
                if admit {
                    keep[idx] = true;
                } else {
                    dropped += 1;
                }
            }
            if dropped > 0 {
                log::warn!(
                    "hidden triplet cap {cap} reached: dropped {dropped} groundings \
                     ({} hidden triplets kept)",
                    hidden_count
                );
                let mut i = 0;
                groundings.retain(|_| {
                    let k = keep[i];
                    i += 1;
                    k
                });
            }
        }

        let mut hidden: Vec<Triplet> = Vec::new();
        let mut hidden_index: HashMap<Triplet, u32> = HashMap::new();
        let mut by_hypothesis: HashMap<Triplet, Vec<u32>> = HashMap::new();
        let mut by_member: HashMap<Triplet, Vec<u32>> = HashMap::new();
        for (i, g) in groundings.iter().enumerate() {
            let i = i as u32;
            if !kg.contains(&g.hypothesis, SplitMask::TRAIN)
                && !hidden_index.contains_key(&g.hypothesis)
            {
                hidden_index.insert(g.hypothesis, 0);
                hidden.push(g.hypothesis);
            }
            by_hypothesis.entry(g.hypothesis).or_default().push(i);
            let mut seen_atoms: [Option<Triplet>; 3] = [None; 3];
            for (slot, atom) in g.atoms().enumerate() {
                // A grounding can mention the same triplet twice (e.g. a
                // composition whose premise equals its hypothesis); index
                // it once per grounding.
                if seen_atoms[..slot].iter().flatten().any(|&a| a == atom) {
                    continue;
                }
                seen_atoms[slot] = Some(atom);
                by_member.entry(atom).or_default().push(i);
            }
        }
        hidden.sort_unstable();
        for (i, t) in hidden.iter().enumerate() {
            hidden_index.insert(*t, i as u32);
        }
        HiddenTripletSet {
            hidden,
            hidden_index,
            groundings,
            by_hypothesis,
            by_member,
        }
    }

    /// Hidden triplets in sorted order.
    pub fn hidden(&self) -> &[Triplet] {
        &self.hidden
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.hidden_index.contains_key(t)
    }

    pub fn groundings(&self) -> &[Grounding] {
        &self.groundings
    }

    pub fn grounding(&self, id: u32) -> &Grounding {
        &self.groundings[id as usize]
    }

    /// Groundings whose hypothesis is `t`.
    pub fn deriving(&self, t: &Triplet) -> &[u32] {
        self.by_hypothesis.get(t).map_or(&[], Vec::as_slice)
    }

    /// Groundings mentioning `t` as premise or hypothesis.
    pub fn mentioning(&self, t: &Triplet) -> &[u32] {
        self.by_member.get(t).map_or(&[], Vec::as_slice)
    }

    /// Triplets that appear in at least one grounding, sorted. These are
    /// the pseudolikelihood centers.
    pub fn members(&self) -> Vec<Triplet> {
        let mut out: Vec<Triplet> = self.by_member.keys().copied().collect();
        out.sort_unstable();
        out
    }

    /// Assembles the Markov blanket of a triplet. Every atom of every
    /// grounding mentioning the center, except the center itself, is a
    /// neighbor; a neighbor is observed exactly when it is not hidden,
    /// since all grounding atoms lie in train or in the hidden set.
    pub fn markov_blanket(&self, center: Triplet) -> MarkovBlanket {
        let groundings: Vec<Grounding> = self
            .mentioning(&center)
            .iter()
            .map(|&gid| self.groundings[gid as usize])
            .collect();
        let mut neighbors: Vec<(Triplet, bool)> = Vec::new();
        for g in &groundings {
            for atom in g.atoms() {
                if atom != center {
                    neighbors.push((atom, !self.contains(&atom)));
                }
            }
        }
        neighbors.sort_unstable();
        neighbors.dedup();
        MarkovBlanket {
            center,
            neighbors,
            groundings,
        }
    }

    /// Writes hidden triplets as `head relation tail n_groundings`
    /// (tab-separated), one per line, where the count is the number of
    /// groundings deriving the triplet.
    pub fn write_tsv(&self, kg: &KnowledgeGraph, mut w: impl Write) -> std::io::Result<()> {
        for t in &self.hidden {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                kg.entity_name(t.head),
                kg.relation_name(t.relation),
                kg.entity_name(t.tail),
                self.deriving(t).len()
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EntityId, RelationId};
    use crate::rules::{Rule, RulePattern};

    fn t(h: u32, r: u32, tl: u32) -> Triplet {
        Triplet::new(EntityId(h), RelationId(r), EntityId(tl))
    }

    fn kg_from(train: &[(u32, u32, u32)]) -> KnowledgeGraph {
        let max_e = train.iter().flat_map(|&(h, _, t)| [h, t]).max().unwrap();
        let max_r = train.iter().map(|&(_, r, _)| r).max().unwrap();
        KnowledgeGraph::from_parts(
            (0..=max_e).map(|i| format!("e{i}")).collect(),
            (0..=max_r).map(|i| format!("r{i}")).collect(),
            train
                .iter()
                .map(|&(h, r, tl)| t(h, r, tl))
                .collect(),
            vec![],
            vec![],
        )
    }

    fn rule_set(patterns: &[RulePattern]) -> RuleSet {
        RuleSet::new(
            patterns
                .iter()
                .map(|&pattern| Rule {
                    id: 0,
                    pattern,
                    precision: 0.5,
                    weight: 1.0,
                })
                .collect(),
        )
    }

    #[test]
    fn enumerates_symmetric_and_composition_groundings() {
        let kg = kg_from(&[(0, 0, 1), (1, 1, 2), (0, 2, 2)]);
        let rules = rule_set(&[
            RulePattern::Symmetric(RelationId(0)),
            RulePattern::Composition(RelationId(0), RelationId(1), RelationId(2)),
        ]);
        let gs = enumerate_groundings(&kg, &rules);
        assert_eq!(gs.len(), 2);
        // Sorted by rule id: composition rule sorts before symmetric.
        assert_eq!(gs[0].premises(), &[t(0, 0, 1), t(1, 1, 2)]);
        assert_eq!(gs[0].hypothesis, t(0, 2, 2));
        assert_eq!(gs[1].premises(), &[t(0, 0, 1)]);
        assert_eq!(gs[1].hypothesis, t(1, 0, 0));
    }

    #[test]
    fn hidden_set_excludes_observed_hypotheses_but_keeps_their_groundings() {
        // (1,0,0) hidden; (0,2,2) observed hypothesis of the composition.
        let kg = kg_from(&[(0, 0, 1), (1, 1, 2), (0, 2, 2)]);
        let rules = rule_set(&[
            RulePattern::Symmetric(RelationId(0)),
            RulePattern::Composition(RelationId(0), RelationId(1), RelationId(2)),
        ]);
        let hs = HiddenTripletSet::build(enumerate_groundings(&kg, &rules), &kg);
        assert_eq!(hs.hidden(), &[t(1, 0, 0)]);
        assert!(hs.contains(&t(1, 0, 0)));
        assert!(!hs.contains(&t(0, 2, 2)));
        assert_eq!(hs.groundings().len(), 2);
        assert_eq!(hs.deriving(&t(0, 2, 2)).len(), 1);
        assert_eq!(hs.deriving(&t(1, 0, 0)).len(), 1);
    }

    #[test]
    fn blanket_contains_co_members_with_observed_flags() {
        // Composition premises (0,0,1), (1,1,2) with hidden hypothesis
        // (0,2,2); symmetric rule makes (1,0,0) hidden too.
        let kg = kg_from(&[(0, 0, 1), (1, 1, 2)]);
        let rules = rule_set(&[
            RulePattern::Symmetric(RelationId(0)),
            RulePattern::Composition(RelationId(0), RelationId(1), RelationId(2)),
        ]);
        let hs = HiddenTripletSet::build(enumerate_groundings(&kg, &rules), &kg);
        assert_eq!(hs.hidden(), &[t(0, 2, 2), t(1, 0, 0)]);

        let mb = hs.markov_blanket(t(0, 2, 2));
        assert_eq!(mb.center, t(0, 2, 2));
        assert_eq!(mb.neighbors, vec![(t(0, 0, 1), true), (t(1, 1, 2), true)]);
        assert_eq!(mb.groundings.len(), 1);

        // The premise (0,0,1) sits in two groundings; its blanket holds
        // both hypotheses and the other composition premise.
        let mb = hs.markov_blanket(t(0, 0, 1));
        assert_eq!(
            mb.neighbors,
            vec![
                (t(0, 2, 2), false),
                (t(1, 0, 0), false),
                (t(1, 1, 2), true)
            ]
        );
        assert_eq!(mb.groundings.len(), 2);
    }

    #[test]
    fn blanket_of_untouched_triplet_is_empty() {
        let kg = kg_from(&[(0, 0, 1)]);
        let rules = rule_set(&[RulePattern::Symmetric(RelationId(0))]);
        let hs = HiddenTripletSet::build(enumerate_groundings(&kg, &rules), &kg);
        let mb = hs.markov_blanket(t(5, 0, 5));
        assert!(mb.neighbors.is_empty());
        assert!(mb.groundings.is_empty());
    }

    #[test]
    fn members_are_sorted_union_of_grounding_atoms() {
        let kg = kg_from(&[(0, 0, 1), (1, 1, 2)]);
        let rules = rule_set(&[RulePattern::Composition(
            RelationId(0),
            RelationId(1),
            RelationId(2),
        )]);
        let hs = HiddenTripletSet::build(enumerate_groundings(&kg, &rules), &kg);
        assert_eq!(hs.members(), vec![t(0, 0, 1), t(0, 2, 2), t(1, 1, 2)]);
    }

    #[test]
    fn holds_under_implements_material_implication() {
        let g = Grounding::binary(0, t(0, 0, 1), t(1, 1, 2), t(0, 2, 2));
        // All premises true, hypothesis false: violated.
        assert!(!g.holds_under(|x| x != t(0, 2, 2)));
        // A false premise satisfies the implication vacuously.
        assert!(g.holds_under(|x| x == t(1, 1, 2)));
        // Everything true.
        assert!(g.holds_under(|_| true));
        // Everything false: vacuously true.
        assert!(g.holds_under(|_| false));
    }

    #[test]
    fn degenerate_grounding_indexes_shared_atom_once() {
        // Symmetric rule on a self-loop: premise equals hypothesis.
        let kg = kg_from(&[(0, 0, 0)]);
        let rules = rule_set(&[RulePattern::Symmetric(RelationId(0))]);
        let gs = enumerate_groundings(&kg, &rules);
        assert_eq!(gs.len(), 1);
        let hs = HiddenTripletSet::build(gs, &kg);
        assert_eq!(hs.mentioning(&t(0, 0, 0)), &[0]);
        assert!(hs.hidden().is_empty());
    }

    #[test]
    fn cap_limits_hidden_triplets_deterministically() {
        let train: Vec<(u32, u32, u32)> = (0..30).map(|i| (2 * i, 0, 2 * i + 1)).collect();
        let kg = kg_from(&train);
        let rules = rule_set(&[RulePattern::Symmetric(RelationId(0))]);
        let gs = enumerate_groundings(&kg, &rules);
        assert_eq!(gs.len(), 30);
        let capped = HiddenTripletSet::build_capped(gs.clone(), &kg, Some(10), 7);
        assert_eq!(capped.len(), 10);
        assert_eq!(capped.groundings().len(), 10);
        let again = HiddenTripletSet::build_capped(gs.clone(), &kg, Some(10), 7);
        assert_eq!(capped.hidden(), again.hidden());
        let other_seed = HiddenTripletSet::build_capped(gs.clone(), &kg, Some(10), 8);
        assert_ne!(capped.hidden(), other_seed.hidden());
        // A cap larger than the hidden set changes nothing.
        let loose = HiddenTripletSet::build_capped(gs, &kg, Some(1000), 7);
        assert_eq!(loose.len(), 30);
    }

    #[test]
    fn write_tsv_emits_names_in_sorted_order() {
        let kg = kg_from(&[(1, 0, 2), (0, 0, 1)]);
        let rules = rule_set(&[RulePattern::Symmetric(RelationId(0))]);
        let hs = HiddenTripletSet::build(enumerate_groundings(&kg, &rules), &kg);
        let mut buf = Vec::new();
        hs.write_tsv(&kg, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "e1\tr0\te0\t1\ne2\tr0\te1\t1\n"
        );
    }
}
