//! Triplet store: vocabularies, train/valid/test splits, and adjacency
//! indices over the training split.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense entity identifier, assigned in first-appearance order while
/// loading train, then valid, then test.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct EntityId(pub u32);

/// Dense relation identifier, same assignment order as [`EntityId`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct RelationId(pub u32);

/// A directed labeled edge (head, relation, tail).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triplet {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triplet {
            head,
            relation,
            tail,
        }
    }

    /// Identifying parts for seed derivation.
    pub fn seed_parts(&self) -> [u64; 3] {
        [
            self.head.0 as u64,
            self.relation.0 as u64,
            self.tail.0 as u64,
        ]
    }
}

impl fmt::Debug for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head.0, self.relation.0, self.tail.0)
    }
}

/// One of the three dataset splits.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn bit(self) -> u8 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 4,
        }
    }
}

/// A set of splits, used to scope membership queries.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SplitMask(u8);

impl SplitMask {
    pub const EMPTY: SplitMask = SplitMask(0);
    pub const TRAIN: SplitMask = SplitMask(1);
    pub const VALID: SplitMask = SplitMask(2);
    pub const TEST: SplitMask = SplitMask(4);
    pub const ALL: SplitMask = SplitMask(7);

    pub fn contains(self, split: Split) -> bool {
        self.0 & split.bit() != 0
    }
}

impl std::ops::BitOr for SplitMask {
    type Output = SplitMask;
    fn bitor(self, rhs: SplitMask) -> SplitMask {
        SplitMask(self.0 | rhs.0)
    }
}

/// Interned string table mapping names to dense ids and back.
#[derive(Clone, Default)]
pub struct Vocabulary {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Names in id order.
    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Duplicate triplets dropped while loading, per split.
#[derive(Clone, Copy, Default, Debug)]
pub struct LoadStats {
    pub duplicates_train: usize,
    pub duplicates_valid: usize,
    pub duplicates_test: usize,
}

/// Immutable triplet store. Adjacency indices cover the training split
/// only; valid and test are reachable through membership tests and the
/// split accessors.
pub struct KnowledgeGraph {
    entities: Vocabulary,
    relations: Vocabulary,
    train: Vec<Triplet>,
    valid: Vec<Triplet>,
    test: Vec<Triplet>,
    train_set: HashSet<Triplet>,
    valid_set: HashSet<Triplet>,
    test_set: HashSet<Triplet>,
    tails_by_head_rel: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    heads_by_tail_rel: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    pairs_by_relation: HashMap<RelationId, Vec<(EntityId, EntityId)>>,
    edges_by_head: HashMap<EntityId, Vec<(RelationId, EntityId)>>,
    stats: LoadStats,
}

impl fmt::Debug for KnowledgeGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnowledgeGraph")
            .field("n_entities", &self.entities.len())
            .field("n_relations", &self.relations.len())
            .field("train", &self.train.len())
            .field("valid", &self.valid.len())
            .field("test", &self.test.len())
            .finish_non_exhaustive()
    }
}

impl KnowledgeGraph {
    /// Loads `train.txt`, `valid.txt`, and `test.txt` from a directory.
    /// Each line holds three tab-separated fields: head, relation, tail.
    /// Duplicates (within a file or across files, in load order) are
    /// dropped with a warning so the splits stay pairwise disjoint.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut entities = Vocabulary::default();
        let mut relations = Vocabulary::default();
        let mut seen = HashSet::new();
        let mut stats = LoadStats::default();

        let mut read_split = |file: &str, dups: &mut usize| -> Result<Vec<Triplet>> {
            let path = dir.join(file);
            let reader =
                BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?);
            let mut triplets = Vec::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                let line = line.strip_suffix('\r').unwrap_or(&line);
                let mut fields = line.split('\t');
                let (h, r, t) = match (fields.next(), fields.next(), fields.next(), fields.next())
                {
                    (Some(h), Some(r), Some(t), None) => (h, r, t),
                    _ => {
                        return Err(Error::MalformedTriplet {
                            path: path.clone(),
                            line: i + 1,
                            found: line.split('\t').count(),
                        })
                    }
                };
                let triplet = Triplet::new(
                    EntityId(entities.intern(h)),
                    RelationId(relations.intern(r)),
                    EntityId(entities.intern(t)),
                );
                if seen.insert(triplet) {
                    triplets.push(triplet);
                } else {
                    *dups += 1;
                }
            }
            Ok(triplets)
        };

        let train = read_split("train.txt", &mut stats.duplicates_train)?;
        let valid = read_split("valid.txt", &mut stats.duplicates_valid)?;
        let test = read_split("test.txt", &mut stats.duplicates_test)?;

        let dropped = stats.duplicates_train + stats.duplicates_valid + stats.duplicates_test;
        if dropped > 0 {
            log::warn!(
                "dropped {dropped} duplicate triplets while loading {} \
                 (train {}, valid {}, test {})",
                dir.display(),
                stats.duplicates_train,
                stats.duplicates_valid,
                stats.duplicates_test
            );
        }

        Ok(Self::assemble(entities, relations, train, valid, test, stats))
    }

    /// Builds a graph from already-interned parts. Triplet ids must be
    /// consistent with the name tables; splits must be pairwise disjoint
    /// and individually duplicate-free.
    pub fn from_parts(
        entity_names: Vec<String>,
        relation_names: Vec<String>,
        train: Vec<Triplet>,
        valid: Vec<Triplet>,
        test: Vec<Triplet>,
    ) -> Self {
        let mut entities = Vocabulary::default();
        for name in &entity_names {
            entities.intern(name);
        }
        let mut relations = Vocabulary::default();
        for name in &relation_names {
            relations.intern(name);
        }
        assert_eq!(entities.len(), entity_names.len(), "duplicate entity name");
        assert_eq!(
            relations.len(),
            relation_names.len(),
            "duplicate relation name"
        );
        Self::assemble(entities, relations, train, valid, test, LoadStats::default())
    }

    fn assemble(
        entities: Vocabulary,
        relations: Vocabulary,
        train: Vec<Triplet>,
        valid: Vec<Triplet>,
        test: Vec<Triplet>,
        stats: LoadStats,
    ) -> Self {
        let mut tails_by_head_rel: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        let mut heads_by_tail_rel: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        let mut pairs_by_relation: HashMap<RelationId, Vec<(EntityId, EntityId)>> = HashMap::new();
        let mut edges_by_head: HashMap<EntityId, Vec<(RelationId, EntityId)>> = HashMap::new();
        for t in &train {
            tails_by_head_rel
                .entry((t.head, t.relation))
                .or_default()
                .push(t.tail);
            heads_by_tail_rel
                .entry((t.tail, t.relation))
                .or_default()
                .push(t.head);
            pairs_by_relation
                .entry(t.relation)
                .or_default()
                .push((t.head, t.tail));
            edges_by_head
                .entry(t.head)
                .or_default()
                .push((t.relation, t.tail));
        }
        KnowledgeGraph {
            train_set: train.iter().copied().collect(),
            valid_set: valid.iter().copied().collect(),
            test_set: test.iter().copied().collect(),
            entities,
            relations,
            train,
            valid,
            test,
            tails_by_head_rel,
            heads_by_tail_rel,
            pairs_by_relation,
            edges_by_head,
            stats,
        }
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> &Vocabulary {
        &self.entities
    }

    pub fn relations(&self) -> &Vocabulary {
        &self.relations
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        self.entities.name(id.0)
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        self.relations.name(id.0)
    }

    pub fn entity_id(&self, name: &str) -> Result<EntityId> {
        self.entities
            .id(name)
            .map(EntityId)
            .ok_or_else(|| Error::UnknownEntity(name.to_owned()))
    }

    pub fn relation_id(&self, name: &str) -> Result<RelationId> {
        self.relations
            .id(name)
            .map(RelationId)
            .ok_or_else(|| Error::UnknownRelation(name.to_owned()))
    }

    pub fn split(&self, split: Split) -> &[Triplet] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn train(&self) -> &[Triplet] {
        &self.train
    }

    pub fn load_stats(&self) -> LoadStats {
        self.stats
    }

    /// Membership test scoped to the given splits.
    pub fn contains(&self, triplet: &Triplet, mask: SplitMask) -> bool {
        (mask.contains(Split::Train) && self.train_set.contains(triplet))
            || (mask.contains(Split::Valid) && self.valid_set.contains(triplet))
            || (mask.contains(Split::Test) && self.test_set.contains(triplet))
    }

    /// Tails t with (h, r, t) in train, in train file order.
    pub fn tails_of(&self, head: EntityId, relation: RelationId) -> &[EntityId] {
        self.tails_by_head_rel
            .get(&(head, relation))
            .map_or(&[], Vec::as_slice)
    }

    /// Heads h with (h, r, t) in train, in train file order.
    pub fn heads_of(&self, tail: EntityId, relation: RelationId) -> &[EntityId] {
        self.heads_by_tail_rel
            .get(&(tail, relation))
            .map_or(&[], Vec::as_slice)
    }

    /// All (head, tail) pairs of a relation in train, in train file order.
    pub fn pairs_of(&self, relation: RelationId) -> &[(EntityId, EntityId)] {
        self.pairs_by_relation
            .get(&relation)
            .map_or(&[], Vec::as_slice)
    }

    /// All outgoing train edges of an entity, in train file order.
    pub fn edges_from(&self, head: EntityId) -> &[(RelationId, EntityId)] {
        self.edges_by_head.get(&head).map_or(&[], Vec::as_slice)
    }

    /// FNV-1a over both name tables in id order. Stored in checkpoints so a
    /// model is never applied to a dataset with different id assignment.
    pub fn vocab_hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for name in self.entities.names() {
            eat(name.as_bytes());
            eat(&[0xff]);
        }
        eat(&[0xfe]);
        for name in self.relations.names() {
            eat(name.as_bytes());
            eat(&[0xff]);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, content: &str) {
        let mut f = File::create(dir.join(name)).unwrap();
        f.write_all(content.as_bytes()).unwrap();
    }

    fn sample_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write_file(
            dir.path(),
            "train.txt",
            "a\tlikes\tb\nb\tlikes\tc\na\tknows\tc\na\tlikes\tb\n",
        );
        write_file(dir.path(), "valid.txt", "c\tlikes\ta\n");
        write_file(dir.path(), "test.txt", "b\tknows\ta\n");
        dir
    }

    #[test]
    fn loads_and_interns_in_first_appearance_order() {
        let dir = sample_dir();
        let kg = KnowledgeGraph::load(dir.path()).unwrap();
        assert_eq!(kg.n_entities(), 3);
        assert_eq!(kg.n_relations(), 2);
        assert_eq!(kg.entity_name(EntityId(0)), "a");
        assert_eq!(kg.entity_name(EntityId(1)), "b");
        assert_eq!(kg.entity_name(EntityId(2)), "c");
        assert_eq!(kg.relation_name(RelationId(0)), "likes");
        assert_eq!(kg.relation_name(RelationId(1)), "knows");
        assert_eq!(kg.train().len(), 3);
        assert_eq!(kg.load_stats().duplicates_train, 1);
        assert_eq!(kg.split(Split::Valid).len(), 1);
        assert_eq!(kg.split(Split::Test).len(), 1);
    }

    #[test]
    fn indices_answer_adjacency_queries() {
        let dir = sample_dir();
        let kg = KnowledgeGraph::load(dir.path()).unwrap();
        let a = kg.entity_id("a").unwrap();
        let b = kg.entity_id("b").unwrap();
        let c = kg.entity_id("c").unwrap();
        let likes = kg.relation_id("likes").unwrap();
        assert_eq!(kg.tails_of(a, likes), &[b]);
        assert_eq!(kg.heads_of(c, likes), &[b]);
        assert_eq!(kg.pairs_of(likes), &[(a, b), (b, c)]);
        assert_eq!(kg.tails_of(c, likes), &[]);
        assert_eq!(kg.edges_from(a).len(), 2);
    }

    #[test]
    fn membership_respects_split_mask() {
        let dir = sample_dir();
        let kg = KnowledgeGraph::load(dir.path()).unwrap();
        let valid_trip = kg.split(Split::Valid)[0];
        assert!(kg.contains(&valid_trip, SplitMask::ALL));
        assert!(kg.contains(&valid_trip, SplitMask::VALID | SplitMask::TEST));
        assert!(!kg.contains(&valid_trip, SplitMask::TRAIN));
    }

    #[test]
    fn malformed_line_is_reported_with_position() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "train.txt", "a\tlikes\tb\na\tb\n");
        write_file(dir.path(), "valid.txt", "");
        write_file(dir.path(), "test.txt", "");
        let err = KnowledgeGraph::load(dir.path()).unwrap_err();
        match err {
            Error::MalformedTriplet { line, found, .. } => {
                assert_eq!(line, 2);
                assert_eq!(found, 2);
            }
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error_naming_the_path() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "train.txt", "a\tr\tb\n");
        let err = KnowledgeGraph::load(dir.path()).unwrap_err();
        match err {
            Error::Io { path, .. } => assert!(path.ends_with("valid.txt")),
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn crlf_lines_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "train.txt", "a\tr\tb\r\nb\tr\tc\r\n");
        write_file(dir.path(), "valid.txt", "");
        write_file(dir.path(), "test.txt", "");
        let kg = KnowledgeGraph::load(dir.path()).unwrap();
        assert_eq!(kg.train().len(), 2);
        assert_eq!(kg.entity_name(EntityId(2)), "c");
    }

    #[test]
    fn cross_file_duplicates_are_dropped_keeping_splits_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "train.txt", "a\tr\tb\n");
        write_file(dir.path(), "valid.txt", "a\tr\tb\nb\tr\ta\n");
        write_file(dir.path(), "test.txt", "");
        let kg = KnowledgeGraph::load(dir.path()).unwrap();
        assert_eq!(kg.split(Split::Valid).len(), 1);
        assert_eq!(kg.load_stats().duplicates_valid, 1);
    }

    #[test]
    fn vocab_hash_is_order_sensitive() {
        let kg1 = KnowledgeGraph::from_parts(
            vec!["a".into(), "b".into()],
            vec!["r".into()],
            vec![],
            vec![],
            vec![],
        );
        let kg2 = KnowledgeGraph::from_parts(
            vec!["b".into(), "a".into()],
            vec!["r".into()],
            vec![],
            vec![],
            vec![],
        );
        let kg3 = KnowledgeGraph::from_parts(
            vec!["a".into(), "b".into()],
            vec!["r".into()],
            vec![],
            vec![],
            vec![],
        );
        assert_ne!(kg1.vocab_hash(), kg2.vocab_hash());
        assert_eq!(kg1.vocab_hash(), kg3.vocab_hash());
    }

    #[test]
    fn entity_and_relation_names_round_trip() {
        let dir = sample_dir();
        let kg = KnowledgeGraph::load(dir.path()).unwrap();
        for id in 0..kg.n_entities() as u32 {
            let name = kg.entity_name(EntityId(id)).to_owned();
            assert_eq!(kg.entity_id(&name).unwrap(), EntityId(id));
        }
        assert!(kg.entity_id("nope").is_err());
        assert!(kg.relation_id("nope").is_err());
    }
}
