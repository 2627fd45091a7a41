//! Knowledge graph completion by jointly training logic rule weights and
//! embedding models.
//!
//! The pipeline mines candidate first-order rules from an observed triplet
//! store, treats the triplets those rules can derive as hidden variables of a
//! Markov logic network, and alternates between:
//!
//! * an E-step that annotates hidden triplets using the rule weights and
//!   trains the embedding model on observed plus annotated triplets, and
//! * an M-step that updates rule weights by pseudolikelihood, with the
//!   embedding model supplying beliefs for unobserved neighbors.
//!
//! Prediction scores blend the embedding probability with the rule-based
//! conditional, and evaluation reports filtered ranking metrics.

pub mod em;
pub mod error;
pub mod eval;
pub mod grounding;
pub mod kg;
pub mod kge;
pub mod mln;
pub mod rules;
pub mod seeds;
pub mod synthetic;

pub use em::{EmConfig, TrainState};
pub use error::{Error, Result};
pub use eval::{Metrics, RankQuery};
pub use grounding::{Grounding, HiddenTripletSet, MarkovBlanket};
pub use kg::{EntityId, KnowledgeGraph, RelationId, Split, Triplet};
pub use kge::{EmbeddingModel, LabeledTriplet, ModelKind, TrainConfig};
pub use mln::AnnotationTable;
pub use rules::{Rule, RulePattern, RuleSet};
