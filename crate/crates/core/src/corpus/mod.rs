//! Entity vocabulary, multi-modal contexts, and expansion queries.
//!
//! A [`Corpus`] is immutable once built: every constructor validates it, and
//! the per-entity context index is derived from the context list.

mod io;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use io::{load_corpus, save_corpus, IMAGE_HEADER_TAG};
pub use synthetic::{generate_synthetic, SyntheticSpec};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const RESERVED_TOKENS: [&str; 3] = ["[PAD]", "[UNK]", "[MASK]"];
/// Surface prefix of the class-agnostic tokens in synthetic corpora.
pub const FUNCTION_TOKEN_PREFIX: &str = "fn";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub class_ids: Vec<usize>,
}

/// One masked sentence plus an optional patch-feature image.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalContext {
    pub entity_id: usize,
    pub tokens: Vec<u32>,
    pub mask_index: usize,
    /// `patch_count × image_feature_dim`; `None` when the image is missing.
    pub patches: Option<Matrix>,
}

impl MultiModalContext {
    /// Builds a context from a raw sentence by collapsing the mention span
    /// into a single mask token.
    pub fn from_mention(
        entity_id: usize,
        tokens: &[u32],
        span: Range<usize>,
        patches: Option<Matrix>,
    ) -> Result<Self> {
        let (tokens, mask_index) = mask_context(tokens, span)?;
        Ok(MultiModalContext {
            entity_id,
            tokens,
            mask_index,
            patches,
        })
    }
}

/// Replaces `span` with one [`MASK_ID`], returning the new sequence and the
/// mask position.
pub fn mask_context(tokens: &[u32], span: Range<usize>) -> Result<(Vec<u32>, usize)> {
    if span.is_empty() {
        return Err(Error::InvalidArgument("empty mention span".into()));
    }
    if span.end > tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "mention span {}..{} exceeds sentence length {}",
            span.start,
            span.end,
            tokens.len()
        )));
    }
    let mut out = Vec::with_capacity(tokens.len() - span.len() + 1);
    out.extend_from_slice(&tokens[..span.start]);
    out.push(MASK_ID);
    out.extend_from_slice(&tokens[span.end..]);
    Ok((out, span.start))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub class_id: usize,
    pub seeds: Vec<usize>,
    pub ground_truth: Vec<usize>,
}

impl Query {
    /// Ground truth with the seeds removed; this is what retrieval is scored on.
    pub fn targets(&self) -> BTreeSet<usize> {
        let seeds: HashSet<_> = self.seeds.iter().copied().collect();
        self.ground_truth
            .iter()
            .copied()
            .filter(|e| !seeds.contains(e))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    entities: Vec<Entity>,
    contexts: Vec<MultiModalContext>,
    queries: Vec<Query>,
    token_vocab: BTreeMap<String, u32>,
    image_feature_dim: usize,
    patch_count: usize,
    by_entity: Vec<Vec<usize>>,
}

impl Corpus {
    /// Assembles and validates a corpus. Contexts are regrouped by entity id
    /// (stable within an entity).
    pub fn new(
        entities: Vec<Entity>,
        mut contexts: Vec<MultiModalContext>,
        queries: Vec<Query>,
        token_vocab: BTreeMap<String, u32>,
        image_feature_dim: usize,
        patch_count: usize,
    ) -> Result<Self> {
        contexts.sort_by_key(|c| c.entity_id);
        let mut corpus = Corpus {
            entities,
            contexts,
            queries,
            token_vocab,
            image_feature_dim,
            patch_count,
            by_entity: Vec::new(),
        };
        let report = validate(&corpus);
        if !report.is_empty() {
            return Err(Error::Validation(report));
        }
        corpus.by_entity = vec![Vec::new(); corpus.entities.len()];
        for (i, c) in corpus.contexts.iter().enumerate() {
            corpus.by_entity[c.entity_id].push(i);
        }
        Ok(corpus)
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn contexts(&self) -> &[MultiModalContext] {
        &self.contexts
    }

    pub fn contexts_of(&self, entity: usize) -> impl Iterator<Item = &MultiModalContext> {
        self.by_entity[entity].iter().map(|&i| &self.contexts[i])
    }

    pub fn context_indices_of(&self, entity: usize) -> &[usize] {
        &self.by_entity[entity]
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn token_vocab(&self) -> &BTreeMap<String, u32> {
        &self.token_vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.token_vocab.len()
    }

    /// Maps a surface token to its id, falling back to [`UNK_ID`].
    pub fn token_id(&self, token: &str) -> u32 {
        self.token_vocab.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn image_feature_dim(&self) -> usize {
        self.image_feature_dim
    }

    pub fn patch_count(&self) -> usize {
        self.patch_count
    }

    pub fn max_text_len(&self) -> usize {
        self.contexts.iter().map(|c| c.tokens.len()).max().unwrap_or(1)
    }

    /// Sorted, de-duplicated class ids appearing on any entity.
    pub fn class_ids(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .entities
            .iter()
            .flat_map(|e| e.class_ids.iter().copied())
            .collect();
        set.into_iter().collect()
    }

    pub fn with_queries(&self, queries: Vec<Query>) -> Result<Corpus> {
        Corpus::new(
            self.entities.clone(),
            self.contexts.clone(),
            queries,
            self.token_vocab.clone(),
            self.image_feature_dim,
            self.patch_count,
        )
    }
}

/// Checks every data-model invariant and lists the violations; an empty
/// report means the corpus is well formed.
pub fn validate(corpus: &Corpus) -> Vec<String> {
    let mut report = Vec::new();
    let n = corpus.entities.len();

    let mut seen = HashSet::new();
    for e in &corpus.entities {
        if !seen.insert(e.id) {
            report.push(format!("duplicate entity id {}", e.id));
        }
        if e.aliases.iter().any(|a| a == &e.name) {
            report.push(format!("entity {} lists its own name as an alias", e.id));
        }
    }
    let unique_ids = seen.len() == n;
    for (pos, e) in corpus.entities.iter().enumerate().filter(|_| unique_ids) {
        if e.id != pos {
            report.push(format!(
                "entity ids must be dense and ordered: position {pos} holds id {}",
                e.id
            ));
            break;
        }
    }

    let vocab_ids: BTreeSet<u32> = corpus.token_vocab.values().copied().collect();
    if vocab_ids.len() != corpus.token_vocab.len()
        || vocab_ids.iter().enumerate().any(|(i, &id)| id as usize != i)
    {
        report.push("token vocabulary ids must be unique and dense from 0".into());
    }
    for (tok, id) in RESERVED_TOKENS.iter().zip([PAD_ID, UNK_ID, MASK_ID]) {
        if corpus.token_vocab.get(*tok) != Some(&id) {
            report.push(format!("reserved token {tok} must map to id {id}"));
        }
    }
    let vocab_len = corpus.token_vocab.len();

    for (i, c) in corpus.contexts.iter().enumerate() {
        if c.entity_id >= n {
            report.push(format!("context {i}: unknown entity {}", c.entity_id));
        }
        if c.mask_index >= c.tokens.len() {
            report.push(format!(
                "context {i}: mask index {} outside sentence of length {}",
                c.mask_index,
                c.tokens.len()
            ));
        } else if c.tokens[c.mask_index] != MASK_ID {
            report.push(format!("context {i}: token at mask index is not [MASK]"));
        }
        if let Some(bad) = c.tokens.iter().find(|&&t| t as usize >= vocab_len) {
            report.push(format!("context {i}: token id {bad} outside vocabulary"));
        }
        if let Some(p) = &c.patches {
            if p.shape() != (corpus.patch_count, corpus.image_feature_dim) {
                report.push(format!(
                    "context {i}: patches have shape {:?}, expected ({}, {})",
                    p.shape(),
                    corpus.patch_count,
                    corpus.image_feature_dim
                ));
            }
            if !p.is_finite() {
                report.push(format!("context {i}: non-finite patch value"));
            }
        }
    }

    for (qi, q) in corpus.queries.iter().enumerate() {
        for id in q.seeds.iter().chain(&q.ground_truth) {
            if *id >= n {
                report.push(format!("query {qi}: unknown entity {id}"));
            }
        }
        if q.seeds.len() != 3 && q.seeds.len() != 5 {
            report.push(format!(
                "query {qi}: expected 3 or 5 seeds, found {}",
                q.seeds.len()
            ));
        }
        let gt: HashSet<_> = q.ground_truth.iter().collect();
        if q.seeds.iter().any(|s| !gt.contains(s)) {
            report.push(format!("query {qi}: seeds are not a subset of the ground truth"));
        }
    }
    report
}

/// Builds a vocabulary map with the reserved tokens followed by `tokens`.
pub fn vocab_with_reserved<'a>(tokens: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, u32> {
    let mut vocab: BTreeMap<String, u32> = RESERVED_TOKENS
        .iter()
        .enumerate()
        .map(|(i, t)| (t.to_string(), i as u32))
        .collect();
    for t in tokens {
        let next = vocab.len() as u32;
        vocab.entry(t.to_string()).or_insert(next);
    }
    vocab
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_corpus() -> Corpus {
        let vocab = vocab_with_reserved(["the", "red", "blue"]);
        let entities = vec![
            Entity {
                id: 0,
                name: "apple".into(),
                aliases: vec![],
                class_ids: vec![0],
            },
            Entity {
                id: 1,
                name: "sky".into(),
                aliases: vec!["heavens".into()],
                class_ids: vec![1],
            },
        ];
        let contexts = vec![
            MultiModalContext {
                entity_id: 0,
                tokens: vec![3, MASK_ID, 4],
                mask_index: 1,
                patches: Some(Matrix::zeros(2, 3)),
            },
            MultiModalContext {
                entity_id: 1,
                tokens: vec![3, MASK_ID, 5],
                mask_index: 1,
                patches: None,
            },
        ];
        Corpus::new(entities, contexts, vec![], vocab, 3, 2).unwrap()
    }

    #[test]
    fn minimal_corpus_is_valid() {
        let c = tiny_corpus();
        assert_eq!(c.entity_count(), 2);
        assert!(validate(&c).is_empty());
        assert_eq!(c.token_id("red"), 4);
        assert_eq!(c.token_id("green"), UNK_ID);
    }

    #[test]
    fn dangling_entity_is_reported() {
        let c = tiny_corpus();
        let mut contexts = c.contexts().to_vec();
        contexts[0].entity_id = 99;
        let err = Corpus::new(
            c.entities().to_vec(),
            contexts,
            vec![],
            c.token_vocab().clone(),
            3,
            2,
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown entity 99"), "{err}");
    }

    #[test]
    fn duplicate_entity_id_is_one_violation() {
        let mut c = tiny_corpus();
        c.entities[1].id = 0;
        let report = validate(&c);
        assert_eq!(report.len(), 1, "{report:?}");
        assert!(report[0].contains("duplicate"));
    }

    #[test]
    fn seeds_outside_ground_truth_is_one_violation() {
        let mut c = tiny_corpus();
        c.queries.push(Query {
            class_id: 0,
            seeds: vec![0, 1, 1],
            ground_truth: vec![0],
        });
        let report = validate(&c);
        assert_eq!(report.len(), 1, "{report:?}");
        assert!(report[0].contains("subset"));
    }

    #[test]
    fn mask_single_token_mention() {
        let (t, m) = mask_context(&[10, 11, 12, 13], 2..3).unwrap();
        assert_eq!(t, vec![10, 11, MASK_ID, 13]);
        assert_eq!(m, 2);
    }

    #[test]
    fn mask_collapses_multi_token_mention() {
        let (t, m) = mask_context(&[10, 11, 12, 13], 1..3).unwrap();
        assert_eq!(t, vec![10, MASK_ID, 13]);
        assert_eq!(m, 1);
    }

    #[test]
    fn mask_rejects_bad_spans() {
        assert!(mask_context(&[10, 11, 12, 13], 5..6).is_err());
        assert!(mask_context(&[10, 11], 1..1).is_err());
    }

    #[test]
    fn query_targets_drop_seeds() {
        let q = Query {
            class_id: 0,
            seeds: vec![1, 2, 3],
            ground_truth: vec![1, 2, 3, 4, 5],
        };
        assert_eq!(q.targets().into_iter().collect::<Vec<_>>(), vec![4, 5]);
    }
}
