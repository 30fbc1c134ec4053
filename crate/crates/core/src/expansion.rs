//! Entity and class representations, window search, and ensemble re-ranking.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Query};
use crate::encoder::{ModalityMask, Model};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    /// T, number of entities returned per query.
    pub target_size: usize,
    /// W, admissions per round.
    pub window: usize,
    /// γ, weight decay per round for admitted entities.
    pub round_decay: f64,
    /// Leave-one-out ensemble re-ranking.
    pub ensemble: bool,
    /// ε added before taking logs.
    pub smoothing: f64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            target_size: 100,
            window: 5,
            round_decay: 0.8,
            ensemble: false,
            smoothing: 1e-12,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.target_size < self.window {
            return Err(Error::Config(format!(
                "target_size {} smaller than window {}",
                self.target_size, self.window
            )));
        }
        if !(self.round_decay > 0.0 && self.round_decay <= 1.0) {
            return Err(Error::Config(format!("round_decay {} outside (0, 1]", self.round_decay)));
        }
        if !(self.smoothing >= 0.0) {
            return Err(Error::Config("smoothing must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityRepresentation {
    pub entity_id: usize,
    pub distribution: Vec<f64>,
}

/// Ranked output for one query. Scores are descending, ties broken by
/// ascending entity id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedExpansion {
    pub class_id: usize,
    pub seeds: Vec<usize>,
    pub ranked: Vec<(usize, f64)>,
}

impl RankedExpansion {
    pub fn ids(&self) -> Vec<usize> {
        self.ranked.iter().map(|&(id, _)| id).collect()
    }

    pub fn matches(&self, query: &Query) -> bool {
        self.class_id == query.class_id && self.seeds == query.seeds
    }
}

/// Mean of ŷ over all contexts of `entity`, renormalised to unit sum.
pub fn entity_representation(
    entity: usize,
    model: &Model,
    corpus: &Corpus,
    modality: ModalityMask,
) -> Result<EntityRepresentation> {
    let mut sum = vec![0.0; model.config().entity_count];
    let mut count = 0usize;
    for ctx in corpus.contexts_of(entity) {
        let p = model.encoder.predict_distribution(&model.student, ctx, modality)?;
        for (s, v) in sum.iter_mut().zip(&p) {
            *s += v;
        }
        count += 1;
    }
    if count == 0 {
        let name = corpus.entities().get(entity).map_or("?", |e| e.name.as_str());
        return Err(Error::InvalidArgument(format!(
            "entity {entity} ({name}) has no contexts"
        )));
    }
    Ok(EntityRepresentation {
        entity_id: entity,
        distribution: normalized(sum),
    })
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    for x in &mut v {
        *x /= total;
    }
    v
}

/// Representations of every entity, indexed by entity id.
pub fn representation_table(model: &Model, corpus: &Corpus, modality: ModalityMask) -> Result<Vec<Vec<f64>>> {
    (0..corpus.entity_count())
        .map(|e| entity_representation(e, model, corpus, modality).map(|r| r.distribution))
        .collect()
}

/// Distributions used for seeds and for candidates. The two tables differ
/// only when a modality is withheld from one side.
#[derive(Debug, Clone, PartialEq)]
pub struct Representations {
    pub seed: Vec<Vec<f64>>,
    pub candidate: Vec<Vec<f64>>,
}

impl Representations {
    pub fn shared(table: Vec<Vec<f64>>) -> Self {
        Representations {
            seed: table.clone(),
            candidate: table,
        }
    }

    pub fn from_model(model: &Model, corpus: &Corpus, seed: ModalityMask, candidate: ModalityMask) -> Result<Self> {
        let seed_table = representation_table(model, corpus, seed)?;
        let candidate_table = if candidate == seed {
            seed_table.clone()
        } else {
            representation_table(model, corpus, candidate)?
        };
        Ok(Representations {
            seed: seed_table,
            candidate: candidate_table,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.candidate.len()
    }
}

/// Σ w_e p_e / Σ w_e
pub fn class_representation(members: &[(&[f64], f64)]) -> Result<Vec<f64>> {
    let Some(&(first, _)) = members.first() else {
        return Err(Error::InvalidArgument("class representation of an empty set".into()));
    };
    let mut out = vec![0.0; first.len()];
    let mut total = 0.0;
    for &(p, w) in members {
        if !(w > 0.0) {
            return Err(Error::InvalidArgument(format!("member weight {w} must be positive")));
        }
        if p.len() != out.len() {
            return Err(Error::Shape("member distributions differ in length".into()));
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += w * v;
        }
        total += w;
    }
    for o in &mut out {
        *o /= total;
    }
    Ok(out)
}

fn smooth(p: &[f64], eps: f64) -> Vec<f64> {
    normalized(p.iter().map(|v| v + eps).collect())
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// ½(KL(p̃‖q̃) + KL(q̃‖p̃)) with p̃ = (p+ε)/Σ(p+ε).
pub fn divergence(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    let ps = smooth(p, eps);
    let qs = smooth(q, eps);
    Ok((0.5 * (kl(&ps, &qs) + kl(&qs, &ps))).max(0.0))
}

fn by_score_then_id(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn check_seeds(seeds: &[usize], reps: &Representations, target: usize) -> Result<()> {
    let n = reps.entity_count();
    if reps.seed.len() != n {
        return Err(Error::Shape("seed and candidate tables differ in size".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("query has no seeds".into()));
    }
    if let Some(&s) = seeds.iter().find(|&&s| s >= n) {
        return Err(Error::InvalidArgument(format!("seed {s} outside {n} entities")));
    }
    let distinct: BTreeSet<_> = seeds.iter().collect();
    if target + distinct.len() > n {
        return Err(Error::InvalidArgument(format!(
            "target size {target} plus {} seeds exceeds {n} candidates; lower target_size",
            distinct.len()
        )));
    }
    Ok(())
}

/// Iterative expansion: each round admits the `W` candidates closest to the
/// current weighted class representation, with weight `γ^round`. A final
/// pass re-ranks the admitted entities against the representation of the
/// whole set (skipped when a single round admitted everything, which is then
/// plain nearest-neighbour ranking against the seeds).
pub fn window_search(seeds: &[usize], reps: &Representations, config: &ExpansionConfig) -> Result<Vec<(usize, f64)>> {
    config.validate()?;
    check_seeds(seeds, reps, config.target_size)?;
    let eps = config.smoothing;
    let seed_set: BTreeSet<usize> = seeds.iter().copied().collect();
    let mut in_set = vec![false; reps.entity_count()];
    for &s in &seed_set {
        in_set[s] = true;
    }
    let mut weighted: Vec<(&[f64], f64)> = seed_set.iter().map(|&s| (reps.seed[s].as_slice(), 1.0)).collect();
    let mut admitted: Vec<(usize, f64)> = Vec::with_capacity(config.target_size);
    let mut round = 0i32;
    while admitted.len() < config.target_size {
        round += 1;
        let q = class_representation(&weighted)?;
        let mut scored = Vec::new();
        for (e, p) in reps.candidate.iter().enumerate() {
            if !in_set[e] {
                scored.push((e, -divergence(p, &q, eps)?));
            }
        }
        scored.sort_by(by_score_then_id);
        let take = config.window.min(config.target_size - admitted.len());
        let weight = config.round_decay.powi(round);
        for &(e, s) in scored.iter().take(take) {
            in_set[e] = true;
            weighted.push((reps.candidate[e].as_slice(), weight));
            admitted.push((e, s));
        }
    }
    if round > 1 {
        let q = class_representation(&weighted)?;
        for entry in &mut admitted {
            entry.1 = -divergence(&reps.candidate[entry.0], &q, eps)?;
        }
    }
    admitted.sort_by(by_score_then_id);
    Ok(admitted)
}

/// Leave-one-out ensemble: window search with the full seed set and with
/// each seed held out; entities are ranked by their mean reciprocal rank
/// across runs, counting absence as rank `T+1`. A held-out seed returned by
/// its own run is dropped before ranks are assigned.
pub fn rerank(seeds: &[usize], reps: &Representations, config: &ExpansionConfig) -> Result<Vec<(usize, f64)>> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("ensemble re-ranking needs at least 2 seeds".into()));
    }
    let seed_set: BTreeSet<usize> = seeds.iter().copied().collect();
    let mut variants = vec![seeds.to_vec()];
    for i in 0..seeds.len() {
        let mut v = seeds.to_vec();
        v.remove(i);
        variants.push(v);
    }
    let runs = variants.len() as f64;
    let absent = 1.0 / (config.target_size as f64 + 1.0);
    let mut totals: BTreeMap<usize, f64> = BTreeMap::new();
    let mut listed: Vec<BTreeSet<usize>> = Vec::new();
    for v in &variants {
        let list = window_search(v, reps, config)?;
        let mut present = BTreeSet::new();
        let kept = list.iter().filter(|(e, _)| !seed_set.contains(e));
        for (rank, &(e, _)) in kept.enumerate() {
            *totals.entry(e).or_insert(0.0) += 1.0 / (rank as f64 + 1.0);
            present.insert(e);
        }
        listed.push(present);
    }
    let mut scored: Vec<(usize, f64)> = totals
        .into_iter()
        .map(|(e, sum)| {
            let missing = listed.iter().filter(|l| !l.contains(&e)).count() as f64;
            (e, (sum + missing * absent) / runs)
        })
        .collect();
    scored.sort_by(by_score_then_id);
    scored.truncate(config.target_size);
    Ok(scored)
}

pub fn expand_query(query: &Query, reps: &Representations, config: &ExpansionConfig) -> Result<RankedExpansion> {
    let ranked = if config.ensemble {
        rerank(&query.seeds, reps, config)?
    } else {
        window_search(&query.seeds, reps, config)?
    };
    Ok(RankedExpansion {
        class_id: query.class_id,
        seeds: query.seeds.clone(),
        ranked,
    })
}

pub fn expand_queries(queries: &[Query], reps: &Representations, config: &ExpansionConfig) -> Result<Vec<RankedExpansion>> {
    queries.iter().map(|q| expand_query(q, reps, config)).collect()
}

/// Expands every query of `corpus` with full-modality representations.
pub fn expand_all(model: &Model, corpus: &Corpus, config: &ExpansionConfig) -> Result<Vec<RankedExpansion>> {
    let reps = Representations::from_model(model, corpus, ModalityMask::NONE, ModalityMask::NONE)?;
    expand_queries(corpus.queries(), &reps, config)
}

pub fn write_expansions(expansions: &[RankedExpansion]) -> Result<String> {
    let mut out = String::new();
    for e in expansions {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_expansions(text: &str, path: &std::path::Path) -> Result<Vec<RankedExpansion>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}
