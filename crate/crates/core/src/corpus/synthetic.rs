//! Synthetic corpora with planted ground truth.
//!
//! Each class owns a token pool and a Gaussian image mean. Sibling classes
//! share a fraction of their tokens and a correlated image mean (hard
//! negatives). Context counts per entity follow a Zipf law (long tail);
//! synonym pairs carry identical contexts; polysemes reuse a surface name
//! across two classes; random negatives belong to no class.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    vocab_with_reserved, Corpus, Entity, MultiModalContext, Query, FUNCTION_TOKEN_PREFIX, MASK_ID,
};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub entities_per_class: usize,
    /// Classes `(2p, 2p+1)` for `p < sibling_pairs` are hard-negative siblings.
    pub sibling_pairs: usize,
    /// Fraction of a sibling's token pool shared with its partner (ρ).
    pub token_overlap: f64,
    pub tokens_per_class: usize,
    pub function_tokens: usize,
    /// Probability that a non-mask position draws a function token.
    pub function_token_rate: f64,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub max_contexts_per_entity: usize,
    pub contexts_per_entity_zipf_exponent: f64,
    pub n_polysemes: usize,
    pub n_synonym_pairs: usize,
    pub n_random_negatives: usize,
    pub image_feature_dim: usize,
    pub patch_count: usize,
    /// Standard deviation of class image means (σ).
    pub class_image_separation: f64,
    pub image_noise: f64,
    pub missing_image_rate: f64,
    pub queries_per_seed_size: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 8,
            entities_per_class: 40,
            sibling_pairs: 0,
            token_overlap: 0.0,
            tokens_per_class: 24,
            function_tokens: 12,
            function_token_rate: 0.3,
            min_sentence_len: 5,
            max_sentence_len: 12,
            max_contexts_per_entity: 6,
            contexts_per_entity_zipf_exponent: 1.1,
            n_polysemes: 0,
            n_synonym_pairs: 0,
            n_random_negatives: 24,
            image_feature_dim: 8,
            patch_count: 4,
            class_image_separation: 3.0,
            image_noise: 1.0,
            missing_image_rate: 0.1,
            queries_per_seed_size: 5,
            rng_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.token_overlap) {
            return fail(format!("token_overlap {} outside [0, 1]", self.token_overlap));
        }
        for (name, v) in [
            ("function_token_rate", self.function_token_rate),
            ("missing_image_rate", self.missing_image_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.contexts_per_entity_zipf_exponent < 0.0 {
            return fail("zipf exponent must be non-negative".into());
        }
        if self.class_image_separation < 0.0 || self.image_noise < 0.0 {
            return fail("image spreads must be non-negative".into());
        }
        if 2 * self.sibling_pairs > self.n_classes {
            return fail(format!(
                "{} sibling pairs need {} classes, only {} requested",
                self.sibling_pairs,
                2 * self.sibling_pairs,
                self.n_classes
            ));
        }
        if self.n_classes > 0 && self.tokens_per_class == 0 {
            return fail("tokens_per_class must be positive".into());
        }
        if self.sibling_pairs > 0 && self.token_overlap > 0.0 && self.shared_tokens() == 0 {
            return fail(format!(
                "token pool of {} is too small for overlap {}",
                self.tokens_per_class, self.token_overlap
            ));
        }
        if self.function_token_rate > 0.0 && self.function_tokens == 0 {
            return fail("function_token_rate > 0 needs function_tokens > 0".into());
        }
        if self.min_sentence_len < 2 || self.max_sentence_len < self.min_sentence_len {
            return fail("need 2 <= min_sentence_len <= max_sentence_len".into());
        }
        if self.max_contexts_per_entity == 0 {
            return fail("max_contexts_per_entity must be positive".into());
        }
        if self.image_feature_dim == 0 || self.patch_count == 0 {
            return fail("image_feature_dim and patch_count must be positive".into());
        }
        if self.queries_per_seed_size > 0 && self.n_classes > 0 && self.entities_per_class < 5 {
            return fail("queries with 5 seeds need at least 5 entities per class".into());
        }
        if 2 * self.n_synonym_pairs > self.n_classes * self.entities_per_class {
            return fail("not enough class entities for the requested synonym pairs".into());
        }
        if self.n_polysemes > 0 && self.n_classes < 2 {
            return fail("polysemes need at least two classes".into());
        }
        if 2 * self.n_synonym_pairs + self.n_polysemes > self.n_classes * self.entities_per_class {
            return fail("not enough class entities for synonyms plus polysemes".into());
        }
        Ok(())
    }

    fn shared_tokens(&self) -> usize {
        (self.token_overlap * self.tokens_per_class as f64).round() as usize
    }
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const ONSETS: [&str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st",
    ];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let syllables = rng.random_range(2..=4);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

/// Deterministically generates a corpus from `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    // Token pools.
    let function_names: Vec<String> = (0..spec.function_tokens).map(|i| format!("{FUNCTION_TOKEN_PREFIX}{i}")).collect();
    let shared = if spec.sibling_pairs > 0 { spec.shared_tokens() } else { 0 };
    let mut pool_names: Vec<Vec<String>> = Vec::with_capacity(spec.n_classes);
    for k in 0..spec.n_classes {
        let is_younger_sibling = k % 2 == 1 && k / 2 < spec.sibling_pairs;
        let mut pool = Vec::with_capacity(spec.tokens_per_class);
        if is_younger_sibling {
            pool.extend(pool_names[k - 1][..shared].iter().cloned());
        }
        let own = spec.tokens_per_class - pool.len();
        pool.extend((0..own).map(|j| format!("c{k}t{j}")));
        pool_names.push(pool);
    }
    let noise_names: Vec<String> = if spec.n_random_negatives > 0 {
        (0..spec.tokens_per_class.max(1)).map(|j| format!("noise{j}")).collect()
    } else {
        Vec::new()
    };
    let vocab = vocab_with_reserved(
        function_names
            .iter()
            .chain(pool_names.iter().flatten())
            .chain(&noise_names)
            .map(String::as_str),
    );
    let ids = |names: &[String]| -> Vec<u32> { names.iter().map(|n| vocab[n.as_str()]).collect() };
    let function_ids = ids(&function_names);
    let pool_ids: Vec<Vec<u32>> = pool_names.iter().map(|p| ids(p)).collect();
    let noise_ids = ids(&noise_names);

    // Image means.
    let dim = spec.image_feature_dim;
    let l2 = spec.patch_count;
    let gaussian = |rng: &mut ChaCha8Rng, scale: f64| -> Matrix {
        Matrix::from_fn(l2, dim, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
    };
    let rho = spec.token_overlap;
    let mut class_means: Vec<Matrix> = Vec::with_capacity(spec.n_classes);
    for k in 0..spec.n_classes {
        let fresh = gaussian(&mut rng, spec.class_image_separation);
        let is_younger_sibling = k % 2 == 1 && k / 2 < spec.sibling_pairs;
        if is_younger_sibling {
            let elder = &class_means[k - 1];
            let mixed = Matrix::from_fn(l2, dim, |r, c| {
                rho * elder.get(r, c) + (1.0 - rho * rho).sqrt() * fresh.get(r, c)
            });
            class_means.push(mixed);
        } else {
            class_means.push(fresh);
        }
    }

    // Entities.
    let n_class_entities = spec.n_classes * spec.entities_per_class;
    let total = n_class_entities + spec.n_random_negatives;
    let mut used_names = HashSet::new();
    let mut entities = Vec::with_capacity(total);
    for id in 0..total {
        let name = loop {
            let w = pseudo_word(&mut rng);
            if used_names.insert(w.clone()) {
                break w;
            }
        };
        let class_ids = if id < n_class_entities {
            vec![id / spec.entities_per_class]
        } else {
            Vec::new()
        };
        entities.push(Entity {
            id,
            name,
            aliases: Vec::new(),
            class_ids,
        });
    }
    let negative_means: Vec<Matrix> = (0..spec.n_random_negatives)
        .map(|_| gaussian(&mut rng, spec.class_image_separation))
        .collect();

    // Long-tail context counts: count = max(1, round(max / rank^s)).
    let zipf_counts = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> {
        let mut ranks: Vec<usize> = (1..=n).collect();
        ranks.shuffle(rng);
        ranks
            .into_iter()
            .map(|r| {
                let c = spec.max_contexts_per_entity as f64
                    / (r as f64).powf(spec.contexts_per_entity_zipf_exponent);
                (c.round() as usize).max(1)
            })
            .collect()
    };
    let mut counts = Vec::with_capacity(total);
    for _ in 0..spec.n_classes {
        counts.extend(zipf_counts(&mut rng, spec.entities_per_class));
    }
    counts.extend(zipf_counts(&mut rng, spec.n_random_negatives));

    let mut per_entity: Vec<Vec<MultiModalContext>> = Vec::with_capacity(total);
    for (id, &count) in counts.iter().enumerate() {
        let (pool, mean) = if id < n_class_entities {
            let k = id / spec.entities_per_class;
            (&pool_ids[k], &class_means[k])
        } else {
            (&noise_ids, &negative_means[id - n_class_entities])
        };
        let mut contexts = Vec::with_capacity(count);
        for _ in 0..count {
            let len = rng.random_range(spec.min_sentence_len..=spec.max_sentence_len);
            let mask_index = rng.random_range(0..len);
            let tokens: Vec<u32> = (0..len)
                .map(|i| {
                    if i == mask_index {
                        MASK_ID
                    } else if rng.random_bool(spec.function_token_rate) {
                        *function_ids.choose(&mut rng).unwrap()
                    } else {
                        *pool.choose(&mut rng).unwrap()
                    }
                })
                .collect();
            let patches = if rng.random_bool(spec.missing_image_rate) {
                None
            } else {
                let noise = gaussian(&mut rng, spec.image_noise);
                Some(Matrix::from_fn(l2, dim, |r, c| {
                    f32_exact(mean.get(r, c) + noise.get(r, c))
                }))
            };
            contexts.push(MultiModalContext {
                entity_id: id,
                tokens,
                mask_index,
                patches,
            });
        }
        per_entity.push(contexts);
    }

    // Synonym pairs and polysemes use disjoint entities.
    let mut order: Vec<usize> = (0..n_class_entities).collect();
    order.shuffle(&mut rng);
    let mut taken = HashSet::new();
    for p in 0..spec.n_synonym_pairs {
        let class = p % spec.n_classes;
        let mut in_class = order
            .iter()
            .copied()
            .filter(|&e| e / spec.entities_per_class == class && !taken.contains(&e));
        let (Some(a), Some(b)) = (in_class.next(), in_class.next()) else {
            return Err(Error::Config(format!(
                "class {class} has no free entities left for synonym pair {p}"
            )));
        };
        taken.insert(a);
        taken.insert(b);
        per_entity[b] = per_entity[a]
            .iter()
            .map(|c| MultiModalContext {
                entity_id: b,
                ..c.clone()
            })
            .collect();
        let (name_a, name_b) = (entities[a].name.clone(), entities[b].name.clone());
        entities[a].aliases.push(name_b);
        entities[b].aliases.push(name_a);
    }
    for p in 0..spec.n_polysemes {
        let class_a = p % spec.n_classes;
        let class_b = (class_a + 1) % spec.n_classes;
        let pick = |class: usize, taken: &HashSet<usize>| {
            order
                .iter()
                .copied()
                .find(|&e| e / spec.entities_per_class == class && !taken.contains(&e))
        };
        let Some(a) = pick(class_a, &taken) else {
            return Err(Error::Config(format!("class {class_a} has no free entity for polyseme {p}")));
        };
        taken.insert(a);
        let Some(b) = pick(class_b, &taken) else {
            return Err(Error::Config(format!("class {class_b} has no free entity for polyseme {p}")));
        };
        taken.insert(b);
        entities[b].name = entities[a].name.clone();
    }

    // Queries: every class, both seed sizes.
    let mut queries = Vec::new();
    for k in 0..spec.n_classes {
        let members: Vec<usize> =
            (k * spec.entities_per_class..(k + 1) * spec.entities_per_class).collect();
        for size in [3usize, 5] {
            for _ in 0..spec.queries_per_seed_size {
                let seeds: Vec<usize> = members.choose_multiple(&mut rng, size).copied().collect();
                queries.push(Query {
                    class_id: k,
                    seeds,
                    ground_truth: members.clone(),
                });
            }
        }
    }

    Corpus::new(
        entities,
        per_entity.into_iter().flatten().collect(),
        queries,
        vocab,
        dim,
        l2,
    )
}
