//! Training schedule: masked-entity pretraining with momentum distillation,
//! then rounds of expansion, pair mining, and four-loss refinement.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{Corpus, MultiModalContext, UNK_ID};
use crate::encoder::{Encoder, EncoderConfig, ModalityMask, Model};
use crate::error::{Error, Result};
use crate::expansion::{expand_all, ExpansionConfig, RankedExpansion};
use crate::objectives::{clustering_loss, contrastive_loss, distillation_loss_batch, masked_entity_loss, LossHyper};
use crate::params::{Grads, ParamSet};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    /// K_pos: ranks `1..=K_pos` are positives.
    pub top_positive: usize,
    /// L_neg: first negative rank (inclusive).
    pub negative_from: usize,
    /// U_neg: last negative rank (inclusive).
    pub negative_to: usize,
    /// ρ_pos: fraction of pairs drawn from the positive pool.
    pub positive_fraction: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            top_positive: 10,
            negative_from: 50,
            negative_to: 80,
            positive_fraction: 0.5,
        }
    }
}

impl MiningConfig {
    pub fn paper() -> Self {
        MiningConfig {
            negative_from: 170,
            negative_to: 200,
            ..MiningConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.top_positive && self.top_positive < self.negative_from && self.negative_from <= self.negative_to) {
            return Err(Error::Config(format!(
                "mining needs 0 < top_positive < negative_from <= negative_to, got {} / {} / {}",
                self.top_positive, self.negative_from, self.negative_to
            )));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config(format!(
                "positive_fraction {} outside [0, 1]",
                self.positive_fraction
            )));
        }
        Ok(())
    }
}

/// Multipliers of the four losses in the total. Zero disables a term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mask: f64,
    pub distillation: f64,
    pub contrastive: f64,
    pub clustering: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mask: 1.0,
            distillation: 1.0,
            contrastive: 1.0,
            clustering: 1.0,
        }
    }
}

impl LossWeights {
    /// Masked-entity prediction alone.
    pub fn mask_only() -> Self {
        LossWeights {
            mask: 1.0,
            distillation: 0.0,
            contrastive: 0.0,
            clustering: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Step size while the contrastive and clustering terms are active.
    pub refine_learning_rate: f64,
    pub weight_decay: f64,
    /// Contexts per pretraining step.
    pub batch_size: usize,
    /// N, positive pairs per refinement step.
    pub pair_batch: usize,
    pub pretrain_epochs: usize,
    /// Passes over the mined batches in each round.
    pub refine_epochs: usize,
    /// Mined batches per query in each round.
    pub batches_per_query: usize,
    /// R
    pub rounds: usize,
    /// m, teacher momentum.
    pub momentum: f64,
    /// Probability of replacing a context's text with the placeholder.
    pub text_dropout: f64,
    /// Probability of replacing a context's image with the placeholder.
    pub image_dropout: f64,
    /// Probability of replacing each non-mask token with `[UNK]` per step.
    pub token_dropout: f64,
    /// Standard deviation of Gaussian noise added to patch features per step.
    pub patch_noise: f64,
    pub loss: LossHyper,
    pub weights: LossWeights,
    pub mining: MiningConfig,
    /// Used for snapshots and, with a raised target size, for mining.
    /// Configured at run level rather than inside the training section.
    #[serde(skip)]
    pub expansion: ExpansionConfig,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            refine_learning_rate: 3e-4,
            weight_decay: 0.01,
            batch_size: 32,
            pair_batch: 8,
            pretrain_epochs: 60,
            refine_epochs: 1,
            batches_per_query: 2,
            rounds: 0,
            momentum: 0.99,
            text_dropout: 0.1,
            image_dropout: 0.1,
            token_dropout: 0.6,
            patch_noise: 1.5,
            loss: LossHyper::default(),
            weights: LossWeights::default(),
            mining: MiningConfig::default(),
            expansion: ExpansionConfig::default(),
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Published optimiser and loss settings.
    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            refine_learning_rate: 1e-5,
            weight_decay: 0.01,
            momentum: 0.99,
            loss: LossHyper {
                smoothing: 0.075,
                ..LossHyper::default()
            },
            mining: MiningConfig::paper(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.refine_learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates must be positive, weight_decay non-negative".into()));
        }
        if self.batch_size == 0 || self.batches_per_query == 0 {
            return Err(Error::Config("batch_size and batches_per_query must be positive".into()));
        }
        if self.pair_batch < 2 {
            return Err(Error::Config(format!("pair_batch {} must be at least 2", self.pair_batch)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if !(self.text_dropout >= 0.0 && self.image_dropout >= 0.0 && self.text_dropout + self.image_dropout <= 1.0) {
            return Err(Error::Config("dropout rates must be non-negative and sum to at most 1".into()));
        }
        let w = &self.weights;
        if [w.mask, w.distillation, w.contrastive, w.clustering].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.loss.validate()?;
        self.mining.validate()?;
        self.expansion.validate()
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Grads,
    v: Grads,
}

impl AdamW {
    pub fn new(params: &ParamSet, learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Grads::zeros_like(params),
            v: Grads::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads.get(i).as_slice();
            let m = self.m.get_mut(i).as_mut_slice();
            for (mk, gk) in m.iter_mut().zip(g) {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
            }
            let v = self.v.get_mut(i).as_mut_slice();
            for (vk, gk) in v.iter_mut().zip(g) {
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
            }
            let m = self.m.get(i).as_slice();
            let v = self.v.get(i).as_slice();
            let p = params.tensor_mut(i).as_mut_slice();
            for k in 0..p.len() {
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                p[k] -= self.learning_rate * (update + self.weight_decay * p[k]);
            }
        }
    }
}

/// One context of a batch together with the modalities it is shown with.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub context: &'a MultiModalContext,
    pub modality: ModalityMask,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mask: f64,
    pub distillation: f64,
    pub contrastive: f64,
    pub clustering: f64,
    pub total: f64,
}

/// Weighted training objective of one batch and its gradient with respect
/// to `student`. When `paired` is set, items `(2i, 2i+1)` are positive
/// pairs and the contrastive and clustering terms are included.
pub fn batch_objective(
    encoder: &Encoder,
    student: &ParamSet,
    teacher: &ParamSet,
    items: &[BatchItem],
    paired: bool,
    hyper: &LossHyper,
    weights: &LossWeights,
) -> Result<(LossTerms, Grads)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let with_pairs = paired && (weights.contrastive > 0.0 || weights.clustering > 0.0);
    let mut tape = Tape::new(student);
    let mut outs = Vec::with_capacity(items.len());
    for item in items {
        outs.push(encoder.forward(&mut tape, item.context, item.modality, with_pairs)?);
    }
    let probs: Vec<Vec<f64>> = outs.iter().map(|o| tape.value(o.probs).as_slice().to_vec()).collect();
    let mut prob_grads = vec![vec![0.0; probs[0].len()]; items.len()];
    let mut terms = LossTerms::default();

    if weights.mask > 0.0 {
        let targets: Vec<usize> = items.iter().map(|i| i.context.entity_id).collect();
        let (l, g) = masked_entity_loss(&probs, &targets, hyper.smoothing)?;
        terms.mask = l;
        add_scaled(&mut prob_grads, &g, weights.mask);
    }
    if weights.distillation > 0.0 {
        let pseudo = items
            .iter()
            .map(|i| encoder.predict_distribution(teacher, i.context, i.modality))
            .collect::<Result<Vec<_>>>()?;
        let (l, g) = distillation_loss_batch(&pseudo, &probs)?;
        terms.distillation = l;
        add_scaled(&mut prob_grads, &g, weights.distillation);
    }
    let mut seeds: Vec<(crate::autodiff::Var, Matrix)> = outs
        .iter()
        .zip(prob_grads)
        .map(|(o, g)| (o.probs, Matrix::row_vector(g)))
        .collect();

    if with_pairs {
        if weights.contrastive > 0.0 {
            let z: Vec<Vec<f64>> = outs
                .iter()
                .map(|o| tape.value(o.z.expect("projections")).as_slice().to_vec())
                .collect();
            let out = contrastive_loss(&z, hyper)?;
            terms.contrastive = out.loss;
            for (o, g) in outs.iter().zip(out.grad) {
                seeds.push((o.z.expect("projections"), scaled_row(g, weights.contrastive)));
            }
        }
        if weights.clustering > 0.0 {
            let c: Vec<Vec<f64>> = outs
                .iter()
                .map(|o| tape.value(o.c.expect("projections")).as_slice().to_vec())
                .collect();
            let (l, g) = clustering_loss(&c, hyper)?;
            terms.clustering = l;
            for (o, g) in outs.iter().zip(g) {
                seeds.push((o.c.expect("projections"), scaled_row(g, weights.clustering)));
            }
        }
    }
    terms.total = weights.mask * terms.mask
        + weights.distillation * terms.distillation
        + weights.contrastive * terms.contrastive
        + weights.clustering * terms.clustering;
    Ok((terms, tape.backward(&seeds)))
}

fn add_scaled(acc: &mut [Vec<f64>], g: &[Vec<f64>], w: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += w * y;
        }
    }
}

fn scaled_row(g: Vec<f64>, w: f64) -> Matrix {
    Matrix::row_vector(g.into_iter().map(|v| v * w).collect())
}

/// A contrastive batch: `contexts[2i]` and `contexts[2i+1]` are two contexts
/// (indices into [`Corpus::contexts`]) of the same entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub query: usize,
    pub entities: Vec<usize>,
    pub contexts: Vec<usize>,
}

/// Positive pool (seeds plus ranks `1..=K_pos`) and negative pool (ranks
/// `L_neg..=U_neg`) of one ranked list.
pub fn mining_pools(ranked: &[usize], seeds: &[usize], mining: &MiningConfig) -> Result<(BTreeSet<usize>, Vec<usize>)> {
    mining.validate()?;
    if ranked.len() < mining.negative_to {
        return Err(Error::InvalidArgument(format!(
            "expansion has {} entities but mining reads rank {}; raise the expansion target size",
            ranked.len(),
            mining.negative_to
        )));
    }
    let mut positive: BTreeSet<usize> = seeds.iter().copied().collect();
    positive.extend(&ranked[..mining.top_positive]);
    let negative = ranked[mining.negative_from - 1..mining.negative_to].to_vec();
    Ok((positive, negative))
}

fn draw_entities(pool: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.is_empty() || count == 0 {
        return Vec::new();
    }
    if pool.len() >= count {
        pool.choose_multiple(rng, count).copied().collect()
    } else {
        (0..count).map(|_| *pool.choose(rng).expect("non-empty")).collect()
    }
}

/// Draws `n_batches` batches of `n_pairs` pairs for one query. A fraction
/// ρ_pos of each batch comes from the positive pool, the rest from the
/// negative pool. Entities with a single context form self-pairs.
pub fn mine_pairs(
    query: usize,
    expansion: &RankedExpansion,
    corpus: &Corpus,
    mining: &MiningConfig,
    n_pairs: usize,
    n_batches: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairBatch>> {
    let (positive, negative) = mining_pools(&expansion.ids(), &expansion.seeds, mining)?;
    let positive: Vec<usize> = positive.into_iter().collect();
    let n_pos = ((mining.positive_fraction * n_pairs as f64).round() as usize).min(n_pairs);
    let mut out = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut entities = draw_entities(&positive, n_pos, rng);
        entities.extend(draw_entities(&negative, n_pairs - n_pos, rng));
        let mut contexts = Vec::with_capacity(2 * entities.len());
        for &e in &entities {
            let idx = corpus.context_indices_of(e);
            match idx.len() {
                0 => {
                    return Err(Error::InvalidArgument(format!("entity {e} has no contexts to pair")));
                }
                1 => contexts.extend([idx[0], idx[0]]),
                _ => contexts.extend(idx.choose_multiple(rng, 2).copied()),
            }
        }
        out.push(PairBatch {
            query,
            entities,
            contexts,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: String,
    pub round: usize,
    pub mask: f64,
    pub distillation: f64,
    pub contrastive: f64,
    pub clustering: f64,
    pub total: f64,
}

/// Model of one round together with its expansions.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub round: usize,
    pub model: Model,
    pub expansions: Vec<RankedExpansion>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub snapshots: Vec<Snapshot>,
    pub log: Vec<LogRecord>,
}

/// Mutable state of one training run: model, optimiser, RNG and log.
pub struct Trainer<'c> {
    corpus: &'c Corpus,
    config: TrainConfig,
    model: Model,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    log: Vec<LogRecord>,
}

impl<'c> Trainer<'c> {
    pub fn new(model: Model, corpus: &'c Corpus, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config().entity_count != corpus.entity_count() {
            return Err(Error::Config(format!(
                "model predicts {} entities, corpus has {}",
                model.config().entity_count,
                corpus.entity_count()
            )));
        }
        let optimizer = AdamW::new(&model.student, config.learning_rate, config.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(Trainer {
            corpus,
            config,
            model,
            optimizer,
            rng,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn into_parts(self) -> (Model, Vec<LogRecord>) {
        (self.model, self.log)
    }

    fn modality(&mut self, ctx: &MultiModalContext) -> ModalityMask {
        let u: f64 = self.rng.random();
        if u < self.config.text_dropout {
            ModalityMask {
                drop_text: true,
                drop_image: false,
            }
        } else if u < self.config.text_dropout + self.config.image_dropout && ctx.patches.is_some() {
            ModalityMask {
                drop_text: false,
                drop_image: true,
            }
        } else {
            ModalityMask::NONE
        }
    }

    fn augment(&mut self, ctx: &MultiModalContext) -> MultiModalContext {
        let mut out = ctx.clone();
        let p = self.config.token_dropout;
        if p > 0.0 {
            for (i, t) in out.tokens.iter_mut().enumerate() {
                if i != out.mask_index && self.rng.random_bool(p) {
                    *t = UNK_ID;
                }
            }
        }
        let sigma = self.config.patch_noise;
        if sigma > 0.0 {
            if let Some(m) = out.patches.as_mut() {
                for v in m.as_mut_slice() {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    *v += sigma * z;
                }
            }
        }
        out
    }

    fn step(&mut self, context_ids: &[usize], paired: bool, phase: &str, round: usize) -> Result<()> {
        let corpus = self.corpus;
        let mut contexts = Vec::with_capacity(context_ids.len());
        let mut modalities = Vec::with_capacity(context_ids.len());
        for &i in context_ids {
            let context = &corpus.contexts()[i];
            modalities.push(self.modality(context));
            contexts.push(self.augment(context));
        }
        let items: Vec<BatchItem> = contexts
            .iter()
            .zip(modalities)
            .map(|(context, modality)| BatchItem { context, modality })
            .collect();
        let mut weights = self.config.weights;
        if !paired {
            weights.contrastive = 0.0;
            weights.clustering = 0.0;
        }
        let (terms, grads) = batch_objective(
            &self.model.encoder,
            &self.model.student,
            &self.model.teacher,
            &items,
            paired,
            &self.config.loss,
            &weights,
        )?;
        let step = self.log.len();
        if !terms.total.is_finite() || !grads.is_finite() {
            let mut batch: Vec<usize> = items.iter().map(|i| i.context.entity_id).collect();
            batch.sort_unstable();
            batch.dedup();
            return Err(Error::NonFinite {
                step,
                phase: phase.to_string(),
                batch,
            });
        }
        self.optimizer.step(&mut self.model.student, &grads);
        self.model.ema_update(self.config.momentum)?;
        self.log.push(LogRecord {
            step,
            phase: phase.to_string(),
            round,
            mask: terms.mask,
            distillation: terms.distillation,
            contrastive: terms.contrastive,
            clustering: terms.clustering,
            total: terms.total,
        });
        Ok(())
    }

    /// Masked-entity plus distillation epochs over all contexts.
    pub fn pretrain(&mut self) -> Result<()> {
        let mut order: Vec<usize> = (0..self.corpus.contexts().len()).collect();
        self.optimizer.learning_rate = self.config.learning_rate;
        for _ in 0..self.config.pretrain_epochs {
            order.shuffle(&mut self.rng);
            let batches: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
            for b in batches {
                self.step(&b, false, "pretrain", 0)?;
            }
        }
        Ok(())
    }

    /// Mines pair batches for every query from `expansions`.
    pub fn mine(&mut self, expansions: &[RankedExpansion]) -> Result<Vec<PairBatch>> {
        let mut out = Vec::new();
        for (q, e) in expansions.iter().enumerate() {
            out.extend(mine_pairs(
                q,
                e,
                self.corpus,
                &self.config.mining,
                self.config.pair_batch,
                self.config.batches_per_query,
                &mut self.rng,
            )?);
        }
        Ok(out)
    }

    /// Four-loss refinement over the mined batches, starting from fresh optimiser moments.
    pub fn refine(&mut self, batches: &[PairBatch], round: usize) -> Result<()> {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        self.optimizer = AdamW::new(&self.model.student, self.config.refine_learning_rate, self.config.weight_decay);
        for _ in 0..self.config.refine_epochs {
            order.shuffle(&mut self.rng);
            for &b in &order {
                self.step(&batches[b].contexts, true, "refine", round)?;
            }
        }
        Ok(())
    }

    fn mining_expansion(&self) -> ExpansionConfig {
        ExpansionConfig {
            target_size: self.config.expansion.target_size.max(self.config.mining.negative_to),
            ..self.config.expansion
        }
    }

    fn snapshot(&self, round: usize) -> Result<Snapshot> {
        Ok(Snapshot {
            round,
            model: self.model.clone(),
            expansions: expand_all(&self.model, self.corpus, &self.config.expansion)?,
        })
    }
}

/// Pretrains `model` alone and returns it with the loss curve.
pub fn pretrain(model: Model, corpus: &Corpus, config: &TrainConfig) -> Result<(Model, Vec<LogRecord>)> {
    let mut t = Trainer::new(model, corpus, config.clone())?;
    t.pretrain()?;
    Ok(t.into_parts())
}

/// Pretraining followed by `R` rounds of expand, mine, refine. Returns
/// `R+1` snapshots, the first taken right after pretraining.
pub fn train_full(corpus: &Corpus, encoder: EncoderConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    if corpus.queries().is_empty() {
        return Err(Error::InvalidArgument("corpus has no queries to mine from".into()));
    }
    let mut t = Trainer::new(Model::new(encoder)?, corpus, config.clone())?;
    t.pretrain()?;
    let mut snapshots = vec![t.snapshot(0)?];
    for round in 1..=config.rounds {
        let mining_config = t.mining_expansion();
        let mined = expand_all(&t.model, corpus, &mining_config)?;
        let batches = t.mine(&mined)?;
        t.refine(&batches, round)?;
        snapshots.push(t.snapshot(round)?);
    }
    let (model, log) = t.into_parts();
    Ok(TrainOutcome { model, snapshots, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Entity, SyntheticSpec, MASK_ID};
    use crate::objectives::gradient_check;
    use std::collections::BTreeMap;

    fn single_context_corpus() -> Corpus {
        let vocab: BTreeMap<String, u32> = crate::corpus::vocab_with_reserved(["a", "b"]);
        Corpus::new(
            vec![Entity {
                id: 0,
                name: "x".into(),
                aliases: vec![],
                class_ids: vec![0],
            }],
            vec![MultiModalContext {
                entity_id: 0,
                tokens: vec![3, MASK_ID, 4],
                mask_index: 1,
                patches: None,
            }],
            vec![],
            vocab,
            2,
            2,
        )
        .unwrap()
    }

    fn small_encoder(corpus: &Corpus) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 8,
            n_heads: 2,
            ffn_dim: 16,
            contrastive_dim: 6,
            cluster_count: 5,
            ..EncoderConfig::default()
        }
        .fitted_to(corpus)
    }

    fn tiny_synthetic() -> Corpus {
        generate_synthetic(&SyntheticSpec {
            n_classes: 3,
            entities_per_class: 12,
            n_random_negatives: 4,
            max_contexts_per_entity: 3,
            queries_per_seed_size: 1,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            pretrain_epochs: 2,
            batch_size: 16,
            pair_batch: 3,
            batches_per_query: 1,
            mining: MiningConfig {
                top_positive: 3,
                negative_from: 8,
                negative_to: 12,
                positive_fraction: 0.5,
            },
            expansion: ExpansionConfig {
                target_size: 10,
                ..ExpansionConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn overfits_single_context() {
        let corpus = single_context_corpus();
        let cfg = TrainConfig {
            pretrain_epochs: 200,
            momentum: 1.0,
            loss: LossHyper {
                smoothing: 0.0,
                ..LossHyper::default()
            },
            ..TrainConfig::default()
        };
        let model = Model::new(small_encoder(&corpus)).unwrap();
        let initial = model.teacher.clone();
        let (model, log) = pretrain(model, &corpus, &cfg).unwrap();
        assert_eq!(log.len(), 200);
        assert!(log.last().unwrap().mask < 0.01);
        assert_eq!(model.teacher, initial);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let corpus = tiny_synthetic();
        let cfg = quick_config();
        let run = || pretrain(Model::new(small_encoder(&corpus)).unwrap(), &corpus, &cfg).unwrap();
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a.student, b.student);
    }

    #[test]
    fn pools_follow_rank_bounds() {
        let ranked: Vec<usize> = (100..300).collect();
        let mining = MiningConfig {
            top_positive: 3,
            negative_from: 170,
            negative_to: 200,
            positive_fraction: 0.5,
        };
        let (pos, neg) = mining_pools(&ranked, &[7], &mining).unwrap();
        assert_eq!(pos, BTreeSet::from([7, 100, 101, 102]));
        assert_eq!(neg.len(), 31);
        assert_eq!(neg[0], 269);
        assert!(pos.iter().all(|p| !neg.contains(p)));
        assert!(mining_pools(&ranked[..150], &[7], &mining).is_err());
    }

    #[test]
    fn single_context_entities_self_pair() {
        let corpus = tiny_synthetic();
        let single = (0..corpus.entity_count())
            .find(|&e| corpus.context_indices_of(e).len() == 1)
            .expect("long tail produces single-context entities");
        let expansion = RankedExpansion {
            class_id: 0,
            seeds: vec![single],
            ranked: (0..corpus.entity_count()).filter(|&e| e != single).map(|e| (e, 0.0)).collect(),
        };
        let mining = MiningConfig {
            top_positive: 1,
            negative_from: 2,
            negative_to: 3,
            positive_fraction: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut found = false;
        for _ in 0..20 {
            let b = &mine_pairs(0, &expansion, &corpus, &mining, 2, 1, &mut rng).unwrap()[0];
            for (i, &e) in b.entities.iter().enumerate() {
                if e == single {
                    assert_eq!(b.contexts[2 * i], b.contexts[2 * i + 1]);
                    found = true;
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn combined_gradient_matches_fd() {
        let corpus = tiny_synthetic();
        let model = Model::new(small_encoder(&corpus)).unwrap();
        let mut teacher = model.teacher.clone();
        // Move the teacher off the student so distillation has a gradient.
        for i in 0..teacher.len() {
            for v in teacher.tensor_mut(i).as_mut_slice() {
                *v *= 0.9;
            }
        }
        let items: Vec<BatchItem> = [0usize, 1, 5, 6, 10, 11]
            .iter()
            .map(|&i| BatchItem {
                context: &corpus.contexts()[i],
                modality: ModalityMask::NONE,
            })
            .collect();
        let hyper = LossHyper::default();
        let weights = LossWeights::default();
        let (terms, grads) =
            batch_objective(&model.encoder, &model.student, &teacher, &items, true, &hyper, &weights).unwrap();
        assert!(terms.contrastive > 0.0 && terms.clustering > 0.0 && terms.distillation > 0.0);
        let err = gradient_check(
            |p| Ok(batch_objective(&model.encoder, p, &teacher, &items, true, &hyper, &weights)?.0.total),
            &model.student,
            &grads,
            150,
            1e-4,
            7,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn train_full_snapshot_counts_and_zero_rounds() {
        let corpus = tiny_synthetic();
        let enc = small_encoder(&corpus);
        let cfg = TrainConfig {
            rounds: 1,
            ..quick_config()
        };
        let full = train_full(&corpus, enc.clone(), &cfg).unwrap();
        assert_eq!(full.snapshots.len(), 2);
        assert!(full.log.iter().any(|r| r.phase == "refine" && r.contrastive > 0.0));
        assert!(full.log.iter().all(|r| r.total.is_finite()));

        let zero = TrainConfig { rounds: 0, ..cfg };
        let out = train_full(&corpus, enc.clone(), &zero).unwrap();
        assert_eq!(out.snapshots.len(), 1);
        let (alone, _) = pretrain(Model::new(enc).unwrap(), &corpus, &zero).unwrap();
        assert_eq!(out.model.student, alone.student);
        assert_eq!(out.model.teacher, alone.teacher);
    }

    #[test]
    fn train_full_needs_queries() {
        let corpus = single_context_corpus();
        assert!(train_full(&corpus, small_encoder(&corpus), &TrainConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        let bad = TrainConfig {
            momentum: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_mining = MiningConfig {
            top_positive: 50,
            ..MiningConfig::default()
        };
        assert!(bad_mining.validate().is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn mining_pools_are_disjoint(
            k in 1usize..20,
            gap in 1usize..20,
            width in 0usize..30,
            seeds in proptest::collection::btree_set(1000usize..1010, 1..5),
        ) {
            let mining = MiningConfig {
                top_positive: k,
                negative_from: k + gap,
                negative_to: k + gap + width,
                positive_fraction: 0.5,
            };
            let ranked: Vec<usize> = (0..mining.negative_to).collect();
            let seeds: Vec<usize> = seeds.into_iter().collect();
            let (pos, neg) = mining_pools(&ranked, &seeds, &mining).unwrap();
            proptest::prop_assert_eq!(neg.len(), width + 1);
            proptest::prop_assert_eq!(pos.len(), k + seeds.len());
            proptest::prop_assert!(neg.iter().all(|e| !pos.contains(e)));
        }

        #[test]
        fn teacher_follows_ema_rule(m in 0.0f64..=1.0, steps in 1usize..4) {
            let corpus = single_context_corpus();
            let model = Model::new(small_encoder(&corpus)).unwrap();
            let config = TrainConfig {
                momentum: m,
                pretrain_epochs: 1,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(model, &corpus, config).unwrap();
            for _ in 0..steps {
                let before = t.model().teacher.clone();
                t.pretrain().unwrap();
                let after = &t.model().teacher;
                let student = &t.model().student;
                for i in 0..after.len() {
                    let (old, new, s) = (before.tensor(i), after.tensor(i), student.tensor(i));
                    for k in 0..old.len() {
                        let expect = m * old.as_slice()[k] + (1.0 - m) * s.as_slice()[k];
                        proptest::prop_assert_eq!(new.as_slice()[k].to_bits(), expect.to_bits());
                    }
                }
            }
        }
    }
}
