//! Ranking metrics and the modality-ablation protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Query};
use crate::encoder::{ModalityMask, Model};
use crate::error::{Error, Result};
use crate::expansion::{expand_queries, ExpansionConfig, RankedExpansion, Representations};

/// Cut-offs reported for both MAP and P.
pub const CUTOFFS: [usize; 4] = [10, 20, 50, 100];

/// |top-K ∩ gt| / K. Short lists still divide by K.
pub fn precision_at_k(ranked: &[usize], gt: &BTreeSet<usize>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let hits = ranked.iter().take(k).filter(|e| gt.contains(e)).count();
    Ok(hits as f64 / k as f64)
}

/// Σ_{k≤K} P@k·rel(k) / min(K, |gt|).
pub fn average_precision_at_k(ranked: &[usize], gt: &BTreeSet<usize>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("ground truth is empty".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, e) in ranked.iter().take(k).enumerate() {
        if gt.contains(e) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / k.min(gt.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub class_id: usize,
    pub seeds: Vec<usize>,
    /// AP@K in [`CUTOFFS`] order.
    pub ap: [f64; 4],
    /// P@K in [`CUTOFFS`] order.
    pub precision: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub queries: usize,
    pub map: [f64; 4],
    pub precision: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_query: Vec<QueryMetrics>,
    pub per_class: BTreeMap<usize, ClassMetrics>,
    pub map: [f64; 4],
    pub precision: [f64; 4],
    /// Mean of the eight global numbers.
    pub avg: f64,
}

/// Column layout of the JSON summary.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    #[serde(rename = "MAP@10")]
    pub map10: f64,
    #[serde(rename = "MAP@20")]
    pub map20: f64,
    #[serde(rename = "MAP@50")]
    pub map50: f64,
    #[serde(rename = "MAP@100")]
    pub map100: f64,
    #[serde(rename = "P@10")]
    pub p10: f64,
    #[serde(rename = "P@20")]
    pub p20: f64,
    #[serde(rename = "P@50")]
    pub p50: f64,
    #[serde(rename = "P@100")]
    pub p100: f64,
    #[serde(rename = "Avg")]
    pub avg: f64,
}

fn mean4(rows: &[[f64; 4]]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.map(|v| v / rows.len() as f64)
}

impl MetricReport {
    /// MAP@K for a cut-off in [`CUTOFFS`].
    pub fn map_at(&self, k: usize) -> Option<f64> {
        CUTOFFS.iter().position(|&c| c == k).map(|i| self.map[i])
    }

    pub fn summary(&self) -> Summary {
        Summary {
            map10: self.map[0],
            map20: self.map[1],
            map50: self.map[2],
            map100: self.map[3],
            p10: self.precision[0],
            p20: self.precision[1],
            p50: self.precision[2],
            p100: self.precision[3],
            avg: self.avg,
        }
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())? + "\n")
    }

    /// One row per query.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,seeds");
        for k in CUTOFFS {
            out.push_str(&format!(",MAP@{k}"));
        }
        for k in CUTOFFS {
            out.push_str(&format!(",P@{k}"));
        }
        out.push('\n');
        for q in &self.per_query {
            let seeds: Vec<String> = q.seeds.iter().map(|s| s.to_string()).collect();
            out.push_str(&format!("{},{}", q.class_id, seeds.join(" ")));
            for v in q.ap.iter().chain(&q.precision) {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

fn find_expansion<'a>(expansions: &'a [RankedExpansion], query: &Query) -> Result<&'a RankedExpansion> {
    expansions.iter().find(|e| e.matches(query)).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "no expansion for query class {} seeds {:?}",
            query.class_id, query.seeds
        ))
    })
}

fn ranked_without_seeds(expansion: &RankedExpansion, query: &Query) -> Vec<usize> {
    expansion
        .ranked
        .iter()
        .map(|&(e, _)| e)
        .filter(|e| !query.seeds.contains(e))
        .collect()
}

/// Unweighted mean of AP@K over `queries`.
pub fn map_at_k(expansions: &[RankedExpansion], queries: &[Query], k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    let mut total = 0.0;
    for q in queries {
        let ranked = ranked_without_seeds(find_expansion(expansions, q)?, q);
        total += average_precision_at_k(&ranked, &q.targets(), k)?;
    }
    Ok(total / queries.len() as f64)
}

/// Full report over `queries`. Seeds are removed from both ranked lists and
/// ground truth.
pub fn evaluate(expansions: &[RankedExpansion], queries: &[Query]) -> Result<MetricReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    let mut per_query = Vec::with_capacity(queries.len());
    for q in queries {
        let ranked = ranked_without_seeds(find_expansion(expansions, q)?, q);
        let gt = q.targets();
        let mut ap = [0.0; 4];
        let mut precision = [0.0; 4];
        for (i, &k) in CUTOFFS.iter().enumerate() {
            ap[i] = average_precision_at_k(&ranked, &gt, k)?;
            precision[i] = precision_at_k(&ranked, &gt, k)?;
        }
        per_query.push(QueryMetrics {
            class_id: q.class_id,
            seeds: q.seeds.clone(),
            ap,
            precision,
        });
    }
    let mut grouped: BTreeMap<usize, (Vec<[f64; 4]>, Vec<[f64; 4]>)> = BTreeMap::new();
    for m in &per_query {
        let g = grouped.entry(m.class_id).or_default();
        g.0.push(m.ap);
        g.1.push(m.precision);
    }
    let per_class = grouped
        .into_iter()
        .map(|(c, (ap, p))| {
            (
                c,
                ClassMetrics {
                    queries: ap.len(),
                    map: mean4(&ap),
                    precision: mean4(&p),
                },
            )
        })
        .collect();
    let map = mean4(&per_query.iter().map(|m| m.ap).collect::<Vec<_>>());
    let precision = mean4(&per_query.iter().map(|m| m.precision).collect::<Vec<_>>());
    let avg = (map.iter().sum::<f64>() + precision.iter().sum::<f64>()) / 8.0;
    Ok(MetricReport {
        per_query,
        per_class,
        map,
        precision,
        avg,
    })
}

/// Which modality is withheld, and from whom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationMode {
    Baseline,
    /// Text removed from seed entities.
    TextSeeds,
    /// Text removed from candidate entities.
    TextCandidates,
    ImageSeeds,
    ImageCandidates,
    /// Text removed everywhere.
    Text,
    Image,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::Baseline,
        AblationMode::TextSeeds,
        AblationMode::TextCandidates,
        AblationMode::ImageSeeds,
        AblationMode::ImageCandidates,
        AblationMode::Text,
        AblationMode::Image,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::TextSeeds => "T_s",
            AblationMode::TextCandidates => "T_c",
            AblationMode::ImageSeeds => "V_s",
            AblationMode::ImageCandidates => "V_c",
            AblationMode::Text => "T",
            AblationMode::Image => "V",
        }
    }

    /// Modality masks for (seeds, candidates).
    pub fn masks(self) -> (ModalityMask, ModalityMask) {
        let text = ModalityMask {
            drop_text: true,
            drop_image: false,
        };
        let image = ModalityMask {
            drop_text: false,
            drop_image: true,
        };
        let none = ModalityMask::NONE;
        match self {
            AblationMode::Baseline => (none, none),
            AblationMode::TextSeeds => (text, none),
            AblationMode::TextCandidates => (none, text),
            AblationMode::ImageSeeds => (image, none),
            AblationMode::ImageCandidates => (none, image),
            AblationMode::Text => (text, text),
            AblationMode::Image => (image, image),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.label() == s.trim())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown ablation mode `{s}` (expected one of baseline, T_s, T_c, V_s, V_c, T, V)"
                ))
            })
    }
}

/// Re-runs expansion for every query of `corpus` with the modality named
/// by `mode` replaced by its learned placeholder.
pub fn ablate_modality(
    model: &Model,
    corpus: &Corpus,
    mode: AblationMode,
    config: &ExpansionConfig,
) -> Result<MetricReport> {
    let (seed, candidate) = mode.masks();
    let reps = Representations::from_model(model, corpus, seed, candidate)?;
    let expansions = expand_queries(corpus.queries(), &reps, config)?;
    evaluate(&expansions, corpus.queries())
}
