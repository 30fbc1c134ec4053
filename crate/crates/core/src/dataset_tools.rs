//! Dataset-construction statistics over precomputed features: image
//! re-ranking, Fleiss' kappa and embedding diversity.
//!
//! `rerank.bin` layout:
//!
//! ```text
//! MESE-RRK v1\n
//! <one line of JSON: RerankIndex>\n
//! vectors × dim little-endian f32 values
//! ```
//!
//! The index refers to vectors by their position in the trailing block.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm};

pub const RERANK_TAG: &str = "MESE-RRK v1";

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageCandidate {
    pub id: usize,
    pub clip_image: Vec<f64>,
    /// Object-region features; may be empty.
    pub objects: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankQuery {
    pub clip_text: Vec<f64>,
    pub typical_image: Vec<f64>,
    pub alpha: f64,
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = l2_norm(v);
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::InvalidArgument(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// α·(image·text) + (1−α)·max_j cos(object_j, typical). No objects → the
/// second term is 0.
pub fn score_image(candidate: &ImageCandidate, query: &RerankQuery) -> Result<f64> {
    check_alpha(query.alpha)?;
    check_unit(&candidate.clip_image, "candidate image")?;
    check_unit(&query.clip_text, "query text")?;
    check_unit(&query.typical_image, "typical image")?;
    if candidate.clip_image.len() != query.clip_text.len() {
        return Err(Error::Shape("image and text features differ in dimension".into()));
    }
    let mut best: Option<f64> = None;
    for (j, o) in candidate.objects.iter().enumerate() {
        check_unit(o, &format!("object {j} of candidate {}", candidate.id))?;
        if o.len() != query.typical_image.len() {
            return Err(Error::Shape("object and typical image differ in dimension".into()));
        }
        let c = dot(o, &query.typical_image);
        best = Some(best.map_or(c, |b: f64| b.max(c)));
    }
    let alpha = query.alpha;
    Ok(alpha * dot(&candidate.clip_image, &query.clip_text) + (1.0 - alpha) * best.unwrap_or(0.0))
}

/// Highest-scoring candidate id and its score; ties go to the lowest id.
pub fn select_best(candidates: &[ImageCandidate], query: &RerankQuery) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for c in candidates {
        let s = score_image(c, query)?;
        best = match best {
            Some((id, b)) if b > s || (b == s && id < c.id) => Some((id, b)),
            _ => Some((c.id, s)),
        };
    }
    best.ok_or_else(|| Error::InvalidArgument("no candidates to select from".into()))
}

/// Fleiss' κ for an items × categories count table where every row sums
/// to `raters`.
pub fn fleiss_kappa(table: &[Vec<usize>], raters: usize) -> Result<f64> {
    if raters < 2 {
        return Err(Error::InvalidArgument("kappa needs at least 2 raters".into()));
    }
    if table.is_empty() {
        return Err(Error::InvalidArgument("kappa needs at least one item".into()));
    }
    let k = table[0].len();
    let n = raters as f64;
    let mut totals = vec![0.0; k];
    let mut agreement = 0.0;
    for (i, row) in table.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Shape(format!("row {i} has {} categories, expected {k}", row.len())));
        }
        let sum: usize = row.iter().sum();
        if sum != raters {
            return Err(Error::InvalidArgument(format!("row {i} sums to {sum}, expected {raters}")));
        }
        let sq: f64 = row.iter().map(|&c| (c * c) as f64).sum();
        agreement += (sq - n) / (n * (n - 1.0));
        for (t, &c) in totals.iter_mut().zip(row) {
            *t += c as f64;
        }
    }
    let items = table.len() as f64;
    let p_bar = agreement / items;
    let p_e: f64 = totals.iter().map(|t| (t / (items * n)).powi(2)).sum();
    if 1.0 - p_e <= 1e-12 {
        return Err(Error::Undefined(
            "kappa undefined: every rating falls in one category".into(),
        ));
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Inverse of the mean pairwise cosine similarity.
pub fn diversity(embeddings: &[Vec<f64>]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidArgument("diversity needs at least 2 embeddings".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let (a, b) = (&embeddings[i], &embeddings[j]);
            if a.len() != b.len() {
                return Err(Error::Shape("embeddings differ in dimension".into()));
            }
            total += dot(a, b) / (l2_norm(a) * l2_norm(b));
            pairs += 1;
        }
    }
    let mean = total / pairs as f64;
    if mean <= 1e-6 {
        return Err(Error::Undefined(format!(
            "diversity undefined: mean cosine similarity {mean} is not positive"
        )));
    }
    Ok(1.0 / mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateIndex {
    pub id: usize,
    pub image: usize,
    #[serde(default)]
    pub objects: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupIndex {
    pub label: String,
    pub clip_text: usize,
    pub typical_image: usize,
    pub candidates: Vec<CandidateIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankIndex {
    pub dim: usize,
    pub vectors: usize,
    pub groups: Vec<GroupIndex>,
}

/// One entity's candidate images with resolved vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankGroup {
    pub label: String,
    pub clip_text: Vec<f64>,
    pub typical_image: Vec<f64>,
    pub candidates: Vec<ImageCandidate>,
}

impl RerankGroup {
    pub fn query(&self, alpha: f64) -> RerankQuery {
        RerankQuery {
            clip_text: self.clip_text.clone(),
            typical_image: self.typical_image.clone(),
            alpha,
        }
    }
}

/// Serialises groups; vectors are stored in reading order.
pub fn write_rerank_file(groups: &[RerankGroup]) -> Result<Vec<u8>> {
    let dim = groups.first().map_or(0, |g| g.clip_text.len());
    let mut order: Vec<&[f64]> = Vec::new();
    fn push<'a>(order: &mut Vec<&'a [f64]>, dim: usize, v: &'a [f64]) -> Result<usize> {
        if v.len() != dim {
            return Err(Error::Shape(format!("vector of length {} in a file of dim {dim}", v.len())));
        }
        order.push(v);
        Ok(order.len() - 1)
    }
    let mut index_groups = Vec::with_capacity(groups.len());
    for g in groups {
        let clip_text = push(&mut order, dim, &g.clip_text)?;
        let typical_image = push(&mut order, dim, &g.typical_image)?;
        let mut candidates = Vec::with_capacity(g.candidates.len());
        for c in &g.candidates {
            let image = push(&mut order, dim, &c.clip_image)?;
            let objects = c.objects.iter().map(|o| push(&mut order, dim, o)).collect::<Result<Vec<_>>>()?;
            candidates.push(CandidateIndex {
                id: c.id,
                image,
                objects,
            });
        }
        index_groups.push(GroupIndex {
            label: g.label.clone(),
            clip_text,
            typical_image,
            candidates,
        });
    }
    let index = RerankIndex {
        dim,
        vectors: order.len(),
        groups: index_groups,
    };
    let mut out = format!("{RERANK_TAG}\n").into_bytes();
    out.extend(serde_json::to_vec(&index)?);
    out.push(b'\n');
    for v in order {
        for x in v {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses `rerank.bin` bytes; `path` is used in error messages only.
pub fn read_rerank_file(bytes: &[u8], path: &Path) -> Result<Vec<RerankGroup>> {
    let header = format!("{RERANK_TAG}\n");
    if !bytes.starts_with(header.as_bytes()) {
        return Err(Error::parse(path, 1, format!("missing `{RERANK_TAG}` header")));
    }
    let rest = &bytes[header.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(path, 2, "missing JSON index line"))?;
    let index: RerankIndex =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::parse(path, 2, e.to_string()))?;
    let body = &rest[nl + 1..];
    if body.len() != index.vectors * index.dim * 4 {
        return Err(Error::parse(
            path,
            3,
            format!("expected {} bytes of vectors, found {}", index.vectors * index.dim * 4, body.len()),
        ));
    }
    let floats: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let vector = |i: usize| -> Result<Vec<f64>> {
        if i >= index.vectors {
            return Err(Error::parse(path, 2, format!("vector {i} outside {} stored", index.vectors)));
        }
        // f32 storage loses a little of the unit norm; restore it.
        let v = floats[i * index.dim..(i + 1) * index.dim].to_vec();
        let n = l2_norm(&v);
        Ok(if n > 0.0 { v.into_iter().map(|x| x / n).collect() } else { v })
    };
    index
        .groups
        .iter()
        .map(|g| {
            Ok(RerankGroup {
                label: g.label.clone(),
                clip_text: vector(g.clip_text)?,
                typical_image: vector(g.typical_image)?,
                candidates: g
                    .candidates
                    .iter()
                    .map(|c| {
                        Ok(ImageCandidate {
                            id: c.id,
                            clip_image: vector(c.image)?,
                            objects: c.objects.iter().map(|&o| vector(o)).collect::<Result<_>>()?,
                        })
                    })
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn load_rerank_file(path: impl AsRef<Path>) -> Result<Vec<RerankGroup>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_rerank_file(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub label: String,
    pub selected: usize,
    pub score: f64,
}

/// One selection per group.
pub fn select_all(groups: &[RerankGroup], alpha: f64) -> Result<Vec<Selection>> {
    check_alpha(alpha)?;
    groups
        .iter()
        .map(|g| {
            let (selected, score) = select_best(&g.candidates, &g.query(alpha))?;
            Ok(Selection {
                label: g.label.clone(),
                selected,
                score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = l2_norm(v);
        v.iter().map(|x| x / n).collect()
    }

    fn query(alpha: f64) -> RerankQuery {
        RerankQuery {
            clip_text: vec![1.0, 0.0, 0.0],
            typical_image: vec![0.0, 1.0, 0.0],
            alpha,
        }
    }

    fn cand(id: usize, image: &[f64], objects: &[&[f64]]) -> ImageCandidate {
        ImageCandidate {
            id,
            clip_image: unit(image),
            objects: objects.iter().map(|o| unit(o)).collect(),
        }
    }

    #[test]
    fn score_boundaries() {
        let c = cand(0, &[0.8, 0.6, 0.0], &[&[0.0, 1.0, 0.0]]);
        assert_eq!(score_image(&c, &query(1.0)).unwrap(), 0.8);
        assert_eq!(score_image(&c, &query(0.0)).unwrap(), 1.0);
        let empty = cand(1, &[0.8, 0.6, 0.0], &[]);
        assert_eq!(score_image(&empty, &query(0.0)).unwrap(), 0.0);
        assert!(score_image(&c, &query(1.5)).is_err());
        let not_unit = ImageCandidate {
            id: 2,
            clip_image: vec![2.0, 0.0, 0.0],
            objects: vec![],
        };
        assert!(score_image(&not_unit, &query(0.5)).is_err());
    }

    #[test]
    fn score_mixes_terms() {
        // dot 0.8, best object cosine 0.6
        let c = cand(0, &[0.8, 0.6, 0.0], &[&[0.0, 0.6, 0.8], &[0.0, -1.0, 0.0]]);
        let s = score_image(&c, &query(0.5)).unwrap();
        assert!((s - 0.7).abs() < 1e-12);
    }

    #[test]
    fn selection_rules() {
        let a = cand(4, &[1.0, 0.0, 0.0], &[&[0.0, 1.0, 0.0]]);
        assert_eq!(select_best(&[a.clone()], &query(0.3)).unwrap().0, 4);
        let tie = ImageCandidate { id: 2, ..a.clone() };
        assert_eq!(select_best(&[a.clone(), tie], &query(0.3)).unwrap().0, 2);
        assert!(select_best(&[], &query(0.3)).is_err());
        let weak = cand(1, &[0.0, 0.0, 1.0], &[&[1.0, 0.0, 0.0]]);
        for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
            assert_eq!(select_best(&[weak.clone(), a.clone()], &query(alpha)).unwrap().0, 4);
        }
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(fleiss_kappa(&[vec![2, 0], vec![0, 2]], 2).unwrap(), 1.0);
        assert_eq!(fleiss_kappa(&[vec![3, 0, 0], vec![0, 3, 0], vec![0, 0, 3]], 3).unwrap(), 1.0);
        // Step by step: P_i = 1/3, 1/3, 1; P̄ = 5/9; p = (2/3, 1/3); P̄_e = 5/9.
        let k = fleiss_kappa(&[vec![2, 1], vec![1, 2], vec![3, 0]], 3).unwrap();
        assert!(k.abs() < 1e-12, "{k}");
        assert!(fleiss_kappa(&[vec![2, 1]], 2).is_err());
        let err = fleiss_kappa(&[vec![3, 0], vec![3, 0]], 3).unwrap_err();
        assert!(err.to_string().contains("kappa undefined"));
    }

    #[test]
    fn diversity_examples() {
        let v = vec![0.6, 0.8];
        assert!((diversity(&[v.clone(), v.clone(), v]).unwrap() - 1.0).abs() < 1e-12);
        let a = vec![1.0, 0.0];
        let b = vec![0.5, 3f64.sqrt() / 2.0];
        assert!((diversity(&[a.clone(), b]).unwrap() - 2.0).abs() < 1e-12);
        assert!(diversity(&[a.clone(), vec![0.0, 1.0]]).is_err());
        assert!(diversity(&[a]).is_err());
    }

    #[test]
    fn rerank_file_round_trip() {
        let groups = vec![RerankGroup {
            label: "e0".into(),
            clip_text: vec![1.0, 0.0, 0.0],
            typical_image: vec![0.0, 1.0, 0.0],
            candidates: vec![cand(0, &[0.8, 0.6, 0.0], &[&[0.0, 1.0, 0.0]]), cand(1, &[0.0, 0.0, 1.0], &[])],
        }];
        let bytes = write_rerank_file(&groups).unwrap();
        assert!(bytes.starts_with(b"MESE-RRK v1\n"));
        let back = read_rerank_file(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].candidates[1].objects.len(), 0);
        let sel = select_all(&back, 0.0).unwrap();
        assert_eq!(sel[0].selected, 0);
        assert!(read_rerank_file(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    fn arb_unit(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("non-zero", |v| l2_norm(v) > 0.1)
            .prop_map(|v| unit(&v))
    }

    proptest! {
        #[test]
        fn score_monotone_in_text_match(t in 0.0f64..1.0, dt in 0.0f64..0.5, alpha in 0.01f64..1.0, obj in arb_unit(3)) {
            let t2 = (t + dt).min(1.0);
            let make = |c: f64| ImageCandidate { id: 0, clip_image: vec![c, (1.0 - c * c).sqrt(), 0.0], objects: vec![obj.clone()] };
            let q = query(alpha);
            prop_assert!(score_image(&make(t2), &q).unwrap() >= score_image(&make(t), &q).unwrap() - 1e-12);
        }

        #[test]
        fn kappa_permutation_invariant(rows in prop::collection::vec(0usize..=4, 3..10), seed in 0u64..100) {
            let table: Vec<Vec<usize>> = rows.iter().map(|&a| vec![a, 4 - a]).collect();
            let mut shuffled = table.clone();
            use rand::{SeedableRng, seq::SliceRandom};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            match (fleiss_kappa(&table, 4), fleiss_kappa(&shuffled, 4)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "permutation changed definedness"),
            }
        }

        #[test]
        fn dominated_candidate_does_not_change_selection(imgs in prop::collection::vec(arb_unit(3), 1..5), alpha in 0.0f64..=1.0) {
            let q = query(alpha);
            let cands: Vec<ImageCandidate> = imgs.iter().enumerate().map(|(i, v)| ImageCandidate { id: i + 1, clip_image: v.clone(), objects: vec![v.clone()] }).collect();
            let before = select_best(&cands, &q).unwrap();
            let mut more = cands.clone();
            // Anti-aligned with text and typical image: strictly worse than any other.
            more.push(ImageCandidate { id: 0, clip_image: unit(&[-1.0, -1.0, 0.0]), objects: vec![unit(&[-1.0, -1.0, 0.0])] });
            let after = select_best(&more, &q).unwrap();
            prop_assume!(before.1 > score_image(&more[more.len() - 1], &q).unwrap());
            prop_assert_eq!(before.0, after.0);
        }
    }
}
