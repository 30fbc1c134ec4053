//! On-disk corpus directory: `entities.jsonl`, `contexts.jsonl`,
//! `queries.jsonl`, `images.bin`, `vocab.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Entity, MultiModalContext, Query};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const IMAGE_HEADER_TAG: &str = "MESE-IMG v1";

const ENTITIES: &str = "entities.jsonl";
const CONTEXTS: &str = "contexts.jsonl";
const QUERIES: &str = "queries.jsonl";
const IMAGES: &str = "images.bin";
const VOCAB: &str = "vocab.json";

#[derive(Serialize, Deserialize)]
struct ContextRecord {
    entity_id: usize,
    tokens: Vec<u32>,
    mask_index: usize,
    image_row: Option<usize>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct ImageBlock {
    patch_count: usize,
    dim: usize,
    rows: Vec<Matrix>,
}

fn read_images(path: &Path) -> Result<ImageBlock> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(path, 1, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::parse(path, 1, "header is not ASCII"))?;
    let rest = header
        .strip_prefix(IMAGE_HEADER_TAG)
        .ok_or_else(|| Error::parse(path, 1, format!("expected header `{IMAGE_HEADER_TAG} <rows> <L2> <dim>`")))?;
    let nums: Vec<usize> = rest
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(path, 1, format!("bad header field: {e}")))?;
    let [rows, patch_count, dim] = nums[..] else {
        return Err(Error::parse(path, 1, "header needs exactly three integers"));
    };
    let body = &bytes[nl + 1..];
    let per_row = patch_count * dim;
    if body.len() != rows * per_row * 4 {
        return Err(Error::parse(
            path,
            2,
            format!("expected {} bytes of float data, found {}", rows * per_row * 4, body.len()),
        ));
    }
    let floats: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let rows = floats
        .chunks(per_row.max(1))
        .take(rows)
        .map(|chunk| Matrix::from_vec(patch_count, dim, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageBlock {
        patch_count,
        dim,
        rows,
    })
}

/// Reads and validates a corpus directory.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let entities: Vec<Entity> = read_jsonl(&dir.join(ENTITIES))?;
    let records: Vec<ContextRecord> = read_jsonl(&dir.join(CONTEXTS))?;
    let queries: Vec<Query> = read_jsonl(&dir.join(QUERIES))?;
    let vocab_path = dir.join(VOCAB);
    let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let token_vocab: BTreeMap<String, u32> = serde_json::from_str(&vocab_text).map_err(|e| {
        Error::parse(&vocab_path, e.line(), e.to_string())
    })?;
    let images_path = dir.join(IMAGES);
    let images = read_images(&images_path)?;

    let mut contexts = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let patches = match r.image_row {
            None => None,
            Some(row) => Some(images.rows.get(row).cloned().ok_or_else(|| {
                Error::parse(
                    dir.join(CONTEXTS),
                    i + 1,
                    format!("image_row {row} outside images.bin ({} rows)", images.rows.len()),
                )
            })?),
        };
        contexts.push(MultiModalContext {
            entity_id: r.entity_id,
            tokens: r.tokens,
            mask_index: r.mask_index,
            patches,
        });
    }
    Corpus::new(
        entities,
        contexts,
        queries,
        token_vocab,
        images.dim,
        images.patch_count,
    )
}

/// Writes the corpus directory. Image rows are numbered in context order, so
/// the output is a pure function of the corpus.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(ENTITIES), corpus.entities())?;
    write_jsonl(&dir.join(QUERIES), corpus.queries())?;

    let mut image_rows: Vec<&Matrix> = Vec::new();
    let records: Vec<ContextRecord> = corpus
        .contexts()
        .iter()
        .map(|c| ContextRecord {
            entity_id: c.entity_id,
            tokens: c.tokens.clone(),
            mask_index: c.mask_index,
            image_row: c.patches.as_ref().map(|p| {
                image_rows.push(p);
                image_rows.len() - 1
            }),
        })
        .collect();
    write_jsonl(&dir.join(CONTEXTS), &records)?;

    let images_path = dir.join(IMAGES);
    let mut bytes = format!(
        "{IMAGE_HEADER_TAG} {} {} {}\n",
        image_rows.len(),
        corpus.patch_count(),
        corpus.image_feature_dim()
    )
    .into_bytes();
    for m in image_rows {
        for v in m.as_slice() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(&images_path, bytes).map_err(|e| Error::io(&images_path, e))?;

    let vocab_path = dir.join(VOCAB);
    let vocab = serde_json::to_string_pretty(corpus.token_vocab())?;
    fs::write(&vocab_path, vocab + "\n").map_err(|e| Error::io(&vocab_path, e))
}
