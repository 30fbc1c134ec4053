//! Compact multi-modal masked-entity encoder.
//!
//! Text tokens and image patches each pass through their own transformer
//! stack; the two sequences are concatenated and fused by a third stack. The
//! hidden state at the mask position feeds three MLP heads: the entity
//! classifier, the contrastive projection, and the cluster projection.
//!
//! A missing modality is replaced by a learned placeholder row (`notxt` /
//! `noimg`). The same mechanism drives inference-time modality ablations.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::{Corpus, MultiModalContext, PAD_ID};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{l2_norm, Matrix};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_TAG};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub text_layers: usize,
    pub image_layers: usize,
    pub fusion_layers: usize,
    /// L₁, maximum text length including padding.
    pub max_text_len: usize,
    /// L₂, patches per image.
    pub patch_count: usize,
    pub image_feature_dim: usize,
    /// V_e, size of the candidate entity vocabulary.
    pub entity_count: usize,
    pub token_vocab_size: usize,
    /// D
    pub contrastive_dim: usize,
    /// M
    pub cluster_count: usize,
    pub rng_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 32,
            n_heads: 2,
            ffn_dim: 64,
            text_layers: 1,
            image_layers: 1,
            fusion_layers: 1,
            max_text_len: 16,
            patch_count: 16,
            image_feature_dim: 8,
            entity_count: 2,
            token_vocab_size: 3,
            contrastive_dim: 32,
            cluster_count: 16,
            rng_seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Head sizes and patch grid used in the published experiments
    /// (D = 128, M = 41, 36 patches).
    pub fn paper() -> Self {
        EncoderConfig {
            contrastive_dim: 128,
            cluster_count: 41,
            patch_count: 36,
            ..EncoderConfig::default()
        }
    }

    /// Copies the corpus-dependent sizes (vocabularies, text length, image
    /// grid) into this config.
    pub fn fitted_to(mut self, corpus: &Corpus) -> Self {
        self.entity_count = corpus.entity_count();
        self.token_vocab_size = corpus.vocab_size();
        self.max_text_len = self.max_text_len.max(corpus.max_text_len());
        self.patch_count = corpus.patch_count();
        self.image_feature_dim = corpus.image_feature_dim();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_text_len", self.max_text_len),
            ("patch_count", self.patch_count),
            ("image_feature_dim", self.image_feature_dim),
            ("entity_count", self.entity_count),
            ("token_vocab_size", self.token_vocab_size),
            ("contrastive_dim", self.contrastive_dim),
            ("cluster_count", self.cluster_count),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Which modalities to hide behind their placeholders.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModalityMask {
    pub drop_text: bool,
    pub drop_image: bool,
}

impl ModalityMask {
    pub const NONE: ModalityMask = ModalityMask {
        drop_text: false,
        drop_image: false,
    };
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    wq: Affine,
    wk: Affine,
    wv: Affine,
    wo: Affine,
    ln1: (usize, usize),
    ff1: Affine,
    ff2: Affine,
    ln2: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    l1: Affine,
    l2: Affine,
}

#[derive(Debug, Clone)]
struct Layout {
    token_emb: usize,
    text_pos: usize,
    patch_proj: Affine,
    patch_pos: usize,
    notxt: usize,
    noimg: usize,
    text: Vec<Block>,
    image: Vec<Block>,
    fusion: Vec<Block>,
    cls: Mlp,
    con: Mlp,
    clu: Mlp,
}

struct Init {
    rng: ChaCha8Rng,
    bound: f64,
    params: ParamSet,
}

impl Init {
    fn uniform(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let b = self.bound;
        let m = Matrix::from_fn(rows, cols, |_, _| self.rng.random_range(-b..b));
        self.params.push(name, m)
    }

    fn fill(&mut self, name: String, rows: usize, cols: usize, v: f64) -> usize {
        self.params.push(name, Matrix::from_fn(rows, cols, |_, _| v))
    }

    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Affine {
        Affine {
            w: self.uniform(format!("{name}.w"), fan_in, fan_out),
            b: Some(self.fill(format!("{name}.b"), 1, fan_out, 0.0)),
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Affine {
        Affine {
            w: self.uniform(format!("{name}.w"), fan_in, fan_out),
            b: None,
        }
    }

    fn block(&mut self, name: &str, d: usize, ffn: usize) -> Block {
        Block {
            wq: self.affine(&format!("{name}.q"), d, d),
            // A key bias only shifts every score of a query row by the
            // same amount, which the softmax cancels.
            wk: self.linear(&format!("{name}.k"), d, d),
            wv: self.affine(&format!("{name}.v"), d, d),
            wo: self.affine(&format!("{name}.o"), d, d),
            ln1: (
                self.fill(format!("{name}.ln1.g"), 1, d, 1.0),
                self.fill(format!("{name}.ln1.b"), 1, d, 0.0),
            ),
            ff1: self.affine(&format!("{name}.ff1"), d, ffn),
            ff2: self.affine(&format!("{name}.ff2"), ffn, d),
            ln2: (
                self.fill(format!("{name}.ln2.g"), 1, d, 1.0),
                self.fill(format!("{name}.ln2.b"), 1, d, 0.0),
            ),
        }
    }

    fn mlp(&mut self, name: &str, d: usize, out: usize) -> Mlp {
        Mlp {
            l1: self.affine(&format!("{name}.1"), d, d),
            l2: self.affine(&format!("{name}.2"), d, out),
        }
    }
}

/// Network structure; parameters live in a separate [`ParamSet`] so the
/// student and the teacher share one layout.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    layout: Layout,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub h_mask: Var,
    pub logits: Var,
    pub probs: Var,
    pub z: Option<Var>,
    pub c: Option<Var>,
}

/// Mask-position hidden state and its two projections.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedHidden {
    pub h_mask: Vec<f64>,
    /// Unit-norm contrastive embedding.
    pub z: Vec<f64>,
    /// Cluster-assignment probabilities.
    pub c: Vec<f64>,
}

impl Encoder {
    /// Builds the layout and a freshly initialised parameter set, with
    /// weights drawn from uniform(−1/√d, 1/√d).
    pub fn init(config: EncoderConfig) -> Result<(Encoder, ParamSet)> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            bound: 1.0 / (d as f64).sqrt(),
            params: ParamSet::default(),
        };
        let token_emb = init.uniform("token_emb".into(), config.token_vocab_size, d);
        let text_pos = init.uniform("text_pos".into(), config.max_text_len, d);
        let patch_proj = init.affine("patch_proj", config.image_feature_dim, d);
        let patch_pos = init.uniform("patch_pos".into(), config.patch_count, d);
        let notxt = init.uniform("notxt".into(), 1, d);
        let noimg = init.uniform("noimg".into(), 1, d);
        let text = (0..config.text_layers)
            .map(|l| init.block(&format!("text.{l}"), d, config.ffn_dim))
            .collect();
        let image = (0..config.image_layers)
            .map(|l| init.block(&format!("image.{l}"), d, config.ffn_dim))
            .collect();
        let fusion = (0..config.fusion_layers)
            .map(|l| init.block(&format!("fusion.{l}"), d, config.ffn_dim))
            .collect();
        let cls = init.mlp("cls", d, config.entity_count);
        let con = init.mlp("con", d, config.contrastive_dim);
        let clu = init.mlp("clu", d, config.cluster_count);
        let layout = Layout {
            token_emb,
            text_pos,
            patch_proj,
            patch_pos,
            notxt,
            noimg,
            text,
            image,
            fusion,
            cls,
            con,
            clu,
        };
        Ok((Encoder { config, layout }, init.params))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn affine(&self, tape: &mut Tape, x: Var, a: Affine) -> Var {
        let w = tape.param(a.w);
        let y = tape.matmul(x, w);
        match a.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    fn block(&self, tape: &mut Tape, x: Var, key_mask: &[bool], blk: &Block) -> Var {
        let d = self.config.hidden_dim;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let q = self.affine(tape, x, blk.wq);
        let k = self.affine(tape, x, blk.wk);
        let v = self.affine(tape, x, blk.wv);
        let all_keys = key_mask.iter().all(|&m| m);
        let mask = if all_keys { None } else { Some(key_mask) };
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.cols(q, h * dh, dh);
            let kh = tape.cols(k, h * dh, dh);
            let vh = tape.cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax_rows(scores, mask);
            outs.push(tape.matmul(attn, vh));
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let o = self.affine(tape, cat, blk.wo);
        let r = tape.add(x, o);
        let (g1, b1) = (tape.param(blk.ln1.0), tape.param(blk.ln1.1));
        let x = tape.layer_norm(r, g1, b1);
        let f = self.affine(tape, x, blk.ff1);
        let f = tape.gelu(f);
        let f = self.affine(tape, f, blk.ff2);
        let r = tape.add(x, f);
        let (g2, b2) = (tape.param(blk.ln2.0), tape.param(blk.ln2.1));
        tape.layer_norm(r, g2, b2)
    }

    fn stack(&self, tape: &mut Tape, mut x: Var, key_mask: &[bool], blocks: &[Block]) -> Var {
        for blk in blocks {
            x = self.block(tape, x, key_mask, blk);
        }
        x
    }

    fn mlp(&self, tape: &mut Tape, x: Var, m: Mlp) -> Var {
        let h = self.affine(tape, x, m.l1);
        let h = tape.gelu(h);
        self.affine(tape, h, m.l2)
    }

    /// Text stack over `tokens` (Ŵ). [`PAD_ID`] positions are excluded as
    /// attention keys. Returns the hidden sequence and its key mask.
    pub fn encode_text(&self, tape: &mut Tape, tokens: &[u32]) -> Result<(Var, Vec<bool>)> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_text_len {
            return Err(Error::Shape(format!(
                "{} tokens exceed max_text_len {}",
                tokens.len(),
                self.config.max_text_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.config.token_vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside embedding table of {}",
                self.config.token_vocab_size
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = tape.param(self.layout.token_emb);
        let emb = tape.gather(table, &ids);
        let pos_table = tape.param(self.layout.text_pos);
        let pos = tape.row_range(pos_table, 0, ids.len());
        let x = tape.add(emb, pos);
        let mask: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        let out = self.stack(tape, x, &mask, &self.layout.text);
        Ok((out, mask))
    }

    /// Image stack over projected patches plus learned patch positions (V̂).
    /// An absent image yields the single `noimg` placeholder row.
    pub fn encode_image(&self, tape: &mut Tape, patches: Option<&Matrix>) -> Result<(Var, Vec<bool>)> {
        let Some(p) = patches else {
            return Ok((tape.param(self.layout.noimg), vec![true]));
        };
        let expected = (self.config.patch_count, self.config.image_feature_dim);
        if p.shape() != expected {
            return Err(Error::Shape(format!(
                "patches {:?}, expected {expected:?}",
                p.shape()
            )));
        }
        let x = tape.constant(p.clone());
        let x = self.affine(tape, x, self.layout.patch_proj);
        let pos = tape.param(self.layout.patch_pos);
        let x = tape.add(x, pos);
        let mask = vec![true; p.rows()];
        let out = self.stack(tape, x, &mask, &self.layout.image);
        Ok((out, mask))
    }

    /// Concatenates the two modality sequences and runs the fusion stack.
    pub fn fuse(&self, tape: &mut Tape, text: (Var, &[bool]), image: (Var, &[bool])) -> Result<Var> {
        let d = self.config.hidden_dim;
        for v in [text.0, image.0] {
            if tape.value(v).cols() != d {
                return Err(Error::Shape(format!(
                    "fusion input width {} != hidden_dim {d}",
                    tape.value(v).cols()
                )));
            }
        }
        let h = tape.concat_rows(&[text.0, image.0]);
        let mask: Vec<bool> = text.1.iter().chain(image.1).copied().collect();
        Ok(self.stack(tape, h, &mask, &self.layout.fusion))
    }

    /// Full forward pass for one context. `with_projections` additionally
    /// evaluates the contrastive and cluster heads.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &MultiModalContext,
        modality: ModalityMask,
        with_projections: bool,
    ) -> Result<ForwardVars> {
        let (text, text_mask, mask_pos) = if modality.drop_text {
            (tape.param(self.layout.notxt), vec![true], 0)
        } else {
            if ctx.mask_index >= ctx.tokens.len() {
                return Err(Error::InvalidArgument(format!(
                    "mask index {} outside {} tokens",
                    ctx.mask_index,
                    ctx.tokens.len()
                )));
            }
            let (t, m) = self.encode_text(tape, &ctx.tokens)?;
            (t, m, ctx.mask_index)
        };
        let patches = if modality.drop_image { None } else { ctx.patches.as_ref() };
        let (image, image_mask) = self.encode_image(tape, patches)?;
        let fused = self.fuse(tape, (text, &text_mask), (image, &image_mask))?;
        let h_mask = tape.row(fused, mask_pos);
        let logits = self.mlp(tape, h_mask, self.layout.cls);
        let probs = tape.softmax_rows(logits, None);
        let (z, c) = if with_projections {
            let zr = self.mlp(tape, h_mask, self.layout.con);
            let z = tape.l2_normalize_rows(zr);
            let cr = self.mlp(tape, h_mask, self.layout.clu);
            let c = tape.softmax_rows(cr, None);
            (Some(z), Some(c))
        } else {
            (None, None)
        };
        Ok(ForwardVars {
            h_mask,
            logits,
            probs,
            z,
            c,
        })
    }

    /// ŷ for one context under `params`.
    pub fn predict_distribution(
        &self,
        params: &ParamSet,
        ctx: &MultiModalContext,
        modality: ModalityMask,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new(params);
        let out = self.forward(&mut tape, ctx, modality, false)?;
        Ok(tape.value(out.probs).as_slice().to_vec())
    }

    pub fn project(&self, params: &ParamSet, ctx: &MultiModalContext) -> Result<MaskedHidden> {
        let mut tape = Tape::new(params);
        let out = self.forward(&mut tape, ctx, ModalityMask::NONE, true)?;
        Ok(MaskedHidden {
            h_mask: tape.value(out.h_mask).as_slice().to_vec(),
            z: tape.value(out.z.expect("projections requested")).as_slice().to_vec(),
            c: tape.value(out.c.expect("projections requested")).as_slice().to_vec(),
        })
    }
}

/// Student, EMA teacher, and the shared network structure.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Encoder,
    pub student: ParamSet,
    pub teacher: ParamSet,
}

impl Model {
    /// Fresh model whose teacher is an exact copy of the student.
    pub fn new(config: EncoderConfig) -> Result<Model> {
        let (encoder, student) = Encoder::init(config)?;
        let teacher = student.clone();
        Ok(Model {
            encoder,
            student,
            teacher,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    pub fn predict_distribution(&self, ctx: &MultiModalContext) -> Result<Vec<f64>> {
        self.encoder.predict_distribution(&self.student, ctx, ModalityMask::NONE)
    }

    pub fn project(&self, ctx: &MultiModalContext) -> Result<MaskedHidden> {
        self.encoder.project(&self.student, ctx)
    }

    /// θ_t ← m·θ_t + (1−m)·θ_s
    pub fn ema_update(&mut self, momentum: f64) -> Result<()> {
        ema_update(&self.student, &mut self.teacher, momentum)
    }
}

/// θ_t ← m·θ_t + (1−m)·θ_s, elementwise.
pub fn ema_update(student: &ParamSet, teacher: &mut ParamSet, momentum: f64) -> Result<()> {
    teacher.blend_from(student, momentum)
}

/// Checks the unit-norm / unit-sum contract of a [`MaskedHidden`].
pub fn check_masked_hidden(h: &MaskedHidden) -> bool {
    (l2_norm(&h.z) - 1.0).abs() <= 1e-6
        && (h.c.iter().sum::<f64>() - 1.0).abs() <= 1e-6
        && h.c.iter().all(|&v| v >= 0.0)
}
