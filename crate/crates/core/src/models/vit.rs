use rand::Rng;
use serde::{Deserialize, Serialize};

use super::store::{Bound, ParamKind, ParamStore};
use super::{linear, trunc_normal};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 128,
            depth: 6,
            n_heads: 4,
            mlp_ratio: 4,
            n_classes: 10,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        if self.n_classes == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth, mlp_ratio and n_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the CLS and DIST tokens.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 2
    }

    /// Closed-form trainable parameter count.
    pub fn n_parameters(&self) -> usize {
        let d = self.embed_dim;
        let p = self.patch_size;
        let hidden = self.mlp_ratio * d;
        let c = self.n_classes;
        let patch = 3 * p * p * d + d;
        let tokens = self.seq_len() * d + 2 * d;
        let block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d);
        patch + tokens + self.depth * block + 2 * d + 2 * (d * c + c)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

/// Pre-norm vision transformer with a CLS token (position 0) and a DIST
/// token (position 1) ahead of the patch tokens, each read out by its own
/// linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTokenVit<T: Scalar = f32> {
    pub config: VitConfig,
    pub params: ParamStore<T>,
    patch_w: usize,
    patch_b: usize,
    pos: usize,
    cls: usize,
    dist: usize,
    blocks: Vec<BlockIds>,
    norm_g: usize,
    norm_b: usize,
    head_cls_w: usize,
    head_cls_b: usize,
    head_dist_w: usize,
    head_dist_b: usize,
}

/// Post-softmax attention, one `[B, heads, T, T]` tensor per block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub blocks: Vec<Tensor<f64>>,
}

impl AttentionRecord {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `(batch, heads, tokens)` of the first block.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.blocks.first().map(|t| (t.shape()[0], t.shape()[1], t.shape()[2]))
    }

    /// The `T × T` matrix for one image, block and head.
    pub fn matrix(&self, block: usize, image: usize, head: usize) -> &[f64] {
        let s = self.blocks[block].shape();
        let tt = s[2] * s[3];
        let start = (image * s[1] + head) * tt;
        &self.blocks[block].data()[start..start + tt]
    }
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct VitOutput {
    pub logits_cls: Var,
    pub logits_dist: Var,
    pub features_cls: Var,
    pub features_dist: Var,
    pub attention: Option<AttentionRecord>,
    /// With capture: CLS and DIST residual-stream tokens after each block,
    /// `[B, 2, D]` per block, before the final norm.
    pub block_tokens: Option<Vec<Tensor<f64>>>,
}

/// Forward results materialized off the tape.
#[derive(Clone, Debug)]
pub struct VitEval<T: Scalar = f32> {
    pub logits_cls: Tensor<T>,
    pub logits_dist: Tensor<T>,
    pub features_cls: Tensor<T>,
    pub features_dist: Tensor<T>,
    pub attention: Option<AttentionRecord>,
    pub block_tokens: Option<Vec<Tensor<f64>>>,
}

impl<T: Scalar> DualTokenVit<T> {
    pub fn new<R: Rng + ?Sized>(config: VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let p = config.patch_size;
        let hidden = config.mlp_ratio * d;
        let c = config.n_classes;
        let mut s = ParamStore::new();
        let w = |s: &mut ParamStore<T>, name: String, shape: Vec<usize>, rng: &mut R| {
            s.push(name, trunc_normal(shape, INIT_STD, rng), ParamKind::Weight)
        };
        let patch_w = w(&mut s, "patch.w".into(), vec![3 * p * p, d], rng);
        let patch_b = s.push("patch.b", Tensor::zeros([d]), ParamKind::NoDecay);
        let pos = s.push("pos", trunc_normal([config.seq_len(), d], INIT_STD, rng), ParamKind::NoDecay);
        let cls = s.push("cls", trunc_normal([d], INIT_STD, rng), ParamKind::NoDecay);
        let dist = s.push("dist", trunc_normal([d], INIT_STD, rng), ParamKind::NoDecay);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let n = |x: &str| format!("block{i}.{x}");
            blocks.push(BlockIds {
                ln1_g: s.push(n("ln1.g"), Tensor::full([d], T::one()), ParamKind::NoDecay),
                ln1_b: s.push(n("ln1.b"), Tensor::zeros([d]), ParamKind::NoDecay),
                qkv_w: w(&mut s, n("qkv.w"), vec![d, 3 * d], rng),
                qkv_b: s.push(n("qkv.b"), Tensor::zeros([3 * d]), ParamKind::NoDecay),
                proj_w: w(&mut s, n("proj.w"), vec![d, d], rng),
                proj_b: s.push(n("proj.b"), Tensor::zeros([d]), ParamKind::NoDecay),
                ln2_g: s.push(n("ln2.g"), Tensor::full([d], T::one()), ParamKind::NoDecay),
                ln2_b: s.push(n("ln2.b"), Tensor::zeros([d]), ParamKind::NoDecay),
                fc1_w: w(&mut s, n("fc1.w"), vec![d, hidden], rng),
                fc1_b: s.push(n("fc1.b"), Tensor::zeros([hidden]), ParamKind::NoDecay),
                fc2_w: w(&mut s, n("fc2.w"), vec![hidden, d], rng),
                fc2_b: s.push(n("fc2.b"), Tensor::zeros([d]), ParamKind::NoDecay),
            });
        }
        let norm_g = s.push("norm.g", Tensor::full([d], T::one()), ParamKind::NoDecay);
        let norm_b = s.push("norm.b", Tensor::zeros([d]), ParamKind::NoDecay);
        let head_cls_w = w(&mut s, "head_cls.w".into(), vec![d, c], rng);
        let head_cls_b = s.push("head_cls.b", Tensor::zeros([c]), ParamKind::NoDecay);
        let head_dist_w = w(&mut s, "head_dist.w".into(), vec![d, c], rng);
        let head_dist_b = s.push("head_dist.b", Tensor::zeros([c]), ParamKind::NoDecay);
        Ok(DualTokenVit {
            config,
            params: s,
            patch_w,
            patch_b,
            pos,
            cls,
            dist,
            blocks,
            norm_g,
            norm_b,
            head_cls_w,
            head_cls_b,
            head_dist_w,
            head_dist_b,
        })
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head_cls.") || name.starts_with("head_dist.")
    }

    /// Re-draws both classifier heads.
    pub fn reset_heads<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (d, c) = (self.config.embed_dim, self.config.n_classes);
        *self.params.get_mut(self.head_cls_w) = trunc_normal([d, c], INIT_STD, rng);
        *self.params.get_mut(self.head_dist_w) = trunc_normal([d, c], INIT_STD, rng);
        *self.params.get_mut(self.head_cls_b) = Tensor::zeros([c]);
        *self.params.get_mut(self.head_dist_b) = Tensor::zeros([c]);
    }

    /// Store indices of `(cls, dist, pos, head_cls_w, head_cls_b, head_dist_w, head_dist_b)`.
    pub fn token_and_head_ids(&self) -> [usize; 7] {
        [
            self.cls,
            self.dist,
            self.pos,
            self.head_cls_w,
            self.head_cls_b,
            self.head_dist_w,
            self.head_dist_b,
        ]
    }

    /// `[B, 3, H, W]` → `[B, N, 3·p·p]`, patches in row-major grid order and
    /// each patch flattened channel-major.
    fn patchify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let p = self.config.patch_size;
        if s.len() != 4 || s[1] != 3 || s[2] % p != 0 || s[3] % p != 0 {
            return Err(Error::shape(format!(
                "student expects [B,3,H,W] with H, W divisible by {p}, got {s:?}"
            )));
        }
        if s[2] != self.config.image_size || s[3] != self.config.image_size {
            return Err(Error::shape(format!(
                "student was built for {0}×{0} inputs, got {1}×{2}",
                self.config.image_size, s[2], s[3]
            )));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let (gh, gw) = (h / p, w / p);
        let pd = 3 * p * p;
        let src = x.data();
        let mut out = Vec::with_capacity(b * gh * gw * pd);
        for img in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    for c in 0..3 {
                        for py in 0..p {
                            let row = ((img * 3 + c) * h + gy * p + py) * w + gx * p;
                            out.extend_from_slice(&src[row..row + p]);
                        }
                    }
                }
            }
        }
        Tensor::new([b, gh * gw, pd], out)
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: &Tensor<T>, capture: bool) -> Result<VitOutput> {
        let cfg = &self.config;
        let patches = self.patchify(x)?;
        let b = patches.shape()[0];
        let (d, t, nh) = (cfg.embed_dim, cfg.seq_len(), cfg.n_heads);
        let dh = d / nh;
        let patches = tape.constant(patches);
        let emb = linear(tape, patches, bound[self.patch_w], bound[self.patch_b])?;
        let cls = tape.reshape(bound[self.cls], [1, d])?;
        let cls = tape.repeat_leading(cls, b);
        let dist = tape.reshape(bound[self.dist], [1, d])?;
        let dist = tape.repeat_leading(dist, b);
        let seq = tape.concat(&[cls, dist, emb], 1)?;
        let mut h = tape.add_broadcast(seq, bound[self.pos])?;
        let eps = T::of(LN_EPS);
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut record = capture.then(|| AttentionRecord { blocks: Vec::new() });
        let mut tokens = capture.then(Vec::new);
        for blk in &self.blocks {
            let n1 = tape.layer_norm(h, bound[blk.ln1_g], bound[blk.ln1_b], eps)?;
            let qkv = linear(tape, n1, bound[blk.qkv_w], bound[blk.qkv_b])?;
            let qkv = tape.reshape(qkv, [b, t, 3, nh, dh])?;
            let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
            let mut split = |i: usize| -> Result<Var> {
                let part = tape.narrow(qkv, 0, i, 1)?;
                tape.reshape(part, [b * nh, t, dh])
            };
            let (q, k, v) = (split(0)?, split(1)?, split(2)?);
            let scores = tape.matmul_t(q, k)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores)?;
            if let Some(rec) = record.as_mut() {
                rec.blocks.push(tape.value(attn).cast::<f64>().reshape([b, nh, t, t])?);
            }
            let ctx = tape.matmul(attn, v)?;
            let ctx = tape.reshape(ctx, [b, nh, t, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, [b, t, d])?;
            let out = linear(tape, ctx, bound[blk.proj_w], bound[blk.proj_b])?;
            h = tape.add(h, out)?;
            let n2 = tape.layer_norm(h, bound[blk.ln2_g], bound[blk.ln2_b], eps)?;
            let m = linear(tape, n2, bound[blk.fc1_w], bound[blk.fc1_b])?;
            let m = tape.gelu(m);
            let m = linear(tape, m, bound[blk.fc2_w], bound[blk.fc2_b])?;
            h = tape.add(h, m)?;
            if let Some(tok) = tokens.as_mut() {
                let v = tape.value(h);
                let mut out = Vec::with_capacity(b * 2 * d);
                for i in 0..b {
                    out.extend(v.data()[i * t * d..(i * t + 2) * d].iter().map(|x| x.f64()));
                }
                tok.push(Tensor::new([b, 2, d], out)?);
            }
        }
        let h = tape.layer_norm(h, bound[self.norm_g], bound[self.norm_b], eps)?;
        let fc = tape.narrow(h, 1, 0, 1)?;
        let features_cls = tape.reshape(fc, [b, d])?;
        let fd = tape.narrow(h, 1, 1, 1)?;
        let features_dist = tape.reshape(fd, [b, d])?;
        let (logits_cls, logits_dist) = self.heads_forward(tape, bound, features_cls, features_dist)?;
        Ok(VitOutput {
            logits_cls,
            logits_dist,
            features_cls,
            features_dist,
            attention: record,
            block_tokens: tokens,
        })
    }

    /// Both classifier heads applied to `[B, D]` token features.
    pub fn heads_forward(&self, tape: &mut Tape<T>, bound: &Bound, features_cls: Var, features_dist: Var) -> Result<(Var, Var)> {
        let zc = linear(tape, features_cls, bound[self.head_cls_w], bound[self.head_cls_b])?;
        let zd = linear(tape, features_dist, bound[self.head_dist_w], bound[self.head_dist_b])?;
        Ok((zc, zd))
    }

    /// Inference on a throwaway tape with every parameter constant.
    pub fn eval(&self, x: &Tensor<T>, capture: bool) -> Result<VitEval<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let out = self.forward(&mut tape, &bound, x, capture)?;
        Ok(VitEval {
            logits_cls: tape.value(out.logits_cls).clone(),
            logits_dist: tape.value(out.logits_dist).clone(),
            features_cls: tape.value(out.features_cls).clone(),
            features_dist: tape.value(out.features_dist).clone(),
            attention: out.attention,
            block_tokens: out.block_tokens,
        })
    }
}
