//! Single-modality ViT stream: patchify, token embedding, pre-norm transformer
//! blocks and a final layer norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::layers::{multi_head_attention, stack_maps, Linear, Mlp, Norm};
use crate::param::{normal, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Standard deviation for class-token and position-embedding init.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Inputs are standardized as `(x − pixel_mean) / pixel_std` before patching.
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            patch: 8,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            pixel_mean: 0.4,
            pixel_std: 0.2,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| format!("{prefix}.{f}");
        for (name, v) in [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(Error::config(field(name), "must be positive"));
            }
        }
        if !(self.pixel_std > 0.0 && self.pixel_std.is_finite() && self.pixel_mean.is_finite()) {
            return Err(Error::config(
                field("pixel_std"),
                "normalization needs a finite mean and positive std",
            ));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::config(
                field("patch"),
                format!(
                    "{}x{} image is not divisible into {}-pixel patches",
                    self.height, self.width, self.patch
                ),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                field("heads"),
                format!(
                    "embed_dim {} is not divisible by {} heads",
                    self.embed_dim, self.heads
                ),
            ));
        }
        Ok(())
    }

    /// Patch count `N = H·W / p²`.
    pub fn num_patches(&self) -> usize {
        (self.height * self.width) / (self.patch * self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }
}

/// Splits an `H×W×C` image into row-major `p×p×C` patches, one flattened patch per row.
pub fn patchify<T: Float>(img: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (h, w, c) = match img.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::shape("patchify", s, &[p])),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("patchify", img.shape(), &[p]));
    }
    let (gh, gw) = (h / p, w / p);
    let x = img.data();
    let mut out = Vec::with_capacity(x.len());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let base = ((py * p + dy) * w + px * p) * c;
                out.extend_from_slice(&x[base..base + p * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Float>(
    patches: &Tensor<T>,
    h: usize,
    w: usize,
    c: usize,
    p: usize,
) -> Result<Tensor<T>> {
    let (gh, gw) = (h / p, w / p);
    if patches.shape() != [gh * gw, p * p * c] || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::shape("unpatchify", patches.shape(), &[h, w, c]));
    }
    let src = patches.data();
    let mut out = vec![T::zero(); h * w * c];
    for py in 0..gh {
        for px in 0..gw {
            let row = &src[(py * gw + px) * p * p * c..][..p * p * c];
            for dy in 0..p {
                let base = ((py * p + dy) * w + px * p) * c;
                out[base..base + p * c].copy_from_slice(&row[dy * p * c..(dy + 1) * p * c]);
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: Norm,
}

impl EncoderParams {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &StreamConfig,
    ) -> Result<Self> {
        cfg.validate(name)?;
        let e = cfg.embed_dim;
        let patch_embed = Linear::new(
            store,
            rng,
            &format!("{name}.patch_embed"),
            cfg.patch_dim(),
            e,
        )?;
        let cls_token = store.add(
            format!("{name}.cls_token"),
            normal(rng, vec![e], EMBED_INIT_STD),
        )?;
        let pos_embed = store.add(
            format!("{name}.pos_embed"),
            normal(rng, vec![cfg.num_patches() + 1, e], EMBED_INIT_STD),
        )?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let b = format!("{name}.blocks.{i}");
            blocks.push(BlockParams {
                norm1: Norm::new(store, &format!("{b}.norm1"), e)?,
                qkv: Linear::new(store, rng, &format!("{b}.attn.qkv"), e, 3 * e)?,
                proj: Linear::new(store, rng, &format!("{b}.attn.proj"), e, e)?,
                norm2: Norm::new(store, &format!("{b}.norm2"), e)?,
                mlp: Mlp::new(
                    store,
                    rng,
                    &format!("{b}.mlp"),
                    (e, e * cfg.mlp_ratio, e),
                    Activation::Gelu,
                )?,
            });
        }
        let norm = Norm::new(store, &format!("{name}.norm"), e)?;
        Ok(Self {
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
        })
    }
}

/// Patch embedding, class-token prepend and position-embedding add: `[N×p²C] -> [(N+1)×C_e]`.
pub fn embed_tokens<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &EncoderParams,
    patches: Var,
) -> Result<Var> {
    let pd = params.patch_embed.fan_in;
    if g.value(patches).rank() != 2 || g.value(patches).last_dim() != pd {
        return Err(Error::shape(
            "embed_tokens",
            g.value(patches).shape(),
            &[pd],
        ));
    }
    let emb = params.patch_embed.forward(g, store, patches)?;
    let cls = g.param(store, params.cls_token);
    let tokens = g.concat_rows(&[cls, emb])?;
    let pos = g.param(store, params.pos_embed);
    if g.value(pos).shape() != g.value(tokens).shape() {
        return Err(Error::shape(
            "embed_tokens",
            g.value(tokens).shape(),
            g.value(pos).shape(),
        ));
    }
    g.add(tokens, pos)
}

/// Pre-norm block: `x + MHA(LN(x))`, then `+ FFN(LN(·))`. Returns the new tokens and per-head attention maps.
pub fn encoder_block<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &BlockParams,
    x: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let e = g.value(x).last_dim();
    let h = params.norm1.forward(g, store, x)?;
    let qkv = params.qkv.forward(g, store, h)?;
    let q = g.slice_cols(qkv, 0, e)?;
    let k = g.slice_cols(qkv, e, e)?;
    let v = g.slice_cols(qkv, 2 * e, e)?;
    let (attn_out, maps) = multi_head_attention(g, q, k, v, heads)?;
    let attn_out = params.proj.forward(g, store, attn_out)?;
    let x = g.add(x, attn_out)?;
    let h = params.norm2.forward(g, store, x)?;
    let h = params.mlp.forward(g, store, h)?;
    Ok((g.add(x, h)?, maps))
}

#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    /// Class-token feature `[C_e]`.
    pub cls: Var,
    /// Patch features `[N×C_e]`.
    pub patches: Var,
    /// One `[heads×(N+1)×(N+1)]` attention tensor per block.
    pub attn_maps: Vec<Tensor<T>>,
}

/// Full stream forward on an `H×W×C` image.
pub fn encode<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &EncoderParams,
    cfg: &StreamConfig,
    img: &Tensor<T>,
) -> Result<EncoderOutput<T>> {
    if img.shape() != [cfg.height, cfg.width, cfg.channels] {
        return Err(Error::shape(
            "encode",
            img.shape(),
            &[cfg.height, cfg.width, cfg.channels],
        ));
    }
    let (mean, std) = (T::of(cfg.pixel_mean), T::of(cfg.pixel_std));
    let img = img.map(|v| (v - mean) / std);
    let patches = g.input(patchify(&img, cfg.patch)?);
    let mut x = embed_tokens(g, store, params, patches)?;
    let mut attn_maps = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (next, maps) = encoder_block(g, store, block, x, cfg.heads)?;
        attn_maps.push(stack_maps(g, &maps));
        x = next;
    }
    let x = params.norm.forward(g, store, x)?;
    let n = cfg.num_patches();
    let cls = g.slice_rows(x, 0, 1)?;
    let cls = g.reshape(cls, vec![cfg.embed_dim])?;
    let patches = g.slice_rows(x, 1, n)?;
    Ok(EncoderOutput {
        cls,
        patches,
        attn_maps,
    })
}
