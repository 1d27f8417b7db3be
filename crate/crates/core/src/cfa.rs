//! Cross-modal fusion of the two patch-token streams.
//!
//! Each stream's patch features go through a projection block
//! (linear → layer norm → ReLU). In the dual-cross mode the colour stream
//! queries the infrared stream and vice versa, each direction with its own
//! `W^Q, W^K, W^V ∈ L×d` and `W^O ∈ d×L`. Attention output is wired as
//! `LN(q + H)` followed by `LN(z + FFN(z))`. The attended tokens are
//! mean-pooled per stream and merged across streams by max, mean or
//! concatenation before a layer-norm + linear classifier.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::layers::{multi_head_attention, stack_maps, Linear, Mlp, Norm};
use crate::param::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Max,
    Mean,
    Concat,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Max => "max",
            FusionKind::Mean => "mean",
            FusionKind::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfaMode {
    /// Both directions: colour queries infrared and infrared queries colour.
    DualCross,
    /// Only the colour-query direction; the classifier sees that stream alone.
    CfpCrossOnly,
    /// Only the infrared-query direction.
    IfpCrossOnly,
    /// Each present stream attends to itself.
    SelfAttention,
    /// No attention. Two streams are pooled and fused directly; one stream has no classifier.
    None,
}

impl fmt::Display for CfaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CfaMode::DualCross => "dual_cross",
            CfaMode::CfpCrossOnly => "cfp_cross_only",
            CfaMode::IfpCrossOnly => "ifp_cross_only",
            CfaMode::SelfAttention => "self_attention",
            CfaMode::None => "none",
        })
    }
}

/// Which image streams a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Streams {
    Both,
    CfpOnly,
    IfpOnly,
}

impl Streams {
    pub fn has_cfp(self) -> bool {
        matches!(self, Streams::Both | Streams::CfpOnly)
    }

    pub fn has_ifp(self) -> bool {
        matches!(self, Streams::Both | Streams::IfpOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfaConfig {
    /// Projected feature dimension `L`.
    pub proj_dim: usize,
    /// Attention inner dimension `d`; `None` means equal to the feature dimension.
    pub attn_dim: Option<usize>,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub fusion: FusionKind,
    pub mode: CfaMode,
    /// Linear projection block before attention. When off, features keep the embedding dimension.
    pub projection: bool,
}

impl Default for CfaConfig {
    fn default() -> Self {
        Self {
            proj_dim: 8,
            attn_dim: None,
            heads: 2,
            ffn_ratio: 2,
            fusion: FusionKind::Max,
            mode: CfaMode::DualCross,
            projection: true,
        }
    }
}

impl CfaConfig {
    /// Feature width entering attention: `L` with projection, else the encoder width.
    pub fn feature_dim(&self, embed_dim: usize) -> usize {
        if self.projection {
            self.proj_dim
        } else {
            embed_dim
        }
    }

    pub fn attn_dim(&self, embed_dim: usize) -> usize {
        self.attn_dim.unwrap_or_else(|| self.feature_dim(embed_dim))
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.proj_dim == 0 {
            return Err(Error::config("cfa.proj_dim", "must be at least 1"));
        }
        if self.heads == 0 {
            return Err(Error::config("cfa.heads", "must be positive"));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::config("cfa.ffn_ratio", "must be positive"));
        }
        let d = self.attn_dim(embed_dim);
        if d == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::config(
                "cfa.attn_dim",
                format!(
                    "attention dim {d} must be a positive multiple of {} heads",
                    self.heads
                ),
            ));
        }
        Ok(())
    }

    pub fn check_streams(&self, streams: Streams) -> Result<()> {
        let needs_both = matches!(
            self.mode,
            CfaMode::DualCross | CfaMode::CfpCrossOnly | CfaMode::IfpCrossOnly
        );
        if needs_both && streams != Streams::Both {
            return Err(Error::ModeMismatch {
                mode: self.mode.to_string(),
                reason: "cross attention needs both image streams".into(),
            });
        }
        Ok(())
    }

    /// Whether a fused classifier exists for the given inputs.
    pub fn has_classifier(&self, streams: Streams) -> bool {
        !(self.mode == CfaMode::None && streams != Streams::Both)
    }

    fn classifier_dim(&self, embed_dim: usize, streams: Streams) -> usize {
        let l = self.feature_dim(embed_dim);
        let fused_streams = match self.mode {
            CfaMode::CfpCrossOnly | CfaMode::IfpCrossOnly => 1,
            _ if streams == Streams::Both => 2,
            _ => 1,
        };
        if fused_streams == 2 && self.fusion == FusionKind::Concat {
            2 * l
        } else {
            l
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projection {
    pub linear: Linear,
    pub norm: Norm,
}

/// One attention direction: bias-free `W^Q, W^K, W^V, W^O`, then the residual/LN/FFN wiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossBlock {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub norm1: Norm,
    pub ffn: Mlp,
    pub norm2: Norm,
}

impl CrossBlock {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        l: usize,
        d: usize,
        ffn_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_q: store.add(format!("{name}.w_q"), xavier_uniform(rng, l, d))?,
            w_k: store.add(format!("{name}.w_k"), xavier_uniform(rng, l, d))?,
            w_v: store.add(format!("{name}.w_v"), xavier_uniform(rng, l, d))?,
            w_o: store.add(format!("{name}.w_o"), xavier_uniform(rng, d, l))?,
            norm1: Norm::new(store, &format!("{name}.norm1"), l)?,
            ffn: Mlp::new(
                store,
                rng,
                &format!("{name}.ffn"),
                (l, l * ffn_ratio, l),
                Activation::Gelu,
            )?,
            norm2: Norm::new(store, &format!("{name}.norm2"), l)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfaParams {
    pub proj_cf: Option<Projection>,
    pub proj_if: Option<Projection>,
    /// Block whose queries come from the colour stream.
    pub attn_cf: Option<CrossBlock>,
    /// Block whose queries come from the infrared stream.
    pub attn_if: Option<CrossBlock>,
    pub classifier: Option<(Norm, Linear)>,
}

impl CfaParams {
    pub fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &CfaConfig,
        embed_dim: usize,
        streams: Streams,
        k: usize,
    ) -> Result<Self> {
        cfg.validate(embed_dim)?;
        cfg.check_streams(streams)?;
        let l = cfg.feature_dim(embed_dim);
        let d = cfg.attn_dim(embed_dim);
        let proj = |store: &mut ParamStore<T>,
                    rng: &mut R,
                    name: &str,
                    on: bool|
         -> Result<Option<Projection>> {
            if !(on && cfg.projection) {
                return Ok(None);
            }
            Ok(Some(Projection {
                linear: Linear::new(store, rng, &format!("{name}.linear"), embed_dim, l)?,
                norm: Norm::new(store, &format!("{name}.norm"), l)?,
            }))
        };
        let proj_cf = proj(store, rng, "cfa.proj_cf", streams.has_cfp())?;
        let proj_if = proj(store, rng, "cfa.proj_if", streams.has_ifp())?;
        let (want_cf, want_if) = match cfg.mode {
            CfaMode::DualCross => (true, true),
            CfaMode::CfpCrossOnly => (true, false),
            CfaMode::IfpCrossOnly => (false, true),
            CfaMode::SelfAttention => (streams.has_cfp(), streams.has_ifp()),
            CfaMode::None => (false, false),
        };
        let attn_cf = if want_cf {
            Some(CrossBlock::new(
                store,
                rng,
                "cfa.attn_cf",
                l,
                d,
                cfg.ffn_ratio,
            )?)
        } else {
            None
        };
        let attn_if = if want_if {
            Some(CrossBlock::new(
                store,
                rng,
                "cfa.attn_if",
                l,
                d,
                cfg.ffn_ratio,
            )?)
        } else {
            None
        };
        let classifier = if cfg.has_classifier(streams) {
            let dim = cfg.classifier_dim(embed_dim, streams);
            Some((
                Norm::new(store, "cfa.classifier.norm", dim)?,
                Linear::new(store, rng, "cfa.classifier.linear", dim, k)?,
            ))
        } else {
            None
        };
        Ok(Self {
            proj_cf,
            proj_if,
            attn_cf,
            attn_if,
            classifier,
        })
    }
}

/// Projection block: `ReLU(LN(F·W + b))`.
pub fn linear_project<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &Projection,
    f: Var,
) -> Result<Var> {
    let h = p.linear.forward(g, store, f)?;
    let h = p.norm.forward(g, store, h)?;
    Ok(g.relu(h))
}

#[derive(Debug, Clone)]
pub struct CrossAttentionOutput {
    /// Block output `[N_q×L]`.
    pub out: Var,
    /// `concat(H_1..H_n)·W^O` before the residual.
    pub attended: Var,
    /// Per-head attention `[N_q×N_kv]`.
    pub maps: Vec<Var>,
}

/// Queries from `q_src`, keys and values from `kv_src`. Pass the same var twice for self-attention.
pub fn cross_attention<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &CrossBlock,
    q_src: Var,
    kv_src: Var,
    heads: usize,
) -> Result<CrossAttentionOutput> {
    let l = g.value(q_src).last_dim();
    if g.value(kv_src).last_dim() != l {
        return Err(Error::shape(
            "cross_attention",
            g.value(q_src).shape(),
            g.value(kv_src).shape(),
        ));
    }
    let (wq, wk, wv, wo) = (
        g.param(store, block.w_q),
        g.param(store, block.w_k),
        g.param(store, block.w_v),
        g.param(store, block.w_o),
    );
    let q = g.matmul(q_src, wq)?;
    let k = g.matmul(kv_src, wk)?;
    let v = g.matmul(kv_src, wv)?;
    let (heads_out, maps) = multi_head_attention(g, q, k, v, heads)?;
    let attended = g.matmul(heads_out, wo)?;
    let z = g.add(q_src, attended)?;
    let z = block.norm1.forward(g, store, z)?;
    let f = block.ffn.forward(g, store, z)?;
    let out = g.add(z, f)?;
    let out = block.norm2.forward(g, store, out)?;
    Ok(CrossAttentionOutput {
        out,
        attended,
        maps,
    })
}

/// Mean-pools each present stream over its tokens and merges the pooled vectors.
/// A single stream returns its pooled vector; concat keeps the colour stream first.
pub fn fuse_streams<T: Float>(
    g: &mut Graph<T>,
    z_cf: Option<Var>,
    z_if: Option<Var>,
    fusion: FusionKind,
) -> Result<Var> {
    let pooled_cf = z_cf.map(|z| g.mean_rows(z)).transpose()?;
    let pooled_if = z_if.map(|z| g.mean_rows(z)).transpose()?;
    match (pooled_cf, pooled_if) {
        (Some(a), Some(b)) => match fusion {
            FusionKind::Max => g.maximum(a, b),
            FusionKind::Mean => g.weighted_sum(&[(a, T::of(0.5)), (b, T::of(0.5))]),
            FusionKind::Concat => g.concat_cols(&[a, b]),
        },
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::Empty("fuse_streams")),
    }
}

/// Layer norm then linear to `k` logits.
pub fn classify_fused<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    classifier: &(Norm, Linear),
    fused: Var,
) -> Result<Var> {
    let (norm, linear) = classifier;
    if g.value(fused).shape() != [linear.fan_in] {
        return Err(Error::shape(
            "classify_fused",
            g.value(fused).shape(),
            &[linear.fan_in],
        ));
    }
    let h = norm.forward(g, store, fused)?;
    linear.forward(g, store, h)
}

/// Single-modality head `C_e → C_e → k` with GELU.
pub fn new_mlp_head<T: Float, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    embed_dim: usize,
    k: usize,
) -> Result<Mlp> {
    Mlp::new(
        store,
        rng,
        name,
        (embed_dim, embed_dim, k),
        Activation::Gelu,
    )
}

pub fn mlp_head<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &Mlp,
    cls: Var,
) -> Result<Var> {
    if g.value(cls).shape() != [head.fc1.fan_in] {
        return Err(Error::shape(
            "mlp_head",
            g.value(cls).shape(),
            &[head.fc1.fan_in],
        ));
    }
    head.forward(g, store, cls)
}

#[derive(Debug, Clone)]
pub struct CfaOutput<T> {
    pub logits: Option<Var>,
    pub z_cf: Option<Var>,
    pub z_if: Option<Var>,
    /// Raw attention maps keyed by direction (`"cf"` = colour queries), each `[heads×N_q×N_kv]`.
    pub maps: Vec<(&'static str, Tensor<T>)>,
}

/// Full fusion forward on encoder patch features.
pub fn cfa_forward<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &CfaConfig,
    params: &CfaParams,
    patch_cf: Option<Var>,
    patch_if: Option<Var>,
) -> Result<CfaOutput<T>> {
    let streams = match (patch_cf, patch_if) {
        (Some(_), Some(_)) => Streams::Both,
        (Some(_), None) => Streams::CfpOnly,
        (None, Some(_)) => Streams::IfpOnly,
        (None, None) => {
            return Err(Error::ModeMismatch {
                mode: cfg.mode.to_string(),
                reason: "no input stream".into(),
            })
        }
    };
    cfg.check_streams(streams)?;
    if streams.has_cfp() != params.proj_cf.is_some() && cfg.projection {
        return Err(Error::ModeMismatch {
            mode: cfg.mode.to_string(),
            reason: "inputs do not match the streams the parameters were built for".into(),
        });
    }

    let project =
        |g: &mut Graph<T>, p: Option<&Projection>, f: Option<Var>| -> Result<Option<Var>> {
            match (f, p) {
                (Some(f), Some(p)) => linear_project(g, store, p, f).map(Some),
                (f, _) => Ok(f),
            }
        };
    let f_cf = project(g, params.proj_cf.as_ref(), patch_cf)?;
    let f_if = project(g, params.proj_if.as_ref(), patch_if)?;

    let mut maps = Vec::new();
    let mut run = |g: &mut Graph<T>,
                   block: Option<&CrossBlock>,
                   tag: &'static str,
                   q: Var,
                   kv: Var|
     -> Result<Var> {
        let block = block.ok_or_else(|| Error::ModeMismatch {
            mode: cfg.mode.to_string(),
            reason: format!("missing attention parameters for direction {tag}"),
        })?;
        let out = cross_attention(g, store, block, q, kv, cfg.heads)?;
        maps.push((tag, stack_maps(g, &out.maps)));
        Ok(out.out)
    };

    let (z_cf, z_if) = match cfg.mode {
        CfaMode::DualCross => {
            let (a, b) = (f_cf.expect("checked"), f_if.expect("checked"));
            let z_cf = run(g, params.attn_cf.as_ref(), "cf", a, b)?;
            let z_if = run(g, params.attn_if.as_ref(), "if", b, a)?;
            (Some(z_cf), Some(z_if))
        }
        CfaMode::CfpCrossOnly => {
            let (a, b) = (f_cf.expect("checked"), f_if.expect("checked"));
            (Some(run(g, params.attn_cf.as_ref(), "cf", a, b)?), None)
        }
        CfaMode::IfpCrossOnly => {
            let (a, b) = (f_cf.expect("checked"), f_if.expect("checked"));
            (None, Some(run(g, params.attn_if.as_ref(), "if", b, a)?))
        }
        CfaMode::SelfAttention => {
            let z_cf = f_cf
                .map(|a| run(g, params.attn_cf.as_ref(), "cf", a, a))
                .transpose()?;
            let z_if = f_if
                .map(|b| run(g, params.attn_if.as_ref(), "if", b, b))
                .transpose()?;
            (z_cf, z_if)
        }
        CfaMode::None => (f_cf, f_if),
    };

    let logits = match &params.classifier {
        Some(classifier) if cfg.has_classifier(streams) => {
            let fused = fuse_streams(g, z_cf, z_if, cfg.fusion)?;
            Some(classify_fused(g, store, classifier, fused)?)
        }
        _ => None,
    };
    Ok(CfaOutput {
        logits,
        z_cf,
        z_if,
        maps,
    })
}
