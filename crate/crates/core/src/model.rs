//! Full dual-stream model: two ViT encoders, per-stream MLP heads and the
//! cross-modal fusion classifier, plus the loss wiring over them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfa::{cfa_forward, mlp_head, new_mlp_head, CfaConfig, CfaParams, Streams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Mlp;
use crate::objective::{combined_scores, probabilities, LossBundle, LossWeights};
use crate::param::ParamStore;
use crate::synth::PairedSample;
use crate::tensor::{argmax, Float, Tensor};
use crate::vit::{encode, EncoderParams, StreamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k: usize,
    pub streams: Streams,
    pub cfp: StreamConfig,
    pub ifp: StreamConfig,
    pub cfa: CfaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 5,
            streams: Streams::Both,
            cfp: StreamConfig::default(),
            ifp: StreamConfig::default(),
            cfa: CfaConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Gradient-check scale: 16×16×1 inputs, p=8, C_e=L=d=8, 2 heads, depth 2.
    pub fn tiny() -> Self {
        let stream = StreamConfig {
            height: 16,
            width: 16,
            channels: 1,
            patch: 8,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            ..StreamConfig::default()
        };
        Self {
            k: 5,
            streams: Streams::Both,
            cfp: stream.clone(),
            ifp: stream,
            cfa: CfaConfig {
                proj_dim: 8,
                attn_dim: Some(8),
                heads: 2,
                ..CfaConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("model.k", "need at least two classes"));
        }
        if self.streams.has_cfp() {
            self.cfp.validate("model.cfp")?;
        }
        if self.streams.has_ifp() {
            self.ifp.validate("model.ifp")?;
        }
        if self.streams == Streams::Both && self.cfp.embed_dim != self.ifp.embed_dim {
            return Err(Error::config(
                "model.ifp.embed_dim",
                "both streams must share the embedding width",
            ));
        }
        let e = self.embed_dim();
        self.cfa.validate(e)?;
        self.cfa.check_streams(self.streams)
    }

    pub fn embed_dim(&self) -> usize {
        if self.streams.has_cfp() {
            self.cfp.embed_dim
        } else {
            self.ifp.embed_dim
        }
    }
}

/// Which loss terms are switched on, and `λ` between the two head losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSetup {
    pub weights: LossWeights,
    pub use_cf_loss: bool,
    pub use_if_loss: bool,
}

impl Default for LossSetup {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            use_cf_loss: true,
            use_if_loss: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub enc_cf: Option<EncoderParams>,
    pub enc_if: Option<EncoderParams>,
    pub head_cf: Option<Mlp>,
    pub head_if: Option<Mlp>,
    pub cfa: CfaParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cft<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits_cf: Option<Var>,
    pub logits_if: Option<Var>,
    pub logits_cls: Option<Var>,
    pub attn_cf: Vec<Tensor<T>>,
    pub attn_if: Vec<Tensor<T>>,
    pub cfa_maps: Vec<(&'static str, Tensor<T>)>,
}

/// Plain logit vectors of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub cf: Option<Vec<T>>,
    pub if_: Option<Vec<T>>,
    pub cls: Option<Vec<T>>,
}

impl<T: Float> Cft<T> {
    /// Builds and initializes every parameter from `seed`. Parameter order is fixed
    /// (colour encoder, infrared encoder, heads, fusion) so equal seeds give equal models.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let s = config.streams;
        let enc_cf = s
            .has_cfp()
            .then(|| EncoderParams::new(&mut params, &mut rng, "enc_cf", &config.cfp))
            .transpose()?;
        let enc_if = s
            .has_ifp()
            .then(|| EncoderParams::new(&mut params, &mut rng, "enc_if", &config.ifp))
            .transpose()?;
        let e = config.embed_dim();
        let head_cf = s
            .has_cfp()
            .then(|| new_mlp_head(&mut params, &mut rng, "head_cf", e, config.k))
            .transpose()?;
        let head_if = s
            .has_ifp()
            .then(|| new_mlp_head(&mut params, &mut rng, "head_if", e, config.k))
            .transpose()?;
        let cfa = CfaParams::new(&mut params, &mut rng, &config.cfa, e, s, config.k)?;
        Ok(Self {
            config,
            layout: Layout {
                enc_cf,
                enc_if,
                head_cf,
                head_if,
                cfa,
            },
            params,
        })
    }

    pub fn streams(&self) -> Streams {
        self.config.streams
    }

    /// Records the forward pass of one image pair on `g`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        cfp: &Tensor<T>,
        ifp: &Tensor<T>,
    ) -> Result<ForwardOutput<T>> {
        let store = &self.params;
        let l = &self.layout;
        let mut out = ForwardOutput {
            logits_cf: None,
            logits_if: None,
            logits_cls: None,
            attn_cf: Vec::new(),
            attn_if: Vec::new(),
            cfa_maps: Vec::new(),
        };
        let mut patch_cf = None;
        let mut patch_if = None;
        if let (Some(enc), Some(head)) = (&l.enc_cf, &l.head_cf) {
            let e = encode(g, store, enc, &self.config.cfp, cfp)?;
            out.logits_cf = Some(mlp_head(g, store, head, e.cls)?);
            out.attn_cf = e.attn_maps;
            patch_cf = Some(e.patches);
        }
        if let (Some(enc), Some(head)) = (&l.enc_if, &l.head_if) {
            let e = encode(g, store, enc, &self.config.ifp, ifp)?;
            out.logits_if = Some(mlp_head(g, store, head, e.cls)?);
            out.attn_if = e.attn_maps;
            patch_if = Some(e.patches);
        }
        let cfa = cfa_forward(g, store, &self.config.cfa, &l.cfa, patch_cf, patch_if)?;
        out.logits_cls = cfa.logits;
        out.cfa_maps = cfa.maps;
        Ok(out)
    }

    /// Builds the loss terms of one labelled sample.
    ///
    /// With both heads present the total is `λ·L_cf + (1−λ)·L_if + L_cls`.
    /// A lone head gets weight 1. Disabled head losses are left off the graph.
    pub fn losses(
        &self,
        g: &mut Graph<T>,
        out: &ForwardOutput<T>,
        label: usize,
        setup: &LossSetup,
    ) -> Result<LossBundle> {
        let w = LossWeights::new(setup.weights.lambda)?;
        let both = out.logits_cf.is_some() && out.logits_if.is_some();
        let (w_cf, w_if) = if both {
            (w.lambda, 1.0 - w.lambda)
        } else {
            (1.0, 1.0)
        };
        let mut terms = Vec::new();
        let mut cf = None;
        let mut if_ = None;
        let mut cls = None;
        if let (Some(z), true) = (out.logits_cf, setup.use_cf_loss) {
            let l = g.cross_entropy(z, label)?;
            terms.push((l, T::of(w_cf)));
            cf = Some(l);
        }
        if let (Some(z), true) = (out.logits_if, setup.use_if_loss) {
            let l = g.cross_entropy(z, label)?;
            terms.push((l, T::of(w_if)));
            if_ = Some(l);
        }
        if let Some(z) = out.logits_cls {
            let l = g.cross_entropy(z, label)?;
            terms.push((l, T::one()));
            cls = Some(l);
        }
        if terms.is_empty() {
            return Err(Error::config(
                "train",
                "every loss term is disabled for this model",
            ));
        }
        let total = g.weighted_sum(&terms)?;
        Ok(LossBundle {
            cf,
            if_,
            cls,
            total,
        })
    }

    pub fn logits(&self, sample: &PairedSample) -> Result<Logits<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, &sample.cfp.cast(), &sample.ifp.cast())?;
        let read = |v: Option<Var>| v.map(|v| g.value(v).data().to_vec());
        Ok(Logits {
            cf: read(out.logits_cf),
            if_: read(out.logits_if),
            cls: read(out.logits_cls),
        })
    }

    /// Decision scores under the model's inference rule. Heads whose loss is
    /// disabled are ignored; two heads are averaged and added to the classifier.
    pub fn scores(&self, logits: &Logits<T>, setup: &LossSetup) -> Result<Vec<T>> {
        let cf = logits.cf.as_ref().filter(|_| setup.use_cf_loss);
        let if_ = logits.if_.as_ref().filter(|_| setup.use_if_loss);
        let zeros = vec![T::zero(); self.config.k];
        match (cf, if_, logits.cls.as_ref()) {
            (Some(a), Some(b), Some(c)) => combined_scores(a, b, c),
            (Some(a), Some(b), None) => combined_scores(a, b, &zeros),
            (Some(h), None, Some(c)) | (None, Some(h), Some(c)) => {
                Ok(h.iter().zip(c).map(|(&x, &y)| x + y).collect())
            }
            (Some(h), None, None) | (None, Some(h), None) | (None, None, Some(h)) => Ok(h.clone()),
            (None, None, None) => Err(Error::config(
                "train",
                "model has no active output for inference",
            )),
        }
    }

    pub fn predict(&self, sample: &PairedSample, setup: &LossSetup) -> Result<usize> {
        let logits = self.logits(sample)?;
        Ok(argmax(&self.scores(&logits, setup)?))
    }

    /// Class probabilities from the model's decision scores.
    pub fn probabilities(&self, sample: &PairedSample, setup: &LossSetup) -> Result<Vec<T>> {
        let logits = self.logits(sample)?;
        Ok(probabilities(&self.scores(&logits, setup)?))
    }

    pub fn cast<U: Float>(&self) -> Cft<U> {
        Cft {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }
}
