//! The grounding network.
//!
//! A stack of anchor-pooling blocks turns L0 projected video tokens into a
//! feature pyramid whose level l holds ceil(L0 / s^l) tokens, each covering
//! s^l original frames. A small transformer encodes the query; shared
//! cross-attention fusion injects it into every pyramid level; two conv
//! heads (shared across levels) emit per-token moment scores and boundary
//! offsets. Contrastive projection heads for the training objectives also
//! live here so the checkpoint captures everything the optimizer touches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::amp::{AmpBlock, AmpConfig, Pooling};
use crate::error::{Error, Result};
use crate::losses::ContrastiveConfig;
use crate::nn::{check_unique_names, Conv1dLayer, Ffn, Linear, Parameter, RmsNorm};
use crate::ops;
use crate::tensor::Tensor;

pub const CONFIG_VERSION: u32 = 1;

// ── configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Schema version of this struct; bump on breaking layout changes.
    pub version: u32,
    /// Raw input widths: video features and query token embeddings.
    pub d_video: usize,
    pub d_query: usize,
    /// Shared model width.
    pub dim: usize,
    /// Pyramid depth and per-level anchor stride.
    pub num_layers: usize,
    pub stride: usize,
    pub pooling: Pooling,
    /// Selective scan shape.
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub zoh: bool,
    /// Local attention window and heads inside each block.
    pub window: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub gate_bias: f64,
    /// Query encoder depth and heads; fusion heads for cross-attention.
    pub text_layers: usize,
    pub text_heads: usize,
    pub fusion_heads: usize,
    /// Conv depth of the score and offset heads.
    pub head_depth: usize,
    /// Architecture ablation toggles.
    pub interleave: bool,
    pub bidirectional: bool,
    pub local_attention: bool,
    pub gates: bool,
    pub contrastive: ContrastiveConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            version: CONFIG_VERSION,
            d_video: 16,
            d_query: 12,
            dim: 32,
            num_layers: 3,
            stride: 2,
            pooling: Pooling::Mean,
            d_state: 8,
            d_conv: 3,
            expand: 2,
            zoh: false,
            window: 5,
            heads: 2,
            ffn_expansion: 2,
            gate_bias: 0.0,
            text_layers: 2,
            text_heads: 4,
            fusion_heads: 2,
            head_depth: 3,
            interleave: true,
            bidirectional: true,
            local_attention: true,
            gates: true,
            contrastive: ContrastiveConfig { proj_dim: 16, ..ContrastiveConfig::default() },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.d_video == 0 || self.d_query == 0 || self.dim == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("pyramid needs at least one layer".into()));
        }
        if self.text_layers == 0 {
            return Err(Error::Config("text encoder needs at least one layer".into()));
        }
        for (what, h) in [("text", self.text_heads), ("fusion", self.fusion_heads)] {
            if h == 0 || self.dim % h != 0 {
                return Err(Error::Config(format!(
                    "{what} heads {h} must divide dim {}",
                    self.dim
                )));
            }
        }
        if self.head_depth == 0 {
            return Err(Error::Config("head conv depth must be >= 1".into()));
        }
        self.contrastive.validate()?;
        self.amp_config().validate()
    }

    pub fn amp_config(&self) -> AmpConfig {
        AmpConfig {
            dim: self.dim,
            stride: self.stride,
            pooling: self.pooling,
            d_state: self.d_state,
            d_conv: self.d_conv,
            expand: self.expand,
            zoh: self.zoh,
            window: self.window,
            heads: self.heads,
            ffn_expansion: self.ffn_expansion,
            gate_bias: self.gate_bias,
            interleave: self.interleave,
            bidirectional: self.bidirectional,
            local_attention: self.local_attention,
            gates: self.gates,
        }
    }
}

// ── feature pyramid ─────────────────────────────────────────────────────

pub struct PyramidLevel {
    /// Refined tokens at this level's resolution, [L_l, D].
    pub refined: Tensor,
    /// Pooled anchors feeding the next level, [L_{l+1}, D].
    pub anchors_out: Tensor,
    /// Frames of original video covered by one token here: stride^l.
    pub effective_stride: usize,
}

pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    pub fn level_lengths(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.refined.rows()).collect()
    }
}

// ── text encoder ────────────────────────────────────────────────────────

struct SelfAttn {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl SelfAttn {
    fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> SelfAttn {
        SelfAttn {
            wq: Linear::new(dim, dim, false, rng),
            wk: Linear::new(dim, dim, false, rng),
            wv: Linear::new(dim, dim, false, rng),
            wo: Linear::new(dim, dim, false, rng),
            heads,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        self.wo.forward(&ops::cross_attention(&q, &k, &v, self.heads)?)
    }

    fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

struct TextLayer {
    norm1: RmsNorm,
    attn: SelfAttn,
    norm2: RmsNorm,
    ffn: Ffn,
}

/// Pre-norm transformer over the query tokens: input projection with fixed
/// sinusoidal position signals, full self-attention layers, and a final
/// linear into the shared model width.
pub struct TextEncoder {
    in_proj: Linear,
    layers: Vec<TextLayer>,
    out: Linear,
    dim: usize,
}

/// pe[p, 2i] = sin(p / 10000^(2i/d)), pe[p, 2i+1] = cos(same argument).
fn sinusoidal_pe(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        for j in 0..d {
            let pair = (j / 2 * 2) as f64;
            let arg = p as f64 / 10000f64.powf(pair / d as f64);
            data.push(if j % 2 == 0 { arg.sin() } else { arg.cos() });
        }
    }
    Tensor::from_vec(data, &[len, d]).expect("pe shape is consistent")
}

impl TextEncoder {
    pub fn new(d_query: usize, dim: usize, layers: usize, heads: usize, rng: &mut impl Rng) -> TextEncoder {
        TextEncoder {
            in_proj: Linear::new(d_query, dim, true, rng),
            layers: (0..layers)
                .map(|_| TextLayer {
                    norm1: RmsNorm::new(dim),
                    attn: SelfAttn::new(dim, heads, rng),
                    norm2: RmsNorm::new(dim),
                    ffn: Ffn::new(dim, dim * 2, rng),
                })
                .collect(),
            out: Linear::new(dim, dim, false, rng),
            dim,
        }
    }

    pub fn forward(&self, q: &Tensor) -> Result<Tensor> {
        if q.rows() == 0 {
            return Err(Error::Shape("text encoder: empty query".into()));
        }
        let mut x = ops::add(&self.in_proj.forward(q)?, &sinusoidal_pe(q.rows(), self.dim))?;
        for layer in &self.layers {
            let u = layer.attn.forward(&layer.norm1.forward(&x)?)?;
            x = ops::add(&x, &u)?;
            let u = layer.ffn.forward(&layer.norm2.forward(&x)?)?;
            x = ops::add(&x, &u)?;
        }
        self.out.forward(&x)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        self.in_proj.params(&format!("{prefix}.in"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.norm1.params(&format!("{prefix}.{i}.norm1"), out);
            layer.attn.params(&format!("{prefix}.{i}.attn"), out);
            layer.norm2.params(&format!("{prefix}.{i}.norm2"), out);
            layer.ffn.params(&format!("{prefix}.{i}.ffn"), out);
        }
        self.out.params(&format!("{prefix}.out"), out);
    }
}

// ── cross-modal fusion ──────────────────────────────────────────────────

/// Video tokens query the text tokens; the attended summary joins through a
/// residual and RMS normalization. One set of weights serves every level.
pub struct Fusion {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub norm: RmsNorm,
    pub heads: usize,
}

impl Fusion {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Fusion {
        Fusion {
            wq: Linear::new(dim, dim, false, rng),
            wk: Linear::new(dim, dim, false, rng),
            wv: Linear::new(dim, dim, false, rng),
            norm: RmsNorm::new(dim),
            heads,
        }
    }

    /// The attended text summary per video token, before the residual.
    pub fn attend(&self, video: &Tensor, text: &Tensor) -> Result<Tensor> {
        let q = self.wq.forward(video)?;
        let k = self.wk.forward(text)?;
        let v = self.wv.forward(text)?;
        ops::cross_attention(&q, &k, &v, self.heads)
    }

    pub fn forward(&self, video: &Tensor, text: &Tensor) -> Result<Tensor> {
        let delta = self.attend(video, text)?;
        self.norm.forward(&ops::add(video, &delta)?)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.norm.params(&format!("{prefix}.norm"), out);
    }
}

// ── prediction heads ────────────────────────────────────────────────────

/// A small stack of width-3 convolutions with silu between them. The final
/// layer narrows to the head's output channels; activation is the caller's.
pub struct ConvHead {
    convs: Vec<Conv1dLayer>,
}

impl ConvHead {
    pub fn new(dim: usize, out_ch: usize, depth: usize, rng: &mut impl Rng) -> ConvHead {
        ConvHead {
            convs: (0..depth)
                .map(|i| {
                    let dout = if i + 1 == depth { out_ch } else { dim };
                    Conv1dLayer::new(3, dim, dout, rng)
                })
                .collect(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 < self.convs.len() {
                h = ops::silu(&h)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.params(&format!("{prefix}.{i}"), out);
        }
    }
}

// ── the model ───────────────────────────────────────────────────────────

pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    pub fused: Vec<Tensor>,
    /// Per level: sigmoid moment scores, [L_l, 1].
    pub scores: Vec<Tensor>,
    /// Per level: softplus boundary offsets (start, end), [L_l, 2].
    pub offsets: Vec<Tensor>,
}

pub struct GroundingModel {
    pub cfg: ModelConfig,
    pub video_in: Linear,
    pub blocks: Vec<AmpBlock>,
    pub text: TextEncoder,
    pub fusion: Fusion,
    pub cls_head: ConvHead,
    pub reg_head: ConvHead,
    /// Contrastive projection heads, one per layer (or a single shared one).
    pub proj_heads: Vec<Linear>,
}

impl GroundingModel {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<GroundingModel> {
        cfg.validate()?;
        let d = cfg.dim;
        let n_proj = if cfg.contrastive.shared_head { 1 } else { cfg.num_layers };
        Ok(GroundingModel {
            video_in: Linear::new(cfg.d_video, d, true, rng),
            blocks: (0..cfg.num_layers)
                .map(|_| AmpBlock::new(cfg.amp_config(), rng))
                .collect::<Result<_>>()?,
            text: TextEncoder::new(cfg.d_query, d, cfg.text_layers, cfg.text_heads, rng),
            fusion: Fusion::new(d, cfg.fusion_heads, rng),
            cls_head: ConvHead::new(d, 1, cfg.head_depth, rng),
            reg_head: ConvHead::new(d, 2, cfg.head_depth, rng),
            proj_heads: (0..n_proj)
                .map(|_| Linear::new(d, cfg.contrastive.proj_dim, false, rng))
                .collect(),
            cfg,
        })
    }

    /// The projection head used for contrastive terms at pyramid layer l.
    pub fn proj_head(&self, layer: usize) -> &Linear {
        if self.cfg.contrastive.shared_head {
            &self.proj_heads[0]
        } else {
            &self.proj_heads[layer]
        }
    }

    /// Runs the block stack over projected video tokens. Each level's input
    /// is the previous level's pooled anchors.
    pub fn encode_video(&self, v0: &Tensor) -> Result<FeaturePyramid> {
        let l0 = v0.rows();
        let min_len = self.cfg.stride.checked_pow(self.cfg.num_layers as u32 - 1);
        match min_len {
            Some(m) if l0 >= m => {}
            _ => {
                return Err(Error::Config(format!(
                    "pyramid of {} layers at stride {} needs at least {} input tokens, got {l0}; \
                     reduce num_layers or provide a longer video",
                    self.cfg.num_layers,
                    self.cfg.stride,
                    min_len.map_or(usize::MAX, |m| m)
                )));
            }
        }
        let mut levels = Vec::with_capacity(self.cfg.num_layers);
        let mut x = v0.clone();
        let mut eff = 1usize;
        for block in &self.blocks {
            let out = block.forward(&x)?;
            x = out.next_anchors.clone();
            levels.push(PyramidLevel {
                refined: out.refined,
                anchors_out: out.next_anchors,
                effective_stride: eff,
            });
            eff *= self.cfg.stride;
        }
        Ok(FeaturePyramid { levels })
    }

    /// Full forward for one (video, query) pair.
    pub fn forward(&self, video: &Tensor, query: &Tensor) -> Result<ModelOutput> {
        let v0 = self.video_in.forward(video)?;
        let pyramid = self.encode_video(&v0)?;
        let text = self.text.forward(query)?;
        let mut fused = Vec::with_capacity(pyramid.levels.len());
        let mut scores = Vec::with_capacity(pyramid.levels.len());
        let mut offsets = Vec::with_capacity(pyramid.levels.len());
        for level in &pyramid.levels {
            let f = self.fusion.forward(&level.refined, &text)?;
            scores.push(ops::sigmoid(&self.cls_head.forward(&f)?)?);
            offsets.push(ops::softplus(&self.reg_head.forward(&f)?)?);
            fused.push(f);
        }
        Ok(ModelOutput { pyramid, fused, scores, offsets })
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        self.video_in.params("video_in", &mut out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.params(&format!("amp.{i}"), &mut out);
        }
        self.text.params("text", &mut out);
        self.fusion.params("fusion", &mut out);
        self.cls_head.params("head.cls", &mut out);
        self.reg_head.params("head.reg", &mut out);
        for (i, p) in self.proj_heads.iter().enumerate() {
            p.params(&format!("contrast.{i}"), &mut out);
        }
        debug_assert!(check_unique_names(&out).is_ok());
        out
    }
}

// ── target assignment ───────────────────────────────────────────────────

/// Labels and regression bookkeeping for one level against one segment.
pub struct LevelTargets {
    /// One 0/1 label per level token.
    pub labels: Vec<f64>,
    /// Indices of positive tokens.
    pub positive: Vec<usize>,
}

/// A token is positive iff its center time S*(t + 0.5) falls inside
/// [t_start, t_end). The predicted interval for token t decodes as
/// (S*(t - d_s), S*(t + d_e)), so the regression loss compares that
/// directly against the segment; no per-offset targets are needed.
pub fn assign_targets(level_len: usize, eff_stride: usize, gt: (f64, f64)) -> LevelTargets {
    let s = eff_stride as f64;
    let mut labels = vec![0.0; level_len];
    let mut positive = Vec::new();
    for t in 0..level_len {
        let center = s * (t as f64 + 0.5);
        if center >= gt.0 && center < gt.1 {
            labels[t] = 1.0;
            positive.push(t);
        }
    }
    LevelTargets { labels, positive }
}
