//! Anchor pooling block.
//!
//! One block takes L tokens, pools an anchor for every `stride` of them,
//! threads anchors and tokens through a shared interleaved sequence, and
//! returns the refined tokens together with the anchors, which become the
//! next pyramid level's input. The interleaving is what lets anchors trade
//! information with the frames they summarize: a global bidirectional scan
//! runs over the mixed sequence, then a narrow windowed attention sharpens
//! local structure, then a feed-forward stage. The first two stages merge
//! through learnable sigmoid gates, the last through a plain residual.
//!
//! Every architectural choice can be toggled off (`interleave`,
//! `bidirectional`, `local_attention`, `gates`) so the ablation harness can
//! measure what each buys.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_uniform, init_zeros, Ffn, Linear, Parameter, RmsNorm};
use crate::ops;
use crate::ssm::{BidiScan, ScanConfig};
use crate::tensor::Tensor;

// ── configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
    Attention,
    Gated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmpConfig {
    pub dim: usize,
    pub stride: usize,
    pub pooling: Pooling,
    /// Global scan shape (state size, conv width, channel expansion).
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub zoh: bool,
    /// Local attention window (odd) and head count (divides dim).
    pub window: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub gate_bias: f64,
    /// Ablation toggles; all true in the full model.
    pub interleave: bool,
    pub bidirectional: bool,
    pub local_attention: bool,
    pub gates: bool,
}

impl AmpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("anchor stride must be >= 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::Config(format!("window {} must be odd", self.window)));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("ffn expansion must be >= 1".into()));
        }
        self.scan_config().validate()
    }

    pub fn scan_config(&self) -> ScanConfig {
        ScanConfig {
            d_in: self.dim,
            d_out: self.dim,
            d_state: self.d_state,
            d_conv: self.d_conv,
            expand: self.expand,
            zoh: self.zoh,
        }
    }
}

// ── interleaving ────────────────────────────────────────────────────────

/// Index bookkeeping for one interleaved sequence: anchor i sits at
/// position i*(s+1), immediately before the up-to-s frames it pools.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorLayout {
    pub l: usize,
    pub s: usize,
    pub m: usize,
    pub anchor_positions: Vec<usize>,
    pub frame_positions: Vec<usize>,
}

impl AnchorLayout {
    pub fn new(l: usize, s: usize) -> Result<AnchorLayout> {
        if l == 0 {
            return Err(Error::Shape("anchor layout: no frames".into()));
        }
        if s == 0 {
            return Err(Error::Config("anchor layout: stride must be >= 1".into()));
        }
        let m = l.div_ceil(s);
        let mut anchor_positions = Vec::with_capacity(m);
        let mut frame_positions = Vec::with_capacity(l);
        let mut pos = 0;
        for i in 0..m {
            anchor_positions.push(pos);
            pos += 1;
            let count = s.min(l - i * s);
            for _ in 0..count {
                frame_positions.push(pos);
                pos += 1;
            }
        }
        debug_assert_eq!(pos, l + m);
        Ok(AnchorLayout { l, s, m, anchor_positions, frame_positions })
    }
}

/// Merge frames and anchors into one sequence, each anchor directly before
/// its window. Differentiable: rows are gathered from [frames; anchors].
pub fn interleave(v: &Tensor, a: &Tensor, s: usize) -> Result<(Tensor, AnchorLayout)> {
    let layout = AnchorLayout::new(v.rows(), s)?;
    if a.rows() != layout.m {
        return Err(Error::Shape(format!(
            "interleave: {} frames at stride {s} need {} anchors, got {}",
            layout.l,
            layout.m,
            a.rows()
        )));
    }
    let stacked = ops::concat_rows(&[v.clone(), a.clone()])?;
    let l = layout.l;
    let mut idx = Vec::with_capacity(l + layout.m);
    for i in 0..layout.m {
        idx.push(l + i);
        for f in i * s..((i + 1) * s).min(l) {
            idx.push(f);
        }
    }
    let mixed = ops::select_rows(&stacked, &idx)?;
    Ok((mixed, layout))
}

/// Split an interleaved sequence back into (frames, anchors).
pub fn deinterleave(h: &Tensor, layout: &AnchorLayout) -> Result<(Tensor, Tensor)> {
    if h.rows() != layout.l + layout.m {
        return Err(Error::Shape(format!(
            "deinterleave: sequence has {} rows, layout expects {}",
            h.rows(),
            layout.l + layout.m
        )));
    }
    let frames = ops::select_rows(h, &layout.frame_positions)?;
    let anchors = ops::select_rows(h, &layout.anchor_positions)?;
    Ok((frames, anchors))
}

// ── anchor pooling ──────────────────────────────────────────────────────

/// Window-wise pooling of frames into anchors. Mean and max carry no
/// parameters; attention uses a learned query over each window; gated
/// blends mean and max through a per-channel sigmoid.
pub struct Pooler {
    pub method: Pooling,
    pub heads: usize,
    pub query: Option<Tensor>, // [1, dim]
    pub blend: Option<Tensor>, // [dim], logits
}

impl Pooler {
    pub fn new(method: Pooling, dim: usize, heads: usize, rng: &mut impl Rng) -> Pooler {
        Pooler {
            method,
            heads,
            query: match method {
                Pooling::Attention => Some(init_uniform(&[1, dim], dim, rng)),
                _ => None,
            },
            blend: match method {
                Pooling::Gated => Some(init_zeros(&[dim])),
                _ => None,
            },
        }
    }

    pub fn forward(&self, v: &Tensor, s: usize) -> Result<Tensor> {
        let l = v.rows();
        if l == 0 {
            return Err(Error::Shape("anchor pooling: empty input".into()));
        }
        match self.method {
            Pooling::Mean => ops::window_pool_mean(v, s),
            Pooling::Max => ops::window_pool_max(v, s),
            Pooling::Attention => {
                let q = self.query.as_ref().expect("attention pooling has a query");
                let m = l.div_ceil(s);
                let mut parts = Vec::with_capacity(m);
                for i in 0..m {
                    let idx: Vec<usize> = (i * s..((i + 1) * s).min(l)).collect();
                    let win = ops::select_rows(v, &idx)?;
                    parts.push(ops::cross_attention(q, &win, &win, self.heads)?);
                }
                ops::concat_rows(&parts)
            }
            Pooling::Gated => {
                let g = ops::sigmoid(self.blend.as_ref().expect("gated pooling has a blend"))?;
                let mean = ops::window_pool_mean(v, s)?;
                let max = ops::window_pool_max(v, s)?;
                let inv = ops::affine(&g, -1.0, 1.0)?;
                ops::add(&ops::mul_rowvec(&mean, &g)?, &ops::mul_rowvec(&max, &inv)?)
            }
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        if let Some(q) = &self.query {
            out.push(Parameter { name: format!("{prefix}.query"), t: q.clone() });
        }
        if let Some(b) = &self.blend {
            out.push(Parameter { name: format!("{prefix}.blend"), t: b.clone() });
        }
    }
}

// ── local attention ─────────────────────────────────────────────────────

/// Windowed multi-head self-attention with a per-head relative position
/// bias. No output projection: the value projection is the only mixing,
/// which keeps the single-token case exactly v_proj(x).
pub struct LocalAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub relbias: Tensor, // [heads, window]
    pub window: usize,
    pub heads: usize,
}

impl LocalAttention {
    pub fn new(dim: usize, window: usize, heads: usize, rng: &mut impl Rng) -> Result<LocalAttention> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("heads {heads} must divide dim {dim}")));
        }
        if window % 2 == 0 {
            return Err(Error::Config(format!("window {window} must be odd")));
        }
        Ok(LocalAttention {
            wq: Linear::new(dim, dim, false, rng),
            wk: Linear::new(dim, dim, false, rng),
            wv: Linear::new(dim, dim, false, rng),
            relbias: init_zeros(&[heads, window]),
            window,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        ops::windowed_attention(&q, &k, &v, &self.relbias, self.window, self.heads)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        out.push(Parameter { name: format!("{prefix}.relbias"), t: self.relbias.clone() });
    }
}

// ── gated residual ──────────────────────────────────────────────────────

/// out = residual + sigmoid(gate(update)) (*) update
pub fn gated_fuse(residual: &Tensor, update: &Tensor, gate: &Linear) -> Result<Tensor> {
    if residual.shape() != update.shape() {
        return Err(Error::Shape(format!(
            "gated_fuse: residual {:?} vs update {:?}",
            residual.shape(),
            update.shape()
        )));
    }
    let g = ops::sigmoid(&gate.forward(update)?)?;
    ops::add(residual, &ops::mul(&g, update)?)
}

pub struct Gate {
    pub lin: Linear,
}

impl Gate {
    pub fn new(dim: usize, bias: f64, rng: &mut impl Rng) -> Gate {
        let lin = Linear::new(dim, dim, true, rng);
        if bias != 0.0 {
            let b = lin.b.as_ref().unwrap();
            b.set_data(&vec![bias; dim]);
        }
        Gate { lin }
    }

    pub fn fuse(&self, residual: &Tensor, update: &Tensor) -> Result<Tensor> {
        gated_fuse(residual, update, &self.lin)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        self.lin.params(prefix, out);
    }
}

// ── the block ───────────────────────────────────────────────────────────

pub struct AmpOutput {
    pub refined: Tensor,      // [L, D]
    pub next_anchors: Tensor, // [M, D]
}

pub struct AmpBlock {
    pub cfg: AmpConfig,
    pub pooler: Pooler,
    pub norm_scan: RmsNorm,
    pub scan: BidiScan,
    pub gate_scan: Option<Gate>,
    pub norm_attn: Option<RmsNorm>,
    pub attn: Option<LocalAttention>,
    pub gate_attn: Option<Gate>,
    pub norm_ffn: RmsNorm,
    pub ffn: Ffn,
}

impl AmpBlock {
    pub fn new(cfg: AmpConfig, rng: &mut impl Rng) -> Result<AmpBlock> {
        cfg.validate()?;
        let d = cfg.dim;
        let pooler = Pooler::new(cfg.pooling, d, cfg.heads, rng);
        let norm_scan = RmsNorm::new(d);
        let scan = BidiScan::new(cfg.scan_config(), cfg.bidirectional, rng)?;
        let gate_scan = cfg.gates.then(|| Gate::new(d, cfg.gate_bias, rng));
        let (norm_attn, attn, gate_attn) = if cfg.local_attention {
            (
                Some(RmsNorm::new(d)),
                Some(LocalAttention::new(d, cfg.window, cfg.heads, rng)?),
                cfg.gates.then(|| Gate::new(d, cfg.gate_bias, rng)),
            )
        } else {
            (None, None, None)
        };
        Ok(AmpBlock {
            cfg,
            pooler,
            norm_scan,
            scan,
            gate_scan,
            norm_attn,
            attn,
            gate_attn,
            norm_ffn: RmsNorm::new(d),
            ffn: Ffn::new(d, d * cfg.ffn_expansion, rng),
        })
    }

    /// The shared stage stack applied to one sequence.
    fn stages(&self, h: &Tensor) -> Result<Tensor> {
        let u = self.scan.forward(&self.norm_scan.forward(h)?)?;
        let mut h = match &self.gate_scan {
            Some(g) => g.fuse(h, &u)?,
            None => ops::add(h, &u)?,
        };
        if let (Some(norm), Some(attn)) = (&self.norm_attn, &self.attn) {
            let u = attn.forward(&norm.forward(&h)?)?;
            h = match &self.gate_attn {
                Some(g) => g.fuse(&h, &u)?,
                None => ops::add(&h, &u)?,
            };
        }
        let u = self.ffn.forward(&self.norm_ffn.forward(&h)?)?;
        ops::add(&h, &u)
    }

    pub fn forward(&self, x: &Tensor) -> Result<AmpOutput> {
        if x.rows() == 0 {
            return Err(Error::Shape("amp block: empty input".into()));
        }
        if x.cols() != self.cfg.dim {
            return Err(Error::Shape(format!(
                "amp block: expected [L, {}], got {:?}",
                self.cfg.dim,
                x.shape()
            )));
        }
        let anchors = self.pooler.forward(x, self.cfg.stride)?;
        if self.cfg.interleave {
            let (mixed, layout) = interleave(x, &anchors, self.cfg.stride)?;
            let out = self.stages(&mixed)?;
            let (refined, next_anchors) = deinterleave(&out, &layout)?;
            Ok(AmpOutput { refined, next_anchors })
        } else {
            // ablation: anchors are refined as their own stream and never
            // exchange with frames inside the block
            Ok(AmpOutput {
                refined: self.stages(x)?,
                next_anchors: self.stages(&anchors)?,
            })
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Parameter>) {
        self.pooler.params(&format!("{prefix}.pool"), out);
        self.norm_scan.params(&format!("{prefix}.norm_scan"), out);
        self.scan.params(&format!("{prefix}.scan"), out);
        if let Some(g) = &self.gate_scan {
            g.params(&format!("{prefix}.gate_scan"), out);
        }
        if let Some(n) = &self.norm_attn {
            n.params(&format!("{prefix}.norm_attn"), out);
        }
        if let Some(a) = &self.attn {
            a.params(&format!("{prefix}.attn"), out);
        }
        if let Some(g) = &self.gate_attn {
            g.params(&format!("{prefix}.gate_attn"), out);
        }
        self.norm_ffn.params(&format!("{prefix}.norm_ffn"), out);
        self.ffn.params(&format!("{prefix}.ffn"), out);
    }
}

/// Analytic multiply count of one block's forward over `t` input tokens,
/// stage by stage. The interleaved stream carries t + ceil(t/s) tokens; the
/// separate-streams ablation processes the same total count.
pub fn block_flops(cfg: &AmpConfig, t: usize) -> u64 {
    let d = cfg.dim as u64;
    let n = (t + t.div_ceil(cfg.stride)) as u64;
    let mut flops = t as u64 * d; // pooling (mean-equivalent cost)
    flops += crate::ssm::bidi_scan_flops(n as usize, &cfg.scan_config());
    if cfg.local_attention {
        flops += n * (3 * d * d + 2 * cfg.window as u64 * d);
    }
    if cfg.gates {
        flops += 2 * n * d * d;
    }
    flops += 2 * n * d * (cfg.ffn_expansion as u64 * d); // ffn
    flops += 3 * n * d; // norms
    flops
}

/// The same block with the scan swapped for full self-attention, the
/// quadratic reference point for the scaling comparison.
pub fn attention_block_flops(cfg: &AmpConfig, t: usize) -> u64 {
    let d = cfg.dim as u64;
    let n = (t + t.div_ceil(cfg.stride)) as u64;
    let mut flops = t as u64 * d;
    flops += 4 * n * d * d + 2 * n * n * d; // qkvo projections + score/mix matmuls
    if cfg.local_attention {
        flops += n * (3 * d * d + 2 * cfg.window as u64 * d);
    }
    if cfg.gates {
        flops += 2 * n * d * d;
    }
    flops += 2 * n * d * (cfg.ffn_expansion as u64 * d);
    flops += 3 * n * d;
    flops
}
