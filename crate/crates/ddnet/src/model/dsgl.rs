//! Dual-stream graph learning: a temporal transformer encoder feeding two
//! parallel graph streams — one over a fixed Gaussian temporal-distance graph,
//! one over a dynamic feature-similarity graph — fused into the final
//! representation, plus the frame and video heads.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::tensor::{NodeId, Result, Tape, Tensor, TensorError};

use super::nn::{xavier, BoundLayerNorm, BoundLinear, BoundMha, LayerNorm, Linear, Mha};
use super::ModelConfig;

/// Pre-norm transformer encoder layer: self-attention then a two-layer
/// feed-forward expansion, each behind a residual.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Mha,
    pub ln2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

/// One graph convolution: `H_out = A·(H·W) + b + H`.
#[derive(Debug, Clone)]
pub(crate) struct GcnLayer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct DsglParams {
    pub layers: Vec<EncoderLayer>,
    /// Projections defining the similarity graph.
    pub w_theta: Tensor,
    pub w_phi: Tensor,
    /// gc1, gc2 run on the similarity graph; gc3, gc4 on the distance graph.
    pub gcn: [GcnLayer; 4],
    pub fuse: Linear,
    pub frame_head: Linear,
    pub video_head: Linear,
}

pub(crate) struct BoundDsgl {
    layers: Vec<BoundEncoderLayer>,
    w_theta: NodeId,
    w_phi: NodeId,
    gcn: Vec<(NodeId, NodeId)>,
    fuse: BoundLinear,
    frame_head: BoundLinear,
    video_head: BoundLinear,
}

pub(crate) struct BoundEncoderLayer {
    ln1: BoundLayerNorm,
    attn: BoundMha,
    ln2: BoundLayerNorm,
    ffn1: BoundLinear,
    ffn2: BoundLinear,
}

/// Everything the heads need, plus probe points used by diagnostics.
pub(crate) struct DsglForward {
    /// Transformer output `T×D` — the shared graph-stream input.
    pub encoded: NodeId,
    /// Fused stream output `T×D` (equals `encoded` when the graph streams are
    /// ablated).
    pub f_final: NodeId,
    pub frame_logits: NodeId,
    pub frame_probs: NodeId,
    pub video_logit: NodeId,
    pub video_prob: NodeId,
    /// Similarity adjacency actually used this pass, if the streams ran.
    pub a_sim: Option<NodeId>,
}

impl GcnLayer {
    fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        GcnLayer {
            w: xavier(rng, &[d, d], d, d),
            b: Tensor::zeros(&[1, d]).with_grad(),
        }
    }
}

impl DsglParams {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.transformer_layers)
            .map(|_| EncoderLayer {
                ln1: LayerNorm::init(d),
                attn: Mha::init(rng, d, cfg.n_heads),
                ln2: LayerNorm::init(d),
                ffn1: Linear::init(rng, d, 2 * d, true),
                ffn2: Linear::init(rng, 2 * d, d, true),
            })
            .collect();
        DsglParams {
            layers,
            w_theta: xavier(rng, &[d, d], d, d),
            w_phi: xavier(rng, &[d, d], d, d),
            gcn: std::array::from_fn(|_| GcnLayer::init(rng, d)),
            fuse: Linear::init(rng, 2 * d, d, true),
            frame_head: Linear::init(rng, d, 1, true),
            video_head: Linear::init(rng, d, 1, true),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.ln1.visit(&format!("{name}.layer{i}.ln1"), f);
            l.attn.visit(&format!("{name}.layer{i}.attn"), f);
            l.ln2.visit(&format!("{name}.layer{i}.ln2"), f);
            l.ffn1.visit(&format!("{name}.layer{i}.ffn1"), f);
            l.ffn2.visit(&format!("{name}.layer{i}.ffn2"), f);
        }
        f(&format!("{name}.w_theta"), &self.w_theta);
        f(&format!("{name}.w_phi"), &self.w_phi);
        for (i, g) in self.gcn.iter().enumerate() {
            f(&format!("{name}.gc{}.w", i + 1), &g.w);
            f(&format!("{name}.gc{}.b", i + 1), &g.b);
        }
        self.fuse.visit(&format!("{name}.fuse"), f);
        self.frame_head.visit(&format!("{name}.frame_head"), f);
        self.video_head.visit(&format!("{name}.video_head"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.ln1.visit_mut(&format!("{name}.layer{i}.ln1"), f);
            l.attn.visit_mut(&format!("{name}.layer{i}.attn"), f);
            l.ln2.visit_mut(&format!("{name}.layer{i}.ln2"), f);
            l.ffn1.visit_mut(&format!("{name}.layer{i}.ffn1"), f);
            l.ffn2.visit_mut(&format!("{name}.layer{i}.ffn2"), f);
        }
        f(&format!("{name}.w_theta"), &mut self.w_theta);
        f(&format!("{name}.w_phi"), &mut self.w_phi);
        for (i, g) in self.gcn.iter_mut().enumerate() {
            f(&format!("{name}.gc{}.w", i + 1), &mut g.w);
            f(&format!("{name}.gc{}.b", i + 1), &mut g.b);
        }
        self.fuse.visit_mut(&format!("{name}.fuse"), f);
        self.frame_head.visit_mut(&format!("{name}.frame_head"), f);
        self.video_head.visit_mut(&format!("{name}.video_head"), f);
    }

    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<BoundDsgl> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(BoundEncoderLayer {
                    ln1: l.ln1.bind(tape, &format!("{name}.layer{i}.ln1"))?,
                    attn: l.attn.bind(tape, &format!("{name}.layer{i}.attn"))?,
                    ln2: l.ln2.bind(tape, &format!("{name}.layer{i}.ln2"))?,
                    ffn1: l.ffn1.bind(tape, &format!("{name}.layer{i}.ffn1"))?,
                    ffn2: l.ffn2.bind(tape, &format!("{name}.layer{i}.ffn2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // Same registration order as `visit`: graph projections, then the
        // four graph-convolution layers.
        let w_theta = tape.param(format!("{name}.w_theta"), &self.w_theta)?;
        let w_phi = tape.param(format!("{name}.w_phi"), &self.w_phi)?;
        let gcn = self
            .gcn
            .iter()
            .enumerate()
            .map(|(i, g)| {
                Ok((
                    tape.param(format!("{name}.gc{}.w", i + 1), &g.w)?,
                    tape.param(format!("{name}.gc{}.b", i + 1), &g.b)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundDsgl {
            layers,
            w_theta,
            w_phi,
            gcn,
            fuse: self.fuse.bind(tape, &format!("{name}.fuse"))?,
            frame_head: self.frame_head.bind(tape, &format!("{name}.frame_head"))?,
            video_head: self.video_head.bind(tape, &format!("{name}.video_head"))?,
        })
    }
}

impl BoundDsgl {
    pub fn forward(
        &self,
        tape: &mut Tape,
        fused: NodeId,
        cfg: &ModelConfig,
        dist: &DistanceCache,
    ) -> Result<DsglForward> {
        let t = tape.shape(fused)[0];
        let mut x = fused;
        for layer in &self.layers {
            let n1 = layer.ln1.forward(tape, x)?;
            let (attn_out, _) = layer.attn.forward(tape, n1, n1)?;
            x = tape.add(x, attn_out)?;
            let n2 = layer.ln2.forward(tape, x)?;
            let h = layer.ffn1.forward(tape, n2)?;
            let h = tape.tanh(h)?;
            let h = layer.ffn2.forward(tape, h)?;
            x = tape.add(x, h)?;
        }

        let (f_final, a_sim) = if cfg.ablate_gcn {
            (x, None)
        } else {
            let a_sim = build_semantic_graph(tape, x, self.w_theta, self.w_phi, cfg.tau)?;
            let a_dist = tape.constant(&[t, t], dist.values(t, cfg.sigma)?.as_ref().clone())?;
            let s1 = gcn_layer(tape, x, a_sim, self.gcn[0].0, self.gcn[0].1)?;
            let s2 = gcn_layer(tape, s1, a_sim, self.gcn[1].0, self.gcn[1].1)?;
            let d1 = gcn_layer(tape, x, a_dist, self.gcn[2].0, self.gcn[2].1)?;
            let d2 = gcn_layer(tape, d1, a_dist, self.gcn[3].0, self.gcn[3].1)?;
            let cat = tape.concat_cols(&[s2, d2])?;
            (self.fuse.forward(tape, cat)?, Some(a_sim))
        };

        let frame_logits = self.frame_head.forward(tape, f_final)?;
        let frame_probs = tape.sigmoid(frame_logits)?;
        let pooled = tape.mean_rows(f_final)?;
        let video_logit = self.video_head.forward(tape, pooled)?;
        let video_prob = tape.sigmoid(video_logit)?;
        Ok(DsglForward {
            encoded: x,
            f_final,
            frame_logits,
            frame_probs,
            video_logit,
            video_prob,
            a_sim,
        })
    }
}

/// `H_out = A·(H·W) + b + H` — graph convolution with a residual path.
pub fn gcn_layer(tape: &mut Tape, h: NodeId, a: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let hw = tape.matmul(h, w)?;
    let ahw = tape.matmul(a, hw)?;
    let biased = tape.add_row(ahw, b)?;
    tape.add(biased, h)
}

/// Dense Gaussian-decay adjacency over `t` frames:
/// `A[i][j] = exp(−(i−j)² / (2σ²))`. Symmetric with a unit diagonal.
pub fn build_distance_graph(t: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(TensorError::InvalidArg {
            op: "build_distance_graph",
            detail: format!("sigma must be positive and finite, got {sigma}"),
        });
    }
    if t == 0 {
        return Err(TensorError::InvalidArg {
            op: "build_distance_graph",
            detail: "zero frames".into(),
        });
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut a = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            let d = i as f64 - j as f64;
            a[i * t + j] = (-d * d * inv).exp();
        }
    }
    Ok(a)
}

/// Shares one distance matrix per frame count; the matrix depends only on
/// `(t, σ)` and σ is fixed per run, so entries are computed at most once.
#[derive(Debug, Default)]
pub struct DistanceCache {
    by_t: RefCell<HashMap<usize, Rc<Vec<f64>>>>,
}

impl DistanceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn values(&self, t: usize, sigma: f64) -> Result<Rc<Vec<f64>>> {
        let mut map = self.by_t.borrow_mut();
        if let Some(v) = map.get(&t) {
            return Ok(Rc::clone(v));
        }
        let v = Rc::new(build_distance_graph(t, sigma)?);
        map.insert(t, Rc::clone(&v));
        Ok(v)
    }
}

/// Dynamic similarity adjacency: cosine similarity between rows of `X·W_θ`
/// and rows of `X·W_φ`, hard-thresholded at `τ`, then re-normalized with a
/// softmax over each row's survivors. Sub-threshold entries are excluded from
/// the softmax outright (not zeroed and renormalized into it), and the
/// diagonal always survives so no row can end up empty.
pub fn build_semantic_graph(
    tape: &mut Tape,
    x: NodeId,
    w_theta: NodeId,
    w_phi: NodeId,
    tau: f64,
) -> Result<NodeId> {
    if !(tau > -1.0 && tau < 1.0) {
        return Err(TensorError::InvalidArg {
            op: "build_semantic_graph",
            detail: format!("tau must lie in (-1, 1), got {tau}"),
        });
    }
    let t = tape.shape(x)[0];
    let p = tape.matmul(x, w_theta)?;
    let q = tape.matmul(x, w_phi)?;
    let pn = tape.l2_normalize_rows(p, 1e-12)?;
    let qn = tape.l2_normalize_rows(q, 1e-12)?;
    let qt = tape.transpose(qn)?;
    let sim = tape.matmul(pn, qt)?;

    // The survivor set is decided by current values and deliberately carries
    // no gradient; gradients flow through the retained similarities only.
    let sim_vals = tape.value(sim);
    let mask: Vec<bool> = (0..t * t)
        .map(|ix| sim_vals[ix] >= tau || ix / t == ix % t)
        .collect();
    tape.softmax_rows(sim, Some(&mask))
}
