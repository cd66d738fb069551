//! Cross-level feature embedding: project the semantic and textural streams
//! to one width, fuse them with stacked bidirectional cross-attention, then
//! concatenate-project and add learnable position embeddings.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{NodeId, Result, Tape, Tensor};

use super::nn::{BoundLayerNorm, BoundLinear, BoundMha, LayerNorm, Linear, Mha};
use super::ModelConfig;

const POS_EMB_RANGE: f64 = 0.02;

/// One bidirectional block: each stream is layer-normed, then attends to the
/// other stream's normed block input, with a residual around each attention.
/// Both directions read the block inputs, so the update is symmetric rather
/// than sequential.
#[derive(Debug, Clone)]
pub(crate) struct CrossBlock {
    pub ln_sem: LayerNorm,
    pub ln_tex: LayerNorm,
    /// Queries from the semantic stream, keys/values from the textural one.
    pub attn_sem: Mha,
    /// Queries from the textural stream, keys/values from the semantic one.
    pub attn_tex: Mha,
}

#[derive(Debug, Clone)]
pub(crate) struct ClfeParams {
    pub proj_sem: Linear,
    pub proj_tex: Linear,
    pub blocks: Vec<CrossBlock>,
    pub fuse: Linear,
    /// `t_max × d_model`, learnable; rows 0..T are added to the fused output.
    pub pos_emb: Tensor,
}

pub(crate) struct BoundClfe {
    proj_sem: BoundLinear,
    proj_tex: BoundLinear,
    blocks: Vec<BoundCrossBlock>,
    fuse: BoundLinear,
    pos_emb: NodeId,
}

pub(crate) struct BoundCrossBlock {
    ln_sem: BoundLayerNorm,
    ln_tex: BoundLayerNorm,
    attn_sem: BoundMha,
    attn_tex: BoundMha,
}

impl ClfeParams {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let blocks = (0..cfg.clfe_blocks)
            .map(|_| CrossBlock {
                ln_sem: LayerNorm::init(d),
                ln_tex: LayerNorm::init(d),
                attn_sem: Mha::init(rng, d, cfg.n_heads),
                attn_tex: Mha::init(rng, d, cfg.n_heads),
            })
            .collect();
        let pos_data = (0..cfg.t_max * d)
            .map(|_| rng.random_range(-POS_EMB_RANGE..POS_EMB_RANGE))
            .collect();
        ClfeParams {
            proj_sem: Linear::init(rng, cfg.d_sem, d, true),
            proj_tex: Linear::init(rng, cfg.d_tex, d, true),
            blocks,
            fuse: Linear::init(rng, 2 * d, d, true),
            pos_emb: Tensor::from_vec(&[cfg.t_max, d], pos_data).with_grad(),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.proj_sem.visit(&format!("{name}.proj_sem"), f);
        self.proj_tex.visit(&format!("{name}.proj_tex"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.ln_sem.visit(&format!("{name}.block{i}.ln_sem"), f);
            b.ln_tex.visit(&format!("{name}.block{i}.ln_tex"), f);
            b.attn_sem.visit(&format!("{name}.block{i}.attn_sem"), f);
            b.attn_tex.visit(&format!("{name}.block{i}.attn_tex"), f);
        }
        self.fuse.visit(&format!("{name}.fuse"), f);
        f(&format!("{name}.pos_emb"), &self.pos_emb);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.proj_sem.visit_mut(&format!("{name}.proj_sem"), f);
        self.proj_tex.visit_mut(&format!("{name}.proj_tex"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.ln_sem.visit_mut(&format!("{name}.block{i}.ln_sem"), f);
            b.ln_tex.visit_mut(&format!("{name}.block{i}.ln_tex"), f);
            b.attn_sem.visit_mut(&format!("{name}.block{i}.attn_sem"), f);
            b.attn_tex.visit_mut(&format!("{name}.block{i}.attn_tex"), f);
        }
        self.fuse.visit_mut(&format!("{name}.fuse"), f);
        f(&format!("{name}.pos_emb"), &mut self.pos_emb);
    }

    /// Registration order matches [`ClfeParams::visit`] so checkpoints and
    /// optimizers see one canonical name sequence.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<BoundClfe> {
        let proj_sem = self.proj_sem.bind(tape, &format!("{name}.proj_sem"))?;
        let proj_tex = self.proj_tex.bind(tape, &format!("{name}.proj_tex"))?;
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                Ok(BoundCrossBlock {
                    ln_sem: b.ln_sem.bind(tape, &format!("{name}.block{i}.ln_sem"))?,
                    ln_tex: b.ln_tex.bind(tape, &format!("{name}.block{i}.ln_tex"))?,
                    attn_sem: b.attn_sem.bind(tape, &format!("{name}.block{i}.attn_sem"))?,
                    attn_tex: b.attn_tex.bind(tape, &format!("{name}.block{i}.attn_tex"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundClfe {
            proj_sem,
            proj_tex,
            blocks,
            fuse: self.fuse.bind(tape, &format!("{name}.fuse"))?,
            pos_emb: tape.param(format!("{name}.pos_emb"), &self.pos_emb)?,
        })
    }
}

impl BoundClfe {
    /// `x_sem: T×d_sem`, `x_tex: T×d_tex` → fused `T×d_model`.
    pub fn forward(&self, tape: &mut Tape, x_sem: NodeId, x_tex: NodeId) -> Result<NodeId> {
        let t = tape.shape(x_sem)[0];
        let mut h_sem = self.proj_sem.forward(tape, x_sem)?;
        let mut h_tex = self.proj_tex.forward(tape, x_tex)?;
        for block in &self.blocks {
            let n_sem = block.ln_sem.forward(tape, h_sem)?;
            let n_tex = block.ln_tex.forward(tape, h_tex)?;
            let (to_sem, _) = block.attn_sem.forward(tape, n_sem, n_tex)?;
            let (to_tex, _) = block.attn_tex.forward(tape, n_tex, n_sem)?;
            h_sem = tape.add(h_sem, to_sem)?;
            h_tex = tape.add(h_tex, to_tex)?;
        }
        let cat = tape.concat_cols(&[h_sem, h_tex])?;
        let fused = self.fuse.forward(tape, cat)?;
        let pos = tape.slice_rows(self.pos_emb, 0, t)?;
        tape.add(fused, pos)
    }
}
