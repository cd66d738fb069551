//! Shared parameter blocks: linear layers, layer norm, multi-head attention.
//!
//! Each block is a bundle of [`Tensor`] parameters with three verbs: `init`
//! (deterministic random initialization), `visit`/`visit_mut` (enumerate
//! parameters under a hierarchical dotted name), and `bind` (register the
//! parameters on a [`Tape`] under those same names, yielding node ids that the
//! forward helpers consume). Keeping visit and bind name-compatible is what
//! lets the optimizer and the gradient checker address parameters uniformly.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{NodeId, Result, Tape, Tensor};

const LN_EPS: f64 = 1e-5;

/// Dense layer `x(n×in) ↦ x·w + b` with `w: in×out`, optional `b: 1×out`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

pub(crate) struct BoundLinear {
    pub w: NodeId,
    pub b: Option<NodeId>,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            w: xavier(rng, &[d_in, d_out], d_in, d_out),
            b: bias.then(|| Tensor::zeros(&[1, d_out]).with_grad()),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{name}.w"), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{name}.b"), b);
        }
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{name}.w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{name}.b"), b);
        }
    }

    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<BoundLinear> {
        Ok(BoundLinear {
            w: tape.param(format!("{name}.w"), &self.w)?,
            b: self
                .b
                .as_ref()
                .map(|b| tape.param(format!("{name}.b"), b))
                .transpose()?,
        })
    }
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let y = tape.matmul(x, self.w)?;
        match self.b {
            Some(b) => tape.add_row(y, b),
            None => Ok(y),
        }
    }
}

/// Per-feature affine layer norm over each row.
#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

pub(crate) struct BoundLayerNorm {
    pub gain: NodeId,
    pub bias: NodeId,
}

impl LayerNorm {
    pub fn init(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::from_vec(&[1, d], vec![1.0; d]).with_grad(),
            bias: Tensor::zeros(&[1, d]).with_grad(),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{name}.gain"), &self.gain);
        f(&format!("{name}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{name}.gain"), &mut self.gain);
        f(&format!("{name}.bias"), &mut self.bias);
    }

    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<BoundLayerNorm> {
        Ok(BoundLayerNorm {
            gain: tape.param(format!("{name}.gain"), &self.gain)?,
            bias: tape.param(format!("{name}.bias"), &self.bias)?,
        })
    }
}

impl BoundLayerNorm {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.layer_norm(x, self.gain, self.bias, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention with separate query/key/value and
/// output projections.
#[derive(Debug, Clone)]
pub(crate) struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

pub(crate) struct BoundMha {
    wq: BoundLinear,
    wk: BoundLinear,
    wv: BoundLinear,
    wo: BoundLinear,
    n_heads: usize,
}

impl Mha {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, n_heads: usize) -> Self {
        Mha {
            wq: Linear::init(rng, d, d, true),
            wk: Linear::init(rng, d, d, true),
            wv: Linear::init(rng, d, d, true),
            wo: Linear::init(rng, d, d, true),
            n_heads,
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.wq.visit(&format!("{name}.wq"), f);
        self.wk.visit(&format!("{name}.wk"), f);
        self.wv.visit(&format!("{name}.wv"), f);
        self.wo.visit(&format!("{name}.wo"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.wq.visit_mut(&format!("{name}.wq"), f);
        self.wk.visit_mut(&format!("{name}.wk"), f);
        self.wv.visit_mut(&format!("{name}.wv"), f);
        self.wo.visit_mut(&format!("{name}.wo"), f);
    }

    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<BoundMha> {
        Ok(BoundMha {
            wq: self.wq.bind(tape, &format!("{name}.wq"))?,
            wk: self.wk.bind(tape, &format!("{name}.wk"))?,
            wv: self.wv.bind(tape, &format!("{name}.wv"))?,
            wo: self.wo.bind(tape, &format!("{name}.wo"))?,
            n_heads: self.n_heads,
        })
    }
}

impl BoundMha {
    /// Attention with queries from `q_in` and keys/values from `kv_in`.
    /// Returns the projected output and the per-head attention matrices
    /// (row-stochastic, one node per head).
    pub fn forward(
        &self,
        tape: &mut Tape,
        q_in: NodeId,
        kv_in: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let d = tape.shape(q_in)[1];
        let dh = d / self.n_heads;
        let q = self.wq.forward(tape, q_in)?;
        let k = self.wk.forward(tape, kv_in)?;
        let v = self.wv.forward(tape, kv_in)?;

        let mut heads = Vec::with_capacity(self.n_heads);
        let mut attns = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax_rows(scaled, None)?;
            heads.push(tape.matmul(attn, vh)?);
            attns.push(attn);
        }
        let merged = tape.concat_cols(&heads)?;
        Ok((self.wo.forward(tape, merged)?, attns))
    }
}

/// Xavier/Glorot uniform initialization.
pub(crate) fn xavier(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data).with_grad()
}
