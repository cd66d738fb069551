//! Trace separation and domain adaptation, a training-only branch.
//!
//! The final frame representation is encoded to a video-level vector by a
//! multi-scale convolution bank, then split by two linear projections into a
//! generic forgery feature `F_f` and a residual feature `F_s`. Three penalties
//! shape the split elsewhere in the loss: the |cosine| between the pair, and a
//! domain-classification loss whose gradient reaches `F_f` only through a
//! gradient reversal layer, weighted by a mixture over per-domain experts.
//! The mixture weights are computed from a stop-gradient copy of `F_f`, so the
//! weight generator learns to route without fighting the reversal.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{NodeId, Result, Tape, Tensor};

use super::nn::{xavier, BoundLinear, Linear};
use super::ModelConfig;

pub(crate) const CONV_KERNELS: [usize; 3] = [1, 3, 8];
const COS_EPS: f64 = 1e-8;

/// One domain expert: a two-layer perceptron emitting K-way domain logits.
#[derive(Debug, Clone)]
pub(crate) struct Expert {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct TdaParams {
    /// Bias-free kernels, one per scale; biases would be redundant with the
    /// merge projection's bias after mean pooling.
    pub convs: Vec<Tensor>,
    pub merge: Linear,
    pub proj_f: Linear,
    pub proj_s: Linear,
    pub weight_gen: Linear,
    pub experts: Vec<Expert>,
}

pub(crate) struct BoundTda {
    convs: Vec<NodeId>,
    merge: BoundLinear,
    proj_f: BoundLinear,
    proj_s: BoundLinear,
    weight_gen: BoundLinear,
    experts: Vec<(BoundLinear, BoundLinear)>,
}

/// Training-time outputs consumed by the loss and the probes.
pub(crate) struct TdaForward {
    /// Generic forgery feature, `1×D`.
    pub f_f: NodeId,
    /// Irrelevant/domain-bearing feature, `1×D`.
    pub f_s: NodeId,
    /// Mixture weights over experts, `1×K`, simplex row.
    pub omega: NodeId,
    /// Aggregated adversarial domain logits, `1×K`.
    pub o_adv: NodeId,
    /// |cos(F_f, F_s)| as a `1×1` node, this video's orthogonality penalty.
    pub abs_cos: NodeId,
}

impl TdaParams {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let k = cfg.k_domains;
        let convs = CONV_KERNELS
            .iter()
            .map(|&ks| xavier(rng, &[ks, d, d], ks * d, d))
            .collect();
        let experts = (0..k)
            .map(|_| Expert {
                hidden: Linear::init(rng, d, d, true),
                out: Linear::init(rng, d, k, true),
            })
            .collect();
        TdaParams {
            convs,
            merge: Linear::init(rng, CONV_KERNELS.len() * d, d, true),
            proj_f: Linear::init(rng, d, d, true),
            proj_s: Linear::init(rng, d, d, true),
            weight_gen: Linear::init(rng, d, k, true),
            experts,
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (t, ks) in self.convs.iter().zip(CONV_KERNELS) {
            f(&format!("{name}.conv_k{ks}"), t);
        }
        self.merge.visit(&format!("{name}.merge"), f);
        self.proj_f.visit(&format!("{name}.proj_f"), f);
        self.proj_s.visit(&format!("{name}.proj_s"), f);
        self.weight_gen.visit(&format!("{name}.weight_gen"), f);
        for (i, e) in self.experts.iter().enumerate() {
            e.hidden.visit(&format!("{name}.expert{i}.hidden"), f);
            e.out.visit(&format!("{name}.expert{i}.out"), f);
        }
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (t, ks) in self.convs.iter_mut().zip(CONV_KERNELS) {
            f(&format!("{name}.conv_k{ks}"), t);
        }
        self.merge.visit_mut(&format!("{name}.merge"), f);
        self.proj_f.visit_mut(&format!("{name}.proj_f"), f);
        self.proj_s.visit_mut(&format!("{name}.proj_s"), f);
        self.weight_gen.visit_mut(&format!("{name}.weight_gen"), f);
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.hidden.visit_mut(&format!("{name}.expert{i}.hidden"), f);
            e.out.visit_mut(&format!("{name}.expert{i}.out"), f);
        }
    }

    /// Registration order matches [`TdaParams::visit`] so checkpoints and
    /// optimizers see one canonical name sequence.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<BoundTda> {
        let convs = self
            .convs
            .iter()
            .zip(CONV_KERNELS)
            .map(|(t, ks)| tape.param(format!("{name}.conv_k{ks}"), t))
            .collect::<Result<Vec<_>>>()?;
        let merge = self.merge.bind(tape, &format!("{name}.merge"))?;
        let proj_f = self.proj_f.bind(tape, &format!("{name}.proj_f"))?;
        let proj_s = self.proj_s.bind(tape, &format!("{name}.proj_s"))?;
        let weight_gen = self.weight_gen.bind(tape, &format!("{name}.weight_gen"))?;
        let experts = self
            .experts
            .iter()
            .enumerate()
            .map(|(i, e)| {
                Ok((
                    e.hidden.bind(tape, &format!("{name}.expert{i}.hidden"))?,
                    e.out.bind(tape, &format!("{name}.expert{i}.out"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundTda { convs, merge, proj_f, proj_s, weight_gen, experts })
    }
}

impl BoundTda {
    /// Run the branch on the final frame representation (`T×D`).
    pub fn forward(&self, tape: &mut Tape, f_final: NodeId, cfg: &ModelConfig) -> Result<TdaForward> {
        let encoded = if cfg.conv_then_pool {
            // Convolve the frame sequence at each scale, then pool over time.
            let mut pooled = Vec::with_capacity(self.convs.len());
            for &kernel in &self.convs {
                let c = tape.conv1d(f_final, kernel)?;
                pooled.push(tape.mean_rows(c)?);
            }
            let cat = tape.concat_cols(&pooled)?;
            self.merge.forward(tape, cat)?
        } else {
            // Alternative order: pool to a single prototype row first, then
            // run the (now mostly degenerate) convolutions over it.
            let proto = tape.mean_rows(f_final)?;
            let mut pooled = Vec::with_capacity(self.convs.len());
            for &kernel in &self.convs {
                let c = tape.conv1d(proto, kernel)?;
                pooled.push(tape.mean_rows(c)?);
            }
            let cat = tape.concat_cols(&pooled)?;
            self.merge.forward(tape, cat)?
        };

        let f_f = self.proj_f.forward(tape, encoded)?;
        let f_s = self.proj_s.forward(tape, encoded)?;
        let abs_cos = abs_cosine(tape, f_f, f_s)?;

        // Routing weights come from a gradient-isolated copy of F_f.
        let frozen = tape.stop_gradient(f_f)?;
        let gate_logits = self.weight_gen.forward(tape, frozen)?;
        let omega = tape.softmax_rows(gate_logits, None)?;

        // Experts see F_f through the reversal layer; stacked logits are
        // `K×K` (row k = expert k), convexly combined by ω.
        let reversed = tape.grad_reverse(f_f, cfg.grl_lambda)?;
        let rows = self
            .experts
            .iter()
            .map(|(hidden, out)| {
                let h = hidden.forward(tape, reversed)?;
                let h = tape.tanh(h)?;
                out.forward(tape, h)
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat_rows(&rows)?;
        let o_adv = tape.matmul(omega, stacked)?;

        Ok(TdaForward { f_f, f_s, omega, o_adv, abs_cos })
    }
}

/// `|cos(a, b)|` for two row vectors, with an ε-stabilized denominator so
/// zero-norm inputs yield 0 instead of an error.
pub(crate) fn abs_cosine(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let bt = tape.transpose(b)?;
    let dot = tape.matmul(a, bt)?;
    let at = tape.transpose(a)?;
    let aa = tape.matmul(a, at)?;
    let na = tape.sqrt(aa)?;
    let bb = tape.matmul(b, bt)?;
    let nb = tape.sqrt(bb)?;
    let den = tape.mul(na, nb)?;
    let den = tape.add_scalar(den, COS_EPS)?;
    let num = tape.abs(dot)?;
    tape.div(num, den)
}
