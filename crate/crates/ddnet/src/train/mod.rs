//! Training: the composite loss, the AdamW optimizer with global-norm
//! clipping, the epoch loop, and binary checkpoints that resume bit-exactly.

mod checkpoint;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureSequence;
use crate::eval::{evaluate, EvalConfig, EvalError, EvalReport};
use crate::model::{BoundModel, DdnetModel, Forward, ModelError};
use crate::tensor::gradcheck::ParamVisit;
use crate::tensor::{NodeId, Tape, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("non-finite gradient for {param} at step {step} (encountered {value})")]
    NonFiniteGrad { param: String, step: u64, value: f64 },
}

/// Probabilities are clamped to this interval before any logarithm.
pub const PROB_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

/// Relative weights of the loss components; the frame term has weight 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Video-level classification term.
    pub video: f64,
    /// Domain-adversarial term.
    pub adversarial: f64,
    /// Forgery/content orthogonality penalty.
    pub orthogonality: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { video: 0.3, adversarial: 0.005, orthogonality: 1.0 }
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled so their global L2 norm never exceeds this.
    pub clip_norm: f64,
    /// Seed for the shuffling stream (model initialization seeds separately).
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            seed: 7,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(TrainError::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return err(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return err(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return err(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        let w = &self.loss_weights;
        for (name, v) in [
            ("video", w.video),
            ("adversarial", w.adversarial),
            ("orthogonality", w.orthogonality),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("loss weight {name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Tape nodes for one batch's loss components (all scalars).
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub frame: NodeId,
    pub video: NodeId,
    pub adversarial: NodeId,
    pub orthogonality: NodeId,
    pub total: NodeId,
}

/// Scalar values of the components, read back after a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub frame: f64,
    pub video: f64,
    pub adversarial: f64,
    pub orthogonality: f64,
    pub total: f64,
}

impl LossValues {
    fn read(tape: &Tape, nodes: &LossNodes) -> LossValues {
        LossValues {
            frame: tape.value(nodes.frame)[0],
            video: tape.value(nodes.video)[0],
            adversarial: tape.value(nodes.adversarial)[0],
            orthogonality: tape.value(nodes.orthogonality)[0],
            total: tape.value(nodes.total)[0],
        }
    }
}

/// Mean binary cross-entropy between a column of probabilities and 0/1
/// targets, with probabilities clamped away from the log singularities.
fn bce_mean(tape: &mut Tape, probs: NodeId, targets: &[f64]) -> Result<NodeId> {
    let n = targets.len();
    let y = tape.constant(&[n, 1], targets.to_vec())?;
    let p = tape.clamp(probs, PROB_CLAMP.0, PROB_CLAMP.1)?;
    let ln_p = tape.ln(p)?;
    let pos = tape.mul(y, ln_p)?;
    let neg_p = tape.scale(p, -1.0)?;
    let one_minus_p = tape.add_scalar(neg_p, 1.0)?;
    let ln_q = tape.ln(one_minus_p)?;
    let neg_y = tape.scale(y, -1.0)?;
    let one_minus_y = tape.add_scalar(neg_y, 1.0)?;
    let neg = tape.mul(one_minus_y, ln_q)?;
    let both = tape.add(pos, neg)?;
    let mean = tape.mean_all(both)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// Cross-entropy of a `1×K` logit row against a class index.
fn cross_entropy(tape: &mut Tape, logits: NodeId, class: usize) -> Result<NodeId> {
    let probs = tape.softmax_rows(logits, None)?;
    let picked = tape.slice_cols(probs, class, 1)?;
    let clamped = tape.clamp(picked, PROB_CLAMP.0, 1.0)?;
    let ln_p = tape.ln(clamped)?;
    Ok(tape.scale(ln_p, -1.0)?)
}

/// Loss components for a single video's forward pass. The adversarial and
/// orthogonality terms are zero constants when the trace branch is off.
pub(crate) fn video_losses(
    tape: &mut Tape,
    fwd: &Forward,
    video: &FeatureSequence,
) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
    let frame_targets: Vec<f64> =
        video.frame_labels().iter().map(|&b| b as u8 as f64).collect();
    let frame = bce_mean(tape, fwd.frame_probs, &frame_targets)?;
    let video_target = [video.video_label() as u8 as f64];
    let video_term = bce_mean(tape, fwd.video_prob, &video_target)?;
    let (adv, orth) = match &fwd.tda {
        Some(tda) => (
            cross_entropy(tape, tda.o_adv, video.domain_id() as usize)?,
            tda.abs_cos,
        ),
        None => (tape.scalar(0.0)?, tape.scalar(0.0)?),
    };
    Ok((frame, video_term, adv, orth))
}

/// Mean of per-video scalar nodes.
fn mean_of(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(tape.scale(acc, 1.0 / nodes.len() as f64)?)
}

/// Build the weighted batch loss for `videos` on an already-bound model.
pub fn batch_loss(
    tape: &mut Tape,
    bound: &BoundModel<'_>,
    videos: &[&FeatureSequence],
    weights: &LossWeights,
) -> Result<LossNodes> {
    if videos.is_empty() {
        return Err(TrainError::Config("a batch must contain at least one video".into()));
    }
    let (mut frames, mut vids, mut advs, mut orths) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for video in videos {
        let fwd = bound.forward(tape, video, true)?;
        let (f, v, a, o) = video_losses(tape, &fwd, video)?;
        frames.push(f);
        vids.push(v);
        advs.push(a);
        orths.push(o);
    }
    let frame = mean_of(tape, &frames)?;
    let video = mean_of(tape, &vids)?;
    let adversarial = mean_of(tape, &advs)?;
    let orthogonality = mean_of(tape, &orths)?;
    let wv = tape.scale(video, weights.video)?;
    let wa = tape.scale(adversarial, weights.adversarial)?;
    let wo = tape.scale(orthogonality, weights.orthogonality)?;
    let mut total = tape.add(frame, wv)?;
    total = tape.add(total, wa)?;
    total = tape.add(total, wo)?;
    Ok(LossNodes { frame, video, adversarial, orthogonality, total })
}

/// Decoupled-weight-decay Adam over named parameters. Parameters that
/// received no gradient in a step are left untouched (no decay, no moment
/// update), so unused branches never drift.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub(crate) fn state(&self) -> (&u64, &BTreeMap<String, (Vec<f64>, Vec<f64>)>) {
        (&self.step, &self.moments)
    }

    pub(crate) fn restore(&mut self, step: u64, moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>) {
        self.step = step;
        self.moments = moments;
    }

    /// Clip `grads` to the global norm budget, then apply one update.
    pub fn apply<M: ParamVisit>(
        &mut self,
        model: &mut M,
        grads: &mut BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        for (name, g) in grads.iter() {
            // `f64::max` would swallow NaN, so scan for the offender directly.
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGrad {
                    param: name.clone(),
                    step: self.step + 1,
                    value: *bad,
                });
            }
        }
        let norm: f64 = grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > self.clip_norm {
            let factor = self.clip_norm / norm;
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= factor;
                }
            }
        }

        self.step += 1;
        let t = self.step;
        let bias1 = 1.0 - self.beta1.powi(t as i32);
        let bias2 = 1.0 - self.beta2.powi(t as i32);
        model.visit_params_mut(&mut |name, tensor| {
            let Some(g) = grads.get(name) else { return };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let data = tensor.data_mut();
            for i in 0..g.len() {
                data[i] -= self.lr * self.weight_decay * data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        });
        Ok(())
    }
}

/// Finite-difference check of the composite loss over every parameter of a
/// micro-scale model (two short videos, all branches active). The fixture is
/// fixed so the check is deterministic; it exercises the full differentiable
/// surface: cross-attention, both graph streams, the trace branch with its
/// gradient reversal and stop-gradient, and all four loss terms.
pub fn composite_gradient_check() -> Result<crate::tensor::gradcheck::GradCheckReport> {
    use crate::data::{synthesize_split, Split, SynthesisSpec};

    let spec = SynthesisSpec {
        videos_train: 2,
        videos_val: 0,
        videos_test: 0,
        frames: 6,
        d_sem: 5,
        d_tex: 4,
        k_domains: 2,
        segment_count_weights: vec![0.3, 0.7],
        segment_len_range: (2, 4),
        signature_strength: 1.3,
        noise_level: 0.8,
        seed: 1003,
    };
    let videos = synthesize_split(&spec, Split::Train)?;
    let config = crate::model::ModelConfig {
        d_sem: 5,
        d_tex: 4,
        d_model: 8,
        t_max: 8,
        n_heads: 2,
        clfe_blocks: 1,
        transformer_layers: 1,
        sigma: 1.5,
        tau: 0.3,
        k_domains: 2,
        tda_enabled: true,
        grl_lambda: 1.0,
        conv_then_pool: true,
        ablate_gcn: false,
    };
    let model = DdnetModel::init(config, 1003)?;
    let weights = LossWeights::default();
    let report = crate::tensor::gradcheck::finite_diff_check(
        "composite loss, micro scale",
        &model,
        |m: &DdnetModel, tape: &mut Tape| {
            let bound = m.bind(tape)?;
            let batch: Vec<&FeatureSequence> = videos.iter().collect();
            let nodes = batch_loss(tape, &bound, &batch, &weights)
                .map_err(|e| TensorError::InvalidArg { op: "loss", detail: e.to_string() })?;
            Ok(nodes.total)
        },
        1e-5,
        1e-4,
    )?;
    Ok(report)
}

/// Pull per-parameter gradients off a tape after `backward`.
pub fn collect_grads(tape: &Tape) -> BTreeMap<String, Vec<f64>> {
    tape.param_nodes()
        .iter()
        .filter_map(|(name, node)| tape.grad(*node).map(|g| (name.clone(), g.to_vec())))
        .collect()
}

/// One epoch's aggregated numbers.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Global optimizer step count at the end of this epoch.
    pub step: u64,
    pub loss: LossValues,
    pub val: EvalReport,
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: DdnetModel,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochStats>,
}

/// Resumable pieces of a run, either fresh or restored from a checkpoint.
pub struct TrainState {
    pub model: DdnetModel,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub epochs_done: usize,
}

impl TrainState {
    /// Fresh state: model initialized from `model_seed`, shuffling stream
    /// from the training seed.
    pub fn fresh(model: DdnetModel, cfg: &TrainConfig) -> TrainState {
        TrainState {
            opt: AdamW::new(cfg),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            epochs_done: 0,
        }
    }
}

/// Run `epochs` epochs (on top of whatever `state` already completed),
/// validating after each one. `on_epoch` fires once per finished epoch.
pub fn train(
    mut state: TrainState,
    train_set: &[FeatureSequence],
    val_set: &[FeatureSequence],
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    eval_cfg.validate().map_err(TrainError::Eval)?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut history = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut state.rng);

        let mut sums = LossValues {
            frame: 0.0,
            video: 0.0,
            adversarial: 0.0,
            orthogonality: 0.0,
            total: 0.0,
        };
        let mut steps_in_epoch = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FeatureSequence> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut tape = Tape::new();
            let bound = state.model.bind(&mut tape)?;
            let nodes = batch_loss(&mut tape, &bound, &batch, &cfg.loss_weights)?;
            tape.backward(nodes.total)?;
            let values = LossValues::read(&tape, &nodes);
            let mut grads = collect_grads(&tape);
            state.opt.apply(&mut state.model, &mut grads)?;
            sums.frame += values.frame;
            sums.video += values.video;
            sums.adversarial += values.adversarial;
            sums.orthogonality += values.orthogonality;
            sums.total += values.total;
            steps_in_epoch += 1;
        }
        let n = steps_in_epoch as f64;
        let loss = LossValues {
            frame: sums.frame / n,
            video: sums.video / n,
            adversarial: sums.adversarial / n,
            orthogonality: sums.orthogonality / n,
            total: sums.total / n,
        };
        let val = evaluate(&state.model, val_set, eval_cfg)?;
        let stats = EpochStats { epoch, step: state.opt.steps(), loss, val };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome { model: state.model, opt: state.opt, rng: state.rng, history })
}
