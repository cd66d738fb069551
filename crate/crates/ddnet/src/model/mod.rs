//! The dual-stream graph model for frame-level forgery localization.
//!
//! A forward pass runs three stages:
//!
//! 1. **Cross-level embedding** ([`clfe`]): the semantic and textural feature
//!    streams are projected to one width and fused by stacked bidirectional
//!    cross-attention, with learnable position embeddings.
//! 2. **Dual-stream graph learning** ([`dsgl`]): a temporal transformer feeds
//!    two graph-convolution streams — a fixed Gaussian temporal-distance graph
//!    and a dynamic thresholded similarity graph — fused into the final
//!    representation behind the frame and video heads.
//! 3. **Trace separation** ([`tda`], training only): the final representation
//!    is disentangled into a generic forgery feature and a domain-bearing
//!    residual, driving orthogonality and adversarial domain penalties.
//!
//! Parameters live in plain [`Tensor`]s owned by [`DdnetModel`]. Each batch
//! binds them onto a fresh [`Tape`] under stable dotted names
//! ([`DdnetModel::bind`]), runs any number of videos through
//! [`BoundModel::forward`], and reads gradients back per name after
//! `backward`. The same names address parameters in checkpoints, the
//! optimizer, and the finite-difference harness.

mod clfe;
mod dsgl;
mod nn;
mod tda;

pub use dsgl::{build_distance_graph, build_semantic_graph, gcn_layer, DistanceCache};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureSequence;
use crate::tensor::gradcheck::ParamVisit;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

use clfe::ClfeParams;
use dsgl::DsglParams;
use tda::TdaParams;

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Lets model calls be used inside the gradient-check harness, which speaks
/// the tensor crate's error type.
impl From<ModelError> for TensorError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t,
            ModelError::Config(c) => TensorError::InvalidArg { op: "model", detail: c },
        }
    }
}

/// Architecture and hyperparameter knobs. All fields have serde defaults so a
/// config file may override any subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input width of the semantic stream.
    pub d_sem: usize,
    /// Input width of the textural stream.
    pub d_tex: usize,
    /// Unified model width D.
    pub d_model: usize,
    /// Longest supported sequence (sizes the position embeddings).
    pub t_max: usize,
    pub n_heads: usize,
    /// Bidirectional cross-attention blocks in the embedding stage.
    pub clfe_blocks: usize,
    /// Temporal transformer depth.
    pub transformer_layers: usize,
    /// Gaussian bandwidth (frames) of the temporal-distance graph.
    pub sigma: f64,
    /// Similarity threshold of the dynamic graph, in (−1, 1).
    pub tau: f64,
    /// Number of forgery domains K (experts in the adversarial head).
    pub k_domains: usize,
    /// Build and train the trace-separation branch.
    pub tda_enabled: bool,
    /// Gradient reversal coefficient λ.
    pub grl_lambda: f64,
    /// Multi-scale encoder order: convolve frames then pool (default), or
    /// pool to a prototype first.
    pub conv_then_pool: bool,
    /// Drop both graph streams (temporal transformer only) for ablations.
    pub ablate_gcn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_sem: 24,
            d_tex: 16,
            d_model: 32,
            t_max: 64,
            n_heads: 4,
            clfe_blocks: 2,
            transformer_layers: 2,
            sigma: 2.0,
            tau: 0.7,
            k_domains: 4,
            tda_enabled: true,
            grl_lambda: 1.0,
            conv_then_pool: true,
            ablate_gcn: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.d_sem == 0 || self.d_tex == 0 || self.d_model == 0 || self.t_max == 0 {
            return fail("dimensions must all be >= 1".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            ));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return fail(format!("sigma must be positive and finite, got {}", self.sigma));
        }
        if !(self.tau > -1.0 && self.tau < 1.0) {
            return fail(format!("tau must lie in (-1, 1), got {}", self.tau));
        }
        if self.k_domains == 0 || (self.tda_enabled && self.k_domains < 2) {
            return fail(format!(
                "k_domains must be >= 2 when the adversarial branch is enabled, got {}",
                self.k_domains
            ));
        }
        if !(self.grl_lambda >= 0.0) || !self.grl_lambda.is_finite() {
            return fail(format!(
                "grl_lambda must be finite and >= 0, got {}",
                self.grl_lambda
            ));
        }
        Ok(())
    }
}

/// All model parameters. Construction draws every parameter, including the
/// trace-separation branch, in one fixed order, so two models built from the
/// same seed are identical regardless of which branches a run later uses.
#[derive(Debug, Clone)]
pub struct DdnetModel {
    pub config: ModelConfig,
    clfe: ClfeParams,
    dsgl: DsglParams,
    tda: TdaParams,
}

impl DdnetModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(DdnetModel {
            clfe: ClfeParams::init(&mut rng, &config),
            dsgl: DsglParams::init(&mut rng, &config),
            tda: TdaParams::init(&mut rng, &config),
            config,
        })
    }

    /// Register every parameter on `tape` and return the handles a forward
    /// pass needs. One bind serves any number of videos on that tape, which
    /// is how a mini-batch accumulates gradients into shared leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel<'_>> {
        Ok(BoundModel {
            config: &self.config,
            clfe: self.clfe.bind(tape, "clfe")?,
            dsgl: self.dsgl.bind(tape, "dsgl")?,
            tda: self.tda.bind(tape, "tda")?,
            dist: DistanceCache::new(),
        })
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.param_elements()
    }
}

impl ParamVisit for DdnetModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.clfe.visit("clfe", f);
        self.dsgl.visit("dsgl", f);
        self.tda.visit("tda", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.clfe.visit_mut("clfe", f);
        self.dsgl.visit_mut("dsgl", f);
        self.tda.visit_mut("tda", f);
    }
}

/// A model whose parameters are registered on a specific tape.
pub struct BoundModel<'m> {
    config: &'m ModelConfig,
    clfe: clfe::BoundClfe,
    dsgl: dsgl::BoundDsgl,
    tda: tda::BoundTda,
    dist: DistanceCache,
}

/// Node handles produced by one video's forward pass.
pub struct Forward {
    /// Cross-level fused embedding `T×D` (transformer input).
    pub fused: NodeId,
    /// Transformer output `T×D`, the shared graph-stream input.
    pub encoded: NodeId,
    /// Final fused representation `T×D`.
    pub f_final: NodeId,
    /// `T×1` pre-sigmoid frame scores.
    pub frame_logits: NodeId,
    /// `T×1` frame manipulation probabilities.
    pub frame_probs: NodeId,
    /// `1×1` video-level logit and probability.
    pub video_logit: NodeId,
    pub video_prob: NodeId,
    /// Similarity adjacency used this pass (absent under graph ablation).
    pub a_sim: Option<NodeId>,
    /// Trace-separation outputs; present only when requested and enabled.
    pub tda: Option<TdaOutputs>,
}

/// Training-time trace-separation handles.
pub struct TdaOutputs {
    /// Generic forgery feature `1×D`.
    pub f_f: NodeId,
    /// Domain-bearing residual feature `1×D`.
    pub f_s: NodeId,
    /// Expert mixture weights `1×K` (simplex row).
    pub omega: NodeId,
    /// Aggregated adversarial domain logits `1×K`.
    pub o_adv: NodeId,
    /// `1×1` orthogonality penalty |cos(F_f, F_s)| for this video.
    pub abs_cos: NodeId,
}

impl BoundModel<'_> {
    /// Run one video. `with_tda` additionally runs the trace-separation
    /// branch (if enabled in config); inference always passes `false` and is
    /// bit-identical either way.
    pub fn forward(
        &self,
        tape: &mut Tape,
        video: &FeatureSequence,
        with_tda: bool,
    ) -> Result<Forward> {
        let cfg = self.config;
        if video.d_sem() != cfg.d_sem || video.d_tex() != cfg.d_tex {
            return Err(ModelError::Config(format!(
                "video {} has stream widths ({}, {}), model expects ({}, {})",
                video.video_id(),
                video.d_sem(),
                video.d_tex(),
                cfg.d_sem,
                cfg.d_tex
            )));
        }
        if video.frames() > cfg.t_max {
            return Err(ModelError::Config(format!(
                "video {} has {} frames, position embeddings cover {}",
                video.video_id(),
                video.frames(),
                cfg.t_max
            )));
        }
        let t = video.frames();
        let x_sem = tape.constant(&[t, cfg.d_sem], video.semantic_f64())?;
        let x_tex = tape.constant(&[t, cfg.d_tex], video.textural_f64())?;
        self.forward_raw(tape, x_sem, x_tex, with_tda)
    }

    /// Forward from already-placed input nodes (used by tests that craft
    /// inputs directly on the tape).
    pub fn forward_raw(
        &self,
        tape: &mut Tape,
        x_sem: NodeId,
        x_tex: NodeId,
        with_tda: bool,
    ) -> Result<Forward> {
        let cfg = self.config;
        let fused = self.clfe.forward(tape, x_sem, x_tex)?;
        let out = self.dsgl.forward(tape, fused, cfg, &self.dist)?;
        let tda = if with_tda && cfg.tda_enabled {
            let t = self.tda.forward(tape, out.f_final, cfg)?;
            Some(TdaOutputs {
                f_f: t.f_f,
                f_s: t.f_s,
                omega: t.omega,
                o_adv: t.o_adv,
                abs_cos: t.abs_cos,
            })
        } else {
            None
        };
        Ok(Forward {
            fused,
            encoded: out.encoded,
            f_final: out.f_final,
            frame_logits: out.frame_logits,
            frame_probs: out.frame_probs,
            video_logit: out.video_logit,
            video_prob: out.video_prob,
            a_sim: out.a_sim,
            tda,
        })
    }
}
