//! Synthetic dataset generation and feature-sequence I/O.
//!
//! Videos are represented by precomputed per-frame feature sequences: a
//! semantic stream and a textural stream of different widths. The generator
//! plants forged segments whose frames carry two additive signatures on top of
//! a smooth background process:
//!
//! * a **domain signature** — a fixed random direction over a channel subset
//!   owned by that forgery domain (the subsets are disjoint across domains),
//! * a **generic fingerprint** — one dense direction shared by every domain.
//!
//! So domain identity and shared forgery evidence live in different subspaces
//! by construction, which is exactly the structure the trace-separation head
//! is supposed to discover, and frame labels mark signed frames exactly.

pub mod format;

use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{decode_features, encode_features, read_features, write_features};

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte 0: expected \"DDNF\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported feature-file version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated at byte {offset}: {needed} more bytes needed")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed feature file: {0}")]
    Malformed(String),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("manifest parse error: {0}")]
    ManifestParse(#[from] serde_json::Error),
}

/// One video's worth of precomputed features plus frame-level labels.
///
/// The video-level label is derived, never stored: a video is forged exactly
/// when at least one frame is.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    video_id: String,
    domain_id: u32,
    d_sem: usize,
    d_tex: usize,
    /// `frames × d_sem`, row-major.
    semantic: Vec<f32>,
    /// `frames × d_tex`, row-major.
    textural: Vec<f32>,
    frame_labels: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(
        video_id: impl Into<String>,
        d_sem: usize,
        d_tex: usize,
        semantic: Vec<f32>,
        textural: Vec<f32>,
        frame_labels: Vec<bool>,
        domain_id: u32,
    ) -> Result<Self> {
        let t = frame_labels.len();
        if t == 0 {
            return Err(DataError::Malformed("sequence has zero frames".into()));
        }
        if d_sem == 0 || d_tex == 0 {
            return Err(DataError::Malformed(format!(
                "zero-width feature stream (d_sem={d_sem}, d_tex={d_tex})"
            )));
        }
        if semantic.len() != t * d_sem {
            return Err(DataError::Malformed(format!(
                "semantic matrix has {} values, want {t}x{d_sem}",
                semantic.len()
            )));
        }
        if textural.len() != t * d_tex {
            return Err(DataError::Malformed(format!(
                "textural matrix has {} values, want {t}x{d_tex}",
                textural.len()
            )));
        }
        if let Some(bad) = semantic.iter().chain(&textural).find(|v| !v.is_finite()) {
            return Err(DataError::Malformed(format!("non-finite feature {bad}")));
        }
        Ok(Self {
            video_id: video_id.into(),
            domain_id,
            d_sem,
            d_tex,
            semantic,
            textural,
            frame_labels,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }
    pub fn domain_id(&self) -> u32 {
        self.domain_id
    }
    pub fn frames(&self) -> usize {
        self.frame_labels.len()
    }
    pub fn d_sem(&self) -> usize {
        self.d_sem
    }
    pub fn d_tex(&self) -> usize {
        self.d_tex
    }
    pub fn semantic(&self) -> &[f32] {
        &self.semantic
    }
    pub fn textural(&self) -> &[f32] {
        &self.textural
    }
    pub fn frame_labels(&self) -> &[bool] {
        &self.frame_labels
    }
    pub fn video_label(&self) -> bool {
        self.frame_labels.iter().any(|&b| b)
    }

    /// Semantic matrix widened to f64 for the compute graph.
    pub fn semantic_f64(&self) -> Vec<f64> {
        self.semantic.iter().map(|&v| f64::from(v)).collect()
    }
    /// Textural matrix widened to f64 for the compute graph.
    pub fn textural_f64(&self) -> Vec<f64> {
        self.textural.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Knobs for the synthetic generator. All fields have serde defaults so a
/// config file may override any subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSpec {
    pub videos_train: usize,
    pub videos_val: usize,
    pub videos_test: usize,
    pub frames: usize,
    pub d_sem: usize,
    pub d_tex: usize,
    pub k_domains: u32,
    /// Unnormalized weights over forged-segment counts 0, 1, 2, ...
    pub segment_count_weights: Vec<f64>,
    pub segment_len_range: (usize, usize),
    /// Amplitude of both planted signatures. Zero makes forged and authentic
    /// frames statistically identical (useful as a null control).
    pub signature_strength: f64,
    /// Standard deviation of white noise added to every feature value.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            videos_train: 400,
            videos_val: 100,
            videos_test: 100,
            frames: 64,
            d_sem: 24,
            d_tex: 16,
            k_domains: 4,
            segment_count_weights: vec![0.3, 0.45, 0.25],
            segment_len_range: (8, 20),
            signature_strength: 1.3,
            noise_level: 0.8,
            seed: 7,
        }
    }
}

impl SynthesisSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DataError::InvalidSpec(msg));
        if self.frames == 0 {
            return fail("frames must be >= 1".into());
        }
        if self.d_sem == 0 || self.d_tex == 0 {
            return fail("feature widths must be >= 1".into());
        }
        if self.k_domains == 0 {
            return fail("k_domains must be >= 1".into());
        }
        if self.k_domains as usize > self.d_sem || self.k_domains as usize > self.d_tex {
            return fail(format!(
                "k_domains = {} exceeds a stream width (d_sem={}, d_tex={}); every domain \
                 needs at least one channel of its own per stream",
                self.k_domains, self.d_sem, self.d_tex
            ));
        }
        let (lo, hi) = self.segment_len_range;
        if lo == 0 || lo > hi || hi > self.frames {
            return fail(format!(
                "segment_len_range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= frames ({})",
                self.frames
            ));
        }
        if self.segment_count_weights.is_empty()
            || self.segment_count_weights.iter().any(|&w| w < 0.0 || !w.is_finite())
            || self.segment_count_weights.iter().sum::<f64>() <= 0.0
        {
            return fail("segment_count_weights must be non-negative with positive sum".into());
        }
        if !self.signature_strength.is_finite() || self.signature_strength < 0.0 {
            return fail("signature_strength must be finite and >= 0".into());
        }
        if !self.noise_level.is_finite() || self.noise_level < 0.0 {
            return fail("noise_level must be finite and >= 0".into());
        }
        Ok(())
    }

    fn videos_in(&self, split: Split) -> usize {
        match split {
            Split::Train => self.videos_train,
            Split::Val => self.videos_val,
            Split::Test => self.videos_test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Index of one split's feature files, stored as `manifest.json` next to them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub k_domains: u32,
    pub d_sem: u32,
    pub d_tex: u32,
    pub t_max: u32,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Path relative to the directory holding the manifest.
    pub path: String,
    pub domain_id: u32,
    pub video_label: bool,
}

// Background process shape (not worth exposing as config): a mean-reverting
// random walk, low-pass filtered. The reversion keeps per-video channel means
// from wandering so far that they drown the planted signatures.
const WALK_DECAY: f64 = 0.75;
const WALK_STEP: f64 = 0.2;
const LOWPASS_ALPHA: f64 = 0.35;
const CHANNEL_OFFSET_SD: f64 = 0.1;
/// Minimum authentic frames between two forged segments, so distinct planted
/// segments can never be fused by prediction-side gap merging downstream.
const MIN_SEGMENT_GAP: usize = 3;
const PLACEMENT_TRIES: usize = 200;

/// Generate one split's sequences in memory, deterministically in `spec.seed`.
pub fn synthesize_split(spec: &SynthesisSpec, split: Split) -> Result<Vec<FeatureSequence>> {
    spec.validate()?;
    let signatures = DomainSignatures::derive(spec);
    let split_ix = Split::ALL.iter().position(|&s| s == split).expect("known split") as u64;
    (0..spec.videos_in(split))
        .map(|i| synthesize_video(spec, &signatures, split, split_ix, i))
        .collect()
}

/// Generate all three splits under `out_dir/{train,val,test}/`, each with a
/// `manifest.json`, and return the manifests in [`Split::ALL`] order.
pub fn synthesize_dataset(spec: &SynthesisSpec, out_dir: &Path) -> Result<Vec<DatasetManifest>> {
    spec.validate()?;
    let mut manifests = Vec::with_capacity(Split::ALL.len());
    for split in Split::ALL {
        let sequences = synthesize_split(spec, split)?;
        let dir = out_dir.join(split.tag());
        std::fs::create_dir_all(&dir).map_err(|e| format::io_err(&dir, e))?;
        let mut entries = Vec::with_capacity(sequences.len());
        for seq in &sequences {
            let file = format!("{}.ddnf", seq.video_id());
            write_features(seq, &dir.join(&file))?;
            entries.push(ManifestEntry {
                video_id: seq.video_id().to_string(),
                path: file,
                domain_id: seq.domain_id(),
                video_label: seq.video_label(),
            });
        }
        let manifest = DatasetManifest {
            split: split.tag().to_string(),
            seed: spec.seed,
            k_domains: spec.k_domains,
            d_sem: spec.d_sem as u32,
            d_tex: spec.d_tex as u32,
            t_max: spec.frames as u32,
            entries,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json).map_err(|e| format::io_err(&path, e))?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

/// Load a split: parse `manifest.json` and every feature file it references,
/// cross-checking ids, dimensions, and domain range against the manifest.
pub fn load_split(manifest_path: &Path) -> Result<(DatasetManifest, Vec<FeatureSequence>)> {
    let json = std::fs::read_to_string(manifest_path)
        .map_err(|e| format::io_err(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&json)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut sequences = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let seq = read_features(&base.join(&entry.path))?;
        let check = |ok: bool, what: &str, got: String, want: String| {
            if ok {
                Ok(())
            } else {
                Err(DataError::Manifest(format!(
                    "{}: {what} is {got}, manifest says {want}",
                    entry.path
                )))
            }
        };
        check(
            seq.video_id() == entry.video_id,
            "video id",
            seq.video_id().into(),
            entry.video_id.clone(),
        )?;
        check(
            seq.d_sem() == manifest.d_sem as usize && seq.d_tex() == manifest.d_tex as usize,
            "stream widths",
            format!("({}, {})", seq.d_sem(), seq.d_tex()),
            format!("({}, {})", manifest.d_sem, manifest.d_tex),
        )?;
        check(
            seq.frames() <= manifest.t_max as usize,
            "frame count",
            seq.frames().to_string(),
            format!("<= {}", manifest.t_max),
        )?;
        check(
            seq.domain_id() < manifest.k_domains,
            "domain id",
            seq.domain_id().to_string(),
            format!("< {}", manifest.k_domains),
        )?;
        check(
            seq.domain_id() == entry.domain_id && seq.video_label() == entry.video_label,
            "labels",
            format!("({}, {})", seq.domain_id(), seq.video_label()),
            format!("({}, {})", entry.domain_id, entry.video_label),
        )?;
        sequences.push(seq);
    }
    Ok((manifest, sequences))
}

/// Per-domain channel subsets and directions, plus the shared fingerprint.
/// Derived from the generator seed alone, so all splits share one signature
/// set.
struct DomainSignatures {
    /// Per domain: (channel indices, direction entries) for each stream.
    sem: Vec<(Vec<usize>, Vec<f64>)>,
    tex: Vec<(Vec<usize>, Vec<f64>)>,
    generic_sem: Vec<f64>,
    generic_tex: Vec<f64>,
}

impl DomainSignatures {
    fn derive(spec: &SynthesisSpec) -> Self {
        let mut rng = ChaCha8Rng::from_seed(mix_seed(spec.seed, &[0x5167]));
        let k = spec.k_domains as usize;
        Self {
            sem: disjoint_blocks(&mut rng, spec.d_sem, k),
            tex: disjoint_blocks(&mut rng, spec.d_tex, k),
            generic_sem: unit_direction(&mut rng, spec.d_sem),
            generic_tex: unit_direction(&mut rng, spec.d_tex),
        }
    }
}

/// Shuffle channel indices and deal them into `k` disjoint blocks, each with a
/// random sign direction of unit scale (entries ±1/√block_len).
fn disjoint_blocks(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let mut channels: Vec<usize> = (0..d).collect();
    // Fisher–Yates.
    for i in (1..channels.len()).rev() {
        let j = rng.random_range(0..=i);
        channels.swap(i, j);
    }
    let base = d / k;
    let extra = d % k;
    let mut blocks = Vec::with_capacity(k);
    let mut at = 0;
    for dom in 0..k {
        let len = base + usize::from(dom < extra);
        let chans: Vec<usize> = channels[at..at + len].to_vec();
        at += len;
        let scale = 1.0 / (len as f64).sqrt();
        let dir = (0..len)
            .map(|_| if rng.random::<bool>() { scale } else { -scale })
            .collect();
        blocks.push((chans, dir));
    }
    blocks
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    (0..d)
        .map(|_| if rng.random::<bool>() { scale } else { -scale })
        .collect()
}

fn synthesize_video(
    spec: &SynthesisSpec,
    signatures: &DomainSignatures,
    split: Split,
    split_ix: u64,
    index: usize,
) -> Result<FeatureSequence> {
    let mut rng = ChaCha8Rng::from_seed(mix_seed(spec.seed, &[1 + split_ix, index as u64]));
    let t = spec.frames;
    let domain = (index % spec.k_domains as usize) as u32;

    let count = sample_weighted(&mut rng, &spec.segment_count_weights);
    let segments = place_segments(&mut rng, t, count, spec.segment_len_range);
    let amps: Vec<f64> = segments
        .iter()
        .map(|_| spec.signature_strength * rng.random_range(0.85..1.15))
        .collect();

    let mut semantic = background(&mut rng, t, spec.d_sem, spec.noise_level);
    let mut textural = background(&mut rng, t, spec.d_tex, spec.noise_level);

    let mut frame_labels = vec![false; t];
    for (&(start, len), &amp) in segments.iter().zip(&amps) {
        let (chans, dir) = &signatures.sem[domain as usize];
        let (chans_t, dir_t) = &signatures.tex[domain as usize];
        for frame in start..start + len {
            frame_labels[frame] = true;
            for (&c, &v) in chans.iter().zip(dir) {
                semantic[frame * spec.d_sem + c] += amp * v;
            }
            for (c, &v) in signatures.generic_sem.iter().enumerate() {
                semantic[frame * spec.d_sem + c] += amp * v;
            }
            for (&c, &v) in chans_t.iter().zip(dir_t) {
                textural[frame * spec.d_tex + c] += amp * v;
            }
            for (c, &v) in signatures.generic_tex.iter().enumerate() {
                textural[frame * spec.d_tex + c] += amp * v;
            }
        }
    }

    FeatureSequence::new(
        format!("{}_{:04}", split.tag(), index),
        spec.d_sem,
        spec.d_tex,
        semantic.into_iter().map(|v| v as f32).collect(),
        textural.into_iter().map(|v| v as f32).collect(),
        frame_labels,
        domain,
    )
}

/// Smooth per-channel background: a mean-reverting random walk run through a
/// one-pole low-pass filter, plus white observation noise. Row-major t×d.
fn background(rng: &mut ChaCha8Rng, t: usize, d: usize, noise: f64) -> Vec<f64> {
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut out = vec![0.0; t * d];
    for c in 0..d {
        let offset = CHANNEL_OFFSET_SD * normal(rng);
        let mut walk = 0.0;
        let mut smooth = 0.0;
        for frame in 0..t {
            walk = WALK_DECAY * walk + WALK_STEP * normal(rng);
            smooth = if frame == 0 {
                walk
            } else {
                LOWPASS_ALPHA * walk + (1.0 - LOWPASS_ALPHA) * smooth
            };
            out[frame * d + c] = offset + smooth + noise * normal(rng);
        }
    }
    out
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        x -= w;
        if x < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Sample up to `count` non-overlapping (start, len) intervals, each separated
/// from the others by at least [`MIN_SEGMENT_GAP`] frames. Placement is
/// rejection-sampled; an interval that cannot be placed is dropped.
fn place_segments(
    rng: &mut ChaCha8Rng,
    t: usize,
    count: usize,
    (lo, hi): (usize, usize),
) -> Vec<(usize, usize)> {
    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.random_range(lo..=hi).min(t);
        for _try in 0..PLACEMENT_TRIES {
            let start = rng.random_range(0..=t - len);
            let fits = placed.iter().all(|&(s2, l2)| {
                let gap = if start >= s2 + l2 {
                    start - (s2 + l2)
                } else if s2 >= start + len {
                    s2 - (start + len)
                } else {
                    return false; // overlap
                };
                gap >= MIN_SEGMENT_GAP
            });
            if fits {
                placed.push((start, len));
                break;
            }
        }
    }
    placed.sort_unstable();
    placed
}

/// Stretch `seed` and a tag sequence into 32 key bytes via splitmix64.
fn mix_seed(seed: u64, tags: &[u64]) -> [u8; 32] {
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    let mut step = |extra: u64| -> u64 {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(extra);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    for &t in tags {
        step(t);
    }
    let mut out = [0u8; 32];
    for word in 0..4 {
        out[word * 8..(word + 1) * 8].copy_from_slice(&step(0).to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests;
