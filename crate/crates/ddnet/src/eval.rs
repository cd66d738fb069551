//! Segment-level evaluation.
//!
//! Turns per-frame forgery probabilities into predicted segments, matches
//! them against ground-truth segments by temporal IoU, and scores the match
//! with average precision at several overlap thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureSequence;
use crate::model::{DdnetModel, ModelError};
use crate::tensor::{Tape, TensorError};

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Overlap thresholds the report carries; the mean is taken over all three.
pub const TIOU_THRESHOLDS: [f64; 3] = [0.5, 0.75, 0.95];

/// Post-processing knobs for turning frame probabilities into segments.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Frames with probability at or above this threshold are candidates.
    pub theta: f64,
    /// Adjacent candidate runs separated by at most this many frames merge.
    pub max_gap: usize,
    /// Merged segments shorter than this many frames are discarded.
    pub min_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { theta: 0.5, max_gap: 1, min_len: 2 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && 0.0 < self.theta && self.theta < 1.0) {
            return Err(EvalError::Config(format!(
                "theta must lie strictly inside (0, 1), got {}",
                self.theta
            )));
        }
        if self.min_len == 0 {
            return Err(EvalError::Config("min_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// A half-open frame interval `[start, end)` with a confidence score.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A predicted segment attributed to its video.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub video_id: String,
    pub segment: Segment,
}

/// Extract predicted segments from a per-frame probability curve: threshold,
/// merge runs across small gaps, drop short leftovers, and score each kept
/// segment by its mean probability over the merged span (gap frames count).
pub fn extract_segments(probs: &[f64], cfg: &EvalConfig) -> Vec<Segment> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &p) in probs.iter().enumerate() {
        match (p >= cfg.theta, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        runs.push((s, probs.len()));
    }

    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in runs {
        match merged.last_mut() {
            Some((_, le)) if s - *le <= cfg.max_gap => *le = e,
            _ => merged.push((s, e)),
        }
    }

    merged
        .into_iter()
        .filter(|(s, e)| e - s >= cfg.min_len)
        .map(|(s, e)| {
            let score = probs[s..e].iter().sum::<f64>() / (e - s) as f64;
            Segment { start: s, end: e, score }
        })
        .collect()
}

/// Ground-truth segments: maximal runs of forged frames, half-open.
pub fn label_segments(labels: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        out.push((s, labels.len()));
    }
    out
}

/// Temporal IoU of two half-open intervals.
pub fn tiou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    if inter == 0 {
        return 0.0;
    }
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter as f64 / union as f64
}

/// Average precision at one overlap threshold.
///
/// Predictions are visited in order of descending score (ties broken by
/// video id, then start frame, so results never depend on input order).
/// Each prediction greedily claims the not-yet-claimed ground-truth segment
/// in its own video with the highest overlap; it counts as a true positive
/// if that overlap reaches `threshold`. The summary is the all-point
/// interpolated area under the precision-recall curve. A corpus with no
/// ground-truth segments scores 1 when nothing was predicted, 0 otherwise.
pub fn average_precision(
    preds: &[Prediction],
    gt: &BTreeMap<String, Vec<(usize, usize)>>,
    threshold: f64,
) -> f64 {
    let n_gt: usize = gt.values().map(Vec::len).sum();
    if n_gt == 0 {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }

    let mut order: Vec<&Prediction> = preds.iter().collect();
    order.sort_by(|a, b| {
        b.segment
            .score
            .total_cmp(&a.segment.score)
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then_with(|| a.segment.start.cmp(&b.segment.start))
    });

    let mut claimed: BTreeMap<&str, Vec<bool>> =
        gt.iter().map(|(v, segs)| (v.as_str(), vec![false; segs.len()])).collect();

    let tp: Vec<bool> = order
        .iter()
        .map(|p| {
            let (Some(segs), Some(used)) =
                (gt.get(&p.video_id), claimed.get_mut(p.video_id.as_str()))
            else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (i, &g) in segs.iter().enumerate() {
                if used[i] {
                    continue;
                }
                let o = tiou((p.segment.start, p.segment.end), g);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((i, o));
                }
            }
            match best {
                Some((i, o)) if o >= threshold => {
                    used[i] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();

    // Precision envelope, then the all-point sum over recall increments.
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
    }
    let mut env = precision.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            ap += env[i] / n_gt as f64;
        }
    }
    ap
}

/// Evaluation summary; the post-processing parameters are echoed so a stored
/// report is self-describing.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub ap75: f64,
    pub ap95: f64,
    pub mean_ap: f64,
    pub videos: usize,
    pub predictions: usize,
    pub gt_segments: usize,
    pub theta: f64,
    pub max_gap: usize,
    pub min_len: usize,
}

/// Run inference over `videos` and score the extracted segments.
pub fn evaluate(
    model: &DdnetModel,
    videos: &[FeatureSequence],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut preds = Vec::new();
    let mut gt: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for video in videos {
        let probs = frame_probabilities(model, video)?;
        for segment in extract_segments(&probs, cfg) {
            preds.push(Prediction { video_id: video.video_id().to_string(), segment });
        }
        gt.insert(video.video_id().to_string(), label_segments(video.frame_labels()));
    }
    let gt_segments = gt.values().map(Vec::len).sum();
    let [ap50, ap75, ap95] = TIOU_THRESHOLDS.map(|t| average_precision(&preds, &gt, t));
    Ok(EvalReport {
        ap50,
        ap75,
        ap95,
        mean_ap: (ap50 + ap75 + ap95) / 3.0,
        videos: videos.len(),
        predictions: preds.len(),
        gt_segments,
        theta: cfg.theta,
        max_gap: cfg.max_gap,
        min_len: cfg.min_len,
    })
}

/// Per-frame forgery probabilities for one video.
pub fn frame_probabilities(model: &DdnetModel, video: &FeatureSequence) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let fwd = bound.forward(&mut tape, video, false)?;
    Ok(tape.value(fwd.frame_probs).to_vec())
}

#[cfg(test)]
mod tests {
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ModelConfig;

    fn cfg(theta: f64, max_gap: usize, min_len: usize) -> EvalConfig {
        EvalConfig { theta, max_gap, min_len }
    }

    fn seg(start: usize, end: usize, score: f64) -> Segment {
        Segment { start, end, score }
    }

    fn pred(video: &str, start: usize, end: usize, score: f64) -> Prediction {
        Prediction { video_id: video.into(), segment: seg(start, end, score) }
    }

    #[test]
    fn extraction_handles_thresholds_and_boundaries() {
        let c = cfg(0.5, 1, 2);
        assert!(extract_segments(&[0.1, 0.4, 0.49], &c).is_empty());
        // Threshold is inclusive and runs may touch either end.
        let probs = [0.5, 0.9, 0.1, 0.2, 0.8, 0.7];
        let got = extract_segments(&probs, &c);
        assert_eq!(got.len(), 2);
        assert_eq!((got[0].start, got[0].end), (0, 2));
        assert!((got[0].score - 0.7).abs() < 1e-12);
        assert_eq!((got[1].start, got[1].end), (4, 6));
        assert!((got[1].score - 0.75).abs() < 1e-12);
    }

    #[test]
    fn extraction_merges_single_frame_gaps_and_scores_the_whole_span() {
        let c = cfg(0.5, 1, 2);
        let probs = [0.9, 0.8, 0.2, 0.7, 0.6];
        let got = extract_segments(&probs, &c);
        assert_eq!(got.len(), 1);
        assert_eq!((got[0].start, got[0].end), (0, 5));
        let mean = (0.9 + 0.8 + 0.2 + 0.7 + 0.6) / 5.0;
        assert!((got[0].score - mean).abs() < 1e-12);
    }

    #[test]
    fn extraction_keeps_wider_gaps_apart() {
        let c = cfg(0.5, 1, 2);
        let probs = [0.9, 0.8, 0.2, 0.3, 0.7, 0.6];
        let got = extract_segments(&probs, &c);
        assert_eq!(got.len(), 2);
        assert_eq!((got[0].start, got[0].end), (0, 2));
        assert_eq!((got[1].start, got[1].end), (4, 6));
    }

    #[test]
    fn extraction_drops_short_segments_after_merging() {
        let c = cfg(0.5, 1, 2);
        // A lone frame far from others dies; two lone frames joined by a
        // merge survive as one 3-frame segment.
        let probs = [0.9, 0.0, 0.0, 0.0, 0.8, 0.1, 0.7];
        let got = extract_segments(&probs, &c);
        assert_eq!(got.len(), 1);
        assert_eq!((got[0].start, got[0].end), (4, 7));
    }

    #[test]
    fn label_segments_finds_maximal_runs() {
        assert!(label_segments(&[false; 4]).is_empty());
        assert_eq!(label_segments(&[true; 3]), vec![(0, 3)]);
        assert_eq!(
            label_segments(&[false, true, true, false, true]),
            vec![(1, 3), (4, 5)]
        );
    }

    #[test]
    fn tiou_reference_values() {
        assert_eq!(tiou((2, 6), (2, 6)), 1.0);
        assert!((tiou((0, 4), (2, 6)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(tiou((0, 3), (3, 6)), 0.0);
        assert_eq!(tiou((0, 8), (2, 4)), 0.25);
    }

    fn gt_map(entries: &[(&str, &[(usize, usize)])]) -> BTreeMap<String, Vec<(usize, usize)>> {
        entries.iter().map(|(v, s)| (v.to_string(), s.to_vec())).collect()
    }

    #[test]
    fn ap_single_perfect_prediction_is_one() {
        let gt = gt_map(&[("a", &[(2, 6)])]);
        let preds = [pred("a", 2, 6, 0.9)];
        assert_eq!(average_precision(&preds, &gt, 0.5), 1.0);
    }

    #[test]
    fn ap_penalizes_a_trailing_false_positive() {
        let gt = gt_map(&[("a", &[(0, 4), (10, 14)])]);
        let preds = [pred("a", 0, 4, 0.9), pred("a", 20, 24, 0.5)];
        // TP at precision 1, recall 1/2; the FP never raises recall.
        assert_eq!(average_precision(&preds, &gt, 0.5), 0.5);
    }

    #[test]
    fn ap_recovers_after_a_leading_false_positive() {
        let gt = gt_map(&[("a", &[(0, 4)])]);
        let preds = [pred("a", 20, 24, 0.9), pred("a", 0, 4, 0.8)];
        // The TP arrives second: precision there is 1/2, and the envelope
        // carries that value onto the single recall step.
        assert_eq!(average_precision(&preds, &gt, 0.5), 0.5);
    }

    #[test]
    fn ap_each_ground_truth_matches_at_most_once() {
        let gt = gt_map(&[("a", &[(0, 10)])]);
        let preds = [pred("a", 0, 10, 0.9), pred("a", 0, 9, 0.8)];
        let ap = average_precision(&preds, &gt, 0.5);
        assert_eq!(ap, 1.0); // the lone GT is found first; the echo is an FP
        let gt2 = gt_map(&[("a", &[(0, 10), (20, 30)])]);
        // Same predictions against two GTs: one found at precision 1, one
        // missed, so only half the recall range is covered.
        let ap2 = average_precision(&preds, &gt2, 0.5);
        assert_eq!(ap2, 0.5);
    }

    #[test]
    fn ap_respects_video_boundaries() {
        let gt = gt_map(&[("a", &[(0, 4)]), ("b", &[])]);
        let preds = [pred("b", 0, 4, 0.9)];
        assert_eq!(average_precision(&preds, &gt, 0.5), 0.0);
    }

    #[test]
    fn ap_empty_ground_truth_conventions() {
        let gt = gt_map(&[("a", &[])]);
        assert_eq!(average_precision(&[], &gt, 0.5), 1.0);
        assert_eq!(average_precision(&[pred("a", 0, 4, 0.9)], &gt, 0.5), 0.0);
    }

    #[test]
    fn ap_greedy_matching_prefers_the_highest_overlap() {
        // The prediction overlaps two ground-truth segments; it must claim
        // the better one, leaving the weaker for the later prediction.
        let gt = gt_map(&[("a", &[(0, 10), (8, 20)])]);
        let preds = [pred("a", 6, 20, 0.9), pred("a", 0, 10, 0.8)];
        // First: tIoU with (8,20) is 12/14 vs (0,10) 4/20 -> claims (8,20).
        // Second: exact match on (0,10). Both TPs.
        assert_eq!(average_precision(&preds, &gt, 0.5), 1.0);
    }

    #[test]
    fn ap_is_independent_of_input_order_under_score_ties() {
        let gt = gt_map(&[("a", &[(0, 4)]), ("b", &[(0, 4)])]);
        let p1 = [pred("b", 0, 4, 0.7), pred("a", 20, 24, 0.7)];
        let p2 = [pred("a", 20, 24, 0.7), pred("b", 0, 4, 0.7)];
        let (a1, a2) = (
            average_precision(&p1, &gt, 0.5),
            average_precision(&p2, &gt, 0.5),
        );
        assert_eq!(a1, a2);
        // Tie broken toward video "a" (an FP), so the TP lands second.
        assert_eq!(a1, 0.25);
    }

    #[test]
    fn mean_ap_spans_the_threshold_ladder() {
        // Overlap of 0.6 passes only the loosest threshold.
        let gt = gt_map(&[("a", &[(0, 10)])]);
        let preds = [pred("a", 4, 10, 0.9)];
        let aps: Vec<f64> =
            TIOU_THRESHOLDS.iter().map(|&t| average_precision(&preds, &gt, t)).collect();
        assert_eq!(aps, vec![1.0, 0.0, 0.0]);
    }

    /// Second opinion: the same metric definition written as naive
    /// quadratic scans, summed in the same element order.
    fn oracle_ap(
        preds: &[Prediction],
        gt: &BTreeMap<String, Vec<(usize, usize)>>,
        threshold: f64,
    ) -> f64 {
        let n_gt: usize = gt.values().map(Vec::len).sum();
        if n_gt == 0 {
            return if preds.is_empty() { 1.0 } else { 0.0 };
        }
        let mut order: Vec<&Prediction> = preds.iter().collect();
        order.sort_by(|a, b| {
            b.segment
                .score
                .total_cmp(&a.segment.score)
                .then_with(|| a.video_id.cmp(&b.video_id))
                .then_with(|| a.segment.start.cmp(&b.segment.start))
        });
        let mut used: Vec<(String, usize)> = Vec::new();
        let mut tp = vec![false; order.len()];
        for (i, p) in order.iter().enumerate() {
            let segs = match gt.get(&p.video_id) {
                Some(s) => s,
                None => continue,
            };
            let mut best_ix = None;
            let mut best = -1.0;
            for (j, &g) in segs.iter().enumerate() {
                if used.contains(&(p.video_id.clone(), j)) {
                    continue;
                }
                let o = tiou((p.segment.start, p.segment.end), g);
                if o > best {
                    best = o;
                    best_ix = Some(j);
                }
            }
            if let Some(j) = best_ix {
                if best >= threshold {
                    tp[i] = true;
                    used.push((p.video_id.clone(), j));
                }
            }
        }
        let mut ap = 0.0;
        for k in 0..order.len() {
            if !tp[k] {
                continue;
            }
            // Best precision at any cut at or after k, recomputed from
            // scratch each time.
            let mut best_prec = 0.0f64;
            for j in k..order.len() {
                let hits = tp[..=j].iter().filter(|&&t| t).count();
                best_prec = best_prec.max(hits as f64 / (j + 1) as f64);
            }
            ap += best_prec / n_gt as f64;
        }
        ap
    }

    #[test]
    fn ap_agrees_with_the_quadratic_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2026);
        let videos = ["a", "b", "c"];
        for case in 0..200 {
            let mut gt: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
            for v in videos {
                let n = rng.random_range(0..3usize);
                let mut segs = Vec::new();
                let mut at = 0usize;
                for _ in 0..n {
                    let start = at + rng.random_range(0..4usize);
                    let len = rng.random_range(1..6usize);
                    segs.push((start, start + len));
                    at = start + len + 1;
                }
                gt.insert(v.to_string(), segs);
            }
            let mut preds = Vec::new();
            for _ in 0..rng.random_range(0..6usize) {
                let v = videos[rng.random_range(0..3usize)];
                let start = rng.random_range(0..18usize);
                let len = rng.random_range(1..6usize);
                // Coarse scores force frequent ties.
                let score = (rng.random_range(1..6u32) as f64) / 5.0;
                preds.push(pred(v, start, start + len, score));
            }
            for thr in [0.3, 0.5, 0.75] {
                let got = average_precision(&preds, &gt, thr);
                let want = oracle_ap(&preds, &gt, thr);
                assert_eq!(got, want, "case {case} thr {thr}");
            }
        }
    }

    #[test]
    fn evaluate_reports_consistent_counts() {
        let cfg_model = ModelConfig {
            d_sem: 5,
            d_tex: 4,
            d_model: 8,
            t_max: 12,
            n_heads: 2,
            clfe_blocks: 1,
            transformer_layers: 1,
            k_domains: 2,
            ..ModelConfig::default()
        };
        let model = DdnetModel::init(cfg_model, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut videos = Vec::new();
        for i in 0..3 {
            let t = 10 + i;
            let sem: Vec<f32> = (0..t * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tex: Vec<f32> = (0..t * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut labels = vec![false; t];
            if i > 0 {
                for l in labels.iter_mut().take(7).skip(3) {
                    *l = true;
                }
            }
            videos.push(
                FeatureSequence::new(format!("v{i}"), 5, 4, sem, tex, labels, (i % 2) as u32)
                    .unwrap(),
            );
        }
        let report = evaluate(&model, &videos, &EvalConfig::default()).unwrap();
        assert_eq!(report.videos, 3);
        assert_eq!(report.gt_segments, 2);
        for ap in [report.ap50, report.ap75, report.ap95, report.mean_ap] {
            assert!((0.0..=1.0).contains(&ap));
        }
        let mean = (report.ap50 + report.ap75 + report.ap95) / 3.0;
        assert!((report.mean_ap - mean).abs() < 1e-12);
        assert_eq!(report.theta, 0.5);
        // Probability curves have one entry per frame.
        let probs = frame_probabilities(&model, &videos[0]).unwrap();
        assert_eq!(probs.len(), 10);
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(cfg(0.0, 1, 2).validate().is_err());
        assert!(cfg(1.0, 1, 2).validate().is_err());
        assert!(cfg(f64::NAN, 1, 2).validate().is_err());
        assert!(cfg(0.5, 0, 0).validate().is_err());
        cfg(0.5, 0, 1).validate().unwrap();
    }
}
