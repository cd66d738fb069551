use std::path::Path;

use proptest::prelude::*;

use super::*;

fn small_spec() -> SynthesisSpec {
    SynthesisSpec {
        videos_train: 12,
        videos_val: 6,
        videos_test: 6,
        frames: 32,
        d_sem: 8,
        d_tex: 6,
        k_domains: 3,
        ..SynthesisSpec::default()
    }
}

/// Maximal runs of forged frames, as (start, len).
fn label_runs(labels: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &b) in labels.iter().enumerate() {
        match (b, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - s));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, labels.len() - s));
    }
    runs
}

#[test]
fn generation_is_deterministic_in_memory() {
    let spec = small_spec();
    let a = synthesize_split(&spec, Split::Train).unwrap();
    let b = synthesize_split(&spec, Split::Train).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x, y);
        let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x.semantic()), bits(y.semantic()));
    }
}

#[test]
fn generation_is_deterministic_on_disk() {
    let spec = SynthesisSpec {
        videos_train: 4,
        videos_val: 2,
        videos_test: 2,
        ..small_spec()
    };
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synthesize_dataset(&spec, da.path()).unwrap();
    synthesize_dataset(&spec, db.path()).unwrap();
    for split in Split::ALL {
        let dir_a = da.path().join(split.tag());
        for entry in std::fs::read_dir(&dir_a).unwrap() {
            let name = entry.unwrap().file_name();
            let lhs = std::fs::read(dir_a.join(&name)).unwrap();
            let rhs = std::fs::read(db.path().join(split.tag()).join(&name)).unwrap();
            assert_eq!(lhs, rhs, "{name:?} differs between identical runs");
        }
    }
}

#[test]
fn splits_and_videos_differ_from_each_other() {
    let spec = small_spec();
    let train = synthesize_split(&spec, Split::Train).unwrap();
    let val = synthesize_split(&spec, Split::Val).unwrap();
    assert_ne!(train[0].semantic(), val[0].semantic());
    assert_ne!(train[0].semantic(), train[1].semantic());
}

#[test]
fn zero_weight_on_positive_counts_means_all_authentic() {
    let spec = SynthesisSpec {
        segment_count_weights: vec![1.0],
        ..small_spec()
    };
    for seq in synthesize_split(&spec, Split::Train).unwrap() {
        assert!(!seq.video_label());
        assert!(seq.frame_labels().iter().all(|&b| !b));
    }
}

#[test]
fn planted_segments_respect_length_count_and_gap_bounds() {
    let spec = SynthesisSpec::default();
    let max_count = spec.segment_count_weights.len() - 1;
    let (lo, hi) = spec.segment_len_range;
    for seq in synthesize_split(&spec, Split::Train).unwrap() {
        let runs = label_runs(seq.frame_labels());
        assert!(runs.len() <= max_count);
        for &(_, len) in &runs {
            assert!((lo..=hi).contains(&len), "run length {len} outside [{lo}, {hi}]");
        }
        for pair in runs.windows(2) {
            let gap = pair[1].0 - (pair[0].0 + pair[0].1);
            assert!(gap >= 3, "segments separated by only {gap} frames");
        }
    }
}

#[test]
fn domains_are_dealt_round_robin() {
    let spec = small_spec();
    let seqs = synthesize_split(&spec, Split::Train).unwrap();
    let mut counts = vec![0usize; spec.k_domains as usize];
    for (i, seq) in seqs.iter().enumerate() {
        assert_eq!(seq.domain_id() as usize, i % spec.k_domains as usize);
        counts[seq.domain_id() as usize] += 1;
    }
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 1, "domain counts unbalanced: {counts:?}");
}

#[test]
fn label_mix_is_roughly_as_weighted() {
    let spec = SynthesisSpec::default();
    let seqs = synthesize_split(&spec, Split::Train).unwrap();
    let forged = seqs.iter().filter(|s| s.video_label()).count() as f64;
    let frac = forged / seqs.len() as f64;
    // Weights put 70% of videos in the forged classes.
    assert!((0.6..=0.8).contains(&frac), "forged fraction {frac}");
}

#[test]
fn dataset_write_load_round_trip_matches_in_memory_generation() {
    let spec = small_spec();
    let dir = tempfile::tempdir().unwrap();
    let manifests = synthesize_dataset(&spec, dir.path()).unwrap();
    assert_eq!(manifests.len(), 3);
    for (manifest, split) in manifests.iter().zip(Split::ALL) {
        let expected = synthesize_split(&spec, split).unwrap();
        let (loaded_manifest, loaded) =
            load_split(&dir.path().join(split.tag()).join("manifest.json")).unwrap();
        assert_eq!(loaded_manifest.entries.len(), expected.len());
        assert_eq!(loaded_manifest.split, manifest.split);
        assert_eq!(loaded, expected);
    }
}

#[test]
fn load_split_rejects_a_corrupted_file() {
    let spec = SynthesisSpec {
        videos_train: 3,
        videos_val: 1,
        videos_test: 1,
        ..small_spec()
    };
    let dir = tempfile::tempdir().unwrap();
    synthesize_dataset(&spec, dir.path()).unwrap();
    let victim = dir.path().join("train/train_0001.ddnf");
    let mut bytes = std::fs::read(&victim).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x20;
    std::fs::write(&victim, bytes).unwrap();
    let err = load_split(&dir.path().join("train/manifest.json")).unwrap_err();
    assert!(matches!(err, DataError::ChecksumMismatch { .. }), "got {err:?}");
}

#[test]
fn load_split_rejects_a_swapped_file() {
    let spec = SynthesisSpec {
        videos_train: 3,
        videos_val: 1,
        videos_test: 1,
        ..small_spec()
    };
    let dir = tempfile::tempdir().unwrap();
    synthesize_dataset(&spec, dir.path()).unwrap();
    std::fs::copy(
        dir.path().join("train/train_0000.ddnf"),
        dir.path().join("train/train_0001.ddnf"),
    )
    .unwrap();
    let err = load_split(&dir.path().join("train/manifest.json")).unwrap_err();
    assert!(matches!(err, DataError::Manifest(_)), "got {err:?}");
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SynthesisSpec { frames: 0, ..SynthesisSpec::default() },
        SynthesisSpec { d_tex: 0, ..SynthesisSpec::default() },
        SynthesisSpec { k_domains: 0, ..SynthesisSpec::default() },
        SynthesisSpec { k_domains: 17, ..SynthesisSpec::default() }, // > d_tex
        SynthesisSpec { segment_len_range: (0, 5), ..SynthesisSpec::default() },
        SynthesisSpec { segment_len_range: (9, 5), ..SynthesisSpec::default() },
        SynthesisSpec { segment_len_range: (8, 99), ..SynthesisSpec::default() },
        SynthesisSpec { segment_count_weights: vec![], ..SynthesisSpec::default() },
        SynthesisSpec { segment_count_weights: vec![-1.0, 2.0], ..SynthesisSpec::default() },
        SynthesisSpec { segment_count_weights: vec![0.0, 0.0], ..SynthesisSpec::default() },
        SynthesisSpec { signature_strength: -0.5, ..SynthesisSpec::default() },
        SynthesisSpec { noise_level: f64::NAN, ..SynthesisSpec::default() },
    ];
    for spec in bad {
        assert!(
            matches!(spec.validate(), Err(DataError::InvalidSpec(_))),
            "accepted {spec:?}"
        );
    }
}

#[test]
fn sequence_constructor_rejects_inconsistent_shapes() {
    let err = FeatureSequence::new("x", 2, 2, vec![0.0; 3], vec![0.0; 4], vec![false; 2], 0);
    assert!(err.is_err());
    let err = FeatureSequence::new("x", 2, 2, vec![0.0; 4], vec![0.0; 4], vec![], 0);
    assert!(err.is_err());
    let err = FeatureSequence::new(
        "x",
        2,
        2,
        vec![0.0, f32::INFINITY, 0.0, 0.0],
        vec![0.0; 4],
        vec![false; 2],
        0,
    );
    assert!(err.is_err());
}

// ---------------------------------------------------------------------------
// Separability: a linear probe on mean-pooled raw features must already solve
// video-level real-vs-forged easily, otherwise downstream training checks
// would be testing an unlearnable task. With the signatures turned off the
// same probe must fall back to roughly the base rate.
// ---------------------------------------------------------------------------

fn mean_pooled(seq: &FeatureSequence) -> Vec<f64> {
    let (t, ds, dt) = (seq.frames(), seq.d_sem(), seq.d_tex());
    let mut out = vec![0.0; ds + dt];
    for frame in 0..t {
        for c in 0..ds {
            out[c] += f64::from(seq.semantic()[frame * ds + c]);
        }
        for c in 0..dt {
            out[ds + c] += f64::from(seq.textural()[frame * dt + c]);
        }
    }
    for v in &mut out {
        *v /= t as f64;
    }
    out
}

/// Full-batch gradient-descent logistic regression; returns val accuracy.
fn linear_probe_accuracy(
    train: &[(Vec<f64>, bool)],
    val: &[(Vec<f64>, bool)],
) -> f64 {
    let d = train[0].0.len();
    // Standardize with train statistics.
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for (x, _) in train {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for (x, _) in train {
        for ((s, v), m) in sd.iter_mut().zip(x).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    sd.iter_mut()
        .for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-6));
    let norm = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&sd)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let lr = 0.5;
    for _ in 0..400 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in train {
            let xn = norm(x);
            let z: f64 = xn.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - f64::from(u8::from(*y));
            for (g, v) in gw.iter_mut().zip(&xn) {
                *g += err * v;
            }
            gb += err;
        }
        let n = train.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * (g / n + 1e-4 * *wi);
        }
        b -= lr * gb / n;
    }

    let correct = val
        .iter()
        .filter(|(x, y)| {
            let xn = norm(x);
            let z: f64 = xn.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            (z > 0.0) == *y
        })
        .count();
    correct as f64 / val.len() as f64
}

fn probe_dataset(strength: f64) -> (Vec<(Vec<f64>, bool)>, Vec<(Vec<f64>, bool)>) {
    let spec = SynthesisSpec {
        videos_train: 240,
        videos_val: 120,
        videos_test: 0,
        signature_strength: strength,
        ..SynthesisSpec::default()
    };
    let pool = |split| {
        synthesize_split(&spec, split)
            .unwrap()
            .iter()
            .map(|s| (mean_pooled(s), s.video_label()))
            .collect::<Vec<_>>()
    };
    (pool(Split::Train), pool(Split::Val))
}

#[test]
fn linear_probe_separates_default_data_above_90_percent() {
    let (train, val) = probe_dataset(SynthesisSpec::default().signature_strength);
    let acc = linear_probe_accuracy(&train, &val);
    assert!(acc >= 0.90, "probe accuracy {acc} below 0.90");
}

#[test]
fn zero_strength_data_is_indistinguishable_to_the_probe() {
    let (train, val) = probe_dataset(0.0);
    let base = {
        let forged = val.iter().filter(|(_, y)| *y).count() as f64;
        let frac = forged / val.len() as f64;
        frac.max(1.0 - frac)
    };
    let acc = linear_probe_accuracy(&train, &val);
    assert!(
        acc <= base + 0.07,
        "probe accuracy {acc} suspiciously above base rate {base} with zero signal"
    );
}

// ---------------------------------------------------------------------------
// Format round-trip under fuzzed shapes and values.
// ---------------------------------------------------------------------------

fn sequence_strategy() -> impl Strategy<Value = FeatureSequence> {
    (1usize..12, 1usize..8, 1usize..8).prop_flat_map(|(t, ds, dt)| {
        (
            prop::collection::vec(-1.0e6f32..1.0e6f32, t * ds),
            prop::collection::vec(-1.0e6f32..1.0e6f32, t * dt),
            prop::collection::vec(any::<bool>(), t),
            0u32..8,
            "[a-z][a-z0-9_]{0,11}",
        )
            .prop_map(move |(sem, tex, labels, domain, id)| {
                FeatureSequence::new(id, ds, dt, sem, tex, labels, domain).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn encode_decode_round_trips_bitwise(seq in sequence_strategy()) {
        let bytes = encode_features(&seq);
        let back = decode_features(&bytes, seq.video_id()).unwrap();
        prop_assert_eq!(&back, &seq);
        let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(back.semantic()), bits(seq.semantic()));
        prop_assert_eq!(bits(back.textural()), bits(seq.textural()));
    }

    #[test]
    fn any_truncation_is_detected(seq in sequence_strategy(), frac in 0.0f64..1.0) {
        let bytes = encode_features(&seq);
        let keep = ((bytes.len() as f64) * frac) as usize;
        if keep < bytes.len() {
            prop_assert!(decode_features(&bytes[..keep], "x").is_err());
        }
    }
}

#[test]
fn write_features_fails_cleanly_on_bad_path() {
    let seq = synthesize_split(&small_spec(), Split::Val).unwrap().remove(0);
    let err = write_features(&seq, Path::new("/nonexistent/dir/x.ddnf")).unwrap_err();
    assert!(matches!(err, DataError::Io { .. }));
}
