use clipseg_core::matching::{GroundTruthClip, GtFrame, GtInstance};
use clipseg_core::tracker::volumetric_soft_iou;
use clipseg_harness::eval::{aggregate, average_precision, evaluate_sequence, EvalTrack};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 4;

fn block(x0: usize, y0: usize) -> Vec<f64> {
    let mut m = vec![0.0; SIDE * SIDE];
    for y in y0..y0 + 2 {
        for x in x0..x0 + 2 {
            m[y * SIDE + x] = 1.0;
        }
    }
    m
}

fn instance(identity: usize, class_id: usize, masks: Vec<Option<Vec<f64>>>) -> GtInstance {
    GtInstance {
        identity,
        class_id,
        frames: masks
            .into_iter()
            .map(|m| m.map(|mask| GtFrame { bbox: [0.5, 0.5, 0.5, 0.5], mask }))
            .collect(),
    }
}

fn clip(instances: Vec<GtInstance>) -> GroundTruthClip {
    GroundTruthClip {
        frames: instances.first().map_or(4, |i| i.frames.len()),
        height: SIDE,
        width: SIDE,
        instances,
    }
}

/// Two identities that stay in their corners for four frames.
fn two_corners() -> GroundTruthClip {
    clip(vec![
        instance(0, 1, vec![Some(block(0, 0)); 4]),
        instance(1, 2, vec![Some(block(2, 2)); 4]),
    ])
}

fn perfect(gt: &GroundTruthClip) -> Vec<EvalTrack> {
    gt.instances
        .iter()
        .map(|g| EvalTrack {
            identity: 10 + g.identity,
            label: g.class_id,
            score: 0.9,
            masks: g.frames.iter().map(|f| f.as_ref().map(|f| f.mask.clone())).collect(),
        })
        .collect()
}

#[test]
fn perfect_tracks() {
    let gt = two_corners();
    let m = evaluate_sequence("s", &perfect(&gt), &gt).unwrap();
    assert_eq!(m.ap, 1.0);
    assert_eq!(m.association, 1.0);
    assert_eq!(m.mean_iou, 1.0);
    assert_eq!(m.detail[1].track, Some(11));
}

#[test]
fn empty_predictions() {
    let gt = two_corners();
    assert_eq!(evaluate_sequence("s", &[], &gt).unwrap().ap, 0.0);
    let mut blank = perfect(&gt);
    for t in &mut blank {
        t.masks.iter_mut().for_each(|m| *m = Some(vec![0.0; SIDE * SIDE]));
    }
    let m = evaluate_sequence("s", &blank, &gt).unwrap();
    assert_eq!(m.ap, 0.0);
    assert_eq!(m.association, 0.0);
    assert_eq!(m.mean_iou, 0.0);
}

#[test]
fn swapped_identity_halves_association() {
    // identical labels so the swap is purely an identity error
    let gt = clip(vec![
        instance(0, 1, vec![Some(block(0, 0)); 4]),
        instance(1, 1, vec![Some(block(2, 2)); 4]),
    ]);
    let (a, b) = (block(0, 0), block(2, 2));
    let track = |identity, first: &Vec<f64>, second: &Vec<f64>| EvalTrack {
        identity,
        label: 1,
        score: 0.8,
        masks: vec![Some(first.clone()), Some(first.clone()), Some(second.clone()), Some(second.clone())],
    };
    let tracks = vec![track(0, &a, &b), track(1, &b, &a)];
    let m = evaluate_sequence("s", &tracks, &gt).unwrap();
    // each identity: frames 0-1 on its track, 2-3 on the other
    assert_eq!(m.association, 0.5);
    for d in &m.detail {
        assert_eq!((d.present_frames, d.correct_frames), (4, 2));
        // 8 shared pixels over 24 covered
        assert!((d.iou - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(m.ap, 0.0);
}

#[test]
fn unpaired_duplicates_do_not_cost_association() {
    let gt = two_corners();
    let mut tracks = perfect(&gt);
    let mut dup = tracks[0].clone();
    dup.identity = 99;
    dup.score = 0.01;
    tracks.push(dup);
    let m = evaluate_sequence("s", &tracks, &gt).unwrap();
    assert_eq!(m.association, 1.0);
    assert_eq!(m.ap, 1.0);
}

#[test]
fn absent_frames_and_ap_ranking() {
    let gt = clip(vec![
        instance(0, 0, vec![Some(block(0, 0)), None, Some(block(0, 0))]),
        instance(1, 0, vec![Some(block(2, 0)), Some(block(2, 0)), Some(block(2, 0))]),
    ]);
    let mut tracks = perfect(&gt);
    tracks[1].score = 0.5;
    // a confident false positive ranked first
    tracks.push(EvalTrack {
        identity: 50,
        label: 0,
        score: 0.95,
        masks: vec![Some(block(0, 2)); 3],
    });
    let m = evaluate_sequence("s", &tracks, &gt).unwrap();
    // ranks: FP, TP, TP → precision 1/2 at recall 1/2, 2/3 at recall 1
    assert!((m.ap - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(m.detail[0].present_frames, 2);
    assert_eq!(m.association, 1.0);
}

#[test]
fn identities_never_present_are_ignored() {
    let mut gt = two_corners();
    gt.instances.push(instance(7, 0, vec![None; 4]));
    let m = evaluate_sequence("s", &perfect(&gt), &gt).unwrap();
    assert_eq!(m.identities, 2);
    assert_eq!((m.ap, m.association, m.mean_iou), (1.0, 1.0, 1.0));
}

#[test]
fn wrong_label_is_not_a_detection() {
    let gt = two_corners();
    let mut tracks = perfect(&gt);
    tracks[0].label = 0;
    tracks[0].score = 0.5;
    let m = evaluate_sequence("s", &tracks, &gt).unwrap();
    assert_eq!(m.ap, 0.5);
    assert_eq!(m.association, 1.0);
}

#[test]
fn frame_count_mismatch_is_an_error() {
    let gt = two_corners();
    let mut tracks = perfect(&gt);
    tracks[0].masks.pop();
    assert!(evaluate_sequence("s", &tracks, &gt).is_err());
    let mut tracks = perfect(&gt);
    tracks[1].masks[0] = Some(vec![0.0; 3]);
    assert!(evaluate_sequence("s", &tracks, &gt).is_err());
}

#[test]
fn aggregate_pools_frames_and_averages_ap() {
    let gt = two_corners();
    let good = evaluate_sequence("a", &perfect(&gt), &gt).unwrap();
    let bad = evaluate_sequence("b", &[], &gt).unwrap();
    let m = aggregate(vec![good, bad]);
    assert_eq!(m.sequences, 2);
    assert_eq!(m.identities, 4);
    assert_eq!(m.ap, 0.5);
    assert_eq!(m.association, 0.5);
    assert_eq!(m.mean_iou, 0.5);
    let json: serde_json::Value = serde_json::to_value(&m).unwrap();
    for key in ["sequences", "identities", "mean_iou", "association", "ap", "per_sequence"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert!(json["per_sequence"][1]["detail"][0]["track"].is_null());
}

/// Random ground truth plus tracks that are noisy copies of it or clutter.
fn scenario(seed: u64) -> (GroundTruthClip, Vec<EvalTrack>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let frames = 3;
    let plane = SIDE * SIDE;
    let ng = r.random_range(1..=4);
    let instances = (0..ng)
        .map(|i| {
            let masks = (0..frames)
                .map(|_| {
                    r.random_bool(0.85).then(|| {
                        let mut m: Vec<f64> = (0..plane).map(|_| r.random_range(0..2) as f64).collect();
                        m[r.random_range(0..plane)] = 1.0;
                        m
                    })
                })
                .collect();
            instance(i, r.random_range(0..3), masks)
        })
        .collect();
    let gt = clip(instances);
    let tracks = (0..r.random_range(0..6))
        .map(|j| {
            let copy = r.random_range(0..ng + 1);
            let masks = (0..frames)
                .map(|t| {
                    let base = gt.instances.get(copy).and_then(|g| g.frames[t].as_ref());
                    Some(
                        (0..plane)
                            .map(|px| {
                                let v = base.map_or(r.random_range(0.0..1.0), |f| f.mask[px]);
                                (v + r.random_range(-0.3..0.3)).clamp(0.0, 1.0)
                            })
                            .collect(),
                    )
                })
                .collect();
            EvalTrack {
                identity: j,
                label: gt.instances.get(copy).map_or(r.random_range(0..3), |g| g.class_id),
                score: r.random_range(0.0..1.0),
                masks,
            }
        })
        .collect();
    (gt, tracks)
}

fn track_iou(t: &EvalTrack, g: &GtInstance) -> f64 {
    let zero = vec![0.0; SIDE * SIDE];
    let a: Vec<&[f64]> = t.masks.iter().map(|m| m.as_deref().unwrap_or(&zero)).collect();
    let b: Vec<&[f64]> = g.frames.iter().map(|f| f.as_ref().map_or(&zero[..], |f| &f.mask[..])).collect();
    volumetric_soft_iou(&a, &b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn adding_a_correct_track_never_lowers_ap(seed in any::<u64>(), pick in any::<prop::sample::Index>(), score in 0.0..1.0f64) {
        let (gt, mut tracks) = scenario(seed);
        let before = evaluate_sequence("s", &tracks, &gt).unwrap();
        // an exact copy of an identity no track detects, or any identity ranked last
        let real: Vec<usize> = (0..gt.instances.len())
            .filter(|&i| gt.instances[i].frames.iter().any(Option::is_some))
            .collect();
        prop_assume!(!real.is_empty());
        let missed: Vec<usize> = real
            .iter()
            .copied()
            .filter(|&i| tracks.iter().all(|t| t.label != gt.instances[i].class_id || track_iou(t, &gt.instances[i]) < 0.5))
            .collect();
        let (i, score) = if missed.is_empty() {
            (real[pick.index(real.len())], -1.0)
        } else {
            (missed[pick.index(missed.len())], score)
        };
        let g = &gt.instances[i];
        tracks.push(EvalTrack {
            identity: 100,
            label: g.class_id,
            score,
            masks: g.frames.iter().map(|f| Some(f.as_ref().map_or(vec![0.0; SIDE * SIDE], |f| f.mask.clone()))).collect(),
        });
        let after = evaluate_sequence("s", &tracks, &gt).unwrap();
        prop_assert!(after.ap >= before.ap - 1e-12, "{} -> {}", before.ap, after.ap);
    }

    #[test]
    fn corrupting_a_matched_track_never_raises_ap(seed in any::<u64>(), pick in any::<prop::sample::Index>(), keep in 0.0..0.49f64) {
        let (gt, mut tracks) = scenario(seed);
        prop_assume!(!tracks.is_empty());
        let before = evaluate_sequence("s", &tracks, &gt).unwrap();
        let j = pick.index(tracks.len());
        // scaling a mask by `keep` caps its soft IoU with any binary identity at `keep`
        for m in tracks[j].masks.iter_mut().flatten() {
            m.iter_mut().for_each(|v| *v *= keep);
        }
        let after = evaluate_sequence("s", &tracks, &gt).unwrap();
        prop_assert!(after.ap <= before.ap + 1e-12, "{} -> {}", before.ap, after.ap);
    }

    #[test]
    fn metrics_are_bounded(seed in any::<u64>()) {
        let (gt, tracks) = scenario(seed);
        let m = evaluate_sequence("s", &tracks, &gt).unwrap();
        for v in [m.ap, m.association, m.mean_iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn ap_of_a_perfect_ranking_is_one(n in 1usize..20, extra in 0usize..5) {
        let mut hits = vec![true; n];
        hits.extend(std::iter::repeat(false).take(extra));
        prop_assert_eq!(average_precision(&hits, n), 1.0);
    }
}

