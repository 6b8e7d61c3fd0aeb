use clipseg_core::tracker::{
    select_trajectories, stitch_cost, stitch_sequence, volumetric_soft_iou, ClipInstance, ClipResult, FrameRecord,
    StitchWeights, Track, TrackStore,
};
use clipseg_tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn iou(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let a: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
    let b: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
    volumetric_soft_iou(&a, &b).unwrap()
}

#[test]
fn soft_iou_examples() {
    let m = vec![vec![0.2, 0.9, 0.0, 1.0], vec![0.5, 0.5, 0.5, 0.5]];
    assert_eq!(iou(&m, &m), 1.0);
    let a = vec![vec![1.0, 0.0, 1.0, 0.0]];
    let b = vec![vec![0.0, 1.0, 0.0, 1.0]];
    assert_eq!(iou(&a, &b), 0.0);
    assert_eq!(iou(&[vec![0.5; 9]], &[vec![1.0; 9]]), 0.5);
    assert_eq!(iou(&[vec![0.0; 4]], &[vec![0.0; 4]]), 0.0);
    assert!(volumetric_soft_iou(&[&[0.0, 1.0]], &[&[1.0]]).is_err());
    assert!(volumetric_soft_iou(&[&[0.0]], &[]).is_err());
}

fn record(mask: Vec<f64>, probs: Vec<f64>, score: f64) -> FrameRecord {
    FrameRecord {
        mask,
        class_probs: probs,
        score,
        bbox: [0.5; 4],
    }
}

fn instance(local_id: usize, label: usize, masks: Vec<Vec<f64>>, score: f64) -> ClipInstance {
    ClipInstance {
        local_id,
        label,
        frames: masks.into_iter().map(|m| record(m, vec![], score)).collect(),
    }
}

fn track(label: usize, start: usize, masks: Vec<Vec<f64>>, score: f64) -> Track {
    Track {
        identity: 0,
        label,
        records: masks.into_iter().enumerate().map(|(i, m)| (start + i, record(m, vec![], score))).collect(),
        active: true,
    }
}

#[test]
fn stitch_cost_examples() {
    let w = StitchWeights::default();
    let m = vec![vec![1.0, 0.0, 1.0, 1.0]; 2];
    let t = track(1, 0, m.clone(), 0.8);
    let i = instance(0, 1, m.clone(), 0.8);
    assert_eq!(stitch_cost(&t, &i, 0, 0..2, &w).unwrap(), -2.0);

    let t = track(0, 0, vec![vec![1.0, 0.0]], 0.9);
    let i = instance(0, 2, vec![vec![0.0, 1.0]], 0.7);
    assert!((stitch_cost(&t, &i, 0, 0..1, &w).unwrap() - 0.2).abs() < 1e-15);

    let mask_only = StitchWeights {
        class: 0.0,
        score: 0.0,
        ..w
    };
    let t = track(0, 0, vec![vec![0.5; 4]], 0.1);
    let i = instance(0, 0, vec![vec![1.0; 4]], 0.9);
    assert_eq!(stitch_cost(&t, &i, 0, 0..1, &mask_only).unwrap(), -0.5);

    assert!(stitch_cost(&t, &i, 0, 0..0, &w).is_err());
}

/// Clip of `frames` frames starting at `start`, one instance per mask track.
fn clip(start: usize, frames: usize, tracks: &[(usize, Vec<Vec<f64>>, f64)]) -> ClipResult {
    ClipResult {
        start,
        frames,
        height: 1,
        width: tracks.first().map_or(1, |t| t.1[0].len()),
        instances: tracks
            .iter()
            .enumerate()
            .map(|(i, (label, masks, score))| instance(i, *label, masks[start..start + frames].to_vec(), *score))
            .collect(),
    }
}

#[test]
fn first_clip_opens_every_instance() {
    let masks = vec![vec![1.0, 0.0]; 6];
    let other = vec![vec![0.0, 1.0]; 6];
    let mut store = TrackStore::new();
    let out = store
        .stitch(&clip(0, 6, &[(0, masks, 0.9), (1, other, 0.8)]), &StitchWeights::default())
        .unwrap();
    assert_eq!(out.opened, vec![0, 1]);
    assert_eq!(store.num_identities(), 2);
    assert_eq!(store.frontier(), Some(5));
}

#[test]
fn single_instance_keeps_one_identity() {
    let masks = vec![vec![0.0, 1.0, 1.0, 0.0]; 14];
    let clips: Vec<_> = [0, 4, 8].iter().map(|&s| clip(s, 6, &[(2, masks.clone(), 0.9)])).collect();
    let store = stitch_sequence(&clips, &StitchWeights::default()).unwrap();
    assert_eq!(store.num_identities(), 1);
    let t = &store.tracks[0];
    assert_eq!(t.records.keys().copied().collect::<Vec<_>>(), (0..14).collect::<Vec<_>>());
}

#[test]
fn crossing_instances_keep_identities_by_mask() {
    // two objects of the same class sweep past each other on a 1x8 strip
    let pos_a = [0, 1, 2, 3, 4, 5, 6, 7, 7, 7];
    let pos_b = [7, 6, 5, 4, 3, 2, 1, 0, 0, 0];
    let strip = |p: usize| (0..8).map(|x| if x == p { 1.0 } else { 0.0 }).collect::<Vec<_>>();
    let a: Vec<_> = pos_a.iter().map(|&p| strip(p)).collect();
    let b: Vec<_> = pos_b.iter().map(|&p| strip(p)).collect();
    let first = clip(0, 6, &[(0, a.clone(), 0.9), (0, b.clone(), 0.9)]);
    // the second clip lists the instances in the opposite order
    let second = clip(4, 6, &[(0, b, 0.9), (0, a, 0.9)]);
    let store = stitch_sequence(&[first, second], &StitchWeights::default()).unwrap();
    assert_eq!(store.num_identities(), 2);
    for t in &store.tracks {
        let want = if t.identity == 0 { &pos_a } else { &pos_b };
        for (f, r) in &t.records {
            assert_eq!(r.mask[want[*f]], 1.0, "identity {} frame {f}", t.identity);
        }
    }
}

#[test]
fn non_overlapping_clip_is_rejected() {
    let m = vec![vec![1.0]; 12];
    let mut store = TrackStore::new();
    let w = StitchWeights::default();
    store.stitch(&clip(0, 6, &[(0, m.clone(), 0.5)]), &w).unwrap();
    assert!(store.stitch(&clip(6, 6, &[(0, m.clone(), 0.5)]), &w).is_err());
    assert!(store.stitch(&clip(0, 6, &[(0, m, 0.5)]), &w).is_err());
}

#[test]
fn cost_gate_opens_new_identities() {
    let a = vec![vec![1.0, 0.0]; 10];
    let b = vec![vec![0.0, 1.0]; 10];
    let w = StitchWeights {
        max_cost: Some(-1.5),
        ..Default::default()
    };
    let mut store = TrackStore::new();
    store.stitch(&clip(0, 6, &[(0, a, 0.9)]), &w).unwrap();
    let out = store.stitch(&clip(4, 6, &[(1, b, 0.2)]), &w).unwrap();
    assert!(out.matched.is_empty());
    assert_eq!(out.opened, vec![1]);
    assert!(!store.tracks[0].active);
}

#[test]
fn selection_examples() {
    let probs = Tensor::from_rows(&[vec![0.8, 0.1], vec![0.8, 0.1]]).unwrap();
    let s = select_trajectories(&probs, 1, 1).unwrap();
    assert_eq!((s[0].slot, s[0].class), (0, 0));
    assert!((s[0].score - 0.8).abs() < 1e-15);

    // 3 slots over 2 frames, hand-computed means
    let probs = Tensor::from_rows(&[
        vec![0.9, 0.1],
        vec![0.2, 0.6],
        vec![0.4, 0.4],
        vec![0.7, 0.1],
        vec![0.2, 0.8],
        vec![0.1, 0.3],
    ])
    .unwrap();
    let s = select_trajectories(&probs, 6, 3).unwrap();
    let got: Vec<(usize, usize)> = s.iter().map(|x| (x.slot, x.class)).collect();
    assert_eq!(got, vec![(0, 0), (1, 1), (2, 1), (2, 0), (1, 0), (0, 1)]);
    assert!((s[2].score - 0.35).abs() < 1e-15);

    // more labels than slots: some slot carries two labels
    let s = select_trajectories(&probs, 6, 3).unwrap();
    let mut per_slot = BTreeMap::new();
    for x in &s {
        *per_slot.entry(x.slot).or_insert(0) += 1;
    }
    assert!(per_slot.values().any(|&c| c >= 2));
}

fn soft_mask(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..=1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn soft_iou_properties(a in soft_mask(12), b in soft_mask(12), shrink in soft_mask(12), frac in 0.0f64..1.0) {
        let (fa, fb) = (vec![a.clone()], vec![b.clone()]);
        let ab = iou(&fa, &fb);
        prop_assert_eq!(ab, iou(&fb, &fa));
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.iter().any(|&v| v > 0.0) {
            prop_assert!((iou(&fa, &fa) - 1.0).abs() <= 1e-12);
        }
        if a != b {
            prop_assert!(ab < 1.0);
        }
        // a' ≤ a'' ≤ a pointwise: the smaller mask overlaps a no better
        let mid: Vec<f64> = a.iter().zip(&shrink).map(|(x, s)| x * s).collect();
        let low: Vec<f64> = mid.iter().map(|x| x * frac).collect();
        prop_assert!(iou(&[low], &fa) <= iou(&[mid], &fa) + 1e-15);
    }

    #[test]
    fn selection_size(slots in 1usize..5, classes in 1usize..4, frames in 1usize..4, k in 1usize..30, seed in 0u64..1000) {
        let probs = Tensor::uniform(vec![slots * frames, classes], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let s = select_trajectories(&probs, k, slots).unwrap();
        prop_assert_eq!(s.len(), k.min(slots * classes));
        prop_assert!(s.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn noiseless_sequences_recover_identities(seed in 0u64..10_000, objects in 1usize..5, clips in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (tau, stride, width) = (6, 4, 24);
        let frames = tau + (clips - 1) * stride;
        // each object is a random binary blob on each frame, distinct per object
        let masks: Vec<Vec<Vec<f64>>> = (0..objects)
            .map(|o| {
                (0..frames)
                    .map(|_| (0..width).map(|x| if x % objects == o && (x == o || r.random_bool(0.8)) { 1.0 } else { 0.0 }).collect())
                    .collect()
            })
            .collect();
        let labels: Vec<usize> = (0..objects).map(|_| r.random_range(0..3)).collect();
        let mut sequence = Vec::new();
        let mut order_of = Vec::new();
        for c in 0..clips {
            let mut order: Vec<usize> = (0..objects).collect();
            order.shuffle(&mut r);
            let tracks: Vec<_> = order.iter().map(|&o| (labels[o], masks[o].clone(), 0.9)).collect();
            sequence.push(clip(c * stride, tau, &tracks));
            order_of.push(order);
        }
        let store = stitch_sequence(&sequence, &StitchWeights::default()).unwrap();
        prop_assert_eq!(store.num_identities(), objects);
        for t in &store.tracks {
            let o = (0..objects).find(|&o| masks[o][0] == t.records[&0].mask).unwrap();
            for (f, rec) in &t.records {
                prop_assert_eq!(&rec.mask, &masks[o][*f]);
            }
        }
    }

    #[test]
    fn stitching_conserves_identities_and_ignores_weight_scale(seed in 0u64..10_000, alpha in 0.1f64..10.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let rand_clip = |start: usize, r: &mut ChaCha8Rng| {
            let n = r.random_range(0..4);
            let tracks: Vec<_> = (0..n)
                .map(|_| {
                    let masks: Vec<Vec<f64>> = (0..14).map(|_| (0..6).map(|_| r.random_range(0.0..1.0)).collect()).collect();
                    (r.random_range(0..3), masks, r.random_range(0.0..1.0))
                })
                .collect();
            clip(start, 6, &tracks)
        };
        let clips: Vec<_> = [0, 4, 8].iter().map(|&s| rand_clip(s, &mut r)).collect();
        let w = StitchWeights::default();
        let mut store = TrackStore::new();
        let mut scaled = TrackStore::new();
        for c in &clips {
            let before = store.num_identities();
            let out = store.stitch(c, &w).unwrap();
            prop_assert_eq!(store.num_identities(), before + out.opened.len());
            prop_assert_eq!(out.matched.len() + out.opened.len(), c.instances.len());
            let out2 = scaled.stitch(c, &w.scaled(alpha)).unwrap();
            prop_assert_eq!(out, out2);
        }
    }
}
