//! Finite-difference checks of every differentiable building block.

use std::time::Instant;

use clipseg_core::attention::{deformable_attention, DeformAttn, SamplingSchedule};
use clipseg_core::mask::modulated_deform_conv;
use clipseg_core::matching::{
    compute_losses, mask_loss_layers, match_predictions, positives, GroundTruthClip, GtFrame, GtInstance, LossWeights,
};
use clipseg_core::model::{ClipInput, Model, ModelConfig};
use clipseg_core::{Bound, FeatureClip, ParamStore};
use clipseg_tensor::gradcheck::objective;
use clipseg_tensor::{grad_check, GradCheckConfig, GradCheckReport, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<16} coords={:<5} max_rel_err={:.3e} time={:.1}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_err,
            self.seconds
        )
    }
}

pub const SUITES: [&str; 7] = ["linear", "softmax", "bilinear_sample", "da", "tmsda", "mdc", "model"];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn config(max_coords: Option<usize>, seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        step: STEP,
        tol: TOLERANCE,
        max_coords,
        seed,
    }
}

/// Values whose fractional part stays in `[0.05, 0.95]`.
fn off_lattice(shape: Vec<usize>, lo: i32, hi: i32, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| r.random_range(lo..=hi) as f64 + r.random_range(0.05..0.95))
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn probe<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> clipseg_tensor::Result<Var<'t>> {
    let w = Tensor::randn(y.shape(), 1.0, &mut rng(seed));
    Ok(y.mul(tape.constant(w))?.sum())
}

fn params_as_inputs(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    let names: Vec<String> = store.names().cloned().collect();
    let tensors = names.iter().map(|n| store.get(n).expect("listed").clone()).collect();
    (names, tensors)
}

fn linear_suite() -> Result<GradCheckReport> {
    let mut r = rng(1);
    let inputs = vec![
        Tensor::randn(vec![4, 5], 1.0, &mut r),
        Tensor::randn(vec![3, 5], 1.0, &mut r),
        Tensor::randn(vec![3], 1.0, &mut r),
    ];
    let f = objective(|tape, v| probe(tape, v[0].linear(v[1], Some(v[2]))?, 2));
    Ok(grad_check(f, &inputs, &config(None, 0))?)
}

fn softmax_suite() -> Result<GradCheckReport> {
    let inputs = vec![Tensor::randn(vec![3, 6], 2.0, &mut rng(3))];
    let f = objective(|tape, v| probe(tape, v[0].softmax(1)?, 4));
    Ok(grad_check(f, &inputs, &config(None, 0))?)
}

fn bilinear_suite() -> Result<GradCheckReport> {
    let mut r = rng(5);
    let map = Tensor::randn(vec![2, 5, 6], 1.0, &mut r);
    // locations inside and just outside the map, none on a lattice line
    let pts = off_lattice(vec![9, 2], -1, 5, &mut r);
    let f = objective(|tape, v| probe(tape, v[0].bilinear_sample(v[1])?, 6));
    Ok(grad_check(f, &[map, pts], &config(None, 0))?)
}

fn attention_inputs(attn: &DeformAttn, seed: u64) -> (Vec<String>, Vec<Tensor>) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    attn.init(&mut store, &mut r);
    store.randomize(0.5, &mut r);
    params_as_inputs(&store)
}

fn da_suite() -> Result<GradCheckReport> {
    let (c, heads) = (4, 2);
    let attn = DeformAttn::new("da", c, heads, SamplingSchedule::new(1, 1, 3, 0)?)?;
    let (names, params) = attention_inputs(&attn, 7);
    let mut r = rng(8);
    let mut inputs = vec![Tensor::randn(vec![c], 1.0, &mut r), Tensor::randn(vec![c, 5, 6], 1.0, &mut r)];
    inputs.extend(params);
    let f = objective(|tape, v| {
        let p = Bound::from_vars(names.iter().cloned().zip(v[2..].iter().copied()));
        let y = deformable_attention(&p, &attn, v[0], [0.43, 0.61], v[1])?;
        probe(tape, y, 9)
    });
    Ok(grad_check(f, &inputs, &config(None, 0))?)
}

fn tmsda_suite() -> Result<GradCheckReport> {
    let (c, heads, q) = (4, 2, 3);
    let sched = SamplingSchedule::new(3, 2, 2, 1)?;
    let attn = DeformAttn::new("tmsda", c, heads, sched)?;
    let (names, params) = attention_inputs(&attn, 10);
    let mut r = rng(11);
    let levels = [(5, 5), (3, 3)]
        .iter()
        .map(|&(h, w)| Tensor::randn(vec![c, 3, h, w], 1.0, &mut r))
        .collect();
    let clip = FeatureClip::new(levels)?;
    let frames: Vec<usize> = (0..q).map(|i| i % 3).collect();
    let refs = Tensor::uniform(vec![q, 3, 2], 0.05, 0.95, &mut r);
    let mut inputs = vec![Tensor::randn(vec![q, c], 1.0, &mut r), clip.to_tokens()];
    inputs.extend(params);
    let f = objective(|tape, v| {
        let p = Bound::from_vars(names.iter().cloned().zip(v[2..].iter().copied()));
        let y = attn.forward(&p, v[0], &frames, &refs, v[1], clip.layout())?;
        probe(tape, y, 12)
    });
    Ok(grad_check(f, &inputs, &config(None, 0))?)
}

fn mdc_suite() -> Result<GradCheckReport> {
    let mut r = rng(13);
    let inputs = vec![
        Tensor::randn(vec![1, 2, 5, 5], 1.0, &mut r),
        off_lattice(vec![1, 18, 5, 5], -1, 1, &mut r),
        Tensor::uniform(vec![1, 9, 5, 5], 0.1, 0.9, &mut r),
        Tensor::randn(vec![2, 2, 3, 3], 1.0, &mut r),
        Tensor::randn(vec![2], 1.0, &mut r),
    ];
    let f = objective(|tape, v| probe(tape, modulated_deform_conv(v[0], v[1], v[2], v[3], Some(v[4]))?, 14));
    Ok(grad_check(f, &inputs, &config(None, 0))?)
}

/// Smallest configuration exercising every model component.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 2,
        levels: 2,
        frames: 2,
        enc_layers: 1,
        dec_layers: 2,
        queries_per_frame: 2,
        num_classes: 2,
        k_curr: 2,
        k_temp: 1,
        ffn_hidden: 16,
        input_channels: 3,
        mask_width: 4,
        mdc_kernel: 3,
    }
}

fn miniature_truth(frames: usize, side: usize) -> GroundTruthClip {
    let inst = |identity: usize, class_id: usize, x0: usize| GtInstance {
        identity,
        class_id,
        frames: (0..frames)
            .map(|t| {
                let mut mask = vec![0.0; side * side];
                for y in 1..4 {
                    for x in x0 + t..x0 + t + 3 {
                        mask[y * side + x] = 1.0;
                    }
                }
                let s = side as f64;
                Some(GtFrame {
                    bbox: [(x0 + t) as f64 / s + 1.5 / s, 2.5 / s, 3.0 / s, 3.0 / s],
                    mask,
                })
            })
            .collect(),
    };
    GroundTruthClip {
        frames,
        height: side,
        width: side,
        instances: vec![inst(0, 1, 0), inst(1, 0, 4)],
    }
}

/// The full miniature model's training loss, with the decoder's detached
/// inputs held fixed so the objective is the one the tape differentiates.
fn model_suite(max_coords: usize) -> Result<GradCheckReport> {
    let cfg = miniature_config();
    let model = Model::new(cfg.clone())?;
    let mut store = model.init(15);
    store.randomize(0.2, &mut rng(16));
    let mut r = rng(17);
    let finest = 4;
    let levels = (0..cfg.levels)
        .map(|l| Tensor::randn(vec![cfg.input_channels, cfg.frames, finest >> l, finest >> l], 1.0, &mut r))
        .collect();
    let input = ClipInput {
        features: FeatureClip::new(levels)?,
        raw: Tensor::randn(vec![cfg.input_channels, cfg.frames, 2 * finest, 2 * finest], 1.0, &mut r),
    };
    let gt = miniature_truth(cfg.frames, 2 * finest);
    let weights = LossWeights::new(cfg.dec_layers);
    let n = cfg.queries_per_frame;
    let (frozen, assignment) = {
        let tape = Tape::new();
        let (out, frozen) = model.forward_recorded(&store.bind_frozen(&tape), &tape, &input)?;
        (frozen, match_predictions(out.last(), &gt, &weights, n)?)
    };
    let queries: Vec<usize> = positives(&assignment, &gt, n)?.iter().map(|p| p.query).collect();
    let (names, inputs) = params_as_inputs(&store);
    let f = objective(|tape, v| {
        let p = Bound::from_vars(names.iter().cloned().zip(v.iter().copied()));
        let out = model.forward_frozen(&p, tape, &input, &frozen)?;
        let masks = mask_loss_layers(cfg.dec_layers)
            .into_iter()
            .map(|l| Ok((l, model.masks(&p, &out, l, &queries, &input.raw)?)))
            .collect::<clipseg_core::Result<Vec<_>>>()?;
        let (loss, _) = compute_losses(tape, &out.layers, &masks, &assignment, &gt, &weights, n)?;
        Ok(loss)
    });
    Ok(grad_check(f, &inputs, &config(Some(max_coords), 18))?)
}

/// Runs one suite by name; `None` for an unknown name.
pub fn run_suite(name: &str) -> Option<Result<SuiteResult>> {
    let (name, f): (&'static str, fn() -> Result<GradCheckReport>) = match name {
        "linear" => ("linear", linear_suite),
        "softmax" => ("softmax", softmax_suite),
        "bilinear_sample" => ("bilinear_sample", bilinear_suite),
        "da" => ("da", da_suite),
        "tmsda" => ("tmsda", tmsda_suite),
        "mdc" => ("mdc", mdc_suite),
        "model" => ("model", || model_suite(4)),
        _ => return None,
    };
    let t0 = Instant::now();
    Some(f().map(|report| SuiteResult {
        name,
        checked: report.inputs.iter().map(|i| i.checked).sum(),
        max_rel_err: report.max_rel_err(),
        passed: report.passed(),
        seconds: t0.elapsed().as_secs_f64(),
    }))
}

pub fn run_all() -> Result<Vec<SuiteResult>> {
    SUITES
        .iter()
        .map(|s| run_suite(s).expect("known suite"))
        .collect()
}
