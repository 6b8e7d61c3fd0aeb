//! Attention dumps: sampling locations and weights of every encoder and
//! decoder layer for one clip, as TSR1 files plus an index.
//!
//! Files per layer (`<kind><index>` is e.g. `encoder0` or `decoder2`):
//!
//! - `<kind><index>.locations.tsr`: `[Q, M, S, 2]` pixel `(x, y)` on the
//!   sample's target level
//! - `<kind><index>.weights.tsr`: `[Q, M, S]`, summing to 1 over `S`
//! - `<kind><index>.frames.tsr`: `[Q]` frame of each query
//!
//! `targets.tsr` is `[τ, S, 2]`: the `(frame, level)` sampled by sample `s`
//! of a query on frame `t`. The index `attention.txt` reads:
//!
//! ```text
//! format name=clipseg-attention version=1
//! clip frames=6 levels=3 heads=4 samples=96 dims=16x16,8x8,4x4
//! layer kind=encoder index=0 queries=2016 prefix=encoder0
//! ```

use std::path::Path;

use clipseg_core::attention::AttentionTrace;
use clipseg_core::model::{ClipInput, Model};
use clipseg_core::ParamStore;
use clipseg_tensor::io as tsr;
use clipseg_tensor::{Tape, Tensor};

use crate::error::Result;

pub const INDEX: &str = "attention.txt";

fn write_layer(dir: &Path, prefix: &str, trace: &AttentionTrace) -> Result<()> {
    tsr::save(dir.join(format!("{prefix}.locations.tsr")), &trace.locations)?;
    tsr::save(dir.join(format!("{prefix}.weights.tsr")), &trace.weights)?;
    let frames = Tensor::from_vec(trace.query_frames.iter().map(|&f| f as f64).collect());
    tsr::save(dir.join(format!("{prefix}.frames.tsr")), &frames)?;
    Ok(())
}

/// Writes the dump of `input` into `dir` and returns the traces.
pub fn dump_attention(
    model: &Model,
    params: &ParamStore,
    input: &ClipInput,
    dir: &Path,
) -> Result<(Vec<AttentionTrace>, Vec<AttentionTrace>)> {
    std::fs::create_dir_all(dir)?;
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let (enc, dec) = model.trace(&p, &tape, input)?;
    let sched = model.cfg.schedule()?;
    let layout = input.features.layout();
    let s = sched.samples_per_head();
    let mut targets = Tensor::zeros(vec![sched.frames, s, 2]);
    for t in 0..sched.frames {
        for (i, tg) in sched.targets(t).iter().enumerate() {
            targets.set(&[t, i, 0], tg.frame as f64);
            targets.set(&[t, i, 1], tg.level as f64);
        }
    }
    tsr::save(dir.join("targets.tsr"), &targets)?;
    let dims: Vec<String> = layout.dims().iter().map(|(h, w)| format!("{h}x{w}")).collect();
    let mut index = String::from("format name=clipseg-attention version=1\n");
    index += &format!(
        "clip frames={} levels={} heads={} samples={s} dims={}\n",
        sched.frames,
        sched.levels,
        model.cfg.heads,
        dims.join(",")
    );
    for (kind, traces) in [("encoder", &enc), ("decoder", &dec)] {
        for (i, trace) in traces.iter().enumerate() {
            let prefix = format!("{kind}{i}");
            write_layer(dir, &prefix, trace)?;
            index += &format!(
                "layer kind={kind} index={i} queries={} prefix={prefix}\n",
                trace.query_frames.len()
            );
        }
    }
    std::fs::write(dir.join(INDEX), index)?;
    Ok((enc, dec))
}
