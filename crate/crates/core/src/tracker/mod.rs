//! Near-online association of per-clip predictions into sequence-level tracks.

mod iou;
mod select;
mod stitch;

pub use iou::volumetric_soft_iou;
pub use select::{select_trajectories, Selection};
pub use stitch::{
    cue_cost, stitch_cost, stitch_sequence, ClipInstance, ClipResult, FrameRecord, StitchOutcome, StitchWeights, Track,
    TrackStore,
};
