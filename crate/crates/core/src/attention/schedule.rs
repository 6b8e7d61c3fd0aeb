use crate::error::{CoreError, Result};

/// Which frame and level a sample slot reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleTarget {
    pub frame: usize,
    pub level: usize,
}

/// Per-frame key counts: `k_curr` keys on the query's own frame and `k_temp`
/// keys on each other frame, for every level.
///
/// Samples of one head are ordered current-frame first (`level * k_curr + k`),
/// then temporal (`levels * k_curr + (level * k_temp + k) * (frames - 1) + slot`),
/// which mirrors the output layout of the two projection heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingSchedule {
    pub frames: usize,
    pub levels: usize,
    pub k_curr: usize,
    pub k_temp: usize,
}

impl SamplingSchedule {
    pub fn new(frames: usize, levels: usize, k_curr: usize, k_temp: usize) -> Result<Self> {
        let s = Self {
            frames,
            levels,
            k_curr,
            k_temp,
        };
        if frames == 0 || levels == 0 {
            return Err(CoreError::Config("schedule needs at least one frame and one level".into()));
        }
        if s.samples_per_head() == 0 {
            return Err(CoreError::EmptySamples);
        }
        Ok(s)
    }

    /// Keys drawn from `target` for a query on `query_frame`.
    pub fn keys_for(&self, query_frame: usize, target: usize) -> usize {
        if query_frame == target {
            self.k_curr
        } else {
            self.k_temp
        }
    }

    /// The other frames in ascending order; temporal slot `j` reads frame `order[j]`.
    pub fn temporal_order(&self, query_frame: usize) -> Vec<usize> {
        (0..self.frames).filter(|&f| f != query_frame).collect()
    }

    pub fn current_samples(&self) -> usize {
        self.levels * self.k_curr
    }

    pub fn temporal_samples(&self) -> usize {
        self.levels * self.k_temp * (self.frames - 1)
    }

    /// `Σ_t Σ_l K(t)`.
    pub fn samples_per_head(&self) -> usize {
        self.current_samples() + self.temporal_samples()
    }

    /// Target of every sample slot for a query on `query_frame`.
    pub fn targets(&self, query_frame: usize) -> Vec<SampleTarget> {
        let mut out = Vec::with_capacity(self.samples_per_head());
        for level in 0..self.levels {
            for _ in 0..self.k_curr {
                out.push(SampleTarget {
                    frame: query_frame,
                    level,
                });
            }
        }
        let order = self.temporal_order(query_frame);
        for level in 0..self.levels {
            for _ in 0..self.k_temp {
                for &frame in &order {
                    out.push(SampleTarget { frame, level });
                }
            }
        }
        out
    }
}
