//! Marginal 3D rotary position embeddings.
//!
//! Image tokens get a position (t, row, col): a temporal slot for the frame
//! plus the spatial cell inside it. The head dimension is split across the
//! three axes and each slice is rotated by its own frequency ladder, so
//! attention logits depend only on per-axis index differences.
//!
//! The temporal axis is the interesting one. Instead of numbering frames
//! consecutively, the marginal strategy pins input frames to the low end of a
//! fixed slot range and output frames to the high end, leaving a wide gap in
//! the middle. Any mix of reference and target counts then sees the same
//! stable "inputs here, outputs there" geometry. The evenly-spread
//! alternative, kept for ablations, stretches each sequence across all slots
//! and so reassigns meanings as counts change.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RopeConfig {
    /// Per-head channel count; `split` must sum to it.
    pub head_dim: usize,
    /// Channels given to (temporal, height, width); each even.
    pub split: (usize, usize, usize),
    pub theta_base: f64,
    /// Size of the temporal grid all frames are placed on.
    pub temporal_slots: usize,
    /// Inclusive slot range reserved for input frames.
    pub input_range: (usize, usize),
    /// Inclusive slot range reserved for output frames.
    pub output_range: (usize, usize),
}

impl Default for RopeConfig {
    fn default() -> Self {
        RopeConfig {
            head_dim: 32,
            split: (8, 12, 12),
            theta_base: 10_000.0,
            temporal_slots: 32,
            input_range: (0, 7),
            output_range: (24, 31),
        }
    }
}

impl RopeConfig {
    pub fn validate(&self) -> Result<(), String> {
        let (dt, dh, dw) = self.split;
        if dt + dh + dw != self.head_dim {
            return Err(format!(
                "rope split {:?} does not sum to head_dim {}",
                self.split, self.head_dim
            ));
        }
        if dt % 2 != 0 || dh % 2 != 0 || dw % 2 != 0 {
            return Err(format!("rope split {:?} has odd components", self.split));
        }
        let ok_range = |(lo, hi): (usize, usize)| lo <= hi && hi < self.temporal_slots;
        if !ok_range(self.input_range) || !ok_range(self.output_range) {
            return Err(format!(
                "slot ranges {:?}/{:?} must fit inside {} temporal slots",
                self.input_range, self.output_range, self.temporal_slots
            ));
        }
        if self.input_range.1 >= self.output_range.0 {
            return Err(format!(
                "input range {:?} must sit strictly below output range {:?}",
                self.input_range, self.output_range
            ));
        }
        Ok(())
    }

    /// Gap between the last input slot and the first output slot.
    pub fn margin(&self) -> usize {
        self.output_range.0 - self.input_range.1
    }

    pub fn input_capacity(&self) -> usize {
        self.input_range.1 - self.input_range.0 + 1
    }

    pub fn output_capacity(&self) -> usize {
        self.output_range.1 - self.output_range.0 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RopeStrategy {
    Marginal,
    Even,
}

impl std::str::FromStr for RopeStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "marginal" => Ok(RopeStrategy::Marginal),
            "even" => Ok(RopeStrategy::Even),
            other => Err(format!("unknown rope strategy {other:?} (marginal|even)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RopeError {
    #[error("{requested} {role} frames exceed the {available} available temporal slots")]
    TooManyFrames {
        role: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("index plan covers {plan_inputs} input / {plan_outputs} output frames, geometry has {got_inputs}/{got_outputs}")]
    PlanMismatch {
        plan_inputs: usize,
        plan_outputs: usize,
        got_inputs: usize,
        got_outputs: usize,
    },
}

/// Temporal slot per frame, inputs and outputs listed separately.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RopeIndexPlan {
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
}

/// Place `n_in` input and `n_out` output frames on the temporal grid.
///
/// Marginal: inputs fill their reserved range from its low end upward,
/// outputs likewise from the low end of theirs. Even: all frames, inputs
/// first, spread uniformly over the whole grid with round-half-up spacing.
pub fn assign_temporal_indices(
    n_in: usize,
    n_out: usize,
    strategy: RopeStrategy,
    cfg: &RopeConfig,
) -> Result<RopeIndexPlan, RopeError> {
    match strategy {
        RopeStrategy::Marginal => {
            if n_in > cfg.input_capacity() {
                return Err(RopeError::TooManyFrames {
                    role: "input",
                    requested: n_in,
                    available: cfg.input_capacity(),
                });
            }
            if n_out > cfg.output_capacity() {
                return Err(RopeError::TooManyFrames {
                    role: "output",
                    requested: n_out,
                    available: cfg.output_capacity(),
                });
            }
            Ok(RopeIndexPlan {
                inputs: (cfg.input_range.0..cfg.input_range.0 + n_in).collect(),
                outputs: (cfg.output_range.0..cfg.output_range.0 + n_out).collect(),
            })
        }
        RopeStrategy::Even => {
            let n = n_in + n_out;
            if n > cfg.temporal_slots {
                return Err(RopeError::TooManyFrames {
                    role: "total",
                    requested: n,
                    available: cfg.temporal_slots,
                });
            }
            let spread: Vec<usize> = match n {
                0 => vec![],
                1 => vec![0],
                // round-half-up of i*(S-1)/(n-1), in exact integer arithmetic
                _ => (0..n)
                    .map(|i| (2 * i * (cfg.temporal_slots - 1) + (n - 1)) / (2 * (n - 1)))
                    .collect(),
            };
            Ok(RopeIndexPlan {
                inputs: spread[..n_in].to_vec(),
                outputs: spread[n_in..].to_vec(),
            })
        }
    }
}

/// Frequency ladder for one axis: `theta_base^(-2j/d)` for pair j.
pub fn axis_freqs(d_axis: usize, theta_base: f64) -> Vec<f64> {
    (0..d_axis / 2)
        .map(|j| theta_base.powf(-2.0 * j as f64 / d_axis as f64))
        .collect()
}

/// Position and patch-grid size of one frame in a packed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGeom {
    pub temporal: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Pair an index plan with per-frame patch grids, inputs then outputs.
pub fn frame_geoms(
    plan: &RopeIndexPlan,
    input_grids: &[(usize, usize)],
    output_grids: &[(usize, usize)],
) -> Result<Vec<FrameGeom>, RopeError> {
    if plan.inputs.len() != input_grids.len() || plan.outputs.len() != output_grids.len() {
        return Err(RopeError::PlanMismatch {
            plan_inputs: plan.inputs.len(),
            plan_outputs: plan.outputs.len(),
            got_inputs: input_grids.len(),
            got_outputs: output_grids.len(),
        });
    }
    Ok(plan
        .inputs
        .iter()
        .zip(input_grids)
        .chain(plan.outputs.iter().zip(output_grids))
        .map(|(&temporal, &(rows, cols))| FrameGeom {
            temporal,
            rows,
            cols,
        })
        .collect())
}

/// Per-token cos/sin tables, shape `[n_text + total image tokens, head_dim/2]`.
///
/// Text tokens come first and rotate by nothing (cos 1, sin 0). Image tokens
/// follow frame by frame in row-major order; pair j of a token at slot t,
/// cell (r, c) turns by t*w_t, r*w_h, or c*w_w depending on which axis slice
/// j falls in.
pub fn build_rope_tables<S: Scalar>(
    cfg: &RopeConfig,
    n_text: usize,
    frames: &[FrameGeom],
) -> (Tensor<S>, Tensor<S>) {
    let (dt, dh, dw) = cfg.split;
    let wt = axis_freqs(dt, cfg.theta_base);
    let wh = axis_freqs(dh, cfg.theta_base);
    let ww = axis_freqs(dw, cfg.theta_base);
    let pairs = cfg.head_dim / 2;
    let total: usize = n_text + frames.iter().map(|f| f.rows * f.cols).sum::<usize>();
    let mut cos = Vec::with_capacity(total * pairs);
    let mut sin = Vec::with_capacity(total * pairs);
    let mut push_token = |angles: &mut dyn Iterator<Item = f64>| {
        for a in angles {
            cos.push(S::from_f64(a.cos()));
            sin.push(S::from_f64(a.sin()));
        }
    };
    for _ in 0..n_text {
        push_token(&mut std::iter::repeat_n(0.0, pairs));
    }
    for f in frames {
        for r in 0..f.rows {
            for c in 0..f.cols {
                let t = f.temporal as f64;
                let mut angles = wt
                    .iter()
                    .map(move |&w| t * w)
                    .chain(wh.iter().map(move |&w| r as f64 * w))
                    .chain(ww.iter().map(move |&w| c as f64 * w));
                push_token(&mut angles);
            }
        }
    }
    (
        Tensor::new(vec![total, pairs], cos),
        Tensor::new(vec![total, pairs], sin),
    )
}
