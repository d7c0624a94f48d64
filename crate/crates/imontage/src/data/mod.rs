//! Synthetic corpus pipeline: scene rendering, task generators, resolution
//! bucketing, token-budget batching, motion scoring, and manifest IO.
//!
//! Nothing here touches the network. The corpus is procedural — flat-color
//! shapes on flat backgrounds, moved around by a tiny closed grammar of
//! instructions — so every record ships with exact foreground masks and
//! ground-truth targets, and a fixed seed reproduces the corpus byte for
//! byte.

mod bucket;
mod corpus;
mod io;
mod motion;
mod scene;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bucket::{
    assign_bucket, batch_plan, default_buckets, fit_to_bucket, toy_buckets, Batch, Bucket,
    DEFAULT_BATCH_CAP, DEFAULT_TOKEN_BUDGET,
};
pub use corpus::gen_corpus;
pub use io::{encode_png, load_image, load_manifest, save_image, save_manifest};
pub use motion::{cross_transition_pairs, filter_pairs, motion_score, FramePair};
pub use scene::{ColorName, MotionProgram, Scene, ShapeKind, ShapePlacement, SyntheticSceneSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("frame shapes differ: {a_h}x{a_w} vs {b_h}x{b_w}")]
    ShapeMismatch {
        a_h: usize,
        a_w: usize,
        b_h: usize,
        b_w: usize,
    },
    #[error("token budget {budget} cannot hold one {bucket} sample of {tokens} tokens")]
    BudgetTooSmall {
        budget: usize,
        tokens: usize,
        bucket: String,
    },
    #[error("bucket id {id:?} is not WIDTHxHEIGHT")]
    BadBucketId { id: String },
    #[error("unknown task {0:?}")]
    BadTask(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path} line {line}: {source}")]
    Manifest {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
}

/// Task families of the corpus, in curriculum order: the two pretraining
/// tasks first, then many-in/one-out, then the many-out tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Continue a constant-velocity clip: one frame in, the rest out.
    Video,
    /// Single-image edit: translate, rotate, scale, or recolor.
    Edit,
    /// Two subject references composed into one scene.
    MultiRef,
    /// Subject reference plus a background condition image.
    CondRef,
    /// Content reference restyled after a style reference.
    StyleRef,
    /// One reference, a chain of edits, one target per step.
    MultiTurn,
    /// One reference, rotated views as targets.
    MultiView,
    /// Character reference, several panels with scene cuts between them.
    Storyboard,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Video,
        TaskKind::Edit,
        TaskKind::MultiRef,
        TaskKind::CondRef,
        TaskKind::StyleRef,
        TaskKind::MultiTurn,
        TaskKind::MultiView,
        TaskKind::Storyboard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Video => "video",
            TaskKind::Edit => "edit",
            TaskKind::MultiRef => "multi_ref",
            TaskKind::CondRef => "cond_ref",
            TaskKind::StyleRef => "style_ref",
            TaskKind::MultiTurn => "multi_turn",
            TaskKind::MultiView => "multi_view",
            TaskKind::Storyboard => "storyboard",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| DataError::BadTask(s.to_string()))
    }
}

/// One manifest line. Paths are relative to the manifest's directory and use
/// forward slashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub task: TaskKind,
    pub instruction: String,
    pub ref_paths: Vec<String>,
    pub target_paths: Vec<String>,
    /// Bucket id, `WIDTHxHEIGHT`.
    pub bucket: String,
    /// Mean block-matching flow magnitude in pixels, for motion filtering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_score: Option<f64>,
    /// One exact foreground mask per target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fg_mask_paths: Option<Vec<String>>,
    /// Relative sampling weight; upweighted by motion filtering.
    #[serde(default = "default_weight", skip_serializing_if = "is_default_weight")]
    pub weight: f64,
    /// True when the pair straddles a splice between concatenated clips.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub transition: bool,
}

fn default_weight() -> f64 {
    1.0
}

#[allow(clippy::trivially_copy_pass_by_ref)]
fn is_default_weight(w: &f64) -> bool {
    *w == 1.0
}
