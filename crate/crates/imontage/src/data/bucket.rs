//! Canonical resolutions, aspect-aware bucket assignment, and token-budget
//! batching.

use serde::{Deserialize, Serialize};

use super::{DataError, ManifestRecord};
use crate::pack::Image;

/// Per-bucket token budget that reproduces the reference batch sizes
/// (8, 4, 2) for the 512/768/1024 square buckets at patch 16.
pub const DEFAULT_TOKEN_BUDGET: usize = 9216;
/// Largest batch the planner will emit regardless of budget headroom.
pub const DEFAULT_BATCH_CAP: usize = 8;

/// One canonical resolution. Dims are pixels and must be multiples of the
/// model patch size for the bucket to be usable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bucket {
    pub height: usize,
    pub width: usize,
}

impl Bucket {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "degenerate bucket");
        Bucket { height, width }
    }

    /// Stable id, `WIDTHxHEIGHT` — self-describing, so manifests survive
    /// bucket-list changes.
    pub fn id(&self) -> String {
        format!("{}x{}", self.width, self.height)
    }

    pub fn parse_id(id: &str) -> Result<Bucket, DataError> {
        let bad = || DataError::BadBucketId { id: id.to_string() };
        let (w, h) = id.split_once('x').ok_or_else(bad)?;
        let w: usize = w.parse().map_err(|_| bad())?;
        let h: usize = h.parse().map_err(|_| bad())?;
        if w == 0 || h == 0 {
            return Err(bad());
        }
        Ok(Bucket::new(h, w))
    }

    /// Image tokens of one frame at this resolution.
    pub fn token_count(&self, patch: usize) -> usize {
        (self.height / patch) * (self.width / patch)
    }

    fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    fn area(&self) -> usize {
        self.height * self.width
    }
}

/// The 37 canonical resolutions: every ±32-pixel variant of the three square
/// bases on both axes, plus ten wide/tall shapes. Listing order is the final
/// tie-breaker in [`assign_bucket`].
pub fn default_buckets() -> Vec<Bucket> {
    let mut out = Vec::with_capacity(37);
    for b in [512i64, 768, 1024] {
        for dh in [-32i64, 0, 32] {
            for dw in [-32i64, 0, 32] {
                out.push(Bucket::new((b + dh) as usize, (b + dw) as usize));
            }
        }
    }
    for (w, h) in [
        (1024, 640),
        (640, 1024),
        (1024, 576),
        (576, 1024),
        (768, 512),
        (512, 768),
        (896, 512),
        (512, 896),
        (1280, 512),
        (512, 1280),
    ] {
        out.push(Bucket::new(h, w));
    }
    out
}

/// Desk-scale analogue of [`default_buckets`] for tests and toy runs.
pub fn toy_buckets() -> Vec<Bucket> {
    vec![
        Bucket::new(16, 16),
        Bucket::new(32, 32),
        Bucket::new(64, 64),
        Bucket::new(16, 32),
        Bucket::new(32, 16),
    ]
}

/// Pick the bucket minimizing |log aspect − log bucket aspect|, breaking
/// ties by nearest area, then by listing order. Total: every positive shape
/// maps to exactly one bucket.
pub fn assign_bucket(h: usize, w: usize, buckets: &[Bucket]) -> Bucket {
    assert!(h > 0 && w > 0, "degenerate image shape");
    assert!(!buckets.is_empty(), "bucket list must not be empty");
    let log_aspect = (w as f64 / h as f64).ln();
    let area = (h * w) as i64;
    let mut best = 0usize;
    for i in 1..buckets.len() {
        let da_i = (buckets[i].aspect().ln() - log_aspect).abs();
        let da_best = (buckets[best].aspect().ln() - log_aspect).abs();
        if da_i < da_best {
            best = i;
        } else if da_i == da_best {
            let dd_i = (buckets[i].area() as i64 - area).abs();
            let dd_best = (buckets[best].area() as i64 - area).abs();
            if dd_i < dd_best {
                best = i;
            }
        }
    }
    buckets[best]
}

/// Short-side resize (nearest neighbor, so flat colors and binary masks stay
/// exact) followed by a center crop to the bucket dims.
pub fn fit_to_bucket(img: &Image, bucket: Bucket) -> Image {
    let scale = f64::max(
        bucket.height as f64 / img.h as f64,
        bucket.width as f64 / img.w as f64,
    );
    let rh = (img.h as f64 * scale).round().max(bucket.height as f64) as usize;
    let rw = (img.w as f64 * scale).round().max(bucket.width as f64) as usize;
    let oy = (rh - bucket.height) / 2;
    let ox = (rw - bucket.width) / 2;
    let mut out = Image::zeros(bucket.height, bucket.width);
    for y in 0..bucket.height {
        let sy = ((((y + oy) as f64 + 0.5) / scale) as usize).min(img.h - 1);
        for x in 0..bucket.width {
            let sx = ((((x + ox) as f64 + 0.5) / scale) as usize).min(img.w - 1);
            out.set(y, x, img.get(sy, sx));
        }
    }
    out
}

/// One planner batch: indices into the manifest, all from the same bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub bucket: Bucket,
    pub indices: Vec<usize>,
}

/// Group records by bucket (first-appearance order, manifest order within)
/// and chunk each group into batches of
/// `min(floor(budget / frame_tokens), cap)` samples, so every batch carries
/// roughly the same token load. Tokens are counted per canonical frame.
pub fn batch_plan(
    records: &[ManifestRecord],
    patch: usize,
    token_budget: usize,
    cap: usize,
) -> Result<Vec<Batch>, DataError> {
    assert!(patch > 0 && cap > 0, "degenerate plan parameters");
    let mut groups: Vec<(Bucket, Vec<usize>)> = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let bucket = Bucket::parse_id(&rec.bucket)?;
        match groups.iter_mut().find(|(b, _)| *b == bucket) {
            Some((_, idxs)) => idxs.push(i),
            None => groups.push((bucket, vec![i])),
        }
    }
    let mut batches = Vec::new();
    for (bucket, idxs) in groups {
        let tokens = bucket.token_count(patch);
        if tokens == 0 || tokens > token_budget {
            return Err(DataError::BudgetTooSmall {
                budget: token_budget,
                tokens,
                bucket: bucket.id(),
            });
        }
        let size = (token_budget / tokens).min(cap);
        for chunk in idxs.chunks(size) {
            batches.push(Batch {
                bucket,
                indices: chunk.to_vec(),
            });
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;

    fn record_in(bucket: &str) -> ManifestRecord {
        ManifestRecord {
            task: TaskKind::Edit,
            instruction: "recolor the red circle to blue".into(),
            ref_paths: vec![],
            target_paths: vec![],
            bucket: bucket.into(),
            motion_score: None,
            fg_mask_paths: None,
            weight: 1.0,
            transition: false,
        }
    }

    #[test]
    fn default_list_is_complete_and_patch_aligned() {
        let buckets = default_buckets();
        assert_eq!(buckets.len(), 37);
        for b in &buckets {
            assert_eq!(b.height % 16, 0, "{}", b.id());
            assert_eq!(b.width % 16, 0, "{}", b.id());
        }
        // No duplicates.
        for (i, a) in buckets.iter().enumerate() {
            assert!(!buckets[i + 1..].contains(a), "duplicate {}", a.id());
        }
    }

    #[test]
    fn near_square_lands_on_the_square_base() {
        let b = assign_bucket(500, 500, &default_buckets());
        assert_eq!((b.height, b.width), (512, 512));
    }

    #[test]
    fn exact_dims_map_to_themselves() {
        for b in default_buckets() {
            assert_eq!(assign_bucket(b.height, b.width, &default_buckets()), b);
        }
    }

    #[test]
    fn full_hd_lands_on_the_16_9_bucket() {
        let b = assign_bucket(1080, 1920, &default_buckets());
        assert_eq!((b.height, b.width), (576, 1024));
    }

    #[test]
    fn id_round_trips_and_rejects_garbage() {
        let b = Bucket::new(576, 1024);
        assert_eq!(b.id(), "1024x576");
        assert_eq!(Bucket::parse_id("1024x576").unwrap(), b);
        for bad in ["", "x", "12", "0x5", "axb", "3x4x5"] {
            assert!(matches!(
                Bucket::parse_id(bad),
                Err(DataError::BadBucketId { .. })
            ));
        }
    }

    #[test]
    fn reference_batch_sizes_and_budget_spread() {
        let mut records = Vec::new();
        for (id, n) in [("512x512", 16), ("768x768", 8), ("1024x1024", 4)] {
            records.extend(std::iter::repeat_with(|| record_in(id)).take(n));
        }
        let plan = batch_plan(&records, 16, DEFAULT_TOKEN_BUDGET, DEFAULT_BATCH_CAP).unwrap();
        let sizes: Vec<(String, usize)> = plan
            .iter()
            .map(|b| (b.bucket.id(), b.indices.len()))
            .collect();
        assert_eq!(
            sizes,
            vec![
                ("512x512".to_string(), 8),
                ("512x512".to_string(), 8),
                ("768x768".to_string(), 4),
                ("768x768".to_string(), 4),
                ("1024x1024".to_string(), 2),
                ("1024x1024".to_string(), 2),
            ]
        );
        // Full batches carry token loads within ±15% of each other.
        let loads: Vec<usize> = plan
            .iter()
            .map(|b| b.indices.len() * b.bucket.token_count(16))
            .collect();
        assert_eq!(loads[0], 8192);
        assert_eq!(loads[2], 9216);
        assert_eq!(loads[4], 8192);
        for &a in &loads {
            for &b in &loads {
                assert!(a as f64 <= 1.15 * b as f64);
            }
        }
    }

    #[test]
    fn budget_below_one_sample_is_an_error() {
        let records = vec![record_in("1024x1024")];
        match batch_plan(&records, 16, 4095, 8) {
            Err(DataError::BudgetTooSmall { tokens: 4096, .. }) => {}
            other => panic!("expected BudgetTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn batches_never_mix_buckets_and_cover_everything() {
        let ids = ["16x16", "32x32", "16x16", "64x64", "32x32", "16x16"];
        let records: Vec<ManifestRecord> = ids.iter().map(|id| record_in(id)).collect();
        let plan = batch_plan(&records, 8, 64, 8).unwrap();
        let mut seen = vec![0usize; records.len()];
        for batch in &plan {
            for &i in &batch.indices {
                assert_eq!(records[i].bucket, batch.bucket.id());
                seen[i] += 1;
            }
            let tokens = batch.bucket.token_count(8);
            assert!(batch.indices.len() * tokens <= 64);
        }
        assert!(seen.iter().all(|&c| c == 1), "every record exactly once");
    }

    #[test]
    fn fit_resizes_and_center_crops() {
        let mut img = Image::fill(100, 200, [0.2, 0.4, 0.6]);
        // Mark the exact center so the crop keeps it centered.
        img.set(50, 100, [1.0, 1.0, 1.0]);
        let out = fit_to_bucket(&img, Bucket::new(64, 64));
        assert_eq!((out.h, out.w), (64, 64));
        let center = out.get(32, 32);
        let off = out.get(0, 0);
        assert_eq!(off, [0.2, 0.4, 0.6]);
        // Nearest-neighbor keeps the marker color exact.
        assert_eq!(center, [1.0, 1.0, 1.0]);
    }
}
