//! Block-matching motion estimation and the two curation passes built on
//! it: motion filtering and cross-transition pair synthesis.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, ManifestRecord};
use crate::pack::Image;

/// Mean displacement magnitude, in pixels, between two equally-shaped
/// frames.
///
/// Grayscale blocks of `block`² pixels are matched against `b` over integer
/// displacements within `radius`, minimizing the sum of absolute
/// differences; the score is the mean Euclidean length of the winning
/// displacements. Blocks are anchored on a grid inset by the (possibly
/// shrunken) search radius so every candidate window stays in frame —
/// border blocks would otherwise compare against out-of-frame content and
/// corrupt the mean. Frames too small to hold a single inset block score
/// 0.0.
pub fn motion_score(
    a: &Image,
    b: &Image,
    block: usize,
    radius: usize,
) -> Result<f64, DataError> {
    assert!(block > 0, "block size must be positive");
    if (a.h, a.w) != (b.h, b.w) {
        return Err(DataError::ShapeMismatch {
            a_h: a.h,
            a_w: a.w,
            b_h: b.h,
            b_w: b.w,
        });
    }
    let (h, w) = (a.h, a.w);
    let ga = gray(a);
    let gb = gray(b);

    let side = h.min(w);
    if side < block {
        return Ok(0.0);
    }
    let r = radius.min((side - block) / 2) as isize;

    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut y0 = r as usize;
    while y0 + block + r as usize <= h {
        let mut x0 = r as usize;
        while x0 + block + r as usize <= w {
            let (dy, dx) = best_match(&ga, &gb, w, (y0, x0), block, r);
            total += ((dy * dy + dx * dx) as f64).sqrt();
            count += 1;
            x0 += block;
        }
        y0 += block;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

fn gray(img: &Image) -> Vec<f32> {
    img.data
        .chunks_exact(3)
        .map(|px| (px[0] + px[1] + px[2]) / 3.0)
        .collect()
}

/// Displacement minimizing SAD; ties prefer the smaller displacement, then
/// row-major scan order, so a flat block reports zero motion and the score
/// is symmetric under frame exchange for pure translations.
fn best_match(
    ga: &[f32],
    gb: &[f32],
    w: usize,
    (y0, x0): (usize, usize),
    block: usize,
    r: isize,
) -> (isize, isize) {
    let mut best = (0isize, 0isize);
    let mut best_sad = f32::INFINITY;
    let mut best_mag = isize::MAX;
    for dy in -r..=r {
        for dx in -r..=r {
            let mut sad = 0.0f32;
            for by in 0..block {
                let ay = y0 + by;
                let by2 = (ay as isize + dy) as usize;
                let arow = ay * w + x0;
                let brow = (by2 * w) as isize + x0 as isize + dx;
                for bx in 0..block {
                    sad += (ga[arow + bx] - gb[(brow + bx as isize) as usize]).abs();
                }
            }
            let mag = dy * dy + dx * dx;
            if sad < best_sad || (sad == best_sad && mag < best_mag) {
                best_sad = sad;
                best_mag = mag;
                best = (dy, dx);
            }
        }
    }
    best
}

/// Drop records whose motion score falls below `threshold`; multiply the
/// sampling weight of records strictly above it by `upweight`. Records
/// without a score pass through untouched. An all-dropped result is a
/// warning, not an error.
pub fn filter_pairs(
    records: Vec<ManifestRecord>,
    threshold: f64,
    upweight: f64,
) -> Vec<ManifestRecord> {
    let had_any = !records.is_empty();
    let out: Vec<ManifestRecord> = records
        .into_iter()
        .filter_map(|mut rec| match rec.motion_score {
            Some(score) if score < threshold => None,
            Some(score) => {
                if score > threshold {
                    rec.weight *= upweight;
                }
                Some(rec)
            }
            None => Some(rec),
        })
        .collect();
    if had_any && out.is_empty() {
        log::warn!("motion filter at threshold {threshold} dropped every record");
    }
    out
}

/// A consecutive frame pair cut from a spliced stream.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub a: Image,
    pub b: Image,
    /// True when a clip boundary sits between the two frames.
    pub transition: bool,
}

/// Shuffle the clips, concatenate them ignoring content boundaries, and cut
/// the stream back into every consecutive frame pair. Pairs that straddle a
/// splice are tagged, giving exactly (number of splices) transitions out of
/// (stream length − 1) pairs.
pub fn cross_transition_pairs(clips: &[Vec<Image>], seed: u64) -> Vec<FramePair> {
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher–Yates, hand-rolled so the byte stream pins the permutation.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    let mut frames: Vec<&Image> = Vec::new();
    let mut splices: Vec<usize> = Vec::new();
    for &ci in &order {
        if clips[ci].is_empty() {
            continue;
        }
        if !frames.is_empty() {
            splices.push(frames.len());
        }
        frames.extend(clips[ci].iter());
    }

    let mut pairs = Vec::new();
    for i in 0..frames.len().saturating_sub(1) {
        pairs.push(FramePair {
            a: frames[i].clone(),
            b: frames[i + 1].clone(),
            transition: splices.contains(&(i + 1)),
        });
    }
    pairs
}
