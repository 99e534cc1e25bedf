//! Segmentation metrics: per-class Dice overlap and the 95th-percentile
//! Hausdorff boundary distance.
//!
//! Definitions pinned here (and mirrored by the brute-force oracles in the
//! test-suite):
//!
//! - Boundary: a mask pixel with at least one 4-neighbor outside the mask
//!   or outside the image, so mask pixels on the image edge count.
//! - Directed distances: Euclidean nearest-neighbor distance from every
//!   boundary pixel of one mask to the boundary of the other.
//! - Percentile: lower nearest-rank, the value at index
//!   `ceil(0.95 n) - 1` of the ascending-sorted distances.
//! - HD95 is the max of the two directed 95th percentiles.
//! - Empty-mask conventions: both masks empty gives 0; exactly one empty
//!   gives the image diagonal `sqrt((h-1)^2 + (w-1)^2)`. For Dice, both
//!   empty gives 1, exactly one empty gives 0.
//!
//! Distances are in pixels; dataset evaluation accepts a spacing
//! multiplier (default 1) for callers that care about physical units.
//! Class 0 is treated as background and excluded from reports, matching
//! how the organ/structure benchmarks this mirrors are scored.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Integer class-id map of an `h x w` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "label map data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Binary mask of one class.
    pub fn class_mask(&self, class: u8) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| v == class).collect(),
        }
    }

    pub fn contains_class(&self, class: u8) -> bool {
        self.data.contains(&class)
    }

    /// Hard prediction from `[classes, h, w]` logits by per-pixel argmax
    /// (ties resolve to the lowest class id).
    pub fn from_logits<T: Scalar>(logits: &Tensor<T>) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "logits must be [classes,h,w], got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if c == 0 || c > 256 {
            return Err(Error::InvalidArgument(format!(
                "class count {c} outside supported range 1..=256"
            )));
        }
        let plane = h * w;
        let d = logits.data();
        let mut data = vec![0u8; plane];
        for (p, out) in data.iter_mut().enumerate() {
            let mut best = d[p];
            let mut arg = 0usize;
            for ci in 1..c {
                let v = d[ci * plane + p];
                if v > best {
                    best = v;
                    arg = ci;
                }
            }
            *out = arg as u8;
        }
        Ok(Self { h, w, data })
    }
}

/// Binary pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn from_vec(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "mask data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Inner-boundary pixels: in the mask, with a 4-neighbor outside the
    /// mask or outside the image.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.data[y * self.w + x] {
                    continue;
                }
                let edge = y == 0 || y == self.h - 1 || x == 0 || x == self.w - 1;
                let exposed = edge
                    || !self.data[(y - 1) * self.w + x]
                    || !self.data[(y + 1) * self.w + x]
                    || !self.data[y * self.w + x - 1]
                    || !self.data[y * self.w + x + 1];
                if exposed {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Dice overlap of one class between two label maps:
/// `2|P and G| / (|P| + |G|)`, with 1 when both masks are empty and 0 when
/// exactly one is.
pub fn dice(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dice: prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut p = 0u64;
    let mut g = 0u64;
    let mut inter = 0u64;
    for (&pv, &gv) in pred.data.iter().zip(&gt.data) {
        let pin = pv == class;
        let gin = gv == class;
        p += u64::from(pin);
        g += u64::from(gin);
        inter += u64::from(pin && gin);
    }
    Ok(match (p, g) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * inter as f64 / (p + g) as f64,
    })
}

/// 95th-percentile symmetric Hausdorff distance between two masks, in
/// pixels.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "hd95: prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    match (pred.is_empty_mask(), gt.is_empty_mask()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            let (h, w) = pred.shape();
            let (dh, dw) = ((h - 1) as f64, (w - 1) as f64);
            return Ok((dh * dh + dw * dw).sqrt());
        }
        _ => {}
    }
    let a = pred.boundary();
    let b = gt.boundary();
    Ok(directed_percentile(&a, &b).max(directed_percentile(&b, &a)))
}

/// 95th percentile (lower nearest-rank) of nearest-neighbor distances from
/// every pixel in `from` to the pixel set `to`.
fn directed_percentile(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut dists: Vec<f64> = from
        .iter()
        .map(|&(ay, ax)| {
            let min_sq = to
                .iter()
                .map(|&(by, bx)| {
                    let dy = ay as i64 - by as i64;
                    let dx = ax as i64 - bx as i64;
                    dy * dy + dx * dx
                })
                .min()
                .expect("nonempty boundary");
            (min_sq as f64).sqrt()
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    dists[percentile_index(dists.len())]
}

/// Index of the lower nearest-rank 95th percentile: `ceil(0.95 n) - 1`.
pub(crate) fn percentile_index(n: usize) -> usize {
    (19 * n).div_ceil(20) - 1
}

/// Dataset-level metrics: one row per foreground class, averaged over the
/// samples whose ground truth contains that class.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Foreground class ids that appear in at least one ground truth.
    pub classes: Vec<u8>,
    pub per_class_dice: Vec<f64>,
    pub per_class_hd95: Vec<f64>,
    pub mean_dice: f64,
    pub mean_hd95: f64,
}

impl MetricsReport {
    /// `class_id,dice,hd95` rows plus a `mean` row, six decimal places.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,dice,hd95\n");
        for i in 0..self.classes.len() {
            out.push_str(&format!(
                "{},{:.6},{:.6}\n",
                self.classes[i], self.per_class_dice[i], self.per_class_hd95[i]
            ));
        }
        out.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_dice, self.mean_hd95));
        out
    }
}

/// Compute per-class Dice/HD95 for prediction/ground-truth pairs.
///
/// A class contributes to a sample's metrics only when present in that
/// sample's ground truth; classes absent from every ground truth are
/// dropped. `spacing` scales HD95 values (pixels by default).
pub fn evaluate_labelmaps(
    preds: &[LabelMap],
    gts: &[LabelMap],
    n_classes: usize,
    spacing: f64,
) -> Result<MetricsReport> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::EmptyDataset);
    }
    let mut classes = Vec::new();
    let mut per_class_dice = Vec::new();
    let mut per_class_hd95 = Vec::new();

    for class in 1..n_classes {
        let class = class as u8;
        let mut dice_sum = 0.0;
        let mut hd_sum = 0.0;
        let mut count = 0usize;
        for (pred, gt) in preds.iter().zip(gts) {
            if !gt.contains_class(class) {
                continue;
            }
            dice_sum += dice(pred, gt, class)?;
            hd_sum += hd95(&pred.class_mask(class), &gt.class_mask(class))? * spacing;
            count += 1;
        }
        if count > 0 {
            classes.push(class);
            per_class_dice.push(dice_sum / count as f64);
            per_class_hd95.push(hd_sum / count as f64);
        }
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument(
            "no foreground class present in any ground truth".to_string(),
        ));
    }
    let n = classes.len() as f64;
    Ok(MetricsReport {
        mean_dice: per_class_dice.iter().sum::<f64>() / n,
        mean_hd95: per_class_hd95.iter().sum::<f64>() / n,
        classes,
        per_class_dice,
        per_class_hd95,
    })
}

/// Run a predictor over a dataset (optionally sharded across threads) and
/// score the argmax predictions.
///
/// Results are merged by sample index, so the report is identical for any
/// thread count.
pub fn evaluate_dataset<T, F>(
    predict: F,
    images: &[Tensor<T>],
    gts: &[LabelMap],
    n_classes: usize,
    threads: usize,
    spacing: f64,
) -> Result<MetricsReport>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>> + Sync,
{
    if images.is_empty() || images.len() != gts.len() {
        return Err(Error::EmptyDataset);
    }
    let threads = threads.max(1).min(images.len());
    let mut preds: Vec<Option<LabelMap>> = vec![None; images.len()];

    if threads == 1 {
        for (i, image) in images.iter().enumerate() {
            preds[i] = Some(LabelMap::from_logits(&predict(image)?)?);
        }
    } else {
        let chunk = images.len().div_ceil(threads);
        let results: Vec<Result<Vec<(usize, LabelMap)>>> = std::thread::scope(|scope| {
            let predict = &predict;
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let lo = t * chunk;
                    let hi = ((t + 1) * chunk).min(images.len());
                    let slice = &images[lo..hi];
                    scope.spawn(move || {
                        slice
                            .iter()
                            .enumerate()
                            .map(|(off, image)| {
                                Ok((lo + off, LabelMap::from_logits(&predict(image)?)?))
                            })
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        });
        for chunk_result in results {
            for (idx, pred) in chunk_result? {
                preds[idx] = Some(pred);
            }
        }
    }

    let preds: Vec<LabelMap> = preds.into_iter().map(|p| p.expect("filled")).collect();
    evaluate_labelmaps(&preds, gts, n_classes, spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, data: &[u8]) -> LabelMap {
        LabelMap::from_vec(h, w, data.to_vec()).unwrap()
    }

    fn mask_from(h: usize, w: usize, pixels: &[(usize, usize)]) -> Mask {
        let mut data = vec![false; h * w];
        for &(y, x) in pixels {
            data[y * w + x] = true;
        }
        Mask::from_vec(h, w, data).unwrap()
    }

    // ── independent oracles ───────────────────────────────────────────

    /// Brute-force Dice straight from the definition.
    fn oracle_dice(pred: &LabelMap, gt: &LabelMap, class: u8) -> f64 {
        let p: Vec<bool> = pred.data().iter().map(|&v| v == class).collect();
        let g: Vec<bool> = gt.data().iter().map(|&v| v == class).collect();
        let np = p.iter().filter(|&&v| v).count();
        let ng = g.iter().filter(|&&v| v).count();
        let ni = p.iter().zip(&g).filter(|(&a, &b)| a && b).count();
        if np == 0 && ng == 0 {
            return 1.0;
        }
        if np == 0 || ng == 0 {
            return 0.0;
        }
        2.0 * ni as f64 / (np + ng) as f64
    }

    /// Brute-force HD95: explicit all-pairs distance matrix and explicit
    /// nearest-rank percentile, sharing only the boundary definition.
    fn oracle_hd95(a: &Mask, b: &Mask) -> f64 {
        let (h, w) = a.shape();
        match (a.is_empty_mask(), b.is_empty_mask()) {
            (true, true) => return 0.0,
            (true, false) | (false, true) => {
                return (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).sqrt()
            }
            _ => {}
        }
        let ba = a.boundary();
        let bb = b.boundary();
        let all_pairs: Vec<Vec<f64>> = ba
            .iter()
            .map(|&(ay, ax)| {
                bb.iter()
                    .map(|&(by, bx)| {
                        let dy = ay as f64 - by as f64;
                        let dx = ax as f64 - bx as f64;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .collect()
            })
            .collect();
        let directed = |matrix: &Vec<Vec<f64>>| -> f64 {
            let mut mins: Vec<f64> = matrix
                .iter()
                .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
                .collect();
            mins.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let n = mins.len();
            let rank = (0.95 * n as f64).ceil() as usize;
            mins[rank - 1]
        };
        let transposed: Vec<Vec<f64>> = (0..bb.len())
            .map(|j| (0..ba.len()).map(|i| all_pairs[i][j]).collect())
            .collect();
        directed(&all_pairs).max(directed(&transposed))
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
        // Mix of blobs and salt noise to exercise odd boundary shapes.
        let mut data = vec![false; h * w];
        for _ in 0..rng.gen_range(0..3) {
            let cy = rng.gen_range(0..h) as i64;
            let cx = rng.gen_range(0..w) as i64;
            let ry = rng.gen_range(1..=(h as i64 / 2).max(1));
            let rx = rng.gen_range(1..=(w as i64 / 2).max(1));
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let fy = (y - cy) as f64 / ry as f64;
                    let fx = (x - cx) as f64 / rx as f64;
                    if fy * fy + fx * fx <= 1.0 {
                        data[(y * w as i64 + x) as usize] = true;
                    }
                }
            }
        }
        for v in data.iter_mut() {
            if rng.gen_bool(0.02) {
                *v = !*v;
            }
        }
        Mask::from_vec(h, w, data).unwrap()
    }

    // ── dice ──────────────────────────────────────────────────────────

    #[test]
    fn dice_identical_nonempty_masks() {
        let m = map(2, 2, &[1, 1, 0, 0]);
        assert_eq!(dice(&m, &m, 1).unwrap(), 1.0);
    }

    #[test]
    fn dice_disjoint_masks() {
        let a = map(2, 2, &[1, 0, 0, 0]);
        let b = map(2, 2, &[0, 0, 0, 1]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_hand_counted_case() {
        // |P| = 4, |G| = 2, overlap 2: dice = 2*2 / 6 = 2/3.
        let pred = map(3, 3, &[1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let gt = map(3, 3, &[1, 1, 0, 0, 0, 0, 0, 0, 0]);
        let d = dice(&pred, &gt, 1).unwrap();
        assert_eq!(d, 2.0 * 2.0 / 6.0);
        assert!((d - 0.6667).abs() < 5e-5);
    }

    #[test]
    fn dice_empty_conventions() {
        let empty = map(2, 2, &[0, 0, 0, 0]);
        let full = map(2, 2, &[1, 1, 0, 0]);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice(&empty, &full, 1).unwrap(), 0.0);
        assert_eq!(dice(&full, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_rejects_shape_mismatch() {
        let a = map(2, 2, &[0; 4]);
        let b = map(2, 3, &[0; 6]);
        assert!(dice(&a, &b, 1).is_err());
    }

    #[test]
    fn dice_symmetry_and_bounds_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = map(
                8,
                8,
                &(0..64).map(|_| rng.gen_range(0..2u8)).collect::<Vec<_>>(),
            );
            let b = map(
                8,
                8,
                &(0..64).map(|_| rng.gen_range(0..2u8)).collect::<Vec<_>>(),
            );
            let dab = dice(&a, &b, 1).unwrap();
            let dba = dice(&b, &a, 1).unwrap();
            assert_eq!(dab, dba);
            assert!((0.0..=1.0).contains(&dab));
            assert_eq!(dab, oracle_dice(&a, &b, 1));
        }
    }

    // ── hd95 ──────────────────────────────────────────────────────────

    #[test]
    fn hd95_identical_masks_is_zero() {
        let m = mask_from(8, 8, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(hd95(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn hd95_single_pixels_is_euclidean_distance() {
        let a = mask_from(8, 8, &[(0, 0)]);
        let b = mask_from(8, 8, &[(3, 4)]);
        assert_eq!(hd95(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn hd95_empty_conventions() {
        let empty = mask_from(64, 64, &[]);
        let something = mask_from(64, 64, &[(10, 10)]);
        assert_eq!(hd95(&empty, &empty).unwrap(), 0.0);
        let expect = (63.0f64 * 63.0 + 63.0 * 63.0).sqrt();
        assert_eq!(hd95(&empty, &something).unwrap(), expect);
        assert!((expect - 89.09545442950498).abs() < 1e-10);
    }

    #[test]
    fn hd95_matches_oracle_on_200_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..200 {
            let h = rng.gen_range(2..=32);
            let w = rng.gen_range(2..=32);
            let a = random_mask(&mut rng, h, w);
            let b = random_mask(&mut rng, h, w);
            let ours = hd95(&a, &b).unwrap();
            let oracle = oracle_hd95(&a, &b);
            assert_eq!(ours, oracle, "case {case} on {h}x{w}");
        }
    }

    #[test]
    fn hd95_symmetry_and_translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..30 {
            let a = random_mask(&mut rng, 16, 16);
            let b = random_mask(&mut rng, 16, 16);
            assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
        }
        // Translating both masks by the same in-bounds offset leaves the
        // distance unchanged.
        let a = mask_from(16, 16, &[(2, 2), (2, 3), (5, 4)]);
        let b = mask_from(16, 16, &[(3, 3), (4, 4)]);
        let shift = |m: &Mask, dy: usize, dx: usize| {
            let (h, w) = m.shape();
            let mut pixels = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if m.data[y * w + x] {
                        pixels.push((y + dy, x + dx));
                    }
                }
            }
            mask_from(h, w, &pixels)
        };
        assert_eq!(
            hd95(&a, &b).unwrap(),
            hd95(&shift(&a, 4, 7), &shift(&b, 4, 7)).unwrap()
        );
    }

    #[test]
    fn hd95_bounded_by_exact_hausdorff() {
        // The exact symmetric Hausdorff distance is the directed max of
        // nearest-neighbor distances; the 95th percentile can only drop
        // values, and equals it while ceil(0.95 n) = n for both directed
        // sets (n <= 19 boundary pixels).
        let hd100 = |a: &Mask, b: &Mask| -> f64 {
            let ba = a.boundary();
            let bb = b.boundary();
            let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
                from.iter()
                    .map(|&(ay, ax)| {
                        to.iter()
                            .map(|&(by, bx)| {
                                let dy = ay as f64 - by as f64;
                                let dx = ax as f64 - bx as f64;
                                (dy * dy + dx * dx).sqrt()
                            })
                            .fold(f64::INFINITY, f64::min)
                    })
                    .fold(0.0, f64::max)
            };
            directed(&ba, &bb).max(directed(&bb, &ba))
        };

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let a = random_mask(&mut rng, 12, 12);
            let b = random_mask(&mut rng, 12, 12);
            if a.is_empty_mask() || b.is_empty_mask() {
                continue;
            }
            let p95 = hd95(&a, &b).unwrap();
            let p100 = hd100(&a, &b);
            assert!(p95 <= p100 + 1e-12);
            let na = a.boundary().len();
            let nb = b.boundary().len();
            if percentile_index(na) == na - 1 && percentile_index(nb) == nb - 1 {
                assert_eq!(p95, p100);
            }
        }
    }

    #[test]
    fn percentile_rule_is_lower_nearest_rank() {
        // ceil(0.95 n) - 1, checked against the f64 formula.
        for n in 1..200 {
            let expect = (0.95 * n as f64).ceil() as usize - 1;
            assert_eq!(percentile_index(n), expect, "n = {n}");
        }
        // Equality with the max holds exactly up to n = 19.
        assert_eq!(percentile_index(19), 18);
        assert_eq!(percentile_index(20), 18);
    }

    #[test]
    fn boundary_includes_image_edge_pixels() {
        // A mask filling the whole image: every pixel with an image-edge
        // side is boundary, interior pixels are not.
        let full = Mask::from_vec(4, 4, vec![true; 16]).unwrap();
        let boundary = full.boundary();
        assert_eq!(boundary.len(), 12);
        assert!(!boundary.contains(&(1, 1)));
        assert!(boundary.contains(&(0, 0)));
    }

    // ── dataset evaluation ────────────────────────────────────────────

    #[test]
    fn evaluate_perfect_predictions() {
        let gts = vec![
            map(4, 4, &[0, 1, 1, 0, 0, 1, 1, 0, 2, 2, 0, 0, 2, 2, 0, 0]),
            map(4, 4, &[3, 3, 0, 0, 3, 3, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1]),
        ];
        let report = evaluate_labelmaps(&gts, &gts, 4, 1.0).unwrap();
        assert_eq!(report.mean_dice, 1.0);
        assert_eq!(report.mean_hd95, 0.0);
        assert_eq!(report.classes, vec![1, 2, 3]);
    }

    #[test]
    fn evaluate_constant_background_scores_zero_dice() {
        let gt = map(4, 4, &[0, 1, 1, 0, 0, 1, 1, 0, 2, 2, 0, 0, 2, 2, 0, 0]);
        let pred = map(4, 4, &[0; 16]);
        let report = evaluate_labelmaps(&[pred], &[gt], 3, 1.0).unwrap();
        assert_eq!(report.per_class_dice, vec![0.0, 0.0]);
        assert_eq!(report.mean_dice, 0.0);
    }

    #[test]
    fn evaluate_three_sample_hand_check() {
        // Class 1 appears in samples 0 and 1, class 2 only in sample 2.
        let gts = vec![
            map(2, 2, &[1, 1, 0, 0]),
            map(2, 2, &[1, 0, 0, 0]),
            map(2, 2, &[2, 2, 2, 2]),
        ];
        let preds = vec![
            map(2, 2, &[1, 0, 0, 0]), // dice 2*1/3
            map(2, 2, &[1, 0, 0, 0]), // dice 1
            map(2, 2, &[2, 2, 0, 0]), // dice 2*2/6
        ];
        let report = evaluate_labelmaps(&preds, &gts, 3, 1.0).unwrap();
        let d1 = (2.0 / 3.0 + 1.0) / 2.0;
        let d2 = 2.0 / 3.0;
        assert_eq!(report.classes, vec![1, 2]);
        assert_eq!(report.per_class_dice, vec![d1, d2]);
        assert_eq!(report.mean_dice, (d1 + d2) / 2.0);

        // Sample 1: pred boundary {(0,0)}, gt boundary {(0,0)}; sample 0:
        // pred {(0,0)} vs gt {(0,0),(0,1)} -> directed maxes 0 and 1.
        assert_eq!(report.per_class_hd95[0], 0.5);
        // Sample 2: full-image gt boundary vs 2-pixel pred: directed
        // percentile from gt boundary is 1 (bottom row), from pred is 0.
        assert_eq!(report.per_class_hd95[1], 1.0);
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        assert!(matches!(
            evaluate_labelmaps(&[], &[], 3, 1.0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn evaluate_dataset_is_thread_count_invariant() {
        // Identity "model": logits one-hot from the ground truth of the
        // previous sample index, making predictions imperfect but fixed.
        let gts: Vec<LabelMap> = (0..6)
            .map(|i| {
                let mut data = vec![0u8; 16];
                data[i % 16] = 1;
                data[(3 * i + 2) % 16] = 2;
                map(4, 4, &data)
            })
            .collect();
        let images: Vec<Tensor<f64>> = gts
            .iter()
            .map(|gt| {
                let mut logits = Tensor::zeros(vec![3, 4, 4]);
                for (p, &c) in gt.data().iter().enumerate() {
                    logits.data_mut()[c as usize * 16 + p] = 5.0;
                }
                logits
            })
            .collect();
        let predict = |image: &Tensor<f64>| Ok(image.clone());
        let one = evaluate_dataset(predict, &images, &gts, 3, 1, 1.0).unwrap();
        let four = evaluate_dataset(predict, &images, &gts, 3, 4, 1.0).unwrap();
        assert_eq!(one, four);
        assert_eq!(one.mean_dice, 1.0);
    }

    #[test]
    fn csv_has_six_decimal_places_and_mean_row() {
        let report = MetricsReport {
            classes: vec![1, 2],
            per_class_dice: vec![2.0 / 3.0, 1.0],
            per_class_hd95: vec![5.0, 0.0],
            mean_dice: 5.0 / 6.0,
            mean_hd95: 2.5,
        };
        let csv = report.to_csv();
        let expect = "class_id,dice,hd95\n1,0.666667,5.000000\n2,1.000000,0.000000\nmean,0.833333,2.500000\n";
        assert_eq!(csv, expect);
    }
}
