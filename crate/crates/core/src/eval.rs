//! Lane-detection metrics: TuSimple point accuracy and lane FP/FN, mask
//! mIOU, distance-binned variants of both, and the under-horizon filter.
//!
//! Conventions: gt x = -2 marks an absent sample point and is excluded
//! everywhere; lane matching is greedy one-to-one by descending
//! correct-point count with ties broken by lane index; accuracy averages
//! C/S over images; ratios with empty denominators are 0.

use crate::scenedata::{SceneConfig, TuSimpleRecord};

pub const ABSENT: f64 = -2.0;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("row mismatch: {0}")]
    RowMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("meter bins need scene geometry")]
    MissingGeometry,
    #[error("bin edges must be strictly increasing and at least two")]
    BadBins,
}

/// Raw tallies behind the TuSimple metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalCounts {
    /// Per image: (correct points C, gt points S).
    pub per_image: Vec<(usize, usize)>,
    pub false_pred: usize,
    pub n_pred: usize,
    pub missed: usize,
    pub n_gt: usize,
}

/// Per-bin metric values with their support counts.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceBins {
    /// len = bins + 1, strictly increasing.
    pub edges: Vec<f64>,
    pub metric: Vec<f64>,
    pub support: Vec<usize>,
}

impl DistanceBins {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,metric,support\n");
        for i in 0..self.metric.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                self.metric[i],
                self.support[i]
            ));
        }
        out
    }
}

fn valid(x: f64) -> bool {
    x != ABSENT
}

fn check_rows(pred: &[Vec<f64>], gt: &TuSimpleRecord, image: usize) -> Result<(), EvalError> {
    let rows = gt.h_samples.len();
    for (i, lane) in pred.iter().enumerate() {
        if lane.len() != rows {
            return Err(EvalError::RowMismatch(format!(
                "image {image}: predicted lane {i} has {} points, gt has {rows} rows",
                lane.len()
            )));
        }
    }
    for (i, lane) in gt.lanes.iter().enumerate() {
        if lane.len() != rows {
            return Err(EvalError::RowMismatch(format!(
                "image {image}: gt lane {i} has {} points against {rows} rows",
                lane.len()
            )));
        }
    }
    Ok(())
}

/// Greedy one-to-one matching. Returns (pred index, gt index, correct count)
/// triples, sorted by assignment order.
fn match_lanes(
    pred: &[Vec<f64>],
    gt: &[Vec<f64>],
    threshold: f64,
) -> Vec<(usize, usize, usize)> {
    let mut correct = vec![vec![0usize; gt.len()]; pred.len()];
    for (p, pl) in pred.iter().enumerate() {
        for (g, gl) in gt.iter().enumerate() {
            correct[p][g] = pl
                .iter()
                .zip(gl)
                .filter(|&(&px, &gx)| valid(gx) && valid(px) && (px - gx).abs() <= threshold)
                .count();
        }
    }
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for p in 0..pred.len() {
            if used_p[p] {
                continue;
            }
            for g in 0..gt.len() {
                if used_g[g] {
                    continue;
                }
                let c = correct[p][g];
                if best.map_or(true, |(_, _, bc)| c > bc) {
                    best = Some((p, g, c));
                }
            }
        }
        match best {
            Some((p, g, c)) if c > 0 => {
                used_p[p] = true;
                used_g[g] = true;
                pairs.push((p, g, c));
            }
            _ => break,
        }
    }
    pairs
}

fn gt_points(lane: &[f64]) -> usize {
    lane.iter().filter(|&&x| valid(x)).count()
}

/// Point accuracy (mean over images of C/S) plus the raw counts. Images with
/// no valid gt points contribute nothing.
pub fn tusimple_accuracy(
    preds: &[Vec<Vec<f64>>],
    gts: &[TuSimpleRecord],
    threshold: f64,
) -> Result<(f64, EvalCounts), EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} prediction sets vs {} gt records",
            preds.len(),
            gts.len()
        )));
    }
    let mut counts = EvalCounts::default();
    for (i, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        check_rows(pred, gt, i)?;
        let s: usize = gt.lanes.iter().map(|l| gt_points(l)).sum();
        let c: usize = match_lanes(pred, &gt.lanes, threshold)
            .iter()
            .map(|&(_, _, c)| c)
            .sum();
        counts.per_image.push((c, s));
    }
    let scored: Vec<f64> = counts
        .per_image
        .iter()
        .filter(|&&(_, s)| s > 0)
        .map(|&(c, s)| c as f64 / s as f64)
        .collect();
    let acc = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok((acc, counts))
}

/// Lane-level FP and FN rates. A predicted lane counts as false unless its
/// matched gt lane gets at least `lane_match_ratio` of its points right; a
/// gt lane not hit that well is missed. Empty denominators give 0.
pub fn tusimple_fp_fn(
    preds: &[Vec<Vec<f64>>],
    gts: &[TuSimpleRecord],
    threshold: f64,
    lane_match_ratio: f64,
) -> Result<(f64, f64, EvalCounts), EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} prediction sets vs {} gt records",
            preds.len(),
            gts.len()
        )));
    }
    let mut counts = EvalCounts::default();
    for (i, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        check_rows(pred, gt, i)?;
        // gt lanes with no valid points are phantoms and play no part
        let live_gt: Vec<usize> = (0..gt.lanes.len())
            .filter(|&g| gt_points(&gt.lanes[g]) > 0)
            .collect();
        let pairs = match_lanes(pred, &gt.lanes, threshold);
        let mut gt_hit = vec![false; gt.lanes.len()];
        let mut pred_ok = vec![false; pred.len()];
        for &(p, g, c) in &pairs {
            let s = gt_points(&gt.lanes[g]);
            if s > 0 && c as f64 / s as f64 >= lane_match_ratio {
                gt_hit[g] = true;
                pred_ok[p] = true;
            }
        }
        counts.n_pred += pred.len();
        counts.false_pred += pred_ok.iter().filter(|ok| !**ok).count();
        counts.n_gt += live_gt.len();
        counts.missed += live_gt.iter().filter(|&&g| !gt_hit[g]).count();
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok((
        ratio(counts.false_pred, counts.n_pred),
        ratio(counts.missed, counts.n_gt),
        counts,
    ))
}

/// Per-class IOU (None where the union is empty) and their mean. Pixels
/// whose gt equals `ignore` are dropped from both masks.
pub fn miou(
    pred: &[u8],
    gt: &[u8],
    num_classes: usize,
    ignore: Option<u8>,
) -> Result<(Vec<Option<f64>>, f64), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "pred {} pixels vs gt {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(EvalError::ShapeMismatch(format!(
                "class id out of range: pred {p}, gt {g}, {num_classes} classes"
            )));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok((per_class, mean))
}

/// Distance axis for binned metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinSpace {
    /// Pixel rows measured upward from the image bottom.
    PixelsFromBottom,
    /// Ground range in meters via the scene camera.
    Meters,
}

/// Evenly spaced edges covering [0, limit] with the given step (the last bin
/// absorbs the remainder).
pub fn even_edges(limit: f64, step: f64) -> Vec<f64> {
    let mut edges = vec![0.0];
    let mut e = step;
    while e < limit {
        edges.push(e);
        e += step;
    }
    edges.push(limit);
    edges
}

fn check_edges(edges: &[f64]) -> Result<(), EvalError> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::BadBins);
    }
    Ok(())
}

fn bin_of(edges: &[f64], v: f64) -> Option<usize> {
    if v < edges[0] || v > edges[edges.len() - 1] {
        return None;
    }
    // last edge closes its bin so supports partition exactly
    let idx = edges[..edges.len() - 1]
        .iter()
        .rposition(|&e| v >= e)
        .unwrap_or(0);
    Some(idx)
}

fn row_distance(
    space: BinSpace,
    row: f64,
    image_height: u32,
    scene: Option<&SceneConfig<f64>>,
) -> Result<Option<f64>, EvalError> {
    match space {
        BinSpace::PixelsFromBottom => Ok(Some(image_height as f64 - 1.0 - row)),
        BinSpace::Meters => {
            let scene = scene.ok_or(EvalError::MissingGeometry)?;
            Ok(scene.row_to_range(row))
        }
    }
}

/// Point accuracy per distance bin, using the same per-image lane matching
/// as [`tusimple_accuracy`]. Supports partition the valid gt points that
/// fall inside the edges.
pub fn distance_binned_accuracy(
    preds: &[Vec<Vec<f64>>],
    gts: &[TuSimpleRecord],
    threshold: f64,
    edges: &[f64],
    space: BinSpace,
    image_height: u32,
    scene: Option<&SceneConfig<f64>>,
) -> Result<DistanceBins, EvalError> {
    check_edges(edges)?;
    if preds.len() != gts.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} prediction sets vs {} gt records",
            preds.len(),
            gts.len()
        )));
    }
    let bins = edges.len() - 1;
    let mut correct = vec![0usize; bins];
    let mut total = vec![0usize; bins];
    for (i, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        check_rows(pred, gt, i)?;
        let pairs = match_lanes(pred, &gt.lanes, threshold);
        let matched_pred: Vec<Option<usize>> = (0..gt.lanes.len())
            .map(|g| pairs.iter().find(|&&(_, pg, _)| pg == g).map(|&(p, _, _)| p))
            .collect();
        for (g, gl) in gt.lanes.iter().enumerate() {
            for (r, &gx) in gl.iter().enumerate() {
                if !valid(gx) {
                    continue;
                }
                let row = gt.h_samples[r] as f64;
                let Some(dist) = row_distance(space, row, image_height, scene)? else {
                    continue;
                };
                let Some(b) = bin_of(edges, dist) else { continue };
                total[b] += 1;
                if let Some(p) = matched_pred[g] {
                    let px = pred[p][r];
                    if valid(px) && (px - gx).abs() <= threshold {
                        correct[b] += 1;
                    }
                }
            }
        }
    }
    let metric = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    Ok(DistanceBins { edges: edges.to_vec(), metric, support: total })
}

/// mIOU per distance bin over row-major masks of the given width.
#[allow(clippy::too_many_arguments)]
pub fn distance_binned_miou(
    preds: &[Vec<u8>],
    gts: &[Vec<u8>],
    width: usize,
    num_classes: usize,
    ignore: Option<u8>,
    edges: &[f64],
    space: BinSpace,
    scene: Option<&SceneConfig<f64>>,
) -> Result<DistanceBins, EvalError> {
    check_edges(edges)?;
    if preds.len() != gts.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} predicted masks vs {} gt masks",
            preds.len(),
            gts.len()
        )));
    }
    let bins = edges.len() - 1;
    let mut inter = vec![vec![0usize; num_classes]; bins];
    let mut union = vec![vec![0usize; num_classes]; bins];
    let mut support = vec![0usize; bins];
    for (pm, gm) in preds.iter().zip(gts) {
        if pm.len() != gm.len() || pm.len() % width != 0 {
            return Err(EvalError::ShapeMismatch(format!(
                "mask sizes {} vs {} (width {width})",
                pm.len(),
                gm.len()
            )));
        }
        let height = (pm.len() / width) as u32;
        for row in 0..height as usize {
            let Some(dist) = row_distance(space, row as f64, height, scene)? else {
                continue;
            };
            let Some(b) = bin_of(edges, dist) else { continue };
            for col in 0..width {
                let (p, g) = (pm[row * width + col], gm[row * width + col]);
                if Some(g) == ignore {
                    continue;
                }
                let (p, g) = (p as usize, g as usize);
                if p >= num_classes || g >= num_classes {
                    return Err(EvalError::ShapeMismatch(format!(
                        "class id out of range: pred {p}, gt {g}"
                    )));
                }
                support[b] += 1;
                if p == g {
                    inter[b][p] += 1;
                    union[b][p] += 1;
                } else {
                    union[b][p] += 1;
                    union[b][g] += 1;
                }
            }
        }
    }
    let metric = (0..bins)
        .map(|b| {
            let ious: Vec<f64> = (0..num_classes)
                .filter(|&c| union[b][c] > 0)
                .map(|c| inter[b][c] as f64 / union[b][c] as f64)
                .collect();
            if ious.is_empty() {
                0.0
            } else {
                ious.iter().sum::<f64>() / ious.len() as f64
            }
        })
        .collect();
    Ok(DistanceBins { edges: edges.to_vec(), metric, support })
}

/// Marks gt points above the horizon row absent, so metrics only score the
/// ground region.
pub fn under_horizon_records(records: &[TuSimpleRecord], horizon_row: f64) -> Vec<TuSimpleRecord> {
    records
        .iter()
        .map(|rec| {
            let lanes = rec
                .lanes
                .iter()
                .map(|lane| {
                    lane.iter()
                        .zip(&rec.h_samples)
                        .map(|(&x, &row)| if (row as f64) < horizon_row { ABSENT } else { x })
                        .collect()
                })
                .collect();
            TuSimpleRecord { lanes, h_samples: rec.h_samples.clone(), raw_file: rec.raw_file.clone() }
        })
        .collect()
}

/// Replaces gt mask rows above the horizon with the ignore id.
pub fn under_horizon_mask(mask: &[u8], width: usize, horizon_row: f64, ignore: u8) -> Vec<u8> {
    let mut out = mask.to_vec();
    let height = mask.len() / width;
    for row in 0..height {
        if (row as f64) < horizon_row {
            out[row * width..(row + 1) * width].fill(ignore);
        }
    }
    out
}

/// Reads lane x-lists off an instance mask: per instance id (ascending) and
/// per sample row, the mean column of that id's pixels, or -2 when absent.
pub fn lanes_from_instance_map(
    instance: &[u8],
    width: usize,
    h_samples: &[u32],
) -> Vec<Vec<f64>> {
    let mut ids: Vec<u8> = instance.iter().copied().filter(|&i| i > 0).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.iter()
        .map(|&id| {
            h_samples
                .iter()
                .map(|&row| {
                    let base = row as usize * width;
                    let cols: Vec<usize> = (0..width)
                        .filter(|&c| base + c < instance.len() && instance[base + c] == id)
                        .collect();
                    if cols.is_empty() {
                        ABSENT
                    } else {
                        cols.iter().sum::<usize>() as f64 / cols.len() as f64
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(lanes: Vec<Vec<f64>>, rows: Vec<u32>) -> TuSimpleRecord {
        TuSimpleRecord { lanes, h_samples: rows, raw_file: String::new() }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = vec![record(vec![vec![10.0, 20.0], vec![50.0, 60.0]], vec![80, 88])];
        let preds = vec![gt[0].lanes.clone()];
        let (acc, _) = tusimple_accuracy(&preds, &gt, 20.0).unwrap();
        assert_eq!(acc, 1.0);
        let (fp, fnr, _) = tusimple_fp_fn(&preds, &gt, 20.0, 0.85).unwrap();
        assert_eq!((fp, fnr), (0.0, 0.0));
    }

    #[test]
    fn hand_counted_accuracy() {
        // oracle: |12-10| <= 5 and |31-30| <= 5 hit; |40-20| misses
        let gt = vec![record(vec![vec![10.0, 20.0, 30.0]], vec![80, 88, 96])];
        let preds = vec![vec![vec![12.0, 40.0, 31.0]]];
        let (acc, counts) = tusimple_accuracy(&preds, &gt, 5.0).unwrap();
        assert_eq!(counts.per_image, vec![(2, 3)]);
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_absent_image_is_skipped() {
        let gt = vec![
            record(vec![vec![10.0, 20.0]], vec![80, 88]),
            record(vec![vec![ABSENT, ABSENT]], vec![80, 88]),
        ];
        let preds = vec![vec![vec![10.0, 20.0]], vec![vec![1.0, 2.0]]];
        let (acc, _) = tusimple_accuracy(&preds, &gt, 5.0).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn hand_counted_fp_fn() {
        // 3 predictions, one hopeless; 4 gt lanes, two unreachable
        let rows = vec![80, 88];
        let gt = vec![record(
            vec![
                vec![10.0, 11.0],
                vec![30.0, 31.0],
                vec![60.0, 61.0],
                vec![90.0, 91.0],
            ],
            rows.clone(),
        )];
        let preds = vec![vec![
            vec![10.0, 11.0],
            vec![30.0, 31.0],
            vec![200.0, 201.0],
        ]];
        let (fp, fnr, counts) = tusimple_fp_fn(&preds, &gt, 2.0, 0.85).unwrap();
        assert_eq!(counts.false_pred, 1);
        assert_eq!(counts.n_pred, 3);
        assert_eq!(counts.missed, 2);
        assert_eq!(counts.n_gt, 4);
        assert!((fp - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(fnr, 0.5);
    }

    #[test]
    fn zero_predictions_convention() {
        let gt = vec![record(vec![vec![10.0], vec![20.0]], vec![80])];
        let preds = vec![vec![]];
        let (fp, fnr, _) = tusimple_fp_fn(&preds, &gt, 5.0, 0.85).unwrap();
        assert_eq!(fp, 0.0); // 0/0
        assert_eq!(fnr, 1.0);
    }

    #[test]
    fn matching_is_order_independent() {
        let gt = vec![record(
            vec![vec![10.0, 11.0], vec![50.0, 51.0], vec![90.0, 91.0]],
            vec![80, 88],
        )];
        let base = vec![vec![10.0, 11.0], vec![50.5, 51.5], vec![89.0, 90.0]];
        let mut permuted = base.clone();
        permuted.swap(0, 2);
        permuted.swap(1, 2);
        let (a1, _) = tusimple_accuracy(&[base.clone()], &gt, 2.0).unwrap();
        let (a2, _) = tusimple_accuracy(&[permuted.clone()], &gt, 2.0).unwrap();
        assert_eq!(a1, a2);
        let (fp1, fn1, _) = tusimple_fp_fn(&[base], &gt, 2.0, 0.85).unwrap();
        let (fp2, fn2, _) = tusimple_fp_fn(&[permuted], &gt, 2.0, 0.85).unwrap();
        assert_eq!((fp1, fn1), (fp2, fn2));
    }

    #[test]
    fn row_mismatch_detected() {
        let gt = vec![record(vec![vec![10.0, 20.0]], vec![80, 88])];
        let preds = vec![vec![vec![10.0]]];
        assert!(matches!(
            tusimple_accuracy(&preds, &gt, 5.0),
            Err(EvalError::RowMismatch(_))
        ));
    }

    #[test]
    fn identical_masks_score_one() {
        let gt = vec![0u8, 1, 2, 1];
        let (per_class, mean) = miou(&gt, &gt, 3, None).unwrap();
        assert_eq!(per_class, vec![Some(1.0), Some(1.0), Some(1.0)]);
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn hand_counted_miou() {
        // gt [A,A;B,B], pred [A,B;B,B]: IOU_A = 1/2, IOU_B = 2/3
        let gt = vec![0u8, 0, 1, 1];
        let pred = vec![0u8, 1, 1, 1];
        let (per_class, mean) = miou(&pred, &gt, 2, None).unwrap();
        assert_eq!(per_class[0], Some(0.5));
        assert_eq!(per_class[1], Some(2.0 / 3.0));
        assert!((mean - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let gt = vec![1u8, 1, 1, 1];
        let pred = vec![0u8, 0, 0, 0];
        let (per_class, mean) = miou(&pred, &gt, 2, None).unwrap();
        assert_eq!(per_class, vec![Some(0.0), Some(0.0)]);
        assert_eq!(mean, 0.0);
    }

    #[test]
    fn empty_union_classes_excluded() {
        let gt = vec![0u8, 0, 1, 1];
        let pred = vec![0u8, 0, 1, 0];
        let (per_class, mean) = miou(&pred, &gt, 4, None).unwrap();
        assert_eq!(per_class[2], None);
        assert_eq!(per_class[3], None);
        let expect = (2.0f64 / 3.0 + 0.5) / 2.0;
        assert!((mean - expect).abs() < 1e-12);
    }

    #[test]
    fn ignore_id_drops_pixels() {
        let gt = vec![0u8, 9, 1, 1];
        let pred = vec![0u8, 1, 1, 1];
        let (per_class, _) = miou(&pred, &gt, 2, Some(9)).unwrap();
        assert_eq!(per_class, vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn single_bin_equals_unbinned() {
        let gt = vec![record(vec![vec![10.0, 20.0, 30.0]], vec![80, 88, 96])];
        let preds = vec![vec![vec![12.0, 40.0, 31.0]]];
        let bins = distance_binned_accuracy(
            &preds,
            &gt,
            5.0,
            &[0.0, 128.0],
            BinSpace::PixelsFromBottom,
            128,
            None,
        )
        .unwrap();
        assert_eq!(bins.metric.len(), 1);
        assert!((bins.metric[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(bins.support, vec![3]);
    }

    #[test]
    fn bin_assignment_matches_reference_loop() {
        let rows = vec![56, 72, 88, 104, 120];
        let gt = vec![record(vec![rows.iter().map(|&r| r as f64).collect()], rows.clone())];
        // corrupt only the upper (far) rows
        let preds = vec![vec![vec![56.0 + 50.0, 72.0 + 50.0, 88.0, 104.0, 120.0]]];
        let edges = even_edges(128.0, 32.0);
        let bins = distance_binned_accuracy(
            &preds,
            &gt,
            5.0,
            &edges,
            BinSpace::PixelsFromBottom,
            128,
            None,
        )
        .unwrap();
        // reference: straight per-point loop
        let mut expect_total = vec![0usize; bins.metric.len()];
        let mut expect_correct = vec![0usize; bins.metric.len()];
        for (i, &row) in rows.iter().enumerate() {
            let dist = 127.0 - row as f64;
            let b = edges[..edges.len() - 1]
                .iter()
                .rposition(|&e| dist >= e)
                .unwrap();
            expect_total[b] += 1;
            if i >= 2 {
                expect_correct[b] += 1;
            }
        }
        assert_eq!(bins.support, expect_total);
        for b in 0..bins.metric.len() {
            let want = if expect_total[b] == 0 {
                0.0
            } else {
                expect_correct[b] as f64 / expect_total[b] as f64
            };
            assert_eq!(bins.metric[b], want, "bin {b}");
        }
        assert_eq!(bins.support.iter().sum::<usize>(), rows.len());
        // near bins perfect, far bins degraded
        assert_eq!(*bins.metric.first().unwrap(), 1.0);
        assert!(bins.metric.iter().rev().find(|&&m| m > 0.0).is_some());
    }

    #[test]
    fn meter_bins_require_geometry() {
        let gt = vec![record(vec![vec![10.0]], vec![80])];
        let preds = vec![vec![vec![10.0]]];
        assert!(matches!(
            distance_binned_accuracy(
                &preds,
                &gt,
                5.0,
                &[0.0, 50.0],
                BinSpace::Meters,
                128,
                None
            ),
            Err(EvalError::MissingGeometry)
        ));
        let scene = SceneConfig::toy(0);
        let bins = distance_binned_accuracy(
            &preds,
            &gt,
            5.0,
            &[0.0, 50.0],
            BinSpace::Meters,
            128,
            Some(&scene),
        )
        .unwrap();
        assert_eq!(bins.support, vec![1]);
        assert_eq!(bins.metric, vec![1.0]);
    }

    #[test]
    fn binned_miou_partitions_pixels() {
        let width = 4;
        let gt = vec![vec![1u8; 16]];
        let mut pred = vec![vec![1u8; 16]];
        pred[0][0] = 0; // one wrong pixel in the top (far) row
        let edges = vec![0.0, 2.0, 4.0];
        let bins = distance_binned_miou(
            &pred,
            &gt,
            width,
            2,
            None,
            &edges,
            BinSpace::PixelsFromBottom,
            None,
        )
        .unwrap();
        assert_eq!(bins.support.iter().sum::<usize>(), 16);
        assert_eq!(bins.metric[0], 1.0); // bottom rows clean
        assert!(bins.metric[1] < 1.0);
    }

    #[test]
    fn horizon_filter_edges() {
        let rec = record(vec![vec![10.0, 20.0, 30.0]], vec![40, 80, 120]);
        let all = under_horizon_records(&[rec.clone()], 0.0);
        assert_eq!(all[0].lanes, rec.lanes);
        let none = under_horizon_records(&[rec.clone()], 128.0);
        assert!(none[0].lanes[0].iter().all(|&x| x == ABSENT));
        let mid = under_horizon_records(&[rec], 60.0);
        assert_eq!(mid[0].lanes[0], vec![ABSENT, 20.0, 30.0]);
    }

    #[test]
    fn horizon_filter_retains_analytic_count() {
        let rows: Vec<u32> = (40..128).step_by(8).collect();
        let lane: Vec<f64> = rows.iter().map(|&r| r as f64).collect();
        let rec = record(vec![lane], rows.clone());
        let horizon = 77.5;
        let filtered = under_horizon_records(&[rec], horizon);
        let kept = filtered[0].lanes[0].iter().filter(|&&x| x != ABSENT).count();
        let expect = rows.iter().filter(|&&r| r as f64 >= horizon).count();
        assert_eq!(kept, expect);
    }

    #[test]
    fn horizon_mask_filter() {
        let mask = vec![1u8; 12]; // 3 rows by 4
        let out = under_horizon_mask(&mask, 4, 1.5, 255);
        assert_eq!(&out[..8], &[255u8; 8]); // rows 0 and 1 sit above 1.5
        assert_eq!(&out[8..], &[1u8; 4]);
    }

    #[test]
    fn lanes_from_instances() {
        let width = 6;
        let mut inst = vec![0u8; 6 * 4];
        // lane 1 occupies columns 1-2 of row 2; lane 2 column 4 of rows 2,3
        inst[2 * width + 1] = 1;
        inst[2 * width + 2] = 1;
        inst[2 * width + 4] = 2;
        inst[3 * width + 4] = 2;
        let lanes = lanes_from_instance_map(&inst, width, &[1, 2, 3]);
        assert_eq!(lanes.len(), 2);
        assert_eq!(lanes[0], vec![ABSENT, 1.5, ABSENT]);
        assert_eq!(lanes[1], vec![ABSENT, 4.0, 4.0]);
    }

    #[test]
    fn csv_layout() {
        let bins = DistanceBins {
            edges: vec![0.0, 32.0, 64.0],
            metric: vec![1.0, 0.5],
            support: vec![10, 4],
        };
        let csv = bins.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bin_lo,bin_hi,metric,support");
        assert_eq!(lines[1], "0,32,1,10");
        assert_eq!(lines[2], "32,64,0.5,4");
    }
}
