//! Counting and detection metrics: MAE, RMSE, and average precision.

use crate::decode::{iou, Detection};
use crate::error::{Error, Result};
use crate::targets::BBox;

/// Evaluation summary over one split.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub ap: f64,
    /// (predicted count, ground-truth count) per image, dataset order.
    pub per_image: Vec<(usize, usize)>,
}

/// Mean absolute error and root-mean-square error between per-image counts.
pub fn count_metrics(pred_counts: &[usize], gt_counts: &[usize]) -> Result<(f64, f64)> {
    if pred_counts.is_empty() || pred_counts.len() != gt_counts.len() {
        return Err(Error::InvalidArgument {
            op: "count_metrics",
            msg: format!(
                "need equal non-empty sequences, got {} and {}",
                pred_counts.len(),
                gt_counts.len()
            ),
        });
    }
    let n = pred_counts.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (&p, &g) in pred_counts.iter().zip(gt_counts) {
        let d = p as f64 - g as f64;
        abs_sum += d.abs();
        sq_sum += d * d;
    }
    Ok((abs_sum / n, (sq_sum / n).sqrt()))
}

/// Average precision at one IoU threshold, all-point interpolation.
///
/// Detections are (image id, detection); ground truths are (image id, box).
/// Matching is greedy in descending score order: each detection takes the
/// unmatched same-image same-class ground truth with the highest IoU at or
/// above the threshold.
pub fn average_precision(
    detections: &[(usize, Detection)],
    ground_truths: &[(usize, BBox)],
    iou_threshold: f64,
) -> Result<f64> {
    if ground_truths.is_empty() {
        return Err(Error::InvalidArgument {
            op: "average_precision",
            msg: "recall is undefined with zero ground-truth boxes".into(),
        });
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .1
            .score
            .partial_cmp(&detections[a].1.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| detections[a].0.cmp(&detections[b].0))
            .then_with(|| a.cmp(&b))
    });
    let mut gt_taken = vec![false; ground_truths.len()];
    let mut tp_flags = Vec::with_capacity(detections.len());
    for &di in &order {
        let (img, det) = &detections[di];
        let dbox = det.to_bbox();
        let mut best: Option<(f64, usize)> = None;
        for (gi, (gimg, gbox)) in ground_truths.iter().enumerate() {
            if gt_taken[gi] || gimg != img || gbox.class_id != det.class_id {
                continue;
            }
            let v = iou(&dbox, gbox);
            if v >= iou_threshold {
                let better = match best {
                    None => true,
                    Some((bv, _)) => v > bv,
                };
                if better {
                    best = Some((v, gi));
                }
            }
        }
        match best {
            Some((_, gi)) => {
                gt_taken[gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    Ok(ap_from_tp_flags(&tp_flags, ground_truths.len()))
}

/// Area under the all-point-interpolated precision/recall curve given
/// ranked true-positive flags.
pub fn ap_from_tp_flags(tp_flags: &[bool], num_gt: usize) -> f64 {
    debug_assert!(num_gt > 0);
    let n = tp_flags.len();
    if n == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &f) in tp_flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // monotone envelope from the right
    for i in (0..n - 1).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * precisions[i];
            prev_recall = recalls[i];
        }
    }
    ap
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(score: f64, cx: f64) -> Detection {
        Detection {
            cx,
            cy: 5.0,
            w: 4.0,
            h: 4.0,
            score,
            class_id: 0,
        }
    }

    fn gt(cx: f64) -> BBox {
        BBox {
            cx,
            cy: 5.0,
            w: 4.0,
            h: 4.0,
            class_id: 0,
        }
    }

    #[test]
    fn identical_counts_are_zero_error() {
        let (mae, rmse) = count_metrics(&[3, 5, 9], &[3, 5, 9]).unwrap();
        assert_eq!((mae, rmse), (0.0, 0.0));
    }

    #[test]
    fn count_metrics_known_case() {
        let (mae, rmse) = count_metrics(&[3, 5], &[4, 5]).unwrap();
        assert!((mae - 0.5).abs() < 1e-12);
        assert!((rmse - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((rmse - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn count_metrics_rejects_empty_or_ragged() {
        assert!(count_metrics(&[], &[]).is_err());
        assert!(count_metrics(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn rmse_at_least_mae() {
        let (mae, rmse) = count_metrics(&[1, 9, 4], &[2, 3, 4]).unwrap();
        assert!(rmse >= mae);
    }

    #[test]
    fn perfect_matching_is_ap_one() {
        let dets = vec![(0, det(0.9, 5.0)), (1, det(0.8, 10.0))];
        let gts = vec![(0, gt(5.0)), (1, gt(10.0))];
        assert_eq!(average_precision(&dets, &gts, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn true_positive_first_is_ap_one() {
        // one gt, two detections, the higher-scored one is the true positive
        let dets = vec![(0, det(0.9, 5.0)), (0, det(0.5, 50.0))];
        let gts = vec![(0, gt(5.0))];
        assert_eq!(average_precision(&dets, &gts, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn false_positive_first_is_ap_half() {
        // one gt, two detections, the higher-scored one is a false positive
        let dets = vec![(0, det(0.9, 50.0)), (0, det(0.5, 5.0))];
        let gts = vec![(0, gt(5.0))];
        assert_eq!(average_precision(&dets, &gts, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn ap_rejects_zero_ground_truth() {
        let dets = vec![(0, det(0.9, 5.0))];
        assert!(average_precision(&dets, &[], 0.5).is_err());
    }

    #[test]
    fn ap_invariant_to_monotone_score_rescaling() {
        let dets: Vec<(usize, Detection)> = vec![
            (0, det(0.9, 5.0)),
            (0, det(0.7, 50.0)),
            (1, det(0.6, 10.0)),
            (1, det(0.3, 90.0)),
        ];
        let gts = vec![(0, gt(5.0)), (1, gt(10.0)), (1, gt(30.0))];
        let base = average_precision(&dets, &gts, 0.5).unwrap();
        let rescaled: Vec<(usize, Detection)> = dets
            .iter()
            .map(|(i, d)| {
                let mut d2 = *d;
                d2.score = (d.score * 3.0).tanh() * 0.5 + 0.25; // strictly monotone
                (*i, d2)
            })
            .collect();
        let after = average_precision(&rescaled, &gts, 0.5).unwrap();
        assert!((base - after).abs() < 1e-15);
    }
}
