//! Peak decoding: prediction maps to discrete detections.

use crate::error::{Error, Result};
use crate::targets::{BBox, TargetMaps};

/// A decoded box in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn to_bbox(&self) -> BBox {
        BBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
            class_id: self.class_id,
        }
    }
}

/// Raw map views shared by network output and ground-truth maps.
/// `heat` is num_classes planes, `size` and `offset` two planes each,
/// all cells_h x cells_w row-major.
pub struct MapView<'a> {
    pub heat: &'a [f64],
    pub size: &'a [f64],
    pub offset: &'a [f64],
    pub cells_h: usize,
    pub cells_w: usize,
    pub num_classes: usize,
}

impl<'a> MapView<'a> {
    pub fn of_targets(t: &'a TargetMaps) -> MapView<'a> {
        MapView {
            heat: &t.heatmap,
            size: &t.size_map,
            offset: &t.offset_map,
            cells_h: t.cells_h,
            cells_w: t.cells_w,
            num_classes: t.num_classes,
        }
    }
}

// Predicted sizes can dip non-positive early in training; keep decoded
// boxes valid without disturbing exact ground-truth roundtrips.
const MIN_DECODED_SIZE: f64 = 1e-3;

/// Find 3x3 local maxima of the heatmap, keep scores >= `score_threshold`,
/// strongest `top_k`; recover centers through the offset map and sizes from
/// the size map.
///
/// Tie rule: a cell is a peak iff it is strictly greater than every
/// neighbor at a smaller raster index and >= the rest, so plateaus yield
/// exactly one peak, deterministically.
pub fn decode(view: &MapView, stride: usize, score_threshold: f64, top_k: usize) -> Result<Vec<Detection>> {
    let (ch, cw, nc) = (view.cells_h, view.cells_w, view.num_classes);
    let plane = ch * cw;
    if view.heat.len() != nc * plane || view.size.len() != 2 * plane || view.offset.len() != 2 * plane
    {
        return Err(Error::InvalidArgument {
            op: "decode",
            msg: format!(
                "map lengths {}/{}/{} inconsistent with {} classes x {}x{} cells",
                view.heat.len(),
                view.size.len(),
                view.offset.len(),
                nc,
                ch,
                cw
            ),
        });
    }
    let mut peaks: Vec<(f64, usize, usize, usize)> = Vec::new(); // score, class, y, x
    for c in 0..nc {
        let hm = &view.heat[c * plane..(c + 1) * plane];
        for y in 0..ch {
            for x in 0..cw {
                let idx = y * cw + x;
                let v = hm[idx];
                if v < score_threshold {
                    continue;
                }
                let mut is_peak = true;
                'nbrs: for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = y as isize + dy;
                        let nx = x as isize + dx;
                        if ny < 0 || ny >= ch as isize || nx < 0 || nx >= cw as isize {
                            continue;
                        }
                        let nidx = ny as usize * cw + nx as usize;
                        let nv = hm[nidx];
                        let ok = if nidx < idx { v > nv } else { v >= nv };
                        if !ok {
                            is_peak = false;
                            break 'nbrs;
                        }
                    }
                }
                if is_peak {
                    peaks.push((v, c, y, x));
                }
            }
        }
    }
    // strongest first; raster order breaks score ties deterministically
    peaks.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.1, a.2, a.3).cmp(&(b.1, b.2, b.3)))
    });
    peaks.truncate(top_k);

    let r = stride as f64;
    Ok(peaks
        .into_iter()
        .map(|(score, c, y, x)| {
            let at = y * cw + x;
            let ox = view.offset[at];
            let oy = view.offset[plane + at];
            Detection {
                cx: (x as f64 + ox) * r,
                cy: (y as f64 + oy) * r,
                w: view.size[at].max(MIN_DECODED_SIZE),
                h: view.size[plane + at].max(MIN_DECODED_SIZE),
                score,
                class_id: c,
            }
        })
        .collect())
}

/// Intersection over union of two center-size boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ax0 = a.cx - a.w / 2.0;
    let ax1 = a.cx + a.w / 2.0;
    let ay0 = a.cy - a.h / 2.0;
    let ay1 = a.cy + a.h / 2.0;
    let bx0 = b.cx - b.w / 2.0;
    let bx1 = b.cx + b.w / 2.0;
    let by0 = b.cy - b.h / 2.0;
    let by1 = b.cy + b.h / 2.0;
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{Annotation, SigmaRule};

    #[test]
    fn roundtrip_single_box() {
        let ann = Annotation {
            image_w: 32,
            image_h: 32,
            boxes: vec![BBox { cx: 10.0, cy: 7.0, w: 8.0, h: 6.0, class_id: 0 }],
        };
        let maps = TargetMaps::from_annotation(&ann, 4, 1, SigmaRule::default()).unwrap();
        let dets = decode(&MapView::of_targets(&maps), 4, 0.25, 256).unwrap();
        assert_eq!(dets.len(), 1);
        let d = dets[0];
        assert_eq!(d.cx, 10.0);
        assert_eq!(d.cy, 7.0);
        assert_eq!(d.w, 8.0);
        assert_eq!(d.h, 6.0);
        assert_eq!(d.score, 1.0);
    }

    #[test]
    fn all_zero_heatmap_decodes_empty() {
        let heat = vec![0.0; 64];
        let size = vec![0.0; 128];
        let offset = vec![0.0; 128];
        let view = MapView { heat: &heat, size: &size, offset: &offset, cells_h: 8, cells_w: 8, num_classes: 1 };
        assert!(decode(&view, 4, 0.25, 256).unwrap().is_empty());
    }

    #[test]
    fn two_isolated_peaks_decode_to_two() {
        let mut heat = vec![0.0; 64];
        heat[1 * 8 + 1] = 1.0;
        heat[6 * 8 + 5] = 0.9;
        let size = vec![2.0; 128];
        let offset = vec![0.0; 128];
        let view = MapView { heat: &heat, size: &size, offset: &offset, cells_h: 8, cells_w: 8, num_classes: 1 };
        let dets = decode(&view, 4, 0.25, 256).unwrap();
        assert_eq!(dets.len(), 2);
        assert!(dets[0].score >= dets[1].score);
    }

    #[test]
    fn plateau_yields_single_peak() {
        let heat = vec![0.5; 64];
        let size = vec![2.0; 128];
        let offset = vec![0.0; 128];
        let view = MapView { heat: &heat, size: &size, offset: &offset, cells_h: 8, cells_w: 8, num_classes: 1 };
        let dets = decode(&view, 4, 0.25, 256).unwrap();
        assert_eq!(dets.len(), 1, "ties must break to exactly one peak");
        assert_eq!((dets[0].cx, dets[0].cy), (0.0, 0.0));
    }

    #[test]
    fn top_k_truncates_by_score() {
        let mut heat = vec![0.0; 100];
        for (i, &(y, x, v)) in [(1usize, 1usize, 0.9), (1, 7, 0.8), (7, 1, 0.7), (7, 7, 0.6)]
            .iter()
            .enumerate()
        {
            let _ = i;
            heat[y * 10 + x] = v;
        }
        let size = vec![2.0; 200];
        let offset = vec![0.0; 200];
        let view = MapView { heat: &heat, size: &size, offset: &offset, cells_h: 10, cells_w: 10, num_classes: 1 };
        let dets = decode(&view, 4, 0.25, 2).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].score, 0.9);
        assert_eq!(dets[1].score, 0.8);
    }

    #[test]
    fn iou_identical_disjoint_and_known_overlap() {
        let a = BBox { cx: 2.0, cy: 2.0, w: 4.0, h: 4.0, class_id: 0 };
        assert_eq!(iou(&a, &a), 1.0);
        let far = BBox { cx: 100.0, cy: 100.0, w: 4.0, h: 4.0, class_id: 0 };
        assert_eq!(iou(&a, &far), 0.0);
        let b = BBox { cx: 4.0, cy: 2.0, w: 4.0, h: 4.0, class_id: 0 };
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }
}
