//! Ground-truth map generation: dot map, Gaussian heatmap, size map, and
//! sub-cell offset map at stride R.

use log::warn;

use crate::error::{Error, Result};

/// One labeled box: center and size in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Per-image ground truth.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Annotation {
    pub image_w: usize,
    pub image_h: usize,
    pub boxes: Vec<BBox>,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            if !(b.w > 0.0 && b.h > 0.0) {
                return Err(Error::InvalidAnnotation(format!(
                    "box {} has non-positive size {}x{}",
                    i, b.w, b.h
                )));
            }
            if !(b.cx >= 0.0 && b.cx < self.image_w as f64 && b.cy >= 0.0 && b.cy < self.image_h as f64)
            {
                return Err(Error::InvalidAnnotation(format!(
                    "box {} center ({}, {}) outside {}x{} image",
                    i, b.cx, b.cy, self.image_w, self.image_h
                )));
            }
            if !b.cx.is_finite() || !b.cy.is_finite() || !b.w.is_finite() || !b.h.is_finite() {
                return Err(Error::InvalidAnnotation(format!("box {} has non-finite fields", i)));
            }
        }
        Ok(())
    }
}

/// Gaussian spread rule: sigma = max(floor, scale * min(w, h) / R), in cells.
#[derive(Debug, Clone, Copy)]
pub struct SigmaRule {
    pub floor: f64,
    pub scale: f64,
}

impl Default for SigmaRule {
    fn default() -> Self {
        SigmaRule {
            floor: 1.0,
            scale: 0.15,
        }
    }
}

impl SigmaRule {
    pub fn sigma(&self, b: &BBox, stride: usize) -> f64 {
        self.floor.max(self.scale * b.w.min(b.h) / stride as f64)
    }
}

/// A keypoint kept in the maps: cell coordinates, class, and source box.
#[derive(Debug, Clone, Copy)]
pub struct Keypoint {
    pub cell_x: usize,
    pub cell_y: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Stride-R training targets for one image.
///
/// All maps are row-major channel x cell-row x cell-col. The heatmap has
/// one channel per class; size and offset maps have two channels each
/// ((w, h) and (ox, oy) respectively), populated only at keypoint cells.
#[derive(Debug, Clone)]
pub struct TargetMaps {
    pub stride: usize,
    pub cells_w: usize,
    pub cells_h: usize,
    pub num_classes: usize,
    pub heatmap: Vec<f64>,
    pub size_map: Vec<f64>,
    pub offset_map: Vec<f64>,
    pub keypoints: Vec<Keypoint>,
}

fn cell_counts(ann: &Annotation, stride: usize) -> (usize, usize) {
    // Right/bottom zero-pad to the next multiple of the stride.
    (ann.image_w.div_ceil(stride), ann.image_h.div_ceil(stride))
}

fn check_classes(ann: &Annotation, num_classes: usize) -> Result<()> {
    for b in &ann.boxes {
        if b.class_id >= num_classes {
            return Err(Error::InvalidAnnotation(format!(
                "class id {} out of range 0..{}",
                b.class_id, num_classes
            )));
        }
    }
    Ok(())
}

/// Binary dot map: 1 at each box's center cell, 0 elsewhere.
pub fn make_dot_map(ann: &Annotation, stride: usize, num_classes: usize) -> Result<Vec<f64>> {
    ann.validate()?;
    check_classes(ann, num_classes)?;
    let (cw, ch) = cell_counts(ann, stride);
    let mut map = vec![0.0; num_classes * ch * cw];
    for b in &ann.boxes {
        let kx = (b.cx / stride as f64).floor() as usize;
        let ky = (b.cy / stride as f64).floor() as usize;
        map[(b.class_id * ch + ky) * cw + kx] = 1.0;
    }
    Ok(map)
}

/// Peak-1 Gaussian heatmap. Overlapping bumps combine by elementwise max,
/// so the map stays in [0, 1] and every centroid cell stays exactly 1.
pub fn gaussian_splat(
    ann: &Annotation,
    stride: usize,
    num_classes: usize,
    rule: SigmaRule,
) -> Result<Vec<f64>> {
    ann.validate()?;
    check_classes(ann, num_classes)?;
    if !(rule.floor > 0.0) {
        return Err(Error::InvalidArgument {
            op: "gaussian_splat",
            msg: format!("sigma floor must be positive, got {}", rule.floor),
        });
    }
    let (cw, ch) = cell_counts(ann, stride);
    let mut map = vec![0.0; num_classes * ch * cw];
    for b in &ann.boxes {
        let sigma = rule.sigma(b, stride);
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument {
                op: "gaussian_splat",
                msg: format!("sigma must be positive, got {}", sigma),
            });
        }
        let kx = (b.cx / stride as f64).floor() as isize;
        let ky = (b.cy / stride as f64).floor() as isize;
        let radius = (4.0 * sigma).ceil() as isize;
        let inv = 1.0 / (2.0 * sigma * sigma);
        let plane = &mut map[b.class_id * ch * cw..(b.class_id + 1) * ch * cw];
        for dy in -radius..=radius {
            let y = ky + dy;
            if y < 0 || y >= ch as isize {
                continue;
            }
            let row = &mut plane[y as usize * cw..(y as usize + 1) * cw];
            for dx in -radius..=radius {
                let x = kx + dx;
                if x < 0 || x >= cw as isize {
                    continue;
                }
                let v = if dx == 0 && dy == 0 {
                    1.0
                } else {
                    (-((dx * dx + dy * dy) as f64) * inv).exp()
                };
                let slot = &mut row[x as usize];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    Ok(map)
}

/// Size and offset maps plus the list of kept keypoints.
///
/// When two boxes of the same class land in one cell, the larger-area box
/// keeps the cell and the loser is logged and dropped.
pub fn make_size_offset_maps(
    ann: &Annotation,
    stride: usize,
    num_classes: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<Keypoint>)> {
    ann.validate()?;
    check_classes(ann, num_classes)?;
    let (cw, ch) = cell_counts(ann, stride);
    let mut size_map = vec![0.0; 2 * ch * cw];
    let mut offset_map = vec![0.0; 2 * ch * cw];
    let mut keypoints: Vec<Keypoint> = Vec::with_capacity(ann.boxes.len());
    for b in &ann.boxes {
        let fx = b.cx / stride as f64;
        let fy = b.cy / stride as f64;
        let kx = fx.floor() as usize;
        let ky = fy.floor() as usize;
        if let Some(prev) = keypoints
            .iter_mut()
            .find(|k| k.cell_x == kx && k.cell_y == ky && k.class_id == b.class_id)
        {
            warn!(
                "keypoint collision at cell ({}, {}) class {}: keeping the larger box",
                kx, ky, b.class_id
            );
            if b.area() <= prev.bbox.area() {
                continue;
            }
            prev.bbox = *b;
        } else {
            keypoints.push(Keypoint {
                cell_x: kx,
                cell_y: ky,
                class_id: b.class_id,
                bbox: *b,
            });
        }
        let at = ky * cw + kx;
        size_map[at] = b.w;
        size_map[ch * cw + at] = b.h;
        offset_map[at] = fx - fx.floor();
        offset_map[ch * cw + at] = fy - fy.floor();
    }
    Ok((size_map, offset_map, keypoints))
}

impl TargetMaps {
    /// All three maps for one annotation.
    pub fn from_annotation(
        ann: &Annotation,
        stride: usize,
        num_classes: usize,
        rule: SigmaRule,
    ) -> Result<TargetMaps> {
        let (cw, ch) = cell_counts(ann, stride);
        let heatmap = gaussian_splat(ann, stride, num_classes, rule)?;
        let (size_map, offset_map, keypoints) = make_size_offset_maps(ann, stride, num_classes)?;
        Ok(TargetMaps {
            stride,
            cells_w: cw,
            cells_h: ch,
            num_classes,
            heatmap,
            size_map,
            offset_map,
            keypoints,
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_box(cx: f64, cy: f64, w: f64, h: f64) -> Annotation {
        Annotation {
            image_w: 32,
            image_h: 32,
            boxes: vec![BBox {
                cx,
                cy,
                w,
                h,
                class_id: 0,
            }],
        }
    }

    #[test]
    fn dot_map_empty_annotation() {
        let ann = Annotation {
            image_w: 16,
            image_h: 16,
            boxes: vec![],
        };
        let map = make_dot_map(&ann, 4, 1).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dot_map_places_center_cell() {
        // center (10, 7), R = 4 -> cell (2, 1)
        let ann = one_box(10.0, 7.0, 4.0, 4.0);
        let map = make_dot_map(&ann, 4, 1).unwrap();
        let cw = 8;
        assert_eq!(map[1 * cw + 2], 1.0);
        assert_eq!(map.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn dot_map_two_distinct_cells() {
        let mut ann = one_box(2.0, 2.0, 3.0, 3.0);
        ann.boxes.push(BBox {
            cx: 20.0,
            cy: 20.0,
            w: 3.0,
            h: 3.0,
            class_id: 0,
        });
        let map = make_dot_map(&ann, 4, 1).unwrap();
        assert_eq!(map.iter().filter(|&&v| v == 1.0).count(), 2);
    }

    #[test]
    fn dot_map_rejects_out_of_range_class() {
        let mut ann = one_box(10.0, 7.0, 4.0, 4.0);
        ann.boxes[0].class_id = 3;
        assert!(make_dot_map(&ann, 4, 2).is_err());
    }

    #[test]
    fn splat_keypoint_is_exactly_one() {
        let ann = one_box(10.0, 7.0, 4.0, 4.0);
        let map = gaussian_splat(&ann, 4, 1, SigmaRule::default()).unwrap();
        let cw = 8;
        assert_eq!(map[1 * cw + 2], 1.0);
        assert!(map.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn splat_one_cell_from_keypoint() {
        // sigma floors at 1.0 for a small box; e^{-1/2} one cell away
        let ann = one_box(10.0, 7.0, 4.0, 4.0);
        let map = gaussian_splat(&ann, 4, 1, SigmaRule::default()).unwrap();
        let cw = 8;
        let v = map[1 * cw + 3];
        assert!((v - (-0.5f64).exp()).abs() < 1e-12, "{v}");
        assert!((v - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn splat_overlap_takes_max_not_sum() {
        // two keypoints three cells left and right of a probe cell
        let ann = Annotation {
            image_w: 64,
            image_h: 64,
            boxes: vec![
                BBox { cx: 2.0, cy: 2.0, w: 4.0, h: 4.0, class_id: 0 },
                BBox { cx: 26.0, cy: 2.0, w: 4.0, h: 4.0, class_id: 0 },
            ],
        };
        let map = gaussian_splat(&ann, 4, 1, SigmaRule::default()).unwrap();
        let cw = 16;
        // probe at cell (3, 0): both keypoints (cells 0 and 6) are 3 away
        let v = map[0 * cw + 3];
        let expect = (-4.5f64).exp();
        assert!((v - expect).abs() < 1e-12, "expected max-combine {expect}, got {v}");
        assert!((v - 0.011109).abs() < 1e-6);
    }

    #[test]
    fn splat_monotone_along_ray_from_isolated_keypoint() {
        let ann = one_box(16.0, 16.0, 6.0, 6.0);
        let map = gaussian_splat(&ann, 4, 1, SigmaRule::default()).unwrap();
        let cw = 8;
        let row: Vec<f64> = (4..8).map(|x| map[4 * cw + x]).collect();
        for pair in row.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn sigma_rule_rejects_non_positive() {
        let ann = one_box(10.0, 7.0, 4.0, 4.0);
        let bad = SigmaRule { floor: 0.0, scale: 0.0 };
        assert!(gaussian_splat(&ann, 4, 1, bad).is_err());
    }

    #[test]
    fn offsets_match_discretization_remainder() {
        let ann = one_box(10.0, 7.0, 8.0, 6.0);
        let (size_map, offset_map, kps) = make_size_offset_maps(&ann, 4, 1).unwrap();
        assert_eq!(kps.len(), 1);
        let cw = 8;
        let ch = 8;
        let at = 1 * cw + 2;
        assert_eq!(offset_map[at], 0.5);
        assert_eq!(offset_map[ch * cw + at], 0.75);
        assert_eq!(size_map[at], 8.0);
        assert_eq!(size_map[ch * cw + at], 6.0);
    }

    #[test]
    fn offset_zero_at_exact_multiple() {
        let ann = one_box(8.0, 12.0, 4.0, 4.0);
        let (_, offset_map, _) = make_size_offset_maps(&ann, 4, 1).unwrap();
        let cw = 8;
        let ch = 8;
        let at = 3 * cw + 2;
        assert_eq!(offset_map[at], 0.0);
        assert_eq!(offset_map[ch * cw + at], 0.0);
    }

    #[test]
    fn collision_keeps_larger_box() {
        let ann = Annotation {
            image_w: 32,
            image_h: 32,
            boxes: vec![
                BBox { cx: 9.0, cy: 7.0, w: 3.0, h: 3.0, class_id: 0 },
                BBox { cx: 10.0, cy: 6.0, w: 5.0, h: 5.0, class_id: 0 },
            ],
        };
        let (size_map, _, kps) = make_size_offset_maps(&ann, 4, 1).unwrap();
        assert_eq!(kps.len(), 1);
        assert_eq!(kps[0].bbox.w, 5.0);
        assert_eq!(size_map[1 * 8 + 2], 5.0);
    }

    #[test]
    fn non_divisible_extent_pads_up() {
        let ann = Annotation {
            image_w: 30,
            image_h: 33,
            boxes: vec![BBox { cx: 29.0, cy: 32.0, w: 2.0, h: 2.0, class_id: 0 }],
        };
        let maps = TargetMaps::from_annotation(&ann, 4, 1, SigmaRule::default()).unwrap();
        assert_eq!(maps.cells_w, 8);
        assert_eq!(maps.cells_h, 9);
        assert_eq!(maps.num_keypoints(), 1);
    }

    #[test]
    fn maps_are_deterministic() {
        let ann = Annotation {
            image_w: 64,
            image_h: 64,
            boxes: (0..5)
                .map(|i| BBox {
                    cx: 5.0 + 11.0 * i as f64,
                    cy: 7.0 + 9.0 * i as f64,
                    w: 6.0,
                    h: 5.0,
                    class_id: 0,
                })
                .collect(),
        };
        let a = TargetMaps::from_annotation(&ann, 4, 1, SigmaRule::default()).unwrap();
        let b = TargetMaps::from_annotation(&ann, 4, 1, SigmaRule::default()).unwrap();
        assert_eq!(a.heatmap, b.heatmap);
        assert_eq!(a.size_map, b.size_map);
        assert_eq!(a.offset_map, b.offset_map);
    }
}
