//! Painting points with one-hot class vectors.
//!
//! Two label sources feed the fusion stage: a 2D segmentation mask reached
//! through [`crate::geometry::project`], and 3D boxes whose interiors are
//! labeled directly. Class 0 is always background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraCalib, PointCloud};

/// Per-pixel class indices (argmax of a 2D segmentation).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMask {
    pub width: u32,
    pub height: u32,
    /// Class count including background.
    pub classes: u32,
    /// Row-major, `height * width`.
    pub data: Vec<u8>,
}

impl SemanticMask {
    pub fn background(width: u32, height: u32, classes: u32) -> Self {
        SemanticMask {
            width,
            height,
            classes,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.width as usize * self.height as usize {
            return Err(Error::shape(format!(
                "mask {}x{} holds {} pixels",
                self.width,
                self.height,
                self.data.len()
            )));
        }
        if let Some(bad) = self.data.iter().find(|&&c| c as u32 >= self.classes) {
            return Err(Error::data(format!(
                "mask class {bad} outside 0..{}",
                self.classes
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u8 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, class: u8) {
        let w = self.width as usize;
        self.data[v as usize * w + u as usize] = class;
    }

    pub fn foreground_pixels(&self) -> usize {
        self.data.iter().filter(|&&c| c != 0).count()
    }
}

/// `n x m` per-point class scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticScores {
    pub n: usize,
    pub m: usize,
    pub scores: Vec<f32>,
}

impl SemanticScores {
    pub fn from_labels(labels: &[u8], m: usize) -> Self {
        let mut scores = vec![0.0; labels.len() * m];
        for (i, &c) in labels.iter().enumerate() {
            scores[i * m + c as usize] = 1.0;
        }
        SemanticScores {
            n: labels.len(),
            m,
            scores,
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.scores[i * self.m..(i + 1) * self.m]
    }

    /// Argmax per row; the lowest index wins ties.
    pub fn labels(&self) -> Vec<u8> {
        (0..self.n)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.n * self.m {
            return Err(Error::shape(format!(
                "scores buffer holds {} values for {}x{}",
                self.scores.len(),
                self.n,
                self.m
            )));
        }
        for i in 0..self.n {
            let row = self.row(i);
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::data(format!("score row {i} leaves [0, 1]")));
            }
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::data(format!("score row {i} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Oriented box: yaw rotates about world z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// (length, width, height) along the box's local x, y, z.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: u32,
}

impl Box3D {
    pub fn validate(&self, m: usize) -> Result<()> {
        if !self.size.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::config(format!(
                "box size {:?} must be positive",
                self.size
            )));
        }
        if self.class_id == 0 || self.class_id as usize >= m {
            return Err(Error::config(format!(
                "box class {} outside 1..{m}",
                self.class_id
            )));
        }
        Ok(())
    }

    /// Point expressed in the box frame.
    #[inline]
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Box-frame point mapped back to the world.
    #[inline]
    pub fn to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * q[0] - s * q[1] + self.center[0],
            s * q[0] + c * q[1] + self.center[1],
            q[2] + self.center[2],
        ]
    }
}

/// Boundary-inclusive containment test.
#[inline]
pub fn point_in_box(p: [f64; 3], b: &Box3D) -> bool {
    let q = b.to_local(p);
    q[0].abs() <= b.size[0] / 2.0 && q[1].abs() <= b.size[1] / 2.0 && q[2].abs() <= b.size[2] / 2.0
}

pub fn paint_2d(
    points: &PointCloud,
    mask: &SemanticMask,
    calib: &CameraCalib,
) -> Result<SemanticScores> {
    if mask.width != calib.width || mask.height != calib.height {
        return Err(Error::config(format!(
            "mask is {}x{} but camera is {}x{}",
            mask.width, mask.height, calib.width, calib.height
        )));
    }
    mask.validate()?;
    let labels: Vec<u8> = project(points, calib)?
        .iter()
        .map(|p| if p.valid { mask.get(p.u, p.v) } else { 0 })
        .collect();
    Ok(SemanticScores::from_labels(&labels, mask.classes as usize))
}

/// Class of the containing box; overlaps go to the nearest center, then to
/// the lowest box index.
pub fn label_from_boxes(p: [f64; 3], boxes: &[Box3D]) -> u8 {
    let mut best: Option<(f64, u32)> = None;
    for b in boxes {
        if !point_in_box(p, b) {
            continue;
        }
        let d2: f64 = (0..3).map(|k| (p[k] - b.center[k]).powi(2)).sum();
        if best.is_none_or(|(bd, _)| d2 < bd) {
            best = Some((d2, b.class_id));
        }
    }
    best.map_or(0, |(_, c)| c as u8)
}

pub fn paint_3d(points: &PointCloud, boxes: &[Box3D], m: usize) -> Result<SemanticScores> {
    for b in boxes {
        b.validate(m)?;
    }
    points.check_finite()?;
    let labels: Vec<u8> = (0..points.len())
        .map(|i| label_from_boxes(points.point(i), boxes))
        .collect();
    Ok(SemanticScores::from_labels(&labels, m))
}

/// Label corruption applied to painted scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Corruption {
    /// Each foreground row moves to a different, uniformly chosen foreground
    /// class with probability `p`.
    LabelFlip { p: f64 },
}

pub fn corrupt_scores(
    scores: &SemanticScores,
    model: Corruption,
    seed: u64,
) -> Result<SemanticScores> {
    let Corruption::LabelFlip { p } = model;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!(
            "flip probability {p} outside [0, 1]"
        )));
    }
    let m = scores.m;
    let mut labels = scores.labels();
    // a flip needs at least two foreground classes
    if m >= 3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for label in labels.iter_mut().filter(|l| **l != 0) {
            if rng.gen::<f64>() < p {
                // uniform over the m - 2 other foreground classes
                let mut k = rng.gen_range(1..m - 1) as u8;
                if k >= *label {
                    k += 1;
                }
                *label = k;
            }
        }
    }
    Ok(SemanticScores::from_labels(&labels, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(yaw: f64, size: [f64; 3], class_id: u32) -> Box3D {
        Box3D {
            center: [0.0; 3],
            size,
            yaw,
            class_id,
        }
    }

    #[test]
    fn box_center_and_faces_inclusive() {
        let b = unit_box(0.0, [2.0, 2.0, 2.0], 1);
        assert!(point_in_box([0.0, 0.0, 0.0], &b));
        assert!(point_in_box([1.0, 0.0, 0.0], &b));
        assert!(!point_in_box([1.0001, 0.0, 0.0], &b));
    }

    #[test]
    fn rotated_box_against_trig_oracle() {
        use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4};
        let b = unit_box(FRAC_PI_4, [4.0, 1.0, 1.0], 1);
        // rotated by -yaw these land at x' = 2.5 and x' = 1.5 on the long axis
        assert!(!point_in_box(
            [2.5 * FRAC_1_SQRT_2, 2.5 * FRAC_1_SQRT_2, 0.0],
            &b
        ));
        assert!(point_in_box(
            [1.5 * FRAC_1_SQRT_2, 1.5 * FRAC_1_SQRT_2, 0.0],
            &b
        ));
    }

    #[test]
    fn local_world_round_trip() {
        let b = Box3D {
            center: [3.0, -2.0, 1.0],
            size: [1.0; 3],
            yaw: 0.7,
            class_id: 1,
        };
        let p = [0.3, 4.0, -2.0];
        let q = b.to_world(b.to_local(p));
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn paint_3d_single_box_and_empty() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let s = paint_3d(&pc, &[unit_box(0.0, [1.0; 3], 2)], 4).unwrap();
        assert_eq!(s.row(0), &[0.0, 0.0, 1.0, 0.0]);
        let s = paint_3d(&pc, &[], 4).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn overlapping_boxes_prefer_nearest_center() {
        let a = Box3D {
            center: [0.0, 0.0, 0.0],
            size: [4.0, 4.0, 4.0],
            yaw: 0.0,
            class_id: 1,
        };
        let b = Box3D {
            center: [1.0, 0.0, 0.0],
            ..a
        };
        let b = Box3D { class_id: 3, ..b };
        let pc = PointCloud::new(vec![[0.9, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        let s = paint_3d(&pc, &[a, b], 4).unwrap();
        assert_eq!(s.labels(), vec![3, 1]);
        // exact tie between centers falls back to the lower index
        let c = Box3D { class_id: 2, ..a };
        let s = paint_3d(&pc, &[c, Box3D { class_id: 1, ..a }], 4).unwrap();
        assert_eq!(s.labels(), vec![2, 2]);
    }

    #[test]
    fn paint_3d_rejects_background_box() {
        let pc = PointCloud::new(vec![[0.0; 3]]);
        assert!(paint_3d(&pc, &[unit_box(0.0, [1.0; 3], 0)], 4).is_err());
        assert!(paint_3d(&pc, &[unit_box(0.0, [1.0; 3], 4)], 4).is_err());
    }

    fn identity_calib(w: u32, h: u32) -> CameraCalib {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        CameraCalib::new(1.0, 1.0, 0.0, 0.0, m, w, h).unwrap()
    }

    #[test]
    fn paint_2d_reads_mask_and_backgrounds_invalid() {
        let calib = identity_calib(4, 4);
        let mut mask = SemanticMask::background(4, 4, 5);
        mask.set(2, 1, 3);
        let pc = PointCloud::new(vec![[2.5, 1.5, 1.0], [2.5, 1.5, -1.0]]);
        let s = paint_2d(&pc, &mask, &calib).unwrap();
        assert_eq!(s.row(0), &[0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(s.row(1), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn paint_2d_dimension_mismatch() {
        let calib = identity_calib(4, 4);
        let mask = SemanticMask::background(4, 3, 5);
        let err = paint_2d(&PointCloud::default(), &mask, &calib).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn corrupt_zero_is_identity() {
        let s = SemanticScores::from_labels(&[0, 1, 2, 2, 1], 3);
        let out = corrupt_scores(&s, Corruption::LabelFlip { p: 0.0 }, 9).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn corrupt_one_forces_the_other_class() {
        let s = SemanticScores::from_labels(&[0, 1, 2, 2, 1, 0], 3);
        let out = corrupt_scores(&s, Corruption::LabelFlip { p: 1.0 }, 9).unwrap();
        assert_eq!(out.labels(), vec![0, 2, 1, 1, 2, 0]);
    }

    #[test]
    fn corrupt_rate_matches_binomial() {
        let labels: Vec<u8> = (0..10_000).map(|i| 1 + (i % 10) as u8).collect();
        let s = SemanticScores::from_labels(&labels, 11);
        let out = corrupt_scores(&s, Corruption::LabelFlip { p: 0.2 }, 1234).unwrap();
        let flipped = out
            .labels()
            .iter()
            .zip(&labels)
            .filter(|(a, b)| a != b)
            .count();
        let frac = flipped as f64 / labels.len() as f64;
        // 10k Bernoulli(0.2): sd = 0.004, so +-0.02 is five sigma
        assert!((frac - 0.2).abs() <= 0.02, "{frac}");
        assert!(out.labels().iter().all(|&l| l != 0));
    }

    #[test]
    fn corrupt_rejects_bad_probability() {
        let s = SemanticScores::from_labels(&[1], 3);
        assert!(corrupt_scores(&s, Corruption::LabelFlip { p: 1.5 }, 0).is_err());
        assert!(corrupt_scores(&s, Corruption::LabelFlip { p: -0.1 }, 0).is_err());
    }

    #[test]
    fn validate_catches_non_one_hot() {
        let mut s = SemanticScores::from_labels(&[1, 0], 2);
        assert!(s.validate().is_ok());
        s.scores[0] = 1.0;
        assert!(s.validate().is_err());
    }
}
