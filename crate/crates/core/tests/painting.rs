//! Projection, painting and voxelization against independent oracles.

mod common;

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4};

use common::*;
use fusionpaint::geometry::{project, transform_to_camera, CameraCalib, PointCloud};
use fusionpaint::painting::{
    corrupt_scores, paint_2d, paint_3d, point_in_box, Box3D, Corruption, SemanticMask,
    SemanticScores,
};
use fusionpaint::voxelgrid::{voxel_index, voxelize_with, VoxelConfig};
use fusionpaint::{Error, Exec};
use rand::Rng;

fn yaw_calib(yaw: f64) -> CameraCalib {
    let (s, c) = yaw.sin_cos();
    let e = [
        [c, -s, 0.0, 0.0],
        [s, c, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    CameraCalib::new(100.0, 100.0, 50.0, 50.0, e, 100, 100).unwrap()
}

#[test]
fn yaw_quarter_turn_matches_matrix_oracle() {
    // 4x4 homogeneous product computed before the build
    let expected = [6.123233995736766e-17, 1.0, 0.0];
    let cam = transform_to_camera(
        &PointCloud::new(vec![[1.0, 0.0, 0.0]]),
        &yaw_calib(FRAC_PI_2),
    )
    .unwrap();
    assert_eq!(cam[0], expected);
}

#[test]
fn projection_matches_scalar_oracle() {
    let mut r = rng(1);
    let calib = random_calib(&mut r);
    let cloud = random_cloud(&mut r, 1000, [-8.0, -8.0, -3.0], [8.0, 8.0, 25.0]);
    let proj = project(&cloud, &calib).unwrap();
    let mut valid = 0;
    for (i, p) in proj.iter().enumerate() {
        let (expect, cam) = oracle_pixel(&calib, cloud.point(i));
        assert!((p.depth - cam[2]).abs() < 1e-9, "point {i}");
        assert_eq!(p.valid.then_some((p.u, p.v)), expect, "point {i}");
        valid += p.valid as usize;
    }
    // the oracle comparison is only meaningful if both outcomes occur
    assert!(valid > 100 && valid < 900, "{valid} valid projections");
}

#[test]
fn projection_rejects_non_finite_points() {
    let cloud = PointCloud::new(vec![[0.0, 0.0, 1.0], [f32::NAN, 0.0, 1.0]]);
    let err = project(&cloud, &yaw_calib(0.0)).unwrap_err();
    assert!(matches!(err, Error::Data(msg) if msg.contains("point 1")));
}

fn checkerboard(w: u32, h: u32, cell: u32) -> SemanticMask {
    let mut mask = SemanticMask::background(w, h, 3);
    for v in 0..h {
        for u in 0..w {
            mask.set(
                u,
                v,
                if (u / cell + v / cell).is_multiple_of(2) {
                    1
                } else {
                    2
                },
            );
        }
    }
    mask
}

#[test]
fn paint_2d_class_counts_match_project_and_tally() {
    let mut r = rng(2);
    let calib = CameraCalib::new(
        120.0,
        110.0,
        64.0,
        48.0,
        [
            [1.0, 0.0, 0.0, 0.1],
            [0.0, 1.0, 0.0, -0.2],
            [0.0, 0.0, 1.0, 0.5],
            [0.0, 0.0, 0.0, 1.0],
        ],
        128,
        96,
    )
    .unwrap();
    let mask = checkerboard(128, 96, 8);
    let cloud = random_cloud(&mut r, 200, [-4.0, -4.0, -1.0], [4.0, 4.0, 10.0]);
    let painted = paint_2d(&cloud, &mask, &calib).unwrap();

    let mut expect = [0usize; 3];
    for i in 0..cloud.len() {
        let class = match oracle_pixel(&calib, cloud.point(i)).0 {
            Some((u, v)) => mask.data[(v * 128 + u) as usize],
            None => 0,
        };
        expect[class as usize] += 1;
    }
    let mut got = [0usize; 3];
    for l in painted.labels() {
        got[l as usize] += 1;
    }
    assert_eq!(got, expect);
    assert!(expect[1] > 0 && expect[2] > 0);
}

#[test]
fn paint_2d_rejects_mismatched_mask() {
    let mask = SemanticMask::background(10, 10, 2);
    let err = paint_2d(&PointCloud::default(), &mask, &yaw_calib(0.0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn rotated_box_hand_cases_match_trig_oracle() {
    let b = Box3D {
        center: [0.0; 3],
        size: [4.0, 1.0, 1.0],
        yaw: FRAC_PI_4,
        class_id: 1,
    };
    // precomputed: rotating by -yaw puts these at x' = 2.5 and x' = 1.5
    let outside = [2.5 * FRAC_1_SQRT_2, 2.5 * FRAC_1_SQRT_2, 0.0];
    let inside = [1.5 * FRAC_1_SQRT_2, 1.5 * FRAC_1_SQRT_2, 0.0];
    assert!(!point_in_box(outside, &b));
    assert!(point_in_box(inside, &b));
    assert_eq!(point_in_box(outside, &b), oracle_in_box(outside, &b));
    assert_eq!(point_in_box(inside, &b), oracle_in_box(inside, &b));
}

/// Exhaustive pairwise labels: the containing box with the nearest center,
/// then the lowest box index.
fn pairwise_labels(points: &PointCloud, boxes: &[Box3D]) -> Vec<u8> {
    (0..points.len())
        .map(|i| {
            let p = points.point(i);
            let mut best: Option<(f64, usize)> = None;
            for (k, b) in boxes.iter().enumerate() {
                if !oracle_in_box(p, b) {
                    continue;
                }
                let d: f64 = (0..3)
                    .map(|j| (p[j] - b.center[j]) * (p[j] - b.center[j]))
                    .sum();
                match best {
                    Some((bd, _)) if bd <= d => {}
                    _ => best = Some((d, k)),
                }
            }
            best.map_or(0, |(_, k)| boxes[k].class_id as u8)
        })
        .collect()
}

#[test]
fn paint_3d_matches_exhaustive_pairwise_oracle() {
    let mut r = rng(3);
    let mut xyz = Vec::new();
    for i in 0..10 {
        for j in 0..10 {
            for k in 0..5 {
                xyz.push([
                    i as f32 * 0.6 - 3.0,
                    j as f32 * 0.6 - 3.0,
                    k as f32 * 0.5 - 1.0,
                ]);
            }
        }
    }
    let cloud = PointCloud::new(xyz);
    assert_eq!(cloud.len(), 500);
    for trial in 0..20 {
        let boxes: Vec<Box3D> = (0..3).map(|_| random_box(&mut r, 6)).collect();
        let got = paint_3d(&cloud, &boxes, 6).unwrap().labels();
        assert_eq!(got, pairwise_labels(&cloud, &boxes), "trial {trial}");
    }
}

#[test]
fn paint_3d_validates_boxes() {
    let b = Box3D {
        center: [0.0; 3],
        size: [1.0, 0.0, 1.0],
        yaw: 0.0,
        class_id: 1,
    };
    assert!(matches!(
        paint_3d(&PointCloud::default(), &[b], 3),
        Err(Error::Config(_))
    ));
    let b = Box3D {
        size: [1.0; 3],
        class_id: 3,
        ..b
    };
    assert!(matches!(
        paint_3d(&PointCloud::default(), &[b], 3),
        Err(Error::Config(_))
    ));
}

#[test]
fn label_flip_rate_matches_binomial_expectation() {
    let mut r = rng(4);
    let labels: Vec<u8> = (0..10_000).map(|_| r.gen_range(1..11)).collect();
    let scores = SemanticScores::from_labels(&labels, 11);
    let out = corrupt_scores(&scores, Corruption::LabelFlip { p: 0.2 }, 99).unwrap();
    let flipped = out
        .labels()
        .iter()
        .zip(&labels)
        .filter(|(a, b)| a != b)
        .count();
    let rate = flipped as f64 / 10_000.0;
    // binomial sd at n = 10 000 is 0.004; +-0.02 is five sd
    assert!((rate - 0.2).abs() <= 0.02, "flip rate {rate}");
    // flips stay in the foreground and one-hot
    assert!(out.labels().iter().all(|&l| l != 0));
    assert!(out.validate().is_ok());
}

#[test]
fn label_flip_leaves_background_alone() {
    let labels = vec![0u8; 500];
    let scores = SemanticScores::from_labels(&labels, 5);
    let out = corrupt_scores(&scores, Corruption::LabelFlip { p: 1.0 }, 1).unwrap();
    assert_eq!(out, scores);
    assert!(corrupt_scores(&scores, Corruption::LabelFlip { p: 1.5 }, 1).is_err());
}

#[test]
fn voxelize_counts_match_binning_oracle_and_repeat_exactly() {
    let mut r = rng(5);
    let cfg = VoxelConfig {
        size: [0.5, 0.5, 4.0],
        range_min: [-8.0, -8.0, -2.0],
        range_max: [8.0, 8.0, 2.0],
        max_points: 16,
        seed: 3,
    };
    let n = 10_000;
    let cloud = random_cloud(&mut r, n, [-9.0, -9.0, -2.5], [9.0, 9.0, 2.5]);
    let p2d = SemanticScores::from_labels(&random_labels(&mut r, n, 4), 4);
    let p3d = SemanticScores::from_labels(&random_labels(&mut r, n, 4), 4);
    let a = voxelize_with(&cloud, &p2d, &p3d, &cfg, Exec::Parallel).unwrap();
    let bins = oracle_bins(&cloud, &cfg);
    assert_eq!(a.coords, bins.keys().copied().collect::<Vec<_>>());
    let counts: Vec<u32> = bins.values().map(|v| v.len() as u32).collect();
    assert_eq!(a.counts, counts);
    assert!(
        a.counts.iter().any(|&c| c > 16),
        "no voxel exercises sampling"
    );
    assert!(
        a.counts.iter().any(|&c| c < 16),
        "no voxel exercises padding"
    );

    let b = voxelize_with(&cloud, &p2d, &p3d, &cfg, Exec::Parallel).unwrap();
    let c = voxelize_with(&cloud, &p2d, &p3d, &cfg, Exec::Sequential).unwrap();
    assert_eq!(a.features, b.features);
    assert_eq!(a, c);
}

#[test]
fn voxel_index_agrees_with_range_test() {
    let cfg = VoxelConfig::default();
    let mut r = rng(6);
    for _ in 0..5000 {
        let p: [f64; 3] = std::array::from_fn(|_| r.gen_range(-25.0..25.0));
        match voxel_index(p, &cfg) {
            Some(idx) => {
                assert!(cfg.contains(p));
                let dims = cfg.dims();
                for k in 0..3 {
                    assert!((0..dims[k]).contains(&idx[k]));
                    let lo = cfg.range_min[k] + idx[k] as f64 * cfg.size[k];
                    assert!(p[k] >= lo - 1e-9 && p[k] < lo + cfg.size[k] + 1e-9);
                }
            }
            None => assert!(!cfg.contains(p)),
        }
    }
}

#[test]
fn voxelize_rejects_mismatched_scores() {
    let cloud = PointCloud::new(vec![[0.0; 3]; 3]);
    let p2d = SemanticScores::from_labels(&[0, 1, 0], 3);
    let short = SemanticScores::from_labels(&[0, 1], 3);
    let wide = SemanticScores::from_labels(&[0, 1, 0], 4);
    let cfg = VoxelConfig::default();
    assert!(matches!(
        voxelize_with(&cloud, &p2d, &short, &cfg, Exec::Sequential),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        voxelize_with(&cloud, &p2d, &wide, &cfg, Exec::Sequential),
        Err(Error::Config(_))
    ));
}
