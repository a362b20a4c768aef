//! Helpers shared by the integration tests: random instance generators,
//! independent brute-force oracles and the finite-difference checker.

#![allow(dead_code)]

use std::collections::BTreeMap;

use fusionpaint::evalmetrics::{Detection, GroundTruth};
use fusionpaint::fusion::{
    forward, FusionConfig, FusionParams, Gate, PreparedSample, RowSelection,
};
use fusionpaint::geometry::{CameraCalib, PointCloud};
use fusionpaint::neuralcore::{Mat, Mode, Tape};
use fusionpaint::painting::{Box3D, SemanticMask, SemanticScores};
use fusionpaint::voxelgrid::{voxelize_with, VoxelBatch, VoxelConfig};
use fusionpaint::Exec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// random instances

/// Rotation from three Euler angles, composed as `Rz * Ry * Rx`.
fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    [
        [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
        [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
        [-sb, cb * sc, cb * cc],
    ]
}

pub fn random_calib(rng: &mut impl Rng) -> CameraCalib {
    let r = rotation(
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.3..0.3),
    );
    let mut e = [[0.0; 4]; 4];
    for i in 0..3 {
        e[i][..3].copy_from_slice(&r[i]);
        e[i][3] = rng.gen_range(-1.0..1.0);
    }
    e[3][3] = 1.0;
    let width = rng.gen_range(32..200);
    let height = rng.gen_range(32..200);
    CameraCalib::new(
        rng.gen_range(50.0..300.0),
        rng.gen_range(50.0..300.0),
        width as f64 * rng.gen_range(0.3..0.7),
        height as f64 * rng.gen_range(0.3..0.7),
        e,
        width,
        height,
    )
    .unwrap()
}

pub fn random_cloud(rng: &mut impl Rng, n: usize, lo: [f32; 3], hi: [f32; 3]) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| std::array::from_fn(|k| rng.gen_range(lo[k]..hi[k])))
            .collect(),
    )
}

pub fn random_labels(rng: &mut impl Rng, n: usize, m: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..m) as u8).collect()
}

pub fn random_mask(rng: &mut impl Rng, w: u32, h: u32, classes: u32, fg: f64) -> SemanticMask {
    let mut mask = SemanticMask::background(w, h, classes);
    for px in &mut mask.data {
        if rng.gen_bool(fg) {
            *px = rng.gen_range(1..classes) as u8;
        }
    }
    mask
}

pub fn random_box(rng: &mut impl Rng, m: usize) -> Box3D {
    Box3D {
        center: std::array::from_fn(|_| rng.gen_range(-3.0..3.0)),
        size: std::array::from_fn(|_| rng.gen_range(0.5..4.0)),
        yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        class_id: rng.gen_range(1..m) as u32,
    }
}

/// Small grid whose cell edges are exact binary fractions, so that point
/// binning has no rounding ambiguity.
pub fn small_grid(seed: u64, max_points: usize) -> VoxelConfig {
    VoxelConfig {
        size: [0.5, 0.5, 0.5],
        range_min: [0.0, 0.0, 0.0],
        range_max: [1.5, 1.5, 1.5],
        max_points,
        seed,
    }
}

/// Voxel batch of `n` random points with random one-hot labels.
pub fn random_batch(rng: &mut impl Rng, n: usize, m: usize, cfg: &VoxelConfig) -> VoxelBatch {
    let lo = cfg.range_min.map(|v| v as f32);
    let hi = cfg.range_max.map(|v| v as f32 - 1e-3);
    let cloud = random_cloud(rng, n, lo, hi);
    let p2d = SemanticScores::from_labels(&random_labels(rng, n, m), m);
    let p3d = SemanticScores::from_labels(&random_labels(rng, n, m), m);
    voxelize_with(&cloud, &p2d, &p3d, cfg, Exec::Sequential).unwrap()
}

/// Adds uniform noise to every trainable tensor, including the zero-initialized
/// attention output layer.
pub fn perturb_params(params: &mut FusionParams, rng: &mut impl Rng, scale: f64) {
    for t in params.trainable_mut() {
        for v in &mut t.data {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

pub fn random_params(m: usize, grid: &VoxelConfig, seed: u64) -> FusionParams {
    let mut params = FusionParams::init(FusionConfig::for_range(m, grid), seed);
    perturb_params(&mut params, &mut rng(seed ^ 0xA5A5), 0.3);
    params
}

// ---------------------------------------------------------------------------
// oracles

/// Homogeneous 4x4 product followed by the pinhole divide, written out
/// element by element.
pub fn oracle_pixel(calib: &CameraCalib, p: [f64; 3]) -> (Option<(u32, u32)>, [f64; 3]) {
    let h = [p[0], p[1], p[2], 1.0];
    let mut cam = [0.0f64; 4];
    for (i, c) in cam.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, hj) in h.iter().enumerate() {
            acc += calib.extrinsic[i][j] * hj;
        }
        *c = acc;
    }
    let xyz = [cam[0], cam[1], cam[2]];
    if cam[2] <= 0.0 {
        return (None, xyz);
    }
    let u = calib.fx * (cam[0] / cam[2]) + calib.cx;
    let v = calib.fy * (cam[1] / cam[2]) + calib.cy;
    if u < 0.0 || v < 0.0 || u >= calib.width as f64 || v >= calib.height as f64 {
        return (None, xyz);
    }
    (Some((u.floor() as u32, v.floor() as u32)), xyz)
}

/// Continuous pixel coordinate, used to skip points within rounding distance
/// of a pixel border.
pub fn oracle_uv(calib: &CameraCalib, cam: [f64; 3]) -> (f64, f64) {
    (
        calib.fx * cam[0] / cam[2] + calib.cx,
        calib.fy * cam[1] / cam[2] + calib.cy,
    )
}

/// Rotate by `-yaw` with scalar trig, then an axis-aligned test.
pub fn oracle_in_box(p: [f64; 3], b: &Box3D) -> bool {
    let (c, s) = ((-b.yaw).cos(), (-b.yaw).sin());
    let dx = p[0] - b.center[0];
    let dy = p[1] - b.center[1];
    let x = c * dx - s * dy;
    let y = s * dx + c * dy;
    let z = p[2] - b.center[2];
    x.abs() <= b.size[0] / 2.0 && y.abs() <= b.size[1] / 2.0 && z.abs() <= b.size[2] / 2.0
}

/// Distance to the nearest box face in the box frame; near-zero values are
/// ambiguous under rounding.
pub fn box_margin(p: [f64; 3], b: &Box3D) -> f64 {
    let (c, s) = ((-b.yaw).cos(), (-b.yaw).sin());
    let dx = p[0] - b.center[0];
    let dy = p[1] - b.center[1];
    let q = [c * dx - s * dy, s * dx + c * dy, p[2] - b.center[2]];
    (0..3)
        .map(|k| (q[k].abs() - b.size[k] / 2.0).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Members of every occupied cell by linear search over cell boundaries.
pub fn oracle_bins(points: &PointCloud, cfg: &VoxelConfig) -> BTreeMap<[i32; 3], Vec<u32>> {
    let dims = cfg.dims();
    let mut out: BTreeMap<[i32; 3], Vec<u32>> = BTreeMap::new();
    'points: for i in 0..points.len() {
        let p = points.point(i);
        let mut cell = [0i32; 3];
        for k in 0..3 {
            let mut found = None;
            for c in 0..dims[k] {
                let lo = cfg.range_min[k] + c as f64 * cfg.size[k];
                let hi = if c + 1 == dims[k] {
                    cfg.range_max[k]
                } else {
                    cfg.range_min[k] + (c + 1) as f64 * cfg.size[k]
                };
                if p[k] >= lo && p[k] < hi {
                    found = Some(c);
                    break;
                }
            }
            match found {
                Some(c) => cell[k] = c,
                None => continue 'points,
            }
        }
        out.entry(cell).or_default().push(i as u32);
    }
    out
}

/// Lowest foreground class in each pixel's `(2r + 1)`-square neighborhood.
pub fn oracle_bleed(mask: &SemanticMask, r: u32) -> SemanticMask {
    let (w, h, r) = (mask.width as i64, mask.height as i64, r as i64);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<u8> = None;
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                    let c = mask.data[(yy * w + xx) as usize];
                    if c != 0 && best.is_none_or(|b| c < b) {
                        best = Some(c);
                    }
                }
            }
            out.data[(y * w + x) as usize] = best.unwrap_or(0);
        }
    }
    out
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut cur = x;
        while self.0[cur] != root {
            let next = self.0[cur];
            self.0[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// All-pairs single linkage per argmax class; clusters in order of their
/// lowest member.
pub fn oracle_clusters(
    points: &PointCloud,
    probs: &Mat,
    min_pts: usize,
    radius: f64,
) -> Vec<Detection> {
    let argmax = |r: &[f64]| {
        let mut best = 0;
        for c in 1..r.len() {
            if r[c] > r[best] {
                best = c;
            }
        }
        best
    };
    let mut out = Vec::new();
    for class in 1..probs.cols {
        let members: Vec<usize> = (0..points.len())
            .filter(|&i| argmax(probs.row(i)) == class)
            .collect();
        let n = members.len();
        let mut dsu = Dsu((0..n).collect());
        for a in 0..n {
            for b in a + 1..n {
                let pa = points.point(members[a]);
                let pb = points.point(members[b]);
                let d = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
                if d <= radius {
                    dsu.union(a, b);
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for k in 0..n {
            let root = dsu.find(k);
            groups.entry(root).or_default().push(k);
        }
        // roots are the lowest member of their set, so BTreeMap order is
        // the order of first members
        for g in groups.values().filter(|g| g.len() >= min_pts.max(1)) {
            let len = g.len() as f64;
            let sx: f64 = g.iter().map(|&k| points.point(members[k])[0]).sum();
            let sy: f64 = g.iter().map(|&k| points.point(members[k])[1]).sum();
            let sp: f64 = g.iter().map(|&k| probs.get(members[k], class)).sum();
            out.push(Detection {
                bev_center: [sx / len, sy / len],
                class_id: class as u32,
                score: sp / len,
                frame: 0,
            });
        }
    }
    out
}

/// Greedy matching then the explicit staircase: for each recall level take
/// the best precision among curve points at or beyond it.
pub fn oracle_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: u32,
    threshold: f64,
) -> Option<f64> {
    let gts: Vec<GroundTruth> = gts
        .iter()
        .copied()
        .filter(|g| g.class_id == class_id)
        .collect();
    if gts.is_empty() {
        return None;
    }
    let mut idx: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].class_id == class_id)
        .collect();
    // descending score, ties by input order
    idx.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut used = vec![false; gts.len()];
    let mut tp = 0.0;
    let mut curve = Vec::new();
    for (rank, &i) in idx.iter().enumerate() {
        let d = &dets[i];
        let mut pick: Option<usize> = None;
        for j in 0..gts.len() {
            if used[j] || gts[j].frame != d.frame {
                continue;
            }
            let dist = ((d.bev_center[0] - gts[j].bev_center[0]).powi(2)
                + (d.bev_center[1] - gts[j].bev_center[1]).powi(2))
            .sqrt();
            if dist > threshold {
                continue;
            }
            let better = match pick {
                None => true,
                Some(p) => {
                    let dp = ((d.bev_center[0] - gts[p].bev_center[0]).powi(2)
                        + (d.bev_center[1] - gts[p].bev_center[1]).powi(2))
                    .sqrt();
                    dist < dp
                }
            };
            if better {
                pick = Some(j);
            }
        }
        if let Some(j) = pick {
            used[j] = true;
            tp += 1.0;
        }
        curve.push((tp / (rank + 1) as f64, tp / gts.len() as f64));
    }
    let mut total = 0.0;
    for k in 0..101 {
        let level = k as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|(_, r)| *r >= level)
            .map(|(p, _)| *p)
            .fold(None, |acc: Option<f64>, p| {
                Some(acc.map_or(p, |a| a.max(p)))
            });
        total += best.unwrap_or(0.0);
    }
    Some(total / 101.0)
}

// ---------------------------------------------------------------------------
// gradient check

/// A tiny two-scene batch with its targets.
pub struct GradCase {
    pub params: FusionParams,
    pub samples: Vec<PreparedSample>,
    pub targets: Vec<u32>,
}

pub fn grad_case(seed: u64) -> GradCase {
    let m = 11;
    let grid = small_grid(seed, 4);
    let mut r = rng(seed);
    let mut samples = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..2 {
        let n = 14;
        let cloud = random_cloud(&mut r, n, [0.0; 3], [1.2, 1.2, 1.2]);
        let truth = random_labels(&mut r, n, m);
        let p2d = SemanticScores::from_labels(&random_labels(&mut r, n, m), m);
        let p3d = SemanticScores::from_labels(&random_labels(&mut r, n, m), m);
        let batch = voxelize_with(&cloud, &p2d, &p3d, &grid, Exec::Sequential).unwrap();
        let params_cfg = FusionConfig::for_range(m, &grid);
        let sample = PreparedSample::new(&batch, &params_cfg, RowSelection::TrueSlots).unwrap();
        targets.extend(
            sample
                .row_slot
                .iter()
                .map(|&s| truth[batch.sources[s as usize] as usize] as u32),
        );
        samples.push(sample);
    }
    GradCase {
        params: random_params(m, &grid, seed),
        samples,
        targets,
    }
}

impl GradCase {
    /// Training-mode loss and the fingerprint of its piecewise-linear choices.
    pub fn loss(&self, params: &FusionParams) -> (f64, u64) {
        let mut tape = Tape::new(Exec::Sequential);
        let bound = params.bind(&mut tape, Gate::Learned, false);
        let refs: Vec<&PreparedSample> = self.samples.iter().collect();
        let f = forward(params, &mut tape, &bound, &refs, Gate::Learned, Mode::Train).unwrap();
        let loss = tape.cross_entropy(f.logits, &self.targets).unwrap();
        (tape.value(loss).data[0], tape.active_pattern())
    }

    /// Analytic gradient of every trainable tensor, in `trainable()` order.
    pub fn analytic(&self) -> Vec<Mat> {
        let mut tape = Tape::new(Exec::Sequential);
        let bound = self.params.bind(&mut tape, Gate::Learned, true);
        let refs: Vec<&PreparedSample> = self.samples.iter().collect();
        let f = forward(
            &self.params,
            &mut tape,
            &bound,
            &refs,
            Gate::Learned,
            Mode::Train,
        )
        .unwrap();
        let loss = tape.cross_entropy(f.logits, &self.targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        bound
            .vars(&self.params)
            .iter()
            .map(|v| {
                grads
                    .get(v.expect("learned gate binds every tensor"))
                    .unwrap()
                    .clone()
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
    /// Coordinates compared at the full step.
    pub checked: usize,
    /// Coordinates next to a kink, compared at a reduced step.
    pub reduced: usize,
    /// Coordinates no step could keep on one smooth piece.
    pub skipped: usize,
}

/// Central differences on every coordinate of every tensor. A coordinate
/// whose evaluations at `+h` and `-h` fall on different smooth pieces (a
/// ReLU sign or max-pool winner changes) is retried with the step quartered,
/// down to `h / 4^6`.
pub fn finite_difference_check(case: &GradCase, h: f64) -> Vec<TensorCheck> {
    let analytic = case.analytic();
    let (_, base_pattern) = case.loss(&case.params);
    let names: Vec<String> = case
        .params
        .trainable()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut out = Vec::new();
    let mut work = case.params.clone();
    for (t, name) in names.into_iter().enumerate() {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let (mut checked, mut reduced, mut skipped) = (0, 0, 0);
        for i in 0..analytic[t].data.len() {
            let orig = work.trainable_mut()[t].data[i];
            let mut step = h;
            let mut numeric = None;
            for attempt in 0..7 {
                work.trainable_mut()[t].data[i] = orig + step;
                let (up, pu) = case.loss(&work);
                work.trainable_mut()[t].data[i] = orig - step;
                let (down, pd) = case.loss(&work);
                if pu == base_pattern && pd == base_pattern {
                    numeric = Some((up - down) / (2.0 * step));
                    if attempt == 0 {
                        checked += 1;
                    } else {
                        reduced += 1;
                    }
                    break;
                }
                step /= 4.0;
            }
            work.trainable_mut()[t].data[i] = orig;
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            let a = analytic[t].data[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let rel_error = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-6);
        out.push(TensorCheck {
            name,
            rel_error,
            checked,
            reduced,
            skipped,
        });
    }
    out
}
