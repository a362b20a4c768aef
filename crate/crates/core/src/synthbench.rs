//! Synthetic labelled scenes with controllable label corruption.
//!
//! A scene is a flat ground plane with oriented boxes standing on it, seen
//! by a LiDAR at the origin and one forward-looking camera. The clean
//! segmentation mask is ray-cast against the boxes with proper occlusion.
//! Two corruptions model the typical failures of each sensor: the 2D mask
//! is dilated so silhouettes bleed onto the background behind and around
//! objects, and 3D labels of foreground points are swapped to other
//! foreground classes.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::formats;
use crate::geometry::{CameraCalib, PointCloud};
use crate::painting::{
    corrupt_scores, paint_2d, paint_3d, Box3D, Corruption, SemanticMask, SemanticScores,
};

/// Random stream used for scene geometry.
const GEOMETRY_STREAM: u64 = 0;
/// Random stream used for 3D label corruption.
const CORRUPTION_STREAM: u64 = 1;
const PLACEMENT_TRIES: usize = 1000;
/// Surface samples are pulled this fraction inward so they sit strictly
/// inside their own box.
const SURFACE_INSET: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShape {
    pub name: String,
    /// Box length, width, height in meters.
    pub size: [f64; 3],
}

impl ClassShape {
    fn new(name: &str, size: [f64; 3]) -> Self {
        ClassShape {
            name: name.into(),
            size,
        }
    }
}

/// Ten road-scene obstacle classes with typical dimensions.
pub fn default_classes() -> Vec<ClassShape> {
    vec![
        ClassShape::new("car", [4.6, 1.9, 1.7]),
        ClassShape::new("truck", [7.0, 2.5, 3.0]),
        ClassShape::new("construction_vehicle", [6.5, 2.8, 3.2]),
        ClassShape::new("bus", [11.0, 2.9, 3.5]),
        ClassShape::new("trailer", [9.0, 2.5, 3.6]),
        ClassShape::new("barrier", [2.0, 0.5, 1.0]),
        ClassShape::new("motorcycle", [2.1, 0.8, 1.5]),
        ClassShape::new("bicycle", [1.8, 0.6, 1.3]),
        ClassShape::new("pedestrian", [0.7, 0.7, 1.8]),
        ClassShape::new("traffic_cone", [0.4, 0.4, 0.8]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Inclusive range for the number of boxes.
    pub num_boxes: [usize; 2],
    /// Foreground classes; class id `i + 1` is `classes[i]`.
    pub classes: Vec<ClassShape>,
    /// Ground points per square meter.
    pub ground_density: f64,
    /// Box surface points per square meter (top and four sides).
    pub surface_density: f64,
    /// Ground covers `[-extent, extent)` in x and y.
    pub ground_extent: f64,
    /// Box footprints stay inside this x range and `[-extent, extent]` in y.
    pub box_x_range: [f64; 2],
    /// Minimum clearance between box footprints (bounding circles).
    pub min_gap: f64,
    pub ground_noise: f64,
    pub sensor_origin: [f64; 3],
    pub calib: CameraCalib,
    /// Mask dilation radius in pixels.
    pub bleed_radius: u32,
    /// Probability of swapping a foreground 3D label.
    pub confusion_p: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let origin = [0.0, 0.0, 1.8];
        SceneSpec {
            seed: 7,
            num_boxes: [3, 6],
            classes: default_classes(),
            ground_density: 0.5,
            surface_density: 10.0,
            ground_extent: 20.0,
            box_x_range: [-2.0, 20.0],
            min_gap: 1.0,
            ground_noise: 0.02,
            sensor_origin: origin,
            calib: CameraCalib::forward_looking(160.0, 160.0, 320.0, 120.0, 640, 240, origin)
                .expect("default camera is valid"),
            bleed_radius: 4,
            confusion_p: 0.2,
        }
    }
}

impl SceneSpec {
    /// Classes including background.
    pub fn m(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.classes.is_empty() || self.m() > 255 {
            return Err(Error::config("classes: need 1 to 254 foreground classes"));
        }
        if let Some(c) = self
            .classes
            .iter()
            .find(|c| !c.size.iter().all(|&s| pos(s)))
        {
            return Err(Error::config(format!(
                "classes: {} has a non-positive size",
                c.name
            )));
        }
        if self.num_boxes[0] > self.num_boxes[1] {
            return Err(Error::config("num_boxes: min exceeds max"));
        }
        if !pos(self.ground_density) || !pos(self.surface_density) {
            return Err(Error::config("densities must be positive"));
        }
        if !pos(self.ground_extent) || !(self.ground_noise >= 0.0) || !(self.min_gap >= 0.0) {
            return Err(Error::config(
                "ground_extent must be positive, ground_noise and min_gap non-negative",
            ));
        }
        if !(self.box_x_range[0] < self.box_x_range[1]) {
            return Err(Error::config("box_x_range must be increasing"));
        }
        if !(0.0..=1.0).contains(&self.confusion_p) {
            return Err(Error::config("confusion_p must lie in [0, 1]"));
        }
        if !self.sensor_origin.iter().all(|v| v.is_finite()) {
            return Err(Error::config("sensor_origin must be finite"));
        }
        self.calib.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: PointCloud,
    pub true_labels: Vec<u8>,
    pub boxes: Vec<Box3D>,
    pub mask_clean: SemanticMask,
    pub mask_corrupt: SemanticMask,
    pub calib: CameraCalib,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn footprint_radius(size: [f64; 3]) -> f64 {
    0.5 * size[0].hypot(size[1])
}

fn place_boxes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Box3D>> {
    let count = rng.gen_range(spec.num_boxes[0]..=spec.num_boxes[1]);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    let e = spec.ground_extent;
    for i in 0..count {
        // class and position are redrawn together, so a crowded scene
        // falls back to smaller objects rather than failing outright
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let class = rng.gen_range(0..spec.classes.len());
            let size = spec.classes[class].size;
            let r = footprint_radius(size);
            let (xlo, xhi) = (
                spec.box_x_range[0].max(-e) + r,
                spec.box_x_range[1].min(e) - r,
            );
            let (ylo, yhi) = (-e + r, e - r);
            if !(xlo < xhi && ylo < yhi) {
                continue;
            }
            let c = [rng.gen_range(xlo..xhi), rng.gen_range(ylo..yhi)];
            let clear = boxes.iter().all(|b| {
                let d = (b.center[0] - c[0]).hypot(b.center[1] - c[1]);
                d >= r + footprint_radius(b.size) + spec.min_gap
            });
            if clear {
                placed = Some((class, size, c));
                break;
            }
        }
        let (class, size, c) = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place box {} of {count} without overlap after {PLACEMENT_TRIES} tries",
                i + 1
            ))
        })?;
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        boxes.push(Box3D {
            center: [c[0], c[1], 0.5 * size[2]],
            size,
            yaw,
            class_id: class as u32 + 1,
        });
    }
    Ok(boxes)
}

fn poisson_count(area: f64, density: f64, rng: &mut ChaCha8Rng) -> usize {
    // fractional expectation resolved by one Bernoulli draw
    let mean = area * density;
    let base = mean.floor();
    base as usize + (rng.gen::<f64>() < mean - base) as usize
}

fn sample_ground(spec: &SceneSpec, boxes: &[Box3D], rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    let e = spec.ground_extent;
    let n = poisson_count(4.0 * e * e, spec.ground_density, rng);
    let noise = Normal::new(0.0, spec.ground_noise).expect("noise is finite and non-negative");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.gen_range(-e..e);
        let y = rng.gen_range(-e..e);
        let z = noise.sample(rng);
        let under_box = boxes.iter().any(|b| {
            let q = b.to_local([x, y, 0.0]);
            q[0].abs() <= 0.5 * b.size[0] && q[1].abs() <= 0.5 * b.size[1]
        });
        if !under_box {
            out.push([x as f32, y as f32, z as f32]);
        }
    }
    out
}

fn sample_surface(b: &Box3D, density: f64, rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    let h = b.size.map(|s| 0.5 * s * (1.0 - SURFACE_INSET));
    // (fixed axis, fixed value, free axes)
    let faces = [
        (2, h[2], [0, 1]),
        (0, h[0], [1, 2]),
        (0, -h[0], [1, 2]),
        (1, h[1], [0, 2]),
        (1, -h[1], [0, 2]),
    ];
    let mut out = Vec::new();
    for (axis, value, free) in faces {
        let area = 4.0 * h[free[0]] * h[free[1]];
        for _ in 0..poisson_count(area, density, rng) {
            let mut q = [0.0; 3];
            q[axis] = value;
            for &f in &free {
                q[f] = rng.gen_range(-h[f]..=h[f]);
            }
            let p = b.to_world(q);
            out.push([p[0] as f32, p[1] as f32, p[2] as f32]);
        }
    }
    out
}

/// Entry distance of a ray into a box, if it hits in front of the origin.
fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &Box3D) -> Option<f64> {
    let o = b.to_local(origin);
    let (s, c) = b.yaw.sin_cos();
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        let h = 0.5 * b.size[k];
        if d[k].abs() < 1e-15 {
            if o[k].abs() > h {
                return None;
            }
            continue;
        }
        let (a, bb) = ((-h - o[k]) / d[k], (h - o[k]) / d[k]);
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
        if t0 > t1 {
            return None;
        }
    }
    Some(t0)
}

/// Nearest-box class per pixel, cast through pixel centers.
pub fn render_mask(boxes: &[Box3D], calib: &CameraCalib, m: usize) -> SemanticMask {
    let mut mask = SemanticMask::background(calib.width, calib.height, m as u32);
    // camera center and axes in the LiDAR frame: R^T
    let e = &calib.extrinsic;
    let r = |i: usize, j: usize| e[i][j];
    let center: [f64; 3] = std::array::from_fn(|j| -(0..3).map(|i| r(i, j) * e[i][3]).sum::<f64>());
    for v in 0..calib.height {
        for u in 0..calib.width {
            let cam = [
                (u as f64 + 0.5 - calib.cx) / calib.fx,
                (v as f64 + 0.5 - calib.cy) / calib.fy,
                1.0,
            ];
            let dir: [f64; 3] = std::array::from_fn(|j| (0..3).map(|i| r(i, j) * cam[i]).sum());
            let mut best: Option<(f64, u32)> = None;
            for b in boxes {
                if let Some(t) = ray_box(center, dir, b) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, b.class_id));
                    }
                }
            }
            if let Some((_, class)) = best {
                mask.set(u, v, class as u8);
            }
        }
    }
    mask
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, GEOMETRY_STREAM);
    let boxes = place_boxes(spec, &mut rng)?;
    generate_scene_with_boxes(spec, boxes, &mut rng)
}

/// Builds a scene around given boxes instead of sampling them.
pub fn generate_scene_with_boxes(
    spec: &SceneSpec,
    boxes: Vec<Box3D>,
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    let m = spec.m();
    for b in &boxes {
        b.validate(m)?;
    }
    let mut xyz = sample_ground(spec, &boxes, rng);
    for b in &boxes {
        xyz.extend(sample_surface(b, spec.surface_density, rng));
    }
    let points = PointCloud::new(xyz);
    let true_labels = paint_3d(&points, &boxes, m)?.labels();
    let mask_clean = render_mask(&boxes, &spec.calib, m);
    let mask_corrupt = bleed_mask(&mask_clean, spec.bleed_radius);
    Ok(Scene {
        points,
        true_labels,
        boxes,
        mask_clean,
        mask_corrupt,
        calib: spec.calib.clone(),
    })
}

/// Grows every foreground region by a `(2r + 1)`-square window. Where
/// grown regions meet, the lowest class index wins.
pub fn bleed_mask(mask: &SemanticMask, r: u32) -> SemanticMask {
    if r == 0 {
        return mask.clone();
    }
    const NONE: u8 = u8::MAX;
    let (w, h, r) = (mask.width as usize, mask.height as usize, r as usize);
    let key: Vec<u8> = mask
        .data
        .iter()
        .map(|&c| if c == 0 { NONE } else { c })
        .collect();
    // separable sliding minimum: rows, then columns
    let mut rows = vec![NONE; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = key[y * w + lo..=y * w + hi].iter().copied().min().unwrap();
        }
    }
    let mut data = vec![0u8; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let k = (lo..=hi).map(|yy| rows[yy * w + x]).min().unwrap();
            data[y * w + x] = if k == NONE { 0 } else { k };
        }
    }
    SemanticMask {
        width: mask.width,
        height: mask.height,
        classes: mask.classes,
        data,
    }
}

/// Seed of the 3D label corruption for a scene seed.
pub fn corruption_seed(scene_seed: u64) -> u64 {
    rng_for(scene_seed, CORRUPTION_STREAM).gen()
}

/// Painted label sources for a scene: 2D from the corrupted mask, 3D from
/// the true boxes with class swaps.
pub fn paint_scene(scene: &Scene, spec: &SceneSpec) -> Result<(SemanticScores, SemanticScores)> {
    let m = spec.m();
    let p2d = paint_2d(&scene.points, &scene.mask_corrupt, &scene.calib)?;
    let clean3d = paint_3d(&scene.points, &scene.boxes, m)?;
    let seed = corruption_seed(spec.seed);
    let p3d = corrupt_scores(
        &clean3d,
        Corruption::LabelFlip {
            p: spec.confusion_p,
        },
        seed,
    )?;
    Ok((p2d, p3d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_scenes: usize,
    /// Scene `i` uses seed `seed + i`.
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Template for every scene; its own seed is ignored.
    pub scene: SceneSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_scenes: 40,
            seed: 7,
            train_fraction: 0.8,
            val_fraction: 0.2,
            scene: SceneSpec::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scenes == 0 {
            return Err(Error::config("num_scenes must be at least 1"));
        }
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train_fraction)
            || !ok(self.val_fraction)
            || (self.train_fraction + self.val_fraction - 1.0).abs() > 1e-9
        {
            return Err(Error::config(
                "train_fraction and val_fraction must sum to 1",
            ));
        }
        self.scene.validate()
    }

    pub fn num_train(&self) -> usize {
        (self.train_fraction * self.num_scenes as f64).round() as usize
    }

    pub fn scene_spec(&self, index: usize) -> SceneSpec {
        SceneSpec {
            seed: self.seed.wrapping_add(index as u64),
            ..self.scene.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFiles {
    pub points: String,
    pub labels: String,
    pub boxes: String,
    pub calib: String,
    pub mask_clean: String,
    pub mask_corrupt: String,
    pub p2d: String,
    pub p3d: String,
}

impl SceneFiles {
    fn under(dir: &str) -> Self {
        let f = |name: &str| format!("{dir}/{name}");
        SceneFiles {
            points: f("points.bin"),
            labels: f("labels.bin"),
            boxes: f("boxes.json"),
            calib: f("calib.json"),
            mask_clean: f("mask_clean.pgm"),
            mask_corrupt: f("mask_corrupt.pgm"),
            p2d: f("p2d.fpsc"),
            p3d: f("p3d.fpsc"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub num_points: usize,
    pub files: SceneFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub m: usize,
    pub class_names: Vec<String>,
    pub config: SynthConfig,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.scenes.iter().filter(move |e| e.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.m != self.config.scene.m() || self.class_names.len() != self.m {
            return Err(Error::config(
                "manifest class count disagrees with its config",
            ));
        }
        if self.scenes.is_empty() {
            return Err(Error::config("manifest lists no scenes"));
        }
        Ok(())
    }
}

pub fn write_scene(
    dir: &Path,
    files: &SceneFiles,
    scene: &Scene,
    p2d: &SemanticScores,
    p3d: &SemanticScores,
) -> Result<()> {
    let at = |f: &str| dir.join(f);
    formats::write_points(&at(&files.points), &scene.points)?;
    formats::write_labels(&at(&files.labels), &scene.true_labels)?;
    formats::write_json(&at(&files.boxes), &scene.boxes)?;
    formats::write_json(&at(&files.calib), &scene.calib)?;
    formats::write_pgm(&at(&files.mask_clean), &scene.mask_clean)?;
    formats::write_pgm(&at(&files.mask_corrupt), &scene.mask_corrupt)?;
    formats::write_scores(&at(&files.p2d), p2d)?;
    formats::write_scores(&at(&files.p3d), p3d)
}

/// Generates, paints and writes every scene, then the manifest.
pub fn build_dataset(cfg: &SynthConfig, out: &Path, exec: Exec) -> Result<Manifest> {
    cfg.validate()?;
    let train = cfg.num_train();
    let entries = exec.try_map(cfg.num_scenes, |i| -> Result<ManifestEntry> {
        let spec = cfg.scene_spec(i);
        let scene = generate_scene(&spec)?;
        let (p2d, p3d) = paint_scene(&scene, &spec)?;
        let id = format!("{i:04}");
        let files = SceneFiles::under(&format!("scenes/{id}"));
        write_scene(out, &files, &scene, &p2d, &p3d)?;
        Ok(ManifestEntry {
            id,
            seed: spec.seed,
            split: if i < train { Split::Train } else { Split::Val },
            num_points: scene.points.len(),
            files,
        })
    })?;
    let manifest = Manifest {
        m: cfg.scene.m(),
        class_names: std::iter::once("background".to_string())
            .chain(cfg.scene.classes.iter().map(|c| c.name.clone()))
            .collect(),
        config: cfg.clone(),
        scenes: entries,
    };
    formats::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// One scene as consumed by training and evaluation.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub id: String,
    pub points: PointCloud,
    pub labels: Vec<u8>,
    pub boxes: Vec<Box3D>,
    pub p2d: SemanticScores,
    pub p3d: SemanticScores,
}

impl SceneData {
    pub fn validate(&self, m: usize) -> Result<()> {
        let n = self.points.len();
        if self.labels.len() != n || self.p2d.n != n || self.p3d.n != n {
            return Err(Error::shape(format!(
                "scene {}: per-point arrays disagree on n",
                self.id
            )));
        }
        if self.p2d.m != m || self.p3d.m != m {
            return Err(Error::shape(format!(
                "scene {}: scores have {} / {} classes, dataset {m}",
                self.id, self.p2d.m, self.p3d.m
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= m) {
            return Err(Error::data(format!(
                "scene {}: label {l} out of range",
                self.id
            )));
        }
        self.points.check_finite()?;
        self.p2d.validate()?;
        self.p3d.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest = formats::read_json(&root.join("manifest.json"))?;
        manifest.validate()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn m(&self) -> usize {
        self.manifest.m
    }

    pub fn load_scene(&self, entry: &ManifestEntry) -> Result<SceneData> {
        let at = |f: &str| self.root.join(f);
        let scene = SceneData {
            id: entry.id.clone(),
            points: formats::read_points(&at(&entry.files.points))?,
            labels: formats::read_labels(&at(&entry.files.labels))?,
            boxes: formats::read_json(&at(&entry.files.boxes))?,
            p2d: formats::read_scores(&at(&entry.files.p2d))?,
            p3d: formats::read_scores(&at(&entry.files.p3d))?,
        };
        scene.validate(self.m())?;
        Ok(scene)
    }

    pub fn load_split(&self, split: Split, exec: Exec) -> Result<Vec<SceneData>> {
        let entries: Vec<_> = self.manifest.split(split).collect();
        exec.try_map(entries.len(), |i| self.load_scene(entries[i]))
    }
}

/// Points per true class, summed over the given scenes.
pub fn class_counts<'a>(labels: impl IntoIterator<Item = &'a [u8]>, m: usize) -> Vec<usize> {
    let mut out = vec![0; m];
    for ls in labels {
        for &l in ls {
            out[l as usize] += 1;
        }
    }
    out
}

/// Deterministic permutation of `0..n` for shuffling.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}
