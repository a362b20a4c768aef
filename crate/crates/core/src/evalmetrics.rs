//! Point-label and detection-style evaluation.
//!
//! Detections are BEV centers recovered from labelled points by clustering.
//! They are scored with center-distance average precision: greedy matching
//! in descending score order, then 101-point interpolated precision.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use petgraph::unionfind::UnionFind;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::PointCloud;
use crate::neuralcore::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "center")]
    pub bev_center: [f64; 2],
    pub class_id: u32,
    pub score: f64,
    /// Scene the detection belongs to; matching never crosses frames.
    #[serde(default)]
    pub frame: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "center")]
    pub bev_center: [f64; 2],
    pub class_id: u32,
    #[serde(default)]
    pub frame: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApConfig {
    /// Matching radii in meters, ascending.
    pub thresholds: Vec<f64>,
    pub recall_points: usize,
}

impl Default for ApConfig {
    fn default() -> Self {
        ApConfig {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            recall_points: 101,
        }
    }
}

impl ApConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self
                .thresholds
                .iter()
                .any(|t| !(*t > 0.0) || !t.is_finite())
        {
            return Err(Error::config("thresholds must be finite and positive"));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("thresholds must be strictly ascending"));
        }
        if self.recall_points < 2 {
            return Err(Error::config("recall_points must be at least 2"));
        }
        Ok(())
    }
}

fn bev_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Single-linkage clusters of same-class points in the ground plane.
///
/// Each point votes for its argmax class; background (class 0) is ignored.
/// Clusters with at least `min_pts` members become one detection at the
/// mean BEV position, scored by the members' mean probability of that
/// class. Output is ordered by class, then by the lowest member index.
pub fn cluster_detections(
    points: &PointCloud,
    class_probs: &Mat,
    min_pts: usize,
    radius: f64,
) -> Result<Vec<Detection>> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::config("cluster radius must be positive"));
    }
    if class_probs.rows != points.len() {
        return Err(Error::shape(format!(
            "{} probability rows for {} points",
            class_probs.rows,
            points.len()
        )));
    }
    let m = class_probs.cols;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m];
    for i in 0..points.len() {
        let row = class_probs.row(i);
        let mut best = 0;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        by_class[best].push(i);
    }
    let mut out = Vec::new();
    for (class, members) in by_class.iter().enumerate().skip(1) {
        if members.is_empty() {
            continue;
        }
        let xy: Vec<[f64; 2]> = members
            .iter()
            .map(|&i| {
                let p = points.point(i);
                [p[0], p[1]]
            })
            .collect();
        // grid of cell size `radius`: neighbors lie in the 3x3 block
        let cell = |p: [f64; 2]| {
            (
                (p[0] / radius).floor() as i64,
                (p[1] / radius).floor() as i64,
            )
        };
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (k, &p) in xy.iter().enumerate() {
            grid.entry(cell(p)).or_default().push(k);
        }
        let mut uf = UnionFind::<usize>::new(xy.len());
        for (k, &p) in xy.iter().enumerate() {
            let (cx, cy) = cell(p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for &j in grid.get(&(cx + dx, cy + dy)).into_iter().flatten() {
                        if j > k && bev_dist(p, xy[j]) <= radius {
                            uf.union(k, j);
                        }
                    }
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let labels = uf.into_labeling();
        let mut first_of_root: HashMap<usize, usize> = HashMap::new();
        for (k, &root) in labels.iter().enumerate() {
            let first = *first_of_root.entry(root).or_insert(k);
            groups.entry(first).or_default().push(k);
        }
        for group in groups.values().filter(|g| g.len() >= min_pts.max(1)) {
            let n = group.len() as f64;
            let (mut sx, mut sy, mut sp) = (0.0, 0.0, 0.0);
            for &k in group {
                sx += xy[k][0];
                sy += xy[k][1];
                sp += class_probs.get(members[k], class);
            }
            out.push(Detection {
                bev_center: [sx / n, sy / n],
                class_id: class as u32,
                score: (sp / n).clamp(0.0, 1.0),
                frame: 0,
            });
        }
    }
    Ok(out)
}

/// Interpolated precision averaged over `recall_points` evenly spaced
/// recall levels from 0 to 1, given the PR curve in ranking order.
pub fn interpolated_ap(precision: &[f64], recall: &[f64], recall_points: usize) -> f64 {
    // running max from the right turns precision into its envelope
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let steps = (recall_points - 1) as f64;
    let mut sum = 0.0;
    let mut i = 0;
    for k in 0..recall_points {
        let level = k as f64 / steps;
        while i < recall.len() && recall[i] < level {
            i += 1;
        }
        if i < recall.len() {
            sum += envelope[i];
        }
    }
    sum / recall_points as f64
}

/// AP of one class at one matching radius. `None` when the class has no
/// ground truth.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: u32,
    threshold: f64,
    recall_points: usize,
) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class_id).collect();
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
    // stable: equal scores keep input order
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut matched = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for d in order {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] || g.frame != d.frame {
                continue;
            }
            let dist = bev_dist(d.bev_center, g.bev_center);
            if dist <= threshold && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        match best {
            Some((_, j)) => {
                matched[j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    Some(interpolated_ap(&precision, &recall, recall_points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Class id, then threshold label, to AP.
    pub per_class: BTreeMap<u32, BTreeMap<String, f64>>,
    /// Mean over classes at each threshold.
    pub per_threshold: BTreeMap<String, f64>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeanAp {
    Defined(ApReport),
    /// No foreground ground truth at all; mAP is undefined.
    NoGroundTruth,
}

impl MeanAp {
    pub fn map(&self) -> Option<f64> {
        match self {
            MeanAp::Defined(r) => Some(r.map),
            MeanAp::NoGroundTruth => None,
        }
    }
}

pub fn threshold_label(t: f64) -> String {
    format!("{t}")
}

/// Mean AP over every foreground class present in the ground truth and
/// every threshold.
pub fn mean_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    cfg: &ApConfig,
    exec: Exec,
) -> Result<MeanAp> {
    cfg.validate()?;
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class_id).filter(|&c| c != 0).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Ok(MeanAp::NoGroundTruth);
    }
    let nt = cfg.thresholds.len();
    let aps = exec.map(classes.len() * nt, |k| {
        let (c, t) = (classes[k / nt], cfg.thresholds[k % nt]);
        average_precision(dets, gts, c, t, cfg.recall_points).expect("class has ground truth")
    });
    let mut per_class = BTreeMap::new();
    let mut per_threshold = BTreeMap::new();
    for (ci, &c) in classes.iter().enumerate() {
        let row: BTreeMap<String, f64> = cfg
            .thresholds
            .iter()
            .enumerate()
            .map(|(ti, &t)| (threshold_label(t), aps[ci * nt + ti]))
            .collect();
        per_class.insert(c, row);
    }
    for (ti, &t) in cfg.thresholds.iter().enumerate() {
        let mean =
            (0..classes.len()).map(|ci| aps[ci * nt + ti]).sum::<f64>() / classes.len() as f64;
        per_threshold.insert(threshold_label(t), mean);
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok(MeanAp::Defined(ApReport {
        per_class,
        per_threshold,
        map,
    }))
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(out)
}

/// Per-class precision, recall and F1 from a confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `counts[truth][pred]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub m: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(m: usize) -> Self {
        Confusion {
            m,
            counts: vec![0; m * m],
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.m + pred] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hit: u64 = (0..self.m).map(|c| self.counts[c * self.m + c]).sum();
        hit as f64 / self.total().max(1) as f64
    }

    /// Zero denominators give zero.
    pub fn class(&self, c: usize) -> ClassMetrics {
        let tp = self.counts[c * self.m + c] as f64;
        let truth: u64 = (0..self.m).map(|p| self.counts[c * self.m + p]).sum();
        let pred: u64 = (0..self.m).map(|t| self.counts[t * self.m + c]).sum();
        let ratio = |a: f64, b: u64| if b == 0 { 0.0 } else { a / b as f64 };
        let precision = ratio(tp, pred);
        let recall = ratio(tp, truth);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            precision,
            recall,
            f1,
        }
    }

    /// Classes that occur in the truth or in the predictions.
    pub fn present(&self) -> Vec<usize> {
        (0..self.m)
            .filter(|&c| {
                (0..self.m).any(|k| self.counts[c * self.m + k] + self.counts[k * self.m + c] > 0)
            })
            .collect()
    }

    /// Mean F1 over [`Confusion::present`] classes.
    pub fn macro_f1(&self) -> f64 {
        let present = self.present();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().map(|&c| self.class(c).f1).sum::<f64>() / present.len() as f64
    }
}
