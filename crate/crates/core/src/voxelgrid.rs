//! Fixed-slot voxelization.
//!
//! In-range points are binned into an axis-aligned grid. Every non-empty
//! voxel carries exactly `max_points` slots: over-full voxels keep a seeded
//! uniform sample without replacement, under-full voxels are topped up by
//! repeating randomly chosen members. True members always occupy the
//! leading slots, so the pad mask is recoverable from the counts alone.
//!
//! Slot layout is `[x, y, z | 2D scores (m) | 3D scores (m)]`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::PointCloud;
use crate::painting::SemanticScores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelConfig {
    /// Voxel edge lengths in meters.
    pub size: [f64; 3],
    pub range_min: [f64; 3],
    /// Exclusive upper bound per axis.
    pub range_max: [f64; 3],
    /// Slots per voxel.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        VoxelConfig {
            size: [0.2, 0.2, 8.0],
            range_min: [-20.0, -20.0, -2.0],
            range_max: [20.0, 20.0, 6.0],
            max_points: 16,
            seed: 0,
        }
    }
}

impl VoxelConfig {
    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !(self.size[k] > 0.0) {
                return Err(Error::config(format!("voxel size axis {k} must be > 0")));
            }
            if !(self.range_max[k] > self.range_min[k]) {
                return Err(Error::config(format!("voxel range axis {k} is empty")));
            }
        }
        if self.max_points == 0 {
            return Err(Error::config("max_points must be at least 1"));
        }
        Ok(())
    }

    /// Cells per axis.
    pub fn dims(&self) -> [i32; 3] {
        std::array::from_fn(|k| {
            ((self.range_max[k] - self.range_min[k]) / self.size[k]).ceil() as i32
        })
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.range_min[k] && p[k] < self.range_max[k])
    }
}

/// Grid cell of a point, or `None` outside the configured range.
pub fn voxel_index(p: [f64; 3], cfg: &VoxelConfig) -> Option<[i32; 3]> {
    if !cfg.contains(p) {
        return None;
    }
    let dims = cfg.dims();
    let mut idx = [0; 3];
    for k in 0..3 {
        let i = ((p[k] - cfg.range_min[k]) / cfg.size[k]).floor() as i32;
        // rounding right below the upper bound can land one past the end
        idx[k] = i.min(dims[k] - 1);
    }
    Some(idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBatch {
    /// Classes per label source.
    pub m: usize,
    /// Slots per voxel.
    pub max_points: usize,
    /// Sorted lexicographically, unique.
    pub coords: Vec<[i32; 3]>,
    /// True member count per voxel before sampling or padding.
    pub counts: Vec<u32>,
    /// `e * max_points * channels`.
    pub features: Vec<f32>,
    /// `e * max_points`; true marks a duplicated padding slot.
    pub pad_mask: Vec<bool>,
    /// Source point index per slot. Empty when the batch was read from a file.
    pub sources: Vec<u32>,
}

impl VoxelBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        3 + 2 * self.m
    }

    /// Number of leading slots holding distinct members.
    #[inline]
    pub fn kept(&self, voxel: usize) -> usize {
        (self.counts[voxel] as usize).min(self.max_points)
    }

    #[inline]
    pub fn slot(&self, voxel: usize, slot: usize) -> &[f32] {
        let c = self.channels();
        let base = (voxel * self.max_points + slot) * c;
        &self.features[base..base + c]
    }

    pub fn pad_mask_from_counts(counts: &[u32], max_points: usize) -> Vec<bool> {
        counts
            .iter()
            .flat_map(|&c| (0..max_points).map(move |j| j >= (c as usize).min(max_points)))
            .collect()
    }

    /// Voxel ordinal for a cell, if present.
    pub fn find(&self, coord: [i32; 3]) -> Option<usize> {
        self.coords.binary_search(&coord).ok()
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.len();
        let slots = e * self.max_points;
        if self.counts.len() != e
            || self.features.len() != slots * self.channels()
            || self.pad_mask.len() != slots
            || !(self.sources.is_empty() || self.sources.len() == slots)
        {
            return Err(Error::shape(
                "voxel batch buffers disagree with e/M/channels",
            ));
        }
        if self.coords.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data("voxel coords must be sorted and unique"));
        }
        if self.counts.contains(&0) {
            return Err(Error::data("stored voxel with zero points"));
        }
        Ok(())
    }
}

pub fn voxelize(
    points: &PointCloud,
    p2d: &SemanticScores,
    p3d: &SemanticScores,
    cfg: &VoxelConfig,
) -> Result<VoxelBatch> {
    voxelize_with(points, p2d, p3d, cfg, Exec::default())
}

pub fn voxelize_with(
    points: &PointCloud,
    p2d: &SemanticScores,
    p3d: &SemanticScores,
    cfg: &VoxelConfig,
    exec: Exec,
) -> Result<VoxelBatch> {
    cfg.validate()?;
    if p2d.m != p3d.m {
        return Err(Error::config(format!(
            "2D scores have {} classes, 3D scores {}",
            p2d.m, p3d.m
        )));
    }
    if p2d.n != points.len() || p3d.n != points.len() {
        return Err(Error::shape(format!(
            "{} points but {} 2D / {} 3D score rows",
            points.len(),
            p2d.n,
            p3d.n
        )));
    }
    points.check_finite()?;
    let m = p2d.m;
    let mp = cfg.max_points;
    let channels = 3 + 2 * m;

    let mut keyed: Vec<([i32; 3], u32)> = (0..points.len())
        .filter_map(|i| voxel_index(points.point(i), cfg).map(|v| (v, i as u32)))
        .collect();
    keyed.sort_unstable();

    let mut coords = Vec::new();
    let mut starts = Vec::new();
    for (i, (v, _)) in keyed.iter().enumerate() {
        if coords.last() != Some(v) {
            coords.push(*v);
            starts.push(i);
        }
    }
    starts.push(keyed.len());

    // Each voxel draws from its own ChaCha stream so voxels can be filled
    // independently and in any order.
    let slot_sources: Vec<Vec<u32>> = exec.map(coords.len(), |vi| {
        let members: Vec<u32> = keyed[starts[vi]..starts[vi + 1]]
            .iter()
            .map(|&(_, i)| i)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(vi as u64);
        let n = members.len();
        let mut slots = Vec::with_capacity(mp);
        if n > mp {
            let mut picked = index::sample(&mut rng, n, mp).into_vec();
            picked.sort_unstable();
            slots.extend(picked.into_iter().map(|k| members[k]));
        } else {
            slots.extend_from_slice(&members);
            while slots.len() < mp {
                slots.push(members[rng.gen_range(0..n)]);
            }
        }
        slots
    });

    let e = coords.len();
    let mut features = vec![0.0f32; e * mp * channels];
    let mut sources = Vec::with_capacity(e * mp);
    for (vi, slots) in slot_sources.iter().enumerate() {
        for (j, &src) in slots.iter().enumerate() {
            let base = (vi * mp + j) * channels;
            let row = &mut features[base..base + channels];
            let s = src as usize;
            row[..3].copy_from_slice(&points.xyz[s]);
            row[3..3 + m].copy_from_slice(p2d.row(s));
            row[3 + m..].copy_from_slice(p3d.row(s));
            sources.push(src);
        }
    }
    let counts: Vec<u32> = (0..e)
        .map(|vi| (starts[vi + 1] - starts[vi]) as u32)
        .collect();
    let pad_mask = VoxelBatch::pad_mask_from_counts(&counts, mp);
    Ok(VoxelBatch {
        m,
        max_points: mp,
        coords,
        counts,
        features,
        pad_mask,
        sources,
    })
}
