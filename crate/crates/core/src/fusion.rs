//! Adaptive attention over two label sources.
//!
//! Per voxel, a PointNet-style encoder produces a local feature (shared MLP
//! over the slots, then max over slots); a second MLP plus a max over all
//! voxels of the same cloud gives one global feature. The concatenation of
//! local and global feeds a small MLP whose sigmoid output `s` gates the
//! labels of every point in that voxel: 2D scores are scaled by `s`, 3D
//! scores by `1 - s`. The gated slots are what a downstream consumer sees;
//! here a per-point classifier head stands in for that consumer.
//!
//! Coordinates are shifted and scaled into roughly `[-1, 1]` before they
//! enter any MLP. Stored and exported coordinates are never modified.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::formats::Tensor;
use crate::geometry::PointCloud;
use crate::neuralcore::{
    Activation, BatchNormParams, BatchStats, BoundLayer, DenseLayerParams, Mat, Mlp, Mode, Tape,
    Var,
};
use crate::painting::SemanticScores;
use crate::voxelgrid::{voxel_index, VoxelBatch, VoxelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Classes per label source, background included.
    pub m: usize,
    /// Local feature width.
    pub c1: usize,
    /// Global feature width.
    pub c2: usize,
    pub att_hidden: usize,
    pub head_hidden: usize,
    /// Network input coordinate is `(xyz - coord_offset) * coord_scale`.
    pub coord_offset: [f64; 3],
    pub coord_scale: [f64; 3],
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig::for_range(11, &VoxelConfig::default())
    }
}

impl FusionConfig {
    /// Default widths with coordinates normalized to the voxel range.
    pub fn for_range(m: usize, voxels: &VoxelConfig) -> Self {
        let mut coord_offset = [0.0; 3];
        let mut coord_scale = [1.0; 3];
        for k in 0..3 {
            coord_offset[k] = 0.5 * (voxels.range_min[k] + voxels.range_max[k]);
            coord_scale[k] = 2.0 / (voxels.range_max[k] - voxels.range_min[k]);
        }
        FusionConfig {
            m,
            c1: 64,
            c2: 128,
            att_hidden: 64,
            head_hidden: 64,
            coord_offset,
            coord_scale,
        }
    }

    pub fn channels(&self) -> usize {
        3 + 2 * self.m
    }

    #[inline]
    fn normalize(&self, xyz: &[f32]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = (xyz[k] as f64 - self.coord_offset[k]) * self.coord_scale[k];
        }
        out
    }
}

/// How the per-voxel gate value is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    /// Computed by the attention network.
    Learned,
    /// Pinned for every voxel: 1 keeps only 2D labels, 0 only 3D labels.
    Fixed(f64),
}

/// All trainable state of the fusion network.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub config: FusionConfig,
    /// `(3 + 2m) -> c1`, batch norm + ReLU.
    pub mlp_l: Mlp,
    /// `c1 -> c2`, batch norm + ReLU.
    pub mlp_g: Mlp,
    /// `(c1 + c2) -> att_hidden -> 1`; the output layer is zero-initialized
    /// so the gate starts at exactly 0.5.
    pub mlp_att: Mlp,
    /// `(3 + 2m) -> head_hidden -> m` per-point class logits.
    pub head: Mlp,
}

impl FusionParams {
    pub fn init(config: FusionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.channels();
        let head = Mlp {
            layers: vec![
                DenseLayerParams::init(ch, config.head_hidden, true, Activation::Relu, &mut rng),
                DenseLayerParams::init(
                    config.head_hidden,
                    config.m,
                    false,
                    Activation::Identity,
                    &mut rng,
                ),
            ],
        };
        let mlp_l = Mlp {
            layers: vec![DenseLayerParams::init(
                ch,
                config.c1,
                true,
                Activation::Relu,
                &mut rng,
            )],
        };
        let mlp_g = Mlp {
            layers: vec![DenseLayerParams::init(
                config.c1,
                config.c2,
                true,
                Activation::Relu,
                &mut rng,
            )],
        };
        let mut out =
            DenseLayerParams::init(config.att_hidden, 1, false, Activation::Identity, &mut rng);
        out.weight.data.fill(0.0);
        let mlp_att = Mlp {
            layers: vec![
                DenseLayerParams::init(
                    config.c1 + config.c2,
                    config.att_hidden,
                    true,
                    Activation::Relu,
                    &mut rng,
                ),
                out,
            ],
        };
        FusionParams {
            config,
            mlp_l,
            mlp_g,
            mlp_att,
            head,
        }
    }

    /// Checks every MLP's width chain against the configuration.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        let expect = [
            ("mlp_l", &self.mlp_l, c.channels(), c.c1),
            ("mlp_g", &self.mlp_g, c.c1, c.c2),
            ("mlp_att", &self.mlp_att, c.c1 + c.c2, 1),
            ("head", &self.head, c.channels(), c.m),
        ];
        for (name, mlp, i, o) in expect {
            mlp.check_chain()?;
            if mlp.in_dim() != i || mlp.out_dim() != o {
                return Err(Error::config(format!(
                    "{name}: {} -> {}, expected {i} -> {o}",
                    mlp.in_dim(),
                    mlp.out_dim()
                )));
            }
        }
        Ok(())
    }

    fn parts(&self) -> [(&'static str, &Mlp); 4] {
        [
            ("mlp_l", &self.mlp_l),
            ("mlp_g", &self.mlp_g),
            ("mlp_att", &self.mlp_att),
            ("head", &self.head),
        ]
    }

    /// Trainable tensors with qualified names, in a fixed order.
    pub fn trainable(&self) -> Vec<(String, &Mat)> {
        self.parts()
            .into_iter()
            .flat_map(|(p, mlp)| {
                mlp.trainable()
                    .into_iter()
                    .map(move |(n, t)| (format!("{p}.{n}"), t))
            })
            .collect()
    }

    /// Mutable view in the order of [`FusionParams::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = self.mlp_l.trainable_mut();
        out.extend(self.mlp_g.trainable_mut());
        out.extend(self.mlp_att.trainable_mut());
        out.extend(self.head.trainable_mut());
        out
    }

    pub fn mlps_mut(&mut self) -> [(&'static str, &mut Mlp); 4] {
        [
            ("mlp_l", &mut self.mlp_l),
            ("mlp_g", &mut self.mlp_g),
            ("mlp_att", &mut self.mlp_att),
            ("head", &mut self.head),
        ]
    }

    pub fn mlps(&self) -> [(&'static str, &Mlp); 4] {
        self.parts()
    }

    pub fn is_finite(&self) -> bool {
        self.parts()
            .iter()
            .all(|(_, m)| m.layers.iter().all(DenseLayerParams::is_finite))
    }

    /// Every tensor, running statistics and coordinate normalization
    /// included, rounded to f32 for storage.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let mut out = vec![
            Tensor::new("config.coord_offset", vec![3], f(&self.config.coord_offset)),
            Tensor::new("config.coord_scale", vec![3], f(&self.config.coord_scale)),
        ];
        for (part, mlp) in self.parts() {
            for (i, l) in mlp.layers.iter().enumerate() {
                let name = |t: &str| format!("{part}.{i}.{t}");
                out.push(Tensor::new(
                    name("weight"),
                    vec![l.weight.rows, l.weight.cols],
                    f(&l.weight.data),
                ));
                out.push(Tensor::new(
                    name("bias"),
                    vec![l.bias.cols],
                    f(&l.bias.data),
                ));
                if let Some(n) = &l.norm {
                    let d = n.gamma.cols;
                    out.push(Tensor::new(name("gamma"), vec![d], f(&n.gamma.data)));
                    out.push(Tensor::new(name("beta"), vec![d], f(&n.beta.data)));
                    out.push(Tensor::new(
                        name("running_mean"),
                        vec![d],
                        f(&n.running_mean),
                    ));
                    out.push(Tensor::new(name("running_var"), vec![d], f(&n.running_var)));
                }
            }
        }
        out
    }

    /// Inverse of [`FusionParams::to_tensors`]; widths are read from the
    /// tensor shapes.
    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let find = |name: &str| tensors.iter().find(|t| t.name == name);
        let vec_of = |name: &str, len: Option<usize>| -> Result<Vec<f64>> {
            let t = find(name).ok_or_else(|| Error::config(format!("missing tensor {name}")))?;
            if t.dims.len() != 1 || len.is_some_and(|l| t.dims[0] != l) {
                return Err(Error::shape(format!("tensor {name} has dims {:?}", t.dims)));
            }
            Ok(t.data.iter().map(|&v| v as f64).collect())
        };
        let mut used = 2;
        let mut load = |part: &str, last_identity: bool| -> Result<Mlp> {
            let mut layers = Vec::new();
            while let Some(w) = find(&format!("{part}.{}.weight", layers.len())) {
                let i = layers.len();
                if w.dims.len() != 2 {
                    return Err(Error::shape(format!("{} has dims {:?}", w.name, w.dims)));
                }
                let (rows, cols) = (w.dims[0], w.dims[1]);
                let weight = Mat::from_vec(rows, cols, w.data.iter().map(|&v| v as f64).collect())?;
                let bias =
                    Mat::from_vec(1, rows, vec_of(&format!("{part}.{i}.bias"), Some(rows))?)?;
                used += 2;
                let norm = match find(&format!("{part}.{i}.gamma")) {
                    None => None,
                    Some(_) => {
                        let g = |t: &str| vec_of(&format!("{part}.{i}.{t}"), Some(rows));
                        used += 4;
                        Some(BatchNormParams {
                            gamma: Mat::from_vec(1, rows, g("gamma")?)?,
                            beta: Mat::from_vec(1, rows, g("beta")?)?,
                            running_mean: g("running_mean")?,
                            running_var: g("running_var")?,
                        })
                    }
                };
                layers.push(DenseLayerParams {
                    weight,
                    bias,
                    norm,
                    activation: Activation::Relu,
                });
            }
            if layers.is_empty() {
                return Err(Error::config(format!("checkpoint has no {part} layers")));
            }
            if last_identity {
                layers.last_mut().unwrap().activation = Activation::Identity;
            }
            Ok(Mlp { layers })
        };
        let mlp_l = load("mlp_l", false)?;
        let mlp_g = load("mlp_g", false)?;
        let mlp_att = load("mlp_att", true)?;
        let head = load("head", true)?;
        if used != tensors.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, {used} recognized",
                tensors.len()
            )));
        }
        let m = head.out_dim();
        let config = FusionConfig {
            m,
            c1: mlp_l.out_dim(),
            c2: mlp_g.out_dim(),
            att_hidden: mlp_att.layers[0].out_dim(),
            head_hidden: head.layers[0].out_dim(),
            coord_offset: vec_of("config.coord_offset", Some(3))?.try_into().unwrap(),
            coord_scale: vec_of("config.coord_scale", Some(3))?.try_into().unwrap(),
        };
        let params = FusionParams {
            config,
            mlp_l,
            mlp_g,
            mlp_att,
            head,
        };
        params.validate()?;
        Ok(params)
    }

    /// Binds the tensors a gate mode needs. The attention branch is only
    /// bound for [`Gate::Learned`].
    pub fn bind(&self, tape: &mut Tape, gate: Gate, trainable: bool) -> BoundParams {
        let learned = gate == Gate::Learned;
        BoundParams {
            mlp_l: learned.then(|| self.mlp_l.bind(tape, trainable)),
            mlp_g: learned.then(|| self.mlp_g.bind(tape, trainable)),
            mlp_att: learned.then(|| self.mlp_att.bind(tape, trainable)),
            head: self.head.bind(tape, trainable),
        }
    }
}

/// Tape handles for [`FusionParams`].
pub struct BoundParams {
    pub mlp_l: Option<Vec<BoundLayer>>,
    pub mlp_g: Option<Vec<BoundLayer>>,
    pub mlp_att: Option<Vec<BoundLayer>>,
    pub head: Vec<BoundLayer>,
}

impl BoundParams {
    /// One entry per trainable tensor, aligned with
    /// [`FusionParams::trainable`]; `None` where the branch is unbound.
    pub fn vars(&self, params: &FusionParams) -> Vec<Option<Var>> {
        let mut out = Vec::new();
        let branches = [
            (&self.mlp_l, &params.mlp_l),
            (&self.mlp_g, &params.mlp_g),
            (&self.mlp_att, &params.mlp_att),
        ];
        for (bound, mlp) in branches {
            match bound {
                Some(b) => out.extend(b.iter().flat_map(|l| l.vars()).map(Some)),
                None => out.extend(std::iter::repeat_n(None, mlp.trainable().len())),
            }
        }
        out.extend(self.head.iter().flat_map(|l| l.vars()).map(Some));
        out
    }
}

/// Which slots get classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSelection {
    AllSlots,
    /// Skip padding duplicates.
    TrueSlots,
}

/// Network-ready view of one cloud's voxels.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub voxels: usize,
    pub max_points: usize,
    pub m: usize,
    /// `(voxels * max_points) x (3 + 2m)`, normalized coordinates.
    pub slots: Mat,
    /// Classified rows: normalized xyz.
    pub xyz: Mat,
    pub p2d: Mat,
    pub p3d: Mat,
    /// Voxel of each classified row.
    pub row_voxel: Vec<u32>,
    /// Flat slot index (`voxel * max_points + slot`) of each classified row.
    pub row_slot: Vec<u32>,
}

impl PreparedSample {
    pub fn new(batch: &VoxelBatch, config: &FusionConfig, rows: RowSelection) -> Result<Self> {
        if batch.channels() != config.channels() {
            return Err(Error::config(format!(
                "voxel features have {} channels, network expects {}",
                batch.channels(),
                config.channels()
            )));
        }
        if batch.is_empty() {
            return Err(Error::Contract("cloud without voxels".into()));
        }
        let (m, ch, mp) = (batch.m, batch.channels(), batch.max_points);
        let total = batch.len() * mp;
        let mut slots = Mat::zeros(total, ch);
        for s in 0..total {
            let src = &batch.features[s * ch..(s + 1) * ch];
            let dst = slots.row_mut(s);
            dst[..3].copy_from_slice(&config.normalize(&src[..3]));
            for (d, &v) in dst[3..].iter_mut().zip(&src[3..]) {
                *d = v as f64;
            }
        }
        let selected: Vec<usize> = (0..total)
            .filter(|&s| rows == RowSelection::AllSlots || !batch.pad_mask[s])
            .collect();
        let r = selected.len();
        let mut xyz = Mat::zeros(r, 3);
        let mut p2d = Mat::zeros(r, m);
        let mut p3d = Mat::zeros(r, m);
        for (i, &s) in selected.iter().enumerate() {
            let row = slots.row(s);
            xyz.row_mut(i).copy_from_slice(&row[..3]);
            p2d.row_mut(i).copy_from_slice(&row[3..3 + m]);
            p3d.row_mut(i).copy_from_slice(&row[3 + m..]);
        }
        Ok(PreparedSample {
            voxels: batch.len(),
            max_points: mp,
            m,
            slots,
            xyz,
            p2d,
            p3d,
            row_voxel: selected.iter().map(|&s| (s / mp) as u32).collect(),
            row_slot: selected.iter().map(|&s| s as u32).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.row_voxel.len()
    }
}

/// Tape outputs of one forward pass over several clouds.
pub struct Forward {
    /// `total_voxels x 1` gate values, present for [`Gate::Learned`].
    pub sigma: Option<Var>,
    /// `total_rows x m`.
    pub logits: Var,
    /// Batch statistics per network (`mlp_l`, `mlp_g`, `mlp_att`, `head`) in
    /// training mode.
    pub stats: Vec<(&'static str, Vec<Option<BatchStats>>)>,
}

fn stack_rows(mats: impl Iterator<Item = Mat>, cols: usize) -> Mat {
    let mut out = Mat {
        rows: 0,
        cols,
        data: Vec::new(),
    };
    for m in mats {
        out.rows += m.rows;
        out.data.extend_from_slice(&m.data);
    }
    out
}

/// Runs local and global aggregation and returns `(local, sigma)` vars.
fn attention_branch(
    params: &FusionParams,
    tape: &mut Tape,
    bound: &BoundParams,
    samples: &[&PreparedSample],
    mode: Mode,
    stats: &mut Vec<(&'static str, Vec<Option<BatchStats>>)>,
) -> Result<(Var, Var)> {
    let (Some(bl), Some(bg), Some(ba)) = (&bound.mlp_l, &bound.mlp_g, &bound.mlp_att) else {
        return Err(Error::Contract("attention branch is not bound".into()));
    };
    let ch = params.config.channels();
    let slots = tape.input(stack_rows(samples.iter().map(|s| s.slots.clone()), ch));
    let (hl, st) = params.mlp_l.forward(tape, bl, slots, mode)?;
    stats.push(("mlp_l", st));
    let total_voxels: usize = samples.iter().map(|s| s.voxels).sum();
    let mut voxel_offsets = Vec::with_capacity(total_voxels + 1);
    let mut sample_offsets = vec![0];
    let mut voxel_sample = Vec::with_capacity(total_voxels);
    let mut row = 0;
    for (si, s) in samples.iter().enumerate() {
        for _ in 0..s.voxels {
            voxel_offsets.push(row);
            row += s.max_points;
            voxel_sample.push(si as u32);
        }
        sample_offsets.push(sample_offsets.last().unwrap() + s.voxels);
    }
    voxel_offsets.push(row);
    let local = tape.segment_max(hl, &voxel_offsets)?;
    let (hg, st) = params.mlp_g.forward(tape, bg, local, mode)?;
    stats.push(("mlp_g", st));
    // one global vector per cloud, never across clouds
    let global = tape.segment_max(hg, &sample_offsets)?;
    let expanded = tape.gather_rows(global, voxel_sample)?;
    let joint = tape.concat(&[local, expanded])?;
    let (logit, st) = params.mlp_att.forward(tape, ba, joint, mode)?;
    stats.push(("mlp_att", st));
    let sigma = tape.sigmoid(logit);
    Ok((local, sigma))
}

/// Full forward pass: gate, label scaling, classifier head.
pub fn forward(
    params: &FusionParams,
    tape: &mut Tape,
    bound: &BoundParams,
    samples: &[&PreparedSample],
    gate: Gate,
    mode: Mode,
) -> Result<Forward> {
    let m = params.config.m;
    if let Some(s) = samples.iter().find(|s| s.m != m) {
        return Err(Error::config(format!(
            "sample has {} classes, network {m}",
            s.m
        )));
    }
    let mut stats = Vec::new();
    let total_rows: usize = samples.iter().map(|s| s.rows()).sum();
    let (sigma, sigma_rows) = match gate {
        Gate::Learned => {
            let (_, sigma) = attention_branch(params, tape, bound, samples, mode, &mut stats)?;
            let mut index = Vec::with_capacity(total_rows);
            let mut base = 0u32;
            for s in samples {
                index.extend(s.row_voxel.iter().map(|&v| v + base));
                base += s.voxels as u32;
            }
            (Some(sigma), tape.gather_rows(sigma, index)?)
        }
        Gate::Fixed(v) => (None, tape.input(Mat::filled(total_rows, 1, v))),
    };
    let xyz = tape.input(stack_rows(samples.iter().map(|s| s.xyz.clone()), 3));
    let p2d = tape.input(stack_rows(samples.iter().map(|s| s.p2d.clone()), m));
    let p3d = tape.input(stack_rows(samples.iter().map(|s| s.p3d.clone()), m));
    let scaled_2d = tape.scale_rows(sigma_rows, p2d)?;
    let complement = tape.affine(sigma_rows, -1.0, 1.0);
    let scaled_3d = tape.scale_rows(complement, p3d)?;
    let fused = tape.concat(&[xyz, scaled_2d, scaled_3d])?;
    let (logits, st) = params.head.forward(tape, &bound.head, fused, mode)?;
    stats.push(("head", st));
    Ok(Forward {
        sigma,
        logits,
        stats,
    })
}

/// Gated labels for one voxel batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBatch {
    pub m: usize,
    pub max_points: usize,
    /// Gate value per voxel.
    pub attention: Vec<f64>,
    /// `e * M * m`, 2D scores times the gate.
    pub scaled_2d: Vec<f64>,
    /// `e * M * m`, 3D scores times one minus the gate.
    pub scaled_3d: Vec<f64>,
    /// `e * M * (3 + 2m)`: raw xyz, then the two scaled blocks.
    pub fused: Vec<f64>,
}

impl FusedBatch {
    pub fn channels(&self) -> usize {
        3 + 2 * self.m
    }

    pub fn slot(&self, voxel: usize, slot: usize) -> &[f64] {
        let c = self.channels();
        let base = (voxel * self.max_points + slot) * c;
        &self.fused[base..base + c]
    }
}

fn eval_tape(params: &FusionParams, gate: Gate) -> (Tape, BoundParams) {
    let mut tape = Tape::new(Exec::default());
    let bound = params.bind(&mut tape, gate, false);
    (tape, bound)
}

/// Per-voxel max over slots of `mlp_l`: `e x c1`.
pub fn local_feature(batch: &VoxelBatch, params: &FusionParams, mode: Mode) -> Result<Mat> {
    let sample = PreparedSample::new(batch, &params.config, RowSelection::TrueSlots)?;
    let mut tape = Tape::default();
    let bl = params.mlp_l.bind(&mut tape, false);
    let slots = tape.input(sample.slots.clone());
    let (h, _) = params.mlp_l.forward(&mut tape, &bl, slots, mode)?;
    let offsets: Vec<usize> = (0..=sample.voxels).map(|v| v * sample.max_points).collect();
    let local = tape.segment_max(h, &offsets)?;
    Ok(tape.value(local).clone())
}

/// Max over voxels of `mlp_g(local)`: one `c2` vector for the cloud.
pub fn global_feature(local: &Mat, params: &FusionParams, mode: Mode) -> Result<Vec<f64>> {
    if local.rows == 0 {
        return Err(Error::Contract("global feature of an empty cloud".into()));
    }
    if local.cols != params.config.c1 {
        return Err(Error::config(format!(
            "local features are {} wide, expected {}",
            local.cols, params.config.c1
        )));
    }
    let mut tape = Tape::default();
    let bg = params.mlp_g.bind(&mut tape, false);
    let x = tape.input(local.clone());
    let (h, _) = params.mlp_g.forward(&mut tape, &bg, x, mode)?;
    let g = tape.segment_max(h, &[0, local.rows])?;
    Ok(tape.value(g).data.clone())
}

/// `sigmoid(mlp_att([local_i, global]))` per voxel.
pub fn attention_scores(
    local: &Mat,
    global: &[f64],
    params: &FusionParams,
    mode: Mode,
) -> Result<Vec<f64>> {
    let c = &params.config;
    if local.cols != c.c1 || global.len() != c.c2 {
        return Err(Error::config("attention inputs do not match c1/c2"));
    }
    let mut joint = Mat::zeros(local.rows, c.c1 + c.c2);
    for r in 0..local.rows {
        let row = joint.row_mut(r);
        row[..c.c1].copy_from_slice(local.row(r));
        row[c.c1..].copy_from_slice(global);
    }
    let mut tape = Tape::default();
    let ba = params.mlp_att.bind(&mut tape, false);
    let x = tape.input(joint);
    let (a, _) = params.mlp_att.forward(&mut tape, &ba, x, mode)?;
    let s = tape.sigmoid(a);
    Ok(tape.value(s).data.clone())
}

/// Gate values for every voxel of one cloud, computed in a single pass.
pub fn voxel_attention(batch: &VoxelBatch, params: &FusionParams, mode: Mode) -> Result<Vec<f64>> {
    let sample = PreparedSample::new(batch, &params.config, RowSelection::TrueSlots)?;
    let (mut tape, bound) = eval_tape(params, Gate::Learned);
    let mut stats = Vec::new();
    let (_, sigma) = attention_branch(params, &mut tape, &bound, &[&sample], mode, &mut stats)?;
    Ok(tape.value(sigma).data.clone())
}

/// Scales each voxel's 2D scores by its gate and 3D scores by the
/// complement.
pub fn gate_labels(batch: &VoxelBatch, scores: &[f64]) -> Result<FusedBatch> {
    if scores.len() != batch.len() {
        return Err(Error::shape(format!(
            "{} gate values for {} voxels",
            scores.len(),
            batch.len()
        )));
    }
    let (m, mp, ch) = (batch.m, batch.max_points, batch.channels());
    let slots = batch.len() * mp;
    let mut scaled_2d = Vec::with_capacity(slots * m);
    let mut scaled_3d = Vec::with_capacity(slots * m);
    let mut fused = Vec::with_capacity(slots * ch);
    for s in 0..slots {
        let sigma = scores[s / mp];
        let row = &batch.features[s * ch..(s + 1) * ch];
        fused.extend(row[..3].iter().map(|&v| v as f64));
        let a = row[3..3 + m].iter().map(|&v| sigma * v as f64);
        let b = row[3 + m..].iter().map(|&v| (1.0 - sigma) * v as f64);
        let start = scaled_2d.len();
        scaled_2d.extend(a);
        fused.extend_from_slice(&scaled_2d[start..]);
        let start = scaled_3d.len();
        scaled_3d.extend(b);
        fused.extend_from_slice(&scaled_3d[start..]);
    }
    Ok(FusedBatch {
        m,
        max_points: mp,
        attention: scores.to_vec(),
        scaled_2d,
        scaled_3d,
        fused,
    })
}

/// Head logits for every slot: `(e * M) x m`.
pub fn classify_points(fused: &FusedBatch, params: &FusionParams) -> Result<Mat> {
    let ch = fused.channels();
    if ch != params.head.in_dim() {
        return Err(Error::config(format!(
            "fused slots have {ch} channels, head expects {}",
            params.head.in_dim()
        )));
    }
    let rows = fused.fused.len() / ch;
    let mut x = Mat::zeros(rows, ch);
    for r in 0..rows {
        let src = &fused.fused[r * ch..(r + 1) * ch];
        let dst = x.row_mut(r);
        for k in 0..3 {
            dst[k] = (src[k] - params.config.coord_offset[k]) * params.config.coord_scale[k];
        }
        dst[3..].copy_from_slice(&src[3..]);
    }
    let mut tape = Tape::default();
    let bh = params.head.bind(&mut tape, false);
    let xv = tape.input(x);
    let (y, _) = params.head.forward(&mut tape, &bh, xv, Mode::Eval)?;
    Ok(tape.value(y).clone())
}

/// Per-point gated labels, ready to hand to a detector.
#[derive(Debug, Clone, PartialEq)]
pub struct PaintedCloud {
    pub m: usize,
    /// `n x (3 + 2m)` records.
    pub records: Vec<f32>,
}

impl PaintedCloud {
    pub fn len(&self) -> usize {
        self.records.len() / (3 + 2 * self.m)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl PaintedCloud {
    /// Coordinates of every record.
    pub fn points(&self) -> PointCloud {
        let c = 3 + 2 * self.m;
        PointCloud::new(
            self.records
                .chunks_exact(c)
                .map(|r| [r[0], r[1], r[2]])
                .collect(),
        )
    }
}

/// Head logits for every record of a painted cloud: `n x m`.
pub fn classify_painted(cloud: &PaintedCloud, params: &FusionParams) -> Result<Mat> {
    let fused = FusedBatch {
        m: cloud.m,
        max_points: 1,
        attention: Vec::new(),
        scaled_2d: Vec::new(),
        scaled_3d: Vec::new(),
        fused: cloud.records.iter().map(|&v| v as f64).collect(),
    };
    classify_points(&fused, params)
}

/// One record per in-range point: its own labels scaled by the gate of the
/// voxel it falls in. Points that lost their slot to sampling still get the
/// voxel's gate; padding duplicates are not exported.
pub fn export_painted_cloud(
    points: &PointCloud,
    p2d: &SemanticScores,
    p3d: &SemanticScores,
    fused: &FusedBatch,
    batch: &VoxelBatch,
    cfg: &VoxelConfig,
) -> Result<PaintedCloud> {
    if fused.attention.len() != batch.len() || fused.m != batch.m {
        return Err(Error::shape(
            "fused batch does not belong to this voxel batch",
        ));
    }
    if p2d.n != points.len() || p3d.n != points.len() || p2d.m != batch.m || p3d.m != batch.m {
        return Err(Error::shape("score rows do not match the cloud"));
    }
    let m = batch.m;
    let mut records = Vec::new();
    for i in 0..points.len() {
        let Some(coord) = voxel_index(points.point(i), cfg) else {
            continue;
        };
        let v = batch.find(coord).ok_or_else(|| {
            Error::Consistency(format!(
                "point {i} falls in voxel {coord:?} with no gate value"
            ))
        })?;
        let sigma = fused.attention[v];
        records.extend_from_slice(&points.xyz[i]);
        records.extend(p2d.row(i).iter().map(|&s| (sigma * s as f64) as f32));
        records.extend(
            p3d.row(i)
                .iter()
                .map(|&s| ((1.0 - sigma) * s as f64) as f32),
        );
    }
    Ok(PaintedCloud { m, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_from(slots: &[Vec<f32>], m: usize, mp: usize) -> VoxelBatch {
        let e = slots.len() / mp;
        VoxelBatch {
            m,
            max_points: mp,
            coords: (0..e as i32).map(|i| [i, 0, 0]).collect(),
            counts: vec![mp as u32; e],
            features: slots.concat(),
            pad_mask: vec![false; e * mp],
            sources: Vec::new(),
        }
    }

    fn small_params(m: usize) -> FusionParams {
        let cfg = FusionConfig {
            m,
            c1: 8,
            c2: 6,
            att_hidden: 5,
            head_hidden: 7,
            coord_offset: [0.0; 3],
            coord_scale: [1.0; 3],
        };
        FusionParams::init(cfg, 11)
    }

    #[test]
    fn tensors_round_trip() {
        let p = FusionParams::init(FusionConfig::default(), 3);
        let t = p.to_tensors();
        let q = FusionParams::from_tensors(&t).unwrap();
        assert_eq!(q.to_tensors(), t);
        assert_eq!(q.config.m, 11);
        assert_eq!(q.mlp_att.layers[1].activation, Activation::Identity);
        assert!(FusionParams::from_tensors(&t[1..]).is_err());
    }

    #[test]
    fn fresh_gate_is_one_half() {
        let p = small_params(2);
        p.validate().unwrap();
        let b = batch_from(
            &[
                vec![0.1, 0.2, 0.3, 1.0, 0.0, 0.0, 1.0],
                vec![0.5, 0.2, 0.1, 0.0, 1.0, 0.0, 1.0],
            ],
            2,
            1,
        );
        let s = voxel_attention(&b, &p, Mode::Train).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn gate_half_splits_mass() {
        let b = batch_from(&[vec![1.0, 2.0, 3.0, 1.0, 0.0, 0.0, 1.0]], 2, 1);
        let f = gate_labels(&b, &[0.5]).unwrap();
        assert_eq!(f.slot(0, 0), &[1.0, 2.0, 3.0, 0.5, 0.0, 0.0, 0.5]);
        let f = gate_labels(&b, &[1.0]).unwrap();
        assert_eq!(f.scaled_3d, vec![0.0, 0.0]);
        assert_eq!(f.scaled_2d, vec![1.0, 0.0]);
        assert!(gate_labels(&b, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn zero_attention_weights_give_half_and_saturate_with_bias() {
        let mut p = small_params(2);
        let b = batch_from(
            &[
                vec![0.1, 0.2, 0.3, 1.0, 0.0, 0.0, 1.0],
                vec![0.4, 0.0, 0.1, 0.0, 1.0, 1.0, 0.0],
            ],
            2,
            1,
        );
        let local = local_feature(&b, &p, Mode::Eval).unwrap();
        let global = global_feature(&local, &p, Mode::Eval).unwrap();
        for l in &mut p.mlp_att.layers {
            l.weight.data.fill(0.0);
        }
        assert_eq!(
            attention_scores(&local, &global, &p, Mode::Eval).unwrap(),
            vec![0.5; 2]
        );
        p.mlp_att.layers[1].bias.data[0] = 20.0;
        let s = attention_scores(&local, &global, &p, Mode::Eval).unwrap();
        assert!(s.iter().all(|&v| v > 0.999));
    }

    #[test]
    fn singleton_voxel_local_is_mlp_of_slot() {
        let p = small_params(2);
        let slot = vec![0.3f32, -0.2, 0.9, 0.0, 1.0, 1.0, 0.0];
        let b = batch_from(std::slice::from_ref(&slot), 2, 1);
        let local = local_feature(&b, &p, Mode::Eval).unwrap();
        let x = Mat::from_vec(1, 7, slot.iter().map(|&v| v as f64).collect()).unwrap();
        let direct = crate::neuralcore::mlp_forward(&p.mlp_l.layers, &x, Mode::Eval).unwrap();
        assert_eq!(local.data, direct.data);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let p = small_params(3);
        let b = batch_from(&[vec![0.0; 7]], 2, 1);
        assert!(matches!(
            local_feature(&b, &p, Mode::Eval),
            Err(Error::Config(_))
        ));
        let f = gate_labels(&b, &[0.5]).unwrap();
        assert!(matches!(classify_points(&f, &p), Err(Error::Config(_))));
    }

    #[test]
    fn empty_global_is_contract_violation() {
        let p = small_params(2);
        assert!(matches!(
            global_feature(&Mat::zeros(0, 8), &p, Mode::Eval),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_head_emits_bias() {
        let mut p = small_params(2);
        for l in &mut p.head.layers {
            l.weight.data.fill(0.0);
        }
        p.head.layers[0].bias.data.fill(0.0);
        p.head.layers[1].bias.data = vec![0.25, -1.5];
        let b = batch_from(&vec![vec![0.3, 0.1, 0.2, 1.0, 0.0, 0.0, 1.0]; 3], 2, 3);
        let f = gate_labels(&b, &[0.7]).unwrap();
        let logits = classify_points(&f, &p).unwrap();
        for r in 0..3 {
            assert_eq!(logits.row(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn export_single_point() {
        let cfg = VoxelConfig {
            range_min: [0.0; 3],
            range_max: [4.0; 3],
            size: [1.0; 3],
            max_points: 2,
            seed: 0,
        };
        let pc = PointCloud::new(vec![[0.5, 0.5, 0.5]]);
        let p2d = SemanticScores::from_labels(&[0], 2);
        let p3d = SemanticScores::from_labels(&[1], 2);
        let vb = crate::voxelgrid::voxelize(&pc, &p2d, &p3d, &cfg).unwrap();
        let f = gate_labels(&vb, &[0.5]).unwrap();
        let out = export_painted_cloud(&pc, &p2d, &p3d, &f, &vb, &cfg).unwrap();
        assert_eq!(out.records, vec![0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.5]);
        let mut foreign = vb.clone();
        foreign.coords = vec![[3, 3, 3]];
        assert!(matches!(
            export_painted_cloud(&pc, &p2d, &p3d, &f, &foreign, &cfg),
            Err(Error::Consistency(_))
        ));
    }
}
