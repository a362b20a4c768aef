//! End-to-end training and evaluation of the fusion network.
//!
//! Scenes are voxelized once up front. Each step stacks the prepared
//! voxels of a few whole scenes, runs the gated network in training mode
//! and minimizes per-point cross-entropy over the true (non-padding) slots
//! with AdamW.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::{
    cluster_detections, mean_ap, ApConfig, ApReport, ClassMetrics, Confusion, Detection,
    GroundTruth, MeanAp,
};
use crate::exec::Exec;
use crate::formats;
use crate::fusion::{
    classify_painted, export_painted_cloud, forward, gate_labels, FusionConfig, FusionParams, Gate,
    PaintedCloud, PreparedSample, RowSelection,
};
use crate::neuralcore::{adamw_step, scheduled_lr, AdamWConfig, AdamWState, Mat, Mode, Tape};
use crate::synthbench::{shuffled, Dataset, SceneData, Split};
use crate::voxelgrid::{voxel_index, voxelize_with, VoxelBatch, VoxelConfig};

/// Which label sources reach the classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// 3D channels zeroed.
    #[serde(rename = "2d-only")]
    TwoDOnly,
    /// 2D channels zeroed.
    #[serde(rename = "3d-only")]
    ThreeDOnly,
    #[serde(rename = "fused-attention")]
    FusedAttention,
    /// Gate pinned at 0.5.
    #[serde(rename = "fused-fixed-half")]
    FusedFixedHalf,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::TwoDOnly,
        Modality::ThreeDOnly,
        Modality::FusedAttention,
        Modality::FusedFixedHalf,
    ];

    pub fn gate(self) -> Gate {
        match self {
            Modality::TwoDOnly => Gate::Fixed(1.0),
            Modality::ThreeDOnly => Gate::Fixed(0.0),
            Modality::FusedAttention => Gate::Learned,
            Modality::FusedFixedHalf => Gate::Fixed(0.5),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::TwoDOnly => "2d-only",
            Modality::ThreeDOnly => "3d-only",
            Modality::FusedAttention => "fused-attention",
            Modality::FusedFixedHalf => "fused-fixed-half",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown modality {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Whole scenes per optimizer step.
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub voxel: VoxelConfig,
    pub modality: Modality,
    /// Best-validation checkpoint, written whenever validation improves.
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch metrics log.
    pub metrics: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 2,
            max_lr: 0.001,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            seed: 7,
            voxel: VoxelConfig::default(),
            modality: Modality::FusedAttention,
            checkpoint: None,
            metrics: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(self.max_lr >= 0.0) || !self.max_lr.is_finite() {
            return Err(Error::config("max_lr must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        self.voxel.validate()
    }
}

/// A scene voxelized and laid out for the network.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub id: String,
    pub batch: VoxelBatch,
    pub sample: PreparedSample,
    /// True class per classified row.
    pub targets: Vec<u32>,
    /// Voxels holding at least one background point painted foreground
    /// by the 2D source.
    pub bleed_voxels: Vec<bool>,
}

pub fn prepare_scene(
    scene: &SceneData,
    voxel: &VoxelConfig,
    fusion: &FusionConfig,
    exec: Exec,
) -> Result<PreparedScene> {
    let batch = voxelize_with(&scene.points, &scene.p2d, &scene.p3d, voxel, exec)?;
    let sample = PreparedSample::new(&batch, fusion, RowSelection::TrueSlots)?;
    let targets = sample
        .row_slot
        .iter()
        .map(|&s| scene.labels[batch.sources[s as usize] as usize] as u32)
        .collect();
    let p2d = scene.p2d.labels();
    let mut bleed_voxels = vec![false; batch.len()];
    for (i, (&truth, &painted)) in scene.labels.iter().zip(&p2d).enumerate() {
        if truth != 0 || painted == 0 {
            continue;
        }
        if let Some(v) = voxel_index(scene.points.point(i), voxel).and_then(|c| batch.find(c)) {
            bleed_voxels[v] = true;
        }
    }
    Ok(PreparedScene {
        id: scene.id.clone(),
        batch,
        sample,
        targets,
        bleed_voxels,
    })
}

pub fn prepare_scenes(
    scenes: &[SceneData],
    voxel: &VoxelConfig,
    fusion: &FusionConfig,
    exec: Exec,
) -> Result<Vec<PreparedScene>> {
    // parallel across scenes, sequential inside each
    exec.try_map(scenes.len(), |i| {
        prepare_scene(&scenes[i], voxel, fusion, Exec::Sequential)
    })
}

/// Running sums for loss, confusion and gate statistics.
#[derive(Debug, Clone)]
struct Tally {
    loss_sum: f64,
    rows: usize,
    confusion: Confusion,
    sigma_clean: (f64, usize),
    sigma_bleed: (f64, usize),
}

impl Tally {
    fn new(m: usize) -> Self {
        Tally {
            loss_sum: 0.0,
            rows: 0,
            confusion: Confusion::new(m),
            sigma_clean: (0.0, 0),
            sigma_bleed: (0.0, 0),
        }
    }

    fn add_rows(&mut self, logits: &Mat, targets: &[u32], mean_loss: f64) {
        self.loss_sum += mean_loss * targets.len() as f64;
        self.rows += targets.len();
        for (r, &t) in targets.iter().enumerate() {
            self.confusion.add(t as usize, argmax(logits.row(r)));
        }
    }

    fn add_sigma(&mut self, sigma: &[f64], bleed: &[bool]) {
        for (&s, &b) in sigma.iter().zip(bleed) {
            let acc = if b {
                &mut self.sigma_bleed
            } else {
                &mut self.sigma_clean
            };
            acc.0 += s;
            acc.1 += 1;
        }
    }

    fn report(self) -> EvalReport {
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        let m = self.confusion.m;
        EvalReport {
            loss: self.loss_sum / self.rows.max(1) as f64,
            accuracy: self.confusion.accuracy(),
            macro_f1: self.confusion.macro_f1(),
            per_class: (0..m).map(|c| self.confusion.class(c)).collect(),
            mean_sigma_clean: mean(self.sigma_clean),
            mean_sigma_bleed: mean(self.sigma_bleed),
            points: self.rows,
        }
    }
}

/// Lowest index among maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Mean gate over voxels without bleed-corrupted points.
    pub mean_sigma_clean: Option<f64>,
    /// Mean gate over voxels with bleed-corrupted points.
    pub mean_sigma_bleed: Option<f64>,
    /// Classified (non-padding) point slots.
    pub points: usize,
}

/// Checks that parameters and scenes agree on the class count.
pub fn check_dims(params: &FusionParams, scenes: &[PreparedScene]) -> Result<()> {
    params.validate()?;
    if let Some(s) = scenes.iter().find(|s| s.sample.m != params.config.m) {
        return Err(Error::Config(format!(
            "scene {} has {} classes, parameters {}",
            s.id, s.sample.m, params.config.m
        )));
    }
    Ok(())
}

/// Gate value per voxel of one scene.
pub fn scene_gate(
    params: &FusionParams,
    scene: &PreparedScene,
    modality: Modality,
    exec: Exec,
) -> Result<Vec<f64>> {
    match modality.gate() {
        Gate::Fixed(v) => Ok(vec![v; scene.sample.voxels]),
        Gate::Learned => {
            let mut tape = Tape::new(exec);
            let bound = params.bind(&mut tape, Gate::Learned, false);
            let f = forward(
                params,
                &mut tape,
                &bound,
                &[&scene.sample],
                Gate::Learned,
                Mode::Eval,
            )?;
            Ok(tape.value(f.sigma.expect("learned gate")).data.clone())
        }
    }
}

/// Point-label metrics over the true slots of `scenes`, in eval mode.
pub fn evaluate(
    params: &FusionParams,
    scenes: &[PreparedScene],
    modality: Modality,
    exec: Exec,
) -> Result<EvalReport> {
    check_dims(params, scenes)?;
    let gate = modality.gate();
    let mut tally = Tally::new(params.config.m);
    for scene in scenes {
        let mut tape = Tape::new(exec);
        let bound = params.bind(&mut tape, gate, false);
        let f = forward(
            params,
            &mut tape,
            &bound,
            &[&scene.sample],
            gate,
            Mode::Eval,
        )?;
        let loss = tape.cross_entropy(f.logits, &scene.targets)?;
        let loss = tape.value(loss).data[0];
        tally.add_rows(tape.value(f.logits), &scene.targets, loss);
        let sigma = match f.sigma {
            Some(s) => tape.value(s).data.clone(),
            None => vec![
                match gate {
                    Gate::Fixed(v) => v,
                    Gate::Learned => unreachable!(),
                };
                scene.sample.voxels
            ],
        };
        tally.add_sigma(&sigma, &scene.bleed_voxels);
    }
    Ok(tally.report())
}

/// Gated per-point labels for every in-range point of a scene.
pub fn painted_scene(
    params: &FusionParams,
    scene: &SceneData,
    prepared: &PreparedScene,
    voxel: &VoxelConfig,
    modality: Modality,
    exec: Exec,
) -> Result<PaintedCloud> {
    let sigma = scene_gate(params, prepared, modality, exec)?;
    let fused = gate_labels(&prepared.batch, &sigma)?;
    export_painted_cloud(
        &scene.points,
        &scene.p2d,
        &scene.p3d,
        &fused,
        &prepared.batch,
        voxel,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub min_points: usize,
    pub radius: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            min_points: 5,
            radius: 0.6,
        }
    }
}

/// Softmax of every row.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Detections from clustering the classified painted cloud of each scene;
/// scene `i` becomes frame `i`.
pub fn detect_scenes(
    params: &FusionParams,
    scenes: &[SceneData],
    prepared: &[PreparedScene],
    voxel: &VoxelConfig,
    modality: Modality,
    cluster: &ClusterConfig,
    exec: Exec,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, (scene, prep)) in scenes.iter().zip(prepared).enumerate() {
        let painted = painted_scene(params, scene, prep, voxel, modality, exec)?;
        let probs = softmax_rows(&classify_painted(&painted, params)?);
        let dets = cluster_detections(
            &painted.points(),
            &probs,
            cluster.min_points,
            cluster.radius,
        )?;
        out.extend(dets.into_iter().map(|d| Detection {
            frame: i as u32,
            ..d
        }));
    }
    Ok(out)
}

/// Box centers of each scene as ground truth; scene `i` is frame `i`.
pub fn ground_truth(scenes: &[SceneData]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.boxes.iter().map(move |b| GroundTruth {
                bev_center: [b.center[0], b.center[1]],
                class_id: b.class_id,
                frame: i as u32,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub report: EvalReport,
}

pub const METRICS_HEADER: [&str; 7] = [
    "epoch",
    "split",
    "loss",
    "accuracy",
    "macro_f1",
    "mean_sigma_clean",
    "mean_sigma_bleed",
];

/// CSV text of the metrics log; floats at fixed precision.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::data(format!("metrics csv: {e}"));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    let f = |v: f64| format!("{v:.6}");
    let opt = |v: Option<f64>| v.map(f).unwrap_or_default();
    for r in rows {
        let rep = &r.report;
        w.write_record([
            r.epoch.to_string(),
            r.split.to_string(),
            f(rep.loss),
            f(rep.accuracy),
            f(rep.macro_f1),
            opt(rep.mean_sigma_clean),
            opt(rep.mean_sigma_bleed),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::data(format!("metrics csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of ASCII fields"))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FusionParams,
    pub best: FusionParams,
    pub best_epoch: usize,
    pub rows: Vec<MetricsRow>,
}

impl TrainOutcome {
    /// Train losses by epoch.
    pub fn train_losses(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == "train")
            .map(|r| r.report.loss)
            .collect()
    }
}

/// Per-epoch shuffling seed; independent of the initialization stream.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch as u64)
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[PreparedScene],
    val_set: &[PreparedScene],
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m = train_set
        .first()
        .ok_or_else(|| Error::config("training split is empty"))?
        .sample
        .m;
    let params = FusionParams::init(FusionConfig::for_range(m, &cfg.voxel), cfg.seed);
    train_from(cfg, params, train_set, val_set, exec)
}

/// Trains starting from `params`.
pub fn train_from(
    cfg: &TrainConfig,
    mut params: FusionParams,
    train_set: &[PreparedScene],
    val_set: &[PreparedScene],
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dims(&params, train_set)?;
    check_dims(&params, val_set)?;
    if train_set.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let gate = cfg.modality.gate();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = AdamWState::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, FusionParams)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = shuffled(train_set.len(), epoch_seed(cfg.seed, epoch));
        let mut tally = Tally::new(params.config.m);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&PreparedSample> =
                chunk.iter().map(|&i| &train_set[i].sample).collect();
            let targets: Vec<u32> = chunk
                .iter()
                .flat_map(|&i| train_set[i].targets.iter().copied())
                .collect();
            let mut tape = Tape::new(exec);
            let bound = params.bind(&mut tape, gate, true);
            let f = forward(&params, &mut tape, &bound, &samples, gate, Mode::Train)?;
            let loss_var = tape.cross_entropy(f.logits, &targets)?;
            let loss = tape.value(loss_var).data[0];
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    scenes: chunk.iter().map(|&i| train_set[i].id.clone()).collect(),
                    loss,
                });
            }
            tally.add_rows(tape.value(f.logits), &targets, loss);
            if let Some(s) = f.sigma {
                let bleed: Vec<bool> = chunk
                    .iter()
                    .flat_map(|&i| train_set[i].bleed_voxels.iter().copied())
                    .collect();
                tally.add_sigma(&tape.value(s).data, &bleed);
            } else if let Gate::Fixed(v) = gate {
                for &i in chunk {
                    tally.add_sigma(
                        &vec![v; train_set[i].sample.voxels],
                        &train_set[i].bleed_voxels,
                    );
                }
            }
            let grads = tape.backward(loss_var)?;
            let vars = bound.vars(&params);
            let lr = scheduled_lr(step, total_steps, cfg.max_lr, cfg.warmup_fraction);
            let gs: Vec<Option<&Mat>> = vars.iter().map(|v| v.and_then(|v| grads.get(v))).collect();
            adamw_step(&mut opt, &mut params.trainable_mut(), &gs, lr)?;
            for (name, stats) in &f.stats {
                if let Some((_, mlp)) = params.mlps_mut().into_iter().find(|(n, _)| n == name) {
                    mlp.update_running(stats);
                }
            }
            step += 1;
        }
        rows.push(MetricsRow {
            epoch,
            split: "train",
            report: tally.report(),
        });
        if !val_set.is_empty() {
            let report = evaluate(&params, val_set, cfg.modality, exec)?;
            let score = report.macro_f1;
            rows.push(MetricsRow {
                epoch,
                split: "val",
                report,
            });
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, params.clone()));
                if let Some(path) = &cfg.checkpoint {
                    formats::write_checkpoint(path, &params.to_tensors())?;
                }
            }
        }
        if let Some(path) = &cfg.metrics {
            write_text(path, &metrics_csv(&rows)?)?;
        }
    }
    let (best_epoch, best) = match best {
        Some((_, e, p)) => (e, p),
        None => {
            if let Some(path) = &cfg.checkpoint {
                formats::write_checkpoint(path, &params.to_tensors())?;
            }
            (cfg.epochs, params.clone())
        }
    };
    Ok(TrainOutcome {
        params,
        best,
        best_epoch,
        rows,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fixed-width text table of per-arm results.
pub fn arm_table(results: &[(Modality, &EvalReport, Option<f64>)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "arm", "loss", "acc", "macroF1", "s_clean", "s_bleed", "mAP"
    );
    let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for (m, r, map) in results {
        let _ = writeln!(
            out,
            "{:<18} {:>8.4} {:>8.4} {:>8.4} {:>8} {:>8} {:>8}",
            m.name(),
            r.loss,
            r.accuracy,
            r.macro_f1,
            f(r.mean_sigma_clean),
            f(r.mean_sigma_bleed),
            f(*map)
        );
    }
    out
}

/// Settings for training and comparing all four arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct BenchmarkConfig {
    /// Shared by every arm; `modality`, `checkpoint` and `metrics` are
    /// set per arm.
    pub train: TrainConfig,
    pub ap: ApConfig,
    pub cluster: ClusterConfig,
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub modality: Modality,
    pub outcome: TrainOutcome,
    /// Validation metrics of the final parameters.
    pub report: EvalReport,
    pub ap: MeanAp,
}

/// Validation report and detection AP for one set of parameters.
pub fn evaluate_arm(
    params: &FusionParams,
    val: &[SceneData],
    val_prepared: &[PreparedScene],
    modality: Modality,
    cfg: &BenchmarkConfig,
    exec: Exec,
) -> Result<(EvalReport, MeanAp)> {
    let report = evaluate(params, val_prepared, modality, exec)?;
    let dets = detect_scenes(
        params,
        val,
        val_prepared,
        &cfg.train.voxel,
        modality,
        &cfg.cluster,
        exec,
    )?;
    let ap = mean_ap(&dets, &ground_truth(val), &cfg.ap, exec)?;
    Ok((report, ap))
}

/// AP report JSON keyed by arm name; arms without ground truth map to null.
pub fn ap_report_json(arms: &[(Modality, &MeanAp)]) -> Result<String> {
    let map: std::collections::BTreeMap<&str, Option<&ApReport>> = arms
        .iter()
        .map(|(m, ap)| {
            let r = match ap {
                MeanAp::Defined(r) => Some(r),
                MeanAp::NoGroundTruth => None,
            };
            (m.name(), r)
        })
        .collect();
    let mut text =
        serde_json::to_string_pretty(&map).map_err(|e| Error::data(format!("ap report: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Trains every arm from the same seed on the train split, evaluates the
/// final parameters on the val split and, with `out`, writes
/// `<arm>/metrics.csv`, `<arm>/checkpoint.fpnn`, `<arm>/final.fpnn`,
/// `ap_report.json` and `eval_table.txt`.
pub fn run_benchmark(
    dataset: &Dataset,
    cfg: &BenchmarkConfig,
    out: Option<&Path>,
    exec: Exec,
) -> Result<Vec<ArmResult>> {
    cfg.train.validate()?;
    cfg.ap.validate()?;
    let fusion = FusionConfig::for_range(dataset.m(), &cfg.train.voxel);
    let train_scenes = dataset.load_split(Split::Train, exec)?;
    let val_scenes = dataset.load_split(Split::Val, exec)?;
    let train_set = prepare_scenes(&train_scenes, &cfg.train.voxel, &fusion, exec)?;
    drop(train_scenes);
    let val_set = prepare_scenes(&val_scenes, &cfg.train.voxel, &fusion, exec)?;
    let mut results = Vec::new();
    for modality in Modality::ALL {
        let arm_dir = out.map(|o| o.join(modality.name()));
        let tcfg = TrainConfig {
            modality,
            checkpoint: arm_dir.as_ref().map(|d| d.join("checkpoint.fpnn")),
            metrics: arm_dir.as_ref().map(|d| d.join("metrics.csv")),
            ..cfg.train.clone()
        };
        let outcome = train(&tcfg, &train_set, &val_set, exec)?;
        if let Some(d) = &arm_dir {
            formats::write_checkpoint(&d.join("final.fpnn"), &outcome.params.to_tensors())?;
        }
        let (report, ap) =
            evaluate_arm(&outcome.params, &val_scenes, &val_set, modality, cfg, exec)?;
        results.push(ArmResult {
            modality,
            outcome,
            report,
            ap,
        });
    }
    if let Some(o) = out {
        let arms: Vec<_> = results.iter().map(|r| (r.modality, &r.ap)).collect();
        write_text(&o.join("ap_report.json"), &ap_report_json(&arms)?)?;
        let table: Vec<_> = results
            .iter()
            .map(|r| (r.modality, &r.report, r.ap.map()))
            .collect();
        write_text(&o.join("eval_table.txt"), &arm_table(&table))?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_names_round_trip() {
        for m in Modality::ALL {
            assert_eq!(m.name().parse::<Modality>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("both".parse::<Modality>().is_err());
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn csv_layout() {
        let report = EvalReport {
            loss: 1.5,
            accuracy: 0.25,
            macro_f1: 0.125,
            per_class: Vec::new(),
            mean_sigma_clean: Some(0.5),
            mean_sigma_bleed: None,
            points: 4,
        };
        let text = metrics_csv(&[MetricsRow {
            epoch: 1,
            split: "val",
            report,
        }])
        .unwrap();
        assert_eq!(
            text,
            "epoch,split,loss,accuracy,macro_f1,mean_sigma_clean,mean_sigma_bleed\n\
             1,val,1.500000,0.250000,0.125000,0.500000,\n"
        );
    }

    #[test]
    fn argmax_prefers_lowest_tie() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        let p = softmax_rows(&Mat::from_vec(1, 2, vec![0.0, 0.0]).unwrap());
        assert_eq!(p.data, vec![0.5, 0.5]);
    }
}
