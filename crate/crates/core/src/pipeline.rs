//! End-to-end runs: configuration, per-frame detection, lifting, refinement
//! and selection, and evaluation outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{decode_detections, generate_priors, Detection, PriorConfig, Tensor};
use crate::geometry::{BBox, CameraIntrinsics, Pose};
use crate::lifting::{build_pool, correct_pool, nms, NMS_IOU};
use crate::metrics::{
    add, detection_scores, match_detections, pose_iou2d, threshold_sweep, vss, DetectionReport, FrameRecord,
    GtInstance, PredInstance, DETECTION_IOU,
};
use crate::raster::{precompute_canonical, CanonicalTable, RgbImage, CANONICAL_DISTANCE};
use crate::refine::{refine_pool, scene_edges, select_pool_best, DepthFrame, RefineConfig, RefineMode, SceneObservation};
use crate::synth::{
    frame_rng, load_frame, oracle_detector, read_manifest, Annotation, ModelSpec, OracleNoise, SceneModel, SceneSpec,
};
use crate::viewspace::ViewSpaceParams;
use crate::{Error, Result, SymmetryClass};

/// Decorrelates detector noise from scene sampling.
const DETECTOR_STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    #[default]
    Oracle,
    /// Per-frame score tensors `<scores>/NNNNNN.bin`.
    External,
}

impl std::str::FromStr for DetectorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "external" => Ok(Self::External),
            _ => Err(Error::Config(format!("unknown detector mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelinePaths {
    pub dataset: PathBuf,
    pub tables: PathBuf,
    pub scores: PathBuf,
    pub output: PathBuf,
}

impl Default for PipelinePaths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            tables: "tables".into(),
            scores: "scores".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub models: Vec<ModelSpec>,
    pub camera: CameraIntrinsics,
    pub viewspace: ViewSpaceParams,
    pub canonical_distance: f64,
    /// Prior lattice for the external detector; defaults to the six-scale
    /// layout over the camera image.
    pub priors: Option<PriorConfig>,
    pub refine: RefineConfig,
    pub v_parse: usize,
    pub r_parse: usize,
    /// Box-consistency iterations after the table lift (0 = table lift only).
    pub lift_correction: usize,
    pub detector: DetectorMode,
    pub oracle_noise: OracleNoise,
    /// Minimum class probability kept from external score tensors.
    pub detection_threshold: f64,
    pub nms_iou: f64,
    pub refinement: RefineMode,
    /// Worker threads (0 = all cores).
    pub threads: usize,
    pub seed: u64,
    pub scene: SceneSpec,
    pub paths: PipelinePaths,
    pub eval_iou: f64,
    pub sweep_thresholds: usize,
    /// Also write wall-clock timings to `timings.json`.
    pub timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        Self {
            models: scene.models.clone(),
            camera: CameraIntrinsics::kinect(),
            viewspace: ViewSpaceParams::default(),
            canonical_distance: CANONICAL_DISTANCE,
            priors: None,
            refine: RefineConfig::default(),
            v_parse: 3,
            r_parse: 3,
            lift_correction: 3,
            detector: DetectorMode::Oracle,
            oracle_noise: OracleNoise::default(),
            detection_threshold: 0.5,
            nms_iou: NMS_IOU,
            refinement: RefineMode::Icp,
            threads: 0,
            seed: 0,
            scene,
            paths: PipelinePaths::default(),
            eval_iou: DETECTION_IOU,
            sweep_thresholds: 20,
            timings: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("no models configured".into()));
        }
        if self.v_parse == 0 || self.r_parse == 0 {
            return Err(Error::Config("v_parse and r_parse must be at least 1".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) || !(self.canonical_distance > 0.0) {
            return Err(Error::Config("nms_iou and canonical_distance must be positive".into()));
        }
        for m in &self.models {
            if let crate::synth::MeshSource::Path(p) = &m.mesh {
                if !p.exists() {
                    return Err(Error::Config(format!("mesh {} of model {:?} not found", p.display(), m.name)));
                }
            }
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("model names must be unique".into()));
        }
        self.refine.validate()?;
        self.viewspace.inplane.bins()?;
        self.scene_spec().validate()
    }

    /// Scene spec with the configured models and seed.
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            models: self.models.clone(),
            seed: self.seed,
            ..self.scene.clone()
        }
    }

    pub fn load_models(&self) -> Result<Vec<SceneModel>> {
        self.models.iter().map(|m| SceneModel::load(m, &self.viewspace)).collect()
    }

    pub fn table_path(&self, model: &str) -> PathBuf {
        self.paths.tables.join(format!("{model}.canonical.json"))
    }

    pub fn prior_config(&self) -> PriorConfig {
        self.priors
            .clone()
            .unwrap_or_else(|| PriorConfig::default_for(self.camera.width as f64, self.camera.height as f64))
    }

    /// Runs `f` on a pool with the configured worker count.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

/// Precomputes and stores the canonical table of every model.
pub fn write_canonical_tables(cfg: &PipelineConfig, models: &[SceneModel]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(&cfg.paths.tables).map_err(|e| Error::io(&cfg.paths.tables, e))?;
    let mut out = Vec::new();
    for m in models {
        let table = precompute_canonical(&m.mesh, &m.viewspace, &cfg.camera, cfg.canonical_distance)?;
        let path = cfg.table_path(&m.name);
        table.save(&path)?;
        out.push(path);
    }
    Ok(out)
}

/// Everything a run needs in memory.
pub struct PipelineContext {
    pub cfg: PipelineConfig,
    pub models: Vec<SceneModel>,
    pub tables: Vec<CanonicalTable>,
    pub priors: Option<Vec<BBox>>,
}

impl PipelineContext {
    pub fn new(cfg: PipelineConfig, models: Vec<SceneModel>, tables: Vec<CanonicalTable>) -> Result<Self> {
        if models.len() != tables.len() {
            return Err(Error::Contract("one canonical table per model required".into()));
        }
        for (m, t) in models.iter().zip(&tables) {
            if t.num_views != m.viewspace.num_views() || t.num_inplane != m.viewspace.num_inplane() || t.camera != cfg.camera
            {
                return Err(Error::Data(format!(
                    "canonical table of {:?} does not match the configuration; rerun `viewpose canonical`",
                    m.name
                )));
            }
        }
        let priors = match cfg.detector {
            DetectorMode::External => Some(generate_priors(&cfg.prior_config())?),
            DetectorMode::Oracle => None,
        };
        Ok(Self {
            cfg,
            models,
            tables,
            priors,
        })
    }

    /// Loads models and their stored canonical tables.
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let models = cfg.load_models()?;
        let mut tables = Vec::new();
        for m in &models {
            let path = cfg.table_path(&m.name);
            if !path.exists() {
                return Err(Error::Data(format!(
                    "canonical table {} is missing; run `viewpose canonical --config <config>` first",
                    path.display()
                )));
            }
            tables.push(CanonicalTable::load(&path)?);
        }
        Self::new(cfg.clone(), models, tables)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub class: usize,
    pub model: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub pose: Pose,
    pub view_id: usize,
    pub inplane_id: usize,
    pub verification: f64,
    pub hypotheses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub instances: Vec<InstanceResult>,
}

/// Detector output for one frame.
pub fn detect(ctx: &PipelineContext, frame: usize, annotations: &[Annotation]) -> Result<Vec<Detection>> {
    let cfg = &ctx.cfg;
    match cfg.detector {
        DetectorMode::Oracle => {
            let mut rng = frame_rng(cfg.seed ^ DETECTOR_STREAM_SALT, frame);
            Ok(oracle_detector(annotations, &ctx.models, &cfg.camera, &cfg.oracle_noise, &mut rng))
        }
        DetectorMode::External => {
            let path = cfg.paths.scores.join(format!("{frame:06}.bin"));
            let pred = Tensor::read(&path)?.to_predictions()?;
            let vs = &ctx.models[0].viewspace;
            if pred.num_classes != ctx.models.len() + 1
                || pred.num_views != vs.base_len()
                || pred.num_inplane != vs.num_inplane()
            {
                return Err(Error::Data(format!(
                    "{}: expected {} classes, {} views, {} in-plane bins",
                    path.display(),
                    ctx.models.len() + 1,
                    vs.base_len(),
                    vs.num_inplane()
                )));
            }
            let priors = ctx.priors.as_deref().expect("priors built for external mode");
            decode_detections(&pred, priors, cfg.detection_threshold, cfg.camera.width as f64, cfg.camera.height as f64)
        }
    }
}

/// Detections → NMS → pools → refinement → verification → best pose.
pub fn process_frame(
    ctx: &PipelineContext,
    frame: usize,
    image: &RgbImage,
    depth: &[f64],
    detections: &[Detection],
) -> Result<FrameResult> {
    let cfg = &ctx.cfg;
    let cam = &cfg.camera;
    let edges = scene_edges(image);
    let depth_frame = cfg
        .refinement
        .uses_depth()
        .then(|| DepthFrame::new(depth.to_vec(), cam.width as usize, cam.height as usize, cam));
    let scene = SceneObservation {
        edges: &edges,
        depth: depth_frame.as_ref(),
    };
    let mut instances = Vec::new();
    for det in nms(detections, cfg.nms_iou) {
        let class = det.object_class();
        let (Some(model), Some(table)) = (ctx.models.get(class), ctx.tables.get(class)) else {
            return Err(Error::Data(format!("frame {frame}: detection of unknown class {class}")));
        };
        let mut pool = match build_pool(&det, table, &model.viewspace, cam, cfg.v_parse, cfg.r_parse) {
            Ok(p) => p,
            Err(Error::Domain(_)) => continue,
            Err(e) => return Err(e),
        };
        correct_pool(&mut pool, &model.mesh, cam, cfg.lift_correction);
        refine_pool(&mut pool, &model.mesh, &scene, cam, &cfg.refine, cfg.refinement)?;
        let Some((k, pose, score)) = select_pool_best(&pool) else { continue };
        let h = &pool.hypotheses[k];
        instances.push(InstanceResult {
            class,
            model: model.name.clone(),
            score: det.score(),
            bbox: det.bbox,
            pose,
            view_id: h.view_id,
            inplane_id: h.inplane_id,
            verification: score,
            hypotheses: pool.hypotheses.len(),
        });
    }
    Ok(FrameResult { frame, instances })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub results: Vec<FrameResult>,
    /// Milliseconds per frame.
    pub timings: Vec<f64>,
}

/// Runs every frame of the dataset; results are in frame order.
pub fn run_frames(ctx: &PipelineContext, dataset: &Path, frames: usize) -> Result<RunOutput> {
    let out: Vec<Result<(FrameResult, f64)>> = ctx.cfg.install(|| {
        (0..frames)
            .into_par_iter()
            .map(|f| {
                let start = Instant::now();
                let (image, depth, anns) = load_frame(dataset, f)?;
                let dets = detect(ctx, f, &anns)?;
                let r = process_frame(ctx, f, &image, &depth, &dets)?;
                Ok((r, start.elapsed().as_secs_f64() * 1e3))
            })
            .collect()
    })?;
    let mut results = Vec::with_capacity(frames);
    let mut timings = Vec::with_capacity(frames);
    for r in out {
        let (r, t) = r?;
        results.push(r);
        timings.push(t);
    }
    Ok(RunOutput { results, timings })
}

/// Full run from configuration; writes `results.json` (and `timings.json`
/// when enabled) to the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput> {
    let manifest = read_manifest(&cfg.paths.dataset)?;
    if manifest.camera != cfg.camera {
        return Err(Error::Data("dataset camera differs from the configured camera".into()));
    }
    let ctx = PipelineContext::load(cfg)?;
    let out = run_frames(&ctx, &cfg.paths.dataset, manifest.frames)?;
    let dir = &cfg.paths.output;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("results.json"), &out.results)?;
    if cfg.timings {
        write_json(&dir.join("timings.json"), &out.timings)?;
    }
    Ok(out)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<FrameResult>> {
    let s = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Data(format!("{} not found; run `viewpose run` first", path.display())),
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Pose metrics of one ground-truth instance against its matched prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceEval {
    pub frame: usize,
    pub gt_index: usize,
    pub class: usize,
    pub matched: bool,
    pub iou2d: f64,
    pub iou2d_correct: bool,
    pub vss: f64,
    /// Meters; infinite when unmatched.
    pub add: f64,
    pub add_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub symmetry: SymmetryClass,
    pub instances: usize,
    /// Fraction of instances with IoU-2D above 0.5.
    pub iou2d: f64,
    /// Mean VSS.
    pub vss: f64,
    /// Fraction of instances with ADD below a tenth of the diameter.
    pub add: f64,
    /// ADD is not meaningful for symmetric models.
    pub add_flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub vss_normalization: String,
    pub detection: DetectionReport,
    pub models: Vec<ModelSummary>,
    pub instances: Vec<InstanceEval>,
}

/// Frame records pairing annotations with predictions.
pub fn frame_records(results: &[FrameResult], annotations: &[Vec<Annotation>]) -> Vec<FrameRecord> {
    results
        .iter()
        .zip(annotations)
        .map(|(r, anns)| FrameRecord {
            frame: r.frame,
            ground_truth: anns
                .iter()
                .map(|a| GtInstance {
                    class: a.class,
                    pose: a.pose,
                    bbox: a.bbox,
                })
                .collect(),
            predictions: r
                .instances
                .iter()
                .map(|i| PredInstance {
                    class: i.class,
                    pose: i.pose,
                    score: i.score,
                    bbox: i.bbox,
                })
                .collect(),
        })
        .collect()
}

/// Detection curves plus IoU-2D, VSS and ADD for every ground-truth instance.
pub fn evaluate(
    results: &[FrameResult],
    annotations: &[Vec<Annotation>],
    models: &[SceneModel],
    cam: &CameraIntrinsics,
    iou: f64,
    sweep: usize,
) -> Result<EvalSummary> {
    if results.len() != annotations.len() || results.iter().enumerate().any(|(k, r)| r.frame != k) {
        return Err(Error::Data("results and annotations are not aligned by frame".into()));
    }
    let records = frame_records(results, annotations);
    let detection = detection_scores(&records, iou, &threshold_sweep(sweep));
    let per_frame: Vec<Vec<InstanceEval>> = records
        .par_iter()
        .map(|rec| {
            let m = match_detections(rec, iou);
            rec.ground_truth
                .iter()
                .enumerate()
                .map(|(g, gt)| {
                    let mesh = &models[gt.class].mesh;
                    match m.iter().position(|x| *x == Some(g)) {
                        Some(p) => {
                            let est = &rec.predictions[p].pose;
                            let (i2, i2c) = pose_iou2d(&gt.pose, est, mesh, cam);
                            let (a, ac) = add(&gt.pose, est, mesh);
                            InstanceEval {
                                frame: rec.frame,
                                gt_index: g,
                                class: gt.class,
                                matched: true,
                                iou2d: i2,
                                iou2d_correct: i2c,
                                vss: vss(&gt.pose, est, mesh, cam),
                                add: a,
                                add_correct: ac,
                            }
                        }
                        None => InstanceEval {
                            frame: rec.frame,
                            gt_index: g,
                            class: gt.class,
                            matched: false,
                            iou2d: 0.0,
                            iou2d_correct: false,
                            vss: 0.0,
                            add: f64::INFINITY,
                            add_correct: false,
                        },
                    }
                })
                .collect()
        })
        .collect();
    let instances: Vec<InstanceEval> = per_frame.into_iter().flatten().collect();
    let models_summary = models
        .iter()
        .enumerate()
        .map(|(c, m)| {
            let mine: Vec<&InstanceEval> = instances.iter().filter(|e| e.class == c).collect();
            let n = mine.len();
            let frac = |f: &dyn Fn(&InstanceEval) -> f64| {
                if n == 0 {
                    0.0
                } else {
                    mine.iter().map(|e| f(e)).sum::<f64>() / n as f64
                }
            };
            ModelSummary {
                model: m.name.clone(),
                symmetry: m.viewspace.symmetry(),
                instances: n,
                iou2d: frac(&|e| e.iou2d_correct as u8 as f64),
                vss: frac(&|e| e.vss),
                add: frac(&|e| e.add_correct as u8 as f64),
                add_flagged: m.viewspace.symmetry() != SymmetryClass::None,
            }
        })
        .collect();
    Ok(EvalSummary {
        vss_normalization: "union".into(),
        detection,
        models: models_summary,
        instances,
    })
}

/// Writes `summary.json`, `instances.csv` and `detection_sweep.csv`.
pub fn write_evaluation(dir: &Path, summary: &EvalSummary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("summary.json"), summary)?;
    let mut s = String::from("frame,gt_index,class,matched,iou2d,iou2d_correct,vss,add,add_correct\n");
    for e in &summary.instances {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{},{:.6},{:.6},{}",
            e.frame, e.gt_index, e.class, e.matched, e.iou2d, e.iou2d_correct, e.vss, e.add, e.add_correct
        );
    }
    let p = dir.join("instances.csv");
    std::fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
    let mut s = String::from("threshold,tp,fp,fn,precision,recall,f1,interpolated_precision\n");
    for r in &summary.detection.rows {
        let _ = writeln!(
            s,
            "{:.4},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.threshold,
            r.true_positives,
            r.false_positives,
            r.false_negatives,
            r.precision,
            r.recall,
            r.f1,
            r.interpolated_precision
        );
    }
    let p = dir.join("detection_sweep.csv");
    std::fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

/// Evaluates stored results against the stored dataset.
pub fn evaluate_from_disk(cfg: &PipelineConfig) -> Result<EvalSummary> {
    let results = read_results(&cfg.paths.output.join("results.json"))?;
    let manifest = read_manifest(&cfg.paths.dataset)?;
    if manifest.frames != results.len() {
        return Err(Error::Data(format!(
            "{} result frames for a dataset of {} frames",
            results.len(),
            manifest.frames
        )));
    }
    let annotations: Vec<Vec<Annotation>> = (0..manifest.frames)
        .map(|f| load_frame(&cfg.paths.dataset, f).map(|x| x.2))
        .collect::<Result<_>>()?;
    let models = cfg.load_models()?;
    let summary = cfg.install(|| {
        evaluate(&results, &annotations, &models, &cfg.camera, cfg.eval_iou, cfg.sweep_thresholds)
    })??;
    write_evaluation(&cfg.paths.output, &summary)?;
    Ok(summary)
}
