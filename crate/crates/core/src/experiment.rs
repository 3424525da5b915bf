//! Declarative experiment runs: data, training, refinement, baselines and
//! metric reports written to one output directory with a reproducibility
//! stamp.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fbpose_tensor::Network;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::baseline::{direct_fit_with, pso_fit, FitProblem, FitResult, LbfgsConfig, LearnedSynth, SwarmConfig, Synthesizer};
use crate::depth::DepthImage;
use crate::error::{invalid, CoreError, Result};
use crate::feedback::{run_combined, run_hand_loop_batch, run_joint_loop_batch, LoopState};
use crate::geometry::CameraIntrinsics;
use crate::joint::{train_joint_model, JointModel};
use crate::metrics::{combined_metric_e, histogram, mann_whitney_less, mean, mean_joint_error, median, visibility, MetricKind, MetricReport, VisibilitySet};
use crate::pipeline::{
    improvement_audit, load_net, noised_items, normalize_pose, pose_error_mm, train_hand_model, train_hand_synthesizer,
    HandEnv, HandModel, PipelineConfig, TrainLogs,
};
use crate::pose::{corners_from_pose, CornerSet, ObjectPose};
use crate::scene::{make_dataset, sha256_hex, Dataset, SceneConfig};
use crate::train::write_log;

/// Environment variable that replaces the experiment seed.
pub const SEED_ENV: &str = "FBPOSE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    HandOnly,
    HandObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct BaselineConfig {
    /// Number of test samples fitted; 0 disables the stage.
    pub samples: usize,
    pub lbfgs: LbfgsConfig,
    pub pso: Option<SwarmConfig>,
}


/// One-step improvement audit on noised held-out poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub enabled: bool,
    /// Noise scales; the first is the headline one.
    pub sigmas: Vec<f64>,
    pub lambda: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            enabled: true,
            sigmas: vec![0.1],
            lambda: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub scene: SceneKind,
    /// Training data uses `seed`, test data `seed + 1`.
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Read datasets from disk instead of generating them.
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    /// Load trained weights instead of training.
    pub model_dir: Option<PathBuf>,
    /// Hand synthesizer weights reused by the joint pipeline.
    pub synthesizer: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub iterations: usize,
    pub baseline: BaselineConfig,
    pub audit: AuditConfig,
    /// Test samples whose loop images are dumped.
    pub dump: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            scene: SceneKind::HandOnly,
            seed: 1,
            train_samples: 5000,
            test_samples: 500,
            train_data: None,
            test_data: None,
            model_dir: None,
            synthesizer: None,
            pipeline: PipelineConfig::default(),
            iterations: 2,
            baseline: BaselineConfig::default(),
            audit: AuditConfig::default(),
            dump: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|_| CoreError::MissingArtifact {
            stage: "config".into(),
            path: path.display().to_string(),
        })?;
        let mut cfg: ExperimentConfig = serde_json::from_slice(&bytes)?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s.parse().map_err(|_| CoreError::Invalid(format!("{SEED_ENV} is not an integer: {s}")))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if self.train_data.is_none() && self.model_dir.is_none() && self.train_samples == 0 {
            return invalid("train_samples must be positive");
        }
        if self.test_data.is_none() && self.test_samples == 0 {
            return invalid("test_samples must be positive");
        }
        if !(self.audit.lambda > 0.0 && self.audit.lambda < 1.0) {
            return invalid("audit lambda must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).unwrap())
    }

    fn scene_config(&self) -> SceneConfig {
        match self.scene {
            SceneKind::HandOnly => SceneConfig::hand_only(),
            SceneKind::HandObject => SceneConfig::hand_object(),
        }
    }
}

/// Seeds and checksums identifying a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub name: String,
    pub config_hash: String,
    pub version: String,
    pub seeds: BTreeMap<String, u64>,
    pub datasets: BTreeMap<String, String>,
    pub reports: BTreeMap<String, String>,
}

/// Improvement audit at one noise scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub sigma: f64,
    pub lambda: f64,
    /// Fraction with `|p'' - p| < lambda |p' - p|`.
    pub fraction: f64,
    /// Normalized distances before and after one update.
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    pub pre_mm: MetricReport,
    pub post_mm: MetricReport,
    /// One-sided rank test of post-update errors below pre-update errors.
    pub mann_whitney_u: f64,
    pub mann_whitney_p: f64,
}

/// Pooled per-pixel synthesizer error on the test crops, in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelSummary {
    pub pixels: usize,
    pub mean: f64,
    pub median: f64,
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub sample: usize,
    pub initial_error: f64,
    pub final_error: f64,
    pub loop_error: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub evaluations: usize,
    pub line_search_failed: bool,
    /// Objective decreased while the pose error increased.
    pub misled: bool,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub method: String,
    pub samples: usize,
    pub initial_mean: f64,
    pub final_mean: f64,
    pub loop_mean: f64,
    pub misled: usize,
    /// Samples with an accepted step that lowered the objective but raised
    /// the pose error.
    pub misled_steps: usize,
    pub rows: Vec<BaselineRow>,
}

/// Everything a run produced, as also written to disk.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub reports: BTreeMap<String, MetricReport>,
    pub audits: Vec<AuditReport>,
    pub pixels: Option<PixelSummary>,
    pub baselines: Vec<BaselineSummary>,
    pub logs: TrainLogs,
    pub stamp: Option<Stamp>,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn dataset(path: &Option<PathBuf>, n: usize, scene: &SceneConfig, seed: u64, stage: &str) -> Result<Dataset> {
    match path {
        Some(p) => Dataset::read(p).map_err(|e| match e {
            CoreError::MissingArtifact { path, .. } => CoreError::MissingArtifact { stage: stage.into(), path },
            e => e,
        }),
        None => make_dataset(n, scene, seed),
    }
}

fn images(data: &Dataset) -> Vec<(&DepthImage, CameraIntrinsics)> {
    data.samples.iter().map(|s| (&s.depth, s.camera)).collect()
}

/// Runs the declared pipeline and writes its artifacts below `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let scene = cfg.scene_config();
    let test = dataset(&cfg.test_data, cfg.test_samples, &scene, cfg.seed + 1, "test-data")?;
    let mut outcome = Outcome::default();
    let mut seeds = BTreeMap::new();
    seeds.insert("train-data".to_string(), cfg.seed);
    seeds.insert("test-data".to_string(), cfg.seed + 1);
    let p = &cfg.pipeline;
    for (k, t) in [("localizer", &p.localizer_train), ("predictor", &p.predictor_train), ("synthesizer", &p.synth_train), ("updater", &p.updater_train)] {
        seeds.insert(k.to_string(), t.seed);
    }
    let mut datasets = BTreeMap::new();
    datasets.insert("test".to_string(), dataset_hash(&test));
    match cfg.scene {
        SceneKind::HandOnly => {
            let model = match &cfg.model_dir {
                Some(dir) => HandModel::load(dir)?,
                None => {
                    let train = dataset(&cfg.train_data, cfg.train_samples, &scene, cfg.seed, "train-data")?;
                    datasets.insert("train".to_string(), dataset_hash(&train));
                    let (m, logs) = train_hand_model(&train, &cfg.pipeline)?;
                    outcome.logs = logs;
                    m
                }
            };
            model.save(&out.join("model"))?;
            hand_stage(cfg, &model, &test, out, &mut outcome)?;
        }
        SceneKind::HandObject => {
            let model = match &cfg.model_dir {
                Some(dir) => JointModel::load(dir)?,
                None => {
                    let synth = match &cfg.synthesizer {
                        Some(p) => load_net(p, "synthesizer")?,
                        None => {
                            let hand = make_dataset(cfg.train_samples, &SceneConfig::hand_only(), cfg.seed + 2)?;
                            seeds.insert("synthesizer-data".to_string(), cfg.seed + 2);
                            let (s, log) = synthesizer_from(&hand, &cfg.pipeline)?;
                            outcome.logs.insert("synthesizer".into(), log);
                            s
                        }
                    };
                    let train = dataset(&cfg.train_data, cfg.train_samples, &scene, cfg.seed, "train-data")?;
                    datasets.insert("train".to_string(), dataset_hash(&train));
                    let object = scene.object.clone().ok_or_else(|| CoreError::Invalid("hand-object scene without object".into()))?;
                    let (m, logs) = train_joint_model(&train, &synth, &cfg.pipeline, &object)?;
                    outcome.logs.extend(logs);
                    m
                }
            };
            model.save(&out.join("model"))?;
            joint_stage(cfg, &model, &test, out, &mut outcome)?;
        }
    }
    for (stage, log) in &outcome.logs {
        fs::create_dir_all(out.join("logs"))?;
        write_log(&out.join("logs").join(format!("{stage}.csv")), log)?;
    }
    let mut reports = BTreeMap::new();
    for (name, r) in &outcome.reports {
        let path = out.join("reports").join(format!("{name}.json"));
        write_json(&path, r)?;
        reports.insert(format!("reports/{name}.json"), sha256_hex(&fs::read(&path)?));
    }
    for a in &outcome.audits {
        let path = out.join("reports").join(format!("audit-sigma-{:.3}.json", a.sigma));
        write_json(&path, a)?;
        reports.insert(format!("reports/audit-sigma-{:.3}.json", a.sigma), sha256_hex(&fs::read(&path)?));
    }
    if let Some(px) = &outcome.pixels {
        let path = out.join("reports").join("synthesizer-pixels.json");
        write_json(&path, px)?;
        reports.insert("reports/synthesizer-pixels.json".into(), sha256_hex(&fs::read(&path)?));
    }
    for b in &outcome.baselines {
        let name = format!("reports/baseline-{}.json", b.method);
        write_json(&out.join(&name), b)?;
        reports.insert(name.clone(), sha256_hex(&fs::read(out.join(&name))?));
    }
    let stamp = Stamp {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds,
        datasets,
        reports,
    };
    write_json(&out.join("stamp.json"), &stamp)?;
    write_json(&out.join("config.json"), cfg)?;
    outcome.stamp = Some(stamp);
    Ok(outcome)
}

fn dataset_hash(d: &Dataset) -> String {
    sha256_hex(&serde_json::to_vec(&d.manifest).unwrap())
}

/// Trains a stand-alone hand synthesizer on ground-truth-centred crops.
pub fn synthesizer_from(data: &Dataset, cfg: &PipelineConfig) -> Result<(Network<f32>, Vec<crate::train::EpochLog>)> {
    let cube = cfg.hand_cube();
    let mut crops = Vec::with_capacity(data.len());
    let mut poses = Vec::with_capacity(data.len());
    for s in &data.samples {
        let loc = s.hand.joints[crate::hand::MCP];
        let ct = crate::geometry::compute_crop_transform(&loc, &cube, &s.camera, cfg.scale.crop)?;
        crops.push(crate::pipeline::normalized_crop(&s.depth, &ct));
        poses.push(normalize_pose(&s.hand, &loc, cfg.hand_cube));
    }
    train_hand_synthesizer(&crops, &poses, cfg)
}

fn split_states(states: Vec<Result<LoopState>>) -> (Vec<Option<LoopState>>, Vec<usize>) {
    let mut skipped = Vec::new();
    let kept = states
        .into_iter()
        .enumerate()
        .map(|(i, s)| match s {
            Ok(s) => Some(s),
            Err(_) => {
                skipped.push(i);
                None
            }
        })
        .collect();
    (kept, skipped)
}

fn hand_stage(cfg: &ExperimentConfig, model: &HandModel, test: &Dataset, out: &Path, o: &mut Outcome) -> Result<()> {
    let states = run_hand_loop_batch(&images(test), model, cfg.iterations)?;
    let (states, skipped) = split_states(states);
    for k in 0..=cfg.iterations {
        let errs = per_sample(&states, |i, st| mean_joint_error(&st.hand_pose(k), &test.samples[i].hand))?;
        o.reports.insert(format!("hand-iter-{k}"), MetricReport::new(MetricKind::MeanJointError, &format!("hand error after {k} iterations"), errs, skipped.clone()));
    }
    let c = model.cfg.hand_cube;
    let live: Vec<(usize, &LoopState)> = states.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|s| (i, s))).collect();
    let crops: Vec<Vec<f32>> = live.iter().map(|(_, s)| s.observed.clone()).collect();
    let gt: Vec<Vec<f64>> = live.iter().map(|(i, s)| normalize_pose(&test.samples[*i].hand, &Vector3::from(s.hand_location), c)).collect();

    let syn = crate::feedback::synthesize(&model.synth, &gt)?;
    let mut pooled = Vec::with_capacity(syn.len() * model.cfg.scale.pixels());
    let mut per = Vec::with_capacity(syn.len());
    for (s, x) in syn.iter().zip(&crops) {
        let e: Vec<f64> = s.iter().zip(x).map(|(a, b)| (a - b).abs() as f64 * c).collect();
        per.push(mean(&e));
        pooled.extend(e);
    }
    o.reports.insert("synthesizer".into(), MetricReport::new(MetricKind::PixelError, "mean pixel error per test crop", per, skipped.clone()));
    o.pixels = Some(PixelSummary {
        pixels: pooled.len(),
        mean: mean(&pooled),
        median: median(&pooled),
        histogram: histogram(&pooled, 1.0, 50),
    });

    if cfg.audit.enabled {
        let env = HandEnv {
            crops: &crops,
            synth: &model.synth,
        };
        let space = model.space();
        for (k, sigma) in cfg.audit.sigmas.iter().enumerate() {
            let items = noised_items(&gt, &space, *sigma, 1, cfg.seed + 1000 + k as u64);
            let (fraction, pairs) = improvement_audit(&model.updater, &env, &space, &gt, &items, cfg.audit.lambda, cfg.seed)?;
            let mut rng = <fbpose_tensor::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
            let post = crate::nets::apply_updater(&model.updater, &env, &space, &items, 64, &mut rng)?;
            let pre_mm: Vec<f64> = items.iter().map(|(i, p)| pose_error_mm(p, &gt[*i], c)).collect();
            let post_mm: Vec<f64> = items.iter().zip(&post).map(|((i, _), p)| pose_error_mm(p, &gt[*i], c)).collect();
            let (u, pv) = mann_whitney_less(&post_mm, &pre_mm)?;
            o.audits.push(AuditReport {
                sigma: *sigma,
                lambda: cfg.audit.lambda,
                fraction,
                pre: pairs.iter().map(|p| p.0).collect(),
                post: pairs.iter().map(|p| p.1).collect(),
                pre_mm: MetricReport::new(MetricKind::MeanJointError, "before update", pre_mm, vec![]),
                post_mm: MetricReport::new(MetricKind::MeanJointError, "after update", post_mm, vec![]),
                mann_whitney_u: u,
                mann_whitney_p: pv,
            });
        }
    }

    if cfg.baseline.samples > 0 {
        let n = cfg.baseline.samples.min(live.len());
        let synth = LearnedSynth { net: &model.synth };
        let lb = run_baseline(&live[..n], &gt[..n], &synth, c, out, "lbfgs", |p| direct_fit_with(p, &cfg.baseline.lbfgs))?;
        o.reports.insert("baseline-lbfgs".into(), MetricReport::new(MetricKind::MeanJointError, "direct fit", lb.rows.iter().map(|r| r.final_error).collect(), vec![]));
        o.baselines.push(lb);
        if let Some(sw) = &cfg.baseline.pso {
            let ps = run_baseline(&live[..n], &gt[..n], &synth, c, out, "pso", |p| pso_fit(p, sw))?;
            o.reports.insert("baseline-pso".into(), MetricReport::new(MetricKind::MeanJointError, "particle swarm fit", ps.rows.iter().map(|r| r.final_error).collect(), vec![]));
            o.baselines.push(ps);
        }
    }

    for (i, st) in live.iter().take(cfg.dump) {
        dump_images(st, &out.join("images").join(format!("sample_{i:04}")))?;
    }
    Ok(())
}

fn per_sample(states: &[Option<LoopState>], mut f: impl FnMut(usize, &LoopState) -> Result<f64>) -> Result<Vec<f64>> {
    states.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|s| f(i, s))).collect()
}

#[allow(clippy::too_many_arguments)]
fn run_baseline<S: Synthesizer>(
    live: &[(usize, &LoopState)],
    gt: &[Vec<f64>],
    synth: &S,
    c: f64,
    out: &Path,
    method: &str,
    fit: impl Fn(&FitProblem<S>) -> Result<FitResult>,
) -> Result<BaselineSummary> {
    let dir = out.join("baseline").join(method);
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::with_capacity(live.len());
    let mut misled_steps = 0;
    for ((i, st), g) in live.iter().zip(gt) {
        let obs: Vec<f64> = st.observed.iter().map(|v| *v as f64).collect();
        let problem = FitProblem::in_cube(obs, synth, st.hand[0].clone())?;
        let r = fit(&problem)?;
        let errs: Vec<f64> = r.iterates.iter().map(|q| pose_error_mm(q, g, c)).collect();
        let trace = format!("baseline/{method}/trace_{i:04}.csv");
        let mut f = fs::File::create(out.join(&trace))?;
        writeln!(f, "step,objective,pose_error")?;
        for (k, (ob, e)) in r.objective.iter().zip(&errs).enumerate() {
            writeln!(f, "{k},{ob},{e}")?;
        }
        if r.objective.windows(2).zip(errs.windows(2)).any(|(ob, e)| ob[1] < ob[0] && e[1] > e[0]) {
            misled_steps += 1;
        }
        let (f0, f1) = (r.objective[0], *r.objective.last().unwrap());
        let (e0, e1) = (errs[0], *errs.last().unwrap());
        rows.push(BaselineRow {
            sample: *i,
            initial_error: e0,
            final_error: e1,
            loop_error: pose_error_mm(st.hand.last().unwrap(), g, c),
            initial_objective: f0,
            final_objective: f1,
            evaluations: r.evaluations,
            line_search_failed: r.line_search_failed,
            misled: f1 < f0 && e1 > e0,
            trace,
        });
    }
    let mut csv = fs::File::create(dir.join("samples.csv"))?;
    writeln!(csv, "sample,initial_error,final_error,loop_error,initial_objective,final_objective,evaluations,line_search_failed,trace")?;
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.sample, r.initial_error, r.final_error, r.loop_error, r.initial_objective, r.final_objective, r.evaluations, r.line_search_failed, r.trace
        )?;
    }
    let col = |f: fn(&BaselineRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(BaselineSummary {
        method: method.into(),
        samples: rows.len(),
        initial_mean: col(|r| r.initial_error),
        final_mean: col(|r| r.final_error),
        loop_mean: col(|r| r.loop_error),
        misled: rows.iter().filter(|r| r.misled).count(),
        misled_steps,
        rows,
    })
}

/// Fingertip positions, visibility and corners of one test scene.
struct JointTruth {
    vis: VisibilitySet,
    corners: CornerSet,
}

fn joint_e(st: &LoopState, k: usize, model: &JointModel, s: &crate::scene::TrainingSample, t: &JointTruth) -> Option<f64> {
    let hand = st.hand_pose(k);
    let obj = st.object_pose(k, &model.object_model.bbox_half)?;
    combined_metric_e(&hand.joints, &s.hand.joints, &t.vis, &corners_from_pose(&obj, &model.object_model.bbox_half), &t.corners)
}

fn joint_stage(cfg: &ExperimentConfig, model: &JointModel, test: &Dataset, out: &Path, o: &mut Outcome) -> Result<()> {
    let half = model.object_model.bbox_half;
    let truth: Vec<JointTruth> = test
        .samples
        .iter()
        .map(|s| {
            let obj = s.object.unwrap_or_else(ObjectPose::identity);
            Ok(JointTruth {
                vis: visibility(&s.hand, &test.manifest.config.hand, s.object.as_ref().map(|p| (p, &model.object_model)), &s.camera)?,
                corners: corners_from_pose(&obj, &half),
            })
        })
        .collect::<Result<_>>()?;
    let states = run_joint_loop_batch(&images(test), model, cfg.iterations, true)?;
    let (states, mut skipped) = split_states(states);
    let mut e_by_iter = vec![Vec::new(); cfg.iterations + 1];
    let mut h_by_iter = vec![Vec::new(); cfg.iterations + 1];
    for (i, st) in states.iter().enumerate() {
        let Some(st) = st else { continue };
        let es: Vec<Option<f64>> = (0..=cfg.iterations).map(|k| joint_e(st, k, model, &test.samples[i], &truth[i])).collect();
        if es.iter().any(|e| e.is_none()) {
            skipped.push(i);
            continue;
        }
        for k in 0..=cfg.iterations {
            e_by_iter[k].push(es[k].unwrap());
            h_by_iter[k].push(mean_joint_error(&st.hand_pose(k), &test.samples[i].hand)?);
        }
    }
    skipped.sort_unstable();
    for k in 0..=cfg.iterations {
        o.reports.insert(
            format!("joint-e-iter-{k}"),
            MetricReport::new(MetricKind::CombinedE, &format!("combined error after {k} iterations"), e_by_iter[k].clone(), skipped.clone()),
        );
        o.reports.insert(
            format!("joint-hand-iter-{k}"),
            MetricReport::new(MetricKind::MeanJointError, &format!("hand error after {k} iterations"), h_by_iter[k].clone(), skipped.clone()),
        );
    }
    if let Some(net) = &model.combined {
        let preds = run_combined(&images(test), model, net)?;
        let mut es = Vec::new();
        let mut sk = Vec::new();
        for (i, p) in preds.into_iter().enumerate() {
            let e = p.ok().and_then(|(h, ob)| combined_metric_e(&h.joints, &test.samples[i].hand.joints, &truth[i].vis, &corners_from_pose(&ob, &half), &truth[i].corners));
            match e {
                Some(e) => es.push(e),
                None => sk.push(i),
            }
        }
        o.reports.insert("joint-e-combined".into(), MetricReport::new(MetricKind::CombinedE, "single combined-input predictor", es, sk));
    }
    for (i, st) in states.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|s| (i, s))).take(cfg.dump) {
        dump_images(st, &out.join("images").join(format!("sample_{i:04}")))?;
    }
    Ok(())
}

/// Binary 16-bit PGM, big-endian samples.
pub fn write_pgm16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in data {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CoreError::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| CoreError::Format(format!("bad PGM field {s}")));
    if fields[0] != "P5" || num(&fields[3])? != 65535 {
        return Err(CoreError::Format("expected 16-bit binary PGM".into()));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..pos + 2 * w * h).ok_or_else(|| CoreError::Format("truncated PGM body".into()))?;
    Ok((w, h, body.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()))
}

/// Normalized crop values to integer millimetres around `z`.
pub fn quantize_crop(v: &[f32], z: f64, c: f64) -> Vec<u16> {
    v.iter().map(|x| (z + *x as f64 * c).round().clamp(0.0, 65535.0) as u16).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpSidecar {
    pub iteration: usize,
    pub channel: String,
    pub location: [f64; 3],
    pub cube: f64,
    /// Pose in mm at this iteration.
    pub pose: Vec<[f64; 3]>,
}

/// Writes observed, synthesized and difference images per iteration.
pub fn dump_images(st: &LoopState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    if st.synthesized.is_empty() {
        return invalid("loop state has no synthesized images");
    }
    let channels: Vec<(&str, [f64; 3], f64)> = match (st.object_location, st.object_cube) {
        (Some(l), Some(c)) => vec![("hand", st.hand_location, st.hand_cube), ("object", l, c)],
        _ => vec![("hand", st.hand_location, st.hand_cube)],
    };
    let per = st.observed.len() / channels.len();
    let side = (per as f64).sqrt().round() as usize;
    if side == 0 || side * side * channels.len() != st.observed.len() {
        return invalid("crop is not square");
    }
    for (k, syn) in st.synthesized.iter().enumerate() {
        for (ch, (name, loc, c)) in channels.iter().enumerate() {
            let chunk = |v: &[f32]| v[ch * per..(ch + 1) * per].to_vec();
            let obs = quantize_crop(&chunk(&st.observed), loc[2], *c);
            let Some(s) = syn.get(ch * per..(ch + 1) * per) else {
                return invalid("synthesized image shorter than observed");
            };
            let syn_q = quantize_crop(s, loc[2], *c);
            let diff: Vec<u16> = obs.iter().zip(&syn_q).map(|(a, b)| a.abs_diff(*b)).collect();
            let stem = format!("iter_{k:02}_{name}");
            write_pgm16(&dir.join(format!("{stem}_observed.pgm")), side, side, &obs)?;
            write_pgm16(&dir.join(format!("{stem}_synthesized.pgm")), side, side, &syn_q)?;
            write_pgm16(&dir.join(format!("{stem}_difference.pgm")), side, side, &diff)?;
            let pose: Vec<[f64; 3]> = if *name == "hand" {
                st.hand.get(k).map(|_| st.hand_pose(k).joints.iter().map(|j| [j.x, j.y, j.z]).collect()).unwrap_or_default()
            } else {
                st.object.get(k).map(|v| v.chunks_exact(3).map(|p| [loc[0] + p[0] * c, loc[1] + p[1] * c, loc[2] + p[2] * c]).collect()).unwrap_or_default()
            };
            write_json(
                &dir.join(format!("{stem}.json")),
                &DumpSidecar {
                    iteration: k,
                    channel: name.to_string(),
                    location: *loc,
                    cube: *c,
                    pose,
                },
            )?;
        }
    }
    Ok(())
}
