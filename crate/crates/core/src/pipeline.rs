//! Hand-only pipeline: localization, training of the four networks, and
//! the iterative refinement loop.

use std::collections::BTreeMap;
use std::path::Path;

use fbpose_tensor::{ChaCha8Rng, Network, Tensor, WeightsContainer};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthImage;
use crate::error::{invalid, CoreError, Result};
use crate::geometry::{center_of_mass, compute_crop_transform, crop_with, CameraIntrinsics, CropTransform, CubeSpec, DepthBand};
use crate::nets::{
    apply_updater, distance, localizer_arch, predictor_arch, synthesizer_arch, train_synthesizer, train_updater, updater_arch, HandSpace,
    NetScale, PoseSetConfig, PoseSpace, PredictorKind, PriorRegression, UpdaterEnv, UpdaterPoseSet,
};
use crate::pose::{fit_prior, HandPose, PosePrior};
use crate::scene::Dataset;
use crate::train::{fit, stack_inputs, EpochLog, Regression, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub scale: NetScale,
    pub hand_cube: f64,
    pub object_cube: f64,
    pub joint_cube: f64,
    pub prior_k: usize,
    pub predictor: PredictorKind,
    pub band: DepthBand,
    pub localizer_train: TrainConfig,
    pub predictor_train: TrainConfig,
    pub synth_train: TrainConfig,
    pub synth_stage_epochs: Vec<usize>,
    pub updater_train: TrainConfig,
    pub pose_set: PoseSetConfig,
    /// Hand updater emits prior coefficients rather than joint deltas.
    pub updater_prior_space: bool,
    /// Joint pipeline hand predictor decodes through the prior.
    pub joint_hand_prior: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        PipelineConfig {
            scale: NetScale::default(),
            hand_cube: 125.0,
            object_cube: 80.0,
            joint_cube: 175.0,
            prior_k: 30,
            predictor: PredictorKind::Simple,
            band: DepthBand::default(),
            localizer_train: TrainConfig {
                epochs: 10,
                seed: 11,
                ..t.clone()
            },
            predictor_train: TrainConfig {
                epochs: 25,
                seed: 12,
                ..t.clone()
            },
            synth_train: TrainConfig {
                batch_size: 16,
                seed: 13,
                ..t.clone()
            },
            synth_stage_epochs: vec![3, 3, 3, 12],
            updater_train: TrainConfig {
                epochs: 12,
                batch_size: 16,
                seed: 14,
                ..t
            },
            pose_set: PoseSetConfig::default(),
            updater_prior_space: true,
            joint_hand_prior: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        self.pose_set.validate()?;
        if self.synth_stage_epochs.len() != self.scale.synth_stages() {
            return invalid("synth_stage_epochs must list one count per synthesizer stage");
        }
        if [self.hand_cube, self.object_cube, self.joint_cube].iter().any(|c| *c <= 0.0) {
            return invalid("cube sizes must be positive");
        }
        Ok(())
    }

    pub fn hand_cube(&self) -> CubeSpec {
        CubeSpec::uniform(self.hand_cube)
    }
}

pub fn save_net(net: &Network<f32>, path: &Path, seed: u64, meta: serde_json::Value) -> Result<()> {
    WeightsContainer::from_network(net, seed, meta).save(path)?;
    Ok(())
}

pub fn load_container(path: &Path, stage: &str) -> Result<WeightsContainer> {
    if !path.exists() {
        return Err(CoreError::MissingArtifact {
            stage: stage.to_string(),
            path: path.display().to_string(),
        });
    }
    Ok(WeightsContainer::load(path)?)
}

pub fn load_net(path: &Path, stage: &str) -> Result<Network<f32>> {
    Ok(load_container(path, stage)?.network()?)
}

pub fn push_prior(c: &mut WeightsContainer, prior: &PosePrior) -> Result<()> {
    let (d, k) = prior.basis.shape();
    c.push("prior.mean", Tensor::from_vec(&[d], prior.mean.as_slice().to_vec())?);
    c.push("prior.basis", Tensor::from_vec(&[d, k], prior.basis.transpose().as_slice().to_vec())?);
    Ok(())
}

pub fn read_prior(c: &WeightsContainer) -> Result<PosePrior> {
    let (Some(m), Some(b)) = (c.get("prior.mean"), c.get("prior.basis")) else {
        return Err(CoreError::Format("weights carry no prior".into()));
    };
    let (d, k) = (b.shape()[0], b.shape()[1]);
    Ok(PosePrior {
        mean: DVector::from_column_slice(m.data()),
        basis: DMatrix::from_row_slice(d, k, b.data()),
    })
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

/// Inference over per-item inputs of a common shape.
pub fn predict_rows(net: &Network<f32>, rows: &[&[f32]], batch: usize) -> Result<Vec<Vec<f32>>> {
    let shape = net.input_shape().to_vec();
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(batch.max(1)) {
        let y = net.predict(&stack_inputs(chunk, &shape)?)?;
        let per = y.len() / chunk.len();
        out.extend(y.data().chunks_exact(per).map(|c| c.to_vec()));
    }
    Ok(out)
}

pub fn normalized_crop(d: &DepthImage, ct: &CropTransform) -> Vec<f32> {
    to_f32(&crop_with(d, ct).0)
}

/// Localizer target: position of `p` in the target grid of `ct` and its
/// depth offset in cube units.
pub fn offset_target(ct: &CropTransform, cam: &CameraIntrinsics, p: &Vector3<f64>) -> Result<[f64; 3]> {
    let (u, v, z) = cam.project(p)?;
    Ok([
        (u - ct.a[(0, 2)]) / ct.a[(0, 0)],
        (v - ct.a[(1, 2)]) / ct.a[(1, 1)],
        (z - ct.center.z) / ct.depth_half(),
    ])
}

/// Inverse of [`offset_target`].
pub fn apply_offset(ct: &CropTransform, cam: &CameraIntrinsics, l: &[f64]) -> Vector3<f64> {
    let u = ct.a[(0, 2)] + l[0] * ct.a[(0, 0)];
    let v = ct.a[(1, 2)] + l[1] * ct.a[(1, 1)];
    let z = ct.center.z + l[2] * ct.depth_half();
    cam.backproject(u, v, z)
}

/// Centre-of-mass crop used as localizer input.
pub fn com_crop(d: &DepthImage, cam: &CameraIntrinsics, cube: &CubeSpec, size: usize, band: DepthBand) -> Result<(CropTransform, Vec<f32>)> {
    let com = center_of_mass(d, cam, band)?;
    let ct = compute_crop_transform(&com, cube, cam, size)?;
    Ok((ct, normalized_crop(d, &ct)))
}

/// Crop at the centre of mass, predict the offset, return the corrected
/// 3D location.
pub fn refine_location(d: &DepthImage, net: &Network<f32>, cam: &CameraIntrinsics, cube: &CubeSpec, band: DepthBand) -> Result<Vector3<f64>> {
    let size = net.input_shape()[1];
    let (ct, x) = com_crop(d, cam, cube, size, band)?;
    let l = net.predict_one(&Tensor::from_vec(net.input_shape(), x)?)?;
    Ok(apply_offset(&ct, cam, &to_f64(l.data())))
}

/// Batched [`refine_location`] for several localizers sharing one
/// centre-of-mass crop.
pub fn refine_locations(images: &[(&DepthImage, CameraIntrinsics)], nets: &[&Network<f32>], cube: &CubeSpec, band: DepthBand) -> Result<Vec<Result<Vec<Vector3<f64>>>>> {
    let Some(first) = nets.first() else {
        return invalid("no localizer");
    };
    let size = first.input_shape()[1];
    let crops: Vec<Result<(CropTransform, Vec<f32>)>> = images.iter().map(|(d, cam)| com_crop(d, cam, cube, size, band)).collect();
    let ok: Vec<&[f32]> = crops.iter().filter_map(|c| c.as_ref().ok().map(|(_, x)| x.as_slice())).collect();
    let outs: Vec<Vec<Vec<f32>>> = nets.iter().map(|n| predict_rows(n, &ok, 64)).collect::<Result<_>>()?;
    let mut k = 0;
    let mut res = Vec::with_capacity(images.len());
    for (c, (_, cam)) in crops.into_iter().zip(images) {
        match c {
            Ok((ct, _)) => {
                res.push(Ok(outs.iter().map(|o| apply_offset(&ct, cam, &to_f64(&o[k]))).collect()));
                k += 1;
            }
            Err(e) => res.push(Err(e)),
        }
    }
    Ok(res)
}

pub fn train_regressor(
    arch: fbpose_tensor::Architecture,
    inputs: &[Vec<f32>],
    targets: &[Vec<f32>],
    cfg: &TrainConfig,
    stage: &str,
    metric: impl FnMut(&Network<f32>) -> Result<f64>,
) -> Result<(Network<f32>, Vec<EpochLog>)> {
    let shape = arch.input_shape.clone();
    let mut net = Network::new(arch, cfg.seed)?;
    let mut obj = Regression {
        inputs,
        input_shape: shape,
        targets,
        weight: 1.0,
    };
    let log = fit(&mut net, &mut obj, cfg, stage, metric)?;
    Ok((net, log))
}

/// Updater input: observed crop stacked with the synthesized crop.
pub struct HandEnv<'a> {
    pub crops: &'a [Vec<f32>],
    pub synth: &'a Network<f32>,
}

impl UpdaterEnv for HandEnv<'_> {
    fn input_shape(&self) -> Vec<usize> {
        let s = self.synth.output_shape();
        vec![2, s[1], s[2]]
    }

    fn build(&self, items: &[(usize, &[f64])], _rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let poses: Vec<Vec<f32>> = items.iter().map(|(_, p)| to_f32(p)).collect();
        let rows: Vec<&[f32]> = poses.iter().map(|p| p.as_slice()).collect();
        let syn = self.synth.predict(&stack_inputs(&rows, self.synth.input_shape())?)?;
        let px = self.crops.first().map_or(0, |c| c.len());
        let mut data = Vec::with_capacity(items.len() * 2 * px);
        for (b, (i, _)) in items.iter().enumerate() {
            data.extend_from_slice(&self.crops[*i]);
            data.extend_from_slice(&syn.data()[b * px..(b + 1) * px]);
        }
        let mut shape = vec![items.len()];
        shape.extend(self.input_shape());
        Ok(Tensor::from_vec(&shape, data)?)
    }
}

/// Hand poses as normalized cube coordinates around `loc`.
pub fn normalize_pose(pose: &HandPose, loc: &Vector3<f64>, c: f64) -> Vec<f64> {
    pose.joints.iter().flat_map(|j| ((j - loc) / c).iter().copied().collect::<Vec<_>>()).collect()
}

pub fn denormalize_pose(q: &[f64], loc: &Vector3<f64>, c: f64) -> HandPose {
    HandPose::new(q.chunks_exact(3).map(|v| loc + Vector3::new(v[0], v[1], v[2]) * c).collect())
}

/// Mean joint distance between two normalized poses, in mm.
pub fn pose_error_mm(a: &[f64], b: &[f64], c: f64) -> f64 {
    let n = a.len() / 3;
    a.chunks_exact(3)
        .zip(b.chunks_exact(3))
        .map(|(x, y)| distance(x, y))
        .sum::<f64>()
        * c
        / n as f64
}

/// Trained hand-only networks.
#[derive(Debug, Clone)]
pub struct HandModel {
    pub cfg: PipelineConfig,
    pub localizer: Network<f32>,
    pub predictor: Network<f32>,
    pub prior: PosePrior,
    pub synth: Network<f32>,
    pub updater: Network<f32>,
}

pub type TrainLogs = BTreeMap<String, Vec<EpochLog>>;

/// Prepared per-sample inputs around the refined hand location.
pub struct HandCrops {
    pub locations: Vec<Vector3<f64>>,
    pub crops: Vec<Vec<f32>>,
    pub poses: Vec<Vec<f64>>,
}

pub fn hand_crops(data: &Dataset, localizer: &Network<f32>, cfg: &PipelineConfig) -> Result<HandCrops> {
    let cube = cfg.hand_cube();
    let imgs: Vec<(&DepthImage, CameraIntrinsics)> = data.samples.iter().map(|s| (&s.depth, s.camera)).collect();
    let locs = refine_locations(&imgs, &[localizer], &cube, cfg.band)?;
    let mut out = HandCrops {
        locations: Vec::with_capacity(data.len()),
        crops: Vec::with_capacity(data.len()),
        poses: Vec::with_capacity(data.len()),
    };
    for (s, l) in data.samples.iter().zip(locs) {
        let loc = l?[0];
        let ct = compute_crop_transform(&loc, &cube, &s.camera, cfg.scale.crop)?;
        out.crops.push(normalized_crop(&s.depth, &ct));
        out.poses.push(normalize_pose(&s.hand, &loc, cfg.hand_cube));
        out.locations.push(loc);
    }
    Ok(out)
}

fn probe(n: usize) -> usize {
    n.min(256)
}

impl HandModel {
    pub fn space(&self) -> HandSpace {
        HandSpace {
            dim: self.prior.dim(),
            prior: self.cfg.updater_prior_space.then(|| self.prior.clone()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("pipeline.json"), serde_json::to_vec_pretty(&self.cfg)?)?;
        save_net(&self.localizer, &dir.join("localizer.fbw"), self.cfg.localizer_train.seed, serde_json::json!({"role": "localizer"}))?;
        let mut c = WeightsContainer::from_network(&self.predictor, self.cfg.predictor_train.seed, serde_json::json!({"role": "hand-predictor"}));
        push_prior(&mut c, &self.prior)?;
        c.save(dir.join("predictor.fbw"))?;
        save_net(&self.synth, &dir.join("synthesizer.fbw"), self.cfg.synth_train.seed, serde_json::json!({"role": "synthesizer"}))?;
        save_net(&self.updater, &dir.join("updater.fbw"), self.cfg.updater_train.seed, serde_json::json!({"role": "updater"}))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("pipeline.json");
        if !cfg_path.exists() {
            return Err(CoreError::MissingArtifact {
                stage: "hand-model".into(),
                path: cfg_path.display().to_string(),
            });
        }
        let cfg: PipelineConfig = serde_json::from_slice(&std::fs::read(&cfg_path)?)?;
        let pc = load_container(&dir.join("predictor.fbw"), "hand-predictor")?;
        Ok(HandModel {
            localizer: load_net(&dir.join("localizer.fbw"), "localizer")?,
            predictor: pc.network()?,
            prior: read_prior(&pc)?,
            synth: load_net(&dir.join("synthesizer.fbw"), "synthesizer")?,
            updater: load_net(&dir.join("updater.fbw"), "updater")?,
            cfg,
        })
    }

    /// Predictor output decoded to normalized poses.
    pub fn predict_poses(&self, crops: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<&[f32]> = crops.iter().map(|c| c.as_slice()).collect();
        Ok(predict_rows(&self.predictor, &rows, 64)?
            .into_iter()
            .map(|a| self.space().project(&self.prior.decode(&to_f64(&a))))
            .collect())
    }
}

/// Trains the localizer on centre-of-mass crops of `data`.
pub fn train_hand_localizer(data: &Dataset, cfg: &PipelineConfig) -> Result<(Network<f32>, Vec<EpochLog>)> {
    let cube = cfg.hand_cube();
    let mut inputs = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    let mut truth = Vec::with_capacity(data.len());
    for s in &data.samples {
        let (ct, x) = com_crop(&s.depth, &s.camera, &cube, cfg.scale.crop, cfg.band)?;
        let mcp = s.hand.joints[crate::hand::MCP];
        targets.push(to_f32(&offset_target(&ct, &s.camera, &mcp)?));
        inputs.push(x);
        truth.push((ct, mcp));
    }
    let m = probe(data.len());
    let metric = |net: &Network<f32>| -> Result<f64> {
        let rows: Vec<&[f32]> = inputs[..m].iter().map(|c| c.as_slice()).collect();
        let out = predict_rows(net, &rows, 64)?;
        Ok(out
            .iter()
            .zip(&truth[..m])
            .zip(&data.samples[..m])
            .map(|((l, (ct, mcp)), s)| (apply_offset(ct, &s.camera, &to_f64(l)) - mcp).norm())
            .sum::<f64>()
            / m as f64)
    };
    train_regressor(localizer_arch(&cfg.scale, 1, 3), &inputs, &targets, &cfg.localizer_train, "localizer", metric)
}

/// Trains the prior-constrained predictor on `crops` against `poses`.
pub fn train_hand_predictor(crops: &[Vec<f32>], poses: &[Vec<f64>], prior: &PosePrior, cfg: &PipelineConfig, stage: &str) -> Result<(Network<f32>, Vec<EpochLog>)> {
    let arch = predictor_arch(&cfg.scale, cfg.predictor, prior.k());
    let mut net = Network::new(arch.clone(), cfg.predictor_train.seed)?;
    let c = cfg.hand_cube;
    let mut obj = PriorRegression {
        inputs: crops,
        input_shape: arch.input_shape.clone(),
        targets: poses,
        prior,
        weight: c * c,
    };
    let m = probe(crops.len());
    let log = fit(&mut net, &mut obj, &cfg.predictor_train, stage, |net| {
        let rows: Vec<&[f32]> = crops[..m].iter().map(|c| c.as_slice()).collect();
        let out = predict_rows(net, &rows, 64)?;
        Ok(out.iter().zip(poses).map(|(a, q)| pose_error_mm(&prior.decode(&to_f64(a)), q, c)).sum::<f64>() / m as f64)
    })?;
    Ok((net, log))
}

/// Trains the progressive synthesizer on (pose, crop) pairs.
pub fn train_hand_synthesizer(crops: &[Vec<f32>], poses: &[Vec<f64>], cfg: &PipelineConfig) -> Result<(Network<f32>, Vec<EpochLog>)> {
    let p32: Vec<Vec<f32>> = poses.iter().map(|p| to_f32(p)).collect();
    let m = probe(crops.len());
    train_synthesizer(&cfg.scale, &p32, crops, &cfg.synth_stage_epochs, &cfg.synth_train, |net| {
        let rows: Vec<&[f32]> = p32[..m].iter().map(|p| p.as_slice()).collect();
        let out = predict_rows(net, &rows, 64)?;
        let mut err = 0.0;
        for (o, c) in out.iter().zip(crops) {
            err += o.iter().zip(c).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / o.len() as f64;
        }
        Ok(err / m as f64)
    })
}

/// Fraction of `items` (image, start pose) whose one-step update satisfies
/// the improvement inequality, with pre/post errors in normalized units.
pub fn improvement_audit<E: UpdaterEnv, S: PoseSpace>(
    net: &Network<f32>,
    env: &E,
    space: &S,
    gt: &[Vec<f64>],
    items: &[(usize, Vec<f64>)],
    lambda: f64,
    seed: u64,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let post = apply_updater(net, env, space, items, 64, &mut rng)?;
    let pairs: Vec<(f64, f64)> = items.iter().zip(&post).map(|((i, p0), p1)| (distance(p0, &gt[*i]), distance(p1, &gt[*i]))).collect();
    let ok = pairs.iter().filter(|(a, b)| b < &(lambda * a)).count();
    Ok((ok as f64 / pairs.len().max(1) as f64, pairs))
}

/// Noised starting poses around `gt`, `per` per image.
pub fn noised_items<S: PoseSpace>(gt: &[Vec<f64>], space: &S, sigma: f64, per: usize, seed: u64) -> Vec<(usize, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(gt.len() * per);
    for (i, g) in gt.iter().enumerate() {
        for _ in 0..per {
            items.push((i, space.perturb(g, sigma, &mut rng)));
        }
    }
    items
}

/// Full hand-only training on `data`.
pub fn train_hand_model(data: &Dataset, cfg: &PipelineConfig) -> Result<(HandModel, TrainLogs)> {
    cfg.validate()?;
    let mut logs = TrainLogs::new();
    let (localizer, log) = train_hand_localizer(data, cfg)?;
    logs.insert("localizer".into(), log);
    let hc = hand_crops(data, &localizer, cfg)?;
    let prior = fit_prior(&hc.poses, cfg.prior_k)?.to_f32_precision();
    let (predictor, log) = train_hand_predictor(&hc.crops, &hc.poses, &prior, cfg, "hand-predictor")?;
    logs.insert("hand-predictor".into(), log);
    let (synth, log) = train_hand_synthesizer(&hc.crops, &hc.poses, cfg)?;
    logs.insert("synthesizer".into(), log);
    let mut model = HandModel {
        cfg: cfg.clone(),
        localizer,
        predictor,
        prior,
        synth,
        updater: Network::new(updater_arch(&cfg.scale, 1), 0)?,
    };
    let (updater, log, _) = train_hand_updater(&model, &hc)?;
    model.updater = updater;
    logs.insert("updater".into(), log);
    Ok((model, logs))
}

pub fn train_hand_updater(model: &HandModel, hc: &HandCrops) -> Result<(Network<f32>, Vec<EpochLog>, Vec<usize>)> {
    let cfg = &model.cfg;
    let space = model.space();
    let pred = model.predict_poses(&hc.crops)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.updater_train.seed ^ 0x5eed);
    let set = UpdaterPoseSet::build(&hc.poses, &pred, &space, &cfg.pose_set, &mut rng)?;
    let env = HandEnv {
        crops: &hc.crops,
        synth: &model.synth,
    };
    let m = probe(hc.poses.len());
    let probe_items = noised_items(&hc.poses[..m], &space, cfg.pose_set.sigma, 1, cfg.updater_train.seed);
    let mut net = Network::new(updater_arch(&cfg.scale, space.out_dim()), cfg.updater_train.seed)?;
    let (log, _, growth) = train_updater(&mut net, &env, &space, &hc.poses, set, &cfg.pose_set, &cfg.updater_train, "updater", |net| {
        Ok(improvement_audit(net, &env, &space, &hc.poses, &probe_items, cfg.pose_set.lambda, 0)?.0)
    })?;
    Ok((net, log, growth))
}

/// Architecture of the hand synthesizer for `cfg`.
pub fn hand_synth_arch(cfg: &PipelineConfig, dim: usize) -> fbpose_tensor::Architecture {
    synthesizer_arch(&cfg.scale, dim, cfg.scale.synth_blocks.len())
}
