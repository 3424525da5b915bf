//! Joint hand-object pipeline: separate localizers, predictors and updaters
//! for the hand and the object, sharing one merged synthetic image.

use std::path::Path;

use fbpose_tensor::{ChaCha8Rng, Network, Tensor, WeightsContainer};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::depth::{DepthImage, FAR_DEPTH};
use crate::error::{CoreError, Result};
use crate::geometry::{compute_crop_transform, crop_with, istn_paste_values, CameraIntrinsics, CropTransform, CubeSpec};
use crate::hand::MCP;
use crate::nets::{
    localizer_arch, predictor_arch, train_updater, updater_arch, HandSpace, ObjectSpace, PoseSpace, PriorRegression, UpdaterEnv, UpdaterPoseSet,
};
use crate::object::ObjectModel;
use crate::pipeline::{
    com_crop, improvement_audit, load_container, load_net, noised_items, normalize_pose, normalized_crop, offset_target, predict_rows, push_prior,
    read_prior, refine_locations, save_net, to_f32, to_f64, train_regressor, PipelineConfig, TrainLogs,
};
use crate::pose::{corners_flat, corners_from_flat, corners_from_pose, fit_prior, pose_from_corners, ObjectPose, PosePrior};
use crate::render::render_object;
use crate::scene::Dataset;
use crate::train::{fit, EpochLog};

/// Normalized synthesized depth at or beyond this value counts as empty.
pub const REAR_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct JointModel {
    pub cfg: PipelineConfig,
    pub object_model: ObjectModel,
    pub hand_localizer: Network<f32>,
    pub object_localizer: Network<f32>,
    pub hand_predictor: Network<f32>,
    pub hand_prior: PosePrior,
    pub object_predictor: Network<f32>,
    pub synth: Network<f32>,
    pub hand_updater: Network<f32>,
    pub object_updater: Network<f32>,
    /// Single network on the combined crop predicting hand and object.
    pub combined: Option<Network<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JointMeta {
    cfg: PipelineConfig,
    object_model: ObjectModel,
}

impl JointModel {
    pub fn hand_space(&self) -> HandSpace {
        HandSpace {
            dim: self.hand_prior.dim(),
            prior: self.cfg.updater_prior_space.then(|| self.hand_prior.clone()),
        }
    }

    pub fn object_space(&self) -> ObjectSpace {
        object_space(&self.object_model, self.cfg.object_cube)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = JointMeta {
            cfg: self.cfg.clone(),
            object_model: self.object_model.clone(),
        };
        std::fs::write(dir.join("joint.json"), serde_json::to_vec_pretty(&meta)?)?;
        let role = |r: &str| serde_json::json!({ "role": r });
        let seed = self.cfg.updater_train.seed;
        save_net(&self.hand_localizer, &dir.join("hand_localizer.fbw"), seed, role("localizer"))?;
        save_net(&self.object_localizer, &dir.join("object_localizer.fbw"), seed, role("localizer"))?;
        let mut c = WeightsContainer::from_network(&self.hand_predictor, seed, role("hand-predictor"));
        push_prior(&mut c, &self.hand_prior)?;
        c.save(dir.join("hand_predictor.fbw"))?;
        save_net(&self.object_predictor, &dir.join("object_predictor.fbw"), seed, role("object-predictor"))?;
        save_net(&self.synth, &dir.join("synthesizer.fbw"), seed, role("synthesizer"))?;
        save_net(&self.hand_updater, &dir.join("hand_updater.fbw"), seed, role("updater"))?;
        save_net(&self.object_updater, &dir.join("object_updater.fbw"), seed, role("updater"))?;
        if let Some(c) = &self.combined {
            save_net(c, &dir.join("combined_predictor.fbw"), seed, role("combined-predictor"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("joint.json");
        if !p.exists() {
            return Err(CoreError::MissingArtifact {
                stage: "joint-model".into(),
                path: p.display().to_string(),
            });
        }
        let meta: JointMeta = serde_json::from_slice(&std::fs::read(&p)?)?;
        let hp = load_container(&dir.join("hand_predictor.fbw"), "hand-predictor")?;
        let cp = dir.join("combined_predictor.fbw");
        Ok(JointModel {
            hand_localizer: load_net(&dir.join("hand_localizer.fbw"), "hand-localizer")?,
            object_localizer: load_net(&dir.join("object_localizer.fbw"), "object-localizer")?,
            hand_predictor: hp.network()?,
            hand_prior: read_prior(&hp)?,
            object_predictor: load_net(&dir.join("object_predictor.fbw"), "object-predictor")?,
            synth: load_net(&dir.join("synthesizer.fbw"), "synthesizer")?,
            hand_updater: load_net(&dir.join("hand_updater.fbw"), "hand-updater")?,
            object_updater: load_net(&dir.join("object_updater.fbw"), "object-updater")?,
            combined: if cp.exists() { Some(load_net(&cp, "combined-predictor")?) } else { None },
            cfg: meta.cfg,
            object_model: meta.object_model,
        })
    }

    pub fn predict_hands(&self, crops: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<&[f32]> = crops.iter().map(|c| c.as_slice()).collect();
        let space = self.hand_space();
        Ok(predict_rows(&self.hand_predictor, &rows, 64)?
            .into_iter()
            .map(|a| space.project(&self.hand_prior.decode(&to_f64(&a))))
            .collect())
    }

    pub fn predict_objects(&self, crops: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<&[f32]> = crops.iter().map(|c| c.as_slice()).collect();
        let space = self.object_space();
        Ok(predict_rows(&self.object_predictor, &rows, 64)?.into_iter().map(|a| space.project(&to_f64(&a))).collect())
    }
}

pub fn object_space(model: &ObjectModel, cube: f64) -> ObjectSpace {
    ObjectSpace {
        half: model.bbox_half.map(|h| h / cube),
    }
}

/// Normalized corners of `pose` around `loc`.
pub fn normalize_object(pose: &ObjectPose, half: &[f64; 3], loc: &Vector3<f64>, c: f64) -> Vec<f64> {
    corners_flat(&corners_from_pose(pose, half).map(|p| (p - loc) / c))
}

/// Rigid pose from normalized corners around `loc`.
pub fn denormalize_object(corners: &[f64], half: &[f64; 3], loc: &Vector3<f64>, c: f64) -> Result<ObjectPose> {
    let cs = corners_from_flat(corners)?.map(|p| loc + p * c);
    pose_from_corners(&cs, half)
}

/// Full-frame merged synthetic depth: the normalized hand patch pasted
/// through the inverse crop, then the pixel-wise minimum with the rendered
/// object.
pub fn compose_full(
    hand_patch: Option<(&[f32], &CropTransform)>,
    object: Option<(&ObjectPose, &ObjectModel)>,
    cam: &CameraIntrinsics,
) -> Result<DepthImage> {
    let (w, h) = (cam.width, cam.height);
    let mut data = vec![FAR_DEPTH; w * h];
    if let Some((patch, ct)) = hand_patch {
        let mut canvas = vec![1.0f64; w * h];
        let p: Vec<f64> = patch.iter().map(|v| *v as f64).collect();
        istn_paste_values(&p, ct, &mut canvas, w, h)?;
        for (d, n) in data.iter_mut().zip(&canvas) {
            if *n < REAR_THRESHOLD {
                *d = ct.denormalize_depth(*n) as f32;
            }
        }
    }
    if let Some((pose, model)) = object {
        let o = render_object(pose, model, cam)?;
        for (d, v) in data.iter_mut().zip(&o.data) {
            *d = d.min(*v);
        }
    }
    DepthImage::from_data(w, h, data)
}

/// Observed and synthetic crops sharing one transform.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedInput {
    pub observed: Vec<f32>,
    pub synthetic: Vec<f32>,
}

impl StackedInput {
    /// Channel-stacked `[observed, synthetic]`.
    pub fn stacked(&self) -> Vec<f32> {
        let mut v = self.observed.clone();
        v.extend_from_slice(&self.synthetic);
        v
    }
}

/// Crops the merged synthetic image at `target` and pairs it with the
/// observed crop there.
pub fn compose_s(observed: &[f32], merged: &DepthImage, target: &CropTransform) -> StackedInput {
    StackedInput {
        observed: observed.to_vec(),
        synthetic: to_f32(&crop_with(merged, target).0),
    }
}

/// Per-sample crops and normalized targets around the refined locations.
pub struct JointCrops {
    pub hand_ct: Vec<CropTransform>,
    pub object_ct: Vec<CropTransform>,
    pub cams: Vec<CameraIntrinsics>,
    pub hand_crops: Vec<Vec<f32>>,
    pub object_crops: Vec<Vec<f32>>,
    pub hands: Vec<Vec<f64>>,
    pub objects: Vec<Vec<f64>>,
}

pub fn joint_crops(data: &Dataset, hl: &Network<f32>, ol: &Network<f32>, cfg: &PipelineConfig, model: &ObjectModel) -> Result<JointCrops> {
    let imgs: Vec<(&DepthImage, CameraIntrinsics)> = data.samples.iter().map(|s| (&s.depth, s.camera)).collect();
    let locs = refine_locations(&imgs, &[hl, ol], &CubeSpec::uniform(cfg.joint_cube), cfg.band)?;
    let n = data.len();
    let mut jc = JointCrops {
        hand_ct: Vec::with_capacity(n),
        object_ct: Vec::with_capacity(n),
        cams: Vec::with_capacity(n),
        hand_crops: Vec::with_capacity(n),
        object_crops: Vec::with_capacity(n),
        hands: Vec::with_capacity(n),
        objects: Vec::with_capacity(n),
    };
    for (s, l) in data.samples.iter().zip(locs) {
        let l = l?;
        let hct = compute_crop_transform(&l[0], &cfg.hand_cube(), &s.camera, cfg.scale.crop)?;
        let oct = compute_crop_transform(&l[1], &CubeSpec::uniform(cfg.object_cube), &s.camera, cfg.scale.crop)?;
        jc.hand_crops.push(normalized_crop(&s.depth, &hct));
        jc.object_crops.push(normalized_crop(&s.depth, &oct));
        jc.hands.push(normalize_pose(&s.hand, &l[0], cfg.hand_cube));
        let obj = s.object.ok_or_else(|| CoreError::Invalid("joint sample without object".into()))?;
        jc.objects.push(normalize_object(&obj, &model.bbox_half, &l[1], cfg.object_cube));
        jc.hand_ct.push(hct);
        jc.object_ct.push(oct);
        jc.cams.push(s.camera);
    }
    Ok(jc)
}

/// Hand updater input in the joint setting: the object channel comes from
/// a random candidate object pose of the same image.
pub struct JointHandEnv<'a> {
    pub jc: &'a JointCrops,
    pub objects: &'a [Vec<ObjectPose>],
    pub model: &'a ObjectModel,
    pub synth: &'a Network<f32>,
}

impl UpdaterEnv for JointHandEnv<'_> {
    fn input_shape(&self) -> Vec<usize> {
        let s = self.synth.output_shape();
        vec![2, s[1], s[2]]
    }

    fn build(&self, items: &[(usize, &[f64])], rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let poses: Vec<Vec<f32>> = items.iter().map(|(_, p)| to_f32(p)).collect();
        let rows: Vec<&[f32]> = poses.iter().map(|p| p.as_slice()).collect();
        let syn = predict_rows(self.synth, &rows, 64)?;
        let mut data = Vec::new();
        for ((i, _), patch) in items.iter().zip(&syn) {
            let cands = &self.objects[*i];
            let obj = &cands[rng.random_range(0..cands.len())];
            let ct = &self.jc.hand_ct[*i];
            let merged = compose_full(Some((patch, ct)), Some((obj, self.model)), &self.jc.cams[*i])?;
            data.extend(compose_s(&self.jc.hand_crops[*i], &merged, ct).stacked());
        }
        let mut shape = vec![items.len()];
        shape.extend(self.input_shape());
        Ok(Tensor::from_vec(&shape, data)?)
    }
}

/// Object updater input: the hand channel is synthesized from a random
/// candidate hand pose of the same image.
pub struct JointObjectEnv<'a> {
    pub jc: &'a JointCrops,
    pub hands: &'a [Vec<Vec<f64>>],
    pub model: &'a ObjectModel,
    pub synth: &'a Network<f32>,
    pub object_cube: f64,
}

impl UpdaterEnv for JointObjectEnv<'_> {
    fn input_shape(&self) -> Vec<usize> {
        let s = self.synth.output_shape();
        vec![2, s[1], s[2]]
    }

    fn build(&self, items: &[(usize, &[f64])], rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let hands: Vec<Vec<f32>> = items
            .iter()
            .map(|(i, _)| {
                let c = &self.hands[*i];
                to_f32(&c[rng.random_range(0..c.len())])
            })
            .collect();
        let rows: Vec<&[f32]> = hands.iter().map(|p| p.as_slice()).collect();
        let syn = predict_rows(self.synth, &rows, 64)?;
        let mut data = Vec::new();
        for ((i, corners), patch) in items.iter().zip(&syn) {
            let oct = &self.jc.object_ct[*i];
            let obj = denormalize_object(corners, &self.model.bbox_half, &oct.center, self.object_cube)?;
            let merged = compose_full(Some((patch, &self.jc.hand_ct[*i])), Some((&obj, self.model)), &self.jc.cams[*i])?;
            data.extend(compose_s(&self.jc.object_crops[*i], &merged, oct).stacked());
        }
        let mut shape = vec![items.len()];
        shape.extend(self.input_shape());
        Ok(Tensor::from_vec(&shape, data)?)
    }
}

fn probe(n: usize) -> usize {
    n.min(256)
}

/// Trains all joint networks on `data`, reusing the hand synthesizer.
pub fn train_joint_model(data: &Dataset, synth: &Network<f32>, cfg: &PipelineConfig, object_model: &ObjectModel) -> Result<(JointModel, TrainLogs)> {
    cfg.validate()?;
    let mut logs = TrainLogs::new();
    let joint_cube = CubeSpec::uniform(cfg.joint_cube);
    let n = data.len();
    let mut com_inputs = Vec::with_capacity(n);
    let mut ht = Vec::with_capacity(n);
    let mut ot = Vec::with_capacity(n);
    let mut combined_t = Vec::with_capacity(n);
    for s in &data.samples {
        let (ct, x) = com_crop(&s.depth, &s.camera, &joint_cube, cfg.scale.crop, cfg.band)?;
        let obj = s.object.ok_or_else(|| CoreError::Invalid("joint sample without object".into()))?;
        ht.push(to_f32(&offset_target(&ct, &s.camera, &s.hand.joints[MCP])?));
        ot.push(to_f32(&offset_target(&ct, &s.camera, &obj.translation)?));
        let mut t = normalize_pose(&s.hand, &ct.center, cfg.joint_cube);
        t.extend(normalize_object(&obj, &object_model.bbox_half, &ct.center, cfg.joint_cube));
        combined_t.push(to_f32(&t));
        com_inputs.push(x);
    }
    let lcfg = &cfg.localizer_train;
    let (hl, log) = train_regressor(localizer_arch(&cfg.scale, 1, 3), &com_inputs, &ht, lcfg, "hand-localizer", |_| Ok(f64::NAN))?;
    logs.insert("hand-localizer".into(), log);
    let ocfg = crate::train::TrainConfig {
        seed: lcfg.seed + 1,
        ..lcfg.clone()
    };
    let (ol, log) = train_regressor(localizer_arch(&cfg.scale, 1, 3), &com_inputs, &ot, &ocfg, "object-localizer", |_| Ok(f64::NAN))?;
    logs.insert("object-localizer".into(), log);
    let jc = joint_crops(data, &hl, &ol, cfg, object_model)?;

    let k = if cfg.joint_hand_prior { cfg.prior_k } else { jc.hands[0].len() };
    let prior = fit_prior(&jc.hands, k)?.to_f32_precision();
    let arch = predictor_arch(&cfg.scale, cfg.predictor, prior.k());
    let mut hp = Network::new(arch.clone(), cfg.predictor_train.seed)?;
    let mut obj = PriorRegression {
        inputs: &jc.hand_crops,
        input_shape: arch.input_shape.clone(),
        targets: &jc.hands,
        prior: &prior,
        weight: cfg.hand_cube * cfg.hand_cube,
    };
    logs.insert("hand-predictor".into(), fit(&mut hp, &mut obj, &cfg.predictor_train, "hand-predictor", |_| Ok(f64::NAN))?);

    let space_o = object_space(object_model, cfg.object_cube);
    let o32: Vec<Vec<f32>> = jc.objects.iter().map(|o| to_f32(o)).collect();
    let m = probe(n);
    let pcfg = crate::train::TrainConfig {
        seed: cfg.predictor_train.seed + 1,
        ..cfg.predictor_train.clone()
    };
    let (op, log) = train_regressor(predictor_arch(&cfg.scale, cfg.predictor, 24), &jc.object_crops, &o32, &pcfg, "object-predictor", |net| {
        let rows: Vec<&[f32]> = jc.object_crops[..m].iter().map(|c| c.as_slice()).collect();
        let out = predict_rows(net, &rows, 64)?;
        let mut err = 0.0;
        for (o, g) in out.iter().zip(&jc.objects) {
            let a = corners_from_flat(&to_f64(o)).and_then(|c| pose_from_corners(&c, &space_o.half));
            let b = corners_from_flat(g).and_then(|c| pose_from_corners(&c, &space_o.half))?;
            err += a.map_or(std::f64::consts::PI, |a| a.rotation_angle_to(&b)).to_degrees();
        }
        Ok(err / m as f64)
    })?;
    logs.insert("object-predictor".into(), log);

    let mut model = JointModel {
        cfg: cfg.clone(),
        object_model: object_model.clone(),
        hand_localizer: hl,
        object_localizer: ol,
        hand_predictor: hp,
        hand_prior: prior,
        object_predictor: op,
        synth: synth.clone(),
        hand_updater: Network::new(updater_arch(&cfg.scale, 1), 0)?,
        object_updater: Network::new(updater_arch(&cfg.scale, 1), 0)?,
        combined: None,
    };
    let (hu, ou, l1, l2) = train_joint_updaters(&model, &jc)?;
    model.hand_updater = hu;
    model.object_updater = ou;
    logs.insert("hand-updater".into(), l1);
    logs.insert("object-updater".into(), l2);

    let ccfg = crate::train::TrainConfig {
        seed: cfg.predictor_train.seed + 2,
        ..cfg.predictor_train.clone()
    };
    let out = combined_t[0].len();
    let (cp, log) = train_regressor(predictor_arch(&cfg.scale, cfg.predictor, out), &com_inputs, &combined_t, &ccfg, "combined-predictor", |_| Ok(f64::NAN))?;
    model.combined = Some(cp);
    logs.insert("combined-predictor".into(), log);
    Ok((model, logs))
}

/// Trains the hand and object updaters against the merged image.
pub fn train_joint_updaters(model: &JointModel, jc: &JointCrops) -> Result<(Network<f32>, Network<f32>, Vec<EpochLog>, Vec<EpochLog>)> {
    let cfg = &model.cfg;
    let hs = model.hand_space();
    let os = model.object_space();
    let hp = model.predict_hands(&jc.hand_crops)?;
    let op = model.predict_objects(&jc.object_crops)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.updater_train.seed ^ 0x0b1e);
    let hset = UpdaterPoseSet::build(&jc.hands, &hp, &hs, &cfg.pose_set, &mut rng)?;
    let oset = UpdaterPoseSet::build(&jc.objects, &op, &os, &cfg.pose_set, &mut rng)?;
    let obj_cands: Vec<Vec<ObjectPose>> = oset
        .sets
        .iter()
        .zip(&jc.object_ct)
        .map(|(s, ct)| s.iter().filter_map(|c| denormalize_object(c, &model.object_model.bbox_half, &ct.center, cfg.object_cube).ok()).collect())
        .collect();
    let hand_cands = hset.sets.clone();
    let m = probe(jc.hands.len());

    let henv = JointHandEnv {
        jc,
        objects: &obj_cands,
        model: &model.object_model,
        synth: &model.synth,
    };
    let hprobe = noised_items(&jc.hands[..m], &hs, cfg.pose_set.sigma, 1, cfg.updater_train.seed);
    let mut hu = Network::new(updater_arch(&cfg.scale, hs.out_dim()), cfg.updater_train.seed)?;
    let (hl, _, _) = train_updater(&mut hu, &henv, &hs, &jc.hands, hset, &cfg.pose_set, &cfg.updater_train, "hand-updater", |net| {
        Ok(improvement_audit(net, &henv, &hs, &jc.hands, &hprobe, cfg.pose_set.lambda, 0)?.0)
    })?;

    let oenv = JointObjectEnv {
        jc,
        hands: &hand_cands,
        model: &model.object_model,
        synth: &model.synth,
        object_cube: cfg.object_cube,
    };
    let oprobe = noised_items(&jc.objects[..m], &os, cfg.pose_set.sigma, 1, cfg.updater_train.seed + 1);
    let ucfg = crate::train::TrainConfig {
        seed: cfg.updater_train.seed + 1,
        ..cfg.updater_train.clone()
    };
    let mut ou = Network::new(updater_arch(&cfg.scale, os.out_dim()), ucfg.seed)?;
    let (ol, _, _) = train_updater(&mut ou, &oenv, &os, &jc.objects, oset, &cfg.pose_set, &ucfg, "object-updater", |net| {
        Ok(improvement_audit(net, &oenv, &os, &jc.objects, &oprobe, cfg.pose_set.lambda, 0)?.0)
    })?;
    Ok((hu, ou, hl, ol))
}
