//! Inference-time refinement loops: the hand-only iteration and the joint
//! hand-object loop over the merged image.

use fbpose_tensor::{ChaCha8Rng, Network};
use nalgebra::Vector3;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthImage;
use crate::error::Result;
use crate::geometry::{compute_crop_transform, CameraIntrinsics, CropTransform, CubeSpec};
use crate::joint::{compose_full, compose_s, denormalize_object, JointModel};
use crate::nets::{apply_updater, PoseSpace};
use crate::pipeline::{denormalize_pose, normalized_crop, predict_rows, refine_locations, to_f32, to_f64, HandEnv, HandModel};
use crate::pose::{corners_from_flat, HandPose, ObjectPose};

/// Trajectory of one refinement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub iterations: usize,
    pub hand_location: [f64; 3],
    pub hand_cube: f64,
    /// Normalized hand poses, initialization first.
    pub hand: Vec<Vec<f64>>,
    pub object_location: Option<[f64; 3]>,
    pub object_cube: Option<f64>,
    /// Normalized object corners, initialization first.
    pub object: Vec<Vec<f64>>,
    pub observed: Vec<f32>,
    /// Synthesized channel fed to the updater at each iteration, plus the
    /// one at the final pose.
    pub synthesized: Vec<Vec<f32>>,
    pub flags: Vec<String>,
}

impl LoopState {
    pub fn hand_pose(&self, i: usize) -> HandPose {
        denormalize_pose(&self.hand[i], &Vector3::from(self.hand_location), self.hand_cube)
    }

    pub fn final_hand(&self) -> HandPose {
        self.hand_pose(self.hand.len() - 1)
    }
}

/// Hand-only refinement: localize, predict, then `n` synthesize/update
/// steps. Images are processed in batches.
pub fn run_hand_loop_batch(images: &[(&DepthImage, CameraIntrinsics)], model: &HandModel, n: usize) -> Result<Vec<Result<LoopState>>> {
    let cfg = &model.cfg;
    let cube = cfg.hand_cube();
    let locs = refine_locations(images, &[&model.localizer], &cube, cfg.band)?;
    let mut states: Vec<Result<LoopState>> = Vec::with_capacity(images.len());
    for ((d, cam), l) in images.iter().zip(locs) {
        states.push(l.and_then(|l| {
            let ct = compute_crop_transform(&l[0], &cube, cam, cfg.scale.crop)?;
            Ok(LoopState {
                iterations: n,
                hand_location: l[0].into(),
                hand_cube: cfg.hand_cube,
                hand: Vec::new(),
                object_location: None,
                object_cube: None,
                object: Vec::new(),
                observed: normalized_crop(d, &ct),
                synthesized: Vec::new(),
                flags: Vec::new(),
            })
        }));
    }
    let live: Vec<usize> = (0..states.len()).filter(|i| states[*i].is_ok()).collect();
    let crops: Vec<Vec<f32>> = live.iter().map(|i| states[*i].as_ref().unwrap().observed.clone()).collect();
    let mut poses = model.predict_poses(&crops)?;
    let env = HandEnv {
        crops: &crops,
        synth: &model.synth,
    };
    let space = model.space();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut traj = vec![poses.clone()];
    let mut syn = Vec::with_capacity(n + 1);
    for _ in 0..n {
        let items: Vec<(usize, Vec<f64>)> = poses.iter().cloned().enumerate().collect();
        syn.push(synthesize(&model.synth, &poses)?);
        poses = apply_updater(&model.updater, &env, &space, &items, 64, &mut rng)?;
        traj.push(poses.clone());
    }
    syn.push(synthesize(&model.synth, &poses)?);
    for (k, i) in live.iter().enumerate() {
        let st = states[*i].as_mut().unwrap();
        st.hand = traj.iter().map(|t| t[k].clone()).collect();
        st.synthesized = syn.iter().map(|s| s[k].clone()).collect();
    }
    Ok(states)
}

pub fn synthesize(synth: &Network<f32>, poses: &[Vec<f64>]) -> Result<Vec<Vec<f32>>> {
    let p: Vec<Vec<f32>> = poses.iter().map(|q| to_f32(q)).collect();
    let rows: Vec<&[f32]> = p.iter().map(|q| q.as_slice()).collect();
    predict_rows(synth, &rows, 64)
}

pub fn run_hand_loop(d: &DepthImage, cam: &CameraIntrinsics, model: &HandModel, n: usize) -> Result<LoopState> {
    run_hand_loop_batch(&[(d, *cam)], model, n)?.pop().unwrap()
}


/// Applies an updater to pre-built stacked inputs.
fn update_all<S: PoseSpace>(net: &Network<f32>, space: &S, poses: &[Vec<f64>], inputs: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<&[f32]> = inputs.iter().map(|v| v.as_slice()).collect();
    let out = predict_rows(net, &rows, 64)?;
    Ok(poses.iter().zip(&out).map(|(p, o)| space.project(&space.step(p, o))).collect())
}

impl LoopState {
    pub fn object_pose(&self, i: usize, half: &[f64; 3]) -> Option<ObjectPose> {
        let (loc, c) = (self.object_location?, self.object_cube?);
        denormalize_object(self.object.get(i)?, half, &Vector3::from(loc), c).ok()
    }
}

/// Joint loop over a batch of images. Locations are estimated once; each
/// iteration recomposes the merged image from the current poses and applies
/// both updaters to their crops of it. With `concurrent` the two updater
/// branches run on separate threads.
pub fn run_joint_loop_batch(images: &[(&DepthImage, CameraIntrinsics)], model: &JointModel, n: usize, concurrent: bool) -> Result<Vec<Result<LoopState>>> {
    let cfg = &model.cfg;
    let locs = refine_locations(images, &[&model.hand_localizer, &model.object_localizer], &CubeSpec::uniform(cfg.joint_cube), cfg.band)?;
    let mut states: Vec<Result<(LoopState, CropTransform, CropTransform)>> = Vec::with_capacity(images.len());
    for ((d, cam), l) in images.iter().zip(locs) {
        states.push(l.and_then(|l| {
            let hct = compute_crop_transform(&l[0], &cfg.hand_cube(), cam, cfg.scale.crop)?;
            let oct = compute_crop_transform(&l[1], &CubeSpec::uniform(cfg.object_cube), cam, cfg.scale.crop)?;
            let mut observed = normalized_crop(d, &hct);
            observed.extend(normalized_crop(d, &oct));
            Ok((
                LoopState {
                    iterations: n,
                    hand_location: l[0].into(),
                    hand_cube: cfg.hand_cube,
                    hand: Vec::new(),
                    object_location: Some(l[1].into()),
                    object_cube: Some(cfg.object_cube),
                    object: Vec::new(),
                    observed,
                    synthesized: Vec::new(),
                    flags: Vec::new(),
                },
                hct,
                oct,
            ))
        }));
    }
    let live: Vec<usize> = (0..states.len()).filter(|i| states[*i].is_ok()).collect();
    let px = cfg.scale.pixels();
    let get = |i: usize| states[i].as_ref().unwrap();
    let hcrops: Vec<Vec<f32>> = live.iter().map(|i| get(*i).0.observed[..px].to_vec()).collect();
    let ocrops: Vec<Vec<f32>> = live.iter().map(|i| get(*i).0.observed[px..].to_vec()).collect();
    let mut hands = model.predict_hands(&hcrops)?;
    let mut objects = model.predict_objects(&ocrops)?;
    let (hs, os) = (model.hand_space(), model.object_space());
    let half = model.object_model.bbox_half;
    let mut htraj = vec![hands.clone()];
    let mut otraj = vec![objects.clone()];
    let mut syn_traj = Vec::with_capacity(n + 1);
    let compose = |hands: &[Vec<f64>], objects: &[Vec<f64>]| -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let p: Vec<Vec<f32>> = hands.iter().map(|h| to_f32(h)).collect();
        let rows: Vec<&[f32]> = p.iter().map(|v| v.as_slice()).collect();
        let patches = predict_rows(&model.synth, &rows, 64)?;
        let mut hin = Vec::with_capacity(live.len());
        let mut oin = Vec::with_capacity(live.len());
        for (k, i) in live.iter().enumerate() {
            let (_, hct, oct) = get(*i);
            let cam = &images[*i].1;
            let obj = denormalize_object(&objects[k], &half, &oct.center, cfg.object_cube).ok();
            let merged = compose_full(Some((&patches[k], hct)), obj.as_ref().map(|o| (o, &model.object_model)), cam)?;
            hin.push(compose_s(&hcrops[k], &merged, hct).stacked());
            oin.push(compose_s(&ocrops[k], &merged, oct).stacked());
        }
        Ok((hin, oin))
    };
    for _ in 0..n {
        let (hin, oin) = compose(&hands, &objects)?;
        let (nh, no) = if concurrent {
            std::thread::scope(|s| {
                let h = s.spawn(|| update_all(&model.hand_updater, &hs, &hands, &hin));
                let o = s.spawn(|| update_all(&model.object_updater, &os, &objects, &oin));
                (h.join().expect("hand branch panicked"), o.join().expect("object branch panicked"))
            })
        } else {
            (update_all(&model.hand_updater, &hs, &hands, &hin), update_all(&model.object_updater, &os, &objects, &oin))
        };
        syn_traj.push(pair_synthetic(&hin, &oin, px));
        hands = nh?;
        objects = no?;
        htraj.push(hands.clone());
        otraj.push(objects.clone());
    }
    let (hin, oin) = compose(&hands, &objects)?;
    syn_traj.push(pair_synthetic(&hin, &oin, px));
    for (k, i) in live.iter().enumerate() {
        let st = &mut states[*i].as_mut().unwrap().0;
        st.hand = htraj.iter().map(|t| t[k].clone()).collect();
        st.object = otraj.iter().map(|t| t[k].clone()).collect();
        st.synthesized = syn_traj.iter().map(|t| t[k].clone()).collect();
        if corners_from_flat(&st.object[0]).is_err() {
            st.flags.push("object initialization malformed".into());
        }
    }
    Ok(states.into_iter().map(|s| s.map(|(st, _, _)| st)).collect())
}

/// Synthetic channels of the hand and object inputs, concatenated.
fn pair_synthetic(hin: &[Vec<f32>], oin: &[Vec<f32>], px: usize) -> Vec<Vec<f32>> {
    hin.iter()
        .zip(oin)
        .map(|(h, o)| {
            let mut v = h[px..].to_vec();
            v.extend_from_slice(&o[px..]);
            v
        })
        .collect()
}

pub fn run_joint_loop(d: &DepthImage, cam: &CameraIntrinsics, model: &JointModel, n: usize) -> Result<(HandPose, ObjectPose, LoopState)> {
    let st = run_joint_loop_batch(&[(d, *cam)], model, n, true)?.pop().unwrap()?;
    let obj = st
        .object_pose(st.object.len() - 1, &model.object_model.bbox_half)
        .ok_or_else(|| crate::error::CoreError::Degenerate("object corners do not define a pose".into()))?;
    Ok((st.final_hand(), obj, st))
}

/// Predictions of the single combined-input network in millimetres.
pub fn run_combined(images: &[(&DepthImage, CameraIntrinsics)], model: &JointModel, net: &Network<f32>) -> Result<Vec<Result<(HandPose, ObjectPose)>>> {
    let cfg = &model.cfg;
    let cube = CubeSpec::uniform(cfg.joint_cube);
    let mut out = Vec::with_capacity(images.len());
    for (d, cam) in images {
        out.push((|| {
            let (ct, x) = crate::pipeline::com_crop(d, cam, &cube, cfg.scale.crop, cfg.band)?;
            let y = to_f64(&predict_rows(net, &[x.as_slice()], 1)?[0]);
            let j = model.hand_prior.dim();
            let hand = denormalize_pose(&y[..j], &ct.center, cfg.joint_cube);
            let obj = denormalize_object(&y[j..], &model.object_model.bbox_half, &ct.center, cfg.joint_cube)?;
            Ok((hand, obj))
        })());
    }
    Ok(out)
}
