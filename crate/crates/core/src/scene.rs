//! Scene sampling, sensor noise and the on-disk dataset factory.

use std::fs;
use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::depth::{composite_min, DepthImage};
use crate::error::{invalid, CoreError, Result};
use crate::geometry::CameraIntrinsics;
use crate::hand::{HandGeometry, HandSampler};
use crate::object::ObjectModel;
use crate::pose::{HandPose, ObjectPose};
use crate::render::{hand_object_clearance, render_hand, render_object};

/// I.i.d. Gaussian perturbation of valid pixels.
pub fn add_sensor_noise(d: &DepthImage, sigma: f64, seed: u64) -> Result<DepthImage> {
    if !(sigma >= 0.0) {
        return invalid("noise sigma must be non-negative");
    }
    if sigma == 0.0 {
        return Ok(d.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut out = d.clone();
    for px in out.data.iter_mut() {
        if *px < crate::depth::FAR_DEPTH {
            let n: f64 = normal.sample(&mut rng);
            *px = ((*px as f64 + n) as f32).max(1.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementAnchor {
    Fingertips,
    HandCentroid,
}

/// Object placement: uniform rotation, translation in a spherical shell
/// around the anchor, rejected while closer to the hand than `clearance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub anchor: PlacementAnchor,
    pub shell: [f64; 2],
    pub clearance: f64,
    pub max_tries: usize,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            anchor: PlacementAnchor::Fingertips,
            shell: [0.0, 60.0],
            clearance: 0.0,
            max_tries: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub camera: CameraIntrinsics,
    pub hand: HandGeometry,
    pub sampler: HandSampler,
    pub object: Option<ObjectModel>,
    pub placement: PlacementConfig,
    pub noise_sigma: f64,
}

impl SceneConfig {
    pub fn hand_only() -> Self {
        SceneConfig {
            camera: CameraIntrinsics::desk(),
            hand: HandGeometry::default(),
            sampler: HandSampler::default(),
            object: None,
            placement: PlacementConfig::default(),
            noise_sigma: 2.0,
        }
    }

    pub fn hand_object() -> Self {
        SceneConfig {
            object: Some(ObjectModel::desk()),
            ..SceneConfig::hand_only()
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).unwrap().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub depth: DepthImage,
    pub hand: HandPose,
    pub object: Option<ObjectPose>,
    pub camera: CameraIntrinsics,
    /// Per joint: projects outside the image or lies behind the camera.
    pub out_of_frame: Vec<bool>,
}

pub fn out_of_frame_flags(pose: &HandPose, cam: &CameraIntrinsics) -> Vec<bool> {
    pose.joints
        .iter()
        .map(|j| match cam.project(j) {
            Ok((u, v, _)) => !(u >= -0.5 && v >= -0.5 && u < cam.width as f64 - 0.5 && v < cam.height as f64 - 0.5),
            Err(_) => true,
        })
        .collect()
}

pub fn uniform_rotation<R: Rng>(rng: &mut R) -> Rotation3<f64> {
    let q = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(q)).to_rotation_matrix()
}

/// Draw an object pose for `hand` honouring the placement rule; `None`
/// when the rejection budget runs out.
pub fn place_object<R: Rng>(rng: &mut R, hand: &HandPose, geometry: &HandGeometry, model: &ObjectModel, cfg: &PlacementConfig) -> Result<Option<ObjectPose>> {
    let anchor = match cfg.anchor {
        PlacementAnchor::Fingertips => geometry.fingertips.iter().map(|i| hand.joints[*i]).sum::<Vector3<f64>>() / geometry.fingertips.len() as f64,
        PlacementAnchor::HandCentroid => hand.joints.iter().sum::<Vector3<f64>>() / hand.num_joints() as f64,
    };
    for _ in 0..cfg.max_tries {
        let rot = uniform_rotation(rng);
        let dir: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let dir = if dir.norm() > 0.0 { dir.normalize() } else { Vector3::z() };
        let r = if cfg.shell[1] > cfg.shell[0] {
            rng.random_range(cfg.shell[0]..cfg.shell[1])
        } else {
            cfg.shell[0]
        };
        let pose = ObjectPose::new(*rot.matrix(), anchor + dir * r)?;
        if hand_object_clearance(hand, geometry, &pose, model)? >= cfg.clearance {
            return Ok(Some(pose));
        }
    }
    Ok(None)
}

/// One composited, noised scene. Fails when object placement exhausts
/// its rejection budget.
pub fn sample_scene<R: Rng>(rng: &mut R, cfg: &SceneConfig) -> Result<TrainingSample> {
    let cam = cfg.camera;
    let hand = cfg.sampler.sample(rng, &cfg.hand, &cam);
    let hand_img = render_hand(&hand, &cfg.hand, &cam)?;
    let (object, clean) = match &cfg.object {
        None => (None, hand_img),
        Some(model) => {
            let Some(pose) = place_object(rng, &hand, &cfg.hand, model, &cfg.placement)? else {
                return Err(CoreError::RejectionBudget(cfg.placement.max_tries));
            };
            let obj_img = render_object(&pose, model, &cam)?;
            (Some(pose), composite_min(&hand_img, &obj_img)?)
        }
    };
    let depth = add_sensor_noise(&clean, cfg.noise_sigma, rng.random())?;
    let out_of_frame = out_of_frame_flags(&hand, &cam);
    Ok(TrainingSample {
        depth,
        hand,
        object,
        camera: cam,
        out_of_frame,
    })
}

/// Per-sample annotation as written to `anno_%06d.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub joints: Vec<[f64; 3]>,
    pub object_pose: Option<[f64; 12]>,
    pub camera: CameraIntrinsics,
    pub out_of_frame: Vec<bool>,
}

impl Annotation {
    pub fn of(s: &TrainingSample) -> Self {
        Annotation {
            joints: s.hand.joints.iter().map(|j| [j.x, j.y, j.z]).collect(),
            object_pose: s.object.map(|p| p.to_rows()),
            camera: s.camera,
            out_of_frame: s.out_of_frame.clone(),
        }
    }

    pub fn hand(&self) -> HandPose {
        HandPose::new(self.joints.iter().map(|j| Vector3::new(j[0], j[1], j[2])).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SceneConfig,
    pub config_hash: String,
    pub seed: u64,
    pub count: usize,
    /// Sample streams whose placement ran out of tries.
    pub skipped: Vec<u64>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<TrainingSample>,
    pub manifest: Manifest,
}

/// `n` scenes; scene `i` draws from ChaCha stream `i` of `seed`, skipped
/// streams are recorded and replaced by the next one.
pub fn make_dataset(n: usize, cfg: &SceneConfig, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return invalid("dataset size must be at least 1");
    }
    let mut samples = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    let mut stream = 0u64;
    while samples.len() < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        match sample_scene(&mut rng, cfg) {
            Ok(s) => samples.push(s),
            Err(CoreError::RejectionBudget(_)) => skipped.push(stream),
            Err(e) => return Err(e),
        }
        stream += 1;
        if skipped.len() > 10 * n + 100 {
            return Err(CoreError::RejectionBudget(cfg.placement.max_tries));
        }
    }
    let manifest = Manifest {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed,
        count: n,
        skipped,
        annotations: samples.iter().map(Annotation::of).collect(),
    };
    Ok(Dataset { samples, manifest })
}

impl Dataset {
    /// Writes `manifest.json`, `depth_%06d.bin` and `anno_%06d.json`; a
    /// failed write removes the directory.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let existed = dir.exists();
        let res = self.write_inner(dir);
        if res.is_err() && !existed {
            let _ = fs::remove_dir_all(dir);
        }
        res
    }

    fn write_inner(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, s) in self.samples.iter().enumerate() {
            s.depth.save(dir.join(format!("depth_{i:06}.bin")))?;
            fs::write(dir.join(format!("anno_{i:06}.json")), serde_json::to_vec_pretty(&Annotation::of(s))?)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|_| CoreError::MissingArtifact {
            stage: "dataset".into(),
            path: path.display().to_string(),
        })?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        let mut samples = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let depth = DepthImage::load(dir.join(format!("depth_{i:06}.bin")))?;
            let anno: Annotation = serde_json::from_slice(&fs::read(dir.join(format!("anno_{i:06}.json")))?)?;
            let object = anno.object_pose.map(|r| ObjectPose::from_rows(&r)).transpose()?;
            samples.push(TrainingSample {
                depth,
                hand: anno.hand(),
                object,
                camera: anno.camera,
                out_of_frame: anno.out_of_frame,
            });
        }
        Ok(Dataset { samples, manifest })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity_and_seeded_noise_repeats() {
        let d = DepthImage::from_data(4, 1, vec![400.0, 410.0, crate::depth::FAR_DEPTH, 420.0]).unwrap();
        assert_eq!(add_sensor_noise(&d, 0.0, 1).unwrap(), d);
        let a = add_sensor_noise(&d, 2.0, 9).unwrap();
        assert_eq!(a, add_sensor_noise(&d, 2.0, 9).unwrap());
        assert_eq!(a.data[2], crate::depth::FAR_DEPTH);
        assert_ne!(a.data[0], 400.0);
    }

    #[test]
    fn hand_only_has_no_object() {
        let ds = make_dataset(3, &SceneConfig::hand_only(), 5).unwrap();
        assert!(ds.samples.iter().all(|s| s.object.is_none()));
        assert!(ds.samples.iter().all(|s| s.depth.valid_count() > 100));
    }

    #[test]
    fn far_object_accepted_first_try() {
        let cfg = SceneConfig::hand_object();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hand = cfg.sampler.sample(&mut rng, &cfg.hand, &cfg.camera);
        let place = PlacementConfig {
            shell: [400.0, 400.0],
            max_tries: 1,
            ..PlacementConfig::default()
        };
        let model = cfg.object.unwrap();
        assert!(place_object(&mut rng, &hand, &cfg.hand, &model, &place).unwrap().is_some());
    }

    #[test]
    fn object_at_hand_centroid_always_rejected() {
        let cfg = SceneConfig::hand_object();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = cfg.object.clone().unwrap();
        let place = PlacementConfig {
            anchor: PlacementAnchor::HandCentroid,
            shell: [0.0, 0.0],
            clearance: 0.0,
            max_tries: 50,
        };
        for _ in 0..20 {
            let hand = cfg.sampler.sample(&mut rng, &cfg.hand, &cfg.camera);
            assert!(place_object(&mut rng, &hand, &cfg.hand, &model, &place).unwrap().is_none());
        }
    }
}
