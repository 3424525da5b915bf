//! Architectures of the four learned functions and their objectives.

use fbpose_tensor::{Architecture, ChaCha8Rng, LayerSpec, Network, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pose::{corners_flat, corners_from_flat, corners_from_pose, pose_from_corners, PosePrior};
use crate::train::{fit, stack_inputs, EpochLog, Objective, Regression, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkRole {
    Localizer,
    HandPredictor,
    ObjectPredictor,
    Synthesizer,
    Updater,
}

impl NetworkRole {
    pub fn name(&self) -> &'static str {
        match self {
            NetworkRole::Localizer => "localizer",
            NetworkRole::HandPredictor => "hand-predictor",
            NetworkRole::ObjectPredictor => "object-predictor",
            NetworkRole::Synthesizer => "synthesizer",
            NetworkRole::Updater => "updater",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    /// Three conv stages with pooling.
    Simple,
    /// Five conv stages; the deeper variant.
    Deep,
}

/// Size knobs shared by all architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetScale {
    pub crop: usize,
    pub conv: usize,
    pub fc: usize,
    pub dropout: f64,
    pub synth_latent: usize,
    /// `(filters, kernel)` of each upsampling block of the synthesizer.
    pub synth_blocks: Vec<(usize, usize)>,
}

impl Default for NetScale {
    fn default() -> Self {
        NetScale {
            crop: 64,
            conv: 8,
            fc: 512,
            dropout: 0.3,
            synth_latent: 16,
            synth_blocks: vec![(16, 5), (8, 3), (4, 3)],
        }
    }
}

impl NetScale {
    pub fn validate(&self) -> Result<()> {
        if self.crop != 8 << self.synth_blocks.len() {
            return invalid(format!(
                "crop {} must equal 8 * 2^{} for the synthesizer",
                self.crop,
                self.synth_blocks.len()
            ));
        }
        if self.conv == 0 || self.fc == 0 || self.synth_latent == 0 {
            return invalid("channel and unit counts must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.crop * self.crop
    }

    pub fn synth_stages(&self) -> usize {
        self.synth_blocks.len() + 1
    }
}

fn fc_head(layers: &mut Vec<LayerSpec>, fc: usize, dropout: f64, out: usize) {
    for _ in 0..2 {
        layers.push(LayerSpec::dense(fc));
        layers.push(LayerSpec::relu());
        if dropout > 0.0 {
            layers.push(LayerSpec::Dropout { p: dropout });
        }
    }
    layers.push(LayerSpec::dense(out));
}

/// Conv/pool localizer regressing a 3-vector offset.
pub fn localizer_arch(s: &NetScale, channels: usize, out: usize) -> Architecture {
    let c = s.conv;
    let mut layers = vec![
        LayerSpec::conv(c, 5),
        LayerSpec::relu(),
        LayerSpec::MaxPool { window: 4 },
        LayerSpec::conv(c, 5),
        LayerSpec::relu(),
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::conv(c, 3),
        LayerSpec::relu(),
    ];
    fc_head(&mut layers, s.fc, 0.0, out);
    Architecture {
        input_shape: vec![channels, s.crop, s.crop],
        layers,
    }
}

/// Pose predictor with dropout in the fully connected part.
pub fn predictor_arch(s: &NetScale, kind: PredictorKind, out: usize) -> Architecture {
    let c = s.conv;
    let mut layers = vec![LayerSpec::conv(c, 5), LayerSpec::relu()];
    if kind == PredictorKind::Deep {
        layers.extend([LayerSpec::conv(c, 3), LayerSpec::relu()]);
    }
    layers.extend([LayerSpec::MaxPool { window: 4 }, LayerSpec::conv(2 * c, 5), LayerSpec::relu()]);
    if kind == PredictorKind::Deep {
        layers.extend([LayerSpec::conv(2 * c, 3), LayerSpec::relu()]);
    }
    layers.extend([LayerSpec::MaxPool { window: 2 }, LayerSpec::conv(2 * c, 3), LayerSpec::relu()]);
    fc_head(&mut layers, s.fc, s.dropout, out);
    Architecture {
        input_shape: vec![1, s.crop, s.crop],
        layers,
    }
}

/// Updater over the stacked (observed, synthesized) pair. Strided
/// convolutions only.
pub fn updater_arch(s: &NetScale, out: usize) -> Architecture {
    let c = 2 * s.conv;
    let mut layers = vec![
        LayerSpec::strided(c, 5, 2),
        LayerSpec::relu(),
        LayerSpec::strided(c, 5, 2),
        LayerSpec::relu(),
        LayerSpec::strided(c, 3, 2),
        LayerSpec::relu(),
    ];
    fc_head(&mut layers, s.fc, 0.0, out);
    Architecture {
        input_shape: vec![2, s.crop, s.crop],
        layers,
    }
}

/// Synthesizer truncated after `stage` upsampling blocks; output
/// `[1, 8*2^stage, 8*2^stage]` in `[-1, 1]`.
pub fn synthesizer_arch(s: &NetScale, pose_dim: usize, stage: usize) -> Architecture {
    let mut layers = Vec::new();
    for _ in 0..3 {
        layers.push(LayerSpec::dense(s.fc));
        layers.push(LayerSpec::relu());
    }
    layers.push(LayerSpec::Dense {
        units: s.synth_latent * 64,
        reshape: Some([s.synth_latent, 8, 8]),
    });
    layers.push(LayerSpec::relu());
    for &(f, k) in &s.synth_blocks[..stage] {
        layers.push(LayerSpec::Unpool2x);
        layers.push(LayerSpec::conv(f, k));
        layers.push(LayerSpec::relu());
    }
    layers.push(LayerSpec::conv(1, 3));
    layers.push(LayerSpec::tanh());
    Architecture {
        input_shape: vec![pose_dim],
        layers,
    }
}

/// Mean-pools a square image by an integer factor.
pub fn avg_pool(img: &[f32], size: usize, factor: usize) -> Vec<f32> {
    let out = size / factor;
    let mut r = vec![0f32; out * out];
    let norm = 1.0 / (factor * factor) as f32;
    for y in 0..size {
        for x in 0..size {
            r[(y / factor) * out + x / factor] += img[y * size + x] * norm;
        }
    }
    r
}

/// Layer-wise synthesizer training: stage `s` reproduces the targets pooled
/// to `8*2^s`, and each stage starts from the previous body with a fresh
/// output head. Returns the final network and the concatenated log.
pub fn train_synthesizer(
    s: &NetScale,
    poses: &[Vec<f32>],
    images: &[Vec<f32>],
    stage_epochs: &[usize],
    cfg: &TrainConfig,
    mut metric: impl FnMut(&Network<f32>) -> Result<f64>,
) -> Result<(Network<f32>, Vec<EpochLog>)> {
    s.validate()?;
    if stage_epochs.len() != s.synth_stages() {
        return invalid(format!("need {} stage epoch counts", s.synth_stages()));
    }
    if poses.is_empty() || poses.len() != images.len() {
        return invalid("poses and images must pair up");
    }
    let dim = poses[0].len();
    let mut prev: Option<Network<f32>> = None;
    let mut log = Vec::new();
    for (stage, &epochs) in stage_epochs.iter().enumerate() {
        let mut net = Network::new(synthesizer_arch(s, dim, stage), cfg.seed.wrapping_add(stage as u64))?;
        if let Some(p) = &prev {
            let body = p.params().len() - 2;
            for (dst, src) in net.params_mut()[..body].iter_mut().zip(&p.params()[..body]) {
                dst.clone_from(src);
            }
        }
        let res = 8 << stage;
        let targets: Vec<Vec<f32>> = images.iter().map(|im| avg_pool(im, s.crop, s.crop / res)).collect();
        let mut obj = Regression {
            inputs: poses,
            input_shape: vec![dim],
            targets: &targets,
            weight: 1.0 / (res * res) as f32,
        };
        let stage_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(100 + stage as u64),
            ..cfg.with_epochs(epochs)
        };
        let name = format!("synthesizer-{res}");
        let rows = if stage + 1 == stage_epochs.len() {
            fit(&mut net, &mut obj, &stage_cfg, &name, &mut metric)?
        } else {
            fit(&mut net, &mut obj, &stage_cfg, &name, |_| Ok(f64::NAN))?
        };
        let offset = log.len();
        log.extend(rows.into_iter().map(|r| EpochLog {
            epoch: r.epoch + offset,
            ..r
        }));
        prev = Some(net);
    }
    Ok((prev.unwrap(), log))
}

/// Regression through a fixed linear prior: the network emits coefficients
/// `a` and the loss is `w * ||mean + B a - q||^2`.
pub struct PriorRegression<'a> {
    pub inputs: &'a [Vec<f32>],
    pub input_shape: Vec<usize>,
    pub targets: &'a [Vec<f64>],
    pub prior: &'a PosePrior,
    pub weight: f64,
}

impl Objective for PriorRegression<'_> {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn batch(&mut self, items: &[usize], _rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let rows: Vec<&[f32]> = items.iter().map(|i| self.inputs[*i].as_slice()).collect();
        stack_inputs(&rows, &self.input_shape)
    }

    fn loss(&mut self, items: &[usize], out: &Tensor<f32>) -> Result<(f64, Tensor<f32>)> {
        let k = self.prior.k();
        let mut grad = Vec::with_capacity(out.len());
        let mut loss = 0.0;
        for (b, i) in items.iter().enumerate() {
            let a: Vec<f64> = out.data()[b * k..(b + 1) * k].iter().map(|v| *v as f64).collect();
            let r: Vec<f64> = self.prior.decode(&a).iter().zip(&self.targets[*i]).map(|(p, q)| p - q).collect();
            loss += self.weight * r.iter().map(|v| v * v).sum::<f64>();
            let g = self.prior.basis.tr_mul(&nalgebra::DVector::from_vec(r));
            grad.extend(g.iter().map(|v| (2.0 * self.weight * v) as f32));
        }
        Ok((loss, Tensor::from_vec(out.shape(), grad)?))
    }
}

/// How an updater output moves a pose, and which poses are admissible.
/// Poses are flat vectors in normalized cube coordinates.
pub trait PoseSpace: Sync {
    fn out_dim(&self) -> usize;

    /// `p + delta(out)` before any projection.
    fn step(&self, p: &[f64], out: &[f32]) -> Vec<f64>;

    /// Gradient with respect to `out` of a function of [`step`](Self::step)
    /// whose gradient at the stepped pose is `g`.
    fn pullback(&self, g: &[f64]) -> Vec<f32>;

    /// Nearest admissible pose.
    fn project(&self, p: &[f64]) -> Vec<f64>;

    /// Gaussian perturbation of scale `sigma`, projected.
    fn perturb(&self, p: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Hand joints; deltas either through a prior or directly in joint space.
#[derive(Debug, Clone)]
pub struct HandSpace {
    pub dim: usize,
    pub prior: Option<PosePrior>,
}

impl PoseSpace for HandSpace {
    fn out_dim(&self) -> usize {
        self.prior.as_ref().map_or(self.dim, |p| p.k())
    }

    fn step(&self, p: &[f64], out: &[f32]) -> Vec<f64> {
        let o: Vec<f64> = out.iter().map(|v| *v as f64).collect();
        let d = match &self.prior {
            Some(pr) => pr.decode_delta(&o),
            None => o,
        };
        p.iter().zip(&d).map(|(a, b)| a + b).collect()
    }

    fn pullback(&self, g: &[f64]) -> Vec<f32> {
        match &self.prior {
            Some(pr) => pr
                .basis
                .tr_mul(&nalgebra::DVector::from_column_slice(g))
                .iter()
                .map(|v| *v as f32)
                .collect(),
            None => g.iter().map(|v| *v as f32).collect(),
        }
    }

    fn project(&self, p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
    }

    /// In prior mode the noise is restricted to the prior subspace.
    fn perturb(&self, p: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let e: Vec<f64> = gaussian(rng, self.dim).into_iter().map(|v| v * sigma).collect();
        let e = match &self.prior {
            Some(pr) => pr.decode_delta(pr.basis.tr_mul(&nalgebra::DVector::from_vec(e)).as_slice()),
            None => e,
        };
        self.project(&p.iter().zip(&e).map(|(a, b)| a + b).collect::<Vec<_>>())
    }
}

/// Rigid box corners; updates are free corner deltas followed by a
/// Procrustes snap back to a rigid configuration.
#[derive(Debug, Clone)]
pub struct ObjectSpace {
    /// Box half extents in normalized cube units.
    pub half: [f64; 3],
}

impl ObjectSpace {
    fn radius(&self) -> f64 {
        self.half.iter().map(|h| h * h).sum::<f64>().sqrt()
    }
}

impl PoseSpace for ObjectSpace {
    fn out_dim(&self) -> usize {
        24
    }

    fn step(&self, p: &[f64], out: &[f32]) -> Vec<f64> {
        p.iter().zip(out).map(|(a, b)| a + *b as f64).collect()
    }

    fn pullback(&self, g: &[f64]) -> Vec<f32> {
        g.iter().map(|v| *v as f32).collect()
    }

    fn project(&self, p: &[f64]) -> Vec<f64> {
        let rigid = corners_from_flat(p).and_then(|c| pose_from_corners(&c, &self.half));
        match rigid {
            Ok(mut pose) => {
                pose.translation = pose.translation.map(|v| v.clamp(-1.0, 1.0));
                corners_flat(&corners_from_pose(&pose, &self.half))
            }
            Err(_) => p.to_vec(),
        }
    }

    /// Translation noise `sigma` per axis and rotation-vector noise
    /// `sigma / r` per axis, `r` the box half diagonal.
    fn perturb(&self, p: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let Ok(pose) = corners_from_flat(p).and_then(|c| pose_from_corners(&c, &self.half)) else {
            return p.to_vec();
        };
        let t = gaussian(rng, 3);
        let w = gaussian(rng, 3);
        let s = sigma / self.radius();
        let rot = nalgebra::Rotation3::new(nalgebra::Vector3::new(w[0] * s, w[1] * s, w[2] * s));
        let mut q = pose;
        q.rotation = rot.matrix() * pose.rotation;
        q.translation += nalgebra::Vector3::new(t[0], t[1], t[2]) * sigma;
        self.project(&corners_flat(&corners_from_pose(&q, &self.half)))
    }
}

/// Seed pose set and growth schedule of the updater.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSetConfig {
    pub copies: usize,
    /// Noise scale in normalized cube units (0.1 is 5% of the cube extent).
    pub sigma: f64,
    pub grow_every: usize,
    pub grow_self: usize,
    pub grow_error: usize,
    pub cap: usize,
    /// Poses drawn per image in one epoch.
    pub per_epoch: usize,
    pub lambda: f64,
}

impl Default for PoseSetConfig {
    fn default() -> Self {
        PoseSetConfig {
            copies: 10,
            sigma: 0.1,
            grow_every: 2,
            grow_self: 3,
            grow_error: 2,
            cap: 50,
            per_epoch: 2,
            lambda: 0.6,
        }
    }
}

impl PoseSetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return invalid(format!("lambda {} outside (0, 1)", self.lambda));
        }
        if self.sigma < 0.0 || self.grow_every == 0 || self.per_epoch == 0 {
            return invalid("pose-set schedule must be positive");
        }
        Ok(())
    }
}

/// Per-image candidate poses. Entry 0 is the ground truth; the first
/// `seeded[i]` entries are never evicted.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdaterPoseSet {
    pub sets: Vec<Vec<Vec<f64>>>,
    pub seeded: Vec<usize>,
}

impl UpdaterPoseSet {
    /// `{gt} ∪ {pred} ∪` noisy copies of both.
    pub fn build<S: PoseSpace>(gt: &[Vec<f64>], pred: &[Vec<f64>], space: &S, cfg: &PoseSetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if gt.len() != pred.len() {
            return invalid("ground truth and predictions differ in count");
        }
        let mut sets = Vec::with_capacity(gt.len());
        for (g, p) in gt.iter().zip(pred) {
            let mut s = vec![g.clone(), space.project(p)];
            for base in [g.clone(), space.project(p)] {
                for _ in 0..cfg.copies {
                    s.push(space.perturb(&base, cfg.sigma, rng));
                }
            }
            sets.push(s);
        }
        let seeded = sets.iter().map(|s| s.len()).collect();
        Ok(UpdaterPoseSet { sets, seeded })
    }

    pub fn total(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum()
    }

    /// Appends `pose` to image `i`, evicting the oldest generated pose beyond `cap`.
    pub fn push(&mut self, i: usize, pose: Vec<f64>, cap: usize) {
        let set = &mut self.sets[i];
        set.push(pose);
        while set.len() > cap.max(self.seeded[i]) {
            if set.len() == self.seeded[i] {
                break;
            }
            set.remove(self.seeded[i]);
        }
    }
}

/// Builds the stacked updater input for (image, pose) items.
pub trait UpdaterEnv {
    fn input_shape(&self) -> Vec<usize>;
    fn build(&self, items: &[(usize, &[f64])], rng: &mut ChaCha8Rng) -> Result<Tensor<f32>>;
}

/// Applies the updater once to each item and projects the result.
pub fn apply_updater<E: UpdaterEnv, S: PoseSpace>(
    net: &Network<f32>,
    env: &E,
    space: &S,
    items: &[(usize, Vec<f64>)],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let refs: Vec<(usize, &[f64])> = chunk.iter().map(|(i, p)| (*i, p.as_slice())).collect();
        let y = net.predict(&env.build(&refs, rng)?)?;
        let k = space.out_dim();
        for (b, (_, p)) in chunk.iter().enumerate() {
            out.push(space.project(&space.step(p, &y.data()[b * k..(b + 1) * k])));
        }
    }
    Ok(out)
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Hinge objective `max(0, ||p''-p|| - lambda ||p'-p||)` over a growing pose set.
pub struct UpdaterObjective<'a, E, S> {
    pub env: &'a E,
    pub space: &'a S,
    pub gt: &'a [Vec<f64>],
    pub set: UpdaterPoseSet,
    pub cfg: PoseSetConfig,
    pub batch: usize,
    /// Set sizes after each growth event.
    pub growth: Vec<usize>,
    current: Vec<(usize, usize)>,
}

impl<'a, E: UpdaterEnv, S: PoseSpace> UpdaterObjective<'a, E, S> {
    pub fn new(env: &'a E, space: &'a S, gt: &'a [Vec<f64>], set: UpdaterPoseSet, cfg: PoseSetConfig, batch: usize) -> Result<Self> {
        cfg.validate()?;
        if set.sets.len() != gt.len() {
            return invalid("pose set and ground truth differ in count");
        }
        Ok(UpdaterObjective {
            env,
            space,
            gt,
            set,
            cfg,
            batch,
            growth: Vec::new(),
            current: Vec::new(),
        })
    }

    fn grow(&mut self, net: &Network<f32>, rng: &mut ChaCha8Rng) -> Result<()> {
        let n = self.gt.len();
        let mut items = Vec::with_capacity(n * self.cfg.grow_self);
        for i in 0..n {
            for _ in 0..self.cfg.grow_self {
                let j = rng.random_range(0..self.set.sets[i].len());
                items.push((i, self.set.sets[i][j].clone()));
            }
        }
        let updated = apply_updater(net, self.env, self.space, &items, self.batch, rng)?;
        let errors: Vec<(usize, Vec<f64>)> = items
            .iter()
            .zip(&updated)
            .map(|((i, _), p)| (*i, p.iter().zip(&self.gt[*i]).map(|(a, b)| a - b).collect()))
            .collect();
        for ((i, _), p) in items.iter().zip(updated) {
            self.set.push(*i, p, self.cfg.cap);
        }
        if n > 1 && !errors.is_empty() {
            for i in 0..n {
                for _ in 0..self.cfg.grow_error {
                    let (src, e) = loop {
                        let pick = &errors[rng.random_range(0..errors.len())];
                        if pick.0 != i {
                            break pick;
                        }
                    };
                    debug_assert_ne!(*src, i);
                    let p: Vec<f64> = self.gt[i].iter().zip(e).map(|(g, d)| g + d).collect();
                    self.set.push(i, self.space.project(&p), self.cfg.cap);
                }
            }
        }
        self.growth.push(self.set.total());
        Ok(())
    }
}

impl<E: UpdaterEnv, S: PoseSpace> Objective for UpdaterObjective<'_, E, S> {
    fn len(&self) -> usize {
        self.gt.len()
    }

    fn epoch_items(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        self.current.clear();
        for (i, s) in self.set.sets.iter().enumerate() {
            for _ in 0..self.cfg.per_epoch {
                self.current.push((i, rng.random_range(0..s.len())));
            }
        }
        (0..self.current.len()).collect()
    }

    fn batch(&mut self, items: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let refs: Vec<(usize, &[f64])> = items
            .iter()
            .map(|k| {
                let (i, j) = self.current[*k];
                (i, self.set.sets[i][j].as_slice())
            })
            .collect();
        self.env.build(&refs, rng)
    }

    fn loss(&mut self, items: &[usize], out: &Tensor<f32>) -> Result<(f64, Tensor<f32>)> {
        let k = self.space.out_dim();
        let mut grad = Vec::with_capacity(out.len());
        let mut loss = 0.0;
        for (b, it) in items.iter().enumerate() {
            let (i, j) = self.current[*it];
            let p0 = &self.set.sets[i][j];
            let gt = &self.gt[i];
            let p1 = self.space.step(p0, &out.data()[b * k..(b + 1) * k]);
            let d1 = distance(&p1, gt);
            let h = d1 - self.cfg.lambda * distance(p0, gt);
            if h > 0.0 && d1 > 0.0 {
                loss += h;
                let g: Vec<f64> = p1.iter().zip(gt).map(|(a, b)| (a - b) / d1).collect();
                grad.extend(self.space.pullback(&g));
            } else {
                grad.extend(std::iter::repeat_n(0f32, k));
            }
        }
        Ok((loss, Tensor::from_vec(out.shape(), grad)?))
    }

    fn end_epoch(&mut self, epoch: usize, net: &Network<f32>, rng: &mut ChaCha8Rng) -> Result<()> {
        if epoch.is_multiple_of(self.cfg.grow_every) {
            self.grow(net, rng)?;
        }
        Ok(())
    }
}

/// Fits an updater network on `env` and returns the log and final pose set.
pub fn train_updater<E: UpdaterEnv, S: PoseSpace>(
    net: &mut Network<f32>,
    env: &E,
    space: &S,
    gt: &[Vec<f64>],
    set: UpdaterPoseSet,
    ps: &PoseSetConfig,
    cfg: &TrainConfig,
    stage: &str,
    metric: impl FnMut(&Network<f32>) -> Result<f64>,
) -> Result<(Vec<EpochLog>, UpdaterPoseSet, Vec<usize>)> {
    let mut obj = UpdaterObjective::new(env, space, gt, set, ps.clone(), cfg.batch_size)?;
    let log = fit(net, &mut obj, cfg, stage, metric)?;
    Ok((log, obj.set, obj.growth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::fit_prior;
    use rand::SeedableRng;

    #[test]
    fn architectures_have_role_arities() {
        let s = NetScale::default();
        assert_eq!(localizer_arch(&s, 1, 3).output_shape().unwrap(), vec![3]);
        assert_eq!(predictor_arch(&s, PredictorKind::Simple, 30).output_shape().unwrap(), vec![30]);
        assert_eq!(predictor_arch(&s, PredictorKind::Deep, 24).output_shape().unwrap(), vec![24]);
        assert_eq!(updater_arch(&s, 30).output_shape().unwrap(), vec![30]);
        for st in 0..s.synth_stages() {
            let r = 8 << st;
            assert_eq!(synthesizer_arch(&s, 42, st).output_shape().unwrap(), vec![1, r, r]);
        }
    }

    #[test]
    fn scale_rejects_mismatched_crop() {
        let s = NetScale {
            crop: 48,
            ..NetScale::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let img = vec![0.25f32; 64];
        assert!(avg_pool(&img, 8, 4).iter().all(|v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn pose_set_without_noise_holds_gt_and_prediction() {
        let space = HandSpace { dim: 3, prior: None };
        let cfg = PoseSetConfig {
            copies: 0,
            ..PoseSetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = vec![vec![0.1, 0.2, 0.3]];
        let pred = vec![vec![0.0, 0.5, 2.0]];
        let set = UpdaterPoseSet::build(&gt, &pred, &space, &cfg, &mut rng).unwrap();
        assert_eq!(set.sets[0], vec![gt[0].clone(), vec![0.0, 0.5, 1.0]]);
    }

    #[test]
    fn push_evicts_oldest_generated() {
        let mut set = UpdaterPoseSet {
            sets: vec![vec![vec![0.0], vec![1.0]]],
            seeded: vec![2],
        };
        for v in 2..6 {
            set.push(0, vec![v as f64], 4);
        }
        assert_eq!(set.sets[0], vec![vec![0.0], vec![1.0], vec![4.0], vec![5.0]]);
    }

    #[test]
    fn prior_space_steps_stay_in_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses: Vec<Vec<f64>> = (0..40).map(|_| gaussian(&mut rng, 6)).collect();
        let prior = fit_prior(&poses, 2).unwrap();
        let space = HandSpace {
            dim: 6,
            prior: Some(prior.clone()),
        };
        let p0 = prior.decode(&[0.1, -0.1]);
        let p1 = space.step(&p0, &[0.3, 0.2]);
        let back = prior.decode(&prior.encode(&p1));
        assert!(distance(&p1, &back) < 1e-6);
        let g = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let pb = space.pullback(&g);
        for (c, v) in pb.iter().enumerate() {
            assert!((*v as f64 - prior.basis[(0, c)]).abs() < 1e-6);
        }
    }

    #[test]
    fn object_projection_is_rigid_and_idempotent() {
        let space = ObjectSpace { half: [0.3, 0.2, 0.4] };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = corners_flat(&corners_from_pose(&crate::pose::ObjectPose::identity(), &space.half));
        let p = space.perturb(&base, 0.1, &mut rng);
        let q = space.project(&p);
        assert!(distance(&p, &q) < 1e-9);
        assert!(distance(&p, &base) > 1e-3);
    }
}
