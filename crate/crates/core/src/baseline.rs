//! Direct image-fit baseline: minimize `||D - synth(p)||^2` over the pose
//! inside the crop cube, by projected L-BFGS or particle swarm.

use std::collections::VecDeque;

use fbpose_tensor::{ChaCha8Rng, Mode, Network, Tensor};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{crop_with, CameraIntrinsics, CropTransform};
use crate::hand::HandGeometry;
use crate::pipeline::denormalize_pose;
use crate::render::render_hand;

/// Differentiable image model of a pose.
pub trait Synthesizer {
    fn dim(&self) -> usize;

    fn render(&self, q: &[f64]) -> Result<Vec<f64>>;

    /// `||obs - render(q)||^2` and its gradient in `q`.
    fn objective_grad(&self, q: &[f64], obs: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn objective(&self, q: &[f64], obs: &[f64]) -> Result<f64> {
        Ok(sq_dist(&self.render(q)?, obs))
    }

    fn objectives(&self, qs: &[Vec<f64>], obs: &[f64]) -> Result<Vec<f64>> {
        qs.iter().map(|q| self.objective(q, obs)).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// The learned synthesizer with gradients by backpropagation to its input.
pub struct LearnedSynth<'a> {
    pub net: &'a Network<f32>,
}

impl Synthesizer for LearnedSynth<'_> {
    fn dim(&self) -> usize {
        self.net.input_shape()[0]
    }

    fn render(&self, q: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::from_vec(&[1, q.len()], q.iter().map(|v| *v as f32).collect())?;
        Ok(self.net.predict(&x)?.data().iter().map(|v| *v as f64).collect())
    }

    fn objective_grad(&self, q: &[f64], obs: &[f64]) -> Result<(f64, Vec<f64>)> {
        let x = Tensor::from_vec(&[1, q.len()], q.iter().map(|v| *v as f32).collect())?;
        let trace = self.net.forward(&x, &mut Mode::Infer)?;
        let out = trace.output_data();
        let f = out.iter().zip(obs).map(|(s, o)| (*s as f64 - o).powi(2)).sum();
        let g: Vec<f32> = out.iter().zip(obs).map(|(s, o)| 2.0 * (*s - *o as f32)).collect();
        let mut shape = vec![1];
        shape.extend_from_slice(self.net.output_shape());
        let grads = self.net.backward(&trace, &Tensor::from_vec(&shape, g)?)?;
        Ok((f, grads.input.data().iter().map(|v| *v as f64).collect()))
    }

    fn objectives(&self, qs: &[Vec<f64>], obs: &[f64]) -> Result<Vec<f64>> {
        let data: Vec<f32> = qs.iter().flatten().map(|v| *v as f32).collect();
        let y = self.net.predict(&Tensor::from_vec(&[qs.len(), self.dim()], data)?)?;
        let per = y.len() / qs.len().max(1);
        Ok(y.data()
            .chunks_exact(per)
            .map(|s| s.iter().zip(obs).map(|(a, b)| (*a as f64 - b).powi(2)).sum())
            .collect())
    }
}

/// The analytic capsule renderer seen through the same crop, with central
/// finite-difference gradients.
pub struct RendererSynth<'a> {
    pub geometry: &'a HandGeometry,
    pub cam: CameraIntrinsics,
    pub ct: CropTransform,
    pub step: f64,
}

impl Synthesizer for RendererSynth<'_> {
    fn dim(&self) -> usize {
        3 * self.geometry.num_joints()
    }

    fn render(&self, q: &[f64]) -> Result<Vec<f64>> {
        let pose = denormalize_pose(q, &self.ct.center, self.ct.cube.half[0]);
        let img = render_hand(&pose, self.geometry, &self.cam)?;
        Ok(crop_with(&img, &self.ct).0)
    }

    fn objective_grad(&self, q: &[f64], obs: &[f64]) -> Result<(f64, Vec<f64>)> {
        let f = self.objective(q, obs)?;
        let mut g = vec![0.0; q.len()];
        let mut x = q.to_vec();
        for i in 0..q.len() {
            x[i] = q[i] + self.step;
            let fp = self.objective(&x, obs)?;
            x[i] = q[i] - self.step;
            let fm = self.objective(&x, obs)?;
            x[i] = q[i];
            g[i] = (fp - fm) / (2.0 * self.step);
        }
        Ok((f, g))
    }
}

/// Box-constrained image-fit problem.
pub struct FitProblem<'a, S> {
    pub observed: Vec<f64>,
    pub synth: &'a S,
    pub init: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl<'a, S: Synthesizer> FitProblem<'a, S> {
    /// Bounds are the unit crop cube `[-1, 1]` per coordinate.
    pub fn in_cube(observed: Vec<f64>, synth: &'a S, init: Vec<f64>) -> Result<Self> {
        let d = init.len();
        let p = FitProblem {
            observed,
            synth,
            init,
            lower: vec![-1.0; d],
            upper: vec![1.0; d],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.init.len();
        if d != self.synth.dim() || self.lower.len() != d || self.upper.len() != d {
            return invalid("dimension mismatch in fit problem");
        }
        let inside = (0..d).all(|i| self.lower[i] <= self.init[i] && self.init[i] <= self.upper[i]);
        if !inside {
            return invalid("initial pose outside the bounds");
        }
        Ok(())
    }

    fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub pose: Vec<f64>,
    /// Objective at the initial pose and after every accepted step.
    pub objective: Vec<f64>,
    /// Initial pose and every accepted iterate.
    pub iterates: Vec<Vec<f64>>,
    pub evaluations: usize,
    pub line_search_failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_evals: usize,
    pub first_step: f64,
    pub tolerance: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_evals: 200,
            first_step: 0.02,
            tolerance: 1e-9,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected limited-memory BFGS with a backtracking Armijo search along
/// the projected path. Coordinates held at a bound by the gradient are
/// frozen for the step.
pub fn direct_fit<S: Synthesizer>(p: &FitProblem<S>, memory: usize) -> Result<FitResult> {
    direct_fit_with(
        p,
        &LbfgsConfig {
            memory,
            ..LbfgsConfig::default()
        },
    )
}

pub fn direct_fit_with<S: Synthesizer>(p: &FitProblem<S>, cfg: &LbfgsConfig) -> Result<FitResult> {
    p.validate()?;
    let n = p.init.len();
    let mut x = p.init.clone();
    let (mut f, mut g) = p.synth.objective_grad(&x, &p.observed)?;
    let mut evals = 1;
    let mut res = FitResult {
        pose: x.clone(),
        objective: vec![f],
        iterates: vec![x.clone()],
        evaluations: 1,
        line_search_failed: false,
    };
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    while evals < cfg.max_evals {
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= p.lower[i] && g[i] > 0.0) || (x[i] >= p.upper[i] && g[i] < 0.0)))
            .collect();
        let gf: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        if dot(&gf, &gf).sqrt() <= cfg.tolerance {
            break;
        }
        let mut q = gf.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut d: Vec<f64> = (0..n).map(|i| if free[i] { -q[i] } else { 0.0 }).collect();
        if dot(&d, &gf) >= 0.0 {
            hist.clear();
            d = gf.iter().map(|v| -v).collect();
        }
        let mut step = if hist.is_empty() {
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (cfg.first_step / dmax).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        while evals < cfg.max_evals {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            p.project(&mut xn);
            let (fn_, gn) = p.synth.objective_grad(&xn, &p.observed)?;
            evals += 1;
            let decrease: f64 = g.iter().zip(xn.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if fn_.is_finite() && fn_ <= f + 1e-4 * decrease && fn_ <= f {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
        let Some((xn, fn_, gn)) = accepted else {
            res.line_search_failed = evals < cfg.max_evals;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            hist.push_back((s, y, 1.0 / sy));
            if hist.len() > cfg.memory {
                hist.pop_front();
            }
        }
        x = xn;
        f = fn_;
        g = gn;
        res.objective.push(f);
        res.iterates.push(x.clone());
    }
    res.pose = x;
    res.evaluations = evals;
    Ok(res)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwarmConfig {
    pub particles: usize,
    pub generations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Initial scatter around the start pose, as a fraction of the half box.
    pub spread: f64,
    pub seed: u64,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        SwarmConfig {
            particles: 30,
            generations: 50,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            spread: 0.1,
            seed: 0,
        }
    }
}

/// Global-best particle swarm. Particle 0 starts at the initial pose and
/// all velocities start at zero.
pub fn pso_fit<S: Synthesizer>(p: &FitProblem<S>, cfg: &SwarmConfig) -> Result<FitResult> {
    p.validate()?;
    if cfg.particles == 0 {
        return invalid("swarm needs at least one particle");
    }
    let n = p.init.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xs: Vec<Vec<f64>> = (0..cfg.particles)
        .map(|k| {
            let mut x = p.init.clone();
            if k > 0 {
                for i in 0..n {
                    let half = (p.upper[i] - p.lower[i]) / 2.0;
                    x[i] += rng.random_range(-1.0..=1.0) * cfg.spread * half;
                }
                p.project(&mut x);
            }
            x
        })
        .collect();
    let mut vs = vec![vec![0.0; n]; cfg.particles];
    let mut fs = p.synth.objectives(&xs, &p.observed)?;
    let mut evals = fs.len();
    let mut pbest = xs.clone();
    let mut pf = fs.clone();
    let b = argmin(&pf);
    let (mut gbest, mut gf) = (pbest[b].clone(), pf[b]);
    let f0 = p.synth.objective(&p.init, &p.observed)?;
    let mut res = FitResult {
        pose: p.init.clone(),
        objective: vec![f0],
        iterates: vec![p.init.clone()],
        evaluations: evals,
        line_search_failed: false,
    };
    if gf < f0 {
        res.objective.push(gf);
        res.iterates.push(gbest.clone());
    }
    for _ in 0..cfg.generations {
        for k in 0..cfg.particles {
            let (x, v, pb) = (&mut xs[k], &mut vs[k], &pbest[k]);
            for i in 0..n {
                let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                v[i] = cfg.inertia * v[i] + cfg.cognitive * r1 * (pb[i] - x[i]) + cfg.social * r2 * (gbest[i] - x[i]);
                x[i] += v[i];
            }
            p.project(x);
        }
        fs = p.synth.objectives(&xs, &p.observed)?;
        evals += fs.len();
        for k in 0..cfg.particles {
            if fs[k] < pf[k] {
                pf[k] = fs[k];
                pbest[k] = xs[k].clone();
            }
        }
        let b = argmin(&pf);
        if pf[b] < gf {
            gf = pf[b];
            gbest = pbest[b].clone();
            res.objective.push(gf);
            res.iterates.push(gbest.clone());
        }
    }
    if gf <= f0 {
        res.pose = gbest;
    }
    res.evaluations = evals;
    Ok(res)
}

fn argmin(v: &[f64]) -> usize {
    v.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Quadratic bowl around `c`.
    struct Bowl {
        c: Vec<f64>,
    }

    impl Synthesizer for Bowl {
        fn dim(&self) -> usize {
            self.c.len()
        }

        fn render(&self, q: &[f64]) -> Result<Vec<f64>> {
            Ok(q.iter().zip(&self.c).map(|(a, b)| a - b).collect())
        }

        fn objective_grad(&self, q: &[f64], obs: &[f64]) -> Result<(f64, Vec<f64>)> {
            let r = self.render(q)?;
            Ok((sq_dist(&r, obs), r.iter().zip(obs).map(|(a, b)| 2.0 * (a - b)).collect()))
        }
    }

    #[test]
    fn lbfgs_reaches_interior_minimum() {
        let bowl = Bowl { c: vec![0.3, -0.2, 0.1] };
        let p = FitProblem::in_cube(vec![0.0; 3], &bowl, vec![-0.5, 0.5, 0.9]).unwrap();
        let r = direct_fit(&p, 10).unwrap();
        for (a, b) in r.pose.iter().zip(&bowl.c) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(r.objective.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lbfgs_stops_at_the_bound() {
        let bowl = Bowl { c: vec![1.5, 0.0] };
        let p = FitProblem::in_cube(vec![0.0; 2], &bowl, vec![0.0, 0.0]).unwrap();
        let r = direct_fit(&p, 10).unwrap();
        assert!((r.pose[0] - 1.0).abs() < 1e-9);
        assert!(r.iterates.iter().flatten().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn single_still_particle_returns_start() {
        let bowl = Bowl { c: vec![0.3, 0.3] };
        let p = FitProblem::in_cube(vec![0.0; 2], &bowl, vec![-0.2, 0.1]).unwrap();
        let cfg = SwarmConfig {
            particles: 1,
            ..SwarmConfig::default()
        };
        assert_eq!(pso_fit(&p, &cfg).unwrap().pose, vec![-0.2, 0.1]);
    }

    #[test]
    fn swarm_is_elitist() {
        let bowl = Bowl { c: vec![0.3, -0.3, 0.2] };
        let p = FitProblem::in_cube(vec![0.0; 3], &bowl, vec![0.0; 3]).unwrap();
        let r = pso_fit(&p, &SwarmConfig::default()).unwrap();
        assert!(r.objective.windows(2).all(|w| w[1] <= w[0]));
        assert!(*r.objective.last().unwrap() <= r.objective[0]);
        assert!(*r.objective.last().unwrap() < 1e-3);
    }

    #[test]
    fn init_outside_bounds_rejected() {
        let bowl = Bowl { c: vec![0.0] };
        assert!(FitProblem::in_cube(vec![0.0], &bowl, vec![1.5]).is_err());
    }
}
