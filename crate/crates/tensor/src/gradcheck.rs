//! Central finite-difference gradient checks used by the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Architecture, Mode, Network, Tensor};

pub const STEP: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Scalar objective `sum(R * f(x))` with the dropout mask pinned by `seed`.
fn objective(net: &Network<f64>, x: &Tensor<f64>, r: &[f64], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = net.forward(x, &mut Mode::Train(&mut rng)).unwrap();
    trace.output_data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Worst relative error between backprop and central differences over all
/// input and parameter coordinates of `instances` random networks.
pub fn check(arch: Architecture, input: impl Fn(&mut ChaCha8Rng, usize) -> f64, instances: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst as u64);
        let mut net = Network::<f64>::new(arch.clone(), inst as u64).unwrap();
        // non-zero biases so every parameter is exercised
        for layer in net.params_mut() {
            if layer.len() == 2 {
                for b in layer[1].data_mut() {
                    *b = rng.random_range(-0.5..0.5);
                }
            }
        }
        let batch = 2;
        let mut shape = vec![batch];
        shape.extend_from_slice(&arch.input_shape);
        let n: usize = shape.iter().product();
        let x = Tensor::from_vec(&shape, (0..n).map(|i| input(&mut rng, i)).collect()).unwrap();
        let out_len = batch * net.output_shape().iter().product::<usize>();
        let r: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let seed = 77 + inst as u64;

        let mut drng = ChaCha8Rng::seed_from_u64(seed);
        let trace = net.forward(&x, &mut Mode::Train(&mut drng)).unwrap();
        let mut oshape = vec![batch];
        oshape.extend_from_slice(net.output_shape());
        let grads = net.backward(&trace, &Tensor::from_vec(&oshape, r.clone()).unwrap()).unwrap();

        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += STEP;
            let mut xm = x.clone();
            xm.data_mut()[i] -= STEP;
            let fd = (objective(&net, &xp, &r, seed) - objective(&net, &xm, &r, seed)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads.input.data()[i], fd));
        }
        for li in 0..net.params().len() {
            for pi in 0..net.params()[li].len() {
                for k in 0..net.params()[li][pi].len() {
                    let mut np = net.clone();
                    np.params_mut()[li][pi].data_mut()[k] += STEP;
                    let mut nm = net.clone();
                    nm.params_mut()[li][pi].data_mut()[k] -= STEP;
                    let fd = (objective(&np, &x, &r, seed) - objective(&nm, &x, &r, seed)) / (2.0 * STEP);
                    worst = worst.max(rel_err(grads.params[li][pi].data()[k], fd));
                }
            }
        }
    }
    worst
}

pub fn uniform(rng: &mut ChaCha8Rng, _: usize) -> f64 {
    rng.random_range(-1.0..1.0)
}

/// Values bounded away from the relu kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, _: usize) -> f64 {
    let v: f64 = rng.random_range(0.01..1.0);
    if rng.random::<bool>() {
        v
    } else {
        -v
    }
}

/// Distinct values on a 0.01 lattice so no pooling window has a near-tie.
pub fn distinct(rng: &mut ChaCha8Rng, i: usize) -> f64 {
    let jitter: f64 = rng.random_range(0.0..0.001);
    ((i * 37) % 101) as f64 * 0.01 + jitter
}

