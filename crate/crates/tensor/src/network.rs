//! Sequential networks with retained forward traces and reverse-mode
//! gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::layer::{Activation, Architecture, LayerSpec};
use crate::ops::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward-pass mode. Training mode owns the dropout randomness.
pub enum Mode<'a> {
    Infer,
    Train(&'a mut ChaCha8Rng),
}

enum Aux<T> {
    None,
    Cols(Vec<T>),
    Argmax(Vec<u32>),
    Mask(Vec<T>),
}

/// Intermediates retained by [`Network::forward`] for the backward pass.
pub struct Trace<T> {
    batch: usize,
    acts: Vec<Vec<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output_data(&self) -> &[T] {
        self.acts.last().unwrap()
    }
}

/// Parameter and input gradients from [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Vec<Tensor<T>>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn flat(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.params.iter().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    shapes: Vec<Vec<usize>>,
    params: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Network<T> {
    /// Build a network with uniform Glorot initialization
    /// (`±sqrt(6 / (fan_in + fan_out))`) and zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let shapes = arch.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.layers.len());
        for (spec, input) in arch.layers.iter().zip(&shapes) {
            let mut layer = Vec::new();
            for (i, ps) in spec.param_shapes(input).iter().enumerate() {
                if i == 0 {
                    let (fan_in, fan_out) = match ps.len() {
                        4 => (ps[1] * ps[2] * ps[3], ps[0] * ps[2] * ps[3]),
                        _ => (ps[1], ps[0]),
                    };
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n: usize = ps.iter().product();
                    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
                    layer.push(Tensor::from_vec(ps, data)?);
                } else {
                    layer.push(Tensor::zeros(ps));
                }
            }
            params.push(layer);
        }
        Ok(Self { arch, shapes, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Vec<Tensor<T>>>) -> Result<Self> {
        let shapes = arch.shapes()?;
        if params.len() != arch.layers.len() {
            return Err(TensorError::InvalidSpec(format!(
                "{} parameter groups for {} layers",
                params.len(),
                arch.layers.len()
            )));
        }
        for (i, (spec, input)) in arch.layers.iter().zip(&shapes).enumerate() {
            let want = spec.param_shapes(input);
            let got: Vec<Vec<usize>> = params[i].iter().map(|t| t.shape().to_vec()).collect();
            if want != got {
                return Err(TensorError::ShapeMismatch {
                    op: "from_params",
                    left: want.concat(),
                    right: got.concat(),
                });
            }
        }
        Ok(Self { arch, shapes, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn params(&self) -> &[Vec<Tensor<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor<T>>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|l| l.iter().map(|t| t.cast()).collect())
                .collect(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let s = x.shape();
        if s.len() != self.shapes[0].len() + 1 || s[1..] != self.shapes[0][..] {
            let mut want = vec![0];
            want.extend_from_slice(&self.shapes[0]);
            return Err(TensorError::ShapeMismatch {
                op: "network input",
                left: s.to_vec(),
                right: want,
            });
        }
        Ok(s[0])
    }

    fn geom(&self, i: usize) -> ConvGeom {
        let (_, k, stride, pad) = self.arch.layers[i].conv_params().unwrap();
        let (a, b) = (&self.shapes[i], &self.shapes[i + 1]);
        ConvGeom {
            c: a[0],
            h: a[1],
            w: a[2],
            k,
            stride,
            pad,
            oh: b[1],
            ow: b[2],
        }
    }

    fn layer_forward(&self, i: usize, x: &[T], n: usize, mode: &mut Mode, keep: bool) -> (Vec<T>, Aux<T>) {
        let spec = &self.arch.layers[i];
        let input = &self.shapes[i];
        match spec {
            LayerSpec::Conv { .. } | LayerSpec::StridedConv { .. } => {
                let g = self.geom(i);
                let p = &self.params[i];
                let (out, cols) = ops::conv_forward(x, n, &g, p[0].data(), p[0].shape()[0], Some(p[1].data()), keep);
                (out, if keep { Aux::Cols(cols) } else { Aux::None })
            }
            LayerSpec::Dense { units, .. } => {
                let din: usize = input.iter().product();
                let p = &self.params[i];
                let mut out = Vec::with_capacity(n * units);
                for _ in 0..n {
                    out.extend_from_slice(p[1].data());
                }
                T::gemm(n, din, *units, T::one(), x, false, p[0].data(), true, T::one(), &mut out);
                (out, Aux::None)
            }
            LayerSpec::MaxPool { window } => {
                let (out, arg) = ops::maxpool_forward(x, n * input[0], input[1], input[2], *window);
                (out, if keep { Aux::Argmax(arg) } else { Aux::None })
            }
            LayerSpec::Unpool2x => (ops::unpool_forward(x, n * input[0], input[1], input[2]), Aux::None),
            LayerSpec::Dropout { p } => match mode {
                Mode::Infer => (x.to_vec(), Aux::None),
                Mode::Train(rng) => {
                    let scale = T::from_f64(1.0 / (1.0 - p));
                    let mask: Vec<T> = (0..x.len())
                        .map(|_| if rng.random::<f64>() < *p { T::zero() } else { scale })
                        .collect();
                    let out = x.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                    (out, Aux::Mask(mask))
                }
            },
            LayerSpec::Activation { function } => {
                let out = match function {
                    Activation::Relu => x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
                    Activation::Tanh => x.iter().map(|&v| v.tanh()).collect(),
                    Activation::Linear => x.to_vec(),
                };
                (out, Aux::None)
            }
        }
    }

    /// Forward pass retaining every intermediate needed by [`backward`](Self::backward).
    pub fn forward(&self, x: &Tensor<T>, mode: &mut Mode) -> Result<Trace<T>> {
        let n = self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.arch.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.arch.layers.len());
        acts.push(x.data().to_vec());
        for i in 0..self.arch.layers.len() {
            let (out, a) = self.layer_forward(i, acts.last().unwrap(), n, mode, true);
            if !out.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFiniteActivation { layer: i });
            }
            acts.push(out);
            aux.push(a);
        }
        Ok(Trace { batch: n, acts, aux })
    }

    /// Inference-mode forward pass without retained intermediates.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_input(x)?;
        let mut cur = x.data().to_vec();
        for i in 0..self.arch.layers.len() {
            let (out, _) = self.layer_forward(i, &cur, n, &mut Mode::Infer, false);
            cur = out;
        }
        if !cur.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFiniteActivation {
                layer: self.arch.layers.len().saturating_sub(1),
            });
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.output_shape());
        Tensor::from_vec(&shape, cur)
    }

    /// Convenience for a single un-batched sample.
    pub fn predict_one(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let xb = x.clone().reshape(&shape)?;
        let y = self.predict(&xb)?;
        y.reshape(self.output_shape())
    }

    /// Trace output as a batched tensor.
    pub fn trace_output(&self, trace: &Trace<T>) -> Tensor<T> {
        let mut shape = vec![trace.batch];
        shape.extend_from_slice(self.output_shape());
        Tensor::from_vec(&shape, trace.acts.last().unwrap().clone()).unwrap()
    }

    /// Reverse-mode pass: gradients of `sum(grad_out * output)` with respect
    /// to every parameter and to the input.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &Tensor<T>) -> Result<Gradients<T>> {
        let n = trace.batch;
        if grad_out.len() != trace.acts.last().unwrap().len() {
            let mut want = vec![n];
            want.extend_from_slice(self.output_shape());
            return Err(TensorError::ShapeMismatch {
                op: "backward grad_out",
                left: grad_out.shape().to_vec(),
                right: want,
            });
        }
        let mut grads: Vec<Vec<Tensor<T>>> = self
            .params
            .iter()
            .map(|l| l.iter().map(|t| Tensor::zeros(t.shape())).collect())
            .collect();
        let mut g = grad_out.data().to_vec();
        for i in (0..self.arch.layers.len()).rev() {
            let spec = &self.arch.layers[i];
            let input = &self.shapes[i];
            let x = &trace.acts[i];
            let y = &trace.acts[i + 1];
            g = match (spec, &trace.aux[i]) {
                (LayerSpec::Conv { .. } | LayerSpec::StridedConv { .. }, Aux::Cols(cols)) => {
                    let geom = self.geom(i);
                    let p = &self.params[i];
                    let (dk, db) = grads[i].split_at_mut(1);
                    ops::conv_backward(
                        &g,
                        n,
                        &geom,
                        p[0].data(),
                        p[0].shape()[0],
                        cols,
                        dk[0].data_mut(),
                        Some(db[0].data_mut()),
                    )
                }
                (LayerSpec::Dense { units, .. }, _) => {
                    let din: usize = input.iter().product();
                    let p = &self.params[i];
                    let (dw, db) = grads[i].split_at_mut(1);
                    T::gemm(*units, n, din, T::one(), &g, true, x, false, T::one(), dw[0].data_mut());
                    let dbd = db[0].data_mut();
                    for s in 0..n {
                        for (b, &v) in dbd.iter_mut().zip(&g[s * units..(s + 1) * units]) {
                            *b += v;
                        }
                    }
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(n, *units, din, T::one(), &g, false, p[0].data(), false, T::zero(), &mut dx);
                    dx
                }
                (LayerSpec::MaxPool { .. }, Aux::Argmax(arg)) => {
                    let mut dx = vec![T::zero(); x.len()];
                    for (o, &a) in arg.iter().enumerate() {
                        dx[a as usize] += g[o];
                    }
                    dx
                }
                (LayerSpec::Unpool2x, _) => ops::unpool_backward(&g, n * input[0], input[1], input[2]),
                (LayerSpec::Dropout { .. }, Aux::Mask(mask)) => g.iter().zip(mask).map(|(&a, &m)| a * m).collect(),
                (LayerSpec::Dropout { .. }, _) => g,
                (LayerSpec::Activation { function }, _) => match function {
                    // relu'(0) := 0
                    Activation::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                    Activation::Tanh => g.iter().zip(y).map(|(&d, &t)| d * (T::one() - t * t)).collect(),
                    Activation::Linear => g,
                },
                _ => {
                    return Err(TensorError::InvalidSpec(format!(
                        "trace for layer {i} was not recorded in training form"
                    )))
                }
            };
            let finite = g.iter().all(|v| v.is_finite()) && grads[i].iter().all(|t| t.all_finite());
            if !finite {
                return Err(TensorError::NonFiniteGradient { layer: i });
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shapes[0]);
        Ok(Gradients {
            params: grads,
            input: Tensor::from_vec(&shape, g)?,
        })
    }
}
