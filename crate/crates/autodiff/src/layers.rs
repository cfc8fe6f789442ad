//! Layer inventory and a shape-checked sequential container.
//!
//! Shapes in [`LayerSpec::output_shape`] are per sample (no batch axis).

use rand::Rng;

use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, ParamSet};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, padding: usize },
    Conv1d { in_channels: usize, out_channels: usize, kernel: usize, padding: usize },
    BatchNorm { channels: usize, eps: f64, momentum: f64 },
    /// Window-2 style non-overlapping max pool; 2-D on `[C, H, W]`, 1-D on `[C, L]`.
    MaxPool { window: usize },
    Linear { in_features: usize, out_features: usize },
    Relu,
    Flatten,
    L2Norm,
}

impl LayerSpec {
    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm { channels, eps: BN_EPS, momentum: BN_MOMENTUM }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |detail: String| shape_err("layer spec", detail);
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, padding } => match input {
                &[c, h, w] if c == in_channels && h + 2 * padding >= kernel && w + 2 * padding >= kernel => {
                    Ok(vec![out_channels, h + 2 * padding - kernel + 1, w + 2 * padding - kernel + 1])
                }
                _ => bad(format!("{self:?} cannot take input {input:?}")),
            },
            LayerSpec::Conv1d { in_channels, out_channels, kernel, padding } => match input {
                &[c, l] if c == in_channels && l + 2 * padding >= kernel => {
                    Ok(vec![out_channels, l + 2 * padding - kernel + 1])
                }
                _ => bad(format!("{self:?} cannot take input {input:?}")),
            },
            LayerSpec::BatchNorm { channels, .. } => {
                if input.len() >= 2 && input[0] == channels {
                    Ok(input.to_vec())
                } else {
                    bad(format!("{self:?} cannot take input {input:?}"))
                }
            }
            LayerSpec::MaxPool { window } => match input {
                &[c, h, w] if window > 0 && h >= window && w >= window => Ok(vec![c, h / window, w / window]),
                &[c, l] if window > 0 && l >= window => Ok(vec![c, l / window]),
                _ => bad(format!("{self:?} cannot take input {input:?}")),
            },
            LayerSpec::Linear { in_features, out_features } => match input {
                &[f] if f == in_features => Ok(vec![out_features]),
                _ => bad(format!("{self:?} cannot take input {input:?}")),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::L2Norm => match input {
                &[_] => Ok(input.to_vec()),
                _ => bad(format!("L2Norm needs a flat input, got {input:?}")),
            },
        }
    }
}

/// Propagates a per-sample shape through a stack, failing at the first layer
/// that does not compose.
pub fn check_stack(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    specs.iter().try_fold(input.to_vec(), |shape, spec| spec.output_shape(&shape))
}

#[derive(Debug, Clone)]
enum Layer {
    Conv2d { w: ParamId, b: ParamId, padding: usize },
    Conv1d { w: ParamId, b: ParamId, padding: usize, kernel: usize },
    BatchNorm { gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId, eps: f64, momentum: f64 },
    MaxPool { window: usize },
    Linear { w: ParamId, b: ParamId },
    Relu,
    Flatten,
    L2Norm,
}

/// A stack of layers whose parameters live in an external [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Sequential {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

impl Sequential {
    /// Checks shapes, then registers freshly initialised parameters under
    /// `prefix.{layer index}.{weight|bias|gamma|beta|running_mean|running_var}`.
    ///
    /// Weights and biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn build<T: Real, R: Rng + ?Sized>(
        specs: &[LayerSpec],
        input_shape: &[usize],
        params: &mut ParamSet<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let output_shape = check_stack(specs, input_shape)?;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let name = |s: &str| format!("{prefix}.{i}.{s}");
            let layer = match *spec {
                LayerSpec::Conv2d { in_channels, out_channels, kernel, padding } => {
                    let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
                    let w = params.try_add(
                        &name("weight"),
                        uniform(rng, vec![out_channels, in_channels, kernel, kernel], bound),
                    )?;
                    let b = params.try_add(&name("bias"), uniform(rng, vec![out_channels], bound))?;
                    Layer::Conv2d { w, b, padding }
                }
                LayerSpec::Conv1d { in_channels, out_channels, kernel, padding } => {
                    let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
                    let w =
                        params.try_add(&name("weight"), uniform(rng, vec![out_channels, in_channels, kernel], bound))?;
                    let b = params.try_add(&name("bias"), uniform(rng, vec![out_channels], bound))?;
                    Layer::Conv1d { w, b, padding, kernel }
                }
                LayerSpec::BatchNorm { channels, eps, momentum } => {
                    let gamma = params.try_add(&name("gamma"), Tensor::full(vec![channels], T::one()))?;
                    let beta = params.try_add(&name("beta"), Tensor::zeros(vec![channels]))?;
                    let mean = params.add_buffer(&name("running_mean"), Tensor::zeros(vec![channels]))?;
                    let var = params.add_buffer(&name("running_var"), Tensor::full(vec![channels], T::one()))?;
                    Layer::BatchNorm { gamma, beta, mean, var, eps, momentum }
                }
                LayerSpec::MaxPool { window } => Layer::MaxPool { window },
                LayerSpec::Linear { in_features, out_features } => {
                    let bound = 1.0 / (in_features as f64).sqrt();
                    let w = params.try_add(&name("weight"), uniform(rng, vec![out_features, in_features], bound))?;
                    let b = params.try_add(&name("bias"), uniform(rng, vec![out_features], bound))?;
                    Layer::Linear { w, b }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::L2Norm => Layer::L2Norm,
            };
            layers.push(layer);
        }
        Ok(Self { specs: specs.to_vec(), layers, input_shape: input_shape.to_vec(), output_shape })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    /// Every parameter and buffer id this stack owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            match *l {
                Layer::Conv2d { w, b, .. } | Layer::Conv1d { w, b, .. } | Layer::Linear { w, b } => {
                    ids.extend([w, b]);
                }
                Layer::BatchNorm { gamma, beta, mean, var, .. } => ids.extend([gamma, beta, mean, var]),
                _ => {}
            }
        }
        ids
    }

    /// Runs the stack on a batch `[N, ...input_shape]`. In [`Mode::Train`]
    /// batch-norm running statistics in `params` are updated in place.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &mut ParamSet<T>, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return shape_err("sequential", format!("input {shape:?}, expected [N, {:?}]", self.input_shape));
        }
        let mut h = x;
        for layer in &self.layers {
            h = self.apply(layer, tape, params, h, mode)?;
        }
        Ok(h)
    }

    fn apply<T: Real>(
        &self,
        layer: &Layer,
        tape: &mut Tape<T>,
        params: &mut ParamSet<T>,
        h: Var,
        mode: Mode,
    ) -> Result<Var> {
        match *layer {
            Layer::Conv2d { w, b, padding } => {
                let wv = tape.param(params, w);
                let bv = tape.param(params, b);
                tape.conv2d(h, wv, Some(bv), padding, padding)
            }
            Layer::Conv1d { w, b, padding, kernel } => {
                let s = tape.shape(h).to_vec();
                let x4 = tape.reshape(h, vec![s[0], s[1], 1, s[2]])?;
                let wv = tape.param(params, w);
                let ws = tape.shape(wv).to_vec();
                let w4 = tape.reshape(wv, vec![ws[0], ws[1], 1, kernel])?;
                let bv = tape.param(params, b);
                let y = tape.conv2d(x4, w4, Some(bv), 0, padding)?;
                let ys = tape.shape(y).to_vec();
                tape.reshape(y, vec![ys[0], ys[1], ys[3]])
            }
            Layer::BatchNorm { gamma, beta, mean, var, eps, momentum } => {
                let g = tape.param(params, gamma);
                let bt = tape.param(params, beta);
                let eps = T::from_f64(eps);
                match mode {
                    Mode::Train => {
                        let (y, stats) = tape.batch_norm_train(h, g, bt, eps)?;
                        let mom = T::from_f64(momentum);
                        let unbias = T::from_f64(stats.count as f64 / (stats.count.max(2) - 1) as f64);
                        for (rm, &m) in params.get_mut(mean).data_mut().iter_mut().zip(&stats.mean) {
                            *rm = (T::one() - mom) * *rm + mom * m;
                        }
                        for (rv, &v) in params.get_mut(var).data_mut().iter_mut().zip(&stats.var) {
                            *rv = (T::one() - mom) * *rv + mom * v * unbias;
                        }
                        Ok(y)
                    }
                    Mode::Eval => {
                        let m = params.get(mean).data().to_vec();
                        let v = params.get(var).data().to_vec();
                        tape.batch_norm_eval(h, g, bt, &m, &v, eps)
                    }
                }
            }
            Layer::MaxPool { window } => {
                let s = tape.shape(h).to_vec();
                match s.len() {
                    4 => tape.maxpool2d(h, window, window),
                    3 => {
                        let x4 = tape.reshape(h, vec![s[0], s[1], 1, s[2]])?;
                        let y = tape.maxpool2d(x4, 1, window)?;
                        let ys = tape.shape(y).to_vec();
                        tape.reshape(y, vec![ys[0], ys[1], ys[3]])
                    }
                    _ => Err(NnError::Shape { op: "maxpool", detail: format!("unsupported input {s:?}") }),
                }
            }
            Layer::Linear { w, b } => {
                let wv = tape.param(params, w);
                let bv = tape.param(params, b);
                let y = tape.matmul(h, wv, false, true)?;
                tape.add_bias(y, bv)
            }
            Layer::Relu => Ok(tape.relu(h)),
            Layer::Flatten => {
                let s = tape.shape(h).to_vec();
                let rest = s[1..].iter().product();
                tape.reshape(h, vec![s[0], rest])
            }
            Layer::L2Norm => tape.l2_normalize(h),
        }
    }
}
