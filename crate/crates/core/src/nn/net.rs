use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, ConvSpec, PoolSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d(ConvSpec),
    Relu,
    MaxPool(PoolSpec),
    FullyConnected { inputs: usize, outputs: usize },
    SoftmaxXent,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d(c) => write!(
                f,
                "conv2d in={} out={} kernel={}x{} stride={} padding={}",
                c.in_channels, c.out_channels, c.kernel_h, c.kernel_w, c.stride, c.padding
            ),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::MaxPool(p) => write!(f, "maxpool window={} stride={}", p.window, p.stride),
            LayerSpec::FullyConnected { inputs, outputs } => {
                write!(f, "fc in={inputs} out={outputs}")
            }
            LayerSpec::SoftmaxXent => write!(f, "softmax_xent"),
        }
    }
}

impl LayerSpec {
    /// Parses one architecture line, e.g. `conv2d in=1 out=8 kernel=3 padding=1`.
    pub fn parse(line: &str) -> Result<Self> {
        let mut words = line.split_whitespace();
        let kind = words
            .next()
            .ok_or_else(|| Error::Config("empty layer line".into()))?;
        let mut kv = std::collections::BTreeMap::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {w:?}")))?;
            kv.insert(k, v);
        }
        let num = |key: &str, default: Option<usize>| -> Result<usize> {
            match kv.get(key) {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::Config(format!("{kind}: {key}={v} is not an integer"))),
                None => default.ok_or_else(|| Error::Config(format!("{kind}: missing {key}"))),
            }
        };
        let spec = match kind {
            "conv2d" | "conv" => {
                let (kh, kw) = match kv.get("kernel") {
                    Some(v) => match v.split_once('x') {
                        Some((a, b)) => (
                            a.parse()
                                .map_err(|_| Error::Config(format!("bad kernel {v}")))?,
                            b.parse()
                                .map_err(|_| Error::Config(format!("bad kernel {v}")))?,
                        ),
                        None => {
                            let k = num("kernel", None)?;
                            (k, k)
                        }
                    },
                    None => return Err(Error::Config("conv2d: missing kernel".into())),
                };
                LayerSpec::Conv2d(ConvSpec {
                    in_channels: num("in", None)?,
                    out_channels: num("out", None)?,
                    kernel_h: kh,
                    kernel_w: kw,
                    stride: num("stride", Some(1))?,
                    padding: num("padding", Some(0))?,
                })
            }
            "relu" => LayerSpec::Relu,
            "maxpool" | "pool" => {
                let window = num("window", None)?;
                LayerSpec::MaxPool(PoolSpec {
                    window,
                    stride: num("stride", Some(window))?,
                })
            }
            "fc" | "fully_connected" => LayerSpec::FullyConnected {
                inputs: num("in", None)?,
                outputs: num("out", None)?,
            },
            "softmax_xent" | "softmax" => LayerSpec::SoftmaxXent,
            other => return Err(Error::Config(format!("unknown layer kind {other:?}"))),
        };
        Ok(spec)
    }
}

/// Hook that owns conv-layer input activations between forward and backward.
pub trait ActivationStash<T: Scalar> {
    type Handle;
    fn stash(&mut self, layer: usize, activation: Tensor<T>) -> Result<Self::Handle>;
    /// `loss` is the gradient arriving at the layer's output.
    fn restore(
        &mut self,
        layer: usize,
        handle: Self::Handle,
        loss: &Tensor<T>,
    ) -> Result<Tensor<T>>;
}

/// Keeps activations as-is.
#[derive(Debug, Default)]
pub struct KeepActivations;

impl<T: Scalar> ActivationStash<T> for KeepActivations {
    type Handle = Tensor<T>;
    fn stash(&mut self, _layer: usize, activation: Tensor<T>) -> Result<Tensor<T>> {
        Ok(activation)
    }
    fn restore(
        &mut self,
        _layer: usize,
        handle: Tensor<T>,
        _loss: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        Ok(handle)
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    param_ranges: Vec<Range<usize>>,
    param_shapes: Vec<Vec<usize>>,
}

pub struct StepOutput<T: Scalar> {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<Tensor<T>>,
}

enum Cache<H, T: Scalar> {
    Conv {
        handle: H,
        input_shape: Vec<usize>,
    },
    Relu {
        output: Tensor<T>,
    },
    Pool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Fc {
        input: Tensor<T>,
    },
    Softmax,
}

impl Network {
    /// Validates the layer stack against a per-sample input shape `[C, H, W]`.
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(Error::Config(format!(
                "input shape must be [C, H, W], got {input_shape:?}"
            )));
        }
        if layers.last() != Some(&LayerSpec::SoftmaxXent) {
            return Err(Error::Config("network must end with softmax_xent".into()));
        }
        let mut shape = input_shape.clone();
        let mut param_ranges = Vec::with_capacity(layers.len());
        let mut param_shapes = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let start = param_shapes.len();
            match *layer {
                LayerSpec::Conv2d(c) => {
                    if shape.len() != 3 || shape[0] != c.in_channels {
                        return Err(Error::Config(format!(
                            "layer {i} ({layer}): input shape {shape:?}"
                        )));
                    }
                    let (oh, ow) = c
                        .output_hw(shape[1], shape[2])
                        .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                    param_shapes.push(c.weight_shape());
                    shape = vec![c.out_channels, oh, ow];
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool(p) => {
                    if shape.len() != 3 {
                        return Err(Error::Config(format!(
                            "layer {i} ({layer}): input shape {shape:?}"
                        )));
                    }
                    let (oh, ow) = p
                        .output_hw(shape[1], shape[2])
                        .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                    shape = vec![shape[0], oh, ow];
                }
                LayerSpec::FullyConnected { inputs, outputs } => {
                    let d: usize = shape.iter().product();
                    if d != inputs {
                        return Err(Error::Config(format!(
                            "layer {i} ({layer}): input has {d} features"
                        )));
                    }
                    param_shapes.push(vec![outputs, inputs]);
                    param_shapes.push(vec![outputs]);
                    shape = vec![outputs];
                }
                LayerSpec::SoftmaxXent => {
                    if i + 1 != layers.len() || shape.len() != 1 {
                        return Err(Error::Config(
                            "softmax_xent must be last and follow fc".into(),
                        ));
                    }
                }
            }
            param_ranges.push(start..param_shapes.len());
        }
        Ok(Network {
            layers,
            input_shape,
            param_ranges,
            param_shapes,
        })
    }

    /// Parses a plain-text architecture (one layer per line, `#` comments).
    pub fn parse(text: &str, input_shape: Vec<usize>) -> Result<Self> {
        let layers = text
            .lines()
            .map(|l| l.split('#').next().unwrap().trim())
            .filter(|l| !l.is_empty())
            .map(LayerSpec::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, input_shape)
    }

    /// Two conv blocks and a classifier for `[C, H, W]` inputs with `H`, `W`
    /// divisible by 4.
    pub fn small_cnn(input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        let text = format!(
            "conv2d in={c} out=8 kernel=3 padding=1\nrelu\nmaxpool window=2\n\
             conv2d in=8 out=16 kernel=3 padding=1\nrelu\nmaxpool window=2\n\
             fc in={} out={classes}\nsoftmax_xent\n",
            16 * (h / 4) * (w / 4)
        );
        Self::parse(&text, input_shape)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.param_shapes
    }

    /// Parameter slots owned by `layer`.
    pub fn param_range(&self, layer: usize) -> Range<usize> {
        self.param_ranges[layer].clone()
    }

    /// Indices of convolutional layers.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv2d(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn describe(&self) -> String {
        self.layers.iter().map(|l| format!("{l}\n")).collect()
    }

    /// Kaiming-uniform weights, zero biases.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.param_shapes
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape.clone()).unwrap();
                }
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape.clone(), |_| {
                    T::cast_from(rng.random_range(-bound..bound))
                })
                .unwrap()
            })
            .collect()
    }

    fn check_batch<T: Scalar>(&self, params: &[Tensor<T>], x: &Tensor<T>) -> Result<()> {
        if params.len() != self.param_shapes.len()
            || params
                .iter()
                .zip(&self.param_shapes)
                .any(|(p, s)| p.shape() != s.as_slice())
        {
            return Err(Error::Shape("parameters do not match the network".into()));
        }
        if x.rank() != 4 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "batch {:?} does not match input shape {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass to logits.
    pub fn logits<T: Scalar>(&self, params: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(params, x)?;
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = &params[self.param_ranges[i].clone()];
            a = match layer {
                LayerSpec::Conv2d(c) => layers::conv2d_forward(&a, &p[0], c)?,
                LayerSpec::Relu => layers::relu_forward(&a)?,
                LayerSpec::MaxPool(s) => layers::maxpool_forward(&a, s)?.0,
                LayerSpec::FullyConnected { .. } => layers::fc_forward(&a, &p[0], &p[1])?,
                LayerSpec::SoftmaxXent => a,
            };
        }
        Ok(a)
    }

    pub fn predict<T: Scalar>(&self, params: &[Tensor<T>], x: &Tensor<T>) -> Result<Vec<usize>> {
        let z = self.logits(params, x)?;
        let k = z.shape()[1];
        Ok(z.data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
            })
            .collect())
    }

    /// Mean loss only; used by finite-difference checks.
    pub fn loss<T: Scalar>(
        &self,
        params: &[Tensor<T>],
        x: &Tensor<T>,
        labels: &[usize],
    ) -> Result<f64> {
        Ok(layers::softmax_xent(&self.logits(params, x)?, labels)?.0)
    }

    /// Forward and backward pass. Conv-layer inputs are handed to `stash`
    /// after the layer's forward and reclaimed when its backward runs.
    pub fn forward_backward<T: Scalar, S: ActivationStash<T>>(
        &self,
        params: &[Tensor<T>],
        x: &Tensor<T>,
        labels: &[usize],
        stash: &mut S,
    ) -> Result<StepOutput<T>> {
        self.check_batch(params, x)?;
        let mut caches: Vec<Cache<S::Handle, T>> = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        let mut loss = 0.0;
        let mut grad = None;
        let mut correct = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let p = &params[self.param_ranges[i].clone()];
            match layer {
                LayerSpec::Conv2d(c) => {
                    let out = layers::conv2d_forward(&a, &p[0], c)?;
                    let input_shape = a.shape().to_vec();
                    let handle = stash.stash(i, a)?;
                    caches.push(Cache::Conv {
                        handle,
                        input_shape,
                    });
                    a = out;
                }
                LayerSpec::Relu => {
                    a = layers::relu_forward(&a)?;
                    caches.push(Cache::Relu { output: a.clone() });
                }
                LayerSpec::MaxPool(s) => {
                    let (out, argmax) = layers::maxpool_forward(&a, s)?;
                    caches.push(Cache::Pool {
                        argmax,
                        input_shape: a.shape().to_vec(),
                    });
                    a = out;
                }
                LayerSpec::FullyConnected { .. } => {
                    let out = layers::fc_forward(&a, &p[0], &p[1])?;
                    caches.push(Cache::Fc { input: a });
                    a = out;
                }
                LayerSpec::SoftmaxXent => {
                    let k = a.shape()[1];
                    correct = a
                        .data()
                        .chunks(k)
                        .zip(labels)
                        .filter(|(row, &y)| {
                            row.iter()
                                .enumerate()
                                .fold(0, |b, (j, v)| if *v > row[b] { j } else { b })
                                == y
                        })
                        .count();
                    let (l, g) = layers::softmax_xent(&a, labels)?;
                    loss = l;
                    grad = Some(g);
                    caches.push(Cache::Softmax);
                }
            }
        }

        let mut g = grad.expect("network ends with softmax_xent");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.param_shapes.len()];
        for (i, cache) in caches.into_iter().enumerate().rev() {
            let slots = self.param_ranges[i].clone();
            match (cache, &self.layers[i]) {
                (Cache::Softmax, _) => {}
                (Cache::Fc { input }, _) => {
                    let fg = layers::fc_backward(&input, &params[slots.start], &g)?;
                    grads[slots.start] = Some(fg.weights);
                    grads[slots.start + 1] = Some(fg.bias);
                    g = fg.input;
                }
                (
                    Cache::Pool {
                        argmax,
                        input_shape,
                    },
                    _,
                ) => {
                    g = layers::maxpool_backward(&g, &argmax, &input_shape)?;
                }
                (Cache::Relu { output }, _) => {
                    g = layers::relu_backward(&output, &g)?;
                }
                (
                    Cache::Conv {
                        handle,
                        input_shape,
                    },
                    LayerSpec::Conv2d(c),
                ) => {
                    let activation = stash.restore(i, handle, &g)?;
                    if activation.shape() != input_shape.as_slice() {
                        return Err(Error::Shape(format!(
                            "restored activation for layer {i} has the wrong shape"
                        )));
                    }
                    grads[slots.start] = Some(layers::conv2d_backward_weights(&activation, &g, c)?);
                    drop(activation);
                    if i > 0 {
                        g = layers::conv2d_backward_input(
                            &params[slots.start],
                            &g,
                            c,
                            &input_shape,
                        )?;
                    }
                }
                _ => unreachable!("cache kind matches layer kind"),
            }
        }
        Ok(StepOutput {
            loss,
            correct,
            grads: grads
                .into_iter()
                .map(|g| g.expect("every slot has a gradient"))
                .collect(),
        })
    }
}
