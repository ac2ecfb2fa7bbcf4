use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `out = W * in + b`, `W` shaped `[outputs, inputs]`.
    Dense { inputs: usize, outputs: usize },
    /// 3x3 valid cross-correlation, stride 1; `W` shaped `[out, in, 3, 3]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
    },
    /// Non-overlapping 2x2 max, odd trailing rows/columns dropped.
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => Some((
                vec![out_channels, in_channels, KERNEL, KERNEL],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_channels, .. } => in_channels * KERNEL * KERNEL,
            _ => 0,
        }
    }

    /// Output shape for `input`, or `None` if the input does not fit.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => (input == [inputs]).then(|| vec![outputs]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => match *input {
                [c, h, w] if c == in_channels && h >= KERNEL && w >= KERNEL => {
                    Some(vec![out_channels, h - KERNEL + 1, w - KERNEL + 1])
                }
                _ => None,
            },
            LayerSpec::MaxPool2x2 => match *input {
                [c, h, w] if h >= 2 && w >= 2 => Some(vec![c, h / 2, w / 2]),
                _ => None,
            },
            LayerSpec::Relu => Some(input.to_vec()),
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros_for(spec: &LayerSpec) -> Option<Self> {
        spec.param_shapes().map(|(w, b)| Self {
            weight: Tensor::zeros(w),
            bias: Tensor::zeros(b),
        })
    }
}

/// Values the backward pass needs from the matching forward call.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense { input: Tensor },
    Conv2d { input: Tensor },
    MaxPool2x2 { input_shape: Vec<usize>, argmax: Vec<usize> },
    Relu { input: Tensor },
    Flatten { input_shape: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<LayerParams>,
}

impl Layer {
    /// Layer with zero weights and biases.
    pub fn zeroed(spec: LayerSpec) -> Self {
        Self {
            params: LayerParams::zeros_for(&spec),
            spec,
        }
    }

    /// Fan-in-scaled uniform weights in `±sqrt(6 / fan_in)`, zero biases.
    pub fn initialized(spec: LayerSpec, rng: &mut SeededRng) -> Self {
        let mut layer = Self::zeroed(spec);
        if let Some(p) = &mut layer.params {
            let limit = (6.0 / spec.fan_in() as f64).sqrt();
            for w in p.weight.data_mut() {
                *w = rng.uniform_in(-limit, limit);
            }
        }
        layer
    }

    pub fn forward(&self, index: usize, input: &Tensor) -> Result<(Tensor, LayerCache)> {
        layer_forward(index, &self.spec, self.params.as_ref(), input)
    }

    pub fn backward(
        &self,
        index: usize,
        cache: &LayerCache,
        grad_out: &Tensor,
    ) -> Result<(Tensor, Option<LayerParams>)> {
        layer_backward(index, &self.spec, self.params.as_ref(), cache, grad_out)
    }
}

fn mismatch(layer: usize, expected: Vec<usize>, actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        layer,
        expected,
        actual: actual.to_vec(),
    }
}

fn expected_input(spec: &LayerSpec) -> Vec<usize> {
    match *spec {
        LayerSpec::Dense { inputs, .. } => vec![inputs],
        LayerSpec::Conv2d { in_channels, .. } => vec![in_channels, KERNEL, KERNEL],
        LayerSpec::MaxPool2x2 => vec![1, 2, 2],
        LayerSpec::Relu | LayerSpec::Flatten => vec![],
    }
}

fn params_for<'a>(
    index: usize,
    spec: &LayerSpec,
    params: Option<&'a LayerParams>,
) -> Result<&'a LayerParams> {
    let (w, b) = spec.param_shapes().expect("parameterized layer");
    match params {
        Some(p) if p.weight.shape() == w && p.bias.shape() == b => Ok(p),
        Some(p) => Err(mismatch(index, w, p.weight.shape())),
        None => Err(mismatch(index, w, &[])),
    }
}

/// Runs one layer. `index` only labels errors.
pub fn layer_forward(
    index: usize,
    spec: &LayerSpec,
    params: Option<&LayerParams>,
    input: &Tensor,
) -> Result<(Tensor, LayerCache)> {
    let out_shape = spec
        .output_shape(input.shape())
        .ok_or_else(|| mismatch(index, expected_input(spec), input.shape()))?;
    let x = input.data();
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            let p = params_for(index, spec, params)?;
            let w = p.weight.data();
            let out: Vec<f64> = (0..outputs)
                .map(|o| {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    p.bias.data()[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            Ok((
                Tensor::new(out_shape, out)?,
                LayerCache::Dense {
                    input: input.clone(),
                },
            ))
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
        } => {
            let p = params_for(index, spec, params)?;
            let (h, w) = (input.shape()[1], input.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let weights = p.weight.data();
            let mut out = vec![0.0; out_channels * oh * ow];
            for o in 0..out_channels {
                let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
                plane.fill(p.bias.data()[o]);
                for c in 0..in_channels {
                    let src = &x[c * h * w..(c + 1) * h * w];
                    for ki in 0..KERNEL {
                        for kj in 0..KERNEL {
                            let k = weights[((o * in_channels + c) * KERNEL + ki) * KERNEL + kj];
                            for i in 0..oh {
                                let dst = &mut plane[i * ow..(i + 1) * ow];
                                let row = &src[(i + ki) * w + kj..(i + ki) * w + kj + ow];
                                for (d, s) in dst.iter_mut().zip(row) {
                                    *d += k * s;
                                }
                            }
                        }
                    }
                }
            }
            Ok((
                Tensor::new(out_shape, out)?,
                LayerCache::Conv2d {
                    input: input.clone(),
                },
            ))
        }
        LayerSpec::MaxPool2x2 => {
            let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(c * oh * ow);
            let mut argmax = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let base = ch * h * w;
                        let candidates = [
                            base + 2 * i * w + 2 * j,
                            base + 2 * i * w + 2 * j + 1,
                            base + (2 * i + 1) * w + 2 * j,
                            base + (2 * i + 1) * w + 2 * j + 1,
                        ];
                        let best = candidates
                            .into_iter()
                            .reduce(|a, b| if x[b] > x[a] { b } else { a })
                            .expect("four candidates");
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
            Ok((
                Tensor::new(out_shape, out)?,
                LayerCache::MaxPool2x2 {
                    input_shape: input.shape().to_vec(),
                    argmax,
                },
            ))
        }
        LayerSpec::Relu => Ok((
            Tensor::new(out_shape, x.iter().map(|v| v.max(0.0)).collect())?,
            LayerCache::Relu {
                input: input.clone(),
            },
        )),
        LayerSpec::Flatten => Ok((
            input.clone().reshaped(out_shape)?,
            LayerCache::Flatten {
                input_shape: input.shape().to_vec(),
            },
        )),
    }
}

/// Reverse-mode step for one layer: gradient w.r.t. the input and, for
/// parameterized layers, w.r.t. the weights and biases.
pub fn layer_backward(
    index: usize,
    spec: &LayerSpec,
    params: Option<&LayerParams>,
    cache: &LayerCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Option<LayerParams>)> {
    let stale = || Error::StaleCache { layer: index };
    let input_shape: &[usize] = match (spec, cache) {
        (LayerSpec::Dense { .. }, LayerCache::Dense { input })
        | (LayerSpec::Conv2d { .. }, LayerCache::Conv2d { input })
        | (LayerSpec::Relu, LayerCache::Relu { input }) => input.shape(),
        (LayerSpec::MaxPool2x2, LayerCache::MaxPool2x2 { input_shape, .. })
        | (LayerSpec::Flatten, LayerCache::Flatten { input_shape }) => input_shape,
        _ => return Err(stale()),
    };
    let out_shape = spec.output_shape(input_shape).ok_or_else(stale)?;
    if grad_out.shape() != out_shape {
        return Err(mismatch(index, out_shape, grad_out.shape()));
    }
    let g = grad_out.data();
    match (*spec, cache) {
        (LayerSpec::Dense { inputs, outputs }, LayerCache::Dense { input }) => {
            let p = params_for(index, spec, params)?;
            let x = input.data();
            let w = p.weight.data();
            let mut grad_in = vec![0.0; inputs];
            let mut grad_w = vec![0.0; inputs * outputs];
            for o in 0..outputs {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let row = &w[o * inputs..(o + 1) * inputs];
                let grow = &mut grad_w[o * inputs..(o + 1) * inputs];
                for i in 0..inputs {
                    grad_in[i] += row[i] * go;
                    grow[i] = x[i] * go;
                }
            }
            Ok((
                Tensor::new(input_shape.to_vec(), grad_in)?,
                Some(LayerParams {
                    weight: Tensor::new(vec![outputs, inputs], grad_w)?,
                    bias: grad_out.clone(),
                }),
            ))
        }
        (
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            },
            LayerCache::Conv2d { input },
        ) => {
            let p = params_for(index, spec, params)?;
            let x = input.data();
            let (h, w) = (input_shape[1], input_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let weights = p.weight.data();
            let mut grad_in = vec![0.0; x.len()];
            let mut grad_w = vec![0.0; weights.len()];
            let mut grad_b = vec![0.0; out_channels];
            for o in 0..out_channels {
                let plane = &g[o * oh * ow..(o + 1) * oh * ow];
                grad_b[o] = plane.iter().sum();
                for c in 0..in_channels {
                    let src = &x[c * h * w..(c + 1) * h * w];
                    let dst = &mut grad_in[c * h * w..(c + 1) * h * w];
                    for ki in 0..KERNEL {
                        for kj in 0..KERNEL {
                            let wi = ((o * in_channels + c) * KERNEL + ki) * KERNEL + kj;
                            let k = weights[wi];
                            let mut acc = 0.0;
                            for i in 0..oh {
                                let gr = &plane[i * ow..(i + 1) * ow];
                                let off = (i + ki) * w + kj;
                                let xr = &src[off..off + ow];
                                acc += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                                for (d, gv) in dst[off..off + ow].iter_mut().zip(gr) {
                                    *d += k * gv;
                                }
                            }
                            grad_w[wi] = acc;
                        }
                    }
                }
            }
            Ok((
                Tensor::new(input_shape.to_vec(), grad_in)?,
                Some(LayerParams {
                    weight: Tensor::new(p.weight.shape().to_vec(), grad_w)?,
                    bias: Tensor::vector(grad_b),
                }),
            ))
        }
        (LayerSpec::MaxPool2x2, LayerCache::MaxPool2x2 { argmax, .. }) => {
            if argmax.len() != g.len() {
                return Err(stale());
            }
            let mut grad_in = vec![0.0; input_shape.iter().product()];
            for (&src, gv) in argmax.iter().zip(g) {
                grad_in[src] += gv;
            }
            Ok((Tensor::new(input_shape.to_vec(), grad_in)?, None))
        }
        (LayerSpec::Relu, LayerCache::Relu { input }) => {
            let grad_in = input
                .data()
                .iter()
                .zip(g)
                .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                .collect();
            Ok((Tensor::new(input_shape.to_vec(), grad_in)?, None))
        }
        (LayerSpec::Flatten, LayerCache::Flatten { .. }) => {
            Ok((grad_out.clone().reshaped(input_shape.to_vec())?, None))
        }
        _ => Err(stale()),
    }
}
