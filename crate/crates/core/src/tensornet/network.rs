use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::gemm::{gemm, View};
use super::spec::{ActShape, Layer, NetworkSpec};
use super::tensor::{all_finite, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Per-layer state kept by a recorded forward pass.
enum LayerCache {
    Conv {
        input: Vec<f32>,
        in_shape: (usize, usize, usize),
        out_hw: (usize, usize),
    },
    MaxPool {
        argmax: Vec<u32>,
        in_numel: usize,
    },
    Relu {
        active: Vec<bool>,
    },
    Reshape,
    Dense {
        input: Vec<f32>,
    },
    Gap {
        in_shape: (usize, usize, usize),
    },
}

/// Parameter and input gradients from one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

/// A network spec bound to its parameters.
///
/// [`Network::forward`] records the activations needed by
/// [`Network::backward`]; [`Network::infer`] takes `&self` and records
/// nothing, so frozen networks can be shared across threads.
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<ActShape>,
    params: Vec<Tensor>,
    /// Index into `params` of each layer's weight tensor.
    param_slot: Vec<Option<usize>>,
    cache: Option<(usize, Vec<LayerCache>)>,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            params: self.params.clone(),
            param_slot: self.param_slot.clone(),
            cache: None,
        }
    }
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("params", &self.params.len())
            .finish()
    }
}

impl Network {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let mut rng = Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(shape, data).expect("shape matches data")
            })
            .collect();
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.shapes()?;
        let expected = spec.param_shapes()?;
        if expected.len() != params.len()
            || expected.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::ShapeMismatch(
                "parameter tensors do not match the network spec".into(),
            ));
        }
        let mut slot = 0;
        let param_slot = spec
            .layers
            .iter()
            .map(|l| {
                l.has_params().then(|| {
                    slot += 2;
                    slot - 2
                })
            })
            .collect();
        Ok(Self {
            spec,
            shapes,
            params,
            param_slot,
            cache: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().map(ActShape::numel).unwrap_or(0)
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let s = input.shape();
        let want = [self.spec.input_channels, self.spec.input_size, self.spec.input_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::ShapeMismatch(format!(
                "input {s:?}, network expects [B, {}, {}, {}]",
                want[0], want[1], want[2]
            )));
        }
        if s[0] == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        Ok(s[0])
    }

    /// Forward pass that records activations for [`Network::backward`].
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        self.cache = None;
        let batch = self.check_input(input)?;
        let (out, cache) = self.run(input, true)?;
        self.cache = Some((batch, cache));
        Ok(out)
    }

    /// Forward pass without recording.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        Ok(self.run(input, false)?.0)
    }

    fn run(&self, input: &Tensor, record: bool) -> Result<(Tensor, Vec<LayerCache>)> {
        let batch = input.shape()[0];
        let mut act = input.data().to_vec();
        let mut caches = Vec::with_capacity(if record { self.spec.layers.len() } else { 0 });
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let in_shape = self.shapes[i];
            let out_shape = self.shapes[i + 1];
            let (next, cache) = match *layer {
                Layer::Conv2d { kernel, stride, .. } => {
                    let slot = self.param_slot[i].expect("conv has params");
                    let out = conv_forward(
                        &act,
                        batch,
                        in_shape,
                        out_shape,
                        kernel,
                        stride,
                        &self.params[slot],
                        &self.params[slot + 1],
                    );
                    let ActShape::Spatial { c, h, w } = in_shape else { unreachable!() };
                    let ActShape::Spatial { h: oh, w: ow, .. } = out_shape else { unreachable!() };
                    let cache = record.then(|| LayerCache::Conv {
                        input: std::mem::take(&mut act),
                        in_shape: (c, h, w),
                        out_hw: (oh, ow),
                    });
                    (out, cache)
                }
                Layer::MaxPool2 => maxpool_forward(&act, batch, in_shape, out_shape, record),
                Layer::Relu => {
                    let mut active = Vec::with_capacity(if record { act.len() } else { 0 });
                    if record {
                        active.extend(act.iter().map(|&v| v > 0.0));
                    }
                    for v in &mut act {
                        *v = v.max(0.0);
                    }
                    (act, record.then_some(LayerCache::Relu { active }))
                }
                Layer::Flatten => (act, record.then_some(LayerCache::Reshape)),
                Layer::GlobalAvgPool => {
                    let ActShape::Spatial { c, h, w } = in_shape else { unreachable!() };
                    let hw = h * w;
                    let out = act.chunks(hw).map(|ch| ch.iter().sum::<f32>() / hw as f32).collect();
                    (out, record.then_some(LayerCache::Gap { in_shape: (c, h, w) }))
                }
                Layer::Dense { out_dim } => {
                    let slot = self.param_slot[i].expect("dense has params");
                    let in_dim = in_shape.numel();
                    let (w, b) = (&self.params[slot], &self.params[slot + 1]);
                    let mut out = Vec::with_capacity(batch * out_dim);
                    for _ in 0..batch {
                        out.extend_from_slice(b.data());
                    }
                    gemm(
                        View::row_major(&act, batch, in_dim),
                        View::row_major(w.data(), out_dim, in_dim).t(),
                        &mut out,
                        1.0,
                    );
                    (out, record.then_some(LayerCache::Dense { input: act }))
                }
            };
            // relu, pooling and reshapes cannot turn finite inputs non-finite
            let can_overflow = matches!(
                layer,
                Layer::Conv2d { .. } | Layer::Dense { .. } | Layer::GlobalAvgPool
            );
            if can_overflow && !all_finite(&next) {
                return Err(Error::NonFiniteActivation {
                    index: i,
                    layer: layer.name().into(),
                });
            }
            act = next;
            if let Some(c) = cache {
                caches.push(c);
            }
        }
        let dim = self.output_dim();
        Ok((Tensor::new(vec![batch, dim], act)?, caches))
    }

    /// Reverse-mode pass for the most recent [`Network::forward`]. Consumes
    /// the recorded state.
    pub fn backward(&mut self, output_grad: &Tensor) -> Result<Gradients> {
        let (params, input) = self.backward_inner(output_grad, true)?;
        Ok(Gradients {
            params,
            input: input.expect("input gradient requested"),
        })
    }

    /// Like [`Network::backward`] but skips the gradient with respect to the
    /// input, which training never needs.
    pub fn backward_params(&mut self, output_grad: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.backward_inner(output_grad, false)?.0)
    }

    fn backward_inner(
        &mut self,
        output_grad: &Tensor,
        want_input: bool,
    ) -> Result<(Vec<Tensor>, Option<Tensor>)> {
        let (batch, caches) = self.cache.take().ok_or(Error::NoForwardState)?;
        if output_grad.shape() != [batch, self.output_dim()] {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?}, expected [{batch}, {}]",
                output_grad.shape(),
                self.output_dim()
            )));
        }
        let mut grads: Vec<Tensor> = self.params.iter().map(Tensor::zeros_like).collect();
        let mut g = output_grad.data().to_vec();
        for (i, (layer, cache)) in self.spec.layers.iter().zip(caches).enumerate().rev() {
            g = match (*layer, cache) {
                (Layer::Conv2d { kernel, stride, .. }, LayerCache::Conv { input, in_shape, out_hw }) => {
                    let slot = self.param_slot[i].expect("conv has params");
                    let (gw, rest) = grads[slot..].split_at_mut(1);
                    conv_backward(
                        &g,
                        batch,
                        &input,
                        in_shape,
                        out_hw,
                        kernel,
                        stride,
                        &self.params[slot],
                        &mut gw[0],
                        &mut rest[0],
                        want_input || i > 0,
                    )
                }
                (Layer::MaxPool2, LayerCache::MaxPool { argmax, in_numel }) => {
                    let mut dx = vec![0.0f32; batch * in_numel];
                    for (o, &src) in g.iter().zip(&argmax) {
                        dx[src as usize] += o;
                    }
                    dx
                }
                (Layer::Relu, LayerCache::Relu { active }) => {
                    for (v, &a) in g.iter_mut().zip(&active) {
                        if !a {
                            *v = 0.0;
                        }
                    }
                    g
                }
                (Layer::Flatten, LayerCache::Reshape) => g,
                (Layer::GlobalAvgPool, LayerCache::Gap { in_shape: (c, h, w) }) => {
                    let hw = h * w;
                    let mut dx = Vec::with_capacity(batch * c * hw);
                    for &v in &g {
                        dx.extend(std::iter::repeat_n(v / hw as f32, hw));
                    }
                    dx
                }
                (Layer::Dense { out_dim }, LayerCache::Dense { input }) => {
                    let slot = self.param_slot[i].expect("dense has params");
                    let in_dim = input.len() / batch;
                    let gy = View::row_major(&g, batch, out_dim);
                    gemm(gy.t(), View::row_major(&input, batch, in_dim), grads[slot].data_mut(), 1.0);
                    let gb = grads[slot + 1].data_mut();
                    for row in g.chunks(out_dim) {
                        for (b, v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    let mut dx = vec![0.0f32; batch * in_dim];
                    gemm(gy, View::row_major(self.params[slot].data(), out_dim, in_dim), &mut dx, 0.0);
                    dx
                }
                _ => unreachable!("cache kind always matches its layer"),
            };
        }
        if !want_input {
            return Ok((grads, None));
        }
        let ActShape::Spatial { c, h, w } = self.shapes[0] else { unreachable!() };
        Ok((grads, Some(Tensor::new(vec![batch, c, h, w], g)?)))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f32],
    batch: usize,
    in_shape: ActShape,
    out_shape: ActShape,
    kernel: usize,
    stride: usize,
    weight: &Tensor,
    bias: &Tensor,
) -> Vec<f32> {
    let ActShape::Spatial { c, h, w } = in_shape else { unreachable!() };
    let ActShape::Spatial { c: oc, h: oh, w: ow } = out_shape else { unreachable!() };
    let rows = c * kernel * kernel;
    let ohw = oh * ow;
    let mut out = vec![0.0f32; batch * oc * ohw];
    // one image's columns at a time keeps the scratch cache-resident
    let mut cols = vec![0.0f32; rows * ohw];
    for b in 0..batch {
        let x = &input[b * c * h * w..(b + 1) * c * h * w];
        im2col(x, (c, h, w), kernel, stride, (oh, ow), &mut cols);
        let y = &mut out[b * oc * ohw..(b + 1) * oc * ohw];
        for (o, chunk) in y.chunks_mut(ohw).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        if rows <= SMALL_REDUCTION {
            small_matmul_acc(weight.data(), &cols, y, oc, rows, ohw);
        } else {
            gemm(
                View::row_major(weight.data(), oc, rows),
                View::row_major(&cols, rows, ohw),
                y,
                1.0,
            );
        }
    }
    out
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` is inside
/// `0..w`.
fn valid_cols(kx: usize, pad: usize, stride: usize, w: usize, ow: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    // largest ox with ox * stride + kx - pad <= w - 1
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(ow) } else { 0 };
    lo..hi.max(lo)
}

/// Below this many im2col rows (e.g. a single-channel 3x3 conv) packing for
/// the blocked GEMM costs more than it saves.
const SMALL_REDUCTION: usize = 16;

/// `y[m, n] += sum_k w[m, k] * x[k, n]`, tiled along `n` so the output tile
/// stays in L1.
fn small_matmul_acc(w: &[f32], x: &[f32], y: &mut [f32], m: usize, k: usize, n: usize) {
    const TILE: usize = 512;
    for start in (0..n).step_by(TILE) {
        let end = (start + TILE).min(n);
        for o in 0..m {
            let out = &mut y[o * n + start..o * n + end];
            for r in 0..k {
                let a = w[o * k + r];
                for (d, v) in out.iter_mut().zip(&x[r * n + start..r * n + end]) {
                    *d += a * v;
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn im2col(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    kernel: usize,
    stride: usize,
    (oh, ow): (usize, usize),
    cols: &mut [f32],
) {
    let pad = kernel / 2;
    let ohw = oh * ow;
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let valid = valid_cols(kx, pad, stride, w, ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    line[..valid.start].fill(0.0);
                    line[valid.end..].fill(0.0);
                    let first = valid.start * stride + kx - pad;
                    if stride == 1 {
                        line[valid.clone()].copy_from_slice(&src[first..first + valid.len()]);
                    } else {
                        for (k, v) in line[valid.clone()].iter_mut().enumerate() {
                            *v = src[first + k * stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f32],
    (c, h, w): (usize, usize, usize),
    kernel: usize,
    stride: usize,
    (oh, ow): (usize, usize),
    dx: &mut [f32],
) {
    let pad = kernel / 2;
    let ohw = oh * ow;
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let valid = valid_cols(kx, pad, stride, w, ow);
                if valid.is_empty() {
                    continue;
                }
                let first = valid.start * stride + kx - pad;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w + first;
                    let line = &src[oy * ow + valid.start..oy * ow + valid.end];
                    if stride == 1 {
                        for (d, v) in dx[base..base + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (k, v) in line.iter().enumerate() {
                            dx[base + k * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    g: &[f32],
    batch: usize,
    input: &[f32],
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
    kernel: usize,
    stride: usize,
    weight: &Tensor,
    grad_w: &mut Tensor,
    grad_b: &mut Tensor,
    want_dx: bool,
) -> Vec<f32> {
    let (c, h, w) = in_shape;
    let oc = weight.shape()[0];
    let rows = c * kernel * kernel;
    let ohw = out_hw.0 * out_hw.1;
    let mut dx = if want_dx { vec![0.0f32; batch * c * h * w] } else { Vec::new() };
    let mut dcols = if want_dx { vec![0.0f32; rows * ohw] } else { Vec::new() };
    let mut cols = vec![0.0f32; rows * ohw];
    for b in 0..batch {
        let gy = &g[b * oc * ohw..(b + 1) * oc * ohw];
        im2col(&input[b * c * h * w..(b + 1) * c * h * w], in_shape, kernel, stride, out_hw, &mut cols);
        let col = &cols[..];
        if rows <= SMALL_REDUCTION {
            for (o, g_row) in gy.chunks(ohw).enumerate() {
                for (r, c_row) in col.chunks(ohw).enumerate() {
                    grad_w.data_mut()[o * rows + r] += dot(g_row, c_row);
                }
            }
        } else {
            gemm(
                View::row_major(gy, oc, ohw),
                View::row_major(col, rows, ohw).t(),
                grad_w.data_mut(),
                1.0,
            );
        }
        for (o, chunk) in gy.chunks(ohw).enumerate() {
            grad_b.data_mut()[o] += chunk.iter().sum::<f32>();
        }
        if !want_dx {
            continue;
        }
        gemm(
            View::row_major(weight.data(), oc, rows).t(),
            View::row_major(gy, oc, ohw),
            &mut dcols,
            0.0,
        );
        col2im(
            &dcols,
            in_shape,
            kernel,
            stride,
            out_hw,
            &mut dx[b * c * h * w..(b + 1) * c * h * w],
        );
    }
    dx
}

fn maxpool_forward(
    input: &[f32],
    batch: usize,
    in_shape: ActShape,
    out_shape: ActShape,
    record: bool,
) -> (Vec<f32>, Option<LayerCache>) {
    let ActShape::Spatial { c, h, w } = in_shape else { unreachable!() };
    let ActShape::Spatial { h: oh, w: ow, .. } = out_shape else { unreachable!() };
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut argmax = Vec::with_capacity(if record { batch * c * oh * ow } else { 0 });
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                if record {
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    let cache = record.then_some(LayerCache::MaxPool {
        argmax,
        in_numel: c * h * w,
    });
    (out, cache)
}
