//! Small 3D CNNs with a hand-written reverse pass.
//!
//! A network is an ordered list of [`Layer`]s applied to a single sample of
//! shape `[channels, x, y, z]`. [`forward`] records every intermediate
//! activation on a [`Tape`]; [`backward`] replays the tape in reverse and
//! returns parameter gradients together with the gradient flowing into the
//! layer marked `cam_target`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        #[serde(default = "unit_stride")]
        stride: [usize; 3],
        #[serde(default)]
        padding: [usize; 3],
        #[serde(default)]
        cam_target: bool,
    },
    Relu,
    #[serde(rename = "maxpool3d")]
    MaxPool3d {
        window: [usize; 3],
        stride: [usize; 3],
    },
    #[serde(rename = "global_average_pool")]
    GlobalAvgPool,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Sigmoid,
}

fn unit_stride() -> [usize; 3] {
    [1, 1, 1]
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv3d { .. } => "conv3d",
            Layer::Relu => "relu",
            Layer::MaxPool3d { .. } => "maxpool3d",
            Layer::GlobalAvgPool => "global_average_pool",
            Layer::Dense { .. } => "dense",
            Layer::Sigmoid => "sigmoid",
        }
    }

    fn has_params(&self) -> bool {
        matches!(self, Layer::Conv3d { .. } | Layer::Dense { .. })
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        Layer::Conv3d {
            in_channels,
            out_channels,
            kernel: [kernel; 3],
            stride: [1; 3],
            padding: [padding; 3],
            cam_target: false,
        }
    }

    pub fn cam_conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        match Self::conv(in_channels, out_channels, kernel, padding) {
            Layer::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => Layer::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                cam_target: true,
            },
            _ => unreachable!(),
        }
    }

    pub fn maxpool(size: usize) -> Self {
        Layer::MaxPool3d {
            window: [size; 3],
            stride: [size; 3],
        }
    }
}

/// Layer list plus the per-sample input shape `[channels, x, y, z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: [usize; 4],
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    /// conv(3³, 1→8) → relu → maxpool(2) → conv(3³, 8→16, cam) → relu → GAP → dense(16→1).
    pub fn default_for(extents: [usize; 3]) -> Self {
        NetworkSpec {
            input: [1, extents[0], extents[1], extents[2]],
            layers: vec![
                Layer::conv(1, 8, 3, 1),
                Layer::Relu,
                Layer::maxpool(2),
                Layer::cam_conv(8, 16, 3, 1),
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Dense { inputs: 16, outputs: 1 },
            ],
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.input.to_vec()
    }

    /// Activation shapes: entry 0 is the input, entry `i + 1` the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.iter().any(|&e| e == 0) {
            return Err(Error::Network(format!(
                "input extents must be positive: {:?}",
                self.input
            )));
        }
        let mut shapes = vec![self.input.to_vec()];
        for (index, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap();
            let err = |message: String| Error::Shape {
                index,
                kind: layer.kind(),
                message,
            };
            let next = match layer {
                Layer::Conv3d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if cur.len() != 4 {
                        return Err(err(format!("expects [c, x, y, z] input, got {cur:?}")));
                    }
                    if cur[0] != *in_channels {
                        return Err(err(format!("expects {in_channels} input channels, got {}", cur[0])));
                    }
                    if *out_channels == 0 || kernel.contains(&0) || stride.contains(&0) {
                        return Err(err("channels, kernel and stride must be positive".into()));
                    }
                    let mut out = vec![*out_channels];
                    for a in 0..3 {
                        let span = cur[a + 1] + 2 * padding[a];
                        if span < kernel[a] {
                            return Err(err(format!("kernel {kernel:?} exceeds padded input {cur:?}")));
                        }
                        out.push((span - kernel[a]) / stride[a] + 1);
                    }
                    out
                }
                Layer::MaxPool3d { window, stride } => {
                    if cur.len() != 4 {
                        return Err(err(format!("expects [c, x, y, z] input, got {cur:?}")));
                    }
                    if window.contains(&0) || stride.contains(&0) {
                        return Err(err("window and stride must be positive".into()));
                    }
                    let mut out = vec![cur[0]];
                    for a in 0..3 {
                        if cur[a + 1] < window[a] {
                            return Err(err(format!("window {window:?} exceeds input {cur:?}")));
                        }
                        out.push((cur[a + 1] - window[a]) / stride[a] + 1);
                    }
                    out
                }
                Layer::GlobalAvgPool => {
                    if cur.len() != 4 {
                        return Err(err(format!("expects [c, x, y, z] input, got {cur:?}")));
                    }
                    vec![cur[0]]
                }
                Layer::Dense { inputs, outputs } => {
                    let n: usize = cur.iter().product();
                    if n != *inputs {
                        return Err(err(format!("expects {inputs} inputs, got {n}")));
                    }
                    if *outputs == 0 {
                        return Err(err("outputs must be positive".into()));
                    }
                    vec![*outputs]
                }
                Layer::Relu | Layer::Sigmoid => cur.clone(),
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Full structural validation, including the single conv `cam_target`.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.shapes()?;
        self.cam_index()?;
        Ok(shapes)
    }

    pub fn cam_index(&self) -> Result<usize> {
        let marked: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv3d { cam_target: true, .. }))
            .map(|(i, _)| i)
            .collect();
        match marked.as_slice() {
            [i] => Ok(*i),
            [] => Err(Error::Network("no conv3d layer carries cam_target".into())),
            _ => Err(Error::Network(format!("cam_target set on several layers: {marked:?}"))),
        }
    }

    /// Index of the first parameter tensor (weight; bias follows) of each layer.
    pub fn param_slots(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.layers
            .iter()
            .map(|l| {
                l.has_params().then(|| {
                    next += 2;
                    next - 2
                })
            })
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv3d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.push(vec![*out_channels, *in_channels, kernel[0], kernel[1], kernel[2]]);
                    out.push(vec![*out_channels]);
                }
                Layer::Dense { inputs, outputs } => {
                    out.push(vec![*outputs, *inputs]);
                    out.push(vec![*outputs]);
                }
                _ => {}
            }
        }
        out
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Result<Params> {
        self.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for shape in self.param_shapes() {
            if shape.len() == 1 {
                tensors.push(Tensor::zeros(&shape));
                continue;
            }
            let receptive: usize = shape[2..].iter().product();
            let fan_in = shape[1] * receptive;
            let fan_out = shape[0] * receptive;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
            tensors.push(Tensor::from_raw(shape, data));
        }
        Ok(Params { tensors })
    }
}

/// Parameter tensors in layer order (weight then bias for each conv/dense).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Network(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (i, (e, t)) in expected.iter().zip(&self.tensors).enumerate() {
            if e.as_slice() != t.shape() {
                return Err(Error::Network(format!(
                    "parameter {i} has shape {:?}, expected {e:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Params, scale: f32) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            axpy(a.data_mut(), scale, b.data());
        }
    }
}

/// Cached state of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    start: usize,
    acts: Vec<Tensor>,
    cols: Vec<Option<Vec<f32>>>,
    argmax: Vec<Option<Vec<u32>>>,
    cam: Option<usize>,
}

impl Tape {
    pub fn is_recorded(&self) -> bool {
        !self.acts.is_empty()
    }

    pub fn output(&self) -> Option<&Tensor> {
        self.acts.last()
    }

    /// Output of the layer marked `cam_target` (before any following activation).
    pub fn cam_activation(&self) -> Option<&Tensor> {
        self.cam
            .filter(|&c| c >= self.start)
            .map(|c| &self.acts[c + 1 - self.start])
    }

    /// Input of layer `index`.
    pub fn layer_input(&self, index: usize) -> Option<&Tensor> {
        index.checked_sub(self.start).and_then(|i| self.acts.get(i))
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Params,
    /// d(output · seed) / dA for the `cam_target` activation, when it lies on the tape.
    pub cam: Option<Tensor>,
    /// Gradient w.r.t. the tape's first activation, when requested.
    pub input: Option<Tensor>,
}

/// Runs the whole network on one sample.
pub fn forward(spec: &NetworkSpec, params: &Params, input: &Tensor) -> Result<(Tensor, Tape)> {
    forward_from(spec, params, 0, input)
}

/// Runs layers `start..` on an activation that is the input of layer `start`.
pub fn forward_from(spec: &NetworkSpec, params: &Params, start: usize, activation: &Tensor) -> Result<(Tensor, Tape)> {
    let shapes = spec.shapes()?;
    params.check(spec)?;
    if start > spec.layers.len() {
        return Err(Error::Network(format!("start layer {start} out of range")));
    }
    if activation.shape() != shapes[start].as_slice() {
        let (index, kind) = spec
            .layers
            .get(start)
            .map(|l| (start, l.kind()))
            .unwrap_or((start, "output"));
        return Err(Error::Shape {
            index,
            kind,
            message: format!("expects input {:?}, got {:?}", shapes[start], activation.shape()),
        });
    }
    let slots = spec.param_slots();
    let mut tape = Tape {
        start,
        acts: Vec::with_capacity(spec.layers.len() + 1 - start),
        cols: Vec::new(),
        argmax: Vec::new(),
        cam: spec.cam_index().ok(),
    };
    tape.acts.push(activation.clone());
    for index in start..spec.layers.len() {
        let layer = &spec.layers[index];
        let x = tape.acts.last().unwrap();
        let out_shape = &shapes[index + 1];
        let mut col = None;
        let mut arg = None;
        let y = match layer {
            Layer::Conv3d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let slot = slots[index].unwrap();
                let geom = ConvGeom::new(x.shape(), out_shape, *kernel, *stride, *padding);
                let c = geom.im2col(x.data());
                let y = geom.forward(&c, &params.tensors[slot], &params.tensors[slot + 1]);
                col = Some(c);
                y
            }
            Layer::Relu => x.map(|v| v.max(0.0)),
            Layer::Sigmoid => x.map(|v| crate::model::logistic(v as f64) as f32),
            Layer::MaxPool3d { window, stride } => {
                let (y, a) = maxpool_forward(x, out_shape, *window, *stride);
                arg = Some(a);
                y
            }
            Layer::GlobalAvgPool => {
                let c = x.shape()[0];
                let n = x.len() / c;
                let data = x
                    .data()
                    .chunks_exact(n)
                    .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
                    .collect();
                Tensor::from_raw(vec![c], data)
            }
            Layer::Dense { inputs, outputs } => {
                let slot = slots[index].unwrap();
                let w = params.tensors[slot].data();
                let b = params.tensors[slot + 1].data();
                let data = (0..*outputs)
                    .map(|o| (dot(&w[o * inputs..(o + 1) * inputs], x.data()) + b[o] as f64) as f32)
                    .collect();
                Tensor::from_raw(vec![*outputs], data)
            }
        };
        if y.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite activation after layer {index} ({})",
                layer.kind()
            )));
        }
        tape.cols.push(col);
        tape.argmax.push(arg);
        tape.acts.push(y);
    }
    Ok((tape.acts.last().unwrap().clone(), tape))
}

/// Runs layers `0..=last` and returns that layer's output.
pub fn forward_until(spec: &NetworkSpec, params: &Params, input: &Tensor, last: usize) -> Result<Tensor> {
    let mut truncated = spec.clone();
    truncated.layers.truncate(last + 1);
    let slots = spec.param_slots();
    let n_params = slots[..=last].iter().flatten().count() * 2;
    let sub = Params {
        tensors: params.tensors[..n_params].to_vec(),
    };
    forward(&truncated, &sub, input).map(|(y, _)| y)
}

/// Reverse pass seeded with `d loss / d output`.
pub fn backward(spec: &NetworkSpec, params: &Params, tape: &Tape, seed: &Tensor) -> Result<Gradients> {
    backward_impl(spec, params, tape, seed, false)
}

/// As [`backward`], additionally returning the gradient w.r.t. the tape input.
pub fn backward_with_input(spec: &NetworkSpec, params: &Params, tape: &Tape, seed: &Tensor) -> Result<Gradients> {
    backward_impl(spec, params, tape, seed, true)
}

/// Convenience for scalar-output networks.
pub fn backward_scalar(spec: &NetworkSpec, params: &Params, tape: &Tape, seed: f32) -> Result<Gradients> {
    backward(spec, params, tape, &Tensor::filled(&[1], seed))
}

fn backward_impl(
    spec: &NetworkSpec,
    params: &Params,
    tape: &Tape,
    seed: &Tensor,
    want_input: bool,
) -> Result<Gradients> {
    if !tape.is_recorded() {
        return Err(Error::TapeState);
    }
    let out = tape.output().unwrap();
    if seed.shape() != out.shape() {
        return Err(Error::Tensor(format!(
            "seed shape {:?} does not match output {:?}",
            seed.shape(),
            out.shape()
        )));
    }
    let slots = spec.param_slots();
    let mut grads = params.zeros_like();
    let mut cam = None;
    let mut g = seed.clone();
    for index in (tape.start..spec.layers.len()).rev() {
        let t = index - tape.start;
        if Some(index) == tape.cam {
            cam = Some(g.clone());
        }
        let x = &tape.acts[t];
        let y = &tape.acts[t + 1];
        let need_dx = index > tape.start || want_input;
        g = match &spec.layers[index] {
            Layer::Conv3d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let slot = slots[index].unwrap();
                let geom = ConvGeom::new(x.shape(), y.shape(), *kernel, *stride, *padding);
                let col = tape.cols[t].as_ref().unwrap();
                let (dw, db) = geom.param_grads(col, g.data());
                grads.tensors[slot] = Tensor::from_raw(params.tensors[slot].shape().to_vec(), dw);
                grads.tensors[slot + 1] = Tensor::from_raw(params.tensors[slot + 1].shape().to_vec(), db);
                if need_dx {
                    geom.input_grad(&params.tensors[slot], g.data())
                } else {
                    Tensor::zeros(x.shape())
                }
            }
            Layer::Relu => {
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                Tensor::from_raw(x.shape().to_vec(), data)
            }
            Layer::Sigmoid => {
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                Tensor::from_raw(x.shape().to_vec(), data)
            }
            Layer::MaxPool3d { .. } => {
                let arg = tape.argmax[t].as_ref().unwrap();
                let mut dx = Tensor::zeros(x.shape());
                let d = dx.data_mut();
                for (&a, &gv) in arg.iter().zip(g.data()) {
                    d[a as usize] += gv;
                }
                dx
            }
            Layer::GlobalAvgPool => {
                let c = x.shape()[0];
                let n = x.len() / c;
                let mut data = Vec::with_capacity(x.len());
                for &gv in g.data().iter().take(c) {
                    let v = (gv as f64 / n as f64) as f32;
                    data.extend(std::iter::repeat_n(v, n));
                }
                Tensor::from_raw(x.shape().to_vec(), data)
            }
            Layer::Dense { inputs, outputs } => {
                let slot = slots[index].unwrap();
                let w = params.tensors[slot].data();
                let mut dw = vec![0.0f32; inputs * outputs];
                for o in 0..*outputs {
                    axpy(&mut dw[o * inputs..(o + 1) * inputs], g.data()[o], x.data());
                }
                grads.tensors[slot] = Tensor::from_raw(vec![*outputs, *inputs], dw);
                grads.tensors[slot + 1] = Tensor::from_raw(vec![*outputs], g.data().to_vec());
                let data = (0..*inputs)
                    .map(|i| {
                        (0..*outputs)
                            .map(|o| w[o * inputs + i] as f64 * g.data()[o] as f64)
                            .sum::<f64>() as f32
                    })
                    .collect();
                Tensor::from_raw(x.shape().to_vec(), data)
            }
        };
    }
    Ok(Gradients {
        params: grads,
        cam,
        input: want_input.then_some(g),
    })
}

/// Index bookkeeping for one convolution: input `[ci, x, y, z]`, output `[co, ox, oy, oz]`.
struct ConvGeom {
    ci: usize,
    input: [usize; 3],
    co: usize,
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl ConvGeom {
    fn new(x: &[usize], y: &[usize], kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        ConvGeom {
            ci: x[0],
            input: [x[1], x[2], x[3]],
            co: y[0],
            output: [y[1], y[2], y[3]],
            kernel,
            stride,
            padding,
        }
    }

    fn rows(&self) -> usize {
        self.ci * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    /// Output index range `[lo, hi)` along `axis` whose tap `k` lands inside the input.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n, o) = (
            self.stride[axis],
            self.padding[axis],
            self.input[axis],
            self.output[axis],
        );
        // need 0 <= out*s + k - p < n
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if n + p > k { ((n + p - k - 1) / s + 1).min(o) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Visits every (row, output index, input index) triple with an in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [kx, ky, kz] = self.kernel;
        let [ix, iy, iz] = self.input;
        let [_, oy, oz] = self.output;
        let [sx, sy, sz] = self.stride;
        let [px, py, pz] = self.padding;
        let mut row = 0;
        for c in 0..self.ci {
            for a in 0..kx {
                let (ax0, ax1) = self.valid(0, a);
                for b in 0..ky {
                    let (by0, by1) = self.valid(1, b);
                    for d in 0..kz {
                        let (cz0, cz1) = self.valid(2, d);
                        for u in ax0..ax1 {
                            let xi = u * sx + a - px;
                            for v in by0..by1 {
                                let yi = v * sy + b - py;
                                let out_base = (u * oy + v) * oz;
                                let in_base = ((c * ix + xi) * iy + yi) * iz;
                                for w in cz0..cz1 {
                                    let zi = w * sz + d - pz;
                                    f(row, out_base + w, in_base + zi);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let n = self.cols();
        let mut col = vec![0.0f32; self.rows() * n];
        self.for_each_tap(|r, o, i| col[r * n + o] = x[i]);
        col
    }

    fn forward(&self, col: &[f32], w: &Tensor, b: &Tensor) -> Tensor {
        let (n, r) = (self.cols(), self.rows());
        let mut out = vec![0.0f32; self.co * n];
        let wd = w.data();
        for (blk, rows) in out.chunks_mut(4 * n).enumerate() {
            let c0 = blk * 4;
            for (i, row) in rows.chunks_exact_mut(n).enumerate() {
                row.fill(b.data()[c0 + i]);
            }
            if rows.len() == 4 * n {
                let (o01, o23) = rows.split_at_mut(2 * n);
                let (o0, o1) = o01.split_at_mut(n);
                let (o2, o3) = o23.split_at_mut(n);
                for k in 0..r {
                    let ws = [
                        wd[c0 * r + k],
                        wd[(c0 + 1) * r + k],
                        wd[(c0 + 2) * r + k],
                        wd[(c0 + 3) * r + k],
                    ];
                    let x = &col[k * n..(k + 1) * n];
                    for ((((a, b), c), d), &xv) in o0
                        .iter_mut()
                        .zip(o1.iter_mut())
                        .zip(o2.iter_mut())
                        .zip(o3.iter_mut())
                        .zip(x)
                    {
                        *a += ws[0] * xv;
                        *b += ws[1] * xv;
                        *c += ws[2] * xv;
                        *d += ws[3] * xv;
                    }
                }
            } else {
                for (i, row) in rows.chunks_exact_mut(n).enumerate() {
                    let wrow = &wd[(c0 + i) * r..(c0 + i + 1) * r];
                    for (k, &wv) in wrow.iter().enumerate() {
                        axpy(row, wv, &col[k * n..(k + 1) * n]);
                    }
                }
            }
        }
        let mut shape = vec![self.co];
        shape.extend_from_slice(&self.output);
        Tensor::from_raw(shape, out)
    }

    fn param_grads(&self, col: &[f32], dy: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let (n, r) = (self.cols(), self.rows());
        let mut dw = vec![0.0f32; self.co * r];
        let mut db = vec![0.0f32; self.co];
        for co in 0..self.co {
            db[co] = dy[co * n..(co + 1) * n].iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        let mut co = 0;
        while co + 4 <= self.co {
            let g = [0, 1, 2, 3].map(|i| &dy[(co + i) * n..(co + i + 1) * n]);
            for k in 0..r {
                let d = dot4(g, &col[k * n..(k + 1) * n]);
                for i in 0..4 {
                    dw[(co + i) * r + k] = d[i] as f32;
                }
            }
            co += 4;
        }
        for co in co..self.co {
            let g = &dy[co * n..(co + 1) * n];
            for k in 0..r {
                dw[co * r + k] = dot(g, &col[k * n..(k + 1) * n]) as f32;
            }
        }
        (dw, db)
    }

    fn input_grad(&self, w: &Tensor, dy: &[f32]) -> Tensor {
        let (n, r) = (self.cols(), self.rows());
        let wd = w.data();
        let mut dcol = vec![0.0f32; r * n];
        for (k, dc) in dcol.chunks_exact_mut(n).enumerate() {
            let mut co = 0;
            while co + 4 <= self.co {
                let ws = [0, 1, 2, 3].map(|i| wd[(co + i) * r + k]);
                let g = [0, 1, 2, 3].map(|i| &dy[(co + i) * n..(co + i + 1) * n]);
                for ((((d, a0), a1), a2), a3) in dc.iter_mut().zip(g[0]).zip(g[1]).zip(g[2]).zip(g[3]) {
                    *d += ws[0] * a0 + ws[1] * a1 + ws[2] * a2 + ws[3] * a3;
                }
                co += 4;
            }
            for co in co..self.co {
                axpy(dc, wd[co * r + k], &dy[co * n..(co + 1) * n]);
            }
        }
        let mut shape = vec![self.ci];
        shape.extend_from_slice(&self.input);
        let mut dx = vec![0.0f32; shape.iter().product()];
        self.for_each_tap(|row, o, i| dx[i] += dcol[row * n + o]);
        Tensor::from_raw(shape, dx)
    }
}

fn maxpool_forward(x: &Tensor, out_shape: &[usize], window: [usize; 3], stride: [usize; 3]) -> (Tensor, Vec<u32>) {
    let [c, ix, iy, iz] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [ox, oy, oz] = [out_shape[1], out_shape[2], out_shape[3]];
    let xd = x.data();
    let mut out = Vec::with_capacity(c * ox * oy * oz);
    let mut arg = Vec::with_capacity(out.capacity());
    for ch in 0..c {
        for u in 0..ox {
            for v in 0..oy {
                for w in 0..oz {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for a in 0..window[0] {
                        for b in 0..window[1] {
                            for d in 0..window[2] {
                                let i =
                                    ((ch * ix + u * stride[0] + a) * iy + v * stride[1] + b) * iz + w * stride[2] + d;
                                if xd[i] > best {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (Tensor::from_raw(out_shape.to_vec(), out), arg)
}

#[inline]
pub(crate) fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight f32 lanes folded into an f64 total.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut total: f64 = lanes.iter().map(|&v| v as f64).sum();
    for (x, y) in ra.iter().zip(rb) {
        total += *x as f64 * *y as f64;
    }
    total
}

/// Four dot products sharing the right-hand side, each folded into f64.
#[inline]
fn dot4(a: [&[f32]; 4], b: &[f32]) -> [f64; 4] {
    let mut total = [0.0f64; 4];
    let n = b.len();
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let bs = &b[start..end];
        for i in 0..4 {
            let xs = &a[i][start..end];
            let mut lanes = [0.0f32; 8];
            let (cx, cb) = (xs.chunks_exact(8), bs.chunks_exact(8));
            let (rx, rb) = (cx.remainder(), cb.remainder());
            for (x, y) in cx.zip(cb) {
                for l in 0..8 {
                    lanes[l] += x[l] * y[l];
                }
            }
            let mut t: f64 = lanes.iter().map(|&v| v as f64).sum();
            for (x, y) in rx.iter().zip(rb) {
                t += *x as f64 * *y as f64;
            }
            total[i] += t;
        }
        start = end;
    }
    total
}
