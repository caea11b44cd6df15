//! Shared oracles for the integration tests.
#![allow(dead_code)]

use dtm_core::model::{logistic, ImageNetwork, Label, TransformationModel};
use dtm_core::nn::{self, Layer, NetworkSpec, Params};
use dtm_core::xai;
use dtm_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Glorot weights plus nonzero random biases.
pub fn random_params(spec: &NetworkSpec, seed: u64) -> Params {
    let mut params = spec.init_params(seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for t in params.tensors.iter_mut().filter(|t| t.rank() == 1) {
        *t = uniform_tensor(t.shape(), -0.3, 0.3, &mut r);
    }
    params
}

/// Straightforward f64 evaluation of a network.
///
/// Also returns the pattern of ReLU signs and max-pool winners so callers can
/// tell whether a perturbation crossed a kink.
pub fn reference_forward(spec: &NetworkSpec, params: &[Vec<f64>], input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let shapes = spec.shapes().unwrap();
    let mut x = input.to_vec();
    let mut pattern = Vec::new();
    let mut slot = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        let inp = &shapes[i];
        let out = &shapes[i + 1];
        x = match layer {
            Layer::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (w, b) = (&params[slot], &params[slot + 1]);
                slot += 2;
                let mut y = vec![0.0; out.iter().product()];
                for o in 0..*out_channels {
                    for u in 0..out[1] {
                        for v in 0..out[2] {
                            for s in 0..out[3] {
                                let mut acc = b[o];
                                for c in 0..*in_channels {
                                    for a in 0..kernel[0] {
                                        for bb in 0..kernel[1] {
                                            for d in 0..kernel[2] {
                                                let px = (u * stride[0] + a) as isize - padding[0] as isize;
                                                let py = (v * stride[1] + bb) as isize - padding[1] as isize;
                                                let pz = (s * stride[2] + d) as isize - padding[2] as isize;
                                                if px < 0
                                                    || py < 0
                                                    || pz < 0
                                                    || px >= inp[1] as isize
                                                    || py >= inp[2] as isize
                                                    || pz >= inp[3] as isize
                                                {
                                                    continue;
                                                }
                                                let xi = ((c * inp[1] + px as usize) * inp[2] + py as usize) * inp[3]
                                                    + pz as usize;
                                                let wi = (((o * in_channels + c) * kernel[0] + a) * kernel[1] + bb)
                                                    * kernel[2]
                                                    + d;
                                                acc += w[wi] * x[xi];
                                            }
                                        }
                                    }
                                }
                                y[((o * out[1] + u) * out[2] + v) * out[3] + s] = acc;
                            }
                        }
                    }
                }
                y
            }
            Layer::Relu => {
                pattern.extend(x.iter().map(|&v| (v > 0.0) as usize));
                x.iter().map(|&v| v.max(0.0)).collect()
            }
            Layer::Sigmoid => x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
            Layer::MaxPool3d { window, stride } => {
                let mut y = Vec::with_capacity(out.iter().product());
                for c in 0..out[0] {
                    for u in 0..out[1] {
                        for v in 0..out[2] {
                            for s in 0..out[3] {
                                let mut best = (f64::NEG_INFINITY, 0);
                                for a in 0..window[0] {
                                    for bb in 0..window[1] {
                                        for d in 0..window[2] {
                                            let xi = ((c * inp[1] + u * stride[0] + a) * inp[2] + v * stride[1] + bb)
                                                * inp[3]
                                                + s * stride[2]
                                                + d;
                                            if x[xi] > best.0 {
                                                best = (x[xi], xi);
                                            }
                                        }
                                    }
                                }
                                pattern.push(best.1);
                                y.push(best.0);
                            }
                        }
                    }
                }
                y
            }
            Layer::GlobalAvgPool => {
                let per = x.len() / inp[0];
                x.chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect()
            }
            Layer::Dense { inputs, outputs } => {
                let (w, b) = (&params[slot], &params[slot + 1]);
                slot += 2;
                (0..*outputs)
                    .map(|o| b[o] + (0..*inputs).map(|i| w[o * inputs + i] * x[i]).sum::<f64>())
                    .collect()
            }
        };
    }
    (x, pattern)
}

#[derive(Debug, Default, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub failures: Vec<String>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel = self.max_rel.max(other.max_rel);
        self.failures.extend(other.failures);
    }
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL: f64 = 1e-3;
pub const FD_FLOOR: f64 = 1e-6;

fn compare(name: &str, analytic: f64, numeric: f64, report: &mut GradCheck) {
    let scale = analytic.abs().max(numeric.abs());
    if scale <= FD_FLOOR {
        return;
    }
    report.checked += 1;
    let rel = (analytic - numeric).abs() / scale;
    report.max_rel = report.max_rel.max(rel);
    if rel > FD_REL && report.failures.len() < 10 {
        report
            .failures
            .push(format!("{name}: analytic {analytic:.6e} numeric {numeric:.6e}"));
    }
}

/// Analytic gradients of `L = Σ c · f(x)` against central differences of the
/// f64 reference. `limit` caps the number of coordinates probed per tensor.
pub fn check_network(spec: &NetworkSpec, params: &Params, input: &Tensor, seed: u64, limit: usize) -> GradCheck {
    let mut r = rng(seed);
    let (out, tape) = nn::forward(spec, params, input).unwrap();
    let c = uniform_tensor(out.shape(), -1.0, 1.0, &mut r);
    let grads = nn::backward_with_input(spec, params, &tape, &c).unwrap();
    let c64: Vec<f64> = c.data().iter().map(|&v| v as f64).collect();
    let p64: Vec<Vec<f64>> = params
        .tensors
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let x64: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let loss = |p: &[Vec<f64>], x: &[f64]| {
        let (y, pattern) = reference_forward(spec, p, x);
        (y.iter().zip(&c64).map(|(a, b)| a * b).sum::<f64>(), pattern)
    };

    let mut report = GradCheck::default();
    let (y_ref, base_pattern) = reference_forward(spec, &p64, &x64);
    for (a, b) in out.data().iter().zip(&y_ref) {
        if (*a as f64 - b).abs() > 1e-5 * b.abs().max(1.0) {
            report.failures.push(format!("forward mismatch: {a} vs {b}"));
            return report;
        }
    }

    // probes: (tensor index or None for the input, coordinate)
    let mut probes: Vec<(Option<usize>, usize)> = Vec::new();
    for (t, values) in p64.iter().enumerate() {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.shuffle(&mut r);
        probes.extend(idx.into_iter().take(limit).map(|i| (Some(t), i)));
    }
    let mut idx: Vec<usize> = (0..x64.len()).collect();
    idx.shuffle(&mut r);
    probes.extend(idx.into_iter().take(limit).map(|i| (None, i)));

    for (t, i) in probes {
        let eval = |delta: f64| {
            let mut p = p64.clone();
            let mut x = x64.clone();
            match t {
                Some(t) => p[t][i] += delta,
                None => x[i] += delta,
            }
            loss(&p, &x)
        };
        let (lp, pp) = eval(FD_STEP);
        let (lm, pm) = eval(-FD_STEP);
        if pp != base_pattern || pm != base_pattern {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let (analytic, name) = match t {
            Some(t) => (grads.params.tensors[t].data()[i] as f64, format!("param {t}[{i}]")),
            None => (grads.input.as_ref().unwrap().data()[i] as f64, format!("input[{i}]")),
        };
        compare(&name, analytic, numeric, &mut report);
    }
    report
}

/// Distinct values spaced well beyond the finite-difference step, in random order.
pub fn separated_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.01 + 0.005).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Values bounded away from zero with random signs.
pub fn off_zero_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f32 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// One finite-difference sweep over every layer type for `seed`.
pub fn layer_suite(seed: u64) -> Vec<(&'static str, GradCheck)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, spec: NetworkSpec, input: Tensor, limit: usize| {
        let params = random_params(&spec, seed);
        out.push((name, check_network(&spec, &params, &input, seed, limit)));
    };

    run(
        "conv3d",
        NetworkSpec {
            input: [2, 5, 4, 3],
            layers: vec![Layer::conv(2, 3, 3, 1)],
        },
        uniform_tensor(&[2, 5, 4, 3], -1.0, 1.0, &mut r),
        usize::MAX,
    );
    run(
        "conv3d strided",
        NetworkSpec {
            input: [2, 7, 6, 5],
            layers: vec![Layer::Conv3d {
                in_channels: 2,
                out_channels: 3,
                kernel: [3, 2, 3],
                stride: [2, 2, 1],
                padding: [1, 0, 1],
                cam_target: true,
            }],
        },
        uniform_tensor(&[2, 7, 6, 5], -1.0, 1.0, &mut r),
        usize::MAX,
    );
    run(
        "relu",
        NetworkSpec {
            input: [2, 4, 3, 3],
            layers: vec![Layer::Relu],
        },
        off_zero_tensor(&[2, 4, 3, 3], &mut r),
        usize::MAX,
    );
    run(
        "maxpool3d",
        NetworkSpec {
            input: [2, 4, 4, 2],
            layers: vec![Layer::maxpool(2)],
        },
        separated_tensor(&[2, 4, 4, 2], &mut r),
        usize::MAX,
    );
    run(
        "maxpool3d overlapping",
        NetworkSpec {
            input: [1, 5, 5, 3],
            layers: vec![Layer::MaxPool3d {
                window: [3, 3, 2],
                stride: [2, 2, 1],
            }],
        },
        separated_tensor(&[1, 5, 5, 3], &mut r),
        usize::MAX,
    );
    run(
        "global_average_pool",
        NetworkSpec {
            input: [3, 4, 3, 2],
            layers: vec![Layer::GlobalAvgPool],
        },
        uniform_tensor(&[3, 4, 3, 2], -1.0, 1.0, &mut r),
        usize::MAX,
    );
    run(
        "dense",
        NetworkSpec {
            input: [3, 2, 2, 1],
            layers: vec![Layer::Dense { inputs: 12, outputs: 4 }],
        },
        uniform_tensor(&[3, 2, 2, 1], -1.0, 1.0, &mut r),
        usize::MAX,
    );
    run(
        "sigmoid",
        NetworkSpec {
            input: [2, 3, 3, 2],
            layers: vec![Layer::Sigmoid],
        },
        uniform_tensor(&[2, 3, 3, 2], -3.0, 3.0, &mut r),
        usize::MAX,
    );
    run(
        "default network",
        NetworkSpec::default_for([8, 8, 4]),
        uniform_tensor(&[1, 8, 8, 4], -2.0, 2.0, &mut r),
        60,
    );
    out
}

/// Compares the factorization `s_k σ(h)(1 − σ(h)) ∂ϑ₀/∂A` against numerical
/// `∂p_k/∂A` at up to `voxels` positive activation entries.
///
/// The step is half the activation value, so the following ReLU never flips
/// and `ϑ₀` stays exactly linear along the probe.
pub fn gradcam_identity(
    member: &TransformationModel,
    volume: &Tensor,
    tabular: Option<&[f64]>,
    k: Label,
    voxels: usize,
    seed: u64,
) -> GradCheck {
    let net = member.network().unwrap();
    let cam = net.spec.cam_index().unwrap();
    let shift = member.shift(tabular).unwrap();
    let (theta, tape) = net.intercept_with_tape(volume).unwrap();
    let activation = tape.cam_activation().unwrap().clone();
    let dtheta = nn::backward_scalar(&net.spec, &net.params, &tape, 1.0)
        .unwrap()
        .cam
        .unwrap();
    let h = theta + shift;
    let factor = xai::class_sign(k) * logistic(h) * (1.0 - logistic(h));
    let detail = xai::gradcam_detail(member, volume, tabular, k).unwrap();

    let p_at = |a: &Tensor| {
        let (theta, _) = nn::forward_from(&net.spec, &net.params, cam + 1, a).unwrap();
        xai::class_probability(theta.data()[0] as f64 + shift, k)
    };
    let mut candidates: Vec<usize> = (0..activation.len()).filter(|&i| activation.data()[i] > 0.1).collect();
    candidates.shuffle(&mut rng(seed));
    let mut report = GradCheck::default();
    for &i in candidates.iter().take(voxels) {
        let delta = 0.5 * activation.data()[i];
        let mut plus = activation.clone();
        plus.data_mut()[i] += delta;
        let mut minus = activation.clone();
        minus.data_mut()[i] -= delta;
        let step = plus.data()[i] as f64 - minus.data()[i] as f64;
        let numeric = (p_at(&plus) - p_at(&minus)) / step;
        let analytic = factor * dtheta.data()[i] as f64;
        compare(&format!("A[{i}]"), analytic, numeric, &mut report);
        if (detail.gradient[i] - analytic).abs() > 1e-12 * analytic.abs().max(1e-300) {
            report
                .failures
                .push(format!("A[{i}]: detail gradient {} vs {analytic}", detail.gradient[i]));
        }
    }
    report
}

/// Small CI network with a mixed-sign output layer so both classes see mass.
pub fn small_image_network(extents: [usize; 3], seed: u64) -> ImageNetwork {
    let spec = NetworkSpec::default_for(extents);
    let params = random_params(&spec, seed);
    ImageNetwork::new(spec, params).unwrap()
}
