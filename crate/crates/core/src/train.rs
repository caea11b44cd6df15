//! Fitting single models and weighted ensembles.
//!
//! Image models are trained by minibatch Adam on the mean NLL, with early
//! stopping on an inner validation split. Image-free models are smooth convex
//! problems and are solved to convergence with L-BFGS. Ensembles average the
//! members' transformation values with simplex weights tuned on validation NLL.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    logistic, logit, nll_and_grad, outcome_probabilities, ImageNetwork, Label, OutcomeDistribution,
    TransformationModel, Variant,
};
use crate::nn::{self, Layer, NetworkSpec, Params};
use crate::optim::{lbfgs, Adam, LbfgsOptions};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Share of each training portion held out for early stopping, weights and thresholds.
    pub validation_fraction: f64,
    /// Iteration cap for the full-batch solver used by image-free variants.
    pub max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 150,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 20,
            seed: 0,
            validation_fraction: 0.2,
            max_iter: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && self.patience > 0
            && self.epsilon > 0.0
            && self.max_iter > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if !positive {
            return Err(Error::Config(format!(
                "training hyperparameters must be positive: {self:?}"
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "validation fraction must lie in (0, 0.5], got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Borrowed inputs of one patient.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub volume: Option<&'a Tensor>,
    pub tabular: Option<&'a [f64]>,
    pub label: Label,
}

fn check_examples(examples: &[Example], what: &str) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::DegenerateData(format!("{what} split is empty")));
    }
    let pos = examples.iter().filter(|e| e.label.is_positive()).count();
    if pos == 0 || pos == examples.len() {
        return Err(Error::DegenerateData(format!(
            "{what} split contains a single outcome class"
        )));
    }
    Ok(())
}

fn tabular_width(variant: Variant, examples: &[Example]) -> Result<usize> {
    if !variant.uses_tabular() {
        return Ok(0);
    }
    let width = examples[0]
        .tabular
        .ok_or(Error::MissingModality {
            variant: variant.name(),
            modality: "tabular features",
        })?
        .len();
    if examples.iter().any(|e| e.tabular.map(<[f64]>::len) != Some(width)) {
        return Err(Error::Config("tabular rows differ in width or are missing".into()));
    }
    Ok(width)
}

/// Mean NLL of `model` on `examples`.
pub fn mean_nll(model: &TransformationModel, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for e in examples {
        let h = model.transformation_value(e.volume, e.tabular)?;
        total += nll_and_grad(h, e.label).0;
    }
    Ok(total / examples.len() as f64)
}

/// A trained member and its loss trajectory.
#[derive(Debug, Clone)]
pub struct MemberFit {
    pub model: TransformationModel,
    /// Training NLL before the first update and after the last.
    pub initial_nll: f64,
    pub final_nll: f64,
    /// Mean minibatch loss per epoch (image variants) or the solver trace endpoints.
    pub epoch_losses: Vec<f64>,
    pub validation_nll: Vec<f64>,
    pub best_epoch: usize,
}

/// Fits one model of `variant` on `train`.
///
/// `validation` drives early stopping for image variants. `network` is
/// required for CI and CI-LS; `seed` initializes weights and batch order.
pub fn train_member(
    variant: Variant,
    network: Option<&NetworkSpec>,
    train: &[Example],
    validation: Option<&[Example]>,
    config: &TrainConfig,
    seed: u64,
) -> Result<MemberFit> {
    config.validate()?;
    check_examples(train, "training")?;
    let width = tabular_width(variant, train)?;
    if variant.uses_image() {
        let spec = network.ok_or(Error::MissingModality {
            variant: variant.name(),
            modality: "a network spec",
        })?;
        if train.iter().any(|e| e.volume.is_none()) {
            return Err(Error::MissingModality {
                variant: variant.name(),
                modality: "an image volume",
            });
        }
        train_image_member(variant, spec, width, train, validation, config, seed)
    } else {
        train_linear_member(variant, width, train, config)
    }
}

fn train_linear_member(variant: Variant, width: usize, train: &[Example], config: &TrainConfig) -> Result<MemberFit> {
    let n = train.len() as f64;
    let objective = |theta: &[f64]| {
        let mut value = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for e in train {
            let shift: f64 = e
                .tabular
                .map(|x| x.iter().zip(&theta[1..]).map(|(a, b)| a * b).sum())
                .unwrap_or(0.0);
            let (l, dh) = nll_and_grad(theta[0] + shift, e.label);
            value += l;
            grad[0] += dh;
            if let Some(x) = e.tabular.filter(|_| width > 0) {
                for (g, xv) in grad[1..].iter_mut().zip(x) {
                    *g += dh * xv;
                }
            }
        }
        (value / n, grad.into_iter().map(|g| g / n).collect())
    };
    let prevalence = train.iter().filter(|e| !e.label.is_positive()).count() as f64 / n;
    let mut start = vec![0.0; 1 + width];
    start[0] = logit(prevalence);
    let initial = objective(&start).0;
    let opts = LbfgsOptions {
        max_iter: config.max_iter,
        grad_tol: 1e-10,
        memory: 10,
    };
    let res = lbfgs(objective, start, &opts);
    if res.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("full-batch solver diverged".into()));
    }
    if !res.converged {
        log::warn!(
            "{variant}: solver stopped after {} iterations without reaching tolerance (possible separation)",
            res.iterations
        );
    }
    let model = if variant.uses_tabular() {
        TransformationModel::si_ls(res.x[0], res.x[1..].to_vec())?
    } else {
        TransformationModel::si(res.x[0])?
    };
    Ok(MemberFit {
        model,
        initial_nll: initial,
        final_nll: res.value,
        epoch_losses: vec![initial, res.value],
        validation_nll: Vec::new(),
        best_epoch: res.iterations,
    })
}

struct BatchGrad {
    loss: f64,
    params: Params,
    beta: Vec<f64>,
}

fn example_grad(model: &TransformationModel, e: &Example, scale: f64) -> Result<BatchGrad> {
    let net = model.network().unwrap();
    let (out, tape) = net.intercept_with_tape(e.volume.unwrap())?;
    let shift = model.shift(e.tabular)?;
    let (loss, dh) = nll_and_grad(out + shift, e.label);
    let g = nn::backward_scalar(&net.spec, &net.params, &tape, (dh * scale) as f32)?;
    let beta = match (model.beta(), e.tabular) {
        (Some(_), Some(x)) => x.iter().map(|v| v * dh * scale).collect(),
        _ => Vec::new(),
    };
    Ok(BatchGrad {
        loss,
        params: g.params,
        beta,
    })
}

fn output_bias_slot(spec: &NetworkSpec) -> Option<usize> {
    let slots = spec.param_slots();
    spec.layers
        .iter()
        .enumerate()
        .rev()
        .find(|(_, l)| matches!(l, Layer::Dense { outputs: 1, .. }))
        .and_then(|(i, _)| slots[i])
        .map(|s| s + 1)
}

fn train_image_member(
    variant: Variant,
    spec: &NetworkSpec,
    width: usize,
    train: &[Example],
    validation: Option<&[Example]>,
    config: &TrainConfig,
    seed: u64,
) -> Result<MemberFit> {
    let mut net = ImageNetwork::initialized(spec.clone(), seed)?;
    // start from the null model: output bias at the training log-odds of favorable
    let prevalence = train.iter().filter(|e| !e.label.is_positive()).count() as f64 / train.len() as f64;
    if let Some(slot) = output_bias_slot(spec) {
        net.params.tensors[slot] = Tensor::filled(&[1], logit(prevalence) as f32);
    }
    let beta = variant.uses_tabular().then(|| vec![0.0; width]);
    let mut model = TransformationModel::new(variant, None, Some(net), beta)?;

    let n_params = model.network().unwrap().params.count();
    let mut adam = Adam::new(
        n_params + width,
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0000_0000_0000);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let initial_nll = mean_nll(&model, train)?;
    let mut best = (f64::INFINITY, model.clone(), 0);
    let mut stale = 0;
    let mut epoch_losses = Vec::new();
    let mut validation_nll = Vec::new();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let grads = batch
                .par_iter()
                .map(|&i| example_grad(&model, &train[i], scale))
                .collect::<Result<Vec<_>>>()?;
            let mut total = grads[0].params.zeros_like();
            let mut beta_grad = vec![0.0; width];
            for g in &grads {
                epoch_loss += g.loss;
                total.add_scaled(&g.params, 1.0);
                for (a, b) in beta_grad.iter_mut().zip(&g.beta) {
                    *a += b;
                }
            }
            adam.tick();
            let mut offset = 0;
            let net = model.network_mut().unwrap();
            for (p, g) in net.params.tensors.iter_mut().zip(&total.tensors) {
                adam.apply_f32(offset, p.data_mut(), g.data());
                offset += p.len();
            }
            if let Some(beta) = model.beta_mut() {
                adam.apply_f64(offset, beta, &beta_grad);
            }
            if model
                .network()
                .unwrap()
                .params
                .tensors
                .iter()
                .any(|t| t.data().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Numeric(format!("non-finite weights in epoch {epoch}")));
            }
        }
        epoch_losses.push(epoch_loss / train.len() as f64);

        let score = match validation {
            Some(v) if !v.is_empty() => mean_nll(&model, v)?,
            _ => epoch_losses[epoch - 1],
        };
        validation_nll.push(score);
        if score < best.0 {
            best = (score, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (_, mut model, mut best_epoch) = best;
    let mut final_nll = mean_nll(&model, train)?;
    if final_nll > initial_nll {
        // never hand back something worse than the starting point
        let mut net = ImageNetwork::initialized(spec.clone(), seed)?;
        if let Some(slot) = output_bias_slot(spec) {
            net.params.tensors[slot] = Tensor::filled(&[1], logit(prevalence) as f32);
        }
        model = TransformationModel::new(
            variant,
            None,
            Some(net),
            variant.uses_tabular().then(|| vec![0.0; width]),
        )?;
        final_nll = initial_nll;
        best_epoch = 0;
    }
    Ok(MemberFit {
        model,
        initial_nll,
        final_nll,
        epoch_losses,
        validation_nll,
        best_epoch,
    })
}

/// Members sharing a variant, combined by simplex weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    members: Vec<TransformationModel>,
    weights: Vec<f64>,
    /// Classification threshold on p1, when one was selected.
    pub threshold: Option<f64>,
}

pub const SIMPLEX_TOL: f64 = 1e-9;

impl EnsembleModel {
    pub fn new(members: Vec<TransformationModel>, weights: Vec<f64>) -> Result<Self> {
        if members.is_empty() || members.len() != weights.len() {
            return Err(Error::Config(format!(
                "{} members need as many weights, got {}",
                members.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Config(format!("weights are not on the simplex: {weights:?}")));
        }
        let v = members[0].variant();
        let width = members[0].beta().map(<[f64]>::len);
        if members
            .iter()
            .any(|m| m.variant() != v || m.beta().map(<[f64]>::len) != width)
        {
            return Err(Error::Config(
                "ensemble members must share variant and input encoding".into(),
            ));
        }
        Ok(EnsembleModel {
            members,
            weights,
            threshold: None,
        })
    }

    pub fn single(model: TransformationModel) -> Self {
        EnsembleModel {
            members: vec![model],
            weights: vec![1.0],
            threshold: None,
        }
    }

    pub fn variant(&self) -> Variant {
        self.members[0].variant()
    }

    pub fn members(&self) -> &[TransformationModel] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member_values(&self, volume: Option<&Tensor>, tabular: Option<&[f64]>) -> Result<Vec<f64>> {
        self.members
            .iter()
            .map(|m| m.transformation_value(volume, tabular))
            .collect()
    }

    /// `Σ_m w_m h_m(input)`.
    pub fn transformation_value(&self, volume: Option<&Tensor>, tabular: Option<&[f64]>) -> Result<f64> {
        let hs = self.member_values(volume, tabular)?;
        Ok(hs.iter().zip(&self.weights).map(|(h, w)| h * w).sum())
    }

    pub fn predict(&self, volume: Option<&Tensor>, tabular: Option<&[f64]>) -> Result<OutcomeDistribution> {
        outcome_probabilities(self.transformation_value(volume, tabular)?)
    }

    /// Weighted shift coefficients `Σ w_m β_m`, plus `Σ w_m ϑ₀,m` for simple intercepts.
    pub fn coefficients(&self) -> Result<EnsembleCoefficients> {
        let v = self.variant();
        if !v.uses_tabular() {
            return Err(Error::UnsupportedVariant {
                variant: v.name(),
                what: "shift coefficients",
            });
        }
        let width = self.members[0].beta().unwrap().len();
        let mut beta = vec![0.0; width];
        let mut intercept = (!v.uses_image()).then_some(0.0);
        for (m, w) in self.members.iter().zip(&self.weights) {
            for (b, mb) in beta.iter_mut().zip(m.beta().unwrap()) {
                *b += w * mb;
            }
            if let (Some(i), Some(t)) = (intercept.as_mut(), m.intercept()) {
                *i += w * t;
            }
        }
        Ok(EnsembleCoefficients { intercept, beta })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleCoefficients {
    pub intercept: Option<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleFit {
    pub ensemble: EnsembleModel,
    pub members: Vec<MemberFit>,
}

/// Trains one member per seed and tunes their weights on `validation`.
pub fn fit_ensemble(
    variant: Variant,
    network: Option<&NetworkSpec>,
    train: &[Example],
    validation: &[Example],
    seeds: &[u64],
    config: &TrainConfig,
) -> Result<EnsembleFit> {
    if seeds.is_empty() {
        return Err(Error::Config("an ensemble needs at least one member seed".into()));
    }
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(Error::Config(format!("member seeds must be distinct: {seeds:?}")));
    }
    let fits = seeds
        .par_iter()
        .map(|&s| train_member(variant, network, train, Some(validation), config, s))
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<TransformationModel> = fits.iter().map(|f| f.model.clone()).collect();
    let weights = if models.len() == 1 {
        vec![1.0]
    } else {
        let (hs, labels) = validation_values(&models, validation)?;
        optimize_ensemble_weights(&hs, &labels)?
    };
    Ok(EnsembleFit {
        ensemble: EnsembleModel::new(models, weights)?,
        members: fits,
    })
}

/// Member transformation values on `examples`, one row per member.
pub fn validation_values(models: &[TransformationModel], examples: &[Example]) -> Result<(Vec<Vec<f64>>, Vec<Label>)> {
    let hs = models
        .iter()
        .map(|m| {
            examples
                .iter()
                .map(|e| m.transformation_value(e.volume, e.tabular))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((hs, examples.iter().map(|e| e.label).collect()))
}

/// Mean NLL of the combination `Σ w_m h_m` over the validation samples.
pub fn weighted_nll(member_values: &[Vec<f64>], labels: &[Label], weights: &[f64]) -> f64 {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let h: f64 = member_values.iter().zip(weights).map(|(hs, w)| w * hs[i]).sum();
            nll_and_grad(h, labels[i]).0
        })
        .sum::<f64>()
        / n as f64
}

fn softmax(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Simplex weights minimizing validation NLL of the weighted transformation.
///
/// Weights are a softmax of free logits optimized from the uniform point.
/// The result is never worse than the uniform weights or any single member;
/// exact ties keep the uniform weights.
pub fn optimize_ensemble_weights(member_values: &[Vec<f64>], labels: &[Label]) -> Result<Vec<f64>> {
    let m = member_values.len();
    if m == 0 {
        return Err(Error::Config("no ensemble members".into()));
    }
    if labels.is_empty() {
        return Err(Error::DegenerateData("validation split is empty".into()));
    }
    if member_values.iter().any(|h| h.len() != labels.len()) {
        return Err(Error::Config("member values and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateData(
            "validation split contains a single outcome class".into(),
        ));
    }
    if m == 1 {
        return Ok(vec![1.0]);
    }
    let n = labels.len() as f64;
    let objective = |theta: &[f64]| {
        let w = softmax(theta);
        let mut value = 0.0;
        let mut dw = vec![0.0; m];
        for (i, &y) in labels.iter().enumerate() {
            let h: f64 = member_values.iter().zip(&w).map(|(hs, wm)| wm * hs[i]).sum();
            let (l, dh) = nll_and_grad(h, y);
            value += l;
            for (d, hs) in dw.iter_mut().zip(member_values) {
                *d += dh * hs[i];
            }
        }
        dw.iter_mut().for_each(|d| *d /= n);
        let avg: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        let grad = w.iter().zip(&dw).map(|(wk, dk)| wk * (dk - avg)).collect();
        (value / n, grad)
    };
    let res = lbfgs(
        objective,
        vec![0.0; m],
        &LbfgsOptions {
            max_iter: 500,
            grad_tol: 1e-12,
            memory: 10,
        },
    );

    let uniform = vec![1.0 / m as f64; m];
    let mut best_w = uniform.clone();
    let mut best = weighted_nll(member_values, labels, &uniform);
    let tuned = softmax(&res.x);
    let tuned_nll = weighted_nll(member_values, labels, &tuned);
    if tuned_nll < best - 1e-12 {
        best = tuned_nll;
        best_w = tuned;
    }
    for k in 0..m {
        let mut e = vec![0.0; m];
        e[k] = 1.0;
        let v = weighted_nll(member_values, labels, &e);
        if v < best - 1e-12 {
            best = v;
            best_w = e;
        }
    }
    let s: f64 = best_w.iter().sum();
    Ok(best_w.into_iter().map(|w| w / s).collect())
}

// --- model files -----------------------------------------------------------

pub const MODEL_MAGIC: &[u8; 4] = b"DTM1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_triple(out: &mut Vec<u8>, v: &[usize; 3]) {
    v.iter().for_each(|&x| put_u32(out, x));
}

fn encode_spec(out: &mut Vec<u8>, spec: &NetworkSpec) {
    spec.input.iter().for_each(|&x| put_u32(out, x));
    put_u32(out, spec.layers.len());
    for layer in &spec.layers {
        match layer {
            Layer::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                cam_target,
            } => {
                out.push(0);
                put_u32(out, *in_channels);
                put_u32(out, *out_channels);
                put_triple(out, kernel);
                put_triple(out, stride);
                put_triple(out, padding);
                out.push(*cam_target as u8);
            }
            Layer::Relu => out.push(1),
            Layer::MaxPool3d { window, stride } => {
                out.push(2);
                put_triple(out, window);
                put_triple(out, stride);
            }
            Layer::GlobalAvgPool => out.push(3),
            Layer::Dense { inputs, outputs } => {
                out.push(4);
                put_u32(out, *inputs);
                put_u32(out, *outputs);
            }
            Layer::Sigmoid => out.push(5),
        }
    }
}

/// Binary ensemble file.
///
/// Layout (little-endian): `DTM1`, u8 variant tag, u32 member count M,
/// M × f64 weights, u8 threshold flag (+ f64 threshold), then per member:
/// f64 intercept (simple intercepts), u32 width + f64 β (shift variants),
/// network spec + u32 tensor count + per tensor (u8 rank, u32 extents,
/// f32 payload) for image variants.
pub fn encode_ensemble(ens: &EnsembleModel) -> Vec<u8> {
    let mut out = MODEL_MAGIC.to_vec();
    out.push(ens.variant().tag());
    put_u32(&mut out, ens.len());
    ens.weights.iter().for_each(|&w| put_f64(&mut out, w));
    match ens.threshold {
        Some(t) => {
            out.push(1);
            put_f64(&mut out, t);
        }
        None => out.push(0),
    }
    for m in &ens.members {
        if let Some(t) = m.intercept() {
            put_f64(&mut out, t);
        }
        if let Some(beta) = m.beta() {
            put_u32(&mut out, beta.len());
            beta.iter().for_each(|&b| put_f64(&mut out, b));
        }
        if let Some(net) = m.network() {
            encode_spec(&mut out, &net.spec);
            put_u32(&mut out, net.params.tensors.len());
            for t in &net.params.tensors {
                out.push(t.rank() as u8);
                t.shape().iter().for_each(|&e| put_u32(&mut out, e));
                t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(self.err("non-finite value"));
        }
        Ok(v)
    }

    fn triple(&mut self) -> Result<[usize; 3]> {
        Ok([self.u32()?, self.u32()?, self.u32()?])
    }

    fn spec(&mut self) -> Result<NetworkSpec> {
        let input = [self.u32()?, self.u32()?, self.u32()?, self.u32()?];
        let n = self.u32()?;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let at = self.pos;
            layers.push(match self.u8()? {
                0 => Layer::Conv3d {
                    in_channels: self.u32()?,
                    out_channels: self.u32()?,
                    kernel: self.triple()?,
                    stride: self.triple()?,
                    padding: self.triple()?,
                    cam_target: self.u8()? != 0,
                },
                1 => Layer::Relu,
                2 => Layer::MaxPool3d {
                    window: self.triple()?,
                    stride: self.triple()?,
                },
                3 => Layer::GlobalAvgPool,
                4 => Layer::Dense {
                    inputs: self.u32()?,
                    outputs: self.u32()?,
                },
                5 => Layer::Sigmoid,
                t => {
                    self.pos = at;
                    return Err(self.err(format!("unknown layer tag {t}")));
                }
            });
        }
        Ok(NetworkSpec { input, layers })
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = crate::tensor::checked_len(&shape).map_err(|e| self.err(e.to_string()))?;
        let bytes_needed = n.checked_mul(4).ok_or_else(|| self.err("tensor size overflows"))?;
        let raw = self.take(bytes_needed)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: at as u64,
            message: e.to_string(),
        })
    }
}

pub fn decode_ensemble(bytes: &[u8]) -> Result<EnsembleModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MODEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let tag_at = c.pos;
    let variant = Variant::from_tag(c.u8()?).ok_or(Error::Format {
        offset: tag_at as u64,
        message: "unknown variant tag".into(),
    })?;
    let m = c.u32()?;
    if m == 0 || m > 4096 {
        return Err(c.err(format!("implausible member count {m}")));
    }
    let weights = (0..m).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    let threshold = match c.u8()? {
        0 => None,
        _ => Some(c.f64()?),
    };
    let mut members = Vec::with_capacity(m);
    for _ in 0..m {
        let intercept = if variant.uses_image() { None } else { Some(c.f64()?) };
        let beta = if variant.uses_tabular() {
            let w = c.u32()?;
            Some((0..w).map(|_| c.f64()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let network = if variant.uses_image() {
            let spec = c.spec()?;
            let count = c.u32()?;
            let tensors = (0..count).map(|_| c.tensor()).collect::<Result<Vec<_>>>()?;
            Some(ImageNetwork::new(spec, Params { tensors })?)
        } else {
            None
        };
        members.push(TransformationModel::new(variant, intercept, network, beta)?);
    }
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes"));
    }
    let mut ens = EnsembleModel::new(members, weights)?;
    ens.threshold = threshold;
    Ok(ens)
}

pub fn save_ensemble(path: &std::path::Path, ens: &EnsembleModel) -> Result<()> {
    std::fs::write(path, encode_ensemble(ens)).map_err(|e| Error::io(path, e))
}

pub fn load_ensemble(path: &std::path::Path) -> Result<EnsembleModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ensemble(&bytes)
}

/// Probability of the favorable class for each `h`.
pub fn favorable_probabilities(hs: &[f64]) -> Vec<f64> {
    hs.iter().map(|&h| logistic(h)).collect()
}

/// SI-LS coefficients refitted on `b` bootstrap resamples of `examples`.
/// Resamples that lose an outcome class are redrawn.
pub fn bootstrap_coefficients(
    examples: &[Example],
    b: usize,
    seed: u64,
    config: &TrainConfig,
) -> Result<Vec<Vec<f64>>> {
    check_examples(examples, "bootstrap")?;
    tabular_width(Variant::SiLs, examples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = examples.len();
    let mut samples = Vec::with_capacity(b);
    while samples.len() < b {
        let sample: Vec<Example> = (0..n)
            .map(|_| examples[rand::Rng::random_range(&mut rng, 0..n)])
            .collect();
        if check_examples(&sample, "bootstrap").is_ok() {
            samples.push(sample);
        }
    }
    samples
        .par_iter()
        .map(|s| {
            let fit = train_member(Variant::SiLs, None, s, None, config, 0)?;
            Ok(fit.model.beta().unwrap_or_default().to_vec())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn bootstrap_coefficients_center_on_the_full_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let xs: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
        let labels: Vec<Label> = xs
            .iter()
            .map(|x| Label::from_positive(rng.random::<f64>() >= logistic(0.3 + 1.5 * x[0])))
            .collect();
        let ex: Vec<Example> = xs
            .iter()
            .zip(&labels)
            .map(|(x, &label)| Example {
                volume: None,
                tabular: Some(x),
                label,
            })
            .collect();
        let cfg = TrainConfig::default();
        let full = train_member(Variant::SiLs, None, &ex, None, &cfg, 0).unwrap();
        let draws = bootstrap_coefficients(&ex, 50, 3, &cfg).unwrap();
        assert_eq!(draws.len(), 50);
        let mean = draws.iter().map(|b| b[0]).sum::<f64>() / 50.0;
        assert!((mean - full.model.beta().unwrap()[0]).abs() < 0.15);
        assert_eq!(draws, bootstrap_coefficients(&ex, 50, 3, &cfg).unwrap());
    }

    fn labels(fav: usize, unfav: usize) -> Vec<Label> {
        let mut l = vec![Label::Favorable; fav];
        l.extend(vec![Label::Unfavorable; unfav]);
        l
    }

    fn examples(labels: &[Label]) -> Vec<Example<'_>> {
        labels
            .iter()
            .map(|&label| Example {
                volume: None,
                tabular: None,
                label,
            })
            .collect()
    }

    #[test]
    fn null_model_converges_to_log_odds() {
        let l = labels(332, 75);
        let fit = train_member(Variant::Si, None, &examples(&l), None, &TrainConfig::default(), 0).unwrap();
        let target = logit(332.0 / 407.0);
        assert!((fit.model.intercept().unwrap() - target).abs() < 1e-3);
        assert!((target - 1.4876).abs() < 1e-4);
        assert!(fit.final_nll <= fit.initial_nll);
    }

    #[test]
    fn single_class_training_is_rejected() {
        let l = labels(10, 0);
        assert!(matches!(
            train_member(Variant::Si, None, &examples(&l), None, &TrainConfig::default(), 0),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn separable_data_is_classified_perfectly() {
        let xs: Vec<[f64; 2]> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                [s * (1.0 + (i as f64) * 0.05), 0.3 * ((i * 7 % 5) as f64 - 2.0)]
            })
            .collect();
        let labs: Vec<Label> = xs.iter().map(|x| Label::from_positive(x[0] < 0.0)).collect();
        let ex: Vec<Example> = xs
            .iter()
            .zip(&labs)
            .map(|(x, &label)| Example {
                volume: None,
                tabular: Some(&x[..]),
                label,
            })
            .collect();
        let fit = train_member(Variant::SiLs, None, &ex, None, &TrainConfig::default(), 0).unwrap();
        let correct = ex
            .iter()
            .filter(|e| {
                let p1 = fit.model.predict(None, e.tabular).unwrap().p1;
                (p1 > 0.5) == e.label.is_positive()
            })
            .count();
        assert_eq!(correct, ex.len());
    }

    #[test]
    fn duplicate_seeds_are_rejected() {
        let l = labels(5, 5);
        let ex = examples(&l);
        assert!(matches!(
            fit_ensemble(Variant::Si, None, &ex, &ex, &[3, 3], &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_member_ensemble_is_identity() {
        let l = labels(30, 10);
        let ex = examples(&l);
        let fit = fit_ensemble(Variant::Si, None, &ex, &ex, &[7], &TrainConfig::default()).unwrap();
        assert_eq!(fit.ensemble.weights(), &[1.0]);
        let h = fit.ensemble.transformation_value(None, None).unwrap();
        assert_eq!(h, fit.members[0].model.transformation_value(None, None).unwrap());
    }

    #[test]
    fn vertex_and_symmetric_weights() {
        let ms: Vec<TransformationModel> = [0.7, -1.2, 0.1, 2.0, -0.3]
            .iter()
            .map(|&t| TransformationModel::si(t).unwrap())
            .collect();
        let e = EnsembleModel::new(ms.clone(), vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(e.transformation_value(None, None).unwrap(), 0.7);

        let pair = vec![
            TransformationModel::si(1.3).unwrap(),
            TransformationModel::si(-1.3).unwrap(),
        ];
        let e = EnsembleModel::new(pair, vec![0.5, 0.5]).unwrap();
        let d = e.predict(None, None).unwrap();
        assert_eq!(d.h, 0.0);
        assert_eq!(d.p0, 0.5);

        assert!(EnsembleModel::new(ms.clone(), vec![0.5, 0.5, 0.1, 0.0, -0.1]).is_err());
        assert!(EnsembleModel::new(ms, vec![0.3; 5]).is_err());
    }

    #[test]
    fn weighted_value_matches_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let hs: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let ms = hs.iter().map(|&h| TransformationModel::si(h).unwrap()).collect();
            let e = EnsembleModel::new(ms, w.clone()).unwrap();
            let direct: f64 = hs.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((e.transformation_value(None, None).unwrap() - direct).abs() <= 1e-7);
        }
    }

    #[test]
    fn identical_members_keep_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l: Vec<Label> = (0..50).map(|i| Label::from_positive(i % 3 == 0)).collect();
        let h: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let hs = vec![h; 4];
        let w = optimize_ensemble_weights(&hs, &l).unwrap();
        assert_eq!(w, vec![0.25; 4]);
    }

    #[test]
    fn two_member_weights_match_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 150;
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(-2.5..2.5)).collect();
        let l: Vec<Label> = truth
            .iter()
            .map(|&h| Label::from_positive(rng.random::<f64>() > logistic(h)))
            .collect();
        let a: Vec<f64> = truth.iter().map(|h| 1.6 * h + rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = truth.iter().map(|h| 0.5 * h + rng.random_range(-0.5..0.5)).collect();
        let hs = vec![a, b];

        // grid-search oracle over w1 in {0, 0.001, ..., 1}
        let (grid_w, grid_nll) = (0..=1000)
            .map(|k| {
                let w1 = k as f64 / 1000.0;
                (w1, weighted_nll(&hs, &l, &[w1, 1.0 - w1]))
            })
            .fold((0.0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
        let w = optimize_ensemble_weights(&hs, &l).unwrap();
        assert!((w[0] - grid_w).abs() <= 0.01, "{w:?} vs {grid_w}");
        assert!((weighted_nll(&hs, &l, &w) - grid_nll).abs() <= 1e-5);
        assert!(weighted_nll(&hs, &l, &w) <= grid_nll + 1e-12);
    }

    #[test]
    fn dominant_member_gets_majority_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let l: Vec<Label> = truth
            .iter()
            .map(|&h| Label::from_positive(rng.random::<f64>() > logistic(h)))
            .collect();
        let good = truth.clone();
        let bad: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let hs = vec![good, bad];
        // oracle: member 1 wins at both vertices and on a fine grid of the edge
        let grid: Vec<f64> = (0..=100)
            .map(|k| weighted_nll(&hs, &l, &[k as f64 / 100.0, 1.0 - k as f64 / 100.0]))
            .collect();
        let best_k = (0..=100).min_by(|&a, &b| grid[a].total_cmp(&grid[b])).unwrap();
        assert!(best_k >= 50);
        let w = optimize_ensemble_weights(&hs, &l).unwrap();
        assert!(w[0] >= 0.5, "{w:?}");
    }

    #[test]
    fn weight_tuning_input_errors() {
        assert!(optimize_ensemble_weights(&[vec![], vec![]], &[]).is_err());
        let l = vec![Label::Favorable; 3];
        assert!(optimize_ensemble_weights(&[vec![0.0; 3], vec![1.0; 3]], &l).is_err());
    }

    #[test]
    fn ensemble_coefficients_are_weighted() {
        let ms = vec![
            TransformationModel::si_ls(0.2, vec![1.0, 0.0]).unwrap(),
            TransformationModel::si_ls(-0.6, vec![0.0, 1.0]).unwrap(),
        ];
        let e = EnsembleModel::new(ms, vec![0.25, 0.75]).unwrap();
        let c = e.coefficients().unwrap();
        assert_eq!(c.beta, vec![0.25, 0.75]);
        assert!((c.intercept.unwrap() - (0.05 - 0.45)).abs() < 1e-15);
        let si = EnsembleModel::single(TransformationModel::si(0.0).unwrap());
        assert!(matches!(si.coefficients(), Err(Error::UnsupportedVariant { .. })));
    }

    #[test]
    fn model_file_round_trip_and_errors() {
        let spec = NetworkSpec::default_for([8, 8, 4]);
        let ms = (0..2)
            .map(|s| {
                let net = ImageNetwork::initialized(spec.clone(), s).unwrap();
                TransformationModel::ci_ls(net, vec![0.5, -0.25 * s as f64]).unwrap()
            })
            .collect();
        let mut e = EnsembleModel::new(ms, vec![0.4, 0.6]).unwrap();
        e.threshold = Some(0.31);
        let bytes = encode_ensemble(&e);
        assert_eq!(&bytes[..4], b"DTM1");
        assert_eq!(decode_ensemble(&bytes).unwrap(), e);

        assert!(matches!(
            decode_ensemble(&bytes[..bytes.len() - 2]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_ensemble(&bad), Err(Error::Format { offset: 4, .. })));

        let si = EnsembleModel::single(TransformationModel::si(1.25).unwrap());
        assert_eq!(decode_ensemble(&encode_ensemble(&si)).unwrap(), si);
    }
}
