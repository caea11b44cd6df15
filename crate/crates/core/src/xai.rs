//! Grad-CAM and occlusion maps for image-conditional models, ensemble
//! averaging of maps and their axial 2D projections.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logistic, Label, TransformationModel};
use crate::nn;
use crate::resample::trilinear_upsample;
use crate::tensor::Tensor;
use crate::train::EnsembleModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gradcam,
    Occlusion,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gradcam => "gradcam",
            Method::Occlusion => "occlusion",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gradcam" | "grad-cam" => Ok(Method::Gradcam),
            "occlusion" => Ok(Method::Occlusion),
            _ => Err(Error::Config(format!("unknown explanation method `{s}`"))),
        }
    }
}

/// A nonnegative importance volume with the input's extents.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationMap {
    pub values: Tensor,
    pub method: Method,
    /// Class whose probability the map explains.
    pub class: Label,
    pub weights: Vec<f64>,
    pub model_id: String,
}

/// Per-channel Grad-CAM weights and the tensors they came from.
#[derive(Debug, Clone)]
pub struct GradcamDetail {
    /// Activation of the `cam_target` layer, `[L, Q, R, S]`.
    pub activation: Tensor,
    /// `∂p_k/∂A`, same shape as `activation`.
    pub gradient: Vec<f64>,
    /// Channel importances: the mean of `gradient` over the Q·R·S voxels of each channel.
    pub alpha: Vec<f64>,
    /// Full transformation value `h` of the forward pass.
    pub h: f64,
}

/// `+1` for the favorable class (`p0 = σ(h)`), `−1` for unfavorable (`p1 = 1 − σ(h)`).
pub fn class_sign(k: Label) -> f64 {
    if k.is_positive() {
        -1.0
    } else {
        1.0
    }
}

/// `p_k` as a function of `h`.
pub fn class_probability(h: f64, k: Label) -> f64 {
    let p0 = logistic(h);
    if k.is_positive() {
        1.0 - p0
    } else {
        p0
    }
}

fn image_member<'a>(member: &'a TransformationModel, what: &'static str) -> Result<&'a crate::model::ImageNetwork> {
    member.network().ok_or(Error::UnsupportedVariant {
        variant: member.variant().name(),
        what,
    })
}

/// Gradient of `p_k` with respect to the `cam_target` activation.
pub fn gradcam_detail(
    member: &TransformationModel,
    volume: &Tensor,
    tabular: Option<&[f64]>,
    k: Label,
) -> Result<GradcamDetail> {
    let net = image_member(member, "Grad-CAM")?;
    net.spec.cam_index()?;
    let (theta, tape) = net.intercept_with_tape(volume)?;
    let h = theta + member.shift(tabular)?;
    let p0 = logistic(h);
    let factor = class_sign(k) * p0 * (1.0 - p0);
    let grads = nn::backward_scalar(&net.spec, &net.params, &tape, 1.0)?;
    let dtheta = grads
        .cam
        .ok_or_else(|| Error::Network("cam_target activation missing from the tape".into()))?;
    let activation = tape.cam_activation().unwrap().clone();
    let gradient: Vec<f64> = dtheta.data().iter().map(|&g| factor * g as f64).collect();
    let channels = activation.shape()[0];
    let per = activation.len() / channels;
    let alpha = gradient
        .chunks_exact(per)
        .map(|c| c.iter().sum::<f64>() / per as f64)
        .collect();
    Ok(GradcamDetail {
        activation,
        gradient,
        alpha,
        h,
    })
}

/// `ReLU(Σ_l α_l A^l)` at the activation's resolution.
pub fn weighted_activation(activation: &Tensor, alpha: &[f64]) -> Result<Tensor> {
    let shape = activation.shape();
    if shape.len() != 4 || shape[0] != alpha.len() {
        return Err(Error::Tensor(format!(
            "{} channel weights for activation {shape:?}",
            alpha.len()
        )));
    }
    let per = activation.len() / shape[0];
    let mut acc = vec![0.0f64; per];
    for (ch, &a) in activation.data().chunks_exact(per).zip(alpha) {
        for (s, &v) in acc.iter_mut().zip(ch) {
            *s += a * v as f64;
        }
    }
    Tensor::new(
        shape[1..].to_vec(),
        acc.into_iter().map(|v| v.max(0.0) as f32).collect(),
    )
}

/// Grad-CAM map of one member for class `k`, upsampled to the volume's extents.
pub fn gradcam(
    member: &TransformationModel,
    volume: &Tensor,
    tabular: Option<&[f64]>,
    k: Label,
) -> Result<ExplanationMap> {
    let detail = gradcam_detail(member, volume, tabular, k)?;
    let coarse = weighted_activation(&detail.activation, &detail.alpha)?;
    let target = volume_extents(volume)?;
    Ok(ExplanationMap {
        values: trilinear_upsample(&coarse, target)?,
        method: Method::Gradcam,
        class: k,
        weights: vec![1.0],
        model_id: String::new(),
    })
}

fn volume_extents(volume: &Tensor) -> Result<[usize; 3]> {
    let s = volume.shape();
    match s.len() {
        3 => Ok([s[0], s[1], s[2]]),
        4 if s[0] == 1 => Ok([s[1], s[2], s[3]]),
        _ => Err(Error::Tensor(format!("expected a 3D volume, got shape {s:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionConfig {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub fill: f32,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            window: [18, 18, 4],
            stride: [10, 10, 3],
            fill: 0.0,
        }
    }
}

impl OcclusionConfig {
    /// Proportionally scaled window for 32×32×8 volumes.
    pub fn desk() -> Self {
        OcclusionConfig {
            window: [5, 5, 2],
            stride: [3, 3, 1],
            fill: 0.0,
        }
    }

    pub fn validate(&self, extents: [usize; 3]) -> Result<()> {
        for axis in 0..3 {
            if self.window[axis] == 0 || self.stride[axis] == 0 {
                return Err(Error::Config(format!(
                    "occlusion window and stride must be positive, got {:?} / {:?}",
                    self.window, self.stride
                )));
            }
            if self.stride[axis] > self.window[axis] {
                return Err(Error::Config(format!(
                    "occlusion stride {:?} exceeds window {:?}; voxels between windows would never be occluded",
                    self.stride, self.window
                )));
            }
            if self.window[axis] > extents[axis] {
                return Err(Error::Config(format!(
                    "occlusion window {:?} exceeds volume extents {extents:?}",
                    self.window
                )));
            }
        }
        if !self.fill.is_finite() {
            return Err(Error::Config("occlusion fill value must be finite".into()));
        }
        Ok(())
    }
}

/// Window origins along one axis; a border-clamped window is added when the stride grid falls short.
pub fn window_origins(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut origins: Vec<usize> = (0..=extent - window).step_by(stride).collect();
    if origins.last().map(|&o| o + window < extent).unwrap_or(false) {
        origins.push(extent - window);
    }
    origins
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionGrid {
    pub extents: [usize; 3],
    pub window: [usize; 3],
    pub origins: [Vec<usize>; 3],
}

impl OcclusionGrid {
    pub fn new(extents: [usize; 3], config: &OcclusionConfig) -> Result<Self> {
        config.validate(extents)?;
        let origins = std::array::from_fn(|a| window_origins(extents[a], config.window[a], config.stride[a]));
        Ok(OcclusionGrid {
            extents,
            window: config.window,
            origins,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Window origins in x-major order.
    pub fn windows(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(self.len());
        for &x in &self.origins[0] {
            for &y in &self.origins[1] {
                for &z in &self.origins[2] {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }

    /// How many windows cover each voxel.
    pub fn coverage(&self) -> Vec<u32> {
        let [ex, ey, ez] = self.extents;
        let mut count = vec![0u32; ex * ey * ez];
        for o in self.windows() {
            self.for_each_voxel(o, |i| count[i] += 1);
        }
        count
    }

    fn for_each_voxel(&self, origin: [usize; 3], mut f: impl FnMut(usize)) {
        let [_, ey, ez] = self.extents;
        for x in origin[0]..origin[0] + self.window[0] {
            for y in origin[1]..origin[1] + self.window[1] {
                let row = (x * ey + y) * ez;
                for z in origin[2]..origin[2] + self.window[2] {
                    f(row + z);
                }
            }
        }
    }
}

/// Occlusion map of one member for class `k`.
///
/// Each window is filled with `config.fill` and `p_k` re-evaluated (shift
/// term included); a voxel's importance is the mean probability drop over
/// the windows covering it, floored at 0.
pub fn occlusion(
    member: &TransformationModel,
    volume: &Tensor,
    tabular: Option<&[f64]>,
    config: &OcclusionConfig,
    k: Label,
) -> Result<ExplanationMap> {
    let net = image_member(member, "occlusion")?;
    let extents = volume_extents(volume)?;
    let grid = OcclusionGrid::new(extents, config)?;
    log::debug!("occlusion: {} windows over {:?}", grid.len(), extents);
    let shift = member.shift(tabular)?;
    let base = class_probability(net.intercept(volume)? + shift, k);
    let windows = grid.windows();
    let deltas = windows
        .par_iter()
        .map(|&o| {
            let mut occluded = volume.clone();
            let data = occluded.data_mut();
            grid.for_each_voxel(o, |i| data[i] = config.fill);
            Ok(base - class_probability(net.intercept(&occluded)? + shift, k))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = volume.len();
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for (o, d) in windows.iter().zip(&deltas) {
        grid.for_each_voxel(*o, |i| {
            sum[i] += d;
            count[i] += 1;
        });
    }
    let values = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { (s / c as f64).max(0.0) as f32 })
        .collect();
    Ok(ExplanationMap {
        values: Tensor::new(extents.to_vec(), values)?,
        method: Method::Occlusion,
        class: k,
        weights: vec![1.0],
        model_id: String::new(),
    })
}

/// Voxelwise `Σ_m w_m map_m`.
pub fn ensemble_map(maps: &[ExplanationMap], weights: &[f64]) -> Result<ExplanationMap> {
    let first = maps.first().ok_or_else(|| Error::Config("no maps to combine".into()))?;
    if maps.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} maps but {} weights",
            maps.len(),
            weights.len()
        )));
    }
    for m in maps {
        if m.values.shape() != first.values.shape() {
            return Err(Error::Tensor(format!(
                "map extents differ: {:?} vs {:?}",
                m.values.shape(),
                first.values.shape()
            )));
        }
        if m.method != first.method || m.class != first.class {
            return Err(Error::Config("maps must share method and explained class".into()));
        }
    }
    let mut acc = vec![0.0f64; first.values.len()];
    for (m, &w) in maps.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(m.values.data()) {
            *a += w * v as f64;
        }
    }
    Ok(ExplanationMap {
        values: Tensor::new(
            first.values.shape().to_vec(),
            acc.into_iter().map(|v| v.max(0.0) as f32).collect(),
        )?,
        method: first.method,
        class: first.class,
        weights: weights.to_vec(),
        model_id: first.model_id.clone(),
    })
}

/// Class predicted by an ensemble: unfavorable iff `p1 > threshold` (0.5 when unset).
pub fn predicted_class(ensemble: &EnsembleModel, volume: &Tensor, tabular: Option<&[f64]>) -> Result<(Label, f64)> {
    let p1 = ensemble.predict(Some(volume), tabular)?.p1;
    let t = ensemble.threshold.unwrap_or(0.5);
    Ok((Label::from_positive(p1 > t), p1))
}

/// Weighted ensemble explanation for class `k`.
pub fn explain_ensemble(
    ensemble: &EnsembleModel,
    volume: &Tensor,
    tabular: Option<&[f64]>,
    method: Method,
    occlusion_config: &OcclusionConfig,
    k: Label,
) -> Result<ExplanationMap> {
    let maps = ensemble
        .members()
        .iter()
        .map(|m| match method {
            Method::Gradcam => gradcam(m, volume, tabular, k),
            Method::Occlusion => occlusion(m, volume, tabular, occlusion_config, k),
        })
        .collect::<Result<Vec<_>>>()?;
    ensemble_map(&maps, ensemble.weights())
}

/// Axial (third-axis) means of a max-normalized map and of its volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    pub heat: Tensor,
    pub base: Tensor,
}

impl Projection2D {
    pub fn extents(&self) -> [usize; 2] {
        [self.heat.shape()[0], self.heat.shape()[1]]
    }
}

fn axial_mean(t: &Tensor, scale: f64) -> Tensor {
    let s = t.shape();
    let (ex, ey, ez) = (s[0], s[1], s[2]);
    let data = t
        .data()
        .chunks_exact(ez)
        .map(|col| (col.iter().map(|&v| v as f64 * scale).sum::<f64>() / ez as f64) as f32)
        .collect();
    Tensor::from_raw(vec![ex, ey], data)
}

pub fn axial_projection(map: &Tensor, volume: &Tensor) -> Result<Projection2D> {
    let extents = volume_extents(volume)?;
    if map.shape() != extents.as_slice() {
        return Err(Error::Tensor(format!(
            "map extents {:?} differ from volume {extents:?}",
            map.shape()
        )));
    }
    let max = map.max();
    let scale = if max > 0.0 { 1.0 / max as f64 } else { 0.0 };
    let vol = volume.clone().reshape(extents.to_vec())?;
    let mut heat = axial_mean(map, scale);
    heat.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Projection2D {
        heat,
        base: axial_mean(&vol, 1.0),
    })
}

/// Pixelwise mean of a group of projections.
pub fn class_average_map(group: &[Projection2D]) -> Result<Projection2D> {
    let first = group
        .first()
        .ok_or_else(|| Error::Config("cannot average an empty group of projections".into()))?;
    if group.iter().any(|p| p.extents() != first.extents()) {
        return Err(Error::Tensor("projection extents differ within the group".into()));
    }
    let mean = |pick: fn(&Projection2D) -> &Tensor| {
        let mut acc = vec![0.0f64; first.heat.len()];
        for p in group {
            for (a, &v) in acc.iter_mut().zip(pick(p).data()) {
                *a += v as f64;
            }
        }
        let n = group.len() as f64;
        Tensor::from_raw(
            first.heat.shape().to_vec(),
            acc.into_iter().map(|v| (v / n) as f32).collect(),
        )
    };
    Ok(Projection2D {
        heat: mean(|p| &p.heat),
        base: mean(|p| &p.base),
    })
}
