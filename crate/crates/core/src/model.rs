//! Transformation models for a binary outcome.
//!
//! A model produces the cutpoint `h(y0 | input)` on the standard-logistic
//! scale; the favorable-outcome probability is `p0 = σ(h)`. Intercepts are
//! either a scalar or the output of a 3D CNN; the optional linear shift adds
//! `xᵀβ` from encoded tabular features, so each `β_k` is a log-odds ratio.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::EncodedColumn;
use crate::error::{Error, Result};
use crate::nn::{self, NetworkSpec, Params, Tape};
use crate::stats::percentile_interval;
use crate::tensor::Tensor;

/// Model family: simple/complex intercept, with or without a linear shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "SI")]
    Si,
    #[serde(rename = "SI-LS")]
    SiLs,
    #[serde(rename = "CI")]
    Ci,
    #[serde(rename = "CI-LS")]
    CiLs,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Si, Variant::Ci, Variant::SiLs, Variant::CiLs];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Si => "SI",
            Variant::SiLs => "SI-LS",
            Variant::Ci => "CI",
            Variant::CiLs => "CI-LS",
        }
    }

    pub fn uses_image(self) -> bool {
        matches!(self, Variant::Ci | Variant::CiLs)
    }

    pub fn uses_tabular(self) -> bool {
        matches!(self, Variant::SiLs | Variant::CiLs)
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::Si => 0,
            Variant::SiLs => 1,
            Variant::Ci => 2,
            Variant::CiLs => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Variant::Si,
            1 => Variant::SiLs,
            2 => Variant::Ci,
            3 => Variant::CiLs,
            _ => return None,
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SI" => Ok(Variant::Si),
            "SI-LS" => Ok(Variant::SiLs),
            "CI" => Ok(Variant::Ci),
            "CI-LS" => Ok(Variant::CiLs),
            _ => Err(Error::Config(format!("unknown variant `{s}` (SI, SI-LS, CI, CI-LS)"))),
        }
    }
}

/// Outcome class. Unfavorable is the positive class for sensitivity and F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Favorable,
    Unfavorable,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Unfavorable
    }

    pub fn from_positive(positive: bool) -> Self {
        if positive {
            Label::Unfavorable
        } else {
            Label::Favorable
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Favorable => "favorable",
            Label::Unfavorable => "unfavorable",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "favorable" | "0" => Ok(Label::Favorable),
            "unfavorable" | "1" => Ok(Label::Unfavorable),
            other => Err(Error::Config(format!("unknown label `{other}`"))),
        }
    }
}

/// Standard logistic CDF, evaluated without overflow for any finite `h`.
pub fn logistic(h: f64) -> f64 {
    if h >= 0.0 {
        1.0 / (1.0 + (-h).exp())
    } else {
        let e = h.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeDistribution {
    pub h: f64,
    /// P(favorable).
    pub p0: f64,
    /// P(unfavorable) = 1 − p0.
    pub p1: f64,
}

impl OutcomeDistribution {
    pub fn prob(&self, label: Label) -> f64 {
        match label {
            Label::Favorable => self.p0,
            Label::Unfavorable => self.p1,
        }
    }
}

pub fn outcome_probabilities(h: f64) -> Result<OutcomeDistribution> {
    if !h.is_finite() {
        return Err(Error::Numeric(format!("transformation value is not finite: {h}")));
    }
    let p0 = logistic(h);
    Ok(OutcomeDistribution { h, p0, p1: 1.0 - p0 })
}

/// Mean of −log p_label with probabilities clamped at 1e-12.
pub fn nll(p0: &[f64], labels: &[Label]) -> Result<f64> {
    if p0.is_empty() || p0.len() != labels.len() {
        return Err(Error::DegenerateData(format!(
            "nll needs equal nonempty inputs, got {} probabilities and {} labels",
            p0.len(),
            labels.len()
        )));
    }
    let total: f64 = p0
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = if y.is_positive() { 1.0 - p } else { p };
            -p.max(1e-12).ln()
        })
        .sum();
    Ok(total / p0.len() as f64)
}

/// `−log p_label` and its derivative w.r.t. `h`, computed from `h` directly.
pub fn nll_and_grad(h: f64, label: Label) -> (f64, f64) {
    let p0 = logistic(h);
    match label {
        // −log σ(h) = softplus(−h)
        Label::Favorable => (softplus(-h), p0 - 1.0),
        Label::Unfavorable => (softplus(h), p0),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// CNN computing the complex intercept ϑ₀(B).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageNetwork {
    pub spec: NetworkSpec,
    pub params: Params,
}

impl ImageNetwork {
    pub fn new(spec: NetworkSpec, params: Params) -> Result<Self> {
        spec.validate()?;
        params.check(&spec)?;
        let shapes = spec.shapes()?;
        if shapes.last().map(Vec::as_slice) != Some(&[1][..]) {
            return Err(Error::Network(format!(
                "intercept network must end in a single output, got {:?}",
                shapes.last()
            )));
        }
        Ok(ImageNetwork { spec, params })
    }

    pub fn initialized(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let params = spec.init_params(seed)?;
        Self::new(spec, params)
    }

    /// Reshapes a `[x, y, z]` volume to the network's `[1, x, y, z]` input.
    pub fn input_for(&self, volume: &Tensor) -> Result<Tensor> {
        let v = if volume.rank() == 3 {
            let mut shape = vec![1];
            shape.extend_from_slice(volume.shape());
            volume.clone().reshape(shape)?
        } else {
            volume.clone()
        };
        if v.shape() != self.spec.input.as_slice() {
            return Err(Error::Shape {
                index: 0,
                kind: "input",
                message: format!("expects {:?}, got {:?}", self.spec.input, volume.shape()),
            });
        }
        Ok(v)
    }

    pub fn intercept(&self, volume: &Tensor) -> Result<f64> {
        Ok(self.intercept_with_tape(volume)?.0)
    }

    pub fn intercept_with_tape(&self, volume: &Tensor) -> Result<(f64, Tape)> {
        let x = self.input_for(volume)?;
        let (y, tape) = nn::forward(&self.spec, &self.params, &x)?;
        Ok((y.data()[0] as f64, tape))
    }
}

/// One fitted transformation model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformationModel {
    variant: Variant,
    intercept: Option<f64>,
    network: Option<ImageNetwork>,
    beta: Option<Vec<f64>>,
}

impl TransformationModel {
    pub fn new(
        variant: Variant,
        intercept: Option<f64>,
        network: Option<ImageNetwork>,
        beta: Option<Vec<f64>>,
    ) -> Result<Self> {
        let ok = intercept.is_some() == !variant.uses_image()
            && network.is_some() == variant.uses_image()
            && beta.is_some() == variant.uses_tabular();
        if !ok {
            return Err(Error::Config(format!(
                "variant {variant} needs intercept={}, network={}, beta={}",
                !variant.uses_image(),
                variant.uses_image(),
                variant.uses_tabular()
            )));
        }
        if let Some(t) = intercept {
            if !t.is_finite() {
                return Err(Error::Numeric("intercept is not finite".into()));
            }
        }
        if beta.as_ref().is_some_and(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("shift coefficients are not finite".into()));
        }
        Ok(TransformationModel {
            variant,
            intercept,
            network,
            beta,
        })
    }

    pub fn si(intercept: f64) -> Result<Self> {
        Self::new(Variant::Si, Some(intercept), None, None)
    }

    pub fn si_ls(intercept: f64, beta: Vec<f64>) -> Result<Self> {
        Self::new(Variant::SiLs, Some(intercept), None, Some(beta))
    }

    pub fn ci(network: ImageNetwork) -> Result<Self> {
        Self::new(Variant::Ci, None, Some(network), None)
    }

    pub fn ci_ls(network: ImageNetwork, beta: Vec<f64>) -> Result<Self> {
        Self::new(Variant::CiLs, None, Some(network), Some(beta))
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn intercept(&self) -> Option<f64> {
        self.intercept
    }

    pub fn network(&self) -> Option<&ImageNetwork> {
        self.network.as_ref()
    }

    pub fn network_mut(&mut self) -> Option<&mut ImageNetwork> {
        self.network.as_mut()
    }

    pub fn beta(&self) -> Option<&[f64]> {
        self.beta.as_deref()
    }

    pub(crate) fn beta_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.beta.as_mut()
    }

    /// The linear shift `xᵀβ` (0 for variants without one).
    pub fn shift(&self, tabular: Option<&[f64]>) -> Result<f64> {
        let Some(beta) = &self.beta else {
            return Ok(0.0);
        };
        let x = tabular.ok_or(Error::MissingModality {
            variant: self.variant.name(),
            modality: "tabular features",
        })?;
        if x.len() != beta.len() {
            return Err(Error::Config(format!(
                "tabular width {} does not match {} shift coefficients",
                x.len(),
                beta.len()
            )));
        }
        Ok(x.iter().zip(beta).map(|(a, b)| a * b).sum())
    }

    /// ϑ₀ or ϑ₀(B).
    pub fn intercept_term(&self, volume: Option<&Tensor>) -> Result<f64> {
        match (&self.network, self.intercept) {
            (Some(net), _) => {
                let v = volume.ok_or(Error::MissingModality {
                    variant: self.variant.name(),
                    modality: "an image volume",
                })?;
                net.intercept(v)
            }
            (None, Some(t)) => Ok(t),
            (None, None) => unreachable!("validated at construction"),
        }
    }

    /// `h(y0 | input)`.
    pub fn transformation_value(&self, volume: Option<&Tensor>, tabular: Option<&[f64]>) -> Result<f64> {
        let shift = self.shift(tabular)?;
        Ok(self.intercept_term(volume)? + shift)
    }

    pub fn predict(&self, volume: Option<&Tensor>, tabular: Option<&[f64]>) -> Result<OutcomeDistribution> {
        outcome_probabilities(self.transformation_value(volume, tabular)?)
    }
}

/// One row of the log-odds-ratio table.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRow {
    pub feature: String,
    pub beta: f64,
    pub odds_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Reference level for dummy columns, `None` for standardized numerics.
    pub reference: Option<String>,
}

impl CoefficientRow {
    pub fn scale_note(&self) -> String {
        match &self.reference {
            Some(r) => format!("vs {r}"),
            None => "per 1 SD".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientReport {
    pub rows: Vec<CoefficientRow>,
}

impl CoefficientReport {
    /// Point estimates are the mean over `estimates` (one β per fold/member);
    /// the interval is the percentile interval of the bootstrap `replicates`.
    pub fn build(
        variant: Variant,
        columns: &[EncodedColumn],
        estimates: &[Vec<f64>],
        replicates: &[Vec<f64>],
        level: f64,
    ) -> Result<Self> {
        if !variant.uses_tabular() {
            return Err(Error::UnsupportedVariant {
                variant: variant.name(),
                what: "shift coefficients",
            });
        }
        if estimates.is_empty() || replicates.is_empty() {
            return Err(Error::DegenerateData(
                "coefficient report needs estimates and replicates".into(),
            ));
        }
        let width = columns.len();
        if estimates.iter().chain(replicates).any(|b| b.len() != width) {
            return Err(Error::Config(format!(
                "coefficient vectors must all have width {width}"
            )));
        }
        let rows = columns
            .iter()
            .enumerate()
            .map(|(k, col)| {
                let beta = estimates.iter().map(|b| b[k]).sum::<f64>() / estimates.len() as f64;
                let draws: Vec<f64> = replicates.iter().map(|b| b[k]).collect();
                let (ci_low, ci_high) = percentile_interval(&draws, level);
                CoefficientRow {
                    feature: col.name.clone(),
                    beta,
                    odds_ratio: beta.exp(),
                    ci_low,
                    ci_high,
                    reference: col.reference.clone(),
                }
            })
            .collect();
        Ok(CoefficientReport { rows })
    }

    pub fn from_models(
        columns: &[EncodedColumn],
        models: &[&TransformationModel],
        replicates: &[Vec<f64>],
        level: f64,
    ) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::DegenerateData("no fitted models".into()))?;
        let estimates = models
            .iter()
            .map(|m| {
                m.beta().map(<[f64]>::to_vec).ok_or(Error::UnsupportedVariant {
                    variant: m.variant().name(),
                    what: "shift coefficients",
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(first.variant(), columns, &estimates, replicates, level)
    }

    /// `feature,beta,odds_ratio,ci_low,ci_high`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["feature", "beta", "odds_ratio", "ci_low", "ci_high"])?;
        for r in &self.rows {
            w.write_record([
                r.feature.clone(),
                r.beta.to_string(),
                r.odds_ratio.to_string(),
                r.ci_low.to_string(),
                r.ci_high.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<coefficients>", e))?;
        Ok(())
    }
}
