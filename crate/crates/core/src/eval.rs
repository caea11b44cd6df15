//! Stratified cross-validation and the outcome metrics with their intervals.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, TabularEncoder};
use crate::error::{Error, Result};
use crate::model::{Label, Variant};
use crate::nn::NetworkSpec;
use crate::stats;
use crate::train::{fit_ensemble, EnsembleModel, Example, TrainConfig};

/// z for a two-sided 95% interval.
pub const Z95: f64 = 1.959964;

/// Fold index of every sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

fn class_indices(labels: &[Label]) -> [Vec<usize>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        out[l.is_positive() as usize].push(i);
    }
    out
}

/// Shuffles each class and deals it round-robin over the folds, continuing
/// the rotation across classes so fold sizes stay balanced.
pub fn stratified_kfold(labels: &[Label], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Stratification(format!("need at least 2 folds, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for (class, mut idx) in class_indices(labels).into_iter().enumerate() {
        if idx.len() < k {
            return Err(Error::Stratification(format!(
                "class {} has {} samples, fewer than {k} folds",
                Label::from_positive(class == 1).as_str(),
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { folds, k, seed })
}

/// Splits `indices` into (train, validation), holding out `fraction` of each class.
pub fn stratified_holdout(
    indices: &[usize],
    labels: &[Label],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for positive in [false, true] {
        let mut idx: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| labels[i].is_positive() == positive)
            .collect();
        if idx.len() < 2 {
            return Err(Error::Stratification(format!(
                "cannot hold out validation samples from a class with {} members",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let take = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..take]);
        train.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

fn both_classes(labels: &[Label]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("both outcome classes are required".into()));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUC: the share of (unfavorable, favorable) pairs ranked correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Config("scores and labels differ in length".into()));
    }
    let (pos, neg) = both_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann–Whitney U, kept in integers
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let tie_pos = order[i..j].iter().filter(|&&o| labels[o].is_positive()).count() as u128;
        let tie_neg = (j - i) as u128 - tie_pos;
        u2 += tie_pos * (2 * neg_below + tie_neg);
        neg_below += tie_neg;
        i = j;
    }
    Ok((u2 as f64 / 2.0) / (pos as f64 * neg as f64))
}

/// Mean NLL of the observed labels given `p1 = P(unfavorable)`.
pub fn nll_from_p1(p1: &[f64], labels: &[Label]) -> Result<f64> {
    let p0: Vec<f64> = p1.iter().map(|p| 1.0 - p).collect();
    crate::model::nll(&p0, labels)
}

/// Unfavorable iff `p1 > threshold`.
pub fn classify(p1: f64, threshold: f64) -> Label {
    Label::from_positive(p1 > threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn new(predicted: &[Label], labels: &[Label]) -> Result<Self> {
        if predicted.is_empty() || predicted.len() != labels.len() {
            return Err(Error::Config(
                "predictions and labels must be nonempty and of equal length".into(),
            ));
        }
        let mut c = Confusion::default();
        for (p, l) in predicted.iter().zip(labels) {
            match (p.is_positive(), l.is_positive()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn ratio(num: usize, den: usize, what: &str) -> Result<f64> {
        if den == 0 {
            return Err(Error::UndefinedMetric(format!("{what} has an empty denominator")));
        }
        Ok(num as f64 / den as f64)
    }

    pub fn sensitivity(&self) -> Result<f64> {
        Self::ratio(self.tp, self.tp + self.fn_, "sensitivity")
    }

    pub fn specificity(&self) -> Result<f64> {
        Self::ratio(self.tn, self.tn + self.fp, "specificity")
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.n() as f64
    }

    /// `2TP / (2TP + FP + FN)`, 0 when there are no positives at all.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }
}

/// Wilson score interval for `successes` out of `n`.
pub fn wilson_ci(successes: usize, n: usize, level: f64) -> Result<(f64, f64)> {
    if n == 0 || successes > n {
        return Err(Error::UndefinedMetric(format!(
            "Wilson interval for {successes} of {n}"
        )));
    }
    let z = if (level - 0.95).abs() < 1e-12 {
        Z95
    } else {
        stats::normal_quantile(1.0 - (1.0 - level) / 2.0)
    };
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let low = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if successes == n { 1.0 } else { (center + half).min(1.0) };
    Ok((low, high))
}

/// Percentile bootstrap over resampled (score, label) pairs.
///
/// Resamples with a single class are redrawn; if more than 10% of the draws
/// are degenerate or make `metric` fail, the interval is reported unstable.
pub fn bootstrap_ci(
    metric: impl Fn(&[f64], &[Label]) -> Result<f64>,
    scores: &[f64],
    labels: &[Label],
    b: usize,
    seed: u64,
    level: f64,
) -> Result<(f64, f64)> {
    if b < 100 {
        return Err(Error::Config(format!(
            "at least 100 bootstrap resamples are needed, got {b}"
        )));
    }
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Config(
            "scores and labels must be nonempty and of equal length".into(),
        ));
    }
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(b);
    let mut undefined = 0;
    let mut s = vec![0.0; n];
    let mut l = vec![Label::Favorable; n];
    while values.len() < b {
        for j in 0..n {
            let i = rng.random_range(0..n);
            s[j] = scores[i];
            l[j] = labels[i];
        }
        let pos = l.iter().filter(|x| x.is_positive()).count();
        let value = if pos == 0 || pos == n {
            None
        } else {
            metric(&s, &l).ok()
        };
        match value {
            Some(v) if v.is_finite() => values.push(v),
            _ => {
                undefined += 1;
                if undefined * 10 > b {
                    return Err(Error::BootstrapUnstable {
                        undefined,
                        total: values.len() + undefined,
                    });
                }
            }
        }
    }
    Ok(stats::percentile_interval(&values, level))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub threshold: f64,
    pub geometric_mean: f64,
}

/// Candidate cut points: midpoints between consecutive unique scores, plus 0 and 1.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut c = vec![0.0];
    c.extend(u.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    c.push(1.0);
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// `sqrt(TPR · TNR)` and accuracy when classifying unfavorable iff `p1 > t`.
pub fn geometric_mean_at(scores: &[f64], labels: &[Label], t: f64) -> (f64, f64) {
    let mut c = Confusion::default();
    for (&s, l) in scores.iter().zip(labels) {
        match (s > t, l.is_positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let tpr = c.tp as f64 / (c.tp + c.fn_).max(1) as f64;
    let tnr = c.tn as f64 / (c.tn + c.fp).max(1) as f64;
    ((tpr * tnr).sqrt(), c.accuracy())
}

/// Threshold on `p1` maximizing the geometric mean of TPR and TNR.
///
/// Ties go to the higher validation accuracy, then to the smaller threshold.
/// The accuracy step only matters when every candidate scores the same, as
/// with a constant scorer, where it selects the majority class.
pub fn select_threshold(scores: &[f64], labels: &[Label]) -> Result<ThresholdRule> {
    if scores.len() != labels.len() {
        return Err(Error::Config("scores and labels differ in length".into()));
    }
    both_classes(labels)
        .map_err(|_| Error::UndefinedMetric("threshold selection needs both classes in validation".into()))?;
    let mut best: Option<(f64, f64, f64)> = None;
    for t in threshold_candidates(scores) {
        let (gm, acc) = geometric_mean_at(scores, labels, t);
        let better = match best {
            None => true,
            Some((bg, ba, _)) => gm > bg || (gm == bg && acc > ba),
        };
        if better {
            best = Some((gm, acc, t));
        }
    }
    let (geometric_mean, _, threshold) = best.unwrap();
    Ok(ThresholdRule {
        threshold,
        geometric_mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub low: f64,
    pub high: f64,
}

impl Estimate {
    pub fn cell(&self) -> String {
        format!("{:.3} [{:.3}, {:.3}]", self.value, self.low, self.high)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub nll: Estimate,
    pub auc: Estimate,
    pub specificity: Estimate,
    pub sensitivity: Estimate,
    pub accuracy: Estimate,
    pub f1: Estimate,
}

impl MetricSet {
    pub const NAMES: [&'static str; 6] = ["NLL", "AUC", "Specificity", "Sensitivity", "Accuracy", "F1"];

    pub fn entries(&self) -> [(&'static str, Estimate); 6] {
        [
            ("NLL", self.nll),
            ("AUC", self.auc),
            ("Specificity", self.specificity),
            ("Sensitivity", self.sensitivity),
            ("Accuracy", self.accuracy),
            ("F1", self.f1),
        ]
    }
}

/// Metrics for pooled test predictions: Wilson intervals for the proportions,
/// percentile bootstrap for NLL, AUC and F1.
pub fn compute_metrics(p1: &[f64], thresholds: &[f64], labels: &[Label], b: usize, seed: u64) -> Result<MetricSet> {
    if p1.len() != labels.len() || thresholds.len() != labels.len() {
        return Err(Error::Config(
            "predictions, thresholds and labels differ in length".into(),
        ));
    }
    let (pos, neg) = both_classes(labels)?;
    let predicted: Vec<Label> = p1.iter().zip(thresholds).map(|(&p, &t)| classify(p, t)).collect();
    let c = Confusion::new(&predicted, labels)?;
    let level = 0.95;
    let wilson = |s: usize, n: usize, v: f64| -> Result<Estimate> {
        let (low, high) = wilson_ci(s, n, level)?;
        Ok(Estimate { value: v, low, high })
    };
    // bootstrap resamples carry each sample's own threshold alongside its score
    let idx: Vec<f64> = (0..p1.len()).map(|i| i as f64).collect();
    let boot = |f: &dyn Fn(&[usize], &[Label]) -> Result<f64>, offset: u64| -> Result<(f64, f64)> {
        bootstrap_ci(
            |s, l| {
                let ix: Vec<usize> = s.iter().map(|&v| v as usize).collect();
                f(&ix, l)
            },
            &idx,
            labels,
            b,
            seed.wrapping_add(offset),
            level,
        )
    };
    let nll_v = nll_from_p1(p1, labels)?;
    let (nl, nh) = boot(
        &|ix, l| nll_from_p1(&ix.iter().map(|&i| p1[i]).collect::<Vec<_>>(), l),
        0,
    )?;
    let auc_v = auc(p1, labels)?;
    let (al, ah) = boot(&|ix, l| auc(&ix.iter().map(|&i| p1[i]).collect::<Vec<_>>(), l), 1)?;
    let (fl, fh) = boot(
        &|ix, l| {
            let pred: Vec<Label> = ix.iter().map(|&i| predicted[i]).collect();
            Ok(Confusion::new(&pred, l)?.f1())
        },
        2,
    )?;
    Ok(MetricSet {
        nll: Estimate {
            value: nll_v,
            low: nl.min(nll_v),
            high: nh.max(nll_v),
        },
        auc: Estimate {
            value: auc_v,
            low: al.min(auc_v),
            high: ah.max(auc_v),
        },
        specificity: wilson(c.tn, neg, c.specificity()?)?,
        sensitivity: wilson(c.tp, pos, c.sensitivity()?)?,
        accuracy: wilson(c.tp + c.tn, c.n(), c.accuracy())?,
        f1: Estimate {
            value: c.f1(),
            low: fl.min(c.f1()),
            high: fh.max(c.f1()),
        },
    })
}

/// Rows are metrics, columns are model variants.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub columns: Vec<(String, MetricSet)>,
}

impl MetricsTable {
    /// `model,metric,estimate,ci_low,ci_high`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "metric", "estimate", "ci_low", "ci_high"])?;
        for (name, m) in &self.columns {
            for (metric, e) in m.entries() {
                w.write_record([
                    name.as_str(),
                    metric,
                    &e.value.to_string(),
                    &e.low.to_string(),
                    &e.high.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| crate::error::Error::io("<metrics>", e))?;
        Ok(())
    }

    /// Aligned text with one `est [low, high]` cell per metric and model.
    pub fn render_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = vec![std::iter::once(String::new())
            .chain(self.columns.iter().map(|(n, _)| n.clone()))
            .collect()];
        for (k, name) in MetricSet::NAMES.iter().enumerate() {
            let mut row = vec![name.to_string()];
            row.extend(self.columns.iter().map(|(_, m)| m.entries()[k].1.cell()));
            cells.push(row);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossvalConfig {
    pub k: usize,
    /// One member per seed.
    pub seeds: Vec<u64>,
    pub bootstrap: usize,
    pub fold_seed: u64,
    pub train: TrainConfig,
    pub network: Option<NetworkSpec>,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig {
            k: 10,
            seeds: (1..=5).collect(),
            bootstrap: 2000,
            fold_seed: 0,
            train: TrainConfig::default(),
            network: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub fold: usize,
    pub label: Label,
    pub p1: f64,
    pub threshold: f64,
}

impl Prediction {
    pub fn predicted(&self) -> Label {
        classify(self.p1, self.threshold)
    }
}

#[derive(Debug, Clone)]
pub struct FoldModel {
    pub fold: usize,
    pub ensemble: EnsembleModel,
    pub encoder: Option<TabularEncoder>,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub threshold: ThresholdRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n: usize,
    pub nll: f64,
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct CrossvalResult {
    pub variant: Variant,
    /// One pooled test prediction per patient, in dataset order.
    pub predictions: Vec<Prediction>,
    pub folds: Vec<FoldModel>,
    pub fold_summaries: Vec<FoldSummary>,
    pub metrics: MetricSet,
}

/// Encoded examples for `indices`; tabular rows are produced by `encoder`.
pub fn examples_for<'a>(
    dataset: &'a LabeledDataset,
    rows: &'a [Vec<f64>],
    indices: &[usize],
    variant: Variant,
) -> Vec<Example<'a>> {
    indices
        .iter()
        .map(|&i| Example {
            volume: variant.uses_image().then(|| &dataset.patients[i].volume),
            tabular: variant.uses_tabular().then(|| rows[i].as_slice()),
            label: dataset.patients[i].label(),
        })
        .collect()
}

fn fit_fold(
    dataset: &LabeledDataset,
    variant: Variant,
    cfg: &CrossvalConfig,
    folds: &FoldAssignment,
    fold: usize,
) -> Result<(FoldModel, Vec<f64>)> {
    let labels = dataset.labels();
    let outer = folds.train_indices(fold);
    let test = folds.test_indices(fold);
    let (train_idx, val_idx) = stratified_holdout(
        &outer,
        &labels,
        cfg.train.validation_fraction,
        cfg.fold_seed.wrapping_mul(1000).wrapping_add(fold as u64),
    )?;
    let (encoder, rows) = if variant.uses_tabular() {
        let records: Vec<_> = outer.iter().map(|&i| &dataset.patients[i].record).collect();
        let enc = TabularEncoder::fit(&dataset.schema, &records)?;
        let rows = dataset
            .patients
            .iter()
            .map(|p| enc.encode(&p.record))
            .collect::<Result<Vec<_>>>()?;
        (Some(enc), rows)
    } else {
        (None, vec![Vec::new(); dataset.len()])
    };
    let network = match (variant.uses_image(), &cfg.network) {
        (false, _) => None,
        (true, Some(n)) => Some(n.clone()),
        (true, None) => Some(NetworkSpec::default_for(dataset.extents)),
    };
    let train = examples_for(dataset, &rows, &train_idx, variant);
    let val = examples_for(dataset, &rows, &val_idx, variant);
    let fit = fit_ensemble(variant, network.as_ref(), &train, &val, &cfg.seeds, &cfg.train)?;
    let mut ensemble = fit.ensemble;
    let val_p1 = val
        .iter()
        .map(|e| Ok(ensemble.predict(e.volume, e.tabular)?.p1))
        .collect::<Result<Vec<_>>>()?;
    let val_labels: Vec<Label> = val.iter().map(|e| e.label).collect();
    let threshold = select_threshold(&val_p1, &val_labels)?;
    ensemble.threshold = Some(threshold.threshold);
    let test_ex = examples_for(dataset, &rows, &test, variant);
    let test_p1 = test_ex
        .iter()
        .map(|e| Ok(ensemble.predict(e.volume, e.tabular)?.p1))
        .collect::<Result<Vec<_>>>()?;
    log::info!(
        "{variant} fold {fold}: {} train / {} validation / {} test",
        train_idx.len(),
        val_idx.len(),
        test.len()
    );
    Ok((
        FoldModel {
            fold,
            ensemble,
            encoder,
            train_indices: train_idx,
            validation_indices: val_idx,
            test_indices: test,
            threshold,
        },
        test_p1,
    ))
}

/// k-fold CV of one variant with metrics on the pooled test predictions.
pub fn crossval(dataset: &LabeledDataset, variant: Variant, cfg: &CrossvalConfig) -> Result<CrossvalResult> {
    cfg.train.validate()?;
    let labels = dataset.labels();
    let folds = stratified_kfold(&labels, cfg.k, cfg.fold_seed)?;
    let fitted = (0..cfg.k)
        .into_par_iter()
        .map(|f| fit_fold(dataset, variant, cfg, &folds, f))
        .collect::<Result<Vec<_>>>()?;

    let mut predictions: Vec<Option<Prediction>> = vec![None; dataset.len()];
    let mut summaries = Vec::with_capacity(cfg.k);
    for (fm, p1s) in &fitted {
        let fold_labels: Vec<Label> = fm.test_indices.iter().map(|&i| labels[i]).collect();
        let t = fm.threshold.threshold;
        let pred: Vec<Label> = p1s.iter().map(|&p| classify(p, t)).collect();
        summaries.push(FoldSummary {
            fold: fm.fold,
            n: p1s.len(),
            nll: nll_from_p1(p1s, &fold_labels)?,
            auc: auc(p1s, &fold_labels).ok(),
            accuracy: Confusion::new(&pred, &fold_labels)?.accuracy(),
            threshold: t,
        });
        for (&i, &p1) in fm.test_indices.iter().zip(p1s) {
            predictions[i] = Some(Prediction {
                id: dataset.patients[i].id.clone(),
                fold: fm.fold,
                label: labels[i],
                p1,
                threshold: t,
            });
        }
    }
    let predictions: Vec<Prediction> = predictions
        .into_iter()
        .map(|p| p.expect("folds partition the dataset"))
        .collect();
    let p1: Vec<f64> = predictions.iter().map(|p| p.p1).collect();
    let thresholds: Vec<f64> = predictions.iter().map(|p| p.threshold).collect();
    let metrics = compute_metrics(&p1, &thresholds, &labels, cfg.bootstrap, cfg.fold_seed ^ 0xB007)?;
    Ok(CrossvalResult {
        variant,
        predictions,
        folds: fitted.into_iter().map(|(f, _)| f).collect(),
        fold_summaries: summaries,
        metrics,
    })
}

/// Runs [`crossval`] for each variant and collects a metrics table.
pub fn crossval_report(
    dataset: &LabeledDataset,
    variants: &[Variant],
    cfg: &CrossvalConfig,
) -> Result<(MetricsTable, Vec<CrossvalResult>)> {
    let mut table = MetricsTable::default();
    let mut results = Vec::new();
    for &v in variants {
        let r = crossval(dataset, v, cfg)?;
        table.columns.push((v.name().to_string(), r.metrics.clone()));
        results.push(r);
    }
    Ok((table, results))
}

pub fn write_predictions_csv<W: Write>(predictions: &[Prediction], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "fold", "p1", "threshold", "predicted", "true"])?;
    for p in predictions {
        w.write_record([
            p.id.clone(),
            p.fold.to_string(),
            p.p1.to_string(),
            p.threshold.to_string(),
            p.predicted().as_str().to_string(),
            p.label.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(())
}
