//! Similarity embedding of explanation maps: features from the trained
//! networks, exact t-SNE, and CSV/HTML export.

use std::io::Write;
use std::path::{Path, PathBuf};

use base64::Engine;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Label;
use crate::nn;
use crate::tensor::Tensor;
use crate::train::EnsembleModel;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub id: String,
    pub values: Vec<f64>,
}

/// Brings a 3D map or a 2D projection to the network input shape; projections
/// are repeated along the axial axis.
fn network_input(input: &Tensor, shape: [usize; 4]) -> Result<Tensor> {
    let [c, ex, ey, ez] = shape;
    let s = input.shape();
    let mismatch = || Error::Shape {
        index: 0,
        kind: "input",
        message: format!("cannot feed {s:?} to a network expecting {shape:?}"),
    };
    if c != 1 {
        return Err(mismatch());
    }
    match s {
        [x, y, z] if [*x, *y, *z] == [ex, ey, ez] => input.clone().reshape(shape.to_vec()),
        [1, x, y, z] if [*x, *y, *z] == [ex, ey, ez] => Ok(input.clone()),
        [x, y] if [*x, *y] == [ex, ey] => {
            let mut data = Vec::with_capacity(ex * ey * ez);
            for &v in input.data() {
                data.extend(std::iter::repeat_n(v, ez));
            }
            Tensor::new(shape.to_vec(), data)
        }
        _ => Err(mismatch()),
    }
}

/// Channel means of each member's `cam_target` activation on `input`,
/// concatenated over members (length `L · M`).
pub fn extract_features(ensemble: &EnsembleModel, input: &Tensor) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for m in ensemble.members() {
        let net = m.network().ok_or(Error::UnsupportedVariant {
            variant: m.variant().name(),
            what: "feature extraction",
        })?;
        let cam = net.spec.cam_index()?;
        let x = network_input(input, net.spec.input)?;
        let a = nn::forward_until(&net.spec, &net.params, &x, cam)?;
        let per = a.len() / a.shape()[0];
        out.extend(
            a.data()
                .chunks_exact(per)
                .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / per as f64),
        );
    }
    Ok(out)
}

/// Symmetrized t-SNE input probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinitySet {
    pub n: usize,
    /// Row-major `n × n` joint probabilities with a zero diagonal.
    pub p: Vec<f64>,
    /// Gaussian bandwidth of each point's conditional distribution.
    pub sigma: Vec<f64>,
    pub perplexity: f64,
    /// Perplexity actually reached by each conditional row.
    pub row_perplexity: Vec<f64>,
    /// Number of coincident point pairs that received jitter.
    pub jittered_pairs: usize,
}

impl AffinitySet {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }
}

/// Perplexity 30, capped at `(n − 1) / 3`.
pub fn default_perplexity(n: usize) -> f64 {
    30.0f64.min((n as f64 - 1.0) / 3.0)
}

pub const PERPLEXITY_TOL: f64 = 1e-5;
const JITTER: f64 = 1e-10;

fn squared_distances(features: &[Vec<f64>]) -> Vec<f64> {
    let n = features.len();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            features
                .iter()
                .map(move |b| features[i].iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        })
        .collect()
}

/// Conditional row for precision `beta`: returns (probabilities, entropy in nats).
fn conditional_row(d: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let w: Vec<f64> = d.iter().map(|&v| (-beta * v).exp()).collect();
    let z: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|v| v / z).collect();
    let mean_d: f64 = p.iter().zip(d).map(|(a, b)| a * b).sum();
    (p, z.ln() + beta * mean_d)
}

/// Binary search over `ln β` for the row whose perplexity is `target`.
fn calibrate_row(d: &[f64], target: f64) -> (Vec<f64>, f64, f64) {
    let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = d.iter().map(|v| v - dmin).collect();
    let mean = shifted.iter().sum::<f64>() / shifted.len() as f64;
    let center = if mean > 0.0 { (1.0 / mean).ln() } else { 0.0 };
    let (mut lo, mut hi) = (center - 30.0, center + 30.0);
    let goal = target.ln();
    let mut lb = center;
    let mut best = conditional_row(&shifted, lb.exp());
    for _ in 0..50 {
        if (best.1 - goal).abs() < PERPLEXITY_TOL {
            break;
        }
        if best.1 > goal {
            lo = lb;
        } else {
            hi = lb;
        }
        lb = (lo + hi) / 2.0;
        best = conditional_row(&shifted, lb.exp());
    }
    (best.0, lb.exp(), best.1.exp())
}

/// Gaussian affinities with per-point bandwidths matching `perplexity`.
pub fn calibrate_affinities(features: &[Vec<f64>], perplexity: f64) -> Result<AffinitySet> {
    let n = features.len();
    if !(perplexity > 0.0) || (n as f64) < 3.0 * perplexity + 1.0 {
        return Err(Error::Config(format!(
            "t-SNE needs at least 3·perplexity + 1 points: {n} points for perplexity {perplexity}"
        )));
    }
    let d = features.first().map(Vec::len).unwrap_or(0);
    if features
        .iter()
        .any(|f| f.len() != d || f.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Config(
            "feature vectors must be finite and of equal length".into(),
        ));
    }
    let mut dist = squared_distances(features);
    let mut jittered_pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            if dist[i * n + j] == 0.0 {
                dist[i * n + j] = JITTER;
                dist[j * n + i] = JITTER;
                jittered_pairs += 1;
            }
        }
    }
    if jittered_pairs > 0 {
        log::warn!("{jittered_pairs} pairs of identical feature vectors; distances jittered by {JITTER}");
    }
    let rows: Vec<(Vec<f64>, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).collect();
            calibrate_row(&others, perplexity)
        })
        .collect();
    let unreached = rows
        .iter()
        .filter(|r| (r.2.ln() - perplexity.ln()).abs() >= PERPLEXITY_TOL)
        .count();
    if unreached > 0 {
        log::warn!("{unreached} affinity rows did not reach perplexity {perplexity}");
    }
    let mut cond = vec![0.0; n * n];
    for (i, (row, _, _)) in rows.iter().enumerate() {
        let mut k = 0;
        for j in 0..n {
            if j != i {
                cond[i * n + j] = row[k];
                k += 1;
            }
        }
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
            }
        }
    }
    Ok(AffinitySet {
        n,
        p,
        sigma: rows.iter().map(|r| (1.0 / (2.0 * r.1)).sqrt()).collect(),
        perplexity,
        row_perplexity: rows.iter().map(|r| r.2).collect(),
        jittered_pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub init_sd: f64,
    pub seed: u64,
    /// Per-coordinate step gains (grow when the gradient flips sign, shrink otherwise).
    pub adaptive_gains: bool,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            init_sd: 1e-4,
            seed: 0,
            adaptive_gains: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P‖Q) after every iteration, with unexaggerated P.
    pub kl: Vec<f64>,
}

fn student_t(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                z += v;
            }
        }
    }
    (num, z)
}

/// KL(P‖Q) of an embedding.
pub fn kl_divergence(aff: &AffinitySet, y: &[[f64; 2]]) -> f64 {
    let (num, z) = student_t(y);
    kl_from(aff, &num, z)
}

fn kl_from(aff: &AffinitySet, num: &[f64], z: f64) -> f64 {
    aff.p
        .iter()
        .zip(num)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / (q / z)).ln())
        .sum()
}

fn centered(mut y: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    let n = y.len() as f64;
    let mean = [0, 1].map(|a| y.iter().map(|p| p[a]).sum::<f64>() / n);
    for p in &mut y {
        p[0] -= mean[0];
        p[1] -= mean[1];
    }
    y
}

/// Exact t-SNE by gradient descent with momentum.
///
/// After the exaggeration phase a momentum step that would raise KL(P‖Q) is
/// replaced by a backtracking step along the plain gradient, with the
/// momentum and gains reset, so the reported KL never increases there.
pub fn tsne(aff: &AffinitySet, cfg: &TsneConfig) -> Result<TsneResult> {
    let n = aff.n;
    if n < 2 {
        return Err(Error::Config("t-SNE needs at least two points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl = Vec::with_capacity(cfg.iterations);
    let (mut num, mut z) = student_t(&y);
    let mut current = kl_from(aff, &num, z);
    for it in 0..cfg.iterations {
        let exaggerating = it < cfg.exaggeration_iterations;
        let exaggerate = if exaggerating { cfg.exaggeration } else { 1.0 };
        let momentum = if exaggerating {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        let grad: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if i != j {
                        let w = (exaggerate * aff.p[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                        g[0] += w * (y[i][0] - y[j][0]);
                        g[1] += w * (y[i][1] - y[j][1]);
                    }
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();
        if grad.iter().any(|g| !g[0].is_finite() || !g[1].is_finite()) {
            return Err(Error::Numeric(format!("non-finite t-SNE gradient at iteration {it}")));
        }
        let mut next_update = update.clone();
        let mut next_gains = gains.clone();
        for i in 0..n {
            for a in 0..2 {
                if cfg.adaptive_gains {
                    next_gains[i][a] = if (grad[i][a] > 0.0) != (update[i][a] > 0.0) {
                        gains[i][a] + 0.2
                    } else {
                        (gains[i][a] * 0.8).max(0.01)
                    };
                }
                next_update[i][a] = momentum * update[i][a] - cfg.learning_rate * next_gains[i][a] * grad[i][a];
            }
        }
        let step = |u: &[[f64; 2]]| centered(y.iter().zip(u).map(|(p, d)| [p[0] + d[0], p[1] + d[1]]).collect());
        let mut cand = step(&next_update);
        let (mut cnum, mut cz) = student_t(&cand);
        let mut ckl = kl_from(aff, &cnum, cz);
        if !exaggerating && !(ckl <= current) {
            next_gains = vec![[1.0; 2]; n];
            let mut accepted = false;
            let mut rate = cfg.learning_rate;
            for _ in 0..40 {
                next_update = grad.iter().map(|g| [-rate * g[0], -rate * g[1]]).collect();
                cand = step(&next_update);
                (cnum, cz) = student_t(&cand);
                ckl = kl_from(aff, &cnum, cz);
                if ckl <= current {
                    accepted = true;
                    break;
                }
                rate /= 2.0;
            }
            if !accepted {
                next_update = vec![[0.0; 2]; n];
                cand = y.clone();
                (cnum, cz) = (num.clone(), z);
                ckl = current;
            }
        }
        y = cand;
        update = next_update;
        gains = next_gains;
        num = cnum;
        z = cz;
        current = ckl;
        if !current.is_finite() {
            return Err(Error::Numeric(format!("non-finite KL divergence at iteration {it}")));
        }
        kl.push(current);
    }
    Ok(TsneResult { coords: y, kl })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub predicted: Label,
    pub truth: Label,
}

impl EmbeddingPoint {
    pub fn correct(&self) -> bool {
        self.predicted == self.truth
    }
}

/// `id,x,y,predicted,true,correct`
pub fn write_embedding_csv<W: Write>(points: &[EmbeddingPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "x", "y", "predicted", "true", "correct"])?;
    for p in points {
        w.write_record([
            p.id.clone(),
            p.x.to_string(),
            p.y.to_string(),
            p.predicted.as_str().to_string(),
            p.truth.as_str().to_string(),
            p.correct().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<embedding>", e))?;
    Ok(())
}

pub fn read_embedding_csv(path: &Path) -> Result<Vec<EmbeddingPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let parse_err = |column: &str, message: String| Error::Parse {
            path: path.to_path_buf(),
            row: row + 2,
            column: column.to_string(),
            message,
        };
        let num = |c: usize, name: &str| field(c).parse::<f64>().map_err(|e| parse_err(name, e.to_string()));
        let label = |c: usize, name: &str| field(c).parse::<Label>().map_err(|e| parse_err(name, e.to_string()));
        out.push(EmbeddingPoint {
            id: field(0).to_string(),
            x: num(1, "x")?,
            y: num(2, "y")?,
            predicted: label(3, "predicted")?,
            truth: label(4, "true")?,
        });
    }
    Ok(out)
}

/// Reads PNG thumbnails; missing files become `None` with a warning.
pub fn load_thumbnails(paths: &[Option<PathBuf>]) -> Vec<Option<Vec<u8>>> {
    paths
        .iter()
        .map(|p| {
            let p = p.as_ref()?;
            match std::fs::read(p) {
                Ok(b) => Some(b),
                Err(e) => {
                    log::warn!("thumbnail {} unavailable ({e}); using a placeholder", p.display());
                    None
                }
            }
        })
        .collect()
}

#[derive(Serialize)]
struct HtmlPoint<'a> {
    id: &'a str,
    x: f64,
    y: f64,
    predicted: &'static str,
    truth: &'static str,
    correct: bool,
    thumb: Option<String>,
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Self-contained scatter page: an inline SVG with one marker per point
/// (color = predicted class, hollow = misclassified) and hover thumbnails.
pub fn render_html(points: &[EmbeddingPoint], thumbnails: &[Option<Vec<u8>>]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::Config("nothing to export".into()));
    }
    let size = 640.0;
    let pad = 24.0;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let px = |v: f64, lo: f64| pad + (v - lo) / span * (size - 2.0 * pad);
    let color = |l: Label| if l.is_positive() { "#c0392b" } else { "#2471a3" };

    let mut svg = String::new();
    for (i, p) in points.iter().enumerate() {
        let c = color(p.predicted);
        let (fill, stroke) = if p.correct() { (c, "none") } else { ("none", c) };
        svg.push_str(&format!(
            "<circle data-i=\"{i}\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"{fill}\" stroke=\"{stroke}\" stroke-width=\"2\"><title>{}</title></circle>\n",
            px(p.x, x0),
            size - px(p.y, y0),
            escape_html(&p.id)
        ));
    }
    let engine = base64::engine::general_purpose::STANDARD;
    let data: Vec<HtmlPoint> = points
        .iter()
        .enumerate()
        .map(|(i, p)| HtmlPoint {
            id: &p.id,
            x: p.x,
            y: p.y,
            predicted: p.predicted.as_str(),
            truth: p.truth.as_str(),
            correct: p.correct(),
            thumb: thumbnails
                .get(i)
                .and_then(|t| t.as_ref())
                .map(|b| format!("data:image/png;base64,{}", engine.encode(b))),
        })
        .collect();
    let json = serde_json::to_string(&data)
        .map_err(|e| Error::Format {
            offset: 0,
            message: e.to_string(),
        })?
        .replace("</", "<\\/");
    Ok(format!(
        r#"<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>Explanation map similarity</title>
<style>
body {{ font-family: sans-serif; display: flex; gap: 16px; margin: 16px; }}
svg {{ border: 1px solid #ccc; background: #fff; }}
#panel {{ width: 200px; }}
#thumb {{ width: 160px; height: 160px; image-rendering: pixelated; background: #ddd; display: block; }}
.key span {{ display: inline-block; width: 10px; height: 10px; border-radius: 5px; margin-right: 4px; }}
</style></head>
<body>
<svg id="plot" width="{size}" height="{size}" viewBox="0 0 {size} {size}">
{svg}</svg>
<div id="panel">
<div class="key"><span style="background:#2471a3"></span>predicted favorable</div>
<div class="key"><span style="background:#c0392b"></span>predicted unfavorable</div>
<div class="key"><span style="border:2px solid #777;width:6px;height:6px"></span>misclassified (hollow)</div>
<hr><img id="thumb" alt="no image"><div id="info">hover a point</div>
</div>
<script id="points" type="application/json">{json}</script>
<script>
const DATA = JSON.parse(document.getElementById("points").textContent);
const thumb = document.getElementById("thumb");
const info = document.getElementById("info");
document.querySelectorAll("circle").forEach(c => c.addEventListener("mouseenter", () => {{
  const d = DATA[+c.dataset.i];
  thumb.src = d.thumb || "";
  info.textContent = d.id + ": predicted " + d.predicted + ", true " + d.truth;
}}));
</script>
</body></html>
"#
    ))
}
