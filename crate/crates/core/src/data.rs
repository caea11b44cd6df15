//! Datasets: volumes, tabular records, labels, and the synthetic generator.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logistic, Label};
use crate::stats;
use crate::tensor::{checked_len, Tensor};

pub const VOLUME_MAGIC: &[u8; 4] = b"VOL1";

/// Rescales a volume to zero mean and unit (population) standard deviation.
pub fn standardize_volume(raw: &Tensor) -> Result<Tensor> {
    let n = raw.len() as f64;
    let mean = raw.mean();
    let var = raw
        .data()
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    if !(sd > 1e-12) {
        return Err(Error::DegenerateData("volume has zero variance".into()));
    }
    Ok(raw.map(|v| ((v as f64 - mean) / sd) as f32))
}

/// Serializes a tensor as `VOL1 | u8 rank | u32 extents (LE) | f32 payload (LE)`.
pub fn encode_volume(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Payload size in bytes announced by a header with these extents.
pub fn volume_payload_len(extents: &[usize]) -> Result<usize> {
    checked_len(extents)?
        .checked_mul(4)
        .ok_or_else(|| Error::Tensor("payload size overflows".into()))
}

pub fn decode_volume(bytes: &[u8]) -> Result<Tensor> {
    let fmt = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 5 {
        return Err(fmt(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err(fmt(4, "rank must be positive".into()));
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(fmt(
            bytes.len(),
            format!("truncated extents: need {header} header bytes"),
        ));
    }
    let extents: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if let Some(pos) = extents.iter().position(|&e| e == 0) {
        return Err(fmt(5 + 4 * pos, "zero extent".into()));
    }
    let payload = volume_payload_len(&extents).map_err(|e| fmt(5, e.to_string()))?;
    let expected = header
        .checked_add(payload)
        .ok_or_else(|| fmt(5, "extent overflow".into()))?;
    if bytes.len() < expected {
        return Err(fmt(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(fmt(expected, "trailing bytes after payload".into()));
    }
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(fmt(header + 4 * pos, "non-finite value".into()));
    }
    Tensor::new(extents, data)
}

pub fn write_volume(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_volume(t)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    /// Levels in reference-first order; inferred (sorted) from training data when absent.
    Categorical {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<String>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    pub features: Vec<FeatureSpec>,
}

fn default_id_column() -> String {
    "id".into()
}

fn default_label_column() -> String {
    "outcome".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RawValue {
    Numeric(f64),
    Level(String),
}

/// One parsed row of the tabular file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub id: String,
    pub values: Vec<RawValue>,
    pub label: Label,
}

pub fn load_tabular_csv(path: &Path, schema: &TabularSchema) -> Result<Vec<RawRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tabular_csv(file, path, schema)
}

pub fn read_tabular_csv<R: std::io::Read>(reader: R, path: &Path, schema: &TabularSchema) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: name.to_string(),
            message: "column missing from header".into(),
        })
    };
    let id_col = column(&schema.id_column)?;
    let label_col = column(&schema.label_column)?;
    let feature_cols = schema
        .features
        .iter()
        .map(|f| column(&f.name))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let err = |column: &str, message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: column.to_string(),
            message,
        };
        let cell = |i: usize, name: &str| -> Result<&str> {
            match rec.get(i) {
                Some(s) if !s.is_empty() => Ok(s),
                _ => Err(err(name, "missing value".into())),
            }
        };
        let id = cell(id_col, &schema.id_column)?.to_string();
        if !seen.insert(id.clone()) {
            return Err(err(&schema.id_column, format!("duplicate id `{id}`")));
        }
        let label_text = cell(label_col, &schema.label_column)?;
        let label = label_text
            .parse::<Label>()
            .map_err(|_| err(&schema.label_column, format!("unknown outcome `{label_text}`")))?;
        let mut values = Vec::with_capacity(schema.features.len());
        for (f, &ci) in schema.features.iter().zip(&feature_cols) {
            let text = cell(ci, &f.name)?;
            values.push(match f.kind {
                FeatureKind::Numeric => match text.parse::<f64>() {
                    Ok(v) if v.is_finite() => RawValue::Numeric(v),
                    _ => return Err(err(&f.name, format!("expected a number, got `{text}`"))),
                },
                FeatureKind::Categorical { .. } => RawValue::Level(text.to_string()),
            });
        }
        out.push(RawRecord { id, values, label });
    }
    Ok(out)
}

/// Name and meaning of one encoded column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedColumn {
    pub name: String,
    pub source: String,
    /// Reference level for a dummy column; `None` for a standardized numeric.
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum FeatureCoding {
    Numeric { mean: f64, sd: f64 },
    Categorical { levels: Vec<String> },
}

/// Dummy coding and standardization fitted on training records only.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularEncoder {
    names: Vec<String>,
    codings: Vec<FeatureCoding>,
}

impl TabularEncoder {
    pub fn fit(schema: &TabularSchema, training: &[&RawRecord]) -> Result<Self> {
        if training.len() < 2 {
            return Err(Error::DegenerateData(
                "encoder needs at least two training records".into(),
            ));
        }
        let mut codings = Vec::new();
        for (k, f) in schema.features.iter().enumerate() {
            let coding = match &f.kind {
                FeatureKind::Numeric => {
                    let xs: Vec<f64> = training
                        .iter()
                        .map(|r| match &r.values[k] {
                            RawValue::Numeric(v) => Ok(*v),
                            RawValue::Level(l) => Err(Error::Encoding {
                                feature: f.name.clone(),
                                message: format!("expected numeric value, got level `{l}`"),
                            }),
                        })
                        .collect::<Result<_>>()?;
                    let sd = stats::sample_sd(&xs);
                    if !(sd > 0.0) {
                        return Err(Error::Encoding {
                            feature: f.name.clone(),
                            message: "zero variance in training data".into(),
                        });
                    }
                    FeatureCoding::Numeric {
                        mean: stats::mean(&xs),
                        sd,
                    }
                }
                FeatureKind::Categorical { levels } => {
                    let levels = match levels {
                        Some(l) => l.clone(),
                        None => training
                            .iter()
                            .filter_map(|r| match &r.values[k] {
                                RawValue::Level(l) => Some(l.clone()),
                                RawValue::Numeric(_) => None,
                            })
                            .collect::<BTreeSet<_>>()
                            .into_iter()
                            .collect(),
                    };
                    if levels.is_empty() {
                        return Err(Error::Encoding {
                            feature: f.name.clone(),
                            message: "no levels".into(),
                        });
                    }
                    FeatureCoding::Categorical { levels }
                }
            };
            codings.push(coding);
        }
        Ok(TabularEncoder {
            names: schema.features.iter().map(|f| f.name.clone()).collect(),
            codings,
        })
    }

    pub fn width(&self) -> usize {
        self.codings
            .iter()
            .map(|c| match c {
                FeatureCoding::Numeric { .. } => 1,
                FeatureCoding::Categorical { levels } => levels.len() - 1,
            })
            .sum()
    }

    pub fn columns(&self) -> Vec<EncodedColumn> {
        let mut out = Vec::new();
        for (name, c) in self.names.iter().zip(&self.codings) {
            match c {
                FeatureCoding::Numeric { .. } => out.push(EncodedColumn {
                    name: name.clone(),
                    source: name.clone(),
                    reference: None,
                }),
                FeatureCoding::Categorical { levels } => {
                    for l in &levels[1..] {
                        out.push(EncodedColumn {
                            name: format!("{name}={l}"),
                            source: name.clone(),
                            reference: Some(levels[0].clone()),
                        });
                    }
                }
            }
        }
        out
    }

    /// Training mean and sd of a numeric feature.
    pub fn numeric_stats(&self, feature: &str) -> Option<(f64, f64)> {
        let k = self.names.iter().position(|n| n == feature)?;
        match self.codings[k] {
            FeatureCoding::Numeric { mean, sd } => Some((mean, sd)),
            FeatureCoding::Categorical { .. } => None,
        }
    }

    pub fn encode(&self, record: &RawRecord) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width());
        for ((name, coding), value) in self.names.iter().zip(&self.codings).zip(&record.values) {
            match (coding, value) {
                (FeatureCoding::Numeric { mean, sd }, RawValue::Numeric(v)) => out.push((v - mean) / sd),
                (FeatureCoding::Categorical { levels }, RawValue::Level(l)) => {
                    let pos = levels.iter().position(|x| x == l).ok_or_else(|| Error::Encoding {
                        feature: name.clone(),
                        message: format!("level `{l}` was not seen in training data"),
                    })?;
                    out.extend((1..levels.len()).map(|i| if i == pos { 1.0 } else { 0.0 }));
                }
                _ => {
                    return Err(Error::Encoding {
                        feature: name.clone(),
                        message: "value type does not match schema".into(),
                    })
                }
            }
        }
        Ok(out)
    }
}

/// Volume, raw tabular row and label for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub volume: Tensor,
    pub record: RawRecord,
}

impl Patient {
    pub fn label(&self) -> Label {
        self.record.label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub schema: TabularSchema,
    pub extents: [usize; 3],
    pub patients: Vec<Patient>,
}

impl LabeledDataset {
    pub fn new(schema: TabularSchema, extents: [usize; 3], patients: Vec<Patient>) -> Result<Self> {
        if patients.is_empty() {
            return Err(Error::DegenerateData("dataset is empty".into()));
        }
        for p in &patients {
            if p.id != p.record.id {
                return Err(Error::DegenerateData(format!(
                    "id mismatch: {} vs {}",
                    p.id, p.record.id
                )));
            }
            if p.volume.shape() != extents.as_slice() {
                return Err(Error::DegenerateData(format!(
                    "patient {} has volume {:?}, expected {extents:?}",
                    p.id,
                    p.volume.shape()
                )));
            }
            if p.record.values.len() != schema.features.len() {
                return Err(Error::DegenerateData(format!(
                    "patient {} has wrong feature count",
                    p.id
                )));
            }
        }
        let positives = patients.iter().filter(|p| p.label().is_positive()).count();
        if positives == 0 || positives == patients.len() {
            return Err(Error::DegenerateData("both outcome classes must be present".into()));
        }
        Ok(LabeledDataset {
            schema,
            extents,
            patients,
        })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.patients.iter().map(Patient::label).collect()
    }
}

/// Parameters of the planted-signal generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub extents: [usize; 3],
    /// Lesion radius range in in-plane voxels.
    pub radius: [f64; 2],
    pub intensity: f64,
    /// Slice thickness relative to in-plane voxel size.
    pub z_spacing: f64,
    pub noise_sd: f64,
    pub numeric_features: Vec<String>,
    pub binary_features: Vec<String>,
    pub binary_rate: f64,
    /// Shift coefficients, numerics first then binaries.
    pub beta: Vec<f64>,
    pub intercept: f64,
    /// Effect of the standardized lesion volume on h.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 400,
            extents: [32, 32, 8],
            radius: [1.5, 4.5],
            intensity: 3.0,
            z_spacing: 2.0,
            noise_sd: 1.0,
            numeric_features: vec!["age".into(), "nihss".into()],
            binary_features: vec!["prior_stroke".into()],
            binary_rate: 0.3,
            beta: vec![-0.5, -1.0, -0.5],
            intercept: 1.5,
            gamma: -3.0,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n < 4 {
            return bad("n must be at least 4");
        }
        if self.extents.iter().any(|&e| e < 2) {
            return bad("extents must be at least 2");
        }
        if !(self.radius[0] > 0.0 && self.radius[1] >= self.radius[0]) {
            return bad("radius range must be positive and ordered");
        }
        if self.beta.len() != self.numeric_features.len() + self.binary_features.len() {
            return bad("beta length must equal numeric + binary feature count");
        }
        if !(self.noise_sd > 0.0) || !(self.z_spacing > 0.0) {
            return bad("noise_sd and z_spacing must be positive");
        }
        if !(0.0..=1.0).contains(&self.binary_rate) {
            return bad("binary_rate must be in [0, 1]");
        }
        Ok(())
    }

    pub fn schema(&self) -> TabularSchema {
        let mut features: Vec<FeatureSpec> = self
            .numeric_features
            .iter()
            .map(|n| FeatureSpec {
                name: n.clone(),
                kind: FeatureKind::Numeric,
            })
            .collect();
        features.extend(self.binary_features.iter().map(|n| FeatureSpec {
            name: n.clone(),
            kind: FeatureKind::Categorical {
                levels: Some(vec!["no".into(), "yes".into()]),
            },
        }));
        TabularSchema {
            id_column: default_id_column(),
            label_column: default_label_column(),
            features,
        }
    }
}

/// Generator internals for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub id: String,
    pub center: [f64; 3],
    pub radius: f64,
    pub lesion_voxels: usize,
    pub z_lesion: f64,
    /// Tabular draws on the coefficient scale (numerics N(0,1), binaries 0/1).
    pub x: Vec<f64>,
    pub linear_predictor: f64,
    pub p_unfavorable: f64,
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub dataset: LabeledDataset,
    pub truth: Vec<GroundTruth>,
    pub warnings: Vec<String>,
}

pub fn patient_id(i: usize) -> String {
    format!("P{:04}", i + 1)
}

fn record_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index as u64);
    rng
}

/// Noise volumes with one Gaussian blob each; labels drawn from
/// `P(unfavorable) = σ(−(ϑ* + γ*·z_lesion + xᵀβ*))`.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let [ex, ey, ez] = spec.extents;
    let blobs: Vec<_> = (0..spec.n)
        .map(|i| {
            let mut rng = record_rng(spec.seed, 1, i);
            let radius = rng.random_range(spec.radius[0]..=spec.radius[1]);
            let margin = |extent: usize, r: f64| {
                let lo = r.min(extent as f64 / 2.0 - 0.5);
                (lo, extent as f64 - 1.0 - lo)
            };
            let (x0, x1) = margin(ex, radius);
            let (y0, y1) = margin(ey, radius);
            let (z0, z1) = margin(ez, radius / spec.z_spacing);
            let center = [
                rng.random_range(x0..=x1),
                rng.random_range(y0..=y1),
                rng.random_range(z0..=z1),
            ];
            let sigma = radius / 2.0;
            let mut volume = Vec::with_capacity(ex * ey * ez);
            let mut mask = Vec::with_capacity(ex * ey * ez);
            for x in 0..ex {
                for y in 0..ey {
                    for z in 0..ez {
                        let dx = x as f64 - center[0];
                        let dy = y as f64 - center[1];
                        let dz = (z as f64 - center[2]) * spec.z_spacing;
                        let d2 = dx * dx + dy * dy + dz * dz;
                        let noise: f64 = rng.sample(StandardNormal);
                        let blob = spec.intensity * (-d2 / (2.0 * sigma * sigma)).exp();
                        volume.push((blob + spec.noise_sd * noise) as f32);
                        mask.push(if d2 <= radius * radius { 1.0f32 } else { 0.0 });
                    }
                }
            }
            let mut x: Vec<f64> = Vec::with_capacity(spec.beta.len());
            for _ in &spec.numeric_features {
                x.push(rng.sample(StandardNormal));
            }
            for _ in &spec.binary_features {
                x.push(if rng.random::<f64>() < spec.binary_rate {
                    1.0
                } else {
                    0.0
                });
            }
            let voxels = mask.iter().filter(|&&m| m > 0.0).count();
            (center, radius, volume, mask, voxels, x)
        })
        .collect();

    let volumes: Vec<f64> = blobs.iter().map(|b| b.4 as f64).collect();
    let v_mean = stats::mean(&volumes);
    let v_sd = stats::sample_sd(&volumes);
    if !(v_sd > 0.0) {
        return Err(Error::DegenerateData("all lesions have the same volume".into()));
    }

    let schema = spec.schema();
    let mut patients = Vec::with_capacity(spec.n);
    let mut truth = Vec::with_capacity(spec.n);
    for (i, (center, radius, volume, mask, voxels, x)) in blobs.into_iter().enumerate() {
        let id = patient_id(i);
        let z_lesion = (voxels as f64 - v_mean) / v_sd;
        let linear_predictor =
            spec.intercept + spec.gamma * z_lesion + x.iter().zip(&spec.beta).map(|(a, b)| a * b).sum::<f64>();
        let p_unfavorable = logistic(-linear_predictor);
        let mut rng = record_rng(spec.seed, 2, i);
        let label = Label::from_positive(rng.random::<f64>() < p_unfavorable);
        let raw = Tensor::new(spec.extents.to_vec(), volume)?;
        let values = x
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                if k < spec.numeric_features.len() {
                    RawValue::Numeric(v)
                } else {
                    RawValue::Level(if v > 0.5 { "yes" } else { "no" }.into())
                }
            })
            .collect();
        patients.push(Patient {
            id: id.clone(),
            volume: standardize_volume(&raw)?,
            record: RawRecord {
                id: id.clone(),
                values,
                label,
            },
        });
        truth.push(GroundTruth {
            id,
            center,
            radius,
            lesion_voxels: voxels,
            z_lesion,
            x,
            linear_predictor,
            p_unfavorable,
            mask: Tensor::new(spec.extents.to_vec(), mask)?,
        });
    }

    let mut warnings = Vec::new();
    let prevalence = patients.iter().filter(|p| p.label().is_positive()).count() as f64 / spec.n as f64;
    if !(0.05..=0.95).contains(&prevalence) {
        let w = format!("realized unfavorable prevalence {prevalence:.3} is outside [0.05, 0.95]");
        log::warn!("{w}");
        warnings.push(w);
    }
    let dataset = LabeledDataset::new(schema, spec.extents, patients)?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        dataset,
        truth,
        warnings,
    })
}

/// On-disk description of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub extents: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub tabular: PathBuf,
    pub volumes_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks_dir: Option<PathBuf>,
    pub schema: TabularSchema,
}

pub const MANIFEST_FORMAT: &str = "dtm-dataset-1";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Config(format!(
                "{}: unsupported format `{}`",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }
}

/// Loads the dataset a manifest points at; relative paths resolve against the manifest's directory.
/// Volumes are standardized per volume, which leaves already standardized ones unchanged.
pub fn load_dataset(manifest_path: &Path) -> Result<(Manifest, LabeledDataset)> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let records = load_tabular_csv(&root.join(&manifest.tabular), &manifest.schema)?;
    let vol_dir = root.join(&manifest.volumes_dir);
    let patients = records
        .into_iter()
        .map(|record| {
            let volume = standardize_volume(&read_volume(&vol_dir.join(format!("{}.vol", record.id)))?)?;
            Ok(Patient {
                id: record.id.clone(),
                volume,
                record,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = LabeledDataset::new(manifest.schema.clone(), manifest.extents, patients)?;
    Ok((manifest, ds))
}

/// Lesion masks referenced by a manifest, in patient order.
pub fn load_masks(manifest_path: &Path, manifest: &Manifest, ids: &[String]) -> Result<Option<Vec<Tensor>>> {
    let Some(dir) = &manifest.masks_dir else {
        return Ok(None);
    };
    let root = manifest_path.parent().unwrap_or(Path::new(".")).join(dir);
    ids.iter()
        .map(|id| read_volume(&root.join(format!("{id}.vol"))))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Writes manifest, volumes, tabular CSV, ground-truth CSV and masks into `dir`.
pub fn save_synthetic(dir: &Path, synth: &SyntheticDataset) -> Result<PathBuf> {
    let vol_dir = dir.join("volumes");
    let mask_dir = dir.join("masks");
    for d in [dir, vol_dir.as_path(), mask_dir.as_path()] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let ds = &synth.dataset;
    for (p, t) in ds.patients.iter().zip(&synth.truth) {
        write_volume(&vol_dir.join(format!("{}.vol", p.id)), &p.volume)?;
        write_volume(&mask_dir.join(format!("{}.vol", p.id)), &t.mask)?;
    }

    let tab_path = dir.join("tabular.csv");
    let mut w = csv::Writer::from_path(&tab_path)?;
    let mut header = vec![ds.schema.id_column.clone()];
    header.extend(ds.schema.features.iter().map(|f| f.name.clone()));
    header.push(ds.schema.label_column.clone());
    w.write_record(&header)?;
    for p in &ds.patients {
        let mut row = vec![p.id.clone()];
        row.extend(p.record.values.iter().map(|v| match v {
            RawValue::Numeric(x) => x.to_string(),
            RawValue::Level(l) => l.clone(),
        }));
        row.push(p.label().to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&tab_path, e))?;

    let gt_path = dir.join("ground_truth.csv");
    let mut w = csv::Writer::from_path(&gt_path)?;
    w.write_record([
        "id",
        "center_x",
        "center_y",
        "center_z",
        "radius",
        "lesion_voxels",
        "z_lesion",
        "linear_predictor",
        "p_unfavorable",
        "outcome",
    ])?;
    for (p, t) in ds.patients.iter().zip(&synth.truth) {
        w.write_record([
            t.id.clone(),
            t.center[0].to_string(),
            t.center[1].to_string(),
            t.center[2].to_string(),
            t.radius.to_string(),
            t.lesion_voxels.to_string(),
            t.z_lesion.to_string(),
            t.linear_predictor.to_string(),
            t.p_unfavorable.to_string(),
            p.label().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&gt_path, e))?;

    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        extents: ds.extents,
        seed: Some(synth.spec.seed),
        tabular: "tabular.csv".into(),
        volumes_dir: "volumes".into(),
        ground_truth: Some("ground_truth.csv".into()),
        masks_dir: Some("masks".into()),
        schema: ds.schema.clone(),
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_tensor(shape: &[usize], seed: u64, scale: f32, offset: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| offset + scale * rng.random::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn standardization_moments_and_idempotence() {
        let raw = random_tensor(&[16, 16, 6], 3, 40.0, 100.0);
        let s = standardize_volume(&raw).unwrap();
        let mean = s.mean();
        let sd = (s.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
        assert!(mean.abs() < 1e-4);
        assert!((sd - 1.0).abs() < 1e-3);
        let again = standardize_volume(&s).unwrap();
        for (a, b) in s.data().iter().zip(again.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(standardize_volume(&Tensor::filled(&[4, 4, 2], 3.0)).is_err());
    }

    #[test]
    fn volume_format_errors() {
        let t = random_tensor(&[3, 2, 2], 1, 1.0, 0.0);
        let bytes = encode_volume(&t);
        assert_eq!(decode_volume(&bytes).unwrap(), t);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume(&bad), Err(Error::Format { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_volume(cut), Err(Error::Format { .. })));
        assert!(matches!(decode_volume(&bytes[..7]), Err(Error::Format { .. })));

        let mut huge = b"VOL1".to_vec();
        huge.push(4);
        for _ in 0..4 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode_volume(&huge), Err(Error::Format { .. })));
    }

    #[test]
    fn full_scale_payload_size() {
        assert_eq!(volume_payload_len(&[128, 128, 28]).unwrap(), 1_835_008);
        let t = Tensor::zeros(&[128, 128, 28]);
        assert_eq!(encode_volume(&t).len(), 5 + 12 + 1_835_008);
    }

    fn schema() -> TabularSchema {
        TabularSchema {
            id_column: "id".into(),
            label_column: "outcome".into(),
            features: vec![
                FeatureSpec {
                    name: "age".into(),
                    kind: FeatureKind::Numeric,
                },
                FeatureSpec {
                    name: "nihss".into(),
                    kind: FeatureKind::Numeric,
                },
                FeatureSpec {
                    name: "smoking".into(),
                    kind: FeatureKind::Categorical {
                        levels: Some(vec!["no".into(), "yes".into()]),
                    },
                },
            ],
        }
    }

    #[test]
    fn tabular_csv_parsing() {
        let text = "id,age,nihss,smoking,outcome\nA,71,4,no,favorable\nB,80,12,yes,unfavorable\n";
        let recs = read_tabular_csv(text.as_bytes(), Path::new("t.csv"), &schema()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].values[0], RawValue::Numeric(80.0));
        assert_eq!(recs[1].label, Label::Unfavorable);

        let bad = "id,age,nihss,smoking,outcome\nA,71,4,no,favorable\nB,80,high,yes,unfavorable\n";
        match read_tabular_csv(bad.as_bytes(), Path::new("t.csv"), &schema()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "nihss");
            }
            other => panic!("unexpected {other:?}"),
        }
        let missing = "id,age,nihss,smoking,outcome\n,71,4,no,favorable\n";
        assert!(matches!(
            read_tabular_csv(missing.as_bytes(), Path::new("t.csv"), &schema()),
            Err(Error::Parse { row: 2, .. })
        ));
        let no_col = "id,age,smoking,outcome\nA,71,no,favorable\n";
        assert!(read_tabular_csv(no_col.as_bytes(), Path::new("t.csv"), &schema()).is_err());
    }

    fn rec(id: &str, vals: Vec<RawValue>) -> RawRecord {
        RawRecord {
            id: id.into(),
            values: vals,
            label: Label::Favorable,
        }
    }

    #[test]
    fn encoding_rules() {
        let s = TabularSchema {
            id_column: "id".into(),
            label_column: "outcome".into(),
            features: vec![
                FeatureSpec {
                    name: "sex".into(),
                    kind: FeatureKind::Categorical {
                        levels: Some(vec!["no".into(), "yes".into()]),
                    },
                },
                FeatureSpec {
                    name: "age".into(),
                    kind: FeatureKind::Numeric,
                },
                FeatureSpec {
                    name: "mrs".into(),
                    kind: FeatureKind::Categorical { levels: None },
                },
            ],
        };
        let levels = ["a", "b", "c", "a", "b", "c"];
        let train: Vec<RawRecord> = (0..6)
            .map(|i| {
                rec(
                    &format!("r{i}"),
                    vec![
                        RawValue::Level(if i % 2 == 0 { "no" } else { "yes" }.into()),
                        RawValue::Numeric(60.0 + i as f64),
                        RawValue::Level(levels[i].into()),
                    ],
                )
            })
            .collect();
        let refs: Vec<&RawRecord> = train.iter().collect();
        let enc = TabularEncoder::fit(&s, &refs).unwrap();
        // (2-1) + 1 + (3-1)
        assert_eq!(enc.width(), 4);
        assert_eq!(enc.columns().len(), 4);
        assert_eq!(enc.columns()[2].reference.as_deref(), Some("a"));

        let rows: Vec<Vec<f64>> = train.iter().map(|r| enc.encode(r).unwrap()).collect();
        assert_eq!(rows[0][0], 0.0);
        assert_eq!(rows[1][0], 1.0);
        let col_sum = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>();
        assert_eq!(col_sum(2), 2.0);
        assert_eq!(col_sum(3), 2.0);

        let (mean, _) = enc.numeric_stats("age").unwrap();
        let at_mean = rec(
            "m",
            vec![
                RawValue::Level("no".into()),
                RawValue::Numeric(mean),
                RawValue::Level("a".into()),
            ],
        );
        assert_eq!(enc.encode(&at_mean).unwrap()[1], 0.0);

        let unseen = rec(
            "u",
            vec![
                RawValue::Level("no".into()),
                RawValue::Numeric(1.0),
                RawValue::Level("z".into()),
            ],
        );
        match enc.encode(&unseen) {
            Err(Error::Encoding { feature, message }) => {
                assert_eq!(feature, "mrs");
                assert!(message.contains("`z`"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn encoder_uses_training_statistics_only() {
        let s = TabularSchema {
            id_column: "id".into(),
            label_column: "outcome".into(),
            features: vec![FeatureSpec {
                name: "age".into(),
                kind: FeatureKind::Numeric,
            }],
        };
        let train = [
            rec("a", vec![RawValue::Numeric(1.0)]),
            rec("b", vec![RawValue::Numeric(3.0)]),
        ];
        let test = rec("c", vec![RawValue::Numeric(1000.0)]);
        let enc = TabularEncoder::fit(&s, &train.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(enc.numeric_stats("age"), Some((2.0, 2f64.sqrt())));
        assert!((enc.encode(&test).unwrap()[0] - 998.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn synthetic_generator_is_deterministic_and_consistent() {
        let spec = SyntheticSpec {
            n: 30,
            extents: [12, 12, 4],
            radius: [1.0, 2.5],
            ..SyntheticSpec::default()
        };
        let a = synthesize_dataset(&spec).unwrap();
        let b = synthesize_dataset(&spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        for t in &a.truth {
            let lp =
                spec.intercept + spec.gamma * t.z_lesion + t.x.iter().zip(&spec.beta).map(|(x, b)| x * b).sum::<f64>();
            assert_eq!(lp, t.linear_predictor);
            assert_eq!(logistic(-lp), t.p_unfavorable);
            assert!(t.lesion_voxels > 0);
        }
        for p in &a.dataset.patients {
            assert!(p.volume.mean().abs() < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn volume_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in 0u64..1000) {
            let t = random_tensor(&dims, seed, 10.0, -5.0);
            prop_assert_eq!(decode_volume(&encode_volume(&t)).unwrap(), t);
        }
    }
}
