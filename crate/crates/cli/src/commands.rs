//! Subcommand bodies. Each command writes into its own directory under
//! `cfg.out` together with a snapshot of the resolved configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dtm_core::data::{
    load_dataset, read_volume, save_synthetic, synthesize_dataset, write_volume, LabeledDataset, TabularEncoder,
};
use dtm_core::embed::{calibrate_affinities, extract_features, render_html, tsne, write_embedding_csv, EmbeddingPoint};
use dtm_core::eval::{
    crossval as run_crossval, examples_for, select_threshold, stratified_holdout, write_predictions_csv,
    CrossvalConfig, CrossvalResult, MetricsTable,
};
use dtm_core::image::{encode_pgm, encode_png_rgb, overlay_rgb, thumbnail_png};
use dtm_core::model::CoefficientReport;
use dtm_core::train::{bootstrap_coefficients, fit_ensemble, load_ensemble, save_ensemble, Example};
use dtm_core::xai::{
    axial_projection, class_average_map, explain_ensemble, predicted_class, Method, OcclusionGrid, Projection2D,
};
use dtm_core::{EnsembleModel, Error, Label, NetworkSpec, Result, Variant};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::output::{create, create_dir, prepare_dir, read_to_string, write, write_snapshot};

pub const TRAIN_DIR: &str = "train";
pub const CROSSVAL_DIR: &str = "crossval";
pub const EXPLAIN_DIR: &str = "explain";
pub const EMBED_DIR: &str = "embed";
pub const REPORT_FILE: &str = "report.md";
const CI_LEVEL: f64 = 0.95;

fn file_stem(v: Variant) -> String {
    v.name().replace('-', "_")
}

fn model_path(out: &Path, v: Variant) -> PathBuf {
    out.join(TRAIN_DIR).join("models").join(format!("{}.dtm", file_stem(v)))
}

fn network_for(cfg: &RunConfig, ds: &LabeledDataset, v: Variant) -> Option<NetworkSpec> {
    v.uses_image().then(|| {
        cfg.network
            .clone()
            .unwrap_or_else(|| NetworkSpec::default_for(ds.extents))
    })
}

/// Encoder fitted on every record, and the encoded rows in patient order.
fn encode_all(ds: &LabeledDataset, v: Variant) -> Result<(Option<TabularEncoder>, Vec<Vec<f64>>)> {
    if !v.uses_tabular() {
        return Ok((None, vec![Vec::new(); ds.len()]));
    }
    let records: Vec<_> = ds.patients.iter().map(|p| &p.record).collect();
    let enc = TabularEncoder::fit(&ds.schema, &records)?;
    let rows = ds
        .patients
        .iter()
        .map(|p| enc.encode(&p.record))
        .collect::<Result<Vec<_>>>()?;
    Ok((Some(enc), rows))
}

pub fn synth(cfg: &RunConfig, force: bool) -> Result<()> {
    cfg.synth.validate()?;
    prepare_dir(&cfg.out, force)?;
    let synth = synthesize_dataset(&cfg.synth)?;
    for w in &synth.warnings {
        log::warn!("{w}");
    }
    let manifest = save_synthetic(&cfg.out, &synth)?;
    write_snapshot(&cfg.out, cfg)?;
    let positives = synth.dataset.labels().iter().filter(|l| l.is_positive()).count();
    log::info!("{} patients, {positives} unfavorable", synth.dataset.len());
    println!("{}", manifest.display());
    Ok(())
}

fn write_coefficients(path: &Path, report: &CoefficientReport) -> Result<()> {
    report.write_csv(create(path)?)
}

pub fn train(cfg: &RunConfig, force: bool) -> Result<()> {
    let (_, ds) = load_dataset(cfg.dataset()?)?;
    let dir = cfg.out.join(TRAIN_DIR);
    prepare_dir(&dir, force)?;
    create_dir(&dir.join("models"))?;
    write_snapshot(&dir, cfg)?;

    let labels = ds.labels();
    let all: Vec<usize> = (0..ds.len()).collect();
    let (train_idx, val_idx) = stratified_holdout(&all, &labels, cfg.train.validation_fraction, cfg.seed)?;
    let mut log_csv = csv::Writer::from_writer(create(&dir.join("training_log.csv"))?);
    log_csv.write_record(["variant", "member", "seed", "epoch", "train_nll", "validation_nll"])?;
    for &v in &cfg.variants {
        let (encoder, rows) = encode_all(&ds, v)?;
        let train = examples_for(&ds, &rows, &train_idx, v);
        let val = examples_for(&ds, &rows, &val_idx, v);
        let seeds = cfg.member_seeds(v);
        let network = network_for(cfg, &ds, v);
        let fit = fit_ensemble(v, network.as_ref(), &train, &val, &seeds, &cfg.train)?;
        let mut ensemble = fit.ensemble;
        let val_p1 = val
            .iter()
            .map(|e| Ok(ensemble.predict(e.volume, e.tabular)?.p1))
            .collect::<Result<Vec<_>>>()?;
        let val_labels: Vec<Label> = val.iter().map(|e| e.label).collect();
        let rule = select_threshold(&val_p1, &val_labels)?;
        ensemble.threshold = Some(rule.threshold);
        save_ensemble(&model_path(&cfg.out, v), &ensemble)?;
        log::info!(
            "{v}: {} members, weights {:?}, threshold {:.4}",
            ensemble.len(),
            ensemble.weights(),
            rule.threshold
        );

        for (m, (member, seed)) in fit.members.iter().zip(&seeds).enumerate() {
            for (epoch, loss) in member.epoch_losses.iter().enumerate() {
                let val_nll = member.validation_nll.get(epoch).map(f64::to_string).unwrap_or_default();
                log_csv.write_record([
                    v.name().to_string(),
                    m.to_string(),
                    seed.to_string(),
                    epoch.to_string(),
                    loss.to_string(),
                    val_nll,
                ])?;
            }
        }

        if let Some(enc) = &encoder {
            let estimate = ensemble.coefficients()?.beta;
            let replicates = if v.uses_image() {
                ensemble
                    .members()
                    .iter()
                    .map(|m| m.beta().unwrap_or_default().to_vec())
                    .collect()
            } else {
                let everyone = examples_for(&ds, &rows, &all, v);
                bootstrap_coefficients(&everyone, cfg.coefficient_bootstrap, cfg.seed, &cfg.train)?
            };
            let report = CoefficientReport::build(v, &enc.columns(), &[estimate], &replicates, CI_LEVEL)?;
            write_coefficients(&dir.join(format!("coefficients_{}.csv", file_stem(v))), &report)?;
        }
    }
    log_csv
        .flush()
        .map_err(|e| crate::output::io_err(&dir.join("training_log.csv"), e))?;
    println!("{}", dir.display());
    Ok(())
}

fn write_fold_outputs(dir: &Path, r: &CrossvalResult) -> Result<()> {
    let stem = file_stem(r.variant);
    write_predictions_csv(&r.predictions, create(&dir.join(format!("predictions_{stem}.csv")))?)?;
    let path = dir.join(format!("folds_{stem}.csv"));
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["fold", "n", "nll", "auc", "accuracy", "threshold"])?;
    for s in &r.fold_summaries {
        w.write_record([
            s.fold.to_string(),
            s.n.to_string(),
            s.nll.to_string(),
            s.auc.map(|a| a.to_string()).unwrap_or_default(),
            s.accuracy.to_string(),
            s.threshold.to_string(),
        ])?;
    }
    w.flush().map_err(|e| crate::output::io_err(&path, e))?;
    for f in &r.folds {
        save_ensemble(
            &dir.join("models").join(format!("{stem}_fold{}.dtm", f.fold)),
            &f.ensemble,
        )?;
    }
    Ok(())
}

/// Point estimates are the per-fold ensemble coefficients. Intervals come
/// from refits on bootstrap resamples for SI-LS and from the spread over
/// folds for CI-LS, whose refits would each require training a network.
fn crossval_coefficients(cfg: &RunConfig, ds: &LabeledDataset, r: &CrossvalResult) -> Result<CoefficientReport> {
    let v = r.variant;
    let columns = r.folds[0]
        .encoder
        .as_ref()
        .expect("tabular variants carry an encoder")
        .columns();
    let estimates = r
        .folds
        .iter()
        .map(|f| {
            let beta = f.ensemble.coefficients()?.beta;
            if beta.len() != columns.len() {
                return Err(Error::DegenerateData(format!(
                    "fold {} encodes {} columns, fold 0 encodes {}; a categorical level is missing from a training portion",
                    f.fold,
                    beta.len(),
                    columns.len()
                )));
            }
            Ok(beta)
        })
        .collect::<Result<Vec<_>>>()?;
    let replicates = if v.uses_image() {
        estimates.clone()
    } else {
        let (_, rows) = encode_all(ds, v)?;
        let all: Vec<usize> = (0..ds.len()).collect();
        let everyone: Vec<Example> = examples_for(ds, &rows, &all, v);
        bootstrap_coefficients(&everyone, cfg.coefficient_bootstrap, cfg.seed, &cfg.train)?
    };
    CoefficientReport::build(v, &columns, &estimates, &replicates, CI_LEVEL)
}

pub fn crossval(cfg: &RunConfig, force: bool) -> Result<()> {
    let (_, ds) = load_dataset(cfg.dataset()?)?;
    let dir = cfg.out.join(CROSSVAL_DIR);
    prepare_dir(&dir, force)?;
    create_dir(&dir.join("models"))?;
    write_snapshot(&dir, cfg)?;

    let mut table = MetricsTable::default();
    for &v in &cfg.variants {
        let cv = CrossvalConfig {
            k: cfg.k,
            seeds: cfg.member_seeds(v),
            bootstrap: cfg.bootstrap,
            fold_seed: cfg.seed,
            train: cfg.train.clone(),
            network: network_for(cfg, &ds, v),
        };
        let r = run_crossval(&ds, v, &cv)?;
        write_fold_outputs(&dir, &r)?;
        if v.uses_tabular() {
            let report = crossval_coefficients(cfg, &ds, &r)?;
            write_coefficients(&dir.join(format!("coefficients_{}.csv", file_stem(v))), &report)?;
        }
        table.columns.push((v.name().to_string(), r.metrics));
    }
    let text = table.render_text();
    write(&dir.join("metrics.txt"), &text)?;
    table.write_csv(create(&dir.join("metrics.csv"))?)?;
    print!("{text}");
    Ok(())
}

struct Explained {
    index: usize,
    predicted: Label,
    p1: f64,
    map: dtm_core::Tensor,
    projection: Projection2D,
}

fn png_of(p: &Projection2D) -> Result<Vec<u8>> {
    let (w, h, rgb) = overlay_rgb(p, 0.6)?;
    encode_png_rgb(w, h, &rgb)
}

fn trained_ensemble(cfg: &RunConfig, v: Variant) -> Result<EnsembleModel> {
    let path = model_path(&cfg.out, v);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no trained {v} ensemble at {}; run `dtm train` first",
            path.display()
        )));
    }
    load_ensemble(&path)
}

pub fn explain(cfg: &RunConfig, force: bool) -> Result<()> {
    let v = cfg.explain.variant;
    if !v.uses_image() {
        return Err(Error::UnsupportedVariant {
            variant: v.name(),
            what: "explanation maps (it has no image part)",
        });
    }
    let ensemble = trained_ensemble(cfg, v)?;
    let (_, ds) = load_dataset(cfg.dataset()?)?;
    let (_, rows) = encode_all(&ds, v)?;
    let n = cfg.explain.limit.map_or(ds.len(), |l| l.min(ds.len()));
    let methods = cfg.explain.method.methods();
    if methods.contains(&Method::Occlusion) {
        let grid = OcclusionGrid::new(ds.extents, &cfg.occlusion)?;
        log::info!("occlusion: {} windows per patient", grid.len());
    }

    let dir = cfg.out.join(EXPLAIN_DIR);
    prepare_dir(&dir, force)?;
    write_snapshot(&dir, cfg)?;
    let mut meta = csv::Writer::from_writer(create(&dir.join("maps.csv"))?);
    meta.write_record(["id", "method", "class", "p1", "predicted", "true", "map", "image"])?;

    for method in methods {
        let maps_rel = PathBuf::from("maps").join(method.as_str());
        let images_rel = PathBuf::from("images").join(method.as_str());
        let projections_dir = dir.join("projections").join(method.as_str());
        let averages_dir = dir.join("averages").join(method.as_str());
        for d in [
            dir.join(&maps_rel),
            dir.join(&images_rel),
            projections_dir.clone(),
            averages_dir.clone(),
        ] {
            create_dir(&d)?;
        }
        let explained = (0..n)
            .into_par_iter()
            .map(|i| {
                let p = &ds.patients[i];
                let tab = v.uses_tabular().then(|| rows[i].as_slice());
                let (predicted, p1) = predicted_class(&ensemble, &p.volume, tab)?;
                let map = explain_ensemble(&ensemble, &p.volume, tab, method, &cfg.occlusion, predicted)?;
                let projection = axial_projection(&map.values, &p.volume)?;
                Ok(Explained {
                    index: i,
                    predicted,
                    p1,
                    map: map.values,
                    projection,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut groups: BTreeMap<&'static str, Vec<Projection2D>> = BTreeMap::new();
        for e in explained {
            let p = &ds.patients[e.index];
            let map_rel = maps_rel.join(format!("{}.vol", p.id));
            let image_rel = images_rel.join(format!("{}.png", p.id));
            write_volume(&dir.join(&map_rel), &e.map)?;
            write(&dir.join(&image_rel), png_of(&e.projection)?)?;
            write(
                &projections_dir.join(format!("{}_heat.pgm", p.id)),
                encode_pgm(&e.projection.heat)?,
            )?;
            meta.write_record([
                p.id.clone(),
                method.to_string(),
                e.predicted.to_string(),
                e.p1.to_string(),
                e.predicted.to_string(),
                p.label().to_string(),
                map_rel.display().to_string(),
                image_rel.display().to_string(),
            ])?;
            groups.entry(e.predicted.as_str()).or_default().push(e.projection);
        }
        for (class, group) in &groups {
            let avg = class_average_map(group)?;
            write(&averages_dir.join(format!("class_{class}.png")), png_of(&avg)?)?;
        }
        log::info!("{method}: {n} maps, {} class averages", groups.len());
    }
    meta.flush()
        .map_err(|e| crate::output::io_err(&dir.join("maps.csv"), e))?;
    println!("{}", dir.display());
    Ok(())
}

struct MapRow {
    id: String,
    predicted: Label,
    truth: Label,
    map: PathBuf,
}

fn read_map_rows(dir: &Path, method: Method) -> Result<Vec<MapRow>> {
    let path = dir.join("maps.csv");
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} not found; run `dtm explain` first",
            path.display()
        )));
    }
    let mut r = csv::Reader::from_path(&path)?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let label = |c: usize, column: &str| {
            field(c).parse::<Label>().map_err(|e| Error::Parse {
                path: path.clone(),
                row: row + 2,
                column: column.to_string(),
                message: e.to_string(),
            })
        };
        if field(1) != method.as_str() {
            continue;
        }
        out.push(MapRow {
            id: field(0).to_string(),
            predicted: label(4, "predicted")?,
            truth: label(5, "true")?,
            map: dir.join(field(6)),
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "{} lists no {method} maps; run `dtm explain --method {method}` first",
            path.display()
        )));
    }
    Ok(out)
}

pub fn embed(cfg: &RunConfig, force: bool) -> Result<()> {
    let method = cfg.embed.method;
    let rows = read_map_rows(&cfg.out.join(EXPLAIN_DIR), method)?;
    let ensemble = trained_ensemble(cfg, cfg.explain.variant)?;
    let (_, ds) = load_dataset(cfg.dataset()?)?;
    let index: BTreeMap<&str, usize> = ds
        .patients
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.as_str(), i))
        .collect();

    let prepared = rows
        .par_iter()
        .map(|r| {
            let i = *index
                .get(r.id.as_str())
                .ok_or_else(|| Error::DegenerateData(format!("map for unknown patient {}", r.id)))?;
            let map = read_volume(&r.map)?;
            let projection = axial_projection(&map, &ds.patients[i].volume)?;
            let features = extract_features(&ensemble, &projection.heat)?;
            let thumb = thumbnail_png(&projection, cfg.embed.thumbnail)?;
            Ok((features, thumb))
        })
        .collect::<Result<Vec<_>>>()?;
    let (features, thumbs): (Vec<_>, Vec<_>) = prepared.into_iter().unzip();

    let n = features.len();
    let cap = (n as f64 - 1.0) / 3.0;
    let mut perplexity = cfg.embed.perplexity;
    if perplexity > cap {
        log::warn!("{n} maps support a perplexity of at most {cap:.2}; capping {perplexity} to {cap:.2}");
        perplexity = cap;
    }
    let aff = calibrate_affinities(&features, perplexity)?;
    let result = tsne(&aff, &cfg.embed.tsne)?;
    let points: Vec<EmbeddingPoint> = rows
        .iter()
        .zip(&result.coords)
        .map(|(r, c)| EmbeddingPoint {
            id: r.id.clone(),
            x: c[0],
            y: c[1],
            predicted: r.predicted,
            truth: r.truth,
        })
        .collect();

    let dir = cfg.out.join(EMBED_DIR);
    prepare_dir(&dir, force)?;
    write_snapshot(&dir, cfg)?;
    write_embedding_csv(&points, create(&dir.join("embedding.csv"))?)?;
    let thumbs: Vec<Option<Vec<u8>>> = thumbs.into_iter().map(Some).collect();
    write(&dir.join("embedding.html"), render_html(&points, &thumbs)?)?;
    if let Some(kl) = result.kl.last() {
        log::info!("t-SNE on {n} maps, perplexity {perplexity:.2}, final KL {kl:.4}");
    }
    println!("{}", dir.display());
    Ok(())
}

fn missing(out: &mut String, what: &str, hint: &str) {
    let _ = writeln!(out, "_missing: {what} ({hint})_\n");
}

fn coefficient_table(out: &mut String, path: &Path, rel: &str) -> Result<()> {
    let mut r = csv::Reader::from_path(path)?;
    let _ = writeln!(out, "`{rel}`\n");
    let _ = writeln!(
        out,
        "| feature | log odds ratio | odds ratio | 95% interval (odds ratio) |"
    );
    let _ = writeln!(out, "|---|---:|---:|---:|");
    for rec in r.records() {
        let rec = rec?;
        let num = |c: usize| rec.get(c).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "| {} | {:.3} | {:.3} | [{:.3}, {:.3}] |",
            rec.get(0).unwrap_or(""),
            num(1),
            num(2),
            num(3).exp(),
            num(4).exp()
        );
    }
    out.push('\n');
    Ok(())
}

fn sorted_files(dir: &Path, prefix: &str, suffix: &str) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && n.ends_with(suffix))
        })
        .collect();
    files.sort();
    files
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

pub fn report(cfg: &RunConfig) -> Result<()> {
    let out_dir = &cfg.out;
    if !out_dir.is_dir() {
        return Err(Error::Config(format!(
            "run directory {} does not exist",
            out_dir.display()
        )));
    }
    let mut md = String::from("# Run report\n\n");

    md.push_str("## Metrics\n\n");
    let metrics = out_dir.join(CROSSVAL_DIR).join("metrics.txt");
    if metrics.exists() {
        let _ = writeln!(md, "Pooled test predictions over all folds; estimate [95% interval].\n");
        let _ = writeln!(md, "```\n{}```\n", read_to_string(&metrics)?);
        let _ = writeln!(
            md,
            "Data: `{}`\n",
            rel(out_dir, &out_dir.join(CROSSVAL_DIR).join("metrics.csv"))
        );
    } else {
        missing(&mut md, "cross-validation metrics", "run `dtm crossval`");
    }

    md.push_str("## Coefficients\n\n");
    let mut tables = 0;
    for sub in [CROSSVAL_DIR, TRAIN_DIR] {
        for f in sorted_files(&out_dir.join(sub), "coefficients_", ".csv") {
            coefficient_table(&mut md, &f, &rel(out_dir, &f))?;
            tables += 1;
        }
    }
    if tables == 0 {
        missing(
            &mut md,
            "coefficient tables",
            "run `dtm crossval` or `dtm train` with an -LS variant",
        );
    }

    md.push_str("## Explanation maps\n\n");
    let maps_csv = out_dir.join(EXPLAIN_DIR).join("maps.csv");
    if maps_csv.exists() {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut r = csv::Reader::from_path(&maps_csv)?;
        for rec in r.records() {
            let rec = rec?;
            *counts.entry(rec.get(1).unwrap_or("").to_string()).or_default() += 1;
        }
        let _ = writeln!(md, "Index: `{}`\n", rel(out_dir, &maps_csv));
        for (method, count) in &counts {
            let _ = writeln!(md, "- {method}: {count} patient maps");
            for avg in sorted_files(
                &out_dir.join(EXPLAIN_DIR).join("averages").join(method),
                "class_",
                ".png",
            ) {
                let r = rel(out_dir, &avg);
                let _ = writeln!(md, "  - ![{r}]({r})");
            }
        }
        md.push('\n');
    } else {
        missing(&mut md, "explanation maps", "run `dtm explain`");
    }

    md.push_str("## Embedding\n\n");
    let emb = out_dir.join(EMBED_DIR).join("embedding.csv");
    if emb.exists() {
        let points = dtm_core::embed::read_embedding_csv(&emb)?;
        let correct = points.iter().filter(|p| p.correct()).count();
        let _ = writeln!(
            md,
            "{} maps embedded, {correct} correctly classified.\n\n- [{}]({})\n- `{}`\n",
            points.len(),
            rel(out_dir, &out_dir.join(EMBED_DIR).join("embedding.html")),
            rel(out_dir, &out_dir.join(EMBED_DIR).join("embedding.html")),
            rel(out_dir, &emb)
        );
    } else {
        missing(&mut md, "similarity embedding", "run `dtm embed`");
    }

    let path = out_dir.join(REPORT_FILE);
    write(&path, md.trim_end().to_string() + "\n")?;
    println!("{}", path.display());
    Ok(())
}
