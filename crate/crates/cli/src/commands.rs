use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use selest::estimator::{build_layout, encode_model, fit_model, load_model, SelNetModel, ThresholdEstimator};
use selest::metrics::{compute_metrics, empirical_monotonicity, render_table, rs_estimate, MetricReport, RsBaseline};
use selest::oracle::VectorDataset;
use selest::toy::run_toy;
use selest::updates::{gen_update_stream, process_update, read_update_stream, write_update_stream};
use selest::workload::{build_workload, gen_synthetic, LabeledQuery, Workload};

use crate::config::{is_set, RunConfig};

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = if is_set(&cfg.paths.out) { cfg.paths.out.clone() } else { PathBuf::from(".") };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Writes through a temporary file in the same directory, then renames, so
/// a failed run never leaves a partial file behind.
fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn load_dataset(cfg: &RunConfig) -> Result<VectorDataset> {
    let p = cfg.require(&cfg.paths.dataset, "dataset")?;
    VectorDataset::load(&p).with_context(|| format!("reading dataset {}", p.display()))
}

fn load_workload(cfg: &RunConfig) -> Result<Workload> {
    let p = cfg.require(&cfg.paths.workload, "workload")?;
    let f = File::open(&p).with_context(|| format!("opening workload {}", p.display()))?;
    Workload::read_jsonl(BufReader::new(f)).with_context(|| format!("reading workload {}", p.display()))
}

fn load_selnet(cfg: &RunConfig) -> Result<SelNetModel> {
    let p = cfg.require(&cfg.paths.model, "model")?;
    load_model(&p).with_context(|| format!("reading model {}", p.display()))
}

fn check_pairing(ds: &VectorDataset, wl: &Workload) -> Result<()> {
    if wl.provenance.dataset_fingerprint != ds.fingerprint() {
        bail!(
            "workload was labelled on dataset {} but --dataset is {}",
            wl.provenance.dataset_fingerprint,
            ds.fingerprint()
        );
    }
    Ok(())
}

pub fn echo_config(cfg: &RunConfig, command: &str) -> Result<()> {
    let text = cfg.toml_text()?;
    if command == "estimate" && !is_set(&cfg.paths.out) {
        log::debug!("resolved configuration:\n{text}");
        return Ok(());
    }
    let path = out_dir(cfg)?.join(format!("{command}.config.toml"));
    write_atomic(&path, |w| Ok(w.write_all(text.as_bytes())?))
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.data;
    let ds = if is_set(&d.import) {
        let f = File::open(&d.import).with_context(|| format!("opening {}", d.import.display()))?;
        VectorDataset::read_text(BufReader::new(f), d.kind)?
    } else {
        let g = gen_synthetic(d.n, d.d, d.components, d.data_seed)?;
        VectorDataset::from_flat(g.d(), g.flat().to_vec(), d.kind)?
    };
    log::info!("dataset n={} d={} kind={:?} fingerprint {}", ds.n(), ds.d(), ds.kind(), ds.fingerprint());
    write_atomic(&out_dir(cfg)?.join("dataset.vecd"), |w| Ok(ds.write_to(w)?))
}

pub fn gen_workload(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let wl = build_workload(&ds, &cfg.workload_config(), None)?;
    log::info!(
        "workload train {} val {} test {} t_max {}",
        wl.train.len(),
        wl.val.len(),
        wl.test.len(),
        wl.t_max()
    );
    write_atomic(&out_dir(cfg)?.join("workload.jsonl"), |w| Ok(wl.write_jsonl(w)?))
}

pub fn partition(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let m = &cfg.model;
    let layout = build_layout(&ds, m.k, m.ratio, m.partition, m.partition_seed)?;
    log::info!("cluster sizes {:?}", layout.sizes());
    write_json(&out_dir(cfg)?.join("layout.json"), &layout.summary_json())
}

fn split_metrics<E: ThresholdEstimator + Sync>(est: &E, entries: &[LabeledQuery]) -> Result<MetricReport> {
    let y: Vec<f64> = entries.iter().map(|e| e.y).collect();
    let y_hat = entries
        .par_iter()
        .map(|e| Ok(est.estimate_many(&e.x, &[e.t])?[0]))
        .collect::<selest::Result<Vec<f64>>>()?;
    Ok(compute_metrics(&y, &y_hat)?)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let wl = load_workload(cfg)?;
    check_pairing(&ds, &wl)?;
    let spec = cfg.fit_spec();
    let out = fit_model(&ds, &wl, &spec)?;
    let test = split_metrics(&out.model, &out.workload.test)?;
    log::info!(
        "best epoch {} val mse {:.4} mae {:.4}; test mse {:.4} mae {:.4}",
        out.log.best_epoch,
        out.log.best_val_mse,
        out.log.best_val_mae,
        test.mse,
        test.mae
    );
    let dir = out_dir(cfg)?;
    let bytes = encode_model(&out.model);
    write_atomic(&dir.join("model.seln"), |w| Ok(w.write_all(&bytes)?))?;
    write_atomic(&dir.join("train_log.jsonl"), |w| Ok(w.write_all(out.log.to_jsonl().as_bytes())?))?;
    write_json(
        &dir.join("train_summary.json"),
        &json!({
            "best_epoch": out.log.best_epoch,
            "best_val_mse": out.log.best_val_mse,
            "best_val_mae": out.log.best_val_mae,
            "stopped_early": out.log.stopped_early,
            "epochs_run": out.log.epochs.len() - 1,
            "pretrain": out.pretrain,
            "test": test,
            "k": out.model.k(),
            "cluster_sizes": out.model.layout.sizes(),
            "t_max": out.model.hyper.t_max,
        }),
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateLine {
    x: Vec<f64>,
    t: f64,
}

pub fn estimate(cfg: &RunConfig) -> Result<()> {
    let model = load_selnet(cfg)?;
    let reader: Box<dyn BufRead> = if is_set(&cfg.paths.input) {
        let f = File::open(&cfg.paths.input).with_context(|| format!("opening {}", cfg.paths.input.display()))?;
        Box::new(BufReader::new(f))
    } else {
        Box::new(io::stdin().lock())
    };
    let t_max = model.hyper.t_max;
    let mut lines = Vec::new();
    let mut rejected = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: EstimateLine = serde_json::from_str(&line).with_context(|| format!("input line {}", i + 1))?;
        if q.x.len() != model.input_dim() {
            bail!("input line {}: x has {} values, model expects {}", i + 1, q.x.len(), model.input_dim());
        }
        if !(0.0..=t_max).contains(&q.t) {
            eprintln!("input line {}: threshold {} outside [0, {t_max}]", i + 1, q.t);
            rejected += 1;
            continue;
        }
        lines.push(format!("{}", model.estimate(&q.x, q.t)?));
    }
    let emit = |w: &mut dyn Write| -> Result<()> {
        for l in &lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    };
    if is_set(&cfg.paths.out) {
        write_atomic(&out_dir(cfg)?.join("estimates.txt"), emit)?;
    } else {
        let stdout = io::stdout();
        let mut w = BufWriter::new(stdout.lock());
        emit(&mut w)?;
        w.flush()?;
    }
    if rejected > 0 {
        bail!("{rejected} queries outside the supported threshold range");
    }
    Ok(())
}

/// First `limit` distinct query objects of `entries`.
fn query_objects(entries: &[LabeledQuery], limit: usize) -> Vec<Vec<f64>> {
    let mut seen = BTreeSet::new();
    entries
        .iter()
        .filter(|e| seen.insert(e.query))
        .take(limit)
        .map(|e| e.x.clone())
        .collect()
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let model = load_selnet(cfg)?;
    let wl = load_workload(cfg)?;
    let e = &cfg.evaluate;
    let entries = wl.split(e.split);
    if entries.is_empty() {
        bail!("split {:?} is empty", e.split);
    }
    if let Some(q) = entries.iter().find(|q| q.t > model.hyper.t_max) {
        bail!("workload threshold {} exceeds model t_max {}", q.t, model.hyper.t_max);
    }
    let queries = query_objects(entries, e.monotonicity_queries);
    let selnet = split_metrics(&model, entries)?;
    let selnet_mono = empirical_monotonicity(&model, &queries, e.monotonicity_thresholds, e.eval_seed)?;
    let mut rows = vec![("selnet".to_string(), selnet)];
    let mut models = vec![json!({"name": "selnet", "metrics": selnet, "monotonicity": selnet_mono})];
    let mut mono = vec![("selnet", selnet_mono)];
    if is_set(&cfg.paths.dataset) {
        let ds = load_dataset(cfg)?;
        check_pairing(&ds, &wl)?;
        let rs = RsBaseline::new(&ds, e.rs_fraction, e.eval_seed)?;
        let y: Vec<f64> = entries.iter().map(|q| q.y).collect();
        let y_hat = entries
            .par_iter()
            .map(|q| rs_estimate(&rs, &ds, &q.x, q.t))
            .collect::<selest::Result<Vec<f64>>>()?;
        let m = compute_metrics(&y, &y_hat)?;
        let rs_mono = empirical_monotonicity(&rs.bind(&ds, model.hyper.t_max), &queries, e.monotonicity_thresholds, e.eval_seed)?;
        rows.push(("rs".to_string(), m));
        models.push(json!({"name": "rs", "sample_fraction": e.rs_fraction, "metrics": m, "monotonicity": rs_mono}));
        mono.push(("rs", rs_mono));
    }
    print!("{}", render_table(&rows));
    for (name, v) in &mono {
        println!("monotonicity {name}: {v:.4}%");
    }
    write_json(
        &out_dir(cfg)?.join("report.json"),
        &json!({
            "split": e.split,
            "entries": entries.len(),
            "monotonicity_queries": queries.len(),
            "monotonicity_thresholds": e.monotonicity_thresholds,
            "models": models,
        }),
    )
}

pub fn update(cfg: &RunConfig) -> Result<()> {
    let mut model = load_selnet(cfg)?;
    let mut ds = load_dataset(cfg)?;
    let mut wl = load_workload(cfg)?;
    check_pairing(&ds, &wl)?;
    let u = &cfg.update;
    let ops = if is_set(&cfg.paths.stream) {
        let f = File::open(&cfg.paths.stream).with_context(|| format!("opening {}", cfg.paths.stream.display()))?;
        read_update_stream(BufReader::new(f))?
    } else {
        gen_update_stream(&ds, u.steps, u.update_batch, u.jitter, u.update_seed)?
    };
    let inc = cfg.incremental();
    let mut steps = Vec::with_capacity(ops.len());
    for (i, op) in ops.iter().enumerate() {
        let s = process_update(&mut model, &mut wl, &mut ds, op, u.delta_u, &inc, i)?;
        log::info!(
            "step {i}: n={} mae {:.3} -> {:.3} retrain {}",
            ds.n(),
            s.drift.mae_before,
            s.drift.mae_after_relabel,
            s.retrained
        );
        steps.push(s);
    }
    let dir = out_dir(cfg)?;
    write_atomic(&dir.join("stream.jsonl"), |w| Ok(write_update_stream(&ops, w)?))?;
    write_atomic(&dir.join("update_log.jsonl"), |w| {
        for s in &steps {
            serde_json::to_writer(&mut *w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    let bytes = encode_model(&model);
    write_atomic(&dir.join("model.seln"), |w| Ok(w.write_all(&bytes)?))?;
    write_atomic(&dir.join("dataset.vecd"), |w| Ok(ds.write_to(w)?))?;
    write_atomic(&dir.join("workload.jsonl"), |w| Ok(wl.write_jsonl(w)?))
}

pub fn demo_toy(cfg: &RunConfig) -> Result<()> {
    let report = run_toy(&cfg.toy())?;
    println!("learned control points: mse {:.6}", report.learned.mse);
    println!("fixed control points:   mse {:.6}", report.fixed.mse);
    let dir = out_dir(cfg)?;
    write_json(&dir.join("toy.json"), &report)?;
    write_atomic(&dir.join("toy.csv"), |w| Ok(w.write_all(report.csv(201).as_bytes())?))
}
