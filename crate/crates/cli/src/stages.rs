//! Pipeline subcommands. Each stage reads its upstream artifacts from the
//! output directory and writes its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use posbias::harness::{
    self, cases_jsonl, default_alphas, extract_cases, pareto, EvalSet, GridAxes, InterventionResult,
    SweepGrid, Taxonomy, TokenOffset, REFERENCE_D_MODEL,
};
use posbias::probe::{self, ActivationDataset, ProbeReport, SweepAxes};
use posbias::steer::{self, build_vector, Method, Provenance, SteerError, SteeringVector};
use posbias::toylm::{
    read_checkpoint, synth_task, train, write_checkpoint, Model, Site, TokenDataset, N_IDENTIFIERS,
};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::artifact::{self as art, Artifact, Store};
use crate::config::{RunConfig, Split};
use crate::error::{core, CliError, Result};
use crate::svg;

fn split_artifact(split: Split) -> Artifact {
    match split {
        Split::Train => art::SYNTH_TRAIN,
        Split::Probe => art::SYNTH_PROBE,
        Split::Steer => art::SYNTH_STEER,
        Split::Eval => art::SYNTH_EVAL,
    }
}

pub fn synth(cfg: &RunConfig, store: &Store) -> Result<()> {
    for split in Split::ALL {
        let sc = cfg.synth_config(split);
        let task = synth_task(&sc).map_err(core)?;
        log::info!("synth {}: {} items", split.as_str(), task.dataset.len());
        store.write_json(
            split_artifact(split).rel,
            json!({"split": split.as_str(), "config": sc, "dataset": task.dataset}),
        )?;
    }
    Ok(())
}

fn load_dataset(store: &Store, split: Split) -> Result<TokenDataset> {
    let a = split_artifact(split);
    let v = store.read_json(a, false)?;
    serde_json::from_value(v["dataset"].clone()).map_err(|e| store.bad(a, e.to_string()))
}

fn load_model(store: &Store) -> Result<Model> {
    let bytes = store.read_bytes(art::MODEL)?;
    let (model, tag) = read_checkpoint(&bytes[..]).map_err(core)?;
    let found = tag
        .split_whitespace()
        .find_map(|t| t.strip_prefix("config_hash="))
        .unwrap_or("<none>");
    store.check(art::MODEL, found, false)?;
    Ok(model)
}

/// Share of stems whose greedy answer equals `expected`.
fn agreement(model: &Model, stems: &[Vec<usize>], expected: &[usize]) -> Result<f64> {
    let answers = harness::baseline_answers(model, stems).map_err(core)?;
    let hits = answers.iter().zip(expected).filter(|(a, e)| **a == Some(**e)).count();
    Ok(hits as f64 / stems.len().max(1) as f64)
}

pub fn train_lm(cfg: &RunConfig, store: &Store) -> Result<()> {
    let data = load_dataset(store, Split::Train)?;
    let eval = load_dataset(store, Split::Eval)?;
    let start = std::time::Instant::now();
    let (model, report) = train(cfg.toylm(), &data, &cfg.train_config()).map_err(core)?;
    log::info!(
        "trained {} parameters in {:.1}s, final loss {:.4}",
        model.params().n_params(),
        start.elapsed().as_secs_f64(),
        report.final_loss
    );
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model, &art::stamp(store.hash())).map_err(core)?;
    store.write_bytes(art::MODEL.rel, &buf)?;

    let cued: Vec<usize> = eval.cues.iter().map(|c| c + 1).collect();
    let label_acc = agreement(&model, &eval.stems, &eval.labels)?;
    let cue_acc = agreement(&model, &eval.stems, &cued)?;
    log::info!("eval split: label accuracy {label_acc:.3}, cue agreement {cue_acc:.3}");
    store.write_json(
        art::TRAIN_REPORT.rel,
        json!({
            "model": cfg.toylm(),
            "train": cfg.train_config(),
            "n_params": model.params().n_params(),
            "final_loss": report.final_loss,
            "epoch_losses": report.epoch_losses,
            "step_losses": report.step_losses,
            "eval_label_accuracy": label_acc,
            "eval_cue_agreement": cue_acc,
        }),
    )?;
    Ok(())
}

fn steer_sites(cfg: &RunConfig) -> Vec<Site> {
    let stem_len = cfg.stem_len();
    let mut sites: Vec<Site> = cfg
        .steer
        .layers
        .iter()
        .flat_map(|&l| cfg.steer.offsets.iter().map(move |o| Site::new(l, o.index(stem_len))))
        .collect();
    sites.sort();
    sites.dedup();
    sites
}

fn histogram(answers: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut h = vec![0; N_IDENTIFIERS];
    for a in answers {
        h[a - 1] += 1;
    }
    h
}

pub fn capture(cfg: &RunConfig, store: &Store) -> Result<()> {
    let model = load_model(store)?;
    let point = cfg.probe.capture_point;

    let probe_data = load_dataset(store, Split::Probe)?;
    let probe_sites: Vec<Site> = cfg
        .probe
        .layers
        .iter()
        .flat_map(|&l| cfg.probe.tokens.iter().map(move |&t| Site::new(l, t)))
        .collect();
    let acts = ActivationDataset::capture(&model, &probe_data.stems, &probe_data.labels, &probe_sites, point)
        .map_err(core)?;
    store.write_jsonl(art::CAPTURE_PROBE.rel, &acts.to_jsonl())?;

    // Steering activations are labelled by the model's own answers; stems
    // it answers malformedly are left out.
    let steer_data = load_dataset(store, Split::Steer)?;
    let answers = harness::baseline_answers(&model, &steer_data.stems).map_err(core)?;
    let (stems, labels): (Vec<Vec<usize>>, Vec<usize>) = steer_data
        .stems
        .iter()
        .zip(&answers)
        .filter_map(|(s, a)| a.map(|a| (s.clone(), a)))
        .unzip();
    if stems.len() < answers.len() {
        log::warn!("{} steering stems had malformed answers and were dropped", answers.len() - stems.len());
    }
    let sites = steer_sites(cfg);
    let steer_acts = ActivationDataset::capture(&model, &stems, &labels, &sites, point).map_err(core)?;
    store.write_jsonl(art::CAPTURE_STEER.rel, &steer_acts.to_jsonl())?;

    store.write_json(
        art::CAPTURE_SUMMARY.rel,
        json!({
            "capture_point": point,
            "probe": {"n_items": probe_data.len(), "sites": probe_sites, "label_counts": histogram(probe_data.labels.iter().copied())},
            "steer": {
                "n_items": steer_data.len(),
                "n_valid": stems.len(),
                "sites": sites,
                "answer_counts": histogram(labels.iter().copied()),
            },
        }),
    )?;
    Ok(())
}

fn load_activations(store: &Store, a: Artifact) -> Result<ActivationDataset> {
    let body = store.read_jsonl(a, false)?;
    ActivationDataset::from_jsonl(&body, N_IDENTIFIERS).map_err(core)
}

pub fn probe(cfg: &RunConfig, store: &Store, svg_out: bool) -> Result<()> {
    let data = load_activations(store, art::CAPTURE_PROBE)?;
    let p = &cfg.probe;
    let mlp = cfg.mlp_config();
    let axes = SweepAxes {
        layers: p.layers.clone(),
        tokens: p.tokens.clone(),
        hidden_sizes: vec![p.hidden_size],
        seeds: p.seeds.clone(),
    };
    let report = probe::sweep(&data, &axes, &mlp).map_err(core)?;
    log::info!(
        "probe peak {:.3} at layer {} token {}; average {:.3}; baselines majority {:.3} random {:.3}",
        report.peak.value,
        report.peak.layer,
        report.peak.token,
        report.average,
        report.majority_f1,
        report.random_f1
    );
    store.write_csv(art::PROBE_CELLS.rel, &report.to_csv())?;
    store.write_csv(art::PROBE_HEATMAP.rel, &report.heatmap_csv())?;

    // Token means leave out the embedding layer, which carries no context.
    let deep: Vec<usize> = p.layers.iter().copied().filter(|&l| l > 0).collect();
    let token_means: Vec<Value> = p
        .tokens
        .iter()
        .filter_map(|&t| {
            report
                .token_average(t, p.hidden_size, &deep)
                .map(|m| json!({"token": t, "mean_f1": m}))
        })
        .collect();

    let capacity = if p.capacity_sizes.is_empty() {
        None
    } else {
        let axes = SweepAxes {
            layers: vec![report.peak.layer],
            tokens: vec![report.peak.token],
            hidden_sizes: p.capacity_sizes.clone(),
            seeds: p.seeds.clone(),
        };
        Some(probe::sweep(&data, &axes, &mlp).map_err(core)?)
    };
    let mut cap_rows = Vec::new();
    let mut cap_csv = String::from("layer,token,hidden,mean,stdev\n");
    if let Some(c) = &capacity {
        for cell in &c.cells {
            let _ = writeln!(
                cap_csv,
                "{},{},{},{:.6},{:.6}",
                cell.layer, cell.token, cell.hidden_size, cell.mean, cell.stdev
            );
            cap_rows.push(json!({"hidden": cell.hidden_size, "mean_f1": cell.mean, "stdev": cell.stdev, "f1": cell.f1}));
        }
    }
    store.write_csv(art::PROBE_CAPACITY.rel, &cap_csv)?;

    let mut summary = report.summary_json();
    let obj = summary.as_object_mut().expect("summary is an object");
    obj.insert("hidden_size".into(), json!(p.hidden_size));
    obj.insert("token_means".into(), json!(token_means));
    obj.insert(
        "cells".into(),
        json!(report
            .cells
            .iter()
            .map(|c| json!({"layer": c.layer, "token": c.token, "mean_f1": c.mean, "stdev": c.stdev}))
            .collect::<Vec<_>>()),
    );
    obj.insert("capacity".into(), json!(cap_rows));
    store.write_json(art::PROBE_SUMMARY.rel, summary)?;

    if svg_out {
        write_probe_svgs(store, &report, p.hidden_size, &token_means)?;
    }
    Ok(())
}

fn write_probe_svgs(store: &Store, report: &ProbeReport, hidden: usize, token_means: &[Value]) -> Result<()> {
    let mut layers: Vec<usize> = report.cells.iter().map(|c| c.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut tokens: Vec<usize> = report.cells.iter().map(|c| c.token).collect();
    tokens.sort_unstable();
    tokens.dedup();
    let values: Vec<Vec<Option<f64>>> = layers
        .iter()
        .map(|&l| {
            tokens
                .iter()
                .map(|&t| report.cell(Site::new(l, t), hidden).map(|c| c.mean))
                .collect()
        })
        .collect();
    let rows: Vec<String> = layers.iter().map(|l| format!("layer {l}")).collect();
    let cols: Vec<String> = tokens.iter().map(|t| format!("tok {t}")).collect();
    store.write_svg(
        "probe/heatmap.svg",
        &svg::heatmap("Probe macro-F1 by layer and token", &rows, &cols, &values),
    )?;
    let cats: Vec<String> = token_means.iter().map(|v| format!("tok {}", v["token"])).collect();
    let vals: Vec<f64> = token_means.iter().map(|v| v["mean_f1"].as_f64().unwrap_or(f64::NAN)).collect();
    store.write_svg(
        "probe/tokens.svg",
        &svg::bar_chart(
            "Mean probe F1 per token position",
            "macro-F1",
            &cats,
            &[("mean F1".into(), vals), ("random baseline".into(), vec![report.random_f1; cats.len()])],
        ),
    )?;
    Ok(())
}

fn method_seeds(cfg: &RunConfig, method: Method) -> Vec<u64> {
    match method {
        Method::Random => cfg.steer.random_seeds.clone(),
        _ => vec![0],
    }
}

pub fn steer_build(cfg: &RunConfig, store: &Store) -> Result<()> {
    let data = load_activations(store, art::CAPTURE_STEER)?;
    let s = &cfg.steer;
    let mut vectors = Vec::new();
    let mut failures = Vec::new();
    for site in steer_sites(cfg) {
        for &method in &s.methods {
            for seed in method_seeds(cfg, method) {
                match build_vector(&data, method, site, (s.src, s.tgt), seed, s.c) {
                    Ok(v) => vectors.push(v),
                    Err(e) => {
                        log::warn!("{} at layer {} token {}: {e}", method.as_str(), site.layer, site.token);
                        failures.push(json!({
                            "method": method, "layer": site.layer, "token": site.token,
                            "seed": (method == Method::Random).then_some(seed), "error": e.to_string(),
                        }));
                    }
                }
            }
        }
    }
    let mut bin = Vec::new();
    steer::write_vectors(&mut bin, &vectors).map_err(core)?;
    store.write_bytes(art::VECTORS_BIN.rel, &bin)?;
    let meta: Value = serde_json::from_str(&steer::sidecar_json(&vectors)).expect("sidecar is JSON");
    store.write_json(
        art::VECTORS_META.rel,
        json!({
            "src": s.src,
            "tgt": s.tgt,
            "bin_sha256": hex::encode(Sha256::digest(&bin)),
            "vectors": meta,
            "failures": failures,
        }),
    )?;
    log::info!("built {} vectors, {} failures", vectors.len(), failures.len());
    if vectors.is_empty() {
        return Err(CliError::Failed("no steering vector could be built".into()));
    }
    Ok(())
}

type VectorKey = (Method, Site, Option<u64>);

fn vector_key(v: &SteeringVector) -> VectorKey {
    let seed = match v.provenance {
        Provenance::Random { seed, .. } => Some(seed),
        _ => None,
    };
    (v.method, v.site, seed)
}

fn load_vectors(store: &Store) -> Result<BTreeMap<VectorKey, SteeringVector>> {
    let meta = store.read_json(art::VECTORS_META, false)?;
    let bin = store.read_bytes(art::VECTORS_BIN)?;
    if meta["bin_sha256"].as_str() != Some(hex::encode(Sha256::digest(&bin)).as_str()) {
        return Err(store.bad(art::VECTORS_BIN, "checksum does not match steer/vectors.json"));
    }
    let vectors = steer::read_vectors(&bin[..], &meta["vectors"].to_string()).map_err(core)?;
    Ok(vectors.into_iter().map(|v| (vector_key(&v), v)).collect())
}

fn alpha_grid(cfg: &RunConfig) -> (Vec<f64>, Option<f64>) {
    match &cfg.intervene.alphas {
        Some(a) => (a.clone(), None),
        None => {
            let (grid, scale) = default_alphas(cfg.model.d_model, cfg.intervene.alpha_points);
            (grid, Some(scale))
        }
    }
}

fn point_json(method: Method, offset: TokenOffset, p: &harness::ParetoPoint) -> Value {
    json!({
        "method": method, "offset": offset, "layer": p.site.layer, "token": p.site.token,
        "alpha": p.alpha, "target_rate": p.target_rate, "mean_off_target": p.mean_off_target,
        "dominated": p.dominated,
    })
}

pub fn intervene(cfg: &RunConfig, store: &Store, svg_out: bool) -> Result<()> {
    let model = load_model(store)?;
    let pool = load_dataset(store, Split::Eval)?;
    let vectors = load_vectors(store)?;
    let s = &cfg.steer;
    let n_eval = cfg.intervene.n_eval;
    let eval = EvalSet::select(&model, &pool.stems, s.src, n_eval).map_err(core)?;
    if eval.len() < n_eval {
        log::warn!("only {} of {n_eval} requested eval items answer {}", eval.len(), s.src);
    }
    let (alphas, alpha_scale) = alpha_grid(cfg);
    let axes = GridAxes {
        methods: s.methods.clone(),
        layers: s.layers.clone(),
        offsets: s.offsets.clone(),
        alphas: alphas.clone(),
        random_seeds: s.random_seeds.clone(),
    };
    let start = std::time::Instant::now();
    let grid = harness::sweep(&model, &eval, s.tgt, &axes, |method, site, seed| {
        let key = (method, site, (method == Method::Random).then_some(seed));
        vectors.get(&key).cloned().ok_or(SteerError::NotFound {
            method: method.as_str(),
            layer: site.layer,
            token: site.token,
        })
    })
    .map_err(core)?;
    log::info!("swept {} cells in {:.1}s", grid.cells.len(), start.elapsed().as_secs_f64());

    let ok: Vec<&InterventionResult> = grid.cells.iter().filter_map(|c| c.result.as_ref().ok()).collect();
    let violations = ok.iter().filter(|r| r.accounted() != r.n_eval).count();
    if violations > 0 {
        log::error!("{violations} cells do not account for every eval item");
    }
    store.write_csv(art::GRID.rel, &grid.to_csv())?;

    let mut best_csv = String::from("method,token_offset,layer,token,alpha,target_rate,mean_off_target\n");
    let mut best_per_layer = Vec::new();
    let mut frontiers = Vec::new();
    let mut best_overall = Vec::new();
    for &method in &axes.methods {
        for &offset in &axes.offsets {
            let points = grid.best_per_layer(method, offset);
            for p in &points {
                let _ = writeln!(
                    best_csv,
                    "{},{},{},{},{},{:.6},{:.6}",
                    method.as_str(),
                    offset.as_str(),
                    p.site.layer,
                    p.site.token,
                    p.alpha,
                    p.target_rate,
                    p.mean_off_target
                );
                best_per_layer.push(point_json(method, offset, p));
            }
            // Highest target rate; the lowest layer wins ties.
            if let Some(b) = points.iter().fold(None::<&harness::ParetoPoint>, |acc, p| match acc {
                Some(a) if a.target_rate >= p.target_rate => Some(a),
                _ => Some(p),
            }) {
                best_overall.push(point_json(method, offset, b));
            }
            let front = pareto(&points);
            frontiers.push(json!({
                "method": method, "offset": offset,
                "points": front.iter().map(|p| point_json(method, offset, p)).collect::<Vec<_>>(),
            }));
        }
    }
    store.write_csv(art::BEST_PER_LAYER.rel, &best_csv)?;
    store.write_json(art::PARETO.rel, json!({"src": s.src, "tgt": s.tgt, "frontiers": frontiers}))?;

    let best_of = |m: Method| {
        best_overall
            .iter()
            .filter(|v| v["method"] == json!(m))
            .filter_map(|v| v["target_rate"].as_f64())
            .fold(None, |a: Option<f64>, t| Some(a.map_or(t, |a| a.max(t))))
    };
    let (md, rnd) = (best_of(Method::MeanDiff), best_of(Method::Random));
    let ratio = match (md, rnd) {
        (Some(m), Some(r)) if r > 0.0 => Some(m / r),
        _ => None,
    };

    let (cases, case_cell) = write_cases(store, &model, &eval, &grid)?;
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    for c in &cases {
        *labels.entry(c.label.clone()).or_default() += 1;
    }

    let curves: Vec<Value> = {
        let means = grid.mean_cells();
        let mut keys: Vec<(Method, TokenOffset, usize)> =
            means.iter().map(|m| (m.method, m.offset, m.layer)).collect();
        keys.dedup();
        keys.iter()
            .map(|&(method, offset, layer)| {
                let row: Vec<_> = means
                    .iter()
                    .filter(|m| m.method == method && m.offset == offset && m.layer == layer)
                    .collect();
                json!({
                    "method": method, "offset": offset, "layer": layer,
                    "alphas": row.iter().map(|m| m.alpha).collect::<Vec<_>>(),
                    "target_rate": row.iter().map(|m| m.target_rate).collect::<Vec<_>>(),
                    "mean_off_target": row.iter().map(|m| m.mean_off_target).collect::<Vec<_>>(),
                })
            })
            .collect()
    };
    let failures: Vec<Value> = grid
        .failures()
        .map(|c| {
            json!({
                "method": c.method, "seed": c.seed, "layer": c.layer, "offset": c.offset,
                "alpha": c.alpha, "error": c.result.as_ref().err(),
            })
        })
        .collect();
    let norm_ratios: Vec<f64> = ok.iter().map(|r| r.norm_ratio).filter(|v| v.is_finite()).collect();
    store.write_json(
        art::INTERVENE_SUMMARY.rel,
        json!({
            "src": s.src,
            "tgt": s.tgt,
            "n_eval": eval.len(),
            "n_eval_requested": n_eval,
            "alphas": alphas,
            "alpha_scale": alpha_scale,
            "reference_d_model": REFERENCE_D_MODEL,
            "cells": grid.cells.len(),
            "failures": failures,
            "accounting_violations": violations,
            "best": best_overall,
            "best_per_layer": best_per_layer,
            "alpha_curves": curves,
            "steering_ratio": {"mean_diff": md, "random": rnd, "ratio": ratio},
            "max_norm_ratio": norm_ratios.iter().copied().fold(0.0, f64::max),
            "case_cell": case_cell,
            "case_labels": labels,
        }),
    )?;
    if svg_out {
        write_intervene_svgs(store, &grid, &axes)?;
    }
    Ok(())
}

/// Before/after pairs for the strongest mean-difference cell (highest target
/// rate, then lowest off-target rate, then smallest alpha).
fn write_cases(
    store: &Store,
    model: &Model,
    eval: &EvalSet,
    grid: &SweepGrid,
) -> Result<(Vec<harness::CasePair>, Value)> {
    let better = |a: &InterventionResult, b: &InterventionResult| {
        let (ra, rb) = (&a.rates, &b.rates);
        ra.target_rate > rb.target_rate
            || (ra.target_rate == rb.target_rate && ra.mean_off_target < rb.mean_off_target)
            || (ra.target_rate == rb.target_rate
                && ra.mean_off_target == rb.mean_off_target
                && a.alpha < b.alpha)
    };
    let mut chosen: Option<&InterventionResult> = None;
    for c in &grid.cells {
        if c.method != Method::MeanDiff {
            continue;
        }
        if let Ok(r) = &c.result {
            if chosen.is_none_or(|b| better(r, b)) {
                chosen = Some(r);
            }
        }
    }
    let Some(r) = chosen else {
        store.write_jsonl(art::CASES.rel, "")?;
        return Ok((Vec::new(), Value::Null));
    };
    let cases = extract_cases(&model.config().vocab(), eval, r, &Taxonomy::default());
    store.write_jsonl(art::CASES.rel, &cases_jsonl(&cases))?;
    Ok((
        cases,
        json!({"method": r.method, "layer": r.site.layer, "token": r.site.token, "alpha": r.alpha,
               "target_rate": r.rates.target_rate, "mean_off_target": r.rates.mean_off_target}),
    ))
}

fn write_intervene_svgs(store: &Store, grid: &SweepGrid, axes: &GridAxes) -> Result<()> {
    for &offset in &axes.offsets {
        let series: Vec<(String, Vec<(f64, f64)>)> = axes
            .methods
            .iter()
            .map(|&m| {
                let pts = grid
                    .best_per_layer(m, offset)
                    .iter()
                    .map(|p| (p.mean_off_target, p.target_rate))
                    .collect();
                (m.as_str().to_string(), pts)
            })
            .collect();
        store.write_svg(
            &format!("intervene/pareto_{}.svg", offset.as_str()),
            &svg::scatter(
                &format!("Target vs off-target, best alpha per layer ({} token)", offset.as_str()),
                "mean off-target rate",
                "target rate",
                &series,
                false,
                false,
            ),
        )?;
        let series: Vec<(String, Vec<(f64, f64)>)> = axes
            .layers
            .iter()
            .map(|&l| (format!("layer {l}"), grid.alpha_curve(Method::MeanDiff, l, offset)))
            .collect();
        store.write_svg(
            &format!("intervene/alpha_{}.svg", offset.as_str()),
            &svg::scatter(
                &format!("Mean-difference target rate vs alpha ({} token)", offset.as_str()),
                "alpha",
                "target rate",
                &series,
                true,
                true,
            ),
        )?;
        let layers: Vec<String> = axes.layers.iter().map(|l| format!("layer {l}")).collect();
        let series: Vec<(String, Vec<f64>)> = axes
            .methods
            .iter()
            .map(|&m| {
                let best = grid.best_per_layer(m, offset);
                let vals = axes
                    .layers
                    .iter()
                    .map(|&l| best.iter().find(|p| p.site.layer == l).map_or(f64::NAN, |p| p.target_rate))
                    .collect();
                (m.as_str().to_string(), vals)
            })
            .collect();
        store.write_svg(
            &format!("intervene/methods_{}.svg", offset.as_str()),
            &svg::bar_chart(
                &format!("Best target rate per layer ({} token)", offset.as_str()),
                "target rate",
                &layers,
                &series,
            ),
        )?;
    }
    Ok(())
}

fn fmt(v: &Value) -> String {
    match v.as_f64() {
        Some(x) => format!("{x:.3}"),
        None => "n/a".into(),
    }
}

pub fn report(store: &Store) -> Result<()> {
    let train = store.read_json(art::TRAIN_REPORT, true)?;
    let probe = store.read_json(art::PROBE_SUMMARY, true)?;
    let inter = store.read_json(art::INTERVENE_SUMMARY, true)?;
    let pareto = store.read_json(art::PARETO, true)?;

    let mut md = String::from("# Experiment summary\n\n");
    let _ = writeln!(md, "Config hash `{}`.\n", store.hash());
    let _ = writeln!(
        md,
        "Toy model: final training loss {}, eval label accuracy {}, cue agreement {}.\n",
        fmt(&train["final_loss"]),
        fmt(&train["eval_label_accuracy"]),
        fmt(&train["eval_cue_agreement"])
    );

    md.push_str("## Probe recoverability\n\n| quantity | macro-F1 |\n|---|---|\n");
    let peak = &probe["peak"];
    let _ = writeln!(md, "| average over sites | {} |", fmt(&probe["average"]));
    let _ = writeln!(md, "| peak (layer {}, token {}) | {} |", peak["layer"], peak["token"], fmt(&peak["value"]));
    let _ = writeln!(md, "| majority baseline | {} |", fmt(&probe["baselines"]["majority_f1"]));
    let _ = writeln!(md, "| random baseline | {} |\n", fmt(&probe["baselines"]["random_f1"]));

    md.push_str("## Probe F1 by token position\n\n| token | mean F1 |\n|---|---|\n");
    for t in probe["token_means"].as_array().into_iter().flatten() {
        let _ = writeln!(md, "| {} | {} |", t["token"], fmt(&t["mean_f1"]));
    }

    md.push_str("\n## Probe F1 by layer and token\n\n");
    let cells = probe["cells"].as_array().cloned().unwrap_or_default();
    let mut layers: Vec<u64> = cells.iter().filter_map(|c| c["layer"].as_u64()).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut tokens: Vec<u64> = cells.iter().filter_map(|c| c["token"].as_u64()).collect();
    tokens.sort_unstable();
    tokens.dedup();
    md.push_str("| layer |");
    for t in &tokens {
        let _ = write!(md, " tok {t} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(tokens.len()));
    md.push('\n');
    for l in &layers {
        let _ = write!(md, "| {l} |");
        for t in &tokens {
            let v = cells
                .iter()
                .find(|c| c["layer"].as_u64() == Some(*l) && c["token"].as_u64() == Some(*t))
                .map_or(Value::Null, |c| c["mean_f1"].clone());
            let _ = write!(md, " {} |", fmt(&v));
        }
        md.push('\n');
    }

    md.push_str("\n## Probe capacity at the peak site\n\n| hidden | mean F1 | stdev |\n|---|---|---|\n");
    for c in probe["capacity"].as_array().into_iter().flatten() {
        let _ = writeln!(md, "| {} | {} | {} |", c["hidden"], fmt(&c["mean_f1"]), fmt(&c["stdev"]));
    }

    md.push_str("\n## Best intervention per layer\n\n| method | token | layer | alpha | target | off-target |\n|---|---|---|---|---|---|\n");
    for p in inter["best_per_layer"].as_array().into_iter().flatten() {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            p["method"].as_str().unwrap_or(""),
            p["offset"].as_str().unwrap_or(""),
            p["layer"],
            fmt(&p["alpha"]),
            fmt(&p["target_rate"]),
            fmt(&p["mean_off_target"])
        );
    }
    let sr = &inter["steering_ratio"];
    let _ = writeln!(
        md,
        "\nBest mean-difference target rate {} vs best norm-matched random {} (ratio {}).\n",
        fmt(&sr["mean_diff"]),
        fmt(&sr["random"]),
        fmt(&sr["ratio"])
    );

    md.push_str("## Pareto frontier (best alpha per layer)\n\n| method | token | layer | alpha | target | off-target |\n|---|---|---|---|---|---|\n");
    for f in pareto["frontiers"].as_array().into_iter().flatten() {
        for p in f["points"].as_array().into_iter().flatten().filter(|p| p["dominated"] == json!(false)) {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} |",
                p["method"].as_str().unwrap_or(""),
                p["offset"].as_str().unwrap_or(""),
                p["layer"],
                fmt(&p["alpha"]),
                fmt(&p["target_rate"]),
                fmt(&p["mean_off_target"])
            );
        }
    }

    md.push_str("\n## Alpha sensitivity (mean difference)\n\n");
    let alphas: Vec<String> = inter["alphas"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|a| format!("{:.3}", a.as_f64().unwrap_or(f64::NAN)))
        .collect();
    let _ = writeln!(md, "| token | layer | {} |", alphas.join(" | "));
    let _ = writeln!(md, "|---|---|{}", "---|".repeat(alphas.len()));
    for c in inter["alpha_curves"].as_array().into_iter().flatten() {
        if c["method"] != json!(Method::MeanDiff) {
            continue;
        }
        let rates: Vec<String> = c["target_rate"].as_array().into_iter().flatten().map(fmt).collect();
        let _ = writeln!(md, "| {} | {} | {} |", c["offset"].as_str().unwrap_or(""), c["layer"], rates.join(" | "));
    }
    let _ = writeln!(
        md,
        "\nEval items: {}. Failed cells: {}. Accounting violations: {}.",
        inter["n_eval"],
        inter["failures"].as_array().map_or(0, Vec::len),
        inter["accounting_violations"]
    );

    store.write_bytes(
        art::REPORT_MD.rel,
        format!("<!-- {} -->\n{md}", art::stamp(store.hash())).as_bytes(),
    )?;
    let strip = |mut v: Value| {
        if let Some(o) = v.as_object_mut() {
            o.remove("config_hash");
            o.remove("version");
            o.remove("step_losses");
        }
        v
    };
    store.write_json(
        art::REPORT_JSON.rel,
        json!({
            "train": strip(train),
            "probe": strip(probe),
            "intervene": strip(inter),
            "pareto": strip(pareto),
        }),
    )?;
    Ok(())
}
