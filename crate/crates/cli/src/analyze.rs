//! Position-bias metrics over recorded corpora.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use posbias::corpus::{
    distribution, first_position_table, parse_corpus_lenient, Condition, Corpus, CorpusMeta,
    GroupSelector,
};
use posbias::metrics::{fisher_one_sided, Alternative, MetricsReport};
use serde::Serialize;
use serde_json::json;

use crate::artifact::Store;
use crate::config::{CorpusEntry, MetaOverride, RunConfig};
use crate::error::{CliError, Result};
use crate::svg;

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub source: String,
    pub model: String,
    pub task: String,
    pub condition: String,
    pub group: String,
    pub counts: Vec<u64>,
    pub proportions: Vec<f64>,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct FisherRow {
    pub model: String,
    pub task: String,
    /// Condition in the table's first row, expected to favour position 1.
    pub condition: String,
    pub baseline: String,
    pub first_share: f64,
    pub baseline_first_share: f64,
    pub odds_ratio: f64,
    pub p_one_sided: f64,
    pub table: [[u64; 2]; 2],
}

#[derive(Debug, Clone, Serialize)]
pub struct FileFailure {
    pub path: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub rows: Vec<MetricsRow>,
    pub fisher: Vec<FisherRow>,
    pub failures: Vec<FileFailure>,
    /// Items dropped by lenient parsing, per file.
    pub dropped: BTreeMap<String, Vec<String>>,
}

struct Loaded {
    source: String,
    corpus: Corpus,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Sidecar metadata wins over the config entry; absent fields keep the
/// parser's inference, and the model name falls back to the file stem.
fn resolve_meta(entry: &CorpusEntry, inferred: &CorpusMeta) -> Result<CorpusMeta, String> {
    let side = sidecar_path(&entry.path);
    let over: MetaOverride = if side.exists() {
        let raw = std::fs::read_to_string(&side).map_err(|e| format!("{}: {e}", side.display()))?;
        serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", side.display()))?
    } else {
        entry.meta()
    };
    let stem = entry
        .path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(CorpusMeta {
        task: over.task.unwrap_or(inferred.task),
        model_name: over.model_name.unwrap_or(stem),
        condition: over.condition.unwrap_or(inferred.condition),
        group_keys: over.group_keys,
    })
}

fn load(entry: &CorpusEntry, k: usize, dropped: &mut BTreeMap<String, Vec<String>>) -> Result<Loaded, String> {
    let raw = std::fs::read_to_string(&entry.path).map_err(|e| e.to_string())?;
    let (corpus, errors) = parse_corpus_lenient(&raw, entry.schema, k).map_err(|e| e.to_string())?;
    let source = entry.path.display().to_string();
    if !errors.is_empty() {
        log::warn!("{source}: dropped {} item(s)", errors.len());
        for e in &errors {
            log::debug!("{source}: {e}");
        }
        dropped.insert(source.clone(), errors.iter().map(|e| e.to_string()).collect());
    }
    if corpus.is_empty() {
        return Err("no valid items".into());
    }
    let meta = resolve_meta(entry, corpus.meta())?;
    let corpus = corpus.with_meta(meta).map_err(|e| e.to_string())?;
    Ok(Loaded { source, corpus })
}

fn task_name(c: &Corpus) -> String {
    serde_json::to_value(c.meta().task)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn row(l: &Loaded, group: Option<&GroupSelector>) -> Result<MetricsRow, String> {
    let dist = distribution(&l.corpus, group).map_err(|e| e.to_string())?;
    let metrics = MetricsReport::compute(&dist).map_err(|e| e.to_string())?;
    let meta = l.corpus.meta();
    Ok(MetricsRow {
        source: l.source.clone(),
        model: meta.model_name.clone(),
        task: task_name(&l.corpus),
        condition: meta.condition.as_str().into(),
        group: group.map_or("all".into(), |g| format!("{}={}", g.dimension, g.name)),
        proportions: dist.proportions(),
        counts: dist.counts,
        metrics,
    })
}

/// The labelled condition an unlabelled (or balanced) one is compared to.
fn baseline_of(c: Condition) -> Option<Condition> {
    match c {
        Condition::IdentifierFree | Condition::StandardIdentifierFree => Some(Condition::Standard),
        Condition::BalancedIdentifierFree => Some(Condition::Balanced),
        Condition::Balanced | Condition::Standard => None,
    }
}

fn fisher_rows(loaded: &[Loaded]) -> Vec<FisherRow> {
    let mut out = Vec::new();
    let key = |l: &Loaded| (l.corpus.meta().model_name.clone(), task_name(&l.corpus));
    let mut pairs: Vec<(&Loaded, &Loaded)> = Vec::new();
    for a in loaded {
        let cond = a.corpus.meta().condition;
        let partner = |want: Condition| {
            loaded
                .iter()
                .find(|b| key(b) == key(a) && b.corpus.meta().condition == want)
        };
        if let Some(b) = baseline_of(cond).and_then(partner) {
            pairs.push((a, b));
        }
        // Standard against balanced: the standard prompt is the one expected
        // to favour the first position.
        if cond == Condition::Standard {
            if let Some(b) = partner(Condition::Balanced) {
                pairs.push((a, b));
            }
        }
    }
    for (a, b) in pairs {
        let result = first_position_table(&a.corpus, &b.corpus)
            .map_err(|e| e.to_string())
            .and_then(|t| fisher_one_sided(&t, Alternative::Greater).map_err(|e| e.to_string()));
        match result {
            Ok(r) => {
                let share = |row: [u64; 2]| row[0] as f64 / (row[0] + row[1]) as f64;
                out.push(FisherRow {
                    model: a.corpus.meta().model_name.clone(),
                    task: task_name(&a.corpus),
                    condition: a.corpus.meta().condition.as_str().into(),
                    baseline: b.corpus.meta().condition.as_str().into(),
                    first_share: share(r.table.cells[0]),
                    baseline_first_share: share(r.table.cells[1]),
                    odds_ratio: r.odds_ratio,
                    p_one_sided: r.fisher_p_one_sided,
                    table: r.table.cells,
                });
            }
            Err(e) => log::warn!("{} vs {}: {e}", a.source, b.source),
        }
    }
    out
}

pub fn analyze(cfg: &RunConfig, store: &Store, svg_out: bool) -> Result<AnalyzeReport> {
    let a = &cfg.analyze;
    if a.corpora.is_empty() {
        return Err(CliError::Config("no corpora given (pass paths or set [[analyze.corpora]])".into()));
    }
    let mut failures = Vec::new();
    let mut dropped = BTreeMap::new();
    let mut loaded = Vec::new();
    for entry in &a.corpora {
        match load(entry, a.k, &mut dropped) {
            Ok(l) => loaded.push(l),
            Err(error) => {
                log::error!("{}: {error}", entry.path.display());
                failures.push(FileFailure {
                    path: entry.path.clone(),
                    error,
                });
            }
        }
    }
    if loaded.is_empty() {
        return Err(CliError::NothingParsed);
    }

    let mut rows = Vec::new();
    for l in &loaded {
        match row(l, None) {
            Ok(r) => rows.push(r),
            Err(e) => log::warn!("{}: {e}", l.source),
        }
        for dim in &a.group_by {
            let Some(groups) = l.corpus.meta().group_keys.get(dim) else {
                log::warn!("{}: no grouping dimension {dim:?}", l.source);
                continue;
            };
            for name in groups.keys() {
                let sel = GroupSelector {
                    dimension: dim.clone(),
                    name: name.clone(),
                };
                match row(l, Some(&sel)) {
                    Ok(r) => rows.push(r),
                    Err(e) => log::warn!("{}: {e}", l.source),
                }
            }
        }
    }
    let report = AnalyzeReport {
        rows,
        fisher: fisher_rows(&loaded),
        failures,
        dropped,
    };
    write(store, &report, svg_out)?;
    Ok(report)
}

fn metrics_csv(rows: &[MetricsRow]) -> String {
    let k = rows.iter().map(|r| r.counts.len()).max().unwrap_or(0);
    let mut s = String::from("source,model,task,condition,group,n");
    for i in 1..=k {
        let _ = write!(s, ",count_{i}");
    }
    for i in 1..=k {
        let _ = write!(s, ",share_{i}");
    }
    s.push_str(",bsd,rstd,chi2,df,p_value\n");
    for r in rows {
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            csv_field(&r.source),
            csv_field(&r.model),
            r.task,
            r.condition,
            csv_field(&r.group),
            r.metrics.n
        );
        for i in 0..k {
            let _ = write!(s, ",{}", r.counts.get(i).map_or(String::new(), u64::to_string));
        }
        for i in 0..k {
            let _ = write!(s, ",{}", r.proportions.get(i).map_or(String::new(), |p| format!("{p:.6}")));
        }
        let m = &r.metrics;
        let _ = writeln!(s, ",{:.6},{:.6},{:.6},{},{:.6e}", m.bsd, m.rstd, m.chi2, m.chi2_df, m.p_value);
    }
    s
}

fn fisher_csv(rows: &[FisherRow]) -> String {
    let mut s = String::from(
        "model,task,condition,baseline,first_share,baseline_first_share,odds_ratio,p_one_sided,a,b,c,d\n",
    );
    for r in rows {
        let t = r.table;
        let _ = writeln!(
            s,
            "{},{},{},{},{:.4},{:.4},{:.4},{:.6e},{},{},{},{}",
            csv_field(&r.model),
            r.task,
            r.condition,
            r.baseline,
            r.first_share,
            r.baseline_first_share,
            r.odds_ratio,
            r.p_one_sided,
            t[0][0],
            t[0][1],
            t[1][0],
            t[1][1]
        );
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write(store: &Store, report: &AnalyzeReport, svg_out: bool) -> Result<()> {
    store.write_csv("analyze/metrics.csv", &metrics_csv(&report.rows))?;
    store.write_csv("analyze/fisher.csv", &fisher_csv(&report.fisher))?;
    store.write_json("analyze/metrics.json", json!(report))?;
    if !svg_out {
        return Ok(());
    }
    let overall: Vec<&MetricsRow> = report.rows.iter().filter(|r| r.group == "all").collect();
    let k = overall.iter().map(|r| r.counts.len()).max().unwrap_or(0);
    let cats: Vec<String> = overall
        .iter()
        .map(|r| format!("{} ({})", r.model, r.condition))
        .collect();
    let series: Vec<(String, Vec<f64>)> = (0..k)
        .map(|i| {
            let label = posbias::corpus::identifier(i, true);
            (label, overall.iter().map(|r| r.proportions.get(i).copied().unwrap_or(f64::NAN)).collect())
        })
        .collect();
    store.write_svg(
        "analyze/positions.svg",
        &svg::bar_chart("Answer position distribution", "share of items", &cats, &series),
    )?;

    // First-position share per model, one bar per condition.
    let mut models: Vec<String> = overall.iter().map(|r| r.model.clone()).collect();
    models.sort();
    models.dedup();
    let mut conds: Vec<String> = overall.iter().map(|r| r.condition.clone()).collect();
    conds.sort();
    conds.dedup();
    if conds.len() > 1 {
        let series: Vec<(String, Vec<f64>)> = conds
            .iter()
            .map(|c| {
                let vals = models
                    .iter()
                    .map(|m| {
                        overall
                            .iter()
                            .find(|r| &r.model == m && &r.condition == c)
                            .map_or(f64::NAN, |r| r.proportions[0])
                    })
                    .collect();
                (c.clone(), vals)
            })
            .collect();
        store.write_svg(
            "analyze/conditions.svg",
            &svg::bar_chart("First-position share by condition", "share at position 1", &models, &series),
        )?;
    }
    Ok(())
}
