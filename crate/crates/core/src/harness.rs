//! Intervention experiments: injected generation over an evaluation set,
//! outcome accounting, alpha/layer/token sweeps, Pareto frontiers and
//! before/after case extraction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricsError};
use crate::steer::{Method, SteerError, SteeringVector};
use crate::toylm::{parse_emission, Generation, Model, ModelError, Site, Vocab, N_IDENTIFIERS};

/// Hidden width the paper's alpha magnitudes refer to.
pub const REFERENCE_D_MODEL: usize = 3072;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{} eval item(s) do not resolve to position {src} at baseline (first: item {} -> {:?})",
        .items.len(), .items[0].0, .items[0].1)]
    BaselineMismatch {
        src: usize,
        items: Vec<(usize, Option<usize>)>,
    },
    #[error("eval stems must share one length")]
    RaggedStems,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("alpha grid must be finite and sorted ascending")]
    BadAlphaGrid,
    #[error("vector targets {got:?} but the eval set has src {src}")]
    WrongSource { src: usize, got: (usize, usize) },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Steer(#[from] SteerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Token used for injection, relative to the stem terminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenOffset {
    /// The terminator itself.
    Final,
    /// The token just before the terminator.
    Penultimate,
}

impl TokenOffset {
    pub fn index(self, stem_len: usize) -> usize {
        match self {
            TokenOffset::Final => stem_len - 1,
            TokenOffset::Penultimate => stem_len - 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenOffset::Final => "final",
            TokenOffset::Penultimate => "penultimate",
        }
    }
}

/// Resolved answer position of a generation, or `None` when malformed.
pub fn resolve(vocab: &Vocab, g: &Generation) -> Option<usize> {
    if g.truncated {
        return None;
    }
    parse_emission(vocab, &g.tokens).answer
}

/// Baseline (uninjected) answer position for every stem.
pub fn baseline_answers(model: &Model, stems: &[Vec<usize>]) -> Result<Vec<Option<usize>>, ModelError> {
    let vocab = model.config().vocab();
    let refs: Vec<&[usize]> = stems.iter().map(Vec::as_slice).collect();
    Ok(model
        .generate_batch(&refs, &[])?
        .iter()
        .map(|g| resolve(&vocab, g))
        .collect())
}

/// Stems whose baseline answer is `src`, with their baseline generations.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub src: usize,
    pub stems: Vec<Vec<usize>>,
    /// Caller-side index of each stem.
    pub items: Vec<usize>,
    pub baseline: Vec<Generation>,
}

impl EvalSet {
    /// Checks that every stem resolves to `src` without injection.
    pub fn new(
        model: &Model,
        stems: Vec<Vec<usize>>,
        items: Vec<usize>,
        src: usize,
    ) -> Result<Self, HarnessError> {
        if stems.is_empty() {
            return Err(HarnessError::Empty("eval stems"));
        }
        if stems.iter().any(|s| s.len() != stems[0].len()) {
            return Err(HarnessError::RaggedStems);
        }
        let vocab = model.config().vocab();
        let refs: Vec<&[usize]> = stems.iter().map(Vec::as_slice).collect();
        let baseline = model.generate_batch(&refs, &[])?;
        let bad: Vec<(usize, Option<usize>)> = baseline
            .iter()
            .zip(&items)
            .map(|(g, &i)| (i, resolve(&vocab, g)))
            .filter(|(_, a)| *a != Some(src))
            .collect();
        if !bad.is_empty() {
            return Err(HarnessError::BaselineMismatch { src, items: bad });
        }
        Ok(EvalSet { src, stems, items, baseline })
    }

    /// The first `limit` stems (in order) whose baseline answer is `src`.
    pub fn select(
        model: &Model,
        stems: &[Vec<usize>],
        src: usize,
        limit: usize,
    ) -> Result<Self, HarnessError> {
        let answers = baseline_answers(model, stems)?;
        let items: Vec<usize> = (0..stems.len())
            .filter(|&i| answers[i] == Some(src))
            .take(limit)
            .collect();
        let chosen = items.iter().map(|&i| stems[i].clone()).collect();
        Self::new(model, chosen, items, src)
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    pub fn stem_len(&self) -> usize {
        self.stems[0].len()
    }

    pub fn site(&self, layer: usize, offset: TokenOffset) -> Site {
        Site::new(layer, offset.index(self.stem_len()))
    }

    /// Median residual norm at `site` over the eval stems, without injection.
    pub fn median_norm(&self, model: &Model, site: Site) -> Result<f64, HarnessError> {
        let refs: Vec<&[usize]> = self.stems.iter().map(Vec::as_slice).collect();
        let out = model.residual_streams(&refs, &[])?;
        if site.layer >= out.residuals.len() || site.token >= out.seq {
            return Err(ModelError::SiteOutOfRange { layer: site.layer, token: site.token }.into());
        }
        let mut norms: Vec<f64> = (0..self.len())
            .map(|i| out.vector(i, site).dot(&out.vector(i, site)).sqrt())
            .collect();
        norms.sort_by(f64::total_cmp);
        let n = norms.len();
        Ok(if n % 2 == 1 { norms[n / 2] } else { 0.5 * (norms[n / 2 - 1] + norms[n / 2]) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    /// `src -> tgt` over the baseline `src` count.
    pub target_rate: f64,
    /// Rates for positions other than `src` and `tgt`.
    pub off_target_rates: BTreeMap<usize, f64>,
    pub mean_off_target: f64,
    /// `src -> src`.
    pub retention_rate: f64,
    pub invalid_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub method: Method,
    pub src: usize,
    pub tgt: usize,
    pub site: Site,
    pub alpha: f64,
    pub n_eval: usize,
    /// Every position `1..=K`, zeros included.
    pub outcome_counts: BTreeMap<usize, usize>,
    pub invalid_count: usize,
    pub rates: Rates,
    /// `||alpha v|| / median ||H||` at the site.
    pub norm_ratio: f64,
    #[serde(skip)]
    pub generations: Vec<Generation>,
}

impl InterventionResult {
    /// Builds a result from resolved answers, one per eval item. The norm
    /// ratio is left as NaN and no generations are attached.
    pub fn from_answers(
        method: Method,
        site: Site,
        alpha: f64,
        (src, tgt): (usize, usize),
        answers: &[Option<usize>],
    ) -> Result<Self, HarnessError> {
        let (outcome_counts, invalid_count, rates) = tally(answers, src, tgt)?;
        Ok(InterventionResult {
            method,
            src,
            tgt,
            site,
            alpha,
            n_eval: answers.len(),
            outcome_counts,
            invalid_count,
            rates,
            norm_ratio: f64::NAN,
            generations: Vec::new(),
        })
    }

    pub fn accounted(&self) -> usize {
        self.outcome_counts.values().sum::<usize>() + self.invalid_count
    }
}

/// Counts resolved positions and derives the rates. Invalid emissions count
/// toward no position; the denominator stays the baseline `src` count.
pub fn tally(
    answers: &[Option<usize>],
    src: usize,
    tgt: usize,
) -> Result<(BTreeMap<usize, usize>, usize, Rates), HarnessError> {
    let n = answers.len();
    if n == 0 {
        return Err(HarnessError::Empty("outcomes"));
    }
    let mut counts: BTreeMap<usize, usize> = (1..=N_IDENTIFIERS).map(|p| (p, 0)).collect();
    let mut invalid = 0;
    for a in answers {
        match a.and_then(|p| counts.get_mut(&p)) {
            Some(c) => *c += 1,
            None => invalid += 1,
        }
    }
    let rate = |p: usize| metrics::change_rate(n as u64, counts[&p] as u64);
    let off_target_rates: BTreeMap<usize, f64> = counts
        .keys()
        .filter(|&&p| p != src && p != tgt)
        .map(|&p| Ok((p, rate(p)?)))
        .collect::<Result<_, MetricsError>>()?;
    let off: Vec<f64> = off_target_rates.values().copied().collect();
    let rates = Rates {
        target_rate: rate(tgt)?,
        mean_off_target: metrics::mean_off_target_rate(&off)?,
        off_target_rates,
        retention_rate: rate(src)?,
        invalid_rate: invalid as f64 / n as f64,
    };
    Ok((counts, invalid, rates))
}

fn check_vector(eval: &EvalSet, sv: &SteeringVector) -> Result<(), HarnessError> {
    if sv.src != eval.src {
        return Err(HarnessError::WrongSource { src: eval.src, got: (sv.src, sv.tgt) });
    }
    Ok(())
}

fn intervene(
    model: &Model,
    eval: &EvalSet,
    sv: &SteeringVector,
    alpha: f64,
    median: f64,
) -> Result<InterventionResult, HarnessError> {
    check_vector(eval, sv)?;
    let vocab = model.config().vocab();
    let refs: Vec<&[usize]> = eval.stems.iter().map(Vec::as_slice).collect();
    let generations = model.generate_batch(&refs, &[sv.injection(alpha)])?;
    let answers: Vec<Option<usize>> = generations.iter().map(|g| resolve(&vocab, g)).collect();
    let mut r = InterventionResult::from_answers(sv.method, sv.site, alpha, (sv.src, sv.tgt), &answers)?;
    let scaled = alpha.abs() * sv.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    r.norm_ratio = if median > 0.0 { scaled / median } else { f64::NAN };
    r.generations = generations;
    Ok(r)
}

/// Generates every eval item with `alpha * v` added at the vector's site.
pub fn run_intervention(
    model: &Model,
    eval: &EvalSet,
    sv: &SteeringVector,
    alpha: f64,
) -> Result<InterventionResult, HarnessError> {
    check_vector(eval, sv)?;
    let median = eval.median_norm(model, sv.site)?;
    intervene(model, eval, sv, alpha, median)
}

/// Geometric grid from 1 to 400, multiplied by `d_model / 3072`.
/// Returns the grid and the scale factor.
pub fn default_alphas(d_model: usize, points: usize) -> (Vec<f64>, f64) {
    let scale = d_model as f64 / REFERENCE_D_MODEL as f64;
    let grid = (0..points)
        .map(|i| {
            let t = if points > 1 { i as f64 / (points - 1) as f64 } else { 1.0 };
            400f64.powf(t) * scale
        })
        .collect();
    (grid, scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    pub methods: Vec<Method>,
    pub layers: Vec<usize>,
    pub offsets: Vec<TokenOffset>,
    pub alphas: Vec<f64>,
    /// Seeds for the random direction; other methods run once.
    pub random_seeds: Vec<u64>,
}

/// One grid cell; failures are kept as messages so the sweep can continue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: Method,
    pub seed: Option<u64>,
    pub layer: usize,
    pub offset: TokenOffset,
    pub alpha: f64,
    pub result: Result<InterventionResult, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub src: usize,
    pub tgt: usize,
    pub n_eval: usize,
    pub stem_len: usize,
    pub axes: GridAxes,
    pub cells: Vec<SweepCell>,
}

/// Seed-averaged view of one `(method, layer, offset, alpha)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCell {
    pub method: Method,
    pub layer: usize,
    pub offset: TokenOffset,
    pub alpha: f64,
    pub target_rate: f64,
    pub mean_off_target: f64,
    pub retention_rate: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub site: Site,
    pub alpha: f64,
    pub target_rate: f64,
    pub mean_off_target: f64,
    pub dominated: bool,
}

/// Runs the full factorial grid. `build` supplies the vector for a
/// `(method, site, seed)`; construction and run failures are recorded in the
/// cell.
pub fn sweep<F>(
    model: &Model,
    eval: &EvalSet,
    tgt: usize,
    axes: &GridAxes,
    build: F,
) -> Result<SweepGrid, HarnessError>
where
    F: Fn(Method, Site, u64) -> Result<SteeringVector, SteerError> + Sync,
{
    if eval.is_empty() {
        return Err(HarnessError::Empty("eval set"));
    }
    if axes.methods.is_empty() || axes.layers.is_empty() || axes.offsets.is_empty() {
        return Err(HarnessError::Empty("sweep axes"));
    }
    if axes.alphas.is_empty()
        || axes.alphas.iter().any(|a| !a.is_finite())
        || axes.alphas.windows(2).any(|w| w[0] > w[1])
    {
        return Err(HarnessError::BadAlphaGrid);
    }
    if axes.methods.contains(&Method::Random) && axes.random_seeds.is_empty() {
        return Err(HarnessError::Empty("random seeds"));
    }

    let mut runs: Vec<(Method, Option<u64>, usize, TokenOffset)> = Vec::new();
    for &method in &axes.methods {
        let seeds: Vec<Option<u64>> = match method {
            Method::Random => axes.random_seeds.iter().map(|&s| Some(s)).collect(),
            _ => vec![None],
        };
        for &layer in &axes.layers {
            for &offset in &axes.offsets {
                for &seed in &seeds {
                    runs.push((method, seed, layer, offset));
                }
            }
        }
    }

    let mut sites: Vec<Site> = runs.iter().map(|r| eval.site(r.2, r.3)).collect();
    sites.sort_unstable();
    sites.dedup();
    let medians: BTreeMap<Site, Result<f64, String>> = sites
        .par_iter()
        .map(|&s| (s, eval.median_norm(model, s).map_err(|e| e.to_string())))
        .collect();

    let cells: Vec<SweepCell> = runs
        .par_iter()
        .flat_map_iter(|&(method, seed, layer, offset)| {
            let site = eval.site(layer, offset);
            let sv = build(method, site, seed.unwrap_or(0)).map_err(|e| e.to_string());
            let median = medians[&site].clone();
            axes.alphas
                .iter()
                .map(|&alpha| {
                    let result = match (&sv, &median) {
                        (Ok(sv), Ok(m)) => {
                            intervene(model, eval, sv, alpha, *m).map_err(|e| e.to_string())
                        }
                        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
                    };
                    if let Err(e) = &result {
                        log::warn!("cell {} l{layer} {} a={alpha}: {e}", method.as_str(), offset.as_str());
                    }
                    SweepCell { method, seed, layer, offset, alpha, result }
                })
                .collect::<Vec<_>>()
        })
        .collect();

    Ok(SweepGrid {
        src: eval.src,
        tgt,
        n_eval: eval.len(),
        stem_len: eval.stem_len(),
        axes: axes.clone(),
        cells,
    })
}

impl SweepGrid {
    pub fn failures(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(|c| c.result.is_err())
    }

    /// Successful cells averaged over seeds, in grid order.
    pub fn mean_cells(&self) -> Vec<MeanCell> {
        let mut out: Vec<MeanCell> = Vec::new();
        let mut index: BTreeMap<(Method, usize, TokenOffset, u64), usize> = BTreeMap::new();
        for c in &self.cells {
            let Ok(r) = &c.result else { continue };
            let key = (c.method, c.layer, c.offset, c.alpha.to_bits());
            let i = *index.entry(key).or_insert_with(|| {
                out.push(MeanCell {
                    method: c.method,
                    layer: c.layer,
                    offset: c.offset,
                    alpha: c.alpha,
                    target_rate: 0.0,
                    mean_off_target: 0.0,
                    retention_rate: 0.0,
                    n_runs: 0,
                });
                out.len() - 1
            });
            let m = &mut out[i];
            m.target_rate += r.rates.target_rate;
            m.mean_off_target += r.rates.mean_off_target;
            m.retention_rate += r.rates.retention_rate;
            m.n_runs += 1;
        }
        for m in &mut out {
            let n = m.n_runs as f64;
            m.target_rate /= n;
            m.mean_off_target /= n;
            m.retention_rate /= n;
        }
        out
    }

    /// Seed-averaged target rate along the alpha grid for one layer.
    pub fn alpha_curve(&self, method: Method, layer: usize, offset: TokenOffset) -> Vec<(f64, f64)> {
        self.mean_cells()
            .into_iter()
            .filter(|m| m.method == method && m.layer == layer && m.offset == offset)
            .map(|m| (m.alpha, m.target_rate))
            .collect()
    }

    /// Per layer, the alpha with the highest seed-averaged target rate (the
    /// smallest such alpha on ties).
    pub fn best_per_layer(&self, method: Method, offset: TokenOffset) -> Vec<ParetoPoint> {
        let mut best: BTreeMap<usize, MeanCell> = BTreeMap::new();
        for m in self.mean_cells() {
            if m.method != method || m.offset != offset {
                continue;
            }
            match best.get(&m.layer) {
                Some(b) if b.target_rate >= m.target_rate => {}
                _ => {
                    best.insert(m.layer, m);
                }
            }
        }
        best.into_values()
            .map(|m| ParetoPoint {
                site: Site::new(m.layer, offset.index(self.stem_len)),
                alpha: m.alpha,
                target_rate: m.target_rate,
                mean_off_target: m.mean_off_target,
                dominated: false,
            })
            .collect()
    }

    /// Long-format results, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,seed,layer,token_offset,token,alpha,n");
        for p in 1..=N_IDENTIFIERS {
            let _ = write!(s, ",count_{p}");
        }
        s.push_str(",invalid,target_rate,retention_rate,mean_off_target,norm_ratio,error\n");
        for c in &self.cells {
            let seed = c.seed.map(|v| v.to_string()).unwrap_or_default();
            let _ = write!(s, "{},{},{},{},", c.method.as_str(), seed, c.layer, c.offset.as_str());
            match &c.result {
                Ok(r) => {
                    let _ = write!(s, "{},{:.6},{}", r.site.token, c.alpha, r.n_eval);
                    for p in 1..=N_IDENTIFIERS {
                        let _ = write!(s, ",{}", r.outcome_counts[&p]);
                    }
                    let _ = writeln!(
                        s,
                        ",{},{:.6},{:.6},{:.6},{:.6},",
                        r.invalid_count,
                        r.rates.target_rate,
                        r.rates.retention_rate,
                        r.rates.mean_off_target,
                        r.norm_ratio
                    );
                }
                Err(e) => {
                    let _ = write!(s, ",{:.6},{}", c.alpha, self.n_eval);
                    s.push_str(&",".repeat(N_IDENTIFIERS + 5));
                    let _ = writeln!(s, ",\"{}\"", e.replace('"', "'"));
                }
            }
        }
        s
    }
}

fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.target_rate >= b.target_rate
        && a.mean_off_target <= b.mean_off_target
        && (a.target_rate > b.target_rate || a.mean_off_target < b.mean_off_target)
}

/// Marks dominated points under (max target rate, min off-target rate) and
/// sorts by site, then alpha.
pub fn pareto(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut out: Vec<ParetoPoint> = points
        .iter()
        .map(|p| ParetoPoint {
            dominated: points.iter().any(|q| dominates(q, p)),
            ..p.clone()
        })
        .collect();
    out.sort_by(|a, b| {
        a.site
            .cmp(&b.site)
            .then(a.alpha.total_cmp(&b.alpha))
            .then(a.target_rate.total_cmp(&b.target_rate))
            .then(a.mean_off_target.total_cmp(&b.mean_off_target))
    });
    out
}

/// One side of a before/after pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSide {
    pub stem: Vec<usize>,
    pub options: Vec<usize>,
    pub answer: Option<usize>,
    pub text: String,
}

impl CaseSide {
    pub fn new(vocab: &Vocab, stem: &[usize], g: &Generation) -> Self {
        let options = parse_emission(vocab, &g.tokens).options;
        let mut all = stem.to_vec();
        all.extend(&g.tokens);
        CaseSide {
            stem: stem.to_vec(),
            options,
            answer: resolve(vocab, g),
            text: vocab.render(&all),
        }
    }
}

/// Mechanical change features between two generations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFlags {
    /// Both resolve, to different positions.
    pub position_changed: bool,
    /// Option multisets differ.
    pub options_changed: bool,
    pub stem_changed: bool,
    /// Either side is malformed.
    pub invalid_output: bool,
}

pub fn case_flags(before: &CaseSide, after: &CaseSide) -> CaseFlags {
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    CaseFlags {
        position_changed: matches!((before.answer, after.answer), (Some(a), Some(b)) if a != b),
        options_changed: sorted(&before.options) != sorted(&after.options),
        stem_changed: before.stem != after.stem,
        invalid_output: before.answer.is_none() || after.answer.is_none(),
    }
}

/// Names reported for each flag pattern. The first matching rule wins:
/// invalid, stem changed, options changed, position changed, unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub invalid: String,
    pub task_replacement: String,
    pub semantic_drift: String,
    pub label_flip: String,
    pub unchanged: String,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Taxonomy {
            invalid: "invalid".into(),
            task_replacement: "task_replacement".into(),
            semantic_drift: "semantic_drift".into(),
            label_flip: "label_flip".into(),
            unchanged: "unchanged".into(),
        }
    }
}

impl Taxonomy {
    pub fn label(&self, f: &CaseFlags) -> &str {
        if f.invalid_output {
            &self.invalid
        } else if f.stem_changed {
            &self.task_replacement
        } else if f.options_changed {
            &self.semantic_drift
        } else if f.position_changed {
            &self.label_flip
        } else {
            &self.unchanged
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasePair {
    pub item: usize,
    pub before: CaseSide,
    pub after: CaseSide,
    pub flags: CaseFlags,
    pub label: String,
}

pub fn label_case(item: usize, before: CaseSide, after: CaseSide, taxonomy: &Taxonomy) -> CasePair {
    let flags = case_flags(&before, &after);
    CasePair {
        item,
        label: taxonomy.label(&flags).to_string(),
        before,
        after,
        flags,
    }
}

/// Pairs each eval item's baseline with its generation under `result`.
pub fn extract_cases(
    vocab: &Vocab,
    eval: &EvalSet,
    result: &InterventionResult,
    taxonomy: &Taxonomy,
) -> Vec<CasePair> {
    eval.stems
        .iter()
        .zip(&eval.items)
        .zip(eval.baseline.iter().zip(&result.generations))
        .map(|((stem, &item), (b, a))| {
            label_case(item, CaseSide::new(vocab, stem, b), CaseSide::new(vocab, stem, a), taxonomy)
        })
        .collect()
}

pub fn cases_jsonl(cases: &[CasePair]) -> String {
    let mut s = String::new();
    for c in cases {
        s.push_str(&serde_json::to_string(c).expect("case pairs serialize"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(layer: usize, t: f64, o: f64) -> ParetoPoint {
        ParetoPoint {
            site: Site::new(layer, 4),
            alpha: 1.0,
            target_rate: t,
            mean_off_target: o,
            dominated: false,
        }
    }

    #[test]
    fn planted_counts_give_expected_rates() {
        let mut answers = vec![Some(1); 150];
        answers.extend(vec![Some(2); 44]);
        answers.extend(vec![Some(3); 4]);
        answers.extend(vec![Some(4); 2]);
        let (counts, invalid, r) = tally(&answers, 1, 2).unwrap();
        assert_eq!(counts.values().sum::<usize>() + invalid, 200);
        assert!((r.target_rate - 0.22).abs() < 1e-12);
        assert!((r.mean_off_target - 0.015).abs() < 1e-12);
        assert!((r.retention_rate - 0.75).abs() < 1e-12);
        assert_eq!(r.off_target_rates.keys().copied().collect::<Vec<_>>(), vec![3, 4]);
    }

    #[test]
    fn invalid_outcomes_stay_in_the_denominator() {
        let answers = [Some(1), None, Some(2), Some(9)];
        let (counts, invalid, r) = tally(&answers, 1, 2).unwrap();
        assert_eq!(invalid, 2);
        assert_eq!(counts[&2], 1);
        assert_eq!(r.target_rate, 0.25);
        assert_eq!(r.invalid_rate, 0.5);
    }

    #[test]
    fn pareto_hand_cases() {
        let one = pareto(&[point(3, 0.1, 0.1)]);
        assert!(!one[0].dominated);
        let two = pareto(&[point(2, 0.16, 0.04), point(3, 0.10, 0.08)]);
        assert!(!two[0].dominated && two[1].dominated);
        let tie = pareto(&[point(2, 0.1, 0.05), point(3, 0.1, 0.05)]);
        assert!(tie.iter().all(|p| !p.dominated));
    }

    #[test]
    fn default_grid_spans_one_to_four_hundred() {
        let (g, s) = default_alphas(REFERENCE_D_MODEL, 9);
        assert_eq!(s, 1.0);
        assert_eq!(g.len(), 9);
        assert!((g[0] - 1.0).abs() < 1e-12 && (g[8] - 400.0).abs() < 1e-9);
        assert!((g[4] - 20.0).abs() < 1e-9);
        let (small, s) = default_alphas(64, 9);
        assert!((small[8] - 400.0 * s).abs() < 1e-9);
    }

    fn side(stem: &[usize], options: &[usize], answer: Option<usize>) -> CaseSide {
        CaseSide {
            stem: stem.to_vec(),
            options: options.to_vec(),
            answer,
            text: String::new(),
        }
    }

    #[test]
    fn case_flag_examples() {
        let t = Taxonomy::default();
        let a = side(&[1, 2, 3], &[10, 11, 12, 13], Some(1));
        let same = label_case(0, a.clone(), a.clone(), &t);
        assert_eq!(same.flags, CaseFlags::default());
        assert_eq!(same.label, "unchanged");

        let moved = side(&[1, 2, 3], &[11, 10, 12, 13], Some(2));
        let flip = label_case(0, a.clone(), moved, &t);
        assert_eq!(
            flip.flags,
            CaseFlags { position_changed: true, ..CaseFlags::default() }
        );
        assert_eq!(flip.label, "label_flip");

        let other = side(&[1, 5, 3], &[20, 21, 22, 23], Some(3));
        let replaced = label_case(0, a.clone(), other, &t);
        assert!(replaced.flags.position_changed
            && replaced.flags.options_changed
            && replaced.flags.stem_changed
            && !replaced.flags.invalid_output);
        assert_eq!(replaced.label, "task_replacement");

        let broken = side(&[1, 2, 3], &[10, 11], None);
        let bad = label_case(0, a, broken, &t);
        assert!(bad.flags.invalid_output && !bad.flags.position_changed);
        assert_eq!(bad.label, "invalid");
    }
}
