use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{macro_f1, stratified_split, train_mlp, MlpConfig};
use super::{ActivationDataset, ProbeError};
use crate::toylm::Site;

/// Grid to sweep. Hidden sizes override `MlpConfig::hidden_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub layers: Vec<usize>,
    pub tokens: Vec<usize>,
    pub hidden_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub layer: usize,
    pub token: usize,
    pub hidden_size: usize,
    /// Held-out macro-F1 per seed, in seed order.
    pub f1: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single seed.
    pub stdev: f64,
}

impl ProbeCell {
    pub fn site(&self) -> Site {
        Site::new(self.layer, self.token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub layer: usize,
    pub token: usize,
    pub hidden_size: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<ProbeCell>,
    pub majority_f1: f64,
    pub random_f1: f64,
    pub peak: Peak,
    /// Mean of cell means over every swept cell.
    pub average: f64,
    pub skipped: Vec<Site>,
}

/// F1 of always predicting the most frequent training class (lowest index on
/// ties), scored on `test`.
pub fn majority_f1(train: &[usize], test: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    for &c in train {
        counts[c] += 1;
    }
    let mut best = 0;
    for c in 1..k {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    macro_f1(test, &vec![best; test.len()], k)
}

/// Expected macro-F1 of guessing uniformly over `k` classes.
///
/// Class `c` with true share `p` gets expected precision `p` and recall
/// `1/k`, so its F1 is `2p(1/k) / (p + 1/k)`.
pub fn random_f1(test: &[usize], k: usize) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let q = 1.0 / k as f64;
    let n = test.len() as f64;
    (0..k)
        .map(|c| {
            let p = test.iter().filter(|&&t| t == c).count() as f64 / n;
            if p == 0.0 {
                0.0
            } else {
                2.0 * p * q / (p + q)
            }
        })
        .sum::<f64>()
        / k as f64
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains one MLP per `(layer, token, hidden, seed)` and aggregates held-out
/// macro-F1. Sites without enough samples are skipped with a warning.
pub fn sweep(
    data: &ActivationDataset,
    axes: &SweepAxes,
    cfg: &MlpConfig,
) -> Result<ProbeReport, ProbeError> {
    if axes.layers.is_empty() || axes.tokens.is_empty() || axes.seeds.is_empty() {
        return Err(ProbeError::Empty("sweep axes"));
    }
    let hidden = if axes.hidden_sizes.is_empty() {
        vec![cfg.hidden_size]
    } else {
        axes.hidden_sizes.clone()
    };
    let k = data.k();
    let mut skipped = Vec::new();
    let mut sites = Vec::new();
    for &layer in &axes.layers {
        for &token in &axes.tokens {
            let site = Site::new(layer, token);
            match data.site(site) {
                Ok(sd) if stratified_split(&sd.classes(), k, cfg.train_frac, 0).is_ok() => {
                    sites.push(site)
                }
                Ok(_) | Err(_) => {
                    log::warn!("skipping site ({layer}, {token}): insufficient samples");
                    skipped.push(site);
                }
            }
        }
    }
    let first = *sites.first().ok_or(ProbeError::Empty("probe-able sites"))?;

    let jobs: Vec<(Site, usize, u64)> = sites
        .iter()
        .flat_map(|&s| {
            hidden
                .iter()
                .flat_map(move |&h| axes.seeds.iter().map(move |&seed| (s, h, seed)))
        })
        .collect();
    let results: Vec<f64> = jobs
        .par_iter()
        .map(|&(site, h, seed)| {
            let sd = data.site(site)?;
            let c = MlpConfig { hidden_size: h, ..cfg.clone() };
            Ok(train_mlp(&sd.x, &sd.classes(), k, &c, seed)?.1)
        })
        .collect::<Result<_, ProbeError>>()?;

    let n_seeds = axes.seeds.len();
    let cells: Vec<ProbeCell> = jobs
        .chunks(n_seeds)
        .zip(results.chunks(n_seeds))
        .map(|(js, f1)| {
            let (mean, stdev) = mean_std(f1);
            ProbeCell {
                layer: js[0].0.layer,
                token: js[0].0.token,
                hidden_size: js[0].1,
                f1: f1.to_vec(),
                mean,
                stdev,
            }
        })
        .collect();

    let labels = data.site(first)?.classes();
    let mut maj = 0.0;
    let mut rnd = 0.0;
    for &seed in &axes.seeds {
        let (tr, te) = stratified_split(&labels, k, cfg.train_frac, seed)?;
        let ytr: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
        let yte: Vec<usize> = te.iter().map(|&i| labels[i]).collect();
        maj += majority_f1(&ytr, &yte, k);
        rnd += random_f1(&yte, k);
    }

    let best = cells
        .iter()
        .fold(&cells[0], |b, c| if c.mean > b.mean { c } else { b });
    let peak = Peak {
        layer: best.layer,
        token: best.token,
        hidden_size: best.hidden_size,
        value: best.mean,
    };
    let average = cells.iter().map(|c| c.mean).sum::<f64>() / cells.len() as f64;
    Ok(ProbeReport {
        seeds: axes.seeds.clone(),
        cells,
        majority_f1: maj / n_seeds as f64,
        random_f1: rnd / n_seeds as f64,
        peak,
        average,
        skipped,
    })
}

impl ProbeReport {
    pub fn cell(&self, site: Site, hidden_size: usize) -> Option<&ProbeCell> {
        self.cells
            .iter()
            .find(|c| c.site() == site && c.hidden_size == hidden_size)
    }

    /// Mean F1 over swept layers at one token (optionally restricted).
    pub fn token_average(&self, token: usize, hidden_size: usize, layers: &[usize]) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| {
                c.token == token
                    && c.hidden_size == hidden_size
                    && (layers.is_empty() || layers.contains(&c.layer))
            })
            .map(|c| c.mean)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Min-max normalized mean F1 across layers, separately per token row.
    pub fn layer_trends(&self, hidden_size: usize) -> Vec<(Site, f64)> {
        let mut out = Vec::new();
        let mut tokens: Vec<usize> = self.cells.iter().map(|c| c.token).collect();
        tokens.sort_unstable();
        tokens.dedup();
        for t in tokens {
            let row: Vec<&ProbeCell> = self
                .cells
                .iter()
                .filter(|c| c.token == t && c.hidden_size == hidden_size)
                .collect();
            let lo = row.iter().map(|c| c.mean).fold(f64::INFINITY, f64::min);
            let hi = row.iter().map(|c| c.mean).fold(f64::NEG_INFINITY, f64::max);
            for c in row {
                let v = if hi > lo { (c.mean - lo) / (hi - lo) } else { 0.0 };
                out.push((c.site(), v));
            }
        }
        out
    }

    /// Long format, one row per trained probe.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,token,hidden,seed,f1\n");
        for c in &self.cells {
            for (seed, f1) in self.seeds.iter().zip(&c.f1) {
                let _ = writeln!(s, "{},{},{},{},{:.6}", c.layer, c.token, c.hidden_size, seed, f1);
            }
        }
        s
    }

    /// Plot-ready heatmap rows with the per-token layer trend.
    pub fn heatmap_csv(&self) -> String {
        let mut s = String::from("layer,token,hidden,mean,stdev,trend\n");
        let mut hidden: Vec<usize> = self.cells.iter().map(|c| c.hidden_size).collect();
        hidden.sort_unstable();
        hidden.dedup();
        for h in hidden {
            for (site, trend) in self.layer_trends(h) {
                let c = self.cell(site, h).expect("trend rows come from cells");
                let _ = writeln!(
                    s,
                    "{},{},{},{:.6},{:.6},{:.6}",
                    site.layer, site.token, h, c.mean, c.stdev, trend
                );
            }
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "average": self.average,
            "peak": self.peak,
            "baselines": {"majority_f1": self.majority_f1, "random_f1": self.random_f1},
            "seeds": self.seeds,
            "skipped": self.skipped,
        })
    }
}
