use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::toylm::{Model, Site, N_IDENTIFIERS};

/// Where the last layer is read. Earlier layers are always the raw
/// residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapturePoint {
    #[default]
    PreNorm,
    PostNorm,
}

/// One captured hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub layer: usize,
    pub token: usize,
    /// 1-based answer position.
    pub label: usize,
    pub item: usize,
    pub vector: Vec<f64>,
}

/// All samples for one site, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteData {
    pub x: Array2<f64>,
    /// 1-based answer positions.
    pub labels: Vec<usize>,
    pub items: Vec<usize>,
}

impl SiteData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// 0-based class indices.
    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l - 1).collect()
    }

    /// Mean vector over the samples labelled `label`.
    pub fn class_mean(&self, label: usize) -> Result<Array1<f64>, ProbeError> {
        let mut sum = Array1::zeros(self.x.ncols());
        let mut n = 0usize;
        for (row, &l) in self.x.outer_iter().zip(&self.labels) {
            if l == label {
                sum += &row;
                n += 1;
            }
        }
        if n == 0 {
            return Err(ProbeError::TooFewSamples {
                class: label,
                count: 0,
                min: 1,
            });
        }
        Ok(sum / n as f64)
    }
}

/// Hidden states indexed by `(layer, token)` with answer-position labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    d_model: usize,
    k: usize,
    sites: BTreeMap<Site, SiteData>,
}

impl ActivationDataset {
    /// Runs `model` over `stems` and keeps the residual stream at `sites`.
    pub fn capture(
        model: &Model,
        stems: &[Vec<usize>],
        labels: &[usize],
        sites: &[Site],
        point: CapturePoint,
    ) -> Result<Self, ProbeError> {
        const CHUNK: usize = 256;
        let k = N_IDENTIFIERS;
        if stems.is_empty() {
            return Err(ProbeError::Empty("stems"));
        }
        if stems.len() != labels.len() {
            return Err(ProbeError::DimensionMismatch {
                expected: stems.len(),
                got: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l == 0 || l > k) {
            return Err(ProbeError::LabelOutOfRange { label, k });
        }
        let cfg = model.config();
        let d = cfg.d_model;
        for s in sites {
            if s.layer > cfg.n_layers || stems.iter().any(|st| s.token >= st.len()) {
                return Err(ProbeError::MissingSite {
                    layer: s.layer,
                    token: s.token,
                });
            }
        }
        let mut out: BTreeMap<Site, SiteData> = sites
            .iter()
            .map(|&s| {
                (
                    s,
                    SiteData {
                        x: Array2::zeros((stems.len(), d)),
                        labels: labels.to_vec(),
                        items: (0..stems.len()).collect(),
                    },
                )
            })
            .collect();
        for (c, chunk) in stems.chunks(CHUNK).enumerate() {
            let refs: Vec<&[usize]> = chunk.iter().map(|s| s.as_slice()).collect();
            let run = model.residual_streams(&refs, &[])?;
            for (site, data) in out.iter_mut() {
                for b in 0..chunk.len() {
                    let row = if site.layer == cfg.n_layers && point == CapturePoint::PostNorm {
                        run.final_normed.row(b * run.seq + site.token)
                    } else {
                        run.vector(b, *site)
                    };
                    data.x.row_mut(c * CHUNK + b).assign(&row);
                }
            }
        }
        Ok(ActivationDataset {
            d_model: d,
            k,
            sites: out,
        })
    }

    /// Groups loose records by site; rows keep record order.
    pub fn from_records(
        records: impl IntoIterator<Item = ActivationRecord>,
        k: usize,
    ) -> Result<Self, ProbeError> {
        let mut grouped: BTreeMap<Site, (Vec<f64>, Vec<usize>, Vec<usize>)> = BTreeMap::new();
        let mut d_model = None;
        for r in records {
            let d = *d_model.get_or_insert(r.vector.len());
            if r.vector.len() != d {
                return Err(ProbeError::DimensionMismatch {
                    expected: d,
                    got: r.vector.len(),
                });
            }
            if r.label == 0 || r.label > k {
                return Err(ProbeError::LabelOutOfRange { label: r.label, k });
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(ProbeError::NonFinite);
            }
            let e = grouped.entry(Site::new(r.layer, r.token)).or_default();
            e.0.extend(&r.vector);
            e.1.push(r.label);
            e.2.push(r.item);
        }
        let d_model = d_model.ok_or(ProbeError::Empty("activation records"))?;
        let sites = grouped
            .into_iter()
            .map(|(site, (flat, labels, items))| {
                let x = Array2::from_shape_vec((labels.len(), d_model), flat)
                    .expect("row lengths checked");
                (site, SiteData { x, labels, items })
            })
            .collect();
        Ok(ActivationDataset { d_model, k, sites })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sites(&self) -> Vec<Site> {
        self.sites.keys().copied().collect()
    }

    pub fn site(&self, site: Site) -> Result<&SiteData, ProbeError> {
        self.sites.get(&site).ok_or(ProbeError::MissingSite {
            layer: site.layer,
            token: site.token,
        })
    }

    pub fn records(&self) -> impl Iterator<Item = ActivationRecord> + '_ {
        self.sites.iter().flat_map(|(site, data)| {
            data.x
                .outer_iter()
                .zip(&data.labels)
                .zip(&data.items)
                .map(move |((row, &label), &item)| ActivationRecord {
                    layer: site.layer,
                    token: site.token,
                    label,
                    item,
                    vector: row.to_vec(),
                })
        })
    }

    /// One JSON object per line, sites in `(layer, token)` order.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in self.records() {
            s.push_str(&serde_json::to_string(&r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(raw: &str, k: usize) -> Result<Self, ProbeError> {
        let records = raw
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<ActivationRecord>(l).map_err(|e| ProbeError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_records(records, k)
    }
}
