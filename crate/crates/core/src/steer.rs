//! Steering vectors: mean difference, logistic-probe weights and
//! norm-matched random directions, one per `(layer, token)` site.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::{ActivationDataset, LogRegProbe, ProbeError};
use crate::rng;
use crate::toylm::Site;

pub const VECTOR_MAGIC: &[u8; 4] = b"PBSV";
pub const VECTOR_VERSION: u32 = 1;

/// Stream id for random directions, so a seed here never replays another
/// component's draws.
const RANDOM_STREAM: u64 = 7;

#[derive(Debug, Error)]
pub enum SteerError {
    #[error("{0} class has no samples")]
    EmptyClass(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("probe is not sign-aligned")]
    Unaligned,
    #[error("probe lacks {0}")]
    MissingProvenance(&'static str),
    #[error("reference vector has zero norm")]
    ZeroReference,
    #[error("bad vector file: {0}")]
    BadFile(String),
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error("no {method} vector for site (layer {layer}, token {token})")]
    NotFound {
        method: &'static str,
        layer: usize,
        token: usize,
    },
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MeanDiff,
    Classifier,
    Random,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::MeanDiff => "mean_diff",
            Method::Classifier => "classifier",
            Method::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    MeanDiff { n_src: usize, n_tgt: usize },
    Classifier { probe_id: String, c: f64 },
    Random { seed: u64, reference_norm: f64 },
}

/// A direction to add at one site, moving answers from `src` to `tgt`
/// (1-based positions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    #[serde(skip)]
    pub vector: Vec<f64>,
    pub method: Method,
    pub src: usize,
    pub tgt: usize,
    pub site: Site,
    pub norm: f64,
    pub provenance: Provenance,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl SteeringVector {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn injection(&self, alpha: f64) -> crate::toylm::InjectionSpec {
        crate::toylm::InjectionSpec {
            layer: self.site.layer,
            token: self.site.token,
            vector: self.vector.clone(),
            alpha,
        }
    }
}

/// `mean(h_tgt) - mean(h_src)`.
pub fn mean_diff(
    h_src: ArrayView2<f64>,
    h_tgt: ArrayView2<f64>,
    site: Site,
    src: usize,
    tgt: usize,
) -> Result<SteeringVector, SteerError> {
    if h_src.nrows() == 0 {
        return Err(SteerError::EmptyClass("source"));
    }
    if h_tgt.nrows() == 0 {
        return Err(SteerError::EmptyClass("target"));
    }
    if h_src.ncols() != h_tgt.ncols() {
        return Err(SteerError::DimensionMismatch {
            expected: h_src.ncols(),
            got: h_tgt.ncols(),
        });
    }
    let mu_s = h_src.mean_axis(Axis(0)).expect("non-empty");
    let mu_t = h_tgt.mean_axis(Axis(0)).expect("non-empty");
    let vector = (mu_t - mu_s).to_vec();
    Ok(SteeringVector {
        norm: l2(&vector),
        vector,
        method: Method::MeanDiff,
        src,
        tgt,
        site,
        provenance: Provenance::MeanDiff {
            n_src: h_src.nrows(),
            n_tgt: h_tgt.nrows(),
        },
    })
}

/// Mean difference between the `src` and `tgt` rows captured at `site`.
pub fn mean_diff_at(
    data: &ActivationDataset,
    site: Site,
    src: usize,
    tgt: usize,
) -> Result<SteeringVector, SteerError> {
    let sd = data.site(site)?;
    let rows = |label| -> Vec<usize> { (0..sd.len()).filter(|&i| sd.labels[i] == label).collect() };
    let xs = sd.x.select(Axis(0), &rows(src));
    let xt = sd.x.select(Axis(0), &rows(tgt));
    mean_diff(xs.view(), xt.view(), site, src, tgt)
}

/// The probe's weight vector; the bias is not part of the direction.
pub fn classifier_vector(probe: &LogRegProbe) -> Result<SteeringVector, SteerError> {
    if !probe.aligned {
        return Err(SteerError::Unaligned);
    }
    let site = probe.site.ok_or(SteerError::MissingProvenance("a site"))?;
    let (src, tgt) = probe.classes.ok_or(SteerError::MissingProvenance("class labels"))?;
    let probe_id = format!(
        "logreg:l{}:t{}:{}->{}:C={}",
        site.layer, site.token, src, tgt, probe.c
    );
    Ok(SteeringVector {
        norm: l2(&probe.w),
        vector: probe.w.clone(),
        method: Method::Classifier,
        src,
        tgt,
        site,
        provenance: Provenance::Classifier { probe_id, c: probe.c },
    })
}

/// Trains an aligned logistic probe on the `src`/`tgt` rows at `site` and
/// returns its weight direction.
pub fn classifier_at(
    data: &ActivationDataset,
    site: Site,
    src: usize,
    tgt: usize,
    c: f64,
) -> Result<SteeringVector, SteerError> {
    let sd = data.site(site)?;
    let idx: Vec<usize> = (0..sd.len())
        .filter(|&i| sd.labels[i] == src || sd.labels[i] == tgt)
        .collect();
    let x = sd.x.select(Axis(0), &idx);
    let y: Vec<bool> = idx.iter().map(|&i| sd.labels[i] == tgt).collect();
    let mut probe = crate::probe::train_logreg(&x, &y, c)?;
    probe.site = Some(site);
    probe.classes = Some((src, tgt));
    classifier_vector(&probe)
}

/// Standard-normal direction rescaled to the reference norm.
pub fn random_direction(
    dim: usize,
    seed: u64,
    reference: &SteeringVector,
) -> Result<SteeringVector, SteerError> {
    if reference.norm <= 0.0 || !reference.norm.is_finite() {
        return Err(SteerError::ZeroReference);
    }
    if dim != reference.dim() {
        return Err(SteerError::DimensionMismatch {
            expected: reference.dim(),
            got: dim,
        });
    }
    let mut r = rng::derive(seed, RANDOM_STREAM);
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
    let scale = reference.norm / l2(&raw);
    let vector: Vec<f64> = raw.iter().map(|v| v * scale).collect();
    Ok(SteeringVector {
        norm: l2(&vector),
        vector,
        method: Method::Random,
        src: reference.src,
        tgt: reference.tgt,
        site: reference.site,
        provenance: Provenance::Random {
            seed,
            reference_norm: reference.norm,
        },
    })
}

/// Builds one `method` vector at `site`. Random directions are norm-matched
/// to the mean difference at the same site; `seed` is ignored otherwise and
/// `c` is only used by the classifier.
pub fn build_vector(
    data: &ActivationDataset,
    method: Method,
    site: Site,
    (src, tgt): (usize, usize),
    seed: u64,
    c: f64,
) -> Result<SteeringVector, SteerError> {
    match method {
        Method::MeanDiff => mean_diff_at(data, site, src, tgt),
        Method::Classifier => classifier_at(data, site, src, tgt, c),
        Method::Random => {
            let reference = mean_diff_at(data, site, src, tgt)?;
            random_direction(reference.dim(), seed, &reference)
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (l2(a) * l2(b))
}

/// Writes the raw vectors: magic, version, count, then `dim, f64..` each.
pub fn write_vectors<W: Write>(mut w: W, vectors: &[SteeringVector]) -> Result<(), SteerError> {
    w.write_all(VECTOR_MAGIC)?;
    w.write_u32::<LE>(VECTOR_VERSION)?;
    w.write_u32::<LE>(vectors.len() as u32)?;
    for v in vectors {
        w.write_u32::<LE>(v.dim() as u32)?;
        for &x in &v.vector {
            w.write_f64::<LE>(x)?;
        }
    }
    Ok(())
}

/// JSON metadata for each vector, in file order.
pub fn sidecar_json(vectors: &[SteeringVector]) -> String {
    serde_json::to_string_pretty(vectors).expect("metadata serializes")
}

/// Reads vectors back and re-attaches their sidecar metadata.
pub fn read_vectors<R: Read>(mut r: R, sidecar: &str) -> Result<Vec<SteeringVector>, SteerError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VECTOR_MAGIC {
        return Err(SteerError::BadFile("wrong magic bytes".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != VECTOR_VERSION {
        return Err(SteerError::BadFile(format!("unsupported version {version}")));
    }
    let n = r.read_u32::<LE>()? as usize;
    let mut meta: Vec<SteeringVector> =
        serde_json::from_str(sidecar).map_err(|e| SteerError::Sidecar(e.to_string()))?;
    if meta.len() != n {
        return Err(SteerError::Sidecar(format!(
            "{} entries for {n} vectors",
            meta.len()
        )));
    }
    for m in &mut meta {
        let d = r.read_u32::<LE>()? as usize;
        if d > 1 << 20 {
            return Err(SteerError::BadFile(format!("implausible dimension {d}")));
        }
        let mut v = vec![0.0; d];
        r.read_f64_into::<LE>(&mut v)?;
        if (l2(&v) - m.norm).abs() > 1e-9 * m.norm.max(1.0) {
            return Err(SteerError::Sidecar("stored norm does not match vector".into()));
        }
        m.vector = v;
    }
    Ok(meta)
}
