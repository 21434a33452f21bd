use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::rng;
use crate::toylm::Site;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_frac: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_size: 128,
            epochs: 200,
            lr: 1e-3,
            batch_size: 64,
            train_frac: 0.8,
        }
    }
}

impl MlpConfig {
    fn validate(&self) -> Result<(), ProbeError> {
        if self.hidden_size == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(ProbeError::InvalidConfig(
                "hidden_size, epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(ProbeError::InvalidConfig(
                "lr must be positive and train_frac inside (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of the probe network (on standardized inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpWeights {
    fn zeros(d: usize, h: usize, k: usize) -> Self {
        MlpWeights {
            w1: Array2::zeros((d, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, k)),
            b2: Array1::zeros(k),
        }
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    fn logits(&self, xs: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut a = xs.dot(&self.w1);
        a += &self.b1;
        a.mapv_inplace(f64::tanh);
        let mut z = a.dot(&self.w2);
        z += &self.b2;
        (a, z)
    }

    /// Mean cross-entropy on standardized inputs and its gradient.
    pub fn loss_and_grad(&self, xs: &Array2<f64>, y: &[usize]) -> (f64, MlpWeights) {
        let n = xs.nrows() as f64;
        let (a, z) = self.logits(xs);
        let (loss, dz) = softmax_xent(&z, y, n);
        let mut g = MlpWeights::zeros(self.w1.nrows(), self.w1.ncols(), self.w2.ncols());
        g.w2 = a.t().dot(&dz);
        g.b2 = dz.sum_axis(Axis(0));
        let mut da = dz.dot(&self.w2.t());
        da.zip_mut_with(&a, |d, &av| *d *= 1.0 - av * av);
        g.w1 = xs.t().dot(&da);
        g.b1 = da.sum_axis(Axis(0));
        (loss, g)
    }
}

fn softmax_xent(z: &Array2<f64>, y: &[usize], n: f64) -> (f64, Array2<f64>) {
    let mut dz = Array2::zeros(z.dim());
    let mut loss = 0.0;
    for (i, row) in z.outer_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y[i]];
        for (o, v) in dz.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - lse).exp() / n;
        }
        dz[[i, y[i]]] -= 1.0 / n;
    }
    (loss / n, dz)
}

/// One-hidden-layer tanh classifier with input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpProbe {
    pub hidden_size: usize,
    pub k: usize,
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub weights: MlpWeights,
    pub seed: u64,
    pub site: Option<Site>,
}

impl MlpProbe {
    pub fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.scale
    }

    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        self.weights.logits(&self.standardize(x)).1
    }

    /// 0-based predicted classes; ties go to the lower class.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        self.logits(x)
            .outer_iter()
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Fits on all rows of `x` (0-based labels `y`).
    pub fn fit(
        x: &Array2<f64>,
        y: &[usize],
        k: usize,
        cfg: &MlpConfig,
        seed: u64,
    ) -> Result<Self, ProbeError> {
        cfg.validate()?;
        let (n, d) = x.dim();
        if n == 0 {
            return Err(ProbeError::Empty("training rows"));
        }
        if y.len() != n {
            return Err(ProbeError::DimensionMismatch { expected: n, got: y.len() });
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= k) {
            return Err(ProbeError::LabelOutOfRange { label: bad + 1, k });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite);
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let xs = (x - &mean) / &scale;

        let h = cfg.hidden_size;
        let mut r = rng::derive(seed, 1);
        let mut weights = MlpWeights::zeros(d, h, k);
        let n1 = Normal::new(0.0, (2.0 / (d + h) as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, (2.0 / (h + k) as f64).sqrt()).expect("valid std");
        weights.w1.iter_mut().for_each(|v| *v = n1.sample(&mut r));
        weights.w2.iter_mut().for_each(|v| *v = n2.sample(&mut r));

        let mut m = MlpWeights::zeros(d, h, k);
        let mut v = MlpWeights::zeros(d, h, k);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut t = 0i32;
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut r);
            for chunk in order.chunks(cfg.batch_size) {
                let xb = xs.select(Axis(0), chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                let (_, g) = weights.loss_and_grad(&xb, &yb);
                t += 1;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                let gs = g.tensors();
                let ws = weights.tensors_mut();
                let ms = m.tensors_mut();
                let vs = v.tensors_mut();
                for (((w, g), m), v) in ws.into_iter().zip(gs).zip(ms).zip(vs) {
                    for i in 0..w.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        w[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(MlpProbe {
            hidden_size: h,
            k,
            mean,
            scale,
            weights,
            seed,
            site: None,
        })
    }
}

/// Per-class split keeping `train_frac` of every class in training.
///
/// Returns sorted `(train, test)` row indices. Every class in `0..k` must
/// have at least one sample.
pub fn stratified_split(
    y: &[usize],
    k: usize,
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), ProbeError> {
    let mut r = rng::derive(seed, 0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..k {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        if idx.is_empty() {
            return Err(ProbeError::Stratification { class: class + 1 });
        }
        idx.shuffle(&mut r);
        let n = idx.len();
        let n_train = if n == 1 {
            1
        } else {
            ((train_frac * n as f64).round() as usize).clamp(1, n - 1)
        };
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Unweighted mean of per-class F1 over classes `0..k`. A class with no true
/// and no predicted samples contributes 0.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize], k: usize) -> f64 {
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let sum: f64 = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    sum / k as f64
}

/// Trains on a stratified split and returns the held-out macro-F1.
pub fn train_mlp(
    x: &Array2<f64>,
    y: &[usize],
    k: usize,
    cfg: &MlpConfig,
    seed: u64,
) -> Result<(MlpProbe, f64), ProbeError> {
    cfg.validate()?;
    if x.nrows() != y.len() {
        return Err(ProbeError::DimensionMismatch { expected: x.nrows(), got: y.len() });
    }
    let (train, test) = stratified_split(y, k, cfg.train_frac, seed)?;
    let xtr = x.select(Axis(0), &train);
    let ytr: Vec<usize> = train.iter().map(|&i| y[i]).collect();
    let probe = MlpProbe::fit(&xtr, &ytr, k, cfg, seed)?;
    let xte = x.select(Axis(0), &test);
    let yte: Vec<usize> = test.iter().map(|&i| y[i]).collect();
    let f1 = macro_f1(&yte, &probe.predict(&xte), k);
    Ok((probe, f1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    #[test]
    fn f1_hand_cases() {
        assert_eq!(macro_f1(&[0, 1, 2, 3], &[0, 1, 2, 3], 4), 1.0);
        // Always predict class 0 on a 70/10/10/10 split.
        let y: Vec<usize> = (0..100).map(|i| if i < 70 { 0 } else { 1 + i % 3 }).collect();
        let f = macro_f1(&y, &[0; 100], 4);
        assert!((f - (2.0 * 0.7 / 1.7) / 4.0).abs() < 1e-12);
        // Class 3 absent from truth and predictions contributes 0.
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 4), 0.75);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let y: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let (tr, te) = stratified_split(&y, 4, 0.8, 3).unwrap();
        assert_eq!(tr.len(), 80);
        assert_eq!(te.len(), 20);
        for c in 0..4 {
            assert_eq!(te.iter().filter(|&&i| y[i] == c).count(), 5);
        }
        assert!(tr.iter().all(|i| !te.contains(i)));
        assert!(matches!(
            stratified_split(&[0, 1, 1], 3, 0.8, 0),
            Err(ProbeError::Stratification { class: 3 })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::seeded(5);
        let xs = Array2::from_shape_fn((7, 3), |_| r.sample::<f64, _>(StandardNormal));
        let y = vec![0, 1, 2, 1, 0, 2, 2];
        let mut w = MlpWeights::zeros(3, 4, 3);
        for t in w.tensors_mut() {
            for v in t.iter_mut() {
                *v = r.sample::<f64, _>(StandardNormal) * 0.5;
            }
        }
        let (_, g) = w.loss_and_grad(&xs, &y);
        let analytic: Vec<f64> = g.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let h = 1e-6;
        let mut idx = 0;
        for ti in 0..4 {
            for j in 0..w.tensors()[ti].len() {
                let orig = w.tensors()[ti][j];
                w.tensors_mut()[ti][j] = orig + h;
                let up = w.loss_and_grad(&xs, &y).0;
                w.tensors_mut()[ti][j] = orig - h;
                let down = w.loss_and_grad(&xs, &y).0;
                w.tensors_mut()[ti][j] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "param {idx}: {a} vs {fd}");
                idx += 1;
            }
        }
    }

    #[test]
    fn label_independent_features_score_near_chance() {
        let mut r = rng::seeded(8);
        let x = Array2::from_shape_fn((1000, 6), |_| r.sample::<f64, _>(StandardNormal));
        let y: Vec<usize> = (0..1000).map(|_| r.random_range(0..4)).collect();
        let cfg = MlpConfig { hidden_size: 16, epochs: 30, ..MlpConfig::default() };
        let mean = (0..3)
            .map(|s| train_mlp(&x, &y, 4, &cfg, s).unwrap().1)
            .sum::<f64>()
            / 3.0;
        assert!((mean - 0.25).abs() <= 0.05, "mean f1 {mean}");
    }

    #[test]
    fn separable_classes_are_learned() {
        let mut r = rng::seeded(9);
        let y: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let x = Array2::from_shape_fn((400, 4), |(i, j)| {
            r.sample::<f64, _>(StandardNormal) * 0.3 + if y[i] == j { 3.0 } else { 0.0 }
        });
        let cfg = MlpConfig { hidden_size: 16, epochs: 40, ..MlpConfig::default() };
        let (_, f1) = train_mlp(&x, &y, 4, &cfg, 1).unwrap();
        assert!(f1 >= 0.95);
    }
}
