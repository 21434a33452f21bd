use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::toylm::Site;

const GRAD_TOL: f64 = 1e-6;
const MAX_ITER: usize = 100;

/// Binary logistic probe `p(tgt | h) = sigmoid(w.h + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegProbe {
    pub w: Vec<f64>,
    pub b: f64,
    /// Inverse regularization strength.
    pub c: f64,
    pub site: Option<Site>,
    /// `(src, tgt)` answer positions, 1-based.
    pub classes: Option<(usize, usize)>,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Set by [`sign_align`].
    #[serde(default)]
    pub aligned: bool,
}

impl LogRegProbe {
    pub fn decision(&self, h: ArrayView1<f64>) -> f64 {
        h.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    /// `true` means the target class.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<bool> {
        x.outer_iter().map(|r| self.decision(r) > 0.0).collect()
    }

    pub fn accuracy(&self, x: &Array2<f64>, y: &[bool]) -> f64 {
        let hits = self.predict(x).iter().zip(y).filter(|(p, t)| p == t).count();
        hits as f64 / y.len().max(1) as f64
    }

    pub fn w_norm(&self) -> f64 {
        self.w.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Regularized negative log-likelihood; the intercept is not penalized.
fn objective(x: &Array2<f64>, y: &[f64], w: &Array1<f64>, b: f64, c: f64) -> f64 {
    let z = x.dot(w) + b;
    let nll: f64 = z.iter().zip(y).map(|(&z, &y)| softplus(z) - y * z).sum();
    0.5 * w.dot(w) + c * nll
}

/// Fits an l2-regularized logistic regression by damped Newton steps, then
/// sign-aligns it so `w` points from the `false` mean to the `true` mean.
pub fn train_logreg(x: &Array2<f64>, y: &[bool], c: f64) -> Result<LogRegProbe, ProbeError> {
    let (n, d) = x.dim();
    if n != y.len() {
        return Err(ProbeError::DimensionMismatch { expected: n, got: y.len() });
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(ProbeError::InvalidConfig(format!("C must be positive, got {c}")));
    }
    let n_pos = y.iter().filter(|&&v| v).count();
    if n_pos == 0 || n_pos == n {
        return Err(ProbeError::SingleClass);
    }
    for (class, count) in [(0, n - n_pos), (1, n_pos)] {
        if count < 2 {
            return Err(ProbeError::TooFewSamples { class, count, min: 2 });
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite);
    }
    let yf: Vec<f64> = y.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();

    let mut xa = Array2::ones((n, d + 1));
    xa.slice_mut(ndarray::s![.., ..d]).assign(x);

    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0;
    let mut iterations = 0;
    let mut grad_norm;
    loop {
        let z = x.dot(&w) + b;
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let resid = Array1::from_iter(p.iter().zip(&yf).map(|(p, y)| p - y));
        let mut g = xa.t().dot(&resid) * c;
        for j in 0..d {
            g[j] += w[j];
        }
        grad_norm = g.dot(&g).sqrt();
        if grad_norm <= GRAD_TOL {
            break;
        }
        if iterations == MAX_ITER {
            return Err(ProbeError::NotConverged { iterations, grad_norm });
        }
        iterations += 1;

        let mut xs = xa.clone();
        for (mut row, &pi) in xs.outer_iter_mut().zip(&p) {
            row *= (c * pi * (1.0 - pi)).sqrt();
        }
        let mut h = xs.t().dot(&xs);
        for j in 0..d {
            h[[j, j]] += 1.0;
        }
        let hm = DMatrix::from_row_slice(d + 1, d + 1, h.as_slice().expect("standard layout"));
        let gv = DVector::from_column_slice(g.as_slice().expect("contiguous"));
        let step = match hm.clone().cholesky() {
            Some(ch) => ch.solve(&gv),
            None => {
                let jitter = DMatrix::identity(d + 1, d + 1) * 1e-10;
                (hm + jitter)
                    .cholesky()
                    .map(|ch| ch.solve(&gv))
                    .unwrap_or_else(|| gv.clone())
            }
        };
        let step = Array1::from_iter(step.iter().copied());

        let f0 = objective(x, &yf, &w, b, c);
        let slope = g.dot(&step);
        let mut t = 1.0;
        loop {
            let w_new = &w - &(step.slice(ndarray::s![..d]).to_owned() * t);
            let b_new = b - t * step[d];
            let f1 = objective(x, &yf, &w_new, b_new, c);
            if f1 <= f0 - 1e-4 * t * slope || t < 1e-10 {
                w = w_new;
                b = b_new;
                break;
            }
            t *= 0.5;
        }
    }

    let mu_tgt = mean_where(x, y, true);
    let mu_src = mean_where(x, y, false);
    let probe = LogRegProbe {
        w: w.to_vec(),
        b,
        c,
        site: None,
        classes: None,
        iterations,
        grad_norm,
        aligned: false,
    };
    sign_align(probe, mu_src.as_slice().unwrap(), mu_tgt.as_slice().unwrap())
}

fn mean_where(x: &Array2<f64>, y: &[bool], which: bool) -> Array1<f64> {
    let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == which).collect();
    x.select(Axis(0), &idx).mean_axis(Axis(0)).expect("class is non-empty")
}

/// Flips `(w, b)` when needed so that `w . (mu_tgt - mu_src) > 0`.
pub fn sign_align(
    mut probe: LogRegProbe,
    mu_src: &[f64],
    mu_tgt: &[f64],
) -> Result<LogRegProbe, ProbeError> {
    let d = probe.w.len();
    for mu in [mu_src, mu_tgt] {
        if mu.len() != d {
            return Err(ProbeError::DimensionMismatch { expected: d, got: mu.len() });
        }
    }
    let dot: f64 = probe
        .w
        .iter()
        .zip(mu_src.iter().zip(mu_tgt))
        .map(|(w, (s, t))| w * (t - s))
        .sum();
    if dot == 0.0 {
        return Err(ProbeError::DegenerateDirection);
    }
    if dot < 0.0 {
        probe.w.iter_mut().for_each(|v| *v = -*v);
        probe.b = -probe.b;
    }
    probe.aligned = true;
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    fn clusters(n: usize, d: usize, sep: f64, seed: u64) -> (Array2<f64>, Vec<bool>) {
        let mut r = rng::seeded(seed);
        let mut x = Array2::zeros((n, d));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let cls = i % 2 == 1;
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut r);
                x[[i, j]] = z + if cls && j == 0 { sep } else { 0.0 };
            }
            y.push(cls);
        }
        (x, y)
    }

    fn probe(w: Vec<f64>, b: f64) -> LogRegProbe {
        LogRegProbe {
            w,
            b,
            c: 1.0,
            site: None,
            classes: None,
            iterations: 0,
            grad_norm: 0.0,
            aligned: false,
        }
    }

    #[test]
    fn separable_clusters_are_classified_perfectly() {
        let (x, y) = clusters(400, 5, 12.0, 1);
        let (xt, yt) = clusters(200, 5, 12.0, 2);
        let p = train_logreg(&x, &y, 1.0).unwrap();
        assert!(p.grad_norm <= GRAD_TOL);
        assert_eq!(p.accuracy(&xt, &yt), 1.0);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let (x, mut y) = clusters(1000, 5, 3.0, 3);
        y.shuffle(&mut rng::seeded(4));
        let (xt, mut yt) = clusters(2000, 5, 3.0, 5);
        yt.shuffle(&mut rng::seeded(6));
        let acc = train_logreg(&x, &y, 1.0).unwrap().accuracy(&xt, &yt);
        assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn weight_norm_shrinks_with_c() {
        let (x, y) = clusters(200, 4, 2.0, 7);
        let norms: Vec<f64> = [10.0, 1.0, 0.1, 0.01, 1e-3, 1e-4]
            .iter()
            .map(|&c| train_logreg(&x, &y, c).unwrap().w_norm())
            .collect();
        for pair in norms.windows(2) {
            assert!(pair[1] < pair[0], "{norms:?}");
        }
        assert!(norms[5] < 1e-2 * norms[0], "{norms:?}");
    }

    #[test]
    fn loss_beats_the_origin_on_separable_data() {
        let (x, y) = clusters(100, 3, 8.0, 8);
        let p = train_logreg(&x, &y, 1.0).unwrap();
        let yf: Vec<f64> = y.iter().map(|&v| v as u8 as f64).collect();
        let at_zero = objective(&x, &yf, &Array1::zeros(3), 0.0, 1.0);
        let fitted = objective(&x, &yf, &Array1::from(p.w.clone()), p.b, 1.0);
        assert!(fitted < at_zero - 1.0);
    }

    #[test]
    fn sign_alignment_cases() {
        let mu_s = [0.0, 0.0];
        let mu_t = [1.0, 2.0];
        let keep = sign_align(probe(vec![1.0, 1.0], 0.5), &mu_s, &mu_t).unwrap();
        assert_eq!(keep.w, vec![1.0, 1.0]);
        assert!(keep.aligned);
        let flipped = sign_align(probe(vec![-1.0, -1.0], 0.5), &mu_s, &mu_t).unwrap();
        assert_eq!((flipped.w.clone(), flipped.b), (vec![1.0, 1.0], -0.5));
        let again = sign_align(flipped.clone(), &mu_s, &mu_t).unwrap();
        assert_eq!(again, flipped);
        assert!(matches!(
            sign_align(probe(vec![2.0, -1.0], 0.0), &mu_s, &mu_t),
            Err(ProbeError::DegenerateDirection)
        ));
        assert!(sign_align(probe(vec![1.0], 0.0), &mu_s, &mu_t).is_err());
    }

    #[test]
    fn input_validation() {
        let (x, y) = clusters(10, 2, 1.0, 9);
        assert!(matches!(
            train_logreg(&x, &[true; 10], 1.0),
            Err(ProbeError::SingleClass)
        ));
        let mut one = vec![false; 10];
        one[0] = true;
        assert!(matches!(
            train_logreg(&x, &one, 1.0),
            Err(ProbeError::TooFewSamples { .. })
        ));
        let mut bad = x.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(matches!(train_logreg(&bad, &y, 1.0), Err(ProbeError::NonFinite)));
        assert!(train_logreg(&x, &y, 0.0).is_err());
    }
}
