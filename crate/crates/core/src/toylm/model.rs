use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand_distr::{Distribution, Normal};

use super::{InjectionSpec, ModelError, Site, ToyLmConfig};
use crate::rng;

const LN_EPS: f64 = 1e-5;

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    /// Fused query/key/value projection, `d × 3d`.
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_1: Array2<f64>,
    pub b_1: Array1<f64>,
    pub w_2: Array2<f64>,
    pub b_2: Array1<f64>,
}

/// All model weights. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub unembed: Array2<f64>,
}

impl Params {
    pub fn zeros(cfg: &ToyLmConfig) -> Self {
        let d = cfg.d_model;
        let layer = LayerParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w_qkv: Array2::zeros((d, 3 * d)),
            b_qkv: Array1::zeros(3 * d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w_1: Array2::zeros((d, cfg.d_ff)),
            b_1: Array1::zeros(cfg.d_ff),
            w_2: Array2::zeros((cfg.d_ff, d)),
            b_2: Array1::zeros(d),
        };
        let v = cfg.vocab().size();
        Params {
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((cfg.max_seq, d)),
            layers: vec![layer; cfg.n_layers],
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            unembed: Array2::zeros((d, v)),
        }
    }

    /// Seeded initialization: unit layer-norm gains, zero biases, scaled
    /// normal weights with residual-branch outputs shrunk by `1/sqrt(2L)`.
    pub fn init(cfg: &ToyLmConfig) -> Self {
        let mut p = Params::zeros(cfg);
        let mut rng = rng::seeded(cfg.seed);
        let mut fill = |a: &mut [f64], std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in a.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        };
        let d = cfg.d_model as f64;
        let resid_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        fill(p.tok_emb.as_slice_mut().unwrap(), 0.5);
        fill(p.pos_emb.as_slice_mut().unwrap(), 0.5);
        for l in &mut p.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            fill(l.w_qkv.as_slice_mut().unwrap(), 1.0 / d.sqrt());
            fill(l.w_o.as_slice_mut().unwrap(), resid_scale / d.sqrt());
            fill(l.w_1.as_slice_mut().unwrap(), 1.0 / d.sqrt());
            fill(
                l.w_2.as_slice_mut().unwrap(),
                resid_scale / (cfg.d_ff as f64).sqrt(),
            );
        }
        p.lnf_g.fill(1.0);
        fill(p.unembed.as_slice_mut().unwrap(), 1.0 / d.sqrt());
        p
    }

    /// Flat views of every tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.tok_emb.as_slice().unwrap(),
            self.pos_emb.as_slice().unwrap(),
        ];
        for l in &self.layers {
            out.extend([
                l.ln1_g.as_slice().unwrap(),
                l.ln1_b.as_slice().unwrap(),
                l.w_qkv.as_slice().unwrap(),
                l.b_qkv.as_slice().unwrap(),
                l.w_o.as_slice().unwrap(),
                l.b_o.as_slice().unwrap(),
                l.ln2_g.as_slice().unwrap(),
                l.ln2_b.as_slice().unwrap(),
                l.w_1.as_slice().unwrap(),
                l.b_1.as_slice().unwrap(),
                l.w_2.as_slice().unwrap(),
                l.b_2.as_slice().unwrap(),
            ]);
        }
        out.extend([
            self.lnf_g.as_slice().unwrap(),
            self.lnf_b.as_slice().unwrap(),
            self.unembed.as_slice().unwrap(),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.tok_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
        ];
        for l in &mut self.layers {
            out.extend([
                l.ln1_g.as_slice_mut().unwrap(),
                l.ln1_b.as_slice_mut().unwrap(),
                l.w_qkv.as_slice_mut().unwrap(),
                l.b_qkv.as_slice_mut().unwrap(),
                l.w_o.as_slice_mut().unwrap(),
                l.b_o.as_slice_mut().unwrap(),
                l.ln2_g.as_slice_mut().unwrap(),
                l.ln2_b.as_slice_mut().unwrap(),
                l.w_1.as_slice_mut().unwrap(),
                l.b_1.as_slice_mut().unwrap(),
                l.w_2.as_slice_mut().unwrap(),
                l.b_2.as_slice_mut().unwrap(),
            ]);
        }
        out.extend([
            self.lnf_g.as_slice_mut().unwrap(),
            self.lnf_b.as_slice_mut().unwrap(),
            self.unembed.as_slice_mut().unwrap(),
        ]);
        out
    }

    /// Tensor shapes in [`Params::tensors`] order.
    pub fn shapes(cfg: &ToyLmConfig) -> Vec<Vec<usize>> {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab().size());
        let mut out = vec![vec![v, d], vec![cfg.max_seq, d]];
        for _ in 0..cfg.n_layers {
            out.extend([
                vec![d],
                vec![d],
                vec![d, 3 * d],
                vec![3 * d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ]);
        }
        out.extend([vec![d], vec![d], vec![d, v]]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<f64>,
    attn: Array2<f64>,
    ln2: LnCache,
    a2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(super) enum Keep {
    Nothing,
    /// Keep the fused qkv activations (for the decoding cache).
    Qkv,
    /// Keep everything needed for backpropagation.
    All,
}

/// Residual streams and outputs of a batched forward pass.
pub struct BatchOutput {
    pub batch: usize,
    pub seq: usize,
    /// `L + 1` matrices of shape `(batch * seq) × d`; row `b * seq + t`.
    pub residuals: Vec<Array2<f64>>,
    /// Residual stream after the final layer norm.
    pub final_normed: Array2<f64>,
    pub logits: Array2<f64>,
    pub(super) qkv: Vec<Array2<f64>>,
    caches: Vec<LayerCache>,
    lnf: Option<LnCache>,
}

impl BatchOutput {
    pub fn vector(&self, item: usize, site: Site) -> ArrayView1<'_, f64> {
        self.residuals[site.layer].row(item * self.seq + site.token)
    }
}

/// Single-sequence forward result.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `T × V` next-token logits.
    pub logits: Array2<f64>,
    /// Captured residual vectors, in the order requested.
    pub captured: Vec<(Site, Array1<f64>)>,
    /// `T × d` stream after the final layer norm (post-norm capture point).
    pub final_normed: Array2<f64>,
}

/// The toy language model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ToyLmConfig,
    params: Params,
    final_loss: Option<f64>,
}

pub(super) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let th = (C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

pub(super) fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for (o, v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - mean) * r;
        }
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

pub(super) fn layer_norm_plain(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    layer_norm(x, g, b).0
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dhx = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        let r = cache.rstd[i];
        for ((o, a), b) in dx.row_mut(i).iter_mut().zip(dh.iter()).zip(xh.iter()) {
            *o = r * (a - mean_dh - b * mean_dhx);
        }
    }
    dx
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// Softmax attention of one query over `keys[..]`; writes weights to `p`.
pub(super) fn attend(
    q: ArrayView1<f64>,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
    scale: f64,
    p: &mut [f64],
    mut out: ArrayViewMut1<f64>,
) {
    let mut max = f64::NEG_INFINITY;
    for (s, k) in keys.outer_iter().enumerate() {
        let sc = dot(q, k) * scale;
        p[s] = sc;
        max = max.max(sc);
    }
    let mut z = 0.0;
    for ps in p.iter_mut() {
        *ps = (*ps - max).exp();
        z += *ps;
    }
    for ps in p.iter_mut() {
        *ps /= z;
    }
    out.fill(0.0);
    for (s, v) in values.outer_iter().enumerate() {
        let w = p[s];
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
}

impl Model {
    /// A freshly initialized model.
    pub fn new(config: ToyLmConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Model {
            params: Params::init(&config),
            config,
            final_loss: None,
        })
    }

    pub fn from_params(
        config: ToyLmConfig,
        params: Params,
        final_loss: Option<f64>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = Params::shapes(&config);
        let ok = params.tensors().len() == shapes.len()
            && params
                .tensors()
                .iter()
                .zip(&shapes)
                .all(|(t, s)| t.len() == s.iter().product::<usize>());
        if !ok {
            return Err(ModelError::InvalidConfig(
                "parameter shapes do not match config".into(),
            ));
        }
        Ok(Model {
            config,
            params,
            final_loss,
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.final_loss
    }

    pub(super) fn set_final_loss(&mut self, loss: f64) {
        self.final_loss = Some(loss);
    }

    fn check_tokens(&self, seqs: &[&[usize]]) -> Result<usize, ModelError> {
        let first = seqs.first().ok_or(ModelError::Empty("batch"))?;
        let t = first.len();
        if t == 0 {
            return Err(ModelError::Empty("sequence"));
        }
        if t > self.config.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max: self.config.max_seq,
            });
        }
        let v = self.config.vocab().size();
        for seq in seqs {
            if seq.len() != t {
                return Err(ModelError::RaggedBatch);
            }
            if let Some(&bad) = seq.iter().find(|&&tok| tok >= v) {
                return Err(ModelError::TokenOutOfVocab(bad));
            }
        }
        Ok(t)
    }

    pub(super) fn check_injections(
        &self,
        inject: &[InjectionSpec],
        seq: usize,
    ) -> Result<(), ModelError> {
        for spec in inject {
            if spec.layer == 0 || spec.layer > self.config.n_layers || spec.token >= seq {
                return Err(ModelError::SiteOutOfRange {
                    layer: spec.layer,
                    token: spec.token,
                });
            }
            if spec.vector.len() != self.config.d_model {
                return Err(ModelError::DimensionMismatch {
                    expected: self.config.d_model,
                    got: spec.vector.len(),
                });
            }
        }
        Ok(())
    }

    pub(super) fn embed_rows(&self, tokens: impl Iterator<Item = (usize, usize)>, n: usize) -> Array2<f64> {
        let mut x = Array2::zeros((n, self.config.d_model));
        for (row, (tok, pos)) in tokens.enumerate() {
            let mut r = x.row_mut(row);
            r.assign(&self.params.tok_emb.row(tok));
            r += &self.params.pos_emb.row(pos);
        }
        x
    }

    fn attention(&self, qkv: &Array2<f64>, batch: usize, seq: usize) -> (Array2<f64>, Vec<f64>) {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((batch * seq, d));
        let mut probs = vec![0.0; batch * h * seq * seq];
        for b in 0..batch {
            let base = b * seq;
            for head in 0..h {
                let (q0, k0, v0) = (head * dh, d + head * dh, 2 * d + head * dh);
                for t in 0..seq {
                    let off = ((b * h + head) * seq + t) * seq;
                    attend(
                        qkv.slice(s![base + t, q0..q0 + dh]),
                        qkv.slice(s![base..=base + t, k0..k0 + dh]),
                        qkv.slice(s![base..=base + t, v0..v0 + dh]),
                        scale,
                        &mut probs[off..off + t + 1],
                        out.slice_mut(s![base + t, head * dh..(head + 1) * dh]),
                    );
                }
            }
        }
        (out, probs)
    }

    fn attention_backward(
        &self,
        dattn: &Array2<f64>,
        qkv: &Array2<f64>,
        probs: &[f64],
        batch: usize,
        seq: usize,
    ) -> Array2<f64> {
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = Array2::zeros(qkv.dim());
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            let base = b * seq;
            for head in 0..h {
                let (q0, k0, v0) = (head * dh, d + head * dh, 2 * d + head * dh);
                for t in 0..seq {
                    let off = ((b * h + head) * seq + t) * seq;
                    let p = &probs[off..off + t + 1];
                    let dout = dattn.slice(s![base + t, head * dh..(head + 1) * dh]);
                    let mut weighted = 0.0;
                    for s_ in 0..=t {
                        let v = qkv.slice(s![base + s_, v0..v0 + dh]);
                        dp[s_] = dot(dout, v);
                        weighted += p[s_] * dp[s_];
                        let mut dv = dqkv.slice_mut(s![base + s_, v0..v0 + dh]);
                        dv.scaled_add(p[s_], &dout);
                    }
                    let q = qkv.slice(s![base + t, q0..q0 + dh]).to_owned();
                    for s_ in 0..=t {
                        let ds = p[s_] * (dp[s_] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let k = qkv.slice(s![base + s_, k0..k0 + dh]).to_owned();
                        dqkv.slice_mut(s![base + t, q0..q0 + dh]).scaled_add(ds, &k);
                        dqkv.slice_mut(s![base + s_, k0..k0 + dh]).scaled_add(ds, &q);
                    }
                }
            }
        }
        dqkv
    }

    /// Batched forward pass over equal-length sequences.
    pub(super) fn run(
        &self,
        seqs: &[&[usize]],
        inject: &[InjectionSpec],
        keep: Keep,
    ) -> Result<BatchOutput, ModelError> {
        let seq = self.check_tokens(seqs)?;
        self.check_injections(inject, seq)?;
        let batch = seqs.len();
        let n = batch * seq;
        let tokens = seqs
            .iter()
            .flat_map(|s| s.iter().enumerate().map(|(pos, &tok)| (tok, pos)));
        let mut x = self.embed_rows(tokens, n);
        let mut residuals = Vec::with_capacity(self.config.n_layers + 1);
        let mut caches = Vec::new();
        let mut qkvs = Vec::new();
        residuals.push(x.clone());
        for (l, lp) in self.params.layers.iter().enumerate() {
            let (a1, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
            let qkv = affine(&a1, &lp.w_qkv, &lp.b_qkv);
            let (attn, probs) = self.attention(&qkv, batch, seq);
            let mid = &x + &affine(&attn, &lp.w_o, &lp.b_o);
            let (a2, ln2) = layer_norm(&mid, &lp.ln2_g, &lp.ln2_b);
            let pre = affine(&a2, &lp.w_1, &lp.b_1);
            let act = pre.mapv(gelu);
            x = &mid + &affine(&act, &lp.w_2, &lp.b_2);
            for spec in inject.iter().filter(|s| s.layer == l + 1) {
                for b in 0..batch {
                    let mut row = x.row_mut(b * seq + spec.token);
                    for (h, v) in row.iter_mut().zip(&spec.vector) {
                        *h += spec.alpha * v;
                    }
                }
            }
            residuals.push(x.clone());
            match keep {
                Keep::All => caches.push(LayerCache {
                    ln1,
                    a1,
                    qkv,
                    probs,
                    attn,
                    ln2,
                    a2,
                    pre,
                    act,
                }),
                Keep::Qkv => qkvs.push(qkv),
                Keep::Nothing => {}
            }
        }
        let (final_normed, lnf) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b);
        let logits = final_normed.dot(&self.params.unembed);
        Ok(BatchOutput {
            batch,
            seq,
            residuals,
            final_normed,
            logits,
            qkv: qkvs,
            caches,
            lnf: (keep == Keep::All).then_some(lnf),
        })
    }

    /// Forward pass over one sequence with optional captures and injections.
    ///
    /// Injected vectors are added to the post-block residual stream of their
    /// layer before the next block reads it; captures see the injected value.
    pub fn forward(
        &self,
        tokens: &[usize],
        capture: &[Site],
        inject: &[InjectionSpec],
    ) -> Result<ForwardOutput, ModelError> {
        let out = self.run(&[tokens], inject, Keep::Nothing)?;
        let captured = capture
            .iter()
            .map(|&site| {
                if site.layer > self.config.n_layers || site.token >= tokens.len() {
                    Err(ModelError::SiteOutOfRange {
                        layer: site.layer,
                        token: site.token,
                    })
                } else {
                    Ok((site, out.vector(0, site).to_owned()))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ForwardOutput {
            logits: out.logits,
            captured,
            final_normed: out.final_normed,
        })
    }

    /// Batched forward returning every layer's residual stream.
    pub fn residual_streams(
        &self,
        seqs: &[&[usize]],
        inject: &[InjectionSpec],
    ) -> Result<BatchOutput, ModelError> {
        self.run(seqs, inject, Keep::Nothing)
    }

    /// Mean next-token cross-entropy over all positions of the batch.
    pub fn loss(&self, seqs: &[&[usize]]) -> Result<f64, ModelError> {
        let out = self.run(seqs, &[], Keep::Nothing)?;
        Ok(cross_entropy(&out.logits, seqs, out.seq).0)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, seqs: &[&[usize]]) -> Result<(f64, Params), ModelError> {
        let out = self.run(seqs, &[], Keep::All)?;
        let (batch, seq) = (out.batch, out.seq);
        let (loss, dlogits) = cross_entropy(&out.logits, seqs, seq);
        let mut g = Params::zeros(&self.config);
        let p = &self.params;

        general_mat_mul(1.0, &out.final_normed.t(), &dlogits, 1.0, &mut g.unembed);
        let dz = dlogits.dot(&p.unembed.t());
        let lnf = out.lnf.as_ref().expect("kept for backward");
        let mut dx = layer_norm_backward(&dz, lnf, &p.lnf_g, &mut g.lnf_g, &mut g.lnf_b);

        for l in (0..self.config.n_layers).rev() {
            let lp = &p.layers[l];
            let c = &out.caches[l];
            let gl = &mut g.layers[l];

            general_mat_mul(1.0, &c.act.t(), &dx, 1.0, &mut gl.w_2);
            gl.b_2 += &dx.sum_axis(Axis(0));
            let mut dpre = dx.dot(&lp.w_2.t());
            dpre.zip_mut_with(&c.pre, |d, &x| *d *= gelu_grad(x));
            general_mat_mul(1.0, &c.a2.t(), &dpre, 1.0, &mut gl.w_1);
            gl.b_1 += &dpre.sum_axis(Axis(0));
            let da2 = dpre.dot(&lp.w_1.t());
            let dmid = &dx
                + &layer_norm_backward(&da2, &c.ln2, &lp.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);

            general_mat_mul(1.0, &c.attn.t(), &dmid, 1.0, &mut gl.w_o);
            gl.b_o += &dmid.sum_axis(Axis(0));
            let dattn = dmid.dot(&lp.w_o.t());
            let dqkv = self.attention_backward(&dattn, &c.qkv, &c.probs, batch, seq);
            general_mat_mul(1.0, &c.a1.t(), &dqkv, 1.0, &mut gl.w_qkv);
            gl.b_qkv += &dqkv.sum_axis(Axis(0));
            let da1 = dqkv.dot(&lp.w_qkv.t());
            dx = &dmid
                + &layer_norm_backward(&da1, &c.ln1, &lp.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        }

        for (b, s_) in seqs.iter().enumerate() {
            for (t, &tok) in s_.iter().enumerate() {
                let row = dx.row(b * seq + t);
                let mut te = g.tok_emb.row_mut(tok);
                te += &row;
                let mut pe = g.pos_emb.row_mut(t);
                pe += &row;
            }
        }
        Ok((loss, g))
    }
}

/// Mean cross-entropy of next-token prediction and its logit gradient.
fn cross_entropy(logits: &Array2<f64>, seqs: &[&[usize]], seq: usize) -> (f64, Array2<f64>) {
    let mut dlogits = Array2::zeros(logits.dim());
    if seq < 2 {
        return (0.0, dlogits);
    }
    let count = (seqs.len() * (seq - 1)) as f64;
    let mut loss = 0.0;
    for (b, s_) in seqs.iter().enumerate() {
        for t in 0..seq - 1 {
            let row = b * seq + t;
            let target = s_[t + 1];
            let z = logits.row(row);
            let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - z[target];
            let mut d = dlogits.row_mut(row);
            for (o, v) in d.iter_mut().zip(z.iter()) {
                *o = (v - lse).exp() / count;
            }
            d[target] -= 1.0 / count;
        }
    }
    (loss / count, dlogits)
}
