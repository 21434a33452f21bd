//! Greedy decoding with a per-layer key/value cache.
//!
//! The prefix goes through the ordinary batched forward (so injections land
//! exactly where they would in [`Model::forward`]); each generated token then
//! costs one row per sequence per layer.

use ndarray::{s, Array2, Array3, ArrayView1};

use super::model::{affine, attend, gelu, layer_norm_plain, Keep};
use super::{InjectionSpec, Model, ModelError};

/// Tokens emitted after a stem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Hit `max_seq` before the answer marker and its following token.
    pub truncated: bool,
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Greedy continuation of one stem.
    pub fn generate(
        &self,
        stem: &[usize],
        inject: &[InjectionSpec],
    ) -> Result<Generation, ModelError> {
        Ok(self.generate_batch(&[stem], inject)?.remove(0))
    }

    /// Greedy continuation of many stems in lockstep.
    ///
    /// Generation stops after the token that follows the answer marker. Stems
    /// of different lengths are decoded in separate groups.
    pub fn generate_batch(
        &self,
        stems: &[&[usize]],
        inject: &[InjectionSpec],
    ) -> Result<Vec<Generation>, ModelError> {
        let term = self.config().vocab().terminator();
        if stems.iter().any(|s| s.last() != Some(&term)) {
            return Err(ModelError::MissingTerminator);
        }
        let mut lengths: Vec<usize> = stems.iter().map(|s| s.len()).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let mut out: Vec<Option<Generation>> = vec![None; stems.len()];
        for len in lengths {
            let idx: Vec<usize> = (0..stems.len()).filter(|&i| stems[i].len() == len).collect();
            let group: Vec<&[usize]> = idx.iter().map(|&i| stems[i]).collect();
            for (i, g) in idx.into_iter().zip(self.generate_group(&group, inject)?) {
                out[i] = Some(g);
            }
        }
        Ok(out.into_iter().map(|g| g.expect("every stem decoded")).collect())
    }

    fn generate_group(
        &self,
        stems: &[&[usize]],
        inject: &[InjectionSpec],
    ) -> Result<Vec<Generation>, ModelError> {
        let cfg = *self.config();
        let p = self.params();
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let marker = cfg.vocab().answer_marker();
        let batch = stems.len();

        let prefix = self.run(stems, inject, Keep::Qkv)?;
        let t0 = prefix.seq;
        let budget = cfg.max_seq - t0;
        let mut keys: Vec<Array3<f64>> = Vec::with_capacity(cfg.n_layers);
        let mut vals: Vec<Array3<f64>> = Vec::with_capacity(cfg.n_layers);
        for qkv in &prefix.qkv {
            let mut k = Array3::zeros((batch, cfg.max_seq, d));
            let mut v = Array3::zeros((batch, cfg.max_seq, d));
            for b in 0..batch {
                let rows = b * t0..(b + 1) * t0;
                k.slice_mut(s![b, ..t0, ..])
                    .assign(&qkv.slice(s![rows.clone(), d..2 * d]));
                v.slice_mut(s![b, ..t0, ..])
                    .assign(&qkv.slice(s![rows, 2 * d..3 * d]));
            }
            keys.push(k);
            vals.push(v);
        }

        let mut gens: Vec<Generation> = (0..batch)
            .map(|_| Generation {
                tokens: Vec::new(),
                truncated: false,
            })
            .collect();
        let mut done = vec![false; batch];
        let mut next: Vec<usize> = (0..batch)
            .map(|b| argmax(prefix.logits.row(b * t0 + t0 - 1)))
            .collect();
        if budget == 0 {
            for g in &mut gens {
                g.truncated = true;
            }
            return Ok(gens);
        }

        let mut probs = vec![0.0; cfg.max_seq];
        for pos in t0..cfg.max_seq {
            for b in 0..batch {
                if done[b] {
                    continue;
                }
                let g = &mut gens[b];
                let after_marker = g.tokens.last() == Some(&marker);
                g.tokens.push(next[b]);
                if after_marker {
                    done[b] = true;
                } else if pos + 1 == cfg.max_seq {
                    g.truncated = true;
                    done[b] = true;
                }
            }
            if done.iter().all(|&x| x) {
                break;
            }

            let mut x = self.embed_rows(next.iter().map(|&tok| (tok, pos)), batch);
            for (l, lp) in p.layers.iter().enumerate() {
                let a1 = layer_norm_plain(&x, &lp.ln1_g, &lp.ln1_b);
                let qkv = affine(&a1, &lp.w_qkv, &lp.b_qkv);
                let mut attn = Array2::zeros((batch, d));
                for b in 0..batch {
                    keys[l]
                        .slice_mut(s![b, pos, ..])
                        .assign(&qkv.slice(s![b, d..2 * d]));
                    vals[l]
                        .slice_mut(s![b, pos, ..])
                        .assign(&qkv.slice(s![b, 2 * d..3 * d]));
                    for head in 0..cfg.n_heads {
                        let c = head * dh..(head + 1) * dh;
                        attend(
                            qkv.slice(s![b, c.clone()]),
                            keys[l].slice(s![b, ..=pos, c.clone()]),
                            vals[l].slice(s![b, ..=pos, c.clone()]),
                            scale,
                            &mut probs[..=pos],
                            attn.slice_mut(s![b, c]),
                        );
                    }
                }
                let mid = &x + &affine(&attn, &lp.w_o, &lp.b_o);
                let a2 = layer_norm_plain(&mid, &lp.ln2_g, &lp.ln2_b);
                let act = affine(&a2, &lp.w_1, &lp.b_1).mapv(gelu);
                x = &mid + &affine(&act, &lp.w_2, &lp.b_2);
            }
            let z = layer_norm_plain(&x, &p.lnf_g, &p.lnf_b);
            let logits = z.dot(&p.unembed);
            for (b, n) in next.iter_mut().enumerate() {
                *n = argmax(logits.row(b));
            }
        }
        Ok(gens)
    }
}
