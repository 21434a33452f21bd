use posbias::toylm::{
    parse_emission, synth_task, train, InjectionSpec, Model, Site, SynthConfig, ToyLmConfig,
    TrainConfig, VocabSpec,
};
use proptest::prelude::*;

fn micro() -> ToyLmConfig {
    ToyLmConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_seq: 12,
        seed: 1,
        vocab: VocabSpec {
            n_topics: 2,
            n_fillers: 2,
        },
    }
}

fn small() -> ToyLmConfig {
    ToyLmConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq: 12,
        seed: 4,
        vocab: VocabSpec::default(),
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut model = Model::new(micro()).unwrap();
    let seqs: Vec<Vec<usize>> = vec![vec![0, 2, 3, 5, 7, 13, 9, 21], vec![1, 3, 2, 4, 13, 10, 11, 20]];
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let (_, grads) = model.loss_and_grad(&refs).unwrap();
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();

    let h = 1e-5;
    let mut numeric = Vec::with_capacity(analytic.len());
    let n_tensors = model.params().tensors().len();
    for ti in 0..n_tensors {
        let len = model.params().tensors()[ti].len();
        for j in 0..len {
            let orig = model.params().tensors()[ti][j];
            model.params_mut().tensors_mut()[ti][j] = orig + h;
            let up = model.loss(&refs).unwrap();
            model.params_mut().tensors_mut()[ti][j] = orig - h;
            let down = model.loss(&refs).unwrap();
            model.params_mut().tensors_mut()[ti][j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let good = analytic
        .iter()
        .zip(&numeric)
        .filter(|(a, n)| {
            let denom = a.abs().max(n.abs());
            denom < 1e-7 || (*a - *n).abs() / denom < 1e-4
        })
        .count();
    let frac = good as f64 / analytic.len() as f64;
    assert!(frac >= 0.95, "only {frac:.3} of parameters within tolerance");
}

#[test]
fn layer_zero_capture_is_embedding_plus_position() {
    let model = Model::new(small()).unwrap();
    let toks = [3usize, 9, 10, 18, 57];
    let sites: Vec<Site> = (0..toks.len()).map(|i| Site::new(0, i)).collect();
    let out = model.forward(&toks, &sites, &[]).unwrap();
    let p = model.params();
    for (site, v) in &out.captured {
        let expect = &p.tok_emb.row(toks[site.token]) + &p.pos_emb.row(site.token);
        assert_eq!(v, &expect);
    }
}

#[test]
fn zero_alpha_and_zero_vector_are_identities() {
    let model = Model::new(small()).unwrap();
    let v = model.config().vocab();
    let stem = [v.topic(1), v.filler(2), v.filler(0), v.filler(3), v.cue(1), v.terminator()];
    let base = model.forward(&stem, &[], &[]).unwrap();
    let base_gen = model.generate(&stem, &[]).unwrap();
    for (alpha, vector) in [(0.0, vec![1.5; 16]), (7.0, vec![0.0; 16]), (0.0, vec![-2.0; 16])] {
        let inj = [InjectionSpec { layer: 2, token: 4, vector, alpha }];
        let out = model.forward(&stem, &[], &inj).unwrap();
        assert_eq!(out.logits, base.logits);
        assert_eq!(model.generate(&stem, &inj).unwrap(), base_gen);
    }
}

#[test]
fn capture_sees_injected_value() {
    let model = Model::new(small()).unwrap();
    let toks = [0usize, 8, 9, 10, 16, 56];
    let site = Site::new(2, 3);
    let vector: Vec<f64> = (0..16).map(|i| i as f64 / 10.0).collect();
    let base = model.forward(&toks, &[site], &[]).unwrap();
    let inj = [InjectionSpec { layer: 2, token: 3, vector: vector.clone(), alpha: 2.0 }];
    let out = model.forward(&toks, &[site], &inj).unwrap();
    for k in 0..16 {
        assert_eq!(out.captured[0].1[k], base.captured[0].1[k] + 2.0 * vector[k]);
    }
}

#[test]
fn invalid_sites_and_dimensions_are_rejected() {
    let model = Model::new(small()).unwrap();
    let toks = [0usize, 8, 9];
    let mk = |layer, token, d| InjectionSpec { layer, token, vector: vec![0.0; d], alpha: 1.0 };
    assert!(model.forward(&toks, &[], &[mk(0, 1, 16)]).is_err());
    assert!(model.forward(&toks, &[], &[mk(4, 1, 16)]).is_err());
    assert!(model.forward(&toks, &[], &[mk(1, 3, 16)]).is_err());
    assert!(model.forward(&toks, &[], &[mk(1, 1, 15)]).is_err());
    assert!(model.forward(&toks, &[Site::new(4, 0)], &[]).is_err());
    assert!(model.forward(&[999], &[], &[]).is_err());
}

#[test]
fn disjoint_injections_commute() {
    let model = Model::new(small()).unwrap();
    let toks = [0usize, 8, 9, 10, 16, 56];
    let a = InjectionSpec { layer: 1, token: 2, vector: vec![0.3; 16], alpha: 1.5 };
    let b = InjectionSpec { layer: 3, token: 4, vector: vec![-0.2; 16], alpha: 3.0 };
    let sites = [Site::new(3, 5), Site::new(2, 2)];
    let ab = model.forward(&toks, &sites, &[a.clone(), b.clone()]).unwrap();
    let ba = model.forward(&toks, &sites, &[b, a]).unwrap();
    assert_eq!(ab.logits, ba.logits);
    assert_eq!(ab.captured, ba.captured);
}

#[test]
fn untrained_generation_is_deterministic() {
    let model = Model::new(small()).unwrap();
    let v = model.config().vocab();
    let stem = [v.topic(0), v.filler(1), v.filler(1), v.filler(1), v.cue(2), v.terminator()];
    let a = model.generate(&stem, &[]).unwrap();
    let b = Model::new(small()).unwrap().generate(&stem, &[]).unwrap();
    assert_eq!(a, b);
    assert!(a.tokens.len() <= 12 - stem.len());
}

#[test]
fn one_item_loss_decreases() {
    let task = synth_task(&SynthConfig { n_items: 1, ..SynthConfig::default() }).unwrap();
    let tc = TrainConfig { epochs: 2, batch_size: 1, lr: 1e-2, warmup_steps: 1, ..TrainConfig::default() };
    let (_, report) = train(small(), &task.dataset, &tc).unwrap();
    assert!(report.step_losses[1] < report.step_losses[0]);
}

#[test]
fn training_is_bit_reproducible() {
    let task = synth_task(&SynthConfig { n_items: 40, ..SynthConfig::default() }).unwrap();
    let tc = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
    let (a, ra) = train(small(), &task.dataset, &tc).unwrap();
    let (b, rb) = train(small(), &task.dataset, &tc).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn empty_dataset_is_rejected() {
    let mut task = synth_task(&SynthConfig { n_items: 1, ..SynthConfig::default() }).unwrap();
    task.dataset = task.dataset.subset(&[]);
    assert!(train(small(), &task.dataset, &TrainConfig::default()).is_err());
}

#[test]
fn trained_model_follows_the_cue() {
    let task = synth_task(&SynthConfig {
        n_items: 1500,
        cue_strength: 1.0,
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap();
    let (model, _) = train(ToyLmConfig::default(), &task.dataset, &TrainConfig::default()).unwrap();
    let held = synth_task(&SynthConfig {
        n_items: 200,
        cue_strength: 1.0,
        seed: 22,
        ..SynthConfig::default()
    })
    .unwrap();
    let stems: Vec<&[usize]> = held.dataset.stems.iter().map(|s| s.as_slice()).collect();
    let vocab = model.config().vocab();
    let gens = model.generate_batch(&stems, &[]).unwrap();
    let hits = gens
        .iter()
        .zip(&held.dataset.labels)
        .filter(|(g, &y)| parse_emission(&vocab, &g.tokens).answer == Some(y))
        .count();
    let acc = hits as f64 / stems.len() as f64;
    assert!(acc >= 0.9, "held-out accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_masking(pos in 0usize..7, tok in 0usize..58, seed in 0u64..4) {
        let model = Model::new(ToyLmConfig { seed, ..small() }).unwrap();
        let base: Vec<usize> = vec![1, 9, 12, 15, 17, 56, 30, 33];
        let mut pert = base.clone();
        pert[pos] = tok;
        let a = model.forward(&base, &[], &[]).unwrap();
        let b = model.forward(&pert, &[], &[]).unwrap();
        for t in 0..pos {
            prop_assert_eq!(a.logits.row(t), b.logits.row(t));
        }
    }

    #[test]
    fn injection_locality(layer in 1usize..=3, token in 0usize..8, alpha in -20.0f64..20.0) {
        let model = Model::new(small()).unwrap();
        let toks: Vec<usize> = vec![2, 10, 11, 12, 19, 56, 40, 41];
        let vector: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let inj = [InjectionSpec { layer, token, vector, alpha }];
        let a = model.residual_streams(&[&toks], &[]).unwrap();
        let b = model.residual_streams(&[&toks], &inj).unwrap();
        for l in 0..=3 {
            for t in 0..8 {
                if l < layer || t < token {
                    prop_assert_eq!(a.vector(0, Site::new(l, t)), b.vector(0, Site::new(l, t)));
                }
            }
        }
        for t in 0..token {
            prop_assert_eq!(a.logits.row(t), b.logits.row(t));
        }
    }
}
