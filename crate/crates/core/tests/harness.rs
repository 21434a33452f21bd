use std::sync::OnceLock;

use posbias::harness::{
    default_alphas, extract_cases, pareto, run_intervention, sweep, EvalSet, GridAxes,
    HarnessError, InterventionResult, ParetoPoint, SweepCell, SweepGrid, Taxonomy, TokenOffset,
};
use posbias::probe::{ActivationDataset, CapturePoint};
use posbias::steer::{build_vector, mean_diff_at, Method, SteeringVector};
use posbias::toylm::{synth_task, train, Model, Site, SynthConfig, ToyLmConfig, TrainConfig};
use proptest::prelude::*;

struct Fixture {
    model: Model,
    eval: EvalSet,
    data: ActivationDataset,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = ToyLmConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            seed: 3,
            ..ToyLmConfig::default()
        };
        let task = synth_task(&SynthConfig {
            n_items: 1500,
            cue_strength: 1.0,
            seed: 11,
            ..SynthConfig::default()
        })
        .unwrap();
        let tc = TrainConfig { epochs: 10, ..TrainConfig::default() };
        let (model, _) = train(cfg, &task.dataset, &tc).unwrap();
        let pool = synth_task(&SynthConfig {
            n_items: 300,
            cue_strength: 1.0,
            seed: 12,
            ..SynthConfig::default()
        })
        .unwrap();
        let answers = posbias::harness::baseline_answers(&model, &pool.dataset.stems).unwrap();
        let keep: Vec<usize> = (0..answers.len()).filter(|&i| answers[i].is_some()).collect();
        let stems: Vec<Vec<usize>> = keep.iter().map(|&i| pool.dataset.stems[i].clone()).collect();
        let labels: Vec<usize> = keep.iter().map(|&i| answers[i].unwrap()).collect();
        let sites: Vec<Site> = (1..=2).flat_map(|l| [4, 5].map(|t| Site::new(l, t))).collect();
        let data =
            ActivationDataset::capture(&model, &stems, &labels, &sites, CapturePoint::PreNorm).unwrap();
        let eval = EvalSet::select(&model, &pool.dataset.stems, 1, 40).unwrap();
        Fixture { model, eval, data }
    })
}

fn vector(method: Method, site: Site, seed: u64) -> SteeringVector {
    build_vector(&fixture().data, method, site, (1, 2), seed, 1.0).unwrap()
}

#[test]
fn eval_set_holds_only_source_items() {
    let f = fixture();
    assert!(f.eval.len() >= 5, "only {} source items", f.eval.len());
    let answers = posbias::harness::baseline_answers(&f.model, &f.eval.stems).unwrap();
    assert!(answers.iter().all(|&a| a == Some(1)));
}

#[test]
fn baseline_violations_are_reported_per_item() {
    let f = fixture();
    let pool = synth_task(&SynthConfig { n_items: 40, cue_strength: 1.0, seed: 13, ..SynthConfig::default() })
        .unwrap();
    let items: Vec<usize> = (0..40).collect();
    match EvalSet::new(&f.model, pool.dataset.stems.clone(), items, 1) {
        Err(HarnessError::BaselineMismatch { src, items }) => {
            assert_eq!(src, 1);
            assert!(!items.is_empty());
            assert!(items.iter().all(|(_, a)| *a != Some(1)));
        }
        other => panic!("expected a baseline mismatch, got {other:?}"),
    }
}

#[test]
fn zero_alpha_and_zero_vector_reproduce_baseline() {
    let f = fixture();
    for method in [Method::MeanDiff, Method::Classifier, Method::Random] {
        for layer in 1..=2 {
            for offset in [TokenOffset::Final, TokenOffset::Penultimate] {
                let sv = vector(method, f.eval.site(layer, offset), 0);
                let r = run_intervention(&f.model, &f.eval, &sv, 0.0).unwrap();
                assert_eq!(r.generations, f.eval.baseline);
                assert_eq!(r.rates.target_rate, 0.0);
                assert_eq!(r.rates.retention_rate, 1.0);
                assert_eq!(r.rates.mean_off_target, 0.0);
            }
        }
    }
    let mut zero = vector(Method::MeanDiff, f.eval.site(1, TokenOffset::Final), 0);
    zero.vector.iter_mut().for_each(|v| *v = 0.0);
    let r = run_intervention(&f.model, &f.eval, &zero, 50.0).unwrap();
    assert_eq!(r.generations, f.eval.baseline);
}

#[test]
fn doubled_vector_with_halved_alpha_is_identical() {
    let f = fixture();
    let sv = vector(Method::MeanDiff, f.eval.site(2, TokenOffset::Final), 0);
    let mut doubled = sv.clone();
    doubled.vector.iter_mut().for_each(|v| *v *= 2.0);
    for alpha in [0.3, 1.0, 3.0] {
        let a = run_intervention(&f.model, &f.eval, &sv, alpha).unwrap();
        let b = run_intervention(&f.model, &f.eval, &doubled, alpha / 2.0).unwrap();
        assert_eq!(a.generations, b.generations);
        assert_eq!(a.outcome_counts, b.outcome_counts);
        assert_eq!(a.norm_ratio, b.norm_ratio);
    }
}

#[test]
fn wrong_source_vector_is_rejected() {
    let f = fixture();
    let site = f.eval.site(1, TokenOffset::Final);
    let sv = mean_diff_at(&f.data, site, 3, 2).unwrap();
    assert!(matches!(
        run_intervention(&f.model, &f.eval, &sv, 1.0),
        Err(HarnessError::WrongSource { .. })
    ));
}

fn small_axes(alphas: Vec<f64>) -> GridAxes {
    GridAxes {
        methods: vec![Method::MeanDiff, Method::Random],
        layers: vec![1, 2],
        offsets: vec![TokenOffset::Final, TokenOffset::Penultimate],
        alphas,
        random_seeds: vec![0, 1, 2],
    }
}

#[test]
fn sweep_is_full_factorial_and_accounts_for_every_item() {
    let f = fixture();
    let (alphas, _) = default_alphas(32, 4);
    let axes = small_axes(alphas);
    let g = sweep(&f.model, &f.eval, 2, &axes, |m, s, seed| {
        build_vector(&f.data, m, s, (1, 2), seed, 1.0)
    })
    .unwrap();
    assert_eq!(g.cells.len(), (1 + 3) * 2 * 2 * 4);
    assert_eq!(g.failures().count(), 0);
    for c in &g.cells {
        let r = c.result.as_ref().unwrap();
        assert_eq!(r.accounted(), r.n_eval);
        for rate in [r.rates.target_rate, r.rates.retention_rate, r.rates.mean_off_target] {
            assert!((0.0..=1.0).contains(&rate));
        }
    }
    let csv = g.to_csv();
    assert_eq!(csv.lines().count(), g.cells.len() + 1);
    let again = sweep(&f.model, &f.eval, 2, &axes, |m, s, seed| {
        build_vector(&f.data, m, s, (1, 2), seed, 1.0)
    })
    .unwrap();
    assert_eq!(again.to_csv(), csv);
}

#[test]
fn one_cell_grid_matches_run_intervention() {
    let f = fixture();
    let axes = GridAxes {
        methods: vec![Method::MeanDiff],
        layers: vec![2],
        offsets: vec![TokenOffset::Final],
        alphas: vec![1.5],
        random_seeds: vec![],
    };
    let g = sweep(&f.model, &f.eval, 2, &axes, |m, s, seed| {
        build_vector(&f.data, m, s, (1, 2), seed, 1.0)
    })
    .unwrap();
    assert_eq!(g.cells.len(), 1);
    let sv = vector(Method::MeanDiff, f.eval.site(2, TokenOffset::Final), 0);
    let direct = run_intervention(&f.model, &f.eval, &sv, 1.5).unwrap();
    assert_eq!(g.cells[0].result.as_ref().unwrap(), &direct);
}

#[test]
fn failing_cells_are_recorded_and_the_sweep_continues() {
    let f = fixture();
    let axes = small_axes(vec![1.0]);
    let g = sweep(&f.model, &f.eval, 2, &axes, |m, s, seed| {
        if s.layer == 2 {
            build_vector(&f.data, m, Site::new(7, 0), (1, 2), seed, 1.0)
        } else {
            build_vector(&f.data, m, s, (1, 2), seed, 1.0)
        }
    })
    .unwrap();
    assert_eq!(g.failures().count(), g.cells.len() / 2);
    assert!(g.cells.iter().filter(|c| c.layer == 1).all(|c| c.result.is_ok()));
}

#[test]
fn unsorted_or_non_finite_alpha_grids_are_rejected() {
    let f = fixture();
    for alphas in [vec![2.0, 1.0], vec![1.0, f64::NAN], vec![]] {
        let r = sweep(&f.model, &f.eval, 2, &small_axes(alphas), |m, s, seed| {
            build_vector(&f.data, m, s, (1, 2), seed, 1.0)
        });
        assert!(matches!(r, Err(HarnessError::BadAlphaGrid)));
    }
}

#[test]
fn extracted_cases_flag_changes_mechanically() {
    let f = fixture();
    let sv = vector(Method::MeanDiff, f.eval.site(2, TokenOffset::Final), 0);
    let vocab = f.model.config().vocab();
    let none = run_intervention(&f.model, &f.eval, &sv, 0.0).unwrap();
    let cases = extract_cases(&vocab, &f.eval, &none, &Taxonomy::default());
    assert_eq!(cases.len(), f.eval.len());
    assert!(cases.iter().all(|c| c.label == "unchanged"));

    let strong = run_intervention(&f.model, &f.eval, &sv, 50.0).unwrap();
    let cases = extract_cases(&vocab, &f.eval, &strong, &Taxonomy::default());
    for (c, r) in cases.iter().zip(&strong.generations) {
        assert!(!c.flags.stem_changed);
        assert_eq!(c.flags.position_changed, c.after.answer.is_some_and(|a| a != 1));
        assert_eq!(c.after.answer.is_none(), c.flags.invalid_output);
        assert!(!r.tokens.is_empty());
    }
}

fn planted(alphas: &[f64], rates: impl Fn(usize, usize) -> usize) -> SweepGrid {
    let mut cells = Vec::new();
    for layer in 1..=3 {
        for (i, &alpha) in alphas.iter().enumerate() {
            let moved = rates(layer, i);
            let mut answers = vec![Some(1); 100 - moved];
            answers.extend(vec![Some(2); moved]);
            let r = InterventionResult::from_answers(
                Method::MeanDiff,
                Site::new(layer, 5),
                alpha,
                (1, 2),
                &answers,
            )
            .unwrap();
            cells.push(SweepCell {
                method: Method::MeanDiff,
                seed: None,
                layer,
                offset: TokenOffset::Final,
                alpha,
                result: Ok(r),
            });
        }
    }
    SweepGrid {
        src: 1,
        tgt: 2,
        n_eval: 100,
        stem_len: 6,
        axes: GridAxes {
            methods: vec![Method::MeanDiff],
            layers: vec![1, 2, 3],
            offsets: vec![TokenOffset::Final],
            alphas: alphas.to_vec(),
            random_seeds: vec![],
        },
        cells,
    }
}

#[test]
fn monotone_planted_grid_picks_the_largest_alpha() {
    let alphas = [1.0, 2.0, 4.0, 8.0];
    let g = planted(&alphas, |layer, i| layer * 5 + i * 10);
    let best = g.best_per_layer(Method::MeanDiff, TokenOffset::Final);
    assert_eq!(best.len(), 3);
    for (p, layer) in best.iter().zip(1..) {
        assert_eq!(p.site, Site::new(layer, 5));
        assert_eq!(p.alpha, 8.0);
    }
    let flat = planted(&alphas, |_, _| 7);
    assert!(flat
        .best_per_layer(Method::MeanDiff, TokenOffset::Final)
        .iter()
        .all(|p| p.alpha == 1.0));
}

fn point_strategy() -> impl Strategy<Value = ParetoPoint> {
    (1usize..28, 0usize..2, 0u32..20, 0u32..20, 0u32..9).prop_map(|(l, t, a, b, k)| ParetoPoint {
        site: Site::new(l, t),
        alpha: f64::from(k),
        target_rate: f64::from(a) / 20.0,
        mean_off_target: f64::from(b) / 20.0,
        dominated: false,
    })
}

proptest! {
    #[test]
    fn pareto_agrees_with_brute_force(points in prop::collection::vec(point_strategy(), 1..30)) {
        let out = pareto(&points);
        prop_assert_eq!(out.len(), points.len());
        for p in &out {
            let beaten = points.iter().any(|q| {
                q.target_rate >= p.target_rate
                    && q.mean_off_target <= p.mean_off_target
                    && (q.target_rate > p.target_rate || q.mean_off_target < p.mean_off_target)
            });
            prop_assert_eq!(p.dominated, beaten);
        }
        let front: Vec<&ParetoPoint> = out.iter().filter(|p| !p.dominated).collect();
        prop_assert!(!front.is_empty());
        for a in &front {
            for b in &front {
                prop_assert!(!(a.target_rate >= b.target_rate
                    && a.mean_off_target <= b.mean_off_target
                    && (a.target_rate > b.target_rate || a.mean_off_target < b.mean_off_target)));
            }
        }
        prop_assert!(out.windows(2).all(|w| w[0].site <= w[1].site));
    }

    #[test]
    fn pareto_ignores_input_order(
        points in prop::collection::vec(point_strategy(), 1..30),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut shuffled = points.clone();
        shuffled.shuffle(&mut posbias::rng::seeded(seed));
        prop_assert_eq!(pareto(&points), pareto(&shuffled));
    }
}
