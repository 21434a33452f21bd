//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criteria 6 to 10 drive the `posbias` binary on the default configuration,
//! so this target takes several minutes on one core.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use posbias::corpus::PositionDistribution;
use posbias::metrics::special::chi_square_sf;
use posbias::metrics::{bsd, chi_square_uniform, fisher_one_sided, rstd, Alternative, Table2x2};
use posbias::probe::MlpWeights;
use posbias::toylm::{InjectionSpec, Model, Site, ToyLmConfig, VocabSpec};
use rand::Rng as _;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_posbias");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- metrics

fn metric_extremes() -> Outcome {
    let n = 1000;
    let peaked = PositionDistribution::new(vec![n, 0, 0, 0]);
    let uniform = PositionDistribution::new(vec![250; 4]);
    let b = bsd(&peaked).unwrap();
    let r = rstd(&peaked).unwrap();
    let ub = bsd(&uniform).unwrap();
    let ur = rstd(&uniform).unwrap();
    let up = chi_square_uniform(&uniform).unwrap().p_value;
    // 1.7320508 is sqrt(3) printed to seven decimals; the 1e-9 tolerance
    // applies to the exact value, which must also round to the printed one.
    let pass = (b - 1.5).abs() <= 1e-9
        && (r - 3f64.sqrt()).abs() <= 1e-9
        && (r - 1.7320508).abs() < 5e-8
        && ub.abs() <= 1e-9
        && ur.abs() <= 1e-9
        && up == 1.0;
    outcome(
        pass,
        format!("peaked BSD {b:.10} RStd {r:.10} (sqrt 3 = {:.10}); uniform BSD {ub:e} RStd {ur:e} p {up}", 3f64.sqrt()),
    )
}

/// Model, identifier-free %, labelled %, printed odds ratio, printed as significant.
const PUBLISHED_COMPARISONS: [(&str, f64, f64, f64, bool); 10] = [
    ("Mistral-7B-Instruct-v0.3", 41.2, 33.1, 1.416, true),
    ("Llama-3.1-8B-Instruct", 56.8, 47.9, 1.429, true),
    ("Llama-3.2-3B-Instruct", 57.9, 47.1, 1.542, true),
    ("Qwen3-4B-Instruct-2507", 40.8, 31.7, 1.485, true),
    ("Qwen3-30B-Instruct-2507", 42.3, 19.9, 2.956, true),
    ("Qwen3-30B-Thinking-2507", 42.2, 29.3, 1.761, true),
    ("DeepSeek-Reasoner", 55.2, 28.5, 3.091, true),
    ("DeepSeek-Chat", 22.9, 17.0, 1.448, true),
    ("Gemini-2.5-flash", 10.8, 11.2, 0.964, false),
    ("Gemini-3-pro", 23.9, 13.4, 2.030, true),
];

fn odds_ratio_table() -> Outcome {
    let mut bad = Vec::new();
    for (name, free, labelled, printed, significant) in PUBLISHED_COMPARISONS {
        let a = (free * 10.0).round() as u64;
        let c = (labelled * 10.0).round() as u64;
        let t = Table2x2::new([[a, 1000 - a], [c, 1000 - c]]);
        let r = fisher_one_sided(&t, Alternative::Greater).unwrap();
        let or_ok = (r.odds_ratio - printed).abs() <= 0.005;
        let p_ok = if significant { r.fisher_p_one_sided < 0.001 } else { r.fisher_p_one_sided > 0.05 };
        if !or_ok || !p_ok {
            bad.push(format!(
                "{name}: OR {:.4} (printed {printed}), p {:.3e}",
                r.odds_ratio, r.fisher_p_one_sided
            ));
        }
    }
    if bad.is_empty() {
        outcome(true, "10/10 rows match")
    } else {
        outcome(false, format!("{}/10 rows match; {}", 10 - bad.len(), bad.join("; ")))
    }
}

fn ln_gamma_half(df: u32) -> f64 {
    // Gamma(df / 2) for integer df, from the factorial and half-integer identities.
    if df.is_multiple_of(2) {
        (1..df / 2).map(|i| (i as f64).ln()).sum()
    } else {
        let n = df / 2;
        let ln_fact = |m: u32| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
        ln_fact(2 * n) + 0.5 * std::f64::consts::PI.ln() - n as f64 * 4f64.ln() - ln_fact(n)
    }
}

/// Upper tail of the chi-square density by composite Simpson integration
/// after substituting t = u^2, which removes the singularity at zero.
fn chi_square_tail_oracle(stat: f64, df: u32) -> f64 {
    let k = df as f64;
    let ln_c = std::f64::consts::LN_2 - 0.5 * k * std::f64::consts::LN_2 - ln_gamma_half(df);
    let f = |u: f64| {
        if u == 0.0 {
            if df == 1 { ln_c.exp() } else { 0.0 }
        } else {
            (ln_c + (k - 1.0) * u.ln() - 0.5 * u * u).exp()
        }
    };
    let lo = stat.sqrt();
    let hi = lo.max(k.sqrt()) + 40.0;
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let mut sum = f(lo) + f(hi);
    for i in 1..n {
        sum += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

fn chi_square_oracle() -> Outcome {
    let p = chi_square_sf(7.815, 3.0);
    let oracle = chi_square_tail_oracle(7.815, 3);
    let mut worst: f64 = ((p - oracle) / oracle).abs();
    let mut rng = posbias::rng::seeded(2024);
    for _ in 0..20 {
        let df: u32 = rng.random_range(1..=30);
        let stat: f64 = rng.random_range(0.05..60.0);
        let got = chi_square_sf(stat, df as f64);
        let want = chi_square_tail_oracle(stat, df);
        worst = worst.max(((got - want) / want).abs());
    }
    let pass = (p - 0.050).abs() <= 0.0005 && (oracle - 0.050).abs() <= 0.0005 && worst <= 1e-6;
    outcome(pass, format!("p(7.815, 3) = {p:.6} (oracle {oracle:.6}); worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------- gradients

fn fraction_within(analytic: &[f64], numeric: &[f64]) -> f64 {
    let good = analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| {
            let denom = a.abs().max(n.abs());
            denom < 1e-7 || (*a - *n).abs() / denom < 1e-4
        })
        .count();
    good as f64 / analytic.len() as f64
}

fn micro_lm() -> ToyLmConfig {
    ToyLmConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_seq: 12,
        seed: 1,
        vocab: VocabSpec { n_topics: 2, n_fillers: 2 },
    }
}

fn lm_gradient_fraction() -> f64 {
    let mut model = Model::new(micro_lm()).unwrap();
    let seqs: Vec<Vec<usize>> = vec![vec![0, 2, 3, 5, 7, 13, 9, 21], vec![1, 3, 2, 4, 13, 10, 11, 20]];
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let (_, grads) = model.loss_and_grad(&refs).unwrap();
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(analytic.len());
    for ti in 0..model.params().tensors().len() {
        for j in 0..model.params().tensors()[ti].len() {
            let orig = model.params().tensors()[ti][j];
            model.params_mut().tensors_mut()[ti][j] = orig + h;
            let up = model.loss(&refs).unwrap();
            model.params_mut().tensors_mut()[ti][j] = orig - h;
            let down = model.loss(&refs).unwrap();
            model.params_mut().tensors_mut()[ti][j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    fraction_within(&analytic, &numeric)
}

fn mlp_gradient_fraction() -> f64 {
    let (n, d, hidden, k) = (12, 5, 6, 4);
    let mut rng = posbias::rng::seeded(9);
    let mut uniform = || rng.random_range(-1.0..1.0);
    let xs = ndarray::Array2::from_shape_fn((n, d), |_| uniform());
    let mut w = MlpWeights {
        w1: ndarray::Array2::from_shape_fn((d, hidden), |_| 0.5 * uniform()),
        b1: ndarray::Array1::from_shape_fn(hidden, |_| 0.1 * uniform()),
        w2: ndarray::Array2::from_shape_fn((hidden, k), |_| 0.5 * uniform()),
        b2: ndarray::Array1::from_shape_fn(k, |_| 0.1 * uniform()),
    };
    let y: Vec<usize> = (0..n).map(|i| i % k).collect();
    let (_, g) = w.loss_and_grad(&xs, &y);
    let analytic: Vec<f64> = g.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(analytic.len());
    for ti in 0..4 {
        for j in 0..w.tensors()[ti].len() {
            let orig = w.tensors()[ti][j];
            w.tensors_mut()[ti][j] = orig + h;
            let up = w.loss_and_grad(&xs, &y).0;
            w.tensors_mut()[ti][j] = orig - h;
            let down = w.loss_and_grad(&xs, &y).0;
            w.tensors_mut()[ti][j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    fraction_within(&analytic, &numeric)
}

fn gradient_checks() -> Outcome {
    let lm = lm_gradient_fraction();
    let mlp = mlp_gradient_fraction();
    outcome(
        lm >= 0.95 && mlp >= 0.95,
        format!("toy LM {:.1}% and MLP {:.1}% of parameters within 1e-4", lm * 100.0, mlp * 100.0),
    )
}

// ----------------------------------------------------------- injection

fn injection_locality() -> Outcome {
    let cfg = ToyLmConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq: 12,
        seed: 4,
        vocab: VocabSpec::default(),
    };
    let model = Model::new(cfg).unwrap();
    let vocab = cfg.vocab();
    let stem: Vec<usize> = vec![2, 10, 11, 12, 19, vocab.terminator()];
    let base = model.residual_streams(&[&stem], &[]).unwrap();
    let mut rng = posbias::rng::seeded(17);
    let mut leaks = 0;
    for _ in 0..50 {
        let layer = rng.random_range(1..=cfg.n_layers);
        let token = rng.random_range(0..stem.len());
        let vector: Vec<f64> = (0..cfg.d_model).map(|_| rng.random_range(-3.0..3.0)).collect();
        let inj = [InjectionSpec { layer, token, vector, alpha: rng.random_range(-20.0..20.0) }];
        let out = model.residual_streams(&[&stem], &inj).unwrap();
        for l in 0..=cfg.n_layers {
            for t in 0..stem.len() {
                if (l < layer || t < token) && out.vector(0, Site::new(l, t)) != base.vector(0, Site::new(l, t)) {
                    leaks += 1;
                }
            }
        }
    }

    let baseline = model.generate(&stem, &[]).unwrap();
    let mut identity_failures = 0;
    for layer in 1..=cfg.n_layers {
        for token in 0..stem.len() {
            let v: Vec<f64> = (0..cfg.d_model).map(|i| i as f64 - 7.5).collect();
            let zero_alpha = InjectionSpec { layer, token, vector: v, alpha: 0.0 };
            let zero_vec = InjectionSpec { layer, token, vector: vec![0.0; cfg.d_model], alpha: 50.0 };
            for inj in [zero_alpha, zero_vec] {
                if model.generate(&stem, &[inj]).unwrap() != baseline {
                    identity_failures += 1;
                }
            }
        }
    }
    outcome(
        leaks == 0 && identity_failures == 0,
        format!("{leaks} upstream activations changed over 50 sites; {identity_failures} identity injections changed the emission"),
    )
}

// ------------------------------------------------------------ pipeline

fn posbias(out: &Path, config: Option<&Path>, args: &[&str]) -> Result<(), String> {
    let mut cmd = Command::new(BIN);
    cmd.arg("--out-dir").arg(out).env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    let o = cmd.args(args).output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("posbias {} failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr)))
    }
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn probe_recoverability(run: &Path, cue0: &Path) -> Outcome {
    let s = read_json(run.join("probe/summary.json"));
    let peak = &s["peak"];
    let (best, maj, rnd) = (f(&peak["value"]), f(&s["baselines"]["majority_f1"]), f(&s["baselines"]["random_f1"]));
    let gap = best - maj.max(rnd);

    // No single peak here: the maximum over many noisy cells is biased
    // upward, so the null case is judged on the mean over the grid.
    let z = read_json(cue0.join("probe/summary.json"));
    let (z_avg, z_rnd, z_peak) = (f(&z["average"]), f(&z["baselines"]["random_f1"]), f(&z["peak"]["value"]));
    let null_gap = (z_avg - z_rnd).abs();
    outcome(
        gap >= 0.3 && null_gap <= 0.05,
        format!(
            "cue 0.8: best F1 {best:.3} at layer {} token {} vs majority {maj:.3} random {rnd:.3} (gap {gap:.3}); \
             cue 0: mean F1 {z_avg:.3} vs random {z_rnd:.3} (|gap| {null_gap:.3}, peak {z_peak:.3})",
            peak["layer"], peak["token"]
        ),
    )
}

fn probe_trends(run: &Path) -> Outcome {
    let s = read_json(run.join("probe/summary.json"));
    let means: BTreeMap<u64, f64> = s["token_means"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| (m["token"].as_u64().unwrap(), f(&m["mean_f1"])))
        .collect();
    let (&last, &final_mean) = means.iter().next_back().unwrap();
    let earlier_max = means.range(..last).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    let cap: BTreeMap<u64, f64> = s["capacity"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["hidden"].as_u64().unwrap(), f(&c["mean_f1"])))
        .collect();
    let gain = match (cap.get(&256), cap.get(&512)) {
        (Some(a), Some(b)) => b - a,
        _ => f64::NAN,
    };
    outcome(
        final_mean >= earlier_max && gain <= 0.02,
        format!(
            "final token {last} mean F1 {final_mean:.3} vs best earlier {earlier_max:.3}; \
             F1 gain 256 -> 512 hidden {gain:+.4} (capacity {cap:?})"
        ),
    )
}

fn steering_ordering(run: &Path) -> Outcome {
    let s = read_json(run.join("intervene/summary.json"));
    let n_eval = s["n_eval"].as_u64().unwrap_or(0);
    let ratio = &s["steering_ratio"];
    let (md, rnd) = (f(&ratio["mean_diff"]), f(&ratio["random"]));
    let ratio_ok = md >= 2.0 * rnd;

    let best_md = s["best"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|b| b["method"] == "mean_diff")
        .max_by(|a, b| f(&a["target_rate"]).total_cmp(&f(&b["target_rate"])))
        .cloned()
        .unwrap_or(Value::Null);
    let curve = s["alpha_curves"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["method"] == "mean_diff" && c["offset"] == best_md["offset"] && c["layer"] == best_md["layer"])
        .cloned()
        .unwrap_or(Value::Null);
    let rates: Vec<f64> = curve["target_rate"].as_array().map(|a| a.iter().map(f).collect()).unwrap_or_default();
    let lower = &rates[..rates.len().div_ceil(2)];
    let monotone = !lower.is_empty() && lower.windows(2).all(|w| w[1] >= w[0]);

    let pareto = read_json(run.join("intervene/pareto.json"));
    let hit = pareto["frontiers"].as_array().unwrap().iter().find_map(|fr| {
        fr["points"].as_array().unwrap().iter().find(|p| {
            f(&p["target_rate"]) >= 0.15 && f(&p["mean_off_target"]) <= 0.08
        })
    });

    // Reported only: the strongest single random draw, before seed averaging.
    let grid = fs::read_to_string(run.join("intervene/grid.csv")).unwrap();
    let mut rows = grid.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (m_col, t_col) = (col("method"), col("target_rate"));
    let single_random = rows
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|c| c[m_col] == "random")
        .filter_map(|c| c[t_col].parse::<f64>().ok())
        .fold(0.0, f64::max);

    let pass = n_eval == 200 && ratio_ok && monotone && hit.is_some();
    let hit_desc = hit.map_or("none".to_string(), |p| {
        format!(
            "{} {} layer {} target {:.3} off-target {:.3}",
            p["method"], p["offset"], p["layer"], f(&p["target_rate"]), f(&p["mean_off_target"])
        )
    });
    outcome(
        pass,
        format!(
            "n_eval {n_eval}; best mean-diff {md:.3} vs best seed-averaged random {rnd:.3} (ratio {:.2}, need 2; \
             best single random draw {single_random:.3}); \
             lower-half alpha curve at layer {} {} {lower:.3?} monotone={monotone}; Pareto point: {hit_desc}",
            md / rnd,
            best_md["layer"],
            best_md["offset"],
        ),
    )
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

const SMALL: &str = r#"
seed = 5

[model]
n_layers = 2
d_model = 32
n_heads = 4
d_ff = 64

[synth.train]
n_items = 1500
cue_strength = 1.0

[synth.probe]
n_items = 400

[synth.steer]
n_items = 600

[synth.eval]
n_items = 300

[train]
epochs = 10

[probe]
layers = [1, 2]
tokens = [4, 5]
seeds = [0, 1]
capacity_sizes = [16, 32]
epochs = 40

[steer]
layers = [1, 2]
random_seeds = [0]

[intervene]
n_eval = 40
alpha_points = 5
"#;

fn determinism(tmp: &Path) -> Outcome {
    let cfg = tmp.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (tmp.join("det-a"), tmp.join("det-b"));
    for dir in [&a, &b] {
        if let Err(e) = posbias(dir, Some(&cfg), &["--svg", "run"]) {
            return outcome(false, e);
        }
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    if fa != fb {
        return outcome(false, format!("file lists differ: {fa:?} vs {fb:?}"));
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|p| fs::read(a.join(p)).unwrap() != fs::read(b.join(p)).unwrap())
        .map(|p| p.display().to_string())
        .collect();
    outcome(
        differing.is_empty(),
        format!("{} files compared, differing: {differing:?}", fa.len()),
    )
}

fn accounting_closure(run: &Path) -> Outcome {
    let s = read_json(run.join("intervene/summary.json"));
    let grid = fs::read_to_string(run.join("intervene/grid.csv")).unwrap();
    let mut lines = grid.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let count_cols: Vec<usize> = (1..=4).map(|p| col(&format!("count_{p}"))).collect();
    let (n_col, inv_col, err_col) = (col("n"), col("invalid"), col("error"));
    let (mut checked, mut violations, mut failed) = (0, 0, 0);
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if !cells[err_col].is_empty() {
            failed += 1;
            continue;
        }
        let n: usize = cells[n_col].parse().unwrap();
        let counted: usize = count_cols.iter().map(|&c| cells[c].parse::<usize>().unwrap()).sum();
        let invalid: usize = cells[inv_col].parse().unwrap();
        checked += 1;
        if counted + invalid != n {
            violations += 1;
        }
    }
    let reported = s["accounting_violations"].as_u64().unwrap_or(u64::MAX);
    outcome(
        checked > 0 && violations == 0 && reported == 0,
        format!("{checked} results checked, {violations} violations, {failed} failed cells; summary reports {reported}"),
    )
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("default");
    let cue0 = tmp.path().join("cue0");
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut record = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "{} [{id:>2}] {name} ({secs:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o, secs));
    };

    record(1, "metric extremes", &mut metric_extremes);
    record(2, "odds ratios from printed percentages", &mut odds_ratio_table);
    record(3, "chi-square p-value oracle", &mut chi_square_oracle);
    record(4, "gradient checks", &mut gradient_checks);
    record(5, "injection locality", &mut injection_locality);

    let t = Instant::now();
    let pipeline = posbias(&run, None, &["run"]).and_then(|()| {
        // Same model, probe items with no cue at all.
        let cfg = tmp.path().join("cue0.toml");
        fs::write(&cfg, "[synth.probe]\ncue_strength = 0.0\n\n[probe]\ncapacity_sizes = []\n").unwrap();
        copy_dir(&run.join("model"), &cue0.join("model"));
        for stage in ["synth", "capture", "probe"] {
            posbias(&cue0, Some(&cfg), &[stage])?;
        }
        Ok(())
    });
    println!("default pipeline and null-cue probe: {:.1}s", t.elapsed().as_secs_f64());
    match pipeline {
        Ok(()) => {
            record(6, "probe recoverability", &mut || probe_recoverability(&run, &cue0));
            record(7, "token-position and capacity trends", &mut || probe_trends(&run));
            record(8, "steering efficacy ordering", &mut || steering_ordering(&run));
        }
        Err(e) => {
            for (id, name) in [(6, "probe recoverability"), (7, "token-position and capacity trends"), (8, "steering efficacy ordering")] {
                record(id, name, &mut || outcome(false, e.clone()));
            }
        }
    }
    record(9, "determinism", &mut || determinism(tmp.path()));
    if run.join("intervene/grid.csv").exists() {
        record(10, "accounting closure", &mut || accounting_closure(&run));
    } else {
        record(10, "accounting closure", &mut || outcome(false, "default pipeline did not produce a grid"));
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "\n{} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
