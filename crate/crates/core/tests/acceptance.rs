//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines reach stdout.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rayon::prelude::*;
use rfsearch::arfam::{count_search_space, mean_skip_count, Arfam, ArfamConfig, Genotype, SpatialMode};
use rfsearch::autodiff::Tape;
use rfsearch::candidates::{NoiseConfig, OpKind};
use rfsearch::config::RunConfig;
use rfsearch::model::Model;
use rfsearch::rf::{erf_averaged, is_box_only, probed_support, theoretical_rf, verify_rf, ErfTarget, RfKind, DEFAULT_ERF_SAMPLES};
use rfsearch::rng::RngStream;
use rfsearch::search::{run_search, SearchConfig};
use rfsearch::selfcheck::{run_selfcheck, DEFAULT_INSTANCES, GRAD_TOLERANCE};
use rfsearch::train::{train_model, TrainConfig};
use rfsearch::Tensor;

const SELFCHECK_BUDGET_S: f64 = 120.0;
const VERIFY_BUDGET_S: f64 = 300.0;
const VERIFY_GENOTYPES: usize = 20;
const VERIFY_TRIALS: usize = 2;
const REACH_GENOTYPES: usize = 40;
const COLLAPSE_SEEDS: u64 = 8;
const COLLAPSE_SIGMA: f64 = 2.0;
const COLLAPSE_MIN_AGREEING: usize = 6;
const COLLAPSE_BUDGET_S: f64 = 3600.0;
const END_TO_END_SEEDS: u64 = 3;
const END_TO_END_MARGIN: f64 = 0.01;
const END_TO_END_BUDGET_S: f64 = 1800.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let r = run_selfcheck(DEFAULT_INSTANCES, 0, 0).expect("selfcheck runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = r.primitives.iter().chain([&r.alpha]).map(|g| g.max_error).fold(0.0, f64::max);
    let grads_ok = r.primitives.iter().all(|g| g.passed()) && r.alpha.passed();
    outcome(
        grads_ok && secs < SELFCHECK_BUDGET_S,
        format!(
            "{} primitives + relaxed N=3 alpha, {} instances, worst rel err {worst:.2e} (< {GRAD_TOLERANCE:e}), {secs:.1}s",
            r.primitives.len(),
            DEFAULT_INSTANCES
        ),
    )
}

fn search_space() -> Outcome {
    let n = count_search_space(9, 4);
    outcome(n == 531441u32.into(), format!("count_search_space(9, 4) = {n}"))
}

fn rf_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = RngStream::new(0, "acceptance/verify");
    let (mut contain, mut equal, mut box_only) = (0, 0, 0);
    for i in 0..VERIFY_GENOTYPES {
        let g = Genotype::random(4, &OpKind::ALL, &mut rng).unwrap();
        let r = verify_rf(&g, (32, 32), VERIFY_TRIALS, i as u64).unwrap();
        contain += r.containment.len();
        if is_box_only(&g) {
            box_only += 1;
            equal += r.equality.len();
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        contain == 0 && equal == 0 && secs < VERIFY_BUDGET_S,
        format!(
            "{VERIFY_GENOTYPES} genotypes ({box_only} box-only): {contain} containment, {equal} equality violations, {secs:.1}s"
        ),
    )
}

fn sequential_growth() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for n in 2..=5 {
        let g = Genotype::chain(n, OpKind::MaxPool3).unwrap();
        let want = 2 * (n - 1) + 1;
        let theory = theoretical_rf(&g, (32, 32)).unwrap().output.extent();
        let mut rng = RngStream::new(n as u64, "acceptance/growth");
        let x = rfsearch::selfcheck::tie_free([1, 1, 32, 32], &mut rng);
        let erf = probed_support(&g, &x, (16, 16)).unwrap().extent();
        ok &= theory == Some((want, want)) && erf == (want, want);
        parts.push(format!("N={n}: {}x{} / {}x{}", theory.map_or(0, |e| e.0), theory.map_or(0, |e| e.1), erf.0, erf.1));
    }
    outcome(ok, format!("theory/empirical extents {}", parts.join(", ")))
}

/// True when a strip edge lies on a path from the input to the output
/// through non-zero edges.
fn strip_on_output_path(g: &Genotype) -> bool {
    let n = g.n_nodes;
    let mut from_input = vec![false; n];
    from_input[0] = true;
    for to in 1..n {
        from_input[to] = (0..to).any(|f| from_input[f] && g.op(f, to) != OpKind::Zero);
    }
    (0..n).flat_map(|t| (0..t).map(move |f| (f, t))).any(|(f, t)| g.op(f, t) == OpKind::StripPool && from_input[f])
}

fn strip_reach() -> Outcome {
    let mut rng = RngStream::new(0, "acceptance/strip");
    let mut genotypes = vec![Genotype::strip_like()];
    while genotypes.len() < REACH_GENOTYPES {
        let g = Genotype::random(4, &OpKind::ALL, &mut rng).unwrap();
        if strip_on_output_path(&g) {
            genotypes.push(g);
        }
    }
    let misses: usize = genotypes
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let m = erf_averaged(ErfTarget::Spatial(g), (16, 16), (0, 8, 8), DEFAULT_ERF_SAMPLES, i as u64).unwrap();
            let (rows, cols) = m.touched();
            rows.iter().chain(&cols).filter(|&&t| !t).count()
        })
        .sum();
    outcome(
        misses == 0,
        format!("{} strip genotypes, {misses} untouched rows/cols over {DEFAULT_ERF_SAMPLES}-input ERFs", genotypes.len()),
    )
}

fn collapse_and_noise(cfg: &RunConfig) -> Outcome {
    let t = Instant::now();
    let (train, _) = cfg.dataset.load().unwrap();
    let model = Model::new(cfg.backbone(), Some(cfg.arfam.clone())).unwrap();
    let runs: Vec<(f64, u64)> =
        [0.0, COLLAPSE_SIGMA].iter().flat_map(|&s| (0..COLLAPSE_SEEDS).map(move |seed| (s, seed))).collect();
    let curves: Vec<Option<Vec<usize>>> = runs
        .par_iter()
        .map(|&(sigma, seed)| {
            let sc = SearchConfig { noise: NoiseConfig::new(0.0, sigma), seed, ..cfg.search.clone() };
            run_search(&model, &train, &sc).ok().map(|(_, r)| r.skip_counts())
        })
        .collect();
    let secs = t.elapsed().as_secs_f64();
    if curves.iter().any(Option::is_none) {
        return outcome(false, "a search aborted");
    }
    let curves: Vec<Vec<usize>> = curves.into_iter().flatten().collect();
    let (plain, noisy) = curves.split_at(COLLAPSE_SEEDS as usize);
    let epochs = plain[0].len();
    let q = (epochs / 4).max(1);
    let window_mean = |runs: &[Vec<usize>], r: std::ops::Range<usize>| {
        let all: Vec<usize> = runs.iter().flat_map(|c| c[r.clone()].to_vec()).collect();
        mean_skip_count(&all)
    };
    let first = window_mean(plain, 0..q);
    let last = window_mean(plain, epochs - q..epochs);
    let terminal = |runs: &[Vec<usize>]| runs.iter().map(|c| *c.last().unwrap()).collect::<Vec<_>>();
    let (tp, tn) = (terminal(plain), terminal(noisy));
    let agreeing = tp.iter().zip(&tn).filter(|(a, b)| a > b).count();
    let (mp, mn) = (mean_skip_count(&tp), mean_skip_count(&tn));
    let a = last >= first;
    let b = mn < mp && agreeing >= COLLAPSE_MIN_AGREEING;
    outcome(
        a && b && secs < COLLAPSE_BUDGET_S,
        format!(
            "(a) sigma=0 skip first quarter {first:.3} -> last quarter {last:.3} [{}]; (b) terminal sigma=0 {mp:.3} vs sigma={COLLAPSE_SIGMA} {mn:.3}, {agreeing}/{COLLAPSE_SEEDS} seeds agree [{}]; {secs:.0}s",
            if a { "ok" } else { "fail" },
            if b { "ok" } else { "fail" }
        ),
    )
}

fn end_to_end(cfg: &RunConfig) -> Outcome {
    let t = Instant::now();
    let (train, test) = cfg.dataset.load().unwrap();
    let model = Model::new(cfg.backbone(), Some(cfg.arfam.clone())).unwrap();
    let baseline = Model::baseline(cfg.backbone()).unwrap();
    let mut gains = Vec::new();
    let mut parts = Vec::new();
    for seed in 0..END_TO_END_SEEDS {
        let sc = SearchConfig { seed, ..cfg.search.clone() };
        let tc = TrainConfig { seed, ..cfg.train.clone() };
        let Ok((g, _)) = run_search(&model, &train, &sc) else {
            return outcome(false, format!("search aborted for seed {seed}"));
        };
        let with = train_model(&model, model.init_params(seed), Some(&g), &train, &test, &tc).unwrap();
        let without = train_model(&baseline, baseline.init_params(seed), None, &train, &test, &tc).unwrap();
        let (a, b) = (with.final_accuracy().unwrap(), without.final_accuracy().unwrap());
        gains.push(a - b);
        parts.push(format!("seed {seed}: {:.4} vs {:.4} [{}]", a, b, g.ops().iter().map(|o| o.name()).collect::<Vec<_>>().join(",")));
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        mean >= END_TO_END_MARGIN && secs < END_TO_END_BUDGET_S,
        format!("mean gain {:+.2} points (need >= {:.1}); {}; {secs:.0}s", 100.0 * mean, 100.0 * END_TO_END_MARGIN, parts.join("; ")),
    )
}

fn cli_outputs(dir: &Path, args: &[&str]) -> Vec<Vec<u8>> {
    let out = dir.to_str().unwrap();
    let mut argv = vec!["rfsearch"];
    argv.extend_from_slice(args);
    argv.extend_from_slice(&["--out", out, "--quiet"]);
    assert_eq!(rfsearch::cli::run(argv), 0, "{args:?}");
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("small.cfg");
    std::fs::write(
        &cfg_path,
        "n_train = 96\nn_test = 32\nsearch_epochs = 2\nsearch_batch_size = 32\ntrain_epochs = 1\ntrain_batch_size = 32\nerf_hw = 16 16\nsweep_sigmas = 0 2\nsweep_seeds = 0\n",
    )
    .unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let mut args = vec![name, "--config", cfg, "--seed", "3"];
        args.extend_from_slice(extra);
        let a = cli_outputs(&tmp.path().join(format!("{name}_a")), &args);
        let b = cli_outputs(&tmp.path().join(format!("{name}_b")), &args);
        a == b
    };
    let mut same = vec![("search", run("search", &[]))];
    let genotype = tmp.path().join("search_a/genotype.txt");
    let g = genotype.to_str().unwrap();
    same.push(("retrain", run("retrain", &["--genotype", g])));
    same.push(("analyze", run("analyze", &["--genotype", g])));
    let ckpt = tmp.path().join("retrain_a/checkpoint.json");
    same.push(("eval", run("eval", &["--genotype", g, "--checkpoint", ckpt.to_str().unwrap()])));
    same.push(("sweep", run("sweep", &[])));
    same.push(("selfcheck", run("selfcheck", &["--instances", "2", "--rf-genotypes", "1"])));
    let ok = same.iter().all(|(_, s)| *s);
    outcome(
        ok,
        format!("byte-identical output directories for {}", same.iter().map(|(n, s)| format!("{n}={s}")).collect::<Vec<_>>().join(" ")),
    )
}

fn identity_at_init(cfg: &RunConfig) -> Outcome {
    let (train, _) = cfg.dataset.load().unwrap();
    let x = train.images.select_batch(&(0..32).collect::<Vec<_>>());
    let base = Model::baseline(cfg.backbone()).unwrap();
    let full = Model::new(cfg.backbone(), Some(cfg.arfam.clone())).unwrap();
    let l0 = base.logits(&base.init_params(7), &x, None).unwrap();
    let g = Genotype::spp_like();
    let l1 = full.logits(&full.init_params(7), &x, Some(&mut SpatialMode::Discrete(&g))).unwrap();
    let alpha = Tensor::zeros(rfsearch::arfam::alpha_shape(&cfg.arfam));
    let mut tape = Tape::new();
    let a = tape.constant(alpha);
    let mut rng = RngStream::new(0, "acceptance/noise");
    let mut mode = SpatialMode::Relaxed { alpha: a, noise: NoiseConfig::new(0.0, 2.0), rng: &mut rng };
    let store = full.init_params(7);
    let xv = tape.constant(x.clone());
    let y = full.forward(&mut tape, &store, xv, Some(&mut mode), false).unwrap();
    let l2 = tape.value(y).clone();
    let (d1, d2) = (l0.max_abs_diff(&l1), l0.max_abs_diff(&l2));
    outcome(d1 == 0.0 && d2 == 0.0, format!("max |logit diff| discrete {d1:e}, relaxed with noise {d2:e}"))
}

fn baseline_coverage() -> Outcome {
    let cfg = ArfamConfig::default();
    let module = Arfam::new("m", 8, cfg.clone());
    let mut store = rfsearch::autodiff::ParamStore::new();
    module.init_params(&mut store, 0);
    let mut kinds = Vec::new();
    for g in [Genotype::spp_like(), Genotype::strip_like()] {
        let parsed: Genotype = g.to_text().parse().unwrap();
        assert_eq!(parsed, g);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([2, 8, 16, 16], 0.5));
        let y = module.forward(&mut tape, &store, x, &mut SpatialMode::Discrete(&parsed), false).unwrap();
        assert_eq!(tape.shape(y), [2, 8, 16, 16].into());
        kinds.push(theoretical_rf(&parsed, (32, 32)).unwrap().output);
    }
    let spp_ok = matches!(kinds[0], RfKind::Box { h, w } if h > 1 && w > 1);
    let strip_ok = matches!(kinds[1], RfKind::Cross { .. });
    outcome(spp_ok && strip_ok, format!("spp-like -> {}, strip-like -> {}", kinds[0], kinds[1]))
}

fn main() -> ExitCode {
    let cfg = RunConfig::default();
    let empirical = std::env::var("ACCEPTANCE_SKIP_EMPIRICAL").is_err();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient correctness", gradients()),
        (2, "search-space count", search_space()),
        (3, "rf oracle equivalence", rf_oracle()),
        (4, "sequential growth", sequential_growth()),
        (5, "strip-pool reach", strip_reach()),
    ];
    if empirical {
        results.push((6, "collapse and noise", collapse_and_noise(&cfg)));
        results.push((7, "end-to-end desk run", end_to_end(&cfg)));
    }
    results.push((8, "determinism", determinism()));
    results.push((9, "identity at init", identity_at_init(&cfg)));
    results.push((10, "baseline coverage", baseline_coverage()));
    results.sort_by_key(|r| r.0);
    for (n, name, o) in &results {
        println!("criterion {n:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if !empirical {
        println!("criteria 6 and 7 skipped (ACCEPTANCE_SKIP_EMPIRICAL set)");
    }
    // 6 and 7 are seeded experiments; their verdict is reported, not enforced.
    let hard_fail = results.iter().any(|(n, _, o)| !o.pass && *n != 6 && *n != 7);
    if hard_fail {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
