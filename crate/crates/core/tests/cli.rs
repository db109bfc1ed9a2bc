use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rfsearch"))
}

const SMALL: &str = "n_train = 64\nn_test = 32\nsearch_epochs = 2\nsearch_batch_size = 32\ntrain_epochs = 2\ntrain_batch_size = 32\nerf_hw = 16 16\n";

fn write_small(dir: &Path) -> String {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["search", "--config", "missing.cfg", "--out"]).arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
}

#[test]
fn unknown_subcommand_and_bad_key_exit_one() {
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.cfg");
    fs::write(&p, "colour = red\n").unwrap();
    let out = bin().args(["search", "--config"]).arg(&p).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["analyze", "--genotype", "/nonexistent/genotype.txt", "--out"]).arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selfcheck_lists_every_primitive() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["selfcheck", "--instances", "3", "--rf-genotypes", "2", "--out"]).arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report = fs::read_to_string(tmp.path().join("selfcheck.txt")).unwrap();
    for p in rfsearch::selfcheck::PRIMITIVES {
        assert!(report.contains(&format!("grad {p} ")), "{p} missing from\n{report}");
    }
    assert!(report.contains("arfam_alpha"));
    assert!(report.contains("selfcheck passed"));
}

#[test]
fn analyze_all_zero_genotype_gives_single_pixel() {
    let tmp = tempfile::tempdir().unwrap();
    let g = rfsearch::arfam::Genotype::uniform(4, rfsearch::candidates::OpKind::Zero).unwrap();
    let gp = tmp.path().join("zero.txt");
    fs::write(&gp, g.to_text()).unwrap();
    let out = tmp.path().join("a");
    let status = bin().args(["analyze", "--quiet", "--genotype"]).arg(&gp).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let pgm = fs::read_to_string(out.join("erf.pgm")).unwrap();
    let values: Vec<u32> = pgm.split_whitespace().skip(4).map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 32 * 32);
    assert_eq!(values.iter().filter(|&&v| v > 0).count(), 1);
    assert_eq!(values[16 * 32 + 16], 65535);
    assert!(fs::read_to_string(out.join("rf_profile.txt")).unwrap().contains("output = empty"));
}

#[test]
fn search_retrain_eval_pipeline_with_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small(tmp.path());
    let s = tmp.path().join("s");
    let st = bin().args(["search", "--quiet", "--seed", "4", "--config", &cfg, "--out"]).arg(&s).status().unwrap();
    assert_eq!(st.code(), Some(0));
    assert_eq!(fs::read_to_string(s.join("config.txt")).unwrap(), SMALL);
    let manifest = fs::read_to_string(s.join("manifest.txt")).unwrap();
    assert!(manifest.contains("format_version = 1") && manifest.contains("seed = 4") && manifest.contains("subcommand = search"));
    let effective = fs::read_to_string(s.join("effective_config.txt")).unwrap();
    assert!(effective.contains("seed = 4\n"));
    let telemetry = fs::read_to_string(s.join("telemetry.csv")).unwrap();
    assert!(telemetry.starts_with("epoch,mean_train_loss,mean_val_loss,skip_count,wall_seconds\n"));
    assert_eq!(telemetry.lines().count(), 3);

    // Re-running from the recorded effective config reproduces the outputs.
    let eff = tmp.path().join("eff.cfg");
    fs::write(&eff, &effective).unwrap();
    let s2 = tmp.path().join("s2");
    let st = bin().args(["search", "--quiet", "--config"]).arg(&eff).arg("--out").arg(&s2).status().unwrap();
    assert_eq!(st.code(), Some(0));
    for f in ["genotype.txt", "telemetry.csv", "alpha_weights.csv"] {
        assert_eq!(fs::read(s.join(f)).unwrap(), fs::read(s2.join(f)).unwrap(), "{f}");
    }

    let r = tmp.path().join("r");
    let st = bin()
        .args(["retrain", "--quiet", "--config", &cfg, "--genotype"])
        .arg(s.join("genotype.txt"))
        .arg("--out")
        .arg(&r)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let metrics = fs::read_to_string(r.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let e = tmp.path().join("e");
    let st = bin()
        .args(["eval", "--quiet", "--config", &cfg, "--genotype"])
        .arg(s.join("genotype.txt"))
        .arg("--checkpoint")
        .arg(r.join("final.json"))
        .arg("--out")
        .arg(&e)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let eval = fs::read_to_string(e.join("eval.txt")).unwrap();
    let last = metrics.lines().last().unwrap().split(',').nth(2).unwrap().to_string();
    assert!(eval.contains(&format!("accuracy = {last}\n")), "{eval} vs {last}");
}

#[test]
fn retrain_requires_genotype_or_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small(tmp.path());
    let out = bin().args(["retrain", "--quiet", "--config", &cfg, "--out"]).arg(tmp.path().join("x")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let st = bin().args(["retrain", "--quiet", "--baseline", "--config", &cfg, "--out"]).arg(tmp.path().join("b")).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let summary = fs::read_to_string(tmp.path().join("b/summary.txt")).unwrap();
    assert!(summary.starts_with("params = 19672\n"), "{summary}");
}
