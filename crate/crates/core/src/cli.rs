//! Command-line front end. [`run`] returns the process exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::arfam::{edge_pairs, ArfamConfig, Genotype};
use crate::autodiff::ParamStore;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rf::{erf_averaged, erf_radius, probe_module, theoretical_rf, verify_rf, ErfTarget};
use crate::search::{noise_sweep, run_search};
use crate::selfcheck::{run_selfcheck, DEFAULT_INSTANCES};
use crate::train::{evaluate, train_model};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const OUTPUT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "rfsearch", version, about = "Search, train and analyze pooling attention modules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Relaxed search; writes the genotype and per-epoch telemetry.
    Search,
    /// Trains a discrete model from a genotype file.
    Retrain {
        #[arg(long)]
        genotype: Option<PathBuf>,
        /// Trains the backbone without attention modules.
        #[arg(long, conflicts_with = "genotype")]
        baseline: bool,
    },
    /// Evaluates a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Theoretical RF, ERF maps and the oracle check for a genotype.
    Analyze {
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Search plus retrain over the noise grid.
    Sweep,
    /// Gradient suites and the RF oracle.
    Selfcheck {
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 20)]
        rf_genotypes: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Search => "search",
            Command::Retrain { .. } => "retrain",
            Command::Eval { .. } => "eval",
            Command::Analyze { .. } => "analyze",
            Command::Sweep => "sweep",
            Command::Selfcheck { .. } => "selfcheck",
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.out.join(name), contents)?;
        Ok(())
    }
}

fn read_genotype(path: &Path) -> Result<Genotype> {
    fs::read_to_string(path)?.parse()
}

fn genotype_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> Option<PathBuf> {
    flag.clone().or_else(|| cfg.genotype.clone())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (mut cfg, verbatim) = match &cli.config {
        Some(p) => match RunConfig::load(p) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("error: cannot use config {}: {e}", p.display());
                eprintln!("usage: rfsearch <search|retrain|eval|analyze|sweep|selfcheck> [--config <path>] [--seed <n>] [--out <dir>] [--quiet]");
                return EXIT_USAGE;
            }
        },
        None => (RunConfig::default(), String::new()),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    let ctx = Ctx { cfg, out: cli.out.clone(), quiet: cli.quiet };
    match execute(&cli.command, &ctx, &verbatim) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cmd: &Command, ctx: &Ctx, verbatim: &str) -> Result<()> {
    fs::create_dir_all(&ctx.out)?;
    ctx.write("config.txt", verbatim)?;
    ctx.write("effective_config.txt", ctx.cfg.to_text())?;
    ctx.write(
        "manifest.txt",
        format!("format_version = {OUTPUT_FORMAT_VERSION}\nsubcommand = {}\nseed = {}\n", cmd.name(), ctx.cfg.seed),
    )?;
    let start = Instant::now();
    match cmd {
        Command::Search => search(ctx)?,
        Command::Retrain { genotype, baseline } => retrain(ctx, genotype, *baseline)?,
        Command::Eval { checkpoint, genotype } => eval(ctx, checkpoint, genotype)?,
        Command::Analyze { genotype } => analyze(ctx, genotype)?,
        Command::Sweep => sweep(ctx)?,
        Command::Selfcheck { instances, rf_genotypes } => selfcheck(ctx, *instances, *rf_genotypes)?,
    }
    ctx.log(format!("{} finished in {:.1}s, outputs in {}", cmd.name(), start.elapsed().as_secs_f64(), ctx.out.display()));
    Ok(())
}

fn search(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let (train, _) = cfg.dataset.load()?;
    let model = Model::new(cfg.backbone(), Some(cfg.arfam.clone()))?;
    let (outcome, report) = match run_search(&model, &train, &cfg.search) {
        Ok((g, r)) => (Ok(g), r),
        Err(abort) => (Err(abort.error), abort.report),
    };
    ctx.write("telemetry.csv", report.telemetry_csv(false))?;
    let mut weights = String::from("edge,from,to");
    for op in &cfg.arfam.candidates {
        weights.push(',');
        weights.push_str(op.name());
    }
    weights.push('\n');
    for (i, ((from, to), row)) in edge_pairs(report.alpha.n_nodes).zip(report.alpha.mixture_weights()).enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        weights.push_str(&format!("{i},{from},{to},{}\n", cells.join(",")));
    }
    ctx.write("alpha_weights.csv", weights)?;
    let genotype = outcome?;
    ctx.write("genotype.txt", genotype.to_text())?;
    for t in &report.epochs {
        ctx.log(format!(
            "epoch {:>3} train {:.4} val {:.4} skip {}",
            t.epoch, t.mean_train_loss, t.mean_val_loss, t.skip_count
        ));
    }
    ctx.log(genotype.to_text());
    Ok(())
}

fn retrain(ctx: &Ctx, genotype: &Option<PathBuf>, baseline: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let genotype = if baseline {
        None
    } else {
        let path = genotype_path(genotype, cfg)
            .ok_or_else(|| Error::Config("retrain needs a genotype (--genotype, config key, or --baseline)".into()))?;
        Some(read_genotype(&path)?)
    };
    let (train, test) = cfg.dataset.load()?;
    let model = Model::new(cfg.backbone(), genotype.as_ref().map(|_| cfg.arfam.clone()))?;
    if let Some(g) = &genotype {
        ctx.write("genotype.txt", g.to_text())?;
    }
    let store = model.init_params(cfg.seed);
    let report = train_model(&model, store, genotype.as_ref(), &train, &test, &cfg.train)?;
    ctx.write("metrics.csv", report.metrics_csv())?;
    ctx.write("checkpoint.json", report.best.to_json())?;
    ctx.write("final.json", report.store.to_json())?;
    let summary = format!(
        "params = {}\nfinal_accuracy = {}\nbest_accuracy = {}\n",
        model.param_count(),
        report.final_accuracy().map_or("none".into(), |a| a.to_string()),
        report.best_accuracy.map_or("none".into(), |a| a.to_string()),
    );
    ctx.write("summary.txt", &summary)?;
    for m in &report.metrics {
        ctx.log(format!("epoch {:>3} loss {:.4} test_acc {:.4}", m.epoch, m.train_loss, m.test_accuracy));
    }
    ctx.log(summary);
    Ok(())
}

fn eval(ctx: &Ctx, checkpoint: &Option<PathBuf>, genotype: &Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    let ckpt = checkpoint
        .clone()
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| Error::Config("eval needs a checkpoint (--checkpoint or config key)".into()))?;
    let store = ParamStore::from_json(&fs::read_to_string(ckpt)?)?;
    let genotype = genotype_path(genotype, cfg).map(|p| read_genotype(&p)).transpose()?;
    let model = Model::new(cfg.backbone(), genotype.as_ref().map(|_| cfg.arfam.clone()))?;
    let (_, test) = cfg.dataset.load()?;
    let (acc, loss) = evaluate(&model, &store, genotype.as_ref(), &test)?;
    let text = format!("accuracy = {acc}\nloss = {loss}\nsamples = {}\n", test.len());
    ctx.write("eval.txt", &text)?;
    ctx.log(text);
    Ok(())
}

fn analyze(ctx: &Ctx, genotype: &Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    let path = genotype_path(genotype, cfg)
        .ok_or_else(|| Error::Config("analyze needs a genotype (--genotype or config key)".into()))?;
    let g = read_genotype(&path)?;
    let a = &cfg.analyze;
    let hw = a.erf_hw;
    ctx.write("genotype.txt", g.to_text())?;
    let profile = theoretical_rf(&g, hw)?;
    ctx.write("rf_profile.txt", profile.to_text())?;
    let probe_cfg = ArfamConfig { n_nodes: g.n_nodes, candidates: g.candidates.clone(), ..cfg.arfam.clone() };
    let (module, store) = probe_module(&probe_cfg);
    let center = (0, hw.0 / 2, hw.1 / 2);
    let map = erf_averaged(ErfTarget::Module { module: &module, store: &store, genotype: &g }, hw, center, a.erf_samples, cfg.seed)?;
    ctx.write("erf.pgm", map.to_pgm())?;
    ctx.write("erf.csv", map.to_csv())?;
    let spatial = erf_averaged(ErfTarget::Spatial(&g), hw, center, a.erf_samples, cfg.seed)?;
    let verify = verify_rf(&g, hw, a.verify_trials, cfg.seed)?;
    let radius = |m: &crate::rf::ErfMap, mass| erf_radius(m, mass).map_or("none".to_string(), |r| r.to_string());
    let (eh, ew) = map.extent();
    let summary = format!(
        "theoretical = {}\nexact = {}\nerf_extent = {eh} {ew}\nerf_radius_50 = {}\nerf_radius_90 = {}\nbranch_radius_90 = {}\ncontainment_violations = {}\nequality_violations = {}\nequality_checked = {}\n",
        profile.output,
        profile.exact,
        radius(&map, 0.5),
        radius(&map, 0.9),
        radius(&spatial, 0.9),
        verify.containment.len(),
        verify.equality.len(),
        verify.equality_checked,
    );
    ctx.write("analysis.txt", &summary)?;
    ctx.log(summary);
    Ok(())
}

fn sweep(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let (train, test) = cfg.dataset.load()?;
    let s = &cfg.sweep;
    let table =
        noise_sweep(&cfg.backbone(), &cfg.arfam, &train, &test, &cfg.search, &cfg.train, &s.sigmas, &s.mus, &s.seeds)?;
    let csv = table.to_csv();
    ctx.write("sweep.csv", &csv)?;
    let mut genotypes = String::new();
    for row in &table.rows {
        if let Some(g) = &row.genotype {
            genotypes.push_str(&format!("# mu = {} sigma = {} seed = {}\n{}\n", row.mu, row.sigma, row.seed, g.to_text()));
        }
    }
    ctx.write("genotypes.txt", genotypes)?;
    ctx.log(csv);
    Ok(())
}

fn selfcheck(ctx: &Ctx, instances: usize, rf_genotypes: usize) -> Result<()> {
    let report = run_selfcheck(instances, rf_genotypes, ctx.cfg.seed)?;
    let text = report.to_text();
    ctx.write("selfcheck.txt", &text)?;
    if !ctx.quiet {
        print!("{text}");
        println!("runtime {:.1}s", report.seconds);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Config("selfcheck failed".into()))
    }
}
