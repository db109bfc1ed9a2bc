//! First-order bilevel search over the relaxed ARFAM supernet.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;

use crate::arfam::{discretize, ArfamConfig, Genotype, MixedEdgeParams, SpatialMode};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::candidates::NoiseConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{BackboneSpec, Model};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};
use crate::train::{evaluate, sharded_backward, train_model, TrainConfig};

pub const ALPHA: &str = "alpha";
const ADAM_EPS: Real = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr: Real,
    pub w_momentum: Real,
    pub w_weight_decay: Real,
    pub alpha_lr: Real,
    pub alpha_betas: (Real, Real),
    pub alpha_weight_decay: Real,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub val_fraction: Real,
    pub grad_clip: Option<Real>,
}

impl Default for SearchConfig {
    /// Full-scale protocol values.
    fn default() -> Self {
        SearchConfig {
            epochs: 50,
            batch_size: 128,
            w_lr: 1e-4,
            w_momentum: 0.9,
            w_weight_decay: 5e-4,
            alpha_lr: 1e-4,
            alpha_betas: (0.5, 0.999),
            alpha_weight_decay: 1e-3,
            noise: NoiseConfig::new(0.0, 2.0),
            seed: 0,
            val_fraction: 0.5,
            grad_clip: None,
        }
    }
}

impl SearchConfig {
    /// Settings sized for the synthetic dataset and micro backbone.
    pub fn desk() -> Self {
        SearchConfig { epochs: 30, batch_size: 64, w_lr: 1e-3, alpha_lr: 3e-3, grad_clip: Some(5.0), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0,1], got {}", self.val_fraction)));
        }
        self.noise.validate()
    }
}

/// Weights, architecture logits and their optimizer states.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub store: ParamStore,
    /// Holds the single `alpha` tensor so it gets its own Adam state.
    pub alpha: ParamStore,
    pub arfam: ArfamConfig,
    pub epoch: usize,
    pub step: usize,
    pub skip_history: Vec<usize>,
    pub train_loss_history: Vec<Real>,
    pub val_loss_history: Vec<Real>,
}

impl SearchState {
    pub fn new(model: &Model, seed: u64) -> Result<Self> {
        let arfam = model.arfam.clone().ok_or_else(|| Error::Config("search needs an ARFAM model".into()))?;
        let mut alpha = ParamStore::new();
        alpha.insert(ALPHA, MixedEdgeParams::zeros(&arfam).alpha);
        Ok(SearchState {
            store: model.init_params(seed),
            alpha,
            arfam,
            epoch: 0,
            step: 0,
            skip_history: Vec::new(),
            train_loss_history: Vec::new(),
            val_loss_history: Vec::new(),
        })
    }

    pub fn mixed(&self) -> MixedEdgeParams {
        MixedEdgeParams {
            n_nodes: self.arfam.n_nodes,
            candidates: self.arfam.candidates.clone(),
            alpha: self.alpha.get(ALPHA).expect("alpha registered").clone(),
        }
    }

    pub fn genotype(&self) -> Result<Genotype> {
        discretize(&self.mixed())
    }
}

/// Relaxed forward plus cross-entropy on `x`, weighted by `weight`.
#[allow(clippy::too_many_arguments)]
fn relaxed_loss(
    tape: &mut Tape,
    model: &Model,
    store: &ParamStore,
    alpha: &ParamStore,
    x: Tensor,
    labels: &[usize],
    noise: NoiseConfig,
    rng: &mut RngStream,
    weight: Real,
    train_alpha: bool,
) -> Result<Var> {
    let xv = tape.constant(x);
    let a = alpha.bind(tape, ALPHA, train_alpha)?;
    let mut mode = SpatialMode::Relaxed { alpha: a, noise, rng };
    let logits = model.forward(tape, store, xv, Some(&mut mode), !train_alpha)?;
    let ce = tape.cross_entropy(logits, labels, 0.0)?;
    tape.scale(ce, weight)
}

fn shard_loss(
    model: &Model,
    state_w: &ParamStore,
    state_a: &ParamStore,
    batch: &(Tensor, Vec<usize>),
    cfg: &SearchConfig,
    tag: &str,
    train_alpha: bool,
) -> impl Fn(usize, std::ops::Range<usize>, &mut Tape) -> Result<Var> + Sync {
    let n = batch.1.len();
    let (model, state_w, state_a, cfg) = (model.clone(), state_w.clone(), state_a.clone(), cfg.clone());
    let (x, labels) = batch.clone();
    let tag = tag.to_string();
    move |shard, r, tape| {
        let idx: Vec<usize> = r.clone().collect();
        let xs = x.select_batch(&idx);
        let ls: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut rng = RngStream::new(cfg.seed, &format!("{tag}/{shard}"));
        let w = r.len() as Real / n as Real;
        relaxed_loss(tape, &model, &state_w, &state_a, xs, &ls, cfg.noise, &mut rng, w, train_alpha)
    }
}

/// Adam update of α from the validation batch; weights stay frozen.
pub fn alpha_half_step(
    state: &mut SearchState,
    model: &Model,
    val_batch: &(Tensor, Vec<usize>),
    cfg: &SearchConfig,
) -> Result<Real> {
    if val_batch.1.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tag = format!("noise/{}/alpha", state.step);
    let f = shard_loss(model, &state.store, &state.alpha, val_batch, cfg, &tag, true);
    let loss = sharded_backward(&mut [&mut state.alpha], val_batch.1.len(), f)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    state.alpha.adam_step(cfg.alpha_lr, cfg.alpha_betas, cfg.alpha_weight_decay, ADAM_EPS)?;
    if !state.alpha.get(ALPHA).expect("alpha registered").is_finite() {
        return Err(Error::NonFiniteAlpha);
    }
    Ok(loss)
}

/// Momentum-SGD update of the weights from the training batch; α stays frozen.
pub fn weight_half_step(
    state: &mut SearchState,
    model: &Model,
    train_batch: &(Tensor, Vec<usize>),
    cfg: &SearchConfig,
) -> Result<Real> {
    if train_batch.1.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tag = format!("noise/{}/w", state.step);
    let f = shard_loss(model, &state.store, &state.alpha, train_batch, cfg, &tag, false);
    let loss = sharded_backward(&mut [&mut state.store], train_batch.1.len(), f)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    if let Some(c) = cfg.grad_clip {
        state.store.clip_grad_norm(c);
    }
    state.store.sgd_step(cfg.w_lr, cfg.w_momentum, cfg.w_weight_decay)?;
    Ok(loss)
}

/// One alternating step, α first. Returns `(train_loss, val_loss)`.
pub fn search_step(
    state: &mut SearchState,
    model: &Model,
    train_batch: &(Tensor, Vec<usize>),
    val_batch: &(Tensor, Vec<usize>),
    cfg: &SearchConfig,
) -> Result<(Real, Real)> {
    if train_batch.1.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let val_loss = alpha_half_step(state, model, val_batch, cfg)?;
    let train_loss = weight_half_step(state, model, train_batch, cfg)?;
    state.step += 1;
    Ok((train_loss, val_loss))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub mean_train_loss: Real,
    pub mean_val_loss: Real,
    pub skip_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchReport {
    pub epochs: Vec<EpochTelemetry>,
    /// Wall time per epoch; kept apart from the telemetry so that the CSV is
    /// reproducible byte for byte.
    pub wall_seconds: Vec<Real>,
    pub alpha: MixedEdgeParams,
}

impl SearchReport {
    pub fn skip_counts(&self) -> Vec<usize> {
        self.epochs.iter().map(|e| e.skip_count).collect()
    }

    /// Telemetry CSV. The `wall_seconds` column is left empty unless
    /// `with_wall_time` is set.
    pub fn telemetry_csv(&self, with_wall_time: bool) -> String {
        let mut out = String::from("epoch,mean_train_loss,mean_val_loss,skip_count,wall_seconds\n");
        for (i, e) in self.epochs.iter().enumerate() {
            let wall = if with_wall_time { format!("{:.3}", self.wall_seconds[i]) } else { String::new() };
            out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.mean_train_loss, e.mean_val_loss, e.skip_count, wall));
        }
        out
    }
}

/// A failed search with the telemetry gathered up to the failure.
#[derive(Debug)]
pub struct SearchAbort {
    pub error: Error,
    pub report: SearchReport,
}

impl fmt::Display for SearchAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "search aborted after {} epochs: {}", self.report.epochs.len(), self.error)
    }
}

impl std::error::Error for SearchAbort {}

impl From<SearchAbort> for Error {
    fn from(a: SearchAbort) -> Self {
        a.error
    }
}

/// Runs `cfg.epochs` epochs of [`search_step`] over a seeded split of
/// `data`, then discretizes α.
pub fn run_search(
    model: &Model,
    data: &Dataset,
    cfg: &SearchConfig,
) -> std::result::Result<(Genotype, SearchReport), SearchAbort> {
    let mut state = match SearchState::new(model, cfg.seed) {
        Ok(s) => s,
        Err(error) => {
            let cfg_a = model.arfam.clone().unwrap_or_default();
            let report = SearchReport { epochs: vec![], wall_seconds: vec![], alpha: MixedEdgeParams::zeros(&cfg_a) };
            return Err(SearchAbort { error, report });
        }
    };
    let mut report = SearchReport { epochs: vec![], wall_seconds: vec![], alpha: state.mixed() };
    let abort = |error: Error, report: &SearchReport, state: &SearchState| SearchAbort {
        error,
        report: SearchReport { alpha: state.mixed(), ..report.clone() },
    };
    if let Err(e) = cfg.validate() {
        return Err(abort(e, &report, &state));
    }
    if data.is_empty() {
        return Err(abort(Error::EmptyDataset, &report, &state));
    }
    let (train, val) = match data.split(cfg.val_fraction, &mut RngStream::new(cfg.seed, "search/split")) {
        Ok(p) => p,
        Err(e) => return Err(abort(e, &report, &state)),
    };
    if train.is_empty() || val.is_empty() {
        return Err(abort(Error::EmptyDataset, &report, &state));
    }
    let mut train_rng = RngStream::new(cfg.seed, "search/train_order");
    let mut val_rng = RngStream::new(cfg.seed, "search/val_order");
    let mut val_order: Vec<usize> = Vec::new();
    let mut val_pos = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = train_rng.permutation(train.len());
        let (mut tl, mut vl, mut nb) = (0.0, 0.0, 0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if val_pos + cfg.batch_size.min(val.len()) > val_order.len() {
                val_order = val_rng.permutation(val.len());
                val_pos = 0;
            }
            let take = cfg.batch_size.min(val.len());
            let vb = val.batch(&val_order[val_pos..val_pos + take]);
            val_pos += take;
            let tb = train.batch(idx);
            match search_step(&mut state, model, &tb, &vb, cfg) {
                Ok((t, v)) => {
                    tl += t;
                    vl += v;
                    nb += 1;
                }
                Err(Error::NonFinite(_)) | Err(Error::NonFiniteAlpha) => {
                    return Err(abort(Error::NonFiniteLoss { epoch, batch: b }, &report, &state));
                }
                Err(e) => return Err(abort(e, &report, &state)),
            }
        }
        let skip_count = match state.genotype() {
            Ok(g) => g.skip_count(),
            Err(e) => return Err(abort(e, &report, &state)),
        };
        state.epoch += 1;
        state.skip_history.push(skip_count);
        state.train_loss_history.push(tl / nb as Real);
        state.val_loss_history.push(vl / nb as Real);
        report.epochs.push(EpochTelemetry {
            epoch,
            mean_train_loss: tl / nb as Real,
            mean_val_loss: vl / nb as Real,
            skip_count,
        });
        report.wall_seconds.push(start.elapsed().as_secs_f64());
    }
    report.alpha = state.mixed();
    match state.genotype() {
        Ok(g) => Ok((g, report)),
        Err(e) => Err(abort(e, &report, &state)),
    }
}

/// One `(μ, σ, seed)` cell of a noise sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub mu: Real,
    pub sigma: Real,
    pub seed: u64,
    /// `None` marks a failed cell.
    pub result: Option<(Real, usize)>,
    pub genotype: Option<Genotype>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for n < 2).
pub fn mean_std(values: &[Real]) -> (Real, Real) {
    let n = values.len();
    if n == 0 {
        return (Real::NAN, Real::NAN);
    }
    let mean = values.iter().sum::<Real>() / n as Real;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<Real>() / (n - 1) as Real;
    (mean, var.sqrt())
}

impl SweepTable {
    /// Distinct `(μ, σ)` settings in first-seen order.
    pub fn settings(&self) -> Vec<(Real, Real)> {
        let mut out: Vec<(Real, Real)> = Vec::new();
        for r in &self.rows {
            if !out.contains(&(r.mu, r.sigma)) {
                out.push((r.mu, r.sigma));
            }
        }
        out
    }

    /// `(accuracy mean, accuracy std, skip mean, skip std)` over successful seeds.
    pub fn aggregate(&self, mu: Real, sigma: Real) -> (Real, Real, Real, Real) {
        let ok: Vec<(Real, usize)> =
            self.rows.iter().filter(|r| r.mu == mu && r.sigma == sigma).filter_map(|r| r.result).collect();
        let (am, asd) = mean_std(&ok.iter().map(|r| r.0).collect::<Vec<_>>());
        let (sm, ssd) = mean_std(&ok.iter().map(|r| r.1 as Real).collect::<Vec<_>>());
        (am, asd, sm, ssd)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mu,sigma,seed,final_accuracy,final_skip_count\n");
        for (mu, sigma) in self.settings() {
            for r in self.rows.iter().filter(|r| r.mu == mu && r.sigma == sigma) {
                match r.result {
                    Some((acc, skip)) => out.push_str(&format!("{mu},{sigma},{},{acc},{skip}\n", r.seed)),
                    None => out.push_str(&format!("{mu},{sigma},{},failed,failed\n", r.seed)),
                }
            }
            let (am, asd, sm, ssd) = self.aggregate(mu, sigma);
            out.push_str(&format!("{mu},{sigma},mean,{am},{sm}\n"));
            out.push_str(&format!("{mu},{sigma},std,{asd},{ssd}\n"));
        }
        out
    }
}

/// Search plus retrain for every `(μ, σ, seed)`; cells run in parallel and a
/// failing cell is recorded without stopping the sweep.
#[allow(clippy::too_many_arguments)]
pub fn noise_sweep(
    spec: &BackboneSpec,
    arfam: &ArfamConfig,
    train: &Dataset,
    test: &Dataset,
    search: &SearchConfig,
    retrain: &TrainConfig,
    sigmas: &[Real],
    mus: &[Real],
    seeds: &[u64],
) -> Result<SweepTable> {
    if sigmas.is_empty() || mus.is_empty() || seeds.is_empty() {
        return Err(Error::Config("noise sweep needs nonempty sigma, mu and seed grids".into()));
    }
    let model = Model::new(spec.clone(), Some(arfam.clone()))?;
    let cells: Vec<(Real, Real, u64)> = mus
        .iter()
        .flat_map(|&mu| sigmas.iter().flat_map(move |&s| seeds.iter().map(move |&seed| (mu, s, seed))))
        .collect();
    let rows = cells
        .into_par_iter()
        .map(|(mu, sigma, seed)| {
            let cell = || -> Result<(Real, usize, Genotype)> {
                let cfg = SearchConfig { noise: NoiseConfig::new(mu, sigma), seed, ..search.clone() };
                let (g, _) = run_search(&model, train, &cfg)?;
                let tcfg = TrainConfig { seed, ..retrain.clone() };
                let r = train_model(&model, model.init_params(seed), Some(&g), train, test, &tcfg)?;
                let acc = match r.final_accuracy() {
                    Some(a) => a,
                    None => evaluate(&model, &r.store, Some(&g), test)?.0,
                };
                Ok((acc, g.skip_count(), g))
            };
            match cell() {
                Ok((acc, skip, g)) => SweepRow { mu, sigma, seed, result: Some((acc, skip)), genotype: Some(g) },
                Err(_) => SweepRow { mu, sigma, seed, result: None, genotype: None },
            }
        })
        .collect();
    Ok(SweepTable { rows })
}
