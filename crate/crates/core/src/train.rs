//! Retraining and evaluation of discrete models.

use std::ops::Range;

use rayon::prelude::*;

use crate::arfam::{Genotype, SpatialMode};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::{cutout, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

/// Samples per gradient shard. Shards are reduced in index order, so results
/// do not depend on the thread count.
pub const SHARD: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate of the cosine schedule, annealed to 0.
    pub lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    pub label_smoothing: Real,
    /// Cutout square side; 0 disables it.
    pub cutout: usize,
    pub grad_clip: Option<Real>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            label_smoothing: 0.1,
            cutout: 0,
            grad_clip: None,
            seed: 0,
        }
    }
}

/// Cosine annealing from `lr0` at step 0 towards 0 at `total`.
pub fn cosine_lr(lr0: Real, step: usize, total: usize) -> Real {
    if total == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as Real / total as Real).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: Real,
    pub test_accuracy: Real,
    pub test_loss: Real,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub store: ParamStore,
    pub best: ParamStore,
    pub best_accuracy: Option<Real>,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> Option<Real> {
        self.metrics.last().map(|m| m.test_accuracy)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_accuracy,test_loss\n");
        for m in &self.metrics {
            out.push_str(&format!("{},{},{},{}\n", m.epoch, m.train_loss, m.test_accuracy, m.test_loss));
        }
        out
    }
}

/// Splits `0..n` into consecutive shards of at most [`SHARD`] samples.
pub(crate) fn shards(n: usize) -> Vec<Range<usize>> {
    (0..n).step_by(SHARD).map(|s| s..(s + SHARD).min(n)).collect()
}

/// Runs `f` on every shard in parallel, backpropagates each shard loss and
/// accumulates the gradients into `stores` in shard order. `f` must return a
/// loss already weighted by the shard's share of the batch. Returns the summed
/// loss.
pub(crate) fn sharded_backward<F>(stores: &mut [&mut ParamStore], n: usize, f: F) -> Result<Real>
where
    F: Fn(usize, Range<usize>, &mut Tape) -> Result<Var> + Sync,
{
    let tapes: Vec<(Tape, Var)> = shards(n)
        .into_par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut tape = Tape::new();
            let loss = f(i, r, &mut tape)?;
            tape.backward(loss)?;
            Ok((tape, loss))
        })
        .collect::<Result<_>>()?;
    for s in stores.iter_mut() {
        s.zero_grads();
    }
    let mut total = 0.0;
    for (tape, loss) in &tapes {
        total += tape.value(*loss).item()?;
        for s in stores.iter_mut() {
            s.accumulate_grads(tape);
        }
    }
    Ok(total)
}

fn slice(x: &Tensor, labels: &[usize], r: Range<usize>) -> (Tensor, Vec<usize>) {
    let idx: Vec<usize> = r.collect();
    (x.select_batch(&idx), idx.iter().map(|&i| labels[i]).collect())
}

/// Discrete forward with mean cross-entropy over `x`, scaled by `weight`.
fn discrete_loss(
    tape: &mut Tape,
    model: &Model,
    store: &ParamStore,
    genotype: Option<&Genotype>,
    x: Tensor,
    labels: &[usize],
    smoothing: Real,
    weight: Real,
    trainable: bool,
) -> Result<(Var, Var)> {
    let xv = tape.constant(x);
    let logits = match genotype {
        Some(g) => model.forward(tape, store, xv, Some(&mut SpatialMode::Discrete(g)), trainable)?,
        None => model.forward(tape, store, xv, None, trainable)?,
    };
    let ce = tape.cross_entropy(logits, labels, smoothing)?;
    Ok((tape.scale(ce, weight)?, logits))
}

fn as_nonfinite(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { epoch, batch },
        other => other,
    }
}

/// Top-1 accuracy and mean (unsmoothed) loss.
pub fn evaluate(model: &Model, store: &ParamStore, genotype: Option<&Genotype>, data: &Dataset) -> Result<(Real, Real)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.len();
    let parts: Vec<(usize, Real)> = shards(n)
        .into_par_iter()
        .map(|r| {
            let (x, labels) = slice(&data.images, &data.labels, r);
            let mut tape = Tape::new();
            let (loss, logits) = discrete_loss(&mut tape, model, store, genotype, x, &labels, 0.0, 1.0, false)?;
            let k = tape.shape(logits).c;
            let correct = tape
                .value(logits)
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            Ok((correct, tape.value(loss).item()? * labels.len() as Real))
        })
        .collect::<Result<_>>()?;
    let correct: usize = parts.iter().map(|p| p.0).sum();
    let loss: Real = parts.iter().map(|p| p.1).sum();
    Ok((correct as Real / n as Real, loss / n as Real))
}

/// Index of the first maximum.
pub fn argmax(row: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Momentum SGD with a cosine schedule on `train`, evaluating on `test`
/// after every epoch and keeping the best-accuracy parameters.
pub fn train_model(
    model: &Model,
    mut store: ParamStore,
    genotype: Option<&Genotype>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut report = TrainReport { best: store.clone(), store: ParamStore::new(), best_accuracy: None, metrics: Vec::new() };
    if cfg.epochs == 0 {
        report.store = store;
        return Ok(report);
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order_rng = RngStream::new(cfg.seed, "train/order");
    let mut aug_rng = RngStream::new(cfg.seed, "train/cutout");
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = order_rng.permutation(train.len());
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, labels) = train.batch(idx);
            if cfg.cutout > 0 {
                x = cutout(&x, cfg.cutout, &mut aug_rng);
            }
            let n = labels.len();
            let snapshot = store.clone();
            let loss = sharded_backward(&mut [&mut store], n, |_, r, tape| {
                let w = r.len() as Real / n as Real;
                let (xs, ls) = slice(&x, &labels, r);
                Ok(discrete_loss(tape, model, &snapshot, genotype, xs, &ls, cfg.label_smoothing, w, true)?.0)
            })
            .map_err(as_nonfinite(epoch, b))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            if let Some(c) = cfg.grad_clip {
                store.clip_grad_norm(c);
            }
            store.sgd_step(cosine_lr(cfg.lr, step, total), cfg.momentum, cfg.weight_decay)?;
            step += 1;
            loss_sum += loss;
        }
        let (acc, test_loss) = evaluate(model, &store, genotype, test)?;
        report.metrics.push(EpochMetrics { epoch, train_loss: loss_sum / per_epoch as Real, test_accuracy: acc, test_loss });
        if report.best_accuracy.is_none_or(|b| acc > b) {
            report.best_accuracy = Some(acc);
            report.best = store.clone();
        }
    }
    report.store = store;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arfam::ArfamConfig;
    use crate::candidates::OpKind;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::model::BackboneSpec;

    fn small_spec() -> BackboneSpec {
        BackboneSpec { stem_channels: 4, stages: vec![(4, 1), (8, 1)], n_classes: 4, ..BackboneSpec::default() }
    }

    fn data(n: usize, seed: u64) -> Dataset {
        gen_synthetic(&SyntheticSpec { n_classes: 4, n_samples: n, noise_std: 0.2, seed, image_hw: (8, 8), ..Default::default() })
            .unwrap()
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.05, 0, 10), 0.05);
        assert!((cosine_lr(0.05, 5, 10) - 0.025).abs() < 1e-15);
        assert!(cosine_lr(0.05, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let m = Model::baseline(small_spec()).unwrap();
        let store = m.init_params(0);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let r = train_model(&m, store.clone(), None, &data(8, 0), &data(8, 1), &cfg).unwrap();
        assert_eq!(r.store, store);
        assert!(r.metrics.is_empty());
    }

    #[test]
    fn constant_predictor_accuracy_is_one_over_k() {
        let m = Model::baseline(small_spec()).unwrap();
        let mut store = m.init_params(0);
        store.get_mut("fc.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("fc.bias").unwrap().data_mut()[2] = 1.0;
        let (acc, _) = evaluate(&m, &store, None, &data(40, 3)).unwrap();
        assert_eq!(acc, 0.25);
        let again = evaluate(&m, &store, None, &data(40, 3)).unwrap();
        assert_eq!(evaluate(&m, &store, None, &data(40, 3)).unwrap(), again);
        let empty = data(8, 0).subset(&[]);
        assert!(matches!(evaluate(&m, &store, None, &empty), Err(Error::EmptyDataset)));
    }

    #[test]
    fn sharding_matches_single_tape() {
        let m = Model::new(small_spec(), Some(ArfamConfig::default())).unwrap();
        let g = Genotype::spp_like();
        let mut store = m.init_params(1);
        store.get_mut("stage0.arfam.expand.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.1);
        let ds = data(40, 2);
        let (x, labels) = ds.batch(&(0..40).collect::<Vec<_>>());
        let snap = store.clone();
        let mut a = store.clone();
        let la = sharded_backward(&mut [&mut a], 40, |_, r, tape| {
            let (xs, ls) = slice(&x, &labels, r.clone());
            Ok(discrete_loss(tape, &m, &snap, Some(&g), xs, &ls, 0.1, r.len() as Real / 40.0, true)?.0)
        })
        .unwrap();
        let mut tape = Tape::new();
        let (loss, _) = discrete_loss(&mut tape, &m, &snap, Some(&g), x.clone(), &labels, 0.1, 1.0, true).unwrap();
        tape.backward(loss).unwrap();
        let mut b = store.clone();
        b.pull_grads(&tape);
        assert!((la - tape.value(loss).item().unwrap()).abs() < 1e-12);
        for name in a.names() {
            let ga = a.get(name).unwrap().grad.as_ref().unwrap();
            let gb = b.get(name).unwrap().grad.as_ref().unwrap();
            let d = ga.iter().zip(gb).map(|(p, q)| (p - q).abs()).fold(0.0, Real::max);
            assert!(d < 1e-10, "{name}: {d}");
        }
    }

    #[test]
    fn training_learns_and_is_deterministic() {
        let m = Model::new(small_spec(), Some(ArfamConfig::default())).unwrap();
        let g = Genotype::chain(4, OpKind::AvgPool3).unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 32, ..TrainConfig::default() };
        let (tr, te) = (data(128, 5), data(64, 6));
        let r1 = train_model(&m, m.init_params(0), Some(&g), &tr, &te, &cfg).unwrap();
        let r2 = train_model(&m, m.init_params(0), Some(&g), &tr, &te, &cfg).unwrap();
        assert_eq!(r1.metrics, r2.metrics);
        assert_eq!(r1.store, r2.store);
        assert_eq!(r1.metrics_csv().lines().count(), 5);
        assert!(r1.metrics[3].train_loss < r1.metrics[0].train_loss);
        assert!(r1.best_accuracy.unwrap() >= r1.final_accuracy().unwrap());
    }
}
