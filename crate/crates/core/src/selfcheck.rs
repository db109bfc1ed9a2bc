//! Finite-difference suites over every primitive plus the RF oracle.

use std::fmt::Write as _;
use std::time::Instant;

use crate::arfam::{alpha_shape, Arfam, ArfamConfig, Genotype, SpatialMode};
use crate::autodiff::{check_gradient, ParamStore, PrimitiveKind, Tape, Var};
use crate::candidates::{NoiseConfig, OpKind};
use crate::error::Result;
use crate::rf::verify_rf;
use crate::rng::RngStream;
use crate::tensor::{Real, Shape, Tensor};

pub const GRAD_TOLERANCE: Real = 1e-4;
pub const FD_STEP: Real = 1e-4;
pub const DEFAULT_INSTANCES: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub instances: usize,
    pub max_error: Real,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_error < GRAD_TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SelfcheckReport {
    pub primitives: Vec<GradCheck>,
    pub alpha: GradCheck,
    pub rf_genotypes: usize,
    pub rf_containment_violations: usize,
    pub rf_equality_violations: usize,
    pub seconds: f64,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.primitives.iter().all(GradCheck::passed)
            && self.alpha.passed()
            && self.rf_containment_violations == 0
            && self.rf_equality_violations == 0
    }

    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let verdict = |ok: bool| if ok { "ok" } else { "FAIL" };
        for g in self.primitives.iter().chain(std::iter::once(&self.alpha)) {
            writeln!(o, "grad {:<16} instances {:>3} max_rel_error {:.3e} {}", g.name, g.instances, g.max_error, verdict(g.passed()))
                .unwrap();
        }
        writeln!(
            o,
            "rf   genotypes {} containment_violations {} equality_violations {} {}",
            self.rf_genotypes,
            self.rf_containment_violations,
            self.rf_equality_violations,
            verdict(self.rf_containment_violations == 0 && self.rf_equality_violations == 0)
        )
        .unwrap();
        writeln!(o, "selfcheck {}", if self.passed() { "passed" } else { "FAILED" }).unwrap();
        o
    }
}

/// Values on a shuffled grid with gaps far wider than the finite-difference
/// step, kept away from zero, so max and relu never switch branch under a probe.
pub fn tie_free(shape: impl Into<Shape>, rng: &mut RngStream) -> Tensor {
    let shape = shape.into();
    let n = shape.numel();
    let perm = rng.permutation(n);
    let spacing = 4.0 / n as Real;
    let data = perm
        .iter()
        .map(|&p| -2.0 + spacing * (p as Real + 0.5 + 0.4 * (rng.uniform() - 0.5)))
        .collect();
    Tensor::new(shape, data).expect("shape matches length")
}

/// Scalarizes `y` through a sigmoid so every element gets a distinct weight.
fn reduce(tape: &mut Tape, y: Var) -> Result<Var> {
    let s = tape.sigmoid(y)?;
    tape.sum(s)
}

/// Max error over each input of `kind` applied to `inputs`.
fn check_inputs(kind: &PrimitiveKind, inputs: &[Tensor], scalar: bool) -> Result<Real> {
    let mut worst: Real = 0.0;
    for slot in 0..inputs.len() {
        let err = check_gradient(
            |t, v| {
                let vars: Vec<Var> = (0..inputs.len())
                    .map(|i| if i == slot { v } else { t.constant(inputs[i].clone()) })
                    .collect();
                let y = t.apply(kind.clone(), &vars)?;
                if scalar {
                    Ok(y)
                } else {
                    reduce(t, y)
                }
            },
            &inputs[slot],
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

type Case = (PrimitiveKind, Vec<Tensor>, bool);

fn cases(name: &str, rng: &mut RngStream) -> Vec<Case> {
    let x = |rng: &mut RngStream, s: [usize; 4]| tie_free(s, rng);
    let img = [2, 2, 5, 5];
    match name {
        "conv2d" => [(1, 1), (3, 1), (3, 2)]
            .iter()
            .map(|&(k, stride)| {
                let bias = x(rng, [1, 3, 1, 1]);
                (
                    PrimitiveKind::Conv2d { stride },
                    vec![x(rng, img), x(rng, [3, 2, k, k]), bias],
                    false,
                )
            })
            .collect(),
        "linear" => vec![(
            PrimitiveKind::Linear,
            vec![x(rng, [2, 4, 1, 1]), x(rng, [3, 4, 1, 1]), x(rng, [1, 3, 1, 1])],
            false,
        )],
        "relu" => vec![(PrimitiveKind::Relu, vec![x(rng, img)], false)],
        "sigmoid" => vec![(PrimitiveKind::Sigmoid, vec![x(rng, img)], false)],
        "softmax" => vec![(PrimitiveKind::Softmax, vec![x(rng, [2, 4, 2, 2])], false)],
        "add" => vec![(PrimitiveKind::Add, vec![x(rng, img), x(rng, img)], false)],
        "channel_mul" => vec![(PrimitiveKind::ChannelMul, vec![x(rng, img), x(rng, [2, 2, 1, 1])], false)],
        "global_avg_pool" => vec![(PrimitiveKind::GlobalAvgPool, vec![x(rng, img)], false)],
        "max_pool" => [3, 5, 7].iter().map(|&k| (PrimitiveKind::MaxPool { k }, vec![x(rng, img)], false)).collect(),
        "avg_pool" => [3, 5, 7].iter().map(|&k| (PrimitiveKind::AvgPool { k }, vec![x(rng, img)], false)).collect(),
        "row_mean" => vec![(PrimitiveKind::RowMean, vec![x(rng, img)], false)],
        "col_mean" => vec![(PrimitiveKind::ColMean, vec![x(rng, img)], false)],
        "scale" => {
            let factor = rng.uniform_range(-2.0, 2.0);
            vec![(PrimitiveKind::Scale { factor }, vec![x(rng, img)], false)]
        }
        "scale_by" => {
            let index = rng.below(4);
            vec![(PrimitiveKind::ScaleBy { index }, vec![x(rng, img), x(rng, [4, 1, 1, 1])], false)]
        }
        "cross_entropy" => {
            let labels = (0..3).map(|_| rng.below(4)).collect();
            vec![(PrimitiveKind::CrossEntropy { labels, smoothing: 0.1 }, vec![x(rng, [3, 4, 1, 1])], true)]
        }
        "const_pad" => {
            let value = rng.uniform_range(-1.0, 1.0);
            vec![(PrimitiveKind::ConstPad { pads: [1, 0, 2, 1, 0, 3], value }, vec![x(rng, [2, 2, 3, 3])], false)]
        }
        "sum" => vec![(PrimitiveKind::Sum, vec![x(rng, img)], true)],
        _ => unreachable!("unknown primitive {name}"),
    }
}

/// Every primitive, one entry per name in `PrimitiveKind::name`.
pub const PRIMITIVES: [&str; 17] = [
    "conv2d",
    "linear",
    "relu",
    "sigmoid",
    "softmax",
    "add",
    "channel_mul",
    "global_avg_pool",
    "max_pool",
    "avg_pool",
    "row_mean",
    "col_mean",
    "scale",
    "scale_by",
    "cross_entropy",
    "const_pad",
    "sum",
];

pub fn check_primitive(name: &str, instances: usize, seed: u64) -> Result<GradCheck> {
    let mut worst: Real = 0.0;
    for i in 0..instances {
        let mut rng = RngStream::new(seed, &format!("selfcheck/{name}/{i}"));
        for (kind, inputs, scalar) in cases(name, &mut rng) {
            worst = worst.max(check_inputs(&kind, &inputs, scalar)?);
        }
    }
    Ok(GradCheck { name: name.to_string(), instances, max_error: worst })
}

/// ∂loss/∂α through a whole relaxed N=3 module with random weights and noise on.
pub fn check_alpha(instances: usize, seed: u64) -> Result<GradCheck> {
    let cfg = ArfamConfig { n_nodes: 3, r_spatial: 2, r_channel: 2, ..ArfamConfig::default() };
    let module = Arfam::new("m", 4, cfg.clone());
    let mut worst: Real = 0.0;
    for i in 0..instances {
        let mut rng = RngStream::new(seed, &format!("selfcheck/alpha/{i}"));
        let mut store = ParamStore::new();
        module.init_params(&mut store, seed + i as u64);
        let expand = tie_free([4, 2, 1, 1], &mut rng);
        store.insert("m.expand.weight", expand);
        let x = tie_free([1, 4, 6, 6], &mut rng);
        let alpha = Tensor::new(
            alpha_shape(&cfg),
            (0..alpha_shape(&cfg).numel()).map(|_| rng.normal(0.0, 1.0)).collect(),
        )?;
        let err = check_gradient(
            |t, a| {
                let xv = t.constant(x.clone());
                let mut noise_rng = RngStream::new(seed, &format!("selfcheck/alpha/{i}/noise"));
                let mut mode = SpatialMode::Relaxed { alpha: a, noise: NoiseConfig::new(0.0, 0.5), rng: &mut noise_rng };
                let y = module.forward(t, &store, xv, &mut mode, false)?;
                reduce(t, y)
            },
            &alpha,
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(GradCheck { name: "arfam_alpha".into(), instances, max_error: worst })
}

/// Runs every suite. `rf_genotypes` random N=4 genotypes on 32×32 inputs.
pub fn run_selfcheck(instances: usize, rf_genotypes: usize, seed: u64) -> Result<SelfcheckReport> {
    let start = Instant::now();
    let primitives = PRIMITIVES.iter().map(|p| check_primitive(p, instances, seed)).collect::<Result<Vec<_>>>()?;
    let alpha = check_alpha(instances, seed)?;
    let mut rng = RngStream::new(seed, "selfcheck/rf");
    let (mut containment, mut equality) = (0, 0);
    for _ in 0..rf_genotypes {
        let g = Genotype::random(4, &OpKind::ALL, &mut rng)?;
        let report = verify_rf(&g, (32, 32), 2, rng.below(1 << 30) as u64)?;
        containment += report.containment.len();
        equality += report.equality.len();
    }
    Ok(SelfcheckReport {
        primitives,
        alpha,
        rf_genotypes,
        rf_containment_violations: containment,
        rf_equality_violations: equality,
        seconds: start.elapsed().as_secs_f64(),
    })
}
