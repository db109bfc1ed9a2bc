//! The nine parameter-free receptive-field operations of the search space.
//!
//! Every operation is stride 1 and preserves the input shape.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

/// Candidate operation. The declaration order is the canonical index order,
/// which only matters for tie-breaking; files always use [`OpKind::name`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MaxPool3,
    MaxPool5,
    MaxPool7,
    AvgPool3,
    AvgPool5,
    AvgPool7,
    StripPool,
    NoisyIdentity,
    Zero,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::MaxPool3,
        OpKind::MaxPool5,
        OpKind::MaxPool7,
        OpKind::AvgPool3,
        OpKind::AvgPool5,
        OpKind::AvgPool7,
        OpKind::StripPool,
        OpKind::NoisyIdentity,
        OpKind::Zero,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MaxPool3 => "max3",
            OpKind::MaxPool5 => "max5",
            OpKind::MaxPool7 => "max7",
            OpKind::AvgPool3 => "avg3",
            OpKind::AvgPool5 => "avg5",
            OpKind::AvgPool7 => "avg7",
            OpKind::StripPool => "strip",
            OpKind::NoisyIdentity => "noisy_id",
            OpKind::Zero => "zero",
        }
    }

    /// Pooling kernel size for the max/avg members.
    pub fn kernel(self) -> Option<usize> {
        match self {
            OpKind::MaxPool3 | OpKind::AvgPool3 => Some(3),
            OpKind::MaxPool5 | OpKind::AvgPool5 => Some(5),
            OpKind::MaxPool7 | OpKind::AvgPool7 => Some(7),
            _ => None,
        }
    }

    pub fn is_max(self) -> bool {
        matches!(self, OpKind::MaxPool3 | OpKind::MaxPool5 | OpKind::MaxPool7)
    }

    pub fn is_avg(self) -> bool {
        matches!(self, OpKind::AvgPool3 | OpKind::AvgPool5 | OpKind::AvgPool7)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown operation `{s}`"))
    }
}

/// Gaussian noise added by the identity candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub mu: Real,
    pub sigma: Real,
    pub enabled: bool,
}

impl NoiseConfig {
    pub const OFF: NoiseConfig = NoiseConfig { mu: 0.0, sigma: 0.0, enabled: false };

    pub fn new(mu: Real, sigma: Real) -> Self {
        NoiseConfig { mu, sigma, enabled: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 || self.sigma.is_nan() {
            Err(Error::NegativeSigma(self.sigma))
        } else {
            Ok(())
        }
    }

    /// Evaluation-mode copy of this config.
    pub fn disabled(self) -> Self {
        NoiseConfig { enabled: false, ..self }
    }

    fn is_exact_identity(&self) -> bool {
        !self.enabled || (self.sigma == 0.0 && self.mu == 0.0)
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::OFF
    }
}

pub fn max_pool_same(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    tape.max_pool(x, k)
}

pub fn avg_pool_same(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    tape.avg_pool(x, k)
}

/// `(row_mean + col_mean) / 2` broadcast over the plane.
pub fn strip_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let rows = tape.row_mean(x)?;
    let cols = tape.col_mean(x)?;
    let sum = tape.add(rows, cols)?;
    tape.scale(sum, 0.5)
}

/// `y = x + z`, `z ~ N(mu, sigma)` drawn fresh per element; gradient passes
/// straight through.
pub fn noisy_identity(tape: &mut Tape, x: Var, cfg: &NoiseConfig, rng: &mut RngStream) -> Result<Var> {
    cfg.validate()?;
    if cfg.is_exact_identity() {
        return Ok(x);
    }
    let shape = tape.shape(x);
    let z: Vec<Real> = (0..shape.numel()).map(|_| rng.normal(cfg.mu, cfg.sigma)).collect();
    let z = tape.constant(Tensor::new(shape, z)?);
    tape.add(x, z)
}

pub fn zero_op(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.scale(x, 0.0)
}

pub fn apply_candidate(
    tape: &mut Tape,
    kind: OpKind,
    x: Var,
    noise: &NoiseConfig,
    rng: &mut RngStream,
) -> Result<Var> {
    match kind {
        OpKind::MaxPool3 | OpKind::MaxPool5 | OpKind::MaxPool7 => {
            max_pool_same(tape, x, kind.kernel().expect("pooling op"))
        }
        OpKind::AvgPool3 | OpKind::AvgPool5 | OpKind::AvgPool7 => {
            avg_pool_same(tape, x, kind.kernel().expect("pooling op"))
        }
        OpKind::StripPool => strip_pool(tape, x),
        OpKind::NoisyIdentity => noisy_identity(tape, x, noise, rng),
        OpKind::Zero => zero_op(tape, x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn run(kind: OpKind, x: &Tensor, noise: NoiseConfig) -> Tensor {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(0, "test");
        let v = tape.constant(x.clone());
        let y = apply_candidate(&mut tape, kind, v, &noise, &mut rng).unwrap();
        tape.value(y).clone()
    }

    fn impulse(h: usize, w: usize) -> Tensor {
        let mut x = Tensor::zeros([1, 1, h, w]);
        x.set(0, 0, h / 2, w / 2, 1.0);
        x
    }

    /// Input positions with nonzero gradient from output pixel (i, j).
    fn grad_support(kind: OpKind, x: &Tensor, i: usize, j: usize) -> Vec<(usize, usize)> {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(0, "test");
        let v = tape.leaf(x.clone().with_grad());
        let y = apply_candidate(&mut tape, kind, v, &NoiseConfig::OFF, &mut rng).unwrap();
        let s = tape.shape(y);
        let mut seed = vec![0.0; s.numel()];
        seed[s.index(0, 0, i, j)] = 1.0;
        tape.backward_with_seed(y, seed).unwrap();
        let g = tape.grad(v).unwrap();
        let mut out = Vec::new();
        for r in 0..s.h {
            for c in 0..s.w {
                if g[s.index(0, 0, r, c)] != 0.0 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    #[test]
    fn names_round_trip_and_order() {
        for (i, k) in OpKind::ALL.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(k.name().parse::<OpKind>().unwrap(), *k);
        }
        let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
        assert_eq!(names, ["max3", "max5", "max7", "avg3", "avg5", "avg7", "strip", "noisy_id", "zero"]);
        assert!("max9".parse::<OpKind>().is_err());
    }

    #[test]
    fn max3_impulse_response_is_centered_block() {
        let y = run(OpKind::MaxPool3, &impulse(5, 5), NoiseConfig::OFF);
        for i in 0..5 {
            for j in 0..5 {
                let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
                assert_eq!(y.at(0, 0, i, j), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn max_pool_on_single_pixel() {
        let x = Tensor::full([1, 2, 1, 1], -3.5);
        for k in [OpKind::MaxPool3, OpKind::MaxPool5, OpKind::MaxPool7] {
            assert_eq!(run(k, &x, NoiseConfig::OFF), x);
        }
    }

    #[test]
    fn avg_pool_exclude_pad() {
        let mut x = Tensor::zeros([1, 1, 3, 3]);
        x.set(0, 0, 1, 1, 9.0);
        let y = run(OpKind::AvgPool3, &x, NoiseConfig::OFF);
        assert_eq!(y.at(0, 0, 1, 1), 1.0);
        assert_eq!(y.at(0, 0, 0, 0), 2.25);
    }

    #[test]
    fn strip_pool_two_by_two() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = run(OpKind::StripPool, &x, NoiseConfig::OFF);
        assert_eq!(y.data(), &[1.75, 2.25, 2.75, 3.25]);
    }

    #[test]
    fn strip_gradient_is_a_cross() {
        let mut rng = RngStream::new(5, "x");
        let x = Tensor::new([1, 1, 6, 7], (0..42).map(|_| rng.uniform()).collect()).unwrap();
        let got = grad_support(OpKind::StripPool, &x, 0, 0);
        let mut want: Vec<(usize, usize)> =
            (0..6).flat_map(|r| (0..7).map(move |c| (r, c))).filter(|&(r, c)| r == 0 || c == 0).collect();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn noise_disabled_or_degenerate_is_exact_identity() {
        let x = Tensor::new([1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(run(OpKind::NoisyIdentity, &x, NoiseConfig::new(0.0, 0.0)), x);
        assert_eq!(run(OpKind::NoisyIdentity, &x, NoiseConfig { mu: 3.0, sigma: 2.0, enabled: false }), x);
    }

    #[test]
    fn negative_sigma_rejected() {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(0, "n");
        let v = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let err = noisy_identity(&mut tape, v, &NoiseConfig::new(0.0, -1.0), &mut rng);
        assert!(matches!(err, Err(Error::NegativeSigma(_))));
    }

    #[test]
    fn noise_moments_monte_carlo() {
        // 10⁶ draws through the operator itself.
        let x = Tensor::zeros([1, 1, 1000, 1000]);
        let y = run(OpKind::NoisyIdentity, &x, NoiseConfig::new(0.0, 2.0));
        let n = y.numel() as Real;
        let mean = y.data().iter().sum::<Real>() / n;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<Real>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 2.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn noise_gradient_is_straight_through() {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(0, "n");
        let v = tape.leaf(Tensor::zeros([1, 1, 3, 3]).with_grad());
        let y = noisy_identity(&mut tape, v, &NoiseConfig::new(0.0, 1.0), &mut rng).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(v).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn zero_is_zeros_and_blocks_gradient() {
        let x = Tensor::full([2, 3, 4, 5], 1.5);
        assert_eq!(run(OpKind::Zero, &x, NoiseConfig::OFF), Tensor::zeros([2, 3, 4, 5]));
        assert!(grad_support(OpKind::Zero, &Tensor::full([1, 1, 4, 4], 1.0), 2, 2).is_empty());
    }

    #[test]
    fn dispatch_is_transparent() {
        let x = impulse(7, 7);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let direct = max_pool_same(&mut tape, v, 3).unwrap();
        assert_eq!(&run(OpKind::MaxPool3, &x, NoiseConfig::OFF), tape.value(direct));
    }

    #[test]
    fn max_pool_gradcheck_tie_free() {
        // Distinct values spaced by 1e-2 so ±1e-4 never reorders a window.
        let mut rng = RngStream::new(11, "perm");
        let perm = rng.permutation(36);
        let x = Tensor::new([1, 1, 6, 6], perm.iter().map(|&p| p as Real * 1e-2).collect()).unwrap();
        let err = check_gradient(
            |tape, x| {
                let y = max_pool_same(tape, x, 3)?;
                tape.sum(y)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradient_support_geometry() {
        let mut rng = RngStream::new(2, "geom");
        let perm = rng.permutation(81);
        let x = Tensor::new([1, 1, 9, 9], perm.iter().map(|&p| p as Real).collect()).unwrap();
        for kind in [OpKind::AvgPool3, OpKind::AvgPool5, OpKind::AvgPool7] {
            let k = kind.kernel().unwrap();
            assert_eq!(grad_support(kind, &x, 4, 4).len(), k * k);
        }
        for kind in [OpKind::MaxPool3, OpKind::MaxPool5, OpKind::MaxPool7] {
            // A single output pixel routes to the argmax inside its k×k window.
            let k = kind.kernel().unwrap() as i64;
            let s = grad_support(kind, &x, 4, 4);
            assert_eq!(s.len(), 1);
            let (r, c) = s[0];
            assert!((r as i64 - 4).abs() <= k / 2 && (c as i64 - 4).abs() <= k / 2);
        }
        assert_eq!(grad_support(OpKind::NoisyIdentity, &x, 4, 4), vec![(4, 4)]);
        assert_eq!(grad_support(OpKind::StripPool, &x, 4, 4).len(), 9 + 9 - 1);
    }

    proptest! {
        #[test]
        fn shapes_preserved(h in 1usize..=16, w in 1usize..=16, c in 1usize..=3, k in 0usize..9) {
            let x = Tensor::full([1, c, h, w], 0.5);
            let y = run(OpKind::ALL[k], &x, NoiseConfig::new(0.0, 1.0));
            prop_assert_eq!(y.shape(), Shape::new(1, c, h, w));
        }

        #[test]
        fn constants_preserved(h in 1usize..=10, w in 1usize..=10, v in -5.0f64..5.0, k in 0usize..8) {
            let x = Tensor::full([1, 2, h, w], v);
            let y = run(OpKind::ALL[k], &x, NoiseConfig::OFF);
            for out in y.data() {
                prop_assert!((out - v).abs() < 1e-12);
            }
        }

        #[test]
        fn max_pool_monotone(
            base in proptest::collection::vec(-1.0f64..1.0, 49),
            bump in proptest::collection::vec(0.0f64..1.0, 49),
            k in 0usize..3,
        ) {
            let kind = OpKind::ALL[k];
            let x = Tensor::new([1, 1, 7, 7], base.clone()).unwrap();
            let x2 = Tensor::new([1, 1, 7, 7], base.iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
            let (y, y2) = (run(kind, &x, NoiseConfig::OFF), run(kind, &x2, NoiseConfig::OFF));
            for (a, b) in y.data().iter().zip(y2.data()) {
                prop_assert!(a <= b);
            }
        }
    }
}
