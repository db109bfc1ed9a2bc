//! Seeded parameter initializers. Each parameter draws from its own named
//! stream, so initial values do not depend on construction order.

use crate::rng::RngStream;
use crate::tensor::{Real, Shape, Tensor};

/// `U(-b, b)` with `b = gain · sqrt(3 / fan_in)`, fan-in = C·k·k.
pub fn uniform_fan_in(shape: impl Into<Shape>, gain: Real, seed: u64, name: &str) -> Tensor {
    let shape = shape.into();
    let fan_in = (shape.c * shape.h * shape.w).max(1) as Real;
    let bound = gain * (3.0 / fan_in).sqrt();
    let mut rng = RngStream::new(seed, &format!("init/{name}"));
    let data = (0..shape.numel()).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape, data).expect("numel matches")
}
