//! The adaptive receptive-field attention module.
//!
//! `x → reduce (1×1) → pooling DAG → expand (1×1) → u`, then a
//! squeeze-excite gate rescales `u` and the result is added to `x`.

mod genotype;

pub use genotype::{edge_count, edge_index, edge_pairs, Edge, Genotype, GENOTYPE_VERSION};
pub(crate) use genotype::key_value_lines;

use num_bigint::BigUint;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::candidates::{self, apply_candidate, noisy_identity, NoiseConfig, OpKind};
use crate::error::{Error, Result};
use crate::init::uniform_fan_in;
use crate::rng::RngStream;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ArfamConfig {
    /// DAG nodes, including the input node.
    pub n_nodes: usize,
    /// Channel reduction of the spatial bottleneck.
    pub r_spatial: usize,
    /// Reduction of the squeeze-excite hidden layer.
    pub r_channel: usize,
    pub candidates: Vec<OpKind>,
}

impl Default for ArfamConfig {
    fn default() -> Self {
        ArfamConfig { n_nodes: 4, r_spatial: 4, r_channel: 16, candidates: OpKind::ALL.to_vec() }
    }
}

impl ArfamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::Config(format!("n_nodes must be >= 2, got {}", self.n_nodes)));
        }
        if self.r_spatial == 0 || self.r_channel == 0 {
            return Err(Error::Config("reduction ratios must be >= 1".into()));
        }
        if self.candidates.is_empty() {
            return Err(Error::Config("empty candidate set".into()));
        }
        Ok(())
    }

    pub fn edges(&self) -> usize {
        edge_count(self.n_nodes)
    }

    pub fn reduced_channels(&self, c: usize) -> usize {
        (c / self.r_spatial).max(1)
    }

    pub fn se_hidden(&self, c: usize) -> usize {
        (c / self.r_channel).max(1)
    }
}

/// Architecture logits α, one row of `M` candidates per edge in (to, from)
/// order, stored as an `E×M×1×1` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedEdgeParams {
    pub n_nodes: usize,
    pub candidates: Vec<OpKind>,
    pub alpha: Tensor,
}

impl MixedEdgeParams {
    /// Uniform mixture: all logits zero.
    pub fn zeros(cfg: &ArfamConfig) -> Self {
        MixedEdgeParams {
            n_nodes: cfg.n_nodes,
            candidates: cfg.candidates.clone(),
            alpha: Tensor::zeros([cfg.edges(), cfg.candidates.len(), 1, 1]),
        }
    }

    pub fn from_rows(cfg: &ArfamConfig, rows: &[Vec<Real>]) -> Result<Self> {
        if rows.len() != cfg.edges() {
            return Err(Error::EdgeCountMismatch { expected: cfg.edges(), got: rows.len() });
        }
        let m = cfg.candidates.len();
        if let Some(r) = rows.iter().find(|r| r.len() != m) {
            return Err(Error::shape(format!("alpha row of {} entries for {m} candidates", r.len())));
        }
        let data = rows.concat();
        Ok(MixedEdgeParams {
            n_nodes: cfg.n_nodes,
            candidates: cfg.candidates.clone(),
            alpha: Tensor::new([rows.len(), m, 1, 1], data)?,
        })
    }

    pub fn edges(&self) -> usize {
        self.alpha.shape().n
    }

    pub fn row(&self, edge: usize) -> &[Real] {
        let m = self.candidates.len();
        &self.alpha.data()[edge * m..(edge + 1) * m]
    }

    /// Softmax of every row.
    pub fn mixture_weights(&self) -> Vec<Vec<Real>> {
        (0..self.edges())
            .map(|e| {
                let row = self.row(e);
                let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
                let exps: Vec<Real> = row.iter().map(|a| (a - max).exp()).collect();
                let z: Real = exps.iter().sum();
                exps.into_iter().map(|v| v / z).collect()
            })
            .collect()
    }
}

/// Per-edge argmax of α. Ties go to the lowest canonical [`OpKind`] index.
pub fn discretize(params: &MixedEdgeParams) -> Result<Genotype> {
    if !params.alpha.is_finite() {
        return Err(Error::NonFiniteAlpha);
    }
    let expected = edge_count(params.n_nodes);
    if params.edges() != expected {
        return Err(Error::EdgeCountMismatch { expected, got: params.edges() });
    }
    let ops: Vec<OpKind> = (0..params.edges())
        .map(|e| {
            let row = params.row(e);
            let mut best = 0;
            for (i, &a) in row.iter().enumerate().skip(1) {
                let (cur, cand) = (params.candidates[best], params.candidates[i]);
                if a > row[best] || (a == row[best] && cand.index() < cur.index()) {
                    best = i;
                }
            }
            params.candidates[best]
        })
        .collect();
    Genotype::with_candidates(params.n_nodes, params.candidates.clone(), &ops)
}

/// `M^(N(N−1)/2)`, exactly.
pub fn count_search_space(m: u32, n: u32) -> BigUint {
    let edges = n as u64 * (n as u64).saturating_sub(1) / 2;
    BigUint::from(m).pow(edges as u32)
}

/// Edges whose current argmax is the noisy identity.
pub fn skip_count(params: &MixedEdgeParams) -> Result<usize> {
    Ok(discretize(params)?.skip_count())
}

/// Mean skip count over a set of runs.
pub fn mean_skip_count(counts: &[usize]) -> Real {
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().sum::<usize>() as Real / counts.len() as Real
}

fn check_alpha(tape: &Tape, alpha: Var, cfg: &ArfamConfig) -> Result<()> {
    let s = tape.shape(alpha);
    if s.n != cfg.edges() {
        return Err(Error::EdgeCountMismatch { expected: cfg.edges(), got: s.n });
    }
    if s.c != cfg.candidates.len() || s.plane() != 1 {
        return Err(Error::shape(format!("alpha {s} for {} candidates", cfg.candidates.len())));
    }
    Ok(())
}

/// Sum of nodes `1..N`.
fn dag_output(tape: &mut Tape, nodes: &[Var]) -> Result<Var> {
    let mut out = nodes[1];
    for &n in &nodes[2..] {
        out = tape.add(out, n)?;
    }
    Ok(out)
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, term: Var) -> Result<Var> {
    match acc {
        Some(a) => tape.add(a, term),
        None => Ok(term),
    }
}

/// Relaxed DAG: every edge is the softmax(α)-weighted sum of all candidates.
pub fn spatial_forward_relaxed(
    tape: &mut Tape,
    x: Var,
    alpha: Var,
    cfg: &ArfamConfig,
    noise: &NoiseConfig,
    rng: &mut RngStream,
) -> Result<Var> {
    check_alpha(tape, alpha, cfg)?;
    noise.validate()?;
    let m = cfg.candidates.len();
    let weights = tape.softmax(alpha)?;
    let mut nodes = vec![x];
    // Deterministic candidate outputs depend only on the source node.
    let mut cache: Vec<Vec<Option<Var>>> = Vec::new();
    for to in 1..cfg.n_nodes {
        cache.push(vec![None; m]);
        let mut acc = None;
        for from in 0..to {
            let e = edge_index(from, to);
            for (slot, &op) in cfg.candidates.iter().enumerate() {
                // Zero contributes nothing and its weight has zero gradient.
                let out = match op {
                    OpKind::Zero => continue,
                    OpKind::NoisyIdentity => noisy_identity(tape, nodes[from], noise, rng)?,
                    _ => match cache[from][slot] {
                        Some(v) => v,
                        None => {
                            let v = apply_candidate(tape, op, nodes[from], noise, rng)?;
                            cache[from][slot] = Some(v);
                            v
                        }
                    },
                };
                let term = tape.scale_by(out, weights, e * m + slot)?;
                acc = Some(accumulate(tape, acc, term)?);
            }
        }
        let node = match acc {
            Some(v) => v,
            None => candidates::zero_op(tape, x)?,
        };
        nodes.push(node);
    }
    dag_output(tape, &nodes)
}

/// Discrete DAG: each edge applies its assigned operation; the identity is
/// noise-free.
pub fn spatial_forward_discrete(tape: &mut Tape, x: Var, genotype: &Genotype, cfg: &ArfamConfig) -> Result<Var> {
    if genotype.n_nodes != cfg.n_nodes {
        return Err(Error::GenotypeMismatch(format!(
            "genotype has {} nodes, module expects {}",
            genotype.n_nodes, cfg.n_nodes
        )));
    }
    let mut rng = RngStream::new(0, "unused");
    let mut nodes = vec![x];
    for to in 1..cfg.n_nodes {
        let mut acc = None;
        for from in 0..to {
            let op = genotype.op(from, to);
            if op == OpKind::Zero {
                continue;
            }
            let out = apply_candidate(tape, op, nodes[from], &NoiseConfig::OFF, &mut rng)?;
            acc = Some(accumulate(tape, acc, out)?);
        }
        let node = match acc {
            Some(v) => v,
            None => candidates::zero_op(tape, x)?,
        };
        nodes.push(node);
    }
    dag_output(tape, &nodes)
}

/// Channel descriptor: spatial mean per (sample, channel).
pub fn squeeze(tape: &mut Tape, u: Var) -> Result<Var> {
    tape.global_avg_pool(u)
}

/// Squeeze-excite weights: `w1` is `hidden×C`, `w2` is `C×hidden`, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct SEParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

/// `s = σ(W₂ · relu(W₁ · z))`.
pub fn excite(tape: &mut Tape, z: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = tape.linear(z, w1, None)?;
    let h = tape.relu(h)?;
    let s = tape.linear(h, w2, None)?;
    tape.sigmoid(s)
}

pub fn rescale(tape: &mut Tape, u: Var, s: Var) -> Result<Var> {
    tape.channel_mul(u, s)
}

/// How the pooling DAG is evaluated.
pub enum SpatialMode<'a> {
    Relaxed { alpha: Var, noise: NoiseConfig, rng: &'a mut RngStream },
    Discrete(&'a Genotype),
}

/// One module instance attached to a `channels`-wide feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Arfam {
    pub prefix: String,
    pub channels: usize,
    pub cfg: ArfamConfig,
}

impl Arfam {
    pub fn new(prefix: impl Into<String>, channels: usize, cfg: ArfamConfig) -> Self {
        Arfam { prefix: prefix.into(), channels, cfg }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn reduced(&self) -> usize {
        self.cfg.reduced_channels(self.channels)
    }

    pub fn hidden(&self) -> usize {
        self.cfg.se_hidden(self.channels)
    }

    /// Registers the module's weights. The expand conv starts at zero so the
    /// module is the identity map at initialization.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let (c, r, h) = (self.channels, self.reduced(), self.hidden());
        let reduce = self.name("reduce.weight");
        store.insert(&reduce, uniform_fan_in([r, c, 1, 1], 1.0, seed, &reduce));
        store.insert(self.name("expand.weight"), Tensor::zeros([c, r, 1, 1]));
        let w1 = self.name("se.w1");
        store.insert(&w1, uniform_fan_in([h, c, 1, 1], 1.0, seed, &w1));
        let w2 = self.name("se.w2");
        store.insert(&w2, uniform_fan_in([c, h, 1, 1], 1.0, seed, &w2));
    }

    /// Analytic weight count (all bias-free).
    pub fn param_count(&self) -> usize {
        let (c, r, h) = (self.channels, self.reduced(), self.hidden());
        2 * c * r + 2 * c * h
    }

    pub fn se_params(&self, store: &ParamStore) -> Option<SEParams> {
        Some(SEParams {
            w1: store.get(&self.name("se.w1"))?.clone(),
            w2: store.get(&self.name("se.w2"))?.clone(),
        })
    }

    /// The spatial branch `expand(dag(reduce(x)))`.
    pub fn branch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: &mut SpatialMode<'_>,
        trainable: bool,
    ) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.c != self.channels {
            return Err(Error::shape(format!("{} expects {} channels, got {xs}", self.prefix, self.channels)));
        }
        let reduce = store.bind(tape, &self.name("reduce.weight"), trainable)?;
        let expand = store.bind(tape, &self.name("expand.weight"), trainable)?;
        let xr = tape.conv2d(x, reduce, None, 1)?;
        let spatial = match mode {
            SpatialMode::Relaxed { alpha, noise, rng } => {
                spatial_forward_relaxed(tape, xr, *alpha, &self.cfg, noise, rng)?
            }
            SpatialMode::Discrete(g) => spatial_forward_discrete(tape, xr, g, &self.cfg)?,
        };
        tape.conv2d(spatial, expand, None, 1)
    }

    /// `x + rescale(u, excite(squeeze(u)))` with `u` the spatial branch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: &mut SpatialMode<'_>,
        trainable: bool,
    ) -> Result<Var> {
        let u = self.branch(tape, store, x, mode, trainable)?;
        let w1 = store.bind(tape, &self.name("se.w1"), trainable)?;
        let w2 = store.bind(tape, &self.name("se.w2"), trainable)?;
        let z = squeeze(tape, u)?;
        let s = excite(tape, z, w1, w2)?;
        let gated = rescale(tape, u, s)?;
        tape.add(x, gated)
    }
}

/// Shape of the α tensor for `cfg`.
pub fn alpha_shape(cfg: &ArfamConfig) -> Shape {
    Shape::from([cfg.edges(), cfg.candidates.len(), 1, 1])
}
