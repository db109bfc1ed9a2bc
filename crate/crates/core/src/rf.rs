//! Theoretical receptive fields of genotypes and empirical effective
//! receptive fields measured by gradient backprojection.

use std::fmt::{self, Write as _};

use rayon::prelude::*;

use crate::arfam::{spatial_forward_discrete, Arfam, ArfamConfig, Genotype, SpatialMode};
use crate::autodiff::{ParamStore, Tape};
use crate::candidates::OpKind;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

pub const PROFILE_VERSION: u32 = 1;
/// Inputs averaged by [`erf_averaged`] unless told otherwise.
pub const DEFAULT_ERF_SAMPLES: usize = 16;
/// Spike added on top of the U(0,1) background when probing a pixel.
pub const PROBE_SPIKE: Real = 1e9;

/// Support of one node relative to the output position. Extents are odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfKind {
    Empty,
    Box { h: usize, w: usize },
    /// A full-width band of `band_h` rows, a full-height band of `band_w`
    /// columns, and optionally a centred box sticking out of both.
    Cross { band_h: usize, band_w: usize, core: Option<(usize, usize)> },
    Global,
}

impl RfKind {
    pub const POINT: RfKind = RfKind::Box { h: 1, w: 1 };

    fn cross(band_h: usize, band_w: usize, core: Option<(usize, usize)>) -> RfKind {
        let core = core.filter(|&(h, w)| h > band_h && w > band_w);
        RfKind::Cross { band_h, band_w, core }
    }

    /// Stride-1 `k×k` max or average pooling.
    pub fn pool(self, k: usize) -> RfKind {
        let g = k - 1;
        match self {
            RfKind::Box { h, w } => RfKind::Box { h: h + g, w: w + g },
            RfKind::Cross { band_h, band_w, core } => {
                RfKind::cross(band_h + g, band_w + g, core.map(|(h, w)| (h + g, w + g)))
            }
            other => other,
        }
    }

    /// Row-mean plus column-mean pooling.
    pub fn strip(self) -> RfKind {
        match self {
            RfKind::Empty => RfKind::Empty,
            RfKind::Box { h, w } => RfKind::cross(h, w, None),
            _ => RfKind::Global,
        }
    }

    pub fn apply(self, op: OpKind) -> RfKind {
        match op {
            OpKind::Zero => RfKind::Empty,
            OpKind::NoisyIdentity => self,
            OpKind::StripPool => self.strip(),
            _ => self.pool(op.kernel().expect("pooling op")),
        }
    }

    /// Union of supports. The flag is false when the result had to be
    /// widened to a bounding shape.
    pub fn union(self, other: RfKind) -> (RfKind, bool) {
        use RfKind::*;
        match (self, other) {
            (Empty, x) | (x, Empty) => (x, true),
            (Global, _) | (_, Global) => (Global, true),
            (Box { h: h1, w: w1 }, Box { h: h2, w: w2 }) => {
                let nested = (h1 <= h2 && w1 <= w2) || (h2 <= h1 && w2 <= w1);
                (Box { h: h1.max(h2), w: w1.max(w2) }, nested)
            }
            (Cross { band_h, band_w, core }, Box { h, w }) | (Box { h, w }, Cross { band_h, band_w, core }) => {
                let (core, exact) = union_core(core, Some((h, w)), band_h, band_w);
                (RfKind::cross(band_h, band_w, core), exact)
            }
            (Cross { band_h: a, band_w: b, core: c1 }, Cross { band_h: p, band_w: q, core: c2 }) => {
                let (bh, bw) = (a.max(p), b.max(q));
                let (core, exact) = union_core(c1, c2, bh, bw);
                (RfKind::cross(bh, bw, core), exact)
            }
        }
    }

    /// Centred extents for boxes; `None` for crosses and global supports.
    pub fn extent(&self) -> Option<(usize, usize)> {
        match *self {
            RfKind::Box { h, w } => Some((h, w)),
            RfKind::Empty => Some((0, 0)),
            _ => None,
        }
    }

    pub fn contains(&self, di: isize, dj: isize) -> bool {
        let inside = |e: usize, d: isize| d.unsigned_abs() <= e / 2;
        match *self {
            RfKind::Empty => false,
            RfKind::Global => true,
            RfKind::Box { h, w } => inside(h, di) && inside(w, dj),
            RfKind::Cross { band_h, band_w, core } => {
                inside(band_h, di) || inside(band_w, dj) || core.is_some_and(|(h, w)| inside(h, di) && inside(w, dj))
            }
        }
    }

    /// Support mask over an `h×w` image for the output at `center`.
    pub fn support(&self, hw: (usize, usize), center: (usize, usize)) -> Vec<bool> {
        let (h, w) = hw;
        let mut out = vec![false; h * w];
        for i in 0..h {
            for j in 0..w {
                out[i * w + j] = self.contains(i as isize - center.0 as isize, j as isize - center.1 as isize);
            }
        }
        out
    }
}

/// Unions two optional cores that stick out of bands `bh×bw`.
fn union_core(a: Option<(usize, usize)>, b: Option<(usize, usize)>, bh: usize, bw: usize) -> (Option<(usize, usize)>, bool) {
    let sticks_out = |c: &(usize, usize)| c.0 > bh && c.1 > bw;
    match (a.filter(sticks_out), b.filter(sticks_out)) {
        (None, x) | (x, None) => (x, true),
        (Some((h1, w1)), Some((h2, w2))) => {
            let nested = (h1 <= h2 && w1 <= w2) || (h2 <= h1 && w2 <= w1);
            (Some((h1.max(h2), w1.max(w2))), nested)
        }
    }
}

impl fmt::Display for RfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RfKind::Empty => write!(f, "empty"),
            RfKind::Global => write!(f, "global"),
            RfKind::Box { h, w } => write!(f, "box {h} {w}"),
            RfKind::Cross { band_h, band_w, core: None } => write!(f, "cross {band_h} {band_w}"),
            RfKind::Cross { band_h, band_w, core: Some((h, w)) } => write!(f, "cross {band_h} {band_w} core {h} {w}"),
        }
    }
}

/// Theoretical receptive field of every DAG node and of the module output.
#[derive(Clone, Debug, PartialEq)]
pub struct RfProfile {
    pub input_hw: (usize, usize),
    pub nodes: Vec<RfKind>,
    pub output: RfKind,
    /// False if some union was widened to a bounding shape.
    pub exact: bool,
}

impl RfProfile {
    /// Structured-text export.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "version = {PROFILE_VERSION}").unwrap();
        writeln!(out, "input_hw = {} {}", self.input_hw.0, self.input_hw.1).unwrap();
        writeln!(out, "exact = {}", self.exact).unwrap();
        for (i, n) in self.nodes.iter().enumerate() {
            writeln!(out, "node = {i} {n}").unwrap();
        }
        writeln!(out, "output = {}", self.output).unwrap();
        out
    }
}

pub fn theoretical_rf(genotype: &Genotype, input_hw: (usize, usize)) -> Result<RfProfile> {
    if genotype.n_nodes < 2 {
        return Err(Error::InvalidGenotype("need at least 2 nodes".into()));
    }
    let mut exact = true;
    let mut nodes = vec![RfKind::POINT];
    for to in 1..genotype.n_nodes {
        let mut acc = RfKind::Empty;
        for from in 0..to {
            let (u, ok) = acc.union(nodes[from].apply(genotype.op(from, to)));
            acc = u;
            exact &= ok;
        }
        nodes.push(acc);
    }
    let mut output = RfKind::Empty;
    for n in &nodes[1..] {
        let (u, ok) = output.union(*n);
        output = u;
        exact &= ok;
    }
    Ok(RfProfile { input_hw, nodes, output, exact })
}

/// What the gradient is taken through.
#[derive(Clone, Copy)]
pub enum ErfTarget<'a> {
    /// The pooling DAG alone, evaluated on a single channel.
    Spatial(&'a Genotype),
    Module { module: &'a Arfam, store: &'a ParamStore, genotype: &'a Genotype },
    Network { model: &'a Model, store: &'a ParamStore, genotype: Option<&'a Genotype> },
}

/// Absolute input-gradient magnitudes for one output unit, summed over
/// input channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap {
    pub h: usize,
    pub w: usize,
    pub grid: Vec<Real>,
    pub center: (usize, usize),
}

impl ErfMap {
    pub fn at(&self, i: usize, j: usize) -> Real {
        self.grid[i * self.w + j]
    }

    pub fn support(&self) -> Vec<bool> {
        self.grid.iter().map(|&v| v != 0.0).collect()
    }

    pub fn total(&self) -> Real {
        self.grid.iter().sum()
    }

    /// Rows and columns that hold at least one nonzero entry.
    pub fn touched(&self) -> (Vec<bool>, Vec<bool>) {
        let mut rows = vec![false; self.h];
        let mut cols = vec![false; self.w];
        for i in 0..self.h {
            for j in 0..self.w {
                if self.at(i, j) != 0.0 {
                    rows[i] = true;
                    cols[j] = true;
                }
            }
        }
        (rows, cols)
    }

    /// Height and width of the bounding box of the support.
    pub fn extent(&self) -> (usize, usize) {
        let (rows, cols) = self.touched();
        let span = |v: &[bool]| match (v.iter().position(|&b| b), v.iter().rposition(|&b| b)) {
            (Some(a), Some(b)) => b - a + 1,
            _ => 0,
        };
        (span(&rows), span(&cols))
    }

    /// Plain-text P2 graymap scaled so the maximum maps to 65535.
    pub fn to_pgm(&self) -> String {
        let max = self.grid.iter().copied().fold(0.0, Real::max);
        let mut out = format!("P2\n{} {}\n65535\n", self.w, self.h);
        for row in self.grid.chunks(self.w) {
            let line: Vec<String> = row
                .iter()
                .map(|&v| if max > 0.0 { ((v / max) * 65535.0).round() as u32 } else { 0 }.to_string())
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,magnitude\n");
        for i in 0..self.h {
            for j in 0..self.w {
                writeln!(out, "{i},{j},{}", self.at(i, j)).unwrap();
            }
        }
        out
    }
}

/// A `C=1` module whose reduce and expand convs are the identity and whose
/// gate is the constant 1/2, so its ERF is the residual pixel plus the DAG's.
pub fn probe_module(cfg: &ArfamConfig) -> (Arfam, ParamStore) {
    let m = Arfam::new("probe", 1, cfg.clone());
    let mut store = ParamStore::new();
    store.insert("probe.reduce.weight", Tensor::full([1, 1, 1, 1], 1.0));
    store.insert("probe.expand.weight", Tensor::full([1, 1, 1, 1], 1.0));
    store.insert("probe.se.w1", Tensor::zeros([1, 1, 1, 1]));
    store.insert("probe.se.w2", Tensor::zeros([1, 1, 1, 1]));
    (m, store)
}

/// Backpropagates a unit seed at `out_pos = (channel, row, col)` of the
/// first sample.
pub fn compute_erf(target: ErfTarget<'_>, input: &Tensor, out_pos: (usize, usize, usize)) -> Result<ErfMap> {
    let s = input.shape();
    if s.n != 1 {
        return Err(Error::shape(format!("ERF input must hold one sample, got {s}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().with_grad());
    let y = match target {
        ErfTarget::Spatial(g) => {
            let cfg = ArfamConfig { n_nodes: g.n_nodes, ..ArfamConfig::default() };
            spatial_forward_discrete(&mut tape, x, g, &cfg)?
        }
        ErfTarget::Module { module, store, genotype } => {
            module.forward(&mut tape, store, x, &mut SpatialMode::Discrete(genotype), false)?
        }
        ErfTarget::Network { model, store, genotype } => match genotype {
            Some(g) => model.forward(&mut tape, store, x, Some(&mut SpatialMode::Discrete(g)), false)?,
            None => model.forward(&mut tape, store, x, None, false)?,
        },
    };
    let ys = tape.shape(y);
    let (c, i, j) = out_pos;
    if c >= ys.c || i >= ys.h || j >= ys.w {
        return Err(Error::OutOfBoundsPosition(out_pos));
    }
    let mut seed = vec![0.0; ys.numel()];
    seed[ys.index(0, c, i, j)] = 1.0;
    tape.backward_with_seed(y, seed)?;
    let g = tape.grad(x).map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; s.numel()]);
    let mut grid = vec![0.0; s.plane()];
    for ch in g.chunks(s.plane()) {
        grid.iter_mut().zip(ch).for_each(|(a, b)| *a += b.abs());
    }
    // A spatial output position maps to the same input pixel; logits have none.
    let center = if ys.plane() == 1 { (s.h / 2, s.w / 2) } else { (i, j) };
    Ok(ErfMap { h: s.h, w: s.w, grid, center })
}

fn uniform_input(shape: [usize; 4], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform()).collect()).expect("sized")
}

/// Number of input channels a target expects.
fn target_channels(target: &ErfTarget<'_>) -> usize {
    match target {
        ErfTarget::Spatial(_) => 1,
        ErfTarget::Module { module, .. } => module.channels,
        ErfTarget::Network { model, .. } => model.spec.in_channels,
    }
}

/// Mean ERF over `n` seeded U(0,1) inputs.
pub fn erf_averaged(
    target: ErfTarget<'_>,
    hw: (usize, usize),
    out_pos: (usize, usize, usize),
    n: usize,
    seed: u64,
) -> Result<ErfMap> {
    let c = target_channels(&target);
    let mut rng = RngStream::new(seed, "erf/inputs");
    let inputs: Vec<Tensor> = (0..n.max(1)).map(|_| uniform_input([1, c, hw.0, hw.1], &mut rng)).collect();
    let maps: Vec<ErfMap> = inputs.par_iter().map(|x| compute_erf(target, x, out_pos)).collect::<Result<_>>()?;
    let mut out = maps[0].clone();
    for m in &maps[1..] {
        out.grid.iter_mut().zip(&m.grid).for_each(|(a, b)| *a += b);
    }
    let k = maps.len() as Real;
    out.grid.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

/// Union of single-input gradient supports over `x` and every one-pixel
/// spike probe of it. Recovers the full dependency set of max-pooling
/// paths, which route a single input's gradient to window maxima only.
pub fn probed_support(genotype: &Genotype, x: &Tensor, out_pos: (usize, usize)) -> Result<ErfMap> {
    let target = ErfTarget::Spatial(genotype);
    let base = compute_erf(target, x, (0, out_pos.0, out_pos.1))?;
    let probes: Vec<Vec<bool>> = (0..x.numel())
        .into_par_iter()
        .map(|p| {
            let mut xp = x.clone();
            xp.data_mut()[p] += PROBE_SPIKE;
            Ok(compute_erf(target, &xp, (0, out_pos.0, out_pos.1))?.support())
        })
        .collect::<Result<_>>()?;
    let mut out = base.clone();
    for (i, v) in out.grid.iter_mut().enumerate() {
        *v = if base.grid[i] != 0.0 || probes.iter().any(|s| s[i]) { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Smallest Chebyshev radius around the centre holding `mass` of the total.
pub fn erf_radius(map: &ErfMap, mass: Real) -> Result<usize> {
    let total = map.total();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::ZeroMass);
    }
    let target = mass * total * (1.0 - 1e-12);
    let (ci, cj) = (map.center.0 as isize, map.center.1 as isize);
    let max_r = map.h.max(map.w);
    for r in 0..=max_r {
        let ri = r as isize;
        let mut inside = 0.0;
        for i in (ci - ri).max(0)..=(ci + ri).min(map.h as isize - 1) {
            for j in (cj - ri).max(0)..=(cj + ri).min(map.w as isize - 1) {
                inside += map.at(i as usize, j as usize);
            }
        }
        if inside >= target {
            return Ok(r);
        }
    }
    Ok(max_r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RfMismatch {
    pub trial: usize,
    pub out_pos: (usize, usize),
    pub pixel: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RfReport {
    pub trials: usize,
    /// Pixels with gradient outside the theoretical support.
    pub containment: Vec<RfMismatch>,
    /// Theoretical pixels never reached by any probe.
    pub equality: Vec<RfMismatch>,
    pub equality_checked: bool,
}

impl RfReport {
    pub fn passed(&self) -> bool {
        self.containment.is_empty() && self.equality.is_empty()
    }
}

/// Only pooling, identity and zero edges.
pub fn is_box_only(g: &Genotype) -> bool {
    g.ops().iter().all(|&op| op != OpKind::StripPool)
}

/// Empirical-versus-theoretical receptive-field check of the pooling DAG.
///
/// Every trial draws a U(0,1) input and an output position (the centre on
/// trial 0). The single-input gradient support must lie inside the
/// theoretical support. Max pooling sends gradient only to window maxima, so
/// equality is checked on the union over probe inputs that add a large spike
/// to one theoretical pixel at a time; all Jacobian entries are nonnegative,
/// so nothing cancels.
pub fn verify_rf(genotype: &Genotype, input_hw: (usize, usize), trials: usize, seed: u64) -> Result<RfReport> {
    let profile = theoretical_rf(genotype, input_hw)?;
    let (h, w) = input_hw;
    let mut rng = RngStream::new(seed, "verify_rf");
    let mut report = RfReport { trials, containment: vec![], equality: vec![], equality_checked: profile.exact };
    for trial in 0..trials.max(1) {
        let pos = if trial == 0 { (h / 2, w / 2) } else { (rng.below(h), rng.below(w)) };
        let theory = profile.output.support(input_hw, pos);
        let x = uniform_input([1, 1, h, w], &mut rng);
        let target = ErfTarget::Spatial(genotype);
        let erf = compute_erf(target, &x, (0, pos.0, pos.1))?;
        for (p, (&e, &t)) in erf.support().iter().zip(&theory).enumerate() {
            if e && !t {
                report.containment.push(RfMismatch { trial, out_pos: pos, pixel: (p / w, p % w) });
            }
        }
        if !profile.exact {
            continue;
        }
        let probes: Vec<usize> = (0..h * w).filter(|&p| theory[p]).collect();
        let reached: Vec<(usize, bool, Vec<usize>)> = probes
            .par_iter()
            .map(|&p| {
                let mut xp = x.clone();
                xp.data_mut()[p] += PROBE_SPIKE;
                let m = compute_erf(target, &xp, (0, pos.0, pos.1))?;
                let outside = m.support().iter().zip(&theory).enumerate().filter(|(_, (&e, &t))| e && !t).map(|(q, _)| q).collect();
                Ok((p, m.grid[p] != 0.0, outside))
            })
            .collect::<Result<_>>()?;
        for (p, hit, outside) in reached {
            if !hit {
                report.equality.push(RfMismatch { trial, out_pos: pos, pixel: (p / w, p % w) });
            }
            for q in outside {
                report.containment.push(RfMismatch { trial, out_pos: pos, pixel: (q / w, q % w) });
            }
        }
    }
    Ok(report)
}
