//! Discrete architectures and their text format.
//!
//! ```text
//! version = 1
//! n_nodes = 3
//! candidate_set = max3,max5,max7,avg3,avg5,avg7,strip,noisy_id,zero
//! edge = 0 1 max3
//! edge = 0 2 zero
//! edge = 1 2 max3
//! ```
//!
//! Fields appear in exactly this order; edges are written sorted by
//! (to, from) and may be read in any order.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::candidates::OpKind;
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const GENOTYPE_VERSION: u32 = 1;

/// Number of edges of a fully connected DAG on `n_nodes` nodes.
pub fn edge_count(n_nodes: usize) -> usize {
    n_nodes * n_nodes.saturating_sub(1) / 2
}

/// Position of edge `from → to` in (to, from) order.
pub fn edge_index(from: usize, to: usize) -> usize {
    debug_assert!(from < to);
    to * (to - 1) / 2 + from
}

/// All `(from, to)` pairs in (to, from) order.
pub fn edge_pairs(n_nodes: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..n_nodes).flat_map(|to| (0..to).map(move |from| (from, to)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub op: OpKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genotype {
    pub version: u32,
    pub n_nodes: usize,
    pub candidates: Vec<OpKind>,
    edges: Vec<Edge>,
}

impl Genotype {
    /// Builds a genotype from one op per edge in (to, from) order.
    pub fn from_ops(n_nodes: usize, ops: &[OpKind]) -> Result<Self> {
        Self::with_candidates(n_nodes, OpKind::ALL.to_vec(), ops)
    }

    pub fn with_candidates(n_nodes: usize, candidates: Vec<OpKind>, ops: &[OpKind]) -> Result<Self> {
        if n_nodes < 2 {
            return Err(Error::InvalidGenotype(format!("need at least 2 nodes, got {n_nodes}")));
        }
        if ops.len() != edge_count(n_nodes) {
            return Err(Error::EdgeCountMismatch { expected: edge_count(n_nodes), got: ops.len() });
        }
        if let Some(op) = ops.iter().find(|op| !candidates.contains(op)) {
            return Err(Error::InvalidGenotype(format!("`{op}` is not in the candidate set")));
        }
        let edges = edge_pairs(n_nodes).zip(ops).map(|((from, to), &op)| Edge { from, to, op }).collect();
        Ok(Genotype { version: GENOTYPE_VERSION, n_nodes, candidates, edges })
    }

    /// Every edge carries `op`.
    pub fn uniform(n_nodes: usize, op: OpKind) -> Result<Self> {
        Self::from_ops(n_nodes, &vec![op; edge_count(n_nodes)])
    }

    /// `op` on each edge `i → i+1`, `Zero` elsewhere.
    pub fn chain(n_nodes: usize, op: OpKind) -> Result<Self> {
        let ops: Vec<OpKind> = edge_pairs(n_nodes)
            .map(|(f, t)| if t == f + 1 { op } else { OpKind::Zero })
            .collect();
        Self::from_ops(n_nodes, &ops)
    }

    /// Parallel max pooling of growing kernels from the input node
    /// (a spatial-pyramid pattern): `0 → j` uses the j-th max kernel.
    pub fn spp_like() -> Self {
        let mut ops = vec![OpKind::Zero; edge_count(4)];
        ops[edge_index(0, 1)] = OpKind::MaxPool3;
        ops[edge_index(0, 2)] = OpKind::MaxPool5;
        ops[edge_index(0, 3)] = OpKind::MaxPool7;
        Self::from_ops(4, &ops).expect("valid")
    }

    /// Strip pooling of the input plus an identity shortcut.
    pub fn strip_like() -> Self {
        let mut ops = vec![OpKind::Zero; edge_count(4)];
        ops[edge_index(0, 1)] = OpKind::StripPool;
        ops[edge_index(0, 2)] = OpKind::NoisyIdentity;
        Self::from_ops(4, &ops).expect("valid")
    }

    /// Uniformly random op per edge from `candidates`.
    pub fn random(n_nodes: usize, candidates: &[OpKind], rng: &mut RngStream) -> Result<Self> {
        let ops: Vec<OpKind> =
            (0..edge_count(n_nodes)).map(|_| candidates[rng.below(candidates.len())]).collect();
        Self::with_candidates(n_nodes, OpKind::ALL.to_vec(), &ops)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn op(&self, from: usize, to: usize) -> OpKind {
        self.edges[edge_index(from, to)].op
    }

    pub fn ops(&self) -> Vec<OpKind> {
        self.edges.iter().map(|e| e.op).collect()
    }

    pub fn skip_count(&self) -> usize {
        self.edges.iter().filter(|e| e.op == OpKind::NoisyIdentity).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "n_nodes = {}", self.n_nodes);
        let names: Vec<&str> = self.candidates.iter().map(|k| k.name()).collect();
        let _ = writeln!(s, "candidate_set = {}", names.join(","));
        for e in &self.edges {
            let _ = writeln!(s, "edge = {} {} {}", e.from, e.to, e.op);
        }
        s
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Splits `key = value`, skipping blanks and `#` comments.
pub(crate) fn key_value_lines(text: &str) -> impl Iterator<Item = Result<(usize, &str, &str)>> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        Some(match line.split_once('=') {
            Some((k, v)) => Ok((i + 1, k.trim(), v.trim())),
            None => Err(Error::parse(i + 1, format!("expected `key = value`, got `{line}`"))),
        })
    })
}

impl FromStr for Genotype {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut version = None;
        let mut n_nodes: Option<usize> = None;
        let mut candidates: Option<Vec<OpKind>> = None;
        let mut slots: Vec<Option<OpKind>> = Vec::new();
        for item in key_value_lines(text) {
            let (line, key, value) = item?;
            let perr = |m: String| Error::parse(line, m);
            match key {
                "version" => {
                    if version.is_some() {
                        return Err(perr("duplicate `version`".into()));
                    }
                    let v: u32 = value.parse().map_err(|_| perr(format!("bad version `{value}`")))?;
                    if v != GENOTYPE_VERSION {
                        return Err(perr(format!("unsupported version {v}")));
                    }
                    version = Some(v);
                }
                "n_nodes" => {
                    if version.is_none() || n_nodes.is_some() {
                        return Err(perr("`n_nodes` must follow `version` exactly once".into()));
                    }
                    let n: usize = value.parse().map_err(|_| perr(format!("bad n_nodes `{value}`")))?;
                    if n < 2 {
                        return Err(perr(format!("n_nodes must be at least 2, got {n}")));
                    }
                    n_nodes = Some(n);
                    slots = vec![None; edge_count(n)];
                }
                "candidate_set" => {
                    if n_nodes.is_none() || candidates.is_some() {
                        return Err(perr("`candidate_set` must follow `n_nodes` exactly once".into()));
                    }
                    let set = value
                        .split(',')
                        .map(|s| s.trim().parse::<OpKind>().map_err(perr))
                        .collect::<Result<Vec<_>>>()?;
                    let mut dedup = set.clone();
                    dedup.sort();
                    dedup.dedup();
                    if dedup.len() != set.len() || set.is_empty() {
                        return Err(perr("candidate_set must be nonempty without repeats".into()));
                    }
                    candidates = Some(set);
                }
                "edge" => {
                    let (Some(n), Some(set)) = (n_nodes, candidates.as_ref()) else {
                        return Err(perr("`edge` before `candidate_set`".into()));
                    };
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    let [from, to, op] = parts[..] else {
                        return Err(perr(format!("edge needs `from to op`, got `{value}`")));
                    };
                    let from: usize = from.parse().map_err(|_| perr(format!("bad node `{from}`")))?;
                    let to: usize = to.parse().map_err(|_| perr(format!("bad node `{to}`")))?;
                    let op: OpKind = op.parse().map_err(perr)?;
                    if from >= to || to >= n {
                        return Err(perr(format!("edge {from}->{to} is not a forward edge of {n} nodes")));
                    }
                    if !set.contains(&op) {
                        return Err(perr(format!("`{op}` is not in the candidate set")));
                    }
                    let slot = &mut slots[edge_index(from, to)];
                    if slot.is_some() {
                        return Err(perr(format!("duplicate edge {from}->{to}")));
                    }
                    *slot = Some(op);
                }
                other => return Err(perr(format!("unknown field `{other}`"))),
            }
        }
        let (Some(n), Some(set)) = (n_nodes, candidates) else {
            return Err(Error::InvalidGenotype("missing version, n_nodes or candidate_set".into()));
        };
        let ops = slots
            .iter()
            .zip(edge_pairs(n))
            .map(|(s, (f, t))| s.ok_or_else(|| Error::InvalidGenotype(format!("missing edge {f}->{t}"))))
            .collect::<Result<Vec<_>>>()?;
        Genotype::with_candidates(n, set, &ops)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn edge_indexing_is_to_then_from() {
        let pairs: Vec<_> = edge_pairs(4).collect();
        assert_eq!(pairs, [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]);
        for (i, (f, t)) in pairs.into_iter().enumerate() {
            assert_eq!(edge_index(f, t), i);
        }
    }

    #[test]
    fn text_layout() {
        let g = Genotype::chain(3, OpKind::MaxPool3).unwrap();
        assert_eq!(
            g.to_text(),
            "version = 1\nn_nodes = 3\ncandidate_set = max3,max5,max7,avg3,avg5,avg7,strip,noisy_id,zero\n\
             edge = 0 1 max3\nedge = 0 2 zero\nedge = 1 2 max3\n"
        );
    }

    #[test]
    fn edges_may_arrive_unsorted() {
        let text = "version = 1\nn_nodes = 3\ncandidate_set = max3,zero\n# comment\n\
                    edge = 1 2 max3\nedge = 0 2 zero\nedge = 0 1 max3\n";
        let g: Genotype = text.parse().unwrap();
        assert_eq!(g.ops(), [OpKind::MaxPool3, OpKind::Zero, OpKind::MaxPool3]);
        assert_eq!(g.candidates, [OpKind::MaxPool3, OpKind::Zero]);
    }

    #[test]
    fn rejects_bad_documents() {
        let head = "version = 1\nn_nodes = 2\ncandidate_set = max3,zero\n";
        let cases = [
            format!("{head}edge = 0 1 max9\n"),
            format!("{head}edge = 0 1 max3\nedge = 0 1 zero\n"),
            format!("{head}edge = 0 1 avg3\n"),
            format!("{head}edge = 1 0 max3\n"),
            format!("{head}edge = 0 2 max3\n"),
            head.to_string(),
            format!("{head}edge = 0 1 max3\ncolour = red\n"),
            "n_nodes = 2\nversion = 1\ncandidate_set = zero\nedge = 0 1 zero\n".into(),
            "version = 2\nn_nodes = 2\ncandidate_set = zero\nedge = 0 1 zero\n".into(),
            "version = 1\nn_nodes = 1\ncandidate_set = zero\n".into(),
            "version = 1\nn_nodes = 2\ncandidate_set = zero,zero\nedge = 0 1 zero\n".into(),
            "version = 1\nn_nodes = 2\nthis line has no separator\n".into(),
        ];
        for text in &cases {
            assert!(text.parse::<Genotype>().is_err(), "accepted:\n{text}");
        }
    }

    #[test]
    fn named_baselines() {
        assert_eq!(Genotype::spp_like().skip_count(), 0);
        assert_eq!(Genotype::strip_like().skip_count(), 1);
        assert_eq!(Genotype::uniform(4, OpKind::NoisyIdentity).unwrap().skip_count(), 6);
    }

    proptest! {
        #[test]
        fn text_round_trip(n in 2usize..7, seed in any::<u64>()) {
            let mut rng = RngStream::new(seed, "g");
            let g = Genotype::random(n, &OpKind::ALL, &mut rng).unwrap();
            let back: Genotype = g.to_text().parse().unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(back.to_text(), g.to_text());
        }
    }
}
