//! Cell-style architecture encoding: a DAG over `L` layers stored as a binary
//! adjacency matrix plus a one-hot operation matrix.
//!
//! Adjacency entry `[i][j] = 1` means the output of layer `i` feeds layer `j`.
//! Stored architectures are strictly upper-triangular, so every encodable
//! graph is acyclic. Only [`permute`] produces matrices outside that form, and
//! those are meant for the predictor, never for a population.
//!
//! The text form used by benchmark files is
//!
//! ```text
//! L d | <upper-triangular adjacency bits, row-major> | <op index per layer>
//! ```
//!
//! e.g. `3 2 | 101 | 0 1 1`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

/// Rejection-sampling cap for [`random_architecture`].
pub const RANDOM_ATTEMPTS: usize = 1000;
/// Re-run cap for [`mutate`] and [`crossover`] before falling back to a fresh draw.
pub const OPERATOR_ATTEMPTS: usize = 100;
/// Default refusal threshold for [`enumerate`], in raw encodings.
pub const DEFAULT_ENUMERATION_LIMIT: u128 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpaceError {
    #[error("invalid space: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },
    #[error("matrix entries must be 0 or 1")]
    NonBinary,
    #[error("space too constrained: no valid architecture after {0} attempts")]
    TooConstrained(usize),
    #[error(
        "space has {count} raw encodings, above the enumeration limit {limit}; use random_architecture instead"
    )]
    TooLarge { count: u128, limit: u128 },
    #[error("not a permutation of 0..{0}")]
    InvalidPermutation(usize),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Shape and constraints of a search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpaceSpec {
    num_layers: usize,
    num_ops: usize,
    max_edges: usize,
    single_source_sink: bool,
}

impl SpaceSpec {
    /// `max_edges == 0` means no edge budget.
    pub fn new(
        num_layers: usize,
        num_ops: usize,
        max_edges: usize,
        single_source_sink: bool,
    ) -> Result<Self, SpaceError> {
        if num_layers < 2 {
            return Err(SpaceError::InvalidSpec(format!(
                "num_layers must be >= 2, got {num_layers}"
            )));
        }
        if num_layers > 64 {
            return Err(SpaceError::InvalidSpec(format!(
                "num_layers must be <= 64, got {num_layers}"
            )));
        }
        if num_ops < 1 {
            return Err(SpaceError::InvalidSpec("num_ops must be >= 1".into()));
        }
        let slots = num_layers * (num_layers - 1) / 2;
        if max_edges > slots {
            return Err(SpaceError::InvalidSpec(format!(
                "max_edges {max_edges} exceeds the {slots} available edge slots"
            )));
        }
        Ok(Self {
            num_layers,
            num_ops,
            max_edges,
            single_source_sink,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_ops(&self) -> usize {
        self.num_ops
    }

    pub fn max_edges(&self) -> usize {
        self.max_edges
    }

    pub fn single_source_sink(&self) -> bool {
        self.single_source_sink
    }

    /// Number of strictly upper-triangular adjacency slots, `L(L-1)/2`.
    pub fn edge_slots(&self) -> usize {
        self.num_layers * (self.num_layers - 1) / 2
    }

    /// `2^(L(L-1)/2) * d^L`, saturating.
    pub fn raw_encoding_count(&self) -> u128 {
        let adj = 1u128.checked_shl(self.edge_slots() as u32).unwrap_or(u128::MAX);
        let ops = (self.num_ops as u128)
            .checked_pow(self.num_layers as u32)
            .unwrap_or(u128::MAX);
        adj.saturating_mul(ops)
    }
}

/// A network architecture `(A, X)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    num_layers: usize,
    num_ops: usize,
    adjacency: Vec<u8>,
    features: Vec<u8>,
}

impl Architecture {
    /// Builds from nested matrices. Rows must be rectangular and binary; the
    /// remaining rules are checked by [`validate`].
    pub fn from_matrices(adjacency: &[Vec<u8>], features: &[Vec<u8>]) -> Result<Self, SpaceError> {
        let l = adjacency.len();
        if l == 0 {
            return Err(SpaceError::Dimension {
                expected: "at least one layer".into(),
                got: "0 rows".into(),
            });
        }
        if let Some(row) = adjacency.iter().find(|r| r.len() != l) {
            return Err(SpaceError::Dimension {
                expected: format!("{l}x{l} adjacency"),
                got: format!("row of length {}", row.len()),
            });
        }
        if features.len() != l {
            return Err(SpaceError::Dimension {
                expected: format!("{l} feature rows"),
                got: format!("{} rows", features.len()),
            });
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|r| r.len() != d) {
            return Err(SpaceError::Dimension {
                expected: "rectangular feature matrix with d >= 1".into(),
                got: "ragged or empty rows".into(),
            });
        }
        let adjacency: Vec<u8> = adjacency.iter().flatten().copied().collect();
        let features: Vec<u8> = features.iter().flatten().copied().collect();
        if adjacency.iter().chain(features.iter()).any(|&b| b > 1) {
            return Err(SpaceError::NonBinary);
        }
        Ok(Self {
            num_layers: l,
            num_ops: d,
            adjacency,
            features,
        })
    }

    /// Builds from an edge list and one op index per layer.
    pub fn from_edges(
        num_layers: usize,
        num_ops: usize,
        edges: &[(usize, usize)],
        ops: &[usize],
    ) -> Result<Self, SpaceError> {
        if ops.len() != num_layers {
            return Err(SpaceError::Dimension {
                expected: format!("{num_layers} ops"),
                got: format!("{}", ops.len()),
            });
        }
        let mut arch = Self::empty(num_layers, num_ops);
        for &(i, j) in edges {
            if i >= num_layers || j >= num_layers {
                return Err(SpaceError::Dimension {
                    expected: format!("node index < {num_layers}"),
                    got: format!("edge ({i}, {j})"),
                });
            }
            arch.adjacency[i * num_layers + j] = 1;
        }
        for (row, &op) in ops.iter().enumerate() {
            if op >= num_ops {
                return Err(SpaceError::Dimension {
                    expected: format!("op index < {num_ops}"),
                    got: format!("{op}"),
                });
            }
            arch.set_op(row, op);
        }
        Ok(arch)
    }

    fn empty(num_layers: usize, num_ops: usize) -> Self {
        Self {
            num_layers,
            num_ops,
            adjacency: vec![0; num_layers * num_layers],
            features: vec![0; num_layers * num_ops],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_ops(&self) -> usize {
        self.num_ops
    }

    /// Row-major `L x L` adjacency.
    pub fn adjacency(&self) -> &[u8] {
        &self.adjacency
    }

    /// Row-major `L x d` feature matrix.
    pub fn features(&self) -> &[u8] {
        &self.features
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency[from * self.num_layers + to] == 1
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&b| b == 1).count()
    }

    /// The op index of layer `row`, or `None` if the row is not one-hot.
    pub fn op(&self, row: usize) -> Option<usize> {
        let r = &self.features[row * self.num_ops..(row + 1) * self.num_ops];
        let mut found = None;
        for (k, &b) in r.iter().enumerate() {
            if b == 1 {
                if found.is_some() {
                    return None;
                }
                found = Some(k);
            }
        }
        found
    }

    fn set_op(&mut self, row: usize, op: usize) {
        let r = &mut self.features[row * self.num_ops..(row + 1) * self.num_ops];
        r.fill(0);
        r[op] = 1;
    }

    fn set_edge(&mut self, from: usize, to: usize, on: bool) {
        self.adjacency[from * self.num_layers + to] = on as u8;
    }

    /// Upper-triangular adjacency bits in row-major order.
    pub fn upper_bits(&self) -> impl Iterator<Item = u8> + '_ {
        let l = self.num_layers;
        (0..l).flat_map(move |i| ((i + 1)..l).map(move |j| self.adjacency[i * l + j]))
    }

    pub fn adjacency_f64(&self) -> Vec<f64> {
        self.adjacency.iter().map(|&b| b as f64).collect()
    }

    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&b| b as f64).collect()
    }

    pub fn key(&self) -> ArchKey {
        arch_key(self)
    }
}

/// Canonical byte string of an encoding: `[L, d]` followed by the packed
/// adjacency and feature bits. Injective on encodings of a given shape, and
/// ordered lexicographically for deterministic tie-breaking.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchKey(Box<[u8]>);

impl ArchKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Display for ArchKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0.iter() {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

pub fn arch_key(arch: &Architecture) -> ArchKey {
    let nbits = arch.adjacency.len() + arch.features.len();
    let mut bytes = Vec::with_capacity(2 + nbits.div_ceil(8));
    bytes.push(arch.num_layers as u8);
    bytes.push(arch.num_ops as u8);
    let mut acc = 0u8;
    let mut n = 0;
    for &b in arch.adjacency.iter().chain(arch.features.iter()) {
        acc = (acc << 1) | b;
        n += 1;
        if n == 8 {
            bytes.push(acc);
            acc = 0;
            n = 0;
        }
    }
    if n > 0 {
        bytes.push(acc << (8 - n));
    }
    ArchKey(bytes.into_boxed_slice())
}

/// A broken validity rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NotUpperTriangular { from: usize, to: usize },
    RowNotOneHot { row: usize },
    EdgeBudget { edges: usize, max: usize },
    SourceHasInputs,
    SinkHasOutputs,
    NodeOffPath { node: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotUpperTriangular { from, to } => {
                write!(f, "edge {from}->{to} is not upper-triangular")
            }
            Violation::RowNotOneHot { row } => write!(f, "row not one-hot: feature row {row}"),
            Violation::EdgeBudget { edges, max } => {
                write!(f, "edge budget: {edges} edges exceed the maximum of {max}")
            }
            Violation::SourceHasInputs => write!(f, "node 0 has incoming edges"),
            Violation::SinkHasOutputs => write!(f, "last node has outgoing edges"),
            Violation::NodeOffPath { node } => {
                write!(f, "node {node} is not on a path from the source to the sink")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every architecture rule under `spec`. Shape mismatches are a hard
/// error rather than a violation.
pub fn validate(arch: &Architecture, spec: &SpaceSpec) -> Result<ValidityReport, SpaceError> {
    check_dims(arch, spec)?;
    let l = arch.num_layers;
    let mut violations = Vec::new();
    for i in 0..l {
        for j in 0..=i {
            if arch.has_edge(i, j) {
                violations.push(Violation::NotUpperTriangular { from: i, to: j });
            }
        }
    }
    for row in 0..l {
        if arch.op(row).is_none() {
            violations.push(Violation::RowNotOneHot { row });
        }
    }
    let edges = arch.edge_count();
    if spec.max_edges > 0 && edges > spec.max_edges {
        violations.push(Violation::EdgeBudget {
            edges,
            max: spec.max_edges,
        });
    }
    if spec.single_source_sink {
        if (0..l).any(|i| arch.has_edge(i, 0)) {
            violations.push(Violation::SourceHasInputs);
        }
        if (0..l).any(|j| arch.has_edge(l - 1, j)) {
            violations.push(Violation::SinkHasOutputs);
        }
        for node in off_path_nodes(arch) {
            violations.push(Violation::NodeOffPath { node });
        }
    }
    Ok(ValidityReport { violations })
}

pub fn is_valid(arch: &Architecture, spec: &SpaceSpec) -> bool {
    validate(arch, spec).map(|r| r.is_ok()).unwrap_or(false)
}

fn check_dims(arch: &Architecture, spec: &SpaceSpec) -> Result<(), SpaceError> {
    if arch.num_layers != spec.num_layers || arch.num_ops != spec.num_ops {
        return Err(SpaceError::Dimension {
            expected: format!(
                "{l}x{l} adjacency and {l}x{d} features",
                l = spec.num_layers,
                d = spec.num_ops
            ),
            got: format!(
                "{l}x{l} adjacency and {l}x{d} features",
                l = arch.num_layers,
                d = arch.num_ops
            ),
        });
    }
    Ok(())
}

fn reachable(arch: &Architecture, start: usize, forward: bool) -> Vec<bool> {
    let l = arch.num_layers;
    let mut seen = vec![false; l];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(u) = queue.pop_front() {
        for v in 0..l {
            let edge = if forward {
                arch.has_edge(u, v)
            } else {
                arch.has_edge(v, u)
            };
            if edge && !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen
}

fn off_path_nodes(arch: &Architecture) -> Vec<usize> {
    let l = arch.num_layers;
    let from_source = reachable(arch, 0, true);
    let to_sink = reachable(arch, l - 1, false);
    (0..l).filter(|&v| !(from_source[v] && to_sink[v])).collect()
}

fn draw_raw<R: Rng + ?Sized>(spec: &SpaceSpec, rng: &mut R) -> Architecture {
    let l = spec.num_layers;
    let mut arch = Architecture::empty(l, spec.num_ops);
    for i in 0..l {
        for j in (i + 1)..l {
            arch.set_edge(i, j, rng.gen_bool(0.5));
        }
    }
    for row in 0..l {
        let op = rng.gen_range(0..spec.num_ops);
        arch.set_op(row, op);
    }
    arch
}

/// Draws each upper-triangular bit as a fair coin and each op uniformly,
/// rejecting until the result is valid.
pub fn random_architecture<R: Rng + ?Sized>(
    spec: &SpaceSpec,
    rng: &mut R,
) -> Result<Architecture, SpaceError> {
    for _ in 0..RANDOM_ATTEMPTS {
        let arch = draw_raw(spec, rng);
        if is_valid(&arch, spec) {
            return Ok(arch);
        }
    }
    Err(SpaceError::TooConstrained(RANDOM_ATTEMPTS))
}

/// Deterministic stream over every valid architecture: adjacency masks in
/// increasing order, and for each mask all op assignments in lexicographic
/// order.
#[derive(Debug, Clone)]
pub struct Enumeration {
    spec: SpaceSpec,
    adjacencies: Vec<Architecture>,
    adj_index: usize,
    ops: Vec<usize>,
    remaining: usize,
}

impl Iterator for Enumeration {
    type Item = Architecture;

    fn next(&mut self) -> Option<Architecture> {
        if self.remaining == 0 {
            return None;
        }
        let mut arch = self.adjacencies[self.adj_index].clone();
        for (row, &op) in self.ops.iter().enumerate() {
            arch.set_op(row, op);
        }
        self.remaining -= 1;
        // advance the mixed-radix op counter, last layer fastest
        let d = self.spec.num_ops;
        let mut pos = self.ops.len();
        loop {
            if pos == 0 {
                self.ops.fill(0);
                self.adj_index += 1;
                break;
            }
            pos -= 1;
            self.ops[pos] += 1;
            if self.ops[pos] < d {
                break;
            }
            self.ops[pos] = 0;
        }
        Some(arch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for Enumeration {}

pub fn enumerate(spec: &SpaceSpec) -> Result<Enumeration, SpaceError> {
    enumerate_with_limit(spec, DEFAULT_ENUMERATION_LIMIT)
}

pub fn enumerate_with_limit(spec: &SpaceSpec, limit: u128) -> Result<Enumeration, SpaceError> {
    let count = spec.raw_encoding_count();
    if count > limit {
        return Err(SpaceError::TooLarge { count, limit });
    }
    let l = spec.num_layers;
    let slots: Vec<(usize, usize)> = (0..l)
        .flat_map(|i| ((i + 1)..l).map(move |j| (i, j)))
        .collect();
    let mut adjacencies = Vec::new();
    for mask in 0u64..(1u64 << slots.len()) {
        let mut arch = Architecture::empty(l, spec.num_ops);
        // first slot is the most significant bit, matching the text encoding
        for (k, &(i, j)) in slots.iter().enumerate() {
            let bit = (mask >> (slots.len() - 1 - k)) & 1;
            arch.set_edge(i, j, bit == 1);
        }
        for row in 0..l {
            arch.set_op(row, 0);
        }
        if is_valid(&arch, spec) {
            adjacencies.push(arch);
        }
    }
    let per_adj = spec.num_ops.pow(l as u32);
    let remaining = adjacencies.len() * per_adj;
    Ok(Enumeration {
        spec: *spec,
        adjacencies,
        adj_index: 0,
        ops: vec![0; l],
        remaining,
    })
}

/// Mutation without validity repair: each upper-triangular adjacency bit
/// flips with probability `p_mutate`, and each feature row is, with
/// probability `p_mutate`, replaced by a uniformly drawn one-hot row.
pub fn mutate_raw<R: Rng + ?Sized>(arch: &Architecture, p_mutate: f64, rng: &mut R) -> Architecture {
    let l = arch.num_layers;
    let mut out = arch.clone();
    for i in 0..l {
        for j in (i + 1)..l {
            if rng.gen_bool(p_mutate) {
                let on = out.has_edge(i, j);
                out.set_edge(i, j, !on);
            }
        }
    }
    for row in 0..l {
        if rng.gen_bool(p_mutate) {
            let op = rng.gen_range(0..arch.num_ops);
            out.set_op(row, op);
        }
    }
    out
}

/// [`mutate_raw`] re-run until the offspring is valid; after
/// [`OPERATOR_ATTEMPTS`] failures a fresh random architecture is returned.
pub fn mutate<R: Rng + ?Sized>(
    arch: &Architecture,
    p_mutate: f64,
    spec: &SpaceSpec,
    rng: &mut R,
) -> Result<Architecture, SpaceError> {
    check_dims(arch, spec)?;
    for _ in 0..OPERATOR_ATTEMPTS {
        let child = mutate_raw(arch, p_mutate, rng);
        if is_valid(&child, spec) {
            return Ok(child);
        }
    }
    random_architecture(spec, rng)
}

/// Crossover without validity repair: every upper-triangular adjacency entry
/// and every feature row comes from either parent with probability 0.5.
pub fn crossover_raw<R: Rng + ?Sized>(a1: &Architecture, a2: &Architecture, rng: &mut R) -> Architecture {
    let l = a1.num_layers;
    let mut out = a1.clone();
    for i in 0..l {
        for j in (i + 1)..l {
            if rng.gen_bool(0.5) {
                out.set_edge(i, j, a2.has_edge(i, j));
            }
        }
    }
    let d = a1.num_ops;
    for row in 0..l {
        if rng.gen_bool(0.5) {
            out.features[row * d..(row + 1) * d].copy_from_slice(&a2.features[row * d..(row + 1) * d]);
        }
    }
    out
}

pub fn crossover<R: Rng + ?Sized>(
    a1: &Architecture,
    a2: &Architecture,
    spec: &SpaceSpec,
    rng: &mut R,
) -> Result<Architecture, SpaceError> {
    check_dims(a1, spec)?;
    check_dims(a2, spec)?;
    for _ in 0..OPERATOR_ATTEMPTS {
        let child = crossover_raw(a1, a2, rng);
        if is_valid(&child, spec) {
            return Ok(child);
        }
    }
    random_architecture(spec, rng)
}

/// Relabels layers: row `i` of the result is layer `perm[i]` of the input, so
/// `A' = P A P^T` and `X' = P X` with `P[i][perm[i]] = 1`.
pub fn permute(arch: &Architecture, perm: &[usize]) -> Result<Architecture, SpaceError> {
    let l = arch.num_layers;
    let mut seen = vec![false; l];
    if perm.len() != l || perm.iter().any(|&p| p >= l || std::mem::replace(&mut seen[p], true)) {
        return Err(SpaceError::InvalidPermutation(l));
    }
    let d = arch.num_ops;
    let mut out = Architecture::empty(l, d);
    for i in 0..l {
        for j in 0..l {
            out.adjacency[i * l + j] = arch.adjacency[perm[i] * l + perm[j]];
        }
        out.features[i * d..(i + 1) * d]
            .copy_from_slice(&arch.features[perm[i] * d..(perm[i] + 1) * d]);
    }
    Ok(out)
}

/// Adds the fewest obvious edges that put every layer on a source-to-sink
/// path: `0 -> v` for layers the source cannot reach and `v -> L-1` for
/// layers that cannot reach the sink. Lower-triangular entries are cleared and
/// non-one-hot rows set to their first active op (or op 0). Returns `None` if
/// the result still breaks a rule, which only happens through the edge budget.
pub fn repair(arch: &Architecture, spec: &SpaceSpec) -> Option<Architecture> {
    check_dims(arch, spec).ok()?;
    let l = arch.num_layers;
    let mut out = arch.clone();
    for i in 0..l {
        for j in 0..=i {
            out.set_edge(i, j, false);
        }
    }
    for row in 0..l {
        if out.op(row).is_none() {
            let d = out.num_ops;
            let first = out.features[row * d..(row + 1) * d]
                .iter()
                .position(|&b| b == 1)
                .unwrap_or(0);
            out.set_op(row, first);
        }
    }
    if spec.single_source_sink {
        let from_source = reachable(&out, 0, true);
        for v in 1..l {
            if !from_source[v] {
                out.set_edge(0, v, true);
            }
        }
        let to_sink = reachable(&out, l - 1, false);
        for v in 0..(l - 1) {
            if !to_sink[v] {
                out.set_edge(v, l - 1, true);
            }
        }
    }
    is_valid(&out, spec).then_some(out)
}

impl fmt::Display for Architecture {
    /// Rows that are not one-hot are written as `x` and will not parse back.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} | ", self.num_layers, self.num_ops)?;
        for b in self.upper_bits() {
            write!(f, "{b}")?;
        }
        write!(f, " |")?;
        for row in 0..self.num_layers {
            match self.op(row) {
                Some(op) => write!(f, " {op}")?,
                None => write!(f, " x")?,
            }
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = SpaceError;

    fn from_str(s: &str) -> Result<Self, SpaceError> {
        let parts: Vec<&str> = s.split('|').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(SpaceError::Parse(format!(
                "expected `L d | bits | ops`, got {} field(s)",
                parts.len()
            )));
        }
        let dims: Vec<usize> = parse_numbers(parts[0])?;
        let [l, d] = dims[..] else {
            return Err(SpaceError::Parse(format!("expected `L d`, got `{}`", parts[0])));
        };
        if l < 1 || d < 1 || l > 64 {
            return Err(SpaceError::Parse(format!("bad dimensions {l} {d}")));
        }
        let bits = parts[1].as_bytes();
        let slots = l * (l - 1) / 2;
        if bits.len() != slots {
            return Err(SpaceError::Parse(format!(
                "expected {slots} adjacency bits, got {}",
                bits.len()
            )));
        }
        let ops: Vec<usize> = parse_numbers(parts[2])?;
        if ops.len() != l {
            return Err(SpaceError::Parse(format!("expected {l} op indices, got {}", ops.len())));
        }
        let mut arch = Architecture::empty(l, d);
        let mut k = 0;
        for i in 0..l {
            for j in (i + 1)..l {
                match bits[k] {
                    b'0' => {}
                    b'1' => arch.set_edge(i, j, true),
                    other => {
                        return Err(SpaceError::Parse(format!(
                            "adjacency bit `{}` is not 0 or 1",
                            other as char
                        )))
                    }
                }
                k += 1;
            }
        }
        for (row, &op) in ops.iter().enumerate() {
            if op >= d {
                return Err(SpaceError::Parse(format!("op index {op} out of range for d={d}")));
            }
            arch.set_op(row, op);
        }
        Ok(arch)
    }
}

fn parse_numbers(s: &str) -> Result<Vec<usize>, SpaceError> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| SpaceError::Parse(format!("`{t}` is not an index"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn spec(l: usize, d: usize) -> SpaceSpec {
        SpaceSpec::new(l, d, 0, true).unwrap()
    }

    #[test]
    fn spec_rejects_bad_shapes() {
        assert!(SpaceSpec::new(1, 3, 0, true).is_err());
        assert!(SpaceSpec::new(3, 0, 0, true).is_err());
        assert!(SpaceSpec::new(3, 1, 4, true).is_err());
        assert!(SpaceSpec::new(3, 1, 3, true).is_ok());
    }

    #[test]
    fn minimal_chain_is_valid() {
        let a = Architecture::from_edges(2, 1, &[(0, 1)], &[0, 0]).unwrap();
        assert!(validate(&a, &spec(2, 1)).unwrap().is_ok());
    }

    #[test]
    fn non_one_hot_row_is_reported() {
        let adj = vec![vec![0, 1, 0], vec![0, 0, 1], vec![0, 0, 0]];
        let feat = vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 1]];
        let a = Architecture::from_matrices(&adj, &feat).unwrap();
        let report = validate(&a, &spec(3, 3)).unwrap();
        assert_eq!(report.violations, vec![Violation::RowNotOneHot { row: 0 }]);
        assert!(report.violations[0].to_string().contains("row not one-hot"));
    }

    #[test]
    fn edge_budget_is_enforced() {
        let s = SpaceSpec::new(7, 5, 9, true).unwrap();
        // chain plus four skips: 6 + 4 = 10 edges
        let mut edges: Vec<(usize, usize)> = (0..6).map(|i| (i, i + 1)).collect();
        edges.extend([(0, 2), (0, 3), (1, 4), (2, 6)]);
        let a = Architecture::from_edges(7, 5, &edges, &[0, 1, 2, 3, 4, 0, 1]).unwrap();
        assert_eq!(a.edge_count(), 10);
        let report = validate(&a, &s).unwrap();
        assert_eq!(report.violations, vec![Violation::EdgeBudget { edges: 10, max: 9 }]);
        assert!(report.violations[0].to_string().contains("edge budget"));
    }

    #[test]
    fn dimension_mismatch_is_a_hard_error() {
        let a = Architecture::from_edges(2, 1, &[(0, 1)], &[0, 0]).unwrap();
        assert!(matches!(validate(&a, &spec(3, 1)), Err(SpaceError::Dimension { .. })));
        assert!(matches!(validate(&a, &spec(2, 2)), Err(SpaceError::Dimension { .. })));
    }

    #[test]
    fn lower_triangular_edge_is_reported() {
        let adj = vec![vec![0, 1], vec![1, 0]];
        let feat = vec![vec![1], vec![1]];
        let a = Architecture::from_matrices(&adj, &feat).unwrap();
        let r = validate(&a, &SpaceSpec::new(2, 1, 0, false).unwrap()).unwrap();
        assert_eq!(r.violations, vec![Violation::NotUpperTriangular { from: 1, to: 0 }]);
    }

    #[test]
    fn dangling_node_is_off_path() {
        let a = Architecture::from_edges(3, 1, &[(0, 2)], &[0, 0, 0]).unwrap();
        let r = validate(&a, &spec(3, 1)).unwrap();
        assert_eq!(r.violations, vec![Violation::NodeOffPath { node: 1 }]);
        // without the source/sink rule the same graph is fine
        assert!(validate(&a, &SpaceSpec::new(3, 1, 0, false).unwrap()).unwrap().is_ok());
    }

    #[test]
    fn random_architecture_is_deterministic_and_valid() {
        let s = spec(5, 3);
        let a = random_architecture(&s, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = random_architecture(&s, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let a = random_architecture(&s, &mut rng).unwrap();
            assert!(validate(&a, &s).unwrap().is_ok());
        }
    }

    #[test]
    fn random_edge_count_matches_generator_distribution() {
        // Oracle: for L=3 the fair-coin generator conditioned on validity is
        // uniform over {01,12} and {01,12,02}, so the mean edge count is 2.5
        // with per-draw std 0.5.
        let s = spec(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let total: usize = (0..n)
            .map(|_| random_architecture(&s, &mut rng).unwrap().edge_count())
            .sum();
        let mean = total as f64 / n as f64;
        let sigma = 0.5 / (n as f64).sqrt();
        assert!((mean - 2.5).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn over_constrained_space_errors() {
        // L=4 with single source/sink needs at least 3 edges; budget 2 is unsatisfiable
        let s = SpaceSpec::new(4, 1, 2, true).unwrap();
        let err = random_architecture(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert_eq!(err, SpaceError::TooConstrained(RANDOM_ATTEMPTS));
    }

    #[test]
    fn enumerate_small_counts() {
        assert_eq!(enumerate(&spec(2, 1)).unwrap().count(), 1);
        let all: Vec<_> = enumerate(&spec(3, 1)).unwrap().collect();
        assert_eq!(all.len(), 2);
        assert!(all.iter().all(|a| a.has_edge(0, 1) && a.has_edge(1, 2)));
        assert_eq!(enumerate(&spec(5, 3)).unwrap().len(), 122 * 243);
    }

    #[test]
    fn enumerate_guard() {
        let s = SpaceSpec::new(7, 5, 0, true).unwrap();
        assert!(matches!(enumerate(&s), Err(SpaceError::TooLarge { .. })));
        assert!(enumerate_with_limit(&spec(3, 2), 10).is_err());
    }

    #[test]
    fn enumerate_is_deterministic_and_distinct() {
        let a: Vec<_> = enumerate(&spec(4, 2)).unwrap().collect();
        let b: Vec<_> = enumerate(&spec(4, 2)).unwrap().collect();
        assert_eq!(a, b);
        let keys: HashSet<_> = a.iter().map(arch_key).collect();
        assert_eq!(keys.len(), a.len());
    }

    #[test]
    fn mutate_with_zero_probability_is_identity() {
        let s = spec(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = random_architecture(&s, &mut rng).unwrap();
            assert_eq!(mutate(&a, 0.0, &s, &mut rng).unwrap(), a);
        }
    }

    #[test]
    fn mutate_certain_flip_on_chain_falls_back_to_valid() {
        let s = spec(2, 1);
        let a = Architecture::from_edges(2, 1, &[(0, 1)], &[0, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = mutate_raw(&a, 1.0, &mut rng);
        assert!(!raw.has_edge(0, 1));
        let m = mutate(&a, 1.0, &s, &mut rng).unwrap();
        assert!(validate(&m, &s).unwrap().is_ok());
        assert_eq!(m, a);
    }

    #[test]
    fn crossover_of_identical_parents_is_identity() {
        let s = spec(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_architecture(&s, &mut rng).unwrap();
        for _ in 0..50 {
            assert_eq!(crossover(&a, &a, &s, &mut rng).unwrap(), a);
        }
    }

    #[test]
    fn crossover_bits_come_from_a_parent() {
        let s = spec(6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let a = random_architecture(&s, &mut rng).unwrap();
            let b = random_architecture(&s, &mut rng).unwrap();
            let c = crossover_raw(&a, &b, &mut rng);
            for (k, &bit) in c.adjacency().iter().enumerate() {
                assert!(bit == a.adjacency()[k] || bit == b.adjacency()[k]);
            }
            for row in 0..6 {
                let op = c.op(row).unwrap();
                assert!(op == a.op(row).unwrap() || op == b.op(row).unwrap());
            }
        }
    }

    #[test]
    fn permute_identity_and_inverse() {
        let s = spec(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_architecture(&s, &mut rng).unwrap();
        assert_eq!(permute(&a, &[0, 1, 2, 3, 4]).unwrap(), a);
        let perm = [3, 0, 4, 1, 2];
        let mut inv = [0; 5];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let p = permute(&a, &perm).unwrap();
        assert_eq!(permute(&p, &inv).unwrap(), a);
        assert!(permute(&a, &[0, 0, 1, 2, 3]).is_err());
        assert!(permute(&a, &[0, 1, 2]).is_err());
    }

    #[test]
    fn keys_separate_single_bit_changes() {
        let a = Architecture::from_edges(3, 2, &[(0, 1), (1, 2)], &[0, 1, 0]).unwrap();
        let b = Architecture::from_edges(3, 2, &[(0, 1), (1, 2), (0, 2)], &[0, 1, 0]).unwrap();
        let c = Architecture::from_edges(3, 2, &[(0, 1), (1, 2)], &[0, 1, 1]).unwrap();
        assert_eq!(arch_key(&a), arch_key(&a.clone()));
        assert_ne!(arch_key(&a), arch_key(&b));
        assert_ne!(arch_key(&a), arch_key(&c));
    }

    #[test]
    fn text_encoding_parses_back() {
        let a = Architecture::from_edges(3, 2, &[(0, 2), (1, 2)], &[0, 1, 1]).unwrap();
        assert_eq!(a.to_string(), "3 2 | 011 | 0 1 1");
        assert_eq!("3 2 | 011 | 0 1 1".parse::<Architecture>().unwrap(), a);
        assert!("3 2 | 10 | 0 1 1".parse::<Architecture>().is_err());
        assert!("3 2 | 101 | 0 2 1".parse::<Architecture>().is_err());
        assert!("3 2 | 1a1 | 0 1 1".parse::<Architecture>().is_err());
        assert!("3 2 101 0 1 1".parse::<Architecture>().is_err());
    }

    #[test]
    fn repair_connects_dangling_layers() {
        let s = spec(4, 2);
        let a = Architecture::from_edges(4, 2, &[(0, 3)], &[0, 1, 0, 1]).unwrap();
        let r = repair(&a, &s).unwrap();
        assert!(validate(&r, &s).unwrap().is_ok());
        assert!(r.has_edge(0, 1) && r.has_edge(1, 3) && r.has_edge(0, 2) && r.has_edge(2, 3));
        let tight = SpaceSpec::new(4, 2, 3, true).unwrap();
        assert!(repair(&a, &tight).is_none());
    }
}
