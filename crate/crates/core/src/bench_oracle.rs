//! Ground-truth errors without training networks.
//!
//! A [`Benchmark`] is either a table loaded from disk or a seeded synthetic
//! landscape. Both report errors, not accuracies: convert with
//! `error = 1 - accuracy` when importing accuracy tables.
//!
//! Tabular files are line oriented. Blank lines and lines starting with `#`
//! are ignored; the first remaining line is the header
//!
//! ```text
//! spec <L> <d> <max_edges> <flags>
//! ```
//!
//! where `flags` is `1` when every layer must lie on a source-to-sink path and
//! `0` otherwise. Each following line holds one architecture:
//!
//! ```text
//! <L> <d> | <adjacency bits> | <ops> | <val error per run> | <test error per run>
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::arch_space::{
    arch_key, enumerate, random_architecture, validate, ArchKey, Architecture, SpaceError,
    SpaceSpec,
};
use crate::seeding::{hash_bytes, mix64, rng_from_seed, unit_symmetric};

/// Runs generated per synthetic architecture.
pub const SYNTHETIC_RUNS: usize = 3;
const RUN_JITTER: f64 = 0.002;
const TEST_OFFSET: f64 = 0.01;
const ERROR_FLOOR: f64 = 0.02;
const ERROR_SPAN: f64 = 0.9;
const CALIBRATION_DRAWS: usize = 10_000;
const CALIBRATION_LOW: f64 = 0.05;
const CALIBRATION_HIGH: f64 = 0.85;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: invalid architecture: {msg}")]
    InvalidArchitecture { line: usize, msg: String },
    #[error("line {line}: error value {value} outside [0, 1]")]
    Range { line: usize, value: f64 },
    #[error("line {line}: duplicate architecture {arch}")]
    Duplicate { line: usize, arch: String },
    #[error("architecture not in benchmark: {0}")]
    Missing(String),
    #[error("architecture is not valid in this space: {0}")]
    Invalid(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("benchmark has no records")]
    Empty,
}

/// Per-run errors of one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub arch: Architecture,
    pub val_errors: Vec<f64>,
    pub test_errors: Vec<f64>,
}

impl EvalRecord {
    pub fn mean_val(&self) -> f64 {
        mean(&self.val_errors)
    }

    pub fn mean_test(&self) -> f64 {
        mean(&self.test_errors)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Minimum mean errors over a whole benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Oracles {
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Tabular,
    Synthetic,
}

/// Parameters of the synthetic landscape
/// `0.02 + 0.9 * logistic(scale * (w.phi + phi'Q phi / |phi| - shift))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub seed: u64,
    pub weights: Vec<f64>,
    /// Symmetric, row-major `|phi| x |phi|`.
    pub quadratic: Vec<f64>,
    pub scale: f64,
    pub shift: f64,
}

#[derive(Debug, Clone)]
enum Source {
    Tabular {
        records: Vec<EvalRecord>,
        index: HashMap<ArchKey, usize>,
    },
    Synthetic(SyntheticParams),
}

/// Immutable oracle from architecture to validation and test errors.
#[derive(Debug, Clone)]
pub struct Benchmark {
    spec: SpaceSpec,
    source: Source,
}

impl Benchmark {
    pub fn spec(&self) -> &SpaceSpec {
        &self.spec
    }

    pub fn mode(&self) -> BenchMode {
        match self.source {
            Source::Tabular { .. } => BenchMode::Tabular,
            Source::Synthetic(_) => BenchMode::Synthetic,
        }
    }

    pub fn synthetic_params(&self) -> Option<&SyntheticParams> {
        match &self.source {
            Source::Synthetic(p) => Some(p),
            Source::Tabular { .. } => None,
        }
    }

    /// Builds a table, validating every record and rejecting duplicates.
    /// Line numbers in errors are 1-based record positions.
    pub fn from_records(spec: SpaceSpec, records: Vec<EvalRecord>) -> Result<Self, BenchError> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            check_record(rec, &spec, i + 1)?;
            if index.insert(arch_key(&rec.arch), i).is_some() {
                return Err(BenchError::Duplicate {
                    line: i + 1,
                    arch: rec.arch.to_string(),
                });
            }
        }
        Ok(Self {
            spec,
            source: Source::Tabular { records, index },
        })
    }

    /// Number of records (tabular) or valid architectures (enumerable synthetic).
    pub fn len(&self) -> Result<usize, BenchError> {
        match &self.source {
            Source::Tabular { records, .. } => Ok(records.len()),
            Source::Synthetic(_) => Ok(enumerate(&self.spec)?.len()),
        }
    }

    pub fn is_empty(&self) -> Result<bool, BenchError> {
        self.len().map(|n| n == 0)
    }

    pub fn is_enumerable(&self) -> bool {
        match self.source {
            Source::Tabular { .. } => true,
            Source::Synthetic(_) => enumerate(&self.spec).is_ok(),
        }
    }

    /// Every architecture, in file order or enumeration order.
    pub fn architectures(&self) -> Result<Vec<Architecture>, BenchError> {
        match &self.source {
            Source::Tabular { records, .. } => Ok(records.iter().map(|r| r.arch.clone()).collect()),
            Source::Synthetic(_) => Ok(enumerate(&self.spec)?.collect()),
        }
    }

    /// Full record for `arch`.
    pub fn record(&self, arch: &Architecture) -> Result<EvalRecord, BenchError> {
        match &self.source {
            Source::Tabular { records, index } => index
                .get(&arch_key(arch))
                .map(|&i| records[i].clone())
                .ok_or_else(|| BenchError::Missing(arch.to_string())),
            Source::Synthetic(p) => {
                self.check_synthetic(arch)?;
                Ok(p.record(arch))
            }
        }
    }

    /// Mean validation error over runs.
    pub fn query_val(&self, arch: &Architecture) -> Result<f64, BenchError> {
        match &self.source {
            Source::Tabular { records, index } => index
                .get(&arch_key(arch))
                .map(|&i| records[i].mean_val())
                .ok_or_else(|| BenchError::Missing(arch.to_string())),
            Source::Synthetic(p) => {
                self.check_synthetic(arch)?;
                Ok(mean(&p.val_runs(arch)))
            }
        }
    }

    /// Mean test error over runs.
    pub fn query_test(&self, arch: &Architecture) -> Result<f64, BenchError> {
        match &self.source {
            Source::Tabular { records, index } => index
                .get(&arch_key(arch))
                .map(|&i| records[i].mean_test())
                .ok_or_else(|| BenchError::Missing(arch.to_string())),
            Source::Synthetic(p) => {
                self.check_synthetic(arch)?;
                Ok(mean(&p.test_runs(arch)))
            }
        }
    }

    fn check_synthetic(&self, arch: &Architecture) -> Result<(), BenchError> {
        let report = validate(arch, &self.spec)?;
        if report.is_ok() {
            Ok(())
        } else {
            Err(BenchError::Invalid(arch.to_string()))
        }
    }

    /// Exact minima over the whole benchmark. Synthetic spaces must be
    /// enumerable.
    pub fn oracles(&self) -> Result<Oracles, BenchError> {
        let (val, test) = match &self.source {
            Source::Tabular { records, .. } => records.iter().fold(
                (f64::INFINITY, f64::INFINITY),
                |(v, t), r| (v.min(r.mean_val()), t.min(r.mean_test())),
            ),
            Source::Synthetic(p) => enumerate(&self.spec)?.fold(
                (f64::INFINITY, f64::INFINITY),
                |(v, t), a| (v.min(mean(&p.val_runs(&a))), t.min(mean(&p.test_runs(&a)))),
            ),
        };
        if val.is_infinite() {
            return Err(BenchError::Empty);
        }
        Ok(Oracles { val, test })
    }

    /// Materializes an enumerable benchmark as a table.
    pub fn to_tabular(&self) -> Result<Benchmark, BenchError> {
        match &self.source {
            Source::Tabular { .. } => Ok(self.clone()),
            Source::Synthetic(p) => {
                let records = enumerate(&self.spec)?.map(|a| p.record(&a)).collect();
                Benchmark::from_records(self.spec, records)
            }
        }
    }

    /// Renders the tabular file format. Synthetic benchmarks are enumerated.
    pub fn to_tabular_string(&self) -> Result<String, BenchError> {
        let table = self.to_tabular()?;
        let Source::Tabular { records, .. } = &table.source else {
            unreachable!("to_tabular returns a table");
        };
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "spec {} {} {} {}",
            s.num_layers(),
            s.num_ops(),
            s.max_edges(),
            s.single_source_sink() as u8
        );
        for r in records {
            let _ = write!(out, "{} |", r.arch);
            for v in &r.val_errors {
                let _ = write!(out, " {v}");
            }
            out.push_str(" |");
            for t in &r.test_errors {
                let _ = write!(out, " {t}");
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save_tabular(&self, path: impl AsRef<Path>) -> Result<(), BenchError> {
        fs::write(path, self.to_tabular_string()?)?;
        Ok(())
    }
}

fn check_record(rec: &EvalRecord, spec: &SpaceSpec, line: usize) -> Result<(), BenchError> {
    let report = validate(&rec.arch, spec).map_err(|e| BenchError::InvalidArchitecture {
        line,
        msg: e.to_string(),
    })?;
    if let Some(v) = report.violations.first() {
        return Err(BenchError::InvalidArchitecture {
            line,
            msg: v.to_string(),
        });
    }
    if rec.val_errors.is_empty() || rec.test_errors.is_empty() {
        return Err(BenchError::Parse {
            line,
            msg: "need at least one validation and one test error".into(),
        });
    }
    for &value in rec.val_errors.iter().chain(&rec.test_errors) {
        if !(0.0..=1.0).contains(&value) {
            return Err(BenchError::Range { line, value });
        }
    }
    Ok(())
}

pub fn load_tabular(path: impl AsRef<Path>) -> Result<Benchmark, BenchError> {
    parse_tabular(&fs::read_to_string(path)?)
}

pub fn parse_tabular(text: &str) -> Result<Benchmark, BenchError> {
    let mut spec = None;
    let mut records = Vec::new();
    let mut index = HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some(spec) = spec.as_ref() else {
            spec = Some(parse_header(trimmed, line)?);
            continue;
        };
        let rec = parse_record(trimmed, line)?;
        check_record(&rec, spec, line)?;
        if index.insert(arch_key(&rec.arch), records.len()).is_some() {
            return Err(BenchError::Duplicate {
                line,
                arch: rec.arch.to_string(),
            });
        }
        records.push(rec);
    }
    let spec = spec.ok_or(BenchError::Parse {
        line: 1,
        msg: "missing `spec` header".into(),
    })?;
    Ok(Benchmark {
        spec,
        source: Source::Tabular { records, index },
    })
}

fn parse_header(line: &str, n: usize) -> Result<SpaceSpec, BenchError> {
    let parse_err = |msg: String| BenchError::Parse { line: n, msg };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "spec" {
        return Err(parse_err(format!(
            "expected header `spec L d max_edges flags`, got `{line}`"
        )));
    }
    let nums: Vec<usize> = fields[1..]
        .iter()
        .map(|f| f.parse().map_err(|_| parse_err(format!("`{f}` is not a count"))))
        .collect::<Result<_, _>>()?;
    if nums[3] > 1 {
        return Err(parse_err(format!("unknown flags {}", nums[3])));
    }
    SpaceSpec::new(nums[0], nums[1], nums[2], nums[3] == 1).map_err(|e| parse_err(e.to_string()))
}

fn parse_record(line: &str, n: usize) -> Result<EvalRecord, BenchError> {
    let parts: Vec<&str> = line.split('|').collect();
    if parts.len() != 5 {
        return Err(BenchError::Parse {
            line: n,
            msg: format!("expected 5 `|`-separated fields, got {}", parts.len()),
        });
    }
    let arch: Architecture = parts[..3]
        .join("|")
        .parse()
        .map_err(|e: SpaceError| BenchError::Parse {
            line: n,
            msg: e.to_string(),
        })?;
    let errors = |field: &str| -> Result<Vec<f64>, BenchError> {
        field
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| BenchError::Parse {
                    line: n,
                    msg: format!("`{t}` is not a number"),
                })
            })
            .collect()
    };
    Ok(EvalRecord {
        arch,
        val_errors: errors(parts[3])?,
        test_errors: errors(parts[4])?,
    })
}

/// Builds the seeded synthetic landscape for `spec`.
///
/// `phi(A)` concatenates the upper-triangular adjacency bits and the flattened
/// one-hot features. The linear weights and the symmetric quadratic form are
/// drawn uniformly from `[-1, 1]`. Scale and shift are fitted on 10^4 random
/// architectures so that the 1st and 99th percentiles of the error land on
/// 0.05 and 0.85.
pub fn synthetic_benchmark(spec: &SpaceSpec, seed: u64) -> Result<Benchmark, BenchError> {
    let n = spec.edge_slots() + spec.num_layers() * spec.num_ops();
    let mut rng = rng_from_seed(seed);
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mut quadratic = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let q = rng.gen_range(-1.0..=1.0);
            quadratic[i * n + j] = q;
            quadratic[j * n + i] = q;
        }
    }
    let mut params = SyntheticParams {
        seed,
        weights,
        quadratic,
        scale: 1.0,
        shift: 0.0,
    };

    let mut calib_rng = rng_from_seed(mix64(seed ^ 0xca1b_0000));
    let mut zs = Vec::with_capacity(CALIBRATION_DRAWS);
    for _ in 0..CALIBRATION_DRAWS {
        let a = random_architecture(spec, &mut calib_rng)?;
        zs.push(params.raw_score(&a));
    }
    zs.sort_by(f64::total_cmp);
    let z_lo = quantile_sorted(&zs, 0.01);
    let z_hi = quantile_sorted(&zs, 0.99);
    let logit = |e: f64| {
        let p = (e - ERROR_FLOOR) / ERROR_SPAN;
        (p / (1.0 - p)).ln()
    };
    let (l_lo, l_hi) = (logit(CALIBRATION_LOW), logit(CALIBRATION_HIGH));
    if z_hi - z_lo > 1e-12 {
        params.scale = (l_hi - l_lo) / (z_hi - z_lo);
        params.shift = z_lo - l_lo / params.scale;
    } else {
        params.shift = quantile_sorted(&zs, 0.5);
    }
    Ok(Benchmark {
        spec: *spec,
        source: Source::Synthetic(params),
    })
}

/// Linear-interpolated quantile of a sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl SyntheticParams {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Indices of the active entries of `phi(A)`.
    pub fn active_features(arch: &Architecture) -> Vec<usize> {
        let mut active: Vec<usize> = arch
            .upper_bits()
            .enumerate()
            .filter(|&(_, b)| b == 1)
            .map(|(i, _)| i)
            .collect();
        let offset = arch.num_layers() * (arch.num_layers() - 1) / 2;
        active.extend(
            arch.features()
                .iter()
                .enumerate()
                .filter(|&(_, &b)| b == 1)
                .map(|(i, _)| offset + i),
        );
        active
    }

    /// `w.phi + phi'Q phi / |phi|` before scaling.
    pub fn raw_score(&self, arch: &Architecture) -> f64 {
        let n = self.dim();
        let active = Self::active_features(arch);
        let linear: f64 = active.iter().map(|&i| self.weights[i]).sum();
        let mut quad = 0.0;
        for &i in &active {
            for &j in &active {
                quad += self.quadratic[i * n + j];
            }
        }
        linear + quad / n as f64
    }

    /// Noise-free validation error before per-run jitter.
    pub fn center_val(&self, arch: &Architecture) -> f64 {
        ERROR_FLOOR + ERROR_SPAN * logistic(self.scale * (self.raw_score(arch) - self.shift))
    }

    fn arch_hash(&self, arch: &Architecture, salt: u64) -> u64 {
        hash_bytes(mix64(self.seed ^ salt), arch_key(arch).as_bytes())
    }

    pub fn center_test(&self, arch: &Architecture) -> f64 {
        let eta = unit_symmetric(self.arch_hash(arch, 0x7e57));
        (self.center_val(arch) + TEST_OFFSET * eta).clamp(0.0, 1.0)
    }

    fn jittered(&self, arch: &Architecture, center: f64, salt: u64) -> Vec<f64> {
        (0..SYNTHETIC_RUNS as u64)
            .map(|r| {
                let u = unit_symmetric(self.arch_hash(arch, salt + r));
                (center + RUN_JITTER * u).clamp(0.0, 1.0)
            })
            .collect()
    }

    pub fn val_runs(&self, arch: &Architecture) -> Vec<f64> {
        self.jittered(arch, self.center_val(arch), 0x0a11_0000)
    }

    pub fn test_runs(&self, arch: &Architecture) -> Vec<f64> {
        self.jittered(arch, self.center_test(arch), 0x0b22_0000)
    }

    pub fn record(&self, arch: &Architecture) -> EvalRecord {
        EvalRecord {
            arch: arch.clone(),
            val_errors: self.val_runs(arch),
            test_errors: self.test_runs(arch),
        }
    }
}
