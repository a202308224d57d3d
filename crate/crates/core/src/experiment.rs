//! Seeded experiment harness: config parsing, variant runs, and the CSV/JSON
//! outputs of the `pbnas` subcommands.
//!
//! A config file names a benchmark, the shared search settings and a list of
//! variants. Run `r` of variant `v` is seeded with `run_seed(master, v, r)`, so
//! every output byte is fixed by the config and the master seed. Phase timings
//! are the one exception and are only written when asked for.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch_space::SpaceSpec;
use crate::bench_oracle::{load_tabular, synthetic_benchmark, BenchError, Benchmark};
use crate::efficiency::{default_grid, gain_curve, linear_grid, ErrorSample, GainCurve, GAIN_CSV_COLUMNS};
use crate::predictor::{PredictorConfig, TrainHyper};
use crate::samplers::{
    uniform_sample, EvoConfig, KeySet, MlConfig, SamplerConfig, SamplerKind, SearchSpace, SetSize,
};
use crate::search::{
    run_random_baseline, run_search, trace_rows, Scorer, SearchConfig, SearchError, TraceRow, TRACE_CSV_COLUMNS,
};
use crate::seeding::{rng_from_seed, run_seed};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A config problem, located by its dotted field path.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{path}: {msg}")]
pub struct ConfigError {
    pub path: String,
    pub msg: String,
}

fn cfg_err(path: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl ExperimentError {
    /// 2 for config problems, 3 for everything data- or file-related.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) | Self::Io { .. } => 3,
        }
    }
}

impl From<BenchError> for ExperimentError {
    fn from(e: BenchError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<SearchError> for ExperimentError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Config(m) => Self::Config(cfg_err("search", m)),
            other => Self::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    master_seed: u64,
    #[serde(default = "one")]
    repeats: usize,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    timings: bool,
    benchmark: RawBenchmark,
    #[serde(default)]
    search: RawSearch,
    #[serde(default)]
    predictor: RawPredictor,
    #[serde(default)]
    train: RawTrain,
    variants: Vec<RawVariant>,
    #[serde(default)]
    gain: RawGain,
    #[serde(default)]
    hist: RawHist,
}

fn one() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBenchmark {
    kind: String,
    path: Option<PathBuf>,
    layers: Option<usize>,
    ops: Option<usize>,
    max_edges: Option<usize>,
    single_source_sink: Option<bool>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawSearch {
    k: usize,
    iterations: usize,
    init_size: usize,
}

impl Default for RawSearch {
    fn default() -> Self {
        Self {
            k: 4,
            iterations: 99,
            init_size: 4,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawPredictor {
    gcn_layers: usize,
    hidden_width: usize,
}

impl Default for RawPredictor {
    fn default() -> Self {
        Self {
            gcn_layers: 3,
            hidden_width: 256,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawTrain {
    epochs: usize,
    lr: f64,
    momentum: f64,
    pairs_per_epoch: usize,
    batch_pairs: usize,
}

impl Default for RawTrain {
    fn default() -> Self {
        let t = TrainHyper::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            momentum: t.momentum,
            pairs_per_epoch: t.pairs_per_epoch,
            batch_pairs: t.batch_pairs,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawSize {
    Count(usize),
    Word(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVariant {
    name: String,
    kind: String,
    n_prime: Option<RawSize>,
    scorer: Option<String>,
    evo: Option<RawEvo>,
    ml: Option<RawMl>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawEvo {
    parents: usize,
    alpha: f64,
    p_mutate: f64,
}

impl Default for RawEvo {
    fn default() -> Self {
        let e = EvoConfig::default();
        Self {
            parents: e.parents,
            alpha: e.alpha,
            p_mutate: e.p_mutate,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawMl {
    steps: usize,
    step_size: f64,
    temperature: f64,
    identity_ste: bool,
}

impl Default for RawMl {
    fn default() -> Self {
        let m = MlConfig::default();
        Self {
            steps: m.steps,
            step_size: m.step_size,
            temperature: m.temperature,
            identity_ste: m.identity_ste,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawGain {
    grid_points: usize,
    s_sample: usize,
}

impl Default for RawGain {
    fn default() -> Self {
        Self {
            grid_points: 100,
            s_sample: 100_000,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawHist {
    bins: usize,
}

impl Default for RawHist {
    fn default() -> Self {
        Self { bins: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BenchmarkSource {
    Synthetic { spec: SpaceSpec, seed: u64 },
    Tabular { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    /// Random search instead of the predictor loop.
    pub random: bool,
    pub search: SearchConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub repeats: usize,
    pub output_dir: Option<PathBuf>,
    pub timings: bool,
    pub benchmark: BenchmarkSource,
    pub variants: Vec<Variant>,
    pub grid_points: usize,
    pub s_sample: usize,
    pub hist_bins: usize,
    text_digest: [u8; 32],
    pub hash: String,
}

fn digest_hex(text_digest: &[u8; 32], master_seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(text_digest);
    h.update(master_seed.to_le_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    /// Same experiment under another master seed; the hash follows.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self.hash = digest_hex(&self.text_digest, seed);
        self
    }

    pub fn variant(&self, name: &str) -> Option<&Variant> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// First line of every CSV this experiment writes.
    pub fn csv_banner(&self) -> String {
        format!("# pbnas {VERSION} config={}", self.hash)
    }
}

fn positive(path: &str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        Err(cfg_err(path, "must be >= 1"))
    } else {
        Ok(v)
    }
}

/// Parses and validates a config document. Relative benchmark paths are
/// resolved against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let path = e
            .span()
            .map(|s| {
                let line = text[..s.start].matches('\n').count() + 1;
                format!("line {line}")
            })
            .unwrap_or_else(|| "config".into());
        cfg_err(path, msg)
    })?;

    let repeats = positive("repeats", raw.repeats)?;
    let b = &raw.benchmark;
    let benchmark = match b.kind.as_str() {
        "synthetic" => {
            if b.path.is_some() {
                return Err(cfg_err("benchmark.path", "only allowed for kind = \"tabular\""));
            }
            let layers = b.layers.ok_or_else(|| cfg_err("benchmark.layers", "required for synthetic"))?;
            let ops = b.ops.ok_or_else(|| cfg_err("benchmark.ops", "required for synthetic"))?;
            let spec = SpaceSpec::new(
                layers,
                ops,
                b.max_edges.unwrap_or(0),
                b.single_source_sink.unwrap_or(true),
            )
            .map_err(|e| cfg_err("benchmark", e.to_string()))?;
            BenchmarkSource::Synthetic {
                spec,
                seed: b.seed.unwrap_or(0),
            }
        }
        "tabular" => {
            if b.layers.is_some() || b.ops.is_some() || b.max_edges.is_some() || b.seed.is_some() {
                return Err(cfg_err(
                    "benchmark",
                    "tabular benchmarks take only `path`; the spec comes from the file header",
                ));
            }
            let path = b.path.clone().ok_or_else(|| cfg_err("benchmark.path", "required for tabular"))?;
            BenchmarkSource::Tabular {
                path: if path.is_absolute() { path } else { base_dir.join(path) },
            }
        }
        other => {
            return Err(cfg_err(
                "benchmark.kind",
                format!("unknown kind {other:?}, expected \"synthetic\" or \"tabular\""),
            ))
        }
    };

    let s = &raw.search;
    let k = positive("search.k", s.k)?;
    let iterations = positive("search.iterations", s.iterations)?;
    if s.init_size < 2 {
        return Err(cfg_err("search.init_size", "must be >= 2"));
    }
    let input_width = match &benchmark {
        BenchmarkSource::Synthetic { spec, .. } => spec.num_ops(),
        // fixed up once the table header is read
        BenchmarkSource::Tabular { .. } => 1,
    };
    let predictor = PredictorConfig::new(
        positive("predictor.gcn_layers", raw.predictor.gcn_layers)?,
        positive("predictor.hidden_width", raw.predictor.hidden_width)?,
        input_width,
    )
    .map_err(|e| cfg_err("predictor", e.to_string()))?;
    let t = &raw.train;
    let train = TrainHyper {
        epochs: positive("train.epochs", t.epochs)?,
        lr: t.lr,
        momentum: t.momentum,
        pairs_per_epoch: positive("train.pairs_per_epoch", t.pairs_per_epoch)?,
        batch_pairs: positive("train.batch_pairs", t.batch_pairs)?,
        seed: 0,
    };
    if !(train.lr > 0.0) {
        return Err(cfg_err("train.lr", "must be > 0"));
    }
    if !(0.0..1.0).contains(&train.momentum) {
        return Err(cfg_err("train.momentum", "must be in [0, 1)"));
    }

    if raw.variants.is_empty() {
        return Err(cfg_err("variants", "at least one variant is required"));
    }
    let mut variants = Vec::with_capacity(raw.variants.len());
    for (i, v) in raw.variants.iter().enumerate() {
        let at = |f: &str| format!("variants[{i}].{f}");
        if v.name.is_empty() || v.name.contains(|c: char| c.is_whitespace() || c == ',' || c == ':') {
            return Err(cfg_err(at("name"), "must be non-empty without spaces, commas or colons"));
        }
        if variants.iter().any(|w: &Variant| w.name == v.name) {
            return Err(cfg_err(at("name"), format!("duplicate variant name {:?}", v.name)));
        }
        let (random, kind) = match v.kind.as_str() {
            "random" => (true, SamplerKind::Uniform),
            "uniform" => (false, SamplerKind::Uniform),
            "ml" => (false, SamplerKind::Ml),
            "evolutionary" => (false, SamplerKind::Evolutionary),
            other => {
                return Err(cfg_err(
                    at("kind"),
                    format!("unknown kind {other:?}, expected random, uniform, ml or evolutionary"),
                ))
            }
        };
        let n_prime = match &v.n_prime {
            None if random => SetSize::Full,
            None => return Err(cfg_err(at("n_prime"), "required (a count or \"full\")")),
            Some(RawSize::Word(w)) if w == "full" => SetSize::Full,
            Some(RawSize::Word(w)) => return Err(cfg_err(at("n_prime"), format!("expected a count or \"full\", got {w:?}"))),
            Some(RawSize::Count(n)) => SetSize::Count(positive(&at("n_prime"), *n)?),
        };
        let scorer = match v.scorer.as_deref() {
            None | Some("gcn") => Scorer::Gcn,
            Some("oracle") => Scorer::Oracle,
            Some(other) => return Err(cfg_err(at("scorer"), format!("unknown scorer {other:?}"))),
        };
        if v.evo.is_some() && kind != SamplerKind::Evolutionary {
            return Err(cfg_err(at("evo"), "only allowed for evolutionary variants"));
        }
        if v.ml.is_some() && kind != SamplerKind::Ml {
            return Err(cfg_err(at("ml"), "only allowed for ml variants"));
        }
        let e = v.evo.unwrap_or_default();
        let m = v.ml.unwrap_or_default();
        let sampler = SamplerConfig {
            kind,
            n_prime,
            ml: MlConfig {
                steps: m.steps,
                step_size: m.step_size,
                temperature: m.temperature,
                identity_ste: m.identity_ste,
            },
            evo: EvoConfig {
                parents: e.parents,
                alpha: e.alpha,
                p_mutate: e.p_mutate,
            },
        };
        sampler.check().map_err(|e| cfg_err(at("sampler"), e.to_string()))?;
        if kind == SamplerKind::Ml && scorer == Scorer::Oracle {
            return Err(cfg_err(at("scorer"), "the ml sampler needs the gcn scorer"));
        }
        variants.push(Variant {
            name: v.name.clone(),
            random,
            search: SearchConfig {
                k,
                iterations,
                init_size: s.init_size,
                sampler,
                predictor,
                train,
                scorer,
                record_sprime: !random && n_prime != SetSize::Full,
                seed: 0,
            },
        });
    }

    let text_digest: [u8; 32] = Sha256::digest(text.as_bytes()).into();
    Ok(ExperimentConfig {
        master_seed: raw.master_seed,
        repeats,
        output_dir: raw.output_dir,
        timings: raw.timings,
        benchmark,
        variants,
        grid_points: positive("gain.grid_points", raw.gain.grid_points)?,
        s_sample: positive("gain.s_sample", raw.gain.s_sample)?,
        hist_bins: positive("hist.bins", raw.hist.bins)?,
        hash: digest_hex(&text_digest, raw.master_seed),
        text_digest,
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse_config(&text, base)?)
}

/// Loads or generates the benchmark and aligns every variant's predictor
/// input width with it.
pub fn build_benchmark(cfg: &mut ExperimentConfig) -> Result<Benchmark, ExperimentError> {
    let bench = match &cfg.benchmark {
        BenchmarkSource::Synthetic { spec, seed } => synthetic_benchmark(spec, *seed)?,
        BenchmarkSource::Tabular { path } => load_tabular(path)?,
    };
    let d = bench.spec().num_ops();
    for v in &mut cfg.variants {
        v.search.predictor.input_width = d;
    }
    Ok(bench)
}

pub fn build_space(bench: &Benchmark) -> Result<SearchSpace, ExperimentError> {
    let space = SearchSpace::from_benchmark(bench).map_err(|e| ExperimentError::Data(e.to_string()))?;
    if space.is_empty() {
        return Err(ExperimentError::Data("the benchmark has no architectures".into()));
    }
    Ok(space)
}

/// The reduced data kept from one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub repeat: usize,
    pub seed: u64,
    pub rows: Vec<TraceRow>,
    /// Errors of the candidates chosen after the initial set.
    pub candidate_val: Vec<f64>,
    /// Errors of every reduced set, when recorded.
    pub sprime_val: Vec<f64>,
    /// Every evaluated error, in evaluation order.
    pub evaluated_val: Vec<f64>,
}

impl RunRecord {
    pub fn run_id(&self) -> String {
        format!("{}:{}", self.variant, self.repeat)
    }

    pub fn final_row(&self) -> &TraceRow {
        self.rows.last().expect("every run records the initial set")
    }
}

/// Executes `repeats` runs of every selected variant on a pool of `jobs`
/// threads (all cores when `None`). Output order is variant-major and does
/// not depend on scheduling.
pub fn run_all(
    cfg: &ExperimentConfig,
    bench: &Benchmark,
    space: &SearchSpace,
    filter: Option<&str>,
    jobs: Option<usize>,
) -> Result<Vec<RunRecord>, ExperimentError> {
    let selected = selected_variants(cfg, filter)?;
    let tasks: Vec<(&Variant, usize)> = selected
        .iter()
        .flat_map(|v| (0..cfg.repeats).map(move |r| (*v, r)))
        .collect();
    let work = || {
        tasks
            .par_iter()
            .map(|&(v, r)| run_one(cfg, v, r, bench, space))
            .collect::<Result<Vec<_>, _>>()
    };
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| ExperimentError::Data(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

pub fn run_one(
    cfg: &ExperimentConfig,
    variant: &Variant,
    repeat: usize,
    bench: &Benchmark,
    space: &SearchSpace,
) -> Result<RunRecord, ExperimentError> {
    let seed = run_seed(cfg.master_seed, &variant.name, repeat);
    let sc = SearchConfig { seed, ..variant.search };
    let trace = if variant.random {
        run_random_baseline(&sc, bench, space)?
    } else {
        run_search(&sc, bench, space)?
    };
    Ok(RunRecord {
        variant: variant.name.clone(),
        repeat,
        seed,
        rows: trace.rows(),
        candidate_val: trace.candidate_errors(),
        sprime_val: trace.sprime_errors(),
        evaluated_val: trace.evaluated.iter().map(|e| e.val).collect(),
    })
}

fn selected_variants<'a>(cfg: &'a ExperimentConfig, filter: Option<&str>) -> Result<Vec<&'a Variant>, ConfigError> {
    match filter {
        None => Ok(cfg.variants.iter().collect()),
        Some(name) => cfg
            .variant(name)
            .map(|v| vec![v])
            .ok_or_else(|| cfg_err("--variant", format!("no variant named {name:?}"))),
    }
}

/// Runs grouped by variant, in config order.
fn by_variant<'a>(cfg: &ExperimentConfig, runs: &'a [RunRecord]) -> Vec<(&'a str, Vec<&'a RunRecord>)> {
    let mut out: Vec<(&str, Vec<&RunRecord>)> = Vec::new();
    for v in &cfg.variants {
        let group: Vec<&RunRecord> = runs.iter().filter(|r| r.variant == v.name).collect();
        if let Some(first) = group.first() {
            out.push((first.variant.as_str(), group));
        }
    }
    out
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub n_evaluated: usize,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

/// Mean and sample standard deviation of `y*` per iteration across runs.
/// Iterations missing from some runs (exhausted spaces) use the runs that
/// have them.
pub fn mean_curve(runs: &[&RunRecord]) -> Vec<CurvePoint> {
    let len = runs.iter().map(|r| r.rows.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let rows: Vec<&TraceRow> = runs.iter().filter_map(|r| r.rows.get(i)).collect();
            let vals: Vec<f64> = rows.iter().map(|r| r.y_star_val).collect();
            let tests: Vec<f64> = rows.iter().map(|r| r.y_star_test).collect();
            let (val_mean, val_std) = mean_std(&vals);
            let (test_mean, test_std) = mean_std(&tests);
            CurvePoint {
                iteration: i,
                n_evaluated: rows[0].n_evaluated,
                val_mean,
                val_std,
                test_mean,
                test_std,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub name: String,
    pub runs: usize,
    pub final_n_evaluated: usize,
    pub final_val_mean: f64,
    pub final_val_std: f64,
    pub final_test_mean: f64,
    pub final_test_std: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub tool: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub repeats: usize,
    pub val_oracle: Option<f64>,
    pub test_oracle: Option<f64>,
    pub variants: Vec<VariantSummary>,
}

pub fn summarize(cfg: &ExperimentConfig, bench: &Benchmark, runs: &[RunRecord]) -> Summary {
    let oracles = bench.oracles().ok();
    let variants = by_variant(cfg, runs)
        .into_iter()
        .map(|(name, group)| {
            let curve = mean_curve(&group);
            let last = curve.last().expect("non-empty curve").clone();
            VariantSummary {
                name: name.to_string(),
                runs: group.len(),
                final_n_evaluated: last.n_evaluated,
                final_val_mean: last.val_mean,
                final_val_std: last.val_std,
                final_test_mean: last.test_mean,
                final_test_std: last.test_std,
                curve,
            }
        })
        .collect();
    Summary {
        tool: format!("pbnas {VERSION}"),
        config_hash: cfg.hash.clone(),
        master_seed: cfg.master_seed,
        repeats: cfg.repeats,
        val_oracle: oracles.map(|o| o.val),
        test_oracle: oracles.map(|o| o.test),
        variants,
    }
}

/// CSV text with the config banner as its first line.
pub fn csv_text(banner: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields");
    format!("{banner}\n{body}")
}

pub fn traces_csv(cfg: &ExperimentConfig, runs: &[RunRecord]) -> String {
    let rows: Vec<Vec<String>> = runs
        .iter()
        .flat_map(|r| trace_rows(&r.run_id(), &r.rows, cfg.timings))
        .collect();
    csv_text(&cfg.csv_banner(), &TRACE_CSV_COLUMNS, &rows)
}

pub const CURVE_CSV_COLUMNS: [&str; 7] =
    ["variant", "iteration", "n_evaluated", "val_mean", "val_std", "test_mean", "test_std"];

pub fn curves_csv(cfg: &ExperimentConfig, runs: &[RunRecord]) -> String {
    let mut rows = Vec::new();
    for (name, group) in by_variant(cfg, runs) {
        for p in mean_curve(&group) {
            rows.push(vec![
                name.to_string(),
                p.iteration.to_string(),
                p.n_evaluated.to_string(),
                p.val_mean.to_string(),
                p.val_std.to_string(),
                p.test_mean.to_string(),
                p.test_std.to_string(),
            ]);
        }
    }
    csv_text(&cfg.csv_banner(), &CURVE_CSV_COLUMNS, &rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub density: f64,
}

/// Fixed-width histogram over `[0, 1]`; densities integrate to one.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistBin> {
    let width = 1.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let total = values.len().max(1) as f64;
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistBin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            count,
            density: count as f64 / (total * width),
        })
        .collect()
}

pub const HIST_CSV_COLUMNS: [&str; 5] = ["variant", "bin_lo", "bin_hi", "count", "density"];

pub fn hist_csv(cfg: &ExperimentConfig, runs: &[RunRecord]) -> String {
    let mut rows = Vec::new();
    for (name, group) in by_variant(cfg, runs) {
        let pooled: Vec<f64> = group.iter().flat_map(|r| r.candidate_val.iter().copied()).collect();
        for b in histogram(&pooled, cfg.hist_bins) {
            rows.push(vec![
                name.to_string(),
                b.lo.to_string(),
                b.hi.to_string(),
                b.count.to_string(),
                b.density.to_string(),
            ]);
        }
    }
    csv_text(&cfg.csv_banner(), &HIST_CSV_COLUMNS, &rows)
}

/// Validation errors of the whole space, or of a seeded uniform sample of it
/// when it cannot be listed.
pub fn space_errors(cfg: &ExperimentConfig, bench: &Benchmark, space: &SearchSpace) -> Result<Vec<f64>, ExperimentError> {
    let archs = match space.archs() {
        Some(a) => a.to_vec(),
        None => {
            let mut rng = rng_from_seed(run_seed(cfg.master_seed, "space-sample", 0));
            uniform_sample(space, cfg.s_sample, &KeySet::new(), &mut rng)
                .map_err(|e| ExperimentError::Data(e.to_string()))?
        }
    };
    archs
        .par_iter()
        .map(|a| bench.query_val(a).map_err(ExperimentError::from))
        .collect()
}

/// The configured target grid: the default 100-point grid, or `grid_points`
/// evenly spaced targets over the same range.
pub fn gain_grid(cfg: &ExperimentConfig, s: &ErrorSample, val_oracle: f64) -> Vec<f64> {
    if cfg.grid_points == 100 {
        default_grid(val_oracle, s)
    } else {
        linear_grid(val_oracle, s.quantile(0.99).max(val_oracle), cfg.grid_points)
    }
}

fn data_err(e: crate::efficiency::EfficiencyError) -> ExperimentError {
    ExperimentError::Data(e.to_string())
}

/// Gain curve per variant over `grid`. `S'` is the pooled reduced-set sample
/// when one was recorded, and `S` itself for full-space and random variants.
pub fn gain_curves(
    cfg: &ExperimentConfig,
    s: &ErrorSample,
    grid: &[f64],
    runs: &[RunRecord],
) -> Result<Vec<(String, GainCurve)>, ExperimentError> {
    let mut out = Vec::new();
    for (name, group) in by_variant(cfg, runs) {
        let c = ErrorSample::new(group.iter().flat_map(|r| r.candidate_val.iter().copied()).collect())
            .map_err(data_err)?;
        let sp_vals: Vec<f64> = group.iter().flat_map(|r| r.sprime_val.iter().copied()).collect();
        let sp = if sp_vals.is_empty() {
            s.clone()
        } else {
            ErrorSample::new(sp_vals).map_err(data_err)?
        };
        out.push((name.to_string(), gain_curve(s, &c, grid, Some(&sp)).map_err(data_err)?));
    }
    Ok(out)
}

pub fn gain_csv(cfg: &ExperimentConfig, curves: &[(String, GainCurve)]) -> String {
    let mut header = vec!["variant"];
    header.extend(GAIN_CSV_COLUMNS);
    let mut rows = Vec::new();
    for (name, curve) in curves {
        for r in curve.rows() {
            let mut row = vec![name.clone()];
            row.extend(r);
            rows.push(row);
        }
    }
    csv_text(&cfg.csv_banner(), &header, &rows)
}

/// Per-invocation options from the command line.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub variant: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RunCache {
    config_hash: String,
    filter: Option<String>,
    runs: Vec<RunRecord>,
}

const CACHE_FILE: &str = "runs.json";

fn out_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.out_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("pbnas-out"))
}

fn write_file(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Everything the search-based subcommands need, computed once.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub bench: Benchmark,
    pub space: SearchSpace,
    pub runs: Vec<RunRecord>,
    pub out: PathBuf,
}

/// Builds the benchmark and obtains the runs, reusing `runs.json` in the
/// output directory when it was written for the same config and filter.
pub fn prepare(mut cfg: ExperimentConfig, opts: &RunOptions) -> Result<Prepared, ExperimentError> {
    selected_variants(&cfg, opts.variant.as_deref())?;
    let out = out_dir(&cfg, opts);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let bench = build_benchmark(&mut cfg)?;
    let space = build_space(&bench)?;
    let cache_path = out.join(CACHE_FILE);
    let cached = fs::read_to_string(&cache_path)
        .ok()
        .and_then(|t| serde_json::from_str::<RunCache>(&t).ok())
        .filter(|c| c.config_hash == cfg.hash && c.filter == opts.variant);
    let runs = match cached {
        Some(c) => c.runs,
        None => {
            let runs = run_all(&cfg, &bench, &space, opts.variant.as_deref(), opts.jobs)?;
            let cache = RunCache {
                config_hash: cfg.hash.clone(),
                filter: opts.variant.clone(),
                runs,
            };
            let text = serde_json::to_string(&cache).map_err(|e| ExperimentError::Data(e.to_string()))?;
            write_file(&cache_path, &text)?;
            cache.runs
        }
    };
    Ok(Prepared {
        cfg,
        bench,
        space,
        runs,
        out,
    })
}

/// `search`: traces.csv, curves.csv and summary.json.
pub fn cmd_search(cfg: ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>, ExperimentError> {
    let p = prepare(cfg, opts)?;
    let files = [
        ("traces.csv", traces_csv(&p.cfg, &p.runs)),
        ("curves.csv", curves_csv(&p.cfg, &p.runs)),
        (
            "summary.json",
            serde_json::to_string_pretty(&summarize(&p.cfg, &p.bench, &p.runs))
                .map_err(|e| ExperimentError::Data(e.to_string()))?
                + "\n",
        ),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = p.out.join(name);
        write_file(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

/// `hist`: hist.csv of pooled candidate errors per variant.
pub fn cmd_hist(cfg: ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>, ExperimentError> {
    let p = prepare(cfg, opts)?;
    let path = p.out.join("hist.csv");
    write_file(&path, &hist_csv(&p.cfg, &p.runs))?;
    Ok(vec![path])
}

/// `gain`: gain.csv with total and decomposed gain per variant.
pub fn cmd_gain(cfg: ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>, ExperimentError> {
    let p = prepare(cfg, opts)?;
    let s = ErrorSample::new(space_errors(&p.cfg, &p.bench, &p.space)?).map_err(data_err)?;
    let oracle = match p.bench.oracles() {
        Ok(o) => o.val,
        Err(_) => s.sorted()[0],
    };
    let grid = gain_grid(&p.cfg, &s, oracle);
    let curves = gain_curves(&p.cfg, &s, &grid, &p.runs)?;
    let path = p.out.join("gain.csv");
    write_file(&path, &gain_csv(&p.cfg, &curves))?;
    Ok(vec![path])
}

/// `bench-gen`: enumerates `spec`, evaluates the synthetic oracle and writes
/// the tabular file. Returns the record count.
pub fn cmd_bench_gen(spec: &SpaceSpec, seed: u64, out: &Path) -> Result<usize, ExperimentError> {
    let bench = synthetic_benchmark(spec, seed)?;
    if !bench.is_enumerable() {
        return Err(ExperimentError::Data(format!(
            "L={} d={} is too large to enumerate",
            spec.num_layers(),
            spec.num_ops()
        )));
    }
    let table = bench.to_tabular()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    table.save_tabular(out)?;
    Ok(table.len()?)
}
