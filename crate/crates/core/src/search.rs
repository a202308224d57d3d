//! The predictor-guided search loop and the random-search baseline.
//!
//! Each iteration retrains the predictor from scratch on everything evaluated
//! so far, builds `S'`, scores it, evaluates the `K` best-scored unseen
//! architectures and extends the training set.

use std::cmp::Ordering;
use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch_space::{ArchKey, Architecture};
use crate::bench_oracle::{BenchError, Benchmark};
use crate::predictor::{score_set, train, PredictorConfig, PredictorError, PredictorParams, TrainHyper};
use crate::samplers::{
    evolutionary_sample, ml_sample, resolve_size, uniform_sample, KeySet, Origin, SamplerConfig, SamplerError,
    SamplerKind, SearchSpace, SetSize,
};
use crate::seeding::rng_from_seed;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

/// What ranks `S'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scorer {
    Gcn,
    /// Negated true validation error; a perfect predictor for diagnostics.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Candidates evaluated per iteration.
    pub k: usize,
    pub iterations: usize,
    pub init_size: usize,
    pub sampler: SamplerConfig,
    pub predictor: PredictorConfig,
    pub train: TrainHyper,
    pub scorer: Scorer,
    /// Keep the validation errors of every `S'` in the trace.
    pub record_sprime: bool,
    pub seed: u64,
}

impl SearchConfig {
    pub fn check(&self) -> Result<(), SearchError> {
        if self.k == 0 || self.iterations == 0 || self.init_size < 2 {
            return Err(SearchError::Config(format!(
                "need k >= 1, iterations >= 1, init_size >= 2 (got {}, {}, {})",
                self.k, self.iterations, self.init_size
            )));
        }
        self.sampler.check()?;
        self.train.check()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub arch: Architecture,
    pub val: f64,
    pub test: f64,
    /// 0 for the initial random set.
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseSeconds {
    pub train: f64,
    pub sample: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub candidates: Vec<ArchKey>,
    pub candidate_val: Vec<f64>,
    pub n_evaluated: usize,
    pub y_star_val: f64,
    pub y_star_test: f64,
    /// Fewer than `K` unseen architectures were left.
    pub short: bool,
    /// Training had no ranking signal and candidates were drawn uniformly.
    pub untrained: bool,
    pub sprime_size: usize,
    pub sprime_val: Vec<f64>,
    pub origins: Vec<Origin>,
    pub seconds: PhaseSeconds,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchTrace {
    /// Every evaluation in order, the initial set first.
    pub evaluated: Vec<Evaluation>,
    /// Iteration 0 describes the initial set.
    pub iterations: Vec<IterationRecord>,
}

impl SearchTrace {
    pub fn y_star_val(&self) -> f64 {
        self.iterations.last().map_or(f64::NAN, |r| r.y_star_val)
    }

    /// Best validation error after the first `n` evaluations.
    pub fn best_after(&self, n: usize) -> f64 {
        self.evaluated
            .iter()
            .take(n)
            .map(|e| e.val)
            .fold(f64::INFINITY, f64::min)
    }

    /// 1-based position of the first evaluation with error at most `target`.
    pub fn first_hit(&self, target: f64) -> Option<usize> {
        self.evaluated.iter().position(|e| e.val <= target).map(|i| i + 1)
    }

    /// Validation errors of every candidate chosen after the initial set.
    pub fn candidate_errors(&self) -> Vec<f64> {
        self.iterations.iter().skip(1).flat_map(|r| r.candidate_val.iter().copied()).collect()
    }

    pub fn sprime_errors(&self) -> Vec<f64> {
        self.iterations.iter().flat_map(|r| r.sprime_val.iter().copied()).collect()
    }

    pub fn rows(&self) -> Vec<TraceRow> {
        self.iterations
            .iter()
            .map(|r| TraceRow {
                iteration: r.iteration,
                n_evaluated: r.n_evaluated,
                y_star_val: r.y_star_val,
                y_star_test: r.y_star_test,
                seconds: r.seconds,
            })
            .collect()
    }
}

/// One line of the trace CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub n_evaluated: usize,
    pub y_star_val: f64,
    pub y_star_test: f64,
    pub seconds: PhaseSeconds,
}

pub const TRACE_CSV_COLUMNS: [&str; 8] = [
    "run_id",
    "iteration",
    "n_evaluated",
    "y_star_val",
    "y_star_test",
    "phase_seconds_train",
    "phase_seconds_sample",
    "phase_seconds_score",
];

/// Trace rows. Phase times are written as 0 unless `timings` is set, so that
/// reruns stay byte-identical.
pub fn trace_rows(run_id: &str, rows: &[TraceRow], timings: bool) -> Vec<Vec<String>> {
    let t = |x: f64| if timings { format!("{x:.6}") } else { "0".to_string() };
    rows.iter()
        .map(|r| {
            vec![
                run_id.to_string(),
                r.iteration.to_string(),
                r.n_evaluated.to_string(),
                r.y_star_val.to_string(),
                r.y_star_test.to_string(),
                t(r.seconds.train),
                t(r.seconds.sample),
                t(r.seconds.score),
            ]
        })
        .collect()
}

pub fn write_trace_csv<W: Write>(out: W, run_id: &str, trace: &SearchTrace, timings: bool) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_CSV_COLUMNS)?;
    for row in trace_rows(run_id, &trace.rows(), timings) {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn rank(a: (f64, &ArchKey), b: (f64, &ArchKey)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Indices of the `k` highest scores among entries whose key is not in
/// `evaluated`, best first, ties to the smaller key. The flag is set when
/// fewer than `k` were available.
pub fn pick_best_k_keyed(keys: &[ArchKey], scores: &[f64], k: usize, evaluated: &KeySet) -> (Vec<usize>, bool) {
    assert_eq!(keys.len(), scores.len(), "one score per architecture");
    let mut open: Vec<usize> = (0..keys.len()).filter(|&i| !evaluated.contains(&keys[i])).collect();
    let by = |&a: &usize, &b: &usize| rank((scores[a], &keys[a]), (scores[b], &keys[b]));
    if open.len() > k && k > 0 {
        open.select_nth_unstable_by(k - 1, by);
        open.truncate(k);
    }
    open.sort_by(by);
    let short = open.len() < k;
    open.truncate(k);
    (open, short)
}

/// The `k` best-scored architectures not yet evaluated, in descending score
/// order, and whether fewer than `k` were available.
pub fn pick_best_k(
    archs: &[Architecture],
    scores: &[f64],
    k: usize,
    evaluated: &KeySet,
) -> (Vec<Architecture>, bool) {
    let keys: Vec<ArchKey> = archs.iter().map(Architecture::key).collect();
    let (idx, short) = pick_best_k_keyed(&keys, scores, k, evaluated);
    (idx.into_iter().map(|i| archs[i].clone()).collect(), short)
}

/// Running state shared by the search and the baseline.
struct RunState<'a> {
    bench: &'a Benchmark,
    trace: SearchTrace,
    seen: KeySet,
    best: Option<(f64, f64)>,
}

impl<'a> RunState<'a> {
    fn new(bench: &'a Benchmark) -> Self {
        Self {
            bench,
            trace: SearchTrace::default(),
            seen: KeySet::new(),
            best: None,
        }
    }

    fn evaluate(&mut self, archs: Vec<Architecture>, iteration: usize) -> Result<(Vec<ArchKey>, Vec<f64>), SearchError> {
        let mut keys = Vec::with_capacity(archs.len());
        let mut vals = Vec::with_capacity(archs.len());
        for arch in archs {
            let rec = self.bench.record(&arch)?;
            let (val, test) = (rec.mean_val(), rec.mean_test());
            if self.best.map_or(true, |(v, _)| val < v) {
                self.best = Some((val, test));
            }
            let key = arch.key();
            self.seen.insert(key.clone());
            keys.push(key);
            vals.push(val);
            self.trace.evaluated.push(Evaluation { arch, val, test, iteration });
        }
        Ok((keys, vals))
    }

    fn record(&mut self, mut rec: IterationRecord) {
        let (v, t) = self.best.unwrap_or((f64::NAN, f64::NAN));
        rec.y_star_val = v;
        rec.y_star_test = t;
        rec.n_evaluated = self.trace.evaluated.len();
        self.trace.iterations.push(rec);
    }

    fn training_set(&self) -> Vec<(Architecture, f64)> {
        self.trace.evaluated.iter().map(|e| (e.arch.clone(), e.val)).collect()
    }
}

fn blank(iteration: usize) -> IterationRecord {
    IterationRecord {
        iteration,
        candidates: Vec::new(),
        candidate_val: Vec::new(),
        n_evaluated: 0,
        y_star_val: f64::NAN,
        y_star_test: f64::NAN,
        short: false,
        untrained: false,
        sprime_size: 0,
        sprime_val: Vec::new(),
        origins: Vec::new(),
        seconds: PhaseSeconds::default(),
    }
}

fn initial_set<R: Rng>(
    state: &mut RunState,
    space: &SearchSpace,
    init_size: usize,
    rng: &mut R,
) -> Result<(), SearchError> {
    let t0 = uniform_sample(space, init_size, &KeySet::new(), rng)?;
    let (keys, vals) = state.evaluate(t0, 0)?;
    let mut rec = blank(0);
    rec.candidates = keys;
    rec.candidate_val = vals;
    state.record(rec);
    Ok(())
}

fn check_space(bench: &Benchmark, space: &SearchSpace) -> Result<(), SearchError> {
    if bench.spec() != space.spec() {
        return Err(SearchError::Config("benchmark and search space specs differ".into()));
    }
    Ok(())
}

/// Runs the predictor-guided search. Fully determined by `cfg.seed`.
pub fn run_search(cfg: &SearchConfig, bench: &Benchmark, space: &SearchSpace) -> Result<SearchTrace, SearchError> {
    cfg.check()?;
    check_space(bench, space)?;
    if cfg.predictor.input_width != space.spec().num_ops() {
        return Err(SearchError::Config("predictor input width differs from the space's op count".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut state = RunState::new(bench);
    initial_set(&mut state, space, cfg.init_size, &mut rng)?;

    for t in 1..=cfg.iterations {
        if space.available(&state.seen) == Some(0) {
            break;
        }
        let mut rec = blank(t);
        let init_seed: u64 = rng.gen();
        let train_seed: u64 = rng.gen();

        let clock = Instant::now();
        let trained = match cfg.scorer {
            Scorer::Oracle => None,
            Scorer::Gcn => {
                let params = PredictorParams::init(&cfg.predictor, &mut rng_from_seed(init_seed));
                let hyper = TrainHyper { seed: train_seed, ..cfg.train };
                match train(params, &cfg.predictor, &hyper, &state.training_set()) {
                    Ok((p, _)) => Some(p),
                    Err(PredictorError::NoRankingSignal) => {
                        rec.untrained = true;
                        None
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        rec.seconds.train = clock.elapsed().as_secs_f64();

        if rec.untrained {
            let n = cfg.k.min(space.available(&state.seen).unwrap_or(cfg.k));
            rec.short = n < cfg.k;
            let picked = uniform_sample(space, n, &state.seen, &mut rng)?;
            let (keys, vals) = state.evaluate(picked, t)?;
            rec.candidates = keys;
            rec.candidate_val = vals;
            state.record(rec);
            continue;
        }

        let score = |archs: &[Architecture]| -> Result<Vec<f64>, SearchError> {
            match &trained {
                Some(p) => Ok(score_set(p, &cfg.predictor, archs)),
                None => archs
                    .iter()
                    .map(|a| Ok(-bench.query_val(a)?))
                    .collect::<Result<Vec<f64>, SearchError>>(),
            }
        };

        let full = cfg.sampler.kind == SamplerKind::Uniform && cfg.sampler.n_prime == SetSize::Full;
        let picked = if full {
            // score the cached space and mask what has been evaluated
            let archs = space
                .archs()
                .ok_or_else(|| SearchError::Config("n_prime = full needs an enumerable space".into()))?;
            let keys = space.keys().expect("enumerable");
            let clock = Instant::now();
            let scores = score(archs)?;
            rec.seconds.score = clock.elapsed().as_secs_f64();
            rec.sprime_size = archs.len() - state.seen.len();
            let (idx, short) = pick_best_k_keyed(keys, &scores, cfg.k, &state.seen);
            rec.short = short;
            idx.into_iter().map(|i| archs[i].clone()).collect::<Vec<_>>()
        } else {
            let mut n = resolve_size(cfg.sampler.n_prime, space, &state.seen)?;
            if let Some(avail) = space.available(&state.seen) {
                n = n.min(avail);
            }
            let clock = Instant::now();
            let sprime = match cfg.sampler.kind {
                SamplerKind::Uniform => uniform_sample(space, n, &state.seen, &mut rng)?,
                SamplerKind::Ml => {
                    let p = trained
                        .as_ref()
                        .ok_or_else(|| SearchError::Config("the ml sampler needs the gcn scorer".into()))?;
                    ml_sample(p, &cfg.predictor, space, &cfg.sampler.ml, n, &state.seen, &mut rng)?
                }
                SamplerKind::Evolutionary => {
                    let out = evolutionary_sample(
                        &state.training_set(),
                        &cfg.sampler.evo,
                        space,
                        n,
                        &state.seen,
                        &mut rng,
                    )?;
                    rec.origins = out.origins;
                    out.archs
                }
            };
            rec.seconds.sample = clock.elapsed().as_secs_f64();
            rec.sprime_size = sprime.len();
            if cfg.record_sprime {
                rec.sprime_val = sprime.iter().map(|a| bench.query_val(a)).collect::<Result<_, _>>()?;
            }
            let clock = Instant::now();
            let scores = score(&sprime)?;
            rec.seconds.score = clock.elapsed().as_secs_f64();
            let (c, short) = pick_best_k(&sprime, &scores, cfg.k, &state.seen);
            rec.short = short;
            c
        };
        let (keys, vals) = state.evaluate(picked, t)?;
        rec.candidates = keys;
        rec.candidate_val = vals;
        state.record(rec);
    }
    Ok(state.trace)
}

/// Random search: the initial set and then `K` uniform draws per iteration,
/// all without replacement.
pub fn run_random_baseline(
    cfg: &SearchConfig,
    bench: &Benchmark,
    space: &SearchSpace,
) -> Result<SearchTrace, SearchError> {
    cfg.check()?;
    check_space(bench, space)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut state = RunState::new(bench);
    initial_set(&mut state, space, cfg.init_size, &mut rng)?;
    for t in 1..=cfg.iterations {
        let avail = space.available(&state.seen);
        if avail == Some(0) {
            break;
        }
        let n = cfg.k.min(avail.unwrap_or(cfg.k));
        let mut rec = blank(t);
        rec.short = n < cfg.k;
        let picked = uniform_sample(space, n, &state.seen, &mut rng)?;
        let (keys, vals) = state.evaluate(picked, t)?;
        rec.candidates = keys;
        rec.candidate_val = vals;
        state.record(rec);
    }
    Ok(state.trace)
}
