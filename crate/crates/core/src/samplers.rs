//! Strategies for building the reduced set `S'` that the predictor scores.
//!
//! Every sampler returns distinct valid architectures of the search space,
//! none of them in the caller's exclusion set (the architectures evaluated so
//! far).

use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::arch_space::{
    crossover, enumerate, is_valid, mutate, random_architecture, repair, ArchKey, Architecture, SpaceError,
    SpaceSpec,
};
use crate::bench_oracle::{BenchError, Benchmark};
use crate::predictor::{backward_inputs, forward_relaxed, PredictorConfig, PredictorError, PredictorParams};
use crate::seeding::rng_from_seed;

pub type KeySet = HashSet<ArchKey>;

/// ML ascent attempts per missing element before uniform fallback.
pub const ML_RETRIES: usize = 10;
/// Consecutive rejected offspring before the evolutionary sampler falls back.
pub const EVO_MAX_REJECTIONS: usize = 1000;
/// Consecutive rejected draws before a generator-mode uniform sample gives up.
const GENERATOR_MAX_REJECTIONS: usize = 100_000;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("asked for {requested} architectures but only {available} are available")]
    Exhausted { requested: usize, available: usize },
    #[error("evolutionary sampling needs a non-empty population")]
    EmptyPopulation,
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Uniform,
    Ml,
    Evolutionary,
}

/// Target size of `S'`; `Full` means every architecture not yet evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetSize {
    Full,
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlConfig {
    pub steps: usize,
    pub step_size: f64,
    pub temperature: f64,
    /// Pass raw gradients to the feature shadows instead of composing them
    /// with the softmax Jacobian.
    pub identity_ste: bool,
}

impl Default for MlConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 0.1,
            temperature: 1.0,
            identity_ste: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvoConfig {
    pub parents: usize,
    /// Fraction of `S'` produced by mutation; the rest comes from crossover.
    pub alpha: f64,
    pub p_mutate: f64,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            parents: 16,
            alpha: 0.5,
            p_mutate: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub n_prime: SetSize,
    pub ml: MlConfig,
    pub evo: EvoConfig,
}

impl SamplerConfig {
    pub fn uniform(n_prime: SetSize) -> Self {
        Self {
            kind: SamplerKind::Uniform,
            n_prime,
            ml: MlConfig::default(),
            evo: EvoConfig::default(),
        }
    }

    pub fn check(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::Config(m));
        if self.n_prime == SetSize::Count(0) {
            return bad("n_prime must be >= 1".into());
        }
        if self.n_prime == SetSize::Full && self.kind != SamplerKind::Uniform {
            return bad("n_prime = full is only meaningful for the uniform sampler".into());
        }
        let e = &self.evo;
        if e.parents == 0 || !(0.0..=1.0).contains(&e.alpha) || !(e.p_mutate > 0.0 && e.p_mutate < 1.0) {
            return bad(format!(
                "evo needs parents >= 1, 0 <= alpha <= 1, 0 < p_mutate < 1 (got {}, {}, {})",
                e.parents, e.alpha, e.p_mutate
            ));
        }
        let m = &self.ml;
        if !(m.step_size >= 0.0) || !(m.temperature > 0.0) {
            return bad(format!(
                "ml needs step_size >= 0 and temperature > 0 (got {}, {})",
                m.step_size, m.temperature
            ));
        }
        Ok(())
    }
}

/// The set `S`: either a cached list of members or the random generator over
/// a space too large to enumerate.
#[derive(Debug, Clone)]
pub struct SearchSpace {
    spec: SpaceSpec,
    members: Option<Members>,
}

#[derive(Debug, Clone)]
struct Members {
    archs: Vec<Architecture>,
    keys: Vec<ArchKey>,
    index: HashMap<ArchKey, usize>,
}

impl SearchSpace {
    pub fn enumerated(spec: SpaceSpec) -> Result<Self, SamplerError> {
        Ok(Self::from_list(spec, enumerate(&spec)?.collect()))
    }

    pub fn generator(spec: SpaceSpec) -> Self {
        Self { spec, members: None }
    }

    /// Members are taken as given; duplicates keep their first position.
    pub fn from_list(spec: SpaceSpec, archs: Vec<Architecture>) -> Self {
        let keys: Vec<ArchKey> = archs.iter().map(Architecture::key).collect();
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            index.entry(k.clone()).or_insert(i);
        }
        Self {
            spec,
            members: Some(Members { archs, keys, index }),
        }
    }

    /// The benchmark's architectures when it can list them, the generator
    /// otherwise.
    pub fn from_benchmark(bench: &Benchmark) -> Result<Self, SamplerError> {
        if bench.is_enumerable() {
            Ok(Self::from_list(*bench.spec(), bench.architectures()?))
        } else {
            Ok(Self::generator(*bench.spec()))
        }
    }

    pub fn spec(&self) -> &SpaceSpec {
        &self.spec
    }

    pub fn len(&self) -> Option<usize> {
        self.members.as_ref().map(|m| m.archs.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    pub fn archs(&self) -> Option<&[Architecture]> {
        self.members.as_ref().map(|m| m.archs.as_slice())
    }

    pub fn keys(&self) -> Option<&[ArchKey]> {
        self.members.as_ref().map(|m| m.keys.as_slice())
    }

    pub fn index_of(&self, key: &ArchKey) -> Option<usize> {
        self.members.as_ref().and_then(|m| m.index.get(key).copied())
    }

    pub fn contains(&self, arch: &Architecture) -> bool {
        match &self.members {
            Some(m) => m.index.contains_key(&arch.key()),
            None => is_valid(arch, &self.spec),
        }
    }

    /// Number of members outside `exclude`, when enumerable.
    pub fn available(&self, exclude: &KeySet) -> Option<usize> {
        self.members
            .as_ref()
            .map(|m| m.keys.iter().filter(|k| !exclude.contains(*k)).count())
    }

    /// A uniformly drawn member, used by fallbacks.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Architecture, SamplerError> {
        match &self.members {
            Some(m) if !m.archs.is_empty() => Ok(m.archs[rng.gen_range(0..m.archs.len())].clone()),
            Some(_) => Err(SamplerError::Exhausted {
                requested: 1,
                available: 0,
            }),
            None => Ok(random_architecture(&self.spec, rng)?),
        }
    }
}

/// Resolves the requested size against what the space still offers.
pub fn resolve_size(n_prime: SetSize, space: &SearchSpace, exclude: &KeySet) -> Result<usize, SamplerError> {
    match (n_prime, space.available(exclude)) {
        (SetSize::Count(n), _) => Ok(n),
        (SetSize::Full, Some(a)) => Ok(a),
        (SetSize::Full, None) => Err(SamplerError::Config(
            "n_prime = full needs an enumerable space".into(),
        )),
    }
}

/// `n` distinct members drawn with equal probability, none in `exclude`.
pub fn uniform_sample<R: Rng + ?Sized>(
    space: &SearchSpace,
    n: usize,
    exclude: &KeySet,
    rng: &mut R,
) -> Result<Vec<Architecture>, SamplerError> {
    match &space.members {
        Some(m) => {
            let avail: Vec<usize> = (0..m.archs.len()).filter(|&i| !exclude.contains(&m.keys[i])).collect();
            if n > avail.len() {
                return Err(SamplerError::Exhausted {
                    requested: n,
                    available: avail.len(),
                });
            }
            Ok(index::sample(rng, avail.len(), n)
                .into_iter()
                .map(|i| m.archs[avail[i]].clone())
                .collect())
        }
        None => {
            let mut seen = KeySet::with_capacity(n);
            let mut out = Vec::with_capacity(n);
            let mut rejections = 0;
            while out.len() < n {
                let a = random_architecture(&space.spec, rng)?;
                let k = a.key();
                if exclude.contains(&k) || !seen.insert(k) {
                    rejections += 1;
                    if rejections >= GENERATOR_MAX_REJECTIONS {
                        return Err(SamplerError::Exhausted {
                            requested: n,
                            available: out.len(),
                        });
                    }
                    continue;
                }
                rejections = 0;
                out.push(a);
            }
            Ok(out)
        }
    }
}

/// Tops `out` up to `n` with uniform members not in `exclude` or `out`.
fn fill_uniform<R: Rng + ?Sized>(
    space: &SearchSpace,
    n: usize,
    exclude: &KeySet,
    out: &mut Vec<Architecture>,
    seen: &mut KeySet,
    rng: &mut R,
) -> Result<(), SamplerError> {
    if out.len() >= n {
        return Ok(());
    }
    let mut blocked = exclude.clone();
    blocked.extend(seen.iter().cloned());
    let extra = uniform_sample(space, n - out.len(), &blocked, rng)?;
    for a in extra {
        seen.insert(a.key());
        out.push(a);
    }
    Ok(())
}

/// Continuous stand-ins for an architecture during gradient ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct Shadows {
    pub num_layers: usize,
    pub num_ops: usize,
    /// `L x L`; only the strict upper triangle is used.
    pub adjacency: Vec<f64>,
    /// `L x d`.
    pub features: Vec<f64>,
}

impl Shadows {
    pub fn random<R: Rng + ?Sized>(spec: &SpaceSpec, rng: &mut R) -> Self {
        let (l, d) = (spec.num_layers(), spec.num_ops());
        let mut adjacency = vec![0.0; l * l];
        for i in 0..l {
            for j in (i + 1)..l {
                adjacency[i * l + j] = rng.gen_range(-1.0..=1.0);
            }
        }
        let features = (0..l * d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        Self {
            num_layers: l,
            num_ops: d,
            adjacency,
            features,
        }
    }

    /// Upper-triangular `1[a > 0]` and per-row argmax one-hot features, as
    /// real matrices.
    pub fn binarize(&self) -> (Vec<f64>, Vec<f64>) {
        let (l, d) = (self.num_layers, self.num_ops);
        let mut adj = vec![0.0; l * l];
        for i in 0..l {
            for j in (i + 1)..l {
                if self.adjacency[i * l + j] > 0.0 {
                    adj[i * l + j] = 1.0;
                }
            }
        }
        let mut feat = vec![0.0; l * d];
        for (row, out) in self.features.chunks(d).zip(feat.chunks_mut(d)) {
            out[argmax(row)] = 1.0;
        }
        (adj, feat)
    }

    pub fn to_architecture(&self) -> Architecture {
        let (l, d) = (self.num_layers, self.num_ops);
        let edges: Vec<(usize, usize)> = (0..l)
            .flat_map(|i| ((i + 1)..l).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[i * l + j] > 0.0)
            .collect();
        let ops: Vec<usize> = self.features.chunks(d).map(argmax).collect();
        Architecture::from_edges(l, d, &edges, &ops).expect("binarized shadows are well-formed")
    }
}

/// Index of the largest entry; the first one wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Gradient ascent on the shadows, differentiating at the binarized point and
/// passing gradients straight through the thresholds.
pub fn ascend(
    shadows: &mut Shadows,
    params: &PredictorParams,
    config: &PredictorConfig,
    ml: &MlConfig,
) -> Result<(), PredictorError> {
    let (l, d) = (shadows.num_layers, shadows.num_ops);
    for _ in 0..ml.steps {
        let (adj, feat) = shadows.binarize();
        let cache = forward_relaxed(params, config, &adj, &feat, l)?;
        let g = backward_inputs(&cache, params, config, 1.0)?;
        for i in 0..l {
            for j in (i + 1)..l {
                shadows.adjacency[i * l + j] += ml.step_size * g.adjacency[i * l + j];
            }
        }
        for (row, grow) in shadows.features.chunks_mut(d).zip(g.features.chunks(d)) {
            if ml.identity_ste {
                for (x, gv) in row.iter_mut().zip(grow) {
                    *x += ml.step_size * gv;
                }
                continue;
            }
            let s = softmax(row, ml.temperature);
            let inner: f64 = s.iter().zip(grow).map(|(a, b)| a * b).sum();
            for ((x, sv), gv) in row.iter_mut().zip(&s).zip(grow) {
                *x += ml.step_size * sv * (gv - inner) / ml.temperature;
            }
        }
    }
    Ok(())
}

fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Predictor-guided sampling: `n` independent ascents from random shadows,
/// each result repaired to validity and deduplicated. Missing elements are
/// retried up to [`ML_RETRIES`] rounds, then filled uniformly.
pub fn ml_sample<R: Rng + ?Sized>(
    params: &PredictorParams,
    config: &PredictorConfig,
    space: &SearchSpace,
    ml: &MlConfig,
    n: usize,
    exclude: &KeySet,
    rng: &mut R,
) -> Result<Vec<Architecture>, SamplerError> {
    let spec = *space.spec();
    let mut out = Vec::with_capacity(n);
    let mut seen = KeySet::with_capacity(n);
    for _ in 0..ML_RETRIES {
        let need = n - out.len();
        if need == 0 {
            break;
        }
        let seeds: Vec<u64> = (0..need).map(|_| rng.gen()).collect();
        let proposals: Vec<Option<Architecture>> = seeds
            .par_iter()
            .map(|&seed| {
                let mut r = rng_from_seed(seed);
                let mut sh = Shadows::random(&spec, &mut r);
                ascend(&mut sh, params, config, ml)?;
                Ok(repair(&sh.to_architecture(), &spec))
            })
            .collect::<Result<_, PredictorError>>()?;
        for a in proposals.into_iter().flatten() {
            let k = a.key();
            if space.contains(&a) && !exclude.contains(&k) && !seen.contains(&k) {
                seen.insert(k);
                out.push(a);
            }
        }
    }
    fill_uniform(space, n, exclude, &mut out, &mut seen, rng)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Mutation,
    Crossover,
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvoSample {
    pub archs: Vec<Architecture>,
    pub origins: Vec<Origin>,
}

/// The `p` lowest-error members of `population`, ties broken by key.
pub fn best_parents(population: &[(Architecture, f64)], p: usize) -> Vec<Architecture> {
    let mut ranked: Vec<(f64, ArchKey, &Architecture)> =
        population.iter().map(|(a, e)| (*e, a.key(), a)).collect();
    ranked.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)));
    ranked.into_iter().take(p).map(|(_, _, a)| a.clone()).collect()
}

/// Mutation while `|S'| < alpha n`, crossover afterwards, from parents drawn
/// uniformly with replacement among the best `P` of the population.
pub fn evolutionary_sample<R: Rng + ?Sized>(
    population: &[(Architecture, f64)],
    evo: &EvoConfig,
    space: &SearchSpace,
    n: usize,
    exclude: &KeySet,
    rng: &mut R,
) -> Result<EvoSample, SamplerError> {
    if population.is_empty() {
        return Err(SamplerError::EmptyPopulation);
    }
    let spec = space.spec();
    let parents = best_parents(population, evo.parents);
    let mutation_quota = evo.alpha * n as f64;
    let mut archs = Vec::with_capacity(n);
    let mut origins = Vec::with_capacity(n);
    let mut seen = KeySet::with_capacity(n);
    let mut rejections = 0;
    while archs.len() < n && rejections < EVO_MAX_REJECTIONS {
        let a1 = &parents[rng.gen_range(0..parents.len())];
        let a2 = &parents[rng.gen_range(0..parents.len())];
        let (child, origin) = if (archs.len() as f64) < mutation_quota {
            (mutate(a1, evo.p_mutate, spec, rng)?, Origin::Mutation)
        } else {
            (crossover(a1, a2, spec, rng)?, Origin::Crossover)
        };
        let k = child.key();
        if !space.contains(&child) || exclude.contains(&k) || seen.contains(&k) {
            rejections += 1;
            continue;
        }
        rejections = 0;
        seen.insert(k);
        archs.push(child);
        origins.push(origin);
    }
    let before = archs.len();
    fill_uniform(space, n, exclude, &mut archs, &mut seen, rng)?;
    origins.resize(before.max(archs.len()), Origin::Fallback);
    Ok(EvoSample { archs, origins })
}

/// Any member of the space not in `exclude`, for degenerate fallbacks.
pub fn any_member<R: Rng + ?Sized>(
    space: &SearchSpace,
    exclude: &KeySet,
    rng: &mut R,
) -> Result<Architecture, SamplerError> {
    if space.len().is_some() {
        return Ok(uniform_sample(space, 1, exclude, rng)?.remove(0));
    }
    loop {
        let a = space.draw(rng)?;
        if !exclude.contains(&a.key()) {
            return Ok(a);
        }
    }
}
