//! Trials-until-success calculus for comparing sampling schemes.
//!
//! Draw without replacement from a set of `K` architectures of which `M` reach
//! the target error. The first success happens at trial `k` with probability
//! `(M / k) C(K - M, k - 1) / C(K, k)`, and the expected trial index is
//! `(K + 1) / (M + 1)`. Two schemes are compared by the ratio of their
//! expectations, expressed in decibels.

use std::path::Path;

use num_rational::Ratio;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::bench_oracle::quantile_sorted;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EfficiencyError {
    #[error("success count M={m} exceeds set size K={k}")]
    TooManySuccesses { k: u64, m: u64 },
    #[error("error sample is empty")]
    EmptySample,
    #[error("error value {0} is not in [0, 1]")]
    OutOfRange(f64),
    #[error("J_target grid must be sorted ascending")]
    UnsortedGrid,
    #[error("exact arithmetic limited to K <= {EXACT_LIMIT}, got {0}")]
    ExactTooLarge(u64),
}

/// Largest set size handled by the rational path.
pub const EXACT_LIMIT: u64 = 20;

/// Products up to this many factors are evaluated directly; beyond it the
/// pmf goes through log-gamma.
const DIRECT_PRODUCT_LIMIT: u64 = 256;

fn check_km(k: u64, m: u64) -> Result<(), EfficiencyError> {
    if m > k {
        Err(EfficiencyError::TooManySuccesses { k, m })
    } else {
        Ok(())
    }
}

fn ln_choose(n: u64, r: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(r as f64 + 1.0) - ln_gamma((n - r) as f64 + 1.0)
}

/// Probability that the first success is drawn at trial `trial` (1-based).
/// Trials outside `1..=K-M+1` have probability 0, as does every trial when
/// `M = 0`.
pub fn trial_pmf(k: u64, m: u64, trial: u64) -> Result<f64, EfficiencyError> {
    check_km(k, m)?;
    if m == 0 || trial == 0 || trial > k - m + 1 {
        return Ok(0.0);
    }
    if trial <= DIRECT_PRODUCT_LIMIT {
        // M / (K - k + 1) * prod_{i < k-1} (K - M - i) / (K - i)
        let mut p = m as f64 / (k - trial + 1) as f64;
        for i in 0..trial - 1 {
            p *= (k - m - i) as f64 / (k - i) as f64;
        }
        return Ok(p);
    }
    let ln = (m as f64).ln() - (trial as f64).ln() + ln_choose(k - m, trial - 1) - ln_choose(k, trial);
    Ok(ln.exp())
}

/// The whole first-success distribution, index `i` holding trial `i + 1`.
pub fn trial_distribution(k: u64, m: u64) -> Result<Vec<f64>, EfficiencyError> {
    check_km(k, m)?;
    if m == 0 {
        return Ok(Vec::new());
    }
    let len = (k - m + 1) as usize;
    let mut out = Vec::with_capacity(len);
    let mut p = m as f64 / k as f64;
    out.push(p);
    for t in 1..len as u64 {
        // p(t + 1) / p(t) = (K - M - t + 1) / (K - t)
        p *= (k - m - t + 1) as f64 / (k - t) as f64;
        out.push(p);
    }
    Ok(out)
}

/// Exact first-success probability for `K <= EXACT_LIMIT`.
pub fn trial_pmf_exact(k: u64, m: u64, trial: u64) -> Result<Ratio<u128>, EfficiencyError> {
    check_km(k, m)?;
    if k > EXACT_LIMIT {
        return Err(EfficiencyError::ExactTooLarge(k));
    }
    if m == 0 || trial == 0 || trial > k - m + 1 {
        return Ok(Ratio::from_integer(0));
    }
    let mut p = Ratio::new(m as u128, (k - trial + 1) as u128);
    for i in 0..trial - 1 {
        p *= Ratio::new((k - m - i) as u128, (k - i) as u128);
    }
    Ok(p)
}

/// `(K + 1) / (M + 1)`. With `M = 0` this is `K + 1`, read as "never within
/// the set"; [`gain_curve`] flags such points.
pub fn expected_trials(k: u64, m: u64) -> Result<f64, EfficiencyError> {
    check_km(k, m)?;
    Ok((k + 1) as f64 / (m + 1) as f64)
}

pub fn expected_trials_exact(k: u64, m: u64) -> Result<Ratio<u128>, EfficiencyError> {
    check_km(k, m)?;
    Ok(Ratio::new(k as u128 + 1, m as u128 + 1))
}

/// First moment of [`trial_distribution`], summed with Neumaier compensation.
pub fn pmf_first_moment(k: u64, m: u64) -> Result<f64, EfficiencyError> {
    let dist = trial_distribution(k, m)?;
    Ok(compensated_sum(
        dist.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p),
    ))
}

pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// `10 log10(E_base / E_reduced)`.
pub fn gain_db(e_base: f64, e_reduced: f64) -> f64 {
    10.0 * (e_base / e_reduced).log10()
}

/// Validation errors of one set of architectures (S, S' or C), kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSample {
    sorted: Vec<f64>,
}

impl ErrorSample {
    pub fn new(mut values: Vec<f64>) -> Result<Self, EfficiencyError> {
        if values.is_empty() {
            return Err(EfficiencyError::EmptySample);
        }
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EfficiencyError::OutOfRange(bad));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { sorted: values })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn mean(&self) -> f64 {
        compensated_sum(self.sorted.iter().copied()) / self.sorted.len() as f64
    }

    pub fn quantile(&self, q: f64) -> f64 {
        quantile_sorted(&self.sorted, q)
    }
}

/// `(M, K)`: how many sample errors are at or below `j_target`, and the
/// sample size.
pub fn estimate_m(sample: &ErrorSample, j_target: f64) -> (u64, u64) {
    let m = sample.sorted.partition_point(|&e| e <= j_target);
    (m as u64, sample.sorted.len() as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainPoint {
    pub j_target: f64,
    pub k_s: u64,
    pub m_s: u64,
    pub e_s: f64,
    pub k_c: u64,
    pub m_c: u64,
    pub e_c: f64,
    pub gain_db: f64,
    pub k_sp: Option<u64>,
    pub m_sp: Option<u64>,
    pub e_sp: Option<f64>,
    pub gain_e_db: Option<f64>,
    pub gain_p_db: Option<f64>,
    /// Some set involved has no success at this target, so its expectation
    /// is the `K + 1` sentinel.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GainCurve {
    pub points: Vec<GainPoint>,
}

pub const GAIN_CSV_COLUMNS: [&str; 11] = [
    "J_target", "K_S", "M_S", "E_S", "K_C", "M_C", "E_C", "gain_db", "gain_e_db", "gain_p_db", "flagged",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl GainCurve {
    /// One string row per point in [`GAIN_CSV_COLUMNS`] order.
    pub fn rows(&self) -> Vec<Vec<String>> {
        self.points
            .iter()
            .map(|p| {
                vec![
                    p.j_target.to_string(),
                    p.k_s.to_string(),
                    p.m_s.to_string(),
                    p.e_s.to_string(),
                    p.k_c.to_string(),
                    p.m_c.to_string(),
                    p.e_c.to_string(),
                    p.gain_db.to_string(),
                    opt(p.gain_e_db),
                    opt(p.gain_p_db),
                    u8::from(p.flagged).to_string(),
                ]
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(GAIN_CSV_COLUMNS)?;
        for r in self.rows() {
            w.write_record(&r)?;
        }
        w.flush()
    }

    /// Total gain at the grid point nearest to `j_target`.
    pub fn gain_at(&self, j_target: f64) -> Option<&GainPoint> {
        self.points
            .iter()
            .min_by(|a, b| (a.j_target - j_target).abs().total_cmp(&(b.j_target - j_target).abs()))
    }
}

/// Gain of `C` over `S` at each grid point, split into `S -> S'` and
/// `S' -> C` when a reduced-set sample is given.
pub fn gain_curve(
    sample_s: &ErrorSample,
    sample_c: &ErrorSample,
    grid: &[f64],
    sample_sprime: Option<&ErrorSample>,
) -> Result<GainCurve, EfficiencyError> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(EfficiencyError::UnsortedGrid);
    }
    let mut points = Vec::with_capacity(grid.len());
    for &j in grid {
        let (m_s, k_s) = estimate_m(sample_s, j);
        let (m_c, k_c) = estimate_m(sample_c, j);
        let e_s = expected_trials(k_s, m_s)?;
        let e_c = expected_trials(k_c, m_c)?;
        let mut flagged = m_s == 0 || m_c == 0;
        let (mut k_sp, mut m_sp, mut e_sp, mut gain_e, mut gain_p) = (None, None, None, None, None);
        if let Some(sp) = sample_sprime {
            let (m, k) = estimate_m(sp, j);
            let e = expected_trials(k, m)?;
            flagged |= m == 0;
            k_sp = Some(k);
            m_sp = Some(m);
            e_sp = Some(e);
            gain_e = Some(gain_db(e_s, e));
            gain_p = Some(gain_db(e, e_c));
        }
        points.push(GainPoint {
            j_target: j,
            k_s,
            m_s,
            e_s,
            k_c,
            m_c,
            e_c,
            gain_db: gain_db(e_s, e_c),
            k_sp,
            m_sp,
            e_sp,
            gain_e_db: gain_e,
            gain_p_db: gain_p,
            flagged,
        });
    }
    Ok(GainCurve { points })
}

/// `n` evenly spaced targets from `low` to `high` inclusive.
pub fn linear_grid(low: f64, high: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![low],
        _ => (0..n)
            .map(|i| low + (high - low) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// 100 targets from the validation oracle to the 99th percentile of `S`.
pub fn default_grid(val_oracle: f64, sample_s: &ErrorSample) -> Vec<f64> {
    linear_grid(val_oracle, sample_s.quantile(0.99).max(val_oracle), 100)
}

/// The target a fraction `q` of the way along the default grid's range, so
/// `q = 0.05` is its 5th-percentile point.
pub fn grid_fraction(val_oracle: f64, sample_s: &ErrorSample, q: f64) -> f64 {
    val_oracle + q * (sample_s.quantile(0.99).max(val_oracle) - val_oracle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmf_endpoints() {
        assert_eq!(trial_pmf(5, 5, 1).unwrap(), 1.0);
        assert_eq!(trial_pmf(2, 1, 1).unwrap(), 0.5);
        assert_eq!(trial_pmf(2, 1, 2).unwrap(), 0.5);
        assert_eq!(trial_pmf(4, 2, 0).unwrap(), 0.0);
        assert_eq!(trial_pmf(4, 2, 4).unwrap(), 0.0);
        assert_eq!(trial_pmf(4, 0, 1).unwrap(), 0.0);
        assert!(trial_pmf(3, 4, 1).is_err());
        assert!(expected_trials(3, 4).is_err());
    }

    #[test]
    fn expectation_endpoints() {
        assert_eq!(expected_trials(4, 4).unwrap(), 1.0);
        assert_eq!(expected_trials(10, 0).unwrap(), 11.0);
        assert_eq!(expected_trials_exact(100, 1).unwrap(), Ratio::new(101, 2));
    }

    #[test]
    fn pmf_sums_to_one_and_has_the_right_mean() {
        for k in 1..=200u64 {
            for m in 1..=k {
                let d = trial_distribution(k, m).unwrap();
                let s = compensated_sum(d.iter().copied());
                assert!((s - 1.0).abs() < 1e-10, "K={k} M={m} sum {s}");
                let e = pmf_first_moment(k, m).unwrap();
                let want = expected_trials(k, m).unwrap();
                assert!((e - want).abs() <= 1e-12 * want, "K={k} M={m}: {e} vs {want}");
            }
        }
    }

    #[test]
    fn direct_and_recurrence_forms_agree() {
        for (k, m) in [(50u64, 3u64), (200, 17), (1000, 10)] {
            let d = trial_distribution(k, m).unwrap();
            for (i, p) in d.iter().enumerate() {
                let trial = i as u64 + 1;
                let q = trial_pmf(k, m, trial).unwrap();
                let tol = if trial <= DIRECT_PRODUCT_LIMIT { 1e-12 } else { 1e-9 };
                assert!((p - q).abs() <= tol * p + 1e-300, "K={k} M={m} k={trial}");
            }
        }
    }

    #[test]
    fn log_gamma_branch_matches_recurrence() {
        let (k, m) = (100_000u64, 50u64);
        let d = trial_distribution(k, m).unwrap();
        for trial in [300u64, 1000, 2500, 10_000] {
            let p = d[trial as usize - 1];
            let q = trial_pmf(k, m, trial).unwrap();
            assert!((p - q).abs() <= 1e-7 * p, "k={trial}: {p} vs {q}");
        }
    }

    #[test]
    fn huge_sets_stay_finite() {
        let p = trial_pmf(1_000_000, 1, 500_000).unwrap();
        assert!((p - 1e-6).abs() < 1e-12);
        assert_eq!(expected_trials(1_000_000, 999_999).unwrap(), 1_000_001.0 / 1_000_000.0);
    }

    #[test]
    fn exact_path_sums_to_one() {
        for k in 1..=EXACT_LIMIT {
            for m in 1..=k {
                let total: Ratio<u128> = (1..=k - m + 1).map(|t| trial_pmf_exact(k, m, t).unwrap()).sum();
                assert_eq!(total, Ratio::from_integer(1));
            }
        }
        assert!(trial_pmf_exact(EXACT_LIMIT + 1, 1, 1).is_err());
    }

    #[test]
    fn expectation_is_monotone() {
        for k in 1..60u64 {
            for m in 0..=k {
                let e = expected_trials(k, m).unwrap();
                if m > 0 {
                    assert!(e <= expected_trials(k, m - 1).unwrap());
                }
                assert!(e <= expected_trials(k + 1, m).unwrap());
            }
        }
    }

    #[test]
    fn gain_reference_points() {
        assert_eq!(gain_db(7.0, 7.0), 0.0);
        assert_eq!(gain_db(1e5, 1.0), 50.0);
        assert!((gain_db(300.0, 1.0) - 24.771212547).abs() < 1e-8);
    }

    #[test]
    fn estimate_m_counts_inclusively() {
        let s = ErrorSample::new(vec![0.3, 0.1, 0.2]).unwrap();
        assert_eq!(estimate_m(&s, 0.2), (2, 3));
        assert_eq!(estimate_m(&s, 0.05), (0, 3));
        assert_eq!(estimate_m(&s, 0.3), (3, 3));
        assert_eq!(estimate_m(&s, 1.0), (3, 3));
    }

    #[test]
    fn sample_validation() {
        assert_eq!(ErrorSample::new(vec![]), Err(EfficiencyError::EmptySample));
        assert_eq!(ErrorSample::new(vec![0.5, 1.5]), Err(EfficiencyError::OutOfRange(1.5)));
        assert!(ErrorSample::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn identical_samples_have_zero_gain() {
        let s = ErrorSample::new((0..40).map(|i| i as f64 / 50.0).collect()).unwrap();
        let curve = gain_curve(&s, &s.clone(), &linear_grid(0.0, 0.8, 17), Some(&s)).unwrap();
        for p in &curve.points {
            assert_eq!(p.gain_db, 0.0);
            assert_eq!(p.gain_e_db, Some(0.0));
        }
    }

    #[test]
    fn best_half_hand_check() {
        let all: Vec<f64> = (1..=10).map(|i| i as f64 / 20.0).collect();
        let s = ErrorSample::new(all.clone()).unwrap();
        let c = ErrorSample::new(all[..5].to_vec()).unwrap();
        let j = s.quantile(0.5);
        let curve = gain_curve(&s, &c, &[j], None).unwrap();
        let p = &curve.points[0];
        // M_S = 5 of 10, M_C = 5 of 5
        let want = 10.0 * ((11.0 / 6.0) * (6.0 / 6.0) as f64).log10();
        assert_eq!((p.m_s, p.m_c), (5, 5));
        assert!((p.gain_db - want).abs() < 1e-12);
    }

    #[test]
    fn decomposition_adds_up_and_flags_empty_targets() {
        let s = ErrorSample::new((0..100).map(|i| 0.2 + i as f64 / 200.0).collect()).unwrap();
        let sp = ErrorSample::new((0..30).map(|i| 0.21 + i as f64 / 120.0).collect()).unwrap();
        let c = ErrorSample::new((0..8).map(|i| 0.25 + i as f64 / 100.0).collect()).unwrap();
        let curve = gain_curve(&s, &c, &linear_grid(0.2, 0.69, 50), Some(&sp)).unwrap();
        for p in &curve.points {
            let sum = p.gain_e_db.unwrap() + p.gain_p_db.unwrap();
            assert!((sum - p.gain_db).abs() <= 1e-12);
            assert_eq!(p.flagged, p.m_s == 0 || p.m_c == 0 || p.m_sp == Some(0));
        }
        assert!(curve.points[0].flagged);
        assert!(!curve.points[49].flagged);
        assert!(gain_curve(&s, &c, &[0.5, 0.4], None).is_err());
    }

    #[test]
    fn default_grid_spans_oracle_to_p99() {
        let s = ErrorSample::new((0..=100).map(|i| i as f64 / 100.0).collect()).unwrap();
        let g = default_grid(0.0, &s);
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 0.0);
        assert!((g[99] - 0.99).abs() < 1e-12);
    }
}
