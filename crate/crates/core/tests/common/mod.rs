#![allow(dead_code)]

use pbnas::arch_space::{enumerate, SpaceSpec};
use pbnas::bench_oracle::{Benchmark, EvalRecord};

/// A tabular benchmark over the first `n` architectures of the L=4, d=2
/// enumeration. Record `i` has validation error `0.1 + 0.8 * rank_i / n`
/// for a fixed scrambled rank, so exactly the first `successes` ranks sit
/// below `0.1 + 0.8 * successes / n`.
pub fn ranked_table(n: usize) -> Benchmark {
    let spec = SpaceSpec::new(4, 2, 0, true).unwrap();
    let archs: Vec<_> = enumerate(&spec).unwrap().take(n).collect();
    assert_eq!(archs.len(), n, "L=4 d=2 has too few architectures");
    let records = archs
        .into_iter()
        .enumerate()
        .map(|(i, arch)| {
            let rank = (i * 7919 + 13) % n;
            let v = 0.1 + 0.8 * rank as f64 / n as f64;
            EvalRecord {
                arch,
                val_errors: vec![v; 3],
                test_errors: vec![v + 0.01; 3],
            }
        })
        .collect();
    Benchmark::from_records(spec, records).unwrap()
}

/// Error threshold admitting exactly the `m` best records of `ranked_table(n)`.
pub fn ranked_target(n: usize, m: usize) -> f64 {
    0.1 + 0.8 * (m as f64 - 0.5) / n as f64
}
