//! Linear-time scan versus quadratic materialization timings.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ssm;

pub const DEFAULT_LENGTHS: [usize; 7] = [64, 128, 256, 512, 1024, 2048, 4096];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub t: usize,
    pub n: usize,
    pub scan_ms: f64,
    pub materialize_ms: f64,
    /// Materialize-and-multiply time over scan time.
    pub ratio: f64,
    pub max_abs_diff: f64,
    pub tolerance: f64,
}

/// Times `ssm_scan` against `materialize_m` + `M·x` for each length and
/// fails if the two disagree beyond `1e-10 · max(1, max|y|)`.
pub fn scan_bench(lengths: &[usize], n: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(lengths.len());
    for &t in lengths {
        if t == 0 || t > ssm::MAX_MATERIALIZE_T {
            return Err(Error::invalid(format!("bench length {t} outside 1..={}", ssm::MAX_MATERIALIZE_T)));
        }
        let seq = ssm::random_sequence(t, n, &mut rng);
        let start = Instant::now();
        let y = ssm::ssm_scan(&seq)?;
        let scan_ms = start.elapsed().as_secs_f64() * 1e3;
        let start = Instant::now();
        let m = ssm::materialize_m(&seq)?;
        let ym = m.matvec(&seq.x);
        let materialize_ms = start.elapsed().as_secs_f64() * 1e3;
        let scale = y.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let max_abs_diff = y.iter().zip(&ym).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        let tolerance = 1e-10 * scale;
        if !(max_abs_diff <= tolerance) {
            return Err(Error::invalid(format!(
                "scan and materialized outputs differ at T = {t}: {max_abs_diff:e} > {tolerance:e}"
            )));
        }
        rows.push(BenchRow {
            t,
            n,
            scan_ms,
            materialize_ms,
            ratio: materialize_ms / scan_ms.max(1e-9),
            max_abs_diff,
            tolerance,
        });
    }
    Ok(rows)
}

pub fn format_report(rows: &[BenchRow]) -> String {
    let mut s = format!("{:>6} {:>4} {:>12} {:>16} {:>10} {:>12}\n", "T", "N", "scan ms", "materialize ms", "ratio", "max diff");
    for r in rows {
        s += &format!(
            "{:>6} {:>4} {:>12.4} {:>16.4} {:>10.1} {:>12.3e}\n",
            r.t, r.n, r.scan_ms, r.materialize_ms, r.ratio, r.max_abs_diff
        );
    }
    s
}
