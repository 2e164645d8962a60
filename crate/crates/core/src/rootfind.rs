//! Multi-bin bisection for inverting strictly increasing scalar maps.
//!
//! Every iteration places `K − 1` interior points on the current bracket,
//! evaluates them, and keeps the bin across which the residual changes sign.
//! `K = 2` is ordinary bisection; larger `K` trades more evaluations per
//! iteration for a bracket that shrinks by a factor `K` instead of 2.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ramp::RampSpec;
use crate::transform::{random, Domain, ResolvedMixture};

/// Targets may sit this far outside `[f(lo), f(hi)]` and still be accepted.
pub const BRACKET_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop as soon as a grid point has `|f(s) − y| ≤ eps`, or when the
    /// bracket cannot be split any further in floating point.
    Residual,
    /// Stop once the bracket width is `≤ eps·(hi₀ − lo₀)` and return its
    /// midpoint. The iteration count is then independent of `f`.
    Width,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RootFindConfig {
    pub bins: usize,
    pub eps: f64,
    pub max_iter: usize,
    pub bracket: (f64, f64),
    pub stop: StopRule,
}

impl Default for RootFindConfig {
    fn default() -> Self {
        Self { bins: 16, eps: 1e-10, max_iter: 200, bracket: (0.0, 1.0), stop: StopRule::Residual }
    }
}

impl RootFindConfig {
    pub fn with_bins(bins: usize) -> Self {
        Self { bins, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), RootFindError> {
        let (lo, hi) = self.bracket;
        if self.bins < 2 {
            return Err(RootFindError::InvalidConfig(format!("bins must be >= 2, got {}", self.bins)));
        }
        if !(self.eps > 0.0) {
            return Err(RootFindError::InvalidConfig(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(RootFindError::InvalidConfig(format!("bracket must satisfy lo < hi, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RootFindError {
    #[error("invalid root-finding config: {0}")]
    InvalidConfig(String),
    #[error("{} target(s) outside the bracket image, first at index {}", .indices.len(), .indices[0])]
    TargetOutOfBracket { indices: Vec<usize> },
    #[error("no convergence for element {index} after {iterations} iterations (x = {x}, residual = {residual:e})")]
    NotConverged { index: usize, iterations: usize, x: f64, residual: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RootFindOutput {
    pub x: Vec<f64>,
    /// Iterations used per element (0 when an endpoint already solved it).
    pub iterations: Vec<usize>,
}

impl RootFindOutput {
    pub fn mean_iterations(&self) -> f64 {
        if self.iterations.is_empty() {
            return 0.0;
        }
        self.iterations.iter().sum::<usize>() as f64 / self.iterations.len() as f64
    }
}

/// Result of a single multi-bin iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Step {
    /// A grid point solved the equation exactly (or within `eps` under the
    /// residual rule).
    Hit(f64),
    /// The sign change lies in `[lo, hi]`.
    Bracket { lo: f64, hi: f64, r_lo: f64, r_hi: f64 },
}

/// Grid point `j` of `K` on `[lo, hi]`.
#[inline]
fn grid(lo: f64, hi: f64, j: usize, k: usize) -> f64 {
    if j == k {
        hi
    } else {
        lo + (hi - lo) * (j as f64 / k as f64)
    }
}

/// One multi-bin iteration on `[lo, hi]` with known residuals at the ends.
/// `hit_tol` is the residual below which a grid point is returned directly
/// (use `0.0` for exact ties only).
pub fn multibin_step(
    f: impl Fn(f64) -> f64,
    y: f64,
    (lo, hi): (f64, f64),
    (r_lo, r_hi): (f64, f64),
    bins: usize,
    hit_tol: f64,
) -> Step {
    let mut prev = (lo, r_lo);
    let mut best: Option<(f64, f64)> = None;
    let mut found: Option<Step> = None;
    for j in 1..=bins {
        let (s, r) = if j == bins { (hi, r_hi) } else {
            let s = grid(lo, hi, j, bins);
            (s, f(s) - y)
        };
        if r == 0.0 {
            return Step::Hit(s);
        }
        if r.abs() <= hit_tol && best.is_none_or(|(_, b)| r.abs() < b) {
            best = Some((s, r.abs()));
        }
        if found.is_none() && prev.1 <= 0.0 && r > 0.0 {
            found = Some(Step::Bracket { lo: prev.0, hi: s, r_lo: prev.1, r_hi: r });
        }
        prev = (s, r);
    }
    if let Some((s, _)) = best {
        return Step::Hit(s);
    }
    // A monotone residual with r_lo ≤ 0 < r_hi always changes sign somewhere.
    found.unwrap_or(Step::Bracket { lo, hi, r_lo, r_hi })
}

/// Solve `f(i, xᵢ) = yᵢ` for every element `i` of the batch.
///
/// `f(i, ·)` must be increasing on the configured bracket. Elements are
/// solved independently, so permuting the batch permutes the output.
pub fn multibin_invert(
    f: impl Fn(usize, f64) -> f64,
    y: &[f64],
    cfg: &RootFindConfig,
) -> Result<RootFindOutput, RootFindError> {
    cfg.validate()?;
    let (lo0, hi0) = cfg.bracket;
    let mut out = RootFindOutput { x: vec![0.0; y.len()], iterations: vec![0; y.len()] };
    let mut outside = Vec::new();
    for (i, &yi) in y.iter().enumerate() {
        let fi = |s: f64| f(i, s);
        let (r_lo, r_hi) = (fi(lo0) - yi, fi(hi0) - yi);
        if r_lo > BRACKET_SLACK || r_hi < -BRACKET_SLACK || yi.is_nan() {
            outside.push(i);
            continue;
        }
        match solve_one(&fi, yi, cfg, (r_lo, r_hi)) {
            Ok((x, iters)) => {
                out.x[i] = x;
                out.iterations[i] = iters;
            }
            Err((x, iterations, residual)) => {
                return Err(RootFindError::NotConverged { index: i, iterations, x, residual })
            }
        }
    }
    if !outside.is_empty() {
        return Err(RootFindError::TargetOutOfBracket { indices: outside });
    }
    Ok(out)
}

type Failure = (f64, usize, f64);

fn solve_one(f: &impl Fn(f64) -> f64, y: f64, cfg: &RootFindConfig, (r_lo, r_hi): (f64, f64)) -> Result<(f64, usize), Failure> {
    let (mut lo, mut hi) = cfg.bracket;
    let (mut r_lo, mut r_hi) = (r_lo, r_hi);
    // Targets on (or within slack of) an endpoint.
    if r_lo >= 0.0 {
        return Ok((lo, 0));
    }
    if r_hi <= 0.0 {
        return Ok((hi, 0));
    }
    let residual_rule = cfg.stop == StopRule::Residual;
    if residual_rule {
        if -r_lo <= cfg.eps {
            return Ok((lo, 0));
        }
        if r_hi <= cfg.eps {
            return Ok((hi, 0));
        }
    }
    let width_tol = cfg.eps * (hi - lo);
    let hit_tol = if residual_rule { cfg.eps } else { 0.0 };
    for iter in 1..=cfg.max_iter {
        match multibin_step(f, y, (lo, hi), (r_lo, r_hi), cfg.bins, hit_tol) {
            Step::Hit(x) => return Ok((x, iter)),
            Step::Bracket { lo: l, hi: h, r_lo: rl, r_hi: rh } => {
                (lo, hi, r_lo, r_hi) = (l, h, rl, rh);
            }
        }
        match cfg.stop {
            StopRule::Width if hi - lo <= width_tol => return Ok((0.5 * (lo + hi), iter)),
            StopRule::Residual if !splittable(lo, hi) => {
                let (x, r) = if -r_lo <= r_hi { (lo, -r_lo) } else { (hi, r_hi) };
                return if r <= cfg.eps { Ok((x, iter)) } else { Err((x, iter, r)) };
            }
            _ => {}
        }
    }
    let (x, r) = if -r_lo <= r_hi { (lo, -r_lo) } else { (hi, r_hi) };
    Err((x, cfg.max_iter, r))
}

/// Whether a point strictly between `lo` and `hi` is representable.
fn splittable(lo: f64, hi: f64) -> bool {
    let mid = 0.5 * (lo + hi);
    mid > lo && mid < hi
}

/// `ceil(log_K(1/eps))` computed without floating-point log round-off.
pub fn expected_width_iterations(bins: usize, eps: f64) -> usize {
    let mut n = 0;
    let mut width = 1.0_f64;
    while width > eps {
        width /= bins as f64;
        n += 1;
    }
    n
}

/// One row of the root-finding benchmark.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub dim: usize,
    #[serde(rename = "K")]
    pub bins: usize,
    pub batch: usize,
    pub mean_iters: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
}

pub const BENCH_HEADER: &str = "dim,K,batch,mean_iters,mean_ms,std_ms";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{:.4}",
            self.dim, self.bins, self.batch, self.mean_iters, self.mean_ms, self.std_ms
        )
    }
}

/// Invert `dim` random mixture transforms at `batch` random targets each,
/// for every bin count in `bins`, `reps` times.
///
/// Iteration counts are deterministic given `seed`; timings are not.
pub fn bench_rootfind(dim: usize, bins: &[usize], batch: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>, RootFindError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ramp = RampSpec::Exponential { alpha: 1.0, beta: 2.0 };
    let transforms: Vec<ResolvedMixture> = (0..dim)
        .map(|_| random::mixture(&mut rng, Domain::Interval, ramp, 8).resolve())
        .collect();
    let targets: Vec<f64> = (0..dim * batch).map(|_| rng.random::<f64>()).collect();
    let eval = |i: usize, x: f64| transforms[i / batch].value(x);
    let mut rows = Vec::with_capacity(bins.len());
    for &k in bins {
        let cfg = RootFindConfig::with_bins(k);
        let mut times = Vec::with_capacity(reps);
        let mut iters = 0.0;
        for _ in 0..reps.max(1) {
            let start = Instant::now();
            let out = multibin_invert(eval, &targets, &cfg)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            iters = out.mean_iterations();
        }
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        rows.push(BenchRow { dim, bins: k, batch, mean_iters: iters, mean_ms: mean, std_ms: var.sqrt() });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::{AffineTransform, ElementwiseBijection};
    use proptest::prelude::*;
    use rand::Rng;

    fn identity(_: usize, x: f64) -> f64 {
        x
    }

    #[test]
    fn one_bisection_step_on_identity() {
        let step = multibin_step(|x| x, 0.3, (0.0, 1.0), (-0.3, 0.7), 2, 0.0);
        assert_eq!(step, Step::Bracket { lo: 0.0, hi: 0.5, r_lo: -0.3, r_hi: 0.2 });
    }

    #[test]
    fn one_decile_step_on_identity() {
        match multibin_step(|x| x, 0.3, (0.0, 1.0), (-0.3, 0.7), 10, 0.0) {
            Step::Bracket { lo, hi, .. } => {
                assert!((lo - 0.3).abs() < 1e-15 && (hi - 0.4).abs() < 1e-15, "[{lo}, {hi}]");
            }
            Step::Hit(x) => {
                // 0.3 is not exactly representable as 3/10 of the unit bracket
                // on every platform; an exact tie is also acceptable.
                assert_eq!(x, 0.3);
            }
        }
    }

    #[test]
    fn exact_tie_returns_grid_point() {
        let step = multibin_step(|x| x, 0.5, (0.0, 1.0), (-0.5, 0.5), 2, 0.0);
        assert_eq!(step, Step::Hit(0.5));
    }

    #[test]
    fn width_rule_iteration_count_is_exact() {
        let y = [0.123_456_789, 0.987_654_321, 0.5 + 1e-3];
        for k in [2, 3, 4, 16, 64] {
            let cfg = RootFindConfig { bins: k, stop: StopRule::Width, ..Default::default() };
            let out = multibin_invert(identity, &y, &cfg).unwrap();
            let expected = expected_width_iterations(k, cfg.eps);
            assert!(out.iterations.iter().all(|&n| n == expected), "K={k}: {:?} vs {expected}", out.iterations);
            for (x, t) in out.x.iter().zip(&y) {
                assert!((x - t).abs() <= cfg.eps);
            }
        }
        assert_eq!(expected_width_iterations(2, 1e-10), 34);
        assert_eq!(expected_width_iterations(16, 1e-10), 9);
    }

    #[test]
    fn residual_rule_round_trips_random_mixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ramp = RampSpec::Exponential { alpha: 1.0, beta: 2.0 };
        for domain in [Domain::Interval, Domain::Circle] {
            let ts: Vec<ResolvedMixture> = (0..50).map(|_| random::mixture(&mut rng, domain, ramp, 6).resolve()).collect();
            let y: Vec<f64> = (0..50).map(|_| rng.random()).collect();
            for k in [2, 7, 16] {
                let cfg = RootFindConfig::with_bins(k);
                let out = multibin_invert(|i, x| ts[i].value(x), &y, &cfg).unwrap();
                for i in 0..50 {
                    assert!((ts[i].value(out.x[i]) - y[i]).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn affine_analytic_inverse_agrees() {
        let a = AffineTransform::new(3.0, -1.0);
        let cfg = RootFindConfig { bracket: (-10.0, 10.0), ..Default::default() };
        let y = [-5.0, 0.0, 2.5, 17.0];
        let out = multibin_invert(|_, x| a.value(x), &y, &cfg).unwrap();
        for (x, t) in out.x.iter().zip(&y) {
            assert!((x - a.inverse(*t)).abs() <= cfg.eps);
        }
    }

    #[test]
    fn out_of_bracket_targets_are_reported() {
        let err = multibin_invert(identity, &[0.5, 1.2, -0.1, 1.0 + 1e-12], &RootFindConfig::default()).unwrap_err();
        assert_eq!(err, RootFindError::TargetOutOfBracket { indices: vec![1, 2] });
    }

    #[test]
    fn non_convergence_reports_best_iterate() {
        let cfg = RootFindConfig { max_iter: 3, bins: 2, ..Default::default() };
        match multibin_invert(identity, &[0.3], &cfg).unwrap_err() {
            RootFindError::NotConverged { index, iterations, x, residual } => {
                assert_eq!((index, iterations), (0, 3));
                assert!((x - 0.3).abs() == residual && residual < 0.0625);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            RootFindConfig { bins: 1, ..Default::default() },
            RootFindConfig { eps: 0.0, ..Default::default() },
            RootFindConfig { bracket: (1.0, 1.0), ..Default::default() },
        ] {
            assert!(matches!(multibin_invert(identity, &[0.5], &cfg), Err(RootFindError::InvalidConfig(_))));
        }
    }

    #[test]
    fn bench_ratio_tracks_log_k() {
        let rows = bench_rootfind(2, &[2, 16], 200, 1, 4).unwrap();
        let ratio = rows[0].mean_iters / rows[1].mean_iters;
        assert!((rows[0].mean_iters - 4.0 * rows[1].mean_iters).abs() <= 1.0 * rows[1].mean_iters.max(1.0), "ratio {ratio}");
        let again = bench_rootfind(2, &[2, 16], 200, 1, 4).unwrap();
        assert_eq!(rows[0].mean_iters, again[0].mean_iters);
    }

    proptest! {
        #[test]
        fn bracket_invariant_holds(y in 0.0f64..1.0, k in 2usize..20, steps in 1usize..12) {
            let f = |x: f64| x * x * x + 0.1 * x;
            let target = f(y);
            let (mut lo, mut hi) = (0.0, 1.0);
            let (mut rl, mut rh) = (f(lo) - target, f(hi) - target);
            for _ in 0..steps {
                if rl >= 0.0 || rh <= 0.0 { break; }
                match multibin_step(f, target, (lo, hi), (rl, rh), k, 0.0) {
                    Step::Hit(x) => { prop_assert!(f(x) == target); break; }
                    Step::Bracket { lo: l, hi: h, r_lo, r_hi } => {
                        prop_assert!(f(l) - target <= 0.0 && f(h) - target > 0.0);
                        prop_assert!(h - l <= (hi - lo) / k as f64 + 2.0 * f64::EPSILON * hi);
                        (lo, hi, rl, rh) = (l, h, r_lo, r_hi);
                    }
                }
            }
        }

        #[test]
        fn batch_permutation_commutes(ys in prop::collection::vec(0.0f64..1.0, 2..12), rot in 0usize..12) {
            let f = |x: f64| 0.5 * x + 0.5 * x * x;
            let cfg = RootFindConfig::with_bins(4);
            let a = multibin_invert(|_, x| f(x), &ys, &cfg).unwrap();
            let mut rotated = ys.clone();
            let r = rot % ys.len();
            rotated.rotate_left(r);
            let b = multibin_invert(|_, x| f(x), &rotated, &cfg).unwrap();
            let mut expect = a.x.clone();
            expect.rotate_left(r);
            prop_assert_eq!(expect, b.x);
        }
    }
}
