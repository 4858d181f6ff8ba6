//! Truncated evaluation of `Σ_γ λ_γ d_γ e^{α d_γ}` over primitive periodic
//! orbits, grouped into shells by word length, with a ratio-test verdict.
//!
//! A finite truncation cannot prove convergence. The verdict is a heuristic:
//! the tail shell ratios must all sit below `1 − margin`.

use serde::Serialize;
use thiserror::Error;

use crate::orbits::{OrbitTable, PeriodicOrbit};

pub const RATIO_MARGIN: f64 = 0.05;
/// Fraction of failed words above which the verdict is inconclusive.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;
const BISECTION_STEPS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IkawaError {
    #[error("insufficient shells: K = {0} < 3")]
    InsufficientShells(usize),
    #[error("orbit table only reaches word length {table}, K = {k} requested")]
    TableTooShort { table: usize, k: usize },
    #[error("invalid exponent {0}")]
    InvalidAlpha(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Converges,
    Diverges,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaStar {
    /// Finitely many orbits: every exponent works.
    Unbounded,
    /// Still converging at the search cap.
    AtLeast { alpha_max: f64 },
    /// The verdict flips inside `[lo, hi]`.
    Bracket { lo: f64, hi: f64 },
    /// Not converging even at `α = 0`.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Shell {
    pub k: usize,
    pub sum: f64,
    /// `S_{k+1} / S_k` (absent for the last shell).
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IkawaReport {
    pub alpha: f64,
    pub max_len: usize,
    pub merge_reversal: bool,
    pub shells: Vec<Shell>,
    pub cumulative: f64,
    pub tail_window: usize,
    pub verdict: Verdict,
    pub failure_fraction: f64,
    /// Geometric mean of `λ^{1/|I|}` over the largest shell.
    pub lambda_per_letter: Option<f64>,
    /// `1/(N−1)`, the growth rate the per-letter λ competes with.
    pub word_growth_inverse: f64,
    pub alpha_star: Option<AlphaStar>,
    pub note: String,
}

impl IkawaReport {
    pub fn ratios(&self) -> Vec<f64> {
        self.shells.iter().filter_map(|s| s.ratio).collect()
    }
}

/// Weight of an orbit when reversal pairs are merged: `1/2` if its reversal
/// is a different word, else `1`.
pub fn merge_weight(orbit: &PeriodicOrbit, merge_reversal: bool) -> f64 {
    if merge_reversal && !orbit.itinerary.is_self_reverse() {
        0.5
    } else {
        1.0
    }
}

fn shell_sums(table: &OrbitTable, alpha: f64, k_max: usize, merge: bool) -> Vec<f64> {
    let mut sums = vec![0.0; k_max + 1];
    for o in &table.orbits {
        let k = o.len();
        if k <= k_max {
            sums[k] +=
                merge_weight(o, merge) * o.lambda_gamma * o.d_gamma * (alpha * o.d_gamma).exp();
        }
    }
    sums
}

fn ratio(next: f64, cur: f64) -> f64 {
    match (next == 0.0, cur == 0.0) {
        (true, _) => 0.0,
        (false, true) => f64::INFINITY,
        _ => next / cur,
    }
}

fn tail_window(k: usize) -> usize {
    (k / 3).max(3)
}

fn verdict_of(ratios: &[f64], window: usize, failure_fraction: f64) -> Verdict {
    if failure_fraction > MAX_FAILURE_FRACTION {
        return Verdict::Inconclusive;
    }
    let tail = &ratios[ratios.len().saturating_sub(window)..];
    if tail.iter().all(|&r| r < 1.0 - RATIO_MARGIN) {
        Verdict::Converges
    } else if tail.iter().all(|&r| r > 1.0 + RATIO_MARGIN) {
        Verdict::Diverges
    } else {
        Verdict::Inconclusive
    }
}

fn failure_fraction(table: &OrbitTable, k: usize) -> f64 {
    let attempted = table.orbits.iter().filter(|o| o.len() <= k).count()
        + table.failures.iter().filter(|(w, _)| w.len() <= k).count();
    let failed = table.failures.iter().filter(|(w, _)| w.len() <= k).count();
    if attempted == 0 {
        0.0
    } else {
        failed as f64 / attempted as f64
    }
}

fn check_args(table: &OrbitTable, alpha: f64, k: usize) -> Result<(), IkawaError> {
    if k < 3 {
        return Err(IkawaError::InsufficientShells(k));
    }
    if k > table.max_word_len {
        return Err(IkawaError::TableTooShort {
            table: table.max_word_len,
            k,
        });
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(IkawaError::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Verdict alone, for bisection.
fn verdict_at(table: &OrbitTable, alpha: f64, k: usize, merge: bool) -> Verdict {
    let sums = shell_sums(table, alpha, k, merge);
    let ratios: Vec<f64> = (2..k).map(|j| ratio(sums[j + 1], sums[j])).collect();
    verdict_of(&ratios, tail_window(k), failure_fraction(table, k))
}

/// Shell sums `S_k(α)` for `k = 2..=K`, their ratios and the verdict.
pub fn pressure_partial_sum(
    table: &OrbitTable,
    alpha: f64,
    k: usize,
    merge_reversal: bool,
) -> Result<IkawaReport, IkawaError> {
    check_args(table, alpha, k)?;
    let sums = shell_sums(table, alpha, k, merge_reversal);
    let shells: Vec<Shell> = (2..=k)
        .map(|j| Shell {
            k: j,
            sum: sums[j],
            ratio: (j < k).then(|| ratio(sums[j + 1], sums[j])),
        })
        .collect();
    let ratios: Vec<f64> = shells.iter().filter_map(|s| s.ratio).collect();
    let window = tail_window(k);
    let ff = failure_fraction(table, k);
    let largest: Vec<f64> = table
        .orbits
        .iter()
        .filter(|o| o.len() == k)
        .map(|o| o.lambda_gamma.ln() / k as f64)
        .collect();
    let lambda_per_letter =
        (!largest.is_empty()).then(|| (largest.iter().sum::<f64>() / largest.len() as f64).exp());
    let finite = table.obstacle_count <= 2;
    Ok(IkawaReport {
        alpha,
        max_len: k,
        merge_reversal,
        cumulative: sums.iter().sum(),
        verdict: verdict_of(&ratios, window, ff),
        shells,
        tail_window: window,
        failure_fraction: ff,
        lambda_per_letter,
        word_growth_inverse: if finite {
            f64::INFINITY
        } else {
            1.0 / (table.obstacle_count as f64 - 1.0)
        },
        alpha_star: finite.then_some(AlphaStar::Unbounded),
        note: "ratio-test heuristic on a truncated sum; not a proof of convergence".into(),
    })
}

/// Result of [`estimate_alpha_star`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaStarEstimate {
    pub alpha_star: AlphaStar,
    pub alpha_max: f64,
    /// Mean `ln(S_{k+1}/S_k)` over the tail window at the lower bracket end.
    pub tail_log_ratio: Option<f64>,
}

/// Default upper end of the α* search, `10 / d_min`.
pub fn default_alpha_max(d_min: f64) -> f64 {
    10.0 / d_min
}

/// Bisection on `α ∈ [0, alpha_max]` for the point where the verdict stops
/// being "converges".
pub fn estimate_alpha_star(
    table: &OrbitTable,
    k: usize,
    alpha_max: f64,
    merge_reversal: bool,
) -> Result<AlphaStarEstimate, IkawaError> {
    check_args(table, alpha_max, k)?;
    let tail_log = |alpha: f64| {
        let sums = shell_sums(table, alpha, k, merge_reversal);
        let ratios: Vec<f64> = (2..k).map(|j| ratio(sums[j + 1], sums[j])).collect();
        let tail: Vec<f64> = ratios[ratios.len().saturating_sub(tail_window(k))..]
            .iter()
            .filter(|r| **r > 0.0 && r.is_finite())
            .map(|r| r.ln())
            .collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    };
    if table.obstacle_count <= 2 {
        return Ok(AlphaStarEstimate {
            alpha_star: AlphaStar::Unbounded,
            alpha_max,
            tail_log_ratio: None,
        });
    }
    let converges = |a: f64| verdict_at(table, a, k, merge_reversal) == Verdict::Converges;
    if !converges(0.0) {
        return Ok(AlphaStarEstimate {
            alpha_star: AlphaStar::None,
            alpha_max,
            tail_log_ratio: tail_log(0.0),
        });
    }
    if converges(alpha_max) {
        return Ok(AlphaStarEstimate {
            alpha_star: AlphaStar::AtLeast { alpha_max },
            alpha_max,
            tail_log_ratio: tail_log(alpha_max),
        });
    }
    let (mut lo, mut hi) = (0.0, alpha_max);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if converges(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(AlphaStarEstimate {
        alpha_star: AlphaStar::Bracket { lo, hi },
        alpha_max,
        tail_log_ratio: tail_log(lo),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Scene;
    use crate::orbits::enumerate_orbits;

    #[test]
    fn two_sphere_single_term() {
        let s = Scene::two_spheres(6.0, 1.0).unwrap();
        let t = enumerate_orbits(&s, 6).unwrap();
        let o = &t.orbits[0];
        for alpha in [0.0, 0.3, 2.0] {
            let r = pressure_partial_sum(&t, alpha, 6, false).unwrap();
            let want = o.lambda_gamma * o.d_gamma * (alpha * o.d_gamma).exp();
            assert!((r.cumulative - want).abs() < 1e-15 * want.max(1.0));
            assert_eq!(r.verdict, Verdict::Converges);
            assert_eq!(r.alpha_star, Some(AlphaStar::Unbounded));
        }
        let est = estimate_alpha_star(&t, 6, default_alpha_max(s.d_min()), false).unwrap();
        assert_eq!(est.alpha_star, AlphaStar::Unbounded);
    }

    #[test]
    fn guards() {
        let s = Scene::two_spheres(6.0, 1.0).unwrap();
        let t = enumerate_orbits(&s, 4).unwrap();
        assert_eq!(
            pressure_partial_sum(&t, 0.0, 2, false),
            Err(IkawaError::InsufficientShells(2))
        );
        assert!(matches!(
            pressure_partial_sum(&t, 0.0, 5, false),
            Err(IkawaError::TableTooShort { .. })
        ));
    }

    #[test]
    fn triangle_scene_converges_with_bracket() {
        let s = Scene::equilateral_spheres(6.0, 1.0).unwrap();
        let t = enumerate_orbits(&s, 8).unwrap();
        let r = pressure_partial_sum(&t, 0.0, 8, false).unwrap();
        assert_eq!(r.verdict, Verdict::Converges);
        assert!(r.lambda_per_letter.unwrap() < 0.5);
        let est = estimate_alpha_star(&t, 8, default_alpha_max(s.d_min()), false).unwrap();
        match est.alpha_star {
            AlphaStar::Bracket { lo, hi } => assert!(lo > 0.0 && hi > lo && hi - lo < 1e-9),
            other => panic!("{other:?}"),
        }
        // Monotone in α: converging below the bracket.
        if let AlphaStar::Bracket { lo, .. } = est.alpha_star {
            for f in [0.1, 0.5, 0.9] {
                assert_eq!(verdict_at(&t, lo * f, 8, false), Verdict::Converges);
            }
        }
    }

    #[test]
    fn shells_grow_with_alpha() {
        let s = Scene::equilateral_spheres(6.0, 1.0).unwrap();
        let t = enumerate_orbits(&s, 6).unwrap();
        let a = pressure_partial_sum(&t, 0.1, 6, false).unwrap();
        let b = pressure_partial_sum(&t, 0.2, 6, false).unwrap();
        for (x, y) in a.shells.iter().zip(&b.shells) {
            assert!(x.sum >= 0.0 && y.sum >= x.sum);
        }
    }

    #[test]
    fn reversal_merge_scales_shells() {
        let s = Scene::equilateral_spheres(6.0, 1.0).unwrap();
        let t = enumerate_orbits(&s, 7).unwrap();
        let plain = pressure_partial_sum(&t, 0.0, 7, false).unwrap();
        let merged = pressure_partial_sum(&t, 0.0, 7, true).unwrap();
        assert_eq!(plain.verdict, merged.verdict);
        for k in 2..=7 {
            let expected: f64 = t
                .orbits
                .iter()
                .filter(|o| o.len() == k)
                .map(|o| merge_weight(o, true) * o.lambda_gamma * o.d_gamma)
                .sum();
            let got = merged.shells[k - 2].sum;
            assert!((got - expected).abs() <= 1e-15 * expected);
            assert!(got <= plain.shells[k - 2].sum);
        }
        // Shell 3 holds only the two opposite triangles: exactly halved.
        assert!((merged.shells[1].sum * 2.0 - plain.shells[1].sum).abs() < 1e-15);
    }

    #[test]
    fn close_scene_stops_converging_at_finite_alpha() {
        let s = Scene::equilateral_spheres(2.2, 1.0).unwrap();
        let t = enumerate_orbits(&s, 8).unwrap();
        let est = estimate_alpha_star(&t, 8, default_alpha_max(s.d_min()), false).unwrap();
        assert!(
            matches!(est.alpha_star, AlphaStar::Bracket { .. } | AlphaStar::None),
            "{est:?}"
        );
        let big = pressure_partial_sum(&t, 10.0 / s.d_min(), 8, false).unwrap();
        assert_ne!(big.verdict, Verdict::Converges);
    }
}
