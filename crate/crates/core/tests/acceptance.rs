//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with its measured values; the test fails if any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::{Complex, Matrix2, Matrix4};

use billiardlab::billiard::{tangency_classify, SpeedBand};
use billiardlab::cli::{cmd_orbits, RunConfig};
use billiardlab::geometry::Scene;
use billiardlab::ikawa::{pressure_partial_sum, Verdict};
use billiardlab::orbits::{
    enumerate_orbits, fd_return_map, find_periodic_orbit, length_hessian, max_relative_entry_error,
    poincare_jacobian, FD_STEP,
};
use billiardlab::parametrix::{convergence_check, decay_profile, midpoint_grid, Multiplicity};
use billiardlab::symbolic::{count_admissible, enumerate_admissible, PrimitiveStory};
use billiardlab::trapped::{default_horizon, random_phase_points};

struct Outcome {
    pass: bool,
    detail: String,
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn word(s: &str) -> PrimitiveStory {
    PrimitiveStory::new(s.parse().unwrap()).unwrap()
}

fn unit_band() -> SpeedBand {
    SpeedBand::new(1.0, 1.0).unwrap()
}

fn triangle() -> Scene {
    Scene::equilateral_spheres(6.0, 1.0).unwrap()
}

fn two_spheres() -> Scene {
    Scene::two_spheres(6.0, 1.0).unwrap()
}

/// `λ` of a 4×4 return map: `1/sqrt(|ν₁ν₂|)` over the two largest moduli.
fn lambda_of(m: &Matrix4<f64>) -> f64 {
    let mut moduli: Vec<f64> = m
        .complex_eigenvalues()
        .iter()
        .map(|z: &Complex<f64>| z.norm())
        .collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    1.0 / (moduli[0] * moduli[1]).sqrt()
}

fn counting() -> Outcome {
    let mut bad = Vec::new();
    for n in 2..=5usize {
        let mut by_len = [0u128; 11];
        for w in enumerate_admissible(n, 10).unwrap() {
            by_len[w.len()] += 1;
        }
        let mut alpha = 1u128;
        for k in 1..=10usize {
            let beta = n as u128 * (n as u128 - 1).pow(k as u32 - 1);
            alpha += beta;
            let counted = (by_len[k], 1 + by_len[1..=k].iter().sum::<u128>());
            if counted != (beta, alpha) || count_admissible(n, k).unwrap() != (beta, alpha) {
                bad.push(format!("N={n} k={k}: {counted:?} vs {:?}", (beta, alpha)));
            }
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            "beta_k and |alpha_k| exact for N = 2..5, k <= 10".into()
        } else {
            bad.join("; ")
        },
    }
}

fn two_sphere_orbit() -> Outcome {
    let s = two_spheres();
    let o = find_periodic_orbit(&s, &word("1-2")).unwrap();
    let per_bounce = Matrix2::<f64>::new(1.0, 4.0, 2.0, 9.0);
    let p2 = per_bounce * per_bounce;
    let (tr, det) = (p2.trace(), p2.determinant());
    let closed = (tr - (tr * tr - 4.0 * det).sqrt()) / 2.0;
    let exact = (5.0 - 2.0 * 6f64.sqrt()).powi(2);
    let fd = fd_return_map(&s, &o, FD_STEP).unwrap();
    let analytic = poincare_jacobian(&s, &o).unwrap().matrix;
    let fd_lambda = lambda_of(&fd);
    let d_err = (o.d_gamma - 8.0).abs();
    let lambda_err = (o.lambda_gamma - closed).abs();
    let fd_rel = (fd_lambda - closed).abs() / closed;
    let entry_rel = max_relative_entry_error(&analytic, &fd, 1e-8);
    Outcome {
        pass: d_err <= 1e-10 && lambda_err <= 1e-8 && (closed - exact).abs() <= 1e-12 && fd_rel <= 1e-5 && entry_rel <= 1e-5,
        detail: format!(
            "|d-8| = {d_err:.1e}, lambda = {:.10}, |lambda - closed form| = {lambda_err:.1e}, FD lambda rel = {fd_rel:.1e}, FD entries rel = {entry_rel:.1e}",
            o.lambda_gamma
        ),
    }
}

fn triangle_orbit() -> Outcome {
    let s = triangle();
    let o = find_periodic_orbit(&s, &word("1-2-3")).unwrap();
    let d_err = (o.d_gamma - (18.0 - 3.0 * 3f64.sqrt())).abs();
    let h = length_hessian(&s, &o);
    let min_eig = h.symmetric_eigen().eigenvalues.min();
    Outcome {
        pass: d_err <= 1e-9 && min_eig > 0.0,
        detail: format!(
            "|d - (18 - 3 sqrt 3)| = {d_err:.1e}, min Hessian eigenvalue = {min_eig:.4}"
        ),
    }
}

fn symplecticity() -> Outcome {
    let table = enumerate_orbits(&triangle(), 6).unwrap();
    let worst = table
        .orbits
        .iter()
        .map(|o| o.pairing_defect)
        .fold(0.0, f64::max);
    let wrong_split = table
        .orbits
        .iter()
        .filter(|o| {
            o.poincare_spectrum
                .iter()
                .filter(|z| z.norm() < 1.0)
                .count()
                != 2
        })
        .count();
    Outcome {
        pass: table.failures.is_empty() && !table.orbits.is_empty() && worst < 1e-6 && wrong_split == 0,
        detail: format!(
            "{} orbits, {} failures, max pairing defect {worst:.1e}, {wrong_split} without exactly two contracting eigenvalues",
            table.orbits.len(),
            table.failures.len()
        ),
    }
}

fn length_bounds() -> Outcome {
    let s = triangle();
    let table = enumerate_orbits(&s, 8).unwrap();
    let slack = 1e-9;
    let violations = table
        .orbits
        .iter()
        .filter(|o| {
            let m = o.len() as f64;
            o.d_gamma / s.hull_diameter() > m * (1.0 + slack)
                || m > o.d_gamma / s.d_min() * (1.0 + slack)
        })
        .count();
    Outcome {
        pass: violations == 0 && table.failures.is_empty(),
        detail: format!(
            "{violations} violations over {} orbits ({} failures)",
            table.orbits.len(),
            table.failures.len()
        ),
    }
}

fn convergence() -> Outcome {
    let r = convergence_check(&two_spheres(), &word("1-2"), 0, 6).unwrap();
    let pass = r.rows.len() == 6 && r.alpha_fit < 1.0 && r.r_squared >= 0.95;
    Outcome {
        pass,
        detail: format!(
            "alpha_fit = {:.6e}, R^2 = {:.6}, lambda = {:.6e}, a = {}",
            r.alpha_fit, r.r_squared, r.lambda_front, r.a
        ),
    }
}

fn decay() -> Outcome {
    let band = unit_band();
    let grid = midpoint_grid(0.0, 40.0, 400);

    let two = two_spheres();
    let table = enumerate_orbits(&two, 2).unwrap();
    let p = decay_profile(&two, &table, &grid, band, Multiplicity::Exact, None);
    let o = &table.orbits[0];
    let period = o.d_gamma / (2.0 * band.beta0);
    let expected = o.lambda_gamma.ln().abs() / period;
    let rel = (p.fit.mu - expected).abs() / expected;

    let tri = triangle();
    let table = enumerate_orbits(&tri, 20).unwrap();
    let q = decay_profile(&tri, &table, &grid, band, Multiplicity::Exact, None);
    let pass = rel <= 0.02 && q.fit.mu > 0.0 && q.fit.r_squared >= 0.99 && !q.truncated;
    Outcome {
        pass,
        detail: format!(
            "two spheres: mu = {:.5} vs {expected:.5} (rel {rel:.2e}); triangle on [{:.2}, 40]: mu = {:.4}, R^2 = {:.4} \
             [per-period sum: mu = {:.4}, R^2 = {:.4}; aggregated bound: mu = {:.4}, R^2 = {:.4}]",
            p.fit.mu,
            q.t0,
            q.fit.mu,
            q.fit.r_squared,
            q.fit_periods.mu,
            q.fit_periods.r_squared,
            q.fit_bound.mu,
            q.fit_bound.r_squared
        ),
    }
}

fn far_obstacles() -> Outcome {
    let k = 12;
    let near = triangle();
    let far = near.with_separation_scaled(4.0).unwrap();
    let a = pressure_partial_sum(&enumerate_orbits(&near, k).unwrap(), 0.0, k, false).unwrap();
    let b = pressure_partial_sum(&enumerate_orbits(&far, k).unwrap(), 0.0, k, false).unwrap();
    let (ra, rb) = (a.ratios(), b.ratios());
    let decreased = ra.len() == rb.len() && ra.iter().zip(&rb).all(|(x, y)| y < x);
    Outcome {
        pass: decreased && b.verdict == Verdict::Converges,
        detail: format!(
            "max ratio {:.4} -> {:.4}, every shell decreased: {decreased}, verdict {:?} -> {:?}",
            ra.iter().copied().fold(0.0, f64::max),
            rb.iter().copied().fold(0.0, f64::max),
            a.verdict,
            b.verdict
        ),
    }
}

fn tangent_crossings() -> Outcome {
    use rayon::prelude::*;
    let s = triangle();
    let band = unit_band();
    let horizon = default_horizon(&s, &band);
    let rays = random_phase_points(&s, &band, 1.5 * s.bounding_radius(), 10_000, 9);
    let counts: Vec<Result<usize, _>> = rays
        .par_iter()
        .map(|p| tangency_classify(&s, p, 1e-3, horizon))
        .collect();
    let errors = counts.iter().filter(|c| c.is_err()).count();
    let max = counts
        .iter()
        .filter_map(|c| c.as_ref().ok())
        .copied()
        .max()
        .unwrap_or(0);
    Outcome {
        pass: errors == 0 && max <= 2,
        detail: format!("10000 rays, horizon {horizon}, max crossings {max}, {errors} errors"),
    }
}

fn determinism() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let scene = dir.join("acceptance_triangle.json");
    std::fs::write(
        &scene,
        r#"{"obstacles": [
  {"kind": "sphere", "center": [0, 0, 0], "radius": 1},
  {"kind": "sphere", "center": [6, 0, 0], "radius": 1},
  {"kind": "sphere", "center": [3, 5.196152422706632, 0], "radius": 1}
]}"#,
    )
    .unwrap();
    let mut bytes = Vec::new();
    for i in 0..2 {
        let mut cfg = RunConfig::new(&scene);
        cfg.max_len = 10;
        cfg.seed = 7;
        let out = dir.join(format!("acceptance_orbits_{i}.csv"));
        cmd_orbits(&cfg).unwrap().write(Some(&out)).unwrap();
        bytes.push(std::fs::read(&out).unwrap());
    }
    Outcome {
        pass: bytes[0] == bytes[1] && !bytes[0].is_empty(),
        detail: format!(
            "two runs, {} bytes each, identical: {}",
            bytes[0].len(),
            bytes[0] == bytes[1]
        ),
    }
}

#[test]
fn acceptance() {
    let secs = |s: u64| Some(Duration::from_secs(s));
    let criteria = [
        Criterion {
            id: 1,
            name: "counting exactness",
            budget: secs(1),
            run: counting,
        },
        Criterion {
            id: 2,
            name: "two-sphere orbit",
            budget: secs(1),
            run: two_sphere_orbit,
        },
        Criterion {
            id: 3,
            name: "triangle orbit",
            budget: secs(5),
            run: triangle_orbit,
        },
        Criterion {
            id: 4,
            name: "symplecticity suite",
            budget: secs(30),
            run: symplecticity,
        },
        Criterion {
            id: 5,
            name: "length bounds on |I|",
            budget: None,
            run: length_bounds,
        },
        Criterion {
            id: 6,
            name: "amplitude convergence",
            budget: secs(10),
            run: convergence,
        },
        Criterion {
            id: 7,
            name: "decay profile",
            budget: secs(60),
            run: decay,
        },
        Criterion {
            id: 8,
            name: "far obstacles",
            budget: secs(60),
            run: far_obstacles,
        },
        Criterion {
            id: 9,
            name: "tangent crossings",
            budget: secs(30),
            run: tangent_crossings,
        },
        Criterion {
            id: 10,
            name: "determinism",
            budget: None,
            run: determinism,
        },
    ];
    let mut failed = Vec::new();
    for c in &criteria {
        let start = Instant::now();
        let out = (c.run)();
        let elapsed = start.elapsed();
        let in_time = c.budget.is_none_or(|b| elapsed <= b);
        let pass = out.pass && in_time;
        println!(
            "[{}] {:>2}. {}: {} ({:.2} s{})",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            out.detail,
            elapsed.as_secs_f64(),
            c.budget
                .map(|b| format!(" of {} s", b.as_secs()))
                .unwrap_or_default()
        );
        if !pass {
            failed.push(c.id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
