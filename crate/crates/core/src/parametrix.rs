//! Geometric-optics amplitudes of reflected plane waves.
//!
//! The phase front curvature `Q` (a symmetric 2×2 operator on the plane
//! transverse to the ray) evolves by `Q ↦ Q(I + tQ)⁻¹` over a flight of
//! length `t` and jumps by the mirror block at each reflection. The amplitude
//! of the wave reflected along a story is the product over legs of
//! `(G_arrival / G_departure)^{1/2}`, `G = det Q`.

use std::collections::HashMap;

use nalgebra::{Matrix2, Matrix3x2, Matrix4, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::billiard::{trace, BilliardError, PhasePoint, SpeedBand, TANGENCY_TOL};
use crate::chain::{self, ChainError, Ends};
use crate::geometry::{tangent_basis, Point, Scene};
use crate::ikawa::{pressure_partial_sum, Verdict};
use crate::numerics::linear_fit;
use crate::orbits::{
    find_periodic_orbit, flight, mirror, mirror_curvature, mirror_frame, OrbitError, OrbitGeometry,
    OrbitTable,
};
use crate::symbolic::{least_rotation, PrimitiveStory, Story};

/// Required agreement of the two amplitude computations.
pub const SPREADING_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParametrixError {
    #[error("caustic on leg {0}")]
    Caustic(usize),
    #[error("phase not defined here: {0}")]
    PhaseNotDefined(String),
    #[error("insufficient data: r_max = {0} < 4")]
    InsufficientData(usize),
    #[error("residuals do not decay geometrically: log-residual fit R² = {0}")]
    PoorFit(f64),
    #[error("remainder {l} is not below the period {period}")]
    BadRemainder { l: usize, period: usize },
    #[error("amplitude routes disagree: {0} vs {1}")]
    SpreadingMismatch(f64, f64),
    #[error(transparent)]
    Orbit(#[from] OrbitError),
    #[error(transparent)]
    Billiard(#[from] BilliardError),
}

impl From<ChainError> for ParametrixError {
    fn from(e: ChainError) -> Self {
        ParametrixError::PhaseNotDefined(e.to_string())
    }
}

/// Curvature operator of a phase front in an orthonormal transverse frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavefrontCurvature {
    pub q: Matrix2<f64>,
    pub frame: Matrix3x2<f64>,
}

impl WavefrontCurvature {
    pub fn plane(direction: &Vector3<f64>) -> Self {
        Self {
            q: Matrix2::zeros(),
            frame: Matrix3x2::from_columns(&tangent_basis(&direction.normalize())),
        }
    }

    /// Spherical front of radius `radius` diverging along `direction`.
    pub fn point_source(direction: &Vector3<f64>, radius: f64) -> Self {
        Self {
            q: Matrix2::identity() / radius,
            ..Self::plane(direction)
        }
    }

    pub fn gauss(&self) -> f64 {
        self.q.determinant()
    }

    pub fn principal_curvatures(&self) -> [f64; 2] {
        let e = self.q.symmetric_eigenvalues();
        [e.min(), e.max()]
    }

    /// Free flight of length `t`.
    pub fn fly(&self, t: f64, leg: usize) -> Result<Self, ParametrixError> {
        let m = Matrix2::identity() + self.q * t;
        if m.determinant() <= 0.0 || m.trace() <= 0.0 {
            return Err(ParametrixError::Caustic(leg));
        }
        let inv = m.try_inverse().ok_or(ParametrixError::Caustic(leg))?;
        let q = self.q * inv;
        Ok(Self {
            q: (q + q.transpose()) * 0.5,
            frame: self.frame,
        })
    }

    /// Specular reflection with incoming unit direction `d` at a boundary
    /// point with the given surface data.
    pub fn reflect(&self, surface: &crate::geometry::SurfaceFrame, d: &Vector3<f64>) -> Self {
        let c = mirror_curvature(surface, d, &self.frame);
        Self {
            q: self.q + c,
            frame: mirror_frame(&self.frame, &surface.normal),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveEvent {
    BeforeReflection(usize),
    AfterReflection(usize),
    Endpoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavefrontSample {
    pub event: WaveEvent,
    pub position: Point,
    pub direction: Vector3<f64>,
    pub curvature: WavefrontCurvature,
}

/// Carries `q0` along the ray from `start` through the reflections of
/// `story`, then a further distance `tail`.
pub fn wavefront_transport(
    scene: &Scene,
    start: &PhasePoint,
    q0: &WavefrontCurvature,
    story: &Story,
    tail: f64,
) -> Result<Vec<WavefrontSample>, ParametrixError> {
    let ray = trace(scene, start, f64::INFINITY, story.len())?;
    let realized: Vec<usize> = ray.events.iter().map(|e| e.obstacle).collect();
    if realized.len() < story.len() || realized[..story.len()] != *story.letters() {
        return Err(ParametrixError::PhaseNotDefined(format!(
            "ray realizes {} instead of {story}",
            Story::new(realized)
                .map(|s| s.to_string())
                .unwrap_or_default()
        )));
    }
    let mut out = Vec::with_capacity(2 * story.len() + 1);
    let mut w = *q0;
    let mut pos = start.x;
    let mut dir = start.xi.normalize();
    for (k, e) in ray.events.iter().take(story.len()).enumerate() {
        w = w.fly((e.point - pos).norm(), k)?;
        out.push(WavefrontSample {
            event: WaveEvent::BeforeReflection(k),
            position: e.point,
            direction: dir,
            curvature: w,
        });
        let surface = scene.obstacle(e.obstacle).surface_frame_unchecked(&e.point);
        w = w.reflect(&surface, &dir);
        dir = e.outgoing.normalize();
        pos = e.point;
        out.push(WavefrontSample {
            event: WaveEvent::AfterReflection(k),
            position: pos,
            direction: dir,
            curvature: w,
        });
    }
    w = w.fly(tail, story.len())?;
    out.push(WavefrontSample {
        event: WaveEvent::Endpoint,
        position: pos + dir * tail,
        direction: dir,
        curvature: w,
    });
    Ok(out)
}

/// `Λφ_J` at one reference point with its ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeTrace {
    pub story: Story,
    /// Product of the per-leg curvature ratios.
    pub lambda_phi: f64,
    /// `|det A|^{-1/2}` from the composed linear ray maps.
    pub lambda_phi_spreading: f64,
    /// `(G_arr / G_dep)^{1/2}` for each leg after a reflection.
    pub leg_factors: Vec<f64>,
    /// `[c₁|J|, c₂(|J|+1)]` with `c₁ = d_min/(2|ξ|)`, `c₂ = diam/(2|ξ|)`.
    pub t_window: (f64, f64),
    pub points: Vec<Point>,
    /// Phase `ω·q_0 + Σ|q_{i+1} − q_i| + |x − q_last|`.
    pub phase: f64,
}

fn segment_blocked(scene: &Scene, a: &Point, b: &Point, skip: &[usize]) -> Option<usize> {
    let d = b - a;
    scene.obstacles().iter().enumerate().find_map(|(k, obs)| {
        if skip.contains(&k) {
            return None;
        }
        match obs.ray_interval(a, &d) {
            Some((t1, t2)) if t2 > 0.0 && t1 < 1.0 => Some(k),
            _ => None,
        }
    })
}

/// Amplitude of the plane wave with direction `xi` reflected along `story`
/// and read at `x`.
pub fn lambda_phi(
    scene: &Scene,
    story: &Story,
    xi: &Vector3<f64>,
    x: &Point,
) -> Result<AmplitudeTrace, ParametrixError> {
    let speed = xi.norm();
    if speed == 0.0 {
        return Err(ParametrixError::Billiard(BilliardError::ZeroVelocity));
    }
    let n = story.len();
    let c1 = scene.d_min() / (2.0 * speed);
    let c2 = scene.hull_diameter() / (2.0 * speed);
    let t_window = (c1 * n as f64, c2 * (n as f64 + 1.0));
    if let Some(k) = scene
        .obstacles()
        .iter()
        .position(|o| o.contains_strictly(x))
    {
        return Err(ParametrixError::PhaseNotDefined(format!(
            "x inside obstacle {}",
            k + 1
        )));
    }
    let omega = xi / speed;
    if n == 0 {
        return Ok(AmplitudeTrace {
            story: story.clone(),
            lambda_phi: 1.0,
            lambda_phi_spreading: 1.0,
            leg_factors: Vec::new(),
            t_window,
            points: Vec::new(),
            phase: omega.dot(x),
        });
    }
    let word = story.letters();
    if word.iter().any(|&k| k >= scene.len()) {
        return Err(ParametrixError::PhaseNotDefined(
            "letter outside the scene".into(),
        ));
    }
    let ends = Ends::Open {
        incoming: omega,
        endpoint: *x,
    };
    let sol = chain::solve_chain(scene, word, &ends)?;
    if sol.residual > 1e-9 {
        return Err(ParametrixError::PhaseNotDefined(format!(
            "stationary ray not found ({:e})",
            sol.residual
        )));
    }
    let pts = &sol.points;
    // Realizability: transversal reflections and unobstructed legs.
    let mut dirs = Vec::with_capacity(n + 1);
    dirs.push(omega);
    for i in 0..n {
        let next = if i + 1 == n { *x } else { pts[i + 1] };
        dirs.push((next - pts[i]).normalize());
    }
    for i in 0..n {
        let nrm = scene.obstacle(word[i]).normal_at(&pts[i]);
        if dirs[i].dot(&nrm) > -TANGENCY_TOL || dirs[i + 1].dot(&nrm) < TANGENCY_TOL {
            return Err(ParametrixError::PhaseNotDefined(format!(
                "no transversal reflection at letter {}",
                i + 1
            )));
        }
    }
    for i in 0..n {
        let (a, b) = if i + 1 == n {
            (pts[i], *x)
        } else {
            (pts[i], pts[i + 1])
        };
        let skip: Vec<usize> = if i + 1 == n {
            vec![word[i]]
        } else {
            vec![word[i], word[i + 1]]
        };
        if let Some(k) = segment_blocked(scene, &a, &b, &skip) {
            return Err(ParametrixError::PhaseNotDefined(format!(
                "leg {} crosses obstacle {}",
                i + 1,
                k + 1
            )));
        }
    }
    // Route 1: curvature ratios. Route 2: composed linear ray maps.
    let mut w = WavefrontCurvature::plane(&omega);
    let mut bundle = Matrix4::<f64>::identity();
    let mut leg_factors = Vec::with_capacity(n);
    for i in 0..n {
        let surface = scene.obstacle(word[i]).surface_frame_unchecked(&pts[i]);
        let c = mirror_curvature(&surface, &dirs[i], &w.frame);
        bundle = mirror(&c) * bundle;
        w = w.reflect(&surface, &dirs[i]);
        let len = if i + 1 == n {
            (x - pts[i]).norm()
        } else {
            (pts[i + 1] - pts[i]).norm()
        };
        let g_dep = w.gauss();
        w = w.fly(len, i + 1)?;
        let g_arr = w.gauss();
        leg_factors.push((g_arr / g_dep).sqrt());
        bundle = flight(len) * bundle;
    }
    let lambda = leg_factors.iter().product::<f64>();
    let spread = bundle
        .fixed_view::<2, 2>(0, 0)
        .determinant()
        .abs()
        .powf(-0.5);
    if ((lambda - spread) / spread).abs() > SPREADING_TOL {
        return Err(ParametrixError::SpreadingMismatch(lambda, spread));
    }
    Ok(AmplitudeTrace {
        story: story.clone(),
        lambda_phi: lambda,
        lambda_phi_spreading: spread,
        leg_factors,
        t_window,
        points: sol.points.clone(),
        phase: sol.value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub r: usize,
    pub story_len: usize,
    /// `Λφ_J` from the curvature recursion along the orbit.
    pub lambda_phi: f64,
    /// `Λφ_J` from [`lambda_phi`] (stationary-ray solve).
    pub lambda_phi_direct: f64,
    /// `|Λφ_J − λ_I^r a|`.
    pub residual: f64,
    /// `max over the stencil of Λφ_J / λ_I^r`.
    pub stencil_sup_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub word: String,
    pub remainder: usize,
    /// λ_I from the orbit's return map.
    pub lambda_orbit: f64,
    /// λ_I from the invariant front curvature; used in the residuals.
    pub lambda_front: f64,
    pub a: f64,
    /// `a` fitted as the mean of `Λφ_J / λ^r` over the last two rows.
    pub a_tail_fit: f64,
    pub alpha_fit: f64,
    pub c_fit: f64,
    pub r_squared: f64,
    pub stencil_radius: f64,
    /// `max_r Λφ_J / λ_I^{|J|/|I|}`.
    pub essential_constant: f64,
    pub rows: Vec<ConvergenceRow>,
}

/// Per-period data of the orbit for the front recursion.
struct Period {
    /// Mirror block at `q_s` in the frame of segment `s − 1`.
    kicks: Vec<Matrix2<f64>>,
    /// Frame change applied after reflecting at `q_s` (only `q_0` closes the
    /// loop).
    rotations: Vec<Matrix2<f64>>,
    lengths: Vec<f64>,
}

impl Period {
    fn new(geo: &OrbitGeometry) -> Self {
        let m = geo.len();
        let frames = geo.transported_frames();
        let b = OrbitGeometry::closing_rotation(&frames);
        let kicks = (0..m)
            .map(|s| {
                let prev = (s + m - 1) % m;
                geo.mirror_block(if s == 0 { m } else { s }, &frames[prev])
            })
            .collect();
        let rotations = (0..m)
            .map(|s| if s == 0 { b } else { Matrix2::identity() })
            .collect();
        Self {
            kicks,
            rotations,
            lengths: geo.lengths.clone(),
        }
    }

    fn reflect(&self, s: usize, q: &Matrix2<f64>) -> Matrix2<f64> {
        let r = &self.rotations[s];
        r * (q + self.kicks[s]) * r.transpose()
    }

    fn rotate(&self, s: usize, d: &Matrix2<f64>) -> Matrix2<f64> {
        let r = &self.rotations[s];
        r * d * r.transpose()
    }
}

fn fly_q(q: &Matrix2<f64>, t: f64) -> Matrix2<f64> {
    let inv = (Matrix2::identity() + q * t)
        .try_inverse()
        .expect("front stays regular after convex reflections");
    let out = q * inv;
    (out + out.transpose()) * 0.5
}

/// `ln det(I + E)` for small `E`, without cancellation.
fn log_det_one_plus(e: &Matrix2<f64>) -> f64 {
    (e.trace() + e.determinant()).ln_1p()
}

/// Verifies `Λφ_{rI+l} → λ_I^r a` for the plane wave entering the orbit of
/// `word` along its closing segment, read at the midpoint of the last leg.
///
/// The front along the central ray is split as `Q = Q* + δ`, with `Q*` the
/// invariant front of the orbit. Deviations are carried exactly,
/// `δ ↦ (I + tQ)⁻¹ δ (I + tQ*)⁻¹`, so residuals far below `λ^r a · ε_mach`
/// stay resolved.
pub fn convergence_check(
    scene: &Scene,
    word: &PrimitiveStory,
    l: usize,
    r_max: usize,
) -> Result<ConvergenceReport, ParametrixError> {
    if r_max < 4 {
        return Err(ParametrixError::InsufficientData(r_max));
    }
    let m = word.len();
    if l >= m {
        return Err(ParametrixError::BadRemainder { l, period: m });
    }
    let orbit = find_periodic_orbit(scene, word)?;
    let geo = OrbitGeometry::new(scene, word.letters(), &orbit.points);
    let per = Period::new(&geo);

    // Invariant departure fronts Q*_s, s = 0..m-1.
    let mut q = Matrix2::<f64>::zeros();
    for _ in 0..10_000 {
        let prev = q;
        for s in 0..m {
            q = per.reflect(s, &q);
            if s + 1 < m {
                q = fly_q(&q, per.lengths[s]);
            }
        }
        q = fly_q(&q, per.lengths[m - 1]);
        if (q - prev).amax() <= 1e-16 * q.amax() {
            break;
        }
    }
    let q_arrival = q;
    let mut q_star = Vec::with_capacity(m);
    let mut cur = q_arrival;
    for s in 0..m {
        cur = per.reflect(s, &cur);
        q_star.push(cur);
        cur = fly_q(&cur, per.lengths[s]);
    }
    let log_f = |s: usize, t: f64| -0.5 * (Matrix2::identity() + q_star[s] * t).determinant().ln();
    let log_lambda: f64 = (0..m).map(|s| log_f(s, per.lengths[s])).sum();
    let lambda = log_lambda.exp();

    // Deviation terms e_k for full legs and h_k for half legs.
    let legs_needed = r_max * m + l + 64 * m + 64;
    let mut delta = per.rotate(0, &(-q_arrival));
    let mut full = Vec::with_capacity(legs_needed);
    let mut half = Vec::with_capacity(legs_needed);
    for k in 0..legs_needed {
        let s = k % m;
        let len = per.lengths[s];
        let base = Matrix2::identity() + q_star[s] * len;
        let base_inv = base.try_inverse().expect("invariant front is regular");
        let base_half_inv = (Matrix2::identity() + q_star[s] * (len / 2.0))
            .try_inverse()
            .unwrap();
        full.push(-0.5 * log_det_one_plus(&(base_inv * delta * len)));
        half.push(-0.5 * log_det_one_plus(&(base_half_inv * delta * (len / 2.0))));
        let with = (Matrix2::identity() + (q_star[s] + delta) * len)
            .try_inverse()
            .expect("regular front");
        let next = with * delta * base_inv;
        delta = per.rotate((s + 1) % m, &((next + next.transpose()) * 0.5));
    }
    // Suffix sums of the full-leg terms.
    let mut suffix = vec![0.0; legs_needed + 1];
    for k in (0..legs_needed).rev() {
        suffix[k] = suffix[k + 1] + full[k];
    }
    let b_l = if l == 0 {
        -log_f(m - 1, per.lengths[m - 1]) + log_f(m - 1, per.lengths[m - 1] / 2.0)
    } else {
        (0..l.saturating_sub(1))
            .map(|j| log_f(j, per.lengths[j]))
            .sum::<f64>()
            + log_f(l - 1, per.lengths[l - 1] / 2.0)
    };
    let log_a = b_l + suffix[0];
    let a = log_a.exp();

    let last_seg = (l + m - 1) % m;
    let x = geo.midpoint(last_seg);
    let omega = geo.directions[m - 1];
    let frame = tangent_basis(&geo.directions[last_seg]);
    let radius = 0.025 * scene.d_min();
    let stencil: Vec<Point> = std::iter::once(x)
        .chain(
            [frame[0], -frame[0], frame[1], -frame[1]]
                .iter()
                .map(|v| x + v * radius),
        )
        .collect();

    let mut rows = Vec::with_capacity(r_max);
    for r in 1..=r_max {
        let n = r * m + l;
        let rho = -suffix[n - 1] + half[n - 1];
        let value = (r as f64 * log_lambda + log_a + rho).exp();
        let residual = (r as f64 * log_lambda).exp() * a * rho.exp_m1().abs();
        let story = word.story().repeat_with_prefix(r, l);
        let direct = lambda_phi(scene, &story, &omega, &x)?.lambda_phi;
        let mut sup: f64 = 0.0;
        for p in &stencil {
            let v = lambda_phi(scene, &story, &omega, p)?.lambda_phi;
            sup = sup.max(v / lambda.powi(r as i32));
        }
        rows.push(ConvergenceRow {
            r,
            story_len: n,
            lambda_phi: value,
            lambda_phi_direct: direct,
            residual,
            stencil_sup_ratio: sup,
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|row| row.residual > 0.0)
        .map(|row| {
            (
                row.story_len as f64,
                (row.residual / lambda.powi(row.r as i32)).ln(),
            )
        })
        .collect();
    let (slope, _, r2) = linear_fit(&pts).ok_or(ParametrixError::PoorFit(f64::NAN))?;
    if !(r2 >= 0.9) {
        return Err(ParametrixError::PoorFit(r2));
    }
    let alpha_fit = slope.exp();
    let c_fit = rows
        .iter()
        .map(|row| {
            row.residual / (lambda.powi(row.r as i32) * alpha_fit.powi(row.story_len as i32))
        })
        .fold(0.0, f64::max);
    let tail: Vec<f64> = rows[rows.len() - 2..]
        .iter()
        .map(|row| row.lambda_phi / lambda.powi(row.r as i32))
        .collect();
    let essential_constant = rows
        .iter()
        .map(|row| row.lambda_phi / orbit.lambda_gamma.powf(row.story_len as f64 / m as f64))
        .fold(0.0, f64::max);
    Ok(ConvergenceReport {
        word: word.to_string(),
        remainder: l,
        lambda_orbit: orbit.lambda_gamma,
        lambda_front: lambda,
        a,
        a_tail_fit: 0.5 * (tail[0] + tail[1]),
        alpha_fit,
        c_fit,
        r_squared: r2,
        stencil_radius: radius,
        essential_constant,
        rows,
    })
}

/// How `|I|` enters the aggregated orbit bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Multiplicity {
    #[default]
    Exact,
    /// `d_γ / hull_diameter` (lower bound of `|I|`).
    HullDiameter,
    /// `d_γ / d_min` (upper bound of `|I|`).
    MinGap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayRow {
    pub t: f64,
    /// `Σ λ_I^{|J|/|I|}` over active stories `J = rI + l`.
    pub d: f64,
    /// `Σ λ_I^r` over the same stories.
    pub d_periods: f64,
    /// `Σ_I |I| λ_I^{ρ(I,t)} / (1 − λ_I)`.
    pub d_bound: f64,
    pub active_story_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub mu: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayProfile {
    pub c1: f64,
    pub c2: f64,
    pub t0: f64,
    pub multiplicity: Multiplicity,
    pub rows: Vec<DecayRow>,
    pub fit: DecayFit,
    pub fit_periods: DecayFit,
    pub fit_bound: DecayFit,
    /// Active stories whose primitive root is missing from the table.
    pub missing_roots: u64,
    /// The table misses word lengths that are active before `t_max`.
    pub truncated: bool,
    pub decay_not_guaranteed: bool,
}

/// `n` midpoints of equal cells covering `[t0, t_max]`.
pub fn midpoint_grid(t0: f64, t_max: f64, n: usize) -> Vec<f64> {
    let h = (t_max - t0) / n as f64;
    (0..n).map(|i| t0 + (i as f64 + 0.5) * h).collect()
}

/// Smallest `r ≥ 1` such that some `J = rI + s` (`0 ≤ s < |I|`) has
/// `|J| ∈ [n_lo, n_hi]`.
fn rho(m: usize, n_lo: usize, n_hi: usize) -> Option<u64> {
    let r = (n_lo / m).max(1);
    (n_lo.max(r * m) <= n_hi).then_some(r as u64)
}

/// Active word lengths at time `t`: `c₁ n ≤ t ≤ c₂ (n + 1)`.
fn active_lengths(t: f64, c1: f64, c2: f64) -> (usize, usize) {
    let lo = (t / c2 - 1.0).ceil().max(1.0) as usize;
    let hi = (t / c1).floor().max(0.0) as usize;
    (lo, hi)
}

/// Totals over the stories of one length.
#[derive(Debug, Clone, Copy, Default)]
struct StorySum {
    /// `Σ λ_I^{|J|/|I|}`.
    per_letter: f64,
    /// `Σ λ_I^r`.
    per_period: f64,
    count: u64,
    /// Stories whose root has no orbit in the table.
    missing: u64,
}

/// Totals over the stories of each length `n ≤ max_len`.
fn story_sums(table: &OrbitTable, max_len: usize) -> Vec<StorySum> {
    let lambda: HashMap<Vec<usize>, f64> = table
        .orbits
        .iter()
        .map(|o| (o.itinerary.letters().to_vec(), o.lambda_gamma))
        .collect();
    let n_obs = table.obstacle_count;
    let mut out = vec![StorySum::default(); max_len + 1];
    let mut word = Vec::with_capacity(max_len);
    let mut key = Vec::with_capacity(max_len);
    // Depth-first over admissible words; `word` holds the current prefix.
    fn visit(
        word: &mut Vec<usize>,
        key: &mut Vec<usize>,
        n_obs: usize,
        max_len: usize,
        lambda: &HashMap<Vec<usize>, f64>,
        out: &mut [StorySum],
    ) {
        let n = word.len();
        if n >= 2 {
            let p = (2..=n)
                .find(|&p| word[p - 1] != word[0] && (p..n).all(|i| word[i] == word[i - p]))
                .expect("admissible words have a cyclic period");
            let root = &word[..p];
            let s = least_rotation(root);
            key.clear();
            key.extend_from_slice(&root[s..]);
            key.extend_from_slice(&root[..s]);
            let slot = &mut out[n];
            slot.count += 1;
            match lambda.get(key.as_slice()) {
                Some(l) => {
                    slot.per_period += l.powi((n / p) as i32);
                    slot.per_letter += l.powf(n as f64 / p as f64);
                }
                None => slot.missing += 1,
            }
        }
        if n == max_len {
            return;
        }
        for c in 0..n_obs {
            if word.last() != Some(&c) {
                word.push(c);
                visit(word, key, n_obs, max_len, lambda, out);
                word.pop();
            }
        }
    }
    visit(&mut word, &mut key, n_obs, max_len, &lambda, &mut out);
    out
}

fn fit_log(rows: &[DecayRow], t0: f64, value: impl Fn(&DecayRow) -> f64) -> DecayFit {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.t >= t0 && value(r) > 0.0)
        .map(|r| (r.t, value(r).ln()))
        .collect();
    let (slope, intercept, r_squared) = linear_fit(&pts).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    DecayFit {
        mu: -slope,
        intercept,
        r_squared,
    }
}

/// `(c₁, c₂) = (min segment / (2β₀), max segment / (2α₀))` over the
/// orbits of the table.
pub fn support_constants(table: &OrbitTable, band: &SpeedBand) -> (f64, f64) {
    let (min_seg, max_seg) = table
        .orbits
        .iter()
        .flat_map(|o| o.segment_lengths())
        .fold((f64::INFINITY, 0.0f64), |(a, b), l| (a.min(l), b.max(l)));
    (min_seg / (2.0 * band.beta0), max_seg / (2.0 * band.alpha0))
}

/// Decay of the summed amplitude bounds of the stories active at each `t`.
///
/// A story `J = rI + l` is active when `c₁|J| ≤ t ≤ c₂(|J| + 1)`, with
/// `c₁ = min segment / (2β₀)` and `c₂ = max segment / (2α₀)` over the
/// orbits in the table, and contributes `λ_I^r`. The aggregated bound
/// `Σ_I |I| λ_I^{ρ(I,t)} / (1 − λ_I)` is reported alongside. Both are fitted
/// by `ln D ≈ c − μt` on `t ≥ t0` (default `2c₂`).
pub fn decay_profile(
    scene: &Scene,
    table: &OrbitTable,
    t_grid: &[f64],
    band: SpeedBand,
    multiplicity: Multiplicity,
    t0: Option<f64>,
) -> DecayProfile {
    let (c1, c2) = support_constants(table, &band);
    let max_seg = 2.0 * c2 * band.alpha0;
    let t0 = t0.unwrap_or(2.0 * c2);
    let k = table.max_word_len;
    let t_max = t_grid.iter().copied().fold(0.0, f64::max);
    // With two obstacles every story is periodic of period 2, so lengths
    // beyond the table stay cheap and fully covered.
    let n_hi_max = active_lengths(t_max, c1, c2).1;
    let n_max = if table.obstacle_count == 2 {
        n_hi_max
    } else {
        n_hi_max.min(k)
    };
    let sums = story_sums(table, n_max);
    let weights: Vec<(usize, f64, f64)> = table
        .orbits
        .iter()
        .map(|o| {
            let mult = match multiplicity {
                Multiplicity::Exact => o.len() as f64,
                Multiplicity::HullDiameter => o.d_gamma / scene.hull_diameter(),
                Multiplicity::MinGap => o.d_gamma / scene.d_min(),
            };
            (o.len(), mult / (1.0 - o.lambda_gamma), o.lambda_gamma.ln())
        })
        .collect();
    let mut missing_roots = 0;
    let rows: Vec<DecayRow> = t_grid
        .iter()
        .map(|&t| {
            let (lo, hi) = active_lengths(t, c1, c2);
            let hi = hi.min(n_max);
            let (mut d, mut d_periods, mut active) = (0.0, 0.0, 0u64);
            for s in sums.get(lo..=hi).unwrap_or(&[]) {
                d += s.per_letter;
                d_periods += s.per_period;
                active += s.count;
                missing_roots = missing_roots.max(s.missing);
            }
            let mut d_bound = 0.0;
            for &(m, w, ln_l) in &weights {
                if let Some(r) = rho(m, lo, hi) {
                    d_bound += w * (r as f64 * ln_l).exp();
                }
            }
            DecayRow {
                t,
                d,
                d_periods,
                d_bound,
                active_story_count: active,
            }
        })
        .collect();
    let fit = fit_log(&rows, t0, |r| r.d);
    let fit_periods = fit_log(&rows, t0, |r| r.d_periods);
    let fit_bound = fit_log(&rows, t0, |r| r.d_bound);
    let truncated = n_max < n_hi_max || missing_roots > 0;
    let probe_alpha = 0.01 / max_seg.max(f64::MIN_POSITIVE);
    let decay_not_guaranteed = table.obstacle_count > 2
        && pressure_partial_sum(table, probe_alpha, k, false)
            .map(|r| r.verdict != Verdict::Converges)
            .unwrap_or(true);
    DecayProfile {
        c1,
        c2,
        t0,
        multiplicity,
        rows,
        fit,
        fit_periods,
        fit_bound,
        missing_roots,
        truncated,
        decay_not_guaranteed,
    }
}
