//! Broken-ray flow outside the obstacles: first hits, specular reflection,
//! event traces, near-tangency classification and a divergence probe.
//!
//! Time is the ray parameter, so a state `(x, ξ)` moves a distance `t|ξ|`
//! in time `t`.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{Point, Scene};
use crate::symbolic::Story;

/// `|cos|` below this at an impact is treated as a tangency.
pub const TANGENCY_TOL: f64 = 1e-7;

/// Event cap used by [`flow`].
pub const FLOW_MAX_EVENTS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BilliardError {
    #[error("reflection from inside: incoming direction points out of the obstacle")]
    ReflectionFromInside,
    #[error("tangency at obstacle {} (time {time})", obstacle + 1)]
    Tangency {
        obstacle: usize,
        time: f64,
        point: Point,
    },
    #[error("zero velocity")]
    ZeroVelocity,
    #[error("starting point lies inside obstacle {}", .0 + 1)]
    StartInside(usize),
    #[error("invalid speed band [{0}, {1}]")]
    InvalidSpeedBand(f64, f64),
}

/// A point of phase space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint {
    pub x: Point,
    pub xi: Vector3<f64>,
}

impl PhasePoint {
    pub fn new(x: Point, xi: Vector3<f64>) -> Self {
        Self { x, xi }
    }

    pub fn speed(&self) -> f64 {
        self.xi.norm()
    }

    /// Same point, reversed velocity.
    pub fn reversed(&self) -> Self {
        Self {
            x: self.x,
            xi: -self.xi,
        }
    }
}

/// Distance on phase space: `|x - y| + |ξ - η|`.
pub fn phase_distance(a: &PhasePoint, b: &PhasePoint) -> f64 {
    (a.x - b.x).norm() + (a.xi - b.xi).norm()
}

/// The band `alpha0 <= |ξ| <= beta0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedBand {
    pub alpha0: f64,
    pub beta0: f64,
}

impl SpeedBand {
    pub fn new(alpha0: f64, beta0: f64) -> Result<Self, BilliardError> {
        if !(alpha0 > 0.0 && beta0 >= alpha0 && beta0.is_finite()) {
            return Err(BilliardError::InvalidSpeedBand(alpha0, beta0));
        }
        Ok(Self { alpha0, beta0 })
    }

    pub fn contains(&self, speed: f64) -> bool {
        speed >= self.alpha0 && speed <= self.beta0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub time: f64,
    pub obstacle: usize,
    pub point: Point,
}

/// Nearest forward intersection of the ray with the obstacles.
pub fn first_hit(scene: &Scene, p: &PhasePoint) -> Option<Hit> {
    first_hit_excluding(scene, p, None)
}

/// As [`first_hit`], skipping obstacle `exclude` (the one just left).
pub fn first_hit_excluding(scene: &Scene, p: &PhasePoint, exclude: Option<usize>) -> Option<Hit> {
    let speed = p.xi.norm();
    if speed == 0.0 {
        return None;
    }
    // Rounding slack in time units for rays starting on a boundary.
    let eps = 1e-12 * (1.0 + p.x.norm()) / speed;
    let mut best: Option<Hit> = None;
    for (k, obs) in scene.obstacles().iter().enumerate() {
        if Some(k) == exclude {
            continue;
        }
        let Some((t1, _)) = obs.ray_interval(&p.x, &p.xi) else {
            continue;
        };
        if t1 <= eps {
            continue;
        }
        if best.is_none_or(|b| t1 < b.time) {
            best = Some(Hit {
                time: t1,
                obstacle: k,
                point: p.x + p.xi * t1,
            });
        }
    }
    best
}

/// Specular reflection `ξ - 2(ξ·n)n`, renormalised to `|ξ|`.
///
/// Fails if `ξ` points out of the obstacle (`ξ·n > 0`).
pub fn reflect(
    incoming: &Vector3<f64>,
    normal: &Vector3<f64>,
) -> Result<Vector3<f64>, BilliardError> {
    let n = normal.normalize();
    let c = incoming.dot(&n);
    if c > 0.0 {
        return Err(BilliardError::ReflectionFromInside);
    }
    let out = incoming - n * (2.0 * c);
    let norm = out.norm();
    if norm == 0.0 {
        return Err(BilliardError::ZeroVelocity);
    }
    Ok(out * (incoming.norm() / norm))
}

/// What [`trace_with`] does at a grazing impact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TangencyPolicy {
    #[default]
    Error,
    /// Continue straight; the event is recorded with `grazing = true`.
    PassThrough,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub obstacle: usize,
    pub point: Point,
    pub incoming: Vector3<f64>,
    pub outgoing: Vector3<f64>,
    pub grazing: bool,
}

/// A finite piece of broken ray starting at `initial`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrokenRay {
    pub initial: PhasePoint,
    pub events: Vec<Event>,
    /// Time actually covered; equals the requested horizon unless truncated.
    pub total_time: f64,
    /// Stopped at the event cap before reaching the horizon.
    pub truncated: bool,
}

impl BrokenRay {
    /// State at time `t` in `[0, total_time]`; right-continuous at impacts.
    pub fn state_at(&self, t: f64) -> PhasePoint {
        let idx = self.events.partition_point(|e| e.time <= t);
        let (t0, x0, xi) = if idx == 0 {
            (0.0, self.initial.x, self.initial.xi)
        } else {
            let e = &self.events[idx - 1];
            (e.time, e.point, e.outgoing)
        };
        PhasePoint::new(x0 + xi * (t - t0), xi)
    }

    pub fn final_state(&self) -> PhasePoint {
        self.state_at(self.total_time)
    }

    /// Obstacles reflected from, in order (grazing passes excluded).
    pub fn story(&self) -> Story {
        let word = self
            .events
            .iter()
            .filter(|e| !e.grazing)
            .map(|e| e.obstacle)
            .collect();
        Story::new(word).expect("consecutive reflections are on distinct obstacles")
    }

    /// Straight pieces `(start, unit direction, length)`; the last piece runs
    /// to `total_time`.
    pub fn segments(&self) -> Vec<(Point, Vector3<f64>, f64)> {
        let mut out = Vec::with_capacity(self.events.len() + 1);
        let (mut t0, mut x0, mut xi) = (0.0, self.initial.x, self.initial.xi);
        for e in &self.events {
            out.push((x0, xi.normalize(), (e.time - t0) * xi.norm()));
            t0 = e.time;
            x0 = e.point;
            xi = e.outgoing;
        }
        out.push((
            x0,
            xi.normalize(),
            (self.total_time - t0).max(0.0) * xi.norm(),
        ));
        out
    }
}

/// Follows the broken ray for time `horizon` or `max_events` impacts.
pub fn trace(
    scene: &Scene,
    p: &PhasePoint,
    horizon: f64,
    max_events: usize,
) -> Result<BrokenRay, BilliardError> {
    trace_with(scene, p, horizon, max_events, TangencyPolicy::Error)
}

pub fn trace_with(
    scene: &Scene,
    p: &PhasePoint,
    horizon: f64,
    max_events: usize,
    policy: TangencyPolicy,
) -> Result<BrokenRay, BilliardError> {
    if p.xi.norm() == 0.0 {
        return Err(BilliardError::ZeroVelocity);
    }
    if let Some(k) = scene
        .obstacles()
        .iter()
        .position(|o| o.contains_strictly(&p.x))
    {
        return Err(BilliardError::StartInside(k));
    }
    let mut events = Vec::new();
    let mut state = *p;
    let mut time = 0.0;
    let mut last: Option<usize> = None;
    loop {
        let hit = first_hit_excluding(scene, &state, last);
        let Some(hit) = hit.filter(|h| time + h.time <= horizon) else {
            return Ok(BrokenRay {
                initial: *p,
                events,
                total_time: horizon,
                truncated: false,
            });
        };
        if events.len() >= max_events {
            return Ok(BrokenRay {
                initial: *p,
                events,
                total_time: time,
                truncated: true,
            });
        }
        let t_hit = time + hit.time;
        let obs = scene.obstacle(hit.obstacle);
        let n = obs.normal_at(&hit.point);
        let speed = state.xi.norm();
        let grazing = state.xi.dot(&n).abs() < TANGENCY_TOL * speed;
        let outgoing = if grazing {
            match policy {
                TangencyPolicy::Error => {
                    return Err(BilliardError::Tangency {
                        obstacle: hit.obstacle,
                        time: t_hit,
                        point: hit.point,
                    })
                }
                TangencyPolicy::PassThrough => state.xi,
            }
        } else {
            reflect(&state.xi, &n)?
        };
        events.push(Event {
            time: t_hit,
            obstacle: hit.obstacle,
            point: hit.point,
            incoming: state.xi,
            outgoing,
            grazing,
        });
        state = PhasePoint::new(hit.point, outgoing);
        time = t_hit;
        last = Some(hit.obstacle);
    }
}

/// `Φ_t(p)`, for either sign of `t`.
pub fn flow(scene: &Scene, p: &PhasePoint, t: f64) -> Result<PhasePoint, BilliardError> {
    if t >= 0.0 {
        Ok(trace(scene, p, t, FLOW_MAX_EVENTS)?.final_state())
    } else {
        Ok(trace(scene, &p.reversed(), -t, FLOW_MAX_EVENTS)?
            .final_state()
            .reversed())
    }
}

/// Number of distinct near-tangent crossings of the trajectory up to
/// `horizon`.
///
/// A straight piece is near tangent to an obstacle when the line passes within
/// `eta` of grazing it, measured in the obstacle's unit-sphere coordinates
/// scaled back by its smallest semi-axis, and the point of closest approach
/// lies within one obstacle radius of the piece. Pieces flagged for the same
/// obstacle on either side of an impact on it count once.
pub fn tangency_classify(
    scene: &Scene,
    p: &PhasePoint,
    eta: f64,
    horizon: f64,
) -> Result<usize, BilliardError> {
    let ray = trace_with(
        scene,
        p,
        horizon,
        FLOW_MAX_EVENTS,
        TangencyPolicy::PassThrough,
    )?;
    let segments = ray.segments();
    let mut flagged: Vec<Vec<usize>> = Vec::with_capacity(segments.len());
    for (start, dir, len) in &segments {
        let mut near = Vec::new();
        for (k, obs) in scene.obstacles().iter().enumerate() {
            if let Some((offset, s_star)) = grazing_offset(obs, start, dir) {
                let r = obs.max_extent();
                if offset < eta && s_star >= -r && s_star <= len + r {
                    near.push(k);
                }
            }
        }
        flagged.push(near);
    }
    let mut count = 0;
    for (i, near) in flagged.iter().enumerate() {
        for &k in near {
            let continues = i > 0 && ray.events[i - 1].obstacle == k && flagged[i - 1].contains(&k);
            if !continues {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// `(|b' - 1| * min semi-axis, closest-approach distance along the line)`,
/// where `b'` is the line's distance to the origin in unit-sphere coordinates.
fn grazing_offset(
    obs: &crate::geometry::ConvexObstacle,
    start: &Point,
    dir: &Vector3<f64>,
) -> Option<(f64, f64)> {
    use crate::geometry::Shape;
    match &obs.shape {
        Shape::Sphere { radius } => {
            let rel = obs.center - start;
            let s = rel.dot(dir);
            let b = (rel - dir * s).norm();
            Some(((b - radius).abs(), s))
        }
        Shape::Ellipsoid {
            semiaxes,
            orientation,
        } => {
            let y0 = (orientation * (start - obs.center)).component_div(semiaxes);
            let d = (orientation * dir).component_div(semiaxes);
            let dd = d.norm_squared();
            if dd == 0.0 {
                return None;
            }
            let s = -y0.dot(&d) / dd;
            let b = (y0 + d * s).norm();
            Some(((b - 1.0).abs() * semiaxes.min(), s))
        }
    }
}

/// Result of comparing two nearby trajectories after time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceSample {
    pub initial_distance: f64,
    /// `argmin d(Φ_t'(p), Φ_t'(q))` over `|t' - t| <= tau`.
    pub t_same: f64,
    pub dist_same: f64,
    /// `argmin d(Φ_t'(q), Φ_t(p))` over `|t' - t| <= tau`; absorbs a time
    /// shift between the two orbits.
    pub t_aligned: f64,
    pub dist_aligned: f64,
}

const PROBE_GRID: usize = 400;

/// Minimises the two trajectory distances over a time window around `t`.
pub fn divergence_probe(
    scene: &Scene,
    p: &PhasePoint,
    q: &PhasePoint,
    t: f64,
    tau: f64,
) -> Result<DivergenceSample, BilliardError> {
    let lo = (t - tau).max(0.0);
    let hi = t + tau;
    let rp = trace(scene, p, hi, FLOW_MAX_EVENTS)?;
    let rq = trace(scene, q, hi, FLOW_MAX_EVENTS)?;
    let pt = rp.state_at(t);
    let same = |s: f64| phase_distance(&rp.state_at(s), &rq.state_at(s));
    let aligned = |s: f64| phase_distance(&rq.state_at(s), &pt);
    let (t_same, dist_same) = minimise_window(same, t, lo, hi);
    let (t_aligned, dist_aligned) = minimise_window(aligned, t, lo, hi);
    Ok(DivergenceSample {
        initial_distance: phase_distance(p, q),
        t_same,
        dist_same,
        t_aligned,
        dist_aligned,
    })
}

/// Grid search on `[lo, hi]` (ties go to the point nearest `t`) followed by
/// golden-section refinement inside the neighbouring grid cells.
fn minimise_window<F: Fn(f64) -> f64>(f: F, t: f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut best = (t.clamp(lo, hi), f(t.clamp(lo, hi)));
    let h = (hi - lo) / PROBE_GRID as f64;
    for i in 0..=PROBE_GRID {
        let s = lo + h * i as f64;
        let v = f(s);
        if v < best.1 || (v == best.1 && (s - t).abs() < (best.0 - t).abs()) {
            best = (s, v);
        }
    }
    if h == 0.0 {
        return best;
    }
    let (mut a, mut b) = ((best.0 - h).max(lo), (best.0 + h).min(hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) <= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let s = 0.5 * (a + b);
    let v = f(s);
    if v < best.1 {
        (s, v)
    } else {
        best
    }
}

/// Least-squares fit `log d_out = log C + μ log d_in`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderFit {
    pub exponent: f64,
    pub log_constant: f64,
    pub r_squared: f64,
    pub samples: usize,
}

/// Fits a Hölder exponent to `(d_in, d_out)` pairs with both positive.
pub fn fit_holder(pairs: &[(f64, f64)]) -> Option<HolderFit> {
    let pts: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(a, b)| *a > 0.0 && *b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    let (slope, intercept, r2) = crate::numerics::linear_fit(&pts)?;
    Some(HolderFit {
        exponent: slope,
        log_constant: intercept,
        r_squared: r2,
        samples: pts.len(),
    })
}
