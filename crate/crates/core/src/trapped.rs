//! Phase-space tubes around orbit segments and empirical probes of the
//! trapped set: which points stay in a tube for all times in `[0, T]`, how
//! fast that set shrinks, and how trajectories behave away from and near
//! periodic orbits.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::billiard::{
    divergence_probe, first_hit, trace, trace_with, BilliardError, PhasePoint, SpeedBand,
    TangencyPolicy, FLOW_MAX_EVENTS,
};
use crate::geometry::{tangent_basis, Point, Scene};
use crate::orbits::{OrbitGeometry, PeriodicOrbit};

/// Default probe horizon, `50 · hull_diameter / α₀`.
pub fn default_horizon(scene: &Scene, band: &SpeedBand) -> f64 {
    50.0 * scene.hull_diameter() / band.alpha0
}

fn segment_distance(x: &Point, a: &Point, b: &Point) -> f64 {
    let ab = b - a;
    let s = ((x - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (x - (a + ab * s)).norm()
}

/// `|ξ − |ξ| u|`: velocity distance to the unit direction `u` at equal speed.
fn velocity_offset(xi: &Vector3<f64>, u: &Vector3<f64>) -> f64 {
    (xi - u * xi.norm()).norm()
}

/// Phase points within `delta` of the segment `a → b` travelled at its own
/// speed, for speeds in `band`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseTube {
    pub a: Point,
    pub b: Point,
    pub delta: f64,
    pub band: SpeedBand,
    /// Also admit motion `b → a`; needed for segments bounced back and forth.
    pub bidirectional: bool,
}

impl PhaseTube {
    pub fn axis(&self) -> Vector3<f64> {
        (self.b - self.a).normalize()
    }

    pub fn distance(&self, p: &PhasePoint) -> f64 {
        let u = self.axis();
        let mut v = velocity_offset(&p.xi, &u);
        if self.bidirectional {
            v = v.min(velocity_offset(&p.xi, &-u));
        }
        segment_distance(&p.x, &self.a, &self.b) + v
    }

    pub fn contains(&self, p: &PhasePoint) -> bool {
        self.band.contains(p.speed()) && self.distance(p) < self.delta
    }

    /// Largest time step for membership sampling, `δ / (4β₀)`.
    pub fn time_step(&self) -> f64 {
        self.delta / (4.0 * self.band.beta0)
    }
}

/// Resolution of [`trapped_sample`]: odd counts include the tube's axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TubeGrid {
    pub along: usize,
    /// Per transverse axis, offsets spread over `[-δ/4, δ/4]`.
    pub offsets: usize,
    /// Per transverse axis, direction tilts spread over `[-δ/4, δ/4]`.
    pub tilts: usize,
    pub speeds: usize,
}

impl Default for TubeGrid {
    fn default() -> Self {
        Self {
            along: 5,
            offsets: 3,
            tilts: 3,
            speeds: 1,
        }
    }
}

fn spread(n: usize, half_width: f64) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64)
        .collect()
}

/// Time the trajectory first leaves the tube, sampled every
/// [`PhaseTube::time_step`]; `None` if it stays until `t_max`. Tangential
/// trajectories leave at the tangency.
pub fn exit_time(scene: &Scene, tube: &PhaseTube, p: &PhasePoint, t_max: f64) -> Option<f64> {
    let ray = match trace(scene, p, t_max, FLOW_MAX_EVENTS) {
        Ok(r) => r,
        Err(BilliardError::Tangency { time, .. }) => return Some(time),
        Err(_) => return Some(0.0),
    };
    let dt = tube.time_step();
    let steps = (t_max / dt).ceil() as usize;
    (0..=steps)
        .map(|i| (i as f64 * dt).min(t_max))
        .find(|&t| !tube.contains(&ray.state_at(t)))
}

/// Grid points of the tube whose trajectory stays in it for all sampled
/// `t ∈ [0, T]`.
pub fn trapped_sample(scene: &Scene, tube: &PhaseTube, t: f64, grid: &TubeGrid) -> Vec<PhasePoint> {
    let u = tube.axis();
    let [e1, e2] = tangent_basis(&u);
    let q = tube.delta / 4.0;
    let speeds = if grid.speeds <= 1 {
        vec![tube.band.alpha0]
    } else {
        (0..grid.speeds)
            .map(|i| {
                tube.band.alpha0
                    + (tube.band.beta0 - tube.band.alpha0) * i as f64 / (grid.speeds - 1) as f64
            })
            .collect()
    };
    let dirs: Vec<Vector3<f64>> = if tube.bidirectional {
        vec![u, -u]
    } else {
        vec![u]
    };
    let mut candidates = Vec::new();
    for i in 0..grid.along {
        let s = (i as f64 + 0.5) / grid.along as f64;
        let base = tube.a + (tube.b - tube.a) * s;
        for &o1 in &spread(grid.offsets, q) {
            for &o2 in &spread(grid.offsets, q) {
                let x = base + e1 * o1 + e2 * o2;
                for d in &dirs {
                    for &a1 in &spread(grid.tilts, q) {
                        for &a2 in &spread(grid.tilts, q) {
                            let dir = (d + e1 * a1 + e2 * a2).normalize();
                            for &v in &speeds {
                                candidates.push(PhasePoint::new(x, dir * v));
                            }
                        }
                    }
                }
            }
        }
    }
    candidates
        .into_par_iter()
        .filter(|p| {
            !scene.inside_any(&p.x) && tube.contains(p) && exit_time(scene, tube, p, t).is_none()
        })
        .collect()
}

/// Uniform random points of the tube: positions in the cylinder of radius
/// `δ/2` around the segment, directions in the cone of half-width `δ/2`
/// about the axis (either orientation when bidirectional), speeds uniform in
/// the band. Points inside obstacles or outside the tube are redrawn.
pub fn tube_samples(scene: &Scene, tube: &PhaseTube, n: usize, seed: u64) -> Vec<PhasePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = tube.axis();
    let [e1, e2] = tangent_basis(&u);
    let h = tube.delta / 2.0;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s: f64 = rng.gen();
        let (r1, r2) = disc_point(&mut rng, h);
        let x = tube.a + (tube.b - tube.a) * s + e1 * r1 + e2 * r2;
        let (a1, a2) = disc_point(&mut rng, h);
        let sign = if tube.bidirectional && rng.gen::<bool>() {
            -1.0
        } else {
            1.0
        };
        let speed = tube.band.alpha0 + (tube.band.beta0 - tube.band.alpha0) * rng.gen::<f64>();
        let dir = (u * sign + e1 * a1 + e2 * a2).normalize();
        let p = PhasePoint::new(x, dir * speed);
        if !scene.inside_any(&x) && tube.contains(&p) {
            out.push(p);
        }
    }
    out
}

fn disc_point(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    loop {
        let (a, b): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if a * a + b * b <= 1.0 {
            return (a * radius, b * radius);
        }
    }
}

/// Fraction of [`tube_samples`] still inside the tube at every sampled time up
/// to each `T` in `times`; an estimate of `|T_T(D)| / |D|`.
pub fn trapped_fraction(
    scene: &Scene,
    tube: &PhaseTube,
    times: &[f64],
    n: usize,
    seed: u64,
) -> Vec<f64> {
    let t_max = times.iter().copied().fold(0.0, f64::max);
    let samples = tube_samples(scene, tube, n, seed);
    let exits: Vec<f64> = samples
        .par_iter()
        .map(|p| exit_time(scene, tube, p, t_max).unwrap_or(f64::INFINITY))
        .collect();
    times
        .iter()
        .map(|&t| exits.iter().filter(|&&e| e > t).count() as f64 / n as f64)
        .collect()
}

/// `d(ρ, γ)`: smallest tube distance from `p` to a segment of the orbit,
/// traversed in its own direction.
pub fn orbit_distance(scene: &Scene, orbit: &PeriodicOrbit, p: &PhasePoint) -> f64 {
    let geo = OrbitGeometry::new(scene, orbit.itinerary.letters(), &orbit.points);
    orbit_distance_geo(&geo, p)
}

fn orbit_distance_geo(geo: &OrbitGeometry, p: &PhasePoint) -> f64 {
    let m = geo.len();
    (0..m)
        .map(|i| {
            segment_distance(&p.x, &geo.points[i], &geo.points[(i + 1) % m])
                + velocity_offset(&p.xi, &geo.directions[i])
        })
        .fold(f64::INFINITY, f64::min)
}

/// Uniform random phase points: positions in the ball of radius `radius`
/// about the scene centroid and outside all obstacles, directions uniform on
/// the sphere, speeds uniform in the band.
pub fn random_phase_points(
    scene: &Scene,
    band: &SpeedBand,
    radius: f64,
    n: usize,
    seed: u64,
) -> Vec<PhasePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = scene.centroid();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = c + ball_point(&mut rng) * radius;
        if scene.inside_any(&x) {
            continue;
        }
        let dir = ball_point(&mut rng);
        if dir.norm() < 1e-3 {
            continue;
        }
        let speed = band.alpha0 + (band.beta0 - band.alpha0) * rng.gen::<f64>();
        out.push(PhasePoint::new(x, dir.normalize() * speed));
    }
    out
}

fn ball_point(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v;
        }
    }
}

/// Event counts of trajectories kept at distance `≥ δ` from every orbit of
/// a table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventCountProbe {
    pub delta: f64,
    pub horizon: f64,
    pub accepted: usize,
    /// Samples within `δ` of some orbit.
    pub rejected: usize,
    pub max_events: usize,
    pub mean_events: f64,
}

/// Uniformity of the event count away from the periodic orbits: samples
/// random phase points in the ball of radius `radius`, keeps those at
/// distance `≥ δ` from every orbit in `orbits`, and counts reflections over
/// `[0, horizon]`.
pub fn event_count_probe(
    scene: &Scene,
    orbits: &[PeriodicOrbit],
    band: &SpeedBand,
    delta: f64,
    radius: f64,
    horizon: f64,
    n: usize,
    seed: u64,
) -> EventCountProbe {
    let geos: Vec<OrbitGeometry> = orbits
        .iter()
        .map(|o| OrbitGeometry::new(scene, o.itinerary.letters(), &o.points))
        .collect();
    let samples = random_phase_points(scene, band, radius, n, seed);
    let counts: Vec<Option<usize>> = samples
        .par_iter()
        .map(|p| {
            if geos.iter().any(|g| orbit_distance_geo(g, p) < delta) {
                return None;
            }
            let ray = trace_with(
                scene,
                p,
                horizon,
                FLOW_MAX_EVENTS,
                TangencyPolicy::PassThrough,
            )
            .ok()?;
            Some(ray.events.len())
        })
        .collect();
    let kept: Vec<usize> = counts.iter().flatten().copied().collect();
    EventCountProbe {
        delta,
        horizon,
        accepted: kept.len(),
        rejected: n - kept.len(),
        max_events: kept.iter().copied().max().unwrap_or(0),
        mean_events: kept.iter().sum::<usize>() as f64 / kept.len().max(1) as f64,
    }
}

/// Excursions between two close passes near an orbit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowProbe {
    pub delta: f64,
    pub tau: f64,
    /// Samples with `d(ρ, γ) < δ` and `d(Φ_τ(ρ), γ) < δ`.
    pub tested: usize,
    /// Largest `max_{t ∈ [0, τ]} d(Φ_t(ρ), γ) / δ` among tested samples.
    pub max_ratio: f64,
    /// Tested samples with that ratio ≥ 3.
    pub violations: usize,
}

/// `τ = min(δ / (2β₀), d_min / (4β₀))`.
pub fn window_tau(scene: &Scene, band: &SpeedBand, delta: f64) -> f64 {
    (delta / (2.0 * band.beta0)).min(scene.d_min() / band.beta0 / 4.0)
}

/// Checks that trajectories within `δ` of `orbit` at times 0 and `τ` stay
/// within `3δ` in between.
pub fn window_probe(
    scene: &Scene,
    orbit: &PeriodicOrbit,
    band: &SpeedBand,
    delta: f64,
    n: usize,
    seed: u64,
) -> WindowProbe {
    let geo = OrbitGeometry::new(scene, orbit.itinerary.letters(), &orbit.points);
    let tau = window_tau(scene, band, delta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = geo.len();
    let mut starts = Vec::with_capacity(n);
    while starts.len() < n {
        let i = rng.gen_range(0..m);
        let s: f64 = rng.gen();
        let base = geo.points[i] + (geo.points[(i + 1) % m] - geo.points[i]) * s;
        let x = base + ball_point(&mut rng) * (delta / 2.0);
        let speed = band.alpha0 + (band.beta0 - band.alpha0) * rng.gen::<f64>();
        let xi = (geo.directions[i] + ball_point(&mut rng) * (delta / 2.0)).normalize() * speed;
        let p = PhasePoint::new(x, xi);
        if !scene.inside_any(&x) && orbit_distance_geo(&geo, &p) < delta {
            starts.push(p);
        }
    }
    let ratios: Vec<Option<f64>> = starts
        .par_iter()
        .map(|p| {
            let ray = trace(scene, p, tau, FLOW_MAX_EVENTS).ok()?;
            if orbit_distance_geo(&geo, &ray.final_state()) >= delta {
                return None;
            }
            let steps = 64;
            let worst = (0..=steps)
                .map(|k| orbit_distance_geo(&geo, &ray.state_at(tau * k as f64 / steps as f64)))
                .fold(0.0, f64::max);
            Some(worst / delta)
        })
        .collect();
    let tested: Vec<f64> = ratios.into_iter().flatten().collect();
    WindowProbe {
        delta,
        tau,
        tested: tested.len(),
        max_ratio: tested.iter().copied().fold(0.0, f64::max),
        violations: tested.iter().filter(|&&r| r >= 3.0).count(),
    }
}

/// Pairs `(d(p, q), min_{|t'−t|≤τ} d(Φ_t'(p), Φ_t'(q)))` for `p` aimed to
/// graze a random obstacle and `q` a log-uniform perturbation of it with
/// size in `[1e-6, 1e-2]`. Pairs with a tangency are dropped.
pub fn near_tangent_pairs(scene: &Scene, n: usize, t: f64, tau: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    let back_off = scene.d_min() / 2.0;
    while pairs.len() < n {
        let k = rng.gen_range(0..scene.len());
        let obs = scene.obstacle(k);
        let radial = ball_point(&mut rng);
        if radial.norm() < 1e-3 {
            continue;
        }
        let q0 = obs.radial_boundary_point(&radial.normalize());
        let normal = obs.normal_at(&q0);
        let [t1, t2] = tangent_basis(&normal);
        let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let u = t1 * ang.cos() + t2 * ang.sin();
        // Start a little before the grazing point, nudged off the surface.
        let x = q0 - u * back_off + normal * 1e-9;
        let p = PhasePoint::new(x, u);
        if scene.inside_any(&x)
            || first_hit(scene, &p.reversed()).is_some_and(|h| h.time < back_off)
        {
            continue;
        }
        let size = 10f64.powf(rng.gen_range(-6.0..-2.0));
        let dx = ball_point(&mut rng).normalize() * size;
        let q = PhasePoint::new(x + dx, u);
        if scene.inside_any(&q.x) {
            continue;
        }
        if let Ok(s) = divergence_probe(scene, &p, &q, t, tau) {
            pairs.push((s.initial_distance, s.dist_same));
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orbits::find_periodic_orbit;
    use crate::symbolic::{PrimitiveStory, Story};

    fn unit_band() -> SpeedBand {
        SpeedBand::new(1.0, 1.0).unwrap()
    }

    fn axis_tube(delta: f64) -> PhaseTube {
        PhaseTube {
            a: Point::new(1.0, 0.0, 0.0),
            b: Point::new(5.0, 0.0, 0.0),
            delta,
            band: unit_band(),
            bidirectional: true,
        }
    }

    #[test]
    fn axis_orbit_is_trapped() {
        let s = Scene::two_spheres(6.0, 1.0).unwrap();
        let tube = axis_tube(0.1);
        let trapped = trapped_sample(&s, &tube, 40.0, &TubeGrid::default());
        let on_axis =
            |p: &PhasePoint| p.x.y == 0.0 && p.x.z == 0.0 && p.xi.y == 0.0 && p.xi.z == 0.0;
        assert_eq!(
            trapped.iter().filter(|p| on_axis(p)).count(),
            2 * TubeGrid::default().along
        );
        assert!(trapped.iter().all(|p| tube.contains(p)));
    }

    #[test]
    fn transverse_far_tube_is_empty() {
        let s = Scene::two_spheres(6.0, 1.0).unwrap();
        let tube = PhaseTube {
            a: Point::new(3.0, 20.0, -2.0),
            b: Point::new(3.0, 20.0, 2.0),
            ..axis_tube(0.1)
        };
        assert!(trapped_sample(&s, &tube, 50.0, &TubeGrid::default()).is_empty());
    }

    #[test]
    fn trapped_fraction_shrinks() {
        let s = Scene::equilateral_spheres(6.0, 1.0).unwrap();
        let o = find_periodic_orbit(
            &s,
            &PrimitiveStory::new("1-2".parse::<Story>().unwrap()).unwrap(),
        )
        .unwrap();
        let tube = PhaseTube {
            a: o.points[0],
            b: o.points[1],
            delta: 0.2,
            band: unit_band(),
            bidirectional: true,
        };
        let times = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let f = trapped_fraction(&s, &tube, &times, 4000, 7);
        assert_eq!(f[0], 1.0);
        for w in f.windows(2) {
            assert!(w[1] < w[0], "{f:?}");
        }
        assert_eq!(f, trapped_fraction(&s, &tube, &times, 4000, 7));
    }

    #[test]
    fn event_counts_bounded_away_from_orbits() {
        let s = Scene::equilateral_spheres(6.0, 1.0).unwrap();
        let table = crate::orbits::enumerate_orbits(&s, 6).unwrap();
        let band = unit_band();
        let horizon = default_horizon(&s, &band);
        let probe = event_count_probe(
            &s,
            &table.orbits,
            &band,
            0.5,
            1.5 * s.bounding_radius(),
            horizon,
            2000,
            3,
        );
        assert!(probe.accepted > 1000);
        // Escaping within a few gap crossings of the last near approach.
        assert!(probe.max_events <= 12, "{probe:?}");
    }

    #[test]
    fn window_probe_stays_within_three_delta() {
        let s = Scene::equilateral_spheres(6.0, 1.0).unwrap();
        let o = find_periodic_orbit(
            &s,
            &PrimitiveStory::new("1-2-3".parse::<Story>().unwrap()).unwrap(),
        )
        .unwrap();
        let band = SpeedBand::new(0.5, 2.0).unwrap();
        let w = window_probe(&s, &o, &band, 0.05, 500, 11);
        assert!(w.tested > 100);
        assert_eq!(w.violations, 0, "{w:?}");
        assert!((w.tau - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn near_tangent_holder_exponent() {
        let s = Scene::equilateral_spheres(6.0, 1.0).unwrap();
        let pairs = near_tangent_pairs(&s, 200, 10.0, 0.5, 5);
        let fit = crate::billiard::fit_holder(&pairs).unwrap();
        assert!(fit.exponent > 0.0 && fit.exponent <= 1.0, "{fit:?}");
    }
}
