//! Strictly convex obstacles (spheres and ellipsoids), their boundary
//! differential geometry, and scene-level checks: pairwise gaps, the hull
//! diameter, and the no-eclipse condition.
//!
//! Everything here is immutable after construction and safe to share
//! between threads.

use nalgebra::{Matrix2, Matrix3, Vector3};
use thiserror::Error;

pub type Point = Vector3<f64>;

/// Points closer than this to a boundary count as boundary points.
pub const TOL_BOUNDARY: f64 = 1e-9;
/// Scenes whose minimal gap is below this are rejected.
pub const MIN_GAP: f64 = 1e-6;
/// Orientation frames must be orthonormal to this tolerance.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("interior point")]
    InteriorPoint,
    #[error("not a boundary point (offset {offset:.3e})")]
    NotBoundaryPoint { offset: f64 },
    #[error("obstacles intersect: {0} and {1}")]
    ObstaclesIntersect(usize, usize),
    #[error("obstacles {i} and {j} nearly touch (gap {gap:.3e} < {MIN_GAP:e})")]
    NearlyTouching { i: usize, j: usize, gap: f64 },
    #[error("a scene needs at least two obstacles, got {0}")]
    TooFewObstacles(usize),
    #[error("invalid obstacle: {0}")]
    InvalidObstacle(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Rows of `orientation` are the body axes expressed in world coordinates,
    /// so local coordinates are `orientation * (x - center)`.
    Ellipsoid {
        semiaxes: Vector3<f64>,
        orientation: Matrix3<f64>,
    },
}

/// Unit normal, an orthonormal tangent basis and the shape operator in that
/// basis at a boundary point.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceFrame {
    pub point: Point,
    pub normal: Vector3<f64>,
    pub tangents: [Vector3<f64>; 2],
    pub shape: Matrix2<f64>,
}

impl SurfaceFrame {
    /// Principal curvatures in ascending order.
    pub fn principal_curvatures(&self) -> [f64; 2] {
        let s = &self.shape;
        let mean = 0.5 * (s[(0, 0)] + s[(1, 1)]);
        let half_diff = 0.5 * (s[(0, 0)] - s[(1, 1)]);
        let off = 0.5 * (s[(0, 1)] + s[(1, 0)]);
        let r = half_diff.hypot(off);
        [mean - r, mean + r]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexObstacle {
    pub center: Point,
    pub shape: Shape,
}

impl ConvexObstacle {
    pub fn sphere(center: Point, radius: f64) -> Result<Self, GeometryError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GeometryError::InvalidObstacle(format!(
                "radius must be positive, got {radius}"
            )));
        }
        check_finite(&center)?;
        Ok(Self {
            center,
            shape: Shape::Sphere { radius },
        })
    }

    pub fn ellipsoid(
        center: Point,
        semiaxes: Vector3<f64>,
        orientation: Matrix3<f64>,
    ) -> Result<Self, GeometryError> {
        if semiaxes.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(GeometryError::InvalidObstacle(format!(
                "semiaxes must be positive, got {:?}",
                semiaxes.as_slice()
            )));
        }
        check_finite(&center)?;
        let defect = (orientation * orientation.transpose() - Matrix3::identity()).amax();
        if !(defect <= ORTHONORMAL_TOL) {
            return Err(GeometryError::InvalidObstacle(format!(
                "orientation is not orthonormal (defect {defect:.3e})"
            )));
        }
        Ok(Self {
            center,
            shape: Shape::Ellipsoid {
                semiaxes,
                orientation,
            },
        })
    }

    fn frame(&self) -> (Matrix3<f64>, Vector3<f64>) {
        match &self.shape {
            Shape::Sphere { radius } => (Matrix3::identity(), Vector3::repeat(*radius)),
            Shape::Ellipsoid {
                semiaxes,
                orientation,
            } => (*orientation, *semiaxes),
        }
    }

    fn to_local(&self, x: &Point) -> Vector3<f64> {
        let (rot, _) = self.frame();
        rot * (x - self.center)
    }

    fn to_world_dir(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (rot, _) = self.frame();
        rot.transpose() * v
    }

    /// Largest semiaxis (the radius for a sphere).
    pub fn max_extent(&self) -> f64 {
        self.frame().1.max()
    }

    pub fn min_extent(&self) -> f64 {
        self.frame().1.min()
    }

    /// Level-set function: negative inside, zero on the boundary.
    pub fn implicit(&self, x: &Point) -> f64 {
        let (_, a) = self.frame();
        let y = self.to_local(x);
        y.component_div(&a).norm_squared() - 1.0
    }

    fn gradient(&self, x: &Point) -> Vector3<f64> {
        let (_, a) = self.frame();
        let y = self.to_local(x);
        let g = 2.0 * y.component_div(&a.component_mul(&a));
        self.to_world_dir(&g)
    }

    /// Hessian of the level-set function (constant for quadrics).
    fn hessian(&self) -> Matrix3<f64> {
        let (rot, a) = self.frame();
        let d = Matrix3::from_diagonal(&Vector3::new(
            2.0 / (a.x * a.x),
            2.0 / (a.y * a.y),
            2.0 / (a.z * a.z),
        ));
        rot.transpose() * d * rot
    }

    /// Signed distance for spheres; first-order estimate for ellipsoids.
    pub fn signed_offset(&self, x: &Point) -> f64 {
        match &self.shape {
            Shape::Sphere { radius } => (x - self.center).norm() - radius,
            Shape::Ellipsoid { .. } => {
                let g = self.gradient(x).norm();
                if g == 0.0 {
                    -self.min_extent()
                } else {
                    self.implicit(x) / g
                }
            }
        }
    }

    /// True for points strictly inside, beyond the boundary tolerance.
    pub fn contains_strictly(&self, x: &Point) -> bool {
        self.signed_offset(x) < -TOL_BOUNDARY
    }

    /// Support function `h(u) = max_{p in body} p·u`.
    pub fn support(&self, u: &Vector3<f64>) -> f64 {
        match &self.shape {
            Shape::Sphere { radius } => self.center.dot(u) + radius * u.norm(),
            Shape::Ellipsoid { .. } => {
                let (rot, a) = self.frame();
                let v = rot * u;
                self.center.dot(u) + v.component_mul(&a).norm()
            }
        }
    }

    /// Maximiser of `p·u` over the body.
    pub fn support_point(&self, u: &Vector3<f64>) -> Point {
        let (rot, a) = self.frame();
        let v = rot * u;
        let a2v = v.component_mul(&a).component_mul(&a);
        let s = v.component_mul(&a).norm();
        if s == 0.0 {
            return self.center;
        }
        self.center + rot.transpose() * (a2v / s)
    }

    /// Boundary point hit by the ray from the center along `dir`.
    pub fn radial_boundary_point(&self, dir: &Vector3<f64>) -> Point {
        let (rot, a) = self.frame();
        let v = rot * dir;
        let s = v.component_div(&a).norm();
        self.center + dir / s
    }

    /// Nearest boundary point to an exterior (or boundary) point.
    pub fn boundary_project(&self, x: &Point) -> Result<Point, GeometryError> {
        if self.contains_strictly(x) {
            return Err(GeometryError::InteriorPoint);
        }
        Ok(self.nearest_boundary_point(x))
    }

    /// Nearest point of the solid body; interior points map to themselves.
    pub fn project_solid(&self, x: &Point) -> Point {
        if self.implicit(x) <= 0.0 {
            *x
        } else {
            self.nearest_boundary_point(x)
        }
    }

    pub(crate) fn nearest_boundary_point(&self, x: &Point) -> Point {
        match &self.shape {
            Shape::Sphere { radius } => {
                let d = x - self.center;
                let n = d.norm();
                if n == 0.0 {
                    return self.center + Vector3::new(*radius, 0.0, 0.0);
                }
                self.center + d * (radius / n)
            }
            Shape::Ellipsoid { .. } => {
                let (rot, a) = self.frame();
                let p = rot * (x - self.center);
                let a2 = a.component_mul(&a);
                // Root of F(t) = sum (a_i p_i / (a_i^2 + t))^2 - 1; F is convex
                // and decreasing for t > -min a_i^2, so Newton is monotone.
                let f = |t: f64| -> (f64, f64) {
                    let mut val = -1.0;
                    let mut der = 0.0;
                    for i in 0..3 {
                        let q = a[i] * p[i] / (a2[i] + t);
                        val += q * q;
                        der -= 2.0 * q * q / (a2[i] + t);
                    }
                    (val, der)
                };
                let mut t = 0.0;
                for _ in 0..200 {
                    let (val, der) = f(t);
                    if der == 0.0 {
                        break;
                    }
                    let step = val / der;
                    t -= step;
                    if step.abs() <= 1e-16 * (1.0 + t.abs()) {
                        break;
                    }
                }
                let y = Vector3::new(
                    a2.x * p.x / (a2.x + t),
                    a2.y * p.y / (a2.y + t),
                    a2.z * p.z / (a2.z + t),
                );
                self.center + rot.transpose() * y
            }
        }
    }

    /// Outward unit normal at any point (of the level set through it).
    pub fn normal_at(&self, x: &Point) -> Vector3<f64> {
        match &self.shape {
            Shape::Sphere { .. } => (x - self.center).normalize(),
            Shape::Ellipsoid { .. } => self.gradient(x).normalize(),
        }
    }

    /// Second fundamental form `II(u, v)` for tangent vectors at `p`, positive
    /// for a convex body with outward normal.
    pub fn curvature_form(&self, p: &Point, u: &Vector3<f64>, v: &Vector3<f64>) -> f64 {
        match &self.shape {
            Shape::Sphere { radius } => u.dot(v) / radius,
            Shape::Ellipsoid { .. } => (u.dot(&(self.hessian() * v))) / self.gradient(p).norm(),
        }
    }

    pub fn normal_and_shape(&self, p: &Point) -> Result<SurfaceFrame, GeometryError> {
        let offset = self.signed_offset(p);
        if offset.abs() > TOL_BOUNDARY {
            return Err(GeometryError::NotBoundaryPoint { offset });
        }
        Ok(self.surface_frame_unchecked(p))
    }

    pub(crate) fn surface_frame_unchecked(&self, p: &Point) -> SurfaceFrame {
        let normal = self.normal_at(p);
        let tangents = tangent_basis(&normal);
        let mut shape = Matrix2::zeros();
        for i in 0..2 {
            for j in 0..2 {
                shape[(i, j)] = self.curvature_form(p, &tangents[i], &tangents[j]);
            }
        }
        let sym = 0.5 * (shape[(0, 1)] + shape[(1, 0)]);
        shape[(0, 1)] = sym;
        shape[(1, 0)] = sym;
        SurfaceFrame {
            point: *p,
            normal,
            tangents,
            shape,
        }
    }

    /// Parameters `t_enter <= t_exit` where the line `origin + t dir` meets the
    /// solid, or `None` if it misses. Tangent lines give `t_enter == t_exit`.
    pub fn ray_interval(&self, origin: &Point, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let (rot, a) = self.frame();
        let o = (rot * (origin - self.center)).component_div(&a);
        let d = (rot * dir).component_div(&a);
        let qa = d.norm_squared();
        if qa == 0.0 {
            return None;
        }
        let qb = o.dot(&d);
        let qc = o.norm_squared() - 1.0;
        let disc = qb * qb - qa * qc;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        // Stable root pair.
        let q = -(qb + qb.signum() * sq);
        let (t1, t2) = if q == 0.0 {
            (-qb / qa, -qb / qa)
        } else {
            let r1 = q / qa;
            let r2 = qc / q;
            (r1.min(r2), r1.max(r2))
        };
        Some((t1, t2))
    }
}

fn check_finite(v: &Vector3<f64>) -> Result<(), GeometryError> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(GeometryError::InvalidObstacle("non-finite center".into()))
    }
}

/// Deterministic orthonormal basis of the plane orthogonal to `n`.
pub fn tangent_basis(n: &Vector3<f64>) -> [Vector3<f64>; 2] {
    let (ax, ay, az) = (n.x.abs(), n.y.abs(), n.z.abs());
    let seed = if ax <= ay && ax <= az {
        Vector3::x()
    } else if ay <= az {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let t1 = (seed - n * n.dot(&seed)).normalize();
    let t2 = n.cross(&t1);
    [t1, t2]
}

/// Fibonacci lattice of `n` unit vectors.
pub(crate) fn sphere_grid(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Maximise a continuous function over unit vectors: grid scan followed by a
/// shrinking pattern search around the best few grid points.
pub(crate) fn maximize_on_sphere<F>(f: F, grid: usize) -> (Vector3<f64>, f64)
where
    F: Fn(&Vector3<f64>) -> f64,
{
    let mut scored: Vec<(f64, Vector3<f64>)> =
        sphere_grid(grid).into_iter().map(|u| (f(&u), u)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = (scored[0].1, scored[0].0);
    for &(v0, u0) in scored.iter().take(6) {
        let (u, v) = refine_on_sphere(&f, u0, v0);
        if v > best.1 {
            best = (u, v);
        }
    }
    best
}

fn refine_on_sphere<F>(f: &F, mut u: Vector3<f64>, mut val: f64) -> (Vector3<f64>, f64)
where
    F: Fn(&Vector3<f64>) -> f64,
{
    let mut step = 0.1;
    while step > 1e-11 {
        let [t1, t2] = tangent_basis(&u);
        let mut moved = false;
        for dir in [
            t1,
            -t1,
            t2,
            -t2,
            (t1 + t2) / 2f64.sqrt(),
            -(t1 + t2) / 2f64.sqrt(),
        ] {
            let cand = (u + dir * step).normalize();
            let cv = f(&cand);
            if cv > val {
                u = cand;
                val = cv;
                moved = true;
                break;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (u, val)
}

/// Boundary-to-boundary distance between two disjoint bodies and the closest
/// pair, by alternating projections. Returns distance 0 when they overlap.
pub fn body_distance(a: &ConvexObstacle, b: &ConvexObstacle) -> (f64, Point, Point) {
    if let (Shape::Sphere { radius: ra }, Shape::Sphere { radius: rb }) = (&a.shape, &b.shape) {
        let d = b.center - a.center;
        let n = d.norm();
        let gap = n - ra - rb;
        let u = if n > 0.0 { d / n } else { Vector3::x() };
        return (gap.max(0.0), a.center + u * *ra, b.center - u * *rb);
    }
    let mut p = a.project_solid(&b.center);
    let mut q = b.project_solid(&p);
    for _ in 0..200_000 {
        let p_next = a.project_solid(&q);
        let q_next = b.project_solid(&p_next);
        let moved = (p_next - p).norm() + (q_next - q).norm();
        p = p_next;
        q = q_next;
        if moved < 1e-15 * (1.0 + p.norm()) {
            break;
        }
    }
    ((q - p).norm(), p, q)
}

/// Verdict of the no-eclipse check.
#[derive(Debug, Clone, PartialEq)]
pub enum EclipseVerdict {
    /// Every hull `Conv(Θ_i ∪ Θ_j)` misses every third obstacle. `margin` is
    /// the smallest certified separation found; `vacuous` when `N < 3`.
    Pass { vacuous: bool, margin: f64 },
    /// `triple = (i, j, k)` (0-based) with `Θ_k` meeting the hull of `Θ_i ∪ Θ_j`.
    Fail {
        triple: (usize, usize, usize),
        witness: Point,
        margin: f64,
    },
}

impl EclipseVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, EclipseVerdict::Pass { .. })
    }
}

/// Separation of `Conv(a ∪ b)` from `c`: `max_u -(max(h_a(u), h_b(u)) + h_c(-u))`,
/// which is the distance between the two convex sets when positive.
pub fn hull_separation(a: &ConvexObstacle, b: &ConvexObstacle, c: &ConvexObstacle) -> f64 {
    let g = |u: &Vector3<f64>| -(a.support(u).max(b.support(u)) + c.support(&-u));
    maximize_on_sphere(g, 1500).1
}

/// A point of `c` (approximately) inside `Conv(a ∪ b)`, by Frank–Wolfe on
/// the distance between the two sets.
fn hull_witness(a: &ConvexObstacle, b: &ConvexObstacle, c: &ConvexObstacle) -> Point {
    let hull_support = |u: &Vector3<f64>| {
        if a.support(u) >= b.support(u) {
            a.support_point(u)
        } else {
            b.support_point(u)
        }
    };
    let mut x = 0.5 * (a.center + b.center);
    let mut y = c.center;
    for _ in 0..20_000 {
        let z = x - y;
        if z.norm() < 1e-12 {
            break;
        }
        let sx = hull_support(&-z);
        let sy = c.support_point(&z);
        let dir = (sx - sy) - z;
        let denom = dir.norm_squared();
        if denom == 0.0 {
            break;
        }
        let gamma = (-z.dot(&dir) / denom).clamp(0.0, 1.0);
        if gamma == 0.0 {
            break;
        }
        x += gamma * (sx - x);
        y += gamma * (sy - y);
    }
    y
}

/// Checks `Conv(Θ_i ∪ Θ_j) ∩ Θ_k = ∅` for all pairwise distinct `i, j, k`.
pub fn no_eclipse_check(scene: &Scene) -> EclipseVerdict {
    let obs = scene.obstacles();
    let n = obs.len();
    if n < 3 {
        return EclipseVerdict::Pass {
            vacuous: true,
            margin: f64::INFINITY,
        };
    }
    let mut min_margin = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            for k in 0..n {
                if k == i || k == j {
                    continue;
                }
                let margin = hull_separation(&obs[i], &obs[j], &obs[k]);
                if margin <= 0.0 {
                    return EclipseVerdict::Fail {
                        triple: (i, j, k),
                        witness: hull_witness(&obs[i], &obs[j], &obs[k]),
                        margin,
                    };
                }
                min_margin = min_margin.min(margin);
            }
        }
    }
    EclipseVerdict::Pass {
        vacuous: false,
        margin: min_margin,
    }
}

/// `(d_min, hull_diameter)` for a list of obstacles.
pub fn scene_metrics(obstacles: &[ConvexObstacle]) -> Result<(f64, f64), GeometryError> {
    let n = obstacles.len();
    let mut d_min = f64::INFINITY;
    let mut diam: f64 = 0.0;
    for i in 0..n {
        diam = diam.max(pair_diameter(&obstacles[i], &obstacles[i]));
        for j in (i + 1)..n {
            let (gap, _, _) = body_distance(&obstacles[i], &obstacles[j]);
            let overlapping = match (&obstacles[i].shape, &obstacles[j].shape) {
                (Shape::Sphere { radius: ri }, Shape::Sphere { radius: rj }) => {
                    (obstacles[j].center - obstacles[i].center).norm() <= ri + rj
                }
                _ => gap <= 1e-12,
            };
            if overlapping {
                return Err(GeometryError::ObstaclesIntersect(i, j));
            }
            d_min = d_min.min(gap);
            diam = diam.max(pair_diameter(&obstacles[i], &obstacles[j]));
        }
    }
    Ok((d_min, diam))
}

/// `max |p - q|` over `p` in `a`, `q` in `b`.
fn pair_diameter(a: &ConvexObstacle, b: &ConvexObstacle) -> f64 {
    if let (Shape::Sphere { radius: ra }, Shape::Sphere { radius: rb }) = (&a.shape, &b.shape) {
        return (b.center - a.center).norm() + ra + rb;
    }
    maximize_on_sphere(|u| a.support(u) + b.support(&-u), 800).1
}

/// A validated collection of at least two pairwise disjoint obstacles.
#[derive(Debug, Clone)]
pub struct Scene {
    obstacles: Vec<ConvexObstacle>,
    d_min: f64,
    hull_diameter: f64,
}

impl Scene {
    pub fn new(obstacles: Vec<ConvexObstacle>) -> Result<Self, GeometryError> {
        if obstacles.len() < 2 {
            return Err(GeometryError::TooFewObstacles(obstacles.len()));
        }
        let (d_min, hull_diameter) = scene_metrics(&obstacles)?;
        if d_min < MIN_GAP {
            let (mut bi, mut bj) = (0, 1);
            let mut best = f64::INFINITY;
            for i in 0..obstacles.len() {
                for j in (i + 1)..obstacles.len() {
                    let g = body_distance(&obstacles[i], &obstacles[j]).0;
                    if g < best {
                        best = g;
                        bi = i;
                        bj = j;
                    }
                }
            }
            return Err(GeometryError::NearlyTouching {
                i: bi,
                j: bj,
                gap: d_min,
            });
        }
        Ok(Self {
            obstacles,
            d_min,
            hull_diameter,
        })
    }

    /// Unit spheres on the vertices of an equilateral triangle in the z = 0
    /// plane, centred at the origin.
    pub fn equilateral_spheres(side: f64, radius: f64) -> Result<Self, GeometryError> {
        let circ = side / 3f64.sqrt();
        let obstacles = (0..3)
            .map(|k| {
                let ang = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                ConvexObstacle::sphere(
                    Vector3::new(circ * ang.cos(), circ * ang.sin(), 0.0),
                    radius,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(obstacles)
    }

    /// Two spheres of equal radius with centers on the x axis.
    pub fn two_spheres(center_distance: f64, radius: f64) -> Result<Self, GeometryError> {
        Self::new(vec![
            ConvexObstacle::sphere(Vector3::zeros(), radius)?,
            ConvexObstacle::sphere(Vector3::new(center_distance, 0.0, 0.0), radius)?,
        ])
    }

    pub fn obstacles(&self) -> &[ConvexObstacle] {
        &self.obstacles
    }

    pub fn obstacle(&self, i: usize) -> &ConvexObstacle {
        &self.obstacles[i]
    }

    pub fn len(&self) -> usize {
        self.obstacles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obstacles.is_empty()
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn hull_diameter(&self) -> f64 {
        self.hull_diameter
    }

    /// Mean of obstacle centers.
    pub fn centroid(&self) -> Point {
        self.obstacles.iter().map(|o| o.center).sum::<Point>() / self.obstacles.len() as f64
    }

    /// Radius of a ball about the centroid containing every obstacle.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        self.obstacles
            .iter()
            .map(|o| (o.center - c).norm() + o.max_extent())
            .fold(0.0, f64::max)
    }

    /// The same obstacles with centers moved away from the centroid by
    /// `factor`; shapes are unchanged.
    pub fn with_separation_scaled(&self, factor: f64) -> Result<Self, GeometryError> {
        let c = self.centroid();
        let obstacles = self
            .obstacles
            .iter()
            .map(|o| ConvexObstacle {
                center: c + (o.center - c) * factor,
                shape: o.shape.clone(),
            })
            .collect();
        Self::new(obstacles)
    }

    /// Whether `x` is strictly inside some obstacle.
    pub fn inside_any(&self, x: &Point) -> bool {
        self.obstacles.iter().any(|o| o.contains_strictly(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_sphere() -> ConvexObstacle {
        ConvexObstacle::sphere(Vector3::zeros(), 1.0).unwrap()
    }

    fn prolate() -> ConvexObstacle {
        ConvexObstacle::ellipsoid(
            Vector3::zeros(),
            Vector3::new(2.0, 1.0, 1.0),
            Matrix3::identity(),
        )
        .unwrap()
    }

    #[test]
    fn projection_examples() {
        let s = unit_sphere();
        assert_relative_eq!(
            s.boundary_project(&Vector3::new(3.0, 0.0, 0.0)).unwrap(),
            Vector3::x()
        );
        assert_relative_eq!(s.boundary_project(&Vector3::x()).unwrap(), Vector3::x());
        let e = prolate();
        let p = e.boundary_project(&Vector3::new(5.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(p, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        assert_eq!(
            s.boundary_project(&Vector3::new(0.2, 0.0, 0.0)),
            Err(GeometryError::InteriorPoint)
        );
    }

    #[test]
    fn ellipsoid_projection_is_nearest() {
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.7, 1.1);
        let e = ConvexObstacle::ellipsoid(
            Vector3::new(1.0, 2.0, -1.0),
            Vector3::new(1.5, 0.7, 1.1),
            *rot.matrix(),
        )
        .unwrap();
        let x = Vector3::new(3.0, 3.5, 0.2);
        let p = e.boundary_project(&x).unwrap();
        assert!(e.implicit(&p).abs() < 1e-12);
        // x - p is along the normal
        let n = e.normal_at(&p);
        let r = x - p;
        assert!((r - n * r.norm()).norm() < 1e-10);
        // brute force over the surface
        let mut best = f64::INFINITY;
        for u in sphere_grid(20_000) {
            let q = e.radial_boundary_point(&u);
            best = best.min((q - x).norm());
        }
        assert!((x - p).norm() <= best + 1e-9);
    }

    #[test]
    fn sphere_curvatures() {
        let s = unit_sphere();
        let f = s.normal_and_shape(&Vector3::z()).unwrap();
        assert_relative_eq!(f.normal, Vector3::z());
        let k = f.principal_curvatures();
        assert!((k[0] - 1.0).abs() < 1e-12 && (k[1] - 1.0).abs() < 1e-12);
        let s2 = ConvexObstacle::sphere(Vector3::zeros(), 2.0).unwrap();
        let f = s2.normal_and_shape(&Vector3::new(2.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(f.normal, Vector3::x());
        let k = f.principal_curvatures();
        assert!((k[0] - 0.5).abs() < 1e-12 && (k[1] - 0.5).abs() < 1e-12);
    }

    /// Height function of the surface over its tangent plane, differentiated
    /// by central differences on a fine mesh.
    fn fd_principal_curvatures(o: &ConvexObstacle, p: &Point) -> [f64; 2] {
        let n = o.normal_at(p);
        let [t1, t2] = tangent_basis(&n);
        let height = |u: f64, v: f64| -> f64 {
            // the line p + u t1 + v t2 - s n meets the surface at s = height
            let origin = p + t1 * u + t2 * v + n;
            let (t_enter, _) = o.ray_interval(&origin, &-n).unwrap();
            t_enter - 1.0
        };
        let h = 1e-4;
        let h0 = height(0.0, 0.0);
        let huu = (height(h, 0.0) - 2.0 * h0 + height(-h, 0.0)) / (h * h);
        let hvv = (height(0.0, h) - 2.0 * h0 + height(0.0, -h)) / (h * h);
        let huv = (height(h, h) - height(h, -h) - height(-h, h) + height(-h, -h)) / (4.0 * h * h);
        let m = Matrix2::new(huu, huv, huv, hvv);
        let e = m.symmetric_eigenvalues();
        let (a, b) = (e[0].min(e[1]), e[0].max(e[1]));
        [a, b]
    }

    #[test]
    fn ellipsoid_curvatures_match_mesh_oracle() {
        let e = prolate();
        let p = Vector3::new(2.0, 0.0, 0.0);
        let f = e.normal_and_shape(&p).unwrap();
        let k = f.principal_curvatures();
        let fd = fd_principal_curvatures(&e, &p);
        // the oracle gives 2 = a / b^2 at the tip of the long axis
        assert!(
            (fd[0] - 2.0).abs() < 1e-4 && (fd[1] - 2.0).abs() < 1e-4,
            "{fd:?}"
        );
        assert!((k[0] - fd[0]).abs() < 1e-4 && (k[1] - fd[1]).abs() < 1e-4);
        // a generic point on a rotated ellipsoid
        let rot = nalgebra::Rotation3::from_euler_angles(0.2, 0.5, -0.4);
        let e =
            ConvexObstacle::ellipsoid(Vector3::zeros(), Vector3::new(1.3, 0.8, 2.1), *rot.matrix())
                .unwrap();
        let p = e.radial_boundary_point(&Vector3::new(0.3, -0.5, 0.8).normalize());
        let k = e.normal_and_shape(&p).unwrap().principal_curvatures();
        let fd = fd_principal_curvatures(&e, &p);
        assert!(
            (k[0] - fd[0]).abs() < 1e-4 && (k[1] - fd[1]).abs() < 1e-4,
            "{k:?} {fd:?}"
        );
        assert!(k[0] > 0.0);
    }

    #[test]
    fn off_boundary_point_rejected() {
        let s = unit_sphere();
        assert!(matches!(
            s.normal_and_shape(&Vector3::new(1.1, 0.0, 0.0)),
            Err(GeometryError::NotBoundaryPoint { .. })
        ));
    }

    #[test]
    fn no_eclipse_examples() {
        let tri = Scene::equilateral_spheres(6.0, 1.0).unwrap();
        match no_eclipse_check(&tri) {
            EclipseVerdict::Pass { vacuous, margin } => {
                assert!(!vacuous);
                // point-to-segment oracle: 3√3 - 1 - 1
                assert!(
                    (margin - (3.0 * 3f64.sqrt() - 2.0)).abs() < 1e-8,
                    "{margin}"
                );
            }
            v => panic!("{v:?}"),
        }
        let eclipsed = Scene::new(vec![
            ConvexObstacle::sphere(Vector3::zeros(), 1.0).unwrap(),
            ConvexObstacle::sphere(Vector3::new(6.0, 0.0, 0.0), 1.0).unwrap(),
            ConvexObstacle::sphere(Vector3::new(3.0, 0.0, 0.0), 1.0).unwrap(),
        ])
        .unwrap();
        match no_eclipse_check(&eclipsed) {
            EclipseVerdict::Fail {
                triple, witness, ..
            } => {
                assert_eq!(triple, (0, 1, 2));
                assert!((witness - Vector3::new(3.0, 0.0, 0.0)).norm() <= 1.0 + 1e-6);
            }
            v => panic!("{v:?}"),
        }
        let two = Scene::two_spheres(6.0, 1.0).unwrap();
        assert_eq!(
            no_eclipse_check(&two),
            EclipseVerdict::Pass {
                vacuous: true,
                margin: f64::INFINITY
            }
        );
    }

    #[test]
    fn metrics_examples() {
        let two = Scene::two_spheres(6.0, 1.0).unwrap();
        assert_relative_eq!(two.d_min(), 4.0);
        assert_relative_eq!(two.hull_diameter(), 8.0);
        let tri = Scene::equilateral_spheres(6.0, 1.0).unwrap();
        assert_relative_eq!(tri.d_min(), 4.0, epsilon = 1e-12);
        assert_relative_eq!(tri.hull_diameter(), 8.0, epsilon = 1e-12);
        let close = Scene::two_spheres(2.5, 1.0).unwrap();
        assert_relative_eq!(close.d_min(), 0.5);
        assert!(matches!(
            Scene::two_spheres(1.5, 1.0),
            Err(GeometryError::ObstaclesIntersect(0, 1))
        ));
        assert!(matches!(
            Scene::two_spheres(2.0 + 1e-8, 1.0),
            Err(GeometryError::NearlyTouching { .. })
        ));
    }

    #[test]
    fn ellipsoid_distance_and_diameter() {
        let a = prolate();
        let b = ConvexObstacle::ellipsoid(
            Vector3::new(7.0, 0.0, 0.0),
            Vector3::new(2.0, 1.0, 1.0),
            Matrix3::identity(),
        )
        .unwrap();
        let (d, _, _) = body_distance(&a, &b);
        assert!((d - 3.0).abs() < 1e-9, "{d}");
        let (d_min, diam) = scene_metrics(&[a, b]).unwrap();
        assert!((d_min - 3.0).abs() < 1e-9);
        assert!((diam - 11.0).abs() < 1e-8, "{diam}");
    }

    #[test]
    fn rejects_bad_obstacles() {
        assert!(ConvexObstacle::sphere(Vector3::zeros(), 0.0).is_err());
        assert!(ConvexObstacle::ellipsoid(
            Vector3::zeros(),
            Vector3::new(1.0, -1.0, 1.0),
            Matrix3::identity()
        )
        .is_err());
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(ConvexObstacle::ellipsoid(Vector3::zeros(), Vector3::repeat(1.0), skew).is_err());
        assert!(matches!(
            Scene::new(vec![unit_sphere()]),
            Err(GeometryError::TooFewObstacles(1))
        ));
    }

    #[test]
    fn verdict_invariant_under_relabeling() {
        let base = vec![
            ConvexObstacle::sphere(Vector3::zeros(), 1.0).unwrap(),
            ConvexObstacle::sphere(Vector3::new(6.0, 0.0, 0.0), 1.0).unwrap(),
            ConvexObstacle::sphere(Vector3::new(3.0, 1.5, 0.0), 1.0).unwrap(),
            ConvexObstacle::sphere(Vector3::new(3.0, -6.0, 1.0), 0.7).unwrap(),
        ];
        let v0 = no_eclipse_check(&Scene::new(base.clone()).unwrap()).passed();
        assert!(!v0);
        let perm = [2, 0, 3, 1];
        let permuted = perm.iter().map(|&i| base[i].clone()).collect();
        assert_eq!(
            no_eclipse_check(&Scene::new(permuted).unwrap()).passed(),
            v0
        );
    }

    #[test]
    fn hull_separation_symmetric_in_pair() {
        let a = ConvexObstacle::sphere(Vector3::zeros(), 1.0).unwrap();
        let b = ConvexObstacle::sphere(Vector3::new(6.0, 0.0, 0.0), 0.5).unwrap();
        let c = prolate_at(Vector3::new(3.0, 4.0, 0.0));
        let s1 = hull_separation(&a, &b, &c);
        let s2 = hull_separation(&b, &a, &c);
        assert!((s1 - s2).abs() < 1e-10);
    }

    fn prolate_at(c: Point) -> ConvexObstacle {
        ConvexObstacle::ellipsoid(c, Vector3::new(2.0, 1.0, 1.0), Matrix3::identity()).unwrap()
    }
}
