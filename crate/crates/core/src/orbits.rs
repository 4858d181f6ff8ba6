//! Periodic broken rays: one per cyclic word, found by minimising length, and
//! the linearised first-return map around each.
//!
//! Transverse coordinates `(δq, δv)` live on the plane through the midpoint
//! of the segment `q_0 → q_1`, orthogonal to it. Frames are carried from leg
//! to leg by the mirror reflections, and the map closes with the rotation
//! between the transported and the initial frame.

use nalgebra::{Complex, Matrix2, Matrix3x2, Matrix4, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::billiard::{first_hit_excluding, reflect, PhasePoint};
use crate::chain::{self, ChainError, Ends};
use crate::geometry::{tangent_basis, Point, Scene, SurfaceFrame};
use crate::symbolic::{enumerate_primitive_cyclic, PrimitiveStory, SymbolicError};

/// Incidence cosines below this make the linearisation unreliable.
pub const MIN_COS_INCIDENCE: f64 = 1e-4;
/// Eigenvalues this close to the unit circle are not hyperbolic.
pub const UNIT_CIRCLE_TOL: f64 = 1e-6;
/// Largest admissible reflection-law violation of a returned orbit.
pub const MAX_RESIDUAL: f64 = 1e-9;
/// Step of the finite-difference Jacobian oracle.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrbitError {
    #[error("orbit solver stalled (last residual {0:e})")]
    Stalled(f64),
    #[error("shadowed itinerary: segment {segment} crosses obstacle {}", obstacle + 1)]
    Shadowed { segment: usize, obstacle: usize },
    #[error("orbit not realizable: non-reflective incidence at point {0}")]
    NotReflective(usize),
    #[error("ill-conditioned linearization (cos θ = {0:e})")]
    IllConditioned(f64),
    #[error("non-hyperbolic orbit")]
    NonHyperbolic,
    #[error("word has letters outside the scene")]
    LetterOutOfRange,
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
}

impl From<ChainError> for OrbitError {
    fn from(e: ChainError) -> Self {
        match e {
            ChainError::Stalled { residual } => OrbitError::Stalled(residual),
            ChainError::Empty => OrbitError::Stalled(f64::NAN),
        }
    }
}

/// 4×4 linearised return map and its inverse, built independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferMatrix {
    pub matrix: Matrix4<f64>,
    pub inverse: Matrix4<f64>,
}

fn symplectic_form() -> Matrix4<f64> {
    let mut j = Matrix4::zeros();
    for i in 0..2 {
        j[(i, i + 2)] = 1.0;
        j[(i + 2, i)] = -1.0;
    }
    j
}

impl TransferMatrix {
    /// `‖MᵀJM − J‖ / max(1, ‖M‖²)`.
    pub fn symplectic_defect(&self) -> f64 {
        let j = symplectic_form();
        let m = &self.matrix;
        (m.transpose() * j * m - j).norm() / m.norm_squared().max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenSplit {
    pub expanding: [Complex<f64>; 2],
    /// `μ, μ'` with `|μ| <= |μ'|`.
    pub contracting: [Complex<f64>; 2],
    pub lambda: f64,
    /// `max |Λ_i μ_i − 1|` over the matched (expanding, contracting) pairs.
    pub pairing_defect: f64,
}

impl EigenSplit {
    /// All four eigenvalues in ascending modulus.
    pub fn spectrum(&self) -> [Complex<f64>; 4] {
        [
            self.contracting[0],
            self.contracting[1],
            self.expanding[1],
            self.expanding[0],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicOrbit {
    pub itinerary: PrimitiveStory,
    pub points: Vec<Point>,
    pub d_gamma: f64,
    pub poincare_spectrum: [Complex<f64>; 4],
    pub mu: [Complex<f64>; 2],
    pub lambda_gamma: f64,
    pub pairing_defect: f64,
    pub residual: f64,
    pub solver_iters: usize,
}

impl PeriodicOrbit {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn segment_lengths(&self) -> Vec<f64> {
        let m = self.points.len();
        (0..m)
            .map(|i| (self.points[(i + 1) % m] - self.points[i]).norm())
            .collect()
    }
}

/// Per-point data of a closed chain: segment `i` runs `q_i → q_{i+1}`.
#[derive(Debug, Clone)]
pub struct OrbitGeometry {
    pub word: Vec<usize>,
    pub points: Vec<Point>,
    pub directions: Vec<Vector3<f64>>,
    pub lengths: Vec<f64>,
    pub surfaces: Vec<SurfaceFrame>,
    /// Cosine of incidence at each `q_i`.
    pub cosines: Vec<f64>,
}

impl OrbitGeometry {
    pub fn new(scene: &Scene, word: &[usize], points: &[Point]) -> Self {
        let m = points.len();
        let mut directions = Vec::with_capacity(m);
        let mut lengths = Vec::with_capacity(m);
        for i in 0..m {
            let d = points[(i + 1) % m] - points[i];
            lengths.push(d.norm());
            directions.push(d / d.norm());
        }
        let surfaces: Vec<SurfaceFrame> = (0..m)
            .map(|i| scene.obstacle(word[i]).surface_frame_unchecked(&points[i]))
            .collect();
        let cosines = (0..m)
            .map(|i| {
                surfaces[i]
                    .normal
                    .dot(&directions[i])
                    .min(-surfaces[i].normal.dot(&directions[(i + m - 1) % m]))
            })
            .collect();
        Self {
            word: word.to_vec(),
            points: points.to_vec(),
            directions,
            lengths,
            surfaces,
            cosines,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn midpoint(&self, i: usize) -> Point {
        self.points[i] + self.directions[i] * (0.5 * self.lengths[i])
    }

    /// Transverse frames on every segment: `frames[0]` is a fixed basis
    /// orthogonal to segment 0 and `frames[k]` its mirror transport through
    /// `q_1, …, q_k`, so `frames[m]` is orthogonal to segment 0 again.
    pub fn transported_frames(&self) -> Vec<Matrix3x2<f64>> {
        let m = self.len();
        let b = tangent_basis(&self.directions[0]);
        let mut frames = vec![Matrix3x2::from_columns(&b)];
        for k in 1..=m {
            let n = self.surfaces[k % m].normal;
            frames.push(mirror_frame(&frames[k - 1], &n));
        }
        frames
    }

    /// Mirror curvature block at `q_k` in the incoming frame `e`.
    pub fn mirror_block(&self, k: usize, e: &Matrix3x2<f64>) -> Matrix2<f64> {
        let m = self.len();
        mirror_curvature(&self.surfaces[k % m], &self.directions[(k + m - 1) % m], e)
    }

    /// Rotation from the transported frame back to the initial one.
    pub fn closing_rotation(frames: &[Matrix3x2<f64>]) -> Matrix2<f64> {
        frames[0].transpose() * frames[frames.len() - 1]
    }
}

/// Velocity kick `δv += C δq` of a reflection, in coordinates of the
/// transverse frame `e` of the incoming unit direction `d`:
/// `C_ab = 2 cos θ · II(P e_a, P e_b)` with `P` the projection along `d` onto
/// the tangent plane.
pub fn mirror_curvature(s: &SurfaceFrame, d: &Vector3<f64>, e: &Matrix3x2<f64>) -> Matrix2<f64> {
    let n = s.normal;
    let dn = d.dot(&n);
    let cos = -dn;
    let tv: Vec<Vector2<f64>> = (0..2)
        .map(|a| {
            let v = e.column(a).into_owned();
            let pv = v - d * (v.dot(&n) / dn);
            Vector2::new(pv.dot(&s.tangents[0]), pv.dot(&s.tangents[1]))
        })
        .collect();
    let mut c = Matrix2::zeros();
    for a in 0..2 {
        for b in 0..2 {
            c[(a, b)] = 2.0 * cos * tv[a].dot(&(s.shape * tv[b]));
        }
    }
    c
}

/// Mirror image of a transverse frame in the plane with normal `n`.
pub fn mirror_frame(e: &Matrix3x2<f64>, n: &Vector3<f64>) -> Matrix3x2<f64> {
    e - n * (n.transpose() * e) * 2.0
}

pub(crate) fn flight(l: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = l;
    f[(1, 3)] = l;
    f
}

pub(crate) fn mirror(c: &Matrix2<f64>) -> Matrix4<f64> {
    let mut r = Matrix4::identity();
    r.fixed_view_mut::<2, 2>(2, 0).copy_from(c);
    r
}

pub(crate) fn block_diag(b: &Matrix2<f64>) -> Matrix4<f64> {
    let mut r = Matrix4::zeros();
    r.fixed_view_mut::<2, 2>(0, 0).copy_from(b);
    r.fixed_view_mut::<2, 2>(2, 2).copy_from(b);
    r
}

/// Analytic leg maps `L_k` (midpoint of segment k−1 to midpoint of segment
/// k) and their exact inverses, `k = 1..=m`.
fn analytic_legs(geo: &OrbitGeometry) -> Vec<(Matrix4<f64>, Matrix4<f64>)> {
    let m = geo.len();
    let frames = geo.transported_frames();
    (1..=m)
        .map(|k| {
            let c = geo.mirror_block(k, &frames[k - 1]);
            let l_in = geo.lengths[k - 1] / 2.0;
            let l_out = geo.lengths[k % m] / 2.0;
            let fwd = flight(l_out) * mirror(&c) * flight(l_in);
            let inv = flight(-l_in) * mirror(&-c) * flight(-l_out);
            (fwd, inv)
        })
        .collect()
}

/// Linearised return map of the closed chain through `points`.
pub fn transfer_matrix(geo: &OrbitGeometry) -> Result<TransferMatrix, OrbitError> {
    if let Some(&c) = geo.cosines.iter().find(|&&c| c < MIN_COS_INCIDENCE) {
        return Err(OrbitError::IllConditioned(c));
    }
    let frames = geo.transported_frames();
    let b = block_diag(&OrbitGeometry::closing_rotation(&frames));
    let mut matrix = Matrix4::<f64>::identity();
    let mut inverse = Matrix4::<f64>::identity();
    for (fwd, inv) in analytic_legs(geo) {
        matrix = fwd * matrix;
        inverse *= inv;
    }
    Ok(TransferMatrix {
        matrix: b * matrix,
        inverse: inverse * b.transpose(),
    })
}

pub fn poincare_jacobian(
    scene: &Scene,
    orbit: &PeriodicOrbit,
) -> Result<TransferMatrix, OrbitError> {
    transfer_matrix(&OrbitGeometry::new(
        scene,
        orbit.itinerary.letters(),
        &orbit.points,
    ))
}

fn sorted_by_modulus(v: impl Iterator<Item = Complex<f64>>) -> Vec<Complex<f64>> {
    let mut out: Vec<Complex<f64>> = v.collect();
    out.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.im.total_cmp(&a.im)));
    out
}

/// Splits the spectrum into its expanding and contracting pairs.
///
/// The expanding pair is read off `M` and the contracting pair off `M⁻¹`, so
/// both ends of the spectrum keep full relative precision however long the
/// orbit.
pub fn eigen_split(tm: &TransferMatrix) -> Result<EigenSplit, OrbitError> {
    let scale_f = tm.matrix.amax();
    let scale_b = tm.inverse.amax();
    if !(scale_f.is_finite() && scale_b.is_finite()) || scale_f == 0.0 || scale_b == 0.0 {
        return Err(OrbitError::NonHyperbolic);
    }
    let fwd = sorted_by_modulus(
        (tm.matrix / scale_f)
            .complex_eigenvalues()
            .iter()
            .map(|z| z * scale_f),
    );
    let bwd = sorted_by_modulus(
        (tm.inverse / scale_b)
            .complex_eigenvalues()
            .iter()
            .map(|z| z * scale_b),
    );
    if fwd[1].norm() <= 1.0 + UNIT_CIRCLE_TOL || bwd[1].norm() <= 1.0 + UNIT_CIRCLE_TOL {
        return Err(OrbitError::NonHyperbolic);
    }
    let expanding = [fwd[0], fwd[1]];
    let contracting = [bwd[1].inv(), bwd[0].inv()];
    let lambda = 1.0 / (bwd[0].norm() * bwd[1].norm()).sqrt();
    let defect = |a: Complex<f64>, b: Complex<f64>| (a / b - 1.0).norm();
    let straight = defect(fwd[0], bwd[0]).max(defect(fwd[1], bwd[1]));
    let crossed = defect(fwd[0], bwd[1]).max(defect(fwd[1], bwd[0]));
    Ok(EigenSplit {
        expanding,
        contracting,
        lambda,
        pairing_defect: straight.min(crossed),
    })
}

/// Checks that no segment crosses a third obstacle.
fn shadow_check(scene: &Scene, word: &[usize], points: &[Point]) -> Result<(), OrbitError> {
    let m = points.len();
    for i in 0..m {
        let (a, b) = (points[i], points[(i + 1) % m]);
        let d = b - a;
        for (k, obs) in scene.obstacles().iter().enumerate() {
            if k == word[i] || k == word[(i + 1) % m] {
                continue;
            }
            if let Some((t1, t2)) = obs.ray_interval(&a, &d) {
                if t2 > 0.0 && t1 < 1.0 {
                    return Err(OrbitError::Shadowed {
                        segment: i,
                        obstacle: k,
                    });
                }
            }
        }
    }
    Ok(())
}

/// The periodic broken ray with itinerary `word`.
pub fn find_periodic_orbit(
    scene: &Scene,
    word: &PrimitiveStory,
) -> Result<PeriodicOrbit, OrbitError> {
    let letters = word.letters();
    if letters.iter().any(|&k| k >= scene.len()) {
        return Err(OrbitError::LetterOutOfRange);
    }
    let sol = chain::solve_chain(scene, letters, &Ends::Cyclic)?;
    if sol.residual > MAX_RESIDUAL {
        return Err(OrbitError::Stalled(sol.residual));
    }
    let geo = OrbitGeometry::new(scene, letters, &sol.points);
    if let Some(i) = geo.cosines.iter().position(|&c| c <= 0.0) {
        return Err(OrbitError::NotReflective(i));
    }
    shadow_check(scene, letters, &sol.points)?;
    let tm = transfer_matrix(&geo)?;
    let split = eigen_split(&tm)?;
    Ok(PeriodicOrbit {
        itinerary: word.clone(),
        d_gamma: sol.value,
        poincare_spectrum: split.spectrum(),
        mu: split.contracting,
        lambda_gamma: split.lambda,
        pairing_defect: split.pairing_defect,
        residual: sol.residual,
        solver_iters: sol.sweeps,
        points: sol.points,
    })
}

/// Reduced length Hessian at the orbit (2m × 2m, tangent coordinates).
pub fn length_hessian(scene: &Scene, orbit: &PeriodicOrbit) -> nalgebra::DMatrix<f64> {
    chain::chain_hessian(
        scene,
        orbit.itinerary.letters(),
        &orbit.points,
        &Ends::Cyclic,
    )
}

/// Orbits for every primitive cyclic word up to a length, in canonical
/// (length, then lexicographic) order, with per-word failures kept aside.
#[derive(Debug, Clone)]
pub struct OrbitTable {
    pub obstacle_count: usize,
    pub max_word_len: usize,
    pub orbits: Vec<PeriodicOrbit>,
    pub failures: Vec<(PrimitiveStory, OrbitError)>,
}

impl OrbitTable {
    /// Number of words attempted.
    pub fn attempted(&self) -> usize {
        self.orbits.len() + self.failures.len()
    }

    pub fn get(&self, word: &PrimitiveStory) -> Option<&PeriodicOrbit> {
        self.orbits.iter().find(|o| &o.itinerary == word)
    }

    /// One representative per reversal class (the lesser canonical word).
    pub fn merged_reversals(&self) -> Vec<&PeriodicOrbit> {
        self.orbits
            .iter()
            .filter(|o| o.itinerary <= o.itinerary.reversed())
            .collect()
    }
}

pub fn enumerate_orbits(scene: &Scene, max_word_len: usize) -> Result<OrbitTable, OrbitError> {
    let words = enumerate_primitive_cyclic(scene.len(), max_word_len)?;
    let results: Vec<Result<PeriodicOrbit, OrbitError>> = words
        .par_iter()
        .map(|w| find_periodic_orbit(scene, w))
        .collect();
    let mut orbits = Vec::new();
    let mut failures = Vec::new();
    for (w, r) in words.into_iter().zip(results) {
        match r {
            Ok(o) => orbits.push(o),
            Err(e) => failures.push((w, e)),
        }
    }
    Ok(OrbitTable {
        obstacle_count: scene.len(),
        max_word_len,
        orbits,
        failures,
    })
}

/// Central-difference Jacobians of the true leg maps, multiplied together
/// and closed with the frame rotation.
pub fn fd_jacobian(
    scene: &Scene,
    orbit: &PeriodicOrbit,
    h: f64,
) -> Result<Matrix4<f64>, OrbitError> {
    let geo = OrbitGeometry::new(scene, orbit.itinerary.letters(), &orbit.points);
    let frames = geo.transported_frames();
    let mut total = Matrix4::identity();
    for k in 1..=geo.len() {
        let leg = |v: &[f64; 4]| leg_map(scene, &geo, &frames, k, v);
        total = central_difference(leg, h)? * total;
    }
    Ok(block_diag(&OrbitGeometry::closing_rotation(&frames)) * total)
}

/// Central differences of the whole nonlinear return map.
pub fn fd_return_map(
    scene: &Scene,
    orbit: &PeriodicOrbit,
    h: f64,
) -> Result<Matrix4<f64>, OrbitError> {
    let geo = OrbitGeometry::new(scene, orbit.itinerary.letters(), &orbit.points);
    let frames = geo.transported_frames();
    let b = OrbitGeometry::closing_rotation(&frames);
    let ret = |v: &[f64; 4]| -> Result<[f64; 4], OrbitError> {
        let mut s = *v;
        for k in 1..=geo.len() {
            s = leg_map(scene, &geo, &frames, k, &s)?;
        }
        let q = b * Vector2::new(s[0], s[1]);
        let p = b * Vector2::new(s[2], s[3]);
        Ok([q[0], q[1], p[0], p[1]])
    };
    central_difference(ret, h)
}

fn central_difference<F>(f: F, h: f64) -> Result<Matrix4<f64>, OrbitError>
where
    F: Fn(&[f64; 4]) -> Result<[f64; 4], OrbitError>,
{
    let mut jac = Matrix4::zeros();
    for c in 0..4 {
        let mut plus = [0.0; 4];
        let mut minus = [0.0; 4];
        plus[c] = h;
        minus[c] = -h;
        let (a, b) = (f(&plus)?, f(&minus)?);
        for r in 0..4 {
            jac[(r, c)] = (a[r] - b[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// The nonlinear map from the section on segment `k−1` to the section on
/// segment `k`, in transverse coordinates of the transported frames.
fn leg_map(
    scene: &Scene,
    geo: &OrbitGeometry,
    frames: &[Matrix3x2<f64>],
    k: usize,
    v: &[f64; 4],
) -> Result<[f64; 4], OrbitError> {
    let m = geo.len();
    let (i_in, i_out) = (k - 1, k % m);
    let e_in = &frames[k - 1];
    let x = geo.midpoint(i_in) + e_in * Vector2::new(v[0], v[1]);
    let xi = (geo.directions[i_in] + e_in * Vector2::new(v[2], v[3])).normalize();
    let start = PhasePoint::new(x, xi);
    let hit = first_hit_excluding(scene, &start, Some(geo.word[i_in]))
        .filter(|h| h.obstacle == geo.word[i_out]);
    let Some(hit) = hit else {
        return Err(OrbitError::IllConditioned(0.0));
    };
    let n = scene.obstacle(hit.obstacle).normal_at(&hit.point);
    let out = reflect(&xi, &n).map_err(|_| OrbitError::IllConditioned(0.0))?;
    let mid = geo.midpoint(i_out);
    let e = geo.directions[i_out];
    let s = (mid - hit.point).dot(&e) / out.dot(&e);
    let y = hit.point + out * s;
    let e_out = &frames[k];
    let dq = e_out.transpose() * (y - mid);
    let dv = e_out.transpose() * out;
    Ok([dq[0], dq[1], dv[0], dv[1]])
}

/// Largest entrywise relative difference, with entries below
/// `floor · max|B|` compared absolutely against that floor.
pub fn max_relative_entry_error(a: &Matrix4<f64>, b: &Matrix4<f64>, floor: f64) -> f64 {
    let scale = b.amax() * floor;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / y.abs().max(scale))
        .fold(0.0, f64::max)
}
