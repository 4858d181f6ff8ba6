//! Stationary broken rays through a prescribed sequence of obstacles.
//!
//! A chain is a list of boundary points `q_i ∈ ∂Θ_{w_i}`. Its length
//! functional is minimised by cyclic coordinate descent (one Newton step per
//! point in tangent coordinates, neighbours frozen) with a stacked Newton
//! fallback. Two closures are supported:
//!
//! * `Ends::Cyclic`: `L = Σ |q_{i+1} - q_i|` with indices mod `m`.
//! * `Ends::Open`: `L = ω·q_0 + Σ |q_{i+1} - q_i| + |x - q_{m-1}|`, the phase
//!   of a plane wave with direction `ω` reflected along the word and read at
//!   `x`.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{Point, Scene, SurfaceFrame};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_SWEEPS: usize = 10_000;
const NEWTON_ITERS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("orbit solver stalled (last residual {residual:e})")]
    Stalled { residual: f64 },
    #[error("empty word")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ends {
    Cyclic,
    Open {
        incoming: Vector3<f64>,
        endpoint: Point,
    },
}

#[derive(Debug, Clone)]
pub struct Chain {
    pub points: Vec<Point>,
    pub sweeps: usize,
    /// Largest tangential gradient norm (reflection-law violation).
    pub residual: f64,
    pub value: f64,
}

enum Prev {
    Point(Point),
    Wave(Vector3<f64>),
}

fn neighbours(points: &[Point], ends: &Ends, i: usize) -> (Prev, Point) {
    let m = points.len();
    match ends {
        Ends::Cyclic => (Prev::Point(points[(i + m - 1) % m]), points[(i + 1) % m]),
        Ends::Open { incoming, endpoint } => {
            let prev = if i == 0 {
                Prev::Wave(*incoming)
            } else {
                Prev::Point(points[i - 1])
            };
            let next = if i + 1 == m { *endpoint } else { points[i + 1] };
            (prev, next)
        }
    }
}

fn local_value(q: &Point, prev: &Prev, next: &Point) -> f64 {
    let a = match prev {
        Prev::Point(p) => (q - p).norm(),
        Prev::Wave(w) => w.dot(q),
    };
    a + (next - q).norm()
}

fn proj(e: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::identity() - e * e.transpose()
}

/// Ambient gradient and flat ambient Hessian of the local objective.
fn local_derivatives(q: &Point, prev: &Prev, next: &Point) -> (Vector3<f64>, Matrix3<f64>) {
    let d_out = next - q;
    let l_out = d_out.norm();
    let e_out = d_out / l_out;
    let mut hess = proj(&e_out) / l_out;
    let e_in = match prev {
        Prev::Point(p) => {
            let d = q - p;
            let l = d.norm();
            let e = d / l;
            hess += proj(&e) / l;
            e
        }
        Prev::Wave(w) => *w,
    };
    (e_in - e_out, hess)
}

fn tangent_matrix(f: &SurfaceFrame) -> nalgebra::Matrix3x2<f64> {
    nalgebra::Matrix3x2::from_columns(&[f.tangents[0], f.tangents[1]])
}

/// Total value of the functional.
pub fn chain_value(points: &[Point], ends: &Ends) -> f64 {
    let m = points.len();
    match ends {
        Ends::Cyclic => (0..m)
            .map(|i| (points[(i + 1) % m] - points[i]).norm())
            .sum(),
        Ends::Open { incoming, endpoint } => {
            let inner: f64 = points.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
            incoming.dot(&points[0]) + inner + (endpoint - points[m - 1]).norm()
        }
    }
}

/// Largest tangential gradient over the chain.
pub fn chain_residual(scene: &Scene, word: &[usize], points: &[Point], ends: &Ends) -> f64 {
    (0..points.len())
        .map(|i| {
            let (prev, next) = neighbours(points, ends, i);
            let (g, _) = local_derivatives(&points[i], &prev, &next);
            let n = scene.obstacle(word[i]).normal_at(&points[i]);
            (g - n * g.dot(&n)).norm()
        })
        .fold(0.0, f64::max)
}

/// Starting guess: on each obstacle, the boundary point facing the mean of
/// its neighbours' positions (centers, the wave source direction, or `x`).
pub fn initial_chain(scene: &Scene, word: &[usize], ends: &Ends) -> Vec<Point> {
    let m = word.len();
    match ends {
        Ends::Cyclic => {
            let centroid = word
                .iter()
                .map(|&k| scene.obstacle(k).center)
                .sum::<Point>()
                / m as f64;
            word.iter()
                .map(|&k| {
                    let obs = scene.obstacle(k);
                    let dir = centroid - obs.center;
                    let dir = if dir.norm() > 0.0 {
                        dir.normalize()
                    } else {
                        Vector3::x()
                    };
                    obs.radial_boundary_point(&dir)
                })
                .collect()
        }
        Ends::Open { incoming, endpoint } => (0..m)
            .map(|i| {
                let obs = scene.obstacle(word[i]);
                let c = obs.center;
                let towards_prev = if i == 0 {
                    -incoming.normalize()
                } else {
                    (scene.obstacle(word[i - 1]).center - c).normalize()
                };
                let next = if i + 1 == m {
                    *endpoint
                } else {
                    scene.obstacle(word[i + 1]).center
                };
                let towards_next = (next - c).normalize();
                let dir = towards_prev + towards_next;
                let dir = if dir.norm() > 1e-12 {
                    dir.normalize()
                } else {
                    towards_next
                };
                obs.radial_boundary_point(&dir)
            })
            .collect(),
    }
}

/// Minimises the chain functional from [`initial_chain`].
pub fn solve_chain(scene: &Scene, word: &[usize], ends: &Ends) -> Result<Chain, ChainError> {
    let init = initial_chain(scene, word, ends);
    solve_chain_from(scene, word, ends, init, DEFAULT_TOL, DEFAULT_MAX_SWEEPS)
}

pub fn solve_chain_from(
    scene: &Scene,
    word: &[usize],
    ends: &Ends,
    mut points: Vec<Point>,
    tol: f64,
    max_sweeps: usize,
) -> Result<Chain, ChainError> {
    let m = word.len();
    if m == 0 {
        return Err(ChainError::Empty);
    }
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut max_move: f64 = 0.0;
        for i in 0..m {
            let obs = scene.obstacle(word[i]);
            let (prev, next) = neighbours(&points, ends, i);
            let q = points[i];
            let frame = obs.surface_frame_unchecked(&q);
            let (g, flat) = local_derivatives(&q, &prev, &next);
            let t = tangent_matrix(&frame);
            let grad = t.transpose() * g;
            let h: Matrix2<f64> = t.transpose() * flat * t - frame.shape * g.dot(&frame.normal);
            let reach = 0.5 * obs.min_extent();
            let mut step = match h.cholesky() {
                Some(ch) => -ch.solve(&grad),
                None => -grad * (0.1 * reach),
            };
            let len = step.norm();
            if len > reach {
                step *= reach / len;
            }
            let f0 = local_value(&q, &prev, &next);
            let mut accepted = q;
            for _ in 0..40 {
                let cand = obs.nearest_boundary_point(&(q + t * step));
                if local_value(&cand, &prev, &next) <= f0 + 1e-15 * f0.abs().max(1.0) {
                    accepted = cand;
                    break;
                }
                step *= 0.5;
            }
            max_move = max_move.max((accepted - q).norm());
            points[i] = accepted;
        }
        let scale = points.iter().map(|p| p.norm()).fold(1.0, f64::max);
        if max_move < tol * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        points = newton_polish(scene, word, ends, points)?;
    }
    Ok(Chain {
        residual: chain_residual(scene, word, &points, ends),
        value: chain_value(&points, ends),
        points,
        sweeps,
    })
}

/// Reduced Hessian of the functional in the tangent coordinates of each
/// point (2m × 2m), with the curvature terms of the constraint.
pub fn chain_hessian(scene: &Scene, word: &[usize], points: &[Point], ends: &Ends) -> DMatrix<f64> {
    chain_gradient_hessian(scene, word, points, ends).1
}

fn chain_gradient_hessian(
    scene: &Scene,
    word: &[usize],
    points: &[Point],
    ends: &Ends,
) -> (DVector<f64>, DMatrix<f64>, Vec<SurfaceFrame>) {
    let m = points.len();
    let frames: Vec<SurfaceFrame> = (0..m)
        .map(|i| scene.obstacle(word[i]).surface_frame_unchecked(&points[i]))
        .collect();
    let ts: Vec<_> = frames.iter().map(tangent_matrix).collect();
    let mut h = DMatrix::<f64>::zeros(2 * m, 2 * m);
    let mut grad = DVector::<f64>::zeros(2 * m);
    let add_block = |h: &mut DMatrix<f64>, i: usize, j: usize, b: Matrix2<f64>| {
        for r in 0..2 {
            for c in 0..2 {
                h[(2 * i + r, 2 * j + c)] += b[(r, c)];
            }
        }
    };
    let segments: Vec<(usize, usize)> = match ends {
        Ends::Cyclic => (0..m).map(|i| (i, (i + 1) % m)).collect(),
        Ends::Open { .. } => (0..m.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
    };
    for &(i, j) in &segments {
        let d = points[j] - points[i];
        let l = d.norm();
        let e = d / l;
        let p = proj(&e) / l;
        add_block(&mut h, i, i, ts[i].transpose() * p * ts[i]);
        add_block(&mut h, j, j, ts[j].transpose() * p * ts[j]);
        let off = -(ts[i].transpose() * p * ts[j]);
        add_block(&mut h, i, j, off);
        add_block(&mut h, j, i, off.transpose());
    }
    if let Ends::Open { endpoint, .. } = ends {
        let d = endpoint - points[m - 1];
        let l = d.norm();
        let p = proj(&(d / l)) / l;
        add_block(&mut h, m - 1, m - 1, ts[m - 1].transpose() * p * ts[m - 1]);
    }
    for i in 0..m {
        let (prev, next) = neighbours(points, ends, i);
        let (g, _) = local_derivatives(&points[i], &prev, &next);
        let gt: Vector2<f64> = ts[i].transpose() * g;
        grad[2 * i] = gt[0];
        grad[2 * i + 1] = gt[1];
        add_block(&mut h, i, i, -frames[i].shape * g.dot(&frames[i].normal));
    }
    (grad, h, frames)
}

fn newton_polish(
    scene: &Scene,
    word: &[usize],
    ends: &Ends,
    mut points: Vec<Point>,
) -> Result<Vec<Point>, ChainError> {
    let m = points.len();
    for _ in 0..NEWTON_ITERS {
        let (grad, h, frames) = chain_gradient_hessian(scene, word, &points, ends);
        let gnorm = grad.amax();
        if gnorm < 1e-13 {
            return Ok(points);
        }
        let Some(step) = h.clone().cholesky().map(|c| -c.solve(&grad)) else {
            return Err(ChainError::Stalled { residual: gnorm });
        };
        let f0 = chain_value(&points, ends);
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand: Vec<Point> = (0..m)
                .map(|i| {
                    let u = Vector2::new(step[2 * i], step[2 * i + 1]) * scale;
                    let t = tangent_matrix(&frames[i]);
                    scene
                        .obstacle(word[i])
                        .nearest_boundary_point(&(points[i] + t * u))
                })
                .collect();
            if chain_value(&cand, ends) <= f0 + 1e-15 * f0.abs().max(1.0) {
                points = cand;
                moved = true;
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let residual = chain_residual(scene, word, &points, ends);
    if residual < 1e-10 {
        Ok(points)
    } else {
        Err(ChainError::Stalled { residual })
    }
}
