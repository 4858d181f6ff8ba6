//! Scene files and CSV rendering.
//!
//! A scene file is JSON:
//!
//! ```json
//! {"obstacles": [
//!   {"kind": "sphere", "center": [0, 0, 0], "radius": 1},
//!   {"kind": "ellipsoid", "center": [6, 0, 0], "semiaxes": [2, 1, 1],
//!    "orientation": [[1, 0, 0], [0, 1, 0], [0, 0, 1]]}
//! ]}
//! ```
//!
//! `orientation` is row-major, nested or as nine numbers.

use std::fmt::Write as _;

use nalgebra::{Complex, Matrix3, Vector3};
use serde::Deserialize;
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::billiard::BrokenRay;
use crate::geometry::{ConvexObstacle, GeometryError, Scene};
use crate::ikawa::IkawaReport;
use crate::orbits::PeriodicOrbit;
use crate::parametrix::{ConvergenceReport, DecayProfile};

#[derive(Debug, Error)]
pub enum SceneFileError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scene: {0}")]
    Scene(#[from] GeometryError),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Orientation {
    Nested([[f64; 3]; 3]),
    Flat([f64; 9]),
}

impl Orientation {
    fn matrix(&self) -> Matrix3<f64> {
        match self {
            Orientation::Nested(r) => Matrix3::from_fn(|i, j| r[i][j]),
            Orientation::Flat(v) => Matrix3::from_row_slice(v),
        }
    }
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RawObstacle {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Ellipsoid {
        center: [f64; 3],
        semiaxes: [f64; 3],
        orientation: Orientation,
    },
}

impl RawObstacle {
    fn build(self) -> Result<ConvexObstacle, GeometryError> {
        match self {
            RawObstacle::Sphere { center, radius } => ConvexObstacle::sphere(center.into(), radius),
            RawObstacle::Ellipsoid {
                center,
                semiaxes,
                orientation,
            } => ConvexObstacle::ellipsoid(
                center.into(),
                Vector3::from(semiaxes),
                orientation.matrix(),
            ),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile<'a> {
    #[serde(borrow)]
    obstacles: Vec<&'a RawValue>,
}

/// Line and column of byte `offset` in `text`, both 1-based.
fn position(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Parses and validates a scene file. Errors in an obstacle entry point at
/// the line where the entry starts.
pub fn parse_scene(text: &str) -> Result<Scene, SceneFileError> {
    let syntax = |e: serde_json::Error, base: Option<(usize, usize)>| {
        let (line, column) = base.unwrap_or((e.line(), e.column()));
        SceneFileError::Syntax {
            line,
            column,
            message: strip_position(&e.to_string()),
        }
    };
    let file: SceneFile = serde_json::from_str(text).map_err(|e| syntax(e, None))?;
    let mut obstacles = Vec::with_capacity(file.obstacles.len());
    for (i, raw) in file.obstacles.iter().enumerate() {
        // The raw slice borrows from `text`, so its offset locates the entry.
        let offset = raw.get().as_ptr() as usize - text.as_ptr() as usize;
        let at = position(text, offset);
        let entry: RawObstacle =
            serde_json::from_str(raw.get()).map_err(|e| syntax(e, Some(at)))?;
        let obstacle = entry.build().map_err(|e| SceneFileError::Syntax {
            line: at.0,
            column: at.1,
            message: format!("obstacle {}: {e}", i + 1),
        })?;
        obstacles.push(obstacle);
    }
    Ok(Scene::new(obstacles)?)
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Hex SHA-256 of the scene file bytes.
pub fn scene_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// The `#`-prefixed metadata block at the top of every CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvHeader {
    pub scene_hash: String,
    pub config: Vec<(String, String)>,
}

impl CsvHeader {
    pub fn render(&self) -> String {
        let mut s = format!(
            "# billiardlab {}\n# scene_sha256 {}\n",
            env!("CARGO_PKG_VERSION"),
            self.scene_hash
        );
        for (k, v) in &self.config {
            let _ = writeln!(s, "# {k} = {v}");
        }
        s
    }
}

/// Shortest round-trip exponent form; stable across runs and platforms.
fn num(x: f64) -> String {
    format!("{x:e}")
}

/// A complex number as a plain real when its imaginary part is round-off.
fn complex(z: &Complex<f64>) -> String {
    if z.im.abs() <= 1e-12 * z.norm() {
        num(z.re)
    } else {
        format!(
            "{}{}{}i",
            num(z.re),
            if z.im < 0.0 { "" } else { "+" },
            num(z.im)
        )
    }
}

pub fn orbit_csv<'a>(
    header: &CsvHeader,
    orbits: impl IntoIterator<Item = &'a PeriodicOrbit>,
) -> String {
    let mut s = header.render();
    s.push_str("word,|I|,d_gamma,mu1,mu2,lambda,residual,solver_iters\n");
    for o in orbits {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            o.itinerary,
            o.len(),
            num(o.d_gamma),
            complex(&o.mu[0]),
            complex(&o.mu[1]),
            num(o.lambda_gamma),
            num(o.residual),
            o.solver_iters
        );
    }
    s
}

pub fn shell_csv(header: &CsvHeader, report: &IkawaReport) -> String {
    let mut s = header.render();
    s.push_str("k,S_k,ratio\n");
    for sh in &report.shells {
        let _ = writeln!(
            s,
            "{},{},{}",
            sh.k,
            num(sh.sum),
            sh.ratio.map(num).unwrap_or_default()
        );
    }
    s
}

pub fn decay_csv(header: &CsvHeader, profile: &DecayProfile) -> String {
    let mut s = header.render();
    s.push_str("t,D,active_story_count\n");
    for r in &profile.rows {
        let _ = writeln!(s, "{},{},{}", num(r.t), num(r.d), r.active_story_count);
    }
    s
}

pub fn convergence_csv(header: &CsvHeader, report: &ConvergenceReport) -> String {
    let mut s = header.render();
    s.push_str("r,lambda_phi,residual\n");
    for r in &report.rows {
        let _ = writeln!(s, "{},{},{}", r.r, num(r.lambda_phi), num(r.residual));
    }
    s
}

pub fn trace_csv(header: &CsvHeader, ray: &BrokenRay) -> String {
    let mut s = header.render();
    s.push_str("event_index,time,obstacle,px,py,pz,dx,dy,dz\n");
    for (i, e) in ray.events.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            i + 1,
            num(e.time),
            e.obstacle + 1,
            num(e.point.x),
            num(e.point.y),
            num(e.point.z),
            num(e.outgoing.x),
            num(e.outgoing.y),
            num(e.outgoing.z)
        );
    }
    s
}
