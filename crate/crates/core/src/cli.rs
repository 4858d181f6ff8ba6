//! Batch commands behind the `billiardlab` binary.
//!
//! Each command takes a [`RunConfig`] and returns an [`Outcome`]: a terminal
//! summary, the primary artifact, and sidecar artifacts written next to it.
//! Nothing here touches the process environment, so identical configs give
//! byte-identical artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde_json::json;
use thiserror::Error;

use crate::billiard::{trace, BilliardError, PhasePoint, SpeedBand, TANGENCY_TOL};
use crate::geometry::{no_eclipse_check, EclipseVerdict, Scene};
use crate::ikawa::{
    default_alpha_max, estimate_alpha_star, pressure_partial_sum, IkawaError, Verdict,
};
use crate::io::{self, CsvHeader};
use crate::orbits::{enumerate_orbits, OrbitTable};
use crate::parametrix::{
    convergence_check, decay_profile, midpoint_grid, Multiplicity, ParametrixError,
};
use crate::symbolic::{PrimitiveStory, Story};
use crate::trapped::{default_horizon, event_count_probe, random_phase_points, window_probe};

/// Cells of the default decay time grid.
pub const DECAY_GRID: usize = 400;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<IkawaError> for CliError {
    fn from(e: IkawaError) -> Self {
        CliError::Input(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: PathBuf,
    pub max_len: usize,
    pub alpha: f64,
    pub alpha_max: Option<f64>,
    pub t_max: f64,
    pub band: SpeedBand,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub merge_reversal: bool,
}

impl RunConfig {
    pub fn new(scene: impl Into<PathBuf>) -> Self {
        Self {
            scene: scene.into(),
            max_len: 8,
            alpha: 0.0,
            alpha_max: None,
            t_max: 40.0,
            band: SpeedBand::new(1.0, 1.0).expect("unit band"),
            out: None,
            seed: 0,
            merge_reversal: false,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.max_len == 0 {
            return Err(CliError::Input("--max-len must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CliError::Input(format!(
                "--alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        if let Some(a) = self.alpha_max {
            if !(a > 0.0 && a.is_finite()) {
                return Err(CliError::Input(format!(
                    "--alpha-max must be positive, got {a}"
                )));
            }
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(CliError::Input(format!(
                "--t-max must be positive, got {}",
                self.t_max
            )));
        }
        Ok(())
    }

    fn echo(&self, command: &str, extra: &[(&str, String)]) -> Vec<(String, String)> {
        let mut v = vec![
            ("command".to_string(), command.to_string()),
            ("max_len".to_string(), self.max_len.to_string()),
            ("alpha".to_string(), self.alpha.to_string()),
            (
                "alpha_max".to_string(),
                self.alpha_max
                    .map(|a| a.to_string())
                    .unwrap_or_else(|| "default".into()),
            ),
            ("t_max".to_string(), self.t_max.to_string()),
            (
                "speed_band".to_string(),
                format!("[{}, {}]", self.band.alpha0, self.band.beta0),
            ),
            ("seed".to_string(), self.seed.to_string()),
            (
                "merge_reversal".to_string(),
                self.merge_reversal.to_string(),
            ),
        ];
        v.extend(extra.iter().map(|(k, val)| (k.to_string(), val.clone())));
        v
    }
}

/// Result of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// 0 on success, 1 when the checked condition fails.
    pub status: i32,
    pub summary: String,
    pub primary: String,
    /// `(suffix, content)`, written to `<out><suffix>`.
    pub sidecars: Vec<(String, String)>,
}

impl Outcome {
    /// Writes the primary artifact to `out` and the sidecars next to it, or
    /// returns the primary content for stdout when `out` is `None`.
    pub fn write(&self, out: Option<&Path>) -> std::io::Result<Option<String>> {
        match out {
            None => Ok(Some(self.primary.clone())),
            Some(path) => {
                std::fs::write(path, &self.primary)?;
                for (suffix, content) in &self.sidecars {
                    let mut p = path.as_os_str().to_owned();
                    p.push(suffix);
                    std::fs::write(PathBuf::from(p), content)?;
                }
                Ok(None)
            }
        }
    }
}

struct Loaded {
    scene: Scene,
    hash: String,
}

fn load(cfg: &RunConfig) -> Result<Loaded, CliError> {
    cfg.validate()?;
    let text = std::fs::read_to_string(&cfg.scene)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", cfg.scene.display())))?;
    let scene = io::parse_scene(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", cfg.scene.display())))?;
    Ok(Loaded {
        scene,
        hash: io::scene_hash(&text),
    })
}

fn word(letters: &[usize]) -> String {
    letters
        .iter()
        .map(|i| (i + 1).to_string())
        .collect::<Vec<_>>()
        .join("-")
}

fn eclipse_summary(v: &EclipseVerdict) -> String {
    match v {
        EclipseVerdict::Pass { vacuous: true, .. } => "no-eclipse: pass (vacuous: fewer than 3 obstacles)".into(),
        EclipseVerdict::Pass { margin, .. } => format!("no-eclipse: pass (margin {margin:.6})"),
        EclipseVerdict::Fail { triple, witness, .. } => format!(
            "no-eclipse: FAIL, obstacle {} meets the hull of obstacles {} and {} near ({:.6}, {:.6}, {:.6})",
            triple.2 + 1,
            triple.0 + 1,
            triple.1 + 1,
            witness.x,
            witness.y,
            witness.z
        ),
    }
}

pub fn cmd_scene_check(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let Loaded { scene, hash } = load(cfg)?;
    let verdict = no_eclipse_check(&scene);
    let summary = format!(
        "{}\nobstacles = {}\nd_min = {}\nhull_diameter = {}\n",
        eclipse_summary(&verdict),
        scene.len(),
        scene.d_min(),
        scene.hull_diameter()
    );
    let report = match &verdict {
        EclipseVerdict::Pass { vacuous, margin } => json!({
            "verdict": "pass", "vacuous": vacuous, "margin": margin,
        }),
        EclipseVerdict::Fail {
            triple,
            witness,
            margin,
        } => json!({
            "verdict": "fail",
            "triple": [triple.0 + 1, triple.1 + 1, triple.2 + 1],
            "witness": [witness.x, witness.y, witness.z],
            "margin": margin,
        }),
    };
    let primary = json!({
        "scene_sha256": hash,
        "obstacles": scene.len(),
        "d_min": scene.d_min(),
        "hull_diameter": scene.hull_diameter(),
        "no_eclipse": report,
    });
    Ok(Outcome {
        status: if verdict.passed() { 0 } else { 1 },
        summary,
        primary: format!(
            "{}\n",
            serde_json::to_string_pretty(&primary).expect("json")
        ),
        sidecars: Vec::new(),
    })
}

fn checked_table(scene: &Scene, k: usize) -> Result<Result<OrbitTable, String>, CliError> {
    let verdict = no_eclipse_check(scene);
    if !verdict.passed() {
        return Ok(Err(eclipse_summary(&verdict)));
    }
    enumerate_orbits(scene, k)
        .map(Ok)
        .map_err(|e| CliError::Input(e.to_string()))
}

fn refused(summary: String) -> Outcome {
    Outcome {
        status: 1,
        summary: format!("{summary}\nrefusing to continue on an eclipsing scene\n"),
        primary: String::new(),
        sidecars: Vec::new(),
    }
}

pub fn cmd_orbits(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let Loaded { scene, hash } = load(cfg)?;
    let table = match checked_table(&scene, cfg.max_len)? {
        Ok(t) => t,
        Err(s) => return Ok(refused(s)),
    };
    let header = CsvHeader {
        scene_hash: hash,
        config: cfg.echo("orbits", &[]),
    };
    let rows = if cfg.merge_reversal {
        table.merged_reversals()
    } else {
        table.orbits.iter().collect()
    };
    let primary = io::orbit_csv(&header, rows.iter().copied());
    let mut log = String::new();
    for (w, e) in &table.failures {
        let _ = writeln!(log, "{w}: {e}");
    }
    Ok(Outcome {
        status: 0,
        summary: format!(
            "{} orbits written, {} failures out of {} words up to length {}\n",
            rows.len(),
            table.failures.len(),
            table.attempted(),
            cfg.max_len
        ),
        primary,
        sidecars: vec![(".failures.log".into(), log)],
    })
}

pub fn cmd_ikawa(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let Loaded { scene, hash } = load(cfg)?;
    let table = match checked_table(&scene, cfg.max_len)? {
        Ok(t) => t,
        Err(s) => return Ok(refused(s)),
    };
    let report = pressure_partial_sum(&table, cfg.alpha, cfg.max_len, cfg.merge_reversal)?;
    let alpha_max = cfg
        .alpha_max
        .unwrap_or_else(|| default_alpha_max(scene.d_min()));
    let estimate = estimate_alpha_star(&table, cfg.max_len, alpha_max, cfg.merge_reversal)?;
    let header = CsvHeader {
        scene_hash: hash.clone(),
        config: cfg.echo("ikawa", &[]),
    };
    let mut summary = format!(
        "verdict at alpha = {}: {:?}\ncumulative sum = {:e}\nshell ratios = {:?}\nalpha* estimate: {:?}\n",
        cfg.alpha,
        report.verdict,
        report.cumulative,
        report.ratios(),
        estimate.alpha_star
    );
    summary.push_str(&report.note);
    summary.push('\n');
    let primary = json!({ "scene_sha256": hash, "report": report, "alpha_star": estimate });
    Ok(Outcome {
        status: if report.verdict == Verdict::Diverges {
            1
        } else {
            0
        },
        summary,
        primary: format!(
            "{}\n",
            serde_json::to_string_pretty(&primary).expect("json")
        ),
        sidecars: vec![(".shells.csv".into(), io::shell_csv(&header, &report))],
    })
}

pub fn cmd_decay(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let Loaded { scene, hash } = load(cfg)?;
    let table = match checked_table(&scene, cfg.max_len)? {
        Ok(t) => t,
        Err(s) => return Ok(refused(s)),
    };
    if table.orbits.is_empty() {
        return Err(CliError::Input(
            "no orbits up to --max-len; increase it".into(),
        ));
    }
    let grid = midpoint_grid(0.0, cfg.t_max, DECAY_GRID);
    let profile = decay_profile(&scene, &table, &grid, cfg.band, Multiplicity::Exact, None);
    let header = CsvHeader {
        scene_hash: hash,
        config: cfg.echo(
            "decay",
            &[(
                "t_grid",
                format!("{DECAY_GRID} midpoints of [0, {}]", cfg.t_max),
            )],
        ),
    };
    let mut summary = format!(
        "c1 = {}, c2 = {}, fit on t >= {}\nmu = {} (R^2 = {})\naggregated orbit bound: mu = {} (R^2 = {})\n",
        profile.c1, profile.c2, profile.t0, profile.fit.mu, profile.fit.r_squared, profile.fit_bound.mu,
        profile.fit_bound.r_squared
    );
    if profile.truncated {
        summary.push_str("warning: truncated, the orbit table is shorter than the active word lengths at t_max\n");
    }
    if profile.decay_not_guaranteed {
        summary.push_str("warning: decay not guaranteed, Ikawa verdict is not \"converges\"\n");
    }
    let decays = profile.fit.mu > 0.0;
    let fit = serde_json::to_string_pretty(&json!({
        "c1": profile.c1, "c2": profile.c2, "t0": profile.t0,
        "fit": profile.fit, "fit_periods": profile.fit_periods, "fit_bound": profile.fit_bound,
        "truncated": profile.truncated, "decay_not_guaranteed": profile.decay_not_guaranteed,
    }))
    .expect("json");
    Ok(Outcome {
        status: if decays { 0 } else { 1 },
        summary,
        primary: io::decay_csv(&header, &profile),
        sidecars: vec![(".fit.json".into(), format!("{fit}\n"))],
    })
}

pub fn cmd_convergence(
    cfg: &RunConfig,
    word_text: &str,
    remainder: usize,
    r_max: usize,
) -> Result<Outcome, CliError> {
    let Loaded { scene, hash } = load(cfg)?;
    let story: Story = word_text
        .parse()
        .map_err(|e| CliError::Input(format!("--word: {e}")))?;
    if story.max_letter().is_some_and(|m| m >= scene.len()) {
        return Err(CliError::Input(format!(
            "--word {story} uses obstacles beyond {}",
            scene.len()
        )));
    }
    let word = PrimitiveStory::new(story).map_err(|e| CliError::Input(format!("--word: {e}")))?;
    let report = convergence_check(&scene, &word, remainder, r_max).map_err(|e| match e {
        ParametrixError::InsufficientData(_) | ParametrixError::BadRemainder { .. } => {
            CliError::Input(e.to_string())
        }
        other => CliError::Numeric(other.to_string()),
    })?;
    let header = CsvHeader {
        scene_hash: hash,
        config: cfg.echo(
            "convergence",
            &[
                ("word", word.to_string()),
                ("remainder", remainder.to_string()),
                ("r_max", r_max.to_string()),
            ],
        ),
    };
    let summary = format!(
        "lambda = {:e}, a = {}, alpha_fit = {}, C_fit = {}, R^2 = {}\n",
        report.lambda_front, report.a, report.alpha_fit, report.c_fit, report.r_squared
    );
    let json = serde_json::to_string_pretty(&report).expect("json");
    Ok(Outcome {
        status: 0,
        summary,
        primary: io::convergence_csv(&header, &report),
        sidecars: vec![(".json".into(), format!("{json}\n"))],
    })
}

pub fn cmd_trace(
    cfg: &RunConfig,
    pos: [f64; 3],
    dir: [f64; 3],
    time: f64,
    max_events: usize,
) -> Result<Outcome, CliError> {
    let Loaded { scene, hash } = load(cfg)?;
    if !(time >= 0.0 && time.is_finite()) {
        return Err(CliError::Input(format!(
            "--time must be nonnegative, got {time}"
        )));
    }
    let start = PhasePoint::new(pos.into(), Vector3::from(dir));
    let ray = trace(&scene, &start, time, max_events).map_err(|e| match e {
        BilliardError::Tangency { .. } => {
            CliError::Numeric(format!("{e} (|cos| below {TANGENCY_TOL:e})"))
        }
        other => CliError::Input(other.to_string()),
    })?;
    let header = CsvHeader {
        scene_hash: hash,
        config: cfg.echo(
            "trace",
            &[
                ("pos", format!("{pos:?}")),
                ("dir", format!("{dir:?}")),
                ("time", time.to_string()),
                ("max_events", max_events.to_string()),
            ],
        ),
    };
    let story = ray.story();
    let summary = format!(
        "{} events, story {}, total time {}{}\n",
        ray.events.len(),
        if story.is_empty() {
            "(none)".to_string()
        } else {
            word(story.letters())
        },
        ray.total_time,
        if ray.truncated {
            ", truncated at --max-events"
        } else {
            ""
        }
    );
    Ok(Outcome {
        status: 0,
        summary,
        primary: io::trace_csv(&header, &ray),
        sidecars: Vec::new(),
    })
}

/// Randomised flow probes: near-tangency crossings, event counts away from
/// the orbits, and excursions between close passes to the shortest orbit.
pub fn cmd_probe(cfg: &RunConfig, samples: usize, eta: f64) -> Result<Outcome, CliError> {
    let Loaded { scene, hash } = load(cfg)?;
    let table = match checked_table(&scene, cfg.max_len)? {
        Ok(t) => t,
        Err(s) => return Ok(refused(s)),
    };
    let horizon = default_horizon(&scene, &cfg.band);
    let radius = 1.5 * scene.bounding_radius();
    let rays = random_phase_points(&scene, &cfg.band, radius, samples, cfg.seed);
    let counts: Vec<usize> = {
        use rayon::prelude::*;
        rays.par_iter()
            .map(|p| crate::billiard::tangency_classify(&scene, p, eta, horizon).unwrap_or(0))
            .collect()
    };
    let max_crossings = counts.iter().copied().max().unwrap_or(0);
    let delta = 0.1 * scene.d_min();
    let events = event_count_probe(
        &scene,
        &table.orbits,
        &cfg.band,
        delta,
        radius,
        horizon,
        samples,
        cfg.seed ^ 1,
    );
    let window = table.orbits.first().map(|o| {
        window_probe(
            &scene,
            o,
            &cfg.band,
            0.01 * scene.d_min(),
            samples.min(2000),
            cfg.seed ^ 2,
        )
    });
    let ok = max_crossings <= 2 && window.is_none_or(|w| w.violations == 0);
    let summary = format!(
        "max near-tangent crossings over {samples} rays (eta = {eta}): {max_crossings}\n\
         max events away from orbits (delta = {delta}): {} over {} rays\n{}",
        events.max_events,
        events.accepted,
        window
            .map(|w| format!(
                "window probe: tau = {}, worst excursion {:.3} delta over {} samples\n",
                w.tau, w.max_ratio, w.tested
            ))
            .unwrap_or_default()
    );
    let primary = json!({
        "scene_sha256": hash,
        "tangency": { "samples": samples, "eta": eta, "horizon": horizon, "max_crossings": max_crossings,
                       "histogram": (0..=max_crossings).map(|c| counts.iter().filter(|&&x| x == c).count()).collect::<Vec<_>>() },
        "event_count": { "delta": events.delta, "accepted": events.accepted, "rejected": events.rejected,
                           "max_events": events.max_events, "mean_events": events.mean_events },
        "window": window.map(|w| json!({ "delta": w.delta, "tau": w.tau, "tested": w.tested,
                                         "max_ratio": w.max_ratio, "violations": w.violations })),
    });
    Ok(Outcome {
        status: if ok { 0 } else { 1 },
        summary,
        primary: format!(
            "{}\n",
            serde_json::to_string_pretty(&primary).expect("json")
        ),
        sidecars: Vec::new(),
    })
}
