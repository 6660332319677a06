//! Synthetic scenario library and the deterministic sweep harness.
//!
//! Three built-in scenarios mirror the task archetypes the platform is
//! meant for at desk scale: stacking objects whose keypoints move
//! non-rigidly, manipulating an object behind a narrow opening, and grasping
//! a hollow object by twisting inside it. Every number in them is a harness
//! parameter chosen for a tabletop workspace, not a measured quantity.
//!
//! [`evaluate_scenario`] runs the full pipeline — project-and-shift, fit,
//! transport, rollout — and produces a [`ScenarioReport`]; [`run_report`]
//! sweeps all scenario/variant pairs (in parallel with the `parallel`
//! feature) and [`report_csv`] renders one deterministic CSV row per pair.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demonstration::{
    synthesize_demonstration, waypoint_sample_indices, DemoError, DemoScript, Demonstration,
    ServoStep, Waypoint,
};
use crate::geometry::{Pose, Rotation};
use crate::parallel;
use crate::policy::{PolicyConfig, GAMMA_DEFAULT, SERVO_STEP_DEFAULT, WINDOW_DEFAULT};
use crate::projection::{project_and_shift, ProjectionError};
use crate::simulation::{
    run_rollout, FollowerConfig, SimError, ALPHA_DEFAULT, MAX_STEPS_DEFAULT, TOL_TRACK_DEFAULT,
};
use crate::transport::{
    save_keypoints, DeformationMap, KeypointLabel, KeypointSet, TransportError, LAMBDA_DEFAULT,
};

/// Default offset of the rollout start pose from the first demonstration
/// label, meters. The offset direction is derived from the sweep seed.
pub const START_OFFSET_DEFAULT: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("UnknownScenario: '{name}' (available: {})", available.join(", "))]
    UnknownScenario { name: String, available: Vec<String> },
    #[error("UnknownVariant: scenario '{scenario}' has {count} variants, index {index} requested")]
    UnknownVariant {
        scenario: String,
        index: usize,
        count: usize,
    },
    #[error("scenario '{scenario}': {source}")]
    Demo {
        scenario: String,
        #[source]
        source: DemoError,
    },
    #[error("scenario '{scenario}' variant '{variant}': {source}")]
    Projection {
        scenario: String,
        variant: String,
        #[source]
        source: ProjectionError,
    },
    #[error("scenario '{scenario}' variant '{variant}': {source}")]
    Transport {
        scenario: String,
        variant: String,
        #[source]
        source: TransportError,
    },
    #[error("invalid scenario definition: {0}")]
    Invalid(String),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("ParseError: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioTolerances {
    /// Keypoint-approach tolerance for grasp checks, meters.
    pub keypoint: f64,
    /// Rollout tracking tolerance, meters.
    pub track: f64,
}

impl Default for ScenarioTolerances {
    fn default() -> Self {
        ScenarioTolerances {
            keypoint: 1e-3,
            track: TOL_TRACK_DEFAULT,
        }
    }
}

/// One target-keypoint configuration of a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioVariant {
    pub name: String,
    pub target: KeypointSet,
}

/// A scripted demonstration plus keypoints and execution-time variants.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub script: DemoScript,
    pub source: KeypointSet,
    pub variants: Vec<ScenarioVariant>,
    pub tolerances: ScenarioTolerances,
}

impl Scenario {
    pub fn new(
        name: impl Into<String>,
        script: DemoScript,
        source: KeypointSet,
        variants: Vec<ScenarioVariant>,
        tolerances: ScenarioTolerances,
    ) -> Result<Self, ScenarioError> {
        let name = name.into();
        if variants.is_empty() {
            return Err(ScenarioError::Invalid(format!(
                "scenario '{name}' has no variants"
            )));
        }
        for v in &variants {
            if v.target.len() != source.len() {
                return Err(ScenarioError::Invalid(format!(
                    "scenario '{name}' variant '{}' has {} keypoints, source has {}",
                    v.name,
                    v.target.len(),
                    source.len()
                )));
            }
        }
        Ok(Scenario {
            name,
            script,
            source,
            variants,
            tolerances,
        })
    }

    /// Synthesizes the scripted demonstration.
    pub fn demonstration(&self) -> Result<Demonstration, ScenarioError> {
        synthesize_demonstration(&self.script).map_err(|source| ScenarioError::Demo {
            scenario: self.name.clone(),
            source,
        })
    }
}

// ---------------------------------------------------------------------------
// Built-in scenarios
// ---------------------------------------------------------------------------

fn tilted(position: [f64; 3], pitch: f64) -> Waypoint {
    Waypoint::new(
        Vector3::from(position),
        Rotation::from_axis_angle(&Vector3::y(), pitch),
    )
}

fn script_with_servo(
    waypoints: Vec<Waypoint>,
    samples: usize,
    servo_at_knots: &[(usize, [f64; 2])],
) -> (DemoScript, Vec<usize>) {
    let mut script = DemoScript {
        waypoints,
        samples,
        sample_period: 0.02,
        servo_schedule: vec![],
    };
    let knots = waypoint_sample_indices(&script).expect("builtin script is valid");
    script.servo_schedule = servo_at_knots
        .iter()
        .map(|(knot, servo)| ServoStep {
            from_sample: knots[*knot],
            servo: Vector2::from(*servo),
        })
        .collect();
    (script, knots)
}

/// Stacking: three cups; the demonstration grasps the medium and large cups
/// (keypoints 1 and 2) and stacks them near the small cup (keypoint 0). The
/// moved variant displaces the two grasped cups non-rigidly.
fn stacking() -> Scenario {
    let c1 = [0.45, -0.12, 0.02];
    let c2 = [0.55, 0.10, 0.02];
    let c3 = [0.40, 0.08, 0.02];
    let grasp = 0.25;
    let waypoints = vec![
        tilted([0.35, 0.00, 0.20], 0.0),
        tilted([0.51, 0.05, 0.09], grasp),
        tilted(c2, grasp), // pick the medium cup
        tilted([0.59, 0.04, 0.09], grasp),
        tilted([0.50, -0.06, 0.11], 0.1),
        tilted([0.45, -0.12, 0.05], 0.1), // stack it on the small cup
        tilted([0.42, -0.07, 0.12], 0.0),
        tilted([0.415, 0.025, 0.09], grasp),
        tilted(c3, grasp), // pick the large cup
        tilted([0.43, 0.13, 0.10], grasp),
        tilted([0.48, -0.04, 0.13], 0.1),
        tilted([0.45, -0.12, 0.08], 0.1), // stack it on top
        tilted([0.38, -0.06, 0.18], 0.0),
    ];
    let (script, _) = script_with_servo(
        waypoints,
        521,
        &[
            (2, [0.6, 0.0]),
            (5, [0.0, 0.0]),
            (8, [0.6, 0.0]),
            (11, [0.0, 0.0]),
        ],
    );
    let source = KeypointSet::source(vec![c1.into(), c2.into(), c3.into()]).unwrap();
    let moved = KeypointSet::target(vec![
        c1.into(),
        Vector3::from(c2) + Vector3::new(0.05, 0.04, 0.0),
        Vector3::from(c3) + Vector3::new(-0.04, 0.06, 0.0),
    ])
    .unwrap();
    let identity = KeypointSet::target(vec![c1.into(), c2.into(), c3.into()]).unwrap();
    Scenario::new(
        "stacking",
        script,
        source,
        vec![
            ScenarioVariant {
                name: "moved".into(),
                target: moved,
            },
            ScenarioVariant {
                name: "identity".into(),
                target: identity,
            },
        ],
        ScenarioTolerances::default(),
    )
    .unwrap()
}

/// Narrow opening: two obstacle keypoints frame a gap the arm slips through
/// to reach an object behind them. The moved variant displaces the object
/// only; the obstacles stay put and anchor the deformation near the gap.
fn narrow_opening() -> Scenario {
    let wall_l = [0.50, -0.045, 0.10];
    let wall_r = [0.50, 0.045, 0.12];
    let obj = [0.63, 0.00, 0.03];
    let waypoints = vec![
        tilted([0.33, 0.00, 0.16], 0.0),
        tilted([0.43, 0.00, 0.105], 0.1),
        tilted([0.50, 0.00, 0.105], 0.2), // through the gap
        tilted([0.57, -0.015, 0.055], 0.3),
        tilted(obj, 0.3), // grasp behind the opening
        tilted([0.60, 0.035, 0.08], 0.2),
        tilted([0.50, 0.005, 0.115], 0.1), // back out through the gap
        tilted([0.42, 0.00, 0.13], 0.0),
        tilted([0.34, 0.00, 0.17], 0.0),
    ];
    let (script, _) = script_with_servo(waypoints, 401, &[(4, [0.8, 0.0])]);
    let source =
        KeypointSet::source(vec![wall_l.into(), wall_r.into(), obj.into()]).unwrap();
    let moved = KeypointSet::target(vec![
        wall_l.into(),
        wall_r.into(),
        Vector3::from(obj) + Vector3::new(0.03, 0.03, 0.0),
    ])
    .unwrap();
    let identity =
        KeypointSet::target(vec![wall_l.into(), wall_r.into(), obj.into()]).unwrap();
    Scenario::new(
        "narrow-opening",
        script,
        source,
        vec![
            ScenarioVariant {
                name: "moved".into(),
                target: moved,
            },
            ScenarioVariant {
                name: "identity".into(),
                target: identity,
            },
        ],
        ScenarioTolerances::default(),
    )
    .unwrap()
}

/// Hollow grasp: the arm enters a hollow object and twists to tighten
/// against it; a single keypoint marks the object. The twist cable ramps up
/// while the arm keeps moving inside the object.
fn hollow_grasp() -> Scenario {
    let obj = [0.55, 0.05, 0.05];
    let waypoints = vec![
        tilted([0.36, 0.00, 0.18], 0.0),
        tilted([0.52, 0.02, 0.15], 0.1),
        tilted(obj, 0.2), // enter the hollow object
        tilted([0.565, 0.065, 0.035], 0.2),
        tilted([0.585, 0.085, 0.16], 0.1),
        tilted([0.48, 0.03, 0.20], 0.0),
    ];
    let (script, _) = script_with_servo(
        waypoints,
        301,
        &[(2, [0.3, 1.5]), (3, [0.3, 3.0]), (4, [0.3, 3.0])],
    );
    let source = KeypointSet::source(vec![obj.into()]).unwrap();
    let moved =
        KeypointSet::target(vec![Vector3::from(obj) + Vector3::new(0.04, -0.03, 0.01)]).unwrap();
    let identity = KeypointSet::target(vec![obj.into()]).unwrap();
    Scenario::new(
        "hollow-grasp",
        script,
        source,
        vec![
            ScenarioVariant {
                name: "moved".into(),
                target: moved,
            },
            ScenarioVariant {
                name: "identity".into(),
                target: identity,
            },
        ],
        ScenarioTolerances::default(),
    )
    .unwrap()
}

/// All built-in scenarios, each with a "moved" and an "identity" variant.
pub fn builtin_scenarios() -> Vec<Scenario> {
    vec![stacking(), narrow_opening(), hollow_grasp()]
}

/// Looks up a builtin by name.
pub fn builtin_scenario(name: &str) -> Result<Scenario, ScenarioError> {
    let all = builtin_scenarios();
    let available: Vec<String> = all.iter().map(|s| s.name.clone()).collect();
    all.into_iter()
        .find(|s| s.name == name)
        .ok_or(ScenarioError::UnknownScenario {
            name: name.to_string(),
            available,
        })
}

// ---------------------------------------------------------------------------
// Scenario files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    demonstration: ScriptFile,
    source_keypoints: Vec<[f64; 3]>,
    variants: Vec<VariantFile>,
    #[serde(default)]
    tolerances: Option<TolerancesFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    waypoints: Vec<WaypointFile>,
    samples: usize,
    sample_period: f64,
    #[serde(default)]
    servo_schedule: Vec<ServoStepFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WaypointFile {
    position: [f64; 3],
    #[serde(default = "identity_quat")]
    orientation: [f64; 4],
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServoStepFile {
    from_sample: usize,
    servo: [f64; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariantFile {
    name: String,
    target_keypoints: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TolerancesFile {
    keypoint: f64,
    track: f64,
}

/// Loads a scenario definition from JSON.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let raw: ScenarioFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let waypoints = raw
        .demonstration
        .waypoints
        .iter()
        .map(|w| {
            let q = nalgebra::Quaternion::new(
                w.orientation[0],
                w.orientation[1],
                w.orientation[2],
                w.orientation[3],
            );
            let norm = q.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > crate::demonstration::QUAT_NORM_TOL {
                return Err(ScenarioError::Invalid(format!(
                    "waypoint quaternion norm {norm} deviates from 1"
                )));
            }
            Ok(Waypoint::new(
                Vector3::from(w.position),
                Rotation::from_unit_quaternion(&nalgebra::UnitQuaternion::from_quaternion(q)),
            ))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let script = DemoScript {
        waypoints,
        samples: raw.demonstration.samples,
        sample_period: raw.demonstration.sample_period,
        servo_schedule: raw
            .demonstration
            .servo_schedule
            .iter()
            .map(|s| ServoStep {
                from_sample: s.from_sample,
                servo: Vector2::from(s.servo),
            })
            .collect(),
    };
    let source = KeypointSet::new(
        raw.source_keypoints.iter().map(|p| Vector3::from(*p)).collect(),
        KeypointLabel::Source,
    )
    .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let variants = raw
        .variants
        .iter()
        .map(|v| {
            Ok(ScenarioVariant {
                name: v.name.clone(),
                target: KeypointSet::new(
                    v.target_keypoints.iter().map(|p| Vector3::from(*p)).collect(),
                    KeypointLabel::Target,
                )
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?,
            })
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    let tolerances = raw
        .tolerances
        .map(|t| ScenarioTolerances {
            keypoint: t.keypoint,
            track: t.track,
        })
        .unwrap_or_default();
    Scenario::new(raw.name, script, source, variants, tolerances)
}

/// Writes a scenario definition as JSON.
pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let raw = ScenarioFile {
        name: scenario.name.clone(),
        demonstration: ScriptFile {
            waypoints: scenario
                .script
                .waypoints
                .iter()
                .map(|w| {
                    let q = w.orientation.to_unit_quaternion();
                    WaypointFile {
                        position: [w.position.x, w.position.y, w.position.z],
                        orientation: [q.w, q.i, q.j, q.k],
                    }
                })
                .collect(),
            samples: scenario.script.samples,
            sample_period: scenario.script.sample_period,
            servo_schedule: scenario
                .script
                .servo_schedule
                .iter()
                .map(|s| ServoStepFile {
                    from_sample: s.from_sample,
                    servo: [s.servo.x, s.servo.y],
                })
                .collect(),
        },
        source_keypoints: scenario
            .source
            .points()
            .iter()
            .map(|p| [p.x, p.y, p.z])
            .collect(),
        variants: scenario
            .variants
            .iter()
            .map(|v| VariantFile {
                name: v.name.clone(),
                target_keypoints: v.target.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
            })
            .collect(),
        tolerances: Some(TolerancesFile {
            keypoint: scenario.tolerances.keypoint,
            track: scenario.tolerances.track,
        }),
    };
    serde_json::to_writer(BufWriter::new(File::create(path)?), &raw)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Sweep and pipeline parameters. Unknown keys in a config file are
/// rejected; every numeric parameter is range-checked by [`RunConfig::validate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Kernel ridge λ ≥ 0.
    pub lambda: f64,
    /// Policy time-term weight γ ≥ 0.
    pub gamma: f64,
    /// Policy forward window W ≥ 1.
    pub window: usize,
    /// Follower gain α ∈ (0, 1].
    pub alpha: f64,
    /// Servo increment per step, radians > 0.
    pub servo_step: f64,
    /// Rollout step budget ≥ 1.
    pub max_steps: usize,
    /// Rollout tracking tolerance, meters > 0.
    pub tol_track: f64,
    /// Rollout start-pose offset from the first label, meters ≥ 0.
    pub start_offset: f64,
    /// Seed for the start-offset direction.
    pub seed: u64,
    /// Scenario files to sweep; `None` selects the builtins.
    pub scenarios: Option<Vec<PathBuf>>,
    /// Optional CSV output path.
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lambda: LAMBDA_DEFAULT,
            gamma: GAMMA_DEFAULT,
            window: WINDOW_DEFAULT,
            alpha: ALPHA_DEFAULT,
            servo_step: SERVO_STEP_DEFAULT,
            max_steps: MAX_STEPS_DEFAULT,
            tol_track: TOL_TRACK_DEFAULT,
            start_offset: START_OFFSET_DEFAULT,
            seed: 0,
            scenarios: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::InvalidConfig(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if self.window < 1 {
            return fail("window must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if !(self.servo_step > 0.0 && self.servo_step.is_finite()) {
            return fail(format!("servo_step must be > 0, got {}", self.servo_step));
        }
        if self.max_steps < 1 {
            return fail("max_steps must be >= 1".into());
        }
        if !(self.tol_track > 0.0 && self.tol_track.is_finite()) {
            return fail(format!("tol_track must be > 0, got {}", self.tol_track));
        }
        if !(self.start_offset >= 0.0 && self.start_offset.is_finite()) {
            return fail(format!(
                "start_offset must be finite and >= 0, got {}",
                self.start_offset
            ));
        }
        Ok(())
    }

    /// Parses and validates a JSON config.
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            gamma: self.gamma,
            window: self.window,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic unit vector derived from the sweep seed; direction of the
/// rollout start offset.
pub fn offset_direction(seed: u64) -> Vector3<f64> {
    let mut state = seed;
    let unit = |bits: u64| (bits >> 11) as f64 / (1u64 << 53) as f64;
    let z = unit(splitmix64(&mut state)) * 2.0 - 1.0;
    let phi = unit(splitmix64(&mut state)) * std::f64::consts::TAU;
    let r = (1.0 - z * z).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Everything the sweep needs to know about one scenario/variant evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub scenario: String,
    pub variant: String,
    pub keypoints: usize,
    pub samples: usize,
    /// Two or more sources projected onto the same trajectory sample.
    pub duplicate_projection: bool,
    pub shifts: Vec<Vector3<f64>>,
    pub projected_indices: Vec<usize>,
    /// ‖φ(s̃ᵢ) − t̃ᵢ‖ per keypoint.
    pub fit_residuals: Vec<f64>,
    /// Closest approach of the transported trajectory to each raw target.
    pub min_dist_transported: Vec<f64>,
    /// Closest approach of the original demonstration to each raw target.
    pub min_dist_original: Vec<f64>,
    pub rollout_converged: bool,
    pub rollout_steps: usize,
    pub final_error: f64,
}

fn min_distances(positions: &[Vector3<f64>], targets: &KeypointSet) -> Vec<f64> {
    targets
        .points()
        .iter()
        .map(|t| {
            positions
                .iter()
                .map(|x| (x - t).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Runs the full pipeline on one scenario variant. Deterministic for a fixed
/// config; a rollout that blows its step budget is reported as
/// `rollout_converged = false` rather than as an error.
pub fn evaluate_scenario(
    scenario: &Scenario,
    variant_index: usize,
    config: &RunConfig,
) -> Result<ScenarioReport, ScenarioError> {
    config.validate()?;
    let variant = scenario
        .variants
        .get(variant_index)
        .ok_or(ScenarioError::UnknownVariant {
            scenario: scenario.name.clone(),
            index: variant_index,
            count: scenario.variants.len(),
        })?;
    let demo = scenario.demonstration()?;

    let projection = project_and_shift(&demo, &scenario.source, &variant.target).map_err(
        |source| ScenarioError::Projection {
            scenario: scenario.name.clone(),
            variant: variant.name.clone(),
            source,
        },
    )?;
    let duplicate_projection = projection.projected_source.has_duplicates();

    let map = DeformationMap::fit(
        &projection.projected_source,
        &projection.shifted_target,
        config.lambda,
    )
    .map_err(|source| ScenarioError::Transport {
        scenario: scenario.name.clone(),
        variant: variant.name.clone(),
        source,
    })?;
    let transported = map
        .transport_demonstration(&demo)
        .map_err(|source| ScenarioError::Transport {
            scenario: scenario.name.clone(),
            variant: variant.name.clone(),
            source,
        })?;

    let fit_residuals: Vec<f64> = projection
        .projected_source
        .points()
        .iter()
        .zip(projection.shifted_target.points())
        .map(|(s, t)| (map.evaluate(s) - t).norm())
        .collect();
    let min_dist_transported = min_distances(transported.positions(), &variant.target);
    let min_dist_original = min_distances(demo.positions(), &variant.target);

    let start_pose = Pose::new(
        transported.positions()[0] + offset_direction(config.seed) * config.start_offset,
        transported.orientations()[0],
    );
    let follower = FollowerConfig {
        alpha: config.alpha,
        servo_step: config.servo_step,
        tol_track: config.tol_track,
        start_pose: Some(start_pose),
        start_servo: Vector2::zeros(),
    };
    let (rollout_converged, rollout_steps, final_error) =
        match run_rollout(&transported, &config.policy(), &follower, config.max_steps) {
            Ok(trace) => (true, trace.steps(), trace.final_error),
            Err(SimError::DidNotConverge {
                steps, final_error, ..
            }) => (false, steps, final_error),
        };

    Ok(ScenarioReport {
        scenario: scenario.name.clone(),
        variant: variant.name.clone(),
        keypoints: scenario.source.len(),
        samples: demo.len(),
        duplicate_projection,
        shifts: projection.shifts,
        projected_indices: projection.indices,
        fit_residuals,
        min_dist_transported,
        min_dist_original,
        rollout_converged,
        rollout_steps,
        final_error,
    })
}

/// One sweep entry: scenario/variant identity plus the evaluation outcome.
#[derive(Debug)]
pub struct ReportOutcome {
    pub scenario: String,
    pub variant: String,
    pub result: Result<ScenarioReport, ScenarioError>,
}

/// Evaluates every variant of every scenario. Row order follows the input
/// order regardless of how evaluations are scheduled.
pub fn run_report(scenarios: &[Scenario], config: &RunConfig) -> Vec<ReportOutcome> {
    let pairs: Vec<(usize, usize)> = scenarios
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.variants.len()).map(move |v| (i, v)))
        .collect();
    parallel::map_slice(&pairs, |&(i, v)| ReportOutcome {
        scenario: scenarios[i].name.clone(),
        variant: scenarios[i].variants[v].name.clone(),
        result: evaluate_scenario(&scenarios[i], v, config),
    })
}

pub fn sweep_has_failures(rows: &[ReportOutcome]) -> bool {
    rows.iter().any(|r| match &r.result {
        Ok(report) => !report.rollout_converged,
        Err(_) => true,
    })
}

fn csv_field(text: &str) -> String {
    if text.contains(',') || text.contains('"') || text.contains('\n') {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

fn max_or_zero(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0f64, f64::max)
}

fn min_or_zero(values: &[f64]) -> f64 {
    values.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub const REPORT_CSV_HEADER: &str = "scenario,variant,keypoints,samples,duplicate_projection,\
shift_max,fit_residual_max,closest_target_approach,closest_target_approach_original,\
rollout_converged,rollout_steps,final_error,error";

/// Renders sweep outcomes as CSV, one row per scenario/variant in input
/// order. Failed evaluations carry the error text in the last column.
pub fn report_csv(rows: &[ReportOutcome]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for row in rows {
        match &row.result {
            Ok(r) => {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},\n",
                    csv_field(&r.scenario),
                    csv_field(&r.variant),
                    r.keypoints,
                    r.samples,
                    r.duplicate_projection,
                    max_or_zero(r.shifts.iter().map(|d| d.norm())),
                    max_or_zero(r.fit_residuals.iter().cloned()),
                    min_or_zero(&r.min_dist_transported),
                    min_or_zero(&r.min_dist_original),
                    r.rollout_converged,
                    r.rollout_steps,
                    r.final_error,
                ));
            }
            Err(e) => {
                out.push_str(&format!(
                    "{},{},,,,,,,,false,,,{}\n",
                    csv_field(&row.scenario),
                    csv_field(&row.variant),
                    csv_field(&e.to_string()),
                ));
            }
        }
    }
    out
}

/// Writes synthesized scenario artifacts: the demonstration and both keypoint
/// files for one variant. Returns the three paths written.
pub fn write_scenario_files(
    scenario: &Scenario,
    variant_index: usize,
    dir: impl AsRef<Path>,
) -> Result<[PathBuf; 3], ScenarioError> {
    let variant =
        scenario
            .variants
            .get(variant_index)
            .ok_or(ScenarioError::UnknownVariant {
                scenario: scenario.name.clone(),
                index: variant_index,
                count: scenario.variants.len(),
            })?;
    let demo = scenario.demonstration()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let demo_path = dir.join(format!("{}_demo.json", scenario.name));
    let source_path = dir.join(format!("{}_source_keypoints.json", scenario.name));
    let target_path = dir.join(format!(
        "{}_target_keypoints_{}.json",
        scenario.name, variant.name
    ));
    crate::demonstration::save_demonstration(&demo, &demo_path).map_err(|source| {
        ScenarioError::Demo {
            scenario: scenario.name.clone(),
            source,
        }
    })?;
    save_keypoints(&scenario.source, &source_path)?;
    save_keypoints(&variant.target, &target_path)?;
    Ok([demo_path, source_path, target_path])
}

/// Loads the scenarios selected by a config: explicit files when given,
/// otherwise the builtins.
pub fn load_sweep_scenarios(config: &RunConfig) -> Result<Vec<Scenario>, ScenarioError> {
    match &config.scenarios {
        None => Ok(builtin_scenarios()),
        Some(paths) => paths.iter().map(load_scenario).collect(),
    }
}
