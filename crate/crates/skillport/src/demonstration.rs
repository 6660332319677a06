//! Demonstration data model, validation and file I/O.
//!
//! A demonstration is the set of policy labels recorded while teaching a
//! skill: Cartesian positions, orientations and the two cable-servo positions
//! at every sample, plus the uniform sample period. Channel 0 is the bending
//! cable, channel 1 the twisting cable.
//!
//! File format: a single JSON document
//! `{"sample_period": s, "positions": [[x,y,z],...],
//!   "orientations": [[w,x,y,z],...], "servos": [[l0,l1],...]}`
//! in meters / unit quaternions / radians. Unknown fields are rejected;
//! quaternions are renormalized on ingest and rejected when their norm
//! deviates from 1 by more than [`QUAT_NORM_TOL`].

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Rotation;

/// Max distance between consecutive samples of a raw recording, in meters.
/// Generous for kinesthetic teaching at typical demo rates; catches dropped
/// frames and corrupted files.
pub const JUMP_LIMIT_DEFAULT: f64 = 0.05;

/// Transported demonstrations may stretch; their jump limit is relaxed by
/// this factor.
pub const TRANSPORT_JUMP_FACTOR: f64 = 2.0;

/// Allowed deviation of an ingested quaternion norm from 1.
pub const QUAT_NORM_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("ParseError: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("ValidationError: {what}{}", fmt_index(.index))]
    Validation { what: String, index: Option<usize> },
    #[error("InvalidScenario: {0}")]
    InvalidScenario(String),
}

fn fmt_index(index: &Option<usize>) -> String {
    match index {
        Some(i) => format!(" at sample {i}"),
        None => String::new(),
    }
}

fn validation(what: impl Into<String>, index: Option<usize>) -> DemoError {
    DemoError::Validation {
        what: what.into(),
        index,
    }
}

/// Time-indexed policy labels of one kinesthetic demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    positions: Vec<Vector3<f64>>,
    orientations: Vec<Rotation>,
    servos: Vec<Vector2<f64>>,
    sample_period: f64,
}

impl Demonstration {
    /// Validates and builds a demonstration with the default jump limit.
    pub fn new(
        positions: Vec<Vector3<f64>>,
        orientations: Vec<Rotation>,
        servos: Vec<Vector2<f64>>,
        sample_period: f64,
    ) -> Result<Self, DemoError> {
        Self::with_jump_limit(
            positions,
            orientations,
            servos,
            sample_period,
            JUMP_LIMIT_DEFAULT,
        )
    }

    /// Validates with an explicit jump limit (meters per sample).
    pub fn with_jump_limit(
        positions: Vec<Vector3<f64>>,
        orientations: Vec<Rotation>,
        servos: Vec<Vector2<f64>>,
        sample_period: f64,
        jump_limit: f64,
    ) -> Result<Self, DemoError> {
        if !(sample_period > 0.0 && sample_period.is_finite()) {
            return Err(validation(
                format!("sample_period must be positive and finite, got {sample_period}"),
                None,
            ));
        }
        if positions.len() != orientations.len() || positions.len() != servos.len() {
            return Err(validation(
                format!(
                    "length mismatch: {} positions, {} orientations, {} servos",
                    positions.len(),
                    orientations.len(),
                    servos.len()
                ),
                None,
            ));
        }
        if positions.len() < 2 {
            return Err(validation(
                format!("at least 2 samples required, got {}", positions.len()),
                None,
            ));
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(validation("non-finite position", Some(i)));
            }
        }
        for (i, l) in servos.iter().enumerate() {
            if !l.iter().all(|v| v.is_finite()) {
                return Err(validation("non-finite servo", Some(i)));
            }
            if l.iter().any(|&v| v < 0.0) {
                return Err(validation("negative servo", Some(i)));
            }
        }
        for i in 0..positions.len() - 1 {
            let jump = (positions[i + 1] - positions[i]).norm();
            if jump > jump_limit {
                return Err(validation(
                    format!("position jump {jump:.4} m exceeds limit {jump_limit} m"),
                    Some(i),
                ));
            }
        }
        Ok(Demonstration {
            positions,
            orientations,
            servos,
            sample_period,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn orientations(&self) -> &[Rotation] {
        &self.orientations
    }

    pub fn servos(&self) -> &[Vector2<f64>] {
        &self.servos
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    /// Mean consecutive-sample spacing, the length scale of the replay
    /// policy's time term.
    pub fn mean_spacing(&self) -> f64 {
        let total: f64 = self
            .positions
            .windows(2)
            .map(|w| (w[1] - w[0]).norm())
            .sum();
        total / (self.len() - 1) as f64
    }
}

/// A demonstration after transport through a deformation map. Same shape as
/// [`Demonstration`] with the jump limit relaxed by [`TRANSPORT_JUMP_FACTOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransportedDemonstration(Demonstration);

impl TransportedDemonstration {
    pub fn from_parts(
        positions: Vec<Vector3<f64>>,
        orientations: Vec<Rotation>,
        servos: Vec<Vector2<f64>>,
        sample_period: f64,
    ) -> Result<Self, DemoError> {
        Demonstration::with_jump_limit(
            positions,
            orientations,
            servos,
            sample_period,
            JUMP_LIMIT_DEFAULT * TRANSPORT_JUMP_FACTOR,
        )
        .map(TransportedDemonstration)
    }

    pub fn into_inner(self) -> Demonstration {
        self.0
    }
}

impl std::ops::Deref for TransportedDemonstration {
    type Target = Demonstration;
    fn deref(&self) -> &Demonstration {
        &self.0
    }
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoFile {
    sample_period: f64,
    positions: Vec<[f64; 3]>,
    orientations: Vec<[f64; 4]>,
    servos: Vec<[f64; 2]>,
}

type DemoParts = (Vec<Vector3<f64>>, Vec<Rotation>, Vec<Vector2<f64>>, f64);

fn parts_from_file(raw: DemoFile) -> Result<DemoParts, DemoError> {
    let positions = raw.positions.iter().map(|p| Vector3::from(*p)).collect();
    let mut orientations = Vec::with_capacity(raw.orientations.len());
    for (i, q) in raw.orientations.iter().enumerate() {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(validation(
                format!("quaternion norm {norm:.6} deviates from 1 by more than {QUAT_NORM_TOL}"),
                Some(i),
            ));
        }
        orientations.push(Rotation::from_unit_quaternion(
            &UnitQuaternion::from_quaternion(quat),
        ));
    }
    let servos = raw.servos.iter().map(|l| Vector2::from(*l)).collect();
    Ok((positions, orientations, servos, raw.sample_period))
}

fn demo_to_file(demo: &Demonstration) -> DemoFile {
    DemoFile {
        sample_period: demo.sample_period,
        positions: demo.positions.iter().map(|p| [p.x, p.y, p.z]).collect(),
        orientations: demo
            .orientations
            .iter()
            .map(|r| {
                let q = r.to_unit_quaternion();
                [q.w, q.i, q.j, q.k]
            })
            .collect(),
        servos: demo.servos.iter().map(|l| [l.x, l.y]).collect(),
    }
}

/// Loads and validates a demonstration file.
pub fn load_demonstration(path: impl AsRef<Path>) -> Result<Demonstration, DemoError> {
    let raw: DemoFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let (positions, orientations, servos, period) = parts_from_file(raw)?;
    Demonstration::new(positions, orientations, servos, period)
}

/// Loads a transported demonstration (relaxed jump limit).
pub fn load_transported(path: impl AsRef<Path>) -> Result<TransportedDemonstration, DemoError> {
    let raw: DemoFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let (positions, orientations, servos, period) = parts_from_file(raw)?;
    TransportedDemonstration::from_parts(positions, orientations, servos, period)
}

/// Writes a demonstration as a single JSON document. `load(save(d))`
/// reproduces `d` within 1e−12 on all numeric fields.
pub fn save_demonstration(demo: &Demonstration, path: impl AsRef<Path>) -> Result<(), DemoError> {
    let file = File::create(path)?;
    serde_json::to_writer(BufWriter::new(file), &demo_to_file(demo))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic demonstrations
// ---------------------------------------------------------------------------

/// One waypoint of a demonstration script.
#[derive(Debug, Clone, PartialEq)]
pub struct Waypoint {
    pub position: Vector3<f64>,
    pub orientation: Rotation,
}

impl Waypoint {
    pub fn new(position: Vector3<f64>, orientation: Rotation) -> Self {
        Waypoint {
            position,
            orientation,
        }
    }

    pub fn upright(position: Vector3<f64>) -> Self {
        Waypoint {
            position,
            orientation: Rotation::identity(),
        }
    }
}

/// Piecewise-constant servo schedule entry: from sample `from_sample` onward
/// the labels carry `servo` until the next entry takes over.
#[derive(Debug, Clone, PartialEq)]
pub struct ServoStep {
    pub from_sample: usize,
    pub servo: Vector2<f64>,
}

/// Desk-scale substitute for kinesthetic teaching: waypoints, a sample count
/// and a servo schedule from which a demonstration is synthesized.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoScript {
    pub waypoints: Vec<Waypoint>,
    pub samples: usize,
    pub sample_period: f64,
    pub servo_schedule: Vec<ServoStep>,
}

impl DemoScript {
    fn validate(&self) -> Result<(), DemoError> {
        if self.waypoints.len() < 2 {
            return Err(DemoError::InvalidScenario(format!(
                "at least 2 waypoints required, got {}",
                self.waypoints.len()
            )));
        }
        if self.samples < self.waypoints.len() {
            return Err(DemoError::InvalidScenario(format!(
                "{} samples cannot cover {} waypoints",
                self.samples,
                self.waypoints.len()
            )));
        }
        if !(self.sample_period > 0.0 && self.sample_period.is_finite()) {
            return Err(DemoError::InvalidScenario(format!(
                "sample_period must be positive, got {}",
                self.sample_period
            )));
        }
        for (k, w) in self.waypoints.iter().enumerate() {
            if !w.position.iter().all(|v| v.is_finite()) {
                return Err(DemoError::InvalidScenario(format!(
                    "non-finite waypoint {k}"
                )));
            }
        }
        for w in self.waypoints.windows(2) {
            if (w[1].position - w[0].position).norm() < 1e-12 {
                return Err(DemoError::InvalidScenario(
                    "coincident consecutive waypoints".into(),
                ));
            }
        }
        let mut last = 0usize;
        for (i, step) in self.servo_schedule.iter().enumerate() {
            if step.from_sample >= self.samples {
                return Err(DemoError::InvalidScenario(format!(
                    "servo step {i} starts at sample {} beyond the last sample {}",
                    step.from_sample,
                    self.samples - 1
                )));
            }
            if i > 0 && step.from_sample < last {
                return Err(DemoError::InvalidScenario(
                    "servo schedule indices must be non-decreasing".into(),
                ));
            }
            if step.servo.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(DemoError::InvalidScenario(format!(
                    "servo step {i} has a negative or non-finite value"
                )));
            }
            last = step.from_sample;
        }
        Ok(())
    }

    /// Chord lengths between consecutive waypoints.
    fn chords(&self) -> Vec<f64> {
        self.waypoints
            .windows(2)
            .map(|w| (w[1].position - w[0].position).norm())
            .collect()
    }
}

/// Sample counts per leg, proportional to chord length (largest-remainder
/// apportionment, each leg at least one sample). Keeps the sample spacing
/// roughly uniform along the whole path so short legs do not collapse into
/// near-stationary stretches.
fn leg_allocation(chords: &[f64], intervals: usize) -> Vec<usize> {
    let total: f64 = chords.iter().sum();
    let legs = chords.len();
    let mut counts: Vec<usize> = Vec::with_capacity(legs);
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(legs);
    let mut used = 0usize;
    for (k, &c) in chords.iter().enumerate() {
        let exact = intervals as f64 * c / total;
        let floor = (exact.floor() as usize).max(1);
        counts.push(floor);
        remainders.push((k, exact - floor as f64));
        used += floor;
    }
    // Distribute the leftover intervals to the largest remainders; when the
    // minimum-one rule over-allocated, trim from the smallest remainders.
    if used < intervals {
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut extra = intervals - used;
        let mut idx = 0;
        while extra > 0 {
            counts[remainders[idx % legs].0] += 1;
            extra -= 1;
            idx += 1;
        }
    } else if used > intervals {
        remainders.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let mut surplus = used - intervals;
        let mut idx = 0;
        while surplus > 0 {
            let k = remainders[idx % legs].0;
            if counts[k] > 1 {
                counts[k] -= 1;
                surplus -= 1;
            }
            idx += 1;
        }
    }
    counts
}

/// Natural cubic spline through (knots, values); returns second derivatives.
fn natural_cubic_second_derivs(knots: &[f64], values: &[f64]) -> Vec<f64> {
    let n = knots.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // Thomas algorithm on the interior unknowns.
    let unknowns = n - 2;
    let mut diag = vec![0.0; unknowns];
    let mut upper = vec![0.0; unknowns];
    let mut lower = vec![0.0; unknowns];
    let mut rhs = vec![0.0; unknowns];
    for i in 0..unknowns {
        let k = i + 1;
        let h0 = knots[k] - knots[k - 1];
        let h1 = knots[k + 1] - knots[k];
        lower[i] = h0 / 6.0;
        diag[i] = (h0 + h1) / 3.0;
        upper[i] = h1 / 6.0;
        rhs[i] = (values[k + 1] - values[k]) / h1 - (values[k] - values[k - 1]) / h0;
    }
    for i in 1..unknowns {
        let w = lower[i] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    let mut sol = vec![0.0; unknowns];
    sol[unknowns - 1] = rhs[unknowns - 1] / diag[unknowns - 1];
    for i in (0..unknowns - 1).rev() {
        sol[i] = (rhs[i] - upper[i] * sol[i + 1]) / diag[i];
    }
    m[1..=unknowns].copy_from_slice(&sol);
    m
}

fn spline_eval(knots: &[f64], values: &[f64], second: &[f64], leg: usize, t: f64) -> f64 {
    let h = knots[leg + 1] - knots[leg];
    let a = (knots[leg + 1] - t) / h;
    let b = (t - knots[leg]) / h;
    a * values[leg]
        + b * values[leg + 1]
        + ((a * a * a - a) * second[leg] + (b * b * b - b) * second[leg + 1]) * h * h / 6.0
}

/// Sample indices at which the synthesized demonstration hits each waypoint
/// exactly.
pub fn waypoint_sample_indices(script: &DemoScript) -> Result<Vec<usize>, DemoError> {
    script.validate()?;
    let alloc = leg_allocation(&script.chords(), script.samples - 1);
    let mut indices = Vec::with_capacity(script.waypoints.len());
    let mut acc = 0usize;
    indices.push(0);
    for n in alloc {
        acc += n;
        indices.push(acc);
    }
    Ok(indices)
}

/// Synthesizes a demonstration from a script: natural cubic spline through
/// the waypoint positions (chord-length knots), per-leg spherical
/// interpolation of the orientations, and a piecewise-constant servo
/// schedule. Waypoints land exactly on samples.
pub fn synthesize_demonstration(script: &DemoScript) -> Result<Demonstration, DemoError> {
    script.validate()?;
    let chords = script.chords();
    let intervals = script.samples - 1;
    let alloc = leg_allocation(&chords, intervals);

    let mut knots = Vec::with_capacity(script.waypoints.len());
    let mut acc = 0.0;
    knots.push(0.0);
    for c in &chords {
        acc += c;
        knots.push(acc);
    }
    let coords: Vec<Vec<f64>> = (0..3)
        .map(|d| script.waypoints.iter().map(|w| w.position[d]).collect())
        .collect();
    let second: Vec<Vec<f64>> = coords
        .iter()
        .map(|vals| natural_cubic_second_derivs(&knots, vals))
        .collect();

    let mut positions = Vec::with_capacity(script.samples);
    let mut orientations = Vec::with_capacity(script.samples);
    for (leg, &n) in alloc.iter().enumerate() {
        let qa = script.waypoints[leg].orientation.to_unit_quaternion();
        let qb = script.waypoints[leg + 1].orientation.to_unit_quaternion();
        for j in 0..n {
            if j == 0 {
                positions.push(script.waypoints[leg].position);
                orientations.push(script.waypoints[leg].orientation);
            } else {
                let frac = j as f64 / n as f64;
                let t = knots[leg] + (knots[leg + 1] - knots[leg]) * frac;
                positions.push(Vector3::new(
                    spline_eval(&knots, &coords[0], &second[0], leg, t),
                    spline_eval(&knots, &coords[1], &second[1], leg, t),
                    spline_eval(&knots, &coords[2], &second[2], leg, t),
                ));
                orientations.push(Rotation::from_unit_quaternion(&qa.slerp(&qb, frac)));
            }
        }
    }
    let last = script.waypoints.last().unwrap();
    positions.push(last.position);
    orientations.push(last.orientation);

    let mut servos = Vec::with_capacity(script.samples);
    let mut current = Vector2::zeros();
    let mut next_step = 0usize;
    for i in 0..script.samples {
        while next_step < script.servo_schedule.len()
            && script.servo_schedule[next_step].from_sample <= i
        {
            current = script.servo_schedule[next_step].servo;
            next_step += 1;
        }
        servos.push(current);
    }

    Demonstration::new(positions, orientations, servos, script.sample_period)
}
