//! Kinematic desk-scale executor.
//!
//! A first-order pose follower chases the attractor commanded by the replay
//! policy: position error contracts by a fixed gain per step, orientation
//! steps along the geodesic, servos move through the quantized button
//! interface. A constant-curvature model of the tapered soft arm renders the
//! arm shape into the trace at every step; it never feeds back into policy
//! decisions.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demonstration::TransportedDemonstration;
use crate::geometry::{Pose, Rotation};
use crate::policy::{servo_step_quantize, AttractorCommand, PolicyConfig, PolicyState};

/// Default follower gain per step.
pub const ALPHA_DEFAULT: f64 = 0.3;

/// Default tracking tolerance for rollout convergence, meters.
pub const TOL_TRACK_DEFAULT: f64 = 1e-3;

/// Default rollout step budget.
pub const MAX_STEPS_DEFAULT: usize = 50_000;

/// Soft-arm geometry: total length and tapered radii (base 35 mm diameter
/// down to 7 mm at the tip).
pub const ARM_LENGTH: f64 = 0.380;
pub const ARM_BASE_RADIUS: f64 = 0.0175;
pub const ARM_TIP_RADIUS: f64 = 0.0035;

/// Centerline samples per rendered shape.
pub const ARM_SAMPLES: usize = 50;

/// Cable-to-curvature gain, 1/(m·rad): a full 2π bending pull wraps the arm
/// about 1.5 turns. Documented constant of the render model, not a measured
/// property of the physical arm.
pub const BEND_GAIN: f64 = 1.5 / ARM_LENGTH;

/// Cable-to-twist gain, rad of tip twist per rad of pull. Same status as
/// [`BEND_GAIN`].
pub const TWIST_GAIN: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(
        "DidNotConverge: rollout hit the {steps}-step budget with position error {final_error:.3e} m"
    )]
    DidNotConverge {
        steps: usize,
        final_error: f64,
        /// The partial trace, kept for inspection.
        trace: Box<SimTrace>,
    },
}

/// Follower pose, servo state and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerState {
    pub pose: Pose,
    pub servo: Vector2<f64>,
    pub step_count: usize,
}

#[derive(Debug, Clone)]
pub struct FollowerConfig {
    /// Contraction gain in (0, 1]; 1 jumps straight onto the attractor.
    pub alpha: f64,
    /// Servo increment per step, radians.
    pub servo_step: f64,
    /// Position error below which a finished rollout counts as converged.
    pub tol_track: f64,
    /// Start pose; defaults to the first demonstration label.
    pub start_pose: Option<Pose>,
    /// Initial servo state.
    pub start_servo: Vector2<f64>,
}

impl Default for FollowerConfig {
    fn default() -> Self {
        FollowerConfig {
            alpha: ALPHA_DEFAULT,
            servo_step: crate::policy::SERVO_STEP_DEFAULT,
            tol_track: TOL_TRACK_DEFAULT,
            start_pose: None,
            start_servo: Vector2::zeros(),
        }
    }
}

/// One first-order step toward the commanded attractor.
pub fn step_follower(
    state: &FollowerState,
    cmd: &AttractorCommand,
    alpha: f64,
    servo_step: f64,
) -> FollowerState {
    debug_assert!(alpha > 0.0 && alpha <= 1.0, "gain must be in (0, 1]");
    let position = state.pose.position + alpha * (cmd.pose.position - state.pose.position);
    let orientation = state
        .pose
        .orientation
        .interpolate_toward(&cmd.pose.orientation, alpha);
    FollowerState {
        pose: Pose::new(position, orientation),
        servo: servo_step_quantize(&state.servo, &cmd.servo_target, servo_step),
        step_count: state.step_count + 1,
    }
}

/// Rendered soft-arm shape: centerline points along the backbone and the
/// tapered radius at each point.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftArmShape {
    pub centerline: Vec<Vector3<f64>>,
    pub radii: Vec<f64>,
}

impl SoftArmShape {
    /// Shape expressed in the world frame of the given mount pose.
    pub fn transformed(&self, pose: &Pose) -> SoftArmShape {
        SoftArmShape {
            centerline: self
                .centerline
                .iter()
                .map(|p| pose.transform_point(p))
                .collect(),
            radii: self.radii.clone(),
        }
    }
}

/// Point on the constant-curvature backbone at arc length `s`, arm frame
/// (base at the origin, tool axis +z, ventral bending toward +x).
///
/// The bending cable sets the curvature κ = [`BEND_GAIN`]·l₀ and the twist
/// cable a torsion θ = [`TWIST_GAIN`]·l₁ distributed along the arm; the
/// backbone is the integral of the resulting constant body-rate frame, so
/// its arc length is exactly `s` for every servo input.
pub fn soft_arm_point(servo: &Vector2<f64>, s: f64) -> Vector3<f64> {
    let kappa = BEND_GAIN * servo.x;
    let tau = TWIST_GAIN * servo.y / ARM_LENGTH;
    let omega2 = kappa * kappa + tau * tau;
    let omega = omega2.sqrt();
    if omega < 1e-9 {
        return Vector3::new(0.0, 0.0, s);
    }
    let c1 = (1.0 - (omega * s).cos()) / omega2;
    let c2 = (s - (omega * s).sin() / omega) / omega2;
    Vector3::new(c1 * kappa, c2 * tau * kappa, s - c2 * kappa * kappa)
}

/// Renders the arm for a servo state: [`ARM_SAMPLES`] centerline points with
/// linearly tapered radii.
pub fn soft_arm_shape(servo: &Vector2<f64>) -> SoftArmShape {
    debug_assert!(servo.x >= 0.0 && servo.y >= 0.0, "servo pulls are non-negative");
    let k = ARM_SAMPLES;
    let mut centerline = Vec::with_capacity(k);
    let mut radii = Vec::with_capacity(k);
    for i in 0..k {
        let t = i as f64 / (k - 1) as f64;
        centerline.push(soft_arm_point(servo, ARM_LENGTH * t));
        radii.push((1.0 - t) * ARM_BASE_RADIUS + t * ARM_TIP_RADIUS);
    }
    SoftArmShape { centerline, radii }
}

/// One recorded step of a rollout.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub step: usize,
    pub pose: Pose,
    pub servo: Vector2<f64>,
    pub attractor_index: usize,
    /// World-frame arm shape at this step.
    pub shape: SoftArmShape,
}

/// Full rollout trace plus scenario metadata.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub records: Vec<TraceRecord>,
    pub demo_samples: usize,
    pub sample_period: f64,
    pub converged: bool,
    pub final_error: f64,
}

impl SimTrace {
    pub fn steps(&self) -> usize {
        self.records.len()
    }
}

/// Replays a transported demonstration: alternates attractor selection and
/// follower steps until the policy reaches the final label and the follower
/// position is within `tol_track` of it.
///
/// On a blown step budget the partial trace rides along in the error.
pub fn run_rollout(
    demo: &TransportedDemonstration,
    policy_cfg: &PolicyConfig,
    follower_cfg: &FollowerConfig,
    max_steps: usize,
) -> Result<SimTrace, SimError> {
    assert!(max_steps >= 1, "max_steps must be at least 1");
    let mut policy = PolicyState::new(demo, policy_cfg);
    let start_pose = follower_cfg.start_pose.unwrap_or(Pose::new(
        demo.positions()[0],
        demo.orientations()[0],
    ));
    let mut state = FollowerState {
        pose: start_pose,
        servo: follower_cfg.start_servo,
        step_count: 0,
    };
    let final_position = *demo.positions().last().unwrap();
    let mut records = Vec::new();

    loop {
        let cmd = policy.select_attractor(&state.pose.position);
        let err = (state.pose.position - final_position).norm();
        if cmd.done && err <= follower_cfg.tol_track {
            return Ok(SimTrace {
                records,
                demo_samples: demo.len(),
                sample_period: demo.sample_period(),
                converged: true,
                final_error: err,
            });
        }
        if state.step_count >= max_steps {
            let trace = SimTrace {
                records,
                demo_samples: demo.len(),
                sample_period: demo.sample_period(),
                converged: false,
                final_error: err,
            };
            return Err(SimError::DidNotConverge {
                steps: state.step_count,
                final_error: err,
                trace: Box::new(trace),
            });
        }
        state = step_follower(&state, &cmd, follower_cfg.alpha, follower_cfg.servo_step);
        records.push(TraceRecord {
            step: state.step_count,
            pose: state.pose,
            servo: state.servo,
            attractor_index: cmd.attractor_index,
            shape: soft_arm_shape(&state.servo).transformed(&state.pose),
        });
    }
}

// ---------------------------------------------------------------------------
// Trace export
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TraceFile {
    demo_samples: usize,
    sample_period: f64,
    converged: bool,
    final_error: f64,
    steps: Vec<TraceStepFile>,
}

#[derive(Serialize, Deserialize)]
struct TraceStepFile {
    step: usize,
    position: [f64; 3],
    orientation: [f64; 4],
    servo: [f64; 2],
    attractor_index: usize,
    centerline: Vec<[f64; 3]>,
    radii: Vec<f64>,
}

fn quat_parts(r: &Rotation) -> [f64; 4] {
    let q = r.to_unit_quaternion();
    [q.w, q.i, q.j, q.k]
}

/// Writes the full trace (including arm shapes) as one JSON document.
pub fn write_trace_json(trace: &SimTrace, path: impl AsRef<Path>) -> std::io::Result<()> {
    let file = TraceFile {
        demo_samples: trace.demo_samples,
        sample_period: trace.sample_period,
        converged: trace.converged,
        final_error: trace.final_error,
        steps: trace
            .records
            .iter()
            .map(|r| TraceStepFile {
                step: r.step,
                position: [r.pose.position.x, r.pose.position.y, r.pose.position.z],
                orientation: quat_parts(&r.pose.orientation),
                servo: [r.servo.x, r.servo.y],
                attractor_index: r.attractor_index,
                centerline: r.shape.centerline.iter().map(|p| [p.x, p.y, p.z]).collect(),
                radii: r.shape.radii.clone(),
            })
            .collect(),
    };
    let out = File::create(path)?;
    serde_json::to_writer(BufWriter::new(out), &file)?;
    Ok(())
}

/// Flat per-step CSV for plotting tools:
/// `step,x,y,z,qw,qx,qy,qz,l0,l1,attractor_index`.
pub fn trace_csv(trace: &SimTrace) -> String {
    let mut out = String::from("step,x,y,z,qw,qx,qy,qz,l0,l1,attractor_index\n");
    for r in &trace.records {
        let q = quat_parts(&r.pose.orientation);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.pose.position.x,
            r.pose.position.y,
            r.pose.position.z,
            q[0],
            q[1],
            q[2],
            q[3],
            r.servo.x,
            r.servo.y,
            r.attractor_index
        ));
    }
    out
}

pub fn write_trace_csv(trace: &SimTrace, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(trace_csv(trace).as_bytes())
}

/// Dense chord-length integration of the backbone, used as the arc-length
/// oracle in tests.
pub fn soft_arm_arc_length(servo: &Vector2<f64>, segments: usize) -> f64 {
    let mut total = 0.0;
    let mut prev = soft_arm_point(servo, 0.0);
    for i in 1..=segments {
        let s = ARM_LENGTH * i as f64 / segments as f64;
        let next = soft_arm_point(servo, s);
        total += (next - prev).norm();
        prev = next;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demonstration::Demonstration;

    fn straight_demo(m: usize) -> TransportedDemonstration {
        let positions = (0..m)
            .map(|i| Vector3::new(0.01 * i as f64, 0.0, 0.0))
            .collect();
        let demo = Demonstration::new(
            positions,
            vec![Rotation::identity(); m],
            vec![Vector2::zeros(); m],
            0.02,
        )
        .unwrap();
        TransportedDemonstration::from_parts(
            demo.positions().to_vec(),
            demo.orientations().to_vec(),
            demo.servos().to_vec(),
            demo.sample_period(),
        )
        .unwrap()
    }

    fn cmd_at(pose: Pose) -> AttractorCommand {
        AttractorCommand {
            pose,
            servo_target: Vector2::zeros(),
            attractor_index: 0,
            done: false,
        }
    }

    #[test]
    fn unit_gain_jumps_onto_the_attractor() {
        let state = FollowerState {
            pose: Pose::new(Vector3::zeros(), Rotation::identity()),
            servo: Vector2::zeros(),
            step_count: 0,
        };
        let target = Pose::new(
            Vector3::new(0.2, -0.1, 0.3),
            Rotation::from_axis_angle(&Vector3::y(), 0.8),
        );
        let next = step_follower(&state, &cmd_at(target), 1.0, 0.05);
        assert_eq!(next.pose.position, target.position);
        assert!(next.pose.orientation.matrix_distance(&target.orientation) <= 1e-12);
        assert_eq!(next.step_count, 1);
    }

    #[test]
    fn attractor_at_current_pose_is_a_fixed_point() {
        let pose = Pose::new(Vector3::new(0.1, 0.2, 0.3), Rotation::identity());
        let state = FollowerState {
            pose,
            servo: Vector2::new(0.4, 0.1),
            step_count: 3,
        };
        let mut cmd = cmd_at(pose);
        cmd.servo_target = state.servo;
        let next = step_follower(&state, &cmd, 0.5, 0.05);
        assert_eq!(next.pose.position, pose.position);
        assert!(next.pose.orientation.matrix_distance(&pose.orientation) <= 1e-15);
        assert_eq!(next.servo, state.servo);
    }

    #[test]
    fn contraction_follows_the_geometric_series() {
        let target = Pose::new(Vector3::new(0.5, 0.0, 0.0), Rotation::identity());
        let mut state = FollowerState {
            pose: Pose::new(Vector3::zeros(), Rotation::identity()),
            servo: Vector2::zeros(),
            step_count: 0,
        };
        let d0 = (state.pose.position - target.position).norm();
        for k in 1..=20 {
            state = step_follower(&state, &cmd_at(target), 0.5, 0.05);
            let d = (state.pose.position - target.position).norm();
            assert!((d - d0 * 0.5f64.powi(k)).abs() <= 1e-12, "step {k}: {d}");
        }
    }

    #[test]
    fn neutral_servo_renders_a_straight_arm() {
        let shape = soft_arm_shape(&Vector2::zeros());
        assert_eq!(shape.centerline.len(), ARM_SAMPLES);
        assert_eq!(shape.centerline[0], Vector3::zeros());
        let tip = shape.centerline.last().unwrap();
        assert_eq!(*tip, Vector3::new(0.0, 0.0, ARM_LENGTH));
        for p in &shape.centerline {
            assert_eq!(p.x, 0.0);
            assert_eq!(p.y, 0.0);
        }
    }

    #[test]
    fn pure_bending_stays_in_the_bending_plane() {
        let shape = soft_arm_shape(&Vector2::new(1.3, 0.0));
        for p in &shape.centerline {
            assert!(p.y.abs() <= 1e-12, "out-of-plane deviation {}", p.y);
        }
        // Ventral bending points toward +x.
        assert!(shape.centerline.last().unwrap().x > 0.0);
    }

    #[test]
    fn arc_length_is_preserved_under_bend_and_twist() {
        let servo = Vector2::new(2.4, 1.8);
        let len = soft_arm_arc_length(&servo, 20_000);
        assert!((len - ARM_LENGTH).abs() <= 1e-6, "arc length {len}");
    }

    #[test]
    fn radii_taper_from_base_to_tip() {
        let shape = soft_arm_shape(&Vector2::new(0.7, 0.2));
        assert_eq!(shape.radii[0], ARM_BASE_RADIUS);
        assert_eq!(*shape.radii.last().unwrap(), ARM_TIP_RADIUS);
        for w in shape.radii.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn unit_gain_rollout_walks_the_labels_in_order() {
        let demo = straight_demo(30);
        let trace = run_rollout(
            &demo,
            &PolicyConfig::default(),
            &FollowerConfig {
                alpha: 1.0,
                ..FollowerConfig::default()
            },
            10_000,
        )
        .unwrap();
        assert_eq!(trace.steps(), demo.len() - 1);
        assert!(trace.converged);
        let last = trace.records.last().unwrap();
        assert_eq!(last.pose.position, *demo.positions().last().unwrap());
        // Attractor indices never regress.
        for w in trace.records.windows(2) {
            assert!(w[1].attractor_index >= w[0].attractor_index);
        }
    }

    #[test]
    fn offset_start_converges_within_tolerance() {
        let demo = straight_demo(40);
        let cfg = FollowerConfig {
            alpha: 0.3,
            start_pose: Some(Pose::new(
                demo.positions()[0] + Vector3::new(0.0, 0.05, 0.0),
                Rotation::identity(),
            )),
            ..FollowerConfig::default()
        };
        let trace = run_rollout(&demo, &PolicyConfig::default(), &cfg, 10_000).unwrap();
        assert!(trace.converged);
        assert!(trace.final_error <= 1e-3);
    }

    #[test]
    fn one_step_budget_reports_did_not_converge() {
        let demo = straight_demo(50);
        match run_rollout(
            &demo,
            &PolicyConfig::default(),
            &FollowerConfig::default(),
            1,
        ) {
            Err(SimError::DidNotConverge { steps: 1, trace, .. }) => {
                assert_eq!(trace.steps(), 1);
                assert!(!trace.converged);
            }
            other => panic!("expected DidNotConverge, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_has_one_row_per_step() {
        let demo = straight_demo(10);
        let trace = run_rollout(
            &demo,
            &PolicyConfig::default(),
            &FollowerConfig {
                alpha: 1.0,
                ..FollowerConfig::default()
            },
            1_000,
        )
        .unwrap();
        let csv = trace_csv(&trace);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), trace.steps() + 1);
        assert!(lines[0].starts_with("step,x,y,z,qw"));
    }
}
