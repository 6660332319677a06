//! Reactive attractor replay.
//!
//! At every control tick the policy selects the demonstration label closest
//! to the robot in a combined position/time metric and commands the *next*
//! label as attractor, including its servo targets. The search never looks
//! backward, so the attractor index is monotone across a rollout even when
//! the trajectory revisits the same region of the workspace.

use nalgebra::{Vector2, Vector3};

use crate::demonstration::Demonstration;
use crate::geometry::Pose;

/// Default weight of the time term in the selection metric.
///
/// The metric is ‖p − xᵢ‖ + γ·(i − current)·Δ̄ with Δ̄ the mean sample
/// spacing, so γ is dimensionless and demo-scale-invariant. Selection can
/// only advance past sample i while γ·Δ̄ stays below the local spacing
/// Δᵢ, so γ must sit well under min Δᵢ/Δ̄; 0.1 leaves a wide margin on
/// roughly uniformly sampled demonstrations while still preferring
/// near-in-time labels among equidistant candidates.
pub const GAMMA_DEFAULT: f64 = 0.1;

/// Default forward search window in samples.
pub const WINDOW_DEFAULT: usize = 20;

/// Default per-tick servo increment in radians, modelling the button-driven
/// discrete servo interface.
pub const SERVO_STEP_DEFAULT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    /// Time-term weight γ ≥ 0.
    pub gamma: f64,
    /// Forward search window W ≥ 1 (inclusive, in samples).
    pub window: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            gamma: GAMMA_DEFAULT,
            window: WINDOW_DEFAULT,
        }
    }
}

/// Attractor selected for the follower: the next label after the closest one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttractorCommand {
    pub pose: Pose,
    pub servo_target: Vector2<f64>,
    /// Index of the commanded label.
    pub attractor_index: usize,
    /// True once the closest label is the final sample.
    pub done: bool,
}

/// Replay state machine over one (transported) demonstration.
#[derive(Debug)]
pub struct PolicyState<'a> {
    demo: &'a Demonstration,
    current_index: usize,
    gamma: f64,
    window: usize,
    mean_spacing: f64,
}

impl<'a> PolicyState<'a> {
    pub fn new(demo: &'a Demonstration, config: &PolicyConfig) -> Self {
        assert!(config.window >= 1, "search window must be at least 1");
        assert!(
            config.gamma >= 0.0 && config.gamma.is_finite(),
            "gamma must be finite and non-negative"
        );
        PolicyState {
            demo,
            current_index: 0,
            gamma: config.gamma,
            window: config.window,
            mean_spacing: demo.mean_spacing(),
        }
    }

    pub fn current_index(&self) -> usize {
        self.current_index
    }

    /// Selects the closest label in position and time within the forward
    /// window and commands the next one. `current_index` never decreases.
    pub fn select_attractor(&mut self, robot_position: &Vector3<f64>) -> AttractorCommand {
        let last = self.demo.len() - 1;
        let end = (self.current_index + self.window).min(last);
        let mut best = self.current_index;
        let mut best_metric = f64::INFINITY;
        for i in self.current_index..=end {
            let dist = (robot_position - self.demo.positions()[i]).norm();
            let metric =
                dist + self.gamma * (i - self.current_index) as f64 * self.mean_spacing;
            if metric < best_metric {
                best_metric = metric;
                best = i;
            }
        }
        self.current_index = best;
        let next = (best + 1).min(last);
        AttractorCommand {
            pose: Pose::new(self.demo.positions()[next], self.demo.orientations()[next]),
            servo_target: self.demo.servos()[next],
            attractor_index: next,
            done: best == last,
        }
    }
}

/// Moves each servo channel toward its target by at most one `step`,
/// clamping at zero. Mirrors the physical buttons that bump a servo by a
/// fixed amount per press.
pub fn servo_step_quantize(
    current: &Vector2<f64>,
    target: &Vector2<f64>,
    step: f64,
) -> Vector2<f64> {
    debug_assert!(step > 0.0, "servo step must be positive");
    Vector2::new(
        quantize_channel(current.x, target.x, step),
        quantize_channel(current.y, target.y, step),
    )
}

fn quantize_channel(current: f64, target: f64, step: f64) -> f64 {
    let delta = (target - current).clamp(-step, step);
    (current + delta).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use proptest::prelude::*;

    fn line_demo(m: usize) -> Demonstration {
        let positions = (0..m)
            .map(|i| Vector3::new(0.01 * i as f64, 0.0, 0.0))
            .collect();
        Demonstration::new(
            positions,
            vec![Rotation::identity(); m],
            (0..m).map(|i| Vector2::new(0.01 * i as f64, 0.0)).collect(),
            0.02,
        )
        .unwrap()
    }

    #[test]
    fn robot_on_a_label_gets_the_next_one() {
        let demo = line_demo(10);
        let mut policy = PolicyState::new(
            &demo,
            &PolicyConfig {
                gamma: 0.0,
                window: 5,
            },
        );
        policy.current_index = 3;
        let cmd = policy.select_attractor(&demo.positions()[3]);
        assert_eq!(cmd.attractor_index, 4);
        assert_eq!(cmd.pose.position, demo.positions()[4]);
        assert_eq!(cmd.servo_target, demo.servos()[4]);
        assert!(!cmd.done);
    }

    #[test]
    fn terminal_sample_sets_done_and_clamps() {
        let demo = line_demo(10);
        let mut policy = PolicyState::new(&demo, &PolicyConfig::default());
        policy.current_index = 8;
        let cmd = policy.select_attractor(&demo.positions()[9]);
        assert!(cmd.done);
        assert_eq!(cmd.attractor_index, 9);
        assert_eq!(cmd.pose.position, demo.positions()[9]);
    }

    #[test]
    fn combined_metric_picks_within_the_window() {
        let demo = line_demo(30);
        let gamma = 0.3;
        let window = 10;
        let mut policy = PolicyState::new(&demo, &PolicyConfig { gamma, window });
        policy.current_index = 3;
        let robot = demo.positions()[5] + Vector3::new(0.002, 0.001, 0.0);
        // Brute-force oracle over the window.
        let spacing = demo.mean_spacing();
        let end = (3 + window).min(demo.len() - 1);
        let expect = (3..=end)
            .map(|i| {
                (
                    i,
                    (robot - demo.positions()[i]).norm() + gamma * (i - 3) as f64 * spacing,
                )
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(expect, 5);
        let cmd = policy.select_attractor(&robot);
        assert_eq!(cmd.attractor_index, 6);
        assert_eq!(policy.current_index(), 5);
    }

    #[test]
    fn gamma_zero_full_window_is_global_nearest() {
        let demo = line_demo(50);
        let mut policy = PolicyState::new(
            &demo,
            &PolicyConfig {
                gamma: 0.0,
                window: demo.len(),
            },
        );
        let robot = demo.positions()[37] + Vector3::new(0.001, 0.0, 0.0);
        policy.select_attractor(&robot);
        assert_eq!(policy.current_index(), 37);
    }

    #[test]
    fn huge_gamma_degenerates_to_sequential_replay() {
        let demo = line_demo(50);
        let mut policy = PolicyState::new(
            &demo,
            &PolicyConfig {
                gamma: 1e9,
                window: demo.len(),
            },
        );
        policy.current_index = 10;
        let robot = demo.positions()[40];
        let cmd = policy.select_attractor(&robot);
        assert_eq!(policy.current_index(), 10);
        assert_eq!(cmd.attractor_index, 11);
    }

    #[test]
    fn current_index_never_decreases() {
        let demo = line_demo(40);
        let mut policy = PolicyState::new(&demo, &PolicyConfig::default());
        let mut last = 0;
        // Walk the robot backward; the selection must not follow.
        for i in (0..40).rev() {
            policy.select_attractor(&demo.positions()[i]);
            assert!(policy.current_index() >= last);
            last = policy.current_index();
        }
    }

    #[test]
    fn quantize_examples() {
        let step = 0.2;
        let same = servo_step_quantize(&Vector2::new(0.4, 0.1), &Vector2::new(0.4, 0.1), step);
        assert_eq!(same, Vector2::new(0.4, 0.1));
        let one = servo_step_quantize(&Vector2::new(0.0, 0.0), &Vector2::new(0.5, 0.0), step);
        assert_eq!(one, Vector2::new(0.2, 0.0));
    }

    #[test]
    fn quantize_converges_in_the_counted_number_of_calls() {
        let step = 0.07;
        let target = Vector2::<f64>::new(0.93, 0.31);
        let mut servo = Vector2::<f64>::new(0.0, 1.2);
        let worst = ((target.x - servo.x).abs() / step)
            .max((target.y - servo.y).abs() / step)
            .ceil() as usize;
        for _ in 0..worst {
            servo = servo_step_quantize(&servo, &target, step);
        }
        assert!((servo - target).norm() <= 1e-12);
    }

    proptest! {
        #[test]
        fn quantize_never_overshoots(
            current in proptest::array::uniform2(0.0f64..4.0),
            target in proptest::array::uniform2(0.0f64..4.0),
            step in 0.01f64..0.5,
        ) {
            let mut servo = Vector2::from(current);
            let target = Vector2::from(target);
            let mut gap = (servo - target).abs();
            for _ in 0..50 {
                servo = servo_step_quantize(&servo, &target, step);
                let next_gap = (servo - target).abs();
                prop_assert!(next_gap.x <= gap.x + 1e-15);
                prop_assert!(next_gap.y <= gap.y + 1e-15);
                prop_assert!(servo.x >= 0.0 && servo.y >= 0.0);
                gap = next_gap;
            }
        }
    }
}
