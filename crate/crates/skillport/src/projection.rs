//! Keypoint projection for soft end-effectors.
//!
//! Space deformation assumes the trajectory deforms according to its
//! proximity to the keypoints, which breaks down when the end-effector point
//! is ambiguous (whole-body grasping with a soft arm). The fix: replace each
//! source keypoint by its closest point on the demonstrated trajectory and
//! shift the registered target keypoint by the same offset. The deformation
//! then anchors to the recorded motion, and the transported trajectory passes
//! exactly through the shifted targets at the projected samples.

use nalgebra::Vector3;
use thiserror::Error;

use crate::demonstration::Demonstration;
use crate::parallel;
use crate::transport::{KeypointLabel, KeypointSet};

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("CountMismatch: {left} keypoints vs {right}")]
    CountMismatch { left: usize, right: usize },
}

/// Outcome of projecting a keypoint pair onto a demonstration.
#[derive(Debug, Clone)]
pub struct ProjectionResult {
    /// 𝒮̃ — each source keypoint replaced by its closest trajectory sample.
    pub projected_source: KeypointSet,
    /// 𝒯̃ — targets shifted by the same per-keypoint offset.
    pub shifted_target: KeypointSet,
    /// Δᵢ = s̃ᵢ − sᵢ.
    pub shifts: Vec<Vector3<f64>>,
    /// Sample index of each projection argmin.
    pub indices: Vec<usize>,
}

/// Projects every source keypoint onto the demonstrated positions:
/// s̃ᵢ = argmin over x ∈ 𝒳 of ‖x − sᵢ‖. Ties break toward the lowest sample
/// index. Returns the projected set and the argmin indices.
pub fn project_sources(
    demo: &Demonstration,
    source: &KeypointSet,
) -> (KeypointSet, Vec<usize>) {
    let positions = demo.positions();
    let hits = parallel::map_slice(source.points(), |s| {
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (i, x) in positions.iter().enumerate() {
            let d2 = (x - s).norm_squared();
            if d2 < best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        best
    });
    let points = hits.iter().map(|&i| positions[i]).collect();
    (
        KeypointSet::new(points, KeypointLabel::Source).expect("projected set is non-empty"),
        hits,
    )
}

/// Δᵢ = s̃ᵢ − sᵢ.
pub fn compute_shifts(
    source: &KeypointSet,
    projected: &KeypointSet,
) -> Result<Vec<Vector3<f64>>, ProjectionError> {
    if source.len() != projected.len() {
        return Err(ProjectionError::CountMismatch {
            left: source.len(),
            right: projected.len(),
        });
    }
    Ok(source
        .points()
        .iter()
        .zip(projected.points())
        .map(|(s, p)| p - s)
        .collect())
}

/// t̃ᵢ = tᵢ + Δᵢ.
pub fn shift_targets(
    target: &KeypointSet,
    shifts: &[Vector3<f64>],
) -> Result<KeypointSet, ProjectionError> {
    if target.len() != shifts.len() {
        return Err(ProjectionError::CountMismatch {
            left: target.len(),
            right: shifts.len(),
        });
    }
    let points = target
        .points()
        .iter()
        .zip(shifts)
        .map(|(t, d)| t + d)
        .collect();
    Ok(KeypointSet::new(points, KeypointLabel::Target).expect("shifted set is non-empty"))
}

/// Composed projection: project sources, compute shifts, perturb targets.
/// The returned sets are the ones fed to [`crate::DeformationMap::fit`].
pub fn project_and_shift(
    demo: &Demonstration,
    source: &KeypointSet,
    target: &KeypointSet,
) -> Result<ProjectionResult, ProjectionError> {
    if source.len() != target.len() {
        return Err(ProjectionError::CountMismatch {
            left: source.len(),
            right: target.len(),
        });
    }
    let (projected_source, indices) = project_sources(demo, source);
    let shifts = compute_shifts(source, &projected_source)?;
    let shifted_target = shift_targets(target, &shifts)?;
    Ok(ProjectionResult {
        projected_source,
        shifted_target,
        shifts,
        indices,
    })
}
