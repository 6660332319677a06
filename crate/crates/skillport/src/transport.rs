//! Deformation-map fitting and trajectory transport.
//!
//! Given registered source and target keypoint sets, [`DeformationMap::fit`]
//! finds a map φ of the workspace onto itself with φ(sᵢ) = tᵢ. Recorded
//! positions are transported through the map itself; orientations are
//! premultiplied by the polar factor of its Jacobian so they stay in SO(3);
//! servo labels are body-frame quantities and pass through unchanged.
//!
//! The map family is a 3-D polyharmonic kernel expansion with a full affine
//! term: φ(q) = A·q + b + Σᵢ wᵢ·‖q − sᵢ‖. This gives exact affine
//! reproduction (so purely rigid keypoint motions transport rigidly), exact
//! interpolation for well-conditioned sets, and a closed-form Jacobian
//! J(q) = A + Σᵢ wᵢ·(q − sᵢ)ᵀ/‖q − sᵢ‖.

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::demonstration::{DemoError, Demonstration, TransportedDemonstration};
use crate::geometry::{polar_rotation, GeometryError, Rotation};
use crate::parallel;

/// Default ridge on the kernel weights, exposed as a CLI flag. Keeps the fit
/// solvable for near-coplanar and projection-duplicated keypoint sets.
pub const LAMBDA_DEFAULT: f64 = 1e-10;

/// Keypoints closer than this are treated as duplicates.
pub const DISTINCT_TOL: f64 = 1e-9;

/// Condition-number ceiling for the fitted system.
pub const CONDITION_LIMIT: f64 = 1e14;

/// Ridge used by the small-N affine fallback fits.
const AFFINE_RIDGE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("CountMismatch: {sources} source keypoints vs {targets} target keypoints")]
    CountMismatch { sources: usize, targets: usize },
    #[error("DegenerateSystem: {reason}")]
    DegenerateSystem { reason: String },
    #[error("SingularJacobian at sample {sample}: |det J| = {det:.3e}")]
    SingularJacobian { sample: usize, det: f64 },
    #[error("InvalidParameter: {0}")]
    InvalidParameter(String),
    #[error("transported demonstration failed validation: {0}")]
    InvalidResult(#[from] DemoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypointLabel {
    Source,
    Target,
}

/// Ordered set of registered 3-D keypoints; index i corresponds across the
/// source and target sets.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: Vec<Vector3<f64>>,
    label: KeypointLabel,
}

impl KeypointSet {
    pub fn new(
        points: Vec<Vector3<f64>>,
        label: KeypointLabel,
    ) -> Result<Self, TransportError> {
        if points.is_empty() {
            return Err(TransportError::InvalidParameter(
                "keypoint set must hold at least one point".into(),
            ));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(TransportError::InvalidParameter(format!(
                "keypoint {i} is not finite"
            )));
        }
        Ok(KeypointSet { points, label })
    }

    pub fn source(points: Vec<Vector3<f64>>) -> Result<Self, TransportError> {
        Self::new(points, KeypointLabel::Source)
    }

    pub fn target(points: Vec<Vector3<f64>>) -> Result<Self, TransportError> {
        Self::new(points, KeypointLabel::Target)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn label(&self) -> KeypointLabel {
        self.label
    }

    /// True when any two points coincide within [`DISTINCT_TOL`]. Duplicate
    /// sets arise when two keypoints project onto the same trajectory sample;
    /// fitting then needs a positive ridge.
    pub fn has_duplicates(&self) -> bool {
        for i in 0..self.points.len() {
            for j in i + 1..self.points.len() {
                if (self.points[i] - self.points[j]).norm() <= DISTINCT_TOL {
                    return true;
                }
            }
        }
        false
    }
}

/// Fitted deformation map φ: ℝ³ → ℝ³ with evaluable Jacobian.
#[derive(Debug, Clone)]
pub struct DeformationMap {
    affine: Matrix3<f64>,
    offset: Vector3<f64>,
    centers: Vec<Vector3<f64>>,
    weights: Vec<Vector3<f64>>,
    lambda: f64,
}

impl DeformationMap {
    /// Fits φ so that φ(sᵢ) = tᵢ for every registered pair.
    ///
    /// N ≥ 4 non-coplanar solves the full kernel system with affine side
    /// conditions (weights orthogonal to the affine function space). Below
    /// four points that system is underdetermined, so: N = 1 is a pure
    /// translation; N = 2 and N = 3 fit a minimal-deviation-from-identity
    /// affine map by ridge least squares and absorb the leftover residual
    /// into kernel terms. Sets whose bordered system degenerates anyway
    /// (duplicated or coplanar keypoints) fall back to the same detrended
    /// construction; only a kernel matrix that stays ill-conditioned past
    /// the λ-ridge is an error.
    pub fn fit(
        source: &KeypointSet,
        target: &KeypointSet,
        lambda: f64,
    ) -> Result<Self, TransportError> {
        if source.len() != target.len() {
            return Err(TransportError::CountMismatch {
                sources: source.len(),
                targets: target.len(),
            });
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(TransportError::InvalidParameter(format!(
                "regularization must be finite and non-negative, got {lambda}"
            )));
        }
        let duplicates = source.has_duplicates();
        if duplicates && lambda == 0.0 {
            return Err(TransportError::DegenerateSystem {
                reason: "duplicate source keypoints with zero regularization".into(),
            });
        }

        let s = source.points();
        let t = target.points();
        let n = s.len();

        // Duplicated centers make the affine side conditions rank-deficient,
        // so such sets take the detrended path for any N. The same fallback
        // catches coplanar/collinear sets of four or more points, whose
        // bordered system is singular no matter the ridge.
        let map = match n {
            1 => DeformationMap {
                affine: Matrix3::identity(),
                offset: t[0] - s[0],
                centers: s.to_vec(),
                weights: vec![Vector3::zeros()],
                lambda,
            },
            _ if n <= 3 || duplicates => Self::fit_detrended(s, t, lambda)?,
            _ => match Self::fit_full(s, t, lambda) {
                Ok(map) => map,
                Err(TransportError::DegenerateSystem { .. }) => {
                    Self::fit_detrended(s, t, lambda)?
                }
                Err(other) => return Err(other),
            },
        };

        // Interpolation contract: exact up to solver tolerance for λ = 0,
        // degrading gracefully with the ridge.
        let weight_norm: f64 = map
            .weights
            .iter()
            .map(|w| w.norm_squared())
            .sum::<f64>()
            .sqrt();
        let allowed = (10.0 * lambda * weight_norm).max(1e-9);
        for i in 0..n {
            let residual = (map.evaluate(&s[i]) - t[i]).norm();
            if residual > allowed {
                return Err(TransportError::DegenerateSystem {
                    reason: format!(
                        "interpolation residual {residual:.3e} at keypoint {i} exceeds {allowed:.3e}"
                    ),
                });
            }
        }
        Ok(map)
    }

    /// Minimal-norm affine deviation from the identity, centered on the
    /// keypoint means, plus kernel terms on the residual. For N = 2 this maps
    /// the source segment onto the target segment and leaves the orthogonal
    /// complement untouched; translations reproduce exactly for any N.
    fn fit_detrended(
        s: &[Vector3<f64>],
        t: &[Vector3<f64>],
        lambda: f64,
    ) -> Result<DeformationMap, TransportError> {
        let n = s.len();
        let s_mean: Vector3<f64> = s.iter().sum::<Vector3<f64>>() / n as f64;
        let t_mean: Vector3<f64> = t.iter().sum::<Vector3<f64>>() / n as f64;

        let mut cct = Matrix3::zeros();
        let mut dct = Matrix3::zeros();
        for i in 0..n {
            let c = s[i] - s_mean;
            let d = (t[i] - t_mean) - c;
            cct += c * c.transpose();
            dct += d * c.transpose();
        }
        let gram = cct + Matrix3::identity() * AFFINE_RIDGE;
        let inv = gram.try_inverse().ok_or_else(|| TransportError::DegenerateSystem {
            reason: "affine normal equations are singular".into(),
        })?;
        let affine = Matrix3::identity() + dct * inv;
        let offset = t_mean - affine * s_mean;

        // Kernel terms soak up whatever the ridge left behind.
        let mut kernel = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                kernel[(i, j)] = (s[i] - s[j]).norm();
            }
            kernel[(i, i)] += lambda;
        }
        check_condition(&kernel)?;
        let mut rhs = DMatrix::zeros(n, 3);
        for i in 0..n {
            let r = t[i] - (affine * s[i] + offset);
            for d in 0..3 {
                rhs[(i, d)] = r[d];
            }
        }
        let sol = kernel
            .lu()
            .solve(&rhs)
            .ok_or_else(|| TransportError::DegenerateSystem {
                reason: "kernel system is singular".into(),
            })?;
        let weights = (0..n)
            .map(|i| Vector3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]))
            .collect();

        Ok(DeformationMap {
            affine,
            offset,
            centers: s.to_vec(),
            weights,
            lambda,
        })
    }

    /// Full interpolation system for N ≥ 4: kernel block with λ-ridge,
    /// bordered by the affine polynomial basis so the weights stay orthogonal
    /// to the affine function space.
    fn fit_full(
        s: &[Vector3<f64>],
        t: &[Vector3<f64>],
        lambda: f64,
    ) -> Result<DeformationMap, TransportError> {
        let n = s.len();
        let dim = n + 4;
        let mut m = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = (s[i] - s[j]).norm();
            }
            m[(i, i)] += lambda;
            m[(i, n)] = 1.0;
            m[(n, i)] = 1.0;
            for d in 0..3 {
                m[(i, n + 1 + d)] = s[i][d];
                m[(n + 1 + d, i)] = s[i][d];
            }
        }
        check_condition(&m)?;

        let mut rhs = DMatrix::zeros(dim, 3);
        for i in 0..n {
            for d in 0..3 {
                rhs[(i, d)] = t[i][d];
            }
        }
        let sol = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| TransportError::DegenerateSystem {
                reason: "interpolation system is singular".into(),
            })?;

        let weights = (0..n)
            .map(|i| Vector3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]))
            .collect();
        let offset = Vector3::new(sol[(n, 0)], sol[(n, 1)], sol[(n, 2)]);
        let mut affine = Matrix3::zeros();
        for d in 0..3 {
            for j in 0..3 {
                affine[(d, j)] = sol[(n + 1 + j, d)];
            }
        }
        Ok(DeformationMap {
            affine,
            offset,
            centers: s.to_vec(),
            weights,
            lambda,
        })
    }

    /// φ(q).
    pub fn evaluate(&self, q: &Vector3<f64>) -> Vector3<f64> {
        let mut out = self.affine * q + self.offset;
        for (center, weight) in self.centers.iter().zip(&self.weights) {
            out += weight * (q - center).norm();
        }
        out
    }

    /// Analytic Jacobian J(q) = A + Σᵢ wᵢ·(q − sᵢ)ᵀ/‖q − sᵢ‖.
    ///
    /// Exactly at a kernel center the kernel gradient is undefined; that
    /// term is skipped (subgradient choice 0).
    pub fn jacobian(&self, q: &Vector3<f64>) -> Matrix3<f64> {
        let mut jac = self.affine;
        for (center, weight) in self.centers.iter().zip(&self.weights) {
            let diff = q - center;
            let r = diff.norm();
            if r == 0.0 {
                continue;
            }
            jac += weight * (diff / r).transpose();
        }
        jac
    }

    /// Transported Cartesian trajectory: x̂ᵢ = φ(xᵢ).
    pub fn transport_positions(&self, demo: &Demonstration) -> Vec<Vector3<f64>> {
        parallel::map_slice(demo.positions(), |x| self.evaluate(x))
    }

    /// Transported orientations: R̂ᵢ = J⊥(xᵢ)·Rᵢ with J⊥ the polar factor of
    /// the Jacobian at the original sample position.
    pub fn transport_orientations(
        &self,
        demo: &Demonstration,
    ) -> Result<Vec<Rotation>, TransportError> {
        let per_sample = parallel::map_indices(demo.len(), |i| {
            polar_rotation(&self.jacobian(&demo.positions()[i]))
                .map(|perp| perp * demo.orientations()[i])
                .map_err(|e| match e {
                    GeometryError::SingularJacobian { det } => {
                        TransportError::SingularJacobian { sample: i, det }
                    }
                    GeometryError::NotARotation { defect } => TransportError::DegenerateSystem {
                        reason: format!("polar factor defect {defect:.3e} at sample {i}"),
                    },
                })
        });
        // Sequential scan keeps the reported failure index deterministic.
        per_sample.into_iter().collect()
    }

    /// Full label transport: positions through the map, orientations through
    /// the polar factor, servo labels and sample period unchanged.
    pub fn transport_demonstration(
        &self,
        demo: &Demonstration,
    ) -> Result<TransportedDemonstration, TransportError> {
        let positions = self.transport_positions(demo);
        let orientations = self.transport_orientations(demo)?;
        Ok(TransportedDemonstration::from_parts(
            positions,
            orientations,
            demo.servos().to_vec(),
            demo.sample_period(),
        )?)
    }

    pub fn affine(&self) -> &Matrix3<f64> {
        &self.affine
    }

    pub fn offset(&self) -> &Vector3<f64> {
        &self.offset
    }

    pub fn centers(&self) -> &[Vector3<f64>] {
        &self.centers
    }

    pub fn weights(&self) -> &[Vector3<f64>] {
        &self.weights
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[cfg(test)]
    pub(crate) fn from_parts_for_tests(
        affine: Matrix3<f64>,
        offset: Vector3<f64>,
        centers: Vec<Vector3<f64>>,
        weights: Vec<Vector3<f64>>,
    ) -> Self {
        DeformationMap {
            affine,
            offset,
            centers,
            weights,
            lambda: 0.0,
        }
    }
}

/// Keypoint file: `{"points": [[x,y,z],...]}` in meters; the order defines
/// the registration with the paired set.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointFile {
    points: Vec<[f64; 3]>,
}

pub fn load_keypoints(
    path: impl AsRef<std::path::Path>,
    label: KeypointLabel,
) -> Result<KeypointSet, std::io::Error> {
    let file = std::fs::File::open(path)?;
    let raw: KeypointFile = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    KeypointSet::new(raw.points.iter().map(|p| Vector3::from(*p)).collect(), label)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

pub fn save_keypoints(
    set: &KeypointSet,
    path: impl AsRef<std::path::Path>,
) -> Result<(), std::io::Error> {
    let raw = KeypointFile {
        points: set.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &raw)?;
    Ok(())
}

fn check_condition(m: &DMatrix<f64>) -> Result<(), TransportError> {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if cond > CONDITION_LIMIT {
        return Err(TransportError::DegenerateSystem {
            reason: format!("system condition number {cond:.3e} exceeds {CONDITION_LIMIT:.0e}"),
        });
    }
    Ok(())
}
