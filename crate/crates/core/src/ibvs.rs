//! Classical image-based visual servo on projected target corners.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{pose_to_transform, transform_to_pose, CameraIntrinsics, Pose4, RigidTransform};
use crate::render::{Scene, TargetModel};

/// Relative singular-value cutoff for the pseudo-inverse.
pub const PINV_RELATIVE_TOLERANCE: f64 = 1e-10;

/// Default gain of the classical law.
pub const DEFAULT_CLASSIC_GAIN: f64 = 0.1;

/// Normalized image coordinates `[x0, y0, x1, y1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    points: Vec<f64>,
}

impl FeatureVector {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() % 2 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "feature vector has odd length {}",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch("feature vector has non-finite entries".into()));
        }
        Ok(FeatureVector { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point_count(&self) -> usize {
        self.points.len() / 2
    }

    pub fn point(&self, i: usize) -> (f64, f64) {
        (self.points[2 * i], self.points[2 * i + 1])
    }

    /// `self − desired`.
    pub fn error_from(&self, desired: &FeatureVector) -> Result<DVector<f64>> {
        if self.points.len() != desired.points.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} features against {} desired",
                self.points.len(),
                desired.points.len()
            )));
        }
        Ok(DVector::from_iterator(
            self.points.len(),
            self.points.iter().zip(&desired.points).map(|(a, b)| a - b),
        ))
    }
}

/// Normalized projection of a camera-frame point.
pub fn normalize_point(p: &Vector3<f64>) -> Result<(f64, f64)> {
    if !(p.z > 0.0) {
        return Err(Error::NonPositiveDepth { depth: p.z });
    }
    Ok((p.x / p.z, p.y / p.z))
}

/// Pixel coordinates to normalized coordinates.
pub fn pixel_to_normalized(k: &CameraIntrinsics, u: f64, v: f64) -> (f64, f64) {
    ((u - k.cx) / k.fx, (v - k.cy) / k.fy)
}

/// Target corners expressed in the camera frame, in corner order.
pub fn corners_in_camera(camera: &RigidTransform, target: &TargetModel) -> Vec<Vector3<f64>> {
    let to_camera = camera.inverse();
    target.corners_in_base().map(|p| to_camera.apply(&p)).collect()
}

/// Projected target corners as features, ordered by corner index.
pub fn extract_point_features(camera: &RigidTransform, target: &TargetModel) -> Result<FeatureVector> {
    let mut points = Vec::with_capacity(8);
    for p in corners_in_camera(camera, target) {
        let (x, y) = normalize_point(&p)?;
        points.extend([x, y]);
    }
    FeatureVector::new(points)
}

/// Ground-truth corner depths (camera-frame z), in corner order.
pub fn corner_depths(camera: &RigidTransform, target: &TargetModel) -> Vec<f64> {
    corners_in_camera(camera, target).iter().map(|p| p.z).collect()
}

/// Image-feature Jacobian with respect to camera velocity `(vx, vy, vz, wz)`
/// expressed in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    entries: DMatrix<f64>,
}

impl InteractionMatrix {
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        if entries.ncols() != 4 || entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch(format!(
                "interaction matrix must be finite with 4 columns, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(InteractionMatrix { entries })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }
}

pub fn interaction_matrix(features: &FeatureVector, depths: &[f64]) -> Result<InteractionMatrix> {
    if depths.len() != features.point_count() {
        return Err(Error::DepthCountMismatch(depths.len(), features.point_count()));
    }
    let mut m = DMatrix::zeros(features.points().len(), 4);
    for (i, &z) in depths.iter().enumerate() {
        if !(z > 0.0) {
            return Err(Error::NonPositiveDepth { depth: z });
        }
        let (x, y) = features.point(i);
        let r = 2 * i;
        m[(r, 0)] = -1.0 / z;
        m[(r, 2)] = x / z;
        m[(r, 3)] = y;
        m[(r + 1, 1)] = -1.0 / z;
        m[(r + 1, 2)] = y / z;
        m[(r + 1, 3)] = -x;
    }
    Ok(InteractionMatrix { entries: m })
}

/// Moore–Penrose pseudo-inverse through SVD; singular values below
/// `1e-10 · σ_max` count as zero.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    let (u, sigma, v) = jacobi_svd(m);
    let sigma_max = sigma.iter().copied().fold(0.0_f64, f64::max);
    let mut out = DMatrix::zeros(cols, rows);
    if !(sigma_max > 0.0) {
        return out;
    }
    let cutoff = PINV_RELATIVE_TOLERANCE * sigma_max;
    for (j, &s) in sigma.iter().enumerate() {
        if s > cutoff {
            out += v.column(j) * u.column(j).transpose() / s;
        }
    }
    out
}

/// One-sided Jacobi SVD, `m = U · diag(σ) · Vᵀ` with one singular value
/// per column of `m`. Columns of `U` for zero singular values are zero.
/// nalgebra's bidiagonal SVD loses accuracy on exactly rank-deficient
/// inputs, which the Penrose identities expose.
fn jacobi_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let n = m.ncols();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut a, &mut v] {
                    for r in 0..mat.nrows() {
                        let (x, y) = (mat[(r, p)], mat[(r, q)]);
                        mat[(r, p)] = c * x - s * y;
                        mat[(r, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut u = a;
    for (j, &s) in sigma.iter().enumerate() {
        if s > 0.0 {
            u.column_mut(j).unscale_mut(s);
        }
    }
    (u, sigma, v)
}

/// Camera twist for one control step: mm and radians, camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CameraVelocity4 {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub wz: f64,
}

impl CameraVelocity4 {
    pub fn to_array(&self) -> [f64; 4] {
        [self.vx, self.vy, self.vz, self.wz]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        CameraVelocity4 {
            vx: v[0],
            vy: v[1],
            vz: v[2],
            wz: v[3],
        }
    }
}

/// `v = −λ · L⁺ · e`.
pub fn classic_control_law(m: &InteractionMatrix, e: &DVector<f64>, lambda: f64) -> Result<CameraVelocity4> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!("gain must be positive, got {lambda}")));
    }
    if e.len() != m.rows() {
        return Err(Error::DimensionMismatch(format!(
            "error has {} entries, interaction matrix has {} rows",
            e.len(),
            m.rows()
        )));
    }
    let v = pseudo_inverse(&m.entries) * e * lambda;
    Ok(CameraVelocity4::from_array(std::array::from_fn(|i| 0.0 - v[i])))
}

/// Moves the camera by one Euler step of `velocity` (camera frame).
pub fn integrate_camera_velocity(camera: &RigidTransform, velocity: &CameraVelocity4) -> RigidTransform {
    let step = RigidTransform::from_z_rotation(
        velocity.wz.to_degrees(),
        Vector3::new(velocity.vx, velocity.vy, velocity.vz),
    );
    camera.compose(&step)
}

/// End-effector pose after the camera moves by `velocity`.
pub fn apply_camera_velocity(pose: &Pose4, mounting: &RigidTransform, velocity: &CameraVelocity4) -> Pose4 {
    let camera = pose_to_transform(pose, mounting);
    transform_to_pose(&integrate_camera_velocity(&camera, velocity), mounting)
}

/// Euclidean norm of the feature error measured in pixels.
pub fn feature_error_px(k: &CameraIntrinsics, e: &DVector<f64>) -> f64 {
    e.iter()
        .enumerate()
        .map(|(i, v)| {
            let f = if i % 2 == 0 { k.fx } else { k.fy };
            (v * f).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// One classical step from the current pose toward `desired` features,
/// using true depths.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicStep {
    pub velocity: CameraVelocity4,
    pub error: DVector<f64>,
    pub error_px: f64,
    pub next_pose: Pose4,
}

pub fn classic_step(scene: &Scene, pose: &Pose4, desired: &FeatureVector, lambda: f64) -> Result<ClassicStep> {
    let camera = scene.camera_pose(pose);
    let features = extract_point_features(&camera, &scene.target)?;
    let error = features.error_from(desired)?;
    let l = interaction_matrix(&features, &corner_depths(&camera, &scene.target))?;
    let velocity = classic_control_law(&l, &error, lambda)?;
    Ok(ClassicStep {
        error_px: feature_error_px(&scene.intrinsics, &error),
        next_pose: apply_camera_velocity(pose, &scene.mounting, &velocity),
        velocity,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_point(&Vector3::new(0.0, 0.0, 50.0)).unwrap(), (0.0, 0.0));
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap();
        let p = Vector3::new(20.0, 0.0, 200.0);
        let uv = crate::geometry::project_point(&k, &p).unwrap();
        let (x, y) = pixel_to_normalized(&k, uv.x, uv.y);
        assert!((x - 0.1).abs() < 1e-15 && y.abs() < 1e-15);
        assert_eq!(normalize_point(&p).unwrap(), (0.1, 0.0));
        assert!(matches!(
            normalize_point(&Vector3::new(1.0, 1.0, 0.0)),
            Err(Error::NonPositiveDepth { .. })
        ));
    }

    #[test]
    fn features_at_desired_give_zero_error() {
        let scene = Scene::default();
        let cam = scene.camera_pose(&Pose4::new(5.0, -3.0, 40.0, 12.0));
        let s = extract_point_features(&cam, &scene.target).unwrap();
        assert_eq!(s.point_count(), 4);
        assert!(s.error_from(&s).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn interaction_blocks() {
        let l = interaction_matrix(&fv(&[0.0, 0.0]), &[1.0]).unwrap();
        assert_eq!(
            l.entries(),
            &DMatrix::from_row_slice(2, 4, &[-1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0])
        );
        let l = interaction_matrix(&fv(&[0.1, 0.0]), &[200.0]).unwrap();
        let want = DMatrix::from_row_slice(2, 4, &[-0.005, 0.0, 0.0005, 0.0, 0.0, -0.005, 0.0, -0.1]);
        assert!((l.entries() - want).abs().max() < 1e-15);
    }

    #[test]
    fn interaction_errors() {
        assert!(matches!(
            interaction_matrix(&fv(&[0.0, 0.0, 1.0, 1.0]), &[1.0]),
            Err(Error::DepthCountMismatch(1, 2))
        ));
        assert!(matches!(
            interaction_matrix(&fv(&[0.0, 0.0]), &[0.0]),
            Err(Error::NonPositiveDepth { .. })
        ));
        assert!(FeatureVector::new(vec![0.0]).is_err());
    }

    #[test]
    fn depth_scaling_halves_translation_columns() {
        let s = fv(&[0.1, -0.2, 0.3, 0.05]);
        let a = interaction_matrix(&s, &[200.0, 300.0]).unwrap();
        let b = interaction_matrix(&s, &[400.0, 600.0]).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                assert!((b.entries()[(r, c)] - a.entries()[(r, c)] / 2.0).abs() < 1e-15);
            }
            assert_eq!(b.entries()[(r, 3)], a.entries()[(r, 3)]);
        }
    }

    #[test]
    fn pinv_trivial_cases() {
        let i = DMatrix::<f64>::identity(4, 4);
        assert!((pseudo_inverse(&i) - &i).abs().max() < 1e-15);
        let z = DMatrix::<f64>::zeros(8, 4);
        assert_eq!(pseudo_inverse(&z), DMatrix::<f64>::zeros(4, 8));
    }

    #[test]
    fn penrose_conditions_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..1000 {
            let rows = 2 * rng.gen_range(1..=5);
            let mut m = DMatrix::from_fn(rows, 4, |_, _| rng.gen_range(-2.0..2.0));
            if trial % 4 == 0 {
                // rank-deficient: duplicate a column
                let c = m.column(0).clone_owned();
                m.set_column(3, &c);
            }
            let p = pseudo_inverse(&m);
            let n = m.norm();
            assert!((&m * &p * &m - &m).norm() < 1e-8 * n);
            assert!((&p * &m * &p - &p).norm() < 1e-8 * p.norm());
        }
    }

    #[test]
    fn control_law_examples() {
        let mut m = DMatrix::zeros(8, 4);
        for i in 0..4 {
            m[(i, i)] = 1.0;
        }
        let m = InteractionMatrix::from_matrix(m).unwrap();
        let mut e = DVector::zeros(8);
        let v = classic_control_law(&m, &e, 0.5).unwrap();
        assert_eq!(v, CameraVelocity4::default());
        assert!(v.to_array().iter().all(|c| c.is_sign_positive()));
        e[0] = 0.1;
        let v = classic_control_law(&m, &e, 0.5).unwrap();
        assert!((v.vx + 0.05).abs() < 1e-15);
        assert_eq!([v.vy, v.vz, v.wz], [0.0; 3]);
        let e = DVector::from_fn(8, |i, _| (i as f64 - 3.0) * 0.01);
        let a = classic_control_law(&m, &e, 0.1).unwrap().to_array();
        let b = classic_control_law(&m, &e, 0.2).unwrap().to_array();
        for i in 0..4 {
            assert!((b[i] - 2.0 * a[i]).abs() < 1e-15);
        }
        assert!(matches!(
            classic_control_law(&m, &DVector::zeros(6), 0.1),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(classic_control_law(&m, &DVector::zeros(8), 0.0).is_err());
    }

    #[test]
    fn pixel_error_norm() {
        let k = CameraIntrinsics::new(100.0, 50.0, 32.0, 32.0, 64, 64).unwrap();
        let e = DVector::from_vec(vec![0.03, 0.08]);
        assert!((feature_error_px(&k, &e) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_velocity_keeps_pose() {
        let scene = Scene::default();
        let p = Pose4::new(10.0, -20.0, 50.0, 33.0);
        let q = apply_camera_velocity(&p, &scene.mounting, &CameraVelocity4::default());
        for (a, b) in q.to_array().iter().zip(p.to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn analytic_matches_finite_difference(
            x in -60.0..60.0f64, y in -60.0..60.0f64, z in 0.0..150.0f64, rz in -45.0..45.0f64,
        ) {
            let scene = Scene::default();
            let cam = scene.camera_pose(&Pose4::new(x, y, z, rz));
            let s = extract_point_features(&cam, &scene.target).unwrap();
            let l = interaction_matrix(&s, &corner_depths(&cam, &scene.target)).unwrap();
            let h = 1e-4;
            for j in 0..4 {
                let mut d = [0.0; 4];
                d[j] = h;
                let plus = extract_point_features(&integrate_camera_velocity(&cam, &CameraVelocity4::from_array(d)), &scene.target).unwrap();
                d[j] = -h;
                let minus = extract_point_features(&integrate_camera_velocity(&cam, &CameraVelocity4::from_array(d)), &scene.target).unwrap();
                let col = plus.error_from(&minus).unwrap() / (2.0 * h);
                let analytic = l.entries().column(j);
                let rel = (&col - analytic).norm() / analytic.norm().max(1e-12);
                prop_assert!(rel < 1e-3, "column {} rel err {}", j, rel);
            }
        }
    }
}
