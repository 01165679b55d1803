//! Semantic Gaussian primitives and additive splatting onto voxel grids.

use crate::error::{Error, Result};
use crate::grid::{GridSpec, SemanticVolume};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

/// Scales below this are clamped at construction.
pub const MIN_SCALE: f64 = 1e-4;
/// Default culling radius in Mahalanobis units.
pub const DEFAULT_CUTOFF: f64 = 3.0;

/// Rotation matrix of the quaternion `(w, x, y, z)` after normalization.
pub fn quat_to_rotation(q: [f64; 4]) -> Result<Matrix3<f64>> {
    let n = quat_norm(q);
    if !(n > 1e-12) {
        return Err(Error::invalid(format!("quaternion {q:?} has (near) zero norm")));
    }
    Ok(rotation_from_unit([q[0] / n, q[1] / n, q[2] / n, q[3] / n]))
}

#[inline]
pub(crate) fn quat_norm(q: [f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of a quaternion already known to be unit-norm.
#[inline]
pub(crate) fn rotation_from_unit(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. the rotation matrix back to the (unit)
/// quaternion components of [`rotation_from_unit`].
pub(crate) fn rotation_vjp(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Symmetric positive-definite 3x3 covariance `R S Sᵀ Rᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

impl Covariance3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

pub fn build_covariance(scale: [f64; 3], rotation: [f64; 4]) -> Result<Covariance3> {
    if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!("scale {scale:?} must be positive")));
    }
    let r = quat_to_rotation(rotation)?;
    let s = Matrix3::from_diagonal(&Vector3::from(scale));
    let m = r * s * s.transpose() * r.transpose();
    // Symmetrize away roundoff.
    Ok(Covariance3((m + m.transpose()) * 0.5))
}

/// One anisotropic Gaussian carrying class coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGaussian {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub semantics: Vec<f64>,
}

impl SemanticGaussian {
    /// Validates and normalizes. Scales below [`MIN_SCALE`] are clamped;
    /// non-positive scales are rejected.
    pub fn new(mean: [f64; 3], scale: [f64; 3], rotation: [f64; 4], opacity: f64, semantics: Vec<f64>) -> Result<Self> {
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("gaussian mean must be finite"));
        }
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("scale {scale:?} must be positive and finite")));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::invalid(format!("opacity {opacity} outside [0, 1]")));
        }
        if semantics.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("gaussian semantics must be finite"));
        }
        let n = quat_norm(rotation);
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::invalid(format!("rotation {rotation:?} has (near) zero norm")));
        }
        Ok(Self {
            mean,
            scale: scale.map(|s| s.max(MIN_SCALE)),
            rotation: rotation.map(|c| c / n),
            opacity,
            semantics,
        })
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_from_unit(self.rotation)
    }

    pub fn covariance(&self) -> Covariance3 {
        build_covariance(self.scale, self.rotation).expect("validated at construction")
    }

    pub(crate) fn kernel(&self) -> Kernel {
        Kernel::new(self.mean, self.scale, self.rotation_matrix(), self.opacity)
    }
}

/// Precomputed geometry for fast evaluation: the exponent is
/// `-1/2 |diag(1/s) Rᵀ (x - m)|²`, which avoids inverting the covariance.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Kernel {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub inv_scale: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub opacity: f64,
}

impl Kernel {
    pub fn new(mean: [f64; 3], scale: [f64; 3], rotation: Matrix3<f64>, opacity: f64) -> Self {
        let scale = Vector3::from(scale);
        Self {
            mean: Vector3::from(mean),
            inv_scale: scale.map(|s| 1.0 / s),
            scale,
            rotation,
            opacity,
        }
    }

    /// Whitened offset `z = diag(1/s) Rᵀ d` for `d = x - m`.
    #[inline]
    pub fn whiten(&self, d: &Vector3<f64>) -> Vector3<f64> {
        (self.rotation.transpose() * d).component_mul(&self.inv_scale)
    }

    /// Inclusive voxel index box containing every voxel center whose
    /// Mahalanobis distance is within `cutoff`; `None` if the box misses
    /// the grid.
    pub fn voxel_box(&self, grid: &GridSpec, cutoff: f64) -> Option<[(usize, usize); 3]> {
        let mut out = [(0, 0); 3];
        for axis in 0..3 {
            // sqrt(Σ_aa) = |row a of R·S|
            let half = if cutoff.is_finite() {
                let row = self.rotation.row(axis);
                let var: f64 = (0..3).map(|c| (row[c] * self.scale[c]).powi(2)).sum();
                cutoff * var.sqrt()
            } else {
                f64::INFINITY
            };
            out[axis] = grid.index_range(axis, self.mean[axis] - half, self.mean[axis] + half)?;
        }
        Some(out)
    }
}

/// Contribution `α exp(-1/2 dᵀ Σ⁻¹ d) c` of one Gaussian at `x`.
pub fn eval_gaussian(g: &SemanticGaussian, x: [f64; 3]) -> Vec<f64> {
    let k = g.kernel();
    let z = k.whiten(&(Vector3::from(x) - k.mean));
    let w = g.opacity * (-0.5 * z.norm_squared()).exp();
    g.semantics.iter().map(|c| w * c).collect()
}

/// Sums every Gaussian's contribution at every voxel center. Gaussians
/// whose Mahalanobis distance to a center exceeds `cutoff` contribute
/// nothing there; `f64::INFINITY` disables culling.
///
/// Each voxel accumulates in Gaussian-list order, so the result is
/// bitwise independent of the thread count.
pub fn splat(gaussians: &[SemanticGaussian], grid: &GridSpec, channels: usize, cutoff: f64) -> Result<SemanticVolume> {
    check_cutoff(cutoff)?;
    if channels == 0 {
        return Err(Error::invalid("splat needs at least one channel"));
    }
    if let Some(g) = gaussians.iter().find(|g| g.semantics.len() != channels) {
        return Err(Error::invalid(format!(
            "gaussian has {} semantic channels, expected {channels}",
            g.semantics.len()
        )));
    }
    let kernels: Vec<_> = gaussians.iter().map(|g| g.kernel()).collect();
    let boxes: Vec<_> = kernels.iter().map(|k| k.voxel_box(grid, cutoff)).collect();
    let cutoff_sq = cutoff * cutoff;

    let mut volume = SemanticVolume::zeros(*grid, channels);
    let slab = grid.dims[1] * grid.dims[2] * channels;
    volume
        .as_mut_slice()
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(i, out)| {
            for (g, (kernel, bbox)) in gaussians.iter().zip(kernels.iter().zip(&boxes)) {
                let Some(b) = bbox else { continue };
                if i < b[0].0 || i > b[0].1 {
                    continue;
                }
                for j in b[1].0..=b[1].1 {
                    for k in b[2].0..=b[2].1 {
                        let d = grid.voxel_center(i, j, k) - kernel.mean;
                        let m2 = kernel.whiten(&d).norm_squared();
                        if m2 > cutoff_sq {
                            continue;
                        }
                        let w = kernel.opacity * (-0.5 * m2).exp();
                        let base = (j * grid.dims[2] + k) * channels;
                        for (o, c) in out[base..base + channels].iter_mut().zip(&g.semantics) {
                            *o += w * c;
                        }
                    }
                }
            }
        });
    Ok(volume)
}

pub(crate) fn check_cutoff(cutoff: f64) -> Result<()> {
    if !(cutoff > 0.0) {
        return Err(Error::invalid(format!("cutoff must be positive, got {cutoff}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
        [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]
    }

    #[test]
    fn identity_and_half_turn_quaternions() {
        let r = quat_to_rotation([1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r, Matrix3::identity());
        let r = quat_to_rotation([0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(r, Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)));
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(matches!(quat_to_rotation([0.0; 4]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn random_rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let r = quat_to_rotation(random_quat(&mut rng)).unwrap();
            let rtr = r.transpose() * r;
            assert!((rtr - Matrix3::identity()).abs().max() < 1e-10);
            assert!((r.determinant() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rotation_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = {
            let q = random_quat(&mut rng);
            let n = quat_norm(q);
            q.map(|c| c / n)
        };
        let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let analytic = rotation_vjp(q, &g);
        let h = 1e-6;
        for c in 0..4 {
            let (mut qp, mut qm) = (q, q);
            qp[c] += h;
            qm[c] -= h;
            let f = |q| rotation_from_unit(q).component_mul(&g).sum();
            let numeric = (f(qp) - f(qm)) / (2.0 * h);
            assert!((numeric - analytic[c]).abs() < 1e-8, "component {c}");
        }
    }

    #[test]
    fn covariance_simple_cases() {
        let c = build_covariance([1.0, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(c.0, Matrix3::identity());
        let c = build_covariance([2.0, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(c.0, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
        assert!(build_covariance([1.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(build_covariance([1.0, -1.0, 1.0], [1.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn covariance_quarter_turn_about_z() {
        // Oracle: explicit product with R = [[0,-1,0],[1,0,0],[0,0,1]].
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = build_covariance([1.0, 2.0, 0.5], [h, 0.0, 0.0, h]).unwrap();
        let r = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let s2 = [1.0, 4.0, 0.25];
        for a in 0..3 {
            for b in 0..3 {
                let mut expected = 0.0;
                for k in 0..3 {
                    expected += r[a][k] * s2[k] * r[b][k];
                }
                assert!((c.0[(a, b)] - expected).abs() < 1e-12, "({a},{b})");
            }
        }
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = [
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
                rng.random_range(0.1..3.0),
            ];
            let c = build_covariance(s, random_quat(&mut rng)).unwrap();
            assert!((c.0 - c.0.transpose()).abs().max() < 1e-12);
            let mut eig: Vec<f64> = c.0.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            want.sort_by(f64::total_cmp);
            for (e, w) in eig.iter().zip(&want) {
                assert!(*e > 0.0);
                assert!((e - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn construction_normalizes_and_clamps() {
        let g = SemanticGaussian::new([0.0; 3], [1e-7, 1.0, 2.0], [2.0, 0.0, 0.0, 0.0], 0.5, vec![1.0]).unwrap();
        assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.scale[0], MIN_SCALE);
        assert!(SemanticGaussian::new([0.0; 3], [1.0; 3], [1.0, 0.0, 0.0, 0.0], 1.5, vec![]).is_err());
        assert!(SemanticGaussian::new([0.0; 3], [0.0, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0], 0.5, vec![]).is_err());
    }

    #[test]
    fn eval_at_mean_and_zero_opacity() {
        let g = SemanticGaussian::new(
            [1.0, 2.0, 3.0],
            [0.3, 0.5, 0.7],
            [0.3, 0.1, -0.4, 0.2],
            1.0,
            vec![0.0, 1.0, 0.0],
        )
        .unwrap();
        assert_eq!(eval_gaussian(&g, g.mean), vec![0.0, 1.0, 0.0]);
        let g0 = SemanticGaussian { opacity: 0.0, ..g };
        assert_eq!(eval_gaussian(&g0, [0.3, 0.2, 0.1]), vec![0.0; 3]);
    }

    #[test]
    fn eval_matches_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g = SemanticGaussian::new(
                [rng.random(), rng.random(), rng.random()],
                [
                    rng.random_range(0.2..1.5),
                    rng.random_range(0.2..1.5),
                    rng.random_range(0.2..1.5),
                ],
                random_quat(&mut rng),
                rng.random(),
                vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            )
            .unwrap();
            let x = [
                rng.random_range(-1.0..2.0),
                rng.random_range(-1.0..2.0),
                rng.random_range(-1.0..2.0),
            ];
            // Oracle: solve Σ y = d with a dense LU and form dᵀy.
            let d = Vector3::from(x) - Vector3::from(g.mean);
            let y = g.covariance().0.lu().solve(&d).unwrap();
            let w = g.opacity * (-0.5 * d.dot(&y)).exp();
            let got = eval_gaussian(&g, x);
            for (o, c) in got.iter().zip(&g.semantics) {
                assert!((o - w * c).abs() < 1e-12);
            }
            let norm: f64 = got.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cn: f64 = g.semantics.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= g.opacity * cn + 1e-15);
        }
    }

    #[test]
    fn decay_along_eigenvector() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let g = SemanticGaussian::new([0.0; 3], [0.5, 1.5, 0.8], [h, 0.0, h, 0.0], 0.9, vec![1.0]).unwrap();
        let r = g.rotation_matrix();
        for axis in 0..3 {
            let e = r.column(axis).into_owned();
            let s = g.scale[axis];
            for d in [0.1, 0.7, 1.9] {
                let x = e * d;
                let v = eval_gaussian(&g, [x.x, x.y, x.z])[0] / g.opacity;
                let want = (-d * d / (2.0 * s * s)).exp();
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn splat_empty_list_is_zero() {
        let grid = GridSpec::new([3, 3, 3], 1.0, [0.0; 3]).unwrap();
        let v = splat(&[], &grid, 2, DEFAULT_CUTOFF).unwrap();
        assert!(v.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn splat_single_gaussian_on_center() {
        let grid = GridSpec::new([4, 4, 4], 0.5, [0.0; 3]).unwrap();
        let c = grid.voxel_center(1, 2, 3);
        let g = SemanticGaussian::new([c.x, c.y, c.z], [0.2; 3], [1.0, 0.0, 0.0, 0.0], 0.7, vec![1.0, -2.0]).unwrap();
        let v = splat(std::slice::from_ref(&g), &grid, 2, DEFAULT_CUTOFF).unwrap();
        assert_eq!(v.at(1, 2, 3), &[0.7, -1.4]);
        let twice = splat(&[g.clone(), g], &grid, 2, DEFAULT_CUTOFF).unwrap();
        for (a, b) in twice.as_slice().iter().zip(v.as_slice()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn splat_rejects_bad_args() {
        let grid = GridSpec::new([2, 2, 2], 1.0, [0.0; 3]).unwrap();
        let g = SemanticGaussian::new([0.0; 3], [1.0; 3], [1.0, 0.0, 0.0, 0.0], 0.5, vec![1.0]).unwrap();
        assert!(splat(std::slice::from_ref(&g), &grid, 1, 0.0).is_err());
        assert!(splat(&[g], &grid, 2, 3.0).is_err());
    }

    #[test]
    fn cutoff_zeroes_far_voxels_only() {
        let grid = GridSpec::new([9, 1, 1], 1.0, [0.0; 3]).unwrap();
        let g = SemanticGaussian::new([4.5, 0.5, 0.5], [1.0; 3], [1.0, 0.0, 0.0, 0.0], 1.0, vec![1.0]).unwrap();
        let v = splat(&[g], &grid, 1, 2.5).unwrap();
        for i in 0..9 {
            let d = (i as f64 - 4.0).abs();
            let want = if d > 2.5 { 0.0 } else { (-0.5 * d * d).exp() };
            assert_eq!(v.at(i, 0, 0)[0], want);
        }
    }
}
