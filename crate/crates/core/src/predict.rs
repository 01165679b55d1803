//! The two prediction branches and their fusion.
//!
//! The Gaussian branch splats direction-dependent semantics: each Gaussian
//! is queried with the unit direction from its mean to the voxel center
//! (degree 0 only when the two coincide).

use crate::error::{Error, Result};
use crate::gaussian::{check_cutoff, Kernel, SemanticGaussian};
use crate::grid::{FeatureVolume, GridSpec, SemanticVolume};
use crate::harmonics::{basis_into, basis_with_grad, combine, num_basis, ShField, Y00};
use crate::scene::LinearHead;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

/// Logit added to the empty channel of the Gaussian branch by default.
pub const DEFAULT_EMPTY_BIAS: f64 = 2.0;
const COINCIDENT: f64 = 1e-9;

/// Per-voxel affine map from fused features to class logits.
pub fn voxel_head(fused: &FeatureVolume, head: &LinearHead) -> Result<SemanticVolume> {
    if head.inputs != fused.channels() {
        return Err(Error::invalid(format!(
            "voxel head expects {} features, volume has {}",
            head.inputs,
            fused.channels()
        )));
    }
    let c = fused.channels();
    let n = head.outputs;
    let mut out = SemanticVolume::zeros(*fused.spec(), n);
    let slab = fused.dims()[1] * fused.dims()[2];
    out.as_mut_slice()
        .par_chunks_mut(slab * n)
        .zip(fused.as_slice().par_chunks(slab * c))
        .for_each(|(o, f)| {
            for (ov, fv) in o.chunks_exact_mut(n).zip(f.chunks_exact(c)) {
                head.apply_into(fv, ov);
            }
        });
    Ok(out)
}

/// Elementwise logit sum of the two branches.
pub fn fuse(v_voxel: &SemanticVolume, v_gauss: &SemanticVolume) -> Result<SemanticVolume> {
    if !v_voxel.same_shape(v_gauss) {
        return Err(Error::invalid(format!(
            "fuse: shapes {:?}x{} and {:?}x{} differ",
            v_voxel.dims(),
            v_voxel.channels(),
            v_gauss.dims(),
            v_gauss.channels()
        )));
    }
    let data = v_voxel
        .as_slice()
        .iter()
        .zip(v_gauss.as_slice())
        .map(|(a, b)| a + b)
        .collect();
    SemanticVolume::from_vec(*v_voxel.spec(), v_voxel.channels(), data)
}

struct Prepared {
    kernels: Vec<Kernel>,
    boxes: Vec<Option<[(usize, usize); 3]>>,
}

fn prepare(gaussians: &[SemanticGaussian], field: &ShField, grid: &GridSpec, cutoff: f64) -> Result<Prepared> {
    check_cutoff(cutoff)?;
    if field.len() != gaussians.len() {
        return Err(Error::invalid(format!(
            "{} gaussians but {} SH coefficient sets",
            gaussians.len(),
            field.len()
        )));
    }
    let kernels: Vec<_> = gaussians.iter().map(|g| g.kernel()).collect();
    let boxes = kernels.iter().map(|k| k.voxel_box(grid, cutoff)).collect();
    Ok(Prepared { kernels, boxes })
}

/// Splats SH semantics: voxel `x` receives
/// `Σ_i α_i exp(-1/2 |z_i|²) S_i(dir_i(x))`, then `empty_bias` is added
/// to channel 0 everywhere.
pub fn gauss_predict(
    gaussians: &[SemanticGaussian],
    field: &ShField,
    grid: &GridSpec,
    cutoff: f64,
    empty_bias: f64,
) -> Result<SemanticVolume> {
    let prep = prepare(gaussians, field, grid, cutoff)?;
    let nc = field.channels();
    let degree = field.degree();
    let nb = num_basis(degree);
    let cutoff_sq = cutoff * cutoff;
    let mut volume = SemanticVolume::zeros(*grid, nc);
    let slab = grid.dims[1] * grid.dims[2] * nc;

    volume
        .as_mut_slice()
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(i, out)| {
            let mut basis = vec![0.0; nb];
            let mut sem = vec![0.0; nc];
            for (g, (kernel, bbox)) in prep.kernels.iter().zip(&prep.boxes).enumerate() {
                let Some(b) = bbox else { continue };
                if i < b[0].0 || i > b[0].1 {
                    continue;
                }
                let coeffs = field.gaussian(g);
                for j in b[1].0..=b[1].1 {
                    for k in b[2].0..=b[2].1 {
                        let d = grid.voxel_center(i, j, k) - kernel.mean;
                        let m2 = kernel.whiten(&d).norm_squared();
                        if m2 > cutoff_sq {
                            continue;
                        }
                        let w = kernel.opacity * (-0.5 * m2).exp();
                        direction_basis(degree, &d, &mut basis);
                        combine(coeffs, &basis, &mut sem);
                        let base = (j * grid.dims[2] + k) * nc;
                        for (o, s) in out[base..base + nc].iter_mut().zip(&sem) {
                            *o += w * s;
                        }
                    }
                }
            }
            if empty_bias != 0.0 {
                for v in out.chunks_exact_mut(nc) {
                    v[0] += empty_bias;
                }
            }
        });
    Ok(volume)
}

fn direction_basis(degree: usize, d: &Vector3<f64>, basis: &mut [f64]) {
    let r = d.norm();
    if r < COINCIDENT {
        basis.fill(0.0);
        basis[0] = Y00;
    } else {
        basis_into(degree, [d.x / r, d.y / r, d.z / r], basis);
    }
}

/// Gradients of a scalar loss w.r.t. the activated Gaussian attributes.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GaussGrad {
    pub mean: Vec<[f64; 3]>,
    pub scale: Vec<[f64; 3]>,
    /// Gradient w.r.t. the rotation matrix entries.
    pub rotation: Vec<Matrix3<f64>>,
    pub opacity: Vec<f64>,
    /// Same layout as the [`ShField`].
    pub coeffs: Vec<f64>,
}

struct Partial {
    gaussian: usize,
    mean: Vector3<f64>,
    scale: Vector3<f64>,
    rotation: Matrix3<f64>,
    opacity: f64,
    coeffs: Vec<f64>,
}

/// Reverse pass of [`gauss_predict`] given `upstream = ∂L/∂V_gauss`.
///
/// Exact within the culled support, including the dependence of the query
/// direction on the mean. Per-slab partial sums are reduced in slab order,
/// so the result does not depend on the thread count.
pub(crate) fn gauss_predict_backward(
    gaussians: &[SemanticGaussian],
    field: &ShField,
    grid: &GridSpec,
    cutoff: f64,
    upstream: &SemanticVolume,
) -> Result<GaussGrad> {
    let prep = prepare(gaussians, field, grid, cutoff)?;
    let nc = field.channels();
    if upstream.channels() != nc || upstream.dims() != grid.dims {
        return Err(Error::Internal(format!(
            "upstream gradient shape {:?}x{} does not match grid {:?}x{nc}",
            upstream.dims(),
            upstream.channels(),
            grid.dims
        )));
    }
    let degree = field.degree();
    let nb = num_basis(degree);
    let per = nb * nc;
    let cutoff_sq = cutoff * cutoff;
    let slab = grid.dims[1] * grid.dims[2] * nc;

    let slabs: Vec<Vec<Partial>> = upstream
        .as_slice()
        .par_chunks(slab)
        .enumerate()
        .map(|(i, up)| {
            let mut basis = vec![0.0; nb];
            let mut dbasis = vec![[0.0; 3]; nb];
            let mut sem = vec![0.0; nc];
            let mut partials = Vec::new();
            for (g, (kernel, bbox)) in prep.kernels.iter().zip(&prep.boxes).enumerate() {
                let Some(b) = bbox else { continue };
                if i < b[0].0 || i > b[0].1 {
                    continue;
                }
                let coeffs = field.gaussian(g);
                let mut p = Partial {
                    gaussian: g,
                    mean: Vector3::zeros(),
                    scale: Vector3::zeros(),
                    rotation: Matrix3::zeros(),
                    opacity: 0.0,
                    coeffs: vec![0.0; per],
                };
                for j in b[1].0..=b[1].1 {
                    for k in b[2].0..=b[2].1 {
                        let d = grid.voxel_center(i, j, k) - kernel.mean;
                        let u = kernel.rotation.transpose() * d;
                        let z = u.component_mul(&kernel.inv_scale);
                        let m2 = z.norm_squared();
                        if m2 > cutoff_sq {
                            continue;
                        }
                        let base = (j * grid.dims[2] + k) * nc;
                        let gv = &up[base..base + nc];
                        let e = (-0.5 * m2).exp();
                        let w = kernel.opacity * e;

                        let r = d.norm();
                        let dir = if r < COINCIDENT {
                            basis.fill(0.0);
                            basis[0] = Y00;
                            None
                        } else {
                            let dir = d / r;
                            basis_with_grad(degree, [dir.x, dir.y, dir.z], &mut basis, &mut dbasis);
                            Some(dir)
                        };
                        combine(coeffs, &basis, &mut sem);

                        // ∂L/∂c_bn = w Y_b G_n
                        for (b_idx, y) in basis.iter().enumerate() {
                            let wy = w * y;
                            for (o, gn) in p.coeffs[b_idx * nc..(b_idx + 1) * nc].iter_mut().zip(gv) {
                                *o += wy * gn;
                            }
                        }
                        let s: f64 = gv.iter().zip(&sem).map(|(a, b)| a * b).sum();
                        p.opacity += e * s;
                        // ∂L/∂z = -w S z
                        let gz = z * (-w * s);
                        p.scale -= gz.component_mul(&z).component_mul(&kernel.inv_scale);
                        let gu = gz.component_mul(&kernel.inv_scale);
                        let mut gd = kernel.rotation * gu;
                        p.rotation += d * gu.transpose();

                        if let Some(dir) = dir {
                            // Direction term: ∂L/∂dir = Σ_b (w Σ_n c_bn G_n) ∇Y_b.
                            let mut gdir = Vector3::zeros();
                            for (b_idx, grad_b) in dbasis.iter().enumerate() {
                                let row = &coeffs[b_idx * nc..(b_idx + 1) * nc];
                                let gy: f64 = w * row.iter().zip(gv).map(|(c, g)| c * g).sum::<f64>();
                                gdir += Vector3::from(*grad_b) * gy;
                            }
                            gd += (gdir - dir * dir.dot(&gdir)) / r;
                        }
                        p.mean -= gd;
                    }
                }
                partials.push(p);
            }
            partials
        })
        .collect();

    let k = gaussians.len();
    let mut out = GaussGrad {
        mean: vec![[0.0; 3]; k],
        scale: vec![[0.0; 3]; k],
        rotation: vec![Matrix3::zeros(); k],
        opacity: vec![0.0; k],
        coeffs: vec![0.0; k * per],
    };
    for p in slabs.into_iter().flatten() {
        let g = p.gaussian;
        for a in 0..3 {
            out.mean[g][a] += p.mean[a];
            out.scale[g][a] += p.scale[a];
        }
        out.rotation[g] += p.rotation;
        out.opacity[g] += p.opacity;
        for (o, v) in out.coeffs[g * per..(g + 1) * per].iter_mut().zip(&p.coeffs) {
            *o += v;
        }
    }
    Ok(out)
}
