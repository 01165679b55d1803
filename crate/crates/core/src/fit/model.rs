//! Forward pass of the full model and its hand-derived reverse pass.

use super::params::{
    ModelParams, ParamVector, COEFFS, GAUSSIAN_HEAD_BIAS, GAUSSIAN_HEAD_WEIGHT, OFFSET, OPACITY, PROJECTION, ROTATION,
    SCALE, TPV_WEIGHTS, VOXEL_HEAD_BIAS, VOXEL_HEAD_WEIGHT,
};
use crate::error::{Error, Result};
use crate::gaussian::{quat_norm, rotation_vjp, SemanticGaussian};
use crate::grid::{FeatureVolume, GridSpec, LabelGrid, SemanticVolume};
use crate::harmonics::{orth_loss, orth_loss_grad, ShField, MAX_DEGREE};
use crate::losses::{align_accumulate, ce_accumulate, lovasz_accumulate, scal_accumulate, LossBreakdown, ScalVariant};
use crate::predict::{fuse, gauss_predict, gauss_predict_backward, voxel_head};
use crate::scene::{activate, broadcast_weighted, sigmoid, ScaleRange, TpvPlanes, GAUSSIAN_RAW, QUAT_FALLBACK_NORM};

/// Fixed data of one fitting problem: supervision, frozen features and the
/// anchor voxels that seed the Gaussians.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub gt: LabelGrid,
    /// Frozen per-voxel features.
    pub features: FeatureVolume,
    /// Pooled planes of `features`; their mixing weights are parameters.
    pub planes: TpvPlanes,
    /// Linear voxel index of each Gaussian's anchor.
    pub anchors: Vec<usize>,
    pub num_classes: usize,
    pub degree: usize,
    pub cutoff: f64,
    pub empty_bias: f64,
    pub scale_range: ScaleRange,
    pub ignore: u8,
}

/// Everything the reverse pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct Forward {
    pub fused_features: FeatureVolume,
    pub v_voxel: SemanticVolume,
    pub v_gauss: SemanticVolume,
    pub v_ssc: SemanticVolume,
    pub gaussians: Vec<SemanticGaussian>,
    pub field: ShField,
    /// `K x 11` raw attributes before activation.
    raw: Vec<f64>,
    pub losses: LossBreakdown,
}

impl FitProblem {
    pub fn grid(&self) -> &GridSpec {
        self.gt.spec()
    }

    pub fn validate(&self) -> Result<()> {
        self.gt.check_dims(&self.features, "fit problem")?;
        if self.planes.spec() != self.features.spec() || self.planes.channels() != self.features.channels() {
            return Err(Error::invalid("fit problem: planes do not match the feature volume"));
        }
        if self.degree > MAX_DEGREE {
            return Err(Error::UnsupportedDegree(self.degree));
        }
        let n = self.gt.num_voxels();
        if let Some(bad) = self.anchors.iter().find(|&&a| a >= n) {
            return Err(Error::invalid(format!("anchor index {bad} outside grid of {n} voxels")));
        }
        if let Some(bad) = self
            .gt
            .as_slice()
            .iter()
            .find(|&&l| l != self.ignore && l as usize >= self.num_classes)
        {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn check_params(&self, p: &ModelParams) -> Result<()> {
        let c = self.features.channels();
        let proj = &p.projection;
        let ok = p.num_gaussians() == self.anchors.len()
            && proj.features() == c
            && proj.channels() == self.num_classes
            && proj.degree() == self.degree
            && p.voxel_head.inputs == c
            && p.voxel_head.outputs == self.num_classes
            && p.gaussian_head.features() == c
            && p.coeffs.len() == self.anchors.len() * proj.rows();
        if ok {
            Ok(())
        } else {
            Err(Error::Internal(
                "model parameters do not match the fitting problem's shapes".into(),
            ))
        }
    }

    pub fn forward(&self, p: &ModelParams) -> Result<Forward> {
        self.check_params(p)?;
        let grid = *self.grid();
        let c = self.features.channels();
        let k = self.anchors.len();
        let rows = p.projection.rows();

        let mut fused_features = broadcast_weighted(&self.planes, p.tpv_weights);
        for (f, x) in fused_features.as_mut_slice().iter_mut().zip(self.features.as_slice()) {
            *f += x;
        }
        let v_voxel = voxel_head(&fused_features, &p.voxel_head)?;

        let mut raw = vec![0.0; k * GAUSSIAN_RAW];
        let mut coeffs = vec![0.0; k * rows];
        let mut gaussians = Vec::with_capacity(k);
        for (a, &idx) in self.anchors.iter().enumerate() {
            let f = &fused_features.as_slice()[idx * c..(idx + 1) * c];
            let r = &mut raw[a * GAUSSIAN_RAW..(a + 1) * GAUSSIAN_RAW];
            p.gaussian_head.0.apply_into(f, r);
            for d in 0..3 {
                r[d] += p.offset[a * 3 + d];
                r[3 + d] += p.scale[a * 3 + d];
            }
            for d in 0..4 {
                r[6 + d] += p.rotation[a * 4 + d];
            }
            r[10] += p.opacity[a];
            let [i, j, kk] = grid.unravel(idx);
            let act = activate(r, grid.voxel_center(i, j, kk), grid.resolution, self.scale_range);
            gaussians.push(SemanticGaussian::new(
                act.mean,
                act.scale,
                act.rotation,
                act.opacity,
                Vec::new(),
            )?);

            let out = &mut coeffs[a * rows..(a + 1) * rows];
            p.projection.apply(f, out);
            for (o, d) in out.iter_mut().zip(&p.coeffs[a * rows..(a + 1) * rows]) {
                *o += d;
            }
        }
        let field = ShField::new(self.degree, self.num_classes, coeffs)?;
        let v_gauss = gauss_predict(&gaussians, &field, &grid, self.cutoff, self.empty_bias)?;
        let v_ssc = fuse(&v_voxel, &v_gauss)?;

        let losses = LossBreakdown {
            ce: ce_accumulate(&v_ssc, &self.gt, self.ignore, None)?,
            lovasz: lovasz_accumulate(&v_ssc, &self.gt, self.ignore, None)?,
            scal: scal_accumulate(&v_ssc, &self.gt, ScalVariant::Semantic, self.ignore, None)?
                + scal_accumulate(&v_ssc, &self.gt, ScalVariant::Geometric, self.ignore, None)?,
            orth: orth_loss(&p.projection),
            align: align_accumulate(&v_voxel, &v_gauss, &self.anchors, None, None)?,
        };
        Ok(Forward {
            fused_features,
            v_voxel,
            v_gauss,
            v_ssc,
            gaussians,
            field,
            raw,
            losses,
        })
    }

    /// `∂ total / ∂θ` for the state `fwd` was computed from.
    pub fn backward(&self, p: &ModelParams, fwd: &Forward) -> Result<ParamVector> {
        self.check_params(p)?;
        if fwd.gaussians.len() != self.anchors.len() || !fwd.v_ssc.same_shape(&fwd.v_voxel) {
            return Err(Error::Internal("forward cache does not match the parameters".into()));
        }
        let grid = *self.grid();
        let n = grid.num_voxels();
        let nc = self.num_classes;
        let c = self.features.channels();
        let rows = p.projection.rows();

        // Logit gradients of both branches.
        let mut g_ssc = vec![0.0; n * nc];
        ce_accumulate(&fwd.v_ssc, &self.gt, self.ignore, Some(&mut g_ssc))?;
        lovasz_accumulate(&fwd.v_ssc, &self.gt, self.ignore, Some(&mut g_ssc))?;
        scal_accumulate(
            &fwd.v_ssc,
            &self.gt,
            ScalVariant::Semantic,
            self.ignore,
            Some(&mut g_ssc),
        )?;
        scal_accumulate(
            &fwd.v_ssc,
            &self.gt,
            ScalVariant::Geometric,
            self.ignore,
            Some(&mut g_ssc),
        )?;
        let mut g_voxel = g_ssc.clone();
        let mut g_gauss = g_ssc;
        align_accumulate(
            &fwd.v_voxel,
            &fwd.v_gauss,
            &self.anchors,
            Some(&mut g_voxel),
            Some(&mut g_gauss),
        )?;

        let mut grad = ParamVector::zeros(p.layout());
        let mut d_fused = vec![0.0; n * c];

        // Voxel head: y = W f + b.
        {
            let w = &p.voxel_head.weight;
            let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; nc]);
            for v in 0..n {
                let g = &g_voxel[v * nc..(v + 1) * nc];
                let f = fwd.fused_features.voxel(v);
                let df = &mut d_fused[v * c..(v + 1) * c];
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    db[o] += go;
                    let row = o * c..(o + 1) * c;
                    for ((dwi, fi), (dfi, wi)) in dw[row.clone()].iter_mut().zip(f).zip(df.iter_mut().zip(&w[row])) {
                        *dwi += go * fi;
                        *dfi += go * wi;
                    }
                }
            }
            grad.group_mut(VOXEL_HEAD_WEIGHT).unwrap().copy_from_slice(&dw);
            grad.group_mut(VOXEL_HEAD_BIAS).unwrap().copy_from_slice(&db);
        }

        // Gaussian branch back to activated attributes.
        let upstream = SemanticVolume::from_vec(grid, nc, g_gauss)?;
        let gg = gauss_predict_backward(&fwd.gaussians, &fwd.field, &grid, self.cutoff, &upstream)?;

        let mut d_proj = orth_loss_grad(&p.projection).1;
        let gh = &p.gaussian_head.0;
        let mut d_gh_w = vec![0.0; gh.weight.len()];
        let mut d_gh_b = vec![0.0; GAUSSIAN_RAW];
        let mut d_offset = vec![0.0; p.offset.len()];
        let mut d_scale = vec![0.0; p.scale.len()];
        let mut d_rot = vec![0.0; p.rotation.len()];
        let mut d_opacity = vec![0.0; p.opacity.len()];
        let span = self.scale_range.max - self.scale_range.min;
        for (a, &idx) in self.anchors.iter().enumerate() {
            let f = fwd.fused_features.voxel(idx);
            let df = &mut d_fused[idx * c..(idx + 1) * c];

            // Coefficients: c = W f + δ.
            let gc = &gg.coeffs[a * rows..(a + 1) * rows];
            for (r, &g) in gc.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = r * c..(r + 1) * c;
                for ((dwi, fi), (dfi, wi)) in d_proj[row.clone()]
                    .iter_mut()
                    .zip(f)
                    .zip(df.iter_mut().zip(&p.projection.weight[row]))
                {
                    *dwi += g * fi;
                    *dfi += g * wi;
                }
            }

            // Activations.
            let raw = &fwd.raw[a * GAUSSIAN_RAW..(a + 1) * GAUSSIAN_RAW];
            let mut draw = [0.0; GAUSSIAN_RAW];
            for d in 0..3 {
                let t = raw[d].tanh();
                draw[d] = gg.mean[a][d] * grid.resolution * (1.0 - t * t);
                let s = sigmoid(raw[3 + d]);
                draw[3 + d] = gg.scale[a][d] * span * s * (1.0 - s);
            }
            let q = [raw[6], raw[7], raw[8], raw[9]];
            let qn = quat_norm(q);
            if qn >= QUAT_FALLBACK_NORM {
                let qh = q.map(|x| x / qn);
                let gq = rotation_vjp(qh, &gg.rotation[a]);
                let radial: f64 = qh.iter().zip(&gq).map(|(x, y)| x * y).sum();
                for d in 0..4 {
                    draw[6 + d] = (gq[d] - qh[d] * radial) / qn;
                }
            }
            let s = sigmoid(raw[10]);
            draw[10] = gg.opacity[a] * s * (1.0 - s);

            d_offset[a * 3..a * 3 + 3].copy_from_slice(&draw[0..3]);
            d_scale[a * 3..a * 3 + 3].copy_from_slice(&draw[3..6]);
            d_rot[a * 4..a * 4 + 4].copy_from_slice(&draw[6..10]);
            d_opacity[a] = draw[10];
            for (o, &g) in draw.iter().enumerate() {
                d_gh_b[o] += g;
                let row = o * c..(o + 1) * c;
                for ((dwi, fi), (dfi, wi)) in d_gh_w[row.clone()]
                    .iter_mut()
                    .zip(f)
                    .zip(df.iter_mut().zip(&gh.weight[row]))
                {
                    *dwi += g * fi;
                    *dfi += g * wi;
                }
            }
        }
        grad.group_mut(PROJECTION).unwrap().copy_from_slice(&d_proj);
        grad.group_mut(GAUSSIAN_HEAD_WEIGHT).unwrap().copy_from_slice(&d_gh_w);
        grad.group_mut(GAUSSIAN_HEAD_BIAS).unwrap().copy_from_slice(&d_gh_b);
        grad.group_mut(OFFSET).unwrap().copy_from_slice(&d_offset);
        grad.group_mut(SCALE).unwrap().copy_from_slice(&d_scale);
        grad.group_mut(ROTATION).unwrap().copy_from_slice(&d_rot);
        grad.group_mut(OPACITY).unwrap().copy_from_slice(&d_opacity);
        grad.group_mut(COEFFS).unwrap().copy_from_slice(&gg.coeffs);

        // Fused features: f = f_voxel + Σ_p w_p broadcast(plane_p).
        let [nx, ny, nz] = grid.dims;
        let mut dw = [0.0; 3];
        for i in 0..nx {
            for j in 0..ny {
                for kk in 0..nz {
                    let v = grid.linear_index(i, j, kk);
                    let g = &d_fused[v * c..(v + 1) * c];
                    let planes = [
                        self.planes.xy_at(i, j),
                        self.planes.yz_at(j, kk),
                        self.planes.zx_at(i, kk),
                    ];
                    for (acc, plane) in dw.iter_mut().zip(planes) {
                        *acc += g.iter().zip(plane).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        grad.group_mut(TPV_WEIGHTS).unwrap().copy_from_slice(&dw);
        Ok(grad)
    }

    /// Total loss at `p`.
    pub fn loss(&self, p: &ModelParams) -> Result<LossBreakdown> {
        Ok(self.forward(p)?.losses)
    }
}
