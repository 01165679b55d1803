//! Optimizable parameters and their flat layout.

use crate::error::{Error, Result};
use crate::harmonics::ShProjection;
use crate::scene::{GaussianHead, LinearHead, GAUSSIAN_RAW};

/// One named contiguous block of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
    /// Multiplies the optimizer step for this block.
    pub lr_scale: f64,
    /// Whether decoupled weight decay applies; off for Gaussian geometry.
    pub decay: bool,
}

impl ParamGroup {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    groups: Vec<ParamGroup>,
    len: usize,
}

impl ParamLayout {
    fn build(blocks: &[(&'static str, usize, bool)]) -> Self {
        let mut offset = 0;
        let groups = blocks
            .iter()
            .map(|&(name, len, decay)| {
                let g = ParamGroup {
                    name,
                    offset,
                    len,
                    lr_scale: 1.0,
                    decay,
                };
                offset += len;
                g
            })
            .collect();
        Self { groups, len: offset }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Group containing flat coordinate `index`.
    pub fn locate(&self, index: usize) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.range().contains(&index))
    }
}

/// All optimizable parameters flattened into one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn group(&self, name: &str) -> Option<&[f64]> {
        self.layout.group(name).map(|g| &self.values[g.range()])
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.group(name)?.range();
        Some(&mut self.values[r])
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub const TPV_WEIGHTS: &str = "tpv.weights";
pub const VOXEL_HEAD_WEIGHT: &str = "voxel_head.weight";
pub const VOXEL_HEAD_BIAS: &str = "voxel_head.bias";
pub const GAUSSIAN_HEAD_WEIGHT: &str = "gaussian_head.weight";
pub const GAUSSIAN_HEAD_BIAS: &str = "gaussian_head.bias";
pub const PROJECTION: &str = "sh.projection";
pub const OFFSET: &str = "gaussian.offset";
pub const SCALE: &str = "gaussian.scale";
pub const ROTATION: &str = "gaussian.rotation";
pub const OPACITY: &str = "gaussian.opacity";
pub const COEFFS: &str = "gaussian.coeffs";

/// Model parameters. Per-Gaussian attributes are residuals added to the
/// Gaussian head's raw output (geometry) or to the projected SH
/// coefficients (semantics), so both the head and each Gaussian are free.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tpv_weights: [f64; 3],
    pub voxel_head: LinearHead,
    pub gaussian_head: GaussianHead,
    pub projection: ShProjection,
    /// `K x 3`, pre-tanh.
    pub offset: Vec<f64>,
    /// `K x 3`, pre-sigmoid.
    pub scale: Vec<f64>,
    /// `K x 4`, unnormalized `(w, x, y, z)`.
    pub rotation: Vec<f64>,
    /// `K`, pre-sigmoid.
    pub opacity: Vec<f64>,
    /// `K x (L+1)²·(N+1)`.
    pub coeffs: Vec<f64>,
}

impl ModelParams {
    /// Zero residuals for `count` Gaussians around the given heads.
    pub fn new(
        tpv_weights: [f64; 3],
        voxel_head: LinearHead,
        gaussian_head: GaussianHead,
        projection: ShProjection,
        count: usize,
    ) -> Result<Self> {
        let c = projection.features();
        if voxel_head.inputs != c || gaussian_head.features() != c {
            return Err(Error::invalid(format!(
                "heads take {} and {} features, projection takes {c}",
                voxel_head.inputs,
                gaussian_head.features()
            )));
        }
        if voxel_head.outputs != projection.channels() {
            return Err(Error::invalid(format!(
                "voxel head predicts {} classes, projection {}",
                voxel_head.outputs,
                projection.channels()
            )));
        }
        let rows = projection.rows();
        Ok(Self {
            tpv_weights,
            voxel_head,
            gaussian_head,
            projection,
            offset: vec![0.0; count * 3],
            scale: vec![0.0; count * 3],
            rotation: vec![0.0; count * 4],
            opacity: vec![0.0; count],
            coeffs: vec![0.0; count * rows],
        })
    }

    pub fn num_gaussians(&self) -> usize {
        self.opacity.len()
    }

    pub fn layout(&self) -> ParamLayout {
        let k = self.num_gaussians();
        ParamLayout::build(&[
            (TPV_WEIGHTS, 3, true),
            (VOXEL_HEAD_WEIGHT, self.voxel_head.weight.len(), true),
            (VOXEL_HEAD_BIAS, self.voxel_head.bias.len(), true),
            (GAUSSIAN_HEAD_WEIGHT, self.gaussian_head.0.weight.len(), true),
            (GAUSSIAN_HEAD_BIAS, GAUSSIAN_RAW, true),
            (PROJECTION, self.projection.weight.len(), true),
            (OFFSET, k * 3, false),
            (SCALE, k * 3, false),
            (ROTATION, k * 4, false),
            (OPACITY, k, false),
            (COEFFS, self.coeffs.len(), true),
        ])
    }

    fn blocks(&self) -> [&[f64]; 11] {
        [
            &self.tpv_weights,
            &self.voxel_head.weight,
            &self.voxel_head.bias,
            &self.gaussian_head.0.weight,
            &self.gaussian_head.0.bias,
            &self.projection.weight,
            &self.offset,
            &self.scale,
            &self.rotation,
            &self.opacity,
            &self.coeffs,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 11] {
        [
            &mut self.tpv_weights,
            &mut self.voxel_head.weight,
            &mut self.voxel_head.bias,
            &mut self.gaussian_head.0.weight,
            &mut self.gaussian_head.0.bias,
            &mut self.projection.weight,
            &mut self.offset,
            &mut self.scale,
            &mut self.rotation,
            &mut self.opacity,
            &mut self.coeffs,
        ]
    }

    pub fn flatten(&self) -> ParamVector {
        let layout = self.layout();
        let mut values = Vec::with_capacity(layout.len());
        for b in self.blocks() {
            values.extend_from_slice(b);
        }
        ParamVector { layout, values }
    }

    /// Overwrites every parameter from `flat`, which must share this
    /// model's layout.
    pub fn assign(&mut self, flat: &ParamVector) -> Result<()> {
        self.assign_values(&flat.values)
    }

    pub(crate) fn assign_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.layout().len() {
            return Err(Error::Internal(format!(
                "parameter vector of length {} does not match layout of {}",
                values.len(),
                self.layout().len()
            )));
        }
        let mut at = 0;
        for b in self.blocks_mut() {
            b.copy_from_slice(&values[at..at + b.len()]);
            at += b.len();
        }
        Ok(())
    }

    /// Copy of `self` holding `flat`.
    pub fn unflatten(&self, flat: &ParamVector) -> Result<Self> {
        let mut out = self.clone();
        out.assign(flat)?;
        Ok(out)
    }
}
