//! Dual-branch (voxel + tri-plane) features, focal anchor selection and
//! Gaussian initialization from anchor features.

use crate::error::{Error, Result};
use crate::gaussian::{quat_norm, SemanticGaussian};
use crate::grid::{FeatureVolume, GridSpec, ScalarGrid};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

/// Three axis-pooled feature planes plus their aggregation weights.
///
/// Plane layouts (channel fastest): `xy` is `X x Y x C`, `yz` is
/// `Y x Z x C`, `zx` is `X x Z x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TpvPlanes {
    spec: GridSpec,
    channels: usize,
    pub xy: Vec<f64>,
    pub yz: Vec<f64>,
    pub zx: Vec<f64>,
    pub weights: [f64; 3],
}

impl TpvPlanes {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn xy_at(&self, i: usize, j: usize) -> &[f64] {
        let c = self.channels;
        let at = (i * self.spec.dims[1] + j) * c;
        &self.xy[at..at + c]
    }

    #[inline]
    pub fn yz_at(&self, j: usize, k: usize) -> &[f64] {
        let c = self.channels;
        let at = (j * self.spec.dims[2] + k) * c;
        &self.yz[at..at + c]
    }

    #[inline]
    pub fn zx_at(&self, i: usize, k: usize) -> &[f64] {
        let c = self.channels;
        let at = (i * self.spec.dims[2] + k) * c;
        &self.zx[at..at + c]
    }

    /// Applies a per-plane channel mixing in place.
    pub fn mix(&mut self, mixing: &PlaneMixing) -> Result<()> {
        let c = self.channels;
        if mixing.channels != c {
            return Err(Error::invalid(format!(
                "mixing is {0}x{0} but planes have {c} channels",
                mixing.channels
            )));
        }
        for (plane, m) in [&mut self.xy, &mut self.yz, &mut self.zx]
            .into_iter()
            .zip(&mixing.matrices)
        {
            let mut buf = vec![0.0; c];
            for cell in plane.chunks_exact_mut(c) {
                for (o, row) in buf.iter_mut().zip(m.chunks_exact(c)) {
                    *o = row.iter().zip(cell.iter()).map(|(a, b)| a * b).sum();
                }
                cell.copy_from_slice(&buf);
            }
        }
        Ok(())
    }
}

/// Fixed linear channel mixing for each of the three planes, standing in
/// for a learned 2D refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneMixing {
    channels: usize,
    matrices: [Vec<f64>; 3],
}

impl PlaneMixing {
    pub fn identity(channels: usize) -> Self {
        let mut eye = vec![0.0; channels * channels];
        for c in 0..channels {
            eye[c * channels + c] = 1.0;
        }
        Self {
            channels,
            matrices: [eye.clone(), eye.clone(), eye],
        }
    }

    /// Identity plus seeded Gaussian perturbation of standard deviation
    /// `strength / sqrt(C)`.
    pub fn seeded(channels: usize, strength: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, strength / (channels as f64).sqrt()).expect("valid std");
        let mut out = Self::identity(channels);
        for m in out.matrices.iter_mut() {
            for v in m.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        out
    }
}

/// Mean-pools the volume along each axis.
pub fn tpv_pool(volume: &FeatureVolume) -> TpvPlanes {
    let spec = *volume.spec();
    let [nx, ny, nz] = spec.dims;
    let c = volume.channels();
    let mut xy = vec![0.0; nx * ny * c];
    let mut yz = vec![0.0; ny * nz * c];
    let mut zx = vec![0.0; nx * nz * c];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let v = volume.at(i, j, k);
                let add = |plane: &mut [f64], at: usize| {
                    for (p, x) in plane[at * c..(at + 1) * c].iter_mut().zip(v) {
                        *p += x;
                    }
                };
                add(&mut xy, i * ny + j);
                add(&mut yz, j * nz + k);
                add(&mut zx, i * nz + k);
            }
        }
    }
    xy.iter_mut().for_each(|v| *v /= nz as f64);
    yz.iter_mut().for_each(|v| *v /= nx as f64);
    zx.iter_mut().for_each(|v| *v /= ny as f64);
    TpvPlanes {
        spec,
        channels: c,
        xy,
        yz,
        zx,
        weights: [1.0; 3],
    }
}

/// Expands the planes back to a dense field using `planes.weights`.
pub fn broadcast_tpv(planes: &TpvPlanes) -> FeatureVolume {
    broadcast_weighted(planes, planes.weights)
}

pub(crate) fn broadcast_weighted(planes: &TpvPlanes, w: [f64; 3]) -> FeatureVolume {
    let spec = planes.spec;
    let c = planes.channels;
    let mut out = FeatureVolume::zeros(spec, c);
    let [nx, ny, nz] = spec.dims;
    for i in 0..nx {
        for j in 0..ny {
            let pxy = planes.xy_at(i, j);
            for k in 0..nz {
                let (pyz, pzx) = (planes.yz_at(j, k), planes.zx_at(i, k));
                let dst = out.voxel_mut(spec.linear_index(i, j, k));
                for ch in 0..c {
                    dst[ch] = w[0] * pxy[ch] + w[1] * pyz[ch] + w[2] * pzx[ch];
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    #[default]
    Dot,
    Cosine,
}

impl fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMode::Dot => "dot",
            SimilarityMode::Cosine => "cosine",
        })
    }
}

impl FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(SimilarityMode::Dot),
            "cosine" => Ok(SimilarityMode::Cosine),
            other => Err(Error::invalid(format!("unknown similarity mode `{other}`"))),
        }
    }
}

/// Per-voxel similarity of two feature fields. Cosine similarity is 0
/// where either vector has norm below 1e-12.
pub fn similarity_map(
    voxel_feats: &FeatureVolume,
    tpv_field: &FeatureVolume,
    mode: SimilarityMode,
) -> Result<ScalarGrid> {
    voxel_feats.check_dims(tpv_field, "similarity_map")?;
    if voxel_feats.channels() != tpv_field.channels() {
        return Err(Error::invalid(format!(
            "similarity_map: {} vs {} channels",
            voxel_feats.channels(),
            tpv_field.channels()
        )));
    }
    let scores = (0..voxel_feats.num_voxels())
        .map(|v| {
            let (a, b) = (voxel_feats.voxel(v), tpv_field.voxel(v));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            match mode {
                SimilarityMode::Dot => dot,
                SimilarityMode::Cosine => {
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if na < 1e-12 || nb < 1e-12 {
                        0.0
                    } else {
                        dot / (na * nb)
                    }
                }
            }
        })
        .collect();
    ScalarGrid::from_vec(*voxel_feats.spec(), 1, scores)
}

/// The K selected focal voxels, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub positions: Vec<[usize; 3]>,
    /// Linear voxel indices matching `positions`.
    pub indices: Vec<usize>,
    /// Row-major `K x C` fused features gathered at the anchors.
    pub features: Vec<f64>,
    pub scores: Vec<f64>,
    pub channels: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn feature(&self, a: usize) -> &[f64] {
        &self.features[a * self.channels..(a + 1) * self.channels]
    }
}

/// Orders scores high to low, ties by ascending linear index.
#[inline]
pub(crate) fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Top-`k` voxels by similarity; ties broken by ascending linear index.
pub fn select_anchors(sim: &ScalarGrid, fused_feats: &FeatureVolume, k: usize) -> Result<AnchorSet> {
    sim.check_dims(fused_feats, "select_anchors")?;
    let n = sim.num_voxels();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "anchor count K={k} must be within 1..={n} for grid {:?}",
            sim.dims()
        )));
    }
    if let Some(bad) = sim.as_slice().iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("similarity at voxel {bad} is not finite")));
    }
    let mut ranked: Vec<(usize, f64)> = sim.as_slice().iter().copied().enumerate().collect();
    if k < n {
        ranked.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        ranked.truncate(k);
    }
    ranked.sort_unstable_by(|a, b| rank_order(*a, *b));

    let c = fused_feats.channels();
    let mut features = Vec::with_capacity(k * c);
    for &(idx, _) in &ranked {
        features.extend_from_slice(fused_feats.voxel(idx));
    }
    Ok(AnchorSet {
        positions: ranked.iter().map(|&(idx, _)| sim.spec().unravel(idx)).collect(),
        indices: ranked.iter().map(|&(idx, _)| idx).collect(),
        scores: ranked.iter().map(|&(_, s)| s).collect(),
        features,
        channels: c,
    })
}

/// Dense affine map `y = W x + b`, `W` row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub outputs: usize,
    pub inputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(outputs: usize, inputs: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != outputs * inputs || bias.len() != outputs {
            return Err(Error::invalid(format!(
                "head of shape {outputs}x{inputs} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            outputs,
            inputs,
            weight,
            bias,
        })
    }

    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            outputs,
            inputs,
            weight: vec![0.0; outputs * inputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Weights drawn from `N(0, std²)`, zero bias.
    pub fn random(outputs: usize, inputs: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        Self {
            outputs,
            inputs,
            weight: (0..outputs * inputs).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, row), b) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.inputs))
            .zip(&self.bias)
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs];
        self.apply_into(x, &mut out);
        out
    }
}

/// Raw Gaussian attributes per anchor: `[offset(3), scale(3), rotation(4), opacity(1)]`.
pub const GAUSSIAN_RAW: usize = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead(pub LinearHead);

impl GaussianHead {
    pub fn new(head: LinearHead) -> Result<Self> {
        if head.outputs != GAUSSIAN_RAW {
            return Err(Error::invalid(format!(
                "gaussian head must have {GAUSSIAN_RAW} outputs, got {}",
                head.outputs
            )));
        }
        Ok(Self(head))
    }

    pub fn zeros(features: usize) -> Self {
        Self(LinearHead::zeros(GAUSSIAN_RAW, features))
    }

    /// Small random weights; the rotation bias starts at the identity
    /// quaternion so normalization is well conditioned.
    pub fn random(features: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut head = LinearHead::random(GAUSSIAN_RAW, features, std, rng);
        head.bias[6] = 1.0;
        Self(head)
    }

    pub fn features(&self) -> usize {
        self.0.inputs
    }
}

/// Metric range that the sigmoid scale activation maps onto.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleRange {
    pub min: f64,
    pub max: f64,
}

impl Default for ScaleRange {
    fn default() -> Self {
        Self { min: 0.05, max: 2.0 }
    }
}

impl ScaleRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0 && max > min && max.is_finite()) {
            return Err(Error::invalid(format!("invalid scale range [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Below this raw-quaternion norm the rotation falls back to identity.
pub(crate) const QUAT_FALLBACK_NORM: f64 = 1e-8;

/// Geometry of one Gaussian after the activations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Activated {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity: f64,
}

/// `mean = center + tanh(o)·pitch`, `scale = min + (max-min)·σ(s)`,
/// `rotation = r/|r|`, `opacity = σ(a)`.
pub(crate) fn activate(raw: &[f64], center: Vector3<f64>, pitch: f64, range: ScaleRange) -> Activated {
    let mut mean = [0.0; 3];
    let mut scale = [0.0; 3];
    for a in 0..3 {
        mean[a] = center[a] + raw[a].tanh() * pitch;
        scale[a] = range.min + (range.max - range.min) * sigmoid(raw[3 + a]);
    }
    let q = [raw[6], raw[7], raw[8], raw[9]];
    let n = quat_norm(q);
    let rotation = if n < QUAT_FALLBACK_NORM {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        q.map(|c| c / n)
    };
    Activated {
        mean,
        scale,
        rotation,
        opacity: sigmoid(raw[10]),
    }
}

/// One Gaussian per anchor; semantics are the anchor's fused feature.
pub fn init_gaussians(
    anchors: &AnchorSet,
    head: &GaussianHead,
    grid: &GridSpec,
    range: ScaleRange,
) -> Result<Vec<SemanticGaussian>> {
    if head.features() != anchors.channels {
        return Err(Error::invalid(format!(
            "gaussian head expects {} features, anchors carry {}",
            head.features(),
            anchors.channels
        )));
    }
    let mut raw = [0.0; GAUSSIAN_RAW];
    anchors
        .positions
        .iter()
        .enumerate()
        .map(|(a, &[i, j, k])| {
            let f = anchors.feature(a);
            head.0.apply_into(f, &mut raw);
            let g = activate(&raw, grid.voxel_center(i, j, k), grid.resolution, range);
            SemanticGaussian::new(g.mean, g.scale, g.rotation, g.opacity, f.to_vec())
        })
        .collect()
}
