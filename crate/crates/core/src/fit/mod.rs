//! Desk-scale fitting of the model against a labeled voxel scene.

mod gradcheck;
mod model;
mod optim;
mod params;

pub use gradcheck::{
    finite_diff_check, sample_coords, CoordCheck, GradCheckReport, ModelObjective, Objective, GRAD_FLOOR,
};
pub use model::{FitProblem, Forward};
pub use optim::{Optimizer, OptimizerKind, OptimizerSettings};
pub use params::{
    ModelParams, ParamGroup, ParamLayout, ParamVector, COEFFS, GAUSSIAN_HEAD_BIAS, GAUSSIAN_HEAD_WEIGHT, OFFSET,
    OPACITY, PROJECTION, ROTATION, SCALE, TPV_WEIGHTS, VOXEL_HEAD_BIAS, VOXEL_HEAD_WEIGHT,
};

use crate::error::{Error, Result, StageExt};
use crate::gaussian::DEFAULT_CUTOFF;
use crate::grid::{FeatureVolume, LabelGrid};
use crate::harmonics::{ShProjection, MAX_DEGREE};
use crate::losses::{LossBreakdown, IGNORE_LABEL};
use crate::metrics::compute_metrics;
use crate::predict::DEFAULT_EMPTY_BIAS;
use crate::scene::{
    broadcast_tpv, select_anchors, similarity_map, tpv_pool, AnchorSet, GaussianHead, LinearHead, ScaleRange,
    SimilarityMode,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Anchor count used on grids at least as large as [`REFERENCE_DIMS`].
pub const DEFAULT_K: usize = 1024;
pub const REFERENCE_DIMS: [usize; 3] = [128, 128, 16];
pub const DEFAULT_LAMBDA: f64 = 1e-6;
pub const DEFAULT_STEP: f64 = 2e-4;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-2;
pub const DEFAULT_SH_DEGREE: usize = 2;
/// Initial Gaussian scale in voxel pitches.
const INIT_SCALE_PITCH: f64 = 1.5;

/// Anchor count for a grid: [`DEFAULT_K`] at reference size or above,
/// otherwise scaled by voxel count (at least 1).
pub fn default_k(dims: [usize; 3]) -> usize {
    let n: usize = dims.iter().product();
    let reference: usize = REFERENCE_DIMS.iter().product();
    if n >= reference {
        DEFAULT_K
    } else {
        ((DEFAULT_K as f64 * n as f64 / reference as f64).round() as usize).max(1)
    }
}

/// Every knob of a fitting run. Each field has a config-file key of the
/// same name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub step: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// `None` picks [`default_k`] for the scene grid.
    pub k: Option<usize>,
    pub sh_degree: usize,
    pub lambda: f64,
    pub cutoff: f64,
    /// Expected scene dims; `None` accepts any.
    pub grid: Option<[usize; 3]>,
    /// Stop once the total loss changes by less than this between
    /// iterations; 0 disables.
    pub tolerance: f64,
    /// Feature channels of synthetic features.
    pub channels: usize,
    /// Feature noise standard deviation.
    pub noise: f64,
    pub sim_mode: SimilarityMode,
    pub empty_bias: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Nearest-neighbor upsampling factor of the written prediction.
    pub upsample: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        let range = ScaleRange::default();
        Self {
            iterations: 500,
            step: DEFAULT_STEP,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            k: None,
            sh_degree: DEFAULT_SH_DEGREE,
            lambda: DEFAULT_LAMBDA,
            cutoff: DEFAULT_CUTOFF,
            grid: None,
            tolerance: 0.0,
            channels: 16,
            noise: 0.0,
            sim_mode: SimilarityMode::Dot,
            empty_bias: DEFAULT_EMPTY_BIAS,
            scale_min: range.min,
            scale_max: range.max,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            upsample: 1,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidInput(msg));
        if !(self.step > 0.0 && self.step.is_finite()) {
            return fail(format!("step must be positive, got {}", self.step));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.sh_degree > MAX_DEGREE {
            return Err(Error::UnsupportedDegree(self.sh_degree));
        }
        if !(self.cutoff > 0.0) {
            return fail(format!("cutoff must be positive, got {}", self.cutoff));
        }
        if self.k == Some(0) {
            return fail("k must be at least 1".into());
        }
        if self.channels == 0 {
            return fail("channels must be at least 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(self.tolerance >= 0.0) {
            return fail(format!("tolerance must be non-negative, got {}", self.tolerance));
        }
        if !self.empty_bias.is_finite() {
            return fail("empty_bias must be finite".into());
        }
        ScaleRange::new(self.scale_min, self.scale_max)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.upsample == 0 {
            return fail("upsample must be at least 1".into());
        }
        if self.grid.is_some_and(|g| g.contains(&0)) {
            return fail("grid dims must be positive".into());
        }
        Ok(())
    }

    pub fn scale_range(&self) -> ScaleRange {
        ScaleRange {
            min: self.scale_min,
            max: self.scale_max,
        }
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            kind: self.optimizer,
            step: self.step,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Builds the fitting problem for a labeled scene and frozen features:
/// pools the planes, scores voxel/plane agreement, picks the anchors and
/// draws seeded initial parameters.
pub fn prepare(
    gt: LabelGrid,
    num_classes: usize,
    features: FeatureVolume,
    config: &FitConfig,
) -> Result<(FitProblem, ModelParams, AnchorSet)> {
    config.validate()?;
    gt.check_dims(&features, "prepare")?;
    if let Some(dims) = config.grid {
        if dims != gt.dims() {
            return Err(Error::invalid(format!(
                "scene grid {:?} differs from configured grid {dims:?}",
                gt.dims()
            )));
        }
    }
    let planes = tpv_pool(&features);
    let global = broadcast_tpv(&planes);
    let sim = similarity_map(&features, &global, config.sim_mode).stage("similarity")?;
    let mut fused = global;
    for (f, x) in fused.as_mut_slice().iter_mut().zip(features.as_slice()) {
        *f += x;
    }
    let k = config.k.unwrap_or_else(|| default_k(gt.dims()));
    let anchors = select_anchors(&sim, &fused, k).stage("select_anchors")?;

    let problem = FitProblem {
        gt,
        features,
        planes,
        anchors: anchors.indices.clone(),
        num_classes,
        degree: config.sh_degree,
        cutoff: config.cutoff,
        empty_bias: config.empty_bias,
        scale_range: config.scale_range(),
        ignore: IGNORE_LABEL,
    };
    problem.validate()?;
    let params = init_params(&problem, config).stage("init_gaussians")?;
    Ok((problem, params, anchors))
}

/// Seeded initial parameters with zero per-Gaussian residuals.
pub fn init_params(problem: &FitProblem, config: &FitConfig) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = problem.features.channels();
    let std = 1.0 / (c as f64).sqrt();
    let voxel_head = LinearHead::random(problem.num_classes, c, std, &mut rng);
    let mut gaussian_head = GaussianHead::random(c, 0.1 * std, &mut rng);
    let range = problem.scale_range;
    let target = (INIT_SCALE_PITCH * problem.grid().resolution - range.min) / (range.max - range.min);
    let t = target.clamp(0.01, 0.99);
    for b in &mut gaussian_head.0.bias[3..6] {
        *b = (t / (1.0 - t)).ln();
    }
    let projection = ShProjection::random(problem.degree, problem.num_classes, c, config.lambda, &mut rng)?;
    ModelParams::new([1.0; 3], voxel_head, gaussian_head, projection, problem.anchors.len())
}

/// State of one iteration; record 0 is the initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iteration: usize,
    pub losses: LossBreakdown,
    pub total: f64,
    /// Fused-prediction mIoU.
    pub miou: f64,
    pub occupancy_iou: f64,
    /// Occupancy IoU of the Gaussian branch alone.
    pub gauss_occupancy_iou: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: ModelParams,
    pub trajectory: Vec<TrajectoryRecord>,
    /// Forward pass at `params`.
    pub forward: Forward,
}

fn record(problem: &FitProblem, iteration: usize, fwd: &Forward) -> Result<TrajectoryRecord> {
    if let Some((term, value)) = fwd.losses.non_finite() {
        return Err(Error::Divergence { iteration, term, value });
    }
    let fused = compute_metrics(&fwd.v_ssc, &problem.gt, problem.ignore)?;
    let gauss = compute_metrics(&fwd.v_gauss, &problem.gt, problem.ignore)?;
    Ok(TrajectoryRecord {
        iteration,
        losses: fwd.losses,
        total: fwd.losses.total(),
        miou: fused.miou,
        occupancy_iou: fused.occupancy_iou,
        gauss_occupancy_iou: gauss.occupancy_iou,
    })
}

/// Runs `config.iterations` optimizer steps from `init`.
pub fn fit(problem: &FitProblem, init: ModelParams, config: &FitConfig) -> Result<FitOutcome> {
    config.validate()?;
    let mut params = init;
    let mut flat = params.flatten();
    let mut optimizer = Optimizer::new(config.optimizer_settings(), flat.len());
    let mut forward = problem.forward(&params)?;
    let mut trajectory = vec![record(problem, 0, &forward)?];
    for it in 1..=config.iterations {
        let grad = problem.backward(&params, &forward)?;
        if let Some(bad) = grad.values.iter().position(|g| !g.is_finite()) {
            let name = grad.layout().locate(bad).map_or("gradient", |g| g.name);
            return Err(Error::Divergence {
                iteration: it,
                term: name,
                value: grad.values[bad],
            });
        }
        optimizer.step(&mut flat, &grad)?;
        if let Some(bad) = flat.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: it,
                term: flat.layout().locate(bad).map_or("parameter", |g| g.name),
                value: flat.values[bad],
            });
        }
        params.assign(&flat)?;
        // Inputs were validated at iteration 0, so a rejected model here
        // comes from finite parameters overflowing downstream.
        forward = problem.forward(&params).map_err(|e| match e.root() {
            Error::InvalidInput(_) => Error::Divergence {
                iteration: it,
                term: "forward",
                value: f64::NAN,
            },
            _ => e,
        })?;
        let rec = record(problem, it, &forward)?;
        let prev = trajectory.last().map_or(rec.total, |r| r.total);
        let converged = config.tolerance > 0.0 && (rec.total - prev).abs() < config.tolerance;
        trajectory.push(rec);
        if converged {
            break;
        }
    }
    Ok(FitOutcome {
        params,
        trajectory,
        forward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_k_rule() {
        assert_eq!(default_k([128, 128, 16]), 1024);
        assert_eq!(default_k([256, 256, 32]), 1024);
        assert_eq!(default_k([64, 64, 8]), 128);
        assert_eq!(default_k([2, 2, 2]), 1);
    }

    #[test]
    fn defaults_validate() {
        let c = FitConfig::default();
        c.validate().unwrap();
        assert_eq!(c.lambda, 1e-6);
        assert_eq!(c.step, 2e-4);
        for bad in [
            FitConfig { step: 0.0, ..c.clone() },
            FitConfig {
                lambda: -1.0,
                ..c.clone()
            },
            FitConfig {
                sh_degree: 5,
                ..c.clone()
            },
            FitConfig {
                k: Some(0),
                ..c.clone()
            },
            FitConfig {
                scale_min: 3.0,
                ..c.clone()
            },
            FitConfig {
                beta2: 1.0,
                ..c.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
