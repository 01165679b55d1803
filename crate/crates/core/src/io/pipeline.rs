//! End-to-end run: scene file in, fitted model, prediction and reports out.

use super::gaussian_file::GaussianSetFile;
use super::scene_file::SceneFile;
use super::synth::{gen_features, gen_scene, parse_primitives};
use crate::error::{Error, Result, StageExt};
use crate::fit::{
    finite_diff_check, fit, prepare, sample_coords, FitConfig, GradCheckReport, ModelObjective, ParamLayout,
    TrajectoryRecord,
};
use crate::grid::LabelGrid;
use crate::metrics::{compute_metrics, MetricsReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const TRAJECTORY_HEADER: &str =
    "iteration\tce\tlovasz\tscal\torth\talign\ttotal\tmiou\toccupancy_iou\tgauss_occupancy_iou";

pub const GAUSSIANS_FILE: &str = "gaussians.sphg";
pub const PREDICTION_FILE: &str = "prediction.sphv";
pub const METRICS_TEXT: &str = "metrics.txt";
pub const METRICS_JSON: &str = "metrics.json";
pub const TRAJECTORY_FILE: &str = "trajectory.tsv";
pub const CONFIG_FILE: &str = "config.txt";

/// Line-oriented trajectory: one header line, then one record per line.
pub fn write_trajectory(records: &[TrajectoryRecord]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in records {
        let l = &r.losses;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.iteration,
            l.ce,
            l.lovasz,
            l.scal,
            l.orth,
            l.align,
            r.total,
            r.miou,
            r.occupancy_iou,
            r.gauss_occupancy_iou
        );
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub metrics: MetricsReport,
    pub gaussians: usize,
    pub iterations: usize,
    pub initial: TrajectoryRecord,
    #[serde(rename = "final")]
    pub last: TrajectoryRecord,
}

impl PipelineReport {
    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("miou", self.metrics.miou.to_string());
        put("occupancy_iou", self.metrics.occupancy_iou.to_string());
        for (c, iou) in self.metrics.per_class_iou.iter().enumerate() {
            put(&format!("iou.class_{c}"), iou.to_string());
        }
        put("scored_voxels", self.metrics.scored_voxels.to_string());
        put("gaussians", self.gaussians.to_string());
        put("iterations", self.iterations.to_string());
        for (tag, r) in [("initial", &self.initial), ("final", &self.last)] {
            put(&format!("{tag}.miou"), r.miou.to_string());
            put(&format!("{tag}.occupancy_iou"), r.occupancy_iou.to_string());
            put(&format!("{tag}.gauss_occupancy_iou"), r.gauss_occupancy_iou.to_string());
            for (term, v) in r.losses.terms() {
                put(&format!("{tag}.loss.{term}"), v.to_string());
            }
            put(&format!("{tag}.loss.total"), r.total.to_string());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub trajectory: Vec<TrajectoryRecord>,
    pub files: Vec<PathBuf>,
}

/// Reads a label scene, synthesizes its features, fits the model and
/// writes the fitted Gaussians, the predicted labels, the metrics (text
/// and JSON), the trajectory and the effective config into `out_dir`.
pub fn run_pipeline(scene_path: &Path, config: &FitConfig, out_dir: &Path) -> Result<PipelineOutput> {
    config.validate().stage("config")?;
    let scene = SceneFile::read(scene_path).stage("read_scene")?;
    let labels = scene.to_labels().stage("read_scene")?;
    let num_classes = scene.n as usize + 1;
    let features =
        gen_features(&labels, num_classes, config.channels, config.noise, config.seed).stage("gen_features")?;
    let (problem, init, _anchors) = prepare(labels, num_classes, features, config)?;
    let outcome = fit(&problem, init, config).stage("fit")?;
    let metrics = compute_metrics(&outcome.forward.v_ssc, &problem.gt, problem.ignore).stage("compute_metrics")?;

    let mut prediction = outcome.forward.v_ssc.argmax();
    if config.upsample > 1 {
        prediction = prediction.upsample_nearest(config.upsample).stage("upsample")?;
    }
    let report = PipelineReport {
        metrics,
        gaussians: outcome.forward.gaussians.len(),
        iterations: outcome.trajectory.len() - 1,
        initial: outcome.trajectory[0].clone(),
        last: outcome.trajectory.last().unwrap().clone(),
    };

    std::fs::create_dir_all(out_dir)
        .map_err(Error::from)
        .stage("write_outputs")?;
    let path = |name: &str| out_dir.join(name);
    let gaussians = GaussianSetFile::from_model(&outcome.forward.gaussians, &outcome.forward.field)?;
    gaussians.write(path(GAUSSIANS_FILE)).stage("write_outputs")?;
    SceneFile::from_labels(&prediction, scene.n)?
        .write(path(PREDICTION_FILE))
        .stage("write_outputs")?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    let writes = [
        (METRICS_TEXT, report.to_text()),
        (METRICS_JSON, json),
        (TRAJECTORY_FILE, write_trajectory(&outcome.trajectory)),
        (CONFIG_FILE, super::render_config(config)),
    ];
    for (name, text) in &writes {
        std::fs::write(path(name), text)
            .map_err(Error::from)
            .stage("write_outputs")?;
    }
    let mut files = vec![path(GAUSSIANS_FILE), path(PREDICTION_FILE)];
    files.extend(writes.iter().map(|(n, _)| path(n)));
    Ok(PipelineOutput {
        report,
        trajectory: outcome.trajectory,
        files,
    })
}

/// Built-in scene for gradient checks: small, with every shape kind.
pub const GRADCHECK_SCENE: &str = "\
grid 6 5 4 0.5
classes 3
ground 1 1
box 2 1 1 1 2 2 2
sphere 3 4 3 2 1
";

/// Minimum feature noise used by [`check_gradients`]; identical features
/// would create exact ties in the Lovász sort.
pub const GRADCHECK_MIN_NOISE: f64 = 0.3;

/// Finite-difference check of the full model on `labels`. Culling is
/// disabled (it makes the objective only piecewise smooth) and the
/// per-Gaussian residuals are moved to a seeded generic point. Also
/// returns the layout the checked coordinates index into.
pub fn check_gradients(
    labels: Option<(LabelGrid, usize)>,
    config: &FitConfig,
    per_group: usize,
    step: f64,
) -> Result<(GradCheckReport, ParamLayout)> {
    let (labels, num_classes) = match labels {
        Some(l) => l,
        None => {
            let scene = gen_scene(&parse_primitives(GRADCHECK_SCENE)?, config.seed)?;
            (scene.to_labels()?, scene.n as usize + 1)
        }
    };
    let config = FitConfig {
        cutoff: f64::INFINITY,
        noise: config.noise.max(GRADCHECK_MIN_NOISE),
        ..config.clone()
    };
    let features = gen_features(
        &labels,
        num_classes,
        config.channels.max(num_classes),
        config.noise,
        config.seed,
    )?;
    let (problem, mut params, _) = prepare(labels, num_classes, features, &config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut flat = params.flatten();
    for g in flat.layout().clone().groups() {
        if g.name.starts_with("gaussian.") {
            for v in &mut flat.values[g.range()] {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    params.assign(&flat)?;
    let coords = sample_coords(flat.layout(), per_group, &mut rng);
    let objective = ModelObjective {
        problem: &problem,
        template: params,
    };
    let report = finite_diff_check(&objective, &flat.values, &coords, step)?;
    Ok((report, flat.layout().clone()))
}
