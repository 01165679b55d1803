//! `semsplat`: synthetic scenes, fitting, evaluation and export.

use clap::{Args, Parser, Subcommand};
use semsplat::io::{
    check_gradients, export_ply_gaussians, export_ply_labels, gen_features, gen_scene, load_config, parse_primitives,
    run_pipeline, GaussianSetFile, PayloadKind, SceneFile, SceneSpec, MINI_STREET,
};
use semsplat::metrics::score_labels;
use semsplat::{Error, FitConfig, Result, SimilarityMode, IGNORE_LABEL};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Worker thread count when set and `--deterministic` is absent.
const THREADS_ENV: &str = "SEMSPLAT_THREADS";

/// Gradient checks report failure above this relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "semsplat",
    version,
    about = "Semantic Gaussian scene completion on voxel grids"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the Gaussian count.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Overrides the spherical harmonics degree.
    #[arg(long = "sh-degree", global = true)]
    sh_degree: Option<usize>,
    /// Overrides the similarity mode (`dot` or `cosine`).
    #[arg(long = "sim-mode", global = true)]
    sim_mode: Option<SimilarityMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a primitive list, or the `mini-street` preset, to a label scene.
    Gen {
        /// Primitive file or preset name.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize per-voxel features for a label scene.
    Features {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the model to a label scene and write all outputs to a directory.
    Fit {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction (labels or logits) against a label scene.
    Eval {
        /// Ground-truth label scene.
        #[arg(long)]
        scene: PathBuf,
        /// Predicted scene.
        prediction: PathBuf,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a label scene or a Gaussian set to PLY.
    Export {
        /// Label scene or Gaussian set file.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the full model.
    CheckGrad {
        /// Label scene; a small built-in scene when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Coordinates sampled per parameter group.
        #[arg(long, default_value_t = 8)]
        per_group: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

impl Common {
    fn config(&self) -> Result<FitConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p)?,
            None => FitConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(k) = self.k {
            c.k = Some(k);
        }
        if let Some(d) = self.sh_degree {
            c.sh_degree = d;
        }
        if let Some(m) = self.sim_mode {
            c.sim_mode = m;
        }
        c.validate()?;
        Ok(c)
    }

    fn threads(&self) -> Result<Option<usize>> {
        if self.deterministic {
            return Ok(Some(1));
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(Error::InvalidInput(format!(
                    "{THREADS_ENV} must be a positive integer, got `{v}`"
                ))),
            },
            Err(_) => Ok(None),
        }
    }
}

fn scene_spec(arg: &str) -> Result<SceneSpec> {
    if arg == MINI_STREET {
        return Ok(SceneSpec::Preset(arg.to_string()));
    }
    parse_primitives(&std::fs::read_to_string(arg)?)
}

fn read_labels(path: &Path) -> Result<(SceneFile, semsplat::LabelGrid)> {
    let scene = SceneFile::read(path)?;
    let labels = scene.to_labels()?;
    Ok((scene, labels))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let config = cli.common.config()?;
    match &cli.command {
        Command::Gen { scene, out } => gen_scene(&scene_spec(scene)?, config.seed)?.write(out),
        Command::Features { scene, out } => {
            let (file, labels) = read_labels(scene)?;
            let features = gen_features(&labels, file.n as usize + 1, config.channels, config.noise, config.seed)?;
            SceneFile::from_volume(&features)?.write(out)
        }
        Command::Fit { scene, out } => {
            let result = run_pipeline(scene, &config, out)?;
            print!("{}", result.report.to_text());
            Ok(())
        }
        Command::Eval { scene, prediction, out } => {
            let (gt_file, gt) = read_labels(scene)?;
            let pred_file = SceneFile::read(prediction)?;
            let pred = match pred_file.payload.kind() {
                PayloadKind::Labels => pred_file.to_labels()?,
                PayloadKind::Logits => pred_file.to_volume()?.argmax(),
                PayloadKind::Scalar => return Err(Error::InvalidInput("eval needs labels or logits".into())),
            };
            let classes = gt_file.n.max(pred_file.n) as usize + 1;
            let m = score_labels(&pred, &gt, classes, IGNORE_LABEL)?;
            let mut text = format!(
                "miou = {}\noccupancy_iou = {}\nscored_voxels = {}\n",
                m.miou, m.occupancy_iou, m.scored_voxels
            );
            for (c, iou) in m.per_class_iou.iter().enumerate() {
                text.push_str(&format!("iou.class_{c} = {iou}\n"));
            }
            match out {
                Some(p) => write_text(p, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Export { input, out } => {
            let bytes = std::fs::read(input)?;
            let ply = if bytes.starts_with(semsplat::io::GAUSSIAN_MAGIC) {
                let (gaussians, field) = GaussianSetFile::from_bytes(&bytes)?.to_model()?;
                export_ply_gaussians(&gaussians, &field)
            } else {
                export_ply_labels(&SceneFile::from_bytes(&bytes)?.to_labels()?)
            };
            write_text(out, &ply)
        }
        Command::CheckGrad { scene, per_group, step } => {
            let labels = match scene {
                Some(p) => {
                    let (file, labels) = read_labels(p)?;
                    Some((labels, file.n as usize + 1))
                }
                None => None,
            };
            let (report, _) = check_gradients(labels, &config, *per_group, *step)?;
            println!("scored = {}", report.scored());
            println!("max_rel_error = {:e}", report.max_rel_error);
            if let Some(w) = report.worst() {
                println!("worst = {} analytic {:e} numeric {:e}", w.index, w.analytic, w.numeric);
            }
            if report.max_rel_error < GRADCHECK_TOLERANCE {
                Ok(())
            } else {
                Err(Error::Internal(format!(
                    "gradient check failed: {:e} >= {GRADCHECK_TOLERANCE:e}",
                    report.max_rel_error
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match cli.common.threads() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let outcome = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(Error::Internal(format!("thread pool: {e}"))),
        },
        None => run(&cli),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
