use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsplat::fit::{
    finite_diff_check, init_params, prepare, sample_coords, FitConfig, FitProblem, ModelObjective, ModelParams,
    Optimizer, OptimizerKind, ParamVector, OPACITY, PROJECTION, ROTATION,
};
use semsplat::harmonics::{orth_loss, orth_loss_grad, ShProjection};
use semsplat::scene::{GaussianHead, LinearHead};
use semsplat::{fit, FeatureVolume, GridSpec, LabelGrid, IGNORE_LABEL};

/// Blocky labels with per-class prototypes plus noise.
fn scene(dims: [usize; 3], classes: usize, channels: usize, noise: f64, seed: u64) -> (LabelGrid, FeatureVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GridSpec::new(dims, 0.5, [0.0; 3]).unwrap();
    let labels: Vec<u8> = (0..spec.num_voxels())
        .map(|v| {
            let [i, j, k] = spec.unravel(v);
            (((i / 2) + (j / 2) * 3 + k) % classes) as u8
        })
        .collect();
    let protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut data = Vec::with_capacity(labels.len() * channels);
    for &l in &labels {
        for p in &protos[l as usize] {
            data.push(p + noise * rng.random_range(-1.0..1.0));
        }
    }
    (
        LabelGrid::labels(spec, labels).unwrap(),
        FeatureVolume::from_vec(spec, channels, data).unwrap(),
    )
}

fn small_problem(degree: usize, cutoff: f64) -> (FitProblem, ModelParams) {
    let (gt, feats) = scene([5, 4, 3], 3, 4, 0.3, 7);
    let config = FitConfig {
        k: Some(4),
        sh_degree: degree,
        cutoff,
        lambda: 1e-2,
        ..FitConfig::default()
    };
    let (problem, mut params, _) = prepare(gt, 3, feats, &config).unwrap();
    // Non-zero residuals so every group sits at a generic point.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut flat = params.flatten();
    for g in flat.layout().clone().groups() {
        if g.name.starts_with("gaussian.") {
            for v in &mut flat.values[g.range()] {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    params.assign(&flat).unwrap();
    (problem, params)
}

#[test]
fn gradient_matches_finite_differences() {
    let (problem, params) = small_problem(2, f64::INFINITY);
    let layout = params.layout();
    let coords = sample_coords(&layout, 8, &mut ChaCha8Rng::seed_from_u64(5));
    assert!(coords.len() >= 64);
    let obj = ModelObjective {
        problem: &problem,
        template: params.clone(),
    };
    let report = finite_diff_check(&obj, &params.flatten().values, &coords, 1e-5).unwrap();
    for c in &report.coords {
        if c.rel_error.is_some_and(|r| r > 1e-5) {
            eprintln!("{} {:?}", layout.locate(c.index).unwrap().name, c);
        }
    }
    assert!(report.scored() >= 64, "only {} coordinates scored", report.scored());
    assert!(report.max_rel_error < 1e-4, "max rel error {}", report.max_rel_error);
}

#[test]
fn gradient_with_default_cutoff_and_degree_four() {
    let (problem, params) = small_problem(4, 3.0);
    let layout = params.layout();
    let coords = sample_coords(&layout, 6, &mut ChaCha8Rng::seed_from_u64(6));
    let obj = ModelObjective {
        problem: &problem,
        template: params.clone(),
    };
    let report = finite_diff_check(&obj, &params.flatten().values, &coords, 1e-5).unwrap();
    // Culling makes the loss piecewise smooth; the check stays tight away
    // from support boundaries.
    let bad = report
        .coords
        .iter()
        .filter(|c| c.rel_error.is_some_and(|r| r > 1e-4))
        .count();
    assert!(
        bad * 10 <= report.scored(),
        "{bad} of {} coordinates off",
        report.scored()
    );
}

/// All voxels ignored, orthonormal W, and residual coefficients cancelling
/// the projection so both branches predict the same constant logits.
fn stationary_problem() -> (FitProblem, ModelParams) {
    let (gt, feats) = scene([4, 4, 2], 2, 4, 0.2, 3);
    let gt = LabelGrid::labels(*gt.spec(), vec![IGNORE_LABEL; gt.num_voxels()]).unwrap();
    let config = FitConfig {
        k: Some(3),
        sh_degree: 0,
        weight_decay: 0.0,
        ..FitConfig::default()
    };
    let (problem, mut params, _) = prepare(gt, 2, feats, &config).unwrap();
    params.projection.weight = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    params.voxel_head.weight.iter_mut().for_each(|w| *w = 0.0);
    params.voxel_head.bias = vec![config.empty_bias, 0.0];
    let fwd = problem.forward(&params).unwrap();
    for (a, &idx) in problem.anchors.iter().enumerate() {
        let f = fwd.fused_features.voxel(idx);
        params.coeffs[a * 2] = -f[0];
        params.coeffs[a * 2 + 1] = -f[2];
    }
    (problem, params)
}

#[test]
fn stationary_point_has_zero_gradient_and_stays_put() {
    let (problem, params) = stationary_problem();
    let fwd = problem.forward(&params).unwrap();
    assert!(fwd.losses.total().abs() < 1e-12, "{:?}", fwd.losses);
    let grad = problem.backward(&params, &fwd).unwrap();
    assert!(grad.norm() < 1e-6, "gradient norm {}", grad.norm());

    let config = FitConfig {
        iterations: 20,
        step: 1e-2,
        weight_decay: 0.0,
        ..FitConfig::default()
    };
    let out = fit(&problem, params, &config).unwrap();
    let first = out.trajectory[0].total;
    assert!(out.trajectory.iter().all(|r| (r.total - first).abs() < 1e-9));
}

#[test]
fn zero_iterations_returns_initial_state() {
    let (problem, params) = small_problem(1, 3.0);
    let config = FitConfig {
        iterations: 0,
        ..FitConfig::default()
    };
    let out = fit(&problem, params.clone(), &config).unwrap();
    assert_eq!(out.params, params);
    assert_eq!(out.trajectory.len(), 1);
    assert_eq!(out.trajectory[0].iteration, 0);
    assert_eq!(out.trajectory[0].total, problem.loss(&params).unwrap().total());
}

#[test]
fn quaternion_sign_flip_leaves_loss_unchanged() {
    let (problem, mut params) = small_problem(2, 3.0);
    let c = params.gaussian_head.features();
    for o in 6..10 {
        params.gaussian_head.0.weight[o * c..(o + 1) * c].fill(0.0);
        params.gaussian_head.0.bias[o] = 0.0;
    }
    for (i, q) in params.rotation.iter_mut().enumerate() {
        *q = 0.2 + 0.1 * i as f64;
    }
    let before = problem.loss(&params).unwrap().total();
    params.rotation.iter_mut().for_each(|q| *q = -*q);
    let after = problem.loss(&params).unwrap().total();
    assert!((before - after).abs() <= 1e-12 * before.abs(), "{before} vs {after}");
}

#[test]
fn fitted_quaternions_stay_unit() {
    let (problem, params) = small_problem(2, 3.0);
    let config = FitConfig {
        iterations: 10,
        step: 0.05,
        ..FitConfig::default()
    };
    let out = fit(&problem, params, &config).unwrap();
    for g in &out.forward.gaussians {
        let n: f64 = g.rotation.iter().map(|q| q * q).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn descent_reduces_loss() {
    let (problem, params) = small_problem(2, 3.0);
    for optimizer in [OptimizerKind::Descent, OptimizerKind::Adam] {
        let config = FitConfig {
            iterations: 30,
            step: if optimizer == OptimizerKind::Descent {
                0.05
            } else {
                0.02
            },
            optimizer,
            ..FitConfig::default()
        };
        let out = fit(&problem, params.clone(), &config).unwrap();
        let (first, last) = (out.trajectory[0].total, out.trajectory.last().unwrap().total);
        assert!(last < first, "{optimizer}: {first} -> {last}");
    }
}

#[test]
fn fit_is_identical_across_thread_counts() {
    let (problem, params) = small_problem(2, 3.0);
    let config = FitConfig {
        iterations: 5,
        step: 0.01,
        ..FitConfig::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fit(&problem, params.clone(), &config).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.params, b.params);
}

#[test]
fn orth_only_fit_shrinks_residual() {
    // 8 x 16 so that W Wᵀ = I is attainable.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let projection = ShProjection::random(1, 2, 16, 1.0, &mut rng).unwrap();
    let mut params = ModelParams::new(
        [1.0; 3],
        LinearHead::zeros(2, 16),
        GaussianHead::zeros(16),
        projection,
        0,
    )
    .unwrap();
    let residual = |p: &ModelParams| orth_loss(&p.projection) / p.projection.lambda;
    let initial = residual(&params);
    let mut flat = params.flatten();
    let config = FitConfig {
        step: 0.01,
        weight_decay: 0.0,
        ..FitConfig::default()
    };
    let mut opt = Optimizer::new(config.optimizer_settings(), flat.len());
    for _ in 0..200 {
        let (_, g) = orth_loss_grad(&params.projection);
        let mut grad = ParamVector::zeros(flat.layout().clone());
        grad.group_mut(PROJECTION).unwrap().copy_from_slice(&g);
        opt.step(&mut flat, &grad).unwrap();
        params.assign(&flat).unwrap();
    }
    let last = residual(&params);
    assert!(last < 0.1 * initial, "{initial} -> {last}");
}

#[test]
fn divergence_names_the_term() {
    let (problem, mut params) = small_problem(1, 3.0);
    params.voxel_head.bias[0] = f64::NAN;
    let err = fit(&problem, params, &FitConfig::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("ce"), "{err}");
}

#[test]
fn runaway_step_is_divergence() {
    let (problem, params) = small_problem(1, 3.0);
    let config = FitConfig {
        step: 1e300,
        optimizer: OptimizerKind::Descent,
        iterations: 50,
        ..FitConfig::default()
    };
    let err = fit(&problem, params, &config).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn init_is_seeded() {
    let (problem, _) = small_problem(1, 3.0);
    let config = FitConfig::default();
    let a = init_params(&problem, &config).unwrap();
    assert_eq!(a, init_params(&problem, &config).unwrap());
    let b = init_params(&problem, &FitConfig { seed: 1, ..config }).unwrap();
    assert_ne!(a, b);
    assert!(a.flatten().group(OPACITY).unwrap().iter().all(|&v| v == 0.0));
    assert!(a.flatten().group(ROTATION).unwrap().iter().all(|&v| v == 0.0));
}
