use nalgebra::SymmetricEigen;
use proptest::prelude::*;
use semsplat::io::{export_ply_labels, GaussianRecord, GaussianSetFile, SceneFile};
use semsplat::metrics::score_labels;
use semsplat::{build_covariance, select_anchors, splat, GridSpec, LabelGrid, SemanticGaussian, VoxelGrid};

fn quat() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0..1.0f64).prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-2)
}

fn dims() -> impl Strategy<Value = [usize; 3]> {
    prop::array::uniform3(1usize..6)
}

proptest! {
    #[test]
    fn covariance_spectrum_is_squared_scale(scale in prop::array::uniform3(0.05..3.0f64), q in quat()) {
        let cov = build_covariance(scale, q).unwrap();
        let m = cov.matrix();
        prop_assert!((m - m.transpose()).abs().max() <= 1e-12);
        let mut eig: Vec<f64> = SymmetricEigen::new(*m).eigenvalues.iter().copied().collect();
        let mut want: Vec<f64> = scale.iter().map(|s| s * s).collect();
        eig.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b), "{eig:?} vs {want:?}");
        }
    }

    #[test]
    fn scene_file_round_trips(d in dims(), n in 1u16..20, res in 0.05f32..2.0, seed in any::<u64>()) {
        let spec = GridSpec::new(d, res as f64, [0.5, -1.0, 0.25]).unwrap();
        let count = spec.num_voxels();
        let data: Vec<u8> = (0..count)
            .map(|i| {
                let h = seed.wrapping_mul(i as u64 + 1).rotate_left(17) % (n as u64 + 2);
                if h == n as u64 + 1 { 255 } else { h as u8 }
            })
            .collect();
        let labels = LabelGrid::labels(spec, data).unwrap();
        let file = SceneFile::from_labels(&labels, n).unwrap();
        let back = SceneFile::from_bytes(&file.to_bytes()).unwrap();
        prop_assert_eq!(&back, &file);
        let decoded = back.to_labels().unwrap();
        prop_assert_eq!(decoded.as_slice(), labels.as_slice());
        // Every occupied, non-ignored voxel becomes exactly one vertex.
        let occupied = labels.as_slice().iter().filter(|&&l| l != 0 && l != 255).count();
        let ply = export_ply_labels(&labels);
        let header = format!("element vertex {occupied}\n");
        prop_assert!(ply.contains(&header));
    }

    #[test]
    fn truncated_scene_files_are_rejected(d in dims(), cut in 1usize..40) {
        let spec = GridSpec::new(d, 1.0, [0.0; 3]).unwrap();
        let labels = LabelGrid::labels(spec, vec![1; spec.num_voxels()]).unwrap();
        let bytes = SceneFile::from_labels(&labels, 2).unwrap().to_bytes();
        let keep = bytes.len().saturating_sub(cut);
        let err = SceneFile::from_bytes(&bytes[..keep]).unwrap_err();
        prop_assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn gaussian_file_round_trips(
        records in prop::collection::vec(
            (prop::array::uniform3(-10.0f32..10.0), prop::array::uniform3(0.01f32..2.0), quat(), 0.0f32..=1.0,
             prop::collection::vec(-5.0f32..5.0, 9 * 2)),
            0..6,
        )
    ) {
        let records: Vec<GaussianRecord> = records
            .into_iter()
            .map(|(mean, scale, q, opacity, coeffs)| {
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                GaussianRecord { mean, scale, rotation: q.map(|v| (v / n) as f32), opacity, coeffs }
            })
            .collect();
        let file = GaussianSetFile { channels: 2, degree: 2, records };
        let back = GaussianSetFile::from_bytes(&file.to_bytes()).unwrap();
        prop_assert_eq!(back, file);
    }

    #[test]
    fn splat_is_linear_in_opacity(
        mean in prop::array::uniform3(0.0..4.0f64),
        scale in prop::array::uniform3(0.3..1.5f64),
        q in quat(),
        alpha in 0.0..=1.0f64,
    ) {
        let spec = GridSpec::new([4, 4, 4], 1.0, [0.0; 3]).unwrap();
        let full = SemanticGaussian::new(mean, scale, q, 1.0, vec![1.0, -2.0]).unwrap();
        let part = SemanticGaussian { opacity: alpha, ..full.clone() };
        let a = splat(&[full], &spec, 2, 3.0).unwrap();
        let b = splat(&[part], &spec, 2, 3.0).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((alpha * x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_are_bounded_and_perfect_on_self(
        d in dims(),
        nc in 2usize..6,
        seed in any::<u64>(),
    ) {
        let spec = GridSpec::new(d, 1.0, [0.0; 3]).unwrap();
        let draw = |salt: u64| -> Vec<u8> {
            (0..spec.num_voxels())
                .map(|i| (seed ^ salt).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64 * 7919).rotate_left(23) % nc as u64)
                .map(|v| v as u8)
                .collect()
        };
        let gt = LabelGrid::labels(spec, draw(1)).unwrap();
        let pred = LabelGrid::labels(spec, draw(2)).unwrap();
        let m = score_labels(&pred, &gt, nc, 255).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.miou) && (0.0..=1.0).contains(&m.occupancy_iou));
        prop_assert!(m.per_class_iou.iter().all(|v| (0.0..=1.0).contains(v)));
        let own = score_labels(&gt, &gt, nc, 255).unwrap();
        prop_assert!(own.miou == 1.0 || gt.as_slice().iter().all(|&l| l == 0));
    }

    #[test]
    fn anchors_are_sorted_and_distinct(d in dims(), seed in any::<u64>(), frac in 0.0..1.0f64) {
        let spec = GridSpec::new(d, 1.0, [0.0; 3]).unwrap();
        let n = spec.num_voxels();
        let sim: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64).wrapping_mul(2654435761)) % 7) as f64).collect();
        let k = 1 + ((n - 1) as f64 * frac) as usize;
        let a = select_anchors(
            &VoxelGrid::from_vec(spec, 1, sim).unwrap(),
            &VoxelGrid::from_vec(spec, 1, vec![0.0; n]).unwrap(),
            k,
        ).unwrap();
        prop_assert_eq!(a.indices.len(), k);
        for w in a.indices.windows(2).zip(a.scores.windows(2)) {
            let ((i, j), (si, sj)) = ((w.0[0], w.0[1]), (w.1[0], w.1[1]));
            prop_assert!(si > sj || (si == sj && i < j));
        }
    }
}
