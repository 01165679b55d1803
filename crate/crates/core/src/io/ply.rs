//! ASCII point-cloud export with class colors.

use crate::gaussian::SemanticGaussian;
use crate::grid::{argmax, LabelGrid};
use crate::harmonics::ShField;
use crate::losses::IGNORE_LABEL;
use std::fmt::Write as _;

/// Class legend colors in table order.
pub const PLY_LEGEND: [(&str, [u8; 3]); 19] = [
    ("car", [91, 155, 213]),
    ("bicycle", [100, 230, 245]),
    ("motorcycle", [30, 60, 150]),
    ("truck", [80, 30, 180]),
    ("other-vehicle", [0, 0, 255]),
    ("person", [255, 30, 30]),
    ("bicyclist", [255, 37, 199]),
    ("motorcyclist", [150, 30, 90]),
    ("road", [255, 0, 255]),
    ("parking", [255, 150, 255]),
    ("sidewalk", [75, 0, 75]),
    ("other-ground", [175, 0, 75]),
    ("building", [255, 200, 0]),
    ("fence", [255, 120, 50]),
    ("vegetation", [0, 175, 0]),
    ("trunk", [135, 60, 0]),
    ("terrain", [150, 240, 80]),
    ("pole", [255, 240, 150]),
    ("traffic-sign", [255, 0, 0]),
];

/// Legend indices in label-id order: ids 1..=6 follow the synthetic
/// street classes, the rest keep table order.
const LABEL_ORDER: [usize; 19] = [8, 10, 12, 0, 14, 17, 1, 2, 3, 4, 5, 6, 7, 9, 11, 13, 15, 16, 18];
const EMPTY_COLOR: [u8; 3] = [128, 128, 128];

/// Color of class id `label` (0 is empty; ids past the legend wrap).
pub fn palette(label: u8) -> [u8; 3] {
    if label == 0 {
        return EMPTY_COLOR;
    }
    PLY_LEGEND[LABEL_ORDER[(label as usize - 1) % LABEL_ORDER.len()]].1
}

fn header(count: usize) -> String {
    format!(
        "ply\nformat ascii 1.0\nelement vertex {count}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nproperty uchar alpha\n\
         property uchar label\nend_header\n"
    )
}

fn vertex(out: &mut String, p: [f64; 3], label: u8, alpha: u8) {
    let [r, g, b] = palette(label);
    let _ = writeln!(
        out,
        "{} {} {} {r} {g} {b} {alpha} {label}",
        p[0] as f32, p[1] as f32, p[2] as f32
    );
}

/// One vertex per occupied voxel (label neither empty nor ignored).
pub fn export_ply_labels(labels: &LabelGrid) -> String {
    let spec = labels.spec();
    let occupied: Vec<usize> = (0..labels.num_voxels())
        .filter(|&v| !matches!(labels.label(v), 0 | IGNORE_LABEL))
        .collect();
    let mut out = header(occupied.len());
    for v in occupied {
        let [i, j, k] = spec.unravel(v);
        let c = spec.voxel_center(i, j, k);
        vertex(&mut out, [c.x, c.y, c.z], labels.label(v), 255);
    }
    out
}

/// One vertex per Gaussian mean, colored by the class with the largest
/// degree-0 coefficient, alpha proportional to opacity.
pub fn export_ply_gaussians(gaussians: &[SemanticGaussian], field: &ShField) -> String {
    let mut out = header(gaussians.len());
    for (i, g) in gaussians.iter().enumerate() {
        let dc = &field.gaussian(i)[..field.channels()];
        let label = argmax(dc).min(u8::MAX as usize) as u8;
        let alpha = (g.opacity.clamp(0.0, 1.0) * 255.0).round() as u8;
        vertex(&mut out, g.mean, label, alpha);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn vertex_count(ply: &str) -> usize {
        let declared: usize = ply
            .lines()
            .find_map(|l| l.strip_prefix("element vertex "))
            .unwrap()
            .parse()
            .unwrap();
        let body = ply.split("end_header\n").nth(1).unwrap().lines().count();
        assert_eq!(declared, body);
        body
    }

    #[test]
    fn empty_scene_is_header_only() {
        let spec = GridSpec::new([3, 3, 3], 1.0, [0.0; 3]).unwrap();
        let ply = export_ply_labels(&LabelGrid::labels(spec, vec![0; 27]).unwrap());
        assert_eq!(vertex_count(&ply), 0);
        assert!(ply.ends_with("end_header\n"));
    }

    #[test]
    fn box_vertices_at_centers() {
        let spec = GridSpec::new([4, 4, 4], 0.5, [1.0, 0.0, 0.0]).unwrap();
        let mut labels = vec![0; 64];
        for i in 1..3 {
            for j in 1..3 {
                for k in 0..2 {
                    labels[spec.linear_index(i, j, k)] = 3;
                }
            }
        }
        labels[63] = IGNORE_LABEL;
        let ply = export_ply_labels(&LabelGrid::labels(spec, labels).unwrap());
        assert_eq!(vertex_count(&ply), 8);
        let first = ply.split("end_header\n").nth(1).unwrap().lines().next().unwrap();
        assert_eq!(first, "1.75 0.75 0.25 255 200 0 255 3");
    }

    #[test]
    fn palette_follows_legend() {
        assert_eq!(palette(1), [255, 0, 255]);
        assert_eq!(palette(2), [75, 0, 75]);
        assert_eq!(palette(3), [255, 200, 0]);
        assert_eq!(palette(4), [91, 155, 213]);
        assert_eq!(palette(5), [0, 175, 0]);
        assert_eq!(palette(6), [255, 240, 150]);
        let mut used: Vec<usize> = LABEL_ORDER.to_vec();
        used.sort_unstable();
        assert_eq!(used, (0..19).collect::<Vec<_>>());
    }

    #[test]
    fn gaussians_use_opacity_alpha() {
        let g = SemanticGaussian::new([0.0; 3], [1.0; 3], [1.0, 0.0, 0.0, 0.0], 0.5, vec![]).unwrap();
        let field = ShField::new(0, 3, vec![0.1, 0.9, 0.2]).unwrap();
        let ply = export_ply_gaussians(&[g], &field);
        assert_eq!(vertex_count(&ply), 1);
        assert!(ply.ends_with("0 0 0 255 0 255 128 1\n"), "{ply}");
    }
}
