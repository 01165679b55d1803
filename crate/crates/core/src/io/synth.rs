//! Synthetic labeled scenes and class-prototype feature volumes.

use super::scene_file::SceneFile;
use crate::error::{Error, Result};
use crate::grid::{FeatureVolume, GridSpec, LabelGrid};
use crate::losses::IGNORE_LABEL;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub const MINI_STREET: &str = "mini-street";
/// Class names of the street preset by label id (0 is empty).
pub const MINI_STREET_CLASSES: [&str; 7] = ["empty", "road", "sidewalk", "building", "car", "vegetation", "pole"];

/// Rasterized shapes in voxel-index coordinates; bounds are inclusive.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Box {
        label: u8,
        min: [usize; 3],
        max: [usize; 3],
    },
    /// Voxels with `|idx - center| <= radius`.
    Sphere { label: u8, center: [f64; 3], radius: f64 },
    /// Vertical; voxels with `|(i, j) - center| <= radius` and `z0 <= k <= z1`.
    Cylinder {
        label: u8,
        center: [f64; 2],
        z: [usize; 2],
        radius: f64,
    },
    /// The lowest `thickness` layers.
    Ground { label: u8, thickness: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneSpec {
    Primitives {
        grid: GridSpec,
        /// Semantic classes excluding empty.
        classes: u16,
        primitives: Vec<Primitive>,
    },
    Preset(String),
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::invalid(format!("primitive line {line}: bad number `{tok}`")))
}

/// Parses a primitive list:
///
/// ```text
/// grid X Y Z RESOLUTION      # required, first
/// classes N                  # optional, defaults to the largest label
/// box LABEL X0 Y0 Z0 X1 Y1 Z1
/// sphere LABEL CX CY CZ R
/// cylinder LABEL CX CY Z0 Z1 R
/// ground LABEL THICKNESS
/// ```
pub fn parse_primitives(text: &str) -> Result<SceneSpec> {
    let mut grid = None;
    let mut classes = None;
    let mut primitives = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks: Vec<&str> = raw.split('#').next().unwrap_or("").split_whitespace().collect();
        let Some((&head, args)) = toks.split_first() else {
            continue;
        };
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "primitive line {line}: `{head}` takes {n} values, got {}",
                    args.len()
                )))
            }
        };
        match head {
            "grid" => {
                arity(4)?;
                let dims = [
                    parse_num(args[0], line)?,
                    parse_num(args[1], line)?,
                    parse_num(args[2], line)?,
                ];
                grid = Some(GridSpec::new(dims, parse_num(args[3], line)?, [0.0; 3])?);
            }
            "classes" => {
                arity(1)?;
                classes = Some(parse_num(args[0], line)?);
            }
            _ if grid.is_none() => {
                return Err(Error::invalid(format!("primitive line {line}: `grid` must come first")));
            }
            "box" => {
                arity(7)?;
                let v: Vec<usize> = args[1..].iter().map(|t| parse_num(t, line)).collect::<Result<_>>()?;
                primitives.push(Primitive::Box {
                    label: parse_num(args[0], line)?,
                    min: [v[0], v[1], v[2]],
                    max: [v[3], v[4], v[5]],
                });
            }
            "sphere" => {
                arity(5)?;
                let v: Vec<f64> = args[1..].iter().map(|t| parse_num(t, line)).collect::<Result<_>>()?;
                primitives.push(Primitive::Sphere {
                    label: parse_num(args[0], line)?,
                    center: [v[0], v[1], v[2]],
                    radius: v[3],
                });
            }
            "cylinder" => {
                arity(6)?;
                primitives.push(Primitive::Cylinder {
                    label: parse_num(args[0], line)?,
                    center: [parse_num(args[1], line)?, parse_num(args[2], line)?],
                    z: [parse_num(args[3], line)?, parse_num(args[4], line)?],
                    radius: parse_num(args[5], line)?,
                });
            }
            "ground" => {
                arity(2)?;
                primitives.push(Primitive::Ground {
                    label: parse_num(args[0], line)?,
                    thickness: parse_num(args[1], line)?,
                });
            }
            other => {
                return Err(Error::invalid(format!(
                    "primitive line {line}: unknown shape `{other}`"
                )))
            }
        }
    }
    let grid = grid.ok_or_else(|| Error::invalid("primitive list has no `grid` line"))?;
    let max_label = primitives
        .iter()
        .map(|p| match p {
            Primitive::Box { label, .. }
            | Primitive::Sphere { label, .. }
            | Primitive::Cylinder { label, .. }
            | Primitive::Ground { label, .. } => *label,
        })
        .max()
        .unwrap_or(0);
    Ok(SceneSpec::Primitives {
        grid,
        classes: classes.unwrap_or(max_label as u16),
        primitives,
    })
}

fn rasterize(grid: &GridSpec, classes: u16, primitives: &[Primitive]) -> Result<LabelGrid> {
    let [nx, ny, nz] = grid.dims;
    let mut labels = vec![0u8; grid.num_voxels()];
    let out_of_bounds = |p: &Primitive| Error::invalid(format!("primitive {p:?} leaves grid {:?}", grid.dims));
    let within = |lo: f64, hi: f64, n: usize| lo >= 0.0 && hi <= (n - 1) as f64;
    for p in primitives {
        let label = match p {
            Primitive::Box { label, .. }
            | Primitive::Sphere { label, .. }
            | Primitive::Cylinder { label, .. }
            | Primitive::Ground { label, .. } => *label,
        };
        if label == IGNORE_LABEL || label as u16 > classes {
            return Err(Error::invalid(format!("primitive label {label} outside 0..={classes}")));
        }
        let mut fill = |i: usize, j: usize, k: usize| labels[grid.linear_index(i, j, k)] = label;
        match *p {
            Primitive::Box { min, max, .. } => {
                if (0..3).any(|a| min[a] > max[a] || max[a] >= grid.dims[a]) {
                    return Err(out_of_bounds(p));
                }
                for i in min[0]..=max[0] {
                    for j in min[1]..=max[1] {
                        for k in min[2]..=max[2] {
                            fill(i, j, k);
                        }
                    }
                }
            }
            Primitive::Sphere {
                center: c, radius: r, ..
            } => {
                if !(r >= 0.0) || (0..3).any(|a| !within(c[a] - r, c[a] + r, grid.dims[a])) {
                    return Err(out_of_bounds(p));
                }
                for i in 0..nx {
                    for j in 0..ny {
                        for k in 0..nz {
                            let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
                            if d2 <= r * r {
                                fill(i, j, k);
                            }
                        }
                    }
                }
            }
            Primitive::Cylinder {
                center: c,
                z,
                radius: r,
                ..
            } => {
                if !(r >= 0.0)
                    || !within(c[0] - r, c[0] + r, nx)
                    || !within(c[1] - r, c[1] + r, ny)
                    || z[0] > z[1]
                    || z[1] >= nz
                {
                    return Err(out_of_bounds(p));
                }
                for i in 0..nx {
                    for j in 0..ny {
                        if (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) <= r * r {
                            for k in z[0]..=z[1] {
                                fill(i, j, k);
                            }
                        }
                    }
                }
            }
            Primitive::Ground { thickness, .. } => {
                if thickness == 0 || thickness > nz {
                    return Err(out_of_bounds(p));
                }
                for i in 0..nx {
                    for j in 0..ny {
                        for k in 0..thickness {
                            fill(i, j, k);
                        }
                    }
                }
            }
        }
    }
    LabelGrid::labels(*grid, labels)
}

/// A 64×64×8 street at 0.2 m running along y: road, raised sidewalks,
/// planted verges, building rows at both x edges, cars, poles and tree
/// crowns.
fn mini_street(seed: u64) -> Result<(GridSpec, Vec<Primitive>)> {
    let grid = GridSpec::new([64, 64, 8], 0.2, [0.0; 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (road, sidewalk, building, car, vegetation, pole) = (1, 2, 3, 4, 5, 6);
    let mut p = vec![
        Primitive::Box {
            label: road,
            min: [24, 0, 0],
            max: [39, 63, 0],
        },
        Primitive::Box {
            label: sidewalk,
            min: [18, 0, 0],
            max: [23, 63, 1],
        },
        Primitive::Box {
            label: sidewalk,
            min: [40, 0, 0],
            max: [45, 63, 1],
        },
        Primitive::Box {
            label: vegetation,
            min: [14, 0, 0],
            max: [17, 63, 0],
        },
        Primitive::Box {
            label: vegetation,
            min: [46, 0, 0],
            max: [49, 63, 0],
        },
    ];
    for (x0, x1) in [(0, 13), (50, 63)] {
        let mut y = rng.random_range(0..3);
        while y < 60 {
            let len = rng.random_range(10..=20).min(63 - y);
            let top = rng.random_range(4..=7);
            p.push(Primitive::Box {
                label: building,
                min: [x0, y, 0],
                max: [x1, y + len, top],
            });
            y += len + rng.random_range(2..=4);
        }
    }
    for lane in [[26, 30], [33, 37]] {
        let mut y = rng.random_range(0..6);
        while y + 9 < 64 {
            let len = rng.random_range(7..=9);
            p.push(Primitive::Box {
                label: car,
                min: [lane[0], y, 1],
                max: [lane[1], y + len, 3],
            });
            y += len + rng.random_range(4..=12);
        }
    }
    for x in [15.5, 47.5] {
        let mut y = rng.random_range(3.0..6.0);
        while y < 60.0 {
            p.push(Primitive::Sphere {
                label: vegetation,
                center: [x, y, 4.0],
                radius: rng.random_range(1.2..2.0),
            });
            y += rng.random_range(8.0..12.0);
        }
    }
    for x in [20.0, 43.0] {
        for y in (6..64).step_by(14) {
            p.push(Primitive::Cylinder {
                label: pole,
                center: [x, y as f64],
                z: [2, 7],
                radius: 0.6,
            });
        }
    }
    Ok((grid, p))
}

/// Rasterizes a primitive list or named preset into a label scene.
pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<SceneFile> {
    let (grid, classes, primitives) = match spec {
        SceneSpec::Primitives {
            grid,
            classes,
            primitives,
        } => (*grid, *classes, primitives.clone()),
        SceneSpec::Preset(name) if name == MINI_STREET => {
            let (grid, p) = mini_street(seed)?;
            (grid, (MINI_STREET_CLASSES.len() - 1) as u16, p)
        }
        SceneSpec::Preset(name) => return Err(Error::invalid(format!("unknown preset `{name}`"))),
    };
    SceneFile::from_labels(&rasterize(&grid, classes, &primitives)?, classes)
}

/// Per-class unit prototypes plus `N(0, noise²)` per channel. Empty (and
/// ignored) voxels get a tenth of the empty prototype.
pub fn gen_features(
    labels: &LabelGrid,
    num_classes: usize,
    channels: usize,
    noise: f64,
    seed: u64,
) -> Result<FeatureVolume> {
    if channels < num_classes {
        return Err(Error::invalid(format!(
            "{channels} feature channels for {num_classes} classes"
        )));
    }
    if let Some(bad) = labels
        .as_slice()
        .iter()
        .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
    {
        return Err(Error::invalid(format!("label {bad} outside {num_classes} classes")));
    }
    let normal = Normal::new(0.0, noise).map_err(|_| Error::invalid(format!("noise {noise} is not a valid std")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(labels.num_voxels() * channels);
    for &l in labels.as_slice() {
        let (proto, scale) = match l {
            0 | IGNORE_LABEL => (&prototypes[0], 0.1),
            l => (&prototypes[l as usize], 1.0),
        };
        for &p in proto {
            let eps = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            data.push(scale * p + eps);
        }
    }
    FeatureVolume::from_vec(*labels.spec(), channels, data)
}
