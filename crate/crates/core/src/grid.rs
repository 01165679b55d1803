//! Regular voxel grids.
//!
//! Voxels are stored x-major with z varying fastest: the linear index of
//! `(i, j, k)` is `(i * Y + j) * Z + k`. Multi-channel payloads are stored
//! voxel-major with the channel varying fastest. Every module and file
//! format in the crate uses this one ordering.

use crate::error::{Error, Result};
use nalgebra::Vector3;

/// Geometry of a voxel grid: dimensions, pitch and the world position of
/// the grid's minimum corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    /// Meters per voxel.
    pub resolution: f64,
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], resolution: f64, origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("grid dims must be positive, got {dims:?}")));
        }
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::invalid(format!(
                "grid resolution must be positive, got {resolution}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(Self {
            dims,
            resolution,
            origin,
        })
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn unravel(&self, index: usize) -> [usize; 3] {
        let k = index % self.dims[2];
        let rest = index / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let r = self.resolution;
        Vector3::new(
            self.origin[0] + r * (i as f64 + 0.5),
            self.origin[1] + r * (j as f64 + 0.5),
            self.origin[2] + r * (k as f64 + 0.5),
        )
    }

    /// Axis-aligned world bounds `(min, max)` of the whole grid.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let min = Vector3::from(self.origin);
        let ext = Vector3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.resolution;
        (min, min + ext)
    }

    /// Inclusive range of voxel indices along `axis` whose centers fall in
    /// `[lo, hi]` (world units). `None` when no center does.
    pub(crate) fn index_range(&self, axis: usize, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let r = self.resolution;
        let o = self.origin[axis];
        let first = ((lo - o) / r - 0.5).ceil().max(0.0);
        let last = ((hi - o) / r - 0.5).floor();
        let n = self.dims[axis] as f64;
        if !first.is_finite() && first.is_sign_positive() {
            return None;
        }
        let last = if last.is_nan() { n - 1.0 } else { last.min(n - 1.0) };
        if last < first || first >= n {
            return None;
        }
        Some((first as usize, last as usize))
    }
}

/// A grid with a `channels`-wide payload per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T> {
    spec: GridSpec,
    channels: usize,
    data: Vec<T>,
}

/// Per-voxel class labels (0 = empty).
pub type LabelGrid = VoxelGrid<u8>;
/// Per-voxel class logits, channel 0 being the empty class.
pub type SemanticVolume = VoxelGrid<f64>;
/// Dense per-voxel feature vectors.
pub type FeatureVolume = VoxelGrid<f64>;
/// One scalar per voxel.
pub type ScalarGrid = VoxelGrid<f64>;

impl<T: Clone> VoxelGrid<T> {
    pub fn filled(spec: GridSpec, channels: usize, value: T) -> Self {
        Self {
            data: vec![value; spec.num_voxels() * channels],
            spec,
            channels,
        }
    }
}

impl<T> VoxelGrid<T> {
    pub fn from_vec(spec: GridSpec, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("voxel grid needs at least one channel"));
        }
        let expected = spec.num_voxels() * channels;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "payload length {} does not match {:?} x {} channels = {}",
                data.len(),
                spec.dims,
                channels,
                expected
            )));
        }
        Ok(Self { spec, channels, data })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dims(&self) -> [usize; 3] {
        self.spec.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_voxels(&self) -> usize {
        self.spec.num_voxels()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Payload of the voxel with linear index `index`.
    #[inline]
    pub fn voxel(&self, index: usize) -> &[T] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn voxel_mut(&mut self, index: usize) -> &mut [T] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> &[T] {
        self.voxel(self.spec.linear_index(i, j, k))
    }

    /// Same dims and channel count (grid placement is not compared).
    pub fn same_shape<U>(&self, other: &VoxelGrid<U>) -> bool {
        self.spec.dims == other.spec.dims && self.channels == other.channels
    }

    pub(crate) fn check_dims<U>(&self, other: &VoxelGrid<U>, what: &str) -> Result<()> {
        if self.spec.dims != other.spec.dims {
            return Err(Error::invalid(format!(
                "{what}: grid dims {:?} and {:?} differ",
                self.spec.dims, other.spec.dims
            )));
        }
        Ok(())
    }
}

impl LabelGrid {
    pub fn labels(spec: GridSpec, data: Vec<u8>) -> Result<Self> {
        Self::from_vec(spec, 1, data)
    }

    #[inline]
    pub fn label(&self, index: usize) -> u8 {
        self.data[index]
    }

    /// Nearest-neighbour upsampling by an integer factor along every axis.
    pub fn upsample_nearest(&self, factor: usize) -> Result<LabelGrid> {
        if factor == 0 {
            return Err(Error::invalid("upsampling factor must be positive"));
        }
        let [x, y, z] = self.spec.dims;
        let spec = GridSpec::new(
            [x * factor, y * factor, z * factor],
            self.spec.resolution / factor as f64,
            self.spec.origin,
        )?;
        let mut out = Vec::with_capacity(spec.num_voxels());
        for i in 0..x * factor {
            for j in 0..y * factor {
                for k in 0..z * factor {
                    out.push(self.data[self.spec.linear_index(i / factor, j / factor, k / factor)]);
                }
            }
        }
        LabelGrid::labels(spec, out)
    }
}

impl VoxelGrid<f64> {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        Self::filled(spec, channels, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-voxel argmax over channels; ties go to the lowest channel.
    pub fn argmax(&self) -> LabelGrid {
        let labels = self.data.chunks_exact(self.channels).map(|v| argmax(v) as u8).collect();
        LabelGrid {
            spec: self.spec,
            channels: 1,
            data: labels,
        }
    }
}

#[inline]
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dims: [usize; 3]) -> GridSpec {
        GridSpec::new(dims, 0.2, [1.0, -2.0, 0.5]).unwrap()
    }

    #[test]
    fn linear_index_is_z_fastest() {
        let g = spec([3, 4, 5]);
        assert_eq!(g.linear_index(0, 0, 1), 1);
        assert_eq!(g.linear_index(0, 1, 0), 5);
        assert_eq!(g.linear_index(1, 0, 0), 20);
        for idx in 0..g.num_voxels() {
            let [i, j, k] = g.unravel(idx);
            assert_eq!(g.linear_index(i, j, k), idx);
        }
    }

    #[test]
    fn voxel_center_rule() {
        let g = spec([3, 4, 5]);
        let c = g.voxel_center(2, 0, 4);
        assert!((c.x - (1.0 + 0.2 * 2.5)).abs() < 1e-15);
        assert!((c.y - (-2.0 + 0.2 * 0.5)).abs() < 1e-15);
        assert!((c.z - (0.5 + 0.2 * 4.5)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_geometry_and_payload() {
        assert!(GridSpec::new([0, 1, 1], 1.0, [0.0; 3]).is_err());
        assert!(GridSpec::new([1, 1, 1], 0.0, [0.0; 3]).is_err());
        assert!(VoxelGrid::from_vec(spec([2, 2, 2]), 2, vec![0.0; 15]).is_err());
        assert!(VoxelGrid::from_vec(spec([2, 2, 2]), 2, vec![0.0; 16]).is_ok());
    }

    #[test]
    fn index_range_covers_centers_inside() {
        let g = GridSpec::new([10, 1, 1], 1.0, [0.0; 3]).unwrap();
        assert_eq!(g.index_range(0, 2.5, 4.5), Some((2, 4)));
        assert_eq!(g.index_range(0, 2.6, 4.4), Some((3, 3)));
        assert_eq!(g.index_range(0, -5.0, 0.4), None);
        assert_eq!(g.index_range(0, 9.6, 20.0), None);
        assert_eq!(g.index_range(0, f64::NEG_INFINITY, f64::INFINITY), Some((0, 9)));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn upsample_repeats_labels() {
        let g = LabelGrid::labels(spec([1, 1, 2]), vec![3, 7]).unwrap();
        let up = g.upsample_nearest(2).unwrap();
        assert_eq!(up.dims(), [2, 2, 4]);
        assert_eq!(up.as_slice(), &[3, 3, 7, 7, 3, 3, 7, 7, 3, 3, 7, 7, 3, 3, 7, 7]);
        assert!((up.spec().resolution - 0.1).abs() < 1e-15);
    }
}
