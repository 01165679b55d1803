//! Binary voxel scene container.
//!
//! Layout (little-endian): magic `SPHV`, version u16, dims 3×u32,
//! resolution f32, origin 3×f32, payload kind u8, N u16, payload in
//! x-major, z-fastest voxel order with channels fastest.

use super::Reader;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, LabelGrid, VoxelGrid};
use crate::losses::IGNORE_LABEL;
use std::path::Path;

pub const SCENE_MAGIC: &[u8; 4] = b"SPHV";
pub const SCENE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Labels = 0,
    /// `N + 1` f32 channels per voxel.
    Logits = 1,
    Scalar = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Labels(Vec<u8>),
    Logits(Vec<f32>),
    Scalar(Vec<f32>),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Labels(_) => PayloadKind::Labels,
            Payload::Logits(_) => PayloadKind::Logits,
            Payload::Scalar(_) => PayloadKind::Scalar,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub dims: [u32; 3],
    pub resolution: f32,
    pub origin: [f32; 3],
    /// Semantic class count excluding empty.
    pub n: u16,
    pub payload: Payload,
}

impl SceneFile {
    fn header(spec: &GridSpec) -> Result<([u32; 3], f32, [f32; 3])> {
        let mut dims = [0u32; 3];
        for (d, &s) in dims.iter_mut().zip(&spec.dims) {
            *d = u32::try_from(s).map_err(|_| Error::invalid(format!("grid dim {s} exceeds u32")))?;
        }
        Ok((dims, spec.resolution as f32, spec.origin.map(|o| o as f32)))
    }

    /// Labels in `0..=n` or [`IGNORE_LABEL`].
    pub fn from_labels(labels: &LabelGrid, n: u16) -> Result<Self> {
        if let Some(bad) = labels.as_slice().iter().find(|&&l| l != IGNORE_LABEL && l as u16 > n) {
            return Err(Error::invalid(format!("label {bad} exceeds class count {n}")));
        }
        let (dims, resolution, origin) = Self::header(labels.spec())?;
        Ok(Self {
            dims,
            resolution,
            origin,
            n,
            payload: Payload::Labels(labels.as_slice().to_vec()),
        })
    }

    /// A multichannel volume (class logits or features), stored with
    /// `N = channels - 1`.
    pub fn from_volume(volume: &VoxelGrid<f64>) -> Result<Self> {
        let n = u16::try_from(volume.channels() - 1)
            .map_err(|_| Error::invalid(format!("{} channels exceed the format", volume.channels())))?;
        let (dims, resolution, origin) = Self::header(volume.spec())?;
        Ok(Self {
            dims,
            resolution,
            origin,
            n,
            payload: Payload::Logits(volume.as_slice().iter().map(|&v| v as f32).collect()),
        })
    }

    pub fn from_scalar(grid: &VoxelGrid<f64>) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::invalid("scalar payload needs a single channel"));
        }
        let (dims, resolution, origin) = Self::header(grid.spec())?;
        Ok(Self {
            dims,
            resolution,
            origin,
            n: 0,
            payload: Payload::Scalar(grid.as_slice().iter().map(|&v| v as f32).collect()),
        })
    }

    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::new(
            self.dims.map(|d| d as usize),
            self.resolution as f64,
            self.origin.map(|o| o as f64),
        )
    }

    fn channels(&self) -> usize {
        match self.payload.kind() {
            PayloadKind::Logits => self.n as usize + 1,
            _ => 1,
        }
    }

    pub fn to_labels(&self) -> Result<LabelGrid> {
        match &self.payload {
            Payload::Labels(v) => LabelGrid::labels(self.spec()?, v.clone()),
            other => Err(Error::invalid(format!(
                "expected a label scene, found {:?}",
                other.kind()
            ))),
        }
    }

    /// Logit/feature or scalar payload widened to f64.
    pub fn to_volume(&self) -> Result<VoxelGrid<f64>> {
        match &self.payload {
            Payload::Logits(v) | Payload::Scalar(v) => {
                VoxelGrid::from_vec(self.spec()?, self.channels(), v.iter().map(|&x| x as f64).collect())
            }
            Payload::Labels(_) => Err(Error::invalid("expected a multichannel scene, found labels")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SCENE_MAGIC);
        out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.resolution.to_le_bytes());
        for o in self.origin {
            out.extend_from_slice(&o.to_le_bytes());
        }
        out.push(self.payload.kind() as u8);
        out.extend_from_slice(&self.n.to_le_bytes());
        match &self.payload {
            Payload::Labels(v) => out.extend_from_slice(v),
            Payload::Logits(v) | Payload::Scalar(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "scene file");
        if r.take(4)? != SCENE_MAGIC {
            return Err(Error::Format("scene file: bad magic".into()));
        }
        let version = r.u16()?;
        if version != SCENE_VERSION {
            return Err(Error::Format(format!("scene file: unsupported version {version}")));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?];
        let resolution = r.f32()?;
        let origin = [r.f32()?, r.f32()?, r.f32()?];
        let kind = r.u8()?;
        let n = r.u16()?;
        let voxels = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        let voxels = voxels.ok_or_else(|| Error::Format("scene file: voxel count overflows".into()))?;
        let (width, values) = match kind {
            0 => (1, voxels),
            1 => (4, voxels.saturating_mul(n as usize + 1)),
            2 => (4, voxels),
            other => return Err(Error::Format(format!("scene file: unknown payload kind {other}"))),
        };
        if r.remaining() != values.saturating_mul(width) {
            return Err(Error::Format(format!(
                "scene file: payload has {} bytes, header implies {}",
                r.remaining(),
                values.saturating_mul(width)
            )));
        }
        let floats = |r: &mut Reader| (0..values).map(|_| r.f32()).collect::<Result<Vec<_>>>();
        let payload = match kind {
            0 => Payload::Labels(r.take(values)?.to_vec()),
            1 => Payload::Logits(floats(&mut r)?),
            _ => Payload::Scalar(floats(&mut r)?),
        };
        let file = Self {
            dims,
            resolution,
            origin,
            n,
            payload,
        };
        file.spec().map_err(|e| Error::Format(format!("scene file: {e}")))?;
        if let Payload::Labels(v) = &file.payload {
            if let Some(bad) = v.iter().find(|&&l| l != IGNORE_LABEL && l as u16 > n) {
                return Err(Error::Format(format!(
                    "scene file: label {bad} exceeds class count {n}"
                )));
            }
        }
        Ok(file)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
