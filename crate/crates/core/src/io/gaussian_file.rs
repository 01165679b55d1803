//! Binary container for a fitted Gaussian set.
//!
//! Layout (little-endian): magic `SPHG`, version u16, count u32, channels
//! u16, SH degree u16, then per Gaussian: mean 3×f32, scale 3×f32, unit
//! quaternion `(w, x, y, z)` 4×f32, opacity f32, `(L+1)²·channels`
//! coefficients f32 (basis-major, channels fastest).

use super::Reader;
use crate::error::{Error, Result};
use crate::gaussian::{quat_norm, SemanticGaussian};
use crate::harmonics::{num_basis, ShField, MAX_DEGREE};
use std::path::Path;

pub const GAUSSIAN_MAGIC: &[u8; 4] = b"SPHG";
pub const GAUSSIAN_VERSION: u16 = 1;
/// Stored quaternions must be unit within this tolerance.
const QUAT_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianRecord {
    pub mean: [f32; 3],
    pub scale: [f32; 3],
    pub rotation: [f32; 4],
    pub opacity: f32,
    pub coeffs: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSetFile {
    pub channels: u16,
    pub degree: u16,
    pub records: Vec<GaussianRecord>,
}

impl GaussianSetFile {
    pub fn from_model(gaussians: &[SemanticGaussian], field: &ShField) -> Result<Self> {
        if gaussians.len() != field.len() {
            return Err(Error::invalid(format!(
                "{} gaussians but {} coefficient blocks",
                gaussians.len(),
                field.len()
            )));
        }
        let records = gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let n = quat_norm(g.rotation);
                GaussianRecord {
                    mean: g.mean.map(|v| v as f32),
                    scale: g.scale.map(|v| v as f32),
                    rotation: g.rotation.map(|v| (v / n) as f32),
                    opacity: g.opacity as f32,
                    coeffs: field.gaussian(i).iter().map(|&c| c as f32).collect(),
                }
            })
            .collect();
        Ok(Self {
            channels: u16::try_from(field.channels()).map_err(|_| Error::invalid("too many channels"))?,
            degree: field.degree() as u16,
            records,
        })
    }

    fn per_gaussian(&self) -> usize {
        num_basis(self.degree as usize) * self.channels as usize
    }

    /// Gaussians carry their coefficient block as semantics.
    pub fn to_model(&self) -> Result<(Vec<SemanticGaussian>, ShField)> {
        let mut gaussians = Vec::with_capacity(self.records.len());
        let mut coeffs = Vec::with_capacity(self.records.len() * self.per_gaussian());
        for r in &self.records {
            let c: Vec<f64> = r.coeffs.iter().map(|&v| v as f64).collect();
            coeffs.extend_from_slice(&c);
            gaussians.push(SemanticGaussian::new(
                r.mean.map(f64::from),
                r.scale.map(f64::from),
                r.rotation.map(f64::from),
                r.opacity as f64,
                c,
            )?);
        }
        let field = ShField::new(self.degree as usize, self.channels as usize, coeffs)?;
        Ok((gaussians, field))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GAUSSIAN_MAGIC);
        out.extend_from_slice(&GAUSSIAN_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.extend_from_slice(&self.degree.to_le_bytes());
        for r in &self.records {
            let fields = r.mean.iter().chain(&r.scale).chain(&r.rotation).chain([&r.opacity]);
            for v in fields.chain(&r.coeffs) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "gaussian file");
        if r.take(4)? != GAUSSIAN_MAGIC {
            return Err(Error::Format("gaussian file: bad magic".into()));
        }
        let version = r.u16()?;
        if version != GAUSSIAN_VERSION {
            return Err(Error::Format(format!("gaussian file: unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let channels = r.u16()?;
        let degree = r.u16()?;
        if degree as usize > MAX_DEGREE {
            return Err(Error::Format(format!(
                "gaussian file: SH degree {degree} above {MAX_DEGREE}"
            )));
        }
        let per = num_basis(degree as usize) * channels as usize;
        let record_bytes = 4 * (11 + per);
        if r.remaining() != count.saturating_mul(record_bytes) {
            return Err(Error::Format(format!(
                "gaussian file: {} payload bytes for {count} records of {record_bytes}",
                r.remaining()
            )));
        }
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let mut f = || r.f32();
            let mean = [f()?, f()?, f()?];
            let scale = [f()?, f()?, f()?];
            let rotation = [f()?, f()?, f()?, f()?];
            let opacity = f()?;
            let coeffs = (0..per).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            let n = rotation.iter().map(|q| q * q).sum::<f32>().sqrt();
            if !((n - 1.0).abs() <= QUAT_TOLERANCE) {
                return Err(Error::Format(format!(
                    "gaussian file: record {i} quaternion has norm {n}"
                )));
            }
            records.push(GaussianRecord {
                mean,
                scale,
                rotation,
                opacity,
                coeffs,
            });
        }
        Ok(Self {
            channels,
            degree,
            records,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
