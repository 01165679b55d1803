//! Real spherical harmonics up to degree 4, semantic SH fields and the
//! projection that expands anchor features into SH coefficients.
//!
//! Basis functions are the orthonormal real harmonics without the
//! Condon–Shortley phase, ordered `(0,0), (1,-1), (1,0), (1,1), (2,-2), ...`.
//! They are evaluated as Cartesian polynomials of the unit direction.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const MAX_DEGREE: usize = 4;
/// Y_00 = 1 / (2 √π).
pub const Y00: f64 = 0.282_094_791_773_878_14;

/// Number of basis functions `(L+1)²` for degree `L`.
pub const fn num_basis(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

fn check_degree(degree: usize) -> Result<()> {
    if degree > MAX_DEGREE {
        return Err(Error::UnsupportedDegree(degree));
    }
    Ok(())
}

fn check_direction(dir: [f64; 3]) -> Result<()> {
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if !((n - 1.0).abs() <= 1e-9) {
        return Err(Error::invalid(format!(
            "direction {dir:?} is not unit length (norm {n})"
        )));
    }
    Ok(())
}

/// Basis values `Y_lm(direction)` for all `l <= degree`.
pub fn sh_basis(degree: usize, direction: [f64; 3]) -> Result<Vec<f64>> {
    check_degree(degree)?;
    check_direction(direction)?;
    let mut out = vec![0.0; num_basis(degree)];
    basis_into(degree, direction, &mut out);
    Ok(out)
}

// Normalization constants.
const C1: f64 = 0.488_602_511_902_919_9; // sqrt(3/(4π))
const C2A: f64 = 1.092_548_430_592_079_2; // 1/2 sqrt(15/π)
const C2B: f64 = 0.315_391_565_252_520_05; // 1/4 sqrt(5/π)
const C2C: f64 = 0.546_274_215_296_039_6; // 1/4 sqrt(15/π)
const C3A: f64 = 0.590_043_589_926_643_5; // 1/4 sqrt(35/(2π))
const C3B: f64 = 2.890_611_442_640_554; // 1/2 sqrt(105/π)
const C3C: f64 = 0.457_045_799_464_465_8; // 1/4 sqrt(21/(2π))
const C3D: f64 = 0.373_176_332_590_115_4; // 1/4 sqrt(7/π)
const C3E: f64 = 1.445_305_721_320_277; // 1/4 sqrt(105/π)
const C4A: f64 = 2.503_342_941_796_705; // 3/4 sqrt(35/π)
const C4B: f64 = 1.770_130_769_779_930_5; // 3/4 sqrt(35/(2π))
const C4C: f64 = 0.946_174_695_757_560; // 3/4 sqrt(5/π)
const C4D: f64 = 0.669_046_543_557_289_1; // 3/4 sqrt(5/(2π))
const C4E: f64 = 0.105_785_546_915_204_2; // 3/16 sqrt(1/π)
const C4F: f64 = 0.473_087_347_878_78; // 3/8 sqrt(5/π)
const C4G: f64 = 0.625_835_735_449_176_1; // 3/16 sqrt(35/π)

/// Fills `out[..(degree+1)²]`. The direction must already be unit length.
pub(crate) fn basis_into(degree: usize, dir: [f64; 3], out: &mut [f64]) {
    let [x, y, z] = dir;
    out[0] = Y00;
    if degree >= 1 {
        out[1] = C1 * y;
        out[2] = C1 * z;
        out[3] = C1 * x;
    }
    if degree >= 2 {
        out[4] = C2A * x * y;
        out[5] = C2A * y * z;
        out[6] = C2B * (3.0 * z * z - 1.0);
        out[7] = C2A * x * z;
        out[8] = C2C * (x * x - y * y);
    }
    if degree >= 3 {
        let z5 = 5.0 * z * z - 1.0;
        out[9] = C3A * y * (3.0 * x * x - y * y);
        out[10] = C3B * x * y * z;
        out[11] = C3C * y * z5;
        out[12] = C3D * z * (5.0 * z * z - 3.0);
        out[13] = C3C * x * z5;
        out[14] = C3E * z * (x * x - y * y);
        out[15] = C3A * x * (x * x - 3.0 * y * y);
    }
    if degree >= 4 {
        let z2 = z * z;
        let z7a = 7.0 * z2 - 1.0;
        let z7b = 7.0 * z2 - 3.0;
        out[16] = C4A * x * y * (x * x - y * y);
        out[17] = C4B * y * z * (3.0 * x * x - y * y);
        out[18] = C4C * x * y * z7a;
        out[19] = C4D * y * z * z7b;
        out[20] = C4E * (35.0 * z2 * z2 - 30.0 * z2 + 3.0);
        out[21] = C4D * x * z * z7b;
        out[22] = C4F * (x * x - y * y) * z7a;
        out[23] = C4B * x * z * (x * x - 3.0 * y * y);
        out[24] = C4G * (x * x * x * x - 6.0 * x * x * y * y + y * y * y * y);
    }
}

/// Basis values plus their Cartesian gradients `∂Y/∂(x,y,z)` of the
/// polynomial forms. Only the tangential part of a gradient is meaningful
/// on the sphere; callers project it.
pub(crate) fn basis_with_grad(degree: usize, dir: [f64; 3], out: &mut [f64], grad: &mut [[f64; 3]]) {
    basis_into(degree, dir, out);
    let [x, y, z] = dir;
    grad[0] = [0.0; 3];
    if degree >= 1 {
        grad[1] = [0.0, C1, 0.0];
        grad[2] = [0.0, 0.0, C1];
        grad[3] = [C1, 0.0, 0.0];
    }
    if degree >= 2 {
        grad[4] = [C2A * y, C2A * x, 0.0];
        grad[5] = [0.0, C2A * z, C2A * y];
        grad[6] = [0.0, 0.0, 6.0 * C2B * z];
        grad[7] = [C2A * z, 0.0, C2A * x];
        grad[8] = [2.0 * C2C * x, -2.0 * C2C * y, 0.0];
    }
    if degree >= 3 {
        let z5 = 5.0 * z * z - 1.0;
        grad[9] = [6.0 * C3A * x * y, 3.0 * C3A * (x * x - y * y), 0.0];
        grad[10] = [C3B * y * z, C3B * x * z, C3B * x * y];
        grad[11] = [0.0, C3C * z5, 10.0 * C3C * y * z];
        grad[12] = [0.0, 0.0, C3D * (15.0 * z * z - 3.0)];
        grad[13] = [C3C * z5, 0.0, 10.0 * C3C * x * z];
        grad[14] = [2.0 * C3E * x * z, -2.0 * C3E * y * z, C3E * (x * x - y * y)];
        grad[15] = [3.0 * C3A * (x * x - y * y), -6.0 * C3A * x * y, 0.0];
    }
    if degree >= 4 {
        let z2 = z * z;
        let z7a = 7.0 * z2 - 1.0;
        let z7b = 7.0 * z2 - 3.0;
        grad[16] = [
            C4A * (3.0 * x * x * y - y * y * y),
            C4A * (x * x * x - 3.0 * x * y * y),
            0.0,
        ];
        grad[17] = [
            6.0 * C4B * x * y * z,
            3.0 * C4B * z * (x * x - y * y),
            C4B * y * (3.0 * x * x - y * y),
        ];
        grad[18] = [C4C * y * z7a, C4C * x * z7a, 14.0 * C4C * x * y * z];
        grad[19] = [0.0, C4D * z * z7b, C4D * y * (21.0 * z2 - 3.0)];
        grad[20] = [0.0, 0.0, C4E * (140.0 * z2 * z - 60.0 * z)];
        grad[21] = [C4D * z * z7b, 0.0, C4D * x * (21.0 * z2 - 3.0)];
        grad[22] = [
            2.0 * C4F * x * z7a,
            -2.0 * C4F * y * z7a,
            14.0 * C4F * z * (x * x - y * y),
        ];
        grad[23] = [
            3.0 * C4B * z * (x * x - y * y),
            -6.0 * C4B * x * y * z,
            C4B * x * (x * x - 3.0 * y * y),
        ];
        grad[24] = [
            C4G * (4.0 * x * x * x - 12.0 * x * y * y),
            C4G * (4.0 * y * y * y - 12.0 * x * x * y),
            0.0,
        ];
    }
}

/// Semantic SH coefficients for a set of Gaussians. Each Gaussian owns
/// `(L+1)² x channels` values, basis-major with channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ShField {
    degree: usize,
    channels: usize,
    coeffs: Vec<f64>,
}

impl ShField {
    pub fn new(degree: usize, channels: usize, coeffs: Vec<f64>) -> Result<Self> {
        check_degree(degree)?;
        let per = num_basis(degree) * channels;
        if channels == 0 || !coeffs.len().is_multiple_of(per) {
            return Err(Error::invalid(format!(
                "{} coefficients is not a multiple of (L+1)^2 * channels = {per}",
                coeffs.len()
            )));
        }
        Ok(Self {
            degree,
            channels,
            coeffs,
        })
    }

    pub fn zeros(count: usize, degree: usize, channels: usize) -> Result<Self> {
        Self::new(degree, channels, vec![0.0; count * num_basis(degree) * channels])
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn per_gaussian(&self) -> usize {
        num_basis(self.degree) * self.channels
    }

    pub fn len(&self) -> usize {
        self.coeffs.len() / self.per_gaussian()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn gaussian(&self, i: usize) -> &[f64] {
        let n = self.per_gaussian();
        &self.coeffs[i * n..(i + 1) * n]
    }

    pub fn gaussian_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.per_gaussian();
        &mut self.coeffs[i * n..(i + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }
}

/// Evaluates `Σ_lm c_lm Y_lm(direction)` for every channel.
pub fn eval_ssh(coeffs: &[f64], degree: usize, channels: usize, direction: [f64; 3]) -> Result<Vec<f64>> {
    check_degree(degree)?;
    check_direction(direction)?;
    let nb = num_basis(degree);
    if coeffs.len() != nb * channels {
        return Err(Error::invalid(format!(
            "expected {} coefficients, got {}",
            nb * channels,
            coeffs.len()
        )));
    }
    let mut basis = vec![0.0; nb];
    basis_into(degree, direction, &mut basis);
    let mut out = vec![0.0; channels];
    combine(coeffs, &basis, &mut out);
    Ok(out)
}

/// `out[n] = Σ_b coeffs[b][n] basis[b]`.
#[inline]
pub(crate) fn combine(coeffs: &[f64], basis: &[f64], out: &mut [f64]) {
    let channels = out.len();
    out.fill(0.0);
    for (row, &y) in coeffs.chunks_exact(channels).zip(basis) {
        for (o, c) in out.iter_mut().zip(row) {
            *o += c * y;
        }
    }
}

/// Linear map from C-dimensional anchor features to SH coefficients,
/// with the weight of its soft orthogonality penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct ShProjection {
    degree: usize,
    channels: usize,
    features: usize,
    /// Row-major `((L+1)² · channels) x features`.
    pub weight: Vec<f64>,
    pub lambda: f64,
}

impl ShProjection {
    pub fn new(degree: usize, channels: usize, features: usize, weight: Vec<f64>, lambda: f64) -> Result<Self> {
        check_degree(degree)?;
        if channels == 0 || features == 0 {
            return Err(Error::invalid("projection needs positive channel and feature counts"));
        }
        let rows = num_basis(degree) * channels;
        if weight.len() != rows * features {
            return Err(Error::invalid(format!(
                "projection weight has {} entries, expected {rows} x {features}",
                weight.len()
            )));
        }
        if !(lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
        }
        Ok(Self {
            degree,
            channels,
            features,
            weight,
            lambda,
        })
    }

    /// Gaussian-initialized weights with variance `1 / features`.
    pub fn random(degree: usize, channels: usize, features: usize, lambda: f64, rng: &mut impl Rng) -> Result<Self> {
        let rows = num_basis(degree) * channels;
        let normal = Normal::new(0.0, 1.0 / (features as f64).sqrt()).expect("valid std");
        let weight = (0..rows * features).map(|_| normal.sample(rng)).collect();
        Self::new(degree, channels, features, weight, lambda)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn rows(&self) -> usize {
        num_basis(self.degree) * self.channels
    }

    /// `out = W f`.
    pub(crate) fn apply(&self, feature: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.weight.chunks_exact(self.features)) {
            *o = row.iter().zip(feature).map(|(w, f)| w * f).sum();
        }
    }
}

/// Projects each anchor feature (rows of a row-major `K x C` matrix) to its
/// SH coefficients.
pub fn expand_semantics(anchor_features: &[f64], proj: &ShProjection) -> Result<ShField> {
    let c = proj.features;
    if !anchor_features.len().is_multiple_of(c) {
        return Err(Error::invalid(format!(
            "anchor feature length {} is not a multiple of the projection's {c} input features",
            anchor_features.len()
        )));
    }
    let rows = proj.rows();
    let count = anchor_features.len() / c;
    let mut coeffs = vec![0.0; count * rows];
    for (f, out) in anchor_features.chunks_exact(c).zip(coeffs.chunks_exact_mut(rows)) {
        proj.apply(f, out);
    }
    ShField::new(proj.degree, proj.channels, coeffs)
}

/// `W Wᵀ - I` as a dense row-major `rows x rows` matrix.
fn gram_residual(proj: &ShProjection) -> Vec<f64> {
    let (rows, c) = (proj.rows(), proj.features);
    let w = &proj.weight;
    let mut m = vec![0.0; rows * rows];
    for a in 0..rows {
        for b in a..rows {
            let dot: f64 = w[a * c..(a + 1) * c]
                .iter()
                .zip(&w[b * c..(b + 1) * c])
                .map(|(x, y)| x * y)
                .sum();
            let v = if a == b { dot - 1.0 } else { dot };
            m[a * rows + b] = v;
            m[b * rows + a] = v;
        }
    }
    m
}

/// Soft orthogonality penalty `λ Σ_ij |(W Wᵀ - I)_ij|`.
pub fn orth_loss(proj: &ShProjection) -> f64 {
    proj.lambda * gram_residual(proj).iter().map(|v| v.abs()).sum::<f64>()
}

/// Loss and its gradient w.r.t. the row-major weight. The subgradient of
/// `|0|` is taken as 0.
pub fn orth_loss_grad(proj: &ShProjection) -> (f64, Vec<f64>) {
    let (rows, c) = (proj.rows(), proj.features);
    let m = gram_residual(proj);
    let loss = proj.lambda * m.iter().map(|v| v.abs()).sum::<f64>();
    // d/dW Σ|M| = (S + Sᵀ) W = 2 S W with S = sign(M) symmetric.
    let mut grad = vec![0.0; rows * c];
    for a in 0..rows {
        let out = &mut grad[a * c..(a + 1) * c];
        for b in 0..rows {
            let s = sign(m[a * rows + b]);
            if s == 0.0 {
                continue;
            }
            let scale = 2.0 * proj.lambda * s;
            for (o, w) in out.iter_mut().zip(&proj.weight[b * c..(b + 1) * c]) {
                *o += scale * w;
            }
        }
    }
    (loss, grad)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
