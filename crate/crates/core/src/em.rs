//! Physical-layer kernels: wavelength, Rayleigh-Sommerfeld inter-atom
//! coupling, path loss, Rayleigh fading and planar steering vectors.
//!
//! Coordinates: layers lie in the x-y plane and the stack axis is z. The
//! feed array sits at z = 0 and metasurface layers at increasing z.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;
pub type Point = Vector3<f64>;

/// `a * b` through matrixmultiply's complex kernel, several times faster
/// than the generic product on the 100x100-by-100xK shapes of the cascade.
pub fn cmul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    assert_eq!(a.ncols(), b.nrows(), "cmul: inner dimensions differ");
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    let mut c = CMatrix::zeros(m, n);
    if m * k * n == 0 {
        return c;
    }
    // SAFETY: Complex64 is repr(C) [re, im]; all three buffers are dense
    // column-major with the dimensions asserted above.
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.as_ptr().cast(),
            1,
            m as isize,
            b.as_ptr().cast(),
            1,
            k as isize,
            [0.0, 0.0],
            c.as_mut_ptr().cast(),
            1,
            m as isize,
        );
    }
    c
}

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Planar, centered rectangular grid of meta-atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGeometry {
    pub rows: usize,
    pub cols: usize,
    /// Center-to-center spacing (m).
    pub atom_spacing: f64,
    /// Effective aperture of one atom (m^2).
    pub atom_area: f64,
    /// Position along the stack axis (m), measured from the feed plane.
    pub z_offset: f64,
}

impl LayerGeometry {
    pub fn new(rows: usize, cols: usize, atom_spacing: f64, atom_area: f64, z_offset: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain("layer needs at least one row and one column"));
        }
        if !(atom_spacing > 0.0 && atom_spacing.is_finite()) {
            return Err(Error::domain(format!("atom spacing must be positive, got {atom_spacing}")));
        }
        if !(atom_area > 0.0 && atom_area.is_finite()) {
            return Err(Error::domain(format!("atom area must be positive, got {atom_area}")));
        }
        if !(z_offset >= 0.0 && z_offset.is_finite()) {
            return Err(Error::domain(format!("z offset must be non-negative, got {z_offset}")));
        }
        Ok(Self { rows, cols, atom_spacing, atom_area, z_offset })
    }

    /// Square grid with half-wavelength spacing and `(lambda/2)^2` atoms.
    pub fn half_wavelength(rows: usize, cols: usize, lambda: f64, z_offset: f64) -> Result<Self> {
        let d = lambda / 2.0;
        Self::new(rows, cols, d, d * d, z_offset)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_z(&self, z_offset: f64) -> Result<Self> {
        Self::new(self.rows, self.cols, self.atom_spacing, self.atom_area, z_offset)
    }

    /// Atom `(r, c)` in row-major order.
    pub fn position(&self, r: usize, c: usize) -> Point {
        let x = (c as f64 - (self.cols as f64 - 1.0) / 2.0) * self.atom_spacing;
        let y = (r as f64 - (self.rows as f64 - 1.0) / 2.0) * self.atom_spacing;
        Point::new(x, y, self.z_offset)
    }

    pub fn positions(&self) -> Vec<Point> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| self.position(r, c))
            .collect()
    }
}

/// Transmission matrix between two atom sets; entry `(m, n)` couples source
/// atom `n` into destination atom `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexCoupling(pub CMatrix);

impl ComplexCoupling {
    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    /// (destination atoms, source atoms)
    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// One draw of an i.i.d. Rayleigh fading matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub matrix: CMatrix,
    pub seed: u64,
    pub mean_power: f64,
}

pub fn wavelength(carrier_hz: f64) -> Result<f64> {
    if !(carrier_hz > 0.0 && carrier_hz.is_finite()) {
        return Err(Error::domain(format!("carrier frequency must be positive, got {carrier_hz}")));
    }
    Ok(SPEED_OF_LIGHT / carrier_hz)
}

/// Rayleigh-Sommerfeld gain for a displacement `delta = dst - src`.
///
/// `w = (A cos(chi) / d) (1/(2 pi d) - i/lambda) exp(i 2 pi d / lambda)` with
/// `cos(chi) = |dz| / d`. Callers guarantee `delta != 0`.
pub(crate) fn rs_kernel(delta: &Point, lambda: f64, area: f64) -> Complex64 {
    let d = delta.norm();
    let k = 2.0 * PI / lambda;
    let radial = Complex64::new(1.0 / (2.0 * PI * d), -1.0 / lambda);
    area * delta.z.abs() / (d * d) * radial * Complex64::from_polar(1.0, k * d)
}

/// Kernel value and its derivative with respect to each component of
/// `delta`.
pub(crate) fn rs_kernel_with_grad(delta: &Point, lambda: f64, area: f64) -> (Complex64, [Complex64; 3]) {
    let d = delta.norm();
    let k = 2.0 * PI / lambda;
    let a = Complex64::new(1.0 / (2.0 * PI), 0.0);
    let b = Complex64::new(0.0, -1.0 / lambda);
    let phase = Complex64::from_polar(1.0, k * d);
    let (d2, d3, d4) = (d * d, d * d * d, d * d * d * d);
    // f(d) = e^{ikd} (a d^-3 + b d^-2); w = A |dz| f(d)
    let f = phase * (a / d3 + b / d2);
    let df = phase * (Complex64::i() * k * (a / d3 + b / d2) - 3.0 * a / d4 - 2.0 * b / d3);
    let abs_z = delta.z.abs();
    // same expression as rs_kernel so both paths agree bit for bit
    let w = area * abs_z / (d * d) * Complex64::new(1.0 / (2.0 * PI * d), -1.0 / lambda) * phase;
    let radial = area * abs_z * df / d;
    let gx = radial * delta.x;
    let gy = radial * delta.y;
    let gz = radial * delta.z + area * delta.z.signum() * f;
    (w, [gx, gy, gz])
}

pub fn rs_coefficient(src: &Point, dst: &Point, lambda: f64, area: f64) -> Result<Complex64> {
    if !(lambda > 0.0) || !(area > 0.0) {
        return Err(Error::domain("wavelength and atom area must be positive"));
    }
    let delta = dst - src;
    if delta.norm() == 0.0 {
        return Err(Error::Singularity("coincident source and destination atoms".into()));
    }
    Ok(rs_kernel(&delta, lambda, area))
}

/// Couples arbitrary atom positions; `area` is the source atom aperture.
pub fn coupling_between(src: &[Point], dst: &[Point], lambda: f64, area: f64) -> Result<ComplexCoupling> {
    if !(lambda > 0.0) || !(area > 0.0) {
        return Err(Error::domain("wavelength and atom area must be positive"));
    }
    let mut m = CMatrix::zeros(dst.len(), src.len());
    for (j, s) in src.iter().enumerate() {
        for (i, t) in dst.iter().enumerate() {
            let delta = t - s;
            if delta.norm() == 0.0 {
                return Err(Error::Singularity(format!("source atom {j} coincides with destination atom {i}")));
            }
            m[(i, j)] = rs_kernel(&delta, lambda, area);
        }
    }
    Ok(ComplexCoupling(m))
}

pub fn build_coupling(src: &LayerGeometry, dst: &LayerGeometry, lambda: f64) -> Result<ComplexCoupling> {
    if dst.z_offset <= src.z_offset {
        return Err(Error::Singularity(format!(
            "destination layer (z = {}) must lie beyond the source layer (z = {})",
            dst.z_offset, src.z_offset
        )));
    }
    coupling_between(&src.positions(), &dst.positions(), lambda, src.atom_area)
}

/// Large-scale power gain: free-space `(lambda / 4 pi)^2` at the 1 m
/// reference, then `distance^-exponent`.
pub fn path_loss(distance: f64, exponent: f64, lambda: f64) -> Result<f64> {
    if !(distance >= 1.0) {
        return Err(Error::domain(format!("distance {distance} m is below the 1 m reference")));
    }
    if !(exponent > 0.0) {
        return Err(Error::domain(format!("path-loss exponent must be positive, got {exponent}")));
    }
    if !(lambda > 0.0) {
        return Err(Error::domain("wavelength must be positive"));
    }
    Ok((lambda / (4.0 * PI)).powi(2) * distance.powf(-exponent))
}

pub fn rayleigh_channel(rx: usize, tx: usize, mean_power: f64, seed: u64) -> Result<ChannelRealization> {
    if rx == 0 || tx == 0 {
        return Err(Error::domain("channel dimensions must be at least 1"));
    }
    if !(mean_power > 0.0 && mean_power.is_finite()) {
        return Err(Error::domain(format!("mean power must be positive, got {mean_power}")));
    }
    let mut rng = rng::substream(seed, &[]);
    let sigma = (mean_power / 2.0).sqrt();
    // column-major fill keeps the draw order tied to (row, col) only
    let matrix = CMatrix::from_fn(rx, tx, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        Complex64::new(sigma * re, sigma * im)
    });
    Ok(ChannelRealization { matrix, seed, mean_power })
}

/// Unit propagation direction. Azimuth rotates in the x-z plane, elevation
/// tilts toward y; `(0, 0)` is broadside (+z).
pub fn direction(azimuth: f64, elevation: f64) -> Point {
    Point::new(
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
        elevation.cos() * azimuth.cos(),
    )
}

pub fn steering_at(positions: &[Point], azimuth: f64, elevation: f64, lambda: f64) -> CVector {
    let u = direction(azimuth, elevation);
    let k = 2.0 * PI / lambda;
    CVector::from_iterator(
        positions.len(),
        positions.iter().map(|p| Complex64::from_polar(1.0, k * p.dot(&u))),
    )
}

pub fn steering_vector(azimuth: f64, elevation: f64, geometry: &LayerGeometry, lambda: f64) -> CVector {
    steering_at(&geometry.positions(), azimuth, elevation, lambda)
}
