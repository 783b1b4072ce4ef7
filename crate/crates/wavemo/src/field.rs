//! Square real/complex fields on the pupil grid and the 2-D FFT machinery
//! shared by every module.
//!
//! DFT convention: the forward transform is unnormalized and the inverse
//! carries the 1/n^2 factor, so `sum |DFT(a)|^2 = n^2 * sum |a|^2`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Result, WavemoError};

/// Pupil-grid geometry: `n` pixels per side, pupil disk covering
/// `aperture_radius_frac` of the half-grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub n: usize,
    pub aperture_radius_frac: f64,
}

impl GridSpec {
    pub fn new(n: usize, aperture_radius_frac: f64) -> Result<Self> {
        if n < 8 {
            return Err(WavemoError::Config(format!("grid n = {n} < 8")));
        }
        if !n.is_power_of_two() {
            return Err(WavemoError::Config(format!("grid n = {n} is not a power of two")));
        }
        if !(aperture_radius_frac > 0.0 && aperture_radius_frac <= 1.0) {
            return Err(WavemoError::Config(format!(
                "aperture_radius_frac = {aperture_radius_frac} outside (0, 1]"
            )));
        }
        Ok(GridSpec { n, aperture_radius_frac })
    }

    /// Pupil radius in pixels.
    pub fn pupil_radius_px(&self) -> f64 {
        self.aperture_radius_frac * self.n as f64 / 2.0
    }

    /// Unit-disk coordinates of pixel (ix, iy); the disk center sits at
    /// pixel (n/2, n/2).
    pub fn unit_coords(&self, ix: usize, iy: usize) -> (f64, f64) {
        let c = self.n as f64 / 2.0;
        let r = self.pupil_radius_px();
        ((ix as f64 - c) / r, (iy as f64 - c) / r)
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Real n-by-n field, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: GridSpec) -> Self {
        Field { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(WavemoError::Argument(format!(
                "field length {} does not match grid {}x{}",
                values.len(),
                grid.n,
                grid.n
            )));
        }
        Ok(Field { grid, values })
    }

    pub fn n(&self) -> usize {
        self.grid.n
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.grid.n + ix]
    }

    pub fn at_mut(&mut self, ix: usize, iy: usize) -> &mut f64 {
        &mut self.values[iy * self.grid.n + ix]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_grid(&self, other: &Field) -> Result<()> {
        if self.grid != other.grid {
            return Err(WavemoError::Argument("grid mismatch between fields".into()));
        }
        Ok(())
    }
}

thread_local! {
    static PLAN_CACHE: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(n: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLAN_CACHE.with(|cache| {
        cache
            .borrow_mut()
            .entry((n, forward))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                planner.plan_fft(
                    n,
                    if forward { FftDirection::Forward } else { FftDirection::Inverse },
                )
            })
            .clone()
    })
}

fn transpose(data: &mut [Complex64], n: usize) {
    for iy in 0..n {
        for ix in (iy + 1)..n {
            data.swap(iy * n + ix, ix * n + iy);
        }
    }
}

fn fft2_dir(data: &mut [Complex64], n: usize, forward: bool) {
    let fft = plan(n, forward);
    fft.process(data);
    transpose(data, n);
    fft.process(data);
    transpose(data, n);
}

/// In-place unnormalized forward 2-D DFT.
pub fn fft2(data: &mut [Complex64], n: usize) {
    fft2_dir(data, n, true);
}

/// In-place unnormalized inverse 2-D DFT (no 1/n^2; callers scale when the
/// normalized inverse is meant).
pub fn ifft2_unnormalized(data: &mut [Complex64], n: usize) {
    fft2_dir(data, n, false);
}

/// In-place normalized inverse 2-D DFT (carries the 1/n^2 factor).
pub fn ifft2(data: &mut [Complex64], n: usize) {
    ifft2_unnormalized(data, n);
    let s = 1.0 / (n * n) as f64;
    for v in data.iter_mut() {
        *v *= s;
    }
}

pub fn fft2_real(field: &[f64], n: usize) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut data, n);
    data
}

/// Move DC from index (0,0) to the grid center (n/2, n/2). For even n this
/// is its own inverse.
pub fn fftshift<T: Copy + Default>(data: &[T], n: usize) -> Vec<T> {
    let h = n / 2;
    let mut out = vec![T::default(); n * n];
    for iy in 0..n {
        for ix in 0..n {
            let sx = (ix + h) % n;
            let sy = (iy + h) % n;
            out[sy * n + sx] = data[iy * n + ix];
        }
    }
    out
}

/// Signed frequency of index k on an n-point axis, in cycles per grid.
pub fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Magnitude |omega| of the 2-D frequency at flat index (kx, ky).
pub fn freq_radius(kx: usize, ky: usize, n: usize) -> f64 {
    let fx = signed_freq(kx, n);
    let fy = signed_freq(ky, n);
    (fx * fx + fy * fy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_small_n() {
        assert!(GridSpec::new(4, 0.5).is_err());
        assert!(GridSpec::new(8, 0.5).is_ok());
    }

    #[test]
    fn grid_rejects_bad_frac() {
        assert!(GridSpec::new(64, 0.0).is_err());
        assert!(GridSpec::new(64, 1.5).is_err());
    }

    #[test]
    fn fft_roundtrip() {
        let n = 16;
        let orig: Vec<Complex64> =
            (0..n * n).map(|i| Complex64::new((i % 7) as f64, (i % 3) as f64)).collect();
        let mut data = orig.clone();
        fft2(&mut data, n);
        ifft2(&mut data, n);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn parseval_with_unnormalized_forward() {
        let n = 16;
        let orig: Vec<Complex64> = (0..n * n)
            .map(|i| Complex64::new(((i * 37) % 11) as f64 * 0.1, ((i * 13) % 5) as f64 * 0.2))
            .collect();
        let mut data = orig.clone();
        fft2(&mut data, n);
        let lhs: f64 = data.iter().map(|v| v.norm_sqr()).sum();
        let rhs: f64 = orig.iter().map(|v| v.norm_sqr()).sum::<f64>() * (n * n) as f64;
        assert!((lhs - rhs).abs() < 1e-6 * rhs.abs().max(1.0));
    }

    #[test]
    fn fftshift_is_involution_for_even_n() {
        let n = 8;
        let data: Vec<f64> = (0..n * n).map(|i| i as f64).collect();
        let twice = fftshift(&fftshift(&data, n), n);
        assert_eq!(data, twice);
    }

    #[test]
    fn fft_against_direct_dft() {
        // Brute-force O(N^4) DFT on an 8x8 grid.
        let n = 8;
        let orig: Vec<Complex64> = (0..n * n)
            .map(|i| Complex64::new(((i * 31) % 17) as f64 * 0.07, ((i * 7) % 13) as f64 * 0.05))
            .collect();
        let mut fast = orig.clone();
        fft2(&mut fast, n);
        for ky in 0..n {
            for kx in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for iy in 0..n {
                    for ix in 0..n {
                        let ph = -2.0 * std::f64::consts::PI
                            * ((kx * ix) as f64 + (ky * iy) as f64)
                            / n as f64;
                        acc += orig[iy * n + ix] * Complex64::new(ph.cos(), ph.sin());
                    }
                }
                assert!((fast[ky * n + kx] - acc).norm() < 1e-9);
            }
        }
    }
}
