//! Incoherent image formation: pupil mask, PSF from a phase map, OTF/MTF,
//! circular FFT convolution, and additive Gaussian noise.
//!
//! The PSF is h(phi) = |F(m o e^{j phi})|^2, shifted so the zero lag sits at
//! the grid center and normalized to unit sum. Because |e^{j phi}| = 1, the
//! normalizer sum |A|^2 = n^2 * sum m^2 does not depend on phi, which keeps
//! the phase gradient chain free of a normalizer term.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, WavemoError};
use crate::field::{fft2, fft2_real, fftshift, ifft2, ifft2_unnormalized, Field, GridSpec};
use crate::zernike::PhaseMap;

/// Scene or measurement; values nominally in [0, 1].
pub type Image = Field;

/// Binary aperture function.
#[derive(Debug, Clone)]
pub struct PupilMask {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl PupilMask {
    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(WavemoError::Argument("mask length does not match grid".into()));
        }
        if !values.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(WavemoError::Argument("mask values must be binary".into()));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(WavemoError::Argument("mask is empty".into()));
        }
        Ok(PupilMask { grid, values })
    }
}

/// Normalized point spread function, DC-centered (zero lag at pixel
/// (n/2, n/2)).
#[derive(Debug, Clone)]
pub struct Psf {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

/// Optical transfer function, frequency-indexed with DC at (0, 0).
#[derive(Debug, Clone)]
pub struct Otf {
    pub grid: GridSpec,
    pub values: Vec<Complex64>,
}

/// Modulation transfer function |OTF|, DC at (0, 0).
#[derive(Debug, Clone)]
pub struct Mtf {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

/// Binary disk of radius aperture_radius_frac * n/2 centered on the grid.
pub fn pupil_mask(grid: GridSpec) -> PupilMask {
    let n = grid.n;
    let mut values = vec![0.0; n * n];
    for iy in 0..n {
        for ix in 0..n {
            let (u, v) = grid.unit_coords(ix, iy);
            if (u * u + v * v).sqrt() <= 1.0 {
                values[iy * n + ix] = 1.0;
            }
        }
    }
    PupilMask { grid, values }
}

/// Intermediate state of the pupil-to-PSF map, retained so gradients can be
/// chained back through |DFT(m o e^{j phi})|^2.
#[derive(Debug, Clone)]
pub struct PupilForward {
    pub grid: GridSpec,
    /// P = m o e^{j phi}.
    pub pupil: Vec<Complex64>,
    /// A = DFT(P).
    pub spectrum: Vec<Complex64>,
    /// u = |A|^2, DC at (0, 0).
    pub intensity: Vec<f64>,
    /// sum of u; constant in phi (Parseval).
    pub norm: f64,
}

pub fn pupil_forward(mask: &PupilMask, phase: &PhaseMap) -> Result<PupilForward> {
    if mask.grid != phase.grid {
        return Err(WavemoError::Argument("mask and phase grids differ".into()));
    }
    let n = mask.grid.n;
    let pupil: Vec<Complex64> = mask
        .values
        .iter()
        .zip(&phase.values)
        .map(|(&m, &p)| {
            if m == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(p.cos(), p.sin())
            }
        })
        .collect();
    let mut spectrum = pupil.clone();
    fft2(&mut spectrum, n);
    let intensity: Vec<f64> = spectrum.iter().map(|a| a.norm_sqr()).collect();
    let norm: f64 = intensity.iter().sum();
    if norm <= 0.0 {
        return Err(WavemoError::Numerical("pupil carries no energy".into()));
    }
    Ok(PupilForward { grid: mask.grid, pupil, spectrum, intensity, norm })
}

impl PupilForward {
    /// Centered, normalized PSF.
    pub fn psf(&self) -> Psf {
        let mut values = fftshift(&self.intensity, self.grid.n);
        let inv = 1.0 / self.norm;
        for v in &mut values {
            *v *= inv;
        }
        Psf { grid: self.grid, values }
    }

    /// OTF of the normalized PSF, computed directly from the unshifted
    /// intensity.
    pub fn otf(&self) -> Otf {
        let n = self.grid.n;
        let mut values = fft2_real(&self.intensity, n);
        let inv = 1.0 / self.norm;
        for v in &mut values {
            *v *= inv;
        }
        Otf { grid: self.grid, values }
    }
}

/// Backpropagate a gradient w.r.t. the unshifted intensity u = |A|^2 into a
/// gradient w.r.t. the phase map (pixel space).
pub fn pupil_backward(fw: &PupilForward, grad_intensity: &[f64]) -> Vec<f64> {
    let n = fw.grid.n;
    let mut g_a: Vec<Complex64> = fw
        .spectrum
        .iter()
        .zip(grad_intensity)
        .map(|(a, &g)| 2.0 * g * a)
        .collect();
    ifft2_unnormalized(&mut g_a, n);
    fw.pupil
        .iter()
        .zip(&g_a)
        .map(|(p, gp)| -(p * gp.conj()).im)
        .collect()
}

/// h = shift-to-center(|DFT(m o e^{j phi})|^2) / sum.
pub fn psf(mask: &PupilMask, phase: &PhaseMap) -> Result<Psf> {
    Ok(pupil_forward(mask, phase)?.psf())
}

/// OTF = DFT(center-to-origin(psf)), MTF = |OTF|. Requires a normalized PSF.
pub fn otf_mtf(psf: &Psf) -> Result<(Otf, Mtf)> {
    let sum: f64 = psf.values.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(WavemoError::Contract(format!("PSF sum {sum} is not 1")));
    }
    let n = psf.grid.n;
    let unshifted = fftshift(&psf.values, n);
    let otf_values = fft2_real(&unshifted, n);
    let mtf_values: Vec<f64> = otf_values.iter().map(|v| v.norm()).collect();
    Ok((Otf { grid: psf.grid, values: otf_values }, Mtf { grid: psf.grid, values: mtf_values }))
}

/// Circular convolution of an image with a DC-centered PSF via spectral
/// multiplication.
pub fn convolve(image: &Image, psf: &Psf) -> Result<Image> {
    if image.grid != psf.grid {
        return Err(WavemoError::Argument("image and PSF grids differ".into()));
    }
    let n = image.grid.n;
    let unshifted = fftshift(&psf.values, n);
    let kernel = fft2_real(&unshifted, n);
    Ok(convolve_with_otf_values(image, &kernel))
}

/// Convolution when the kernel spectrum (DC at origin) is already known.
pub fn convolve_with_otf_values(image: &Image, otf: &[Complex64]) -> Image {
    let n = image.grid.n;
    let mut spec = fft2_real(&image.values, n);
    for (s, h) in spec.iter_mut().zip(otf) {
        *s *= h;
    }
    ifft2(&mut spec, n);
    Field { grid: image.grid, values: spec.iter().map(|v| v.re).collect() }
}

/// Adds i.i.d. Normal(0, sigma^2) per pixel, row-major draw order, no
/// clipping.
pub fn add_noise<R: Rng>(image: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    if sigma < 0.0 {
        return Err(WavemoError::Argument(format!("noise sigma {sigma} < 0")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| WavemoError::Numerical(e.to_string()))?;
    let values = image.values.iter().map(|&v| v + normal.sample(rng)).collect();
    Ok(Field { grid: image.grid, values })
}
