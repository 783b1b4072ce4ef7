//! Zernike basis on the discrete pupil grid (Noll indexing, Noll
//! normalization: unit RMS over the disk for j >= 2) and random aberration
//! sampling.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Result, WavemoError};
use crate::field::{Field, GridSpec};

/// Spatial phase delay in radians over the pupil grid; zero outside the
/// pupil disk.
pub type PhaseMap = Field;

/// Noll index j mapped to radial order n and azimuthal order m.
/// Even j carries the cos(m*theta) term, odd j the sin(m*theta) term.
fn noll_nm(j: usize) -> (u32, u32) {
    debug_assert!(j >= 1);
    let mut n = 0usize;
    let mut j1 = j - 1;
    while j1 > n {
        n += 1;
        j1 -= n;
    }
    let m = if n % 2 == 0 { 2 * ((j1 + 1) / 2) } else { 2 * (j1 / 2) + 1 };
    (n as u32, m as u32)
}

fn factorial(k: u32) -> f64 {
    (1..=k as u64).map(|v| v as f64).product()
}

fn radial(n: u32, m: u32, r: f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..=((n - m) / 2) {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * factorial(n - k) * r.powi((n - 2 * k) as i32)
            / (factorial(k) * factorial((n + m) / 2 - k) * factorial((n - m) / 2 - k));
    }
    acc
}

/// Evaluate the Noll-normalized Zernike polynomial j at unit-disk polar
/// coordinates (r, theta).
fn zernike_at(j: usize, r: f64, theta: f64) -> f64 {
    let (n, m) = noll_nm(j);
    let norm = if m == 0 {
        ((n + 1) as f64).sqrt()
    } else {
        (2.0 * (n + 1) as f64).sqrt()
    };
    let angular = if m == 0 {
        1.0
    } else if j % 2 == 0 {
        (m as f64 * theta).cos()
    } else {
        (m as f64 * theta).sin()
    };
    norm * radial(n, m, r) * angular
}

/// Ordered Zernike modes Z_1..Z_count evaluated on the grid.
#[derive(Debug, Clone)]
pub struct ZernikeBasis {
    pub grid: GridSpec,
    pub count: usize,
    pub modes: Vec<PhaseMap>,
}

/// One random aberration draw: per-mode coefficients in radians together
/// with the per-mode sigmas that generated them. Piston is always zero.
#[derive(Debug, Clone)]
pub struct AberrationSample {
    pub coeffs: Vec<f64>,
    pub sigmas: Vec<f64>,
}

/// Build the first `count` Noll modes on the pupil grid.
pub fn build_basis(grid: GridSpec, count: usize) -> Result<ZernikeBasis> {
    if count < 1 {
        return Err(WavemoError::Config(format!("mode count {count} < 1")));
    }
    let n = grid.n;
    let mut modes = Vec::with_capacity(count);
    for j in 1..=count {
        let mut field = Field::zeros(grid);
        for iy in 0..n {
            for ix in 0..n {
                let (u, v) = grid.unit_coords(ix, iy);
                let r = (u * u + v * v).sqrt();
                if r <= 1.0 {
                    let theta = v.atan2(u);
                    *field.at_mut(ix, iy) = zernike_at(j, r, theta);
                }
            }
        }
        modes.push(field);
    }
    Ok(ZernikeBasis { grid, count, modes })
}

/// Linear combination sum_j coeffs[j] * Z_j.
pub fn compose_phase(basis: &ZernikeBasis, coeffs: &[f64]) -> Result<PhaseMap> {
    if coeffs.len() != basis.count {
        return Err(WavemoError::Argument(format!(
            "coefficient length {} does not match basis count {}",
            coeffs.len(),
            basis.count
        )));
    }
    let mut out = Field::zeros(basis.grid);
    for (c, mode) in coeffs.iter().zip(&basis.modes) {
        if *c == 0.0 {
            continue;
        }
        for (o, m) in out.values.iter_mut().zip(&mode.values) {
            *o += c * m;
        }
    }
    Ok(out)
}

/// Adjoint of `compose_phase`: project a pixel-space gradient onto the
/// coefficient space, grad_c[j] = sum_px grad_phase * Z_j.
pub fn project_onto_basis(basis: &ZernikeBasis, grad_phase: &[f64]) -> Vec<f64> {
    basis
        .modes
        .iter()
        .map(|mode| mode.values.iter().zip(grad_phase).map(|(z, g)| z * g).sum())
        .collect()
}

/// Draw one aberration: sigma_j ~ U[lo, hi] per non-piston mode, then
/// coeff_j ~ Normal(0, sigma_j^2). Piston stays zero.
pub fn sample_aberration<R: Rng>(
    rng: &mut R,
    basis: &ZernikeBasis,
    sigma_lo: f64,
    sigma_hi: f64,
) -> Result<AberrationSample> {
    if sigma_lo < 0.0 || sigma_hi < sigma_lo {
        return Err(WavemoError::Argument(format!(
            "invalid sigma range [{sigma_lo}, {sigma_hi}]"
        )));
    }
    let sigma_dist = Uniform::new_inclusive(sigma_lo, sigma_hi);
    let mut coeffs = vec![0.0; basis.count];
    let mut sigmas = vec![0.0; basis.count];
    for j in 1..basis.count {
        let sigma = sigma_dist.sample(rng);
        sigmas[j] = sigma;
        coeffs[j] = Normal::new(0.0, sigma)
            .map_err(|e| WavemoError::Numerical(e.to_string()))?
            .sample(rng);
    }
    Ok(AberrationSample { coeffs, sigmas })
}
