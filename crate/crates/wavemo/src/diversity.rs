//! Phase-diversity measurement stacks: capture K frames under known
//! modulations, the combined MTF of a modulation set, and radial frequency
//! profiles.

use rand::Rng;

use crate::error::{Result, WavemoError};
use crate::field::{freq_radius, GridSpec};
use crate::optics::{add_noise, convolve_with_otf_values, pupil_forward, Image, Mtf, PupilMask};
use crate::zernike::{AberrationSample, PhaseMap};

/// How a modulation set was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    None,
    RandomZernike,
    RandomGaussian,
    FocusSweep,
    MtfOpt,
    Learned,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::None => "none",
            Provenance::RandomZernike => "random_zernike",
            Provenance::RandomGaussian => "random_gaussian",
            Provenance::FocusSweep => "focus_sweep",
            Provenance::MtfOpt => "mtf_opt",
            Provenance::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Provenance::None),
            "random_zernike" => Ok(Provenance::RandomZernike),
            "random_gaussian" => Ok(Provenance::RandomGaussian),
            "focus_sweep" => Ok(Provenance::FocusSweep),
            "mtf_opt" => Ok(Provenance::MtfOpt),
            "learned" => Ok(Provenance::Learned),
            _ => Err(WavemoError::Argument(format!("unknown modulation kind '{s}'"))),
        }
    }
}

/// Ordered set of K known phase modulations.
#[derive(Debug, Clone)]
pub struct ModulationSet {
    pub patterns: Vec<PhaseMap>,
    pub provenance: Provenance,
    /// K x count coefficient matrix when the patterns are
    /// Zernike-parameterized.
    pub coeffs: Option<Vec<Vec<f64>>>,
}

impl ModulationSet {
    pub fn new(
        patterns: Vec<PhaseMap>,
        provenance: Provenance,
        coeffs: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if patterns.is_empty() {
            return Err(WavemoError::Argument("modulation set is empty".into()));
        }
        let grid = patterns[0].grid;
        if patterns.iter().any(|p| p.grid != grid) {
            return Err(WavemoError::Argument("modulation patterns on different grids".into()));
        }
        if provenance == Provenance::None {
            if patterns.len() != 1 || patterns[0].values.iter().any(|&v| v != 0.0) {
                return Err(WavemoError::Argument(
                    "provenance 'none' requires a single all-zero pattern".into(),
                ));
            }
        }
        if let Some(c) = &coeffs {
            if c.len() != patterns.len() {
                return Err(WavemoError::Argument(
                    "coefficient rows do not match pattern count".into(),
                ));
            }
        }
        Ok(ModulationSet { patterns, provenance, coeffs })
    }

    /// The K = 1 unmodulated baseline.
    pub fn none(grid: GridSpec) -> Self {
        ModulationSet {
            patterns: vec![PhaseMap::zeros(grid)],
            provenance: Provenance::None,
            coeffs: None,
        }
    }

    pub fn k(&self) -> usize {
        self.patterns.len()
    }

    pub fn grid(&self) -> GridSpec {
        self.patterns[0].grid
    }
}

/// K measured frames plus the capture configuration.
#[derive(Debug, Clone)]
pub struct MeasurementStack {
    pub frames: Vec<Image>,
    pub modulations: ModulationSet,
    pub noise_sigma: f64,
    /// Ground-truth aberration, carried in simulation only.
    pub aberration_truth: Option<AberrationSample>,
}

impl MeasurementStack {
    pub fn k(&self) -> usize {
        self.frames.len()
    }

    pub fn grid(&self) -> GridSpec {
        self.frames[0].grid
    }
}

/// frame_i = convolve(scene, psf(mask, aberration + gamma_i)) + noise_i,
/// noise drawn frame-sequentially from the one generator.
pub fn capture_stack<R: Rng>(
    scene: &Image,
    aberration: &PhaseMap,
    mods: &ModulationSet,
    mask: &PupilMask,
    sigma: f64,
    rng: &mut R,
) -> Result<MeasurementStack> {
    if mods.patterns.is_empty() {
        return Err(WavemoError::Argument("modulation set is empty".into()));
    }
    let grid = scene.grid;
    if aberration.grid != grid || mods.grid() != grid || mask.grid != grid {
        return Err(WavemoError::Argument("capture inputs on different grids".into()));
    }
    let mut frames = Vec::with_capacity(mods.k());
    for gamma in &mods.patterns {
        let mut total = aberration.clone();
        for (t, g) in total.values.iter_mut().zip(&gamma.values) {
            *t += g;
        }
        let fw = pupil_forward(mask, &total)?;
        let otf = fw.otf();
        let clean = convolve_with_otf_values(scene, &otf.values);
        frames.push(add_noise(&clean, sigma, rng)?);
    }
    Ok(MeasurementStack { frames, modulations: mods.clone(), noise_sigma: sigma, aberration_truth: None })
}

/// Per-frequency maximum over the MTFs of all modulated PSFs (the combined
/// MTF of the acquisition strategy).
pub fn combined_mtf(
    aberration: &PhaseMap,
    mods: &ModulationSet,
    mask: &PupilMask,
) -> Result<Mtf> {
    if mods.patterns.is_empty() {
        return Err(WavemoError::Argument("modulation set is empty".into()));
    }
    let grid = aberration.grid;
    if mods.grid() != grid || mask.grid != grid {
        return Err(WavemoError::Argument("combined_mtf inputs on different grids".into()));
    }
    let mut best = vec![0.0f64; grid.len()];
    for gamma in &mods.patterns {
        let mut total = aberration.clone();
        for (t, g) in total.values.iter_mut().zip(&gamma.values) {
            *t += g;
        }
        let fw = pupil_forward(mask, &total)?;
        let otf = fw.otf();
        for (b, o) in best.iter_mut().zip(&otf.values) {
            let m = o.norm();
            if m > *b {
                *b = m;
            }
        }
    }
    Ok(Mtf { grid, values: best })
}

/// Radial profile: bin centers in cycles/grid, mean magnitude per annulus.
#[derive(Debug, Clone)]
pub struct RadialProfile {
    pub centers: Vec<f64>,
    pub means: Vec<f64>,
}

/// Annular means of a frequency-indexed magnitude spectrum. Bins are linear
/// in |omega| up to Nyquist (n/2 cycles/grid); DC lands in bin 0 alone for
/// the default bin counts.
pub fn radial_profile(spec: &Mtf, nbins: usize) -> Result<RadialProfile> {
    if nbins < 2 {
        return Err(WavemoError::Argument(format!("nbins {nbins} < 2")));
    }
    let n = spec.grid.n;
    let nyquist = n as f64 / 2.0;
    let delta = nyquist / (nbins - 1) as f64;
    let mut sums = vec![0.0f64; nbins];
    let mut counts = vec![0usize; nbins];
    for ky in 0..n {
        for kx in 0..n {
            let r = freq_radius(kx, ky, n);
            if r > nyquist {
                continue;
            }
            let bin = (r / delta).round() as usize;
            if bin < nbins {
                sums[bin] += spec.values[ky * n + kx];
                counts[bin] += 1;
            }
        }
    }
    let centers = (0..nbins).map(|b| b as f64 * delta).collect();
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(RadialProfile { centers, means })
}
