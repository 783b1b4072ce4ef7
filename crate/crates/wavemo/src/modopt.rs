//! Modulation strategies: fixed baselines (none, random Zernike, energy-
//! matched random Gaussian, focus sweep), direct smooth-max MTF optimization
//! of modulation coefficients, and end-to-end learning of modulations
//! through the differentiable capture + proxy-reconstruction chain.
//!
//! Learned modulations are produced by a two-layer leaky-ReLU MLP applied to
//! a fixed all-ones input; its output is the K x count Zernike coefficient
//! matrix of the modulation set.

use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adam::Adam;
use crate::diversity::{ModulationSet, Provenance};
use crate::error::{Result, WavemoError};
use crate::field::{fft2_real, ifft2_unnormalized, Field};
use crate::io;
use crate::metrics::psnr;
use crate::optics::{add_noise, pupil_backward, pupil_forward, Image, PupilForward, PupilMask};
use crate::proxy::{proxy_forward, proxy_loss_grads, ProxyAdam, ProxyParams};
use crate::zernike::{
    compose_phase, project_onto_basis, sample_aberration, PhaseMap, ZernikeBasis,
};

const LEAKY_SLOPE: f64 = 0.01;

/// Two-layer MLP with a fixed all-ones input; the output vector is reshaped
/// into K rows of Zernike coefficients.
#[derive(Debug, Clone)]
pub struct ModMlp {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// hidden_dim x input_dim, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// output_dim x hidden_dim, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Forward activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl ModMlp {
    /// Weights ~ Normal(0, 1/fan_in), biases zero.
    pub fn new<R: Rng>(input_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut R) -> Result<Self> {
        if input_dim < 1 || hidden_dim < 1 || output_dim < 1 {
            return Err(WavemoError::Argument("MLP dimensions must be positive".into()));
        }
        let n1 = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt())
            .map_err(|e| WavemoError::Numerical(e.to_string()))?;
        let n2 = Normal::new(0.0, 1.0 / (hidden_dim as f64).sqrt())
            .map_err(|e| WavemoError::Numerical(e.to_string()))?;
        Ok(ModMlp {
            input_dim,
            hidden_dim,
            output_dim,
            w1: (0..hidden_dim * input_dim).map(|_| n1.sample(rng)).collect(),
            b1: vec![0.0; hidden_dim],
            w2: (0..output_dim * hidden_dim).map(|_| n2.sample(rng)).collect(),
            b2: vec![0.0; output_dim],
        })
    }

    pub fn forward(&self) -> (Vec<f64>, MlpCache) {
        let mut pre = vec![0.0; self.hidden_dim];
        for h in 0..self.hidden_dim {
            // the input is the all-ones vector, so the matrix product is a
            // row sum
            pre[h] = self.w1[h * self.input_dim..(h + 1) * self.input_dim].iter().sum::<f64>()
                + self.b1[h];
        }
        let act: Vec<f64> =
            pre.iter().map(|&p| if p >= 0.0 { p } else { LEAKY_SLOPE * p }).collect();
        let mut out = vec![0.0; self.output_dim];
        for o in 0..self.output_dim {
            let row = &self.w2[o * self.hidden_dim..(o + 1) * self.hidden_dim];
            out[o] = row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>() + self.b2[o];
        }
        (out, MlpCache { pre, act })
    }

    /// Gradient of a scalar loss w.r.t. all parameters given its gradient
    /// w.r.t. the output vector; returned in `params_flat` order.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64]) -> Vec<f64> {
        let mut grad_w2 = vec![0.0; self.w2.len()];
        let mut grad_act = vec![0.0; self.hidden_dim];
        for o in 0..self.output_dim {
            for h in 0..self.hidden_dim {
                grad_w2[o * self.hidden_dim + h] = grad_out[o] * cache.act[h];
                grad_act[h] += grad_out[o] * self.w2[o * self.hidden_dim + h];
            }
        }
        let grad_pre: Vec<f64> = grad_act
            .iter()
            .zip(&cache.pre)
            .map(|(g, &p)| if p >= 0.0 { *g } else { LEAKY_SLOPE * g })
            .collect();
        let mut flat = Vec::with_capacity(self.n_params());
        for h in 0..self.hidden_dim {
            for _ in 0..self.input_dim {
                flat.push(grad_pre[h]);
            }
        }
        flat.extend_from_slice(&grad_pre);
        flat.extend_from_slice(&grad_w2);
        flat.extend_from_slice(grad_out);
        flat
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        flat.extend_from_slice(&self.w1);
        flat.extend_from_slice(&self.b1);
        flat.extend_from_slice(&self.w2);
        flat.extend_from_slice(&self.b2);
        flat
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for dst in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let len = dst.len();
            dst.copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
    }
}

/// Build the modulation set encoded by the MLP output.
pub fn mlp_modulations(mlp: &ModMlp, basis: &ZernikeBasis, k: usize) -> Result<ModulationSet> {
    if mlp.output_dim != k * basis.count {
        return Err(WavemoError::Argument(format!(
            "MLP output {} does not match K x count = {}",
            mlp.output_dim,
            k * basis.count
        )));
    }
    let (out, _) = mlp.forward();
    let coeffs: Vec<Vec<f64>> =
        out.chunks(basis.count).map(|c| c.to_vec()).collect();
    let patterns = coeffs
        .iter()
        .map(|c| compose_phase(basis, c))
        .collect::<Result<Vec<_>>>()?;
    ModulationSet::new(patterns, Provenance::Learned, Some(coeffs))
}

/// Mean of sigma^2 for sigma ~ U[lo, hi].
fn mean_sigma_sq(lo: f64, hi: f64) -> f64 {
    if hi == lo {
        lo * lo
    } else {
        (hi.powi(3) - lo.powi(3)) / (3.0 * (hi - lo))
    }
}

/// Non-learned modulation baselines.
///
/// * `none` — the single zero pattern.
/// * `random_zernike` — coefficients drawn like aberrations.
/// * `random_gaussian` — per-pixel Gaussian phase inside the pupil disk,
///   variance matched to the expected pixel variance of the random-Zernike
///   baseline.
/// * `focus_sweep` — pure defocus swept linearly over [-amp, +amp].
pub fn generate_baseline(
    kind: Provenance,
    basis: &ZernikeBasis,
    k: usize,
    sigma_lo: f64,
    sigma_hi: f64,
    focus_amp: f64,
    seed: u64,
) -> Result<ModulationSet> {
    if k < 1 {
        return Err(WavemoError::Argument("modulation count K must be >= 1".into()));
    }
    let grid = basis.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        Provenance::None => {
            if k != 1 {
                return Err(WavemoError::Argument("kind 'none' requires K = 1".into()));
            }
            Ok(ModulationSet::none(grid))
        }
        Provenance::RandomZernike => {
            let mut patterns = Vec::with_capacity(k);
            let mut coeffs = Vec::with_capacity(k);
            for _ in 0..k {
                let s = sample_aberration(&mut rng, basis, sigma_lo, sigma_hi)?;
                patterns.push(compose_phase(basis, &s.coeffs)?);
                coeffs.push(s.coeffs);
            }
            ModulationSet::new(patterns, kind, Some(coeffs))
        }
        Provenance::RandomGaussian => {
            let n = grid.n;
            let in_disk: Vec<bool> = (0..grid.len())
                .map(|i| {
                    let (u, v) = grid.unit_coords(i % n, i / n);
                    u * u + v * v <= 1.0
                })
                .collect();
            let disk_px = in_disk.iter().filter(|&&d| d).count() as f64;
            // match the expected per-pixel phase variance of the
            // random-Zernike baseline: E[sigma^2] * sum_j mean_disk(Z_j^2)
            // over the non-piston modes
            let mode_energy: f64 = basis
                .modes
                .iter()
                .skip(1)
                .map(|z| {
                    z.values
                        .iter()
                        .zip(&in_disk)
                        .filter(|(_, &d)| d)
                        .map(|(v, _)| v * v)
                        .sum::<f64>()
                        / disk_px
                })
                .sum();
            let sigma_px = (mean_sigma_sq(sigma_lo, sigma_hi) * mode_energy).sqrt();
            let normal = Normal::new(0.0, sigma_px)
                .map_err(|e| WavemoError::Numerical(e.to_string()))?;
            let mut patterns = Vec::with_capacity(k);
            for _ in 0..k {
                let values = in_disk
                    .iter()
                    .map(|&d| if d { normal.sample(&mut rng) } else { 0.0 })
                    .collect();
                patterns.push(Field { grid, values });
            }
            ModulationSet::new(patterns, kind, None)
        }
        Provenance::FocusSweep => {
            if basis.count < 4 {
                return Err(WavemoError::Argument("focus sweep needs at least 4 modes".into()));
            }
            let mut patterns = Vec::with_capacity(k);
            let mut coeffs = Vec::with_capacity(k);
            for i in 0..k {
                let a = if k == 1 {
                    0.0
                } else {
                    -focus_amp + 2.0 * focus_amp * i as f64 / (k - 1) as f64
                };
                let mut c = vec![0.0; basis.count];
                c[3] = a;
                patterns.push(compose_phase(basis, &c)?);
                coeffs.push(c);
            }
            ModulationSet::new(patterns, kind, Some(coeffs))
        }
        Provenance::MtfOpt | Provenance::Learned => Err(WavemoError::Argument(format!(
            "'{}' modulations are produced by an optimizer, not a baseline generator",
            kind.as_str()
        ))),
    }
}

/// Smooth per-frequency maximum tau * log sum exp(m_i / tau) with its
/// softmax weights.
fn smooth_max(vals: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let top = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|&v| ((v - top) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    let val = top + tau * z.ln();
    let weights = exps.iter().map(|e| e / z).collect();
    (val, weights)
}

/// Options for direct MTF optimization of modulation coefficients.
#[derive(Debug, Clone)]
pub struct MtfOptOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub seed: u64,
    /// Held-out aberration draws used to pick the best iterate.
    pub val_draws: usize,
    pub val_every: usize,
}

impl Default for MtfOptOptions {
    fn default() -> Self {
        MtfOptOptions {
            iterations: 400,
            learning_rate: 0.1,
            tau: 0.05,
            sigma_lo: 5.0,
            sigma_hi: 6.0,
            seed: 0,
            val_draws: 5,
            val_every: 20,
        }
    }
}

/// Negative mean smooth-max MTF of a coefficient matrix under one
/// aberration, with the gradient w.r.t. every coefficient.
fn mtf_objective(
    coeffs: &[Vec<f64>],
    aberration: &PhaseMap,
    mask: &PupilMask,
    basis: &ZernikeBasis,
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let grid = basis.grid;
    let npx = grid.len();
    let k = coeffs.len();
    let mut forwards: Vec<PupilForward> = Vec::with_capacity(k);
    let mut otfs: Vec<Vec<Complex64>> = Vec::with_capacity(k);
    for c in coeffs {
        let gamma = compose_phase(basis, c)?;
        let mut total = aberration.clone();
        for (t, g) in total.values.iter_mut().zip(&gamma.values) {
            *t += g;
        }
        let fw = pupil_forward(mask, &total)?;
        otfs.push(fw.otf().values);
        forwards.push(fw);
    }

    let mut loss = 0.0;
    let mut g_otfs =
        vec![vec![Complex64::new(0.0, 0.0); npx]; if want_grad { k } else { 0 }];
    let mut mags = vec![0.0; k];
    for w in 0..npx {
        for i in 0..k {
            mags[i] = otfs[i][w].norm();
        }
        let (val, weights) = smooth_max(&mags, tau);
        loss -= val / npx as f64;
        if want_grad {
            for i in 0..k {
                if mags[i] > 1e-12 {
                    // d|H|/dH chained with dL/d|H| = -w_i / npx
                    g_otfs[i][w] = -(weights[i] / npx as f64) * otfs[i][w] / mags[i];
                }
            }
        }
    }

    let mut grads = Vec::with_capacity(k);
    if want_grad {
        for (fw, g_otf) in forwards.iter().zip(&g_otfs) {
            let mut g = g_otf.clone();
            ifft2_unnormalized(&mut g, grid.n);
            let grad_u: Vec<f64> = g.iter().map(|v| v.re / fw.norm).collect();
            let grad_phase = pupil_backward(fw, &grad_u);
            grads.push(project_onto_basis(basis, &grad_phase));
        }
    }
    Ok((loss, grads))
}

/// The smooth-max MTF objective and its coefficient gradient, exposed for
/// external finite-difference verification.
pub fn mtf_objective_for_check(
    coeffs: &[Vec<f64>],
    aberration: &PhaseMap,
    mask: &PupilMask,
    basis: &ZernikeBasis,
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    mtf_objective(coeffs, aberration, mask, basis, tau, true)
}

/// Directly optimize a K x count coefficient matrix to maximize the smooth
/// combined MTF, averaged over random aberrations. Returns the best iterate
/// under a fixed validation set of aberration draws, plus the per-iteration
/// training objective.
pub fn mtf_direct_opt(
    basis: &ZernikeBasis,
    mask: &PupilMask,
    k: usize,
    opts: &MtfOptOptions,
) -> Result<(ModulationSet, Vec<f64>)> {
    if k < 1 {
        return Err(WavemoError::Argument("modulation count K must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // start from the random-Zernike baseline
    let mut coeffs: Vec<Vec<f64>> = (0..k)
        .map(|_| sample_aberration(&mut rng, basis, opts.sigma_lo, opts.sigma_hi).map(|s| s.coeffs))
        .collect::<Result<_>>()?;
    let val_phases: Vec<PhaseMap> = (0..opts.val_draws)
        .map(|_| {
            let s = sample_aberration(&mut rng, basis, opts.sigma_lo, opts.sigma_hi)?;
            compose_phase(basis, &s.coeffs)
        })
        .collect::<Result<_>>()?;
    let validate = |c: &[Vec<f64>]| -> Result<f64> {
        let mut total = 0.0;
        for phase in &val_phases {
            total += mtf_objective(c, phase, mask, basis, opts.tau, false)?.0;
        }
        Ok(total / val_phases.len().max(1) as f64)
    };

    let mut opt = Adam::new(k * basis.count, opts.learning_rate);
    let mut best_coeffs = coeffs.clone();
    let mut best_val = validate(&coeffs)?;
    let mut history = Vec::with_capacity(opts.iterations);
    for it in 0..opts.iterations {
        let s = sample_aberration(&mut rng, basis, opts.sigma_lo, opts.sigma_hi)?;
        let phase = compose_phase(basis, &s.coeffs)?;
        let (loss, grads) = mtf_objective(&coeffs, &phase, mask, basis, opts.tau, true)?;
        if !loss.is_finite() {
            return Err(WavemoError::Numerical(format!("MTF objective diverged at iteration {it}")));
        }
        history.push(loss);
        let mut flat: Vec<f64> = coeffs.iter().flatten().cloned().collect();
        let gflat: Vec<f64> = grads.iter().flatten().cloned().collect();
        opt.step(&mut flat, &gflat);
        for (i, c) in coeffs.iter_mut().enumerate() {
            c.copy_from_slice(&flat[i * basis.count..(i + 1) * basis.count]);
        }
        if (it + 1) % opts.val_every == 0 || it + 1 == opts.iterations {
            let v = validate(&coeffs)?;
            if v < best_val {
                best_val = v;
                best_coeffs = coeffs.clone();
            }
        }
    }
    let patterns = best_coeffs
        .iter()
        .map(|c| compose_phase(basis, c))
        .collect::<Result<Vec<_>>>()?;
    let mods = ModulationSet::new(patterns, Provenance::MtfOpt, Some(best_coeffs))?;
    Ok((mods, history))
}

/// Options for end-to-end modulation learning.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub noise_sigma: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub seed: u64,
    /// Refresh the history's eval-PSNR column every this many iterations.
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iterations: 3000,
            learning_rate: 1e-2,
            hidden_dim: 64,
            noise_sigma: 0.01,
            sigma_lo: 5.0,
            sigma_hi: 6.0,
            seed: 0,
            log_every: 50,
        }
    }
}

/// One differentiable pass through capture + proxy reconstruction: returns
/// the loss, the MLP parameter gradient, and the proxy parameter gradients.
pub fn end_to_end_loss_grads(
    scene: &Image,
    aberration: &PhaseMap,
    mlp: &ModMlp,
    proxy: &ProxyParams,
    mask: &PupilMask,
    basis: &ZernikeBasis,
    noise: Option<&[Image]>,
) -> Result<(f64, Vec<f64>, crate::proxy::ProxyGrads)> {
    let grid = basis.grid;
    let n = grid.n;
    let npx = grid.len();
    let k = proxy.k();
    if mlp.output_dim != k * basis.count {
        return Err(WavemoError::Argument("MLP output does not match K x count".into()));
    }
    let (out, cache) = mlp.forward();
    let coeff_rows: Vec<&[f64]> = out.chunks(basis.count).collect();

    let scene_spec = fft2_real(&scene.values, n);
    let mut forwards = Vec::with_capacity(k);
    let mut frames = Vec::with_capacity(k);
    for (i, row) in coeff_rows.iter().enumerate() {
        let gamma = compose_phase(basis, row)?;
        let mut total = aberration.clone();
        for (t, g) in total.values.iter_mut().zip(&gamma.values) {
            *t += g;
        }
        let fw = pupil_forward(mask, &total)?;
        let otf = fw.otf();
        let mut spec: Vec<Complex64> =
            scene_spec.iter().zip(&otf.values).map(|(x, h)| x * h).collect();
        ifft2_unnormalized(&mut spec, n);
        let inv_n2 = 1.0 / npx as f64;
        let mut values: Vec<f64> = spec.iter().map(|v| v.re * inv_n2).collect();
        if let Some(noise_imgs) = noise {
            for (v, e) in values.iter_mut().zip(&noise_imgs[i].values) {
                *v += e;
            }
        }
        frames.push(Field { grid, values });
        forwards.push(fw);
    }
    let mods = ModulationSet::new(
        coeff_rows.iter().map(|r| compose_phase(basis, r)).collect::<Result<_>>()?,
        Provenance::Learned,
        Some(coeff_rows.iter().map(|r| r.to_vec()).collect()),
    )?;
    let stack = crate::diversity::MeasurementStack {
        frames,
        modulations: mods,
        noise_sigma: 0.0,
        aberration_truth: None,
    };

    let (loss, proxy_grads, grad_frames) = proxy_loss_grads(scene, &stack, proxy)?;

    // chain each frame gradient back to the modulation coefficients:
    // frame = Re IDFT(H X)/n^2, so G_H = conj(X) DFT(G_frame) / n^2, then
    // G_u = Re IDFT_unnorm(G_H) / S and the pupil/basis adjoints
    let inv_n2 = 1.0 / npx as f64;
    let mut grad_out = vec![0.0; mlp.output_dim];
    for (i, (fw, gf)) in forwards.iter().zip(&grad_frames).enumerate() {
        let gspec = fft2_real(gf, n);
        let mut g_h: Vec<Complex64> = scene_spec
            .iter()
            .zip(&gspec)
            .map(|(x, g)| x.conj() * g * inv_n2)
            .collect();
        ifft2_unnormalized(&mut g_h, n);
        let grad_u: Vec<f64> = g_h.iter().map(|v| v.re / fw.norm).collect();
        let grad_phase = pupil_backward(fw, &grad_u);
        let grad_coeffs = project_onto_basis(basis, &grad_phase);
        grad_out[i * basis.count..(i + 1) * basis.count].copy_from_slice(&grad_coeffs);
    }
    let mlp_grads = mlp.backward(&cache, &grad_out);
    Ok((loss, mlp_grads, proxy_grads))
}

/// Jointly learn modulations (through the MLP) and the proxy reconstructor.
pub fn train_modulations(
    scenes: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<Image>,
    mask: &PupilMask,
    basis: &ZernikeBasis,
    k: usize,
    opts: &TrainOptions,
) -> Result<(ModulationSet, ProxyParams, ModMlp, Vec<(usize, f64, f64)>)> {
    if k < 1 {
        return Err(WavemoError::Argument("modulation count K must be >= 1".into()));
    }
    let grid = basis.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut mlp = ModMlp::new(basis.count, opts.hidden_dim, k * basis.count, &mut rng)?;
    let mut proxy = ProxyParams::init(mask, k)?;
    let mut mlp_opt = Adam::new(mlp.n_params(), opts.learning_rate);
    let mut proxy_opt = ProxyAdam::new(&proxy, opts.learning_rate);
    let mut history = Vec::with_capacity(opts.iterations);
    let mut last_psnr = 0.0;

    for it in 0..opts.iterations {
        let scene = scenes(&mut rng)?;
        let ab = sample_aberration(&mut rng, basis, opts.sigma_lo, opts.sigma_hi)?;
        let phase = compose_phase(basis, &ab.coeffs)?;
        let noise: Option<Vec<Image>> = if opts.noise_sigma > 0.0 {
            let zero = Field::zeros(grid);
            Some(
                (0..k)
                    .map(|_| add_noise(&zero, opts.noise_sigma, &mut rng))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let (loss, mlp_grads, proxy_grads) =
            end_to_end_loss_grads(&scene, &phase, &mlp, &proxy, mask, basis, noise.as_deref())?;
        if !loss.is_finite() {
            return Err(WavemoError::Numerical(format!("training loss diverged at iteration {it}")));
        }
        if it % opts.log_every == 0 || it + 1 == opts.iterations {
            let mods = mlp_modulations(&mlp, basis, k)?;
            let stack = crate::diversity::capture_stack(
                &scene,
                &phase,
                &mods,
                mask,
                0.0,
                &mut ChaCha8Rng::seed_from_u64(0),
            )?;
            let est = proxy_forward(&stack, &proxy)?;
            last_psnr = psnr(&scene, &est, 1.0)?;
        }
        history.push((it, loss, last_psnr));
        let mut flat = mlp.params_flat();
        mlp_opt.step(&mut flat, &mlp_grads);
        mlp.set_from_flat(&flat);
        proxy_opt.step(&mut proxy, &proxy_grads);
    }
    let mods = mlp_modulations(&mlp, basis, k)?;
    Ok((mods, proxy, mlp, history))
}

/// Persist a modulation set: Zernike-parameterized sets as a coefficient
/// CSV, pixel-parameterized sets as one PFM per pattern, plus a manifest.
pub fn save_modulations(dir: &Path, mods: &ModulationSet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let grid = mods.grid();
    let mut manifest = vec![
        ("provenance", mods.provenance.as_str().to_string()),
        ("k", mods.k().to_string()),
        ("grid_n", grid.n.to_string()),
        ("aperture_radius_frac", format!("{}", grid.aperture_radius_frac)),
    ];
    if let Some(coeffs) = &mods.coeffs {
        manifest.push(("parameterization", "zernike".to_string()));
        manifest.push(("mode_count", coeffs[0].len().to_string()));
        let header: Vec<String> =
            (1..=coeffs[0].len()).map(|j| format!("z{j}")).collect();
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let rows: Vec<Vec<String>> = coeffs
            .iter()
            .map(|row| row.iter().map(|v| format!("{v:.17e}")).collect())
            .collect();
        io::write_csv(&dir.join("modulations.csv"), &header_refs, &rows)?;
    } else {
        manifest.push(("parameterization", "pixels".to_string()));
        for (i, p) in mods.patterns.iter().enumerate() {
            io::write_pfm(&dir.join(format!("modulation_{i:03}.pfm")), p)?;
        }
    }
    io::write_manifest(&dir.join("modulations.txt"), &manifest)
}

/// Load a modulation set saved by `save_modulations`.
pub fn load_modulations(dir: &Path, basis: &ZernikeBasis) -> Result<ModulationSet> {
    let pairs = io::read_manifest(&dir.join("modulations.txt"))?;
    let get = |key: &str| -> Result<&str> {
        io::manifest_get(&pairs, key)
            .ok_or_else(|| WavemoError::Io(format!("modulation manifest missing '{key}'")))
    };
    let provenance = Provenance::parse(get("provenance")?)?;
    let k: usize = get("k")?
        .parse()
        .map_err(|_| WavemoError::Io("bad k in modulation manifest".into()))?;
    let n: usize = get("grid_n")?
        .parse()
        .map_err(|_| WavemoError::Io("bad grid_n in modulation manifest".into()))?;
    if n != basis.grid.n {
        return Err(WavemoError::Argument(format!(
            "modulations were saved on a {n}x{n} grid, basis is {}x{}",
            basis.grid.n, basis.grid.n
        )));
    }
    match get("parameterization")? {
        "zernike" => {
            let rows = io::read_csv_floats(&dir.join("modulations.csv"))?;
            if rows.len() != k {
                return Err(WavemoError::Io(format!(
                    "modulation CSV has {} rows, manifest says {k}",
                    rows.len()
                )));
            }
            let patterns = rows
                .iter()
                .map(|r| compose_phase(basis, r))
                .collect::<Result<Vec<_>>>()?;
            ModulationSet::new(patterns, provenance, Some(rows))
        }
        "pixels" => {
            let patterns = (0..k)
                .map(|i| io::read_pfm(&dir.join(format!("modulation_{i:03}.pfm"))))
                .collect::<Result<Vec<_>>>()?;
            let patterns = patterns
                .into_iter()
                .map(|p| Field { grid: basis.grid, values: p.values })
                .collect();
            ModulationSet::new(patterns, provenance, None)
        }
        other => Err(WavemoError::Io(format!("unknown parameterization '{other}'"))),
    }
}
