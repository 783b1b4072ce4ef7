//! Unsupervised joint estimation of scene and aberration from a modulated
//! measurement stack: the phase-diversity objective
//! sum_i ||y_i - h(phi + gamma_i) * x||^2 (+ optional TV), its analytic
//! gradients, and an Adam-driven solver.

use num_complex::Complex64;

use crate::adam::Adam;
use crate::diversity::MeasurementStack;
use crate::error::{Result, WavemoError};
use crate::field::{fft2_real, ifft2_unnormalized, Field};
use crate::optics::{pupil_backward, pupil_forward, Image, PupilMask};
use crate::zernike::{compose_phase, project_onto_basis, ZernikeBasis};

/// Smoothing inside the isotropic TV square root; keeps the gradient
/// defined at zero differences.
const TV_EPS_SQ: f64 = 1e-12;

/// Joint estimate: scene as raw pixels, aberration as Zernike coefficients.
#[derive(Debug, Clone)]
pub struct ReconState {
    pub scene_est: Image,
    pub aber_coeffs: Vec<f64>,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
}

/// Solver options. `freeze_aberration` keeps the coefficients at their
/// initial value, which is the only mode allowed for K = 1.
#[derive(Debug, Clone)]
pub struct ReconOptions {
    pub max_iters: usize,
    pub step_scene: f64,
    pub step_coeffs: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub tv_weight: f64,
    pub tolerance: f64,
    pub freeze_aberration: bool,
}

impl Default for ReconOptions {
    fn default() -> Self {
        ReconOptions {
            max_iters: 2000,
            step_scene: 1e-2,
            step_coeffs: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            tv_weight: 0.0,
            tolerance: 0.0,
            freeze_aberration: false,
        }
    }
}

impl ReconOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(WavemoError::Argument("max_iters < 1".into()));
        }
        if self.step_scene <= 0.0 || self.step_coeffs <= 0.0 {
            return Err(WavemoError::Argument("step sizes must be positive".into()));
        }
        if self.tv_weight < 0.0 {
            return Err(WavemoError::Argument("tv_weight < 0".into()));
        }
        Ok(())
    }
}

fn check_shapes(
    stack: &MeasurementStack,
    state: &ReconState,
    mask: &PupilMask,
    basis: &ZernikeBasis,
) -> Result<()> {
    let grid = stack.grid();
    if state.scene_est.grid != grid || mask.grid != grid || basis.grid != grid {
        return Err(WavemoError::Argument("reconstruction inputs on different grids".into()));
    }
    if state.aber_coeffs.len() != basis.count {
        return Err(WavemoError::Argument(format!(
            "coefficient length {} does not match basis count {}",
            state.aber_coeffs.len(),
            basis.count
        )));
    }
    Ok(())
}

fn tv_loss_grad(scene: &Image, weight: f64, grad: Option<&mut [f64]>) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    let n = scene.grid.n;
    let mut loss = 0.0;
    let mut grad_buf = grad;
    for iy in 0..n {
        for ix in 0..n {
            let v = scene.at(ix, iy);
            let xr = scene.at((ix + 1) % n, iy);
            let yd = scene.at(ix, (iy + 1) % n);
            let dx = xr - v;
            let dy = yd - v;
            let mag = (dx * dx + dy * dy + TV_EPS_SQ).sqrt();
            loss += mag - TV_EPS_SQ.sqrt();
            if let Some(g) = grad_buf.as_deref_mut() {
                let gx = weight * dx / mag;
                let gy = weight * dy / mag;
                g[iy * n + ((ix + 1) % n)] += gx;
                g[iy * n + ix] -= gx + gy;
                g[((iy + 1) % n) * n + ix] += gy;
            }
        }
    }
    weight * loss
}

fn loss_and_grads(
    stack: &MeasurementStack,
    state: &ReconState,
    mask: &PupilMask,
    basis: &ZernikeBasis,
    tv_weight: f64,
    want_grads: bool,
) -> Result<(f64, Option<(Vec<f64>, Vec<f64>)>)> {
    check_shapes(stack, state, mask, basis)?;
    let grid = stack.grid();
    let n = grid.n;
    let npx = grid.len();
    let phase = compose_phase(basis, &state.aber_coeffs)?;
    let scene_spec = fft2_real(&state.scene_est.values, n);

    let mut loss = 0.0;
    let mut g_scene_spec = vec![Complex64::new(0.0, 0.0); npx];
    let mut grad_coeffs = vec![0.0; basis.count];
    let inv_n2 = 1.0 / (npx as f64);

    for (gamma, frame) in stack.modulations.patterns.iter().zip(&stack.frames) {
        let mut total = phase.clone();
        for (t, g) in total.values.iter_mut().zip(&gamma.values) {
            *t += g;
        }
        let fw = pupil_forward(mask, &total)?;
        let inv_s = 1.0 / fw.norm;
        // OTF of the normalized PSF from the unshifted intensity
        let mut otf = fft2_real(&fw.intensity, n);
        for v in &mut otf {
            *v *= inv_s;
        }
        // residual r = conv(scene, h) - y
        let mut conv = vec![Complex64::new(0.0, 0.0); npx];
        for i in 0..npx {
            conv[i] = scene_spec[i] * otf[i];
        }
        ifft2_unnormalized(&mut conv, n);
        let residual: Vec<f64> = conv
            .iter()
            .zip(&frame.values)
            .map(|(c, y)| c.re * inv_n2 - y)
            .collect();
        loss += residual.iter().map(|r| r * r).sum::<f64>();

        if want_grads {
            let res_spec = fft2_real(&residual, n);
            // dL/dX accumulates 2/n^2 * conj(H) R
            for i in 0..npx {
                g_scene_spec[i] += 2.0 * inv_n2 * otf[i].conj() * res_spec[i];
            }
            // dL/dH = 2/n^2 * conj(X) R, then back to intensity space
            let mut g_otf: Vec<Complex64> = (0..npx)
                .map(|i| 2.0 * inv_n2 * scene_spec[i].conj() * res_spec[i])
                .collect();
            ifft2_unnormalized(&mut g_otf, n);
            let grad_intensity: Vec<f64> = g_otf.iter().map(|v| v.re * inv_s).collect();
            let grad_phase = pupil_backward(&fw, &grad_intensity);
            for (gc, p) in grad_coeffs.iter_mut().zip(project_onto_basis(basis, &grad_phase)) {
                *gc += p;
            }
        }
    }

    if want_grads {
        ifft2_unnormalized(&mut g_scene_spec, n);
        let mut grad_scene: Vec<f64> = g_scene_spec.iter().map(|v| v.re).collect();
        loss += tv_loss_grad(&state.scene_est, tv_weight, Some(&mut grad_scene));
        Ok((loss, Some((grad_scene, grad_coeffs))))
    } else {
        loss += tv_loss_grad(&state.scene_est, tv_weight, None);
        Ok((loss, None))
    }
}

/// The phase-diversity data misfit plus tv_weight * TV(scene).
pub fn pdi_loss(
    stack: &MeasurementStack,
    state: &ReconState,
    mask: &PupilMask,
    basis: &ZernikeBasis,
    tv_weight: f64,
) -> Result<f64> {
    Ok(loss_and_grads(stack, state, mask, basis, tv_weight, false)?.0)
}

/// Exact gradients of `pdi_loss` w.r.t. the scene pixels and the aberration
/// coefficients.
pub fn pdi_gradients(
    stack: &MeasurementStack,
    state: &ReconState,
    mask: &PupilMask,
    basis: &ZernikeBasis,
    tv_weight: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, grads) = loss_and_grads(stack, state, mask, basis, tv_weight, true)?;
    Ok(grads.expect("gradients requested"))
}

/// Default initialization: the scene starts from the frame average, the
/// coefficients from zero.
pub fn default_init(stack: &MeasurementStack, basis: &ZernikeBasis) -> ReconState {
    let grid = stack.grid();
    let mut scene = Field::zeros(grid);
    let inv_k = 1.0 / stack.k() as f64;
    for frame in &stack.frames {
        for (s, f) in scene.values.iter_mut().zip(&frame.values) {
            *s += f * inv_k;
        }
    }
    ReconState {
        scene_est: scene,
        aber_coeffs: vec![0.0; basis.count],
        iteration: 0,
        loss_history: Vec::new(),
    }
}

/// Run Adam on (scene, coefficients) until max_iters or the relative loss
/// change drops under `tolerance`. Deterministic given init and options.
pub fn reconstruct(
    stack: &MeasurementStack,
    mask: &PupilMask,
    basis: &ZernikeBasis,
    opts: &ReconOptions,
    init: Option<ReconState>,
) -> Result<ReconState> {
    opts.validate()?;
    if stack.frames.is_empty() {
        return Err(WavemoError::Argument("measurement stack is empty".into()));
    }
    if stack.k() == 1 && !opts.freeze_aberration {
        return Err(WavemoError::Argument(
            "under-determined: cannot recover scene and aberration from a single measurement"
                .into(),
        ));
    }
    let mut state = init.unwrap_or_else(|| default_init(stack, basis));
    check_shapes(stack, &state, mask, basis)?;

    let floor = 1e-18
        * stack
            .frames
            .iter()
            .map(|f| f.values.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .max(1.0);
    let mut opt_scene =
        Adam::new(state.scene_est.values.len(), opts.step_scene).with_betas(opts.beta1, opts.beta2);
    opt_scene.eps = opts.eps;
    let mut opt_coeffs =
        Adam::new(state.aber_coeffs.len(), opts.step_coeffs).with_betas(opts.beta1, opts.beta2);
    opt_coeffs.eps = opts.eps;

    for _ in 0..opts.max_iters {
        let (loss, grads) = loss_and_grads(stack, &state, mask, basis, opts.tv_weight, true)?;
        if !loss.is_finite() {
            return Err(WavemoError::Numerical(format!(
                "loss diverged at iteration {}",
                state.iteration
            )));
        }
        let prev = state.loss_history.last().copied();
        state.loss_history.push(loss);
        if loss <= floor {
            break;
        }
        if let Some(prev) = prev {
            if (prev - loss).abs() <= opts.tolerance * prev.max(floor) && opts.tolerance > 0.0 {
                break;
            }
        }
        let (grad_scene, grad_coeffs) = grads.expect("gradients requested");
        opt_scene.step(&mut state.scene_est.values, &grad_scene);
        if !opts.freeze_aberration {
            opt_coeffs.step(&mut state.aber_coeffs, &grad_coeffs);
        }
        state.iteration += 1;
    }
    Ok(state)
}
