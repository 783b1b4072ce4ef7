//! Differentiable proxy reconstructor: a learnable multi-frame spectral
//! combiner (generalized Wiener filter)
//!
//!   x_hat = IDFT[ (sum_i W_i(w) Y_i(w)) / (1 + lambda(w)) ] + bias,
//!
//! with lambda stored through a soft-plus pre-activation so it stays
//! nonnegative. Its training loss scores candidate modulation sets during
//! end-to-end learning; the gradient w.r.t. each frame is the hook through
//! which modulation gradients flow.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::diversity::{capture_stack, MeasurementStack, ModulationSet};
use crate::error::{Result, WavemoError};
use crate::field::{fft2_real, ifft2_unnormalized, Field, GridSpec};
use crate::optics::{pupil_forward, Image, PupilMask};
use crate::zernike::{sample_aberration, PhaseMap, ZernikeBasis};

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Learnable per-modulation complex spectral weights, regularization
/// spectrum pre-activation, and a scalar bias.
#[derive(Debug, Clone)]
pub struct ProxyParams {
    pub grid: GridSpec,
    /// K complex fields W_i, frequency-indexed with DC at (0, 0).
    pub weights: Vec<Vec<Complex64>>,
    /// Pre-activation of the regularization spectrum; lambda = softplus(.).
    pub reg_preact: Vec<f64>,
    pub bias: f64,
}

impl ProxyParams {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn reg_spectrum(&self) -> Vec<f64> {
        self.reg_preact.iter().map(|&r| softplus(r)).collect()
    }

    /// Multi-frame Wiener start: W_i = conj(H0) / (K (|H0|^2 + 0.1)) with H0
    /// the unaberrated OTF, reg pre-activation 0, bias 0.
    pub fn init(mask: &PupilMask, k: usize) -> Result<Self> {
        if k < 1 {
            return Err(WavemoError::Argument("proxy needs K >= 1".into()));
        }
        let grid = mask.grid;
        let fw = pupil_forward(mask, &PhaseMap::zeros(grid))?;
        let h0 = fw.otf();
        let w: Vec<Complex64> = h0
            .values
            .iter()
            .map(|h| h.conj() / (k as f64 * (h.norm_sqr() + 0.1)))
            .collect();
        Ok(ProxyParams {
            grid,
            weights: vec![w; k],
            reg_preact: vec![0.0; grid.len()],
            bias: 0.0,
        })
    }
}

/// Gradients for every proxy parameter group.
#[derive(Debug, Clone)]
pub struct ProxyGrads {
    pub weights: Vec<Vec<Complex64>>,
    pub reg_preact: Vec<f64>,
    pub bias: f64,
}

/// Apply the spectral combiner to a measurement stack.
pub fn proxy_forward(stack: &MeasurementStack, params: &ProxyParams) -> Result<Image> {
    if stack.k() != params.k() {
        return Err(WavemoError::Argument(format!(
            "stack K = {} does not match proxy K = {}",
            stack.k(),
            params.k()
        )));
    }
    if stack.grid() != params.grid {
        return Err(WavemoError::Argument("stack and proxy grids differ".into()));
    }
    let grid = params.grid;
    let n = grid.n;
    let npx = grid.len();
    let mut numer = vec![Complex64::new(0.0, 0.0); npx];
    for (frame, w) in stack.frames.iter().zip(&params.weights) {
        let yspec = fft2_real(&frame.values, n);
        for i in 0..npx {
            numer[i] += w[i] * yspec[i];
        }
    }
    let lambda = params.reg_spectrum();
    for i in 0..npx {
        numer[i] /= 1.0 + lambda[i];
    }
    ifft2_unnormalized(&mut numer, n);
    let inv_n2 = 1.0 / npx as f64;
    let values = numer.iter().map(|v| v.re * inv_n2 + params.bias).collect();
    Ok(Field { grid, values })
}

/// Squared-error loss against the scene with exact gradients for all
/// parameter groups and for every input frame.
pub fn proxy_loss_grads(
    scene: &Image,
    stack: &MeasurementStack,
    params: &ProxyParams,
) -> Result<(f64, ProxyGrads, Vec<Vec<f64>>)> {
    if scene.grid != params.grid {
        return Err(WavemoError::Argument("scene and proxy grids differ".into()));
    }
    let grid = params.grid;
    let n = grid.n;
    let npx = grid.len();
    let lambda = params.reg_spectrum();

    let yspecs: Vec<Vec<Complex64>> = stack
        .frames
        .iter()
        .map(|f| fft2_real(&f.values, n))
        .collect();
    if yspecs.len() != params.k() {
        return Err(WavemoError::Argument("stack K does not match proxy K".into()));
    }

    let mut combined = vec![Complex64::new(0.0, 0.0); npx];
    for (yspec, w) in yspecs.iter().zip(&params.weights) {
        for i in 0..npx {
            combined[i] += w[i] * yspec[i];
        }
    }
    let mut filtered = combined.clone();
    for i in 0..npx {
        filtered[i] /= 1.0 + lambda[i];
    }
    let mut spatial = filtered;
    ifft2_unnormalized(&mut spatial, n);
    let inv_n2 = 1.0 / npx as f64;
    let estimate: Vec<f64> = spatial.iter().map(|v| v.re * inv_n2 + params.bias).collect();

    let residual2: Vec<f64> = estimate.iter().zip(&scene.values).map(|(e, s)| 2.0 * (e - s)).collect();
    let loss: f64 = residual2.iter().map(|d| d * d / 4.0).sum();

    // G_T = (1/n^2) DFT(2 (x_hat - scene)), the gradient w.r.t. the
    // filtered spectrum under Re<.,.>
    let mut g_filtered = fft2_real(&residual2, n);
    for v in &mut g_filtered {
        *v *= inv_n2;
    }

    let mut grad_reg = vec![0.0; npx];
    let mut g_combined = vec![Complex64::new(0.0, 0.0); npx];
    for i in 0..npx {
        let denom = 1.0 + lambda[i];
        g_combined[i] = g_filtered[i] / denom;
        let grad_lambda = -(g_filtered[i].conj() * combined[i]).re / (denom * denom);
        grad_reg[i] = grad_lambda * sigmoid(params.reg_preact[i]);
    }

    let mut grad_weights = Vec::with_capacity(params.k());
    let mut grad_frames = Vec::with_capacity(params.k());
    for (yspec, w) in yspecs.iter().zip(&params.weights) {
        let gw: Vec<Complex64> =
            (0..npx).map(|i| g_combined[i] * yspec[i].conj()).collect();
        let mut gy: Vec<Complex64> =
            (0..npx).map(|i| g_combined[i] * w[i].conj()).collect();
        ifft2_unnormalized(&mut gy, n);
        grad_weights.push(gw);
        grad_frames.push(gy.iter().map(|v| v.re).collect());
    }
    let grad_bias: f64 = residual2.iter().sum();

    Ok((
        loss,
        ProxyGrads { weights: grad_weights, reg_preact: grad_reg, bias: grad_bias },
        grad_frames,
    ))
}

/// Proxy training options; aberrations are sampled fresh every iteration.
#[derive(Debug, Clone)]
pub struct ProxyTrainOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    pub noise_sigma: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub seed: u64,
}

impl Default for ProxyTrainOptions {
    fn default() -> Self {
        ProxyTrainOptions {
            iterations: 3000,
            learning_rate: 1e-3,
            noise_sigma: 0.01,
            sigma_lo: 5.0,
            sigma_hi: 6.0,
            seed: 0,
        }
    }
}

pub(crate) struct ProxyAdam {
    weights: Adam,
    reg: Adam,
    bias: Adam,
}

impl ProxyAdam {
    pub(crate) fn new(params: &ProxyParams, lr: f64) -> Self {
        let nw = params.k() * params.grid.len() * 2;
        ProxyAdam {
            weights: Adam::new(nw, lr),
            reg: Adam::new(params.grid.len(), lr),
            bias: Adam::new(1, lr),
        }
    }

    pub(crate) fn step(&mut self, params: &mut ProxyParams, grads: &ProxyGrads) {
        let mut flat: Vec<f64> = params
            .weights
            .iter()
            .flat_map(|w| w.iter().flat_map(|c| [c.re, c.im]))
            .collect();
        let gflat: Vec<f64> = grads
            .weights
            .iter()
            .flat_map(|w| w.iter().flat_map(|c| [c.re, c.im]))
            .collect();
        self.weights.step(&mut flat, &gflat);
        let npx = params.grid.len();
        for (ki, w) in params.weights.iter_mut().enumerate() {
            for (i, c) in w.iter_mut().enumerate() {
                let base = 2 * (ki * npx + i);
                *c = Complex64::new(flat[base], flat[base + 1]);
            }
        }
        self.reg.step(&mut params.reg_preact, &grads.reg_preact);
        let mut b = [params.bias];
        self.bias.step(&mut b, &[grads.bias]);
        params.bias = b[0];
    }
}

/// Train the proxy alone against a frozen modulation set. The scene sampler
/// is any seeded generator of grid-sized images.
pub fn fit_proxy(
    scenes: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<Image>,
    mods: &ModulationSet,
    mask: &PupilMask,
    basis: &ZernikeBasis,
    opts: &ProxyTrainOptions,
) -> Result<(ProxyParams, Vec<f64>)> {
    let mut params = ProxyParams::init(mask, mods.k())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = ProxyAdam::new(&params, opts.learning_rate);
    let mut history = Vec::with_capacity(opts.iterations);
    for it in 0..opts.iterations {
        let scene = scenes(&mut rng)?;
        let ab = sample_aberration(&mut rng, basis, opts.sigma_lo, opts.sigma_hi)?;
        let phase = crate::zernike::compose_phase(basis, &ab.coeffs)?;
        let stack = capture_stack(&scene, &phase, mods, mask, opts.noise_sigma, &mut rng)?;
        let (loss, grads, _) = proxy_loss_grads(&scene, &stack, &params)?;
        if !loss.is_finite() {
            return Err(WavemoError::Numerical(format!("proxy loss diverged at iteration {it}")));
        }
        history.push(loss);
        opt.step(&mut params, &grads);
    }
    Ok((params, history))
}

/// Persist proxy parameters as a PFM bundle (per-frame weight real/imag
/// planes plus the regularization pre-activation) and a manifest.
pub fn save_proxy(dir: &std::path::Path, params: &ProxyParams) -> Result<()> {
    use crate::io;
    std::fs::create_dir_all(dir)?;
    let grid = params.grid;
    for (i, w) in params.weights.iter().enumerate() {
        let re = Field::from_values(grid, w.iter().map(|c| c.re).collect())?;
        let im = Field::from_values(grid, w.iter().map(|c| c.im).collect())?;
        io::write_pfm(&dir.join(format!("weight_{i:03}_re.pfm")), &re)?;
        io::write_pfm(&dir.join(format!("weight_{i:03}_im.pfm")), &im)?;
    }
    let reg = Field::from_values(grid, params.reg_preact.clone())?;
    io::write_pfm(&dir.join("reg_preact.pfm"), &reg)?;
    io::write_manifest(
        &dir.join("proxy.txt"),
        &[
            ("k", params.k().to_string()),
            ("grid_n", grid.n.to_string()),
            ("aperture_radius_frac", format!("{}", grid.aperture_radius_frac)),
            ("bias", format!("{:.17e}", params.bias)),
        ],
    )
}

/// Load a proxy bundle written by `save_proxy`.
pub fn load_proxy(dir: &std::path::Path) -> Result<ProxyParams> {
    use crate::io;
    let pairs = io::read_manifest(&dir.join("proxy.txt"))?;
    let get = |key: &str| -> Result<&str> {
        io::manifest_get(&pairs, key)
            .ok_or_else(|| WavemoError::Io(format!("proxy manifest missing '{key}'")))
    };
    let k: usize =
        get("k")?.parse().map_err(|_| WavemoError::Io("bad k in proxy manifest".into()))?;
    let n: usize = get("grid_n")?
        .parse()
        .map_err(|_| WavemoError::Io("bad grid_n in proxy manifest".into()))?;
    let frac: f64 = get("aperture_radius_frac")?
        .parse()
        .map_err(|_| WavemoError::Io("bad aperture_radius_frac in proxy manifest".into()))?;
    let bias: f64 =
        get("bias")?.parse().map_err(|_| WavemoError::Io("bad bias in proxy manifest".into()))?;
    let grid = GridSpec::new(n, frac)?;
    let mut weights = Vec::with_capacity(k);
    for i in 0..k {
        let re = io::read_pfm(&dir.join(format!("weight_{i:03}_re.pfm")))?;
        let im = io::read_pfm(&dir.join(format!("weight_{i:03}_im.pfm")))?;
        if re.grid.n != n || im.grid.n != n {
            return Err(WavemoError::Io("proxy weight plane has wrong size".into()));
        }
        weights.push(
            re.values.iter().zip(&im.values).map(|(&r, &i)| Complex64::new(r, i)).collect(),
        );
    }
    let reg = io::read_pfm(&dir.join("reg_preact.pfm"))?;
    if reg.grid.n != n {
        return Err(WavemoError::Io("proxy reg plane has wrong size".into()));
    }
    Ok(ProxyParams { grid, weights, reg_preact: reg.values, bias })
}
