//! End-to-end acceptance suite. Each test prints one `A#: pass/FAIL` line
//! with its measured numbers, then asserts.

use std::sync::OnceLock;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wavemo::diversity::{capture_stack, combined_mtf, radial_profile, ModulationSet, Provenance};
use wavemo::field::{fft2, fftshift, Field, GridSpec};
use wavemo::metrics::{aggregate, psnr, ssim};
use wavemo::modopt::{generate_baseline, train_modulations, TrainOptions};
use wavemo::optics::{convolve, otf_mtf, psf, pupil_mask, Image, PupilMask};
use wavemo::proxy::{fit_proxy, proxy_forward, ProxyParams, ProxyTrainOptions};
use wavemo::recon::{pdi_loss, reconstruct, ReconOptions, ReconState};
use wavemo::scene::procedural_scene;
use wavemo::zernike::{build_basis, compose_phase, sample_aberration, PhaseMap, ZernikeBasis};

fn report(name: &str, ok: bool, detail: &str) {
    println!("{name}: {} — {detail}", if ok { "pass" } else { "FAIL" });
    assert!(ok, "{name} failed: {detail}");
}

fn grid(n: usize) -> GridSpec {
    GridSpec::new(n, 0.5).unwrap()
}

fn random_image(g: GridSpec, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Field::from_values(g, (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn random_phase(g: GridSpec, seed: u64) -> PhaseMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Field::from_values(g, (0..g.len()).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

fn random_mods(_g: GridSpec, basis: &ZernikeBasis, k: usize, seed: u64) -> ModulationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patterns = Vec::new();
    let mut coeffs = Vec::new();
    for _ in 0..k {
        let s = sample_aberration(&mut rng, basis, 5.0, 6.0).unwrap();
        patterns.push(compose_phase(basis, &s.coeffs).unwrap());
        coeffs.push(s.coeffs);
    }
    ModulationSet::new(patterns, Provenance::RandomZernike, Some(coeffs)).unwrap()
}

// ---------------------------------------------------------------------------
// direct (slow) oracles
// ---------------------------------------------------------------------------

/// O(N^4) direct DFT.
fn dft2_direct(data: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for ky in 0..n {
        for kx in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for iy in 0..n {
                for ix in 0..n {
                    let ph = -2.0 * std::f64::consts::PI * ((kx * ix + ky * iy) as f64) / n as f64;
                    acc += data[iy * n + ix] * Complex64::new(ph.cos(), ph.sin());
                }
            }
            out[ky * n + kx] = acc;
        }
    }
    out
}

/// Centered, unit-sum PSF via the direct DFT of the pupil function.
fn psf_direct(mask: &PupilMask, phase: &PhaseMap) -> Vec<f64> {
    let n = mask.grid.n;
    let pupil: Vec<Complex64> = mask
        .values
        .iter()
        .zip(&phase.values)
        .map(|(&m, &p)| {
            if m == 0.0 { Complex64::new(0.0, 0.0) } else { Complex64::new(p.cos(), p.sin()) }
        })
        .collect();
    let spec = dft2_direct(&pupil, n);
    let intensity: Vec<f64> = spec.iter().map(|a| a.norm_sqr()).collect();
    let s: f64 = intensity.iter().sum();
    fftshift(&intensity, n).iter().map(|v| v / s).collect()
}

/// Wrap-around spatial-domain convolution with a centered kernel.
fn conv_direct(x: &[f64], psf_centered: &[f64], n: usize) -> Vec<f64> {
    let h = fftshift(psf_centered, n);
    let mut out = vec![0.0; n * n];
    for py in 0..n {
        for px in 0..n {
            let mut acc = 0.0;
            for qy in 0..n {
                for qx in 0..n {
                    let sx = (px + n - qx) % n;
                    let sy = (py + n - qy) % n;
                    acc += h[qy * n + qx] * x[sy * n + sx];
                }
            }
            out[py * n + px] = acc;
        }
    }
    out
}

fn rel_norm_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

#[test]
fn a1_oracle_equivalence() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for n in [8usize, 16] {
        let g = grid(n);
        let mask = pupil_mask(g);
        let basis = build_basis(g, 28).unwrap();
        let phase = random_phase(g, 100 + n as u64);
        let scene = random_image(g, 200 + n as u64);

        // PSF
        let fast = psf(&mask, &phase).unwrap();
        let direct = psf_direct(&mask, &phase);
        worst = worst.max(rel_norm_err(&fast.values, &direct));

        // OTF
        let (otf, _) = otf_mtf(&fast).unwrap();
        let unshifted: Vec<Complex64> =
            fftshift(&fast.values, n).iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let otf_direct = dft2_direct(&unshifted, n);
        let fast_re: Vec<f64> = otf.values.iter().flat_map(|c| [c.re, c.im]).collect();
        let dir_re: Vec<f64> = otf_direct.iter().flat_map(|c| [c.re, c.im]).collect();
        worst = worst.max(rel_norm_err(&fast_re, &dir_re));

        // convolution
        let y = convolve(&scene, &fast).unwrap();
        let y_direct = conv_direct(&scene.values, &fast.values, n);
        worst = worst.max(rel_norm_err(&y.values, &y_direct));

        // capture_stack
        let mods = random_mods(g, &basis, 2, 300 + n as u64);
        let stack =
            capture_stack(&scene, &phase, &mods, &mask, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        for (frame, gamma) in stack.frames.iter().zip(&mods.patterns) {
            let mut total = phase.clone();
            for (t, gv) in total.values.iter_mut().zip(&gamma.values) {
                *t += gv;
            }
            let expect = conv_direct(&scene.values, &psf_direct(&mask, &total), n);
            worst = worst.max(rel_norm_err(&frame.values, &expect));
        }

        // phase-diversity loss
        let mut rng = ChaCha8Rng::seed_from_u64(400 + n as u64);
        let state = ReconState {
            scene_est: random_image(g, 500 + n as u64),
            aber_coeffs: {
                let mut c = vec![0.0; 28];
                for v in c.iter_mut().skip(1) {
                    *v = rng.gen_range(-1.0..1.0);
                }
                c
            },
            iteration: 0,
            loss_history: Vec::new(),
        };
        let loss = pdi_loss(&stack, &state, &mask, &basis, 0.0).unwrap();
        let est_phase = compose_phase(&basis, &state.aber_coeffs).unwrap();
        let mut loss_direct = 0.0;
        for (frame, gamma) in stack.frames.iter().zip(&mods.patterns) {
            let mut total = est_phase.clone();
            for (t, gv) in total.values.iter_mut().zip(&gamma.values) {
                *t += gv;
            }
            let pred = conv_direct(&state.scene_est.values, &psf_direct(&mask, &total), n);
            loss_direct += pred
                .iter()
                .zip(&frame.values)
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>();
        }
        worst = worst.max((loss - loss_direct).abs() / loss_direct.max(1e-300));
    }
    let dt = start.elapsed().as_secs_f64();
    report(
        "A1",
        worst < 1e-9 && dt < 5.0,
        &format!("max relative error vs direct oracles {worst:.2e} (limit 1e-9), {dt:.1} s"),
    );
}

#[test]
fn a2_in_model_iterative_reconstruction() {
    let start = Instant::now();
    let g = grid(64);
    let mask = pupil_mask(g);
    let basis = build_basis(g, 28).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let scene = procedural_scene(g, &mut rng);
    let ab = sample_aberration(&mut rng, &basis, 5.0, 6.0).unwrap();
    let phase = compose_phase(&basis, &ab.coeffs).unwrap();
    let mods = random_mods(g, &basis, 8, 43);
    let stack = capture_stack(&scene, &phase, &mods, &mask, 0.0, &mut rng).unwrap();

    let opts = ReconOptions { max_iters: 2000, ..ReconOptions::default() };
    let state = reconstruct(&stack, &mask, &basis, &opts, None).unwrap();
    let p = psnr(&scene, &state.scene_est, 1.0).unwrap();
    let dt = start.elapsed().as_secs_f64();
    report(
        "A2",
        p >= 30.0 && dt < 60.0,
        &format!(
            "64x64, K=8, noiseless: PSNR {p:.2} dB after {} iterations (target >= 30 dB), {dt:.1} s",
            state.iteration
        ),
    );
}

#[test]
fn a3_gradient_suite() {
    let start = Instant::now();
    let exe = env!("CARGO_BIN_EXE_wavemo");
    let out = std::process::Command::new(exe)
        .arg("gradcheck")
        .output()
        .expect("failed to launch gradcheck");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let ok = out.status.success() && stdout.contains("all gradient chains pass");

    // negative control: an injected sign bug must be caught with a nonzero
    // exit naming the chain
    let bad = std::process::Command::new(exe)
        .args(["gradcheck", "--inject-bug"])
        .output()
        .expect("failed to launch gradcheck");
    let bad_err = String::from_utf8_lossy(&bad.stderr);
    let control_ok = !bad.status.success() && bad_err.contains("pdi_gradients");

    let dt = start.elapsed().as_secs_f64();
    report(
        "A3",
        ok && control_ok && dt < 60.0,
        &format!(
            "gradcheck exit {:?}, negative control exit {:?}, {dt:.1} s",
            out.status.code(),
            bad.status.code()
        ),
    );
}

// ---------------------------------------------------------------------------
// shared desk-scale training artifacts (32x32, K=4)
// ---------------------------------------------------------------------------

const DESK_N: usize = 32;
const DESK_K: usize = 4;
const TRAIN_ITERS: usize = 3000;
const TRAIN_SEED: u64 = 11;

fn learned_artifacts() -> &'static (ModulationSet, ProxyParams) {
    static CELL: OnceLock<(ModulationSet, ProxyParams)> = OnceLock::new();
    CELL.get_or_init(|| {
        let g = grid(DESK_N);
        let mask = pupil_mask(g);
        let basis = build_basis(g, 28).unwrap();
        let opts = TrainOptions {
            iterations: TRAIN_ITERS,
            seed: TRAIN_SEED,
            ..TrainOptions::default()
        };
        let mut sampler = |rng: &mut ChaCha8Rng| Ok(procedural_scene(g, rng));
        let (mods, proxy, _, _) =
            train_modulations(&mut sampler, &mask, &basis, DESK_K, &opts).unwrap();
        (mods, proxy)
    })
}

fn fit_baseline_proxy(mods: &ModulationSet) -> ProxyParams {
    let g = grid(DESK_N);
    let mask = pupil_mask(g);
    let basis = build_basis(g, 28).unwrap();
    let opts = ProxyTrainOptions {
        iterations: TRAIN_ITERS,
        learning_rate: 1e-2,
        seed: TRAIN_SEED,
        ..ProxyTrainOptions::default()
    };
    let mut sampler = |rng: &mut ChaCha8Rng| Ok(procedural_scene(g, rng));
    fit_proxy(&mut sampler, mods, &mask, &basis, &opts).unwrap().0
}

/// Mean proxy PSNR over held-out scenes with fresh aberrations.
fn eval_proxy(mods: &ModulationSet, proxy: &ProxyParams, scenes: usize, base_seed: u64) -> f64 {
    let g = grid(DESK_N);
    let mask = pupil_mask(g);
    let basis = build_basis(g, 28).unwrap();
    let mut vals = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed + i as u64);
        let scene = procedural_scene(g, &mut rng);
        let ab = sample_aberration(&mut rng, &basis, 5.0, 6.0).unwrap();
        let phase = compose_phase(&basis, &ab.coeffs).unwrap();
        let stack = capture_stack(&scene, &phase, mods, &mask, 0.01, &mut rng).unwrap();
        let est = proxy_forward(&stack, proxy).unwrap();
        vals.push(psnr(&scene, &est, 1.0).unwrap());
    }
    aggregate(&vals).unwrap().0
}

fn eval_iterative(mods: &ModulationSet, scenes: usize, base_seed: u64) -> f64 {
    let g = grid(DESK_N);
    let mask = pupil_mask(g);
    let basis = build_basis(g, 28).unwrap();
    let opts = ReconOptions { max_iters: 1000, ..ReconOptions::default() };
    let mut vals = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed + i as u64);
        let scene = procedural_scene(g, &mut rng);
        let ab = sample_aberration(&mut rng, &basis, 5.0, 6.0).unwrap();
        let phase = compose_phase(&basis, &ab.coeffs).unwrap();
        let stack = capture_stack(&scene, &phase, mods, &mask, 0.01, &mut rng).unwrap();
        let state = reconstruct(&stack, &mask, &basis, &opts, None).unwrap();
        vals.push(psnr(&scene, &state.scene_est, 1.0).unwrap());
    }
    aggregate(&vals).unwrap().0
}

#[test]
fn a4_modulation_ordering() {
    let start = Instant::now();
    let g = grid(DESK_N);
    let basis = build_basis(g, 28).unwrap();

    let (learned_mods, learned_proxy) = learned_artifacts();
    let random_mods_set = generate_baseline(Provenance::RandomZernike, &basis, DESK_K, 5.0, 6.0, 6.0, 21).unwrap();
    let none_mods = ModulationSet::none(g);
    let random_proxy = fit_baseline_proxy(&random_mods_set);
    let none_proxy = fit_baseline_proxy(&none_mods);

    let eval_seed = 5000;
    let p_learned = eval_proxy(learned_mods, learned_proxy, 20, eval_seed);
    let p_random = eval_proxy(&random_mods_set, &random_proxy, 20, eval_seed);
    let p_none = eval_proxy(&none_mods, &none_proxy, 20, eval_seed);

    let it_learned = eval_iterative(learned_mods, 5, eval_seed + 100);
    let it_random = eval_iterative(&random_mods_set, 5, eval_seed + 100);

    let dt = start.elapsed().as_secs_f64();
    let ok = p_learned >= p_random + 1.0
        && p_learned >= p_none + 2.0
        && it_learned >= it_random + 1.0
        && dt < 1200.0;
    report(
        "A4",
        ok,
        &format!(
            "proxy PSNR learned {p_learned:.2} / random {p_random:.2} / none {p_none:.2} dB \
             (need learned >= random+1 and >= none+2); iterative learned {it_learned:.2} vs \
             random {it_random:.2} dB (need +1); {dt:.0} s"
        ),
    );
}

#[test]
fn a5_k_ablation_trend() {
    let start = Instant::now();
    let g = grid(DESK_N);
    let basis = build_basis(g, 28).unwrap();
    let mask = pupil_mask(g);
    let ks = [4usize, 8, 16];
    let seeds = [0u64, 1, 2];
    let mut means = Vec::new();
    for &k in &ks {
        let mut per_seed = Vec::new();
        for &s in &seeds {
            let mods = generate_baseline(Provenance::RandomZernike, &basis, k, 5.0, 6.0, 6.0, 100 + s).unwrap();
            let opts = ProxyTrainOptions {
                iterations: 1500,
                learning_rate: 1e-2,
                seed: s,
                ..ProxyTrainOptions::default()
            };
            let mut sampler = |rng: &mut ChaCha8Rng| Ok(procedural_scene(g, rng));
            let (proxy, _) = fit_proxy(&mut sampler, &mods, &mask, &basis, &opts).unwrap();
            per_seed.push(eval_proxy(&mods, &proxy, 10, 6000 + 31 * s));
        }
        means.push(aggregate(&per_seed).unwrap().0);
    }
    let dt = start.elapsed().as_secs_f64();
    let ok = means[1] >= means[0] - 0.1 && means[2] >= means[1] - 0.1 && dt < 600.0;
    report(
        "A5",
        ok,
        &format!(
            "random-modulation proxy PSNR K=4/8/16: {:.2}/{:.2}/{:.2} dB over 3 seeds \
             (nondecreasing within 0.1 dB); {dt:.0} s",
            means[0], means[1], means[2]
        ),
    );
}

#[test]
fn a6_combined_mtf_advantage() {
    let (learned_mods, _) = learned_artifacts();
    let start = Instant::now();
    let g = grid(DESK_N);
    let basis = build_basis(g, 28).unwrap();
    let mask = pupil_mask(g);
    let random = generate_baseline(Provenance::RandomZernike, &basis, DESK_K, 5.0, 6.0, 6.0, 21).unwrap();
    let bins = g.n / 2 + 1;
    let mut learned_prof = vec![0.0; bins];
    let mut random_prof = vec![0.0; bins];
    let draws = 10;
    for d in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + d);
        let ab = sample_aberration(&mut rng, &basis, 5.0, 6.0).unwrap();
        let phase = compose_phase(&basis, &ab.coeffs).unwrap();
        let lm = radial_profile(&combined_mtf(&phase, learned_mods, &mask).unwrap(), bins).unwrap();
        let rm = radial_profile(&combined_mtf(&phase, &random, &mask).unwrap(), bins).unwrap();
        for b in 0..bins {
            learned_prof[b] += lm.means[b] / draws as f64;
            random_prof[b] += rm.means[b] / draws as f64;
        }
    }
    let upper = bins / 2;
    let l: f64 = learned_prof[upper..].iter().sum::<f64>() / (bins - upper) as f64;
    let r: f64 = random_prof[upper..].iter().sum::<f64>() / (bins - upper) as f64;
    let dt = start.elapsed().as_secs_f64();
    report(
        "A6",
        l > r && dt < 120.0,
        &format!(
            "mean combined MTF over upper-half bins, 10 draws: learned {l:.4} vs random {r:.4}; {dt:.0} s"
        ),
    );
}

#[test]
fn a7_invariant_suite() {
    let start = Instant::now();
    let g = grid(32);
    let mask = pupil_mask(g);
    let basis = build_basis(g, 28).unwrap();

    // global phase (piston) invariance of the PSF
    let phase = random_phase(g, 1);
    let mut shifted = phase.clone();
    for v in &mut shifted.values {
        *v += 2.3;
    }
    let h0 = psf(&mask, &phase).unwrap();
    let h1 = psf(&mask, &shifted).unwrap();
    assert!(h0.values.iter().zip(&h1.values).all(|(a, b)| (a - b).abs() < 1e-12));

    // Parseval under the unnormalized forward DFT
    let mut data: Vec<Complex64> =
        random_image(g, 2).values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let spatial: f64 = data.iter().map(|v| v.norm_sqr()).sum();
    fft2(&mut data, g.n);
    let spectral: f64 = data.iter().map(|v| v.norm_sqr()).sum();
    assert!((spectral - spatial * g.len() as f64).abs() < 1e-6 * spectral);

    // combined MTF dominates every member and is permutation invariant
    let mods = random_mods(g, &basis, 3, 3);
    let ab_phase = compose_phase(
        &basis,
        &sample_aberration(&mut ChaCha8Rng::seed_from_u64(4), &basis, 5.0, 6.0).unwrap().coeffs,
    )
    .unwrap();
    let comb = combined_mtf(&ab_phase, &mods, &mask).unwrap();
    for gamma in &mods.patterns {
        let mut total = ab_phase.clone();
        for (t, gv) in total.values.iter_mut().zip(&gamma.values) {
            *t += gv;
        }
        let (_, single) = otf_mtf(&psf(&mask, &total).unwrap()).unwrap();
        assert!(comb.values.iter().zip(&single.values).all(|(c, s)| *c >= s - 1e-12));
    }
    let mut rev_patterns = mods.patterns.clone();
    rev_patterns.reverse();
    let rev = ModulationSet::new(rev_patterns, Provenance::RandomZernike, None).unwrap();
    let comb_rev = combined_mtf(&ab_phase, &rev, &mask).unwrap();
    assert!(comb.values.iter().zip(&comb_rev.values).all(|(a, b)| (a - b).abs() < 1e-12));

    // proxy linearity in the measurement stack
    let scene = random_image(g, 5);
    let mut stack =
        capture_stack(&scene, &ab_phase, &mods, &mask, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
    let params = ProxyParams::init(&mask, 3).unwrap();
    let out1 = proxy_forward(&stack, &params).unwrap();
    for f in &mut stack.frames {
        for v in &mut f.values {
            *v *= 3.0;
        }
    }
    let out3 = proxy_forward(&stack, &params).unwrap();
    assert!(out1
        .values
        .iter()
        .zip(&out3.values)
        .all(|(a, b)| ((b - params.bias) - 3.0 * (a - params.bias)).abs() < 1e-10));

    // metric identities and aggregation invariance
    let x = random_image(g, 6);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), 99.0);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let vals = [3.0, -1.0, 2.5];
    let mut rev_vals = vals;
    rev_vals.reverse();
    assert_eq!(aggregate(&vals).unwrap(), aggregate(&rev_vals).unwrap());

    // seed determinism across the pipeline
    let s1 = procedural_scene(g, &mut ChaCha8Rng::seed_from_u64(7));
    let s2 = procedural_scene(g, &mut ChaCha8Rng::seed_from_u64(7));
    assert_eq!(s1.values, s2.values);
    let st1 = capture_stack(&s1, &ab_phase, &mods, &mask, 0.05, &mut ChaCha8Rng::seed_from_u64(8))
        .unwrap();
    let st2 = capture_stack(&s2, &ab_phase, &mods, &mask, 0.05, &mut ChaCha8Rng::seed_from_u64(8))
        .unwrap();
    for (a, b) in st1.frames.iter().zip(&st2.frames) {
        assert_eq!(a.values, b.values);
    }

    let dt = start.elapsed().as_secs_f64();
    report("A7", dt < 120.0, &format!("all invariant properties hold; {dt:.0} s"));
}
