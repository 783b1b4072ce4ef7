//! PSNR, single-scale SSIM, and mean/SD aggregation for reporting.

use crate::error::{Result, WavemoError};
use crate::optics::Image;

/// PSNR cap for identical images (zero MSE).
pub const PSNR_CAP_DB: f64 = 99.0;

/// Per-item scores plus their mean/SD summary.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_item: Vec<(String, f64, f64)>,
    pub mean_psnr: f64,
    pub sd_psnr: f64,
    pub mean_ssim: f64,
    pub sd_ssim: f64,
}

impl MetricReport {
    pub fn from_items(per_item: Vec<(String, f64, f64)>) -> Result<Self> {
        let psnrs: Vec<f64> = per_item.iter().map(|i| i.1).collect();
        let ssims: Vec<f64> = per_item.iter().map(|i| i.2).collect();
        let (mean_psnr, sd_psnr) = aggregate(&psnrs)?;
        let (mean_ssim, sd_ssim) = aggregate(&ssims)?;
        Ok(MetricReport { per_item, mean_psnr, sd_psnr, mean_ssim, sd_ssim })
    }
}

/// 10 log10(peak^2 / MSE), capped at 99 dB for identical inputs.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.same_grid(b)?;
    if peak <= 0.0 {
        return Err(WavemoError::Argument(format!("peak {peak} must be positive")));
    }
    let mse: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.values.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Single-scale SSIM: 11x11 Gaussian window sigma 1.5, C1 = 0.01^2,
/// C2 = 0.03^2 at peak 1, averaged over valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_grid(b)?;
    const WIN: usize = 11;
    const C1: f64 = 0.0001;
    const C2: f64 = 0.0009;
    let n = a.grid.n;
    if n < WIN {
        return Err(WavemoError::Argument(format!("grid {n} smaller than SSIM window {WIN}")));
    }
    let w1 = gaussian_window(WIN, 1.5);
    // separable 2-D window
    let mut total = 0.0;
    let mut count = 0usize;
    for wy in 0..=(n - WIN) {
        for wx in 0..=(n - WIN) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..WIN {
                for dx in 0..WIN {
                    let w = w1[dy] * w1[dx];
                    let va = a.at(wx + dx, wy + dy);
                    let vb = b.at(wx + dx, wy + dy);
                    mu_a += w * va;
                    mu_b += w * vb;
                    aa += w * va * va;
                    bb += w * vb * vb;
                    ab += w * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let val = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Arithmetic mean and sample SD (n-1 denominator; SD 0 for a singleton).
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(WavemoError::Argument("aggregate of empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Field, GridSpec};
    use crate::optics::add_noise;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> GridSpec {
        GridSpec::new(n, 0.5).unwrap()
    }

    fn random_image(g: GridSpec, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_values(g, (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let x = random_image(grid(16), 1);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), 99.0);
    }

    #[test]
    fn psnr_constant_offset_is_exact() {
        let g = grid(16);
        let a = Field::zeros(g);
        let b = Field::from_values(g, vec![0.1; g.len()]).unwrap();
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_direct_mse_oracle() {
        let g = grid(8);
        let a = random_image(g, 2);
        let b = random_image(g, 3);
        let mut mse = 0.0;
        for i in 0..g.len() {
            let d = a.values[i] - b.values[i];
            mse += d * d;
        }
        mse /= g.len() as f64;
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn ssim_self_is_one() {
        let x = random_image(grid(32), 4);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_image(grid(32), 5);
        let b = random_image(grid(32), 6);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_match_closed_form() {
        // Constant 0.5 vs 0.6: contrast/structure terms are C2/C2 = 1, so
        // only the luminance term remains.
        let g = grid(16);
        let a = Field::from_values(g, vec![0.5; g.len()]).unwrap();
        let b = Field::from_values(g, vec![0.6; g.len()]).unwrap();
        let c1 = 0.0001;
        let expect = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_tiny_grid() {
        let g = GridSpec::new(8, 0.5).unwrap();
        let a = Field::zeros(g);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn noise_degrades_psnr_and_ssim_monotonically() {
        let g = grid(32);
        let x = random_image(g, 7);
        let sigmas = [0.01, 0.02, 0.05];
        let mut mean_psnr = Vec::new();
        let mut mean_ssim = Vec::new();
        for (si, &s) in sigmas.iter().enumerate() {
            let mut ps = Vec::new();
            let mut ss = Vec::new();
            for seed in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 * (si as u64 + 1) + seed);
                let y = add_noise(&x, s, &mut rng).unwrap();
                ps.push(psnr(&x, &y, 1.0).unwrap());
                ss.push(ssim(&x, &y).unwrap());
            }
            mean_psnr.push(ps.iter().sum::<f64>() / 10.0);
            mean_ssim.push(ss.iter().sum::<f64>() / 10.0);
        }
        assert!(mean_psnr[0] > mean_psnr[1] && mean_psnr[1] > mean_psnr[2]);
        assert!(mean_ssim[0] > mean_ssim[1] && mean_ssim[1] > mean_ssim[2]);
    }

    #[test]
    fn aggregate_singleton_and_pair() {
        assert_eq!(aggregate(&[5.0]).unwrap(), (5.0, 0.0));
        let (m, sd) = aggregate(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((sd - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_empty() {
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_normal_draws_match_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f64> = (0..1000)
            .map(|_| {
                use rand_distr::{Distribution, StandardNormal};
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
            .collect();
        let (m, sd) = aggregate(&vals).unwrap();
        assert!(m.abs() < 0.1, "mean {m}");
        assert!((sd - 1.0).abs() < 0.05, "sd {sd}");
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let vals = [3.0, -1.0, 2.5, 0.7];
        let mut rev = vals;
        rev.reverse();
        let a = aggregate(&vals).unwrap();
        let b = aggregate(&rev).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }
}
