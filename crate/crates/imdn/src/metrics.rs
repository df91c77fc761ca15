//! PSNR and SSIM on the luminance channel, dataset evaluation, and
//! train-time patch sampling with flip/rotation augmentation.
//!
//! Both metrics shave a configurable border before comparing (boundary
//! pixels carry reconstruction artifacts that the convention excludes) and
//! operate on `[0, 1]` Y planes. PSNR of identical inputs is the infinity
//! sentinel. SSIM uses the standard 11x11 Gaussian window with sigma 1.5,
//! `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, averaged over fully-valid
//! window positions.

use rand::Rng;

use crate::image::{bicubic_resize, rgb_to_y, ImageError};
use crate::parallel::map_indexed;
use crate::tensor::Tensor;

/// Per-image metric pair.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Dataset evaluation: per-image rows plus arithmetic means.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub shave: usize,
}

fn shaved_y(rgb: &Tensor, shave: usize) -> Result<Tensor, ImageError> {
    let y = rgb_to_y(rgb);
    let [_, _, h, w] = y.shape();
    if h <= 2 * shave || w <= 2 * shave {
        return Err(ImageError::DimMismatch {
            left: (h, w),
            right: (2 * shave + 1, 2 * shave + 1),
        });
    }
    Ok(y.crop_spatial(shave, shave, h - 2 * shave, w - 2 * shave))
}

fn check_same_dims(a: &Tensor, b: &Tensor) -> Result<(), ImageError> {
    if a.shape() != b.shape() {
        return Err(ImageError::DimMismatch {
            left: (a.height(), a.width()),
            right: (b.height(), b.width()),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio on the Y plane, in dB.
///
/// `10 * log10(1 / MSE)` after shaving `shave` pixels from every border;
/// identical images return `f64::INFINITY`.
pub fn psnr_y(sr: &Tensor, hr: &Tensor, shave: usize) -> Result<f64, ImageError> {
    check_same_dims(sr, hr)?;
    let a = shaved_y(sr, shave)?;
    let b = shaved_y(hr, shave)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for r in 0..SSIM_WINDOW {
        for c in 0..SSIM_WINDOW {
            let dr = r as f64 - half;
            let dc = c as f64 - half;
            let v = (-(dr * dr + dc * dc) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[r * SSIM_WINDOW + c] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local structural similarity on the Y plane.
pub fn ssim_y(sr: &Tensor, hr: &Tensor, shave: usize) -> Result<f64, ImageError> {
    check_same_dims(sr, hr)?;
    let a = shaved_y(sr, shave)?;
    let b = shaved_y(hr, shave)?;
    let [_, _, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(ImageError::DimMismatch {
            left: (h, w),
            right: (SSIM_WINDOW, SSIM_WINDOW),
        });
    }
    let window = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let pa = a.plane(0, 0);
    let pb = b.plane(0, 0);

    let rows = h - SSIM_WINDOW + 1;
    let cols = w - SSIM_WINDOW + 1;
    let row_sums = map_indexed(rows, |r| {
        let mut acc = 0.0;
        for c in 0..cols {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for i in 0..SSIM_WINDOW {
                let base = (r + i) * w + c;
                let wrow = &window[i * SSIM_WINDOW..(i + 1) * SSIM_WINDOW];
                for (j, &wv) in wrow.iter().enumerate() {
                    let x = pa[base + j];
                    let y = pb[base + j];
                    mu_a += wv * x;
                    mu_b += wv * y;
                    // products grouped so that swapping the images cannot
                    // change rounding, and aa/ab agree bitwise for x == y
                    aa += wv * (x * x);
                    bb += wv * (y * y);
                    ab += wv * (x * y);
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let ssim = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            acc += ssim;
        }
        acc
    });
    // fixed reduction order regardless of thread count
    let total: f64 = row_sums.iter().sum();
    Ok(total / (rows * cols) as f64)
}

/// Aggregate per-image `(name, sr, hr)` triples into an [`EvalReport`].
pub fn evaluate_pairs(
    pairs: &[(String, Tensor, Tensor)],
    shave: usize,
) -> Result<EvalReport, ImageError> {
    let results = map_indexed(pairs.len(), |i| {
        let (name, sr, hr) = &pairs[i];
        let psnr = psnr_y(sr, hr, shave)?;
        let ssim = ssim_y(sr, hr, shave)?;
        Ok::<_, ImageError>(EvalRow {
            name: name.clone(),
            psnr_db: psnr,
            ssim,
        })
    });
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    let n = rows.len().max(1) as f64;
    let mean_psnr_db = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    Ok(EvalReport {
        rows,
        mean_psnr_db,
        mean_ssim,
        shave,
    })
}

/// An aligned low/high-resolution patch pair for one training step.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub lr: Tensor,
    pub hr: Tensor,
}

/// A high-resolution image with its precomputed bicubic LR counterpart.
#[derive(Debug, Clone)]
pub struct TrainImage {
    pub hr: Tensor,
    pub lr: Tensor,
    pub scale: usize,
}

impl TrainImage {
    /// Downscale `hr` by `scale` with the antialiased kernel.
    pub fn from_hr(hr: Tensor, scale: usize) -> Self {
        let [_, _, h, w] = hr.shape();
        assert!(h % scale == 0 && w % scale == 0, "HR dims must divide by scale");
        let lr = bicubic_resize(&hr, h / scale, w / scale, true);
        TrainImage { hr, lr, scale }
    }
}

/// Crop an aligned LR/HR patch pair at a random anchor (HR anchor divisible
/// by the scale so the patches cover the same content), optionally flipped
/// and rotated by 90 degrees. The same transform is applied to both patches.
pub fn sample_patch_pair(
    image: &TrainImage,
    hr_patch: usize,
    flip: bool,
    rotate: bool,
    rng: &mut impl Rng,
) -> Result<PatchPair, ImageError> {
    let [_, _, h, w] = image.hr.shape();
    let scale = image.scale;
    if hr_patch > h || hr_patch > w || hr_patch % scale != 0 {
        return Err(ImageError::DimMismatch {
            left: (h, w),
            right: (hr_patch, hr_patch),
        });
    }
    let lr_patch = hr_patch / scale;
    let max_r = (h - hr_patch) / scale;
    let max_c = (w - hr_patch) / scale;
    let r_lr = rng.gen_range(0..=max_r);
    let c_lr = rng.gen_range(0..=max_c);

    let mut hr = image.hr.crop_spatial(r_lr * scale, c_lr * scale, hr_patch, hr_patch);
    let mut lr = image.lr.crop_spatial(r_lr, c_lr, lr_patch, lr_patch);

    if flip && rng.gen_bool(0.5) {
        hr = hr.flip_horizontal();
        lr = lr.flip_horizontal();
    }
    if rotate && rng.gen_bool(0.5) {
        hr = hr.rotate90();
        lr = lr.rotate90();
    }
    Ok(PatchPair { lr, hr })
}
