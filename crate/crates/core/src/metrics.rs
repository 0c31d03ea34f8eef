//! Image quality metrics: SSIM, MS-SSIM, Gaussian feature statistics and
//! the Fréchet distance between them.

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Result, VadeError};
use crate::image::Image;
use crate::tensor::{downsample2x, psd_sqrt, LowPass, SymMatrix, Tensor};

/// Standard five-level MS-SSIM weights.
pub const MS_SSIM_WEIGHTS_5: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.sigma <= 0.0 || self.c1() <= 0.0 || self.c2() <= 0.0 {
            return Err(VadeError::InvalidParam(
                "SSIM needs a non-empty window and positive constants".into(),
            ));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsSsimParams {
    pub ssim: SsimParams,
    /// Per-level exponents, finest first; the last one also weights luminance.
    pub weights: Vec<f64>,
}

impl MsSsimParams {
    /// First `levels` standard weights rescaled to sum to one.
    pub fn with_levels(levels: usize) -> Result<Self> {
        if levels == 0 || levels > MS_SSIM_WEIGHTS_5.len() {
            return Err(VadeError::InvalidParam(format!(
                "MS-SSIM levels must be in 1..=5, got {levels}"
            )));
        }
        let w = &MS_SSIM_WEIGHTS_5[..levels];
        let s: f64 = w.iter().sum();
        Ok(MsSsimParams {
            ssim: SsimParams::default(),
            weights: w.iter().map(|v| v / s).collect(),
        })
    }

    pub fn levels(&self) -> usize {
        self.weights.len()
    }
}

impl Default for MsSsimParams {
    fn default() -> Self {
        Self::with_levels(3).expect("3 levels are valid")
    }
}

/// Mean luminance term and mean contrast-structure term over valid windows,
/// plus the mean of their product (the SSIM map mean).
struct SsimParts {
    ssim: f64,
    cs: f64,
}

fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xx in 0..ow {
            rows[y * ow + xx] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * x[y * w + xx + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + xx])
                .sum();
        }
    }
    out
}

fn ssim_parts(x: &Tensor<f64>, y: &Tensor<f64>, p: &SsimParams) -> Result<SsimParts> {
    p.validate()?;
    x.same_shape(y)?;
    let &[h, w] = x.shape() else {
        return Err(VadeError::Shape(format!(
            "SSIM expects [h, w] images, got {:?}",
            x.shape()
        )));
    };
    if h < p.window || w < p.window {
        return Err(VadeError::Shape(format!(
            "{h}x{w} image is smaller than the {0}x{0} SSIM window",
            p.window
        )));
    }
    let taps = p.taps();
    let (a, b) = (x.data(), y.data());
    let xx: Vec<f64> = a.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = b.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = a.iter().zip(b).map(|(u, v)| u * v).collect();
    let mx = filter_valid(a, h, w, &taps);
    let my = filter_valid(b, h, w, &taps);
    let exx = filter_valid(&xx, h, w, &taps);
    let eyy = filter_valid(&yy, h, w, &taps);
    let exy = filter_valid(&xy, h, w, &taps);
    let (c1, c2) = (p.c1(), p.c2());
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mx.len() {
        let mxy = mx[i] * my[i];
        let l = (2.0 * mxy + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        let sxx = exx[i] - mx[i] * mx[i];
        let syy = eyy[i] - my[i] * my[i];
        let sxy = exy[i] - mxy;
        let c = (2.0 * sxy + c2) / (sxx + syy + c2);
        ssim += l * c;
        cs += c;
    }
    let n = mx.len() as f64;
    Ok(SsimParts {
        ssim: ssim / n,
        cs: cs / n,
    })
}

/// Mean local SSIM over all valid (unpadded) window positions.
pub fn ssim(x: &Tensor<f64>, y: &Tensor<f64>, p: &SsimParams) -> Result<f64> {
    Ok(ssim_parts(x, y, p)?.ssim)
}

pub fn ssim_images(x: &Image, y: &Image) -> Result<f64> {
    ssim(
        &x.to_tensor_f64(),
        &y.to_tensor_f64(),
        &SsimParams::default(),
    )
}

/// Multi-scale SSIM. Contrast-structure terms at every level, luminance
/// only at the coarsest; 2x2 mean downsampling between levels. Negative
/// per-level terms are clamped to zero before exponentiation.
pub fn ms_ssim(x: &Tensor<f64>, y: &Tensor<f64>, p: &MsSsimParams) -> Result<f64> {
    let m = p.levels();
    if m == 0 || p.weights.iter().any(|&w| w <= 0.0) {
        return Err(VadeError::InvalidParam(
            "MS-SSIM weights must be positive".into(),
        ));
    }
    let need = p.ssim.window << (m - 1);
    if x.shape().iter().any(|&d| d < need) {
        return Err(VadeError::Shape(format!(
            "{:?} is too small for {m} MS-SSIM levels (need {need})",
            x.shape()
        )));
    }
    let (mut a, mut b) = (x.clone(), y.clone());
    let mut out = 1.0;
    for (j, &wj) in p.weights.iter().enumerate() {
        let parts = ssim_parts(&a, &b, &p.ssim)?;
        if j + 1 == m {
            out *= parts.ssim.max(0.0).powf(wj);
        } else {
            out *= parts.cs.max(0.0).powf(wj);
            a = downsample2x(&a, LowPass::Mean2x2)?;
            b = downsample2x(&b, LowPass::Mean2x2)?;
        }
    }
    Ok(out)
}

pub fn ms_ssim_images(x: &Image, y: &Image) -> Result<f64> {
    ms_ssim(
        &x.to_tensor_f64(),
        &y.to_tensor_f64(),
        &MsSsimParams::default(),
    )
}

/// Peak signal-to-noise ratio in dB for unit data range.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    x.same_size(y)?;
    let mse = x
        .pixels()
        .iter()
        .zip(y.pixels())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / x.pixels().len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

#[derive(Clone, Copy, Debug)]
pub enum FeatureExtractor<'a> {
    /// Pooled latents of a trained codec.
    Codec(&'a Codec),
    /// 8x8 grid of area means.
    RawDownsample,
}

/// Area means over an 8x8 grid of equal blocks.
pub fn area_pool_features(img: &Image) -> Result<Vec<f64>> {
    let (w, h) = (img.width(), img.height());
    if w % 8 != 0 || h % 8 != 0 {
        return Err(VadeError::Shape(format!(
            "area pooling needs sizes divisible by 8, got {w}x{h}"
        )));
    }
    let (bw, bh) = (w / 8, h / 8);
    let mut out = Vec::with_capacity(64);
    for by in 0..8 {
        for bx in 0..8 {
            let mut s = 0.0f64;
            for y in by * bh..(by + 1) * bh {
                for x in bx * bw..(bx + 1) * bw {
                    s += img.get(x, y) as f64;
                }
            }
            out.push(s / (bw * bh) as f64);
        }
    }
    Ok(out)
}

/// One 64-dim feature row per image.
pub fn feature_embed(images: &[Image], extractor: FeatureExtractor<'_>) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| match extractor {
            FeatureExtractor::Codec(c) => c.features(img),
            FeatureExtractor::RawDownsample => area_pool_features(img),
        })
        .collect()
}

pub const STATS_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
    pub n: usize,
    /// Ridge added to the diagonal when `n < d + 1`, else 0.
    pub ridge: f64,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance (two-pass).
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(VadeError::InvalidParam(format!(
            "Gaussian statistics need at least 2 samples, got {n}"
        )));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(VadeError::Shape(
            "feature rows must be non-empty and equally long".into(),
        ));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = SymMatrix::zeros(d);
    for i in 0..d {
        for j in i..d {
            let s: f64 = features
                .iter()
                .map(|f| (f[i] - mean[i]) * (f[j] - mean[j]))
                .sum();
            cov.set(i, j, s / (n - 1) as f64);
        }
    }
    let ridge = if n < d + 1 { STATS_RIDGE } else { 0.0 };
    if ridge > 0.0 {
        cov.add_ridge(ridge);
    }
    Ok(GaussianStats {
        mean,
        cov,
        n,
        ridge,
    })
}

/// Fréchet distance between two Gaussians.
///
/// The cross term uses `sqrt(A^{1/2} B A^{1/2})`, which is symmetric and
/// has the same trace as `(A B)^{1/2}`.
pub fn frechet(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(VadeError::Shape(format!(
            "Fréchet distance between {d}-dim and {}-dim statistics",
            b.dim()
        )));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let ra = psd_sqrt(&a.cov)?;
    let ra_full = ra.to_full();
    let left = ra.matmul_full(&b.cov.to_full());
    let mut prod = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            prod[i * d + j] = (0..d).map(|k| left[i * d + k] * ra_full[k * d + j]).sum();
        }
    }
    let cross = psd_sqrt(&SymMatrix::from_full_symmetrized(&prod, d)?)?.trace();
    let dist = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    let scale = a.cov.trace() + b.cov.trace() + mean_term;
    if dist < 0.0 {
        if dist >= -1e-8 * scale.max(1.0) {
            return Ok(0.0);
        }
        return Err(VadeError::NotPsd {
            min_eig: dist,
            tol: 1e-8 * scale.max(1.0),
        });
    }
    Ok(dist)
}

/// Fréchet distance between the Gaussian fits of two image sets.
pub fn image_frechet(a: &[Image], b: &[Image], extractor: FeatureExtractor<'_>) -> Result<f64> {
    frechet(
        &gaussian_stats(&feature_embed(a, extractor)?)?,
        &gaussian_stats(&feature_embed(b, extractor)?)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_1d(mean: f64, var: f64) -> GaussianStats {
        GaussianStats {
            mean: vec![mean],
            cov: SymMatrix::from_diag(&[var]),
            n: 100,
            ridge: 0.0,
        }
    }

    #[test]
    fn frechet_one_dim_closed_forms() {
        assert!((frechet(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-10);
        assert!((frechet(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-10);
        assert!(frechet(
            &stats_1d(0.0, 1.0),
            &GaussianStats {
                mean: vec![0.0; 2],
                cov: SymMatrix::identity(2),
                n: 3,
                ridge: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn stats_hand_arithmetic() {
        let s = gaussian_stats(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.cov.get(0, 0), 2.0);
        assert_eq!(s.ridge, 0.0);
        let z = gaussian_stats(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(z.ridge, STATS_RIDGE);
        assert_eq!(z.cov.get(0, 1), 0.0);
        assert_eq!(z.cov.get(2, 2), STATS_RIDGE);
        assert!(gaussian_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn ms_ssim_weights_sum_to_one() {
        let p = MsSsimParams::default();
        assert_eq!(p.levels(), 3);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(MsSsimParams::with_levels(1).unwrap().weights, vec![1.0]);
        assert!(MsSsimParams::with_levels(0).is_err());
    }

    #[test]
    fn small_image_is_rejected() {
        let x = Tensor::<f64>::zeros(&[8, 8]);
        assert!(ssim(&x, &x, &SsimParams::default()).is_err());
        let y = Tensor::<f64>::zeros(&[32, 32]);
        assert!(ms_ssim(&y, &y, &MsSsimParams::default()).is_err());
    }
}
