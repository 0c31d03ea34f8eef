//! Counterfactual generation and subtractive visual-attribution maps.
//!
//! `M = original - counterfactual`, computed in `f64` against the unclamped
//! decoder output so that `counterfactual + M == original` holds exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_from_guide, start_time, Model};
use crate::error::{Result, VadeError};
use crate::image::{encode_rgb_png, Image, DATA_MAX, DATA_MIN};
use crate::metrics::ssim_images;
use crate::tensor::SeededRng;

pub const DEFAULT_DILATION: usize = 2;
/// `|M|` at which the overlay reaches full opacity.
pub const OVERLAY_SATURATION: f64 = 0.25;
/// Overlay opacity at saturation.
pub const OVERLAY_MAX_ALPHA: f64 = 0.8;
pub const MAX_GUIDANCE: f64 = 9.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub prompt: String,
    pub strength: f64,
    pub guidance: f64,
    pub steps: usize,
    pub seed: u64,
    #[serde(skip)]
    pub control: Option<Image>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            prompt: "normal chest scan".into(),
            strength: 0.85,
            guidance: 7.5,
            steps: 50,
            seed: 0,
            control: None,
        }
    }
}

impl GenerationConfig {
    /// Range checks; errors name the offending field.
    pub fn validate(&self, max_steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(VadeError::InvalidParam(format!(
                "strength must be in [0, 1], got {}",
                self.strength
            )));
        }
        if !(0.0..=MAX_GUIDANCE).contains(&self.guidance) {
            return Err(VadeError::InvalidParam(format!(
                "guidance must be in [0, {MAX_GUIDANCE}], got {}",
                self.guidance
            )));
        }
        if self.steps == 0 || self.steps > max_steps {
            return Err(VadeError::InvalidParam(format!(
                "steps must be in [1, {max_steps}], got {}",
                self.steps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Counterfactual {
    /// Decoder output clamped to the data range.
    pub image: Image,
    pub unclamped: Image,
}

fn check_input(model: &Model, image: &Image) -> Result<()> {
    let n = model.codec.config.image_size;
    if image.width() != n || image.height() != n {
        return Err(VadeError::Shape(format!(
            "model expects {n}x{n} images, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    if let Some(v) = image
        .pixels()
        .iter()
        .find(|v| !v.is_finite() || !(DATA_MIN..=DATA_MAX).contains(*v))
    {
        return Err(VadeError::InvalidParam(format!(
            "pixel value {v} outside the data range"
        )));
    }
    Ok(())
}

/// Encode, noise to `t0`, guided reverse diffusion, decode.
pub fn counterfactual(
    model: &Model,
    image: &Image,
    cfg: &GenerationConfig,
) -> Result<Counterfactual> {
    cfg.validate(model.schedule.steps())?;
    check_input(model, image)?;
    if start_time(&model.schedule, cfg.strength) == 0.0 {
        return Ok(Counterfactual {
            image: image.clone(),
            unclamped: image.clone(),
        });
    }
    let control = cfg.control.as_ref().map(|c| c.to_tensor());
    let guide = model.codec.encode(&image.to_tensor())?;
    let cond = model.condition(&cfg.prompt)?;
    let null = model.null_condition();
    let mut rng = SeededRng::with_stream(cfg.seed, 31);
    let z = sample_from_guide(
        &model.schedule,
        &guide,
        cfg.strength,
        cfg.steps,
        &mut rng,
        |x, t| model.guided_eps(x, t, &cond, &null, cfg.guidance, control.as_ref()),
    )?;
    let unclamped = Image::from_tensor(&model.codec.decode(&z)?)?;
    Ok(Counterfactual {
        image: unclamped.to_data_range(),
        unclamped,
    })
}

/// Disease-direction edit of a healthy scan; the same pipeline as
/// [`counterfactual`] driven by a disease prompt.
pub fn induce(model: &Model, healthy: &Image, cfg: &GenerationConfig) -> Result<Counterfactual> {
    counterfactual(model, healthy, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VAMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub source: Option<String>,
    pub config: Option<GenerationConfig>,
    pub mask_applied: bool,
}

impl VAMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean_abs(&self) -> f64 {
        self.total_mass() / self.values.len() as f64
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    fn check_size(&self, img: &Image) -> Result<()> {
        if img.width() != self.width || img.height() != self.height {
            return Err(VadeError::Shape(format!(
                "map is {}x{} but image is {}x{}",
                self.width,
                self.height,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }
}

/// `original - counter`, exactly, in `f64`.
pub fn va_map(original: &Image, counter: &Image) -> Result<VAMap> {
    original.same_size(counter)?;
    let values = original
        .pixels()
        .iter()
        .zip(counter.pixels())
        .map(|(&o, &c)| o as f64 - c as f64)
        .collect();
    Ok(VAMap {
        width: original.width(),
        height: original.height(),
        values,
        source: None,
        config: None,
        mask_applied: false,
    })
}

/// Checks `counter + M == original` pixel for pixel.
pub fn check_decomposition(original: &Image, counter: &Image, map: &VAMap) -> Result<()> {
    map.check_size(original)?;
    original.same_size(counter)?;
    let ok = original
        .pixels()
        .iter()
        .zip(counter.pixels())
        .zip(&map.values)
        .all(|((&o, &c), &m)| c as f64 + m == o as f64);
    if !ok {
        return Err(VadeError::NonFinite(
            "counterfactual + map does not reproduce the original".into(),
        ));
    }
    Ok(())
}

/// Zeroes the map outside a binary mask.
pub fn masked_va(map: &VAMap, mask: &Image) -> Result<VAMap> {
    map.check_size(mask)?;
    let values = map
        .values
        .iter()
        .zip(mask.pixels())
        .map(|(&v, &m)| if m > 0.5 { v } else { 0.0 })
        .collect();
    Ok(VAMap {
        values,
        mask_applied: true,
        ..map.clone()
    })
}

/// Grows a binary mask by a Euclidean disc of radius `px`.
pub fn dilate(mask: &Image, px: usize) -> Image {
    if px == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let r = px as isize;
    Image::from_fn(mask.width(), mask.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x + dx, y + dy);
                if dx * dx + dy * dy <= r * r
                    && (0..w).contains(&nx)
                    && (0..h).contains(&ny)
                    && mask.get(nx as usize, ny as usize) > 0.5
                {
                    return 1.0;
                }
            }
        }
        0.0
    })
}

/// Fraction of `|M|` mass inside a region; 1 when the map is all zero.
pub fn mass_fraction(map: &VAMap, region: &Image) -> Result<f64> {
    map.check_size(region)?;
    let total = map.total_mass();
    if total == 0.0 {
        return Ok(1.0);
    }
    let inside: f64 = map
        .values
        .iter()
        .zip(region.pixels())
        .filter(|(_, &m)| m > 0.5)
        .map(|(v, _)| v.abs())
        .sum();
    Ok(inside / total)
}

/// `|M|` mass inside the lesion mask dilated by `dilation_px`, over total mass.
pub fn localization_score(map: &VAMap, lesion_mask: &Image, dilation_px: usize) -> Result<f64> {
    mass_fraction(map, &dilate(lesion_mask, dilation_px))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attribution {
    pub counter: Counterfactual,
    pub map: VAMap,
    /// SSIM between the input and the clamped counterfactual.
    pub ssim: f64,
    pub localization: Option<f64>,
}

/// Full pipeline: counterfactual, map, identity check, scores.
pub fn attribute(
    model: &Model,
    image: &Image,
    cfg: &GenerationConfig,
    lesion_mask: Option<&Image>,
) -> Result<Attribution> {
    let counter = counterfactual(model, image, cfg)?;
    let mut map = va_map(image, &counter.unclamped)?;
    check_decomposition(image, &counter.unclamped, &map)?;
    map.config = Some(GenerationConfig {
        control: None,
        ..cfg.clone()
    });
    map.source = Some(image.content_hash());
    let ssim = ssim_images(image, &counter.image)?;
    let localization = lesion_mask
        .map(|m| localization_score(&map, m, DEFAULT_DILATION))
        .transpose()?;
    Ok(Attribution {
        counter,
        map,
        ssim,
        localization,
    })
}

/// RGB overlay: grayscale base blended toward red where `M > 0` and blue
/// where `M < 0`, with alpha `OVERLAY_MAX_ALPHA * min(1, |M| / OVERLAY_SATURATION)`.
pub fn overlay_rgb(original: &Image, map: &VAMap) -> Result<Vec<u8>> {
    map.check_size(original)?;
    let mut out = Vec::with_capacity(original.pixels().len() * 3);
    for (&p, &m) in original.pixels().iter().zip(&map.values) {
        let g = p.clamp(DATA_MIN, DATA_MAX) as f64 * 255.0;
        let alpha = OVERLAY_MAX_ALPHA * (m.abs() / OVERLAY_SATURATION).min(1.0);
        let color = if m > 0.0 {
            [255.0, 0.0, 0.0]
        } else {
            [0.0, 0.0, 255.0]
        };
        for c in color {
            out.push(((1.0 - alpha) * g + alpha * c).round() as u8);
        }
    }
    Ok(out)
}

pub fn overlay_png(original: &Image, map: &VAMap) -> Result<Vec<u8>> {
    encode_rgb_png(
        original.width(),
        original.height(),
        &overlay_rgb(original, map)?,
    )
}

pub fn render_overlay(original: &Image, map: &VAMap, out_path: &Path) -> Result<()> {
    let bytes = overlay_png(original, map)?;
    std::fs::write(out_path, bytes).map_err(|e| VadeError::io(out_path, e))
}

/// Signed map as 8-bit grayscale, `0.5 + M / 2`.
pub fn map_image(map: &VAMap) -> Image {
    Image::from_fn(map.width, map.height, |x, y| {
        (0.5 + 0.5 * map.get(x, y)).clamp(0.0, 1.0) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_cases() {
        let a = Image::filled(4, 4, 1.0);
        let b = Image::zeros(4, 4);
        assert!(va_map(&a, &a).unwrap().values.iter().all(|&v| v == 0.0));
        let m = va_map(&a, &b).unwrap();
        assert!(m.values.iter().all(|&v| v == 1.0));
        check_decomposition(&a, &b, &m).unwrap();
        assert!(va_map(&a, &Image::zeros(3, 4)).is_err());
    }

    #[test]
    fn localization_cases() {
        let m = va_map(&Image::filled(4, 4, 1.0), &Image::zeros(4, 4)).unwrap();
        let quarter = Image::from_fn(4, 4, |x, y| if x < 2 && y < 2 { 1.0 } else { 0.0 });
        assert_eq!(localization_score(&m, &quarter, 0).unwrap(), 0.25);
        let masked = masked_va(&m, &quarter).unwrap();
        assert!(masked.mask_applied);
        assert_eq!(localization_score(&masked, &quarter, 0).unwrap(), 1.0);
        let zero = va_map(&Image::zeros(4, 4), &Image::zeros(4, 4)).unwrap();
        assert_eq!(localization_score(&zero, &quarter, 2).unwrap(), 1.0);
    }

    #[test]
    fn dilation_grows_a_point_to_a_disc() {
        let mut p = Image::zeros(9, 9);
        p.set(4, 4, 1.0);
        let d = dilate(&p, 2);
        assert_eq!(d.pixels().iter().filter(|&&v| v > 0.5).count(), 13);
        assert_eq!(d.get(6, 4), 1.0);
        assert_eq!(d.get(6, 6), 0.0);
    }

    #[test]
    fn overlay_alpha_ramp() {
        let base = Image::filled(2, 1, 0.5);
        let zero = va_map(&base, &base).unwrap();
        assert_eq!(overlay_rgb(&base, &zero).unwrap(), vec![128; 6]);
        let sat = VAMap {
            values: vec![1.0, -1.0],
            ..zero
        };
        let g = 0.5 * 255.0 * (1.0 - OVERLAY_MAX_ALPHA);
        let hi = (g + OVERLAY_MAX_ALPHA * 255.0).round() as u8;
        let lo = g.round() as u8;
        assert_eq!(
            overlay_rgb(&base, &sat).unwrap(),
            vec![hi, lo, lo, lo, lo, hi]
        );
    }

    #[test]
    fn config_validation_names_fields() {
        let ok = GenerationConfig::default();
        ok.validate(200).unwrap();
        let e = GenerationConfig {
            strength: 1.5,
            ..ok.clone()
        }
        .validate(200)
        .unwrap_err();
        assert!(e.to_string().contains("strength"));
        let e = GenerationConfig {
            guidance: 9.5,
            ..ok.clone()
        }
        .validate(200)
        .unwrap_err();
        assert!(e.to_string().contains("guidance"));
        assert!(GenerationConfig { steps: 0, ..ok }.validate(200).is_err());
    }
}
