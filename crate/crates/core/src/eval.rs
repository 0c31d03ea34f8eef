//! Evaluation harness: counterfactuals over a held-out set, then Fréchet
//! distances, SSIM / MS-SSIM and localization per disease class.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{
    attribute, localization_score, masked_va, GenerationConfig, DEFAULT_DILATION,
};
use crate::codec::Codec;
use crate::diffusion::Model;
use crate::error::{Result, VadeError};
use crate::image::Image;
use crate::metrics::{
    feature_embed, frechet, gaussian_stats, ms_ssim_images, FeatureExtractor, MsSsimParams,
};
use crate::phantom::{LabeledImage, PhantomClass};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const PUBLISHED_NOTE: &str =
    "published_reference values come from full-scale radiograph experiments with Inception features and are not reproducible here";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub generation: GenerationConfig,
    pub classes: Vec<PhantomClass>,
    pub max_per_class: Option<usize>,
    pub dilation: usize,
    /// Score localization on the map restricted to the lung mask.
    pub lung_masked: bool,
    /// Also run the healthy prompt on healthy inputs.
    pub healthy_edits: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            generation: GenerationConfig::default(),
            classes: PhantomClass::TRAINED_DISEASES.to_vec(),
            max_per_class: None,
            dilation: DEFAULT_DILATION,
            lung_masked: true,
            healthy_edits: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    pub class: PhantomClass,
    pub ssim: f64,
    pub ms_ssim: f64,
    /// On the lung-masked map when `lung_masked` is set.
    pub localization: f64,
    pub localization_unmasked: f64,
    pub mean_abs_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub fid_diseased_vs_generated: f64,
    pub fid_diseased_vs_real_healthy: f64,
    pub abs_difference: f64,
    pub fid_real_vs_generated_healthy: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub source_class: String,
}

/// Reference rows for the classes that have a counterpart in the original study.
pub fn published_reference(class: PhantomClass) -> Option<PublishedReference> {
    let r = |a, b, d, c, s, m, name: &str| PublishedReference {
        fid_diseased_vs_generated: a,
        fid_diseased_vs_real_healthy: b,
        abs_difference: d,
        fid_real_vs_generated_healthy: c,
        ssim: s,
        ms_ssim: m,
        source_class: name.into(),
    };
    match class {
        PhantomClass::Opacity => Some(r(27.8, 46.9, 19.1, 60.60, 0.780, 0.813, "Lung Opacity")),
        PhantomClass::Haze => Some(r(32.2, 38.2, 6.0, 45.11, 0.798, 0.830, "COVID 19")),
        PhantomClass::Pneumonia => Some(r(
            37.63,
            97.6,
            59.97,
            110.72,
            0.768,
            0.802,
            "Viral Pneumonia",
        )),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: PhantomClass,
    pub n: usize,
    pub fid_diseased_vs_generated: f64,
    pub fid_diseased_vs_real_healthy: f64,
    /// `|fid_diseased_vs_real_healthy - fid_diseased_vs_generated|`.
    pub abs_difference: f64,
    pub fid_real_vs_generated_healthy: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub localization: f64,
    pub localization_unmasked: f64,
    pub mean_abs_map: f64,
    pub published_reference: Option<PublishedReference>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthyReport {
    pub n: usize,
    pub mean_abs_map: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub checkpoint_id: String,
    pub extractor: String,
    pub ms_ssim_weights: Vec<f64>,
    pub notes: Vec<String>,
    pub config: EvalConfig,
    pub classes: Vec<ClassReport>,
    pub healthy: Option<HealthyReport>,
    pub images: Vec<ImageScores>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn fid(a: &[Image], b: &[Image], ex: FeatureExtractor<'_>) -> Result<f64> {
    frechet(
        &gaussian_stats(&feature_embed(a, ex)?)?,
        &gaussian_stats(&feature_embed(b, ex)?)?,
    )
}

/// Runs the suite. `feature_codec` selects the codec-feature extractor;
/// without it the raw area-pool extractor is used.
pub fn evaluate_suite(
    model: &Model,
    checkpoint_id: &str,
    test: &[LabeledImage],
    cfg: &EvalConfig,
    feature_codec: Option<&Codec>,
    mut progress: impl FnMut(&str),
) -> Result<EvalReport> {
    let mut by_class: BTreeMap<PhantomClass, Vec<&LabeledImage>> = BTreeMap::new();
    for item in test {
        by_class.entry(item.class).or_default().push(item);
    }
    let mut missing: Vec<String> = Vec::new();
    for c in std::iter::once(PhantomClass::Healthy).chain(cfg.classes.iter().copied()) {
        if !by_class.contains_key(&c) {
            missing.push(c.name().into());
        }
    }
    if !missing.is_empty() {
        return Err(VadeError::MissingClasses(missing));
    }
    if let Some(n) = cfg.max_per_class {
        by_class.values_mut().for_each(|v| v.truncate(n));
    }
    let ex = match feature_codec {
        Some(c) => FeatureExtractor::Codec(c),
        None => FeatureExtractor::RawDownsample,
    };
    let real_healthy: Vec<Image> = by_class[&PhantomClass::Healthy]
        .iter()
        .map(|i| i.image.clone())
        .collect();
    let ms_params = MsSsimParams::default();
    let mut images = Vec::new();
    let mut classes = Vec::new();
    let run = |item: &LabeledImage, k: usize| -> Result<(Image, ImageScores)> {
        let gen = GenerationConfig {
            seed: cfg.generation.seed.wrapping_add(k as u64),
            ..cfg.generation.clone()
        };
        let a = attribute(model, &item.image, &gen, None)?;
        let localization_unmasked = localization_score(&a.map, &item.lesion_mask, cfg.dilation)?;
        let localization = if cfg.lung_masked {
            localization_score(
                &masked_va(&a.map, &item.lung_mask)?,
                &item.lesion_mask,
                cfg.dilation,
            )?
        } else {
            localization_unmasked
        };
        let scores = ImageScores {
            id: item.id.clone(),
            class: item.class,
            ssim: a.ssim,
            ms_ssim: ms_ssim_images(&item.image, &a.counter.image)?,
            localization,
            localization_unmasked,
            mean_abs_map: a.map.mean_abs(),
        };
        Ok((a.counter.image, scores))
    };
    for &class in &cfg.classes {
        let items = &by_class[&class];
        let mut generated = Vec::with_capacity(items.len());
        let mut rows = Vec::with_capacity(items.len());
        for (k, item) in items.iter().enumerate() {
            progress(&item.id);
            let (img, s) = run(item, k)?;
            generated.push(img);
            rows.push(s);
        }
        let diseased: Vec<Image> = items.iter().map(|i| i.image.clone()).collect();
        let a = fid(&diseased, &generated, ex)?;
        let b = fid(&diseased, &real_healthy, ex)?;
        classes.push(ClassReport {
            class,
            n: items.len(),
            fid_diseased_vs_generated: a,
            fid_diseased_vs_real_healthy: b,
            abs_difference: (b - a).abs(),
            fid_real_vs_generated_healthy: fid(&real_healthy, &generated, ex)?,
            ssim: mean(rows.iter().map(|r| r.ssim)),
            ms_ssim: mean(rows.iter().map(|r| r.ms_ssim)),
            localization: mean(rows.iter().map(|r| r.localization)),
            localization_unmasked: mean(rows.iter().map(|r| r.localization_unmasked)),
            mean_abs_map: mean(rows.iter().map(|r| r.mean_abs_map)),
            published_reference: published_reference(class),
        });
        images.extend(rows);
    }
    let healthy = if cfg.healthy_edits {
        let mut rows = Vec::new();
        for (k, item) in by_class[&PhantomClass::Healthy].iter().enumerate() {
            progress(&item.id);
            rows.push(run(item, k)?.1);
        }
        let h = HealthyReport {
            n: rows.len(),
            mean_abs_map: mean(rows.iter().map(|r| r.mean_abs_map)),
            ssim: mean(rows.iter().map(|r| r.ssim)),
        };
        images.extend(rows);
        Some(h)
    } else {
        None
    };
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        checkpoint_id: checkpoint_id.into(),
        extractor: if feature_codec.is_some() {
            "codec"
        } else {
            "raw-downsample"
        }
        .into(),
        notes: vec![
            format!(
                "MS-SSIM uses {} levels with the first standard weights rescaled to sum to 1: {:?}",
                ms_params.levels(),
                ms_params.weights
            ),
            PUBLISHED_NOTE.into(),
        ],
        ms_ssim_weights: ms_params.weights,
        config: cfg.clone(),
        classes,
        healthy,
        images,
    })
}

impl EvalReport {
    /// One row per class per metric: `class,metric,value,published_reference`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        out.push_str("class,metric,value,published_reference\n");
        for c in &self.classes {
            let p = c.published_reference.as_ref();
            let rows: [(&str, f64, Option<f64>); 9] = [
                (
                    "fid_diseased_vs_generated",
                    c.fid_diseased_vs_generated,
                    p.map(|p| p.fid_diseased_vs_generated),
                ),
                (
                    "fid_diseased_vs_real_healthy",
                    c.fid_diseased_vs_real_healthy,
                    p.map(|p| p.fid_diseased_vs_real_healthy),
                ),
                (
                    "abs_difference",
                    c.abs_difference,
                    p.map(|p| p.abs_difference),
                ),
                (
                    "fid_real_vs_generated_healthy",
                    c.fid_real_vs_generated_healthy,
                    p.map(|p| p.fid_real_vs_generated_healthy),
                ),
                ("ssim", c.ssim, p.map(|p| p.ssim)),
                ("ms_ssim", c.ms_ssim, p.map(|p| p.ms_ssim)),
                ("localization", c.localization, None),
                ("localization_unmasked", c.localization_unmasked, None),
                ("mean_abs_map", c.mean_abs_map, None),
            ];
            for (name, v, r) in rows {
                let r = r.map(|r| r.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{},{name},{v},{r}", c.class.name());
            }
        }
        if let Some(h) = &self.healthy {
            let _ = writeln!(out, "healthy,mean_abs_map,{},", h.mean_abs_map);
            let _ = writeln!(out, "healthy,ssim,{},", h.ssim);
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| VadeError::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?)
            .map_err(|e| VadeError::io(&json, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| VadeError::io(&csv, e))
    }
}
