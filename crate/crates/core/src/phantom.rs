//! Procedural chest phantoms with exact lesion masks.
//!
//! Every sample is a pure function of `(spec, class, seed)`. Anatomy and
//! texture come from one RNG substream and lesion parameters from another,
//! so a diseased sample and the healthy sample with the same seed share
//! every pixel outside the lesion.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VadeError};
use crate::image::{hex_string, read_image, write_image, BitDepth, Image};
use crate::tensor::SeededRng;

/// Field values below this are dropped so that the lesion support and the
/// pixel difference agree exactly after f32 rounding.
const FIELD_FLOOR: f64 = 1e-3;

const ANATOMY_STREAM: u64 = 1;
const LESION_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
    pub intensity: f64,
}

impl Ellipse {
    /// Normalized radius; `< 1` inside.
    pub fn rho(&self, x: f64, y: f64) -> f64 {
        (((x - self.cx) / self.ax).powi(2) + ((y - self.cy) / self.ay).powi(2)).sqrt()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.rho(x, y) < 1.0
    }

    /// Approximate distance to the boundary for interior points.
    pub fn depth(&self, x: f64, y: f64) -> f64 {
        (1.0 - self.rho(x, y)) * self.ax.min(self.ay)
    }

    fn scaled(&self, s: f64) -> Ellipse {
        Ellipse {
            ax: self.ax * s,
            ay: self.ay * s,
            ..*self
        }
    }

    fn inside_of(&self, outer: &Ellipse) -> bool {
        (0..64).all(|i| {
            let th = i as f64 / 64.0 * std::f64::consts::TAU;
            outer.contains(self.cx + self.ax * th.cos(), self.cy + self.ay * th.sin())
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Jitter {
    /// Relative perturbation of every ellipse axis.
    pub axis_frac: f64,
    /// Shift of the whole anatomy, in pixels.
    pub center_px: f64,
}

/// Ranges from which per-sample lesion parameters are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LesionSpec {
    pub opacity_radius: [f64; 2],
    pub opacity_intensity: [f64; 2],
    pub haze_severity: [f64; 2],
    pub cluster_count: [usize; 2],
    pub cluster_radius: [f64; 2],
    pub cluster_intensity: f64,
    pub core_scale: [f64; 2],
    pub edge_px: f64,
    /// Accepted lesion-mask area, in pixels.
    pub area_px: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub body: Ellipse,
    pub left_lung: Ellipse,
    pub right_lung: Ellipse,
    pub core: Ellipse,
    pub texture_amplitude: f64,
    pub jitter: Jitter,
    pub lesions: LesionSpec,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            axis_frac: 0.05,
            center_px: 2.0,
        }
    }
}

impl Default for LesionSpec {
    fn default() -> Self {
        LesionSpec {
            opacity_radius: [4.5, 7.0],
            opacity_intensity: [0.3, 0.4],
            haze_severity: [0.1, 0.2],
            cluster_count: [3, 4],
            cluster_radius: [2.5, 3.5],
            cluster_intensity: 0.3,
            core_scale: [1.35, 1.6],
            edge_px: 2.0,
            area_px: [12, 1500],
        }
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 64,
            body: Ellipse {
                cx: 31.5,
                cy: 31.5,
                ax: 28.0,
                ay: 29.0,
                intensity: 0.55,
            },
            left_lung: Ellipse {
                cx: 20.5,
                cy: 29.0,
                ax: 9.5,
                ay: 16.0,
                intensity: 0.2,
            },
            right_lung: Ellipse {
                cx: 42.5,
                cy: 29.0,
                ax: 9.5,
                ay: 16.0,
                intensity: 0.2,
            },
            core: Ellipse {
                cx: 31.5,
                cy: 40.0,
                ax: 6.0,
                ay: 7.0,
                intensity: 0.8,
            },
            texture_amplitude: 0.006,
            jitter: Jitter::default(),
            lesions: LesionSpec::default(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(VadeError::InvalidParam(format!(
                "image_size {} below 16",
                self.image_size
            )));
        }
        for (name, e) in [
            ("body", &self.body),
            ("left_lung", &self.left_lung),
            ("right_lung", &self.right_lung),
            ("core", &self.core),
        ] {
            if !(0.0..=1.0).contains(&e.intensity) || e.ax <= 0.0 || e.ay <= 0.0 {
                return Err(VadeError::InvalidParam(format!(
                    "{name}: intensity must be in [0,1] and axes positive"
                )));
            }
        }
        for (name, lung) in [
            ("left_lung", &self.left_lung),
            ("right_lung", &self.right_lung),
        ] {
            // Worst case of jitter: lung grows while the body shrinks.
            let grown = lung.scaled(1.0 + self.jitter.axis_frac);
            let shrunk = self.body.scaled(1.0 - self.jitter.axis_frac);
            if !grown.inside_of(&shrunk) {
                return Err(VadeError::Geometry(format!(
                    "{name} not strictly inside body"
                )));
            }
        }
        let l = &self.lesions;
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !(ordered(l.opacity_radius)
            && ordered(l.opacity_intensity)
            && ordered(l.haze_severity)
            && ordered(l.cluster_radius))
            || l.cluster_count[0] == 0
            || l.cluster_count[0] > l.cluster_count[1]
            || l.core_scale[0] < 1.0
            || l.core_scale[0] > l.core_scale[1]
            || l.edge_px <= 0.0
            || l.area_px[0] > l.area_px[1]
        {
            return Err(VadeError::InvalidParam(
                "lesion ranges must be positive and ordered".into(),
            ));
        }
        let bright = self.left_lung.intensity.max(self.right_lung.intensity)
            + self.texture_amplitude
            + l.opacity_intensity[1].max(l.haze_severity[1] + l.cluster_intensity);
        if bright > 1.0 || self.core.intensity + self.texture_amplitude > 1.0 {
            return Err(VadeError::InvalidParam(
                "lesion intensities can leave the data range".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

/// Concrete lesion parameters of one sample. `Left` is image-left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum LesionKind {
    Opacity {
        side: Side,
        radius: f64,
        intensity: f64,
    },
    DiffuseHaze {
        severity: f64,
    },
    FocalCluster {
        count: usize,
        radius: f64,
    },
    EnlargedCore {
        scale: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomClass {
    Healthy,
    Opacity,
    Haze,
    Pneumonia,
    Cardiomegaly,
}

impl PhantomClass {
    pub const ALL: [PhantomClass; 5] = [
        PhantomClass::Healthy,
        PhantomClass::Opacity,
        PhantomClass::Haze,
        PhantomClass::Pneumonia,
        PhantomClass::Cardiomegaly,
    ];

    /// Disease classes used for training, in stage order.
    pub const TRAINED_DISEASES: [PhantomClass; 3] = [
        PhantomClass::Opacity,
        PhantomClass::Haze,
        PhantomClass::Pneumonia,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhantomClass::Healthy => "healthy",
            PhantomClass::Opacity => "opacity",
            PhantomClass::Haze => "haze",
            PhantomClass::Pneumonia => "pneumonia",
            PhantomClass::Cardiomegaly => "cardiomegaly",
        }
    }

    pub fn is_held_out(self) -> bool {
        self == PhantomClass::Cardiomegaly
    }

    fn index(self) -> u64 {
        self as u64
    }

    /// Draws lesion parameters for this class; `None` for healthy.
    pub fn draw_kind(self, spec: &PhantomSpec, rng: &mut SeededRng) -> Option<LesionKind> {
        let l = &spec.lesions;
        match self {
            PhantomClass::Healthy => None,
            PhantomClass::Opacity => {
                let side = if rng.below(2) == 0 {
                    Side::Left
                } else {
                    Side::Right
                };
                Some(LesionKind::Opacity {
                    side,
                    radius: rng.uniform_range(l.opacity_radius[0], l.opacity_radius[1]),
                    intensity: rng.uniform_range(l.opacity_intensity[0], l.opacity_intensity[1]),
                })
            }
            PhantomClass::Haze => Some(LesionKind::DiffuseHaze {
                severity: rng.uniform_range(l.haze_severity[0], l.haze_severity[1]),
            }),
            PhantomClass::Pneumonia => Some(LesionKind::FocalCluster {
                count: l.cluster_count[0] + rng.below(l.cluster_count[1] - l.cluster_count[0] + 1),
                radius: rng.uniform_range(l.cluster_radius[0], l.cluster_radius[1]),
            }),
            PhantomClass::Cardiomegaly => Some(LesionKind::EnlargedCore {
                scale: rng.uniform_range(l.core_scale[0], l.core_scale[1]),
            }),
        }
    }
}

impl fmt::Display for PhantomClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhantomClass {
    type Err = VadeError;
    fn from_str(s: &str) -> Result<Self> {
        PhantomClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| VadeError::InvalidParam(format!("unknown class {s:?}")))
    }
}

/// Prompt describing a lesion, from the closed grammar of the text encoder.
pub fn label_for(kind: Option<&LesionKind>, spec: &PhantomSpec) -> String {
    let l = &spec.lesions;
    let mid = |r: [f64; 2]| 0.5 * (r[0] + r[1]);
    match kind {
        None => "normal chest scan".into(),
        Some(LesionKind::Opacity { side, radius, .. }) => {
            let size = if *radius >= mid(l.opacity_radius) {
                "large"
            } else {
                "small"
            };
            format!("{size} lung opacity on the {side}")
        }
        Some(LesionKind::DiffuseHaze { severity }) => {
            let sev = if *severity >= mid(l.haze_severity) {
                "severe"
            } else {
                "mild"
            };
            format!("{sev} lung haze")
        }
        Some(LesionKind::FocalCluster { .. }) => "pneumonia chest scan".into(),
        Some(LesionKind::EnlargedCore { .. }) => "cardiomegaly chest scan".into(),
    }
}

/// Jittered geometry and texture of one seed.
#[derive(Clone, Debug)]
pub struct Anatomy {
    pub size: usize,
    pub body: Ellipse,
    pub left_lung: Ellipse,
    pub right_lung: Ellipse,
    pub core: Ellipse,
    waves: Vec<[f64; 4]>,
    texture_amplitude: f64,
}

impl Anatomy {
    pub fn new(spec: &PhantomSpec, seed: u64) -> Self {
        let mut rng = SeededRng::with_stream(seed, ANATOMY_STREAM);
        let j = spec.jitter;
        let dx = rng.uniform_range(-j.center_px, j.center_px);
        let dy = rng.uniform_range(-j.center_px, j.center_px);
        let mut jit = |e: &Ellipse| Ellipse {
            cx: e.cx + dx,
            cy: e.cy + dy,
            ax: e.ax * (1.0 + rng.uniform_range(-j.axis_frac, j.axis_frac)),
            ay: e.ay * (1.0 + rng.uniform_range(-j.axis_frac, j.axis_frac)),
            intensity: e.intensity,
        };
        let body = jit(&spec.body);
        let left_lung = jit(&spec.left_lung);
        let right_lung = jit(&spec.right_lung);
        let core = jit(&spec.core);
        // Four random plane waves with periods of 6 to 20 px.
        let waves = (0..4)
            .map(|_| {
                let period = rng.uniform_range(6.0, 20.0);
                let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
                let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
                let k = std::f64::consts::TAU / period;
                [k * theta.cos(), k * theta.sin(), phase, 0.0]
            })
            .collect();
        Anatomy {
            size: spec.image_size,
            body,
            left_lung,
            right_lung,
            core,
            waves,
            texture_amplitude: spec.texture_amplitude,
        }
    }

    fn lung(&self, side: Side) -> &Ellipse {
        match side {
            Side::Left => &self.left_lung,
            Side::Right => &self.right_lung,
        }
    }

    pub fn in_lung(&self, side: Side, x: f64, y: f64) -> bool {
        self.lung(side).contains(x, y) && !self.core.contains(x, y)
    }

    fn in_any_lung(&self, x: f64, y: f64) -> bool {
        self.in_lung(Side::Left, x, y) || self.in_lung(Side::Right, x, y)
    }

    fn texture(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|w| (w[0] * x + w[1] * y + w[2]).cos())
            .sum();
        self.texture_amplitude * s / self.waves.len() as f64
    }

    pub fn render(&self) -> Image {
        Image::from_fn(self.size, self.size, |xi, yi| {
            let (x, y) = (xi as f64, yi as f64);
            if !self.body.contains(x, y) {
                return 0.0;
            }
            let base = if self.core.contains(x, y) {
                self.core.intensity
            } else if self.left_lung.contains(x, y) {
                self.left_lung.intensity
            } else if self.right_lung.contains(x, y) {
                self.right_lung.intensity
            } else {
                self.body.intensity
            };
            (base + self.texture(x, y)) as f32
        })
    }

    fn mask(&self, f: impl Fn(f64, f64) -> bool) -> Image {
        Image::from_fn(self.size, self.size, |x, y| {
            if f(x as f64, y as f64) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn lung_mask(&self) -> Image {
        self.mask(|x, y| self.in_any_lung(x, y))
    }

    pub fn side_mask(&self, side: Side) -> Image {
        self.mask(|x, y| self.in_lung(side, x, y))
    }

    /// The mediastinal region a maximally enlarged core can occupy.
    pub fn central_mask(&self, spec: &PhantomSpec) -> Image {
        let grown = self.core.scaled(spec.lesions.core_scale[1]);
        self.mask(|x, y| grown.contains(x, y) && self.body.contains(x, y))
    }

    /// Samples a disc centre such that the whole disc lies in the lung.
    fn place_disc(&self, side: Side, radius: f64, rng: &mut SeededRng) -> Result<(f64, f64)> {
        let lung = self.lung(side);
        if radius >= lung.ax.min(lung.ay) {
            return Err(VadeError::Geometry(format!(
                "radius {radius:.2} exceeds {side} lung"
            )));
        }
        for _ in 0..200 {
            let cx = rng.uniform_range(lung.cx - lung.ax, lung.cx + lung.ax);
            let cy = rng.uniform_range(lung.cy - lung.ay, lung.cy + lung.ay);
            let fits = (0..32).all(|i| {
                let th = i as f64 / 32.0 * std::f64::consts::TAU;
                let r = radius + 0.5;
                self.in_lung(side, cx + r * th.cos(), cy + r * th.sin())
            }) && self.in_lung(side, cx, cy);
            if fits {
                return Ok((cx, cy));
            }
        }
        Err(VadeError::Geometry(format!(
            "no room for a radius {radius:.2} lesion in the {side} lung"
        )))
    }
}

fn ramp(depth: f64, edge: f64) -> f64 {
    (depth / edge).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub lesion_mask: Image,
    pub lung_mask: Image,
    pub central_mask: Image,
    pub label_text: String,
    pub class: PhantomClass,
    pub kind: Option<LesionKind>,
    pub seed: u64,
}

/// Additive lesion field for `kind` on `anatomy`.
fn lesion_field(
    spec: &PhantomSpec,
    anatomy: &Anatomy,
    healthy: &Image,
    kind: &LesionKind,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let n = spec.image_size;
    let edge = spec.lesions.edge_px;
    let mut field = vec![0.0f64; n * n];
    let disc = |field: &mut [f64], cx: f64, cy: f64, r: f64, amp: f64, side: Side| {
        for yi in 0..n {
            for xi in 0..n {
                let (x, y) = (xi as f64, yi as f64);
                let d = r - ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                if d > 0.0 && anatomy.in_lung(side, x, y) {
                    let v = amp * ramp(d, edge);
                    field[yi * n + xi] = field[yi * n + xi].max(v);
                }
            }
        }
    };
    match *kind {
        LesionKind::Opacity {
            side,
            radius,
            intensity,
        } => {
            let (cx, cy) = anatomy.place_disc(side, radius, rng)?;
            disc(&mut field, cx, cy, radius, intensity, side);
        }
        LesionKind::FocalCluster { count, radius } => {
            for _ in 0..count {
                let side = if rng.below(2) == 0 {
                    Side::Left
                } else {
                    Side::Right
                };
                let (cx, cy) = anatomy.place_disc(side, radius, rng)?;
                disc(
                    &mut field,
                    cx,
                    cy,
                    radius,
                    spec.lesions.cluster_intensity,
                    side,
                );
            }
        }
        LesionKind::DiffuseHaze { severity } => {
            let (fx, fy) = (rng.uniform_range(0.1, 0.25), rng.uniform_range(0.1, 0.25));
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
            for yi in 0..n {
                for xi in 0..n {
                    let (x, y) = (xi as f64, yi as f64);
                    for side in [Side::Left, Side::Right] {
                        if anatomy.in_lung(side, x, y) {
                            let core = &anatomy.core;
                            let depth = anatomy
                                .lung(side)
                                .depth(x, y)
                                .min((core.rho(x, y) - 1.0) * core.ax.min(core.ay));
                            let modulation = 0.8 + 0.2 * (fx * x + fy * y + phase).sin();
                            field[yi * n + xi] = severity * modulation * ramp(depth + 0.5, edge);
                        }
                    }
                }
            }
        }
        LesionKind::EnlargedCore { scale } => {
            let grown = anatomy.core.scaled(scale);
            for yi in 0..n {
                for xi in 0..n {
                    let (x, y) = (xi as f64, yi as f64);
                    if grown.contains(x, y)
                        && !anatomy.core.contains(x, y)
                        && anatomy.body.contains(x, y)
                    {
                        let target = anatomy.core.intensity + anatomy.texture(x, y);
                        let w = ramp(grown.depth(x, y) + 0.5, edge);
                        field[yi * n + xi] = (target - healthy.get(xi, yi) as f64) * w;
                    }
                }
            }
        }
    }
    for v in &mut field {
        if v.abs() < FIELD_FLOOR {
            *v = 0.0;
        }
    }
    Ok(field)
}

/// Renders one sample. `kind = None` is the healthy render.
pub fn generate_sample(spec: &PhantomSpec, kind: Option<&LesionKind>, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let anatomy = Anatomy::new(spec, seed);
    let healthy = anatomy.render();
    let n = spec.image_size;
    let class = match kind {
        None => PhantomClass::Healthy,
        Some(LesionKind::Opacity { .. }) => PhantomClass::Opacity,
        Some(LesionKind::DiffuseHaze { .. }) => PhantomClass::Haze,
        Some(LesionKind::FocalCluster { .. }) => PhantomClass::Pneumonia,
        Some(LesionKind::EnlargedCore { .. }) => PhantomClass::Cardiomegaly,
    };
    let (image, lesion_mask) = match kind {
        None => (healthy, Image::zeros(n, n)),
        Some(k) => {
            let mut rng = SeededRng::with_stream(seed, LESION_STREAM + 1);
            let field = lesion_field(spec, &anatomy, &healthy, k, &mut rng)?;
            let mut img = healthy.clone();
            let mut mask = Image::zeros(n, n);
            for (i, &f) in field.iter().enumerate() {
                if f != 0.0 {
                    img.pixels_mut()[i] = (healthy.pixels()[i] as f64 + f) as f32;
                    mask.pixels_mut()[i] = 1.0;
                }
            }
            let area = mask.pixels().iter().filter(|&&v| v > 0.0).count();
            let [lo, hi] = spec.lesions.area_px;
            if area < lo || area > hi {
                return Err(VadeError::Geometry(format!(
                    "lesion area {area} px outside [{lo}, {hi}]"
                )));
            }
            (img, mask)
        }
    };
    Ok(Sample {
        image,
        lesion_mask,
        lung_mask: anatomy.lung_mask(),
        central_mask: anatomy.central_mask(spec),
        label_text: label_for(kind, spec),
        class,
        kind: kind.cloned(),
        seed,
    })
}

/// Draws lesion parameters for `class` from the seed's lesion stream and
/// renders the sample.
pub fn generate_class_sample(spec: &PhantomSpec, class: PhantomClass, seed: u64) -> Result<Sample> {
    let mut rng = SeededRng::with_stream(seed, LESION_STREAM);
    let kind = class.draw_kind(spec, &mut rng);
    generate_sample(spec, kind.as_ref(), seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Deterministic per-class sample seeds for a dataset seed.
pub fn sample_seeds(dataset_seed: u64, class: PhantomClass, count: usize) -> Vec<u64> {
    let mut rng = SeededRng::with_stream(dataset_seed, 100 + class.index());
    (0..count).map(|_| rng.next_u64() >> 16).collect()
}

/// In-memory samples for a class mix, in class order.
pub fn generate_samples(
    spec: &PhantomSpec,
    class_mix: &BTreeMap<PhantomClass, usize>,
    seed: u64,
    split: Split,
) -> Result<Vec<Sample>> {
    check_policy(
        class_mix.keys().copied().filter(|c| class_mix[c] > 0),
        split,
    )?;
    let mut out = Vec::new();
    for (&class, &count) in class_mix {
        for s in sample_seeds(seed, class, count) {
            out.push(generate_class_sample(spec, class, s)?);
        }
    }
    Ok(out)
}

fn check_policy(mut classes: impl Iterator<Item = PhantomClass>, split: Split) -> Result<()> {
    if split == Split::Train {
        if let Some(c) = classes.find(|c| c.is_held_out()) {
            return Err(VadeError::Policy(format!(
                "class {c} is held out of training data"
            )));
        }
    }
    Ok(())
}

/// Default desk mix: 400 healthy and 150 per trained disease.
pub fn default_class_mix() -> BTreeMap<PhantomClass, usize> {
    let mut m = BTreeMap::new();
    m.insert(PhantomClass::Healthy, 400);
    for c in PhantomClass::TRAINED_DISEASES {
        m.insert(c, 150);
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub mask_file: String,
    pub lung_file: String,
    pub label_text: String,
    pub class: PhantomClass,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: Split,
    pub spec: PhantomSpec,
    pub entries: Vec<ManifestEntry>,
    pub class_counts: BTreeMap<PhantomClass, usize>,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// An image loaded back from a manifest.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: String,
    pub class: PhantomClass,
    pub label_text: String,
    pub seed: u64,
    pub image: Image,
    pub lesion_mask: Image,
    pub lung_mask: Image,
}

impl Sample {
    pub fn labeled(&self) -> LabeledImage {
        LabeledImage {
            id: format!("{}-{}", self.class.name(), self.seed),
            class: self.class,
            label_text: self.label_text.clone(),
            seed: self.seed,
            image: self.image.clone(),
            lesion_mask: self.lesion_mask.clone(),
            lung_mask: self.lung_mask.clone(),
        }
    }
}

/// Writes images, masks and `manifest.json` under `out_dir`.
pub fn generate_dataset(
    spec: &PhantomSpec,
    class_mix: &BTreeMap<PhantomClass, usize>,
    out_dir: &Path,
    seed: u64,
    split: Split,
) -> Result<DatasetManifest> {
    let samples = generate_samples(spec, class_mix, seed, split)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let dir = out_dir.join(s.class.name());
        std::fs::create_dir_all(&dir).map_err(|e| VadeError::io(&dir, e))?;
        let rel = |suffix: &str| format!("{}/{}{}", s.class.name(), s.seed, suffix);
        let entry = ManifestEntry {
            file: rel(".png"),
            mask_file: rel(".mask.png"),
            lung_file: rel(".lung.png"),
            label_text: s.label_text.clone(),
            class: s.class,
            seed: s.seed,
        };
        write_image(out_dir.join(&entry.file), &s.image, BitDepth::Sixteen)?;
        write_image(
            out_dir.join(&entry.mask_file),
            &s.lesion_mask,
            BitDepth::Eight,
        )?;
        write_image(
            out_dir.join(&entry.lung_file),
            &s.lung_mask,
            BitDepth::Eight,
        )?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        split,
        spec: spec.clone(),
        class_counts: class_mix
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(&c, &n)| (c, n))
            .collect(),
        entries,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| VadeError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| VadeError::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex_string(&Sha256::digest(&json))
    }

    /// Checks counts, file presence and the held-out policy.
    pub fn lint(&self, root: &Path) -> Result<()> {
        let mut counts: BTreeMap<PhantomClass, usize> = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.class).or_default() += 1;
            for f in [&e.file, &e.mask_file, &e.lung_file] {
                let p = root.join(f);
                if !p.is_file() {
                    return Err(VadeError::io(
                        p,
                        std::io::Error::from(std::io::ErrorKind::NotFound),
                    ));
                }
            }
        }
        if counts != self.class_counts {
            return Err(VadeError::InvalidParam(format!(
                "class_counts {:?} do not match entries {:?}",
                self.class_counts, counts
            )));
        }
        check_policy(self.entries.iter().map(|e| e.class), self.split)
    }

    /// Loads every entry relative to `root`.
    pub fn load(&self, root: &Path) -> Result<Vec<LabeledImage>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(LabeledImage {
                    id: entry_id(e),
                    class: e.class,
                    label_text: e.label_text.clone(),
                    seed: e.seed,
                    image: read_image(root.join(&e.file))?,
                    lesion_mask: read_image(root.join(&e.mask_file))?,
                    lung_mask: read_image(root.join(&e.lung_file))?,
                })
            })
            .collect()
    }

    pub fn classes(&self) -> Vec<PhantomClass> {
        self.class_counts.keys().copied().collect()
    }
}

/// Stable identifier of a manifest entry, e.g. `opacity-12345`.
pub fn entry_id(e: &ManifestEntry) -> String {
    format!("{}-{}", e.class.name(), e.seed)
}

/// Directory holding a manifest file, or the path itself for directories.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}
