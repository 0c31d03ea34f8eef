//! Optional convolutional autoencoder for latent-mode diffusion and FID
//! features. The identity codec passes pixels through unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VadeError};
use crate::image::Image;
use crate::nn::{clip_global_norm, init, Adam, DivergenceMonitor, ParamId, ParamSet, Tape, Var};
use crate::tensor::{Real, SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    Identity,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub image_size: usize,
    pub latent_channels: usize,
    pub hidden: [usize; 2],
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            mode: CodecMode::Identity,
            image_size: 64,
            latent_channels: 4,
            hidden: [16, 32],
        }
    }
}

impl CodecConfig {
    pub fn learned() -> Self {
        CodecConfig {
            mode: CodecMode::Learned,
            ..Default::default()
        }
    }

    /// `[c, h, w]` of the representation the diffusion model works in.
    pub fn latent_shape(&self) -> [usize; 3] {
        match self.mode {
            CodecMode::Identity => [1, self.image_size, self.image_size],
            CodecMode::Learned => [
                self.latent_channels,
                self.image_size / 4,
                self.image_size / 4,
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamSet<f32>,
    /// Multiplies raw encoder output so latents have roughly unit spread.
    pub latent_scale: f64,
    pub trained: bool,
    encoder: Vec<Conv>,
    decoder: Vec<Conv>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Fraction of examples replaced by random constant or ramp fields.
    pub smooth_fraction: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            steps: 2000,
            batch_size: 4,
            lr: 2e-3,
            grad_clip: 1.0,
            smooth_fraction: 0.1,
            seed: 0,
        }
    }
}

/// `[1, n, n]` to `[1, n/4, n/4]` by 4x4 block averaging.
fn block_mean4<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[2];
    let m = n / 4;
    let xd = x.data();
    let data = (0..m * m)
        .map(|k| {
            let (bx, by) = (k % m, k / m);
            let mut s = T::zero();
            for y in 4 * by..4 * by + 4 {
                for xx in 4 * bx..4 * bx + 4 {
                    s = s + xd[y * n + xx];
                }
            }
            s * T::of(1.0 / 16.0)
        })
        .collect();
    Tensor::new(vec![1, m, m], data).expect("block mean shape")
}

/// Channel 0 of `[c, m, m]` upsampled 4x with bilinear interpolation between
/// block centres, clamped at the border.
fn bilinear_up4<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let m = z.shape()[2];
    let n = 4 * m;
    let zd = z.data();
    let coord = |p: usize| {
        let c = ((p as f64 + 0.5) / 4.0 - 0.5).clamp(0.0, (m - 1) as f64);
        let i = (c.floor() as usize).min(m.saturating_sub(2));
        (i, c - i as f64)
    };
    let data = (0..n * n)
        .map(|k| {
            let ((i, fy), (j, fx)) = (coord(k / n), coord(k % n));
            let (i1, j1) = ((i + 1).min(m - 1), (j + 1).min(m - 1));
            let at = |r: usize, c: usize| zd[r * m + c].f64();
            let v = (1.0 - fy) * ((1.0 - fx) * at(i, j) + fx * at(i, j1))
                + fy * ((1.0 - fx) * at(i1, j) + fx * at(i1, j1));
            T::of(v)
        })
        .collect();
    Tensor::new(vec![1, n, n], data).expect("upsample shape")
}

/// A random constant or linear ramp in `[0, 1]`.
fn smooth_field(n: usize, rng: &mut SeededRng) -> Tensor<f32> {
    let base = rng.uniform();
    let (gx, gy) = if rng.below(2) == 0 {
        (0.0, 0.0)
    } else {
        (rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5))
    };
    let c = (n as f64 - 1.0) / 2.0;
    let data = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64 - c, (i / n) as f64 - c);
            (base + (gx * x + gy * y) / n as f64).clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::new(vec![1, n, n], data).expect("square field")
}

impl Codec {
    pub fn identity(image_size: usize) -> Self {
        Self::new(
            CodecConfig {
                image_size,
                ..Default::default()
            },
            0,
        )
        .expect("identity codec is always valid")
    }

    /// Fresh codec; learned mode starts untrained.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::default();
        let (mut encoder, mut decoder) = (Vec::new(), Vec::new());
        if config.mode == CodecMode::Learned {
            if config.latent_channels < 2 {
                return Err(VadeError::InvalidParam(
                    "learned codec needs at least 2 latent channels".into(),
                ));
            }
            if config.image_size % 4 != 0 {
                return Err(VadeError::InvalidParam(format!(
                    "codec image size {} not divisible by 4",
                    config.image_size
                )));
            }
            let mut rng = SeededRng::with_stream(seed, 7);
            let [h0, h1] = config.hidden;
            let lc = config.latent_channels;
            let mut conv =
                |params: &mut ParamSet<f32>, name: &str, ci: usize, co: usize, stride: usize| {
                    Conv {
                        w: params.add(
                            format!("{name}.w"),
                            init::scaled_normal(&mut rng, &[co, ci, 3, 3], ci * 9, 1.0),
                        ),
                        b: params.add(format!("{name}.b"), Tensor::zeros(&[co])),
                        stride,
                    }
                };
            encoder.push(conv(&mut params, "codec.enc0", 1, h0, 1));
            encoder.push(conv(&mut params, "codec.enc1", h0, h1, 2));
            encoder.push(conv(&mut params, "codec.enc2", h1, h1, 2));
            encoder.push(conv(&mut params, "codec.enc3", h1, lc - 1, 1));
            decoder.push(conv(&mut params, "codec.dec0", lc, h1, 1));
            decoder.push(conv(&mut params, "codec.dec1", h1, h1, 1));
            decoder.push(conv(&mut params, "codec.dec2", h1, h0, 1));
            decoder.push(conv(&mut params, "codec.dec3", h0, 1, 1));
        }
        Ok(Codec {
            config,
            params,
            latent_scale: 1.0,
            trained: false,
            encoder,
            decoder,
        })
    }

    pub fn mode(&self) -> CodecMode {
        self.config.mode
    }

    /// Channel 0 of the latent is the fixed 4x4 block mean of the image; the
    /// learned channels follow.
    fn encode_var<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let pooled = tape.input(block_mean4(tape.value(x)));
        let mut h = x;
        for (i, c) in self.encoder.iter().enumerate() {
            h = tape.conv(h, c.w, c.b, c.stride)?;
            if i + 1 < self.encoder.len() {
                h = tape.silu(h);
            }
        }
        tape.concat(pooled, h)
    }

    /// The learned decoder predicts a residual over the bilinear upsampling of
    /// latent channel 0.
    fn decode_var<T: Real>(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let base = tape.input(bilinear_up4(tape.value(z)));
        let mut h = z;
        for (i, c) in self.decoder.iter().enumerate() {
            if i == 1 || i == 2 {
                h = tape.upsample(h)?;
            }
            h = tape.conv(h, c.w, c.b, c.stride)?;
            if i + 1 < self.decoder.len() {
                h = tape.silu(h);
            }
        }
        tape.add(h, base)
    }

    fn check_image(&self, x: &Tensor<f32>) -> Result<()> {
        let n = self.config.image_size;
        if x.shape() != [1, n, n] {
            return Err(VadeError::Shape(format!(
                "codec expects [1, {n}, {n}], got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn require_trained(&self) -> Result<()> {
        if self.mode() == CodecMode::Learned && !self.trained {
            return Err(VadeError::InvalidParam(
                "learned codec has not been trained".into(),
            ));
        }
        Ok(())
    }

    /// `[1, n, n]` image tensor to latent.
    pub fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_image(x)?;
        match self.mode() {
            CodecMode::Identity => Ok(x.clone()),
            CodecMode::Learned => {
                let mut tape = Tape::inference(&self.params);
                let xv = tape.input(x.clone());
                let z = self.encode_var(&mut tape, xv)?;
                let s = self.latent_scale as f32;
                Ok(tape.value(z).map(|v| v * s))
            }
        }
    }

    pub fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let shape = self.config.latent_shape();
        if z.shape() != shape {
            return Err(VadeError::Shape(format!(
                "codec latent must be {shape:?}, got {:?}",
                z.shape()
            )));
        }
        match self.mode() {
            CodecMode::Identity => Ok(z.clone()),
            CodecMode::Learned => {
                let mut tape = Tape::inference(&self.params);
                let inv = (1.0 / self.latent_scale) as f32;
                let zv = tape.input(z.map(|v| v * inv));
                let x = self.decode_var(&mut tape, zv)?;
                Ok(tape.value(x).clone())
            }
        }
    }

    pub fn round_trip(&self, img: &Image) -> Result<Image> {
        Image::from_tensor(&self.decode(&self.encode(&img.to_tensor())?)?)
    }

    /// 64-dim embedding: the latent average-pooled to 4x4 per channel.
    pub fn features(&self, img: &Image) -> Result<Vec<f64>> {
        self.require_trained()?;
        if self.mode() != CodecMode::Learned {
            return Err(VadeError::InvalidParam(
                "codec features need a learned codec".into(),
            ));
        }
        let z = self.encode(&img.to_tensor())?;
        let [c, h, w] = self.config.latent_shape();
        let (bh, bw) = (h / 4, w / 4);
        let mut out = Vec::with_capacity(c * 16);
        for ch in 0..c {
            for by in 0..4 {
                for bx in 0..4 {
                    let mut s = 0.0;
                    for y in by * bh..(by + 1) * bh {
                        for x in bx * bw..(bx + 1) * bw {
                            s += z.data()[(ch * h + y) * w + x] as f64;
                        }
                    }
                    out.push(s / (bh * bw) as f64);
                }
            }
        }
        Ok(out)
    }
}

/// Trains a learned codec on reconstruction MSE. Returns the codec and the
/// per-step loss trace.
pub fn train_codec(
    images: &[Image],
    config: CodecConfig,
    tc: &CodecTrainConfig,
) -> Result<(Codec, Vec<f32>)> {
    let mut codec = Codec::new(config, tc.seed)?;
    if codec.mode() == CodecMode::Identity {
        return Ok((codec, Vec::new()));
    }
    if images.is_empty() {
        return Err(VadeError::InvalidParam(
            "codec training needs images".into(),
        ));
    }
    let tensors: Vec<Tensor<f32>> = images.iter().map(|i| i.to_tensor()).collect();
    for t in &tensors {
        codec.check_image(t)?;
    }
    let mut rng = SeededRng::with_stream(tc.seed, 8);
    let mut opt = Adam::new(&codec.params, tc.lr);
    let mut monitor = DivergenceMonitor::default();
    let mut trace = Vec::with_capacity(tc.steps);
    let batch = tc.batch_size.max(1);
    for step in 0..tc.steps {
        let mut grads = codec.params.zeros_like();
        let mut total = 0.0f64;
        for _ in 0..batch {
            let field;
            let x = if rng.uniform() < tc.smooth_fraction {
                field = smooth_field(codec.config.image_size, &mut rng);
                &field
            } else {
                &tensors[rng.below(tensors.len())]
            };
            let mut tape = Tape::new(&codec.params);
            let xv = tape.input(x.clone());
            let z = codec.encode_var(&mut tape, xv)?;
            let y = codec.decode_var(&mut tape, z)?;
            let loss = tape.mse(y, x.clone())?;
            total += tape.value(loss).data()[0] as f64;
            tape.backward(loss, Tensor::filled(&[1], 1.0 / batch as f32), &mut grads)?;
        }
        let loss = total / batch as f64;
        monitor.observe(step, loss)?;
        trace.push(loss as f32);
        clip_global_norm(&mut grads, tc.grad_clip);
        // Cosine decay to zero.
        let progress = step as f64 / tc.steps as f64;
        opt.lr = tc.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.step(&mut codec.params, &grads);
    }
    // Latent spread over (a subset of) the training set.
    let mut sq = 0.0f64;
    let mut n = 0usize;
    codec.trained = true;
    for t in tensors.iter().take(64) {
        let z = codec.encode(t)?;
        sq += z.sq_norm();
        n += z.len();
    }
    let std = (sq / n as f64).sqrt();
    codec.latent_scale = if std > 0.0 { 1.0 / std } else { 1.0 };
    Ok((codec, trace))
}

/// Restores a trained codec from saved parts.
pub fn codec_from_parts(
    config: CodecConfig,
    params: ParamSet<f32>,
    latent_scale: f64,
    trained: bool,
) -> Result<Codec> {
    let mut c = Codec::new(config, 0)?;
    if c.params.names() != params.names()
        || c.params
            .tensors()
            .iter()
            .zip(params.tensors())
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(VadeError::Checkpoint(
            "codec parameters do not match the codec config".into(),
        ));
    }
    c.params = params;
    c.latent_scale = latent_scale;
    c.trained = trained;
    Ok(c)
}

#[derive(Serialize, Deserialize)]
struct CodecFile {
    config: CodecConfig,
    latent_scale: f64,
    trained: bool,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Codec {
    /// Standalone JSON encoding; `f32` values round-trip exactly.
    pub fn to_json(&self) -> Result<String> {
        let tensors = self
            .params
            .names()
            .iter()
            .zip(self.params.tensors())
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().to_vec()))
            .collect();
        let f = CodecFile {
            config: self.config.clone(),
            latent_scale: self.latent_scale,
            trained: self.trained,
            tensors,
        };
        Ok(serde_json::to_string(&f)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CodecFile = serde_json::from_str(s)?;
        let mut params = ParamSet::default();
        for (name, shape, data) in f.tensors {
            params.add(name, Tensor::new(shape, data)?);
        }
        codec_from_parts(f.config, params, f.latent_scale, f.trained)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| VadeError::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| VadeError::io(path, e))?;
        Self::from_json(&s)
    }
}
