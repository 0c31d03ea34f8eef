use serde::{Deserialize, Serialize};

use crate::error::{Result, VadeError};
use crate::nn::{init, ParamId, ParamSet, Tape, Var};
use crate::tensor::{Real, SeededRng, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Extra control-image channels; 0 disables the control path.
    pub control_channels: usize,
    /// Channel width per resolution level; each extra level halves H and W.
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub emb_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            control_channels: 0,
            widths: vec![16, 32, 64],
            time_dim: 32,
            cond_dim: 32,
            emb_dim: 64,
            groups: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty()
            || self.in_channels == 0
            || self.time_dim % 2 != 0
            || self.time_dim == 0
        {
            return Err(VadeError::InvalidParam(
                "unet needs widths, input channels and an even time_dim".into(),
            ));
        }
        if let Some(w) = self
            .widths
            .iter()
            .find(|&&w| self.groups == 0 || w % self.groups != 0)
        {
            return Err(VadeError::InvalidParam(format!(
                "width {w} not divisible by {} groups",
                self.groups
            )));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResBlock {
    out: usize,
    norm1: Norm,
    conv1: Conv,
    film: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct UpLevel {
    conv: Conv,
    block: ResBlock,
}

/// Handles to the denoiser parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNet {
    pub config: UNetConfig,
    time1: Linear,
    time2: Linear,
    cond: Linear,
    conv_in: Conv,
    control: Option<Conv>,
    down_blocks: Vec<ResBlock>,
    downsample: Vec<Conv>,
    up: Vec<UpLevel>,
    norm_out: Norm,
    conv_out: Conv,
}

struct Builder<'a, T: Real> {
    params: &'a mut ParamSet<T>,
    rng: &'a mut SeededRng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, zero: bool) -> Conv {
        let shape = [c_out, c_in, k, k];
        let w = if zero {
            Tensor::zeros(&shape)
        } else {
            init::scaled_normal(self.rng, &shape, c_in * k * k, 1.0)
        };
        Conv {
            w: self.params.add(format!("{name}.w"), w),
            b: self
                .params
                .add(format!("{name}.b"), Tensor::zeros(&[c_out])),
        }
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let w = init::scaled_normal(self.rng, &[d_out, d_in], d_in, 1.0);
        Linear {
            w: self.params.add(format!("{name}.w"), w),
            b: self
                .params
                .add(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            g: self
                .params
                .add(format!("{name}.g"), Tensor::filled(&[c], T::one())),
            b: self.params.add(format!("{name}.b"), Tensor::zeros(&[c])),
        }
    }

    fn block(&mut self, name: &str, c_in: usize, c_out: usize, emb: usize) -> ResBlock {
        ResBlock {
            out: c_out,
            norm1: self.norm(&format!("{name}.norm1"), c_in),
            conv1: self.conv(&format!("{name}.conv1"), c_in, c_out, 3, false),
            film: self.linear(&format!("{name}.film"), emb, 2 * c_out),
            norm2: self.norm(&format!("{name}.norm2"), c_out),
            conv2: self.conv(&format!("{name}.conv2"), c_out, c_out, 3, false),
            skip: (c_in != c_out)
                .then(|| self.conv(&format!("{name}.skip"), c_in, c_out, 1, false)),
        }
    }
}

/// Sinusoidal embedding of `t` in `[0, 1]`, on a 1000-step scale.
pub fn time_embedding<T: Real>(t: f64, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        out[i] = T::of(arg.sin());
        out[half + i] = T::of(arg.cos());
    }
    Tensor::new(vec![dim], out).expect("shape matches")
}

impl UNet {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        config: UNetConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { params, rng };
        let c = &config;
        let e = c.emb_dim;
        let w0 = c.widths[0];
        let time1 = b.linear("unet.time1", c.time_dim, e);
        let time2 = b.linear("unet.time2", e, e);
        let cond = b.linear("unet.cond", c.cond_dim, e);
        let conv_in = b.conv("unet.conv_in", c.in_channels, w0, 3, false);
        let control = (c.control_channels > 0)
            .then(|| b.conv("unet.control", c.control_channels, w0, 3, true));
        let mut down_blocks = Vec::new();
        let mut downsample = Vec::new();
        for (l, &w) in c.widths.iter().enumerate() {
            if l > 0 {
                downsample.push(b.conv(&format!("unet.down{l}"), c.widths[l - 1], w, 3, false));
            }
            down_blocks.push(b.block(&format!("unet.enc{l}"), w, w, e));
        }
        let mut up = Vec::new();
        for l in (0..c.widths.len() - 1).rev() {
            let w = c.widths[l];
            up.push(UpLevel {
                conv: b.conv(&format!("unet.up{l}"), c.widths[l + 1], w, 3, false),
                block: b.block(&format!("unet.dec{l}"), 2 * w, w, e),
            });
        }
        let norm_out = b.norm("unet.norm_out", w0);
        let conv_out = b.conv("unet.conv_out", w0, c.in_channels, 3, true);
        Ok(UNet {
            config,
            time1,
            time2,
            cond,
            conv_in,
            control,
            down_blocks,
            downsample,
            up,
            norm_out,
            conv_out,
        })
    }

    fn block<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        blk: &ResBlock,
        x: Var,
        emb: Var,
    ) -> Result<Var> {
        let g = self.config.groups;
        let h = tape.group_norm(x, blk.norm1.g, blk.norm1.b, g)?;
        let h = tape.silu(h);
        let h = tape.conv(h, blk.conv1.w, blk.conv1.b, 1)?;
        let mods = tape.linear(emb, blk.film.w, blk.film.b)?;
        let scale = tape.slice(mods, 0, blk.out)?;
        let shift = tape.slice(mods, blk.out, blk.out)?;
        let h = tape.film(h, scale, shift)?;
        let h = tape.group_norm(h, blk.norm2.g, blk.norm2.b, g)?;
        let h = tape.silu(h);
        let h = tape.conv(h, blk.conv2.w, blk.conv2.b, 1)?;
        let skip = match &blk.skip {
            Some(s) => tape.conv(x, s.w, s.b, 1)?,
            None => x,
        };
        tape.add(h, skip)
    }

    /// Noise prediction for `x` (`[c, h, w]`) at time `t` under condition
    /// vector `cond`. `input_scale` multiplies `x` before the first layer.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        t: f64,
        cond: Var,
        control: Option<Var>,
        input_scale: f64,
    ) -> Result<Var> {
        let c = &self.config;
        let shape = tape.value(x).shape().to_vec();
        let m = c.size_multiple();
        if shape.len() != 3 || shape[0] != c.in_channels || shape[1] % m != 0 || shape[2] % m != 0 {
            return Err(VadeError::Shape(format!(
                "denoiser expects [{}, h, w] with h, w divisible by {m}, got {shape:?}",
                c.in_channels
            )));
        }
        let temb = tape.input(time_embedding(t, c.time_dim));
        let temb = tape.linear(temb, self.time1.w, self.time1.b)?;
        let temb = tape.silu(temb);
        let temb = tape.linear(temb, self.time2.w, self.time2.b)?;
        let cemb = tape.linear(cond, self.cond.w, self.cond.b)?;
        let emb = tape.add(temb, cemb)?;
        let emb = tape.silu(emb);

        let xs = tape.scale(x, T::of(input_scale));
        let mut h = tape.conv(xs, self.conv_in.w, self.conv_in.b, 1)?;
        match (&self.control, control) {
            (Some(cc), Some(cv)) => {
                let hc = tape.conv(cv, cc.w, cc.b, 1)?;
                h = tape.add(h, hc)?;
            }
            (None, Some(_)) => {
                return Err(VadeError::InvalidParam("model has no control input".into()))
            }
            _ => {}
        }
        let mut skips = Vec::new();
        for (l, blk) in self.down_blocks.iter().enumerate() {
            if l > 0 {
                let d = &self.downsample[l - 1];
                h = tape.conv(h, d.w, d.b, 2)?;
            }
            h = self.block(tape, blk, h, emb)?;
            skips.push(h);
        }
        skips.pop();
        for lvl in &self.up {
            let u = tape.upsample(h)?;
            let u = tape.conv(u, lvl.conv.w, lvl.conv.b, 1)?;
            let skip = skips.pop().expect("one skip per up level");
            let cat = tape.concat(u, skip)?;
            h = self.block(tape, &lvl.block, cat, emb)?;
        }
        let h = tape.group_norm(h, self.norm_out.g, self.norm_out.b, c.groups)?;
        let h = tape.silu(h);
        tape.conv(h, self.conv_out.w, self.conv_out.b, 1)
    }

    /// Parameter ids that belong to the control path.
    pub fn control_params(&self) -> Vec<ParamId> {
        self.control.iter().flat_map(|c| [c.w, c.b]).collect()
    }
}
