use serde::{Deserialize, Serialize};

use super::schedule::{
    cfg_combine, forward_marginal, make_schedule, NoiseSchedule, ScheduleParams,
};
use super::unet::{UNet, UNetConfig};
use crate::codec::Codec;
use crate::error::{Result, VadeError};
use crate::nn::{ParamSet, Tape};
use crate::tensor::{Real, SeededRng, Tensor};
use crate::text::{TextConfig, TextEncoder, Vocab, NULL_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub schedule: ScheduleParams,
    pub unet: UNetConfig,
    pub text: TextConfig,
    /// Nominal data spread used to normalize the denoiser input.
    pub data_std: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            schedule: ScheduleParams::default(),
            unet: UNetConfig::default(),
            text: TextConfig::default(),
            data_std: 0.5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// A configuration with fewer than 500 parameters, for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            schedule: ScheduleParams::ve(20, 0.01, 1.0),
            unet: UNetConfig {
                in_channels: 1,
                control_channels: 1,
                widths: vec![2, 2],
                time_dim: 2,
                cond_dim: 2,
                emb_dim: 1,
                groups: 1,
            },
            text: TextConfig {
                embed_dim: 1,
                cond_dim: 2,
            },
            data_std: 0.5,
            init_seed: 0,
        }
    }
}

/// One training example in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    /// Clean sample, already encoded by the codec.
    pub x0: Tensor<f32>,
    pub ids: Vec<usize>,
    pub control: Option<Tensor<f32>>,
}

/// The conditional denoiser with its prompt encoder, schedule and codec.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet<f32>,
    pub text: TextEncoder,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    pub codec: Codec,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, codec: Codec) -> Result<Self> {
        let [c, h, w] = codec.config.latent_shape();
        if config.unet.in_channels != c {
            return Err(VadeError::InvalidParam(format!(
                "denoiser has {} input channels but the codec latent has {c}",
                config.unet.in_channels
            )));
        }
        let m = config.unet.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(VadeError::InvalidParam(format!(
                "latent {h}x{w} not divisible by {m}"
            )));
        }
        if config.text.cond_dim != config.unet.cond_dim {
            return Err(VadeError::InvalidParam(
                "text cond_dim must equal unet cond_dim".into(),
            ));
        }
        let schedule = make_schedule(config.schedule)?;
        let mut rng = SeededRng::with_stream(config.init_seed, 11);
        let mut params = ParamSet::default();
        let text = TextEncoder::new(&mut params, vocab.len(), config.text, &mut rng);
        let unet = UNet::new(&mut params, config.unet.clone(), &mut rng)?;
        Ok(Model {
            config,
            vocab,
            params,
            text,
            unet,
            schedule,
            codec,
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.codec.config.latent_shape()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// `1 / sqrt(alpha^2 data_std^2 + sigma^2)`.
    pub fn input_scale(&self, t: f64) -> f64 {
        let (a, s) = self.schedule.alpha_sigma(t);
        1.0 / (a * a * self.config.data_std.powi(2) + s * s).sqrt()
    }

    pub fn tokenize(&self, prompt: &str) -> Vec<usize> {
        self.vocab.tokenize(prompt)
    }

    pub fn condition(&self, prompt: &str) -> Result<Tensor<f32>> {
        self.condition_ids(&self.tokenize(prompt))
    }

    pub fn condition_ids(&self, ids: &[usize]) -> Result<Tensor<f32>> {
        let v = self.text.embed_value(&self.params, ids)?;
        Tensor::new(vec![v.len()], v)
    }

    pub fn null_condition(&self) -> Tensor<f32> {
        self.condition_ids(&[NULL_ID])
            .expect("null token is in range")
    }

    /// Noise prediction `eps_theta(x_t, t, cond, control)`.
    pub fn denoise_eps(
        &self,
        x_t: &Tensor<f32>,
        t: f64,
        cond: &Tensor<f32>,
        control: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        let mut tape = Tape::inference(&self.params);
        let x = tape.input(x_t.clone());
        let c = tape.input(cond.clone());
        let ctrl = control.map(|c| tape.input(c.clone()));
        let out = self
            .unet
            .forward(&mut tape, x, t, c, ctrl, self.input_scale(t))?;
        Ok(tape.value(out).clone())
    }

    /// Guided prediction; skips the redundant pass when `g` is 0 or 1.
    pub fn guided_eps(
        &self,
        x_t: &Tensor<f32>,
        t: f64,
        cond: &Tensor<f32>,
        null: &Tensor<f32>,
        g: f64,
        control: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        if g == 0.0 {
            return self.denoise_eps(x_t, t, null, control);
        }
        if g == 1.0 {
            return self.denoise_eps(x_t, t, cond, control);
        }
        let u = self.denoise_eps(x_t, t, null, control)?;
        let c = self.denoise_eps(x_t, t, cond, control)?;
        cfg_combine(&u, &c, g)
    }

    /// Per-pixel `||z - eps_theta(x_t, t, cond(ids), control)||^2` for one
    /// example at discrete step `i`, evaluated with `params` (which may be a
    /// cast copy of the model's). Gradients, scaled by `weight`, accumulate
    /// into `grads` when given.
    #[allow(clippy::too_many_arguments)]
    pub fn example_loss<T: Real>(
        &self,
        params: &ParamSet<T>,
        x0: &Tensor<T>,
        i: usize,
        z: &Tensor<T>,
        ids: &[usize],
        control: Option<&Tensor<T>>,
        grads: Option<(&mut ParamSet<T>, f64)>,
    ) -> Result<f64> {
        let t = self.schedule.t_of(i);
        let xt = forward_marginal(x0, i, z, &self.schedule)?;
        let mut tape = Tape::new(params);
        let x = tape.input(xt);
        let cond = self.text.embed(&mut tape, ids)?;
        let ctrl = control.map(|c| tape.input(c.clone()));
        let pred = self
            .unet
            .forward(&mut tape, x, t, cond, ctrl, self.input_scale(t))?;
        let loss = tape.mse(pred, z.clone())?;
        let value = tape.value(loss).data()[0].f64();
        if !value.is_finite() {
            return Err(VadeError::NonFinite(format!(
                "loss at step {i}, prompt ids {ids:?}"
            )));
        }
        if let Some((g, w)) = grads {
            tape.backward(loss, Tensor::filled(&[1], T::of(w)), g)?;
        }
        Ok(value)
    }

    /// Mean loss over `batch` with `t ~ U{1..T}`, fresh noise and
    /// conditioning dropout; gradients of `weight * loss` go into `grads`.
    pub fn loss_eps(
        &self,
        batch: &[TrainItem],
        rng: &mut SeededRng,
        cond_dropout: f64,
        grads: &mut ParamSet<f32>,
        weight: f64,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(VadeError::InvalidParam("empty batch".into()));
        }
        let w = weight / batch.len() as f64;
        let mut total = 0.0;
        for item in batch {
            let i = 1 + rng.below(self.schedule.steps());
            let z = rng.gaussian_draw::<f32>(item.x0.shape())?;
            let null = [NULL_ID];
            let ids: &[usize] = if rng.uniform() < cond_dropout {
                &null
            } else {
                &item.ids
            };
            total += self.example_loss(
                &self.params,
                &item.x0,
                i,
                &z,
                ids,
                item.control.as_ref(),
                Some((grads, w)),
            )?;
        }
        Ok(total / batch.len() as f64)
    }
}
