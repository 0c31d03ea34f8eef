use serde::{Deserialize, Serialize};

use crate::error::{Result, VadeError};
use crate::tensor::{Real, Tensor};

/// Smallest VP noise level used when converting noise predictions to
/// scores, keeping `score = -eps / sigma` finite at t = 0.
pub const VP_SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Ve,
    Vp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Continuous-time rates; the discrete `[1e-4, 0.02]` betas times 1000.
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            kind: ScheduleKind::Ve,
            steps: 200,
            sigma_min: 2e-3,
            sigma_max: 0.5,
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl ScheduleParams {
    pub fn vp(steps: usize) -> Self {
        ScheduleParams {
            kind: ScheduleKind::Vp,
            steps,
            ..Default::default()
        }
    }

    pub fn ve(steps: usize, sigma_min: f64, sigma_max: f64) -> Self {
        ScheduleParams {
            kind: ScheduleKind::Ve,
            steps,
            sigma_min,
            sigma_max,
            ..Default::default()
        }
    }
}

/// Discretized `alpha(t_i)`, `sigma(t_i)` for `t_i = i / T`, plus the
/// closed forms for arbitrary `t` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub params: ScheduleParams,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn make_schedule(params: ScheduleParams) -> Result<NoiseSchedule> {
    if params.steps < 2 {
        return Err(VadeError::InvalidParam(format!(
            "schedule needs at least 2 steps, got {}",
            params.steps
        )));
    }
    match params.kind {
        ScheduleKind::Ve if !(params.sigma_min > 0.0 && params.sigma_min < params.sigma_max) => {
            return Err(VadeError::InvalidParam(
                "VE schedule needs 0 < sigma_min < sigma_max".into(),
            ));
        }
        ScheduleKind::Vp if !(params.beta_min > 0.0 && params.beta_min < params.beta_max) => {
            return Err(VadeError::InvalidParam(
                "VP schedule needs 0 < beta_min < beta_max".into(),
            ));
        }
        _ => {}
    }
    let mut s = NoiseSchedule {
        params,
        alpha: Vec::new(),
        sigma: Vec::new(),
    };
    for i in 0..=params.steps {
        let t = s.t_of(i);
        let (a, sg) = s.alpha_sigma(t);
        s.alpha.push(a);
        s.sigma.push(sg);
    }
    Ok(s)
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.params.kind
    }

    pub fn t_of(&self, i: usize) -> f64 {
        i as f64 / self.params.steps as f64
    }

    /// `(alpha(t), sigma(t))` from the closed form.
    pub fn alpha_sigma(&self, t: f64) -> (f64, f64) {
        let p = &self.params;
        match p.kind {
            ScheduleKind::Ve => (1.0, p.sigma_min * (p.sigma_max / p.sigma_min).powf(t)),
            ScheduleKind::Vp => {
                let integral = p.beta_min * t + 0.5 * (p.beta_max - p.beta_min) * t * t;
                ((-0.5 * integral).exp(), (-(-integral).exp_m1()).sqrt())
            }
        }
    }

    /// Instantaneous VP rate `β(t)`; 0 for VE.
    pub fn beta_at(&self, t: f64) -> f64 {
        let p = &self.params;
        match p.kind {
            ScheduleKind::Ve => 0.0,
            ScheduleKind::Vp => p.beta_min + t * (p.beta_max - p.beta_min),
        }
    }

    pub fn alpha_at(&self, t: f64) -> f64 {
        self.alpha_sigma(t).0
    }

    pub fn sigma_at(&self, t: f64) -> f64 {
        self.alpha_sigma(t).1
    }
}

/// `x(t) = alpha(t) x0 + sigma(t) z` at discrete step `i`.
pub fn forward_marginal<T: Real>(
    x0: &Tensor<T>,
    i: usize,
    z: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if i > sched.steps() {
        return Err(VadeError::InvalidParam(format!(
            "step {i} beyond schedule length {}",
            sched.steps()
        )));
    }
    forward_marginal_at(x0, sched.t_of(i), z, sched)
}

pub fn forward_marginal_at<T: Real>(
    x0: &Tensor<T>,
    t: f64,
    z: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (a, s) = sched.alpha_sigma(t);
    let (a, s) = (T::of(a), T::of(s));
    x0.zip_map(z, |x, n| a * x + s * n)
}

/// `score = -eps_hat / sigma(t)`, with sigma floored at [`VP_SIGMA_FLOOR`]
/// for VP schedules.
pub fn score_from_eps<T: Real>(
    eps_hat: &Tensor<T>,
    t: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let s = match sched.kind() {
        ScheduleKind::Vp => sched.sigma_at(t).max(VP_SIGMA_FLOOR),
        ScheduleKind::Ve => sched.sigma_at(t),
    };
    score_from_sigma(eps_hat, s)
}

pub fn score_from_sigma<T: Real>(eps_hat: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(VadeError::InvalidParam(format!(
            "sigma = {sigma}; score undefined"
        )));
    }
    let inv = T::of(-1.0 / sigma);
    Ok(eps_hat.map(|e| e * inv))
}

/// One reverse Euler–Maruyama step from `t + dt` down to `t`.
///
/// VE: `x(t) = x_next + |Δσ²| score + sqrt(|Δσ²|) z`. VP:
/// `x(t) = (α(t) / α(t + dt)) x_next + β dt score + sqrt(β dt) z` with `β`
/// taken at `t + dt`.
pub fn em_reverse_step<T: Real>(
    x_next: &Tensor<T>,
    t: f64,
    dt: f64,
    score: &Tensor<T>,
    z: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if dt <= 0.0 {
        return Err(VadeError::InvalidParam(format!(
            "reverse step needs dt > 0, got {dt}"
        )));
    }
    x_next.same_shape(score)?;
    x_next.same_shape(z)?;
    let (keep, var) = match sched.kind() {
        ScheduleKind::Ve => {
            let var = (sched.sigma_at(t + dt).powi(2) - sched.sigma_at(t).powi(2)).abs();
            (1.0, var)
        }
        ScheduleKind::Vp => (
            sched.alpha_at(t) / sched.alpha_at(t + dt),
            sched.beta_at(t + dt) * dt,
        ),
    };
    let (keep, drift, diffusion) = (T::of(keep), T::of(var), T::of(var.sqrt()));
    let data: Vec<T> = x_next
        .data()
        .iter()
        .zip(score.data())
        .zip(z.data())
        .map(|((&x, &s), &n)| keep * x + drift * s + diffusion * n)
        .collect();
    Tensor::new(x_next.shape().to_vec(), data)
}

/// Classifier-free guidance `eps_u + g (eps_c - eps_u)`.
pub fn cfg_combine<T: Real>(
    eps_uncond: &Tensor<T>,
    eps_cond: &Tensor<T>,
    g: f64,
) -> Result<Tensor<T>> {
    if g < 0.0 {
        return Err(VadeError::InvalidParam(format!(
            "guidance must be >= 0, got {g}"
        )));
    }
    if g == 0.0 {
        eps_uncond.same_shape(eps_cond)?;
        return Ok(eps_uncond.clone());
    }
    if g == 1.0 {
        eps_uncond.same_shape(eps_cond)?;
        return Ok(eps_cond.clone());
    }
    let g = T::of(g);
    eps_uncond.zip_map(eps_cond, |u, c| u + g * (c - u))
}
