use super::schedule::{
    em_reverse_step, forward_marginal_at, score_from_eps, NoiseSchedule, ScheduleKind,
};
use crate::error::{Result, VadeError};
use crate::tensor::{Real, SeededRng, Tensor};

/// Runs `n_steps` evenly spaced Euler–Maruyama steps from `t_start` to 0.
/// `eps_fn(x, t)` returns the (already guided) noise prediction.
pub fn reverse_from<T: Real, F>(
    sched: &NoiseSchedule,
    mut x: Tensor<T>,
    t_start: f64,
    n_steps: usize,
    rng: &mut SeededRng,
    mut eps_fn: F,
) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    if n_steps == 0 || t_start <= 0.0 {
        return Ok(x);
    }
    for k in (1..=n_steps).rev() {
        let t_next = t_start * k as f64 / n_steps as f64;
        let t = t_start * (k - 1) as f64 / n_steps as f64;
        let eps = eps_fn(&x, t_next)?;
        let score = score_from_eps(&eps, t_next, sched)?;
        let z = rng.gaussian_draw::<T>(x.shape())?;
        x = em_reverse_step(&x, t, t_next - t, &score, &z, sched)?;
        if !x.all_finite() {
            return Err(VadeError::NonFinite(format!("sampler state at t = {t:.4}")));
        }
    }
    Ok(x)
}

/// Number of sampler steps used for a partial horizon.
pub fn steps_for_strength(strength: f64, steps: usize) -> usize {
    ((strength * steps as f64).round() as usize).max(1)
}

/// Discrete start time `round(strength * T) / T`.
pub fn start_time(sched: &NoiseSchedule, strength: f64) -> f64 {
    sched.t_of((strength * sched.steps() as f64).round() as usize)
}

/// Full reverse pass from the terminal noise distribution.
pub fn sample<T: Real, F>(
    sched: &NoiseSchedule,
    shape: &[usize],
    steps: usize,
    rng: &mut SeededRng,
    eps_fn: F,
) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    check_steps(sched, steps)?;
    let s = T::of(match sched.kind() {
        ScheduleKind::Ve => sched.sigma_at(1.0),
        ScheduleKind::Vp => 1.0,
    });
    let x = rng.gaussian_draw::<T>(shape)?.map(|v| v * s);
    reverse_from(sched, x, 1.0, steps, rng, eps_fn)
}

/// Guide-initialized reverse diffusion: noise `guide` to `t0 = round(strength T) / T`
/// with the forward marginal, then reverse to 0. Returns the unclamped result.
pub fn sample_from_guide<T: Real, F>(
    sched: &NoiseSchedule,
    guide: &Tensor<T>,
    strength: f64,
    steps: usize,
    rng: &mut SeededRng,
    eps_fn: F,
) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    if !(0.0..=1.0).contains(&strength) {
        return Err(VadeError::InvalidParam(format!(
            "strength must be in [0,1], got {strength}"
        )));
    }
    check_steps(sched, steps)?;
    let t0 = start_time(sched, strength);
    if t0 == 0.0 {
        return Ok(guide.clone());
    }
    let z = rng.gaussian_draw::<T>(guide.shape())?;
    let x = forward_marginal_at(guide, t0, &z, sched)?;
    reverse_from(
        sched,
        x,
        t0,
        steps_for_strength(strength, steps),
        rng,
        eps_fn,
    )
}

fn check_steps(sched: &NoiseSchedule, steps: usize) -> Result<()> {
    if steps == 0 || steps > sched.steps() {
        return Err(VadeError::InvalidParam(format!(
            "steps must be in [1, {}], got {steps}",
            sched.steps()
        )));
    }
    Ok(())
}

/// Optimal noise predictor for data `N(m, gamma^2 I)`.
pub fn gaussian_eps(
    x: &Tensor<f64>,
    t: f64,
    m: &[f64],
    gamma: f64,
    sched: &NoiseSchedule,
) -> Tensor<f64> {
    let (a, s) = sched.alpha_sigma(t);
    let var = a * a * gamma * gamma + s * s;
    Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(m)
            .map(|(&xi, &mi)| s * (xi - a * mi) / var)
            .collect(),
    )
    .expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::super::schedule::{make_schedule, ScheduleParams};
    use super::*;

    #[test]
    fn strength_zero_returns_guide() {
        let s = make_schedule(ScheduleParams::default()).unwrap();
        let g = Tensor::new(vec![3], vec![0.1f32, 0.2, 0.3]).unwrap();
        let out = sample_from_guide(
            &s,
            &g,
            0.0,
            50,
            &mut SeededRng::new(1),
            |_, _| unreachable!(),
        )
        .unwrap();
        assert_eq!(out, g);
        assert!(sample_from_guide(
            &s,
            &g,
            1.5,
            50,
            &mut SeededRng::new(1),
            |x, _| Ok(x.clone())
        )
        .is_err());
        assert!(
            sample_from_guide(&s, &g, 0.5, 500, &mut SeededRng::new(1), |x, _| Ok(
                x.clone()
            ))
            .is_err()
        );
    }

    #[test]
    fn same_seed_same_trajectory() {
        let s = make_schedule(ScheduleParams::vp(100)).unwrap();
        let m = vec![0.5; 4];
        let run = || {
            sample::<f64, _>(&s, &[4], 100, &mut SeededRng::new(9), |x, t| {
                Ok(gaussian_eps(x, t, &m, 0.3, &s))
            })
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn analytic_eps_matches_analytic_score() {
        let s = make_schedule(ScheduleParams::vp(200)).unwrap();
        let (m, gamma) = (vec![0.3, -1.0], 0.7);
        let x = Tensor::new(vec![2], vec![0.1, 0.4]).unwrap();
        for t in [0.05, 0.5, 0.95] {
            let (a, sg) = s.alpha_sigma(t);
            let score = score_from_eps(&gaussian_eps(&x, t, &m, gamma, &s), t, &s).unwrap();
            for i in 0..2 {
                let expect = -(x.data()[i] - a * m[i]) / (a * a * gamma * gamma + sg * sg);
                assert!((score.data()[i] - expect).abs() < 1e-12);
            }
        }
    }
}
