use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{Model, TrainItem};
use crate::error::{Result, VadeError};
use crate::image::Image;
use crate::nn::{clip_global_norm, Adam, DivergenceMonitor};
use crate::phantom::PhantomClass;
use crate::tensor::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Healthy-only steps before scaling by `desk_factor`.
    pub normal_steps: usize,
    /// Steps per disease class before scaling by `desk_factor`.
    pub disease_steps: usize,
    pub desk_factor: f64,
    pub prior_weight: f64,
    pub cond_dropout: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            normal_steps: 1200,
            disease_steps: 500,
            desk_factor: 2.0,
            prior_weight: 1.0,
            cond_dropout: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.lr > 0.0
            && self.batch_size > 0
            && self.normal_steps > 0
            && self.disease_steps > 0
            && self.desk_factor > 0.0
            && self.prior_weight > 0.0
            && self.grad_clip > 0.0;
        if !positive || !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(VadeError::InvalidParam(
                "training settings must be positive, dropout in [0,1)".into(),
            ));
        }
        Ok(())
    }

    fn scaled(&self, steps: usize) -> usize {
        ((steps as f64 * self.desk_factor).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub start: usize,
    pub steps: usize,
}

/// Per-step mean epsilon loss over every example seen in the step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub stages: Vec<StageRecord>,
    pub losses: Vec<f32>,
}

impl LossTrace {
    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    /// Mean of the first and of the last `window` losses.
    pub fn head_tail(&self, window: usize) -> (f64, f64) {
        let n = self.losses.len();
        let w = window.min(n).max(1);
        let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len().max(1) as f64;
        (
            mean(&self.losses[..w.min(n)]),
            mean(&self.losses[n.saturating_sub(w)..]),
        )
    }
}

/// Training examples grouped by class, in model space.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub by_class: BTreeMap<PhantomClass, Vec<TrainItem>>,
}

impl TrainData {
    /// Encodes and tokenizes `(class, image, prompt)` triples.
    pub fn prepare<'a>(
        model: &Model,
        items: impl IntoIterator<Item = (PhantomClass, &'a Image, &'a str)>,
    ) -> Result<Self> {
        let mut by_class: BTreeMap<PhantomClass, Vec<TrainItem>> = BTreeMap::new();
        for (class, img, prompt) in items {
            if class.is_held_out() {
                return Err(VadeError::Policy(format!(
                    "class {class} is held out of training"
                )));
            }
            let x0 = model.codec.encode(&img.to_tensor())?;
            by_class.entry(class).or_default().push(TrainItem {
                x0,
                ids: model.tokenize(prompt),
                control: None,
            });
        }
        Ok(TrainData { by_class })
    }

    /// Stage plan: healthy first, then each present trained disease class.
    pub fn stages(&self, cfg: &TrainConfig) -> Result<Vec<(PhantomClass, usize)>> {
        if !self.by_class.contains_key(&PhantomClass::Healthy) {
            return Err(VadeError::MissingClasses(vec!["healthy".into()]));
        }
        let mut plan = vec![(PhantomClass::Healthy, cfg.scaled(cfg.normal_steps))];
        for c in PhantomClass::TRAINED_DISEASES {
            if self.by_class.contains_key(&c) {
                plan.push((c, cfg.scaled(cfg.disease_steps)));
            }
        }
        Ok(plan)
    }
}

fn draw_batch(items: &[TrainItem], n: usize, rng: &mut SeededRng) -> Vec<TrainItem> {
    (0..n)
        .map(|_| items[rng.below(items.len())].clone())
        .collect()
}

/// Staged fine-tuning: healthy first, then one stage per disease class in
/// which every disease batch is paired with a healthy batch weighted by
/// `prior_weight`. `progress(step, total, loss)` is called after each step.
pub fn train(
    model: &mut Model,
    data: &TrainData,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, usize, f64),
) -> Result<LossTrace> {
    cfg.validate()?;
    let plan = data.stages(cfg)?;
    let total: usize = plan.iter().map(|(_, n)| n).sum();
    let mut rng = SeededRng::with_stream(cfg.seed, 21);
    let mut opt = Adam::new(&model.params, cfg.lr);
    let mut monitor = DivergenceMonitor::default();
    let mut trace = LossTrace::default();
    let healthy = &data.by_class[&PhantomClass::Healthy];
    let mut step = 0;
    for (class, steps) in plan {
        trace.stages.push(StageRecord {
            name: stage_name(class).into(),
            start: step,
            steps,
        });
        let items = &data.by_class[&class];
        for _ in 0..steps {
            let mut grads = model.params.zeros_like();
            let batch = draw_batch(items, cfg.batch_size, &mut rng);
            let mut loss = model.loss_eps(&batch, &mut rng, cfg.cond_dropout, &mut grads, 1.0)?;
            if class != PhantomClass::Healthy {
                let prior = draw_batch(healthy, cfg.batch_size, &mut rng);
                let lp = model.loss_eps(
                    &prior,
                    &mut rng,
                    cfg.cond_dropout,
                    &mut grads,
                    cfg.prior_weight,
                )?;
                loss = 0.5 * (loss + lp);
            }
            monitor.observe(step, loss)?;
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.step(&mut model.params, &grads);
            trace.losses.push(loss as f32);
            step += 1;
            progress(step, total, loss);
        }
    }
    Ok(trace)
}

/// Stage label used in loss traces.
pub fn stage_name(class: PhantomClass) -> &'static str {
    match class {
        PhantomClass::Healthy => "normal",
        PhantomClass::Pneumonia => "pneumonia-analog",
        c => c.name(),
    }
}
