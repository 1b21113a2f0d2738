use std::collections::HashMap;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{mix, NoiseSchedule};
use super::DiffusionError;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ddpm,
    Repaint,
}

impl FromStr for Strategy {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "repaint" => Ok(Self::Repaint),
            other => Err(DiffusionError::Config(format!("unknown sampling strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub steps: usize,
    pub cfg_scale: f64,
    pub resample: usize,
    pub jump: usize,
    pub seed: u64,
    /// `|x̂0|` bound applied after guidance.
    pub clamp: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Ddpm, steps: 100, cfg_scale: 2.0, resample: 5, jump: 1, seed: 0, clamp: 3.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<(), DiffusionError> {
        if !(self.cfg_scale >= 0.0) || !(self.clamp > 0.0) {
            return Err(DiffusionError::Config("cfg_scale must be ≥ 0 and clamp > 0".into()));
        }
        if self.strategy == Strategy::Repaint && self.resample > 0 && self.jump == 0 {
            return Err(DiffusionError::Config("repaint with resampling needs jump ≥ 1".into()));
        }
        sched.respaced(self.steps)?;
        Ok(())
    }
}

/// Anything that predicts the clean latent from a noisy one.
pub trait X0Predictor {
    /// `estimate` is the previous step's x̂0 (zeros at the first step), from
    /// which a predictor may pool semantic tokens.
    fn predict_x0(&self, x_t: &Tensor<f32>, t: usize, conditional: bool, estimate: &Tensor<f32>)
        -> Result<Tensor<f32>, DiffusionError>;
}

/// Classifier-free guidance on x̂0, then clamping. `w = 1` and `w = 0`
/// evaluate only the conditional or unconditional path.
pub fn guided_x0<P: X0Predictor + ?Sized>(
    model: &P,
    x_t: &Tensor<f32>,
    t: usize,
    w: f64,
    clamp: f64,
    estimate: &Tensor<f32>,
) -> Result<Tensor<f32>, DiffusionError> {
    let mut x0 = if w == 1.0 {
        model.predict_x0(x_t, t, true, estimate)?
    } else if w == 0.0 {
        model.predict_x0(x_t, t, false, estimate)?
    } else {
        let c = model.predict_x0(x_t, t, true, estimate)?;
        let u = model.predict_x0(x_t, t, false, estimate)?;
        mix(&u, 1.0 - w, &c, w)?
    };
    let b = clamp as f32;
    x0.data_mut().iter_mut().for_each(|v| *v = v.clamp(-b, b));
    Ok(x0)
}

/// Called with `(t, x̂0)` after every model evaluation.
pub type Observer<'o> = &'o mut dyn FnMut(usize, &Tensor<f32>);

fn posterior_step(
    sched: &NoiseSchedule,
    x0: &Tensor<f32>,
    x_t: &Tensor<f32>,
    t: usize,
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>, DiffusionError> {
    let (a, b, var) = sched.posterior(t, s);
    let mean = mix(x0, a, x_t, b)?;
    let noise = Tensor::<f32>::randn(x_t.shape(), 1.0, rng);
    mix(&mean, 1.0, &noise, var.sqrt())
}

/// Ancestral sampling over `cfg.steps` evenly respaced timesteps; returns
/// x̂0 of the last step.
pub fn ddpm_sample<P: X0Predictor + ?Sized>(
    model: &P,
    shape: &[usize],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    mut observer: Option<Observer<'_>>,
) -> Result<Tensor<f32>, DiffusionError> {
    cfg.validate(sched)?;
    let ts = sched.respaced(cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Tensor::<f32>::randn(shape, 1.0, &mut rng);
    let mut est = Tensor::zeros(shape);
    for (i, &t) in ts.iter().enumerate() {
        let x0 = guided_x0(model, &x, t, cfg.cfg_scale, cfg.clamp, &est)?;
        if let Some(o) = observer.as_mut() {
            o(t, &x0);
        }
        match ts.get(i + 1) {
            Some(&s) => x = posterior_step(sched, &x0, &x, t, s, &mut rng)?,
            None => return Ok(x0),
        }
        est = x0;
    }
    unreachable!("respaced schedule is never empty")
}

/// Index sequence of the resampling loop over `n` respaced steps: moves of
/// −1 are denoising steps, +1 renoising ones.
pub fn repaint_schedule(n: usize, resample: usize, jump: usize) -> Vec<usize> {
    let mut jumps: HashMap<usize, usize> = HashMap::new();
    if resample > 0 && jump > 0 && n > jump {
        for j in (0..n - jump).step_by(jump) {
            jumps.insert(j, resample);
        }
    }
    let mut t = n;
    let mut out = vec![t];
    while t >= 1 {
        t -= 1;
        out.push(t);
        if let Some(left) = jumps.get_mut(&t).filter(|l| **l > 0) {
            *left -= 1;
            for _ in 0..jump {
                t += 1;
                out.push(t);
            }
        }
    }
    out
}

/// Inpainting by resampling: the cells flagged in `known_mask` (one flag per
/// spatial cell, shared by all channels) follow `known` noised to the current
/// step, the rest is generated.
pub fn repaint_sample<P: X0Predictor + ?Sized>(
    model: &P,
    known: &Tensor<f32>,
    known_mask: &[bool],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    mut observer: Option<Observer<'_>>,
) -> Result<Tensor<f32>, DiffusionError> {
    cfg.validate(sched)?;
    let shape = known.shape().to_vec();
    let spatial = shape.iter().skip(1).product::<usize>();
    if known_mask.len() != spatial {
        return Err(DiffusionError::Shape(format!("known mask of {} cells for latent {shape:?}", known_mask.len())));
    }
    let mut ts = sched.respaced(cfg.steps)?;
    ts.push(0);
    ts.reverse(); // ts[k] is the timestep at index k, ts[0] = 0
    let n = ts.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut known_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7265_7061_696e_74);
    let mut x = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
    let mut est = Tensor::zeros(&shape);
    let any_known = known_mask.iter().any(|&k| k);
    let merge = |unknown: &Tensor<f32>, k: &Tensor<f32>| -> Tensor<f32> {
        let mut out = unknown.clone();
        for (c, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            for (i, v) in chunk.iter_mut().enumerate() {
                if known_mask[i] {
                    *v = k.data()[c * spatial + i];
                }
            }
        }
        out
    };
    let order = repaint_schedule(n, cfg.resample, cfg.jump);
    for pair in order.windows(2) {
        let (from, to) = (pair[0], pair[1]);
        if to < from {
            let t = ts[from];
            let x0 = guided_x0(model, &x, t, cfg.cfg_scale, cfg.clamp, &est)?;
            if let Some(o) = observer.as_mut() {
                o(t, &x0);
            }
            let s = ts[to];
            let unknown = if s == 0 { x0.clone() } else { posterior_step(sched, &x0, &x, t, s, &mut rng)? };
            x = if !any_known {
                unknown
            } else if s == 0 {
                merge(&unknown, known)
            } else {
                let noise = Tensor::<f32>::randn(&shape, 1.0, &mut known_rng);
                merge(&unknown, &sched.q_sample(known, s, &noise)?)
            };
            est = x0;
        } else {
            let (s, t) = (ts[from], ts[to]);
            let ratio = sched.alpha_bar(t) / sched.alpha_bar(s);
            let noise = Tensor::<f32>::randn(&shape, 1.0, &mut known_rng);
            x = mix(&x, ratio.sqrt(), &noise, (1.0 - ratio).sqrt())?;
        }
    }
    Ok(x)
}
