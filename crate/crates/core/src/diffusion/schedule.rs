use super::DiffusionError;
use crate::numerics::{Element, Tensor};

/// Linear β schedule over steps `1..=T`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Schedule(format!(
                "need T ≥ 1 and 0 < β_start ≤ β_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
        }
        Ok(Self { beta_start, beta_end, betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn endpoints(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::TimestepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
    pub fn q_sample<T: Element>(&self, x0: &Tensor<T>, t: usize, noise: &Tensor<T>) -> Result<Tensor<T>, DiffusionError> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        mix(x0, ab.sqrt(), noise, (1.0 - ab).sqrt())
    }

    /// One forward transition `x_{t-1} → x_t`.
    pub fn q_step<T: Element>(&self, prev: &Tensor<T>, t: usize, noise: &Tensor<T>) -> Result<Tensor<T>, DiffusionError> {
        self.check(t)?;
        let b = self.beta(t);
        mix(prev, (1.0 - b).sqrt(), noise, b.sqrt())
    }

    /// `count` timesteps spread evenly over `T..=1`, descending, starting at `T`.
    pub fn respaced(&self, count: usize) -> Result<Vec<usize>, DiffusionError> {
        let n = self.steps();
        if count == 0 || count > n {
            return Err(DiffusionError::Config(format!("sampling steps {count} outside 1..={n}")));
        }
        let mut ts: Vec<usize> = (0..count).map(|i| n - (i * n) / count).collect();
        ts.dedup();
        Ok(ts)
    }

    /// Mean and variance coefficients of `q(x_s | x_t, x0)` for `s < t`:
    /// `mean = a·x0 + b·x_t`, returned as `(a, b, var)`.
    pub fn posterior(&self, t: usize, s: usize) -> (f64, f64, f64) {
        let (ab_t, ab_s) = (self.alpha_bar(t), self.alpha_bar(s));
        let alpha = ab_t / ab_s;
        let beta = 1.0 - alpha;
        let a = ab_s.sqrt() * beta / (1.0 - ab_t);
        let b = alpha.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
        (a, b, beta * (1.0 - ab_s) / (1.0 - ab_t))
    }
}

pub(crate) fn mix<T: Element>(a: &Tensor<T>, ka: f64, b: &Tensor<T>, kb: f64) -> Result<Tensor<T>, DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ka, kb) = (T::from_f64(ka).unwrap(), T::from_f64(kb).unwrap());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| ka * x + kb * y).collect();
    Ok(Tensor::new(a.shape(), data)?)
}
