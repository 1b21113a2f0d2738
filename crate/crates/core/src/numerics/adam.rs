use super::params::ParamStore;
use super::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The step was skipped because a gradient held NaN or infinity.
    SkippedNonFinite { param: String },
}

/// Adam with bias correction. Parameters without a gradient are left untouched.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self { config, step: 0, m: vec![None; num_params], v: vec![None; num_params] }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> StepOutcome {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        for (id, name, _) in params.iter() {
            if grads[id.index()].as_ref().is_some_and(|g| !g.is_finite()) {
                return StepOutcome::SkippedNonFinite { param: name.to_string() };
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(c.lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.eps);
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            let shape = g.shape().to_vec();
            let m = self.m[id.index()].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[id.index()].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = params.get_mut(id);
            for (((pv, mv), vv), &gv) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        StepOutcome::Applied
    }
}
