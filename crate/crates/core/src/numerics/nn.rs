//! Parameterized building blocks shared by the scene models.

use rand::Rng;

use super::params::{Ctx, ParamId, ParamStore};
use super::tape::Var;
use super::tensor::{Element, Tensor};
use super::Result;

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, inp: usize, out: usize) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), Tensor::uniform(&[out, inp], bound, rng));
        let bias = Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[out])));
        Self { weight, bias }
    }

    pub fn zeroed<T: Element>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize) -> Self {
        let weight = store.insert(format!("{name}.weight"), Tensor::zeros(&[out, inp]));
        let bias = Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[out])));
        Self { weight, bias }
    }

    pub fn no_bias<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, inp: usize, out: usize) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), Tensor::uniform(&[out, inp], bound, rng));
        Self { weight, bias: None }
    }

    pub fn forward<'a, T: Element>(&self, cx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        x.linear(cx.p(self.weight), self.bias.map(|b| cx.p(b)))
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// `Linear(GeLU(Linear(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inp: usize,
        hidden: usize,
        out: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), inp, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out),
        }
    }

    pub fn forward<'a, T: Element>(&self, cx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let h = self.fc1.forward(cx, x)?.gelu();
        self.fc2.forward(cx, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.fc1.params().into_iter().chain(self.fc2.params()).collect()
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[width], T::one())),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<'a, T: Element>(&self, cx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        x.layer_norm(Some(cx.p(self.gamma)), Some(cx.p(self.beta)))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Convolution over `[C, D0, D1, D2]` (3D) or `[C, H, W]` (2D) inputs.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    two_d: bool,
}

impl Conv {
    pub fn new3d<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inp: usize,
        out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Self {
        let fan_in = inp * kernel.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight =
            store.insert(format!("{name}.weight"), Tensor::uniform(&[out, inp, kernel[0], kernel[1], kernel[2]], bound, rng));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
        let padding = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        Self { weight, bias, stride, padding, two_d: false }
    }

    pub fn new2d<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let bound = 1.0 / ((inp * kernel * kernel) as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), Tensor::uniform(&[out, inp, kernel, kernel], bound, rng));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
        Self { weight, bias, stride: [stride, stride, 1], padding: [kernel / 2, kernel / 2, 0], two_d: true }
    }

    /// 2D convolution whose weights and bias start at zero.
    pub fn zeroed2d<T: Element>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, kernel: usize) -> Self {
        let weight = store.insert(format!("{name}.weight"), Tensor::zeros(&[out, inp, kernel, kernel]));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
        Self { weight, bias, stride: [1, 1, 1], padding: [kernel / 2, kernel / 2, 0], two_d: true }
    }

    pub fn forward<'a, T: Element>(&self, cx: Ctx<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let (w, b) = (cx.p(self.weight), Some(cx.p(self.bias)));
        if self.two_d {
            x.conv2d(w, b, self.stride[0], self.padding[0])
        } else {
            x.conv3d(w, b, self.stride, self.padding)
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Single-head scaled dot-product attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    dim: usize,
}

impl Attention {
    /// `query_dim` is the width of the attending tokens, `context_dim` of the attended ones.
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        dim: usize,
    ) -> Self {
        Self {
            q: Linear::no_bias(store, rng, &format!("{name}.q"), query_dim, dim),
            k: Linear::no_bias(store, rng, &format!("{name}.k"), context_dim, dim),
            v: Linear::no_bias(store, rng, &format!("{name}.v"), context_dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, query_dim),
            dim,
        }
    }

    /// `x: [Nq, query_dim]`, `context: [Nk, context_dim]` → `[Nq, query_dim]`.
    pub fn forward<'a, T: Element>(&self, cx: Ctx<'a, T>, x: Var<'a, T>, context: Var<'a, T>) -> Result<Var<'a, T>> {
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, context)?;
        let v = self.v.forward(cx, context)?;
        let attn = scaled_dot_product(q, k, v, self.dim)?;
        self.out.forward(cx, attn)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.out].iter().flat_map(|l| l.params()).collect()
    }
}

/// `softmax(q kᵀ / √dim) v` for `q: [Nq, dim]`, `k, v: [Nk, dim]`.
pub fn scaled_dot_product<'a, T: Element>(q: Var<'a, T>, k: Var<'a, T>, v: Var<'a, T>, dim: usize) -> Result<Var<'a, T>> {
    let scores = q.matmul_t(k, false, true)?.scale(1.0 / (dim as f64).sqrt());
    scores.softmax().matmul(v)
}
