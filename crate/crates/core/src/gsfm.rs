//! Geometric-semantic fusion: turns a scene's trimasks (and a triplane to
//! pool semantic tokens from) into one conditioning token per class.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{layout_hw, roll_out};
use crate::numerics::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::numerics::{Ctx, Element, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::trimask::SceneMaskSet;

#[derive(Debug, Error)]
pub enum GsfmError {
    #[error("mask dims {found:?} do not match the module's {expected:?}")]
    DimMismatch { expected: [usize; 3], found: [usize; 3] },
    #[error("mask set has {found} classes, module expects {expected}")]
    ClassMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Component switches; each `false` reproduces one ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_geometric_branch: bool,
    pub use_semantic_branch: bool,
    pub use_semantic_tokens: bool,
    pub use_mask_concat: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_geometric_branch: true, use_semantic_branch: true, use_semantic_tokens: true, use_mask_concat: true }
    }
}

impl Ablation {
    /// The four single-component ablations, by name.
    pub fn table() -> [(&'static str, Ablation); 4] {
        let full = Ablation::default();
        [
            ("w/o geometric branch", Ablation { use_geometric_branch: false, ..full }),
            ("w/o semantic branch", Ablation { use_semantic_branch: false, ..full }),
            ("w/o semantic tokens", Ablation { use_semantic_tokens: false, ..full }),
            ("w/o mask concat", Ablation { use_mask_concat: false, ..full }),
        ]
    }

    pub fn to_bits(self) -> [bool; 4] {
        [self.use_geometric_branch, self.use_semantic_branch, self.use_semantic_tokens, self.use_mask_concat]
    }

    pub fn from_bits(b: [bool; 4]) -> Self {
        Self { use_geometric_branch: b[0], use_semantic_branch: b[1], use_semantic_tokens: b[2], use_mask_concat: b[3] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsfmConfig {
    pub num_classes: usize,
    pub mask_dims: [usize; 3],
    /// Triplane channels pooled into semantic tokens.
    pub c_z: usize,
    pub c_emb: usize,
    pub geo_hidden: usize,
    pub sem_hidden: usize,
    pub flags: Ablation,
}

impl GsfmConfig {
    pub fn new(num_classes: usize, mask_dims: [usize; 3], c_z: usize) -> Self {
        Self { num_classes, mask_dims, c_z, c_emb: 64, geo_hidden: 256, sem_hidden: 128, flags: Ablation::default() }
    }

    pub fn validate(&self) -> Result<(), GsfmError> {
        if self.num_classes == 0 || self.c_z == 0 || self.c_emb == 0 || self.mask_dims.contains(&0) {
            return Err(GsfmError::Config("classes, widths and mask dims must be positive".into()));
        }
        if !self.flags.use_geometric_branch && !self.flags.use_semantic_branch {
            return Err(GsfmError::Config("at least one of the geometric and semantic branches is required".into()));
        }
        Ok(())
    }
}

/// Per-class `(X_m+Z_m) × (Y_m+Z_m)` maps, stored `[N, H, W]` as 0/1.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatenatedMaskMap {
    pub mask_dims: [usize; 3],
    pub maps: Vec<Vec<bool>>,
}

impl ConcatenatedMaskMap {
    pub fn hw(&self) -> (usize, usize) {
        layout_hw(self.mask_dims)
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let (h, w) = self.hw();
        let data = self.maps.iter().flatten().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::new(&[self.maps.len(), h, w], data).expect("map shape")
    }
}

pub fn concat_trimask(set: &SceneMaskSet) -> ConcatenatedMaskMap {
    let dims = set.dims();
    let maps = set
        .masks()
        .iter()
        .map(|m| roll_out(m.xy.bits(), m.xz.bits(), m.yz.bits(), 1, dims))
        .collect();
    ConcatenatedMaskMap { mask_dims: dims, maps }
}

/// Per-class masked means of three planes `[C, X, Y]`, `[C, X, Z]`, `[C, Y, Z]`,
/// averaged over the planes: `[N, C]`.
pub fn pool_semantic<'a, T: Element>(set: &SceneMaskSet, planes: [Var<'a, T>; 3]) -> Result<Var<'a, T>, GsfmError> {
    let tape = planes[0].tape();
    let c = planes[0].shape()[0];
    let mut rows = Vec::with_capacity(set.masks().len());
    for m in set.masks() {
        let mut acc: Option<Var<'a, T>> = None;
        for (plane, bits) in planes.iter().zip([m.xy.bits(), m.xz.bits(), m.yz.bits()]) {
            let v = plane.masked_mean(Rc::new(bits.to_vec()))?;
            acc = Some(match acc {
                None => v,
                Some(a) => a.add(v)?,
            });
        }
        rows.push(acc.expect("three planes").scale(1.0 / 3.0).reshape(&[1, c])?);
    }
    Ok(tape.concat(&rows, 0)?)
}

/// Tape values of one forward pass; disabled components are `None`.
pub struct GsfmVars<'a, T: Element> {
    pub e_m: Option<Var<'a, T>>,
    pub e_m_prime: Option<Var<'a, T>>,
    pub e_label: Option<Var<'a, T>>,
    /// Projected semantic tokens.
    pub t_sem: Option<Var<'a, T>>,
    pub e_sem: Option<Var<'a, T>>,
    pub fused: Var<'a, T>,
}

/// Materialized [`GsfmVars`].
#[derive(Clone, Debug)]
pub struct FusedContext<T> {
    pub tokens: Tensor<T>,
    pub e_m: Option<Tensor<T>>,
    pub e_m_prime: Option<Tensor<T>>,
    pub e_label: Option<Tensor<T>>,
    pub t_sem: Option<Tensor<T>>,
    pub e_sem: Option<Tensor<T>>,
}

impl<T: Element> FusedContext<T> {
    fn from_vars(v: &GsfmVars<'_, T>) -> Self {
        let m = |o: &Option<Var<'_, T>>| o.map(|v| (*v.value()).clone());
        Self {
            tokens: (*v.fused.value()).clone(),
            e_m: m(&v.e_m),
            e_m_prime: m(&v.e_m_prime),
            e_label: m(&v.e_label),
            t_sem: m(&v.t_sem),
            e_sem: m(&v.e_sem),
        }
    }
}

/// Layer handles of the module; parameters live in a caller-owned store
/// under `{prefix}.`.
#[derive(Clone, Debug)]
pub struct Gsfm {
    cfg: GsfmConfig,
    pub geo_mlp: Mlp,
    pub geo_attn: Attention,
    pub geo_norm: LayerNorm,
    pub label_embed: ParamId,
    pub sem_proj: Linear,
    pub sem_mlp: Mlp,
    pub fuse_attn: Attention,
    pub fuse_norm: LayerNorm,
}

impl Gsfm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, cfg: GsfmConfig, seed: u64) -> Result<Self, GsfmError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = layout_hw(cfg.mask_dims);
        let e = cfg.c_emb;
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            cfg,
            geo_mlp: Mlp::new(store, &mut rng, &n("geo_mlp"), h * w, cfg.geo_hidden, e),
            geo_attn: Attention::new(store, &mut rng, &n("geo_attn"), e, e, e),
            geo_norm: LayerNorm::new(store, &n("geo_norm"), e),
            label_embed: store.insert(n("label_embed"), Tensor::randn(&[cfg.num_classes, e], 1.0, &mut rng)),
            sem_proj: Linear::new(store, &mut rng, &n("sem_proj"), cfg.c_z, e),
            sem_mlp: Mlp::new(store, &mut rng, &n("sem_mlp"), e, cfg.sem_hidden, e),
            fuse_attn: Attention::new(store, &mut rng, &n("fuse_attn"), e, e, e),
            fuse_norm: LayerNorm::new(store, &n("fuse_norm"), e),
        })
    }

    pub fn config(&self) -> GsfmConfig {
        self.cfg
    }

    pub fn geometric_params(&self) -> Vec<ParamId> {
        [self.geo_mlp.params(), self.geo_attn.params(), self.geo_norm.params()].concat()
    }

    pub fn semantic_params(&self) -> Vec<ParamId> {
        [vec![self.label_embed], self.sem_proj.params(), self.sem_mlp.params()].concat()
    }

    pub fn semantic_token_params(&self) -> Vec<ParamId> {
        self.sem_proj.params()
    }

    fn check(&self, set: &SceneMaskSet) -> Result<(), GsfmError> {
        if set.dims() != self.cfg.mask_dims {
            return Err(GsfmError::DimMismatch { expected: self.cfg.mask_dims, found: set.dims() });
        }
        if set.num_classes() as usize != self.cfg.num_classes {
            return Err(GsfmError::ClassMismatch { expected: self.cfg.num_classes, found: set.num_classes() as usize });
        }
        Ok(())
    }

    /// `E_m = MLP(flatten(ℳ′))`: `[N, H, W]` maps → `[N, C_emb]`.
    pub fn geometric_embed<'a, T: Element>(&self, cx: Ctx<'a, T>, maps: Var<'a, T>) -> Result<Var<'a, T>, GsfmError> {
        let s = maps.shape();
        let (h, w) = layout_hw(self.cfg.mask_dims);
        if s.len() != 3 || s[1] != h || s[2] != w {
            return Err(GsfmError::Numerics(NumericsError::shape("geometric_embed", format!("maps {s:?}, weights for {h}×{w}"))));
        }
        Ok(self.geo_mlp.forward(cx, maps.reshape(&[s[0], h * w])?)?)
    }

    /// `E′_m = E_m + LN(SelfAttn(E_m))`.
    pub fn geometric_self_attention<'a, T: Element>(&self, cx: Ctx<'a, T>, e_m: Var<'a, T>) -> Result<Var<'a, T>, GsfmError> {
        let a = self.geo_attn.forward(cx, e_m, e_m)?;
        Ok(e_m.add(self.geo_norm.forward(cx, a)?)?)
    }

    /// Projects pooled `[N, C_z]` tokens to `[N, C_emb]`.
    pub fn semantic_tokens<'a, T: Element>(
        &self,
        cx: Ctx<'a, T>,
        set: &SceneMaskSet,
        planes: [Var<'a, T>; 3],
    ) -> Result<Var<'a, T>, GsfmError> {
        let pooled = pool_semantic(set, planes)?;
        Ok(self.sem_proj.forward(cx, pooled)?)
    }

    /// `E_sem = MLP(E_label + T_sem)`, with `T_sem` omitted when `None`.
    pub fn semantic_embed<'a, T: Element>(
        &self,
        cx: Ctx<'a, T>,
        t_sem: Option<Var<'a, T>>,
    ) -> Result<(Var<'a, T>, Var<'a, T>), GsfmError> {
        let ids: Vec<usize> = (0..self.cfg.num_classes).collect();
        let e_label = cx.p(self.label_embed).embedding(&ids)?;
        let x = match t_sem {
            Some(t) => e_label.add(t)?,
            None => e_label,
        };
        Ok((e_label, self.sem_mlp.forward(cx, x)?))
    }

    /// `q + LN(CrossAttn(q, kv))`.
    pub fn fuse<'a, T: Element>(&self, cx: Ctx<'a, T>, q: Var<'a, T>, kv: Var<'a, T>) -> Result<Var<'a, T>, GsfmError> {
        let a = self.fuse_attn.forward(cx, q, kv)?;
        Ok(q.add(self.fuse_norm.forward(cx, a)?)?)
    }

    /// Full forward pass. `planes` is the triplane the semantic tokens are
    /// pooled from.
    pub fn forward_vars<'a, T: Element>(
        &self,
        cx: Ctx<'a, T>,
        set: &SceneMaskSet,
        planes: [Var<'a, T>; 3],
    ) -> Result<GsfmVars<'a, T>, GsfmError> {
        self.check(set)?;
        let f = self.cfg.flags;
        let (mut e_m, mut e_m_prime) = (None, None);
        if f.use_geometric_branch {
            let maps = cx.constant(concat_trimask(set).to_tensor());
            let em = self.geometric_embed(cx, maps)?;
            e_m = Some(em);
            e_m_prime = Some(self.geometric_self_attention(cx, em)?);
        }
        let (mut e_label, mut t_sem, mut e_sem) = (None, None, None);
        if f.use_semantic_branch {
            if f.use_semantic_tokens {
                t_sem = Some(self.semantic_tokens(cx, set, planes)?);
            }
            let (l, s) = self.semantic_embed(cx, t_sem)?;
            e_label = Some(l);
            e_sem = Some(s);
        }
        let fused = match (e_m_prime, e_sem) {
            (Some(g), Some(s)) => self.fuse(cx, g, g.tape().concat(&[g, s], 0)?)?,
            (Some(g), None) => self.fuse(cx, g, g)?,
            (None, Some(s)) => self.fuse(cx, s, s)?,
            (None, None) => unreachable!("validated config"),
        };
        Ok(GsfmVars { e_m, e_m_prime, e_label, t_sem, e_sem, fused })
    }

    pub fn forward<T: Element>(
        &self,
        params: &ParamStore<T>,
        set: &SceneMaskSet,
        planes: [&Tensor<T>; 3],
    ) -> Result<FusedContext<T>, GsfmError> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, params);
        let vars = self.forward_vars(cx, set, planes.map(|p| cx.constant(p.clone())))?;
        Ok(FusedContext::from_vars(&vars))
    }
}
