use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::gsfm::{concat_trimask, Ablation, Gsfm, GsfmConfig};
use crate::layout::layout_hw;
use crate::numerics::nn::{Attention, Conv, LayerNorm, Linear};
use crate::numerics::{Ctx, Element, ParamId, ParamStore, Tape, Tensor, Var};
use crate::trimask::SceneMaskSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub num_classes: usize,
    /// Latent channels.
    pub c_z: usize,
    pub mask_dims: [usize; 3],
    pub base: usize,
    pub mults: Vec<usize>,
    pub blocks: usize,
    /// Number of coarsest levels with cross-attention.
    pub attn_levels: usize,
    pub temb: usize,
    pub c_emb: usize,
    pub geo_hidden: usize,
    pub sem_hidden: usize,
    pub flags: Ablation,
}

impl DenoiserConfig {
    pub fn new(num_classes: usize, c_z: usize, mask_dims: [usize; 3]) -> Self {
        Self {
            num_classes,
            c_z,
            mask_dims,
            base: 64,
            mults: vec![1, 2, 4],
            blocks: 2,
            attn_levels: 2,
            temb: 128,
            c_emb: 64,
            geo_hidden: 256,
            sem_hidden: 128,
            flags: Ablation::default(),
        }
    }

    pub fn gsfm(&self) -> GsfmConfig {
        GsfmConfig {
            num_classes: self.num_classes,
            mask_dims: self.mask_dims,
            c_z: self.c_z,
            c_emb: self.c_emb,
            geo_hidden: self.geo_hidden,
            sem_hidden: self.sem_hidden,
            flags: self.flags,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.c_z + if self.flags.use_mask_concat { self.num_classes } else { 0 }
    }

    pub fn layout_hw(&self) -> (usize, usize) {
        layout_hw(self.mask_dims)
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let (h, w) = self.layout_hw();
        let f = 1usize << self.mults.len().saturating_sub(1);
        if self.mults.is_empty() || self.mults.contains(&0) || self.base == 0 || self.blocks == 0 || self.temb % 2 == 1 {
            return Err(DiffusionError::Config("empty or zero-width U-Net levels, or odd timestep width".into()));
        }
        if h % f != 0 || w % f != 0 {
            return Err(DiffusionError::Config(format!("layout {h}×{w} not divisible by {f} for {} levels", self.mults.len())));
        }
        if self.attn_levels > self.mults.len() {
            return Err(DiffusionError::Config("more attention levels than U-Net levels".into()));
        }
        self.gsfm().validate()?;
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base * self.mults[level]
    }

    fn has_attn(&self, level: usize) -> bool {
        level + self.attn_levels >= self.mults.len()
    }
}

/// `[sin(t·f_0..), cos(t·f_0..)]` with `f_i = 10000^{-i/half}`.
pub fn timestep_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
    let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t as f64 * f).sin(), (t as f64 * f).cos())).unzip();
    [s, c].concat()
}

/// Layer norm over channels at every pixel of `[C, H, W]`.
fn channel_norm<'a, T: Element>(cx: Ctx<'a, T>, ln: &LayerNorm, x: Var<'a, T>) -> Result<Var<'a, T>, DiffusionError> {
    let s = x.shape();
    let rows = x.reshape(&[s[0], s[1] * s[2]])?.transpose()?;
    Ok(ln.forward(cx, rows)?.transpose()?.reshape(&s)?)
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: LayerNorm,
    conv1: Conv,
    temb: Linear,
    norm2: LayerNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, inp: usize, out: usize, temb: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), inp),
            conv1: Conv::new2d(store, rng, &format!("{name}.conv1"), inp, out, 3, 1),
            temb: Linear::new(store, rng, &format!("{name}.temb"), temb, out),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), out),
            conv2: Conv::new2d(store, rng, &format!("{name}.conv2"), out, out, 3, 1),
            skip: (inp != out).then(|| Conv::new2d(store, rng, &format!("{name}.skip"), inp, out, 1, 1)),
        }
    }

    fn forward<'a, T: Element>(&self, cx: Ctx<'a, T>, x: Var<'a, T>, temb: Var<'a, T>) -> Result<Var<'a, T>, DiffusionError> {
        let h = self.conv1.forward(cx, channel_norm(cx, &self.norm1, x)?.gelu())?;
        let shift = self.temb.forward(cx, temb)?;
        let h = h.add_leading(shift.reshape(&[shift.shape()[1]])?)?;
        let h = self.conv2.forward(cx, channel_norm(cx, &self.norm2, h)?.gelu())?;
        let skip = match &self.skip {
            Some(c) => c.forward(cx, x)?,
            None => x,
        };
        Ok(skip.add(h)?)
    }
}

#[derive(Clone, Debug)]
struct CrossAttnBlock {
    norm: LayerNorm,
    attn: Attention,
}

impl CrossAttnBlock {
    fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, width: usize, c_emb: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
            attn: Attention::new(store, rng, &format!("{name}.attn"), width, c_emb, width),
        }
    }

    fn forward<'a, T: Element>(&self, cx: Ctx<'a, T>, x: Var<'a, T>, context: Var<'a, T>) -> Result<Var<'a, T>, DiffusionError> {
        let s = x.shape();
        let tokens = x.reshape(&[s[0], s[1] * s[2]])?.transpose()?;
        let a = self.attn.forward(cx, self.norm.forward(cx, tokens)?, context)?;
        Ok(tokens.add(a)?.transpose()?.reshape(&s)?)
    }
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    attn: Vec<CrossAttnBlock>,
}

impl Level {
    fn forward<'a, T: Element>(
        &self,
        cx: Ctx<'a, T>,
        mut x: Var<'a, T>,
        temb: Var<'a, T>,
        context: Var<'a, T>,
    ) -> Result<Var<'a, T>, DiffusionError> {
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward(cx, x, temb)?;
            if let Some(a) = self.attn.get(i) {
                x = a.forward(cx, x, context)?;
            }
        }
        Ok(x)
    }
}

/// What the denoiser is conditioned on for one call.
pub struct Condition<'s, 'a, T: Element> {
    pub set: &'s SceneMaskSet,
    /// Triplane the semantic tokens are pooled from (`[C_z, X, Y]`, `[C_z, X, Z]`, `[C_z, Y, Z]`).
    pub planes: [Var<'a, T>; 3],
}

/// U-Net over the rolled-out triplane layout, conditioned on the trimask
/// maps (channel concat) and the fused GSFM tokens (cross-attention).
#[derive(Clone, Debug)]
pub struct Denoiser<T: Element> {
    cfg: DenoiserConfig,
    params: ParamStore<T>,
    gsfm: Gsfm,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv,
    down: Vec<Level>,
    downsample: Vec<Conv>,
    mid: ResBlock,
    up: Vec<Level>,
    upsample: Vec<Conv>,
    norm_out: LayerNorm,
    conv_out: Conv,
}

impl<T: Element> Denoiser<T> {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self, DiffusionError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let gsfm = Gsfm::new(&mut store, "diffusion.gsfm", cfg.gsfm(), seed ^ 0x6f5f)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let p = |s: String| format!("diffusion.unet.{s}");
        let td = 2 * cfg.temb;
        let temb1 = Linear::new(&mut store, rng, &p("temb1".into()), cfg.temb, td);
        let temb2 = Linear::new(&mut store, rng, &p("temb2".into()), td, td);
        let conv_in = Conv::new2d(&mut store, rng, &p("conv_in".into()), cfg.input_channels(), cfg.base, 3, 1);
        let levels = cfg.mults.len();
        let (mut down, mut downsample) = (Vec::new(), Vec::new());
        let mut ch = cfg.base;
        for l in 0..levels {
            let w = cfg.width(l);
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for b in 0..cfg.blocks {
                blocks.push(ResBlock::new(&mut store, rng, &p(format!("down{l}.res{b}")), ch, w, td));
                ch = w;
                if cfg.has_attn(l) {
                    attn.push(CrossAttnBlock::new(&mut store, rng, &p(format!("down{l}.xattn{b}")), w, cfg.c_emb));
                }
            }
            down.push(Level { blocks, attn });
            if l + 1 < levels {
                downsample.push(Conv::new2d(&mut store, rng, &p(format!("down{l}.downsample")), w, w, 3, 2));
            }
        }
        let mid = ResBlock::new(&mut store, rng, &p("mid".into()), ch, ch, td);
        let (mut up, mut upsample) = (Vec::new(), Vec::new());
        for l in (0..levels).rev() {
            let w = cfg.width(l);
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for b in 0..cfg.blocks {
                let inp = if b == 0 { ch + w } else { w };
                blocks.push(ResBlock::new(&mut store, rng, &p(format!("up{l}.res{b}")), inp, w, td));
                if cfg.has_attn(l) {
                    attn.push(CrossAttnBlock::new(&mut store, rng, &p(format!("up{l}.xattn{b}")), w, cfg.c_emb));
                }
            }
            ch = w;
            up.push(Level { blocks, attn });
            if l > 0 {
                let next = cfg.width(l - 1);
                upsample.push(Conv::new2d(&mut store, rng, &p(format!("up{l}.upsample")), w, next, 3, 1));
                ch = next;
            }
        }
        let norm_out = LayerNorm::new(&mut store, &p("norm_out".into()), cfg.base);
        let conv_out = Conv::zeroed2d(&mut store, &p("conv_out".into()), cfg.base, cfg.c_z, 3);
        Ok(Self { cfg, params: store, gsfm, temb1, temb2, conv_in, down, downsample, mid, up, upsample, norm_out, conv_out })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn gsfm(&self) -> &Gsfm {
        &self.gsfm
    }

    /// Parameters fed only by the named ablatable component.
    pub fn branch_params(&self, branch: &str) -> Vec<ParamId> {
        match branch {
            "geometric" => self.gsfm.geometric_params(),
            "semantic" => self.gsfm.semantic_params(),
            "semantic_tokens" => self.gsfm.semantic_token_params(),
            _ => Vec::new(),
        }
    }

    /// `[N, H, W]` maps for the input concat, `[N, C_emb]` context tokens.
    fn conditioning<'a>(
        &self,
        cx: Ctx<'a, T>,
        cond: Option<Condition<'_, 'a, T>>,
    ) -> Result<(Option<Var<'a, T>>, Var<'a, T>), DiffusionError> {
        let (h, w) = self.cfg.layout_hw();
        let n = self.cfg.num_classes;
        match cond {
            Some(c) => {
                let maps = self.cfg.flags.use_mask_concat.then(|| cx.constant(concat_trimask(c.set).to_tensor()));
                let fused = self.gsfm.forward_vars(cx, c.set, c.planes)?.fused;
                Ok((maps, fused))
            }
            None => {
                let maps = self.cfg.flags.use_mask_concat.then(|| cx.constant(Tensor::zeros(&[n, h, w])));
                Ok((maps, cx.constant(Tensor::zeros(&[n, self.cfg.c_emb]))))
            }
        }
    }

    /// Predicted clean latent `[C_z, H, W]` for `x_t` at step `t`;
    /// `cond = None` is the unconditional path.
    pub fn forward_vars<'a>(
        &self,
        cx: Ctx<'a, T>,
        x_t: Var<'a, T>,
        t: usize,
        cond: Option<Condition<'_, 'a, T>>,
    ) -> Result<Var<'a, T>, DiffusionError> {
        let (h, w) = self.cfg.layout_hw();
        if x_t.shape() != [self.cfg.c_z, h, w] {
            return Err(DiffusionError::Shape(format!("latent {:?}, expected {:?}", x_t.shape(), [self.cfg.c_z, h, w])));
        }
        if let Some(c) = &cond {
            if c.set.dims() != self.cfg.mask_dims || c.set.num_classes() as usize != self.cfg.num_classes {
                return Err(DiffusionError::Shape(format!(
                    "mask set {} classes {:?}, model {} classes {:?}",
                    c.set.num_classes(),
                    c.set.dims(),
                    self.cfg.num_classes,
                    self.cfg.mask_dims
                )));
            }
        }
        let (maps, context) = self.conditioning(cx, cond)?;
        let input = match maps {
            Some(m) => x_t.tape().concat(&[x_t, m], 0)?,
            None => x_t,
        };
        let te = timestep_embedding(t, self.cfg.temb).into_iter().map(T::from_f64_lossy).collect();
        let te = cx.constant(Tensor::new(&[1, self.cfg.temb], te)?);
        let temb = self.temb2.forward(cx, self.temb1.forward(cx, te)?.gelu())?.gelu();

        let mut x = self.conv_in.forward(cx, input)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (l, level) in self.down.iter().enumerate() {
            x = level.forward(cx, x, temb, context)?;
            skips.push(x);
            if let Some(ds) = self.downsample.get(l) {
                x = ds.forward(cx, x)?;
            }
        }
        x = self.mid.forward(cx, x, temb)?;
        for (i, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            x = x.tape().concat(&[x, skip], 0)?;
            x = level.forward(cx, x, temb, context)?;
            if let Some(us) = self.upsample.get(i) {
                x = us.forward(cx, x.upsample2()?)?;
            }
        }
        let out = channel_norm(cx, &self.norm_out, x)?.gelu();
        Ok(self.conv_out.forward(cx, out)?)
    }

    /// Tape-free prediction; `planes` are the semantic-token source when conditioned.
    pub fn predict(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        cond: Option<(&SceneMaskSet, [&Tensor<T>; 3])>,
    ) -> Result<Tensor<T>, DiffusionError> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.params);
        let cond = cond.map(|(set, planes)| Condition { set, planes: planes.map(|p| cx.constant(p.clone())) });
        let out = self.forward_vars(cx, cx.constant(x_t.clone()), t, cond)?;
        Ok((*out.value()).clone())
    }
}
