use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{Element, Tensor};
use super::{NumericsError, Result, LAYER_NORM_EPS};

/// Records operations so that gradients can be propagated in reverse.
///
/// Every value created through the tape is kept alive until the tape is
/// dropped; a tape is meant to live for one forward/backward pass.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<usize, usize>>,
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Geometry of a 3D convolution over a `[C, D0, D1, D2]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn output(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (self.input[a] + 2 * self.padding[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    fn rows(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.stride[a] == 0 {
                return Err(NumericsError::InvalidGeometry(format!("stride 0 on axis {a}")));
            }
            if self.kernel[a] == 0 || self.padding[a] >= self.kernel[a] {
                return Err(NumericsError::InvalidGeometry(format!(
                    "kernel {} with padding {} on axis {a}",
                    self.kernel[a], self.padding[a]
                )));
            }
            if self.input[a] + 2 * self.padding[a] < self.kernel[a] {
                return Err(NumericsError::InvalidGeometry(format!(
                    "input extent {} smaller than kernel {} on axis {a}",
                    self.input[a], self.kernel[a]
                )));
            }
        }
        Ok(())
    }
}

/// Sparse linear read-out from `[C, S]` source tensors.
///
/// Output row `p` is `Σ weight · source[src][:, offset]` over the taps of `p`.
#[derive(Clone, Debug)]
pub struct GatherTaps<T> {
    pub points: usize,
    pub taps: Vec<Vec<(usize, usize, T)>>,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddTrailing { x: usize, b: usize },
    AddLeading { x: usize, b: usize },
    MatMul { a: usize, b: usize, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, inp: usize, out: usize },
    Gelu { x: usize, slope: Vec<T> },
    Softmax(usize),
    LayerNorm { x: usize, gamma: Option<usize>, beta: Option<usize>, xhat: Vec<T>, inv_std: Vec<T> },
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeometry, cols: Vec<T> },
    AxisMean { x: usize, axis: usize },
    MaskedMean { x: usize, mask: Rc<Vec<bool>>, count: usize },
    Embedding { table: usize, idx: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Transpose(usize),
    Upsample2(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
    Lovasz { probs: usize, grad: Vec<T> },
    Gather { sources: Vec<usize>, taps: Rc<GatherTaps<T>> },
}

/// Gradients produced by [`Tape::backward`] for every leaf that requires them.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<usize, usize>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    /// Gradient of a bound parameter, `None` if it did not take part in the graph.
    pub fn param(&self, index: usize) -> Option<&Tensor<T>> {
        self.params.get(&index).and_then(|node| self.leaves.get(node))
    }

    pub fn param_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.keys().copied()
    }
}

/// `(outer, axis_len, inner)` view of a shape around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct GeluConsts<T> {
    c: T,
    k: T,
    k3: T,
    half: T,
    two: T,
}

impl<T: Element> GeluConsts<T> {
    fn new() -> Self {
        Self {
            c: T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
            k: T::from_f64_lossy(0.044715),
            k3: T::from_f64_lossy(3.0 * 0.044715),
            half: T::from_f64_lossy(0.5),
            two: T::from_f64_lossy(2.0),
        }
    }

    /// Slope at `x` given `th = tanh(c (x + k x³))`.
    fn derivative(&self, x: T, th: T) -> T {
        let one = T::one();
        self.half * (one + th) + self.half * x * (one - th * th) * self.c * (one + self.k3 * x * x)
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let [d0, d1, d2] = g.input;
    let [k0, k1, k2] = g.kernel;
    let [s0, s1, s2] = g.stride;
    let [p0, p1, p2] = g.padding;
    let [o0n, o1n, o2n] = g.output();
    let on = o0n * o1n * o2n;
    let mut cols = vec![T::zero(); g.rows() * on];
    let mut row = 0;
    for c in 0..g.in_channels {
        for a in 0..k0 {
            for b in 0..k1 {
                for e in 0..k2 {
                    let dst = &mut cols[row * on..(row + 1) * on];
                    for o0 in 0..o0n {
                        let i0 = (o0 * s0 + a) as isize - p0 as isize;
                        if i0 < 0 || i0 >= d0 as isize {
                            continue;
                        }
                        for o1 in 0..o1n {
                            let i1 = (o1 * s1 + b) as isize - p1 as isize;
                            if i1 < 0 || i1 >= d1 as isize {
                                continue;
                            }
                            let src_base = ((c * d0 + i0 as usize) * d1 + i1 as usize) * d2;
                            let dst_base = (o0 * o1n + o1) * o2n;
                            for o2 in 0..o2n {
                                let i2 = (o2 * s2 + e) as isize - p2 as isize;
                                if i2 >= 0 && i2 < d2 as isize {
                                    dst[dst_base + o2] = x[src_base + i2 as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let [d0, d1, d2] = g.input;
    let [k0, k1, k2] = g.kernel;
    let [s0, s1, s2] = g.stride;
    let [p0, p1, p2] = g.padding;
    let [o0n, o1n, o2n] = g.output();
    let on = o0n * o1n * o2n;
    let mut x = vec![T::zero(); g.in_channels * d0 * d1 * d2];
    let mut row = 0;
    for c in 0..g.in_channels {
        for a in 0..k0 {
            for b in 0..k1 {
                for e in 0..k2 {
                    let src = &cols[row * on..(row + 1) * on];
                    for o0 in 0..o0n {
                        let i0 = (o0 * s0 + a) as isize - p0 as isize;
                        if i0 < 0 || i0 >= d0 as isize {
                            continue;
                        }
                        for o1 in 0..o1n {
                            let i1 = (o1 * s1 + b) as isize - p1 as isize;
                            if i1 < 0 || i1 >= d1 as isize {
                                continue;
                            }
                            let dst_base = ((c * d0 + i0 as usize) * d1 + i1 as usize) * d2;
                            let src_base = (o0 * o1n + o1) * o2n;
                            for o2 in 0..o2n {
                                let i2 = (o2 * s2 + e) as isize - p2 as isize;
                                if i2 >= 0 && i2 < d2 as isize {
                                    x[dst_base + i2 as usize] += src[src_base + o2];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

/// Per-class Lovász-softmax value and its gradient with respect to `probs`.
///
/// `probs` is `[V, N]` row-major. Classes absent from `labels` are skipped;
/// with no class present the loss is zero.
pub(crate) fn lovasz_forward<T: Element>(probs: &[T], n: usize, labels: &[usize]) -> (T, Vec<T>) {
    let v = labels.len();
    let mut grad = vec![T::zero(); v * n];
    let mut present = Vec::new();
    for c in 0..n {
        if labels.iter().any(|&l| l == c) {
            present.push(c);
        }
    }
    if present.is_empty() {
        return (T::zero(), grad);
    }
    let inv_classes = T::one() / T::from_usize(present.len()).unwrap();
    let mut total = T::zero();
    let mut order: Vec<usize> = Vec::with_capacity(v);
    let mut errors = vec![T::zero(); v];
    let mut jac = vec![T::zero(); v];
    for &c in &present {
        for i in 0..v {
            let p = probs[i * n + c];
            errors[i] = if labels[i] == c { T::one() - p } else { p };
        }
        order.clear();
        order.extend(0..v);
        // descending by error; stable so equal errors keep voxel order
        order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap_or(std::cmp::Ordering::Equal));
        let gts = labels.iter().filter(|&&l| l == c).count();
        let gts_t = T::from_usize(gts).unwrap();
        let mut cum_fg = 0usize;
        let mut prev = T::zero();
        for (pos, &i) in order.iter().enumerate() {
            if labels[i] == c {
                cum_fg += 1;
            }
            let cum_bg = pos + 1 - cum_fg;
            let inter = gts_t - T::from_usize(cum_fg).unwrap();
            let union = gts_t + T::from_usize(cum_bg).unwrap();
            let jaccard = T::one() - inter / union;
            jac[pos] = jaccard - prev;
            prev = jaccard;
        }
        for (pos, &i) in order.iter().enumerate() {
            total += errors[i] * jac[pos];
            let sign = if labels[i] == c { -T::one() } else { T::one() };
            grad[i * n + c] = sign * jac[pos] * inv_classes;
        }
    }
    (total * inv_classes, grad)
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A value that does not receive gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds parameter `index` as a gradient leaf, reusing the node on repeated use.
    pub(crate) fn bind_param(&self, index: usize, value: &Tensor<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&index) {
            return Var { tape: self, id };
        }
        let var = self.leaf(value.clone());
        self.params.borrow_mut().insert(index, var.id);
        var
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(NumericsError::shape("backward", format!("root must be scalar, got {:?}", root_value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(root_value.shape(), T::one()));
        let mut leaves = HashMap::new();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(id, g);
            } else {
                propagate(&nodes, id, &g, &mut grads);
            }
        }
        Ok(Gradients { leaves, params: self.params.borrow().clone() })
    }

    fn check_same(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumericsError::shape(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        Ok(())
    }

    fn binary(&self, a: usize, b: usize, op: Op<T>, f: impl Fn(T, T) -> T) -> Var<'_, T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data).expect("shape preserved");
        let rg = self.requires(a) || self.requires(b);
        self.push(out, op, rg)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| NumericsError::shape("concat", "no inputs"))?;
        let base = first.value();
        if axis >= base.rank() {
            return Err(NumericsError::shape("concat", format!("axis {axis} on rank {}", base.rank())));
        }
        let mut total = 0;
        for p in parts {
            let v = p.value();
            let ok = v.rank() == base.rank()
                && v.shape().iter().zip(base.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(NumericsError::shape("concat", format!("{:?} vs {:?} on axis {axis}", v.shape(), base.shape())));
            }
            total += v.shape()[axis];
        }
        let mut shape = base.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|p| self.requires(p.id));
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }, rg))
    }

    /// Sparse weighted read-out from `[C, S]` sources; output is `[points, C]`.
    pub fn gather<'t>(&'t self, sources: &[Var<'t, T>], taps: Rc<GatherTaps<T>>) -> Result<Var<'t, T>> {
        let values: Vec<_> = sources.iter().map(|s| s.value()).collect();
        let channels = values.first().ok_or_else(|| NumericsError::shape("gather", "no sources"))?.shape()[0];
        for v in &values {
            if v.rank() < 2 || v.shape()[0] != channels {
                return Err(NumericsError::shape("gather", format!("source {:?} needs leading C={channels}", v.shape())));
            }
        }
        if taps.taps.len() != taps.points {
            return Err(NumericsError::shape("gather", "tap table length differs from point count"));
        }
        let spatial: Vec<usize> = values.iter().map(|v| v.numel() / channels).collect();
        let mut out = vec![T::zero(); taps.points * channels];
        for (p, row_taps) in taps.taps.iter().enumerate() {
            let row = &mut out[p * channels..(p + 1) * channels];
            for &(src, offset, w) in row_taps {
                if src >= values.len() || offset >= spatial[src] {
                    return Err(NumericsError::shape("gather", format!("tap ({src}, {offset}) out of range")));
                }
                let data = values[src].data();
                let s = spatial[src];
                for (c, r) in row.iter_mut().enumerate() {
                    *r += w * data[c * s + offset];
                }
            }
        }
        let rg = sources.iter().any(|s| self.requires(s.id));
        let out = Tensor::new(&[taps.points, channels], out)?;
        Ok(self.push(out, Op::Gather { sources: sources.iter().map(|s| s.id).collect(), taps }, rg))
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.tape.check_same("add", self.id, other.id)?;
        Ok(self.tape.binary(self.id, other.id, Op::Add(self.id, other.id), |a, b| a + b))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.tape.check_same("sub", self.id, other.id)?;
        Ok(self.tape.binary(self.id, other.id, Op::Sub(self.id, other.id), |a, b| a - b))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.tape.check_same("mul", self.id, other.id)?;
        Ok(self.tape.binary(self.id, other.id, Op::Mul(self.id, other.id), |a, b| a * b))
    }

    pub fn scale(self, s: f64) -> Self {
        let s = T::from_f64_lossy(s);
        let out = self.value().map(|v| v * s);
        self.tape.push(out, Op::Scale(self.id, s), self.requires_grad())
    }

    /// `x[..., C] + b[C]`, broadcasting `b` over the leading axes.
    pub fn add_trailing(self, b: Var<'t, T>) -> Result<Self> {
        let (x, bv) = (self.value(), b.value());
        let c = *x.shape().last().unwrap();
        if bv.numel() != c {
            return Err(NumericsError::shape("add_trailing", format!("{:?} + {:?}", x.shape(), bv.shape())));
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.requires_grad() || b.requires_grad();
        Ok(self.tape.push(out, Op::AddTrailing { x: self.id, b: b.id }, rg))
    }

    /// `x[C, ...] + b[C]`, broadcasting `b` over the trailing axes.
    pub fn add_leading(self, b: Var<'t, T>) -> Result<Self> {
        let (x, bv) = (self.value(), b.value());
        let c = x.shape()[0];
        if bv.numel() != c {
            return Err(NumericsError::shape("add_leading", format!("{:?} + {:?}", x.shape(), bv.shape())));
        }
        let inner = x.numel() / c;
        let mut out = (*x).clone();
        for (ch, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bb = bv.data()[ch];
            for o in chunk {
                *o += bb;
            }
        }
        let rg = self.requires_grad() || b.requires_grad();
        Ok(self.tape.push(out, Op::AddLeading { x: self.id, b: b.id }, rg))
    }

    /// 2D matrix product `op(self) · op(other)` with optional transposes.
    pub fn matmul_t(self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 {
            return Err(NumericsError::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let (m, k) = if ta { (a.shape()[1], a.shape()[0]) } else { (a.shape()[0], a.shape()[1]) };
        let (k2, n) = if tb { (b.shape()[1], b.shape()[0]) } else { (b.shape()[0], b.shape()[1]) };
        if k != k2 {
            return Err(NumericsError::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), ta, b.data(), tb, &mut out, T::zero());
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new(&[m, n], out)?, Op::MatMul { a: self.id, b: other.id, ta, tb, m, k, n }, rg))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    /// Affine map over the last axis: `x[.., in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Self> {
        let (x, wv) = (self.value(), w.value());
        let inp = *x.shape().last().unwrap();
        if wv.rank() != 2 || wv.shape()[1] != inp {
            return Err(NumericsError::shape("linear", format!("input {:?}, weight {:?}", x.shape(), wv.shape())));
        }
        let out_dim = wv.shape()[0];
        let rows = x.numel() / inp;
        let mut out = vec![T::zero(); rows * out_dim];
        T::gemm(rows, inp, out_dim, x.data(), false, wv.data(), true, &mut out, T::zero());
        if let Some(b) = b {
            let bv = b.value();
            if bv.numel() != out_dim {
                return Err(NumericsError::shape("linear", format!("bias {:?} for {out_dim} outputs", bv.shape())));
            }
            for row in out.chunks_mut(out_dim) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        let op = Op::Linear { x: self.id, w: w.id, b: b.map(|b| b.id), rows, inp, out: out_dim };
        Ok(self.tape.push(Tensor::new(&shape, out)?, op, rg))
    }

    pub fn gelu(self) -> Self {
        let k = GeluConsts::<T>::new();
        let x = self.value();
        let (two_c, kk) = (k.two * k.c, k.k);
        let mut e: Vec<T> = x.data().iter().map(|&v| two_c * (v + kk * v * v * v)).collect();
        T::exp_slice(&mut e);
        // with e = exp(2u): x·(1 + tanh u)/2 = x - x/(e + 1)
        let inv: Vec<T> = e.iter().map(|&ev| T::one() / (ev + T::one())).collect();
        let out: Vec<T> = x.data().iter().zip(&inv).map(|(&v, &q)| v - v * q).collect();
        let slope = if self.requires_grad() {
            x.data().iter().zip(&inv).map(|(&v, &q)| k.derivative(v, T::one() - k.two * q)).collect()
        } else {
            Vec::new()
        };
        let out = Tensor::new(x.shape(), out).expect("gelu shape");
        self.tape.push(out, Op::Gelu { x: self.id, slope }, self.requires_grad())
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Self {
        let x = self.value();
        let c = *x.shape().last().unwrap();
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.tape.push(out, Op::Softmax(self.id), self.requires_grad())
    }

    /// Layer normalization over the last axis with optional affine parameters.
    pub fn layer_norm(self, gamma: Option<Var<'t, T>>, beta: Option<Var<'t, T>>) -> Result<Self> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        for p in gamma.iter().chain(beta.iter()) {
            if p.value().numel() != d {
                return Err(NumericsError::shape("layer_norm", format!("affine {:?} for width {d}", p.shape())));
            }
        }
        let rows = x.numel() / d;
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let dt = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = g.value();
            for row in out.chunks_mut(d) {
                for (o, &gg) in row.iter_mut().zip(gv.data()) {
                    *o *= gg;
                }
            }
        }
        if let Some(b) = beta {
            let bv = b.value();
            for row in out.chunks_mut(d) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let rg = self.requires_grad()
            || gamma.is_some_and(|g| g.requires_grad())
            || beta.is_some_and(|b| b.requires_grad());
        let op = Op::LayerNorm { x: self.id, gamma: gamma.map(|g| g.id), beta: beta.map(|b| b.id), xhat, inv_std };
        Ok(self.tape.push(Tensor::new(x.shape(), out)?, op, rg))
    }

    /// 3D convolution of a `[Cin, D0, D1, D2]` input with a `[Cout, Cin, K0, K1, K2]` kernel.
    pub fn conv3d(self, w: Var<'t, T>, b: Option<Var<'t, T>>, stride: [usize; 3], padding: [usize; 3]) -> Result<Self> {
        let (x, wv) = (self.value(), w.value());
        if x.rank() != 4 || wv.rank() != 5 || wv.shape()[1] != x.shape()[0] {
            return Err(NumericsError::shape("conv3d", format!("input {:?}, kernel {:?}", x.shape(), wv.shape())));
        }
        let geom = ConvGeometry {
            in_channels: x.shape()[0],
            out_channels: wv.shape()[0],
            input: [x.shape()[1], x.shape()[2], x.shape()[3]],
            kernel: [wv.shape()[2], wv.shape()[3], wv.shape()[4]],
            stride,
            padding,
        };
        geom.validate()?;
        let o = geom.output();
        let on: usize = o.iter().product();
        let cols = im2col(x.data(), &geom);
        let mut out = vec![T::zero(); geom.out_channels * on];
        T::gemm(geom.out_channels, geom.rows(), on, wv.data(), false, &cols, false, &mut out, T::zero());
        if let Some(b) = b {
            let bv = b.value();
            if bv.numel() != geom.out_channels {
                return Err(NumericsError::shape("conv3d", format!("bias {:?}", bv.shape())));
            }
            for (ch, chunk) in out.chunks_mut(on).enumerate() {
                let bb = bv.data()[ch];
                for v in chunk {
                    *v += bb;
                }
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        let out = Tensor::new(&[geom.out_channels, o[0], o[1], o[2]], out)?;
        Ok(self.tape.push(out, Op::Conv { x: self.id, w: w.id, b: b.map(|b| b.id), geom, cols }, rg))
    }

    /// 2D convolution of `[Cin, H, W]` with a `[Cout, Cin, Kh, Kw]` kernel.
    pub fn conv2d(self, w: Var<'t, T>, b: Option<Var<'t, T>>, stride: usize, padding: usize) -> Result<Self> {
        let x = self.shape();
        let ws = w.shape();
        if x.len() != 3 || ws.len() != 4 {
            return Err(NumericsError::shape("conv2d", format!("input {x:?}, kernel {ws:?}")));
        }
        let x4 = self.reshape(&[x[0], x[1], x[2], 1])?;
        let w5 = w.reshape(&[ws[0], ws[1], ws[2], ws[3], 1])?;
        let y = x4.conv3d(w5, b, [stride, stride, 1], [padding, padding, 0])?;
        let ys = y.shape();
        y.reshape(&[ys[0], ys[1], ys[2]])
    }

    /// Mean over one axis, removing it.
    pub fn axis_mean(self, axis: usize) -> Result<Self> {
        let x = self.value();
        if axis >= x.rank() || x.rank() < 2 {
            return Err(NumericsError::shape("axis_mean", format!("axis {axis} of {:?}", x.shape())));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let inv = T::one() / T::from_usize(len).unwrap();
        // shifted by the first slice, so identical slices average exactly
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let base = &x.data()[o * len * inner..(o * len + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 1..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for ((d, &s), &b) in dst.iter_mut().zip(src).zip(base) {
                    *d += s - b;
                }
            }
            for (d, &b) in dst.iter_mut().zip(base) {
                *d = b + *d * inv;
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.tape.push(Tensor::new(&shape, out)?, Op::AxisMean { x: self.id, axis }, self.requires_grad()))
    }

    /// Mean of `[C, ...]` over the spatial cells where `mask` is set; zero when the mask is empty.
    pub fn masked_mean(self, mask: Rc<Vec<bool>>) -> Result<Self> {
        let x = self.value();
        let c = x.shape()[0];
        let s = x.numel() / c;
        if mask.len() != s {
            return Err(NumericsError::shape("masked_mean", format!("mask of {} cells for {:?}", mask.len(), x.shape())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut out = vec![T::zero(); c];
        if count > 0 {
            let inv = T::one() / T::from_usize(count).unwrap();
            for (ch, o) in out.iter_mut().enumerate() {
                let row = &x.data()[ch * s..(ch + 1) * s];
                let sum: T = row.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(&v, _)| v).sum();
                *o = sum * inv;
            }
        }
        Ok(self.tape.push(Tensor::new(&[c], out)?, Op::MaskedMean { x: self.id, mask, count }, self.requires_grad()))
    }

    /// Row lookup into an `[N, C]` table.
    pub fn embedding(self, idx: &[usize]) -> Result<Self> {
        let t = self.value();
        if t.rank() != 2 {
            return Err(NumericsError::shape("embedding", format!("table {:?}", t.shape())));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(NumericsError::shape("embedding", format!("index {i} for {n} rows")));
            }
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.tape.push(out, Op::Embedding { table: self.id, idx: idx.to_vec() }, self.requires_grad()))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let x = self.value();
        if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
            return Err(NumericsError::shape("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape())));
        }
        let (outer, alen, inner) = split_axis(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape.push(Tensor::new(&shape, out)?, Op::Slice { x: self.id, axis, start }, self.requires_grad()))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Transpose of a rank-2 value.
    pub fn transpose(self) -> Result<Self> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(NumericsError::shape("transpose", format!("{:?}", x.shape())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        Ok(self.tape.push(Tensor::new(&[c, r], out)?, Op::Transpose(self.id), self.requires_grad()))
    }

    /// Nearest-neighbour ×2 upsampling of `[C, H, W]`.
    pub fn upsample2(self) -> Result<Self> {
        let x = self.value();
        if x.rank() != 3 {
            return Err(NumericsError::shape("upsample2", format!("{:?}", x.shape())));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(ch * 2 * h + i) * 2 * w + j] = x.data()[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.tape.push(Tensor::new(&[c, 2 * h, 2 * w], out)?, Op::Upsample2(self.id), self.requires_grad()))
    }

    pub fn sum(self) -> Self {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Self {
        let x = self.value();
        let out = Tensor::scalar(x.sum() / T::from_usize(x.numel()).unwrap());
        self.tape.push(out, Op::Mean(self.id), self.requires_grad())
    }

    /// Mean-squared error between two same-shaped values.
    pub fn mse(self, target: Var<'t, T>) -> Result<Self> {
        self.tape.check_same("mse", self.id, target.id)?;
        let (a, b) = (self.value(), target.value());
        let n = T::from_usize(a.numel()).unwrap();
        let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.requires_grad() || target.requires_grad();
        Ok(self.tape.push(Tensor::scalar(s / n), Op::Mse(self.id, target.id), rg))
    }

    /// Mean per-row cross-entropy of `[P, N]` logits against class ids.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Self> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(NumericsError::shape("cross_entropy", format!("logits {:?}, {} labels", x.shape(), labels.len())));
        }
        let n = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(NumericsError::shape("cross_entropy", format!("label {bad} with {n} classes")));
        }
        let mut probs = x.data().to_vec();
        let mut loss = T::zero();
        for ((row, logits), &label) in probs.chunks_mut(n).zip(x.data().chunks(n)).zip(labels) {
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &l) in row.iter_mut().zip(logits) {
                *p = (l - max).exp();
                sum += *p;
            }
            for p in row.iter_mut() {
                *p = *p / sum;
            }
            loss += sum.ln() - (logits[label] - max);
        }
        let p = T::from_usize(labels.len()).unwrap();
        let op = Op::CrossEntropy { logits: self.id, labels: labels.to_vec(), probs };
        Ok(self.tape.push(Tensor::scalar(loss / p), op, self.requires_grad()))
    }

    /// Lovász-softmax over `[V, N]` class probabilities, averaged over classes present in `labels`.
    pub fn lovasz_softmax(self, labels: &[usize]) -> Result<Self> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(NumericsError::shape("lovasz_softmax", format!("probs {:?}, {} labels", x.shape(), labels.len())));
        }
        let n = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(NumericsError::shape("lovasz_softmax", format!("label {bad} with {n} classes")));
        }
        for (i, row) in x.data().chunks(n).enumerate() {
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > T::from_f64_lossy(1e-4) || !s.is_finite() {
                return Err(NumericsError::shape("lovasz_softmax", format!("row {i} sums to {:?}, not 1", s.as_f64())));
            }
        }
        let (loss, grad) = lovasz_forward(x.data(), n, labels);
        Ok(self.tape.push(Tensor::scalar(loss), Op::Lovasz { probs: self.id, grad }, self.requires_grad()))
    }
}

fn acc<T: Element>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn acc_with<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    f: impl FnOnce() -> Tensor<T>,
) {
    if nodes[id].requires_grad {
        let g = f();
        acc(nodes, grads, id, g);
    }
}

fn propagate<T: Element>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_with(nodes, grads, *a, || g.clone());
            acc_with(nodes, grads, *b, || g.clone());
        }
        Op::Sub(a, b) => {
            acc_with(nodes, grads, *a, || g.clone());
            acc_with(nodes, grads, *b, || g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc_with(nodes, grads, *a, || {
                let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                Tensor::new(g.shape(), d).unwrap()
            });
            acc_with(nodes, grads, *b, || {
                let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                Tensor::new(g.shape(), d).unwrap()
            });
        }
        Op::Scale(a, s) => acc_with(nodes, grads, *a, || g.map(|v| v * *s)),
        Op::AddTrailing { x, b } => {
            acc_with(nodes, grads, *x, || g.clone());
            acc_with(nodes, grads, *b, || {
                let bv = val(*b);
                let c = bv.numel();
                let mut d = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    for (o, &v) in d.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::new(bv.shape(), d).unwrap()
            });
        }
        Op::AddLeading { x, b } => {
            acc_with(nodes, grads, *x, || g.clone());
            acc_with(nodes, grads, *b, || {
                let bv = val(*b);
                let c = bv.numel();
                let inner = g.numel() / c;
                let d = g.data().chunks(inner).map(|chunk| chunk.iter().copied().sum()).collect();
                Tensor::new(bv.shape(), d).unwrap()
            });
        }
        Op::MatMul { a, b, ta, tb, m, k, n } => {
            let (m, k, n, ta, tb) = (*m, *k, *n, *ta, *tb);
            let (va, vb) = (val(*a), val(*b));
            acc_with(nodes, grads, *a, || {
                let mut d = vec![T::zero(); m * k];
                if ta {
                    T::gemm(k, n, m, vb.data(), tb, g.data(), true, &mut d, T::zero());
                } else {
                    T::gemm(m, n, k, g.data(), false, vb.data(), !tb, &mut d, T::zero());
                }
                Tensor::new(va.shape(), d).unwrap()
            });
            acc_with(nodes, grads, *b, || {
                let mut d = vec![T::zero(); k * n];
                if tb {
                    T::gemm(n, m, k, g.data(), true, va.data(), ta, &mut d, T::zero());
                } else {
                    T::gemm(k, m, n, va.data(), !ta, g.data(), false, &mut d, T::zero());
                }
                Tensor::new(vb.shape(), d).unwrap()
            });
        }
        Op::Linear { x, w, b, rows, inp, out: od } => {
            let (rows, inp, od) = (*rows, *inp, *od);
            let (vx, vw) = (val(*x), val(*w));
            acc_with(nodes, grads, *x, || {
                let mut d = vec![T::zero(); rows * inp];
                T::gemm(rows, od, inp, g.data(), false, vw.data(), false, &mut d, T::zero());
                Tensor::new(vx.shape(), d).unwrap()
            });
            acc_with(nodes, grads, *w, || {
                let mut d = vec![T::zero(); od * inp];
                T::gemm(od, rows, inp, g.data(), true, vx.data(), false, &mut d, T::zero());
                Tensor::new(vw.shape(), d).unwrap()
            });
            if let Some(b) = b {
                acc_with(nodes, grads, *b, || {
                    let mut d = vec![T::zero(); od];
                    for row in g.data().chunks(od) {
                        for (o, &v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Tensor::new(val(*b).shape(), d).unwrap()
                });
            }
        }
        Op::Gelu { x, slope } => {
            acc_with(nodes, grads, *x, || {
                let d = g.data().iter().zip(slope).map(|(&gg, &s)| gg * s).collect();
                Tensor::new(g.shape(), d).unwrap()
            });
        }
        Op::Softmax(x) => acc_with(nodes, grads, *x, || {
            let c = *out.shape().last().unwrap();
            let mut d = vec![T::zero(); out.numel()];
            for ((drow, yrow), grow) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                let dot: T = yrow.iter().zip(grow).map(|(&y, &gg)| y * gg).sum();
                for ((o, &y), &gg) in drow.iter_mut().zip(yrow).zip(grow) {
                    *o = y * (gg - dot);
                }
            }
            Tensor::new(g.shape(), d).unwrap()
        }),
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = *out.shape().last().unwrap();
            let dt = T::from_usize(d).unwrap();
            if let Some(gm) = gamma {
                acc_with(nodes, grads, *gm, || {
                    let mut dg = vec![T::zero(); d];
                    for (grow, hrow) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gg), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *o += gg * h;
                        }
                    }
                    Tensor::new(val(*gm).shape(), dg).unwrap()
                });
            }
            if let Some(bt) = beta {
                acc_with(nodes, grads, *bt, || {
                    let mut db = vec![T::zero(); d];
                    for grow in g.data().chunks(d) {
                        for (o, &gg) in db.iter_mut().zip(grow) {
                            *o += gg;
                        }
                    }
                    Tensor::new(val(*bt).shape(), db).unwrap()
                });
            }
            acc_with(nodes, grads, *x, || {
                let gvals = gamma.map(|gm| val(gm).data().to_vec());
                let mut dx = vec![T::zero(); g.numel()];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..g.numel() / d {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    for i in 0..d {
                        dxhat[i] = match &gvals {
                            Some(gv) => grow[i] * gv[i],
                            None => grow[i],
                        };
                    }
                    let s1: T = dxhat.iter().copied().sum();
                    let s2: T = dxhat.iter().zip(hrow).map(|(&a, &h)| a * h).sum();
                    let scale = inv_std[r] / dt;
                    for i in 0..d {
                        dx[r * d + i] = scale * (dt * dxhat[i] - s1 - hrow[i] * s2);
                    }
                }
                Tensor::new(g.shape(), dx).unwrap()
            });
        }
        Op::Conv { x, w, b, geom, cols } => {
            let on: usize = geom.output().iter().product();
            let rows = geom.rows();
            acc_with(nodes, grads, *w, || {
                let mut dw = vec![T::zero(); geom.out_channels * rows];
                T::gemm(geom.out_channels, on, rows, g.data(), false, cols, true, &mut dw, T::zero());
                Tensor::new(val(*w).shape(), dw).unwrap()
            });
            if let Some(b) = b {
                acc_with(nodes, grads, *b, || {
                    let d = g.data().chunks(on).map(|c| c.iter().copied().sum()).collect();
                    Tensor::new(val(*b).shape(), d).unwrap()
                });
            }
            acc_with(nodes, grads, *x, || {
                let mut dcols = vec![T::zero(); rows * on];
                T::gemm(rows, geom.out_channels, on, val(*w).data(), true, g.data(), false, &mut dcols, T::zero());
                Tensor::new(val(*x).shape(), col2im(&dcols, geom)).unwrap()
            });
        }
        Op::AxisMean { x, axis } => acc_with(nodes, grads, *x, || {
            let vx = val(*x);
            let (outer, len, inner) = split_axis(vx.shape(), *axis);
            let inv = T::one() / T::from_usize(len).unwrap();
            let mut d = vec![T::zero(); vx.numel()];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for l in 0..len {
                    for (dst, &s) in d[(o * len + l) * inner..(o * len + l + 1) * inner].iter_mut().zip(src) {
                        *dst = s * inv;
                    }
                }
            }
            Tensor::new(vx.shape(), d).unwrap()
        }),
        Op::MaskedMean { x, mask, count } => acc_with(nodes, grads, *x, || {
            let vx = val(*x);
            let mut d = vec![T::zero(); vx.numel()];
            if *count > 0 {
                let inv = T::one() / T::from_usize(*count).unwrap();
                let s = mask.len();
                for (ch, &gg) in g.data().iter().enumerate() {
                    for (cell, &m) in mask.iter().enumerate() {
                        if m {
                            d[ch * s + cell] = gg * inv;
                        }
                    }
                }
            }
            Tensor::new(vx.shape(), d).unwrap()
        }),
        Op::Embedding { table, idx } => acc_with(nodes, grads, *table, || {
            let vt = val(*table);
            let c = vt.shape()[1];
            let mut d = vec![T::zero(); vt.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for (dst, &s) in d[i * c..(i + 1) * c].iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                    *dst += s;
                }
            }
            Tensor::new(vt.shape(), d).unwrap()
        }),
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut start = 0;
            for &p in parts {
                let vp = val(p);
                let len = vp.shape()[*axis];
                acc_with(nodes, grads, p, || {
                    let mut d = Vec::with_capacity(vp.numel());
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        d.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    Tensor::new(vp.shape(), d).unwrap()
                });
                start += len;
            }
        }
        Op::Slice { x, axis, start } => acc_with(nodes, grads, *x, || {
            let vx = val(*x);
            let (outer, alen, inner) = split_axis(vx.shape(), *axis);
            let len = out.shape()[*axis];
            let mut d = vec![T::zero(); vx.numel()];
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                d[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            Tensor::new(vx.shape(), d).unwrap()
        }),
        Op::Reshape(x) => acc_with(nodes, grads, *x, || g.clone().reshape(val(*x).shape()).unwrap()),
        Op::Transpose(x) => acc_with(nodes, grads, *x, || {
            let (r, c) = (g.shape()[0], g.shape()[1]);
            let mut d = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = g.data()[i * c + j];
                }
            }
            Tensor::new(&[c, r], d).unwrap()
        }),
        Op::Upsample2(x) => acc_with(nodes, grads, *x, || {
            let vx = val(*x);
            let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let mut d = vec![T::zero(); vx.numel()];
            for ch in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        d[(ch * h + i / 2) * w + j / 2] += g.data()[(ch * 2 * h + i) * 2 * w + j];
                    }
                }
            }
            Tensor::new(vx.shape(), d).unwrap()
        }),
        Op::Sum(x) => acc_with(nodes, grads, *x, || Tensor::full(val(*x).shape(), g.data()[0])),
        Op::Mean(x) => acc_with(nodes, grads, *x, || {
            let vx = val(*x);
            Tensor::full(vx.shape(), g.data()[0] / T::from_usize(vx.numel()).unwrap())
        }),
        Op::Mse(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let scale = g.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(va.numel()).unwrap();
            let diff: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * scale).collect();
            acc_with(nodes, grads, *b, || Tensor::new(vb.shape(), diff.iter().map(|&v| -v).collect()).unwrap());
            acc_with(nodes, grads, *a, || Tensor::new(va.shape(), diff).unwrap());
        }
        Op::CrossEntropy { logits, labels, probs } => acc_with(nodes, grads, *logits, || {
            let vl = val(*logits);
            let n = vl.shape()[1];
            let scale = g.data()[0] / T::from_usize(labels.len()).unwrap();
            let mut d = probs.clone();
            for (row, &l) in d.chunks_mut(n).zip(labels) {
                row[l] -= T::one();
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            Tensor::new(vl.shape(), d).unwrap()
        }),
        Op::Lovasz { probs, grad } => acc_with(nodes, grads, *probs, || {
            let s = g.data()[0];
            Tensor::new(val(*probs).shape(), grad.iter().map(|&v| v * s).collect()).unwrap()
        }),
        Op::Gather { sources, taps } => {
            let channels = out.shape()[1];
            let mut dsrc: Vec<Option<Vec<T>>> = sources
                .iter()
                .map(|&s| nodes[s].requires_grad.then(|| vec![T::zero(); val(s).numel()]))
                .collect();
            let spatial: Vec<usize> = sources.iter().map(|&s| val(s).numel() / channels).collect();
            for (p, row_taps) in taps.taps.iter().enumerate() {
                let grow = &g.data()[p * channels..(p + 1) * channels];
                for &(src, offset, w) in row_taps {
                    if let Some(d) = &mut dsrc[src] {
                        let s = spatial[src];
                        for (c, &gg) in grow.iter().enumerate() {
                            d[c * s + offset] += w * gg;
                        }
                    }
                }
            }
            for (k, d) in dsrc.into_iter().enumerate() {
                if let Some(d) = d {
                    let s = sources[k];
                    acc(nodes, grads, s, Tensor::new(val(s).shape(), d).unwrap());
                }
            }
        }
    }
}
