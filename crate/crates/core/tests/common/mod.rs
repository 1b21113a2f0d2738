#![allow(dead_code)]

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssed::numerics::{nn, GatherTaps, NumericsError, Tape, Tensor, Var};

pub type Primitive = Box<dyn for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>, NumericsError>>;

pub struct Case {
    pub name: &'static str,
    pub f: Primitive,
    pub point: Tensor<f64>,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// One randomly shaped instance of every differentiable primitive for `seed`.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let r = rng.random_range(2..5usize);
    let c = rng.random_range(2..6usize);
    let o = rng.random_range(2..5usize);

    let w = randn(&[o, c], &mut rng);
    let b = randn(&[o], &mut rng);
    cases.push(Case {
        name: "linear (input)",
        f: Box::new(move |t, x| x.linear(t.constant(w.clone()), Some(t.constant(b.clone())))),
        point: randn(&[r, c], &mut rng),
    });
    let x = randn(&[r, c], &mut rng);
    cases.push(Case {
        name: "linear (weight)",
        f: Box::new(move |t, w| t.constant(x.clone()).linear(w, None)),
        point: randn(&[o, c], &mut rng),
    });

    // conv3d with a random stride per axis
    let cin = rng.random_range(1..3usize);
    let cout = rng.random_range(1..3usize);
    let dims = [rng.random_range(3..6usize), rng.random_range(3..6usize), rng.random_range(2..4usize)];
    let stride = [rng.random_range(1..3usize), rng.random_range(1..3usize), 1];
    let kernel = randn(&[cout, cin, 3, 3, 3], &mut rng);
    let kb = randn(&[cout], &mut rng);
    cases.push(Case {
        name: "conv3d (input)",
        f: Box::new(move |t, x| x.conv3d(t.constant(kernel.clone()), Some(t.constant(kb.clone())), stride, [1, 1, 1])),
        point: randn(&[cin, dims[0], dims[1], dims[2]], &mut rng),
    });
    let input = randn(&[cin, dims[0], dims[1], dims[2]], &mut rng);
    cases.push(Case {
        name: "conv3d (kernel)",
        f: Box::new(move |t, w| t.constant(input.clone()).conv3d(w, None, stride, [1, 1, 1])),
        point: randn(&[cout, cin, 3, 3, 3], &mut rng),
    });
    let k2 = randn(&[cout, cin, 3, 3], &mut rng);
    cases.push(Case {
        name: "conv2d stride 2 (input)",
        f: Box::new(move |t, x| x.conv2d(t.constant(k2.clone()), None, 2, 1)),
        point: randn(&[cin, dims[0], dims[1]], &mut rng),
    });

    cases.push(Case { name: "gelu", f: Box::new(|_, x| Ok(x.gelu())), point: randn(&[r, c], &mut rng) });
    cases.push(Case { name: "softmax", f: Box::new(|_, x| Ok(x.softmax())), point: randn(&[r, c], &mut rng) });

    let gamma = randn(&[c], &mut rng);
    let beta = randn(&[c], &mut rng);
    cases.push(Case {
        name: "layer_norm (input)",
        f: Box::new(move |t, x| x.layer_norm(Some(t.constant(gamma.clone())), Some(t.constant(beta.clone())))),
        point: randn(&[r, c], &mut rng),
    });
    let xs = randn(&[r, c], &mut rng);
    cases.push(Case {
        name: "layer_norm (gamma)",
        f: Box::new(move |t, g| t.constant(xs.clone()).layer_norm(Some(g), None)),
        point: randn(&[c], &mut rng),
    });

    let kv = randn(&[o, c], &mut rng);
    cases.push(Case {
        name: "attention",
        f: Box::new(move |t, q| {
            let kv = t.constant(kv.clone());
            nn::scaled_dot_product(q, kv, kv, c)
        }),
        point: randn(&[r, c], &mut rng),
    });
    let q = randn(&[r, c], &mut rng);
    cases.push(Case {
        name: "attention (keys/values)",
        f: Box::new(move |t, kv| nn::scaled_dot_product(t.constant(q.clone()), kv, kv, c)),
        point: randn(&[o, c], &mut rng),
    });

    let axis = rng.random_range(0..3usize);
    cases.push(Case {
        name: "axis_mean",
        f: Box::new(move |_, x| x.axis_mean(axis)),
        point: randn(&[c, r, o], &mut rng),
    });
    let mask: Rc<Vec<bool>> = Rc::new((0..r * o).map(|i| i % 3 != 1).collect());
    cases.push(Case {
        name: "masked_mean",
        f: Box::new(move |_, x| x.masked_mean(Rc::clone(&mask))),
        point: randn(&[c, r, o], &mut rng),
    });
    let idx: Vec<usize> = (0..5).map(|_| rng.random_range(0..r)).collect();
    cases.push(Case {
        name: "embedding",
        f: Box::new(move |_, t| t.embedding(&idx)),
        point: randn(&[r, c], &mut rng),
    });

    let other = randn(&[r, c], &mut rng);
    let other2 = other.clone();
    cases.push(Case {
        name: "add",
        f: Box::new(move |t, x| x.add(t.constant(other.clone()))),
        point: randn(&[r, c], &mut rng),
    });
    cases.push(Case { name: "mul (self)", f: Box::new(|_, x| x.mul(x)), point: randn(&[r, c], &mut rng) });
    cases.push(Case {
        name: "sub/scale",
        f: Box::new(move |t, x| Ok(x.sub(t.constant(other2.clone()))?.scale(-1.7))),
        point: randn(&[r, c], &mut rng),
    });
    let bias = randn(&[c], &mut rng);
    cases.push(Case {
        name: "add_trailing (bias)",
        f: Box::new(move |t, b| t.constant(bias.clone().reshape(&[1, c]).unwrap()).reshape(&[1, c])?.add_trailing(b)),
        point: randn(&[c], &mut rng),
    });
    let fm = randn(&[c, r, o], &mut rng);
    cases.push(Case {
        name: "add_leading (bias)",
        f: Box::new(move |t, b| t.constant(fm.clone()).add_leading(b)),
        point: randn(&[c], &mut rng),
    });
    let tail = randn(&[r, o], &mut rng);
    cases.push(Case {
        name: "concat",
        f: Box::new(move |t, x| {
            let y = t.constant(tail.clone());
            Ok(t.concat(&[x, y, x], 1)?.gelu())
        }),
        point: randn(&[r, c], &mut rng),
    });
    cases.push(Case {
        name: "slice",
        f: Box::new(move |_, x| x.slice(1, 1, c - 1)),
        point: randn(&[r, c, 2], &mut rng),
    });
    cases.push(Case { name: "transpose", f: Box::new(|_, x| x.transpose()), point: randn(&[r, c], &mut rng) });
    cases.push(Case { name: "upsample2", f: Box::new(|_, x| x.upsample2()), point: randn(&[c, r, o], &mut rng) });
    let rhs = randn(&[o, c], &mut rng);
    cases.push(Case {
        name: "matmul (a·bᵀ)",
        f: Box::new(move |t, a| a.matmul_t(t.constant(rhs.clone()), false, true)),
        point: randn(&[r, c], &mut rng),
    });
    let lhs = randn(&[c, r], &mut rng);
    cases.push(Case {
        name: "matmul (aᵀ·b) wrt b",
        f: Box::new(move |t, b| t.constant(lhs.clone()).matmul_t(b, true, false)),
        point: randn(&[c, o], &mut rng),
    });
    let target = randn(&[r, c], &mut rng);
    cases.push(Case {
        name: "mse",
        f: Box::new(move |t, x| x.mse(t.constant(target.clone()))),
        point: randn(&[r, c], &mut rng),
    });
    let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    let labels2 = labels.clone();
    cases.push(Case {
        name: "cross_entropy",
        f: Box::new(move |_, x| x.cross_entropy(&labels)),
        point: randn(&[r, c], &mut rng),
    });
    cases.push(Case {
        name: "lovasz_softmax",
        f: Box::new(move |_, x| x.softmax().lovasz_softmax(&labels2)),
        point: randn(&[r, c], &mut rng),
    });
    let (a, bb) = (rng.random_range(2..4usize), rng.random_range(2..4usize));
    let taps = Rc::new(GatherTaps {
        points: 4,
        taps: (0..4)
            .map(|_| {
                (0..3)
                    .map(|_| (rng.random_range(0..2usize), rng.random_range(0..a * bb), rng.random_range(-1.0..1.0)))
                    .collect()
            })
            .collect(),
    });
    let second = randn(&[c, a, bb], &mut rng);
    cases.push(Case {
        name: "gather",
        f: Box::new(move |t, x| t.gather(&[x, t.constant(second.clone())], Rc::clone(&taps))),
        point: randn(&[c, a, bb], &mut rng),
    });
    cases.push(Case { name: "mean/sum", f: Box::new(|_, x| Ok(x.mean().add(x.sum())?)), point: randn(&[r, c], &mut rng) });
    cases
}
