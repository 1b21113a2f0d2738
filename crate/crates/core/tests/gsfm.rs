use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssed::gsfm::{concat_trimask, pool_semantic, Ablation, Gsfm, GsfmConfig};
use ssed::numerics::{param_gradient_check, Ctx, ParamStore, Tape, Tensor};
use ssed::trimask::{decompose_scene, Plane, SceneMaskSet, Trimask};
use ssed::voxel::{generate_toy_scene, ToySceneSpec};

fn random_plane(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Plane {
    Plane::from_bits(rows, cols, (0..rows * cols).map(|_| rng.random_bool(p)).collect()).unwrap()
}

fn random_set(n: u16, dims: [usize; 3], rng: &mut ChaCha8Rng) -> SceneMaskSet {
    let [x, y, z] = dims;
    let masks = (0..n)
        .map(|c| {
            let p = rng.random_range(0.0..0.6);
            Trimask::from_planes(c, random_plane(x, y, p, rng), random_plane(x, z, p, rng), random_plane(y, z, p, rng))
                .unwrap()
        })
        .collect();
    SceneMaskSet::from_masks(masks).unwrap()
}

fn permuted(set: &SceneMaskSet, perm: &[usize]) -> SceneMaskSet {
    // class i of the result is class perm[i] of the input
    let masks = perm
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let m = &set.masks()[p];
            Trimask::from_planes(i as u16, m.xy.clone(), m.xz.clone(), m.yz.clone()).unwrap()
        })
        .collect();
    SceneMaskSet::from_masks(masks).unwrap()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn rows_equal(t: &Tensor<f64>, a: usize, b: usize) -> bool {
    let w = t.shape()[1];
    t.data()[a * w..(a + 1) * w] == t.data()[b * w..(b + 1) * w]
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let w = t.shape()[1];
    let data = perm.iter().flat_map(|&p| t.data()[p * w..(p + 1) * w].to_vec()).collect();
    Tensor::new(&[perm.len(), w], data).unwrap()
}

fn module(cfg: GsfmConfig) -> (ParamStore<f64>, Gsfm) {
    let mut store = ParamStore::new();
    let g = Gsfm::new(&mut store, "gsfm", cfg, 17).unwrap();
    (store, g)
}

#[test]
fn concatenated_map_shape_and_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let set = random_set(8, [16, 16, 8], &mut rng);
    let map = concat_trimask(&set);
    assert_eq!(map.hw(), (24, 24));
    assert_eq!(map.maps.len(), 8);
    for (m, img) in set.masks().iter().zip(&map.maps) {
        for i in 0..24 {
            for j in 0..24 {
                let expected = match (i < 16, j < 16) {
                    (true, true) => m.xy.get(i, j),
                    (true, false) => m.xz.get(i, j - 16),
                    (false, true) => m.yz.get(j, i - 16),
                    (false, false) => false,
                };
                assert_eq!(img[i * 24 + j], expected);
            }
        }
    }
    let zero = concat_trimask(&SceneMaskSet::empty(8, [16, 16, 8]));
    assert!(zero.maps.iter().flatten().all(|&b| !b));
}

#[test]
fn geometric_embedding_shares_weights_across_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = [16, 16, 8];
    let mut set = random_set(8, dims, &mut rng);
    // class 3 copies class 1, classes 5 and 6 are empty
    let mut masks = set.masks().to_vec();
    masks[3] = Trimask::from_planes(3, masks[1].xy.clone(), masks[1].xz.clone(), masks[1].yz.clone()).unwrap();
    masks[5] = Trimask::zeros(5, dims);
    masks[6] = Trimask::zeros(6, dims);
    set = SceneMaskSet::from_masks(masks).unwrap();
    let (store, g) = module(GsfmConfig::new(8, dims, 16));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let e_m = g.geometric_embed(cx, cx.constant(concat_trimask(&set).to_tensor())).unwrap().value();
    assert_eq!(e_m.shape(), &[8, 64]);
    assert!(rows_equal(&e_m, 1, 3));
    assert!(rows_equal(&e_m, 5, 6));
    assert!(!rows_equal(&e_m, 1, 2));
}

#[test]
fn single_token_self_attention_reduces_to_value_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (store, g) = module(GsfmConfig::new(1, [4, 4, 2], 4));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let e_m = cx.constant(randn(&[1, 64], &mut rng));
    let out = g.geometric_self_attention(cx, e_m).unwrap();
    let v = g.geo_attn.out.forward(cx, g.geo_attn.v.forward(cx, e_m).unwrap()).unwrap();
    let expected = e_m.add(g.geo_norm.forward(cx, v).unwrap()).unwrap();
    assert!(out.value().max_abs_diff(&expected.value()) < 1e-12);
}

#[test]
fn self_attention_and_fuse_are_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (store, g) = module(GsfmConfig::new(6, [4, 4, 2], 4));
    let perm = [3, 0, 5, 1, 4, 2];
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let a = randn(&[6, 64], &mut rng);
    let b = randn(&[6, 64], &mut rng);
    let out = g.geometric_self_attention(cx, cx.constant(a.clone())).unwrap().value();
    let out_p = g.geometric_self_attention(cx, cx.constant(permute_rows(&a, &perm))).unwrap().value();
    assert_eq!(out.shape(), &[6, 64]);
    assert!(permute_rows(&out, &perm).max_abs_diff(&out_p) < 1e-12);

    let kv = |x: &Tensor<f64>, y: &Tensor<f64>| tape.concat(&[cx.constant(x.clone()), cx.constant(y.clone())], 0).unwrap();
    let fused = g.fuse(cx, cx.constant(a.clone()), kv(&a, &b)).unwrap().value();
    let (ap, bp) = (permute_rows(&a, &perm), permute_rows(&b, &perm));
    let fused_p = g.fuse(cx, cx.constant(ap.clone()), kv(&ap, &bp)).unwrap().value();
    assert_eq!(fused.shape(), &[6, 64]);
    assert!(permute_rows(&fused, &perm).max_abs_diff(&fused_p) < 1e-12);
}

#[test]
fn duplicated_keys_leave_cross_attention_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (store, g) = module(GsfmConfig::new(5, [4, 4, 2], 4));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let e = cx.constant(randn(&[5, 64], &mut rng));
    let doubled = g.fuse(cx, e, tape.concat(&[e, e], 0).unwrap()).unwrap();
    let single = g.fuse(cx, e, e).unwrap();
    assert!(doubled.value().max_abs_diff(&single.value()) < 1e-12);
}

fn scalar_pool(set: &SceneMaskSet, planes: [&Tensor<f64>; 3]) -> Vec<Vec<f64>> {
    let c = planes[0].shape()[0];
    set.masks()
        .iter()
        .map(|m| {
            let mut row = vec![0.0; c];
            for (plane, mask) in planes.iter().zip([&m.xy, &m.xz, &m.yz]) {
                let (r, k) = (mask.rows(), mask.cols());
                for ch in 0..c {
                    let (mut sum, mut n) = (0.0, 0usize);
                    for i in 0..r {
                        for j in 0..k {
                            if mask.get(i, j) {
                                sum += plane.at(&[ch, i, j]);
                                n += 1;
                            }
                        }
                    }
                    if n > 0 {
                        row[ch] += sum / n as f64 / 3.0;
                    }
                }
            }
            row
        })
        .collect()
}

#[test]
fn semantic_pooling_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let dims = [rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..4)];
        let c = rng.random_range(1..5);
        let set = random_set(rng.random_range(1..5), dims, &mut rng);
        let [x, y, z] = dims;
        let planes = [randn(&[c, x, y], &mut rng), randn(&[c, x, z], &mut rng), randn(&[c, y, z], &mut rng)];
        let tape = Tape::new();
        let vars = [0, 1, 2].map(|i| tape.constant(planes[i].clone()));
        let pooled = pool_semantic(&set, vars).unwrap().value();
        let oracle = scalar_pool(&set, [&planes[0], &planes[1], &planes[2]]);
        for (n, row) in oracle.iter().enumerate() {
            for (ch, &v) in row.iter().enumerate() {
                assert!((pooled.at(&[n, ch]) - v).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn semantic_pooling_edge_cases() {
    let dims = [4, 4, 2];
    let tape = Tape::new();
    let constant = |v: f64| {
        [tape.constant(Tensor::full(&[3, 4, 4], v)), tape.constant(Tensor::full(&[3, 4, 2], v)), tape.constant(Tensor::full(&[3, 4, 2], v))]
    };
    let empty = SceneMaskSet::empty(2, dims);
    assert!(pool_semantic(&empty, constant(5.0)).unwrap().value().data().iter().all(|&v| v == 0.0));
    let full = Trimask::solid_box(0, dims, ssed::trimask::Bbox::full(dims)).unwrap();
    let set = SceneMaskSet::from_masks(vec![full]).unwrap();
    let pooled = pool_semantic(&set, constant(2.5)).unwrap().value();
    assert!(pooled.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn label_embedding_alone_identifies_classes() {
    let (store, g) = module(GsfmConfig::new(8, [4, 4, 2], 4));
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let (e_label, e_sem) = g.semantic_embed(cx, None).unwrap();
    let zero = cx.constant(Tensor::zeros(&[8, 64]));
    let (_, e_sem_zero) = g.semantic_embed(cx, Some(zero)).unwrap();
    let direct = g.sem_mlp.forward(cx, e_label).unwrap();
    assert_eq!(e_sem.shape(), vec![8, 64]);
    assert_eq!(*e_sem.value(), *e_sem_zero.value());
    assert_eq!(*e_sem.value(), *direct.value());
    for a in 0..8 {
        for b in a + 1..8 {
            assert!(!rows_equal(&e_sem.value(), a, b));
        }
    }
}

#[test]
fn zeroed_output_projections_make_residuals_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = [8, 8, 4];
    let (mut store, g) = module(GsfmConfig::new(4, dims, 4));
    for id in [g.geo_attn.out.weight, g.fuse_attn.out.weight] {
        let t = store.get_mut(id);
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let set = random_set(4, dims, &mut rng);
    let planes = [randn(&[4, 8, 8], &mut rng), randn(&[4, 8, 4], &mut rng), randn(&[4, 8, 4], &mut rng)];
    let ctx = g.forward(&store, &set, [&planes[0], &planes[1], &planes[2]]).unwrap();
    assert_eq!(ctx.e_m_prime.as_ref().unwrap(), ctx.e_m.as_ref().unwrap());
    assert_eq!(&ctx.tokens, ctx.e_m_prime.as_ref().unwrap());
}

#[test]
fn end_to_end_class_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims = [8, 8, 4];
    let (mut store, g) = module(GsfmConfig::new(5, dims, 3));
    let set = random_set(5, dims, &mut rng);
    let planes = [randn(&[3, 8, 8], &mut rng), randn(&[3, 8, 4], &mut rng), randn(&[3, 8, 4], &mut rng)];
    let refs = [&planes[0], &planes[1], &planes[2]];
    let base = g.forward(&store, &set, refs).unwrap();
    let perm = [2, 4, 0, 1, 3];
    let table = store.get(g.label_embed).clone();
    *store.get_mut(g.label_embed) = permute_rows(&table, &perm);
    let moved = g.forward(&store, &permuted(&set, &perm), refs).unwrap();
    assert_eq!(moved.tokens.shape(), &[5, 64]);
    assert!(permute_rows(&base.tokens, &perm).max_abs_diff(&moved.tokens) < 1e-10);
}

#[test]
fn ablations_drop_their_intermediates() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = [4, 4, 2];
    let set = random_set(3, dims, &mut rng);
    let planes = [randn(&[2, 4, 4], &mut rng), randn(&[2, 4, 2], &mut rng), randn(&[2, 4, 2], &mut rng)];
    let refs = [&planes[0], &planes[1], &planes[2]];
    for (name, flags) in Ablation::table() {
        let (store, g) = module(GsfmConfig { flags, ..GsfmConfig::new(3, dims, 2) });
        let ctx = g.forward(&store, &set, refs).unwrap();
        assert_eq!(ctx.tokens.shape(), &[3, 64], "{name}");
        assert_eq!(ctx.e_m.is_some(), flags.use_geometric_branch, "{name}");
        assert_eq!(ctx.e_sem.is_some(), flags.use_semantic_branch, "{name}");
        assert_eq!(ctx.t_sem.is_some(), flags.use_semantic_branch && flags.use_semantic_tokens, "{name}");
    }
    let both_off = Ablation { use_geometric_branch: false, use_semantic_branch: false, ..Ablation::default() };
    let mut store = ParamStore::<f64>::new();
    assert!(Gsfm::new(&mut store, "g", GsfmConfig { flags: both_off, ..GsfmConfig::new(3, dims, 2) }, 0).is_err());
}

#[test]
fn rejects_mismatched_sets() {
    let (store, g) = module(GsfmConfig::new(3, [4, 4, 2], 2));
    let planes = [Tensor::zeros(&[2, 4, 4]), Tensor::zeros(&[2, 4, 2]), Tensor::zeros(&[2, 4, 2])];
    let refs = [&planes[0], &planes[1], &planes[2]];
    assert!(g.forward(&store, &SceneMaskSet::empty(4, [4, 4, 2]), refs).is_err());
    assert!(g.forward(&store, &SceneMaskSet::empty(3, [4, 4, 4]), refs).is_err());
}

#[test]
fn toy_scene_context_is_finite() {
    let grid = generate_toy_scene(&ToySceneSpec::new([16, 16, 4], 3)).unwrap();
    let set = decompose_scene(&grid, 2, 1).unwrap();
    let mut store = ParamStore::<f32>::new();
    let g = Gsfm::new(&mut store, "gsfm", GsfmConfig::new(8, set.dims(), 16), 0).unwrap();
    let [x, y, z] = set.dims();
    let planes = [Tensor::zeros(&[16, x, y]), Tensor::zeros(&[16, x, z]), Tensor::zeros(&[16, y, z])];
    let ctx = g.forward(&store, &set, [&planes[0], &planes[1], &planes[2]]).unwrap();
    assert!(ctx.tokens.is_finite());
}

#[test]
fn full_module_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dims = [3, 3, 2];
    let cfg = GsfmConfig { c_emb: 6, geo_hidden: 7, sem_hidden: 5, ..GsfmConfig::new(3, dims, 2) };
    let (store, g) = module(cfg);
    let set = random_set(3, dims, &mut rng);
    let planes = [randn(&[2, 3, 3], &mut rng), randn(&[2, 3, 2], &mut rng), randn(&[2, 3, 2], &mut rng)];
    let target = randn(&[3, 6], &mut rng);
    let err = param_gradient_check(
        &store,
        |cx| {
            let vars = planes.clone().map(|p| cx.constant(p));
            let out = g.forward_vars(cx, &set, vars).map_err(|e| match e {
                ssed::gsfm::GsfmError::Numerics(n) => n,
                other => panic!("{other}"),
            })?;
            out.fused.mse(cx.constant(target.clone()))
        },
        1e-6,
        12,
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}
