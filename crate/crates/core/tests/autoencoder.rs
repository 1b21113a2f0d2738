use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssed::autoencoder::{
    ae_loss, scene_loss, train_autoencoder, AeArch, AeError, AeTrainConfig, Triplane, TriplaneAutoencoder,
};
use ssed::numerics::{param_gradient_check, Checkpoint, Ctx, Tape, Tensor};
use ssed::voxel::{generate_toy_scene, miou, ToySceneSpec, VoxelGrid};

fn tiny_arch() -> AeArch {
    AeArch { num_classes: 3, c_z: 3, pe_bands: 2, enc_width: 4, dec_width: 6, dec_layers: 2, ..AeArch::default() }
}

fn random_planes(c: usize, m: [usize; 3], rng: &mut ChaCha8Rng) -> Triplane {
    Triplane::new(
        Tensor::randn(&[c, m[0], m[1]], 1.0, rng),
        Tensor::randn(&[c, m[0], m[2]], 1.0, rng),
        Tensor::randn(&[c, m[1], m[2]], 1.0, rng),
    )
    .unwrap()
}

/// Scalar-loop bilinear lookup of one plane at continuous plane coordinates.
fn bilinear(plane: &Tensor<f32>, ch: usize, u: f64, v: f64) -> f64 {
    let (h, w) = (plane.shape()[1], plane.shape()[2]);
    let at = |i: usize, j: usize| plane.data()[(ch * h + i) * w + j] as f64;
    let u = u.clamp(0.0, (h - 1) as f64);
    let v = v.clamp(0.0, (w - 1) as f64);
    let (i0, j0) = (u.floor() as usize, v.floor() as usize);
    let (i1, j1) = ((i0 + 1).min(h - 1), (j0 + 1).min(w - 1));
    let (fu, fv) = (u - i0 as f64, v - j0 as f64);
    at(i0, j0) * (1.0 - fu) * (1.0 - fv) + at(i0, j1) * (1.0 - fu) * fv + at(i1, j0) * fu * (1.0 - fv) + at(i1, j1) * fu * fv
}

fn query_oracle(tp: &Triplane, p: [f64; 3], grid: [usize; 3], mask: [usize; 3]) -> Vec<f64> {
    let u: Vec<f64> = (0..3).map(|a| p[a] * mask[a] as f64 / grid[a] as f64 - 0.5).collect();
    (0..tp.channels())
        .map(|c| bilinear(&tp.xy, c, u[0], u[1]) + bilinear(&tp.xz, c, u[0], u[2]) + bilinear(&tp.yz, c, u[1], u[2]))
        .collect()
}

#[test]
fn encoder_shape_law() {
    let ae = TriplaneAutoencoder::<f32>::new(AeArch::default(), 0).unwrap();
    let tp = ae.encode(&VoxelGrid::empty([32, 32, 8], 8).unwrap()).unwrap();
    assert_eq!(tp.xy.shape(), &[16, 16, 16]);
    assert_eq!(tp.xz.shape(), &[16, 16, 8]);
    assert_eq!(tp.yz.shape(), &[16, 16, 8]);
    let bad = VoxelGrid::empty([31, 32, 8], 8).unwrap();
    assert!(matches!(ae.encode(&bad), Err(AeError::IndivisibleDims { .. })));
}

#[test]
fn pooling_a_z_constant_latent_returns_the_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let slice = Tensor::<f32>::randn(&[3, 4, 5], 1.0, &mut rng);
    let z = 6;
    let mut data = Vec::new();
    for &v in slice.data() {
        data.extend(std::iter::repeat_n(v, z));
    }
    let tape = Tape::new();
    let pooled = tape.constant(Tensor::new(&[3, 4, 5, z], data).unwrap()).axis_mean(3).unwrap();
    assert_eq!(pooled.value().data(), slice.data());
}

#[test]
fn one_vehicle_voxel_changes_the_triplane() {
    let ae = TriplaneAutoencoder::<f32>::new(AeArch::default(), 3).unwrap();
    let empty = VoxelGrid::empty([8, 8, 4], 8).unwrap();
    let mut one = empty.clone();
    one.set(3, 4, 1, 4);
    assert_ne!(ae.encode(&empty).unwrap(), ae.encode(&one).unwrap());
}

#[test]
fn constant_planes_query_to_three_times_the_constant() {
    let ae = TriplaneAutoencoder::<f32>::new(AeArch::default(), 0).unwrap();
    let tp = Triplane::constant(16, [16, 16, 8], 0.25);
    let coords = [[0.0, 0.0, 0.0], [5.3, 17.9, 2.2], [31.99, 31.99, 7.99]];
    let f = ae.query_triplane(&tp, &coords, [32, 32, 8]).unwrap();
    assert!(f.data().iter().all(|&v| (v - 0.75).abs() < 1e-6));
}

#[test]
fn cell_center_query_reads_the_three_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ae = TriplaneAutoencoder::<f32>::new(AeArch::default(), 0).unwrap();
    let tp = random_planes(16, [16, 16, 8], &mut rng);
    let (i, j, k) = (5, 11, 3);
    // cell (i, j) of a d=2 plane is centered at voxel coordinate 2i + 1
    let p = [2.0 * i as f64 + 1.0, 2.0 * j as f64 + 1.0, k as f64 + 0.5];
    let f = ae.query_triplane(&tp, &[p], [32, 32, 8]).unwrap();
    for c in 0..16 {
        let direct = tp.xy.data()[(c * 16 + i) * 16 + j] + tp.xz.data()[(c * 16 + i) * 8 + k] + tp.yz.data()[(c * 16 + j) * 8 + k];
        assert_eq!(f.data()[c], direct);
    }
}

#[test]
fn query_matches_scalar_bilinear_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ae = TriplaneAutoencoder::<f64>::new(AeArch::default(), 0).unwrap();
    let (grid, mask) = ([32, 32, 8], [16, 16, 8]);
    let tp = random_planes(16, mask, &mut rng);
    let coords: Vec<[f64; 3]> =
        (0..100).map(|_| [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0), rng.random_range(0.0..8.0)]).collect();
    let f = ae.query_triplane(&tp, &coords, grid).unwrap();
    for (n, &p) in coords.iter().enumerate() {
        for (c, want) in query_oracle(&tp, p, grid, mask).into_iter().enumerate() {
            assert!((f.data()[n * 16 + c] - want).abs() < 1e-6, "point {p:?} channel {c}");
        }
    }
    assert!(matches!(ae.query_triplane(&tp, &[[32.0, 0.0, 0.0]], grid), Err(AeError::OutOfBounds { .. })));
    assert!(ae.query_triplane(&tp, &[[-0.1, 0.0, 0.0]], grid).is_err());
}

#[test]
fn query_is_additive_in_the_planes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ae = TriplaneAutoencoder::<f64>::new(AeArch::default(), 0).unwrap();
    let a = random_planes(16, [16, 16, 8], &mut rng);
    let b = random_planes(16, [16, 16, 8], &mut rng);
    let sum = |x: &Tensor<f32>, y: &Tensor<f32>| Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect()).unwrap();
    let ab = Triplane::new(sum(&a.xy, &b.xy), sum(&a.xz, &b.xz), sum(&a.yz, &b.yz)).unwrap();
    let coords: Vec<[f64; 3]> =
        (0..200).map(|_| [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0), rng.random_range(0.0..8.0)]).collect();
    let fa = ae.query_triplane(&a, &coords, [32, 32, 8]).unwrap();
    let fb = ae.query_triplane(&b, &coords, [32, 32, 8]).unwrap();
    let fab = ae.query_triplane(&ab, &coords, [32, 32, 8]).unwrap();
    for i in 0..fab.numel() {
        assert!((fab.data()[i] - fa.data()[i] - fb.data()[i]).abs() < 1e-6);
    }
}

#[test]
fn decode_shape_determinism_and_boundaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ae = TriplaneAutoencoder::<f32>::new(AeArch::default(), 8).unwrap();
    let tp = random_planes(16, [16, 16, 8], &mut rng);
    let coords: Vec<[f64; 3]> =
        (0..4096).map(|_| [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0), rng.random_range(0.0..8.0)]).collect();
    assert_eq!(ae.decode_points(&tp, &coords, [32, 32, 8]).unwrap().shape(), &[4096, 8]);

    let same = ae.decode_points(&tp, &[coords[9], coords[9]], [32, 32, 8]).unwrap();
    assert_eq!(same.data()[..8], same.data()[8..]);

    let edge = ae.decode_points(&tp, &[[0.0, 0.0, 0.0], [31.0, 31.0, 7.0]], [32, 32, 8]).unwrap();
    assert!(edge.data().iter().all(|v| v.is_finite()));
}

#[test]
fn reconstruction_is_deterministic_and_shaped() {
    let ae = TriplaneAutoencoder::<f32>::new(AeArch::default(), 9).unwrap();
    let g = generate_toy_scene(&ToySceneSpec::new([32, 32, 8], 2)).unwrap();
    let a = ae.roundtrip(&g).unwrap();
    assert_eq!(a.dims(), g.dims());
    assert_eq!(a, ae.roundtrip(&g).unwrap());
    let tp = ae.encode(&g).unwrap();
    assert!(ae.reconstruct(&tp, [16, 16, 8]).is_err());
}

#[test]
fn logits_favoring_empty_reconstruct_an_empty_grid() {
    let mut ae = TriplaneAutoencoder::<f32>::new(AeArch::default(), 10).unwrap();
    let ids: Vec<_> = ae.params().ids_with_prefix("ae.dec.fc3").collect();
    for id in ids {
        let p = ae.params_mut().get_mut(id);
        let bias = p.shape().len() == 1;
        p.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if bias && i == 0 { 1.0 } else { 0.0 });
    }
    let g = generate_toy_scene(&ToySceneSpec::new([32, 32, 8], 3)).unwrap();
    assert_eq!(ae.roundtrip(&g).unwrap(), VoxelGrid::empty([32, 32, 8], 8).unwrap());
}

fn hard_probs(pred: &[usize], n: usize) -> Tensor<f64> {
    let mut d = vec![0.0; pred.len() * n];
    for (i, &p) in pred.iter().enumerate() {
        d[i * n + p] = 1.0;
    }
    Tensor::new(&[pred.len(), n], d).unwrap()
}

fn lovasz(probs: Tensor<f64>, labels: &[usize]) -> f64 {
    let tape = Tape::new();
    tape.constant(probs).lovasz_softmax(labels).unwrap().value().data()[0]
}

#[test]
fn lovasz_on_hard_predictions_is_mean_jaccard_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(2..6);
        let v = rng.random_range(1..40);
        let labels: Vec<usize> = (0..v).map(|_| rng.random_range(0..n)).collect();
        let pred: Vec<usize> = (0..v).map(|_| rng.random_range(0..n)).collect();
        let mut losses = Vec::new();
        for c in 0..n {
            if !labels.contains(&c) {
                continue;
            }
            let inter = (0..v).filter(|&i| labels[i] == c && pred[i] == c).count() as f64;
            let union = (0..v).filter(|&i| labels[i] == c || pred[i] == c).count() as f64;
            losses.push(1.0 - inter / union);
        }
        let want = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((lovasz(hard_probs(&pred, n), &labels) - want).abs() < 1e-6);
    }
    assert_eq!(lovasz(hard_probs(&[0, 2, 1, 1], 3), &[0, 2, 1, 1]), 0.0);
}

/// Sorted-errors Lovász extension of one class's Jaccard loss.
fn lovasz_one_class(errors: &[f64], fg: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..errors.len()).collect();
    idx.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap());
    let gts = fg.iter().filter(|&&f| f).count() as f64;
    let (mut loss, mut prev, mut cum_fg) = (0.0, 0.0, 0.0);
    for (k, &i) in idx.iter().enumerate() {
        if fg[i] {
            cum_fg += 1.0;
        }
        let cum_bg = (k + 1) as f64 - cum_fg;
        let j = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        loss += errors[i] * (j - prev);
        prev = j;
    }
    loss
}

#[test]
fn lovasz_uniform_single_class_matches_brute_force() {
    for n in 2..7 {
        for v in [1, 5, 23] {
            let labels = vec![n - 1; v];
            let probs = Tensor::new(&[v, n], vec![1.0 / n as f64; v * n]).unwrap();
            let want = lovasz_one_class(&vec![1.0 - 1.0 / n as f64; v], &vec![true; v]);
            let got = lovasz(probs, &labels);
            assert!((got - want).abs() < 1e-12, "n={n} v={v}: {got} vs {want}");
            assert!((0.0..=1.0).contains(&got));
        }
    }
}

#[test]
fn lovasz_rejects_unnormalized_rows() {
    let tape = Tape::new();
    let p = tape.constant(Tensor::new(&[2, 2], vec![0.5, 0.5, 0.7, 0.7]).unwrap());
    assert!(p.lovasz_softmax(&[0, 1]).is_err());
}

#[test]
fn lovasz_does_not_increase_when_the_true_class_gains() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let (n, v) = (rng.random_range(2..5), rng.random_range(2..20));
        let labels: Vec<usize> = (0..v).map(|_| rng.random_range(0..n)).collect();
        let mut d: Vec<f64> = (0..v * n).map(|_| rng.random_range(0.01..1.0)).collect();
        for row in d.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let before = lovasz(Tensor::new(&[v, n], d.clone()).unwrap(), &labels);
        let i = rng.random_range(0..v);
        let row = &mut d[i * n..(i + 1) * n];
        let (old, new) = (row[labels[i]], row[labels[i]] + rng.random_range(0.0..1.0) * (1.0 - row[labels[i]]));
        for (c, x) in row.iter_mut().enumerate() {
            *x = if c == labels[i] { new } else { *x * (1.0 - new) / (1.0 - old) };
        }
        let after = lovasz(Tensor::new(&[v, n], d).unwrap(), &labels);
        assert!(after <= before + 1e-12, "{after} > {before}");
    }
}

#[test]
fn ae_loss_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..8)).collect();
    let logits = Tensor::<f64>::randn(&[30, 8], 2.0, &mut rng);

    let tape = Tape::new();
    let x = tape.constant(logits.clone());
    let (total, ce, lov) = ae_loss(x, &labels, Some(x), &labels, 0.0).unwrap();
    assert!(lov.is_none());
    assert_eq!(total.value().data(), x.cross_entropy(&labels).unwrap().value().data());
    assert_eq!(total.value().data(), ce.value().data());
    assert!(ae_loss(x, &labels, Some(x), &labels, -1.0).is_err());
    assert!(x.cross_entropy(&[9; 30]).is_err());

    let mut sharp = vec![0.0; 30 * 8];
    for (i, &l) in labels.iter().enumerate() {
        sharp[i * 8 + l] = 20.0;
    }
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[30, 8], sharp).unwrap());
    let (total, _, _) = ae_loss(x, &labels, Some(x), &labels, 1.0).unwrap();
    assert!(total.value().data()[0] < 1e-6);
    assert_eq!(AeTrainConfig::default().alpha, 1.0);
    assert_eq!(AeTrainConfig::default().batch, 4);
}

#[test]
fn ae_loss_gradient_check_in_double_precision() {
    let ae = TriplaneAutoencoder::<f64>::new(tiny_arch(), 14).unwrap();
    let mut g = VoxelGrid::empty([4, 4, 2], 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for i in 0..g.len() {
        let [x, y, z] = g.coords(i);
        g.set(x, y, z, rng.random_range(0..3));
    }
    let sample = vec![0, 3, 7, 12, 20, 31, 5, 9];
    let worst =
        param_gradient_check(ae.params(), |cx: Ctx<'_, f64>| Ok(scene_loss(&ae, cx, &g, &sample, 1.0).unwrap().0), 1e-6, 6)
            .unwrap();
    assert!(worst < 1e-3, "relative error {worst}");
}

#[test]
fn checkpoint_roundtrip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_toy_scene(&ToySceneSpec::new([16, 16, 4], 5)).unwrap();
    let mut ae = TriplaneAutoencoder::<f32>::new(AeArch::default(), 16).unwrap();
    ae.set_stats(Some(ssed::autoencoder::LatentStats::compute(&[ae.encode(&g).unwrap()])));
    let path = dir.path().join("ae.ssck");
    ssed::numerics::save_checkpoint(&ae.to_checkpoint(), &path).unwrap();
    let ck: Checkpoint = ssed::numerics::load_checkpoint(&path).unwrap();
    let back = TriplaneAutoencoder::from_checkpoint(&ck).unwrap();
    assert_eq!(back.arch(), ae.arch());
    assert_eq!(back.stats(), ae.stats());
    assert_eq!(back.encode_latent(&g).unwrap(), ae.encode_latent(&g).unwrap());
    assert_eq!(back.roundtrip(&g).unwrap(), ae.roundtrip(&g).unwrap());
}

#[test]
fn single_scene_overfits() {
    let g = generate_toy_scene(&ToySceneSpec::new([32, 32, 8], 17)).unwrap();
    let cfg = AeTrainConfig { epochs: 200, seed: 1, lr: 1e-2, ..Default::default() };
    let trained = train_autoencoder(std::slice::from_ref(&g), &cfg, |_| {}).unwrap();
    let m = miou(&trained.model.roundtrip(&g).unwrap(), &g).unwrap();
    assert!(m >= 0.95, "single-scene mIoU {m}");
    let c = &trained.curve;
    assert!(c.last().unwrap().total < c[0].total);
}
