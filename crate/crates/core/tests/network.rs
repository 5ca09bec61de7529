use nalgebra::{Matrix4, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symslice::data::{gen_shape, random_rotation, rotate_sample, Family, ShapeRecipe};
use symslice::geometry::{plane_from_homogeneous, Plane, Vec3};
use symslice::grid::{make_slices, normalize_cloud, voxelize, OccupancyGrid};
use symslice::metrics::{gte_loss, offsets_loss, GroundTruth};
use symslice::network::{
    decode, flatten_offsets, forward, forward_grid, global_encode, gru_step, init_hidden, init_params, load_params, offset_targets,
    plane_head, save_params, slice_encode, ModelConfig, ModelParams, NetworkError,
};
use symslice_autograd::gradcheck::{gradcheck_probed, DEFAULT_STEP};
use symslice_autograd::{AutogradError, Graph, Tensor, Var};

fn ad(e: NetworkError) -> AutogradError {
    match e {
        NetworkError::Autograd(a) => a,
        other => panic!("{other}"),
    }
}

fn micro_grid(seed: u64, cfg: &ModelConfig) -> (OccupancyGrid, GroundTruth) {
    let recipe = ShapeRecipe::new(Family::ALL[seed as usize % 4], seed);
    let (c, planes) = gen_shape(&recipe);
    let (c, planes) = rotate_sample(&c, &planes, &random_rotation(seed + 100));
    let (c, rec) = normalize_cloud(&c).unwrap();
    let planes: Vec<Plane> = planes.iter().map(|p| rec.apply_plane(p)).collect();
    let grid = voxelize(&c, &cfg.grid).unwrap();
    (grid, GroundTruth::new(planes, c.points))
}

fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = init_params(&ModelConfig { seed, ..cfg.clone() }).unwrap();
    // Perturb GN affine terms and biases away from their init constants.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in p.names().to_vec().into_iter().zip(p.tensors_mut()) {
        if !name.ends_with(".w") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    p
}

/// Random coordinates of the tensors whose name starts with one of `prefixes`.
fn probes(p: &ModelParams, prefixes: &[&str], per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, (name, t)) in p.names().iter().zip(p.tensors()).enumerate() {
        if prefixes.iter().any(|pre| name.starts_with(pre)) {
            for _ in 0..per_tensor.min(t.len()) {
                out.push((i, rng.random_range(0..t.len())));
            }
        }
    }
    out
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn module_shapes() {
    let cfg = ModelConfig::micro();
    let p = init_params(&cfg).unwrap();
    let (grid, _) = micro_grid(1, &cfg);
    let (r, c) = cfg.out_dims();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let gl = global_encode(&mut g, &b, &cfg, &grid).unwrap();
    assert_eq!(g.shape(gl), &[cfg.feature_width(), r, c]);
    let slices = make_slices(&grid);
    let sl = slice_encode(&mut g, &b, &cfg, &slices[0]).unwrap();
    assert_eq!(g.shape(sl), &[cfg.feature_width(), r, c]);
    let h = g.constant(Tensor::zeros(&[cfg.gru_hidden, r, c]));
    let o = decode(&mut g, &b, &cfg, h).unwrap();
    assert_eq!(g.shape(o), &[3, r, c]);

    let out = forward_grid(&mut g, &b, &cfg, &grid).unwrap();
    assert_eq!(out.offsets.len(), cfg.grid.n);
    assert_eq!(g.shape(out.flat_offsets), &[3, cfg.point_count()]);
    assert_eq!(g.shape(out.beta), &[4]);
    let beta = g.value(out.beta).data();
    assert!((beta.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn wrong_grid_is_rejected() {
    let cfg = ModelConfig::micro();
    let p = init_params(&cfg).unwrap();
    let (grid, _) = micro_grid(1, &ModelConfig::default());
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    assert!(matches!(
        global_encode(&mut g, &b, &cfg, &grid),
        Err(NetworkError::ShapeMismatch(_))
    ));
}

#[test]
fn gradcheck_modules() {
    let cfg = ModelConfig::micro();
    let (r, c) = cfg.out_dims();
    for seed in 0..5 {
        let p = random_params(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_global = randn(&[cfg.feature_width(), r, c], &mut rng);
        let x_step = randn(&[2 * cfg.feature_width(), r, c], &mut rng);
        let h_prev: Vec<Tensor> = (0..cfg.gru_layers)
            .map(|_| randn(&[cfg.gru_hidden, r, c], &mut rng))
            .collect();
        let n = p.tensors().len();
        let mut inputs = p.tensors().to_vec();
        inputs.push(x_global);
        inputs.push(x_step);
        inputs.extend(h_prev);
        let layers = cfg.gru_layers;
        let all_inputs = |pr: &mut Vec<(usize, usize)>, rng: &mut ChaCha8Rng| {
            for k in 0..2 + layers {
                for _ in 0..6 {
                    pr.push((n + k, rng.random_range(0..inputs[n + k].len())));
                }
            }
        };

        let mut pr = probes(&p, &["hinit"], 6, &mut rng);
        all_inputs(&mut pr, &mut rng);
        let rep = gradcheck_probed(
            |g: &mut Graph, v: &[Var]| {
                let b = p.with_vars(v[..n].to_vec());
                let hs = init_hidden(g, &b, &cfg, v[n]).map_err(ad)?;
                let cat = g.concat(&hs, 0)?;
                let sq = g.mul(cat, cat)?;
                Ok(g.sum(sq))
            },
            &inputs,
            &pr,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "init_hidden seed {seed}: {rep:?}");

        let mut pr = probes(&p, &["gru"], 6, &mut rng);
        all_inputs(&mut pr, &mut rng);
        let rep = gradcheck_probed(
            |g: &mut Graph, v: &[Var]| {
                let b = p.with_vars(v[..n].to_vec());
                let hs = gru_step(g, &b, &cfg, v[n + 1], &v[n + 2..]).map_err(ad)?;
                let cat = g.concat(&hs, 0)?;
                let sq = g.mul(cat, cat)?;
                Ok(g.sum(sq))
            },
            &inputs,
            &pr,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "gru_step seed {seed}: {rep:?}");

        let mut pr = probes(&p, &["dec"], 6, &mut rng);
        all_inputs(&mut pr, &mut rng);
        let rep = gradcheck_probed(
            |g: &mut Graph, v: &[Var]| {
                let b = p.with_vars(v[..n].to_vec());
                let o = decode(g, &b, &cfg, v[n + 2]).map_err(ad)?;
                let sq = g.mul(o, o)?;
                Ok(g.sum(sq))
            },
            &inputs,
            &pr,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "decode seed {seed}: {rep:?}");
    }
}

#[test]
fn gradcheck_micro_model_end_to_end() {
    let cfg = ModelConfig::micro();
    for seed in 0..5 {
        let p = random_params(&cfg, seed);
        let (grid, gt) = micro_grid(seed, &cfg);
        let target = offset_targets(&cfg.grid, &gt.planes()[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let pr = probes(&p, &[""], 2, &mut rng);
        let n = p.tensors().len();
        let rep = gradcheck_probed(
            |g: &mut Graph, v: &[Var]| {
                let b = p.with_vars(v[..n].to_vec());
                let out = forward_grid(g, &b, &cfg, &grid).map_err(ad)?;
                let t = g.constant(target.clone());
                let l1 = offsets_loss(g, out.flat_offsets, t)?;
                let (gte, _) = gte_loss(g, out.beta, &gt)?;
                g.add(l1, gte)
            },
            p.tensors(),
            &pr,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(rep.checked > 100);
        assert!(rep.max_rel_err < 1e-4, "seed {seed}: {rep:?}");
    }
}

fn random_plane(rng: &mut ChaCha8Rng) -> Plane {
    let n = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    Plane::new(n, rng.random_range(-0.3..0.3)).unwrap()
}

/// Split a `3 × P` offsets matrix into per-slice `3 × r × c` graph constants.
fn slice_offsets(g: &mut Graph, cfg: &ModelConfig, flat: &Tensor) -> Vec<Var> {
    let (r, c) = cfg.out_dims();
    let per = r * c;
    let total = flat.shape()[1];
    (0..cfg.grid.n)
        .map(|s| {
            let t = Tensor::from_fn(&[3, r, c], |i| flat.data()[(i / per) * total + s * per + i % per]);
            g.constant(t)
        })
        .collect()
}

#[test]
fn exact_offsets_recover_the_plane() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let s = random_plane(&mut rng).canonical();
        let mut g = Graph::new();
        let offs = slice_offsets(&mut g, &cfg, &offset_targets(&cfg.grid, &s));
        let flat = flatten_offsets(&mut g, &cfg.grid, &offs).unwrap();
        let head = plane_head(&mut g, &cfg.grid, flat, None).unwrap();
        let b = g.value(head.beta).data();
        let got = plane_from_homogeneous(&[b[0], b[1], b[2], b[3]]).unwrap();
        let angle = got.normal().cross(&s.normal()).norm().atan2(got.normal().dot(&s.normal()));
        assert!(angle < 1e-9, "angle {angle:e}");
        assert!((got.offset() - s.offset()).abs() < 1e-9);
        assert!(head.eigengap > 1e-3);
    }
}

#[test]
fn plane_head_matches_independent_eigensolve() {
    let cfg = ModelConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let flat = Tensor::from_fn(&[3, cfg.point_count()], |_| rng.random_range(-0.2..0.2));
        let mut g = Graph::new();
        let offs = slice_offsets(&mut g, &cfg, &flat);
        let flat = flatten_offsets(&mut g, &cfg.grid, &offs).unwrap();
        let head = plane_head(&mut g, &cfg.grid, flat, None).unwrap();
        let pts = g.value(head.points);
        let total = cfg.point_count();
        let mut m = Matrix4::zeros();
        for j in 0..total {
            let row = nalgebra::Vector4::new(
                pts.data()[j],
                pts.data()[total + j],
                pts.data()[2 * total + j],
                1.0,
            );
            m += row * row.transpose();
        }
        let eig = SymmetricEigen::new(m);
        assert!(eig.eigenvalues.iter().all(|v| *v > 1e-12), "rank deficient");
        let k = eig.eigenvalues.imin();
        let v = eig.eigenvectors.column(k);
        let b = g.value(head.beta).data();
        let dot: f64 = (0..4).map(|i| v[i] * b[i]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-10, "dot {dot}");
    }
}

#[test]
fn later_slices_depend_on_earlier_ones() {
    let cfg = ModelConfig::micro();
    let p = random_params(&cfg, 2);
    let (grid, _) = micro_grid(2, &cfg);
    let run = |order: &[usize]| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let gl = global_encode(&mut g, &b, &cfg, &grid).unwrap();
        let mut h = init_hidden(&mut g, &b, &cfg, gl).unwrap();
        let slices = make_slices(&grid);
        let mut last = None;
        for &i in order {
            let f = slice_encode(&mut g, &b, &cfg, &slices[i]).unwrap();
            let x = g.concat(&[f, gl], 0).unwrap();
            h = gru_step(&mut g, &b, &cfg, x, &h).unwrap();
            last = Some(decode(&mut g, &b, &cfg, *h.last().unwrap()).unwrap());
        }
        g.value(last.unwrap()).data().to_vec()
    };
    // Slice 1 decoded after slice 0 vs decoded first.
    let a = run(&[0, 1]);
    let b = run(&[1]);
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::micro();
    let p = init_params(&cfg).unwrap();
    let recipe = ShapeRecipe::new(Family::BoxUnion, 4);
    let (c, _) = gen_shape(&recipe);
    let (c, _) = normalize_cloud(&c).unwrap();
    let a = forward(&c, &p, &cfg).unwrap();
    let b = forward(&c, &p, &cfg).unwrap();
    assert_eq!(a.beta, b.beta);
    assert_eq!(a.offsets, b.offsets);
    assert_eq!(a.points.len(), cfg.point_count());
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.symw");
    let cfg = ModelConfig::micro();
    let p = random_params(&cfg, 9);
    save_params(&path, &p, &cfg).unwrap();
    let (q, cfg2) = load_params(&path).unwrap();
    assert_eq!(cfg, cfg2);
    for (a, b) in p.tensors().iter().zip(q.tensors()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(load_params(&path).is_err());

    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    std::fs::write(&path, &v2).unwrap();
    assert!(matches!(
        load_params(&path),
        Err(NetworkError::Autograd(AutogradError::Version { found: 2, .. }))
    ));

    // A checkpoint for another architecture fails the shape check.
    std::fs::write(&path, &bytes).unwrap();
    let mut other = cfg.clone();
    other.gru_hidden = 8;
    std::fs::write(dir.path().join("model.symw.json"), serde_json::to_string(&other).unwrap()).unwrap();
    assert!(matches!(load_params(&path), Err(NetworkError::ShapeMismatch(_))));
}
