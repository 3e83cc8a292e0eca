use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scene_reid::bmn::*;
use scene_reid::gradcheck::{check_inputs, check_params, GradCheckConfig, FD_REL_TOL};
use scene_reid::{Graph, Mode, ParamStore, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_cfg() -> MgeConfig {
    MgeConfig {
        level_dim: 6,
        cbam_reduction: 2,
        ..MgeConfig::default()
    }
}

#[test]
fn strip_split_shapes_and_round_trip() {
    let store = ParamStore::new();
    for (h, w) in [FINE_GRID, COARSE_GRID] {
        for parts in STRIP_PARTITIONS {
            let x = Tensor::randn(&[2, 3, h, w], 1.0, &mut rng(parts as u64));
            let mut g = Graph::inference(&store);
            let v = g.constant(x.clone());
            let strips = strip_split(&mut g, v, parts).unwrap();
            assert_eq!(strips.len(), parts);
            for s in &strips {
                assert_eq!(g.shape(*s), &[2, 3, h / parts, w]);
            }
            let back = g.concat(&strips, 2).unwrap();
            assert_eq!(g.value(back), &x);
        }
    }
    let mut g = Graph::inference(&store);
    let v = g.constant(Tensor::zeros(&[1, 1, 24, 12]));
    let three = strip_split(&mut g, v, 3).unwrap();
    assert_eq!(g.shape(three[0]), &[1, 1, 8, 12]);
    assert_eq!(strip_split(&mut g, v, 1).unwrap(), vec![v]);
    assert!(strip_split(&mut g, v, 5).is_err());
}

#[test]
fn strip_encoder_eval_is_deterministic_and_drop_path_zeroes() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let cfg = small_cfg();
    let enc = StripEncoder::new(&mut store, "s", 4, &cfg, &mut r);
    let x = Tensor::randn(&[3, 4, 8, 12], 1.0, &mut r);
    let run = |seed: u64| {
        let mut g = Graph::new(&store, Mode::Eval);
        let v = g.constant(x.clone());
        let y = enc.forward(&mut g, v, &mut rng(seed)).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(1), run(2));
    assert_eq!(run(1).shape(), &[3, 6]);

    let mut hi = StripEncoder { drop_path: 0.999_999, ..enc };
    let mut g = Graph::new(&store, Mode::Train);
    let v = g.constant(x.clone());
    let y = hi.forward(&mut g, v, &mut rng(3)).unwrap();
    assert!(g.value(y).data().iter().all(|&a| a == 0.0));
    hi.drop_path = 0.0;
    let y = hi.forward(&mut g, v, &mut rng(3)).unwrap();
    assert!(g.value(y).data().iter().any(|&a| a != 0.0));
}

#[test]
fn mge_encode_zero_map_gives_zero_and_default_dims() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let level = MgeLevel::new(&mut store, "l", FINE_GRID, 8, &small_cfg(), &mut r);
    let mut g = Graph::new(&store, Mode::Eval);
    let z = g.constant(Tensor::zeros(&[2, 8, 24, 12]));
    let y = level.forward(&mut g, z, &mut r).unwrap();
    assert_eq!(g.shape(y), &[2, 6]);
    assert!(g.value(y).data().iter().all(|&a| a == 0.0));
    let wrong = g.constant(Tensor::zeros(&[2, 8, 12, 12]));
    assert!(level.forward(&mut g, wrong, &mut r).is_err());

    let mut store = ParamStore::new();
    let cfg = MgeConfig::default();
    let level = MgeLevel::new(&mut store, "l", COARSE_GRID, 16, &cfg, &mut r);
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.constant(Tensor::randn(&[1, 16, 12, 6], 1.0, &mut r));
    let y = level.forward(&mut g, x, &mut r).unwrap();
    assert_eq!(g.shape(y), &[1, 512]);
}

#[test]
fn mge_strip_locality() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let level = MgeLevel::new(&mut store, "l", FINE_GRID, 4, &small_cfg(), &mut r);
    let base = Tensor::randn(&[2, 4, 24, 12], 1.0, &mut r);
    let mut moved = base.clone();
    for n in 0..2 {
        for c in 0..4 {
            for y in 0..8 {
                for x in 0..12 {
                    moved.data_mut()[((n * 4 + c) * 24 + y) * 12 + x] += 5.0;
                }
            }
        }
    }
    let outputs = |t: &Tensor| {
        let mut g = Graph::new(&store, Mode::Eval);
        let v = g.constant(t.clone());
        let o = level.strip_outputs(&mut g, v, &mut rng(0)).unwrap();
        o.iter().map(|b| b.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let a = outputs(&base);
    let b = outputs(&moved);
    assert_eq!(a[2][1], b[2][1]);
    assert_eq!(a[2][2], b[2][2]);
    assert_eq!(a[1][1], b[1][1]);
    assert_ne!(a[2][0], b[2][0]);

    // Gradients of the bottom strip encoder w.r.t. pixels of the top strip are exactly zero.
    let mut g = Graph::new(&store, Mode::Eval);
    let v = g.input(base.clone());
    let o = level.strip_outputs(&mut g, v, &mut rng(0)).unwrap();
    let s = g.sum(o[2][2]);
    g.backward(s).unwrap();
    let grad = g.grad(v).unwrap();
    for n in 0..2 {
        for c in 0..4 {
            for y in 0..24 {
                for x in 0..12 {
                    let gv = grad.data()[((n * 4 + c) * 24 + y) * 12 + x];
                    if y < 16 {
                        assert_eq!(gv, 0.0);
                    }
                }
            }
        }
    }
    assert!(grad.data().iter().any(|&v| v != 0.0));
}

#[test]
fn bmn_embedding_dims_and_determinism() {
    let mut r = rng(4);
    for (levels, dim) in [(MgeLevels::Both, 1024), (MgeLevels::Coarse, 512)] {
        let mut store = ParamStore::new();
        let cfg = MgeConfig {
            levels,
            ..MgeConfig::default()
        };
        let bmn = Bmn::new(&mut store, "bmn", 4, &cfg, &mut r).unwrap();
        let x = Tensor::randn(&[1, 4, 24, 12], 1.0, &mut r);
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.constant(x.clone());
        let b = g.constant(x);
        let ya = bmn.embed(&mut g, a, &mut rng(1)).unwrap();
        let yb = bmn.embed(&mut g, b, &mut rng(2)).unwrap();
        assert_eq!(g.shape(ya), &[1, dim]);
        assert_eq!(g.value(ya), g.value(yb));
    }
}

#[test]
fn gfe_properties() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let gfe = GfeLevel::new(&mut store, "gfe", 5, 512, &mut r);
    let mut g = Graph::new(&store, Mode::Eval);
    let c = g.constant(Tensor::full(&[1, 5, 24, 12], 0.7));
    let pooled = g.global_max_pool(c).unwrap();
    assert!(g.value(pooled).data().iter().all(|&v| v == 0.7));
    let y = gfe.forward(&mut g, c).unwrap();
    assert_eq!(g.shape(y), &[1, 512]);

    let x = Tensor::randn(&[1, 5, 12, 6], 1.0, &mut r);
    let mut perm: Vec<usize> = (0..72).collect();
    rand::seq::SliceRandom::shuffle(&mut perm[..], &mut r);
    let permuted = Tensor::from_fn(&[1, 5, 12, 6], |i| x.data()[(i / 72) * 72 + perm[i % 72]]);
    let a = g.constant(x);
    let b = g.constant(permuted);
    let ya = gfe.forward(&mut g, a).unwrap();
    let yb = gfe.forward(&mut g, b).unwrap();
    assert_eq!(g.value(ya), g.value(yb));
}

#[test]
fn bnr_map_norm_examples() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let on = BnrHead::new(&mut store, "bnr", BnrMode::On);
    let nobn = BnrHead::new(&mut store, "bnr_plain", BnrMode::NoBn);
    let off = BnrHead::new(&mut store, "bnr_off", BnrMode::Off);
    let bn = on.bn.unwrap();
    store.set(bn.running_mean, Tensor::scalar(2.0)).unwrap();

    let e = Tensor::new(&[1, 2], vec![1.2, 1.6]).unwrap(); // norm 2
    let mut g = Graph::new(&store, Mode::Eval);
    let v = g.constant(e);
    let q = on.map_norm(&mut g, v).unwrap().unwrap();
    assert!((g.value(q).item() - 0.5).abs() < 1e-12);
    assert!(off.map_norm(&mut g, v).unwrap().is_none());

    let batch = Tensor::randn(&[20, 8], 1.0, &mut r);
    let b = g.constant(batch.clone());
    let q = nobn.map_norm(&mut g, b).unwrap().unwrap();
    assert!(g.value(q).data().iter().all(|&p| (0.5..1.0).contains(&p)));
    let z = g.constant(Tensor::zeros(&[1, 8]));
    let qz = nobn.map_norm(&mut g, z).unwrap().unwrap();
    assert_eq!(g.value(qz).item(), 0.5);

    // Monotone in the norm with frozen statistics.
    let scaled: Vec<f64> = (1..10)
        .map(|k| {
            let row = g.constant(Tensor::full(&[1, 8], k as f64 * 0.3));
            let q = on.map_norm(&mut g, row).unwrap().unwrap();
            g.value(q).item()
        })
        .collect();
    assert!(scaled.windows(2).all(|w| w[1] > w[0]));

    let mut tg = Graph::new(&store, Mode::Train);
    let empty = tg.constant(Tensor::zeros(&[0, 8]));
    assert!(on.map_norm(&mut tg, empty).is_err());
}

#[test]
fn bnr_loss_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Train);
    let q = g.input(Tensor::new(&[2], vec![0.5, 0.5]).unwrap());
    let (l, clamped) = bnr_loss(&mut g, q, &[true, false]).unwrap();
    assert!(!clamped);
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

    let mut g = Graph::new(&store, Mode::Train);
    let q = g.input(Tensor::scalar(0.5));
    let (l, _) = bnr_loss(&mut g, q, &[true]).unwrap();
    g.backward(l).unwrap();
    assert!((g.grad(q).unwrap().item() + 2.0).abs() < 1e-12);
    let h = 1e-4;
    let f = |p: f64| -p.ln();
    let fd = (f(0.5 + h) - f(0.5 - h)) / (2.0 * h);
    assert!((fd + 2.0).abs() < 1e-6);

    let mut g = Graph::new(&store, Mode::Train);
    let q = g.input(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
    let (l, clamped) = bnr_loss(&mut g, q, &[true, false]).unwrap();
    assert!(clamped);
    assert!(g.value(l).item().is_finite());

    // Monotone: decreasing towards the target.
    let mut prev = f64::INFINITY;
    for k in 1..10 {
        let mut g = Graph::new(&store, Mode::Train);
        let q = g.input(Tensor::scalar(k as f64 / 10.0));
        let (l, _) = bnr_loss(&mut g, q, &[true]).unwrap();
        assert!(g.value(l).item() < prev);
        prev = g.value(l).item();
    }
}

#[test]
fn bnr_gradient_moves_norms_apart() {
    let mut store = ParamStore::new();
    let head = BnrHead::new(&mut store, "bnr", BnrMode::On);
    store.set(head.bn.unwrap().running_mean, Tensor::scalar(1.0)).unwrap();
    let person = Tensor::new(&[1, 3], vec![0.6, 0.8, 0.0]).unwrap();
    for (is_person, grows) in [(true, true), (false, false)] {
        let mut g = Graph::new(&store, Mode::Eval);
        let e = g.input(person.clone());
        let q = head.map_norm(&mut g, e).unwrap().unwrap();
        let (l, _) = bnr_loss(&mut g, q, &[is_person]).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(e).unwrap();
        let stepped = person.zip_map(grad, |x, d| x - 0.1 * d);
        assert_eq!(stepped.norm() > person.norm(), grows);
    }
}

#[test]
fn bmn_full_gradient_check() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let cfg = MgeConfig {
        level_dim: 3,
        cbam_reduction: 2,
        drop_path: 0.0,
        ..MgeConfig::default()
    };
    let bmn = Bmn::new(&mut store, "bmn", 2, &cfg, &mut r).unwrap();
    let bnr = BnrHead::new(&mut store, "bnr", BnrMode::On);
    let x = Tensor::randn(&[3, 2, 24, 12], 1.0, &mut r);
    let gc = GradCheckConfig {
        max_entries: Some(12),
        ..GradCheckConfig::default()
    };
    for mode in [Mode::Train, Mode::Eval] {
        let forward = |g: &mut Graph, v: scene_reid::Var| {
            let e = bmn.embed(g, v, &mut rng(0))?;
            let q = bnr.map_norm(g, e)?.unwrap();
            let (l, _) = bnr_loss(g, q, &[true, false, true])?;
            let s = g.sum(e);
            let s = g.scale(s, 0.01);
            g.add(l, s)
        };
        let report = check_inputs(&store, mode, &[x.clone()], &gc, |g, v| forward(g, v[0])).unwrap();
        assert!(report.passed(FD_REL_TOL), "{mode:?} inputs {report:?}");
        let report = check_params(&store, mode, None, &gc, |g| {
            let v = g.constant(x.clone());
            forward(g, v)
        })
        .unwrap();
        assert!(report.passed(FD_REL_TOL), "{mode:?} params {report:?}");
    }
}

#[test]
fn ablation_flags_parse() {
    assert_eq!("gfe".parse::<EmbeddingKind>().unwrap(), EmbeddingKind::Gfe);
    assert_eq!("12x6".parse::<MgeLevels>().unwrap(), MgeLevels::Coarse);
    assert_eq!("no-bn".parse::<BnrMode>().unwrap(), BnrMode::NoBn);
    assert!("bogus".parse::<BnrMode>().is_err());
}
