use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scene_reid::fmn::*;
use scene_reid::gradcheck::{check_inputs, check_params, GradCheckConfig, FD_REL_TOL};
use scene_reid::{Graph, Mode, ParamStore, ReidError, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_cfg(dim: usize) -> FmnConfig {
    FmnConfig {
        mode: FmnMode::CrossAttention,
        extractor_channels: [4, 3],
        heads: 2,
        ffn_hidden: dim + 2,
    }
}

#[test]
fn extractor_channel_plan() {
    let mut store = ParamStore::new();
    let ex = NoiseExtractor::new(&mut store, "ex", 8, [512, 256], 1024, &mut rng(0));
    assert_eq!(ex.channel_plan(&store), vec![8, 512, 256, 1024]);
    assert_eq!(ex.channel_plan(&store)[2], 256);

    let mut store = ParamStore::new();
    let ex = NoiseExtractor::new(&mut store, "ex", 3, [5, 4], 6, &mut rng(0));
    let mut g = Graph::new(&store, Mode::Eval);
    let z = g.constant(Tensor::zeros(&[1, 3, 8, 9]));
    let a = ex.forward(&mut g, z).unwrap();
    let b = ex.forward(&mut g, z).unwrap();
    assert_eq!(g.shape(a), &[1, 6, 8, 9]);
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn tokenizer_examples() {
    let mut store = ParamStore::new();
    let tok = NoiseTokenizer::new(&mut store, "tok", 6, &mut rng(1));
    let mut g = Graph::new(&store, Mode::Eval);
    let noise = g.constant(Tensor::from_fn(&[2, 6, 9, 11], |i| ((i / 99) % 6) as f64 * 0.3));
    let t = tok.forward(&mut g, noise).unwrap();
    assert_eq!(g.shape(t), &[2, TOKEN_COUNT, 6]);
    let rows = g.value(t).clone().reshape(&[2 * TOKEN_COUNT, 6]).unwrap();
    assert!((1..TOKEN_COUNT).any(|i| rows.row(i) != rows.row(0)));

    store.set(tok.position, Tensor::zeros(&[TOKEN_COUNT, 6])).unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let noise = g.constant(Tensor::from_fn(&[2, 6, 9, 11], |i| ((i / 99) % 6) as f64 * 0.3));
    let t = tok.forward(&mut g, noise).unwrap();
    let rows = g.value(t).clone().reshape(&[2 * TOKEN_COUNT, 6]).unwrap();
    assert!((1..TOKEN_COUNT).all(|i| rows.row(i) == rows.row(0)));

    let small = g.constant(Tensor::zeros(&[1, 6, 6, 9]));
    assert!(tok.forward(&mut g, small).is_err());
}

#[test]
fn align_examples() {
    let ids = [0, 0, 0, 1, 2, 2];
    let layout = AlignedBatch::new(&ids, 3).unwrap();
    assert_eq!(layout.group, 3);
    assert_eq!(layout.padding(), 3);
    let even = AlignedBatch::new(&[1, 0, 1, 0], 2).unwrap();
    assert_eq!(even.padding(), 0);
    assert!(matches!(AlignedBatch::new(&[0, 4], 2), Err(ReidError::UnknownScene(4))));

    let x = Tensor::from_fn(&[6, 2], |i| i as f64 + 1.0);
    let aligned = layout.align_tensor(&x).unwrap();
    assert_eq!(aligned.shape(), &[3, 3, 2]);
    for (slot, owner) in layout.slots.iter().enumerate() {
        let row = &aligned.data()[slot * 2..slot * 2 + 2];
        match owner {
            Some(i) => assert_eq!(row, x.row(*i)),
            None => assert_eq!(row, &[0.0, 0.0]),
        }
    }
    assert_eq!(layout.de_align_tensor(&aligned).unwrap(), x);

    let single = AlignedBatch::new(&[0], 1).unwrap();
    let one = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    assert_eq!(single.align_tensor(&one).unwrap().into_data(), one.data());
}

#[test]
fn align_round_trip_thousand_cases() {
    let mut r = rng(2);
    for _ in 0..1000 {
        let scenes = r.gen_range(1..6);
        let n = r.gen_range(1..12);
        let ids: Vec<usize> = (0..n).map(|_| r.gen_range(0..scenes)).collect();
        let d = r.gen_range(1..5);
        let x = Tensor::randn(&[n, d], 1.0, &mut r);
        let layout = AlignedBatch::new(&ids, scenes).unwrap();
        let aligned = layout.align_tensor(&x).unwrap();
        let pad_rows = layout.slots.iter().enumerate().filter(|(_, s)| s.is_none());
        for (slot, _) in pad_rows {
            assert!(aligned.data()[slot * d..(slot + 1) * d].iter().all(|&v| v == 0.0));
        }
        assert_eq!(layout.de_align_tensor(&aligned).unwrap(), x);
    }
}

proptest! {
    #[test]
    fn align_round_trip_property(ids in proptest::collection::vec(0usize..4, 1..10)) {
        let layout = AlignedBatch::new(&ids, 4).unwrap();
        let x = Tensor::from_fn(&[ids.len(), 3], |i| i as f64);
        prop_assert_eq!(layout.de_align_tensor(&layout.align_tensor(&x).unwrap()).unwrap(), x);
        prop_assert_eq!(layout.mask().iter().filter(|m| **m).count(), ids.len());
    }
}

fn build(dim: usize, seed: u64) -> (ParamStore, Denoiser) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let d = Denoiser::new(&mut store, "dn", dim, &tiny_cfg(dim), &mut r).unwrap();
    let bn = d.bn;
    store.set(bn.running_mean, Tensor::randn(&[dim], 0.3, &mut r)).unwrap();
    store.set(bn.running_var, Tensor::uniform(&[dim], 0.5, 1.5, &mut r)).unwrap();
    (store, d)
}

#[test]
fn denoiser_members_are_independent_in_eval() {
    let dim = 8;
    let (store, den) = build(dim, 3);
    let mut r = rng(4);
    let tokens = Tensor::randn(&[2, TOKEN_COUNT, dim], 1.0, &mut r);
    for _ in 0..20 {
        let q = Tensor::randn(&[2, 3, dim], 1.0, &mut r);
        let mut other = Tensor::randn(&[2, 3, dim], 1.0, &mut r);
        other.data_mut()[..dim].copy_from_slice(&q.data()[..dim]);
        let run = |qt: &Tensor| {
            let mut g = Graph::new(&store, Mode::Eval);
            let qv = g.constant(qt.clone());
            let tv = g.constant(tokens.clone());
            let o = den.forward(&mut g, qv, tv, &[true; 6]).unwrap();
            g.value(o).data()[..dim].to_vec()
        };
        assert_eq!(run(&q), run(&other));
    }
}

#[test]
fn padding_never_changes_real_offsets_in_eval() {
    let dim = 8;
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let fmn = Fmn::new(&mut store, "fmn", 3, dim, &tiny_cfg(dim), &mut r).unwrap().unwrap();
    let scene = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r);
    let emb = Tensor::randn(&[3, dim], 1.0, &mut r);
    let run = |e: &Tensor, ids: &[usize]| {
        let mut g = Graph::new(&store, Mode::Eval);
        let s = g.constant(scene.clone());
        let ev = g.constant(e.clone());
        let o = fmn.offsets(&mut g, s, ev, ids).unwrap();
        g.value(o).clone()
    };
    // Scene 1 has one member and two padded slots; moving members changes the padding only.
    let a = run(&emb, &[0, 0, 1]);
    let b = run(&emb.index0(2).reshape(&[1, dim]).unwrap(), &[1]);
    assert_eq!(a.row(2), b.row(0));
    let c = run(&emb, &[0, 1, 1]);
    assert_eq!(a.row(0), c.row(0));
}

#[test]
fn identical_tokens_make_attention_query_independent() {
    let dim = 8;
    let (store, den) = build(dim, 6);
    let mut r = rng(7);
    let token = Tensor::randn(&[dim], 1.0, &mut r);
    let tokens = Tensor::from_fn(&[1, TOKEN_COUNT, dim], |i| token.data()[i % dim]);
    let q = Tensor::randn(&[1, 2, dim], 1.0, &mut r);
    let mut g = Graph::new(&store, Mode::Eval);
    let qv = g.constant(q);
    let tv = g.constant(tokens);
    let trace = den.trace(&mut g, qv, tv, &[true; 2]).unwrap();
    let a = g.value(trace.attended);
    for j in 0..dim {
        assert!((a.data()[j] - a.data()[dim + j]).abs() < 1e-12);
    }
    // Nothing downstream of the attention sees the query again.
    let o = g.value(trace.offsets);
    for j in 0..dim {
        assert!((o.data()[j] - o.data()[dim + j]).abs() < 1e-12);
    }
}

#[test]
fn cross_attention_has_no_residual() {
    let dim = 8;
    let (mut store, den) = build(dim, 8);
    let v = den.attn.v_proj;
    store.set(v.weight, Tensor::zeros(&[dim, dim])).unwrap();
    store.set(v.bias.unwrap(), Tensor::zeros(&[dim])).unwrap();
    let mut r = rng(9);
    let mut g = Graph::new(&store, Mode::Eval);
    let qv = g.constant(Tensor::randn(&[2, 2, dim], 1.0, &mut r));
    let tv = g.constant(Tensor::randn(&[2, TOKEN_COUNT, dim], 1.0, &mut r));
    let trace = den.trace(&mut g, qv, tv, &[true; 4]).unwrap();
    let out_bias = store.get(den.attn.out_proj.bias.unwrap()).clone();
    for row in g.value(trace.attended).data().chunks(dim) {
        assert_eq!(row, out_bias.data());
    }
    store.set(den.attn.out_proj.bias.unwrap(), Tensor::zeros(&[dim])).unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let qv = g.constant(Tensor::randn(&[2, 2, dim], 1.0, &mut r));
    let tv = g.constant(Tensor::randn(&[2, TOKEN_COUNT, dim], 1.0, &mut r));
    let trace = den.trace(&mut g, qv, tv, &[true; 4]).unwrap();
    assert!(g.value(trace.attended).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_weights_normalized() {
    let dim = 16;
    let (store, den) = build(dim, 10);
    let mut r = rng(11);
    let q = Tensor::randn(&[3, 4, dim], 2.0, &mut r);
    let t = Tensor::randn(&[3, TOKEN_COUNT, dim], 2.0, &mut r);
    let w = den.attn.weights(&store, &q, &t).unwrap();
    for row in w.data().chunks(TOKEN_COUNT) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn fmn_apply_examples() {
    let store = ParamStore::new();
    let mut r = rng(12);
    let mut g = Graph::new(&store, Mode::Eval);
    let e = g.constant(Tensor::randn(&[2, 1024], 1.0, &mut r));
    let z = g.constant(Tensor::zeros(&[2, 1024]));
    let o1 = g.constant(Tensor::randn(&[2, 1024], 1.0, &mut r));
    let o2 = g.constant(Tensor::randn(&[2, 1024], 1.0, &mut r));
    let same = fmn_apply(&mut g, e, z).unwrap();
    assert_eq!(g.value(same), g.value(e));
    let o12 = g.add(o1, o2).unwrap();
    let a = fmn_apply(&mut g, e, o12).unwrap();
    let b1 = fmn_apply(&mut g, e, o1).unwrap();
    let b = fmn_apply(&mut g, b1, o2).unwrap();
    assert_eq!(g.shape(a), &[2, 1024]);
    for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn linear_variant_shares_offsets_within_scene() {
    let dim = 6;
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let cfg = FmnConfig {
        mode: FmnMode::Linear,
        ..tiny_cfg(dim)
    };
    let fmn = Fmn::new(&mut store, "fmn", 3, dim, &cfg, &mut r).unwrap().unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let s = g.constant(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r));
    let e = g.constant(Tensor::randn(&[3, dim], 1.0, &mut r));
    let o = fmn.offsets(&mut g, s, e, &[1, 0, 1]).unwrap();
    let v = g.value(o);
    assert_eq!(v.shape(), &[3, dim]);
    assert_eq!(v.row(0), v.row(2));
    assert_ne!(v.row(0), v.row(1));

    let c = g.constant(Tensor::full(&[2, 3, 8, 8], 0.4));
    let o = fmn.offsets(&mut g, c, e, &[0, 1, 1]).unwrap();
    assert_eq!(g.value(o).row(0), g.value(o).row(1));

    let cfg = FmnConfig {
        mode: FmnMode::Off,
        ..tiny_cfg(dim)
    };
    assert!(Fmn::new(&mut store, "off", 3, dim, &cfg, &mut r).unwrap().is_none());
}

#[test]
fn fmn_full_gradient_check() {
    let dim = 4;
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let fmn = Fmn::new(&mut store, "fmn", 2, dim, &tiny_cfg(dim), &mut r).unwrap().unwrap();
    let scene = Tensor::randn(&[2, 2, 7, 8], 1.0, &mut r);
    let emb = Tensor::randn(&[5, dim], 1.0, &mut r);
    let ids = [0, 1, 0, 0, 1];
    let gc = GradCheckConfig {
        max_entries: Some(10),
        ..GradCheckConfig::default()
    };
    for mode in [Mode::Train, Mode::Eval] {
        let report = check_inputs(&store, mode, &[scene.clone(), emb.clone()], &gc, |g, v| {
            let o = fmn.offsets(g, v[0], v[1], &ids)?;
            fmn_apply(g, v[1], o)
        })
        .unwrap();
        assert!(report.passed(FD_REL_TOL), "{mode:?} {report:?}");
        let report = check_params(&store, mode, None, &gc, |g| {
            let s = g.constant(scene.clone());
            let e = g.constant(emb.clone());
            fmn.offsets(g, s, e, &ids)
        })
        .unwrap();
        assert!(report.passed(FD_REL_TOL), "{mode:?} {report:?}");
    }
    let OffsetHead::CrossAttention { tokenizer, .. } = &fmn.head else {
        unreachable!()
    };
    let only = [tokenizer.position];
    let full = GradCheckConfig::default();
    let report = check_params(&store, Mode::Train, Some(&only), &full, |g| {
        let s = g.constant(scene.clone());
        let e = g.constant(emb.clone());
        fmn.offsets(g, s, e, &ids)
    })
    .unwrap();
    assert_eq!(report.checked, TOKEN_COUNT * dim);
    assert!(report.passed(FD_REL_TOL), "{report:?}");
}
