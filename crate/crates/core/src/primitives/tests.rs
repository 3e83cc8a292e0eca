use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_inputs, check_params, GradCheckConfig, FD_REL_TOL};
use crate::graph::{Graph, Mode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_inputs_ok<F>(store: &ParamStore, mode: Mode, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[crate::Var]) -> crate::Result<crate::Var>,
{
    let report = check_inputs(store, mode, inputs, &GradCheckConfig::default(), f).unwrap();
    assert!(report.passed(FD_REL_TOL), "{report:?}");
}

fn assert_params_ok<F>(store: &ParamStore, mode: Mode, f: F)
where
    F: Fn(&mut Graph) -> crate::Result<crate::Var>,
{
    let report = check_params(store, mode, None, &GradCheckConfig::default(), f).unwrap();
    assert!(report.passed(FD_REL_TOL), "{report:?}");
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(1);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[3, 4], 1.0, &mut r);
    let bias = Tensor::randn(&[4], 1.0, &mut r);
    let store = ParamStore::new();
    assert_inputs_ok(&store, Mode::Eval, &[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let r = g.relu(m);
        let sg = g.sigmoid(v[0]);
        let k = g.scale(sg, 1.7);
        g.add(r, k)
    });
    assert_inputs_ok(&store, Mode::Eval, &[a, bias], |g, v| g.add_broadcast(v[0], v[1]));
}

#[test]
fn gate_gradients() {
    let mut r = rng(2);
    let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut r);
    let cg = Tensor::randn(&[2, 3], 1.0, &mut r);
    let sg = Tensor::randn(&[2, 1, 4, 5], 1.0, &mut r);
    let store = ParamStore::new();
    assert_inputs_ok(&store, Mode::Eval, &[x.clone(), cg], |g, v| g.mul_channel_gate(v[0], v[1]));
    assert_inputs_ok(&store, Mode::Eval, &[x, sg], |g, v| g.mul_spatial_gate(v[0], v[1]));
}

#[test]
fn shape_op_gradients() {
    let mut r = rng(3);
    let x = Tensor::randn(&[2, 6, 4], 1.0, &mut r);
    let y = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let m = Tensor::randn(&[5, 3], 1.0, &mut r);
    let store = ParamStore::new();
    assert_inputs_ok(&store, Mode::Eval, &[x.clone(), y], |g, v| {
        let s = g.slice_axis(v[0], 1, 2, 3)?;
        let c = g.concat(&[s, v[1], v[0]], 1)?;
        g.reshape(c, &[2, 48])
    });
    assert_inputs_ok(&store, Mode::Eval, &[m.clone()], |g, v| {
        g.gather_rows(v[0], &[Some(2), None, Some(0), Some(2)])
    });
    assert_inputs_ok(&store, Mode::Eval, &[m.clone()], |g, v| g.row_norm(v[0]));
    assert_inputs_ok(&store, Mode::Eval, &[m.clone()], |g, v| g.l2_normalize_rows(v[0]));
    assert_inputs_ok(&store, Mode::Eval, &[m.clone()], |g, v| {
        let a = g.min_all(v[0])?;
        let b = g.max_all(v[0])?;
        g.sub(b, a)
    });
    let map = Tensor::randn(&[2, 3, 2, 4], 1.0, &mut r);
    assert_inputs_ok(&store, Mode::Eval, &[map], |g, v| g.spatial_tokens(v[0]));
}

#[test]
fn linear_and_conv_gradients() {
    let mut r = rng(4);
    let store = ParamStore::new();
    let x = Tensor::randn(&[3, 5], 1.0, &mut r);
    let w = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[4], 1.0, &mut r);
    assert_inputs_ok(&store, Mode::Eval, &[x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])));
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (7, 1, 3)] {
        let x = Tensor::randn(&[2, 2, 7, 6], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, k, k], 0.5, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        assert_inputs_ok(&store, Mode::Eval, &[x, w, b], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        });
    }
}

#[test]
fn norm_gradients_train_and_eval() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let bn = BatchNormState::new(&mut store, "bn", 3);
    store.set(bn.gamma, Tensor::randn(&[3], 1.0, &mut r)).unwrap();
    store.set(bn.beta, Tensor::randn(&[3], 1.0, &mut r)).unwrap();
    store.set(bn.running_mean, Tensor::randn(&[3], 1.0, &mut r)).unwrap();
    store.set(bn.running_var, Tensor::uniform(&[3], 0.5, 2.0, &mut r)).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    store.set(ln.gamma, Tensor::randn(&[6], 1.0, &mut r)).unwrap();

    let v = Tensor::randn(&[5, 3], 1.0, &mut r);
    let map = Tensor::randn(&[2, 3, 3, 2], 1.0, &mut r);
    for mode in [Mode::Train, Mode::Eval] {
        assert_inputs_ok(&store, mode, &[v.clone()], |g, x| g.batch_norm(x[0], &bn, None));
        assert_inputs_ok(&store, mode, &[map.clone()], |g, x| g.batch_norm(x[0], &bn, None));
        let mask = [true, false, true, true, false];
        assert_inputs_ok(&store, mode, &[v.clone()], |g, x| g.batch_norm(x[0], &bn, Some(&mask)));
        let vc = g_const(&v);
        assert_params_ok(&store, mode, |g| {
            let x = g.constant(vc.clone());
            g.batch_norm(x, &bn, Some(&mask))
        });
    }
    let tokens = Tensor::randn(&[2, 4, 6], 1.0, &mut r);
    assert_inputs_ok(&store, Mode::Eval, &[tokens.clone()], |g, x| ln.forward(g, x[0]));
    assert_params_ok(&store, Mode::Eval, |g| {
        let x = g.constant(tokens.clone());
        ln.forward(g, x)
    });
}

fn g_const(t: &Tensor) -> Tensor {
    t.clone()
}

#[test]
fn pool_gradients() {
    let mut r = rng(6);
    let store = ParamStore::new();
    let x = Tensor::randn(&[2, 3, 9, 8], 1.0, &mut r);
    assert_inputs_ok(&store, Mode::Eval, &[x.clone()], |g, v| g.global_max_pool(v[0]));
    assert_inputs_ok(&store, Mode::Eval, &[x.clone()], |g, v| g.global_avg_pool(v[0]));
    assert_inputs_ok(&store, Mode::Eval, &[x.clone()], |g, v| g.channel_mean(v[0]));
    assert_inputs_ok(&store, Mode::Eval, &[x.clone()], |g, v| g.channel_max(v[0]));
    assert_inputs_ok(&store, Mode::Eval, &[x], |g, v| g.adaptive_max_pool(v[0], 7, 7));
}

#[test]
fn roi_align_gradient() {
    let mut r = rng(7);
    let store = ParamStore::new();
    let x = Tensor::randn(&[2, 2, 5, 6], 1.0, &mut r);
    let rois = [
        RoiBox::new(0, 0.4, 0.3, 3.9, 4.8),
        RoiBox::new(1, 1.0, 0.0, 6.0, 5.0),
        RoiBox::new(0, 2.2, 1.7, 2.9, 2.6),
    ];
    assert_inputs_ok(&store, Mode::Eval, &[x], |g, v| g.roi_align(v[0], &rois, 6, 3));
}

#[test]
fn attention_gradient() {
    let mut r = rng(8);
    let store = ParamStore::new();
    let q = Tensor::randn(&[2, 3, 8], 1.0, &mut r);
    let k = Tensor::randn(&[2, 5, 8], 1.0, &mut r);
    let v = Tensor::randn(&[2, 5, 8], 1.0, &mut r);
    assert_inputs_ok(&store, Mode::Eval, &[q, k, v], |g, x| g.attention(x[0], x[1], x[2], 2));
}

#[test]
fn loss_gradients() {
    let mut r = rng(9);
    let store = ParamStore::new();
    let q = Tensor::uniform(&[6], 0.05, 0.95, &mut r);
    let y = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    assert_inputs_ok(&store, Mode::Eval, &[q], |g, v| Ok(g.binary_cross_entropy(v[0], &y)?.0));
    let logits = Tensor::randn(&[3, 5], 2.0, &mut r);
    let valid: Vec<bool> = (0..15).map(|i| i % 4 != 3).collect();
    assert_inputs_ok(&store, Mode::Eval, &[logits], |g, v| {
        g.softmax_cross_entropy(v[0], &[0, 1, 4], Some(&valid))
    });
}

#[test]
fn layer_gradients_through_parameters() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let cbam = Cbam::new(&mut store, "cbam", 8, 4, &mut r);
    let attn = CrossAttention::new(&mut store, "attn", 8, 2, &mut r).unwrap();
    let ffn = FeedForward::new(&mut store, "ffn", 8, 12, &mut r);
    let map = Tensor::randn(&[2, 8, 4, 3], 1.0, &mut r);
    let q = Tensor::randn(&[2, 3, 8], 1.0, &mut r);
    let kv = Tensor::randn(&[2, 7, 8], 1.0, &mut r);
    assert_inputs_ok(&store, Mode::Eval, &[map.clone()], |g, v| cbam.forward(g, v[0]));
    assert_params_ok(&store, Mode::Eval, |g| {
        let x = g.constant(map.clone());
        cbam.forward(g, x)
    });
    assert_inputs_ok(&store, Mode::Eval, &[q.clone(), kv.clone()], |g, v| attn.forward(g, v[0], v[1]));
    assert_params_ok(&store, Mode::Eval, |g| {
        let a = g.constant(q.clone());
        let b = g.constant(kv.clone());
        let y = attn.forward(g, a, b)?;
        let flat = g.reshape(y, &[6, 8])?;
        ffn.forward(g, flat)
    });
}

#[test]
fn drop_path_gradient_with_fixed_mask() {
    let mut r = rng(11);
    let store = ParamStore::new();
    let x = Tensor::randn(&[6, 4], 1.0, &mut r);
    assert_inputs_ok(&store, Mode::Train, &[x], |g, v| {
        let mut mask_rng = rng(99);
        drop_path(g, v[0], 0.3, &mut mask_rng)
    });
}

// --- forward examples -------------------------------------------------------

fn eval_graph(store: &ParamStore) -> Graph<'_> {
    Graph::new(store, Mode::Eval)
}

#[test]
fn zero_input_convolution_is_zero() {
    let mut r = rng(12);
    let store = ParamStore::new();
    let mut g = eval_graph(&store);
    let x = g.input(Tensor::zeros(&[1, 3, 5, 5]));
    let w = g.input(Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut r = rng(13);
    let store = ParamStore::new();
    let mut g = eval_graph(&store);
    let xt = Tensor::randn(&[1, 1, 4, 5], 1.0, &mut r);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let x = g.input(xt.clone());
    let w = g.input(k);
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn batch_norm_examples() {
    let mut store = ParamStore::new();
    let bn = BatchNormState::new(&mut store, "bn", 1);
    {
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap());
        let y = bn.forward(&mut g, x).unwrap();
        let s = (1.0f64 + NORM_EPS).sqrt();
        assert!((g.value(y).data()[0] + 1.0 / s).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 1.0 / s).abs() < 1e-12);
        let single = g.input(Tensor::new(&[1, 1], vec![3.0]).unwrap());
        assert!(matches!(bn.forward(&mut g, single), Err(crate::ReidError::BatchTooSmall(_))));
    }
    store.set(bn.gamma, Tensor::scalar(2.0)).unwrap();
    store.set(bn.beta, Tensor::scalar(3.0)).unwrap();
    let mut g = eval_graph(&store);
    let x = g.input(Tensor::new(&[1, 1], vec![1.0]).unwrap());
    let y = bn.forward(&mut g, x).unwrap();
    assert!((g.value(y).item() - (2.0 / (1.0f64 + NORM_EPS).sqrt() + 3.0)).abs() < 1e-12);
    assert!((g.value(y).item() - 5.0).abs() < 1e-4);
}

#[test]
fn batch_norm_updates_running_stats_only_in_training() {
    let mut store = ParamStore::new();
    let bn = BatchNormState::new(&mut store, "bn", 2);
    let x = Tensor::new(&[3, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
    let mut g = eval_graph(&store);
    let v = g.input(x.clone());
    bn.forward(&mut g, v).unwrap();
    assert!(g.take_stat_updates().is_empty());
    let mut g = Graph::new(&store, Mode::Train);
    let v = g.input(x);
    bn.forward(&mut g, v).unwrap();
    let updates = g.take_stat_updates();
    assert_eq!(updates.len(), 2);
    let mean = &updates[0].1;
    assert!((mean.data()[0] - 0.2).abs() < 1e-12 && (mean.data()[1] - 2.0).abs() < 1e-12);
    let var = &updates[1].1;
    assert!((var.data()[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-12);
}

#[test]
fn layer_norm_examples() {
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 4);
    let ln2 = LayerNorm::new(&mut store, "ln2", 2);
    let ln1 = LayerNorm::new(&mut store, "ln1", 1);
    let mut g = eval_graph(&store);
    let flat = g.input(Tensor::ones(&[1, 4]));
    let y = ln.forward(&mut g, flat).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));
    let a = 3.5;
    let pair = g.input(Tensor::new(&[1, 2], vec![-a, a]).unwrap());
    let y = ln2.forward(&mut g, pair).unwrap();
    assert!((g.value(y).data()[0] + 1.0).abs() < 1e-5);
    assert!((g.value(y).data()[1] - 1.0).abs() < 1e-5);
    let one = g.input(Tensor::ones(&[1, 1]));
    assert!(ln1.forward(&mut g, one).is_err());
}

proptest! {
    #[test]
    fn layer_norm_commutes_with_permutation(
        vals in proptest::collection::vec(-5.0f64..5.0, 6),
        perm_seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut rng(perm_seed));
        let permuted: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();
        let mut g = eval_graph(&store);
        let a = g.input(Tensor::new(&[1, 6], vals.clone()).unwrap());
        let b = g.input(Tensor::new(&[1, 6], permuted).unwrap());
        let ya = ln.forward(&mut g, a).unwrap();
        let yb = ln.forward(&mut g, b).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((g.value(yb).data()[j] - g.value(ya).data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_and_pool_shapes_follow_arithmetic(
        c in 1usize..4, h in 7usize..16, w in 7usize..16, stride in 1usize..3, k in prop_oneof![Just(3usize), Just(7)],
    ) {
        let mut r = rng((c * 1000 + h * 10 + w) as u64);
        let store = ParamStore::new();
        let mut g = eval_graph(&store);
        let x = g.input(Tensor::randn(&[2, c, h, w], 1.0, &mut r));
        let wt = g.input(Tensor::randn(&[3, c, k, k], 1.0, &mut r));
        let pad = k / 2;
        let y = g.conv2d(x, wt, None, stride, pad).unwrap();
        prop_assert_eq!(g.shape(y), &[2, 3, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1][..]);
        let p = g.adaptive_max_pool(x, 7, 7).unwrap();
        prop_assert_eq!(g.shape(p), &[2, c, 7, 7][..]);
        let rois = [RoiBox::new(1, 0.5, 0.5, w as f64 - 0.5, h as f64 - 1.0)];
        let ra = g.roi_align(x, &rois, 24, 12).unwrap();
        prop_assert_eq!(g.shape(ra), &[1, c, 24, 12][..]);
    }
}

#[test]
fn cbam_gates_never_amplify() {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let cbam = Cbam::new(&mut store, "cbam", 32, 16, &mut r);
    let xt = Tensor::randn(&[1, 32, 24, 12], 3.0, &mut r);
    let mut g = eval_graph(&store);
    let x = g.input(xt.clone());
    let y = cbam.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), xt.shape());
    for (a, b) in g.value(y).data().iter().zip(xt.data()) {
        assert!(a.abs() <= b.abs());
    }
    let z = g.input(Tensor::zeros(&[1, 32, 24, 12]));
    let yz = cbam.forward(&mut g, z).unwrap();
    assert!(g.value(yz).data().iter().all(|&v| v == 0.0));
}

#[test]
fn cbam_keeps_full_size_shape() {
    let mut r = rng(15);
    let mut store = ParamStore::new();
    let cbam = Cbam::new(&mut store, "cbam", 256, 16, &mut r);
    let mut g = eval_graph(&store);
    let x = g.input(Tensor::randn(&[1, 256, 24, 12], 1.0, &mut r));
    let y = cbam.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[1, 256, 24, 12]);
}

#[test]
fn drop_path_examples() {
    let mut r = rng(16);
    let store = ParamStore::new();
    let xt = Tensor::randn(&[1, 5], 1.0, &mut r);

    let mut g = eval_graph(&store);
    let x = g.input(xt.clone());
    let y = drop_path(&mut g, x, 0.1, &mut r).unwrap();
    assert_eq!(g.value(y), &xt);
    assert!(drop_path(&mut g, x, 1.0, &mut r).is_err());

    let mut g = Graph::new(&store, Mode::Train);
    let x = g.input(xt.clone());
    let y = drop_path(&mut g, x, 0.0, &mut r).unwrap();
    assert_eq!(g.value(y), &xt);

    // Monte Carlo expectation: 1e5 draws of a single row.
    let trials = 100_000;
    let mut g = Graph::new(&store, Mode::Train);
    let batch = Tensor::from_fn(&[trials, 5], |i| xt.data()[i % 5]);
    let x = g.constant(batch);
    let y = drop_path(&mut g, x, 0.1, &mut r).unwrap();
    let yv = g.value(y);
    for j in 0..5 {
        let mean: f64 = (0..trials).map(|t| yv.data()[t * 5 + j]).sum::<f64>() / trials as f64;
        assert!((mean - xt.data()[j]).abs() <= 0.02 * xt.data()[j].abs(), "{mean} vs {}", xt.data()[j]);
    }
    for t in 0..trials {
        let row = yv.row(t);
        let dropped = row.iter().all(|&v| v == 0.0);
        let kept = row.iter().zip(xt.data()).all(|(a, b)| (a - b / 0.9).abs() < 1e-12);
        assert!(dropped || kept);
    }
}

#[test]
fn attention_examples() {
    let mut r = rng(17);
    let mut store = ParamStore::new();
    let attn = CrossAttention::new(&mut store, "attn", 16, 4, &mut r).unwrap();
    let q = Tensor::randn(&[1, 3, 16], 1.0, &mut r);
    let token = Tensor::randn(&[1, 1, 16], 1.0, &mut r);

    // One key/value token: every query reads that token's projected value.
    let mut g = eval_graph(&store);
    let qv = g.constant(q.clone());
    let tv = g.constant(token.clone());
    let y = attn.forward(&mut g, qv, tv).unwrap();
    let tflat = g.constant(token.clone().reshape(&[1, 16]).unwrap());
    let v = attn.v_proj.forward(&mut g, tflat).unwrap();
    let expected = attn.out_proj.forward(&mut g, v).unwrap();
    for i in 0..3 {
        for (a, b) in g.value(y).row(i).iter().zip(g.value(expected).row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // Identical tokens: uniform weights and the same output as one token.
    let repeated = Tensor::from_fn(&[1, 5, 16], |i| token.data()[i % 16]);
    let w = attn.weights(&store, &q, &repeated).unwrap();
    assert!(w.data().iter().all(|&a| (a - 0.2).abs() < 1e-12));
    let rv = g.constant(repeated);
    let y5 = attn.forward(&mut g, qv, rv).unwrap();
    for (a, b) in g.value(y5).data().iter().zip(g.value(y).data()) {
        assert!((a - b).abs() < 1e-12);
    }

    // Weight rows sum to one.
    let kv = Tensor::randn(&[1, 49, 16], 3.0, &mut r);
    let w = attn.weights(&store, &q, &kv).unwrap();
    for row in w.data().chunks(49) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(CrossAttention::new(&mut store, "bad", 10, 3, &mut r).is_err());
}

#[test]
fn eval_mode_is_deterministic() {
    let mut r = rng(18);
    let mut store = ParamStore::new();
    let cbam = Cbam::new(&mut store, "cbam", 8, 4, &mut r);
    let bn = BatchNormState::new(&mut store, "bn", 8);
    let xt = Tensor::randn(&[2, 8, 5, 4], 1.0, &mut r);
    let run = |seed: u64| {
        let mut g = eval_graph(&store);
        let x = g.input(xt.clone());
        let y = cbam.forward(&mut g, x).unwrap();
        let y = g.batch_norm(y, &bn, None).unwrap();
        let p = g.global_max_pool(y).unwrap();
        let p = drop_path(&mut g, p, 0.1, &mut rng(seed)).unwrap();
        g.value(p).clone()
    };
    assert_eq!(run(1), run(2));
}
