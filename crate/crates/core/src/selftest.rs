//! Quick invariant and gradient suite for the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bmn::{bnr_loss, strip_split, Bmn, BnrHead, BnrMode, EmbeddingKind, MgeConfig, MgeLevel, StripEncoder, FINE_GRID};
use crate::error::Result;
use crate::evaluation::{brute_force_metrics, score_query, summarize, Entry, GalleryIndex};
use crate::fmn::{fmn_apply, AlignedBatch, Denoiser, Fmn, FmnConfig, FmnMode, NoiseExtractor, NoiseTokenizer};
use crate::gradcheck::{check_inputs, check_params, GradCheckConfig, GradCheckReport, FD_REL_TOL};
use crate::graph::{Graph, Mode, Var};
use crate::losses::{boim_loss, oim_loss, triplet_loss, OimConfig, OimState, TripletConfig};
use crate::params::ParamStore;
use crate::pipeline::config::Config;
use crate::pipeline::model::{Backbone, Model, BACKBONE_STRIDE};
use crate::primitives::{drop_path, BatchNormState, Cbam, CrossAttention, LayerNorm, RoiBox};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Two-channel backbone, 8-dimensional embeddings, full 7×7 token grid.
pub fn miniature_config() -> Config {
    let mut c = Config::desk();
    c.model.backbone_channels = [2, 3, 4, 4];
    c.model.level_dim = 4;
    c.model.extractor_channels = [4, 3];
    c.model.heads = 2;
    c.model.ffn_hidden = 6;
    c.data.width = 112;
    c.data.height = 112;
    c.loss.triplet_p = 2;
    c.loss.triplet_n = 3;
    c
}

/// Finite-difference check of the whole training loss (backbone, both
/// embedding levels, BNR, offsets, BOIM) with respect to sampled entries of
/// every trainable tensor.
pub fn head_gradcheck(cfg: &Config, seed: u64, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let model = Model::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let (w, h) = (cfg.data.width, cfg.data.height);
    let images = Tensor::randn(&[2, 3, h, w], 1.0, &mut rng);
    let bbox = |s: usize, x: f64, y: f64| RoiBox::from_image_box(s, [x, y, x + 30.0, y + 62.0], BACKBONE_STRIDE as f64);
    let boxes = vec![bbox(0, 6.0, 20.0), bbox(0, 50.0, 30.0), bbox(1, 12.0, 8.0), bbox(1, 70.0, 40.0), bbox(0, 75.0, 2.0)];
    let is_person = [true, true, true, true, false];
    let labels = [Some(0), Some(1), Some(0), None];
    let dim = model.net.dim();
    let mut oim = OimState::new(3, dim, cfg.oim())?;
    for k in 0..3 {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        oim.set_prototype(k, &v)?;
    }
    for _ in 0..2 {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        oim.push_unlabeled(&v)?;
    }
    let triplet = cfg.triplet();
    let forward = |g: &mut Graph| -> Result<Var> {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 2);
        let x = g.constant(images.clone());
        let maps = model.net.backbone.forward(g, x)?;
        let out = model.net.forward_mixed(g, maps, &boxes, &is_person, &mut r)?;
        let mut terms = Vec::new();
        if let Some(q) = out.q {
            terms.push(bnr_loss(g, q, &is_person)?.0);
        }
        if let Some(b) = boim_loss(g, out.final_repr, &labels, &oim, &triplet, &mut r)? {
            terms.push(b.total);
        }
        g.add_all(&terms)
    };
    check_params(&model.store, Mode::Train, None, gc, forward)
}

/// Input and parameter checks in both modes, merged into one report.
fn both<F>(store: &ParamStore, inputs: &[Tensor], gc: &GradCheckConfig, modes: &[Mode], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut report = GradCheckReport::default();
    for &mode in modes {
        report.merge(check_inputs(store, mode, inputs, gc, &f)?);
        if store.trainable_count() > 0 {
            report.merge(check_params(store, mode, None, gc, |g| {
                let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
                f(g, &vars)
            })?);
        }
    }
    Ok(report)
}

fn unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Finite-difference checks of every differentiable operation on small
/// random instances drawn from `seed`, one report per operation.
pub fn operation_gradients(seed: u64, gc: &GradCheckConfig) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let both_modes = [Mode::Train, Mode::Eval];
    let empty = ParamStore::new();

    let mut rep = GradCheckReport::default();
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (7, 1, 3)] {
        let x = Tensor::randn(&[2, 2, 7, 6], 1.0, r);
        let w = Tensor::randn(&[3, 2, k, k], 0.5, r);
        let b = Tensor::randn(&[3], 1.0, r);
        rep.merge(check_inputs(&empty, Mode::Eval, &[x, w, b], gc, |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad))?);
    }
    out.push(("conv2d", rep));

    let mut store = ParamStore::new();
    let bn = BatchNormState::new(&mut store, "bn", 3);
    store.set(bn.gamma, Tensor::randn(&[3], 1.0, r))?;
    store.set(bn.beta, Tensor::randn(&[3], 1.0, r))?;
    store.set(bn.running_var, Tensor::uniform(&[3], 0.5, 2.0, r))?;
    let vecs = Tensor::randn(&[5, 3], 1.0, r);
    let maps = Tensor::randn(&[2, 3, 3, 2], 1.0, r);
    let mask = [true, false, true, true, false];
    let mut rep = both(&store, &[vecs], gc, &both_modes, |g, v| g.batch_norm(v[0], &bn, Some(&mask)))?;
    rep.merge(both(&store, &[maps], gc, &both_modes, |g, v| g.batch_norm(v[0], &bn, None))?);
    out.push(("batch_norm", rep));

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    store.set(ln.gamma, Tensor::randn(&[6], 1.0, r))?;
    let tokens = Tensor::randn(&[2, 4, 6], 1.0, r);
    out.push(("layer_norm", both(&store, &[tokens], gc, &[Mode::Eval], |g, v| ln.forward(g, v[0]))?));

    let mut store = ParamStore::new();
    let cbam = Cbam::new(&mut store, "cbam", 8, 4, r);
    let x = Tensor::randn(&[2, 8, 4, 3], 1.0, r);
    out.push(("cbam", both(&store, &[x], gc, &[Mode::Eval], |g, v| cbam.forward(g, v[0]))?));

    let x = Tensor::randn(&[6, 4], 1.0, r);
    let mask_seed = r.gen::<u64>();
    out.push((
        "drop_path",
        check_inputs(&empty, Mode::Train, &[x], gc, |g, v| {
            drop_path(g, v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(mask_seed))
        })?,
    ));

    let x = Tensor::randn(&[2, 2, 5, 6], 1.0, r);
    let rois = [RoiBox::new(0, 0.4, 0.3, 3.9, 4.8), RoiBox::new(1, 1.0, 0.0, 6.0, 5.0), RoiBox::new(0, 2.2, 1.7, 2.9, 2.6)];
    out.push(("roi_align", check_inputs(&empty, Mode::Eval, &[x], gc, |g, v| g.roi_align(v[0], &rois, 6, 3))?));

    let x = Tensor::randn(&[1, 2, 9, 8], 1.0, r);
    out.push(("adaptive_max_pool", check_inputs(&empty, Mode::Eval, &[x], gc, |g, v| g.adaptive_max_pool(v[0], 7, 7))?));

    let mut store = ParamStore::new();
    let attn = CrossAttention::new(&mut store, "attn", 8, 2, r)?;
    let q = Tensor::randn(&[2, 3, 8], 1.0, r);
    let kv = Tensor::randn(&[2, 7, 8], 1.0, r);
    out.push(("cross_attention", both(&store, &[q, kv], gc, &[Mode::Eval], |g, v| attn.forward(g, v[0], v[1]))?));

    let mge = MgeConfig {
        level_dim: 3,
        cbam_reduction: 2,
        ..MgeConfig::default()
    };
    let path_seed = r.gen::<u64>();
    let mut store = ParamStore::new();
    let enc = StripEncoder::new(&mut store, "strip", 2, &mge, r);
    let x = Tensor::randn(&[3, 2, 12, 6], 1.0, r);
    out.push((
        "strip_encode",
        both(&store, &[x], gc, &both_modes, |g, v| {
            let strips = strip_split(g, v[0], 3)?;
            enc.forward(g, strips[1], &mut ChaCha8Rng::seed_from_u64(path_seed))
        })?,
    ));

    let mut store = ParamStore::new();
    let level = MgeLevel::new(&mut store, "level", (12, 6), 2, &mge, r);
    let x = Tensor::randn(&[3, 2, 12, 6], 1.0, r);
    out.push((
        "mge_encode",
        both(&store, &[x], gc, &both_modes, |g, v| level.forward(g, v[0], &mut ChaCha8Rng::seed_from_u64(path_seed)))?,
    ));

    let person_maps = Tensor::randn(&[3, 2, FINE_GRID.0, FINE_GRID.1], 1.0, r);
    for (name, kind) in [("bmn_embed", EmbeddingKind::Mge), ("gfe_embed", EmbeddingKind::Gfe)] {
        let cfg = MgeConfig { embedding: kind, ..mge.clone() };
        let mut store = ParamStore::new();
        let bmn = Bmn::new(&mut store, "bmn", 2, &cfg, r)?;
        out.push((
            name,
            both(&store, &[person_maps.clone()], gc, &both_modes, |g, v| {
                bmn.embed(g, v[0], &mut ChaCha8Rng::seed_from_u64(path_seed))
            })?,
        ));
    }

    let mut rep = GradCheckReport::default();
    for mode in [BnrMode::On, BnrMode::NoBn] {
        let mut store = ParamStore::new();
        let head = BnrHead::new(&mut store, "bnr", mode);
        let e = Tensor::randn(&[6, 4], 0.5, r);
        let labels = [true, false, true, true, false, false];
        rep.merge(both(&store, &[e], gc, &both_modes, |g, v| {
            let q = head.map_norm(g, v[0])?.expect("bnr enabled");
            Ok(bnr_loss(g, q, &labels)?.0)
        })?);
    }
    out.push(("bnr_map_norm_and_loss", rep));

    let mut store = ParamStore::new();
    let ex = NoiseExtractor::new(&mut store, "ex", 2, [3, 3], 4, r);
    let scene = Tensor::randn(&[2, 2, 5, 4], 1.0, r);
    out.push(("noise_extract", both(&store, &[scene], gc, &both_modes, |g, v| ex.forward(g, v[0]))?));

    let mut store = ParamStore::new();
    let tok = NoiseTokenizer::new(&mut store, "tok", 4, r);
    let noise = Tensor::randn(&[2, 4, 8, 7], 1.0, r);
    out.push(("tokenize_noise", both(&store, &[noise], gc, &[Mode::Eval], |g, v| tok.forward(g, v[0]))?));

    let fcfg = FmnConfig {
        mode: FmnMode::CrossAttention,
        extractor_channels: [3, 3],
        heads: 2,
        ffn_hidden: 6,
    };
    let mut store = ParamStore::new();
    let den = Denoiser::new(&mut store, "den", 4, &fcfg, r)?;
    let emb = Tensor::randn(&[5, 4], 1.0, r);
    let toks = Tensor::randn(&[2, 7, 4], 1.0, r);
    let layout = AlignedBatch::new(&[0, 1, 0, 0, 1], 2)?;
    out.push((
        "align_denoise_de_align_apply",
        both(&store, &[emb, toks], gc, &both_modes, |g, v| {
            let q = layout.align(g, v[0])?;
            let o = den.forward(g, q, v[1], &layout.mask())?;
            let o = layout.de_align(g, o)?;
            fmn_apply(g, v[0], o)
        })?,
    ));

    let lcfg = FmnConfig { mode: FmnMode::Linear, ..fcfg };
    let mut store = ParamStore::new();
    let fmn = Fmn::new(&mut store, "fmn", 2, 4, &lcfg, r)?.expect("linear variant");
    let scene = Tensor::randn(&[2, 2, 4, 3], 1.0, r);
    let emb = Tensor::randn(&[3, 4], 1.0, r);
    out.push((
        "fmn_linear_variant",
        both(&store, &[scene, emb], gc, &both_modes, |g, v| fmn.offsets(g, v[0], v[1], &[1, 0, 1]))?,
    ));

    let oim_cfg = OimConfig {
        tau: 1.0 / 30.0,
        momentum: 0.5,
        cq_size: 3,
    };
    let mut state = OimState::new(4, 5, oim_cfg)?;
    for (k, v) in unit_rows(4, 5, r).iter().enumerate() {
        state.set_prototype(k, v)?;
    }
    for v in unit_rows(3, 5, r) {
        state.push_unlabeled(&v)?;
    }
    let x = Tensor::randn(&[3, 5], 0.2, r);
    out.push(("oim_loss", check_inputs(&empty, Mode::Train, &[x.clone()], gc, |g, v| oim_loss(g, v[0], &[0, 3, 1], &state))?));

    let anchor = Tensor::new(&[1, 4], unit_rows(1, 4, r).concat())?;
    let pos = Tensor::randn(&[3, 4], 0.5, r);
    let neg = Tensor::randn(&[4, 4], 0.5, r);
    out.push((
        "triplet_loss",
        check_inputs(&empty, Mode::Train, &[anchor, pos, neg], gc, |g, v| triplet_loss(g, v[0], v[1], v[2], 1.5))?,
    ));

    let tc = TripletConfig {
        margin: 1.5,
        positives: 10,
        negatives: 10,
    };
    let labels = [Some(0), Some(3), None];
    let sample_seed = r.gen::<u64>();
    out.push((
        "boim_loss",
        check_inputs(&empty, Mode::Train, &[x], gc, |g, v| {
            let terms = boim_loss(g, v[0], &labels, &state, &tc, &mut ChaCha8Rng::seed_from_u64(sample_seed))?;
            Ok(terms.expect("labeled rows present").total)
        })?,
    ));

    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, "bb", 2, [2, 2, 2, 2], r);
    let img = Tensor::randn(&[2, 2, 32, 16], 1.0, r);
    out.push(("toy_backbone", both(&store, &[img], gc, &both_modes, |g, v| bb.forward(g, v[0]))?));

    Ok(out)
}

fn oim_pair_check() -> Result<Check> {
    let cfg = OimConfig {
        tau: 1.0,
        momentum: 0.5,
        cq_size: 0,
    };
    let mut s = OimState::new(2, 2, cfg)?;
    s.set_prototype(0, &[1.0, 0.0])?;
    s.set_prototype(1, &[0.0, 1.0])?;
    let p = s.probabilities(&[1.0, 0.0], Some(0))?;
    let want = std::f64::consts::E / (std::f64::consts::E + 1.0);
    Ok(Check {
        name: "oim probability oracle",
        passed: (p[0] - want).abs() < 1e-10,
        detail: format!("p = {:.6}", p[0]),
    })
}

fn align_check() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let scenes = rng.gen_range(1..5);
        let n = rng.gen_range(1..12);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..scenes)).collect();
        let x = Tensor::randn(&[n, 3], 1.0, &mut rng);
        let layout = AlignedBatch::new(&ids, scenes)?;
        if layout.de_align_tensor(&layout.align_tensor(&x)?)? != x {
            return Ok(Check {
                name: "align round trip",
                passed: false,
                detail: format!("scene ids {ids:?}"),
            });
        }
    }
    Ok(Check {
        name: "align round trip",
        passed: true,
        detail: "1000 cases".into(),
    })
}

fn metric_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (index, galleries) = random_instance(&mut rng);
        let results = index
            .queries
            .iter()
            .zip(&galleries)
            .map(|(q, g)| score_query(q, &index, g))
            .collect();
        let main = summarize(results);
        let lists: Vec<Vec<Entry>> = galleries
            .iter()
            .map(|g| g.iter().map(|&i| index.entries[i].clone()).collect())
            .collect();
        let (map, top1) = brute_force_metrics(&index.queries, &lists);
        worst = worst.max((main.map - map).abs()).max((main.top1 - top1).abs());
    }
    Check {
        name: "metric oracle",
        passed: worst <= 1e-12,
        detail: format!("max deviation {worst:.2e} over 200 instances"),
    }
}

/// Small random retrieval problem with coarse representations so ties occur.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (GalleryIndex, Vec<Vec<usize>>) {
    let n = rng.gen_range(1..=50);
    let ids = rng.gen_range(1..6);
    let rep = |r: &mut ChaCha8Rng| -> Vec<f64> { (0..3).map(|_| r.gen_range(-2i32..=2) as f64).collect() };
    let entries: Vec<Entry> = (0..n)
        .map(|i| Entry {
            rep: rep(rng),
            identity: if rng.gen_bool(0.1) { None } else { Some(rng.gen_range(0..ids)) },
            scene: i,
            camera: 0,
        })
        .collect();
    let nq = rng.gen_range(1..=20);
    let queries: Vec<Entry> = (0..nq)
        .map(|_| Entry {
            rep: rep(rng),
            identity: Some(rng.gen_range(0..ids)),
            scene: usize::MAX,
            camera: 0,
        })
        .collect();
    let galleries = (0..nq)
        .map(|_| (0..n).filter(|_| rng.gen_bool(0.7)).collect::<Vec<_>>())
        .map(|g| if g.is_empty() { vec![0] } else { g })
        .collect();
    (GalleryIndex { entries, queries }, galleries)
}

pub fn run_selftest() -> Result<Vec<Check>> {
    let gc = GradCheckConfig {
        max_entries: Some(4),
        ..GradCheckConfig::default()
    };
    let grad = head_gradcheck(&miniature_config(), 8, &gc)?;
    let ops = operation_gradients(4, &gc)?;
    let failing: Vec<&str> = ops.iter().filter(|(_, r)| !r.passed(FD_REL_TOL)).map(|(n, _)| *n).collect();
    let total = ops.into_iter().fold(GradCheckReport::default(), |mut acc, (_, r)| {
        acc.merge(r);
        acc
    });
    Ok(vec![
        Check {
            name: "full head gradient",
            passed: grad.passed(FD_REL_TOL),
            detail: format!("{} entries, max rel error {:.2e} ({})", grad.checked, grad.max_rel_error, grad.worst),
        },
        Check {
            name: "operation gradients",
            passed: failing.is_empty(),
            detail: if failing.is_empty() {
                format!("{} entries, max rel error {:.2e}", total.checked, total.max_rel_error)
            } else {
                format!("failing: {}", failing.join(", "))
            },
        },
        oim_pair_check()?,
        align_check()?,
        metric_check(),
    ])
}
