use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scene_reid::evaluation::ablation::{summarize_runs, AblationGrid, AblationRun, RunRecord};
use scene_reid::evaluation::*;
use scene_reid::selftest::random_instance;
use scene_reid::ReidError;

fn entry(rep: &[f64], identity: Option<usize>, scene: usize, camera: usize) -> Entry {
    Entry {
        rep: rep.to_vec(),
        identity,
        scene,
        camera,
    }
}

/// Direct definition: AP = mean over relevant entries of hits-so-far / rank.
fn ap_oracle(flags: &[bool]) -> f64 {
    let ranks: Vec<usize> = flags.iter().enumerate().filter(|p| *p.1).map(|p| p.0 + 1).collect();
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().enumerate().map(|(k, &r)| (k + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64
}

#[test]
fn average_precision_examples() {
    assert_eq!(average_precision(&[true, false, true]), Some((1.0 + 2.0 / 3.0) / 2.0));
    assert!((average_precision(&[true, false, true]).unwrap() - 0.8333333333333334).abs() < 1e-15);
    assert_eq!(average_precision(&[false, false]), None);
    assert_eq!(average_precision(&[true]), Some(1.0));
    assert_eq!(average_precision(&[false, true]), Some(0.5));
}

#[test]
fn ranking_is_by_cosine_with_stable_ties() {
    let g = [
        entry(&[1.0, 0.0], Some(0), 1, 0),
        entry(&[0.0, 1.0], Some(1), 2, 0),
        entry(&[2.0, 0.0], Some(2), 3, 0),
        entry(&[-1.0, 0.0], None, 4, 0),
    ];
    let refs: Vec<&Entry> = g.iter().collect();
    assert_eq!(rank_gallery(&[1.0, 0.0], &refs), vec![0, 2, 1, 3]);
    assert_eq!(rank_gallery(&[0.0, 0.0], &refs), vec![0, 1, 2, 3]);
}

#[test]
fn score_query_example() {
    let index = GalleryIndex {
        entries: vec![
            entry(&[1.0, 0.0], Some(7), 1, 0),
            entry(&[0.9, 0.1], Some(3), 2, 1),
            entry(&[0.5, 0.5], Some(7), 3, 1),
        ],
        queries: vec![],
    };
    let q = entry(&[1.0, 0.0], Some(7), 0, 0);
    let r = score_query(&q, &index, &[0, 1, 2]);
    assert_eq!(r.ranked, vec![0, 1, 2]);
    assert_eq!(r.relevant, 2);
    assert!((r.ap - 0.8333333333333334).abs() < 1e-15);
    assert!(r.top1);
    let r = score_query(&q, &index, &[1]);
    assert_eq!((r.ap, r.top1, r.relevant), (0.0, false, 0));
}

#[test]
fn single_true_match_gives_perfect_scores() {
    let index = GalleryIndex {
        entries: vec![entry(&[0.3, -0.2], Some(1), 1, 1)],
        queries: vec![entry(&[-1.0, 0.5], Some(1), 0, 0)],
    };
    for p in [Protocol::Standard { gallery_size: 1 }, Protocol::CrossCamera { gallery_size: 1 }] {
        let Evaluation::Single(r) = evaluate(&p, &index, 0).unwrap() else { panic!() };
        assert_eq!((r.map, r.top1, r.zero_relevant), (1.0, 1.0, 0));
    }
}

#[test]
fn zero_relevant_queries_count_as_zero() {
    let index = GalleryIndex {
        entries: vec![entry(&[1.0], Some(1), 1, 1), entry(&[1.0], Some(2), 2, 1)],
        queries: vec![entry(&[1.0], Some(1), 0, 0), entry(&[1.0], Some(3), 3, 0)],
    };
    let Evaluation::Single(r) = evaluate(&Protocol::Standard { gallery_size: 2 }, &index, 0).unwrap() else {
        panic!()
    };
    assert_eq!(r.zero_relevant, 1);
    assert_eq!(r.map, 0.5);
}

#[test]
fn query_scene_never_enters_its_gallery() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let entries: Vec<Entry> = (0..30)
        .map(|i| entry(&[r.gen(), r.gen()], Some(i % 4), i / 3, i % 3))
        .collect();
    let index = GalleryIndex {
        queries: entries.clone(),
        entries,
    };
    for cross in [false, true] {
        let p = if cross {
            Protocol::CrossCamera { gallery_size: 12 }
        } else {
            Protocol::Standard { gallery_size: 20 }
        };
        let Evaluation::Single(res) = evaluate(&p, &index, 1).unwrap() else { panic!() };
        for (q, qr) in index.queries.iter().zip(&res.queries) {
            for &k in &qr.ranked {
                assert_ne!(index.entries[k].scene, q.scene);
                if cross {
                    assert_ne!(index.entries[k].camera, q.camera);
                }
            }
            let matches = index
                .entries
                .iter()
                .filter(|e| e.identity == q.identity && e.scene != q.scene && (!cross || e.camera != q.camera))
                .count();
            assert_eq!(qr.relevant, matches);
        }
    }
}

#[test]
fn unsatisfiable_protocols_error() {
    let index = GalleryIndex {
        entries: vec![entry(&[1.0], Some(1), 1, 1), entry(&[1.0], Some(1), 0, 0)],
        queries: vec![entry(&[1.0], Some(1), 0, 0)],
    };
    for p in [
        Protocol::Standard { gallery_size: 5 },
        Protocol::Standard { gallery_size: 0 },
        Protocol::Sweep { sizes: vec![1, 9] },
    ] {
        assert!(matches!(evaluate(&p, &index, 0), Err(ReidError::Protocol(_))));
    }
    let empty = GalleryIndex::default();
    assert!(evaluate(&Protocol::Standard { gallery_size: 1 }, &empty, 0).is_err());
}

#[test]
fn sweep_galleries_are_nested() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let entries: Vec<Entry> = (0..60)
        .map(|i| entry(&[r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)], Some(i % 6), i, i % 3))
        .collect();
    let index = GalleryIndex {
        queries: entries[..12].to_vec(),
        entries,
    };
    let Evaluation::Sweep(points) = evaluate(&Protocol::Sweep { sizes: vec![40, 10, 20, 10] }, &index, 2).unwrap() else {
        panic!()
    };
    assert_eq!(points.iter().map(|p| p.size).collect::<Vec<_>>(), vec![10, 20, 40]);
    for w in points.windows(2) {
        for (small, big) in w[0].result.queries.iter().zip(&w[1].result.queries) {
            assert!(small.ranked.iter().all(|k| big.ranked.contains(k)));
            assert!(big.ap <= small.ap + 1e-15);
        }
        assert!(w[1].result.map <= w[0].result.map + 1e-15);
    }
    let Evaluation::Single(same) = evaluate(&Protocol::Standard { gallery_size: 20 }, &index, 2).unwrap() else {
        panic!()
    };
    assert_eq!(same, points[1].result);
}

#[test]
fn metric_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let (index, galleries) = random_instance(&mut rng);
        assert!(index.queries.len() <= 20 && index.entries.len() <= 50);
        let res = summarize(
            index
                .queries
                .iter()
                .zip(&galleries)
                .map(|(q, g)| score_query(q, &index, g))
                .collect(),
        );
        let lists: Vec<Vec<Entry>> = galleries
            .iter()
            .map(|g| g.iter().map(|&i| index.entries[i].clone()).collect())
            .collect();
        let (map, top1) = brute_force_metrics(&index.queries, &lists);
        assert!((res.map - map).abs() <= 1e-12);
        assert!((res.top1 - top1).abs() <= 1e-12);
        for (q, qr) in index.queries.iter().zip(&res.queries) {
            let flags: Vec<bool> = qr.ranked.iter().map(|&k| index.entries[k].identity == q.identity).collect();
            assert!((qr.ap - ap_oracle(&flags)).abs() <= 1e-12);
            assert_eq!(qr.top1, flags.first().copied().unwrap_or(false));
        }
    }
}

proptest! {
    #[test]
    fn appending_an_irrelevant_last_entry_never_raises_ap(flags in prop::collection::vec(any::<bool>(), 1..40)) {
        let base = average_precision(&flags).unwrap_or(0.0);
        let mut longer = flags.clone();
        longer.push(false);
        prop_assert!(average_precision(&longer).unwrap_or(0.0) <= base);
        prop_assert!((base - ap_oracle(&flags)).abs() < 1e-12);
    }

    #[test]
    fn top1_is_rank_one_identity(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (index, galleries) = random_instance(&mut rng);
        for (q, g) in index.queries.iter().zip(&galleries) {
            let r = score_query(q, &index, g);
            let best = g
                .iter()
                .copied()
                .reduce(|a, b| if cosine(&q.rep, &index.entries[b].rep) + 0.0 > cosine(&q.rep, &index.entries[a].rep) + 0.0 { b } else { a })
                .unwrap();
            prop_assert_eq!(r.top1, index.entries[best].identity == q.identity);
        }
    }
}

#[test]
fn cross_scene_similarity_uses_same_identity_pairs_only() {
    let index = GalleryIndex {
        entries: vec![
            entry(&[1.0, 0.0], Some(1), 0, 0),
            entry(&[0.0, 1.0], Some(1), 1, 0),
            entry(&[1.0, 1.0], Some(1), 1, 0),
            entry(&[1.0, 0.0], Some(2), 2, 0),
            entry(&[1.0, 0.0], None, 3, 0),
        ],
        queries: vec![],
    };
    let want = (0.0 + std::f64::consts::FRAC_1_SQRT_2) / 2.0;
    assert!((cross_scene_similarity(&index).unwrap() - want).abs() < 1e-15);
    assert_eq!(cross_scene_similarity(&GalleryIndex::default()), None);
}

fn record(name: &str, seed: u64, map: f64) -> RunRecord {
    RunRecord {
        name: name.into(),
        seed,
        map,
        top1: map / 2.0,
        cross_camera_map: map,
        sweep: vec![(5, map)],
        cross_scene_similarity: 0.5,
        first_epoch_loss: 2.0,
        final_epoch_loss: 1.0,
    }
}

#[test]
fn ablation_table_rows_follow_grid_order() {
    let grid = AblationGrid::from_toml_str(
        "seeds = [0, 1]\n[[run]]\nname = \"cross-attention\"\n[[run]]\nname = \"no FMN\"\nfmn = \"off\"\n[[run]]\nname = \"linear\"\nfmn = \"linear\"\n",
    )
    .unwrap();
    assert_eq!(grid.seeds, vec![0, 1]);
    let runs: Vec<AblationRun> = grid.runs.clone();
    let records = vec![
        record("cross-attention", 0, 0.6),
        record("no FMN", 0, 0.5),
        record("linear", 0, 0.4),
        record("cross-attention", 1, 0.8),
        record("no FMN", 1, 0.5),
        record("linear", 1, 0.6),
    ];
    let report = summarize_runs(&runs, records);
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["cross-attention", "no FMN", "linear"]);
    assert!((report.rows[0].map - 0.7).abs() < 1e-15);
    assert!((report.rows[1].delta_map + 0.2).abs() < 1e-15);
    assert!((report.rows[2].delta_top1 + 0.1).abs() < 1e-15);
    assert_eq!(report.record("linear", 1).unwrap().map, 0.6);
    let table = report.table();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().nth(2).unwrap().starts_with("no FMN"));
    assert_eq!(report.jsonl().lines().count(), 9);
    assert!(AblationGrid::from_toml_str("seeds = []\n[[run]]\nname = \"x\"\n").is_err());
    assert!(AblationGrid::from_toml_str("seeds = [0]\n[[run]]\nname = \"x\"\nbnr = \"sometimes\"\n").is_err());
}
