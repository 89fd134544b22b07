use axform_core::data::{make_partial, normalize, sample_shape, Family, PartialMethod, SyntheticShapeSpec};
use axform_core::layers::{AXformBlock, AXformConfig, AttentionMap};
use axform_core::metrics::{chamfer_l1, chamfer_l2, fps_indices, fscore, jsd, nearest_all, NearestStrategy};
use axform_core::models::{
    decode_multibranch, decode_single, AXformNet, AXformNetConfig, CompletionMode, Encoder, EncoderConfig,
    MultiBranchDecoder,
};
use axform_core::segmentation::{consistency_from_reconstructions, label_by_branches, BranchSemanticMap, Reconstructed};
use axform_core::{Graph, ParamSet, Point, PointCloud, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(seed: u64, n: usize) -> PointCloud {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new((0..n).map(|_| [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)]).collect())
}

fn tensor(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

fn block(seed: u64, cfg: AXformConfig, weight_scale: f64) -> (ParamSet, AXformBlock) {
    let mut params = ParamSet::new();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let b = AXformBlock::new(&mut params, "b", cfg, &mut r).unwrap();
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= weight_scale);
    }
    (params, b)
}

fn permuted(c: &PointCloud, seed: u64) -> PointCloud {
    let mut idx: Vec<usize> = (0..c.len()).collect();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..idx.len()).rev() {
        idx.swap(i, r.random_range(0..=i));
    }
    c.select(&idx)
}

fn config() -> ProptestConfig {
    ProptestConfig { cases: 64, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn softmax_rows_are_stochastic(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0) {
        let mut g = Graph::new();
        let x = g.constant(tensor(seed, &[rows, cols], scale));
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn repeated_backward_is_identical(seed in any::<u64>()) {
        let mut g = Graph::new();
        let a = g.leaf(tensor(seed, &[3, 4], 1.0));
        let b = g.leaf(tensor(seed ^ 1, &[4, 2], 1.0));
        let y = g.matmul(a, b).unwrap();
        let y = g.relu(y);
        let loss = g.sum(y);
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        prop_assert_eq!(g1.wrt(&g, a), g2.wrt(&g, a));
        prop_assert_eq!(g1.wrt(&g, b), g2.wrt(&g, b));
    }

    #[test]
    fn axform_points_are_convex_combinations(
        seed in any::<u64>(), k1 in 1usize..6, k2 in 1usize..5, n in 1usize..9, m in 1usize..9, ws in 0.5f64..4.0,
    ) {
        let cfg = AXformConfig::new(k1, k2, n, m);
        let (params, b) = block(seed, cfg.clone(), ws);
        prop_assert_eq!(params.count(), cfg.param_count());
        let mut g = Graph::with_params(&params);
        let x = g.constant(tensor(seed ^ 7, &[2, k1], 2.0));
        let out = b.forward(&mut g, x).unwrap();
        let interim = g.value(out.interim).data();
        let agg = g.value(out.aggregated).data();
        for item in 0..2 {
            let map = AttentionMap::from_tensor(g.value(out.attn), item).unwrap();
            prop_assert!(map.stochastic_error() <= 1e-10);
            for i in 0..m {
                for d in 0..k2 {
                    let recon: f64 = (0..n).map(|j| map.row(i)[j] * interim[(item * n + j) * k2 + d]).sum();
                    prop_assert!((recon - agg[(item * m + i) * k2 + d]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn axform_batch_matches_per_item(seed in any::<u64>(), batch in 1usize..4) {
        let cfg = AXformConfig::new(4, 3, 5, 6);
        let (params, b) = block(seed, cfg, 1.0);
        let x = tensor(seed ^ 3, &[batch, 4], 1.0);
        let mut g = Graph::with_params(&params);
        let xv = g.constant(x.clone());
        let out = b.forward(&mut g, xv).unwrap().cloud;
        let all = g.value(out).clone();
        for i in 0..batch {
            let single = decode_single(&b, &params, &Tensor::from_vec(x.data()[i * 4..(i + 1) * 4].to_vec())).unwrap();
            let part = &all.data()[i * 18..(i + 1) * 18];
            for (p, q) in single.to_tensor().data().iter().zip(part) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn encoder_is_permutation_invariant(seed in any::<u64>(), n in 1usize..40) {
        let mut params = ParamSet::new();
        let enc = Encoder::new(&mut params, "e", &EncoderConfig { hidden: vec![8], out: 6 }, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let c = cloud(seed ^ 9, n);
        prop_assert_eq!(enc.encode(&params, &c).unwrap(), enc.encode(&params, &permuted(&c, seed)).unwrap());
    }

    #[test]
    fn multibranch_is_concatenation_of_branches(seed in any::<u64>(), k in 1usize..5) {
        let mut params = ParamSet::new();
        let dec = MultiBranchDecoder::new(&mut params, "d", k, &AXformConfig::new(4, 2, 3, 5), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let f = tensor(seed ^ 5, &[4], 1.0);
        let (all, ids) = decode_multibranch(&dec, &params, &f).unwrap();
        for (b, blk) in dec.branches.iter().enumerate() {
            let one = decode_single(blk, &params, &f).unwrap();
            for (j, p) in one.points.iter().enumerate() {
                prop_assert_eq!(ids[b * 5 + j], b);
                let q = all.points[b * 5 + j];
                prop_assert!((0..3).all(|d| (p[d] - q[d]).abs() <= 1e-12));
            }
        }
    }

    #[test]
    fn vanilla_and_full_share_coarse(seed in any::<u64>()) {
        let cfg = AXformNetConfig {
            branches: 2, coarse_points: 4, encoder: EncoderConfig { hidden: vec![6], out: 6 },
            feature_widths: vec![5], shared_feature_map: seed % 2 == 0, interim_dim: 3, interim_points: 4, attn_widths: vec![4],
        };
        let (params, net) = AXformNet::build(cfg, seed).unwrap();
        let partial = cloud(seed ^ 2, 12);
        let (cv, _, _) = net.complete(&params, &partial, CompletionMode::Vanilla).unwrap();
        let (cf, _, _) = net.complete(&params, &partial, CompletionMode::Full).unwrap();
        prop_assert_eq!(cv, cf);
    }

    #[test]
    fn chamfer_symmetric_permutation_invariant(seed in any::<u64>(), n in 1usize..60, m in 1usize..60) {
        let (a, b) = (cloud(seed, n), cloud(seed ^ 11, m));
        for f in [chamfer_l1, chamfer_l2] {
            let d = f(&a, &b).unwrap();
            prop_assert!(d > 0.0);
            prop_assert!((d - f(&b, &a).unwrap()).abs() <= 1e-15);
            prop_assert!((d - f(&permuted(&a, seed), &permuted(&b, seed ^ 1)).unwrap()).abs() <= 1e-15);
            prop_assert_eq!(f(&a, &a).unwrap(), 0.0);
            // Zero whenever every point has an exact twin on the other side.
            let doubled = PointCloud::new(a.points.iter().chain(&a.points).copied().collect());
            prop_assert_eq!(f(&a, &doubled).unwrap(), 0.0);
        }
    }

    #[test]
    fn fscore_bounded_and_monotone(seed in any::<u64>(), n in 1usize..50, t in 0.001f64..0.5) {
        let (a, b) = (cloud(seed, n), cloud(seed ^ 4, n + 3));
        let hi = fscore(&a, &b, t).unwrap();
        let lo = fscore(&a, &b, t * 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&hi));
        prop_assert!(lo <= hi);
    }

    #[test]
    fn fps_is_a_duplicate_free_deterministic_subset(seed in any::<u64>(), n in 1usize..80, start in 0usize..80) {
        let c = cloud(seed, n);
        let k = 1 + (seed as usize) % n;
        let start = start % n;
        let idx = fps_indices(&c.points, k, start).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert_eq!(idx[0], start);
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        prop_assert!(idx.iter().all(|&i| i < n));
        prop_assert_eq!(idx, fps_indices(&c.points, k, start).unwrap());
    }

    #[test]
    fn jsd_zero_symmetric_bounded(seed in any::<u64>(), sets in 1usize..4, res in 2usize..12) {
        let a: Vec<PointCloud> = (0..sets).map(|i| cloud(seed ^ i as u64, 30)).collect();
        let b: Vec<PointCloud> = (0..sets).map(|i| cloud(seed ^ (100 + i as u64), 20)).collect();
        prop_assert!(jsd(&a, &a, res).unwrap().abs() <= 1e-15);
        let ab = jsd(&a, &b, res).unwrap();
        prop_assert!((ab - jsd(&b, &a, res).unwrap()).abs() <= 1e-15);
        prop_assert!((0.0..=core::f64::consts::LN_2 + 1e-15).contains(&ab));
    }

    #[test]
    fn normalized_shapes_fit_the_unit_box(seed in any::<u64>(), fam in 0usize..3, count in 1usize..300) {
        let family = Family::ALL[fam];
        let spec = SyntheticShapeSpec::random(family, seed, count);
        let raw = sample_shape(&spec).unwrap();
        prop_assert_eq!(&raw, &sample_shape(&spec).unwrap());
        if count == 1 {
            // A single point has no extent to scale.
            prop_assert!(normalize(&raw).is_err());
        } else {
            let (c, _) = normalize(&raw).unwrap();
            prop_assert!(c.points.iter().flatten().all(|v| v.abs() <= 0.5 + 1e-12));
        }
    }

    #[test]
    fn partials_are_exact_subsets(seed in any::<u64>(), occl in any::<bool>()) {
        let (c, _) = normalize(&sample_shape(&SyntheticShapeSpec::random(Family::Table, seed, 256)).unwrap()).unwrap();
        let method = if occl {
            PartialMethod::ViewpointOcclusion { resolution: 16, shell: 0.05 }
        } else {
            PartialMethod::HalfspaceCut { direction: None, offset: 0.0 }
        };
        if let Ok(p) = make_partial(&c, &method, seed) {
            prop_assert!(p.len() >= 26 && p.len() <= c.len());
            let labels = c.labels.as_ref().unwrap();
            for (k, q) in p.points.iter().enumerate() {
                let j = c.points.iter().position(|x| x == q);
                prop_assert!(j.is_some());
                prop_assert_eq!(p.labels.as_ref().unwrap()[k], labels[j.unwrap()]);
            }
        }
    }

    #[test]
    fn segment_labels_ignore_within_branch_order(seed in any::<u64>(), k in 1usize..5, per in 1usize..10) {
        let gen = cloud(seed, k * per);
        let ids: Vec<usize> = (0..k * per).map(|i| i / per).collect();
        let map = BranchSemanticMap::new((0..k).map(|b| (b % 3) as u16).collect(), vec!["a".into(), "b".into(), "c".into()], "r".into()).unwrap();
        let base = label_by_branches(&gen, &ids, &map).unwrap();
        // Reverse the points inside every branch.
        let idx: Vec<usize> = (0..k).flat_map(|b| (0..per).rev().map(move |j| b * per + j)).collect();
        let shuffled = label_by_branches(&gen.select(&idx), &ids, &map).unwrap();
        prop_assert_eq!(base.labels, shuffled.labels);
    }

    #[test]
    fn consistency_ignores_rigid_motion(seed in any::<u64>(), angle in 0.0f64..6.3, shift in -2.0f64..2.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<PointCloud> = (0..3).map(|i| {
            let c = cloud(seed ^ i, 40);
            let labels = (0..40).map(|_| r.random_range(0..3u16)).collect();
            PointCloud::with_labels(c.points, labels).unwrap()
        }).collect();
        let gens: Vec<PointCloud> = (0..3).map(|i| cloud(seed ^ (50 + i), 32)).collect();
        let ids: Vec<usize> = (0..32).map(|i| i / 8).collect();
        let map = BranchSemanticMap::new(vec![0, 1, 2, 0], vec!["a".into(), "b".into(), "c".into()], "r".into()).unwrap();
        let (s, c) = (angle.sin(), angle.cos());
        let motion = |p: &Point| [c * p[0] - s * p[1] + shift, s * p[0] + c * p[1], p[2] - shift];
        let moved = |pc: &PointCloud| PointCloud { points: pc.points.iter().map(motion).collect(), labels: pc.labels.clone() };
        let gts_m: Vec<PointCloud> = gts.iter().map(moved).collect();
        let gens_m: Vec<PointCloud> = gens.iter().map(moved).collect();
        let rec_a: Vec<_> = (0..3).map(|i| Reconstructed { gt: &gts[i], generated: &gens[i], branch_ids: &ids }).collect();
        let rec_b: Vec<_> = (0..3).map(|i| Reconstructed { gt: &gts_m[i], generated: &gens_m[i], branch_ids: &ids }).collect();
        let a = consistency_from_reconstructions(&rec_a, &map).unwrap();
        let b = consistency_from_reconstructions(&rec_b, &map).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn accelerated_nearest_neighbors_equal_brute_force() {
    for seed in 0..4 {
        let target = cloud(seed, 500 + 300 * seed as usize);
        let queries = cloud(seed ^ 77, 1000);
        let fast = nearest_all(&queries.points, &target.points, NearestStrategy::Grid);
        let slow = nearest_all(&queries.points, &target.points, NearestStrategy::BruteForce);
        assert_eq!(fast, slow);
    }
}
