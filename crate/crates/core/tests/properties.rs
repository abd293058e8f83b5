mod common;

use clipmi::concepts::kmeans;
use clipmi::descriptors::{build_classifier, DescriptorBank};
use clipmi::embedding::{EmbeddingVector, Facet, GridGeometry, PatchFeatureGrid};
use clipmi::grounding::{candidate_filter, sinkhorn_assign, unique_top1, ScoreMatrix, SinkhornOptions};
use clipmi::language::retrieve_class_descriptors;
use clipmi::mi::{contingency_mi, mi_dynamics, normalized_auc, ConceptIdSet};
use clipmi::spectral::{affinity, connected_components, fiedler_partition, largest_connected_component, ProminenceMask};
use clipmi::store::{EmbeddingStore, ImageRecord, StoreHeader};
use clipmi::world::SyntheticWorld;
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::sample::subsequence;

fn id_set() -> impl Strategy<Value = Vec<u32>> {
    subsequence((0u32..120).collect::<Vec<_>>(), 0..40).prop_shuffle()
}

fn set(v: &[u32]) -> ConceptIdSet {
    ConceptIdSet::new(v.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn mi_matches_closed_form(x in id_set(), y in id_set()) {
        let v = contingency_mi(&set(&x), &set(&y));
        let m = x.iter().filter(|i| y.contains(i)).count();
        prop_assert_eq!(v.overlap, m);
        if m == 0 {
            prop_assert!(v.no_overlap);
            prop_assert_eq!(v.bits, 0.0);
        } else {
            let expected = ((x.len() * y.len()) as f64 / m as f64).log2();
            prop_assert!((v.bits - expected).abs() < 1e-12);
            prop_assert!(v.bits >= 0.0);
        }
    }

    #[test]
    fn mi_is_symmetric_and_label_free(x in id_set(), y in id_set(), shift in 0u32..1000, seed in any::<u64>()) {
        let a = contingency_mi(&set(&x), &set(&y)).bits;
        prop_assert_eq!(a, contingency_mi(&set(&y), &set(&x)).bits);
        // Any injective relabelling of ids leaves MI unchanged.
        let relabel = |v: &[u32]| -> Vec<u32> { v.iter().map(|i| (i ^ (seed as u32 & 0xff)) + shift).collect() };
        prop_assert_eq!(a, contingency_mi(&set(&relabel(&x)), &set(&relabel(&y))).bits);
    }

    #[test]
    fn mi_curve_ends_at_zero(x in id_set().prop_filter("non-empty", |v| !v.is_empty()), y in id_set()) {
        let c = mi_dynamics(&set(&x), &set(&y)).unwrap();
        prop_assert_eq!(c.values.len(), x.len() + 1);
        prop_assert_eq!(*c.values.last().unwrap(), 0.0);
        prop_assert!((c.auc - normalized_auc(&c.values)).abs() == 0.0);
    }

    #[test]
    fn candidate_filter_matches_sort(row in prop::collection::vec(0.0f64..0.5, 2..800), k in 1usize..600) {
        prop_assert_eq!(candidate_filter(&row, k).unwrap(), common::sort_filter(&row, k, 0.02));
    }

    #[test]
    fn sinkhorn_respects_mask_and_sign(
        values in prop::collection::vec(-1.0f64..1.0, 5 * 12),
        mask in prop::collection::vec(prop::bool::weighted(0.7), 5 * 12),
    ) {
        let s = DMatrix::from_row_slice(5, 12, &values);
        let candidates: Vec<Vec<bool>> = mask.chunks(12).map(|c| c.to_vec()).collect();
        let scores = ScoreMatrix::with_candidates(s, candidates.clone()).unwrap();
        match sinkhorn_assign(&scores, &SinkhornOptions::default()) {
            Ok(plan) => {
                for l in 0..5 {
                    for d in 0..12 {
                        let p = plan.values[(l, d)];
                        prop_assert!(p >= 0.0);
                        if !candidates[l][d] {
                            prop_assert_eq!(p, 0.0);
                        }
                    }
                }
            }
            Err(e) => prop_assert!(candidates.iter().flatten().all(|c| !c), "{e}"),
        }
    }

    #[test]
    fn permutation_plans_assign_their_column(perm in Just((0..7usize).collect::<Vec<_>>()).prop_shuffle()) {
        let p = DMatrix::from_fn(7, 7, |i, j| if perm[i] == j { 1.0 / 7.0 } else { 0.0 });
        let top = unique_top1(&p);
        prop_assert_eq!(top, perm.iter().map(|&j| Some(j)).collect::<Vec<_>>());
    }

    #[test]
    fn lcc_matches_bfs(h in 1usize..9, w in 1usize..9, bits in prop::collection::vec(any::<bool>(), 64)) {
        let flags: Vec<bool> = bits[..h * w].to_vec();
        let g = GridGeometry { grid_h: h, grid_w: w, patch_size: 16 };
        let mask = ProminenceMask::new(flags.clone(), g).unwrap();
        let ours = connected_components(&mask);
        let oracle = common::bfs_components(&flags, h, w);
        prop_assert_eq!(&ours, &oracle);
        match largest_connected_component(&mask) {
            Ok(lcc) => {
                let best = oracle.iter().fold(&oracle[0], |b, c| if c.len() > b.len() { c } else { b });
                prop_assert_eq!(lcc.indices().collect::<Vec<_>>(), best.clone());
            }
            Err(_) => prop_assert!(oracle.is_empty()),
        }
    }

    #[test]
    fn fiedler_mask_is_scale_invariant(
        f in prop::collection::vec(-1.0f32..1.0, 4 * 5 * 3),
        s in prop::sample::select(vec![1e-3f32, 0.25, 2.0, 64.0]),
    ) {
        let grid = PatchFeatureGrid::new(f, 3, 4, 5, 16, Facet::Tokens).unwrap();
        let a = fiedler_partition(&affinity(&grid).unwrap());
        let b = fiedler_partition(&affinity(&grid.scaled(s)).unwrap());
        if let (Ok(a), Ok(b)) = (a, b) {
            // Degenerate spectra have no unique split to preserve.
            if a.flags.is_empty() {
                prop_assert_eq!(a.mask, b.mask);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn kmeans_is_permutation_equivariant(
        pts in prop::collection::vec(prop::collection::vec(-3i32..3, 2), 6..40),
        perm_seed in any::<u64>(),
        k in 1usize..5,
    ) {
        let points: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| *v as f64).collect()).collect();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut s = perm_seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
        let a = kmeans(&points, k, 11).unwrap();
        let b = kmeans(&permuted, k, 11).unwrap();
        for (j, &i) in order.iter().enumerate() {
            prop_assert_eq!(b.labels[j], a.labels[i]);
        }
    }

    #[test]
    fn store_round_trips(
        c in 1usize..10,
        ch in 1usize..6,
        vals in prop::collection::vec(any::<u32>(), 200),
        n_img in 0usize..3,
        n_txt in 0usize..3,
    ) {
        let finite = |b: u32| f32::from_bits(b & 0xbf7f_ffff);
        let mut store = EmbeddingStore::new(StoreHeader {
            model_id: "p".into(),
            facet: Facet::Keys,
            c,
            channels: ch,
            patch_size: 14,
            layer_norm: Default::default(),
        });
        let mut it = vals.iter().cycle().map(|b| finite(*b));
        for i in 0..n_img {
            let emb = EmbeddingVector::from_raw(it.by_ref().take(c).collect());
            let patches = PatchFeatureGrid::new(it.by_ref().take(2 * 3 * ch).collect(), ch, 2, 3, 14, Facet::Keys).unwrap();
            store.insert_image(ImageRecord { id: format!("i{i}"), digest: None, embedding: emb, patches }).unwrap();
        }
        for i in 0..n_txt {
            store.insert_text(format!("t{i}"), EmbeddingVector::from_raw(it.by_ref().take(c).collect())).unwrap();
        }
        let bytes = store.to_bytes().unwrap();
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.images().len(), n_img);
        prop_assert_eq!(back.num_texts(), n_txt);
    }
}

#[test]
fn retrieval_is_prefix_monotone() {
    let w = SyntheticWorld::standard(3, 1);
    let enc = w.encoder().unwrap();
    let bank = DescriptorBank::from_class_lists(&w.descriptors()).unwrap().embed(&enc).unwrap();
    let clf = build_classifier(&w.class_names(), &["a photo of a [CLASS]."], &enc).unwrap();
    for class in 0..clf.num_classes() {
        let mut prev: Vec<u32> = Vec::new();
        for u in 1..=bank.len() + 3 {
            let r = retrieve_class_descriptors(class, clf.row(class), &bank, u).unwrap();
            assert!(r.ids.starts_with(&prev), "class {class} u {u}");
            assert!(r.scores.windows(2).all(|s| s[0] >= s[1]));
            assert_eq!(r.flags.is_empty(), u <= bank.len());
            prev = r.ids;
        }
    }
}
