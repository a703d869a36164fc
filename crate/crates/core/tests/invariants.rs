use std::collections::BTreeSet;

use proptest::prelude::*;

use lvgraph::gnn::{gcn_layer_forward, soft_argmax, GcnLayer, NormAdjacency};
use lvgraph::graph::{assemble_hierarchy, patch_index, Level};
use lvgraph::labels::{
    induce_level_labels, main_graph_labels, measurements_from_landmarks, rescale_landmarks, LandmarkSet,
};
use lvgraph::linalg::Mat;
use lvgraph::objective::weighted_bce;
use lvgraph::train::metrics_from_pairs;
use lvgraph::Exec;

fn frame() -> impl Strategy<Value = (u32, usize)> {
    (1u32..=4).prop_flat_map(|k| ((Just(k)), (1usize << k)..=40))
}

fn landmarks(size: usize) -> impl Strategy<Value = LandmarkSet> {
    let coord = 0.0..(size as f64);
    proptest::array::uniform4((coord.clone(), coord))
        .prop_map(move |p| LandmarkSet::new(p.map(|(h, w)| [h, w]), 0.5, size, size).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn node_count_identity((k, size) in frame(), extra in 0usize..9) {
        let (h, w) = (size, size + extra);
        let g = assemble_hierarchy(k, h, w).unwrap();
        let aux: usize = (1..=k).map(|i| 1usize << (2 * i)).sum();
        prop_assert_eq!(g.node_count(), aux + h * w);
        prop_assert_eq!(g.node_level.len(), g.node_count());
        let set: BTreeSet<_> = g.edges.iter().copied().collect();
        prop_assert_eq!(set.len(), g.edges.len());
        prop_assert!(g.edges.iter().all(|&(u, v)| u < v && (v as usize) < g.node_count()));
        // every pixel has exactly one level-K parent
        let main = g.level_range(Level::Main);
        let parents = g.edges.iter().filter(|&&(u, v)| {
            g.node_level[u as usize] == Level::Aux(k) && main.contains(&(v as usize))
        }).count();
        prop_assert_eq!(parents, h * w);
    }

    #[test]
    fn labels_nest_across_levels((k, size) in (2u32..=5).prop_flat_map(|k| (Just(k), (1usize << k)..=64)), seed in any::<u64>()) {
        let lm = {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = [(); 4].map(|_| [rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)]);
            LandmarkSet::new(p, 1.0, size, size).unwrap()
        };
        let main = main_graph_labels(&lm).unwrap();
        for level in 1..=k {
            let lab = induce_level_labels(&lm, level).unwrap();
            prop_assert_eq!(lab.nodes(), 1usize << (2 * level));
            for p in 0..4 {
                let px = main.positives(p);
                prop_assert_eq!(px.len(), 1);
                let (h, w) = (px[0] / size, px[0] % size);
                prop_assert_eq!(lab.positives(p), vec![patch_index(h, w, level, size, size).unwrap()]);
            }
        }
    }

    #[test]
    fn soft_argmax_shift_invariant_and_convex(vals in prop::collection::vec(0.0f64..1.0, 16), shift in -5.0f64..5.0, tau in 0.05f64..3.0) {
        let g = assemble_hierarchy(1, 4, 4).unwrap();
        let a = soft_argmax(&vals, g.main_locs(), tau).unwrap();
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let b = soft_argmax(&shifted, g.main_locs(), tau).unwrap();
        prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        prop_assert!(a.iter().all(|c| (0.0..=3.0).contains(c)));
    }

    #[test]
    fn gcn_is_permutation_equivariant(n in 2usize..20, seed in any::<u64>()) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut edges = BTreeSet::new();
        for _ in 0..2 * n {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a != b {
                edges.insert((a.min(b) as u32, a.max(b) as u32));
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = [0.1, -0.05];
        let layer = GcnLayer { weight: &w, bias: &b };

        let e1: Vec<_> = edges.iter().copied().collect();
        let y = gcn_layer_forward(Exec::Sequential, &NormAdjacency::from_edges(n, &e1).unwrap(), &Mat::from_vec(n, 3, x.clone()), layer);

        // node i moves to perm[i]
        let e2: Vec<_> = edges.iter().map(|&(u, v)| {
            let (a, b) = (perm[u as usize] as u32, perm[v as usize] as u32);
            (a.min(b), a.max(b))
        }).collect();
        let mut xp = vec![0.0; n * 3];
        for i in 0..n {
            xp[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(&x[i * 3..i * 3 + 3]);
        }
        let yp = gcn_layer_forward(Exec::Sequential, &NormAdjacency::from_edges(n, &e2).unwrap(), &Mat::from_vec(n, 3, xp), layer);
        for i in 0..n {
            for c in 0..2 {
                prop_assert!((y.at(i, c) - yp.at(perm[i], c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn measurements_survive_isotropic_resize(lm in landmarks(64), target in prop::sample::select(vec![16usize, 32, 128, 224])) {
        let r = rescale_landmarks(&lm, (64, 64), (target, target)).unwrap();
        let (a, b) = (measurements_from_landmarks(&lm).as_array(), measurements_from_landmarks(&r).as_array());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn bce_is_non_negative(p in prop::collection::vec(0.0f64..=1.0, 1..40), seed in any::<u64>(), w in 1.0f64..10000.0) {
        let labels = lvgraph::labels::LevelLabels {
            level: Level::Main,
            values: p.iter().enumerate().map(|(i, _)| ((seed >> (i % 64)) & 1) as u8).collect(),
        };
        prop_assert!(weighted_bce(&p, &labels, w).unwrap() >= 0.0);
    }

    #[test]
    fn metrics_are_order_independent(sets in prop::collection::vec((landmarks(64), landmarks(64)), 1..12)) {
        let m = metrics_from_pairs(&sets).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.sdr_2mm) && m.sdr_2mm <= m.sdr_6mm && m.sdr_6mm <= 1.0);
        let mut rev = sets.clone();
        rev.reverse();
        prop_assert_eq!(metrics_from_pairs(&rev).unwrap(), m);
    }
}
