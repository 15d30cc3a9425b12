mod common;

use common::{random_weighted_sample, rng};
use intraclass::arch::{parse, ShapeBindings};
use intraclass::data::batch_indices;
use intraclass::losses::{cross_entropy, kl_divergence, wen_centroid_update};
use intraclass::stats::{
    class_and_grand_means, covariance, mean, scatter, trace, variance, within_class_covariance,
    within_class_variance, WeightedSample,
};
use intraclass::{CentroidBank, Tape, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-10;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * a.abs().max(b.abs()).max(1.0)
}

/// `E‖x‖² − ‖E x‖²`, computed without the library.
fn raw_moment_variance(s: &WeightedSample) -> f64 {
    let d = s.dim();
    let mut m = vec![0.0; d];
    let mut second = 0.0;
    for (p, w) in s.points().iter().zip(s.weights()) {
        for i in 0..d {
            m[i] += w * p[i];
        }
        second += w * p.iter().map(|v| v * v).sum::<f64>();
    }
    second - m.iter().map(|v| v * v).sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scatter_equals_variance(seed in any::<u64>()) {
        let s = random_weighted_sample(&mut rng(seed), 8, 5, 50);
        let v = variance(&s).unwrap();
        prop_assert!(close(scatter(&s).unwrap(), v));
        prop_assert!(close(raw_moment_variance(&s), v));
        prop_assert!(close(trace(&covariance(&s)), v));
    }

    #[test]
    fn within_class_identities(seed in any::<u64>()) {
        let s = random_weighted_sample(&mut rng(seed), 8, 5, 50);
        let cm = class_and_grand_means(&s).unwrap();
        let vw = within_class_variance(&s).unwrap();
        prop_assert!(close(vw, trace(&within_class_covariance(&s).unwrap())));
        prop_assert!(close(vw, variance(&s.class_centered().unwrap()).unwrap()));
        let by_scatter: f64 = cm.classes.iter().zip(&cm.class_masses)
            .map(|(&k, p)| p * scatter(&s.class_subsample(k).unwrap()).unwrap())
            .sum();
        prop_assert!(close(vw, by_scatter));
        // grand mean as the mass-weighted class means, and the variance split
        let d = s.dim();
        let mut g = vec![0.0; d];
        let mut between = 0.0;
        for (m, p) in cm.class_means.iter().zip(&cm.class_masses) {
            for i in 0..d {
                g[i] += p * m[i];
            }
            between += p * m.iter().zip(&cm.grand_mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        for (a, b) in g.iter().zip(mean(&s)) {
            prop_assert!(close(*a, b));
        }
        prop_assert!(close(variance(&s).unwrap(), vw + between));
    }

    #[test]
    fn shannon_info_matches_kl_and_cross_entropy(
        scores in prop::collection::vec(-8.0f64..8.0, 2..12),
        pick in any::<prop::sample::Index>(),
    ) {
        let k = scores.len();
        let y = pick.index(k);
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new([1, k], scores).unwrap());
        let p = tape.softmax(s).unwrap();
        let probs = tape.value(p).data().to_vec();
        let info = tape.shannon_info_loss(p, &[y]).unwrap();
        let info = tape.value(info).data()[0];
        let mut onehot = vec![0.0; k];
        onehot[y] = 1.0;
        prop_assert!((info - kl_divergence(&onehot, &probs).unwrap()).abs() <= 1e-12);
        prop_assert!((info - cross_entropy(&onehot, &probs).unwrap()).abs() <= 1e-12);
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn combined_loss_adds_weighted_variance(seed in any::<u64>(), lambda in 0.0f64..2.0) {
        let mut g = rng(seed);
        let s = common::random_tensor(&mut g, &[6, 4], 2.0);
        let x = common::random_tensor(&mut g, &[6, 3], 1.0);
        let c = common::random_tensor(&mut g, &[3, 4], 1.0);
        let labels = [0, 1, 2, 3, 1, 0];
        let mut tape = Tape::new();
        let (s, x, c) = (tape.constant(s), tape.constant(x), tape.constant(c));
        let centers = tape.hadamard_centers(c).unwrap();
        let (_, b) = tape.combined_loss(s, x, Some(centers), &labels, lambda).unwrap();
        prop_assert!((b.total - (b.l0 + lambda * b.l_var)).abs() <= 1e-12 * b.total.abs().max(1.0));
        let (_, b0) = tape.combined_loss(s, x, Some(centers), &labels, 0.0).unwrap();
        prop_assert_eq!(b0.total, b0.l0);
    }

    #[test]
    fn batches_partition_the_dataset(len in 1usize..700, bs in 1usize..300, seed in any::<u64>(), epoch in 0u64..50) {
        let batches = batch_indices(len, bs, seed, epoch);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
        prop_assert_eq!(&batches, &batch_indices(len, bs, seed, epoch));
    }

    #[test]
    fn full_step_wen_update_lands_on_batch_means(seed in any::<u64>()) {
        let mut g = rng(seed);
        let labels = [0usize, 2, 2, 0, 2];
        let x = common::random_tensor(&mut g, &[5, 3], 3.0);
        let mut bank = CentroidBank::<f64>::from_tensor(common::random_tensor(&mut g, &[3, 4], 1.0)).unwrap();
        let untouched = (bank.center(1), bank.center(3));
        wen_centroid_update(&mut bank, x.data(), &labels, 1.0).unwrap();
        for k in [0, 2] {
            let rows: Vec<&[f64]> = labels.iter().enumerate().filter(|(_, &l)| l == k)
                .map(|(i, _)| &x.data()[i * 3..i * 3 + 3]).collect();
            for d in 0..3 {
                let m = rows.iter().map(|r| r[d]).sum::<f64>() / rows.len() as f64;
                prop_assert!((bank.center(k)[d] - m).abs() <= 1e-12);
            }
        }
        prop_assert_eq!((bank.center(1), bank.center(3)), untouched);
    }

    #[test]
    fn arch_text_round_trips(
        convs in prop::collection::vec((1usize..4, 1usize..9, any::<bool>(), any::<bool>()), 0..4),
        pool in any::<bool>(),
        drop in 1u32..100,
        dense_relu in any::<bool>(),
        normalize in any::<bool>(),
    ) {
        let mut text = String::from("in:yx:image(32);\n# generated\n");
        for (k, c, p, r) in &convs {
            let k = 2 * k - 1;
            text += &format!("conv:{k}x{c}:{}:{} ;", if *p { "p" } else { "" }, if *r { "r" } else { "" });
        }
        if pool {
            text += "pool:2:m;";
        }
        text += &format!("drop:{drop}; dense:n::{} ->x;", if dense_relu { "r" } else { "" });
        text += if normalize { "norm ->norm;" } else { "<-x;" };
        text += "dense:K ->scores; centers(C) ->centers;";
        let g = parse(&text).unwrap();
        let printed = g.to_text();
        let again = parse(&printed).unwrap();
        prop_assert_eq!(&again, &g);
        prop_assert_eq!(again.to_text(), printed);
        prop_assert_eq!(g.node_count(), g.layers().len());
        let shapes = intraclass::arch::infer_shapes(&g, &ShapeBindings::new(3, 7));
        let extent: usize = 32 - convs.iter().filter(|c| !c.2).map(|c| 2 * c.0 - 2).sum::<usize>();
        prop_assert_eq!(shapes.is_ok(), !pool || extent.is_multiple_of(2));
    }
}
