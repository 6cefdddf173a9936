mod common;

use candle_core::{Device, Tensor};
use clcc::data::Mask;
use clcc::evaluation::{compute_metrics, MeanStd, MetricOptions};
use clcc::losses::{consistency_loss, contrastive_loss, dice_loss, ce_loss};
use clcc::model::{PredictionMap, ProjectedGrid, ProjectedVectors};
use clcc::ops;
use clcc::patching::{crop_aligned, from_patch_batch, to_patch_batch};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar(t: &Tensor) -> f64 {
    ops::scalar(t).unwrap()
}

fn values(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-10f32..10f32, len)
}

/// `(b, c, n, bh, bw)` with small sizes.
fn layout() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    (1usize..3, 1usize..4, 1usize..5, 1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patch_batch_round_trips((b, c, n, bh, bw) in layout(), seed in any::<u64>()) {
        let len = b * c * n * bh * n * bw;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = random_normal(len, &mut rng).into_iter().map(|x| x as f32).collect();
        let x = Tensor::from_vec(v.clone(), (b, c, n * bh, n * bw), &Device::Cpu).unwrap();
        let patches = to_patch_batch(&x, n).unwrap();
        prop_assert_eq!(patches.dims(), &[b * n * n, c, bh, bw]);
        let back = from_patch_batch(&patches, n).unwrap();
        prop_assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), v);
        for img in 0..b {
            let one = x.get(img).unwrap();
            for i in 0..n * n {
                let crop = crop_aligned(&one, i, n).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
                let row = patches.get(img * n * n + i).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
                prop_assert_eq!(crop, row);
            }
        }
    }

    #[test]
    fn indivisible_sizes_are_rejected(n in 2usize..6, extra in 1usize..6, k in 1usize..4) {
        prop_assume!(extra % n != 0);
        let x = Tensor::zeros((1, 1, n * k + extra, n * k), candle_core::DType::F32, &Device::Cpu).unwrap();
        prop_assert!(to_patch_batch(&x, n).is_err());
        prop_assert!(crop_aligned(&x, 0, n).is_err());
    }

    #[test]
    fn metrics_match_pixel_counts(
        (h, w) in (1usize..10, 1usize..10),
        probs in values(100),
        truth in prop::collection::vec(any::<bool>(), 100),
    ) {
        let probs: Vec<f32> = probs[..h * w].iter().map(|p| (p.abs() / 10.0).min(1.0)).collect();
        let truth = &truth[..h * w];
        let mask = Mask::new(h, w, truth.iter().map(|&t| u8::from(t)).collect()).unwrap();
        let m = compute_metrics(&probs, &mask, MetricOptions::default()).unwrap();
        let rows = |v: Vec<bool>| v.chunks(w).map(<[bool]>::to_vec).collect::<Vec<_>>();
        let pred = rows(probs.iter().map(|&p| p > 0.5).collect());
        let (_, dice, miou) = metrics_oracle(&pred, &rows(truth.to_vec()));
        prop_assert_eq!((m.dice_fg, m.miou), (dice, miou));
        let mae = 100.0 * probs.iter().zip(truth).map(|(&p, &t)| (p as f64 - f64::from(u8::from(t))).abs()).sum::<f64>() / (h * w) as f64;
        prop_assert!((m.mae - mae).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&m.dice_fg) && (0.0..=100.0).contains(&m.miou));

        let binary = compute_metrics(&probs, &mask, MetricOptions { binarized_mae: true }).unwrap();
        let (mae_bin, _, _) = metrics_oracle(&pred, &rows(truth.to_vec()));
        prop_assert!((binary.mae - mae_bin).abs() < 1e-9);
    }

    #[test]
    fn contrastive_matches_oracle_and_ignores_image_order(
        n in 2usize..4, d in 2usize..8, b in 1usize..4, tau in 0.05f64..1.0, seed in any::<u64>(),
    ) {
        let cells = n * n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid: Vec<Vec<f64>> = (0..b * cells).map(|_| random_unit(d, &mut rng)).collect();
        let patches: Vec<Vec<f64>> = (0..b * cells).map(|_| random_unit(d, &mut rng)).collect();
        let loss = |order: &[usize]| {
            let pick = |v: &[Vec<f64>]| order.iter().flat_map(|&i| v[i * cells..(i + 1) * cells].concat()).collect::<Vec<_>>();
            let g = ProjectedGrid { data: tensor(&pick(&grid), &[b, cells, d]), side: n };
            let p = ProjectedVectors(tensor(&pick(&patches), &[b * cells, d]));
            scalar(&contrastive_loss(&g, &p, tau).unwrap())
        };
        let forward: Vec<usize> = (0..b).collect();
        let reversed: Vec<usize> = (0..b).rev().collect();
        let oracle = (0..b)
            .map(|i| contrastive_oracle(&grid[i * cells..(i + 1) * cells], &patches[i * cells..(i + 1) * cells], tau))
            .sum::<f64>() / b as f64;
        prop_assert!((loss(&forward) - oracle).abs() < 1e-9);
        prop_assert!((loss(&forward) - loss(&reversed)).abs() < 1e-9);
        prop_assert!(oracle > 0.0);
    }

    #[test]
    fn consistency_is_zero_for_aligned_and_positive_otherwise(
        n in 1usize..4, side in 1usize..4, seed in any::<u64>(),
    ) {
        let hw = n * side;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let global = tensor(&random_normal(2 * hw * hw, &mut rng), &[1, 2, hw, hw]);
        let aligned = to_patch_batch(&global, n).unwrap();
        let zero = scalar(&consistency_loss(&PredictionMap(global.clone()), &PredictionMap(aligned.clone()), n).unwrap());
        prop_assert!(zero.abs() < 1e-15);
        let shifted = (aligned + tensor(&random_normal(2 * hw * hw, &mut rng), &[n * n, 2, side, side])).unwrap();
        let other = scalar(&consistency_loss(&PredictionMap(global), &PredictionMap(shifted), n).unwrap());
        prop_assert!(other > 0.0 && other <= 1.0);
    }

    #[test]
    fn supervised_terms_are_bounded(b in 1usize..3, side in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = PredictionMap(tensor(&random_normal(b * 2 * side * side, &mut rng), &[b, 2, side, side]));
        let mask: Vec<f64> = random_normal(b * side * side, &mut rng).iter().map(|x| f64::from(u8::from(*x > 0.0))).collect();
        let mask = tensor(&mask, &[b, side, side]);
        let dice = scalar(&dice_loss(&logits, &mask).unwrap());
        let ce = scalar(&ce_loss(&logits, &mask).unwrap());
        prop_assert!((0.0..=1.0).contains(&dice));
        prop_assert!(ce > 0.0);
    }

    #[test]
    fn mean_std_matches_sample_formula(v in prop::collection::vec(-100f64..100.0, 2..10)) {
        let ms = MeanStd::of(&v).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        prop_assert!((ms.mean - mean).abs() < 1e-9);
        prop_assert!((ms.std - var.sqrt()).abs() < 1e-9);
    }
}
