//! Randomized invariants over shapes and seeds.

use proptest::prelude::*;
use whitebox_core::data::{patchify_image, unpatchify_image, PatchSpec};
use whitebox_core::denoise::{posterior_mean, relative_error, tweedie_denoise, MixtureModel};
use whitebox_core::diagnostics::measure_sparsity;
use whitebox_core::layers::{ista_step, LayerTrace};
use whitebox_core::linalg::{random_orthonormal, softmax_columns};
use whitebox_core::rate::{coding_rate, RateConfig};
use whitebox_core::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_columns_are_distributions(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let g = Rng::new(seed).normal_matrix(rows, cols).scale(scale);
        let s = softmax_columns(&g).unwrap();
        for c in 0..cols {
            let col = s.column(c);
            prop_assert!(col.iter().all(|v| *v >= 0.0));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ista_output_is_nonnegative(d in 1usize..8, n in 1usize..8, seed in any::<u64>(), lambda in 0.0f64..1.0) {
        let mut rng = Rng::new(seed);
        let z = rng.normal_matrix(d, n);
        let dict = rng.normal_matrix(d, d);
        let out = ista_step(&z, &dict, 0.1, lambda).unwrap();
        prop_assert!(out.as_slice().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn patch_tokens_round_trip(gh in 1usize..4, gw in 1usize..4, ph in 1usize..4, pw in 1usize..4, channels in 1usize..4, seed in any::<u64>()) {
        let spec = PatchSpec { height: gh * ph, width: gw * pw, channels, patch_height: ph, patch_width: pw };
        let mut rng = Rng::new(seed);
        let pixels: Vec<u8> = (0..gh * ph * gw * pw * channels).map(|_| rng.below(256) as u8).collect();
        let tokens = patchify_image(&pixels, &spec).unwrap();
        prop_assert_eq!(tokens.shape(), (ph * pw * channels, gh * gw));
        let back = unpatchify_image(&tokens, &spec).unwrap();
        for (a, b) in back.iter().zip(&pixels) {
            prop_assert!((a - *b as f64 / 255.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sparsity_is_non_increasing_in_threshold(seed in any::<u64>(), t1 in 0.0f64..2.0, dt in 0.0f64..2.0) {
        let mut rng = Rng::new(seed);
        let out = rng.normal_matrix(6, 5).relu();
        let trace = vec![vec![LayerTrace { z_in: out.clone(), z_mid: out.clone(), z_out: out }]];
        let lo = measure_sparsity(&trace, t1).unwrap()[0];
        let hi = measure_sparsity(&trace, t1 + dt).unwrap()[0];
        prop_assert!(hi <= lo);
    }

    #[test]
    fn coding_rate_ignores_token_order(d in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let z = rng.normal_matrix(d, n);
        let perm = rng.permutation(n);
        let cfg = RateConfig::new(d, n, 1, 1);
        let a = coding_rate(&z, &cfg).unwrap();
        let b = coding_rate(&z.select_columns(&perm).unwrap(), &cfg).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
    }

    #[test]
    fn tweedie_matches_posterior_mean(seed in any::<u64>(), k in 1usize..4, d in 3usize..10, sigma in 0.05f64..2.0) {
        let mut rng = Rng::new(seed);
        let bases = (0..k).map(|_| random_orthonormal(d, 2, &mut rng).unwrap()).collect();
        let lambdas = (0..k).map(|_| vec![0.5 + rng.uniform(), 0.5 + rng.uniform()]).collect();
        let mut pi = vec![1.0 / k as f64; k];
        pi[k - 1] = 1.0 - pi[..k - 1].iter().sum::<f64>();
        let model = MixtureModel::new(pi, bases, lambdas, sigma).unwrap();
        for sample in model.sample(10, &mut rng).unwrap() {
            let t = tweedie_denoise(&model, &sample.x).unwrap();
            let m = posterior_mean(&model, &sample.x).unwrap();
            prop_assert!(relative_error(&t, &m) <= 1e-10);
        }
    }
}
