use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vico_core::diffusion::{denoising_loss, NoiseSchedule, ScheduleConfig};
use vico_core::evalkit::{cosine_sim, mask_iou, MetricReport, PromptReport, Similarity};
use vico_core::numerics::{Graph, Tensor};
use vico_core::text::{tokenize, Vocabulary, EOT, PLACEHOLDER};
use vico_core::trainer::plan_batch;
use vico_core::vico::{histogram_bin, otsu_threshold, regularizer_value};

/// Exhaustive between-class variance argmax in f64 over every boundary.
fn otsu_brute(values: &[f64], bins: usize) -> usize {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bin: Vec<usize> = values.iter().map(|&v| histogram_bin(v, min, max, bins)).collect();
    let mut best = (0, -1.0);
    for k in 1..bins {
        let (lo, hi): (Vec<f64>, Vec<f64>) = {
            let lo = bin.iter().filter(|&&b| b < k).map(|&b| b as f64).collect();
            let hi = bin.iter().filter(|&&b| b >= k).map(|&b| b as f64).collect();
            (lo, hi)
        };
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let n = values.len() as f64;
        let (w0, w1) = (lo.len() as f64 / n, hi.len() as f64 / n);
        let mu0 = lo.iter().sum::<f64>() / lo.len() as f64;
        let mu1 = hi.iter().sum::<f64>() / hi.len() as f64;
        let var = w0 * w1 * (mu0 - mu1).powi(2);
        if var > best.1 * (1.0 + 1e-12) {
            best = (k, var);
        }
    }
    best.0
}

fn report(prompt: &str, pairs: Vec<f64>, iou: Option<f64>) -> PromptReport {
    let sim = |v: Vec<f64>| Similarity {
        mean: v.iter().sum::<f64>() / v.len() as f64,
        pairs: v,
    };
    PromptReport {
        prompt: prompt.into(),
        samples: pairs.len(),
        image_similarity: sim(pairs.clone()),
        text_similarity: sim(pairs.iter().map(|p| -p).collect()),
        mask_iou: iou,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[rows, cols], scale, &mut rng);
        let mut g = Graph::new();
        let v = g.constant(&x);
        let s = g.softmax_last(v).unwrap();
        for r in g.value(s).data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let x = Tensor::<f32>::randn(&[rows, cols], scale, &mut rng);
        let mut g = Graph::new();
        let v = g.constant(&x);
        let s = g.softmax_last(v).unwrap();
        for r in g.value(s).data().chunks(cols) {
            prop_assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn otsu_matches_exhaustive_search(values in prop::collection::vec(-5.0f64..5.0, 2..80), bins in 2usize..64) {
        let o = otsu_threshold(&values, bins).unwrap();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(o.degenerate, min == max);
        if !o.degenerate {
            prop_assert_eq!(o.boundary, otsu_brute(&values, bins));
            prop_assert!(o.tau > min && o.tau <= max);
        }
    }

    #[test]
    fn regularizer_is_scale_invariant(
        cols in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..40),
        c in 1e-3f64..1e3,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = cols.into_iter().unzip();
        let scaled: Vec<f64> = b.iter().map(|x| x * c).collect();
        let base = regularizer_value(&a, &b);
        prop_assert!(base >= 0.0);
        prop_assert!((regularizer_value(&a, &scaled) - base).abs() <= 1e-9);
        prop_assert_eq!(regularizer_value(&a, &a), 0.0);
    }

    #[test]
    fn tokenize_reports_placeholder_and_eot(picks in prop::collection::vec(any::<prop::sample::Index>(), 0..10), slot in any::<prop::sample::Index>()) {
        let vocab = Vocabulary::default();
        let words: Vec<&String> = vocab.words().keys().collect();
        let mut prompt: Vec<&str> = picks.iter().map(|i| words[i.index(words.len())].as_str()).collect();
        prompt.insert(slot.index(prompt.len() + 1), "{}");
        let t = tokenize(&vocab, &prompt.join(" "), 16).unwrap();
        let i = t.s_star.unwrap();
        prop_assert!(i < t.eot && t.eot < 16);
        prop_assert_eq!(t.ids[i], PLACEHOLDER);
        prop_assert_eq!(t.ids[t.eot], EOT);
        prop_assert_eq!(t.ids.len(), 16);
    }

    #[test]
    fn denoising_loss_ignores_joint_permutation(n in 1usize..24, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::randn(&[n], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[n], 1.0, &mut rng);
        let perm: Vec<usize> = (0..n).rev().collect();
        let permute = |t: &Tensor<f64>| Tensor::new(&[n], perm.iter().map(|&i| t.data()[i]).collect()).unwrap();
        let loss = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let mut g = Graph::new();
            let (x, y) = (g.constant(x), g.constant(y));
            let l = denoising_loss(&mut g, x, y).unwrap();
            g.value(l).item()
        };
        prop_assert!((loss(&a, &b) - loss(&permute(&a), &permute(&b))).abs() < 1e-12);
    }

    #[test]
    fn cosine_and_iou_stay_in_range(
        u in prop::collection::vec(-10.0f64..10.0, 1..16),
        pred in prop::collection::vec(any::<bool>(), 16),
        truth in prop::collection::vec(any::<bool>(), 64),
    ) {
        let v: Vec<f64> = u.iter().rev().map(|x| x * 0.5 - 1.0).collect();
        if let Ok(c) = cosine_sim(&u, &v) {
            prop_assert!((-1.0..=1.0).contains(&c));
        }
        let iou = mask_iou(&pred, (4, 4), &truth, (8, 8)).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
    }

    #[test]
    fn aggregation_ignores_prompt_order(
        sims in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 1..5), prop::option::of(0.0f64..1.0)), 1..6),
        rot in any::<prop::sample::Index>(),
    ) {
        let reports: Vec<PromptReport> = sims.into_iter().enumerate().map(|(k, (p, iou))| report(&format!("p{k}"), p, iou)).collect();
        let mut rotated = reports.clone();
        rotated.rotate_left(rot.index(reports.len()));
        let a = MetricReport::aggregate("img", "txt", reports).unwrap();
        let b = MetricReport::aggregate("img", "txt", rotated).unwrap();
        prop_assert!((a.image_similarity - b.image_similarity).abs() < 1e-12);
        prop_assert!((a.text_similarity - b.text_similarity).abs() < 1e-12);
        prop_assert_eq!(a.samples, b.samples);
        match (a.mask_iou, b.mask_iou) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn batches_cycle_targets_and_avoid_self_reference(n in 1usize..9, step in 0usize..50, batch in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = plan_batch(n, 7, step, batch, &mut rng).unwrap();
        for k in 0..batch {
            prop_assert_eq!(plan.targets[k], (step * batch + k) % n);
            prop_assert!(plan.references[k] < n && plan.templates[k] < 7);
            prop_assert_eq!(plan.references[k] == plan.targets[k], n == 1);
        }
    }

    #[test]
    fn linear_schedule_is_monotone(start in 1e-5f64..1e-3, width in 1e-3f64..0.05, steps in 2usize..2000) {
        let cfg = ScheduleConfig { beta_start: start, beta_end: start + width, train_steps: steps };
        let s = NoiseSchedule::from_config(&cfg).unwrap();
        prop_assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        prop_assert!(s.alpha_bar.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a <= 1.0));
    }
}
