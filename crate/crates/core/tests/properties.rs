use proptest::prelude::*;

use traffic_text::dataset::{split_temporal, window_count, windowize, EventLog, NormStats, TrafficSeries};
use traffic_text::fusion::{adaptive_adjacency, sparse_align};
use traffic_text::generator::{select_top, selection_size};
use traffic_text::metrics::{bleu4, lcs_length, mae, meteor, rmse, rouge_l};
use traffic_text::numerics::{matmul, softmax_rows, topk_mask, Tensor};
use traffic_text::tokenizer::Vocab;
use traffic_text::training::lr_schedule;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| tensor(&[r, c], d))
    })
}

fn tokens() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 1..=20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(8, 8)) {
        let p = softmax_rows(&x).unwrap();
        for row in p.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn topk_mask_has_k_ones(x in matrix(6, 10), k_frac in 0.0f64..1.0) {
        let n = x.last_dim();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let m = topk_mask(&x, k).unwrap();
        for row in m.rows() {
            prop_assert_eq!(row.iter().sum::<f64>(), k as f64);
        }
    }

    #[test]
    fn matmul_matches_triple_loop((m, k, n) in (1usize..=8, 1usize..=8, 1usize..=8), seed in any::<u64>()) {
        let mut rng = traffic_text::numerics::RngState::new(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.get(&[i, l]) * b.get(&[l, j]);
                }
                prop_assert!((c.get(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adaptive_adjacency_is_row_stochastic(e in matrix(12, 6)) {
        let a = adaptive_adjacency(&e).unwrap();
        for row in a.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn sparse_align_rows_have_at_most_k_nonzeros(
        (s, l, d) in (1usize..6, 1usize..10, 1usize..6),
        k_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = traffic_text::numerics::RngState::new(seed);
        let q = Tensor::randn(&[1, s, d], 1.0, &mut rng);
        let kv = Tensor::randn(&[1, l, d], 1.0, &mut rng);
        let k = 1 + ((l - 1) as f64 * k_frac) as usize;
        let out = sparse_align(&q, &kv, k).unwrap();
        for row in out.attn_weights.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().filter(|&&w| w != 0.0).count() <= k);
        }
    }

    #[test]
    fn selection_is_ceil_thirty_percent(scores in prop::collection::vec(0.0f64..1.0, 1..=50)) {
        let n = scores.len();
        let sel = select_top(&scores);
        prop_assert_eq!(sel.len(), (3 * n).div_ceil(10));
        prop_assert_eq!(sel.len(), selection_size(n));
        let min_sel = sel.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let max_rest = (0..n).filter(|i| !sel.contains(i)).map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_sel >= max_rest);
    }

    #[test]
    fn text_metrics_stay_in_range(h in tokens(), r in tokens()) {
        let b = bleu4(&h, &[&r]);
        prop_assert!((0.0..=100.0).contains(&b));
        prop_assert!((0.0..=1.0).contains(&meteor(&h, &r)));
        prop_assert!((0.0..=1.0).contains(&rouge_l(&h, &r)));
        let self_score = if r.len() >= 4 { 100.0 } else { 0.0 };
        prop_assert!((bleu4(&r, &[&r]) - self_score).abs() < 1e-9);
    }

    #[test]
    fn lcs_is_symmetric_and_bounded(x in tokens(), y in tokens()) {
        let l = lcs_length(&x, &y);
        prop_assert_eq!(l, lcs_length(&y, &x));
        prop_assert!(l <= x.len().min(y.len()));
    }

    #[test]
    fn bleu_is_invariant_under_relabeling(h in tokens(), r in tokens(), shift in 1u8..6) {
        let relabel = |v: &[u8]| v.iter().map(|t| (t + shift) % 6).collect::<Vec<_>>();
        let (h2, r2) = (relabel(&h), relabel(&r));
        prop_assert_eq!(bleu4(&h, &[&r]), bleu4(&h2, &[&r2]));
    }

    #[test]
    fn rmse_dominates_mae_and_both_translate(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..40),
        c in -50.0f64..50.0,
    ) {
        let (y, yh): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (m, r) = (mae(&y, &yh).unwrap(), rmse(&y, &yh).unwrap());
        prop_assert!(r >= m - 1e-12);
        let ys: Vec<f64> = y.iter().map(|v| v + c).collect();
        let yhs: Vec<f64> = yh.iter().map(|v| v + c).collect();
        prop_assert!((mae(&ys, &yhs).unwrap() - m).abs() < 1e-9);
        prop_assert!((rmse(&ys, &yhs).unwrap() - r).abs() < 1e-9);
    }

    #[test]
    fn window_count_matches_windowize((t, extra) in (1usize..6, 0usize..20)) {
        let n_steps = 2 * t + extra;
        let series = TrafficSeries { speeds: Tensor::filled(&[n_steps, 2, 1], 50.0), step_minutes: 4 };
        let vocab = Vocab::build(&["jam on elm road"], 1).unwrap();
        let samples = windowize(&series, &EventLog::default(), &vocab, t, 8).unwrap();
        prop_assert_eq!(samples.len(), window_count(n_steps, t));
        prop_assert_eq!(samples.len(), extra + 1);
        for s in &samples {
            prop_assert_eq!(s.x_hist.shape()[0], t);
            prop_assert_eq!(s.y_future.shape()[0], t);
        }
        let (train, test) = split_temporal(samples, 0.8);
        if let (Some(last), Some(first)) = (train.last(), test.first()) {
            prop_assert!(last.anchor + 2 * t <= first.anchor);
        }
    }

    #[test]
    fn normalization_roundtrips(data in prop::collection::vec(0.0f64..120.0, 3 * 4)) {
        let x = tensor(&[4, 3, 1], data);
        let stats = NormStats::fit(&x, 0..4);
        prop_assert!(stats.std.iter().all(|&s| s > 0.0));
        let back = stats.denormalize(&stats.normalize(&x));
        prop_assert!(back.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn encode_is_length_exact_and_roundtrips(
        words in prop::collection::vec(prop::sample::select(vec!["jam", "on", "elm", "road", "closure"]), 0..12),
        len in 3usize..16,
    ) {
        let vocab = Vocab::build(&["jam on elm road closure"], 1).unwrap();
        let text = words.join(" ");
        let seq = vocab.encode(&text, len);
        prop_assert_eq!(seq.len(), len);
        prop_assert!(seq.is_well_formed(vocab.len()));
        if words.len() + 2 <= len {
            prop_assert_eq!(vocab.decode(&seq.ids), text);
        }
    }

    #[test]
    fn lr_schedule_is_bounded_and_continuous(total in 10usize..500, warm_frac in 0.0f64..0.9, base in 1e-5f64..1e-1) {
        let warmup = ((total as f64 * warm_frac) as usize).max(1);
        let mut prev = 0.0;
        for step in 0..=total {
            let lr = lr_schedule(step, total, warmup, base);
            prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
            if step > 0 {
                // neither branch moves more than one warmup increment or one cosine slope per step
                let max_jump = base / warmup as f64 + base * std::f64::consts::PI / (2.0 * (total - warmup).max(1) as f64);
                prop_assert!((lr - prev).abs() <= max_jump + 1e-15);
            }
            prev = lr;
        }
        prop_assert!((lr_schedule(warmup, total, warmup, base) - base).abs() < 1e-15);
    }
}
