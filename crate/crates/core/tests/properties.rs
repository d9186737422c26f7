use proptest::prelude::*;

use crtlab::env::{make_trace, render_trace, EnvConfig};
use crtlab::metrics::{
    aes, compression_ratio, gunzip, pass_at_1, read_aes_csv, read_metric_csv, write_aes_csv,
    write_metric_csv, AesRow, AesWeights, EvalReport, MetricRow, PromptEval,
};
use crtlab::norm::{normalize_lengths, NormStatsSource};
use crtlab::trainer::{dual_update, switching_decision};
use crtlab::types::{Branch, PromptSet, RolloutGroup, TraceSample};

fn sample(len: usize, correct: bool) -> TraceSample {
    TraceSample {
        prompt_id: "p".into(),
        bucket: 0,
        latent_depth: 1,
        latent_redundancy: 0,
        text: String::new(),
        token_count: len,
        extracted_answer: None,
        correct,
    }
}

fn group(lens: &[usize]) -> RolloutGroup {
    RolloutGroup::new("p", lens.iter().map(|&l| sample(l, true)).collect()).unwrap()
}

fn live(lens: &[usize]) -> Vec<f64> {
    normalize_lengths(&group(lens), &NormStatsSource::live()).unwrap()
}

proptest! {
    #[test]
    fn normalized_lengths_stay_inside_the_unit_interval(lens in prop::collection::vec(0usize..100_000, 2..32)) {
        for v in live(&lens) {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn normalization_preserves_length_order(lens in prop::collection::vec(0usize..500, 2..32)) {
        let out = live(&lens);
        for i in 0..lens.len() {
            for j in 0..lens.len() {
                if lens[i] < lens[j] {
                    prop_assert!(out[i] <= out[j]);
                }
                if lens[i] == lens[j] {
                    prop_assert_eq!(out[i], out[j]);
                }
            }
        }
    }

    #[test]
    fn live_normalization_ignores_scale_and_shift(
        lens in prop::collection::vec(0usize..500, 2..32),
        scale in 1usize..20,
        shift in 0usize..1000,
    ) {
        let moved: Vec<usize> = lens.iter().map(|l| l * scale + shift).collect();
        for (a, b) in live(&lens).iter().zip(live(&moved)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn aes_rises_with_accuracy_and_falls_with_length(
        a0 in 1.0f64..100.0,
        l0 in 10.0f64..10_000.0,
        a in 0.0f64..100.0,
        l in 1.0f64..20_000.0,
        da in 0.0f64..10.0,
        dl in 0.0f64..1000.0,
    ) {
        for w in [AesWeights::AES1, AesWeights::AES2] {
            let s = aes(a0, l0, a, l, w).unwrap();
            prop_assert!(aes(a0, l0, a + da, l, w).unwrap() >= s - 1e-12);
            prop_assert!(aes(a0, l0, a, l + dl, w).unwrap() <= s + 1e-12);
        }
    }

    #[test]
    fn aes2_never_exceeds_aes1(a0 in 1.0f64..100.0, l0 in 10.0f64..10_000.0, a in 0.0f64..100.0, l in 1.0f64..20_000.0) {
        let one = aes(a0, l0, a, l, AesWeights::AES1).unwrap();
        let two = aes(a0, l0, a, l, AesWeights::AES2).unwrap();
        prop_assert!(two <= one);
        prop_assert_eq!(one == two, a >= a0);
    }

    #[test]
    fn pass_at_1_ignores_order(flags in prop::collection::vec(any::<bool>(), 1..64), rot in 0usize..64) {
        let samples: Vec<TraceSample> = flags.iter().map(|&c| sample(10, c)).collect();
        let mut shuffled = samples.clone();
        shuffled.rotate_left(rot % samples.len());
        shuffled.reverse();
        prop_assert_eq!(pass_at_1(&samples).unwrap(), pass_at_1(&shuffled).unwrap());
        let hits = flags.iter().filter(|&&c| c).count();
        prop_assert_eq!(pass_at_1(&samples).unwrap(), hits as f64 / flags.len() as f64);
    }

    #[test]
    fn compression_ratio_is_positive_and_deterministic(bytes in prop::collection::vec(any::<u8>(), 1..2000)) {
        let r = compression_ratio(&bytes).unwrap();
        prop_assert!(r > 0.0);
        prop_assert_eq!(r, compression_ratio(&bytes).unwrap());
    }

    #[test]
    fn switching_takes_the_length_branch_iff_the_floor_holds(
        at in 0u32..=100, aref in 0u32..=100, eps in 0u32..=20, eta in 0u32..=20,
    ) {
        let d = switching_decision(f64::from(at) / 100.0, f64::from(aref) / 100.0, f64::from(eps) / 100.0, f64::from(eta) / 100.0);
        let violated = i64::from(at) < i64::from(aref) - i64::from(eps) - i64::from(eta);
        prop_assert_eq!(d.branch == Branch::RectifyAccuracy, violated);
    }

    #[test]
    fn dual_variable_is_never_negative(lambda in 0.0f64..10.0, residual in -10.0f64..10.0, lr in 0.0f64..1.0) {
        prop_assert!(dual_update(lambda, residual, lr) >= 0.0);
    }

    #[test]
    fn prompt_sets_round_trip(n in 1usize..30, lo in 1usize..4, span in 0usize..4, seed in any::<u64>()) {
        let set = PromptSet::synthetic(n, lo, lo + span, seed).unwrap();
        let back = PromptSet::from_json_str(&set.to_json()).unwrap();
        prop_assert_eq!(set.prompts(), back.prompts());
    }

    #[test]
    fn rendered_traces_verify_iff_deep_enough(n in 1usize..10, seed in any::<u64>(), s in 1usize..=6, r in 0usize..=4) {
        let env = EnvConfig::new(6, 4);
        let set = PromptSet::synthetic(n, 1, 6, seed).unwrap();
        for p in set.prompts() {
            let t = make_trace(s, r, 0, p, &env).unwrap();
            prop_assert_eq!(t.correct, s >= p.required_depth);
            prop_assert_eq!(t.token_count, env.token_count(s, r));
            prop_assert_eq!(render_trace(s, r, p, &env).unwrap(), t.text);
        }
    }

    #[test]
    fn eval_reports_round_trip(entries in prop::collection::btree_map("[a-z]{1,8}", (0u32..=16, 1.0f64..5000.0), 1..20)) {
        let report = EvalReport {
            acc: 50.0,
            mean_len: 100.25,
            mean_lnorm: Some(0.5),
            r_zip: None,
            per_prompt: entries
                .into_iter()
                .map(|(id, (hits, len))| (id, PromptEval { pass_at_1: f64::from(hits) / 16.0, mean_len: len }))
                .collect(),
            rollouts: 16,
        };
        prop_assert_eq!(EvalReport::from_json_str(&report.to_json()).unwrap(), report.clone());
        let rows = report.metric_rows();
        prop_assert_eq!(read_metric_csv(&write_metric_csv(&rows).unwrap()).unwrap(), rows);
    }

    #[test]
    fn metric_and_aes_csv_round_trip(values in prop::collection::vec(prop::option::of(-1e6f64..1e6), 1..20)) {
        let rows: Vec<MetricRow> = values.iter().enumerate().map(|(i, v)| MetricRow::new("m", &format!("s{i}"), *v)).collect();
        prop_assert_eq!(read_metric_csv(&write_metric_csv(&rows).unwrap()).unwrap(), rows);
        let table: Vec<AesRow> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = v.unwrap_or(0.0);
                AesRow { method: format!("m{i}"), acc: x, len: x.abs(), aes1: x / 3.0, aes2: -x }
            })
            .collect();
        prop_assert_eq!(read_aes_csv(&write_aes_csv(&table).unwrap()).unwrap(), table);
    }
}

#[test]
fn gunzip_inverts_the_ratio_encoder() {
    let text = b"Step 1: add 3, running total is 3.";
    assert_eq!(gunzip(&crtlab_gzip(text)).unwrap(), text);
}

/// gzip through the same path `compression_ratio` measures.
fn crtlab_gzip(bytes: &[u8]) -> Vec<u8> {
    use std::io::Write;
    let mut enc = flate2::GzBuilder::new()
        .mtime(0)
        .operating_system(255)
        .write(Vec::new(), flate2::Compression::best());
    enc.write_all(bytes).unwrap();
    let out = enc.finish().unwrap();
    let ratio = out.len() as f64 / bytes.len() as f64;
    assert_eq!(ratio, compression_ratio(bytes).unwrap());
    out
}
