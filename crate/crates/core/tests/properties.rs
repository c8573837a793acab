//! Property tests for the math kernels and metric invariants.

use proptest::prelude::*;
use rand::Rng;

use spooftrace_core::attention::neighborhood;
use spooftrace_core::audio::Waveform;
use spooftrace_core::frontend::segment_4s;
use spooftrace_core::metrics::{compute_eer, compute_min_dcf, DcfCosts, ScoreRecord, ScoreSet, TrialLabel};
use spooftrace_core::nesblock::{nes_block_forward, NesBlockParams, NesConfig};
use spooftrace_core::seeds;
use spooftrace_core::tape::Tape;
use spooftrace_core::tensor::Tensor;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, len..=len)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        data in proptest::collection::vec(-20.0f64..20.0, 1..24),
        shift in -50.0f64..50.0,
    ) {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::vector(data.clone()).unwrap()).unwrap();
        let sm = tape.value(tape.softmax(x, 0).unwrap());
        let total: f64 = sm.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "sum {total}");
        prop_assert!(sm.data().iter().all(|&p| p >= 0.0));

        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let y = tape.constant(&Tensor::vector(shifted).unwrap()).unwrap();
        let sm2 = tape.value(tape.softmax(y, 0).unwrap());
        for (a, b) in sm.data().iter().zip(sm2.data()) {
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn convolution_is_linear_in_its_input(
        xa in finite_vec(2 * 7),
        xb in finite_vec(2 * 7),
        seed in 0u64..1000,
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let mut rng = seeds::rng(seed);
        let kernel = Tensor::randn(&[2, 2, 3], 1.0, &mut rng);
        let zero_bias = Tensor::zeros(&[2]);

        let tape = Tape::new();
        let k = tape.constant(&kernel).unwrap();
        let b = tape.constant(&zero_bias).unwrap();
        let a_t = tape.constant(&Tensor::new(vec![2, 7], xa.clone()).unwrap()).unwrap();
        let b_t = tape.constant(&Tensor::new(vec![2, 7], xb.clone()).unwrap()).unwrap();

        let mixed: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| alpha * p + beta * q).collect();
        let m_t = tape.constant(&Tensor::new(vec![2, 7], mixed).unwrap()).unwrap();

        let conv_m = tape.value(tape.conv1d(m_t, k, b, 1).unwrap());
        let conv_a = tape.value(tape.conv1d(a_t, k, b, 1).unwrap());
        let conv_b = tape.value(tape.conv1d(b_t, k, b, 1).unwrap());
        for i in 0..conv_m.len() {
            let want = alpha * conv_a.data()[i] + beta * conv_b.data()[i];
            prop_assert!((conv_m.data()[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_undoes_split(
        data in finite_vec(8 * 5),
        j in prop::sample::select(vec![1usize, 2, 4, 8]),
    ) {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![8, 5], data.clone()).unwrap()).unwrap();
        let parts = tape.split_channels(x, j).unwrap();
        let back = tape.value(tape.concat_channels(&parts).unwrap());
        prop_assert_eq!(back.data(), &data[..]);
    }

    #[test]
    fn segmented_audio_always_has_the_target_length(
        len in 1usize..4000,
        target in 1usize..4,
        seed in 0u64..1000,
    ) {
        let mut rng = seeds::rng(seed);
        let samples: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Waveform::new(samples, 800).unwrap();
        let out = segment_4s(&w, target).unwrap();
        prop_assert_eq!(out.len(), target * 800);
        prop_assert_eq!(out.sample_rate, 800);
    }

    #[test]
    fn neighborhoods_are_sorted_windows_containing_the_center(
        total in 1usize..50,
        j_raw in 0usize..50,
        window in 0usize..10,
    ) {
        let j = j_raw % total;
        let hood = neighborhood(j, total, window);
        prop_assert!(hood.contains(&j));
        prop_assert!(hood.windows(2).all(|w| w[0] < w[1]), "not ascending: {hood:?}");
        for &m in &hood {
            prop_assert!(m < total);
            prop_assert!(m.abs_diff(j) <= window, "member {m} outside window of {j}");
        }
        // The clamp never drops an in-range index.
        for m in 0..total {
            if m.abs_diff(j) <= window {
                prop_assert!(hood.contains(&m), "missing {m}");
            }
        }
    }

    #[test]
    fn eer_stays_in_the_unit_interval(
        bona in proptest::collection::vec(-100.0f64..100.0, 1..30),
        spoof in proptest::collection::vec(-100.0f64..100.0, 1..30),
    ) {
        let mut records = Vec::new();
        for (i, &s) in bona.iter().enumerate() {
            records.push(ScoreRecord { utt_id: format!("b{i}"), score: s, label: TrialLabel::Bonafide });
        }
        for (i, &s) in spoof.iter().enumerate() {
            records.push(ScoreRecord { utt_id: format!("s{i}"), score: s, label: TrialLabel::Spoof });
        }
        let set = ScoreSet::new(records).unwrap();
        let (eer, thr) = compute_eer(&set).unwrap();
        prop_assert!((0.0..=1.0).contains(&eer), "eer {eer}");
        prop_assert!(thr.is_finite() || bona.len() + spoof.len() == 1);
    }

    #[test]
    fn detection_metrics_ignore_monotone_score_transforms(
        bona in proptest::collection::vec(-50.0f64..50.0, 2..20),
        spoof in proptest::collection::vec(-50.0f64..50.0, 2..20),
        scale in 0.1f64..10.0,
        offset in -20.0f64..20.0,
    ) {
        let build = |f: &dyn Fn(f64) -> f64| {
            let mut records = Vec::new();
            for (i, &s) in bona.iter().enumerate() {
                records.push(ScoreRecord { utt_id: format!("b{i}"), score: f(s), label: TrialLabel::Bonafide });
            }
            for (i, &s) in spoof.iter().enumerate() {
                records.push(ScoreRecord { utt_id: format!("s{i}"), score: f(s), label: TrialLabel::Spoof });
            }
            ScoreSet::new(records).unwrap()
        };
        let plain = build(&|s| s);
        let warped = build(&|s| scale * s + offset);
        let costs = DcfCosts::default();

        let (e1, _) = compute_eer(&plain).unwrap();
        let (e2, _) = compute_eer(&warped).unwrap();
        prop_assert!((e1 - e2).abs() < 1e-12, "eer {e1} vs {e2}");

        let (d1, _) = compute_min_dcf(&plain, &costs).unwrap();
        let (d2, _) = compute_min_dcf(&warped, &costs).unwrap();
        prop_assert!((d1 - d2).abs() < 1e-12, "minDCF {d1} vs {d2}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn block_outputs_keep_subset_shapes(
        c in prop::sample::select(vec![4usize, 8]),
        j in prop::sample::select(vec![2usize, 4]),
        t in 3usize..10,
        seed in 0u64..100,
    ) {
        let cfg = NesConfig { channels: c, frames: 0, subsets: j, ws_branches: 2, se_reduction: 2, kernel: 3 };
        let params = NesBlockParams::init(&cfg, seed).unwrap();
        let mut rng = seeds::rng(seed + 1000);
        let x = Tensor::randn(&[c, t], 1.0, &mut rng);

        let tape = Tape::new();
        let xv = tape.constant(&x).unwrap();
        let vars = params.register(&tape).unwrap();
        let acts = nes_block_forward(&tape, xv, &vars, &cfg).unwrap();
        prop_assert_eq!(acts.h.len(), j);
        for (inp, h) in acts.inputs.iter().zip(&acts.h) {
            prop_assert_eq!(tape.shape_of(*inp), vec![c / j, t]);
            prop_assert_eq!(tape.shape_of(*h), vec![c / j, t]);
        }
    }
}
