//! Property tests over corruption, artifact construction, decoding and
//! result serialization.

use proptest::prelude::*;

use dlm_remask::artifacts::{compute_labels, make_sample_with_state, ArtifactPolicy, Label};
use dlm_remask::bench::{read_rows, write_rows, ResultRow};
use dlm_remask::decode::{read_trace_events, replay, run_semi_ar, write_trace, DecodeConfig, Strategy as Rule};
use dlm_remask::denoiser::OracleDenoiser;
use dlm_remask::diffusion::{bridge_corrupt, forward_corrupt, replace, MaskedSeq, TokenId};
use dlm_remask::head::{BayesHead, CorrectionHead};
use dlm_remask::rng::Seed;
use dlm_remask::tasks::{TaskConfig, TaskName, TaskSpec};

fn clean_seq() -> impl Strategy<Value = (Vec<TokenId>, Vec<bool>)> {
    (1usize..24).prop_flat_map(|n| (prop::collection::vec(0u32..6, n), prop::collection::vec(any::<bool>(), n)))
}

fn coin(len: usize) -> TaskSpec {
    TaskSpec::from_config(&TaskConfig::new(TaskName::CoinPair).with_length(len)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn forward_corruption_is_faithful_nested_and_spares_frozen(
        (toks, maskable) in clean_seq(),
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let x0 = MaskedSeq::from_tokens(&toks);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let early = forward_corrupt(&x0, &maskable, lo, Seed(seed)).unwrap();
        let late = forward_corrupt(&x0, &maskable, hi, Seed(seed)).unwrap();
        for i in 0..toks.len() {
            for x in [&early, &late] {
                match x.get(i) {
                    Some(t) => prop_assert_eq!(t, toks[i]),
                    None => prop_assert!(maskable[i]),
                }
            }
            if early.is_masked(i) {
                prop_assert!(late.is_masked(i));
            }
        }
    }

    #[test]
    fn bridge_only_adds_masks(
        (toks, maskable) in clean_seq(),
        t in 0.0f64..0.95,
        frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let x0 = MaskedSeq::from_tokens(&toks);
        let x_t = forward_corrupt(&x0, &maskable, t, Seed(seed)).unwrap();
        let t_fwd = frac * (1.0 - t);
        let z = bridge_corrupt(&x_t, &maskable, t, t_fwd, Seed(seed).derive(1)).unwrap();
        for i in 0..toks.len() {
            if x_t.is_masked(i) || !maskable[i] {
                prop_assert_eq!(z.get(i), x_t.get(i));
            } else {
                prop_assert!(z.get(i).is_none() || z.get(i) == x_t.get(i));
            }
        }
    }

    #[test]
    fn replace_touches_only_listed_positions(
        (toks, _) in clean_seq(),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 0..8),
        mask_every in 1usize..4,
    ) {
        let n = toks.len();
        let x = MaskedSeq((0..n).map(|i| if i % mask_every == 0 { None } else { Some(toks[i]) }).collect());
        let y: Vec<TokenId> = toks.iter().map(|t| t + 10).collect();
        let pos: Vec<usize> = picks.iter().map(|p| p.index(n)).collect();
        let out = replace(&x, &y, &pos).unwrap();
        for i in 0..n {
            let expected = if pos.contains(&i) { Some(y[i]) } else { x.get(i) };
            prop_assert_eq!(out.get(i), expected);
        }
        prop_assert!(replace(&x, &y, &[n]).is_err());
    }

    #[test]
    fn artifact_samples_respect_their_construction(
        len in 4usize..12,
        inst_seed in any::<u64>(),
        seed in any::<u64>(),
        dt in 0.05f64..0.5,
        uniform in any::<bool>(),
    ) {
        let spec = coin(len);
        let den = OracleDenoiser::new(spec.clone());
        let inst = spec.sample_instance(&mut Seed(inst_seed).rng());
        let policy = if uniform { ArtifactPolicy::Uniform { rate: dt } } else { ArtifactPolicy::Lbc { dt } };
        let (s, x_t) = make_sample_with_state(&inst, &den, policy, Seed(seed)).unwrap();
        let gen = spec.gen_len() as f64;
        prop_assert_eq!(s.m.len(), (gen * dt).ceil() as usize);
        prop_assert_eq!(&s.labels, &compute_labels(&s.z, &s.x0, &s.maskable));
        for i in 0..s.z.len() {
            let in_m = s.m.contains(&i);
            prop_assert_eq!(s.z.is_masked(i), x_t.is_masked(i) && !in_m);
            if !in_m && !x_t.is_masked(i) {
                prop_assert_eq!(s.z.get(i), x_t.get(i));
            }
            if !s.maskable[i] {
                prop_assert_eq!(s.labels[i], Label::NotApplicable);
            }
        }
    }

    #[test]
    fn traces_replay_to_the_decoded_output(
        len in 2usize..14,
        k in 1usize..4,
        stride in 1usize..3,
        budget_frac in 0.0f64..1.0,
        tau in 0.0f64..0.9,
        buffer in 0usize..3,
        block in prop::option::of(1usize..8),
        strategy in prop::sample::select(vec![Rule::Confidence, Rule::Dsc, Rule::RandomRemask]),
        seed in any::<u64>(),
    ) {
        let spec = coin(len);
        let den = OracleDenoiser::new(spec.clone());
        let head = BayesHead::new(spec.clone());
        let budget = ((k * stride - 1) as f64 * budget_frac) as usize;
        let cfg = DecodeConfig { strategy, k, stride, remask_budget: budget, tau, buffer, block_len: block, ..Default::default() };
        let prompt = vec![spec.vocab.size - 1];
        let d = run_semi_ar(&spec, &prompt, &den, Some(&head as &dyn CorrectionHead), &cfg, Seed(seed)).unwrap();
        prop_assert!(!d.incomplete);
        prop_assert_eq!(replay(&d.trace), d.output.clone());
        prop_assert_eq!(d.output.masked_count(), 0);

        let mut buf = Vec::new();
        write_trace(&mut buf, &d.trace).unwrap();
        prop_assert_eq!(read_trace_events(buf.as_slice()).unwrap(), d.trace.events.clone());

        if budget == 0 {
            let base = DecodeConfig { strategy: Rule::Confidence, ..cfg };
            let reference = run_semi_ar(&spec, &prompt, &den, None, &base, Seed(seed)).unwrap();
            prop_assert_eq!(reference, d);
        }
    }

    #[test]
    fn result_rows_survive_csv(
        rows in prop::collection::vec(
            ("[a-z-]{1,12}", "[a-z-]{1,12}", 1usize..9, 0.0f64..=1.0, 0.0f64..100.0, 0usize..1000, any::<u64>(), any::<u64>()),
            0..6,
        )
    ) {
        let rows: Vec<ResultRow> = rows
            .into_iter()
            .map(|(task, strategy, tokens_per_step, accuracy, iter_avg, n, seed, wall_ms)| ResultRow {
                task, strategy, tokens_per_step, accuracy, iter_avg, n, seed, wall_ms,
            })
            .collect();
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        prop_assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
    }
}
