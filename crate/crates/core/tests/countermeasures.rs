use proptest::prelude::*;

use choicetrace::defense::{apply_defense, timing_probe, DefensePolicy, ProbeConfig, Transform};
use choicetrace::trace::{Origin, TraceMeta};
use choicetrace::*;

fn protected() -> [Band; 2] {
    [Band::new(690, 730).unwrap(), Band::new(890, 930).unwrap()]
}

fn arb_trace() -> impl Strategy<Value = Trace> {
    let record = (
        0u64..1_000_000,
        any::<bool>(),
        20u8..=23,
        prop_oneof![1u16..2000, 690u16..=730, 890u16..=930],
    );
    prop::collection::vec(record, 0..60).prop_map(|recs| {
        let records = recs
            .into_iter()
            .map(|(t, c2s, ctype, len)| {
                let dir = if c2s {
                    Direction::ClientToServer
                } else {
                    Direction::ServerToClient
                };
                TlsRecord::new(t, dir, ctype, len)
            })
            .collect();
        Trace::from_unsorted(TraceMeta::new("p", Origin::Synthetic, None), records)
    })
}

fn arb_policy() -> impl Strategy<Value = DefensePolicy> {
    let transform = prop_oneof![
        (930u16..=4096).prop_map(|pad_to| Transform::PadFixed { pad_to }),
        prop::collection::btree_set(1u16..=16_384, 1..6).prop_map(|b| Transform::PadBuckets {
            buckets: b.into_iter().collect()
        }),
        (1u16..1000).prop_map(|split_unit| Transform::Split { split_unit }),
        (0.05f64..=1.0, 0.0f64..=1.0).prop_map(|(lo, w)| Transform::Compress {
            compress_ratio_range: [lo, lo + (1.0 - lo) * w],
        }),
    ];
    (transform, any::<u64>()).prop_map(|(transform, seed)| DefensePolicy { transform, seed })
}

fn is_protected(r: &TlsRecord) -> bool {
    r.is_client_data() && protected().iter().any(|b| b.contains(r.len))
}

proptest! {
    #[test]
    fn split_conserves_length(trace in arb_trace(), unit in 1u16..1000) {
        let out = apply_defense(&trace, &DefensePolicy::split(unit), &protected()).unwrap();
        let mut it = out.records.iter().peekable();
        for r in &trace.records {
            if !is_protected(r) {
                prop_assert_eq!(it.next(), Some(r));
                continue;
            }
            let parts = r.len.div_ceil(unit) as usize;
            let mut sum = 0u32;
            for _ in 0..parts {
                let p = it.next().unwrap();
                prop_assert_eq!(p.t_us, r.t_us);
                prop_assert!(p.len >= 1 && p.len <= unit);
                sum += p.len as u32;
            }
            prop_assert_eq!(sum, r.len as u32);
        }
        prop_assert!(it.next().is_none());
    }

    #[test]
    fn pad_fixed_is_idempotent(trace in arb_trace(), pad_to in 930u16..4096) {
        let p = DefensePolicy::pad_fixed(pad_to);
        let once = apply_defense(&trace, &p, &protected()).unwrap();
        // padded lengths may leave the bands; padding again changes nothing
        let twice = apply_defense(&once, &p, &protected()).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn unprotected_records_untouched(trace in arb_trace(), policy in arb_policy()) {
        let out = apply_defense(&trace, &policy, &protected()).unwrap();
        let before: Vec<&TlsRecord> = trace.records.iter().filter(|r| !is_protected(r)).collect();
        let kept: Vec<&TlsRecord> = out
            .records
            .iter()
            .filter(|r| !r.is_client_data() || !trace.records.iter().any(|o| is_protected(o) && o.t_us == r.t_us))
            .collect();
        prop_assert_eq!(before, kept);
        prop_assert!(out.is_ordered());
    }

    #[test]
    fn padding_keeps_choice_pauses_visible(seed in any::<u64>(), pi in 0usize..72, pick in any::<prop::sample::Index>()) {
        let g = ScriptGraph::chain(3, 8000, 500);
        let paths = enumerate_paths(&g, 8).unwrap();
        let profile = &default_profiles()[pi];
        let base = SideChannelModel { noise_rate_hz: 0.0, ..SideChannelModel::default() };
        let model = model_for_profile(profile, &base);
        let (trace, truth) = simulate_session(&g, pick.get(&paths), profile, &model, seed).unwrap();
        let padded = apply_defense(&trace, &DefensePolicy::pad_fixed(1024), &protected()).unwrap();
        let intervals = timing_probe(&padded, &ProbeConfig::default());
        for w in &truth.windows {
            prop_assert!(
                intervals.iter().any(|iv| w.overlaps(iv.start_us, iv.end_us)),
                "window {:?} not flagged by {:?}", w, intervals
            );
        }
    }
}

#[test]
fn pad_buckets_matching_clean_lengths_keeps_accuracy() {
    use choicetrace::eval::{evaluate_sessions, generate_sessions};
    let g = ScriptGraph::chain(3, 6000, 500);
    let sessions: Vec<_> = generate_sessions(&g, 20, 3, &SideChannelModel::default().noiseless())
        .unwrap()
        .into_iter()
        .map(|s| (s.trace, s.truth))
        .collect();
    let bands = calibrate_bands(&sessions).unwrap();
    let policy = DefensePolicy::new(Transform::PadBuckets {
        buckets: vec![711, 911, 16_384],
    });
    let defended: Vec<_> = sessions
        .iter()
        .map(|(t, truth)| (apply_defense(t, &policy, &bands.as_array()).unwrap(), truth.clone()))
        .collect();
    let before = evaluate_sessions(&g, &sessions, 0.25, None).unwrap();
    let after = evaluate_sessions(&g, &defended, 0.25, None).unwrap();
    assert_eq!(before.per_event_accuracy, 1.0);
    assert_eq!(after.per_event_accuracy, 1.0);
    assert_eq!(after.path_exact_rate, 1.0);
}
