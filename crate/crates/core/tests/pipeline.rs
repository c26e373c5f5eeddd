use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};

use proptest::prelude::*;

use choicetrace::eval::{evaluate_sessions, generate_sessions};
use choicetrace::ingest::{ingest_pcap, ClientHint};
use choicetrace::pcap::{ethernet_frame, ipv4_tcp_packet, PcapWriter, TCP_ACK, TCP_SYN};
use choicetrace::reconstruct::OracleIndex;
use choicetrace::*;

fn quiet() -> SideChannelModel {
    SideChannelModel::default().noiseless()
}

fn graphs() -> Vec<ScriptGraph> {
    vec![
        ScriptGraph::chain(1, 6000, 500),
        ScriptGraph::chain(3, 6000, 500),
        ScriptGraph::chain(4, 5000, 1000),
    ]
}

fn model_bands(m: &SideChannelModel) -> LengthBands {
    let (a, b) = m.type1_len.support();
    let (c, d) = m.type2_len.support();
    LengthBands::new(Band::new(a, b).unwrap(), Band::new(c, d).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn truth_events_are_client_records(gi in 0usize..3, pick in any::<prop::sample::Index>(), seed in any::<u64>(), pi in 0usize..72) {
        let g = &graphs()[gi];
        let paths = enumerate_paths(g, 8).unwrap();
        let p = pick.get(&paths);
        let profile = &default_profiles()[pi];
        let model = model_for_profile(profile, &SideChannelModel::default());
        let (trace, truth) = simulate_session(g, p, profile, &model, seed).unwrap();
        let lens = client_record_lengths(&trace);
        prop_assert!(lens.len() >= truth.events.len());
        let mut pool: BTreeMap<(u64, u16), usize> = BTreeMap::new();
        for l in &lens {
            *pool.entry(*l).or_default() += 1;
        }
        for e in &truth.events {
            let slot = pool.get_mut(&(e.t_us, e.len));
            prop_assert!(slot.as_ref().is_some_and(|n| **n > 0), "missing {:?}", e);
            *slot.unwrap() -= 1;
        }
        prop_assert!(trace.is_ordered());
    }

    #[test]
    fn noiseless_classification_equals_truth(gi in 0usize..3, pick in any::<prop::sample::Index>(), seed in any::<u64>(), pi in 0usize..72) {
        let g = &graphs()[gi];
        let paths = enumerate_paths(g, 8).unwrap();
        let p = pick.get(&paths);
        let profile = &default_profiles()[pi];
        let model = model_for_profile(profile, &quiet());
        let (trace, truth) = simulate_session(g, p, profile, &model, seed).unwrap();
        let events = classify_events(&trace, &model_bands(&model));
        let got: Vec<(u64, ControlKind)> = events.iter().map(|e| (e.t_us, e.kind)).collect();
        let want: Vec<(u64, ControlKind)> = truth
            .control_events()
            .map(|e| (e.t_us, ControlKind::from_event(e.kind).unwrap()))
            .collect();
        prop_assert_eq!(got, want);
        let recon = reconstruct_path(&events, g);
        prop_assert_eq!(&recon.path, p);
        prop_assert_eq!(consistency_score(&recon, &events, g), 1.0);
    }

    #[test]
    fn count_law(pick in any::<prop::sample::Index>(), seed in any::<u64>(), pi in 0usize..72) {
        let g = ScriptGraph::chain(5, 4000, 500);
        let paths = enumerate_paths(&g, 8).unwrap();
        let p = pick.get(&paths);
        let profile = &default_profiles()[pi];
        let (_, truth) = simulate_session(&g, p, profile, &SideChannelModel::default(), seed).unwrap();
        prop_assert_eq!(truth.count(EventKind::Type1), p.len());
        prop_assert_eq!(truth.count(EventKind::Type2), p.alt_count());
    }

    #[test]
    fn simulation_is_seeded(seed in any::<u64>()) {
        let g = ScriptGraph::chain(2, 6000, 500);
        let p: ChoicePath = "Q1=A,Q2'=D".parse().unwrap();
        let profile = &default_profiles()[7];
        let a = simulate_session(&g, &p, profile, &SideChannelModel::default(), seed).unwrap();
        let b = simulate_session(&g, &p, profile, &SideChannelModel::default(), seed).unwrap();
        prop_assert_eq!(write_trace(&a.0), write_trace(&b.0));
        prop_assert_eq!(a.1.to_json(), b.1.to_json());
    }
}

#[test]
fn oracle_agrees_with_walk_on_every_path() {
    let model = SideChannelModel::default();
    for g in graphs() {
        let index = OracleIndex::build(&g, &model).unwrap();
        for (i, p) in enumerate_paths(&g, 12).unwrap().iter().enumerate() {
            let (trace, _) = simulate_session(&g, p, &default_profiles()[0], &model.noiseless(), i as u64).unwrap();
            let walk = reconstruct_path(&classify_events(&trace, &model_bands(&model)), &g).path;
            assert_eq!(walk, index.reconstruct(&trace));
            assert_eq!(&walk, p);
        }
    }
}

/// Wraps every client application-data record of a trace in its own TCP
/// segment and reads the capture back.
#[test]
fn simulated_trace_survives_pcap_round_trip() {
    let g = ScriptGraph::chain(2, 6000, 500);
    let p: ChoicePath = "Q1=D,Q2=A".parse().unwrap();
    let (trace, _) = simulate_session(&g, &p, &default_profiles()[0], &SideChannelModel::default(), 77).unwrap();

    let client = SocketAddrV4::new(Ipv4Addr::new(10, 1, 1, 5), 40_001);
    let server = SocketAddrV4::new(Ipv4Addr::new(10, 9, 9, 9), 443);
    let mut w = PcapWriter::ethernet();
    w.packet(0, &ethernet_frame(&ipv4_tcp_packet(client, server, 0, TCP_SYN, &[])));
    let mut seq = 1u32;
    for r in trace.client_data() {
        let mut payload = vec![23, 3, 3];
        payload.extend(r.len.to_be_bytes());
        payload.resize(5 + r.len as usize, 0x5a);
        w.packet(
            r.t_us,
            &ethernet_frame(&ipv4_tcp_packet(client, server, seq, TCP_ACK, &payload)),
        );
        seq = seq.wrapping_add(payload.len() as u32);
    }
    let rep = ingest_pcap(&w.finish(), &ClientHint::FirstSynSender, "rt", None).unwrap();
    assert_eq!(client_record_lengths(&rep.trace), client_record_lengths(&trace));
    assert_eq!(rep.gaps, 0);
    assert_eq!(rep.residue_bytes, 0);
}

/// Mean per-event accuracy over many seeds does not rise as control-record
/// jitter grows.
#[test]
fn accuracy_degrades_monotonically_with_jitter() {
    let g = ScriptGraph::chain(3, 6000, 500);
    let jitters = [0u16, 8, 32, 96];
    let seeds = 20u64;
    let mut means = Vec::new();
    for &j in &jitters {
        let model = SideChannelModel::default().with_control_jitter(j);
        let total: f64 = (0..seeds)
            .map(|seed| {
                let sessions: Vec<_> = generate_sessions(&g, 12, seed, &model)
                    .unwrap()
                    .into_iter()
                    .map(|s| (s.trace, s.truth))
                    .collect();
                evaluate_sessions(&g, &sessions, 0.25, None).unwrap().per_event_accuracy
            })
            .sum();
        means.push(total / seeds as f64);
    }
    for w in means.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "accuracy by jitter {jitters:?}: {means:?}");
    }
    assert_eq!(means[0], 1.0);
    assert!(means[3] < means[0], "{means:?}");
}

#[test]
fn calibrated_bands_surround_model_centres() {
    let g = ScriptGraph::chain(3, 6000, 500);
    let sessions: Vec<_> = generate_sessions(&g, 100, 9, &SideChannelModel::default())
        .unwrap()
        .into_iter()
        .map(|s| (s.trace, s.truth))
        .collect();
    let bands = calibrate_bands(&sessions).unwrap();
    assert!(bands.type1.contains(710) && bands.type1.contains(711));
    assert!(bands.type2.contains(910) && bands.type2.contains(911));
    assert!(bands.type1.hi < bands.type2.lo);

    let mut merged = length_histogram(&sessions[0].0, 10);
    for (t, _) in &sessions[1..] {
        merged.merge(&length_histogram(t, 10));
    }
    assert!(matches!(merged.mode_within(400, 500), Some(430..=460)));
    assert_eq!(merged.mode_within(650, 750), Some(710));
    assert_eq!(merged.mode_within(850, 950), Some(910));
}
