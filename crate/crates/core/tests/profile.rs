use std::collections::BTreeMap;

use blocksurgeon::profile::*;
use blocksurgeon::search::{nth_config, space_size};
use blocksurgeon::toynet::{BlockKind, NetworkConfig};
use blocksurgeon::{Error, ProfileError};
use proptest::prelude::*;

fn profile_of(entries: &[(&str, &[(BlockKind, f64)])]) -> LatencyProfile {
    LatencyProfile {
        device: "bench".into(),
        slots: entries
            .iter()
            .map(|(s, kinds)| (s.to_string(), kinds.iter().copied().collect()))
            .collect(),
        overhead_ms: 0.0,
    }
}

#[test]
fn npu_fixture_loads_and_round_trips() {
    let p = LatencyProfile::from_json(NPU_BLOCKS_FIXTURE).unwrap();
    assert_eq!(p.slots.len(), 9);
    for kinds in p.slots.values() {
        let values: Vec<f64> = BlockKind::ALL.iter().map(|k| kinds[k]).collect();
        assert_eq!(values, NPU_BLOCK_LATENCIES_MS);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    p.save(&path).unwrap();
    assert_eq!(load_profile(&path).unwrap(), p);
    assert_eq!(LatencyProfile::from_json(&p.to_json()).unwrap(), p);
}

#[test]
fn key_order_does_not_matter() {
    let a = r#"{"device":"d","slots":{"s0":{"base":2.0,"alt1":1.0},"s1":{"alt2":0.5,"base":3.0}}}"#;
    let b = r#"{"slots":{"s1":{"base":3.0,"alt2":0.5},"s0":{"alt1":1.0,"base":2.0}},"device":"d"}"#;
    assert_eq!(LatencyProfile::from_json(a).unwrap(), LatencyProfile::from_json(b).unwrap());
}

#[test]
fn calibrated_fixture_sums_to_177() {
    let p = LatencyProfile::from_json(CALIBRATED_177_FIXTURE).unwrap();
    let cfg = NetworkConfig::paper_shape();
    assert!((global_latency(&p, &cfg).unwrap() - 177.0).abs() < 1e-9);
}

#[test]
fn rejection_kinds_are_distinct() {
    let zero = r#"{"device":"d","slots":{"s0":{"base":0.0}}}"#;
    assert!(matches!(
        LatencyProfile::from_json(zero),
        Err(Error::Profile(ProfileError::NonPositive { .. }))
    ));
    let missing = r#"{"device":"d","slots":{"s0":{"alt1":1.0}}}"#;
    assert!(matches!(
        LatencyProfile::from_json(missing),
        Err(Error::Profile(ProfileError::MissingEntry { .. }))
    ));
    assert!(matches!(
        LatencyProfile::from_json("{not json"),
        Err(Error::Profile(ProfileError::Malformed(_)))
    ));
    let cfg = NetworkConfig::desk();
    let sparse = profile_of(&[("enc0", &[(BlockKind::Base, 1.0)])]);
    assert!(sparse.for_config(&cfg, &BlockKind::ALTERNATIVES).is_err());
}

#[test]
fn three_slot_sum() {
    let p = profile_of(&[
        ("enc0", &[(BlockKind::Base, 10.0)]),
        ("mid", &[(BlockKind::Base, 20.0)]),
        ("dec0", &[(BlockKind::Base, 5.0)]),
    ]);
    let cfg = NetworkConfig::u_shape(1, 4, 1);
    assert_eq!(global_latency(&p, &cfg).unwrap(), 35.0);
    let with_overhead = LatencyProfile {
        overhead_ms: 2.5,
        ..p
    };
    assert_eq!(global_latency(&with_overhead, &cfg).unwrap(), 37.5);
}

#[test]
fn additivity_holds_on_every_desk_config() {
    let mut cfg = NetworkConfig::desk();
    cfg = cfg.with_frozen(&["enc1".into()]).unwrap();
    let p = simulate_profile(&cfg, 32, 3, 0.1).unwrap();
    let m = cfg.searchable().len();
    for i in 0..space_size(7, m) {
        let kinds = nth_config(i, 7, m);
        let c = cfg.with_kinds(&kinds).unwrap();
        let manual: f64 = c.slots.iter().map(|s| p.slots[&s.id][&s.kind]).sum();
        assert_eq!(global_latency(&p, &c).unwrap(), manual);
    }
}

#[test]
fn simulator_is_seeded() {
    let cfg = NetworkConfig::desk();
    let a = simulate_profile(&cfg, 32, 1, 0.1).unwrap();
    assert_eq!(a, simulate_profile(&cfg, 32, 1, 0.1).unwrap());
    assert_ne!(a, simulate_profile(&cfg, 32, 2, 0.1).unwrap());
}

#[test]
fn equal_slots_cost_the_same_without_noise() {
    // enc0 and dec0 share width and resolution
    let p = simulate_profile(&NetworkConfig::desk(), 32, 4, 0.0).unwrap();
    assert_eq!(p.slots["enc0"], p.slots["dec0"]);
    assert_eq!(p.slots["enc1"], p.slots["dec1"]);
    let noisy = simulate_profile(&NetworkConfig::desk(), 32, 4, 0.1).unwrap();
    assert_ne!(noisy.slots["enc0"], noisy.slots["dec0"]);
}

#[test]
fn frozen_slot_carries_only_base() {
    let cfg = NetworkConfig::desk().with_frozen(&["mid".into()]).unwrap();
    let p = simulate_profile(&cfg, 32, 0, 0.1).unwrap();
    assert_eq!(p.slots["mid"].keys().copied().collect::<Vec<_>>(), vec![BlockKind::Base]);
    assert_eq!(p.slots["enc0"].len(), 7);
}

#[test]
fn penalty_scale_examples() {
    let p = LatencyProfile::from_json(NPU_BLOCKS_FIXTURE).unwrap();
    let cfg = NetworkConfig::paper_shape();
    let flat = make_penalty_scale(&p, &cfg, &[0.3, 0.3, 0.3]).unwrap();
    assert_eq!(flat.alpha, DEFAULT_ALPHA_FLOOR);
    let spread = make_penalty_scale(&p, &cfg, &[0.0, 1.2, 2.0]).unwrap();
    assert_eq!(spread.alpha, 2.0);
    assert_eq!(spread.l_base, 9.0 * 53.0);
    assert_eq!(spread.l_min, 9.0 * 9.0);
    assert_eq!(penalty(&spread, spread.l_min), 0.0);
    assert!((penalty(&spread, spread.l_base) - spread.alpha).abs() < 1e-12);
}

#[test]
fn initial_penalties_share_the_losses_scale() {
    let cfg = NetworkConfig::desk().with_frozen(&["mid".into()]).unwrap();
    let p = simulate_profile(&cfg, 32, 0, 0.1).unwrap();
    let losses = [0.0, 0.4, 1.1, 0.7];
    let scale = make_penalty_scale(&p, &cfg, &losses).unwrap();
    let mut l_max = 0.0;
    for spec in &cfg.slots {
        l_max += p.slots[&spec.id].values().copied().fold(0.0, f64::max);
    }
    let m = cfg.searchable().len();
    let bound = scale.alpha * (l_max - scale.l_min) / (scale.l_base - scale.l_min);
    for i in 0..space_size(7, m) {
        let c = cfg.with_kinds(&nth_config(i, 7, m)).unwrap();
        let f2 = penalty(&scale, global_latency(&p, &c).unwrap());
        assert!(f2 >= 0.0 && f2 <= bound + 1e-12);
    }
    assert!(bound <= 10.0 * scale.alpha);
}

#[test]
fn speedup_figures() {
    assert!((speedup(177.0, 147.0) - 1.204).abs() < 1e-3);
    assert!((speedup(177.0, 140.0) - 1.264).abs() < 1e-3);
    assert_eq!(speedup(50.0, 50.0), 1.0);
}

fn kinds_map(values: &[f64]) -> BTreeMap<BlockKind, f64> {
    BlockKind::ALL.iter().copied().zip(values.iter().copied()).collect()
}

proptest! {
    #[test]
    fn penalty_is_strictly_increasing(a in 0.0f64..500.0, b in 0.0f64..500.0, alpha in 0.1f64..5.0) {
        prop_assume!(a != b);
        let scale = PenaltyScale { alpha, l_min: 50.0, l_base: 400.0 };
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(penalty(&scale, lo) < penalty(&scale, hi));
    }

    #[test]
    fn lowering_an_entry_never_raises_the_total(values in proptest::collection::vec(0.5f64..60.0, 7 * 3), which in 0usize..3, cut in 0.0f64..0.49, kinds in proptest::collection::vec(0usize..7, 3)) {
        let slots = ["enc0", "mid", "dec0"];
        let mut p = LatencyProfile { device: "d".into(), slots: BTreeMap::new(), overhead_ms: 0.0 };
        for (i, s) in slots.iter().enumerate() {
            p.slots.insert(s.to_string(), kinds_map(&values[i * 7..(i + 1) * 7]));
        }
        let mut cfg = NetworkConfig::u_shape(1, 4, 1);
        for (s, k) in cfg.slots.iter_mut().zip(&kinds) {
            s.kind = BlockKind::from_index(*k).unwrap();
        }
        let before = global_latency(&p, &cfg).unwrap();
        let kind = cfg.slots[which].kind;
        let e = p.slots.get_mut(slots[which]).unwrap().get_mut(&kind).unwrap();
        *e *= 1.0 - cut;
        prop_assert!(global_latency(&p, &cfg).unwrap() <= before);
        let back = LatencyProfile::from_json(&p.to_json()).unwrap();
        prop_assert_eq!(back, p);
    }
}
