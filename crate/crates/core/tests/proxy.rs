use perfdiff::notes::{PedalEvent, PedalKind, PerfNote, Performance};
use perfdiff::proxy::{piano_roll, piano_rolls, ProxyConfig, ProxyModel, COLUMNS, FRAMES, FRAME_SEC, PEDAL_COLUMNS};
use proptest::prelude::*;

fn note(id: &str, onset_sec: f64, duration_sec: f64, pitch: u8, velocity: u8) -> PerfNote {
    PerfNote { id: id.into(), onset_sec, duration_sec, pitch, velocity }
}

fn perf(notes: Vec<PerfNote>) -> Performance {
    Performance::new(notes, vec![]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pitch_disjoint_rolls_add(
        low in prop::collection::vec((0.0f64..16.0, 0.01f64..4.0, 0u8..64, 1u8..=127), 1..6),
        high in prop::collection::vec((0.0f64..16.0, 0.01f64..4.0, 64u8..128, 1u8..=127), 1..6),
        start in 0.0f64..3.0,
    ) {
        // one note per key, so overlaps within a set cannot collide
        let build = |v: &[(f64, f64, u8, u8)], tag: &str| {
            let mut seen = std::collections::HashSet::new();
            v.iter()
                .enumerate()
                .filter(|(_, n)| seen.insert(n.2))
                .map(|(i, n)| note(&format!("{tag}{i}"), n.0, n.1, n.2, n.3))
                .collect::<Vec<_>>()
        };
        let (a, b) = (build(&low, "a"), build(&high, "b"));
        let ra = piano_roll(&perf(a.clone()), start).unwrap();
        let rb = piano_roll(&perf(b.clone()), start).unwrap();
        let rab = piano_roll(&perf([a, b].concat()), start).unwrap();
        for ((x, y), z) in ra.data().iter().zip(rb.data()).zip(rab.data()) {
            prop_assert_eq!(x + y, *z);
        }
    }
}

#[test]
fn geometry_and_pedals() {
    let p = Performance::new(
        vec![note("a", 1.0, 2.0, 60, 90)],
        vec![PedalEvent { time_sec: 5.0, value: 100, kind: PedalKind::Sustain }],
    )
    .unwrap();
    let r = piano_roll(&p, 0.0).unwrap();
    assert_eq!(r.dims(), (FRAMES, COLUMNS));
    let frame = |sec: f64| (sec / FRAME_SEC - 1e-9).ceil() as usize;
    assert_eq!(r.get(frame(1.0), 60), 90.0);
    assert_eq!(r.get(frame(1.0) - 1, 60), 0.0);
    assert_eq!(r.get(frame(3.0), 60), 0.0);
    let sustain = PEDAL_COLUMNS.iter().find(|c| c.1 == PedalKind::Sustain).unwrap().0;
    assert_eq!(r.get(frame(4.9), sustain), 0.0);
    assert_eq!(r.get(frame(5.0), sustain), 100.0);
    assert!(piano_roll(&p, -1.0).is_err());
}

#[test]
fn windows_cover_the_performance() {
    let p = perf(vec![note("a", 0.0, 1.0, 60, 90), note("b", 31.0, 1.0, 62, 90)]);
    let rolls = piano_rolls(&p).unwrap();
    assert_eq!(rolls.len(), 3);
    assert_eq!(rolls[2].get((1.0 / FRAME_SEC).ceil() as usize, 62), 90.0);
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let model = ProxyModel::new(ProxyConfig::default(), 3).unwrap();
    let back = ProxyModel::from_bytes(&model.to_bytes().unwrap()).unwrap();
    let r = piano_roll(&perf(vec![note("a", 0.5, 3.0, 48, 70), note("b", 2.0, 1.0, 72, 40)]), 0.0).unwrap();
    assert_eq!(model.predict(&r), back.predict(&r));
    assert!(ProxyModel::from_bytes(b"garbage").is_err());
}
