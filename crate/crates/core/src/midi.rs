//! Standard MIDI File reading and writing for [`Performance`] records.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};

use crate::error::{Error, Result};
use crate::notes::{PedalEvent, PedalKind, PerfNote, Performance};

/// Ticks per quarter note used when writing. Together with [`WRITE_TEMPO`]
/// one tick is one microsecond.
pub const WRITE_PPQ: u16 = 1000;
/// Microseconds per quarter note used when writing.
pub const WRITE_TEMPO: u32 = 1000;

enum Event {
    Tempo(u32),
    On { ch: u8, key: u8, vel: u8 },
    Off { ch: u8, key: u8 },
    Pedal { kind: PedalKind, value: u8 },
}

/// Parses a format 0 or 1 file. Unterminated and zero-length notes are
/// dropped with a warning; ids are `p{index}` in note-on order. A note-off
/// ends the earliest open note of its key.
pub fn parse_performance(bytes: &[u8]) -> Result<Performance> {
    let smf = Smf::parse(bytes).map_err(|e| Error::Midi(e.to_string()))?;
    if smf.header.format == Format::Sequential {
        return Err(Error::Midi("format 2 files are not supported".into()));
    }

    // (tick, track, index, event), merged across tracks
    let mut events = Vec::new();
    for (ti, track) in smf.tracks.iter().enumerate() {
        let mut tick = 0u64;
        for (ei, ev) in track.iter().enumerate() {
            tick += u64::from(ev.delta.as_int());
            let decoded = match ev.kind {
                TrackEventKind::Meta(MetaMessage::Tempo(t)) => Event::Tempo(t.as_int()),
                TrackEventKind::Midi { channel, message } => {
                    let ch = channel.as_int();
                    match message {
                        MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => Event::On {
                            ch,
                            key: key.as_int(),
                            vel: vel.as_int(),
                        },
                        MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                            Event::Off { ch, key: key.as_int() }
                        }
                        MidiMessage::Controller { controller, value } => {
                            match PedalKind::from_controller(controller.as_int()) {
                                Some(kind) => Event::Pedal {
                                    kind,
                                    value: value.as_int(),
                                },
                                None => continue,
                            }
                        }
                        _ => continue,
                    }
                }
                _ => continue,
            };
            events.push((tick, ti, ei, decoded));
        }
    }
    events.sort_by_key(|&(tick, ti, ei, _)| (tick, ti, ei));

    let seconds_per_tick_fixed = match smf.header.timing {
        Timing::Metrical(_) => None,
        Timing::Timecode(fps, sub) => Some(1.0 / (f64::from(fps.as_f32()) * f64::from(sub.max(1)))),
    };
    let ppq = match smf.header.timing {
        Timing::Metrical(p) => f64::from(p.as_int().max(1)),
        Timing::Timecode(..) => 1.0,
    };

    let mut tempo = 500_000.0f64;
    let mut last_tick = 0u64;
    let mut now = 0.0f64;
    let mut open: HashMap<(u8, u8), VecDeque<(usize, f64, u8)>> = HashMap::new();
    // (note-on order, onset, duration, key, velocity)
    let mut finished: Vec<(usize, f64, f64, u8, u8)> = Vec::new();
    let mut pedals = Vec::new();
    let mut ons = 0usize;
    for (tick, _, _, ev) in events {
        let spt = seconds_per_tick_fixed.unwrap_or(tempo * 1e-6 / ppq);
        now += (tick - last_tick) as f64 * spt;
        last_tick = tick;
        match ev {
            Event::Tempo(t) => tempo = f64::from(t),
            Event::On { ch, key, vel } => {
                open.entry((ch, key)).or_default().push_back((ons, now, vel));
                ons += 1;
            }
            Event::Off { ch, key } => match open.get_mut(&(ch, key)).and_then(VecDeque::pop_front) {
                Some((order, onset, vel)) => finished.push((order, onset, now - onset, key, vel)),
                None => log::debug!("note-off without note-on for key {key} at {now:.6} s"),
            },
            Event::Pedal { kind, value } => pedals.push(PedalEvent {
                time_sec: now,
                value,
                kind,
            }),
        }
    }
    let dangling: usize = open.values().map(VecDeque::len).sum();
    if dangling > 0 {
        log::warn!("dropping {dangling} unterminated note(s)");
    }
    finished.sort_by_key(|n| n.0);
    let before = finished.len();
    finished.retain(|n| n.2 > 0.0);
    if finished.len() < before {
        log::warn!("dropping {} zero-length note(s)", before - finished.len());
    }
    let notes = finished
        .into_iter()
        .enumerate()
        .map(|(i, (_, onset, duration, key, vel))| PerfNote {
            id: format!("p{i}"),
            onset_sec: onset,
            duration_sec: duration,
            pitch: key,
            velocity: vel,
        })
        .collect();
    Performance::new(notes, pedals)
}

pub fn load_performance(path: impl AsRef<Path>) -> Result<Performance> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_performance(&bytes)
}

/// Latest event time the writer accepts, about 31.7 years.
pub const MAX_WRITE_SEC: f64 = 1e9;

fn to_tick(sec: f64) -> u64 {
    (sec * 1e6).round().max(0.0) as u64
}

fn checked_tick(sec: f64) -> Result<u64> {
    if sec.is_finite() && sec <= MAX_WRITE_SEC {
        Ok(to_tick(sec))
    } else {
        Err(Error::invalid(format!("event time {sec} s is outside the writable range [0, {MAX_WRITE_SEC}]")))
    }
}

/// Encodes as a single-track file on channel 1 with microsecond ticks.
pub fn performance_to_bytes(perf: &Performance) -> Result<Vec<u8>> {
    // (tick, priority, event); at equal ticks: offs, then pedals, then ons
    let mut timeline: Vec<(u64, u8, usize, TrackEventKind<'static>)> = Vec::new();
    let ch = u4::new(0);
    for (i, n) in perf.notes().iter().enumerate() {
        let on = checked_tick(n.onset_sec)?;
        let off = checked_tick(n.onset_sec + n.duration_sec)?.max(on + 1);
        let key = u7::new(n.pitch.min(127));
        timeline.push((
            on,
            2,
            i,
            TrackEventKind::Midi {
                channel: ch,
                message: MidiMessage::NoteOn {
                    key,
                    vel: u7::new(n.velocity.clamp(1, 127)),
                },
            },
        ));
        timeline.push((
            off,
            0,
            i,
            TrackEventKind::Midi {
                channel: ch,
                message: MidiMessage::NoteOff { key, vel: u7::new(0) },
            },
        ));
    }
    for (i, e) in perf.pedal_events().iter().enumerate() {
        timeline.push((
            checked_tick(e.time_sec)?,
            1,
            i,
            TrackEventKind::Midi {
                channel: ch,
                message: MidiMessage::Controller {
                    controller: u7::new(e.kind.controller()),
                    value: u7::new(e.value.min(127)),
                },
            },
        ));
    }
    timeline.sort_by_key(|&(tick, prio, i, _)| (tick, prio, i));

    let mut track = vec![TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(WRITE_TEMPO))),
    }];
    let max_delta = u64::from(u28::max_value().as_int());
    let mut last = 0u64;
    for (tick, _, _, kind) in timeline {
        let mut delta = tick - last;
        while delta > max_delta {
            track.push(TrackEvent {
                delta: u28::new(max_delta as u32),
                kind: TrackEventKind::Meta(MetaMessage::Marker(b"")),
            });
            delta -= max_delta;
        }
        track.push(TrackEvent {
            delta: u28::new(delta as u32),
            kind,
        });
        last = tick;
    }
    track.push(TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
    });

    let mut smf = Smf::new(Header::new(Format::SingleTrack, Timing::Metrical(u15::new(WRITE_PPQ))));
    smf.tracks.push(track);
    let mut out = Vec::new();
    smf.write_std(&mut out).map_err(|e| Error::Midi(e.to_string()))?;
    Ok(out)
}

/// Ids that [`parse_performance`] gives the notes of `perf` after a round
/// trip through [`performance_to_bytes`], in `perf.notes()` order.
pub fn written_ids(perf: &Performance) -> Vec<String> {
    let mut order: Vec<usize> = (0..perf.notes().len()).collect();
    order.sort_by_key(|&i| (to_tick(perf.notes()[i].onset_sec), i));
    let mut ids = vec![String::new(); order.len()];
    for (rank, i) in order.into_iter().enumerate() {
        ids[i] = format!("p{rank}");
    }
    ids
}

pub fn save_performance(perf: &Performance, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, performance_to_bytes(perf)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smf_bytes(timing: Timing, tracks: Vec<Vec<TrackEvent<'static>>>) -> Vec<u8> {
        let format = if tracks.len() == 1 {
            Format::SingleTrack
        } else {
            Format::Parallel
        };
        let mut smf = Smf::new(Header::new(format, timing));
        smf.tracks = tracks;
        let mut out = Vec::new();
        smf.write_std(&mut out).unwrap();
        out
    }

    fn ev(delta: u32, message: MidiMessage) -> TrackEvent<'static> {
        TrackEvent {
            delta: u28::new(delta),
            kind: TrackEventKind::Midi {
                channel: u4::new(0),
                message,
            },
        }
    }

    fn on(key: u8, vel: u8) -> MidiMessage {
        MidiMessage::NoteOn {
            key: u7::new(key),
            vel: u7::new(vel),
        }
    }

    #[test]
    fn written_ids_predict_read_back() {
        let mut rng = crate::rng::seeded(4);
        let piece = crate::synthetic::random_piece(&mut rng, 80, &Default::default());
        let back = parse_performance(&performance_to_bytes(&piece.perf).unwrap()).unwrap();
        let ids = written_ids(&piece.perf);
        for (n, id) in piece.perf.notes().iter().zip(&ids) {
            let b = back.note(id).unwrap();
            assert_eq!((b.pitch, b.velocity), (n.pitch, n.velocity));
            assert!((b.onset_sec - n.onset_sec).abs() < 1e-6);
        }
    }

    #[test]
    fn single_note_default_tempo() {
        // 480 ppq at 120 bpm: 960 ticks = 1 s
        let bytes = smf_bytes(
            Timing::Metrical(u15::new(480)),
            vec![vec![ev(0, on(60, 64)), ev(960, on(60, 0))]],
        );
        let perf = parse_performance(&bytes).unwrap();
        assert_eq!(perf.notes().len(), 1);
        let n = &perf.notes()[0];
        assert_eq!((n.id.as_str(), n.pitch, n.velocity), ("p0", 60, 64));
        assert!(n.onset_sec.abs() < 1e-12 && (n.duration_sec - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sustain_pedal_event() {
        let cc = |c: u8, v: u8| MidiMessage::Controller {
            controller: u7::new(c),
            value: u7::new(v),
        };
        let bytes = smf_bytes(
            Timing::Metrical(u15::new(480)),
            vec![vec![ev(480, cc(64, 127)), ev(0, cc(7, 100)), ev(0, cc(67, 20))]],
        );
        let perf = parse_performance(&bytes).unwrap();
        let sustain: Vec<_> = perf
            .pedal_events()
            .iter()
            .filter(|e| e.kind == PedalKind::Sustain)
            .map(|e| (e.time_sec, e.value))
            .collect();
        assert_eq!(sustain, [(0.5, 127)]);
        assert_eq!(perf.pedal_events().len(), 2);
    }

    #[test]
    fn tempo_map_in_separate_track() {
        let tempo = TrackEvent {
            delta: u28::new(480),
            kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(1_000_000))),
        };
        let bytes = smf_bytes(
            Timing::Metrical(u15::new(480)),
            vec![vec![tempo], vec![ev(960, on(62, 90)), ev(480, on(62, 0))]],
        );
        let perf = parse_performance(&bytes).unwrap();
        let n = &perf.notes()[0];
        // first beat at 0.5 s/beat, then 1 s/beat
        assert!((n.onset_sec - 1.5).abs() < 1e-12);
        assert!((n.duration_sec - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unterminated_and_overlapping_notes() {
        let bytes = smf_bytes(
            Timing::Metrical(u15::new(480)),
            vec![vec![
                ev(0, on(60, 50)),
                ev(100, on(60, 70)),
                ev(100, on(60, 0)),
                ev(100, on(60, 0)),
                ev(0, on(72, 30)),
            ]],
        );
        let perf = parse_performance(&bytes).unwrap();
        let vels: Vec<_> = perf.notes().iter().map(|n| n.velocity).collect();
        assert_eq!(vels, [50, 70]);
        assert!(perf.notes()[0].duration_sec > perf.notes()[1].duration_sec);
    }

    #[test]
    fn write_read_round_trip() {
        let notes = vec![
            PerfNote {
                id: "a".into(),
                onset_sec: 0.25,
                duration_sec: 0.5,
                pitch: 60,
                velocity: 64,
            },
            PerfNote {
                id: "b".into(),
                onset_sec: 0.75,
                duration_sec: 0.1234567,
                pitch: 64,
                velocity: 100,
            },
        ];
        let pedals = vec![PedalEvent {
            time_sec: 0.75,
            value: 90,
            kind: PedalKind::Sustain,
        }];
        let perf = Performance::new(notes, pedals).unwrap();
        let back = parse_performance(&performance_to_bytes(&perf).unwrap()).unwrap();
        for (a, b) in perf.notes().iter().zip(back.notes()) {
            assert!((a.onset_sec - b.onset_sec).abs() <= 1e-6);
            assert!((a.duration_sec - b.duration_sec).abs() <= 1e-6);
            assert_eq!((a.pitch, a.velocity), (b.pitch, b.velocity));
        }
        assert_eq!(back.pedal_at(PedalKind::Sustain, 0.75), 90);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(parse_performance(b"not a midi file"), Err(Error::Midi(_))));
    }

    #[test]
    fn unwritable_times_are_errors() {
        let notes = vec![PerfNote {
            id: "a".into(),
            onset_sec: 1.0,
            duration_sec: 1e30,
            pitch: 60,
            velocity: 64,
        }];
        let perf = Performance::new(notes, vec![]).unwrap();
        assert!(performance_to_bytes(&perf).is_err());
    }
}
