//! Scores, performances, alignments and joint-onset grouping.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two score onsets closer than this (in beats) belong to the same group.
pub const ONSET_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNote {
    pub id: String,
    pub onset_beats: f64,
    pub duration_beats: f64,
    pub pitch: u8,
    pub voice: u32,
}

/// Validated, sorted list of score notes.
#[derive(Clone, Debug, PartialEq)]
pub struct NoteArray {
    notes: Vec<ScoreNote>,
}

impl NoteArray {
    /// Validates and sorts by `(onset_beats, pitch)`.
    ///
    /// Row numbers in errors are 1-based positions in `notes` as given.
    pub fn new(mut notes: Vec<ScoreNote>) -> Result<Self> {
        if notes.is_empty() {
            return Err(Error::invalid("score has no notes"));
        }
        let mut seen = HashSet::new();
        for (i, n) in notes.iter().enumerate() {
            let row = i + 1;
            if !n.onset_beats.is_finite() || n.onset_beats < 0.0 {
                return Err(Error::Parse {
                    row,
                    message: format!("onset_beats must be finite and >= 0, got {}", n.onset_beats),
                });
            }
            if !(n.duration_beats > 0.0) || !n.duration_beats.is_finite() {
                return Err(Error::NonPositiveDuration { row });
            }
            if n.pitch > 127 {
                return Err(Error::Parse {
                    row,
                    message: format!("pitch {} outside 0-127", n.pitch),
                });
            }
            if n.voice < 1 {
                return Err(Error::Parse {
                    row,
                    message: "voice must be >= 1".into(),
                });
            }
            if !seen.insert(n.id.as_str()) {
                return Err(Error::DuplicateId { id: n.id.clone() });
            }
        }
        notes.sort_by(|a, b| {
            a.onset_beats
                .total_cmp(&b.onset_beats)
                .then(a.pitch.cmp(&b.pitch))
        });
        Ok(NoteArray { notes })
    }

    pub fn notes(&self) -> &[ScoreNote] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.notes.iter().position(|n| n.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.notes.iter().map(|n| n.id.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfNote {
    pub id: String,
    pub onset_sec: f64,
    pub duration_sec: f64,
    pub pitch: u8,
    pub velocity: u8,
}

/// Piano pedal controller a [`PedalEvent`] belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PedalKind {
    Sustain,
    Sostenuto,
    Soft,
}

impl PedalKind {
    pub fn controller(self) -> u8 {
        match self {
            PedalKind::Sustain => 64,
            PedalKind::Sostenuto => 66,
            PedalKind::Soft => 67,
        }
    }

    pub fn from_controller(cc: u8) -> Option<Self> {
        match cc {
            64 => Some(PedalKind::Sustain),
            66 => Some(PedalKind::Sostenuto),
            67 => Some(PedalKind::Soft),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PedalEvent {
    pub time_sec: f64,
    pub value: u8,
    pub kind: PedalKind,
}

/// Performed notes plus the pedal controller stream.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Performance {
    notes: Vec<PerfNote>,
    pedal_events: Vec<PedalEvent>,
}

impl Performance {
    /// Validates ids and ranges; pedal events are stably sorted by time.
    pub fn new(notes: Vec<PerfNote>, mut pedal_events: Vec<PedalEvent>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, n) in notes.iter().enumerate() {
            let row = i + 1;
            if !n.onset_sec.is_finite() || n.onset_sec < 0.0 {
                return Err(Error::Parse {
                    row,
                    message: format!("onset_sec must be finite and >= 0, got {}", n.onset_sec),
                });
            }
            if !(n.duration_sec > 0.0) || !n.duration_sec.is_finite() {
                return Err(Error::NonPositiveDuration { row });
            }
            if !(1..=127).contains(&n.velocity) || n.pitch > 127 {
                return Err(Error::Parse {
                    row,
                    message: format!("velocity {} or pitch {} out of range", n.velocity, n.pitch),
                });
            }
            if !seen.insert(n.id.as_str()) {
                return Err(Error::DuplicateId { id: n.id.clone() });
            }
        }
        if let Some(e) = pedal_events
            .iter()
            .find(|e| !e.time_sec.is_finite() || e.time_sec < 0.0 || e.value > 127)
        {
            return Err(Error::invalid(format!("bad pedal event {e:?}")));
        }
        pedal_events.sort_by(|a, b| a.time_sec.total_cmp(&b.time_sec));
        Ok(Performance {
            notes,
            pedal_events,
        })
    }

    pub fn notes(&self) -> &[PerfNote] {
        &self.notes
    }

    pub fn pedal_events(&self) -> &[PedalEvent] {
        &self.pedal_events
    }

    pub fn note(&self, id: &str) -> Option<&PerfNote> {
        self.notes.iter().find(|n| n.id == id)
    }

    /// Index from note id to position in [`Performance::notes`].
    pub fn index(&self) -> HashMap<&str, usize> {
        self.notes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect()
    }

    /// Controller value of `kind` in force at `time_sec`: the last event at or
    /// before that time, 0 before the first one.
    pub fn pedal_at(&self, kind: PedalKind, time_sec: f64) -> u8 {
        let end = self.pedal_events.partition_point(|e| e.time_sec <= time_sec);
        self.pedal_events[..end]
            .iter()
            .rev()
            .find(|e| e.kind == kind)
            .map_or(0, |e| e.value)
    }

    /// End time of the last note or pedal event.
    pub fn end_sec(&self) -> f64 {
        let notes = self.notes.iter().map(|n| n.onset_sec + n.duration_sec);
        let pedals = self.pedal_events.iter().map(|e| e.time_sec);
        notes.chain(pedals).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignPair {
    pub score_id: String,
    pub perf_id: Option<String>,
}

/// Score-to-performance note matching.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Alignment {
    pub pairs: Vec<AlignPair>,
}

impl Alignment {
    /// Checks that every score note appears exactly once and no performed
    /// note is used twice. When `perf` is given, referenced ids must exist.
    pub fn validate(&self, score: &NoteArray, perf: Option<&Performance>) -> Result<()> {
        let mut score_ids = HashSet::new();
        let mut perf_ids = HashSet::new();
        for p in &self.pairs {
            if !score_ids.insert(p.score_id.as_str()) {
                return Err(Error::Alignment(format!("score id {:?} listed twice", p.score_id)));
            }
            if let Some(pid) = &p.perf_id {
                if !perf_ids.insert(pid.as_str()) {
                    return Err(Error::Alignment(format!("performed id {pid:?} matched twice")));
                }
            }
        }
        if let Some(missing) = score.ids().find(|id| !score_ids.contains(id)) {
            return Err(Error::Alignment(format!("score id {missing:?} not aligned")));
        }
        if score_ids.len() != score.len() {
            let extra = score_ids.iter().find(|id| score.position(id).is_none());
            return Err(Error::Alignment(format!("unknown score id {extra:?}")));
        }
        if let Some(perf) = perf {
            let index = perf.index();
            if let Some(pid) = perf_ids.iter().find(|id| !index.contains_key(*id)) {
                return Err(Error::Alignment(format!("performed id {pid:?} not in performance")));
            }
        }
        Ok(())
    }

    /// Matched performed id for every score id.
    pub fn lookup(&self) -> HashMap<&str, &str> {
        self.pairs
            .iter()
            .filter_map(|p| p.perf_id.as_deref().map(|pid| (p.score_id.as_str(), pid)))
            .collect()
    }

    /// Pairs each score note with the performed note of the same id, if any.
    pub fn by_id(score: &NoteArray, perf: &Performance) -> Self {
        let index = perf.index();
        Alignment {
            pairs: score
                .ids()
                .map(|id| AlignPair {
                    score_id: id.to_string(),
                    perf_id: index.contains_key(id).then(|| id.to_string()),
                })
                .collect(),
        }
    }
}

/// All score notes sharing one notated onset.
#[derive(Clone, Debug, PartialEq)]
pub struct OnsetGroup {
    pub onset_beats: f64,
    pub note_ids: Vec<String>,
    /// Positions of the notes in the [`NoteArray`].
    pub indices: Vec<usize>,
}

/// Partition of the score into joint onsets, strictly increasing.
pub fn joint_onsets(score: &NoteArray) -> Vec<OnsetGroup> {
    let mut groups: Vec<OnsetGroup> = Vec::new();
    for (i, n) in score.notes().iter().enumerate() {
        match groups.last_mut() {
            Some(g) if n.onset_beats - g.onset_beats <= ONSET_TOLERANCE => {
                g.note_ids.push(n.id.clone());
                g.indices.push(i);
            }
            _ => groups.push(OnsetGroup {
                onset_beats: n.onset_beats,
                note_ids: vec![n.id.clone()],
                indices: vec![i],
            }),
        }
    }
    groups
}

fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

pub(crate) fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

pub(crate) fn check_header(rdr: &mut csv::Reader<&[u8]>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            row: 0,
            message: format!("expected header {:?}, got {:?}", expected.join(","), header),
        });
    }
    Ok(())
}

pub(crate) fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, row: usize, name: &str) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| Error::Parse {
        row,
        message: format!("bad {name} {raw:?}"),
    })
}

const SCORE_HEADER: [&str; 5] = ["id", "onset_beats", "duration_beats", "pitch", "voice"];

/// Parses the score CSV format; an empty id becomes the 0-based row index.
pub fn parse_score(text: &str) -> Result<NoteArray> {
    let mut rdr = csv_reader(text);
    check_header(&mut rdr, &SCORE_HEADER)?;
    let mut notes = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let id = match rec.get(0).unwrap_or("") {
            "" => i.to_string(),
            s => s.to_string(),
        };
        let duration_beats: f64 = field(&rec, 2, row, "duration_beats")?;
        if !(duration_beats > 0.0) {
            return Err(Error::NonPositiveDuration { row });
        }
        notes.push(ScoreNote {
            id,
            onset_beats: field(&rec, 1, row, "onset_beats")?,
            duration_beats,
            pitch: field(&rec, 3, row, "pitch")?,
            voice: field(&rec, 4, row, "voice")?,
        });
    }
    NoteArray::new(notes)
}

pub fn load_score(path: impl AsRef<Path>) -> Result<NoteArray> {
    parse_score(&read_to_string(path.as_ref())?)
}

pub fn score_to_csv(score: &NoteArray) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SCORE_HEADER)?;
    for n in score.notes() {
        w.write_record([
            n.id.clone(),
            n.onset_beats.to_string(),
            n.duration_beats.to_string(),
            n.pitch.to_string(),
            n.voice.to_string(),
        ])?;
    }
    finish(w)
}

pub fn save_score(score: &NoteArray, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &score_to_csv(score)?)
}

/// Parses `score_id,perf_id`; an empty `perf_id` marks a deleted note.
pub fn parse_alignment(text: &str) -> Result<Alignment> {
    let mut rdr = csv_reader(text);
    check_header(&mut rdr, &["score_id", "perf_id"])?;
    let mut pairs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: i + 1,
            message: e.to_string(),
        })?;
        let score_id = rec.get(0).unwrap_or("").to_string();
        if score_id.is_empty() {
            return Err(Error::Parse {
                row: i + 1,
                message: "empty score_id".into(),
            });
        }
        let perf_id = rec.get(1).filter(|s| !s.is_empty()).map(str::to_string);
        pairs.push(AlignPair { score_id, perf_id });
    }
    Ok(Alignment { pairs })
}

pub fn load_alignment(path: impl AsRef<Path>) -> Result<Alignment> {
    parse_alignment(&read_to_string(path.as_ref())?)
}

pub fn alignment_to_csv(align: &Alignment) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["score_id", "perf_id"])?;
    for p in &align.pairs {
        w.write_record([p.score_id.as_str(), p.perf_id.as_deref().unwrap_or("")])?;
    }
    finish(w)
}

pub fn save_alignment(align: &Alignment, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &alignment_to_csv(align)?)
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    read_to_string(path)
}
