//! Expression attributes of a performance and the three comparison metrics
//! against several human interpretations of the same score.
//!
//! Attributes are sampled at joint onsets (tempo, velocity, asynchrony),
//! at notes (articulation, pedal) or at dynamics regions. Comparisons use
//! the positions shared by the rendered and the reference series.

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::notes::{
    check_header, csv_reader, field, finish, joint_onsets, read_file, write_file, Alignment, NoteArray, PedalKind,
    PerfNote, Performance, ScoreNote,
};
use crate::rng::seeded;

/// Floor on the ground-truth spread in [`deviation_multiple`].
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Floor on both densities in [`kl_divergence`].
pub const DENSITY_FLOOR: f64 = 1e-12;
/// Minimum sample size for [`kl_divergence`].
pub const KL_MIN_SAMPLES: usize = 5;
/// Minimum shared positions for one Pearson comparison.
pub const PEARSON_MIN_POSITIONS: usize = 3;

/// The nine assessed attributes, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    ArtKor,
    AsyPitchCor,
    AsyDelta,
    DynAgr,
    DynCon,
    DynRampCor,
    PedOnval,
    TempoCurve,
    VelocityCurve,
}

impl Attribute {
    pub const ALL: [Attribute; 9] = [
        Attribute::ArtKor,
        Attribute::AsyPitchCor,
        Attribute::AsyDelta,
        Attribute::DynAgr,
        Attribute::DynCon,
        Attribute::DynRampCor,
        Attribute::PedOnval,
        Attribute::TempoCurve,
        Attribute::VelocityCurve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::ArtKor => "art_kor",
            Attribute::AsyPitchCor => "asy_pitch_cor",
            Attribute::AsyDelta => "asy_delta",
            Attribute::DynAgr => "dyn_agr",
            Attribute::DynCon => "dyn_con",
            Attribute::DynRampCor => "dyn_ramp_cor",
            Attribute::PedOnval => "ped_onval",
            Attribute::TempoCurve => "tempo_curve",
            Attribute::VelocityCurve => "velocity_curve",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl std::fmt::Display for Attribute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where an attribute value lives.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Position {
    /// A joint onset or region start, in beats.
    Beat(f64),
    /// A score note id.
    Note(String),
    /// A pair of regions, by their start beats.
    Span(f64, f64),
}

fn beat_bits(x: f64) -> u64 {
    // -0.0 and 0.0 are the same position
    (x + 0.0).to_bits()
}

impl PartialEq for Position {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Position::Beat(a), Position::Beat(b)) => beat_bits(*a) == beat_bits(*b),
            (Position::Note(a), Position::Note(b)) => a == b,
            (Position::Span(a, b), Position::Span(c, d)) => {
                beat_bits(*a) == beat_bits(*c) && beat_bits(*b) == beat_bits(*d)
            }
            _ => false,
        }
    }
}

impl Eq for Position {}

impl Hash for Position {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match self {
            Position::Beat(a) => (0u8, beat_bits(*a)).hash(state),
            Position::Note(id) => (1u8, id).hash(state),
            Position::Span(a, b) => (2u8, beat_bits(*a), beat_bits(*b)).hash(state),
        }
    }
}

/// Values of one attribute over the positions where it is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSeries {
    pub attribute: Attribute,
    pub positions: Vec<Position>,
    pub values: Vec<f64>,
    /// Entries dropped because their value was not finite.
    pub dropped: usize,
}

impl AttributeSeries {
    /// Keeps finite entries in the given order and counts the rest.
    pub fn new(attribute: Attribute, entries: impl IntoIterator<Item = (Position, f64)>) -> Self {
        let mut positions = Vec::new();
        let mut values = Vec::new();
        let mut dropped = 0;
        for (p, v) in entries {
            if v.is_finite() {
                positions.push(p);
                values.push(v);
            } else {
                dropped += 1;
            }
        }
        if dropped > 0 {
            log::debug!("{attribute}: dropped {dropped} undefined values");
        }
        AttributeSeries {
            attribute,
            positions,
            values,
            dropped,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn by_position(&self) -> HashMap<&Position, f64> {
        self.positions.iter().zip(self.values.iter().copied()).collect()
    }
}

/// Mean and population standard deviation of a set of values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    /// `None` for an empty set.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

/// Pearson correlation, `None` when fewer than two points or either side
/// is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson inputs differ in length");
    if x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Matched (score note, performed note) pairs in score order.
fn matched<'a>(score: &'a NoteArray, perf: &'a Performance, align: &Alignment) -> Vec<Option<&'a PerfNote>> {
    let lookup = align.lookup();
    let index = perf.index();
    score
        .notes()
        .iter()
        .map(|n| {
            lookup
                .get(n.id.as_str())
                .and_then(|pid| index.get(pid))
                .map(|&i| &perf.notes()[i])
        })
        .collect()
}

/// Joint onsets with at least one matched note: score onset and the
/// matched (score, performed) notes.
fn matched_groups<'a>(
    score: &'a NoteArray,
    perf: &'a Performance,
    align: &Alignment,
) -> Vec<(f64, Vec<(&'a ScoreNote, &'a PerfNote)>)> {
    let m = matched(score, perf, align);
    joint_onsets(score)
        .into_iter()
        .filter_map(|g| {
            let notes: Vec<_> = g
                .indices
                .iter()
                .filter_map(|&i| m[i].map(|p| (&score.notes()[i], p)))
                .collect();
            (!notes.is_empty()).then_some((g.onset_beats, notes))
        })
        .collect()
}

/// Tempo (BPM, between consecutive matched joint onsets) and velocity
/// (mean MIDI velocity per matched joint onset) curves.
pub fn tempo_velocity_curves(
    perf: &Performance,
    score: &NoteArray,
    align: &Alignment,
) -> Result<(AttributeSeries, AttributeSeries)> {
    let groups = matched_groups(score, perf, align);
    if groups.len() < 2 {
        return Err(Error::InsufficientOnsets);
    }
    let perf_onsets: Vec<f64> = groups
        .iter()
        .map(|(_, ns)| mean(ns.iter().map(|(_, p)| p.onset_sec)))
        .collect();
    let tempo = groups.windows(2).zip(perf_onsets.windows(2)).map(|(g, o)| {
        let dt = o[1] - o[0];
        let bpm = if dt > 0.0 { 60.0 * (g[1].0 - g[0].0) / dt } else { f64::NAN };
        (Position::Beat(g[0].0), bpm)
    });
    let velocity = groups
        .iter()
        .map(|(onset, ns)| (Position::Beat(*onset), mean(ns.iter().map(|(_, p)| f64::from(p.velocity)))));
    Ok((
        AttributeSeries::new(Attribute::TempoCurve, tempo),
        AttributeSeries::new(Attribute::VelocityCurve, velocity),
    ))
}

/// Onset spread and pitch/onset correlation per joint onset with at least
/// `min_pitch_cor_notes.max(2)` matched notes (spread needs two).
pub fn asynchrony_features(
    perf: &Performance,
    score: &NoteArray,
    align: &Alignment,
    min_pitch_cor_notes: usize,
) -> (AttributeSeries, AttributeSeries) {
    let groups = matched_groups(score, perf, align);
    let mut delta = Vec::new();
    let mut cor = Vec::new();
    for (onset, ns) in groups.iter().filter(|(_, ns)| ns.len() >= 2) {
        let onsets: Vec<f64> = ns.iter().map(|(_, p)| p.onset_sec).collect();
        let pitches: Vec<f64> = ns.iter().map(|(_, p)| f64::from(p.pitch)).collect();
        let hi = onsets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = onsets.iter().copied().fold(f64::INFINITY, f64::min);
        delta.push((Position::Beat(*onset), hi - lo));
        if ns.len() >= min_pitch_cor_notes {
            cor.push((Position::Beat(*onset), pearson(&pitches, &onsets).unwrap_or(f64::NAN)));
        }
    }
    (
        AttributeSeries::new(Attribute::AsyDelta, delta),
        AttributeSeries::new(Attribute::AsyPitchCor, cor),
    )
}

/// Key overlap ratio between consecutive matched notes of each score voice,
/// positioned at the later note. Pairs sharing a score onset or with a
/// non-positive performed inter-onset interval are skipped.
pub fn key_overlap_ratio(perf: &Performance, score: &NoteArray, align: &Alignment) -> AttributeSeries {
    let m = matched(score, perf, align);
    let mut voices: BTreeMap<u32, Vec<(&ScoreNote, &PerfNote)>> = BTreeMap::new();
    for (sn, pn) in score.notes().iter().zip(&m) {
        if let Some(pn) = pn {
            voices.entry(sn.voice).or_default().push((sn, pn));
        }
    }
    let mut entries = Vec::new();
    let mut skipped = 0;
    for notes in voices.values() {
        for w in notes.windows(2) {
            let ((s0, p0), (s1, p1)) = (w[0], w[1]);
            let ioi = p1.onset_sec - p0.onset_sec;
            if s1.onset_beats - s0.onset_beats <= crate::notes::ONSET_TOLERANCE || ioi <= 0.0 {
                skipped += 1;
                continue;
            }
            let kor = (p0.onset_sec + p0.duration_sec - p1.onset_sec) / ioi;
            entries.push((s1, kor));
        }
    }
    if skipped > 0 {
        log::warn!("key overlap ratio: skipped {skipped} pairs with zero inter-onset interval");
    }
    // back to score order
    let order: HashMap<&str, usize> = score.ids().enumerate().map(|(i, id)| (id, i)).collect();
    entries.sort_by_key(|(s, _)| order[s.id.as_str()]);
    AttributeSeries::new(
        Attribute::ArtKor,
        entries.into_iter().map(|(s, v)| (Position::Note(s.id.clone()), v)),
    )
}

/// Sustain controller value in force at each matched note's onset.
pub fn pedal_onset_values(perf: &Performance, score: &NoteArray, align: &Alignment) -> AttributeSeries {
    let m = matched(score, perf, align);
    AttributeSeries::new(
        Attribute::PedOnval,
        score.notes().iter().zip(m).filter_map(|(sn, pn)| {
            pn.map(|p| {
                (
                    Position::Note(sn.id.clone()),
                    f64::from(perf.pedal_at(PedalKind::Sustain, p.onset_sec)),
                )
            })
        }),
    )
}

/// Kind of a dynamics marking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MarkingKind {
    /// Ordinal level, `ppp = 1` to `fff = 8`.
    Constant(u8),
    Crescendo { end_beats: f64 },
    Decrescendo { end_beats: f64 },
}

pub const DYNAMIC_LEVELS: [&str; 8] = ["ppp", "pp", "p", "mp", "mf", "f", "ff", "fff"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynMarking {
    pub onset_beats: f64,
    pub kind: MarkingKind,
}

impl DynMarking {
    pub fn validate(&self) -> Result<()> {
        if !self.onset_beats.is_finite() {
            return Err(Error::invalid("marking onset must be finite"));
        }
        match self.kind {
            MarkingKind::Constant(level) if !(1..=8).contains(&level) => {
                Err(Error::invalid(format!("dynamic level {level} outside 1..=8")))
            }
            MarkingKind::Crescendo { end_beats } | MarkingKind::Decrescendo { end_beats }
                if !(end_beats > self.onset_beats) =>
            {
                Err(Error::invalid(format!("hairpin at {} has an empty span", self.onset_beats)))
            }
            _ => Ok(()),
        }
    }
}

const MARKING_HEADER: [&str; 4] = ["onset_beats", "kind", "value", "end_beats"];

/// Parses `onset_beats,kind,value,end_beats` where `kind` is `constant`
/// (value `ppp`…`fff`) or `hairpin` (value `cresc` or `decresc`, with an
/// end).
pub fn parse_markings(text: &str) -> Result<Vec<DynMarking>> {
    let mut rdr = csv_reader(text);
    check_header(&mut rdr, &MARKING_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let onset_beats: f64 = field(&rec, 0, row, "onset_beats")?;
        let value = rec.get(2).unwrap_or("");
        let bad = |what: &str| Error::Parse {
            row,
            message: format!("bad {what} {value:?}"),
        };
        let kind = match rec.get(1).unwrap_or("") {
            "constant" => {
                let level = DYNAMIC_LEVELS.iter().position(|l| *l == value).ok_or_else(|| bad("dynamic"))?;
                MarkingKind::Constant(level as u8 + 1)
            }
            "hairpin" => {
                let end_beats: f64 = field(&rec, 3, row, "end_beats")?;
                match value {
                    "cresc" | "crescendo" => MarkingKind::Crescendo { end_beats },
                    "decresc" | "decrescendo" | "dim" | "diminuendo" => MarkingKind::Decrescendo { end_beats },
                    _ => return Err(bad("hairpin")),
                }
            }
            other => {
                return Err(Error::Parse {
                    row,
                    message: format!("unknown marking kind {other:?}"),
                })
            }
        };
        let m = DynMarking { onset_beats, kind };
        m.validate().map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        out.push(m);
    }
    Ok(out)
}

pub fn load_markings(path: impl AsRef<Path>) -> Result<Vec<DynMarking>> {
    parse_markings(&read_file(path.as_ref())?)
}

pub fn markings_to_csv(markings: &[DynMarking]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MARKING_HEADER)?;
    for m in markings {
        let (kind, value, end) = match m.kind {
            MarkingKind::Constant(l) => ("constant", DYNAMIC_LEVELS[usize::from(l) - 1], String::new()),
            MarkingKind::Crescendo { end_beats } => ("hairpin", "cresc", end_beats.to_string()),
            MarkingKind::Decrescendo { end_beats } => ("hairpin", "decresc", end_beats.to_string()),
        };
        w.write_record([m.onset_beats.to_string(), kind.into(), value.into(), end])?;
    }
    finish(w)
}

pub fn save_markings(markings: &[DynMarking], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &markings_to_csv(markings)?)
}

/// Dynamics attributes; `None` when the markings needed are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsFeatures {
    pub agr: Option<AttributeSeries>,
    pub con: Option<AttributeSeries>,
    pub ramp_cor: Option<AttributeSeries>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Agreement and consistency over constant-marking regions, and ramp
/// correlation over hairpins.
///
/// A region runs from one constant marking to the next one with a
/// different level. Agreement scores each adjacent region pair by whether
/// the mean velocity moves in the marked direction; consistency scores
/// pairs of regions with the same level by `1 − |Δv̄|/127`. Regions without
/// matched notes are left out of every pair.
pub fn dynamics_features(
    perf: &Performance,
    score: &NoteArray,
    align: &Alignment,
    markings: &[DynMarking],
) -> Result<DynamicsFeatures> {
    for m in markings {
        m.validate()?;
    }
    let m = matched(score, perf, align);
    let notes: Vec<(f64, f64)> = score
        .notes()
        .iter()
        .zip(&m)
        .filter_map(|(s, p)| p.map(|p| (s.onset_beats, f64::from(p.velocity))))
        .collect();

    let mut constants: Vec<(f64, u8)> = markings
        .iter()
        .filter_map(|m| match m.kind {
            MarkingKind::Constant(l) => Some((m.onset_beats, l)),
            _ => None,
        })
        .collect();
    constants.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut regions: Vec<(f64, u8)> = Vec::new();
    for (onset, level) in constants {
        match regions.last_mut() {
            Some(last) if last.1 == level => {}
            Some(last) if last.0 == onset => *last = (onset, level),
            _ => regions.push((onset, level)),
        }
    }
    let means: Vec<Option<f64>> = regions
        .iter()
        .enumerate()
        .map(|(r, &(start, _))| {
            let end = regions.get(r + 1).map_or(f64::INFINITY, |n| n.0);
            let vs: Vec<f64> = notes
                .iter()
                .filter(|(o, _)| *o >= start - crate::notes::ONSET_TOLERANCE && *o < end - crate::notes::ONSET_TOLERANCE)
                .map(|(_, v)| *v)
                .collect();
            (!vs.is_empty()).then(|| mean(vs))
        })
        .collect();

    let (agr, con) = if regions.is_empty() {
        (None, None)
    } else {
        let mut agr = Vec::new();
        for r in 1..regions.len() {
            if let (Some(a), Some(b)) = (means[r - 1], means[r]) {
                let v = sign(b - a) * sign(f64::from(regions[r].1) - f64::from(regions[r - 1].1));
                agr.push((Position::Beat(regions[r].0), v));
            }
        }
        let mut con = Vec::new();
        for a in 0..regions.len() {
            for b in a + 1..regions.len() {
                if regions[a].1 != regions[b].1 {
                    continue;
                }
                if let (Some(va), Some(vb)) = (means[a], means[b]) {
                    con.push((Position::Span(regions[a].0, regions[b].0), 1.0 - (va - vb).abs() / 127.0));
                }
            }
        }
        (
            Some(AttributeSeries::new(Attribute::DynAgr, agr)),
            Some(AttributeSeries::new(Attribute::DynCon, con)),
        )
    };

    let mut hairpins: Vec<(f64, f64, f64)> = markings
        .iter()
        .filter_map(|m| match m.kind {
            MarkingKind::Crescendo { end_beats } => Some((m.onset_beats, end_beats, 1.0)),
            MarkingKind::Decrescendo { end_beats } => Some((m.onset_beats, end_beats, -1.0)),
            MarkingKind::Constant(_) => None,
        })
        .collect();
    hairpins.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ramp_cor = (!hairpins.is_empty()).then(|| {
        let entries = hairpins.iter().filter_map(|&(start, end, dir)| {
            let (onsets, vels): (Vec<f64>, Vec<f64>) = notes
                .iter()
                .filter(|(o, _)| *o >= start - crate::notes::ONSET_TOLERANCE && *o <= end + crate::notes::ONSET_TOLERANCE)
                .copied()
                .unzip();
            (onsets.len() >= 3).then(|| (Position::Beat(start), pearson(&vels, &onsets).map_or(f64::NAN, |r| dir * r)))
        });
        AttributeSeries::new(Attribute::DynRampCor, entries)
    });
    Ok(DynamicsFeatures { agr, con, ramp_cor })
}

/// Settings for attribute extraction and the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Monte Carlo draws for the KL estimate.
    pub n_mc: usize,
    pub seed: u64,
    /// Smallest chord that contributes a pitch correlation.
    pub min_pitch_cor_notes: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            n_mc: 300,
            seed: 0,
            min_pitch_cor_notes: 2,
        }
    }
}

/// All attributes defined for one aligned performance.
pub fn extract_attributes(
    perf: &Performance,
    score: &NoteArray,
    align: &Alignment,
    markings: &[DynMarking],
    cfg: &MetricsConfig,
) -> Result<BTreeMap<Attribute, AttributeSeries>> {
    let mut out = BTreeMap::new();
    let mut put = |s: AttributeSeries| {
        out.insert(s.attribute, s);
    };
    match tempo_velocity_curves(perf, score, align) {
        Ok((t, v)) => {
            put(t);
            put(v);
        }
        Err(Error::InsufficientOnsets) => log::warn!("fewer than two matched onsets: no tempo or velocity curve"),
        Err(e) => return Err(e),
    }
    let (delta, cor) = asynchrony_features(perf, score, align, cfg.min_pitch_cor_notes);
    put(delta);
    put(cor);
    put(key_overlap_ratio(perf, score, align));
    put(pedal_onset_values(perf, score, align));
    let dynamics = dynamics_features(perf, score, align, markings)?;
    for s in [dynamics.agr, dynamics.con, dynamics.ramp_cor].into_iter().flatten() {
        put(s);
    }
    Ok(out)
}

/// Signed deviations `(rendered − μ)/max(σ, floor)` at every rendered
/// position where at least two ground truths have a value; `μ` and `σ` are
/// the ground-truth mean and population spread there.
pub fn deviations(rendered: &AttributeSeries, gt: &[AttributeSeries]) -> Result<Vec<f64>> {
    if gt.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "deviation multiple of {} needs at least two ground truths, got {}",
            rendered.attribute,
            gt.len()
        )));
    }
    let maps: Vec<_> = gt.iter().map(AttributeSeries::by_position).collect();
    let mut out = Vec::new();
    for (pos, &r) in rendered.positions.iter().zip(&rendered.values) {
        let vals: Vec<f64> = maps.iter().filter_map(|m| m.get(pos).copied()).collect();
        if let Some(ms) = MeanStd::of(&vals).filter(|_| vals.len() >= 2) {
            out.push((r - ms.mean) / ms.std.max(SIGMA_FLOOR));
        }
    }
    if out.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "deviation multiple of {}: no position shared with two ground truths",
            rendered.attribute
        )));
    }
    Ok(out)
}

/// Mean ± std of [`deviations`].
pub fn deviation_multiple(rendered: &AttributeSeries, gt: &[AttributeSeries]) -> Result<MeanStd> {
    Ok(MeanStd::of(&deviations(rendered, gt)?).expect("non-empty"))
}

/// One-dimensional Gaussian kernel density with Scott's bandwidth.
#[derive(Clone, Debug)]
pub struct Kde {
    points: Vec<f64>,
    bandwidth: f64,
}

impl Kde {
    /// Fits to `points`; fails on fewer than two or identical values.
    pub fn fit(points: &[f64], attribute: &str) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::UndefinedMetric(format!("{attribute}: density needs two or more values")));
        }
        let m = points.iter().sum::<f64>() / n as f64;
        let sd = (points.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        if !(sd > 0.0) {
            return Err(Error::DegenerateSample {
                attribute: attribute.to_string(),
            });
        }
        Ok(Kde {
            points: points.to_vec(),
            bandwidth: sd * (n as f64).powf(-0.2),
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt() * self.points.len() as f64);
        norm * self.points.iter().map(|p| (-0.5 * ((x - p) / h).powi(2)).exp()).sum::<f64>()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let center = self.points[rng.random_range(0..self.points.len())];
        let z: f64 = rng.sample(StandardNormal);
        center + self.bandwidth * z
    }
}

/// Monte Carlo estimate of KL(rendered ‖ reference) between kernel density
/// fits of the two samples, clamped at zero.
pub fn kl_divergence(attribute: &str, rendered: &[f64], reference: &[f64], n_mc: usize, seed: u64) -> Result<f64> {
    if rendered.len() < KL_MIN_SAMPLES || reference.len() < KL_MIN_SAMPLES {
        return Err(Error::UndefinedMetric(format!(
            "{attribute}: KL needs {KL_MIN_SAMPLES} values per side, got {} and {}",
            rendered.len(),
            reference.len()
        )));
    }
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be positive"));
    }
    let p = Kde::fit(rendered, attribute)?;
    let q = Kde::fit(reference, attribute)?;
    let mut rng = seeded(seed);
    let mut total = 0.0;
    for _ in 0..n_mc {
        let x = p.sample(&mut rng);
        total += p.density(x).max(DENSITY_FLOOR).ln() - q.density(x).max(DENSITY_FLOOR).ln();
    }
    let raw = total / n_mc as f64;
    if raw < 0.0 {
        log::debug!("{attribute}: raw KL estimate {raw} clamped to 0");
    }
    Ok(raw.max(0.0))
}

/// Pearson correlation of the rendered series with each ground truth on
/// their shared positions. Comparisons with fewer than three shared
/// positions or a constant side are excluded.
pub fn correlations(rendered: &AttributeSeries, gt: &[AttributeSeries]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (k, g) in gt.iter().enumerate() {
        let map = g.by_position();
        let (x, y): (Vec<f64>, Vec<f64>) = rendered
            .positions
            .iter()
            .zip(&rendered.values)
            .filter_map(|(p, &r)| map.get(p).map(|&v| (r, v)))
            .unzip();
        if x.len() < PEARSON_MIN_POSITIONS {
            log::warn!("{}: ground truth {k} shares only {} positions", rendered.attribute, x.len());
            continue;
        }
        match pearson(&x, &y) {
            Some(r) => out.push(r),
            None => log::warn!("{}: constant series against ground truth {k}", rendered.attribute),
        }
    }
    if out.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "Pearson correlation of {}: no valid comparison",
            rendered.attribute
        )));
    }
    Ok(out)
}

/// Mean ± std of [`correlations`] over ground truths.
pub fn pearson_correlation(rendered: &AttributeSeries, gt: &[AttributeSeries]) -> Result<MeanStd> {
    Ok(MeanStd::of(&correlations(rendered, gt)?).expect("non-empty"))
}

/// A performance with its alignment to the piece's score.
#[derive(Clone, Copy, Debug)]
pub struct Aligned<'a> {
    pub perf: &'a Performance,
    pub align: &'a Alignment,
}

/// One piece to evaluate: a rendering and at least two human performances.
#[derive(Clone, Debug)]
pub struct PieceInput<'a> {
    pub name: String,
    pub score: &'a NoteArray,
    pub rendered: Aligned<'a>,
    pub ground_truth: Vec<Aligned<'a>>,
    pub markings: &'a [DynMarking],
}

/// Metric values of one attribute on one piece; `None` where undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PieceAttribute {
    pub attribute: Attribute,
    pub deviation: Option<MeanStd>,
    pub kl: Option<f64>,
    pub pearson: Option<MeanStd>,
    /// Per-position deviations, pooled across pieces in the summary.
    pub deviations: Vec<f64>,
    /// Per-ground-truth correlations, pooled across pieces in the summary.
    pub correlations: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PieceReport {
    pub piece: String,
    pub attributes: Vec<PieceAttribute>,
}

fn defined<T>(what: &str, attr: Attribute, r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ (Error::UndefinedMetric(_) | Error::DegenerateSample { .. })) => {
            log::warn!("{attr} {what}: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Extracts every attribute of the rendering and the ground truths and
/// computes the three metrics per attribute. The KL draw for attribute `a`
/// of piece `k` is seeded from `(cfg.seed, k, a)`.
pub fn evaluate_piece(input: &PieceInput<'_>, piece_index: u64, cfg: &MetricsConfig) -> Result<PieceReport> {
    if input.ground_truth.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "piece {:?} has {} ground-truth performances, need at least two",
            input.name,
            input.ground_truth.len()
        )));
    }
    let extract = |a: &Aligned<'_>| extract_attributes(a.perf, input.score, a.align, input.markings, cfg);
    let rendered = extract(&input.rendered)?;
    let gts = input.ground_truth.iter().map(extract).collect::<Result<Vec<_>>>()?;
    let mut attributes = Vec::new();
    for (ai, attr) in Attribute::ALL.into_iter().enumerate() {
        let Some(r) = rendered.get(&attr) else {
            continue;
        };
        let g: Vec<AttributeSeries> = gts.iter().filter_map(|m| m.get(&attr).cloned()).collect();
        let devs = defined("deviation", attr, deviations(r, &g))?.unwrap_or_default();
        let cors = defined("correlation", attr, correlations(r, &g))?.unwrap_or_default();
        let pooled: Vec<f64> = g.iter().flat_map(|s| s.values.iter().copied()).collect();
        let seed = crate::rng::mix(cfg.seed, piece_index, ai as u64);
        let kl = defined("KL", attr, kl_divergence(attr.name(), &r.values, &pooled, cfg.n_mc, seed))?;
        attributes.push(PieceAttribute {
            attribute: attr,
            deviation: MeanStd::of(&devs),
            kl,
            pearson: MeanStd::of(&cors),
            deviations: devs,
            correlations: cors,
        });
    }
    Ok(PieceReport {
        piece: input.name.clone(),
        attributes,
    })
}

/// Summary row of the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub attribute: Attribute,
    /// Over all positions of all pieces.
    pub deviation_multiple: Option<MeanStd>,
    /// Over pieces.
    pub kl_divergence: Option<MeanStd>,
    /// Over all (piece, ground truth) comparisons.
    pub pearson: Option<MeanStd>,
}

/// Nine attribute rows by three metrics, plus the per-piece breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Basis of the per-position comparisons.
    pub position_basis: String,
    pub rows: Vec<ReportRow>,
    pub pieces: Vec<PieceReport>,
}

pub const METRIC_NAMES: [&str; 3] = ["deviation_multiple", "kl_divergence", "pearson"];

impl Report {
    pub fn from_pieces(pieces: Vec<PieceReport>) -> Self {
        let rows = Attribute::ALL
            .into_iter()
            .map(|attr| {
                let entries: Vec<&PieceAttribute> = pieces
                    .iter()
                    .flat_map(|p| p.attributes.iter().filter(move |a| a.attribute == attr))
                    .collect();
                let devs: Vec<f64> = entries.iter().flat_map(|e| e.deviations.iter().copied()).collect();
                let kls: Vec<f64> = entries.iter().filter_map(|e| e.kl).collect();
                let cors: Vec<f64> = entries.iter().flat_map(|e| e.correlations.iter().copied()).collect();
                ReportRow {
                    attribute: attr,
                    deviation_multiple: MeanStd::of(&devs),
                    kl_divergence: MeanStd::of(&kls),
                    pearson: MeanStd::of(&cors),
                }
            })
            .collect();
        Report {
            position_basis: "joint_onset".into(),
            rows,
            pieces,
        }
    }

    pub fn row(&self, attr: Attribute) -> &ReportRow {
        self.rows.iter().find(|r| r.attribute == attr).expect("every attribute has a row")
    }

    /// One row per attribute with mean and std per metric; absent values
    /// are empty cells.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["attribute".to_string()];
        for m in METRIC_NAMES {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.attribute.name().to_string()];
            for v in [row.deviation_multiple, row.kl_divergence, row.pearson] {
                match v {
                    Some(ms) => rec.extend([ms.mean.to_string(), ms.std.to_string()]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
        finish(w)
    }

    /// Per-piece breakdown: one row per (piece, attribute).
    pub fn pieces_to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "piece",
            "attribute",
            "deviation_mean",
            "deviation_std",
            "kl",
            "pearson_mean",
            "pearson_std",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for p in &self.pieces {
            for a in &p.attributes {
                w.write_record([
                    p.piece.clone(),
                    a.attribute.name().to_string(),
                    opt(a.deviation.map(|m| m.mean)),
                    opt(a.deviation.map(|m| m.std)),
                    opt(a.kl),
                    opt(a.pearson.map(|m| m.mean)),
                    opt(a.pearson.map(|m| m.std)),
                ])?;
            }
        }
        finish(w)
    }

    /// Three metric blocks, each keyed by the nine attributes in order;
    /// absent values are `null`.
    pub fn to_json(&self) -> serde_json::Value {
        let block = |get: fn(&ReportRow) -> Option<MeanStd>| {
            let mut m = serde_json::Map::new();
            for row in &self.rows {
                m.insert(row.attribute.name().to_string(), serde_json::to_value(get(row)).unwrap());
            }
            serde_json::Value::Object(m)
        };
        serde_json::json!({
            "position_basis": self.position_basis,
            "deviation_multiple": block(|r| r.deviation_multiple),
            "kl_divergence": block(|r| r.kl_divergence),
            "pearson": block(|r| r.pearson),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notes::{PedalEvent, ScoreNote};

    fn score(notes: &[(f64, u8, u32)]) -> NoteArray {
        NoteArray::new(
            notes
                .iter()
                .enumerate()
                .map(|(i, &(onset, pitch, voice))| ScoreNote {
                    id: format!("n{i}"),
                    onset_beats: onset,
                    duration_beats: 1.0,
                    pitch,
                    voice,
                })
                .collect(),
        )
        .unwrap()
    }

    /// Performance with ids equal to the score ids, one entry per note:
    /// (onset, duration, velocity).
    fn perf(score: &NoteArray, notes: &[(f64, f64, u8)], pedals: Vec<PedalEvent>) -> (Performance, Alignment) {
        let ps = score
            .notes()
            .iter()
            .zip(notes)
            .map(|(s, &(onset_sec, duration_sec, velocity))| PerfNote {
                id: s.id.clone(),
                onset_sec,
                duration_sec,
                pitch: s.pitch,
                velocity,
            })
            .collect();
        let perf = Performance::new(ps, pedals).unwrap();
        let align = Alignment::by_id(score, &perf);
        (perf, align)
    }

    fn series(attr: Attribute, values: &[f64]) -> AttributeSeries {
        AttributeSeries::new(
            attr,
            values.iter().enumerate().map(|(i, &v)| (Position::Beat(i as f64), v)),
        )
    }

    #[test]
    fn uniform_tempo_and_chord_velocity() {
        let s = score(&[(0.0, 60, 1), (0.0, 64, 1), (0.0, 67, 1), (1.0, 60, 1), (2.0, 60, 1)]);
        let (p, a) = perf(
            &s,
            &[(1.0, 0.4, 60), (1.0, 0.4, 70), (1.0, 0.4, 80), (1.5, 0.4, 50), (2.0, 0.4, 50)],
            vec![],
        );
        let (tempo, vel) = tempo_velocity_curves(&p, &s, &a).unwrap();
        assert_eq!(tempo.len(), 2);
        for v in &tempo.values {
            assert!((v - 120.0).abs() < 1e-9);
        }
        assert_eq!(vel.values, [70.0, 50.0, 50.0]);
        let single = score(&[(0.0, 60, 1)]);
        let (p1, a1) = perf(&single, &[(0.0, 1.0, 60)], vec![]);
        assert!(matches!(tempo_velocity_curves(&p1, &single, &a1), Err(Error::InsufficientOnsets)));
    }

    #[test]
    fn asynchrony_examples() {
        let s = score(&[(0.0, 60, 1), (0.0, 72, 1), (1.0, 60, 1), (1.0, 64, 1), (1.0, 67, 1), (2.0, 60, 1)]);
        let (p, a) = perf(
            &s,
            &[
                (1.01, 0.5, 60),
                (1.0, 0.5, 60),
                (2.0, 0.5, 60),
                (2.02, 0.5, 60),
                (2.05, 0.5, 60),
                (3.0, 0.5, 60),
            ],
            vec![],
        );
        let (delta, cor) = asynchrony_features(&p, &s, &a, 2);
        assert_eq!(delta.len(), 2);
        assert!((delta.values[0] - 0.01).abs() < 1e-12);
        assert!((delta.values[1] - 0.05).abs() < 1e-12);
        // higher pitch 10 ms earlier
        assert!((cor.values[0] + 1.0).abs() < 1e-12);
        let (_, strict) = asynchrony_features(&p, &s, &a, 3);
        assert_eq!(strict.len(), 1);
        // simultaneous chord
        let (p2, a2) = perf(&s, &[(1.0, 0.5, 60); 6], vec![]);
        let (d2, c2) = asynchrony_features(&p2, &s, &a2, 2);
        assert_eq!(d2.values[0], 0.0);
        assert_eq!(c2.len(), 0);
        assert_eq!(c2.dropped, 2);
    }

    #[test]
    fn key_overlap_examples() {
        let s = score(&[(0.0, 60, 1), (1.0, 62, 1), (2.0, 64, 1), (2.0, 67, 1)]);
        let (p, a) = perf(&s, &[(0.0, 1.2, 60), (1.0, 1.0, 60), (2.0, 1.0, 60), (2.0, 1.0, 60)], vec![]);
        let kor = key_overlap_ratio(&p, &s, &a);
        assert_eq!(kor.len(), 2);
        assert!((kor.values[0] - 0.2).abs() < 1e-12);
        assert_eq!(kor.values[1], 0.0);
        assert_eq!(kor.positions[0], Position::Note("n1".into()));
    }

    #[test]
    fn pedal_sampling() {
        let s = score(&[(0.0, 60, 1), (1.0, 62, 1)]);
        let ev = PedalEvent {
            time_sec: 0.5,
            value: 100,
            kind: PedalKind::Sustain,
        };
        let (p, a) = perf(&s, &[(0.4, 0.1, 60), (0.6, 0.1, 60)], vec![ev]);
        assert_eq!(pedal_onset_values(&p, &s, &a).values, [0.0, 100.0]);
        let (p, a) = perf(&s, &[(0.4, 0.1, 60), (0.6, 0.1, 60)], vec![]);
        assert_eq!(pedal_onset_values(&p, &s, &a).values, [0.0, 0.0]);
    }

    #[test]
    fn dynamics_examples() {
        let s = score(&[(0.0, 60, 1), (1.0, 60, 1), (2.0, 60, 1), (3.0, 60, 1), (4.0, 60, 1), (5.0, 60, 1)]);
        let (p, a) = perf(
            &s,
            &[(0.0, 0.5, 50), (1.0, 0.5, 80), (2.0, 0.5, 50), (3.0, 0.5, 40), (4.0, 0.5, 50), (5.0, 0.5, 60)],
            vec![],
        );
        let marks = parse_markings(
            "onset_beats,kind,value,end_beats\n0,constant,p,\n1,constant,f,\n2,constant,p,\n3,hairpin,cresc,5\n",
        )
        .unwrap();
        let d = dynamics_features(&p, &s, &a, &marks).unwrap();
        // p(50) -> f(80) -> p(50, 40, 50, 60 averaged to 50)
        assert_eq!(d.agr.unwrap().values, [1.0, 1.0]);
        assert_eq!(d.con.unwrap().values, [1.0]);
        let ramp = d.ramp_cor.unwrap();
        assert!((ramp.values[0] - 1.0).abs() < 1e-12);
        let none = dynamics_features(&p, &s, &a, &[]).unwrap();
        assert!(none.agr.is_none() && none.con.is_none() && none.ramp_cor.is_none());
        assert!(parse_markings("onset_beats,kind,value,end_beats\n1,hairpin,cresc,1\n").is_err());
        assert!(parse_markings("onset_beats,kind,value,end_beats\n1,constant,loud,\n").is_err());
        let round = parse_markings(&markings_to_csv(&marks).unwrap()).unwrap();
        assert_eq!(round, marks);
    }

    #[test]
    fn decrescendo_flips_sign() {
        let s = score(&[(0.0, 60, 1), (1.0, 60, 1), (2.0, 60, 1)]);
        let (p, a) = perf(&s, &[(0.0, 0.5, 60), (1.0, 0.5, 50), (2.0, 0.5, 40)], vec![]);
        let marks = [DynMarking {
            onset_beats: 0.0,
            kind: MarkingKind::Decrescendo { end_beats: 2.0 },
        }];
        let d = dynamics_features(&p, &s, &a, &marks).unwrap();
        assert!((d.ramp_cor.unwrap().values[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deviation_examples() {
        let gt = [
            series(Attribute::TempoCurve, &[100.0]),
            series(Attribute::TempoCurve, &[120.0]),
        ];
        let r = deviation_multiple(&series(Attribute::TempoCurve, &[90.0]), &gt).unwrap();
        assert_eq!(r.mean, -2.0);
        assert_eq!(r.std, 0.0);
        let at_mean = deviation_multiple(&series(Attribute::TempoCurve, &[110.0]), &gt).unwrap();
        assert_eq!(at_mean.mean, 0.0);
        let plus = deviation_multiple(&series(Attribute::TempoCurve, &[120.0]), &gt).unwrap();
        assert_eq!(plus.mean, 1.0);
        assert!(matches!(
            deviation_multiple(&series(Attribute::TempoCurve, &[1.0]), &gt[..1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pearson_examples() {
        let gt = series(Attribute::VelocityCurve, &[1.0, 3.0, 2.0, 5.0]);
        let neg: Vec<f64> = gt.values.iter().map(|v| -v).collect();
        let aff: Vec<f64> = gt.values.iter().map(|v| 2.0 * v + 3.0).collect();
        let r = |v: &[f64]| pearson_correlation(&series(Attribute::VelocityCurve, v), std::slice::from_ref(&gt)).unwrap().mean;
        assert!((r(&gt.values) - 1.0).abs() < 1e-12);
        assert!((r(&neg) + 1.0).abs() < 1e-12);
        assert!((r(&aff) - 1.0).abs() < 1e-12);
        let flat = series(Attribute::VelocityCurve, &[2.0; 4]);
        assert!(pearson_correlation(&flat, &[gt]).is_err());
    }

    #[test]
    fn kl_contract() {
        let mut rng = seeded(3);
        let a: Vec<f64> = (0..500).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..500).map(|_| 5.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        // the plug-in estimate sits well above the analytic 12.5 because the
        // reference density's left tail is set by its few smallest points
        let kl = kl_divergence("x", &a, &b, 300, 0).unwrap();
        assert!(kl > 12.5 && kl < 27.7, "{kl}");
        assert!(kl_divergence("x", &a, &a, 300, 0).unwrap() < 0.05);
        assert_eq!(kl_divergence("x", &a, &b, 300, 9).unwrap(), kl_divergence("x", &a, &b, 300, 9).unwrap());
        let far: Vec<f64> = a.iter().map(|v| v + 1e4).collect();
        let big = kl_divergence("x", &a, &far, 300, 0).unwrap();
        assert!(big.is_finite() && big > 20.0);
        assert!(matches!(
            kl_divergence("velocity", &[1.0; 10], &a, 300, 0),
            Err(Error::DegenerateSample { attribute }) if attribute == "velocity"
        ));
        assert!(matches!(kl_divergence("x", &a[..4], &a, 300, 0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn report_layout() {
        let s = score(&[(0.0, 60, 1), (0.0, 64, 2), (1.0, 62, 1), (2.0, 64, 1), (3.0, 65, 1), (4.0, 67, 1)]);
        let mk = |shift: f64, vel: u8| {
            let notes: Vec<(f64, f64, u8)> = (0..6)
                .map(|i| {
                    let beat = s.notes()[i].onset_beats;
                    (beat * (0.5 + shift) + 0.003 * i as f64, 0.45, vel + 3 * i as u8)
                })
                .collect();
            perf(&s, &notes, vec![])
        };
        let (rp, ra) = mk(0.0, 60);
        let gts = [mk(0.05, 50), mk(-0.05, 70), mk(0.02, 64)];
        let marks = [DynMarking {
            onset_beats: 0.0,
            kind: MarkingKind::Constant(3),
        }];
        let input = PieceInput {
            name: "toy".into(),
            score: &s,
            rendered: Aligned { perf: &rp, align: &ra },
            ground_truth: gts.iter().map(|(p, a)| Aligned { perf: p, align: a }).collect(),
            markings: &marks,
        };
        let report = Report::from_pieces(vec![evaluate_piece(&input, 0, &MetricsConfig::default()).unwrap()]);
        assert_eq!(report.rows.len(), 9);
        let csv = report.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 10);
        let json = report.to_json();
        for m in METRIC_NAMES {
            assert_eq!(json[m].as_object().unwrap().len(), 9);
        }
        assert!(report.row(Attribute::TempoCurve).deviation_multiple.is_some());
        assert!(report.row(Attribute::DynRampCor).deviation_multiple.is_none());
    }
}
