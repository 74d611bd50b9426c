//! Performance, score and perceptual codecs: extraction, inversion,
//! segmentation and mixup.
//!
//! Codecs are row-major `rows × n` matrices whose columns follow the score
//! note order. Values here are always in physical units; standardization for
//! the diffusion model happens in [`crate::denoiser`].

use std::path::Path;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::notes::{
    check_header, csv_reader, field, finish, joint_onsets, read_file, write_file, Alignment, NoteArray, OnsetGroup,
    PedalEvent, PedalKind, PerfNote, Performance,
};

pub const P_ROWS: usize = 5;
pub const S_ROWS: usize = 4;
pub const C_ROWS: usize = 7;

pub const BEAT_PERIOD: usize = 0;
pub const VELOCITY: usize = 1;
pub const TIMING: usize = 2;
pub const ARTICULATION: usize = 3;
pub const PEDAL: usize = 4;

pub const P_NAMES: [&str; P_ROWS] = ["beat_period", "velocity", "timing", "articulation", "pedal"];
pub const S_NAMES: [&str; S_ROWS] = ["onset_beats", "duration_beats", "pitch", "voice"];
pub const C_NAMES: [&str; C_ROWS] = [
    "melodiousness",
    "articulation",
    "rhythm_complexity",
    "rhythm_stability",
    "dissonance",
    "tonal_stability",
    "minorness",
];

/// Default segment width in notes.
pub const SEGMENT_LEN: usize = 200;

/// Per-note performance parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PCodec {
    /// `5 × n`, rows indexed by [`BEAT_PERIOD`] … [`PEDAL`].
    pub values: Array2<f64>,
    pub note_ids: Vec<String>,
    /// True where the column comes from a performed note.
    pub mask: Vec<bool>,
    /// Performed time of the first joint onset's grid position.
    pub start_sec: f64,
}

impl PCodec {
    pub fn len(&self) -> usize {
        self.note_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.note_ids.is_empty()
    }

    pub fn row(&self, r: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(r)
    }

    /// Checks shape and the positivity/range invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.note_ids.len();
        if self.values.dim() != (P_ROWS, n) || self.mask.len() != n {
            return Err(Error::shape(
                format!("{P_ROWS}x{n}"),
                format!("{:?} with {} mask entries", self.values.dim(), self.mask.len()),
            ));
        }
        for (j, id) in self.note_ids.iter().enumerate() {
            let col = self.values.column(j);
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite p_codec value at note {id:?}")));
            }
            if col[BEAT_PERIOD] <= 0.0 {
                return Err(Error::NonPositiveBeatPeriod { note_id: id.clone() });
            }
            if col[ARTICULATION] <= 0.0 {
                return Err(Error::invalid(format!("non-positive articulation at note {id:?}")));
            }
            for r in [VELOCITY, PEDAL] {
                if !(0.0..=1.0).contains(&col[r]) {
                    return Err(Error::invalid(format!("{} out of [0, 1] at note {id:?}", P_NAMES[r])));
                }
            }
        }
        Ok(())
    }
}

/// Score parameters per note.
#[derive(Clone, Debug, PartialEq)]
pub struct SCodec {
    /// `4 × n`: onset_beats, duration_beats, pitch, voice.
    pub values: Array2<f64>,
    pub note_ids: Vec<String>,
}

impl SCodec {
    pub fn len(&self) -> usize {
        self.note_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.note_ids.is_empty()
    }
}

/// Perceptual features broadcast to notes.
#[derive(Clone, Debug, PartialEq)]
pub struct CCodec {
    /// `7 × n`, rows named by [`C_NAMES`].
    pub values: Array2<f64>,
    pub note_ids: Vec<String>,
}

impl CCodec {
    /// Every column set to `features`.
    pub fn constant(note_ids: Vec<String>, features: [f64; C_ROWS]) -> Self {
        let n = note_ids.len();
        let values = Array2::from_shape_fn((C_ROWS, n), |(r, _)| features[r]);
        CCodec { values, note_ids }
    }

    pub fn len(&self) -> usize {
        self.note_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.note_ids.is_empty()
    }

    /// Index of a feature by name.
    pub fn feature_index(name: &str) -> Option<usize> {
        C_NAMES.iter().position(|n| *n == name)
    }
}

/// One 15 s window of precomputed perceptual features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureWindow {
    pub start_sec: f64,
    pub end_sec: f64,
    pub values: [f64; C_ROWS],
}

/// Windows sorted by `start_sec`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureWindows(pub Vec<FeatureWindow>);

/// A fixed-width slice of the aligned codecs.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub p: Array2<f64>,
    pub s: Array2<f64>,
    pub c: Array2<f64>,
    /// True for real columns, false for padding.
    pub pad_mask: Vec<bool>,
    /// Observed flags from the p_codec mask, false in padding.
    pub observed: Vec<bool>,
    /// Ids of the real columns.
    pub note_ids: Vec<String>,
}

impl Segment {
    pub fn width(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn real_len(&self) -> usize {
        self.note_ids.len()
    }
}

/// Score onsets of the groups and the group-mean of `row` per group.
fn group_means(groups: &[OnsetGroup], values: &Array2<f64>, row: usize) -> Vec<f64> {
    groups
        .iter()
        .map(|g| {
            let first = values[[row, g.indices[0]]];
            if g.indices.iter().all(|&i| values[[row, i]] == first) {
                first
            } else {
                g.indices.iter().map(|&i| values[[row, i]]).sum::<f64>() / g.indices.len() as f64
            }
        })
        .collect()
}

/// Extracts the performance codec of `perf` against `score`.
///
/// Score notes without a performed counterpart are filled (mask false):
/// their beat period is the group's, or the surrounding matched span's for a
/// fully unmatched group; timing 0, articulation 1, velocity the group mean
/// (0.5 if none), pedal carried over from the previous column.
pub fn extract_p_codec(score: &NoteArray, perf: &Performance, align: &Alignment) -> Result<PCodec> {
    align.validate(score, Some(perf))?;
    let lookup = align.lookup();
    let index = perf.index();
    let extra = perf.notes().len() - lookup.len();
    if extra > 0 {
        log::warn!("ignoring {extra} performed note(s) without a score counterpart");
    }
    let notes = score.notes();
    let matched: Vec<Option<&PerfNote>> = notes
        .iter()
        .map(|n| lookup.get(n.id.as_str()).map(|pid| &perf.notes()[index[pid]]))
        .collect();

    let groups = joint_onsets(score);
    let mean_onset: Vec<Option<f64>> = groups
        .iter()
        .map(|g| {
            let on: Vec<f64> = g.indices.iter().filter_map(|&i| matched[i].map(|p| p.onset_sec)).collect();
            (!on.is_empty()).then(|| on.iter().sum::<f64>() / on.len() as f64)
        })
        .collect();
    let anchors: Vec<usize> = (0..groups.len()).filter(|&k| mean_onset[k].is_some()).collect();
    if anchors.len() < 2 {
        return Err(Error::InsufficientOnsets);
    }

    // beat period of each matched span, from anchor a to the next anchor
    let mut span_bp = Vec::with_capacity(anchors.len());
    for w in anchors.windows(2) {
        let (a, b) = (w[0], w[1]);
        let bp = (mean_onset[b].unwrap() - mean_onset[a].unwrap()) / (groups[b].onset_beats - groups[a].onset_beats);
        if !(bp > 0.0) || !bp.is_finite() {
            return Err(Error::NonPositiveBeatPeriod {
                note_id: groups[a].note_ids[0].clone(),
            });
        }
        span_bp.push(bp);
    }
    // the last anchor has no successor
    span_bp.push(*span_bp.last().unwrap());

    let mut group_bp = vec![0.0; groups.len()];
    let mut span = 0;
    for (k, bp) in group_bp.iter_mut().enumerate() {
        while span + 1 < anchors.len() && anchors[span + 1] <= k {
            span += 1;
        }
        *bp = span_bp[span];
    }
    let first = anchors[0];
    let start_sec =
        mean_onset[first].unwrap() - group_bp[first] * (groups[first].onset_beats - groups[0].onset_beats);

    let n = notes.len();
    let mut values = Array2::zeros((P_ROWS, n));
    let mut mask = vec![false; n];
    let mut last_pedal = 0.0;
    for (k, g) in groups.iter().enumerate() {
        let bp = group_bp[k];
        let vels: Vec<f64> = g
            .indices
            .iter()
            .filter_map(|&i| matched[i].map(|p| f64::from(p.velocity) / 127.0))
            .collect();
        let fill_vel = if vels.is_empty() {
            0.5
        } else {
            vels.iter().sum::<f64>() / vels.len() as f64
        };
        for &i in &g.indices {
            let mut col = values.column_mut(i);
            col[BEAT_PERIOD] = bp;
            match matched[i] {
                Some(p) => {
                    col[VELOCITY] = f64::from(p.velocity) / 127.0;
                    col[TIMING] = mean_onset[k].unwrap() - p.onset_sec;
                    col[ARTICULATION] = p.duration_sec / (notes[i].duration_beats * bp);
                    col[PEDAL] = f64::from(perf.pedal_at(PedalKind::Sustain, p.onset_sec)) / 127.0;
                    mask[i] = true;
                }
                None => {
                    col[VELOCITY] = fill_vel;
                    col[TIMING] = 0.0;
                    col[ARTICULATION] = 1.0;
                    col[PEDAL] = last_pedal;
                }
            }
            last_pedal = col[PEDAL];
        }
    }
    Ok(PCodec {
        values,
        note_ids: score.ids().map(str::to_string).collect(),
        mask,
        start_sec,
    })
}

fn check_aligned(p: &PCodec, s: &SCodec) -> Result<()> {
    if p.note_ids != s.note_ids || p.values.dim() != (P_ROWS, s.len()) || s.values.nrows() != S_ROWS {
        return Err(Error::shape(
            format!("p_codec 5x{0} and s_codec 4x{0} over the same notes", s.len()),
            format!("{:?} and {:?}", p.values.dim(), s.values.dim()),
        ));
    }
    Ok(())
}

/// Groups s_codec columns by onset; columns must be in score order.
fn s_groups(s: &SCodec) -> Vec<OnsetGroup> {
    let mut groups: Vec<OnsetGroup> = Vec::new();
    for (i, id) in s.note_ids.iter().enumerate() {
        let onset = s.values[[0, i]];
        match groups.last_mut() {
            Some(g) if onset - g.onset_beats <= crate::notes::ONSET_TOLERANCE => {
                g.note_ids.push(id.clone());
                g.indices.push(i);
            }
            _ => groups.push(OnsetGroup {
                onset_beats: onset,
                note_ids: vec![id.clone()],
                indices: vec![i],
            }),
        }
    }
    groups
}

/// Performed onset (seconds) for every column, filled notes included.
///
/// Groups use the mean beat period of their notes, so codecs generated
/// without group constancy still invert to a monotone grid.
pub fn performed_onsets(p: &PCodec, s: &SCodec) -> Result<Vec<f64>> {
    check_aligned(p, s)?;
    let groups = s_groups(s);
    let bps = group_means(&groups, &p.values, BEAT_PERIOD);
    let mut onsets = vec![0.0; s.len()];
    let mut grid = p.start_sec;
    for (k, g) in groups.iter().enumerate() {
        if k > 0 {
            grid += bps[k - 1] * (g.onset_beats - groups[k - 1].onset_beats);
        }
        for &i in &g.indices {
            onsets[i] = grid - p.values[[TIMING, i]];
        }
    }
    Ok(onsets)
}

/// Options for [`invert_p_codec_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct InvertOptions {
    /// Also emit notes whose mask is false.
    pub include_filled: bool,
}

/// Rebuilds a performance from codecs; see [`invert_p_codec_with`].
pub fn invert_p_codec(p: &PCodec, s: &SCodec) -> Result<Performance> {
    invert_p_codec_with(p, s, InvertOptions::default())
}

/// Rebuilds performed notes (ids equal to score ids) and a sustain stream
/// sampled at the emitted onsets. Negative onsets are clamped to 0.
pub fn invert_p_codec_with(p: &PCodec, s: &SCodec, opts: InvertOptions) -> Result<Performance> {
    check_aligned(p, s)?;
    for (j, id) in p.note_ids.iter().enumerate() {
        if !(p.values[[BEAT_PERIOD, j]] > 0.0) {
            return Err(Error::NonPositiveBeatPeriod { note_id: id.clone() });
        }
        if !(p.values[[ARTICULATION, j]] > 0.0) {
            return Err(Error::invalid(format!("non-positive articulation at note {id:?}")));
        }
    }
    let onsets = performed_onsets(p, s)?;
    let mut notes = Vec::new();
    let mut pedal_at_onset = Vec::new();
    for (j, id) in p.note_ids.iter().enumerate() {
        if !(p.mask[j] || opts.include_filled) {
            continue;
        }
        let col = p.values.column(j);
        let onset = onsets[j].max(0.0);
        let duration = col[ARTICULATION] * s.values[[1, j]] * col[BEAT_PERIOD];
        if !(duration > 0.0) || !onset.is_finite() || !duration.is_finite() {
            return Err(Error::invalid(format!("cannot invert note {id:?}")));
        }
        let velocity = (127.0 * col[VELOCITY]).round().clamp(1.0, 127.0) as u8;
        let pedal = (127.0 * col[PEDAL]).round().clamp(0.0, 127.0) as u8;
        notes.push(PerfNote {
            id: id.clone(),
            onset_sec: onset,
            duration_sec: duration,
            pitch: s.values[[2, j]].round().clamp(0.0, 127.0) as u8,
            velocity,
        });
        pedal_at_onset.push((onset, pedal));
    }
    pedal_at_onset.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pedals = Vec::new();
    let mut current = 0u8;
    for (t, v) in pedal_at_onset {
        if v != current {
            pedals.push(PedalEvent {
                time_sec: t,
                value: v,
                kind: PedalKind::Sustain,
            });
            current = v;
        }
    }
    Performance::new(notes, pedals)
}

pub fn build_s_codec(score: &NoteArray) -> SCodec {
    let notes = score.notes();
    let values = Array2::from_shape_fn((S_ROWS, notes.len()), |(r, j)| {
        let n = &notes[j];
        match r {
            0 => n.onset_beats,
            1 => n.duration_beats,
            2 => f64::from(n.pitch),
            _ => f64::from(n.voice),
        }
    });
    SCodec {
        values,
        note_ids: score.ids().map(str::to_string).collect(),
    }
}

/// Assigns each note the mean of all windows containing its performed onset,
/// or the nearest window when none does.
pub fn broadcast_c_codec(windows: &FeatureWindows, note_ids: &[String], perf_onsets: &[f64]) -> Result<CCodec> {
    if windows.0.is_empty() {
        return Err(Error::invalid("no feature windows"));
    }
    if note_ids.len() != perf_onsets.len() {
        return Err(Error::shape(note_ids.len(), perf_onsets.len()));
    }
    let mut values = Array2::zeros((C_ROWS, note_ids.len()));
    for (j, &t) in perf_onsets.iter().enumerate() {
        let covering: Vec<&FeatureWindow> =
            windows.0.iter().filter(|w| w.start_sec <= t && t < w.end_sec).collect();
        let col: [f64; C_ROWS] = if covering.is_empty() {
            let dist = |w: &FeatureWindow| {
                if t < w.start_sec {
                    w.start_sec - t
                } else {
                    t - w.end_sec
                }
            };
            windows
                .0
                .iter()
                .min_by(|a, b| dist(a).total_cmp(&dist(b)))
                .unwrap()
                .values
        } else {
            std::array::from_fn(|r| covering.iter().map(|w| w.values[r]).sum::<f64>() / covering.len() as f64)
        };
        for r in 0..C_ROWS {
            values[[r, j]] = col[r];
        }
    }
    Ok(CCodec {
        values,
        note_ids: note_ids.to_vec(),
    })
}

/// Cuts aligned codecs into consecutive windows of `n` columns, zero-padding
/// the last one.
pub fn segment(p: &PCodec, s: &SCodec, c: &CCodec, n: usize) -> Result<Vec<Segment>> {
    check_aligned(p, s)?;
    segment_parts(Some(p), s, c, n)
}

/// Like [`segment`] without a performance: the p rows are zero. Used to
/// prepare conditions for generation.
pub fn segment_conditions(s: &SCodec, c: &CCodec, n: usize) -> Result<Vec<Segment>> {
    segment_parts(None, s, c, n)
}

fn segment_parts(p: Option<&PCodec>, s: &SCodec, c: &CCodec, n: usize) -> Result<Vec<Segment>> {
    if n == 0 {
        return Err(Error::invalid("segment length must be positive"));
    }
    if c.note_ids != s.note_ids || c.values.dim() != (C_ROWS, s.len()) {
        return Err(Error::shape(format!("c_codec 7x{}", s.len()), format!("{:?}", c.values.dim())));
    }
    let total = s.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + n).min(total);
        let real = end - start;
        let mut pp = Array2::zeros((P_ROWS, n));
        let mut ss = Array2::zeros((S_ROWS, n));
        let mut cc = Array2::zeros((C_ROWS, n));
        let mut observed = vec![false; n];
        if let Some(p) = p {
            pp.slice_mut(s![.., ..real]).assign(&p.values.slice(s![.., start..end]));
            observed[..real].copy_from_slice(&p.mask[start..end]);
        }
        ss.slice_mut(s![.., ..real]).assign(&s.values.slice(s![.., start..end]));
        cc.slice_mut(s![.., ..real]).assign(&c.values.slice(s![.., start..end]));
        let mut pad_mask = vec![false; n];
        pad_mask[..real].iter_mut().for_each(|m| *m = true);
        out.push(Segment {
            p: pp,
            s: ss,
            c: cc,
            pad_mask,
            observed,
            note_ids: s.note_ids[start..end].to_vec(),
        });
        start = end;
    }
    Ok(out)
}

/// Concatenates the real columns of consecutive segments.
pub fn concat_real_columns(parts: &[&Array2<f64>], real: &[usize]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().zip(real).map(|(a, &r)| a.slice(s![.., ..r])).collect();
    ndarray::concatenate(Axis(1), &views).expect("segments share the row count")
}

/// Convex combination `λ·a + (1−λ)·b` of two performances of one score
/// segment and their perceptual conditions.
pub fn mixup(a: &Segment, b: &Segment, lambda: f64) -> Result<Segment> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixup factor {lambda} outside [0, 1]")));
    }
    if a.s != b.s || a.pad_mask != b.pad_mask {
        return Err(Error::MismatchedSegments);
    }
    let mix = |x: &Array2<f64>, y: &Array2<f64>| {
        if lambda == 1.0 {
            x.clone()
        } else if lambda == 0.0 {
            y.clone()
        } else {
            x * lambda + y * (1.0 - lambda)
        }
    };
    Ok(Segment {
        p: mix(&a.p, &b.p),
        s: a.s.clone(),
        c: mix(&a.c, &b.c),
        pad_mask: a.pad_mask.clone(),
        observed: a.observed.iter().zip(&b.observed).map(|(x, y)| *x && *y).collect(),
        note_ids: a.note_ids.clone(),
    })
}

const START_PREFIX: &str = "# start_sec=";

pub fn p_codec_to_csv(p: &PCodec) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["note_id"];
    header.extend(P_NAMES);
    header.push("mask");
    w.write_record(&header)?;
    for (j, id) in p.note_ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(p.values.column(j).iter().map(f64::to_string));
        rec.push(p.mask[j].to_string());
        w.write_record(&rec)?;
    }
    Ok(format!("{START_PREFIX}{}\n{}", p.start_sec, finish(w)?))
}

/// Parses the p_codec CSV. An optional first line `# start_sec=<value>` sets
/// [`PCodec::start_sec`] (0 when absent).
pub fn parse_p_codec(text: &str) -> Result<PCodec> {
    let (start_sec, body) = match text.strip_prefix(START_PREFIX) {
        Some(rest) => {
            let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
            let v = line.trim().parse().map_err(|_| Error::Parse {
                row: 0,
                message: format!("bad start_sec {line:?}"),
            })?;
            (v, body)
        }
        None => (0.0, text),
    };
    let mut header = vec!["note_id"];
    header.extend(P_NAMES);
    header.push("mask");
    let (ids, cols, extra) = parse_matrix(body, &header, P_ROWS, true)?;
    let mask = extra
        .into_iter()
        .enumerate()
        .map(|(i, m)| match m.as_str() {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(Error::Parse {
                row: i + 1,
                message: format!("bad mask {m:?}"),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PCodec {
        values: cols,
        note_ids: ids,
        mask,
        start_sec,
    })
}

fn parse_matrix(text: &str, header: &[&str], rows: usize, has_extra: bool) -> Result<(Vec<String>, Array2<f64>, Vec<String>)> {
    let mut rdr = csv_reader(text);
    check_header(&mut rdr, header)?;
    let mut ids = Vec::new();
    let mut flat = Vec::new();
    let mut extra = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        ids.push(rec.get(0).unwrap_or("").to_string());
        for r in 0..rows {
            let v: f64 = field(&rec, r + 1, row, header[r + 1])?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("non-finite {}", header[r + 1]),
                });
            }
            flat.push(v);
        }
        if has_extra {
            extra.push(rec.get(rows + 1).unwrap_or("").to_string());
        }
    }
    let n = ids.len();
    let values = Array2::from_shape_vec((n, rows), flat)
        .expect("row-major records")
        .reversed_axes()
        .as_standard_layout()
        .into_owned();
    Ok((ids, values, extra))
}

fn matrix_to_csv(ids: &[String], values: &Array2<f64>, names: &[&str]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["note_id"];
    header.extend(names);
    w.write_record(&header)?;
    for (j, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(values.column(j).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    finish(w)
}

pub fn s_codec_to_csv(s: &SCodec) -> Result<String> {
    matrix_to_csv(&s.note_ids, &s.values, &S_NAMES)
}

pub fn parse_s_codec(text: &str) -> Result<SCodec> {
    let mut header = vec!["note_id"];
    header.extend(S_NAMES);
    let (note_ids, values, _) = parse_matrix(text, &header, S_ROWS, false)?;
    Ok(SCodec { values, note_ids })
}

pub fn c_codec_to_csv(c: &CCodec) -> Result<String> {
    matrix_to_csv(&c.note_ids, &c.values, &C_NAMES)
}

pub fn parse_c_codec(text: &str) -> Result<CCodec> {
    let mut header = vec!["note_id"];
    header.extend(C_NAMES);
    let (note_ids, values, _) = parse_matrix(text, &header, C_ROWS, false)?;
    Ok(CCodec { values, note_ids })
}

pub fn parse_feature_windows(text: &str) -> Result<FeatureWindows> {
    let mut header = vec!["start_sec", "end_sec"];
    header.extend(C_NAMES);
    let mut rdr = csv_reader(text);
    check_header(&mut rdr, &header)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let start_sec: f64 = field(&rec, 0, row, "start_sec")?;
        let end_sec: f64 = field(&rec, 1, row, "end_sec")?;
        if !(end_sec > start_sec) {
            return Err(Error::Parse {
                row,
                message: "window end must follow its start".into(),
            });
        }
        let mut values = [0.0; C_ROWS];
        for (r, v) in values.iter_mut().enumerate() {
            *v = field(&rec, r + 2, row, C_NAMES[r])?;
        }
        out.push(FeatureWindow {
            start_sec,
            end_sec,
            values,
        });
    }
    out.sort_by(|a, b| a.start_sec.total_cmp(&b.start_sec));
    Ok(FeatureWindows(out))
}

macro_rules! file_io {
    ($load:ident, $save:ident, $ty:ty, $parse:ident, $write:ident) => {
        pub fn $load(path: impl AsRef<Path>) -> Result<$ty> {
            $parse(&read_file(path.as_ref())?)
        }

        pub fn $save(value: &$ty, path: impl AsRef<Path>) -> Result<()> {
            write_file(path.as_ref(), &$write(value)?)
        }
    };
}

file_io!(load_p_codec, save_p_codec, PCodec, parse_p_codec, p_codec_to_csv);
file_io!(load_s_codec, save_s_codec, SCodec, parse_s_codec, s_codec_to_csv);
file_io!(load_c_codec, save_c_codec, CCodec, parse_c_codec, c_codec_to_csv);

pub fn feature_windows_to_csv(windows: &FeatureWindows) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["start_sec", "end_sec"];
    header.extend(C_NAMES);
    w.write_record(&header)?;
    for fw in &windows.0 {
        let mut rec = vec![fw.start_sec.to_string(), fw.end_sec.to_string()];
        rec.extend(fw.values.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    finish(w)
}

file_io!(
    load_feature_windows,
    save_feature_windows,
    FeatureWindows,
    parse_feature_windows,
    feature_windows_to_csv
);

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::notes::{AlignPair, ScoreNote};

    fn score(onsets: &[(f64, f64)]) -> NoteArray {
        NoteArray::new(
            onsets
                .iter()
                .enumerate()
                .map(|(i, &(onset, dur))| ScoreNote {
                    id: format!("n{i}"),
                    onset_beats: onset,
                    duration_beats: dur,
                    pitch: 40 + (i % 60) as u8,
                    voice: 1,
                })
                .collect(),
        )
        .unwrap()
    }

    fn perf(notes: &[(f64, f64, u8)], pedals: &[(f64, u8)]) -> Performance {
        Performance::new(
            notes
                .iter()
                .enumerate()
                .map(|(i, &(onset_sec, duration_sec, velocity))| PerfNote {
                    id: format!("n{i}"),
                    onset_sec,
                    duration_sec,
                    pitch: 40 + (i % 60) as u8,
                    velocity,
                })
                .collect(),
            pedals
                .iter()
                .map(|&(time_sec, value)| PedalEvent {
                    time_sec,
                    value,
                    kind: PedalKind::Sustain,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_onsets_half_second_apart() {
        let sc = score(&[(0.0, 1.0), (1.0, 1.0)]);
        let pf = perf(&[(0.0, 0.4, 127), (0.5, 0.5, 64)], &[]);
        let p = extract_p_codec(&sc, &pf, &Alignment::by_id(&sc, &pf)).unwrap();
        assert_eq!(p.row(BEAT_PERIOD).to_vec(), [0.5, 0.5]);
        assert_eq!(p.row(TIMING).to_vec(), [0.0, 0.0]);
        assert_eq!(p.values[[VELOCITY, 0]], 1.0);
        assert_abs_diff_eq!(p.values[[ARTICULATION, 0]], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn single_onset_is_rejected() {
        let sc = score(&[(0.0, 1.0), (0.0, 1.0)]);
        let pf = perf(&[(0.0, 0.4, 60), (0.01, 0.4, 60)], &[]);
        let err = extract_p_codec(&sc, &pf, &Alignment::by_id(&sc, &pf)).unwrap_err();
        assert_eq!(err.to_string(), "insufficient onsets for beat period");
    }

    #[test]
    fn pedal_is_sampled_at_onsets() {
        let sc = score(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)]);
        let pf = perf(&[(0.0, 0.4, 60), (0.5, 0.4, 60), (1.0, 0.4, 60)], &[(0.5, 127), (0.9, 0)]);
        let p = extract_p_codec(&sc, &pf, &Alignment::by_id(&sc, &pf)).unwrap();
        assert_eq!(p.row(PEDAL).to_vec(), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn deleted_notes_are_filled() {
        // n1 shares beat 0 with n0, n2 is alone at beat 1 and deleted
        let sc = score(&[(0.0, 1.0), (0.0, 1.0), (1.0, 1.0), (3.0, 1.0)]);
        let pf = perf(&[(0.0, 0.5, 80), (0.0, 1.0, 1), (0.0, 1.0, 1), (1.5, 0.5, 40)], &[(0.0, 127)]);
        let mut align = Alignment::by_id(&sc, &pf);
        align.pairs[1].perf_id = None;
        align.pairs[2].perf_id = None;
        let pf = Performance::new(
            pf.notes().iter().filter(|n| n.id == "n0" || n.id == "n3").cloned().collect(),
            pf.pedal_events().to_vec(),
        )
        .unwrap();
        let p = extract_p_codec(&sc, &pf, &align).unwrap();
        assert_eq!(p.mask, [true, false, false, true]);
        // span beat period across the unmatched group at beat 1
        assert_eq!(p.row(BEAT_PERIOD).to_vec(), [0.5; 4]);
        assert_abs_diff_eq!(p.values[[VELOCITY, 1]], 80.0 / 127.0);
        assert_eq!(p.values[[VELOCITY, 2]], 0.5);
        assert_eq!(p.values[[ARTICULATION, 2]], 1.0);
        assert_eq!(p.values[[PEDAL, 2]], 1.0);

        let back = invert_p_codec_with(&p, &build_s_codec(&sc), InvertOptions { include_filled: true }).unwrap();
        assert_abs_diff_eq!(back.note("n2").unwrap().onset_sec, 0.5);
        assert_eq!(invert_p_codec(&p, &build_s_codec(&sc)).unwrap().notes().len(), 2);
    }

    #[test]
    fn constant_beat_period_inversion() {
        let sc = score(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)]);
        let s = build_s_codec(&sc);
        let mut values = Array2::zeros((P_ROWS, 3));
        values.row_mut(BEAT_PERIOD).fill(0.5);
        values.row_mut(ARTICULATION).fill(1.0);
        values.row_mut(VELOCITY).fill(0.5);
        let p = PCodec {
            values,
            note_ids: s.note_ids.clone(),
            mask: vec![true; 3],
            start_sec: 0.0,
        };
        let back = invert_p_codec(&p, &s).unwrap();
        let onsets: Vec<_> = back.notes().iter().map(|n| n.onset_sec).collect();
        assert_eq!(onsets, [0.0, 0.5, 1.0]);
        assert!(back.notes().iter().all(|n| n.velocity == 64));

        let mut bad = p.clone();
        bad.values[[BEAT_PERIOD, 1]] = 0.0;
        assert!(matches!(invert_p_codec(&bad, &s), Err(Error::NonPositiveBeatPeriod { .. })));
    }

    #[test]
    fn s_codec_columns() {
        let sc = score(&[(0.0, 1.0)]);
        let s = build_s_codec(&sc);
        assert_eq!(s.values.column(0).to_vec(), [0.0, 1.0, 40.0, 1.0]);
    }

    fn window(start: f64, v: f64) -> FeatureWindow {
        FeatureWindow {
            start_sec: start,
            end_sec: start + 15.0,
            values: [v; C_ROWS],
        }
    }

    #[test]
    fn broadcast_averages_and_falls_back() {
        let ws = FeatureWindows(vec![window(0.0, 1.0), window(5.0, 3.0), window(25.0, 7.0)]);
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let c = broadcast_c_codec(&ws, &ids, &[1.0, 10.0, 100.0]).unwrap();
        assert_eq!(c.values.column(0).to_vec(), [1.0; C_ROWS]);
        assert_eq!(c.values.column(1).to_vec(), [2.0; C_ROWS]);
        assert_eq!(c.values.column(2).to_vec(), [7.0; C_ROWS]);
        assert!(broadcast_c_codec(&FeatureWindows::default(), &ids, &[0.0; 3]).is_err());
    }

    fn codecs(n: usize) -> (PCodec, SCodec, CCodec) {
        let sc = score(&(0..n).map(|i| (i as f64, 1.0)).collect::<Vec<_>>());
        let s = build_s_codec(&sc);
        let values = Array2::from_shape_fn((P_ROWS, n), |(r, j)| 0.1 + (r * n + j) as f64 * 1e-3);
        let p = PCodec {
            values,
            note_ids: s.note_ids.clone(),
            mask: (0..n).map(|j| j % 3 != 0).collect(),
            start_sec: 0.0,
        };
        let c = CCodec::constant(s.note_ids.clone(), [0.5; C_ROWS]);
        (p, s, c)
    }

    #[test]
    fn segmentation_counts_and_padding() {
        for (n, expected, last_real) in [(450, 3, 50), (200, 1, 200), (1, 1, 1)] {
            let (p, s, c) = codecs(n);
            let segs = segment(&p, &s, &c, 200).unwrap();
            assert_eq!(segs.len(), expected);
            let last = segs.last().unwrap();
            assert_eq!(last.real_len(), last_real);
            assert_eq!(last.pad_mask.iter().filter(|m| **m).count(), last_real);
            assert!(last.p.slice(s![.., last_real..]).iter().all(|v| *v == 0.0));
            assert!(last.c.slice(s![.., last_real..]).iter().all(|v| *v == 0.0));
            let parts: Vec<_> = segs.iter().map(|g| &g.p).collect();
            let real: Vec<_> = segs.iter().map(Segment::real_len).collect();
            assert_eq!(concat_real_columns(&parts, &real), p.values);
        }
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let (p, s, c) = codecs(4);
        let a = segment(&p, &s, &c, 4).unwrap().remove(0);
        let mut b = a.clone();
        b.p.row_mut(BEAT_PERIOD).fill(0.6);
        b.c.fill(1.0);
        let mut a2 = a.clone();
        a2.p.row_mut(BEAT_PERIOD).fill(0.4);
        assert_eq!(mixup(&a2, &b, 1.0).unwrap().p, a2.p);
        assert_eq!(mixup(&a2, &b, 0.0).unwrap().c, b.c);
        let half = mixup(&a2, &b, 0.5).unwrap();
        assert!(half.p.row(BEAT_PERIOD).iter().all(|v| (v - 0.5).abs() < 1e-12));

        let mut other = b.clone();
        other.s[[2, 0]] += 1.0;
        assert!(matches!(mixup(&a, &other, 0.5), Err(Error::MismatchedSegments)));
    }

    #[test]
    fn csv_round_trips() {
        let (mut p, s, c) = codecs(5);
        p.start_sec = 1.25;
        assert_eq!(parse_p_codec(&p_codec_to_csv(&p).unwrap()).unwrap(), p);
        assert_eq!(parse_s_codec(&s_codec_to_csv(&s).unwrap()).unwrap(), s);
        assert_eq!(parse_c_codec(&c_codec_to_csv(&c).unwrap()).unwrap(), c);
        let bare = "note_id,beat_period,velocity,timing,articulation,pedal,mask\na,0.5,0.5,0,1,0,1\n";
        assert_eq!(parse_p_codec(bare).unwrap().start_sec, 0.0);
    }

    #[test]
    fn feature_window_csv() {
        let text = "start_sec,end_sec,melodiousness,articulation,rhythm_complexity,rhythm_stability,dissonance,tonal_stability,minorness\n5,20,1,2,3,4,5,6,7\n0,15,0,0,0,0,0,0,0\n";
        let ws = parse_feature_windows(text).unwrap();
        assert_eq!(ws.0[0].start_sec, 0.0);
        assert_eq!(ws.0[1].values[6], 7.0);
    }

    #[test]
    fn alignment_must_cover_score() {
        let sc = score(&[(0.0, 1.0), (1.0, 1.0)]);
        let pf = perf(&[(0.0, 0.4, 60), (0.5, 0.4, 60)], &[]);
        let align = Alignment {
            pairs: vec![AlignPair {
                score_id: "n0".into(),
                perf_id: Some("n0".into()),
            }],
        };
        assert!(matches!(extract_p_codec(&sc, &pf, &align), Err(Error::Alignment(_))));
    }
}
