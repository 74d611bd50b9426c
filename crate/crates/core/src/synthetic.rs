//! Synthetic data: random aligned pieces for codec tests and a toy
//! conditional task where one perceptual row sets the performed velocity.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::codecs::{
    save_feature_windows, FeatureWindow, FeatureWindows, Segment, ARTICULATION, BEAT_PERIOD, C_ROWS, PEDAL, P_ROWS, S_ROWS, TIMING,
    VELOCITY,
};
use crate::denoiser::{DenoiserConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::schedule::ScheduleParams;
use crate::metrics::{save_markings, DynMarking, MarkingKind};
use crate::midi::{save_performance, written_ids};
use crate::notes::{
    save_alignment, save_score, AlignPair, Alignment, NoteArray, PedalEvent, PedalKind, PerfNote, Performance, ScoreNote,
};

/// Perceptual row that carries the velocity target in the toy task.
pub const VELOCITY_FEATURE: usize = 1;
/// Perceptual rows that set tempo, articulation and pedal in the toy task.
pub const TEMPO_FEATURE: usize = 0;
pub const ARTICULATION_FEATURE: usize = 2;
pub const PEDAL_FEATURE: usize = 3;

/// Condition values never drawn during training.
pub const HELD_OUT: [f64; 2] = [0.3, 0.7];

/// Parameters of the velocity-conditioning task.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityTask {
    /// Range of training velocity targets.
    pub v_range: (f64, f64),
    /// Half-width of the excluded band around each held-out value.
    pub held_out_gap: f64,
    /// Std of per-note velocity noise around the target.
    pub vel_noise: f64,
    /// Range of the per-segment beat period.
    pub tempo_range: (f64, f64),
}

impl Default for VelocityTask {
    fn default() -> Self {
        VelocityTask {
            v_range: (0.2, 0.8),
            held_out_gap: 0.025,
            vel_noise: 0.02,
            tempo_range: (0.4, 0.8),
        }
    }
}

impl VelocityTask {
    /// Uniform target in `v_range` outside the held-out bands.
    pub fn training_target(&self, rng: &mut ChaCha8Rng) -> f64 {
        loop {
            let v = rng.random_range(self.v_range.0..=self.v_range.1);
            if HELD_OUT.iter().all(|h| (v - h).abs() >= self.held_out_gap) {
                return v;
            }
        }
    }

    pub fn dataset(&self, rng: &mut ChaCha8Rng, count: usize, n: usize) -> Vec<Segment> {
        (0..count)
            .map(|_| {
                let v = self.training_target(rng);
                velocity_segment(rng, n, v, self)
            })
            .collect()
    }
}

/// Random score of `n` notes with a performance whose velocity is `v` plus
/// small noise. Perceptual row [`VELOCITY_FEATURE`] equals `v`; rows
/// [`TEMPO_FEATURE`], [`ARTICULATION_FEATURE`] and [`PEDAL_FEATURE`] are
/// random and fix the segment's beat period, articulation and pedal; the
/// remaining rows are random and unrelated to the performance.
pub fn velocity_segment(rng: &mut ChaCha8Rng, n: usize, v: f64, task: &VelocityTask) -> Segment {
    let mut s = Array2::zeros((S_ROWS, n));
    let mut onset = 0.0;
    for j in 0..n {
        if j > 0 && rng.random::<f64>() >= 0.2 {
            onset += [0.5, 1.0][rng.random_range(0..2)];
        }
        s[[0, j]] = onset;
        s[[1, j]] = [0.5, 1.0][rng.random_range(0..2)];
        s[[2, j]] = f64::from(rng.random_range(48u8..=84));
        s[[3, j]] = f64::from(rng.random_range(1u8..=2));
    }
    let mut features: [f64; C_ROWS] = std::array::from_fn(|_| rng.random::<f64>());
    features[VELOCITY_FEATURE] = v;
    let (lo, hi) = task.tempo_range;
    let tempo = lo + (hi - lo) * features[TEMPO_FEATURE];
    let art = 0.7 + 0.3 * features[ARTICULATION_FEATURE];
    let pedal = if features[PEDAL_FEATURE] >= 0.5 { 1.0 } else { 0.0 };
    let vel = Normal::new(0.0, task.vel_noise).unwrap();
    let jitter = Normal::new(0.0, 0.01).unwrap();
    let mut p = Array2::zeros((P_ROWS, n));
    for j in 0..n {
        p[[BEAT_PERIOD, j]] = tempo;
        p[[VELOCITY, j]] = (v + vel.sample(rng)).clamp(0.0, 1.0);
        p[[TIMING, j]] = jitter.sample(rng);
        p[[ARTICULATION, j]] = art + jitter.sample(rng);
        p[[PEDAL, j]] = pedal;
    }
    let c = Array2::from_shape_fn((C_ROWS, n), |(r, _)| features[r]);
    Segment {
        p,
        s,
        c,
        pad_mask: vec![true; n],
        observed: vec![true; n],
        note_ids: (0..n).map(|j| format!("n{j}")).collect(),
    }
}

/// Model, schedule and optimizer settings small enough to learn the
/// velocity task on one CPU core in well under a minute (16-note segments,
/// T = 48). Train for 30 epochs on 512 segments.
pub fn desk_setup() -> (DenoiserConfig, ScheduleParams, TrainConfig) {
    let model = DenoiserConfig {
        channels: vec![16, 32],
        cond_embed_dim: 32,
        time_embed_dim: 32,
        groups: 4,
        attention: false,
        segment_len: 16,
    };
    let schedule = ScheduleParams {
        steps: 48,
        beta_start: 1e-4,
        beta_end: 0.2,
    };
    let train = TrainConfig {
        learning_rate: 2e-3,
        max_epochs: 30,
        patience: 30,
        ..TrainConfig::default()
    };
    (model, schedule, train)
}

/// Knobs for [`random_piece`].
#[derive(Clone, Debug, PartialEq)]
pub struct PieceOptions {
    pub deletion_prob: f64,
    pub extra_prob: f64,
    pub chord_prob: f64,
    pub pedal: bool,
}

impl Default for PieceOptions {
    fn default() -> Self {
        PieceOptions {
            deletion_prob: 0.1,
            extra_prob: 0.05,
            chord_prob: 0.3,
            pedal: true,
        }
    }
}

/// A score with a performance and the alignment between them.
#[derive(Clone, Debug)]
pub struct Piece {
    pub score: NoteArray,
    pub perf: Performance,
    pub align: Alignment,
}

/// Random score of `n` notes with at least two distinct onsets.
pub fn random_score(rng: &mut ChaCha8Rng, n: usize, chord_prob: f64) -> NoteArray {
    assert!(n >= 2, "a piece needs at least two notes");
    let mut notes = Vec::with_capacity(n);
    let mut onset = 0.0;
    for i in 0..n {
        if i > 0 && (i == n - 1 || rng.random::<f64>() >= chord_prob) {
            onset += [0.25, 0.5, 1.0, 1.5][rng.random_range(0..4)];
        }
        notes.push(ScoreNote {
            id: format!("s{i}"),
            onset_beats: onset,
            duration_beats: [0.25, 0.5, 1.0, 2.0][rng.random_range(0..4)],
            pitch: rng.random_range(21..=108),
            voice: rng.random_range(1..=3),
        });
    }
    NoteArray::new(notes).expect("generated score is valid")
}

/// Random piece of `n` score notes with a drifting tempo, onset jitter,
/// deleted and extra notes and sustain/soft pedalling. Notes of the first
/// and last onset are never deleted, so extraction always succeeds.
pub fn random_piece(rng: &mut ChaCha8Rng, n: usize, opts: &PieceOptions) -> Piece {
    let score = random_score(rng, n, opts.chord_prob);
    let (perf, align) = perform(rng, &score, opts);
    Piece { score, perf, align }
}

/// One random performance of `score` and its alignment.
pub fn perform(rng: &mut ChaCha8Rng, score: &NoteArray, opts: &PieceOptions) -> (Performance, Alignment) {
    let groups = crate::notes::joint_onsets(score);
    let mut bp = rng.random_range(0.3..0.9);
    let mut grid = rng.random_range(0.5..2.0);
    let mut perf_notes = Vec::new();
    let mut pairs = Vec::new();
    let last = groups.len() - 1;
    for (k, g) in groups.iter().enumerate() {
        if k > 0 {
            grid += bp * (g.onset_beats - groups[k - 1].onset_beats);
            bp = (bp * rng.random_range(0.95..1.05)).clamp(0.2, 1.5);
        }
        for &i in &g.indices {
            let sn = &score.notes()[i];
            let keep = k == 0 || k == last || rng.random::<f64>() >= opts.deletion_prob;
            if !keep {
                pairs.push(AlignPair {
                    score_id: sn.id.clone(),
                    perf_id: None,
                });
                continue;
            }
            let jitter = rng.random_range(-0.02..0.02);
            perf_notes.push(PerfNote {
                id: String::new(),
                onset_sec: grid + jitter,
                duration_sec: sn.duration_beats * bp * rng.random_range(0.5..1.2),
                pitch: sn.pitch,
                velocity: rng.random_range(20..=110),
            });
            pairs.push(AlignPair {
                score_id: sn.id.clone(),
                perf_id: Some(String::new()),
            });
        }
    }
    let end = grid + 1.0;
    let matched = perf_notes.len();
    for _ in 0..score.len() {
        if rng.random::<f64>() < opts.extra_prob {
            perf_notes.push(PerfNote {
                id: String::new(),
                onset_sec: rng.random_range(0.0..end),
                duration_sec: rng.random_range(0.05..0.5),
                pitch: rng.random_range(21..=108),
                velocity: rng.random_range(1..=127),
            });
        }
    }
    // ids in a shuffled order so they carry no positional information
    let mut ids: Vec<usize> = (0..perf_notes.len()).collect();
    ids.shuffle(rng);
    for (note, id) in perf_notes.iter_mut().zip(&ids) {
        note.id = format!("p{id}");
    }
    let mut next = 0;
    for pair in pairs.iter_mut().filter(|p| p.perf_id.is_some()) {
        pair.perf_id = Some(perf_notes[next].id.clone());
        next += 1;
    }
    debug_assert_eq!(next, matched);

    let mut pedals = Vec::new();
    if opts.pedal {
        let mut t = rng.random_range(0.0..1.0);
        while t < end {
            pedals.push(PedalEvent {
                time_sec: t,
                value: rng.random_range(0..=127),
                kind: PedalKind::Sustain,
            });
            if rng.random::<f64>() < 0.2 {
                pedals.push(PedalEvent {
                    time_sec: t + 0.1,
                    value: rng.random_range(0..=127),
                    kind: PedalKind::Soft,
                });
            }
            t += rng.random_range(0.3..3.0);
        }
    }
    let perf = Performance::new(perf_notes, pedals).expect("generated performance is valid");
    (perf, Alignment { pairs })
}

/// Six constant dynamics spread over the score, with a hairpin leading
/// into every second one in the direction of the level change.
pub fn random_markings(rng: &mut ChaCha8Rng, score: &NoteArray) -> Vec<DynMarking> {
    let end = score.notes().iter().map(|n| n.onset_beats).fold(0.0, f64::max);
    let step = end / 6.0;
    let mut out = Vec::new();
    let mut prev = 0u8;
    for k in 0..6 {
        let onset = k as f64 * step;
        let level = rng.random_range(1..=8);
        if k % 2 == 1 && level != prev && step > 0.0 {
            let end_beats = onset;
            let start = onset - step;
            let kind = if level > prev {
                MarkingKind::Crescendo { end_beats }
            } else {
                MarkingKind::Decrescendo { end_beats }
            };
            out.push(DynMarking { onset_beats: start, kind });
        }
        out.push(DynMarking {
            onset_beats: onset,
            kind: MarkingKind::Constant(level),
        });
        prev = level;
    }
    out
}

/// Size of a corpus written by [`write_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusOptions {
    pub pieces: usize,
    pub performances: usize,
    pub notes: usize,
    pub seed: u64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            pieces: 2,
            performances: 3,
            notes: 40,
            seed: 0,
        }
    }
}

/// Writes random pieces, each with several aligned performances and
/// feature windows, plus two manifests into `dir`:
///
/// - `manifest.json` lists pieces for `train`, `evaluate` and `sweep`
/// - `proxy_manifest.json` lists performances for `proxy-train`
///
/// Alignments refer to note ids as they read back from the MIDI files.
pub fn write_corpus(dir: &Path, opts: &CorpusOptions) -> Result<PathBuf> {
    if opts.pieces == 0 || opts.performances == 0 || opts.notes < 2 {
        return Err(Error::invalid(format!("corpus needs pieces, performances and two notes: {opts:?}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = crate::rng::seeded(opts.seed);
    let piece_opts = PieceOptions::default();
    let mut pieces = Vec::new();
    let mut examples = Vec::new();
    for k in 0..opts.pieces {
        let name = format!("piece{k}");
        let score = random_score(&mut rng, opts.notes, piece_opts.chord_prob);
        save_score(&score, dir.join(format!("{name}.csv")))?;
        save_markings(&random_markings(&mut rng, &score), dir.join(format!("{name}_markings.csv")))?;
        let mut perfs = Vec::new();
        for j in 0..opts.performances {
            let (perf, align) = perform(&mut rng, &score, &piece_opts);
            let ids: HashMap<&str, String> = perf.notes().iter().map(|n| n.id.as_str()).zip(written_ids(&perf)).collect();
            let align = Alignment {
                pairs: align
                    .pairs
                    .iter()
                    .map(|p| AlignPair {
                        score_id: p.score_id.clone(),
                        perf_id: p.perf_id.as_ref().map(|id| ids[id.as_str()].clone()),
                    })
                    .collect(),
            };
            let base: [f64; C_ROWS] = std::array::from_fn(|_| rng.random::<f64>());
            let windows = (0..((perf.end_sec() / 15.0).ceil() as usize).max(1))
                .map(|w| FeatureWindow {
                    start_sec: w as f64 * 15.0,
                    end_sec: (w + 1) as f64 * 15.0,
                    values: std::array::from_fn(|r| (base[r] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)),
                })
                .collect();
            let stem = format!("{name}_perf{j}");
            save_performance(&perf, dir.join(format!("{stem}.mid")))?;
            save_alignment(&align, dir.join(format!("{stem}_align.csv")))?;
            save_feature_windows(&FeatureWindows(windows), dir.join(format!("{stem}_features.csv")))?;
            perfs.push(serde_json::json!({
                "perf": format!("{stem}.mid"),
                "align": format!("{stem}_align.csv"),
                "features": format!("{stem}_features.csv"),
            }));
            examples.push(serde_json::json!({
                "perf": format!("{stem}.mid"),
                "feature_windows": format!("{stem}_features.csv"),
            }));
        }
        pieces.push(serde_json::json!({
            "name": name,
            "score": format!("{name}.csv"),
            "markings": format!("{name}_markings.csv"),
            "performances": perfs,
        }));
    }
    let manifest = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({ "pieces": pieces }))?;
    std::fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    let proxy = dir.join("proxy_manifest.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({ "examples": examples }))?;
    std::fs::write(&proxy, text).map_err(|e| Error::io(&proxy, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn pieces_are_valid() {
        let mut rng = seeded(0);
        for n in [2, 5, 60] {
            let piece = random_piece(&mut rng, n, &PieceOptions::default());
            assert_eq!(piece.score.len(), n);
            piece.align.validate(&piece.score, Some(&piece.perf)).unwrap();
        }
    }

    #[test]
    fn training_targets_avoid_held_out_values() {
        let task = VelocityTask::default();
        let mut rng = seeded(1);
        for _ in 0..2000 {
            let v = task.training_target(&mut rng);
            assert!((0.2..=0.8).contains(&v));
            assert!(HELD_OUT.iter().all(|h| (v - h).abs() >= task.held_out_gap));
        }
    }

    #[test]
    fn velocity_feature_row_is_the_target() {
        let mut rng = seeded(2);
        let seg = velocity_segment(&mut rng, 16, 0.42, &VelocityTask::default());
        assert!(seg.c.row(VELOCITY_FEATURE).iter().all(|v| *v == 0.42));
        let mean = seg.p.row(VELOCITY).mean().unwrap();
        assert!((mean - 0.42).abs() < 0.03);
    }
}
