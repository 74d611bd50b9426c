//! MIDI-to-perceptual-features proxy: piano-roll windows and a small
//! residual convolutional regressor onto the seven perceptual features.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codecs::{C_NAMES, C_ROWS};
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, Conv2dSpec, Graph, GroupNorm, Linear, ParamStore, Tensor, Var};
use crate::notes::{PedalKind, Performance};
use crate::rng::seeded;

pub const FRAMES: usize = 800;
pub const PITCHES: usize = 128;
/// Pitch columns plus sustain, sostenuto and soft.
pub const COLUMNS: usize = PITCHES + 3;
pub const WINDOW_SEC: f64 = 15.0;
/// 18.75 ms.
pub const FRAME_SEC: f64 = WINDOW_SEC / FRAMES as f64;
pub const PEDAL_COLUMNS: [(usize, PedalKind); 3] = [
    (PITCHES, PedalKind::Sustain),
    (PITCHES + 1, PedalKind::Sostenuto),
    (PITCHES + 2, PedalKind::Soft),
];
const CHECKPOINT_KIND: &str = "proxy";

/// A 15 s window as `800 × 131` values in `[0, 127]`, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PianoRoll {
    data: Vec<f32>,
}

impl PianoRoll {
    pub fn zeros() -> Self {
        PianoRoll {
            data: vec![0.0; FRAMES * COLUMNS],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        if data.len() != FRAMES * COLUMNS {
            return Err(Error::shape(FRAMES * COLUMNS, data.len()));
        }
        if data.iter().any(|v| !(0.0..=127.0).contains(v)) {
            return Err(Error::invalid("piano-roll values must lie in [0, 127]"));
        }
        Ok(PianoRoll { data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (FRAMES, COLUMNS)
    }

    pub fn get(&self, frame: usize, column: usize) -> f32 {
        self.data[frame * COLUMNS + column]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mean over painted pitch cells, 0 for a roll without notes.
    pub fn mean_note_value(&self) -> f64 {
        let (sum, n) = self
            .data
            .chunks_exact(COLUMNS)
            .flat_map(|row| &row[..PITCHES])
            .filter(|v| **v > 0.0)
            .fold((0.0, 0usize), |(s, n), v| (s + f64::from(*v), n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// First frame whose start time is at or after `t` seconds into the window.
fn frame_at_or_after(t: f64) -> usize {
    // rounding guards frame boundaries against representation error
    let f = t / FRAME_SEC;
    let r = f.round();
    let idx = if (f - r).abs() < 1e-9 { r } else { f.ceil() };
    idx.clamp(0.0, FRAMES as f64) as usize
}

/// Renders the window `[window_start, window_start + 15 s)`. Frame `f`
/// samples time `window_start + f·18.75 ms`; a note paints the frames whose
/// sample time falls in `[onset, onset + duration)`, later onsets
/// overwriting earlier ones. Pedal columns hold the controller value in
/// force at each frame time.
pub fn piano_roll(perf: &Performance, window_start: f64) -> Result<PianoRoll> {
    if !(window_start >= 0.0) || !window_start.is_finite() {
        return Err(Error::invalid(format!("window start {window_start} must be finite and >= 0")));
    }
    let mut roll = PianoRoll::zeros();
    let mut order: Vec<usize> = (0..perf.notes().len()).collect();
    order.sort_by(|&a, &b| perf.notes()[a].onset_sec.total_cmp(&perf.notes()[b].onset_sec));
    for i in order {
        let n = &perf.notes()[i];
        let first = frame_at_or_after(n.onset_sec - window_start);
        let last = frame_at_or_after(n.onset_sec + n.duration_sec - window_start);
        let col = usize::from(n.pitch);
        for f in first..last {
            roll.data[f * COLUMNS + col] = f32::from(n.velocity);
        }
    }
    if !perf.pedal_events().is_empty() {
        for f in 0..FRAMES {
            let t = window_start + f as f64 * FRAME_SEC;
            for (col, kind) in PEDAL_COLUMNS {
                roll.data[f * COLUMNS + col] = f32::from(perf.pedal_at(kind, t));
            }
        }
    }
    Ok(roll)
}

/// Consecutive windows covering the whole performance (at least one).
pub fn piano_rolls(perf: &Performance) -> Result<Vec<PianoRoll>> {
    let count = ((perf.end_sec() / WINDOW_SEC).ceil() as usize).max(1);
    (0..count).map(|k| piano_roll(perf, k as f64 * WINDOW_SEC)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    /// Widths of the two residual stages.
    pub channels: [usize; 2],
    /// Average-pooling factor along time before the first convolution.
    pub time_pool: usize,
    pub groups: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            channels: [16, 32],
            time_pool: 8,
            groups: 4,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.groups == 0 || self.time_pool == 0 || !FRAMES.is_multiple_of(self.time_pool) {
            return Err(Error::invalid(format!("invalid proxy configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, ch: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Block {
            gn1: GroupNorm::new(store, &format!("{name}.gn1"), ch, groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), ch, ch, Conv2dSpec::same(3), rng),
            gn2: GroupNorm::new(store, &format!("{name}.gn2"), ch, groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), ch, ch, Conv2dSpec::same(3), rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.gn1.forward(g, store, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, store, h);
        let h = self.gn2.forward(g, store, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        g.add(h, x)
    }
}

#[derive(Clone, Debug)]
struct ProxyNet {
    stem: Conv2d,
    block1: Block,
    down: Conv2d,
    block2: Block,
    head: Linear,
}

/// Residual regressor from a piano roll to the seven perceptual features.
#[derive(Clone, Debug)]
pub struct ProxyModel {
    config: ProxyConfig,
    params: ParamStore,
    net: ProxyNet,
    /// Validation loss at the end of training, if trained.
    pub final_val_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ProxyConfig,
    final_val_loss: Option<f64>,
}

impl ProxyModel {
    pub fn new(config: ProxyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded(seed);
        let [c0, c1] = config.channels;
        let net = ProxyNet {
            stem: Conv2d::new(&mut params, "stem", 1, c0, Conv2dSpec::strided(3, 2), &mut rng),
            block1: Block::new(&mut params, "block1", c0, config.groups, &mut rng),
            down: Conv2d::new(&mut params, "down", c0, c1, Conv2dSpec::strided(3, 2), &mut rng),
            block2: Block::new(&mut params, "block2", c1, config.groups, &mut rng),
            head: Linear::new(&mut params, "head", c1, C_ROWS, true, &mut rng),
        };
        Ok(ProxyModel {
            config,
            params,
            net,
            final_val_loss: None,
        })
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward(&self, g: &mut Graph, rolls: &[&PianoRoll]) -> Var {
        let b = rolls.len();
        let mut data = Vec::with_capacity(b * FRAMES * COLUMNS);
        for r in rolls {
            data.extend(r.data.iter().map(|v| v / 127.0));
        }
        let x = g.constant(Tensor::new(vec![b, FRAMES, COLUMNS, 1], data));
        let x = g.avg_pool2d(x, self.config.time_pool, 1);
        let h = self.net.stem.forward(g, &self.params, x);
        let h = self.net.block1.forward(g, &self.params, h);
        let h = self.net.down.forward(g, &self.params, h);
        let h = self.net.block2.forward(g, &self.params, h);
        let s = g.shape(h).to_vec();
        let pooled = g.avg_pool2d(h, s[1], s[2]);
        let flat = g.reshape(pooled, &[b, s[3]]);
        self.net.head.forward(g, &self.params, flat)
    }

    /// Features for each roll.
    pub fn predict_batch(&self, rolls: &[&PianoRoll]) -> Result<Vec<[f64; C_ROWS]>> {
        if rolls.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut g = Graph::new();
        let out = self.forward(&mut g, rolls);
        Ok(g.value(out)
            .data()
            .chunks_exact(C_ROWS)
            .map(|c| std::array::from_fn(|i| f64::from(c[i])))
            .collect())
    }

    pub fn predict(&self, roll: &PianoRoll) -> [f64; C_ROWS] {
        self.predict_batch(&[roll]).expect("one roll").remove(0)
    }

    /// Mean prediction over the windows of a whole performance.
    pub fn predict_performance(&self, perf: &Performance) -> Result<[f64; C_ROWS]> {
        let rolls = piano_rolls(perf)?;
        let refs: Vec<&PianoRoll> = rolls.iter().collect();
        let preds = self.predict_batch(&refs)?;
        Ok(std::array::from_fn(|i| preds.iter().map(|p| p[i]).sum::<f64>() / preds.len() as f64))
    }

    fn loss(&self, rolls: &[&PianoRoll], targets: &[[f64; C_ROWS]]) -> (Graph, Var) {
        let mut g = Graph::new();
        let pred = self.forward(&mut g, rolls);
        let t: Vec<f32> = targets.iter().flat_map(|t| t.iter().map(|v| *v as f32)).collect();
        let target = g.constant(Tensor::new(vec![rolls.len(), C_ROWS], t));
        let d = g.sub(pred, target);
        let sq = g.square(d);
        let loss = g.mean_all(sq);
        (g, loss)
    }

    /// Mean squared error over `pairs`.
    pub fn mse(&self, pairs: &[(PianoRoll, [f64; C_ROWS])], batch_size: usize) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        for chunk in pairs.chunks(batch_size.max(1)) {
            let rolls: Vec<&PianoRoll> = chunk.iter().map(|p| &p.0).collect();
            let targets: Vec<_> = chunk.iter().map(|p| p.1).collect();
            let (g, loss) = self.loss(&rolls, &targets);
            total += f64::from(g.value(loss).data()[0]) * chunk.len() as f64;
        }
        Ok(total / pairs.len() as f64)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            final_val_loss: self.final_val_loss,
        };
        checkpoint::to_bytes(CHECKPOINT_KIND, &header, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let contents = checkpoint::from_bytes::<Header>(bytes, CHECKPOINT_KIND)?;
        let mut model = ProxyModel::new(contents.header.config, 0)
            .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
        model.final_val_loss = contents.header.final_val_loss;
        checkpoint::restore(&mut model.params, contents.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&checkpoint::read(path.as_ref())?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of pairs held out for validation; with fewer than ten pairs
    /// the training set doubles as validation set.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProxyTrainConfig {
    fn default() -> Self {
        ProxyTrainConfig {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 8,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyTrainReport {
    /// Mean training loss per epoch, before each epoch's updates.
    pub train_loss: Vec<f64>,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
}

/// Trains with Adam on mean squared error and records the final
/// validation loss in the model.
pub fn proxy_train(
    model: &mut ProxyModel,
    pairs: &[(PianoRoll, [f64; C_ROWS])],
    cfg: &ProxyTrainConfig,
) -> Result<ProxyTrainReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(cfg.learning_rate >= 0.0) || cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::invalid(format!("invalid proxy training configuration {cfg:?}")));
    }
    let mut rng = seeded(cfg.seed);
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = if pairs.len() >= 10 {
        ((pairs.len() as f64 * cfg.val_fraction).round() as usize).min(pairs.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = idx.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val: Vec<_> = if val_idx.is_empty() {
        train_idx.iter().map(|&i| pairs[i].clone()).collect()
    } else {
        val_idx.iter().map(|&i| pairs[i].clone()).collect()
    };
    let mut adam = Adam::new(cfg.learning_rate as f32);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let rolls: Vec<&PianoRoll> = chunk.iter().map(|&i| &pairs[i].0).collect();
            let targets: Vec<_> = chunk.iter().map(|&i| pairs[i].1).collect();
            let (g, loss) = model.loss(&rolls, &targets);
            let v = f64::from(g.value(loss).data()[0]);
            if !v.is_finite() {
                return Err(Error::invalid("proxy training loss is not finite"));
            }
            total += v * chunk.len() as f64;
            let grads = g.backward(loss);
            adam.step(&mut model.params, &grads);
        }
        let mean = total / train_idx.len() as f64;
        log::debug!("proxy epoch {}: train {mean:.5}", epoch + 1);
        history.push(mean);
    }
    let train_pairs: Vec<_> = train_idx.iter().map(|&i| pairs[i].clone()).collect();
    let final_train_loss = model.mse(&train_pairs, cfg.batch_size)?;
    let final_val_loss = model.mse(&val, cfg.batch_size)?;
    model.final_val_loss = Some(final_val_loss);
    Ok(ProxyTrainReport {
        train_loss: history,
        final_train_loss,
        final_val_loss,
    })
}

/// Predicted features of one piece rendered with unmodified conditions and
/// with single features scaled.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringPiece {
    pub base: [f64; C_ROWS],
    /// `(feature index, scale factor, prediction)`.
    pub variants: Vec<(usize, f64, [f64; C_ROWS])>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringRow {
    /// Name of the scaled feature.
    pub feature: String,
    pub factor: f64,
    /// Mean over pieces of prediction minus the unmodified prediction, for
    /// all seven features.
    pub deltas: [f64; C_ROWS],
    pub pieces: usize,
}

impl SteeringRow {
    /// Change of the scaled feature itself.
    pub fn own_delta(&self) -> f64 {
        let i = C_NAMES.iter().position(|n| *n == self.feature).expect("known feature");
        self.deltas[i]
    }
}

/// Averages variant-minus-base deltas per (feature, factor), in order of
/// first appearance.
pub fn steering_report(pieces: &[SteeringPiece]) -> Result<Vec<SteeringRow>> {
    let mut rows: Vec<SteeringRow> = Vec::new();
    for p in pieces {
        for &(feature, factor, pred) in &p.variants {
            if feature >= C_ROWS {
                return Err(Error::invalid(format!("feature index {feature} out of range")));
            }
            let name = C_NAMES[feature];
            let i = match rows.iter().position(|r| r.feature == name && r.factor == factor) {
                Some(i) => i,
                None => {
                    rows.push(SteeringRow {
                        feature: name.to_string(),
                        factor,
                        deltas: [0.0; C_ROWS],
                        pieces: 0,
                    });
                    rows.len() - 1
                }
            };
            let row = &mut rows[i];
            for (d, (v, b)) in row.deltas.iter_mut().zip(pred.iter().zip(&p.base)) {
                *d += v - b;
            }
            row.pieces += 1;
        }
    }
    for r in &mut rows {
        r.deltas.iter_mut().for_each(|d| *d /= r.pieces as f64);
    }
    Ok(rows)
}

pub fn steering_to_csv(rows: &[SteeringRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["feature".to_string(), "factor".into(), "pieces".into()];
    header.extend(C_NAMES.iter().map(|n| format!("delta_{n}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.feature.clone(), r.factor.to_string(), r.pieces.to_string()];
        rec.extend(r.deltas.iter().map(|d| d.to_string()));
        w.write_record(&rec)?;
    }
    crate::notes::finish(w)
}

/// Mean predicted features of source, target and transferred output at
/// one transfer depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProximityRow {
    pub label: String,
    pub source: [f64; C_ROWS],
    pub target: [f64; C_ROWS],
    pub output: [f64; C_ROWS],
    /// Euclidean distance of `output` to `source` and to `target`.
    pub to_source: f64,
    pub to_target: f64,
}

fn mean7(xs: &[[f64; C_ROWS]]) -> [f64; C_ROWS] {
    std::array::from_fn(|i| xs.iter().map(|x| x[i]).sum::<f64>() / xs.len() as f64)
}

fn dist(a: &[f64; C_ROWS], b: &[f64; C_ROWS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Averages `(source, target, output)` predictions over pieces.
pub fn proximity_row(label: impl Into<String>, triples: &[([f64; C_ROWS], [f64; C_ROWS], [f64; C_ROWS])]) -> Result<ProximityRow> {
    if triples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let source = mean7(&triples.iter().map(|t| t.0).collect::<Vec<_>>());
    let target = mean7(&triples.iter().map(|t| t.1).collect::<Vec<_>>());
    let output = mean7(&triples.iter().map(|t| t.2).collect::<Vec<_>>());
    Ok(ProximityRow {
        label: label.into(),
        to_source: dist(&output, &source),
        to_target: dist(&output, &target),
        source,
        target,
        output,
    })
}

pub fn proximity_to_csv(rows: &[ProximityRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "role", "distance"].iter().map(|s| s.to_string()).chain(C_NAMES.iter().map(|s| s.to_string())))?;
    for r in rows {
        for (role, v, d) in [
            ("source", &r.source, r.to_source),
            ("target", &r.target, r.to_target),
            ("output", &r.output, 0.0),
        ] {
            let mut rec = vec![r.label.clone(), role.to_string(), d.to_string()];
            rec.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
    }
    crate::notes::finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notes::{PedalEvent, PerfNote};

    fn note(id: &str, onset: f64, dur: f64, pitch: u8, vel: u8) -> PerfNote {
        PerfNote {
            id: id.into(),
            onset_sec: onset,
            duration_sec: dur,
            pitch,
            velocity: vel,
        }
    }

    #[test]
    fn roll_geometry() {
        assert_eq!(FRAMES as f64 * FRAME_SEC, WINDOW_SEC);
        let empty = piano_roll(&Performance::default(), 0.0).unwrap();
        assert_eq!(empty.dims(), (800, 131));
        assert!(empty.data().iter().all(|v| *v == 0.0));
        let whole = Performance::new(vec![note("a", 0.0, 15.0, 60, 80)], vec![]).unwrap();
        let r = piano_roll(&whole, 0.0).unwrap();
        for f in 0..FRAMES {
            for c in 0..COLUMNS {
                assert_eq!(r.get(f, c), if c == 60 { 80.0 } else { 0.0 });
            }
        }
        let one = Performance::new(vec![note("a", 3.0 * FRAME_SEC, FRAME_SEC, 61, 50)], vec![]).unwrap();
        let r = piano_roll(&one, 0.0).unwrap();
        assert_eq!((0..FRAMES).filter(|&f| r.get(f, 61) > 0.0).count(), 1);
        let mid = Performance::new(vec![note("a", 1.2345, FRAME_SEC, 61, 50)], vec![]).unwrap();
        let r = piano_roll(&mid, 0.0).unwrap();
        assert_eq!((0..FRAMES).filter(|&f| r.get(f, 61) > 0.0).count(), 1);
        assert!(piano_roll(&whole, -1.0).is_err());
    }

    #[test]
    fn later_onset_wins_and_pedals_step() {
        let p = Performance::new(
            vec![note("b", 1.0, 1.0, 60, 30), note("a", 0.0, 3.0, 60, 90)],
            vec![PedalEvent {
                time_sec: 0.5,
                value: 100,
                kind: PedalKind::Sustain,
            }],
        )
        .unwrap();
        let r = piano_roll(&p, 0.0).unwrap();
        let frame = |t: f64| (t / FRAME_SEC) as usize;
        assert_eq!(r.get(frame(0.5), 60), 90.0);
        assert_eq!(r.get(frame(1.5), 60), 30.0);
        assert_eq!(r.get(frame(2.5), 60), 90.0);
        assert_eq!(r.get(frame(0.4), PITCHES), 0.0);
        assert_eq!(r.get(frame(0.6), PITCHES), 100.0);
        assert_eq!(r.get(frame(0.6), PITCHES + 2), 0.0);
    }

    #[test]
    fn prediction_shape_and_determinism() {
        let m = ProxyModel::new(ProxyConfig::default(), 1).unwrap();
        let zero = PianoRoll::zeros();
        let a = m.predict(&zero);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, m.predict(&zero));
        let bytes = m.to_bytes().unwrap();
        let back = ProxyModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.predict(&zero), a);
        assert!(crate::denoiser::DenoiserModel::from_bytes(&bytes).is_err());
        assert!(PianoRoll::from_vec(vec![0.0; 10]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut m = ProxyModel::new(ProxyConfig::default(), 2).unwrap();
        let before = m.params().clone();
        let pairs = vec![(PianoRoll::zeros(), [0.5; C_ROWS]); 2];
        let cfg = ProxyTrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..ProxyTrainConfig::default()
        };
        let rep = proxy_train(&mut m, &pairs, &cfg).unwrap();
        assert_eq!(m.params(), &before);
        assert!(rep.train_loss.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn steering_deltas() {
        let base = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        let same = SteeringPiece {
            base,
            variants: vec![(1, 0.5, base), (1, 2.0, base)],
        };
        let rows = steering_report(&[same]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.deltas.iter().all(|d| *d == 0.0) && r.deltas.len() == 7));
        let mut up = base;
        up[1] += 0.3;
        let rows = steering_report(&[SteeringPiece {
            base,
            variants: vec![(1, 2.0, up)],
        }])
        .unwrap();
        assert!((rows[0].own_delta() - 0.3).abs() < 1e-12);
        assert_eq!(steering_to_csv(&rows).unwrap().lines().count(), 2);
        let row = proximity_row("t0=12", &[(base, up, up)]).unwrap();
        assert_eq!(row.to_target, 0.0);
        assert_eq!(proximity_to_csv(&[row]).unwrap().lines().count(), 4);
    }
}
