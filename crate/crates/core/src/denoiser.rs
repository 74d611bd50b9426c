//! Conditional noise-prediction network, its training objective and
//! checkpointing.
//!
//! The p_codec segment is treated as a one-channel image of height 5 and
//! width N. A small encoder–decoder pools along the note axis only, with
//! single-head self-attention at the bottleneck. Score and perceptual
//! columns are projected per note, summed with the step embedding and added
//! as a per-position bias inside every residual block. Either condition can
//! be replaced by a learned null vector, which is how the unconditional
//! branch of guidance is obtained.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codecs::{mixup, Segment, C_ROWS, P_ROWS, S_ROWS};
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, Conv2dSpec, Graph, GroupNorm, Linear, ParamId, ParamStore, Tensor, Var};
use crate::rng::seeded;
use crate::schedule::{NoiseSchedule, ScheduleParams};

pub const CHECKPOINT_KIND: &str = "denoiser";

/// Sinusoidal embedding: `[sin(t·f_0), cos(t·f_0), sin(t·f_1), …]` with
/// frequencies spaced geometrically from 1 down to 1/10000.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("embedding dimension must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let f = (-(10_000f64.ln()) * frac).exp();
        out.push((t * f).sin());
        out.push((t * f).cos());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Channel width per resolution level; the note axis halves between
    /// levels, so segment widths must be divisible by `2^(levels-1)`.
    pub channels: Vec<usize>,
    pub cond_embed_dim: usize,
    pub time_embed_dim: usize,
    /// Upper bound on group-norm groups.
    pub groups: usize,
    pub attention: bool,
    pub segment_len: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            channels: vec![32, 64, 128],
            cond_embed_dim: 512,
            time_embed_dim: 128,
            groups: 8,
            attention: true,
            segment_len: crate::codecs::SEGMENT_LEN,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid("channels must be non-empty and positive"));
        }
        if self.cond_embed_dim == 0 || self.groups == 0 || self.segment_len == 0 {
            return Err(Error::invalid("cond_embed_dim, groups and segment_len must be positive"));
        }
        timestep_embedding(0.0, self.time_embed_dim)?;
        self.check_width(self.segment_len)
    }

    /// Divisor every segment width must be a multiple of.
    pub fn width_multiple(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    pub fn check_width(&self, n: usize) -> Result<()> {
        if n == 0 || !n.is_multiple_of(self.width_multiple()) {
            return Err(Error::shape(
                format!("width divisible by {}", self.width_multiple()),
                n,
            ));
        }
        Ok(())
    }
}

/// Per-row means and standard deviations used to standardize codecs.
///
/// Score onsets are made relative to the first note of each segment before
/// standardizing. Stds below 1e-8 are replaced by 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub p_mean: [f64; P_ROWS],
    pub p_std: [f64; P_ROWS],
    pub s_mean: [f64; S_ROWS],
    pub s_std: [f64; S_ROWS],
    pub c_mean: [f64; C_ROWS],
    pub c_std: [f64; C_ROWS],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            p_mean: [0.0; P_ROWS],
            p_std: [1.0; P_ROWS],
            s_mean: [0.0; S_ROWS],
            s_std: [1.0; S_ROWS],
            c_mean: [0.0; C_ROWS],
            c_std: [1.0; C_ROWS],
        }
    }
}

fn row_stats<const R: usize>(mats: &[Array2<f64>], masks: &[&[bool]]) -> ([f64; R], [f64; R]) {
    let mut mean = [0.0; R];
    let mut std = [1.0; R];
    for r in 0..R {
        let vals: Vec<f64> = mats
            .iter()
            .zip(masks)
            .flat_map(|(m, mask)| m.row(r).iter().zip(mask.iter()).filter(|(_, k)| **k).map(|(v, _)| *v).collect::<Vec<_>>())
            .collect();
        if vals.is_empty() {
            continue;
        }
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
        mean[r] = mu;
        std[r] = if var.sqrt() < 1e-8 { 1.0 } else { var.sqrt() };
    }
    (mean, std)
}

fn relative_onsets(s: &Array2<f64>, pad_mask: &[bool]) -> Array2<f64> {
    let mut out = s.clone();
    if pad_mask.first() == Some(&true) {
        let first = s[[0, 0]];
        out.row_mut(0).mapv_inplace(|v| v - first);
    }
    out
}

fn standardize(x: &Array2<f64>, mean: &[f64], std: &[f64], pad_mask: &[bool]) -> Array2<f64> {
    Array2::from_shape_fn(x.dim(), |(r, j)| {
        if pad_mask[j] {
            (x[[r, j]] - mean[r]) / std[r]
        } else {
            0.0
        }
    })
}

impl NormStats {
    /// Statistics over the real columns of `segments`.
    pub fn from_segments(segments: &[Segment]) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let masks: Vec<&[bool]> = segments.iter().map(|s| s.pad_mask.as_slice()).collect();
        let ps: Vec<_> = segments.iter().map(|s| s.p.clone()).collect();
        let ss: Vec<_> = segments.iter().map(|s| relative_onsets(&s.s, &s.pad_mask)).collect();
        let cs: Vec<_> = segments.iter().map(|s| s.c.clone()).collect();
        let (p_mean, p_std) = row_stats::<P_ROWS>(&ps, &masks);
        let (s_mean, s_std) = row_stats::<S_ROWS>(&ss, &masks);
        let (c_mean, c_std) = row_stats::<C_ROWS>(&cs, &masks);
        Ok(NormStats {
            p_mean,
            p_std,
            s_mean,
            s_std,
            c_mean,
            c_std,
        })
    }

    pub fn standardize_p(&self, p: &Array2<f64>, pad_mask: &[bool]) -> Array2<f64> {
        standardize(p, &self.p_mean, &self.p_std, pad_mask)
    }

    pub fn destandardize_p(&self, z: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(z.dim(), |(r, j)| z[[r, j]] * self.p_std[r] + self.p_mean[r])
    }

    pub fn condition_s(&self, s: &Array2<f64>, pad_mask: &[bool]) -> Array2<f64> {
        standardize(&relative_onsets(s, pad_mask), &self.s_mean, &self.s_std, pad_mask)
    }

    pub fn condition_c(&self, c: &Array2<f64>, pad_mask: &[bool]) -> Array2<f64> {
        standardize(c, &self.c_mean, &self.c_std, pad_mask)
    }
}

/// A standardized segment ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `5 × N` standardized p_codec.
    pub x0: Array2<f64>,
    /// `4 × N` normalized score condition.
    pub s: Array2<f64>,
    /// `7 × N` normalized perceptual condition.
    pub c: Array2<f64>,
    pub pad_mask: Vec<bool>,
}

/// One noise-prediction request.
#[derive(Clone, Debug)]
pub struct Query<'a> {
    /// `5 × N` noisy standardized codec.
    pub x_t: &'a Array2<f64>,
    pub t: usize,
    /// Normalized conditions; `None` selects the learned null embedding.
    pub s: Option<&'a Array2<f64>>,
    pub c: Option<&'a Array2<f64>>,
    pub pad_mask: &'a [bool],
}

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    cond: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            gn1: GroupNorm::new(store, &format!("{name}.gn1"), cin, cfg.groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, Conv2dSpec::same(3), rng),
            cond: Linear::new(store, &format!("{name}.cond"), cfg.cond_embed_dim, cout, true, rng),
            gn2: GroupNorm::new(store, &format!("{name}.gn2"), cout, cfg.groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, Conv2dSpec::same(3), rng),
            skip: (cin != cout)
                .then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, Conv2dSpec::same(1), rng)),
        }
    }

    /// `x: [B, H, W, cin]`, `cond: [B, 1, W, E]`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Var) -> Var {
        let h = self.gn1.forward(g, store, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, store, h);
        let bias = self.cond.forward(g, store, cond);
        let h = g.add(h, bias);
        let h = self.gn2.forward(g, store, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, store, x),
            None => x,
        };
        g.add(h, skip)
    }
}

#[derive(Clone, Debug)]
struct SelfAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl SelfAttention {
    fn new(store: &mut ParamStore, name: &str, ch: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        SelfAttention {
            norm: GroupNorm::new(store, &format!("{name}.norm"), ch, groups),
            q: Linear::new(store, &format!("{name}.q"), ch, ch, true, rng),
            k: Linear::new(store, &format!("{name}.k"), ch, ch, true, rng),
            v: Linear::new(store, &format!("{name}.v"), ch, ch, true, rng),
            out: Linear::new(store, &format!("{name}.out"), ch, ch, true, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let n = self.norm.forward(g, store, x);
        let tokens = g.reshape(n, &[b, h * w, c]);
        let q = self.q.forward(g, store, tokens);
        let k = self.k.forward(g, store, tokens);
        let v = self.v.forward(g, store, tokens);
        let a = g.attention(q, k, v);
        let o = self.out.forward(g, store, a);
        let o = g.reshape(o, &shape);
        g.add(x, o)
    }
}

#[derive(Clone, Debug)]
struct Net {
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    s_proj: Linear,
    c_proj: Linear,
    s_null: ParamId,
    c_null: ParamId,
    down: Vec<ResBlock>,
    mid1: ResBlock,
    attn: Option<SelfAttention>,
    mid2: ResBlock,
    up: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Net {
    fn new(store: &mut ParamStore, cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        let ch = &cfg.channels;
        let e = cfg.cond_embed_dim;
        let down = (0..ch.len())
            .map(|l| ResBlock::new(store, &format!("down{l}"), ch[l.saturating_sub(1)], ch[l], cfg, rng))
            .collect();
        let last = *ch.last().unwrap();
        let mid1 = ResBlock::new(store, "mid1", last, last, cfg, rng);
        let attn = cfg.attention.then(|| SelfAttention::new(store, "attn", last, cfg.groups, rng));
        let mid2 = ResBlock::new(store, "mid2", last, last, cfg, rng);
        let up = (0..ch.len() - 1)
            .map(|l| ResBlock::new(store, &format!("up{l}"), ch[l + 1] + ch[l], ch[l], cfg, rng))
            .collect();
        Net {
            conv_in: Conv2d::new(store, "conv_in", 1, ch[0], Conv2dSpec::same(3), rng),
            time1: Linear::new(store, "time1", cfg.time_embed_dim, e, true, rng),
            time2: Linear::new(store, "time2", e, e, true, rng),
            s_proj: Linear::new(store, "s_proj", S_ROWS, e, true, rng),
            c_proj: Linear::new(store, "c_proj", C_ROWS, e, true, rng),
            s_null: store.add_uniform("s_null", &[e], 1, rng),
            c_null: store.add_uniform("c_null", &[e], 1, rng),
            down,
            mid1,
            attn,
            mid2,
            up,
            norm_out: GroupNorm::new(store, "norm_out", ch[0], cfg.groups),
            conv_out: Conv2d::zeroed(store, "conv_out", ch[0], 1, Conv2dSpec::same(3)),
        }
    }

    /// `null + keep·(proj − null)`: keeps the projection where `keep` is 1.
    fn gated(g: &mut Graph, store: &ParamStore, proj: Var, null: ParamId, keep: Var, e: usize) -> Var {
        let null = g.param(store, null);
        let null = g.reshape(null, &[1, 1, e]);
        let diff = g.sub(proj, null);
        let kept = g.mul(diff, keep);
        g.add(kept, null)
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, cfg: &DenoiserConfig, inp: &NetInput) -> Var {
        let (b, n) = (inp.batch, inp.width);
        let e = cfg.cond_embed_dim;

        let temb = g.constant(inp.temb.clone());
        let t = self.time1.forward(g, store, temb);
        let t = g.silu(t);
        let t = self.time2.forward(g, store, t);
        let t = g.reshape(t, &[b, 1, e]);

        let s = g.constant(inp.s.clone());
        let s = self.s_proj.forward(g, store, s);
        let keep_s = g.constant(inp.keep_s.clone());
        let s = Self::gated(g, store, s, self.s_null, keep_s, e);
        let c = g.constant(inp.c.clone());
        let c = self.c_proj.forward(g, store, c);
        let keep_c = g.constant(inp.keep_c.clone());
        let c = Self::gated(g, store, c, self.c_null, keep_c, e);

        let cond = g.add(s, c);
        let cond = g.add(cond, t);
        let cond = g.silu(cond);
        let cond = g.reshape(cond, &[b, 1, n, e]);
        let levels = cfg.channels.len();
        let mut conds = vec![cond];
        for _ in 1..levels {
            let prev = *conds.last().unwrap();
            conds.push(g.avg_pool2d(prev, 1, 2));
        }

        let x = g.constant(inp.x.clone());
        let mut h = self.conv_in.forward(g, store, x);
        let mut skips = Vec::new();
        for (l, block) in self.down.iter().enumerate() {
            h = block.forward(g, store, h, conds[l]);
            if l + 1 < levels {
                skips.push(h);
                h = g.avg_pool2d(h, 1, 2);
            }
        }
        let bottom = conds[levels - 1];
        h = self.mid1.forward(g, store, h, bottom);
        if let Some(attn) = &self.attn {
            h = attn.forward(g, store, h);
        }
        h = self.mid2.forward(g, store, h, bottom);
        for l in (0..levels - 1).rev() {
            h = g.upsample2d(h, 1, 2);
            h = g.concat_last(h, skips[l]);
            h = self.up[l].forward(g, store, h, conds[l]);
        }
        let h = self.norm_out.forward(g, store, h);
        let h = g.silu(h);
        self.conv_out.forward(g, store, h)
    }
}

/// Batched network inputs in NHWC layout.
struct NetInput {
    batch: usize,
    width: usize,
    x: Tensor,
    temb: Tensor,
    s: Tensor,
    c: Tensor,
    keep_s: Tensor,
    keep_c: Tensor,
}

impl NetInput {
    fn build(cfg: &DenoiserConfig, rows: &[(&Array2<f64>, usize, Option<&Array2<f64>>, Option<&Array2<f64>>, &[bool])]) -> Result<Self> {
        let b = rows.len();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        let n = rows[0].0.ncols();
        cfg.check_width(n)?;
        let mut x = Vec::with_capacity(b * P_ROWS * n);
        let mut temb = Vec::with_capacity(b * cfg.time_embed_dim);
        let mut s = Vec::with_capacity(b * n * S_ROWS);
        let mut c = Vec::with_capacity(b * n * C_ROWS);
        let mut keep_s = Vec::with_capacity(b);
        let mut keep_c = Vec::with_capacity(b);
        for &(xt, t, sc, cc, mask) in rows {
            if xt.dim() != (P_ROWS, n) || mask.len() != n {
                return Err(Error::shape(format!("{P_ROWS}x{n}"), format!("{:?}", xt.dim())));
            }
            for r in 0..P_ROWS {
                for j in 0..n {
                    x.push(if mask[j] { xt[[r, j]] as f32 } else { 0.0 });
                }
            }
            temb.extend(timestep_embedding(t as f64, cfg.time_embed_dim)?.into_iter().map(|v| v as f32));
            push_columns(&mut s, sc, S_ROWS, n)?;
            push_columns(&mut c, cc, C_ROWS, n)?;
            keep_s.push(if sc.is_some() { 1.0 } else { 0.0 });
            keep_c.push(if cc.is_some() { 1.0 } else { 0.0 });
        }
        Ok(NetInput {
            batch: b,
            width: n,
            x: Tensor::new(vec![b, P_ROWS, n, 1], x),
            temb: Tensor::new(vec![b, cfg.time_embed_dim], temb),
            s: Tensor::new(vec![b, n, S_ROWS], s),
            c: Tensor::new(vec![b, n, C_ROWS], c),
            keep_s: Tensor::new(vec![b, 1, 1], keep_s),
            keep_c: Tensor::new(vec![b, 1, 1], keep_c),
        })
    }
}

/// Appends `rows × n` as note-major `[n, rows]`, zeros when absent.
fn push_columns(out: &mut Vec<f32>, m: Option<&Array2<f64>>, rows: usize, n: usize) -> Result<()> {
    match m {
        Some(m) => {
            if m.dim() != (rows, n) {
                return Err(Error::shape(format!("{rows}x{n}"), format!("{:?}", m.dim())));
            }
            for j in 0..n {
                out.extend(m.column(j).iter().map(|v| *v as f32));
            }
        }
        None => out.extend(std::iter::repeat_n(0.0, rows * n)),
    }
    Ok(())
}

/// Network parameters with everything needed to sample from them.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    norm: NormStats,
    params: ParamStore,
    net: Net,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DenoiserConfig,
    schedule: ScheduleParams,
    norm: NormStats,
}

impl DenoiserModel {
    /// Randomly initialized model; `seed` fixes the initialization.
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule, norm: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded(seed);
        let net = Net::new(&mut params, &config, &mut rng);
        Ok(DenoiserModel {
            config,
            schedule,
            norm,
            params,
            net,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Standardizes a physical-unit segment.
    pub fn prepare(&self, seg: &Segment) -> Example {
        Example {
            x0: self.norm.standardize_p(&seg.p, &seg.pad_mask),
            s: self.norm.condition_s(&seg.s, &seg.pad_mask),
            c: self.norm.condition_c(&seg.c, &seg.pad_mask),
            pad_mask: seg.pad_mask.clone(),
        }
    }

    /// Predicted noise for one segment; `None` conditions use the null
    /// embedding.
    pub fn predict_noise(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        s: Option<&Array2<f64>>,
        c: Option<&Array2<f64>>,
        pad_mask: &[bool],
    ) -> Result<Array2<f64>> {
        let q = Query { x_t, t, s, c, pad_mask };
        Ok(self.predict_batch(&[q])?.remove(0))
    }

    /// Batched [`DenoiserModel::predict_noise`]; all queries share a width.
    pub fn predict_batch(&self, queries: &[Query<'_>]) -> Result<Vec<Array2<f64>>> {
        for q in queries {
            self.schedule.check(q.t)?;
        }
        let rows: Vec<_> = queries.iter().map(|q| (q.x_t, q.t, q.s, q.c, q.pad_mask)).collect();
        let inp = NetInput::build(&self.config, &rows)?;
        let mut g = Graph::new();
        let out = self.net.forward(&mut g, &self.params, &self.config, &inp);
        let data = g.value(out).data();
        let n = inp.width;
        Ok((0..inp.batch)
            .map(|b| {
                let base = b * P_ROWS * n;
                Array2::from_shape_fn((P_ROWS, n), |(r, j)| f64::from(data[base + r * n + j]))
            })
            .collect())
    }

    /// Gives the zero-initialized output layer small non-zero weights.
    #[cfg(test)]
    pub(crate) fn perturb_output_for_tests(&mut self) {
        let id = self.params.find("conv_out.weight").unwrap();
        let w = self.params.get_mut(id).data_mut();
        w.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 * 0.37).sin() * 0.1);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            schedule: self.schedule.params(),
            norm: self.norm.clone(),
        };
        checkpoint::to_bytes(CHECKPOINT_KIND, &header, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let contents = checkpoint::from_bytes::<Header>(bytes, CHECKPOINT_KIND)?;
        let h = contents.header;
        let schedule = NoiseSchedule::from_params(h.schedule)
            .map_err(|e| Error::CorruptCheckpoint(format!("schedule: {e}")))?;
        let mut model = DenoiserModel::new(h.config, schedule, h.norm, 0)
            .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
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
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Weight of the reconstruction term.
    pub h: f64,
    /// Condition dropout probability.
    pub p_drop: f64,
    /// Drop score and perceptual conditions with separate draws; otherwise
    /// one draw drops both.
    pub independent_drop: bool,
    /// Upper bound on the per-step reconstruction weight `(1−ᾱ_t)/ᾱ_t`.
    pub recon_weight_cap: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Probability of replacing a training example by a mixup with another
    /// performance of the same score segment.
    pub mixup_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            h: 0.2,
            p_drop: 0.1,
            independent_drop: true,
            recon_weight_cap: 1.0,
            batch_size: 16,
            max_epochs: 1000,
            patience: 50,
            mixup_prob: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.h >= 0.0
            && (0.0..=1.0).contains(&self.p_drop)
            && (0.0..=1.0).contains(&self.mixup_prob)
            && self.recon_weight_cap >= 0.0
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid training configuration {self:?}")))
        }
    }
}

/// Random quantities of one training example.
#[derive(Clone, Debug)]
pub struct Draw {
    pub t: usize,
    pub keep_s: bool,
    pub keep_c: bool,
    /// `5 × N` standard normal noise.
    pub eps: Array2<f64>,
}

impl Draw {
    pub fn sample(rng: &mut ChaCha8Rng, steps: usize, n: usize, cfg: &TrainConfig) -> Self {
        let t = rng.random_range(1..=steps);
        let drop_s = rng.random::<f64>() < cfg.p_drop;
        let drop_c = if cfg.independent_drop {
            rng.random::<f64>() < cfg.p_drop
        } else {
            drop_s
        };
        let eps = Array2::from_shape_simple_fn((P_ROWS, n), || rng.sample(StandardNormal));
        Draw {
            t,
            keep_s: !drop_s,
            keep_c: !drop_c,
            eps,
        }
    }
}

/// Builds the masked loss graph for a batch with fixed draws.
fn loss_graph(model: &DenoiserModel, batch: &[Example], draws: &[Draw], cfg: &TrainConfig) -> Result<(Graph, Var)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch[0].x0.ncols();
    let sched = &model.schedule;
    let mut noisy = Vec::with_capacity(batch.len());
    for (ex, d) in batch.iter().zip(draws) {
        if ex.x0.ncols() != n {
            return Err(Error::shape(n, ex.x0.ncols()));
        }
        let xt = sched.q_sample(ex.x0.as_slice().expect("standard layout"), d.t, d.eps.as_slice().expect("standard layout"))?;
        noisy.push(Array2::from_shape_vec((P_ROWS, n), xt).expect("same shape"));
    }
    let rows: Vec<_> = batch
        .iter()
        .zip(draws)
        .zip(&noisy)
        .map(|((ex, d), xt)| (xt, d.t, d.keep_s.then_some(&ex.s), d.keep_c.then_some(&ex.c), ex.pad_mask.as_slice()))
        .collect();
    let inp = NetInput::build(&model.config, &rows)?;

    // weight_b = (1 + h·min((1−ᾱ)/ᾱ, cap)) / (real elements_b · B)
    let bsz = batch.len();
    let mut target = Vec::with_capacity(bsz * P_ROWS * n);
    let mut weight = Vec::with_capacity(bsz * P_ROWS * n);
    for (ex, d) in batch.iter().zip(draws) {
        let ab = sched.alpha_bar(d.t);
        let recon = ((1.0 - ab) / ab).min(cfg.recon_weight_cap);
        let real = ex.pad_mask.iter().filter(|m| **m).count().max(1);
        let w = (1.0 + cfg.h * recon) / (real * P_ROWS * bsz) as f64;
        for r in 0..P_ROWS {
            for j in 0..n {
                target.push(d.eps[[r, j]] as f32);
                weight.push(if ex.pad_mask[j] { w as f32 } else { 0.0 });
            }
        }
    }
    let mut g = Graph::new();
    let pred = model.net.forward(&mut g, &model.params, &model.config, &inp);
    let target = g.constant(Tensor::new(vec![bsz, P_ROWS, n, 1], target));
    let weight = g.constant(Tensor::new(vec![bsz, P_ROWS, n, 1], weight));
    let diff = g.sub(pred, target);
    let sq = g.square(diff);
    let weighted = g.mul(sq, weight);
    let loss = g.sum_all(weighted);
    Ok((g, loss))
}

/// Loss for a batch with explicit draws, without updating anything.
pub fn batch_loss(model: &DenoiserModel, batch: &[Example], draws: &[Draw], cfg: &TrainConfig) -> Result<f64> {
    let (g, loss) = loss_graph(model, batch, draws, cfg)?;
    Ok(f64::from(g.value(loss).data()[0]))
}

/// Optimizer state plus the objective settings.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    adam: Adam,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(cfg.learning_rate as f32);
        Ok(Trainer { cfg, adam })
    }

    /// Draws steps, noise and condition dropout from `rng`, takes one Adam
    /// step and returns the batch loss before the update.
    pub fn train_step(&mut self, model: &mut DenoiserModel, batch: &[Example], rng: &mut ChaCha8Rng) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = batch[0].x0.ncols();
        let draws: Vec<Draw> = batch
            .iter()
            .map(|_| Draw::sample(rng, model.schedule.steps(), n, &self.cfg))
            .collect();
        let (g, loss) = loss_graph(model, batch, &draws, &self.cfg)?;
        let value = f64::from(g.value(loss).data()[0]);
        if !value.is_finite() {
            return Err(Error::invalid("training loss is not finite"));
        }
        let grads = g.backward(loss);
        self.adam.step(&mut model.params, &grads);
        Ok(value)
    }

    /// Mean loss over `examples` with draws from a fixed seed.
    pub fn evaluate(&self, model: &DenoiserModel, examples: &[Example], seed: u64) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rng = seeded(seed);
        let mut total = 0.0;
        for chunk in examples.chunks(self.cfg.batch_size) {
            let n = chunk[0].x0.ncols();
            let draws: Vec<Draw> = chunk
                .iter()
                .map(|_| Draw::sample(&mut rng, model.schedule.steps(), n, &self.cfg))
                .collect();
            total += batch_loss(model, chunk, &draws, &self.cfg)? * chunk.len() as f64;
        }
        Ok(total / examples.len() as f64)
    }
}

/// Patience-based early stopping on a minimized quantity.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records `value` for `epoch`; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        if value < self.best {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Mixes each example, with probability `prob`, with a random other
/// performance of the same score segment.
fn maybe_mix(segs: &[Segment], partners: &[Vec<usize>], i: usize, prob: f64, rng: &mut ChaCha8Rng) -> Result<Segment> {
    if prob > 0.0 && partners[i].len() > 1 && rng.random::<f64>() < prob {
        let j = partners[i][rng.random_range(0..partners[i].len())];
        let lambda = rng.random::<f64>();
        return mixup(&segs[i], &segs[j], lambda);
    }
    Ok(segs[i].clone())
}

/// Trains until validation loss stops improving for `cfg.patience` epochs
/// or `cfg.max_epochs` is reached; the best-validation parameters are kept.
pub fn fit(model: &mut DenoiserModel, train: &[Segment], val: &[Segment], cfg: &TrainConfig) -> Result<FitReport> {
    fit_with(model, train, val, cfg, |_| {})
}

/// [`fit`] with a per-epoch callback, used for progress reporting.
pub fn fit_with(
    model: &mut DenoiserModel,
    train: &[Segment],
    val: &[Segment],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut rng = seeded(cfg.seed);
    let val_examples: Vec<Example> = val.iter().map(|s| model.prepare(s)).collect();
    let partners: Vec<Vec<usize>> = train
        .iter()
        .map(|a| (0..train.len()).filter(|&j| train[j].s == a.s && train[j].pad_mask == a.pad_mask).collect())
        .collect();
    let val_seed = cfg.seed ^ 0x005e_ed0f_0a11;
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| maybe_mix(train, &partners, i, cfg.mixup_prob, &mut rng).map(|s| model.prepare(&s)))
                .collect::<Result<Vec<_>>>()?;
            total += trainer.train_step(model, &batch, &mut rng)? * batch.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss: trainer.evaluate(model, &val_examples, val_seed)?,
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5}",
            record.train_loss,
            record.val_loss
        );
        on_epoch(&record);
        let (improved, stop) = stopper.update(epoch, record.val_loss);
        history.push(record);
        if improved {
            best.copy_from(&model.params);
        }
        if stop {
            break;
        }
    }
    model.params.copy_from(&best);
    Ok(FitReport {
        history,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        best_val_loss: stopper.best(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            channels: vec![8, 16],
            cond_embed_dim: 16,
            time_embed_dim: 8,
            groups: 4,
            attention: true,
            segment_len: 8,
        }
    }

    fn model() -> DenoiserModel {
        let sched = NoiseSchedule::new(50, 1e-4, 0.2).unwrap();
        DenoiserModel::new(tiny(), sched, NormStats::default(), 7).unwrap()
    }

    fn example(n: usize, real: usize, seed: u64) -> Example {
        let mut rng = seeded(seed);
        let mut gauss = |r: usize| Array2::from_shape_simple_fn((r, n), || rng.sample::<f64, _>(StandardNormal));
        let pad_mask: Vec<bool> = (0..n).map(|j| j < real).collect();
        let zero_pads = |mut m: Array2<f64>| {
            for j in real..n {
                m.column_mut(j).fill(0.0);
            }
            m
        };
        Example {
            x0: zero_pads(gauss(P_ROWS)),
            s: zero_pads(gauss(S_ROWS)),
            c: zero_pads(gauss(C_ROWS)),
            pad_mask,
        }
    }

    #[test]
    fn embedding_contract() {
        let e0 = timestep_embedding(0.0, 16).unwrap();
        for pair in e0.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
        assert!(timestep_embedding(3.0, 7).is_err());
        let embs: Vec<_> = (1..=1000).map(|t| timestep_embedding(t as f64, 32).unwrap()).collect();
        assert!(embs.iter().flatten().all(|v| v.abs() <= 1.0));
        for w in embs.windows(2) {
            let d: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(d > 0.0);
        }
    }

    #[test]
    fn output_shape_determinism_and_finiteness() {
        let mut m = model();
        m.perturb_output_for_tests();
        for n in [8, 200] {
            let ex = example(n, n, 1);
            let a = m.predict_noise(&ex.x0, 50, Some(&ex.s), Some(&ex.c), &ex.pad_mask).unwrap();
            let b = m.predict_noise(&ex.x0, 50, Some(&ex.s), Some(&ex.c), &ex.pad_mask).unwrap();
            assert_eq!(a.dim(), (P_ROWS, n));
            assert_eq!(a, b);
            assert!(a.iter().all(|v| v.is_finite()));
            let u = m.predict_noise(&ex.x0, 50, None, None, &ex.pad_mask).unwrap();
            assert_ne!(u, a);
        }
        let ex = example(9, 9, 1);
        assert!(m.predict_noise(&ex.x0, 50, None, None, &ex.pad_mask).is_err());
        let ex = example(8, 8, 1);
        assert!(m.predict_noise(&ex.x0, 51, None, None, &ex.pad_mask).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = model();
        let back = DenoiserModel::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.schedule, m.schedule);
        assert_eq!(back.norm, m.norm);
        assert_eq!(back.config, m.config);
        let ex = example(8, 6, 2);
        let a = m.predict_noise(&ex.x0, 10, Some(&ex.s), None, &ex.pad_mask).unwrap();
        let b = back.predict_noise(&ex.x0, 10, Some(&ex.s), None, &ex.pad_mask).unwrap();
        assert_eq!(a, b);
        let bytes = m.to_bytes().unwrap();
        assert!(matches!(
            DenoiserModel::from_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn padded_columns_do_not_affect_loss() {
        let m = model();
        let cfg = TrainConfig::default();
        let batch = vec![example(8, 5, 3), example(8, 8, 4)];
        let mut rng = seeded(9);
        let draws: Vec<_> = (0..2).map(|_| Draw::sample(&mut rng, 50, 8, &cfg)).collect();
        let base = batch_loss(&m, &batch, &draws, &cfg).unwrap();
        let mut changed = batch.clone();
        changed[0].x0.column_mut(6).fill(123.0);
        assert_eq!(batch_loss(&m, &changed, &draws, &cfg).unwrap(), base);
    }

    #[test]
    fn zero_h_is_pure_noise_mse() {
        let m = model();
        let cfg = TrainConfig {
            h: 0.0,
            ..TrainConfig::default()
        };
        let batch = vec![example(8, 8, 5)];
        let mut rng = seeded(1);
        let draws = vec![Draw::sample(&mut rng, 50, 8, &cfg)];
        // zero-initialized output layer predicts 0, so the loss is mean ε²
        let expected = draws[0].eps.iter().map(|e| e * e).sum::<f64>() / (P_ROWS * 8) as f64;
        let loss = batch_loss(&m, &batch, &draws, &cfg).unwrap();
        assert!((loss - expected).abs() < 1e-5 * expected.max(1.0));
    }

    #[test]
    fn dropout_rate_matches_probability() {
        let cfg = TrainConfig::default();
        let mut rng = seeded(11);
        let trials = 10_000;
        let dropped = (0..trials).filter(|_| !Draw::sample(&mut rng, 10, 1, &cfg).keep_s).count();
        let frac = dropped as f64 / trials as f64;
        assert!((frac - 0.1).abs() <= 0.01, "{frac}");
        let joint = TrainConfig {
            independent_drop: false,
            ..cfg
        };
        assert!((0..100).map(|_| Draw::sample(&mut rng, 10, 1, &joint)).all(|d| d.keep_s == d.keep_c));
    }

    #[test]
    fn standardization_round_trip() {
        let norm = NormStats {
            p_mean: [0.5, 0.4, 0.0, 0.9, 0.3],
            p_std: [0.1, 0.2, 0.01, 0.3, 0.4],
            ..NormStats::default()
        };
        let x = Array2::from_shape_fn((P_ROWS, 6), |(r, j)| 0.1 * r as f64 + 0.37 * j as f64);
        let mask = vec![true; 6];
        let back = norm.destandardize_p(&norm.standardize_p(&x, &mask));
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn early_stopping_contract() {
        let mut s = EarlyStopper::new(1);
        assert_eq!(s.update(1, 1.0), (true, false));
        assert_eq!(s.update(2, 2.0), (false, true));
        let mut s = EarlyStopper::new(3);
        for (e, v) in [3.0, 2.0, 2.5, 1.0, 1.5, 1.5].into_iter().enumerate() {
            s.update(e + 1, v);
        }
        assert_eq!(s.best_epoch(), Some(4));
    }

    #[test]
    fn empty_batch_rejected() {
        let mut m = model();
        let mut t = Trainer::new(TrainConfig::default()).unwrap();
        assert!(matches!(t.train_step(&mut m, &[], &mut seeded(0)), Err(Error::EmptyBatch)));
    }
}
