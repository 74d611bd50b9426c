//! Reverse diffusion, guidance and shallow-noise transfer.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codecs::{
    concat_real_columns, segment, segment_conditions, CCodec, PCodec, SCodec, Segment, ARTICULATION, BEAT_PERIOD, PEDAL, P_ROWS,
    VELOCITY,
};
use crate::denoiser::{DenoiserModel, Query};
use crate::error::{Error, Result};
use crate::rng::{stream, INITIAL_STREAM};

/// Floor applied to beat period and articulation of generated codecs.
pub const POSITIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Guidance weight on the unconditional branch.
    pub w: f64,
    pub seed: u64,
    /// Transfer depth; `None` generates from pure noise.
    pub t0: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            w: 1.2,
            seed: 0,
            t0: None,
        }
    }
}

/// `w·ε_uncond + (1−w)·ε_cond`, exactly as written: the weight sits on the
/// unconditional branch, so `w = 0` is purely conditional.
pub fn cfg_combine(eps_uncond: &Array2<f64>, eps_cond: &Array2<f64>, w: f64) -> Array2<f64> {
    assert_eq!(eps_uncond.dim(), eps_cond.dim(), "guidance inputs differ in shape");
    let mut out = eps_uncond * w;
    out.zip_mut_with(eps_cond, |o, c| *o += (1.0 - w) * c);
    out
}

/// Clamps into the codec's valid ranges and zeroes padded columns.
pub fn clamp_codec(p: &mut Array2<f64>, pad_mask: &[bool]) {
    for (j, mut col) in p.columns_mut().into_iter().enumerate() {
        if !pad_mask[j] {
            col.fill(0.0);
            continue;
        }
        for r in [BEAT_PERIOD, ARTICULATION] {
            col[r] = col[r].max(POSITIVE_FLOOR);
        }
        for r in [VELOCITY, PEDAL] {
            col[r] = col[r].clamp(0.0, 1.0);
        }
    }
}

/// One chain of the reverse process.
pub struct Chain<'a> {
    pub seg: &'a Segment,
    pub seed: u64,
    /// Index of this chain within its seed, selecting the noise streams.
    pub index: u64,
}

fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn masked(mut x: Array2<f64>, pad_mask: &[bool]) -> Array2<f64> {
    for (j, mut col) in x.columns_mut().into_iter().enumerate() {
        if !pad_mask[j] {
            col.fill(0.0);
        }
    }
    x
}

/// Runs the reverse process from `start` down to 1 for every chain and
/// returns standardized results.
fn reverse(model: &DenoiserModel, chains: &[Chain<'_>], mut xs: Vec<Array2<f64>>, start: usize, w: f64) -> Result<Vec<Array2<f64>>> {
    let sched = model.schedule();
    let examples: Vec<_> = chains.iter().map(|c| model.prepare(c.seg)).collect();
    for t in (1..=start).rev() {
        let mut queries = Vec::new();
        let need_uncond = w != 0.0;
        let need_cond = w != 1.0;
        for (ex, x) in examples.iter().zip(&xs) {
            if need_uncond {
                queries.push(Query {
                    x_t: x,
                    t,
                    s: None,
                    c: None,
                    pad_mask: &ex.pad_mask,
                });
            }
            if need_cond {
                queries.push(Query {
                    x_t: x,
                    t,
                    s: Some(&ex.s),
                    c: Some(&ex.c),
                    pad_mask: &ex.pad_mask,
                });
            }
        }
        let mut preds = model.predict_batch(&queries)?.into_iter();
        let mut next = Vec::with_capacity(xs.len());
        for ((chain, ex), x) in chains.iter().zip(&examples).zip(&xs) {
            let eps = match (need_uncond, need_cond) {
                (true, true) => {
                    let u = preds.next().unwrap();
                    let c = preds.next().unwrap();
                    cfg_combine(&u, &c, w)
                }
                _ => preds.next().unwrap(),
            };
            let x_flat = x.as_standard_layout();
            let eps_flat = eps.as_standard_layout();
            let mut mean = sched.posterior_mean(x_flat.as_slice().unwrap(), t, eps_flat.as_slice().unwrap())?;
            if t > 1 {
                let sd = sched.posterior_var(t).sqrt();
                let z = standard_normal(&mut stream(chain.seed, chain.index, t as u64), mean.len());
                mean.iter_mut().zip(z).for_each(|(m, z)| *m += sd * z);
            }
            let n = x.ncols();
            next.push(masked(Array2::from_shape_vec((P_ROWS, n), mean).unwrap(), &ex.pad_mask));
        }
        xs = next;
    }
    Ok(xs)
}

fn finish(model: &DenoiserModel, chains: &[Chain<'_>], xs: Vec<Array2<f64>>) -> Vec<Array2<f64>> {
    chains
        .iter()
        .zip(xs)
        .map(|(c, z)| {
            let mut p = model.norm().destandardize_p(&z);
            clamp_codec(&mut p, &c.seg.pad_mask);
            p
        })
        .collect()
}

fn check_width(chains: &[Chain<'_>]) -> Result<()> {
    let Some(first) = chains.first() else {
        return Err(Error::EmptyBatch);
    };
    if chains.iter().any(|c| c.seg.width() != first.seg.width()) {
        return Err(Error::invalid("chains in one batch must share a segment width"));
    }
    Ok(())
}

/// Samples p_codec segments (physical units) for each chain's conditions
/// starting from seeded Gaussian noise.
pub fn generate_batch(model: &DenoiserModel, chains: &[Chain<'_>], w: f64) -> Result<Vec<Array2<f64>>> {
    check_width(chains)?;
    let n = chains[0].seg.width();
    let xs = chains
        .iter()
        .map(|c| {
            let z = standard_normal(&mut stream(c.seed, c.index, INITIAL_STREAM), P_ROWS * n);
            masked(Array2::from_shape_vec((P_ROWS, n), z).unwrap(), &c.seg.pad_mask)
        })
        .collect();
    let out = reverse(model, chains, xs, model.schedule().steps(), w)?;
    Ok(finish(model, chains, out))
}

/// Single-segment [`generate_batch`] with `cfg.seed`.
pub fn generate(model: &DenoiserModel, seg: &Segment, cfg: &SampleConfig) -> Result<Array2<f64>> {
    let chain = Chain {
        seg,
        seed: cfg.seed,
        index: 0,
    };
    Ok(generate_batch(model, &[chain], cfg.w)?.remove(0))
}

/// Noises each chain's `seg.p` (the source performance) to depth `t0` and
/// denoises it under the chain's conditions. `t0 = 0` returns the sources.
pub fn transfer_batch(model: &DenoiserModel, chains: &[Chain<'_>], t0: usize, w: f64) -> Result<Vec<Array2<f64>>> {
    check_width(chains)?;
    if t0 == 0 {
        return Ok(chains.iter().map(|c| c.seg.p.clone()).collect());
    }
    model.schedule().check(t0)?;
    let n = chains[0].seg.width();
    let xs = chains
        .iter()
        .map(|c| {
            let z0 = model.norm().standardize_p(&c.seg.p, &c.seg.pad_mask);
            let eps = standard_normal(&mut stream(c.seed, c.index, INITIAL_STREAM), P_ROWS * n);
            let xt = model.schedule().q_sample(z0.as_slice().unwrap(), t0, &eps)?;
            Ok(masked(Array2::from_shape_vec((P_ROWS, n), xt).unwrap(), &c.seg.pad_mask))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = reverse(model, chains, xs, t0, w)?;
    Ok(finish(model, chains, out))
}

/// Single-segment [`transfer_batch`]; `seg.p` is the source and `seg.s`,
/// `seg.c` the target conditions.
pub fn transfer(model: &DenoiserModel, seg: &Segment, t0: usize, cfg: &SampleConfig) -> Result<Array2<f64>> {
    let chain = Chain {
        seg,
        seed: cfg.seed,
        index: 0,
    };
    Ok(transfer_batch(model, &[chain], t0, cfg.w)?.remove(0))
}

/// Joins per-segment outputs into one codec over the whole score. Segments
/// are concatenated as generated, with no smoothing at the boundaries.
pub fn concat_segments(segments: &[Segment], outputs: &[Array2<f64>], s: &SCodec, start_sec: f64) -> Result<PCodec> {
    if segments.len() != outputs.len() {
        return Err(Error::shape(segments.len(), outputs.len()));
    }
    let parts: Vec<&Array2<f64>> = outputs.iter().collect();
    let real: Vec<usize> = segments.iter().map(Segment::real_len).collect();
    let values = concat_real_columns(&parts, &real);
    if values.ncols() != s.len() {
        return Err(Error::shape(s.len(), values.ncols()));
    }
    Ok(PCodec {
        values,
        note_ids: s.note_ids.clone(),
        mask: vec![true; s.len()],
        start_sec,
    })
}

/// Start time given to codecs rendered from scratch.
pub const RENDER_START_SEC: f64 = 0.5;

fn piece_chains(segs: &[Segment], seed: u64) -> Vec<Chain<'_>> {
    segs.iter()
        .enumerate()
        .map(|(k, seg)| Chain {
            seg,
            seed,
            index: k as u64,
        })
        .collect()
}

/// Renders a whole score: cuts the conditions into segments, samples them
/// as one batch (`cfg.t0` ignored) and joins the results.
pub fn render_codec(model: &DenoiserModel, s: &SCodec, c: &CCodec, cfg: &SampleConfig) -> Result<PCodec> {
    let segs = segment_conditions(s, c, model.config().segment_len)?;
    let outputs = generate_batch(model, &piece_chains(&segs, cfg.seed), cfg.w)?;
    concat_segments(&segs, &outputs, s, RENDER_START_SEC)
}

/// Transfers a whole source codec to the conditions `c` at depth `t0`.
pub fn transfer_codec(model: &DenoiserModel, src: &PCodec, s: &SCodec, c: &CCodec, t0: usize, cfg: &SampleConfig) -> Result<PCodec> {
    let segs = segment(src, s, c, model.config().segment_len)?;
    let outputs = transfer_batch(model, &piece_chains(&segs, cfg.seed), t0, cfg.w)?;
    let mut out = concat_segments(&segs, &outputs, s, src.start_sec)?;
    if t0 == 0 {
        out.mask = src.mask.clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, NormStats};
    use crate::schedule::NoiseSchedule;
    use crate::synthetic;

    #[test]
    fn guidance_endpoints() {
        let u = Array2::from_shape_vec((1, 3), vec![0.3, -1.7, 2.2]).unwrap();
        let c = Array2::from_shape_vec((1, 3), vec![0.1, 5.5, -0.25]).unwrap();
        assert_eq!(cfg_combine(&u, &c, 0.0), c);
        assert_eq!(cfg_combine(&u, &c, 1.0), u);
        let one = Array2::from_elem((1, 1), 1.0);
        let zero = Array2::from_elem((1, 1), 0.0);
        assert!((cfg_combine(&one, &zero, 1.2)[[0, 0]] - 1.2).abs() < 1e-15);
        let same = cfg_combine(&u, &u, 3.7);
        assert!(same.iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    fn model() -> DenoiserModel {
        let cfg = DenoiserConfig {
            channels: vec![8, 16],
            cond_embed_dim: 16,
            time_embed_dim: 8,
            groups: 4,
            attention: false,
            segment_len: 8,
        };
        let mut m = DenoiserModel::new(cfg, NoiseSchedule::new(20, 1e-4, 0.2).unwrap(), NormStats::default(), 3).unwrap();
        m.perturb_output_for_tests();
        m
    }

    #[test]
    fn generation_is_reproducible_and_valid() {
        let m = model();
        let mut rng = crate::rng::seeded(1);
        let seg = synthetic::velocity_segment(&mut rng, 8, 0.5, &synthetic::VelocityTask::default());
        let cfg = SampleConfig { seed: 4, ..SampleConfig::default() };
        let a = generate(&m, &seg, &cfg).unwrap();
        let b = generate(&m, &seg, &cfg).unwrap();
        assert_eq!(a, b);
        for col in a.columns() {
            assert!(col[BEAT_PERIOD] >= POSITIVE_FLOOR && col[ARTICULATION] >= POSITIVE_FLOOR);
            assert!((0.0..=1.0).contains(&col[VELOCITY]) && (0.0..=1.0).contains(&col[PEDAL]));
        }
        let other = generate(&m, &seg, &SampleConfig { seed: 5, ..cfg.clone() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn transfer_bypass_and_range() {
        let m = model();
        let mut rng = crate::rng::seeded(2);
        let seg = synthetic::velocity_segment(&mut rng, 8, 0.5, &synthetic::VelocityTask::default());
        let cfg = SampleConfig::default();
        assert_eq!(transfer(&m, &seg, 0, &cfg).unwrap(), seg.p);
        assert!(matches!(transfer(&m, &seg, 21, &cfg), Err(Error::StepOutOfRange { .. })));
        let a = transfer(&m, &seg, 10, &cfg).unwrap();
        assert_eq!(a, transfer(&m, &seg, 10, &cfg).unwrap());
    }

    #[test]
    fn padded_columns_are_zero() {
        let mut p = Array2::from_elem((P_ROWS, 3), 5.0);
        clamp_codec(&mut p, &[true, true, false]);
        assert_eq!(p.column(0).to_vec(), [5.0, 1.0, 5.0, 5.0, 1.0]);
        assert!(p.column(2).iter().all(|v| *v == 0.0));
    }
}
