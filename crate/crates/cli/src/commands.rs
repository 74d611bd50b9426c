use rand::seq::SliceRandom;
use rayon::prelude::*;

use perfdiff::codecs::{
    build_s_codec, c_codec_to_csv, extract_p_codec, invert_p_codec_with, p_codec_to_csv, s_codec_to_csv, segment,
    segment_conditions, CCodec, InvertOptions, PCodec, SCodec, Segment, C_NAMES,
};
use perfdiff::denoiser::{fit_with, DenoiserConfig, DenoiserModel, NormStats, TrainConfig};
use perfdiff::midi::{load_performance, performance_to_bytes};
use perfdiff::notes::{alignment_to_csv, load_score, NoteArray, Performance};
use perfdiff::proxy::{piano_roll, piano_rolls, proxy_train as fit_proxy, PianoRoll, ProxyConfig, ProxyModel, ProxyTrainConfig};
use perfdiff::rng::seeded;
use perfdiff::sampler::{concat_segments, generate_batch, transfer_batch, Chain, RENDER_START_SEC};
use perfdiff::schedule::NoiseSchedule;
use perfdiff::synthetic::VelocityTask;

use crate::args::{ExtractArgs, InvertArgs, ModelArgs, OptimArgs, ProxyPredictArgs, ProxyTrainArgs, RenderArgs, TrainArgs, TransferArgs};
use crate::inputs::{
    conditions, load, load_manifest, load_proxy_manifest, midi_with_alignment, stem, write, write_json, LoadedPerf, OutDir,
    ProxyTarget,
};
use crate::{CliError, CliResult};

pub struct Context {
    pub seed: u64,
    pub jobs: usize,
}

pub fn extract(a: &ExtractArgs) -> CliResult<()> {
    let score = load(&a.score, load_score)?;
    let perf = LoadedPerf::load(&score, &a.perf, &a.align, a.feature_windows.as_deref())?;
    let (p, s, c) = perf.codecs(&score)?;
    let p_csv = p_codec_to_csv(&p)?;
    let c_csv = match &a.c_codec_out {
        Some(_) => Some(c_codec_to_csv(&c)?),
        None => None,
    };
    let s_csv = a.s_codec_out.as_ref().map(|_| s_codec_to_csv(&s)).transpose()?;
    write(&a.out, p_csv)?;
    if let (Some(path), Some(text)) = (&a.c_codec_out, c_csv) {
        write(path, text)?;
    }
    if let (Some(path), Some(text)) = (&a.s_codec_out, s_csv) {
        write(path, text)?;
    }
    log::info!("encoded {} notes into {}", p.len(), a.out.display());
    Ok(())
}

pub fn invert(a: &InvertArgs) -> CliResult<()> {
    let score = load(&a.score, load_score)?;
    let p = load(&a.pcodec, perfdiff::codecs::load_p_codec)?;
    let s = build_s_codec(&score);
    let perf = invert_p_codec_with(
        &p,
        &s,
        InvertOptions {
            include_filled: a.include_filled,
        },
    )?;
    write(&a.out, performance_to_bytes(&perf)?)?;
    log::info!("wrote {} notes to {}", perf.notes().len(), a.out.display());
    Ok(())
}

/// Samples all segments of a piece, spreading contiguous chunks of chains
/// over the worker pool. Each chain draws from its own noise streams, so
/// the chunking does not change the result.
pub fn sample_piece(
    model: &DenoiserModel,
    segs: &[Segment],
    seed: u64,
    w: f64,
    t0: Option<usize>,
    jobs: usize,
) -> CliResult<Vec<ndarray::Array2<f64>>> {
    let chains: Vec<Chain<'_>> = segs
        .iter()
        .enumerate()
        .map(|(k, seg)| Chain {
            seg,
            seed,
            index: k as u64,
        })
        .collect();
    let size = chains.len().div_ceil(jobs.max(1)).max(1);
    let parts = chains
        .par_chunks(size)
        .map(|c| match t0 {
            None => generate_batch(model, c, w),
            Some(t0) => transfer_batch(model, c, t0, w),
        })
        .collect::<perfdiff::Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Renders a score from scratch, or transfers `source` at depth `t0`.
pub fn render_codec(
    model: &DenoiserModel,
    s: &SCodec,
    c: &CCodec,
    source: Option<(&PCodec, usize)>,
    w: f64,
    seed: u64,
    jobs: usize,
) -> CliResult<PCodec> {
    let n = model.config().segment_len;
    let (segs, start, t0) = match source {
        None => (segment_conditions(s, c, n)?, RENDER_START_SEC, None),
        Some((p, t0)) => (segment(p, s, c, n)?, p.start_sec, Some(t0)),
    };
    let outputs = sample_piece(model, &segs, seed, w, t0, jobs)?;
    let mut out = concat_segments(&segs, &outputs, s, start)?;
    if let Some((p, 0)) = source {
        out.mask = p.mask.clone();
    }
    Ok(out)
}

/// Decodes a rendered codec; note ids of the result are score ids.
pub fn decode(p: &PCodec, s: &SCodec) -> CliResult<Performance> {
    Ok(invert_p_codec_with(p, s, InvertOptions { include_filled: true })?)
}

/// Writes `<name>.mid`, `<name>_p_codec.csv` and `<name>_alignment.csv`.
pub fn write_rendering(out: &OutDir, name: &str, score: &NoteArray, p: &PCodec, perf: &Performance) -> CliResult<()> {
    let (bytes, align) = midi_with_alignment(score, perf)?;
    let p_csv = p_codec_to_csv(p)?;
    let a_csv = alignment_to_csv(&align)?;
    write(&out.midi(&format!("{name}.mid"))?, bytes)?;
    write(&out.codec(&format!("{name}_p_codec.csv"))?, p_csv)?;
    write(&out.codec(&format!("{name}_alignment.csv"))?, a_csv)?;
    Ok(())
}

fn check_w(w: f64) -> CliResult<()> {
    if w.is_finite() {
        Ok(())
    } else {
        Err(CliError::input("--w must be finite"))
    }
}

pub fn render(ctx: &Context, a: &RenderArgs) -> CliResult<()> {
    check_w(a.w)?;
    let model = load(&a.checkpoint, DenoiserModel::load)?;
    let score = load(&a.score, load_score)?;
    let s = build_s_codec(&score);
    let c = conditions(&a.conditions, &s.note_ids)?;
    let name = a.name.clone().unwrap_or_else(|| stem(&a.score));
    let p = render_codec(&model, &s, &c, None, a.w, ctx.seed, ctx.jobs)?;
    let perf = decode(&p, &s)?;
    write_rendering(&OutDir::new(&a.out), &name, &score, &p, &perf)?;
    log::info!("rendered {} notes as {name}", perf.notes().len());
    Ok(())
}

pub fn transfer(ctx: &Context, a: &TransferArgs) -> CliResult<()> {
    check_w(a.w)?;
    let model = load(&a.checkpoint, DenoiserModel::load)?;
    let steps = model.schedule().steps();
    if a.t0 > steps {
        return Err(CliError::input(format!("--t0 {} exceeds the model's {steps} steps", a.t0)));
    }
    let score = load(&a.score, load_score)?;
    let source = LoadedPerf::load(&score, &a.perf, &a.align, None)?;
    let p_src = extract_p_codec(&score, &source.perf, &source.align)?;
    let s = build_s_codec(&score);
    let c = conditions(&a.conditions, &s.note_ids)?;
    let name = a.name.clone().unwrap_or_else(|| format!("{}_t0_{}", stem(&a.perf), a.t0));
    let p = render_codec(&model, &s, &c, Some((&p_src, a.t0)), a.w, ctx.seed, ctx.jobs)?;
    let perf = invert_p_codec_with(&p, &s, InvertOptions::default())?;
    write_rendering(&OutDir::new(&a.out), &name, &score, &p, &perf)?;
    log::info!("transferred {} notes at t0 = {}", perf.notes().len(), a.t0);
    Ok(())
}

fn model_config(m: &ModelArgs) -> CliResult<(DenoiserConfig, NoiseSchedule)> {
    let config = DenoiserConfig {
        channels: m.channels.clone(),
        cond_embed_dim: m.cond_embed_dim,
        time_embed_dim: m.time_embed_dim,
        groups: m.groups,
        attention: m.attention,
        segment_len: m.segment_len,
    };
    config.validate()?;
    let schedule = NoiseSchedule::new(m.steps, m.beta_start, m.beta_end)?;
    Ok((config, schedule))
}

fn train_config(o: &OptimArgs, seed: u64) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        learning_rate: o.learning_rate,
        h: o.h,
        p_drop: o.p_drop,
        independent_drop: o.independent_drop,
        recon_weight_cap: o.recon_weight_cap,
        batch_size: o.batch_size,
        max_epochs: o.max_epochs,
        patience: o.patience,
        mixup_prob: o.mixup_prob,
        seed,
    };
    cfg.validate()?;
    if !(0.0..1.0).contains(&o.val_fraction) {
        return Err(CliError::input("--val-fraction must lie in [0, 1)"));
    }
    Ok(cfg)
}

/// Training and validation segments from a manifest. Whole pieces are
/// held out when there are several; a single piece splits by segment.
fn manifest_segments(path: &std::path::Path, n: usize, val_fraction: f64, seed: u64) -> CliResult<(Vec<Segment>, Vec<Segment>)> {
    let pieces = load_manifest(path)?;
    let mut per_piece = Vec::with_capacity(pieces.len());
    for piece in &pieces {
        if piece.performances.is_empty() {
            return Err(CliError::input(format!("piece {:?} has no performances", piece.name)));
        }
        let mut segs = Vec::new();
        for perf in &piece.performances {
            let (p, s, c) = perf.codecs(&piece.score)?;
            segs.extend(segment(&p, &s, &c, n)?);
        }
        per_piece.push(segs);
    }
    let mut rng = seeded(seed);
    let held = |len: usize| ((len as f64 * val_fraction).round() as usize).clamp(1, len - 1);
    if per_piece.len() >= 2 {
        let mut order: Vec<usize> = (0..per_piece.len()).collect();
        order.shuffle(&mut rng);
        let k = held(order.len());
        let mut val = Vec::new();
        let mut train = Vec::new();
        for (rank, &i) in order.iter().enumerate() {
            if rank < k {
                val.extend(per_piece[i].iter().cloned());
            } else {
                train.extend(per_piece[i].iter().cloned());
            }
        }
        Ok((train, val))
    } else {
        let mut segs = per_piece.pop().expect("one piece");
        if segs.len() < 2 {
            return Err(CliError::input("need at least two segments to hold one out for validation"));
        }
        segs.shuffle(&mut rng);
        let val = segs.split_off(segs.len() - held(segs.len()));
        Ok((segs, val))
    }
}

pub fn train(ctx: &Context, a: &TrainArgs) -> CliResult<()> {
    let (config, schedule) = model_config(&a.model)?;
    let cfg = train_config(&a.optim, ctx.seed)?;
    let n = config.segment_len;
    let (train, val) = match (&a.manifest, a.synthetic) {
        (Some(path), _) => manifest_segments(path, n, a.optim.val_fraction, ctx.seed)?,
        (None, Some(count)) => {
            if count == 0 {
                return Err(CliError::input("--synthetic needs at least one segment"));
            }
            let task = VelocityTask::default();
            let mut rng = seeded(ctx.seed);
            let train = task.dataset(&mut rng, count, n);
            let val = task.dataset(&mut rng, (count / 8).max(1), n);
            (train, val)
        }
        (None, None) => return Err(CliError::input("one of --manifest or --synthetic is required")),
    };
    for seg in train.iter().chain(&val) {
        config.check_width(seg.width())?;
    }
    let norm = NormStats::from_segments(&train)?;
    let mut model = DenoiserModel::new(config, schedule, norm, ctx.seed)?;
    log::info!(
        "training {} parameters on {} segments ({} validation)",
        model.num_parameters(),
        train.len(),
        val.len()
    );
    let report = fit_with(&mut model, &train, &val, &cfg, |_| {})?;

    let out = OutDir::new(&a.out);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_loss"]).map_err(internal)?;
    for r in &report.history {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string()])
            .map_err(internal)?;
    }
    let history = w.into_inner().map_err(internal)?;
    model.save(out.file("model.ckpt")?)?;
    write(&out.report("train_history.csv")?, history)?;
    write_json(
        &out.report("train_summary.json")?,
        &serde_json::json!({
            "best_epoch": report.best_epoch,
            "best_val_loss": report.best_val_loss,
            "epochs_run": report.history.len(),
            "parameters": model.num_parameters(),
            "train_segments": train.len(),
            "val_segments": val.len(),
            "model": model.config(),
            "schedule": model.schedule().params(),
            "train": cfg,
        }),
    )?;
    log::info!("best validation loss {:.5} at epoch {}", report.best_val_loss, report.best_epoch);
    Ok(())
}

pub fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

pub fn proxy_train(ctx: &Context, a: &ProxyTrainArgs) -> CliResult<()> {
    let channels: [usize; 2] = a
        .proxy_channels
        .as_slice()
        .try_into()
        .map_err(|_| CliError::input("--proxy-channels takes two widths"))?;
    let config = ProxyConfig {
        channels,
        time_pool: a.proxy_time_pool,
        groups: a.proxy_groups,
    };
    config.validate()?;
    let cfg = ProxyTrainConfig {
        learning_rate: a.proxy_learning_rate,
        epochs: a.proxy_epochs,
        batch_size: a.proxy_batch_size,
        val_fraction: a.proxy_val_fraction,
        seed: ctx.seed,
    };
    let examples = load_proxy_manifest(&a.manifest)?;
    let mut pairs: Vec<(PianoRoll, [f64; 7])> = Vec::new();
    for (perf, target) in &examples {
        match target {
            ProxyTarget::Constant(f) => pairs.extend(piano_rolls(perf)?.into_iter().map(|r| (r, *f))),
            ProxyTarget::Windows(ws) => {
                for w in &ws.0 {
                    pairs.push((piano_roll(perf, w.start_sec)?, w.values));
                }
            }
        }
    }
    let mut model = ProxyModel::new(config, ctx.seed)?;
    log::info!("training proxy on {} windows", pairs.len());
    let report = fit_proxy(&mut model, &pairs, &cfg)?;

    let out = OutDir::new(&a.out);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss"]).map_err(internal)?;
    for (i, l) in report.train_loss.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()]).map_err(internal)?;
    }
    let history = w.into_inner().map_err(internal)?;
    model.save(out.file("proxy.ckpt")?)?;
    write(&out.report("proxy_history.csv")?, history)?;
    write_json(
        &out.report("proxy_summary.json")?,
        &serde_json::json!({
            "pairs": pairs.len(),
            "final_train_loss": report.final_train_loss,
            "final_val_loss": report.final_val_loss,
            "model": model.config(),
            "train": cfg,
        }),
    )?;
    log::info!("proxy validation MSE {:.5}", report.final_val_loss);
    Ok(())
}

pub fn proxy_predict(a: &ProxyPredictArgs) -> CliResult<()> {
    let model = load(&a.checkpoint, ProxyModel::load)?;
    let perfs = a
        .perf
        .iter()
        .map(|p| load(p, load_performance))
        .collect::<CliResult<Vec<_>>>()?;
    let rows = a
        .perf
        .par_iter()
        .zip(&perfs)
        .map(|(path, perf)| -> CliResult<Vec<(String, String, [f64; 7])>> {
            let name = path.display().to_string();
            if a.per_window {
                let rolls = piano_rolls(perf)?;
                let refs: Vec<&PianoRoll> = rolls.iter().collect();
                let preds = model.predict_batch(&refs)?;
                Ok(preds
                    .into_iter()
                    .enumerate()
                    .map(|(k, f)| (name.clone(), format!("{}", k as f64 * perfdiff::proxy::WINDOW_SEC), f))
                    .collect())
            } else {
                Ok(vec![(name, "all".into(), model.predict_performance(perf)?)])
            }
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["performance", "window_start_sec"];
    header.extend(C_NAMES);
    w.write_record(&header).map_err(internal)?;
    for (name, window, f) in rows.into_iter().flatten() {
        let mut rec = vec![name, window];
        rec.extend(f.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(internal)?;
    }
    let bytes = w.into_inner().map_err(internal)?;
    write(&OutDir::new(&a.out).report("proxy_predictions.csv")?, bytes)?;
    Ok(())
}
