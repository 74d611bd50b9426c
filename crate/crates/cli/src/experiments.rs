//! Evaluation and experiment grids.

use rayon::prelude::*;

use perfdiff::codecs::{CCodec, PCodec, SCodec, C_ROWS};
use perfdiff::denoiser::DenoiserModel;
use perfdiff::metrics::{evaluate_piece, Aligned, Attribute, MetricsConfig, PieceInput, PieceReport, Report, METRIC_NAMES};
use perfdiff::notes::{Alignment, Performance};
use perfdiff::proxy::{proximity_row, proximity_to_csv, steering_report, steering_to_csv, ProxyModel, SteeringPiece};
use perfdiff::rng::mix;

use crate::args::{EvaluateArgs, MetricArgs, SweepArgs};
use crate::commands::{decode, internal, render_codec, write_rendering, Context};
use crate::inputs::{load, load_manifest, stem, write, write_json, LoadedPerf, LoadedPiece, OutDir};
use crate::{CliError, CliResult};

fn metrics_config(m: &MetricArgs, seed: u64) -> CliResult<MetricsConfig> {
    if m.n_mc == 0 {
        return Err(CliError::input("--n-mc must be at least 1"));
    }
    Ok(MetricsConfig {
        n_mc: m.n_mc,
        seed,
        min_pitch_cor_notes: m.min_pitch_cor_notes,
    })
}

fn check_ground_truth(pieces: &[LoadedPiece]) -> CliResult<()> {
    for p in pieces {
        if p.performances.len() < 2 {
            return Err(CliError::input(format!(
                "piece {:?} needs at least two performances, has {}",
                p.name,
                p.performances.len()
            )));
        }
    }
    Ok(())
}

/// Scores one rendering of `piece` against its human performances.
fn score_piece(
    piece: &LoadedPiece,
    perf: &Performance,
    align: &Alignment,
    index: usize,
    cfg: &MetricsConfig,
) -> CliResult<PieceReport> {
    let input = PieceInput {
        name: piece.name.clone(),
        score: &piece.score,
        rendered: Aligned { perf, align },
        ground_truth: piece
            .performances
            .iter()
            .map(|g| Aligned {
                perf: &g.perf,
                align: &g.align,
            })
            .collect(),
        markings: &piece.markings,
    };
    evaluate_piece(&input, index as u64, cfg).map_err(|e| CliError::input(format!("piece {:?}: {e}", piece.name)))
}

fn write_report(out: &OutDir, dir: &str, report: &Report) -> CliResult<()> {
    let csv = report.to_csv()?;
    let pieces = report.pieces_to_csv()?;
    write(&out.report(&format!("{dir}report.csv"))?, csv)?;
    write_json(&out.report(&format!("{dir}report.json"))?, &report.to_json())?;
    write(&out.report(&format!("{dir}pieces.csv"))?, pieces)?;
    Ok(())
}

pub fn evaluate(ctx: &Context, a: &EvaluateArgs) -> CliResult<()> {
    let cfg = metrics_config(&a.metrics, ctx.seed)?;
    let pieces = match (&a.manifest, &a.score) {
        (Some(path), _) => load_manifest(path)?,
        (None, Some(score_path)) => {
            let score = load(score_path, perfdiff::notes::load_score)?;
            if a.gt_perf.len() != a.gt_align.len() {
                return Err(CliError::input(format!(
                    "{} --gt-perf but {} --gt-align",
                    a.gt_perf.len(),
                    a.gt_align.len()
                )));
            }
            let performances = a
                .gt_perf
                .iter()
                .zip(&a.gt_align)
                .map(|(p, al)| LoadedPerf::load(&score, p, al, None))
                .collect::<CliResult<Vec<_>>>()?;
            let (Some(r), Some(ra)) = (&a.rendered, &a.rendered_align) else {
                return Err(CliError::input("--rendered and --rendered-align are required with --score"));
            };
            let rendered = Some(LoadedPerf::load(&score, r, ra, None)?);
            let markings = match &a.markings {
                Some(m) => load(m, perfdiff::metrics::load_markings)?,
                None => Vec::new(),
            };
            vec![LoadedPiece {
                name: a.name.clone().unwrap_or_else(|| stem(score_path)),
                score,
                markings,
                performances,
                rendered,
            }]
        }
        (None, None) => return Err(CliError::input("one of --manifest or --score is required")),
    };
    check_ground_truth(&pieces)?;
    if let Some(p) = pieces.iter().find(|p| p.rendered.is_none()) {
        return Err(CliError::input(format!("piece {:?} has no rendered performance", p.name)));
    }
    let reports = pieces
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let r = p.rendered.as_ref().expect("checked above");
            score_piece(p, &r.perf, &r.align, i, &cfg)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = Report::from_pieces(reports);
    write_report(&OutDir::new(&a.out), "", &report)?;
    log::info!("evaluated {} pieces", pieces.len());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GridKey {
    W,
    T0,
    Scale,
}

impl GridKey {
    fn name(self) -> &'static str {
        match self {
            GridKey::W => "w",
            GridKey::T0 => "t0",
            GridKey::Scale => "scale",
        }
    }
}

/// Parses `key=v1,v2,..`. Transfer depths may be written relative to the
/// diffusion length as `T`, `T/2` or `3T/4`; they resolve against `steps`.
pub fn parse_grid(spec: &str, steps: usize) -> CliResult<(GridKey, Vec<f64>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::input(format!("--grid {spec:?}: expected KEY=V1,V2,..")))?;
    let key = match key.trim() {
        "w" => GridKey::W,
        "t0" => GridKey::T0,
        "scale" => GridKey::Scale,
        other => return Err(CliError::input(format!("--grid: unknown key {other:?} (w, t0 or scale)"))),
    };
    let values = values
        .split(',')
        .map(|v| {
            let v = v.trim();
            let parsed = if key == GridKey::T0 { parse_depth(v, steps) } else { v.parse::<f64>().ok() };
            parsed
                .filter(|x| x.is_finite())
                .ok_or_else(|| CliError::input(format!("--grid: bad value {v:?}")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if values.is_empty() {
        return Err(CliError::input("--grid needs at least one value"));
    }
    if key == GridKey::T0 {
        if let Some(v) = values.iter().find(|&&v| v < 0.0 || v > steps as f64) {
            return Err(CliError::input(format!("--grid: t0 = {v} outside [0, {steps}]")));
        }
    }
    Ok((key, values))
}

fn parse_depth(v: &str, steps: usize) -> Option<f64> {
    if let Ok(n) = v.parse::<usize>() {
        return Some(n as f64);
    }
    let (num, den) = match v.split_once('/') {
        Some((n, d)) => (n, d.parse::<usize>().ok().filter(|&d| d > 0)?),
        None => (v, 1),
    };
    let mult = match num.strip_suffix('T')? {
        "" => 1,
        m => m.parse::<usize>().ok()?,
    };
    let t = mult * steps;
    t.is_multiple_of(den).then(|| (t / den) as f64)
}

fn label(key: GridKey, v: f64) -> String {
    format!("{}={v}", key.name())
}

struct PreparedPiece {
    s: SCodec,
    sources: Vec<(PCodec, CCodec)>,
}

fn prepare(piece: &LoadedPiece) -> CliResult<PreparedPiece> {
    let mut sources = Vec::new();
    let mut s_out = None;
    for perf in piece.performances.iter().take(2) {
        let (p, s, c) = perf.codecs(&piece.score)?;
        sources.push((p, c));
        s_out = Some(s);
    }
    Ok(PreparedPiece {
        s: s_out.expect("at least two performances"),
        sources,
    })
}

struct Rendering {
    p: PCodec,
    perf: Performance,
}

fn summary_header() -> Vec<String> {
    let mut h = vec!["key".to_string(), "value".into()];
    for attr in [Attribute::TempoCurve, Attribute::VelocityCurve] {
        for m in METRIC_NAMES {
            h.push(format!("{attr}_{m}_mean"));
            h.push(format!("{attr}_{m}_std"));
        }
    }
    h
}

fn summary_record(key: GridKey, value: f64, report: &Report) -> Vec<String> {
    let mut rec = vec![key.name().to_string(), value.to_string()];
    let cell = |m: Option<perfdiff::metrics::MeanStd>| match m {
        Some(m) => [m.mean.to_string(), m.std.to_string()],
        None => [String::new(), String::new()],
    };
    for attr in [Attribute::TempoCurve, Attribute::VelocityCurve] {
        let row = report.row(attr);
        for m in [row.deviation_multiple, row.kl_divergence, row.pearson] {
            rec.extend(cell(m));
        }
    }
    rec
}

pub fn sweep(ctx: &Context, a: &SweepArgs) -> CliResult<()> {
    if !a.w.is_finite() {
        return Err(CliError::input("--w must be finite"));
    }
    let cfg = metrics_config(&a.metrics, ctx.seed)?;
    let model = load(&a.checkpoint, DenoiserModel::load)?;
    let (key, grid) = parse_grid(&a.grid, model.schedule().steps())?;
    let proxy = a.proxy.as_ref().map(|p| load(p, ProxyModel::load)).transpose()?;
    if key == GridKey::Scale && proxy.is_none() {
        return Err(CliError::input("the scale grid needs --proxy"));
    }
    let pieces = load_manifest(&a.manifest)?;
    check_ground_truth(&pieces)?;
    let prepared = pieces.iter().map(prepare).collect::<CliResult<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..pieces.len()).map(|i| mix(ctx.seed, i as u64, 0)).collect();
    let out = OutDir::new(&a.out);
    let dir = format!("sweep_{}", key.name());

    let render = |i: usize, c: &CCodec, source: Option<(&PCodec, usize)>, w: f64| -> CliResult<Rendering> {
        let s = &prepared[i].s;
        let p = render_codec(&model, s, c, source, w, seeds[i], ctx.jobs)?;
        let perf = decode(&p, s)?;
        Ok(Rendering { p, perf })
    };

    if key == GridKey::Scale {
        let proxy = proxy.as_ref().expect("checked above");
        let results = (0..pieces.len())
            .into_par_iter()
            .map(|i| -> CliResult<(SteeringPiece, Vec<(String, Rendering)>)> {
                let c0 = &prepared[i].sources[0].1;
                let base = render(i, c0, None, a.w)?;
                let mut variants = Vec::new();
                let mut renders = Vec::new();
                for f in 0..C_ROWS {
                    for &g in &grid {
                        let mut c = c0.clone();
                        c.values.row_mut(f).mapv_inplace(|v| v * g);
                        let r = render(i, &c, None, a.w)?;
                        variants.push((f, g, proxy.predict_performance(&r.perf)?));
                        renders.push((format!("{}={g}", perfdiff::codecs::C_NAMES[f]), r));
                    }
                }
                let piece = SteeringPiece {
                    base: proxy.predict_performance(&base.perf)?,
                    variants,
                };
                renders.insert(0, ("base".into(), base));
                Ok((piece, renders))
            })
            .collect::<CliResult<Vec<_>>>()?;
        let steering: Vec<SteeringPiece> = results.iter().map(|r| r.0.clone()).collect();
        let csv = steering_to_csv(&steering_report(&steering)?)?;
        for ((_, renders), piece) in results.iter().zip(&pieces) {
            for (variant, r) in renders {
                write_rendering(&out, &format!("{dir}/{variant}/{}", piece.name), &piece.score, &r.p, &r.perf)?;
            }
        }
        write(&out.report("steering.csv")?, csv)?;
        log::info!("steering sweep over {} pieces done", pieces.len());
        return Ok(());
    }

    let mut reports = Vec::with_capacity(grid.len());
    let mut renderings = Vec::with_capacity(grid.len());
    let mut proximity = Vec::new();
    for &g in &grid {
        log::info!("{}", label(key, g));
        let rendered = (0..pieces.len())
            .into_par_iter()
            .map(|i| {
                let prep = &prepared[i];
                match key {
                    GridKey::W => render(i, &prep.sources[0].1, None, g),
                    _ => render(i, &prep.sources[1].1, Some((&prep.sources[0].0, g as usize)), a.w),
                }
            })
            .collect::<CliResult<Vec<_>>>()?;
        let piece_reports = pieces
            .par_iter()
            .zip(&rendered)
            .enumerate()
            .map(|(i, (piece, r))| score_piece(piece, &r.perf, &Alignment::by_id(&piece.score, &r.perf), i, &cfg))
            .collect::<CliResult<Vec<_>>>()?;
        if let (GridKey::T0, Some(proxy)) = (key, &proxy) {
            let triples = pieces
                .iter()
                .zip(&rendered)
                .map(|(piece, r)| {
                    Ok((
                        proxy.predict_performance(&piece.performances[0].perf)?,
                        proxy.predict_performance(&piece.performances[1].perf)?,
                        proxy.predict_performance(&r.perf)?,
                    ))
                })
                .collect::<perfdiff::Result<Vec<_>>>()?;
            proximity.push(proximity_row(label(key, g), &triples)?);
        }
        reports.push(Report::from_pieces(piece_reports));
        renderings.push(rendered);
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(summary_header()).map_err(internal)?;
    for (&g, report) in grid.iter().zip(&reports) {
        w.write_record(summary_record(key, g, report)).map_err(internal)?;
    }
    let summary = w.into_inner().map_err(internal)?;
    let json = serde_json::json!({
        "key": key.name(),
        "grid": grid,
        "reports": grid.iter().zip(&reports).map(|(g, r)| (label(key, *g), r.to_json())).collect::<serde_json::Map<_, _>>(),
    });
    for ((&g, report), rendered) in grid.iter().zip(&reports).zip(&renderings) {
        let sub = format!("{dir}/{}/", label(key, g));
        write_report(&out, &sub, report)?;
        for (piece, r) in pieces.iter().zip(rendered) {
            write_rendering(&out, &format!("{sub}{}", piece.name), &piece.score, &r.p, &r.perf)?;
        }
    }
    write(&out.report(&format!("{dir}.csv"))?, summary)?;
    write_json(&out.report(&format!("{dir}.json"))?, &json)?;
    if !proximity.is_empty() {
        write(&out.report("proximity.csv")?, proximity_to_csv(&proximity)?)?;
    }
    log::info!("sweep over {} = {:?} done", key.name(), grid);
    Ok(())
}
