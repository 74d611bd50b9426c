//! Loading and validating inputs, and writing outputs.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use perfdiff::codecs::{
    broadcast_c_codec, build_s_codec, extract_p_codec, load_feature_windows, performed_onsets, CCodec, FeatureWindows,
    PCodec, SCodec, C_NAMES, C_ROWS,
};
use perfdiff::metrics::{load_markings, DynMarking};
use perfdiff::midi::{load_performance, performance_to_bytes, written_ids};
use perfdiff::notes::{load_alignment, load_score, AlignPair, Alignment, NoteArray, Performance};
use serde::Deserialize;

use crate::args::ConditionArgs;
use crate::{CliError, CliResult};

/// Feature value used when a performance comes without feature windows.
pub const NEUTRAL_FEATURE: f64 = 0.5;

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::input(format!("{}: no such file", path.display())))
    }
}

/// Checks the file exists, then loads it, naming the file in errors.
pub fn load<'a, T>(path: &'a Path, f: impl FnOnce(&'a Path) -> perfdiff::Result<T>) -> CliResult<T> {
    require_file(path)?;
    f(path).map_err(|e| {
        let e = CliError::from(e);
        match e {
            CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
            other => other,
        }
    })
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "piece".into(), |s| s.to_string_lossy().into_owned())
}

/// Output tree rooted at `--out`.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: &Path) -> Self {
        OutDir { root: root.to_path_buf() }
    }

    fn sub(&self, kind: &str, rel: &str) -> CliResult<PathBuf> {
        let path = self.root.join(kind).join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Internal(format!("{}: {e}", parent.display())))?;
        }
        Ok(path)
    }

    pub fn report(&self, rel: &str) -> CliResult<PathBuf> {
        self.sub("reports", rel)
    }

    pub fn midi(&self, rel: &str) -> CliResult<PathBuf> {
        self.sub("midi", rel)
    }

    pub fn codec(&self, rel: &str) -> CliResult<PathBuf> {
        self.sub("codecs", rel)
    }

    pub fn file(&self, rel: &str) -> CliResult<PathBuf> {
        self.sub("", rel)
    }
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Internal(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    write(path, text + "\n")
}

/// Conditions for a score from `--c-codec` or `--features`, then
/// `--scale-feature` factors.
pub fn conditions(args: &ConditionArgs, score_ids: &[String]) -> CliResult<CCodec> {
    let mut c = match (&args.c_codec, &args.features) {
        (Some(path), _) => {
            let c = load(path, perfdiff::codecs::load_c_codec)?;
            if c.note_ids != score_ids {
                return Err(CliError::input(format!(
                    "{}: note ids do not match the score",
                    path.display()
                )));
            }
            c
        }
        (None, Some(values)) => {
            let features: [f64; C_ROWS] = values
                .as_slice()
                .try_into()
                .map_err(|_| CliError::input(format!("--features takes {C_ROWS} values, got {}", values.len())))?;
            if features.iter().any(|v| !v.is_finite()) {
                return Err(CliError::input("--features values must be finite"));
            }
            CCodec::constant(score_ids.to_vec(), features)
        }
        (None, None) => return Err(CliError::input("one of --c-codec or --features is required")),
    };
    for (index, factor) in parse_scales(&args.scale_feature)? {
        c.values.row_mut(index).mapv_inplace(|v| v * factor);
    }
    Ok(c)
}

/// Parses `name=factor` pairs against the perceptual feature names.
pub fn parse_scales(items: &[String]) -> CliResult<Vec<(usize, f64)>> {
    items
        .iter()
        .map(|item| {
            let (name, factor) = item
                .split_once('=')
                .ok_or_else(|| CliError::input(format!("--scale-feature {item:?}: expected NAME=FACTOR")))?;
            let index = CCodec::feature_index(name.trim()).ok_or_else(|| {
                CliError::input(format!(
                    "--scale-feature: unknown feature {name:?} (one of {})",
                    C_NAMES.join(", ")
                ))
            })?;
            let factor: f64 = factor
                .trim()
                .parse()
                .ok()
                .filter(|f: &f64| f.is_finite())
                .ok_or_else(|| CliError::input(format!("--scale-feature {item:?}: factor is not a finite number")))?;
            Ok((index, factor))
        })
        .collect()
}

/// An aligned performance with optional feature windows.
#[derive(Clone, Debug)]
pub struct LoadedPerf {
    pub path: PathBuf,
    pub perf: Performance,
    pub align: Alignment,
    pub features: Option<FeatureWindows>,
}

impl LoadedPerf {
    pub fn load(score: &NoteArray, perf: &Path, align: &Path, features: Option<&Path>) -> CliResult<Self> {
        let p = load(perf, load_performance)?;
        let a = load(align, load_alignment)?;
        a.validate(score, Some(&p))
            .map_err(|e| CliError::input(format!("{}: {e}", align.display())))?;
        let features = features.map(|f| load(f, load_feature_windows)).transpose()?;
        Ok(LoadedPerf {
            path: perf.to_path_buf(),
            perf: p,
            align: a,
            features,
        })
    }

    /// p, s and c codecs of this performance. Without feature windows the
    /// conditions are neutral.
    pub fn codecs(&self, score: &NoteArray) -> CliResult<(PCodec, SCodec, CCodec)> {
        let p = extract_p_codec(score, &self.perf, &self.align)
            .map_err(|e| CliError::input(format!("{}: {e}", self.path.display())))?;
        let s = build_s_codec(score);
        let c = match &self.features {
            Some(w) => broadcast_c_codec(w, &p.note_ids, &performed_onsets(&p, &s)?)?,
            None => {
                log::warn!("{}: no feature windows, using neutral conditions", self.path.display());
                CCodec::constant(p.note_ids.clone(), [NEUTRAL_FEATURE; C_ROWS])
            }
        };
        Ok((p, s, c))
    }
}

#[derive(Debug)]
pub struct LoadedPiece {
    pub name: String,
    pub score: NoteArray,
    pub markings: Vec<DynMarking>,
    pub performances: Vec<LoadedPerf>,
    pub rendered: Option<LoadedPerf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    pieces: Vec<ManifestPiece>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestPiece {
    name: Option<String>,
    score: PathBuf,
    markings: Option<PathBuf>,
    #[serde(default)]
    performances: Vec<ManifestPerf>,
    rendered: Option<ManifestPerf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestPerf {
    perf: PathBuf,
    align: PathBuf,
    features: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map_or_else(PathBuf::new, Path::to_path_buf)
}

/// Loads every piece of a manifest; relative paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> CliResult<Vec<LoadedPiece>> {
    let manifest: Manifest = read_json(path)?;
    if manifest.pieces.is_empty() {
        return Err(CliError::input(format!("{}: no pieces", path.display())));
    }
    let base = base_dir(path);
    let mut names = BTreeSet::new();
    let mut pieces = Vec::with_capacity(manifest.pieces.len());
    for entry in manifest.pieces {
        let score_path = base.join(&entry.score);
        let score = load(&score_path, load_score)?;
        let name = entry.name.unwrap_or_else(|| stem(&entry.score));
        if !names.insert(name.clone()) {
            return Err(CliError::input(format!("{}: duplicate piece name {name:?}", path.display())));
        }
        let markings = match entry.markings {
            Some(m) => load(&base.join(m), load_markings)?,
            None => Vec::new(),
        };
        let load_perf = |p: &ManifestPerf| {
            LoadedPerf::load(
                &score,
                &base.join(&p.perf),
                &base.join(&p.align),
                p.features.as_ref().map(|f| base.join(f)).as_deref(),
            )
        };
        let performances = entry.performances.iter().map(load_perf).collect::<CliResult<Vec<_>>>()?;
        let rendered = entry.rendered.as_ref().map(load_perf).transpose()?;
        pieces.push(LoadedPiece {
            name,
            score,
            markings,
            performances,
            rendered,
        });
    }
    Ok(pieces)
}

/// One proxy training example: a performance with either one feature
/// vector for all its windows or per-window feature targets.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProxyExample {
    perf: PathBuf,
    features: Option<Vec<f64>>,
    feature_windows: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProxyManifest {
    examples: Vec<ProxyExample>,
}

pub enum ProxyTarget {
    Constant([f64; C_ROWS]),
    Windows(FeatureWindows),
}

pub fn load_proxy_manifest(path: &Path) -> CliResult<Vec<(Performance, ProxyTarget)>> {
    let manifest: ProxyManifest = read_json(path)?;
    if manifest.examples.is_empty() {
        return Err(CliError::input(format!("{}: no examples", path.display())));
    }
    let base = base_dir(path);
    manifest
        .examples
        .into_iter()
        .map(|ex| {
            let perf = load(&base.join(&ex.perf), load_performance)?;
            let target = match (ex.features, ex.feature_windows) {
                (Some(v), None) => {
                    let f: [f64; C_ROWS] = v.as_slice().try_into().map_err(|_| {
                        CliError::input(format!("{}: features need {C_ROWS} values", ex.perf.display()))
                    })?;
                    if f.iter().any(|x| !x.is_finite()) {
                        return Err(CliError::input(format!("{}: features must be finite", ex.perf.display())));
                    }
                    ProxyTarget::Constant(f)
                }
                (None, Some(w)) => ProxyTarget::Windows(load(&base.join(w), load_feature_windows)?),
                _ => {
                    return Err(CliError::input(format!(
                        "{}: give exactly one of features or feature_windows",
                        ex.perf.display()
                    )))
                }
            };
            Ok((perf, target))
        })
        .collect()
}

/// MIDI bytes of `perf` (whose note ids are score ids) and the alignment
/// of the score to the notes as they read back from those bytes.
pub fn midi_with_alignment(score: &NoteArray, perf: &Performance) -> CliResult<(Vec<u8>, Alignment)> {
    let bytes = performance_to_bytes(perf)?;
    let lookup: HashMap<&str, String> = perf.notes().iter().map(|n| n.id.as_str()).zip(written_ids(perf)).collect();
    let pairs = score
        .ids()
        .map(|id| AlignPair {
            score_id: id.to_string(),
            perf_id: lookup.get(id).cloned(),
        })
        .collect();
    Ok((bytes, Alignment { pairs }))
}
