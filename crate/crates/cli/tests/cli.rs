use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use perfdiff::midi::load_performance;
use perfdiff::notes::{load_alignment, Performance};
use perfdiff::synthetic::{write_corpus, CorpusOptions};

fn perfdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perfdiff")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    perfdiff(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        write_corpus(&root.join("corpus"), &CorpusOptions { pieces: 1, ..Default::default() }).unwrap();
        Fixture { _dir: dir, root }
    }

    fn corpus(&self, name: &str) -> PathBuf {
        self.root.join("corpus").join(name)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn checkpoint(&self) -> PathBuf {
        let out = self.path("model");
        let c = code(&[
            "train", "--synthetic", "16", "--channels", "8,16", "--cond-embed-dim", "8", "--time-embed-dim", "8",
            "--groups", "2", "--attention", "false", "--segment-len", "16", "--steps", "20", "--max-epochs", "1",
            "--out", s(&out),
        ]);
        assert_eq!(c, 0);
        out.join("model.ckpt")
    }
}

#[test]
fn help_and_version_exit_zero_and_show_defaults() {
    let out = perfdiff(&["render", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[default: 1.2]"), "{text}");
    assert_eq!(code(&["--version"]), 0);
    let sweep = String::from_utf8(perfdiff(&["sweep", "--help"]).stdout).unwrap();
    assert!(sweep.contains("--grid") && sweep.contains("--n-mc"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["render", "--w", "1.2"]), 1);
    assert_eq!(code(&["--jobs", "0", "evaluate", "--manifest", "nowhere.json", "--out", "x"]), 1);
}

#[test]
fn extract_then_invert_reproduces_the_performance() {
    let f = Fixture::new();
    let codec = f.path("p.csv");
    let midi = f.path("back.mid");
    let (score, perf, align) = (f.corpus("piece0.csv"), f.corpus("piece0_perf0.mid"), f.corpus("piece0_perf0_align.csv"));
    assert_eq!(code(&["extract", "--score", s(&score), "--perf", s(&perf), "--align", s(&align), "--out", s(&codec)]), 0);
    assert_eq!(code(&["invert", "--pcodec", s(&codec), "--score", s(&score), "--out", s(&midi)]), 0);

    let original = load_performance(&perf).unwrap();
    let matched: Vec<_> = load_alignment(&align)
        .unwrap()
        .pairs
        .iter()
        .filter_map(|p| p.perf_id.clone())
        .map(|id| original.note(&id).unwrap().clone())
        .collect();
    let sorted = |mut v: Vec<perfdiff::notes::PerfNote>| {
        v.sort_by(|a, b| a.onset_sec.total_cmp(&b.onset_sec).then(a.pitch.cmp(&b.pitch)));
        v
    };
    let back: Performance = load_performance(&midi).unwrap();
    let (want, got) = (sorted(matched), sorted(back.notes().to_vec()));
    assert_eq!(want.len(), got.len());
    for (a, b) in want.iter().zip(&got) {
        assert_eq!((a.pitch, a.velocity), (b.pitch, b.velocity));
        assert!((a.onset_sec - b.onset_sec).abs() <= 1e-6);
        assert!((a.duration_sec - b.duration_sec).abs() <= 1e-6);
    }
}

#[test]
fn missing_inputs_leave_no_outputs() {
    let f = Fixture::new();
    let out = f.path("out");
    let c = code(&["render", "--checkpoint", s(&f.path("none.ckpt")), "--score", s(&f.corpus("piece0.csv")),
        "--features", "0.5,0.5,0.5,0.5,0.5,0.5,0.5", "--out", s(&out)]);
    assert_eq!(c, 1);
    assert!(!out.exists());

    let ckpt = f.checkpoint();
    let c = code(&["render", "--checkpoint", s(&ckpt), "--score", s(&f.corpus("piece0.csv")),
        "--features", "0.5,0.5,0.5", "--out", s(&out)]);
    assert_eq!(c, 1);
    assert!(!out.exists());
    let c = code(&["transfer", "--checkpoint", s(&ckpt), "--score", s(&f.corpus("piece0.csv")),
        "--perf", s(&f.corpus("piece0_perf0.mid")), "--align", s(&f.corpus("piece0_perf0_align.csv")),
        "--features", "0.5,0.5,0.5,0.5,0.5,0.5,0.5", "--t0", "21", "--out", s(&out)]);
    assert_eq!(c, 1);
    assert!(!out.exists());
}

#[test]
fn command_line_overrides_config_file() {
    let f = Fixture::new();
    let cfg = f.path("train.cfg");
    std::fs::write(
        &cfg,
        "# desk model\nchannels = 8,16\ncond-embed-dim = 8\ntime_embed_dim = 8\ngroups = 2\nattention = false\n\
         segment_len = 16\nsteps = 20\nmax_epochs = 3\npatience = 10\n",
    )
    .unwrap();
    let out = f.path("m");
    let c = code(&["--config", s(&cfg), "train", "--synthetic", "16", "--max-epochs", "1", "--out", s(&out)]);
    assert_eq!(c, 0);
    let history = std::fs::read_to_string(out.join("reports/train_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2, "{history}");

    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&["--config", s(&cfg), "train", "--synthetic", "16", "--out", s(&f.path("m2"))]), 1);
}

#[test]
fn rendering_is_independent_of_worker_count() {
    let f = Fixture::new();
    let ckpt = f.checkpoint();
    let render = |jobs: &str, out: &str| {
        let out = f.path(out);
        let c = code(&["--jobs", jobs, "--seed", "4", "render", "--checkpoint", s(&ckpt), "--score",
            s(&f.corpus("piece0.csv")), "--c-codec", s(&f.path("c.csv")), "--out", s(&out)]);
        assert_eq!(c, 0);
        std::fs::read(out.join("midi/piece0.mid")).unwrap()
    };
    let (score, perf, align) = (f.corpus("piece0.csv"), f.corpus("piece0_perf0.mid"), f.corpus("piece0_perf0_align.csv"));
    assert_eq!(
        code(&["extract", "--score", s(&score), "--perf", s(&perf), "--align", s(&align), "--out", s(&f.path("p.csv")),
            "--feature-windows", s(&f.corpus("piece0_perf0_features.csv")), "--c-codec-out", s(&f.path("c.csv"))]),
        0
    );
    assert_eq!(render("1", "a"), render("3", "b"));
}
