use perfdiff::codecs::{extract_p_codec, load_feature_windows};
use perfdiff::metrics::load_markings;
use perfdiff::midi::load_performance;
use perfdiff::notes::{load_alignment, load_score};
use perfdiff::synthetic::{write_corpus, CorpusOptions};

#[test]
fn written_corpus_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let opts = CorpusOptions { pieces: 2, performances: 2, notes: 30, seed: 4 };
    let manifest = write_corpus(dir.path(), &opts).unwrap();
    let spec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    let path = |v: &serde_json::Value| dir.path().join(v.as_str().unwrap());
    let pieces = spec["pieces"].as_array().unwrap();
    assert_eq!(pieces.len(), 2);
    for piece in pieces {
        let score = load_score(path(&piece["score"])).unwrap();
        assert_eq!(score.len(), 30);
        assert!(!load_markings(path(&piece["markings"])).unwrap().is_empty());
        let perfs = piece["performances"].as_array().unwrap();
        assert_eq!(perfs.len(), 2);
        for p in perfs {
            let perf = load_performance(path(&p["perf"])).unwrap();
            let align = load_alignment(path(&p["align"])).unwrap();
            align.validate(&score, Some(&perf)).unwrap();
            extract_p_codec(&score, &perf, &align).unwrap();
            assert!(!load_feature_windows(path(&p["features"])).unwrap().0.is_empty());
        }
    }
    let proxy: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("proxy_manifest.json")).unwrap()).unwrap();
    assert_eq!(proxy["examples"].as_array().unwrap().len(), 4);
}

#[test]
fn corpus_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpus(a.path(), &CorpusOptions::default()).unwrap();
    write_corpus(b.path(), &CorpusOptions::default()).unwrap();
    for name in ["piece0.csv", "piece1_perf2.mid", "piece1_perf2_align.csv", "piece0_perf0_features.csv"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}
