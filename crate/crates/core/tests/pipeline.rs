use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use medcap_core::manifest::read_jsonl;
use medcap_core::pipeline::{run_pipeline, LoadedConfig, RunOptions};
use medcap_core::qa::QAItem;
use medcap_core::report::parse_machine_readable;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

fn config_text(out: &Path) -> String {
    let text = std::fs::read_to_string(fixture_dir().join("run.toml")).unwrap();
    text.replace("output_dir = \"runs\"", &format!("output_dir = {:?}", out.display().to_string()))
}

fn load(out: &Path) -> LoadedConfig {
    LoadedConfig::from_str(&config_text(out), "run.toml", fixture_dir(), None).unwrap()
}

#[test]
fn fixture_counts_match_hand_computation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = load(tmp.path());
    let art = run_pipeline(&cfg, RunOptions::default()).unwrap();

    let items: Vec<QAItem> = read_jsonl(&art.qa_file).unwrap();
    let mut per_ds: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for q in &items {
        let ds = q.region_id.split(':').next().unwrap().to_string();
        let e = per_ds.entry(ds).or_default();
        match q.polarity {
            medcap_core::qa::Polarity::Positive => e.0 += 1,
            medcap_core::qa::Polarity::Negative => e.1 += 1,
        }
    }
    assert_eq!(per_ds["vindr_cxr"], (5, 8));
    assert_eq!(per_ds["lidc_idri"], (3, 4));
    assert_eq!(per_ds["skincon"], (5, 6));

    let card = |label: &str| art.scorecards.iter().find(|c| c.model == label).unwrap().clone();
    let a = card("Model A");
    let c = |ds: &str| a.datasets[ds].meddlc.counts;
    assert_eq!((c("vindr_cxr").pos_correct, c("vindr_cxr").neg_correct), (5, 7));
    assert_eq!((c("lidc_idri").pos_correct, c("lidc_idri").neg_correct), (3, 4));
    assert_eq!((c("skincon").pos_correct, c("skincon").neg_correct), (5, 4));
    let b = card("Model B");
    let c = |ds: &str| b.datasets[ds].meddlc.counts;
    assert_eq!((c("vindr_cxr").pos_correct, c("vindr_cxr").neg_correct), (3, 4));
    assert_eq!((c("lidc_idri").pos_correct, c("lidc_idri").neg_correct), (1, 2));
    assert_eq!((c("skincon").pos_correct, c("skincon").neg_correct), (2, 4));

    let report = parse_machine_readable(&std::fs::read_to_string(art.run_dir.join("report.json")).unwrap()).unwrap();
    let rows: Vec<(String, Option<f64>, f64, f64, f64)> =
        report.rows.iter().map(|r| (r.model.clone(), r.llm_score, r.meddlc_score, r.pos_qa, r.neg_qa)).collect();
    assert_eq!(rows, vec![("Model A".into(), Some(69.7), 92.4, 100.0, 84.7), ("Model B".into(), Some(71.1), 50.0, 44.4, 55.6)]);
    print!("{}", std::fs::read_to_string(art.run_dir.join("report.txt")).unwrap());
}

#[test]
fn missing_manifest_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = config_text(tmp.path()).replace("vindr/manifest.jsonl", "vindr/absent.jsonl");
    let err = LoadedConfig::from_str(&text, "run.toml", fixture_dir(), None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.message.contains("absent.jsonl"));
    assert!(!tmp.path().join("cache").exists());
}

#[test]
fn resume_after_deleting_report_makes_no_backend_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = load(tmp.path());
    let first = run_pipeline(&cfg, RunOptions::default()).unwrap();
    assert!(first.backend_calls > 0);
    let before = std::fs::read(first.run_dir.join("report.json")).unwrap();
    for r in &first.reports {
        std::fs::remove_file(r).unwrap();
    }
    let second = run_pipeline(&cfg, RunOptions { resume: true }).unwrap();
    assert_eq!(second.run_dir, first.run_dir);
    assert_eq!(second.backend_calls, 0);
    assert_eq!(std::fs::read(second.run_dir.join("report.json")).unwrap(), before);
}

#[test]
fn fresh_run_with_warm_cache_makes_no_backend_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = load(tmp.path());
    run_pipeline(&cfg, RunOptions::default()).unwrap();
    let again = run_pipeline(&cfg, RunOptions::default()).unwrap();
    assert_eq!(again.backend_calls, 0);
}

#[test]
fn independent_runs_give_identical_reports() {
    let (t1, t2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r1 = run_pipeline(&load(t1.path()), RunOptions::default()).unwrap();
    let r2 = run_pipeline(&load(t2.path()), RunOptions::default()).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    for f in ["report.json", "report.csv", "report.txt", "qa.jsonl", "focal.jsonl"] {
        assert_eq!(read(&r1.run_dir, f), read(&r2.run_dir, f), "{f} differs");
    }
    for name in ["model-a", "model-b"] {
        let f = format!("scorecards/{name}.json");
        assert_eq!(read(&r1.run_dir, &f), read(&r2.run_dir, &f));
    }
}
