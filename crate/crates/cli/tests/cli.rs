use std::path::Path;
use std::process::{Command, Output};

use sidforge::corpus::{Attrs, Item, ItemCorpus};
use sidforge::eval::EvalReport;
use sidforge::jsonl;
use sidforge::pipeline::{self, ArtifactMeta, DecodedCandidate};
use sidforge::quantizer::{cluster_load, load_sids, Codebook};

fn sidforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sidforge"))
        .args(args)
        .env_remove("SIDFORGE_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sidforge(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("c.json");
    std::fs::write(
        &path,
        r#"{
  "seed": 11,
  "corpus": {"n_items": 150, "d_emb": 4, "n_clusters_true": 8, "n_requests": 120, "n_users": 20},
  "quantizer": {"layers": 2, "k": 4, "tau": 1.2},
  "tokenizer": {"d_hash": 4},
  "scorer": {"d_model": 8, "epochs": 1, "optimizer": {"batch_size": 32}},
  "decoder": {"beam_width": 10, "top_k": 5},
  "eval": {"ks": [1, 5, 10]}
}"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gen_data_then_quantize_produces_valid_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let d = tmp.path().join("d");
    let d_str = d.to_str().unwrap();
    ok(&["gen-data", "--config", &cfg, "--out", d_str]);
    ok(&["quantize", "--config", &cfg, "--dir", d_str]);
    let corpus = ItemCorpus::load(&d.join(pipeline::CORPUS)).unwrap();
    let codebook = Codebook::load(&d.join(pipeline::CODEBOOK)).unwrap();
    let sids = load_sids(&d.join(pipeline::SIDS)).unwrap();
    assert_eq!(sids.len(), corpus.len());
    assert_eq!(codebook.k, 4);
    assert!(sids.iter().all(|s| s.codes.len() == 2 && s.codes.iter().all(|&c| c < 4)));
    let meta: ArtifactMeta = jsonl::read_json(&pipeline::meta_path(&d.join(pipeline::SIDS))).unwrap();
    assert_eq!(meta.seed, 11);
}

#[test]
fn every_subcommand_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let d = tmp.path().join("run");
    let d_str = d.to_str().unwrap();
    let base = ["--config", cfg.as_str(), "--dir", d_str, "--threads", "2"];
    for stage in ["gen-data", "quantize", "analyze", "build-seqs", "train"] {
        ok(&[&[stage][..], &base[..]].concat());
    }
    ok(&[&["align", "--lambda-dpo", "1.5", "--beta", "0.2", "--dpo-target", "all-steps", "--c-clip", "2"][..], &base[..]].concat());
    ok(&[&["decode", "--beam-width", "8", "--top-k", "3", "--task", "purchase:search"][..], &base[..]].concat());
    let stdout = ok(&[&["eval"][..], &base[..]].concat());
    let printed: EvalReport = serde_json::from_str(stdout.trim()).unwrap();
    let saved: EvalReport = jsonl::read_json(&d.join(pipeline::REPORT)).unwrap();
    assert_eq!(printed, saved);
    assert_eq!(saved.seed, 11);
    assert!(saved.hr_at.windows(2).all(|w| w[0].all <= w[1].all));
    let cands: Vec<DecodedCandidate> = jsonl::read_jsonl(&d.join(pipeline::CANDIDATES)).unwrap();
    assert!(cands.iter().all(|c| c.rank < 3));
}

#[test]
fn tau_one_fills_symmetric_clusters_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let items: Vec<Item> = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]
        .iter()
        .enumerate()
        .map(|(i, e)| Item {
            item_id: i as u64,
            embedding: e.to_vec(),
            exposure_weight: 1.0,
            attrs: Attrs { l1: 0, l2: 0, l3: 0, seller: 0, brand: 0 },
            gmv: 1.0,
        })
        .collect();
    ItemCorpus::new(items).unwrap().save(&d.join(pipeline::CORPUS)).unwrap();
    let cfg = d.join("c.json");
    std::fs::write(&cfg, r#"{"quantizer": {"layers": 1, "k": 2}}"#).unwrap();
    ok(&["quantize", "--tau", "1.0", "--strict-capacity", "--config", cfg.to_str().unwrap(), "--dir", d.to_str().unwrap()]);
    let sids = load_sids(&d.join(pipeline::SIDS)).unwrap();
    let assign: Vec<usize> = sids.iter().map(|s| s.codes[0] as usize).collect();
    let loads = cluster_load(&assign, &[1.0; 4], 2);
    assert_eq!(loads, vec![2.0, 2.0]);
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"quantizer": {"kay": 3}}"#).unwrap();
    let out = sidforge(&["gen-data", "--config", bad.to_str().unwrap(), "--dir", d]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kay"));

    let out = sidforge(&["train", "--dir", d]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing input artifact"));

    let out = sidforge(&["serve"]);
    assert!(!out.status.success());

    let out = sidforge(&["decode", "--task", "nocolon", "--dir", d]);
    assert!(!out.status.success());
}

#[test]
fn strict_capacity_rejects_an_overweight_item() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let items: Vec<Item> = (0..4u64)
        .map(|i| Item {
            item_id: i,
            embedding: vec![i as f64],
            exposure_weight: if i == 0 { 10.0 } else { 1.0 },
            attrs: Attrs { l1: 0, l2: 0, l3: 0, seller: 0, brand: 0 },
            gmv: 1.0,
        })
        .collect();
    ItemCorpus::new(items).unwrap().save(&d.join(pipeline::CORPUS)).unwrap();
    let cfg = d.join("c.json");
    std::fs::write(&cfg, r#"{"quantizer": {"layers": 1, "k": 2, "tau": 1.0}}"#).unwrap();
    let args = ["quantize", "--config", cfg.to_str().unwrap(), "--dir", d.to_str().unwrap()];
    let out = sidforge(&[&args[..], &["--strict-capacity"]].concat());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("item 0"), "{}", String::from_utf8_lossy(&out.stderr));
    ok(&args);
}
