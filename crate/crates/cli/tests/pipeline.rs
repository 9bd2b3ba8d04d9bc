mod common;

use common::*;
use editdiff_gateway::mock::MockServer;

#[test]
fn golden_run_then_warm_rerun() {
    golden_and_warm_rerun().unwrap();
}

#[test]
fn wire_traffic() {
    let server = MockServer::start(mock_script()).unwrap();
    let root = tempfile::tempdir().unwrap();
    run_pipeline(root.path(), &server.base_url());
    check_wire(&server.captured()).unwrap();
}

#[test]
fn report_refuses_mixed_datasets() {
    let server = MockServer::start(mock_script()).unwrap();
    let root = tempfile::tempdir().unwrap();
    let report_dir = run_pipeline(root.path(), &server.base_url());
    // rewrite one summary as if produced from another dataset
    let path = report_dir.join("eval_detect.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["provenance"]["dataset_hash"] = "0".repeat(64).into();
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    let o = editdiff(&["report", report_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mismatched dataset hashes"), "{}", stderr(&o));
}
