//! Housing-data preprocessing on a small file with the real column layout.

use std::path::PathBuf;

use frozen_attention::data::{ingest_ames, AMES_EXPECTED_FEATURES};
use frozen_attention::experiments::{run_ames, ExperimentConfig, ExperimentKind};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ames_small.csv")
}

#[test]
fn preprocessing_follows_the_documented_order() {
    let data = ingest_ames(fixture()).unwrap();
    assert_eq!(data.features.rows(), 10);
    // Five numeric columns; MS Zoning has two levels, Alley three (NA included).
    assert_eq!(data.numeric_columns, 5);
    assert_eq!(data.categorical_columns, 2);
    assert_eq!(data.features.cols(), 10);
    assert_eq!(data.imputed_entries, 2);
    assert!(data.feature_names.iter().any(|n| n == "Alley=NA"));
    assert!(data.feature_names.iter().all(|n| n != "Order" && n != "PID"));
    assert_eq!(data.warnings.len(), 1, "feature count differs from {AMES_EXPECTED_FEATURES}");

    assert!((data.target[0] - 215000f64.ln()).abs() <= 1e-12);
    for c in 0..data.numeric_columns {
        let col: Vec<f64> = (0..10).map(|r| data.features.get(r, c)).collect();
        let mean = col.iter().sum::<f64>() / 10.0;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 10.0;
        assert!(mean.abs() <= 1e-12, "{}: mean {mean}", data.feature_names[c]);
        assert!((var - 1.0).abs() <= 1e-12, "{}: variance {var}", data.feature_names[c]);
    }
    for c in data.numeric_columns..data.features.cols() {
        assert!((0..10).all(|r| matches!(data.features.get(r, c), 0.0 | 1.0)));
    }
}

#[test]
fn malformed_rows_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "Order,Lot Area,SalePrice\n1,100,2000\n2,200\n").unwrap();
    assert!(ingest_ames(&path).is_err());
    std::fs::write(&path, "Order,Lot Area\n1,100\n").unwrap();
    assert!(ingest_ames(&path).is_err());
}

#[test]
fn tiny_comparison_runs_end_to_end() {
    let mut cfg = ExperimentConfig::desk(ExperimentKind::Ames);
    cfg.n = 3;
    cfg.hidden = 4;
    cfg.heads = vec![1];
    cfg.train_size = 12;
    cfg.test_size = 4;
    cfg.epochs = 1;
    cfg.batch = 4;
    cfg.seeds = vec![0];
    let rec = run_ames(&cfg, &fixture()).unwrap();
    assert_eq!(rec.table[0]["rows"], 10);
    assert!(rec.metrics.iter().all(|m| m.values.len() == 1 && m.mean.is_finite()));
    assert!(rec.passed.is_some());
}
