mod common;

use rtxnet::datasets::load_manifest;
use rtxnet::metrics::{evaluate, RowStatus};
use rtxnet::model::Checkpoint;
use rtxnet::training::{train, TrainConfig};
use rtxnet::ModelConfig;

#[test]
fn trained_fixture_checkpoint_scores_above_30_db() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = common::write_dataset(&dir.path().join("data"), 2, 64);
    let manifest = load_manifest(&manifest_path).unwrap();
    let tcfg = TrainConfig {
        patch: 64,
        iterations: 500,
        ..Default::default()
    };
    let out = train(&manifest, ModelConfig::desk(), tcfg, &dir.path().join("run")).unwrap();
    assert!(out.final_loss.unwrap() < 0.05);

    let ck = Checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(ck.iteration, 500);
    let net = ck.network().unwrap();
    let report = evaluate(&manifest, "cross_attention", "test", |rgb, th| net.enhance(&ck.params, &ck.pca, rgb, th));
    assert_eq!(report.rows.len(), 2);
    for row in &report.rows {
        assert_eq!(row.status, RowStatus::Ok);
        assert!(row.psnr_db.unwrap() > 30.0, "{}: {:?}", row.id, row.psnr_db);
    }
    let baseline = evaluate(&manifest, "input", "test", |rgb, _| Ok(rgb.clone()));
    assert!(report.mean_psnr().unwrap() > baseline.mean_psnr().unwrap() + 10.0);
    assert!(report.mean_ssim().unwrap() > baseline.mean_ssim().unwrap());
}
