use tanhwarp::model::{HybridNet, ModelConfig, Stage};
use tanhwarp::training::{generate_synthetic, mean_view_boxes, train_stage, LossRecord, TrainConfig};

fn mean(records: &[LossRecord], f: impl Fn(&LossRecord) -> f64) -> f64 {
    records.iter().map(f).sum::<f64>() / records.len() as f64
}

#[test]
fn both_stages_reduce_their_loss() {
    let cfg = TrainConfig {
        stage2_iters: 150,
        ..TrainConfig::default()
    };
    let data = generate_synthetic(cfg.seed, 200).unwrap();
    let mut net = HybridNet::<f32>::new(ModelConfig::default()).unwrap();
    let prior = mean_view_boxes(&net, &data).unwrap();
    net.set_box_prior(&prior).unwrap();

    let mut log = Vec::new();
    train_stage(&mut net, Stage::Boxes, &cfg, &data, &mut log).unwrap();
    assert_eq!(log.len(), cfg.stage1_iters);
    // batches differ, so compare short windows rather than single steps
    let first = mean(&log[..5], |r| r.l_comp);
    let last = mean(&log[log.len() - 20..], |r| r.l_comp);
    assert!(last <= 0.5 * first, "stage-1 L_comp {first:.4} -> {last:.4}");

    let mut log2 = Vec::new();
    train_stage(&mut net, Stage::Full, &cfg, &data, &mut log2).unwrap();
    let start = mean(&log2[..5], |r| r.total);
    let end = mean(&log2[log2.len() - 20..], |r| r.total);
    assert!(end < start, "stage-2 total {start:.4} -> {end:.4}");
    assert!(log2.iter().all(|r| r.stage == 2 && r.l_inner > 0.0 && r.l_outer > 0.0));
}
