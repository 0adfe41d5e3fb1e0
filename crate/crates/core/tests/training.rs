use skinnet::datasets::{gen_synthetic, Manifest, Split, SynthSpec};
use skinnet::recnet::{Phase, RecConfig, RecModel};
use skinnet::segnet::{SegConfig, SegModel};
use skinnet::training::{evaluate_seg, train_cls, train_seg, TrainConfig};

fn corpus(dir: &std::path::Path) -> Manifest {
    gen_synthetic(&SynthSpec { seed: 21, train: 8, val: 4, test: 0, size: 40, ..SynthSpec::default() }, dir).unwrap()
}

fn seg() -> SegModel<f32> {
    SegModel::build(SegConfig { depth: 1, base_filters: 2, ..SegConfig::default() }, 3).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 4, seed: 3, ..TrainConfig::default() }
}

#[test]
fn segmentation_training_lowers_loss_and_keeps_best_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let mut model = seg();
    let h = train_seg(&mut model, &m, &cfg(4)).unwrap();
    assert_eq!(h.records.len(), 4);
    assert!(h.records.iter().all(|r| r.train_loss.is_finite() && r.val_jaccard.is_some()));
    assert!(h.records[3].train_loss < h.records[0].train_loss, "{:?}", h.records);
    let best = h.best().unwrap();
    let j = evaluate_seg(&model, &m, Split::Val).unwrap().segmentation.unwrap().mean_jaccard;
    assert!((j - best.val_jaccard.unwrap()).abs() < 1e-9, "{j} vs {best:?}");
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let mut model = seg();
    let before = model.checkpoint().to_bytes().unwrap();
    assert!(train_seg(&mut model, &m, &cfg(0)).unwrap().records.is_empty());
    assert_eq!(model.checkpoint().to_bytes().unwrap(), before);

    let mut rec = RecModel::<f32>::build(RecConfig { stem_filters: 2, num_blocks: 2, block_width: 1, head_units: 4, ..RecConfig::default() }, 1).unwrap();
    let before = rec.checkpoint().to_bytes().unwrap();
    assert!(train_cls(&mut rec, &model, &m, &cfg(0), Phase::HeadOnly).unwrap().records.is_empty());
    assert_eq!(rec.checkpoint().to_bytes().unwrap(), before);
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let model = seg();
    let before = model.checkpoint().to_bytes().unwrap();
    let a = evaluate_seg(&model, &m, Split::Val).unwrap().to_json();
    let b = evaluate_seg(&model, &m, Split::Val).unwrap().to_json();
    assert_eq!(a, b);
    assert_eq!(model.checkpoint().to_bytes().unwrap(), before);
}

#[test]
fn head_only_training_changes_only_the_head() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let seg = seg();
    let mut rec = RecModel::<f32>::build(RecConfig { stem_filters: 2, num_blocks: 2, block_width: 1, head_units: 4, ..RecConfig::default() }, 1).unwrap();
    let before = rec.clone();
    train_cls(&mut rec, &seg, &m, &cfg(1), Phase::HeadOnly).unwrap();
    let mut head_changed = 0;
    for (a, b) in before.params().iter().zip(rec.params().iter()) {
        if a.name.starts_with("head.") {
            head_changed += (a.tensor.data() != b.tensor.data()) as usize;
        } else {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }
    assert!(head_changed > 0);
}
