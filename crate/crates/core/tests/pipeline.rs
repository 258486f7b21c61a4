use std::path::Path;

use deepshare::checkpoint::Checkpoint;
use deepshare::config::Config;
use deepshare::gates::GateCounter;
use deepshare::run::{read_manifest, train_from_config};
use deepshare::sharing::gate_ledger;
use deepshare::tensor::Tensor;

const CONFIG: &str = r#"
[model]
input = [1, 6, 6]
classes = 3
layers = [
  { type = "conv", channels = 4 },
  { type = "conv", channels = 4 },
  { type = "dense", units = 5, linear_channels = 1 },
]

[sharing]
budget = 90

[schedule]
batch_size = 8
gelu_phase = { epochs = 1, lr_start = 0.01 }
substitution = { epochs = 2, lr_start = 0.01 }
finetune = { epochs = 1, lr_start = 0.01 }

[data]
kind = "gratings"
examples = 24
test_examples = 9
"#;

#[test]
fn reloaded_checkpoint_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::parse(CONFIG, Path::new("inline.toml")).unwrap();
    let out = dir.path().join("run");
    let report = train_from_config(&cfg, dir.path(), 5, &out).unwrap();
    assert!(report.eval_accuracy.is_some());

    let ck = Checkpoint::load(&out.join("model.ckpt")).unwrap();
    assert!(ck.state.modes.iter().zip(&ck.state.gated).all(|(m, &g)| m[..g].iter().all(|x| x.is_drelu())));
    assert_eq!(ck.state.gated, [4, 4, 4]);
    let ledger = gate_ledger(&ck.network.specs, ck.network.shapes()).total;
    assert!(ledger <= 90);
    assert_eq!(read_manifest(&out).unwrap().gate_ledger_total, Some(ledger));

    let x = Tensor::new([4, 1, 6, 6], (0..144).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let counter = GateCounter::new();
    let a = ck.network.logits(&ck.params, &x, &ck.state.modes, &counter).unwrap();
    assert_eq!(counter.get(), 4 * ledger);

    let again = dir.path().join("again.ckpt");
    ck.save(&again).unwrap();
    let back = Checkpoint::load(&again).unwrap();
    let b = back.network.logits(&back.params, &x, &back.state.modes, &GateCounter::new()).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
