//! Cross-module behaviors: generator quality, abort diagnostics, and the
//! checkpoint → evaluate path.

use dqroute_core::config::RunConfig;
use dqroute_core::datagen;
use dqroute_core::error::Error;
use dqroute_core::moe::Checkpoint;
use dqroute_core::trainer;

fn separable_probe_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.enable_difficulty = false;
    config.enable_moe = false;
    config.dataset.num_classes = 4;
    config.dataset.imbalance_ratio = 1.0;
    config.dataset.max_count = 60;
    config.dataset.feature_dim = 8;
    config.dataset.overlap = 0.0;
    config.dataset.hard_classes.clear();
    config.dataset.separation = 5.0;
    config.dataset.tau_m = 20;
    config.dataset.tau_t = 5;
    config.dataset.probe_per_class = 5;
    config.dataset.test_per_class = 25;
    config.dataset.seed = 3;
    config.model.hidden_dim = 16;
    config.optimizer.epochs = 40;
    config.optimizer.batch_size = 32;
    config
}

#[test]
fn well_separated_classes_are_nearly_perfectly_learnable() {
    // with no overlap the generator must produce classes a small probe
    // model separates almost perfectly; the artifact's own trainer is the
    // oracle
    let config = separable_probe_config();
    let outcome = trainer::train(&config, None).unwrap();
    let acc = outcome.final_report().acc_all;
    assert!(
        acc > 0.95,
        "balanced well-separated classes should exceed 95% test accuracy, got {acc}"
    );
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut config = separable_probe_config();
    // a catastrophic learning rate overflows the second-layer products
    // within the first epoch; training must abort with the failing batch
    // identified rather than continue on NaN
    config.optimizer.lr0 = 1e200;
    config.optimizer.epochs = 3;
    let dir = tempfile::tempdir().unwrap();
    match trainer::train(&config, Some(dir.path())) {
        Err(Error::NonFiniteLoss { epoch, .. }) => {
            assert_eq!(epoch, 0, "explosion should surface in the first epoch");
        }
        Err(other) => panic!("expected NonFiniteLoss, got {other:?}"),
        Ok(_) => panic!("expected NonFiniteLoss, training succeeded"),
    }
    let dump = std::fs::read_to_string(dir.path().join("abort.json")).unwrap();
    assert!(dump.contains("\"epoch\""), "dump: {dump}");
    assert!(dump.contains("\"batch\""), "dump: {dump}");
}

#[test]
fn checkpoint_evaluates_identically_to_training_bank() {
    let mut config = separable_probe_config();
    config.optimizer.epochs = 5;
    let dir = tempfile::tempdir().unwrap();
    let outcome = trainer::train(&config, Some(dir.path())).unwrap();

    let checkpoint = Checkpoint::load(&dir.path().join("model.json")).unwrap();
    let bank = checkpoint.to_bank().unwrap();
    let spec = config.long_tail_spec().unwrap();
    let (_, _, test) = datagen::generate(&spec, &config.gen_options()).unwrap();
    let split = spec.shot_split();
    let from_ckpt = trainer::evaluate(&bank, &test, &split, false, 32).unwrap();
    let from_run = trainer::evaluate(&outcome.bank, &test, &split, false, 32).unwrap();
    // group metrics are NaN here (every class is medium-shot), so compare
    // the defined fields
    assert_eq!(from_ckpt.acc_all, from_run.acc_all);
    assert_eq!(from_ckpt.per_class, from_run.per_class);
    assert_eq!(from_ckpt.acc_all, outcome.final_report().acc_all);
}

#[test]
fn generated_csv_trains_after_reload() {
    // gen-data → load_csv → the loaded split matches the generated one
    let config = separable_probe_config();
    let spec = config.long_tail_spec().unwrap();
    let (train, _, _) = datagen::generate(&spec, &config.gen_options()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    datagen::write_csv(&train, &path).unwrap();
    let reloaded = datagen::load_csv(&path, Some(spec.num_classes)).unwrap();
    assert_eq!(reloaded.labels, train.labels);
    assert_eq!(reloaded.features, train.features);
}
