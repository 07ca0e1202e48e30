use roma_core::eval::evaluate;
use roma_core::rncl::{LossConfig, LossKind};
use roma_core::synth::{generate, split, GeneratorSpec};
use roma_core::trainer::{train, TrainConfig};

#[test]
fn rnc_training_on_clean_default_data_beats_chance_tenfold() {
    let ds = generate(&GeneratorSpec::default()).unwrap();
    let [train_set, val_set, _] = split(&ds, [0.8, 0.1, 0.1], 0).unwrap();
    let config = TrainConfig {
        loss: LossConfig {
            kind: LossKind::Rnc,
            ..LossConfig::default()
        },
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let (params, log) = train(&train_set, &val_set, &config, &mut || 0.0).unwrap();
    assert_eq!(log.epochs.len(), config.epochs);
    assert_eq!(log.epochs.last().unwrap().val_r1_t2p, evaluate(&val_set, &params, &config.dap).unwrap().t2p.r1);
    let chance = 100.0 / val_set.scenes.len() as f64;
    let r1 = evaluate(&val_set, &params, &config.dap).unwrap().t2p.r1;
    assert!(r1 >= 10.0 * chance, "val t2p R@1 {r1:.1} vs chance {chance:.1}");
}
