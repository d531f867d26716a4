mod common;

use common::tiny_config;
use rga_core::data::generate_synthetic;
use rga_core::model::Model;
use rga_core::train::{init_memory, run_experiment, train, train_prompt, LogRecord};

#[test]
fn prompt_stage_lowers_segmentation_loss() {
    let config = tiny_config(&[("prompt_epochs", "30")]);
    let splits = generate_synthetic(&config.synthetic_config()).unwrap();
    let mut model = Model::new(&config, splits.train.id_count(), None).unwrap();
    let report = train_prompt(&mut model, &splits.train, &mut |_: &LogRecord| {}).unwrap();
    assert_eq!(report.epoch_seg.len(), 30);
    assert!(report.final_seg < report.initial_seg, "{report:?}");
}

#[test]
fn zero_prompt_epochs_change_nothing() {
    let config = tiny_config(&[("prompt_epochs", "0")]);
    let splits = generate_synthetic(&config.synthetic_config()).unwrap();
    let mut model = Model::new(&config, splits.train.id_count(), None).unwrap();
    let before = model.clone();
    let report = train_prompt(&mut model, &splits.train, &mut |_: &LogRecord| {}).unwrap();
    assert!(report.epoch_seg.is_empty());
    assert_eq!(report.initial_seg, report.final_seg);
    assert_eq!(model, before);
    assert_eq!(Model::from_checkpoint(&model.to_checkpoint()).unwrap(), before);
}

#[test]
fn admitted_features_move_the_centers() {
    // a threshold every score clears
    let config = tiny_config(&[("tau", "0.01")]);
    let splits = generate_synthetic(&config.synthetic_config()).unwrap();
    let mut model = Model::new(&config, splits.train.id_count(), None).unwrap();
    let init = init_memory(&model, &splits.train).unwrap();
    let report = train(&mut model, &splits.train, &mut |_: &LogRecord| {}).unwrap();
    assert!(report.admitted.iter().all(|&a| a > 0), "{:?}", report.admitted);
    assert_ne!(model.memory.unwrap().centers, init.centers);
}

#[test]
fn nothing_admitted_keeps_the_stripe_centers() {
    let config = tiny_config(&[("tau", "0.999999")]);
    let splits = generate_synthetic(&config.synthetic_config()).unwrap();
    let mut model = Model::new(&config, splits.train.id_count(), None).unwrap();
    let init = init_memory(&model, &splits.train).unwrap();
    let report = train(&mut model, &splits.train, &mut |_: &LogRecord| {}).unwrap();
    assert!(report.admitted.iter().all(|&a| a == 0));
    assert_eq!(model.memory.unwrap().centers, init.centers);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let config = tiny_config(&[]);
    let splits = generate_synthetic(&config.synthetic_config()).unwrap();
    let run = || {
        let mut lines = Vec::new();
        let (model, report) = run_experiment(&config, &splits.train, &splits.query, &splits.gallery, None, &mut |r: &LogRecord| {
            lines.push(format!("{r:?}"))
        })
        .unwrap();
        (model.to_checkpoint().encode(), format!("{report:?}"), lines)
    };
    assert_eq!(run(), run());
}
