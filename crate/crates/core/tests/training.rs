mod common;

use eacl::cli::config::load_config;
use eacl::cli::experiment::{prepare, run_experiment, Prepared};
use eacl::corpus::{synth_corpus, SynthConfig};
use eacl::encoder::{init_model, Checkpoint, ModelState, Stage};
use eacl::optim::Optimizer;
use eacl::trainer::{
    class_centers, enter_stage_two, predict, train_stage_one, train_stage_two, Ablation, TrainConfig,
};

fn bits(m: &ModelState) -> Vec<Vec<u64>> {
    let to_bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    vec![
        to_bits(m.encoder().to_flat()),
        to_bits(m.proj_cl().to_flat()),
        to_bits(m.head_ce().to_flat()),
        to_bits(m.anchor_hidden().as_slice().to_vec()),
    ]
}

fn small_setup(seed: u64) -> (Prepared, TrainConfig) {
    let corpus = synth_corpus(&SynthConfig {
        test_per_class: 5,
        dev_per_class: 3,
        ..SynthConfig::new(3, 12, vec![(0, 1)], 0.4, seed)
    })
    .unwrap();
    let config = TrainConfig {
        feature_dim: 64,
        hidden_dim: 16,
        batch_size: 8,
        stage1_epochs: 3,
        stage2_epochs: 2,
        learning_rate: 1e-3,
        optimizer: Optimizer::Adam,
        seed,
        ..TrainConfig::default()
    };
    (prepare(&corpus, &config).unwrap(), config)
}

fn fresh(p: &Prepared, c: &TrainConfig) -> ModelState {
    init_model(p.features.dim, c.hidden_dim, p.classes, &p.label_features, c.seed).unwrap()
}

#[test]
fn runs_are_deterministic() {
    let (p, c) = small_setup(3);
    let a = run_experiment(&p, &c).unwrap();
    let b = run_experiment(&p, &c).unwrap();
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.stage_one_log, b.stage_one_log);
    assert_eq!(a.stage_two_log, b.stage_two_log);
    assert_eq!(bits(&a.final_state), bits(&b.final_state));
    assert_eq!(a.final_state.current_anchors(), b.final_state.current_anchors());
}

#[test]
fn different_seeds_give_different_models() {
    let (p, c) = small_setup(3);
    let a = run_experiment(&p, &c).unwrap();
    let b = run_experiment(&p, &TrainConfig { seed: 4, ..c }).unwrap();
    assert_ne!(bits(&a.final_state), bits(&b.final_state));
}

#[test]
fn anchor_hidden_frozen_in_stage_one_and_everything_frozen_in_stage_two() {
    let (p, c) = small_setup(5);
    let mut state = fresh(&p, &c);
    let hidden_before = state.anchor_hidden().clone();
    let encoder_before = state.encoder().clone();
    train_stage_one(&mut state, &p.train, &c, None).unwrap();
    assert_eq!(state.anchor_hidden(), &hidden_before);
    assert_ne!(state.encoder(), &encoder_before);

    let after_one = bits(&state);
    let reps = state.represent(&p.train).unwrap();
    let labels: Vec<usize> = p.train.iter().map(|s| s.label).collect();
    enter_stage_two(&mut state, &c, &reps, &labels).unwrap();
    let anchors_before = state.current_anchors().clone();
    train_stage_two(&mut state, &p.train, &c, None).unwrap();
    assert_eq!(bits(&state), after_one);
    assert_ne!(state.current_anchors(), &anchors_before);
}

#[test]
fn stage_order_is_enforced() {
    let (p, c) = small_setup(6);
    let mut state = fresh(&p, &c);
    assert!(train_stage_two(&mut state, &p.train, &c, None).is_err());
    let reps = state.represent(&p.train).unwrap();
    let labels: Vec<usize> = p.train.iter().map(|s| s.label).collect();
    enter_stage_two(&mut state, &c, &reps, &labels).unwrap();
    assert_eq!(state.stage(), Stage::Two);
    assert!(train_stage_one(&mut state, &p.train, &c, None).is_err());
    assert!(enter_stage_two(&mut state, &c, &reps, &labels).is_err());
    assert!(state.encode_batch(&p.train[..2]).is_err());
}

#[test]
fn stage_two_initialization_follows_ablation() {
    let (p, c) = small_setup(7);
    let mut base = fresh(&p, &c);
    train_stage_one(&mut base, &p.train, &c, None).unwrap();
    let reps = base.represent(&p.train).unwrap();
    let labels: Vec<usize> = p.train.iter().map(|s| s.label).collect();
    let start = |ablation| {
        let mut s = base.clone();
        enter_stage_two(&mut s, &TrainConfig { ablation, ..c.clone() }, &reps, &labels).unwrap();
        s.current_anchors().clone()
    };
    let inherited = base.current_anchors().clone();
    for a in [Ablation::None, Ablation::NoAngle, Ablation::NoCe, Ablation::NoAdapt] {
        assert_eq!(start(a), inherited, "{a}");
    }
    assert_ne!(start(Ablation::NoInherit), inherited);
    let centers = class_centers(&reps, &labels, p.classes).unwrap();
    let centered = start(Ablation::CenterAnchors);
    for (c, center) in centers.iter().enumerate() {
        assert_eq!(centered.row(c), center.as_ref().unwrap().as_slice());
    }
}

#[test]
fn no_adapt_and_center_anchors_skip_stage_two() {
    let (p, c) = small_setup(8);
    for ablation in [Ablation::NoAdapt, Ablation::CenterAnchors] {
        let config = TrainConfig { ablation, ..c.clone() };
        let out = run_experiment(&p, &config).unwrap();
        assert!(out.stage_two_log.records.is_empty());
        assert_eq!(out.summary.ada_initial, out.summary.ada_final);
        let mut state = out.stage_one.clone();
        let reps = state.represent(&p.train).unwrap();
        let labels: Vec<usize> = p.train.iter().map(|s| s.label).collect();
        enter_stage_two(&mut state, &config, &reps, &labels).unwrap();
        assert!(train_stage_two(&mut state, &p.train, &config, None).is_err());
    }
}

#[test]
fn dev_selection_records_chosen_epoch() {
    let (p, c) = small_setup(9);
    let out = run_experiment(&p, &c).unwrap();
    let chosen = out.stage_one_log.selected_epoch.expect("dev split present");
    assert!(chosen <= c.stage1_epochs);
    let best = out
        .stage_one_log
        .records
        .iter()
        .filter_map(|r| r.dev_weighted_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    if chosen > 0 {
        assert_eq!(out.stage_one_log.records[chosen - 1].dev_weighted_f1, Some(best));
    }
}

#[test]
fn log_has_one_record_per_epoch() {
    let (p, c) = small_setup(10);
    let out = run_experiment(&p, &c).unwrap();
    assert_eq!(out.stage_one_log.records.len(), c.stage1_epochs);
    assert_eq!(out.stage_two_log.records.len(), c.stage2_epochs);
    let text = out.stage_one_log.to_jsonl().unwrap();
    assert_eq!(text.lines().count(), c.stage1_epochs);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["stage"], "one");
    }
}

#[test]
fn sgd_at_default_step_lowers_ada_loss() {
    let (p, c) = small_setup(11);
    let config = TrainConfig {
        optimizer: Optimizer::Sgd,
        learning_rate: 1e-5,
        ..c
    };
    let out = run_experiment(&p, &config).unwrap();
    assert!(out.summary.ada_final <= out.summary.ada_initial);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (p, c) = small_setup(12);
    let out = run_experiment(&p, &c).unwrap();
    let ckpt = Checkpoint::new(out.final_state.clone(), vec!["a".into(), "b".into(), "c".into()], p.features, "h".into());
    let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(predict(&back.model, &p.test).unwrap(), predict(&out.final_state, &p.test).unwrap());
}

#[test]
fn bundled_desk_config_parses() {
    let config = load_config(&common::fixture("desk.toml")).unwrap();
    assert_eq!(config.optimizer, Optimizer::Adam);
    assert_eq!((config.lambda1, config.lambda2, config.tau), (0.9, 0.01, 0.1));
    assert_eq!(config.stage1_epochs, 8);
}
