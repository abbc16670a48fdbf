mod common;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use drct::checkpoint::Checkpoint;
use drct::data::{synthetic_corpus, AugmentationSpec, PatchSampler, PatchSpec};
use drct::train::{
    advance_stage, l2_loss, loss, lr_at, run_plan, scalar, train_step, AdamConfig, LogRecord, LoopOptions,
    LossKind, StageAdvance, StageId, StagePlan, StageSpec, TrainState,
};
use drct::{Error, Network};

fn tiny_net(dtype: DType, seed: u64) -> Network {
    Network::build(&common::tiny_config(2), seed, dtype, &Device::Cpu).unwrap()
}

fn batch(dtype: DType, seed: u64) -> (Tensor, Tensor) {
    let lr = common::random_image(2, 4, 4, seed).to_tensor(dtype, &Device::Cpu).unwrap();
    let hr = common::random_image(2, 8, 8, seed + 1).to_tensor(dtype, &Device::Cpu).unwrap();
    (lr, hr)
}

fn sampler(seed: u64) -> PatchSampler {
    let pairs = synthetic_corpus(3, 24, 2, seed).unwrap();
    let aug = AugmentationSpec {
        seed,
        ..AugmentationSpec::default()
    };
    PatchSampler::new(pairs, PatchSpec::new(8, 2).unwrap(), aug).unwrap()
}

fn bits(net: &Network) -> HashMap<String, Vec<u64>> {
    common::params_f64(net.params())
        .into_iter()
        .map(|(k, v)| (k, v.iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn adam_update_matches_scalar_recursion() {
    let net = tiny_net(DType::F64, 1);
    let stage = StageSpec {
        base_lr: 1e-3,
        ..StageSpec::new(StageId::L1Finetune, "x", LossKind::L1, 100)
    };
    let mut state = TrainState::new(&net, 0).unwrap();
    let mut oracle: HashMap<String, Vec<common::ScalarAdam>> = HashMap::new();
    for step in 0..3 {
        let (lr, hr) = batch(DType::F64, 10 + step);
        let before = common::params_f64(net.params());
        let l = loss(LossKind::L1, &net.forward(&lr).unwrap(), &hr).unwrap();
        let expected_loss = scalar(&l).unwrap();
        let grads = l.backward().unwrap();
        let mut expected = HashMap::new();
        for (name, var) in net.params().iter() {
            let g = grads
                .get(var.as_tensor())
                .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
                .unwrap_or_else(|| vec![0.0; var.as_tensor().elem_count()]);
            let slots = oracle
                .entry(name.to_string())
                .or_insert_with(|| (0..g.len()).map(|_| common::ScalarAdam::new()).collect());
            let p: Vec<f64> = before[name]
                .iter()
                .zip(&g)
                .zip(slots.iter_mut())
                .map(|((p, g), s)| s.step(*p, *g, stage.lr(step)))
                .collect();
            expected.insert(name.to_string(), p);
        }
        let got_loss = train_step(&mut state, &net, &lr, &hr, &stage, &AdamConfig::default()).unwrap();
        assert_eq!(got_loss, expected_loss);
        let after = common::params_f64(net.params());
        for (name, want) in &expected {
            for (a, b) in after[name].iter().zip(want) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{name} step {step}: {a} vs {b}");
            }
        }
    }
    assert_eq!(state.iteration, 3);
    assert_eq!(state.stage_iteration, 3);
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let net = tiny_net(DType::F64, 2);
    let (lr, _) = batch(DType::F64, 3);
    let hr = net.forward(&lr).unwrap().detach();
    let before = bits(&net);
    let stage = StageSpec::new(StageId::L2Polish, "x", LossKind::L2, 10);
    let mut state = TrainState::new(&net, 0).unwrap();
    let l = train_step(&mut state, &net, &lr, &hr, &stage, &AdamConfig::default()).unwrap();
    assert_eq!(l, 0.0);
    assert_eq!(bits(&net), before);
    assert!(state.moments_are_zero().unwrap());
}

#[test]
fn non_finite_loss_reports_divergence() {
    let net = tiny_net(DType::F32, 2);
    let (lr, hr) = batch(DType::F32, 3);
    let hr = (hr * f64::NAN).unwrap();
    let stage = StageSpec::new(StageId::L1Finetune, "x", LossKind::L1, 10);
    let mut state = TrainState::new(&net, 0).unwrap();
    let err = train_step(&mut state, &net, &lr, &hr, &stage, &AdamConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Diverged { iteration: 0, .. }));
}

fn run(seed: u64, iters: u64) -> (Vec<LogRecord>, HashMap<String, Vec<u64>>) {
    let net = Network::build(&common::tiny_config(2), seed, DType::F32, &Device::Cpu).unwrap();
    let plan = StagePlan::new(vec![StageSpec::new(StageId::L1Finetune, "main", LossKind::L1, iters)]).unwrap();
    let corpora = HashMap::from([("main".to_string(), sampler(seed))]);
    let val = synthetic_corpus(1, 16, 2, 99).unwrap();
    let mut state = TrainState::new(&net, seed).unwrap();
    let opts = LoopOptions {
        batch_size: 2,
        ..LoopOptions::default()
    };
    let mut log = Vec::new();
    run_plan(&net, &plan, &corpora, &val, &mut state, &opts, &mut |r| log.push(r.clone())).unwrap();
    (log, bits(&net))
}

#[test]
fn fixed_seed_runs_are_bitwise_reproducible() {
    let (log_a, params_a) = run(5, 10);
    let (log_b, params_b) = run(5, 10);
    assert_eq!(log_a.len(), 10);
    assert_eq!(log_a, log_b);
    assert_eq!(params_a, params_b);
    let (log_c, _) = run(6, 10);
    assert_ne!(log_a, log_c);
}

#[test]
fn logged_rate_follows_the_schedule() {
    let (log, _) = run(1, 8);
    for rec in &log {
        let expected = lr_at(rec.stage_iteration - 1, 2e-4, 8, &drct::train::DEFAULT_MILESTONES);
        assert_eq!(rec.lr, expected);
    }
    assert!(log.windows(2).all(|w| w[1].lr <= w[0].lr));
    assert_eq!(log[0].lr, 2e-4);
    assert_eq!(log[7].lr, 2e-4 / 16.0);
}

#[test]
fn stage_transition_swaps_loss_and_resets_optimiser_only() {
    let net = tiny_net(DType::F32, 4);
    let plan = StagePlan::new(vec![
        StageSpec::new(StageId::L1Finetune, "x", LossKind::L1, 3),
        StageSpec::new(StageId::L2Polish, "x", LossKind::L2, 3),
    ])
    .unwrap();
    let mut state = TrainState::new(&net, 0).unwrap();
    for i in 0..3 {
        let (lr, hr) = batch(DType::F32, 20 + i);
        train_step(&mut state, &net, &lr, &hr, &plan.stages[0], &AdamConfig::default()).unwrap();
    }
    assert!(!state.moments_are_zero().unwrap());
    let before = bits(&net);
    assert_eq!(
        advance_stage(&plan, &mut state).unwrap(),
        StageAdvance::Next(StageId::L2Polish)
    );
    assert_eq!(bits(&net), before);
    assert!(state.moments_are_zero().unwrap());
    assert_eq!((state.stage_index, state.stage_iteration, state.iteration), (1, 0, 3));
    assert_eq!(plan.stages[state.stage_index].loss, LossKind::L2);
    assert_eq!(advance_stage(&plan, &mut state).unwrap(), StageAdvance::Complete);
}

#[test]
fn resumed_training_continues_identically() {
    let dir = tempfile::tempdir().unwrap();
    let plan = StagePlan::new(vec![StageSpec::new(StageId::L1Finetune, "x", LossKind::L1, 10)]).unwrap();
    let adam = AdamConfig::default();
    let net = tiny_net(DType::F32, 7);
    let mut state = TrainState::new(&net, 7).unwrap();
    for i in 0..3 {
        let (lr, hr) = batch(DType::F32, 40 + i);
        train_step(&mut state, &net, &lr, &hr, &plan.stages[0], &adam).unwrap();
    }
    let path = dir.path().join("ck.safetensors");
    state.to_checkpoint(&net, &plan).unwrap().save(&path).unwrap();

    let ck = Checkpoint::load(&path).unwrap();
    let restored = ck.to_network(DType::F32, &Device::Cpu).unwrap();
    let mut restored_state = TrainState::from_checkpoint(&ck, &restored).unwrap();
    assert_eq!(bits(&restored), bits(&net));
    assert_eq!(restored_state.stage_iteration, 3);

    let (lr, hr) = batch(DType::F32, 50);
    let a = train_step(&mut state, &net, &lr, &hr, &plan.stages[0], &adam).unwrap();
    let b = train_step(&mut restored_state, &restored, &lr, &hr, &plan.stages[0], &adam).unwrap();
    assert_eq!(a, b);
    let (lr, hr) = batch(DType::F32, 51);
    let a = train_step(&mut state, &net, &lr, &hr, &plan.stages[0], &adam).unwrap();
    let b = train_step(&mut restored_state, &restored, &lr, &hr, &plan.stages[0], &adam).unwrap();
    assert_eq!(a, b);
    assert_eq!(bits(&restored), bits(&net));
}

#[test]
fn l2_loss_is_mean_squared_error() {
    let (_, hr) = batch(DType::F64, 60);
    let sr = (&hr + 0.25).unwrap();
    assert!((scalar(&l2_loss(&sr, &hr).unwrap()).unwrap() - 0.0625).abs() < 1e-12);
}
