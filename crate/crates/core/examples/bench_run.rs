use pflsim::fed::*;
use pflsim::model::*;
use pflsim::nn::{adamw_step, AdamWState, Tape, Tensor};
use pflsim::synth::*;
use rand::seq::SliceRandom;
use std::time::Instant;

fn data(sd: f64, drift: f64, seed: u64, fresh: usize) -> ExperimentDatasets {
    let dc = DatasetConfig {
        synth: SynthConfig { num_users: 5000, seed, feature_noise_sd: sd, history_window: 10, ..SynthConfig::default() },
        drift_strength: drift,
        train_stale_size: 20_000,
        train_fresh_size: fresh,
        valid_fresh_size: 4_000,
        valid_fixed_size: 4_000,
        ..DatasetConfig::default()
    };
    ExperimentDatasets::generate(&dc).unwrap()
}

fn central_train(train: &[TrainingRecord], valid: &[TrainingRecord], seed: u64) -> AppSelectionParams {
    let mut model = AppSelectionParams::random_init(seed);
    let mut opt = AdamWState::new(0.002, 0.9, 0.999, 1e-8, 0.01, model.params()).unwrap();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, model.clone());
    let mut bad = 0;
    for epoch in 0..40 {
        let mut rng = pflsim::seed::derive_rng(seed, "central-shuffle", epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(100) {
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &train[i].example).collect();
            let mut tape = Tape::with_capacity(batch.len() * 40);
            let net = stage_network(&mut tape, &model);
            let loss = staged_training_loss(&mut tape, &net, &batch, EPISTEMIC_AUX_WEIGHT).unwrap();
            let grads = tape.backward(loss).unwrap();
            let grads: Vec<Tensor> = net.leaves.iter().map(|id| grads[id.index()].clone()).collect();
            adamw_step(model.params_mut(), &grads, &mut opt).unwrap();
        }
        let vloss = mse_loss(&model, valid.iter().map(|r| &r.example)).unwrap();
        if vloss < best.0 - 1e-5 { best = (vloss, model.clone()); bad = 0; } else { bad += 1; }
        if bad >= 3 { break; }
    }
    best.1
}

fn pfl(shards: &[DeviceShard], valid: &[TrainingRecord], devices: usize, iters: u64, llr: f64, clr: f64, eps: f64, freeze: FreezePolicy, init: AppSelectionParams, seed: u64) -> TrainingRun {
    let cfg = TrainingConfig { devices_per_iteration: devices, central_iterations: iters, local_epochs: 1, local_learning_rate: llr, central_learning_rate: clr, epsilon: eps, eval_every: iters / 20, freeze_policy: freeze, master_seed: seed, ..TrainingConfig::default() };
    run_training(&cfg, shards, &TaskFilter::match_all(), &RunOptions { validation: valid, thresholds: Thresholds::default() }, init).unwrap()
}

fn ev(m: &AppSelectionParams, recs: &[TrainingRecord], tau_a: f64) -> (f64, f64, f64) {
    let acc = offline_accuracy(m, recs.iter().map(|r| &r.example)).unwrap();
    let om = online_metrics(m, &Thresholds::new(0.5, tau_a).unwrap(), recs.iter().map(|r| &r.example)).unwrap();
    (acc, om.cder, om.disambiguation_rate)
}










fn main() {
    let t = Instant::now();
    let d = data(0.1, 0.6, 1, 20000);
    let fresh_shards = partition_population(d.train_fresh.clone(), 1.0, PartitionMode::Exact, 2).unwrap();
    let stale = central_train(&d.train_stale, &d.valid_fixed, 7);
    let mut finals: Vec<Vec<f64>> = vec![vec![]; 3];
    let mut lastq: Vec<Vec<f64>> = vec![vec![]; 3];
    for (i, (n, iters)) in [(25usize, 2250u64), (50, 1125), (125, 450)].iter().enumerate() {
        for seed in [4u64, 5, 6, 7, 8] {
            let run = pfl(&fresh_shards, &d.valid_fresh, *n, *iters, 0.2, 0.005, 2.0, FreezePolicy::None, stale.clone(), seed);
            let c: Vec<f64> = run.history.iter().map(|x| x.val_accuracy).collect();
            let quarter = c.len() / 4;
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            finals[i].push(*c.last().unwrap());
            lastq[i].push(mean(&c[3*quarter..]) - mean(&c[2*quarter..3*quarter]));
        }
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    for (i, n) in [25, 50, 125].iter().enumerate() {
        println!("n={n}: finals {:?} mean {:.4}; lastq(pt) {:?} mean {:+.2}",
            finals[i].iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>(), mean(&finals[i]),
            lastq[i].iter().map(|v| (v*10000.0).round()/100.0).collect::<Vec<_>>(), mean(&lastq[i]) * 100.0);
    }
    let wins = finals[2].iter().zip(finals[0].iter()).filter(|(l, s)| l >= s).count();
    println!("largest >= smallest final in {wins}/5 seeds");
    println!("took {:?}", t.elapsed());
}
