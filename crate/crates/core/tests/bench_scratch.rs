use cvit_core::data::{make_advection_dataset, GrfSpec, ShiftMode};
use cvit_core::operators::{AnyModel, CvitPreset, CvitSpec, Surrogate};
use cvit_core::params::TapeParams;
use cvit_core::training::*;
use cvit_core::tensor::{Rng, Tape};

#[test]
fn bench_step_time() {
    let data = make_advection_dataset(100, &GrfSpec::default_advection(), 0.5, 1.0, 5, ShiftMode::Exact).unwrap();
    let spec = CvitSpec::for_1d_profile(CvitPreset::Tiny, 4, 200, 1, 200, 512, 1e5);
    let cfg = TrainConfig { batch_size: 32, queries: 128, steps: 20, warmup: 10, checkpoint_every: 1000, seed: 1, ..Default::default() };
    let mut rng = Rng::new(1);
    let mut params = spec.init(&mut rng);
    let mut opt = AdamState::new(&params);
    let mut sampler = Rng::new(2);
    // warm
    let batch = sample_batch(&data, &cfg, &mut sampler);
    let _ = train_step(&spec, &mut params, &mut opt, &batch, &cfg, 1e-4).unwrap();
    let t0 = std::time::Instant::now();
    for _ in 0..20 {
        let batch = sample_batch(&data, &cfg, &mut sampler);
        let _ = train_step(&spec, &mut params, &mut opt, &batch, &cfg, 1e-4).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / 20.0;
    println!("per-step: {:.1} ms -> 20k steps = {:.1} min", dt * 1e3, dt * 20000.0 / 60.0);

    // forward only
    let batch = sample_batch(&data, &cfg, &mut sampler);
    let t0 = std::time::Instant::now();
    for _ in 0..20 {
        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &params);
        let _ = Surrogate::forward(&spec, &mut tape, &bound, &batch.u, &batch.queries).unwrap();
    }
    println!("forward-only: {:.1} ms", t0.elapsed().as_secs_f64() / 20.0 * 1e3);
    let _ = AnyModel::Cvit(spec);
}

#[test]
fn bench_phases() {
    use std::collections::BTreeMap;
    let data = make_advection_dataset(100, &GrfSpec::default_advection(), 0.5, 1.0, 5, ShiftMode::Exact).unwrap();
    let spec = CvitSpec::for_1d_profile(CvitPreset::Tiny, 4, 200, 1, 200, 512, 1e5);
    let cfg = TrainConfig { batch_size: 32, queries: 128, steps: 20, warmup: 10, checkpoint_every: 1000, seed: 1, ..Default::default() };
    let mut rng = Rng::new(1);
    let params = spec.init(&mut rng);
    let mut sampler = Rng::new(2);
    let batch = sample_batch(&data, &cfg, &mut sampler);

    // forward + loss
    let t0 = std::time::Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &params);
        let pred = Surrogate::forward(&spec, &mut tape, &bound, &batch.u, &batch.queries).unwrap();
        let _loss = mse_sampled_queries(&mut tape, pred, &batch.targets).unwrap();
    }
    println!("fwd+loss: {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // + backward
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let bound = TapeParams::bind(&mut tape, &params);
        let pred = Surrogate::forward(&spec, &mut tape, &bound, &batch.u, &batch.queries).unwrap();
        let loss = mse_sampled_queries(&mut tape, pred, &batch.targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut by_name = BTreeMap::new();
        for (name, var) in bound.iter() { if let Some(g) = grads.wrt(*var) { by_name.insert(name.clone(), g.clone()); } }
        std::hint::black_box(&by_name);
    }
    println!("fwd+loss+bwd: {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // optimizer alone
    let mut opt = AdamState::new(&params);
    let mut p2 = params.clone();
    let grads: BTreeMap<String, cvit_core::Tensor<f32>> = params.iter().map(|(n, t)| (n.clone(), cvit_core::Tensor::zeros(t.shape()))).collect();
    let t0 = std::time::Instant::now();
    for _ in 0..reps { adamw_step(&mut p2, &grads, &mut opt, 1e-5, 1e-4); }
    println!("adamw: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
