use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use floe_core::assim::{enkf_analysis, etkf_analysis, NoiseLayout};
use floe_core::cn::{self, TrainingPair};
use floe_core::dem::{self, DEFAULT_SPEED_RANGE};
use floe_core::nn::mish;
use floe_core::{build_chain_graph, seeded_rng, CnConfig, CnModel, CnParams, EnsembleState, FloeSystem, NoiseModel,
    ObservationModel, StepModel};
use nalgebra::{DMatrix, DVector};

fn desk_trajectory(n_floes: usize, width: f64, steps: usize) -> floe_core::Trajectory {
    let sys = FloeSystem::uniform(n_floes, 0.0, width).unwrap();
    let mut rng = seeded_rng(7, 0);
    let init = dem::sample_initial_conditions(&sys, DEFAULT_SPEED_RANGE, &mut rng).unwrap();
    dem::generate_trajectory(init, &sys, steps, 1e-4).unwrap()
}

fn dem_step(c: &mut Criterion) {
    let traj = desk_trajectory(10, 100.0, 10);
    let state = traj.states[5].clone();
    c.bench_function("dem_step_10_floes", |b| {
        b.iter(|| dem::step(black_box(&state), &traj.system, 1e-4).unwrap())
    });
}

fn cn_kernels(c: &mut Criterion) {
    let traj = desk_trajectory(5, 50.0, 300);
    let mut rng = seeded_rng(1, 0);
    let params = CnParams::new(CnConfig::default(), &mut rng).unwrap();
    let (rel, _) = build_chain_graph(5);
    let pairs: Vec<TrainingPair> = (2..102)
        .map(|j| TrainingPair::from_trajectory(&traj, j, &params.config, &rel).unwrap())
        .collect();
    let refs: Vec<&TrainingPair> = pairs.iter().collect();
    c.bench_function("cn_loss_and_gradient_batch_100", |b| {
        b.iter(|| cn::loss_and_gradient(black_box(&params), &refs, &rel).unwrap())
    });

    let model = CnModel::new(params, traj.system.clone(), traj.dt);
    let histories: Vec<(&[f64], &[f64])> = (0..100)
        .map(|k| (traj.states[k].x.as_slice(), traj.states[k + 1].x.as_slice()))
        .collect();
    c.bench_function("cn_advance_batch_100", |b| b.iter(|| model.advance_batch(2, black_box(&histories)).unwrap()));
    c.bench_function("cn_advance_single", |b| {
        b.iter(|| model.advance(2, black_box(&traj.states[0].x), &traj.states[1].x).unwrap())
    });
}

fn filters(c: &mut Criterion) {
    let n = 5;
    let mut rng = seeded_rng(3, 0);
    let members = DMatrix::from_fn(2 * n, 100, |i, k| (i * 7 + k) as f64 % 13.0 * 0.1 + 5.0 * (i % n) as f64);
    let ens = EnsembleState::new(100, members).unwrap();
    let obs = ObservationModel::even_floes(n, 1.0, 100).linear();
    let y = DVector::from_element(obs.r_diag.len(), 10.0);
    let noise = NoiseModel {
        sigma: 1.0,
        layout: NoiseLayout::PairedShift,
    };
    c.bench_function("enkf_analysis_100_members", |b| {
        b.iter_batched(|| ens.clone(), |e| enkf_analysis(&e, &y, &obs, &noise, &mut rng).unwrap(), BatchSize::SmallInput)
    });
    c.bench_function("etkf_analysis_100_members", |b| {
        b.iter_batched(|| ens.clone(), |e| etkf_analysis(&e, &y, &obs, &noise, 0.0, &mut rng).unwrap(), BatchSize::SmallInput)
    });
}

fn activation(c: &mut Criterion) {
    let xs: Vec<f64> = (0..1000).map(|i| (i as f64 - 500.0) * 0.01).collect();
    c.bench_function("mish_1000", |b| b.iter(|| xs.iter().map(|&x| mish(black_box(x))).sum::<f64>()));
}

criterion_group!(benches, dem_step, cn_kernels, filters, activation);
criterion_main!(benches);
