use amber_afno::autograd::ParamStore;
use amber_afno::config::{ModelConfig, TrainConfig};
use amber_afno::data_io::{generate_dataset, PhantomSpec, Sample};
use amber_afno::metrics::evaluate;
use amber_afno::model::Model;
use amber_afno::optim::Sgd;
use amber_afno::tensor::Tensor;
use amber_afno::train::{stack_batch, train};

fn phantoms(n: usize, grid: [usize; 3], seed: u64) -> Vec<Sample> {
    let spec = PhantomSpec {
        grid,
        seed,
        rules: vec![amber_afno::data_io::ShapeRule {
            class: 1,
            kind: amber_afno::data_io::PrimitiveKind::Ellipsoid,
            count: [1, 1],
            radius: [1.5, 2.5],
        }],
        ..PhantomSpec::default()
    };
    generate_dataset(&spec, n).unwrap()
}

fn tiny(grid: [usize; 3]) -> ModelConfig {
    ModelConfig { input_shape: grid, ..ModelConfig::tiny() }
}

#[test]
fn single_sample_overfit() {
    let data = phantoms(1, [8, 8, 8], 21);
    let mut model = Model::<f64>::new(tiny([8, 8, 8]), 21).unwrap();
    let cfg = TrainConfig { learning_rate: 0.03, epochs: 300, batch_size: 1, eval_every: 0, ..TrainConfig::default() };
    let report = train(&mut model, &data, &[], &cfg, None, &mut |_| {}).unwrap();
    assert_eq!(report.step_losses.len(), 300);

    // The 1x1x1 auxiliary targets hold a single class, and an absent class
    // keeps a constant Dice penalty, so the supervised total has a floor of
    // about 0.05 here. The overfit property is about the segmentation output.
    let (x, labels) = stack_batch::<f64>(&[&data[0]]).unwrap();
    let main_only = [1.0, 0.0, 0.0, 0.0, 0.0];
    let main = model.loss_and_grads(&x, &labels, &main_only, cfg.dice_eps, true).unwrap().loss;
    assert!(main < 0.05, "main-output loss {main} after 300 steps (total {:?})", report.step_losses.last());

    let pred = model.predict(&x).unwrap();
    let m = evaluate(&pred[0], &labels[0], [1.0; 3]).unwrap();
    assert!(m.mean_dsc > 0.95, "DSC on the training sample {}", m.mean_dsc);
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let data = phantoms(2, [4, 4, 4], 3);
    let mut model = Model::<f64>::new(tiny([4, 4, 4]), 3).unwrap();
    let cfg = TrainConfig { learning_rate: 0.0, epochs: 4, batch_size: 2, eval_every: 0, ..TrainConfig::default() };
    let report = train(&mut model, &data, &[], &cfg, None, &mut |_| {}).unwrap();
    // weights never move; only the shuffled order inside the batch changes
    // the summation order, hence the rounding-level tolerance
    let first = report.step_losses[0];
    assert!(report.step_losses.iter().all(|l| (l - first).abs() <= 1e-12 * first), "{:?}", report.step_losses);
}

#[test]
fn weight_decay_alone_decays_geometrically() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::from_fn(&[5], |i| i as f64 - 2.0), false).unwrap();
    let initial = store.get("w").unwrap().clone();
    let cfg = TrainConfig { learning_rate: 0.01, weight_decay: 3e-5, momentum: 0.9, ..TrainConfig::default() };
    let mut opt = Sgd::new(&cfg, &store);
    let steps = 1000;
    for _ in 0..steps {
        opt.step(&mut store, &[Tensor::zeros(&[5])]).unwrap();
    }
    let factor = (1.0f64 - 0.01 * 3e-5).powi(steps);
    for (a, b) in store.get("w").unwrap().data().iter().zip(initial.data()) {
        assert!((a - b * factor).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn one_plain_step() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::<f64>::ones(&[1]), false).unwrap();
    let cfg = TrainConfig { learning_rate: 0.01, momentum: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
    Sgd::new(&cfg, &store).step(&mut store, &[Tensor::ones(&[1])]).unwrap();
    assert!((store.get("p").unwrap().data()[0] - 0.99).abs() < 1e-15);
}

#[test]
fn same_seed_same_trajectory() {
    let data = phantoms(3, [4, 4, 4], 5);
    let run = |seed: u64| {
        let mut model = Model::<f32>::new(tiny([4, 4, 4]), 5).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 2, seed, ..TrainConfig::default() };
        let r = train(&mut model, &data[..2], &data[2..], &cfg, None, &mut |_| {}).unwrap();
        (r.step_losses, model)
    };
    let (a, ma) = run(1);
    let (b, mb) = run(1);
    assert_eq!(a, b);
    for (x, y) in ma.params().entries().iter().zip(mb.params().entries()) {
        assert_eq!(x.tensor, y.tensor, "{}", x.name);
    }
}
