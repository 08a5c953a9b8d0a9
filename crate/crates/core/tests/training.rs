use sfcm_core::data::synthetic::{patch_extent, texture};
use sfcm_core::data::{gen_synthetic, Dataset, SyntheticSpec};
use sfcm_core::models::{Model, ModelConfig};
use sfcm_core::nn::{ForwardCtx, ParamSet};
use sfcm_core::sfcm::ConnectionMode;
use sfcm_core::train::{
    cross_entropy, preset, train_loop, OptimizerConfig, Optimizer, Schedule, Split, TrainConfig,
};
use sfcm_core::Tensor;

fn task(n: usize, clutter: f32, seed: u64) -> Dataset {
    gen_synthetic(&SyntheticSpec {
        n,
        size: 16,
        classes: 4,
        fg_frac: 0.1,
        clutter,
        seed,
    })
    .unwrap()
}

/// Renders every class at every position and keeps the exact match.
fn template_match(image: &[f32], size: usize, classes: usize, fg_frac: f32) -> Option<usize> {
    let (ph, pw) = patch_extent(size, fg_frac);
    let plane = &image[..size * size];
    let mut best: Option<(f64, usize)> = None;
    for class in 0..classes {
        for top in 0..=size - ph {
            for left in 0..=size - pw {
                let mut err = 0.0f64;
                for i in 0..size {
                    for j in 0..size {
                        let inside = (top..top + ph).contains(&i) && (left..left + pw).contains(&j);
                        let want = if inside { texture(class, classes, i - top, j - left) } else { 0.0 };
                        err += ((plane[i * size + j] - want) as f64).powi(2);
                    }
                }
                if best.is_none_or(|(e, _)| err < e) {
                    best = Some((err, class));
                }
            }
        }
    }
    best.map(|(_, c)| c)
}

#[test]
fn clutter_free_labels_are_recoverable_by_template_matching() {
    let ds = task(200, 0.0, 4);
    let hits = ds
        .samples()
        .iter()
        .filter(|s| template_match(s.image.data(), 16, 4, 0.1) == Some(s.label))
        .count();
    assert_eq!(hits, ds.len());
}

fn sgd(lr: f64, momentum: f64) -> OptimizerConfig {
    OptimizerConfig::Sgd {
        lr,
        momentum,
        weight_decay: 0.0,
        schedule: Schedule::Constant,
    }
}

#[test]
fn updates_do_not_depend_on_parameter_order() {
    let values: Vec<(&str, Tensor<f32>)> = vec![
        ("a", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()),
        ("b", Tensor::from_vec(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap()),
        ("c", Tensor::scalar(7.0)),
    ];
    let grad = |name: &str| match name {
        "a" => Tensor::from_vec(&[3], vec![0.3, 0.1, -0.2]).unwrap(),
        "b" => Tensor::from_vec(&[2, 2], vec![-1.0, 0.5, 0.25, 2.0]).unwrap(),
        _ => Tensor::scalar(-0.7),
    };
    for config in [sgd(0.1, 0.9), OptimizerConfig::decayed_adam()] {
        let run = |order: &[usize]| -> Vec<(String, Tensor<f32>)> {
            let mut set = ParamSet::new();
            for &i in order {
                set.push(values[i].0, values[i].1.clone(), true);
            }
            let mut opt = Optimizer::new(config.clone(), 1).unwrap();
            for _ in 0..3 {
                let mut grads: Vec<_> = set.iter().map(|(id, p)| (id, grad(&p.name))).collect();
                grads.reverse();
                opt.step(&mut set, &grads).unwrap();
            }
            let mut out: Vec<_> = set.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
            out.sort_by(|x, y| x.0.cmp(&y.0));
            out
        };
        let forward = run(&[0, 1, 2]);
        let shuffled = run(&[2, 0, 1]);
        for ((na, a), (nb, b)) in forward.iter().zip(&shuffled) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b), "{na} differs between orders");
        }
    }
}

#[test]
fn full_batch_descent_lowers_the_loss_every_step() {
    let ds = task(64, 0.5, 12);
    let batch = ds.batch::<f32>(&(0..ds.len()).collect::<Vec<_>>()).unwrap();
    let mut model = Model::<f32>::new(ModelConfig::desk(4, ConnectionMode::Direct), 1).unwrap();
    let mut opt = Optimizer::new(sgd(0.01, 0.0), 1).unwrap();
    let mut losses = Vec::new();
    for _ in 0..=10 {
        let snapshot = model.params.clone();
        let mut ctx = ForwardCtx::new(&snapshot, true);
        let input = ctx.graph.input(batch.images.clone());
        let rec = model.record(&mut ctx, input).unwrap();
        let loss = ctx.graph.cross_entropy(rec.logits, &batch.labels).unwrap();
        losses.push(ctx.graph.value(loss).unwrap().data()[0]);
        let grads = ctx.graph.backward(loss).unwrap();
        let grads = ctx.param_grads(&grads);
        opt.step(&mut model.params, &grads).unwrap();
    }
    for pair in losses.windows(2) {
        assert!(pair[1] < pair[0], "loss went up: {losses:?}");
    }
}

#[test]
fn five_epochs_cut_the_direct_training_loss_by_a_fifth() {
    let ds = task(2000, 0.5, 0);
    let (mut config, optimizer) = preset("desk-synthetic", 0).unwrap();
    config.epochs = 5;
    let mut model = Model::<f32>::new(ModelConfig::desk(4, ConnectionMode::Direct), 0).unwrap();
    let mut opt = Optimizer::new(optimizer, config.epochs).unwrap();
    let history = train_loop(&mut model, &ds, &mut opt, &config).unwrap();
    let train: Vec<f64> = history
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.metrics.loss)
        .collect();
    assert_eq!(train.len(), 5);
    assert!(train[4] <= 0.8 * train[0], "epoch losses {train:?}");
    assert!(history.iter().all(|r| r.metrics.loss.is_finite()));
}

#[test]
fn cross_entropy_matches_the_direct_formula() {
    let logits = Tensor::from_vec(&[2, 3], vec![0.3f64, -1.2, 2.0, 1.5, 0.0, -0.5]).unwrap();
    let labels = [2, 0];
    let mut expect = 0.0;
    for (row, &label) in logits.data().chunks_exact(3).zip(&labels) {
        let norm: f64 = row.iter().map(|v| v.exp()).sum();
        expect -= (row[label].exp() / norm).ln();
    }
    expect /= 2.0;
    let got = cross_entropy(&logits, &labels).unwrap().data()[0];
    assert!((got - expect).abs() < 1e-10);
}

#[test]
fn same_seed_reproduces_the_history() {
    let ds = task(120, 0.5, 3);
    let run = || {
        let config = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 9,
            augment: true,
            val_frac: 0.1,
            threads: 1,
        };
        let mut model = Model::<f32>::new(ModelConfig::desk(4, ConnectionMode::Residual), 9).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::decayed_adam(), config.epochs).unwrap();
        let history = train_loop(&mut model, &ds, &mut opt, &config).unwrap();
        (history, model.params)
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    for ((_, a), (_, b)) in p1.iter().zip(p2.iter()) {
        assert!(a.value.bit_eq(&b.value));
    }
}
