use approx::assert_relative_eq;
use sarforge::dataset::{Sample, SampleMeta};
use sarforge::nn::checkpoint::{decode_checkpoint, encode_checkpoint};
use sarforge::nn::optim::{adam_step, sgd_step};
use sarforge::nn::train::{batch_gradient, history_csv, TrainConfig};
use sarforge::nn::unet::he_init;
use sarforge::nn::{lr_schedule, train, AdamConfig, NnError, OptimizerConfig, Tensor, UNet, UNetConfig};
use sarforge::phantom::FieldStrength;
use sarforge::raster::Grid2;

#[test]
fn he_init_statistics() {
    let t: Tensor<f64> = he_init(&[100_000], 50, 7);
    let n = t.len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std / 0.2 - 1.0).abs() < 0.02, "std {std}");
    assert!(mean.abs() < 0.01);
    assert_eq!(t, he_init(&[100_000], 50, 7));
    assert_ne!(t, he_init(&[100_000], 50, 8));
}

#[test]
fn zero_input_with_zero_biases_gives_zero_output() {
    let net = UNet::<f32>::new(UNetConfig::default(), 5).unwrap();
    let y = net.forward(&Tensor::zeros(&[1, 64, 64])).unwrap();
    assert_eq!(y.shape(), &[1, 64, 64]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_reproducible_and_shape_preserving() {
    let x = Tensor::from_vec(&[1, 32, 48], (0..32 * 48).map(|i| (i % 13) as f32 * 0.07).collect()).unwrap();
    let a = UNet::<f32>::new(UNetConfig::default(), 42).unwrap();
    let b = UNet::<f32>::new(UNetConfig::default(), 42).unwrap();
    let ya = a.forward(&x).unwrap();
    assert_eq!(ya.shape(), x.shape());
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ya), bits(&b.forward(&x).unwrap()));
    assert!(matches!(a.forward(&Tensor::zeros(&[1, 36, 48])), Err(NnError::Shape { .. })));
}

#[test]
fn schedule_cases() {
    let sgd = OptimizerConfig::preset("sgd-3t").unwrap();
    assert_eq!(lr_schedule(&sgd, 0), 0.1);
    assert_relative_eq!(lr_schedule(&sgd, 14), 0.1);
    assert_relative_eq!(lr_schedule(&sgd, 15), 0.01, max_relative = 1e-12);
    let adam = OptimizerConfig::preset("adam-3t").unwrap();
    assert_relative_eq!(lr_schedule(&adam, 12), 1e-6, max_relative = 1e-12);
}

#[test]
fn sgd_closed_forms() {
    let g = Tensor::from_vec(&[3], vec![0.5f64, -2.0, 1.25]).unwrap();
    let (lr, mu) = (0.1, 0.925);
    let mut w = Tensor::zeros(&[3]);
    let w0 = w.clone();
    let mut v = Tensor::zeros(&[3]);
    sgd_step(&mut w, &mut v, &g, lr, mu);
    for i in 0..3 {
        assert_eq!(w.data()[i] - w0.data()[i], -lr * g.data()[i]);
    }
    sgd_step(&mut w, &mut v, &g, lr, mu);
    for i in 0..3 {
        let expect = -lr * g.data()[i] * (2.0 + mu);
        assert_relative_eq!(w.data()[i] - w0.data()[i], expect, max_relative = 1e-14);
    }
}

#[test]
fn first_adam_step_moves_by_lr() {
    let c = AdamConfig {
        lr0: 1e-3,
        drop_factor: 1.0,
        drop_period_epochs: 1,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
        batch_size: 1,
        epochs: 1,
    };
    // |g| ≥ 0.02 keeps ε/|g| below 1e-6
    for g in [3.0f64, -0.5, 0.02, -0.02] {
        let mut w = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let mut m = Tensor::zeros(&[1]);
        let mut v = Tensor::zeros(&[1]);
        adam_step(&mut w, &mut m, &mut v, &Tensor::from_vec(&[1], vec![g]).unwrap(), c.lr0, &c, 1);
        let dw = w.data()[0] - 0.5;
        assert_relative_eq!(dw, -c.lr0 * g / (g.abs() + c.epsilon), max_relative = 1e-9);
        assert!((dw + c.lr0 * g.signum()).abs() <= 1e-6 * c.lr0, "g {g}: dw {dw}");
    }
}

fn toy_sample(seed: u64, n: usize) -> Sample {
    let input = Grid2::from_fn(n, n, |x, y| {
        let (dx, dy) = (x as f32 - n as f32 / 2.0, y as f32 - n as f32 / 2.0);
        if dx * dx + dy * dy < (n * n) as f32 / 6.0 {
            0.5 + 0.5 * ((x + seed as usize) as f32 * 0.3).sin().abs()
        } else {
            0.0
        }
    });
    let target = input.map(|&v| v * v);
    Sample {
        input,
        target,
        meta: SampleMeta {
            offset_x: 0.0,
            offset_y: 0.0,
            field: FieldStrength::ThreeT,
            phantom_seed: seed,
            norm_factor: 1.0,
        },
    }
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let samples: Vec<Sample> = (0..3).map(|s| toy_sample(s, 16)).collect();
    let net = UNet::<f32>::new(UNetConfig { depth: 2, base_channels: 4 }, 3).unwrap();
    let (_, batch) = batch_gradient(&net, &samples, &[0, 1, 2]).unwrap();
    let mut mean = net.params.zeros_like();
    for i in 0..3 {
        let (_, g) = batch_gradient(&net, &samples, &[i]).unwrap();
        mean.add_assign(&g);
    }
    mean.scale(1.0 / 3.0);
    for ((name, a), (_, b)) in batch.iter().zip(mean.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let scale = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / scale <= 1e-6, "{name}: {x} vs {y}");
        }
    }
}

fn small_config(preset: &str, epochs: usize) -> TrainConfig {
    TrainConfig {
        arch: UNetConfig { depth: 2, base_channels: 4 },
        optimizer: OptimizerConfig::preset(preset).unwrap().with_epochs(epochs),
        seed: 17,
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let samples = vec![toy_sample(0, 16), toy_sample(1, 16)];
    let cfg = small_config("adam-3t", 0);
    let out = train(&samples, &[0], &[1], &cfg).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.last.params, UNet::<f32>::new(cfg.arch, cfg.seed).unwrap().params);
    assert_eq!(out.best, out.last);
}

#[test]
fn training_is_bitwise_deterministic() {
    let samples: Vec<Sample> = (0..4).map(|s| toy_sample(s, 16)).collect();
    let cfg = small_config("sgd-7t", 3);
    let a = train(&samples, &[0, 1, 2], &[3], &cfg).unwrap();
    let b = train(&samples, &[0, 1, 2], &[3], &cfg).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(encode_checkpoint(&a.last).unwrap(), encode_checkpoint(&b.last).unwrap());
    assert_eq!(encode_checkpoint(&a.best).unwrap(), encode_checkpoint(&b.best).unwrap());
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let samples = vec![toy_sample(0, 16), toy_sample(1, 16)];
    let out = train(&samples, &[0], &[1], &small_config("adam-3t", 2)).unwrap();
    let back = decode_checkpoint(&encode_checkpoint(&out.last).unwrap()).unwrap();
    let a = out.last.model().unwrap().predict(&samples[1].input).unwrap();
    let b = back.model().unwrap().predict(&samples[1].input).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sgd_divergence_is_reported_with_history() {
    let samples: Vec<Sample> = (0..3).map(|s| toy_sample(s, 16)).collect();
    let mut cfg = small_config("sgd-3t", 4);
    if let OptimizerConfig::Sgd(s) = &mut cfg.optimizer {
        s.lr0 = 1e6;
    }
    let err = train(&samples, &[0, 1], &[2], &cfg).unwrap_err();
    assert!(matches!(err.error, NnError::Diverged { .. }), "{err}");
}
