//! Central finite-difference checks of every layer and of a small network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarforge::nn::layers::*;
use sarforge::nn::unet::mse_with_grad;
use sarforge::nn::{Tensor, UNet, UNetConfig};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Scalar probe loss `Σ p·y` so that dL/dy = p.
fn probe(y: &Tensor<f64>, p: &Tensor<f64>) -> f64 {
    y.data().iter().zip(p.data()).map(|(a, b)| a * b).sum()
}

/// Checks `analytic` against central differences of `f` around `x`.
fn check(name: &str, x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let numeric = (f(&xp) - f(&xm)) / (2.0 * H);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    assert!(worst <= TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn conv3x3_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 5, 6], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let p = random(&[3, 5, 6], &mut rng);
    let g = conv2d_backward(&x, &w, &p).unwrap();
    check("conv input", &x, &g.input, |x| probe(&conv2d_forward(x, &w, &b).unwrap(), &p));
    check("conv weight", &w, &g.weight, |w| probe(&conv2d_forward(&x, w, &b).unwrap(), &p));
    check("conv bias", &b, &g.bias, |b| probe(&conv2d_forward(&x, &w, b).unwrap(), &p));
}

#[test]
fn conv1x1_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[4, 3, 3], &mut rng);
    let w = random(&[2, 4, 1, 1], &mut rng);
    let b = random(&[2], &mut rng);
    let p = random(&[2, 3, 3], &mut rng);
    let g = conv2d_backward(&x, &w, &p).unwrap();
    check("1x1 input", &x, &g.input, |x| probe(&conv2d_forward(x, &w, &b).unwrap(), &p));
    check("1x1 weight", &w, &g.weight, |w| probe(&conv2d_forward(&x, w, &b).unwrap(), &p));
}

#[test]
fn relu_pool_upsample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 4, 4], &mut rng);

    let p = random(&[2, 4, 4], &mut rng);
    let y = relu_forward(&x);
    let mut g = p.clone();
    relu_backward(&y, &mut g);
    check("relu", &x, &g, |x| probe(&relu_forward(x), &p));

    let p = random(&[2, 2, 2], &mut rng);
    let (_, arg) = maxpool2_forward(&x).unwrap();
    let g = maxpool2_backward(&arg, &p, x.shape()).unwrap();
    check("maxpool", &x, &g, |x| probe(&maxpool2_forward(x).unwrap().0, &p));

    let p = random(&[2, 8, 8], &mut rng);
    let g = upsample2_backward(&p).unwrap();
    check("upsample", &x, &g, |x| probe(&upsample2_forward(x).unwrap(), &p));
}

#[test]
fn concat_gradient_routes_to_both_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[1, 2, 2], &mut rng);
    let b = random(&[2, 2, 2], &mut rng);
    let p = random(&[3, 2, 2], &mut rng);
    let (ga, gb) = split_channels(&p, 1).unwrap();
    check("concat a", &a, &ga, |a| probe(&concat_channels(a, &b).unwrap(), &p));
    check("concat b", &b, &gb, |b| probe(&concat_channels(&a, b).unwrap(), &p));
}

#[test]
fn mse_gradient_is_two_residual_over_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = random(&[1, 3, 4], &mut rng);
    let t = random(&[1, 3, 4], &mut rng);
    let (loss, g) = mse_with_grad(&out, &t);
    let n = out.len() as f64;
    for i in 0..out.len() {
        let d = out.data()[i] - t.data()[i];
        assert!((g.data()[i] - 2.0 * d / n).abs() < 1e-15);
    }
    let direct: f64 = out.data().iter().zip(t.data()).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / n;
    assert!((loss - direct).abs() < 1e-15);
}

fn toy_net(seed: u64) -> UNet<f64> {
    let mut net = UNet::<f64>::new(
        UNetConfig {
            depth: 2,
            base_channels: 2,
        },
        seed,
    )
    .unwrap();
    // nonzero biases so their gradients are exercised away from the kinks
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (name, t) in net.params.iter_mut() {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    net
}

#[test]
fn full_network_gradients_match_finite_differences() {
    let net = toy_net(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[1, 8, 8], &mut rng);
    let t = random(&[1, 8, 8], &mut rng);
    let (_, grads) = net.loss_and_grad(&x, &t).unwrap();
    let loss = |n: &UNet<f64>| mse_with_grad(&n.forward(&x).unwrap(), &t).0;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (pi, (name, p)) in net.params.iter().enumerate() {
        for i in 0..p.len() {
            let mut plus = net.clone();
            plus.params.tensor_mut(pi).data_mut()[i] += H;
            let mut minus = net.clone();
            minus.params.tensor_mut(pi).data_mut()[i] -= H;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * H);
            let e = rel_err(grads.tensor(pi).data()[i], numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]"));
            }
            checked += 1;
        }
    }
    assert_eq!(checked, net.config.param_count());
    assert!(worst.0 <= TOL, "worst relative error {:e} at {}", worst.0, worst.1);
}

#[test]
fn matching_target_gives_zero_gradients() {
    let net = toy_net(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = random(&[1, 8, 8], &mut rng);
    let t = net.forward(&x).unwrap();
    let (loss, grads) = net.loss_and_grad(&x, &t).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.iter().all(|(_, g)| g.data().iter().all(|&v| v == 0.0)));
}
