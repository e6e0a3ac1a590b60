use super::arch::{plain_layer, weighted_layer};
use super::*;
use crate::error::Error;
use crate::tensor::Rng;

fn loss_and_grad(net: &mut Network, x: &Tensor, probe: &Tensor) -> f64 {
    let (y, _) = net.forward_frozen(x, Mode::BatchStats).unwrap();
    y.dot(probe).unwrap()
}

/// Central-difference check of every parameter and of the input, with
/// L = <y, probe> so dL/dy = probe.
fn gradcheck(net: &mut Network, x: &Tensor, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (y, cache) = net.forward_frozen(x, Mode::BatchStats).unwrap();
    let probe = Tensor::normal(&mut rng, y.shape(), 0.0, 1.0).unwrap();
    let dx = net.backward(&cache, &probe).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, fd: f64| {
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
        worst = worst.max(rel);
    };
    for id in net.param_ids() {
        let n = net.param(id).unwrap().value.len();
        for k in 0..n {
            let analytic = net.param(id).unwrap().grad.data()[k];
            let orig = net.param(id).unwrap().value.data()[k];
            net.param_mut(id).unwrap().value.data_mut()[k] = orig + h;
            let lp = loss_and_grad(net, x, &probe);
            net.param_mut(id).unwrap().value.data_mut()[k] = orig - h;
            let lm = loss_and_grad(net, x, &probe);
            net.param_mut(id).unwrap().value.data_mut()[k] = orig;
            check(analytic, (lp - lm) / (2.0 * h));
        }
    }
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[k] += h;
        let mut xm = x.clone();
        xm.data_mut()[k] -= h;
        let fd = (loss_and_grad(net, &xp, &probe) - loss_and_grad(net, &xm, &probe)) / (2.0 * h);
        check(dx.data()[k], fd);
    }
    worst
}

#[test]
fn identity_linear_layer_passes_input_through() {
    let layer = Layer {
        spec: LayerSpec::linear(3, 3, LayerRole::Input),
        state: LayerState {
            weight: Some(Param::new(Tensor::from_rows(&[
                &[1.0, 0.0, 0.0],
                &[0.0, 1.0, 0.0],
                &[0.0, 0.0, 1.0],
            ]))),
            bias: Some(Param::new(Tensor::zeros(&[3]))),
            ..LayerState::default()
        },
    };
    let mut net = Network::new(vec![3], vec![layer]).unwrap();
    let x = Tensor::from_rows(&[&[1.0, -2.0, 3.5], &[0.0, 4.0, -1.0]]);
    assert_eq!(net.forward(&x, Mode::Train).unwrap().0, x);
}

#[test]
fn appendix_residual_hand_evaluation() {
    let mut net = arch::appendix_residual();
    let (y, cache) = net
        .forward(&Tensor::from_rows(&[&[1.0]]), Mode::Eval)
        .unwrap();
    assert_eq!(cache.activation(1).data(), &[1.0, 1.0]);
    assert_eq!(cache.activation(2).data(), &[2.0, 2.0]);
    assert_eq!(cache.activation(3).data(), &[4.0, 4.0]);
    assert_eq!(cache.activation(4).data(), &[5.0, 5.0]);
    assert_eq!(y.data(), &[10.0]);
}

#[test]
fn relu_of_negative_tensor_is_zero() {
    let mut net = Network::new(vec![4], vec![plain_layer(LayerSpec::relu(4))]).unwrap();
    let x = Tensor::full(&[2, 4], -0.5);
    assert_eq!(
        net.forward(&x, Mode::Train).unwrap().0,
        Tensor::zeros(&[2, 4])
    );
}

#[test]
fn sum_loss_gradient_of_linear_layer() {
    let mut rng = Rng::new(1);
    let mut net = Network::new(
        vec![3],
        vec![weighted_layer(LayerSpec::linear(3, 2, LayerRole::Input), true, &mut rng).unwrap()],
    )
    .unwrap();
    let x = Tensor::from_rows(&[&[1.0, 2.0, -1.0]]);
    let (y, cache) = net.forward(&x, Mode::Train).unwrap();
    net.backward(&cache, &Tensor::full(y.shape(), 1.0)).unwrap();
    let g = &net.layer(0).state.weight.as_ref().unwrap().grad;
    assert_eq!(g.data(), &[1.0, 2.0, -1.0, 1.0, 2.0, -1.0]);
    assert_eq!(
        net.layer(0).state.bias.as_ref().unwrap().grad.data(),
        &[1.0, 1.0]
    );
}

#[test]
fn zero_upstream_gradient_zeroes_all_grads() {
    let mut rng = Rng::new(2);
    let mut net = arch::cnn(2, 4, &[3, 4], &[2, 1], 3, &mut rng).unwrap();
    for id in net.param_ids() {
        net.param_mut(id).unwrap().grad = Tensor::full(net.param(id).unwrap().value.shape(), 7.0);
    }
    let x = Tensor::normal(&mut rng, &[2, 2, 4, 4], 0.0, 1.0).unwrap();
    let (y, cache) = net.forward(&x, Mode::Train).unwrap();
    net.backward(&cache, &Tensor::zeros(y.shape())).unwrap();
    for id in net.param_ids() {
        assert!(
            net.param(id).unwrap().grad.data().iter().all(|&g| g == 0.0),
            "{id:?}"
        );
    }
}

#[test]
fn finite_differences_cnn_with_batchnorm_and_pool() {
    for seed in 0..3 {
        let mut rng = Rng::new(seed);
        let mut net = arch::cnn(2, 4, &[3, 4], &[2, 1], 3, &mut rng).unwrap();
        net.layer_mut(0).state.bias = Some(Param::new(
            Tensor::normal(&mut rng, &[3], 0.0, 0.1).unwrap(),
        ));
        let x = Tensor::normal(&mut rng, &[3, 2, 4, 4], 0.0, 1.0).unwrap();
        let worst = gradcheck(&mut net, &x, seed + 100);
        assert!(worst <= 1e-5, "seed {seed}: {worst}");
    }
}

#[test]
fn finite_differences_residual_mlp_with_gain() {
    let mut rng = Rng::new(3);
    let mut net = arch::residual_mlp(3, 4, 2, &mut rng).unwrap();
    net.layer_mut(2).state.gain = 1.7;
    let x = Tensor::normal(&mut rng, &[4, 3], 0.0, 1.0).unwrap();
    assert!(gradcheck(&mut net, &x, 9) <= 1e-5);
}

#[test]
fn eval_batchnorm_is_per_channel_affine() {
    let mut rng = Rng::new(4);
    let mut bn = plain_layer(LayerSpec::batchnorm(2));
    bn.state.running_mean = Some(Tensor::from_vec(vec![2], vec![0.5, -1.0]).unwrap());
    bn.state.running_var = Some(Tensor::from_vec(vec![2], vec![2.0, 0.25]).unwrap());
    bn.state.gamma.as_mut().unwrap().value = Tensor::from_vec(vec![2], vec![1.5, -0.5]).unwrap();
    bn.state.beta.as_mut().unwrap().value = Tensor::from_vec(vec![2], vec![0.1, 0.2]).unwrap();
    let net = Network::new(vec![2, 3, 3], vec![bn]).unwrap();
    let x = Tensor::normal(&mut rng, &[2, 2, 3, 3], 0.0, 1.0).unwrap();
    let y = net.predict(&x).unwrap();
    let (mu, var, g, b) = ([0.5, -1.0], [2.0, 0.25], [1.5, -0.5], [0.1, 0.2]);
    for (k, (&xv, &yv)) in x.data().iter().zip(y.data()).enumerate() {
        let c = (k / 9) % 2;
        let expect = g[c] * (xv - mu[c]) / (var[c] + BN_EPS).sqrt() + b[c];
        assert!((yv - expect).abs() < 1e-14);
    }
}

#[test]
fn train_mode_updates_running_statistics() {
    let mut net = Network::new(vec![1], vec![plain_layer(LayerSpec::batchnorm(1))]).unwrap();
    let x = Tensor::from_rows(&[&[1.0], &[3.0]]);
    net.forward(&x, Mode::BatchStats).unwrap();
    assert_eq!(
        net.layer(0).state.running_mean.as_ref().unwrap().data(),
        &[0.0]
    );
    net.forward(&x, Mode::Train).unwrap();
    let st = &net.layer(0).state;
    assert!((st.running_mean.as_ref().unwrap().data()[0] - 0.2).abs() < 1e-15);
    // unbiased batch variance 2, blended with the initial 1
    assert!((st.running_var.as_ref().unwrap().data()[0] - 1.1).abs() < 1e-15);
}

#[test]
fn stale_cache_is_rejected_after_growth() {
    let mut rng = Rng::new(5);
    let mut net = arch::mlp(3, &[4], 2, &mut rng).unwrap();
    let x = Tensor::normal(&mut rng, &[2, 3], 0.0, 1.0).unwrap();
    let (y, cache) = net.forward(&x, Mode::Train).unwrap();
    crate::growth::grow_network(
        &mut net,
        &[6],
        &mut rng,
        &crate::growth::GrowthOptions::default(),
    )
    .unwrap();
    assert!(matches!(
        net.backward(&cache, &y),
        Err(Error::StaleCache { .. })
    ));
}

#[test]
fn width_mismatch_names_layer() {
    let mut rng = Rng::new(6);
    let layers = vec![
        weighted_layer(LayerSpec::linear(3, 4, LayerRole::Input), true, &mut rng).unwrap(),
        plain_layer(LayerSpec::relu(4)),
        weighted_layer(LayerSpec::classifier(5, 2), true, &mut rng).unwrap(),
    ];
    match Network::new(vec![3], layers) {
        Err(Error::Structural { layer, .. }) => assert_eq!(layer, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn wrong_input_shape_is_dimension_error() {
    let mut rng = Rng::new(7);
    let net = arch::mlp(3, &[4], 2, &mut rng).unwrap();
    assert!(matches!(
        net.predict(&Tensor::zeros(&[2, 5])),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn network_flops_are_additive() {
    let mut rng = Rng::new(8);
    let net = arch::cnn4([4, 8, 16, 32], 10, &mut rng).unwrap();
    let expect = 2 * 9 * (3 * 4 * 64 + 4 * 8 * 16 + 8 * 16 * 4 + 16 * 32) + 2 * 32 * 10;
    assert_eq!(net.forward_flops(1), expect as u64);
    assert_eq!(net.forward_flops(5), 5 * expect as u64);
}
