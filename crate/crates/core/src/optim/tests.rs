use super::*;
use crate::growth::{grow_network, GrowthOptions};
use crate::nn::{arch, softmax_cross_entropy, Mode};
use crate::tensor::{Rng, Tensor};
use proptest::prelude::*;

fn batch(seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let x = Tensor::normal(&mut rng, &[8, 5], 0.0, 1.0).unwrap();
    let y = (0..8).map(|_| rng.below(3)).collect();
    (x, y)
}

fn compute_grads(net: &mut Network, x: &Tensor, y: &[usize]) {
    let (logits, cache) = net.forward(x, Mode::Train).unwrap();
    let (_, dy) = softmax_cross_entropy(&logits, y).unwrap();
    net.backward(&cache, &dy).unwrap();
}

struct Textbook {
    kind: OptimizerKind,
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    layer_rate: Vec<f64>,
}

impl Textbook {
    fn new(net: &Network, cfg: OptimizerConfig) -> Self {
        let sizes: Vec<usize> = net
            .param_ids()
            .iter()
            .map(|&id| net.param(id).unwrap().value.len())
            .collect();
        Self {
            kind: cfg.kind,
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            layer_rate: vec![1.0; net.layers().len()],
        }
    }

    fn step(&mut self, net: &mut Network, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let ids = net.param_ids();
        let norm = if self.kind == OptimizerKind::AvaGrad {
            let (mut s, mut d) = (0.0, 0usize);
            for v in &self.v {
                for &x in v {
                    let eta = 1.0 / (x.sqrt() + c.eps);
                    s += eta * eta;
                    d += 1;
                }
            }
            (s / d as f64).sqrt()
        } else {
            1.0
        };
        for (n, id) in ids.into_iter().enumerate() {
            let lr = lr * self.layer_rate[id.layer];
            let p = net.param_mut(id).unwrap();
            let (w, g) = (p.value.data_mut(), p.grad.data());
            for j in 0..w.len() {
                let d = g[j] + c.weight_decay * w[j];
                match self.kind {
                    OptimizerKind::Sgd => {
                        self.m[n][j] = c.momentum * self.m[n][j] + d;
                        w[j] -= lr * self.m[n][j];
                    }
                    OptimizerKind::Adam => {
                        self.m[n][j] = c.beta1 * self.m[n][j] + (1.0 - c.beta1) * d;
                        self.v[n][j] = c.beta2 * self.v[n][j] + (1.0 - c.beta2) * d * d;
                        let mh = self.m[n][j] / (1.0 - c.beta1.powi(self.t));
                        let vh = self.v[n][j] / (1.0 - c.beta2.powi(self.t));
                        w[j] -= lr * mh / (vh.sqrt() + c.eps);
                    }
                    OptimizerKind::AvaGrad => {
                        self.m[n][j] = c.beta1 * self.m[n][j] + (1.0 - c.beta1) * d;
                        let eta = 1.0 / (self.v[n][j].sqrt() + c.eps);
                        w[j] -= lr * eta / norm * self.m[n][j];
                        self.v[n][j] = c.beta2 * self.v[n][j] + (1.0 - c.beta2) * d * d;
                    }
                    OptimizerKind::Lars => unreachable!(),
                }
            }
        }
    }
}

fn max_param_diff(a: &Network, b: &Network) -> f64 {
    a.param_ids()
        .into_iter()
        .map(|id| {
            a.param(id)
                .unwrap()
                .value
                .max_abs_diff(&b.param(id).unwrap().value)
                .unwrap()
        })
        .fold(0.0, f64::max)
}

fn reduction(kind: OptimizerKind, rate: RateMode, steps: usize, lr: f64) -> f64 {
    let mut rng = Rng::new(1);
    let mut a = arch::mlp(5, &[6, 4], 3, &mut rng).unwrap();
    let mut b = a.clone();
    let mut cfg = OptimizerConfig::new(kind);
    cfg.rate = rate;
    cfg.weight_decay = 5e-4;
    let mut ra = OptimizerState::new(&a, cfg);
    let mut tb = Textbook::new(&b, cfg);
    if kind == OptimizerKind::Sgd && rate == RateMode::StageNorm {
        // stage-0 output layer rate is lr / C_0
        tb.layer_rate[4] = 1.0 / 4.0;
    }
    let mut worst: f64 = 0.0;
    for s in 0..steps {
        let (x, y) = batch(s as u64);
        compute_grads(&mut a, &x, &y);
        compute_grads(&mut b, &x, &y);
        ra.step(&mut a, lr).unwrap();
        tb.step(&mut b, lr);
        worst = worst.max(max_param_diff(&a, &b));
    }
    worst
}

#[test]
fn sgd_reduces_to_textbook_bitwise() {
    assert_eq!(
        reduction(OptimizerKind::Sgd, RateMode::Global, 100, 0.05),
        0.0
    );
    assert_eq!(
        reduction(OptimizerKind::Sgd, RateMode::StageNorm, 100, 0.05),
        0.0
    );
}

#[test]
fn adam_reduces_to_textbook() {
    assert!(reduction(OptimizerKind::Adam, RateMode::StageNorm, 100, 1e-3) <= 1e-12);
    assert!(reduction(OptimizerKind::Adam, RateMode::Global, 100, 1e-3) <= 1e-12);
}

#[test]
fn avagrad_reduces_to_textbook() {
    assert!(reduction(OptimizerKind::AvaGrad, RateMode::StageNorm, 100, 1e-3) <= 1e-12);
    assert!(reduction(OptimizerKind::AvaGrad, RateMode::Global, 100, 1e-3) <= 1e-12);
}

#[test]
fn rate_factor_table() {
    use LayerRole::*;
    let f = |n_k, n_0, role, k, c0| {
        rate_factor(
            n_k,
            n_0,
            role,
            k,
            c0,
            RateMode::StageNorm,
            OutputComposition::Multiply,
        )
    };
    assert_eq!(f(3.0, 5.0, Hidden, 0, 16).unwrap(), 1.0);
    assert_eq!(f(3.0, 5.0, Input, 0, 16).unwrap(), 1.0);
    assert_eq!(f(3.0, 5.0, Output, 0, 16).unwrap(), 1.0 / 16.0);
    assert_eq!(f(2.5, 2.5, Hidden, 3, 16).unwrap(), 1.0);
    assert_eq!(f(2.0, 4.0, Output, 1, 16).unwrap(), 0.5 / 16.0);
    assert!(matches!(
        f(1.0, 0.0, Hidden, 1, 4),
        Err(Error::Degenerate(_))
    ));
    let replace = rate_factor(
        2.0,
        4.0,
        Output,
        1,
        16,
        RateMode::StageNorm,
        OutputComposition::Replace,
    )
    .unwrap();
    assert_eq!(replace, 0.5);
    let capped = rate_factor(
        2.0,
        4.0,
        Hidden,
        1,
        16,
        RateMode::StageMax,
        OutputComposition::Multiply,
    )
    .unwrap();
    assert_eq!(capped, 1.0);
    assert_eq!(
        rate_factor(
            9.0,
            1.0,
            Output,
            2,
            16,
            RateMode::Global,
            OutputComposition::Multiply
        )
        .unwrap(),
        1.0
    );
}

proptest! {
    #[test]
    fn rate_factor_is_positively_homogeneous(nk in 0.01f64..10.0, n0 in 0.01f64..10.0, c in 0.01f64..100.0, k in 1usize..5) {
        let a = rate_factor(nk, n0, LayerRole::Hidden, k, 8, RateMode::StageNorm, OutputComposition::Multiply).unwrap();
        let b = rate_factor(c * nk, c * n0, LayerRole::Hidden, k, 8, RateMode::StageNorm, OutputComposition::Multiply).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

/// Single hidden weight 2x2 grown to 2x4 with hand-set stage norms.
fn two_stage_toy(kind: OptimizerKind, rate: RateMode) -> (Network, OptimizerState) {
    let mut rng = Rng::new(3);
    let mut net = arch::mlp(2, &[2, 2], 2, &mut rng).unwrap();
    let mut cfg = OptimizerConfig::new(kind);
    cfg.rate = rate;
    cfg.momentum = 0.0;
    let mut st = OptimizerState::new(&net, cfg);
    let opts = GrowthOptions {
        noise_scale: 0.0,
        ..GrowthOptions::default()
    };
    let report = grow_network(&mut net, &[2, 4], &mut rng, &opts).unwrap();
    expand_optimizer_state(&mut st, &report, &net, cfg.policy).unwrap();
    (net, st)
}

#[test]
fn new_block_moves_by_norm_ratio() {
    let (mut net, mut st) = two_stage_toy(OptimizerKind::Sgd, RateMode::StageNorm);
    // layer 2 is the hidden weight [4, 2]: stage 0 = rows 0..2, stage 1 = rows 2..4
    let id = ParamId {
        layer: 2,
        kind: ParamKind::Weight,
    };
    let p = net.param_mut(id).unwrap();
    p.value = Tensor::from_vec(vec![4, 2], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
    p.grad = Tensor::full(&[4, 2], 1.0);
    let before = p.value.clone();
    net.zero_grads();
    net.param_mut(id).unwrap().grad = Tensor::full(&[4, 2], 1.0);
    st.step(&mut net, 0.1).unwrap();
    let after = &net.param(id).unwrap().value;
    let delta = before.sub(after).unwrap();
    assert!((delta.data()[0] - 0.1).abs() < 1e-15);
    assert!((delta.data()[4] - 0.2).abs() < 1e-15);
}

#[test]
fn grown_adam_block_bias_corrects_from_age_one() {
    let mut rng = Rng::new(4);
    let mut net = arch::mlp(2, &[2, 2], 2, &mut rng).unwrap();
    let cfg = OptimizerConfig::new(OptimizerKind::Adam);
    let mut st = OptimizerState::new(&net, cfg);
    for s in 0..1000 {
        let mut r = Rng::new(s);
        for id in net.param_ids() {
            let shape = net.param(id).unwrap().value.shape().to_vec();
            net.param_mut(id).unwrap().grad = Tensor::normal(&mut r, &shape, 0.0, 1.0).unwrap();
        }
        st.step(&mut net, 1e-3).unwrap();
    }
    let opts = GrowthOptions {
        noise_scale: 0.0,
        ..GrowthOptions::default()
    };
    let report = grow_network(&mut net, &[2, 4], &mut rng, &opts).unwrap();
    expand_optimizer_state(&mut st, &report, &net, BufferPolicy::Preserve).unwrap();
    assert_eq!(st.ages(), &[1000, 0]);
    let id = ParamId {
        layer: 2,
        kind: ParamKind::Weight,
    };
    let g = 0.37;
    net.zero_grads();
    net.param_mut(id).unwrap().grad = Tensor::full(&[4, 2], g);
    let before = net.param(id).unwrap().value.clone();
    st.step(&mut net, 1e-3).unwrap();
    let after = &net.param(id).unwrap().value;
    // fresh Adam: m̂ = g, v̂ = g², step = lr·g/(|g| + ε)
    let expect = 1e-3 * g / (g + 1e-8);
    for j in 4..8 {
        assert!((before.data()[j] - after.data()[j] - expect).abs() < 1e-15);
    }
    assert_eq!(st.ages(), &[1001, 1]);
}

#[test]
fn buffer_policies() {
    let mut rng = Rng::new(5);
    let mut net = arch::mlp(2, &[2, 2], 2, &mut rng).unwrap();
    let cfg = OptimizerConfig::new(OptimizerKind::Adam);
    let mut st = OptimizerState::new(&net, cfg);
    let (x, _) = batch(0);
    let x = x.slice(1, 0..2).unwrap();
    compute_grads(&mut net, &x, &[0, 1, 0, 1, 0, 1, 0, 1]);
    st.step(&mut net, 1e-3).unwrap();
    let id = ParamId {
        layer: 2,
        kind: ParamKind::Weight,
    };
    let old_m = st.first_moment(id).unwrap().to_vec();
    let opts = GrowthOptions::default();
    let mut reset = st.clone();
    let mut net2 = net.clone();
    let report = grow_network(&mut net, &[2, 4], &mut rng, &opts).unwrap();
    expand_optimizer_state(&mut st, &report, &net, BufferPolicy::Preserve).unwrap();
    assert_eq!(&st.first_moment(id).unwrap()[..4], &old_m[..]);
    assert!(st.first_moment(id).unwrap()[4..].iter().all(|&v| v == 0.0));
    assert_eq!(*st.ages().last().unwrap(), 0);
    assert!(matches!(
        expand_optimizer_state(&mut st, &report, &net, BufferPolicy::Preserve),
        Err(Error::State(_))
    ));

    let report2 = grow_network(&mut net2, &[2, 4], &mut Rng::new(9), &opts).unwrap();
    expand_optimizer_state(&mut reset, &report2, &net2, BufferPolicy::Reset).unwrap();
    for pid in net2.param_ids() {
        assert!(reset.first_moment(pid).unwrap().iter().all(|&v| v == 0.0));
        assert!(reset.second_moment(pid).unwrap().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn stepping_without_expansion_is_a_state_error() {
    let mut rng = Rng::new(6);
    let mut net = arch::mlp(2, &[2, 2], 2, &mut rng).unwrap();
    let mut st = OptimizerState::new(&net, OptimizerConfig::new(OptimizerKind::Sgd));
    grow_network(&mut net, &[4, 4], &mut rng, &GrowthOptions::default()).unwrap();
    assert!(matches!(st.step(&mut net, 0.1), Err(Error::State(_))));
}

#[test]
fn avagrad_normalizer_for_equal_rates() {
    // all v equal ⇒ per-parameter η = c and ‖η/√4‖₂ = c, so the step is lr·m
    let (mut net, mut st) = two_stage_toy(OptimizerKind::AvaGrad, RateMode::StageNorm);
    for id in net.param_ids() {
        let shape = net.param(id).unwrap().value.shape().to_vec();
        net.param_mut(id).unwrap().grad = Tensor::full(&shape, 0.5);
    }
    let before: Vec<Tensor> = net
        .param_ids()
        .iter()
        .map(|&id| net.param(id).unwrap().value.clone())
        .collect();
    st.step(&mut net, 0.01).unwrap();
    for (id, b) in net.param_ids().into_iter().zip(before) {
        let d = b.sub(&net.param(id).unwrap().value).unwrap();
        // m after one step = (1-β1)·g
        for &x in d.data() {
            assert!((x - 0.01 * 0.1 * 0.5).abs() < 1e-15);
        }
    }
}

#[test]
fn avagrad_stage_normalizers_are_independent() {
    let (net0, st0) = two_stage_toy(OptimizerKind::AvaGrad, RateMode::StageNorm);
    let run = |scale_new: f64| {
        let (mut net, mut st) = (net0.clone(), st0.clone());
        for id in net.param_ids() {
            let tb = net.partition().get(id).unwrap().clone();
            let p = net.param_mut(id).unwrap();
            p.grad = Tensor::full(p.value.shape(), 1.0);
            for r in tb.stage_ranges(1) {
                for j in r {
                    p.grad.data_mut()[j] = scale_new;
                }
            }
        }
        // two steps so that v differs between stages
        st.step(&mut net, 0.01).unwrap();
        let snap: Vec<Tensor> = net
            .param_ids()
            .iter()
            .map(|&id| net.param(id).unwrap().value.clone())
            .collect();
        st.step(&mut net, 0.01).unwrap();
        (net, snap)
    };
    let (a, sa) = run(1.0);
    let (b, sb) = run(50.0);
    // stage-0 entries move identically whatever happens on stage 1
    for ((id, x), y) in a.param_ids().into_iter().zip(sa).zip(sb) {
        let tb = a.partition().get(id).unwrap();
        for r in tb.stage_ranges(0) {
            for j in r {
                let da = x.data()[j] - a.param(id).unwrap().value.data()[j];
                let db = y.data()[j] - b.param(id).unwrap().value.data()[j];
                assert!((da - db).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn lars_trust_ratio() {
    assert!((lars_rate(0.1, 3.0, 3.0) - 0.1).abs() < 1e-16);
    assert_eq!(lars_rate(0.1, 6.0, 3.0), 2.0 * lars_rate(0.1, 3.0, 3.0));
    assert_eq!(lars_rate(0.1, 6.0, 0.0), 0.0);

    let mut rng = Rng::new(7);
    let mut net = arch::mlp(2, &[2], 2, &mut rng).unwrap();
    let mut cfg = OptimizerConfig::new(OptimizerKind::Lars);
    cfg.momentum = 0.0;
    let mut st = OptimizerState::new(&net, cfg);
    net.zero_grads();
    let id = ParamId {
        layer: 0,
        kind: ParamKind::Weight,
    };
    let w = Tensor::from_vec(vec![2, 2], vec![3.0, 0.0, 0.0, 4.0]).unwrap();
    net.param_mut(id).unwrap().value = w.clone();
    net.param_mut(id).unwrap().grad =
        Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    let bias_before = net.layer(0).state.bias.as_ref().unwrap().value.clone();
    st.step(&mut net, 0.1).unwrap();
    // ‖W‖ = 5, ‖G‖ = 1: entry moves by 0.1·5·1
    assert!((net.param(id).unwrap().value.data()[1] + 0.5).abs() < 1e-15);
    assert_eq!(net.layer(0).state.bias.as_ref().unwrap().value, bias_before);
}

#[test]
fn cosine_schedule_points() {
    assert_eq!(cosine_lr(0.0, 10.0, 0.2), 0.2);
    assert!(cosine_lr(10.0, 10.0, 0.2).abs() < 1e-17);
    assert!((cosine_lr(5.0, 10.0, 0.2) - 0.1).abs() < 1e-15);
}

#[test]
fn state_round_trips_through_bytes() {
    let (mut net, mut st) = two_stage_toy(OptimizerKind::Adam, RateMode::StageNorm);
    let (x, y) = batch(2);
    compute_grads(
        &mut net,
        &x.slice(1, 0..2).unwrap(),
        &y.iter().map(|v| v % 2).collect::<Vec<_>>(),
    );
    st.step(&mut net, 1e-3).unwrap();
    let mut w = BinWriter::new(Vec::new());
    st.write(&mut w).unwrap();
    let bytes = w.into_inner();
    let back = OptimizerState::read(&mut BinReader::new(&bytes[..]), st.cfg).unwrap();
    assert_eq!(back, st);
}
