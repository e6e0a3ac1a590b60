use super::*;
use crate::data::{synthetic_image, Dataset};
use crate::growth::GrowthOptions;
use crate::nn::{arch, softmax_cross_entropy, Mode, Network};
use crate::optim::{cosine_lr, OptimizerConfig, OptimizerKind, OptimizerState, RateMode};
use crate::tensor::Rng;
use proptest::prelude::*;

#[test]
fn round_even_rules() {
    assert_eq!(round_even(3.2), 4);
    assert_eq!(round_even(2.9), 2);
    assert_eq!(round_even(3.0), 4);
    assert_eq!(round_even(5.0), 6);
    assert_eq!(round_even(0.9), 0);
    assert_eq!(round_even(1.0), 2);
    assert_eq!(round_even(6.8), 6);
}

#[test]
fn width_schedule_examples() {
    assert_eq!(
        width_schedule(16, 64, 0.2, 9).unwrap(),
        vec![16, 20, 24, 28, 34, 40, 48, 58, 64]
    );
    assert_eq!(width_schedule(7, 64, 0.2, 1).unwrap(), vec![64]);
    assert_eq!(width_schedule(8, 32, 0.0, 4).unwrap(), vec![8, 8, 8, 32]);
    assert!(matches!(
        width_schedule(65, 64, 0.2, 3),
        Err(crate::Error::Argument(_))
    ));
}

#[test]
fn epoch_schedule_golden_lists() {
    assert_eq!(
        epoch_schedule(8, 160, 0.2, 9).unwrap(),
        vec![8, 9, 11, 13, 16, 19, 23, 28, 33]
    );
    assert_eq!(
        epoch_schedule(10, 200, 0.2, 9).unwrap(),
        vec![10, 12, 14, 17, 20, 24, 29, 35, 39]
    );
    assert_eq!(
        epoch_schedule(4, 90, 0.2, 9).unwrap(),
        vec![4, 4, 5, 6, 8, 9, 11, 14, 29]
    );
    assert!(epoch_schedule(8, 100, 0.2, 9).is_err());
}

#[test]
fn batch_schedule_examples() {
    assert_eq!(batch_schedule(128, 0.0, 5).unwrap(), vec![128; 5]);
    assert_eq!(batch_schedule(128, 0.5, 3).unwrap(), vec![288, 192, 128]);
    assert_eq!(batch_schedule(64, 0.3, 1).unwrap(), vec![64]);
}

fn cifar_plan(finals: &[usize]) -> GrowthPlan {
    GrowthPlan::build(finals, &PlanParams::default()).unwrap()
}

#[test]
fn proportional_plan_tracks_widest_layer() {
    let plan = cifar_plan(&[16, 32, 64]);
    assert_eq!(plan.widths[2], vec![16, 20, 24, 28, 34, 40, 48, 58, 64]);
    assert_eq!(plan.widths[0], vec![4, 6, 6, 8, 8, 10, 12, 14, 16]);
    assert_eq!(plan.epochs, vec![8, 9, 11, 13, 16, 19, 23, 28, 33]);
    plan.validate().unwrap();
}

#[test]
fn cost_ratio_matches_published_costs() {
    let cases: [(&dyn FlopsModel, f64); 3] = [
        (&Resnet20 { classes: 10 }, 54.90),
        (&Vgg11Cifar { classes: 10 }, 52.91),
        (&MobileNetV1Cifar { classes: 10 }, 53.80),
    ];
    for (model, target) in cases {
        let plan = cifar_plan(&model.final_widths());
        let r = train_cost_ratio(model, &plan, 50_000);
        assert!((r - target).abs() <= 2.0, "{r} vs {target}");
    }
}

#[test]
fn single_stage_costs_one_hundred_percent() {
    let m = Resnet20 { classes: 10 };
    let plan = GrowthPlan::fixed(&m.final_widths(), 160, 128).unwrap();
    assert!((train_cost_ratio(&m, &plan, 50_000) - 100.0).abs() < 1e-12);
}

/// Hand-counted forward FLOPs of the 8x8 four-layer CNN (3x3 convs, pools
/// after the first three layers, linear head).
fn cnn4_flops_oracle(c: &[usize], classes: usize) -> f64 {
    let conv = |cin: usize, cout: usize, hw: usize| (2 * 9 * cin * cout * hw * hw) as f64;
    conv(3, c[0], 8)
        + conv(c[0], c[1], 4)
        + conv(c[1], c[2], 2)
        + conv(c[2], c[3], 1)
        + (2 * c[3] * classes) as f64
}

#[test]
fn network_flops_model_matches_hand_count() {
    let model = NetworkFlops::new(vec![64, 128, 256, 512], |w: &[usize]| {
        arch::cnn4([w[0], w[1], w[2], w[3]], 10, &mut Rng::new(0))
    });
    let params = PlanParams {
        stages: 3,
        p_c: 1.0,
        p_t: 0.0,
        t0: 10,
        t_total: 30,
        policy: WidthPolicy::Explicit(vec![16, 32, 64, 128]),
        ..PlanParams::default()
    };
    let plan = GrowthPlan::build(&model.final_widths(), &params).unwrap();
    assert_eq!(plan.widths[0], vec![16, 32, 64]);
    assert_eq!(plan.epochs, vec![10, 10, 10]);
    let got = train_cost_ratio(&model, &plan, 1000);
    let num: f64 = (0..3)
        .map(|t| 10.0 * cnn4_flops_oracle(&plan.stage_widths(t), 10))
        .sum();
    let want = 100.0 * num / (30.0 * cnn4_flops_oracle(&[64, 128, 256, 512], 10));
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

struct OneX<'a>(&'a dyn FlopsModel);

impl FlopsModel for OneX<'_> {
    fn forward_flops(&self, w: &[usize]) -> f64 {
        self.0.forward_flops(w)
    }
    fn final_widths(&self) -> Vec<usize> {
        self.0.final_widths()
    }
    fn train_step_flops(&self, w: &[usize], batch: usize) -> f64 {
        batch as f64 * self.0.forward_flops(w)
    }
}

#[test]
fn cost_ignores_step_multiplier() {
    let m = Vgg11Cifar { classes: 10 };
    let plan = cifar_plan(&m.final_widths());
    let a = train_cost_ratio(&m, &plan, 50_000);
    let b = train_cost_ratio(&OneX(&m), &plan, 50_000);
    assert!((a - b).abs() < 1e-12);
}

struct Square;

impl FlopsModel for Square {
    fn forward_flops(&self, w: &[usize]) -> f64 {
        (w[0] * w[0]) as f64
    }
    fn final_widths(&self) -> Vec<usize> {
        vec![8]
    }
}

#[test]
fn plan_table_golden() {
    let params = PlanParams {
        stages: 3,
        p_c: 1.0,
        p_t: 0.0,
        p_b: 0.5,
        t0: 2,
        t_total: 6,
        b_base: 4,
        policy: WidthPolicy::Explicit(vec![2, 4]),
    };
    let plan = GrowthPlan::build(&[8, 16], &params).unwrap();
    // Batches 9, 6, 4 give ceil(36 / B) = 4, 6, 9 steps, so every stage
    // costs 2 * 3 * 36 * w^2 against a baseline of 6 * 9 * 3 * 4 * 64.
    let expected = "\
stage  epochs  batch  cum_flops_pct  widths
    0       2      9         2.0833  2,4
    1       2      6        10.4167  4,8
    2       2      4        43.7500  8,16
";
    assert_eq!(plan.table(&Square, 36), expected);
}

#[test]
fn plan_rejects_odd_increments() {
    let params = PlanParams {
        stages: 2,
        policy: WidthPolicy::Explicit(vec![4]),
        t0: 1,
        t_total: 2,
        ..PlanParams::default()
    };
    assert!(GrowthPlan::build(&[9], &params).is_err());
}

proptest! {
    #[test]
    fn epoch_schedule_sums_to_total(t0 in 1usize..12, p in 0.0f64..0.5, n in 1usize..10, extra in 1usize..50) {
        let head: usize = (0..n.saturating_sub(1)).map(|t| (t0 as f64 * (1.0 + p).powi(t as i32) + 1e-9).floor() as usize).sum();
        let total = head + extra;
        let e = epoch_schedule(t0, total, p, n).unwrap();
        prop_assert_eq!(e.iter().sum::<usize>(), total);
        prop_assert!(e.iter().all(|&x| x >= 1));
    }

    #[test]
    fn width_schedule_is_monotone_with_even_steps(c0 in 1usize..64, extra in 0usize..200, p in 0.0f64..1.0, n in 1usize..12) {
        let cf = c0 + extra;
        let w = width_schedule(c0, cf, p, n).unwrap();
        prop_assert_eq!(*w.last().unwrap(), cf);
        for (i, pair) in w.windows(2).enumerate() {
            prop_assert!(pair[0] <= pair[1]);
            if i + 2 < w.len() && pair[1] < cf {
                prop_assert_eq!((pair[1] - pair[0]) % 2, 0);
            }
        }
    }

    #[test]
    fn growing_plans_cost_less(t0 in 1usize..6, pc in 0.1f64..0.6) {
        let params = PlanParams { stages: 4, p_c: pc, p_t: 0.2, t0, t_total: 4 * t0 + 20, ..PlanParams::default() };
        let m = Resnet20 { classes: 10 };
        let plan = GrowthPlan::build(&m.final_widths(), &params).unwrap();
        prop_assert!(train_cost_ratio(&m, &plan, 1000) < 100.0);
    }
}

fn tiny_data(seed: u64, n: usize) -> Dataset {
    synthetic_image(seed, n, 4, 8, 0.5).unwrap()
}

fn tiny_plan() -> GrowthPlan {
    let params = PlanParams {
        stages: 3,
        p_c: 1.0,
        p_t: 0.0,
        t0: 2,
        t_total: 6,
        b_base: 16,
        policy: WidthPolicy::Explicit(vec![2, 2, 4, 4]),
        ..PlanParams::default()
    };
    GrowthPlan::build(&[8, 8, 16, 16], &params).unwrap()
}

fn tiny_net(plan: &GrowthPlan, seed: u64) -> Network {
    let w = plan.stage_widths(0);
    arch::cnn4([w[0], w[1], w[2], w[3]], 4, &mut Rng::new(seed)).unwrap()
}

#[derive(Default)]
struct Recorder {
    updates: u64,
    jumps: Vec<f64>,
    probe: Option<(crate::tensor::Tensor, Vec<usize>)>,
    before: f64,
}

impl StageHooks for Recorder {
    fn before_growth(&mut self, _stage: usize, net: &Network) -> crate::Result<()> {
        let (x, y) = self.probe.as_ref().unwrap();
        self.before = batch_loss(net, x, y, Mode::BatchStats)?;
        Ok(())
    }
    fn after_growth(
        &mut self,
        _stage: usize,
        net: &Network,
        _r: &crate::growth::GrowthReport,
    ) -> crate::Result<()> {
        let (x, y) = self.probe.as_ref().unwrap();
        self.jumps
            .push((batch_loss(net, x, y, Mode::BatchStats)? - self.before).abs());
        Ok(())
    }
    fn on_step(
        &mut self,
        _i: &StepInfo,
        _l: f64,
        _t: &[crate::optim::RateTrace],
    ) -> crate::Result<()> {
        self.updates += 1;
        Ok(())
    }
}

#[test]
fn stage_loop_counts_updates_and_preserves_loss() {
    let plan = tiny_plan();
    let data = tiny_data(1, 70);
    let mut net = tiny_net(&plan, 2);
    let mut opt = OptimizerState::new(&net, OptimizerConfig::new(OptimizerKind::Sgd));
    let mut cfg = LoopConfig::new(0.05, 9);
    cfg.growth = GrowthOptions {
        noise_scale: 0.0,
        ..GrowthOptions::default()
    };
    let mut hooks = Recorder {
        probe: Some(data.gather(&(0..16).collect::<Vec<_>>())),
        ..Recorder::default()
    };
    let records = run_stage_loop(&plan, &mut net, &mut opt, &data, &cfg, &mut hooks).unwrap();
    let expected: u64 = plan
        .epochs
        .iter()
        .zip(&plan.batches)
        .map(|(&t, &b)| (t * (70 / b)) as u64)
        .sum();
    assert_eq!(hooks.updates, expected);
    assert_eq!(records.last().unwrap().step, expected);
    assert_eq!(records.len(), 6);
    assert_eq!(net.widths(), vec![8, 8, 16, 16]);
    assert_eq!(hooks.jumps.len(), 2);
    for j in hooks.jumps {
        assert!(j <= 1e-6, "loss jump {j}");
    }
    assert!(records
        .windows(2)
        .all(|w| (w[0].stage, w[0].epoch, w[0].step) < (w[1].stage, w[1].epoch, w[1].step)));
}

#[test]
fn single_stage_loop_is_plain_training() {
    let data = tiny_data(3, 40);
    let plan = GrowthPlan::fixed(&[8, 8, 16, 16], 3, 8).unwrap();
    let mut net = tiny_net(&plan, 4);
    let mut reference = net.clone();
    let cfg_opt = OptimizerConfig {
        rate: RateMode::Global,
        ..OptimizerConfig::new(OptimizerKind::Sgd)
    };
    let mut opt = OptimizerState::new(&net, cfg_opt);
    let cfg = LoopConfig::new(0.1, 5);
    run_stage_loop(&plan, &mut net, &mut opt, &data, &cfg, &mut NoHooks).unwrap();

    // Plain loop: same shuffles, cosine per epoch, momentum SGD.
    let mut shuffle = Rng::new(5).fork(1);
    let ids = reference.param_ids();
    let mut mom: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| vec![0.0; reference.param(id).unwrap().value.len()])
        .collect();
    for e in 0..3 {
        let lr = cosine_lr(e as f64, 3.0, 0.1);
        let mut order: Vec<usize> = (0..40).collect();
        shuffle.shuffle(&mut order);
        for it in 0..5 {
            let (x, y) = data.gather(&order[it * 8..(it + 1) * 8]);
            let (logits, cache) = reference.forward(&x, Mode::Train).unwrap();
            let (_, dy) = softmax_cross_entropy(&logits, &y).unwrap();
            reference.backward(&cache, &dy).unwrap();
            for (k, &id) in ids.iter().enumerate() {
                let p = reference.param_mut(id).unwrap();
                for (j, (w, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                    mom[k][j] = 0.9 * mom[k][j] + g;
                    *w -= lr * mom[k][j];
                }
            }
        }
    }
    for &id in &ids {
        let a = &net.param(id).unwrap().value;
        let b = &reference.param(id).unwrap().value;
        assert!(a.max_abs_diff(b).unwrap() < 1e-12, "{id:?}");
    }
}

#[test]
fn resumed_loop_matches_uninterrupted() {
    let plan = tiny_plan();
    let data = tiny_data(5, 50);
    let run = |split: Option<usize>| {
        let mut net = tiny_net(&plan, 6);
        let mut opt = OptimizerState::new(&net, OptimizerConfig::new(OptimizerKind::Adam));
        let mut cfg = LoopConfig::new(0.01, 11);
        let mut records = Vec::new();
        if let Some(k) = split {
            cfg.max_epochs = Some(k);
            struct Keep(Option<LoopState>);
            impl StageHooks for Keep {
                fn on_epoch(
                    &mut self,
                    _r: &MetricsRecord,
                    _n: &Network,
                    _o: &OptimizerState,
                    s: &LoopState,
                ) -> crate::Result<()> {
                    self.0 = Some(s.clone());
                    Ok(())
                }
            }
            let mut keep = Keep(None);
            records = run_stage_loop(&plan, &mut net, &mut opt, &data, &cfg, &mut keep).unwrap();
            cfg.max_epochs = None;
            cfg.resume = keep.0;
        }
        records
            .extend(run_stage_loop(&plan, &mut net, &mut opt, &data, &cfg, &mut NoHooks).unwrap());
        (records, net)
    };
    let (full, net_a) = run(None);
    for split in [1, 2, 4] {
        let (parts, net_b) = run(Some(split));
        assert_eq!(full, parts, "split after {split} epochs");
        for id in net_a.param_ids() {
            assert_eq!(
                net_a.param(id).unwrap().value,
                net_b.param(id).unwrap().value
            );
        }
    }
}

#[test]
fn loop_rejects_mismatched_network() {
    let plan = tiny_plan();
    let data = tiny_data(1, 40);
    let mut net = arch::cnn4([4, 4, 4, 4], 4, &mut Rng::new(0)).unwrap();
    let mut opt = OptimizerState::new(&net, OptimizerConfig::new(OptimizerKind::Sgd));
    let err = run_stage_loop(
        &plan,
        &mut net,
        &mut opt,
        &data,
        &LoopConfig::new(0.1, 0),
        &mut NoHooks,
    )
    .unwrap_err();
    assert!(matches!(err, crate::Error::Argument(_)));
}

#[test]
fn metrics_rows_have_header_arity() {
    let r = MetricsRecord {
        stage: 1,
        epoch: 3,
        step: 40,
        train_loss: 0.5,
        eval_accuracy: None,
        lr: 0.1,
        widths: vec![4, 8],
        cumulative_flops: 1e6,
        rate_factors: vec![1.0, 2.0],
    };
    let row = r.csv_row();
    assert_eq!(row, "1,3,40,0.5,,0.1,1000000,4;8,1;2");
    assert_eq!(
        row.split(',').count(),
        MetricsRecord::CSV_HEADER.split(',').count()
    );
    assert_eq!(MetricsRecord::parse_csv_row(&row).unwrap(), r);
}
