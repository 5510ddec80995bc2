use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::netcore::{Activation, LayerSpec, Network};
use crate::ttnpb::{ttnpb_specs, Scaling};

fn small_model(seed: u64) -> TtnpbModel {
    let specs = vec![
        LayerSpec::fc(INPUT_DIM, 16, Activation::Tanh),
        LayerSpec::lstm(16, 16),
        LayerSpec::fc(16, N_F, Activation::Linear),
    ];
    TtnpbModel::with_specs(specs, Scaling::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn identity_model() -> TtnpbModel {
    let spec = LayerSpec::fc(INPUT_DIM, N_F, Activation::Linear);
    let mut w = vec![0.0; spec.param_count()];
    for k in 0..N_F {
        w[k * INPUT_DIM + k] = 1.0;
    }
    TtnpbModel::from_network(Network::from_parts(vec![spec], w).unwrap(), Scaling::default()).unwrap()
}

fn random_frame(rng: &mut ChaCha8Rng) -> SensorFrame {
    let mut f = SensorFrame::zeros();
    for v in f.f.iter_mut() {
        *v = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(0.0..250.0)];
    }
    f
}

fn random_plan(rng: &mut ChaCha8Rng) -> ScaledPlan {
    std::array::from_fn(|_| [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(0.2..0.95)])
}

fn uniform(f: [f64; 3]) -> SensorFrame {
    SensorFrame { f: [f; N_TAXELS] }
}

fn right_bias() -> SensorFrame {
    let layout = taxel_layout();
    let mut f = SensorFrame::zeros();
    for i in layout.right_column() {
        f.f[i][2] = F_REF;
    }
    f
}

/// Analytic fixture `F = u`, so the loss is `sum (u - c)^2`.
struct Quadratic {
    c: ScaledPlan,
}

impl Objective for Quadratic {
    fn losses(&self, plans: &[ScaledPlan]) -> Result<Vec<f64>, TaskError> {
        Ok(plans
            .iter()
            .map(|p| (0..N_STEP).flat_map(|t| (0..3).map(move |k| (t, k))).map(|(t, k)| (p[t][k] - self.c[t][k]).powi(2)).sum())
            .collect())
    }

    fn loss_grad(&self, plan: &ScaledPlan) -> Result<(f64, ScaledPlan), TaskError> {
        let l = self.losses(&[*plan])?[0];
        Ok((l, std::array::from_fn(|t| std::array::from_fn(|k| 2.0 * (plan[t][k] - self.c[t][k])))))
    }
}

#[test]
fn gamma_grid_defaults() {
    let cfg = OptConfig::default();
    let want = [0.001, 0.00316227766, 0.01, 0.0316227766, 0.1];
    for (g, w) in cfg.gammas.iter().zip(want) {
        assert!((g - w).abs() < 1e-10, "{g} vs {w}");
    }
    assert_eq!(cfg.epochs, 3);
    cfg.validate().unwrap();
    assert!(OptConfig { gammas: vec![0.1, 0.01], epochs: 3 }.validate().is_err());
    assert!(OptConfig { gammas: vec![-0.1, 0.01], epochs: 3 }.validate().is_err());
}

#[test]
fn warm_start_shifts_and_duplicates() {
    let mut plan = HorizonPlan::cold();
    for (i, u) in plan.u.iter_mut().enumerate() {
        u.tau_roll_ref = i as f64;
    }
    let next = plan.shifted();
    let rolls: Vec<f64> = next.u.iter().map(|u| u.tau_roll_ref).collect();
    assert_eq!(rolls, vec![1.0, 2.0, 3.0, 3.0]);
}

#[test]
fn scaled_plan_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = random_plan(&mut rng);
    let back = HorizonPlan::from_scaled(&s).to_scaled();
    for t in 0..N_STEP {
        for k in 0..3 {
            assert!((back[t][k] - s[t][k]).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_kinds_parse() {
    for k in [TaskLossKind::TrackNormal, TaskLossKind::ShearVarianceMin, TaskLossKind::BiasRight] {
        assert_eq!(k.name().parse::<TaskLossKind>().unwrap(), k);
    }
    assert!("wipe".parse::<TaskLossKind>().is_err());
}

#[test]
fn track_loss_zero_on_target() {
    let frames = vec![uniform([0.0, 0.0, 200.0]); 4];
    let plan = [ControlInput::basic(); 4];
    assert_eq!(task_loss(&TaskLoss::new(TaskLossKind::TrackNormal), &frames, &plan), 0.0);
}

#[test]
fn shear_loss_is_smoothness_only_for_uniform_shear() {
    let frames = vec![uniform([3.0, -7.0, 50.0]); 4];
    let mut plan = [ControlInput::basic(); 4];
    plan[2].tau_roll_ref = 25.0;
    let loss = TaskLoss::new(TaskLossKind::ShearVarianceMin);
    let got = task_loss(&loss, &frames, &plan);
    // two jumps of 0.5 in scaled roll
    assert!((got - 0.01 * 2.0 * 0.25).abs() < 1e-12, "{got}");
}

#[test]
fn bias_loss_zero_on_right_column() {
    let frames = vec![right_bias(); 4];
    let plan = [ControlInput::basic(); 4];
    assert_eq!(task_loss(&TaskLoss::new(TaskLossKind::BiasRight), &frames, &plan), 0.0);
}

#[test]
fn track_loss_matches_summed_e1_squared() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames: Vec<SensorFrame> = (0..7).map(|_| random_frame(&mut rng)).collect();
    let plan = vec![ControlInput::basic(); 7];
    let l = task_loss(&TaskLoss::new(TaskLossKind::TrackNormal), &frames, &plan);
    let e1sq: f64 = frames.iter().map(|f| tick_metrics(f).e1.powi(2)).sum();
    assert!((l * F_REF * F_REF - e1sq).abs() < 1e-9 * e1sq);
}

#[test]
fn metric_identities() {
    let m = eval_metrics(&vec![uniform([1.0, 2.0, 200.0]); 5]).unwrap();
    assert_eq!(m.e1, 0.0);
    assert_eq!(m.e2, 0.0);
    assert_eq!(m.e2_excluded, 0);
    let m = eval_metrics(&[right_bias()]).unwrap();
    assert_eq!(m.e3, 0.0);
    assert!(matches!(eval_metrics(&[]), Err(TaskError::EmptyHistory)));
}

#[test]
fn shear_free_steps_are_excluded_from_e2() {
    let m = eval_metrics(&[uniform([0.0, 0.0, 100.0]), uniform([0.0, 4.0, 100.0])]).unwrap();
    assert_eq!(m.e2_excluded, 1);
    assert_eq!(m.e2, 0.0);
    assert_eq!(m.steps, 2);
    let none = eval_metrics(&[uniform([0.0, 0.0, 100.0])]).unwrap();
    assert!(none.e2.is_nan());
}

#[test]
fn e2_is_normalized_spread() {
    let mut f = uniform([0.0, 10.0, 100.0]);
    for i in 0..12 {
        f.f[i][1] = -10.0;
    }
    // std 10, mean |F_y| 10
    assert!((tick_metrics(&f).e2.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn single_step_expansion_is_predict() {
    let model = small_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frame = random_frame(&mut rng);
    let x = [40.0, 20.0, 4.0];
    let p = ParametricBias([0.3, -0.4]);
    let state = model.zero_state();
    let plan = HorizonPlan::from_scaled(&random_plan(&mut rng));
    let seq = expand(&model, &frame, &x, &plan, &p, &state).unwrap();
    assert_eq!(seq.len(), N_STEP);
    let mut s = state.clone();
    let one = model.predict(&frame, &x, &plan.u[0], &p, &mut s).unwrap();
    let close = one.to_flat().iter().zip(seq[0].to_flat()).all(|(a, b)| (a - b).abs() < 1e-9);
    assert!(close);
}

#[test]
fn expansion_is_pure() {
    let model = small_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frame = random_frame(&mut rng);
    let warm: Vec<_> = (0..3).map(|_| random_frame(&mut rng)).collect();
    let p = ParametricBias([0.1, 0.1]);
    let mut state = model.zero_state();
    for f in &warm {
        model.predict(f, &[1.0, 2.0, 3.0], &ControlInput::basic(), &p, &mut state).unwrap();
    }
    let snapshot = state.clone();
    let plan = HorizonPlan::cold();
    let a = expand(&model, &frame, &[1.0, 2.0, 3.0], &plan, &p, &state).unwrap();
    let b = expand(&model, &frame, &[1.0, 2.0, 3.0], &plan, &p, &state).unwrap();
    assert_eq!(a, b);
    assert_eq!(state, snapshot);
}

#[test]
fn identity_model_holds_frame() {
    let model = identity_model();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frame = random_frame(&mut rng);
    let seq = expand(&model, &frame, &[0.0; 3], &HorizonPlan::cold(), &ParametricBias::default(), &model.zero_state())
        .unwrap();
    for f in seq {
        for (a, b) in f.to_flat().iter().zip(frame.to_flat()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

fn fd_check(model: &TtnpbModel, seed: u64, kind: TaskLossKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = random_frame(&mut rng);
    let state = model.zero_state();
    let obj = ModelObjective {
        model,
        frame: &frame,
        x: [rng.gen_range(0.0..120.0), rng.gen_range(0.0..60.0), rng.gen_range(-10.0..10.0)],
        p: ParametricBias([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]),
        state: &state,
        loss: TaskLoss::new(kind),
    };
    let plan = random_plan(&mut rng);
    let (l, g) = obj.loss_grad(&plan).unwrap();
    assert!((l - obj.losses(&[plan]).unwrap()[0]).abs() <= 1e-12 * l.abs().max(1.0));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..N_STEP {
        for k in 0..3 {
            let mut up = plan;
            let mut dn = plan;
            up[t][k] += h;
            dn[t][k] -= h;
            let ls = obj.losses(&[up, dn]).unwrap();
            let fd = (ls[0] - ls[1]) / (2.0 * h);
            let rel = (fd - g[t][k]).abs() / fd.abs().max(g[t][k].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn expansion_gradient_matches_finite_differences() {
    let kinds = [TaskLossKind::TrackNormal, TaskLossKind::ShearVarianceMin, TaskLossKind::BiasRight];
    for seed in 0..20 {
        let model = small_model(100 + seed);
        let worst = fd_check(&model, seed, kinds[seed as usize % 3]);
        assert!(worst <= 1e-3, "seed {seed}: relative error {worst}");
    }
}

#[test]
fn full_stack_expansion_gradient() {
    let model = TtnpbModel::new(Scaling::default(), &mut ChaCha8Rng::seed_from_u64(7));
    assert!(model.net.specs() == ttnpb_specs().as_slice());
    for kind in [TaskLossKind::TrackNormal, TaskLossKind::BiasRight] {
        let worst = fd_check(&model, 7, kind);
        assert!(worst <= 1e-3, "{kind:?}: relative error {worst}");
    }
}

#[test]
fn quadratic_fixture_descends_and_picks_grid_argmin() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let obj = Quadratic { c: random_plan(&mut rng) };
    let cfg = OptConfig::default();
    let out = optimize_plan(&obj, None, &cfg).unwrap();
    assert!(out.loss < out.init_loss);
    // replay the epochs and compare each pick against an exhaustive search
    let mut cur = project(&HorizonPlan::cold().to_scaled());
    for &pick in &out.picks {
        let (_, g) = obj.loss_grad(&cur).unwrap();
        let scored: Vec<(f64, ScaledPlan)> = cfg
            .gammas
            .iter()
            .map(|gm| {
                let c = project(&std::array::from_fn(|t| std::array::from_fn(|k| cur[t][k] - gm * g[t][k])));
                (obj.losses(&[c]).unwrap()[0], c)
            })
            .collect();
        let best = scored.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        assert_eq!(scored[pick].0, best);
        cur = scored[pick].1;
    }
}

#[test]
fn optimal_plan_is_fixed_point() {
    let c = project(&HorizonPlan::cold().to_scaled());
    let obj = Quadratic { c };
    let out = optimize_plan(&obj, None, &OptConfig::default()).unwrap();
    assert_eq!(out.plan.to_scaled(), c);
    assert_eq!(out.loss, 0.0);
}

struct Broken;

impl Objective for Broken {
    fn losses(&self, plans: &[ScaledPlan]) -> Result<Vec<f64>, TaskError> {
        Ok(vec![f64::NAN; plans.len()])
    }
    fn loss_grad(&self, _: &ScaledPlan) -> Result<(f64, ScaledPlan), TaskError> {
        Ok((f64::NAN, [[f64::NAN; 3]; N_STEP]))
    }
}

#[test]
fn non_finite_loss_returns_init_plan() {
    let mut prev = HorizonPlan::cold();
    prev.u[1].tau_pitch_ref = 12.0;
    match optimize_plan(&Broken, Some(&prev), &OptConfig::default()) {
        Err(TaskError::NonFiniteLoss { init }) => assert_eq!(init, prev.shifted()),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn model_step_never_worsens_init() {
    let model = small_model(21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let frame = random_frame(&mut rng);
    let state = model.zero_state();
    let mut prev = None;
    for _ in 0..3 {
        let out = optimize_step(
            &model,
            &frame,
            &[60.0, 30.0, 5.0],
            &state,
            prev.as_ref(),
            &ParametricBias([0.2, 0.0]),
            TaskLoss::new(TaskLossKind::TrackNormal),
            &OptConfig::default(),
        )
        .unwrap();
        assert!(out.loss <= out.init_loss);
        assert!(out.plan.in_bounds());
        prev = Some(out.plan);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emitted_plans_stay_in_bounds(c in prop::array::uniform4(prop::array::uniform3(-5.0f64..5.0)), seed in 0u64..1000) {
        let obj = Quadratic { c };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prev = HorizonPlan::from_scaled(&random_plan(&mut rng));
        let out = optimize_plan(&obj, Some(&prev), &OptConfig::default()).unwrap();
        prop_assert!(out.plan.in_bounds());
        prop_assert!(out.loss <= out.init_loss);
    }
}
