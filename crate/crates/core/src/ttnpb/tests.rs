use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::netcore::{Activation, LayerSpec, Network};

fn small_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::fc(INPUT_DIM, 24, Activation::Tanh),
        LayerSpec::lstm(24, 24),
        LayerSpec::fc(24, N_F, Activation::Linear),
    ]
}

fn small_model(seed: u64) -> TtnpbModel {
    TtnpbModel::with_specs(small_specs(), Scaling::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn frame_with(f: [f64; 3]) -> SensorFrame {
    SensorFrame { f: [f; 24] }
}

fn random_episode(material: &str, trial: u32, len: usize, rng: &mut ChaCha8Rng) -> Episode {
    let steps = (0..len)
        .map(|t| {
            let mut frame = SensorFrame::zeros();
            for v in frame.f.iter_mut() {
                *v = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(0.0..60.0)];
            }
            Step {
                frame,
                position: [t as f64 * 6.0, rng.gen_range(0.0..60.0), 5.0],
                input: ControlInput { tau_roll_ref: rng.gen_range(-50.0..50.0), tau_pitch_ref: 0.0, f_z_ref: 150.0 },
            }
        })
        .collect();
    Episode { material: material.into(), trial, steps }
}

fn constant_episode(material: &str, frame: SensorFrame, len: usize) -> Episode {
    let step = Step { frame, position: [60.0, 30.0, 5.0], input: ControlInput::basic() };
    Episode { material: material.into(), trial: 0, steps: vec![step; len] }
}

#[test]
fn standard_stack_shape() {
    let specs = ttnpb_specs();
    assert_eq!(specs.len(), 10);
    assert_eq!(specs[0].in_dim, 80);
    assert_eq!(specs[9].out_dim, 72);
    let lstm = specs.iter().filter(|s| s.kind == crate::netcore::LayerKind::Lstm).count();
    assert_eq!(lstm, 2);
}

#[test]
fn zero_weights_predict_zero_frame() {
    let model = TtnpbModel::from_network(Network::zeros(ttnpb_specs()).unwrap(), Scaling::default()).unwrap();
    let mut state = model.zero_state();
    let out = model
        .predict(&frame_with([1.0, 2.0, 30.0]), &[10.0, 20.0, 5.0], &ControlInput::basic(), &ParametricBias([0.3, -0.2]), &mut state)
        .unwrap();
    assert!(out.is_zero());
}

#[test]
fn predict_is_pure_given_state() {
    let model = small_model(3);
    let args = (frame_with([1.0, -2.0, 40.0]), [30.0, 10.0, 4.0], ControlInput::basic(), ParametricBias([0.1, 0.2]));
    let mut s1 = model.zero_state();
    let mut s2 = model.zero_state();
    let a = model.predict(&args.0, &args.1, &args.2, &args.3, &mut s1).unwrap();
    let b = model.predict(&args.0, &args.1, &args.2, &args.3, &mut s2).unwrap();
    assert_eq!(a, b);
    assert_eq!(s1, s2);
}

#[test]
fn mismatched_network_is_rejected() {
    let net = Network::zeros(vec![LayerSpec::fc(79, N_F, Activation::Linear)]).unwrap();
    assert!(TtnpbModel::from_network(net, Scaling::default()).is_err());
}

#[test]
fn scaling_round_trips() {
    let s = Scaling::default();
    let u = ControlInput { tau_roll_ref: -12.5, tau_pitch_ref: 33.0, f_z_ref: 180.0 };
    let back = s.uninput(&s.input(&u));
    assert!((back.tau_roll_ref - u.tau_roll_ref).abs() < 1e-12);
    assert!((back.f_z_ref - u.f_z_ref).abs() < 1e-12);
    let f = frame_with([3.0, -4.0, 75.0]);
    assert_eq!(s.unframe(&s.frame(&f)), f);
    assert_eq!(s.position(&[60.0, 30.0, 0.0]), [0.0, 0.0, 0.0]);
}

#[test]
fn windows_cover_transitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps = vec![random_episode("a", 0, 51, &mut rng), random_episode("b", 0, 8, &mut rng)];
    let ws = windows(&eps, 20, 10);
    let first: Vec<_> = ws.iter().filter(|w| w.episode == 0).map(|w| w.start).collect();
    assert_eq!(first, vec![0, 10, 20, 30]);
    assert!(ws.iter().all(|w| w.start + w.len < eps[w.episode].steps.len()));
    // a short episode yields one shorter window
    let second: Vec<_> = ws.iter().filter(|w| w.episode == 1).collect();
    assert_eq!(second.len(), 1);
    assert_eq!(second[0].len, 7);
}

#[test]
fn constant_frames_are_fitted() {
    let c = frame_with([4.0, -6.0, 80.0]);
    let eps = vec![constant_episode("desk", c, 41)];
    let cfg = TrainConfig { max_epochs: 300, patience: 300, batch: 4, lr: 3e-3, ..TrainConfig::default() };
    let out = train_with_specs(&eps, small_specs(), Scaling::default(), &cfg).unwrap();
    assert!(out.final_mse < out.initial_mse);
    let p = *out.pbs.get("desk").unwrap();
    let mut state = out.model.zero_state();
    let mut pred = SensorFrame::zeros();
    for _ in 0..10 {
        pred = out.model.predict(&c, &[60.0, 30.0, 5.0], &ControlInput::basic(), &p, &mut state).unwrap();
    }
    for (a, b) in pred.to_flat().iter().zip(c.to_flat()) {
        assert!((a - b).abs() <= 0.05 * 80.0, "{a} vs {b}");
    }
}

#[test]
fn joint_step_touches_only_present_pbs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = vec![random_episode("a", 0, 25, &mut rng), random_episode("b", 0, 25, &mut rng)];
    let mut trainer = Trainer::new(small_model(1), &eps, 1e-2, 1e-2).unwrap();
    let before = trainer.clone();
    let only_a: Vec<Window> = windows(&eps, 10, 10).into_iter().filter(|w| w.episode == 0).collect();
    trainer.train_batch(&eps, &only_a).unwrap();
    assert_ne!(trainer.model.net.weights(), before.model.net.weights());
    assert_ne!(trainer.pbs[0], before.pbs[0]);
    assert_eq!(trainer.pbs[1], before.pbs[1]);
    assert_eq!(trainer.materials, vec!["a".to_string(), "b".to_string()]);
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let eps = vec![random_episode("a", 0, 30, &mut rng), random_episode("b", 1, 30, &mut rng)];
    let cfg = TrainConfig { max_epochs: 3, batch: 2, ..TrainConfig::default() };
    let x = train_with_specs(&eps, small_specs(), Scaling::default(), &cfg).unwrap();
    let y = train_with_specs(&eps, small_specs(), Scaling::default(), &cfg).unwrap();
    assert_eq!(x.model, y.model);
    assert_eq!(x.pbs, y.pbs);
    assert_eq!(x.loss_curve, y.loss_curve);
}

#[test]
fn training_without_windows_fails() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let eps = vec![random_episode("a", 0, 1, &mut rng)];
    let err = train_with_specs(&eps, small_specs(), Scaling::default(), &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, TtnpbError::InsufficientData(_)));
}

#[test]
fn empty_buffer_is_too_small_and_weights_untouched() {
    let model = small_model(2);
    let before = model.net.weights().to_vec();
    let cfg = OnlineConfig::default();
    let mut optim = cfg.optimizer();
    let buffer = OnlineBuffer::new(cfg.capacity);
    let err = online_update_pb(&model, &buffer, ParametricBias::default(), &mut optim, &cfg).unwrap_err();
    assert!(matches!(err, TtnpbError::BufferTooSmall { len: 0, needed: 10 }));
    assert_eq!(model.net.weights(), &before[..]);
}

#[test]
fn online_update_moves_only_pb() {
    let model = small_model(2);
    let before = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ep = random_episode("x", 0, 40, &mut rng);
    let mut online = OnlinePb::new(ParametricBias::default(), OnlineConfig::default());
    let mut updates = 0;
    for s in &ep.steps {
        if online.observe(&model, *s).unwrap().is_some() {
            updates += 1;
        }
    }
    assert_eq!(updates, 31);
    assert_eq!(online.buffer.len(), 30);
    assert_ne!(online.p, ParametricBias::default());
    assert_eq!(model, before);
}

#[test]
fn online_buffer_drops_oldest() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ep = random_episode("x", 0, 5, &mut rng);
    let mut buf = OnlineBuffer::new(3);
    for s in &ep.steps {
        buf.push(*s);
    }
    assert_eq!(buf.tail(10), ep.steps[2..].to_vec());
    assert_eq!(buf.tail(1), ep.steps[4..].to_vec());
}

#[test]
fn fit_pb_recovers_training_pb() {
    // PB fit with frozen weights should not do worse than the zero PB
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let eps = vec![random_episode("a", 0, 30, &mut rng)];
    let model = small_model(6);
    let (_, zero_mse) = fit_pb(&model, &eps, ParametricBias::default(), 0, 0.05, 10).unwrap();
    let (p, mse) = fit_pb(&model, &eps, ParametricBias::default(), 50, 0.05, 10).unwrap();
    assert!(mse <= zero_mse, "{mse} > {zero_mse}");
    assert_ne!(p, ParametricBias::default());
}

#[test]
fn recurrent_reset_isolates_windows() {
    let model = small_model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random_episode("a", 0, 20, &mut rng);
    let b = random_episode("a", 0, 20, &mut rng);
    let p = ParametricBias([0.2, 0.1]);
    let window = &a.steps[10..15];
    // state polluted by unrelated history, then reset
    let mut polluted = model.warm_state(&b.steps, &p).unwrap();
    polluted.reset();
    let mut fresh = model.zero_state();
    for s in window {
        let x = model.predict(&s.frame, &s.position, &s.input, &p, &mut polluted).unwrap();
        let y = model.predict(&s.frame, &s.position, &s.input, &p, &mut fresh).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn pca_of_line_points() {
    let pca = pb_pca(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!((pca.components[0][0] - h).abs() < 1e-12);
    assert!((pca.components[0][1] - h).abs() < 1e-12);
    assert!((pca.eigenvalues[0] - 2.0).abs() < 1e-12);
    assert!(pca.eigenvalues[1].abs() < 1e-12);
    let pc1: Vec<f64> = pca.projected.iter().map(|p| p[0]).collect();
    assert!(pc1[0] < pc1[1] && pc1[1] < pc1[2]);
}

#[test]
fn pca_degenerate_inputs() {
    assert!(matches!(pb_pca(&[[1.0, 2.0]]), Err(TtnpbError::DegenerateData(_))));
    assert!(matches!(pb_pca(&[[1.0, 2.0], [1.0, 2.0]]), Err(TtnpbError::DegenerateData(_))));
}

#[test]
fn pca_variance_matches_eigenvalues() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = (0..10).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)]).collect();
        let pca = pb_pca(&pts).unwrap();
        for k in 0..2 {
            let var = pca.projected.iter().map(|p| p[k] * p[k]).sum::<f64>() / 9.0;
            assert!((var - pca.eigenvalues[k]).abs() < 1e-9);
        }
        let c = pca.components;
        assert!((c[0][0] * c[1][0] + c[0][1] * c[1][1]).abs() < 1e-12);
        assert!(pca.eigenvalues[0] >= pca.eigenvalues[1]);
    }
}

#[test]
fn silhouette_separated_clusters() {
    let pts = [[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]];
    let s = silhouette(&pts, &["a", "a", "b", "b"]);
    assert!(s > 0.95);
    let mixed = silhouette(&pts, &["a", "b", "a", "b"]);
    assert!(mixed < 0.0);
}

#[test]
fn nearest_pb_entry() {
    let mut t = PbTable::default();
    t.0.insert("cardboard".into(), ParametricBias([1.0, 0.0]));
    t.0.insert("foam".into(), ParametricBias([-1.0, 0.0]));
    assert_eq!(t.nearest(&ParametricBias([0.6, 0.3])).unwrap().0, "cardboard");
    assert!(PbTable::default().nearest(&ParametricBias::default()).is_none());
}

#[test]
fn episode_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ep = random_episode("foam", 3, 6, &mut rng);
    let dir = std::env::temp_dir().join(format!("tw-ep-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("foam_3.jsonl");
    let mut buf = Vec::new();
    write_episode(&ep, &mut buf).unwrap();
    std::fs::write(&path, &buf).unwrap();
    assert_eq!(read_episode(&path).unwrap(), ep);
    assert_eq!(read_episode_dir(&dir).unwrap(), vec![ep]);

    let text = String::from_utf8(buf).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = r#"{"t":2,"material_id":"foam","trial_id":3,"F":[1,2],"x":[0,0,0],"u":[0,0,150]}"#;
    std::fs::write(&path, lines.join("\n")).unwrap();
    match read_episode(&path) {
        Err(TtnpbError::Parse { line, file, .. }) => {
            assert_eq!(line, 3);
            assert!(file.ends_with("foam_3.jsonl"));
        }
        other => panic!("expected parse error, got {other:?}"),
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn checkpoint_round_trip() {
    let mut pbs = PbTable::default();
    pbs.0.insert("desk".into(), ParametricBias([0.25, -1.5]));
    let ck = Checkpoint { model: small_model(4), pbs, config_echo: "{\"seed\":4}".into() };
    let bytes = ck.to_bytes();
    let back = Checkpoint::read(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(sha256_hex(&bytes), sha256_hex(&back.to_bytes()));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::read(&mut bad.as_slice()).is_err());
    assert!(Checkpoint::read(&mut &bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn refinement_settles_pbs_and_keeps_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let eps = vec![random_episode("a", 0, 41, &mut rng), random_episode("b", 1, 41, &mut rng)];
    let off = TrainConfig { max_epochs: 5, batch: 4, pb_refine_iters: 0, ..TrainConfig::default() };
    let on = TrainConfig { pb_refine_iters: 200, ..off };
    let x = train_with_specs(&eps, small_specs(), Scaling::default(), &off).unwrap();
    let y = train_with_specs(&eps, small_specs(), Scaling::default(), &on).unwrap();
    assert_eq!(x.model, y.model);
    assert_eq!(x.loss_curve, y.loss_curve);
    for (i, m) in ["a", "b"].iter().enumerate() {
        let mine = &eps[i..=i];
        let (_, raw) = fit_pb(&y.model, mine, *x.pbs.get(m).unwrap(), 0, 0.02, 20).unwrap();
        let (_, settled) = fit_pb(&y.model, mine, *y.pbs.get(m).unwrap(), 0, 0.02, 20).unwrap();
        let (_, further) = fit_pb(&y.model, mine, *y.pbs.get(m).unwrap(), 200, 0.02, 20).unwrap();
        assert!(settled <= raw + 1e-12, "{m}: {settled} > {raw}");
        assert!(further >= settled * 0.99, "{m}: not settled, {further} < {settled}");
    }
}

#[test]
fn online_step_size_decays() {
    let c = OnlineConfig { lr: 0.1, decay: 100.0, ..OnlineConfig::default() };
    assert_eq!(c.lr_at(0), 0.1);
    assert!((c.lr_at(100) - 0.05).abs() < 1e-15);
    assert!((c.lr_at(300) - 0.025).abs() < 1e-15);
    let flat = OnlineConfig { decay: 0.0, ..c };
    assert_eq!(flat.lr_at(1000), 0.1);
}
