//! Training-loop contracts on a reduced architecture: tied-seed
//! equivalences, phase isolation, probes, resume and schedule.

use ds2net::losses::disc_loss;
use ds2net::model::Group;
use ds2net::nets::Params;
use ds2net::synthdata::{GenSpec, SplitCounts};
use ds2net::trainer::{
    batches_at, discriminator_phase, evaluate, generator_phase, run, train, train_step, Batch, TrainData, TrainState, TARGET_TEST,
};
use ds2net::{Error, RunConfig};

/// 48x48 images through two stride-2 stages give the 12x12 features the
/// critic needs.
fn small(cfg: RunConfig) -> RunConfig {
    RunConfig {
        encoder_widths: vec![8, 16],
        head_width: 8,
        disc_channels: vec![8, 8, 8],
        batch_size: 2,
        ..cfg
    }
}

fn data(cfg: &RunConfig) -> TrainData {
    let spec = GenSpec {
        height: 48,
        width: 48,
        ..GenSpec::default()
    };
    let counts = SplitCounts {
        train_a: 6,
        test_a: 4,
        train_b: 6,
        test_b: 4,
    };
    TrainData::generate(&spec, counts, 5, cfg).unwrap()
}

fn params(state: &TrainState, prefix: &str) -> Vec<(String, Vec<f32>)> {
    let mut out = Vec::new();
    state.model.visit("", &mut |n, t| {
        if n.starts_with(prefix) {
            out.push((n, t.to_vec()));
        }
    });
    out
}

fn renamed(p: Vec<(String, Vec<f32>)>, from: &str, to: &str) -> Vec<(String, Vec<f32>)> {
    p.into_iter().map(|(n, v)| (n.replacen(from, to, 1), v)).collect()
}

fn bits(p: &[(String, Vec<f32>)]) -> Vec<(String, Vec<u32>)> {
    p.iter().map(|(n, v)| (n.clone(), v.iter().map(|x| x.to_bits()).collect())).collect()
}

#[test]
fn zero_lambda_without_selectors_is_two_independent_supervised_runs() {
    let single_cfg = small(RunConfig::source_only());
    let d = data(&single_cfg);
    let mut single = TrainState::new(single_cfg.clone()).unwrap();
    train(&mut single, &d, 3, &mut |_| {}).unwrap();

    for feature_align in [false, true] {
        let cfg = small(RunConfig {
            symmetric: true,
            feature_align,
            ddsm: false,
            dusm: false,
            lambda_es: 0.0,
            lambda_et: 0.0,
            ..RunConfig::default()
        });
        let mut sym = TrainState::new(cfg).unwrap();
        // A second single model started from the target-style branch's
        // initial weights is the reference for that branch.
        let mut twin = TrainState::new(single_cfg.clone()).unwrap();
        let init_t: Vec<(String, Vec<f32>)> = [params(&sym, "enc_t"), params(&sym, "head_t")].concat();
        twin.model.visit_mut("", &mut |n, t| {
            let src = n.replacen("enc_s", "enc_t", 1).replacen("head_s", "head_t", 1);
            let (_, v) = init_t.iter().find(|(m, _)| *m == src).unwrap();
            *t = ds2net::Tensor::param(t.shape(), v.clone()).unwrap();
        });
        let d = data(&sym.config);
        train(&mut sym, &d, 3, &mut |_| {}).unwrap();
        train(&mut twin, &d, 3, &mut |_| {}).unwrap();

        let s_branch = [params(&sym, "enc_s"), params(&sym, "head_s")].concat();
        let reference = [params(&single, "enc_s"), params(&single, "head_s")].concat();
        assert_eq!(bits(&s_branch), bits(&reference), "feature_align={feature_align}");
        let t_branch = renamed(renamed([params(&sym, "enc_t"), params(&sym, "head_t")].concat(), "enc_t", "enc_s"), "head_t", "head_s");
        let twin_p = [params(&twin, "enc_s"), params(&twin, "head_s")].concat();
        assert_eq!(bits(&t_branch), bits(&twin_p), "feature_align={feature_align}");
    }
}

#[test]
fn repeated_small_steps_lower_the_segmentation_loss() {
    let cfg = small(RunConfig {
        encoder_lr: 1e-4,
        head_lr: 1e-4,
        ..RunConfig::default()
    });
    let d = data(&cfg);
    let (bs, bt) = batches_at(&cfg, &d, 0).unwrap();
    let mut state = TrainState::new(cfg).unwrap();
    let mut seg = Vec::new();
    for _ in 0..5 {
        let r = train_step(&mut state, &bs, bt.as_ref()).unwrap();
        seg.push(r.seg_ss + r.seg_st);
    }
    assert!(seg.windows(2).all(|w| w[1] < w[0]), "{seg:?}");
}

#[test]
fn critic_learns_to_separate_frozen_features() {
    let cfg = small(RunConfig::default());
    let d = data(&cfg);
    let (bs, bt) = batches_at(&cfg, &d, 0).unwrap();
    let mut state = TrainState::new(cfg).unwrap();
    let (_, critic) = generator_phase(&mut state, &bs, bt.as_ref()).unwrap();
    let f = critic.unwrap();
    let ln2 = std::f64::consts::LN_2;
    for _ in 0..50 {
        discriminator_phase(&mut state, &f).unwrap();
    }
    let (ds, dt) = (state.model.disc_s.as_ref().unwrap(), state.model.disc_t.as_ref().unwrap());
    let l_s = f64::from(disc_loss(ds, &f.f_ss, &f.f_ts).unwrap().item());
    let l_t = f64::from(disc_loss(dt, &f.f_tt, &f.f_st).unwrap().item());
    assert!(l_s < ln2 && l_t < ln2, "{l_s} {l_t}");
}

#[test]
fn each_phase_only_moves_its_own_parameters() {
    let cfg = small(RunConfig::default());
    let d = data(&cfg);
    let (bs, bt) = batches_at(&cfg, &d, 0).unwrap();
    let mut state = TrainState::new(cfg).unwrap();
    let digest = |s: &TrainState| [Group::Encoder, Group::Head, Group::Discriminator].map(|g| s.param_digest(g));

    let before = digest(&state);
    let (_, critic) = generator_phase(&mut state, &bs, bt.as_ref()).unwrap();
    let mid = digest(&state);
    assert_ne!(before[0], mid[0]);
    assert_ne!(before[1], mid[1]);
    assert_eq!(before[2], mid[2]);

    discriminator_phase(&mut state, &critic.unwrap()).unwrap();
    let after = digest(&state);
    assert_eq!(mid[0], after[0]);
    assert_eq!(mid[1], after[1]);
    assert_ne!(mid[2], after[2]);
}

#[test]
fn one_step_updates_every_parameter() {
    let cfg = small(RunConfig::default());
    let d = data(&cfg);
    let (bs, bt) = batches_at(&cfg, &d, 0).unwrap();
    let mut state = TrainState::new(cfg).unwrap();
    let before = params(&state, "");
    train_step(&mut state, &bs, bt.as_ref()).unwrap();
    let after = params(&state, "");
    assert_eq!(before.len(), after.len());
    for ((n, a), (_, b)) in before.iter().zip(&after) {
        assert!(a.iter().zip(b).any(|(x, y)| x != y), "{n} was not updated");
    }
}

#[test]
fn untrained_model_is_near_chance() {
    let cfg = small(RunConfig::default());
    let d = data(&cfg);
    let state = TrainState::new(cfg).unwrap();
    let (_, target) = d.eval.iter().find(|(n, _)| n == TARGET_TEST).unwrap();
    let c = evaluate(&state.model, target).unwrap();
    let miou = c.miou().unwrap();
    assert!(miou < 0.55, "{miou}");
    assert_eq!(evaluate(&state.model, target).unwrap(), c);
    assert!(matches!(evaluate(&state.model, &[]), Err(Error::Config(_))));
}

#[test]
fn overflow_is_reported_with_the_producing_op() {
    let cfg = small(RunConfig::default());
    let d = data(&cfg);
    let (bs, bt) = batches_at(&cfg, &d, 0).unwrap();
    let mut state = TrainState::new(cfg).unwrap();
    state.model.visit_mut("", &mut |n, t| {
        if n == "enc_s.l0.weight" {
            *t = ds2net::Tensor::param(t.shape(), vec![1e38; t.numel()]).unwrap();
        }
    });
    let err = train_step(&mut state, &bs, bt.as_ref()).err().expect("overflow must abort");
    match &err {
        Error::NonFinite { op, context, .. } => {
            assert_eq!(op, "conv2d");
            assert!(context.contains("iteration 0"), "{context}");
        }
        other => panic!("{other}"),
    }
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = small(RunConfig {
        iterations: 8,
        eval_interval: 2,
        log_interval: 1,
        ..RunConfig::default()
    });
    let d = data(&cfg);
    let whole = run(cfg.clone(), &d).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut first = TrainState::new(cfg.clone()).unwrap();
    let mut rows = Vec::new();
    let mut record = |e: ds2net::trainer::TrainEvent| {
        if let ds2net::trainer::TrainEvent::Metrics(m) = e {
            rows.push(m.csv_line());
        }
    };
    train(&mut first, &d, 4, &mut record).unwrap();
    first.save(&path).unwrap();
    drop(first);
    let mut resumed = TrainState::load(cfg.clone(), &path).unwrap();
    assert_eq!(resumed.iteration, 4);
    train(&mut resumed, &d, 8, &mut record).unwrap();

    let expect: Vec<String> = whole.metrics.iter().map(|m| m.csv_line()).collect();
    assert_eq!(rows, expect);
    let mut fresh = TrainState::new(cfg.clone()).unwrap();
    train(&mut fresh, &d, 8, &mut |_| {}).unwrap();
    for g in [Group::Encoder, Group::Head, Group::Discriminator] {
        assert_eq!(resumed.param_digest(g), fresh.param_digest(g));
    }

    let other = RunConfig {
        lambda_es: 0.5,
        ..cfg
    };
    assert!(matches!(TrainState::load(other, &path), Err(Error::Checkpoint(_))));
}

#[test]
fn logged_rates_follow_the_poly_schedule() {
    let cfg = small(RunConfig {
        iterations: 10,
        log_interval: 1,
        ..RunConfig::source_only()
    });
    let out = run(cfg.clone(), &data(&cfg)).unwrap();
    assert_eq!(out.losses.len(), 10);
    for line in &out.losses {
        let cols: Vec<f64> = line.split(',').take(4).map(|v| v.parse().unwrap()).collect();
        let t = cols[0];
        for (base, got) in [(cfg.encoder_lr, cols[1]), (cfg.head_lr, cols[2]), (cfg.disc_lr, cols[3])] {
            let floor = base / 100.0;
            let want = floor + (base - floor) * (1.0 - t / 10.0).powf(0.9);
            assert!((got - want).abs() <= 1e-15 * base, "t={t}: {got} vs {want}");
        }
    }
}

#[test]
fn batches_are_a_function_of_seed_and_iteration() {
    let cfg = small(RunConfig::default());
    let d = data(&cfg);
    let eq = |a: &Batch, b: &Batch| a.images.data() == b.images.data() && a.labels == b.labels;
    let (s0, t0) = batches_at(&cfg, &d, 3).unwrap();
    let (s1, t1) = batches_at(&cfg, &d, 3).unwrap();
    assert!(eq(&s0, &s1) && eq(t0.as_ref().unwrap(), t1.as_ref().unwrap()));
    let (s2, _) = batches_at(&cfg, &d, 4).unwrap();
    assert!(!eq(&s0, &s2));
    let single = small(RunConfig::source_only());
    let (s3, t3) = batches_at(&single, &d, 3).unwrap();
    assert!(eq(&s0, &s3) && t3.is_none());
}
