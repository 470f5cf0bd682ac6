use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ticl::backbone::{init_backbone, BackboneConfig, ClassifierHead, FrozenBackbone, PromptVector};
use ticl::dap::{run_continual, train_phase1, DapConfig, Mode, TokenizedSplit};
use ticl::eval::{evaluate, linear_probe, probe_curve, ProbeConfig};
use ticl::streams::{balanced_train_set, generate_synthetic, Ordering, StreamSpec, SyntheticParams, TaskStream};

fn backbone() -> FrozenBackbone {
    init_backbone(&BackboneConfig::default()).unwrap()
}

fn quick() -> DapConfig {
    DapConfig {
        epochs_phase1: 2,
        epochs_phase2: 2,
        ..DapConfig::default()
    }
}

fn stream(spec: StreamSpec, params: SyntheticParams) -> TaskStream {
    generate_synthetic(&spec, &params).unwrap()
}

fn noiseless() -> SyntheticParams {
    SyntheticParams {
        noise_std: 0.0,
        ..SyntheticParams::default()
    }
}

fn two_class_spec() -> StreamSpec {
    StreamSpec {
        num_classes: 2,
        num_tasks: 1,
        n_max: 40,
        rho: 1.0,
        ordering: Ordering::Balanced,
        test_per_class: 10,
        ..StreamSpec::default()
    }
}

#[test]
fn phase_one_separates_noiseless_classes() {
    let bb = backbone();
    let s = stream(two_class_spec(), noiseless());
    let data = TokenizedSplit::new(&bb, &s.train[0]).unwrap();
    let mut head = ClassifierHead::for_config(bb.config());
    let mut active = vec![false; bb.config().num_classes_total];
    active[0] = true;
    active[1] = true;
    let cfg = DapConfig::default();
    let general = PromptVector::random(4, 16, 0.02, &mut ChaCha8Rng::seed_from_u64(0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (p_b, losses) = train_phase1(&bb, &data, &mut head, &active, &general, &cfg, &mut rng).unwrap();
    assert_eq!(losses.len(), cfg.epochs_phase1);
    assert_eq!(evaluate(&bb, &p_b, &head, &s.train[0]).unwrap(), 1.0);

    let mut head2 = ClassifierHead::for_config(bb.config());
    let mut rng2 = ChaCha8Rng::seed_from_u64(1);
    let (p_b2, _) = train_phase1(&bb, &data, &mut head2, &active, &general, &cfg, &mut rng2).unwrap();
    assert_eq!(p_b, p_b2);
    assert_eq!(head, head2);
}

#[test]
fn full_batch_phase_one_loss_does_not_rise() {
    let bb = backbone();
    let s = stream(two_class_spec(), SyntheticParams::default());
    let data = TokenizedSplit::new(&bb, &s.train[0]).unwrap();
    let mut head = ClassifierHead::for_config(bb.config());
    let mut active = vec![false; bb.config().num_classes_total];
    active[..2].iter_mut().for_each(|a| *a = true);
    let cfg = DapConfig {
        batch_size: data.len(),
        epochs_phase1: 20,
        ..DapConfig::default()
    };
    let general = PromptVector::random(4, 16, 0.02, &mut ChaCha8Rng::seed_from_u64(0));
    let (_, losses) = train_phase1(&bb, &data, &mut head, &active, &general, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{losses:?}");
    }
}

#[test]
fn noiseless_single_task_is_learned_exactly() {
    let bb = backbone();
    let s = stream(two_class_spec(), noiseless());
    let out = run_continual(&s, &bb, &DapConfig::default()).unwrap();
    assert_eq!(out.matrix.get(0, 0), Some(1.0));
}

#[test]
fn runs_are_deterministic() {
    let bb = backbone();
    let s = stream(StreamSpec::default(), SyntheticParams::default());
    let a = run_continual(&s, &bb, &quick()).unwrap();
    let b = run_continual(&s, &bb, &quick()).unwrap();
    assert_eq!(a.matrix, b.matrix);
    assert_eq!(a.matrix.to_csv(), b.matrix.to_csv());
    assert_eq!(a.state.general, b.state.general);
}

#[test]
fn persistent_state_size_is_constant_and_backbone_untouched() {
    let bb = backbone();
    let before = bb.compute_fingerprint();
    let s = stream(StreamSpec::default(), SyntheticParams::default());
    let out = run_continual(&s, &bb, &quick()).unwrap();
    assert_eq!(out.persistent_sizes.len(), s.num_tasks());
    assert!(out.persistent_sizes.iter().all(|&n| n == out.persistent_sizes[0]));
    assert_eq!(bb.compute_fingerprint(), before);
    assert_eq!(bb.fingerprint(), before);
}

#[test]
fn oracle_baseline_stores_one_prompt_per_task() {
    let bb = backbone();
    let s = stream(StreamSpec::default(), SyntheticParams::default());
    let cfg = DapConfig {
        mode: Mode::TaskSpecificOnly,
        ..quick()
    };
    let out = run_continual(&s, &bb, &cfg).unwrap();
    assert_eq!(out.state.oracle_prompts.len(), s.num_tasks());
    assert!(out.persistent_sizes.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn zero_head_accuracy_is_the_rate_of_class_zero() {
    let bb = backbone();
    let s = stream(StreamSpec::default(), SyntheticParams::default());
    let head = ClassifierHead::for_config(bb.config());
    let prompt = PromptVector::random(4, 16, 0.02, &mut ChaCha8Rng::seed_from_u64(0));
    for split in [s.test.clone(), s.test_split(0), s.train[0].clone()] {
        let zeros = split.labels().iter().filter(|&&y| y == 0).count() as f64 / split.len() as f64;
        let acc = evaluate(&bb, &prompt, &head, &split).unwrap();
        assert_eq!(acc, zeros);
        assert_eq!(acc, evaluate(&bb, &prompt, &head, &split).unwrap());
    }
}

#[test]
fn probe_separates_noiseless_classes() {
    let bb = backbone();
    let spec = StreamSpec {
        n_max: 20,
        test_per_class: 5,
        ..StreamSpec::default()
    };
    let s = stream(spec.clone(), noiseless());
    let train = balanced_train_set(&spec, &noiseless()).unwrap();
    let prompt = PromptVector::random(4, 16, 0.02, &mut ChaCha8Rng::seed_from_u64(0));
    let cfg = ProbeConfig {
        epochs: 200,
        ..ProbeConfig::default()
    };
    assert_eq!(linear_probe(&bb, &prompt, &train, &s.test, &cfg).unwrap(), 1.0);
}

#[test]
fn probe_curve_leaves_snapshots_alone() {
    let bb = backbone();
    let spec = StreamSpec::default();
    let s = stream(spec.clone(), SyntheticParams::default());
    let out = run_continual(&s, &bb, &quick()).unwrap();
    let before = out.general_snapshots.clone();
    let train = balanced_train_set(&spec, &SyntheticParams::default()).unwrap();
    let cfg = ProbeConfig {
        epochs: 2,
        ..ProbeConfig::default()
    };
    let curve = probe_curve(&bb, &out.general_snapshots, &train, &s.test, &cfg).unwrap();
    assert_eq!(curve.len(), s.num_tasks());
    assert_eq!(out.general_snapshots, before);
    assert!(curve.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn balanced_train_set_extends_the_long_tail_samples() {
    let spec = StreamSpec::default();
    let params = SyntheticParams::default();
    let s = stream(spec.clone(), params.clone());
    let balanced = balanced_train_set(&spec, &params).unwrap();
    let counts = balanced.class_counts(spec.num_classes);
    assert!(counts.iter().all(|&c| c == spec.n_max));
    for (task, split) in s.tasks.iter().zip(&s.train) {
        for &c in &task.class_ids {
            let ours: Vec<&[f64]> = split.iter().filter(|s| s.1 == c).map(|s| s.0).collect();
            let full: Vec<&[f64]> = balanced.iter().filter(|s| s.1 == c).map(|s| s.0).collect();
            assert_eq!(ours[..], full[..ours.len()]);
        }
    }
}
