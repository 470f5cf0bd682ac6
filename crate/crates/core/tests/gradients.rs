use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ticl::numerics::graph::{self, Objective, Sample, Trainables};
use ticl::numerics::{cosine_align_grad, cosine_align_loss, AttentionWeights, Tensor2};

const D: usize = 8;
const PROMPT_LEN: usize = 2;
const TOKENS: usize = 2; // n = prompt + tokens = 4 rows
const CLASSES: usize = 3;
const H: f64 = 1e-5;

struct Instance {
    frozen: AttentionWeights,
    prompt: Tensor2,
    weight: Tensor2,
    bias: Tensor2,
    tokens: Vec<Tensor2>,
    labels: Vec<usize>,
    stabilizing: Tensor2,
    boosting: Tensor2,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (D as f64).sqrt();
    let frozen = AttentionWeights {
        query: Tensor2::random_normal(D, D, std, &mut rng),
        key: Tensor2::random_normal(D, D, std, &mut rng),
        value: Tensor2::random_normal(D, D, std, &mut rng),
        output: Tensor2::random_normal(D, D, std, &mut rng),
    };
    Instance {
        frozen,
        prompt: Tensor2::random_normal(PROMPT_LEN, D, 0.5, &mut rng),
        weight: Tensor2::random_normal(D, CLASSES, 0.5, &mut rng),
        bias: Tensor2::random_normal(1, CLASSES, 0.5, &mut rng),
        tokens: (0..3).map(|_| Tensor2::random_normal(TOKENS, D, 1.0, &mut rng)).collect(),
        labels: vec![0, 2, 1],
        stabilizing: Tensor2::random_normal(PROMPT_LEN, D, 1.0, &mut rng),
        boosting: Tensor2::random_normal(PROMPT_LEN, D, 1.0, &mut rng),
    }
}

fn objective(inst: &Instance, lambda: Option<f64>) -> Objective<'_> {
    let base = Objective::cross_entropy_only(None);
    match lambda {
        None => base,
        Some(l) => base
            .with_alignment(l, &inst.stabilizing)
            .with_alignment(1.0 - l, &inst.boosting),
    }
}

fn eval(inst: &Instance, prompt: &Tensor2, weight: &Tensor2, bias: &Tensor2, obj: &Objective<'_>) -> f64 {
    let batch: Vec<Sample<'_>> = inst
        .tokens
        .iter()
        .zip(&inst.labels)
        .map(|(t, &label)| Sample { tokens: t, label })
        .collect();
    let params = Trainables {
        prompt,
        head_weight: weight,
        head_bias: bias,
    };
    graph::loss(&inst.frozen, params, &batch, obj).unwrap()
}

fn central_difference(base: &Tensor2, f: impl Fn(&Tensor2) -> f64) -> Tensor2 {
    let mut out = Tensor2::zeros(base.rows(), base.cols());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[i] += H;
        let mut minus = base.clone();
        minus.data_mut()[i] -= H;
        out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * H);
    }
    out
}

fn relative_error(analytic: &Tensor2, numeric: &Tensor2) -> f64 {
    let diff = analytic.max_abs_diff(numeric);
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    diff / scale.max(1e-12)
}

fn check(seed: u64, lambda: Option<f64>) {
    let inst = instance(seed);
    let obj = objective(&inst, lambda);
    let batch: Vec<Sample<'_>> = inst
        .tokens
        .iter()
        .zip(&inst.labels)
        .map(|(t, &label)| Sample { tokens: t, label })
        .collect();
    let params = Trainables {
        prompt: &inst.prompt,
        head_weight: &inst.weight,
        head_bias: &inst.bias,
    };
    let (loss, grads) = graph::loss_and_gradients(&inst.frozen, params, &batch, &obj).unwrap();
    let direct = eval(&inst, &inst.prompt, &inst.weight, &inst.bias, &obj);
    assert!((loss.total - direct).abs() < 1e-12);

    let np = central_difference(&inst.prompt, |p| eval(&inst, p, &inst.weight, &inst.bias, &obj));
    let nw = central_difference(&inst.weight, |w| eval(&inst, &inst.prompt, w, &inst.bias, &obj));
    let nb = central_difference(&inst.bias, |b| eval(&inst, &inst.prompt, &inst.weight, b, &obj));
    for (name, a, n) in [
        ("prompt", &grads.prompt, &np),
        ("head weight", &grads.head_weight, &nw),
        ("head bias", &grads.head_bias, &nb),
    ] {
        let rel = relative_error(a, n);
        assert!(rel < 1e-4, "{name} λ={lambda:?}: relative error {rel:e}");
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    for seed in 0..3 {
        check(seed, None);
    }
}

#[test]
fn anchored_gradients_match_finite_differences() {
    for seed in 0..3 {
        for lambda in [0.0, 0.37, 1.0] {
            check(seed, Some(lambda));
        }
    }
}

#[test]
fn masked_cross_entropy_gradients_match_finite_differences() {
    let inst = instance(11);
    let active = [true, false, true];
    let labels = [0usize, 2, 0];
    let batch: Vec<Sample<'_>> = inst
        .tokens
        .iter()
        .zip(labels)
        .map(|(t, label)| Sample { tokens: t, label })
        .collect();
    let obj = Objective::cross_entropy_only(Some(&active));
    let loss_at = |p: &Tensor2, w: &Tensor2| {
        let params = Trainables {
            prompt: p,
            head_weight: w,
            head_bias: &inst.bias,
        };
        graph::loss(&inst.frozen, params, &batch, &obj).unwrap()
    };
    let params = Trainables {
        prompt: &inst.prompt,
        head_weight: &inst.weight,
        head_bias: &inst.bias,
    };
    let (_, grads) = graph::loss_and_gradients(&inst.frozen, params, &batch, &obj).unwrap();
    let np = central_difference(&inst.prompt, |p| loss_at(p, &inst.weight));
    let nw = central_difference(&inst.weight, |w| loss_at(&inst.prompt, w));
    assert!(relative_error(&grads.prompt, &np) < 1e-4);
    assert!(relative_error(&grads.head_weight, &nw) < 1e-4);
    // The inactive column receives no gradient.
    for r in 0..D {
        assert_eq!(grads.head_weight.get(r, 1), 0.0);
    }
}

#[test]
fn prompt_gradient_is_nonzero_for_generic_weights() {
    let inst = instance(5);
    let obj = Objective::cross_entropy_only(None);
    let batch = [Sample {
        tokens: &inst.tokens[0],
        label: 1,
    }];
    let params = Trainables {
        prompt: &inst.prompt,
        head_weight: &inst.weight,
        head_bias: &inst.bias,
    };
    let (_, grads) = graph::loss_and_gradients(&inst.frozen, params, &batch, &obj).unwrap();
    assert!(grads.prompt.norm() > 1e-6);
}

#[test]
fn unit_coefficient_limits_are_bit_identical_to_single_anchor_objectives() {
    let inst = instance(9);
    let batch: Vec<Sample<'_>> = inst
        .tokens
        .iter()
        .zip(&inst.labels)
        .map(|(t, &label)| Sample { tokens: t, label })
        .collect();
    let params = || Trainables {
        prompt: &inst.prompt,
        head_weight: &inst.weight,
        head_bias: &inst.bias,
    };
    let run = |obj: &Objective<'_>| graph::loss_and_gradients(&inst.frozen, params(), &batch, obj).unwrap();

    let stabilizing_only = Objective::cross_entropy_only(None).with_alignment(1.0, &inst.stabilizing);
    let boosting_only = Objective::cross_entropy_only(None).with_alignment(1.0, &inst.boosting);
    assert_eq!(run(&objective(&inst, Some(1.0))), run(&stabilizing_only));
    assert_eq!(run(&objective(&inst, Some(0.0))), run(&boosting_only));
}

#[test]
fn pure_alignment_converges_in_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let anchor = Tensor2::random_normal(4, D, 1.0, &mut rng);
    let mut prompt = Tensor2::random_normal(4, D, 1.0, &mut rng);
    let mut opt = ticl::numerics::AdamState::for_param(&prompt, Default::default());
    for _ in 0..2000 {
        let (_, g) = cosine_align_grad(&prompt, &anchor).unwrap();
        opt.step(&mut prompt, &g).unwrap();
    }
    assert!(cosine_align_loss(&prompt, &anchor).unwrap() < 1e-3);
}

fn tensor(len: usize) -> impl Strategy<Value = Tensor2> {
    prop::collection::vec(-5.0f64..5.0, len).prop_map(move |v| Tensor2::from_vec(1, len, v).unwrap())
}

proptest! {
    #[test]
    fn alignment_loss_is_scale_invariant(a in tensor(6), b in tensor(6), s in 0.01f64..100.0, t in 0.01f64..100.0) {
        prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
        let base = cosine_align_loss(&a, &b).unwrap();
        let scaled = cosine_align_loss(&a.scaled(s), &b.scaled(t)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-10);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&base));
    }

    #[test]
    fn alignment_gradient_is_orthogonal_to_prompt(a in tensor(6), b in tensor(6)) {
        prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
        let (_, g) = cosine_align_grad(&a, &b).unwrap();
        prop_assert!(g.dot(&a).unwrap().abs() < 1e-9 * (1.0 + g.norm() * a.norm()));
    }
}
