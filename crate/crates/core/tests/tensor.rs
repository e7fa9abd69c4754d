use gatemem::rng::substream;
use gatemem::tensor::{gradient_check, gradient_check_with_fault, Fault, Tape, Tensor, Var};
use gatemem::Error;
use proptest::prelude::*;
use rand::Rng as _;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn v(data: &[f64]) -> Tensor {
    Tensor::vector(data.to_vec()).unwrap()
}

#[test]
fn matmul_hand_product() {
    let tape = Tape::new();
    let a = tape.leaf(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = tape.leaf(m(&[&[5.0], &[6.0]]));
    let c = a.matmul(b).unwrap().value();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[17.0, 39.0]);
}

#[test]
fn matmul_identity_and_zero() {
    let tape = Tape::new();
    let b = tape.leaf(m(&[&[1.5, -2.0, 0.25], &[7.0, 0.0, -3.5]]));
    let eye = tape.leaf(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let zero = tape.leaf(Tensor::zeros(&[2, 2]));
    assert_eq!(eye.matmul(b).unwrap().value(), b.value());
    assert_eq!(zero.matmul(b).unwrap().value(), Tensor::zeros(&[2, 3]));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err();
    let text = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(text.contains("[2, 3]"), "{text}");
}

#[test]
fn tensor_shape_must_match_data() {
    assert!(matches!(
        Tensor::new(vec![2, 2], vec![1.0; 3]),
        Err(Error::Dimension { .. })
    ));
    assert!(matches!(
        Tensor::new(vec![0], vec![]),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn elementwise_values() {
    let tape = Tape::new();
    let zero = tape.leaf(Tensor::scalar(0.0));
    assert_eq!(zero.sigmoid().item(), 0.5);
    assert_eq!(zero.tanh().item(), 0.0);
    assert_eq!(zero.exp().item(), 1.0);
    let x = tape.leaf(Tensor::scalar(3f64.ln()));
    assert!((x.sigmoid().item() - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_spec_cases() {
    let tape = Tape::new();
    let c = tape.leaf(v(&[4.2, 4.2, 4.2])).softmax().unwrap().value();
    for p in c.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = tape
        .leaf(v(&[2f64.ln(), 0.0, 0.0]))
        .softmax()
        .unwrap()
        .value();
    for (p, want) in s.data().iter().zip([0.5, 0.25, 0.25]) {
        assert!((p - want).abs() < 1e-15);
    }
    let big = tape.leaf(v(&[100.0, 0.0])).softmax().unwrap().value();
    assert!((big.data()[0] - 1.0).abs() < 1e-15);
    assert!(big.data()[1] < 1e-40 && big.data()[1] > 0.0);
}

#[test]
fn cross_entropy_spec_cases() {
    let tape = Tape::new();
    for target in 0..4 {
        let l = tape
            .leaf(v(&[0.3; 4]))
            .cross_entropy(&[target], &[1.0])
            .unwrap()
            .item();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }
    let sat = tape
        .leaf(v(&[1000.0, 0.0, 0.0]))
        .cross_entropy(&[0], &[1.0])
        .unwrap()
        .item();
    assert!((0.0..1e-300).contains(&sat) || sat == 0.0);
    let l = tape
        .leaf(v(&[2f64.ln(), 0.0, 0.0]))
        .cross_entropy(&[1], &[1.0])
        .unwrap()
        .item();
    assert!((l - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let tape = Tape::new();
    let err = tape
        .leaf(v(&[0.0; 3]))
        .cross_entropy(&[3], &[1.0])
        .unwrap_err();
    assert!(matches!(err, Error::Index(_)), "{err}");
}

#[test]
fn backward_of_sum_is_all_ones() {
    let tape = Tape::new();
    let x = tape.leaf(m(&[&[1.0, -2.0], &[3.0, 0.5]]));
    let g = tape.backward(x.sum()).unwrap();
    assert_eq!(g.wrt(x), Tensor::ones(&[2, 2]));
}

#[test]
fn backward_of_sigmoid_at_zero() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let g = tape.backward(x.sigmoid()).unwrap();
    assert_eq!(g.wrt(x).item(), 0.25);
}

#[test]
fn backward_accumulates_over_fan_out() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(1.7));
    let g = tape.backward(x.add(x).unwrap()).unwrap();
    assert_eq!(g.wrt(x).item(), 2.0);
}

#[test]
fn backward_requires_scalar_seed() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x.tanh()), Err(Error::Contract(_))));
}

#[test]
fn composite_matches_central_differences() {
    let mut rng = substream(11, "test/composite");
    let point =
        Tensor::matrix(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let err = gradient_check(|x| Ok(x.tanh().mul(x.sigmoid())?.exp().sum()), &point, 1e-5).unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn gradient_check_of_linear_function_is_exact() {
    let point = v(&[0.3, -1.2, 2.5, 0.0]);
    let err = gradient_check(|x| Ok(x.scale(3.0).sum()), &point, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn gradient_check_of_sigmoid_at_zero() {
    let err = gradient_check(|x| Ok(x.sigmoid().sum()), &Tensor::scalar(0.0), 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn doubled_backward_rule_is_flagged() {
    let err = gradient_check_with_fault(
        |x| Ok(x.sigmoid().sum()),
        &Tensor::scalar(0.0),
        1e-5,
        Some(Fault::DoubleSigmoidGrad),
    )
    .unwrap();
    assert!((err - 1.0 / 3.0).abs() < 1e-6, "{err}");
}

#[test]
fn gradient_check_rejects_non_positive_epsilon() {
    let r = gradient_check(|x| Ok(x.sum()), &Tensor::scalar(0.0), 0.0);
    assert!(matches!(r, Err(Error::Contract(_))));
}

fn small_matrix(max: usize, mag: f64) -> impl Strategy<Value = Tensor> {
    (1..=max, 1..=max).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-mag..mag, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_rows_are_distributions(x in small_matrix(6, 1e3)) {
        let tape = Tape::new();
        let s = tape.leaf(x).softmax().unwrap().value();
        prop_assert!(s.all_finite());
        let n = s.shape()[1];
        for row in s.data().chunks_exact(n) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn ops_stay_finite_on_large_inputs(x in small_matrix(5, 1e3)) {
        let tape = Tape::new();
        let a = tape.leaf(x);
        let y = a.sigmoid().add(a.tanh()).unwrap().add(a.softmax().unwrap()).unwrap();
        let n = a.shape()[1];
        let targets = vec![n - 1; a.shape()[0]];
        let ce = a.cross_entropy(&targets, &vec![1.0; targets.len()]).unwrap();
        let total = y.sum().add(ce).unwrap();
        prop_assert!(total.item().is_finite());
        let g = tape.backward(total).unwrap();
        prop_assert!(g.wrt(a).all_finite());
    }
}

type Case = fn(Var<'_>) -> gatemem::Result<Var<'_>>;

/// Differentiable ops expressed as scalar functions of one input, each mixed
/// with a fixed constant so that every operand carries a gradient.
fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("sigmoid", |x| Ok(x.sigmoid().sum())),
        ("tanh", |x| Ok(x.tanh().sum())),
        ("exp", |x| Ok(x.scale(0.5).exp().sum())),
        ("softmax", |x| {
            let w = x.tape().leaf(weights_like(x));
            Ok(x.softmax()?.mul(w)?.sum())
        }),
        ("matmul", |x| {
            let cols = x.shape()[1];
            let w = x.tape().leaf(
                Tensor::matrix(
                    cols,
                    2,
                    (0..cols * 2).map(|i| 0.3 * i as f64 - 0.7).collect(),
                )
                .unwrap(),
            );
            Ok(x.matmul(w)?.tanh().sum())
        }),
        ("gram", |x| {
            let t = x.tape().leaf(weights_like(x));
            Ok(x.mul(t)?.mul(x)?.sum())
        }),
        ("cross_entropy", |x| {
            let rows = x.shape()[0];
            let targets: Vec<usize> = (0..rows).map(|r| r % x.shape()[1]).collect();
            x.cross_entropy(&targets, &vec![1.0 / rows as f64; rows])
        }),
    ]
}

fn weights_like(x: Var<'_>) -> Tensor {
    let shape = x.shape();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_passes_gradient_check(x in small_matrix(4, 2.0)) {
        for (name, f) in op_cases() {
            let err = gradient_check(f, &x, 1e-5).unwrap();
            prop_assert!(err < 1e-4, "{} relative error {}", name, err);
        }
    }
}
