use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::params::ParamList;

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<f64> {
    (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect()
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::param(random(rng, shape), shape).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sum(out ⊙ r)` with a fixed random `r`, so every output entry matters.
fn project(out: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::new(random(&mut rng, out.shape()), out.shape())?;
    Ok(out.mul(&r)?.sum())
}

fn assert_gradients(params: &mut ParamList, f: impl Fn(&ParamList) -> Result<Tensor>, tol: f64) {
    let reports =
        check_gradients(params, |p| project(&f(p)?, 99), GradCheckOptions::default()).unwrap();
    for r in reports {
        assert!(
            r.rel_error < tol,
            "{}: relative error {:e}",
            r.name,
            r.rel_error
        );
    }
}

// --- conv1d / conv_transpose1d ---

#[test]
fn conv1d_first_tap_kernel() {
    let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 4]);
    let w = t(&[1.0, 0.0], &[1, 1, 2]);
    let y = x.conv1d(&w, &t(&[0.0], &[1]), 1).unwrap();
    assert_eq!(y.shape(), &[1, 3]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn conv1d_strided_sum_kernel() {
    let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 4]);
    let w = t(&[1.0, 1.0], &[1, 1, 2]);
    let y = x.conv1d(&w, &t(&[0.0], &[1]), 2).unwrap();
    assert_eq!(y.data(), &[3.0, 7.0]);
}

#[test]
fn conv1d_output_length_for_two_seconds() {
    let x = Tensor::zeros(&[1, 16000]).unwrap();
    let w = Tensor::zeros(&[4, 1, 16]).unwrap();
    let y = x.conv1d(&w, &Tensor::zeros(&[4]).unwrap(), 8).unwrap();
    assert_eq!(y.shape(), &[4, 1999]);
}

#[test]
fn conv1d_rejects_short_input_and_bad_shapes() {
    let x = Tensor::zeros(&[1, 3]).unwrap();
    let w = Tensor::zeros(&[1, 1, 4]).unwrap();
    let b = Tensor::zeros(&[1]).unwrap();
    assert!(matches!(
        x.conv1d(&w, &b, 1),
        Err(Error::InputTooShort { len: 3, min: 4 })
    ));
    let w2 = Tensor::zeros(&[1, 2, 2]).unwrap();
    assert!(matches!(x.conv1d(&w2, &b, 1), Err(Error::Config(_))));
    assert!(matches!(
        x.conv1d(&Tensor::zeros(&[1, 1, 2]).unwrap(), &b, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn conv_transpose_single_frame_scatters_kernel() {
    let y = t(&[1.0], &[1, 1]);
    let w = t(&[2.0, 3.0], &[1, 1, 2]);
    assert_eq!(y.conv_transpose1d(&w, 1).unwrap().data(), &[2.0, 3.0]);
}

#[test]
fn conv_transpose_strided_scatter() {
    let y = t(&[1.0, 1.0], &[1, 2]);
    let w = t(&[1.0, 1.0], &[1, 1, 2]);
    let out = y.conv_transpose1d(&w, 2).unwrap();
    assert_eq!(out.shape(), &[1, 4]);
    assert_eq!(out.data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn conv_transpose_length_matches_two_seconds() {
    let y = Tensor::zeros(&[4, 1999]).unwrap();
    let w = Tensor::zeros(&[4, 1, 16]).unwrap();
    assert_eq!(y.conv_transpose1d(&w, 8).unwrap().shape(), &[1, 16000]);
}

#[test]
fn conv_pair_satisfies_dot_product_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (c_in, f, k, stride, len) in [
        (1, 3, 4, 2, 11),
        (2, 2, 3, 1, 7),
        (1, 4, 16, 8, 70),
        (3, 2, 2, 3, 9),
    ] {
        let x = random(&mut rng, &[c_in, len]);
        let w = random(&mut rng, &[f, c_in, k]);
        let xt = t(&x, &[c_in, len]);
        let wt = t(&w, &[f, c_in, k]);
        let conv = xt
            .conv1d(&wt, &Tensor::zeros(&[f]).unwrap(), stride)
            .unwrap();
        let y = random(&mut rng, conv.shape());
        let back = t(&y, conv.shape()).conv_transpose1d(&wt, stride).unwrap();
        let t_back = back.shape()[1];
        // samples past the last window never reach conv1d
        let lhs = dot(conv.data(), &y);
        let rhs: f64 = (0..c_in)
            .map(|c| {
                dot(
                    &x[c * len..c * len + t_back],
                    &back.data()[c * t_back..(c + 1) * t_back],
                )
            })
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

// --- layer norm, softmax, prelu, permute ---

#[test]
fn layer_norm_examples() {
    let one = t(&[1.0], &[1]);
    let zero = t(&[0.0], &[1]);
    let flat = t(&[1.0, 1.0, 1.0], &[3]);
    let out = flat
        .layer_norm(&t(&[1.0; 3], &[3]), &t(&[0.0; 3], &[3]), 1e-8)
        .unwrap();
    assert_close(out.data(), &[0.0, 0.0, 0.0], 0.0);

    let pair = t(&[0.0, 2.0], &[2]);
    let out = pair
        .layer_norm(&t(&[1.0, 1.0], &[2]), &t(&[0.0, 0.0], &[2]), 1e-14)
        .unwrap();
    assert_close(out.data(), &[-1.0, 1.0], 1e-12);

    let single = t(&[3.0], &[1]);
    let out = single.layer_norm(&one, &t(&[5.0], &[1]), 1e-8).unwrap();
    assert_eq!(out.data(), &[5.0]);
    assert!(single.layer_norm(&one, &zero, 0.0).is_err());
    assert!(pair.layer_norm(&one, &zero, 1e-8).is_err());
}

#[test]
fn softmax_and_prelu_examples() {
    let s = t(&[0.0, 0.0], &[2]).softmax();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let p = t(&[-2.0, 3.0], &[2])
        .prelu(&t(&[0.25, 0.25], &[2]))
        .unwrap();
    assert_eq!(p.data(), &[-0.5, 3.0]);
    assert!(t(&[1.0, 2.0], &[2]).prelu(&t(&[0.25], &[1])).is_err());
}

#[test]
fn permute_then_back_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = t(&random(&mut rng, &[3, 4, 5]), &[3, 4, 5]);
    let y = x.permute(&[0, 2, 1]).unwrap();
    assert_eq!(y.shape(), &[3, 5, 4]);
    let z = y.permute(&[0, 2, 1]).unwrap();
    assert_eq!(z.shape(), x.shape());
    assert_eq!(z.data(), x.data());
    assert!(x.permute(&[0, 0, 1]).is_err());
    assert!(x.permute(&[0, 1]).is_err());
}

#[test]
fn shape_errors_are_configuration_errors() {
    let a = Tensor::zeros(&[2, 3]).unwrap();
    let b = Tensor::zeros(&[3, 2]).unwrap();
    assert!(matches!(a.mul(&b), Err(Error::Config(_))));
    assert!(matches!(a.add(&b), Err(Error::Config(_))));
    assert!(matches!(
        a.linear(&b.transpose().unwrap(), None),
        Err(Error::Config(_))
    ));
    assert!(matches!(a.matmul(&a, false), Err(Error::Config(_))));
    assert!(matches!(a.reshape(&[4]), Err(Error::Config(_))));
    assert!(matches!(a.slice(1, 2, 2), Err(Error::Config(_))));
    assert!(matches!(
        Tensor::concat(&[a.clone(), b], 0),
        Err(Error::Config(_))
    ));
    assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
    assert!(Tensor::new(vec![], &[0]).is_err());
}

#[test]
fn concat_and_slice_agree() {
    let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let b = t(&[5.0, 6.0], &[2, 1]);
    let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
    assert_eq!(c.shape(), &[2, 3]);
    assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    assert_eq!(c.slice(1, 0, 2).unwrap().data(), a.data());
    assert_eq!(c.slice(1, 2, 1).unwrap().data(), b.data());
}

#[test]
fn add_broadcasts_over_leading_axes() {
    let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let b = t(&[10.0, 20.0], &[2]);
    assert_eq!(a.add(&b).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
}

#[test]
fn frames_then_overlap_add_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = t(&random(&mut rng, &[9, 2]), &[9, 2]);
    // hop 2, frame 4: 9 rows need 5 frames to cover with padding
    let f = x.frames(4, 2, 5).unwrap();
    assert_eq!(f.shape(), &[5, 4, 2]);
    let back = f.overlap_add(2, 9).unwrap();
    assert_eq!(back.data(), x.data());
}

// --- backward ---

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::param(vec![0.3, -1.0, 2.0, 5.0, 1.0, 0.0], &[2, 3]).unwrap();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().as_deref(), Some(&[1.0; 6][..]));
}

#[test]
fn backward_of_relu_uses_subgradient() {
    let x = Tensor::param(vec![-1.0, 2.0], &[2]).unwrap();
    x.relu().sum().backward().unwrap();
    assert_eq!(x.grad().as_deref(), Some(&[0.0, 1.0][..]));
}

#[test]
fn backward_requires_scalar() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(x.relu().backward(), Err(Error::Usage(_))));
}

#[test]
fn backward_accumulates_over_shared_subexpressions() {
    // loss = sum(x * x) + sum(x): dx = 2x + 1
    let x = Tensor::param(vec![1.0, -2.0, 0.5], &[3]).unwrap();
    let loss = x.mul(&x).unwrap().sum().add(&x.sum()).unwrap();
    loss.backward().unwrap();
    assert_close(x.grad().as_deref().unwrap(), &[3.0, -3.0, 2.0], 1e-15);
}

#[test]
fn no_grad_records_nothing() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let y = no_grad(|| x.scale(2.0).sum());
    assert!(!y.requires_grad());
    assert!(is_grad_enabled());
    y.backward().unwrap();
    assert!(x.grad().is_none());
}

#[test]
fn data_mut_needs_exclusive_leaf() {
    let mut x = Tensor::param(vec![1.0], &[1]).unwrap();
    let y = x.scale(3.0);
    assert!(x.data_mut().is_err());
    drop(y);
    x.data_mut().unwrap()[0] = 4.0;
    assert_eq!(x.data(), &[4.0]);
}

// --- finite-difference checks, one per op ---

const OP_TOL: f64 = 1e-4;

#[test]
fn gradcheck_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut p = ParamList::default();
    p.push("a", param(&mut rng, &[2, 3]));
    p.push("b", param(&mut rng, &[2, 3]));
    p.push("bias", param(&mut rng, &[3]));
    p.push("alpha", param(&mut rng, &[3]));
    assert_gradients(
        &mut p,
        |p| {
            let (a, b) = (p.get("a").unwrap(), p.get("b").unwrap());
            a.add(b)?
                .mul(b)?
                .add(p.get("bias").unwrap())?
                .scale(0.7)
                .prelu(p.get("alpha").unwrap())
        },
        OP_TOL,
    );
    assert_gradients(&mut p, |p| Ok(p.get("a").unwrap().relu()), OP_TOL);
    assert_gradients(&mut p, |p| Ok(p.get("b").unwrap().softmax()), OP_TOL);
}

#[test]
fn gradcheck_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = ParamList::default();
    p.push("x", param(&mut rng, &[2, 4]));
    p.push("gain", param(&mut rng, &[4]));
    p.push("bias", param(&mut rng, &[4]));
    assert_gradients(
        &mut p,
        |p| {
            p.get("x")
                .unwrap()
                .layer_norm(p.get("gain").unwrap(), p.get("bias").unwrap(), 1e-5)
        },
        OP_TOL,
    );
}

#[test]
fn gradcheck_linear_and_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = ParamList::default();
    p.push("x", param(&mut rng, &[3, 2]));
    p.push("w", param(&mut rng, &[2, 3]));
    p.push("b", param(&mut rng, &[3]));
    p.push("m", param(&mut rng, &[2, 2, 3]));
    p.push("n", param(&mut rng, &[2, 3, 2]));
    p.push("o", param(&mut rng, &[2, 4, 3]));
    assert_gradients(
        &mut p,
        |p| {
            p.get("x")
                .unwrap()
                .linear(p.get("w").unwrap(), Some(p.get("b").unwrap()))
        },
        OP_TOL,
    );
    assert_gradients(
        &mut p,
        |p| p.get("m").unwrap().matmul(p.get("n").unwrap(), false),
        OP_TOL,
    );
    assert_gradients(
        &mut p,
        |p| p.get("m").unwrap().matmul(p.get("o").unwrap(), true),
        OP_TOL,
    );
}

#[test]
fn gradcheck_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut p = ParamList::default();
    p.push("x", param(&mut rng, &[2, 3, 2]));
    p.push("y", param(&mut rng, &[2, 1, 2]));
    assert_gradients(&mut p, |p| p.get("x").unwrap().permute(&[2, 0, 1]), OP_TOL);
    assert_gradients(&mut p, |p| p.get("x").unwrap().reshape(&[6, 2]), OP_TOL);
    assert_gradients(
        &mut p,
        |p| {
            Tensor::concat(
                &[p.get("x").unwrap().clone(), p.get("y").unwrap().clone()],
                1,
            )
        },
        OP_TOL,
    );
    assert_gradients(&mut p, |p| p.get("x").unwrap().slice(1, 1, 2), OP_TOL);
    assert_gradients(&mut p, |p| Ok(p.get("x").unwrap().sum()), OP_TOL);
}

#[test]
fn gradcheck_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut p = ParamList::default();
    p.push("x", param(&mut rng, &[2, 9]));
    p.push("w", param(&mut rng, &[3, 2, 3]));
    p.push("b", param(&mut rng, &[3]));
    p.push("y", param(&mut rng, &[3, 4]));
    assert_gradients(
        &mut p,
        |p| {
            p.get("x")
                .unwrap()
                .conv1d(p.get("w").unwrap(), p.get("b").unwrap(), 2)
        },
        OP_TOL,
    );
    p.push("wt", param(&mut rng, &[3, 2, 3]));
    assert_gradients(
        &mut p,
        |p| {
            p.get("y")
                .unwrap()
                .conv_transpose1d(p.get("wt").unwrap(), 2)
        },
        OP_TOL,
    );
}

#[test]
fn gradcheck_framing() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut p = ParamList::default();
    p.push("x", param(&mut rng, &[7, 2]));
    p.push("f", param(&mut rng, &[4, 4, 2]));
    assert_gradients(&mut p, |p| p.get("x").unwrap().frames(4, 2, 4), OP_TOL);
    assert_gradients(&mut p, |p| p.get("f").unwrap().overlap_add(2, 7), OP_TOL);
}

#[test]
fn gradcheck_composite_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut p = ParamList::default();
    p.push("x", param(&mut rng, &[4, 3]));
    p.push("w", param(&mut rng, &[3, 3]));
    p.push("g", param(&mut rng, &[3]));
    p.push("b", param(&mut rng, &[3]));
    assert_gradients(
        &mut p,
        |p| {
            let x = p.get("x").unwrap();
            let h = x.layer_norm(p.get("g").unwrap(), p.get("b").unwrap(), 1e-5)?;
            let h = h.linear(p.get("w").unwrap(), None)?.relu();
            let scores = h
                .matmul(&h.transpose()?.reshape(&[3, 4])?, false)?
                .softmax();
            scores.matmul(x, false)?.add(x)
        },
        OP_TOL,
    );
}

#[test]
fn custom_op_routes_gradients() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let y = custom_op(
        &[&x],
        vec![5.0],
        &[1],
        Box::new(|g| vec![vec![g[0] * 2.0, g[0] * 3.0]]),
    )
    .unwrap();
    y.scale(2.0).backward().unwrap();
    assert_eq!(x.grad().as_deref(), Some(&[4.0, 6.0][..]));
}

// --- properties ---

fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (1usize..4, 1usize..6).prop_flat_map(|(rows, cols)| {
        (
            Just(vec![rows, cols]),
            prop::collection::vec(-50.0f64..50.0, rows * cols),
        )
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((shape, data) in shape_and_data()) {
        let s = t(&data, &shape).softmax();
        for row in s.data().chunks_exact(shape[1]) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_centers_each_position((shape, data) in shape_and_data()) {
        let d = shape[1];
        let x = t(&data, &shape);
        let out = x.layer_norm(&t(&vec![1.0; d], &[d]), &t(&vec![0.0; d], &[d]), 1e-5).unwrap();
        for row in out.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn linear_ops_are_their_adjoints(seed in 0u64..1000) {
        // For linear L: grad of <L(x), y> w.r.t. x is Lᵀy, so <L(x), y> == <x, Lᵀy>.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t(&random(&mut rng, &[2, 3, 3]), &[2, 3, 3]);
        let cases: Vec<(Vec<usize>, Box<dyn Fn(&Tensor) -> Tensor>)> = vec![
            (vec![3, 10], Box::new(move |x| x.conv1d(&w, &Tensor::zeros(&[2]).unwrap(), 2).unwrap())),
            (vec![2, 3, 4], Box::new(|x| x.permute(&[1, 2, 0]).unwrap())),
            (vec![7, 2], Box::new(|x| x.frames(4, 2, 4).unwrap())),
            (vec![4, 4, 2], Box::new(|x| x.overlap_add(2, 8).unwrap())),
            (vec![3, 4], Box::new(|x| x.slice(1, 1, 2).unwrap())),
        ];
        for (shape, op) in cases {
            let xv = random(&mut rng, &shape);
            let x = Tensor::param(xv.clone(), &shape).unwrap();
            let out = op(&x);
            let yv = random(&mut rng, out.shape());
            let lhs = dot(out.data(), &yv);
            out.mul(&t(&yv, out.shape())).unwrap().sum().backward().unwrap();
            let rhs = dot(&xv, x.grad().as_deref().unwrap());
            prop_assert!((lhs - rhs).abs() < 1e-10, "{} vs {}", lhs, rhs);
        }
    }
}
