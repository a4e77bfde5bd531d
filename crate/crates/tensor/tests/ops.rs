use proptest::prelude::*;
use wsl_tensor::fd::{central_gradient, contraction_weights, gradcheck, max_relative_error, op_cases, CheckRng};
use wsl_tensor::{Tape, Tensor, TensorError};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

/// Direct nested-loop cross-correlation, no im2col.
fn conv_oracle(x: &[f64], c: usize, h: usize, w: &[f64], o: usize, k: usize, b: &[f64]) -> Vec<f64> {
    let oh = h - k + 1;
    let mut out = vec![0.0; o * oh * oh];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..oh {
                let mut acc = b[oc];
                for ch in 0..c {
                    for di in 0..k {
                        for dj in 0..k {
                            acc += x[(ch * h + i + di) * h + j + dj] * w[((oc * c + ch) * k + di) * k + dj];
                        }
                    }
                }
                out[(oc * oh + i) * oh + j] = acc;
            }
        }
    }
    out
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let y = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(y), &[1., 2., 3., 4.]);
}

#[test]
fn relu_definition() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1., 0., 2.]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y), &[0., 0., 2.]);
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut r = CheckRng::new(3);
    let x = r.tensor(&[1, 2, 5, 5], -1.0, 1.0);
    let w = r.tensor(&[3, 2, 3, 3], -1.0, 1.0);
    let b = r.tensor(&[3], -1.0, 1.0);
    let expected = conv_oracle(x.data(), 2, 5, w.data(), 3, 3, b.data());
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.conv2d(xv, wv, Some(bv), 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 3, 3]);
    for (a, e) in tape.value(y).iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv2d_rejects_zero_stride() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(tape.conv2d(x, w, None, 0, 0), Err(TensorError::Config { .. })));
}

#[test]
fn shape_mismatch_is_descriptive() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(matches!(err, TensorError::Shape { op: "matmul", .. }), "{err}");
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[1., 2., 3.]).with_grad());
    let sq = tape.square(x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2., 4., 6.]);
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2, 2], &[0.5, -1.0, 2.0, 0.3]).with_grad());
    let w = tape.leaf(&t(&[2, 2], &[1.0, 2.0, -0.5, 0.1]).with_grad());
    let y = tape.matmul(x, w).unwrap();
    let y = tape.softmax(y).unwrap();
    let y = tape.log(y);
    let loss = tape.mean(y);
    tape.backward(loss).unwrap();
    let once: Vec<f64> = tape.grad(w).unwrap().to_vec();
    tape.backward(loss).unwrap();
    for (a, b) in tape.grad(w).unwrap().iter().zip(&once) {
        assert_eq!(*a, 2.0 * b);
    }
    tape.zero_grad();
    assert!(tape.grad(w).is_none());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1., 2.]).with_grad());
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
}

#[test]
fn maxpool_routes_gradient_to_first_maximum() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[1, 1, 2, 2], &[3., 3., 1., 0.]).with_grad());
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1., 0., 0., 0.]);
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    let mut r = CheckRng::new(11);
    let x = r.tensor(&[2, 3, 6, 6], -1.0, 1.0);
    let w = contraction_weights(11, 64);
    let err = gradcheck(|tape, v| tape.maxpool2d(v[0], 2, 2), &[x], &w, 1e-5).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn every_op_passes_gradcheck_over_many_seeds() {
    let mut count = 0;
    for seed in 0..4 {
        for case in op_cases(seed) {
            let w = contraction_weights(seed, 97);
            let err = gradcheck(&case.build, &case.inputs, &w, 1e-5).unwrap();
            assert!(err < 1e-4, "op {} seed {seed}: rel err {err}", case.op);
            count += 1;
        }
    }
    assert!(count >= 100);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = CheckRng::new(5);
        let mut tape = Tape::new();
        let x = tape.constant(r.tensor(&[2, 3, 7, 7], -1.0, 1.0));
        let w = tape.constant(r.tensor(&[4, 3, 3, 3], -1.0, 1.0));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let y = tape.maxpool2d(y, 2, 2).unwrap();
        tape.value(y).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn f32_conv_matches_f64_oracle() {
    let mut r = CheckRng::new(9);
    let x = r.tensor(&[1, 1, 5, 5], -1.0, 1.0);
    let w = r.tensor(&[2, 1, 3, 3], -1.0, 1.0);
    let expected = conv_oracle(x.data(), 1, 5, w.data(), 2, 3, &[0.0, 0.0]);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.cast());
    let wv = tape.constant(w.cast());
    let y = tape.conv2d(xv, wv, None, 1, 0).unwrap();
    for (a, e) in tape.value(y).iter().zip(&expected) {
        assert!((*a as f64 - e).abs() < 1e-6);
    }
}

#[test]
fn central_gradient_of_quadratic() {
    let g = central_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, -2.0], 1e-5);
    assert!(max_relative_error(&g, &[2.0, -4.0], 1e-6) < 1e-8);
}

proptest! {
    #[test]
    fn permute_then_inverse_is_identity(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let mut r = CheckRng::new(seed);
        let x = r.tensor(&[a, b, c], -1.0, 1.0);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = tape.permute(v, &[2, 0, 1]).unwrap();
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(tape.value(back), x.data());
    }

    #[test]
    fn slices_concat_back(a in 1usize..4, b in 2usize..6, cut in 1usize..5, seed in 0u64..1000) {
        let cut = cut.min(b - 1);
        let mut r = CheckRng::new(seed);
        let x = r.tensor(&[a, b], -1.0, 1.0);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let l = tape.slice(v, 1, 0, cut).unwrap();
        let rr = tape.slice(v, 1, cut, b - cut).unwrap();
        let joined = tape.concat(&[l, rr], 1).unwrap();
        prop_assert_eq!(tape.value(joined), x.data());
    }
}
