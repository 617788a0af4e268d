use super::*;
use crate::error::Error;
use crate::rng;
use rand::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "autodiff-test", 0);
    (0..n).map(|_| r.gen_range(-1.5..1.5)).collect()
}

#[test]
fn elementwise_values() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2], &[3.0, 4.0]));
    let s = tape.add(a, b).unwrap();
    assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
    let c = tape.constant(t(&[2], &[5.0, 5.0]));
    let d = tape.sub(c, c).unwrap();
    assert_eq!(tape.value(d).data(), &[0.0, 0.0]);
    let bad = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(a, bad), Err(Error::Shape(_))));
}

#[test]
fn scalar_broadcast() {
    let mut tape = Tape::new();
    let a = tape.var(t(&[3], &[1.0, 2.0, 3.0]));
    let k = tape.var(Tensor::scalar(2.0));
    let p = tape.mul(a, k).unwrap();
    assert_eq!(tape.value(p).data(), &[2.0, 4.0, 6.0]);
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(&tape, k).data(), &[6.0]);
    assert_eq!(g.get(&tape, a).data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn grad_of_sum_of_product() {
    let mut tape = Tape::new();
    let a = tape.var(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2], &[3.0, 4.0]));
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(&tape, a).data(), &[3.0, 4.0]);

    let report = finite_diff_check(
        |tape, x| {
            let b = tape.constant(t(&[2], &[3.0, 4.0]));
            let p = tape.mul(x, b)?;
            Ok(tape.sum(p))
        },
        &[1.0, 2.0],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn matmul_values() {
    let mut tape = Tape::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let q = tape.matmul(row, col).unwrap();
    assert_eq!(tape.value(q).shape(), &[1, 1]);
    assert_eq!(tape.value(q).data(), &[11.0]);
    assert!(matches!(tape.matmul(row, row), Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient_against_finite_differences() {
    let pdata = random(3, 12);
    let theta = random(4, 4);
    let report = finite_diff_check(
        |tape, x| {
            let p = tape.constant(t(&[3, 4], &pdata));
            let y = tape.matmul(p, x)?;
            Ok(tape.sum(y))
        },
        &theta,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    // and with the matrix itself as the variable
    let b = random(5, 8);
    let report = finite_diff_check(
        |tape, x| {
            let a = tape.reshape(x, &[3, 4])?;
            let b = tape.constant(t(&[4, 2], &b));
            let y = tape.matmul(a, b)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        },
        &pdata,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn conv_scalar_case() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 1], &[5.0]));
    let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
    let b = tape.constant(t(&[1], &[1.0]));
    let y = tape.conv2d(x, k, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[11.0]);
}

#[test]
fn conv_all_ones_same_padding() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 3, 3], &[1.0; 9]));
    let k = tape.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
    let y = tape.conv2d(x, k, None).unwrap();
    // Count of in-bounds neighbours at each position.
    assert_eq!(
        tape.value(y).data(),
        &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
    );
}

#[test]
fn conv_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(tape.conv2d(x, k, None), Err(Error::Shape(_))));
    let even = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(tape.conv2d(x, even, None).is_err());
}

#[test]
fn conv_one_hot_center_kernel_is_identity() {
    let image = random(11, 3 * 5 * 6);
    for channel in 0..3 {
        let mut kernel = vec![0.0; 3 * 9];
        kernel[channel * 9 + 4] = 1.0;
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 5, 6], &image));
        let k = tape.constant(t(&[1, 3, 3, 3], &kernel));
        let y = tape.conv2d(x, k, None).unwrap();
        assert_eq!(tape.value(y).data(), &image[channel * 30..(channel + 1) * 30]);
    }
}

#[test]
fn conv_kernel_gradient_against_finite_differences() {
    let input = random(21, 16);
    let weights = random(22, 2 * 16);
    let kernel = random(23, 2 * 9);
    let report = finite_diff_check(
        |tape, x| {
            let inp = tape.constant(t(&[1, 4, 4], &input));
            let k = tape.reshape(x, &[2, 1, 3, 3])?;
            let y = tape.conv2d(inp, k, None)?;
            let w = tape.constant(t(&[2, 4, 4], &weights));
            let p = tape.mul(y, w)?;
            Ok(tape.sum(p))
        },
        &kernel,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn conv_input_and_bias_gradients() {
    // batched input, 2 -> 3 channels, 5x5 kernel
    let kernel = random(31, 3 * 2 * 25);
    let weights = random(32, 2 * 3 * 6 * 5);
    let input = random(33, 2 * 2 * 6 * 5);
    let mut theta = input.clone();
    theta.extend(random(34, 3));
    let report = finite_diff_check(
        |tape, x| {
            let inp = tape.slice(x, 0, 120)?;
            let inp = tape.reshape(inp, &[2, 2, 6, 5])?;
            let b = tape.slice(x, 120, 3)?;
            let k = tape.constant(t(&[3, 2, 5, 5], &kernel));
            let y = tape.conv2d(inp, k, Some(b))?;
            let w = tape.constant(t(&[2, 3, 6, 5], &weights));
            let p = tape.mul(y, w)?;
            let s = tape.tanh(p);
            Ok(tape.sum(s))
        },
        &theta,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn activations() {
    let mut tape = Tape::new();
    let x = tape.var(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(r);
    let g = tape.backward(s).unwrap();
    // relu'(0) is defined as 0
    assert_eq!(g.get(&tape, x).data(), &[0.0, 0.0, 1.0]);

    let z = tape.var(Tensor::scalar(0.0));
    let sg = tape.sigmoid(z);
    assert_eq!(tape.scalar(sg), 0.5);
    let th = tape.tanh(z);
    let g = tape.backward(th).unwrap();
    assert_eq!(g.get(&tape, z).data(), &[1.0]);

    let report = finite_diff_check(
        |tape, x| {
            let y = tape.tanh(x);
            Ok(tape.sum(y))
        },
        &[0.0],
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(report.passed);
}

#[test]
fn mse_values_and_gradient() {
    let mut tape = Tape::new();
    let p = tape.var(t(&[2], &[0.0, 0.0]));
    let q = tape.constant(t(&[2], &[3.0, 4.0]));
    let m = tape.mse(p, q).unwrap();
    assert_eq!(tape.scalar(m), 12.5);
    let g = tape.backward(m).unwrap();
    assert_eq!(g.get(&tape, p).data(), &[-3.0, -4.0]);
    let same = tape.mse(q, q).unwrap();
    assert_eq!(tape.scalar(same), 0.0);
    let bad = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.mse(p, bad).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    let g = tape.backward(sq).unwrap();
    assert_eq!(g.get(&tape, x).data(), &[6.0]);

    // constant loss has zero gradient for every variable
    let c = tape.constant(Tensor::scalar(2.0));
    let k = tape.scale(c, 4.0);
    let g = tape.backward(k).unwrap();
    assert_eq!(g.get(&tape, x).data(), &[0.0]);

    let v = tape.var(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn least_squares_gradient_closed_form() {
    let n = 4;
    let p = random(41, n * n);
    let y = random(42, n);
    let theta = random(43, n);
    let mut tape = Tape::new();
    let x = tape.var(Tensor::vector(theta.clone()));
    let pm = tape.constant(t(&[n, n], &p));
    let yv = tape.constant(Tensor::vector(y.clone()));
    let px = tape.matmul(pm, x).unwrap();
    let r = tape.sub(px, yv).unwrap();
    let rr = tape.mul(r, r).unwrap();
    let loss = tape.sum(rr);
    let g = tape.backward(loss).unwrap().get(&tape, x);

    let resid: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| p[i * n + j] * theta[j]).sum::<f64>() - y[i])
        .collect();
    for j in 0..n {
        let want: f64 = 2.0 * (0..n).map(|i| p[i * n + j] * resid[i]).sum::<f64>();
        assert!((g.data()[j] - want).abs() < 1e-12);
    }
}

#[test]
fn backward_is_linear() {
    let theta = random(51, 6);
    let (a, b) = (0.7, -1.9);
    let grad_of = |wa: f64, wb: f64| {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(theta.clone()));
        let s = tape.sigmoid(x);
        let l1 = tape.sum(s);
        let sq = tape.mul(x, x).unwrap();
        let l2 = tape.mean(sq);
        let l1 = tape.scale(l1, wa);
        let l2 = tape.scale(l2, wb);
        let l = tape.add(l1, l2).unwrap();
        tape.backward(l).unwrap().get(&tape, x).into_data()
    };
    let combined = grad_of(a, b);
    let g1 = grad_of(1.0, 0.0);
    let g2 = grad_of(0.0, 1.0);
    for i in 0..theta.len() {
        assert!((combined[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
    }
}

#[test]
fn replay_is_bitwise_deterministic() {
    let theta = random(61, 2 * 9);
    let input = random(62, 2 * 25);
    let run = || {
        let mut tape = Tape::new();
        let x = tape.var(t(&[1, 2, 3, 3], &theta));
        let inp = tape.constant(t(&[2, 5, 5], &input));
        let y = tape.conv2d(inp, x, None).unwrap();
        let y = tape.relu(y);
        let z = tape.constant(Tensor::zeros(&[1, 5, 5]));
        let l = tape.mse(y, z).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.scalar(l).to_bits(), g.get(&tape, x).into_data())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn tape_is_reusable_after_clear() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::scalar(2.0));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    tape.backward(y).unwrap();
    tape.clear();
    assert!(tape.is_empty());
    let x = tape.var(Tensor::scalar(5.0));
    let y = tape.mul(x, x).unwrap();
    assert_eq!(tape.backward(y).unwrap().get(&tape, x).data(), &[10.0]);
}

#[test]
fn columns_and_slices_route_gradients() {
    let theta = random(71, 12);
    let report = finite_diff_check(
        |tape, x| {
            let m = tape.reshape(x, &[3, 4])?;
            let c = tape.columns(m, 1, 2)?;
            let s = tape.slice(x, 5, 4)?;
            let c = tape.sigmoid(c);
            let s = tape.tanh(s);
            let a = tape.sum(c);
            let b = tape.sum(s);
            let ab = tape.mul(a, b)?;
            Ok(ab)
        },
        &theta,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn batch_norm_gradients() {
    let theta = random(81, 4 * 3 * 2 + 6);
    let weights = random(82, 4 * 3 * 2);
    let report = finite_diff_check(
        |tape, x| {
            let xs = tape.slice(x, 0, 24)?;
            let xs = tape.reshape(xs, &[4, 3, 2])?;
            let g = tape.slice(x, 24, 3)?;
            let b = tape.slice(x, 27, 3)?;
            let (y, _) = tape.batch_norm(xs, g, b, 1e-5)?;
            let w = tape.constant(t(&[4, 3, 2], &weights));
            let p = tape.mul(y, w)?;
            let p = tape.tanh(p);
            Ok(tape.sum(p))
        },
        &theta,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn batch_norm_needs_two_samples() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::zeros(&[1, 2, 3]));
    let g = tape.constant(Tensor::vector(vec![1.0, 1.0]));
    let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    assert!(matches!(
        tape.batch_norm(x, g, b, 1e-5),
        Err(Error::Contract(_))
    ));
}

#[test]
fn bce_values() {
    let mut tape = Tape::new();
    let p = tape.var(Tensor::vector(vec![0.5; 10]));
    let mut one_hot = vec![0.0; 10];
    one_hot[3] = 1.0;
    let y = tape.constant(Tensor::vector(one_hot.clone()));
    let l = tape.bce(p, y).unwrap();
    assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
    let exact = tape.constant(Tensor::vector(one_hot));
    let l = tape.bce(exact, y).unwrap();
    assert!(tape.scalar(l) <= 1e-6);
}

#[test]
fn every_op_passes_finite_differences_at_random_points() {
    type Case = Box<dyn Fn(&mut Tape, Var) -> crate::Result<Var>>;
    let cases: Vec<(&str, usize, Case)> = vec![
        (
            "add",
            6,
            Box::new(|tape, x| {
                let a = tape.slice(x, 0, 3)?;
                let b = tape.slice(x, 3, 3)?;
                let s = tape.add(a, b)?;
                let s = tape.mul(s, s)?;
                Ok(tape.sum(s))
            }),
        ),
        (
            "sub",
            6,
            Box::new(|tape, x| {
                let a = tape.slice(x, 0, 3)?;
                let b = tape.slice(x, 3, 3)?;
                let s = tape.sub(a, b)?;
                let s = tape.tanh(s);
                Ok(tape.sum(s))
            }),
        ),
        (
            "mul",
            6,
            Box::new(|tape, x| {
                let a = tape.slice(x, 0, 3)?;
                let b = tape.slice(x, 3, 3)?;
                let s = tape.mul(a, b)?;
                Ok(tape.sum(s))
            }),
        ),
        (
            "matmul",
            10,
            Box::new(|tape, x| {
                let a = tape.slice(x, 0, 6)?;
                let a = tape.reshape(a, &[3, 2])?;
                let b = tape.slice(x, 6, 4)?;
                let b = tape.reshape(b, &[2, 2])?;
                let y = tape.matmul(a, b)?;
                let y = tape.sigmoid(y);
                Ok(tape.sum(y))
            }),
        ),
        (
            "sigmoid",
            5,
            Box::new(|tape, x| {
                let y = tape.sigmoid(x);
                let y = tape.mul(y, x)?;
                Ok(tape.sum(y))
            }),
        ),
        (
            "tanh",
            5,
            Box::new(|tape, x| {
                let y = tape.tanh(x);
                let y = tape.mul(y, x)?;
                Ok(tape.sum(y))
            }),
        ),
        (
            "relu",
            5,
            Box::new(|tape, x| {
                let y = tape.relu(x);
                let y = tape.mul(y, x)?;
                Ok(tape.sum(y))
            }),
        ),
        (
            "mse",
            8,
            Box::new(|tape, x| {
                let a = tape.slice(x, 0, 4)?;
                let b = tape.slice(x, 4, 4)?;
                tape.mse(a, b)
            }),
        ),
        (
            "conv2d",
            2 * 9 + 2 + 2 * 16,
            Box::new(|tape, x| {
                let k = tape.slice(x, 0, 18)?;
                let k = tape.reshape(k, &[2, 1, 3, 3])?;
                let b = tape.slice(x, 18, 2)?;
                let inp = tape.slice(x, 20, 32)?;
                let inp = tape.reshape(inp, &[2, 1, 4, 4])?;
                let y = tape.conv2d(inp, k, Some(b))?;
                let y = tape.tanh(y);
                let y = tape.mul(y, y)?;
                Ok(tape.sum(y))
            }),
        ),
    ];
    for (name, n, f) in &cases {
        for point in 0..10 {
            let theta = random(1000 + point, *n);
            let report = finite_diff_check(f, &theta, 1e-5, 1e-4).unwrap();
            assert!(report.passed, "{name} at point {point}: {report:?}");
        }
    }
}
