//! Finite-difference sweep over every differentiable building block.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{finite_diff_check_coords, ActivationKind, BinaryKind, Tape, Tensor, Var};
use crate::denoiser::{noisy_batch, DnCnn, DnCnnSpec, SigmaMode};
use crate::error::Result;
use crate::image::Image;
use crate::nn::{
    batchnorm_forward, bind_params, dense_forward, lstm_cell, BatchNormState, BnMode, LayerSpec,
    LstmVars, ModelSpec,
};
use crate::rng;

pub const GRADCHECK_STEP: f64 = 1e-6;
/// Coordinates sampled per point for the DnCNN case.
pub const DNCNN_COORDS: usize = 20;

/// Aggregate of one operation's checks over several random points.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const SUITE_OPS: [&str; 15] = [
    "add", "sub", "mul", "matmul", "conv2d", "relu", "sigmoid", "tanh", "mse", "bce", "dense",
    "batchnorm", "lstm_cell", "dncnn_depth5", "scale_sum",
];

/// Runs every entry of [`SUITE_OPS`] at `points` random points.
pub fn gradient_suite(seed: u64, points: usize, tol: f64) -> Result<Vec<OpCheck>> {
    SUITE_OPS
        .iter()
        .map(|name| check_op(name, seed, points, tol))
        .collect()
}

/// Checks one named operation; unknown names are a contract error.
pub fn check_op(name: &'static str, seed: u64, points: usize, tol: f64) -> Result<OpCheck> {
    let mut worst = 0.0f64;
    let mut passed = true;
    for p in 0..points as u64 {
        let mut r = rng::stream(seed, name, p);
        let report = match name {
            "dncnn_depth5" => dncnn_point(&mut r, tol)?,
            _ => {
                let case = small_case(name, &mut r)?;
                let coords: Vec<usize> = (0..case.theta.len()).collect();
                finite_diff_check_coords(case.loss, &case.theta, &coords, GRADCHECK_STEP, tol)?
            }
        };
        worst = worst.max(report.max_rel_error);
        passed &= report.passed;
    }
    Ok(OpCheck {
        name,
        points,
        max_rel_error: worst,
        passed,
    })
}

type LossFn = Box<dyn FnMut(&mut Tape, Var) -> Result<Var>>;

struct Case {
    theta: Vec<f64>,
    loss: LossFn,
}

fn normal(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

/// `sum(x ⊙ w)` with fixed random weights so every output entry matters.
fn weighted_sum(tape: &mut Tape, x: Var, w: &[f64]) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = tape.constant(Tensor::new(&shape, w.to_vec())?);
    let p = tape.mul(x, c)?;
    Ok(tape.sum(p))
}

fn piece(tape: &mut Tape, theta: Var, start: usize, shape: &[usize]) -> Result<Var> {
    let len = shape.iter().product();
    let flat = tape.slice(theta, start, len)?;
    tape.reshape(flat, shape)
}

fn small_case(name: &'static str, r: &mut impl Rng) -> Result<Case> {
    let case = match name {
        "add" | "sub" | "mul" => {
            let kind = match name {
                "add" => BinaryKind::Add,
                "sub" => BinaryKind::Sub,
                _ => BinaryKind::Mul,
            };
            let w = normal(r, 6);
            Case {
                theta: normal(r, 12),
                loss: Box::new(move |t, v| {
                    let a = piece(t, v, 0, &[2, 3])?;
                    let b = piece(t, v, 6, &[2, 3])?;
                    let y = t.elementwise(a, b, kind)?;
                    weighted_sum(t, y, &w)
                }),
            }
        }
        "matmul" => {
            let w = normal(r, 6);
            Case {
                theta: normal(r, 12 + 8),
                loss: Box::new(move |t, v| {
                    let a = piece(t, v, 0, &[3, 4])?;
                    let b = piece(t, v, 12, &[4, 2])?;
                    let y = t.matmul(a, b)?;
                    weighted_sum(t, y, &w)
                }),
            }
        }
        "conv2d" => {
            let w = normal(r, 2 * 3 * 5 * 5);
            Case {
                theta: normal(r, 100 + 54 + 3),
                loss: Box::new(move |t, v| {
                    let x = piece(t, v, 0, &[2, 2, 5, 5])?;
                    let k = piece(t, v, 100, &[3, 2, 3, 3])?;
                    let b = t.slice(v, 154, 3)?;
                    let y = t.conv2d(x, k, Some(b))?;
                    weighted_sum(t, y, &w)
                }),
            }
        }
        "relu" | "sigmoid" | "tanh" => {
            let kind = match name {
                "relu" => ActivationKind::Relu,
                "sigmoid" => ActivationKind::Sigmoid,
                _ => ActivationKind::Tanh,
            };
            let w = normal(r, 8);
            Case {
                theta: normal(r, 8),
                loss: Box::new(move |t, v| {
                    let y = t.activation(v, kind);
                    weighted_sum(t, y, &w)
                }),
            }
        }
        "mse" => {
            let target = normal(r, 6);
            Case {
                theta: normal(r, 6),
                loss: Box::new(move |t, v| {
                    let c = t.constant(Tensor::vector(target.clone()));
                    t.mse(v, c)
                }),
            }
        }
        "bce" => {
            let target: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
            Case {
                theta: normal(r, 6),
                loss: Box::new(move |t, v| {
                    let p = t.sigmoid(v);
                    let c = t.constant(Tensor::vector(target.clone()));
                    t.bce(p, c)
                }),
            }
        }
        "dense" => {
            let w = normal(r, 2 * 3);
            Case {
                theta: normal(r, 12 + 3 + 8),
                loss: Box::new(move |t, v| {
                    let wt = piece(t, v, 0, &[3, 4])?;
                    let b = t.slice(v, 12, 3)?;
                    let x = piece(t, v, 15, &[2, 4])?;
                    let y = dense_forward(t, wt, b, x)?;
                    weighted_sum(t, y, &w)
                }),
            }
        }
        "batchnorm" => {
            let w = normal(r, 4 * 3 * 2 * 2);
            let mut theta = normal(r, 48);
            theta.extend((0..3).map(|_| r.gen_range(0.5..1.5)));
            theta.extend(normal(r, 3));
            Case {
                theta,
                loss: Box::new(move |t, v| {
                    let x = piece(t, v, 0, &[4, 3, 2, 2])?;
                    let g = t.slice(v, 48, 3)?;
                    let b = t.slice(v, 51, 3)?;
                    let mut state = BatchNormState::new(3);
                    state.mode = BnMode::Train;
                    let y = batchnorm_forward(t, x, g, b, &mut state)?;
                    weighted_sum(t, y, &w)
                }),
            }
        }
        "lstm_cell" => {
            let spec = ModelSpec::new(vec![LayerSpec::lstm(2, 3)])?;
            let n = spec.param_count();
            let (wh, wc) = (normal(r, 12), normal(r, 12));
            let mut theta: Vec<f64> = normal(r, n).iter().map(|v| 0.5 * v).collect();
            theta.extend(normal(r, 8 + 12 + 12));
            Case {
                theta,
                loss: Box::new(move |t, v| {
                    let params = t.slice(v, 0, n)?;
                    let layers = bind_params(t, &spec, params)?;
                    let w = LstmVars::from_layer(&layers[0])?;
                    let x = piece(t, v, n, &[4, 2])?;
                    let h = piece(t, v, n + 8, &[4, 3])?;
                    let c = piece(t, v, n + 20, &[4, 3])?;
                    let (h2, c2) = lstm_cell(t, &w, x, h, c)?;
                    let a = weighted_sum(t, h2, &wh)?;
                    let b = weighted_sum(t, c2, &wc)?;
                    t.add(a, b)
                }),
            }
        }
        "scale_sum" => {
            let factor = r.gen_range(-2.0..2.0);
            Case {
                theta: normal(r, 5),
                loss: Box::new(move |t, v| {
                    let s = t.scale(v, factor);
                    let m = t.mean(s);
                    let q = t.mul(m, m)?;
                    Ok(t.sum(q))
                }),
            }
        }
        other => {
            return Err(crate::Error::Contract(format!("no gradient check named {other}")));
        }
    };
    Ok(case)
}

/// `MSE(R(y), w)` of a freshly initialized base DnCNN on two noisy 8×8
/// patches, checked on a random coordinate subset.
fn dncnn_point(r: &mut impl Rng, tol: f64) -> Result<crate::autodiff::GradCheckReport> {
    let mut model = DnCnn::new(DnCnnSpec::base(), r.gen())?;
    model.set_mode(BnMode::Train);
    let clean: Vec<Image> = (0..2)
        .map(|_| Image::new(8, 8, (0..64).map(|_| r.gen_range(0.0..1.0)).collect()))
        .collect::<Result<_>>()?;
    let refs: Vec<&Image> = clean.iter().collect();
    let (input, target) = noisy_batch(&refs, SigmaMode::Fixed(25.0), r.gen(), "gradcheck", 0)?;
    let theta = model.params.clone();
    let coords: Vec<usize> = (0..DNCNN_COORDS).map(|_| r.gen_range(0..theta.len())).collect();
    finite_diff_check_coords(
        |t, v| {
            let x = t.constant(input.clone());
            let w = t.constant(target.clone());
            let out = model.record_residual(t, v, x)?;
            t.mse(out, w)
        },
        &theta,
        &coords,
        GRADCHECK_STEP,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_at_three_points() {
        for c in gradient_suite(3, 3, 1e-4).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(check_op("nope", 0, 1, 1e-4).is_err());
    }

    #[test]
    fn broken_gradient_is_caught() {
        let theta = vec![0.3, -0.7];
        let report = finite_diff_check_coords(
            |t, v| {
                // Value of sum(v²) but with the adjoint of sum(v).
                let sq = t.mul(v, v)?;
                let value = t.value(sq).data().iter().sum::<f64>();
                t.external(v, value, vec![1.0, 1.0])
            },
            &theta,
            &[0, 1],
            GRADCHECK_STEP,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
    }
}
