use super::spec::{LayerKind, ModelSpec, ParamRole};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Tape handles for one layer's parameter tensors.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pieces: Vec<(ParamRole, Var)>,
}

impl LayerVars {
    pub fn get(&self, role: ParamRole) -> Result<Var> {
        self.pieces
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Spec(format!("layer has no {role:?} parameter")))
    }
}

/// Slices a flat parameter var into per-layer, correctly shaped tensors.
pub fn bind_params(tape: &mut Tape, spec: &ModelSpec, theta: Var) -> Result<Vec<LayerVars>> {
    let layout = spec.layout();
    if tape.value(theta).len() != layout.total {
        return Err(Error::shape(format!(
            "parameter var has {} values, spec needs {}",
            tape.value(theta).len(),
            layout.total
        )));
    }
    layout
        .layers
        .iter()
        .map(|l| {
            let pieces = l
                .pieces
                .iter()
                .map(|s| {
                    let flat = tape.slice(theta, s.offset, s.len)?;
                    let v = if s.shape.len() == 1 {
                        flat
                    } else {
                        tape.reshape(flat, &s.shape)?
                    };
                    Ok((s.role, v))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerVars { pieces })
        })
        .collect()
}

/// `W·x + b` for `x: [in]` or a batch `x: [N, in]`.
pub fn dense_forward(tape: &mut Tape, weights: Var, bias: Var, x: Var) -> Result<Var> {
    tape.linear(x, weights, Some(bias))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics and mode of one batch-norm layer. The affine
/// parameters (gamma, beta) are trainable and live in the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: BnMode,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Train mode normalizes with batch statistics and folds them into the
/// running averages (`running = momentum * running + (1 - momentum) * batch`,
/// unbiased variance). Eval mode normalizes with the running statistics and
/// leaves them untouched.
pub fn batchnorm_forward(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BatchNormState,
) -> Result<Var> {
    match state.mode {
        BnMode::Train => {
            let (y, stats) = tape.batch_norm(x, gamma, beta, state.epsilon)?;
            let m = state.momentum;
            let correction = stats.count as f64 / (stats.count as f64 - 1.0);
            for c in 0..state.channels() {
                state.running_mean[c] = m * state.running_mean[c] + (1.0 - m) * stats.mean[c];
                state.running_var[c] =
                    m * state.running_var[c] + (1.0 - m) * stats.var[c] * correction;
            }
            Ok(y)
        }
        BnMode::Eval => tape.channel_affine(
            x,
            gamma,
            beta,
            &state.running_mean,
            &state.running_var,
            state.epsilon,
        ),
    }
}

/// Hidden and cell state of an LSTM layer for `rows` independent sequences,
/// stored row-major as `[rows, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub hidden: usize,
}

impl LstmState {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        Self {
            h: vec![0.0; rows * hidden],
            c: vec![0.0; rows * hidden],
            hidden,
        }
    }

    pub fn rows(&self) -> usize {
        self.h.len() / self.hidden
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|v| v.is_finite())
    }
}

/// Tape handles of one LSTM layer.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub input_weight: Var,
    pub hidden_weight: Var,
    pub bias: Var,
}

impl LstmVars {
    pub fn from_layer(layer: &LayerVars) -> Result<Self> {
        Ok(Self {
            input_weight: layer.get(ParamRole::InputWeight)?,
            hidden_weight: layer.get(ParamRole::HiddenWeight)?,
            bias: layer.get(ParamRole::Bias)?,
        })
    }
}

/// One LSTM step on the tape.
///
/// ```text
/// [i f g o] = x·W_ihᵀ + h·W_hhᵀ + b
/// c' = σ(f)·c + σ(i)·tanh(g)
/// h' = σ(o)·tanh(c')
/// ```
pub fn lstm_cell(tape: &mut Tape, w: &LstmVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hidden = tape.shape(w.hidden_weight)[1];
    let from_x = tape.linear(x, w.input_weight, Some(w.bias))?;
    let from_h = tape.linear(h, w.hidden_weight, None)?;
    let gates = tape.add(from_x, from_h)?;
    let i = tape.columns(gates, 0, hidden)?;
    let f = tape.columns(gates, hidden, hidden)?;
    let g = tape.columns(gates, 2 * hidden, hidden)?;
    let o = tape.columns(gates, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Value-level LSTM step: returns `(h', state')` and leaves `state` as is.
///
/// `weights` holds the layer's flat parameters (input weights, hidden
/// weights, bias) and `x` is `[rows, input]`.
pub fn lstm_cell_step(
    weights: &[f64],
    input: usize,
    x: &[f64],
    state: &LstmState,
) -> Result<(Vec<f64>, LstmState)> {
    let hidden = state.hidden;
    let rows = state.rows();
    let spec = super::LayerSpec::lstm(input, hidden);
    if weights.len() != spec.param_count() || x.len() != rows * input {
        return Err(Error::shape(format!(
            "lstm step: {} weights / {} inputs for input {input}, hidden {hidden}, rows {rows}",
            weights.len(),
            x.len()
        )));
    }
    let mut tape = Tape::new();
    let wi = tape.constant(Tensor::new(&[4 * hidden, input], weights[..4 * hidden * input].to_vec())?);
    let off = 4 * hidden * input;
    let wh = tape.constant(Tensor::new(
        &[4 * hidden, hidden],
        weights[off..off + 4 * hidden * hidden].to_vec(),
    )?);
    let b = tape.constant(Tensor::vector(weights[off + 4 * hidden * hidden..].to_vec()));
    let vars = LstmVars {
        input_weight: wi,
        hidden_weight: wh,
        bias: b,
    };
    let xv = tape.constant(Tensor::new(&[rows, input], x.to_vec())?);
    let hv = tape.constant(Tensor::new(&[rows, hidden], state.h.clone())?);
    let cv = tape.constant(Tensor::new(&[rows, hidden], state.c.clone())?);
    let (h, c) = lstm_cell(&mut tape, &vars, xv, hv, cv)?;
    let next = LstmState {
        h: tape.value(h).data().to_vec(),
        c: tape.value(c).data().to_vec(),
        hidden,
    };
    Ok((next.h.clone(), next))
}

/// Runs a stack of conv/dense layers. Batch-norm layers consume `bn` in
/// order.
pub fn sequential_forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &[LayerVars],
    input: Var,
    bn: &mut [BatchNormState],
) -> Result<Var> {
    let mut x = input;
    let mut bn_iter = bn.iter_mut();
    for (layer, vars) in spec.layers().iter().zip(params) {
        x = match layer.kind {
            LayerKind::Conv => {
                let w = vars.get(ParamRole::Weight)?;
                if layer.batchnorm {
                    let y = tape.conv2d(x, w, None)?;
                    let state = bn_iter
                        .next()
                        .ok_or_else(|| Error::Spec("missing batch-norm state".into()))?;
                    batchnorm_forward(
                        tape,
                        y,
                        vars.get(ParamRole::Gamma)?,
                        vars.get(ParamRole::Beta)?,
                        state,
                    )?
                } else {
                    tape.conv2d(x, w, Some(vars.get(ParamRole::Bias)?))?
                }
            }
            LayerKind::Dense => dense_forward(
                tape,
                vars.get(ParamRole::Weight)?,
                vars.get(ParamRole::Bias)?,
                x,
            )?,
            LayerKind::Lstm => {
                return Err(Error::Spec("LSTM layers cannot run in a feed-forward stack".into()))
            }
        };
        if let Some(act) = layer.activation {
            x = tape.activation(x, act);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::nn::{init_params, LayerSpec};
    use crate::rng;
    use rand::Rng;

    fn random(seed: u64, n: usize, scale: f64) -> Vec<f64> {
        let mut r = rng::stream(seed, "layers-test", 0);
        (0..n).map(|_| scale * r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let x = tape.constant(Tensor::vector(vec![7.0, -3.0]));
        let y = dense_forward(&mut tape, w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, -3.0]);

        let w = tape.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![1.0]));
        let x = tape.constant(Tensor::vector(vec![2.0, 3.0]));
        let y = dense_forward(&mut tape, w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);

        let bad = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(dense_forward(&mut tape, w, b, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_gradient_check() {
        let x = random(1, 3 * 4, 1.0);
        let theta = random(2, 5 * 4 + 5, 1.0);
        let report = finite_diff_check(
            |tape, t| {
                let w = tape.slice(t, 0, 20)?;
                let w = tape.reshape(w, &[5, 4])?;
                let b = tape.slice(t, 20, 5)?;
                let x = tape.constant(Tensor::new(&[3, 4], x.clone())?);
                let y = dense_forward(tape, w, b, x)?;
                let y = tape.sigmoid(y);
                Ok(tape.sum(y))
            },
            &theta,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn channel_stats(v: &[f64], n: usize, c: usize, s: usize) -> Vec<(f64, f64)> {
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..n)
                    .flat_map(|i| (0..s).map(move |j| (i * c + ch) * s + j))
                    .map(|idx| v[idx])
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                (m, var)
            })
            .collect()
    }

    #[test]
    fn batchnorm_train_normalizes() {
        // channel 0 has mean 5 and variance 4 by construction
        let (n, c, s) = (8, 2, 3);
        let mut data = random(5, n * c * s, 1.0);
        let ch0: Vec<usize> = (0..n).flat_map(|i| (0..s).map(move |j| i * c * s + j)).collect();
        let vals: Vec<f64> = ch0.iter().map(|&i| data[i]).collect();
        let (m, v) = {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            (m, v)
        };
        for &i in &ch0 {
            data[i] = 5.0 + 2.0 * (data[i] - m) / v.sqrt();
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[n, c, s], data).unwrap());
        let g = tape.constant(Tensor::vector(vec![1.0; c]));
        let b = tape.constant(Tensor::vector(vec![0.0; c]));
        let mut state = BatchNormState::new(c);
        let y = batchnorm_forward(&mut tape, x, g, b, &mut state).unwrap();
        for (mean, var) in channel_stats(tape.value(y).data(), n, c, s) {
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running statistics moved toward the batch values
        assert!((state.running_mean[0] - 0.1 * 5.0).abs() < 1e-12);
        assert!(state.running_var.iter().all(|v| *v >= 0.0));

        let g2 = tape.constant(Tensor::vector(vec![2.0; c]));
        let b2 = tape.constant(Tensor::vector(vec![3.0; c]));
        let y2 = batchnorm_forward(&mut tape, x, g2, b2, &mut state).unwrap();
        for (mean, var) in channel_stats(tape.value(y2).data(), n, c, s) {
            assert!((mean - 3.0).abs() < 1e-12);
            assert!((var.sqrt() - 2.0).abs() < 2e-3);
        }
    }

    #[test]
    fn batchnorm_eval_is_identity_with_unit_stats() {
        let data = random(6, 2 * 3 * 4, 2.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3, 4], data.clone()).unwrap());
        let g = tape.constant(Tensor::vector(vec![1.0; 3]));
        let b = tape.constant(Tensor::vector(vec![0.0; 3]));
        let mut state = BatchNormState::new(3);
        state.mode = BnMode::Eval;
        let before = state.clone();
        let y = batchnorm_forward(&mut tape, x, g, b, &mut state).unwrap();
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in tape.value(y).data().iter().zip(&data) {
            assert!((a - b * scale).abs() < 1e-15);
        }
        assert_eq!(state, before);
    }

    #[test]
    fn batchnorm_rejects_single_sample() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4]));
        let g = tape.constant(Tensor::vector(vec![1.0; 3]));
        let b = tape.constant(Tensor::vector(vec![0.0; 3]));
        let mut state = BatchNormState::new(3);
        assert!(matches!(
            batchnorm_forward(&mut tape, x, g, b, &mut state),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn batchnorm_random_batches_are_standardized() {
        for seed in 0..5 {
            let (n, c, s) = (8 + seed as usize, 3, 5);
            let data: Vec<f64> = random(100 + seed, n * c * s, 3.0)
                .iter()
                .map(|v| v + 4.0)
                .collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[n, c, s], data).unwrap());
            let g = tape.constant(Tensor::vector(vec![1.0; c]));
            let b = tape.constant(Tensor::vector(vec![0.0; c]));
            let mut state = BatchNormState::new(c);
            let y = batchnorm_forward(&mut tape, x, g, b, &mut state).unwrap();
            for (mean, var) in channel_stats(tape.value(y).data(), n, c, s) {
                assert!(mean.abs() < 1e-6);
                assert!((1.0 - 1e-3..=1.0 + 1e-3).contains(&var), "var {var}");
            }
        }
    }

    #[test]
    fn lstm_hand_evaluated_step() {
        // zero weights: every gate is sigmoid(0) = 0.5 and g = tanh(0) = 0
        let weights = vec![0.0; LayerSpec::lstm(1, 1).param_count()];
        let state = LstmState {
            h: vec![0.0],
            c: vec![2.0],
            hidden: 1,
        };
        let (h, next) = lstm_cell_step(&weights, 1, &[0.0], &state).unwrap();
        assert_eq!(next.c, vec![1.0]);
        assert!((h[0] - 0.5 * 1.0f64.tanh()).abs() < 1e-15);
        assert!((h[0] - 0.3808).abs() < 1e-4);
        assert_eq!(state.c, vec![2.0]);

        let zero = LstmState::zeros(1, 1);
        let (h, next) = lstm_cell_step(&weights, 1, &[0.0], &zero).unwrap();
        assert_eq!(h, vec![0.0]);
        assert_eq!(next.c, vec![0.0]);
    }

    #[test]
    fn lstm_step_is_pure() {
        let spec = ModelSpec::new(vec![LayerSpec::lstm(2, 4)]).unwrap();
        let w = init_params(&spec, 5);
        let mut state = LstmState::zeros(3, 4);
        state.h = random(7, 12, 0.5);
        state.c = random(8, 12, 0.5);
        let x = random(9, 6, 1.0);
        let a = lstm_cell_step(w.data(), 2, &x, &state).unwrap();
        let b = lstm_cell_step(w.data(), 2, &x, &state).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lstm_gradient_check() {
        let (input, hidden, rows) = (2, 3, 2);
        let spec = ModelSpec::new(vec![LayerSpec::lstm(input, hidden)]).unwrap();
        let mut theta = init_params(&spec, 3).into_data();
        theta.iter_mut().zip(random(10, 1000, 0.3)).for_each(|(t, r)| *t += r);
        let x = random(11, rows * input, 1.0);
        let h0 = random(12, rows * hidden, 0.5);
        let c0 = random(13, rows * hidden, 0.5);
        let report = finite_diff_check(
            |tape, t| {
                let vars = bind_params(tape, &spec, t)?;
                let w = LstmVars::from_layer(&vars[0])?;
                let x = tape.constant(Tensor::new(&[rows, input], x.clone())?);
                let h = tape.constant(Tensor::new(&[rows, hidden], h0.clone())?);
                let c = tape.constant(Tensor::new(&[rows, hidden], c0.clone())?);
                let (h1, c1) = lstm_cell(tape, &w, x, h, c)?;
                let s = tape.mul(h1, c1)?;
                Ok(tape.sum(s))
            },
            &theta,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
