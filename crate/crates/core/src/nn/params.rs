use rand::Rng;
use rand_distr::StandardNormal;

use super::spec::{LayerKind, ModelSpec, ParamLayout, ParamRole};
use crate::autodiff::{ActivationKind, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Every trainable scalar of a model in one flat array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn new(spec: &ModelSpec, data: Vec<f64>) -> Result<Self> {
        let layout = spec.layout();
        if data.len() != layout.total {
            return Err(Error::shape(format!(
                "parameter vector has {} values, spec needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Self { data, layout })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Per-layer parameter tensors, in the order given by [`super::LayerSpec::pieces`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Vec<(ParamRole, Tensor)>>,
}

impl Model {
    pub fn param(&self, layer: usize, role: ParamRole) -> Option<&Tensor> {
        self.layers
            .get(layer)?
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, layer: usize, role: ParamRole) -> Option<&mut Tensor> {
        self.layers
            .get_mut(layer)?
            .iter_mut()
            .find(|(r, _)| *r == role)
            .map(|(_, t)| t)
    }
}

pub fn flatten_params(model: &Model) -> ParamVector {
    let layout = model.spec.layout();
    let mut data = Vec::with_capacity(layout.total);
    for layer in &model.layers {
        for (_, t) in layer {
            data.extend_from_slice(t.data());
        }
    }
    ParamVector { data, layout }
}

pub fn unflatten_params(spec: &ModelSpec, values: &[f64]) -> Result<Model> {
    let layout = spec.layout();
    if values.len() != layout.total {
        return Err(Error::shape(format!(
            "cannot unflatten {} values into a spec with {} parameters",
            values.len(),
            layout.total
        )));
    }
    let layers = layout
        .layers
        .iter()
        .map(|l| {
            l.pieces
                .iter()
                .map(|s| {
                    let t = Tensor::new(&s.shape, values[s.offset..s.offset + s.len].to_vec());
                    t.map(|t| (s.role, t))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        spec: spec.clone(),
        layers,
    })
}

/// Seeded initialization.
///
/// Relu layers get He-normal weights (std `sqrt(2 / fan_in)`); all other
/// weights are Xavier-normal (std `sqrt(2 / (fan_in + fan_out))`). Biases and
/// betas start at 0, gammas at 1, and LSTM forget-gate biases at 1.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let layout = spec.layout();
    let mut data = vec![0.0; layout.total];
    for (idx, (layer, ll)) in spec.layers().iter().zip(&layout.layers).enumerate() {
        let mut r = rng::stream(seed, "init", idx as u64);
        let k2 = layer.kernel * layer.kernel;
        for slot in &ll.pieces {
            let dst = &mut data[slot.offset..slot.offset + slot.len];
            let std = match (layer.kind, slot.role) {
                (_, ParamRole::Weight) => {
                    let fan_in = (layer.fan_in * k2) as f64;
                    let fan_out = (layer.fan_out * k2) as f64;
                    if layer.activation == Some(ActivationKind::Relu) {
                        (2.0 / fan_in).sqrt()
                    } else {
                        (2.0 / (fan_in + fan_out)).sqrt()
                    }
                }
                (LayerKind::Lstm, ParamRole::InputWeight) => {
                    (2.0 / (layer.fan_in + layer.fan_out) as f64).sqrt()
                }
                (LayerKind::Lstm, ParamRole::HiddenWeight) => (1.0 / layer.fan_out as f64).sqrt(),
                (_, ParamRole::Gamma) => {
                    dst.fill(1.0);
                    continue;
                }
                (LayerKind::Lstm, ParamRole::Bias) => {
                    let h = layer.fan_out;
                    dst[h..2 * h].fill(1.0);
                    continue;
                }
                _ => continue,
            };
            for v in dst.iter_mut() {
                *v = std * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
    ParamVector { data, layout }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use proptest::prelude::*;

    fn mlp() -> ModelSpec {
        ModelSpec::new(vec![
            LayerSpec::dense(64, 64, Some(ActivationKind::Relu)),
            LayerSpec::dense(64, 10, Some(ActivationKind::Sigmoid)),
        ])
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = mlp();
        assert_eq!(init_params(&spec, 3), init_params(&spec, 3));
        assert_ne!(init_params(&spec, 3), init_params(&spec, 4));
    }

    #[test]
    fn he_std_of_relu_layer() {
        let spec = mlp();
        let p = init_params(&spec, 11);
        let slot = &p.layout().layers[0].pieces[0];
        let w = &p.data()[slot.offset..slot.offset + slot.len];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let want = (2.0f64 / 64.0).sqrt();
        assert!((std - want).abs() / want < 0.1, "std {std} vs {want}");
    }

    #[test]
    fn lstm_forget_bias_and_gamma() {
        let spec = ModelSpec::new(vec![LayerSpec::lstm(2, 3)]).unwrap();
        let p = init_params(&spec, 1);
        let bias = p.layout().layers[0].slot(ParamRole::Bias).unwrap();
        let b = &p.data()[bias.offset..bias.offset + bias.len];
        assert_eq!(b, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let conv = ModelSpec::new(vec![LayerSpec::conv(1, 2, 3, true, None)]).unwrap();
        let p = init_params(&conv, 1);
        let g = p.layout().layers[0].slot(ParamRole::Gamma).unwrap();
        assert_eq!(&p.data()[g.offset..g.offset + g.len], &[1.0, 1.0]);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let spec = mlp();
        assert!(matches!(
            unflatten_params(&spec, &[0.0; 3]),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(seed in any::<u64>(), hidden in 1usize..12, depth in 3usize..6) {
            let mut layers = vec![LayerSpec::conv(1, hidden, 3, false, Some(ActivationKind::Relu))];
            for _ in 0..depth - 2 {
                layers.push(LayerSpec::conv(hidden, hidden, 3, true, Some(ActivationKind::Relu)));
            }
            layers.push(LayerSpec::conv(hidden, 1, 3, false, None));
            let spec = ModelSpec::new(layers).unwrap();
            let p = init_params(&spec, seed);
            let model = unflatten_params(&spec, p.data()).unwrap();
            let back = flatten_params(&model);
            prop_assert!(back.data().iter().zip(p.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(unflatten_params(&spec, back.data()).unwrap(), model);
        }
    }
}
