use crate::autodiff::ActivationKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Dense,
    Lstm,
}

/// What a parameter tensor inside a layer is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    /// LSTM input-to-gates weights `[4H, in]`, gate order i, f, g, o.
    InputWeight,
    /// LSTM hidden-to-gates weights `[4H, H]`.
    HiddenWeight,
}

/// One layer descriptor.
///
/// For conv layers `fan_in`/`fan_out` are channel counts; a conv layer with
/// batch norm carries gamma/beta instead of a bias. For LSTM layers
/// `fan_out` is the hidden size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub kernel: usize,
    pub batchnorm: bool,
    pub activation: Option<ActivationKind>,
}

impl LayerSpec {
    pub fn conv(
        fan_in: usize,
        fan_out: usize,
        kernel: usize,
        batchnorm: bool,
        activation: Option<ActivationKind>,
    ) -> Self {
        Self {
            kind: LayerKind::Conv,
            fan_in,
            fan_out,
            kernel,
            batchnorm,
            activation,
        }
    }

    pub fn dense(fan_in: usize, fan_out: usize, activation: Option<ActivationKind>) -> Self {
        Self {
            kind: LayerKind::Dense,
            fan_in,
            fan_out,
            kernel: 1,
            batchnorm: false,
            activation,
        }
    }

    pub fn lstm(input: usize, hidden: usize) -> Self {
        Self {
            kind: LayerKind::Lstm,
            fan_in: input,
            fan_out: hidden,
            kernel: 1,
            batchnorm: false,
            activation: None,
        }
    }

    /// Parameter tensors of this layer in storage order.
    pub fn pieces(&self) -> Vec<(ParamRole, Vec<usize>)> {
        let (i, o, k) = (self.fan_in, self.fan_out, self.kernel);
        match self.kind {
            LayerKind::Conv if self.batchnorm => vec![
                (ParamRole::Weight, vec![o, i, k, k]),
                (ParamRole::Gamma, vec![o]),
                (ParamRole::Beta, vec![o]),
            ],
            LayerKind::Conv => vec![
                (ParamRole::Weight, vec![o, i, k, k]),
                (ParamRole::Bias, vec![o]),
            ],
            LayerKind::Dense => vec![(ParamRole::Weight, vec![o, i]), (ParamRole::Bias, vec![o])],
            LayerKind::Lstm => vec![
                (ParamRole::InputWeight, vec![4 * o, i]),
                (ParamRole::HiddenWeight, vec![4 * o, o]),
                (ParamRole::Bias, vec![4 * o]),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.pieces()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn validate(&self) -> Result<()> {
        if self.fan_in == 0 || self.fan_out == 0 || self.kernel == 0 {
            return Err(Error::Spec(format!("zero-sized layer {self:?}")));
        }
        match self.kind {
            LayerKind::Conv if self.kernel % 2 == 0 => {
                Err(Error::Spec(format!("conv kernel must be odd, got {}", self.kernel)))
            }
            LayerKind::Dense | LayerKind::Lstm if self.batchnorm || self.kernel != 1 => Err(
                Error::Spec(format!("{:?} layers take no kernel or batch norm", self.kind)),
            ),
            LayerKind::Lstm if self.activation.is_some() => {
                Err(Error::Spec("LSTM layers have fixed gate activations".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Ordered layer descriptors of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Checks that every layer is well formed and adjacent layers agree on
    /// width.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Spec("model has no layers".into()));
        }
        for l in &layers {
            l.validate()?;
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::Spec(format!(
                    "layer {i} emits {} features but layer {} expects {}",
                    pair[0].fan_out,
                    i + 1,
                    pair[1].fan_in
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn batchnorm_channels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.batchnorm)
            .map(|l| l.fan_out)
            .collect()
    }

    pub fn layout(&self) -> ParamLayout {
        let mut offset = 0;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let start = offset;
                let pieces = l
                    .pieces()
                    .into_iter()
                    .map(|(role, shape)| {
                        let slot = ParamSlot {
                            role,
                            offset,
                            len: shape.iter().product(),
                            shape,
                        };
                        offset += slot.len;
                        slot
                    })
                    .collect();
                LayerLayout {
                    offset: start,
                    len: offset - start,
                    pieces,
                }
            })
            .collect();
        ParamLayout { layers, total: offset }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub role: ParamRole,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub offset: usize,
    pub len: usize,
    pub pieces: Vec<ParamSlot>,
}

impl LayerLayout {
    pub fn slot(&self, role: ParamRole) -> Option<&ParamSlot> {
        self.pieces.iter().find(|p| p.role == role)
    }
}

/// Where each layer's parameters live inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub layers: Vec<LayerLayout>,
    pub total: usize,
}
