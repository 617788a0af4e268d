//! Layer descriptors, flat parameter vectors and layer forward passes.

mod layers;
mod params;
mod serialize;
mod spec;

pub use layers::{
    batchnorm_forward, bind_params, dense_forward, lstm_cell, lstm_cell_step,
    sequential_forward, BatchNormState, BnMode, LayerVars, LstmState, LstmVars, BN_EPSILON,
    BN_MOMENTUM,
};
pub use params::{flatten_params, init_params, unflatten_params, Model, ParamVector};
pub use serialize::{ModelFile, ModelKind, MODEL_MAGIC, MODEL_VERSION};
pub use spec::{LayerKind, LayerLayout, LayerSpec, ModelSpec, ParamLayout, ParamRole, ParamSlot};
