use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use ldn_core::meta::Features;
use ldn_core::optim::OptimizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskArg {
    Quadratic,
    DigitMlp,
    Denoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Sgd,
    Momentum,
    Nag,
    Rmsprop,
    Adam,
    Meta,
}

impl OptimizerArg {
    pub fn baseline(self) -> Option<OptimizerKind> {
        match self {
            OptimizerArg::Sgd => Some(OptimizerKind::Sgd),
            OptimizerArg::Momentum => Some(OptimizerKind::Momentum),
            OptimizerArg::Nag => Some(OptimizerKind::Nag),
            OptimizerArg::Rmsprop => Some(OptimizerKind::RmsProp),
            OptimizerArg::Adam => Some(OptimizerKind::Adam),
            OptimizerArg::Meta => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeaturesArg {
    LogSign,
    Raw,
}

impl From<FeaturesArg> for Features {
    fn from(f: FeaturesArg) -> Self {
        match f {
            FeaturesArg::LogSign => Features::LogSign,
            FeaturesArg::Raw => Features::Raw,
        }
    }
}
