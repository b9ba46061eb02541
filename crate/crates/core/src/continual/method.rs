use serde::{Deserialize, Serialize};

use crate::data::AugmentationSpec;
use crate::diff::OptimizerKind;
use crate::error::{invalid, Result};

fn supcon_tau() -> f64 {
    0.1
}
fn simclr_tau() -> f64 {
    0.5
}
fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn half() -> f64 {
    0.5
}

/// Training method with its own hyperparameters only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Method {
    FtCe {},
    FtSupcon {
        #[serde(default = "supcon_tau")]
        temperature: f64,
    },
    FtSimclr {
        #[serde(default = "simclr_tau")]
        temperature: f64,
    },
    Ewc {
        lambda: f64,
        /// Fisher draws at task end; all training rows once when absent.
        #[serde(default)]
        fisher_samples: Option<usize>,
    },
    Lwf {
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default = "two")]
        t_kd: f64,
    },
    Er {
        m: usize,
        /// Fraction of each minibatch drawn from the buffer.
        #[serde(default = "half")]
        replay_ratio: f64,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FtCe {} => "ft-ce",
            Self::FtSupcon { .. } => "ft-supcon",
            Self::FtSimclr { .. } => "ft-simclr",
            Self::Ewc { .. } => "ewc",
            Self::Lwf { .. } => "lwf",
            Self::Er { .. } => "er",
        }
    }

    pub fn supcon() -> Self {
        Self::FtSupcon { temperature: supcon_tau() }
    }

    pub fn simclr() -> Self {
        Self::FtSimclr { temperature: simclr_tau() }
    }

    pub fn lwf(alpha: f64) -> Self {
        Self::Lwf { alpha, t_kd: two() }
    }

    pub fn ewc(lambda: f64) -> Self {
        Self::Ewc { lambda, fisher_samples: None }
    }

    pub fn er(m: usize) -> Self {
        Self::Er { m, replay_ratio: half() }
    }

    /// Contrastive methods train without classification heads.
    pub fn uses_heads(&self) -> bool {
        !self.is_contrastive()
    }

    pub fn is_contrastive(&self) -> bool {
        matches!(self, Self::FtSupcon { .. } | Self::FtSimclr { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::FtCe {} => true,
            Self::FtSupcon { temperature } | Self::FtSimclr { temperature } => temperature > 0.0 && temperature.is_finite(),
            Self::Ewc { lambda, fisher_samples } => lambda >= 0.0 && lambda.is_finite() && fisher_samples != Some(0),
            Self::Lwf { alpha, t_kd } => alpha >= 0.0 && alpha.is_finite() && t_kd > 0.0 && t_kd.is_finite(),
            Self::Er { replay_ratio, .. } => (0.0..1.0).contains(&replay_ratio),
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("method {self:?}")))
        }
    }
}

/// Offline runs several epochs per task; online makes one pass with momentum disabled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    #[default]
    Offline,
    Online,
}

impl RunMode {
    pub fn epochs(&self, configured: usize) -> usize {
        match self {
            Self::Offline => configured,
            Self::Online => 1,
        }
    }

    /// The optimizer actually used under this mode.
    pub fn optimizer(&self, kind: OptimizerKind) -> Result<OptimizerKind> {
        match (self, kind) {
            (Self::Offline, k) => Ok(k),
            (Self::Online, OptimizerKind::SgdMomentum { lr, weight_decay, .. }) => Ok(OptimizerKind::SgdMomentum {
                lr,
                momentum: 0.0,
                weight_decay,
            }),
            (Self::Online, OptimizerKind::Adamw { .. }) => Err(invalid("online mode runs plain SGD")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// View transform for contrastive methods; a shape-appropriate default when absent.
    pub augment: Option<AugmentationSpec>,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            optimizer: OptimizerKind::sgd(0.05, 0.9),
            epochs: 5,
            batch_size: 32,
            augment: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be ≥ 1"));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}
