//! First-order optimizers over a [`ParamVector`].

use super::params::ParamVector;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `θ ← θ - η g`.
    Descent,
    /// Adaptive moment estimation with decoupled weight decay.
    #[default]
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Descent => "descent",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "descent" => Ok(OptimizerKind::Descent),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay rate, applied only to groups flagged for decay.
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    settings: OptimizerSettings,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings, len: usize) -> Self {
        let moments = if settings.kind == OptimizerKind::Adam { len } else { 0 };
        Self {
            settings,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One update of `params` along `grad`; both share one layout.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        if params.layout() != grad.layout() {
            return Err(Error::Internal("gradient layout differs from parameters".into()));
        }
        let s = self.settings;
        self.t += 1;
        let (bc1, bc2) = (1.0 - s.beta1.powi(self.t as i32), 1.0 - s.beta2.powi(self.t as i32));
        let layout = params.layout().clone();
        for group in layout.groups() {
            let eta = s.step * group.lr_scale;
            let decay = if group.decay { s.weight_decay } else { 0.0 };
            for i in group.range() {
                let g = grad.values[i];
                let x = &mut params.values[i];
                if decay != 0.0 {
                    *x -= eta * decay * *x;
                }
                match s.kind {
                    OptimizerKind::Descent => *x -= eta * g,
                    OptimizerKind::Adam => {
                        let (m, v) = (&mut self.m[i], &mut self.v[i]);
                        *m = s.beta1 * *m + (1.0 - s.beta1) * g;
                        *v = s.beta2 * *v + (1.0 - s.beta2) * g * g;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *x -= eta * mh / (vh.sqrt() + s.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
