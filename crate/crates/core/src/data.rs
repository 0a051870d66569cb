//! Paired inputs and targets.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One model input.
///
/// `residual` is the additive term `R` used by residual models. `branch_inputs`
/// holds one input per branch for models that feed each branch its own band
/// (diffusion residual mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_inputs: Option<Vec<Vec<f64>>>,
}

impl Sample {
    pub fn new(x: Vec<f64>) -> Self {
        Self {
            x,
            residual: None,
            branch_inputs: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self::new(vec![x])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    /// Regression target vector.
    Values(Vec<f64>),
    /// Class index for classification losses.
    Class(usize),
}

impl Target {
    pub fn values(&self) -> Option<&[f64]> {
        match self {
            Target::Values(v) => Some(v),
            Target::Class(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub targets: Vec<Target>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, targets: Vec<Target>) -> Result<Self> {
        if samples.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} targets",
                samples.len(),
                targets.len()
            )));
        }
        Ok(Self { samples, targets })
    }

    /// Scalar regression data, one input and one target value per sample.
    pub fn scalar(xs: &[f64], ys: &[f64]) -> Result<Self> {
        Self::new(
            xs.iter().map(|&x| Sample::scalar(x)).collect(),
            ys.iter().map(|&y| Target::Values(vec![y])).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Sample, &Target)> {
        self.samples.iter().zip(self.targets.iter())
    }
}

/// Toy 1: a one-dimensional XOR-like set with targets away from zero.
pub fn toy1() -> Dataset {
    Dataset::scalar(&[-1.0, 0.0, 0.0, 1.0], &[1.0, 0.5, 0.5, 1.0]).expect("fixed sizes")
}

/// Toy 2: a four-point scalar regression problem.
pub fn toy2() -> Dataset {
    Dataset::scalar(&[-1.0, 0.0, 1.0, 2.0], &[1.0, 0.25, 0.5, 0.75]).expect("fixed sizes")
}
