//! Plain gradient descent, `θ ← θ − lr·∇L(θ)`, as an explicit-Euler
//! discretization of the gradient flow `θ̇ = −∇L`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branchnet::{BranchOutputs, BranchedModel};
use crate::{Dataset, Error, LossSpec, Result, Target};

/// Success threshold on the unnormalized squared residual sum.
pub const DEFAULT_SUCCESS_DELTA: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    FullBatch,
    /// Minibatches drawn from a per-epoch shuffle seeded by the config seed.
    Sgd { batch_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub mode: TrainMode,
    /// Stop once `Σⱼ ‖f(xⱼ) − yⱼ‖² < δ`; `None` disables the check.
    pub success_delta: Option<f64>,
    /// Record branch outputs and parameters every this many steps.
    pub snapshot_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            max_steps: 50_000,
            mode: TrainMode::FullBatch,
            success_delta: Some(DEFAULT_SUCCESS_DELTA),
            snapshot_every: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub snapshot_steps: Vec<usize>,
    pub branch_outputs: Vec<BranchOutputs>,
    pub param_snapshots: Vec<Vec<f64>>,
    /// First step at which the success criterion held.
    pub converged_at: Option<usize>,
    pub grad_norm_final: f64,
}

impl TrainTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// `step,loss,grad_norm` rows.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "step,loss,grad_norm")?;
        for (step, (loss, g)) in self.losses.iter().zip(&self.grad_norms).enumerate() {
            writeln!(out, "{step},{loss},{g}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}

/// `Σⱼ ‖f(xⱼ) − yⱼ‖² < delta`, the unnormalized sum rather than the mean loss.
pub fn success(model: &BranchedModel, data: &Dataset, delta: f64) -> Result<bool> {
    Ok(squared_residual_sum(model, data)? < delta)
}

pub fn squared_residual_sum(model: &BranchedModel, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for (sample, target) in data.iter() {
        let y = target
            .values()
            .ok_or_else(|| Error::InvalidArgument("success needs regression targets".into()))?;
        let f = model.forward(sample)?;
        if f.len() != y.len() {
            return Err(Error::Shape("output and target lengths differ".into()));
        }
        total += f.iter().zip(y).map(|(f, y)| (f - y) * (f - y)).sum::<f64>();
    }
    Ok(total)
}

struct BatchPlan {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchPlan {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self, batch_size: usize) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// Runs gradient descent until `max_steps` or the success criterion fires.
pub fn train(
    model: &BranchedModel,
    data: &Dataset,
    loss: &LossSpec,
    cfg: &TrainConfig,
) -> Result<(BranchedModel, TrainTrace)> {
    if !(cfg.learning_rate >= 0.0) || !cfg.learning_rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be nonnegative, got {}",
            cfg.learning_rate
        )));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if let TrainMode::Sgd { batch_size: 0 } = cfg.mode {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if cfg.snapshot_every == Some(0) {
        return Err(Error::InvalidArgument("snapshot interval must be positive".into()));
    }
    let regression = data.targets.iter().all(|t| matches!(t, Target::Values(_)));
    let delta = cfg.success_delta.filter(|_| regression);

    let mut model = model.clone();
    let mut trace = TrainTrace::default();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut batches = BatchPlan::new(data.len(), cfg.seed);

    for step in 0..cfg.max_steps {
        if let Some(every) = cfg.snapshot_every {
            if step % every == 0 {
                trace.snapshot_steps.push(step);
                trace.branch_outputs.push(model.forward_all(&data.samples)?);
                trace.param_snapshots.push(model.params().values().to_vec());
            }
        }
        let eval = match &cfg.mode {
            TrainMode::FullBatch => model.loss_gradient_on(loss, data, &all)?,
            TrainMode::Sgd { batch_size } => {
                let batch = batches.next(*batch_size);
                model.loss_gradient_on(loss, data, &batch)?
            }
        };
        let grad_norm = eval.gradient.norm();
        if !eval.loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged { step });
        }
        trace.losses.push(eval.loss);
        trace.grad_norms.push(grad_norm);
        trace.grad_norm_final = grad_norm;

        if let Some(delta) = delta {
            let residual = match cfg.mode {
                TrainMode::FullBatch => eval.squared_residual_sum,
                TrainMode::Sgd { .. } => squared_residual_sum(&model, data)?,
            };
            if residual < delta {
                trace.converged_at = Some(step);
                return Ok((model, trace));
            }
        }

        let lr = cfg.learning_rate;
        for (theta, g) in model
            .params_mut()
            .values_mut()
            .iter_mut()
            .zip(eval.gradient.entries())
        {
            *theta -= lr * g;
        }
    }

    if let Some(delta) = delta {
        if success(&model, data, delta)? {
            trace.converged_at = Some(cfg.max_steps);
        }
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branchnet::BranchArch;
    use crate::data;
    use proptest::prelude::*;

    fn scalar(params: &[f64]) -> BranchedModel {
        BranchedModel::from_params(
            BranchArch::scalar_perceptron(),
            params.len() / 2,
            0,
            params.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn success_criterion_cases() {
        let zero = scalar(&[0.0, 0.0]);
        assert_eq!(squared_residual_sum(&zero, &data::toy1()).unwrap(), 2.5);
        assert!(!success(&zero, &data::toy1(), 1e-4).unwrap());

        let perfect = Dataset::scalar(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        let identity = scalar(&[1.0, 0.0]);
        assert!(success(&identity, &perfect, 1e-300).unwrap());
        assert!(!success(&identity, &perfect, 0.0).unwrap());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let model = BranchedModel::init(BranchArch::scalar_perceptron(), 4, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_steps: 25,
            ..TrainConfig::default()
        };
        let (trained, trace) = train(&model, &data::toy2(), &LossSpec::SquaredL2, &cfg).unwrap();
        assert_eq!(trained.params(), model.params());
        assert_eq!(trace.losses.len(), 25);
    }

    #[test]
    fn matches_closed_form_euler_recursion() {
        // one branch, one sample (x = 1, y = 1), positive side: f = w + b
        let data = Dataset::scalar(&[1.0], &[1.0]).unwrap();
        let (w0, b0, lr) = (0.3, 0.4, 0.1);
        let cfg = TrainConfig {
            learning_rate: lr,
            max_steps: 1,
            success_delta: None,
            ..TrainConfig::default()
        };
        let mut model = scalar(&[w0, b0]);
        let (mut w, mut b) = (w0, b0);
        for _ in 0..40 {
            let r = w + b - 1.0;
            (w, b) = (w - lr * r, b - lr * r);
            model = train(&model, &data, &LossSpec::SquaredL2, &cfg).unwrap().0;
            let p = model.params().values();
            assert!((p[0] - w).abs() < 1e-12 && (p[1] - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_collaborative_factor_is_a_fixed_point() {
        // both branches positive everywhere, fit exact: f(x) = x + 1
        let model = scalar(&[0.5, 1.0, 0.5, 0.0]);
        let data = Dataset::scalar(&[0.5, 1.0, 2.0], &[1.5, 2.0, 3.0]).unwrap();
        let cfg = TrainConfig {
            max_steps: 3,
            success_delta: None,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&model, &data, &LossSpec::SquaredL2, &cfg).unwrap();
        assert_eq!(trained.params(), model.params());
    }

    #[test]
    fn divergence_reports_step() {
        let model = BranchedModel::init(BranchArch::scalar_perceptron(), 3, 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e6,
            max_steps: 1000,
            success_delta: None,
            ..TrainConfig::default()
        };
        let data = Dataset::scalar(&[3.0, 2.0], &[1.0, -1.0]).unwrap();
        match train(&model, &data, &LossSpec::SquaredL2, &cfg) {
            Err(Error::Diverged { step }) => assert!(step > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn stops_at_first_success() {
        let model = BranchedModel::init(BranchArch::scalar_perceptron(), 12, 5).unwrap();
        let data = data::toy1();
        let (trained, trace) =
            train(&model, &data, &LossSpec::SquaredL2, &TrainConfig::default()).unwrap();
        if let Some(step) = trace.converged_at {
            assert_eq!(trace.losses.len(), step + 1);
            assert!(success(&trained, &data, DEFAULT_SUCCESS_DELTA).unwrap());
        }
    }

    #[test]
    fn snapshots_and_csv() {
        let model = BranchedModel::init(BranchArch::scalar_perceptron(), 2, 0).unwrap();
        let cfg = TrainConfig {
            max_steps: 10,
            snapshot_every: Some(5),
            success_delta: None,
            ..TrainConfig::default()
        };
        let (_, trace) = train(&model, &data::toy1(), &LossSpec::SquaredL2, &cfg).unwrap();
        assert_eq!(trace.snapshot_steps, vec![0, 5]);
        assert_eq!(trace.branch_outputs[0].samples, 4);
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(text.starts_with("step,loss,grad_norm\n0,"));
    }

    #[test]
    fn sgd_is_seeded() {
        let model = BranchedModel::init(BranchArch::mlp(&[1, 4, 1]), 3, 9).unwrap();
        let cfg = TrainConfig {
            max_steps: 30,
            mode: TrainMode::Sgd { batch_size: 2 },
            success_delta: None,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train(&model, &data::toy2(), &LossSpec::SquaredL2, &cfg).unwrap();
        let b = train(&model, &data::toy2(), &LossSpec::SquaredL2, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        let other = TrainConfig { seed: 5, ..cfg };
        let c = train(&model, &data::toy2(), &LossSpec::SquaredL2, &other).unwrap();
        assert_ne!(a.0, c.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn small_step_decreases_loss(seed in any::<u64>(), m in 1usize..6) {
            let model = BranchedModel::init(BranchArch::mlp(&[1, 3, 1]), m, seed).unwrap();
            let data = data::toy2();
            let eval = model.loss_gradient(&LossSpec::SquaredL2, &data).unwrap();
            prop_assume!(eval.gradient.norm() > 1e-8);
            let mut lr = 1.0;
            let mut decreased = false;
            for _ in 0..40 {
                let mut next = model.clone();
                for (t, g) in next.params_mut().values_mut().iter_mut().zip(eval.gradient.entries()) {
                    *t -= lr * g;
                }
                if next.mean_loss(&LossSpec::SquaredL2, &data).unwrap() < eval.loss {
                    decreased = true;
                    break;
                }
                lr /= 2.0;
            }
            prop_assert!(decreased);
        }

        #[test]
        fn training_is_deterministic(seed in any::<u64>()) {
            let model = BranchedModel::init(BranchArch::scalar_perceptron(), 4, seed).unwrap();
            let cfg = TrainConfig { max_steps: 200, ..TrainConfig::default() };
            let a = train(&model, &data::toy1(), &LossSpec::SquaredL2, &cfg).unwrap();
            let b = train(&model, &data::toy1(), &LossSpec::SquaredL2, &cfg).unwrap();
            prop_assert_eq!(a.0, b.0);
            let bits = |t: &TrainTrace| t.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.1), bits(&b.1));
        }
    }
}
