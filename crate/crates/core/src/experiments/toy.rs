//! Scalar-perceptron regression on the two four-point toy tasks.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::{prepare_dir, trial_seed, with_jobs, write_json, ExperimentSpec, ToyTask};
use crate::branchnet::{BranchArch, BranchedModel};
use crate::export::{self, Series};
use crate::speclab::{
    active_branches, correlation, covariance, equilibrium_diagnostic, response_matrix,
    ResponseMatrix, DEFAULT_ACTIVE_FRACTION,
};
use crate::trainer::{self, train, TrainConfig};
use crate::{Dataset, Error, LossSpec, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub m: usize,
    pub trial: usize,
    pub seed: u64,
    pub success: bool,
    pub diverged: bool,
    pub converged_at: Option<usize>,
    pub steps: usize,
    pub final_loss: f64,
    pub active: usize,
    pub silent: usize,
    /// Mean `|ρᵢⱼ|` over `i ≠ j` of the normalized covariance.
    pub mean_abs_offdiag_corr: f64,
    /// Mean diagonal of the normalized covariance.
    pub mean_diag_corr: f64,
    #[serde(skip)]
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MAggregate {
    pub m: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub mean_active: f64,
    pub mean_silent: f64,
    pub mean_abs_offdiag_corr: f64,
    pub mean_diag_corr: f64,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub task: ToyTask,
    #[serde(skip)]
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<MAggregate>,
}

impl SweepResult {
    /// Aggregates are a pure function of the records.
    pub fn from_records(task: ToyTask, records: Vec<TrialRecord>) -> Self {
        let mut groups: BTreeMap<usize, Vec<&TrialRecord>> = BTreeMap::new();
        for r in &records {
            groups.entry(r.m).or_default().push(r);
        }
        let aggregates = groups
            .into_iter()
            .map(|(m, rs)| {
                let n = rs.len() as f64;
                let mean = |f: &dyn Fn(&TrialRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
                MAggregate {
                    m,
                    trials: rs.len(),
                    success_rate: mean(&|r| r.success as u8 as f64),
                    mean_active: mean(&|r| r.active as f64),
                    mean_silent: mean(&|r| r.silent as f64),
                    mean_abs_offdiag_corr: mean(&|r| r.mean_abs_offdiag_corr),
                    mean_diag_corr: mean(&|r| r.mean_diag_corr),
                    diverged: rs.iter().filter(|r| r.diverged).count(),
                }
            })
            .collect();
        Self {
            task,
            records,
            aggregates,
        }
    }

    pub fn aggregate(&self, m: usize) -> Option<&MAggregate> {
        self.aggregates.iter().find(|a| a.m == m)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean absolute off-diagonal and mean diagonal of `correlation(cov)`.
pub(crate) fn correlation_stats(cov: &DMatrix<f64>) -> (f64, f64) {
    let r = correlation(cov);
    let m = r.nrows();
    let diag = (0..m).map(|i| r[(i, i)]).sum::<f64>() / m.max(1) as f64;
    let off = if m > 1 {
        let total: f64 = (0..m)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| r[(i, j)].abs())
            .sum();
        total / (m * (m - 1)) as f64
    } else {
        0.0
    };
    (off, diag)
}

fn run_trial(
    data: &Dataset,
    train_cfg: &TrainConfig,
    base: u64,
    m: usize,
    trial: usize,
) -> Result<TrialRecord> {
    let seed = trial_seed(base, m, trial);
    let model = BranchedModel::init(BranchArch::scalar_perceptron(), m, seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    match train(&model, data, &LossSpec::SquaredL2, &cfg) {
        Ok((trained, trace)) => {
            let f = response_matrix(&trained, &data.samples)?;
            let split = active_branches(&f, DEFAULT_ACTIVE_FRACTION)?;
            let cov = covariance(&f);
            let (off, diag) = correlation_stats(&cov);
            Ok(TrialRecord {
                m,
                trial,
                seed,
                success: trace.converged_at.is_some(),
                diverged: false,
                converged_at: trace.converged_at,
                steps: trace.losses.len(),
                final_loss: trained.mean_loss(&LossSpec::SquaredL2, data)?,
                active: split.active.len(),
                silent: split.silent.len(),
                mean_abs_offdiag_corr: off,
                mean_diag_corr: diag,
                covariance: cov,
            })
        }
        Err(Error::Diverged { step }) => Ok(TrialRecord {
            m,
            trial,
            seed,
            success: false,
            diverged: true,
            converged_at: None,
            steps: step,
            final_loss: f64::NAN,
            active: 0,
            silent: m,
            mean_abs_offdiag_corr: f64::NAN,
            mean_diag_corr: f64::NAN,
            covariance: DMatrix::zeros(m, m),
        }),
        Err(e) => Err(e),
    }
}

/// Trains `spec.trials` independently seeded models for every `M`.
///
/// Divergence is recorded as a failed trial rather than aborting the sweep.
pub fn sweep(spec: &ExperimentSpec) -> Result<SweepResult> {
    spec.validate()?;
    let data = spec.task.dataset();
    let jobs: Vec<(usize, usize)> = spec
        .m_values
        .iter()
        .flat_map(|&m| (0..spec.trials).map(move |t| (m, t)))
        .collect();
    let records = with_jobs(spec.jobs, || {
        jobs.par_iter()
            .map(|&(m, t)| run_trial(&data, &spec.train, spec.seed, m, t))
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(SweepResult::from_records(spec.task, records))
}

pub fn run_toy_sweep(spec: &ExperimentSpec) -> Result<SweepResult> {
    let result = sweep(spec)?;
    let dir = &spec.output_dir;
    prepare_dir(dir)?;
    result.write_csv(&dir.join("results.csv"))?;
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "experiment": "toy_sweep",
            "task": spec.task,
            "trials": spec.trials,
            "aggregates": result.aggregates,
        }),
    )?;

    let curve = |f: &dyn Fn(&MAggregate) -> f64| -> Vec<(f64, f64)> {
        result.aggregates.iter().map(|a| (a.m as f64, f(a))).collect()
    };
    export::write_text(
        &dir.join("success_rate.svg"),
        &export::line_chart_svg(
            &[Series {
                label: "success rate",
                points: curve(&|a| a.success_rate),
            }],
            "Success rate vs number of branches",
            "M",
            "success rate",
        ),
    )?;
    export::write_text(
        &dir.join("active_silent.svg"),
        &export::line_chart_svg(
            &[
                Series {
                    label: "mean active",
                    points: curve(&|a| a.mean_active),
                },
                Series {
                    label: "mean silent",
                    points: curve(&|a| a.mean_silent),
                },
            ],
            "Active and silent branches",
            "M",
            "branches",
        ),
    )?;
    for r in result.records.iter().filter(|r| r.trial == 0) {
        export::write_matrix_csv(&dir.join(format!("covariance_m{}.csv", r.m)), &r.covariance)?;
        export::write_text(
            &dir.join(format!("covariance_m{}.svg", r.m)),
            &export::heatmap_svg(&r.covariance, &format!("Branch covariance, M = {}", r.m)),
        )?;
    }
    Ok(result)
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyReport {
    pub task: ToyTask,
    pub m: usize,
    pub seed: u64,
    pub converged_at: Option<usize>,
    pub steps: usize,
    pub final_loss: f64,
    pub squared_residual_sum: f64,
    pub active: Vec<usize>,
    pub silent: Vec<usize>,
    pub branch_norms: Vec<f64>,
    pub mean_zero_column_fraction: f64,
}

/// Training dynamics of one model, with branch responses snapshotted along
/// the way.
pub fn run_toy(spec: &ExperimentSpec) -> Result<ToyReport> {
    spec.validate()?;
    let m = spec.single_m()?;
    let data = spec.task.dataset();
    let seed = trial_seed(spec.seed, m, 0);
    let model = BranchedModel::init(BranchArch::scalar_perceptron(), m, seed)?;
    let cfg = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let (trained, trace) = train(&model, &data, &LossSpec::SquaredL2, &cfg)?;

    let dir = &spec.output_dir;
    prepare_dir(dir)?;
    trace.save_csv(&dir.join("trace.csv"))?;

    let mut snaps = csv::Writer::from_path(dir.join("snapshots.csv"))?;
    snaps.write_record(["step", "branch", "sample", "value"])?;
    for (step, outs) in trace.snapshot_steps.iter().zip(&trace.branch_outputs) {
        for k in 0..outs.branches {
            for j in 0..outs.samples {
                snaps.write_record([
                    step.to_string(),
                    k.to_string(),
                    j.to_string(),
                    outs.get(k, j)[0].to_string(),
                ])?;
            }
        }
    }
    snaps.flush()?;

    let loss_points = trace
        .losses
        .iter()
        .enumerate()
        .map(|(s, l)| (s as f64, l.max(1e-300).log10()))
        .collect();
    export::write_text(
        &dir.join("loss.svg"),
        &export::line_chart_svg(
            &[Series {
                label: "log10 loss",
                points: loss_points,
            }],
            "Training loss",
            "step",
            "log10 loss",
        ),
    )?;
    let labels: Vec<String> = (0..m).map(|k| format!("branch {k}")).collect();
    let norm_series: Vec<Series> = (0..m)
        .map(|k| Series {
            label: &labels[k],
            points: trace
                .snapshot_steps
                .iter()
                .zip(&trace.branch_outputs)
                .map(|(s, o)| (*s as f64, o.branch_row(k).iter().map(|v| v * v).sum::<f64>().sqrt()))
                .collect(),
        })
        .collect();
    export::write_text(
        &dir.join("branch_norms.svg"),
        &export::line_chart_svg(&norm_series, "Branch response norms", "step", "‖F_k‖"),
    )?;

    let f = response_matrix(&trained, &data.samples)?;
    let split = active_branches(&f, DEFAULT_ACTIVE_FRACTION)?;
    write_branch_table(&dir.join("results.csv"), &f, &split.active)?;
    let cov = covariance(&f);
    export::write_matrix_csv(&dir.join("covariance.csv"), &cov)?;
    export::write_text(
        &dir.join("covariance.svg"),
        &export::heatmap_svg(&cov, "Branch covariance"),
    )?;
    std::fs::write(dir.join("model.json"), trained.to_json()?)?;

    let eq = equilibrium_diagnostic(&trained, &LossSpec::SquaredL2, &data)?;
    let report = ToyReport {
        task: spec.task,
        m,
        seed,
        converged_at: trace.converged_at,
        steps: trace.losses.len(),
        final_loss: trained.mean_loss(&LossSpec::SquaredL2, &data)?,
        squared_residual_sum: trainer::squared_residual_sum(&trained, &data)?,
        active: split.active,
        silent: split.silent,
        branch_norms: f.branch_norms.clone(),
        mean_zero_column_fraction: eq.mean_zero_column_fraction,
    };
    write_json(&dir.join("summary.json"), &report)?;
    Ok(report)
}

/// `branch,active,norm,v_0..v_{N-1}` per branch.
pub(crate) fn write_branch_table(path: &Path, f: &ResponseMatrix, active: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["branch".to_string(), "active".into(), "norm".into()];
    header.extend((0..f.f.ncols()).map(|j| format!("v_{j}")));
    w.write_record(&header)?;
    for k in 0..f.branches() {
        let mut row = vec![
            k.to_string(),
            active.contains(&k).to_string(),
            f.branch_norms[k].to_string(),
        ];
        row.extend(f.f.row(k).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
