//! Clamped cross-entropy classification of 2-D Gaussian blobs by a branched
//! MLP, with per-branch class contributions, confidence grids and Hessian
//! block metrics at initialization and after training.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::toy::correlation_stats;
use super::{prepare_dir, trial_seed, with_jobs, write_json, ExperimentSpec};
use crate::branchnet::{BranchArch, BranchOutputs, BranchedModel};
use crate::export;
use crate::speclab::{
    active_branches, covariance, hessian, response_matrix, HessianReport, DEFAULT_ACTIVE_FRACTION,
    MAX_HESSIAN_PARAMS,
};
use crate::trainer::{train, TrainConfig};
use crate::{Dataset, Error, LossSpec, Result, Sample, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyOptions {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Distance of each blob center from the origin.
    pub radius: f64,
    /// Standard deviation of each blob.
    pub spread: f64,
    /// Hidden widths of every branch MLP.
    pub hidden: Vec<usize>,
    pub hessian: bool,
    /// Training samples (evenly strided) used for the Hessian.
    pub hessian_samples: usize,
    /// Fraction of test samples listed per branch in `topq.csv`.
    pub top_fraction: f64,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 200,
            test_per_class: 100,
            radius: 0.1,
            spread: 0.02,
            hidden: vec![16],
            hessian: true,
            hessian_samples: 200,
            top_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlobData {
    pub train: Dataset,
    pub test: Dataset,
}

fn blob_set(
    opts: &ClassifyOptions,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let noise = Normal::new(0.0, opts.spread)
        .map_err(|e| Error::InvalidArgument(format!("blob spread: {e}")))?;
    let mut samples = Vec::with_capacity(opts.classes * per_class);
    let mut targets = Vec::with_capacity(opts.classes * per_class);
    for c in 0..opts.classes {
        let angle = std::f64::consts::TAU * c as f64 / opts.classes as f64 + std::f64::consts::FRAC_PI_4;
        let (cx, cy) = (opts.radius * angle.cos(), opts.radius * angle.sin());
        for _ in 0..per_class {
            samples.push(Sample::new(vec![cx + noise.sample(rng), cy + noise.sample(rng)]));
            targets.push(Target::Class(c));
        }
    }
    Dataset::new(samples, targets)
}

/// Blobs centered on a circle, train then test drawn from one seeded stream.
pub fn blobs(opts: &ClassifyOptions, seed: u64) -> Result<BlobData> {
    if opts.classes < 2 {
        return Err(Error::InvalidArgument("classification needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(BlobData {
        train: blob_set(opts, opts.per_class, &mut rng)?,
        test: blob_set(opts, opts.test_per_class, &mut rng)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HessianSummary {
    pub params: usize,
    pub h: f64,
    pub off_block_ratio: f64,
    pub off_block_max_ratio: f64,
    pub first_layer_off_block_ratio: f64,
    pub asymmetry: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifyReport {
    pub branches: usize,
    pub classes: usize,
    pub params: usize,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub active: Vec<usize>,
    pub silent: Vec<usize>,
    pub mean_abs_offdiag_corr: f64,
    pub hessian_init: Option<HessianSummary>,
    pub hessian_final: Option<HessianSummary>,
    /// `[k][c]`: mean logit of branch `k` for class `c` over test samples of
    /// class `c`.
    pub class_contribution: Vec<Vec<f64>>,
}

fn class_of(t: &Target) -> Result<usize> {
    match t {
        Target::Class(c) => Ok(*c),
        Target::Values(_) => Err(Error::InvalidArgument("expected class targets".into())),
    }
}

pub fn accuracy(model: &BranchedModel, data: &Dataset) -> Result<f64> {
    let mut correct = 0;
    for (sample, target) in data.iter() {
        let f = model.forward(sample)?;
        let pred = f
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        correct += (pred == class_of(target)?) as usize;
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Branch `k`'s logit for the true class minus its mean logit for the other
/// classes, per sample: an `N × M` grid.
pub fn confidence_grid(outputs: &BranchOutputs, data: &Dataset) -> Result<DMatrix<f64>> {
    let c = outputs.dim;
    if c < 2 {
        return Err(Error::InvalidArgument("confidence needs at least two classes".into()));
    }
    let mut grid = DMatrix::zeros(outputs.samples, outputs.branches);
    for (j, target) in data.targets.iter().enumerate() {
        let y = class_of(target)?;
        for k in 0..outputs.branches {
            let v = outputs.get(k, j);
            let others = (v.iter().sum::<f64>() - v[y]) / (c - 1) as f64;
            grid[(j, k)] = v[y] - others;
        }
    }
    Ok(grid)
}

/// `[k][c]` mean of `v_k(x)_c` over samples of class `c`.
pub fn class_contribution(outputs: &BranchOutputs, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let c = outputs.dim;
    let mut sums = vec![vec![0.0; c]; outputs.branches];
    let mut counts = vec![0usize; c];
    for (j, target) in data.targets.iter().enumerate() {
        let y = class_of(target)?;
        if y >= c {
            return Err(Error::ClassIndex { class: y, classes: c });
        }
        counts[y] += 1;
        for (k, row) in sums.iter_mut().enumerate() {
            row[y] += outputs.get(k, j)[y];
        }
    }
    for row in &mut sums {
        for (v, n) in row.iter_mut().zip(&counts) {
            *v /= (*n).max(1) as f64;
        }
    }
    Ok(sums)
}

fn summarize(report: &HessianReport, first_layer: &[usize]) -> Result<HessianSummary> {
    Ok(HessianSummary {
        params: report.matrix.nrows(),
        h: report.h,
        off_block_ratio: report.off_block_ratio,
        off_block_max_ratio: report.off_block_max_ratio,
        first_layer_off_block_ratio: report.restricted(first_layer)?.off_block_ratio,
        asymmetry: report.asymmetry,
    })
}

fn hessian_subset(data: &Dataset, count: usize) -> Dataset {
    let n = data.len();
    let count = count.clamp(1, n);
    let idx: Vec<usize> = (0..count).map(|i| i * n / count).collect();
    data.subset(&idx)
}

pub fn classifier_arch(opts: &ClassifyOptions) -> BranchArch {
    let mut widths = vec![2];
    widths.extend(&opts.hidden);
    widths.push(opts.classes);
    BranchArch::mlp(&widths).with_clamp(true)
}

fn hessian_blocks(
    model: &BranchedModel,
    loss: &LossSpec,
    data: &Dataset,
    opts: &ClassifyOptions,
) -> Result<Option<HessianReport>> {
    if !opts.hessian || model.params().len() > MAX_HESSIAN_PARAMS {
        return Ok(None);
    }
    hessian(model, loss, &hessian_subset(data, opts.hessian_samples), None).map(Some)
}

pub fn run_classify(spec: &ExperimentSpec) -> Result<ClassifyReport> {
    spec.validate()?;
    let m = spec.single_m()?;
    let opts = &spec.classify;
    let data = blobs(opts, spec.seed)?;
    let arch = classifier_arch(opts);
    if arch.output_dim() != opts.classes {
        return Err(Error::Config("branch output width must equal the class count".into()));
    }
    let loss = LossSpec::ClampedCrossEntropy { classes: opts.classes };
    let seed = trial_seed(spec.seed, m, 0);
    let model = BranchedModel::init(arch, m, seed)?;
    let first_layer = model.first_layer_indices();

    let (trained, trace, h_init, h_final) = with_jobs(spec.jobs, || -> Result<_> {
        let h_init = hessian_blocks(&model, &loss, &data.train, opts)?;
        let cfg = TrainConfig {
            seed,
            ..spec.train.clone()
        };
        let (trained, trace) = train(&model, &data.train, &loss, &cfg)?;
        let h_final = hessian_blocks(&trained, &loss, &data.train, opts)?;
        Ok((trained, trace, h_init, h_final))
    })??;

    let outputs = trained.forward_all(&data.test.samples)?;
    let f = response_matrix(&trained, &data.test.samples)?;
    let split = active_branches(&f, DEFAULT_ACTIVE_FRACTION)?;
    let cov = covariance(&f);
    let (off_corr, _) = correlation_stats(&cov);
    let grid = confidence_grid(&outputs, &data.test)?;
    let contribution = class_contribution(&outputs, &data.test)?;

    let report = ClassifyReport {
        branches: m,
        classes: opts.classes,
        params: trained.params().len(),
        seed,
        train_accuracy: accuracy(&trained, &data.train)?,
        test_accuracy: accuracy(&trained, &data.test)?,
        final_loss: trained.mean_loss(&loss, &data.train)?,
        steps: trace.losses.len(),
        active: split.active.clone(),
        silent: split.silent.clone(),
        mean_abs_offdiag_corr: off_corr,
        hessian_init: h_init.as_ref().map(|h| summarize(h, &first_layer)).transpose()?,
        hessian_final: h_final.as_ref().map(|h| summarize(h, &first_layer)).transpose()?,
        class_contribution: contribution.clone(),
    };

    let dir = &spec.output_dir;
    prepare_dir(dir)?;
    write_branch_results(&dir.join("results.csv"), &f.branch_norms, &split.active, &contribution, &grid)?;
    write_confidence(dir, &grid, &data.test)?;
    write_top_fraction(&dir.join("topq.csv"), &grid, &data.test, opts.top_fraction)?;
    let contrib = DMatrix::from_fn(m, opts.classes, |k, c| contribution[k][c]);
    export::write_matrix_csv(&dir.join("class_contribution.csv"), &contrib)?;
    export::write_text(
        &dir.join("class_contribution.svg"),
        &export::heatmap_svg(&contrib, "Per-branch class contribution (rows: branches)"),
    )?;
    export::write_matrix_csv(&dir.join("covariance.csv"), &cov)?;
    export::write_text(&dir.join("covariance.svg"), &export::heatmap_svg(&cov, "Branch covariance"))?;
    for (name, h) in [("init", &h_init), ("final", &h_final)] {
        if let Some(h) = h {
            export::write_matrix_csv(&dir.join(format!("hessian_blocks_{name}.csv")), &h.per_pair_block_norms)?;
            export::write_text(
                &dir.join(format!("hessian_blocks_{name}.svg")),
                &export::heatmap_svg(&h.per_pair_block_norms, &format!("Hessian block norms ({name})")),
            )?;
        }
    }
    export::write_text(
        &dir.join("loss.svg"),
        &export::line_chart_svg(
            &[export::Series {
                label: "batch loss",
                points: trace.losses.iter().enumerate().map(|(s, l)| (s as f64, *l)).collect(),
            }],
            "Training loss",
            "step",
            "loss",
        ),
    )?;
    std::fs::write(dir.join("model.json"), trained.to_json()?)?;
    write_json(&dir.join("summary.json"), &report)?;
    Ok(report)
}

fn write_branch_results(
    path: &Path,
    norms: &[f64],
    active: &[usize],
    contribution: &[Vec<f64>],
    grid: &DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let classes = contribution.first().map_or(0, Vec::len);
    let mut header = vec!["branch".to_string(), "active".into(), "norm".into(), "mean_confidence".into()];
    header.extend((0..classes).map(|c| format!("contribution_{c}")));
    w.write_record(&header)?;
    for (k, norm) in norms.iter().enumerate() {
        let mean_conf = grid.column(k).mean();
        let mut row = vec![
            k.to_string(),
            active.contains(&k).to_string(),
            norm.to_string(),
            mean_conf.to_string(),
        ];
        row.extend(contribution[k].iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_confidence(dir: &Path, grid: &DMatrix<f64>, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("confidence.csv"))?;
    let mut header = vec!["sample".to_string(), "class".into()];
    header.extend((0..grid.ncols()).map(|k| format!("branch_{k}")));
    w.write_record(&header)?;
    for (j, target) in data.targets.iter().enumerate() {
        let mut row = vec![j.to_string(), class_of(target)?.to_string()];
        row.extend(grid.row(j).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    export::write_text(
        &dir.join("confidence.svg"),
        &export::heatmap_svg(grid, "Confidence (rows: samples by class, columns: branches)"),
    )
}

fn write_top_fraction(path: &Path, grid: &DMatrix<f64>, data: &Dataset, frac: f64) -> Result<()> {
    let n = grid.nrows();
    let q = ((n as f64 * frac).ceil() as usize).clamp(1, n.max(1));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["branch", "rank", "sample", "class", "confidence"])?;
    for k in 0..grid.ncols() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| grid[(b, k)].total_cmp(&grid[(a, k)]).then(a.cmp(&b)));
        for (rank, &j) in order.iter().take(q).enumerate() {
            w.write_record([
                k.to_string(),
                rank.to_string(),
                j.to_string(),
                class_of(&data.targets[j])?.to_string(),
                grid[(j, k)].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::ExperimentKind;
    use crate::trainer::TrainMode;

    fn small_opts() -> ClassifyOptions {
        ClassifyOptions {
            per_class: 30,
            test_per_class: 20,
            hessian: false,
            ..ClassifyOptions::default()
        }
    }

    #[test]
    fn blobs_are_seeded_and_labelled() {
        let a = blobs(&small_opts(), 3).unwrap();
        let b = blobs(&small_opts(), 3).unwrap();
        assert_eq!(a.train.samples, b.train.samples);
        assert_eq!(a.train.len(), 120);
        assert_eq!(a.test.len(), 80);
        assert_eq!(a.train.targets[119], Target::Class(3));
        let mut one = small_opts();
        one.classes = 1;
        assert!(blobs(&one, 0).is_err());
    }

    #[test]
    fn confidence_of_hand_built_outputs() {
        let outputs = BranchOutputs::new(1, 1, 3, vec![0.9, 0.0, -0.3]).unwrap();
        let data = Dataset::new(vec![Sample::new(vec![0.0, 0.0])], vec![Target::Class(0)]).unwrap();
        let grid = confidence_grid(&outputs, &data).unwrap();
        assert!((grid[(0, 0)] - 1.05).abs() < 1e-15);
        assert_eq!(class_contribution(&outputs, &data).unwrap()[0][0], 0.9);
    }

    #[test]
    fn single_branch_degenerates_gracefully() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::for_kind(ExperimentKind::Classify);
        spec.m_values = vec![1];
        spec.classify = small_opts();
        spec.train.max_steps = 200;
        spec.output_dir = dir.path().to_path_buf();
        let report = run_classify(&spec).unwrap();
        assert_eq!(report.active, vec![0]);
        let cov = std::fs::read_to_string(dir.path().join("covariance.csv")).unwrap();
        assert_eq!(cov.lines().count(), 1);
        assert!(dir.path().join("topq.csv").exists());
    }

    #[test]
    fn relabelled_branches_permute_metrics() {
        let opts = small_opts();
        let data = blobs(&opts, 1).unwrap();
        let loss = LossSpec::ClampedCrossEntropy { classes: 4 };
        let model = BranchedModel::init(classifier_arch(&opts), 3, 9).unwrap();
        let perm = [2, 0, 1];
        let permuted = model.permute_branches(&perm).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            max_steps: 100,
            mode: TrainMode::Sgd { batch_size: 16 },
            success_delta: None,
            snapshot_every: None,
            seed: 4,
        };
        let (a, _) = train(&model, &data.train, &loss, &cfg).unwrap();
        let (b, _) = train(&permuted, &data.train, &loss, &cfg).unwrap();
        let ca = class_contribution(&a.forward_all(&data.test.samples).unwrap(), &data.test).unwrap();
        let cb = class_contribution(&b.forward_all(&data.test.samples).unwrap(), &data.test).unwrap();
        for k in 0..3 {
            assert_eq!(cb[k], ca[perm[k]]);
        }
    }
}
