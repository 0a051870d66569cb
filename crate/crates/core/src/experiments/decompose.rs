//! Branched autoencoding of synthetic images on top of a diffusion residual:
//! `f(x) = R + Σₖ vₖ(φₖ)`, trained to reproduce `x`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{prepare_dir, trial_seed, with_jobs, write_json, ExperimentSpec};
use crate::branchnet::{BranchArch, BranchedModel, ResidualMode};
use crate::diffusion::{diffusion_samples, residual_for_model, Signal, SmoothingOperator};
use crate::export;
use crate::speclab::{active_branches, covariance, response_matrix, DEFAULT_ACTIVE_FRACTION};
use crate::trainer::{train, TrainConfig};
use crate::{Dataset, Error, LossSpec, Result, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeOptions {
    pub images: usize,
    /// Side length of the square images.
    pub size: usize,
    pub hidden: Vec<usize>,
    pub operator: SmoothingOperator,
    pub dt: f64,
    pub ramp_amplitude: f64,
    pub texture_amplitude: f64,
    pub dot_amplitude: f64,
    pub dots: usize,
    /// Replace every image by a constant one.
    pub constant: bool,
    /// Images exported as PGM.
    pub export_images: usize,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        Self {
            images: 64,
            size: 16,
            hidden: vec![64],
            operator: SmoothingOperator::LinearLaplacian { weight: 1.0 },
            dt: 0.2,
            ramp_amplitude: 1.0,
            texture_amplitude: 0.3,
            dot_amplitude: 1.0,
            dots: 3,
            constant: false,
            export_images: 4,
        }
    }
}

/// An image and the three parts it is the sum of.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentImages {
    pub ramp: Vec<f64>,
    pub texture: Vec<f64>,
    pub dots: Vec<f64>,
    pub image: Vec<f64>,
}

/// Smooth ramp plus periodic texture plus sparse dots, per image.
pub fn synthetic_images(opts: &DecomposeOptions, seed: u64) -> Result<Vec<ComponentImages>> {
    let n = opts.size;
    if n == 0 || opts.images == 0 {
        return Err(Error::InvalidArgument("need at least one non-empty image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = n * n;
    Ok((0..opts.images)
        .map(|_| {
            if opts.constant {
                let c: f64 = rng.random_range(-1.0..1.0);
                return ComponentImages {
                    ramp: vec![c; px],
                    texture: vec![0.0; px],
                    dots: vec![0.0; px],
                    image: vec![c; px],
                };
            }
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let offset: f64 = rng.random_range(-0.5..0.5);
            let (fx, fy) = (rng.random_range(2..5) as f64, rng.random_range(2..5) as f64);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut ramp = vec![0.0; px];
            let mut texture = vec![0.0; px];
            for y in 0..n {
                for x in 0..n {
                    let (u, v) = (x as f64 / n as f64 - 0.5, y as f64 / n as f64 - 0.5);
                    ramp[y * n + x] = opts.ramp_amplitude * (u * angle.cos() + v * angle.sin() + offset);
                    texture[y * n + x] = opts.texture_amplitude
                        * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
                }
            }
            let mut dots = vec![0.0; px];
            for _ in 0..opts.dots {
                dots[rng.random_range(0..px)] = opts.dot_amplitude;
            }
            let image = (0..px).map(|i| ramp[i] + texture[i] + dots[i]).collect();
            ComponentImages {
                ramp,
                texture,
                dots,
                image,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct DecomposeReport {
    pub branches: usize,
    pub images: usize,
    pub params: usize,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    /// Mean over images of `‖f(x) − x‖ / ‖x‖`.
    pub mean_relative_error: f64,
    pub max_relative_error: f64,
    /// Same ratio with the residual alone, `‖R − x‖ / ‖x‖`.
    pub residual_only_error: f64,
    /// Largest deviation of `R + Σₖ vₖ` summed in index order from `f`.
    pub sum_check_error: f64,
    pub active: Vec<usize>,
    pub silent: Vec<usize>,
    pub branch_norms: Vec<f64>,
    /// `[k]` = mean `|cos|` of branch `k`'s output with the ramp, texture
    /// and dots parts (each mean-removed).
    pub alignment: Vec<[f64; 3]>,
    pub band_norms: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn abs_cosine_centered(a: &[f64], b: &[f64]) -> f64 {
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na > 0.0 && nb > 0.0 {
        (dot / (na * nb).sqrt()).abs()
    } else {
        0.0
    }
}

pub fn decomposition_arch(opts: &DecomposeOptions) -> BranchArch {
    let px = opts.size * opts.size;
    let mut widths = vec![px];
    widths.extend(&opts.hidden);
    widths.push(px);
    BranchArch::mlp(&widths)
}

pub fn run_decompose(spec: &ExperimentSpec) -> Result<DecomposeReport> {
    spec.validate()?;
    let m = spec.single_m()?;
    let opts = &spec.decompose;
    let parts = synthetic_images(opts, spec.seed)?;
    let signals = parts
        .iter()
        .map(|p| Signal::image(opts.size, opts.size, p.image.clone()))
        .collect::<Result<Vec<_>>>()?;

    let seed = trial_seed(spec.seed, m, 0);
    let model = BranchedModel::init(decomposition_arch(opts), m, seed)?
        .with_residual_mode(ResidualMode::DiffusionResidual);
    let cfg = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let (decs, data, trained, trace) = with_jobs(spec.jobs, || -> Result<_> {
        let decs = residual_for_model(&signals, &opts.operator, opts.dt, m)?;
        let samples = diffusion_samples(&decs, m)?;
        let targets = parts.iter().map(|p| Target::Values(p.image.clone())).collect();
        let data = Dataset::new(samples, targets)?;
        let (trained, trace) = train(&model, &data, &LossSpec::SquaredL2, &cfg)?;
        Ok((decs, data, trained, trace))
    })??;

    let outputs = trained.forward_all(&data.samples)?;
    let mut rel = Vec::with_capacity(parts.len());
    let mut residual_rel = 0.0;
    let mut sum_check: f64 = 0.0;
    let mut alignment = vec![[0.0; 3]; m];
    let mut recon = Vec::with_capacity(parts.len());
    for (j, (sample, p)) in data.samples.iter().zip(&parts).enumerate() {
        let f = trained.forward(sample)?;
        let r = sample.residual.as_deref().unwrap_or_default();
        let xn = norm(&p.image).max(f64::MIN_POSITIVE);
        let diff: Vec<f64> = f.iter().zip(&p.image).map(|(a, b)| a - b).collect();
        rel.push(norm(&diff) / xn);
        let rdiff: Vec<f64> = r.iter().zip(&p.image).map(|(a, b)| a - b).collect();
        residual_rel += norm(&rdiff) / xn;
        for i in 0..f.len() {
            let naive = r[i] + (0..m).map(|k| outputs.get(k, j)[i]).sum::<f64>();
            sum_check = sum_check.max((naive - f[i]).abs());
        }
        for (k, row) in alignment.iter_mut().enumerate() {
            let v = outputs.get(k, j);
            row[0] += abs_cosine_centered(v, &p.ramp);
            row[1] += abs_cosine_centered(v, &p.texture);
            row[2] += abs_cosine_centered(v, &p.dots);
        }
        recon.push(f);
    }
    let n = parts.len() as f64;
    for row in &mut alignment {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    let band_norms = (0..m)
        .map(|k| decs.iter().map(|d| norm(&d.phis[k])).sum::<f64>() / n)
        .collect();

    let f = response_matrix(&trained, &data.samples)?;
    let split = active_branches(&f, DEFAULT_ACTIVE_FRACTION)?;
    let cov = covariance(&f);
    let report = DecomposeReport {
        branches: m,
        images: parts.len(),
        params: trained.params().len(),
        seed,
        steps: trace.losses.len(),
        final_loss: trained.mean_loss(&LossSpec::SquaredL2, &data)?,
        mean_relative_error: rel.iter().sum::<f64>() / n,
        max_relative_error: rel.iter().copied().fold(0.0, f64::max),
        residual_only_error: residual_rel / n,
        sum_check_error: sum_check,
        active: split.active.clone(),
        silent: split.silent.clone(),
        branch_norms: f.branch_norms.clone(),
        alignment: alignment.clone(),
        band_norms,
    };

    let dir = &spec.output_dir;
    prepare_dir(dir)?;
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    w.write_record(["branch", "active", "norm", "align_ramp", "align_texture", "align_dots"])?;
    for k in 0..m {
        w.write_record([
            k.to_string(),
            split.active.contains(&k).to_string(),
            f.branch_norms[k].to_string(),
            alignment[k][0].to_string(),
            alignment[k][1].to_string(),
            alignment[k][2].to_string(),
        ])?;
    }
    w.flush()?;
    export::write_matrix_csv(&dir.join("covariance.csv"), &cov)?;
    export::write_text(&dir.join("covariance.svg"), &export::heatmap_svg(&cov, "Branch covariance"))?;
    let align = DMatrix::from_fn(m, 3, |k, c| alignment[k][c]);
    export::write_text(
        &dir.join("alignment.svg"),
        &export::heatmap_svg(&align, "Branch alignment with ramp, texture, dots"),
    )?;
    export::write_text(
        &dir.join("loss.svg"),
        &export::line_chart_svg(
            &[export::Series {
                label: "log10 loss",
                points: trace
                    .losses
                    .iter()
                    .enumerate()
                    .map(|(s, l)| (s as f64, l.max(1e-300).log10()))
                    .collect(),
            }],
            "Training loss",
            "step",
            "log10 loss",
        ),
    )?;
    let images_dir = dir.join("images");
    prepare_dir(&images_dir)?;
    for j in 0..opts.export_images.min(parts.len()) {
        write_image_set(&images_dir, j, opts.size, &parts[j], &data, &recon[j], &outputs, m)?;
        decs[j].save_pgm(&images_dir, &format!("img{j}"))?;
    }
    write_json(&dir.join("summary.json"), &report)?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn write_image_set(
    dir: &Path,
    j: usize,
    size: usize,
    parts: &ComponentImages,
    data: &Dataset,
    recon: &[f64],
    outputs: &crate::branchnet::BranchOutputs,
    m: usize,
) -> Result<()> {
    let put = |name: String, v: &[f64]| export::write_pgm(&dir.join(name), size, size, v);
    put(format!("img{j}_x.pgm"), &parts.image)?;
    put(format!("img{j}_f.pgm"), recon)?;
    if let Some(r) = &data.samples[j].residual {
        put(format!("img{j}_R.pgm"), r)?;
    }
    for k in 0..m {
        put(format!("img{j}_branch{k}.pgm"), outputs.get(k, j))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::ExperimentKind;

    #[test]
    fn images_are_sums_of_parts() {
        let opts = DecomposeOptions {
            images: 3,
            ..DecomposeOptions::default()
        };
        let imgs = synthetic_images(&opts, 2).unwrap();
        assert_eq!(imgs.len(), 3);
        for p in &imgs {
            assert_eq!(p.image.len(), 256);
            for i in 0..256 {
                assert_eq!(p.image[i], p.ramp[i] + p.texture[i] + p.dots[i]);
            }
            assert!(p.dots.iter().filter(|&&d| d != 0.0).count() <= 3);
        }
        assert_eq!(imgs, synthetic_images(&opts, 2).unwrap());
    }

    #[test]
    fn constant_images_need_no_branches() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::for_kind(ExperimentKind::Decompose);
        spec.decompose.constant = true;
        spec.decompose.images = 4;
        spec.decompose.size = 6;
        spec.decompose.hidden = vec![4];
        spec.train.max_steps = 20;
        spec.output_dir = dir.path().to_path_buf();
        let report = run_decompose(&spec).unwrap();
        assert_eq!(report.final_loss, 0.0);
        assert!(report.active.is_empty());
        assert_eq!(report.silent.len(), 4);
        assert!(report.mean_relative_error < 1e-12);
        assert!(dir.path().join("images/img0_x.pgm").exists());
    }

    #[test]
    fn cosine_ignores_offsets() {
        assert!((abs_cosine_centered(&[1.0, 2.0, 3.0], &[10.0, 8.0, 6.0]) - 1.0).abs() < 1e-12);
        assert_eq!(abs_cosine_centered(&[1.0, 1.0], &[0.0, 2.0]), 0.0);
    }
}
