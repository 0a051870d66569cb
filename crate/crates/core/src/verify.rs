//! Built-in identity suite: gradients against finite differences, the
//! distributive/collaborative factorization, and diffusion reconstruction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffkit::finite_diff_gradient;
use crate::diffusion::{diffuse, Signal, SmoothingOperator};
use crate::speclab::factorize_gradient;
use crate::{BranchArch, BranchedModel, Dataset, LossSpec, Result, Sample, Target};

pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const FACTOR_TOLERANCE: f64 = 1e-8;
pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-10;

/// Step of the finite-difference oracle.
pub const FD_STEP: f64 = 1e-6;

/// Inputs closer than this to a kink of the loss are redrawn, since central
/// differences are not an oracle there.
pub const KINK_MARGIN: f64 = 1e-4;

/// A seeded random model together with a loss and a small batch.
#[derive(Debug, Clone)]
pub struct Triple {
    pub model: BranchedModel,
    pub loss: LossSpec,
    pub batch: Dataset,
}

/// Cycles through perceptron/MLP and both losses as `seed` advances.
pub fn random_triple(seed: u64) -> Result<Triple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=6);
    let n = rng.random_range(1..=5);
    let (arch, loss) = match seed % 4 {
        0 => (BranchArch::scalar_perceptron(), LossSpec::SquaredL2),
        1 => {
            let d = rng.random_range(1..=3);
            let o = rng.random_range(1..=3);
            let h = rng.random_range(2..=5);
            (BranchArch::mlp(&[d, h, o]), LossSpec::SquaredL2)
        }
        2 => {
            let d = rng.random_range(1..=3);
            let h = rng.random_range(2..=5);
            (BranchArch::mlp(&[d, h, 1]).with_clamp(true), LossSpec::SquaredL2)
        }
        _ => {
            let c = rng.random_range(2..=4);
            let d = rng.random_range(1..=3);
            let h1 = rng.random_range(2..=4);
            let h2 = rng.random_range(2..=4);
            (
                BranchArch::mlp(&[d, h1, h2, c]).with_clamp(true),
                LossSpec::ClampedCrossEntropy { classes: c },
            )
        }
    };
    let model = BranchedModel::init(arch, m, rng.random())?;
    let d = model.arch().input_dim();
    let o = model.output_dim();
    let mut samples = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = Sample::new(Vec::new());
        for _ in 0..1000 {
            x = Sample::new((0..d).map(|_| rng.random_range(-1.5..1.5)).collect());
            if model.kink_distance(&x)? >= KINK_MARGIN {
                break;
            }
        }
        samples.push(x);
        targets.push(match loss {
            LossSpec::SquaredL2 => Target::Values((0..o).map(|_| rng.random_range(-1.0..1.0)).collect()),
            LossSpec::ClampedCrossEntropy { classes } => Target::Class(rng.random_range(0..classes)),
        });
    }
    Ok(Triple {
        model,
        loss,
        batch: Dataset::new(samples, targets)?,
    })
}

/// `‖g_ad − g_fd‖ / ‖g_fd‖`, or the absolute difference when both vanish.
pub fn gradient_error(t: &Triple) -> Result<f64> {
    let ad = t.model.loss_gradient(&t.loss, &t.batch)?.gradient;
    let fd = finite_diff_gradient(&t.model, &t.loss, &t.batch, FD_STEP)?;
    let diff = ad
        .entries()
        .iter()
        .zip(fd.entries())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = ad.norm().max(fd.norm());
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// Largest per-entry gap between the assembled factors and the direct
/// gradient over every sample of the batch.
pub fn factorization_error(t: &Triple) -> Result<f64> {
    let mut worst = 0.0f64;
    for (x, y) in t.batch.iter() {
        let f = factorize_gradient(&t.model, &t.loss, x, y)?;
        worst = worst.max(f.max_assembly_error());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReconstructionCheck {
    /// `‖x − (Σφ + R)‖∞ / ‖x‖∞`.
    pub relative_error: f64,
    /// `‖R − (u^M + t_M·p(u^M))‖∞ / max(‖x‖∞, 1)`.
    pub residual_error: f64,
}

/// Random 1-D or 2-D signal, operator, stable step and band count.
pub fn random_diffusion(seed: u64) -> Result<(Signal, SmoothingOperator, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signal = if rng.random_bool(0.5) {
        let n = rng.random_range(1..=64);
        Signal::line((0..n).map(|_| rng.random_range(-5.0..5.0)).collect())
    } else {
        let w = rng.random_range(1..=12);
        let h = rng.random_range(1..=12);
        Signal::image(w, h, (0..w * h).map(|_| rng.random_range(-5.0..5.0)).collect())?
    };
    let op = if rng.random_bool(0.5) {
        SmoothingOperator::LinearLaplacian {
            weight: rng.random_range(0.1..2.0),
        }
    } else {
        SmoothingOperator::BoxBlurResidual {
            radius: rng.random_range(1..=3),
        }
    };
    let dt = op.max_stable_dt(signal.is_1d()) * rng.random_range(0.1..1.0);
    let bands = rng.random_range(1..=8);
    Ok((signal, op, dt, bands))
}

pub fn reconstruction_check(seed: u64) -> Result<ReconstructionCheck> {
    let (x, op, dt, bands) = random_diffusion(seed)?;
    let dec = diffuse(&x, &op, dt, bands)?;
    let u_m = &dec.trajectory[bands];
    let p = op.apply(u_m, x.width, x.height)?;
    let t_m = bands as f64 * dt;
    let scale = x.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let residual_error = u_m
        .iter()
        .zip(&p)
        .zip(&dec.residual)
        .fold(0.0f64, |m, ((u, p), r)| m.max((u + t_m * p - r).abs()))
        / scale;
    Ok(ReconstructionCheck {
        relative_error: dec.reconstruction_error(),
        residual_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub passed: usize,
    pub failed: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckSummary {
    fn tally(name: &str, tolerance: f64, values: impl IntoIterator<Item = Result<f64>>) -> Self {
        let mut s = Self {
            name: name.into(),
            passed: 0,
            failed: 0,
            worst: 0.0,
            tolerance,
        };
        for v in values {
            match v {
                Ok(e) if e < tolerance => {
                    s.passed += 1;
                    s.worst = s.worst.max(e);
                }
                Ok(e) => {
                    s.failed += 1;
                    s.worst = s.worst.max(e);
                }
                Err(_) => {
                    s.failed += 1;
                    s.worst = f64::INFINITY;
                }
            }
        }
        s
    }

    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

/// Runs `cases` seeded cases of every identity starting at `seed`.
pub fn identity_suite(seed: u64, cases: usize) -> Vec<CheckSummary> {
    let seeds: Vec<u64> = (0..cases as u64).map(|i| seed.wrapping_add(i)).collect();
    let triples: Vec<Result<Triple>> = seeds.iter().map(|&s| random_triple(s)).collect();
    let recon: Vec<Result<ReconstructionCheck>> =
        seeds.iter().map(|&s| reconstruction_check(s)).collect();
    vec![
        CheckSummary::tally(
            "gradient_vs_fd",
            GRADIENT_TOLERANCE,
            triples.iter().map(|t| t.as_ref().map_err(clone_err).and_then(gradient_error)),
        ),
        CheckSummary::tally(
            "factorization",
            FACTOR_TOLERANCE,
            triples.iter().map(|t| t.as_ref().map_err(clone_err).and_then(factorization_error)),
        ),
        CheckSummary::tally(
            "diffusion_reconstruction",
            RECONSTRUCTION_TOLERANCE,
            recon.iter().map(|r| match r {
                Ok(r) => Ok(r.relative_error.max(r.residual_error)),
                Err(e) => Err(clone_err(e)),
            }),
        ),
    ]
}

fn clone_err(e: &crate::Error) -> crate::Error {
    crate::Error::Inconsistent(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_cover_both_losses_and_kinds() {
        let kinds: Vec<_> = (0..4)
            .map(|s| {
                let t = random_triple(s).unwrap();
                (t.model.arch().branch_param_count() > 2, t.loss.output_dim().is_some())
            })
            .collect();
        assert!(kinds.contains(&(false, false)));
        assert!(kinds.contains(&(true, false)));
        assert!(kinds.contains(&(true, true)));
    }

    #[test]
    fn triples_are_seeded() {
        let a = random_triple(9).unwrap();
        let b = random_triple(9).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.batch, b.batch);
    }

    #[test]
    fn small_suite_passes() {
        for s in identity_suite(100, 12) {
            assert!(s.ok(), "{s:?}");
        }
    }
}
