//! Per-sample losses and their derivative with respect to the model output.
//!
//! Sign convention: losses are nonnegative and `collaborative_gradient`
//! returns `dL/df`, so gradient descent moves along its negation.

use serde::{Deserialize, Serialize};

use crate::diffkit::{softmax, NodeId, Tape};
use crate::{Error, Result, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    /// `½‖y − f‖²`.
    SquaredL2,
    /// `−Σ p log softmax(f)` with `p = softmax(±1 class indicator)`.
    ClampedCrossEntropy { classes: usize },
}

impl LossSpec {
    pub fn output_dim(&self) -> Option<usize> {
        match self {
            LossSpec::SquaredL2 => None,
            LossSpec::ClampedCrossEntropy { classes } => Some(*classes),
        }
    }
}

/// Logits of the clamped target: `+1` for `class`, `−1` elsewhere.
pub fn target_logits(classes: usize, class: usize) -> Result<Vec<f64>> {
    if class >= classes {
        return Err(Error::ClassIndex { class, classes });
    }
    Ok((0..classes)
        .map(|c| if c == class { 1.0 } else { -1.0 })
        .collect())
}

/// Target distribution for the clamped cross-entropy protocol.
pub fn target_pdf(classes: usize, class: usize) -> Result<Vec<f64>> {
    Ok(softmax(&target_logits(classes, class)?))
}

fn regression_target<'a>(f: &[f64], y: &'a Target) -> Result<&'a [f64]> {
    let y = y
        .values()
        .ok_or_else(|| Error::InvalidArgument("squared L2 needs a value target".into()))?;
    if y.len() != f.len() {
        return Err(Error::Shape(format!(
            "output of length {} against target of length {}",
            f.len(),
            y.len()
        )));
    }
    Ok(y)
}

fn class_target(f: &[f64], classes: usize, y: &Target) -> Result<usize> {
    if f.len() != classes {
        return Err(Error::Shape(format!(
            "{} logits for {classes} classes",
            f.len()
        )));
    }
    match y {
        Target::Class(c) if *c < classes => Ok(*c),
        Target::Class(c) => Err(Error::ClassIndex { class: *c, classes }),
        Target::Values(_) => Err(Error::InvalidArgument(
            "cross-entropy needs a class target".into(),
        )),
    }
}

fn log_softmax(f: &[f64]) -> Vec<f64> {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + f.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    f.iter().map(|v| v - lse).collect()
}

pub fn loss(spec: &LossSpec, f: &[f64], y: &Target) -> Result<f64> {
    match spec {
        LossSpec::SquaredL2 => {
            let y = regression_target(f, y)?;
            Ok(0.5 * f.iter().zip(y).map(|(f, y)| (y - f) * (y - f)).sum::<f64>())
        }
        LossSpec::ClampedCrossEntropy { classes } => {
            let class = class_target(f, *classes, y)?;
            let p = target_pdf(*classes, class)?;
            Ok(-p
                .iter()
                .zip(log_softmax(f))
                .map(|(p, ls)| p * ls)
                .sum::<f64>())
        }
    }
}

/// `dL/df`, the factor shared by every branch.
pub fn collaborative_gradient(spec: &LossSpec, f: &[f64], y: &Target) -> Result<Vec<f64>> {
    let mut out = vec![0.0; f.len()];
    loss_and_collab_into(spec, f, y, &mut out)?;
    Ok(out)
}

/// Loss value with `dL/df` written into `out`.
pub(crate) fn loss_and_collab_into(
    spec: &LossSpec,
    f: &[f64],
    y: &Target,
    out: &mut [f64],
) -> Result<f64> {
    match spec {
        LossSpec::SquaredL2 => {
            let y = regression_target(f, y)?;
            let mut total = 0.0;
            for ((o, f), y) in out.iter_mut().zip(f).zip(y) {
                let r = f - y;
                *o = r;
                total += r * r;
            }
            Ok(0.5 * total)
        }
        LossSpec::ClampedCrossEntropy { classes } => {
            let class = class_target(f, *classes, y)?;
            let p = target_pdf(*classes, class)?;
            let s = softmax(f);
            for ((o, s), p) in out.iter_mut().zip(&s).zip(&p) {
                *o = s - p;
            }
            Ok(-p
                .iter()
                .zip(log_softmax(f))
                .map(|(p, ls)| p * ls)
                .sum::<f64>())
        }
    }
}

/// `d²L/df²` as a row-major `C × C` matrix.
pub fn output_curvature(spec: &LossSpec, f: &[f64]) -> Vec<f64> {
    let c = f.len();
    match spec {
        LossSpec::SquaredL2 => (0..c * c)
            .map(|i| if i / c == i % c { 1.0 } else { 0.0 })
            .collect(),
        LossSpec::ClampedCrossEntropy { .. } => {
            let s = softmax(f);
            (0..c * c)
                .map(|i| {
                    let (a, b) = (i / c, i % c);
                    if a == b {
                        s[a] - s[a] * s[b]
                    } else {
                        -s[a] * s[b]
                    }
                })
                .collect()
        }
    }
}

/// Records the per-sample loss of output node `f` on `tape`.
pub fn record_loss(tape: &mut Tape<'_>, spec: &LossSpec, f: NodeId, y: &Target) -> Result<NodeId> {
    let fv = tape.value(f)?.to_vec();
    match spec {
        LossSpec::SquaredL2 => {
            let y = regression_target(&fv, y)?;
            let target = tape.constant(y.to_vec());
            let diff = tape.sub(f, target)?;
            let sq = tape.square(diff)?;
            let total = tape.sum(sq)?;
            tape.scale(total, 0.5)
        }
        LossSpec::ClampedCrossEntropy { classes } => {
            let class = class_target(&fv, *classes, y)?;
            let p = tape.constant(target_pdf(*classes, class)?);
            let s = tape.softmax(f)?;
            let log_s = tape.log(s)?;
            let weighted = tape.mul(p, log_s)?;
            let total = tape.sum(weighted)?;
            tape.scale(total, -1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::central_difference;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn squared_l2_values() {
        let y = Target::Values(vec![1.0]);
        assert_eq!(loss(&LossSpec::SquaredL2, &[1.0], &y).unwrap(), 0.0);
        assert_eq!(loss(&LossSpec::SquaredL2, &[0.5], &y).unwrap(), 0.125);
        assert_eq!(
            collaborative_gradient(&LossSpec::SquaredL2, &[1.0], &y).unwrap(),
            vec![0.0]
        );
        assert_eq!(
            collaborative_gradient(&LossSpec::SquaredL2, &[0.25], &y).unwrap(),
            vec![-0.75]
        );
    }

    #[test]
    fn clamped_target_pdf_for_ten_classes() {
        let p = target_pdf(10, 3).unwrap();
        let e2 = 2f64.exp();
        assert_relative_eq!(p[3], e2 / (e2 + 9.0), epsilon = 1e-12);
        assert!((p[3] - 0.450853).abs() < 1e-6);
        for (c, pc) in p.iter().enumerate().filter(|(c, _)| *c != 3) {
            assert_relative_eq!(*pc, 1.0 / (e2 + 9.0), epsilon = 1e-12);
            assert!((pc - 0.061016).abs() < 1e-6, "class {c}");
        }
    }

    #[test]
    fn clamped_target_logits_are_a_fixed_point() {
        let spec = LossSpec::ClampedCrossEntropy { classes: 4 };
        let f = target_logits(4, 2).unwrap();
        let g = collaborative_gradient(&spec, &f, &Target::Class(2)).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn argument_errors() {
        let ce = LossSpec::ClampedCrossEntropy { classes: 3 };
        assert!(matches!(
            loss(&ce, &[0.0; 3], &Target::Class(3)),
            Err(Error::ClassIndex { .. })
        ));
        assert!(matches!(
            loss(&ce, &[0.0; 2], &Target::Class(0)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            loss(&LossSpec::SquaredL2, &[0.0; 2], &Target::Values(vec![1.0])),
            Err(Error::Shape(_))
        ));
        assert!(loss(&LossSpec::SquaredL2, &[0.0], &Target::Class(0)).is_err());
        assert!(target_pdf(3, 5).is_err());
    }

    #[test]
    fn curvature_matches_fd_of_collaborative_gradient() {
        let spec = LossSpec::ClampedCrossEntropy { classes: 3 };
        let f = [0.3, -0.8, 0.5];
        let target = Target::Class(1);
        let h = output_curvature(&spec, &f);
        for col in 0..3 {
            let mut plus = f;
            let mut minus = f;
            plus[col] += 1e-6;
            minus[col] -= 1e-6;
            let gp = collaborative_gradient(&spec, &plus, &target).unwrap();
            let gm = collaborative_gradient(&spec, &minus, &target).unwrap();
            for row in 0..3 {
                let fd = (gp[row] - gm[row]) / 2e-6;
                assert!((fd - h[row * 3 + col]).abs() < 1e-8);
            }
        }
        assert_eq!(output_curvature(&LossSpec::SquaredL2, &[0.0, 0.0]), vec![1.0, 0.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn target_pdf_is_a_distribution(classes in 1usize..40, pick in 0usize..40) {
            let class = pick % classes;
            let p = target_pdf(classes, class).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn squared_l2_nonnegative(f in prop::collection::vec(-5.0..5.0f64, 3), y in prop::collection::vec(-5.0..5.0f64, 3)) {
            let l = loss(&LossSpec::SquaredL2, &f, &Target::Values(y.clone())).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, f == y);
        }

        #[test]
        fn collaborative_gradient_matches_fd_l2(f in prop::collection::vec(-3.0..3.0f64, 1..5), seed in any::<u64>()) {
            let y: Vec<f64> = f.iter().enumerate().map(|(i, v)| v + ((seed >> i) % 7) as f64 * 0.3 - 1.0).collect();
            let target = Target::Values(y);
            let g = collaborative_gradient(&LossSpec::SquaredL2, &f, &target).unwrap();
            let fd = central_difference(&f, 1e-5, |p| loss(&LossSpec::SquaredL2, p, &target)).unwrap();
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-2));
            }
        }

        #[test]
        fn collaborative_gradient_matches_fd_ce(f in prop::collection::vec(-1.0..1.0f64, 2..8), pick in 0usize..8) {
            let classes = f.len();
            let spec = LossSpec::ClampedCrossEntropy { classes };
            let target = Target::Class(pick % classes);
            let g = collaborative_gradient(&spec, &f, &target).unwrap();
            let fd = central_difference(&f, 1e-5, |p| loss(&spec, p, &target)).unwrap();
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-2));
            }
        }
    }
}
