//! Explicit-Euler diffusion of a signal into band components `φₙ` and a
//! smooth residual `R`, with `x = Σ φₙ + R` holding exactly.
//!
//! With `uⁿ⁺¹ = uⁿ − dt·p(uⁿ)`, `dₙ = (uⁿ⁺¹ − uⁿ)/dt` and `tₙ = n·dt`:
//!
//! ```text
//! φₙ = tₙ (dₙ − dₙ₋₁),   n = 1..M
//! R  = u^M − t_M d_M
//! ```
//!
//! Summation by parts gives `Σ φₙ = t_M d_M − (u^M − x)`, so the bands and
//! the residual add back to `x`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{export, Error, Result, Sample};

/// A row-major `width × height` signal; a 1-D signal has `height == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Signal {
    pub fn line(data: Vec<f64>) -> Self {
        Self {
            width: data.len(),
            height: 1,
            data,
        }
    }

    pub fn image(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::Shape(format!(
                "{} values for a {width}×{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn is_1d(&self) -> bool {
        self.height == 1 || self.width == 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SmoothingOperator {
    /// `p(u) = −weight · Δu`, 5-point stencil with zero-flux boundaries.
    LinearLaplacian { weight: f64 },
    /// `p(u) = u − box(u)`, box mean over a `(2r+1)` window truncated at the
    /// border.
    BoxBlurResidual { radius: usize },
}

impl SmoothingOperator {
    pub fn apply(&self, u: &[f64], width: usize, height: usize) -> Result<Vec<f64>> {
        if width * height != u.len() {
            return Err(Error::Shape(format!(
                "{} values for a {width}×{height} grid",
                u.len()
            )));
        }
        Ok(match *self {
            SmoothingOperator::LinearLaplacian { weight } => {
                let mut out = vec![0.0; u.len()];
                for y in 0..height {
                    for x in 0..width {
                        let i = y * width + x;
                        let c = u[i];
                        let mut lap = 0.0;
                        if x > 0 {
                            lap += u[i - 1] - c;
                        }
                        if x + 1 < width {
                            lap += u[i + 1] - c;
                        }
                        if y > 0 {
                            lap += u[i - width] - c;
                        }
                        if y + 1 < height {
                            lap += u[i + width] - c;
                        }
                        out[i] = -weight * lap;
                    }
                }
                out
            }
            SmoothingOperator::BoxBlurResidual { radius } => {
                let rows = box_pass(u, width, height, radius, true);
                let blurred = box_pass(&rows, width, height, radius, false);
                u.iter().zip(&blurred).map(|(a, b)| a - b).collect()
            }
        })
    }

    /// Largest stable `dt` for explicit Euler on a grid of this shape.
    pub fn max_stable_dt(&self, one_dimensional: bool) -> f64 {
        match *self {
            SmoothingOperator::LinearLaplacian { weight } => {
                let w = weight.abs();
                let bound = if one_dimensional { 0.5 } else { 0.25 };
                if w > 0.0 {
                    bound / w
                } else {
                    f64::INFINITY
                }
            }
            SmoothingOperator::BoxBlurResidual { .. } => 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if let SmoothingOperator::LinearLaplacian { weight } = self {
            if !(weight.is_finite() && *weight >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "diffusion weight must be finite and nonnegative, got {weight}"
                )));
            }
        }
        Ok(())
    }
}

fn box_pass(u: &[f64], width: usize, height: usize, radius: usize, along_rows: bool) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    let (outer, inner) = if along_rows { (height, width) } else { (width, height) };
    let at = |o: usize, i: usize| if along_rows { o * width + i } else { i * width + o };
    for o in 0..outer {
        for i in 0..inner {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(inner - 1);
            let sum: f64 = (lo..=hi).map(|j| u[at(o, j)]).sum();
            out[at(o, i)] = sum / (hi - lo + 1) as f64;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusionDecomposition {
    pub width: usize,
    pub height: usize,
    pub phis: Vec<Vec<f64>>,
    pub residual: Vec<f64>,
    pub dt: f64,
    pub steps: usize,
    /// `u⁰ … u^{M+1}`.
    pub trajectory: Vec<Vec<f64>>,
}

impl DiffusionDecomposition {
    pub fn bands(&self) -> usize {
        self.phis.len()
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = self.residual.clone();
        for phi in &self.phis {
            for (o, v) in out.iter_mut().zip(phi) {
                *o += v;
            }
        }
        out
    }

    /// `‖x − (Σφ + R)‖∞ / ‖x‖∞`, with `x = u⁰`.
    pub fn reconstruction_error(&self) -> f64 {
        let x = &self.trajectory[0];
        let err = x
            .iter()
            .zip(self.reconstruct())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale > 0.0 {
            err / scale
        } else {
            err
        }
    }

    /// One row per grid point: `index,x,phi_1..phi_M,residual`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = vec!["index".to_string(), "x".to_string()];
        header.extend((1..=self.bands()).map(|n| format!("phi_{n}")));
        header.push("residual".into());
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.residual.len() {
            let mut row = vec![i.to_string(), self.trajectory[0][i].to_string()];
            row.extend(self.phis.iter().map(|p| p[i].to_string()));
            row.push(self.residual[i].to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Writes `{prefix}_phi_{n}.pgm` and `{prefix}_residual.pgm` into `dir`.
    pub fn save_pgm(&self, dir: &Path, prefix: &str) -> Result<()> {
        for (n, phi) in self.phis.iter().enumerate() {
            let path = dir.join(format!("{prefix}_phi_{}.pgm", n + 1));
            export::write_pgm(&path, self.width, self.height, phi)?;
        }
        export::write_pgm(
            &dir.join(format!("{prefix}_residual.pgm")),
            self.width,
            self.height,
            &self.residual,
        )
    }
}

pub fn diffuse(
    x: &Signal,
    p: &SmoothingOperator,
    dt: f64,
    bands: usize,
) -> Result<DiffusionDecomposition> {
    p.validate()?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if bands == 0 {
        return Err(Error::InvalidArgument("at least one band is required".into()));
    }
    if x.width * x.height != x.data.len() || x.is_empty() {
        return Err(Error::Shape("signal size does not match its shape".into()));
    }
    let limit = p.max_stable_dt(x.is_1d());
    if dt > limit {
        return Err(Error::InvalidArgument(format!(
            "dt = {dt} exceeds the stability limit {limit}"
        )));
    }

    let mut trajectory = Vec::with_capacity(bands + 2);
    trajectory.push(x.data.clone());
    for n in 0..=bands {
        let u = &trajectory[n];
        let pu = p.apply(u, x.width, x.height)?;
        if pu.len() != u.len() {
            return Err(Error::Shape("operator changed the signal size".into()));
        }
        let next: Vec<f64> = u.iter().zip(&pu).map(|(u, p)| u - dt * p).collect();
        trajectory.push(next);
    }
    let d: Vec<Vec<f64>> = trajectory
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| (b - a) / dt).collect())
        .collect();
    let phis = (1..=bands)
        .map(|n| {
            let t = n as f64 * dt;
            d[n].iter().zip(&d[n - 1]).map(|(a, b)| t * (a - b)).collect()
        })
        .collect();
    let t_m = bands as f64 * dt;
    let residual = trajectory[bands]
        .iter()
        .zip(&d[bands])
        .map(|(u, d)| u - t_m * d)
        .collect();
    Ok(DiffusionDecomposition {
        width: x.width,
        height: x.height,
        phis,
        residual,
        dt,
        steps: bands + 1,
        trajectory,
    })
}

/// Decomposes every input in parallel.
pub fn residual_for_model(
    inputs: &[Signal],
    p: &SmoothingOperator,
    dt: f64,
    bands: usize,
) -> Result<Vec<DiffusionDecomposition>> {
    inputs.par_iter().map(|x| diffuse(x, p, dt, bands)).collect()
}

/// Model samples with `φₖ` as the input of branch `k` and `R` as residual.
pub fn diffusion_samples(
    decompositions: &[DiffusionDecomposition],
    branches: usize,
) -> Result<Vec<Sample>> {
    decompositions
        .iter()
        .map(|d| {
            if d.bands() != branches {
                return Err(Error::Shape(format!(
                    "{} bands for a model with {branches} branches",
                    d.bands()
                )));
            }
            Ok(Sample {
                x: d.trajectory[0].clone(),
                residual: Some(d.residual.clone()),
                branch_inputs: Some(d.phis.clone()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LAP: SmoothingOperator = SmoothingOperator::LinearLaplacian { weight: 1.0 };

    #[test]
    fn constant_signal_is_all_residual() {
        for p in [LAP, SmoothingOperator::BoxBlurResidual { radius: 2 }] {
            let x = Signal::image(4, 3, vec![0.7; 12]).unwrap();
            let d = diffuse(&x, &p, 0.2, 3).unwrap();
            assert!(d.phis.iter().flatten().all(|&v| v == 0.0));
            assert_eq!(d.residual, x.data);
        }
    }

    #[test]
    fn impulse_against_brute_force_recursion() {
        let mut x = vec![0.0; 9];
        x[4] = 1.0;
        let (dt, m) = (0.1, 4);
        let d = diffuse(&Signal::line(x.clone()), &LAP, dt, m).unwrap();

        // independent recursion with the stencil written out
        let minus_lap = |u: &[f64]| -> Vec<f64> {
            (0..u.len())
                .map(|i| {
                    let left = if i == 0 { u[i] } else { u[i - 1] };
                    let right = if i + 1 == u.len() { u[i] } else { u[i + 1] };
                    -(left - 2.0 * u[i] + right)
                })
                .collect()
        };
        let mut u = x.clone();
        let mut states = vec![u.clone()];
        for _ in 0..=m {
            let p = minus_lap(&u);
            u = u.iter().zip(&p).map(|(a, b)| a - dt * b).collect();
            states.push(u.clone());
        }
        for (a, b) in d.trajectory.iter().zip(&states) {
            for (p, q) in a.iter().zip(b) {
                assert!((p - q).abs() < 1e-15);
            }
        }
        let pm = minus_lap(&states[m]);
        let t_m = m as f64 * dt;
        for i in 0..9 {
            let expected = states[m][i] + t_m * pm[i];
            assert!((d.residual[i] - expected).abs() < 1e-14);
        }
        assert!(d.reconstruction_error() < 1e-10);
        assert_eq!(d.steps, 5);
        assert_eq!(d.trajectory.len(), 6);
    }

    #[test]
    fn length_three_symbolic_identity() {
        // For M = 1: φ₁ = dt·(d₁ − d₀), R = u¹ − dt·d₁, and u¹ = x + dt·d₀,
        // so φ₁ + R = x term by term.
        let x = Signal::line(vec![1.0, -2.0, 0.5]);
        let dt = 0.25;
        let d = diffuse(&x, &LAP, dt, 1).unwrap();
        let d0: Vec<f64> = LAP.apply(&x.data, 3, 1).unwrap().iter().map(|v| -v).collect();
        assert_eq!(d0, vec![-3.0, 5.5, -2.5]);
        let u1: Vec<f64> = x.data.iter().zip(&d0).map(|(a, b)| a + dt * b).collect();
        let d1: Vec<f64> = LAP.apply(&u1, 3, 1).unwrap().iter().map(|v| -v).collect();
        for i in 0..3 {
            assert!((d.phis[0][i] - dt * (d1[i] - d0[i])).abs() < 1e-15);
            assert!((d.residual[i] - (u1[i] - dt * d1[i])).abs() < 1e-15);
            assert!((d.phis[0][i] + d.residual[i] - x.data[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn argument_errors() {
        let x = Signal::line(vec![1.0, 2.0, 3.0]);
        assert!(diffuse(&x, &LAP, 0.0, 2).is_err());
        assert!(diffuse(&x, &LAP, -0.1, 2).is_err());
        assert!(diffuse(&x, &LAP, 0.1, 0).is_err());
        assert!(diffuse(&x, &LAP, 0.6, 2).is_err());
        let img = Signal::image(3, 3, vec![0.0; 9]).unwrap();
        assert!(diffuse(&img, &LAP, 0.3, 2).is_err());
        assert!(diffuse(&img, &LAP, 0.25, 2).is_ok());
        assert!(Signal::image(2, 2, vec![0.0; 3]).is_err());
        assert!(LAP.apply(&[0.0; 5], 2, 2).is_err());
    }

    #[test]
    fn batch_wiring() {
        let inputs = vec![
            Signal::image(4, 4, (0..16).map(|v| v as f64).collect()).unwrap(),
            Signal::image(4, 4, vec![2.0; 16]).unwrap(),
        ];
        let p = SmoothingOperator::BoxBlurResidual { radius: 1 };
        let decs = residual_for_model(&inputs, &p, 0.5, 3).unwrap();
        assert_eq!(decs.len(), 2);
        assert!(decs.iter().all(|d| d.reconstruction_error() < 1e-10));
        assert!(diffusion_samples(&decs, 4).is_err());
        let samples = diffusion_samples(&decs, 3).unwrap();
        assert_eq!(samples[1].residual.as_deref(), Some(&inputs[1].data[..]));
        assert!(samples[1].branch_inputs.as_ref().unwrap().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn exports() {
        let dir = tempfile::tempdir().unwrap();
        let d = diffuse(&Signal::image(3, 2, vec![1.0, 0.0, 2.0, 0.5, 0.0, 1.0]).unwrap(), &LAP, 0.2, 2)
            .unwrap();
        d.save_csv(&dir.path().join("d.csv")).unwrap();
        d.save_pgm(dir.path(), "img").unwrap();
        let text = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), "index,x,phi_1,phi_2,residual");
        assert_eq!(text.lines().count(), 7);
        assert!(dir.path().join("img_phi_2.pgm").exists());
    }

    fn signal() -> impl Strategy<Value = Signal> {
        (1usize..6, 1usize..6).prop_flat_map(|(w, h)| {
            prop::collection::vec(-10.0..10.0f64, w * h)
                .prop_map(move |data| Signal { width: w, height: h, data })
        })
    }

    proptest! {
        #[test]
        fn reconstruction_is_exact(x in signal(), frac in 0.05..1.0f64, m in 1usize..8, radius in 0usize..3) {
            for p in [LAP, SmoothingOperator::BoxBlurResidual { radius }] {
                let dt = frac * p.max_stable_dt(x.is_1d()).min(1.0);
                let d = diffuse(&x, &p, dt, m).unwrap();
                prop_assert!(d.reconstruction_error() < 1e-10);
            }
        }

        #[test]
        fn linear_operator_gives_linear_bands(x in signal(), a in -3.0..3.0f64, b in -3.0..3.0f64, seed in any::<u64>()) {
            let y: Vec<f64> = (0..x.len()).map(|i| (((seed >> (i % 60)) & 7) as f64) - 3.5).collect();
            let combo: Vec<f64> = x.data.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let ys = Signal { data: y, ..x.clone() };
            let cs = Signal { data: combo, ..x.clone() };
            let dt = 0.2;
            let (dx, dy, dc) = (
                diffuse(&x, &LAP, dt, 3).unwrap(),
                diffuse(&ys, &LAP, dt, 3).unwrap(),
                diffuse(&cs, &LAP, dt, 3).unwrap(),
            );
            for n in 0..3 {
                for i in 0..x.len() {
                    let expected = a * dx.phis[n][i] + b * dy.phis[n][i];
                    prop_assert!((dc.phis[n][i] - expected).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn laplacian_energy_decreases(x in signal(), frac in 0.01..1.0f64) {
            let dt = frac * LAP.max_stable_dt(x.is_1d());
            let d = diffuse(&x, &LAP, dt, 5).unwrap();
            for w in d.trajectory.windows(2) {
                let e0: f64 = w[0].iter().map(|v| v * v).sum();
                let e1: f64 = w[1].iter().map(|v| v * v).sum();
                prop_assert!(e1 <= e0 * (1.0 + 1e-12) + 1e-12);
            }
        }
    }
}
