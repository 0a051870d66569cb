//! Branched architectures: `M` identically shaped sub-networks whose outputs
//! are summed.
//!
//! Every branch owns a disjoint, contiguous slice of one flat parameter
//! vector. Branch outputs are combined with [`order_independent_sum`], so
//! relabeling branches never changes the aggregated output, not even in the
//! last bit.
//!
//! Two gradient routes are provided. [`BranchedModel::loss_gradient`] is a
//! fused backpropagation that computes `dL/df` once per sample and pushes it
//! through each branch; it is the route used for training and Hessian
//! columns. [`BranchedModel::tape_loss_gradient`] records the whole
//! computation on a [`Tape`] and is the reference it is tested against.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffkit::{
    clamp_derivative, leaky_relu, leaky_relu_derivative, order_independent_sum, GradientVector,
    NodeId, Tape,
};
use crate::losses::{self, LossSpec};
use crate::{Dataset, Error, Result, Sample, Target};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const CLAMP_LO: f64 = -1.0;
pub const CLAMP_HI: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BranchKind {
    /// `v(x) = σ(w·x + b)` with scalar `w`, `b`.
    ScalarPerceptron,
    /// Dense layers `widths[0] → … → widths[last]`; leaky ReLU on hidden
    /// layers, linear output.
    Mlp { widths: Vec<usize> },
}

fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchArch {
    pub kind: BranchKind,
    /// Negative-side slope of the leaky ReLU.
    #[serde(default = "default_slope")]
    pub alpha: f64,
    /// Clamp the aggregated output to `[-1, 1]`.
    #[serde(default)]
    pub output_clamp: bool,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    inp: usize,
    out: usize,
    /// Offset of the row-major `out × inp` weights inside a branch slice.
    w: usize,
    /// Offset of the bias inside a branch slice.
    b: usize,
}

impl BranchArch {
    pub fn new(kind: BranchKind) -> Self {
        Self {
            kind,
            alpha: DEFAULT_LEAKY_SLOPE,
            output_clamp: false,
        }
    }

    pub fn scalar_perceptron() -> Self {
        Self::new(BranchKind::ScalarPerceptron)
    }

    pub fn mlp(widths: &[usize]) -> Self {
        Self::new(BranchKind::Mlp {
            widths: widths.to_vec(),
        })
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_clamp(mut self, clamp: bool) -> Self {
        self.output_clamp = clamp;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::InvalidArgument("leaky slope must be finite".into()));
        }
        if let BranchKind::Mlp { widths } = &self.kind {
            if widths.len() < 2 {
                return Err(Error::InvalidArgument(
                    "MLP needs at least an input and an output width".into(),
                ));
            }
            if widths.contains(&0) {
                return Err(Error::InvalidArgument("MLP widths must be positive".into()));
            }
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        match &self.kind {
            BranchKind::ScalarPerceptron => vec![1, 1],
            BranchKind::Mlp { widths } => widths.clone(),
        }
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.widths()
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    inp: w[0],
                    out: w[1],
                    w: offset,
                    b: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect()
    }

    /// Whether the last layer goes through the activation.
    fn activated_output(&self) -> bool {
        matches!(self.kind, BranchKind::ScalarPerceptron)
    }

    pub fn input_dim(&self) -> usize {
        self.widths()[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths().last().expect("validated widths")
    }

    pub fn branch_param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets (within one branch) of the first layer's weights and bias.
    pub fn first_layer_range(&self) -> Range<usize> {
        let l = self.layers()[0];
        0..l.b + l.out
    }
}

/// How the residual term enters the aggregated output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `f(x) = Σ vₖ(x)`.
    #[default]
    None,
    /// `f(x) = R(x) + Σ vₖ(x)` with `R` precomputed per sample.
    Fixed,
    /// `f(x) = R(x) + Σ vₖ(φₖ(x))`; each branch reads its own band.
    DiffusionResidual,
}

/// Flat parameters partitioned into per-branch slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    branch_slices: Vec<Range<usize>>,
    seed: u64,
}

impl ParamStore {
    fn new(values: Vec<f64>, per_branch: usize, branches: usize, seed: u64) -> Result<Self> {
        if values.len() != per_branch * branches {
            return Err(Error::Shape(format!(
                "{} parameters for {branches} branches of {per_branch}",
                values.len()
            )));
        }
        let branch_slices = (0..branches)
            .map(|k| k * per_branch..(k + 1) * per_branch)
            .collect();
        Ok(Self {
            values,
            branch_slices,
            seed,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn branch_slices(&self) -> &[Range<usize>] {
        &self.branch_slices
    }

    pub fn branch(&self, k: usize) -> &[f64] {
        &self.values[self.branch_slices[k].clone()]
    }

    pub fn branch_mut(&mut self, k: usize) -> &mut [f64] {
        let r = self.branch_slices[k].clone();
        &mut self.values[r]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Branch outputs over a batch, indexed `[branch][sample][coordinate]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchOutputs {
    pub branches: usize,
    pub samples: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl BranchOutputs {
    pub fn new(branches: usize, samples: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != branches * samples * dim {
            return Err(Error::Shape(format!(
                "{} values for {branches} branches × {samples} samples × {dim}",
                data.len()
            )));
        }
        Ok(Self {
            branches,
            samples,
            dim,
            data,
        })
    }

    pub fn get(&self, k: usize, j: usize) -> &[f64] {
        let start = (k * self.samples + j) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Row of branch `k` flattened over samples and coordinates.
    pub fn branch_row(&self, k: usize) -> &[f64] {
        let width = self.samples * self.dim;
        &self.data[k * width..(k + 1) * width]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Mean loss and its fused gradient over a batch.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub gradient: GradientVector,
    /// `Σⱼ ‖f(xⱼ) − yⱼ‖²` over regression targets.
    pub squared_residual_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchedModel {
    arch: BranchArch,
    branches: usize,
    params: ParamStore,
    residual_mode: ResidualMode,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    arch: BranchArch,
    #[serde(rename = "M")]
    branches: usize,
    seed: u64,
    #[serde(default)]
    residual_mode: ResidualMode,
    params: Vec<f64>,
}

impl BranchedModel {
    /// Independently initialized branches, reproducible from `seed`.
    ///
    /// Scalar perceptrons draw `w, b ~ N(0, 1)`. MLP weights draw from
    /// `N(0, 2 / fan_in)` and biases start at zero. Branch `k` uses its own
    /// ChaCha stream, so its parameters do not depend on `M`.
    pub fn init(arch: BranchArch, branches: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if branches == 0 {
            return Err(Error::InvalidArgument("branch count must be at least 1".into()));
        }
        let per_branch = arch.branch_param_count();
        let mut values = Vec::with_capacity(per_branch * branches);
        for k in 0..branches {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            match arch.kind {
                BranchKind::ScalarPerceptron => {
                    let normal = Normal::new(0.0, 1.0).expect("unit normal");
                    values.push(normal.sample(&mut rng));
                    values.push(normal.sample(&mut rng));
                }
                BranchKind::Mlp { .. } => {
                    for layer in arch.layers() {
                        let std = (2.0 / layer.inp as f64).sqrt();
                        let normal = Normal::new(0.0, std).expect("finite std");
                        values.extend((0..layer.inp * layer.out).map(|_| normal.sample(&mut rng)));
                        values.extend(std::iter::repeat_n(0.0, layer.out));
                    }
                }
            }
        }
        let params = ParamStore::new(values, per_branch, branches, seed)?;
        Ok(Self {
            arch,
            branches,
            params,
            residual_mode: ResidualMode::None,
        })
    }

    pub fn from_params(
        arch: BranchArch,
        branches: usize,
        seed: u64,
        values: Vec<f64>,
    ) -> Result<Self> {
        arch.validate()?;
        if branches == 0 {
            return Err(Error::InvalidArgument("branch count must be at least 1".into()));
        }
        let params = ParamStore::new(values, arch.branch_param_count(), branches, seed)?;
        Ok(Self {
            arch,
            branches,
            params,
            residual_mode: ResidualMode::None,
        })
    }

    pub fn with_residual_mode(mut self, mode: ResidualMode) -> Self {
        self.residual_mode = mode;
        self
    }

    pub fn arch(&self) -> &BranchArch {
        &self.arch
    }

    pub fn branch_count(&self) -> usize {
        self.branches
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn residual_mode(&self) -> ResidualMode {
        self.residual_mode
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim()
    }

    /// Global indices of every branch's first-layer parameters.
    pub fn first_layer_indices(&self) -> Vec<usize> {
        let local = self.arch.first_layer_range();
        self.params
            .branch_slices()
            .iter()
            .flat_map(|s| local.clone().map(move |i| s.start + i))
            .collect()
    }

    /// Model whose branch `k` carries the parameters of branch `perm[k]`.
    pub fn permute_branches(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.branches];
        if perm.len() != self.branches
            || perm.iter().any(|&p| p >= self.branches || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidArgument("not a permutation of the branches".into()));
        }
        let values = perm
            .iter()
            .flat_map(|&p| self.params.branch(p).iter().copied())
            .collect();
        let mut out = Self::from_params(self.arch.clone(), self.branches, self.params.seed, values)?;
        out.residual_mode = self.residual_mode;
        Ok(out)
    }

    fn check_branch(&self, k: usize) -> Result<()> {
        if k >= self.branches {
            return Err(Error::BranchIndex {
                index: k,
                branches: self.branches,
            });
        }
        Ok(())
    }

    /// The input branch `k` reads for `sample`.
    pub fn branch_input<'s>(&self, k: usize, sample: &'s Sample) -> Result<&'s [f64]> {
        self.check_branch(k)?;
        let input: &[f64] = match self.residual_mode {
            ResidualMode::DiffusionResidual => {
                let bands = sample.branch_inputs.as_ref().ok_or_else(|| {
                    Error::Shape("diffusion residual model needs per-branch inputs".into())
                })?;
                if bands.len() != self.branches {
                    return Err(Error::Shape(format!(
                        "{} branch inputs for {} branches",
                        bands.len(),
                        self.branches
                    )));
                }
                &bands[k]
            }
            _ => &sample.x,
        };
        if input.len() != self.arch.input_dim() {
            return Err(Error::Shape(format!(
                "input of length {} for input dimension {}",
                input.len(),
                self.arch.input_dim()
            )));
        }
        Ok(input)
    }

    fn residual<'s>(&self, sample: &'s Sample) -> Result<Option<&'s [f64]>> {
        match self.residual_mode {
            ResidualMode::None => Ok(None),
            ResidualMode::Fixed | ResidualMode::DiffusionResidual => {
                let r = sample
                    .residual
                    .as_deref()
                    .ok_or_else(|| Error::Shape("residual model needs a residual".into()))?;
                if r.len() != self.output_dim() {
                    return Err(Error::Shape(format!(
                        "residual of length {} for output dimension {}",
                        r.len(),
                        self.output_dim()
                    )));
                }
                Ok(Some(r))
            }
        }
    }

    /// `vₖ` at `sample`, never clamped.
    pub fn branch_forward(&self, k: usize, sample: &Sample) -> Result<Vec<f64>> {
        let input = self.branch_input(k, sample)?;
        let plan = Plan::new(&self.arch);
        let mut cache = vec![0.0; plan.cache_len];
        plan.forward(self.params.branch(k), input, &mut cache);
        Ok(plan.output(&cache).to_vec())
    }

    /// Distance of `sample` to the nearest non-differentiable point: the
    /// smallest `|z|` over activated pre-activations of every branch, and
    /// the gap of each clamped output to the clamp bounds.
    pub fn kink_distance(&self, sample: &Sample) -> Result<f64> {
        let plan = Plan::new(&self.arch);
        let mut cache = vec![0.0; plan.cache_len];
        let mut dist = f64::INFINITY;
        for k in 0..self.branches {
            plan.forward(self.params.branch(k), self.branch_input(k, sample)?, &mut cache);
            for (l, layer) in plan.layers.iter().enumerate() {
                if plan.is_activated(l) {
                    let off = plan.offsets[l];
                    for z in &cache[off..off + layer.out] {
                        dist = dist.min(z.abs());
                    }
                }
            }
        }
        if self.arch.output_clamp {
            let (pre, _) = self.forward_parts(sample)?;
            for p in pre {
                dist = dist.min((p - CLAMP_LO).abs()).min((p - CLAMP_HI).abs());
            }
        }
        Ok(dist)
    }

    /// Aggregates per-branch values of one output coordinate.
    fn combine(&self, column: &mut [f64], residual: Option<f64>) -> (f64, f64) {
        let mut pre = order_independent_sum(column);
        if let Some(r) = residual {
            pre += r;
        }
        let f = if self.arch.output_clamp {
            pre.clamp(CLAMP_LO, CLAMP_HI)
        } else {
            pre
        };
        (pre, f)
    }

    /// Aggregated output for per-branch outputs `outputs[k]` at `sample`.
    pub fn aggregate(&self, outputs: &[&[f64]], sample: &Sample) -> Result<Vec<f64>> {
        if outputs.len() != self.branches {
            return Err(Error::Shape("one output per branch required".into()));
        }
        let residual = self.residual(sample)?;
        let mut column = vec![0.0; self.branches];
        Ok((0..self.output_dim())
            .map(|c| {
                for (slot, out) in column.iter_mut().zip(outputs) {
                    *slot = out[c];
                }
                self.combine(&mut column, residual.map(|r| r[c])).1
            })
            .collect())
    }

    /// Pre-clamp sum (including residual) and the final output at `sample`.
    pub fn forward_parts(&self, sample: &Sample) -> Result<(Vec<f64>, Vec<f64>)> {
        let outs = (0..self.branches)
            .map(|k| self.branch_forward(k, sample))
            .collect::<Result<Vec<_>>>()?;
        let residual = self.residual(sample)?;
        let mut column = vec![0.0; self.branches];
        Ok((0..self.output_dim())
            .map(|c| {
                for (slot, out) in column.iter_mut().zip(&outs) {
                    *slot = out[c];
                }
                self.combine(&mut column, residual.map(|r| r[c]))
            })
            .unzip())
    }

    /// `f(x) = Σₖ vₖ(x)`, plus the residual and clamp when configured.
    pub fn forward(&self, sample: &Sample) -> Result<Vec<f64>> {
        let outs = (0..self.branches)
            .map(|k| self.branch_forward(k, sample))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = outs.iter().map(Vec::as_slice).collect();
        self.aggregate(&refs, sample)
    }

    pub fn forward_all(&self, samples: &[Sample]) -> Result<BranchOutputs> {
        let plan = Plan::new(&self.arch);
        let dim = self.output_dim();
        let mut data = Vec::with_capacity(self.branches * samples.len() * dim);
        let mut cache = vec![0.0; plan.cache_len];
        for k in 0..self.branches {
            for sample in samples {
                plan.forward(self.params.branch(k), self.branch_input(k, sample)?, &mut cache);
                data.extend_from_slice(plan.output(&cache));
            }
        }
        Ok(BranchOutputs {
            branches: self.branches,
            samples: samples.len(),
            dim,
            data,
        })
    }

    pub fn mean_loss(&self, loss: &LossSpec, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let mut total = 0.0;
        for (sample, target) in data.iter() {
            total += losses::loss(loss, &self.forward(sample)?, target)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Mean loss and gradient over the whole dataset by fused backprop.
    pub fn loss_gradient(&self, loss: &LossSpec, data: &Dataset) -> Result<LossEval> {
        let all: Vec<usize> = (0..data.len()).collect();
        self.loss_gradient_on(loss, data, &all)
    }

    /// Mean loss and gradient over `data[indices]`.
    ///
    /// Per sample, the collaborative factor `dL/df` (masked by the clamp
    /// derivative) is formed once and pulled back through each branch's
    /// Jacobian, which touches only that branch's slice.
    pub fn loss_gradient_on(
        &self,
        loss: &LossSpec,
        data: &Dataset,
        indices: &[usize],
    ) -> Result<LossEval> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let m = self.branches;
        let dim = self.output_dim();
        let plan = Plan::new(&self.arch);
        let scale = 1.0 / indices.len() as f64;

        let mut grad = vec![0.0; self.params.len()];
        let mut caches = vec![0.0; m * plan.cache_len];
        let mut column = vec![0.0; m];
        let mut pre = vec![0.0; dim];
        let mut f = vec![0.0; dim];
        let mut collab = vec![0.0; dim];
        let mut scratch = Scratch::new(&plan);
        let mut total = 0.0;
        let mut sq_residual = 0.0;

        for &j in indices {
            let sample = data
                .samples
                .get(j)
                .ok_or_else(|| Error::Shape(format!("sample index {j} out of range")))?;
            let target = &data.targets[j];
            for k in 0..m {
                let cache = &mut caches[k * plan.cache_len..(k + 1) * plan.cache_len];
                plan.forward(self.params.branch(k), self.branch_input(k, sample)?, cache);
            }
            let residual = self.residual(sample)?;
            for c in 0..dim {
                for (k, slot) in column.iter_mut().enumerate() {
                    *slot = plan.output(&caches[k * plan.cache_len..(k + 1) * plan.cache_len])[c];
                }
                (pre[c], f[c]) = self.combine(&mut column, residual.map(|r| r[c]));
            }
            total += losses::loss_and_collab_into(loss, &f, target, &mut collab)?;
            if let Target::Values(y) = target {
                sq_residual += f.iter().zip(y).map(|(f, y)| (f - y) * (f - y)).sum::<f64>();
            }
            for c in 0..dim {
                let mask = if self.arch.output_clamp {
                    clamp_derivative(pre[c], CLAMP_LO, CLAMP_HI)
                } else {
                    1.0
                };
                collab[c] *= mask * scale;
            }
            for k in 0..m {
                let range = self.params.branch_slices()[k].clone();
                plan.backward(
                    self.params.branch(k),
                    self.branch_input(k, sample)?,
                    &caches[k * plan.cache_len..(k + 1) * plan.cache_len],
                    &collab,
                    &mut grad[range],
                    &mut scratch,
                );
            }
        }

        Ok(LossEval {
            loss: total * scale,
            gradient: GradientVector::new(grad, self.params.branch_slices().to_vec())?,
            squared_residual_sum: sq_residual,
        })
    }

    /// Records branch `k` at `sample` on `tape`; the tape must be built over
    /// this model's parameter vector.
    pub fn record_branch(&self, tape: &mut Tape<'_>, k: usize, sample: &Sample) -> Result<NodeId> {
        let input = self.branch_input(k, sample)?;
        let base = self.params.branch_slices()[k].start;
        let layers = self.arch.layers();
        let last = layers.len() - 1;
        let mut act = tape.constant(input.to_vec());
        for (l, layer) in layers.iter().enumerate() {
            let w = tape.param(base + layer.w, layer.inp * layer.out)?;
            let b = tape.param(base + layer.b, layer.out)?;
            let wx = tape.matvec(w, layer.out, layer.inp, act)?;
            let z = tape.add(wx, b)?;
            act = if l < last || self.arch.activated_output() {
                tape.leaky_relu(z, self.arch.alpha)?
            } else {
                z
            };
        }
        Ok(act)
    }

    /// Records the aggregated output at `sample`.
    pub fn record_forward(&self, tape: &mut Tape<'_>, sample: &Sample) -> Result<NodeId> {
        let branches = (0..self.branches)
            .map(|k| self.record_branch(tape, k, sample))
            .collect::<Result<Vec<_>>>()?;
        let mut out = tape.aggregate(&branches)?;
        if let Some(r) = self.residual(sample)? {
            let r = tape.constant(r.to_vec());
            out = tape.add(out, r)?;
        }
        if self.arch.output_clamp {
            out = tape.clamp(out, CLAMP_LO, CLAMP_HI)?;
        }
        Ok(out)
    }

    pub fn new_tape(&self) -> Tape<'_> {
        Tape::new(self.params.values(), self.params.branch_slices().to_vec())
    }

    /// Mean loss and gradient by recording the full graph on a tape.
    pub fn tape_loss_gradient(
        &self,
        loss: &LossSpec,
        data: &Dataset,
    ) -> Result<(f64, GradientVector)> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let mut tape = self.new_tape();
        let per_sample = data
            .iter()
            .map(|(sample, target)| {
                let f = self.record_forward(&mut tape, sample)?;
                losses::record_loss(&mut tape, loss, f, target)
            })
            .collect::<Result<Vec<_>>>()?;
        let total = tape.aggregate(&per_sample)?;
        let mean = tape.scale(total, 1.0 / data.len() as f64)?;
        let value = tape.value(mean)?[0];
        Ok((value, tape.backward(mean)?))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            arch: self.arch.clone(),
            branches: self.branches,
            seed: self.params.seed,
            residual_mode: self.residual_mode,
            params: self.params.values.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        Ok(Self::from_params(doc.arch, doc.branches, doc.seed, doc.params)?
            .with_residual_mode(doc.residual_mode))
    }
}

/// Layer layout and buffer sizes for one branch.
struct Plan {
    layers: Vec<Layer>,
    alpha: f64,
    activated_output: bool,
    /// Per layer: `out` pre-activations followed by `out` activations.
    offsets: Vec<usize>,
    cache_len: usize,
    max_width: usize,
}

struct Scratch {
    delta: Vec<f64>,
    upstream: Vec<f64>,
}

impl Scratch {
    fn new(plan: &Plan) -> Self {
        Self {
            delta: vec![0.0; plan.max_width],
            upstream: vec![0.0; plan.max_width],
        }
    }
}

impl Plan {
    fn new(arch: &BranchArch) -> Self {
        let layers = arch.layers();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut len = 0;
        for l in &layers {
            offsets.push(len);
            len += 2 * l.out;
        }
        let max_width = layers.iter().map(|l| l.out.max(l.inp)).max().unwrap_or(1);
        Self {
            layers,
            alpha: arch.alpha,
            activated_output: arch.activated_output(),
            offsets,
            cache_len: len,
            max_width,
        }
    }

    fn is_activated(&self, l: usize) -> bool {
        l + 1 < self.layers.len() || self.activated_output
    }

    fn forward(&self, theta: &[f64], input: &[f64], cache: &mut [f64]) {
        for (l, layer) in self.layers.iter().enumerate() {
            let off = self.offsets[l];
            let (before, rest) = cache.split_at_mut(off);
            let prev: &[f64] = if l == 0 {
                input
            } else {
                let p = self.offsets[l - 1];
                &before[p + self.layers[l - 1].out..p + 2 * self.layers[l - 1].out]
            };
            let weights = &theta[layer.w..layer.w + layer.inp * layer.out];
            let bias = &theta[layer.b..layer.b + layer.out];
            let activated = self.is_activated(l);
            let (z, a) = rest[..2 * layer.out].split_at_mut(layer.out);
            for i in 0..layer.out {
                let row = &weights[i * layer.inp..(i + 1) * layer.inp];
                let zi = row.iter().zip(prev).map(|(w, x)| w * x).sum::<f64>() + bias[i];
                z[i] = zi;
                a[i] = if activated { leaky_relu(zi, self.alpha) } else { zi };
            }
        }
    }

    fn output<'c>(&self, cache: &'c [f64]) -> &'c [f64] {
        let l = self.layers.len() - 1;
        let off = self.offsets[l] + self.layers[l].out;
        &cache[off..off + self.layers[l].out]
    }

    /// Accumulates `(∂v/∂θ)ᵀ · upstream` into `grad`.
    fn backward(
        &self,
        theta: &[f64],
        input: &[f64],
        cache: &[f64],
        upstream: &[f64],
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) {
        let last = self.layers.len() - 1;
        scratch.upstream[..upstream.len()].copy_from_slice(upstream);
        for l in (0..=last).rev() {
            let layer = self.layers[l];
            let off = self.offsets[l];
            let z = &cache[off..off + layer.out];
            let activated = self.is_activated(l);
            for i in 0..layer.out {
                let g = scratch.upstream[i];
                scratch.delta[i] = if activated {
                    g * leaky_relu_derivative(z[i], self.alpha)
                } else {
                    g
                };
            }
            let prev: &[f64] = if l == 0 {
                input
            } else {
                let p = self.offsets[l - 1];
                &cache[p + self.layers[l - 1].out..p + 2 * self.layers[l - 1].out]
            };
            for i in 0..layer.out {
                let d = scratch.delta[i];
                grad[layer.b + i] += d;
                if d != 0.0 {
                    let row = &mut grad[layer.w + i * layer.inp..layer.w + (i + 1) * layer.inp];
                    for (gw, x) in row.iter_mut().zip(prev) {
                        *gw += d * x;
                    }
                }
            }
            if l > 0 {
                let weights = &theta[layer.w..layer.w + layer.inp * layer.out];
                for j in 0..layer.inp {
                    scratch.upstream[j] = (0..layer.out)
                        .map(|i| weights[i * layer.inp + j] * scratch.delta[i])
                        .sum();
                }
            }
        }
    }
}
