//! A small MLP zoo over flat `f64` weight vectors: forward evaluation,
//! negative log-likelihood heads, exact backpropagation, and the per-client
//! variational objective (expected NLL under the posterior plus a weighted KL
//! to the global prior).
//!
//! Weights live in one flat vector so the whole network can be treated as a
//! single distribution parameter; [`ModelSpec::layout`] says which slice of
//! that vector is which layer.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::standard_normals;
use crate::varinf::{
    kl_diag, kl_grad_wrt_p, kl_grad_wrt_q, reparam_chain, GaussianGrad, MeanFieldGaussian,
};
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

/// Elementwise nonlinearity applied between affine layers (never after the
/// last one).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => libm::tanh(x),
            Activation::Sigmoid => 1.0 / (1.0 + libm::exp(-x)),
            Activation::Identity => x,
        }
    }

    /// Derivative at the pre-activation value; the ReLU subgradient at zero
    /// is pinned to 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = libm::tanh(x);
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + libm::exp(-x));
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Observation model attached to the network outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Likelihood {
    /// Homoscedastic Gaussian noise with standard deviation `sigma`; the NLL
    /// includes the `½ ln(2πσ²)` normalisation so losses are comparable
    /// across noise levels.
    Gaussian { sigma: f64 },
    /// Softmax cross-entropy over integer class labels.
    Categorical,
}

/// Architecture plus observation model. `layer_sizes` runs from the input
/// dimension to the output dimension inclusive.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub likelihood: Likelihood,
}

/// Where one affine layer lives inside the flat weight vector. The weight
/// matrix is row-major with `in_dim` rows and `out_dim` columns, followed by
/// `out_dim` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerBlock {
    pub w_start: usize,
    pub b_start: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Flat network weights; interpreted through [`ModelSpec::layout`].
pub type WeightVector = Vec<f64>;

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, likelihood: Likelihood) -> Result<Self> {
        let spec = ModelSpec {
            layer_sizes,
            activation,
            likelihood,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidParam {
                name: "layer_sizes",
                reason: "need at least an input and an output size",
            });
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidParam {
                name: "layer_sizes",
                reason: "layer sizes must be positive",
            });
        }
        if let Likelihood::Gaussian { sigma } = self.likelihood {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidParam {
                    name: "likelihood sigma",
                    reason: "must be positive and finite",
                });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated: at least two sizes")
    }

    /// Total number of flat parameters: `Σ_l (s_l·s_{l+1} + s_{l+1})`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Per-layer blocks; together they tile `[0, param_count)` exactly.
    pub fn layout(&self) -> Vec<LayerBlock> {
        let mut blocks = Vec::with_capacity(self.layer_sizes.len() - 1);
        let mut offset = 0;
        for w in self.layer_sizes.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            blocks.push(LayerBlock {
                w_start: offset,
                b_start: offset + in_dim * out_dim,
                in_dim,
                out_dim,
            });
            offset += in_dim * out_dim + out_dim;
        }
        blocks
    }

    /// Fresh global distribution: weight means drawn Xavier-uniform within
    /// `±√(6/(s_l+s_{l+1}))` per layer, bias means zero, all log-stds at
    /// `ln 0.1`.
    pub fn init(&self, rng: &mut impl Rng) -> Result<MeanFieldGaussian> {
        self.validate()?;
        let d = self.param_count();
        let mut mean = vec![0.0; d];
        for block in self.layout() {
            let bound = libm::sqrt(6.0 / (block.in_dim + block.out_dim) as f64);
            for k in 0..block.in_dim * block.out_dim {
                mean[block.w_start + k] = rng.random_range(-bound..bound);
            }
        }
        let log_std = vec![libm::log(0.1); d];
        MeanFieldGaussian::new(mean, log_std)
    }
}

/// One minibatch of rows with matching targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    features: Matrix,
    targets: BatchTargets,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    /// Row-per-sample regression targets.
    Regression(Matrix),
    /// Integer class labels, one per sample.
    Classes(Vec<usize>),
}

impl Batch {
    pub fn new(features: Matrix, targets: BatchTargets) -> Result<Self> {
        let target_rows = match &targets {
            BatchTargets::Regression(m) => m.rows(),
            BatchTargets::Classes(c) => c.len(),
        };
        if target_rows != features.rows() {
            return Err(Error::DimMismatch {
                context: "batch targets",
                expected: features.rows(),
                got: target_rows,
            });
        }
        Ok(Batch { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &BatchTargets {
        &self.targets
    }

    /// Gathers the given rows into a new batch.
    pub fn rows_subset(&self, indices: &[usize]) -> Batch {
        let features = self.features.rows_subset(indices);
        let targets = match &self.targets {
            BatchTargets::Regression(m) => BatchTargets::Regression(m.rows_subset(indices)),
            BatchTargets::Classes(c) => {
                BatchTargets::Classes(indices.iter().map(|&i| c[i]).collect())
            }
        };
        Batch { features, targets }
    }
}

struct ForwardPass {
    /// Activations per layer; `acts[0]` is the input, `acts[L]` the output.
    acts: Vec<Matrix>,
    /// Pre-activation values per affine layer.
    pre: Vec<Matrix>,
}

fn check_weights(spec: &ModelSpec, w: &[f64]) -> Result<()> {
    spec.validate()?;
    if w.len() != spec.param_count() {
        return Err(Error::DimMismatch {
            context: "weight vector",
            expected: spec.param_count(),
            got: w.len(),
        });
    }
    Ok(())
}

fn forward_pass(spec: &ModelSpec, w: &[f64], x: &Matrix) -> Result<ForwardPass> {
    check_weights(spec, w)?;
    if x.cols() != spec.input_dim() {
        return Err(Error::DimMismatch {
            context: "forward input",
            expected: spec.input_dim(),
            got: x.cols(),
        });
    }
    let blocks = spec.layout();
    let last = blocks.len() - 1;
    let n = x.rows();
    let mut acts = Vec::with_capacity(blocks.len() + 1);
    let mut pre = Vec::with_capacity(blocks.len());
    acts.push(x.clone());
    for (l, block) in blocks.iter().enumerate() {
        let mut z = Matrix::zeros(n, block.out_dim);
        for r in 0..n {
            let input = acts[l].row(r);
            let out = z.row_mut(r);
            out.copy_from_slice(&w[block.b_start..block.b_start + block.out_dim]);
            for (i, &a) in input.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let wrow = &w[block.w_start + i * block.out_dim..][..block.out_dim];
                for (o, &wij) in out.iter_mut().zip(wrow) {
                    *o += a * wij;
                }
            }
        }
        if l < last {
            let mut a = z.clone();
            for v in 0..n {
                for val in a.row_mut(v) {
                    *val = spec.activation.apply(*val);
                }
            }
            pre.push(z);
            acts.push(a);
        } else {
            pre.push(z.clone());
            acts.push(z);
        }
    }
    Ok(ForwardPass { acts, pre })
}

/// Network outputs for a batch of rows (no likelihood applied).
pub fn forward(spec: &ModelSpec, w: &[f64], x: &Matrix) -> Result<Matrix> {
    let mut pass = forward_pass(spec, w, x)?;
    Ok(pass.acts.pop().expect("forward pass has outputs"))
}

/// Batch-summed negative log-likelihood of `targets` given network `outputs`.
pub fn nll(spec: &ModelSpec, outputs: &Matrix, targets: &BatchTargets) -> Result<f64> {
    match (&spec.likelihood, targets) {
        (Likelihood::Gaussian { sigma }, BatchTargets::Regression(y)) => {
            if y.rows() != outputs.rows() || y.cols() != outputs.cols() {
                return Err(Error::DimMismatch {
                    context: "regression targets",
                    expected: outputs.rows() * outputs.cols(),
                    got: y.rows() * y.cols(),
                });
            }
            let var = sigma * sigma;
            let norm = 0.5 * libm::log(2.0 * core::f64::consts::PI * var);
            let mut total = outputs.rows() as f64 * outputs.cols() as f64 * norm;
            for (o, t) in outputs.data().iter().zip(y.data()) {
                let r = o - t;
                total += r * r / (2.0 * var);
            }
            Ok(total)
        }
        (Likelihood::Categorical, BatchTargets::Classes(labels)) => {
            if labels.len() != outputs.rows() {
                return Err(Error::DimMismatch {
                    context: "class labels",
                    expected: outputs.rows(),
                    got: labels.len(),
                });
            }
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                if label >= outputs.cols() {
                    return Err(Error::InvalidParam {
                        name: "class label",
                        reason: "label index exceeds output dimension",
                    });
                }
                let logits = outputs.row(r);
                total += log_sum_exp(logits) - logits[label];
            }
            Ok(total)
        }
        _ => Err(Error::Unsupported(
            "likelihood and target kinds do not match",
        )),
    }
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| libm::exp(v - m)).sum();
    m + libm::log(s)
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| libm::exp(z - lse)).collect()
}

fn nll_grad_outputs(spec: &ModelSpec, outputs: &Matrix, targets: &BatchTargets) -> Result<Matrix> {
    match (&spec.likelihood, targets) {
        (Likelihood::Gaussian { sigma }, BatchTargets::Regression(y)) => {
            let inv_var = 1.0 / (sigma * sigma);
            let mut g = Matrix::zeros(outputs.rows(), outputs.cols());
            for r in 0..outputs.rows() {
                for c in 0..outputs.cols() {
                    g.set(r, c, (outputs.get(r, c) - y.get(r, c)) * inv_var);
                }
            }
            Ok(g)
        }
        (Likelihood::Categorical, BatchTargets::Classes(labels)) => {
            let mut g = Matrix::zeros(outputs.rows(), outputs.cols());
            for (r, &label) in labels.iter().enumerate() {
                let p = softmax(outputs.row(r));
                let row = g.row_mut(r);
                row.copy_from_slice(&p);
                row[label] -= 1.0;
            }
            Ok(g)
        }
        _ => Err(Error::Unsupported(
            "likelihood and target kinds do not match",
        )),
    }
}

/// Batch-summed NLL and its exact gradient with respect to the flat weights.
pub fn nll_and_grad(spec: &ModelSpec, w: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let pass = forward_pass(spec, w, batch.features())?;
    let outputs = pass.acts.last().expect("forward pass has outputs");
    let loss = nll(spec, outputs, batch.targets())?;
    let mut g = nll_grad_outputs(spec, outputs, batch.targets())?;
    let blocks = spec.layout();
    let n = batch.len();
    let mut grad = vec![0.0; w.len()];
    for (l, block) in blocks.iter().enumerate().rev() {
        for r in 0..n {
            let a = pass.acts[l].row(r);
            let grow = g.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let dst = &mut grad[block.w_start + i * block.out_dim..][..block.out_dim];
                for (d, &gj) in dst.iter_mut().zip(grow) {
                    *d += ai * gj;
                }
            }
            let db = &mut grad[block.b_start..block.b_start + block.out_dim];
            for (d, &gj) in db.iter_mut().zip(grow) {
                *d += gj;
            }
        }
        if l > 0 {
            let mut g_prev = Matrix::zeros(n, block.in_dim);
            for r in 0..n {
                let grow = g.row(r);
                let dst = g_prev.row_mut(r);
                for (i, d) in dst.iter_mut().enumerate() {
                    let wrow = &w[block.w_start + i * block.out_dim..][..block.out_dim];
                    let mut s = 0.0;
                    for (&gj, &wij) in grow.iter().zip(wrow) {
                        s += gj * wij;
                    }
                    *d = s * spec.activation.derivative(pass.pre[l - 1].get(r, i));
                }
            }
            g = g_prev;
        }
    }
    Ok((loss, grad))
}

/// Knobs of the per-client variational objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboSettings {
    /// Monte Carlo samples per evaluation.
    pub mc_samples: usize,
    /// Weight on the KL term.
    pub kl_weight: f64,
    /// Extra KL multiplier, e.g. to count the KL once per epoch instead of
    /// once per batch. Stays at 1 unless a config says otherwise.
    pub kl_scale: f64,
    /// Scale on the batch-summed NLL; callers pass `n_i / n_b` so a minibatch
    /// estimates the full-shard likelihood.
    pub nll_scale: f64,
}

/// Value and gradients of the variational objective at one batch.
#[derive(Clone, Debug)]
pub struct ElboOutput {
    /// `nll_scale · E_q[NLL] + kl_weight · kl_scale · KL(q ‖ prior)`.
    pub loss: f64,
    /// Gradient with respect to the local posterior's parameters.
    pub grad_posterior: GaussianGrad,
    /// Gradient with respect to the global prior's parameters (only the KL
    /// term touches the prior).
    pub grad_prior: GaussianGrad,
    /// Unscaled Monte Carlo NLL average, handy for logging.
    pub nll: f64,
}

/// Evaluates the variational objective, drawing `mc_samples` noise vectors
/// from `rng`.
pub fn elbo_loss(
    spec: &ModelSpec,
    posterior: &MeanFieldGaussian,
    prior: &MeanFieldGaussian,
    batch: &Batch,
    settings: &ElboSettings,
    rng: &mut impl Rng,
) -> Result<ElboOutput> {
    if settings.mc_samples == 0 {
        return Err(Error::InvalidParam {
            name: "mc_samples",
            reason: "need at least one Monte Carlo sample",
        });
    }
    let d = posterior.dim();
    let noise: Vec<Vec<f64>> = (0..settings.mc_samples)
        .map(|_| standard_normals(rng, d))
        .collect();
    elbo_loss_with_noise(spec, posterior, prior, batch, settings, &noise)
}

/// Deterministic core of [`elbo_loss`]: the same objective under caller-
/// provided noise, one vector per Monte Carlo sample. This is what makes the
/// objective finite-difference checkable.
pub fn elbo_loss_with_noise(
    spec: &ModelSpec,
    posterior: &MeanFieldGaussian,
    prior: &MeanFieldGaussian,
    batch: &Batch,
    settings: &ElboSettings,
    noise: &[Vec<f64>],
) -> Result<ElboOutput> {
    check_weights(spec, posterior.mean())?;
    if prior.dim() != posterior.dim() {
        return Err(Error::DimMismatch {
            context: "posterior and prior",
            expected: posterior.dim(),
            got: prior.dim(),
        });
    }
    if noise.is_empty() {
        return Err(Error::Empty("elbo noise draws"));
    }
    if batch.is_empty() {
        return Err(Error::Empty("elbo batch"));
    }
    let d = posterior.dim();
    let inv_s = 1.0 / noise.len() as f64;
    let mut grad_posterior = GaussianGrad::zeros(d);
    let mut nll_acc = 0.0;
    for eps in noise {
        let w = posterior.sample(eps)?;
        let (loss_j, grad_w) = nll_and_grad(spec, &w, batch)?;
        nll_acc += loss_j * inv_s;
        let chained = reparam_chain(&grad_w, eps, posterior, None)?;
        grad_posterior.scaled_add(&chained, settings.nll_scale * inv_s);
    }
    let kl = kl_diag(posterior, prior)?;
    let kl_coeff = settings.kl_weight * settings.kl_scale;
    let mut grad_prior = kl_grad_wrt_p(posterior, prior)?;
    grad_prior.scale(kl_coeff);
    grad_posterior.scaled_add(&kl_grad_wrt_q(posterior, prior)?, kl_coeff);
    Ok(ElboOutput {
        loss: settings.nll_scale * nll_acc + kl_coeff * kl,
        grad_posterior,
        grad_prior,
        nll: nll_acc,
    })
}
