//! Evaluation and diagnostics: per-client accuracy (or mean squared error),
//! predictive negative log-likelihood, predictive entropy under the weight
//! posterior, a squared-Hellinger estimate against a known true function, and
//! distance-to-target for problems with a closed-form solution.

use crate::bnn::{self, Batch, BatchTargets, Likelihood, ModelSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, standard_normals, Purpose};
use crate::tasks::ClientShard;
use crate::varinf::MeanFieldGaussian;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

/// Shannon entropy of a probability vector in nats, with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .map(|&v| if v > 0.0 { -v * libm::log(v) } else { 0.0 })
        .sum()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn draw_weights(
    posterior: &MeanFieldGaussian,
    s: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    if s == 0 {
        return Err(Error::InvalidParam {
            name: "s",
            reason: "need at least one posterior draw",
        });
    }
    let dim = posterior.dim();
    (0..s)
        .map(|_| posterior.sample(&standard_normals(rng, dim)))
        .collect()
}

/// Mean of the per-draw softmax outputs: the Monte Carlo posterior
/// predictive, one probability row per input.
fn mean_softmax(spec: &ModelSpec, draws: &[Vec<f64>], inputs: &Matrix) -> Result<Matrix> {
    let n = inputs.rows();
    let classes = spec.output_dim();
    let mut pbar = Matrix::zeros(n, classes);
    for w in draws {
        let logits = bnn::forward(spec, w, inputs)?;
        for r in 0..n {
            let p = bnn::softmax(logits.row(r));
            for (dst, v) in pbar.row_mut(r).iter_mut().zip(p) {
                *dst += v;
            }
        }
    }
    let inv = 1.0 / draws.len() as f64;
    for r in 0..n {
        for v in pbar.row_mut(r) {
            *v *= inv;
        }
    }
    Ok(pbar)
}

/// Predictive entropy per input row: softmax outputs are averaged over `s`
/// weight draws to form the posterior predictive, whose entropy is returned
/// in nats. Requires a classification model.
pub fn predictive_entropy(
    spec: &ModelSpec,
    posterior: &MeanFieldGaussian,
    inputs: &Matrix,
    s: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if !matches!(spec.likelihood, Likelihood::Categorical) {
        return Err(Error::Unsupported(
            "predictive entropy requires a classification likelihood",
        ));
    }
    let draws = draw_weights(posterior, s, rng)?;
    let pbar = mean_softmax(spec, &draws, inputs)?;
    Ok((0..inputs.rows()).map(|r| entropy(pbar.row(r))).collect())
}

/// Squared Hellinger distance between the predictive density of the network
/// with weights `w` and that of `true_fn`, both under isotropic Gaussian
/// observation noise `noise_std`, averaged over the given input samples:
/// `mean_x [ 1 − exp(−‖f_w(x) − f*(x)‖² / (8 σ²)) ]`.
pub fn hellinger_sq<F>(
    spec: &ModelSpec,
    w: &[f64],
    true_fn: F,
    x_samples: &Matrix,
    noise_std: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if x_samples.rows() == 0 {
        return Err(Error::Empty("hellinger input samples"));
    }
    if !(noise_std > 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidParam {
            name: "noise_std",
            reason: "must be positive and finite",
        });
    }
    let outputs = bnn::forward(spec, w, x_samples)?;
    let denom = 8.0 * noise_std * noise_std;
    let mut total = 0.0;
    for r in 0..x_samples.rows() {
        let truth = true_fn(x_samples.row(r));
        if truth.len() != outputs.cols() {
            return Err(Error::DimMismatch {
                context: "hellinger true function output",
                expected: outputs.cols(),
                got: truth.len(),
            });
        }
        let gap_sq: f64 = outputs
            .row(r)
            .iter()
            .zip(&truth)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += 1.0 - libm::exp(-gap_sq / denom);
    }
    Ok(total / x_samples.rows() as f64)
}

/// Euclidean distance between a posterior mean and a reference point.
pub fn distance_to_target(mean: &[f64], target: &[f64]) -> Result<f64> {
    if mean.len() != target.len() {
        return Err(Error::DimMismatch {
            context: "distance to target",
            expected: target.len(),
            got: mean.len(),
        });
    }
    let sq: f64 = mean
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(libm::sqrt(sq))
}

/// One client's evaluation: classification shards report accuracy and mean
/// predictive entropy, regression shards report mean squared error; both
/// report the mean predictive negative log-likelihood.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClientEval {
    pub client_id: usize,
    pub n_test: usize,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub nll: f64,
    pub entropy: Option<f64>,
}

/// Aggregate view over clients; means and the population standard deviation
/// of accuracy are unweighted across clients.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub per_client: Vec<ClientEval>,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_mse: Option<f64>,
    pub mean_nll: f64,
    pub mean_entropy: Option<f64>,
}

impl EvalReport {
    /// Builds the aggregate from per-client rows; aggregate means are the
    /// plain (unweighted) means of the per-client values.
    pub fn from_clients(per_client: Vec<ClientEval>) -> Result<Self> {
        if per_client.is_empty() {
            return Err(Error::Empty("evaluation clients"));
        }
        let n = per_client.len() as f64;
        let mean_nll = per_client.iter().map(|c| c.nll).sum::<f64>() / n;
        let mean_opt = |get: fn(&ClientEval) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = per_client.iter().filter_map(get).collect();
            if vals.len() == per_client.len() {
                Some(vals.iter().sum::<f64>() / n)
            } else {
                None
            }
        };
        let mean_accuracy = mean_opt(|c| c.accuracy);
        let std_accuracy = mean_accuracy.map(|m| {
            let var = per_client
                .iter()
                .map(|c| {
                    let d = c.accuracy.expect("all present when mean is") - m;
                    d * d
                })
                .sum::<f64>()
                / n;
            libm::sqrt(var)
        });
        let mean_mse = mean_opt(|c| c.mse);
        let mean_entropy = mean_opt(|c| c.entropy);
        Ok(EvalReport {
            per_client,
            mean_accuracy,
            std_accuracy,
            mean_mse,
            mean_nll,
            mean_entropy,
        })
    }
}

fn gaussian_row_log_density(pred: &[f64], target: &[f64], sigma: f64) -> f64 {
    let inv_var = 1.0 / (sigma * sigma);
    let log_norm = libm::log(2.0 * core::f64::consts::PI * sigma * sigma);
    pred.iter()
        .zip(target)
        .map(|(f, y)| -0.5 * ((y - f) * (y - f) * inv_var + log_norm))
        .sum()
}

fn eval_one(
    spec: &ModelSpec,
    posterior: &MeanFieldGaussian,
    shard: &ClientShard,
    s: usize,
    rng: &mut impl Rng,
) -> Result<ClientEval> {
    let draws = draw_weights(posterior, s, rng)?;
    let batch: &Batch = shard.data();
    let n = batch.len();
    match (&spec.likelihood, batch.targets()) {
        (Likelihood::Categorical, BatchTargets::Classes(labels)) => {
            let pbar = mean_softmax(spec, &draws, batch.features())?;
            let mut correct = 0usize;
            let mut nll = 0.0;
            let mut ent = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                let row = pbar.row(r);
                if argmax_lowest(row) == label {
                    correct += 1;
                }
                // Floor at the smallest positive normal so reports stay
                // finite even when the predictive mass underflows.
                nll -= libm::log(row[label].max(f64::MIN_POSITIVE));
                ent += entropy(row);
            }
            Ok(ClientEval {
                client_id: shard.client_id,
                n_test: n,
                accuracy: Some(correct as f64 / n as f64),
                mse: None,
                nll: nll / n as f64,
                entropy: Some(ent / n as f64),
            })
        }
        (Likelihood::Gaussian { sigma }, BatchTargets::Regression(y)) => {
            let outputs: Vec<Matrix> = draws
                .iter()
                .map(|w| bnn::forward(spec, w, batch.features()))
                .collect::<Result<_>>()?;
            let mut mse = 0.0;
            let mut nll = 0.0;
            let log_s = libm::log(s as f64);
            let mut densities = vec![0.0; s];
            for r in 0..n {
                for (j, out) in outputs.iter().enumerate() {
                    densities[j] = gaussian_row_log_density(out.row(r), y.row(r), *sigma);
                }
                nll -= bnn::log_sum_exp(&densities) - log_s;
                for c in 0..y.cols() {
                    let mean_pred =
                        outputs.iter().map(|o| o.get(r, c)).sum::<f64>() / s as f64;
                    let d = mean_pred - y.get(r, c);
                    mse += d * d;
                }
            }
            let denom = (n * y.cols()) as f64;
            Ok(ClientEval {
                client_id: shard.client_id,
                n_test: n,
                accuracy: None,
                mse: Some(mse / denom),
                nll: nll / n as f64,
                entropy: None,
            })
        }
        _ => Err(Error::Unsupported(
            "likelihood and shard target kinds do not match",
        )),
    }
}

/// Evaluates each client's posterior on its test shard with `s` weight draws
/// and aggregates. Posterior draws are keyed by `(seed, round, client_id)`,
/// so the report does not depend on the order clients are listed in.
pub fn evaluate_clients(
    spec: &ModelSpec,
    clients: &[(&MeanFieldGaussian, &ClientShard)],
    s: usize,
    seed: u64,
    round: u64,
) -> Result<EvalReport> {
    if clients.is_empty() {
        return Err(Error::Empty("evaluation clients"));
    }
    let per_client = clients
        .iter()
        .map(|(posterior, shard)| {
            let mut rng = rng::stream(seed, Purpose::Eval, round, shard.client_id as u64);
            eval_one(spec, posterior, shard, s, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_clients(per_client)
}

/// Mean of the trailing `window` values (all of them if fewer).
pub fn rolling_mean(values: &[f64], window: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("rolling window values"));
    }
    if window == 0 {
        return Err(Error::InvalidParam {
            name: "window",
            reason: "must be positive",
        });
    }
    let start = values.len().saturating_sub(window);
    let tail = &values[start..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}
