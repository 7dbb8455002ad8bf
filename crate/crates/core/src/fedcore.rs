//! The federated training loop: seeded client sampling, local bi-level
//! updates (posterior steps inside prior steps), Gaussian fusion on the
//! server, baseline modes that collapse the hierarchy, and posterior
//! personalization for clients joining after training.

use crate::bnn::{self, Batch, ElboSettings, ModelSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, ClientEval, EvalReport};
use crate::rng::{self, standard_normals, Purpose};
use crate::tasks::ClientShard;
use crate::varinf::{
    self, AggregationStrategy, GaussianGrad, MeanFieldGaussian, NU_MAX, NU_MIN,
};
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// A local loss beyond this bound (or any non-finite loss) aborts the run
/// with the offending client and round attached.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// How the prior's gradient is obtained in the local loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ThetaGradEstimator {
    /// Analytic gradient of the closed-form Gaussian divergence (default).
    ClosedForm,
    /// Monte Carlo estimate from fresh posterior draws; unbiased, noisier,
    /// kept for cross-checking the analytic path.
    Sampled,
}

/// Training algorithm. The non-default modes collapse parts of the
/// hierarchical update and exist as comparable baselines.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub enum Mode {
    /// Full bi-level update: posterior steps toward the local data, prior
    /// steps toward the posterior, Gaussian fusion on the server.
    #[cfg_attr(feature = "serde", serde(rename = "fedabml"))]
    FedAbml,
    /// Plain federated averaging of a single point-estimate weight vector;
    /// no posterior, no personalization.
    #[cfg_attr(feature = "serde", serde(rename = "fedavg"))]
    FedAvg,
    /// First-order meta-learning baseline: the meta step descends the
    /// gradient taken after a one-step adaptation with rate `alpha`.
    #[cfg_attr(feature = "serde", serde(rename = "per_fedavg"))]
    PerFedAvg { alpha: f64 },
    /// Proximal baseline: the posterior mean tracks the local loss plus a
    /// quadratic tether `lambda_reg/2 ‖φ − θ‖²`; widths stay at `fixed_nu`.
    #[cfg_attr(feature = "serde", serde(rename = "pfedme_style"))]
    PFedMeStyle { lambda_reg: f64, fixed_nu: f64 },
}

/// Run-defining knobs. `Default` gives the documented baseline
/// configuration; `validate` enforces the domain of every field.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FedConfig {
    pub n_clients: usize,
    /// Fraction of clients selected each round; ⌈participation · N⌉ take part.
    pub participation: f64,
    pub rounds: u64,
    /// Local epochs per participation.
    pub local_rounds: usize,
    /// Posterior steps per minibatch before the single prior step.
    pub inner_steps: usize,
    pub lr_phi: f64,
    pub lr_theta: f64,
    /// Weight on the divergence term of the local objective.
    pub kl_weight: f64,
    /// Extra divergence multiplier (counted once per step at 1.0).
    pub kl_scale: f64,
    /// Monte Carlo samples per loss evaluation and per client evaluation.
    pub mc_samples: usize,
    pub batch_size: usize,
    pub mode: Mode,
    pub aggregation: AggregationStrategy,
    pub seed: u64,
    /// Weight the fusion by shard sizes instead of uniformly.
    pub size_weighted: bool,
    pub theta_grad: ThetaGradEstimator,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            n_clients: 10,
            participation: 0.1,
            rounds: 100,
            local_rounds: 5,
            inner_steps: 5,
            lr_phi: 0.01,
            lr_theta: 0.01,
            kl_weight: 1.0,
            kl_scale: 1.0,
            mc_samples: 5,
            batch_size: 50,
            mode: Mode::FedAbml,
            aggregation: AggregationStrategy::Oracle,
            seed: 0,
            size_weighted: false,
            theta_grad: ThetaGradEstimator::ClosedForm,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::InvalidParam {
                name: "n_clients",
                reason: "must be positive",
            });
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::InvalidParam {
                name: "participation",
                reason: "must lie in (0, 1]",
            });
        }
        if self.rounds == 0 {
            return Err(Error::InvalidParam {
                name: "rounds",
                reason: "must be positive",
            });
        }
        if self.local_rounds == 0 {
            return Err(Error::InvalidParam {
                name: "local_rounds",
                reason: "must be positive",
            });
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidParam {
                name: "inner_steps",
                reason: "must be positive",
            });
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidParam {
                name: "mc_samples",
                reason: "must be positive",
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam {
                name: "batch_size",
                reason: "must be positive",
            });
        }
        if !(self.lr_phi > 0.0 && self.lr_phi.is_finite()) {
            return Err(Error::InvalidParam {
                name: "lr_phi",
                reason: "must be positive and finite",
            });
        }
        // lr_theta = 0 is allowed: it freezes the prior, which is a useful
        // control in its own right.
        if !(self.lr_theta >= 0.0 && self.lr_theta.is_finite()) {
            return Err(Error::InvalidParam {
                name: "lr_theta",
                reason: "must be non-negative and finite",
            });
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::InvalidParam {
                name: "kl_weight",
                reason: "must be non-negative and finite",
            });
        }
        if !(self.kl_scale > 0.0 && self.kl_scale.is_finite()) {
            return Err(Error::InvalidParam {
                name: "kl_scale",
                reason: "must be positive and finite",
            });
        }
        match &self.mode {
            Mode::PerFedAvg { alpha } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::InvalidParam {
                        name: "alpha",
                        reason: "must be positive and finite",
                    });
                }
            }
            Mode::PFedMeStyle {
                lambda_reg,
                fixed_nu,
            } => {
                if !(*lambda_reg >= 0.0 && lambda_reg.is_finite()) {
                    return Err(Error::InvalidParam {
                        name: "lambda_reg",
                        reason: "must be non-negative and finite",
                    });
                }
                if !(*fixed_nu >= NU_MIN && *fixed_nu <= NU_MAX) {
                    return Err(Error::InvalidParam {
                        name: "fixed_nu",
                        reason: "must lie within the log-std clamp range",
                    });
                }
            }
            Mode::FedAbml | Mode::FedAvg => {}
        }
        Ok(())
    }

    /// Number of clients selected per round: ⌈participation · N⌉, clamped to
    /// [1, N]. The epsilon guards against `0.1 × 10` landing a hair above 1.
    pub fn clients_per_round(&self) -> usize {
        let raw = libm::ceil(self.participation * self.n_clients as f64 - 1e-9) as usize;
        raw.clamp(1, self.n_clients)
    }
}

/// One client as the server sees it: its data split and its personalized
/// posterior, which persists between participations.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub train: ClientShard,
    pub test: ClientShard,
    pub phi: MeanFieldGaussian,
}

/// What a client hands back to the server.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    /// The locally advanced prior; the server fuses these.
    pub theta: MeanFieldGaussian,
    /// The personalized posterior; kept client-side for evaluation.
    pub phi: MeanFieldGaussian,
    /// Mean training loss across this client's step evaluations.
    pub mean_loss: f64,
}

fn guard_loss(loss: f64, round: u64, client: usize) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            round: round as usize,
            client,
            loss,
        });
    }
    Ok(())
}

/// Uniform selection of ⌈τN⌉ distinct clients for a round, keyed purely by
/// (seed, round); returned sorted by id.
pub fn select_clients(cfg: &FedConfig, round: u64) -> Vec<usize> {
    let m = cfg.clients_per_round();
    let mut rng = rng::stream(cfg.seed, Purpose::Selection, round, 0);
    let mut picked = rand::seq::index::sample(&mut rng, cfg.n_clients, m).into_vec();
    picked.sort_unstable();
    picked
}

fn theta_kl_grad(
    phi: &MeanFieldGaussian,
    theta: &MeanFieldGaussian,
    cfg: &FedConfig,
    rng: &mut impl Rng,
) -> Result<GaussianGrad> {
    match cfg.theta_grad {
        ThetaGradEstimator::ClosedForm => varinf::kl_grad_wrt_p(phi, theta),
        ThetaGradEstimator::Sampled => {
            let samples: Vec<Vec<f64>> = (0..cfg.mc_samples)
                .map(|_| phi.sample(&standard_normals(rng, phi.dim())))
                .collect::<Result<_>>()?;
            varinf::kl_grad_wrt_p_sampled(theta, &samples)
        }
    }
}

struct LossTracker {
    sum: f64,
    count: usize,
}

impl LossTracker {
    fn new() -> Self {
        LossTracker { sum: 0.0, count: 0 }
    }

    fn push(&mut self, loss: f64, round: u64, client: usize) -> Result<()> {
        guard_loss(loss, round, client)?;
        self.sum += loss;
        self.count += 1;
        Ok(())
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

fn update_fedabml(
    spec: &ModelSpec,
    theta_t: &MeanFieldGaussian,
    shard: &ClientShard,
    cfg: &FedConfig,
    round: u64,
    rng: &mut impl Rng,
) -> Result<LocalUpdate> {
    let mut phi = theta_t.clone();
    let mut theta = theta_t.clone();
    let n_i = shard.len();
    let mut tracker = LossTracker::new();
    for _ in 0..cfg.local_rounds {
        let mut order: Vec<usize> = (0..n_i).collect();
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = shard.minibatch(chunk);
            let settings = ElboSettings {
                mc_samples: cfg.mc_samples,
                kl_weight: cfg.kl_weight,
                kl_scale: cfg.kl_scale,
                nll_scale: n_i as f64 / chunk.len() as f64,
            };
            for _ in 0..cfg.inner_steps {
                let out = bnn::elbo_loss(spec, &phi, &theta, &batch, &settings, rng)?;
                tracker.push(out.loss, round, shard.client_id)?;
                phi.step(&out.grad_posterior, cfg.lr_phi)?;
            }
            // One prior step against the freshly updated posterior. This
            // always runs (even at lr 0) so the draw stream is the same for
            // every configuration.
            let mut grad = theta_kl_grad(&phi, &theta, cfg, rng)?;
            grad.scale(cfg.kl_weight * cfg.kl_scale);
            theta.step(&grad, cfg.lr_theta)?;
        }
    }
    Ok(LocalUpdate {
        theta,
        phi,
        mean_loss: tracker.mean(),
    })
}

fn update_fedavg(
    spec: &ModelSpec,
    theta_t: &MeanFieldGaussian,
    shard: &ClientShard,
    cfg: &FedConfig,
    round: u64,
    rng: &mut impl Rng,
) -> Result<LocalUpdate> {
    let mut w = theta_t.mean().to_vec();
    let n_i = shard.len();
    let mut tracker = LossTracker::new();
    for _ in 0..cfg.local_rounds {
        let mut order: Vec<usize> = (0..n_i).collect();
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = shard.minibatch(chunk);
            let scale = n_i as f64 / chunk.len() as f64;
            let (loss, grad) = bnn::nll_and_grad(spec, &w, &batch)?;
            tracker.push(loss * scale, round, shard.client_id)?;
            for (wj, gj) in w.iter_mut().zip(&grad) {
                *wj -= cfg.lr_phi * scale * gj;
            }
        }
    }
    let theta = MeanFieldGaussian::point(w)?;
    Ok(LocalUpdate {
        phi: theta.clone(),
        theta,
        mean_loss: tracker.mean(),
    })
}

fn update_per_fedavg(
    spec: &ModelSpec,
    theta_t: &MeanFieldGaussian,
    shard: &ClientShard,
    cfg: &FedConfig,
    alpha: f64,
    round: u64,
    rng: &mut impl Rng,
) -> Result<LocalUpdate> {
    let mut w = theta_t.mean().to_vec();
    let n_i = shard.len();
    let mut tracker = LossTracker::new();
    for _ in 0..cfg.local_rounds {
        let mut order: Vec<usize> = (0..n_i).collect();
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = shard.minibatch(chunk);
            let scale = n_i as f64 / chunk.len() as f64;
            let (loss, grad) = bnn::nll_and_grad(spec, &w, &batch)?;
            tracker.push(loss * scale, round, shard.client_id)?;
            // Adapt with the inner rate, then take the meta step on the
            // post-adaptation gradient of the same batch (first-order).
            let adapted: Vec<f64> = w
                .iter()
                .zip(&grad)
                .map(|(wj, gj)| wj - alpha * scale * gj)
                .collect();
            let (adapted_loss, meta_grad) = bnn::nll_and_grad(spec, &adapted, &batch)?;
            guard_loss(adapted_loss * scale, round, shard.client_id)?;
            for (wj, gj) in w.iter_mut().zip(&meta_grad) {
                *wj -= cfg.lr_theta * scale * gj;
            }
        }
    }
    // The personalized model is one full-batch adaptation away from the
    // final local weights.
    let phi_mean = per_fedavg_update(spec, &w, shard.data(), alpha, 1)?;
    Ok(LocalUpdate {
        theta: MeanFieldGaussian::point(w)?,
        phi: MeanFieldGaussian::point(phi_mean)?,
        mean_loss: tracker.mean(),
    })
}

fn update_pfedme(
    spec: &ModelSpec,
    theta_t: &MeanFieldGaussian,
    shard: &ClientShard,
    cfg: &FedConfig,
    lambda_reg: f64,
    fixed_nu: f64,
    round: u64,
    rng: &mut impl Rng,
) -> Result<LocalUpdate> {
    let d = theta_t.dim();
    let mut phi = MeanFieldGaussian::new(theta_t.mean().to_vec(), vec![fixed_nu; d])?;
    let mut theta_mean = theta_t.mean().to_vec();
    let n_i = shard.len();
    let mut tracker = LossTracker::new();
    let zero_nu_grad = vec![0.0; d];
    for _ in 0..cfg.local_rounds {
        let mut order: Vec<usize> = (0..n_i).collect();
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = shard.minibatch(chunk);
            let scale = n_i as f64 / chunk.len() as f64;
            for _ in 0..cfg.inner_steps {
                let (loss, grad_mean) = pfedme_mode_loss(
                    spec,
                    phi.mean(),
                    &theta_mean,
                    &batch,
                    lambda_reg,
                    fixed_nu,
                    cfg.mc_samples,
                    scale,
                    rng,
                )?;
                tracker.push(loss, round, shard.client_id)?;
                let grad = GaussianGrad {
                    mean: grad_mean,
                    log_std: zero_nu_grad.clone(),
                };
                phi.step(&grad, cfg.lr_phi)?;
            }
            // Prior step on the quadratic tether only.
            for (tj, pj) in theta_mean.iter_mut().zip(phi.mean()) {
                *tj -= cfg.lr_theta * lambda_reg * (*tj - pj);
            }
        }
    }
    let theta = MeanFieldGaussian::new(theta_mean, theta_t.log_std().to_vec())?;
    Ok(LocalUpdate {
        theta,
        phi,
        mean_loss: tracker.mean(),
    })
}

/// Runs one client's local work against an immutable prior snapshot.
/// Randomness is keyed by (seed, round, client id), so the result is a pure
/// function of its arguments and is independent of scheduling.
pub fn client_update(
    spec: &ModelSpec,
    theta_t: &MeanFieldGaussian,
    shard: &ClientShard,
    cfg: &FedConfig,
    round: u64,
) -> Result<LocalUpdate> {
    if shard.is_empty() {
        return Err(Error::Empty("client shard"));
    }
    if theta_t.dim() != spec.param_count() {
        return Err(Error::DimMismatch {
            context: "prior dimension",
            expected: spec.param_count(),
            got: theta_t.dim(),
        });
    }
    let mut rng = rng::stream(cfg.seed, Purpose::Client, round, shard.client_id as u64);
    match cfg.mode.clone() {
        Mode::FedAbml => update_fedabml(spec, theta_t, shard, cfg, round, &mut rng),
        Mode::FedAvg => update_fedavg(spec, theta_t, shard, cfg, round, &mut rng),
        Mode::PerFedAvg { alpha } => {
            update_per_fedavg(spec, theta_t, shard, cfg, alpha, round, &mut rng)
        }
        Mode::PFedMeStyle {
            lambda_reg,
            fixed_nu,
        } => update_pfedme(
            spec, theta_t, shard, cfg, lambda_reg, fixed_nu, round, &mut rng,
        ),
    }
}

/// `steps` plain gradient descent steps on the batch-summed negative
/// log-likelihood, starting from `theta_mean` with rate `alpha`.
pub fn per_fedavg_update(
    spec: &ModelSpec,
    theta_mean: &[f64],
    batch: &Batch,
    alpha: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParam {
            name: "alpha",
            reason: "must be positive and finite",
        });
    }
    let mut w = theta_mean.to_vec();
    for _ in 0..steps {
        let (_, grad) = bnn::nll_and_grad(spec, &w, batch)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "adaptation gradient",
            });
        }
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= alpha * gj;
        }
    }
    Ok(w)
}

/// Proximal-mode objective: `nll_scale · E_q[NLL] + lambda_reg/2 ‖φ − θ‖²`
/// with an isotropic sampling width `exp(fixed_nu)`. Returns the loss and
/// its gradient with respect to the posterior mean.
#[allow(clippy::too_many_arguments)]
pub fn pfedme_mode_loss(
    spec: &ModelSpec,
    phi_mean: &[f64],
    theta_mean: &[f64],
    batch: &Batch,
    lambda_reg: f64,
    fixed_nu: f64,
    mc_samples: usize,
    nll_scale: f64,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<f64>)> {
    let d = phi_mean.len();
    if theta_mean.len() != d {
        return Err(Error::DimMismatch {
            context: "proximal tether",
            expected: d,
            got: theta_mean.len(),
        });
    }
    if mc_samples == 0 {
        return Err(Error::InvalidParam {
            name: "mc_samples",
            reason: "need at least one Monte Carlo sample",
        });
    }
    let sigma = libm::exp(fixed_nu);
    let inv_s = 1.0 / mc_samples as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    for _ in 0..mc_samples {
        let noise = standard_normals(rng, d);
        let w: Vec<f64> = phi_mean
            .iter()
            .zip(&noise)
            .map(|(m, e)| m + sigma * e)
            .collect();
        let (nll, grad_w) = bnn::nll_and_grad(spec, &w, batch)?;
        loss += nll_scale * inv_s * nll;
        for (gj, gw) in grad.iter_mut().zip(&grad_w) {
            // dw/dφ_mean is the identity under the reparameterization.
            *gj += nll_scale * inv_s * gw;
        }
    }
    let mut prox = 0.0;
    for j in 0..d {
        let diff = phi_mean[j] - theta_mean[j];
        prox += diff * diff;
        grad[j] += lambda_reg * diff;
    }
    loss += 0.5 * lambda_reg * prox;
    Ok((loss, grad))
}

/// Per-round statistics handed back by [`server_round`].
#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub theta: MeanFieldGaussian,
    pub selected: Vec<usize>,
    pub mean_local_loss: f64,
    pub std_local_loss: f64,
}

/// One communication round: select clients, run their local updates against
/// the immutable `theta_t` snapshot, fuse the returned priors, and store the
/// refreshed posteriors. With the `parallel` feature the per-client work
/// fans out over threads; results are identical either way because every
/// client's randomness is keyed, not shared.
pub fn server_round(
    spec: &ModelSpec,
    theta_t: &MeanFieldGaussian,
    clients: &mut [ClientState],
    cfg: &FedConfig,
    round: u64,
) -> Result<RoundOutcome> {
    if clients.is_empty() {
        return Err(Error::Empty("clients"));
    }
    if clients.len() != cfg.n_clients {
        return Err(Error::DimMismatch {
            context: "client roster",
            expected: cfg.n_clients,
            got: clients.len(),
        });
    }
    let selected = select_clients(cfg, round);
    let run_one = |&id: &usize| -> Result<LocalUpdate> {
        client_update(spec, theta_t, &clients[id].train, cfg, round)
    };
    #[cfg(feature = "parallel")]
    let updates: Vec<LocalUpdate> = selected.par_iter().map(run_one).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let updates: Vec<LocalUpdate> = selected.iter().map(run_one).collect::<Result<_>>()?;

    let weights: Vec<f64> = if cfg.size_weighted {
        let total: usize = selected.iter().map(|&id| clients[id].train.len()).sum();
        selected
            .iter()
            .map(|&id| clients[id].train.len() as f64 / total as f64)
            .collect()
    } else {
        vec![1.0 / selected.len() as f64; selected.len()]
    };
    let locals: Vec<MeanFieldGaussian> = updates.iter().map(|u| u.theta.clone()).collect();
    let theta = varinf::aggregate(&locals, &weights, cfg.aggregation)?;

    let n = updates.len() as f64;
    let mean_local_loss = updates.iter().map(|u| u.mean_loss).sum::<f64>() / n;
    let std_local_loss = libm::sqrt(
        updates
            .iter()
            .map(|u| {
                let d = u.mean_loss - mean_local_loss;
                d * d
            })
            .sum::<f64>()
            / n,
    );
    for (id, update) in selected.iter().zip(updates) {
        clients[*id].phi = update.phi;
    }
    Ok(RoundOutcome {
        theta,
        selected,
        mean_local_loss,
        std_local_loss,
    })
}

/// One round's record in the history.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundRecord {
    pub round: u64,
    pub selected: Vec<usize>,
    pub mean_local_loss: f64,
    pub std_local_loss: f64,
    pub eval: EvalReport,
    /// Distance of the prior mean to a closed-form reference point, when the
    /// task has one.
    pub dist_to_target: Option<f64>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub round: u64,
    pub theta: MeanFieldGaussian,
    pub phis: Vec<MeanFieldGaussian>,
    pub history: Vec<RoundRecord>,
}

/// Drives [`server_round`] for `cfg.rounds` rounds, evaluating every client
/// on its test shard after each round and appending to the history. Fully
/// deterministic in `cfg.seed`.
pub struct Trainer {
    spec: ModelSpec,
    cfg: FedConfig,
    clients: Vec<ClientState>,
    theta: MeanFieldGaussian,
    round: u64,
    history: Vec<RoundRecord>,
    target: Option<Vec<f64>>,
}

impl Trainer {
    /// Builds a fresh run: the prior is initialized from the seed's init
    /// stream and every client's posterior starts at the prior. `data` holds
    /// one (train, test) shard pair per client, ordered by client id.
    pub fn new(
        spec: ModelSpec,
        cfg: FedConfig,
        data: Vec<(ClientShard, ClientShard)>,
    ) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        if data.len() != cfg.n_clients {
            return Err(Error::DimMismatch {
                context: "client shard pairs",
                expected: cfg.n_clients,
                got: data.len(),
            });
        }
        for (i, (train, test)) in data.iter().enumerate() {
            if train.client_id != i || test.client_id != i {
                return Err(Error::InvalidParam {
                    name: "client_id",
                    reason: "shards must be ordered by client id",
                });
            }
            if train.data().features().cols() != spec.input_dim()
                || test.data().features().cols() != spec.input_dim()
            {
                return Err(Error::DimMismatch {
                    context: "shard feature width",
                    expected: spec.input_dim(),
                    got: train.data().features().cols(),
                });
            }
        }
        let mut init_rng = rng::stream(cfg.seed, Purpose::Init, 0, 0);
        let theta = spec.init(&mut init_rng)?;
        let clients = data
            .into_iter()
            .enumerate()
            .map(|(client_id, (train, test))| ClientState {
                client_id,
                train,
                test,
                phi: theta.clone(),
            })
            .collect();
        Ok(Trainer {
            spec,
            cfg,
            clients,
            theta,
            round: 0,
            history: Vec::new(),
            target: None,
        })
    }

    /// Restores a trainer from a saved state; `data` must describe the same
    /// clients the state was taken from.
    pub fn from_state(
        spec: ModelSpec,
        cfg: FedConfig,
        data: Vec<(ClientShard, ClientShard)>,
        state: TrainState,
    ) -> Result<Self> {
        let mut trainer = Trainer::new(spec, cfg, data)?;
        if state.phis.len() != trainer.clients.len() {
            return Err(Error::DimMismatch {
                context: "restored posteriors",
                expected: trainer.clients.len(),
                got: state.phis.len(),
            });
        }
        let dim = trainer.spec.param_count();
        if state.theta.dim() != dim || state.phis.iter().any(|p| p.dim() != dim) {
            return Err(Error::DimMismatch {
                context: "restored parameter dimension",
                expected: dim,
                got: state.theta.dim(),
            });
        }
        trainer.theta = state.theta;
        for (client, phi) in trainer.clients.iter_mut().zip(state.phis) {
            client.phi = phi;
        }
        trainer.round = state.round;
        trainer.history = state.history;
        Ok(trainer)
    }

    /// Snapshot of the mutable run state, sufficient for a bitwise resume.
    pub fn state(&self) -> TrainState {
        TrainState {
            round: self.round,
            theta: self.theta.clone(),
            phis: self.clients.iter().map(|c| c.phi.clone()).collect(),
            history: self.history.clone(),
        }
    }

    /// Registers a closed-form reference point; each round's record then
    /// carries the prior mean's distance to it.
    pub fn with_target(mut self, target: Vec<f64>) -> Result<Self> {
        if target.len() != self.theta.dim() {
            return Err(Error::DimMismatch {
                context: "reference target",
                expected: self.theta.dim(),
                got: target.len(),
            });
        }
        self.target = Some(target);
        Ok(self)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn theta(&self) -> &MeanFieldGaussian {
        &self.theta
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Runs one communication round and returns its record.
    pub fn step_round(&mut self) -> Result<&RoundRecord> {
        let outcome = server_round(
            &self.spec,
            &self.theta,
            &mut self.clients,
            &self.cfg,
            self.round,
        )?;
        self.theta = outcome.theta;
        // Baselines without a persistent per-client posterior evaluate
        // through the fused model instead.
        match self.cfg.mode {
            Mode::FedAvg => {
                for client in &mut self.clients {
                    client.phi = self.theta.clone();
                }
            }
            Mode::PerFedAvg { alpha } => {
                for client in &mut self.clients {
                    let adapted = per_fedavg_update(
                        &self.spec,
                        self.theta.mean(),
                        client.train.data(),
                        alpha,
                        1,
                    )?;
                    client.phi = MeanFieldGaussian::point(adapted)?;
                }
            }
            Mode::FedAbml | Mode::PFedMeStyle { .. } => {}
        }
        let pairs: Vec<(&MeanFieldGaussian, &ClientShard)> = self
            .clients
            .iter()
            .map(|c| (&c.phi, &c.test))
            .collect();
        let eval = metrics::evaluate_clients(
            &self.spec,
            &pairs,
            self.cfg.mc_samples,
            self.cfg.seed,
            self.round,
        )?;
        let dist_to_target = match &self.target {
            Some(t) => Some(metrics::distance_to_target(self.theta.mean(), t)?),
            None => None,
        };
        self.history.push(RoundRecord {
            round: self.round,
            selected: outcome.selected,
            mean_local_loss: outcome.mean_local_loss,
            std_local_loss: outcome.std_local_loss,
            eval,
            dist_to_target,
        });
        self.round += 1;
        Ok(self.history.last().expect("just pushed"))
    }

    /// Runs until `cfg.rounds` rounds have completed.
    pub fn run(&mut self) -> Result<()> {
        while self.round < self.cfg.rounds {
            self.step_round()?;
        }
        Ok(())
    }
}

/// Adapts a trained prior to one new client's data: posterior-only steps
/// with the prior frozen, evaluated on the test shard after every epoch.
/// Returns the adapted posterior and epochs+1 reports (index 0 is the
/// unadapted prior).
pub fn personalize(
    spec: &ModelSpec,
    theta_star: &MeanFieldGaussian,
    train: &ClientShard,
    test: &ClientShard,
    epochs: usize,
    cfg: &FedConfig,
) -> Result<(MeanFieldGaussian, Vec<ClientEval>)> {
    if train.is_empty() {
        return Err(Error::Empty("personalization shard"));
    }
    cfg.validate()?;
    let mut phi = theta_star.clone();
    let n_i = train.len();
    let eval_phi = |phi: &MeanFieldGaussian, epoch: usize| -> Result<ClientEval> {
        let report = metrics::evaluate_clients(
            spec,
            &[(phi, test)],
            cfg.mc_samples,
            cfg.seed,
            epoch as u64,
        )?;
        Ok(report.per_client.into_iter().next().expect("one client"))
    };
    let mut reports = Vec::with_capacity(epochs + 1);
    reports.push(eval_phi(&phi, 0)?);
    for epoch in 1..=epochs {
        let mut rng = rng::stream(
            cfg.seed,
            Purpose::Personalize,
            epoch as u64,
            train.client_id as u64,
        );
        let mut order: Vec<usize> = (0..n_i).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.minibatch(chunk);
            let settings = ElboSettings {
                mc_samples: cfg.mc_samples,
                kl_weight: cfg.kl_weight,
                kl_scale: cfg.kl_scale,
                nll_scale: n_i as f64 / chunk.len() as f64,
            };
            for _ in 0..cfg.inner_steps {
                let out = bnn::elbo_loss(spec, &phi, theta_star, &batch, &settings, &mut rng)?;
                guard_loss(out.loss, epoch as u64, train.client_id)?;
                phi.step(&out.grad_posterior, cfg.lr_phi)?;
            }
        }
        reports.push(eval_phi(&phi, epoch)?);
    }
    Ok((phi, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::{Activation, BatchTargets, Likelihood};
    use crate::linalg::Matrix;
    use crate::tasks::{self, ShiftKind};
    use approx::assert_abs_diff_eq;

    fn toy_spec(d: usize) -> ModelSpec {
        ModelSpec::new(
            vec![d, 1],
            Activation::Identity,
            Likelihood::Gaussian {
                sigma: tasks::TOY_NOISE_STD,
            },
        )
        .unwrap()
    }

    fn toy_fixture(seed_unit: u64, n: usize) -> tasks::ToyTask {
        let mut rng = rng::stream(3, Purpose::Data, 0, seed_unit);
        tasks::gen_toy_lsq(2, n, 1.5, &mut rng).unwrap()
    }

    fn blob_fixture() -> Vec<(ClientShard, ClientShard)> {
        let mut rng = rng::stream(5, Purpose::Data, 0, 0);
        let data = tasks::gen_blobs(4, 2, 30, 0.8, &mut rng).unwrap();
        let part = tasks::partition_by_label(&data, 4, 2, 25, &mut rng).unwrap();
        part.shards
            .into_iter()
            .map(|shard| shard.split(0.2, &mut rng).unwrap())
            .collect()
    }

    fn blob_spec() -> ModelSpec {
        ModelSpec::new(vec![2, 8, 4], Activation::Tanh, Likelihood::Categorical).unwrap()
    }

    #[test]
    fn default_config_passes_its_own_validation() {
        let cfg = FedConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.clients_per_round(), 1);
    }

    #[test]
    fn validation_rejects_out_of_domain_fields() {
        let mut cfg = FedConfig::default();
        cfg.participation = 0.0;
        assert!(matches!(
            cfg.validate(),
            Err(Error::InvalidParam {
                name: "participation",
                ..
            })
        ));
        let mut cfg = FedConfig::default();
        cfg.inner_steps = 0;
        assert!(matches!(
            cfg.validate(),
            Err(Error::InvalidParam {
                name: "inner_steps",
                ..
            })
        ));
        let mut cfg = FedConfig::default();
        cfg.lr_phi = 0.0;
        assert!(matches!(
            cfg.validate(),
            Err(Error::InvalidParam { name: "lr_phi", .. })
        ));
        let mut cfg = FedConfig::default();
        cfg.mode = Mode::PerFedAvg { alpha: -0.1 };
        assert!(matches!(
            cfg.validate(),
            Err(Error::InvalidParam { name: "alpha", .. })
        ));
    }

    #[test]
    fn selection_size_follows_the_ceiling_rule() {
        let mut cfg = FedConfig::default();
        cfg.n_clients = 10;
        cfg.participation = 0.1;
        assert_eq!(select_clients(&cfg, 0).len(), 1);
        cfg.participation = 0.25;
        assert_eq!(select_clients(&cfg, 0).len(), 3);
        cfg.participation = 1.0;
        let all = select_clients(&cfg, 0);
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // Same key, same pick; different rounds move.
        cfg.participation = 0.3;
        assert_eq!(select_clients(&cfg, 7), select_clients(&cfg, 7));
        let mut ids = select_clients(&cfg, 7);
        ids.dedup();
        assert_eq!(ids.len(), 3, "selection must be without replacement");
    }

    #[test]
    fn selection_frequencies_are_uniform_across_rounds() {
        let mut cfg = FedConfig::default();
        cfg.n_clients = 10;
        cfg.participation = 0.3;
        cfg.seed = 99;
        let rounds = 10_000u64;
        let mut counts = [0u32; 10];
        for round in 0..rounds {
            for id in select_clients(&cfg, round) {
                counts[id] += 1;
            }
        }
        // Binomial(10^4, 0.3): mean 3000, three standard deviations ≈ 137.5.
        for (id, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - 3000.0).abs() <= 138.0,
                "client {id} selected {c} times"
            );
        }
    }

    #[test]
    fn a_frozen_prior_rate_returns_theta_unchanged() {
        let task = toy_fixture(0, 16);
        let spec = toy_spec(2);
        let mut cfg = FedConfig::default();
        cfg.n_clients = 2;
        cfg.lr_theta = 0.0;
        cfg.local_rounds = 2;
        cfg.inner_steps = 2;
        cfg.mc_samples = 2;
        cfg.batch_size = 8;
        let mut init = rng::stream(cfg.seed, Purpose::Init, 0, 0);
        let theta = spec.init(&mut init).unwrap();
        let upd = client_update(&spec, &theta, &task.shards[0], &cfg, 0).unwrap();
        assert_eq!(upd.theta.mean(), theta.mean());
        assert_eq!(upd.theta.log_std(), theta.log_std());
        assert_ne!(upd.phi.mean(), theta.mean());
    }

    #[test]
    fn fedavg_mode_matches_a_handwritten_reference() {
        let task = toy_fixture(1, 14);
        let shard = &task.shards[0];
        let spec = toy_spec(2);
        let mut cfg = FedConfig::default();
        cfg.n_clients = 2;
        cfg.mode = Mode::FedAvg;
        cfg.local_rounds = 2;
        cfg.batch_size = 4;
        cfg.lr_phi = 0.003;
        cfg.seed = 21;
        let theta = MeanFieldGaussian::point(vec![0.2, -0.1, 0.05]).unwrap();
        let upd = client_update(&spec, &theta, shard, &cfg, 5).unwrap();

        // Reference: plain SGD over the same shuffled minibatches with the
        // batch-sum gradient scaled to a full-shard estimate.
        let mut rng = rng::stream(cfg.seed, Purpose::Client, 5, 0);
        let mut w = theta.mean().to_vec();
        let n = shard.len();
        for _ in 0..cfg.local_rounds {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch = shard.minibatch(chunk);
                let (_, grad) = bnn::nll_and_grad(&spec, &w, &batch).unwrap();
                let scale = n as f64 / chunk.len() as f64;
                for (wj, gj) in w.iter_mut().zip(&grad) {
                    *wj -= cfg.lr_phi * scale * gj;
                }
            }
        }
        for (a, b) in upd.theta.mean().iter().zip(&w) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn adaptation_matches_the_linear_regression_gradient_formula() {
        let task = toy_fixture(2, 12);
        let client = &task.clients[0];
        let shard = &task.shards[0];
        let spec = toy_spec(2);
        let theta = vec![0.3, -0.2, 0.1];
        let alpha = 0.004;
        let adapted = per_fedavg_update(&spec, &theta, shard.data(), alpha, 1).unwrap();
        // Closed form: θ − α Xᵀ(Xθ − y)/σ² over the bias-augmented design.
        let design = client.design();
        let residual: Vec<f64> = (0..design.rows())
            .map(|r| crate::linalg::dot(design.row(r), &theta) - client.targets()[r])
            .collect();
        let grad = design.tmul_vec(&residual).unwrap();
        for j in 0..3 {
            let expect =
                theta[j] - alpha * grad[j] / (tasks::TOY_NOISE_STD * tasks::TOY_NOISE_STD);
            assert_abs_diff_eq!(adapted[j], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn adaptation_is_fixed_at_a_stationary_point() {
        // Targets generated exactly by the weights leave a zero gradient.
        let spec = toy_spec(2);
        let w = vec![1.0, -2.0, 0.5];
        let features = Matrix::from_vec(4, 2, vec![0.5, 1.0, -1.0, 0.25, 2.0, -0.5, 0.0, 1.5])
            .unwrap();
        let targets: Vec<f64> = (0..4)
            .map(|r| {
                let row = features.row(r);
                row[0] * w[0] + row[1] * w[1] + w[2]
            })
            .collect();
        let batch = Batch::new(
            features,
            BatchTargets::Regression(Matrix::from_vec(4, 1, targets).unwrap()),
        )
        .unwrap();
        let adapted = per_fedavg_update(&spec, &w, &batch, 0.1, 3).unwrap();
        for (a, b) in adapted.iter().zip(&w) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn the_point_limit_collapses_to_plain_adaptation() {
        // With the divergence weight at zero, one inner step per batch, one
        // epoch, a full batch, and a point prior, the local posterior step is
        // plain gradient adaptation up to the floor-level sampling width.
        let task = toy_fixture(3, 8);
        let shard = &task.shards[0];
        let spec = toy_spec(2);
        let mut cfg = FedConfig::default();
        cfg.n_clients = 2;
        cfg.kl_weight = 0.0;
        cfg.inner_steps = 1;
        cfg.local_rounds = 1;
        cfg.batch_size = 64;
        cfg.mc_samples = 200;
        cfg.lr_phi = 0.01;
        cfg.lr_theta = 0.0;
        let theta = MeanFieldGaussian::point(vec![0.4, 0.1, -0.3]).unwrap();
        let upd = client_update(&spec, &theta, shard, &cfg, 2).unwrap();
        let adapted =
            per_fedavg_update(&spec, theta.mean(), shard.data(), cfg.lr_phi, 1).unwrap();
        for (a, b) in upd.phi.mean().iter().zip(&adapted) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn proximal_gradient_matches_the_divergence_identity() {
        // With equal isotropic widths on both sides, the Gaussian divergence
        // reduces to the quadratic tether; with the divergence weight set to
        // lambda_reg·σ² the two objectives and their mean-gradients coincide
        // draw for draw.
        let task = toy_fixture(4, 6);
        let shard = &task.shards[0];
        let spec = toy_spec(2);
        let fixed_nu = -1.0;
        let lambda_reg = 2.0;
        let sigma_sq = libm::exp(2.0 * fixed_nu);
        let phi_mean = vec![0.3, -0.4, 0.2];
        let theta_mean = vec![-0.1, 0.25, 0.05];
        let s = 3;
        let batch = shard.data();

        let mut rng_a = rng::stream(17, Purpose::Client, 0, 0);
        let (prox_loss, prox_grad) = pfedme_mode_loss(
            &spec,
            &phi_mean,
            &theta_mean,
            batch,
            lambda_reg,
            fixed_nu,
            s,
            1.0,
            &mut rng_a,
        )
        .unwrap();

        let q = MeanFieldGaussian::new(phi_mean.clone(), vec![fixed_nu; 3]).unwrap();
        let p = MeanFieldGaussian::new(theta_mean.clone(), vec![fixed_nu; 3]).unwrap();
        let settings = ElboSettings {
            mc_samples: s,
            kl_weight: lambda_reg * sigma_sq,
            kl_scale: 1.0,
            nll_scale: 1.0,
        };
        let mut rng_b = rng::stream(17, Purpose::Client, 0, 0);
        let out = bnn::elbo_loss(&spec, &q, &p, batch, &settings, &mut rng_b).unwrap();

        assert_abs_diff_eq!(prox_loss, out.loss, epsilon = 1e-8);
        for (a, b) in prox_grad.iter().zip(&out.grad_posterior.mean) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn proximal_tether_vanishes_at_equality_and_dominates_when_large() {
        let task = toy_fixture(5, 6);
        let batch = task.shards[0].data();
        let spec = toy_spec(2);
        let mean = vec![0.2, -0.3, 0.4];
        let mut rng = rng::stream(19, Purpose::Client, 0, 0);
        let (loss_tethered, _) = pfedme_mode_loss(
            &spec, &mean, &mean, batch, 5.0, -1.0, 4, 1.0, &mut rng,
        )
        .unwrap();
        let mut rng = rng::stream(19, Purpose::Client, 0, 0);
        let (loss_free, _) = pfedme_mode_loss(
            &spec, &mean, &mean, batch, 0.0, -1.0, 4, 1.0, &mut rng,
        )
        .unwrap();
        assert_abs_diff_eq!(loss_tethered, loss_free, epsilon = 1e-12);

        // A huge tether pins the minimizer to θ.
        let theta = vec![0.0, 0.0, 0.0];
        let mut phi = vec![0.5, -0.5, 0.5];
        let lambda_reg = 1e6;
        let lr = 5e-7;
        let mut rng = rng::stream(23, Purpose::Client, 0, 0);
        for _ in 0..60 {
            let (_, grad) = pfedme_mode_loss(
                &spec, &phi, &theta, batch, lambda_reg, -1.0, 2, 1.0, &mut rng,
            )
            .unwrap();
            for (pj, gj) in phi.iter_mut().zip(&grad) {
                *pj -= lr * gj;
            }
        }
        for (pj, tj) in phi.iter().zip(&theta) {
            assert_abs_diff_eq!(pj, tj, epsilon = 1e-3);
        }
    }

    fn toy_trainer_data(task: &tasks::ToyTask) -> Vec<(ClientShard, ClientShard)> {
        task.shards
            .iter()
            .map(|s| (s.clone(), s.clone()))
            .collect()
    }

    #[test]
    fn a_singleton_round_adopts_that_clients_prior() {
        let task = toy_fixture(6, 10);
        let spec = toy_spec(2);
        let mut cfg = FedConfig::default();
        cfg.n_clients = 2;
        cfg.participation = 0.5;
        cfg.local_rounds = 1;
        cfg.inner_steps = 2;
        cfg.mc_samples = 2;
        cfg.batch_size = 16;
        cfg.seed = 31;
        let mut init = rng::stream(cfg.seed, Purpose::Init, 0, 0);
        let theta = spec.init(&mut init).unwrap();
        let mut clients: Vec<ClientState> = task
            .shards
            .iter()
            .map(|s| ClientState {
                client_id: s.client_id,
                train: s.clone(),
                test: s.clone(),
                phi: theta.clone(),
            })
            .collect();
        let outcome = server_round(&spec, &theta, &mut clients, &cfg, 0).unwrap();
        assert_eq!(outcome.selected.len(), 1);
        let id = outcome.selected[0];
        let alone = client_update(&spec, &theta, &clients[id].train, &cfg, 0).unwrap();
        assert_eq!(outcome.theta.mean(), alone.theta.mean());
        assert_eq!(outcome.theta.log_std(), alone.theta.log_std());
        assert_eq!(clients[id].phi.mean(), alone.phi.mean());
    }

    #[test]
    fn a_full_round_matches_direct_recomputation() {
        let mut rng = rng::stream(7, Purpose::Data, 0, 1);
        let data = tasks::gen_blobs(3, 2, 12, 0.7, &mut rng).unwrap();
        let part = tasks::partition_by_label(&data, 3, 2, 12, &mut rng).unwrap();
        let spec = ModelSpec::new(vec![2, 3], Activation::Identity, Likelihood::Categorical)
            .unwrap();
        let mut cfg = FedConfig::default();
        cfg.n_clients = 3;
        cfg.participation = 1.0;
        cfg.local_rounds = 1;
        cfg.inner_steps = 2;
        cfg.mc_samples = 2;
        cfg.batch_size = 6;
        cfg.seed = 41;
        let mut init = rng::stream(cfg.seed, Purpose::Init, 0, 0);
        let theta = spec.init(&mut init).unwrap();
        let mut clients: Vec<ClientState> = part
            .shards
            .iter()
            .map(|s| ClientState {
                client_id: s.client_id,
                train: s.clone(),
                test: s.clone(),
                phi: theta.clone(),
            })
            .collect();
        let outcome = server_round(&spec, &theta, &mut clients, &cfg, 3).unwrap();
        assert_eq!(outcome.selected, vec![0, 1, 2]);

        // Recompute every client against the same snapshot, in reverse order,
        // and average by hand: snapshot isolation makes order irrelevant.
        let mut means = vec![0.0; spec.param_count()];
        for &id in outcome.selected.iter().rev() {
            let upd = client_update(&spec, &theta, &clients[id].train, &cfg, 3).unwrap();
            assert_eq!(clients[id].phi.mean(), upd.phi.mean());
            for (m, v) in means.iter_mut().zip(upd.theta.mean()) {
                *m += v / 3.0;
            }
        }
        for (a, b) in outcome.theta.mean().iter().zip(&means) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn a_lone_client_converges_to_its_least_squares_solution() {
        let task = toy_fixture(8, 24);
        let shard = &task.shards[0];
        let spec = toy_spec(2);
        let mut cfg = FedConfig::default();
        cfg.n_clients = 2;
        cfg.kl_weight = 0.0;
        cfg.local_rounds = 400;
        cfg.inner_steps = 5;
        cfg.mc_samples = 3;
        cfg.batch_size = 64;
        cfg.lr_phi = 0.01;
        cfg.lr_theta = 0.0;
        let theta = MeanFieldGaussian::point(vec![0.0, 0.0, 0.0]).unwrap();
        let upd = client_update(&spec, &theta, shard, &cfg, 0).unwrap();
        let gap = metrics::distance_to_target(upd.phi.mean(), task.clients[0].mu()).unwrap();
        assert!(gap <= 1e-3, "posterior mean is {gap} from the solution");
    }

    fn small_blob_cfg() -> FedConfig {
        let mut cfg = FedConfig::default();
        cfg.n_clients = 4;
        cfg.participation = 0.5;
        cfg.rounds = 4;
        cfg.local_rounds = 1;
        cfg.inner_steps = 2;
        cfg.mc_samples = 2;
        cfg.batch_size = 10;
        cfg.lr_phi = 0.05;
        cfg.lr_theta = 0.05;
        cfg.kl_weight = 0.1;
        cfg.seed = 13;
        cfg
    }

    #[test]
    fn history_carries_one_record_per_round() {
        let data = blob_fixture();
        let mut trainer = Trainer::new(blob_spec(), small_blob_cfg(), data).unwrap();
        trainer.run().unwrap();
        assert_eq!(trainer.history().len(), 4);
        for (i, rec) in trainer.history().iter().enumerate() {
            assert_eq!(rec.round, i as u64);
            assert_eq!(rec.selected.len(), 2);
            assert!(rec.eval.mean_accuracy.is_some());
            assert!(rec.dist_to_target.is_none());
            assert!(rec.mean_local_loss.is_finite());
        }
    }

    #[test]
    fn identical_configs_reproduce_the_history_bitwise() {
        let data = blob_fixture();
        let mut a = Trainer::new(blob_spec(), small_blob_cfg(), data.clone()).unwrap();
        a.run().unwrap();
        let mut b = Trainer::new(blob_spec(), small_blob_cfg(), data).unwrap();
        b.run().unwrap();
        assert_eq!(a.history(), b.history());
        assert_eq!(a.theta().mean(), b.theta().mean());
        assert_eq!(a.theta().log_std(), b.theta().log_std());
    }

    #[test]
    fn resuming_from_state_matches_an_unbroken_run() {
        let data = blob_fixture();
        let mut whole = Trainer::new(blob_spec(), small_blob_cfg(), data.clone()).unwrap();
        whole.run().unwrap();

        let mut cfg_short = small_blob_cfg();
        cfg_short.rounds = 2;
        let mut first = Trainer::new(blob_spec(), cfg_short, data.clone()).unwrap();
        first.run().unwrap();
        let state = first.state();
        assert_eq!(state.round, 2);

        let mut resumed =
            Trainer::from_state(blob_spec(), small_blob_cfg(), data, state).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.history(), whole.history());
        assert_eq!(resumed.theta().mean(), whole.theta().mean());
        assert_eq!(resumed.theta().log_std(), whole.theta().log_std());
        for (c1, c2) in resumed.clients().iter().zip(whole.clients()) {
            assert_eq!(c1.phi.mean(), c2.phi.mean());
            assert_eq!(c1.phi.log_std(), c2.phi.log_std());
        }
    }

    #[test]
    fn the_toy_task_supports_a_distance_target() {
        let task = toy_fixture(9, 16);
        let spec = toy_spec(2);
        let mut cfg = FedConfig::default();
        cfg.n_clients = 2;
        cfg.participation = 1.0;
        cfg.rounds = 2;
        cfg.local_rounds = 2;
        cfg.inner_steps = 1;
        cfg.mc_samples = 2;
        cfg.batch_size = 16;
        let mut trainer = Trainer::new(spec, cfg, toy_trainer_data(&task))
            .unwrap()
            .with_target(task.mu_global.clone())
            .unwrap();
        trainer.run().unwrap();
        for rec in trainer.history() {
            let d = rec.dist_to_target.unwrap();
            assert!(d.is_finite() && d >= 0.0);
            assert!(rec.eval.mean_mse.is_some());
        }
    }

    #[test]
    fn personalization_reports_every_epoch_including_zero() {
        let data = blob_fixture();
        let (train, test) = &data[0];
        let spec = blob_spec();
        let mut cfg = small_blob_cfg();
        cfg.batch_size = 5;
        let mut init = rng::stream(77, Purpose::Init, 0, 0);
        let theta = spec.init(&mut init).unwrap();

        let (phi, reports) = personalize(&spec, &theta, train, test, 0, &cfg).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(phi.mean(), theta.mean());

        let (phi, reports) = personalize(&spec, &theta, train, test, 3, &cfg).unwrap();
        assert_eq!(reports.len(), 4);
        assert_ne!(phi.mean(), theta.mean());
        for r in &reports {
            assert_eq!(r.client_id, train.client_id);
            assert!(r.accuracy.is_some());
        }
    }

    #[test]
    fn divergence_reports_the_round_and_client() {
        let task = toy_fixture(10, 12);
        let spec = toy_spec(2);
        let mut cfg = FedConfig::default();
        cfg.n_clients = 2;
        cfg.kl_weight = 0.0;
        cfg.local_rounds = 30;
        cfg.inner_steps = 2;
        cfg.mc_samples = 1;
        cfg.batch_size = 16;
        cfg.lr_phi = 1e9;
        let theta = MeanFieldGaussian::point(vec![0.1, 0.1, 0.1]).unwrap();
        match client_update(&spec, &theta, &task.shards[1], &cfg, 6) {
            Err(Error::Diverged { round, client, loss }) => {
                assert_eq!(round, 6);
                assert_eq!(client, 1);
                assert!(loss > DIVERGENCE_LIMIT || !loss.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn shifted_evaluation_data_round_trips_through_training_types() {
        // Smoke-level wiring check: a trained posterior evaluates on both
        // sides of a shift without dimension complaints.
        let mut rng = rng::stream(9, Purpose::Data, 0, 2);
        let data = tasks::gen_blobs(4, 2, 10, 0.5, &mut rng).unwrap();
        let shifted = tasks::shift_dataset(&data, &ShiftKind::MeanShift { delta: 3.0 }).unwrap();
        assert_eq!(shifted.id.len(), shifted.ood.len());
        let spec = blob_spec();
        let mut init = rng::stream(1, Purpose::Init, 0, 0);
        let theta = spec.init(&mut init).unwrap();
        let ent_id =
            metrics::predictive_entropy(&spec, &theta, shifted.id.features(), 4, &mut init)
                .unwrap();
        assert_eq!(ent_id.len(), shifted.id.len());
    }
}
