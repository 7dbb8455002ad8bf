//! Mean-field Gaussian posteriors and the variational plumbing around them:
//! reparameterized sampling, the closed-form diagonal KL divergence with its
//! analytic gradients, the chain rule through the sampling transform, and the
//! server-side fusion strategies.
//!
//! Parameters are stored as `(mean, log_std)`; working in log-standard
//! deviations keeps every parameter unconstrained under plain SGD. The
//! `log_std` entries are clamped to [`NU_MIN`, `NU_MAX`] on construction and
//! after every step, so a distribution can never collapse to zero width or
//! blow up past `exp(NU_MAX)`.

use crate::error::{Error, Result};
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

/// Lower clamp for `log_std`: a standard deviation of `exp(-10) ≈ 4.5e-5`.
pub const NU_MIN: f64 = -10.0;
/// Upper clamp for `log_std`: a standard deviation of `exp(3) ≈ 20`.
pub const NU_MAX: f64 = 3.0;

/// Variance floor matching the `log_std` clamp, used when fusing variances.
const VAR_FLOOR: f64 = 2.061153622438558e-9; // exp(2 * NU_MIN)

/// Diagonal Gaussian over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

/// Gradient with respect to a [`MeanFieldGaussian`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// How the server fuses client posteriors into the next global prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AggregationStrategy {
    /// Average means and log-stds directly.
    Oracle,
    /// Average means and variances.
    Mean,
    /// Moment-matched Gaussian approximation of the equally-indexed mixture.
    Mixture,
    /// Precision-weighted product of Gaussians.
    Product,
}

impl MeanFieldGaussian {
    /// Builds a distribution; `log_std` is clamped into the supported range.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::DimMismatch {
                context: "mean and log_std",
                expected: mean.len(),
                got: log_std.len(),
            });
        }
        if mean.is_empty() {
            return Err(Error::Empty("distribution parameters"));
        }
        if mean.iter().chain(log_std.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "distribution parameters",
            });
        }
        let log_std = log_std.into_iter().map(|v| v.clamp(NU_MIN, NU_MAX)).collect();
        Ok(MeanFieldGaussian { mean, log_std })
    }

    /// Point mass surrogate: the given mean with `log_std` pinned at [`NU_MIN`].
    pub fn point(mean: Vec<f64>) -> Result<Self> {
        let nu = vec![NU_MIN; mean.len()];
        MeanFieldGaussian::new(mean, nu)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    /// `exp(log_std)`, element-wise.
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|&v| libm::exp(v)).collect()
    }

    /// Reparameterized sample `w = mean + noise ∘ exp(log_std)`.
    ///
    /// Deterministic given `noise`; callers draw noise from a seeded stream.
    pub fn sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::DimMismatch {
                context: "sample noise",
                expected: self.dim(),
                got: noise.len(),
            });
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(noise)
            .map(|((&m, &nu), &e)| m + e * libm::exp(nu))
            .collect())
    }

    /// Draws standard normal noise from `rng` and returns a sample.
    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let noise = crate::rng::standard_normals(rng, self.dim());
        self.sample(&noise).expect("noise length matches by construction")
    }

    /// One SGD step `params -= lr * grad`, re-clamping `log_std`.
    pub fn step(&mut self, grad: &GaussianGrad, lr: f64) -> Result<()> {
        if grad.mean.len() != self.dim() || grad.log_std.len() != self.dim() {
            return Err(Error::DimMismatch {
                context: "gradient step",
                expected: self.dim(),
                got: grad.mean.len(),
            });
        }
        for (m, g) in self.mean.iter_mut().zip(&grad.mean) {
            *m -= lr * g;
        }
        for (nu, g) in self.log_std.iter_mut().zip(&grad.log_std) {
            *nu = (*nu - lr * g).clamp(NU_MIN, NU_MAX);
        }
        Ok(())
    }
}

impl GaussianGrad {
    pub fn zeros(dim: usize) -> Self {
        GaussianGrad {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    /// `self += c * other`.
    pub fn scaled_add(&mut self, other: &GaussianGrad, c: f64) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += c * b;
        }
        for (a, b) in self.log_std.iter_mut().zip(&other.log_std) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.mean.iter_mut().chain(self.log_std.iter_mut()) {
            *a *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.log_std.iter()).all(|v| v.is_finite())
    }
}

fn check_same_dim(q: &MeanFieldGaussian, p: &MeanFieldGaussian) -> Result<()> {
    if q.dim() != p.dim() {
        return Err(Error::DimMismatch {
            context: "kl operands",
            expected: q.dim(),
            got: p.dim(),
        });
    }
    Ok(())
}

/// Closed-form `KL(q ‖ p)` for diagonal Gaussians:
///
/// `½ Σ_j [ σq²/σp² + (mp − mq)²/σp² − 1 + 2(νp − νq) ]`
pub fn kl_diag(q: &MeanFieldGaussian, p: &MeanFieldGaussian) -> Result<f64> {
    check_same_dim(q, p)?;
    let mut total = 0.0;
    for j in 0..q.dim() {
        let var_ratio = libm::exp(2.0 * (q.log_std[j] - p.log_std[j]));
        let dm = p.mean[j] - q.mean[j];
        let maha = dm * dm * libm::exp(-2.0 * p.log_std[j]);
        total += 0.5 * (var_ratio + maha - 1.0) + (p.log_std[j] - q.log_std[j]);
    }
    Ok(total)
}

/// Analytic gradient of [`kl_diag`] with respect to `q`'s parameters:
///
/// `∂KL/∂mq = (mq − mp)/σp²`, `∂KL/∂νq = σq²/σp² − 1`.
pub fn kl_grad_wrt_q(q: &MeanFieldGaussian, p: &MeanFieldGaussian) -> Result<GaussianGrad> {
    check_same_dim(q, p)?;
    let d = q.dim();
    let mut grad = GaussianGrad::zeros(d);
    for j in 0..d {
        let inv_var_p = libm::exp(-2.0 * p.log_std[j]);
        grad.mean[j] = (q.mean[j] - p.mean[j]) * inv_var_p;
        grad.log_std[j] = libm::exp(2.0 * (q.log_std[j] - p.log_std[j])) - 1.0;
    }
    Ok(grad)
}

/// Analytic gradient of [`kl_diag`] with respect to `p`'s parameters:
///
/// `∂KL/∂mp = (mp − mq)/σp²`, `∂KL/∂νp = 1 − σq²/σp² − (mp − mq)²/σp²`.
pub fn kl_grad_wrt_p(q: &MeanFieldGaussian, p: &MeanFieldGaussian) -> Result<GaussianGrad> {
    check_same_dim(q, p)?;
    let d = q.dim();
    let mut grad = GaussianGrad::zeros(d);
    for j in 0..d {
        let inv_var_p = libm::exp(-2.0 * p.log_std[j]);
        let dm = p.mean[j] - q.mean[j];
        grad.mean[j] = dm * inv_var_p;
        grad.log_std[j] =
            1.0 - libm::exp(2.0 * (q.log_std[j] - p.log_std[j])) - dm * dm * inv_var_p;
    }
    Ok(grad)
}

/// Monte Carlo estimate of the gradient of `KL(q ‖ p)` with respect to `p`,
/// from samples `w ~ q`: the average of `∇_p [−log p(w)]`.
///
/// Unbiased for [`kl_grad_wrt_p`]; exists so the two estimators can be
/// swapped behind a config switch and compared.
pub fn kl_grad_wrt_p_sampled(p: &MeanFieldGaussian, samples: &[Vec<f64>]) -> Result<GaussianGrad> {
    if samples.is_empty() {
        return Err(Error::Empty("kl gradient samples"));
    }
    let d = p.dim();
    let mut grad = GaussianGrad::zeros(d);
    for w in samples {
        if w.len() != d {
            return Err(Error::DimMismatch {
                context: "kl gradient sample",
                expected: d,
                got: w.len(),
            });
        }
        for j in 0..d {
            let inv_var_p = libm::exp(-2.0 * p.log_std[j]);
            let dm = p.mean[j] - w[j];
            grad.mean[j] += dm * inv_var_p;
            grad.log_std[j] += 1.0 - dm * dm * inv_var_p;
        }
    }
    grad.scale(1.0 / samples.len() as f64);
    Ok(grad)
}

/// Chain rule through the sampling transform `w = mean + noise ∘ exp(log_std)`.
///
/// Given the gradient of a loss with respect to the sampled weights, returns
/// the gradient with respect to the distribution parameters, plus any term
/// that touches the parameters directly (e.g. a KL penalty):
///
/// `∂L/∂mean = grad_w + direct.mean`
/// `∂L/∂log_std = grad_w ∘ noise ∘ exp(log_std) + direct.log_std`
pub fn reparam_chain(
    grad_w: &[f64],
    noise: &[f64],
    q: &MeanFieldGaussian,
    direct: Option<&GaussianGrad>,
) -> Result<GaussianGrad> {
    let d = q.dim();
    if grad_w.len() != d || noise.len() != d {
        return Err(Error::DimMismatch {
            context: "reparameterization chain rule",
            expected: d,
            got: grad_w.len(),
        });
    }
    if let Some(g) = direct {
        if g.mean.len() != d {
            return Err(Error::DimMismatch {
                context: "reparameterization direct gradient",
                expected: d,
                got: g.mean.len(),
            });
        }
    }
    let mut out = GaussianGrad::zeros(d);
    for j in 0..d {
        out.mean[j] = grad_w[j];
        out.log_std[j] = grad_w[j] * noise[j] * libm::exp(q.log_std[j]);
    }
    if let Some(g) = direct {
        out.scaled_add(g, 1.0);
    }
    Ok(out)
}

/// Fuses client posteriors into one distribution.
///
/// `weights` must be non-negative and sum to one within `1e-12`. Aggregating
/// copies of a single distribution returns that distribution unchanged for
/// every strategy; the short-circuit below keeps that exact even where the
/// weighted sums would introduce rounding.
pub fn aggregate(
    members: &[MeanFieldGaussian],
    weights: &[f64],
    strategy: AggregationStrategy,
) -> Result<MeanFieldGaussian> {
    if members.is_empty() {
        return Err(Error::Empty("aggregation members"));
    }
    if weights.len() != members.len() {
        return Err(Error::DimMismatch {
            context: "aggregation weights",
            expected: members.len(),
            got: weights.len(),
        });
    }
    let d = members[0].dim();
    for m in members {
        if m.dim() != d {
            return Err(Error::DimMismatch {
                context: "aggregation member",
                expected: d,
                got: m.dim(),
            });
        }
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-12 {
        return Err(Error::BadWeights { sum });
    }
    if members.iter().all(|m| m == &members[0]) {
        return Ok(members[0].clone());
    }

    let mut mean = vec![0.0; d];
    match strategy {
        AggregationStrategy::Oracle => {
            let mut log_std = vec![0.0; d];
            for (m, &w) in members.iter().zip(weights) {
                for j in 0..d {
                    mean[j] += w * m.mean[j];
                    log_std[j] += w * m.log_std[j];
                }
            }
            MeanFieldGaussian::new(mean, log_std)
        }
        AggregationStrategy::Mean => {
            let mut var = vec![0.0; d];
            for (m, &w) in members.iter().zip(weights) {
                for j in 0..d {
                    mean[j] += w * m.mean[j];
                    var[j] += w * libm::exp(2.0 * m.log_std[j]);
                }
            }
            MeanFieldGaussian::new(mean, log_std_from_var(&var))
        }
        AggregationStrategy::Mixture => {
            let mut second = vec![0.0; d];
            for (m, &w) in members.iter().zip(weights) {
                for j in 0..d {
                    mean[j] += w * m.mean[j];
                    second[j] += w * (libm::exp(2.0 * m.log_std[j]) + m.mean[j] * m.mean[j]);
                }
            }
            let var: Vec<f64> = second
                .iter()
                .zip(&mean)
                .map(|(&s, &m)| (s - m * m).max(VAR_FLOOR))
                .collect();
            MeanFieldGaussian::new(mean, log_std_from_var(&var))
        }
        AggregationStrategy::Product => {
            let mut precision = vec![0.0; d];
            let mut weighted = vec![0.0; d];
            for (m, &w) in members.iter().zip(weights) {
                for j in 0..d {
                    let prec = libm::exp(-2.0 * m.log_std[j]);
                    precision[j] += w * prec;
                    weighted[j] += w * prec * m.mean[j];
                }
            }
            let var: Vec<f64> = precision.iter().map(|&p| 1.0 / p).collect();
            for j in 0..d {
                mean[j] = var[j] * weighted[j];
            }
            MeanFieldGaussian::new(mean, log_std_from_var(&var))
        }
    }
}

fn log_std_from_var(var: &[f64]) -> Vec<f64> {
    var.iter().map(|&v| 0.5 * libm::log(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normals, stream, Purpose};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;

    fn mfg(mean: &[f64], log_std: &[f64]) -> MeanFieldGaussian {
        MeanFieldGaussian::new(mean.to_vec(), log_std.to_vec()).unwrap()
    }

    fn random_pair(seed: u64, d: usize) -> (MeanFieldGaussian, MeanFieldGaussian) {
        let mut rng = stream(seed, Purpose::Data, 0, 0);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let nu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..1.0)).collect();
            MeanFieldGaussian::new(mean, nu).unwrap()
        };
        (draw(&mut rng), draw(&mut rng))
    }

    /// Log density of a diagonal Gaussian, used by the Monte Carlo oracle.
    fn log_density(dist: &MeanFieldGaussian, w: &[f64]) -> f64 {
        let ln_2pi = (2.0 * core::f64::consts::PI).ln();
        w.iter()
            .zip(dist.mean())
            .zip(dist.log_std())
            .map(|((&wj, &m), &nu)| {
                let z = (wj - m) / nu.exp();
                -0.5 * z * z - nu - 0.5 * ln_2pi
            })
            .sum()
    }

    #[test]
    fn sample_applies_affine_transform() {
        let q = mfg(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(q.sample(&[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);

        let q = mfg(&[1.0, 2.0], &[2.0_f64.ln(), 0.0]);
        let w = q.sample(&[0.5, -1.0]).unwrap();
        assert_abs_diff_eq!(w[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn sample_is_deterministic_given_noise() {
        let (q, _) = random_pair(7, 5);
        let noise = standard_normals(&mut stream(1, Purpose::Eval, 0, 0), 5);
        assert_eq!(q.sample(&noise).unwrap(), q.sample(&noise).unwrap());
    }

    #[test]
    fn sample_rejects_wrong_noise_length() {
        let q = mfg(&[0.0], &[0.0]);
        assert!(matches!(
            q.sample(&[1.0, 2.0]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn construction_clamps_log_std() {
        let q = MeanFieldGaussian::new(vec![0.0, 0.0], vec![-50.0, 50.0]).unwrap();
        assert_eq!(q.log_std(), &[NU_MIN, NU_MAX]);
    }

    #[test]
    fn step_moves_mean_and_keeps_log_std_clamped() {
        let mut q = mfg(&[1.0], &[0.0]);
        let grad = GaussianGrad {
            mean: vec![2.0],
            log_std: vec![1e6],
        };
        q.step(&grad, 0.5).unwrap();
        assert_abs_diff_eq!(q.mean()[0], 0.0, epsilon = 1e-15);
        assert_eq!(q.log_std()[0], NU_MIN);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let (q, _) = random_pair(3, 6);
        assert_abs_diff_eq!(kl_diag(&q, &q).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_matches_hand_computed_values() {
        // Unit-variance mean shift: KL(N(0,1) ‖ N(1,1)) = 1/2.
        let q = mfg(&[0.0], &[0.0]);
        let p = mfg(&[1.0], &[0.0]);
        assert_abs_diff_eq!(kl_diag(&q, &p).unwrap(), 0.5, epsilon = 1e-12);

        // Pure variance change: KL(N(0, 0.25) ‖ N(0, 1)) = ½(0.25 − 1 + ln 4).
        let q = mfg(&[0.0], &[0.5 * 0.25_f64.ln()]);
        let p = mfg(&[0.0], &[0.0]);
        let expected = 0.5 * (0.25 - 1.0 + 4.0_f64.ln());
        assert_abs_diff_eq!(kl_diag(&q, &p).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn kl_additivity_over_coordinates() {
        // The diagonal KL must equal the sum of per-coordinate KLs.
        let q = mfg(&[0.0, 1.0, -2.0], &[0.0, -1.0, 0.3]);
        let p = mfg(&[0.5, 0.0, 1.0], &[0.2, 0.0, -0.5]);
        let mut sum = 0.0;
        for j in 0..3 {
            sum += kl_diag(
                &mfg(&[q.mean()[j]], &[q.log_std()[j]]),
                &mfg(&[p.mean()[j]], &[p.log_std()[j]]),
            )
            .unwrap();
        }
        assert_abs_diff_eq!(kl_diag(&q, &p).unwrap(), sum, epsilon = 1e-12);
    }

    #[test]
    fn kl_agrees_with_monte_carlo_estimate() {
        // Oracle: KL(q‖p) = E_{w~q}[log q(w) − log p(w)], estimated by
        // reparameterized sampling; the closed form must sit within three
        // standard errors of the estimate.
        for (seed, d) in [(11u64, 1usize), (12, 3), (13, 4), (14, 2), (15, 6)] {
            let (q, p) = random_pair(seed, d);
            let closed = kl_diag(&q, &p).unwrap();
            let n = 200_000usize;
            let mut rng = stream(seed, Purpose::Eval, 1, 0);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let w = q.draw(&mut rng);
                let v = log_density(&q, &w) - log_density(&p, &w);
                sum += v;
                sum_sq += v * v;
            }
            let mc = sum / n as f64;
            let var = (sum_sq / n as f64 - mc * mc).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (closed - mc).abs() <= 3.0 * se,
                "closed form {closed} vs MC {mc} ± {se} (seed {seed})"
            );
        }
    }

    #[test]
    fn kl_gradients_vanish_at_equality() {
        let (q, _) = random_pair(21, 4);
        let gq = kl_grad_wrt_q(&q, &q).unwrap();
        let gp = kl_grad_wrt_p(&q, &q).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(gq.mean[j], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(gq.log_std[j], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(gp.mean[j], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(gp.log_std[j], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn kl_mean_gradient_matches_hand_value() {
        // KL(N(mq,1) ‖ N(1,1)) has ∂/∂mq = mq − 1, so at mq = 0 it is −1.
        let q = mfg(&[0.0], &[0.0]);
        let p = mfg(&[1.0], &[0.0]);
        let g = kl_grad_wrt_q(&q, &p).unwrap();
        assert_abs_diff_eq!(g.mean[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        // Central differences on every parameter block of both operands.
        let h = 1e-6;
        for seed in 0..50u64 {
            let (q, p) = random_pair(100 + seed, 3);
            let gq = kl_grad_wrt_q(&q, &p).unwrap();
            let gp = kl_grad_wrt_p(&q, &p).unwrap();
            for j in 0..3 {
                let bump = |qm: f64, qn: f64, pm: f64, pn: f64| {
                    let mut qm_v = q.mean().to_vec();
                    let mut qn_v = q.log_std().to_vec();
                    let mut pm_v = p.mean().to_vec();
                    let mut pn_v = p.log_std().to_vec();
                    qm_v[j] += qm;
                    qn_v[j] += qn;
                    pm_v[j] += pm;
                    pn_v[j] += pn;
                    kl_diag(
                        &MeanFieldGaussian::new(qm_v, qn_v).unwrap(),
                        &MeanFieldGaussian::new(pm_v, pn_v).unwrap(),
                    )
                    .unwrap()
                };
                let checks = [
                    (gq.mean[j], bump(h, 0.0, 0.0, 0.0), bump(-h, 0.0, 0.0, 0.0)),
                    (gq.log_std[j], bump(0.0, h, 0.0, 0.0), bump(0.0, -h, 0.0, 0.0)),
                    (gp.mean[j], bump(0.0, 0.0, h, 0.0), bump(0.0, 0.0, -h, 0.0)),
                    (gp.log_std[j], bump(0.0, 0.0, 0.0, h), bump(0.0, 0.0, 0.0, -h)),
                ];
                for (analytic, up, down) in checks {
                    let numeric = (up - down) / (2.0 * h);
                    assert_relative_eq!(
                        analytic,
                        numeric,
                        max_relative = 1e-5,
                        epsilon = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn sampled_p_gradient_is_unbiased_for_closed_form() {
        // Welford-style accumulation of the per-draw gradient gives a mean
        // and standard error per coordinate; the closed form must sit within
        // four standard errors.
        let (q, p) = random_pair(55, 3);
        let exact = kl_grad_wrt_p(&q, &p).unwrap();
        let n = 200_000usize;
        let mut rng = stream(55, Purpose::Eval, 2, 0);
        let d = q.dim();
        let mut mean_acc = vec![0.0; 2 * d];
        let mut m2_acc = vec![0.0; 2 * d];
        for k in 0..n {
            let w = q.draw(&mut rng);
            let g = kl_grad_wrt_p_sampled(&p, core::slice::from_ref(&w)).unwrap();
            for j in 0..d {
                for (idx, v) in [(j, g.mean[j]), (d + j, g.log_std[j])] {
                    let delta = v - mean_acc[idx];
                    mean_acc[idx] += delta / (k + 1) as f64;
                    m2_acc[idx] += delta * (v - mean_acc[idx]);
                }
            }
        }
        for j in 0..2 * d {
            let se = (m2_acc[j] / (n as f64 * (n - 1) as f64)).sqrt();
            let want = if j < d { exact.mean[j] } else { exact.log_std[j - d] };
            assert!(
                (mean_acc[j] - want).abs() <= 4.0 * se.max(1e-12),
                "coordinate {j}: sampled {} vs exact {want} ± {se}",
                mean_acc[j]
            );
        }
    }

    #[test]
    fn reparam_chain_applies_documented_formulas() {
        let q = mfg(&[0.0, 0.0], &[0.0, 2.0_f64.ln()]);
        let g = reparam_chain(&[1.0, 2.0], &[0.5, -1.0], &q, None).unwrap();
        assert_eq!(g.mean, vec![1.0, 2.0]);
        // grad_w ∘ noise ∘ σ = [1·0.5·1, 2·(−1)·2]
        assert_abs_diff_eq!(g.log_std[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g.log_std[1], -4.0, epsilon = 1e-15);
    }

    #[test]
    fn reparam_chain_passes_direct_grads_through() {
        let q = mfg(&[1.0, -1.0], &[0.1, -0.2]);
        let direct = GaussianGrad {
            mean: vec![3.0, -2.0],
            log_std: vec![0.25, 0.75],
        };
        let g = reparam_chain(&[0.0, 0.0], &[1.3, -0.4], &q, Some(&direct)).unwrap();
        assert_eq!(g.mean, direct.mean);
        assert_eq!(g.log_std, direct.log_std);
    }

    #[test]
    fn aggregate_over_identical_members_is_identity() {
        let (q, _) = random_pair(31, 4);
        let members = vec![q.clone(), q.clone(), q.clone()];
        for strategy in [
            AggregationStrategy::Oracle,
            AggregationStrategy::Mean,
            AggregationStrategy::Mixture,
            AggregationStrategy::Product,
        ] {
            let out = aggregate(&members, &[1.0 / 3.0; 3], strategy).unwrap();
            assert_eq!(out, q, "strategy {strategy:?}");
            let single = aggregate(core::slice::from_ref(&q), &[1.0], strategy).unwrap();
            assert_eq!(single, q, "singleton, strategy {strategy:?}");
        }
    }

    #[test]
    fn aggregate_matches_hand_computed_two_member_cases() {
        let a = mfg(&[0.0], &[0.0]);
        let b = mfg(&[2.0], &[0.0]);
        let members = [a, b];
        let w = [0.5, 0.5];

        let oracle = aggregate(&members, &w, AggregationStrategy::Oracle).unwrap();
        assert_abs_diff_eq!(oracle.mean()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle.log_std()[0], 0.0, epsilon = 1e-12);

        let mean = aggregate(&members, &w, AggregationStrategy::Mean).unwrap();
        assert_abs_diff_eq!(mean.mean()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mean.log_std()[0], 0.0, epsilon = 1e-12);

        // Mixture second moment: ½(1+0) + ½(1+4) = 3, variance 3 − 1 = 2.
        let mixture = aggregate(&members, &w, AggregationStrategy::Mixture).unwrap();
        assert_abs_diff_eq!(mixture.mean()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mixture.log_std()[0], 0.5 * 2.0_f64.ln(), epsilon = 1e-12);

        // Equal unit precisions: product is N(1, 1).
        let product = aggregate(&members, &w, AggregationStrategy::Product).unwrap();
        assert_abs_diff_eq!(product.mean()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(product.log_std()[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn product_matches_precision_formula_on_random_members() {
        let (a, b) = random_pair(77, 3);
        let (c, _) = random_pair(78, 3);
        let members = [a, b, c];
        let w = [0.2, 0.5, 0.3];
        let got = aggregate(&members, &w, AggregationStrategy::Product).unwrap();
        for j in 0..3 {
            let mut prec = 0.0;
            let mut num = 0.0;
            for (m, &wi) in members.iter().zip(&w) {
                let p = (-2.0 * m.log_std()[j]).exp();
                prec += wi * p;
                num += wi * p * m.mean()[j];
            }
            assert_relative_eq!(got.mean()[j], num / prec, max_relative = 1e-12);
            assert_relative_eq!(
                got.log_std()[j],
                0.5 * (1.0 / prec).ln(),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn mixture_matches_empirical_moments() {
        // Oracle: sample the two-component mixture a million times and compare
        // the moment-matched closed form against empirical mean and variance,
        // within four standard errors of each estimator.
        let (a, b) = random_pair(91, 3);
        let members = [a.clone(), b.clone()];
        let w = [0.3, 0.7];
        let agg = aggregate(&members, &w, AggregationStrategy::Mixture).unwrap();

        let n = 1_000_000usize;
        let mut rng = stream(91, Purpose::Eval, 3, 0);
        let d = 3;
        // Raw moment sums up to order four, per coordinate.
        let mut raw = vec![[0.0f64; 4]; d];
        for _ in 0..n {
            let pick: f64 = rng.random();
            let comp = if pick < w[0] { &members[0] } else { &members[1] };
            let x = comp.draw(&mut rng);
            for j in 0..d {
                let mut p = 1.0;
                for r in 0..4 {
                    p *= x[j];
                    raw[j][r] += p;
                }
            }
        }
        for j in 0..d {
            let nf = n as f64;
            let m1 = raw[j][0] / nf;
            let m2 = raw[j][1] / nf;
            let m3 = raw[j][2] / nf;
            let m4 = raw[j][3] / nf;
            let var = m2 - m1 * m1;
            let se_mean = (var / nf).sqrt();
            // Var(sample variance) ≈ (μ₄ − σ⁴)/n with μ₄ the central fourth
            // moment, expanded here in raw moments.
            let mu4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1.powi(4);
            let se_var = ((mu4 - var * var).max(0.0) / nf).sqrt();
            assert!(
                (agg.mean()[j] - m1).abs() <= 4.0 * se_mean,
                "mean[{j}]: {} vs {m1} ± {se_mean}",
                agg.mean()[j]
            );
            let agg_var = (2.0 * agg.log_std()[j]).exp();
            assert!(
                (agg_var - var).abs() <= 4.0 * se_var.max(1e-9),
                "var[{j}]: {agg_var} vs {var} ± {se_var}"
            );
        }
    }

    #[test]
    fn aggregate_rejects_bad_weights() {
        let (a, b) = random_pair(41, 2);
        let members = [a, b];
        assert!(matches!(
            aggregate(&members, &[0.5, 0.4], AggregationStrategy::Oracle),
            Err(Error::BadWeights { .. })
        ));
        assert!(matches!(
            aggregate(&members, &[1.5, -0.5], AggregationStrategy::Oracle),
            Err(Error::BadWeights { .. })
        ));
        assert!(matches!(
            aggregate(&members, &[1.0], AggregationStrategy::Oracle),
            Err(Error::DimMismatch { .. })
        ));
        assert!(matches!(
            aggregate(&[], &[], AggregationStrategy::Oracle),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn aggregate_mean_stays_within_member_envelope() {
        // Every strategy produces a convex combination of member means, so
        // each coordinate must stay inside the members' min/max envelope.
        for seed in 0..20u64 {
            let (a, b) = random_pair(200 + seed, 4);
            let (c, _) = random_pair(300 + seed, 4);
            let members = [a, b, c];
            let w = [0.25, 0.35, 0.4];
            for strategy in [
                AggregationStrategy::Oracle,
                AggregationStrategy::Mean,
                AggregationStrategy::Mixture,
                AggregationStrategy::Product,
            ] {
                let out = aggregate(&members, &w, strategy).unwrap();
                for j in 0..4 {
                    let lo = members.iter().map(|m| m.mean()[j]).fold(f64::INFINITY, f64::min);
                    let hi = members
                        .iter()
                        .map(|m| m.mean()[j])
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert!(
                        out.mean()[j] >= lo - 1e-9 && out.mean()[j] <= hi + 1e-9,
                        "{strategy:?} mean[{j}] = {} outside [{lo}, {hi}]",
                        out.mean()[j]
                    );
                }
            }
        }
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let (a, b) = random_pair(61, 3);
        let (c, _) = random_pair(62, 3);
        let w = [0.2, 0.3, 0.5];
        for strategy in [
            AggregationStrategy::Oracle,
            AggregationStrategy::Mean,
            AggregationStrategy::Mixture,
            AggregationStrategy::Product,
        ] {
            let fwd = aggregate(&[a.clone(), b.clone(), c.clone()], &w, strategy).unwrap();
            let rev =
                aggregate(&[c.clone(), b.clone(), a.clone()], &[0.5, 0.3, 0.2], strategy).unwrap();
            for j in 0..3 {
                assert_abs_diff_eq!(fwd.mean()[j], rev.mean()[j], epsilon = 1e-12);
                assert_abs_diff_eq!(fwd.log_std()[j], rev.log_std()[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        for seed in 0..200u64 {
            let d = 1 + (seed as usize % 5);
            let (q, p) = random_pair(1000 + seed, d);
            let kl = kl_diag(&q, &p).unwrap();
            assert!(kl >= -1e-12, "KL = {kl} at seed {seed}");
        }
    }
}
