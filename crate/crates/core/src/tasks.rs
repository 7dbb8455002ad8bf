//! Synthetic tasks and data handling: the two-client linear-Gaussian toy
//! problem with its closed-form fusion target, Gaussian blob classification
//! data, label-skew partitioning into client shards, train/test splitting,
//! and distribution-shift transforms for uncertainty probes.

use crate::bnn::{Batch, BatchTargets};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::standard_normals;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;

/// A labelled classification dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::DimMismatch {
                context: "dataset labels",
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if n_classes == 0 {
            return Err(Error::InvalidParam {
                name: "n_classes",
                reason: "must be positive",
            });
        }
        if labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::InvalidParam {
                name: "labels",
                reason: "label index exceeds the class count",
            });
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers the given rows (class count unchanged). Indices may repeat
    /// and appear in any order.
    pub fn rows_subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.rows_subset(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// One client's local data plus the classes present in it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    data: Batch,
    classes: Vec<usize>,
}

impl ClientShard {
    pub fn new(client_id: usize, data: Batch) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("client shard"));
        }
        let classes = match data.targets() {
            BatchTargets::Classes(labels) => {
                let mut c = labels.clone();
                c.sort_unstable();
                c.dedup();
                c
            }
            BatchTargets::Regression(_) => Vec::new(),
        };
        Ok(ClientShard {
            client_id,
            data,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Classes present in this shard (sorted, deduplicated); empty for
    /// regression shards.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn data(&self) -> &Batch {
        &self.data
    }

    pub fn minibatch(&self, indices: &[usize]) -> Batch {
        self.data.rows_subset(indices)
    }

    /// Random train/test split. The test side gets `round(test_fraction · n)`
    /// rows, clamped so the train side keeps at least one row.
    pub fn split(&self, test_fraction: f64, rng: &mut impl Rng) -> Result<(ClientShard, ClientShard)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidParam {
                name: "test_fraction",
                reason: "must lie in [0, 1)",
            });
        }
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let n_test = ((test_fraction * n as f64) + 0.5) as usize;
        let n_test = n_test.min(n - 1);
        let (test_idx, train_idx) = idx.split_at(n_test);
        let mut train_idx = train_idx.to_vec();
        let mut test_idx = test_idx.to_vec();
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        let train = ClientShard::new(self.client_id, self.minibatch(&train_idx))?;
        let test = if test_idx.is_empty() {
            // Degenerate but allowed: evaluation falls back to the train rows.
            train.clone()
        } else {
            ClientShard::new(self.client_id, self.minibatch(&test_idx))?
        };
        Ok((train, test))
    }
}

/// A linear-Gaussian client: design matrix, targets, the least-squares
/// solution `mu`, and the solution's posterior moments under observation
/// noise `noise_std`.
#[derive(Clone, Debug)]
pub struct QuadraticClient {
    design: Matrix,
    targets: Vec<f64>,
    noise_std: f64,
    mu: Vec<f64>,
    /// `XᵀX / σ²` — the precision of the least-squares solution.
    precision: Matrix,
    /// `σ² (XᵀX)⁻¹` — its covariance.
    sigma: Matrix,
}

impl QuadraticClient {
    /// Solves the normal equations for the given design (used exactly as
    /// passed; append a constant column yourself if the model has a bias).
    pub fn new(design: Matrix, targets: Vec<f64>, noise_std: f64) -> Result<Self> {
        if targets.len() != design.rows() {
            return Err(Error::DimMismatch {
                context: "quadratic client targets",
                expected: design.rows(),
                got: targets.len(),
            });
        }
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidParam {
                name: "noise_std",
                reason: "must be positive and finite",
            });
        }
        let gram = design.gram();
        let mu = linalg::solve(&gram, &design.tmul_vec(&targets)?)?;
        let inv_var = 1.0 / (noise_std * noise_std);
        let mut precision = gram.clone();
        for i in 0..precision.rows() {
            for j in 0..precision.cols() {
                precision.set(i, j, gram.get(i, j) * inv_var);
            }
        }
        let mut sigma = linalg::inverse(&gram)?;
        for i in 0..sigma.rows() {
            for j in 0..sigma.cols() {
                sigma.set(i, j, sigma.get(i, j) * noise_std * noise_std);
            }
        }
        Ok(QuadraticClient {
            design,
            targets,
            noise_std,
            mu,
            precision,
            sigma,
        })
    }

    pub fn design(&self) -> &Matrix {
        &self.design
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Least-squares solution of this client's data.
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }
}

/// Precision-weighted fusion of the clients' solutions:
/// `(Σ Λ_i)⁻¹ (Σ Λ_i μ_i)` with `Λ_i` each client's precision.
///
/// For clients sharing one design-column space this equals the least-squares
/// solution over all their rows stacked together.
pub fn global_target(clients: &[QuadraticClient]) -> Result<Vec<f64>> {
    let first = clients.first().ok_or(Error::Empty("quadratic clients"))?;
    let d = first.mu.len();
    let mut prec_sum = Matrix::zeros(d, d);
    let mut weighted = vec![0.0; d];
    for c in clients {
        if c.mu.len() != d {
            return Err(Error::DimMismatch {
                context: "quadratic client dimensions",
                expected: d,
                got: c.mu.len(),
            });
        }
        for i in 0..d {
            for j in 0..d {
                prec_sum.set(i, j, prec_sum.get(i, j) + c.precision.get(i, j));
            }
        }
        let contrib = c.precision.mul_vec(&c.mu)?;
        for (w, v) in weighted.iter_mut().zip(contrib) {
            *w += v;
        }
    }
    linalg::solve(&prec_sum, &weighted)
}

/// The two-client toy problem: each client's quadratic view of its data, the
/// matching training shards (raw features; the model supplies the bias), and
/// the closed-form fusion target in `[weights..., bias]` order.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub clients: Vec<QuadraticClient>,
    pub shards: Vec<ClientShard>,
    pub mu_global: Vec<f64>,
}

/// Observation noise used by the toy generator.
pub const TOY_NOISE_STD: f64 = 1.0;

/// Per-client input scales; unequal scales give the clients genuinely
/// different posterior precisions, so the fusion target is not the midpoint
/// of the two local solutions.
const TOY_INPUT_SCALES: [f64; 2] = [1.0, 0.55];

/// Synthesizes two linear-Gaussian clients whose true weights sit
/// `separation` apart along a random direction. Designs are redrawn (a
/// handful of times at most) if the normal equations are ill-conditioned.
pub fn gen_toy_lsq(
    d: usize,
    n_per_client: usize,
    separation: f64,
    rng: &mut impl Rng,
) -> Result<ToyTask> {
    if d == 0 {
        return Err(Error::InvalidParam {
            name: "d",
            reason: "must be positive",
        });
    }
    if n_per_client <= d + 1 {
        return Err(Error::InvalidParam {
            name: "n_per_client",
            reason: "need more rows than unknowns (weights plus bias)",
        });
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidParam {
            name: "separation",
            reason: "must be non-negative and finite",
        });
    }
    let aug = d + 1;
    // Shared centre and a random unit direction in augmented (weights+bias)
    // space; the true client weights sit at centre ± separation/2 · u.
    let centre: Vec<f64> = standard_normals(rng, aug).iter().map(|v| 0.5 * v).collect();
    let mut direction = standard_normals(rng, aug);
    let norm = libm::sqrt(direction.iter().map(|v| v * v).sum::<f64>());
    for v in &mut direction {
        *v /= norm;
    }

    let mut clients = Vec::with_capacity(2);
    let mut shards = Vec::with_capacity(2);
    for (client_id, &scale) in TOY_INPUT_SCALES.iter().enumerate() {
        let sign = if client_id == 0 { -1.0 } else { 1.0 };
        let w_true: Vec<f64> = centre
            .iter()
            .zip(&direction)
            .map(|(&c, &u)| c + sign * 0.5 * separation * u)
            .collect();
        let mut attempt = 0;
        let client = loop {
            let raw = standard_normals(rng, n_per_client * d);
            let mut design = Matrix::zeros(n_per_client, aug);
            for r in 0..n_per_client {
                let row = design.row_mut(r);
                for c in 0..d {
                    row[c] = scale * raw[r * d + c];
                }
                row[d] = 1.0;
            }
            let noise = standard_normals(rng, n_per_client);
            let targets: Vec<f64> = (0..n_per_client)
                .map(|r| linalg::dot(design.row(r), &w_true) + TOY_NOISE_STD * noise[r])
                .collect();
            let well_conditioned = linalg::cond_1(&design.gram())
                .map(|c| c < 1e8)
                .unwrap_or(false);
            if well_conditioned {
                break QuadraticClient::new(design, targets, TOY_NOISE_STD)?;
            }
            attempt += 1;
            if attempt >= 16 {
                return Err(Error::SingularSystem {
                    context: "toy design generation",
                });
            }
        };
        let raw_features = {
            let mut m = Matrix::zeros(n_per_client, d);
            for r in 0..n_per_client {
                m.row_mut(r).copy_from_slice(&client.design().row(r)[..d]);
            }
            m
        };
        let targets = Matrix::from_vec(n_per_client, 1, client.targets().to_vec())?;
        shards.push(ClientShard::new(
            client_id,
            Batch::new(raw_features, BatchTargets::Regression(targets))?,
        )?);
        clients.push(client);
    }
    let mu_global = global_target(&clients)?;
    Ok(ToyTask {
        clients,
        shards,
        mu_global,
    })
}

/// Radius at which blob class means are placed.
const BLOB_RADIUS: f64 = 3.0;

/// Gaussian blobs: `n_classes` isotropic clusters of width `spread`. The
/// first `2·dim` class means sit at `±BLOB_RADIUS` along coordinate axes
/// (guaranteed pairwise separation); any further means use random unit
/// directions. Rows are emitted class by class.
pub fn gen_blobs(
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    if n_classes == 0 || dim == 0 || n_per_class == 0 {
        return Err(Error::InvalidParam {
            name: "blob shape",
            reason: "class count, dimension and rows per class must be positive",
        });
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidParam {
            name: "spread",
            reason: "must be non-negative and finite",
        });
    }
    let mut means = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let mut mean = vec![0.0; dim];
        if c < 2 * dim {
            let axis = c / 2;
            let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
            mean[axis] = sign * BLOB_RADIUS;
        } else {
            let raw = standard_normals(rng, dim);
            let norm = libm::sqrt(raw.iter().map(|v| v * v).sum::<f64>());
            for (m, r) in mean.iter_mut().zip(&raw) {
                *m = BLOB_RADIUS * r / norm;
            }
        }
        means.push(mean);
    }
    let n = n_classes * n_per_class;
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for k in 0..n_per_class {
            let r = c * n_per_class + k;
            let noise = standard_normals(rng, dim);
            let row = features.row_mut(r);
            for j in 0..dim {
                row[j] = mean[j] + spread * noise[j];
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, n_classes)
}

/// Falling back to fewer classes than requested is worth surfacing; one note
/// per affected client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionNote {
    pub client_id: usize,
    pub requested_classes: usize,
    pub assigned_classes: usize,
}

/// Result of a label-skew partition: the shards, the dataset row index list
/// per client (disjoint across clients), and any fallback notes.
#[derive(Clone, Debug)]
pub struct Partition {
    pub shards: Vec<ClientShard>,
    pub assignments: Vec<Vec<usize>>,
    pub notes: Vec<PartitionNote>,
}

/// Splits a classification dataset into `n_clients` shards, each restricted
/// to at most `classes_per_client` classes (exactly that many when pools
/// allow) with `samples_per_client` rows each.
///
/// Classes are dealt from repeatedly reshuffled decks so every class gets
/// used; sample pools are consumed without replacement, so assignments are
/// disjoint across clients. When a pool runs dry the client backfills from
/// its other classes; a shard may come up one row short before the partition
/// is declared infeasible (naming the exhausted class).
pub fn partition_by_label(
    dataset: &Dataset,
    n_clients: usize,
    classes_per_client: usize,
    samples_per_client: usize,
    rng: &mut impl Rng,
) -> Result<Partition> {
    let n_classes = dataset.n_classes();
    if n_clients == 0 {
        return Err(Error::InvalidParam {
            name: "n_clients",
            reason: "must be positive",
        });
    }
    if classes_per_client == 0 || classes_per_client > n_classes {
        return Err(Error::InvalidParam {
            name: "classes_per_client",
            reason: "must lie in [1, n_classes]",
        });
    }
    if samples_per_client == 0 {
        return Err(Error::InvalidParam {
            name: "samples_per_client",
            reason: "must be positive",
        });
    }
    if n_clients * samples_per_client > dataset.len() {
        return Err(Error::InvalidParam {
            name: "samples_per_client",
            reason: "clients × samples exceeds the dataset size",
        });
    }

    // Shuffled per-class sample pools; rows are popped from the back.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (row, &label) in dataset.labels().iter().enumerate() {
        pools[label].push(row);
    }
    for pool in &mut pools {
        pool.shuffle(rng);
    }

    // Class deck: fresh shuffles of 0..C appended whenever the deck runs low,
    // so classes are spread round-robin across clients.
    let mut deck: Vec<usize> = Vec::new();
    let refill = |deck: &mut Vec<usize>, rng: &mut _| {
        let mut order: Vec<usize> = (0..n_classes).collect();
        order.shuffle(rng);
        deck.extend(order);
    };

    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(n_clients);
    let mut notes = Vec::new();
    for client_id in 0..n_clients {
        // Pick this client's classes: scan the deck for entries that are new
        // to the client and still have samples.
        let mut chosen: Vec<usize> = Vec::with_capacity(classes_per_client);
        let mut refills_without_progress = 0;
        while chosen.len() < classes_per_client && refills_without_progress < 2 {
            let before = chosen.len();
            let mut cursor = 0;
            while cursor < deck.len() && chosen.len() < classes_per_client {
                let class = deck[cursor];
                if !chosen.contains(&class) && !pools[class].is_empty() {
                    chosen.push(class);
                    deck.remove(cursor);
                } else {
                    cursor += 1;
                }
            }
            if chosen.len() < classes_per_client {
                refill(&mut deck, rng);
                refills_without_progress = if chosen.len() == before {
                    refills_without_progress + 1
                } else {
                    0
                };
            }
        }
        if chosen.is_empty() {
            // Every class pool is empty; the feasibility precondition above
            // should have caught this, but belt and braces.
            return Err(Error::InfeasiblePartition { class: 0 });
        }
        if chosen.len() < classes_per_client {
            notes.push(PartitionNote {
                client_id,
                requested_classes: classes_per_client,
                assigned_classes: chosen.len(),
            });
        }

        // Per-class quotas: split samples_per_client as evenly as possible.
        let k = chosen.len();
        let base = samples_per_client / k;
        let rem = samples_per_client % k;
        let mut rows: Vec<usize> = Vec::with_capacity(samples_per_client);
        let mut deficit = 0usize;
        let mut exhausted_class = None;
        for (slot, &class) in chosen.iter().enumerate() {
            let want = base + usize::from(slot < rem);
            let take = want.min(pools[class].len());
            if take < want && exhausted_class.is_none() {
                exhausted_class = Some(class);
            }
            deficit += want - take;
            let start = pools[class].len() - take;
            rows.extend(pools[class].drain(start..));
        }
        // Backfill the deficit from this client's other classes.
        while deficit > 0 {
            let Some(&class) = chosen.iter().max_by_key(|&&c| pools[c].len()) else {
                break;
            };
            if pools[class].is_empty() {
                break;
            }
            rows.push(pools[class].pop().expect("checked non-empty"));
            deficit -= 1;
        }
        if deficit > 1 {
            return Err(Error::InfeasiblePartition {
                class: exhausted_class.unwrap_or(chosen[0]),
            });
        }
        rows.sort_unstable();
        assignments.push(rows);
    }

    let mut shards = Vec::with_capacity(n_clients);
    for (client_id, rows) in assignments.iter().enumerate() {
        let features = dataset.features().rows_subset(rows);
        let labels: Vec<usize> = rows.iter().map(|&r| dataset.labels()[r]).collect();
        let shard = ClientShard::new(
            client_id,
            Batch::new(features, BatchTargets::Classes(labels))?,
        )?;
        debug_assert!(shard.classes().len() <= classes_per_client);
        shards.push(shard);
    }
    Ok(Partition {
        shards,
        assignments,
        notes,
    })
}

/// A distribution shift applied to a dataset.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ShiftKind {
    /// Adds `delta` to every feature coordinate; labels are untouched.
    MeanShift { delta: f64 },
    /// Splits off the named classes: they become the out-of-distribution
    /// side, everything else stays in distribution.
    LabelHoldout { classes: Vec<usize> },
}

/// In-distribution / out-of-distribution pair produced by [`shift_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedData {
    pub id: Dataset,
    pub ood: Dataset,
}

/// Applies a shift, returning the in-distribution data alongside the shifted
/// (or held-out) rows.
pub fn shift_dataset(dataset: &Dataset, kind: &ShiftKind) -> Result<ShiftedData> {
    match kind {
        ShiftKind::MeanShift { delta } => {
            if !delta.is_finite() {
                return Err(Error::NonFinite {
                    context: "mean shift delta",
                });
            }
            let mut shifted = dataset.features().clone();
            for r in 0..shifted.rows() {
                for v in shifted.row_mut(r) {
                    *v += delta;
                }
            }
            Ok(ShiftedData {
                id: dataset.clone(),
                ood: Dataset::new(shifted, dataset.labels().to_vec(), dataset.n_classes())?,
            })
        }
        ShiftKind::LabelHoldout { classes } => {
            if classes.is_empty() {
                return Err(Error::Empty("holdout classes"));
            }
            if classes.iter().any(|&c| c >= dataset.n_classes()) {
                return Err(Error::InvalidParam {
                    name: "holdout classes",
                    reason: "class index exceeds the class count",
                });
            }
            let held: Vec<usize> = (0..dataset.len())
                .filter(|&r| classes.contains(&dataset.labels()[r]))
                .collect();
            let kept: Vec<usize> = (0..dataset.len())
                .filter(|&r| !classes.contains(&dataset.labels()[r]))
                .collect();
            if kept.is_empty() {
                return Err(Error::InvalidParam {
                    name: "holdout classes",
                    reason: "holding out every class would empty the dataset",
                });
            }
            if held.is_empty() {
                return Err(Error::InvalidParam {
                    name: "holdout classes",
                    reason: "no rows carry the held-out classes",
                });
            }
            Ok(ShiftedData {
                id: dataset.rows_subset(&kept),
                ood: dataset.rows_subset(&held),
            })
        }
    }
}
