//! Run configuration: a strict JSON schema with defaults, dotted-path
//! overrides from the command line, resolution into concrete model and data
//! objects, and a content hash that ties checkpoints to the configuration
//! that produced them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fedabml_core::bnn::{Activation, Likelihood, ModelSpec};
use fedabml_core::fedcore::FedConfig;
use fedabml_core::rng::{self, Purpose};
use fedabml_core::tasks::{
    gen_blobs, gen_toy_lsq, partition_by_label, ClientShard, Dataset, TOY_NOISE_STD,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration problem (bad file, bad override, failed validation).
/// Surfaced as a distinct exit code by the binary.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

/// Top-level run description. Unknown keys anywhere in the tree are
/// rejected, so typos fail loudly instead of silently using a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub fed: FedConfig,
    /// Where output files go; falls back to `--out`, then `$FEDABML_OUT_DIR`,
    /// then the working directory.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            fed: FedConfig::default(),
            output_dir: None,
        }
    }
}

/// Which dataset the run trains on. Externally tagged:
/// `{"task": {"blobs": {...}}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskConfig {
    /// Two linear-Gaussian clients with a closed-form fusion target.
    Toy(ToyConfig),
    /// Gaussian blob classification, label-skew partitioned.
    Blobs(BlobsConfig),
    /// Classification rows loaded from a CSV file, label-skew partitioned.
    Csv(CsvConfig),
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Blobs(BlobsConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub d: usize,
    pub n_per_client: usize,
    /// Distance between the two clients' true weight vectors.
    pub separation: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            d: 2,
            n_per_client: 50,
            separation: 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    pub classes_per_client: usize,
    pub samples_per_client: usize,
    pub test_fraction: f64,
    /// Classes withheld from partitioning and training entirely; their rows
    /// stay in the source dataset so `entropy-report --shift holdout:...`
    /// can measure the model on inputs it has never seen.
    pub holdout_classes: Vec<usize>,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            n_classes: 10,
            dim: 2,
            n_per_class: 100,
            spread: 0.8,
            classes_per_client: 2,
            samples_per_client: 100,
            test_fraction: 0.25,
            holdout_classes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub path: PathBuf,
    pub n_classes: usize,
    #[serde(default = "default_classes_per_client")]
    pub classes_per_client: usize,
    pub samples_per_client: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// See [`BlobsConfig::holdout_classes`].
    #[serde(default)]
    pub holdout_classes: Vec<usize>,
}

fn default_classes_per_client() -> usize {
    2
}

fn default_test_fraction() -> f64 {
    0.25
}

/// Network shape and observation model. `hidden` lists hidden layer widths
/// (empty means a linear model); the likelihood defaults to whatever fits
/// the task: Gaussian with the toy noise level, categorical otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub likelihood: Option<Likelihood>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: Vec::new(),
            activation: Activation::Tanh,
            likelihood: None,
        }
    }
}

/// Loads a config file (or starts from defaults when `path` is `None`),
/// applies `key.path=value` overrides, then validates the result.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| bad(format!("{} is not valid JSON: {e}", p.display())))?
        }
        None => serde_json::Value::Object(serde_json::Map::new()),
    };
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let config: RunConfig =
        serde_json::from_value(value).map_err(|e| bad(format!("bad config: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Applies one `a.b.c=value` override to a JSON tree, creating intermediate
/// objects as needed. The value is parsed as JSON when possible and treated
/// as a bare string otherwise, so `fed.lr_phi=0.05` and
/// `fed.mode=fedavg` both work.
pub fn apply_override(root: &mut serde_json::Value, spec: &str) -> anyhow::Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| bad(format!("override `{spec}` is not of the form key.path=value")))?;
    if path.is_empty() {
        return Err(bad(format!("override `{spec}` has an empty key")));
    }
    let leaf: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        if segment.is_empty() {
            return Err(bad(format!("override `{spec}` has an empty path segment")));
        }
        let map = node.as_object_mut().ok_or_else(|| {
            bad(format!(
                "override `{spec}`: `{}` is not an object",
                segments[..i].join(".")
            ))
        })?;
        if i + 1 == segments.len() {
            map.insert(segment.to_string(), leaf);
            return Ok(());
        }
        node = map
            .entry(segment.to_string())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
    }
    unreachable!("segments is non-empty");
}

impl RunConfig {
    /// Cross-field checks that the schema alone cannot express.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.fed
            .validate()
            .map_err(|e| bad(format!("fed: {e}")))?;
        match &self.task {
            TaskConfig::Toy(toy) => {
                if self.fed.n_clients != 2 {
                    return Err(bad(format!(
                        "the toy task has exactly 2 clients; set fed.n_clients=2 (got {})",
                        self.fed.n_clients
                    )));
                }
                if !self.model.hidden.is_empty() {
                    return Err(bad(
                        "the toy task tracks a closed-form linear target; model.hidden must be []",
                    ));
                }
                if let Some(Likelihood::Categorical) = self.model.likelihood {
                    return Err(bad("the toy task is a regression; use a gaussian likelihood"));
                }
                if toy.d == 0 {
                    return Err(bad("task.toy.d must be positive"));
                }
            }
            TaskConfig::Blobs(blobs) => {
                if let Some(Likelihood::Gaussian { .. }) = self.model.likelihood {
                    return Err(bad(
                        "blob classification needs a categorical likelihood",
                    ));
                }
                if !(blobs.spread > 0.0 && blobs.spread.is_finite()) {
                    return Err(bad("task.blobs.spread must be positive and finite"));
                }
                if !(0.0..1.0).contains(&blobs.test_fraction) {
                    return Err(bad("task.blobs.test_fraction must lie in [0, 1)"));
                }
                validate_holdout(&blobs.holdout_classes, blobs.n_classes, "task.blobs")?;
            }
            TaskConfig::Csv(csv) => {
                if let Some(Likelihood::Gaussian { .. }) = self.model.likelihood {
                    return Err(bad("csv classification needs a categorical likelihood"));
                }
                if csv.n_classes == 0 {
                    return Err(bad("task.csv.n_classes must be positive"));
                }
                if !(0.0..1.0).contains(&csv.test_fraction) {
                    return Err(bad("task.csv.test_fraction must lie in [0, 1)"));
                }
                validate_holdout(&csv.holdout_classes, csv.n_classes, "task.csv")?;
            }
        }
        Ok(())
    }

    /// Classes withheld from training by the task, if any.
    pub fn holdout_classes(&self) -> &[usize] {
        match &self.task {
            TaskConfig::Toy(_) => &[],
            TaskConfig::Blobs(b) => &b.holdout_classes,
            TaskConfig::Csv(c) => &c.holdout_classes,
        }
    }

    /// The likelihood actually used: the explicit choice if present,
    /// otherwise inferred from the task.
    pub fn effective_likelihood(&self) -> Likelihood {
        match (&self.model.likelihood, &self.task) {
            (Some(l), _) => l.clone(),
            (None, TaskConfig::Toy(_)) => Likelihood::Gaussian {
                sigma: TOY_NOISE_STD,
            },
            (None, _) => Likelihood::Categorical,
        }
    }

    fn layer_sizes(&self, input_dim: usize, output_dim: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.model.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&self.model.hidden);
        sizes.push(output_dim);
        sizes
    }
}

/// A configuration resolved into concrete objects: the model, one
/// (train, test) shard pair per client, and whatever the task additionally
/// provides (a closed-form target for the toy task; the source dataset and
/// row assignments for partitioned classification tasks).
pub struct ResolvedRun {
    pub spec: ModelSpec,
    pub data: Vec<(ClientShard, ClientShard)>,
    pub target: Option<Vec<f64>>,
    pub source: Option<Dataset>,
    pub assignments: Option<Vec<Vec<usize>>>,
}

/// Materializes the task described by `config`. All randomness is keyed by
/// `fed.seed`, so the same configuration always resolves to the same bytes.
pub fn resolve(config: &RunConfig) -> anyhow::Result<ResolvedRun> {
    resolve_generation(config, 0)
}

/// Like [`resolve`], but draws the data from a later generation of the data
/// stream: generation 0 is the training population, generation `g > 0`
/// yields fresh clients that never appeared in training (for the toy and
/// blob tasks, which synthesize new rows; the CSV task re-partitions its
/// fixed rows, which may overlap the training shards).
pub fn resolve_generation(config: &RunConfig, generation: u64) -> anyhow::Result<ResolvedRun> {
    let seed = config.fed.seed;
    let likelihood = config.effective_likelihood();
    match &config.task {
        TaskConfig::Toy(toy) => {
            let mut rng = rng::stream(seed, Purpose::Data, generation, 0);
            let task = gen_toy_lsq(toy.d, toy.n_per_client, toy.separation, &mut rng)?;
            let spec = ModelSpec::new(
                config.layer_sizes(toy.d, 1),
                config.model.activation.clone(),
                likelihood,
            )?;
            let data = task
                .shards
                .iter()
                .map(|s| (s.clone(), s.clone()))
                .collect();
            Ok(ResolvedRun {
                spec,
                data,
                target: Some(task.mu_global.clone()),
                source: None,
                assignments: None,
            })
        }
        TaskConfig::Blobs(blobs) => {
            let mut rng = rng::stream(seed, Purpose::Data, generation, 0);
            let dataset = gen_blobs(
                blobs.n_classes,
                blobs.dim,
                blobs.n_per_class,
                blobs.spread,
                &mut rng,
            )?;
            resolve_partitioned(
                config,
                dataset,
                blobs.classes_per_client,
                blobs.samples_per_client,
                blobs.test_fraction,
                generation,
            )
        }
        TaskConfig::Csv(csv) => {
            let dataset = crate::io::load_csv(&csv.path, Some(csv.n_classes))?;
            resolve_partitioned(
                config,
                dataset,
                csv.classes_per_client,
                csv.samples_per_client,
                csv.test_fraction,
                generation,
            )
        }
    }
}

fn validate_holdout(holdout: &[usize], n_classes: usize, field: &str) -> anyhow::Result<()> {
    if holdout.iter().any(|&c| c >= n_classes) {
        return Err(bad(format!(
            "{field}.holdout_classes names a class outside 0..{n_classes}"
        )));
    }
    let mut unique = holdout.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != holdout.len() {
        return Err(bad(format!("{field}.holdout_classes has duplicates")));
    }
    if unique.len() >= n_classes {
        return Err(bad(format!(
            "{field}.holdout_classes must leave at least one class to train on"
        )));
    }
    Ok(())
}

fn resolve_partitioned(
    config: &RunConfig,
    dataset: Dataset,
    classes_per_client: usize,
    samples_per_client: usize,
    test_fraction: f64,
    generation: u64,
) -> anyhow::Result<ResolvedRun> {
    let seed = config.fed.seed;
    // Rows of held-out classes never reach the partitioner; the full
    // dataset is still returned as the source so shift-based diagnostics
    // can use those rows as genuinely unseen inputs.
    let holdout = config.holdout_classes();
    let (train_view, view_rows): (Dataset, Vec<usize>) = if holdout.is_empty() {
        (dataset.clone(), (0..dataset.len()).collect())
    } else {
        let keep: Vec<usize> = (0..dataset.len())
            .filter(|&r| !holdout.contains(&dataset.labels()[r]))
            .collect();
        (dataset.rows_subset(&keep), keep)
    };
    let mut part_rng = rng::stream(seed, Purpose::Data, generation, 1);
    let partition = partition_by_label(
        &train_view,
        config.fed.n_clients,
        classes_per_client,
        samples_per_client,
        &mut part_rng,
    )?;
    let mut split_rng = rng::stream(seed, Purpose::Data, generation, 2);
    let mut data = Vec::with_capacity(partition.shards.len());
    for shard in &partition.shards {
        data.push(shard.split(test_fraction, &mut split_rng)?);
    }
    // Assignments are reported in source-dataset row indices even when the
    // partitioner saw only the kept rows.
    let assignments = partition
        .assignments
        .iter()
        .map(|rows| rows.iter().map(|&r| view_rows[r]).collect())
        .collect();
    let spec = ModelSpec::new(
        config.layer_sizes(dataset.dim(), dataset.n_classes()),
        config.model.activation.clone(),
        config.effective_likelihood(),
    )?;
    Ok(ResolvedRun {
        spec,
        data,
        target: None,
        source: Some(dataset),
        assignments: Some(assignments),
    })
}

/// The configuration with run-length and output knobs neutralized: two
/// configs with the same canonical form produce bit-identical training
/// trajectories, so extending a run does not orphan its checkpoints.
pub fn canonical_config(config: &RunConfig) -> RunConfig {
    let mut canonical = config.clone();
    canonical.fed.rounds = 0;
    canonical.output_dir = None;
    canonical
}

/// Hex SHA-256 of the canonical configuration's JSON form.
pub fn manifest_hash(config: &RunConfig) -> String {
    let canonical = canonical_config(config);
    let json = serde_json::to_vec(&canonical).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    hex::encode(hasher.finalize())
}

/// Human-readable manifest: the canonical config, its hash, and the resolved
/// model shape.
pub fn manifest(config: &RunConfig, spec: &ModelSpec) -> serde_json::Value {
    serde_json::json!({
        "format_version": 1,
        "hash": manifest_hash(config),
        "config": canonical_config(config),
        "model": {
            "layer_sizes": spec.layer_sizes,
            "param_count": spec.param_count(),
        },
    })
}
