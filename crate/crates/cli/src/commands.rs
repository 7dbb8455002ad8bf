//! Subcommand implementations. Every command resolves its configuration to
//! concrete data, runs the requested work, writes its artifacts under the
//! output directory, and prints a short plain-text summary. Timestamps
//! appear only in `run.log`, so every other artifact is byte-reproducible.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context as _;
use fedabml_core::bnn::Likelihood;
use fedabml_core::fedcore::{personalize, FedConfig, Mode, Trainer};
use fedabml_core::metrics::predictive_entropy;
use fedabml_core::rng::{self, Purpose};
use fedabml_core::tasks::ShiftKind;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{
    self, apply_override, manifest_hash, ConfigError, ResolvedRun, RunConfig, TaskConfig,
};
use crate::io;

fn bad(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

/// Picks the output directory: `--out` wins, then the config's
/// `output_dir`, then `$FEDABML_OUT_DIR`, then the working directory.
/// The directory is created if missing.
pub fn resolve_out_dir(
    cli_out: Option<&Path>,
    config_out: Option<&Path>,
) -> anyhow::Result<PathBuf> {
    let dir = cli_out
        .map(Path::to_path_buf)
        .or_else(|| config_out.map(Path::to_path_buf))
        .or_else(|| std::env::var_os("FEDABML_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

/// Appends a timestamped line to `run.log`. This is the only artifact that
/// carries wall-clock time; everything else depends only on the config.
pub fn log_line(dir: &Path, message: &str) -> anyhow::Result<()> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("run.log"))?;
    writeln!(file, "{secs} {message}")?;
    Ok(())
}

/// The two-client linear benchmark configuration used by `run-toy` (and as
/// the base for its `--set` overrides). Full participation, full batches,
/// ten posterior steps per round, and a strong coupling weight so the
/// fused prior heads for the precision-weighted merge of the local
/// solutions rather than their midpoint.
pub fn toy_default_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.task = TaskConfig::Toy(config::ToyConfig::default());
    config.fed = FedConfig {
        n_clients: 2,
        participation: 1.0,
        rounds: 100,
        local_rounds: 10,
        inner_steps: 1,
        // Keep lr_phi · (data curvature + kl_weight/σ_p²) well under the
        // quadratic stability bound at the initial prior width.
        lr_phi: 0.002,
        lr_theta: 0.002,
        kl_weight: 5.0,
        kl_scale: 1.0,
        mc_samples: 5,
        batch_size: 64,
        mode: Mode::FedAbml,
        aggregation: fedabml_core::varinf::AggregationStrategy::Oracle,
        seed: 0,
        size_weighted: false,
        theta_grad: fedabml_core::fedcore::ThetaGradEstimator::ClosedForm,
    };
    config
}

/// Prints the resolved manifest (canonical config, hash, model shape).
pub fn cmd_validate(config: &RunConfig) -> anyhow::Result<()> {
    let resolved = config::resolve(config)?;
    let manifest = config::manifest(config, &resolved.spec);
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

/// Writes `partition.json` describing which dataset rows and classes each
/// client holds.
pub fn cmd_partition(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let resolved = config::resolve(config)?;
    let (source, assignments) = match (&resolved.source, &resolved.assignments) {
        (Some(s), Some(a)) => (s, a),
        _ => {
            return Err(bad(
                "the toy task has no label partition; use a blobs or csv task",
            ))
        }
    };
    let clients: Vec<io::PartitionClient> = assignments
        .iter()
        .enumerate()
        .map(|(client_id, rows)| {
            let mut classes: Vec<usize> = rows.iter().map(|&r| source.labels()[r]).collect();
            classes.sort_unstable();
            classes.dedup();
            io::PartitionClient {
                client_id,
                classes,
                rows: rows.clone(),
            }
        })
        .collect();
    let manifest = io::PartitionManifest {
        n_clients: clients.len(),
        n_rows: source.len(),
        clients,
    };
    let path = out.join("partition.json");
    io::write_partition_manifest(&manifest, &path)?;
    for client in &manifest.clients {
        println!(
            "client {}: {} rows, classes {:?}",
            client.client_id,
            client.rows.len(),
            client.classes
        );
    }
    println!("wrote {}", path.display());
    log_line(out, "partition")?;
    Ok(())
}

fn build_trainer(config: &RunConfig, resolved: ResolvedRun) -> anyhow::Result<Trainer> {
    let trainer = Trainer::new(resolved.spec, config.fed.clone(), resolved.data)?;
    match resolved.target {
        Some(target) => Ok(trainer.with_target(target)?),
        None => Ok(trainer),
    }
}

fn export_run(trainer: &Trainer, config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    checkpoint::save(&out.join("checkpoint.fabm"), config, &trainer.state())?;
    io::export_history_jsonl(trainer.history(), &config.fed.mode, &out.join("history.jsonl"))?;
    io::export_history_csv(trainer.history(), &config.fed.mode, &out.join("history.csv"))?;
    Ok(())
}

fn print_run_summary(trainer: &Trainer, config: &RunConfig) {
    let mode = io::mode_name(&config.fed.mode);
    println!(
        "trained {} rounds (mode {mode}, {} clients, {} per round)",
        trainer.round(),
        config.fed.n_clients,
        config.fed.clients_per_round()
    );
    if let Some(last) = trainer.history().last() {
        if let Some(acc) = last.eval.mean_accuracy {
            println!("final mean accuracy: {acc:.4}");
        }
        if let Some(mse) = last.eval.mean_mse {
            println!("final mean mse: {mse:.6}");
        }
        println!("final mean nll: {:.6}", last.eval.mean_nll);
        if let Some(dist) = last.dist_to_target {
            println!("final distance to target: {dist:.6}");
        }
    }
}

/// Trains from scratch and writes `checkpoint.fabm`, `history.jsonl`, and
/// `history.csv`.
pub fn cmd_train(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let hash = manifest_hash(config);
    println!("manifest hash: {hash}");
    let resolved = config::resolve(config)?;
    let mut trainer = build_trainer(config, resolved)?;
    trainer.run()?;
    export_run(&trainer, config, out)?;
    print_run_summary(&trainer, config);
    println!("wrote checkpoint.fabm, history.jsonl, history.csv");
    log_line(out, &format!("train: {} rounds, hash {hash}", trainer.round()))?;
    Ok(())
}

/// Continues a checkpointed run for `extra_rounds` more rounds. Overrides
/// may only touch run-length and output knobs; anything that would change
/// the trajectory is refused with both hashes printed.
pub fn cmd_resume(
    checkpoint_path: &Path,
    extra_rounds: u64,
    overrides: &[String],
    cli_out: Option<&Path>,
) -> anyhow::Result<()> {
    let ck = checkpoint::load(checkpoint_path)?;
    let stored_hash = ck.manifest_hash.clone();
    let recomputed = manifest_hash(&ck.config);
    if recomputed != stored_hash {
        return Err(bad(format!(
            "{}: stored manifest hash {stored_hash} does not match its own config ({recomputed}); the file is corrupt or from an incompatible build",
            checkpoint_path.display()
        )));
    }
    let mut config = ck.config.clone();
    if !overrides.is_empty() {
        let mut value = serde_json::to_value(&config)?;
        for spec in overrides {
            apply_override(&mut value, spec)?;
        }
        config = serde_json::from_value(value).map_err(|e| bad(format!("bad override: {e}")))?;
        config.validate()?;
        let overridden = manifest_hash(&config);
        if overridden != stored_hash {
            return Err(bad(format!(
                "overrides change the run (checkpoint hash {stored_hash}, overridden hash {overridden}); only run-length and output settings may differ on resume"
            )));
        }
    }
    config.fed.rounds = ck.state.round + extra_rounds;
    let out = resolve_out_dir(cli_out, config.output_dir.as_deref())?;
    let resolved = config::resolve(&config)?;
    let target = resolved.target.clone();
    let mut trainer = Trainer::from_state(
        resolved.spec,
        config.fed.clone(),
        resolved.data,
        ck.state,
    )?;
    if let Some(t) = target {
        trainer = trainer.with_target(t)?;
    }
    let resumed_from = trainer.round();
    trainer.run()?;
    export_run(&trainer, &config, &out)?;
    println!(
        "resumed at round {resumed_from}, now at round {} (hash {stored_hash})",
        trainer.round()
    );
    print_run_summary(&trainer, &config);
    log_line(&out, &format!("resume: rounds {resumed_from}..{}", trainer.round()))?;
    Ok(())
}

#[derive(Serialize)]
struct ToyCurveRow {
    round: u64,
    mode: &'static str,
    dist_to_target: f64,
    finetune_nll: f64,
}

/// Runs the two-client linear benchmark under the hierarchical mode and
/// plain averaging with identical data and seeds, writing
/// `toy_curves.csv` (per round and mode: distance of the fused model to the
/// closed-form merge target, and the data NLL after a ten-step local
/// fine-tune from the fused model).
pub fn cmd_run_toy(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    if !matches!(config.task, TaskConfig::Toy(_)) {
        return Err(bad("run-toy requires a toy task configuration"));
    }
    let mut rows: Vec<ToyCurveRow> = Vec::new();
    let mut finals: Vec<(&'static str, f64, f64)> = Vec::new();
    for mode in [Mode::FedAbml, Mode::FedAvg] {
        let mut mode_config = config.clone();
        mode_config.fed.mode = mode.clone();
        let mode_name = io::mode_name(&mode);
        let resolved = config::resolve(&mode_config)?;
        let spec = resolved.spec.clone();
        let shards: Vec<_> = resolved.data.clone();
        let target = resolved
            .target
            .clone()
            .expect("toy resolution always has a merge target");
        let mut trainer = build_trainer(&mode_config, resolved)?;
        let initial_dist =
            fedabml_core::metrics::distance_to_target(trainer.theta().mean(), &target)?;
        while trainer.round() < mode_config.fed.rounds {
            let record = trainer.step_round()?;
            let dist = record
                .dist_to_target
                .expect("toy task always has a target");
            let round = record.round;
            let probe_cfg = finetune_probe_config(&mode_config.fed);
            let mut nll_sum = 0.0;
            for (train, test) in &shards {
                let (_, reports) =
                    personalize(&spec, trainer.theta(), train, test, 1, &probe_cfg)?;
                nll_sum += reports.last().expect("epoch reports").nll;
            }
            rows.push(ToyCurveRow {
                round,
                mode: mode_name,
                dist_to_target: dist,
                finetune_nll: nll_sum / shards.len() as f64,
            });
        }
        let final_dist = rows.last().expect("at least one round").dist_to_target;
        finals.push((mode_name, initial_dist, final_dist));
        export_run(&trainer, &mode_config, out)?;
        fs::rename(
            out.join("checkpoint.fabm"),
            out.join(format!("checkpoint_{mode_name}.fabm")),
        )?;
        fs::rename(
            out.join("history.jsonl"),
            out.join(format!("history_{mode_name}.jsonl")),
        )?;
        fs::rename(
            out.join("history.csv"),
            out.join(format!("history_{mode_name}.csv")),
        )?;
    }
    write_toy_curves(&rows, &out.join("toy_curves.csv"))?;
    for (mode_name, initial, fin) in &finals {
        println!(
            "{mode_name}: distance to merge target {initial:.4} -> {fin:.4} ({:.1}% of initial)",
            100.0 * fin / initial
        );
    }
    println!("wrote toy_curves.csv and per-mode history/checkpoint files");
    log_line(out, "run-toy")?;
    Ok(())
}

/// Fine-tune probe used by the toy curves: ten plain posterior steps on the
/// full local batch with the coupling weight off, measuring how well the
/// fused model adapts to each client's data.
fn finetune_probe_config(base: &FedConfig) -> FedConfig {
    let mut probe = base.clone();
    probe.mode = Mode::FedAbml;
    probe.kl_weight = 0.0;
    probe.inner_steps = 10;
    probe.batch_size = usize::MAX / 2;
    probe.lr_phi = 0.02;
    probe
}

fn write_toy_curves(rows: &[ToyCurveRow], path: &Path) -> anyhow::Result<()> {
    let mut text = String::from("round,mode,dist_to_target,finetune_nll\n");
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            row.round,
            row.mode,
            serde_json::to_string(&row.dist_to_target)?,
            serde_json::to_string(&row.finetune_nll)?,
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Adapts a checkpointed prior to freshly drawn clients for each epoch count
/// in `epochs`, writing `finetune.csv` (one row per client, one column per
/// epoch count, accuracy for classification and NLL for regression).
pub fn cmd_finetune(
    checkpoint_path: &Path,
    epochs: &[usize],
    count: Option<usize>,
    cli_out: Option<&Path>,
) -> anyhow::Result<()> {
    if epochs.is_empty() {
        return Err(bad("--epochs needs at least one value"));
    }
    let mut grid: Vec<usize> = epochs.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let max_epochs = *grid.last().expect("non-empty grid");
    let ck = checkpoint::load(checkpoint_path)?;
    let out = resolve_out_dir(cli_out, ck.config.output_dir.as_deref())?;
    let mut gen_config = ck.config.clone();
    if let Some(n) = count {
        if n == 0 {
            return Err(bad("--count must be positive"));
        }
        if !matches!(gen_config.task, TaskConfig::Toy(_)) {
            gen_config.fed.n_clients = n;
        }
    }
    let fresh = config::resolve_generation(&gen_config, 1)?;
    if fresh.spec != config::resolve(&ck.config)?.spec {
        return Err(bad("fresh clients resolved to a different model shape"));
    }
    let spec = fresh.spec;
    let classification = matches!(spec.likelihood, Likelihood::Categorical);
    let mut table: Vec<(usize, Vec<f64>)> = Vec::new();
    for (train, test) in &fresh.data {
        let (_, reports) = personalize(
            &spec,
            &ck.state.theta,
            train,
            test,
            max_epochs,
            &ck.config.fed,
        )?;
        let row: Vec<f64> = grid
            .iter()
            .map(|&e| {
                let report = &reports[e];
                if classification {
                    report.accuracy.unwrap_or(f64::NAN)
                } else {
                    report.nll
                }
            })
            .collect();
        table.push((train.client_id, row));
    }
    let metric = if classification { "accuracy" } else { "nll" };
    let path = out.join("finetune.csv");
    let mut text = String::from("client_id");
    for e in &grid {
        text.push_str(&format!(",epoch_{e}"));
    }
    text.push('\n');
    for (client_id, row) in &table {
        text.push_str(&client_id.to_string());
        for v in row {
            text.push(',');
            text.push_str(&serde_json::to_string(v)?);
        }
        text.push('\n');
    }
    let n = table.len() as f64;
    let means: Vec<f64> = (0..grid.len())
        .map(|j| table.iter().map(|(_, row)| row[j]).sum::<f64>() / n)
        .collect();
    text.push_str("mean");
    for v in &means {
        text.push(',');
        text.push_str(&serde_json::to_string(v)?);
    }
    text.push('\n');
    fs::write(&path, text)?;
    println!(
        "personalized {} fresh clients from round {}",
        table.len(),
        ck.state.round
    );
    for (e, v) in grid.iter().zip(&means) {
        println!("epochs {e}: mean {metric} {v:.4}");
    }
    println!("wrote {}", path.display());
    log_line(&out, "finetune")?;
    Ok(())
}

/// Parses a shift description: `mean:<delta>` or `holdout:<c1,c2,...>`.
pub fn parse_shift(spec: &str) -> anyhow::Result<ShiftKind> {
    let (kind, arg) = spec
        .split_once(':')
        .ok_or_else(|| bad(format!("shift `{spec}` is not of the form kind:args")))?;
    match kind {
        "mean" => {
            let delta: f64 = arg
                .parse()
                .map_err(|_| bad(format!("mean shift delta `{arg}` is not a number")))?;
            Ok(ShiftKind::MeanShift { delta })
        }
        "holdout" => {
            let classes: Vec<usize> = arg
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse()
                        .map_err(|_| bad(format!("holdout class `{c}` is not an index")))
                })
                .collect::<anyhow::Result<_>>()?;
            if classes.is_empty() {
                return Err(bad("holdout shift needs at least one class"));
            }
            Ok(ShiftKind::LabelHoldout { classes })
        }
        other => Err(bad(format!(
            "unknown shift kind `{other}` (expected mean or holdout)"
        ))),
    }
}

#[derive(Serialize)]
struct EntropySide {
    mean: f64,
    histogram: Vec<usize>,
}

#[derive(Serialize)]
struct EntropyClient {
    client_id: usize,
    id_mean: f64,
    ood_mean: f64,
}

#[derive(Serialize)]
struct EntropyReport {
    shift: ShiftKind,
    mc_samples: usize,
    n_bins: usize,
    max_entropy: f64,
    /// Measured with the fused server model; the headline comparison.
    id: EntropySide,
    ood: EntropySide,
    /// The same comparison through each client's own posterior.
    per_client: Vec<EntropyClient>,
    ood_exceeds_id: bool,
}

const ENTROPY_BINS: usize = 20;

/// Compares predictive entropy on the training distribution against a
/// shifted copy. The headline numbers and `[0, ln C]` histograms use the
/// checkpointed server model; per-client posteriors are reported alongside.
/// For a holdout comparison on genuinely unseen classes, train with
/// `task.*.holdout_classes` set and pass the same classes here.
pub fn cmd_entropy_report(
    checkpoint_path: &Path,
    shift_spec: &str,
    cli_out: Option<&Path>,
) -> anyhow::Result<()> {
    let shift = parse_shift(shift_spec)?;
    let ck = checkpoint::load(checkpoint_path)?;
    let out = resolve_out_dir(cli_out, ck.config.output_dir.as_deref())?;
    let resolved = config::resolve(&ck.config)?;
    if !matches!(resolved.spec.likelihood, Likelihood::Categorical) {
        return Err(bad(
            "entropy reports need a classification task (blobs or csv)",
        ));
    }
    let source = resolved
        .source
        .as_ref()
        .expect("classification tasks carry their source dataset");
    let shifted = fedabml_core::tasks::shift_dataset(source, &shift)?;
    let spec = &resolved.spec;
    let n_classes = *spec.layer_sizes.last().expect("validated spec");
    let max_entropy = (n_classes as f64).ln();
    let s = ck.config.fed.mc_samples;
    let seed = ck.config.fed.seed;
    let round = ck.state.round;

    let mut id_rng = rng::stream(seed, Purpose::Eval, round, 0);
    let mut ood_rng = rng::stream(seed, Purpose::Eval, round, 1);
    let theta = &ck.state.theta;
    let id_ent = predictive_entropy(spec, theta, shifted.id.features(), s, &mut id_rng)?;
    let ood_ent = predictive_entropy(spec, theta, shifted.ood.features(), s, &mut ood_rng)?;

    let mut per_client = Vec::new();
    for (client_id, phi) in ck.state.phis.iter().enumerate() {
        let unit = 2 + 2 * client_id as u64;
        let mut id_rng = rng::stream(seed, Purpose::Eval, round, unit);
        let mut ood_rng = rng::stream(seed, Purpose::Eval, round, unit + 1);
        let client_id_ent =
            predictive_entropy(spec, phi, shifted.id.features(), s, &mut id_rng)?;
        let client_ood_ent =
            predictive_entropy(spec, phi, shifted.ood.features(), s, &mut ood_rng)?;
        per_client.push(EntropyClient {
            client_id,
            id_mean: mean(&client_id_ent),
            ood_mean: mean(&client_ood_ent),
        });
    }
    let report = EntropyReport {
        shift,
        mc_samples: s,
        n_bins: ENTROPY_BINS,
        max_entropy,
        id: EntropySide {
            mean: mean(&id_ent),
            histogram: histogram(&id_ent, max_entropy),
        },
        ood: EntropySide {
            mean: mean(&ood_ent),
            histogram: histogram(&ood_ent, max_entropy),
        },
        per_client,
        ood_exceeds_id: mean(&ood_ent) > mean(&id_ent),
    };
    let path = out.join("entropy.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "server-model entropy: in-distribution {:.4}, shifted {:.4} ({} rows vs {} rows, max {max_entropy:.4})",
        report.id.mean,
        report.ood.mean,
        id_ent.len(),
        ood_ent.len()
    );
    println!(
        "shifted inputs are {} uncertain",
        if report.ood_exceeds_id { "more" } else { "NOT more" }
    );
    println!("wrote {}", path.display());
    log_line(&out, "entropy-report")?;
    Ok(())
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn histogram(values: &[f64], max: f64) -> Vec<usize> {
    let mut bins = vec![0usize; ENTROPY_BINS];
    for &v in values {
        let idx = ((v / max) * ENTROPY_BINS as f64) as usize;
        bins[idx.min(ENTROPY_BINS - 1)] += 1;
    }
    bins
}
