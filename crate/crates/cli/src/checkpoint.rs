//! Checkpoint file format: a small JSON header (configuration, hash, round,
//! history) followed by the raw little-endian `f64` parameters of the prior
//! and every client posterior. Loading rebuilds the exact `TrainState`, so
//! a resumed run continues bit-for-bit where it stopped.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use fedabml_core::fedcore::{RoundRecord, TrainState};
use fedabml_core::varinf::MeanFieldGaussian;
use serde::{Deserialize, Serialize};

use crate::config::{manifest_hash, RunConfig};

const MAGIC: [u8; 4] = *b"FABM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    manifest_hash: String,
    config: RunConfig,
    round: u64,
    n_clients: usize,
    param_dim: usize,
    /// Number of `f64` values following the header.
    payload_len: usize,
    history: Vec<RoundRecord>,
}

/// A loaded checkpoint: the configuration it was trained under, that
/// configuration's hash as recorded at save time, and the full train state.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub manifest_hash: String,
    pub state: TrainState,
}

/// Writes a checkpoint. The payload is the prior's mean and log-std followed
/// by each client posterior's mean and log-std, in client order.
pub fn save(path: &Path, config: &RunConfig, state: &TrainState) -> anyhow::Result<()> {
    let param_dim = state.theta.dim();
    let n_clients = state.phis.len();
    let payload_len = 2 * param_dim * (1 + n_clients);
    let header = Header {
        manifest_hash: manifest_hash(config),
        config: config.clone(),
        round: state.round,
        n_clients,
        param_dim,
        payload_len,
        history: state.history.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + 8 * payload_len);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    let mut push_values = |values: &[f64]| {
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    push_values(state.theta.mean());
    push_values(state.theta.log_std());
    for phi in &state.phis {
        push_values(phi.mean());
        push_values(phi.log_std());
    }
    fs::write(path, bytes).with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

/// Reads a checkpoint back, validating the container before rebuilding the
/// distributions (which re-checks finiteness and dimensions).
pub fn load(path: &Path) -> anyhow::Result<Checkpoint> {
    let bytes =
        fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    if bytes.len() < 16 || bytes[..4] != MAGIC {
        bail!("{} is not a checkpoint file", path.display());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        bail!(
            "{}: checkpoint format version {version} is not supported (expected {VERSION})",
            path.display()
        );
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| anyhow::anyhow!("{}: truncated header", path.display()))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .with_context(|| format!("{}: bad checkpoint header", path.display()))?;

    let payload = &bytes[payload_start..];
    if payload.len() != 8 * header.payload_len {
        bail!(
            "{}: payload holds {} bytes, header promises {}",
            path.display(),
            payload.len(),
            8 * header.payload_len
        );
    }
    let expected = 2 * header.param_dim * (1 + header.n_clients);
    if header.payload_len != expected {
        bail!(
            "{}: payload length {} does not match {} clients of dimension {}",
            path.display(),
            header.payload_len,
            header.n_clients,
            header.param_dim
        );
    }
    let mut values = Vec::with_capacity(header.payload_len);
    for chunk in payload.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let dim = header.param_dim;
    let mut cursor = values.chunks_exact(dim);
    let mut next_dist = || -> anyhow::Result<MeanFieldGaussian> {
        let mean = cursor.next().expect("length checked").to_vec();
        let log_std = cursor.next().expect("length checked").to_vec();
        Ok(MeanFieldGaussian::new(mean, log_std)?)
    };
    let theta = next_dist()?;
    let mut phis = Vec::with_capacity(header.n_clients);
    for _ in 0..header.n_clients {
        phis.push(next_dist()?);
    }
    Ok(Checkpoint {
        config: header.config,
        manifest_hash: header.manifest_hash,
        state: TrainState {
            round: header.round,
            theta,
            phis,
            history: header.history,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedabml_core::varinf::NU_MIN;

    fn sample_state() -> TrainState {
        let theta =
            MeanFieldGaussian::new(vec![0.25, -1.5, 3.0], vec![-2.0, -3.5, 0.5]).unwrap();
        let phis = vec![
            MeanFieldGaussian::new(vec![1.0, 2.0, 3.0], vec![NU_MIN, -1.0, -2.0]).unwrap(),
            MeanFieldGaussian::new(vec![-1.0, 0.5, 0.125], vec![-4.0, -5.0, -6.0]).unwrap(),
        ];
        TrainState {
            round: 7,
            theta,
            phis,
            history: Vec::new(),
        }
    }

    #[test]
    fn save_and_load_round_trip_bitwise() {
        let state = sample_state();
        let config = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.fabm");
        save(&path, &config, &state).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.state, state);
        assert_eq!(back.config, config);
        assert_eq!(back.manifest_hash, manifest_hash(&config));
    }

    #[test]
    fn saving_twice_yields_identical_bytes() {
        let state = sample_state();
        let config = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.fabm");
        let b = dir.path().join("b.fabm");
        save(&a, &config, &state).unwrap();
        save(&b, &config, &state).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn foreign_files_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_checkpoint");
        fs::write(&path, b"hello world, definitely not binary").unwrap();
        let err = load(&path).unwrap_err();
        assert!(format!("{err}").contains("not a checkpoint"));
    }

    #[test]
    fn truncated_payloads_are_detected() {
        let state = sample_state();
        let config = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.fabm");
        save(&path, &config, &state).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(format!("{err}").contains("payload"));
    }

    #[test]
    fn version_bumps_are_refused_with_both_versions_named() {
        let state = sample_state();
        let config = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.fabm");
        save(&path, &config, &state).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let msg = format!("{}", load(&path).unwrap_err());
        assert!(msg.contains("99") && msg.contains('1'), "{msg}");
    }
}
