//! Dataset files and the run manifest.
//!
//! A dataset file is one JSON header line followed by newline-delimited
//! JSON records, one per transition, with fields exactly
//! `s, a, s2, r, done, ep, t, R`. Floats are written with 17 significant
//! digits so every value round-trips bit-exactly. Loading is strict: wrong
//! dimensions, out-of-order episodes, truncation, discount mismatches, and
//! stored returns that disagree with a recomputation all fail with the
//! offending line number.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use macaw_core::envs::{
    EnvKind, ReplayBuffer, Task, TaskParams, Transition, ACT_DIM, OBS_DIM,
};
use macaw_core::losses::monte_carlo_returns;
use serde::{Deserialize, Serialize};

use crate::fmt_f64;

/// Errors from reading a dataset file.
#[derive(Debug)]
pub enum DatasetError {
    Io(std::io::Error),
    /// The first line failed to parse or declared an unusable layout.
    Header(String),
    /// A record line failed to parse or validate; 1-based line number.
    Record { line: usize, message: String },
    /// The file's discount disagrees with the run configuration.
    GammaMismatch { file: f64, expected: f64 },
    /// Fewer records than the header promised.
    Truncated { expected: usize, got: usize },
    /// A stored return disagrees with recomputation from the rewards.
    ReturnMismatch { line: usize, stored: f64, recomputed: f64 },
}

impl std::fmt::Display for DatasetError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetError::Io(e) => write!(f, "{e}"),
            DatasetError::Header(m) => write!(f, "line 1: {m}"),
            DatasetError::Record { line, message } => write!(f, "line {line}: {message}"),
            DatasetError::GammaMismatch { file, expected } => {
                write!(f, "dataset was generated with gamma={file}, run expects {expected}")
            }
            DatasetError::Truncated { expected, got } => {
                write!(f, "expected {expected} transition records, found {got}")
            }
            DatasetError::ReturnMismatch { line, stored, recomputed } => write!(
                f,
                "line {line}: stored return {stored} disagrees with recomputed {recomputed}"
            ),
        }
    }
}

impl std::error::Error for DatasetError {}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e)
    }
}

/// Task parameters in JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskParamsJson {
    Velocity { target: f64 },
    Direction { dir: [f64; 2] },
    Gain { scale: [f64; 2] },
}

impl TaskParamsJson {
    pub fn from_params(p: &TaskParams) -> TaskParamsJson {
        match *p {
            TaskParams::Velocity { target } => TaskParamsJson::Velocity { target },
            TaskParams::Direction { dir } => TaskParamsJson::Direction { dir },
            TaskParams::Gain { scale } => TaskParamsJson::Gain { scale },
        }
    }

    pub fn to_params(&self) -> TaskParams {
        match *self {
            TaskParamsJson::Velocity { target } => TaskParams::Velocity { target },
            TaskParamsJson::Direction { dir } => TaskParams::Direction { dir },
            TaskParamsJson::Gain { scale } => TaskParams::Gain { scale },
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            TaskParamsJson::Velocity { .. } => EnvKind::Velocity,
            TaskParamsJson::Direction { .. } => EnvKind::Direction,
            TaskParamsJson::Gain { .. } => EnvKind::Gain,
        }
    }
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub env: String,
    pub task_id: usize,
    pub task_params: TaskParamsJson,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub gamma: f64,
    pub episode_length: usize,
    pub episodes: usize,
    pub seed: u64,
}

/// Canonical file name for a task's dataset.
pub fn dataset_file_name(task_id: usize) -> String {
    format!("task_{task_id:03}.ndjson")
}

fn push_floats(out: &mut String, vals: &[f64]) {
    out.push('[');
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*v));
    }
    out.push(']');
}

fn record_line(tr: &Transition) -> String {
    let mut s = String::with_capacity(360);
    s.push_str("{\"s\":");
    push_floats(&mut s, &tr.s);
    s.push_str(",\"a\":");
    push_floats(&mut s, &tr.a);
    s.push_str(",\"s2\":");
    push_floats(&mut s, &tr.s2);
    let _ = write!(
        s,
        ",\"r\":{},\"done\":{},\"ep\":{},\"t\":{},\"R\":{}}}",
        fmt_f64(tr.r),
        tr.done,
        tr.ep,
        tr.t,
        fmt_f64(tr.ret)
    );
    s
}

/// Write one task's buffer as a dataset file.
pub fn write_dataset(path: &Path, buffer: &ReplayBuffer) -> std::io::Result<()> {
    let header = DatasetHeader {
        version: 1,
        env: buffer.task.kind().tag().to_string(),
        task_id: buffer.task.id,
        task_params: TaskParamsJson::from_params(&buffer.task.params),
        obs_dim: OBS_DIM,
        act_dim: ACT_DIM,
        gamma: buffer.gamma,
        episode_length: buffer.episode_len,
        episodes: buffer.episodes(),
        seed: buffer.seed,
    };
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for tr in &buffer.transitions {
        out.write_all(record_line(tr).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    s: Vec<f64>,
    a: Vec<f64>,
    s2: Vec<f64>,
    r: f64,
    done: bool,
    ep: u32,
    t: u32,
    #[serde(rename = "R")]
    ret: f64,
}

/// Load a dataset file back into a replay buffer, verifying layout,
/// sequencing, and stored Monte-Carlo returns (to 1e-9 against a
/// recomputation from the rewards).
pub fn load_dataset(path: &Path, expect_gamma: Option<f64>) -> Result<ReplayBuffer, DatasetError> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or_else(|| DatasetError::Header("empty file".into()))??;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| DatasetError::Header(e.to_string()))?;

    if header.version != 1 {
        return Err(DatasetError::Header(format!("unsupported version {}", header.version)));
    }
    if header.obs_dim != OBS_DIM || header.act_dim != ACT_DIM {
        return Err(DatasetError::Header(format!(
            "dimensions {}x{} do not match the point-mass layout {OBS_DIM}x{ACT_DIM}",
            header.obs_dim, header.act_dim
        )));
    }
    if header.episode_length == 0 || header.episodes == 0 {
        return Err(DatasetError::Header("episode count and length must be positive".into()));
    }
    if header.task_params.kind().tag() != header.env {
        return Err(DatasetError::Header(format!(
            "env tag `{}` does not match task params kind `{}`",
            header.env,
            header.task_params.kind().tag()
        )));
    }
    if let Some(expected) = expect_gamma {
        if header.gamma != expected {
            return Err(DatasetError::GammaMismatch { file: header.gamma, expected });
        }
    }

    let expected = header.episodes * header.episode_length;
    let mut transitions: Vec<Transition> = Vec::with_capacity(expected);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2; // 1-based; header is line 1
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: RecordIn = serde_json::from_str(&text)
            .map_err(|e| DatasetError::Record { line: line_no, message: e.to_string() })?;
        if rec.s.len() != OBS_DIM || rec.s2.len() != OBS_DIM || rec.a.len() != ACT_DIM {
            return Err(DatasetError::Record {
                line: line_no,
                message: format!(
                    "expected |s|=|s2|={OBS_DIM} and |a|={ACT_DIM}, got {}/{}/{}",
                    rec.s.len(),
                    rec.s2.len(),
                    rec.a.len()
                ),
            });
        }
        let all = rec.s.iter().chain(&rec.a).chain(&rec.s2).chain([&rec.r, &rec.ret]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::Record {
                line: line_no,
                message: "non-finite value".into(),
            });
        }
        let idx = transitions.len();
        let want_ep = (idx / header.episode_length) as u32;
        let want_t = (idx % header.episode_length) as u32;
        if rec.ep != want_ep || rec.t != want_t {
            return Err(DatasetError::Record {
                line: line_no,
                message: format!(
                    "out-of-order record: ep={} t={} where ep={want_ep} t={want_t} belongs",
                    rec.ep, rec.t
                ),
            });
        }
        if idx == expected {
            return Err(DatasetError::Record {
                line: line_no,
                message: format!("more records than the declared {expected}"),
            });
        }
        let mut s = [0.0; OBS_DIM];
        s.copy_from_slice(&rec.s);
        let mut a = [0.0; ACT_DIM];
        a.copy_from_slice(&rec.a);
        let mut s2 = [0.0; OBS_DIM];
        s2.copy_from_slice(&rec.s2);
        transitions.push(Transition {
            s,
            a,
            s2,
            r: rec.r,
            done: rec.done,
            ep: rec.ep,
            t: rec.t,
            ret: rec.ret,
        });
    }
    if transitions.len() != expected {
        return Err(DatasetError::Truncated { expected, got: transitions.len() });
    }

    // Stored returns must agree with a recomputation from the rewards.
    for ep in 0..header.episodes {
        let lo = ep * header.episode_length;
        let hi = lo + header.episode_length;
        let rewards: Vec<f64> = transitions[lo..hi].iter().map(|tr| tr.r).collect();
        let recomputed = monte_carlo_returns(&rewards, header.gamma);
        for (off, want) in recomputed.iter().enumerate() {
            let stored = transitions[lo + off].ret;
            if (stored - want).abs() > 1e-9 {
                return Err(DatasetError::ReturnMismatch {
                    line: lo + off + 2,
                    stored,
                    recomputed: *want,
                });
            }
        }
    }

    Ok(ReplayBuffer {
        task: Task { id: header.task_id, params: header.task_params.to_params() },
        gamma: header.gamma,
        episode_len: header.episode_length,
        seed: header.seed,
        transitions,
    })
}

/// One task's entry in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub id: usize,
    pub file: String,
    pub params: TaskParamsJson,
}

/// Run manifest: the full task list plus the train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub env: String,
    pub gamma: f64,
    pub episode_length: usize,
    pub episodes_per_task: usize,
    pub data_seed: u64,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub tasks: Vec<ManifestTask>,
}

pub fn manifest_path(data_dir: &Path) -> PathBuf {
    data_dir.join("manifest.json")
}

pub fn write_manifest(data_dir: &Path, manifest: &Manifest) -> std::io::Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(manifest_path(data_dir))?);
    serde_json::to_writer_pretty(&mut out, manifest)?;
    out.write_all(b"\n")?;
    out.flush()
}

pub fn load_manifest(data_dir: &Path) -> anyhow::Result<Manifest> {
    let path = manifest_path(data_dir);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        crate::ValidationError(format!("cannot read manifest {}: {e}", path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| crate::ValidationError(format!("manifest {}: {e}", path.display())))?;
    Ok(manifest)
}

/// Load the buffers for a set of task ids listed in the manifest.
pub fn load_buffers(
    data_dir: &Path,
    manifest: &Manifest,
    ids: &[usize],
    expect_gamma: Option<f64>,
) -> anyhow::Result<Vec<ReplayBuffer>> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let entry = manifest.tasks.iter().find(|t| t.id == *id).ok_or_else(|| {
            crate::ValidationError(format!("manifest lists no task with id {id}"))
        })?;
        let path = data_dir.join(&entry.file);
        if !path.is_file() {
            return Err(crate::ValidationError(format!(
                "dataset file {} is missing",
                path.display()
            ))
            .into());
        }
        let buffer = load_dataset(&path, expect_gamma)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        if buffer.task.params != entry.params.to_params() {
            return Err(crate::ValidationError(format!(
                "{}: task params disagree with the manifest",
                path.display()
            ))
            .into());
        }
        out.push(buffer);
    }
    Ok(out)
}
