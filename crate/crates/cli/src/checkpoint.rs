//! Checkpoint files: one JSON header line, then little-endian f64 values.
//!
//! Two kinds exist. `"trainer"` snapshots the full meta-training loop —
//! initializations, per-layer learning rates, and all four Adam states —
//! so a run can resume bit-exactly. `"nets"` stores just the two parameter
//! sets, which is all the multi-task baseline needs. The header records the
//! network layout (entry names and dimensions) and the blob is rejected on
//! load if it disagrees with the networks rebuilt from the run config.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use macaw_core::meta::{MetaParams, Trainer, TrainerState};
use macaw_core::opt::AdamState;
use macaw_core::params::ParamSet;
use macaw_core::tensor::{Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::ValidationError;

pub const KIND_TRAINER: &str = "trainer";
pub const KIND_NETS: &str = "nets";

/// Name and dimensions of one parameter-set entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryDesc {
    pub name: String,
    pub dims: Vec<usize>,
}

fn entry_descs(set: &ParamSet) -> Vec<EntryDesc> {
    set.iter()
        .map(|(name, t)| EntryDesc { name: name.to_string(), dims: t.shape().dims().to_vec() })
        .collect()
}

fn shape_of(dims: &[usize]) -> Result<Shape, ValidationError> {
    match dims {
        [] => Ok(Shape::scalar()),
        [n] => Ok(Shape::vector(*n)),
        [r, c] => Ok(Shape::matrix(*r, *c)),
        _ => Err(ValidationError(format!("checkpoint entry has rank {} > 2", dims.len()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: String,
    pub method: String,
    pub env: String,
    pub iteration: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub theta_entries: Vec<EntryDesc>,
    pub phi_entries: Vec<EntryDesc>,
    pub n_policy_lrs: usize,
    pub n_value_lrs: usize,
    /// Step counters of the four Adam optimizers (θ, φ, policy lrs, value
    /// lrs); all zero for `"nets"` checkpoints.
    pub adam_t: [u64; 4],
    /// Total f64 count in the blob; load fails if the byte length disagrees.
    pub total_f64: usize,
}

/// A parsed checkpoint: header plus the flat value vector.
#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<f64>,
}

/// Identity of the run a checkpoint belongs to.
pub struct RunInfo<'a> {
    pub method: &'a str,
    pub env: &'a str,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: &'a [usize],
    pub latent: usize,
}

fn write_file(path: &Path, header: &CheckpointHeader, values: &[f64]) -> std::io::Result<()> {
    debug_assert_eq!(header.total_f64, values.len());
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

fn extend_adam(values: &mut Vec<f64>, st: &AdamState) {
    values.extend_from_slice(&st.m);
    values.extend_from_slice(&st.v);
}

/// Save a full trainer snapshot.
pub fn save_trainer(path: &Path, info: &RunInfo, trainer: &Trainer) -> std::io::Result<()> {
    let st = trainer.state();
    let mut values = Vec::new();
    values.extend_from_slice(&st.theta);
    values.extend_from_slice(&st.phi);
    values.extend_from_slice(&st.policy_lrs);
    values.extend_from_slice(&st.value_lrs);
    extend_adam(&mut values, &st.opt_theta);
    extend_adam(&mut values, &st.opt_phi);
    extend_adam(&mut values, &st.opt_policy_lrs);
    extend_adam(&mut values, &st.opt_value_lrs);
    let header = CheckpointHeader {
        version: 1,
        kind: KIND_TRAINER.into(),
        method: info.method.into(),
        env: info.env.into(),
        iteration: st.iteration,
        obs_dim: info.obs_dim,
        act_dim: info.act_dim,
        hidden: info.hidden.to_vec(),
        latent: info.latent,
        theta_entries: entry_descs(&trainer.meta.theta),
        phi_entries: entry_descs(&trainer.meta.phi),
        n_policy_lrs: st.policy_lrs.len(),
        n_value_lrs: st.value_lrs.len(),
        adam_t: [st.opt_theta.t, st.opt_phi.t, st.opt_policy_lrs.t, st.opt_value_lrs.t],
        total_f64: values.len(),
    };
    write_file(path, &header, &values)
}

/// Save just the two parameter sets (multi-task baseline).
pub fn save_nets(
    path: &Path,
    info: &RunInfo,
    iteration: usize,
    theta: &ParamSet,
    phi: &ParamSet,
) -> std::io::Result<()> {
    let mut values = theta.flatten();
    values.extend_from_slice(&phi.flatten());
    let header = CheckpointHeader {
        version: 1,
        kind: KIND_NETS.into(),
        method: info.method.into(),
        env: info.env.into(),
        iteration,
        obs_dim: info.obs_dim,
        act_dim: info.act_dim,
        hidden: info.hidden.to_vec(),
        latent: info.latent,
        theta_entries: entry_descs(theta),
        phi_entries: entry_descs(phi),
        n_policy_lrs: 0,
        n_value_lrs: 0,
        adam_t: [0; 4],
        total_f64: values.len(),
    };
    write_file(path, &header, &values)
}

/// Read and parse a checkpoint file.
pub fn load(path: &Path) -> anyhow::Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| ValidationError(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| ValidationError(format!("{}: missing header line", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| ValidationError(format!("{}: bad header: {e}", path.display())))?;
    if header.version != 1 {
        return Err(
            ValidationError(format!("unsupported checkpoint version {}", header.version)).into()
        );
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != header.total_f64 * 8 {
        return Err(ValidationError(format!(
            "{}: blob holds {} bytes, header declares {} values",
            path.display(),
            blob.len(),
            header.total_f64
        ))
        .into());
    }
    let values: Vec<f64> =
        blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Checkpoint { header, values })
}

fn build_set(descs: &[EntryDesc], values: &mut &[f64]) -> anyhow::Result<ParamSet> {
    let mut set = ParamSet::new();
    for d in descs {
        let shape = shape_of(&d.dims)?;
        let n = shape.numel();
        if values.len() < n {
            return Err(ValidationError("checkpoint blob is shorter than its layout".into()).into());
        }
        let (head, tail) = values.split_at(n);
        set.push(d.name.clone(), Tensor::new(shape, head.to_vec()))
            .map_err(|e| ValidationError(format!("checkpoint layout: {e}")))?;
        *values = tail;
    }
    Ok(set)
}

fn take_adam(t: u64, dim: usize, values: &mut &[f64]) -> anyhow::Result<AdamState> {
    if values.len() < 2 * dim {
        return Err(ValidationError("checkpoint blob is shorter than its layout".into()).into());
    }
    let (m, rest) = values.split_at(dim);
    let (v, rest) = rest.split_at(dim);
    *values = rest;
    Ok(AdamState { t, m: m.to_vec(), v: v.to_vec() })
}

impl Checkpoint {
    /// Expect a given kind, or fail with a validation error.
    pub fn expect_kind(&self, kind: &str) -> anyhow::Result<()> {
        if self.header.kind != kind {
            return Err(ValidationError(format!(
                "checkpoint kind is `{}`, this operation needs `{kind}`",
                self.header.kind
            ))
            .into());
        }
        Ok(())
    }

    /// Check the checkpoint was produced by a compatible run.
    pub fn check_run(&self, info: &RunInfo) -> anyhow::Result<()> {
        let h = &self.header;
        if h.method != info.method
            || h.env != info.env
            || h.obs_dim != info.obs_dim
            || h.act_dim != info.act_dim
            || h.hidden != info.hidden
            || h.latent != info.latent
        {
            return Err(ValidationError(
                "checkpoint was produced by a different run configuration".into(),
            )
            .into());
        }
        Ok(())
    }

    /// Reconstruct the two parameter sets (both kinds store them first).
    pub fn meta_params(&self) -> anyhow::Result<MetaParams> {
        let mut rest: &[f64] = &self.values;
        let theta = build_set(&self.header.theta_entries, &mut rest)?;
        let phi = build_set(&self.header.phi_entries, &mut rest)?;
        if rest.len() < self.header.n_policy_lrs + self.header.n_value_lrs {
            return Err(ValidationError("checkpoint blob is shorter than its layout".into()).into());
        }
        let (plr, rest) = rest.split_at(self.header.n_policy_lrs);
        let (vlr, _) = rest.split_at(self.header.n_value_lrs);
        Ok(MetaParams {
            theta,
            phi,
            policy_lrs: plr.to_vec(),
            value_lrs: vlr.to_vec(),
        })
    }

    /// Reconstruct the full trainer state; `"trainer"` checkpoints only.
    pub fn trainer_state(&self) -> anyhow::Result<TrainerState> {
        self.expect_kind(KIND_TRAINER)?;
        let meta = self.meta_params()?;
        let n_theta = meta.theta.total_len();
        let n_phi = meta.phi.total_len();
        let skip = n_theta + n_phi + self.header.n_policy_lrs + self.header.n_value_lrs;
        let mut rest: &[f64] = &self.values[skip..];
        let t = self.header.adam_t;
        let st = TrainerState {
            iteration: self.header.iteration,
            theta: meta.theta.flatten(),
            phi: meta.phi.flatten(),
            policy_lrs: meta.policy_lrs,
            value_lrs: meta.value_lrs,
            opt_theta: take_adam(t[0], n_theta, &mut rest)?,
            opt_phi: take_adam(t[1], n_phi, &mut rest)?,
            opt_policy_lrs: take_adam(t[2], self.header.n_policy_lrs, &mut rest)?,
            opt_value_lrs: take_adam(t[3], self.header.n_value_lrs, &mut rest)?,
        };
        if !rest.is_empty() {
            return Err(ValidationError("checkpoint blob is longer than its layout".into()).into());
        }
        Ok(st)
    }
}
