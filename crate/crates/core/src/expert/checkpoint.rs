//! Expert checkpoints.
//!
//! ```text
//! "MOTX" | u32 version=1 | u32 task_id | u32 d | u32 r | u8 mode (0 seq, 1 par)
//! | u32 scope_len | scope_len × u32 | d·r × f64 W_down | r·d × f64 W_up
//! ```
//!
//! Only trained experts are meant to be checkpointed; loading marks the
//! expert as trained.

use std::path::Path;

use super::{AdapterExpert, AdapterMode};
use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::numerics::DenseMatrix;

pub const EXPERT_MAGIC: [u8; 4] = *b"MOTX";
const VERSION: u32 = 1;

pub fn encode_expert(expert: &AdapterExpert) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&EXPERT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&expert.task_id().to_le_bytes());
    out.extend_from_slice(&(expert.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(expert.bottleneck() as u32).to_le_bytes());
    out.push(match expert.mode() {
        AdapterMode::Seq => 0,
        AdapterMode::Par => 1,
    });
    out.extend_from_slice(&(expert.scope().len() as u32).to_le_bytes());
    for c in expert.scope() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for m in [expert.w_down(), expert.w_up()] {
        for x in m.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_expert(bytes: &[u8]) -> Result<AdapterExpert> {
    let mut r = ByteReader::new(bytes);
    r.magic(EXPERT_MAGIC)?;
    r.version(VERSION)?;
    let task_id = r.u32("task_id")?;
    let d = r.u32("d")? as usize;
    let rank = r.u32("r")? as usize;
    let mode = match r.u8("mode")? {
        0 => AdapterMode::Seq,
        1 => AdapterMode::Par,
        value => return Err(Error::InvalidFlag { field: "mode", value }),
    };
    let scope_len = r.u32("scope length")? as usize;
    let scope = (0..scope_len)
        .map(|_| r.u32("scope id"))
        .collect::<Result<_>>()?;
    let w_down = DenseMatrix::new(d, rank, r.f64_vec(d * rank, "W_down")?)?;
    let w_up = DenseMatrix::new(rank, d, r.f64_vec(rank * d, "W_up")?)?;
    r.finish()?;
    AdapterExpert::from_weights(task_id, scope, w_down, w_up, mode, true)
}

pub fn write_expert(expert: &AdapterExpert, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_file(path.as_ref(), &encode_expert(expert))?;
    Ok(())
}

pub fn read_expert(path: impl AsRef<Path>) -> Result<AdapterExpert> {
    decode_expert(&crate::io::read_file(path.as_ref())?)
}
