//! Round-state checkpoints.
//!
//! Self-describing binary layout (little-endian):
//!
//! ```text
//! magic "FVCK" | schema u32 | strategy u8 | round u32 | m u64 |
//! theta f32[m] | sigma2 f32[m]
//! ```
//!
//! Parameters are stored at 32-bit precision; round boundaries quantize the
//! in-memory state to the same precision, so resuming from a checkpoint
//! reproduces a continuous run bit for bit.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use fiva_core::error::{Error, Result};
use fiva_core::server::GlobalState;
use fiva_core::welford::VarianceMode;
use fiva_core::ParamVector;

const MAGIC: &[u8; 4] = b"FVCK";
const SCHEMA: u32 = 1;

fn mode_tag(mode: VarianceMode) -> u8 {
    match mode {
        VarianceMode::None => 0,
        VarianceMode::FivaG => 1,
        VarianceMode::FivaP => 2,
    }
}

fn tag_mode(tag: u8) -> Result<VarianceMode> {
    match tag {
        0 => Ok(VarianceMode::None),
        1 => Ok(VarianceMode::FivaG),
        2 => Ok(VarianceMode::FivaP),
        other => Err(Error::Format(format!("unknown strategy tag {other}"))),
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub strategy: VarianceMode,
    pub state: GlobalState,
}

/// Round an f64 vector through f32 storage precision.
pub fn quantize(v: &ParamVector) -> ParamVector {
    v.map(|x| x as f32 as f64)
}

/// Quantize a state to storage precision (the canonical inter-round form).
pub fn quantize_state(state: &GlobalState) -> GlobalState {
    GlobalState {
        theta: quantize(&state.theta),
        sigma2: quantize(&state.sigma2),
        round: state.round,
    }
}

pub fn write_checkpoint(path: &Path, strategy: VarianceMode, state: &GlobalState) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&SCHEMA.to_le_bytes())?;
    out.write_all(&[mode_tag(strategy)])?;
    out.write_all(&(state.round as u32).to_le_bytes())?;
    out.write_all(&(state.theta.len() as u64).to_le_bytes())?;
    for &v in state.theta.iter() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    for &v in state.sigma2.iter() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let schema = u32::from_le_bytes(u32buf);
    if schema != SCHEMA {
        return Err(Error::Format(format!("unsupported checkpoint schema {schema}")));
    }
    let mut b = [0u8; 1];
    input.read_exact(&mut b)?;
    let strategy = tag_mode(b[0])?;
    input.read_exact(&mut u32buf)?;
    let round = u32::from_le_bytes(u32buf) as u64;
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u64buf)?;
    let m = u64::from_le_bytes(u64buf) as usize;
    let mut read_vec = |m: usize| -> Result<ParamVector> {
        let mut values = vec![0.0f64; m];
        let mut f32buf = [0u8; 4];
        for v in &mut values {
            input.read_exact(&mut f32buf)?;
            *v = f32::from_le_bytes(f32buf) as f64;
        }
        Ok(ParamVector::from_vec(values))
    };
    let theta = read_vec(m)?;
    let sigma2 = read_vec(m)?;
    if !theta.all_finite() {
        return Err(Error::NonFinite("checkpoint theta"));
    }
    Ok(Checkpoint {
        strategy,
        state: GlobalState {
            theta,
            sigma2,
            round,
        },
    })
}
