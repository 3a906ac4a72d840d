//! Checkpoints are a single JSON document:
//!
//! ```text
//! { "format": "offrl-checkpoint", "version": 1, "state": <AgentState> }
//! ```
//!
//! `state` holds every network (weights `out × in` as ndarray's
//! `{"v":1,"dim":[..],"data":[..]}` layout), the Adam moments and step
//! counts, the behavior model if any, `log_eta`, the step counter and the
//! state normalizer. Floats round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AgentState;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "offrl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct EnvelopeRef<'a> {
    format: &'a str,
    version: u32,
    state: &'a AgentState,
}

#[derive(Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    state: AgentState,
}

pub fn save_checkpoint(state: &AgentState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &EnvelopeRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            state,
        },
    )?;
    w.flush()?;
    w.get_ref().sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AgentState> {
    let env: Envelope = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if env.format != CHECKPOINT_FORMAT || env.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint {} v{}",
            env.format, env.version
        )));
    }
    Ok(env.state)
}
