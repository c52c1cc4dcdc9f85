use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Trajectory;

pub const SCHEMA_VERSION: u32 = 1;
const SCHEMA_NAME: &str = "agentq.trajectories";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

/// Writes a versioned header line followed by one trajectory per line.
pub fn save_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), StoreError> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        schema: SCHEMA_NAME.into(),
        version: SCHEMA_VERSION,
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for t in trajectories {
        writeln!(out, "{}", serde_json::to_string(t).expect("trajectory serializes"))?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>, StoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let violation = |message: String| StoreError::SchemaViolation { line: lineno, message };
        if i == 0 {
            let header: Header = serde_json::from_str(&line).map_err(|e| violation(format!("bad header: {e}")))?;
            if header.schema != SCHEMA_NAME || header.version != SCHEMA_VERSION {
                return Err(violation(format!(
                    "unsupported schema {} v{}",
                    header.schema, header.version
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| violation(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}
